mod common;

use std::sync::Arc;

use common::*;
use serde_json::json;
use vdr::rollout::{tasks_for, RolloutMode, RolloutTask};
use vdr::sim_agents::SimModels;
use vdr::tools::{Dispatch, ToolPool};
use vdr::GatewayError;
use vdr_core::codec::encode_lines;
use vdr_core::{Budgets, ObservationStatus, Termination, FORMAT_ERROR_MESSAGE};

fn task(id: &str) -> RolloutTask {
    RolloutTask {
        task_id: id.into(),
        instance: text_instance(id, "Who founded the observatory?", "Ada"),
        budgets: Budgets::default(),
        mode: RolloutMode::CisTs,
    }
}

fn local_pool() -> Dispatch {
    Dispatch::Pool(ToolPool::new(8, std::time::Duration::from_secs(10)))
}

#[tokio::test]
async fn terminal_answer_ends_the_rollout() {
    let r = runner(policy(|_| Ok(answer("Ada"))), world()).run_task(&task("a"), local_pool()).await;
    assert_eq!(r.trajectory.termination, Some(Termination::Answered));
    assert_eq!(r.trajectory.steps.len(), 1);
    assert_eq!(r.trajectory.final_answer(), Some("Ada"));
    assert_eq!(r.metrics.turns, 1);
}

#[tokio::test]
async fn never_answering_policy_stops_at_fifty_turns() {
    let p = policy(|req| Ok(web_search(turn(req), &format!("observatory {}", turn(req)))));
    let r = runner(p, world()).run_task(&task("loop"), local_pool()).await;
    assert_eq!(r.trajectory.termination, Some(Termination::MaxTurns));
    assert_eq!(r.trajectory.steps.len(), 50);
    assert_eq!(r.trajectory.last_turn(), 50);
    assert_eq!(r.metrics.tool_calls, 50);
}

#[tokio::test]
async fn format_errors_recover_then_cascade_on_the_third() {
    let r = runner(policy(|_| Ok("I will just talk.".into())), world()).run_task(&task("fmt"), local_pool()).await;
    assert_eq!(r.trajectory.termination, Some(Termination::ErrorCascade));
    assert_eq!(r.trajectory.steps.len(), 3);
    for s in &r.trajectory.steps {
        assert_eq!(s.observations.len(), 1);
        assert_eq!(s.observations[0].status, ObservationStatus::FormatError);
        assert_eq!(s.observations[0].content, FORMAT_ERROR_MESSAGE);
    }
}

#[tokio::test]
async fn a_success_resets_the_error_count() {
    // err, err, ok, err, err, answer
    let p = policy(|req| {
        Ok(match turn(req) {
            3 => web_search(3, "Granite Observatory"),
            6 => answer("Ada"),
            _ => "<think>unclosed".into(),
        })
    });
    let r = runner(p, world()).run_task(&task("reset"), local_pool()).await;
    assert_eq!(r.trajectory.termination, Some(Termination::Answered));
    assert_eq!(r.trajectory.steps.len(), 6);
}

#[tokio::test]
async fn tool_errors_count_toward_the_cascade() {
    let p = policy(|req| Ok(call(&format!("v{}", turn(req)), "visit_page", json!({"url": "https://sim.vdr/wiki/nowhere"}))));
    let r = runner(p, world()).run_task(&task("404"), local_pool()).await;
    assert_eq!(r.trajectory.termination, Some(Termination::ErrorCascade));
    assert_eq!(r.trajectory.steps.len(), 3);
    assert!(r.trajectory.steps.iter().all(|s| s.observations[0].status == ObservationStatus::ToolError));
}

#[tokio::test]
async fn repetition_terminates_on_the_first_offending_turn() {
    let unit = "abcdefghijklmnopqrstuvwxyz012345";
    assert_eq!(unit.len(), 32);
    let p = policy(move |req| {
        Ok(if turn(req) < 3 { web_search(turn(req), "Granite Observatory") } else { format!("<think>{}</think>", unit.repeat(40)) })
    });
    let r = runner(p, world()).run_task(&task("rep"), local_pool()).await;
    assert_eq!(r.trajectory.termination, Some(Termination::Repetition));
    assert_eq!(r.trajectory.steps.len(), 2);
}

#[tokio::test]
async fn oversized_turn_is_a_context_overrun() {
    let long: String = (0..20_000u32).map(|i| char::from(b'a' + ((i * 7919 + i / 26) % 26) as u8)).collect();
    let p = policy(move |_| Ok(format!("<think>{long}</think>\n<answer>x</answer>")));
    let r = runner(p, world()).run_task(&task("big"), local_pool()).await;
    assert_eq!(r.trajectory.termination, Some(Termination::ContextExceeded));
    assert!(r.trajectory.steps.is_empty());
}

#[tokio::test]
async fn six_crops_give_six_observations_in_crop_order() {
    let w = world();
    let image = busy_image(&w, 2).clone();
    let regions = image.sim_regions().unwrap().to_vec();
    let crops: Vec<_> = (0..6)
        .map(|k| {
            let b = regions[k % regions.len()].region;
            json!({"box": [b.x0, b.y0, b.x1, b.y1], "scale": 1.0 + k as f64 * 0.25})
        })
        .collect();
    let img_id = image.id.clone();
    let p = policy(move |req| {
        Ok(if turn(req) == 1 {
            call("v1", "visual_search", json!({"image_id": img_id, "crops": crops}))
        } else {
            answer("x")
        })
    });
    let t = RolloutTask {
        task_id: "crops".into(),
        instance: image_instance("crops", &image, "What is the name of the statue in the image?", "x"),
        budgets: Budgets::default(),
        mode: RolloutMode::CisTs,
    };
    let r = runner(p, w).run_task(&t, local_pool()).await;
    let obs = &r.trajectory.steps[0].observations;
    let ids: Vec<&str> = obs.iter().map(|o| o.for_call.as_str()).collect();
    assert_eq!(ids, ["v1#0", "v1#1", "v1#2", "v1#3", "v1#4", "v1#5"]);
}

#[tokio::test]
async fn failing_policy_is_captured_per_task() {
    let p = policy(|req| {
        if req.get("task") == "bad" {
            Err(GatewayError::Exhausted { attempts: 3, last: "down".into() })
        } else {
            Ok(answer("Ada"))
        }
    });
    let tasks = vec![task("good-1"), task("bad"), task("good-2")];
    let results = runner(p, world()).run_batch(&tasks, 4, 4).await.unwrap();
    let ids: Vec<&str> = results.iter().map(|r| r.metrics.task_id.as_str()).collect();
    assert_eq!(ids, ["good-1", "bad", "good-2"]);
    assert_eq!(results[1].trajectory.termination, Some(Termination::ErrorCascade));
    assert_eq!(results[0].trajectory.termination, Some(Termination::Answered));
    assert_eq!(results[2].trajectory.termination, Some(Termination::Answered));
}

#[tokio::test]
async fn invalid_batch_arguments_are_rejected() {
    let r = runner(policy(|_| Ok(answer("x"))), world());
    assert!(r.run_batch(&[task("a")], 0, 4).await.is_err());
    assert!(r.run_batch(&[task("a")], 4, 0).await.is_err());
    let mut bad = task("b");
    bad.budgets.max_turns = 0;
    assert!(r.run_batch(&[bad], 4, 4).await.is_err());
}

fn sim_tasks(world: &vdr_core::sim::SimWorld) -> Vec<RolloutTask> {
    let instances: Vec<_> = world
        .images
        .iter()
        .filter_map(|img| {
            let region = img.sim_regions()?.first()?;
            let e = world.entity_by_descriptor(&region.descriptor)?;
            Some(image_instance(
                &img.id,
                img,
                &format!("What is the name of the {} in the image?", e.kind),
                &e.name,
            ))
        })
        .take(24)
        .collect();
    tasks_for(&instances, 2, Budgets::default(), RolloutMode::CisTs)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn outputs_do_not_depend_on_concurrency() {
    let w = world_with(vdr_core::sim::WorldSpec {
        latency: vdr_core::sim::LatencyModel::uniform(vdr_core::sim::LatencyDist::Uniform { min_ms: 0, max_ms: 3 }),
        ..Default::default()
    });
    let models = Arc::new(SimModels::new(w.clone(), 0.3));
    let r = runner(models, w.clone());
    let tasks = sim_tasks(&w);
    assert_eq!(tasks.len(), 48);
    assert!(tasks[0].task_id.ends_with("#0") && tasks[1].task_id.ends_with("#1"));
    let one = r.run_batch(&tasks, 1, 1).await.unwrap();
    let many = r.run_batch(&tasks, 64, 32).await.unwrap();
    let seq = r.run_batch_sync(&tasks).await.unwrap();
    let bytes = |rs: &[vdr::rollout::RolloutResult]| encode_lines(rs.iter().map(|r| &r.trajectory));
    assert_eq!(bytes(&one), bytes(&many));
    assert_eq!(bytes(&one), bytes(&seq));
    assert!(one.iter().any(|r| r.trajectory.final_answer() == r.trajectory.ground_truth.as_deref()));
}

#[tokio::test]
async fn single_task_matches_sequential_execution() {
    let w = world();
    let r = runner(Arc::new(SimModels::new(w.clone(), 0.0)), w.clone());
    let tasks = sim_tasks(&w)[..1].to_vec();
    let a = r.run_batch(&tasks, 1, 32).await.unwrap();
    let b = r.run_batch_sync(&tasks).await.unwrap();
    assert_eq!(a[0].trajectory, b[0].trajectory);
}

#[tokio::test]
async fn mode_permissions_are_enforced() {
    let w = world();
    let image = busy_image(&w, 2).clone();
    let b = image.sim_regions().unwrap()[0].region;
    let img_id = image.id.clone();
    let p = policy(move |req| {
        Ok(match turn(req) {
            1 => call("v1", "visual_search", json!({"image_id": img_id, "crops": [{"box": [b.x0, b.y0, b.x1, b.y1], "scale": 1.0}]})),
            2 => web_search(2, "observatory"),
            _ => answer("x"),
        })
    });
    let mut t = RolloutTask {
        task_id: "perm".into(),
        instance: image_instance("perm", &image, "q?", "x"),
        budgets: Budgets::default(),
        mode: RolloutMode::Wis,
    };
    let r = runner(p.clone(), w.clone()).run_task(&t, local_pool()).await;
    assert_eq!(r.trajectory.steps[0].observations[0].status, ObservationStatus::ToolError);
    assert_eq!(r.trajectory.steps[1].observations[0].status, ObservationStatus::ToolError);
    t.mode = RolloutMode::CisTs;
    let r = runner(p, w).run_task(&t, local_pool()).await;
    assert_eq!(r.trajectory.steps[1].observations[0].status, ObservationStatus::Ok);
}

#[tokio::test]
async fn metrics_serialize_one_line_each() {
    let results = runner(policy(|_| Ok(answer("Ada"))), world()).run_batch(&[task("m")], 1, 1).await.unwrap();
    let line = serde_json::to_value(&results[0].metrics).unwrap();
    for key in ["task_id", "turns", "tokens", "tool_calls", "wall_ms", "termination"] {
        assert!(line.get(key).is_some(), "missing {key}");
    }
    assert_eq!(line["termination"], "answered");
}
