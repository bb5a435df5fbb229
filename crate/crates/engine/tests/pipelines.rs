mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use vdr::bridge::{bridge_context, merge, rejection_sample, split, SampleVerdict};
use vdr::config::EngineConfig;
use vdr::forge::{filter_candidate, filter_image, forge_pools, InstanceSource, Verdict};
use vdr::gateway::ChatModel;
use vdr::prompts::Prompts;
use vdr::rlprep::{build_groups, judge_reward, write_batch, SampleRecord, BATCH_FORMAT};
use vdr::sim_agents::SimModels;
use vdr::synth::{synthesize_pool, synthesize_trajectory, SynthSettings};
use vdr::vision::{run_vision_phase, VisionConfig, VisionDeps};
use vdr_core::sim::WorldSpec;
use vdr_core::{Budgets, ByteQuarterCounter, MaskRule, Phase, Termination, Trajectory};

fn exact_verifier() -> Arc<dyn ChatModel> {
    policy(|req| Ok(if req.get("answer").trim() == req.get("ground_truth").trim() { "yes".into() } else { "no".into() }))
}

#[tokio::test]
async fn vision_phase_stops_on_the_first_hit() {
    let w = world();
    let image = busy_image(&w, 2).clone();
    let mllm = SimModels::new(w.clone(), 0.0);
    let prompts = Prompts::default();
    for k in [1usize, 3] {
        let calls = AtomicUsize::new(0);
        let judge = vdr::scripted::FnModel(move |_: &vdr::gateway::ChatRequest| {
            let n = calls.fetch_add(1, Ordering::SeqCst) + 1;
            Ok(if n >= k { r#"{"hit": 1, "rationale": "ok"}"#.to_string() } else { r#"{"hit": 0}"#.to_string() })
        });
        let deps = VisionDeps {
            mllm: &mllm,
            judge: &judge,
            backend: Arc::new(vdr::tools::SimToolBackend::new(w.clone())),
            dispatch: pool(),
            prompts: &prompts,
            counter: &ByteQuarterCounter,
            seed: 0,
        };
        let out = run_vision_phase("g", &image, "q?", "a", &Budgets::default(), &VisionConfig::default(), &deps).await;
        assert_eq!(out.trajectory.steps.len(), k);
        assert_eq!(out.trajectory.termination, Some(Termination::JudgeHitThenAnswered));
        assert!(out.trajectory.steps.iter().all(|s| s.phase == Phase::Vision));
    }
}

#[tokio::test]
async fn vision_phase_without_a_hit_stops_at_its_cap() {
    let w = world();
    let image = busy_image(&w, 2).clone();
    let mllm = SimModels::new(w.clone(), 0.0);
    let prompts = Prompts::default();
    let judge = vdr::scripted::FnModel(|_: &vdr::gateway::ChatRequest| Ok("no".to_string()));
    let deps = VisionDeps {
        mllm: &mllm,
        judge: &judge,
        backend: Arc::new(vdr::tools::SimToolBackend::new(w.clone())),
        dispatch: pool(),
        prompts: &prompts,
        counter: &ByteQuarterCounter,
        seed: 0,
    };
    let out = run_vision_phase("g", &image, "q?", "a", &Budgets::default(), &VisionConfig::default(), &deps).await;
    assert_eq!(out.trajectory.steps.len(), 8);
    assert_eq!(out.trajectory.termination, Some(Termination::MaxTurns));
    assert!(out.hits.iter().all(|h| !h.hit));
}

fn settings() -> SynthSettings {
    SynthSettings::default()
}

async fn sample_trajectories(n: usize) -> Vec<Trajectory> {
    let (_, svc) = services(WorldSpec::default(), 0.0);
    let w = svc.world.clone().unwrap();
    let deps = synth_deps(&svc);
    let mut out = Vec::new();
    for img in w.images.iter().filter(|i| i.sim_regions().is_some_and(|r| !r.is_empty())).take(n) {
        let region = &img.sim_regions().unwrap()[0];
        let e = w.entity_by_descriptor(&region.descriptor).unwrap();
        let inst = image_instance(&img.id, img, &format!("What is the name of the {} in the image?", e.kind), &e.name);
        out.push(synthesize_trajectory(&inst, &settings(), &deps).await.unwrap());
    }
    out
}

#[tokio::test]
async fn merged_trajectories_split_back_into_their_phases() {
    let trajs = sample_trajectories(12).await;
    assert!(trajs.iter().any(|t| t.t_v > 0 && (t.steps.len() as u32) > t.t_v));
    for t in &trajs {
        t.validate().unwrap();
        let turns: Vec<u32> = t.steps.iter().map(|s| s.turn).collect();
        assert_eq!(turns, (1..=t.steps.len() as u32).collect::<Vec<_>>());
        let (vision, text) = split(t);
        let bridged = bridge_context(&vision, "a description", "continue").unwrap();
        assert_eq!(bridged.steps, vision.steps);
        let again = merge(&vision, &text, t.description.as_deref()).unwrap();
        assert_eq!(&again, t);
    }
}

#[tokio::test]
async fn text_only_instances_have_no_vision_steps() {
    let (_, svc) = services(WorldSpec::default(), 0.0);
    let w = svc.world.clone().unwrap();
    let e = &w.entities[0];
    let inst = text_instance("t", &format!("What is the name of {}?", e.name), &e.name);
    let t = synthesize_trajectory(&inst, &settings(), &synth_deps(&svc)).await.unwrap();
    assert_eq!(t.t_v, 0);
    assert!(t.image.is_none() && t.description.is_none());
    assert!(t.steps.iter().all(|s| s.phase == Phase::Text));
}

#[tokio::test]
async fn bridging_rejects_text_steps() {
    let trajs = sample_trajectories(6).await;
    let t = trajs.iter().find(|t| (t.steps.len() as u32) > t.t_v).unwrap();
    assert!(bridge_context(t, "d", "c").is_err());
}

#[tokio::test]
async fn rejection_sampling_keeps_matching_answers() {
    let v = exact_verifier();
    let p = Prompts::default();
    let mut t = Trajectory::new("r", "q?").with_ground_truth("Ada");
    assert_eq!(rejection_sample(&t, v.as_ref(), &p).await, SampleVerdict::Discard("no_answer".into()));
    t.steps.push(vdr_core::Step {
        turn: 1,
        phase: Phase::Text,
        reasoning: String::new(),
        action: vdr_core::Action::Answer { text: "Ada".into() },
        observations: Vec::new(),
    });
    assert_eq!(rejection_sample(&t, v.as_ref(), &p).await, SampleVerdict::Keep);
    let failing = vdr::scripted::ScriptedModel::failing();
    assert_eq!(rejection_sample(&t, &failing, &p).await, SampleVerdict::Discard("unverifiable".into()));
}

#[tokio::test]
async fn synthesis_pool_preserves_input_order() {
    let (_, svc) = services(WorldSpec::default(), 0.0);
    let w = svc.world.clone().unwrap();
    let instances: Vec<_> = w
        .entities
        .iter()
        .take(8)
        .enumerate()
        .map(|(i, e)| text_instance(&format!("t{i}"), &format!("What is the name of {}?", e.name), if i % 2 == 0 { &e.name } else { "wrong" }))
        .collect();
    let mut deps = synth_deps(&svc);
    deps.verifier = exact_verifier();
    let report = synthesize_pool(&instances, &settings(), &deps, 4).await;
    let kept: Vec<&str> = report.kept.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(kept, ["t0", "t2", "t4", "t6"]);
    assert_eq!(report.discarded.len(), 4);
}

#[tokio::test]
async fn image_filter_applies_the_size_rule_first() {
    let w = world();
    let mut image = busy_image(&w, 1).clone();
    let p = Prompts::default();
    let counted = Arc::new(AtomicUsize::new(0));
    let c = counted.clone();
    let keep = policy(move |_| {
        c.fetch_add(1, Ordering::SeqCst);
        Ok("keep".into())
    });
    image.width = 200;
    image.height = 300;
    assert_eq!(filter_image(&image, keep.as_ref(), &p).await, Verdict::Discard("size".into()));
    assert_eq!(counted.load(Ordering::SeqCst), 0);
    image.width = 224;
    image.height = 224;
    assert_eq!(filter_image(&image, keep.as_ref(), &p).await, Verdict::Keep);
    let reject = policy(|_| Ok("reject: too plain".into()));
    assert_eq!(filter_image(&image, reject.as_ref(), &p).await, Verdict::Discard("selector".into()));
}

#[tokio::test]
async fn candidate_filter_drops_easy_questions() {
    let (_, svc) = services(WorldSpec::default(), 0.0);
    let w = svc.world.clone().unwrap();
    let p = Prompts::default();
    let e = &w.entities[0];
    let inst = text_instance("easy", "Who?", &e.name);
    let name = e.name.clone();
    let knows = policy(move |_| Ok(name.clone()));
    let clueless = policy(|_| Ok("no idea".into()));
    assert_eq!(
        filter_candidate(&inst, knows.as_ref(), &svc.backend, &p).await,
        Verdict::Discard("direct_answerable".into())
    );
    assert_eq!(filter_candidate(&inst, clueless.as_ref(), &svc.backend, &p).await, Verdict::Keep);
    let single = w
        .images
        .iter()
        .find(|i| i.sim_regions().is_some_and(|r| r.len() == 1 && r[0].region.area() * 2 > u64::from(i.width) * u64::from(i.height)))
        .unwrap();
    let inst = image_instance("whole", single, "Who?", "x");
    assert_eq!(
        filter_candidate(&inst, clueless.as_ref(), &svc.backend, &p).await,
        Verdict::Discard("full_image_hit".into())
    );
}

#[tokio::test]
async fn forged_pools_are_valid_and_alternate() {
    let (cfg, svc) = services(WorldSpec::default(), 0.0);
    let w = svc.world.clone().unwrap();
    let deps = forge_deps(&cfg, &svc);
    let urls: Vec<String> = w.pages.iter().take(10).map(|p| p.url.clone()).collect();
    let report = forge_pools(&w.images[..40], &urls, 3, 2, &deps, 8).await;
    assert!(!report.fuzzy.is_empty() && !report.curated.is_empty() && !report.text_only.is_empty());
    for f in &report.fuzzy {
        f.validate().unwrap();
        assert_eq!(f.source, InstanceSource::FuzzySynth);
        assert_eq!(f.provenance.len(), 3);
        assert!(f.alternates());
    }
    for t in &report.text_only {
        assert!(t.image.is_none());
        t.validate().unwrap();
    }
    for (id, stage, reason) in &report.discarded {
        if stage == "image" && reason == "size" {
            let img = w.image(id).unwrap();
            assert!(img.width.min(img.height) < 224);
        }
    }
    for inst in report.curated.iter().chain(&report.fuzzy) {
        let img = inst.image.as_ref().unwrap();
        assert!(img.width.min(img.height) >= 224);
    }
    let again = forge_pools(&w.images[..40], &urls, 3, 2, &deps, 3).await;
    assert_eq!(again.fuzzy, report.fuzzy);
}

fn answered(id: &str, answer: Option<&str>, truth: &str, malformed: bool) -> Trajectory {
    let mut t = Trajectory::new(id, "q?").with_ground_truth(truth);
    let mut turn = 1;
    if malformed {
        t.steps.push(vdr_core::Step {
            turn,
            phase: Phase::Text,
            reasoning: String::new(),
            action: vdr_core::Action::Malformed { raw: "oops".into() },
            observations: vec![vdr_core::Observation::format_error("turn-1")],
        });
        turn += 1;
    }
    if let Some(a) = answer {
        t.steps.push(vdr_core::Step {
            turn,
            phase: Phase::Text,
            reasoning: String::new(),
            action: vdr_core::Action::Answer { text: a.into() },
            observations: Vec::new(),
        });
        t.termination = Some(Termination::Answered);
    } else {
        t.termination = Some(Termination::MaxTurns);
    }
    t
}

#[tokio::test]
async fn rewards_follow_the_judge() {
    let v = exact_verifier();
    let p = Prompts::default();
    assert_eq!(judge_reward(&answered("a", Some("x"), "x", false), v.as_ref(), &p, false).await.unwrap().value, 1.0);
    assert_eq!(judge_reward(&answered("a", Some("y"), "x", false), v.as_ref(), &p, false).await.unwrap().value, 0.0);
    assert_eq!(judge_reward(&answered("a", None, "x", false), v.as_ref(), &p, false).await.unwrap().value, 0.0);
    assert_eq!(judge_reward(&answered("a", Some("x"), "x", true), v.as_ref(), &p, false).await.unwrap().value, 1.0);
    assert_eq!(judge_reward(&answered("a", Some("x"), "x", true), v.as_ref(), &p, true).await.unwrap().value, 0.0);
    let failing = vdr::scripted::ScriptedModel::failing();
    let r = judge_reward(&answered("a", Some("x"), "x", false), &failing, &p, false).await.unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.audit.is_some());
    let mut no_truth = answered("a", Some("x"), "x", false);
    no_truth.ground_truth = None;
    assert!(judge_reward(&no_truth, v.as_ref(), &p, false).await.is_err());
}

#[tokio::test]
async fn groups_carry_leave_one_out_advantages() {
    let v = exact_verifier();
    let p = Prompts::default();
    let trajs = vec![
        answered("p1#0", Some("x"), "x", false),
        answered("p1#1", Some("y"), "x", false),
        answered("p0#0", Some("x"), "x", false),
        answered("p0#1", Some("x"), "x", false),
    ];
    let report = build_groups(trajs.clone(), 2, v.as_ref(), &p, &MaskRule::default(), false).await.unwrap();
    assert_eq!(report.groups.len(), 2);
    assert_eq!(report.groups[0].prompt_id, "p0");
    assert_eq!(report.groups[0].advantages, vec![0.0, 0.0]);
    assert_eq!(report.groups[1].rewards, vec![1.0, 0.0]);
    assert_eq!(report.groups[1].advantages, vec![1.0, -1.0]);
    assert!(build_groups(trajs.clone(), 3, v.as_ref(), &p, &MaskRule::default(), false).await.is_err());
    assert!(build_groups(trajs[..1].to_vec(), 1, v.as_ref(), &p, &MaskRule::default(), false).await.is_err());

    let mut buf = Vec::new();
    write_batch(&report.groups, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["format"], BATCH_FORMAT);
    assert_eq!(header["samples"], 4);
    let s: SampleRecord = serde_json::from_str(lines[4]).unwrap();
    assert_eq!((s.prompt_id.as_str(), s.index, s.reward, s.advantage), ("p1", 1, 0.0, -1.0));
    assert_eq!(s.trajectory, trajs[1]);
}

#[tokio::test]
async fn masked_members_stay_in_the_batch() {
    let v = exact_verifier();
    let p = Prompts::default();
    let mut bad = answered("p#1", Some("x"), "x", false);
    bad.termination = Some(Termination::ErrorCascade);
    let trajs = vec![answered("p#0", Some("y"), "x", false), bad, answered("p#2", Some("x"), "x", false)];
    let report = build_groups(trajs, 3, v.as_ref(), &p, &MaskRule::default(), false).await.unwrap();
    let g = &report.groups[0];
    assert_eq!(g.masked, vec![false, true, false]);
    assert_eq!(g.advantages, vec![-1.0, 0.5, 0.5]);
}

#[test]
fn config_errors_name_the_field() {
    let err = EngineConfig::from_toml_str("[rollout]\nconcurrency = 0\n").unwrap_err().to_string();
    assert!(err.contains("rollout.concurrency"), "{err}");
    let err = EngineConfig::from_toml_str("[rollout]\nconcurency = 4\n").unwrap_err().to_string();
    assert!(err.contains("concurency"), "{err}");
    let err = EngineConfig::from_toml_str("backend = \"live\"\n").unwrap_err().to_string();
    assert!(err.contains("endpoints.policy"), "{err}");
    let cfg = EngineConfig::from_toml_str("seed = 9\n[budgets]\nmax_turns = 20\n").unwrap();
    assert_eq!((cfg.seed, cfg.budgets.max_turns), (9, 20));
}

#[tokio::test]
async fn sim_models_are_shared_across_roles() {
    let (_, svc) = services(WorldSpec::default(), 0.0);
    assert!(svc.world.is_some());
    let _ = SimModels::new(svc.world.unwrap(), 0.5);
}
