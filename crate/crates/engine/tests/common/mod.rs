#![allow(dead_code)]

use std::sync::Arc;

use serde_json::{json, Value};
use vdr::config::{EngineConfig, Services};
use vdr::forge::{ForgeDeps, InstanceSource, VqaInstance};
use vdr::synth::SynthDeps;
use vdr::tools::{Dispatch, ToolPool};
use vdr::gateway::{ChatModel, ChatRequest};
use vdr::prompts::Prompts;
use vdr::rollout::{RolloutRunner, RolloutSettings};
use vdr::scripted::FnModel;
use vdr::tools::SimToolBackend;
use vdr::GatewayError;
use vdr_core::sim::{SimWorld, WorldSpec};
use vdr_core::{ByteQuarterCounter, ImageRef};

pub fn world() -> Arc<SimWorld> {
    Arc::new(WorldSpec::default().build())
}

pub fn world_with(spec: WorldSpec) -> Arc<SimWorld> {
    Arc::new(spec.build())
}

pub fn runner(policy: Arc<dyn ChatModel>, world: Arc<SimWorld>) -> RolloutRunner {
    RolloutRunner {
        policy,
        backend: Arc::new(SimToolBackend::new(world)),
        counter: Arc::new(ByteQuarterCounter),
        prompts: Arc::new(Prompts::default()),
        settings: RolloutSettings::default(),
    }
}

pub fn policy<F>(f: F) -> Arc<dyn ChatModel>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
{
    Arc::new(FnModel(f))
}

pub fn turn(req: &ChatRequest) -> u32 {
    req.get("turn").parse().unwrap()
}

pub fn call(id: &str, name: &str, arguments: Value) -> String {
    let body = json!([{"id": id, "name": name, "arguments": arguments}]);
    format!("<think>working</think>\n<tool_call>{body}</tool_call>")
}

pub fn web_search(turn: u32, query: &str) -> String {
    call(&format!("c{turn}"), "web_search", json!({"query": query}))
}

pub fn answer(text: &str) -> String {
    format!("<think>done</think>\n<answer>{text}</answer>")
}

pub fn text_instance(id: &str, question: &str, answer: &str) -> VqaInstance {
    VqaInstance {
        id: id.into(),
        image: None,
        question: question.into(),
        answer: answer.into(),
        provenance: Vec::new(),
        source: InstanceSource::TextOnly,
        frame: None,
    }
}

pub fn image_instance(id: &str, image: &ImageRef, question: &str, answer: &str) -> VqaInstance {
    VqaInstance {
        id: id.into(),
        image: Some(image.clone()),
        question: question.into(),
        answer: answer.into(),
        provenance: Vec::new(),
        source: InstanceSource::Curated,
        frame: None,
    }
}

/// Image with at least `n` entity regions.
pub fn busy_image(world: &SimWorld, n: usize) -> &ImageRef {
    world
        .images
        .iter()
        .find(|i| i.sim_regions().is_some_and(|r| r.len() >= n) && i.width.min(i.height) >= 224)
        .expect("world has a busy image")
}

/// Sim-backed services for `spec`.
pub fn services(spec: WorldSpec, noise: f64) -> (EngineConfig, Services) {
    let mut cfg = EngineConfig::default();
    cfg.world = spec;
    cfg.sim.noise = noise;
    let svc = cfg.services().expect("sim services");
    (cfg, svc)
}

pub fn pool() -> Dispatch {
    Dispatch::Pool(ToolPool::new(32, std::time::Duration::from_secs(30)))
}

pub fn forge_deps(cfg: &EngineConfig, svc: &Services) -> ForgeDeps {
    ForgeDeps {
        mllm: svc.mllm.clone(),
        selector: svc.selector.clone(),
        writer: svc.writer.clone(),
        backend: svc.backend.clone(),
        knowledge: svc.knowledge.clone(),
        prompts: svc.prompts.clone(),
        scales: cfg.vision.scales.clone(),
        seed: cfg.seed,
    }
}

pub fn synth_deps(svc: &Services) -> SynthDeps {
    SynthDeps {
        mllm: svc.mllm.clone(),
        judge: svc.judge.clone(),
        foundation: svc.foundation.clone(),
        verifier: svc.judge.clone(),
        backend: svc.backend.clone(),
        dispatch: pool(),
        prompts: svc.prompts.clone(),
        counter: svc.counter.clone(),
    }
}
