//! Async-versus-synchronous rollout throughput on the simulated world.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vdr_core::sim::{LatencyDist, LatencyModel, WorldSpec};
use vdr_core::ByteQuarterCounter;

use crate::error::{GatewayError, PipelineError};
use crate::forge::{InstanceSource, VqaInstance};
use crate::gateway::ChatRequest;
use crate::prompts::Prompts;
use crate::rollout::{tasks_for, RolloutMode, RolloutRunner, RolloutSettings};
use crate::scripted::FnModel;
use crate::tools::SimToolBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub tasks: usize,
    pub concurrency: usize,
    pub tool_pool_size: usize,
    pub latency: LatencyDist,
    pub world: WorldSpec,
    pub seed: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            tasks: 64,
            concurrency: 64,
            tool_pool_size: 32,
            latency: LatencyDist::Uniform { min_ms: 200, max_ms: 800 },
            world: WorldSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub tasks: usize,
    pub concurrency: usize,
    pub tool_pool_size: usize,
    pub latency: LatencyDist,
    pub async_ms: u64,
    pub sync_ms: u64,
    pub speedup: f64,
    pub async_tasks_per_sec: f64,
    pub sync_tasks_per_sec: f64,
    /// Both runs produced the same trajectories.
    pub identical: bool,
}

/// One web search, then an answer.
pub fn single_search_policy() -> FnModel<impl Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync> {
    FnModel(|req: &ChatRequest| {
        Ok(if req.get("turn") == "1" {
            let call = serde_json::json!([{"id": "s1", "name": "web_search", "arguments": {"query": req.get("question")}}]);
            format!("<think>look it up</think>\n<tool_call>{call}</tool_call>")
        } else {
            "<think>found it</think>\n<answer>done</answer>".to_string()
        })
    })
}

pub fn bench_instances(n: usize) -> Vec<VqaInstance> {
    (0..n)
        .map(|i| VqaInstance {
            id: format!("bench-{i:04}"),
            image: None,
            question: format!("entity {i} page"),
            answer: "done".into(),
            provenance: Vec::new(),
            source: InstanceSource::TextOnly,
            frame: None,
        })
        .collect()
}

pub async fn run_bench(params: &BenchParams) -> Result<BenchReport, PipelineError> {
    let mut spec = params.world.clone();
    spec.latency = LatencyModel::uniform(params.latency);
    let world = Arc::new(spec.build());
    let runner = RolloutRunner {
        policy: Arc::new(single_search_policy()),
        backend: Arc::new(SimToolBackend::new(world)),
        counter: Arc::new(ByteQuarterCounter),
        prompts: Arc::new(Prompts::default()),
        settings: RolloutSettings { seed: params.seed, ..RolloutSettings::default() },
    };
    let tasks = tasks_for(&bench_instances(params.tasks), 1, Default::default(), RolloutMode::CisTs);

    let t0 = Instant::now();
    let fast = runner.run_batch(&tasks, params.concurrency, params.tool_pool_size).await?;
    let async_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let slow = runner.run_batch_sync(&tasks).await?;
    let sync_secs = t1.elapsed().as_secs_f64();

    let identical = fast.len() == slow.len() && fast.iter().zip(&slow).all(|(a, b)| a.trajectory == b.trajectory);
    let n = params.tasks as f64;
    Ok(BenchReport {
        tasks: params.tasks,
        concurrency: params.concurrency,
        tool_pool_size: params.tool_pool_size,
        latency: params.latency,
        async_ms: (async_secs * 1000.0) as u64,
        sync_ms: (sync_secs * 1000.0) as u64,
        speedup: sync_secs / async_secs.max(1e-9),
        async_tasks_per_sec: n / async_secs.max(1e-9),
        sync_tasks_per_sec: n / sync_secs.max(1e-9),
        identical,
    })
}
