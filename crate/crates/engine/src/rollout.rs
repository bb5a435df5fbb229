//! Batch rollout: many trajectories in flight on one coordinating future,
//! tool calls fanned out through a shared bounded pool, plus a sequential
//! baseline for throughput comparison.

use std::panic::AssertUnwindSafe;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::{FutureExt, StreamExt};
use serde::{Deserialize, Serialize};
use vdr_core::budget::context_tokens;
use vdr_core::{Budgets, RepetitionParams, Termination, Trajectory};

use crate::agent::{Agent, AgentSettings, Episode, SharedCounter};
use crate::error::PipelineError;
use crate::forge::VqaInstance;
use crate::gateway::{ChatModel, ChatTurn};
use crate::prompts::{render, Prompts};
use crate::tools::{Dispatch, ToolBackend, ToolPermissions, ToolPool, VisualAccess};

/// Which tools the policy may use during rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// No tools.
    Direct,
    /// Whole-image search only.
    Wis,
    /// Whole-image search plus text tools.
    WisTs,
    /// Multi-scale crop search only.
    Cis,
    /// Multi-scale crop search plus text tools.
    #[default]
    CisTs,
}

impl RolloutMode {
    pub const ALL: [RolloutMode; 5] =
        [RolloutMode::Direct, RolloutMode::Wis, RolloutMode::WisTs, RolloutMode::Cis, RolloutMode::CisTs];

    pub fn permissions(self) -> ToolPermissions {
        let (visual, text) = match self {
            RolloutMode::Direct => (VisualAccess::Disabled, false),
            RolloutMode::Wis => (VisualAccess::WholeImage, false),
            RolloutMode::WisTs => (VisualAccess::WholeImage, true),
            RolloutMode::Cis => (VisualAccess::MultiScale, false),
            RolloutMode::CisTs => (VisualAccess::MultiScale, true),
        };
        ToolPermissions { visual, text }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RolloutMode::Direct => "direct",
            RolloutMode::Wis => "wis",
            RolloutMode::WisTs => "wis_ts",
            RolloutMode::Cis => "cis",
            RolloutMode::CisTs => "cis_ts",
        }
    }

    fn tool_list(self) -> String {
        let p = self.permissions();
        let mut tools = Vec::new();
        if p.visual != VisualAccess::Disabled {
            tools.push("visual_search");
        }
        if p.text {
            tools.extend(["web_search", "visit_page", "summarize_page", "code_exec"]);
        }
        if tools.is_empty() {
            "none (answer directly)".into()
        } else {
            tools.join(", ")
        }
    }
}

impl FromStr for RolloutMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RolloutMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected direct, wis, wis_ts, cis or cis_ts)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTask {
    pub task_id: String,
    pub instance: VqaInstance,
    pub budgets: Budgets,
    pub mode: RolloutMode,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub task_id: String,
    pub turns: u32,
    pub tokens: u64,
    pub tool_calls: usize,
    pub wall_ms: u64,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub metrics: RolloutMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSettings {
    pub repetition: RepetitionParams,
    pub error_limit: u32,
    pub seed: u64,
    pub tool_timeout: Duration,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self { repetition: RepetitionParams::default(), error_limit: 3, seed: 0, tool_timeout: Duration::from_secs(60) }
    }
}

#[derive(Clone)]
pub struct RolloutRunner {
    pub policy: Arc<dyn ChatModel>,
    pub backend: Arc<dyn ToolBackend>,
    pub counter: SharedCounter,
    pub prompts: Arc<Prompts>,
    pub settings: RolloutSettings,
}

impl RolloutRunner {
    fn agent(&self, task: &RolloutTask, dispatch: Dispatch) -> Agent {
        Agent {
            policy: self.policy.clone(),
            backend: self.backend.clone(),
            dispatch,
            counter: self.counter.clone(),
            settings: AgentSettings {
                budgets: task.budgets,
                repetition: self.settings.repetition,
                error_limit: self.settings.error_limit,
                seed: self.settings.seed,
                permissions: task.mode.permissions(),
                text_phase_only: false,
            },
        }
    }

    fn episode(&self, task: &RolloutTask, agent: &Agent) -> Episode {
        let inst = &task.instance;
        let mut trajectory = Trajectory::new(task.task_id.clone(), inst.question.clone()).with_ground_truth(inst.answer.clone());
        let vars = [("tools".to_string(), task.mode.tool_list())].into_iter().collect();
        let mut user = ChatTurn::user(format!("Question: {}", inst.question));
        if let Some(image) = &inst.image {
            trajectory = trajectory.with_image(image.clone());
            user = ChatTurn::user(format!("Image id: {}\nQuestion: {}", image.id, inst.question)).with_image(image.clone());
        }
        let preamble = vec![ChatTurn::system(render(&self.prompts.policy_system, &vars)), user];
        Episode::new(task.task_id.clone(), trajectory, preamble, &agent.settings)
    }

    /// Runs one task to termination. Failures end up in the trajectory's termination.
    pub async fn run_task(&self, task: &RolloutTask, dispatch: Dispatch) -> RolloutResult {
        let started = Instant::now();
        let agent = self.agent(task, dispatch);
        let mut ep = self.episode(task, &agent);
        let outcome = AssertUnwindSafe(agent.run(&mut ep)).catch_unwind().await;
        if outcome.is_err() {
            tracing::error!(task = %task.task_id, "rollout panicked");
            ep.trajectory.termination = Some(Termination::ErrorCascade);
        }
        let trajectory = ep.trajectory;
        let metrics = RolloutMetrics {
            task_id: task.task_id.clone(),
            turns: trajectory.last_turn(),
            tokens: context_tokens(&trajectory, self.counter.as_ref()),
            tool_calls: trajectory.tool_call_count(),
            wall_ms: started.elapsed().as_millis() as u64,
            termination: trajectory.termination.unwrap_or(Termination::ErrorCascade),
        };
        RolloutResult { trajectory, metrics }
    }

    /// Up to `concurrency` trajectories at once, all tool calls through one
    /// pool of `tool_pool_size` slots. Results come back in task order.
    pub async fn run_batch(
        &self,
        tasks: &[RolloutTask],
        concurrency: usize,
        tool_pool_size: usize,
    ) -> Result<Vec<RolloutResult>, PipelineError> {
        if concurrency == 0 || tool_pool_size == 0 {
            return Err(PipelineError::Precondition("concurrency and tool pool size must be at least 1".into()));
        }
        for t in tasks {
            t.budgets.validate().map_err(|v| PipelineError::Precondition(format!("{}: {v}", t.task_id)))?;
        }
        let dispatch = Dispatch::Pool(ToolPool::new(tool_pool_size, self.settings.tool_timeout));
        let mut results: Vec<(usize, RolloutResult)> = futures::stream::iter(tasks.iter().enumerate())
            .map(|(i, task)| {
                let dispatch = dispatch.clone();
                async move { (i, self.run_task(task, dispatch).await) }
            })
            .buffer_unordered(concurrency)
            .collect()
            .await;
        results.sort_by_key(|(i, _)| *i);
        Ok(results.into_iter().map(|(_, r)| r).collect())
    }

    /// Synchronous baseline: one task and one tool call at a time on a
    /// dedicated blocking thread.
    pub async fn run_batch_sync(&self, tasks: &[RolloutTask]) -> Result<Vec<RolloutResult>, PipelineError> {
        let runner = self.clone();
        let tasks = tasks.to_vec();
        let handle = tokio::runtime::Handle::current();
        tokio::task::spawn_blocking(move || {
            tasks
                .iter()
                .map(|t| handle.block_on(runner.run_task(t, Dispatch::Inline)))
                .collect()
        })
        .await
        .map_err(|e| PipelineError::Failed(format!("baseline worker failed: {e}")))
    }
}

/// Rollout tasks for each instance; with `samples > 1` task ids get a `#k` suffix.
pub fn tasks_for(instances: &[VqaInstance], samples: usize, budgets: Budgets, mode: RolloutMode) -> Vec<RolloutTask> {
    let mut out = Vec::new();
    for inst in instances {
        for k in 0..samples.max(1) {
            let task_id = if samples > 1 { format!("{}#{k}", inst.id) } else { inst.id.clone() };
            out.push(RolloutTask { task_id, instance: inst.clone(), budgets, mode });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_round_trip() {
        for m in RolloutMode::ALL {
            assert_eq!(m.as_str().parse::<RolloutMode>().unwrap(), m);
        }
        assert!("xyz".parse::<RolloutMode>().is_err());
        assert_eq!(RolloutMode::Direct.permissions(), ToolPermissions { visual: VisualAccess::Disabled, text: false });
        assert_eq!(RolloutMode::CisTs.permissions(), ToolPermissions::ALL);
    }
}
