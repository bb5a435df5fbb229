//! SFT trajectory synthesis: vision phase, bridging, text phase, merge and
//! rejection sampling over a dataset of VQA instances.

use std::io::Write;
use std::sync::Arc;

use futures::StreamExt;
use vdr_core::{Budgets, RepetitionParams, Termination, Trajectory};

use crate::agent::{Agent, AgentSettings, SharedCounter};
use crate::bridge::{bridge_context, describe_image, merge, rejection_sample, run_text_phase, AuditLog, SampleVerdict};
use crate::error::PipelineError;
use crate::forge::{DatasetRecord, Split, VqaInstance};
use crate::gateway::ChatModel;
use crate::prompts::Prompts;
use crate::tools::{Dispatch, ToolBackend, ToolPermissions};
use crate::vision::{run_vision_phase, VisionConfig, VisionDeps};

#[derive(Clone)]
pub struct SynthDeps {
    pub mllm: Arc<dyn ChatModel>,
    pub judge: Arc<dyn ChatModel>,
    pub foundation: Arc<dyn ChatModel>,
    /// Checks final answers against ground truth during rejection sampling.
    pub verifier: Arc<dyn ChatModel>,
    pub backend: Arc<dyn ToolBackend>,
    pub dispatch: Dispatch,
    pub prompts: Arc<Prompts>,
    pub counter: SharedCounter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub budgets: Budgets,
    pub vision: VisionConfig,
    pub repetition: RepetitionParams,
    pub error_limit: u32,
    pub seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            budgets: Budgets::default(),
            vision: VisionConfig::default(),
            repetition: RepetitionParams::default(),
            error_limit: 3,
            seed: 0,
        }
    }
}

/// One merged multimodal trajectory for `instance`. Instances without an
/// image get an empty vision phase.
pub async fn synthesize_trajectory(
    instance: &VqaInstance,
    settings: &SynthSettings,
    deps: &SynthDeps,
) -> Result<Trajectory, PipelineError> {
    settings.budgets.validate().map_err(|v| PipelineError::Precondition(v.to_string()))?;
    let (c_vision, description) = match &instance.image {
        Some(image) => {
            let vdeps = VisionDeps {
                mllm: deps.mllm.as_ref(),
                judge: deps.judge.as_ref(),
                backend: deps.backend.clone(),
                dispatch: deps.dispatch.clone(),
                prompts: &deps.prompts,
                counter: deps.counter.as_ref(),
                seed: settings.seed,
            };
            let outcome = run_vision_phase(
                &instance.id,
                image,
                &instance.question,
                &instance.answer,
                &settings.budgets,
                &settings.vision,
                &vdeps,
            )
            .await;
            let c_vision = outcome.trajectory;
            if matches!(c_vision.termination, Some(Termination::ContextExceeded | Termination::ErrorCascade)) {
                return Ok(c_vision);
            }
            let description = describe_image(image, deps.mllm.as_ref(), &deps.prompts).await?;
            (c_vision, Some(description))
        }
        None => {
            let mut t = Trajectory::new(instance.id.clone(), instance.question.clone()).with_ground_truth(instance.answer.clone());
            t.termination = Some(Termination::MaxTurns);
            (t, None)
        }
    };
    let bridged = bridge_context(&c_vision, description.as_deref().unwrap_or(""), &deps.prompts.text_continuation)?;
    let agent = Agent {
        policy: deps.foundation.clone(),
        backend: deps.backend.clone(),
        dispatch: deps.dispatch.clone(),
        counter: deps.counter.clone(),
        settings: AgentSettings {
            budgets: settings.budgets,
            repetition: settings.repetition,
            error_limit: settings.error_limit,
            seed: settings.seed,
            permissions: ToolPermissions::TEXT_ONLY,
            text_phase_only: true,
        },
    };
    let c_text = run_text_phase(&bridged, &agent).await;
    merge(&c_vision, &c_text, description.as_deref())
}

#[derive(Debug, Default)]
pub struct PoolReport {
    pub kept: Vec<Trajectory>,
    /// `(instance id, reason)` in input order.
    pub discarded: Vec<(String, String)>,
}

/// Synthesizes and rejection-samples every instance, `concurrency` at a
/// time. Kept trajectories and discards come back in input order.
pub async fn synthesize_pool(
    instances: &[VqaInstance],
    settings: &SynthSettings,
    deps: &SynthDeps,
    concurrency: usize,
) -> PoolReport {
    let mut results: Vec<(usize, Result<Trajectory, String>)> = futures::stream::iter(instances.iter().enumerate())
        .map(|(i, inst)| async move {
            let outcome = match synthesize_trajectory(inst, settings, deps).await {
                Ok(t) => match rejection_sample(&t, deps.verifier.as_ref(), &deps.prompts).await {
                    SampleVerdict::Keep => Ok(t),
                    SampleVerdict::Discard(reason) => Err(reason),
                },
                Err(e) => Err(format!("error: {e}")),
            };
            (i, outcome)
        })
        .buffer_unordered(concurrency.max(1))
        .collect()
        .await;
    results.sort_by_key(|(i, _)| *i);
    let mut report = PoolReport::default();
    for (i, r) in results {
        match r {
            Ok(t) => report.kept.push(t),
            Err(reason) => report.discarded.push((instances[i].id.clone(), reason)),
        }
    }
    report
}

/// SFT-split instances of a dataset.
pub fn sft_instances(records: &[DatasetRecord]) -> Vec<VqaInstance> {
    records.iter().filter(|r| r.split == Split::Sft).map(|r| r.instance.clone()).collect()
}

pub fn write_audit<W: Write>(discarded: &[(String, String)], out: W) -> std::io::Result<W> {
    let mut log = AuditLog::new(out);
    for (id, reason) in discarded {
        log.record(id, reason)?;
    }
    Ok(log.into_inner())
}
