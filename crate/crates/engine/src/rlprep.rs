//! Rewards, grouping, leave-one-out advantages and batch export.
//!
//! Batch file schema (`vdr.rl_batch`, version 1), one JSON object per line:
//!
//! - header: `{"kind": "header", "format": "vdr.rl_batch", "version": 1, "groups": n, "samples": m}`
//! - sample: `{"kind": "sample", "prompt_id", "index", "reward", "advantage", "masked",
//!   "termination", "trajectory"}` where `trajectory` is the trajectory record.
//!
//! Every line also carries the `vdr_schema` tag. Masked samples stay in the
//! file with `masked: true`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vdr_core::codec::encode_record;
use vdr_core::{MaskRule, RolloutGroup, Termination, Trajectory};

use crate::bridge::verify_answer;
use crate::error::PipelineError;
use crate::gateway::ChatModel;
use crate::prompts::Prompts;

pub const BATCH_FORMAT: &str = "vdr.rl_batch";
pub const BATCH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    /// Set when the reward could not be judged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<String>,
}

/// Pure accuracy: 1.0 iff the judge accepts the final answer. With
/// `format_penalty`, trajectories containing format errors score 0.0.
pub async fn judge_reward(
    trajectory: &Trajectory,
    judge: &dyn ChatModel,
    prompts: &Prompts,
    format_penalty: bool,
) -> Result<Reward, PipelineError> {
    let Some(truth) = trajectory.ground_truth.as_deref() else {
        return Err(PipelineError::Precondition(format!("{} has no ground truth", trajectory.id)));
    };
    let Some(answer) = trajectory.final_answer() else {
        return Ok(Reward { value: 0.0, audit: None });
    };
    let correct = match verify_answer(&trajectory.question, answer, truth, judge, prompts).await {
        Ok(c) => c,
        Err(e) => {
            tracing::warn!(id = %trajectory.id, error = %e, "reward judge failed");
            return Ok(Reward { value: 0.0, audit: Some(format!("judge failed: {e}")) });
        }
    };
    let penalized = format_penalty
        && trajectory
            .steps
            .iter()
            .any(|s| matches!(s.action, vdr_core::Action::Malformed { .. }));
    Ok(Reward { value: if correct && !penalized { 1.0 } else { 0.0 }, audit: None })
}

/// Prompt id of a rollout task id: the part before the last `#`.
pub fn prompt_id(task_id: &str) -> &str {
    task_id.rsplit_once('#').map_or(task_id, |(p, _)| p)
}

/// Groups trajectories by prompt id, each of exactly `group_size` members.
pub fn group_by_prompt(trajectories: Vec<Trajectory>, group_size: usize) -> Result<Vec<(String, Vec<Trajectory>)>, PipelineError> {
    let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories {
        groups.entry(prompt_id(&t.id).to_string()).or_default().push(t);
    }
    let mut out = Vec::new();
    for (id, members) in groups {
        if members.len() != group_size {
            return Err(PipelineError::Precondition(format!(
                "prompt {id} has {} trajectories, expected group size {group_size}",
                members.len()
            )));
        }
        out.push((id, members));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrepReport {
    pub groups: Vec<RolloutGroup>,
    /// `(trajectory id, reason)` for rewards that could not be judged.
    pub audit: Vec<(String, String)>,
}

pub async fn build_groups(
    trajectories: Vec<Trajectory>,
    group_size: usize,
    judge: &dyn ChatModel,
    prompts: &Prompts,
    rule: &MaskRule,
    format_penalty: bool,
) -> Result<PrepReport, PipelineError> {
    if group_size < 2 {
        return Err(PipelineError::Precondition("group size must be at least 2".into()));
    }
    let mut report = PrepReport::default();
    for (id, members) in group_by_prompt(trajectories, group_size)? {
        let mut rewards = Vec::with_capacity(members.len());
        for t in &members {
            let r = judge_reward(t, judge, prompts, format_penalty).await?;
            if let Some(why) = r.audit {
                report.audit.push((t.id.clone(), why));
            }
            rewards.push(r.value);
        }
        let group = RolloutGroup::new(id, members, rewards, rule).map_err(|e| PipelineError::Failed(e.to_string()))?;
        report.groups.push(group);
    }
    Ok(report)
}

#[derive(Serialize)]
struct Header {
    kind: &'static str,
    format: &'static str,
    version: u32,
    groups: usize,
    samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub kind: String,
    pub prompt_id: String,
    pub index: usize,
    pub reward: f64,
    pub advantage: f64,
    pub masked: bool,
    #[serde(default)]
    pub termination: Option<Termination>,
    pub trajectory: Trajectory,
}

pub fn write_batch<W: Write>(groups: &[RolloutGroup], mut out: W) -> std::io::Result<()> {
    let header = Header {
        kind: "header",
        format: BATCH_FORMAT,
        version: BATCH_VERSION,
        groups: groups.len(),
        samples: groups.iter().map(RolloutGroup::len).sum(),
    };
    out.write_all(&encode_record(&header))?;
    out.write_all(b"\n")?;
    for g in groups {
        for (i, t) in g.trajectories.iter().enumerate() {
            let record = SampleRecord {
                kind: "sample".into(),
                prompt_id: g.prompt_id.clone(),
                index: i,
                reward: g.rewards[i],
                advantage: g.advantages[i],
                masked: g.masked[i],
                termination: t.termination,
                trajectory: t.clone(),
            };
            out.write_all(&encode_record(&record))?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}

pub fn export_batch(groups: &[RolloutGroup], path: &Path) -> Result<(), PipelineError> {
    let file = std::fs::File::create(path)?;
    write_batch(groups, std::io::BufWriter::new(file))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_ids() {
        assert_eq!(prompt_id("img-0001-f2#3"), "img-0001-f2");
        assert_eq!(prompt_id("plain"), "plain");
    }
}
