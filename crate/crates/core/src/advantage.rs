//! Group rewards, leave-one-out advantages and gradient masks.
//!
//! Masked trajectories keep their reward in every baseline; the mask only
//! marks them as excluded from the gradient in exported batches.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupTooSmall(pub usize);

impl fmt::Display for GroupTooSmall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "leave-one-out needs at least 2 samples, got {}", self.0)
    }
}

impl core::error::Error for GroupTooSmall {}

/// `reward_i - mean(rewards without i)` for every member of the group.
pub fn loo_advantage(rewards: &[f64]) -> Result<Vec<f64>, GroupTooSmall> {
    let g = rewards.len();
    if g < 2 {
        return Err(GroupTooSmall(g));
    }
    let total: f64 = rewards.iter().sum();
    let others = (g - 1) as f64;
    Ok(rewards.iter().map(|r| r - (total - r) / others).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskRule {
    /// Mask when error steps make up more than this fraction of all steps.
    pub error_step_fraction: f64,
}

impl Default for MaskRule {
    fn default() -> Self {
        Self { error_step_fraction: 0.5 }
    }
}

/// Whether a trajectory should be excluded from the gradient.
pub fn mask_flag(trajectory: &Trajectory, rule: &MaskRule) -> bool {
    if trajectory.termination.is_some_and(|t| t.is_abnormal()) {
        return true;
    }
    let steps = trajectory.steps.len();
    steps > 0 && trajectory.error_steps() as f64 > rule.error_step_fraction * steps as f64
}

pub fn mask_flags(trajectories: &[Trajectory], rule: &MaskRule) -> Vec<bool> {
    trajectories.iter().map(|t| mask_flag(t, rule)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub masked: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupError {
    TooSmall(GroupTooSmall),
    LengthMismatch { trajectories: usize, rewards: usize },
    NonBinaryReward(f64),
}

impl fmt::Display for GroupError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupError::TooSmall(e) => e.fmt(f),
            GroupError::LengthMismatch { trajectories, rewards } => {
                write!(f, "{trajectories} trajectories but {rewards} rewards")
            }
            GroupError::NonBinaryReward(r) => write!(f, "reward {r} is not 0.0 or 1.0"),
        }
    }
}

impl core::error::Error for GroupError {}

impl RolloutGroup {
    pub fn new(
        prompt_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
        rule: &MaskRule,
    ) -> Result<Self, GroupError> {
        if trajectories.len() != rewards.len() {
            return Err(GroupError::LengthMismatch {
                trajectories: trajectories.len(),
                rewards: rewards.len(),
            });
        }
        if let Some(bad) = rewards.iter().find(|r| **r != 0.0 && **r != 1.0) {
            return Err(GroupError::NonBinaryReward(*bad));
        }
        let advantages = loo_advantage(&rewards).map_err(GroupError::TooSmall)?;
        let masked = mask_flags(&trajectories, rule);
        Ok(Self {
            prompt_id: prompt_id.into(),
            trajectories,
            rewards,
            advantages,
            masked,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Action, Observation, Phase, Step, Termination, ToolArgs, ToolCall};
    use alloc::vec;

    #[test]
    fn symmetric_group_is_zero() {
        assert_eq!(loo_advantage(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn pair() {
        assert_eq!(loo_advantage(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn four_member_group() {
        let a = loo_advantage(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = [2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_rejected() {
        assert_eq!(loo_advantage(&[1.0]), Err(GroupTooSmall(1)));
    }

    fn step(turn: u32, ok: bool) -> Step {
        let call = ToolCall::new("c", ToolArgs::WebSearch { query: "q".into() });
        let obs = if ok { Observation::ok("c", "e", vec![]) } else { Observation::tool_error("c", "no match") };
        Step { turn, phase: Phase::Text, reasoning: "r".into(), action: Action::ToolCalls { calls: vec![call] }, observations: vec![obs] }
    }

    #[test]
    fn masks() {
        let rule = MaskRule::default();
        let mut t = Trajectory::new("a", "q");
        t.termination = Some(Termination::Repetition);
        assert!(mask_flag(&t, &rule));

        let mut clean = Trajectory::new("b", "q");
        clean.steps.push(Step { turn: 1, phase: Phase::Text, reasoning: "r".into(), action: Action::Answer { text: "x".into() }, observations: vec![] });
        clean.termination = Some(Termination::Answered);
        assert!(!mask_flag(&clean, &rule));

        let mut noisy = Trajectory::new("c", "q");
        for i in 1..=10 {
            noisy.steps.push(step(i, i > 6));
        }
        noisy.termination = Some(Termination::Answered);
        assert_eq!(noisy.error_steps(), 6);
        assert!(mask_flag(&noisy, &rule));
    }
}
