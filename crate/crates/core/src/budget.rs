//! Token accounting and budget-checked trajectory construction.

use core::fmt;

use crate::model::{Budgets, Phase, Step, Trajectory};
use crate::react::render_step_response;

/// Pluggable token counter so an exact tokenizer can replace the default.
pub trait TokenCounter {
    fn count(&self, text: &str) -> u64;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteQuarterCounter;

impl TokenCounter for ByteQuarterCounter {
    fn count(&self, text: &str) -> u64 {
        (text.len() as u64).div_ceil(4)
    }
}

impl<F: Fn(&str) -> u64> TokenCounter for F {
    fn count(&self, text: &str) -> u64 {
        self(text)
    }
}

pub fn count_tokens(text: &str) -> u64 {
    ByteQuarterCounter.count(text)
}

/// Tokens of the assistant message a step stands for.
pub fn turn_tokens(step: &Step, counter: &dyn TokenCounter) -> u64 {
    counter.count(&render_step_response(step))
}

pub fn step_tokens(step: &Step, counter: &dyn TokenCounter) -> u64 {
    turn_tokens(step, counter) + step.observations.iter().map(|o| counter.count(&o.content)).sum::<u64>()
}

/// Context size of a trajectory: question, description, every response and observation.
pub fn context_tokens(trajectory: &Trajectory, counter: &dyn TokenCounter) -> u64 {
    counter.count(&trajectory.question)
        + trajectory.description.as_deref().map_or(0, |d| counter.count(d))
        + trajectory.steps.iter().map(|s| step_tokens(s, counter)).sum::<u64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetKind {
    MaxTurns,
    MaxContextTokens,
    MaxTurnTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetViolation {
    pub kind: BudgetKind,
    pub limit: u64,
    pub actual: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppendError {
    Budget(BudgetViolation),
    PhaseRegression { turn: u32 },
    NonContiguousTurn { expected: u32, found: u32 },
    AfterTerminal,
    Invalid(crate::model::InvariantViolation),
}

impl fmt::Display for AppendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppendError::Budget(v) => write!(f, "{:?} exceeded: {} > {}", v.kind, v.actual, v.limit),
            AppendError::PhaseRegression { turn } => {
                write!(f, "phase regression: vision step at turn {turn} after a text step")
            }
            AppendError::NonContiguousTurn { expected, found } => {
                write!(f, "non-contiguous turn index: expected {expected}, found {found}")
            }
            AppendError::AfterTerminal => f.write_str("trajectory already ended with an answer"),
            AppendError::Invalid(v) => write!(f, "invalid step: {v}"),
        }
    }
}

impl core::error::Error for AppendError {}

/// Appends `step` if it keeps every structural invariant and budget.
///
/// On error the trajectory is left untouched.
pub fn append_step(
    trajectory: &mut Trajectory,
    step: Step,
    budgets: &Budgets,
    counter: &dyn TokenCounter,
) -> Result<u64, AppendError> {
    let expected = trajectory.last_turn() + 1;
    if step.turn != expected {
        return Err(AppendError::NonContiguousTurn { expected, found: step.turn });
    }
    if let Some(last) = trajectory.steps.last() {
        if last.action.is_terminal() {
            return Err(AppendError::AfterTerminal);
        }
        if last.phase == Phase::Text && step.phase == Phase::Vision {
            return Err(AppendError::PhaseRegression { turn: step.turn });
        }
    }
    step.validate().map_err(AppendError::Invalid)?;
    if step.turn > budgets.max_turns {
        return Err(AppendError::Budget(BudgetViolation {
            kind: BudgetKind::MaxTurns,
            limit: budgets.max_turns.into(),
            actual: step.turn.into(),
        }));
    }
    let per_turn = turn_tokens(&step, counter);
    if per_turn > budgets.max_turn_tokens {
        return Err(AppendError::Budget(BudgetViolation {
            kind: BudgetKind::MaxTurnTokens,
            limit: budgets.max_turn_tokens,
            actual: per_turn,
        }));
    }
    let context = context_tokens(trajectory, counter) + step_tokens(&step, counter);
    if context > budgets.max_context_tokens {
        return Err(AppendError::Budget(BudgetViolation {
            kind: BudgetKind::MaxContextTokens,
            limit: budgets.max_context_tokens,
            actual: context,
        }));
    }
    if step.phase == Phase::Vision {
        trajectory.t_v += 1;
    }
    trajectory.steps.push(step);
    Ok(context)
}
