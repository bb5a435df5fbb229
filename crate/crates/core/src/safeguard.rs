//! Rollout safeguards: the n-gram repetition detector and the consecutive
//! error counter.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::Termination;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepetitionParams {
    /// n-gram length in characters; must be at least 2.
    pub ngram: usize,
    /// Responses shorter than this many characters are never flagged.
    pub min_chars: usize,
    pub min_repeats: usize,
}

impl Default for RepetitionParams {
    fn default() -> Self {
        Self {
            ngram: 32,
            min_chars: 1024,
            min_repeats: 4,
        }
    }
}

/// True iff `text` has at least `min_chars` characters and some character
/// n-gram occurs (overlaps counted) at least `min_repeats` times.
pub fn detect_repetition(text: &str, params: &RepetitionParams) -> bool {
    if params.ngram < 2 {
        return false;
    }
    let boundaries: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    let chars = boundaries.len() - 1;
    if chars < params.min_chars || chars < params.ngram {
        return false;
    }
    if params.min_repeats <= 1 {
        return true;
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for start in 0..=chars - params.ngram {
        let gram = &text[boundaries[start]..boundaries[start + params.ngram]];
        let count = seen.entry(gram).or_insert(0);
        *count += 1;
        if *count >= params.min_repeats {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Ok,
    FormatError,
    ToolError,
    Repetition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Terminate(Termination),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeguardState {
    pub consecutive_errors: u32,
    pub error_limit: u32,
    pub repetition: RepetitionParams,
}

impl Default for SafeguardState {
    fn default() -> Self {
        Self::new(RepetitionParams::default())
    }
}

impl SafeguardState {
    pub fn new(repetition: RepetitionParams) -> Self {
        Self {
            consecutive_errors: 0,
            error_limit: 3,
            repetition,
        }
    }

    /// `ok` resets the counter, format and tool errors advance it, repetition
    /// stops the trajectory at once.
    pub fn record(&mut self, outcome: StepOutcome) -> Verdict {
        match outcome {
            StepOutcome::Ok => {
                self.consecutive_errors = 0;
                Verdict::Continue
            }
            StepOutcome::FormatError | StepOutcome::ToolError => {
                self.consecutive_errors += 1;
                if self.consecutive_errors >= self.error_limit {
                    Verdict::Terminate(Termination::ErrorCascade)
                } else {
                    Verdict::Continue
                }
            }
            StepOutcome::Repetition => Verdict::Terminate(Termination::Repetition),
        }
    }
}

pub fn record_step_outcome(state: &mut SafeguardState, outcome: StepOutcome) -> Verdict {
    state.record(outcome)
}
