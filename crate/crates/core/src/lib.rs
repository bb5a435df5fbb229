//! Core model and algorithms for multimodal deep-research trajectories.
//!
//! This crate is `no_std` (with `alloc`). IO, networking and scheduling live in
//! the `vdr` engine crate.

#![no_std]
extern crate alloc;

pub mod advantage;
pub mod budget;
pub mod codec;
pub mod geometry;
pub mod model;
pub mod react;
pub mod safeguard;
pub mod sim;

pub use advantage::{loo_advantage, mask_flag, mask_flags, MaskRule, RolloutGroup};
pub use budget::{append_step, count_tokens, AppendError, BudgetKind, ByteQuarterCounter, TokenCounter};
pub use codec::{decode_trajectory, encode_trajectory};
pub use geometry::{crop_sim, expand_crop, CropError};
pub use model::*;
pub use react::{parse_react, render_react, FormatError, ParsedAction, ParsedResponse};
pub use safeguard::{detect_repetition, record_step_outcome, RepetitionParams, SafeguardState, StepOutcome, Verdict};
