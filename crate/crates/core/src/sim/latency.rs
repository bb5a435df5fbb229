use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ToolKind;

/// Per-tool latency distribution in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum LatencyDist {
    Constant { ms: u64 },
    Uniform { min_ms: u64, max_ms: u64 },
}

impl Default for LatencyDist {
    fn default() -> Self {
        LatencyDist::Constant { ms: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub visual_search: LatencyDist,
    pub web_search: LatencyDist,
    pub visit_page: LatencyDist,
    pub summarize_page: LatencyDist,
    pub code_exec: LatencyDist,
}

impl LatencyModel {
    pub fn uniform(dist: LatencyDist) -> Self {
        Self {
            visual_search: dist,
            web_search: dist,
            visit_page: dist,
            summarize_page: dist,
            code_exec: dist,
        }
    }

    pub fn for_tool(&self, tool: ToolKind) -> LatencyDist {
        match tool {
            ToolKind::VisualSearch => self.visual_search,
            ToolKind::WebSearch => self.web_search,
            ToolKind::VisitPage => self.visit_page,
            ToolKind::SummarizePage => self.summarize_page,
            ToolKind::CodeExec => self.code_exec,
        }
    }
}

/// Identity of one tool invocation: `(seed, task, turn, call_index)`.
///
/// `task` is [`CallKey::task_hash`] of the task id so keys stay `Copy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CallKey {
    pub seed: u64,
    pub task: u64,
    pub turn: u32,
    pub call_index: u32,
}

impl CallKey {
    pub fn new(seed: u64, task_id: &str, turn: u32, call_index: u32) -> Self {
        Self { seed, task: Self::task_hash(task_id), turn, call_index }
    }

    /// FNV-1a over the task id bytes.
    pub fn task_hash(task_id: &str) -> u64 {
        task_id
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    }

    /// Mixes the key and a salt into one RNG seed.
    pub fn mix(&self, salt: u64) -> u64 {
        let mut h = self.seed;
        for part in [self.task, u64::from(self.turn), u64::from(self.call_index), salt] {
            h = splitmix(h ^ part);
        }
        h
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic delay for a tool invocation; independent of scheduling order.
pub fn inject_latency(model: &LatencyModel, tool: ToolKind, key: &CallKey) -> u64 {
    match model.for_tool(tool) {
        LatencyDist::Constant { ms } => ms,
        LatencyDist::Uniform { min_ms, max_ms } => {
            let (lo, hi) = if min_ms <= max_ms { (min_ms, max_ms) } else { (max_ms, min_ms) };
            let mut rng = ChaCha8Rng::seed_from_u64(key.mix(tool as u64 + 1));
            rng.random_range(lo..=hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_delay() {
        let m = LatencyModel::uniform(LatencyDist::Uniform { min_ms: 200, max_ms: 800 });
        let k = CallKey::new(7, "task-1", 3, 2);
        assert_eq!(inject_latency(&m, ToolKind::WebSearch, &k), inject_latency(&m, ToolKind::WebSearch, &k));
    }

    #[test]
    fn constant_distribution() {
        let m = LatencyModel::uniform(LatencyDist::Constant { ms: 500 });
        for i in 0..20 {
            assert_eq!(inject_latency(&m, ToolKind::VisitPage, &CallKey::new(1, "t", i, i)), 500);
        }
    }
}
