//! Vision phase: region proposal, multi-scale crops, the per-crop visual
//! pipeline, cumulative evidence, and judge-gated termination.

use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use vdr_core::{
    append_step, AppendError, BoundingBox, BudgetKind, Budgets, CropSpec, ImageRef, Observation, Phase, Step,
    Termination, TokenCounter, ToolArgs, ToolCall, Trajectory,
};

use crate::gateway::{ChatModel, Purpose};
use crate::prompts::{templated, Prompts};
use crate::tools::{dispatch_calls, CallContext, Dispatch, ToolBackend, ToolPermissions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub scales: Vec<f64>,
    pub max_regions: usize,
    /// Vision-phase turn cap, inside the global turn budget.
    pub turn_cap: u32,
    /// Proposal attempts before falling back to the whole image.
    pub proposal_attempts: u32,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { scales: vec![1.0, 1.5, 2.5], max_regions: 4, turn_cap: 8, proposal_attempts: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub reasoning: String,
    pub boxes: Vec<BoundingBox>,
    /// True when no usable box was parsed and the whole image stands in.
    pub fallback: bool,
}

static QUAD: LazyLock<Regex> = LazyLock::new(|| {
    let n = r"\s*(-?\d+(?:\.\d+)?)\s*";
    Regex::new(&format!(r"[\[(]{n},{n},{n},{n}[\])]")).unwrap()
});
static THINK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<think>(.*?)</think>").unwrap());

/// Every `[x0, y0, x1, y1]` in `text`, clamped to the image; degenerate boxes are dropped.
pub fn parse_boxes(text: &str, width: u32, height: u32) -> Vec<BoundingBox> {
    QUAD.captures_iter(text)
        .filter_map(|c| {
            let v: Vec<f64> = (1..=4).map(|i| c[i].parse::<f64>().unwrap_or(0.0)).collect();
            let clamp = |x: f64, max: u32| x.round().clamp(0.0, f64::from(max)) as u32;
            let (x0, x1) = (clamp(v[0].min(v[2]), width), clamp(v[0].max(v[2]), width));
            let (y0, y1) = (clamp(v[1].min(v[3]), height), clamp(v[1].max(v[3]), height));
            (x0 < x1 && y0 < y1).then(|| BoundingBox::new(x0, y0, x1, y1))
        })
        .collect()
}

fn reasoning_of(text: &str) -> String {
    match THINK.captures(text) {
        Some(c) => c[1].trim().to_string(),
        None => QUAD.split(text).next().unwrap_or("").trim().to_string(),
    }
}

pub async fn propose_regions(
    image: &ImageRef,
    question: &str,
    turn: u32,
    mllm: &dyn ChatModel,
    prompts: &Prompts,
    cfg: &VisionConfig,
) -> RegionProposal {
    let req = templated(
        Purpose::ProposeRegions,
        &prompts.vision_induction,
        &[
            ("question", question.to_string()),
            ("width", image.width.to_string()),
            ("height", image.height.to_string()),
            ("turn", turn.to_string()),
            ("max_regions", cfg.max_regions.to_string()),
        ],
        std::slice::from_ref(image),
    );
    for _ in 0..cfg.proposal_attempts.max(1) {
        let Ok(reply) = mllm.chat(&req).await else { continue };
        let mut boxes = parse_boxes(&reply.text, image.width, image.height);
        boxes.dedup();
        boxes.truncate(cfg.max_regions.max(1));
        if !boxes.is_empty() {
            return RegionProposal { reasoning: reasoning_of(&reply.text), boxes, fallback: false };
        }
    }
    RegionProposal {
        reasoning: "No usable region proposal; searching the whole image.".into(),
        boxes: vec![image.whole_box()],
        fallback: true,
    }
}

/// One observation per crop of a `visual_search` call, in crop order.
pub async fn run_vision_pipeline(
    call: &ToolCall,
    image: &ImageRef,
    question: &str,
    backend: &Arc<dyn ToolBackend>,
    dispatch: &Dispatch,
    task_id: &str,
    seed: u64,
    turn: u32,
) -> Vec<Observation> {
    let ctx = CallContext {
        task_id: task_id.to_string(),
        seed,
        turn,
        question: question.to_string(),
        image: Some(image.clone()),
        permissions: ToolPermissions::ALL,
    };
    dispatch_calls(dispatch, backend, std::slice::from_ref(call), &ctx).await
}

/// Cumulative visual evidence; the set after turn `t` extends the set after `t - 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvidenceSet {
    observations: Vec<Observation>,
    turn_ends: Vec<usize>,
}

impl EvidenceSet {
    pub fn push_turn(&mut self, observations: impl IntoIterator<Item = Observation>) {
        self.observations.extend(observations);
        self.turn_ends.push(self.observations.len());
    }

    pub fn turns(&self) -> usize {
        self.turn_ends.len()
    }

    /// Evidence accumulated through turn `t` (1-based); turn 0 is empty.
    pub fn through_turn(&self, t: usize) -> &[Observation] {
        match t {
            0 => &[],
            t => &self.observations[..self.turn_ends[t.min(self.turn_ends.len()) - 1]],
        }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Content of the usable observations, one per line.
    pub fn as_text(&self) -> String {
        self.observations
            .iter()
            .filter(|o| o.is_ok())
            .map(|o| o.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HitSignal {
    pub hit: bool,
    pub rationale: String,
}

impl HitSignal {
    fn miss(rationale: &str) -> Self {
        Self { hit: false, rationale: rationale.into() }
    }
}

#[derive(Deserialize)]
struct HitJson {
    hit: serde_json::Value,
    #[serde(default)]
    rationale: String,
}

/// Reads `{"hit": 0|1, "rationale": ...}`, or a bare leading yes/no/1/0.
pub fn parse_hit(text: &str) -> Option<HitSignal> {
    if let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) {
        if let Ok(j) = serde_json::from_str::<HitJson>(&text[start..=end]) {
            let hit = match j.hit {
                serde_json::Value::Bool(b) => b,
                serde_json::Value::Number(n) => n.as_f64()? >= 1.0,
                serde_json::Value::String(s) => matches!(s.trim(), "1" | "yes" | "true"),
                _ => return None,
            };
            return Some(HitSignal { hit, rationale: j.rationale });
        }
    }
    let first = text.split_whitespace().next()?.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    match first.as_str() {
        "1" | "yes" | "hit" => Some(HitSignal { hit: true, rationale: text.trim().into() }),
        "0" | "no" | "miss" => Some(HitSignal { hit: false, rationale: text.trim().into() }),
        _ => None,
    }
}

pub async fn judge_hit(
    image: &ImageRef,
    question: &str,
    evidence: &EvidenceSet,
    ground_truth: &str,
    judge: &dyn ChatModel,
    prompts: &Prompts,
) -> HitSignal {
    if evidence.is_empty() {
        return HitSignal::miss("no evidence");
    }
    let req = templated(
        Purpose::JudgeHit,
        &prompts.judge_hit,
        &[
            ("question", question.to_string()),
            ("ground_truth", ground_truth.to_string()),
            ("evidence", evidence.as_text()),
        ],
        std::slice::from_ref(image),
    );
    match judge.chat(&req).await {
        Ok(reply) => parse_hit(&reply.text).unwrap_or_else(|| HitSignal::miss("unparseable judge reply")),
        Err(e) => {
            tracing::warn!(error = %e, "hit judge failed");
            HitSignal::miss("judge unavailable")
        }
    }
}

/// Models and tools the vision phase runs against.
pub struct VisionDeps<'a> {
    pub mllm: &'a dyn ChatModel,
    pub judge: &'a dyn ChatModel,
    pub backend: Arc<dyn ToolBackend>,
    pub dispatch: Dispatch,
    pub prompts: &'a Prompts,
    pub counter: &'a dyn TokenCounter,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct VisionOutcome {
    /// All-vision trajectory; termination is `judge_hit_then_answered`
    /// (pending the text phase) on a hit and `max_turns` otherwise.
    pub trajectory: Trajectory,
    pub evidence: EvidenceSet,
    pub hits: Vec<HitSignal>,
}

pub async fn run_vision_phase(
    id: &str,
    image: &ImageRef,
    question: &str,
    ground_truth: &str,
    budgets: &Budgets,
    cfg: &VisionConfig,
    deps: &VisionDeps<'_>,
) -> VisionOutcome {
    let mut trajectory = Trajectory::new(id, question)
        .with_image(image.clone())
        .with_ground_truth(ground_truth);
    let mut evidence = EvidenceSet::default();
    let mut hits = Vec::new();
    let cap = cfg.turn_cap.min(budgets.max_turns);
    let termination = loop {
        let turn = trajectory.last_turn() + 1;
        if turn > cap {
            break Termination::MaxTurns;
        }
        let proposal = propose_regions(image, question, turn, deps.mllm, deps.prompts, cfg).await;
        let crops: Vec<CropSpec> = proposal
            .boxes
            .iter()
            .flat_map(|b| cfg.scales.iter().map(|s| CropSpec { bbox: *b, scale: *s }))
            .collect();
        let call = ToolCall::new(
            format!("v{turn}"),
            ToolArgs::VisualSearch { image_id: Some(image.id.clone()), crops },
        );
        let observations =
            run_vision_pipeline(&call, image, question, &deps.backend, &deps.dispatch, id, deps.seed, turn).await;
        let step = Step {
            turn,
            phase: Phase::Vision,
            reasoning: proposal.reasoning,
            action: vdr_core::Action::ToolCalls { calls: vec![call] },
            observations: observations.clone(),
        };
        match append_step(&mut trajectory, step, budgets, deps.counter) {
            Ok(_) => {}
            Err(AppendError::Budget(v)) if v.kind == BudgetKind::MaxTurns => break Termination::MaxTurns,
            Err(AppendError::Budget(_)) => break Termination::ContextExceeded,
            Err(e) => {
                tracing::error!(error = %e, "vision step rejected");
                break Termination::ErrorCascade;
            }
        }
        evidence.push_turn(observations);
        let signal = judge_hit(image, question, &evidence, ground_truth, deps.judge, deps.prompts).await;
        let hit = signal.hit;
        hits.push(signal);
        if hit {
            break Termination::JudgeHitThenAnswered;
        }
    };
    trajectory.termination = Some(termination);
    VisionOutcome { trajectory, evidence, hits }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_are_clamped_and_ordered() {
        let b = parse_boxes("<think>two logos</think> [[10, 10, 40, 40], [50,60,140,90]] (1,1,1,5)", 100, 100);
        assert_eq!(b, vec![BoundingBox::new(10, 10, 40, 40), BoundingBox::new(50, 60, 100, 90)]);
        assert_eq!(parse_boxes("[30, 30, 10, 10]", 100, 100), vec![BoundingBox::new(10, 10, 30, 30)]);
        assert!(parse_boxes("nothing here", 100, 100).is_empty());
    }

    #[test]
    fn hit_parsing() {
        assert_eq!(parse_hit("{\"hit\": 1, \"rationale\": \"ok\"}").unwrap(), HitSignal { hit: true, rationale: "ok".into() });
        assert!(!parse_hit("verdict: {\"hit\": 0}").unwrap().hit);
        assert!(parse_hit("Yes, enough.").unwrap().hit);
        assert!(parse_hit("maybe").is_none());
    }

    #[test]
    fn evidence_prefix() {
        let mut e = EvidenceSet::default();
        e.push_turn([Observation::ok("a", "x", vec![])]);
        e.push_turn([Observation::ok("b", "y", vec![]), Observation::tool_error("c", "no match")]);
        assert_eq!(e.through_turn(1).len(), 1);
        assert_eq!(&e.through_turn(2)[..1], e.through_turn(1));
        assert_eq!(e.as_text(), "x\ny");
    }
}
