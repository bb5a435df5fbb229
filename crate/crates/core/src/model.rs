//! Trajectory data model shared by every pipeline stage.
//!
//! A [`Trajectory`] is an ordered list of ReAct [`Step`]s. Vision-phase steps
//! always precede text-phase steps, turn indices are contiguous from 1 and
//! `t_v` counts the vision-phase steps. Induction prompts are never stored in
//! the record; they belong to rollout configuration.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize};

/// Exact content of the recovery observation emitted for unparseable responses.
pub const FORMAT_ERROR_MESSAGE: &str = "format error, please try again";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub payload: ImagePayload,
}

/// Either opaque encoded bytes (PNG/JPEG/...) or a simulated entity layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImagePayload {
    Encoded {
        #[serde(with = "base64_bytes")]
        data: Vec<u8>,
    },
    Sim { regions: Vec<SimRegion> },
}

/// One entity descriptor placed at a pixel region of a simulated image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimRegion {
    pub descriptor: String,
    pub region: BoundingBox,
}

impl ImageRef {
    pub fn whole_box(&self) -> BoundingBox {
        BoundingBox::new(0, 0, self.width, self.height)
    }

    pub fn sim_regions(&self) -> Option<&[SimRegion]> {
        match &self.payload {
            ImagePayload::Sim { regions } => Some(regions),
            ImagePayload::Encoded { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.width == 0 || self.height == 0 {
            return Err(InvariantViolation::new(
                Invariant::ImageDimensions,
                alloc::format!("image {} has zero dimension", self.id),
            ));
        }
        if let ImagePayload::Sim { regions } = &self.payload {
            for r in regions {
                if !r.region.fits(self.width, self.height) {
                    return Err(InvariantViolation::new(
                        Invariant::BoxBounds,
                        alloc::format!("sim region {:?} outside image {}", r.region, self.id),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
///
/// Deserializes from either `{"x0":..,"y0":..,"x1":..,"y1":..}` or `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    /// True when the box is non-degenerate and lies inside a `width x height` image.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let b = BoundingBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (!b.is_empty()).then_some(b)
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Obj { x0: u32, y0: u32, x1: u32, y1: u32 },
            Arr([u32; 4]),
        }
        Ok(match Repr::deserialize(deserializer)? {
            Repr::Obj { x0, y0, x1, y1 } => BoundingBox { x0, y0, x1, y1 },
            Repr::Arr([x0, y0, x1, y1]) => BoundingBox { x0, y0, x1, y1 },
        })
    }
}

/// A region to crop, expanded about its center by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    VisualSearch,
    WebSearch,
    VisitPage,
    SummarizePage,
    CodeExec,
}

impl ToolKind {
    pub const ALL: [ToolKind; 5] = [
        ToolKind::VisualSearch,
        ToolKind::WebSearch,
        ToolKind::VisitPage,
        ToolKind::SummarizePage,
        ToolKind::CodeExec,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ToolKind::VisualSearch => "visual_search",
            ToolKind::WebSearch => "web_search",
            ToolKind::VisitPage => "visit_page",
            ToolKind::SummarizePage => "summarize_page",
            ToolKind::CodeExec => "code_exec",
        }
    }

    pub fn parse(name: &str) -> Option<ToolKind> {
        ToolKind::ALL.into_iter().find(|k| k.as_str() == name)
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tool-specific arguments. The variant determines the tool kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", content = "args", rename_all = "snake_case")]
pub enum ToolArgs {
    VisualSearch {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_id: Option<String>,
        crops: Vec<CropSpec>,
    },
    WebSearch { query: String },
    VisitPage { url: String },
    SummarizePage { url: String, query: String },
    CodeExec { source: String },
}

impl ToolArgs {
    pub fn kind(&self) -> ToolKind {
        match self {
            ToolArgs::VisualSearch { .. } => ToolKind::VisualSearch,
            ToolArgs::WebSearch { .. } => ToolKind::WebSearch,
            ToolArgs::VisitPage { .. } => ToolKind::VisitPage,
            ToolArgs::SummarizePage { .. } => ToolKind::SummarizePage,
            ToolArgs::CodeExec { .. } => ToolKind::CodeExec,
        }
    }

    /// Number of observations this call produces (one per crop for visual search).
    pub fn fan_out(&self) -> usize {
        match self {
            ToolArgs::VisualSearch { crops, .. } => crops.len(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    #[serde(flatten)]
    pub args: ToolArgs,
}

impl ToolCall {
    pub fn new(call_id: impl Into<String>, args: ToolArgs) -> Self {
        Self {
            call_id: call_id.into(),
            args,
        }
    }

    pub fn tool(&self) -> ToolKind {
        self.args.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationStatus {
    Ok,
    ToolError,
    FormatError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub for_call: String,
    pub status: ObservationStatus,
    pub content: String,
    pub sources: Vec<String>,
    pub latency: u64,
}

impl Observation {
    pub fn ok(for_call: impl Into<String>, content: impl Into<String>, sources: Vec<String>) -> Self {
        Self {
            for_call: for_call.into(),
            status: ObservationStatus::Ok,
            content: content.into(),
            sources,
            latency: 0,
        }
    }

    pub fn tool_error(for_call: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            for_call: for_call.into(),
            status: ObservationStatus::ToolError,
            content: content.into(),
            sources: Vec::new(),
            latency: 0,
        }
    }

    pub fn timeout(for_call: impl Into<String>) -> Self {
        Self {
            for_call: for_call.into(),
            status: ObservationStatus::Timeout,
            content: String::from("tool call timed out"),
            sources: Vec::new(),
            latency: 0,
        }
    }

    pub fn format_error(for_call: impl Into<String>) -> Self {
        Self {
            for_call: for_call.into(),
            status: ObservationStatus::FormatError,
            content: String::from(FORMAT_ERROR_MESSAGE),
            sources: Vec::new(),
            latency: 0,
        }
    }

    pub fn with_latency(mut self, latency: u64) -> Self {
        self.latency = latency;
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == ObservationStatus::Ok
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        match self.status {
            ObservationStatus::Ok if self.content.is_empty() => Err(InvariantViolation::new(
                Invariant::ObservationContent,
                alloc::format!("ok observation for {} has empty content", self.for_call),
            )),
            ObservationStatus::FormatError if self.content != FORMAT_ERROR_MESSAGE => {
                Err(InvariantViolation::new(
                    Invariant::ObservationContent,
                    alloc::format!("format_error observation for {} has non-canonical content", self.for_call),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Vision,
    Text,
}

/// What the model did in one turn.
///
/// `Malformed` keeps the raw text of a response that failed to parse; such a
/// step carries exactly one `format_error` observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    ToolCalls { calls: Vec<ToolCall> },
    Answer { text: String },
    Malformed { raw: String },
}

impl Action {
    pub fn calls(&self) -> &[ToolCall] {
        match self {
            Action::ToolCalls { calls } => calls,
            _ => &[],
        }
    }

    pub fn answer(&self) -> Option<&str> {
        match self {
            Action::Answer { text } => Some(text),
            _ => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::Answer { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub turn: u32,
    pub phase: Phase,
    pub reasoning: String,
    pub action: Action,
    pub observations: Vec<Observation>,
}

impl Step {
    /// Observations a well-formed step must carry for its action.
    pub fn expected_observations(&self) -> usize {
        match &self.action {
            Action::ToolCalls { calls } => calls.iter().map(|c| c.args.fan_out()).sum(),
            Action::Answer { .. } => 0,
            Action::Malformed { .. } => 1,
        }
    }

    /// A step counts as an error step when the response was malformed or when
    /// it issued tool calls and none of them produced a usable observation.
    pub fn is_error(&self) -> bool {
        match &self.action {
            Action::Malformed { .. } => true,
            Action::ToolCalls { .. } => {
                !self.observations.is_empty() && self.observations.iter().all(|o| !o.is_ok())
            }
            Action::Answer { .. } => false,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let expected = self.expected_observations();
        if self.observations.len() != expected {
            return Err(InvariantViolation::new(
                Invariant::ObservationCount,
                alloc::format!(
                    "turn {} expects {} observations, found {}",
                    self.turn,
                    expected,
                    self.observations.len()
                ),
            ));
        }
        if let Action::ToolCalls { calls } = &self.action {
            if calls.is_empty() {
                return Err(InvariantViolation::new(
                    Invariant::ActionShape,
                    alloc::format!("turn {} has an empty call list", self.turn),
                ));
            }
            for c in calls {
                if let ToolArgs::VisualSearch { crops, .. } = &c.args {
                    if crops.is_empty() {
                        return Err(InvariantViolation::new(
                            Invariant::ActionShape,
                            alloc::format!("visual_search {} carries no crops", c.call_id),
                        ));
                    }
                    for crop in crops {
                        if !(crop.scale > 0.0 && crop.scale.is_finite()) || crop.bbox.is_empty() {
                            return Err(InvariantViolation::new(
                                Invariant::BoxBounds,
                                alloc::format!("invalid crop in {}", c.call_id),
                            ));
                        }
                    }
                }
            }
        }
        if let Action::Malformed { .. } = &self.action {
            if self.observations[0].status != ObservationStatus::FormatError {
                return Err(InvariantViolation::new(
                    Invariant::ObservationContent,
                    alloc::format!("malformed turn {} lacks a format_error observation", self.turn),
                ));
            }
        }
        for o in &self.observations {
            o.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    JudgeHitThenAnswered,
    MaxTurns,
    ContextExceeded,
    Repetition,
    ErrorCascade,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Answered => "answered",
            Termination::JudgeHitThenAnswered => "judge_hit_then_answered",
            Termination::MaxTurns => "max_turns",
            Termination::ContextExceeded => "context_exceeded",
            Termination::Repetition => "repetition",
            Termination::ErrorCascade => "error_cascade",
        }
    }

    /// Terminated by a safeguard or a budget rather than by the model.
    pub fn is_abnormal(&self) -> bool {
        matches!(
            self,
            Termination::MaxTurns
                | Termination::ContextExceeded
                | Termination::Repetition
                | Termination::ErrorCascade
        )
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub question: String,
    pub image: Option<ImageRef>,
    pub description: Option<String>,
    pub steps: Vec<Step>,
    #[serde(rename = "T_v")]
    pub t_v: u32,
    pub termination: Option<Termination>,
    pub ground_truth: Option<String>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            image: None,
            description: None,
            steps: Vec::new(),
            t_v: 0,
            termination: None,
            ground_truth: None,
        }
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_ground_truth(mut self, answer: impl Into<String>) -> Self {
        self.ground_truth = Some(answer.into());
        self
    }

    pub fn last_turn(&self) -> u32 {
        self.steps.last().map_or(0, |s| s.turn)
    }

    /// Number of text-phase steps.
    pub fn t_t(&self) -> u32 {
        self.steps.len() as u32 - self.t_v
    }

    /// The terminal answer, when the final step is one.
    pub fn final_answer(&self) -> Option<&str> {
        self.steps.last().and_then(|s| s.action.answer())
    }

    pub fn error_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.is_error()).count()
    }

    pub fn tool_call_count(&self) -> usize {
        self.steps.iter().map(|s| s.observations.len()).sum()
    }

    /// Checks every structural invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if let Some(image) = &self.image {
            image.validate()?;
        }
        let mut seen_text = false;
        let mut vision = 0u32;
        for (i, step) in self.steps.iter().enumerate() {
            let expected_turn = i as u32 + 1;
            if step.turn != expected_turn {
                return Err(InvariantViolation::new(
                    Invariant::TurnContiguity,
                    alloc::format!("step {} has turn {}, expected {}", i, step.turn, expected_turn),
                ));
            }
            match step.phase {
                Phase::Vision if seen_text => {
                    return Err(InvariantViolation::new(
                        Invariant::PhaseOrdering,
                        alloc::format!("vision step at turn {} follows a text step", step.turn),
                    ))
                }
                Phase::Vision => vision += 1,
                Phase::Text => seen_text = true,
            }
            if step.action.is_terminal() && i + 1 != self.steps.len() {
                return Err(InvariantViolation::new(
                    Invariant::TerminalPosition,
                    alloc::format!("answer at turn {} is not the final step", step.turn),
                ));
            }
            step.validate()?;
            if let Some(image) = &self.image {
                for call in step.action.calls() {
                    if let ToolArgs::VisualSearch { crops, .. } = &call.args {
                        if let Some(bad) = crops.iter().find(|c| !c.bbox.fits(image.width, image.height)) {
                            return Err(InvariantViolation::new(
                                Invariant::BoxBounds,
                                alloc::format!("crop {:?} in {} exceeds image bounds", bad.bbox, call.call_id),
                            ));
                        }
                    }
                }
            }
        }
        if vision != self.t_v {
            return Err(InvariantViolation::new(
                Invariant::VisionCount,
                alloc::format!("T_v is {} but {} vision steps are present", self.t_v, vision),
            ));
        }
        Ok(())
    }
}

/// Step, context and per-turn limits enforced on every append.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub max_turns: u32,
    pub max_context_tokens: u64,
    pub max_turn_tokens: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            max_turns: 50,
            max_context_tokens: 64 * 1024,
            max_turn_tokens: 4 * 1024,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.max_turns == 0 || self.max_context_tokens == 0 || self.max_turn_tokens == 0 {
            return Err(InvariantViolation::new(
                Invariant::Budgets,
                String::from("all budgets must be strictly positive"),
            ));
        }
        Ok(())
    }
}

/// Named trajectory invariants, used in decode and validation errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invariant {
    PhaseOrdering,
    TurnContiguity,
    VisionCount,
    ObservationCount,
    ObservationContent,
    ActionShape,
    TerminalPosition,
    ImageDimensions,
    BoxBounds,
    Budgets,
}

impl Invariant {
    pub fn name(&self) -> &'static str {
        match self {
            Invariant::PhaseOrdering => "phase ordering",
            Invariant::TurnContiguity => "turn contiguity",
            Invariant::VisionCount => "vision turn count",
            Invariant::ObservationCount => "observation count",
            Invariant::ObservationContent => "observation content",
            Invariant::ActionShape => "action shape",
            Invariant::TerminalPosition => "terminal position",
            Invariant::ImageDimensions => "image dimensions",
            Invariant::BoxBounds => "box bounds",
            Invariant::Budgets => "budgets",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantViolation {
    pub invariant: Invariant,
    pub detail: String,
}

impl InvariantViolation {
    pub fn new(invariant: Invariant, detail: String) -> Self {
        Self { invariant, detail }
    }
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant.name(), self.detail)
    }
}

impl core::error::Error for InvariantViolation {}

mod base64_bytes {
    use alloc::string::String;
    use alloc::vec::Vec;

    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn answer_step(turn: u32, phase: Phase) -> Step {
        Step {
            turn,
            phase,
            reasoning: "done".into(),
            action: Action::Answer { text: "Paris".into() },
            observations: vec![],
        }
    }

    #[test]
    fn bbox_accepts_array_and_object() {
        let a: BoundingBox = serde_json::from_str("[1,2,3,4]").unwrap();
        let b: BoundingBox = serde_json::from_str(r#"{"x0":1,"y0":2,"x1":3,"y1":4}"#).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.area(), 4);
    }

    #[test]
    fn tool_call_wire_shape() {
        let call = ToolCall::new("c1", ToolArgs::WebSearch { query: "q".into() });
        let v = serde_json::to_value(&call).unwrap();
        assert_eq!(v["tool"], "web_search");
        assert_eq!(v["args"]["query"], "q");
        let back: ToolCall = serde_json::from_value(v).unwrap();
        assert_eq!(back, call);
    }

    #[test]
    fn mismatched_args_are_rejected() {
        let bad = r#"{"call_id":"c","tool":"web_search","args":{"url":"x"}}"#;
        assert!(serde_json::from_str::<ToolCall>(bad).is_err());
    }

    #[test]
    fn answer_must_be_last() {
        let mut t = Trajectory::new("t", "q");
        t.steps.push(answer_step(1, Phase::Text));
        t.steps.push(answer_step(2, Phase::Text));
        let err = t.validate().unwrap_err();
        assert_eq!(err.invariant, Invariant::TerminalPosition);
    }

    #[test]
    fn format_error_content_is_fixed() {
        let mut o = Observation::format_error("x");
        assert!(o.validate().is_ok());
        o.content = "oops".into();
        assert_eq!(o.validate().unwrap_err().invariant, Invariant::ObservationContent);
    }

    #[test]
    fn error_step_classification() {
        let call = ToolCall::new("c", ToolArgs::WebSearch { query: "q".into() });
        let mut s = Step {
            turn: 1,
            phase: Phase::Text,
            reasoning: String::new(),
            action: Action::ToolCalls { calls: vec![call] },
            observations: vec![Observation::tool_error("c", "no match")],
        };
        assert!(s.is_error());
        s.observations[0] = Observation::ok("c", "evidence", vec![]);
        assert!(!s.is_error());
    }

    #[test]
    fn default_budgets() {
        let b = Budgets::default();
        assert_eq!((b.max_turns, b.max_context_tokens, b.max_turn_tokens), (50, 65536, 4096));
    }
}
