//! Context bridging from the vision phase to text-only research, the text
//! phase itself, merge/split of the two phases, and rejection sampling.

use std::io::Write;

use serde::Serialize;
use vdr_core::{ImageRef, Phase, Step, Termination, Trajectory};

use crate::agent::{Agent, Episode};
use crate::error::{GatewayError, PipelineError};
use crate::gateway::{ChatModel, ChatTurn, Purpose};
use crate::prompts::{render, templated, Prompts};

pub async fn describe_image(image: &ImageRef, mllm: &dyn ChatModel, prompts: &Prompts) -> Result<String, PipelineError> {
    let req = templated(Purpose::Describe, &prompts.describe_image, &[], std::slice::from_ref(image));
    let reply = mllm.chat(&req).await?;
    let text = reply.text.trim();
    if text.is_empty() {
        return Err(PipelineError::Failed("empty description".into()));
    }
    Ok(text.to_string())
}

/// The vision phase as a text-only model sees it: the image replaced by its
/// description, steps unchanged, induction prompts absent.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgedContext {
    pub id: String,
    pub description: String,
    pub question: String,
    pub steps: Vec<Step>,
    pub ground_truth: Option<String>,
    pub continuation_prompt: String,
}

pub fn bridge_context(
    c_vision: &Trajectory,
    description: &str,
    continuation_prompt: &str,
) -> Result<BridgedContext, PipelineError> {
    if let Some(s) = c_vision.steps.iter().find(|s| s.phase != Phase::Vision) {
        return Err(PipelineError::Precondition(format!("turn {} is not a vision step", s.turn)));
    }
    Ok(BridgedContext {
        id: c_vision.id.clone(),
        description: description.to_string(),
        question: c_vision.question.clone(),
        steps: c_vision.steps.clone(),
        ground_truth: c_vision.ground_truth.clone(),
        continuation_prompt: continuation_prompt.to_string(),
    })
}

/// Text-phase steps, numbered from `T_v + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPhase {
    pub steps: Vec<Step>,
    pub termination: Termination,
}

impl TextPhase {
    pub fn answer(&self) -> Option<&str> {
        self.steps.last().and_then(|s| s.action.answer())
    }
}

const TEXT_TOOLS: &str = "web_search, visit_page, summarize_page, code_exec";

/// Runs the text phase on top of the bridged vision steps. The turn budget
/// is shared with the vision phase.
pub async fn run_text_phase(bridged: &BridgedContext, agent: &Agent) -> TextPhase {
    let mut working = Trajectory::new(bridged.id.clone(), bridged.question.clone());
    working.description = (!bridged.description.is_empty()).then(|| bridged.description.clone());
    working.ground_truth = bridged.ground_truth.clone();
    working.steps = bridged.steps.clone();
    working.t_v = bridged.steps.len() as u32;
    let vars = [
        ("description".to_string(), bridged.description.clone()),
        ("tools".to_string(), TEXT_TOOLS.to_string()),
    ]
    .into_iter()
    .collect();
    let user = if bridged.description.is_empty() {
        format!("Question: {}", bridged.question)
    } else {
        format!("Image description: {}\n\nQuestion: {}", bridged.description, bridged.question)
    };
    let preamble = vec![ChatTurn::system(render(&bridged.continuation_prompt, &vars)), ChatTurn::user(user)];
    let mut ep = Episode::new(bridged.id.clone(), working, preamble, &agent.settings);
    ep.vars = vars;
    let termination = agent.run(&mut ep).await;
    let steps = ep.trajectory.steps.split_off(bridged.steps.len());
    TextPhase { steps, termination }
}

/// Concatenates the phases into one trajectory with the image restored.
pub fn merge(c_vision: &Trajectory, c_text: &TextPhase, description: Option<&str>) -> Result<Trajectory, PipelineError> {
    let t_v = c_vision.steps.len() as u32;
    if let Some(s) = c_vision.steps.iter().find(|s| s.phase != Phase::Vision) {
        return Err(PipelineError::Precondition(format!("vision trajectory has a text step at turn {}", s.turn)));
    }
    for (i, s) in c_text.steps.iter().enumerate() {
        let expected = t_v + 1 + i as u32;
        if s.turn != expected {
            return Err(PipelineError::Precondition(format!(
                "text step {i} has turn {}, expected {expected}",
                s.turn
            )));
        }
        if s.phase != Phase::Text {
            return Err(PipelineError::Precondition(format!("turn {} is not a text step", s.turn)));
        }
    }
    let mut merged = c_vision.clone();
    merged.description = description.map(str::to_string);
    merged.t_v = t_v;
    merged.steps.extend(c_text.steps.iter().cloned());
    merged.termination = Some(match c_text.termination {
        Termination::Answered if c_vision.termination == Some(Termination::JudgeHitThenAnswered) => {
            Termination::JudgeHitThenAnswered
        }
        t => t,
    });
    merged.validate().map_err(|v| PipelineError::Precondition(v.to_string()))?;
    Ok(merged)
}

/// Splits a merged trajectory at `T_v`.
pub fn split(c_multimodal: &Trajectory) -> (Trajectory, TextPhase) {
    let t_v = c_multimodal.t_v as usize;
    let mut vision = c_multimodal.clone();
    let text_steps = vision.steps.split_off(t_v);
    vision.description = None;
    let termination = c_multimodal.termination.unwrap_or(Termination::MaxTurns);
    vision.termination = match termination {
        Termination::JudgeHitThenAnswered => Some(Termination::JudgeHitThenAnswered),
        _ if t_v == 0 => None,
        _ => Some(Termination::MaxTurns),
    };
    (vision, TextPhase { steps: text_steps, termination })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleVerdict {
    Keep,
    Discard(String),
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").trim_end_matches('.').to_lowercase()
}

/// Leading yes/no (or `{"consistent": bool}`) of a verifier reply.
pub fn parse_verdict(text: &str) -> Option<bool> {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(text.trim()) {
        if let Some(b) = v.get("consistent").and_then(serde_json::Value::as_bool) {
            return Some(b);
        }
    }
    let first = normalize(text.split_whitespace().next().unwrap_or(""));
    match first.trim_matches(|c: char| !c.is_alphanumeric()) {
        "yes" | "true" | "consistent" | "correct" => Some(true),
        "no" | "false" | "inconsistent" | "incorrect" => Some(false),
        _ => None,
    }
}

/// Asks the verifier whether `answer` agrees with `ground_truth`.
pub async fn verify_answer(
    question: &str,
    answer: &str,
    ground_truth: &str,
    verifier: &dyn ChatModel,
    prompts: &Prompts,
) -> Result<bool, GatewayError> {
    let req = templated(
        Purpose::Verify,
        &prompts.verify_answer,
        &[
            ("question", question.to_string()),
            ("answer", answer.to_string()),
            ("ground_truth", ground_truth.to_string()),
        ],
        &[],
    );
    let reply = verifier.chat(&req).await?;
    parse_verdict(&reply.text).ok_or_else(|| GatewayError::InvalidResponse {
        message: format!("unreadable verdict: {}", reply.text),
        attempts: reply.attempts,
    })
}

pub async fn rejection_sample(trajectory: &Trajectory, verifier: &dyn ChatModel, prompts: &Prompts) -> SampleVerdict {
    let Some(answer) = trajectory.final_answer() else {
        return SampleVerdict::Discard("no_answer".into());
    };
    let Some(truth) = trajectory.ground_truth.as_deref() else {
        return SampleVerdict::Discard("no_ground_truth".into());
    };
    match verify_answer(&trajectory.question, answer, truth, verifier, prompts).await {
        Ok(true) => SampleVerdict::Keep,
        Ok(false) => SampleVerdict::Discard("inconsistent".into()),
        Err(e) => {
            tracing::warn!(id = %trajectory.id, error = %e, "verifier failed");
            SampleVerdict::Discard("unverifiable".into())
        }
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    id: &'a str,
    reason: &'a str,
}

/// Line-delimited discard log.
pub struct AuditLog<W: Write> {
    out: W,
}

impl<W: Write> AuditLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, id: &str, reason: &str) -> std::io::Result<()> {
        let line = serde_json::to_string(&AuditRecord { id, reason }).map_err(std::io::Error::other)?;
        writeln!(self.out, "{line}")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
