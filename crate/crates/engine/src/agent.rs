//! One ReAct turn at a time: query the policy, run safeguards, dispatch
//! tools, append under budgets.

use std::collections::BTreeMap;
use std::sync::Arc;

use vdr_core::react::{parse_react, render_step_response};
use vdr_core::{
    append_step, detect_repetition, Action, AppendError, BudgetKind, Budgets, Observation,
    ObservationStatus, Phase, RepetitionParams, SafeguardState, Step, StepOutcome, Termination, TokenCounter,
    ToolArgs, Trajectory, Verdict,
};

use crate::gateway::{ChatModel, ChatRequest, ChatTurn, Purpose};
use crate::tools::{dispatch_calls, CallContext, Dispatch, ToolBackend, ToolPermissions, VisualAccess};

pub type SharedCounter = Arc<dyn TokenCounter + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSettings {
    pub budgets: Budgets,
    pub repetition: RepetitionParams,
    pub error_limit: u32,
    pub seed: u64,
    pub permissions: ToolPermissions,
    /// Every new step is text-phase (continuation after bridging).
    pub text_phase_only: bool,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            budgets: Budgets::default(),
            repetition: RepetitionParams::default(),
            error_limit: 3,
            seed: 0,
            permissions: ToolPermissions::ALL,
            text_phase_only: false,
        }
    }
}

#[derive(Clone)]
pub struct Agent {
    pub policy: Arc<dyn ChatModel>,
    pub backend: Arc<dyn ToolBackend>,
    pub dispatch: Dispatch,
    pub counter: SharedCounter,
    pub settings: AgentSettings,
}

/// A trajectory under construction plus what the policy sees before its steps.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task_id: String,
    pub trajectory: Trajectory,
    pub preamble: Vec<ChatTurn>,
    pub safeguard: SafeguardState,
    pub vars: BTreeMap<String, String>,
}

impl Episode {
    pub fn new(task_id: impl Into<String>, trajectory: Trajectory, preamble: Vec<ChatTurn>, settings: &AgentSettings) -> Self {
        let mut safeguard = SafeguardState::new(settings.repetition);
        safeguard.error_limit = settings.error_limit;
        Self { task_id: task_id.into(), trajectory, preamble, safeguard, vars: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Continue,
    Done(Termination),
}

/// Chat turns for a trajectory: the preamble, then each step's response and observations.
pub fn history(preamble: &[ChatTurn], trajectory: &Trajectory) -> Vec<ChatTurn> {
    let mut turns = preamble.to_vec();
    for step in &trajectory.steps {
        turns.push(ChatTurn::assistant(render_step_response(step)));
        for o in &step.observations {
            turns.push(match o.status {
                ObservationStatus::FormatError => ChatTurn::user(o.content.clone()),
                _ => ChatTurn::tool(o.for_call.clone(), o.content.clone()),
            });
        }
    }
    turns
}

fn visual_access_name(v: VisualAccess) -> &'static str {
    match v {
        VisualAccess::Disabled => "disabled",
        VisualAccess::WholeImage => "whole_image",
        VisualAccess::MultiScale => "multi_scale",
    }
}

/// Structural problems that make a parsed action unusable as recorded.
fn action_problem(action: &Action, trajectory: &Trajectory) -> Option<String> {
    for call in action.calls() {
        if let ToolArgs::VisualSearch { crops, .. } = &call.args {
            if crops.is_empty() {
                return Some("visual_search without crops".into());
            }
            for c in crops {
                if !(c.scale > 0.0 && c.scale.is_finite()) || c.bbox.is_empty() {
                    return Some("invalid crop".into());
                }
                if let Some(img) = &trajectory.image {
                    if !c.bbox.fits(img.width, img.height) {
                        return Some("crop outside the image".into());
                    }
                }
            }
        }
    }
    None
}

impl Agent {
    fn safeguard(&self, ep: &mut Episode, outcome: StepOutcome) -> StepResult {
        match ep.safeguard.record(outcome) {
            Verdict::Continue => StepResult::Continue,
            Verdict::Terminate(t) => StepResult::Done(t),
        }
    }

    fn phase_for(&self, trajectory: &Trajectory, action: &Action) -> Phase {
        let in_text = self.settings.text_phase_only || trajectory.steps.iter().any(|s| s.phase == Phase::Text);
        let all_visual = !action.calls().is_empty()
            && action.calls().iter().all(|c| matches!(c.args, ToolArgs::VisualSearch { .. }));
        if !in_text && all_visual {
            Phase::Vision
        } else {
            Phase::Text
        }
    }

    pub async fn step_trajectory(&self, ep: &mut Episode) -> StepResult {
        let budgets = &self.settings.budgets;
        if ep.trajectory.steps.len() as u32 >= budgets.max_turns {
            return StepResult::Done(Termination::MaxTurns);
        }
        let turn = ep.trajectory.last_turn() + 1;
        let mut req = ChatRequest::new(Purpose::Policy);
        req.turns = history(&ep.preamble, &ep.trajectory);
        req.vars = ep.vars.clone();
        req.vars.insert("task".into(), ep.task_id.clone());
        req.vars.insert("turn".into(), turn.to_string());
        req.vars.insert("question".into(), ep.trajectory.question.clone());
        req.vars.insert("visual".into(), visual_access_name(self.settings.permissions.visual).into());
        req.vars.insert("text_tools".into(), self.settings.permissions.text.to_string());

        let text = match self.policy.chat(&req).await {
            Ok(reply) => reply.text,
            Err(e) => {
                tracing::warn!(task = %ep.task_id, turn, error = %e, "policy call failed");
                return self.safeguard(ep, StepOutcome::ToolError);
            }
        };
        if self.counter.count(&text) > budgets.max_turn_tokens {
            return StepResult::Done(Termination::ContextExceeded);
        }
        if detect_repetition(&text, &self.settings.repetition) {
            return self.safeguard(ep, StepOutcome::Repetition);
        }
        let (reasoning, mut action) = match parse_react(&text) {
            Ok(parsed) => parsed.into_action(),
            Err(_) => (String::new(), Action::Malformed { raw: text.clone() }),
        };
        if let Some(problem) = action_problem(&action, &ep.trajectory) {
            tracing::debug!(task = %ep.task_id, turn, problem, "unusable action");
            action = Action::Malformed { raw: text.clone() };
        }
        let phase = self.phase_for(&ep.trajectory, &action);
        let observations = match &action {
            Action::Malformed { .. } => vec![Observation::format_error(format!("turn-{turn}"))],
            Action::Answer { .. } => Vec::new(),
            Action::ToolCalls { calls } => {
                let ctx = CallContext {
                    task_id: ep.task_id.clone(),
                    seed: self.settings.seed,
                    turn,
                    question: ep.trajectory.question.clone(),
                    image: ep.trajectory.image.clone(),
                    permissions: self.settings.permissions,
                };
                dispatch_calls(&self.dispatch, &self.backend, calls, &ctx).await
            }
        };
        let step = Step { turn, phase, reasoning, action, observations };
        let outcome = match &step.action {
            Action::Malformed { .. } => StepOutcome::FormatError,
            _ if step.is_error() => StepOutcome::ToolError,
            _ => StepOutcome::Ok,
        };
        let answered = step.action.is_terminal();
        match append_step(&mut ep.trajectory, step, budgets, self.counter.as_ref()) {
            Ok(_) => {}
            Err(AppendError::Budget(v)) if v.kind == BudgetKind::MaxTurns => {
                return StepResult::Done(Termination::MaxTurns)
            }
            Err(AppendError::Budget(_)) => return StepResult::Done(Termination::ContextExceeded),
            Err(e) => {
                tracing::warn!(task = %ep.task_id, turn, error = %e, "step rejected");
                return self.safeguard(ep, StepOutcome::FormatError);
            }
        }
        if answered {
            return StepResult::Done(Termination::Answered);
        }
        self.safeguard(ep, outcome)
    }

    /// Steps until termination, which is also recorded on the trajectory.
    pub async fn run(&self, ep: &mut Episode) -> Termination {
        loop {
            if let StepResult::Done(t) = self.step_trajectory(ep).await {
                ep.trajectory.termination = Some(t);
                return t;
            }
        }
    }
}
