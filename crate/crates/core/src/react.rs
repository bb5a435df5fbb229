//! ReAct response grammar.
//!
//! A model response holds an optional `<think>` block followed by exactly one
//! of `<tool_call>` or `<answer>`. The tool-call body is a JSON array (a single
//! object is accepted too) of `{"id"?, "name", "arguments"}` records whose
//! `arguments` match the tool's argument schema:
//!
//! ```text
//! <think>locate the logo</think>
//! <tool_call>[{"id":"c1","name":"visual_search","arguments":{"crops":[{"box":[0,0,64,64],"scale":1.5}]}}]</tool_call>
//! ```
//!
//! Block contents are trimmed. Text outside the blocks is ignored.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Action, Step, ToolArgs, ToolCall, ToolKind};

const THINK: &str = "think";
const TOOL_CALL: &str = "tool_call";
const ANSWER: &str = "answer";

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedAction {
    Calls(Vec<ToolCall>),
    Answer(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub reasoning: String,
    pub action: ParsedAction,
}

impl ParsedResponse {
    pub fn into_action(self) -> (String, Action) {
        let action = match self.action {
            ParsedAction::Calls(calls) => Action::ToolCalls { calls },
            ParsedAction::Answer(text) => Action::Answer { text },
        };
        (self.reasoning, action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    Unbalanced(&'static str),
    Duplicate(&'static str),
    Overlapping,
    MissingAction,
    BothActions,
    BadCallBody(String),
    EmptyCalls,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Unbalanced(tag) => write!(f, "unbalanced <{tag}> block"),
            FormatError::Duplicate(tag) => write!(f, "more than one <{tag}> block"),
            FormatError::Overlapping => f.write_str("blocks overlap"),
            FormatError::MissingAction => f.write_str("neither <tool_call> nor <answer> present"),
            FormatError::BothActions => f.write_str("both <tool_call> and <answer> present"),
            FormatError::BadCallBody(e) => write!(f, "invalid tool_call body: {e}"),
            FormatError::EmptyCalls => f.write_str("tool_call block lists no calls"),
        }
    }
}

impl core::error::Error for FormatError {}

/// Locates the single `<tag>...</tag>` block, if any, returning (outer span, inner text).
fn find_block<'a>(
    text: &'a str,
    tag: &'static str,
) -> Result<Option<((usize, usize), &'a str)>, FormatError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let opens: Vec<usize> = text.match_indices(open.as_str()).map(|(i, _)| i).collect();
    let closes: Vec<usize> = text.match_indices(close.as_str()).map(|(i, _)| i).collect();
    match (opens.len(), closes.len()) {
        (0, 0) => Ok(None),
        (1, 1) => {
            let start = opens[0];
            let end = closes[0];
            if end < start + open.len() {
                return Err(FormatError::Unbalanced(tag));
            }
            let inner = &text[start + open.len()..end];
            Ok(Some(((start, end + close.len()), inner)))
        }
        (a, b) if a == b => Err(FormatError::Duplicate(tag)),
        _ => Err(FormatError::Unbalanced(tag)),
    }
}

#[derive(Deserialize)]
struct WireCall {
    #[serde(default)]
    id: Option<String>,
    name: String,
    #[serde(default)]
    arguments: Value,
}

#[derive(Serialize)]
struct WireCallOut<'a> {
    id: &'a str,
    name: &'a str,
    arguments: Value,
}

fn decode_calls(body: &str) -> Result<Vec<ToolCall>, FormatError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| FormatError::BadCallBody(e.to_string()))?;
    let items = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => alloc::vec![obj],
        _ => return Err(FormatError::BadCallBody("expected an array of calls".into())),
    };
    if items.is_empty() {
        return Err(FormatError::EmptyCalls);
    }
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| {
            let wire: WireCall = serde_json::from_value(item)
                .map_err(|e| FormatError::BadCallBody(e.to_string()))?;
            let kind = ToolKind::parse(&wire.name)
                .ok_or_else(|| FormatError::BadCallBody(format!("unknown tool {}", wire.name)))?;
            let mut tagged = serde_json::Map::new();
            tagged.insert("tool".into(), Value::String(kind.as_str().into()));
            tagged.insert("args".into(), wire.arguments);
            let args: ToolArgs = serde_json::from_value(Value::Object(tagged))
                .map_err(|e| FormatError::BadCallBody(format!("{}: {e}", wire.name)))?;
            if let ToolArgs::VisualSearch { crops, .. } = &args {
                if crops.is_empty() {
                    return Err(FormatError::BadCallBody("visual_search needs at least one crop".into()));
                }
                if crops.iter().any(|c| !(c.scale > 0.0 && c.scale.is_finite())) {
                    return Err(FormatError::BadCallBody("crop scale must be positive".into()));
                }
            }
            let id = wire.id.unwrap_or_else(|| format!("call-{}", i + 1));
            Ok(ToolCall::new(id, args))
        })
        .collect()
}

/// Parses one assistant message. Never panics.
pub fn parse_react(text: &str) -> Result<ParsedResponse, FormatError> {
    let think = find_block(text, THINK)?;
    let call = find_block(text, TOOL_CALL)?;
    let answer = find_block(text, ANSWER)?;

    let mut spans: Vec<(usize, usize)> = [&think, &call, &answer]
        .iter()
        .filter_map(|b| b.map(|(span, _)| span))
        .collect();
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(FormatError::Overlapping);
    }

    let reasoning = think.map(|(_, t)| t.trim().to_owned()).unwrap_or_default();
    let action = match (call, answer) {
        (None, None) => return Err(FormatError::MissingAction),
        (Some(_), Some(_)) => return Err(FormatError::BothActions),
        (Some((_, body)), None) => ParsedAction::Calls(decode_calls(body.trim())?),
        (None, Some((_, a))) => ParsedAction::Answer(a.trim().to_owned()),
    };
    Ok(ParsedResponse { reasoning, action })
}

/// Lossy entry point for raw bytes from a transport.
pub fn parse_react_bytes(bytes: &[u8]) -> Result<ParsedResponse, FormatError> {
    parse_react(&String::from_utf8_lossy(bytes))
}

fn encode_calls(calls: &[ToolCall]) -> String {
    let wire: Vec<WireCallOut<'_>> = calls
        .iter()
        .map(|c| {
            let tagged = serde_json::to_value(&c.args).unwrap_or(Value::Null);
            let arguments = match tagged {
                Value::Object(mut m) => m.remove("args").unwrap_or(Value::Null),
                _ => Value::Null,
            };
            WireCallOut {
                id: &c.call_id,
                name: c.tool().as_str(),
                arguments,
            }
        })
        .collect();
    // '<' only occurs inside JSON strings; escaping it keeps argument text from forming tags.
    serde_json::to_string(&wire).unwrap_or_default().replace('<', "\\u003c")
}

/// Canonical formatter; `parse_react(&render_react(x)) == Ok(x)` for valid `x`.
pub fn render_react(response: &ParsedResponse) -> String {
    let mut out = format!("<think>{}</think>\n", response.reasoning);
    match &response.action {
        ParsedAction::Calls(calls) => {
            out.push_str("<tool_call>");
            out.push_str(&encode_calls(calls));
            out.push_str("</tool_call>");
        }
        ParsedAction::Answer(a) => {
            out.push_str("<answer>");
            out.push_str(a);
            out.push_str("</answer>");
        }
    }
    out
}

/// The assistant message a step corresponds to; malformed steps return their raw text.
pub fn render_step_response(step: &Step) -> String {
    match &step.action {
        Action::ToolCalls { calls } => render_react(&ParsedResponse {
            reasoning: step.reasoning.clone(),
            action: ParsedAction::Calls(calls.clone()),
        }),
        Action::Answer { text } => render_react(&ParsedResponse {
            reasoning: step.reasoning.clone(),
            action: ParsedAction::Answer(text.clone()),
        }),
        Action::Malformed { raw } => raw.clone(),
    }
}

/// True when `text` could appear as block content without confusing the parser.
pub fn is_block_safe(text: &str) -> bool {
    text.trim() == text
        && ![THINK, TOOL_CALL, ANSWER]
            .iter()
            .any(|t| text.contains(&format!("<{t}>")) || text.contains(&format!("</{t}>")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, CropSpec};

    #[test]
    fn parses_visual_search_call() {
        let text = r#"<think>locate the logo</think>
<tool_call>[{"name":"visual_search","arguments":{"crops":[{"box":[0,0,10,10],"scale":1.5}]}}]</tool_call>"#;
        let parsed = parse_react(text).unwrap();
        assert_eq!(parsed.reasoning, "locate the logo");
        match parsed.action {
            ParsedAction::Calls(calls) => {
                assert_eq!(calls.len(), 1);
                assert_eq!(calls[0].call_id, "call-1");
                assert_eq!(
                    calls[0].args,
                    ToolArgs::VisualSearch {
                        image_id: None,
                        crops: alloc::vec![CropSpec { bbox: BoundingBox::new(0, 0, 10, 10), scale: 1.5 }],
                    }
                );
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_answer() {
        let parsed = parse_react("<think>easy</think><answer> Paris </answer>").unwrap();
        assert_eq!(parsed.action, ParsedAction::Answer("Paris".into()));
    }

    #[test]
    fn missing_action_is_format_error() {
        assert_eq!(parse_react("<think>hmm</think>"), Err(FormatError::MissingAction));
    }

    #[test]
    fn both_actions_rejected() {
        let t = r#"<answer>x</answer><tool_call>[{"name":"web_search","arguments":{"query":"q"}}]</tool_call>"#;
        assert_eq!(parse_react(t), Err(FormatError::BothActions));
    }

    #[test]
    fn unbalanced_and_duplicate() {
        assert_eq!(parse_react("<answer>x"), Err(FormatError::Unbalanced("answer")));
        assert_eq!(parse_react("</answer>x<answer>"), Err(FormatError::Unbalanced("answer")));
        assert_eq!(
            parse_react("<answer>a</answer><answer>b</answer>"),
            Err(FormatError::Duplicate("answer"))
        );
    }

    #[test]
    fn nested_blocks_rejected() {
        assert_eq!(
            parse_react("<think><answer>x</answer></think>"),
            Err(FormatError::Overlapping)
        );
    }

    #[test]
    fn unknown_tool_and_empty_crops() {
        assert!(matches!(
            parse_react(r#"<tool_call>[{"name":"teleport","arguments":{}}]</tool_call>"#),
            Err(FormatError::BadCallBody(_))
        ));
        assert!(matches!(
            parse_react(r#"<tool_call>[{"name":"visual_search","arguments":{"crops":[]}}]</tool_call>"#),
            Err(FormatError::BadCallBody(_))
        ));
        assert_eq!(parse_react("<tool_call>[]</tool_call>"), Err(FormatError::EmptyCalls));
    }

    #[test]
    fn single_object_body_accepted() {
        let p = parse_react(r#"<tool_call>{"id":"a","name":"web_search","arguments":{"query":"q"}}</tool_call>"#)
            .unwrap();
        assert_eq!(
            p.action,
            ParsedAction::Calls(alloc::vec![ToolCall::new("a", ToolArgs::WebSearch { query: "q".into() })])
        );
    }
}
