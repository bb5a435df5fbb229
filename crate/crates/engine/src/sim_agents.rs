//! Simulated models over a [`SimWorld`], answering every request purpose.
//!
//! The policy perceives entity kinds from image layouts, identifies entities
//! only through search results, and follows relation chains with web search
//! and page summaries. `noise` is the chance a crop targets the wrong region.

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::json;
use vdr_core::sim::{describe_image, dominant_region, sim_summarize, CallKey, SimWorld};
use vdr_core::{parse_react, BoundingBox, ImageRef, ParsedAction, SimRegion, ToolArgs};

use crate::error::GatewayError;
use crate::forge::normalize_answer;
use crate::gateway::{ChatModel, ChatReply, ChatRequest, Purpose, Role};

/// What a synthesized question asks, read back from its wording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuestion {
    pub subject: Subject,
    /// Relation labels from the subject to the answer.
    pub chain: Vec<String>,
    pub has_clauses: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subject {
    /// "the {kind} in the image"
    Visual(String),
    Named(String),
}

static VISUAL_SUBJECT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^the (.+?) in the image( whose .*)?$").unwrap());

pub fn parse_question(question: &str) -> Option<ParsedQuestion> {
    let mut target = question.trim().strip_prefix("What is the name of ")?.strip_suffix('?')?;
    let mut outer_first = Vec::new();
    loop {
        if let Some(c) = VISUAL_SUBJECT.captures(target).filter(|c| !c[1].contains(" of ")) {
            outer_first.reverse();
            return Some(ParsedQuestion {
                subject: Subject::Visual(c[1].to_string()),
                chain: outer_first,
                has_clauses: c.get(2).is_some(),
            });
        }
        match target.strip_prefix("the ").and_then(|t| t.split_once(" of ")) {
            Some((label, rest)) => {
                outer_first.push(label.to_string());
                target = rest;
            }
            None => {
                outer_first.reverse();
                return Some(ParsedQuestion {
                    subject: Subject::Named(target.to_string()),
                    chain: outer_first,
                    has_clauses: false,
                });
            }
        }
    }
}

/// `key: value` pairs of a summary line `Head: k: v; k: v`, when it starts with `head`.
fn summary_facts(content: &str, head: Option<&str>) -> Option<BTreeMap<String, String>> {
    let first = content.lines().next()?;
    let body = match head {
        Some(h) => first.strip_prefix(h)?.strip_prefix(": ")?,
        None => first,
    };
    let mut facts = BTreeMap::new();
    for part in body.split("; ") {
        let (key, value) = part.rsplit_once(": ")?;
        let key = key.rsplit(": ").next().unwrap_or(key);
        facts.entry(key.trim().to_string()).or_insert_with(|| value.trim().to_string());
    }
    Some(facts)
}

fn shows_kind(region: &SimRegion, kind: &str) -> bool {
    region.descriptor.contains(&format!(" {kind} with "))
}

#[derive(Debug, Clone)]
pub struct SimModels {
    world: Arc<SimWorld>,
    noise: f64,
}

const VISUAL_ATTEMPTS_CIS: usize = 3;
const CIS_SCALES: [f64; 3] = [1.0, 1.5, 2.5];

impl SimModels {
    pub fn new(world: Arc<SimWorld>, noise: f64) -> Self {
        Self { world, noise: noise.clamp(0.0, 1.0) }
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    fn rng(&self, task: &str, turn: u32, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(CallKey::new(self.world.seed(), task, turn, 0).mix(salt))
    }

    /// Entities some models recognize on sight.
    pub fn famous(&self, descriptor: &str) -> bool {
        CallKey::task_hash(descriptor) % 5 == 0
    }

    fn target_region<'a>(&self, image: &'a ImageRef, kind: &str) -> Option<&'a SimRegion> {
        image.sim_regions()?.iter().find(|r| shows_kind(r, kind))
    }

    /// Name of a famous entity of `kind` in the image, for bare name questions.
    fn recall(&self, image: Option<&ImageRef>, question: &str) -> Option<String> {
        let q = parse_question(question)?;
        let Subject::Visual(kind) = q.subject else { return None };
        if !q.chain.is_empty() || q.has_clauses {
            return None;
        }
        let region = self.target_region(image?, &kind)?;
        self.famous(&region.descriptor)
            .then(|| self.world.entity_by_descriptor(&region.descriptor).map(|e| e.name.clone()))?
    }

    fn propose(&self, req: &ChatRequest) -> String {
        let Some(image) = req.images().next() else { return "No image.".into() };
        let regions = image.sim_regions().unwrap_or_default();
        if regions.is_empty() {
            return "<think>Only background is visible.</think>".into();
        }
        let kind = parse_question(req.get("question")).and_then(|q| match q.subject {
            Subject::Visual(k) => Some(k),
            Subject::Named(_) => None,
        });
        let mut ordered: Vec<&SimRegion> = regions.iter().collect();
        if let Some(k) = &kind {
            ordered.sort_by_key(|r| !shows_kind(r, k));
        }
        let turn: u32 = req.get("turn").parse().unwrap_or(1);
        let mut idx = (turn as usize - 1) % ordered.len();
        if self.rng(req.get("question"), turn, 0x9e0).random_bool(self.noise) {
            idx = (idx + 1) % ordered.len();
        }
        let b = ordered[idx].region;
        format!(
            "<think>Region {} may matter for the question.</think>\n[[{}, {}, {}, {}]]",
            idx + 1,
            b.x0,
            b.y0,
            b.x1,
            b.y1
        )
    }

    fn judge(&self, req: &ChatRequest) -> String {
        let evidence = req.get("evidence").to_lowercase();
        let truth = req.get("ground_truth").to_lowercase();
        let kind_found = match parse_question(req.get("question")).map(|q| q.subject) {
            Some(Subject::Visual(k)) => evidence.contains(&format!("kind: {}", k.to_lowercase())),
            _ => false,
        };
        let hit = (!truth.is_empty() && evidence.contains(&truth)) || kind_found;
        json!({"hit": u8::from(hit), "rationale": if hit { "target entity identified" } else { "target not identified" }})
            .to_string()
    }

    fn match_entity(&self, req: &ChatRequest) -> String {
        let page = req.get("page");
        let found = req
            .images()
            .next()
            .and_then(dominant_region)
            .filter(|(r, _)| page.contains(&format!("![{}](", r.descriptor)))
            .and_then(|(r, _)| self.world.entity_by_descriptor(&r.descriptor));
        match found {
            Some(e) => json!({"same": true, "name": e.name, "kind": e.kind}).to_string(),
            None => json!({"same": false}).to_string(),
        }
    }

    fn select_question(&self, req: &ChatRequest) -> String {
        let best = req
            .get("candidates")
            .lines()
            .filter_map(|l| l.split_once(". "))
            .min_by_key(|(_, q)| q.len())
            .map_or("1", |(n, _)| n);
        best.to_string()
    }

    fn policy(&self, req: &ChatRequest) -> String {
        let turn: u32 = req.get("turn").parse().unwrap_or(1);
        let task = req.get("task");
        let image = req.images().next();
        let Some(q) = parse_question(req.get("question")) else {
            return answer("The question is outside what I can research.", "unknown");
        };
        let text_tools = req.get("text_tools") == "true";
        let visual = req.get("visual");
        let tool_texts: Vec<&str> =
            req.turns.iter().filter(|t| t.role == Role::Tool).map(|t| t.text.as_str()).collect();
        let issued: Vec<&str> =
            req.turns.iter().filter(|t| t.role == Role::Assistant).map(|t| t.text.as_str()).collect();

        let (mut current, rest) = match &q.subject {
            Subject::Named(title) => (title.clone(), q.chain.as_slice()),
            Subject::Visual(kind) => {
                let needle = format!("kind: {kind}");
                let facts = tool_texts
                    .iter()
                    .filter(|t| t.contains(&needle))
                    .find_map(|t| summary_facts(t, None).filter(|f| f.get("kind") == Some(kind)));
                let Some(facts) = facts else {
                    if visual == "disabled" {
                        let guess = self.recall(image, req.get("question")).unwrap_or_else(|| "unknown".into());
                        return answer("I cannot search the image.", &guess);
                    }
                    return self.visual_attempt(image, kind, visual, task, turn, &issued);
                };
                let Some(name) = facts.get("name") else {
                    return answer("The search result lacks a name.", "unknown");
                };
                match q.chain.first() {
                    None => return answer(&format!("Image search identifies the {kind} as {name}."), name),
                    Some(label) => match facts.get(label) {
                        Some(v) => (v.clone(), &q.chain[1..]),
                        None => return answer(&format!("No {label} is listed for {name}."), "unknown"),
                    },
                }
            }
        };
        for label in rest {
            let known = tool_texts
                .iter()
                .find_map(|t| summary_facts(t, Some(&current)).and_then(|f| f.get(label).cloned()));
            if let Some(next) = known {
                current = next;
                continue;
            }
            if !text_tools {
                return answer("Text tools are unavailable.", "unknown");
            }
            let url = tool_texts.iter().flat_map(|t| t.lines()).find_map(|l| result_url(l, &current));
            let args = match url {
                Some(url) => ToolArgs::SummarizePage { url, query: label.clone() },
                None => ToolArgs::WebSearch { query: current.clone() },
            };
            let repeated = issued.iter().filter_map(|t| parse_react(t).ok()).any(|p| match p.action {
                ParsedAction::Calls(calls) => calls.iter().any(|c| c.args == args),
                ParsedAction::Answer(_) => false,
            });
            let call = render_call(&format!("t{turn}"), &args);
            if repeated {
                return answer(&format!("Searching again for the {label} of {current} will not help."), "unknown");
            }
            return format!("<think>I need the {label} of {current}.</think>\n<tool_call>{call}</tool_call>");
        }
        answer("The relation chain is resolved.", &current)
    }

    fn visual_attempt(
        &self,
        image: Option<&ImageRef>,
        kind: &str,
        visual: &str,
        task: &str,
        turn: u32,
        issued: &[&str],
    ) -> String {
        let Some(image) = image else { return answer("There is no image.", "unknown") };
        let attempts = issued.iter().filter(|t| t.contains("\"visual_search\"")).count();
        let crops: Vec<serde_json::Value> = match visual {
            "whole_image" if attempts == 0 => {
                let b = image.whole_box();
                vec![json!({"box": [b.x0, b.y0, b.x1, b.y1], "scale": 1.0})]
            }
            "multi_scale" if attempts < VISUAL_ATTEMPTS_CIS => {
                let regions = image.sim_regions().unwrap_or_default();
                let mut rng = self.rng(task, turn, 0xc15);
                let chosen: Option<BoundingBox> = if !regions.is_empty() && rng.random_bool(self.noise) {
                    Some(regions[rng.random_range(0..regions.len())].region)
                } else {
                    self.target_region(image, kind).map(|r| r.region)
                };
                let Some(b) = chosen else {
                    return answer(&format!("I see no {kind} in the image."), "unknown");
                };
                CIS_SCALES.iter().map(|s| json!({"box": [b.x0, b.y0, b.x1, b.y1], "scale": s})).collect()
            }
            _ => return answer(&format!("Image search did not identify the {kind}."), "unknown"),
        };
        let call = json!([{
            "id": format!("t{turn}"),
            "name": "visual_search",
            "arguments": {"image_id": image.id, "crops": crops},
        }]);
        format!("<think>Identify the {kind} by image search.</think>\n<tool_call>{call}</tool_call>")
    }

    fn respond(&self, req: &ChatRequest) -> String {
        match req.purpose {
            Purpose::Policy => self.policy(req),
            Purpose::ProposeRegions => self.propose(req),
            Purpose::JudgeHit => self.judge(req),
            Purpose::Describe => req.images().next().map(describe_image).unwrap_or_default(),
            Purpose::Summarize => match sim_summarize(req.get("page"), req.images().next(), req.get("query")) {
                Ok(s) => s,
                Err(_) => "irrelevant".into(),
            },
            Purpose::Verify => {
                let same = normalize_answer(req.get("answer")) == normalize_answer(req.get("ground_truth"));
                if same { "yes" } else { "no" }.into()
            }
            Purpose::SelectImage => match req.images().next().and_then(ImageRef::sim_regions) {
                Some(r) if !r.is_empty() => "keep: real-world scene with identifiable entities".into(),
                _ => "reject: nothing identifiable".into(),
            },
            Purpose::MatchEntity => self.match_entity(req),
            Purpose::DirectAnswer => {
                self.recall(req.images().next(), req.get("question")).unwrap_or_else(|| "unknown".into())
            }
            Purpose::EntityQuestion => json!({
                "question": format!("What is the name of the {} in the image?", req.get("kind")),
                "answer": req.get("name"),
            })
            .to_string(),
            Purpose::DraftQuestion => req.get("draft").to_string(),
            Purpose::SelectQuestion => self.select_question(req),
        }
    }
}

/// `[{"id", "name", "arguments"}]` for one call.
fn render_call(id: &str, args: &ToolArgs) -> serde_json::Value {
    let tagged = serde_json::to_value(args).unwrap_or_default();
    json!([{"id": id, "name": args.kind().as_str(), "arguments": tagged["args"]}])
}

fn answer(reasoning: &str, text: &str) -> String {
    format!("<think>{reasoning}</think>\n<answer>{text}</answer>")
}

/// URL of a `N. Title (url)` search-result line whose title is `title`.
fn result_url(line: &str, title: &str) -> Option<String> {
    let rest = line.split_once(". ")?.1;
    let (t, url) = rest.rsplit_once(" (")?;
    (t == title).then(|| url.trim_end_matches(')').to_string())
}

#[async_trait]
impl ChatModel for SimModels {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        Ok(ChatReply { text: self.respond(request), attempts: 1 })
    }
}
