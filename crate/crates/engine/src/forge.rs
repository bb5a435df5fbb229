//! VQA synthesis: image curation, candidate filters, entity verification by
//! search, and fuzzy multi-hop questions built by alternating answer chaining
//! with entity walks.

use std::sync::{Arc, LazyLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use vdr_core::sim::CallKey;
use vdr_core::{expand_crop, BoundingBox, ImageRef};

use crate::error::GatewayError;
use crate::gateway::{ChatModel, Purpose};
use crate::prompts::{templated, Prompts};
use crate::tools::{crop_image, ToolBackend, ToolFailure};
use crate::vision::{propose_regions, VisionConfig};

pub const MIN_IMAGE_SIDE: u32 = 224;
pub const CANDIDATES_PER_ROUND: usize = 3;
pub const MAX_WALK_HOPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    Curated,
    FuzzySynth,
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObfuscationKind {
    AnswerChain,
    EntityWalk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObfuscationStep {
    pub kind: ObfuscationKind,
    pub from_entity: String,
    pub to_entity: String,
    pub evidence_url: String,
    pub hop_index: u32,
    /// Pages visited to establish the step, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub url: String,
}

/// Structured form of a synthesized question, kept so later rounds can extend it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFrame {
    /// Visual role of the subject ("cat"); empty when the subject is named outright.
    pub kind: String,
    pub subject: Node,
    /// Relation labels from the subject to the answer.
    pub chain: Vec<String>,
    pub answer_node: Node,
    /// Indirect descriptions of the subject ("whose owner's mentor is X").
    pub clauses: Vec<String>,
    /// Pages already used by the question; later hops avoid them.
    pub visited: Vec<String>,
}

impl QuestionFrame {
    fn subject_phrase(&self) -> String {
        let base = if self.kind.is_empty() {
            self.subject.name.clone()
        } else {
            format!("the {} in the image", self.kind)
        };
        if self.clauses.is_empty() {
            base
        } else {
            format!("{base} {}", self.clauses.join(" and "))
        }
    }

    /// The canonical question this frame asks.
    pub fn question(&self) -> String {
        let mut target = self.subject_phrase();
        for label in &self.chain {
            target = format!("the {label} of {target}");
        }
        format!("What is the name of {target}?")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaInstance {
    pub id: String,
    /// Absent only for text-only instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub provenance: Vec<ObfuscationStep>,
    pub source: InstanceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<QuestionFrame>,
}

impl VqaInstance {
    /// Answer non-empty, fuzzy instances carry provenance, hop indices run 1..n.
    pub fn validate(&self) -> Result<(), String> {
        if self.answer.trim().is_empty() {
            return Err(format!("{}: empty answer", self.id));
        }
        if self.source == InstanceSource::FuzzySynth && self.provenance.is_empty() {
            return Err(format!("{}: fuzzy instance without provenance", self.id));
        }
        if self.source != InstanceSource::TextOnly && self.image.is_none() {
            return Err(format!("{}: visual instance without image", self.id));
        }
        for (i, step) in self.provenance.iter().enumerate() {
            if step.hop_index != i as u32 + 1 {
                return Err(format!("{}: hop_index {} at position {}", self.id, step.hop_index, i));
            }
        }
        Ok(())
    }

    /// Provenance kinds alternate, starting with an answer chain.
    pub fn alternates(&self) -> bool {
        self.provenance.iter().enumerate().all(|(i, s)| {
            s.kind == if i % 2 == 0 { ObfuscationKind::AnswerChain } else { ObfuscationKind::EntityWalk }
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("no verifiable entity in image")]
    NoEntity,
    #[error("synthesis failed: round {round} ({kind:?}) found nothing to obfuscate")]
    SynthesisFailed { round: u32, kind: ObfuscationKind },
    #[error("candidate rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Model(#[from] GatewayError),
    #[error("tool: {0}")]
    Tool(#[from] ToolFailure),
}

// ---------------------------------------------------------------------------
// Knowledge over linked pages

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub label: String,
    pub title: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturedEntity {
    pub name: String,
    pub attributes: Vec<(String, String)>,
    pub relations: Vec<Link>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageFacts {
    pub url: String,
    pub title: String,
    pub links: Vec<Link>,
    pub featured: Vec<FeaturedEntity>,
}

impl PageFacts {
    pub fn entity(&self, name: &str) -> Option<&FeaturedEntity> {
        self.featured.iter().find(|e| e.name == name)
    }
}

/// Relations around a page, for answer chaining and entity walks.
pub trait KnowledgeSource: Send + Sync {
    fn page(&self, url: &str) -> Result<PageFacts, ToolFailure>;
}

static LINK_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^- ([^:]+): \[([^\]]+)\]\(([^)\s]+)\)\s*$").unwrap());
static ATTR_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^- ([^:]+): (.+)$").unwrap());

/// Reads `- label: [Title](url)` fact lines and `### Name` featured sections from page markdown.
pub fn parse_page(url: &str, markdown: &str) -> PageFacts {
    let title = markdown
        .lines()
        .find_map(|l| l.strip_prefix("# "))
        .unwrap_or(url)
        .trim()
        .to_string();
    let mut links = Vec::new();
    let mut featured: Vec<FeaturedEntity> = Vec::new();
    for line in markdown.lines() {
        if let Some(name) = line.strip_prefix("### ") {
            featured.push(FeaturedEntity { name: name.trim().to_string(), attributes: Vec::new(), relations: Vec::new() });
            continue;
        }
        if line.starts_with("## ") {
            if !featured.is_empty() {
                break;
            }
            continue;
        }
        if let Some(c) = LINK_LINE.captures(line) {
            let link = Link { label: c[1].trim().to_string(), title: c[2].trim().to_string(), url: c[3].to_string() };
            match featured.last_mut() {
                Some(e) => e.relations.push(link),
                None => links.push(link),
            }
        } else if let (Some(c), Some(e)) = (ATTR_LINE.captures(line), featured.last_mut()) {
            e.attributes.push((c[1].trim().to_string(), c[2].trim().to_string()));
        }
    }
    PageFacts { url: url.to_string(), title, links, featured }
}

/// Knowledge read by visiting pages through a tool backend.
pub struct WebKnowledge {
    backend: Arc<dyn ToolBackend>,
}

impl WebKnowledge {
    pub fn new(backend: Arc<dyn ToolBackend>) -> Self {
        Self { backend }
    }
}

impl KnowledgeSource for WebKnowledge {
    fn page(&self, url: &str) -> Result<PageFacts, ToolFailure> {
        Ok(parse_page(url, &self.backend.visit(url)?))
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ToolFailure> + Send + 'static,
) -> Result<T, ToolFailure> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ToolFailure::Failed(format!("worker panicked: {e}"))))
}

async fn lookup(knowledge: &Arc<dyn KnowledgeSource>, url: &str) -> Result<PageFacts, ToolFailure> {
    let k = knowledge.clone();
    let url = url.to_string();
    blocking(move || k.page(&url)).await
}

// ---------------------------------------------------------------------------
// Filters

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Discard(String),
}

impl Verdict {
    pub fn is_keep(&self) -> bool {
        *self == Verdict::Keep
    }

    fn discard(reason: &str) -> Self {
        Verdict::Discard(reason.to_string())
    }
}

/// Size rule first, then the selector model.
pub async fn filter_image(image: &ImageRef, selector: &dyn ChatModel, prompts: &Prompts) -> Verdict {
    if image.width.min(image.height) < MIN_IMAGE_SIDE {
        return Verdict::discard("size");
    }
    let req = templated(Purpose::SelectImage, &prompts.select_image, &[], std::slice::from_ref(image));
    match selector.chat(&req).await {
        Ok(reply) => {
            let first = reply.text.split_whitespace().next().unwrap_or("").to_lowercase();
            match first.trim_matches(|c: char| !c.is_alphanumeric()) {
                "keep" | "yes" | "accept" => Verdict::Keep,
                _ => Verdict::discard("selector"),
            }
        }
        Err(e) => {
            tracing::warn!(image = %image.id, error = %e, "selector failed");
            Verdict::discard("selector unavailable")
        }
    }
}

pub(crate) fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_matches(|c: char| c == '.' || c == '"' || c == '\'')
        .to_lowercase()
}

/// Discards questions the bare model already answers and images whose full view search resolves.
pub async fn filter_candidate(
    instance: &VqaInstance,
    mllm: &dyn ChatModel,
    backend: &Arc<dyn ToolBackend>,
    prompts: &Prompts,
) -> Verdict {
    let images: Vec<ImageRef> = instance.image.iter().cloned().collect();
    let req = templated(Purpose::DirectAnswer, &prompts.direct_answer, &[("question", instance.question.clone())], &images);
    match mllm.chat(&req).await {
        Ok(reply) if normalize_answer(&reply.text) == normalize_answer(&instance.answer) => {
            return Verdict::discard("direct_answerable")
        }
        Ok(_) => {}
        Err(e) => {
            tracing::warn!(id = %instance.id, error = %e, "direct-answer probe failed");
            return Verdict::discard("unverifiable");
        }
    }
    let Some(image) = instance.image.clone() else { return Verdict::Keep };
    let b = backend.clone();
    match blocking(move || b.image_search(&image)).await {
        Ok(_) => Verdict::discard("full_image_hit"),
        Err(ToolFailure::NoMatch) => Verdict::Keep,
        Err(e) => {
            tracing::warn!(id = %instance.id, error = %e, "full-image search failed");
            Verdict::discard("unverifiable")
        }
    }
}

// ---------------------------------------------------------------------------
// Entity verification and seed questions

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedEntity {
    pub name: String,
    pub kind: String,
    /// Page the image search resolved to.
    pub url: String,
    pub bbox: BoundingBox,
    pub scale: f64,
}

#[derive(Deserialize)]
struct MatchReply {
    same: bool,
    #[serde(default)]
    name: String,
    #[serde(default)]
    kind: String,
}

fn json_object<T: for<'de> Deserialize<'de>>(text: &str) -> Option<T> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    serde_json::from_str(text.get(start..=end)?).ok()
}

/// Searches each scaled crop of `bbox`; the first scale whose result the
/// matcher confirms names the entity.
pub async fn verify_entity(
    image: &ImageRef,
    bbox: BoundingBox,
    scales: &[f64],
    backend: &Arc<dyn ToolBackend>,
    mllm: &dyn ChatModel,
    prompts: &Prompts,
) -> Option<VerifiedEntity> {
    for &scale in scales {
        let Ok(expanded) = expand_crop(bbox, scale, (image.width, image.height)) else { continue };
        let Ok(crop) = crop_image(image, expanded) else { continue };
        let b = backend.clone();
        let c = crop.clone();
        let found = blocking(move || {
            let url = b.image_search(&c)?;
            let page = b.visit(&url)?;
            Ok((url, page))
        })
        .await;
        let Ok((url, page)) = found else { continue };
        let req = templated(Purpose::MatchEntity, &prompts.match_entity, &[("page", page)], std::slice::from_ref(&crop));
        let Ok(reply) = mllm.chat(&req).await else { continue };
        match json_object::<MatchReply>(&reply.text) {
            Some(m) if m.same && !m.name.trim().is_empty() => {
                return Some(VerifiedEntity { name: m.name.trim().into(), kind: m.kind.trim().into(), url, bbox, scale })
            }
            _ => continue,
        }
    }
    None
}

#[derive(Deserialize)]
struct QaReply {
    question: String,
    answer: String,
}

/// A simple question whose answer is the entity's name.
pub async fn gen_entity_question(
    entity: &VerifiedEntity,
    mllm: &dyn ChatModel,
    prompts: &Prompts,
) -> Result<(String, String), ForgeError> {
    if entity.name.trim().is_empty() {
        return Err(ForgeError::Precondition("entity has no name".into()));
    }
    let req = templated(
        Purpose::EntityQuestion,
        &prompts.entity_question,
        &[("kind", entity.kind.clone()), ("name", entity.name.clone())],
        &[],
    );
    let reply = mllm.chat(&req).await?;
    match json_object::<QaReply>(&reply.text) {
        Some(qa) if !qa.question.trim().is_empty() && !qa.answer.trim().is_empty() => {
            Ok((qa.question.trim().into(), qa.answer.trim().into()))
        }
        _ => Err(ForgeError::Model(GatewayError::InvalidResponse {
            message: format!("unusable entity question: {}", reply.text),
            attempts: reply.attempts,
        })),
    }
}

/// Models, tools and knowledge the synthesis pipeline runs against.
#[derive(Clone)]
pub struct ForgeDeps {
    pub mllm: Arc<dyn ChatModel>,
    pub selector: Arc<dyn ChatModel>,
    /// Drafts and selects candidate questions.
    pub writer: Arc<dyn ChatModel>,
    pub backend: Arc<dyn ToolBackend>,
    pub knowledge: Arc<dyn KnowledgeSource>,
    pub prompts: Arc<Prompts>,
    pub scales: Vec<f64>,
    pub seed: u64,
}

/// Curated instance for `image`: the first proposed region whose entity
/// verifies, asked about by name.
pub async fn curate(image: &ImageRef, deps: &ForgeDeps) -> Result<VqaInstance, ForgeError> {
    let cfg = VisionConfig::default();
    let proposal = propose_regions(image, "", 1, deps.mllm.as_ref(), &deps.prompts, &cfg).await;
    let mut verified = None;
    for bbox in proposal.boxes {
        if let Some(v) = verify_entity(image, bbox, &deps.scales, &deps.backend, deps.mllm.as_ref(), &deps.prompts).await {
            verified = Some(v);
            break;
        }
    }
    let entity = verified.ok_or(ForgeError::NoEntity)?;
    let (question, answer) = gen_entity_question(&entity, deps.mllm.as_ref(), &deps.prompts).await?;
    let subject = Node { name: entity.name.clone(), url: entity.url.clone() };
    Ok(VqaInstance {
        id: format!("{}-c", image.id),
        image: Some(image.clone()),
        question,
        answer: answer.clone(),
        provenance: Vec::new(),
        source: InstanceSource::Curated,
        frame: Some(QuestionFrame {
            kind: entity.kind,
            subject: subject.clone(),
            chain: Vec::new(),
            answer_node: Node { name: answer, url: subject.url },
            clauses: Vec::new(),
            visited: Vec::new(),
        }),
    })
}

// ---------------------------------------------------------------------------
// Obfuscation rounds

/// Result of one obfuscation round; `noop` means nothing applicable was found
/// and the instance is unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub instance: VqaInstance,
    pub noop: bool,
}

impl RoundOutcome {
    fn noop(instance: &VqaInstance) -> Self {
        Self { instance: instance.clone(), noop: true }
    }
}

struct Candidate {
    frame: QuestionFrame,
    answer: String,
    step: ObfuscationStep,
    facts: String,
}

fn round_rng(seed: u64, id: &str, round: usize, salt: u64) -> ChaCha8Rng {
    let key = CallKey::new(seed, id, round as u32, 0);
    ChaCha8Rng::seed_from_u64(key.mix(salt))
}

/// Links with a label that occurs once on the page, so the hop is unambiguous.
fn unambiguous(links: &[Link]) -> Vec<Link> {
    links
        .iter()
        .filter(|l| links.iter().filter(|o| o.label == l.label).count() == 1)
        .cloned()
        .collect()
}

/// Relations leaving the current answer node.
async fn answer_relations(frame: &QuestionFrame, deps: &ForgeDeps) -> Result<(String, Vec<Link>), ToolFailure> {
    let page = lookup(&deps.knowledge, &frame.answer_node.url).await?;
    let links = if frame.chain.is_empty() && !frame.kind.is_empty() {
        page.entity(&frame.subject.name).map(|e| e.relations.clone()).unwrap_or_default()
    } else {
        page.links.clone()
    };
    Ok((page.url, unambiguous(&links)))
}

/// Rewrites each candidate through the writer and lets it pick one.
async fn select(mut candidates: Vec<Candidate>, deps: &ForgeDeps) -> Option<(Candidate, String)> {
    if candidates.is_empty() {
        return None;
    }
    let mut questions = Vec::new();
    for c in &candidates {
        let draft = c.frame.question();
        let req = templated(
            Purpose::DraftQuestion,
            &deps.prompts.draft_question,
            &[("draft", draft.clone()), ("facts", c.facts.clone())],
            &[],
        );
        let text = match deps.writer.chat(&req).await {
            Ok(r) if r.text.trim().ends_with('?') => r.text.trim().to_string(),
            _ => draft,
        };
        questions.push(text);
    }
    let listing = questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {q}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let req = templated(Purpose::SelectQuestion, &deps.prompts.select_question, &[("candidates", listing)], &[]);
    let pick = match deps.writer.chat(&req).await {
        Ok(r) => first_index(&r.text, questions.len()).unwrap_or(0),
        Err(_) => 0,
    };
    let question = questions.swap_remove(pick);
    Some((candidates.swap_remove(pick), question))
}

fn first_index(text: &str, n: usize) -> Option<usize> {
    static NUM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());
    let k: usize = NUM.find(text)?.as_str().parse().ok()?;
    (1..=n).contains(&k).then(|| k - 1)
}

/// The subject's own page when the subject is a page rather than a visual entity.
fn subject_page(frame: &QuestionFrame) -> Option<&str> {
    frame.kind.is_empty().then_some(frame.subject.url.as_str())
}

fn next_hop(instance: &VqaInstance) -> u32 {
    instance.provenance.len() as u32 + 1
}

/// One more relation hop beyond the current answer; the new answer is read
/// back from the target page.
pub async fn obfuscate_answer(instance: &VqaInstance, deps: &ForgeDeps) -> Result<RoundOutcome, ForgeError> {
    let Some(frame) = instance.frame.clone() else {
        return Err(ForgeError::Precondition(format!("{} has no question frame", instance.id)));
    };
    if instance.answer.trim().is_empty() {
        return Err(ForgeError::Precondition("instance has no answer".into()));
    }
    let Ok((evidence_url, links)) = answer_relations(&frame, deps).await else {
        return Ok(RoundOutcome::noop(instance));
    };
    let mut options: Vec<Link> = links
        .into_iter()
        .filter(|l| !frame.visited.contains(&l.url) && Some(l.url.as_str()) != subject_page(&frame))
        .collect();
    let mut rng = round_rng(deps.seed, &instance.id, instance.provenance.len(), 0xa11);
    options.shuffle(&mut rng);
    let mut candidates = Vec::new();
    for link in options {
        if candidates.len() == CANDIDATES_PER_ROUND {
            break;
        }
        let Ok(target) = lookup(&deps.knowledge, &link.url).await else { continue };
        let mut next = frame.clone();
        next.chain.push(link.label.clone());
        next.answer_node = Node { name: target.title.clone(), url: target.url.clone() };
        next.visited.push(target.url.clone());
        candidates.push(Candidate {
            answer: target.title.clone(),
            step: ObfuscationStep {
                kind: ObfuscationKind::AnswerChain,
                from_entity: frame.answer_node.name.clone(),
                to_entity: target.title.clone(),
                evidence_url: evidence_url.clone(),
                hop_index: next_hop(instance),
                path: vec![evidence_url.clone(), target.url.clone()],
            },
            facts: format!("{} of {}: {}", link.label, frame.answer_node.name, target.title),
            frame: next,
        });
    }
    let Some((chosen, question)) = select(candidates, deps).await else {
        return Ok(RoundOutcome::noop(instance));
    };
    let mut out = instance.clone();
    out.question = question;
    out.answer = chosen.answer;
    out.provenance.push(chosen.step);
    out.frame = Some(chosen.frame);
    Ok(RoundOutcome { instance: out, noop: false })
}

/// Seeded walk of exactly `hops` links from the subject, avoiding `exclude`.
async fn walk(
    frame: &QuestionFrame,
    hops: usize,
    exclude: &[String],
    deps: &ForgeDeps,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(String, Node)>> {
    let home = lookup(&deps.knowledge, &frame.subject.url).await.ok()?;
    let first: Vec<Link> = if frame.kind.is_empty() {
        unambiguous(&home.links)
    } else {
        unambiguous(&home.entity(&frame.subject.name)?.relations)
    };
    // Explicit DFS stack of (path so far, remaining options at this depth).
    let mut firsts = first;
    firsts.shuffle(rng);
    let mut stack: Vec<(Vec<(String, Node)>, Vec<Link>)> = vec![(Vec::new(), firsts)];
    while let Some((path, mut options)) = stack.pop() {
        let Some(link) = options.pop() else { continue };
        stack.push((path.clone(), options));
        let seen = |url: &str| {
            exclude.iter().any(|u| u == url) || Some(url) == subject_page(frame) || path.iter().any(|(_, n)| n.url == url)
        };
        if seen(&link.url) {
            continue;
        }
        let mut next = path;
        next.push((link.label.clone(), Node { name: link.title.clone(), url: link.url.clone() }));
        if next.len() == hops {
            return Some(next);
        }
        let Ok(page) = lookup(&deps.knowledge, &link.url).await else { continue };
        let mut onward = unambiguous(&page.links);
        onward.shuffle(rng);
        stack.push((next, onward));
    }
    None
}

fn clause(path: &[(String, Node)]) -> String {
    let labels: Vec<&str> = path.iter().map(|(l, _)| l.as_str()).collect();
    let end = &path[path.len() - 1].1.name;
    format!("whose {} is {end}", labels.join("'s "))
}

/// Replaces the direct subject mention with a description reached by a
/// `hops`-link walk (capped at three). The answer never changes.
pub async fn obfuscate_entity(instance: &VqaInstance, hops: usize, deps: &ForgeDeps) -> Result<RoundOutcome, ForgeError> {
    let Some(frame) = instance.frame.clone() else {
        return Err(ForgeError::Precondition(format!("{} has no question frame", instance.id)));
    };
    let hops = hops.min(MAX_WALK_HOPS);
    if hops == 0 {
        return Ok(RoundOutcome::noop(instance));
    }
    let mut exclude = frame.visited.clone();
    exclude.push(frame.answer_node.url.clone());
    let mut candidates: Vec<Candidate> = Vec::new();
    for salt in 0..(CANDIDATES_PER_ROUND as u64 * 2) {
        if candidates.len() == CANDIDATES_PER_ROUND {
            break;
        }
        let mut rng = round_rng(deps.seed, &instance.id, instance.provenance.len(), 0xe17 + salt);
        let Some(path) = walk(&frame, hops, &exclude, deps, &mut rng).await else { break };
        let text = clause(&path);
        if candidates.iter().any(|c| c.frame.clauses.last() == Some(&text)) || frame.clauses.contains(&text) {
            continue;
        }
        let end = path[path.len() - 1].1.clone();
        let mut next = frame.clone();
        next.clauses.push(text.clone());
        next.visited.extend(path.iter().map(|(_, n)| n.url.clone()));
        let mut urls = vec![frame.subject.url.clone()];
        urls.extend(path.iter().map(|(_, n)| n.url.clone()));
        candidates.push(Candidate {
            answer: instance.answer.clone(),
            step: ObfuscationStep {
                kind: ObfuscationKind::EntityWalk,
                from_entity: frame.subject.name.clone(),
                to_entity: end.name.clone(),
                evidence_url: end.url.clone(),
                hop_index: next_hop(instance),
                path: urls,
            },
            facts: text,
            frame: next,
        });
    }
    let Some((chosen, question)) = select(candidates, deps).await else {
        return Ok(RoundOutcome::noop(instance));
    };
    let mut out = instance.clone();
    out.question = question;
    out.provenance.push(chosen.step);
    out.frame = Some(chosen.frame);
    Ok(RoundOutcome { instance: out, noop: false })
}

/// `depth` rounds alternating answer chaining and entity walks from a
/// curated instance, then the candidate filters.
pub async fn synthesize_from(seed: &VqaInstance, depth: u32, deps: &ForgeDeps) -> Result<VqaInstance, ForgeError> {
    if depth == 0 {
        return Err(ForgeError::Precondition("depth must be at least 1".into()));
    }
    let mut current = seed.clone();
    for round in 1..=depth {
        let kind = if round % 2 == 1 { ObfuscationKind::AnswerChain } else { ObfuscationKind::EntityWalk };
        let outcome = match kind {
            ObfuscationKind::AnswerChain => obfuscate_answer(&current, deps).await?,
            ObfuscationKind::EntityWalk => {
                let mut rng = round_rng(deps.seed, &current.id, round as usize, 0x40b5);
                let hops = rng.random_range(1..=MAX_WALK_HOPS);
                obfuscate_entity(&current, hops, deps).await?
            }
        };
        if outcome.noop {
            return Err(ForgeError::SynthesisFailed { round, kind });
        }
        current = outcome.instance;
    }
    current.id = format!("{}-f{depth}", seed.id.trim_end_matches("-c"));
    current.source = InstanceSource::FuzzySynth;
    match filter_candidate(&current, deps.mllm.as_ref(), &deps.backend, &deps.prompts).await {
        Verdict::Keep => Ok(current),
        Verdict::Discard(reason) => Err(ForgeError::Rejected(reason)),
    }
}

pub async fn synthesize_fuzzy(image: &ImageRef, depth: u32, deps: &ForgeDeps) -> Result<VqaInstance, ForgeError> {
    if depth == 0 {
        return Err(ForgeError::Precondition("depth must be at least 1".into()));
    }
    let seed = curate(image, deps).await?;
    synthesize_from(&seed, depth, deps).await
}

/// Text-only question: a `hops`-link relation chain from a named page.
pub async fn text_only_instance(start_url: &str, hops: u32, deps: &ForgeDeps) -> Result<VqaInstance, ForgeError> {
    let page = lookup(&deps.knowledge, start_url).await?;
    let subject = Node { name: page.title.clone(), url: page.url.clone() };
    let mut current = VqaInstance {
        id: format!("text-{}", CallKey::task_hash(start_url) % 1_000_000_007),
        image: None,
        question: String::new(),
        answer: page.title.clone(),
        provenance: Vec::new(),
        source: InstanceSource::TextOnly,
        frame: Some(QuestionFrame {
            kind: String::new(),
            subject: subject.clone(),
            chain: Vec::new(),
            answer_node: subject.clone(),
            clauses: Vec::new(),
            visited: vec![subject.url],
        }),
    };
    for round in 1..=hops.max(1) {
        let outcome = obfuscate_answer(&current, deps).await?;
        if outcome.noop {
            return Err(ForgeError::SynthesisFailed { round, kind: ObfuscationKind::AnswerChain });
        }
        current = outcome.instance;
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// Dataset assembly

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Sft,
    Rl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub split: Split,
    pub instance: VqaInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetMix {
    pub sft_curated: usize,
    pub sft_text_only: usize,
    pub sft_fuzzy: usize,
    pub rl_curated: usize,
    pub rl_fuzzy: usize,
}

impl Default for DatasetMix {
    fn default() -> Self {
        Self { sft_curated: 16_000, sft_text_only: 8_000, sft_fuzzy: 6_000, rl_curated: 10_000, rl_fuzzy: 5_000 }
    }
}

impl DatasetMix {
    /// Target counts scaled by one common factor so the available pools can
    /// fill them, keeping the configured proportions.
    pub fn scaled(&self, curated: usize, text_only: usize, fuzzy: usize) -> DatasetMix {
        // Smallest have/want ratio, compared exactly as fractions.
        let mut f = (1usize, 1usize);
        for (have, want) in [
            (curated, self.sft_curated + self.rl_curated),
            (text_only, self.sft_text_only),
            (fuzzy, self.sft_fuzzy + self.rl_fuzzy),
        ] {
            if want > 0 && (have as u128) * (f.1 as u128) < (f.0 as u128) * (want as u128) {
                f = (have, want);
            }
        }
        let s = |n: usize| ((n as u128 * f.0 as u128) / f.1 as u128) as usize;
        DatasetMix {
            sft_curated: s(self.sft_curated),
            sft_text_only: s(self.sft_text_only),
            sft_fuzzy: s(self.sft_fuzzy),
            rl_curated: s(self.rl_curated),
            rl_fuzzy: s(self.rl_fuzzy),
        }
    }

    /// Splits the pools into SFT and RL records; SFT takes each pool's head.
    pub fn allocate(&self, curated: &[VqaInstance], text_only: &[VqaInstance], fuzzy: &[VqaInstance]) -> Vec<DatasetRecord> {
        let m = self.scaled(curated.len(), text_only.len(), fuzzy.len());
        let tag = |split: Split, items: &[VqaInstance]| {
            items.iter().map(move |i| DatasetRecord { split, instance: i.clone() }).collect::<Vec<_>>()
        };
        let mut out = Vec::new();
        out.extend(tag(Split::Sft, &curated[..m.sft_curated]));
        out.extend(tag(Split::Sft, &text_only[..m.sft_text_only]));
        out.extend(tag(Split::Sft, &fuzzy[..m.sft_fuzzy]));
        out.extend(tag(Split::Rl, &curated[m.sft_curated..m.sft_curated + m.rl_curated]));
        out.extend(tag(Split::Rl, &fuzzy[m.sft_fuzzy..m.sft_fuzzy + m.rl_fuzzy]));
        out
    }
}

/// Instance pools and discard reasons from one forging pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForgeReport {
    pub curated: Vec<VqaInstance>,
    pub text_only: Vec<VqaInstance>,
    pub fuzzy: Vec<VqaInstance>,
    /// `(source id, stage, reason)`.
    pub discarded: Vec<(String, String, String)>,
}

/// Curated and fuzzy instances from `images`, text-only instances from
/// `start_urls`; `concurrency` items in flight, results in input order.
pub async fn forge_pools(
    images: &[ImageRef],
    start_urls: &[String],
    depth: u32,
    text_hops: u32,
    deps: &ForgeDeps,
    concurrency: usize,
) -> ForgeReport {
    use futures::StreamExt;

    let per_image = futures::stream::iter(images)
        .map(|image| async move {
            let mut discards = Vec::new();
            if let Verdict::Discard(r) = filter_image(image, deps.selector.as_ref(), &deps.prompts).await {
                discards.push((image.id.clone(), "image".to_string(), r));
                return (None, None, discards);
            }
            let seed = match curate(image, deps).await {
                Ok(s) => s,
                Err(e) => {
                    discards.push((image.id.clone(), "curate".to_string(), e.to_string()));
                    return (None, None, discards);
                }
            };
            let curated = match filter_candidate(&seed, deps.mllm.as_ref(), &deps.backend, &deps.prompts).await {
                Verdict::Keep => Some(seed.clone()),
                Verdict::Discard(r) => {
                    discards.push((seed.id.clone(), "candidate".to_string(), r));
                    None
                }
            };
            let fuzzy = match synthesize_from(&seed, depth, deps).await {
                Ok(f) => Some(f),
                Err(e) => {
                    discards.push((seed.id.clone(), "fuzzy".to_string(), e.to_string()));
                    None
                }
            };
            (curated, fuzzy, discards)
        })
        .buffered(concurrency.max(1))
        .collect::<Vec<_>>()
        .await;
    let texts = futures::stream::iter(start_urls)
        .map(|url| async move { (url, text_only_instance(url, text_hops, deps).await) })
        .buffered(concurrency.max(1))
        .collect::<Vec<_>>()
        .await;

    let mut report = ForgeReport::default();
    for (c, f, d) in per_image {
        report.curated.extend(c);
        report.fuzzy.extend(f);
        report.discarded.extend(d);
    }
    for (url, r) in texts {
        match r {
            Ok(i) => report.text_only.push(i),
            Err(e) => report.discarded.push((url.clone(), "text_only".to_string(), e.to_string())),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(chain: &[&str], clauses: &[&str]) -> QuestionFrame {
        QuestionFrame {
            kind: "cat".into(),
            subject: Node { name: "Momo".into(), url: "u".into() },
            chain: chain.iter().map(|s| s.to_string()).collect(),
            answer_node: Node { name: "x".into(), url: "v".into() },
            clauses: clauses.iter().map(|s| s.to_string()).collect(),
            visited: vec![],
        }
    }

    #[test]
    fn question_rendering() {
        assert_eq!(frame(&[], &[]).question(), "What is the name of the cat in the image?");
        assert_eq!(
            frame(&["owner", "teacher"], &["whose owner's employer is Harbor Works"]).question(),
            "What is the name of the teacher of the owner of the cat in the image whose owner's employer is Harbor Works?"
        );
    }

    #[test]
    fn page_parsing() {
        let md = "# Alice Chen\n\nAlice Chen is a person page.\n\n## Facts\n- born: 1970\n- mentor: [Bo Li](https://sim.vdr/wiki/bo_li)\n\n## Featured\n\n### Momo\n![orange cat](https://sim.vdr/img/e1.jpg)\n- name: Momo\n- kind: cat\n- owner: [Alice Chen](https://sim.vdr/wiki/alice_chen)\n";
        let p = parse_page("https://sim.vdr/wiki/alice_chen", md);
        assert_eq!(p.title, "Alice Chen");
        assert_eq!(p.links, vec![Link { label: "mentor".into(), title: "Bo Li".into(), url: "https://sim.vdr/wiki/bo_li".into() }]);
        let e = p.entity("Momo").unwrap();
        assert_eq!(e.attributes, vec![("name".into(), "Momo".into()), ("kind".into(), "cat".into())]);
        assert_eq!(e.relations[0].label, "owner");
    }

    #[test]
    fn mix_scaling_keeps_proportions() {
        let m = DatasetMix::default().scaled(260, 80, 110);
        assert_eq!((m.sft_curated, m.sft_text_only, m.sft_fuzzy, m.rl_curated, m.rl_fuzzy), (160, 80, 60, 100, 50));
        assert_eq!(DatasetMix::default().scaled(1_000_000, 1_000_000, 1_000_000), DatasetMix::default());
    }

    #[test]
    fn selection_index() {
        assert_eq!(first_index("Candidate 2 is best", 3), Some(1));
        assert_eq!(first_index("7", 3), None);
        assert_eq!(first_index("none", 3), None);
    }
}
