//! Tool execution: the backend trait, the bounded blocking pool, and the
//! visual pipeline (crop → image search → visit → summarize) per crop.

use std::io::Cursor;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use tokio::sync::Semaphore;
use vdr_core::sim::{self, CallKey, SimError, SimWorld};
use vdr_core::{
    crop_sim, expand_crop, BoundingBox, CropError, CropSpec, ImagePayload, ImageRef, Observation, ToolArgs, ToolCall,
    ToolKind,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ToolFailure {
    #[error("tool call timed out")]
    Timeout,
    #[error("no match")]
    NoMatch,
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchHit {
    pub url: String,
    pub title: String,
    pub snippet: String,
}

/// Primitive tool operations. Implementations may block; they are only
/// called from the blocking pool or from the synchronous baseline.
pub trait ToolBackend: Send + Sync {
    /// URL of the page the image search resolves the crop to.
    fn image_search(&self, crop: &ImageRef) -> Result<String, ToolFailure>;
    fn web_search(&self, query: &str) -> Result<Vec<SearchHit>, ToolFailure>;
    fn visit(&self, url: &str) -> Result<String, ToolFailure>;
    /// Query-focused summary; with a crop, fails unless the page shows the cropped entity.
    fn summarize(&self, url: &str, page: &str, crop: Option<&ImageRef>, query: &str) -> Result<String, ToolFailure>;
    fn code_exec(&self, source: &str) -> Result<String, ToolFailure>;
    /// Injected latency for simulated backends; `None` means measure wall time.
    fn latency_ms(&self, _tool: ToolKind, _key: &CallKey) -> Option<u64> {
        None
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CropImageError {
    #[error(transparent)]
    Geometry(#[from] CropError),
    #[error("image decode: {0}")]
    Decode(String),
}

/// Crops a real or simulated image to `bbox`.
pub fn crop_image(image: &ImageRef, bbox: BoundingBox) -> Result<ImageRef, CropImageError> {
    match &image.payload {
        ImagePayload::Sim { .. } => Ok(crop_sim(image, bbox)?),
        ImagePayload::Encoded { data } => {
            let clipped = bbox.intersect(&image.whole_box()).ok_or(CropError::Degenerate(bbox))?;
            let decoded = image::load_from_memory(data).map_err(|e| CropImageError::Decode(e.to_string()))?;
            let part = decoded.crop_imm(clipped.x0, clipped.y0, clipped.width(), clipped.height());
            let mut out = Vec::new();
            part.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
                .map_err(|e| CropImageError::Decode(e.to_string()))?;
            Ok(ImageRef {
                id: format!("{}@{},{},{},{}", image.id, clipped.x0, clipped.y0, clipped.x1, clipped.y1),
                width: clipped.width(),
                height: clipped.height(),
                payload: ImagePayload::Encoded { data: out },
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualAccess {
    Disabled,
    WholeImage,
    MultiScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToolPermissions {
    pub visual: VisualAccess,
    pub text: bool,
}

impl ToolPermissions {
    pub const ALL: ToolPermissions = ToolPermissions { visual: VisualAccess::MultiScale, text: true };
    pub const TEXT_ONLY: ToolPermissions = ToolPermissions { visual: VisualAccess::Disabled, text: true };

    /// Why `call` may not run, if it may not.
    pub fn refusal(&self, call: &ToolCall, image: Option<&ImageRef>) -> Option<String> {
        match &call.args {
            ToolArgs::VisualSearch { crops, .. } => match self.visual {
                VisualAccess::Disabled => Some("visual_search is not available".into()),
                VisualAccess::WholeImage => {
                    let whole = image.map(ImageRef::whole_box);
                    let all_whole = crops.iter().all(|c| Some(c.bbox) == whole && c.scale == 1.0);
                    (!all_whole).then(|| "only whole-image visual_search is available".into())
                }
                VisualAccess::MultiScale => None,
            },
            _ if !self.text => Some(format!("{} is not available", call.tool())),
            _ => None,
        }
    }
}

/// Everything a tool execution needs to know about the surrounding turn.
#[derive(Debug, Clone)]
pub struct CallContext {
    pub task_id: String,
    pub seed: u64,
    pub turn: u32,
    pub question: String,
    pub image: Option<ImageRef>,
    pub permissions: ToolPermissions,
}

/// One observation-producing piece of work.
#[derive(Debug, Clone)]
enum Unit {
    Crop { for_call: String, image_id: Option<String>, crop: CropSpec },
    Call(ToolCall),
    Refused { for_call: String, reason: String },
}

fn units(calls: &[ToolCall], ctx: &CallContext) -> Vec<Unit> {
    let mut out = Vec::new();
    for call in calls {
        if let Some(reason) = ctx.permissions.refusal(call, ctx.image.as_ref()) {
            for k in 0..call.args.fan_out() {
                let for_call = match call.args {
                    ToolArgs::VisualSearch { .. } => format!("{}#{k}", call.call_id),
                    _ => call.call_id.clone(),
                };
                out.push(Unit::Refused { for_call, reason: reason.clone() });
            }
            continue;
        }
        match &call.args {
            ToolArgs::VisualSearch { image_id, crops } => {
                for (k, crop) in crops.iter().enumerate() {
                    out.push(Unit::Crop {
                        for_call: format!("{}#{k}", call.call_id),
                        image_id: image_id.clone(),
                        crop: *crop,
                    });
                }
            }
            _ => out.push(Unit::Call(call.clone())),
        }
    }
    out
}

fn unit_id(unit: &Unit) -> &str {
    match unit {
        Unit::Crop { for_call, .. } | Unit::Refused { for_call, .. } => for_call,
        Unit::Call(c) => &c.call_id,
    }
}

fn failure(for_call: &str, f: ToolFailure) -> Observation {
    match f {
        ToolFailure::Timeout => Observation::timeout(for_call),
        other => Observation::tool_error(for_call, other.to_string()),
    }
}

fn nonempty(for_call: &str, content: String, sources: Vec<String>) -> Observation {
    if content.trim().is_empty() {
        Observation::tool_error(for_call, "empty result")
    } else {
        Observation::ok(for_call, content, sources)
    }
}

/// Crop → image search → visit → summarize for one crop.
pub fn visual_pipeline(
    backend: &dyn ToolBackend,
    image: &ImageRef,
    crop: &CropSpec,
    question: &str,
) -> Result<(String, String), ToolFailure> {
    let bbox = expand_crop(crop.bbox, crop.scale, (image.width, image.height))
        .map_err(|e| ToolFailure::Failed(e.to_string()))?;
    let cropped = crop_image(image, bbox).map_err(|e| ToolFailure::Failed(e.to_string()))?;
    let url = backend.image_search(&cropped)?;
    let page = backend.visit(&url)?;
    let summary = backend.summarize(&url, &page, Some(&cropped), question)?;
    Ok((summary, url))
}

fn run_unit(backend: &dyn ToolBackend, unit: Unit, ctx: &CallContext, key: CallKey) -> Observation {
    let started = Instant::now();
    let kind = match &unit {
        Unit::Crop { .. } => ToolKind::VisualSearch,
        Unit::Call(c) => c.tool(),
        Unit::Refused { for_call, reason } => return Observation::tool_error(for_call.as_str(), reason.as_str()),
    };
    let injected = backend.latency_ms(kind, &key);
    if let Some(ms) = injected.filter(|ms| *ms > 0) {
        std::thread::sleep(Duration::from_millis(ms));
    }
    let id = unit_id(&unit).to_string();
    let obs = match unit {
        Unit::Crop { image_id, crop, .. } => match &ctx.image {
            Some(image) if image_id.as_deref().is_none_or(|i| i == image.id) => {
                match visual_pipeline(backend, image, &crop, &ctx.question) {
                    Ok((summary, url)) => nonempty(&id, summary, vec![url]),
                    Err(f) => failure(&id, f),
                }
            }
            Some(_) => Observation::tool_error(&id, "unknown image_id"),
            None => Observation::tool_error(&id, "no image in context"),
        },
        Unit::Call(call) => match call.args {
            ToolArgs::WebSearch { query } => match backend.web_search(&query) {
                Ok(hits) if hits.is_empty() => Observation::tool_error(&id, "no results"),
                Ok(hits) => {
                    let text = hits
                        .iter()
                        .enumerate()
                        .map(|(i, h)| format!("{}. {} ({})\n   {}", i + 1, h.title, h.url, h.snippet))
                        .collect::<Vec<_>>()
                        .join("\n");
                    nonempty(&id, text, hits.into_iter().map(|h| h.url).collect())
                }
                Err(f) => failure(&id, f),
            },
            ToolArgs::VisitPage { url } => match backend.visit(&url) {
                Ok(page) => nonempty(&id, page, vec![url]),
                Err(f) => failure(&id, f),
            },
            ToolArgs::SummarizePage { url, query } => {
                match backend.visit(&url).and_then(|page| backend.summarize(&url, &page, None, &query)) {
                    Ok(summary) => nonempty(&id, summary, vec![url]),
                    Err(f) => failure(&id, f),
                }
            }
            ToolArgs::CodeExec { source } => match backend.code_exec(&source) {
                Ok(out) => nonempty(&id, out, Vec::new()),
                Err(f) => failure(&id, f),
            },
            ToolArgs::VisualSearch { .. } => unreachable!("visual calls are split into crops"),
        },
        Unit::Refused { .. } => unreachable!(),
    };
    obs.with_latency(injected.unwrap_or_else(|| started.elapsed().as_millis() as u64))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("tool call timed out")]
    Timeout,
    #[error("tool panicked: {0}")]
    Panicked(String),
    #[error("pool closed")]
    Closed,
}

/// Bounded pool of blocking tool executions shared by all trajectories.
#[derive(Clone)]
pub struct ToolPool {
    permits: Arc<Semaphore>,
    size: usize,
    timeout: Duration,
}

impl ToolPool {
    pub fn new(size: usize, timeout: Duration) -> Self {
        let size = size.max(1);
        Self { permits: Arc::new(Semaphore::new(size)), size, timeout }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Runs `f` on the blocking executor once a slot is free. The slot stays
    /// taken until `f` returns, even if the caller has given up waiting.
    pub async fn run<T, F>(&self, f: F) -> Result<T, PoolError>
    where
        F: FnOnce() -> T + Send + 'static,
        T: Send + 'static,
    {
        let permit = self.permits.clone().acquire_owned().await.map_err(|_| PoolError::Closed)?;
        let handle = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            f()
        });
        match tokio::time::timeout(self.timeout, handle).await {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(e)) => Err(PoolError::Panicked(e.to_string())),
            Err(_) => Err(PoolError::Timeout),
        }
    }
}

/// How an action's tool calls are executed.
#[derive(Clone)]
pub enum Dispatch {
    /// Concurrently through a shared pool.
    Pool(ToolPool),
    /// One after another on the calling thread (synchronous baseline).
    Inline,
}

/// Executes every call of one action; observations come back in call and crop order.
pub async fn dispatch_calls(
    dispatch: &Dispatch,
    backend: &Arc<dyn ToolBackend>,
    calls: &[ToolCall],
    ctx: &CallContext,
) -> Vec<Observation> {
    let work = units(calls, ctx);
    let key = |i: usize| CallKey::new(ctx.seed, &ctx.task_id, ctx.turn, i as u32);
    match dispatch {
        Dispatch::Inline => work
            .into_iter()
            .enumerate()
            .map(|(i, u)| run_unit(backend.as_ref(), u, ctx, key(i)))
            .collect(),
        Dispatch::Pool(pool) => {
            let ctx = Arc::new(ctx.clone());
            let futures = work.into_iter().enumerate().map(|(i, unit)| {
                let backend = backend.clone();
                let ctx = ctx.clone();
                let id = unit_id(&unit).to_string();
                let k = key(i);
                async move {
                    match pool.run(move || run_unit(backend.as_ref(), unit, &ctx, k)).await {
                        Ok(obs) => obs,
                        Err(PoolError::Timeout) => Observation::timeout(id),
                        Err(e) => Observation::tool_error(id, e.to_string()),
                    }
                }
            });
            join_all(futures).await
        }
    }
}

/// Tool backend over a [`SimWorld`], with latency injected per call key.
pub struct SimToolBackend {
    world: Arc<SimWorld>,
}

impl SimToolBackend {
    pub fn new(world: Arc<SimWorld>) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }
}

fn sim_failure(e: SimError) -> ToolFailure {
    match e {
        SimError::NoMatch => ToolFailure::NoMatch,
        other => ToolFailure::Failed(other.to_string()),
    }
}

impl ToolBackend for SimToolBackend {
    fn image_search(&self, crop: &ImageRef) -> Result<String, ToolFailure> {
        sim::sim_visual_search(&self.world, crop).map(|h| h.url).ok_or(ToolFailure::NoMatch)
    }

    fn web_search(&self, query: &str) -> Result<Vec<SearchHit>, ToolFailure> {
        Ok(sim::sim_web_search(&self.world, query, 5)
            .into_iter()
            .map(|r| SearchHit { url: r.url, title: r.title, snippet: r.snippet })
            .collect())
    }

    fn visit(&self, url: &str) -> Result<String, ToolFailure> {
        sim::sim_visit(&self.world, url).map(str::to_string).map_err(sim_failure)
    }

    fn summarize(&self, _url: &str, page: &str, crop: Option<&ImageRef>, query: &str) -> Result<String, ToolFailure> {
        sim::sim_summarize(page, crop, query).map_err(sim_failure)
    }

    fn code_exec(&self, source: &str) -> Result<String, ToolFailure> {
        crate::calc::evaluate_snippet(source).map_err(ToolFailure::Failed)
    }

    fn latency_ms(&self, tool: ToolKind, key: &CallKey) -> Option<u64> {
        Some(sim::inject_latency(&self.world.spec.latency, tool, key))
    }
}
