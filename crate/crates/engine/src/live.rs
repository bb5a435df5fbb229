//! Tool backend for live operation: a JSON search service, plain HTTP page
//! fetches, a model-backed summarizer and a Python subprocess.
//!
//! The search service contract is `POST {base}/web_search {"query"}` and
//! `POST {base}/image_search {"image": <data url>}`, both answering
//! `{"results": [{"url", "title", "snippet"}]}`.

use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::{Arc, LazyLock};
use std::time::{Duration, Instant};

use base64::Engine as _;
use regex::Regex;
use serde::Deserialize;
use serde_json::json;
use tokio::runtime::Handle;
use vdr_core::{ImagePayload, ImageRef};

use crate::gateway::{ChatModel, Purpose};
use crate::prompts::{templated, Prompts};
use crate::tools::{SearchHit, ToolBackend, ToolFailure};

const PAGE_CHAR_LIMIT: usize = 24_000;
const OUTPUT_CHAR_LIMIT: usize = 4_000;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, Deserialize)]
pub struct SearchApi {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
}

#[derive(Deserialize)]
struct SearchResponse {
    #[serde(default)]
    results: Vec<SearchResult>,
}

#[derive(Deserialize)]
struct SearchResult {
    url: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    snippet: String,
}

pub struct LiveToolBackend {
    http: reqwest::Client,
    runtime: Handle,
    search: SearchApi,
    summarizer: Arc<dyn ChatModel>,
    prompts: Arc<Prompts>,
    code_timeout: Duration,
}

impl LiveToolBackend {
    /// Must be called inside a tokio runtime; tool calls block on it.
    pub fn new(search: SearchApi, summarizer: Arc<dyn ChatModel>, prompts: Arc<Prompts>, code_timeout: Duration) -> Self {
        Self {
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client"),
            runtime: Handle::current(),
            search,
            summarizer,
            prompts,
            code_timeout,
        }
    }

    fn search_call(&self, path: &str, body: serde_json::Value) -> Result<Vec<SearchHit>, ToolFailure> {
        let url = format!("{}/{path}", self.search.base_url.trim_end_matches('/'));
        let mut req = self.http.post(url).json(&body);
        if let Some(key) = &self.search.api_key {
            req = req.bearer_auth(key);
        }
        let resp: SearchResponse = self.runtime.block_on(async {
            let r = req.send().await.map_err(http_failure)?;
            let r = r.error_for_status().map_err(http_failure)?;
            r.json().await.map_err(http_failure)
        })?;
        Ok(resp
            .results
            .into_iter()
            .map(|r| SearchHit { url: r.url, title: r.title, snippet: r.snippet })
            .collect())
    }
}

fn http_failure(e: reqwest::Error) -> ToolFailure {
    if e.is_timeout() {
        ToolFailure::Timeout
    } else {
        ToolFailure::Failed(e.to_string())
    }
}

fn truncate(s: &str, limit: usize) -> String {
    match s.char_indices().nth(limit) {
        Some((i, _)) => format!("{}\n[truncated]", &s[..i]),
        None => s.to_string(),
    }
}

static SCRIPT_STYLE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)<(script|style)[^>]*>.*?</(script|style)>").unwrap());
static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<[^>]*>").unwrap());
static BLANK_LINES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n\s*\n+").unwrap());

/// Rough HTML-to-text conversion for page visits.
pub fn html_to_text(html: &str) -> String {
    let no_code = SCRIPT_STYLE.replace_all(html, "");
    let text = TAG.replace_all(&no_code, "\n");
    let text = text.replace("&nbsp;", " ").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    BLANK_LINES.replace_all(text.trim(), "\n\n").into_owned()
}

impl ToolBackend for LiveToolBackend {
    fn image_search(&self, crop: &ImageRef) -> Result<String, ToolFailure> {
        let ImagePayload::Encoded { data } = &crop.payload else {
            return Err(ToolFailure::Failed("live image search needs pixel data".into()));
        };
        let url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(data));
        self.search_call("image_search", json!({ "image": url }))?
            .into_iter()
            .next()
            .map(|h| h.url)
            .ok_or(ToolFailure::NoMatch)
    }

    fn web_search(&self, query: &str) -> Result<Vec<SearchHit>, ToolFailure> {
        self.search_call("web_search", json!({ "query": query }))
    }

    fn visit(&self, url: &str) -> Result<String, ToolFailure> {
        let body = self.runtime.block_on(async {
            let r = self.http.get(url).send().await.map_err(http_failure)?;
            let r = r.error_for_status().map_err(http_failure)?;
            r.text().await.map_err(http_failure)
        })?;
        Ok(truncate(&html_to_text(&body), PAGE_CHAR_LIMIT))
    }

    fn summarize(&self, url: &str, page: &str, crop: Option<&ImageRef>, query: &str) -> Result<String, ToolFailure> {
        let images: Vec<ImageRef> = crop.into_iter().cloned().collect();
        let req = templated(
            Purpose::Summarize,
            &self.prompts.summarize,
            &[("url", url.to_string()), ("query", query.to_string()), ("page", page.to_string())],
            &images,
        );
        let reply = self
            .runtime
            .block_on(self.summarizer.chat(&req))
            .map_err(|e| ToolFailure::Failed(format!("summarizer: {e}")))?;
        if reply.text.trim().eq_ignore_ascii_case("irrelevant") {
            return Err(ToolFailure::Failed("page does not match the query".into()));
        }
        Ok(reply.text)
    }

    fn code_exec(&self, source: &str) -> Result<String, ToolFailure> {
        run_python(source, self.code_timeout)
    }
}

/// Runs `source` in an isolated-mode Python subprocess with an empty
/// environment, killing it after `limit`.
pub fn run_python(source: &str, limit: Duration) -> Result<String, ToolFailure> {
    let dir = std::env::temp_dir();
    let mut child = Command::new("python3")
        .args(["-I", "-c", source])
        .env_clear()
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ToolFailure::Failed(format!("spawn python3: {e}")))?;
    let drain = |pipe: Option<Box<dyn Read + Send>>| {
        std::thread::spawn(move || {
            let mut buf = String::new();
            if let Some(mut p) = pipe {
                let _ = p.read_to_string(&mut buf);
            }
            buf
        })
    };
    let out_reader = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let err_reader = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let started = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if started.elapsed() >= limit => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ToolFailure::Timeout);
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(ToolFailure::Failed(e.to_string())),
        }
    };
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    if status.success() {
        Ok(truncate(stdout.trim_end(), OUTPUT_CHAR_LIMIT))
    } else {
        let last = stderr.lines().last().unwrap_or("process failed");
        Err(ToolFailure::Failed(truncate(last, OUTPUT_CHAR_LIMIT)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_markup() {
        let t = html_to_text("<html><style>x{}</style><h1>Title</h1><p>a &amp; b</p><script>var x;</script></html>");
        assert!(t.contains("Title") && t.contains("a & b"));
        assert!(!t.contains("var x") && !t.contains('<'));
    }

    #[test]
    fn python_runs_and_times_out() {
        if Command::new("python3").arg("--version").output().is_err() {
            return;
        }
        assert_eq!(run_python("print(6*7)", Duration::from_secs(10)).unwrap(), "42");
        assert_eq!(run_python("import time; time.sleep(5)", Duration::from_millis(200)), Err(ToolFailure::Timeout));
        assert!(run_python("1/0", Duration::from_secs(10)).unwrap_err().to_string().contains("ZeroDivisionError"));
    }
}
