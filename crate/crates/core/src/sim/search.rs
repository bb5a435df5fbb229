use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use super::SimWorld;
use crate::model::{ImageRef, SimRegion};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    NotFound(String),
    NoMatch,
    Irrelevant,
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::NotFound(url) => write!(f, "404 not found: {url}"),
            SimError::NoMatch => f.write_str("no match"),
            SimError::Irrelevant => f.write_str("page does not match the query"),
        }
    }
}

impl core::error::Error for SimError {}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualHit {
    pub url: String,
    pub descriptor: String,
    pub fraction: f64,
}

fn fractions(crop: &ImageRef) -> Vec<(&SimRegion, f64)> {
    let area = (u64::from(crop.width) * u64::from(crop.height)) as f64;
    crop.sim_regions()
        .unwrap_or_default()
        .iter()
        .map(|r| (r, if area > 0.0 { r.region.area() as f64 / area } else { 0.0 }))
        .collect()
}

/// The region covering the largest share of the image, with that share.
pub fn dominant_region(image: &ImageRef) -> Option<(&SimRegion, f64)> {
    fractions(image)
        .into_iter()
        .fold(None, |best: Option<(&SimRegion, f64)>, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
}

/// Hits iff exactly one entity covers at least `hit_fraction` of the crop.
pub fn sim_visual_search(world: &SimWorld, crop: &ImageRef) -> Option<VisualHit> {
    let dominant: Vec<(&SimRegion, f64)> = fractions(crop)
        .into_iter()
        .filter(|(_, f)| *f >= world.spec.hit_fraction)
        .collect();
    match dominant.as_slice() {
        [(region, fraction)] => {
            let entity = world.entity_by_descriptor(&region.descriptor)?;
            Some(VisualHit {
                url: world.pages[entity.home_page].url.clone(),
                descriptor: region.descriptor.clone(),
                fraction: *fraction,
            })
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WebResult {
    pub url: String,
    pub title: String,
    pub snippet: String,
    pub score: u64,
}

fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Keyword-overlap ranking over page text; an exact title match always ranks first.
pub fn sim_web_search(world: &SimWorld, query: &str, limit: usize) -> Vec<WebResult> {
    let terms = words(query);
    if terms.is_empty() {
        return Vec::new();
    }
    let mut scored: Vec<(u64, usize)> = world
        .pages
        .iter()
        .enumerate()
        .filter_map(|(i, page)| {
            let overlap = words(&page.markdown).intersection(&terms).count() as u64;
            let exact = if page.title.eq_ignore_ascii_case(query.trim()) { 1000 } else { 0 };
            let score = overlap + exact;
            (score > 0).then_some((score, i))
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(limit)
        .map(|(score, i)| {
            let page = &world.pages[i];
            let snippet: Vec<&str> = page
                .markdown
                .lines()
                .filter(|l| !l.starts_with('#') && !words(l).is_disjoint(&terms))
                .take(3)
                .collect();
            WebResult {
                url: page.url.clone(),
                title: page.title.clone(),
                snippet: snippet.join(" | "),
                score,
            }
        })
        .collect()
}

pub fn sim_visit<'w>(world: &'w SimWorld, url: &str) -> Result<&'w str, SimError> {
    world
        .page_index(url)
        .map(|i| world.pages[i].markdown.as_str())
        .ok_or_else(|| SimError::NotFound(url.to_string()))
}

/// Replaces `[title](url)` link markup with the bare title.
fn strip_links(line: &str) -> String {
    let mut out = String::new();
    let mut rest = line;
    while let Some(open) = rest.find('[') {
        let Some(close) = rest[open..].find("](").map(|c| open + c) else { break };
        let Some(end) = rest[close..].find(')').map(|e| close + e) else { break };
        out.push_str(&rest[..open]);
        out.push_str(&rest[open + 1..close]);
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    out
}

/// Auxiliary-summarizer stand-in.
///
/// With a crop, the page must show the crop's dominant entity; the summary
/// is that entity's attribute list. Without one, the summary is every page
/// line that shares a word with `query`.
pub fn sim_summarize(markdown: &str, crop: Option<&ImageRef>, query: &str) -> Result<String, SimError> {
    if let Some(crop) = crop {
        let (region, _) = dominant_region(crop).ok_or(SimError::Irrelevant)?;
        let marker = format!("![{}](", region.descriptor);
        let mut lines = markdown.lines().skip_while(|l| !l.starts_with(&marker));
        if lines.next().is_none() {
            return Err(SimError::Irrelevant);
        }
        let facts: Vec<String> = lines
            .take_while(|l| l.starts_with("- "))
            .map(|l| strip_links(&l[2..]))
            .collect();
        if facts.is_empty() {
            return Err(SimError::Irrelevant);
        }
        return Ok(format!("{}: {}", region.descriptor, facts.join("; ")));
    }
    let terms = words(query);
    let title = markdown.lines().next().unwrap_or("").trim_start_matches("# ");
    let hits: Vec<String> = markdown
        .lines()
        .filter(|l| l.starts_with("- ") && !words(l).is_disjoint(&terms))
        .take(8)
        .map(|l| strip_links(&l[2..]))
        .collect();
    if hits.is_empty() && !terms.is_subset(&words(title)) {
        return Err(SimError::Irrelevant);
    }
    let all_facts: Vec<String>;
    let body = if hits.is_empty() {
        all_facts = markdown
            .lines()
            .take_while(|l| !l.starts_with("## Featured"))
            .filter(|l| l.starts_with("- "))
            .map(|l| strip_links(&l[2..]))
            .collect();
        &all_facts
    } else {
        &hits
    };
    Ok(format!("{}: {}", title, body.join("; ")))
}

/// Text description of a simulated image: its entity descriptors in layout order.
pub fn describe_image(image: &ImageRef) -> String {
    let regions = image.sim_regions().unwrap_or_default();
    if regions.is_empty() {
        return format!("An image of {}x{} pixels showing only background.", image.width, image.height);
    }
    let parts: Vec<&str> = regions.iter().map(|r| r.descriptor.as_str()).collect();
    format!("An image of {}x{} pixels showing: {}.", image.width, image.height, parts.join("; "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_links_keeps_titles() {
        assert_eq!(strip_links("owner: [Alice Chen](https://x/y)"), "owner: Alice Chen");
        assert_eq!(strip_links("a [b](c) d [e](f)"), "a b d e");
        assert_eq!(strip_links("no links ["), "no links [");
    }
}
