//! Deterministic simulated world standing in for search engines and the web.
//!
//! Everything is a pure function of the [`WorldSpec`]. Images are descriptor
//! layouts with real box geometry, pages form a connected link graph, and
//! visual search hits only when one entity dominates the crop.

mod build;
mod latency;
mod search;
mod walk;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::ImageRef;

pub use build::build_world;
pub use latency::{inject_latency, CallKey, LatencyDist, LatencyModel};
pub use search::{
    describe_image, dominant_region, sim_summarize, sim_visit, sim_visual_search, sim_web_search, SimError,
    VisualHit, WebResult,
};
pub use walk::{random_walk, WalkError};

/// Seed plus counts and latency distributions; the `world` section of the engine config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub n_pages: usize,
    pub n_images: usize,
    pub hit_fraction: f64,
    pub latency: LatencyModel,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_entities: 40,
            n_pages: 60,
            n_images: 120,
            hit_fraction: 0.4,
            latency: LatencyModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub label: String,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub name: String,
    pub kind: String,
    pub descriptor: String,
    pub attributes: Vec<(String, String)>,
    pub relations: Vec<Relation>,
    pub home_page: usize,
}

impl Entity {
    pub fn attribute(&self, key: &str) -> Option<&str> {
        self.attributes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub url: String,
    pub title: String,
    pub category: String,
    pub facts: Vec<(String, String)>,
    pub outlinks: Vec<Relation>,
    pub hosted: Vec<usize>,
    pub markdown: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub spec: WorldSpec,
    pub entities: Vec<Entity>,
    pub pages: Vec<Page>,
    pub images: Vec<ImageRef>,
    by_descriptor: BTreeMap<String, usize>,
    by_url: BTreeMap<String, usize>,
}

impl SimWorld {
    pub(crate) fn assemble(spec: WorldSpec, entities: Vec<Entity>, pages: Vec<Page>, images: Vec<ImageRef>) -> Self {
        let by_descriptor = entities.iter().map(|e| (e.descriptor.clone(), e.id)).collect();
        let by_url = pages.iter().enumerate().map(|(i, p)| (p.url.clone(), i)).collect();
        Self { spec, entities, pages, images, by_descriptor, by_url }
    }

    pub fn seed(&self) -> u64 {
        self.spec.seed
    }

    pub fn entity_by_descriptor(&self, descriptor: &str) -> Option<&Entity> {
        self.by_descriptor.get(descriptor).map(|i| &self.entities[*i])
    }

    pub fn entity_by_name(&self, name: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub fn page_index(&self, url: &str) -> Option<usize> {
        self.by_url.get(url).copied()
    }

    pub fn page_by_title(&self, title: &str) -> Option<usize> {
        self.pages.iter().position(|p| p.title.eq_ignore_ascii_case(title))
    }

    pub fn image(&self, id: &str) -> Option<&ImageRef> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Entities visible in an image, in layout order.
    pub fn entities_in(&self, image: &ImageRef) -> Vec<&Entity> {
        image
            .sim_regions()
            .unwrap_or_default()
            .iter()
            .filter_map(|r| self.entity_by_descriptor(&r.descriptor))
            .collect()
    }
}

pub(crate) fn page_url(slug: &str) -> String {
    alloc::format!("https://sim.vdr/wiki/{slug}")
}
