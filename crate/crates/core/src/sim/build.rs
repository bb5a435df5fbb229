use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{page_url, Entity, Page, Relation, SimWorld, WorldSpec};
use crate::model::{BoundingBox, ImagePayload, ImageRef, SimRegion};

const FIRST: &[&str] = &[
    "Alice", "Bruno", "Dara", "Elif", "Farah", "Goran", "Hana", "Ivo", "Jun", "Kemal", "Lena", "Mira", "Nico",
    "Olga", "Pavel", "Quinn", "Rosa", "Sami", "Tara", "Umar", "Vera", "Wen", "Yara", "Zane",
];
const LAST: &[&str] = &[
    "Chen", "Okafor", "Silva", "Novak", "Haddad", "Kimura", "Larsen", "Moreau", "Petrov", "Quispe", "Rossi",
    "Stein", "Tanaka", "Ueda", "Varga", "Weber", "Yilmaz", "Zhou",
];
const ORG_HEAD: &[&str] = &[
    "Harbor", "Summit", "Cedar", "Aurora", "Granite", "Willow", "Beacon", "Meridian", "Juniper", "Orchid",
];
const ORG_TAIL: &[&str] = &[
    "Institute", "Academy", "Works", "Studio", "Foundation", "Observatory", "Guild", "College",
];
const PLACE_HEAD: &[&str] = &["River", "Stone", "Maple", "Fox", "Iron", "Silver", "Lake", "Oak", "Ash", "Elm"];
const PLACE_TAIL: &[&str] = &["ton", "ford", "haven", "field", "port", "wick", "mere", "bury"];
const SYLLABLES: &[&str] = &[
    "mo", "ri", "ka", "zu", "len", "tor", "vi", "sa", "nel", "dro", "pa", "qui", "bo", "fe", "lu", "ny",
];
const KINDS: &[&str] = &[
    "cat", "dog", "parrot", "horse", "statue", "fountain", "clock tower", "sailboat", "vintage car",
    "painting", "lighthouse", "bridge",
];
const ANIMALS: &[&str] = &["cat", "dog", "parrot", "horse"];
const COLORS: &[&str] = &[
    "orange", "black", "white", "grey", "golden", "crimson", "teal", "ivory", "bronze", "violet",
];
const FEATURES: &[&str] = &[
    "a red collar", "a striped pattern", "a chipped base", "a brass plaque", "a blue ribbon", "a broken wing",
    "a mossy roof", "a tall mast", "chrome trim", "a gilded frame", "a curled tail", "a spotted coat",
];
const LINK_LABELS: &[&str] = &[
    "mentor", "employer", "sibling", "alma mater", "partner", "neighbor", "teacher", "daughter", "founder",
    "headquarters",
];
const LARGE_DIMS: &[(u32, u32)] = &[(1024, 768), (800, 600), (640, 480), (1280, 720), (512, 512)];
const SMALL_DIMS: &[(u32, u32)] = &[(200, 300), (180, 180), (320, 200)];

fn slug(title: &str) -> String {
    title
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i == 0 {
            out.extend(c.to_uppercase());
        } else {
            out.push(c);
        }
    }
    out
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).copied().unwrap_or("x")
}

fn unique(taken: &mut BTreeSet<String>, mut candidate: String) -> String {
    if taken.contains(&candidate) {
        let base = candidate.clone();
        let mut n = 2;
        while taken.contains(&candidate) {
            candidate = format!("{base} {n}");
            n += 1;
        }
    }
    taken.insert(candidate.clone());
    candidate
}

fn page_title(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> (String, &'static str) {
    let roll: f64 = rng.random();
    let (title, category) = if roll < 0.5 {
        (format!("{} {}", pick(rng, FIRST), pick(rng, LAST)), "person")
    } else if roll < 0.8 {
        (format!("{} {}", pick(rng, ORG_HEAD), pick(rng, ORG_TAIL)), "organization")
    } else {
        (format!("{}{}", pick(rng, PLACE_HEAD), pick(rng, PLACE_TAIL)), "place")
    };
    (unique(taken, title), category)
}

fn entity_name(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    let n = rng.random_range(2..=3);
    let raw: String = (0..n).map(|_| pick(rng, SYLLABLES)).collect();
    unique(taken, capitalize(&raw))
}

/// Builds a world from its seed and counts; identical inputs give identical worlds.
pub fn build_world(seed: u64, n_entities: usize, n_pages: usize) -> SimWorld {
    build_world_with(WorldSpec {
        seed,
        n_entities,
        n_pages,
        ..WorldSpec::default()
    })
}

impl WorldSpec {
    pub fn build(&self) -> SimWorld {
        build_world_with(self.clone())
    }
}

pub(crate) fn build_world_with(spec: WorldSpec) -> SimWorld {
    let n_pages = spec.n_pages.max(1);
    let n_entities = spec.n_entities.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut titles = BTreeSet::new();

    let mut pages: Vec<Page> = (0..n_pages)
        .map(|_| {
            let (title, category) = page_title(&mut rng, &mut titles);
            let fact = match category {
                "person" => ("born", rng.random_range(1930..2005).to_string()),
                "organization" => ("founded", rng.random_range(1850..2015).to_string()),
                _ => ("population", rng.random_range(800..90000).to_string()),
            };
            Page {
                url: page_url(&slug(&title)),
                title,
                category: category.into(),
                facts: alloc::vec![(fact.0.into(), fact.1)],
                outlinks: Vec::new(),
                hosted: Vec::new(),
                markdown: String::new(),
            }
        })
        .collect();

    // Ring links keep the graph strongly connected; extras add branching.
    if n_pages >= 2 {
        for i in 0..n_pages {
            let next = (i + 1) % n_pages;
            let label = pick(&mut rng, LINK_LABELS).to_string();
            pages[i].outlinks.push(Relation { label, target: next });
            if n_pages >= 3 && rng.random_bool(0.7) {
                let extra = rng.random_range(0..n_pages);
                if extra != i && extra != next {
                    let label = pick(&mut rng, LINK_LABELS).to_string();
                    pages[i].outlinks.push(Relation { label, target: extra });
                }
            }
        }
    }

    let mut descriptors = BTreeSet::new();
    let entities: Vec<Entity> = (0..n_entities)
        .map(|id| {
            let mut kind = pick(&mut rng, KINDS);
            let mut color = pick(&mut rng, COLORS);
            let mut feature = pick(&mut rng, FEATURES);
            let mut descriptor = format!("{color} {kind} with {feature}");
            let mut tries = 0;
            while descriptors.contains(&descriptor) && tries < 64 {
                kind = pick(&mut rng, KINDS);
                color = pick(&mut rng, COLORS);
                feature = pick(&mut rng, FEATURES);
                descriptor = format!("{color} {kind} with {feature}");
                tries += 1;
            }
            if descriptors.contains(&descriptor) {
                descriptor = format!("{descriptor} (variant {id})");
            }
            descriptors.insert(descriptor.clone());
            let name = entity_name(&mut rng, &mut titles);
            let home_page = rng.random_range(0..n_pages);
            let location = rng.random_range(0..n_pages);
            let tie = if ANIMALS.contains(&kind) { "owner" } else { "creator" };
            Entity {
                id,
                attributes: alloc::vec![
                    ("name".into(), name.clone()),
                    ("kind".into(), kind.into()),
                    ("color".into(), color.into()),
                    ("year".into(), rng.random_range(1890..2024).to_string()),
                ],
                relations: alloc::vec![
                    Relation { label: tie.into(), target: home_page },
                    Relation { label: "location".into(), target: location },
                ],
                name,
                kind: kind.into(),
                descriptor,
                home_page,
            }
        })
        .collect();

    for e in &entities {
        pages[e.home_page].hosted.push(e.id);
    }
    let markdowns: Vec<String> = pages.iter().map(|p| render_page(p, &pages, &entities)).collect();
    for (p, md) in pages.iter_mut().zip(markdowns) {
        p.markdown = md;
    }

    let images = (0..spec.n_images)
        .map(|i| layout_image(&mut rng, i, &entities))
        .collect();

    SimWorld::assemble(spec, entities, pages, images)
}

fn link(pages: &[Page], target: usize) -> String {
    format!("[{}]({})", pages[target].title, pages[target].url)
}

fn render_page(page: &Page, pages: &[Page], entities: &[Entity]) -> String {
    let mut md = format!("# {}\n\n{} is a {} page.\n\n## Facts\n", page.title, page.title, page.category);
    for (k, v) in &page.facts {
        md.push_str(&format!("- {k}: {v}\n"));
    }
    for r in &page.outlinks {
        md.push_str(&format!("- {}: {}\n", r.label, link(pages, r.target)));
    }
    if !page.hosted.is_empty() {
        md.push_str("\n## Featured\n");
        for &id in &page.hosted {
            let e = &entities[id];
            md.push_str(&format!("\n### {}\n![{}](https://sim.vdr/img/e{}.jpg)\n", e.name, e.descriptor, e.id));
            for (k, v) in &e.attributes {
                md.push_str(&format!("- {k}: {v}\n"));
            }
            for r in &e.relations {
                md.push_str(&format!("- {}: {}\n", r.label, link(pages, r.target)));
            }
        }
    }
    md
}

fn layout_image(rng: &mut ChaCha8Rng, index: usize, entities: &[Entity]) -> ImageRef {
    let small = rng.random_bool(0.1);
    let &(width, height) = if small { SMALL_DIMS } else { LARGE_DIMS }.choose(rng).unwrap_or(&(640, 480));
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.shuffle(rng);

    let regions = if rng.random_bool(0.15) {
        let e = &entities[order[0]];
        let frac: f64 = rng.random_range(0.5..0.7);
        let side = libm::sqrt(frac);
        let w = ((f64::from(width) * side) as u32).max(1);
        let h = ((f64::from(height) * side) as u32).max(1);
        let x0 = (width - w) / 2;
        let y0 = (height - h) / 2;
        alloc::vec![SimRegion { descriptor: e.descriptor.clone(), region: BoundingBox::new(x0, y0, x0 + w, y0 + h) }]
    } else {
        let want = rng.random_range(1..=entities.len().min(5));
        let mut kinds = BTreeSet::new();
        let chosen: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&id| kinds.insert(entities[id].kind.clone()))
            .take(want)
            .collect();
        let k = chosen.len() as u32;
        let cols = (1..=k).find(|c| c * c * 3 >= k * 4 || *c == k).unwrap_or(1);
        let rows = k.div_ceil(cols);
        let cw = width / cols;
        let ch = height / rows;
        let mut cells: Vec<u32> = (0..cols * rows).collect();
        cells.shuffle(rng);
        chosen
            .iter()
            .zip(cells)
            .map(|(&id, cell)| {
                let (cx, cy) = ((cell % cols) * cw, (cell / cols) * ch);
                let w = ((f64::from(cw) * rng.random_range(0.45..0.85)) as u32).max(4).min(cw);
                let h = ((f64::from(ch) * rng.random_range(0.45..0.85)) as u32).max(4).min(ch);
                let x0 = cx + rng.random_range(0..=cw - w);
                let y0 = cy + rng.random_range(0..=ch - h);
                SimRegion {
                    descriptor: entities[id].descriptor.clone(),
                    region: BoundingBox::new(x0, y0, x0 + w, y0 + h),
                }
            })
            .collect()
    };
    ImageRef {
        id: format!("img-{index:04}"),
        width,
        height,
        payload: ImagePayload::Sim { regions },
    }
}
