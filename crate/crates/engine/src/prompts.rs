//! Prompt templates. Defaults are compiled in from `prompts/`; a directory
//! of same-named `.txt` files overrides any of them.

use std::collections::BTreeMap;
use std::path::Path;

use vdr_core::ImageRef;

use crate::gateway::{ChatRequest, ChatTurn, Purpose};

macro_rules! templates {
    ($($field:ident),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct Prompts {
            $(pub $field: String,)*
        }

        impl Default for Prompts {
            fn default() -> Self {
                Self {
                    $($field: include_str!(concat!("../prompts/", stringify!($field), ".txt")).to_string(),)*
                }
            }
        }

        impl Prompts {
            /// Defaults overridden by `{dir}/{name}.txt` where present.
            pub fn load(dir: Option<&Path>) -> std::io::Result<Self> {
                let mut p = Self::default();
                if let Some(dir) = dir {
                    $(
                        let file = dir.join(concat!(stringify!($field), ".txt"));
                        if file.exists() {
                            p.$field = std::fs::read_to_string(file)?;
                        }
                    )*
                }
                Ok(p)
            }
        }
    };
}

templates!(
    policy_system,
    vision_induction,
    judge_hit,
    describe_image,
    text_continuation,
    summarize,
    verify_answer,
    select_image,
    match_entity,
    direct_answer,
    entity_question,
    draft_question,
    select_question,
);

/// Substitutes `{key}` for every key in `vars`; other braces are left alone.
pub fn render(template: &str, vars: &BTreeMap<String, String>) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// A single-user-turn request rendered from `template`, keeping `vars` for simulated models.
pub fn templated(purpose: Purpose, template: &str, vars: &[(&str, String)], images: &[ImageRef]) -> ChatRequest {
    let mut req = ChatRequest::new(purpose);
    for (k, v) in vars {
        req = req.var(k, v.clone());
    }
    let mut turn = ChatTurn::user(render(template, &req.vars));
    turn.images.extend(images.iter().cloned());
    req.turn(turn)
}
