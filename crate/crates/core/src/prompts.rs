//! Prompt templates for the four workflows.
//!
//! Bodies use `{name}` placeholders; `{{` and `}}` produce literal braces. The
//! tokens `@CATEGORY@` and `@LABELS@` are replaced when a template is
//! specialized to a category, so one body serves both T and N.
//!
//! The shipped defaults live in `templates/`. An override directory may hold
//! `<template_id>.txt` (or `<template_id>.<T|N>.txt` for one category only)
//! and a `manifest.json` mapping template ids to their placeholder names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::StageCategory;
use crate::error::{Error, Result};
use crate::llm::{ChatRequest, OutputSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateId {
    LtmElicit,
    LtmUpdate,
    LtmInference,
    RagElicit,
    RagInference,
    ZscotInference,
    RawragInference,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::LtmElicit,
        TemplateId::LtmUpdate,
        TemplateId::LtmInference,
        TemplateId::RagElicit,
        TemplateId::RagInference,
        TemplateId::ZscotInference,
        TemplateId::RawragInference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::LtmElicit => "ltm_elicit",
            TemplateId::LtmUpdate => "ltm_update",
            TemplateId::LtmInference => "ltm_inference",
            TemplateId::RagElicit => "rag_elicit",
            TemplateId::RagInference => "rag_inference",
            TemplateId::ZscotInference => "zscot_inference",
            TemplateId::RawragInference => "rawrag_inference",
        }
    }

    /// Placeholders the pipelines bind for this template.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::LtmElicit | TemplateId::ZscotInference => &["report"],
            TemplateId::LtmUpdate | TemplateId::LtmInference => &["report", "memory"],
            TemplateId::RagElicit => &["context"],
            TemplateId::RagInference => &["report", "rules"],
            TemplateId::RawragInference => &["report", "context"],
        }
    }

    pub fn schema(self, category: StageCategory) -> OutputSchema {
        match self {
            TemplateId::LtmElicit | TemplateId::LtmUpdate => OutputSchema::StagingWithRules(category),
            TemplateId::RagElicit => OutputSchema::RulesOnly,
            _ => OutputSchema::Staging(category),
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateId::LtmElicit => include_str!("../templates/ltm_elicit.txt"),
            TemplateId::LtmUpdate => include_str!("../templates/ltm_update.txt"),
            TemplateId::LtmInference => include_str!("../templates/ltm_inference.txt"),
            TemplateId::RagElicit => include_str!("../templates/rag_elicit.txt"),
            TemplateId::RagInference => include_str!("../templates/rag_inference.txt"),
            TemplateId::ZscotInference => include_str!("../templates/zscot_inference.txt"),
            TemplateId::RawragInference => include_str!("../templates/rawrag_inference.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown template id {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

fn parse_body(body: &str) -> std::result::Result<Vec<Segment>, String> {
    let mut segs = Vec::new();
    let mut text = String::new();
    let mut chars = body.char_indices().peekable();
    while let Some((pos, c)) = chars.next() {
        match c {
            '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some((_, '}')) => break,
                        Some((_, ch)) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                        _ => return Err(format!("unterminated or invalid placeholder at byte {pos}")),
                    }
                }
                if name.is_empty() || name.starts_with(|ch: char| ch.is_ascii_digit()) {
                    return Err(format!("invalid placeholder name at byte {pos}"));
                }
                if !text.is_empty() {
                    segs.push(Segment::Text(std::mem::take(&mut text)));
                }
                segs.push(Segment::Slot(name));
            }
            '}' => return Err(format!("unmatched '}}' at byte {pos}")),
            _ => text.push(c),
        }
    }
    if !text.is_empty() {
        segs.push(Segment::Text(text));
    }
    Ok(segs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: TemplateId,
    body: String,
    required: BTreeSet<String>,
    schema: OutputSchema,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Builds a template, checking that its placeholders are exactly `required`.
    pub fn new(
        id: TemplateId,
        body: impl Into<String>,
        required: BTreeSet<String>,
        schema: OutputSchema,
    ) -> Result<Self> {
        let body = body.into();
        let bad = |reason: String| Error::Template {
            template: id.to_string(),
            reason,
        };
        let segments = parse_body(&body).map_err(bad)?;
        let found: BTreeSet<String> = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.clone()),
                Segment::Text(_) => None,
            })
            .collect();
        if let Some(missing) = required.difference(&found).next() {
            return Err(bad(format!("body lacks required placeholder {{{missing}}}")));
        }
        if let Some(extra) = found.difference(&required).next() {
            return Err(bad(format!("body uses undeclared placeholder {{{extra}}}")));
        }
        let expected = id.schema(schema.category().unwrap_or(StageCategory::T));
        if std::mem::discriminant(&expected) != std::mem::discriminant(&schema) {
            return Err(bad(format!("schema {} does not fit this template", schema.name())));
        }
        Ok(PromptTemplate {
            id,
            body,
            required,
            schema,
            segments,
        })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required(&self) -> &BTreeSet<String> {
        &self.required
    }

    pub fn schema(&self) -> OutputSchema {
        self.schema
    }

    /// Hex SHA-256 of the body, recorded in run manifests.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.body.as_bytes()))
    }

    /// Substitutes bindings into the body. Bindings must cover exactly the
    /// required placeholders, each with a non-empty value.
    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<ChatRequest> {
        for name in &self.required {
            match bindings.get(name.as_str()) {
                None => return Err(Error::MissingPlaceholder(name.clone())),
                Some(v) if v.trim().is_empty() => return Err(Error::EmptyBinding(name.clone())),
                Some(_) => {}
            }
        }
        if let Some(extra) = bindings.keys().find(|k| !self.required.contains(**k)) {
            return Err(Error::ExtraneousPlaceholder(extra.to_string()));
        }
        let mut user = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => user.push_str(t),
                Segment::Slot(n) => user.push_str(bindings[n.as_str()]),
            }
        }
        Ok(ChatRequest::new(self.id.as_str(), user, self.schema))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn specialize(body: &str, category: StageCategory) -> String {
    let labels: Vec<String> = category.labels().iter().map(|l| l.to_string()).collect();
    body.replace("@CATEGORY@", category.as_str())
        .replace("@LABELS@", &labels.join(", "))
}

/// The seven templates bound to one staging category.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    category: StageCategory,
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateRegistry {
    pub fn category(&self) -> StageCategory {
        self.category
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Template id → body hash, for manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates.values().map(|t| (t.id.to_string(), t.hash())).collect()
    }

    /// Replaces templates with files found in `dir`; ids without a file keep their default.
    pub fn with_overrides(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let manifest: BTreeMap<String, Vec<String>> = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            serde_json::from_str(&text)?
        } else {
            BTreeMap::new()
        };
        for key in manifest.keys() {
            key.parse::<TemplateId>()?;
        }
        for id in TemplateId::ALL {
            let specific = dir.join(format!("{id}.{}.txt", self.category));
            let generic = dir.join(format!("{id}.txt"));
            let path = if specific.exists() {
                specific
            } else if generic.exists() {
                generic
            } else {
                continue;
            };
            let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let canonical: BTreeSet<String> = id.placeholders().iter().map(|s| s.to_string()).collect();
            if let Some(listed) = manifest.get(id.as_str()) {
                let listed: BTreeSet<String> = listed.iter().cloned().collect();
                if listed != canonical {
                    return Err(Error::Template {
                        template: id.to_string(),
                        reason: format!("manifest lists placeholders {listed:?}, the pipeline binds {canonical:?}"),
                    });
                }
            }
            let t = PromptTemplate::new(
                id,
                specialize(&body, self.category),
                canonical,
                id.schema(self.category),
            )?;
            self.templates.insert(id, t);
        }
        Ok(self)
    }
}

/// The built-in templates specialized to `category`.
pub fn default_templates(category: StageCategory) -> TemplateRegistry {
    let templates = TemplateId::ALL
        .into_iter()
        .map(|id| {
            let required = id.placeholders().iter().map(|s| s.to_string()).collect();
            let t = PromptTemplate::new(
                id,
                specialize(id.default_body(), category),
                required,
                id.schema(category),
            )
            .expect("built-in template is valid");
            (id, t)
        })
        .collect();
    TemplateRegistry { category, templates }
}
