//! Output schemas and local validation of model text against them.

use serde_json::{json, Map, Value};

use crate::corpus::{StageCategory, StageLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputSchema {
    /// `reasoning` plus a `stage` restricted to the category's labels.
    Staging(StageCategory),
    /// Staging fields plus a `rules` list.
    StagingWithRules(StageCategory),
    /// Only a `rules` list.
    RulesOnly,
}

impl OutputSchema {
    pub fn name(self) -> &'static str {
        match self {
            OutputSchema::Staging(_) => "staging",
            OutputSchema::StagingWithRules(_) => "staging_with_rules",
            OutputSchema::RulesOnly => "rules_only",
        }
    }

    pub fn category(self) -> Option<StageCategory> {
        match self {
            OutputSchema::Staging(c) | OutputSchema::StagingWithRules(c) => Some(c),
            OutputSchema::RulesOnly => None,
        }
    }

    pub fn wants_stage(self) -> bool {
        !matches!(self, OutputSchema::RulesOnly)
    }

    pub fn wants_rules(self) -> bool {
        !matches!(self, OutputSchema::Staging(_))
    }

    /// JSON Schema forwarded to servers that enforce it during decoding.
    pub fn json_schema(self) -> Value {
        let mut props = Map::new();
        let mut required = Vec::new();
        if let Some(cat) = self.category() {
            let labels: Vec<String> = cat.labels().iter().map(|l| l.to_string()).collect();
            props.insert("reasoning".into(), json!({"type": "string"}));
            props.insert("stage".into(), json!({"type": "string", "enum": labels}));
            required.extend(["reasoning", "stage"]);
        }
        if self.wants_rules() {
            props.insert(
                "rules".into(),
                json!({"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1}),
            );
            required.push("rules");
        }
        json!({
            "type": "object",
            "properties": props,
            "required": required,
        })
    }

    /// One-line description of the expected shape, used in corrective re-prompts.
    pub fn describe(self) -> String {
        let mut fields = Vec::new();
        if let Some(cat) = self.category() {
            let labels: Vec<String> = cat.labels().iter().map(|l| format!("\"{l}\"")).collect();
            fields.push("\"reasoning\": string".to_string());
            fields.push(format!("\"stage\": one of {}", labels.join(", ")));
        }
        if self.wants_rules() {
            fields.push("\"rules\": non-empty list of non-empty strings".to_string());
        }
        format!("a single JSON object with {}", fields.join("; "))
    }
}

/// Model output after validation against an [`OutputSchema`].
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOutput {
    pub reasoning: Option<String>,
    pub stage: Option<StageLabel>,
    pub rules: Option<Vec<String>>,
    pub raw: String,
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

fn parse_object(raw: &str) -> Result<Map<String, Value>, String> {
    let body = strip_fences(raw);
    let value: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(first) => {
            // tolerate prose around a single JSON object
            match (body.find('{'), body.rfind('}')) {
                (Some(s), Some(e)) if s < e => {
                    serde_json::from_str(&body[s..=e]).map_err(|_| format!("output is not valid JSON ({first})"))?
                }
                _ => return Err(format!("output is not valid JSON ({first})")),
            }
        }
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err("output must be a JSON object".to_string()),
    }
}

/// Validates raw model text. On failure returns the violated constraint.
pub fn validate(raw: &str, schema: OutputSchema) -> Result<StructuredOutput, String> {
    let obj = parse_object(raw)?;
    let mut out = StructuredOutput {
        reasoning: None,
        stage: None,
        rules: None,
        raw: raw.to_string(),
    };
    if let Some(cat) = schema.category() {
        match obj.get("reasoning") {
            Some(Value::String(s)) => out.reasoning = Some(s.clone()),
            Some(_) => return Err("field \"reasoning\" must be a string".into()),
            None => return Err("missing field \"reasoning\"".into()),
        }
        let stage = match obj.get("stage") {
            Some(Value::String(s)) => s,
            Some(_) => return Err("field \"stage\" must be a string".into()),
            None => return Err("missing field \"stage\"".into()),
        };
        let label = StageLabel::parse_in(stage, cat).map_err(|_| {
            let allowed: Vec<String> = cat.labels().iter().map(|l| l.to_string()).collect();
            format!("field \"stage\" is {stage:?}, expected one of {}", allowed.join(", "))
        })?;
        out.stage = Some(label);
    }
    if schema.wants_rules() {
        let items = match obj.get("rules") {
            Some(Value::Array(items)) => items,
            Some(_) => return Err("field \"rules\" must be a list of strings".into()),
            None => return Err("missing field \"rules\"".into()),
        };
        if items.is_empty() {
            return Err("field \"rules\" must contain at least one rule".into());
        }
        let mut rules = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            match item {
                Value::String(s) if !s.trim().is_empty() => rules.push(s.trim().to_string()),
                Value::String(_) => return Err(format!("rule {} is empty", i + 1)),
                _ => return Err(format!("rule {} is not a string", i + 1)),
            }
        }
        out.rules = Some(rules);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: OutputSchema = OutputSchema::Staging(StageCategory::T);

    #[test]
    fn accepts_direct_match() {
        let out = validate(r#"{"reasoning":"tumor is 2.5 cm ...","stage":"T2"}"#, T).unwrap();
        assert_eq!(out.stage.unwrap().to_string(), "T2");
        assert_eq!(out.reasoning.as_deref(), Some("tumor is 2.5 cm ..."));
        assert!(out.rules.is_none());
    }

    #[test]
    fn rejects_out_of_enum_stage() {
        let err = validate(r#"{"reasoning":"...","stage":"T5"}"#, T).unwrap_err();
        assert!(err.contains("T5") && err.contains("T1, T2, T3, T4"), "{err}");
        assert!(validate(r#"{"reasoning":"...","stage":"N1"}"#, T).is_err());
    }

    #[test]
    fn extra_fields_dropped() {
        let out = validate(r#"{"reasoning":"r","stage":"T1","rules":["x"]}"#, T).unwrap();
        assert!(out.rules.is_none());
        let out = validate(
            r#"{"reasoning":"r","stage":"N0","rules":["x"]}"#,
            OutputSchema::RulesOnly,
        )
        .unwrap();
        assert!(out.stage.is_none() && out.reasoning.is_none());
        assert_eq!(out.rules.unwrap(), ["x"]);
    }

    #[test]
    fn fenced_and_wrapped_json() {
        let out = validate("```json\n{\"reasoning\":\"r\",\"stage\":\"t3\"}\n```", T).unwrap();
        assert_eq!(out.stage.unwrap().to_string(), "T3");
        let out = validate("Answer: {\"reasoning\":\"r\",\"stage\":\"T4\"} done", T).unwrap();
        assert_eq!(out.stage.unwrap().to_string(), "T4");
    }

    #[test]
    fn rule_constraints() {
        let s = OutputSchema::StagingWithRules(StageCategory::N);
        assert!(validate(r#"{"reasoning":"r","stage":"N1","rules":[]}"#, s).is_err());
        assert!(validate(r#"{"reasoning":"r","stage":"N1","rules":["a",""]}"#, s).is_err());
        assert!(validate(r#"{"reasoning":"r","stage":"N1","rules":["a",3]}"#, s).is_err());
        assert!(validate(r#"{"reasoning":"r","stage":"N1"}"#, s).is_err());
        let ok = validate(r#"{"reasoning":"r","stage":"N1","rules":[" a ","b"]}"#, s).unwrap();
        assert_eq!(ok.rules.unwrap(), ["a", "b"]);
    }

    #[test]
    fn non_object_rejected() {
        assert!(validate("[1,2]", T).is_err());
        assert!(validate("T2", T).is_err());
        assert!(validate("", T).is_err());
    }

    #[test]
    fn json_schema_lists_labels() {
        let s = OutputSchema::Staging(StageCategory::N).json_schema();
        assert_eq!(s["properties"]["stage"]["enum"], json!(["N0", "N1", "N2", "N3"]));
        assert_eq!(s["required"], json!(["reasoning", "stage"]));
        let r = OutputSchema::RulesOnly.json_schema();
        assert_eq!(r["required"], json!(["rules"]));
    }
}
