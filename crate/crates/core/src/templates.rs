//! Prompt templates keyed by stage name.
//!
//! Built-in templates are compiled in from `templates/*.txt`; a directory
//! of `<name>.txt` files can override any of them. Placeholders are written
//! `{{name}}`. Unknown placeholders are left in place.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../templates/", $name, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin![
    "recruit_analysis",
    "recruit_retry",
    "recruit_weights",
    "agent_system",
    "mental_model_task",
    "mental_model_team",
    "orientation_preamble",
    "assessment",
    "leader_coordination",
    "directed_message",
    "sharing_full",
    "sharing_summary",
    "sharing_minimal",
    "closed_loop_ack",
    "closed_loop_verify",
    "closed_loop_clarify",
    "monitor_review",
    "final_answer",
    "open_issues",
    "leader_synthesis",
    "answer_reminder",
];

/// Versioned phrase lists for the team-orientation metric.
pub const ORIENTATION_LEXICON: &str = include_str!("../assets/orientation_lexicon_v1.txt");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self { templates: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.trim_end().to_string())).collect() }
    }

    /// Built-ins overridden by every `<name>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        let io = |source| TemplateError::Io { path: dir.display().to_string(), source };
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let body = std::fs::read_to_string(&path)
                .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })?;
            if !set.templates.contains_key(stem) {
                tracing::warn!(template = stem, "override does not match a known template");
            }
            set.templates.insert(stem.to_string(), body.trim_end().to_string());
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates.get(name).map(String::as_str).unwrap_or_else(|| panic!("no template named {name}"))
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        render(self.get(name), vars)
    }
}

/// Substitutes `{{key}}` for each pair in `vars`.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = after[..end].trim();
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
