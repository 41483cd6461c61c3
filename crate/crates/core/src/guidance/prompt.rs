use crate::error::{Error, Result};

pub const DEFAULT_PATTERN: &str = "a photo of a {subject} {predicate} a {object}";

/// Sentence pattern with `{subject}`, `{predicate}` and `{object}` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            pattern: DEFAULT_PATTERN.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        for slot in ["{subject}", "{predicate}", "{object}"] {
            if pattern.matches(slot).count() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "template must contain {slot} exactly once: {pattern:?}"
                )));
            }
        }
        Ok(Self { pattern })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Fills the slots, collapses whitespace, and lowercases.
    pub fn build(&self, subject: &str, predicate: &str, object: &str) -> Result<String> {
        for (slot, v) in [("subject", subject), ("predicate", predicate), ("object", object)] {
            if v.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("empty {slot} in prompt")));
            }
        }
        let filled = self
            .pattern
            .replace("{subject}", subject)
            .replace("{predicate}", predicate)
            .replace("{object}", object);
        Ok(filled.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
    }
}

pub fn build_prompt(template: &PromptTemplate, subject: &str, predicate: &str, object: &str) -> Result<String> {
    template.build(subject, predicate, object)
}
