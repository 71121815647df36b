//! Class-bearing prompts with an optional descriptive adjective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "{adj} ultrasound image of {class} tumor in the breast";

/// The closed adjective vocabulary, empty adjective first.
pub const ADJECTIVES: [&str; 10] = [
    "",
    "colorful",
    "stylized",
    "high-contrast",
    "low-contrast",
    "posterized",
    "sheared",
    "solarized",
    "bright",
    "dark",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Benign,
    Malignant,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Benign, ClassLabel::Malignant, ClassLabel::Normal];

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
            ClassLabel::Normal => "normal",
        }
    }

    /// The word that stands for the class inside a prompt.
    pub fn prompt_token(self) -> &'static str {
        match self {
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
            ClassLabel::Normal => "no",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown class label {s:?}")))
    }
}

/// A member of [`ADJECTIVES`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Adjective(&'static str);

impl Adjective {
    pub const NONE: Adjective = Adjective("");

    pub fn parse(s: &str) -> Result<Adjective> {
        let lower = s.trim().to_lowercase();
        ADJECTIVES
            .iter()
            .find(|a| **a == lower)
            .map(|a| Adjective(a))
            .ok_or_else(|| Error::invalid(format!("unknown adjective {s:?}")))
    }

    pub fn all() -> impl Iterator<Item = Adjective> {
        ADJECTIVES.iter().map(|a| Adjective(a))
    }

    pub fn as_str(self) -> &'static str {
        self.0
    }

    pub fn is_none(self) -> bool {
        self.0.is_empty()
    }

    /// File-name form: `none` for the empty adjective.
    pub fn file_stem(self) -> &'static str {
        if self.0.is_empty() {
            "none"
        } else {
            self.0
        }
    }
}

impl fmt::Display for Adjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptSpec {
    pub adjective: Adjective,
    pub label: ClassLabel,
}

impl PromptSpec {
    pub fn new(adjective: &str, label: ClassLabel) -> Result<Self> {
        Ok(Self { adjective: Adjective::parse(adjective)?, label })
    }
}

/// A prompt template with `{adj}` and `{class}` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(text: String) -> Result<Self> {
        Self::new(&text)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.0
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.to_owned())
    }
}

impl PromptTemplate {
    pub fn new(text: &str) -> Result<Self> {
        if !text.contains("{adj}") || !text.contains("{class}") {
            return Err(Error::invalid(format!("template {text:?} needs {{adj}} and {{class}} slots")));
        }
        Ok(Self(text.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Lowercase, single-spaced; an empty adjective drops its slot entirely.
    pub fn render(&self, spec: &PromptSpec) -> String {
        self.0
            .replace("{adj}", spec.adjective.as_str())
            .replace("{class}", spec.label.prompt_token())
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Every word the template can produce, in first-appearance order.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |w: &str| {
            let w = w.to_lowercase();
            if !w.is_empty() && !out.contains(&w) {
                out.push(w);
            }
        };
        for a in ADJECTIVES {
            push(a);
        }
        for c in ClassLabel::ALL {
            push(c.prompt_token());
        }
        for w in self.0.split_whitespace().filter(|w| *w != "{adj}" && *w != "{class}") {
            push(w);
        }
        out
    }
}

/// Render with the default template.
pub fn render(spec: &PromptSpec) -> String {
    PromptTemplate::default().render(spec)
}

/// All adjective/class combinations, adjective-major.
pub fn grid() -> Vec<PromptSpec> {
    Adjective::all()
        .flat_map(|adjective| ClassLabel::ALL.into_iter().map(move |label| PromptSpec { adjective, label }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_examples() {
        let s = PromptSpec::new("high-contrast", ClassLabel::Malignant).unwrap();
        assert_eq!(render(&s), "high-contrast ultrasound image of malignant tumor in the breast");
        let s = PromptSpec::new("", ClassLabel::Normal).unwrap();
        assert_eq!(render(&s), "ultrasound image of no tumor in the breast");
        let s = PromptSpec::new("solarized", ClassLabel::Benign).unwrap();
        assert_eq!(render(&s), "solarized ultrasound image of benign tumor in the breast");
    }

    #[test]
    fn grid_shape_and_order() {
        let g = grid();
        assert_eq!(g.len(), 30);
        assert_eq!(g[0], PromptSpec { adjective: Adjective::NONE, label: ClassLabel::Benign });
        assert_eq!(g[29], PromptSpec::new("dark", ClassLabel::Normal).unwrap());
        let rendered: std::collections::HashSet<String> = g.iter().map(render).collect();
        assert_eq!(rendered.len(), 30);
    }

    #[test]
    fn rejects_unknown() {
        assert!(Adjective::parse("blurry").is_err());
        assert!("tumor".parse::<ClassLabel>().is_err());
        assert!(PromptTemplate::new("phantom image").is_err());
    }

    #[test]
    fn custom_template_keeps_slots() {
        let t = PromptTemplate::new("{adj} phantom image of {class} lesion").unwrap();
        let s = PromptSpec::new("dark", ClassLabel::Benign).unwrap();
        assert_eq!(t.render(&s), "dark phantom image of benign lesion");
        let s = PromptSpec::new("", ClassLabel::Normal).unwrap();
        assert_eq!(t.render(&s), "phantom image of no lesion");
    }

    #[test]
    fn adjective_parse_normalizes_case() {
        assert_eq!(Adjective::parse("High-contrast").unwrap().as_str(), "high-contrast");
    }
}
