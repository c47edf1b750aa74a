//! Evaluation prompt suites and reference demographic distributions.
//!
//! Representation prompts describe a person by a domain term only and measure
//! who the model chooses to draw. Alignment prompts add an explicit gender or
//! skintone annotation and measure whether the model follows it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labeling::Gender;
use crate::scale::SkinToneGroup;

/// Bundled term lists (141 terms, 15 of them also used for alignment).
pub const DEFAULT_TERMS: &str = include_str!("../data/default_terms.txt");

pub const DEFAULT_SUFFIX: &str = "portrait, natural light";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("domain {0} has no terms")]
    EmptyDomain(TargetDomain),
    #[error("unknown domain section [{0}] on line {1}")]
    UnknownDomain(String, usize),
    #[error("term on line {0} appears before any [domain] header")]
    NoSection(usize),
    #[error("reference distribution for {axis} sums to {sum}, expected 1")]
    NonNormalized { axis: DemographicAxis, sum: f64 },
    #[error("reference distribution for {axis} has {found} entries, expected {expected}")]
    WrongLength { axis: DemographicAxis, expected: usize, found: usize },
    #[error("reference distribution for {axis} has a negative entry")]
    Negative { axis: DemographicAxis },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed suite line {line}: {reason}")]
    BadSuite { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TargetDomain {
    Occupations,
    Wealth,
    Education,
    CrimeAndIncarceration,
    Beauty,
    Adjectives,
}

impl TargetDomain {
    pub const ALL: [TargetDomain; 6] = [
        TargetDomain::Occupations,
        TargetDomain::Wealth,
        TargetDomain::Education,
        TargetDomain::CrimeAndIncarceration,
        TargetDomain::Beauty,
        TargetDomain::Adjectives,
    ];

    /// Section name in term-list files.
    pub fn section(self) -> &'static str {
        match self {
            Self::Occupations => "occupations",
            Self::Wealth => "wealth",
            Self::Education => "education",
            Self::CrimeAndIncarceration => "crime",
            Self::Beauty => "beauty",
            Self::Adjectives => "adjectives",
        }
    }

    pub fn from_section(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.section() == s.trim().to_ascii_lowercase())
    }
}

impl fmt::Display for TargetDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.section())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Representation,
    Alignment,
}

impl PromptKind {
    fn tag(self) -> &'static str {
        match self {
            Self::Representation => "representation",
            Self::Alignment => "alignment",
        }
    }
}

/// Skin annotations and the report group each one expects.
pub const SKIN_ANNOTATIONS: [(&str, SkinToneGroup); 5] = [
    ("white", SkinToneGroup::Light),
    ("Asian", SkinToneGroup::Yellow),
    ("tan-skinned", SkinToneGroup::Tan),
    ("brown-skinned", SkinToneGroup::Brown),
    ("black", SkinToneGroup::Dark),
];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

/// Skin annotation named in a prompt. "South Asian" is a topology group, not
/// an annotation, and is ignored.
pub fn parse_skin_annotation(text: &str) -> Option<SkinToneGroup> {
    let w = words(text);
    SKIN_ANNOTATIONS.iter().find_map(|(word, group)| {
        let word = word.to_ascii_lowercase();
        w.iter()
            .enumerate()
            .any(|(i, x)| *x == word && !(word == "asian" && i > 0 && w[i - 1] == "south"))
            .then_some(*group)
    })
}

/// Gender annotation named in a prompt.
pub fn parse_gender_annotation(text: &str) -> Option<Gender> {
    let w = words(text);
    if w.iter().any(|x| matches!(x.as_str(), "female" | "woman" | "women")) {
        Some(Gender::Female)
    } else if w.iter().any(|x| matches!(x.as_str(), "male" | "man" | "men")) {
        Some(Gender::Male)
    } else {
        None
    }
}

/// English indefinite article for the phrase that follows it.
pub fn article(next: &str) -> &'static str {
    let lower = next.to_ascii_lowercase();
    let an_exceptions = ["hour", "heir", "honest", "honor"];
    let a_exceptions = ["uni", "use", "usu", "eu", "one"];
    if an_exceptions.iter().any(|p| lower.starts_with(p)) {
        return "an";
    }
    if a_exceptions.iter().any(|p| lower.starts_with(p)) {
        return "a";
    }
    match lower.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn with_article(phrase: &str) -> String {
    let lower = phrase.to_ascii_lowercase();
    if lower.starts_with("a ") || lower.starts_with("an ") || lower.starts_with("the ") {
        phrase.to_string()
    } else {
        format!("{} {phrase}", article(phrase))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub text: String,
    /// Also expand into alignment prompts.
    pub align: bool,
}

/// Per-domain term lists.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TermLists {
    pub domains: BTreeMap<TargetDomain, Vec<Term>>,
}

impl TermLists {
    /// Parses `[domain]` sections with one term per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut domains: BTreeMap<TargetDomain, Vec<Term>> = BTreeMap::new();
        let mut current = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let d = TargetDomain::from_section(name)
                    .ok_or_else(|| PromptError::UnknownDomain(name.to_string(), i + 1))?;
                domains.entry(d).or_default();
                current = Some(d);
                continue;
            }
            let d = current.ok_or(PromptError::NoSection(i + 1))?;
            let (align, text) = match line.strip_prefix('+') {
                Some(rest) => (true, rest.trim()),
                None => (false, line),
            };
            domains.entry(d).or_default().push(Term { text: text.to_string(), align });
        }
        Ok(Self { domains })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn default_terms() -> Self {
        Self::parse(DEFAULT_TERMS).expect("bundled term list parses")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Background text appended after a comma.
    pub suffix: String,
    pub gender_annotations: Vec<Gender>,
    pub skin_annotations: Vec<SkinToneGroup>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            suffix: DEFAULT_SUFFIX.into(),
            gender_annotations: Gender::RESOLVED.to_vec(),
            skin_annotations: SkinToneGroup::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub text: String,
    pub domain: TargetDomain,
    pub kind: PromptKind,
    pub gender: Option<Gender>,
    pub skintone: Option<SkinToneGroup>,
    pub background: String,
}

/// Stable id from kind and text.
pub fn prompt_id(kind: PromptKind, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.tag().as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    format!("p-{}", hex::encode(&h.finalize()[..6]))
}

fn skin_word(group: SkinToneGroup) -> &'static str {
    SKIN_ANNOTATIONS.iter().find(|(_, g)| *g == group).expect("every group has a word").0
}

fn make(kind: PromptKind, phrase: &str, suffix: &str) -> (String, String) {
    let body = with_article(phrase);
    let text = if suffix.is_empty() { body } else { format!("{body}, {suffix}") };
    (prompt_id(kind, &text), text)
}

/// Builds representation prompts for every term and alignment prompts for
/// every marked term crossed with every configured annotation, ordered by id.
pub fn build_suite(terms: &TermLists, config: &SuiteConfig) -> Result<Vec<PromptSpec>, PromptError> {
    for d in TargetDomain::ALL {
        if terms.domains.get(&d).is_none_or(|t| t.is_empty()) {
            return Err(PromptError::EmptyDomain(d));
        }
    }
    let mut out = Vec::new();
    for (&domain, list) in &terms.domains {
        for term in list {
            let (id, text) = make(PromptKind::Representation, &term.text, &config.suffix);
            out.push(PromptSpec {
                id,
                text,
                domain,
                kind: PromptKind::Representation,
                gender: None,
                skintone: None,
                background: config.suffix.clone(),
            });
            if !term.align {
                continue;
            }
            let bare = term
                .text
                .strip_prefix("a ")
                .or_else(|| term.text.strip_prefix("an "))
                .unwrap_or(&term.text);
            for &g in &config.gender_annotations {
                let Some(word) = g.word() else { continue };
                let (id, text) = make(PromptKind::Alignment, &format!("{word} {bare}"), &config.suffix);
                out.push(PromptSpec {
                    id,
                    text,
                    domain,
                    kind: PromptKind::Alignment,
                    gender: Some(g),
                    skintone: None,
                    background: config.suffix.clone(),
                });
            }
            for &s in &config.skin_annotations {
                let phrase = format!("{} {bare}", skin_word(s));
                let (id, text) = make(PromptKind::Alignment, &phrase, &config.suffix);
                out.push(PromptSpec {
                    id,
                    text,
                    domain,
                    kind: PromptKind::Alignment,
                    gender: None,
                    skintone: Some(s),
                    background: config.suffix.clone(),
                });
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out.dedup_by(|a, b| a.id == b.id);
    Ok(out)
}

pub fn suite_to_jsonl(suite: &[PromptSpec]) -> String {
    suite.iter().map(|p| serde_json::to_string(p).expect("prompt serializes") + "\n").collect()
}

pub fn read_suite(path: &Path) -> Result<Vec<PromptSpec>, PromptError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PromptError::BadSuite { line: i + 1, reason: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemographicAxis {
    Gender,
    Skintone,
}

impl DemographicAxis {
    pub fn group_names(self) -> Vec<&'static str> {
        match self {
            Self::Gender => Gender::RESOLVED.iter().map(|g| g.name()).collect(),
            Self::Skintone => SkinToneGroup::ALL.iter().map(|g| g.name()).collect(),
        }
    }
}

impl fmt::Display for DemographicAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gender => "gender",
            Self::Skintone => "skintone",
        })
    }
}

/// Optional authoritative reference proportions, in report group order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub gender: Option<Vec<f64>>,
    pub skintone: Option<Vec<f64>>,
}

/// Expected group proportions: uniform unless configured.
pub fn reference_distribution(axis: DemographicAxis, config: &ReferenceConfig) -> Result<Vec<f64>, PromptError> {
    let n = axis.group_names().len();
    let custom = match axis {
        DemographicAxis::Gender => &config.gender,
        DemographicAxis::Skintone => &config.skintone,
    };
    let Some(p) = custom else {
        return Ok(vec![1.0 / n as f64; n]);
    };
    if p.len() != n {
        return Err(PromptError::WrongLength { axis, expected: n, found: p.len() });
    }
    if p.iter().any(|&v| v < 0.0) {
        return Err(PromptError::Negative { axis });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(PromptError::NonNormalized { axis, sum });
    }
    Ok(p.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_has_246_prompts() {
        let suite = build_suite(&TermLists::default_terms(), &SuiteConfig::default()).unwrap();
        assert_eq!(suite.len(), 246);
        let align = suite.iter().filter(|p| p.kind == PromptKind::Alignment).count();
        assert_eq!(align, 105);
        for d in TargetDomain::ALL {
            assert!(suite.iter().any(|p| p.domain == d));
        }
        assert!(suite.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn annotated_prompt_examples() {
        let terms = TermLists::parse(
            "[occupations]\na doctor\n+lawyer\n[wealth]\nx\n[education]\nx\n[crime]\nx\n[beauty]\nx\n[adjectives]\nx\n",
        )
        .unwrap();
        let suite = build_suite(&terms, &SuiteConfig::default()).unwrap();
        let texts: Vec<&str> = suite.iter().map(|p| p.text.as_str()).collect();
        assert!(texts.contains(&"a doctor, portrait, natural light"));
        assert!(texts.contains(&"a female lawyer, portrait, natural light"));
        assert!(texts.contains(&"an Asian lawyer, portrait, natural light"));
    }

    #[test]
    fn empty_domain_is_rejected() {
        let terms = TermLists::parse("[occupations]\ndoctor\n").unwrap();
        assert!(matches!(build_suite(&terms, &SuiteConfig::default()), Err(PromptError::EmptyDomain(_))));
    }

    #[test]
    fn annotations_round_trip() {
        let suite = build_suite(&TermLists::default_terms(), &SuiteConfig::default()).unwrap();
        for p in &suite {
            assert_eq!(parse_gender_annotation(&p.text), p.gender, "{}", p.text);
            assert_eq!(parse_skin_annotation(&p.text), p.skintone, "{}", p.text);
        }
        assert_eq!(parse_skin_annotation("A South Asian, male"), None);
    }

    #[test]
    fn articles() {
        assert_eq!(with_article("honest person"), "an honest person");
        assert_eq!(with_article("university professor"), "a university professor");
        assert_eq!(with_article("inmate"), "an inmate");
        assert_eq!(with_article("CEO"), "a CEO");
    }

    #[test]
    fn reference_distributions() {
        let cfg = ReferenceConfig::default();
        assert_eq!(reference_distribution(DemographicAxis::Gender, &cfg).unwrap(), vec![0.5, 0.5]);
        let s = reference_distribution(DemographicAxis::Skintone, &cfg).unwrap();
        assert_eq!(s, vec![0.2; 5]);
        assert_eq!(s.iter().sum::<f64>(), 1.0);
        let bad = ReferenceConfig { gender: Some(vec![0.6, 0.3]), ..Default::default() };
        assert!(matches!(
            reference_distribution(DemographicAxis::Gender, &bad),
            Err(PromptError::NonNormalized { .. })
        ));
    }
}
