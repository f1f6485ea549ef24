use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Multi-word clinical expressions kept together as one token.
pub const CLINICAL_TERMS: &[&str] = &[
    "phosphorylated tau",
    "amyloid plaques",
    "amyloid positive",
    "neurofibrillary tangles",
    "hippocampal atrophy",
    "cortical atrophy",
    "white matter",
    "posterior cingulate",
    "memory complaints",
    "word finding difficulty",
    "cognitive decline",
    "mild cognitive impairment",
    "short term memory",
    "family history",
];

/// Structured fields of one subject. Values are kept as text exactly as
/// they appeared in the source record.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalFields {
    pub age: Option<String>,
    pub sex: Option<String>,
    pub education: Option<String>,
    pub apoe4: Option<String>,
    pub mmse: Option<String>,
    pub cdr: Option<String>,
    pub notes: Option<String>,
}

impl ClinicalFields {
    /// Inverse of [`ClinicalFields::to_map`]: `"unknown"` and absent keys become `None`.
    pub fn from_map(map: &BTreeMap<String, String>) -> Self {
        let get = |k: &str| map.get(k).filter(|v| v.as_str() != "unknown").cloned();
        ClinicalFields {
            age: get("age"),
            sex: get("sex"),
            education: get("education"),
            apoe4: get("apoe4"),
            mmse: get("mmse"),
            cdr: get("cdr"),
            notes: get("notes"),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let unknown = |v: &Option<String>| v.clone().unwrap_or_else(|| "unknown".to_string());
        [
            ("age", &self.age),
            ("sex", &self.sex),
            ("education", &self.education),
            ("apoe4", &self.apoe4),
            ("mmse", &self.mmse),
            ("cdr", &self.cdr),
            ("notes", &self.notes),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), unknown(v)))
        .collect()
    }
}

/// Lowercases and joins every [`CLINICAL_TERMS`] phrase with underscores.
pub fn join_clinical_terms(text: &str) -> String {
    let mut out = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    for term in CLINICAL_TERMS {
        let joined = term.replace(' ', "_");
        let mut result = String::with_capacity(out.len());
        let mut rest = out.as_str();
        while let Some(pos) = rest.find(term) {
            let before_ok = pos == 0 || !is_word_char(rest[..pos].chars().next_back().unwrap());
            let after = &rest[pos + term.len()..];
            let after_ok = after.chars().next().is_none_or(|c| !is_word_char(c));
            result.push_str(&rest[..pos]);
            result.push_str(if before_ok && after_ok { &joined } else { term });
            rest = after;
        }
        result.push_str(rest);
        out = result;
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Renders the fixed narrative template:
/// `age A. sex S. education E years. apoe4 K. mmse M. cdr C. notes: …`
pub fn compose_narrative(fields: &ClinicalFields) -> String {
    let map = fields.to_map();
    let notes = join_clinical_terms(&map["notes"]);
    let notes = notes.trim_end_matches('.');
    format!(
        "age {}. sex {}. education {} years. apoe4 {}. mmse {}. cdr {}. notes: {}.",
        map["age"], map["sex"], map["education"], map["apoe4"], map["mmse"], map["cdr"], notes
    )
}

/// A subject's report: narrative, source fields and fixed-length encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalReport {
    pub subject_id: String,
    pub raw_text: String,
    pub structured: BTreeMap<String, String>,
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ClinicalReport {
    /// Report with narrative composed but not yet tokenized.
    pub fn from_fields(subject_id: impl Into<String>, fields: &ClinicalFields) -> Self {
        ClinicalReport {
            subject_id: subject_id.into(),
            raw_text: compose_narrative(fields),
            structured: fields.to_map(),
            token_ids: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn is_tokenized(&self) -> bool {
        !self.token_ids.is_empty()
    }
}
