//! Subject records, dataset files, splitting, batching and the synthetic
//! generator with planted connectome/token associations.

mod io;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::connectome::{patchify, InputTransform, SCMatrix};
use crate::error::{Error, Result};
use crate::model::SubjectInput;
use crate::text::{tokenize, ClinicalReport, Vocabulary};

pub use io::{
    load_dataset, load_reports, load_sc, save_dataset, save_reports, save_sc, ReportEntry, REPORTS_FILE, SC_DIR,
};
pub use split::{make_batches, stratified_split, SplitSpec};
pub use synth::{generate_synthetic, GroundTruth, PlantedPair, PlantedTruth, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "MCI")]
    Mci,
}

impl Label {
    /// 0 for NC, 1 for MCI.
    pub fn index(self) -> usize {
        match self {
            Label::Nc => 0,
            Label::Mci => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Nc),
            1 => Ok(Label::Mci),
            _ => Err(Error::Validation(format!("unknown label index {i}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Nc => "NC",
            Label::Mci => "MCI",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NC" => Ok(Label::Nc),
            "MCI" => Ok(Label::Mci),
            other => Err(Error::Validation(format!(
                "unknown label {other:?}; expected NC or MCI"
            ))),
        }
    }
}

/// One subject: connectome, report and diagnosis.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub sc: SCMatrix,
    pub report: ClinicalReport,
    pub label: Label,
}

/// Tokenizes every report with `vocab` and transforms every matrix into
/// model inputs, in record order.
pub fn prepare_inputs(
    records: &[SubjectRecord],
    vocab: &Vocabulary,
    max_len: usize,
    transform: InputTransform,
) -> Result<Vec<SubjectInput>> {
    records
        .iter()
        .map(|r| {
            let (token_ids, mask) = tokenize(&r.report.raw_text, vocab, max_len)?;
            Ok(SubjectInput {
                patches: patchify(&r.sc, transform),
                token_ids,
                mask,
                label: r.label.index(),
            })
        })
        .collect()
}

/// Narratives of `records`, for building a vocabulary.
pub fn corpus(records: &[SubjectRecord]) -> Vec<&str> {
    records.iter().map(|r| r.report.raw_text.as_str()).collect()
}

/// `(NC count, MCI count)`.
pub fn class_counts(records: &[SubjectRecord]) -> (usize, usize) {
    let mci = records.iter().filter(|r| r.label == Label::Mci).count();
    (records.len() - mci, mci)
}
