use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::data::SubjectRecord;
use crate::error::{Error, Result};
use crate::train::{train_with_split, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o L_cl")]
    WithoutCl,
    #[serde(rename = "w/o both")]
    WithoutAlignment,
    #[serde(rename = "I-only")]
    ImageOnly,
    #[serde(rename = "C-only")]
    TextOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutCl,
        Variant::WithoutAlignment,
        Variant::ImageOnly,
        Variant::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutCl => "w/o L_cl",
            Variant::WithoutAlignment => "w/o both",
            Variant::ImageOnly => "I-only",
            Variant::TextOnly => "C-only",
        }
    }

    /// `base` with every alignment term and modality on, then this variant's
    /// switches applied.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.use_cl = true;
        cfg.use_sl = true;
        cfg.model.use_image = true;
        cfg.model.use_text = true;
        match self {
            Variant::Full => {}
            Variant::WithoutCl => cfg.use_cl = false,
            Variant::WithoutAlignment => {
                cfg.use_cl = false;
                cfg.use_sl = false;
            }
            Variant::ImageOnly => cfg.model.use_text = false,
            Variant::TextOnly => cfg.model.use_image = false,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Held-out metrics after the last epoch.
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| &r.metrics)
    }

    fn named(&self, order: &[Variant]) -> Vec<(String, MetricsReport)> {
        order
            .iter()
            .filter_map(|&v| self.get(v).map(|m| (v.name().to_string(), *m)))
            .collect()
    }

    /// One JSON record per variant.
    pub fn lines(&self) -> String {
        super::metrics_lines(&self.named(&Variant::ALL))
    }

    /// Modality block followed by the alignment block.
    pub fn text_table(&self) -> String {
        let modality = super::metrics_table(&self.named(&[Variant::ImageOnly, Variant::TextOnly, Variant::Full]));
        let alignment =
            super::metrics_table(&self.named(&[Variant::WithoutAlignment, Variant::WithoutCl, Variant::Full]));
        format!("(A) modality\n{modality}\n(B) alignment\n{alignment}")
    }
}

/// Trains every variant on the same split of `records` and scores each on
/// the held-out part.
pub fn run_ablation_suite(base: &TrainConfig, records: &[SubjectRecord]) -> Result<AblationTable> {
    run_variants(base, records, &Variant::ALL)
}

pub fn run_variants(base: &TrainConfig, records: &[SubjectRecord], variants: &[Variant]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (outcome, _) = train_with_split(&variant.config(base), records)?;
        let metrics = outcome
            .final_metrics
            .ok_or_else(|| Error::Validation(format!("{} has no held-out subjects to score", variant.name())))?;
        rows.push(AblationRow { variant, metrics });
    }
    Ok(AblationTable { rows })
}
