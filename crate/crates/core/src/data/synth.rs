use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Label, SubjectRecord};
use crate::connectome::{default_region_names, SCMatrix};
use crate::error::{Error, Result};
use crate::rng::{derived, standard_normal};
use crate::tensor::Tensor;
use crate::text::{split_words, ClinicalFields, ClinicalReport};

/// A region whose connections are attenuated in MCI subjects, coupled with
/// a report token that MCI reports mention more often.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedPair {
    pub region: usize,
    pub token: String,
    /// Multiplier on the region's row and column for MCI subjects.
    pub attenuation: f64,
    /// Token emission probability for MCI subjects.
    pub p_present: f64,
    /// Token emission probability for NC subjects.
    pub p_absent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub regions: usize,
    pub subjects_per_class: usize,
    pub planted: Vec<PlantedPair>,
    /// Mean fiber count of an unattenuated connection.
    pub base_mean: f64,
    /// Log-scale standard deviation of the per-subject, per-region
    /// connection strength factor.
    pub strength_noise: f64,
    /// Fraction of scans drawn with `degraded_noise` instead of
    /// `strength_noise`.
    pub degraded_scan_rate: f64,
    pub degraded_noise: f64,
    /// Probability that a report has no notes at all.
    pub notes_missing_rate: f64,
    /// How strongly the structured fields (age, MMSE, CDR, ...) differ
    /// between classes; 0 makes them class independent.
    pub clinical_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let pair = |region: usize, token: &str| PlantedPair {
            region,
            token: token.into(),
            attenuation: 0.2,
            p_present: 0.9,
            p_absent: 0.05,
        };
        SyntheticConfig {
            regions: 16,
            subjects_per_class: 200,
            planted: vec![
                pair(2, "phosphorylated_tau"),
                pair(7, "hippocampal_atrophy"),
                pair(12, "word_finding_difficulty"),
            ],
            base_mean: 50.0,
            strength_noise: 1.0,
            degraded_scan_rate: 0.0,
            degraded_noise: 3.0,
            notes_missing_rate: 0.25,
            clinical_shift: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.regions < 2 {
            return fail("synthetic data needs at least 2 regions".into());
        }
        if self.subjects_per_class == 0 {
            return fail("subjects_per_class must be positive".into());
        }
        if !(self.base_mean > 0.0 && self.base_mean.is_finite()) {
            return fail(format!("base_mean must be positive, got {}", self.base_mean));
        }
        if !(self.strength_noise >= 0.0 && self.strength_noise.is_finite()) {
            return fail(format!(
                "strength_noise must be non-negative, got {}",
                self.strength_noise
            ));
        }
        if !(self.degraded_noise >= 0.0 && self.degraded_noise.is_finite()) {
            return fail(format!(
                "degraded_noise must be non-negative, got {}",
                self.degraded_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.degraded_scan_rate) {
            return fail(format!(
                "degraded_scan_rate must lie in [0, 1], got {}",
                self.degraded_scan_rate
            ));
        }
        if !(0.0..1.0).contains(&self.notes_missing_rate) {
            return fail(format!(
                "notes_missing_rate must lie in [0, 1), got {}",
                self.notes_missing_rate
            ));
        }
        if !self.clinical_shift.is_finite() {
            return fail("clinical_shift must be finite".into());
        }
        let mut tokens = Vec::new();
        for p in &self.planted {
            if p.region >= self.regions {
                return fail(format!(
                    "planted region {} out of range for N={}",
                    p.region, self.regions
                ));
            }
            if !(p.attenuation > 0.0 && p.attenuation <= 1.0) {
                return fail(format!("attenuation must lie in (0, 1], got {}", p.attenuation));
            }
            for prob in [p.p_present, p.p_absent] {
                if !(0.0..=1.0).contains(&prob) {
                    return fail(format!("emission probability {prob} outside [0, 1]"));
                }
            }
            if split_words(&p.token) != [p.token.clone()] {
                return fail(format!("planted token {:?} must be one lowercase word", p.token));
            }
            if tokens.contains(&p.token) {
                return fail(format!("planted token {:?} listed twice", p.token));
            }
            tokens.push(p.token.clone());
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let names = default_region_names(self.regions);
        GroundTruth {
            seed: self.seed,
            regions: self.regions,
            planted: self
                .planted
                .iter()
                .map(|p| PlantedTruth {
                    region: p.region,
                    region_name: names[p.region].clone(),
                    token: p.token.clone(),
                    attenuation: p.attenuation,
                    p_present: p.p_present,
                    p_absent: p.p_absent,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub region: usize,
    pub region_name: String,
    pub token: String,
    pub attenuation: f64,
    pub p_present: f64,
    pub p_absent: f64,
}

/// The planted pairs of a generated dataset (`ground_truth.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub regions: usize,
    pub planted: Vec<PlantedTruth>,
}

const NOTE_PHRASES: [&str; 16] = [
    "lives independently",
    "reports good sleep",
    "hypertension controlled",
    "walks daily",
    "no acute distress",
    "mild hearing loss",
    "takes statin",
    "denies depression",
    "retired engineer",
    "attends with spouse",
    "occasional headaches",
    "vision corrected",
    "former smoker",
    "type two diabetes",
    "enjoys gardening",
    "independent in daily activities",
];

/// Generates `2 × subjects_per_class` subjects, alternating NC and MCI.
/// Each subject draws from its own stream, so the output depends only on
/// the config.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SubjectRecord>> {
    config.validate()?;
    let names = default_region_names(config.regions);
    let planted_words: Vec<&str> = config.planted.iter().map(|p| p.token.as_str()).collect();
    let phrases: Vec<&str> = NOTE_PHRASES
        .iter()
        .copied()
        .filter(|ph| split_words(ph).iter().all(|w| !planted_words.contains(&w.as_str())))
        .collect();
    (0..2 * config.subjects_per_class)
        .map(|i| {
            let mut rng = derived(config.seed, 0x10_0000 + i as u64);
            let label = if i % 2 == 0 { Label::Nc } else { Label::Mci };
            let subject_id = format!("sub-{:04}", i + 1);
            let sc = synth_sc(config, label, &names, &mut rng)?;
            let fields = synth_fields(config, label, &phrases, &mut rng);
            Ok(SubjectRecord {
                report: ClinicalReport::from_fields(subject_id.clone(), &fields),
                subject_id,
                sc,
                label,
            })
        })
        .collect()
}

fn synth_sc<R: Rng>(config: &SyntheticConfig, label: Label, names: &[String], rng: &mut R) -> Result<SCMatrix> {
    let n = config.regions;
    let sigma = if rng.random_bool(config.degraded_scan_rate) {
        config.degraded_noise
    } else {
        config.strength_noise
    };
    // Mean-one log-normal strength per region.
    let mut factor: Vec<f64> = (0..n)
        .map(|_| (sigma * standard_normal(rng) - 0.5 * sigma * sigma).exp())
        .collect();
    if label == Label::Mci {
        for p in &config.planted {
            factor[p.region] *= p.attenuation;
        }
    }
    let mut values = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let lambda = config.base_mean * factor[i] * factor[j];
            let count = Poisson::new(lambda)
                .map_err(|e| Error::Config(format!("fiber count mean {lambda}: {e}")))?
                .sample(rng);
            values.data_mut()[i * n + j] = count;
            values.data_mut()[j * n + i] = count;
        }
    }
    SCMatrix::new(values, names.to_vec())
}

fn synth_fields<R: Rng>(config: &SyntheticConfig, label: Label, phrases: &[&str], rng: &mut R) -> ClinicalFields {
    let y = if label == Label::Mci {
        config.clinical_shift
    } else {
        0.0
    };
    let mut normal = |mean: f64, sd: f64, lo: f64, hi: f64| (mean + sd * standard_normal(rng)).round().clamp(lo, hi);
    let age = normal(71.0 + 3.0 * y, 6.0, 55.0, 90.0);
    let education = normal(16.0 - y, 2.5, 8.0, 22.0);
    let mmse = normal(28.6 - 1.5 * y, 1.2, 20.0, 30.0);
    let sex = if rng.random_bool(0.5) { "female" } else { "male" };
    let apoe4 = if rng.random_bool((0.25 + 0.2 * y).clamp(0.0, 1.0)) {
        if rng.random_bool(0.15) {
            2
        } else {
            1
        }
    } else {
        0
    };
    let cdr = if rng.random_bool((0.15 + 0.25 * y).clamp(0.0, 1.0)) {
        "0.5"
    } else {
        "0"
    };

    // One draw decides every planted token, so the tokens co-occur.
    let u: f64 = rng.random();
    let emitted: Vec<&str> = config
        .planted
        .iter()
        .filter(|p| u < if label == Label::Mci { p.p_present } else { p.p_absent })
        .map(|p| p.token.as_str())
        .collect();
    let count = rng.random_range(1..=3);
    let mut chosen: Vec<&str> = phrases.choose_multiple(rng, count).copied().collect();
    chosen.sort_unstable();
    let mut notes = chosen.join(", ");
    if !emitted.is_empty() {
        notes.push_str(". ");
        notes.push_str(&emitted.join(" "));
    }
    let notes_missing = rng.random_bool(config.notes_missing_rate);

    ClinicalFields {
        age: Some(format!("{age}")),
        sex: Some(sex.into()),
        education: Some(format!("{education}")),
        apoe4: Some(apoe4.to_string()),
        mmse: Some(format!("{mmse}")),
        cdr: Some(cdr.into()),
        notes: (!notes_missing).then_some(notes),
    }
}
