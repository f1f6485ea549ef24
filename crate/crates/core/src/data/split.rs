use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Label, SubjectRecord};
use crate::error::{Error, Result};
use crate::rng::derived;

const SPLIT_STREAM: u64 = 0x5b11;
const BATCH_STREAM: u64 = 0xba7c;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
            stratify: true,
        }
    }
}

/// Seeded train/test partition. With stratification each class is shuffled
/// and cut separately, rounding the train count down. Both outputs keep the
/// input's relative order.
pub fn stratified_split(
    records: &[SubjectRecord],
    spec: &SplitSpec,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = derived(spec.seed, SPLIT_STREAM);
    let groups: Vec<Vec<usize>> = if spec.stratify {
        [Label::Nc, Label::Mci]
            .iter()
            .map(|&l| (0..records.len()).filter(|&i| records[i].label == l).collect())
            .collect()
    } else {
        vec![(0..records.len()).collect()]
    };
    let mut in_train = vec![false; records.len()];
    for (g, mut idx) in groups.into_iter().enumerate() {
        if spec.stratify && idx.len() < 2 {
            let label = if g == 0 { Label::Nc } else { Label::Mci };
            return Err(Error::Validation(format!(
                "class {label} has {} record(s); stratified splitting needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * spec.train_fraction).floor() as usize;
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Index batches for one epoch: a shuffle seeded by `(seed, epoch)`, cut
/// into chunks of `batch_size` with the final partial batch kept.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Contract("cannot batch an empty record list".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = derived(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), BATCH_STREAM);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
