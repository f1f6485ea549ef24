//! Classification head over the two globals and the joint objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;

/// `concat[X_global, V_global] → fc1 → GELU → fc2`, giving two logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, dim: usize, hidden: usize, rng: &mut R) -> Self {
        ClassifierHead {
            fc1: Linear::new(params, "head.fc1", 2 * dim, hidden, rng),
            fc2: Linear::new(params, "head.fc2", hidden, NUM_CLASSES, rng),
        }
    }

    /// `x_global`, `v_global`: B×D each. Returns B×2 logits.
    pub fn forward(&self, tape: &mut Tape, x_global: Var, v_global: Var) -> Result<Var> {
        if tape.shape(x_global) != tape.shape(v_global) {
            return Err(Error::shape(
                "classify",
                format!("{:?} vs {:?}", tape.shape(x_global), tape.shape(v_global)),
            ));
        }
        let fused = tape.concat(&[x_global, v_global], 1)?;
        if tape.value(fused).cols() != self.fc1.d_in {
            return Err(Error::shape(
                "classify",
                format!(
                    "head expects {} fused features, got {:?}",
                    self.fc1.d_in,
                    tape.shape(fused)
                ),
            ));
        }
        let h = self.fc1.forward(tape, fused)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Per-class loss weights, indexed by label (0 = NC, 1 = MCI).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub nc: f64,
    pub mci: f64,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { nc: 1.0, mci: 1.0 }
    }

    /// Inverse-frequency weights `w_c = total / (2·count_c)`.
    pub fn inverse_frequency(nc_count: usize, mci_count: usize) -> Result<Self> {
        if nc_count == 0 || mci_count == 0 {
            return Err(Error::Validation(format!(
                "class weights need both classes (NC {nc_count}, MCI {mci_count})"
            )));
        }
        let total = (nc_count + mci_count) as f64;
        Ok(ClassWeights {
            nc: total / (2.0 * nc_count as f64),
            mci: total / (2.0 * mci_count as f64),
        })
    }

    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        check_labels(labels)?;
        let mci = labels.iter().filter(|&&l| l == 1).count();
        Self::inverse_frequency(labels.len() - mci, mci)
    }

    pub fn get(&self, label: usize) -> f64 {
        if label == 0 {
            self.nc
        } else {
            self.mci
        }
    }
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= NUM_CLASSES) {
        Some(bad) => Err(Error::Validation(format!(
            "unknown label {bad}; expected 0 (NC) or 1 (MCI)"
        ))),
        None => Ok(()),
    }
}

/// `mean_i w_{y_i} · (−log softmax(logits_i)[y_i])`.
pub fn balanced_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], weights: ClassWeights) -> Result<Var> {
    check_labels(labels)?;
    let shape = tape.shape(logits).to_vec();
    if shape != [labels.len(), NUM_CLASSES] {
        return Err(Error::shape(
            "balanced_cross_entropy",
            format!("{} labels for logits of shape {shape:?}", labels.len()),
        ));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather(lp, labels)?;
    let w: Vec<f64> = labels.iter().map(|&l| -weights.get(l)).collect();
    let w = tape.constant(Tensor::vector(w))?;
    let weighted = tape.mul(picked, w)?;
    tape.mean(weighted)
}

/// Which objective terms contribute to `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub use_cl: bool,
    pub use_sl: bool,
    pub use_cls: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            use_cl: true,
            use_sl: true,
            use_cls: true,
        }
    }
}

/// Per-batch loss terms; a disabled term may be absent.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cl: Option<Var>,
    pub sl: Option<Var>,
    pub cls: Option<Var>,
}

/// `L = L_cl + L_sl + L_cls` over the enabled, present terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, flags: LossFlags) -> Result<Var> {
    let named = [
        ("L_cl", terms.cl, flags.use_cl),
        ("L_sl", terms.sl, flags.use_sl),
        ("L_cls", terms.cls, flags.use_cls),
    ];
    let mut total: Option<Var> = None;
    for (name, term, enabled) in named {
        let Some(v) = term.filter(|_| enabled) else { continue };
        if tape.value(v).numel() != 1 {
            return Err(Error::shape("total_loss", format!("{name} is not a scalar")));
        }
        if !tape.value(v).item().is_finite() {
            return Err(Error::NonFiniteLoss { term: name });
        }
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn inverse_frequency_weights_for_a_301_117_cohort() {
        let w = ClassWeights::inverse_frequency(301, 117).unwrap();
        assert!((w.nc - 418.0 / 602.0).abs() < 1e-15);
        assert!((w.mci - 418.0 / 234.0).abs() < 1e-15);
        assert!((w.nc - 0.694).abs() < 5e-4);
        assert!((w.mci - 1.786).abs() < 5e-4);
        assert!(ClassWeights::inverse_frequency(3, 0).is_err());
    }

    #[test]
    fn zero_weights_give_fc2_bias() {
        let mut params = ParamSet::new();
        let head = ClassifierHead::new(&mut params, 4, 4, &mut seeded(1));
        params.zero_all();
        params.set(head.fc2.bias, Tensor::vector(vec![0.25, -1.5])).unwrap();
        let mut tape = Tape::new();
        tape.bind_params(&params).unwrap();
        let x = tape.constant(Tensor::full(&[3, 4], 0.7)).unwrap();
        let v = tape.constant(Tensor::full(&[3, 4], -0.2)).unwrap();
        let logits = head.forward(&mut tape, x, v).unwrap();
        assert_eq!(tape.shape(logits), &[3, 2]);
        for r in 0..3 {
            assert_eq!(tape.value(logits).row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn cross_entropy_limits() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
        let l = balanced_cross_entropy(&mut tape, uniform, &[0, 1, 1, 0], ClassWeights::uniform()).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let sure = tape
            .constant(Tensor::from_rows(&[vec![60.0, -60.0], vec![-60.0, 60.0]]).unwrap())
            .unwrap();
        let l = balanced_cross_entropy(&mut tape, sure, &[0, 1], ClassWeights::uniform()).unwrap();
        assert!(tape.value(l).item() < 1e-40);

        assert!(matches!(
            balanced_cross_entropy(&mut tape, sure, &[0, 2], ClassWeights::uniform()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn total_loss_flags() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.5)).unwrap();
        let b = tape.leaf(Tensor::scalar(0.3)).unwrap();
        let c = tape.leaf(Tensor::scalar(0.2)).unwrap();
        let terms = LossTerms {
            cl: Some(a),
            sl: Some(b),
            cls: Some(c),
        };
        let l = total_loss(&mut tape, &terms, LossFlags::default()).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-15);
        let no_cl = LossFlags {
            use_cl: false,
            ..LossFlags::default()
        };
        let l = total_loss(&mut tape, &terms, no_cl).unwrap();
        assert_eq!(tape.value(l).item(), 0.3 + 0.2);
        let l = total_loss(&mut tape, &LossTerms::default(), LossFlags::default()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    proptest! {
        #[test]
        fn unit_weights_reduce_to_plain_cross_entropy(
            rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0usize..2), 1..10)
        ) {
            let logits: Vec<Vec<f64>> = rows.iter().map(|&(a, b, _)| vec![a, b]).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.2).collect();
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::from_rows(&logits).unwrap()).unwrap();
            let l = balanced_cross_entropy(&mut tape, z, &labels, ClassWeights::uniform()).unwrap();
            let plain: f64 = logits.iter().zip(&labels).map(|(z, &y)| {
                let m = z[0].max(z[1]);
                let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
                lse - z[y]
            }).sum::<f64>() / labels.len() as f64;
            prop_assert!((tape.value(l).item() - plain).abs() <= 1e-12);
        }

        #[test]
        fn loss_falls_as_correct_logit_rises(base in -3.0f64..3.0, other in -3.0f64..3.0, step in 0.01f64..2.0) {
            let mut tape = Tape::new();
            let lo = tape.constant(Tensor::from_rows(&[vec![other, base]]).unwrap()).unwrap();
            let hi = tape.constant(Tensor::from_rows(&[vec![other, base + step]]).unwrap()).unwrap();
            let w = ClassWeights::inverse_frequency(5, 2).unwrap();
            let l_lo = balanced_cross_entropy(&mut tape, lo, &[1], w).unwrap();
            let l_hi = balanced_cross_entropy(&mut tape, hi, &[1], w).unwrap();
            prop_assert!(tape.value(l_hi).item() < tape.value(l_lo).item());
        }
    }
}
