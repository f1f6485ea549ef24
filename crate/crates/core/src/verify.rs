//! Built-in invariant suite: finite-difference gradient checks on a tiny
//! model, naive-loop references for the alignment and classification
//! losses, closed-form loss identities, and masking/permutation
//! invariances. Each check reports pass/fail with its worst error.

use std::fmt;
use std::time::Instant;

use rand::Rng;

use crate::align::{
    connectome_alignment, connectome_alignment_loss, infonce_loss, subject_alignment, SubjectAttention, REMAP_FLOOR,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, SubjectInput};
use crate::nn::TransformerLayer;
use crate::objective::{balanced_cross_entropy, ClassWeights, LossFlags};
use crate::rng::{seeded, standard_normal};
use crate::tensor::{grad_check_many, OpKind, ParamSet, Tape, Tensor, Var};
use crate::text::{CLS_ID, PAD_ID};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const ORACLE_SEEDS: u64 = 20;

/// Sizes of the gradient-check instance.
pub const TINY_REGIONS: usize = 6;
pub const TINY_MAX_LEN: usize = 8;
pub const TINY_DIM: usize = 16;
pub const TINY_BATCH: usize = 4;
pub const TINY_LAYERS: usize = 2;
const TINY_VOCAB: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, or the observed value for identities.
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn within(name: impl Into<String>, err: f64, tol: f64, start: Instant) -> Check {
        Check {
            name: name.into(),
            passed: err <= tol,
            detail: format!("max error {err:.3e} (tolerance {tol:.0e})"),
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn failed(name: impl Into<String>, e: &Error, start: Instant) -> Check {
        Check {
            name: name.into(),
            passed: false,
            detail: format!("error: {e}"),
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn from_result(name: &str, tol: f64, start: Instant, r: Result<f64>) -> Check {
        match r {
            Ok(err) => Check::within(name, err, tol, start),
            Err(e) => Check::failed(name, &e, start),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {} [{:.2} s]", self.name, self.detail, self.seconds)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(f, "{} checks, {} failed", self.checks.len(), self.failures())
    }
}

/// Every check in the suite.
pub fn run_all() -> Summary {
    let mut checks = gradient_checks();
    checks.push(fault_self_test());
    checks.extend(oracle_checks());
    checks.extend(identity_checks());
    checks.extend(invariance_checks());
    Summary { checks }
}

/// Loss whose gradient is checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Cl,
    Sl,
    Cls,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Cl, Objective::Sl, Objective::Cls, Objective::Total];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Cl => "L_cl",
            Objective::Sl => "L_sl",
            Objective::Cls => "L_cls",
            Objective::Total => "L",
        }
    }
}

/// The tiny instance used for gradient checks. Parameters are drawn far
/// from their initial scale so attention is not near-uniform and every
/// gradient is well away from zero.
pub fn tiny_instance(seed: u64) -> Result<(Model, Vec<SubjectInput>)> {
    let config = ModelConfig {
        regions: TINY_REGIONS,
        dim: TINY_DIM,
        layers: TINY_LAYERS,
        heads: 2,
        max_len: TINY_MAX_LEN,
        ..ModelConfig::default()
    };
    let mut rng = seeded(seed);
    let mut model = Model::new(config, TINY_VOCAB, &mut rng)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += 0.3 * standard_normal(&mut rng);
        }
    }
    let lengths = [TINY_MAX_LEN, 6, 4, 7];
    let batch = (0..TINY_BATCH)
        .map(|b| random_subject(&mut rng, lengths[b % lengths.len()], b % 2))
        .collect();
    Ok((model, batch))
}

fn random_subject<R: Rng>(rng: &mut R, len: usize, label: usize) -> SubjectInput {
    let n = TINY_REGIONS;
    let patches = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random::<f64>()).collect()).expect("square");
    let mut token_ids = vec![PAD_ID; TINY_MAX_LEN];
    let mut mask = vec![false; TINY_MAX_LEN];
    token_ids[0] = CLS_ID;
    mask[0] = true;
    for j in 1..len {
        token_ids[j] = rng.random_range(CLS_ID + 1..TINY_VOCAB);
        mask[j] = true;
    }
    SubjectInput {
        patches,
        token_ids,
        mask,
        label,
    }
}

fn param_values(set: &ParamSet) -> Vec<Tensor> {
    set.ids().map(|id| set.get(id).clone()).collect()
}

fn objectives_fn<'a>(
    model: &'a Model,
    batch: &'a [SubjectInput],
) -> impl Fn(&mut Tape, &[Var]) -> Result<Vec<Var>> + 'a {
    move |tape: &mut Tape, vars: &[Var]| {
        tape.set_param_vars(vars.to_vec());
        let refs: Vec<&SubjectInput> = batch.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let out = model.forward_batch(tape, &refs, ClassWeights::from_labels(&labels)?, LossFlags::default())?;
        Objective::ALL
            .iter()
            .map(|o| {
                let term = match o {
                    Objective::Cl => out.terms.cl,
                    Objective::Sl => out.terms.sl,
                    Objective::Cls => out.terms.cls,
                    Objective::Total => Some(out.loss),
                };
                term.ok_or_else(|| Error::Contract(format!("{} was not computed", o.name())))
            })
            .collect()
    }
}

/// Worst relative gradient error of each objective (in [`Objective::ALL`]
/// order) on the tiny instance, from one shared finite-difference sweep.
pub fn model_grad_errors(fault: Option<OpKind>) -> Result<Vec<f64>> {
    let (model, batch) = tiny_instance(11)?;
    let params = param_values(&model.params);
    grad_check_many(objectives_fn(&model, &batch), &params, GRAD_STEP, fault)
}

pub fn gradient_checks() -> Vec<Check> {
    let start = Instant::now();
    match model_grad_errors(None) {
        Ok(errs) => Objective::ALL
            .iter()
            .zip(errs)
            .map(|(o, err)| Check::within(format!("gradient {}", o.name()), err, GRAD_TOLERANCE, start))
            .collect(),
        Err(e) => vec![Check::failed("gradient checks", &e, start)],
    }
}

/// Negating the softmax adjoint must make the gradient check fail.
pub fn fault_self_test() -> Check {
    let start = Instant::now();
    let name = "fault injection detected";
    match model_grad_errors(Some(OpKind::Softmax)) {
        Ok(errs) => {
            let worst = errs.iter().copied().fold(0.0, f64::max);
            Check {
                name: name.into(),
                passed: worst > GRAD_TOLERANCE,
                detail: format!("corrupted softmax adjoint gives error {worst:.3e}"),
                seconds: start.elapsed().as_secs_f64(),
            }
        }
        Err(e) => Check::failed(name, &e, start),
    }
}

type Matrix = Vec<Vec<f64>>;

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| standard_normal(rng)).collect())
        .collect()
}

fn to_tensor(m: &Matrix) -> Tensor {
    Tensor::from_rows(m).expect("rectangular")
}

fn max_diff(t: &Tensor, m: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((t.at(i, j) - v).abs());
        }
    }
    worst
}

fn naive_softmax(xs: &[f64], keep: &[bool]) -> Vec<f64> {
    let m = xs
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs
        .iter()
        .zip(keep)
        .map(|(x, &k)| if k { (x - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn naive_attention(q: &Matrix, kv: &Matrix, keep: &[bool]) -> Matrix {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = kv
                .iter()
                .map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let p = naive_softmax(&logits, keep);
            (0..qi.len())
                .map(|c| p.iter().zip(kv).map(|(w, k)| w * k[c]).sum())
                .collect()
        })
        .collect()
}

fn naive_cosine(a: &Matrix, b: &Matrix) -> Matrix {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter()
        .map(|x| {
            b.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (norm(x) * norm(y)))
                .collect()
        })
        .collect()
}

fn naive_cl_loss(s: &Matrix, keep: &[bool]) -> f64 {
    let w = |v: f64| ((1.0 + v) / 2.0).clamp(REMAP_FLOOR, 1.0);
    let rows = s.len();
    let b2t: f64 = s
        .iter()
        .map(|row| {
            let p = naive_softmax(row, keep);
            -p.iter().zip(row).map(|(p, v)| p * w(*v)).sum::<f64>().ln()
        })
        .sum::<f64>()
        / rows as f64;
    let cols: Vec<usize> = (0..keep.len()).filter(|&j| keep[j]).collect();
    let t2b: f64 = cols
        .iter()
        .map(|&j| {
            let col: Vec<f64> = s.iter().map(|r| r[j]).collect();
            let p = naive_softmax(&col, &vec![true; rows]);
            -p.iter().zip(&col).map(|(p, v)| p * w(*v)).sum::<f64>().ln()
        })
        .sum::<f64>()
        / cols.len() as f64;
    0.5 * (b2t + t2b)
}

fn naive_infonce(s: &Matrix, tau: f64) -> f64 {
    let b = s.len();
    let all = vec![true; b];
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let row: Vec<f64> = s[i].iter().map(|v| v / tau).collect();
        rows -= naive_softmax(&row, &all)[i].ln();
        let col: Vec<f64> = s.iter().map(|r| r[i] / tau).collect();
        cols -= naive_softmax(&col, &all)[i].ln();
    }
    0.5 * (rows + cols) / b as f64
}

fn naive_balanced_ce(logits: &Matrix, labels: &[usize], weights: ClassWeights) -> f64 {
    let all = [true, true];
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| -weights.get(y) * naive_softmax(z, &all)[y].ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Worst deviation between library and naive implementations on one
/// random instance, per quantity.
fn oracle_instance(seed: u64) -> Result<[f64; 7]> {
    let mut rng = seeded(seed);
    let (n, m, d, b) = (
        rng.random_range(2..9),
        rng.random_range(2..12),
        rng.random_range(2..10),
        rng.random_range(2..7),
    );
    let x = random_matrix(&mut rng, n, d);
    let v = random_matrix(&mut rng, m, d);
    let mut keep: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
    keep[0] = true;
    let xg = random_matrix(&mut rng, b, d);
    let vg = random_matrix(&mut rng, b, d);
    let logits = random_matrix(&mut rng, b, 2);
    let mut labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let tau = rng.random_range(0.05..1.0);

    let mut tape = Tape::inference();
    let xv = tape.constant(to_tensor(&x))?;
    let vv = tape.constant(to_tensor(&v))?;
    let ca = connectome_alignment(&mut tape, xv, vv, &keep)?;
    let l_cl = connectome_alignment_loss(&mut tape, ca.similarity, &keep)?;
    let xgv = tape.constant(to_tensor(&xg))?;
    let vgv = tape.constant(to_tensor(&vg))?;
    let sa = subject_alignment(&mut tape, xgv, vgv, SubjectAttention::Batch)?;
    let l_sl = infonce_loss(&mut tape, sa.similarity, tau)?;
    let lv = tape.constant(to_tensor(&logits))?;
    let weights = ClassWeights::from_labels(&labels)?;
    let l_cls = balanced_cross_entropy(&mut tape, lv, &labels, weights)?;

    let b2t = naive_attention(&x, &v, &keep);
    let t2b = naive_attention(&v, &x, &vec![true; n]);
    let s_cl = naive_cosine(&b2t, &t2b);
    let sb2t = naive_attention(&xg, &vg, &vec![true; b]);
    let st2b = naive_attention(&vg, &xg, &vec![true; b]);
    let s_sl = naive_cosine(&sb2t, &st2b);

    let connectome = max_diff(tape.value(ca.brain2text), &b2t).max(max_diff(tape.value(ca.text2brain), &t2b));
    let subject = max_diff(tape.value(sa.brain2text), &sb2t).max(max_diff(tape.value(sa.text2brain), &st2b));
    Ok([
        connectome,
        subject,
        max_diff(tape.value(ca.similarity), &s_cl),
        max_diff(tape.value(sa.similarity), &s_sl),
        (tape.value(l_cl).item() - naive_cl_loss(&s_cl, &keep)).abs(),
        (tape.value(l_sl).item() - naive_infonce(&s_sl, tau)).abs(),
        (tape.value(l_cls).item() - naive_balanced_ce(&logits, &labels, weights)).abs(),
    ])
}

pub fn oracle_checks() -> Vec<Check> {
    const NAMES: [&str; 7] = [
        "oracle connectome cross-attention",
        "oracle subject cross-attention",
        "oracle S_cl",
        "oracle S_sl",
        "oracle L_cl",
        "oracle L_sl",
        "oracle L_cls",
    ];
    let start = Instant::now();
    let mut worst = [0.0f64; 7];
    for seed in 0..ORACLE_SEEDS {
        match oracle_instance(seed) {
            Ok(errs) => {
                for (w, e) in worst.iter_mut().zip(errs) {
                    *w = w.max(e);
                }
            }
            Err(e) => return vec![Check::failed("oracle equivalence", &e, start)],
        }
    }
    NAMES
        .iter()
        .zip(worst)
        .map(|(name, err)| Check::within(*name, err, ORACLE_TOLERANCE, start))
        .collect()
}

fn scalar_of(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

fn identity(name: &str, expected: f64, tol: f64, value: Result<f64>) -> Check {
    let start = Instant::now();
    Check::from_result(name, tol, start, value.map(|v| (v - expected).abs()))
}

pub fn identity_checks() -> Vec<Check> {
    let b = 5;
    vec![
        identity(
            "InfoNCE on constant S_sl equals log B",
            (b as f64).ln(),
            1e-12,
            scalar_of(|t| {
                let s = t.constant(Tensor::full(&[b, b], 0.37))?;
                infonce_loss(t, s, 0.07)
            }),
        ),
        identity(
            "InfoNCE on identity S_sl with tau 1, B 2",
            -(1f64.exp() / (1f64.exp() + 1.0)).ln(),
            1e-10,
            scalar_of(|t| {
                let s = t.constant(Tensor::identity(2))?;
                infonce_loss(t, s, 1.0)
            }),
        ),
        identity(
            "L_cl on all-ones S_cl equals 0",
            0.0,
            1e-12,
            scalar_of(|t| {
                let s = t.constant(Tensor::full(&[4, 6], 1.0))?;
                connectome_alignment_loss(t, s, &[true, true, true, true, false, false])
            }),
        ),
        identity(
            "L_cl on all-zeros S_cl equals log 2",
            2f64.ln(),
            1e-10,
            scalar_of(|t| {
                let s = t.constant(Tensor::zeros(&[4, 6]))?;
                connectome_alignment_loss(t, s, &[true, true, true, false, true, false])
            }),
        ),
        identity("L equals L_cl + L_sl + L_cls", 0.0, 1e-12, total_is_sum()),
    ]
}

fn total_is_sum() -> Result<f64> {
    let (model, batch) = tiny_instance(3)?;
    let refs: Vec<&SubjectInput> = batch.iter().collect();
    let mut tape = Tape::inference();
    tape.bind_params(&model.params)?;
    let out = model.forward_batch(&mut tape, &refs, ClassWeights::uniform(), LossFlags::default())?;
    let term = |v: Option<Var>| {
        v.map(|v| tape.value(v).item())
            .ok_or(Error::Contract("missing loss term".into()))
    };
    let sum = term(out.terms.cl)? + term(out.terms.sl)? + term(out.terms.cls)?;
    Ok((tape.value(out.loss).item() - sum).abs())
}

pub fn invariance_checks() -> Vec<Check> {
    let start = Instant::now();
    let padding = Check::from_result("padding length invariance", 1e-10, start, padding_error());
    let start = Instant::now();
    let permutation = Check::from_result(
        "batch permutation leaves L_sl unchanged",
        1e-12,
        start,
        permutation_error(),
    );
    let start = Instant::now();
    let residual = Check::from_result("zero-weight layers are identity maps", 0.0, start, residual_error());
    vec![padding, permutation, residual]
}

/// Max change in `L_cl`, `V_global` and unpadded `V_local` rows when the
/// same subject is encoded with four extra padded positions holding
/// arbitrary token ids.
fn padding_error() -> Result<f64> {
    let (short, batch) = tiny_instance(5)?;
    let extra = 4;
    let mut config = short.config.clone();
    config.max_len += extra;
    let mut rng = seeded(99);
    let mut long = Model::new(config, short.vocab_size, &mut rng)?;
    let ids: Vec<_> = short.params.ids().collect();
    for id in ids {
        let name = short.params.name(id).to_string();
        let target = long.params.find(&name).expect("same parameter names");
        let src = short.params.get(id);
        let dst = long.params.get_mut(target);
        let n = src.numel();
        dst.data_mut()[..n].copy_from_slice(src.data());
    }
    let mut worst: f64 = 0.0;
    for s in &batch {
        let mut padded = s.clone();
        padded
            .token_ids
            .extend((0..extra).map(|_| rng.random_range(0..short.vocab_size)));
        padded.mask.extend(std::iter::repeat_n(false, extra));
        let (a_local, a_global, a_cl) = encode_text(&short, s)?;
        let (b_local, b_global, b_cl) = encode_text(&long, &padded)?;
        worst = worst.max(a_global.max_abs_diff(&b_global));
        worst = worst.max((a_cl - b_cl).abs());
        for j in 0..a_local.rows() {
            if s.local_mask()[j] {
                for (p, q) in a_local.row(j).iter().zip(b_local.row(j)) {
                    worst = worst.max((p - q).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn encode_text(model: &Model, s: &SubjectInput) -> Result<(Tensor, Tensor, f64)> {
    let mut tape = Tape::inference();
    tape.bind_params(&model.params)?;
    let (x_local, _) = model.brain.encode_patches(&mut tape, s.patches.clone())?;
    let (v_local, v_global) = model.text.encode(&mut tape, &s.token_ids, &s.mask)?;
    let a = connectome_alignment(&mut tape, x_local, v_local, s.local_mask())?;
    let l_cl = connectome_alignment_loss(&mut tape, a.similarity, s.local_mask())?;
    Ok((
        tape.value(v_local).clone(),
        tape.value(v_global).clone(),
        tape.value(l_cl).item(),
    ))
}

fn permutation_error() -> Result<f64> {
    let (model, batch) = tiny_instance(6)?;
    let l_sl = |order: &[usize]| -> Result<f64> {
        let refs: Vec<&SubjectInput> = order.iter().map(|&i| &batch[i]).collect();
        let mut tape = Tape::inference();
        tape.bind_params(&model.params)?;
        let flags = LossFlags {
            use_cl: false,
            use_sl: true,
            use_cls: false,
        };
        let out = model.forward_batch(&mut tape, &refs, ClassWeights::uniform(), flags)?;
        Ok(tape.value(out.terms.sl.expect("L_sl enabled")).item())
    };
    let base = l_sl(&[0, 1, 2, 3])?;
    let mut worst: f64 = 0.0;
    for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
        worst = worst.max((l_sl(&order)? - base).abs());
    }
    Ok(worst)
}

fn residual_error() -> Result<f64> {
    let mut rng = seeded(4);
    let mut params = ParamSet::new();
    let layers: Vec<TransformerLayer> = (0..TINY_LAYERS)
        .map(|l| TransformerLayer::new(&mut params, &format!("layer{l}"), TINY_DIM, 2, &mut rng))
        .collect::<Result<_>>()?;
    for layer in &layers {
        for id in layer.branch_params() {
            params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let input = Tensor::from_rows(&random_matrix(&mut rng, 7, TINY_DIM))?;
    let mut tape = Tape::inference();
    tape.bind_params(&params)?;
    let x = tape.constant(input.clone())?;
    let mut h = x;
    for layer in &layers {
        h = layer.forward(&mut tape, h, Some(&[true, true, true, true, true, false, false]))?;
    }
    Ok(tape.value(h).max_abs_diff(&input))
}
