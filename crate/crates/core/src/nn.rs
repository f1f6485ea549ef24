//! Linear layers, multi-head self-attention and the pre-norm transformer layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Truncated-normal weight tensor (std 0.02, cut at ±2 std).
pub fn init_weight<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// `y = x·Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = params.add(format!("{name}.weight"), init_weight(rng, &[d_out, d_in]), true);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false);
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul_bt(x, tape.param(self.weight))?;
        tape.add_row(xw, tape.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), false),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(self.gamma), tape.param(self.beta), LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product self-attention without projection biases.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub heads: usize,
    pub dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "feature size {dim} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |suffix: &str| params.add(format!("{name}.{suffix}"), init_weight(rng, &[dim, dim]), true);
        let wq = proj("wq");
        let wk = proj("wk");
        let wv = proj("wv");
        let wo = proj("wo");
        Ok(MultiHeadSelfAttention {
            heads,
            dim,
            wq,
            wk,
            wv,
            wo,
        })
    }

    /// `key_mask[j] == false` marks padded key positions.
    pub fn forward(&self, tape: &mut Tape, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let q = tape.matmul_bt(x, tape.param(self.wq))?;
        let k = tape.matmul_bt(x, tape.param(self.wk))?;
        let v = tape.matmul_bt(x, tape.param(self.wv))?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let logits = tape.matmul_bt(qh, kh)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.softmax_masked(logits, key_mask)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        tape.matmul_bt(merged, tape.param(self.wo))
    }
}

/// One pre-norm encoder layer:
/// `o' = MSA(LN(o)) + o`, then `o_next = MLP(LN(o')) + o'`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub msa: MultiHeadSelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim),
            msa: MultiHeadSelfAttention::new(params, &format!("{name}.msa"), dim, heads, rng)?,
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim),
            fc1: Linear::new(params, &format!("{name}.mlp.fc1"), dim, 4 * dim, rng),
            fc2: Linear::new(params, &format!("{name}.mlp.fc2"), 4 * dim, dim, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let h = self.msa.forward(tape, h, key_mask)?;
        let mid = tape.add(h, x)?;
        let h = self.ln2.forward(tape, mid)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, h)?;
        tape.add(h, mid)
    }

    /// Every parameter belonging to the MSA and MLP branches.
    pub fn branch_params(&self) -> Vec<ParamId> {
        vec![
            self.msa.wq,
            self.msa.wk,
            self.msa.wv,
            self.msa.wo,
            self.fc1.weight,
            self.fc1.bias,
            self.fc2.weight,
            self.fc2.bias,
        ]
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::grad_check;

    fn random_input(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn matvec_t(w: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|o| w.row(o).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Explicit-loop reference for one attention block.
    fn msa_oracle(params: &ParamSet, msa: &MultiHeadSelfAttention, x: &Tensor, mask: Option<&[bool]>) -> Vec<Vec<f64>> {
        let t = x.rows();
        let proj = |id| (0..t).map(|i| matvec_t(params.get(id), x.row(i))).collect::<Vec<_>>();
        let (q, k, v) = (proj(msa.wq), proj(msa.wk), proj(msa.wv));
        let hd = msa.dim / msa.heads;
        let mut concat = vec![vec![0.0; msa.dim]; t];
        for h in 0..msa.heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..t {
                let mut logits = vec![f64::NEG_INFINITY; t];
                for j in 0..t {
                    if mask.is_none_or(|m| m[j]) {
                        let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                        logits[j] = dot / (hd as f64).sqrt();
                    }
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for c in cols.clone() {
                    concat[i][c] = (0..t).map(|j| w[j] / z * v[j][c]).sum();
                }
            }
        }
        concat.iter().map(|row| matvec_t(params.get(msa.wo), row)).collect()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut p = ParamSet::new();
        let err = MultiHeadSelfAttention::new(&mut p, "m", 6, 4, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let mut rng = seeded(1);
        let mut p = ParamSet::new();
        let msa = MultiHeadSelfAttention::new(&mut p, "m", 4, 2, &mut rng).unwrap();
        let x = random_input(&mut rng, 1, 4);
        let mut tape = Tape::new();
        tape.bind_params(&p).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = msa.forward(&mut tape, xv, None).unwrap();
        let expected = matvec_t(p.get(msa.wo), &matvec_t(p.get(msa.wv), x.row(0)));
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_projections_give_zero_output() {
        let mut rng = seeded(2);
        let mut p = ParamSet::new();
        let msa = MultiHeadSelfAttention::new(&mut p, "m", 4, 2, &mut rng).unwrap();
        p.zero_all();
        let mut tape = Tape::new();
        tape.bind_params(&p).unwrap();
        let x = tape.constant(random_input(&mut rng, 3, 4)).unwrap();
        let y = msa.forward(&mut tape, x, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn msa_matches_loop_oracle() {
        for seed in 0..5 {
            let mut rng = seeded(100 + seed);
            let mut p = ParamSet::new();
            let msa = MultiHeadSelfAttention::new(&mut p, "m", 4, 2, &mut rng).unwrap();
            // Larger weights so attention is far from uniform.
            for id in p.ids().collect::<Vec<_>>() {
                let t = random_input(&mut rng, 4, 4);
                p.set(id, t).unwrap();
            }
            let x = random_input(&mut rng, 3, 4);
            let masks: [Option<&[bool]>; 2] = [None, Some(&[true, false, true])];
            for mask in masks {
                let mut tape = Tape::new();
                tape.bind_params(&p).unwrap();
                let xv = tape.constant(x.clone()).unwrap();
                let y = msa.forward(&mut tape, xv, mask).unwrap();
                let oracle = msa_oracle(&p, &msa, &x, mask);
                for i in 0..3 {
                    for c in 0..4 {
                        assert!((tape.value(y).at(i, c) - oracle[i][c]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_branches_make_layer_identity() {
        let mut rng = seeded(3);
        let mut p = ParamSet::new();
        let layer = TransformerLayer::new(&mut p, "l", 8, 2, &mut rng).unwrap();
        for id in layer.branch_params() {
            let shape = p.get(id).shape().to_vec();
            p.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = random_input(&mut rng, 5, 8);
        let mut tape = Tape::new();
        tape.bind_params(&p).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = layer.forward(&mut tape, xv, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn layer_matches_step_by_step_oracle() {
        let mut rng = seeded(4);
        let mut p = ParamSet::new();
        let layer = TransformerLayer::new(&mut p, "l", 4, 2, &mut rng).unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            let shape = p.get(id).shape().to_vec();
            let data = (0..p.get(id).numel()).map(|_| rng.random_range(-0.5..0.5)).collect();
            p.set(id, Tensor::new(shape, data).unwrap()).unwrap();
        }
        let x = random_input(&mut rng, 3, 4);

        let ln = |row: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| g.data()[j] * (v - mean) / (var + LAYER_NORM_EPS).sqrt() + b.data()[j])
                .collect()
        };
        let normed: Vec<Vec<f64>> = (0..3)
            .map(|i| ln(x.row(i), p.get(layer.ln1.gamma), p.get(layer.ln1.beta)))
            .collect();
        let normed_t = Tensor::from_rows(&normed).unwrap();
        let attn = msa_oracle(&p, &layer.msa, &normed_t, None);
        let mut expected = Vec::new();
        for i in 0..3 {
            let mid: Vec<f64> = attn[i].iter().zip(x.row(i)).map(|(a, b)| a + b).collect();
            let h = ln(&mid, p.get(layer.ln2.gamma), p.get(layer.ln2.beta));
            let mut h1 = matvec_t(p.get(layer.fc1.weight), &h);
            for (v, b) in h1.iter_mut().zip(p.get(layer.fc1.bias).data()) {
                let z = *v + b;
                *v = 0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
            }
            let h2 = matvec_t(p.get(layer.fc2.weight), &h1);
            let out: Vec<f64> = h2
                .iter()
                .zip(p.get(layer.fc2.bias).data())
                .zip(&mid)
                .map(|((a, b), m)| a + b + m)
                .collect();
            expected.push(out);
        }

        let mut tape = Tape::new();
        tape.bind_params(&p).unwrap();
        let xv = tape.constant(x).unwrap();
        let y = layer.forward(&mut tape, xv, None).unwrap();
        let expected = Tensor::from_rows(&expected).unwrap();
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn padded_positions_do_not_leak() {
        let mut rng = seeded(5);
        let mut p = ParamSet::new();
        let layer = TransformerLayer::new(&mut p, "l", 8, 2, &mut rng).unwrap();
        for id in p.ids().collect::<Vec<_>>() {
            let shape = p.get(id).shape().to_vec();
            let data = (0..p.get(id).numel()).map(|_| rng.random_range(-0.3..0.3)).collect();
            p.set(id, Tensor::new(shape, data).unwrap()).unwrap();
        }
        let real = random_input(&mut rng, 3, 8);
        let pad = random_input(&mut rng, 2, 8);

        let mut short = Tape::new();
        short.bind_params(&p).unwrap();
        let xs = short.constant(real.clone()).unwrap();
        let ys = layer.forward(&mut short, xs, None).unwrap();

        let mut long = Tape::new();
        long.bind_params(&p).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| real.row(i).to_vec()).collect();
        rows.extend((0..2).map(|i| pad.row(i).to_vec()));
        let xl = long.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let mask = [true, true, true, false, false];
        let yl = layer.forward(&mut long, xl, Some(&mask)).unwrap();
        for i in 0..3 {
            for c in 0..8 {
                assert!((short.value(ys).at(i, c) - long.value(yl).at(i, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_gradients_pass_grad_check() {
        let mut rng = seeded(6);
        let mut p = ParamSet::new();
        let layer = TransformerLayer::new(&mut p, "l", 4, 2, &mut rng).unwrap();
        let mut values: Vec<Tensor> = p.ids().map(|id| p.get(id).clone()).collect();
        for v in values.iter_mut() {
            v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
        let x = random_input(&mut rng, 3, 4);
        let mask = [true, true, false];
        let err = grad_check(
            |tape, vars| {
                // Rebind the tape's parameter table to the supplied leaves.
                tape.set_param_vars(vars.to_vec());
                let xv = tape.constant(x.clone())?;
                let y = layer.forward(tape, xv, Some(&mask))?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &values,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn init_is_deterministic_with_expected_spread() {
        let a = init_weight(&mut seeded(9), &[100, 100]);
        let b = init_weight(&mut seeded(9), &[100, 100]);
        assert_eq!(a, b);
        let n = a.numel() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let std = (a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
        assert!(a.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mut p = ParamSet::new();
        let ln = LayerNorm::new(&mut p, "ln", 5);
        assert!(p.get(ln.gamma).data().iter().all(|&g| g == 1.0));
        assert!(p.get(ln.beta).data().iter().all(|&g| g == 0.0));
    }
}
