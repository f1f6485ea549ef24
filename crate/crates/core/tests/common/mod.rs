//! Naive-loop reference implementations shared by the integration tests.
//! Everything works on plain nested vectors, one scalar at a time.
#![allow(dead_code, clippy::needless_range_loop, clippy::manual_clamp)]

use conntext::rng::{seeded, standard_normal};
use conntext::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| standard_normal(rng)).collect())
        .collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// log Σ exp over the kept entries.
fn log_sum_exp(xs: &[f64], keep: &[bool]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for i in 0..xs.len() {
        if keep[i] && xs[i] > m {
            m = xs[i];
        }
    }
    let mut s = 0.0;
    for i in 0..xs.len() {
        if keep[i] {
            s += (xs[i] - m).exp();
        }
    }
    m + s.ln()
}

/// Attention weights `softmax(q kᵀ / √D)` with masked keys at zero.
pub fn attention_weights(q: &Mat, k: &Mat, keep: &[bool]) -> Mat {
    let d = q[0].len() as f64;
    let mut out = vec![vec![0.0; k.len()]; q.len()];
    for i in 0..q.len() {
        let logits: Vec<f64> = (0..k.len()).map(|j| dot(&q[i], &k[j]) / d.sqrt()).collect();
        let lse = log_sum_exp(&logits, keep);
        for j in 0..k.len() {
            if keep[j] {
                out[i][j] = (logits[j] - lse).exp();
            }
        }
    }
    out
}

pub fn cross_attention(q: &Mat, kv: &Mat, keep: &[bool]) -> Mat {
    let w = attention_weights(q, kv, keep);
    let d = kv[0].len();
    let mut out = vec![vec![0.0; d]; q.len()];
    for i in 0..q.len() {
        for j in 0..kv.len() {
            for c in 0..d {
                out[i][c] += w[i][j] * kv[j][c];
            }
        }
    }
    out
}

pub fn cosine(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b.len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i][j] = dot(&a[i], &b[j]) / (dot(&a[i], &a[i]).sqrt() * dot(&b[j], &b[j]).sqrt());
        }
    }
    out
}

/// Connectome-level loss from its similarity matrix and the text mask.
pub fn l_cl(s: &Mat, keep: &[bool]) -> f64 {
    let weight = |v: f64| {
        let r = 0.5 * (v + 1.0);
        if r < 1e-6 {
            1e-6
        } else if r > 1.0 {
            1.0
        } else {
            r
        }
    };
    let n = s.len();
    let m = s[0].len();
    let mut b2t = 0.0;
    for i in 0..n {
        let lse = log_sum_exp(&s[i], keep);
        let mut acc = 0.0;
        for j in 0..m {
            if keep[j] {
                acc += (s[i][j] - lse).exp() * weight(s[i][j]);
            }
        }
        b2t -= acc.ln();
    }
    b2t /= n as f64;

    let all = vec![true; n];
    let mut t2b = 0.0;
    let mut kept = 0;
    for j in 0..m {
        if !keep[j] {
            continue;
        }
        kept += 1;
        let col: Vec<f64> = (0..n).map(|i| s[i][j]).collect();
        let lse = log_sum_exp(&col, &all);
        let mut acc = 0.0;
        for i in 0..n {
            acc += (col[i] - lse).exp() * weight(col[i]);
        }
        t2b -= acc.ln();
    }
    t2b /= kept as f64;
    0.5 * (b2t + t2b)
}

/// Symmetric InfoNCE with matched pairs on the diagonal.
pub fn info_nce(s: &Mat, tau: f64) -> f64 {
    let b = s.len();
    let all = vec![true; b];
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| s[i][j] / tau).collect();
        let col: Vec<f64> = (0..b).map(|j| s[j][i] / tau).collect();
        total += log_sum_exp(&row, &all) - s[i][i] / tau;
        total += log_sum_exp(&col, &all) - s[i][i] / tau;
    }
    total / (2.0 * b as f64)
}

/// Class-weighted cross-entropy with inverse-frequency weights from `labels`.
pub fn balanced_ce(logits: &Mat, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mci = labels.iter().filter(|&&y| y == 1).count() as f64;
    let w = [n / (2.0 * (n - mci)), n / (2.0 * mci)];
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        total += w[y] * (log_sum_exp(z, &[true, true]) - z[y]);
    }
    total / n
}

/// One seeded random alignment instance within N≤6, M≤8, B≤5, D≤16.
pub struct Instance {
    pub x_local: Mat,
    pub v_local: Mat,
    pub keep: Vec<bool>,
    pub x_global: Mat,
    pub v_global: Mat,
    pub logits: Mat,
    pub labels: Vec<usize>,
    pub tau: f64,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = seeded(1000 + seed);
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=8);
    let b = rng.random_range(2..=5);
    let d = rng.random_range(2..=16);
    let mut keep: Vec<bool> = (0..m).map(|_| rng.random_bool(0.75)).collect();
    keep[0] = true;
    let mut labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 1;
    labels[b - 1] = 0;
    Instance {
        x_local: random_mat(&mut rng, n, d),
        v_local: random_mat(&mut rng, m, d),
        keep,
        x_global: random_mat(&mut rng, b, d),
        v_global: random_mat(&mut rng, b, d),
        logits: random_mat(&mut rng, b, 2),
        labels,
        tau: rng.random_range(0.05..1.0),
    }
}

pub const ORACLE_QUANTITIES: [&str; 7] = [
    "connectome cross-attention",
    "subject cross-attention",
    "S_cl",
    "S_sl",
    "L_cl",
    "L_sl",
    "L_cls",
];

/// Library minus oracle, worst absolute difference per quantity in
/// [`ORACLE_QUANTITIES`] order.
pub fn oracle_errors(inst: &Instance) -> [f64; 7] {
    use conntext::align::{
        connectome_alignment, connectome_alignment_loss, infonce_loss, subject_alignment, SubjectAttention,
    };
    use conntext::objective::{balanced_cross_entropy, ClassWeights};
    use conntext::Tape;

    let mut tape = Tape::new();
    let x = tape.leaf(tensor(&inst.x_local)).unwrap();
    let v = tape.leaf(tensor(&inst.v_local)).unwrap();
    let ca = connectome_alignment(&mut tape, x, v, &inst.keep).unwrap();
    let lcl = connectome_alignment_loss(&mut tape, ca.similarity, &inst.keep).unwrap();
    let xg = tape.leaf(tensor(&inst.x_global)).unwrap();
    let vg = tape.leaf(tensor(&inst.v_global)).unwrap();
    let sa = subject_alignment(&mut tape, xg, vg, SubjectAttention::Batch).unwrap();
    let lsl = infonce_loss(&mut tape, sa.similarity, inst.tau).unwrap();
    let z = tape.leaf(tensor(&inst.logits)).unwrap();
    let weights = ClassWeights::from_labels(&inst.labels).unwrap();
    let lcls = balanced_cross_entropy(&mut tape, z, &inst.labels, weights).unwrap();

    let n = inst.x_local.len();
    let b = inst.x_global.len();
    let b2t = cross_attention(&inst.x_local, &inst.v_local, &inst.keep);
    let t2b = cross_attention(&inst.v_local, &inst.x_local, &vec![true; n]);
    let s_cl = cosine(&b2t, &t2b);
    let g_b2t = cross_attention(&inst.x_global, &inst.v_global, &vec![true; b]);
    let g_t2b = cross_attention(&inst.v_global, &inst.x_global, &vec![true; b]);
    let s_sl = cosine(&g_b2t, &g_t2b);

    let v = |var| mat(tape.value(var));
    [
        max_abs(&v(ca.brain2text), &b2t)
            .max(max_abs(&v(ca.text2brain), &t2b))
            .max(max_abs(
                &v(ca.attn_b2t),
                &attention_weights(&inst.x_local, &inst.v_local, &inst.keep),
            )),
        max_abs(&v(sa.brain2text), &g_b2t).max(max_abs(&v(sa.text2brain), &g_t2b)),
        max_abs(&v(ca.similarity), &s_cl),
        max_abs(&v(sa.similarity), &s_sl),
        (tape.value(lcl).item() - l_cl(&s_cl, &inst.keep)).abs(),
        (tape.value(lsl).item() - info_nce(&s_sl, inst.tau)).abs(),
        (tape.value(lcls).item() - balanced_ce(&inst.logits, &inst.labels)).abs(),
    ]
}
