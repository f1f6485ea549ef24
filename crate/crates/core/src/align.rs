//! Cross-modal alignment: token-level cross-attention with the weighted
//! similarity loss, and subject-level cross-attention with InfoNCE.
//!
//! Neither alignment has learned projections. Attention logits are raw
//! embedding products scaled by `1/√D`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Floor on the remapped similarity inside the log of `L_cl`.
pub const REMAP_FLOOR: f64 = 1e-6;
pub const NORMALIZE_EPS: f64 = 1e-12;

/// How subject-level cross-attention forms its keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectAttention {
    /// Each subject's global queries every subject's global in the batch.
    #[default]
    Batch,
    /// Each subject attends only to its own other-modality global, so the
    /// attention output is that global unchanged.
    Degenerate,
}

/// Connectome-level alignment for one subject. Row `j` of `text2brain` and
/// column `j` of the attention/similarity matrices correspond to text
/// position `j + 1` (the token after `[CLS]`).
#[derive(Clone, Copy, Debug)]
pub struct ConnectomeAlignment {
    pub brain2text: Var,
    pub text2brain: Var,
    pub attn_b2t: Var,
    pub attn_t2b: Var,
    pub similarity: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SubjectAlignment {
    pub brain2text: Var,
    pub text2brain: Var,
    pub similarity: Var,
}

/// `softmax(q·kvᵀ/√D)·kv`, with masked keys excluded. Returns `(output, weights)`.
pub fn cross_attention(tape: &mut Tape, q: Var, kv: Var, key_mask: Option<&[bool]>) -> Result<(Var, Var)> {
    let dq = tape.value(q).cols();
    let dk = tape.value(kv).cols();
    if dq != dk {
        return Err(Error::shape(
            "cross_attention",
            format!("feature dims differ: {:?} vs {:?}", tape.shape(q), tape.shape(kv)),
        ));
    }
    let logits = tape.matmul_bt(q, kv)?;
    let logits = tape.scale(logits, 1.0 / (dq as f64).sqrt())?;
    let attn = tape.softmax_masked(logits, key_mask)?;
    let out = tape.matmul(attn, kv)?;
    Ok((out, attn))
}

/// Row-wise cosine similarity matrix `normalize(a)·normalize(b)ᵀ`.
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let a = tape.l2_normalize(a, NORMALIZE_EPS)?;
    let b = tape.l2_normalize(b, NORMALIZE_EPS)?;
    tape.matmul_bt(a, b)
}

/// Both cross-attention directions between `X_local` (N×D) and `V_local`
/// (M×D), plus the similarity matrix `S_cl` (N×M).
pub fn connectome_alignment(
    tape: &mut Tape,
    x_local: Var,
    v_local: Var,
    text_mask: &[bool],
) -> Result<ConnectomeAlignment> {
    if text_mask.len() != tape.value(v_local).rows() {
        return Err(Error::shape(
            "connectome_alignment",
            format!(
                "{} mask entries for text of shape {:?}",
                text_mask.len(),
                tape.shape(v_local)
            ),
        ));
    }
    let (brain2text, attn_b2t) = cross_attention(tape, x_local, v_local, Some(text_mask))?;
    let (text2brain, attn_t2b) = cross_attention(tape, v_local, x_local, None)?;
    let similarity = cosine_similarity(tape, brain2text, text2brain)?;
    Ok(ConnectomeAlignment {
        brain2text,
        text2brain,
        attn_b2t,
        attn_t2b,
        similarity,
    })
}

/// `(1+s)/2`, clamped to `[REMAP_FLOOR, 1]`.
fn remap(tape: &mut Tape, s: Var) -> Result<Var> {
    let shifted = tape.add_scalar(s, 1.0)?;
    let halved = tape.scale(shifted, 0.5)?;
    tape.clamp(halved, REMAP_FLOOR, 1.0)
}

/// `−mean_rows log(Σ_j softmax(logits_row)_j · weights_row_j)`.
fn weighted_similarity_term(tape: &mut Tape, logits: Var, weights: Var, key_mask: Option<&[bool]>) -> Result<Var> {
    let p = tape.softmax_masked(logits, key_mask)?;
    let pw = tape.mul(p, weights)?;
    let per_row = tape.sum_last(pw)?;
    let logs = tape.log(per_row)?;
    let mean = tape.mean(logs)?;
    tape.scale(mean, -1.0)
}

/// `L_cl = ½(L_b→t + L_t→b)` on an N×M similarity matrix. Masked text
/// columns are excluded from the brain-side softmax and from the text-side
/// average.
pub fn connectome_alignment_loss(tape: &mut Tape, s_cl: Var, text_mask: &[bool]) -> Result<Var> {
    let cols = tape.value(s_cl).cols();
    if tape.value(s_cl).rank() != 2 || text_mask.len() != cols {
        return Err(Error::shape(
            "connectome_alignment_loss",
            format!(
                "{} mask entries for S_cl of shape {:?}",
                text_mask.len(),
                tape.shape(s_cl)
            ),
        ));
    }
    let kept: Vec<usize> = (0..cols).filter(|&j| text_mask[j]).collect();
    if kept.is_empty() {
        return Err(Error::Contract("L_cl needs at least one unmasked token".into()));
    }
    let weights = remap(tape, s_cl)?;
    let b2t = weighted_similarity_term(tape, s_cl, weights, Some(text_mask))?;

    let st = tape.transpose(s_cl)?;
    let st = tape.select_rows(st, &kept)?;
    let wt = tape.transpose(weights)?;
    let wt = tape.select_rows(wt, &kept)?;
    let t2b = weighted_similarity_term(tape, st, wt, None)?;

    let total = tape.add(b2t, t2b)?;
    tape.scale(total, 0.5)
}

/// Subject-level cross-attention on the batch of globals (B×D each) and the
/// B×B similarity between the two outputs.
pub fn subject_alignment(
    tape: &mut Tape,
    x_global: Var,
    v_global: Var,
    mode: SubjectAttention,
) -> Result<SubjectAlignment> {
    if tape.shape(x_global) != tape.shape(v_global) {
        return Err(Error::shape(
            "subject_alignment",
            format!("{:?} vs {:?}", tape.shape(x_global), tape.shape(v_global)),
        ));
    }
    let (brain2text, text2brain) = match mode {
        SubjectAttention::Batch => (
            cross_attention(tape, x_global, v_global, None)?.0,
            cross_attention(tape, v_global, x_global, None)?.0,
        ),
        SubjectAttention::Degenerate => (v_global, x_global),
    };
    let similarity = cosine_similarity(tape, brain2text, text2brain)?;
    Ok(SubjectAlignment {
        brain2text,
        text2brain,
        similarity,
    })
}

/// Symmetric InfoNCE with matched pairs on the diagonal:
/// `½(CE over rows + CE over columns)` of `S_sl/τ`.
pub fn infonce_loss(tape: &mut Tape, s_sl: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.shape(s_sl).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(
            "infonce_loss",
            format!("S_sl must be square, got {shape:?}"),
        ));
    }
    let diag: Vec<usize> = (0..shape[0]).collect();
    let logits = tape.scale(s_sl, 1.0 / tau)?;
    let term = |tape: &mut Tape, z: Var| -> Result<Var> {
        let lp = tape.log_softmax(z)?;
        let matched = tape.gather(lp, &diag)?;
        let mean = tape.mean(matched)?;
        tape.scale(mean, -1.0)
    };
    let rows = term(tape, logits)?;
    let logits_t = tape.transpose(logits)?;
    let cols = term(tape, logits_t)?;
    let total = tape.add(rows, cols)?;
    tape.scale(total, 0.5)
}
