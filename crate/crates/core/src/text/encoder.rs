use rand::Rng;

use super::vocab::CLS_ID;
use crate::error::{Error, Result};
use crate::nn::{init_weight, TransformerLayer};
use crate::tensor::{ParamId, ParamSet, Tape, Var};

/// Word embeddings + learned positions + pre-norm transformer layers.
/// Output at the `[CLS]` position is `V_global`; positions `1..M_max` are
/// `V_local` with padded rows zeroed.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Config("M_max must leave room for [CLS] and one token".into()));
        }
        let token_embed = params.add("text.token_embed", init_weight(rng, &[vocab_size, dim]), false);
        let pos_embed = params.add("text.pos_embed", init_weight(rng, &[max_len, dim]), false);
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(params, &format!("text.layers.{l}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            vocab_size,
            max_len,
            dim,
            token_embed,
            pos_embed,
            layers,
        })
    }

    /// Returns `(V_local: (M_max−1)×D, V_global: 1×D)`.
    pub fn encode(&self, tape: &mut Tape, token_ids: &[usize], mask: &[bool]) -> Result<(Var, Var)> {
        if token_ids.len() != self.max_len || mask.len() != self.max_len {
            return Err(Error::shape(
                "encode_text",
                format!(
                    "expected {} ids and mask entries, got {} and {}",
                    self.max_len,
                    token_ids.len(),
                    mask.len()
                ),
            ));
        }
        if let Some(&bad) = token_ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if token_ids[0] != CLS_ID || !mask[0] {
            return Err(Error::Validation("sequence must start with an unmasked [CLS]".into()));
        }
        let tok = tape.embedding(tape.param(self.token_embed), token_ids)?;
        let h = tape.add(tok, tape.param(self.pos_embed))?;
        let mut h = h;
        for layer in &self.layers {
            h = layer.forward(tape, h, Some(mask))?;
        }
        let global = tape.select_rows(h, &[0])?;
        let rest: Vec<usize> = (1..self.max_len).collect();
        let local = tape.select_rows(h, &rest)?;
        let local = tape.zero_rows(local, &mask[1..])?;
        Ok((local, global))
    }
}
