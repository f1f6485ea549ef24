//! The full two-tower model: connectome encoder, report encoder, both
//! alignments and the classification head, evaluated one batch per tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    connectome_alignment, connectome_alignment_loss, infonce_loss, subject_alignment, ConnectomeAlignment,
    SubjectAttention, DEFAULT_TEMPERATURE,
};
use crate::connectome::{ConnectomeEncoder, InputTransform};
use crate::error::{Error, Result};
use crate::objective::{balanced_cross_entropy, total_loss, ClassWeights, ClassifierHead, LossFlags, LossTerms};
use crate::tensor::{ParamSet, Tape, Tensor, Var};
use crate::text::TextEncoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Region count N.
    pub regions: usize,
    /// Embedding width D.
    pub dim: usize,
    /// Transformer layers per encoder.
    pub layers: usize,
    pub heads: usize,
    /// Report length M_max, `[CLS]` included.
    pub max_len: usize,
    /// Classifier hidden width H; `None` means D.
    pub hidden: Option<usize>,
    pub region_embeddings: bool,
    pub input_transform: InputTransform,
    pub subject_attention: SubjectAttention,
    pub temperature: f64,
    pub use_image: bool,
    pub use_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            regions: 16,
            dim: 256,
            layers: 4,
            heads: 4,
            max_len: 64,
            hidden: None,
            region_embeddings: true,
            input_transform: InputTransform::default(),
            subject_attention: SubjectAttention::default(),
            temperature: DEFAULT_TEMPERATURE,
            use_image: true,
            use_text: true,
        }
    }
}

impl ModelConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("regions, dim and heads must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("classifier hidden width must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.use_image && !self.use_text {
            return Err(Error::Config("at least one modality must be enabled".into()));
        }
        Ok(())
    }

    /// Alignment losses need both modalities.
    pub fn is_bimodal(&self) -> bool {
        self.use_image && self.use_text
    }
}

/// One subject, ready for the encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectInput {
    /// Transformed N×N patch matrix.
    pub patches: Tensor,
    /// `M_max` token ids starting with `[CLS]`.
    pub token_ids: Vec<usize>,
    /// True on real tokens.
    pub mask: Vec<bool>,
    /// 0 = NC, 1 = MCI.
    pub label: usize,
}

impl SubjectInput {
    /// Mask over `V_local` rows (text positions after `[CLS]`).
    pub fn local_mask(&self) -> &[bool] {
        &self.mask[1..]
    }
}

/// Per-subject nodes recorded during a batch forward.
#[derive(Clone, Copy, Debug)]
pub struct SubjectTrace {
    pub x_global: Var,
    pub v_global: Var,
    pub alignment: Option<ConnectomeAlignment>,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub logits: Var,
    pub terms: LossTerms,
    pub loss: Var,
    pub subjects: Vec<SubjectTrace>,
    pub subject_similarity: Option<Var>,
}

/// Attention maps of one subject, for interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// N × (M_max−1), rows sum to one over real tokens.
    pub b2t: Tensor,
    /// (M_max−1) × N; rows for padded positions are meaningless.
    pub t2b: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
    pub brain: ConnectomeEncoder,
    pub text: TextEncoder,
    pub head: ClassifierHead,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let brain = ConnectomeEncoder::new(
            &mut params,
            config.regions,
            config.dim,
            config.layers,
            config.heads,
            config.region_embeddings,
            config.input_transform,
            rng,
        )?;
        let text = TextEncoder::new(
            &mut params,
            vocab_size,
            config.max_len,
            config.dim,
            config.layers,
            config.heads,
            rng,
        )?;
        let head = ClassifierHead::new(&mut params, config.dim, config.hidden_width(), rng);
        Ok(Model {
            config,
            vocab_size,
            params,
            brain,
            text,
            head,
        })
    }

    /// Records a batch forward on a tape that already has the parameters
    /// bound. Loss terms outside `flags`, or needing a disabled modality,
    /// are not computed.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        batch: &[&SubjectInput],
        weights: ClassWeights,
        flags: LossFlags,
    ) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let cfg = &self.config;
        let flags = LossFlags {
            use_cl: flags.use_cl && cfg.is_bimodal(),
            use_sl: flags.use_sl && cfg.is_bimodal(),
            use_cls: flags.use_cls,
        };
        let zero_global = tape.constant(Tensor::zeros(&[1, cfg.dim]))?;
        let mut subjects = Vec::with_capacity(batch.len());
        let mut cl_terms = Vec::new();
        for s in batch {
            let (x_local, x_global) = if cfg.use_image {
                let (l, g) = self.brain.encode_patches(tape, s.patches.clone())?;
                (Some(l), g)
            } else {
                (None, zero_global)
            };
            let (v_local, v_global) = if cfg.use_text {
                let (l, g) = self.text.encode(tape, &s.token_ids, &s.mask)?;
                (Some(l), g)
            } else {
                (None, zero_global)
            };
            let alignment = match (x_local, v_local) {
                (Some(x), Some(v)) if flags.use_cl => {
                    let a = connectome_alignment(tape, x, v, s.local_mask())?;
                    cl_terms.push(connectome_alignment_loss(tape, a.similarity, s.local_mask())?);
                    Some(a)
                }
                _ => None,
            };
            subjects.push(SubjectTrace {
                x_global,
                v_global,
                alignment,
            });
        }

        let xg: Vec<Var> = subjects.iter().map(|s| s.x_global).collect();
        let vg: Vec<Var> = subjects.iter().map(|s| s.v_global).collect();
        let xg = tape.concat(&xg, 0)?;
        let vg = tape.concat(&vg, 0)?;

        let mut terms = LossTerms::default();
        if !cl_terms.is_empty() {
            let rows = cl_terms
                .iter()
                .map(|&t| tape.reshape(t, &[1, 1]))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&rows, 0)?;
            terms.cl = Some(tape.mean(stacked)?);
        }
        let mut subject_similarity = None;
        if flags.use_sl {
            let sa = subject_alignment(tape, xg, vg, cfg.subject_attention)?;
            terms.sl = Some(infonce_loss(tape, sa.similarity, cfg.temperature)?);
            subject_similarity = Some(sa.similarity);
        }
        let logits = self.head.forward(tape, xg, vg)?;
        if flags.use_cls {
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            terms.cls = Some(balanced_cross_entropy(tape, logits, &labels, weights)?);
        }
        let loss = total_loss(tape, &terms, flags)?;
        Ok(BatchOutput {
            logits,
            terms,
            loss,
            subjects,
            subject_similarity,
        })
    }

    /// Class logits for each subject (inference, no gradients).
    pub fn predict_logits(&self, inputs: &[SubjectInput]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(inputs.len());
        for s in inputs {
            let mut tape = Tape::inference();
            tape.bind_params(&self.params)?;
            let (_, xg) = self.globals(&mut tape, s)?;
            let (_, vg) = self.text_globals(&mut tape, s)?;
            let logits = self.head.forward(&mut tape, xg, vg)?;
            let row = tape.value(logits).row(0);
            out.push([row[0], row[1]]);
        }
        Ok(out)
    }

    /// Argmax predictions (ties go to NC).
    pub fn predict(&self, inputs: &[SubjectInput]) -> Result<Vec<usize>> {
        Ok(self
            .predict_logits(inputs)?
            .into_iter()
            .map(|z| usize::from(z[1] > z[0]))
            .collect())
    }

    /// Connectome-level attention maps for one subject. Needs both modalities.
    pub fn attention_maps(&self, input: &SubjectInput) -> Result<AttentionMaps> {
        if !self.config.is_bimodal() {
            return Err(Error::Config("attention maps need both modalities".into()));
        }
        let mut tape = Tape::inference();
        tape.bind_params(&self.params)?;
        let (x_local, _) = self.globals(&mut tape, input)?;
        let (v_local, _) = self.text_globals(&mut tape, input)?;
        let a = connectome_alignment(&mut tape, x_local, v_local, input.local_mask())?;
        Ok(AttentionMaps {
            b2t: tape.value(a.attn_b2t).clone(),
            t2b: tape.value(a.attn_t2b).clone(),
        })
    }

    fn globals(&self, tape: &mut Tape, s: &SubjectInput) -> Result<(Var, Var)> {
        if self.config.use_image {
            self.brain.encode_patches(tape, s.patches.clone())
        } else {
            let z = tape.constant(Tensor::zeros(&[1, self.config.dim]))?;
            Ok((z, z))
        }
    }

    fn text_globals(&self, tape: &mut Tape, s: &SubjectInput) -> Result<(Var, Var)> {
        if self.config.use_text {
            self.text.encode(tape, &s.token_ids, &s.mask)
        } else {
            let z = tape.constant(Tensor::zeros(&[1, self.config.dim]))?;
            Ok((z, z))
        }
    }
}
