//! Structural connectivity input and the subnetwork-token encoder.
//!
//! Row `i` of an SC matrix (region `i`'s fiber counts to every region) is one
//! token. Tokens are linearly embedded, shifted by a learned per-region
//! embedding, prefixed with a class token and run through pre-norm
//! transformer layers. Output row 0 is the global representation, rows
//! `1..=N` the local ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_weight, Linear, TransformerLayer};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

/// Asymmetry tolerated (and averaged away) when constructing a matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

const DESTRIEUX_LABELS: [&str; 24] = [
    "G_and_S_cingul-Ant",
    "G_and_S_cingul-Mid-Ant",
    "G_and_S_cingul-Mid-Post",
    "G_cingul-Post-dorsal",
    "G_cingul-Post-ventral",
    "G_front_middle",
    "G_oc-temp_med-Parahip",
    "G_pariet_inf-Angular",
    "G_pariet_inf-Supramar",
    "G_parietal_sup",
    "G_precuneus",
    "G_temporal_middle",
    "G_temp_sup-Lateral",
    "Pole_temporal",
    "S_subparietal",
    "S_cingul-Marginalis",
    "S_parieto_occipital",
    "S_temporal_sup",
    "G_insular_short",
    "G_front_sup",
    "G_occipital_middle",
    "G_postcentral",
    "G_precentral",
    "S_calcarine",
];

/// Atlas-style region labels; alternates hemispheres and falls back to
/// numbered names past the built-in list.
pub fn default_region_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let hemi = if i % 2 == 0 { "lh" } else { "rh" };
            match DESTRIEUX_LABELS.get(i / 2) {
                Some(label) => format!("{hemi}.{label}"),
                None => format!("{hemi}.region_{}", i / 2),
            }
        })
        .collect()
}

/// Symmetric, non-negative, zero-diagonal matrix of fiber counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SCMatrix {
    values: Tensor,
    region_names: Vec<String>,
}

impl SCMatrix {
    /// Validates the matrix invariants. Asymmetries up to
    /// [`SYMMETRY_TOLERANCE`] are averaged out; anything larger is an error.
    pub fn new(values: Tensor, region_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] != values.shape()[1] {
            return Err(Error::Validation(format!(
                "SC matrix must be square, got shape {:?}",
                values.shape()
            )));
        }
        let n = values.shape()[0];
        if region_names.len() != n {
            return Err(Error::Validation(format!(
                "{} region names for a {n}x{n} matrix",
                region_names.len()
            )));
        }
        let mut values = values;
        for i in 0..n {
            for j in 0..n {
                let v = values.at(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "entry ({i},{j}) = {v} is negative or non-finite"
                    )));
                }
            }
            if values.at(i, i) != 0.0 {
                return Err(Error::Validation(format!(
                    "diagonal entry ({i},{i}) = {} must be zero",
                    values.at(i, i)
                )));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (values.at(i, j), values.at(j, i));
                if (a - b).abs() > SYMMETRY_TOLERANCE {
                    return Err(Error::Validation(format!("asymmetric entry ({i},{j}): {a} vs {b}")));
                }
                if a != b {
                    let m = 0.5 * (a + b);
                    values.data_mut()[i * n + j] = m;
                    values.data_mut()[j * n + i] = m;
                }
            }
        }
        Ok(SCMatrix { values, region_names })
    }

    pub fn with_default_names(values: Tensor) -> Result<Self> {
        let n = values.shape().first().copied().unwrap_or(0);
        SCMatrix::new(values, default_region_names(n))
    }

    pub fn region_count(&self) -> usize {
        self.region_names.len()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn region_names(&self) -> &[String] {
        &self.region_names
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.at(i, j)
    }

    /// Sum of region `i`'s connections.
    pub fn strength(&self, i: usize) -> f64 {
        self.values.row(i).iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputTransform {
    /// `log(1 + x)` followed by whole-matrix standardization.
    #[default]
    LogStandardize,
    Raw,
}

/// Subnetwork patches: row `i` is region `i`'s transformed connectivity profile.
pub fn patchify(sc: &SCMatrix, transform: InputTransform) -> Tensor {
    let mut out = sc.values().clone();
    if transform == InputTransform::Raw {
        return out;
    }
    let data = out.data_mut();
    data.iter_mut().for_each(|v| *v = v.ln_1p());
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // A constant matrix has no spread to normalize; centring alone maps it to zeros.
    let denom = if std > 1e-12 { std } else { 1.0 };
    data.iter_mut().for_each(|v| *v = (*v - mean) / denom);
    out
}

#[derive(Clone, Debug)]
pub struct ConnectomeEncoder {
    pub regions: usize,
    pub dim: usize,
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub region_embed: Option<ParamId>,
    pub layers: Vec<TransformerLayer>,
    pub transform: InputTransform,
}

impl ConnectomeEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        regions: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        region_embeddings: bool,
        transform: InputTransform,
        rng: &mut R,
    ) -> Result<Self> {
        if regions == 0 || dim == 0 {
            return Err(Error::Config("connectome encoder needs N ≥ 1 and D ≥ 1".into()));
        }
        let patch_embed = Linear::new(params, "brain.patch_embed", regions, dim, rng);
        let class_token = params.add("brain.class_token", init_weight(rng, &[dim]), false);
        let region_embed =
            region_embeddings.then(|| params.add("brain.region_embed", init_weight(rng, &[regions, dim]), false));
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(params, &format!("brain.layers.{l}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(ConnectomeEncoder {
            regions,
            dim,
            patch_embed,
            class_token,
            region_embed,
            layers,
            transform,
        })
    }

    /// `[class_token; patch_embed(patches) + region_embed]`, shape `(N+1)×D`.
    pub fn embed_patches(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        if shape != [self.regions, self.regions] {
            return Err(Error::Config(format!(
                "encoder expects {n}x{n} patches, got {shape:?}",
                n = self.regions
            )));
        }
        let mut tokens = self.patch_embed.forward(tape, patches)?;
        if let Some(re) = self.region_embed {
            tokens = tape.add(tokens, tape.param(re))?;
        }
        let cls = tape.reshape(tape.param(self.class_token), &[1, self.dim])?;
        tape.concat(&[cls, tokens], 0)
    }

    /// Runs the patch tensor through embedding and every layer; returns
    /// `(X_local, X_global)`.
    pub fn encode_patches(&self, tape: &mut Tape, patches: Tensor) -> Result<(Var, Var)> {
        let p = tape.constant(patches)?;
        let mut h = self.embed_patches(tape, p)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, None)?;
        }
        let global = tape.select_rows(h, &[0])?;
        let local_idx: Vec<usize> = (1..=self.regions).collect();
        let local = tape.select_rows(h, &local_idx)?;
        Ok((local, global))
    }

    pub fn encode(&self, tape: &mut Tape, sc: &SCMatrix) -> Result<(Var, Var)> {
        if sc.region_count() != self.regions {
            return Err(Error::Config(format!(
                "encoder built for N={}, matrix has N={}",
                self.regions,
                sc.region_count()
            )));
        }
        self.encode_patches(tape, patchify(sc, self.transform))
    }
}
