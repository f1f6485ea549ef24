use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moment estimates per parameter, in `ParamSet` order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. Weight decay is decoupled (`θ ← θ − lr·wd·θ`) and only
/// applied to parameters flagged as decaying.
pub fn adamw_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimizerState, opt: &AdamW) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {}/{} moments",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        let i = id.index();
        if g.shape() != params.get(id).shape() || state.m[i].shape() != g.shape() || state.v[i].shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{}: gradient {:?} for parameter {:?}",
                    params.name(id),
                    g.shape(),
                    params.get(id).shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let decay = if params.decays(id) {
            opt.lr * opt.weight_decay
        } else {
            0.0
        };
        let theta = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in theta
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *p -= decay * *p;
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}
