use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, params: &[Tensor], grad: bool) -> Result<(Tape, Vec<Var>, Vec<Var>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut tape = if grad { Tape::new() } else { Tape::inference() };
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let outs = f(&mut tape, &vars)?;
    if let Some(&bad) = outs.iter().find(|&&o| tape.value(o).numel() != 1) {
        return Err(Error::Contract(format!(
            "gradient check needs scalar functions, got shape {:?}",
            tape.shape(bad)
        )));
    }
    Ok((tape, vars, outs))
}

fn scalar<F>(f: F) -> impl Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    move |tape: &mut Tape, vars: &[Var]| Ok(vec![f(tape, vars)?])
}

/// Central-difference gradients of several scalar outputs of `f` at once,
/// indexed `[output][param]`.
pub fn numeric_gradients<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<Vec<Tensor>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let mut work = params.to_vec();
    let mut out: Vec<Vec<Tensor>> = Vec::new();
    let eval = |work: &[Tensor]| -> Result<Vec<f64>> {
        let (tape, _, ys) = evaluate(&f, work, false)?;
        Ok(ys.iter().map(|&y| tape.value(y).item()).collect())
    };
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            if out.is_empty() {
                out = vec![params.iter().map(|t| Tensor::zeros(t.shape())).collect(); plus.len()];
            }
            for (k, (a, b)) in plus.iter().zip(&minus).enumerate() {
                out[k][p].data_mut()[i] = (a - b) / (2.0 * step);
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function of `params`.
pub fn numeric_gradient<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut all = numeric_gradients(scalar(f), params, step)?;
    Ok(if all.is_empty() {
        params.iter().map(|t| Tensor::zeros(t.shape())).collect()
    } else {
        all.swap_remove(0)
    })
}

/// Maximum over all parameter entries of
/// `|analytic − central difference| / max(1, |analytic|)`.
///
/// A non-finite intermediate anywhere in the function surfaces as
/// [`Error::NonFinite`] naming the primitive and node that produced it.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(check(&scalar(f), params, step, None)?[0])
}

/// [`grad_check`] for every output of `f`, sharing one finite-difference
/// sweep. Returns one worst error per output.
pub fn grad_check_many<F>(f: F, params: &[Tensor], step: f64, fault: Option<OpKind>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    check(&f, params, step, fault)
}

/// [`grad_check`] with the adjoint of every `fault` node negated in the
/// analytic pass. Used to confirm that the check notices a broken primitive.
pub fn grad_check_with_fault<F>(f: F, params: &[Tensor], step: f64, fault: OpKind) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(check(&scalar(f), params, step, Some(fault))?[0])
}

fn check<F>(f: &F, params: &[Tensor], step: f64, fault: Option<OpKind>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
{
    let (mut tape, vars, outs) = evaluate(f, params, true)?;
    if let Some(kind) = fault {
        tape.inject_adjoint_fault(kind);
    }
    let numeric = numeric_gradients(f, params, step)?;
    let mut worst = vec![0.0f64; outs.len()];
    for (k, &out) in outs.iter().enumerate() {
        let grads = tape.backward(out)?;
        for (p, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(&tape, *v);
            for (a, n) in analytic.data().iter().zip(numeric[k][p].data()) {
                worst[k] = worst[k].max((a - n).abs() / a.abs().max(1.0));
            }
        }
    }
    Ok(worst)
}
