use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Plain SGD: `θ ← θ − lr·g` for every trainable parameter.
///
/// `grads` must name exactly the trainable parameters of `params`. A gradient
/// addressed to a frozen parameter is rejected since it means some caller
/// differentiated through a segment it should not update.
pub fn sgd_step(params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    for name in grads.keys() {
        let p = params.get(name)?;
        if p.frozen {
            return Err(Error::FrozenGradient(name.clone()));
        }
    }
    for (name, p) in params.iter() {
        if !p.frozen && !grads.contains_key(name) {
            return Err(Error::MissingGradient(name.to_string()));
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        g.expect_shape("sgd_step", p.value.shape())?;
        for (w, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

/// Central-difference gradient of `loss` with respect to every trainable scalar.
pub fn finite_diff_grad<F>(loss: F, params: &ParamSet, eps: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let len = work.tensor(&name)?.len();
        let mut grad = vec![0.0; len];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = work.tensor(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + eps;
            let plus = loss(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - eps;
            let minus = loss(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss at perturbed `{name}`[{i}]")));
            }
            *slot = (plus - minus) / (2.0 * eps);
        }
        let shape = work.tensor(&name)?.shape().to_vec();
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}
