//! Central finite-difference gradients, the independent oracle that the tape
//! is checked against. Deliberately knows nothing about tapes: it only probes
//! a black-box scalar function of the parameters, at f64.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::tensor::{ParamId, Tensor};

pub type ParamMap<E> = BTreeMap<ParamId, Tensor<E>>;

#[derive(Debug, Error)]
pub enum FiniteDiffError {
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("no parameters to differentiate")]
    EmptyParams,
    #[error("function failed at `{param}`[{index}]: {message}")]
    EvalFailed {
        param: ParamId,
        index: usize,
        message: String,
    },
    #[error("function returned non-finite value {value} at `{param}`[{index}]")]
    NonFinite {
        param: ParamId,
        index: usize,
        value: f64,
    },
}

/// Central differences: `g[i] = (f(θ + ε·eᵢ) − f(θ − ε·eᵢ)) / 2ε` for every
/// coordinate of every parameter. O(#coords) evaluations of `f` — strictly an
/// oracle for small models, never a training path.
pub fn finite_diff_gradient<F, Er>(
    mut f: F,
    params: &ParamMap<f64>,
    epsilon: f64,
) -> Result<ParamMap<f64>, FiniteDiffError>
where
    F: FnMut(&ParamMap<f64>) -> Result<f64, Er>,
    Er: fmt::Display,
{
    if epsilon <= 0.0 {
        return Err(FiniteDiffError::NonPositiveEpsilon(epsilon));
    }
    if params.is_empty() {
        return Err(FiniteDiffError::EmptyParams);
    }

    let mut work = params.clone();
    let mut grads = ParamMap::new();
    let names: Vec<ParamId> = params.keys().cloned().collect();

    for name in &names {
        let n = params[name].elem_count();
        let mut g = Tensor::zeros(params[name].shape());
        for index in 0..n {
            let orig = work[name].data()[index];

            let probe = |value: f64, f: &mut F, work: &mut ParamMap<f64>| {
                work.get_mut(name).expect("probed param exists").data_mut()[index] = value;
                let out = f(work).map_err(|e| FiniteDiffError::EvalFailed {
                    param: name.clone(),
                    index,
                    message: e.to_string(),
                })?;
                if !out.is_finite() {
                    return Err(FiniteDiffError::NonFinite {
                        param: name.clone(),
                        index,
                        value: out,
                    });
                }
                Ok(out)
            };

            let up = probe(orig + epsilon, &mut f, &mut work)?;
            let down = probe(orig - epsilon, &mut f, &mut work)?;
            work.get_mut(name).expect("probed param exists").data_mut()[index] = orig;

            g.data_mut()[index] = (up - down) / (2.0 * epsilon);
        }
        grads.insert(name.clone(), g);
    }
    Ok(grads)
}
