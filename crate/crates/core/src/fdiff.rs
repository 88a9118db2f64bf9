//! Central finite differences over a [`ParameterStore`]: the ground-truth
//! oracle the tape gradients are checked against. Slow on purpose — two loss
//! evaluations per coordinate — and never used in training.

use std::collections::BTreeMap;

use crate::params::ParameterStore;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FdiffError {
    #[error("loss was non-finite at parameter {name}[{index}]")]
    NonFiniteLoss { name: String, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-coordinate `(f(θ+h) − f(θ−h)) / 2h` for every parameter in the store.
///
/// `loss_fn` must be a deterministic scalar function of the store.
pub fn finite_diff_grad<F>(
    loss_fn: F,
    params: &ParameterStore,
    h: f64,
) -> Result<BTreeMap<String, Tensor>, FdiffError>
where
    F: Fn(&ParameterStore) -> Result<f64, TensorError>,
{
    let mut out = BTreeMap::new();
    let mut work = params.clone();
    for name in params.names() {
        let n = params.get(&name).unwrap().numel();
        let shape = params.get(&name).unwrap().shape().to_vec();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let base = params.get(&name).unwrap().data()[i];

            work.get_mut(&name).unwrap().data_mut()[i] = base + h;
            let up = loss_fn(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = base - h;
            let down = loss_fn(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = base;

            if !up.is_finite() || !down.is_finite() {
                return Err(FdiffError::NonFiniteLoss { name, index: i });
            }
            grad[i] = (up - down) / (2.0 * h);
        }
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// Worst relative disagreement between two gradient maps, with a small floor
/// on the denominator so exactly-zero gradients compare by absolute error.
pub fn max_rel_err(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ga) in a {
        let gb = &b[name];
        for (x, y) in ga.data().iter().zip(gb.data()) {
            let denom = x.abs().max(y.abs()).max(1e-4);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
