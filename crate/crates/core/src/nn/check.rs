//! Finite-difference gradient verification.
//!
//! The correctness oracle for all training: analytic gradients from the
//! graph are compared against central differences in f64. Large inputs are
//! subsampled deterministically, never below 200 coordinates.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const MIN_COORDS: usize = 200;

/// Builds a scalar loss from parameter leaves. The closure is invoked
/// repeatedly with perturbed copies of `inputs`, so it must be a pure
/// function of them.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Numeric(format!("eps {eps} outside [1e-6, 1e-4]")));
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numeric("non-finite loss".to_string()));
    }
    let grads = g.backward(loss)?;

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let stride = (total / MIN_COORDS).max(1);

    let mut max_rel = 0.0f64;
    let mut flat = 0usize;
    for (t_idx, tensor) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[t_idx]);
        for coord in 0..tensor.len() {
            let global = flat + coord;
            if global % stride != 0 {
                continue;
            }
            let a = analytic.map_or(0.0, |t| t.data()[coord]);
            let mut plus = inputs.to_vec();
            plus[t_idx].data_mut()[coord] += eps;
            let mut minus = inputs.to_vec();
            minus[t_idx].data_mut()[coord] -= eps;
            let n = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            if !n.is_finite() {
                return Err(Error::Numeric("non-finite finite difference".to_string()));
            }
            // Floor keeps central-difference roundoff (~1e-10 absolute) from
            // registering as relative error on near-zero gradients while a
            // genuinely wrong small gradient still trips the tolerance.
            let denom = a.abs().max(n.abs()).max(1e-3);
            let rel = (a - n).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
        flat += tensor.len();
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn randn(shape: Vec<usize>, salt: u64) -> Tensor<f64> {
        let mut stream = rng::derive(99, "gradcheck", salt);
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| stream.gen_range(-1.0..1.0))
            .collect::<Vec<f64>>();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn affine_gradients_are_tight() {
        let x = randn(vec![3, 4], 1);
        let w = randn(vec![4, 5], 2);
        let b = randn(vec![5], 3);
        let err = grad_check(
            |g, ids| {
                let y = g.affine(ids[0], ids[1], ids[2])?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            },
            &[x, w, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let x = randn(vec![2], 4);
        assert!(grad_check(|g, ids| Ok(g.sum(ids[0])), &[x], 1e-2).is_err());
    }
}
