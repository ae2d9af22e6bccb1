//! Finite-difference verification of reverse-mode gradients.
//!
//! Used by unit tests across the crate: any differentiable construction can
//! be checked end to end by comparing its backward pass against central
//! differences in f64.

use ndarray::ArrayD;

use super::{Graph, Tensor};

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
///
/// `f` rebuilds the computation from scratch on each call; it must be a pure
/// function of the leaf values. The relative error is |a - n| scaled by
/// max(|a|, |n|, 1e-8) so near-zero gradients are compared absolutely.
pub fn max_rel_err<F>(inputs: &[ArrayD<f64>], f: F, step: f64) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Tensor<'g, f64>]) -> Tensor<'g, f64>,
{
    let analytic: Vec<ArrayD<f64>> = {
        let g = Graph::new();
        let leaves: Vec<_> = inputs.iter().map(|v| g.param(v.clone())).collect();
        let out = f(&g, &leaves);
        assert_eq!(out.shape(), &[] as &[usize], "gradcheck target must be scalar");
        let grads = g.backward(out);
        leaves
            .iter()
            .map(|t| {
                let g = grads
                    .get(*t)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(t.shape().to_vec()));
                g.as_standard_layout().into_owned()
            })
            .collect()
    };

    let eval = |points: &[ArrayD<f64>]| -> f64 {
        let g = Graph::new();
        let leaves: Vec<_> = points.iter().map(|v| g.param(v.clone())).collect();
        f(&g, &leaves).scalar_value()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.as_slice().unwrap()[j];
            probe[i].as_slice_mut().unwrap()[j] = orig + step;
            let up = eval(&probe);
            probe[i].as_slice_mut().unwrap()[j] = orig - step;
            let down = eval(&probe);
            probe[i].as_slice_mut().unwrap()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].as_slice().unwrap()[j];
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

/// Panics if any gradient element deviates from its finite-difference
/// estimate by more than `tol` relative error.
pub fn assert_gradients<F>(inputs: &[ArrayD<f64>], f: F, step: f64, tol: f64)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Tensor<'g, f64>]) -> Tensor<'g, f64>,
{
    let err = max_rel_err(inputs, f, step);
    assert!(
        err <= tol,
        "gradient check failed: max relative error {err:.3e} > {tol:.3e}"
    );
}
