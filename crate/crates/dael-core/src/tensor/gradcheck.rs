//! Finite-difference verification of autodiff gradients (64-bit mode).

use crate::error::Result;

use super::{Graph, Tensor};

/// Compares autodiff gradients of `f` against central differences
/// `(f(p+h) - f(p-h)) / 2h` for every element of every parameter, returning
/// the maximum relative error `|a - n| / max(1e-8, |a| + |n|)`.
///
/// `f` must build a scalar loss on the supplied graph from the given
/// parameter tensors; it is re-evaluated with perturbed constant tensors for
/// the numeric side, so it must not capture the parameters elsewhere.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    assert!(h > 0.0, "grad_check: step must be positive");

    for p in params {
        p.zero_grad();
    }
    let mut graph = Graph::new();
    let loss = f(&mut graph, params)?;
    graph.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.take_grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        Ok(f(&mut g, ps)?.item())
    };

    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.numel() {
            let perturbed = |delta: f64| -> Vec<Tensor<f64>> {
                params
                    .iter()
                    .enumerate()
                    .map(|(j, q)| {
                        let mut vals = q.values().to_vec();
                        if j == pi {
                            vals[e] += delta;
                        }
                        Tensor::from_vec(q.shape().to_vec(), vals)
                    })
                    .collect()
            };
            let fp = eval(&perturbed(h))?;
            let fm = eval(&perturbed(-h))?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][e];
            let err = (a - numeric).abs() / 1e-8f64.max(a.abs() + numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
