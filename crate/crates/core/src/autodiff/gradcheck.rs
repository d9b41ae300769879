//! Central finite-difference check of reverse-mode gradients.

use super::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Maximum relative error between autodiff and finite-difference gradients of
/// a scalar function over every coordinate of every input.
///
/// The relative error of one coordinate is
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`, with
/// `g_fd = (f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), track)).collect();
        let out = f(&mut g, &vars)?;
        contract!(
            g.value(out).is_scalar(),
            "grad_check needs a scalar-valued function"
        );
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let plus = eval(&probe, false).map(|(g, _, o)| g.value(o).item())?;
            probe[i].data_mut()[j] = x0 - eps;
            let minus = eval(&probe, false).map(|(g, _, o)| g.value(o).item())?;
            probe[i].data_mut()[j] = x0;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[i].data()[j];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
