//! Central-difference gradient checking, used by the engine's own tests and
//! exported so downstream crates can verify full losses end to end.

use ndarray::ArrayD;

use crate::tensor::{backward, Tensor};

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_diff<FN>(f: &mut FN, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64>
where
    FN: FnMut(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[&idx];
        xp[&idx] = orig + eps;
        let fp = f(&xp);
        xp[&idx] = orig - eps;
        let fm = f(&xp);
        xp[&idx] = orig;
        g[&idx] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Largest absolute difference between two gradients, relative to the
/// largest magnitude present in either. Returns 0 for two all-zero arrays.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        max_diff = max_diff.max((a - n).abs());
        max_mag = max_mag.max(a.abs()).max(n.abs());
    }
    if max_mag == 0.0 {
        return 0.0;
    }
    max_diff / max_mag
}

/// Checks the reverse-mode gradient of `f` against central differences for
/// every input. `f` receives leaf tensors in the order of `inputs` and must
/// return a scalar tensor. Returns the worst relative error seen.
pub fn check_gradients<FN>(f: FN, inputs: &[ArrayD<f64>], eps: f64) -> f64
where
    FN: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::leaf(a.clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.len(), 1, "check_gradients needs a scalar output");
    let grads = backward(&out);

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&leaves[i])
            .map(|g| g.data().clone())
            .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        // Leaves, not constants: `f` may itself call backward (for checking
        // gradient-of-gradient objectives), which needs a live graph.
        let mut eval = |xi: &ArrayD<f64>| -> f64 {
            let mut vars: Vec<Tensor<f64>> =
                inputs.iter().map(|a| Tensor::leaf(a.clone())).collect();
            vars[i] = Tensor::leaf(xi.clone());
            f(&vars).item()
        };
        let numeric = finite_diff(&mut eval, x, eps);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    worst
}
