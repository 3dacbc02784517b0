//! Adam optimizer over [`Param`] handles.

use ndarray::ArrayD;

use crate::nn::Param;
use crate::scalar::Scalar;
use crate::tensor::Gradients;

/// Adam with bias correction. Moment buffers live here, indexed in the same
/// order as the parameter list, so construction order matters for exact
/// reproducibility of checkpoints.
pub struct Adam<F: Scalar> {
    params: Vec<Param<F>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: Vec<Param<F>>, lr: f64, betas: (f64, f64)) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            params,
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update from the given gradients. Parameters without a
    /// gradient entry are left untouched, including their moments.
    pub fn step(&mut self, grads: &Gradients<F>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.wrt(&p.value()) else {
                continue;
            };
            // Moments are kept in f64 regardless of the model dtype; the
            // update is rounded back once at the end.
            let g64 = g.data().mapv(|x| x.to_f64());
            self.m[i] = &self.m[i] * self.beta1 + &g64 * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &(&g64 * &g64) * (1.0 - self.beta2);
            let mhat = &self.m[i] / bc1;
            let vhat = &self.v[i] / bc2;
            let cur = p.data().mapv(|x| x.to_f64());
            let upd = cur - self.lr * &mhat / (vhat.mapv(f64::sqrt) + self.eps);
            p.set_data(upd.mapv(F::from_f64));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::backward;
    use ndarray::IxDyn;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With any nonzero gradient, the bias-corrected first Adam step is
        // lr * g / (|g| + eps), i.e. almost exactly lr in magnitude.
        let mut store = ParamStore::<f64>::new();
        let p = store.create("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(store.trainable(), 0.1, (0.9, 0.999));
        let y = p.value().mul_scalar(3.0).sum_all();
        let g = backward(&y);
        opt.step(&g);
        let got = p.data()[[0]];
        assert!((got - (5.0 - 0.1)).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let p = store.create("x", ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let mut opt = Adam::new(store.trainable(), 0.05, (0.9, 0.999));
        for _ in 0..500 {
            let x = p.value();
            let loss = x.mul(&x).sum_all();
            let g = backward(&loss);
            opt.step(&g);
        }
        assert!(p.data()[[0]].abs() < 0.05);
    }
}
