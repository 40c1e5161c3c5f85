//! Adam (supervised pre-training) and plain SGD (policy-gradient updates).

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

fn check_step<F: Real>(params: &ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
    ensure!(lr > 0.0 && lr.is_finite(), Invalid, "learning rate must be positive, got {lr}");
    ensure!(grads.tensors().len() == params.len(), Shape, "gradient/parameter count mismatch");
    for (id, g) in params.ids().zip(grads.tensors()) {
        ensure!(
            g.shape() == params.get(id).shape(),
            Shape,
            "gradient shape {:?} != parameter {} shape {:?}",
            g.shape(),
            params.name(id),
            params.get(id).shape()
        );
    }
    ensure!(grads.all_finite(), NonFinite, "non-finite gradient; update aborted");
    Ok(())
}

/// Plain stochastic gradient descent: `p <- p - lr * g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub step: u64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr, step: 0 }
    }

    pub fn step<F: Real>(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
        check_step(params, grads, self.lr)?;
        let lr = F::from_f64(self.lr);
        for (id, g) in params.ids().collect::<Vec<_>>().into_iter().zip(grads.tensors()) {
            for (p, gi) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= lr * *gi;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) -> Result<()> {
        check_step(params, grads, self.lr)?;
        ensure!(self.m.len() == params.len(), Shape, "optimizer state does not match parameters");
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let one = F::ONE;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        // Folded bias correction: lr_t = lr * sqrt(c2) / c1, eps_t = eps * sqrt(c2).
        let lr_t = F::from_f64(self.lr * c2.sqrt() / c1);
        let eps_t = F::from_f64(self.eps * c2.sqrt());
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.tensors()[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= lr_t * m[i] / (v[i].sqrt() + eps_t);
            }
        }
        Ok(())
    }
}
