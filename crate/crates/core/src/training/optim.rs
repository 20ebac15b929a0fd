use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments for every parameter of a store (frozen ones stay zero).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<R> {
    pub cfg: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<R>) -> Self {
        let zeros = || -> Vec<Vec<R>> {
            store
                .iter()
                .map(|(_, p)| vec![R::zero(); p.value.numel()])
                .collect()
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One decoupled-decay update: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
    /// `grads[i]` belongs to parameter `i`; frozen parameters are skipped. All
    /// gradients are checked before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &[Option<Tensor<R>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract("gradient list does not match the parameter store".into()));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::Shape {
                        op: "adamw",
                        lhs: p.value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name)));
                }
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (R::lit(c.beta1), R::lit(c.beta2));
        let (one_b1, one_b2) = (R::lit(1.0 - c.beta1), R::lit(1.0 - c.beta2));
        let bc1 = R::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = R::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr_r, eps, wd) = (R::lit(lr), R::lit(c.eps), R::lit(c.weight_decay));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let theta = param.value.data_mut();
            let zero = R::zero();
            for i in 0..theta.len() {
                let gi = grads[k].as_ref().map_or(zero, |g| g.data()[i]);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] - lr_r * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all present gradients.
pub fn global_norm<R: Real>(grads: &[Option<Tensor<R>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<R: Real>(grads: &mut [Option<Tensor<R>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = R::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}
