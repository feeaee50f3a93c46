use crate::error::{Error, Result};
use crate::model::ModelParams;

/// `base * (1 - iter / max_iters)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iters: usize, power: f64) -> Result<f64> {
    if iter > max_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond max_iters {max_iters}"
        )));
    }
    if max_iters == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - iter as f64 / max_iters as f64).powf(power))
}

/// SGD with classic momentum: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: ModelParams,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    /// Applies one update. Non-finite gradients leave both parameters and
    /// momentum untouched and return `Ok(false)`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<bool> {
        if params.config() != grads.config() {
            return Err(Error::Shape("gradient buffers do not match parameters".into()));
        }
        if grads.buffers().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            log::warn!("non-finite gradient; skipping update");
            return Ok(false);
        }
        let mu = self.momentum;
        for ((p, v), g) in params
            .buffers_mut()
            .into_iter()
            .zip(self.velocity.buffers_mut())
            .zip(grads.buffers())
        {
            for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DomainHead, ModelConfig};

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            in_channels: 1,
            encoder_channels: vec![1],
            encoder_strides: vec![1],
            activation: Default::default(),
            embed_dim: 1,
            domains: vec![DomainHead {
                id: "a".into(),
                labels: vec!["x".into(), "y".into()],
            }],
        };
        ModelParams::random(cfg, 1).unwrap()
    }

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0.001, 0, 100, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(0.001, 100, 100, 0.9).unwrap(), 0.0);
        let half = poly_lr(0.001, 50, 100, 0.9).unwrap();
        assert!((half - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!(poly_lr(0.001, 101, 100, 0.9).is_err());
    }

    #[test]
    fn sgd_plain_and_momentum() {
        let p0 = params();
        let mut g = p0.zeros_like();
        for b in g.buffers_mut() {
            b.iter_mut().for_each(|v| *v = 0.5);
        }
        // momentum 0: p - lr * g
        let mut p = p0.clone();
        Sgd::new(&p, 0.0).step(&mut p, &g, 0.1).unwrap();
        for (a, b) in p.buffers().iter().zip(p0.buffers()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - (y - 0.05)).abs() < 1e-15);
            }
        }
        // two steps, momentum 0.9: v1 = g, v2 = 0.9 g + g; p2 = p0 - lr (g + 1.9 g)
        let mut p = p0.clone();
        let mut opt = Sgd::new(&p, 0.9);
        opt.step(&mut p, &g, 0.1).unwrap();
        opt.step(&mut p, &g, 0.1).unwrap();
        for (a, b) in p.buffers().iter().zip(p0.buffers()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - (y - 0.1 * 0.5 * 2.9)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_nan_is_skipped() {
        let p0 = params();
        let mut p = p0.clone();
        let mut opt = Sgd::new(&p, 0.9);
        for _ in 0..5 {
            assert!(opt.step(&mut p, &p0.zeros_like(), 0.1).unwrap());
        }
        assert_eq!(p, p0);
        let mut g = p0.zeros_like();
        g.embed_head.bias[0] = f64::NAN;
        assert!(!opt.step(&mut p, &g, 0.1).unwrap());
        assert_eq!(p, p0);
    }
}
