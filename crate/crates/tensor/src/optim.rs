use crate::error::{Result, TensorError};
use crate::layers::Module;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to this L2 norm when it is exceeded.
    pub max_grad_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }

    pub fn with_max_grad_norm(mut self, norm: f64) -> Self {
        self.max_grad_norm = Some(norm);
        self
    }
}

/// First and second moment estimates for every parameter of one module.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState {
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Applies one bias-corrected Adam update to every trainable parameter
    /// that holds a gradient, then clears the gradients.
    ///
    /// Fails without touching any parameter if a gradient is not finite.
    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        let mut params = module.params_mut();
        let mut sq_norm = 0.0;
        for (name, p) in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::PoisonedGradient { param: name.clone() });
                }
                sq_norm += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        };
        if self.state.m.len() != params.len() {
            self.state.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                p.zero_grad();
                continue;
            }
            let Some(g) = p.take_grad() else { continue };
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k] * clip;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Dense;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new(3, 2, &mut rng);
        let before = d.w.data().to_vec();
        {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::full(&[1, 3], 1.0));
            let y = d.forward(&mut tape, x).unwrap();
            let l = tape.sum(y);
            tape.backward(l).unwrap();
        }
        let mut opt = Adam::new(AdamConfig::new(0.01, 0.9));
        opt.step(&mut d).unwrap();
        for (a, b) in before.iter().zip(d.w.data()) {
            assert!(((a - b) - 0.01).abs() < 1e-6);
        }
        assert_eq!(opt.state.step, 1);
        assert!(d.w.grad().is_none());
    }

    #[test]
    fn nan_gradient_is_reported_with_name() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new(2, 2, &mut rng);
        let before = d.b.data().to_vec();
        d.w.accumulate_grad(&[f64::NAN, 0.0, 0.0, 0.0]);
        d.b.accumulate_grad(&[1.0, 1.0]);
        let err = Adam::new(AdamConfig::new(0.1, 0.9)).step(&mut d).unwrap_err();
        assert!(matches!(err, TensorError::PoisonedGradient { ref param } if param == "w"));
        assert_eq!(d.b.data(), &before[..]);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::new(2, 2, &mut rng);
        d.set_trainable(false);
        let sum = d.checksum();
        d.w.accumulate_grad(&[1.0; 4]);
        Adam::new(AdamConfig::new(0.1, 0.9)).step(&mut d).unwrap();
        assert_eq!(d.checksum(), sum);
    }
}
