//! Decoupled weight-decay Adam.
//!
//! First/second-moment state is keyed by parameter name, so the optimizer is
//! robust to being constructed before or after the first backward pass and
//! can be reused across models with identical parameter inventories (it will
//! error on shape drift). Weight decay is decoupled: it scales the parameter
//! directly by `lr * weight_decay`, outside the adaptive term.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::Params;

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently stored in the model.
    ///
    /// Non-finite gradients are a hard error: training divergence must
    /// surface, never be silently clipped.
    pub fn step<M: Params + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut bad: Option<String> = None;
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let state = &mut self.state;
        model.visit_params("", &mut |p| {
            if bad.is_some() {
                return;
            }
            let entry = state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
            });
            if entry.m.len() != p.value.len() {
                bad = Some(format!("optimizer state shape drift for {}", p.name));
                return;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                if !g.is_finite() {
                    bad = Some(format!("non-finite gradient in {}", p.name));
                    return;
                }
                entry.m[i] = b1 * entry.m[i] + (1.0 - b1) * g;
                entry.v[i] = b2 * entry.v[i] + (1.0 - b2) * g * g;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                p.value[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.value[i]);
            }
        });
        match bad {
            Some(msg) => Err(Error::Diverged(msg)),
            None => Ok(()),
        }
    }
}

/// Linearly decayed learning rate: `lr0 * (1 - step/total)`, floored at 0.
pub fn linear_decay(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * (1.0 - (step as f64 / total_steps as f64)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_grads, ParamTensor, Params};
    use ndarray::Array1;

    struct Toy {
        w: Array1<f64>,
        g: Array1<f64>,
    }

    impl Params for Toy {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamTensor<'_>)) {
            f(ParamTensor::new(
                crate::nn::scope(prefix, "w"),
                &mut self.w,
                &mut self.g,
            ));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut toy = Toy {
            w: Array1::linspace(-1.0, 1.0, 5),
            g: Array1::ones(5),
        };
        let before = toy.w.clone();
        let mut opt = AdamW::new(0.0);
        opt.step(&mut toy).unwrap();
        assert_eq!(toy.w, before);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut toy = Toy {
            w: Array1::from_vec(vec![5.0, -3.0]),
            g: Array1::zeros(2),
        };
        let mut opt = AdamW::new(0.05);
        opt.weight_decay = 0.0;
        for _ in 0..300 {
            zero_grads(&mut toy);
            toy.g = toy.w.mapv(|x| 2.0 * x);
            opt.step(&mut toy).unwrap();
        }
        let loss: f64 = toy.w.iter().map(|x| x * x).sum();
        assert!(loss < 1.0, "loss {loss}");
    }

    #[test]
    fn non_finite_gradient_is_a_hard_error() {
        let mut toy = Toy {
            w: Array1::ones(2),
            g: Array1::from_vec(vec![1.0, f64::NAN]),
        };
        let mut opt = AdamW::new(0.1);
        assert!(matches!(
            opt.step(&mut toy),
            Err(crate::error::Error::Diverged(_))
        ));
    }

    #[test]
    fn zero_gradients_still_decay_weights() {
        let mut toy = Toy {
            w: Array1::from_vec(vec![2.0]),
            g: Array1::zeros(1),
        };
        let mut opt = AdamW::new(0.1);
        opt.step(&mut toy).unwrap();
        assert!(toy.w[0] < 2.0 && toy.w[0] > 1.9);
    }

    #[test]
    fn linear_decay_schedule() {
        assert_eq!(linear_decay(1.0, 0, 10), 1.0);
        assert!((linear_decay(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(linear_decay(1.0, 10, 10), 0.0);
        assert_eq!(linear_decay(1.0, 20, 10), 0.0);
    }
}
