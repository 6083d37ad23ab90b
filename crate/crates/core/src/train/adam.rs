use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments per parameter tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let m: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of the tensors listed in `active`.
/// Active tensors without a gradient are treated as having a zero gradient.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &HashMap<usize, Tensor<T>>,
    state: &mut OptimizerState<T>,
    cfg: AdamConfig,
    active: &[usize],
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::config("optimizer state does not match the parameter set"));
    }
    for &i in active {
        if let Some(g) = grads.get(&i) {
            if g.shape() != params.get(i).shape() {
                return Err(Error::shape(params.name(i), "gradient shape differs from parameter"));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", params.name(i)),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let c1 = f(1.0 - cfg.beta1.powi(t));
    let c2 = f(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (f(cfg.learning_rate), f(cfg.eps));
    for &i in active {
        let g = grads.get(&i);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.get_mut(i).data_mut();
        for k in 0..w.len() {
            let gk = g.map_or(T::zero(), |g| g.data()[k]);
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            w[k] = w[k] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(Shape::vector(3), v)).unwrap();
        p
    }

    fn cfg() -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_from_zero_state_is_a_fixed_point() {
        let mut p = store(0.5);
        let mut st = OptimizerState::new(&p);
        let mut g = HashMap::new();
        g.insert(0, Tensor::zeros(Shape::vector(3)));
        adam_step(&mut p, &g, &mut st, cfg(), &[0]).unwrap();
        assert_eq!(p.get(0).data(), &[0.5; 3]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = store(0.5);
        let mut st = OptimizerState::new(&p);
        let mut g = HashMap::new();
        g.insert(0, Tensor::full(Shape::vector(3), 3.7));
        adam_step(&mut p, &g, &mut st, cfg(), &[0]).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expected = 0.5 - 1e-4 * 3.7 / (3.7 + 1e-8);
        assert!((p.get(0).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn inactive_tensors_are_untouched() {
        let mut p = store(0.5);
        p.insert("u", Tensor::full(Shape::vector(2), 1.0)).unwrap();
        let mut st = OptimizerState::new(&p);
        let mut g = HashMap::new();
        g.insert(1, Tensor::full(Shape::vector(2), 1.0));
        adam_step(&mut p, &g, &mut st, cfg(), &[0]).unwrap();
        assert_eq!(p.get(1).data(), &[1.0; 2]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = store(0.5);
        let mut st = OptimizerState::new(&p);
        let mut g = HashMap::new();
        g.insert(0, Tensor::full(Shape::vector(3), f64::NAN));
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, cfg(), &[0]),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(p.get(0).data(), &[0.5; 3]);
    }
}
