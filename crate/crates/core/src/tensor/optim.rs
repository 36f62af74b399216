use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamSet, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        Ok(Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moment_shape(&self, name: &str) -> Option<&[usize]> {
        self.m.get(name).map(|t| t.shape())
    }

    /// One update over every parameter that has a gradient. Gradients are
    /// scanned before anything is written, so a NaN leaves `params` intact.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(TensorError::NanGradient(name.clone()));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        if let Err(name) = params.all_finite() {
            return Err(TensorError::NanGradient(name));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Rng};

    fn quad_grads(params: &ParamSet) -> (f64, ParamGrads) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = bound.var("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap();
        (value, bound.collect(grads, params))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![1.5, -2.0]));
        let before = params.clone();
        let mut grads = ParamGrads::new();
        grads.insert("x".into(), Tensor::zeros(&[2]));
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.moment_shape("x"), Some(&[2usize][..]));
    }

    #[test]
    fn one_step_descends() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![1.0]));
        let (_, grads) = quad_grads(&params);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        })
        .unwrap();
        adam.step(&mut params, &grads).unwrap();
        assert!(params.get("x").unwrap().data()[0].abs() < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut rng = Rng::new(1);
        let mut params = ParamSet::new();
        params.insert("x", Tensor::randn(&[2], 1.0, &mut rng));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let (l, grads) = quad_grads(&params);
            loss = l;
            adam.step(&mut params, &grads).unwrap();
        }
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = ParamSet::new();
        params.insert("blocks.0.w", Tensor::from_vec(vec![1.0]));
        let mut grads = ParamGrads::new();
        grads.insert("blocks.0.w".into(), Tensor::from_vec(vec![f64::NAN]));
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("blocks.0.w"));
        assert_eq!(params.get("blocks.0.w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        assert!(Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        })
        .is_err());
    }
}
