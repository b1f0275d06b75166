//! Parameters, AdamW, cosine annealing and EMA shadow weights.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor and return its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Place every parameter on `tape` as a gradient-tracked leaf.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Gradients collected from leaves created by [`ParamSet::leaves`];
    /// leaves never reached by backward get zeros.
    pub fn collect_grads(&self, leaves: &[Var<'_>]) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(leaves)
            .map(|(v, l)| l.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-12,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update at learning rate `lr` (the schedule's current value).
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid(format!("{} grads for {} params", grads.len(), params.len())));
        }
        for ((g, p), name) in grads.iter().zip(params.values()).zip(params.names()) {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step_count as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                *w -= lr * c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(invalid("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(invalid(format!("step {step} beyond total_steps {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Option<Vec<Tensor>>,
}

impl Ema {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self { decay, shadow: None })
    }

    /// The first call copies `params`; later calls blend them in.
    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        let Some(shadow) = &mut self.shadow else {
            self.shadow = Some(params.values().to_vec());
            return Ok(());
        };
        check_same_shapes(shadow, params.values())?;
        let d = self.decay;
        for (s, p) in shadow.iter_mut().zip(params.values()) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }

    /// Exchange live parameters and the shadow copy.
    pub fn swap(&mut self, params: &mut ParamSet) -> Result<()> {
        let shadow = self
            .shadow
            .as_mut()
            .ok_or_else(|| invalid("EMA swap before any update"))?;
        check_same_shapes(shadow, params.values())?;
        for (s, p) in shadow.iter_mut().zip(params.values_mut()) {
            std::mem::swap(s, p);
        }
        Ok(())
    }
}

fn check_same_shapes(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!("EMA tracks {} tensors, got {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::vector(vec![1.0, -2.0, 3.5]));
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[3])], 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.step_count, 5);
    }

    #[test]
    fn one_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; bias-corrected both equal 1.0, so
        // w = 1 - 0.1 * 1 / (1 + 1e-8).
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        let mut p = single(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        assert!((p.get(0).item().unwrap() - expected).abs() < 1e-15);
        assert!((opt.first_moment[0].item().unwrap() - 0.1).abs() < 1e-15);
        assert!((opt.second_moment[0].item().unwrap() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_before_moment_update() {
        let mut p = single(2.0);
        let cfg = AdamWConfig {
            lr: 0.5,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)], 0.5).unwrap();
        assert!((p.get(0).item().unwrap() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn nan_grad_rejected_without_update() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)], 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p.get(0).item().unwrap(), 1.0);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn defaults_match_training_recipe() {
        let c = AdamWConfig::default();
        assert_eq!(c.lr, 2e-4);
        assert_eq!(c.weight_decay, 1e-12);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert!(cosine_lr(100, 100, 0.3).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(1, 0, 0.3).is_err());
        assert!(cosine_lr(101, 100, 0.3).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut e = Ema::new(0.5).unwrap();
        e.update(&single(0.0)).unwrap();
        e.update(&single(1.0)).unwrap();
        assert_eq!(e.shadow.as_ref().unwrap()[0].item().unwrap(), 0.5);

        let mut zero = Ema::new(0.0).unwrap();
        zero.update(&single(3.0)).unwrap();
        zero.update(&single(7.0)).unwrap();
        assert_eq!(zero.shadow.as_ref().unwrap()[0].item().unwrap(), 7.0);

        let mut one = Ema::new(1.0).unwrap();
        one.update(&single(3.0)).unwrap();
        one.update(&single(7.0)).unwrap();
        assert_eq!(one.shadow.as_ref().unwrap()[0].item().unwrap(), 3.0);
    }

    #[test]
    fn ema_swap_and_shape_drift() {
        let mut e = Ema::new(0.9).unwrap();
        let mut p = single(1.0);
        e.update(&p).unwrap();
        p.values_mut()[0] = Tensor::scalar(5.0);
        e.swap(&mut p).unwrap();
        assert_eq!(p.get(0).item().unwrap(), 1.0);
        assert_eq!(e.shadow.as_ref().unwrap()[0].item().unwrap(), 5.0);

        let mut other = ParamSet::new();
        other.push("w", Tensor::zeros(&[2]));
        assert!(e.update(&other).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cosine_is_non_increasing(total in 1u64..5000, lr0 in 1e-6f64..1.0) {
            let mut prev = f64::INFINITY;
            for s in 0..=total.min(400) {
                let step = s * total / total.min(400);
                let lr = cosine_lr(step, total, lr0).unwrap();
                proptest::prop_assert!(lr <= prev + 1e-18);
                prev = lr;
            }
        }
    }
}
