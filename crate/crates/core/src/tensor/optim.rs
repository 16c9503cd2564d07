//! AdamW with decoupled weight decay, global-norm gradient clipping, and an
//! exponential-moving-average shadow of every parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::Grads;
use super::Tensor;

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2-norm clip threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub ema_momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            ema_momentum: 0.9999,
        }
    }
}

struct Slot<E: Scalar> {
    m: Vec<E>,
    v: Vec<E>,
    ema: Vec<E>,
}

pub struct AdamW<E: Scalar> {
    pub cfg: OptimConfig,
    step: u64,
    slots: BTreeMap<String, Slot<E>>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(cfg: OptimConfig) -> AdamW<E> {
        AdamW { cfg, step: 0, slots: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `params` maps name → (parameter, gradient); entries
    /// with `None` gradient keep their moments but still track EMA. Gradients
    /// are clipped jointly to `grad_clip_norm` before the moment update.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<E>>,
        grads: &Grads<E>,
    ) -> Result<StepStats> {
        // Pass 1: validate and measure the global norm (order fixed by name).
        let mut sq_sum = 0.0f64;
        for (name, p) in params.iter() {
            if let Some(g) = grads.get(p) {
                for (i, v) in g.data().iter().enumerate() {
                    let x = v.to_f64();
                    if !x.is_finite() {
                        return Err(Error::NonFinite {
                            op: "adamw_step".into(),
                            context: format!("gradient for parameter '{name}' (element {i})"),
                        });
                    }
                    sq_sum += x * x;
                }
            }
        }
        let grad_norm = sq_sum.sqrt();
        let clip_scale = if self.cfg.grad_clip_norm > 0.0 && grad_norm > self.cfg.grad_clip_norm {
            self.cfg.grad_clip_norm / grad_norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let lr = self.cfg.learning_rate;
        let (b1, b2) = (E::from_f64(self.cfg.beta1), E::from_f64(self.cfg.beta2));
        let (ob1, ob2) =
            (E::from_f64(1.0 - self.cfg.beta1), E::from_f64(1.0 - self.cfg.beta2));
        let scale = E::from_f64(clip_scale);
        let eps = E::from_f64(self.cfg.eps);
        let mu = E::from_f64(self.cfg.ema_momentum);
        let one_minus_mu = E::from_f64(1.0 - self.cfg.ema_momentum);

        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![E::ZERO; n],
                v: vec![E::ZERO; n],
                ema: p.data().to_vec(),
            });
            if slot.m.len() != n {
                return Err(Error::invalid(format!(
                    "optimizer slot for '{name}' has stale size {} vs {}",
                    slot.m.len(),
                    n
                )));
            }
            if let Some(g) = grads.get(p) {
                let gd = g.data();
                let pd = p.data_mut();
                for i in 0..n {
                    let gi = gd[i] * scale;
                    slot.m[i] = b1 * slot.m[i] + ob1 * gi;
                    slot.v[i] = b2 * slot.v[i] + ob2 * gi * gi;
                    let m_hat = slot.m[i].to_f64() / bc1;
                    let v_hat = (slot.v[i].to_f64() / bc2).max(0.0);
                    let update = lr * (m_hat / (v_hat.sqrt() + eps.to_f64()))
                        + lr * self.cfg.weight_decay * pd[i].to_f64();
                    pd[i] -= E::from_f64(update);
                }
            }
            // EMA tracks the (possibly unchanged) parameter every step.
            let pd = p.data();
            for i in 0..n {
                slot.ema[i] = mu * slot.ema[i] + one_minus_mu * pd[i];
            }
        }
        Ok(StepStats { grad_norm, clip_scale })
    }

    /// EMA shadow of a parameter, if the optimizer has seen it.
    pub fn ema(&self, name: &str) -> Option<Tensor<E>> {
        self.slots.get(name).map(|s| {
            Tensor::from_vec(vec![s.ema.len()], s.ema.clone()).expect("flat shape always valid")
        })
    }

    /// Flat views of the optimizer state for checkpointing, keyed by
    /// `optim.m.*`, `optim.v.*` and `ema.*`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor<E>> {
        let mut out = BTreeMap::new();
        for (name, slot) in &self.slots {
            let mk = |v: &Vec<E>| Tensor::from_vec(vec![v.len()], v.clone()).unwrap();
            out.insert(format!("optim.m.{name}"), mk(&slot.m));
            out.insert(format!("optim.v.{name}"), mk(&slot.v));
            out.insert(format!("ema.{name}"), mk(&slot.ema));
        }
        out
    }

    /// Restore state written by [`AdamW::state_tensors`].
    pub fn restore(
        &mut self,
        step: u64,
        tensors: &BTreeMap<String, Tensor<E>>,
        param_names: &[String],
    ) -> Result<()> {
        self.step = step;
        self.slots.clear();
        for name in param_names {
            let get = |prefix: &str| -> Result<Vec<E>> {
                tensors
                    .get(&format!("{prefix}.{name}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Format(format!("checkpoint missing {prefix}.{name}")))
            };
            self.slots.insert(
                name.clone(),
                Slot { m: get("optim.m")?, v: get("optim.v")?, ema: get("ema")? },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;

    fn single_param(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::from_vec(vec![1], vec![v]).unwrap());
        m
    }

    fn backward_for(params: &mut BTreeMap<String, Tensor<f64>>, grad_value: f64) -> Grads<f64> {
        // loss = c · w gives grad(w) = c
        let tape = Tape::new();
        let w = params.get_mut("w").unwrap();
        w.watch(&tape).unwrap();
        let loss = w.scale(grad_value).unwrap().sum().unwrap();
        tape.backward(&loss).unwrap()
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut params = single_param(1.5);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg);
        let grads = backward_for(&mut params, 0.0);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].item(), 1.5);
    }

    #[test]
    fn global_norm_clipping_scales_to_threshold() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let tape = Tape::new();
        let w = params.get_mut("w").unwrap();
        w.watch(&tape).unwrap();
        // grads (6, 8): global norm 10
        let c = Tensor::from_vec(vec![2], vec![6.0, 8.0]).unwrap();
        let loss = w.mul(&c).unwrap().sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut opt = AdamW::<f64>::new(OptimConfig::default());
        let stats = opt.step(&mut params, &grads).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        let clipped_norm = stats.grad_norm * stats.clip_scale;
        assert!((clipped_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_steps_match_scalar_reference() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 0.0,
            ema_momentum: 0.9999,
        };
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(cfg.clone());
        let grad_values = [0.3, -0.2, 0.5];
        for &gv in &grad_values {
            let grads = backward_for(&mut params, gv);
            opt.step(&mut params, &grads).unwrap();
        }

        // independent recomputation
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, &g) in grad_values.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps))
                + cfg.learning_rate * cfg.weight_decay * w;
        }
        assert!((params["w"].item() - w).abs() < 1e-12, "{} vs {}", params["w"].item(), w);
    }

    #[test]
    fn non_finite_gradient_aborts_with_parameter_name() {
        // Forward stays finite but the chained backward scale overflows,
        // so the optimizer sees an infinite gradient.
        let mut params = single_param(1e-300);
        let tape = Tape::new();
        let w = params.get_mut("w").unwrap();
        w.watch(&tape).unwrap();
        let loss = w.scale(1e308).unwrap().scale(1e10).unwrap().sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut opt = AdamW::<f64>::new(OptimConfig::default());
        let err = opt.step(&mut params, &grads).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'w'"), "diagnostic must name the parameter: {msg}");
    }
}
