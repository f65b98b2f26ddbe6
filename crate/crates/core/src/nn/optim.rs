use std::collections::HashMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use super::params::sorted_vars;
use crate::error::Result;

/// Adaptive-moment optimiser settings. `weight_decay = 0` gives plain Adam;
/// otherwise the decay is decoupled from the gradient (AdamW).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamSettings {
    /// Masked-autoencoder pretraining defaults.
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }

    /// Episodic meta-training defaults.
    pub fn meta_train() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// True for buffers that live in the var map but are not optimised.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// AdamW over every non-buffer variable of a [`VarMap`], with state that can
/// be exported and restored for exact resumption.
pub struct AdamW {
    settings: AdamSettings,
    slots: Vec<Slot>,
    step: usize,
}

impl AdamW {
    pub fn new(varmap: &VarMap, settings: AdamSettings) -> Result<Self> {
        Self::for_prefix(varmap, settings, None)
    }

    /// Restrict optimisation to variables whose name starts with `prefix`.
    pub fn for_prefix(varmap: &VarMap, settings: AdamSettings, prefix: Option<&str>) -> Result<Self> {
        let slots = sorted_vars(varmap)
            .into_iter()
            .filter(|(n, _)| !is_buffer(n) && prefix.is_none_or(|p| n.starts_with(p)))
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            settings,
            slots,
            step: 0,
        })
    }

    pub fn settings(&self) -> &AdamSettings {
        &self.settings
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.settings.lr = lr;
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let s = self.settings;
        let t = self.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        for slot in self.slots.iter_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Gradients carry the backward graph; keeping them in the moments would retain it.
            let g = &g.detach();
            slot.m = ((&slot.m * s.beta1)? + (g * (1.0 - s.beta1))?)?;
            slot.v = ((&slot.v * s.beta2)? + (g.sqr()? * (1.0 - s.beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + s.eps)?)?;
            let theta = slot.var.as_tensor();
            let decayed = if s.weight_decay > 0.0 {
                (theta * (1.0 - s.lr * s.weight_decay))?
            } else {
                theta.clone()
            };
            slot.var.set(&(decayed - (update * s.lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`.
    pub fn state(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for slot in &self.slots {
            out.insert(format!("m.{}", slot.name), slot.m.clone());
            out.insert(format!("v.{}", slot.name), slot.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for slot in self.slots.iter_mut() {
            if let (Some(m), Some(v)) = (
                state.get(&format!("m.{}", slot.name)),
                state.get(&format!("v.{}", slot.name)),
            ) {
                slot.m = m.to_dtype(slot.m.dtype())?;
                slot.v = v.to_dtype(slot.v.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamBuilder};
    use candle_core::{DType, Device};

    #[test]
    fn minimises_a_quadratic() {
        let vm = VarMap::new();
        let pb = ParamBuilder::new(&vm, 0, DType::F64, &Device::Cpu);
        let x = pb.get(3, "x", Init::Ones).unwrap();
        let target = Tensor::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(
            &vm,
            AdamSettings {
                lr: 0.05,
                ..AdamSettings::meta_train()
            },
        )
        .unwrap();
        for _ in 0..600 {
            let loss = (&x - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let got = x.to_vec1::<f64>().unwrap();
        for (g, t) in got.iter().zip([0.5, -1.0, 2.0]) {
            assert!((g - t).abs() < 1e-2, "{got:?}");
        }
    }

    #[test]
    fn buffers_are_not_optimised() {
        let vm = VarMap::new();
        let pb = ParamBuilder::new(&vm, 0, DType::F32, &Device::Cpu);
        pb.get(2, "bn.running_mean", Init::Zeros).unwrap();
        pb.get(2, "w", Init::Zeros).unwrap();
        let opt = AdamW::new(&vm, AdamSettings::meta_train()).unwrap();
        assert_eq!(opt.slots.len(), 1);
        assert!(is_buffer("a.b.running_var"));
    }

    #[test]
    fn moments_do_not_hold_the_graph() {
        let vm = VarMap::new();
        let pb = ParamBuilder::new(&vm, 0, DType::F32, &Device::Cpu);
        let w = pb.get(3, "w", Init::Ones).unwrap();
        let mut opt = AdamW::new(&vm, AdamSettings::meta_train()).unwrap();
        let loss = (w.sqr().unwrap() * 2.0).unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        assert!(opt.slots.iter().all(|s| !s.m.track_op() && !s.v.track_op()));
    }
}
