use candle_core::backprop::GradStore;
use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::encoder::{LanguageBackend, LayerKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    #[default]
    Cosine,
    Constant,
}

/// Linear warmup followed by cosine decay to zero (or a constant rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub scheduler: Scheduler,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(scheduler: Scheduler, total_steps: usize, warmup_ratio: f64) -> Self {
        LrSchedule {
            scheduler,
            total_steps,
            warmup_steps: (warmup_ratio * total_steps as f64).ceil() as usize,
        }
    }

    /// Multiplier applied to each group's base rate at 0-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return step as f64 / self.warmup_steps.max(1) as f64;
        }
        match self.scheduler {
            Scheduler::Constant => 1.0,
            Scheduler::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = (step - self.warmup_steps) as f64 / span as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }
}

/// A set of parameter prefixes trained at one base learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub prefixes: Vec<String>,
    pub lr: f64,
}

/// Layer-wise learning rates: heads at `lr`, the top encoder layer at
/// `lr * decay`, the next at `lr * decay^2`, and so on for the
/// `trainable_top_layers` highest layers. Everything below is frozen (rate 0).
pub fn build_param_groups(
    backend: &dyn LanguageBackend,
    lr: f64,
    decay: f64,
    trainable_top_layers: usize,
) -> Result<Vec<ParamGroup>> {
    let num_layers = backend.capabilities().num_layers;
    if trainable_top_layers > num_layers {
        return Err(Error::contract(format!(
            "{trainable_top_layers} trainable layers requested, backend has {num_layers}"
        )));
    }
    let mut groups = vec![ParamGroup {
        name: "heads".into(),
        prefixes: vec!["head.".into(), "prompt.".into()],
        lr,
    }];
    let handles = backend.parameter_layers();
    for handle in handles.iter().rev() {
        let rate = match handle.kind {
            LayerKind::Encoder(i) => {
                let depth = num_layers - i;
                if depth <= trainable_top_layers {
                    lr * decay.powi(depth as i32)
                } else {
                    0.0
                }
            }
            LayerKind::Embeddings | LayerKind::Head => 0.0,
        };
        groups.push(ParamGroup {
            name: handle.name.clone(),
            prefixes: vec![handle.prefix.clone()],
            lr: rate,
        });
    }
    Ok(groups)
}

/// One AdamW instance per non-frozen group, sharing a schedule.
pub struct GroupOptimizer {
    groups: Vec<(ParamGroup, Vec<Var>, AdamW)>,
    max_grad_norm: Option<f64>,
}

impl GroupOptimizer {
    /// `resolve` maps a prefix to the variables it covers.
    pub fn new(
        groups: &[ParamGroup],
        weight_decay: f64,
        max_grad_norm: Option<f64>,
        resolve: impl Fn(&str) -> Vec<Var>,
    ) -> Result<Self> {
        let mut out = Vec::new();
        for group in groups.iter().filter(|g| g.lr > 0.0) {
            let vars: Vec<Var> = group.prefixes.iter().flat_map(|p| resolve(p)).collect();
            if vars.is_empty() {
                continue;
            }
            let opt = AdamW::new(
                vars.clone(),
                ParamsAdamW {
                    lr: group.lr,
                    weight_decay,
                    ..ParamsAdamW::default()
                },
            )?;
            out.push((group.clone(), vars, opt));
        }
        Ok(GroupOptimizer {
            groups: out,
            max_grad_norm,
        })
    }

    pub fn num_trainable(&self) -> usize {
        self.groups
            .iter()
            .map(|(_, v, _)| v.iter().map(|x| x.elem_count()).sum::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Clips the global gradient norm, then steps every group at `base * factor`.
    pub fn step(&mut self, grads: &mut GradStore, factor: f64) -> Result<()> {
        if let Some(max_norm) = self.max_grad_norm {
            let mut sq = 0.0f64;
            for (_, vars, _) in &self.groups {
                for v in vars {
                    if let Some(g) = grads.get(v.as_tensor()) {
                        sq += g
                            .sqr()?
                            .sum_all()?
                            .to_dtype(candle_core::DType::F64)?
                            .to_scalar::<f64>()?;
                    }
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                let scale = max_norm / (norm + 1e-6);
                for (_, vars, _) in &self.groups {
                    for v in vars {
                        if let Some(g) = grads.remove(v.as_tensor()) {
                            grads.insert(v.as_tensor(), (g * scale)?);
                        }
                    }
                }
            }
        }
        for (group, _, opt) in &mut self.groups {
            opt.set_learning_rate(group.lr * factor);
            opt.step(grads)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{TinyBackend, TinyConfig};

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(Scheduler::Cosine, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.factor(0), 0.0);
        assert!((s.factor(5) - 0.5).abs() < 1e-12);
        assert_eq!(s.factor(10), 1.0);
        assert!((s.factor(55) - 0.5).abs() < 1e-12);
        assert!(s.factor(100).abs() < 1e-12);
        let c = LrSchedule::new(Scheduler::Constant, 100, 0.0);
        assert_eq!(c.factor(0), 1.0);
        assert_eq!(c.factor(99), 1.0);
    }

    #[test]
    fn geometric_layer_rates() {
        let b = TinyBackend::new(TinyConfig::masked()).unwrap();
        let groups = build_param_groups(&b, 2e-5, 0.97, 2).unwrap();
        let rate = |n: &str| groups.iter().find(|g| g.name == n).unwrap().lr;
        assert_eq!(rate("heads"), 2e-5);
        assert!((rate("layer.1") - 1.94e-5).abs() < 1e-18);
        assert!((rate("layer.0") - 2e-5 * 0.97 * 0.97).abs() < 1e-18);
        assert!((rate("layer.0") - 1.8818e-5).abs() < 1e-12);
        assert_eq!(rate("embeddings"), 0.0);
        assert_eq!(rate("lm_head"), 0.0);
    }

    #[test]
    fn unit_decay_and_linear_probe() {
        let b = TinyBackend::new(TinyConfig::masked()).unwrap();
        let groups = build_param_groups(&b, 1e-3, 1.0, 2).unwrap();
        assert!(groups
            .iter()
            .filter(|g| g.name.starts_with("layer."))
            .all(|g| g.lr == 1e-3));
        let probe = build_param_groups(&b, 1e-3, 0.97, 0).unwrap();
        assert!(probe.iter().filter(|g| g.lr > 0.0).all(|g| g.name == "heads"));
        assert!(build_param_groups(&b, 1e-3, 0.97, 3).is_err());
    }
}
