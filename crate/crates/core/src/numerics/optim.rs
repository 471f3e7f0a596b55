use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Weight decay folded into the gradient (L2 penalty).
    Adam,
    /// Decoupled weight decay applied directly to the parameters.
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Hyperparameters per parameter group; groups not listed use `default`.
    pub groups: BTreeMap<String, GroupHyper>,
    pub default: GroupHyper,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups: BTreeMap::new(),
            default: GroupHyper {
                learning_rate,
                weight_decay,
            },
        }
    }

    pub fn adamw(default: GroupHyper) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            ..Self::adam(default.learning_rate, default.weight_decay)
        }
    }

    pub fn with_group(mut self, name: &str, hyper: GroupHyper) -> Self {
        self.groups.insert(name.to_string(), hyper);
        self
    }

    fn hyper(&self, group: &str) -> GroupHyper {
        self.groups.get(group).copied().unwrap_or(self.default)
    }

    fn validate(&self) -> Result<(), NumericsError> {
        let bad = |h: &GroupHyper| !(h.learning_rate > 0.0) || h.weight_decay < 0.0;
        if bad(&self.default) || self.groups.values().any(bad) || !(self.eps > 0.0) {
            return Err(NumericsError::InvalidArgument {
                op: "optimizer",
                reason: "learning rates and eps must be positive, weight decay non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub updated: usize,
    /// Groups skipped because a gradient contained NaN or infinity.
    pub rejected_groups: Vec<String>,
}

/// Adam / AdamW state: moment accumulators per parameter and a step counter.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self, NumericsError> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update to every trainable parameter with a gradient.
    /// `grads` is aligned with `store.entries()`.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
    ) -> Result<StepReport, NumericsError> {
        if grads.len() != store.len() {
            return Err(NumericsError::InvalidArgument {
                op: "optimizer_step",
                reason: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);

        let mut report = StepReport::default();
        let mut rejected: BTreeMap<&str, bool> = BTreeMap::new();
        for (e, g) in store.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != e.value.shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "optimizer_step",
                        left: e.value.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                if e.trainable && !g.is_finite() {
                    rejected.insert(e.group.as_str(), true);
                }
            }
        }
        report.rejected_groups = rejected.keys().map(|s| s.to_string()).collect();

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let eps = T::of(self.config.eps);

        for i in 0..store.len() {
            let entry = &store.entries()[i];
            let Some(grad) = &grads[i] else { continue };
            if !entry.trainable || report.rejected_groups.contains(&entry.group) {
                continue;
            }
            let hyper = self.config.hyper(&entry.group);
            let lr = T::of(hyper.learning_rate);
            let wd = T::of(hyper.weight_decay);
            let kind = self.config.kind;

            let mut g = grad.clone();
            if kind == OptimizerKind::Adam && hyper.weight_decay > 0.0 {
                for (gv, &p) in g.data_mut().iter_mut().zip(entry.value.data()) {
                    *gv += wd * p;
                }
            }
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((mv, vv), &gv) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
                *mv = T::of(b1) * *mv + T::of(1.0 - b1) * gv;
                *vv = T::of(b2) * *vv + T::of(1.0 - b2) * gv * gv;
            }
            let (m, v) = (self.first[i].as_ref().unwrap(), self.second[i].as_ref().unwrap());
            let id = super::ParamId(i);
            store.update(id, |p| {
                for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    if kind == OptimizerKind::Adamw && hyper.weight_decay > 0.0 {
                        *pv -= lr * wd * *pv;
                    }
                    let mhat = mv / T::of(bc1);
                    let vhat = vv / T::of(bc2);
                    *pv -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
            report.updated += 1;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, group: &str) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v), group).unwrap();
        s
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr · g/(|g| + eps) ≈ lr.
        let mut s = scalar_store(1.0, "g");
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3, 0.0)).unwrap();
        opt.step(&mut s, &[Some(Tensor::scalar(1.0))]).unwrap();
        let p = s.entries()[0].value.item();
        assert!((1.0 - p - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{p}");
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7, "g");
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3, 0.0)).unwrap();
        for _ in 0..3 {
            opt.step(&mut s, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(s.entries()[0].value.item(), 0.7);
    }

    #[test]
    fn adamw_groups_scale_by_learning_rate_ratio() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::scalar(0.0), "adapter").unwrap();
        s.insert("b", Tensor::scalar(0.0), "graph").unwrap();
        let cfg = OptimizerConfig::adamw(GroupHyper {
            learning_rate: 1.0,
            weight_decay: 0.0,
        })
        .with_group("adapter", GroupHyper { learning_rate: 5e-6, weight_decay: 0.0 })
        .with_group("graph", GroupHyper { learning_rate: 5e-2, weight_decay: 0.0 });
        let mut opt = Optimizer::new(cfg).unwrap();
        let g = Tensor::scalar(0.3);
        opt.step(&mut s, &[Some(g.clone()), Some(g)]).unwrap();
        let da = s.entries()[0].value.item().abs();
        let db = s.entries()[1].value.item().abs();
        assert!(((db / da) - 1e4).abs() < 1e-6, "{}", db / da);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut s = scalar_store(2.0, "g");
        let cfg = OptimizerConfig::adamw(GroupHyper {
            learning_rate: 0.1,
            weight_decay: 0.5,
        });
        let mut opt = Optimizer::new(cfg).unwrap();
        opt.step(&mut s, &[Some(Tensor::scalar(0.0))]).unwrap();
        // zero gradient: only the decay term acts.
        assert!((s.entries()[0].value.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejects_its_group_only() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::scalar(1.0), "x").unwrap();
        s.insert("b", Tensor::scalar(1.0), "y").unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 0.0)).unwrap();
        let r = opt
            .step(&mut s, &[Some(Tensor::scalar(f64::NAN)), Some(Tensor::scalar(1.0))])
            .unwrap();
        assert_eq!(r.rejected_groups, vec!["x".to_string()]);
        assert_eq!(s.entries()[0].value.item(), 1.0);
        assert!(s.entries()[1].value.item() < 1.0);
    }

    #[test]
    fn non_positive_learning_rate_is_rejected() {
        assert!(Optimizer::<f64>::new(OptimizerConfig::adam(0.0, 0.0)).is_err());
    }
}
