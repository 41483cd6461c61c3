//! Entity and relation losses, the weighted total objective, and the
//! decoupled-weight-decay optimizer.

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight on the entity loss; `None` picks the task default.
    pub lambda: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            lambda: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} outside (0,1)")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.focal_gamma < 0.0 {
            return Err(Error::Config("eps must be positive; weight_decay and gamma non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!("focal alpha {} outside [0,1]", self.focal_alpha)));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda {l} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn lambda_for(&self, task: Task) -> f64 {
        self.lambda.unwrap_or(match task {
            Task::SgDet => 1.0,
            Task::PredCls | Task::SgCls => 0.0,
        })
    }
}

/// Mean softmax cross-entropy over detections. Returns zero and `true`
/// when there are no detections.
pub fn entity_loss(tape: &mut Tape, logits: Option<Var>, targets: &[usize]) -> Result<(Var, bool)> {
    match logits {
        Some(l) if !targets.is_empty() => {
            let s = tape.cross_entropy_sum(l, targets)?;
            Ok((tape.scale(s, 1.0 / targets.len() as f64), false))
        }
        _ => Ok((tape.constant(Tensor::scalar(0.0)), true)),
    }
}

/// Mean focal binary cross-entropy over every (row, predicate) entry.
pub fn relation_loss(tape: &mut Tape, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let n = tape.value(logits).len();
    let s = tape.focal_loss_sum(logits, targets, alpha, gamma)?;
    Ok(tape.scale(s, 1.0 / n.max(1) as f64))
}

/// The three objective components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub object: f64,
    pub relation: f64,
    pub guidance: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `total = lambda * object + relation + guidance`.
pub fn total_loss(object: f64, relation: f64, guidance: f64, lambda: f64) -> Result<LossBreakdown> {
    for (name, v) in [("object", object), ("relation", relation), ("guidance", guidance), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteComponent(name));
        }
    }
    Ok(LossBreakdown {
        object,
        relation,
        guidance,
        total: lambda * object + relation + guidance,
        lambda,
    })
}

/// Records the weighted total on the tape.
pub fn total_on_tape(tape: &mut Tape, object: Var, relation: Var, guidance: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(object, lambda);
    let a = tape.add(weighted, relation)?;
    tape.add(a, guidance)
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with decoupled weight decay.
    /// Every gradient is checked before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], config: &OptimConfig) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        let lr = config.learning_rate;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let p = store.get_mut(id).data_mut();
            for (i, &g) in grads[k].data().iter().enumerate() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + config.eps) + lr * config.weight_decay * p[i];
            }
        }
        Ok(())
    }
}
