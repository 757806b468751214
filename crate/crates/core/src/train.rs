//! Loss, auxiliary schedules, AdamW, plateau scheduling and gradient statistics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::Group;
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::model::ModelGrads;
use crate::tensor::Acts;

const LOG_FLOOR: f64 = 1e-12;

/// Auxiliary losses that can be mixed into the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    /// Mean `σ(e)(1 − σ(e))` over the relaxed embeddings.
    EmbeddingBinarization,
}

/// Linear ramp from 0 at `ramp_start_step` to `w_max` at `ramp_end_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxTerm {
    pub loss_id: AuxLoss,
    pub ramp_start_step: u64,
    pub ramp_end_step: u64,
    pub w_max: f64,
}

impl AuxTerm {
    pub fn weight(&self, step: u64) -> f64 {
        if step <= self.ramp_start_step {
            0.0
        } else if step >= self.ramp_end_step {
            self.w_max
        } else {
            self.w_max * (step - self.ramp_start_step) as f64 / (self.ramp_end_step - self.ramp_start_step) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub aux_terms: Vec<AuxTerm>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            label_smoothing: 0.1,
            aux_terms: vec![AuxTerm {
                loss_id: AuxLoss::EmbeddingBinarization,
                ramp_start_step: 1_000,
                ramp_end_step: 100_000,
                w_max: 0.1,
            }],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let a = self.label_smoothing;
        if !(0.0..1.0).contains(&a) {
            return Err(Error::config("loss.label_smoothing", format!("must be in [0,1), got {a}")));
        }
        for (i, t) in self.aux_terms.iter().enumerate() {
            if t.ramp_start_step >= t.ramp_end_step {
                return Err(Error::config(
                    format!("loss.aux_terms[{i}]"),
                    "ramp_start_step must be below ramp_end_step",
                ));
            }
            if !(t.w_max.is_finite() && t.w_max >= 0.0) {
                return Err(Error::config(format!("loss.aux_terms[{i}].w_max"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Total weight of the embedding regularizer at `step`.
    pub fn embedding_weight(&self, step: u64) -> f64 {
        self.aux_terms
            .iter()
            .filter(|t| t.loss_id == AuxLoss::EmbeddingBinarization)
            .map(|t| t.weight(step))
            .sum()
    }
}

/// Weight of an auxiliary term at step `t`.
pub fn aux_weight(t: u64, term: &AuxTerm) -> f64 {
    term.weight(t)
}

/// Cross-entropy of one distribution against the smoothed target
/// `(1 − α)·onehot + α/V`.
pub fn smoothed_ce_single(probs: &[f64], target: u32, alpha: f64) -> f64 {
    let v = probs.len() as f64;
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let y = alpha / v + if j == target as usize { 1.0 - alpha } else { 0.0 };
            if y == 0.0 {
                0.0
            } else {
                -y * p.max(LOG_FLOOR).ln()
            }
        })
        .sum()
}

/// Label-smoothed cross-entropy averaged over non-pad targets.
///
/// `probs[t]` is the softmax output at step `t` (`V × batch`). Returns the
/// loss and its gradient with respect to the pre-softmax scores.
pub fn smoothed_cross_entropy(probs: &[Acts], targets: &[Vec<u32>], alpha: f64) -> Result<(f64, Vec<Acts>)> {
    let batch = targets.len();
    let mut count = 0usize;
    for t in targets {
        if t.len() != probs.len() {
            return Err(Error::Shape {
                context: "target length",
                expected: probs.len(),
                actual: t.len(),
            });
        }
        count += t.iter().filter(|&&x| x != PAD).count();
    }
    if count == 0 {
        return Err(Error::Empty("non-pad target positions"));
    }
    let n = count as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (step, p) in probs.iter().enumerate() {
        if p.batch() != batch {
            return Err(Error::Shape {
                context: "probability batch",
                expected: batch,
                actual: p.batch(),
            });
        }
        let v = p.dim();
        let mut g = Acts::zeros(v, batch);
        for (s, t) in targets.iter().enumerate() {
            let target = t[step];
            if target == PAD {
                continue;
            }
            let col = p.sample(s);
            loss += smoothed_ce_single(&col, target, alpha);
            for (j, &pj) in col.iter().enumerate() {
                let y = alpha / v as f64 + if j == target as usize { 1.0 - alpha } else { 0.0 };
                g.set(j, s, (pj - y) / n);
            }
        }
        grads.push(g);
    }
    Ok((loss / n, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be finite and > 0"));
        }
        for (name, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must be in [0,1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Self {
        AdamW {
            lr: config.lr,
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. Decay is applied to the parameters as they were before
    /// this step. Non-finite gradients reject the whole step.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "optimizer tensors",
                expected: self.m.len(),
                actual: params.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape {
                    context: "optimizer tensor",
                    expected: self.m[i].len(),
                    actual: g.len(),
                });
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of tensor {i} at index {j}")));
            }
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * c.weight_decay;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] * decay - self.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub gamma: f64,
    /// Patience in training steps.
    pub patience: u64,
    pub min_delta: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            gamma: 0.8,
            patience: 10_000,
            min_delta: 1e-4,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("scheduler.gamma", "must be in (0,1)"));
        }
        if self.patience == 0 {
            return Err(Error::config("scheduler.patience", "must be > 0"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config("scheduler.min_delta", "must be >= 0"));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `γ` once validation loss has failed to
/// improve for `patience` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub best: f64,
    pub steps_since_improve: u64,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            best: f64::INFINITY,
            steps_since_improve: 0,
        }
    }

    /// Records a validation loss measured `steps_elapsed` steps after the
    /// previous one and returns the learning rate to use next.
    pub fn update(&mut self, val_loss: f64, steps_elapsed: u64, lr: f64) -> f64 {
        if val_loss < self.best - self.config.min_delta {
            self.best = val_loss;
            self.steps_since_improve = 0;
            return lr;
        }
        self.steps_since_improve += steps_elapsed;
        if self.steps_since_improve >= self.config.patience {
            self.steps_since_improve = 0;
            return lr * self.config.gamma;
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupGradStats {
    pub group: Group,
    pub mean: f64,
    pub std: f64,
    pub ratio: f64,
}

/// Mean, population std and their ratio of `|∂L/∂z|` over each group's logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    pub groups: Vec<GroupGradStats>,
}

impl GradStats {
    pub fn compute(grads: &ModelGrads) -> Result<Self> {
        let groups = Group::ALL
            .iter()
            .map(|&g| {
                let values: Vec<f64> = grads.group(g).iter().flatten().map(|v| v.abs()).collect();
                if values.is_empty() {
                    return Err(Error::Empty("gradient group"));
                }
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                Ok(GroupGradStats {
                    group: g,
                    mean,
                    std,
                    ratio: std / mean,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GradStats { groups })
    }

    pub const CSV_HEADER: &'static str = "step,group,mean,std,std_over_mean";

    pub fn csv_rows(&self, step: u64) -> String {
        self.groups
            .iter()
            .map(|g| format!("{step},{},{:e},{:e},{:.6}\n", g.group, g.mean, g.std, g.ratio))
            .collect()
    }
}

impl fmt::Display for GradStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "group  mean        std         std/mean")?;
        for g in &self.groups {
            writeln!(f, "{:<6} {:<11.4e} {:<11.4e} {:.4}", g.group.name(), g.mean, g.std, g.ratio)?;
        }
        Ok(())
    }
}
