//! Progressive specialist weighting: a linear ramp on in-domain sample
//! weights and the weighted hard-distillation loss it feeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{argmax, softmax_row};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub total_epochs: u32,
    pub max_weight: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            total_epochs: 200,
            max_weight: 14.0,
        }
    }
}

impl ScheduleParams {
    pub fn new(total_epochs: u32, max_weight: f64) -> Result<Self> {
        let p = ScheduleParams {
            total_epochs,
            max_weight,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < 1 {
            return Err(Error::validation("total_epochs must be at least 1"));
        }
        if !(self.max_weight >= 1.0 && self.max_weight.is_finite()) {
            return Err(Error::validation(format!(
                "max_weight must be >= 1, got {}",
                self.max_weight
            )));
        }
        Ok(())
    }

    fn check_epoch(&self, t: f64) -> Result<()> {
        self.validate()?;
        if !(0.0..=self.total_epochs as f64).contains(&t) {
            return Err(Error::validation(format!(
                "epoch {t} outside [0, {}]",
                self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Scaling factor at epoch `t`: rises linearly from 1 at `t = 0` to `W` at `t = T`.
pub fn omega(t: f64, params: &ScheduleParams) -> Result<f64> {
    params.check_epoch(t)?;
    let w = params.max_weight;
    if t == params.total_epochs as f64 {
        return Ok(w);
    }
    Ok(1.0 + t / params.total_epochs as f64 * (w - 1.0))
}

/// Weight of one sample: `omega(t)` inside the target domain, 1 outside.
pub fn sample_weight(in_domain: bool, t: f64, params: &ScheduleParams) -> Result<f64> {
    let w = omega(t, params)?;
    Ok(if in_domain { w } else { 1.0 })
}

/// Operands of the weighted distillation loss for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    num_classes: usize,
    student_logits: Vec<f64>,
    true_labels: Vec<usize>,
    teacher_labels: Vec<usize>,
    in_target_domain: Vec<bool>,
}

impl DistillBatch {
    pub fn new(
        num_classes: usize,
        student_logits: Vec<f64>,
        true_labels: Vec<usize>,
        teacher_labels: Vec<usize>,
        in_target_domain: Vec<bool>,
    ) -> Result<Self> {
        let b = true_labels.len();
        if num_classes == 0 {
            return Err(Error::validation("num_classes is zero"));
        }
        if student_logits.len() != b * num_classes
            || teacher_labels.len() != b
            || in_target_domain.len() != b
        {
            return Err(Error::validation(format!(
                "inconsistent batch: {} logits, {} labels, {} teacher labels, {} domain flags for N={num_classes}",
                student_logits.len(),
                b,
                teacher_labels.len(),
                in_target_domain.len()
            )));
        }
        for (what, labels) in [("label", &true_labels), ("teacher label", &teacher_labels)] {
            if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
                return Err(Error::validation(format!(
                    "{what} {} at row {i} out of range [0, {num_classes})",
                    labels[i]
                )));
            }
        }
        if student_logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("non-finite student logit"));
        }
        Ok(DistillBatch {
            num_classes,
            student_logits,
            true_labels,
            teacher_labels,
            in_target_domain,
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn student_logits(&self) -> &[f64] {
        &self.student_logits
    }

    pub fn with_student_logits(&self, logits: Vec<f64>) -> Result<Self> {
        DistillBatch::new(
            self.num_classes,
            logits,
            self.true_labels.clone(),
            self.teacher_labels.clone(),
            self.in_target_domain.clone(),
        )
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.student_logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Per-sample weights at epoch `t`.
    pub fn weights(&self, t: f64, params: &ScheduleParams) -> Result<Vec<f64>> {
        let w = omega(t, params)?;
        Ok(self
            .in_target_domain
            .iter()
            .map(|&d| if d { w } else { 1.0 })
            .collect())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy (natural log) of softmax(row) against class `y`.
pub fn cross_entropy(row: &[f64], y: usize) -> f64 {
    log_sum_exp(row) - row[y]
}

/// Weighted loss with explicit per-sample weights.
pub fn distill_loss_with_weights(batch: &DistillBatch, weights: &[f64]) -> Result<f64> {
    if weights.len() != batch.len() {
        return Err(Error::validation(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    Ok((0..batch.len())
        .map(|i| {
            let row = batch.row(i);
            weights[i]
                * (0.5 * cross_entropy(row, batch.true_labels[i])
                    + 0.5 * cross_entropy(row, batch.teacher_labels[i]))
        })
        .sum())
}

/// Sum over the batch of `w_i * (CE(s_i, y_i) + CE(s_i, y^T_i)) / 2`.
pub fn weighted_distill_loss(batch: &DistillBatch, t: f64, params: &ScheduleParams) -> Result<f64> {
    let w = batch.weights(t, params)?;
    distill_loss_with_weights(batch, &w)
}

/// Analytic gradient of [`distill_loss_with_weights`] with respect to the
/// student logits, row-major like the logits.
pub fn distill_loss_gradient(batch: &DistillBatch, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != batch.len() {
        return Err(Error::validation("weights/batch length mismatch"));
    }
    let n = batch.num_classes;
    let mut grad = Vec::with_capacity(batch.student_logits.len());
    for i in 0..batch.len() {
        let p = softmax_row(batch.row(i))?;
        let w = weights[i];
        for (c, &pc) in p.iter().enumerate() {
            let hit_y = (c == batch.true_labels[i]) as u8 as f64;
            let hit_t = (c == batch.teacher_labels[i]) as u8 as f64;
            grad.push(w * 0.5 * (pc - hit_y) + w * 0.5 * (pc - hit_t));
        }
        debug_assert_eq!(grad.len(), (i + 1) * n);
    }
    Ok(grad)
}

/// The teacher's hard label: argmax with ties to the lowest index.
pub fn hard_teacher_label(teacher_row: &[f64]) -> Result<usize> {
    argmax(teacher_row).ok_or_else(|| Error::validation("empty teacher row"))
}
