//! Ego-as-teacher losses, confidence masks and the online optimizer step.

use serde::{Deserialize, Serialize};

use crate::detector::{AnchorPredictions, HeadOutput, REG_DIMS};
use crate::error::{Error, Result};
use crate::grad::{sigmoid, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

/// Optimizer hyperparameters shared by TTT and toy pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm clip; `<= 0` disables.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { kind: OptimizerKind::Adam, lr: 1e-4, weight_decay: 1e-4, clip_norm: 5.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("bad optimizer hyperparameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TttConfig {
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub lambda: f64,
    pub w_cls: f64,
    pub w_reg: f64,
    pub w_dir: f64,
    pub optim: OptimConfig,
}

impl Default for TttConfig {
    fn default() -> Self {
        TttConfig { tau_hi: 0.3, tau_lo: 0.1, lambda: 0.1, w_cls: 1.0, w_reg: 1.0, w_dir: 0.5, optim: OptimConfig::default() }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        // tau_lo == tau_hi is allowed and leaves the boost band empty.
        if !(0.0 <= self.tau_lo && self.tau_lo <= self.tau_hi && self.tau_hi <= 1.0) {
            return Err(Error::config(format!("need 0 <= tau_lo <= tau_hi <= 1, got {} / {}", self.tau_lo, self.tau_hi)));
        }
        if self.lambda < 0.0 || self.w_cls < 0.0 || self.w_reg < 0.0 || self.w_dir < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        self.optim.validate()
    }
}

/// Anchor index sets in ascending order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConfidenceMasks {
    pub m_hi: Vec<usize>,
    pub m_boost: Vec<usize>,
}

pub fn build_masks(teacher: &AnchorPredictions, cfg: &TttConfig) -> ConfidenceMasks {
    let mut m = ConfidenceMasks::default();
    for (a, &t) in teacher.cls_logits.data().iter().enumerate() {
        let p = sigmoid(t);
        if p > cfg.tau_hi {
            m.m_hi.push(a);
        } else if p > cfg.tau_lo {
            m.m_boost.push(a);
        }
    }
    m
}

/// Mean over `m_hi` of `w_cls BCE(s, σ(t)) + w_reg Σ smoothL1 + w_dir mean MSE(dir)`.
pub fn preservation_loss(
    tape: &mut Tape,
    student: &HeadOutput,
    teacher: &AnchorPredictions,
    masks: &ConfidenceMasks,
    cfg: &TttConfig,
) -> Result<Var> {
    let n = masks.m_hi.len();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    check_anchors(student, teacher)?;
    let t_cls = teacher.cls_logits.data();
    let t_reg = teacher.reg.data();
    let t_dir = teacher.dir_logits.data();

    let idx = masks.m_hi.iter().map(|&a| student.index(0, a)).collect();
    let s = tape.gather(student.raw, idx)?;
    let bce = tape.bce_logits(s, masks.m_hi.iter().map(|&a| sigmoid(t_cls[a])).collect())?;
    let bce = tape.sum(bce);
    let mut loss = tape.scale(bce, cfg.w_cls / n as f64);

    let idx = masks.m_hi.iter().flat_map(|&a| (0..REG_DIMS).map(move |k| student.index(1 + k, a))).collect();
    let r = tape.gather(student.raw, idx)?;
    let targets = masks.m_hi.iter().flat_map(|&a| t_reg[a * REG_DIMS..(a + 1) * REG_DIMS].iter().copied()).collect();
    let r = tape.smooth_l1(r, targets)?;
    let r = tape.sum(r);
    let r = tape.scale(r, cfg.w_reg / n as f64);
    loss = tape.add(loss, r)?;

    let idx = masks.m_hi.iter().flat_map(|&a| [7, 8].map(|k| student.index(k, a))).collect();
    let d = tape.gather(student.raw, idx)?;
    let targets = masks.m_hi.iter().flat_map(|&a| [t_dir[2 * a], t_dir[2 * a + 1]]).collect();
    let d = tape.sq_err(d, targets)?;
    let d = tape.sum(d);
    let d = tape.scale(d, cfg.w_dir / (2 * n) as f64);
    tape.add(loss, d)
}

/// `-mean over m_boost of log σ(s_cls)`.
pub fn enhancement_loss(tape: &mut Tape, student: &HeadOutput, masks: &ConfidenceMasks) -> Result<Var> {
    let n = masks.m_boost.len();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let s = tape.gather(student.raw, masks.m_boost.iter().map(|&a| student.index(0, a)).collect())?;
    let l = tape.neg_log_sigmoid(s);
    let l = tape.sum(l);
    Ok(tape.scale(l, 1.0 / n as f64))
}

/// Loss terms of one sample, as recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub pres: f64,
    pub enh: f64,
}

pub fn total_loss(
    tape: &mut Tape,
    student: &HeadOutput,
    teacher: &AnchorPredictions,
    masks: &ConfidenceMasks,
    cfg: &TttConfig,
) -> Result<LossTerms> {
    let p = preservation_loss(tape, student, teacher, masks, cfg)?;
    let e = enhancement_loss(tape, student, masks)?;
    let (pres, enh) = (tape.value(p).item(), tape.value(e).item());
    let es = tape.scale(e, cfg.lambda);
    let total = tape.add(p, es)?;
    Ok(LossTerms { total, pres, enh })
}

fn check_anchors(student: &HeadOutput, teacher: &AnchorPredictions) -> Result<()> {
    if student.cells.len() != teacher.anchors() {
        return Err(Error::shape(format!(
            "student has {} anchors, teacher {}",
            student.cells.len(),
            teacher.anchors()
        )));
    }
    Ok(())
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub norm_pre_clip: f64,
    pub norm_post_clip: f64,
    pub skipped: bool,
}

impl Optimizer {
    pub fn new(params: &[&Tensor]) -> Self {
        let m: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Optimizer { v: m.clone(), m, step: 0 }
    }

    /// One update of `params` (slot `i` = `params[i]`) from `grads`: skip on
    /// non-finite gradients, clip by global norm, decay, then Adam or SGD.
    /// Missing slots count as zero gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &Gradients, cfg: &OptimConfig) -> StepReport {
        let pre = grads.global_norm();
        if !pre.is_finite() {
            return StepReport { norm_pre_clip: pre, norm_post_clip: pre, skipped: true };
        }
        let scale = if cfg.clip_norm > 0.0 && pre > cfg.clip_norm { cfg.clip_norm / pre } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(i);
            let pd = p.data_mut();
            for x in pd.iter_mut() {
                *x *= decay;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..pd.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]) * scale;
                match cfg.kind {
                    OptimizerKind::Sgd => pd[j] -= cfg.lr * gj,
                    OptimizerKind::Adam => {
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                        pd[j] -= cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                    }
                }
            }
        }
        StepReport { norm_pre_clip: pre, norm_post_clip: pre * scale, skipped: false }
    }
}

#[cfg(test)]
mod tests;
