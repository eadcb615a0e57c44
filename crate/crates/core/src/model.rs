//! Linear adaptation head over frozen features.
//!
//! Zero-shot logits are `s · P x` for immutable class prototypes `P`; a
//! trainable additive delta `φ` gives fine-tuned logits `s · (P + φ) x`.
//! Task (cross-entropy), alignment (temperature-aligned KL against the
//! zero-shot prediction) and personalization gradients are analytic.
//!
//! The aligned temperatures are solved per sample and then held fixed while
//! differentiating the alignment loss (stop-gradient through `τ`).

use serde::{Deserialize, Serialize};

use crate::divergence::{self, AlignmentState, TemperatureBracket};
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, Mat};

/// Gradients with a norm below this carry no alignment signal.
const ALIGN_NORM_FLOOR: f64 = 1e-12;

/// Class prototypes plus logit scale. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotHead {
    prototypes: Mat,
    logit_scale: f64,
}

impl ZeroShotHead {
    pub fn new(prototypes: Mat, logit_scale: f64) -> Result<Self> {
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(Error::domain(format!("logit scale {logit_scale} must be positive")));
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite("prototypes"));
        }
        if prototypes.rows() == 0 || prototypes.cols() == 0 {
            return Err(Error::domain("prototype matrix must be non-empty"));
        }
        Ok(ZeroShotHead {
            prototypes,
            logit_scale,
        })
    }

    pub fn prototypes(&self) -> &Mat {
        &self.prototypes
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim() {
            return Err(Error::shape(
                format!("feature vector of length {}", self.feature_dim()),
                x.len(),
            ));
        }
        Ok(())
    }

    fn check_delta(&self, phi: &PeftDelta) -> Result<()> {
        self.prototypes.ensure_same_shape(&phi.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Global,
    Personal(usize),
}

/// Additive adaptation parameters on top of the prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftDelta {
    pub delta: Mat,
    pub role: Role,
}

impl PeftDelta {
    pub fn zeros_like(head: &ZeroShotHead, role: Role) -> Self {
        PeftDelta {
            delta: Mat::zeros(head.num_classes(), head.feature_dim()),
            role,
        }
    }

    /// Weights the delta induces: `P + φ`.
    pub fn effective(&self, head: &ZeroShotHead) -> Result<Mat> {
        head.prototypes.add(&self.delta)
    }
}

/// Task and alignment gradients for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub g_task: Mat,
    pub g_align: Mat,
    pub inner_product: f64,
    pub purified: bool,
}

impl GradientPair {
    pub fn new(g_task: Mat, g_align: Mat) -> Result<Self> {
        g_task.ensure_same_shape(&g_align)?;
        let inner_product = g_task.inner(&g_align);
        Ok(GradientPair {
            g_task,
            g_align,
            inner_product,
            purified: false,
        })
    }

    /// Angle between the two gradients in degrees; `None` if either is ~0.
    pub fn angle_degrees(&self) -> Option<f64> {
        let nt = self.g_task.norm();
        let na = self.g_align.norm();
        if nt <= ALIGN_NORM_FLOOR || na <= ALIGN_NORM_FLOOR {
            return None;
        }
        let cos = (self.inner_product / (nt * na)).clamp(-1.0, 1.0);
        Some(cos.acos().to_degrees())
    }
}

fn logits_with(weights: &Mat, scale: f64, x: &[f64]) -> Vec<f64> {
    (0..weights.rows())
        .map(|r| scale * dot(weights.row(r), x))
        .collect()
}

pub fn zero_shot_logits(x: &[f64], head: &ZeroShotHead) -> Result<Vec<f64>> {
    head.check_x(x)?;
    Ok(logits_with(&head.prototypes, head.logit_scale, x))
}

pub fn finetuned_logits(x: &[f64], head: &ZeroShotHead, phi: &PeftDelta) -> Result<Vec<f64>> {
    head.check_x(x)?;
    let w = phi.effective(head)?;
    Ok(logits_with(&w, head.logit_scale, x))
}

/// `l_G + l_P`: both branches include the prototype pass.
pub fn fused_logits(
    x: &[f64],
    head: &ZeroShotHead,
    phi_g: &PeftDelta,
    phi_k: &PeftDelta,
) -> Result<Vec<f64>> {
    let g = finetuned_logits(x, head, phi_g)?;
    let p = finetuned_logits(x, head, phi_k)?;
    Ok(g.iter().zip(&p).map(|(a, b)| a + b).collect())
}

/// `-ln softmax(logits)_y` and `softmax(logits)`.
fn ce_from_logits(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let p = divergence::softmax_raw(logits, 1.0);
    (lse - logits[y], p)
}

fn check_label(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(Error::domain(format!("label {y} outside [0, {c})")));
    }
    Ok(())
}

/// Per-sample kernels working on precomputed effective weights.
pub(crate) mod kernel {
    use super::*;

    /// Adds `k · ∇ CE` into `grad`, returns the loss.
    pub fn ce_accumulate(
        weights: &Mat,
        scale: f64,
        x: &[f64],
        y: usize,
        k: f64,
        grad: &mut Mat,
    ) -> f64 {
        let logits = logits_with(weights, scale, x);
        let (loss, mut p) = ce_from_logits(&logits, y);
        p[y] -= 1.0;
        grad.add_outer(k * scale, &p, x);
        loss
    }

    /// Adds `k · ∇ KL(q_zs ‖ p_ft)` with temperatures held fixed.
    pub fn align_accumulate(
        weights: &Mat,
        prototypes: &Mat,
        scale: f64,
        x: &[f64],
        bracket: &TemperatureBracket,
        k: f64,
        grad: &mut Mat,
    ) -> Result<(f64, AlignmentState)> {
        let f = logits_with(weights, scale, x);
        let z = logits_with(prototypes, scale, x);
        let state = divergence::align(&f, &z, bracket)?;
        let p = divergence::softmax_raw(&f, state.tau_f);
        let q = divergence::softmax_raw(&z, state.tau_z);
        let loss = divergence::kl_raw(&q, &p);
        let diff: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
        grad.add_outer(k * scale / state.tau_f, &diff, x);
        Ok((loss, state))
    }
}

pub fn ce_loss_and_grad(
    x: &[f64],
    y: usize,
    head: &ZeroShotHead,
    phi: &PeftDelta,
) -> Result<(f64, Mat)> {
    head.check_x(x)?;
    check_label(y, head.num_classes())?;
    let w = phi.effective(head)?;
    let mut grad = Mat::zeros(w.rows(), w.cols());
    let loss = kernel::ce_accumulate(&w, head.logit_scale, x, y, 1.0, &mut grad);
    Ok((loss, grad))
}

/// Alignment loss `KL(σ_τz(z) ‖ σ_τf(f))` and its gradient in `φ`.
pub fn tkl_loss_and_grad(
    x: &[f64],
    head: &ZeroShotHead,
    phi: &PeftDelta,
    bracket: &TemperatureBracket,
) -> Result<(f64, Mat, AlignmentState)> {
    head.check_x(x)?;
    let w = phi.effective(head)?;
    let mut grad = Mat::zeros(w.rows(), w.cols());
    let (loss, state) = kernel::align_accumulate(
        &w,
        &head.prototypes,
        head.logit_scale,
        x,
        bracket,
        1.0,
        &mut grad,
    )?;
    Ok((loss, grad, state))
}

/// Removes the component of the task gradient that conflicts with the
/// alignment gradient. Sets `pair.purified` when the projection fires.
pub fn purify(pair: &mut GradientPair) -> Mat {
    let na2 = pair.g_align.norm_sq();
    if pair.inner_product >= 0.0 || na2.sqrt() < ALIGN_NORM_FLOOR {
        pair.purified = false;
        return pair.g_task.clone();
    }
    pair.purified = true;
    let mut out = pair.g_task.clone();
    out.add_scaled(-pair.inner_product / na2, &pair.g_align)
        .expect("pair shapes checked at construction");
    out
}

pub fn sgd_step(phi: &mut PeftDelta, grad: &Mat, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::domain(format!("learning rate {lr} must be positive")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    phi.delta.add_scaled(-lr, grad)
}

/// Composite personalization objective; only `phi_k` is differentiated.
pub fn personalization_loss_and_grad(
    x: &[f64],
    y: usize,
    head: &ZeroShotHead,
    phi_g: &PeftDelta,
    phi_k: &PeftDelta,
    lambda: f64,
) -> Result<(f64, Mat)> {
    head.check_x(x)?;
    head.check_delta(phi_g)?;
    check_label(y, head.num_classes())?;
    check_lambda(lambda)?;
    let wg = phi_g.effective(head)?;
    let wk = phi_k.effective(head)?;
    let mut grad = Mat::zeros(wk.rows(), wk.cols());
    let lg = logits_with(&wg, head.logit_scale, x);
    let loss = personal_accumulate(&lg, &wk, head.logit_scale, x, y, lambda, 1.0, &mut grad);
    Ok((loss, grad))
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Adds `k · ∇_φk` of the composite loss given frozen global-branch logits.
#[allow(clippy::too_many_arguments)]
pub(crate) fn personal_accumulate(
    global_logits: &[f64],
    wk: &Mat,
    scale: f64,
    x: &[f64],
    y: usize,
    lambda: f64,
    k: f64,
    grad: &mut Mat,
) -> f64 {
    let lp = logits_with(wk, scale, x);
    let fused: Vec<f64> = global_logits.iter().zip(&lp).map(|(a, b)| a + b).collect();
    let (loss_f, mut pf) = ce_from_logits(&fused, y);
    let (loss_p, mut pp) = ce_from_logits(&lp, y);
    pf[y] -= 1.0;
    pp[y] -= 1.0;
    let coef: Vec<f64> = pf
        .iter()
        .zip(&pp)
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    grad.add_outer(k * scale, &coef, x);
    (1.0 - lambda) * loss_f + lambda * loss_p
}

pub fn predict_gm(x: &[f64], head: &ZeroShotHead, phi_g: &PeftDelta) -> Result<usize> {
    Ok(argmax(&finetuned_logits(x, head, phi_g)?))
}

pub fn predict_pm(
    x: &[f64],
    head: &ZeroShotHead,
    phi_g: &PeftDelta,
    phi_k: &PeftDelta,
) -> Result<usize> {
    Ok(argmax(&fused_logits(x, head, phi_g, phi_k)?))
}
