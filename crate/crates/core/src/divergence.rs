//! Temperature softmax, entropy, entropy-matched temperatures, KL and the
//! temperature-aligned KL used both as a training signal and as a diagnostic,
//! plus the pairwise-kernel balancedness score over per-class accuracies.
//!
//! Entropies are in nats. Everything here is a pure function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside `ln` for KL.
pub const PROB_FLOOR: f64 = 1e-12;

/// Logit spreads below this are treated as constant.
const CONSTANT_LOGITS: f64 = 1e-12;

/// A validated probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::domain("empty probability vector"));
        }
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("probability {v} outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Search bracket and stopping rule for the temperature solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureBracket {
    pub tau_min: f64,
    pub tau_max: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for TemperatureBracket {
    fn default() -> Self {
        TemperatureBracket {
            tau_min: 1e-4,
            tau_max: 1e4,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

impl TemperatureBracket {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_max > self.tau_min && self.tau_max.is_finite()) {
            return Err(Error::domain(format!(
                "temperature bracket [{}, {}] is not a positive interval",
                self.tau_min, self.tau_max
            )));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::domain("solver needs max_iter >= 1 and tol > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clamp {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSolution {
    pub tau: f64,
    pub clamp: Option<Clamp>,
}

/// Temperatures used by one temperature-aligned comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentState {
    pub target_entropy: f64,
    pub tau_f: f64,
    pub tau_z: f64,
    /// Number of the two solves that hit a bracket endpoint (0..=2).
    pub clamp_events: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancednessConfig {
    pub sigma: f64,
}

impl Default for BalancednessConfig {
    fn default() -> Self {
        BalancednessConfig { sigma: 0.1 }
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::domain("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite logit"));
    }
    Ok(())
}

/// Unchecked `softmax(logits / tau)` with max subtraction.
pub(crate) fn softmax_into(logits: &[f64], tau: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &l in logits {
        let e = ((l - max) / tau).exp();
        out.push(e);
        z += e;
    }
    for v in out.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn softmax_raw(logits: &[f64], tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    softmax_into(logits, tau, &mut out);
    out
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

/// Σ p ln(p / q) with both sides floored at [`PROB_FLOOR`].
pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pc, &qc) in p.iter().zip(q) {
        if pc > 0.0 {
            acc += pc * (pc.max(PROB_FLOOR).ln() - qc.max(PROB_FLOOR).ln());
        }
    }
    acc.max(0.0)
}

pub fn temperature_softmax(logits: &[f64], tau: f64) -> Result<ProbVector> {
    check_logits(logits)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("temperature {tau} must be positive and finite")));
    }
    Ok(ProbVector(softmax_raw(logits, tau)))
}

pub fn entropy(p: &ProbVector) -> f64 {
    entropy_raw(&p.0)
}

pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(p.len(), q.len()));
    }
    Ok(kl_raw(&p.0, &q.0))
}

fn entropy_at(logits: &[f64], tau: f64, scratch: &mut Vec<f64>) -> f64 {
    softmax_into(logits, tau, scratch);
    entropy_raw(scratch)
}

/// Finds `tau` with `H(softmax(logits / tau)) = target_entropy`.
///
/// Entropy is strictly increasing in `tau` for non-constant logits, so the
/// root is bracketed and found by bisection on `ln tau`. Targets outside the
/// entropy range reachable inside the bracket return the nearest endpoint
/// with a clamp flag instead of an error.
pub fn solve_aligned_temperature(
    logits: &[f64],
    target_entropy: f64,
    bracket: &TemperatureBracket,
) -> Result<TemperatureSolution> {
    check_logits(logits)?;
    if !target_entropy.is_finite() {
        return Err(Error::domain("non-finite target entropy"));
    }
    let (lo_l, hi_l) = logits
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi_l - lo_l <= CONSTANT_LOGITS {
        return Ok(TemperatureSolution { tau: 1.0, clamp: None });
    }

    let mut scratch = Vec::with_capacity(logits.len());
    let h_min = entropy_at(logits, bracket.tau_min, &mut scratch);
    let h_max = entropy_at(logits, bracket.tau_max, &mut scratch);
    if target_entropy <= h_min {
        let clamp = (h_min - target_entropy > bracket.tol).then_some(Clamp::Low);
        return Ok(TemperatureSolution { tau: bracket.tau_min, clamp });
    }
    if target_entropy >= h_max {
        let clamp = (target_entropy - h_max > bracket.tol).then_some(Clamp::High);
        return Ok(TemperatureSolution { tau: bracket.tau_max, clamp });
    }

    let mut lo = bracket.tau_min.ln();
    let mut hi = bracket.tau_max.ln();
    let mut best = (f64::INFINITY, 1.0);
    for _ in 0..bracket.max_iter {
        let mid = 0.5 * (lo + hi);
        let tau = mid.exp();
        let h = entropy_at(logits, tau, &mut scratch);
        let err = h - target_entropy;
        if err.abs() < best.0 {
            best = (err.abs(), tau);
        }
        if err.abs() <= bracket.tol {
            break;
        }
        if err < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(TemperatureSolution {
        tau: best.1,
        clamp: None,
    })
}

/// Temperature-aligned KL: both logit vectors are re-tempered to the mean of
/// their unit-temperature entropies, then `KL(aligned finetuned ‖ aligned zero-shot)`.
pub fn tkl(finetuned: &[f64], zeroshot: &[f64]) -> Result<(f64, AlignmentState)> {
    tkl_with(finetuned, zeroshot, &TemperatureBracket::default())
}

pub fn tkl_with(
    finetuned: &[f64],
    zeroshot: &[f64],
    bracket: &TemperatureBracket,
) -> Result<(f64, AlignmentState)> {
    let state = align(finetuned, zeroshot, bracket)?;
    let p = softmax_raw(finetuned, state.tau_f);
    let q = softmax_raw(zeroshot, state.tau_z);
    Ok((kl_raw(&p, &q), state))
}

/// Solves both aligned temperatures for a (finetuned, zero-shot) logit pair.
pub fn align(
    finetuned: &[f64],
    zeroshot: &[f64],
    bracket: &TemperatureBracket,
) -> Result<AlignmentState> {
    check_logits(finetuned)?;
    check_logits(zeroshot)?;
    if finetuned.len() != zeroshot.len() {
        return Err(Error::shape(finetuned.len(), zeroshot.len()));
    }
    if finetuned.len() < 2 {
        return Err(Error::domain("temperature alignment needs at least two classes"));
    }
    let h_f = entropy_raw(&softmax_raw(finetuned, 1.0));
    let h_z = entropy_raw(&softmax_raw(zeroshot, 1.0));
    let target = 0.5 * (h_f + h_z);
    let sf = solve_aligned_temperature(finetuned, target, bracket)?;
    let sz = solve_aligned_temperature(zeroshot, target, bracket)?;
    Ok(AlignmentState {
        target_entropy: target,
        tau_f: sf.tau,
        tau_z: sz.tau,
        clamp_events: sf.clamp.is_some() as u32 + sz.clamp.is_some() as u32,
    })
}

/// Pairwise Gaussian-kernel similarity of per-class accuracies, in (0, 1].
pub fn balancedness(per_class_acc: &[f64], cfg: &BalancednessConfig) -> Result<f64> {
    if per_class_acc.is_empty() {
        return Err(Error::domain("balancedness of zero classes"));
    }
    if !(cfg.sigma > 0.0) {
        return Err(Error::domain(format!("sigma {} must be positive", cfg.sigma)));
    }
    if let Some(a) = per_class_acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::domain(format!("accuracy {a} outside [0, 1]")));
    }
    let c = per_class_acc.len() as f64;
    let mut acc = 0.0;
    for &ai in per_class_acc {
        for &aj in per_class_acc {
            let d = ai - aj;
            acc += (-(d * d) / cfg.sigma).exp();
        }
    }
    Ok(acc / (c * c))
}
