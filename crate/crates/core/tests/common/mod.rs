//! Shared fixtures and independent numeric oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use fedlt::config::{parse_config, ExperimentConfig, Settings};

pub fn reference_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

/// The reference benchmark for one arm and seed.
pub fn reference(arm: &str, seed: u64) -> ExperimentConfig {
    let flags = Settings {
        arm: Some(arm.into()),
        seed: Some(seed),
        ..Settings::default()
    };
    parse_config(Some(&reference_path()), &flags).expect("reference config")
}

/// Small four-class workload for end-to-end checks.
pub fn micro(arm: &str, seed: u64) -> ExperimentConfig {
    ExperimentConfig::resolve(&Settings {
        classes: Some(4),
        dim: Some(8),
        n1: Some(40),
        imbalance: Some(10.0),
        clients: Some(4),
        rounds: Some(10),
        batch_size: Some(4),
        personal_rounds: Some(5),
        test_per_class: Some(20),
        local_test_size: Some(40),
        arm: Some(arm.into()),
        seed: Some(seed),
        ..Settings::default()
    })
    .expect("micro config")
}

pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// KL with both probabilities floored inside the log, as the library does.
pub fn floored_kl(p: &[f64], q: &[f64]) -> f64 {
    let floor = 1e-12f64;
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.max(floor).ln() - b.max(floor).ln()))
        .sum::<f64>()
        .max(0.0)
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    -softmax(logits, 1.0)[y].ln()
}

/// `s · W x` with `W` row-major `c × d`.
pub fn logits(w: &[f64], c: usize, x: &[f64], s: f64) -> Vec<f64> {
    let d = x.len();
    (0..c)
        .map(|r| s * (0..d).map(|j| w[r * d + j] * x[j]).sum::<f64>())
        .collect()
}

/// Central differences of `f` around `w`.
pub fn finite_diff(w: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = w.to_vec();
    (0..w.len())
        .map(|i| {
            p[i] = w[i] + h;
            let up = f(&p);
            p[i] = w[i] - h;
            let down = f(&p);
            p[i] = w[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
