//! Evaluation metrics and their emission: per-class and shot-grouped
//! accuracy, balancedness, TKL vs. unit-temperature KL, client drift,
//! gradient angles and global/personal branch attribution.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledFeatureSet, ShotGroup, ShotGroups};
use crate::divergence::{self, BalancednessConfig, TemperatureBracket};
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::{self, GradientPair, PeftDelta, ZeroShotHead};

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassAccuracy {
    pub acc: Vec<f64>,
    pub test_counts: Vec<usize>,
}

impl PerClassAccuracy {
    /// Classes without any test sample (reported with accuracy 0).
    pub fn missing(&self) -> Vec<usize> {
        (0..self.acc.len()).filter(|&c| self.test_counts[c] == 0).collect()
    }

    /// Accuracies of classes that have test samples.
    pub fn present(&self) -> Vec<f64> {
        (0..self.acc.len())
            .filter(|&c| self.test_counts[c] > 0)
            .map(|c| self.acc[c])
            .collect()
    }
}

pub fn per_class_accuracy<P>(predict: P, test: &LabeledFeatureSet) -> Result<PerClassAccuracy>
where
    P: Fn(&[f64]) -> Result<usize>,
{
    if test.is_empty() {
        return Err(Error::domain("per-class accuracy on an empty test set"));
    }
    let c = test.num_classes();
    let mut hits = vec![0usize; c];
    for i in 0..test.len() {
        if predict(test.x(i))? == test.labels[i] {
            hits[test.labels[i]] += 1;
        }
    }
    let acc = (0..c)
        .map(|k| match test.class_counts[k] {
            0 => 0.0,
            n => hits[k] as f64 / n as f64,
        })
        .collect();
    Ok(PerClassAccuracy {
        acc,
        test_counts: test.class_counts.clone(),
    })
}

/// Sample-weighted accuracy overall and per shot group; groups without test
/// samples are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupedAccuracy {
    pub all: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

fn weighted(acc: &[f64], counts: &[usize], classes: impl Iterator<Item = usize>) -> Option<f64> {
    let (mut hit, mut n) = (0.0, 0usize);
    for c in classes {
        hit += acc[c] * counts[c] as f64;
        n += counts[c];
    }
    (n > 0).then(|| hit / n as f64)
}

pub fn grouped_accuracy(per_class: &PerClassAccuracy, groups: &ShotGroups) -> GroupedAccuracy {
    let (a, n) = (&per_class.acc, &per_class.test_counts);
    GroupedAccuracy {
        all: weighted(a, n, 0..a.len()).unwrap_or(0.0),
        many: weighted(a, n, groups.many.iter().copied()),
        medium: weighted(a, n, groups.medium.iter().copied()),
        few: weighted(a, n, groups.few.iter().copied()),
    }
}

pub fn client_drift(local: &PeftDelta, global: &PeftDelta) -> Result<f64> {
    Ok(local.delta.sub(&global.delta)?.norm())
}

/// Degrees in [0, 180]; `None` when either gradient is (numerically) zero.
pub fn gradient_angle(pair: &GradientPair) -> Option<f64> {
    pair.angle_degrees()
}

/// Shares of correctly fused-classified samples credited to each branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionProfile {
    /// `(global, personal)` counts per class.
    pub counts: Vec<(usize, usize)>,
}

impl AttributionProfile {
    pub fn new(num_classes: usize) -> Self {
        AttributionProfile {
            counts: vec![(0, 0); num_classes],
        }
    }

    /// `(global share, personal share)` for classes with ≥ 1 correct prediction.
    pub fn shares(&self, class: usize) -> Option<(f64, f64)> {
        let (g, p) = self.counts[class];
        let n = g + p;
        (n > 0).then(|| (g as f64 / n as f64, p as f64 / n as f64))
    }

    /// Mean personal share over the group's classes that have one.
    pub fn group_personal_share(&self, groups: &ShotGroups, g: ShotGroup) -> Option<f64> {
        let shares: Vec<f64> = groups
            .members(g)
            .iter()
            .filter_map(|&c| self.shares(c).map(|s| s.1))
            .collect();
        (!shares.is_empty()).then(|| shares.iter().sum::<f64>() / shares.len() as f64)
    }

    pub fn merge(&mut self, other: &AttributionProfile) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }
}

/// Credits each correct fused prediction to the global branch when its
/// true-class logit strictly exceeds the personal branch's, else personal.
pub fn branch_attribution(
    head: &ZeroShotHead,
    phi_g: &PeftDelta,
    phi_k: &PeftDelta,
    test: &LabeledFeatureSet,
) -> Result<AttributionProfile> {
    let mut prof = AttributionProfile::new(test.num_classes());
    for i in 0..test.len() {
        let x = test.x(i);
        let y = test.labels[i];
        let lg = model::finetuned_logits(x, head, phi_g)?;
        let lp = model::finetuned_logits(x, head, phi_k)?;
        let fused: Vec<f64> = lg.iter().zip(&lp).map(|(a, b)| a + b).collect();
        if argmax(&fused) != y {
            continue;
        }
        if lg[y] > lp[y] {
            prof.counts[y].0 += 1;
        } else {
            prof.counts[y].1 += 1;
        }
    }
    Ok(prof)
}

/// Mean TKL(f, z) and mean KL(σ₁(f) ‖ σ₁(z)) over `samples`.
pub fn tkl_trajectory(
    head: &ZeroShotHead,
    phi_g: &PeftDelta,
    samples: &LabeledFeatureSet,
    bracket: &TemperatureBracket,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::domain("TKL trajectory over an empty sample set"));
    }
    let (mut t, mut k) = (0.0, 0.0);
    for i in 0..samples.len() {
        let x = samples.x(i);
        let f = model::finetuned_logits(x, head, phi_g)?;
        let z = model::zero_shot_logits(x, head)?;
        t += divergence::tkl_with(&f, &z, bracket)?.0;
        k += divergence::kl_raw(&divergence::softmax_raw(&f, 1.0), &divergence::softmax_raw(&z, 1.0));
    }
    let n = samples.len() as f64;
    Ok((t / n, k / n))
}

/// One metrics row. Field order is the emitted column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub phase: String,
    pub round: usize,
    pub gm_acc_all: f64,
    pub gm_acc_many: Option<f64>,
    pub gm_acc_medium: Option<f64>,
    pub gm_acc_few: Option<f64>,
    pub gm_local_acc: Option<f64>,
    pub pm_acc_all: Option<f64>,
    pub pm_acc_many: Option<f64>,
    pub pm_acc_medium: Option<f64>,
    pub pm_acc_few: Option<f64>,
    pub gm_balancedness: f64,
    pub pm_balancedness: Option<f64>,
    pub mean_tkl: f64,
    pub mean_kl: f64,
    pub mean_drift: Option<f64>,
    pub max_drift: Option<f64>,
    pub mean_angle_deg: Option<f64>,
    pub fire_rate: Option<f64>,
    pub clamp_events: u64,
    pub failed_clients: usize,
}

pub const RECORD_FIELDS: [&str; 21] = [
    "phase",
    "round",
    "gm_acc_all",
    "gm_acc_many",
    "gm_acc_medium",
    "gm_acc_few",
    "gm_local_acc",
    "pm_acc_all",
    "pm_acc_many",
    "pm_acc_medium",
    "pm_acc_few",
    "gm_balancedness",
    "pm_balancedness",
    "mean_tkl",
    "mean_kl",
    "mean_drift",
    "max_drift",
    "mean_angle_deg",
    "fire_rate",
    "clamp_events",
    "failed_clients",
];

/// Rounds to 6 significant digits.
pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn sig6_opt(v: Option<f64>) -> Option<f64> {
    v.map(sig6)
}

impl RoundRecord {
    /// Copy with every float rounded to emitted precision.
    pub fn rounded(&self) -> RoundRecord {
        RoundRecord {
            phase: self.phase.clone(),
            round: self.round,
            gm_acc_all: sig6(self.gm_acc_all),
            gm_acc_many: sig6_opt(self.gm_acc_many),
            gm_acc_medium: sig6_opt(self.gm_acc_medium),
            gm_acc_few: sig6_opt(self.gm_acc_few),
            gm_local_acc: sig6_opt(self.gm_local_acc),
            pm_acc_all: sig6_opt(self.pm_acc_all),
            pm_acc_many: sig6_opt(self.pm_acc_many),
            pm_acc_medium: sig6_opt(self.pm_acc_medium),
            pm_acc_few: sig6_opt(self.pm_acc_few),
            gm_balancedness: sig6(self.gm_balancedness),
            pm_balancedness: sig6_opt(self.pm_balancedness),
            mean_tkl: sig6(self.mean_tkl),
            mean_kl: sig6(self.mean_kl),
            mean_drift: sig6_opt(self.mean_drift),
            max_drift: sig6_opt(self.max_drift),
            mean_angle_deg: sig6_opt(self.mean_angle_deg),
            fire_rate: sig6_opt(self.fire_rate),
            clamp_events: self.clamp_events,
            failed_clients: self.failed_clients,
        }
    }
}

/// Writes `<stem>.jsonl` and `<stem>.csv` with identical values.
pub fn emit_records(records: &[RoundRecord], jsonl: &Path, csv_path: &Path) -> Result<()> {
    let file = File::create(jsonl).map_err(|e| Error::io(jsonl, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r.rounded()).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(jsonl, e))?;
    }
    w.flush().map_err(|e| Error::io(jsonl, e))?;

    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::Serde(format!("{}: {e}", csv_path.display()));
    cw.write_record(RECORD_FIELDS).map_err(csv_err)?;
    for r in records {
        cw.serialize(r.rounded()).map_err(csv_err)?;
    }
    cw.flush().map_err(|e| Error::io(csv_path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

/// Frozen evaluation context shared by every round.
pub struct Evaluator<'a> {
    pub head: &'a ZeroShotHead,
    pub balanced_test: &'a LabeledFeatureSet,
    pub local_tests: &'a [LabeledFeatureSet],
    pub groups: &'a ShotGroups,
    pub trajectory_set: &'a LabeledFeatureSet,
    pub balancedness: BalancednessConfig,
    pub bracket: TemperatureBracket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmMetrics {
    pub per_class: PerClassAccuracy,
    pub grouped: GroupedAccuracy,
    pub balancedness: f64,
    pub mean_tkl: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmMetrics {
    /// Mean over clients with a non-empty local test.
    pub grouped: GroupedAccuracy,
    pub balancedness: f64,
    pub gm_local_acc: f64,
    /// Per-client `(PM acc, GM acc)` on local tests; `None` for empty tests.
    pub per_client: Vec<Option<(f64, f64)>>,
    pub attribution: AttributionProfile,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Evaluator<'_> {
    pub fn gm(&self, phi_g: &PeftDelta) -> Result<GmMetrics> {
        let per_class = per_class_accuracy(
            |x| model::predict_gm(x, self.head, phi_g),
            self.balanced_test,
        )?;
        let grouped = grouped_accuracy(&per_class, self.groups);
        let balancedness = divergence::balancedness(&per_class.acc, &self.balancedness)?;
        let (mean_tkl, mean_kl) =
            tkl_trajectory(self.head, phi_g, self.trajectory_set, &self.bracket)?;
        Ok(GmMetrics {
            per_class,
            grouped,
            balancedness,
            mean_tkl,
            mean_kl,
        })
    }

    /// Mean GM accuracy on the local tests (PM with zero residuals).
    pub fn gm_local(&self, phi_g: &PeftDelta) -> Result<Option<f64>> {
        let mut accs = Vec::new();
        for t in self.local_tests.iter().filter(|t| !t.is_empty()) {
            let pc = per_class_accuracy(|x| model::predict_gm(x, self.head, phi_g), t)?;
            accs.push(Some(grouped_accuracy(&pc, self.groups).all));
        }
        Ok(mean_opt(accs.into_iter()))
    }

    pub fn pm(&self, phi_g: &PeftDelta, phi_k: &[PeftDelta]) -> Result<PmMetrics> {
        let mut per_client = Vec::with_capacity(self.local_tests.len());
        let mut grouped = Vec::new();
        let mut bal = Vec::new();
        let mut attribution = AttributionProfile::new(self.head.num_classes());
        for (t, pk) in self.local_tests.iter().zip(phi_k) {
            if t.is_empty() {
                per_client.push(None);
                continue;
            }
            let pc = per_class_accuracy(|x| model::predict_pm(x, self.head, phi_g, pk), t)?;
            let gc = per_class_accuracy(|x| model::predict_gm(x, self.head, phi_g), t)?;
            let g = grouped_accuracy(&pc, self.groups);
            per_client.push(Some((g.all, grouped_accuracy(&gc, self.groups).all)));
            grouped.push(g);
            bal.push(divergence::balancedness(&pc.present(), &self.balancedness)?);
            attribution.merge(&branch_attribution(self.head, phi_g, pk, t)?);
        }
        if grouped.is_empty() {
            return Err(Error::domain("no client has a non-empty local test set"));
        }
        let n = grouped.len() as f64;
        Ok(PmMetrics {
            grouped: GroupedAccuracy {
                all: grouped.iter().map(|g| g.all).sum::<f64>() / n,
                many: mean_opt(grouped.iter().map(|g| g.many)),
                medium: mean_opt(grouped.iter().map(|g| g.medium)),
                few: mean_opt(grouped.iter().map(|g| g.few)),
            },
            balancedness: bal.iter().sum::<f64>() / n,
            gm_local_acc: per_client.iter().flatten().map(|p| p.1).sum::<f64>() / n,
            per_client,
            attribution,
        })
    }
}
