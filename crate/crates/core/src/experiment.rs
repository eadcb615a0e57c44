//! End-to-end runs: data → Phase 1 → Phase 2 → metrics, summary, parameters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, Evaluator, GroupedAccuracy, RoundRecord};
use crate::config::{Arm, ExperimentConfig};
use crate::data::{self, LabeledFeatureSet, PartitionPlan, ShotGroup, ShotGroups};
use crate::error::{Error, Result};
use crate::federation::{self, Phase2Output};
use crate::model::{PeftDelta, ZeroShotHead};
use crate::par::Executor;
use crate::seed::{self, tag};

/// Everything a run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct Workload {
    pub train: LabeledFeatureSet,
    pub balanced_test: LabeledFeatureSet,
    pub head: ZeroShotHead,
    pub plan: PartitionPlan,
    pub shards: Vec<LabeledFeatureSet>,
    pub local_tests: Vec<LabeledFeatureSet>,
    pub groups: ShotGroups,
    pub trajectory_set: LabeledFeatureSet,
}

impl Workload {
    pub fn build(cfg: &ExperimentConfig) -> Result<Workload> {
        let (train, balanced_test, head) = match &cfg.ingest_embeddings {
            None => {
                let counts = data::longtail_counts(cfg.n1, cfg.classes, cfg.imbalance)?;
                let syn = data::synth_dataset(
                    &counts,
                    cfg.dim,
                    cfg.class_sep,
                    cfg.test_per_class,
                    cfg.data_seed,
                )?;
                let head = data::synth_zero_shot_head(
                    &syn.class_means,
                    cfg.nu,
                    cfg.logit_scale,
                    cfg.data_seed,
                )?;
                (syn.train, syn.balanced_test, head)
            }
            Some(train_path) => {
                let test_path = cfg.ingest_test_embeddings.as_ref().expect("validated");
                let proto_path = cfg.ingest_prototypes.as_ref().expect("validated");
                let train = data::load_embeddings(train_path, cfg.classes)?;
                let test = data::load_embeddings(test_path, cfg.classes)?;
                let head = data::load_prototypes(proto_path, cfg.classes, cfg.logit_scale)?;
                for (name, set) in [("training", &train), ("test", &test)] {
                    if set.dim() != head.feature_dim() {
                        return Err(Error::shape(
                            format!("{name} embeddings of dimension {}", head.feature_dim()),
                            set.dim(),
                        ));
                    }
                }
                (train, test, head)
            }
        };
        let plan = data::dirichlet_partition(&train, cfg.clients, cfg.alpha_dir, cfg.partition_seed)?;
        let shards: Vec<LabeledFeatureSet> = (0..cfg.clients)
            .map(|k| train.subset(&plan.client_indices(k)))
            .collect();
        let local_tests =
            data::make_local_test_sets(&balanced_test, &plan, cfg.local_test_size, cfg.data_seed)?;
        let groups = data::shot_categories(&train.class_counts);
        let trajectory_set = if balanced_test.len() <= cfg.eval_subset {
            balanced_test.clone()
        } else {
            let mut rng = seed::rng(cfg.data_seed, tag::EVAL_SUBSET, 0);
            let mut idx = index::sample(&mut rng, balanced_test.len(), cfg.eval_subset).into_vec();
            idx.sort_unstable();
            balanced_test.subset(&idx)
        };
        Ok(Workload {
            train,
            balanced_test,
            head,
            plan,
            shards,
            local_tests,
            groups,
            trajectory_set,
        })
    }

    pub fn evaluator(&self, cfg: &ExperimentConfig) -> Evaluator<'_> {
        Evaluator {
            head: &self.head,
            balanced_test: &self.balanced_test,
            local_tests: &self.local_tests,
            groups: &self.groups,
            trajectory_set: &self.trajectory_set,
            balancedness: cfg.balancedness(),
            bracket: cfg.bracket(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShares {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// End-of-run summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub arm: String,
    pub seed: u64,
    pub rounds: usize,
    pub personal_rounds: usize,
    pub zero_shot: GroupedAccuracy,
    pub zero_shot_balancedness: f64,
    pub gm: GroupedAccuracy,
    pub gm_balancedness: f64,
    pub gm_local_acc: Option<f64>,
    pub pm: Option<GroupedAccuracy>,
    pub pm_balancedness: Option<f64>,
    pub mean_drift: Option<f64>,
    pub final_tkl: f64,
    pub final_kl: f64,
    pub personal_attribution: Option<GroupShares>,
    pub empty_classes: Vec<usize>,
    pub empty_local_tests: Vec<usize>,
    pub failed_clients: Vec<String>,
}

impl Summary {
    fn rounded(&self) -> Summary {
        let g = |a: &GroupedAccuracy| GroupedAccuracy {
            all: analysis::sig6(a.all),
            many: a.many.map(analysis::sig6),
            medium: a.medium.map(analysis::sig6),
            few: a.few.map(analysis::sig6),
        };
        let mut s = self.clone();
        s.zero_shot = g(&s.zero_shot);
        s.gm = g(&s.gm);
        s.pm = s.pm.as_ref().map(g);
        s.zero_shot_balancedness = analysis::sig6(s.zero_shot_balancedness);
        s.gm_balancedness = analysis::sig6(s.gm_balancedness);
        s.gm_local_acc = s.gm_local_acc.map(analysis::sig6);
        s.pm_balancedness = s.pm_balancedness.map(analysis::sig6);
        s.mean_drift = s.mean_drift.map(analysis::sig6);
        s.final_tkl = analysis::sig6(s.final_tkl);
        s.final_kl = analysis::sig6(s.final_kl);
        s.personal_attribution = s.personal_attribution.map(|a| GroupShares {
            many: a.many.map(analysis::sig6),
            medium: a.medium.map(analysis::sig6),
            few: a.few.map(analysis::sig6),
        });
        s
    }
}

/// In-memory result of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub phi_g: PeftDelta,
    pub phase2: Option<Phase2Output>,
    pub pm: Option<analysis::PmMetrics>,
    /// `phi_g` byte images immediately before and after Phase 2.
    pub freeze_check: Option<(Vec<u8>, Vec<u8>)>,
}

/// Runs both phases and evaluates, without touching the filesystem
/// (except to read ingested inputs).
pub fn simulate(cfg: &ExperimentConfig, workload: &Workload, exec: &Executor) -> Result<RunResult> {
    let fed = cfg.fed();
    let eval = workload.evaluator(cfg);
    let mut records = Vec::with_capacity(cfg.rounds + 2);
    let mut failures = Vec::new();
    let mut zero_shot = None;

    let phi_g = federation::run_phase1(&fed, &workload.shards, &workload.head, exec, |t, trace, phi| {
        let gm = eval.gm(phi)?;
        if t == 0 {
            zero_shot = Some((gm.grouped, gm.balancedness));
        }
        if let Some(tr) = trace {
            failures.extend(tr.failed.iter().map(|(k, e)| format!("round {}: client {k}: {e}", tr.round)));
        }
        records.push(RoundRecord {
            phase: "phase1".into(),
            round: t,
            gm_acc_all: gm.grouped.all,
            gm_acc_many: gm.grouped.many,
            gm_acc_medium: gm.grouped.medium,
            gm_acc_few: gm.grouped.few,
            gm_local_acc: None,
            pm_acc_all: None,
            pm_acc_many: None,
            pm_acc_medium: None,
            pm_acc_few: None,
            gm_balancedness: gm.balancedness,
            pm_balancedness: None,
            mean_tkl: gm.mean_tkl,
            mean_kl: gm.mean_kl,
            mean_drift: trace.and_then(|t| t.mean_drift()),
            max_drift: trace.and_then(|t| t.max_drift()),
            mean_angle_deg: trace.and_then(|t| t.mean_angle()),
            fire_rate: if fed.purify { trace.and_then(|t| t.fire_rate()) } else { None },
            clamp_events: trace.map_or(0, |t| t.clamp_events()),
            failed_clients: trace.map_or(0, |t| t.failed.len()),
        });
        Ok(())
    })?;
    let (zs, zs_bal) = zero_shot.expect("round-0 hook always fires");
    let final_gm = eval.gm(&phi_g)?;
    let gm_local = eval.gm_local(&phi_g)?;

    let (phase2, pm, freeze_check) = if cfg.residual {
        let before = phi_g.delta.to_bytes();
        let out = federation::run_phase2(&fed, &workload.shards, &workload.head, &phi_g, exec)?;
        let after = phi_g.delta.to_bytes();
        failures.extend(out.failed.iter().map(|(k, e)| format!("phase2: client {k}: {e}")));
        let pm = eval.pm(&phi_g, &out.phi_k)?;
        records.push(RoundRecord {
            phase: "phase2".into(),
            round: cfg.rounds,
            gm_acc_all: final_gm.grouped.all,
            gm_acc_many: final_gm.grouped.many,
            gm_acc_medium: final_gm.grouped.medium,
            gm_acc_few: final_gm.grouped.few,
            gm_local_acc: Some(pm.gm_local_acc),
            pm_acc_all: Some(pm.grouped.all),
            pm_acc_many: pm.grouped.many,
            pm_acc_medium: pm.grouped.medium,
            pm_acc_few: pm.grouped.few,
            gm_balancedness: final_gm.balancedness,
            pm_balancedness: Some(pm.balancedness),
            mean_tkl: final_gm.mean_tkl,
            mean_kl: final_gm.mean_kl,
            mean_drift: None,
            max_drift: None,
            mean_angle_deg: None,
            fire_rate: None,
            clamp_events: 0,
            failed_clients: out.failed.len(),
        });
        (Some(out), Some(pm), Some((before, after)))
    } else {
        (None, None, None)
    };

    let drifts: Vec<f64> = records.iter().filter_map(|r| r.mean_drift).collect();
    let summary = Summary {
        arm: cfg.arm.clone(),
        seed: cfg.seed,
        rounds: cfg.rounds,
        personal_rounds: cfg.personal_rounds,
        zero_shot: zs,
        zero_shot_balancedness: zs_bal,
        gm: final_gm.grouped,
        gm_balancedness: final_gm.balancedness,
        gm_local_acc: gm_local,
        pm: pm.as_ref().map(|p| p.grouped),
        pm_balancedness: pm.as_ref().map(|p| p.balancedness),
        mean_drift: (!drifts.is_empty()).then(|| drifts.iter().sum::<f64>() / drifts.len() as f64),
        final_tkl: final_gm.mean_tkl,
        final_kl: final_gm.mean_kl,
        personal_attribution: pm.as_ref().map(|p| GroupShares {
            many: p.attribution.group_personal_share(&workload.groups, ShotGroup::Many),
            medium: p.attribution.group_personal_share(&workload.groups, ShotGroup::Medium),
            few: p.attribution.group_personal_share(&workload.groups, ShotGroup::Few),
        }),
        empty_classes: workload.train.empty_classes(),
        empty_local_tests: (0..workload.local_tests.len())
            .filter(|&k| workload.local_tests[k].is_empty())
            .collect(),
        failed_clients: failures,
    };
    Ok(RunResult {
        records,
        summary,
        phi_g,
        phase2,
        pm,
        freeze_check,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Output file layout under the configured directory.
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn resolved_config(&self) -> PathBuf {
        self.dir.join("resolved_config.toml")
    }
    pub fn metrics_jsonl(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn params(&self) -> PathBuf {
        self.dir.join("params")
    }
}

/// Full run with every artifact written under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let paths = OutputPaths { dir: cfg.out.clone() };
    fs::create_dir_all(paths.params()).map_err(|e| Error::io(paths.params(), e))?;
    write(&paths.resolved_config(), &cfg.to_toml())?;

    let workload = Workload::build(cfg)?;
    let exec = Executor::new(cfg.workers);
    let result = simulate(cfg, &workload, &exec)?;

    analysis::emit_records(&result.records, &paths.metrics_jsonl(), &paths.metrics_csv())?;
    let summary = serde_json::to_string_pretty(&result.summary.rounded())
        .map_err(|e| Error::Serde(e.to_string()))?;
    write(&paths.summary(), &(summary + "\n"))?;

    let params = paths.params();
    data::write_prototypes(&workload.head, &params.join("prototypes.csv"))?;
    data::write_matrix(&result.phi_g.delta, &params.join("phi_g.csv"))?;
    if let Some(p2) = &result.phase2 {
        for (k, phi) in p2.phi_k.iter().enumerate() {
            data::write_matrix(&phi.delta, &params.join(format!("phi_k_{k:03}.csv")))?;
        }
    }
    Ok(result)
}

/// One row of the arm-by-seed comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub arm: String,
    pub seed: u64,
    pub status: String,
    pub gm_all: Option<f64>,
    pub gm_many: Option<f64>,
    pub gm_medium: Option<f64>,
    pub gm_few: Option<f64>,
    pub pm_all: Option<f64>,
    pub pm_many: Option<f64>,
    pub pm_medium: Option<f64>,
    pub pm_few: Option<f64>,
    pub final_balancedness: Option<f64>,
    pub mean_drift: Option<f64>,
}

impl SuiteRow {
    fn failed(arm: &str, seed: u64, err: &Error) -> Self {
        SuiteRow {
            arm: arm.to_string(),
            seed,
            status: format!("failed: {err}"),
            gm_all: None,
            gm_many: None,
            gm_medium: None,
            gm_few: None,
            pm_all: None,
            pm_many: None,
            pm_medium: None,
            pm_few: None,
            final_balancedness: None,
            mean_drift: None,
        }
    }

    fn from_summary(s: &Summary) -> Self {
        let s = s.rounded();
        SuiteRow {
            arm: s.arm.clone(),
            seed: s.seed,
            status: "ok".into(),
            gm_all: Some(s.gm.all),
            gm_many: s.gm.many,
            gm_medium: s.gm.medium,
            gm_few: s.gm.few,
            pm_all: s.pm.map(|p| p.all),
            pm_many: s.pm.and_then(|p| p.many),
            pm_medium: s.pm.and_then(|p| p.medium),
            pm_few: s.pm.and_then(|p| p.few),
            final_balancedness: Some(s.gm_balancedness),
            mean_drift: s.mean_drift,
        }
    }
}

/// Runs every (arm, seed) pair; each run writes to `<out>/<arm>/seed_<s>/`
/// and the table goes to `<out>/suite.csv`. Failed runs become failed rows.
pub fn run_suite(template: &ExperimentConfig, arms: &[String], seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::with_capacity(arms.len() * seeds.len());
    for arm_name in arms {
        let arm = Arm::parse(arm_name)?;
        for &s in seeds {
            let mut cfg = template.clone();
            (cfg.purify, cfg.residual) = arm.toggles();
            cfg.arm = arm.name().to_string();
            cfg.seed = s;
            cfg.data_seed = s;
            cfg.partition_seed = s;
            cfg.selection_seed = s;
            cfg.shuffle_seed = s;
            cfg.out = template.out.join(arm.name()).join(format!("seed_{s}"));
            rows.push(match run_experiment(&cfg) {
                Ok(r) => SuiteRow::from_summary(&r.summary),
                Err(e) => SuiteRow::failed(arm.name(), s, &e),
            });
        }
    }
    fs::create_dir_all(&template.out).map_err(|e| Error::io(&template.out, e))?;
    let path = template.out.join("suite.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
