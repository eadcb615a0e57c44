//! Two-phase federated protocol.
//!
//! Phase 1: each round a client subset receives the global delta, runs local
//! SGD on its shard (optionally purifying the task gradient against the
//! zero-shot alignment gradient) and the server takes the sample-weighted
//! mean. Phase 2: with the global delta frozen, every client fits its own
//! residual delta against the composite fusion/personal loss.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::LabeledFeatureSet;
use crate::divergence::TemperatureBracket;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{self, kernel, GradientPair, PeftDelta, Role, ZeroShotHead};
use crate::par::Executor;
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub personal_rounds: usize,
    pub lambda: f64,
    pub purify: bool,
    pub residual: bool,
    pub selection_seed: u64,
    pub shuffle_seed: u64,
    pub bracket: TemperatureBracket,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 20,
            rounds: 100,
            fraction: 0.4,
            local_epochs: 1,
            batch_size: 32,
            lr_phase1: 0.01,
            lr_phase2: 0.01,
            personal_rounds: 20,
            lambda: 0.9,
            purify: true,
            residual: true,
            selection_seed: 0,
            shuffle_seed: 0,
            bracket: TemperatureBracket::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("clients", "must be at least 1"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("fraction", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase1.is_finite()) {
            return Err(Error::config("lr_phase1", "must be positive"));
        }
        if !(self.lr_phase2 > 0.0 && self.lr_phase2.is_finite()) {
            return Err(Error::config("lr_phase2", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        self.bracket
            .validate()
            .map_err(|e| Error::config("tau_min", e.to_string()))
    }

    /// Clients per round: `max(1, round(fraction · K))`.
    pub fn clients_per_round(&self) -> usize {
        ((self.fraction * self.num_clients as f64 + 0.5).floor() as usize).clamp(1, self.num_clients)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: usize,
    /// Ascending client ids.
    pub selected: Vec<usize>,
}

/// Uniform sample without replacement, a pure function of (selection seed, round).
pub fn select_clients(cfg: &FedConfig, round: usize) -> RoundPlan {
    let m = cfg.clients_per_round();
    let mut selected = if m == cfg.num_clients {
        (0..m).collect()
    } else {
        let mut rng = seed::rng(cfg.selection_seed, tag::SELECTION, round as u64);
        index::sample(&mut rng, cfg.num_clients, m).into_vec()
    };
    selected.sort_unstable();
    RoundPlan { round, selected }
}

/// Diagnostics of one local optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub task_loss: f64,
    pub align_loss: f64,
    /// `⟨g_task, g_align⟩` before purification.
    pub inner_product: f64,
    /// `⟨applied update, g_align⟩`.
    pub applied_inner: f64,
    pub angle_deg: Option<f64>,
    pub purified: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    pub steps: Vec<StepRecord>,
    pub clamp_events: u64,
}

impl StepDiagnostics {
    pub fn fire_rate(&self) -> Option<f64> {
        (!self.steps.is_empty())
            .then(|| self.steps.iter().filter(|s| s.purified).count() as f64 / self.steps.len() as f64)
    }

    pub fn mean_angle(&self) -> Option<f64> {
        let a: Vec<f64> = self.steps.iter().filter_map(|s| s.angle_deg).collect();
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    }
}

/// Mini-batch order for one (client, round) or (client, pass) stream.
fn batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Batch-mean task and alignment gradients at `phi`.
pub fn batch_gradients(
    shard: &LabeledFeatureSet,
    batch: &[usize],
    head: &ZeroShotHead,
    phi: &PeftDelta,
    bracket: &TemperatureBracket,
) -> Result<(GradientPair, f64, f64, u64)> {
    let w = phi.effective(head)?;
    let (c, d) = w.shape();
    let s = head.logit_scale();
    let k = 1.0 / batch.len() as f64;
    let mut g_task = Mat::zeros(c, d);
    let mut g_align = Mat::zeros(c, d);
    let mut task_loss = 0.0;
    let mut align_loss = 0.0;
    let mut clamps = 0u64;
    for &i in batch {
        let x = shard.x(i);
        task_loss += k * kernel::ce_accumulate(&w, s, x, shard.labels[i], k, &mut g_task);
        let (l, st) =
            kernel::align_accumulate(&w, head.prototypes(), s, x, bracket, k, &mut g_align)?;
        align_loss += k * l;
        clamps += st.clamp_events as u64;
    }
    Ok((GradientPair::new(g_task, g_align)?, task_loss, align_loss, clamps))
}

/// Local Phase-1 training on a copy of the received global delta.
pub fn local_train_phase1(
    shard: &LabeledFeatureSet,
    phi_g: &PeftDelta,
    head: &ZeroShotHead,
    cfg: &FedConfig,
    client: usize,
    round: usize,
) -> Result<(PeftDelta, StepDiagnostics)> {
    let mut phi = phi_g.clone();
    let mut diag = StepDiagnostics::default();
    if shard.is_empty() {
        return Ok((phi, diag));
    }
    let mut rng = seed::rng(
        cfg.shuffle_seed,
        tag::SHUFFLE_P1,
        ((client as u64) << 32) | round as u64,
    );
    for _ in 0..cfg.local_epochs {
        for batch in batches(shard.len(), cfg.batch_size, &mut rng) {
            let (mut pair, task_loss, align_loss, clamps) =
                batch_gradients(shard, &batch, head, &phi, &cfg.bracket)?;
            diag.clamp_events += clamps;
            let angle_deg = pair.angle_degrees();
            let update = if cfg.purify {
                model::purify(&mut pair)
            } else {
                pair.g_task.clone()
            };
            if !update.is_finite() {
                return Err(Error::NonFinite("local gradient"));
            }
            diag.steps.push(StepRecord {
                task_loss,
                align_loss,
                inner_product: pair.inner_product,
                applied_inner: update.inner(&pair.g_align),
                angle_deg,
                purified: pair.purified,
            });
            model::sgd_step(&mut phi, &update, cfg.lr_phase1)?;
        }
    }
    Ok((phi, diag))
}

/// `Σ_k (n_k / Σ n) φ_k`, reduced in ascending client-id order.
///
/// Uses the running weighted mean `acc += (n_k / N_k)(φ_k − acc)`, so a set
/// of identical inputs reduces to that input exactly.
pub fn aggregate(updates: &[(usize, &PeftDelta, usize)]) -> Result<PeftDelta> {
    if updates.is_empty() {
        return Err(Error::Protocol("aggregate called with no client updates".into()));
    }
    let mut order: Vec<&(usize, &PeftDelta, usize)> = updates.iter().collect();
    order.sort_by_key(|u| u.0);
    let total: usize = order.iter().map(|u| u.2).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregate over clients with no samples".into()));
    }
    let first = order.iter().position(|u| u.2 > 0).expect("total > 0");
    let mut acc = order[first].1.delta.clone();
    let mut seen = order[first].2;
    for u in &order[first + 1..] {
        if u.2 == 0 {
            continue;
        }
        acc.ensure_same_shape(&u.1.delta)?;
        seen += u.2;
        let w = u.2 as f64 / seen as f64;
        let diff = u.1.delta.sub(&acc)?;
        acc.add_scaled(w, &diff)?;
    }
    Ok(PeftDelta {
        delta: acc,
        role: Role::Global,
    })
}

/// Normalized aggregation weights `n_k / Σ n`.
pub fn aggregation_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Everything one Phase-1 round produced.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub round: usize,
    pub plan: RoundPlan,
    /// `(client, local delta, drift from the broadcast delta, diagnostics)`
    pub clients: Vec<ClientRoundResult>,
    pub failed: Vec<(usize, String)>,
}

#[derive(Debug, Clone)]
pub struct ClientRoundResult {
    pub client: usize,
    pub samples: usize,
    pub drift: f64,
    pub diagnostics: StepDiagnostics,
}

impl RoundTrace {
    pub fn mean_drift(&self) -> Option<f64> {
        (!self.clients.is_empty())
            .then(|| self.clients.iter().map(|c| c.drift).sum::<f64>() / self.clients.len() as f64)
    }

    pub fn max_drift(&self) -> Option<f64> {
        self.clients.iter().map(|c| c.drift).reduce(f64::max)
    }

    pub fn mean_angle(&self) -> Option<f64> {
        let a: Vec<f64> = self
            .clients
            .iter()
            .flat_map(|c| c.diagnostics.steps.iter().filter_map(|s| s.angle_deg))
            .collect();
        (!a.is_empty()).then(|| a.iter().sum::<f64>() / a.len() as f64)
    }

    pub fn fire_rate(&self) -> Option<f64> {
        let steps: Vec<&StepRecord> = self.clients.iter().flat_map(|c| &c.diagnostics.steps).collect();
        (!steps.is_empty())
            .then(|| steps.iter().filter(|s| s.purified).count() as f64 / steps.len() as f64)
    }

    pub fn clamp_events(&self) -> u64 {
        self.clients.iter().map(|c| c.diagnostics.clamp_events).sum()
    }
}

/// Runs the Phase-1 rounds from a zero global delta.
///
/// `on_round` fires once with `trace = None` before training (round 0,
/// i.e. the zero-shot model) and then after every aggregation.
pub fn run_phase1<F>(
    cfg: &FedConfig,
    shards: &[LabeledFeatureSet],
    head: &ZeroShotHead,
    exec: &Executor,
    mut on_round: F,
) -> Result<PeftDelta>
where
    F: FnMut(usize, Option<&RoundTrace>, &PeftDelta) -> Result<()>,
{
    cfg.validate()?;
    if shards.len() != cfg.num_clients {
        return Err(Error::shape(format!("{} shards", cfg.num_clients), shards.len()));
    }
    let mut phi_g = PeftDelta::zeros_like(head, Role::Global);
    on_round(0, None, &phi_g)?;
    for t in 0..cfg.rounds {
        let plan = select_clients(cfg, t);
        let outcomes = exec.map(&plan.selected, |&k| {
            local_train_phase1(&shards[k], &phi_g, head, cfg, k, t).and_then(|(phi, diag)| {
                let drift = phi.delta.sub(&phi_g.delta)?.norm();
                Ok((phi, diag, drift))
            })
        });

        let mut trace = RoundTrace {
            round: t + 1,
            plan: plan.clone(),
            clients: Vec::new(),
            failed: Vec::new(),
        };
        let mut uploads = Vec::new();
        for (&k, out) in plan.selected.iter().zip(outcomes) {
            match out {
                Ok((phi, diag, drift)) => {
                    let n = shards[k].len();
                    trace.clients.push(ClientRoundResult {
                        client: k,
                        samples: n,
                        drift,
                        diagnostics: diag,
                    });
                    uploads.push((k, phi, n));
                }
                Err(e) => trace.failed.push((k, e.to_string())),
            }
        }
        if uploads.iter().all(|u| u.2 == 0) {
            return Err(Error::Protocol(format!(
                "round {}: no client produced a usable update ({} failed)",
                t + 1,
                trace.failed.len()
            )));
        }
        let refs: Vec<(usize, &PeftDelta, usize)> = uploads.iter().map(|(k, p, n)| (*k, p, *n)).collect();
        phi_g = aggregate(&refs)?;
        on_round(t + 1, Some(&trace), &phi_g)?;
    }
    Ok(phi_g)
}

/// Fits one client's residual delta with the global delta frozen.
pub fn train_personal(
    shard: &LabeledFeatureSet,
    head: &ZeroShotHead,
    phi_g: &PeftDelta,
    cfg: &FedConfig,
    client: usize,
) -> Result<PeftDelta> {
    model::check_lambda(cfg.lambda)?;
    let mut phi_k = PeftDelta::zeros_like(head, Role::Personal(client));
    if shard.is_empty() || cfg.personal_rounds == 0 {
        return Ok(phi_k);
    }
    let wg = phi_g.effective(head)?;
    let s = head.logit_scale();
    // global-branch logits never change in this phase
    let global_logits: Vec<Vec<f64>> = (0..shard.len())
        .map(|i| {
            let x = shard.x(i);
            (0..wg.rows()).map(|r| s * crate::linalg::dot(wg.row(r), x)).collect()
        })
        .collect();
    let mut rng = seed::rng(cfg.shuffle_seed, tag::SHUFFLE_P2, client as u64);
    for _ in 0..cfg.personal_rounds {
        for batch in batches(shard.len(), cfg.batch_size, &mut rng) {
            let wk = phi_k.effective(head)?;
            let mut grad = Mat::zeros(wk.rows(), wk.cols());
            let k = 1.0 / batch.len() as f64;
            for &i in &batch {
                model::personal_accumulate(
                    &global_logits[i],
                    &wk,
                    s,
                    shard.x(i),
                    shard.labels[i],
                    cfg.lambda,
                    k,
                    &mut grad,
                );
            }
            model::sgd_step(&mut phi_k, &grad, cfg.lr_phase2)?;
        }
    }
    Ok(phi_k)
}

#[derive(Debug, Clone)]
pub struct Phase2Output {
    /// One residual per client; failed clients keep a zero residual.
    pub phi_k: Vec<PeftDelta>,
    pub failed: Vec<(usize, String)>,
}

/// Phase 2 on every client. No server exchange: `phi_g` is read-only.
pub fn run_phase2(
    cfg: &FedConfig,
    shards: &[LabeledFeatureSet],
    head: &ZeroShotHead,
    phi_g: &PeftDelta,
    exec: &Executor,
) -> Result<Phase2Output> {
    cfg.validate()?;
    let ids: Vec<usize> = (0..shards.len()).collect();
    let results = exec.map(&ids, |&k| train_personal(&shards[k], head, phi_g, cfg, k));
    let mut out = Phase2Output {
        phi_k: Vec::with_capacity(shards.len()),
        failed: Vec::new(),
    };
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => out.phi_k.push(p),
            Err(e) => {
                out.failed.push((k, e.to_string()));
                out.phi_k.push(PeftDelta::zeros_like(head, Role::Personal(k)));
            }
        }
    }
    Ok(out)
}
