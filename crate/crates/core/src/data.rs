//! Synthetic long-tailed data, embedding ingestion, Dirichlet label-skew
//! partitioning, shot groups and distribution-matched local test sets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::ZeroShotHead;
use crate::seed::{self, tag};

/// Features (one row per sample), labels and the per-class histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
}

impl LabeledFeatureSet {
    pub fn new(features: Mat, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", features.rows()),
                labels.len(),
            ));
        }
        let mut class_counts = vec![0; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::domain(format!("label {y} outside [0, {num_classes})")));
            }
            class_counts[y] += 1;
        }
        Ok(LabeledFeatureSet {
            features,
            labels,
            class_counts,
        })
    }

    pub fn empty(num_classes: usize, dim: usize) -> Self {
        LabeledFeatureSet {
            features: Mat::zeros(0, dim),
            labels: Vec::new(),
            class_counts: vec![0; num_classes],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Classes declared but absent from the set.
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.class_counts[c] == 0)
            .collect()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> LabeledFeatureSet {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.x(i));
            labels.push(self.labels[i]);
        }
        let features = Mat::from_vec(idx.len(), d, data).expect("row-major subset");
        LabeledFeatureSet::new(features, labels, self.num_classes()).expect("labels already valid")
    }

    /// Sample indices grouped by class, ascending within each class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            by[y].push(i);
        }
        by
    }
}

/// Exponentially decaying class counts `n_c = max(1, round(n1 · IF^{-(c-1)/(C-1)}))`.
pub fn longtail_counts(n1: usize, num_classes: usize, imbalance: f64) -> Result<Vec<usize>> {
    if n1 == 0 || num_classes < 2 || !(imbalance >= 1.0 && imbalance.is_finite()) {
        return Err(Error::domain(format!(
            "longtail_counts needs n1 >= 1, C >= 2, IF >= 1 (got {n1}, {num_classes}, {imbalance})"
        )));
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| {
            let v = n1 as f64 * imbalance.powf(-(c as f64) / last);
            ((v + 0.5).floor() as usize).max(1)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: LabeledFeatureSet,
    pub balanced_test: LabeledFeatureSet,
    pub class_means: Mat,
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Gaussian class clusters: means are random unit directions scaled by
/// `class_sep`, samples add unit-variance isotropic noise.
pub fn synth_dataset(
    counts: &[usize],
    dim: usize,
    class_sep: f64,
    test_per_class: usize,
    seed: u64,
) -> Result<SyntheticData> {
    if dim < 2 {
        return Err(Error::domain("feature dimension must be at least 2"));
    }
    if !(class_sep >= 0.0 && class_sep.is_finite()) {
        return Err(Error::domain(format!("class_sep {class_sep} must be non-negative")));
    }
    if counts.is_empty() {
        return Err(Error::domain("no classes"));
    }
    let c = counts.len();
    let mut rng = seed::rng(seed, tag::MEANS, 0);
    let mut means = Vec::with_capacity(c);
    for _ in 0..c {
        let mut m = gaussian_vec(&mut rng, dim);
        normalize(&mut m);
        m.iter_mut().for_each(|v| *v *= class_sep);
        means.push(m);
    }
    let class_means = Mat::from_rows(&means)?;

    let draw = |per_class: &dyn Fn(usize) -> usize, stream: u64| {
        let mut rng = seed::rng(seed, stream, 0);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (y, mean) in means.iter().enumerate() {
            for _ in 0..per_class(y) {
                for &m in mean {
                    data.push(m + rng.sample::<f64, _>(StandardNormal));
                }
                labels.push(y);
            }
        }
        let n = labels.len();
        LabeledFeatureSet::new(Mat::from_vec(n, dim, data)?, labels, c)
    };
    let train = draw(&|y| counts[y], tag::TRAIN)?;
    let balanced_test = draw(&|_| test_per_class, tag::TEST)?;
    Ok(SyntheticData {
        train,
        balanced_test,
        class_means,
    })
}

/// Prototypes `normalize(mean_c + nu · g_c)` with standard Gaussian `g_c`.
pub fn synth_zero_shot_head(
    class_means: &Mat,
    nu: f64,
    logit_scale: f64,
    seed: u64,
) -> Result<ZeroShotHead> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!("prototype noise {nu} must be non-negative")));
    }
    let mut rng = seed::rng(seed, tag::PROTOTYPES, 0);
    let rows: Vec<Vec<f64>> = (0..class_means.rows())
        .map(|c| {
            let g = gaussian_vec(&mut rng, class_means.cols());
            let mut p: Vec<f64> = class_means
                .row(c)
                .iter()
                .zip(&g)
                .map(|(m, g)| m + nu * g)
                .collect();
            normalize(&mut p);
            p
        })
        .collect();
    ZeroShotHead::new(Mat::from_rows(&rows)?, logit_scale)
}

/// Which client each training sample goes to.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignment: Vec<usize>,
    /// `per_client_counts[k][c]`
    pub per_client_counts: Vec<Vec<usize>>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.per_client_counts.len()
    }

    pub fn client_indices(&self, k: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn client_size(&self, k: usize) -> usize {
        self.per_client_counts[k].iter().sum()
    }
}

fn dirichlet_draw<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 && s.is_finite() {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        // every gamma draw underflowed: all mass on one client
        let hot = rng.random_range(0..k);
        w.iter_mut().enumerate().for_each(|(i, v)| *v = (i == hot) as u8 as f64);
    }
    w
}

/// Per-class label skew: each class's proportions across clients are drawn
/// from `Dirichlet(alpha · 1_K)` and its samples assigned multinomially.
pub fn dirichlet_partition(
    data: &LabeledFeatureSet,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::domain("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("alpha_dir {alpha} must be positive")));
    }
    if let Some(c) = data.empty_classes().first() {
        return Err(Error::domain(format!("class {c} has no training samples")));
    }
    let c_total = data.num_classes();
    let mut assignment = vec![0; data.len()];
    let mut per_client_counts = vec![vec![0; c_total]; num_clients];
    for (c, idx) in data.indices_by_class().into_iter().enumerate() {
        let mut rng = seed::rng(seed, tag::PARTITION, c as u64);
        let props = dirichlet_draw(&mut rng, alpha, num_clients);
        let pick = WeightedIndex::new(&props)
            .map_err(|e| Error::domain(format!("dirichlet weights for class {c}: {e}")))?;
        for i in idx {
            let k = pick.sample(&mut rng);
            assignment[i] = k;
            per_client_counts[k][c] += 1;
        }
    }
    Ok(PartitionPlan {
        assignment,
        per_client_counts,
        seed,
    })
}

pub const MANY_ABOVE: usize = 100;
pub const FEW_BELOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotGroups {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl ShotGroups {
    pub fn group_of(&self, class: usize) -> ShotGroup {
        if self.many.contains(&class) {
            ShotGroup::Many
        } else if self.medium.contains(&class) {
            ShotGroup::Medium
        } else {
            ShotGroup::Few
        }
    }

    pub fn members(&self, g: ShotGroup) -> &[usize] {
        match g {
            ShotGroup::Many => &self.many,
            ShotGroup::Medium => &self.medium,
            ShotGroup::Few => &self.few,
        }
    }
}

/// many: n > 100, medium: 20 ≤ n ≤ 100, few: n < 20.
pub fn shot_categories(class_counts: &[usize]) -> ShotGroups {
    let mut g = ShotGroups {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
    };
    for (c, &n) in class_counts.iter().enumerate() {
        if n > MANY_ABOVE {
            g.many.push(c);
        } else if n >= FEW_BELOW {
            g.medium.push(c);
        } else {
            g.few.push(c);
        }
    }
    g
}

/// Splits `total` across classes proportionally to `weights` by largest
/// remainder; ties go to the lower class id.
pub fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out = Vec::with_capacity(weights.len());
    let mut rema = Vec::with_capacity(weights.len());
    for (c, &w) in weights.iter().enumerate() {
        let exact = (w * total) as u128;
        out.push((exact / sum as u128) as usize);
        rema.push(((exact % sum as u128) as usize, c));
    }
    let left = total - out.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in rema.iter().take(left) {
        out[c] += 1;
    }
    out
}

/// One test set per client whose class mix matches its training shard.
/// Clients with an empty shard get an empty set.
pub fn make_local_test_sets(
    balanced_test: &LabeledFeatureSet,
    plan: &PartitionPlan,
    size: usize,
    seed: u64,
) -> Result<Vec<LabeledFeatureSet>> {
    let pools = balanced_test.indices_by_class();
    let mut out = Vec::with_capacity(plan.num_clients());
    for (k, counts) in plan.per_client_counts.iter().enumerate() {
        let mut rng = seed::rng(seed, tag::LOCAL_TEST, k as u64);
        let target = largest_remainder(counts, size);
        let mut idx = Vec::with_capacity(size);
        for (c, &m) in target.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let pool = &pools[c];
            if pool.is_empty() {
                return Err(Error::domain(format!(
                    "balanced test has no samples of class {c} needed by client {k}"
                )));
            }
            if m <= pool.len() {
                let mut p = pool.clone();
                p.shuffle(&mut rng);
                idx.extend_from_slice(&p[..m]);
            } else {
                idx.extend((0..m).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        out.push(balanced_test.subset(&idx));
    }
    Ok(out)
}

/// `½ Σ (p − q)² / (p + q)` over class proportions.
pub fn chi_square_distance(a: &[usize], b: &[usize]) -> f64 {
    let sa: usize = a.iter().sum();
    let sb: usize = b.iter().sum();
    if sa == 0 || sb == 0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let p = x as f64 / sa as f64;
            let q = y as f64 / sb as f64;
            if p + q > 0.0 {
                (p - q) * (p - q) / (p + q)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        * 0.5
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

/// Reads `<key>,f0,...,f{d-1}` rows: returns `(key, features)` per row.
fn read_keyed_rows(path: &Path, key: &str) -> Result<(usize, Vec<(u64, usize, Vec<f64>)>)> {
    let mut rdr = csv_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.get(0) != Some(key) {
        return Err(parse_err(path, 1, format!("header must start with `{key}`")));
    }
    let d = header.len() - 1;
    if d == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(path, 1, format!("column {} must be `f{j}`, got `{name}`", j + 1)));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", d + 1, rec.len()),
            ));
        }
        let id: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad {key} id `{}`", &rec[0])))?;
        let mut feats = Vec::with_capacity(d);
        for (j, f) in rec.iter().skip(1).enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad float `{f}` in f{j}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value in f{j}")));
            }
            feats.push(v);
        }
        rows.push((line, id, feats));
    }
    Ok((d, rows))
}

/// Parses a `label,f0,...` CSV. Labels must lie in `[0, num_classes)`.
pub fn load_embeddings(path: &Path, num_classes: usize) -> Result<LabeledFeatureSet> {
    let (d, rows) = read_keyed_rows(path, "label")?;
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (line, y, feats) in rows {
        if y >= num_classes {
            return Err(parse_err(
                path,
                line,
                format!("label {y} outside [0, {num_classes})"),
            ));
        }
        data.extend(feats);
        labels.push(y);
    }
    let n = labels.len();
    LabeledFeatureSet::new(Mat::from_vec(n, d, data)?, labels, num_classes)
}

/// Parses a `class,f0,...` CSV with exactly one row per class.
pub fn load_prototypes(path: &Path, num_classes: usize, logit_scale: f64) -> Result<ZeroShotHead> {
    let (d, rows) = read_keyed_rows(path, "class")?;
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; num_classes];
    let mut last_line = 1;
    for (line, c, feats) in rows {
        last_line = line;
        if c >= num_classes {
            return Err(parse_err(path, line, format!("class {c} outside [0, {num_classes})")));
        }
        if slots[c].replace(feats).is_some() {
            return Err(parse_err(path, line, format!("duplicate class {c}")));
        }
    }
    if let Some(c) = slots.iter().position(Option::is_none) {
        return Err(parse_err(path, last_line, format!("missing prototype for class {c}")));
    }
    let rows: Vec<Vec<f64>> = slots.into_iter().map(Option::unwrap).collect();
    let p = Mat::from_rows(&rows)?;
    debug_assert_eq!(p.cols(), d);
    ZeroShotHead::new(p, logit_scale)
}

fn write_keyed(path: &Path, key: &str, rows: impl Iterator<Item = (usize, Vec<f64>)>, d: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::from(key);
    for j in 0..d {
        line.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    for (id, feats) in rows {
        line.clear();
        line.push_str(&id.to_string());
        for v in feats {
            line.push(',');
            line.push_str(&format!("{v:?}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes floats in shortest round-trip form so a reload is bit-exact.
pub fn write_embeddings(set: &LabeledFeatureSet, path: &Path) -> Result<()> {
    write_keyed(
        path,
        "label",
        (0..set.len()).map(|i| (set.labels[i], set.x(i).to_vec())),
        set.dim(),
    )
}

pub fn write_prototypes(head: &ZeroShotHead, path: &Path) -> Result<()> {
    let p = head.prototypes();
    write_keyed(path, "class", (0..p.rows()).map(|c| (c, p.row(c).to_vec())), p.cols())
}

/// Plain CSV dump of a matrix, one row per line, no header.
pub fn write_matrix(m: &Mat, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
