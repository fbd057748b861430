//! Episode sampling and MMD-based task similarity.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{rss_fingerprint, to_feature_vector, FeatureNormalizer, FingerprintDatabase};
use crate::geom::{squared_distance, Point2};
use crate::neuralnet::Batch;
use crate::propagation::{measure_rss, Environment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    /// Targets are 2-D coordinates.
    #[default]
    Regression,
    /// Targets are the way index in `[0, N)`.
    Classification,
}

/// Where the `N` positions of a task come from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionSource {
    /// Distinct reference points of the database.
    #[default]
    ReferencePoints,
    /// Uniform positions over the environment area.
    Uniform,
    /// Uniform positions in a disk around a uniformly drawn center,
    /// restricted to the area.
    Local { radius_m: f64 },
    /// The `N` reference points nearest in signal space to one observation
    /// taken at a uniformly drawn anchor.
    SignalNeighborhood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub n_ways: usize,
    pub k_spt: usize,
    pub k_qry: usize,
    pub mode: TaskMode,
    /// Nearest reference points per fingerprint.
    pub k_neighbors: usize,
    pub position_source: PositionSource,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_ways: 10,
            k_spt: 3,
            k_qry: 5,
            mode: TaskMode::Regression,
            k_neighbors: 5,
            position_source: PositionSource::ReferencePoints,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ways == 0 || self.k_spt == 0 || self.k_qry == 0 || self.k_neighbors == 0 {
            return Err(Error::config("n_ways, k_spt, k_qry and k_neighbors must be positive"));
        }
        if let PositionSource::Local { radius_m } = self.position_source {
            if !(radius_m > 0.0 && radius_m.is_finite()) {
                return Err(Error::config("local task radius must be positive"));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.k_neighbors
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    /// Unique within its task.
    pub sample_id: u64,
    pub way: usize,
    pub position: Point2,
    pub features: Vec<f64>,
    /// Raw observation behind `features`, in dBm.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rss_dbm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTask {
    pub task_id: u64,
    pub domain_id: String,
    pub mode: TaskMode,
    pub n_ways: usize,
    pub support: Vec<LabeledSample>,
    pub query: Vec<LabeledSample>,
}

impl LocalizationTask {
    pub fn feature_dim(&self) -> usize {
        self.support.first().map_or(0, |s| s.features.len())
    }

    pub fn support_batch(&self, scaling: &TargetScaling) -> Result<Batch> {
        samples_to_batch(&self.support, self.mode, scaling)
    }

    pub fn query_batch(&self, scaling: &TargetScaling) -> Result<Batch> {
        samples_to_batch(&self.query, self.mode, scaling)
    }

    /// Support and query feature vectors; labels are not included.
    pub fn pooled_features(&self) -> Vec<&[f64]> {
        self.support
            .iter()
            .chain(&self.query)
            .map(|s| s.features.as_slice())
            .collect()
    }

    pub fn apply_normalizer(&mut self, normalizer: &FeatureNormalizer) -> Result<()> {
        for s in self.support.iter_mut().chain(self.query.iter_mut()) {
            normalizer.apply(&mut s.features)?;
        }
        Ok(())
    }
}

/// Isotropic affine map from meters to regression target units,
/// `t = (p − center) / scale_m`. Being isotropic, Euclidean errors convert
/// back to meters by a single factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub center: Point2,
    pub scale_m: f64,
}

impl Default for TargetScaling {
    fn default() -> Self {
        Self::identity()
    }
}

impl TargetScaling {
    pub fn identity() -> Self {
        Self {
            center: Point2::new(0.0, 0.0),
            scale_m: 1.0,
        }
    }

    /// Maps a `width × height` area anchored at the origin into `[-1, 1]²`.
    pub fn for_area(width_m: f64, height_m: f64) -> Result<Self> {
        if !(width_m > 0.0 && height_m > 0.0) {
            return Err(Error::config("area dimensions must be positive"));
        }
        let s = Self {
            center: Point2::new(width_m / 2.0, height_m / 2.0),
            scale_m: width_m.max(height_m) / 2.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_m > 0.0 && self.scale_m.is_finite()) || !self.center.x.is_finite() || !self.center.y.is_finite() {
            return Err(Error::config("target scaling needs a finite center and a positive scale"));
        }
        Ok(())
    }

    pub fn to_target(&self, p: Point2) -> [f64; 2] {
        [(p.x - self.center.x) / self.scale_m, (p.y - self.center.y) / self.scale_m]
    }

    pub fn to_meters(&self, t: [f64; 2]) -> Point2 {
        Point2::new(self.center.x + t[0] * self.scale_m, self.center.y + t[1] * self.scale_m)
    }
}

/// Stacks samples into a batch with mode-specific targets.
pub fn samples_to_batch(samples: &[LabeledSample], mode: TaskMode, scaling: &TargetScaling) -> Result<Batch> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("cannot build a batch from zero samples"));
    };
    let dim = first.features.len();
    let mut inputs = Array2::zeros((samples.len(), dim));
    for (mut row, s) in inputs.rows_mut().into_iter().zip(samples) {
        if s.features.len() != dim {
            return Err(Error::invalid("samples have different feature lengths"));
        }
        row.assign(&ndarray::ArrayView1::from(&s.features[..]));
    }
    match mode {
        TaskMode::Regression => {
            let targets = Array2::from_shape_fn((samples.len(), 2), |(i, j)| scaling.to_target(samples[i].position)[j]);
            Batch::regression(inputs, targets)
        }
        TaskMode::Classification => Batch::classification(inputs, samples.iter().map(|s| s.way).collect()),
    }
}

fn point_in_disk<R: Rng + ?Sized>(env: &Environment, center: Point2, radius_m: f64, rng: &mut R) -> Point2 {
    loop {
        let dx = rng.random_range(-radius_m..=radius_m);
        let dy = rng.random_range(-radius_m..=radius_m);
        let p = Point2::new(center.x + dx, center.y + dy);
        if dx * dx + dy * dy <= radius_m * radius_m && env.contains(&p) {
            return p;
        }
    }
}

/// Draws one `N`-way episode.
///
/// Observations are measured in `env` and fingerprinted against `db`, which
/// may be a stale survey of an earlier snapshot. For every way the first
/// `k_spt` draws go to the support set and the next `k_qry` to the query set.
#[allow(clippy::too_many_arguments)]
pub fn sample_task<R: Rng + ?Sized>(
    db: &FingerprintDatabase,
    env: &Environment,
    cfg: &TaskConfig,
    normalizer: &FeatureNormalizer,
    task_id: u64,
    domain_id: &str,
    rng: &mut R,
) -> Result<LocalizationTask> {
    cfg.validate()?;
    if cfg.k_neighbors > db.len() {
        return Err(Error::invalid(format!(
            "K = {} exceeds the {} reference points of {}",
            cfg.k_neighbors,
            db.len(),
            db.env_id
        )));
    }
    let positions: Vec<Point2> = match cfg.position_source {
        PositionSource::ReferencePoints => {
            if db.len() < cfg.n_ways {
                return Err(Error::invalid(format!(
                    "{}-way task needs {} positions, database {} has {}",
                    cfg.n_ways,
                    cfg.n_ways,
                    db.env_id,
                    db.len()
                )));
            }
            rand::seq::index::sample(rng, db.len(), cfg.n_ways)
                .into_iter()
                .map(|i| db.rps()[i].position)
                .collect()
        }
        PositionSource::Uniform => (0..cfg.n_ways).map(|_| env.random_position(rng)).collect(),
        PositionSource::SignalNeighborhood => {
            if db.len() < cfg.n_ways {
                return Err(Error::invalid(format!(
                    "{}-way task needs {} reference points, database {} has {}",
                    cfg.n_ways,
                    cfg.n_ways,
                    db.env_id,
                    db.len()
                )));
            }
            let anchor = env.random_position(rng);
            let obs = measure_rss(env, anchor, rng)?;
            db.nearest(&obs.rss_dbm, cfg.n_ways)?.into_iter().map(|(_, rp)| rp.position).collect()
        }
        PositionSource::Local { radius_m } => {
            let center = env.random_position(rng);
            (0..cfg.n_ways).map(|_| point_in_disk(env, center, radius_m, rng)).collect()
        }
    };
    let per_way = cfg.k_spt + cfg.k_qry;
    let mut support = Vec::with_capacity(cfg.n_ways * cfg.k_spt);
    let mut query = Vec::with_capacity(cfg.n_ways * cfg.k_qry);
    let mut next_id = 0u64;
    for (way, &position) in positions.iter().enumerate() {
        for j in 0..per_way {
            let obs = measure_rss(env, position, rng)?;
            let fp = rss_fingerprint(db, &obs.rss_dbm, cfg.k_neighbors)?;
            let sample = LabeledSample {
                sample_id: next_id,
                way,
                position,
                features: to_feature_vector(&fp, normalizer)?,
                rss_dbm: obs.rss_dbm,
            };
            next_id += 1;
            if j < cfg.k_spt {
                support.push(sample);
            } else {
                query.push(sample);
            }
        }
    }
    Ok(LocalizationTask {
        task_id,
        domain_id: domain_id.to_string(),
        mode: cfg.mode,
        n_ways: cfg.n_ways,
        support,
        query,
    })
}

/// Tasks of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub domain_id: String,
    pub tasks: Vec<LocalizationTask>,
}

impl Domain {
    /// At most `max` pooled feature vectors, taken at an even stride.
    pub fn pooled_features(&self, max: usize) -> Vec<&[f64]> {
        let all: Vec<&[f64]> = self.tasks.iter().flat_map(|t| t.pooled_features()).collect();
        strided(all, max)
    }
}

fn strided<T>(all: Vec<T>, max: usize) -> Vec<T> {
    if max == 0 || all.len() <= max {
        return all;
    }
    let n = all.len();
    let mut out = Vec::with_capacity(max);
    let mut next = 0usize;
    for (i, item) in all.into_iter().enumerate() {
        if i == next * n / max {
            out.push(item);
            next += 1;
            if next == max {
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DomainSet {
    pub domains: Vec<Domain>,
}

impl DomainSet {
    pub fn new(domains: Vec<Domain>) -> Self {
        Self { domains }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.domains.iter().map(|d| d.tasks.len()).sum()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &LocalizationTask> {
        self.domains.iter().flat_map(|d| d.tasks.iter())
    }

    /// Every domain merged into one, for methods that ignore domain labels.
    pub fn pooled(&self, domain_id: &str) -> Domain {
        Domain {
            domain_id: domain_id.to_string(),
            tasks: self.tasks().cloned().collect(),
        }
    }

    /// Z-scoring fitted on every support and query feature of every task.
    pub fn fit_normalizer(&self) -> Result<FeatureNormalizer> {
        FeatureNormalizer::fit(self.tasks().flat_map(|t| t.pooled_features()))
    }

    pub fn apply_normalizer(&mut self, normalizer: &FeatureNormalizer) -> Result<()> {
        for d in &mut self.domains {
            for t in &mut d.tasks {
                t.apply_normalizer(normalizer)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled samples.
    #[default]
    Median,
    Fixed { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdEstimator {
    /// V-statistic; exactly zero on identical sample lists.
    #[default]
    Biased,
    /// U-statistic; drops the diagonal terms.
    Unbiased,
}

/// Gaussian RBF kernel `exp(−‖x − y‖² / 2σ²)` with an estimator choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
    pub estimator: MmdEstimator,
    /// Cap on pooled samples per domain when ranking environments.
    pub max_pooled: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            estimator: MmdEstimator::Biased,
            max_pooled: 400,
        }
    }
}

fn median_pairwise_distance<S: AsRef<[f64]>>(a: &[S], b: &[S]) -> f64 {
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(|s| s.as_ref()).collect();
    let mut d2: Vec<f64> = Vec::with_capacity(pooled.len() * (pooled.len().saturating_sub(1)) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d2.push(squared_distance(pooled[i], pooled[j]));
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    let mid = d2.len() / 2;
    let (_, m, _) = d2.select_nth_unstable_by(mid, |x, y| x.total_cmp(y));
    let median = m.sqrt();
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

fn kernel_mean<S: AsRef<[f64]>>(x: &[S], y: &[S], gamma: f64, skip_diagonal: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, xi) in x.iter().enumerate() {
        for (j, yj) in y.iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            total += (-gamma * squared_distance(xi.as_ref(), yj.as_ref())).exp();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Lexicographic order on sample lists by length, then by bit patterns.
fn canonical_order<S: AsRef<[f64]>>(a: &[S], b: &[S]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.as_ref().iter().zip(y.as_ref()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Square root of the (clamped) squared MMD between two sample lists.
///
/// The arguments are put in a canonical order first, so the result is
/// bitwise symmetric.
pub fn mmd<S: AsRef<[f64]>>(samples_a: &[S], samples_b: &[S], kernel: &KernelSpec) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::invalid("MMD needs non-empty sample lists"));
    }
    let (samples_a, samples_b) = if canonical_order(samples_a, samples_b).is_gt() {
        (samples_b, samples_a)
    } else {
        (samples_a, samples_b)
    };
    let dim = samples_a[0].as_ref().len();
    if samples_a.iter().chain(samples_b).any(|s| s.as_ref().len() != dim) {
        return Err(Error::invalid("MMD samples have mismatched dimensions"));
    }
    let sigma = match kernel.bandwidth {
        Bandwidth::Median => median_pairwise_distance(samples_a, samples_b),
        Bandwidth::Fixed { sigma } => {
            if !(sigma > 0.0) {
                return Err(Error::config("RBF bandwidth must be positive"));
            }
            sigma
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let unbiased = kernel.estimator == MmdEstimator::Unbiased;
    let kxx = kernel_mean(samples_a, samples_a, gamma, unbiased);
    let kyy = kernel_mean(samples_b, samples_b, gamma, unbiased);
    let kxy = kernel_mean(samples_a, samples_b, gamma, false);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0).sqrt())
}

/// Training domains ordered by MMD to the test task, ties by `domain_id`.
pub fn rank_environments(
    test_task: &LocalizationTask,
    training_domains: &DomainSet,
    kernel: &KernelSpec,
) -> Result<Vec<(String, f64)>> {
    if training_domains.is_empty() {
        return Err(Error::invalid("cannot rank against an empty domain set"));
    }
    let test = strided(test_task.pooled_features(), kernel.max_pooled);
    let mut ranked = training_domains
        .domains
        .iter()
        .map(|d| {
            let pooled = d.pooled_features(kernel.max_pooled);
            if pooled.is_empty() {
                return Err(Error::invalid(format!("domain {} has no samples", d.domain_id)));
            }
            Ok((d.domain_id.clone(), mmd(&test, &pooled, kernel)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// One line of a task dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u64,
    pub domain_id: String,
    pub mode: TaskMode,
    pub n_ways: usize,
    pub feature_dim: usize,
    pub support_ids: Vec<u64>,
    pub support_ways: Vec<usize>,
    /// Row-major `[samples × feature_dim]`.
    pub support_features: Vec<f64>,
    /// `[x, y]` per sample for regression, the way index for classification.
    pub support_targets: Vec<f64>,
    pub support_positions: Vec<f64>,
    pub query_ids: Vec<u64>,
    pub query_ways: Vec<usize>,
    pub query_features: Vec<f64>,
    pub query_targets: Vec<f64>,
    pub query_positions: Vec<f64>,
    /// Row-major raw observations; empty when the samples carry none.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub support_rss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query_rss: Vec<f64>,
}

type Flat = (Vec<u64>, Vec<usize>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn flatten_samples(samples: &[LabeledSample], mode: TaskMode) -> Flat {
    let rss = samples.iter().flat_map(|s| s.rss_dbm.iter().copied()).collect();
    let ids = samples.iter().map(|s| s.sample_id).collect();
    let ways = samples.iter().map(|s| s.way).collect();
    let features = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
    let positions: Vec<f64> = samples.iter().flat_map(|s| [s.position.x, s.position.y]).collect();
    let targets = match mode {
        TaskMode::Regression => positions.clone(),
        TaskMode::Classification => samples.iter().map(|s| s.way as f64).collect(),
    };
    (ids, ways, features, targets, positions, rss)
}

fn unflatten_samples(
    ids: &[u64],
    ways: &[usize],
    features: &[f64],
    positions: &[f64],
    rss: &[f64],
    dim: usize,
) -> Result<Vec<LabeledSample>> {
    let n = ids.len();
    if ways.len() != n || positions.len() != 2 * n || features.len() != n * dim {
        return Err(Error::invalid("task record arrays have inconsistent lengths"));
    }
    let rss_dim = if n == 0 { 0 } else { rss.len() / n };
    if rss_dim * n != rss.len() {
        return Err(Error::invalid("task record observations have inconsistent lengths"));
    }
    Ok((0..n)
        .map(|i| LabeledSample {
            sample_id: ids[i],
            way: ways[i],
            position: Point2::new(positions[2 * i], positions[2 * i + 1]),
            features: features[i * dim..(i + 1) * dim].to_vec(),
            rss_dbm: rss[i * rss_dim..(i + 1) * rss_dim].to_vec(),
        })
        .collect())
}

impl From<&LocalizationTask> for TaskRecord {
    fn from(t: &LocalizationTask) -> Self {
        let (support_ids, support_ways, support_features, support_targets, support_positions, support_rss) =
            flatten_samples(&t.support, t.mode);
        let (query_ids, query_ways, query_features, query_targets, query_positions, query_rss) =
            flatten_samples(&t.query, t.mode);
        TaskRecord {
            task_id: t.task_id,
            domain_id: t.domain_id.clone(),
            mode: t.mode,
            n_ways: t.n_ways,
            feature_dim: t.feature_dim(),
            support_ids,
            support_ways,
            support_features,
            support_targets,
            support_positions,
            query_ids,
            query_ways,
            query_features,
            query_targets,
            query_positions,
            support_rss,
            query_rss,
        }
    }
}

impl TryFrom<TaskRecord> for LocalizationTask {
    type Error = Error;

    fn try_from(r: TaskRecord) -> Result<Self> {
        Ok(LocalizationTask {
            support: unflatten_samples(
                &r.support_ids,
                &r.support_ways,
                &r.support_features,
                &r.support_positions,
                &r.support_rss,
                r.feature_dim,
            )?,
            query: unflatten_samples(
                &r.query_ids,
                &r.query_ways,
                &r.query_features,
                &r.query_positions,
                &r.query_rss,
                r.feature_dim,
            )?,
            task_id: r.task_id,
            domain_id: r.domain_id,
            mode: r.mode,
            n_ways: r.n_ways,
        })
    }
}

pub fn write_tasks_jsonl<'a, I>(tasks: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a LocalizationTask>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tasks {
        serde_json::to_writer(&mut w, &TaskRecord::from(t))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<LocalizationTask>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TaskRecord = serde_json::from_str(&line)?;
        tasks.push(record.try_into()?);
    }
    Ok(tasks)
}

/// Groups tasks by `domain_id`, keeping first-seen domain order.
pub fn group_by_domain(tasks: Vec<LocalizationTask>) -> DomainSet {
    let mut domains: Vec<Domain> = Vec::new();
    for t in tasks {
        match domains.iter_mut().find(|d| d.domain_id == t.domain_id) {
            Some(d) => d.tasks.push(t),
            None => domains.push(Domain {
                domain_id: t.domain_id.clone(),
                tasks: vec![t],
            }),
        }
    }
    DomainSet::new(domains)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::fingerprint::{build_database, RpLayout};
    use crate::propagation::{LosProbability, PathLossParams};

    fn setup(sigma: f64) -> (Environment, FingerprintDatabase) {
        let env = Environment::with_random_aps(
            "d0",
            20.0,
            20.0,
            24,
            PathLossParams::log_distance(20.0, 3.0, sigma),
            LosProbability::default(),
            5,
        )
        .unwrap();
        let db = build_database(&env, &RpLayout::Random { count: 30 }, 5, false, &mut env.rng()).unwrap();
        (env, db)
    }

    #[test]
    fn default_episode_sizes() {
        let (env, db) = setup(4.0);
        let t = sample_task(&db, &env, &TaskConfig::default(), &FeatureNormalizer::Identity, 0, "d0", &mut env.rng()).unwrap();
        assert_eq!(t.support.len(), 30);
        assert_eq!(t.query.len(), 50);
        assert_eq!(t.feature_dim(), 15);
        for way in 0..10 {
            assert_eq!(t.support.iter().filter(|s| s.way == way).count(), 3);
            assert_eq!(t.query.iter().filter(|s| s.way == way).count(), 5);
        }
        let ids: HashSet<u64> = t.support.iter().map(|s| s.sample_id).collect();
        assert!(t.query.iter().all(|s| !ids.contains(&s.sample_id)));
        let positions: HashSet<(u64, u64)> =
            t.support.iter().map(|s| (s.position.x.to_bits(), s.position.y.to_bits())).collect();
        assert_eq!(positions.len(), 10);
    }

    #[test]
    fn local_positions_stay_in_one_disk() {
        let (env, db) = setup(4.0);
        let cfg = TaskConfig {
            position_source: PositionSource::Local { radius_m: 2.0 },
            ..TaskConfig::default()
        };
        let t = sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, 0, "d0", &mut env.rng()).unwrap();
        for a in &t.support {
            for b in &t.support {
                assert!(a.position.distance(&b.position) <= 4.0 + 1e-12);
            }
            assert!(env.contains(&a.position));
        }
        assert!(t.support.iter().all(|s| s.rss_dbm.len() == 24));
    }

    #[test]
    fn signal_neighborhood_uses_reference_points() {
        let (env, db) = setup(4.0);
        let cfg = TaskConfig {
            position_source: PositionSource::SignalNeighborhood,
            ..TaskConfig::default()
        };
        let t = sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, 0, "d0", &mut env.rng()).unwrap();
        let rps: HashSet<(u64, u64)> = db.rps().iter().map(|r| (r.position.x.to_bits(), r.position.y.to_bits())).collect();
        assert!(t.support.iter().all(|s| rps.contains(&(s.position.x.to_bits(), s.position.y.to_bits()))));
    }

    #[test]
    fn zero_noise_collapses_way_features() {
        let (env, db) = setup(0.0);
        let t = sample_task(&db, &env, &TaskConfig::default(), &FeatureNormalizer::Identity, 0, "d0", &mut env.rng()).unwrap();
        for way in 0..10 {
            let feats: Vec<&Vec<f64>> = t.support.iter().chain(&t.query).filter(|s| s.way == way).map(|s| &s.features).collect();
            assert!(feats.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn same_seed_same_task() {
        let (env, db) = setup(4.0);
        let cfg = TaskConfig::default();
        let a = sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, 3, "d0", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, 3, "d0", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_positions_rejected() {
        let (env, db) = setup(4.0);
        let cfg = TaskConfig {
            n_ways: 31,
            ..TaskConfig::default()
        };
        assert!(sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, 0, "d0", &mut env.rng()).is_err());
        let uniform = TaskConfig {
            position_source: PositionSource::Uniform,
            ..cfg
        };
        assert!(sample_task(&db, &env, &uniform, &FeatureNormalizer::Identity, 0, "d0", &mut env.rng()).is_ok());
    }

    #[test]
    fn classification_batches_carry_way_labels() {
        let (env, db) = setup(4.0);
        let cfg = TaskConfig {
            mode: TaskMode::Classification,
            ..TaskConfig::default()
        };
        let t = sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, 0, "d0", &mut env.rng()).unwrap();
        let b = t.query_batch(&TargetScaling::identity()).unwrap();
        match b.targets {
            crate::neuralnet::Targets::Classes(c) => assert!(c.iter().all(|&w| w < 10)),
            _ => panic!("expected class targets"),
        }
    }

    #[test]
    fn mmd_of_identical_lists_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        assert_eq!(mmd(&a, &a, &KernelSpec::default()).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random::<f64>() + 0.5).collect()).collect();
        let ab = mmd(&a, &b, &KernelSpec::default()).unwrap();
        let ba = mmd(&b, &a, &KernelSpec::default()).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
        let short = vec![vec![0.0; 3]];
        assert!(mmd(&a, &short, &KernelSpec::default()).is_err());
        let empty: Vec<Vec<f64>> = vec![];
        assert!(mmd(&a, &empty, &KernelSpec::default()).is_err());
    }

    #[test]
    fn ranking_single_and_identical_domains() {
        let (env, db) = setup(4.0);
        let cfg = TaskConfig::default();
        let mut rng = env.rng();
        let tasks: Vec<_> = (0..3)
            .map(|i| sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, i, "d0", &mut rng).unwrap())
            .collect();
        let one = DomainSet::new(vec![Domain {
            domain_id: "only".into(),
            tasks: tasks.clone(),
        }]);
        let r = rank_environments(&tasks[0], &one, &KernelSpec::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, "only");

        let twins = DomainSet::new(vec![
            Domain {
                domain_id: "b".into(),
                tasks: tasks.clone(),
            },
            Domain {
                domain_id: "a".into(),
                tasks: tasks.clone(),
            },
        ]);
        let r = rank_environments(&tasks[1], &twins, &KernelSpec::default()).unwrap();
        assert_eq!(r[0].1, r[1].1);
        assert_eq!(r[0].0, "a");
        assert!(rank_environments(&tasks[0], &DomainSet::default(), &KernelSpec::default()).is_err());
    }

    #[test]
    fn task_dump_round_trip() {
        let (env, db) = setup(4.0);
        let mut rng = env.rng();
        let tasks: Vec<_> = [TaskMode::Regression, TaskMode::Classification]
            .into_iter()
            .enumerate()
            .map(|(i, mode)| {
                let cfg = TaskConfig {
                    mode,
                    ..TaskConfig::default()
                };
                sample_task(&db, &env, &cfg, &FeatureNormalizer::Identity, i as u64, "d0", &mut rng).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_tasks_jsonl(&tasks, &path).unwrap();
        let back = read_tasks_jsonl(&path).unwrap();
        assert_eq!(back, tasks);
        let set = group_by_domain(back);
        assert_eq!(set.len(), 1);
        assert_eq!(set.task_count(), 2);
    }

    #[test]
    fn target_scaling_round_trip() {
        let s = TargetScaling::for_area(20.0, 10.0).unwrap();
        assert_eq!(s.to_target(Point2::new(20.0, 5.0)), [1.0, 0.0]);
        assert_eq!(s.to_meters([-1.0, 0.5]), Point2::new(0.0, 10.0));
        assert!(TargetScaling::for_area(0.0, 10.0).is_err());
    }

    #[test]
    fn strided_subsample_is_even() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(strided(v.clone(), 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(strided(v.clone(), 20), v);
        assert_eq!(strided(v, 3), vec![0, 3, 6]);
    }
}
