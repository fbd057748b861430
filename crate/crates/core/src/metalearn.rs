//! First-order MAML, its domain-generalization and task-selection variants,
//! the joint-training and random-init baselines, and meta-test fine-tuning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{forward, init_params, loss, loss_and_grad, Batch, InitScheme, LossKind, NetSpec, ParamVector, Targets};
use crate::tasking::{rank_environments, DomainSet, KernelSpec, LocalizationTask, TargetScaling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Maml,
    MamlDg,
    MamlTs,
    Jt,
    Ri,
}

impl MethodTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Maml => "maml",
            MethodTag::MamlDg => "maml-dg",
            MethodTag::MamlTs => "maml-ts",
            MethodTag::Jt => "jt",
            MethodTag::Ri => "ri",
        }
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner (and fine-tuning) learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    pub inner_steps: usize,
    pub outer_iterations: usize,
    /// Tasks per outer iteration (`M`).
    pub tasks_per_iteration: usize,
    /// Fine-tuning steps at meta-test time (`Q`).
    pub finetune_steps: usize,
    /// Weight `w` of the second-domain loss in MAML-DG.
    pub dg_weight: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub init: InitScheme,
    /// Minibatch size for joint training.
    pub jt_batch_size: usize,
    /// Emit a checkpoint every this many outer iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Coordinate normalization of regression targets.
    pub target_scaling: TargetScaling,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
            inner_steps: 5,
            outer_iterations: 7500,
            tasks_per_iteration: 16,
            finetune_steps: 10,
            dg_weight: 1.0,
            seed: 0,
            loss: LossKind::Rmse,
            init: InitScheme::GlorotUniform,
            jt_batch_size: 80,
            checkpoint_every: 0,
            target_scaling: TargetScaling::identity(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("alpha and beta must be positive and finite"));
        }
        if self.inner_steps == 0 || self.outer_iterations == 0 || self.tasks_per_iteration == 0 || self.finetune_steps == 0 {
            return Err(Error::config(
                "inner_steps, outer_iterations, tasks_per_iteration and finetune_steps must be positive",
            ));
        }
        if !(self.dg_weight >= 0.0 && self.dg_weight.is_finite()) {
            return Err(Error::config("dg_weight must be non-negative and finite"));
        }
        if self.jt_batch_size == 0 {
            return Err(Error::config("jt_batch_size must be positive"));
        }
        self.target_scaling.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub meta_params: ParamVector,
    /// `(iteration, meta-loss)`, iterations counted from 1.
    pub loss_trace: Vec<(usize, f64)>,
    pub method_tag: MethodTag,
}

impl MetaResult {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().map(|&(_, l)| l)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        write_trace_csv(&self.loss_trace, ("iteration", "meta_loss"), path)
    }
}

pub(crate) fn write_trace_csv(trace: &[(usize, f64)], header: (&str, &str), path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record([header.0, header.1])?;
    for (i, v) in trace {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A task as seen by the optimizers.
///
/// Trainers call every method; fine-tuning only ever calls `support_grad`
/// and `query_error`.
pub trait TaskObjective: Sync {
    fn support_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
    fn query_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
    fn query_loss(&self, params: &ParamVector) -> Result<f64>;
    /// Evaluation metric on the query set: mean Euclidean error in meters
    /// for regression, error rate for classification.
    fn query_error(&self, params: &ParamVector) -> Result<f64>;
}

/// A localization task bound to a network and loss.
#[derive(Debug, Clone)]
pub struct NetTask {
    spec: NetSpec,
    loss: LossKind,
    support: Batch,
    query: Batch,
    /// Meters per target unit.
    error_scale: f64,
}

impl NetTask {
    pub fn new(spec: &NetSpec, loss: LossKind, task: &LocalizationTask, scaling: &TargetScaling) -> Result<Self> {
        let mut t = Self::from_batches(spec, loss, task.support_batch(scaling)?, task.query_batch(scaling)?)?;
        if matches!(t.query.targets, Targets::Positions(_)) {
            t.error_scale = scaling.scale_m;
        }
        Ok(t)
    }

    /// Targets are taken as given; errors are reported in target units.
    pub fn from_batches(spec: &NetSpec, loss: LossKind, support: Batch, query: Batch) -> Result<Self> {
        for b in [&support, &query] {
            if b.inputs.ncols() != spec.input_dim() {
                return Err(Error::invalid(format!(
                    "task has {} features, network expects {}",
                    b.inputs.ncols(),
                    spec.input_dim()
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            loss,
            support,
            query,
            error_scale: 1.0,
        })
    }

    pub fn support(&self) -> &Batch {
        &self.support
    }

    pub fn query(&self) -> &Batch {
        &self.query
    }

    pub fn error_scale(&self) -> f64 {
        self.error_scale
    }
}

impl TaskObjective for NetTask {
    fn support_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        loss_and_grad(&self.spec, params, &self.support, self.loss)
    }

    fn query_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        loss_and_grad(&self.spec, params, &self.query, self.loss)
    }

    fn query_loss(&self, params: &ParamVector) -> Result<f64> {
        loss(&self.spec, params, &self.query, self.loss)
    }

    fn query_error(&self, params: &ParamVector) -> Result<f64> {
        Ok(batch_error(&self.spec, params, &self.query)? * self.error_scale)
    }
}

/// Mean Euclidean error (target units) for coordinate targets, error rate
/// for classes.
pub fn batch_error(spec: &NetSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty batch"));
    }
    let out = forward(spec, params, batch.inputs.view())?;
    let n = batch.len() as f64;
    match &batch.targets {
        Targets::Positions(t) => {
            if out.ncols() != 2 {
                return Err(Error::invalid("localization error needs a 2-output network"));
            }
            let total: f64 = out
                .rows()
                .into_iter()
                .zip(t.rows())
                .map(|(o, t)| ((o[0] - t[0]).powi(2) + (o[1] - t[1]).powi(2)).sqrt())
                .sum();
            Ok(total / n)
        }
        Targets::Classes(c) => {
            let wrong = out
                .rows()
                .into_iter()
                .zip(c)
                .filter(|(row, &class)| {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                        .0;
                    best != class
                })
                .count();
            Ok(wrong as f64 / n)
        }
    }
}

/// Gradient descent on the support set only; `params` is left untouched.
pub fn adapt<T: TaskObjective + ?Sized>(task: &T, params: &ParamVector, alpha: f64, steps: usize) -> Result<ParamVector> {
    if steps == 0 {
        return Err(Error::invalid("adaptation needs at least one step"));
    }
    let mut p = params.clone();
    for _ in 0..steps {
        let (_, g) = task.support_grad(&p)?;
        p.add_scaled(-alpha, &g);
    }
    Ok(p)
}

/// `θ ← θ − α·∇L(θ; support)` repeated `steps` times.
pub fn inner_adapt(
    spec: &NetSpec,
    params: &ParamVector,
    support: &Batch,
    loss_kind: LossKind,
    alpha: f64,
    steps: usize,
) -> Result<ParamVector> {
    if steps == 0 {
        return Err(Error::invalid("adaptation needs at least one step"));
    }
    let mut p = params.clone();
    for _ in 0..steps {
        let (_, g) = loss_and_grad(spec, &p, support, loss_kind)?;
        p.add_scaled(-alpha, &g);
    }
    Ok(p)
}

/// Summed query loss and first-order meta-gradient over `selected` tasks.
///
/// Tasks are adapted independently (possibly in parallel); the reduction
/// runs over the selection sorted by index, so the result does not depend
/// on the order in which tasks were drawn.
pub fn meta_gradient<T: TaskObjective>(
    tasks: &[T],
    selected: &[usize],
    params: &ParamVector,
    alpha: f64,
    inner_steps: usize,
) -> Result<(f64, ParamVector)> {
    let mut order = selected.to_vec();
    order.sort_unstable();
    if let Some(&bad) = order.iter().find(|&&i| i >= tasks.len()) {
        return Err(Error::invalid(format!("task index {bad} out of range")));
    }
    let parts = order
        .par_iter()
        .map(|&i| {
            let adapted = adapt(&tasks[i], params, alpha, inner_steps)?;
            tasks[i].query_grad(&adapted)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grad = ParamVector::zeros(params.len());
    for (l, g) in &parts {
        total += l;
        grad.add_scaled(1.0, g);
    }
    Ok((total, grad))
}

/// One first-order outer update; returns the new parameters and summed
/// query loss at the adapted parameters.
pub fn maml_step<T: TaskObjective>(
    tasks: &[T],
    selected: &[usize],
    params: &ParamVector,
    cfg: &MetaConfig,
) -> Result<(ParamVector, f64)> {
    let (l, g) = meta_gradient(tasks, selected, params, cfg.alpha, cfg.inner_steps)?;
    let mut next = params.clone();
    next.add_scaled(-cfg.beta, &g);
    Ok((next, l))
}

/// One MAML-DG update from domain `a` tasks then domain `b` tasks.
/// Returns `(θ_new, F, G)` with `F`, `G` the summed query losses.
pub fn dg_step<T: TaskObjective>(
    tasks_a: &[T],
    selected_a: &[usize],
    tasks_b: &[T],
    selected_b: &[usize],
    params: &ParamVector,
    cfg: &MetaConfig,
) -> Result<(ParamVector, f64, f64)> {
    let (theta_prime, f) = maml_step(tasks_a, selected_a, params, cfg)?;
    let (g_loss, g_grad) = meta_gradient(tasks_b, selected_b, &theta_prime, cfg.alpha, cfg.inner_steps)?;
    let mut next = theta_prime;
    next.add_scaled(-cfg.dg_weight * cfg.beta, &g_grad);
    Ok((next, f, g_loss))
}

fn draw_tasks<R: Rng + ?Sized>(pool: usize, m: usize, rng: &mut R) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..pool)).collect()
}

/// Checkpoint hook: `(iteration, params)`.
pub type CheckpointFn<'a> = dyn FnMut(usize, &ParamVector) -> Result<()> + 'a;

/// Generic vanilla MAML over a task pool starting from `init`.
pub fn maml_train_tasks<T: TaskObjective>(
    tasks: &[T],
    init: ParamVector,
    cfg: &MetaConfig,
    rng: &mut ChaCha8Rng,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<MetaResult> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("MAML needs at least one training task"));
    }
    let mut checkpoint = checkpoint;
    let mut theta = init;
    let mut trace = Vec::with_capacity(cfg.outer_iterations);
    let m = cfg.tasks_per_iteration as f64;
    for it in 1..=cfg.outer_iterations {
        let selected = draw_tasks(tasks.len(), cfg.tasks_per_iteration, rng);
        let (next, l) = maml_step(tasks, &selected, &theta, cfg)?;
        theta = next;
        trace.push((it, l / m));
        emit_checkpoint(&mut checkpoint, cfg, it, &theta)?;
    }
    finish(theta, trace, MethodTag::Maml)
}

fn emit_checkpoint(hook: &mut Option<&mut CheckpointFn<'_>>, cfg: &MetaConfig, it: usize, theta: &ParamVector) -> Result<()> {
    if let Some(f) = hook.as_deref_mut() {
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            f(it, theta)?;
        }
    }
    Ok(())
}

fn finish(theta: ParamVector, trace: Vec<(usize, f64)>, tag: MethodTag) -> Result<MetaResult> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("{tag} training diverged to non-finite parameters")));
    }
    Ok(MetaResult {
        meta_params: theta,
        loss_trace: trace,
        method_tag: tag,
    })
}

/// Generic MAML-DG over per-domain task pools starting from `init`.
///
/// The trace records `(F + w·G) / (M·(1 + w))`, the mean per-task query
/// loss, so it is on the same scale as the vanilla trace.
pub fn maml_dg_train_tasks<T: TaskObjective>(
    domains: &[Vec<T>],
    init: ParamVector,
    cfg: &MetaConfig,
    rng: &mut ChaCha8Rng,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<MetaResult> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(Error::invalid(format!(
            "MAML-DG requires at least two training domains, got {}",
            domains.len()
        )));
    }
    if let Some(i) = domains.iter().position(|d| d.is_empty()) {
        return Err(Error::invalid(format!("training domain {i} has no tasks")));
    }
    let mut checkpoint = checkpoint;
    let mut theta = init;
    let mut trace = Vec::with_capacity(cfg.outer_iterations);
    let norm = cfg.tasks_per_iteration as f64 * (1.0 + cfg.dg_weight);
    for it in 1..=cfg.outer_iterations {
        let a = rng.random_range(0..domains.len());
        let mut b = rng.random_range(0..domains.len() - 1);
        if b >= a {
            b += 1;
        }
        let sel_a = draw_tasks(domains[a].len(), cfg.tasks_per_iteration, rng);
        let sel_b = draw_tasks(domains[b].len(), cfg.tasks_per_iteration, rng);
        let (next, f, g) = dg_step(&domains[a], &sel_a, &domains[b], &sel_b, &theta, cfg)?;
        theta = next;
        trace.push((it, (f + cfg.dg_weight * g) / norm));
        emit_checkpoint(&mut checkpoint, cfg, it, &theta)?;
    }
    finish(theta, trace, MethodTag::MamlDg)
}

pub fn prepare_tasks<'a, I>(spec: &NetSpec, cfg: &MetaConfig, tasks: I) -> Result<Vec<NetTask>>
where
    I: IntoIterator<Item = &'a LocalizationTask>,
{
    tasks
        .into_iter()
        .map(|t| NetTask::new(spec, cfg.loss, t, &cfg.target_scaling))
        .collect()
}

fn seeded(cfg: &MetaConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

/// Vanilla first-order MAML on the pooled tasks of every domain.
pub fn maml_train(domains: &DomainSet, cfg: &MetaConfig, spec: &NetSpec) -> Result<MetaResult> {
    maml_train_with(domains, cfg, spec, None)
}

pub fn maml_train_with(
    domains: &DomainSet,
    cfg: &MetaConfig,
    spec: &NetSpec,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<MetaResult> {
    cfg.validate()?;
    if domains.task_count() == 0 {
        return Err(Error::invalid("MAML needs at least one training task"));
    }
    let tasks = prepare_tasks(spec, cfg, domains.tasks())?;
    let mut rng = seeded(cfg);
    let init = init_params(spec, cfg.init, &mut rng);
    maml_train_tasks(&tasks, init, cfg, &mut rng, checkpoint)
}

/// MAML-DG with domain pairs drawn uniformly per iteration.
pub fn maml_dg_train(domains: &DomainSet, cfg: &MetaConfig, spec: &NetSpec) -> Result<MetaResult> {
    maml_dg_train_with(domains, cfg, spec, None)
}

pub fn maml_dg_train_with(
    domains: &DomainSet,
    cfg: &MetaConfig,
    spec: &NetSpec,
    checkpoint: Option<&mut CheckpointFn<'_>>,
) -> Result<MetaResult> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(Error::invalid(format!(
            "MAML-DG requires at least two training domains, got {}",
            domains.len()
        )));
    }
    let pools = domains
        .domains
        .iter()
        .map(|d| prepare_tasks(spec, cfg, &d.tasks))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeded(cfg);
    let init = init_params(spec, cfg.init, &mut rng);
    maml_dg_train_tasks(&pools, init, cfg, &mut rng, checkpoint)
}

/// Independent vanilla MAML per domain, each with the same seed.
pub fn maml_ts_train(domains: &DomainSet, cfg: &MetaConfig, spec: &NetSpec) -> Result<BTreeMap<String, MetaResult>> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(Error::invalid("MAML-TS needs at least one training domain"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in &domains.domains {
        if !seen.insert(d.domain_id.as_str()) {
            return Err(Error::invalid(format!("duplicate domain id {}", d.domain_id)));
        }
    }
    let results = domains
        .domains
        .par_iter()
        .map(|d| {
            let single = DomainSet::new(vec![d.clone()]);
            let mut r = maml_train(&single, cfg, spec)?;
            r.method_tag = MethodTag::MamlTs;
            Ok((d.domain_id.clone(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().collect())
}

/// Meta-parameters of the training domain closest to the test task in MMD.
/// Ties go to the lexicographically smallest domain id.
pub fn select_meta_params<'a>(
    test_task: &LocalizationTask,
    ts_results: &'a BTreeMap<String, MetaResult>,
    domains: &DomainSet,
    kernel: &KernelSpec,
) -> Result<(&'a str, &'a ParamVector)> {
    if ts_results.is_empty() {
        return Err(Error::invalid("no environment-specific meta-parameters to select from"));
    }
    let ranked = rank_environments(test_task, domains, kernel)?;
    ranked
        .iter()
        .find_map(|(id, _)| ts_results.get_key_value(id))
        .map(|(id, r)| (id.as_str(), &r.meta_params))
        .ok_or_else(|| Error::invalid("no ranked domain has trained meta-parameters"))
}

/// Plain minibatch SGD on every support and query sample.
///
/// Runs `outer_iterations · inner_steps` steps at rate `alpha`, with
/// minibatches drawn with replacement. The trace holds the mean minibatch
/// loss of each block of `inner_steps` steps.
pub fn joint_train(domains: &DomainSet, cfg: &MetaConfig, spec: &NetSpec) -> Result<MetaResult> {
    cfg.validate()?;
    let mut pooled = Vec::new();
    for t in domains.tasks() {
        pooled.extend(t.support.iter().cloned());
        pooled.extend(t.query.iter().cloned());
    }
    if pooled.is_empty() {
        return Err(Error::invalid("joint training needs at least one sample"));
    }
    let mode = domains.tasks().next().map(|t| t.mode).unwrap_or_default();
    let data = crate::tasking::samples_to_batch(&pooled, mode, &cfg.target_scaling)?;
    let mut rng = seeded(cfg);
    let init = init_params(spec, cfg.init, &mut rng);
    joint_train_batch(&data, init, spec, cfg, &mut rng)
}

pub fn joint_train_batch(
    data: &Batch,
    init: ParamVector,
    spec: &NetSpec,
    cfg: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MetaResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("joint training needs at least one sample"));
    }
    let mut theta = init;
    let mut trace = Vec::with_capacity(cfg.outer_iterations);
    let batch_size = cfg.jt_batch_size.min(data.len());
    for it in 1..=cfg.outer_iterations {
        let mut block = 0.0;
        for _ in 0..cfg.inner_steps {
            let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
            let (l, g) = loss_and_grad(spec, &theta, &data.select(&idx), cfg.loss)?;
            theta.add_scaled(-cfg.alpha, &g);
            block += l;
        }
        trace.push((it, block / cfg.inner_steps as f64));
    }
    finish(theta, trace, MethodTag::Jt)
}

/// Untrained parameters drawn from the configured initializer.
pub fn random_init(spec: &NetSpec, cfg: &MetaConfig) -> MetaResult {
    let mut rng = seeded(cfg);
    MetaResult {
        meta_params: init_params(spec, cfg.init, &mut rng),
        loss_trace: Vec::new(),
        method_tag: MethodTag::Ri,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTestResult {
    pub adapted: ParamVector,
    /// `(step, query error)` for steps `0..=Q`.
    pub error_trace: Vec<(usize, f64)>,
}

impl MetaTestResult {
    pub fn final_error(&self) -> f64 {
        self.error_trace.last().map_or(f64::NAN, |&(_, e)| e)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        write_trace_csv(&self.error_trace, ("step", "error"), path)
    }
}

/// `steps` support-only gradient steps with the query error after each.
pub fn finetune<T: TaskObjective + ?Sized>(task: &T, init: &ParamVector, alpha: f64, steps: usize) -> Result<MetaTestResult> {
    let mut p = init.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push((0, task.query_error(&p)?));
    for step in 1..=steps {
        let (_, g) = task.support_grad(&p)?;
        p.add_scaled(-alpha, &g);
        trace.push((step, task.query_error(&p)?));
    }
    Ok(MetaTestResult {
        adapted: p,
        error_trace: trace,
    })
}

/// `Q` fine-tuning steps on the support set at rate `alpha`.
pub fn meta_test(spec: &NetSpec, init: &ParamVector, test_task: &LocalizationTask, cfg: &MetaConfig) -> Result<MetaTestResult> {
    let task = NetTask::new(spec, cfg.loss, test_task, &cfg.target_scaling)?;
    finetune(&task, init, cfg.alpha, cfg.finetune_steps)
}

/// Writes several results keyed by id as one JSON object.
pub fn write_results_json(results: &BTreeMap<String, MetaResult>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, results)?;
    w.flush().map_err(|e| Error::io(path, e))
}
