//! The `gen`, `train`, `test` and `baseline` commands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rfmeta::evaluation::{evaluate_finetuned_each, evaluate_method, EvalReport, Localizer, TestPoint};
use rfmeta::fingerprint::{FeatureNormalizer, FingerprintDatabase};
use rfmeta::metalearn::{
    joint_train, maml_dg_train_with, maml_train_with, maml_ts_train, random_init, select_meta_params, MetaConfig, MetaResult,
    MethodTag,
};
use rfmeta::neuralnet::{Checkpoint, NetSpec, ParamVector};
use rfmeta::scenario::build_scenario;
use rfmeta::tasking::{group_by_domain, read_tasks_jsonl, write_tasks_jsonl, DomainSet, LocalizationTask, TargetScaling, TaskConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const TRAIN_TASKS_FILE: &str = "tasks/train.jsonl";
pub const TEST_TASKS_FILE: &str = "tasks/test.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TS_INDEX_FILE: &str = "maml-ts.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Maml,
    MamlDg,
    MamlTs,
    Jt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Knn,
    Wknn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TestInit {
    Checkpoint(PathBuf),
    Random,
}

/// Everything a later command needs to know about a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub train_domains: Vec<String>,
    pub test_domain: String,
    pub task: TaskConfig,
    pub feature_dim: usize,
    pub normalizer: FeatureNormalizer,
    pub target_scaling: TargetScaling,
}

impl DatasetManifest {
    pub fn load(data: &Path) -> Result<Self> {
        read_json(&data.join(MANIFEST_FILE))
    }
}

/// Stored in a checkpoint's `meta` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: MethodTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<String>,
    pub seed: u64,
    pub feature_dim: usize,
    pub normalizer: FeatureNormalizer,
    pub target_scaling: TargetScaling,
}

/// Per-domain checkpoints written by `train maml-ts`, relative to the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsIndex {
    pub method: MethodTag,
    pub checkpoints: BTreeMap<String, PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_tasks(data: &Path, file: &str) -> Result<Vec<LocalizationTask>> {
    let path = data.join(file);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "missing task dump {}; run `rfmeta gen` first",
            path.display()
        )));
    }
    let tasks = read_tasks_jsonl(&path)?;
    if tasks.is_empty() {
        return Err(CliError::validation(&path, "no tasks"));
    }
    Ok(tasks)
}

fn write_tasks(tasks: &[LocalizationTask], path: &Path) -> Result<()> {
    write_tasks_jsonl(tasks, path)?;
    if read_tasks_jsonl(path)?.as_slice() != tasks {
        return Err(CliError::validation(path, "task dump does not round-trip"));
    }
    Ok(())
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)?;
    if &Checkpoint::load(path)? != ckpt {
        return Err(CliError::validation(path, "checkpoint does not round-trip"));
    }
    Ok(())
}

fn save_report(report: &EvalReport, out: &Path) -> Result<()> {
    let path = out.join(REPORT_FILE);
    report.save_json(&path)?;
    if &EvalReport::load_json(&path)? != report {
        return Err(CliError::validation(&path, "report does not round-trip"));
    }
    report.write_cdf_csv(&out.join("cdf.csv"))?;
    if report.convergence.is_some() {
        report.write_convergence_csv(&out.join("convergence.csv"))?;
    }
    Ok(())
}

/// Builds the scenario and writes presets, built environments, fingerprint
/// databases, task dumps and the manifest.
pub fn gen(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let sc = cfg.gen.scenario(cfg.seed)?;
    let s = build_scenario(&sc)?;
    for sub in ["presets", "environments", "databases", "tasks"] {
        create_dir(&out.join(sub))?;
    }
    let recipes = sc.train.iter().chain(std::iter::once(&sc.test));
    let sites = s.train_sites.iter().chain(std::iter::once(&s.test_site));
    for (recipe, site) in recipes.zip(sites) {
        let id = &recipe.domain_id;
        let preset = out.join("presets").join(format!("{id}.toml"));
        fs::write(&preset, recipe.preset.to_toml_string()?).map_err(|e| CliError::io(&preset, e))?;
        write_json(&site.env, &out.join("environments").join(format!("{id}.json")))?;
        let db = out.join("databases").join(format!("{id}.csv"));
        site.db.save_csv(&db)?;
        if FingerprintDatabase::load_csv(&db)?.len() != site.db.len() {
            return Err(CliError::validation(&db, "database does not round-trip"));
        }
    }
    let train: Vec<LocalizationTask> = s.train.tasks().cloned().collect();
    write_tasks(&train, &out.join(TRAIN_TASKS_FILE))?;
    write_tasks(&s.test_tasks, &out.join(TEST_TASKS_FILE))?;

    let manifest = DatasetManifest {
        seed: cfg.seed,
        train_domains: sc.train.iter().map(|r| r.domain_id.clone()).collect(),
        test_domain: sc.test.domain_id.clone(),
        task: sc.task.clone(),
        feature_dim: sc.task.feature_dim(),
        normalizer: s.normalizer.clone(),
        target_scaling: s.target_scaling,
    };
    write_json(&manifest, &out.join(MANIFEST_FILE))?;
    RunConfig {
        out: None,
        data: None,
        ..cfg.clone()
    }
    .write_snapshot(out)?;
    Ok(manifest)
}

fn meta_config(cfg: &RunConfig, manifest: &DatasetManifest) -> MetaConfig {
    MetaConfig {
        seed: cfg.seed,
        target_scaling: manifest.target_scaling,
        ..cfg.meta.clone()
    }
}

/// The config as run, minus the output directory.
fn snapshot(cfg: &RunConfig, meta: MetaConfig, data: &Path) -> RunConfig {
    RunConfig {
        out: None,
        data: Some(data.to_path_buf()),
        meta,
        ..cfg.clone()
    }
}

fn checkpoint_for(
    spec: &NetSpec,
    params: ParamVector,
    iteration: usize,
    meta: &CheckpointMeta,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(spec.clone(), params)?;
    ckpt.iteration = Some(iteration);
    ckpt.meta = Some(serde_json::to_value(meta).map_err(rfmeta::Error::from)?);
    Ok(ckpt)
}

/// Trains meta-parameters on the dataset in `data`.
pub fn train(cfg: &RunConfig, method: TrainMethod, data: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let domains = group_by_domain(read_tasks(data, TRAIN_TASKS_FILE)?);
    let spec = cfg.network.spec(manifest.feature_dim)?;
    let mcfg = meta_config(cfg, &manifest);
    create_dir(out)?;
    let meta = |method: MethodTag, domain_id: Option<String>| CheckpointMeta {
        method,
        domain_id,
        seed: cfg.seed,
        feature_dim: manifest.feature_dim,
        normalizer: manifest.normalizer.clone(),
        target_scaling: manifest.target_scaling,
    };

    if method == TrainMethod::MamlTs {
        let results = maml_ts_train(&domains, &mcfg, &spec)?;
        let dir = out.join("checkpoints");
        create_dir(&dir)?;
        let mut index = TsIndex {
            method: MethodTag::MamlTs,
            checkpoints: BTreeMap::new(),
        };
        for (id, r) in &results {
            let rel = PathBuf::from("checkpoints").join(format!("{id}.json"));
            let ckpt = checkpoint_for(&spec, r.meta_params.clone(), mcfg.outer_iterations, &meta(MethodTag::MamlTs, Some(id.clone())))?;
            save_checkpoint(&ckpt, &out.join(&rel))?;
            r.write_trace_csv(&out.join(format!("loss_trace_{id}.csv")))?;
            index.checkpoints.insert(id.clone(), rel);
        }
        write_json(&index, &out.join(TS_INDEX_FILE))?;
    } else {
        let tag = match method {
            TrainMethod::Maml => MethodTag::Maml,
            TrainMethod::MamlDg => MethodTag::MamlDg,
            TrainMethod::Jt => MethodTag::Jt,
            TrainMethod::MamlTs => unreachable!(),
        };
        let periodic_dir = out.join("checkpoints");
        if mcfg.checkpoint_every > 0 && tag != MethodTag::Jt {
            create_dir(&periodic_dir)?;
        }
        let ckpt_meta = meta(tag, None);
        let mut periodic = |it: usize, p: &ParamVector| -> rfmeta::Result<()> {
            let ckpt = checkpoint_for(&spec, p.clone(), it, &ckpt_meta).map_err(|e| match e {
                CliError::Core(e) => e,
                other => rfmeta::Error::InvalidInput(other.to_string()),
            })?;
            ckpt.save(&periodic_dir.join(format!("iter_{it:06}.json")))
        };
        let hook = (mcfg.checkpoint_every > 0).then_some(&mut periodic as &mut rfmeta::metalearn::CheckpointFn<'_>);
        let result: MetaResult = match tag {
            MethodTag::Maml => maml_train_with(&domains, &mcfg, &spec, hook)?,
            MethodTag::MamlDg => maml_dg_train_with(&domains, &mcfg, &spec, hook)?,
            _ => joint_train(&domains, &mcfg, &spec)?,
        };
        let ckpt = checkpoint_for(&spec, result.meta_params.clone(), mcfg.outer_iterations, &ckpt_meta)?;
        save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
        result.write_trace_csv(&out.join("loss_trace.csv"))?;
    }
    snapshot(cfg, mcfg, data).write_snapshot(out)?;
    Ok(())
}

fn load_checked(path: &Path, manifest: &DatasetManifest) -> Result<(Checkpoint, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = ckpt
        .meta
        .clone()
        .ok_or_else(|| CliError::Mismatch(format!("{} carries no training metadata", path.display())))
        .and_then(|v| serde_json::from_value(v).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display()))))?;
    if ckpt.spec.input_dim() != manifest.feature_dim || meta.feature_dim != manifest.feature_dim {
        return Err(CliError::Mismatch(format!(
            "{} expects {} input features, the dataset has {}",
            path.display(),
            ckpt.spec.input_dim(),
            manifest.feature_dim
        )));
    }
    if ckpt.spec.output_dim() != 2 {
        return Err(CliError::Mismatch(format!("{} is not a coordinate regressor", path.display())));
    }
    if meta.normalizer != manifest.normalizer || meta.target_scaling != manifest.target_scaling {
        return Err(CliError::Mismatch(format!(
            "{} was trained with a different feature normalizer or target scaling",
            path.display()
        )));
    }
    Ok((ckpt, meta))
}

/// A single checkpoint or a per-domain checkpoint set.
enum Init {
    Single { spec: NetSpec, params: ParamVector, tag: MethodTag },
    PerDomain { spec: NetSpec, results: BTreeMap<String, MetaResult> },
}

fn load_init(path: &Path, manifest: &DatasetManifest) -> Result<Init> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("checkpoints").is_none() {
        let (ckpt, meta) = load_checked(path, manifest)?;
        return Ok(Init::Single {
            spec: ckpt.spec,
            params: ckpt.params,
            tag: meta.method,
        });
    }
    let index: TsIndex = serde_json::from_value(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut spec: Option<NetSpec> = None;
    let mut results = BTreeMap::new();
    for (id, rel) in &index.checkpoints {
        let (ckpt, _) = load_checked(&base.join(rel), manifest)?;
        if spec.as_ref().is_some_and(|s| s != &ckpt.spec) {
            return Err(CliError::Mismatch("per-domain checkpoints disagree on the network".into()));
        }
        spec = Some(ckpt.spec);
        results.insert(
            id.clone(),
            MetaResult {
                meta_params: ckpt.params,
                loss_trace: Vec::new(),
                method_tag: index.method,
            },
        );
    }
    let spec = spec.ok_or_else(|| CliError::Mismatch(format!("{} lists no checkpoints", path.display())))?;
    Ok(Init::PerDomain { spec, results })
}

/// Fine-tunes on every test task's support set and reports query errors.
///
/// Per-domain checkpoints are chosen per task by MMD ranking against the
/// training domains.
pub fn test(cfg: &RunConfig, init: &TestInit, data: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let tasks = read_tasks(data, TEST_TASKS_FILE)?;
    let mcfg = meta_config(cfg, &manifest);
    create_dir(out)?;
    let mut report = match init {
        TestInit::Random => {
            let spec = cfg.network.spec(manifest.feature_dim)?;
            let ri = random_init(&spec, &mcfg);
            let inits = vec![&ri.meta_params; tasks.len()];
            evaluate_finetuned_each(MethodTag::Ri.as_str(), &spec, &inits, &tasks, &mcfg, &cfg.eval.grid)?
        }
        TestInit::Checkpoint(path) => match load_init(path, &manifest)? {
            Init::Single { spec, params, tag } => {
                let inits = vec![&params; tasks.len()];
                evaluate_finetuned_each(tag.as_str(), &spec, &inits, &tasks, &mcfg, &cfg.eval.grid)?
            }
            Init::PerDomain { spec, results } => {
                let domains: DomainSet = group_by_domain(read_tasks(data, TRAIN_TASKS_FILE)?);
                let selected = tasks
                    .iter()
                    .map(|t| select_meta_params(t, &results, &domains, &cfg.eval.kernel))
                    .collect::<rfmeta::Result<Vec<_>>>()?;
                write_selection(&tasks, &selected, &out.join("selection.csv"))?;
                let inits: Vec<&ParamVector> = selected.iter().map(|(_, p)| *p).collect();
                evaluate_finetuned_each(MethodTag::MamlTs.as_str(), &spec, &inits, &tasks, &mcfg, &cfg.eval.grid)?
            }
        },
    };
    report.seeds = vec![cfg.seed];
    let snapshot = snapshot(cfg, mcfg, data);
    report.config = Some(serde_json::to_value(&snapshot).map_err(rfmeta::Error::from)?);
    save_report(&report, out)?;
    snapshot.write_snapshot(out)?;
    Ok(report)
}

fn write_selection(tasks: &[LocalizationTask], selected: &[(&str, &ParamVector)], path: &Path) -> Result<()> {
    let mut text = String::from("task_id,selected_domain\n");
    for (t, (id, _)) in tasks.iter().zip(selected) {
        text.push_str(&format!("{},{id}\n", t.task_id));
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Localizes every test query observation against the test database.
pub fn baseline(cfg: &RunConfig, method: BaselineMethod, data: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(data)?;
    let db_path = data.join("databases").join(format!("{}.csv", manifest.test_domain));
    let db = FingerprintDatabase::load_csv(&db_path)?;
    let tasks = read_tasks(data, TEST_TASKS_FILE)?;
    let points = tasks
        .iter()
        .flat_map(|t| &t.query)
        .map(|q| {
            if q.rss_dbm.is_empty() {
                return Err(CliError::validation(data.join(TEST_TASKS_FILE), "query samples carry no raw RSS"));
            }
            Ok(TestPoint {
                position: q.position,
                input: q.rss_dbm.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = cfg.eval.k;
    let loc = match method {
        BaselineMethod::Knn => Localizer::Knn { db: &db, k },
        BaselineMethod::Wknn => Localizer::Wknn { db: &db, k },
    };
    create_dir(out)?;
    let mut report = evaluate_method(&loc, &points, &cfg.eval.grid)?;
    report.seeds = vec![cfg.seed];
    let snapshot = snapshot(cfg, cfg.meta.clone(), data);
    report.config = Some(serde_json::to_value(&snapshot).map_err(rfmeta::Error::from)?);
    save_report(&report, out)?;
    snapshot.write_snapshot(out)?;
    Ok(report)
}
