//! Builtin environment presets and multi-domain dataset assembly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{build_database, FeatureNormalizer, FingerprintDatabase, RpLayout};
use crate::propagation::{Environment, EnvironmentPreset, PathLossParams};
use crate::tasking::{sample_task, Domain, DomainSet, LocalizationTask, TargetScaling, TaskConfig};

const MODEL_A: &str = include_str!("../presets/model_a.toml");
const MODEL_B: &str = include_str!("../presets/model_b.toml");
const MODEL_C: &str = include_str!("../presets/model_c.toml");
const MODEL_D: &str = include_str!("../presets/model_d.toml");
const MODEL_E: &str = include_str!("../presets/model_e.toml");

/// Names accepted by [`builtin_preset`].
pub const BUILTIN_PRESETS: [&str; 5] = ["model-a", "model-b", "model-c", "model-d", "model-e"];

/// Path-loss presets for the five model families:
///
/// * `model-a`: vanilla log-distance
/// * `model-b`: shopping mall, NLOS dual slope
/// * `model-c`: office, LOS/NLOS single slope
/// * `model-d`: office, frequency-dependent exponent
/// * `model-e`: shopping mall, LOS/NLOS dual slope
pub fn builtin_preset(name: &str) -> Result<EnvironmentPreset> {
    let text = match name {
        "model-a" | "a" => MODEL_A,
        "model-b" | "b" => MODEL_B,
        "model-c" | "c" => MODEL_C,
        "model-d" | "d" => MODEL_D,
        "model-e" | "e" => MODEL_E,
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; expected one of {}",
                BUILTIN_PRESETS.join(", ")
            )))
        }
    };
    EnvironmentPreset::from_toml_str(text)
}

/// SplitMix64 finalizer used to derive independent sub-seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One environment and its survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecipe {
    pub domain_id: String,
    pub preset: EnvironmentPreset,
    pub rp_layout: RpLayout,
}

impl DomainRecipe {
    pub fn from_builtin(domain_id: &str, preset: &str, rp_layout: RpLayout) -> Result<Self> {
        let mut preset = builtin_preset(preset)?;
        preset.env_id = domain_id.to_string();
        Ok(Self {
            domain_id: domain_id.to_string(),
            preset,
            rp_layout,
        })
    }

    /// Log-distance environment on the vanilla preset's area and AP count.
    pub fn log_distance(domain_id: &str, params: PathLossParams, rp_layout: RpLayout) -> Result<Self> {
        let mut recipe = Self::from_builtin(domain_id, "model-a", rp_layout)?;
        recipe.preset.params = params;
        Ok(recipe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub train: Vec<DomainRecipe>,
    pub test: DomainRecipe,
    pub task: TaskConfig,
    pub train_tasks_per_domain: usize,
    pub test_tasks: usize,
    /// Measurements averaged into each reference-point mean.
    pub samples_per_rp: usize,
    /// Std of per-AP power drift drawn independently for every task; the
    /// fingerprint database keeps the surveyed powers.
    #[serde(default)]
    pub task_drift_db: f64,
    /// Mixed into every preset seed, so one scenario yields independent
    /// layouts per run seed.
    pub seed: u64,
}

impl ScenarioConfig {
    /// Four log-distance training environments with different transmit
    /// powers, exponents, antenna gains, shadowing levels and survey
    /// densities, plus a held-out log-distance test environment surveyed at
    /// 10 reference points. Each task covers a 2 m disk.
    pub fn vanilla_4train_1test(seed: u64) -> Result<Self> {
        let rps = |count: usize| RpLayout::Random { count };
        let ld = |pt: f64, n: f64, g: f64, sigma: f64| PathLossParams {
            antenna_gain_db: g,
            ..PathLossParams::log_distance(pt, n, sigma)
        };
        Ok(Self {
            train: vec![
                DomainRecipe::log_distance("train-1", ld(20.0, 2.2, 0.0, 3.0), rps(10))?,
                DomainRecipe::log_distance("train-2", ld(15.0, 2.6, 2.0, 4.0), rps(20))?,
                DomainRecipe::log_distance("train-3", ld(25.0, 3.0, 0.0, 5.0), rps(40))?,
                DomainRecipe::log_distance("train-4", ld(18.0, 3.4, 3.0, 6.0), rps(54))?,
            ],
            test: DomainRecipe::log_distance("test", ld(22.0, 2.8, 1.0, 4.0), rps(10))?,
            task: TaskConfig {
                position_source: crate::tasking::PositionSource::Local { radius_m: 2.0 },
                ..TaskConfig::default()
            },
            train_tasks_per_domain: 200,
            test_tasks: 20,
            samples_per_rp: 10,
            task_drift_db: 0.0,
            seed,
        })
    }

    /// The five built-in model families as training domains, surveyed at
    /// 10, 20, 30, 40 and 54 reference points, with the vanilla test
    /// environment held out.
    pub fn model_families(seed: u64) -> Result<Self> {
        let base = Self::vanilla_4train_1test(seed)?;
        let train = ["a", "b", "c", "d", "e"]
            .iter()
            .zip([10usize, 20, 30, 40, 54])
            .map(|(name, count)| DomainRecipe::from_builtin(&format!("model-{name}"), name, RpLayout::Random { count }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { train, ..base })
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::config("a scenario needs at least one training domain"));
        }
        if !(self.task_drift_db >= 0.0 && self.task_drift_db.is_finite()) {
            return Err(Error::config("task_drift_db must be non-negative"));
        }
        if self.train_tasks_per_domain == 0 || self.samples_per_rp == 0 {
            return Err(Error::config("train_tasks_per_domain and samples_per_rp must be positive"));
        }
        let mut ids: Vec<&str> = self.train.iter().map(|d| d.domain_id.as_str()).collect();
        ids.push(&self.test.domain_id);
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("domain ids must be unique across train and test"));
        }
        self.task.validate()
    }
}

/// A built environment with its fingerprint database.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub env: Environment,
    pub db: FingerprintDatabase,
}

/// Sampled datasets; every feature is already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub train_sites: Vec<Site>,
    pub test_site: Site,
    pub train: DomainSet,
    pub test_tasks: Vec<LocalizationTask>,
    /// Fitted on the raw training features only.
    pub normalizer: FeatureNormalizer,
    /// Spans the largest training area.
    pub target_scaling: TargetScaling,
}

impl Scenario {
    /// Fresh normalized tasks from the test site.
    pub fn sample_test_tasks(&self, cfg: &TaskConfig, count: usize, drift_db: f64, seed: u64) -> Result<Vec<LocalizationTask>> {
        sample_site_tasks(&self.test_site, cfg, &self.normalizer, count, 0, drift_db, seed)
    }
}

/// Per-AP offsets `N(0, drift²)`; empty when `drift_db` is zero.
pub fn draw_power_drift<R: rand::Rng + ?Sized>(ap_count: usize, drift_db: f64, rng: &mut R) -> Vec<f64> {
    if drift_db == 0.0 {
        return Vec::new();
    }
    (0..ap_count)
        .map(|_| drift_db * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng))
        .collect()
}

/// `count` tasks from one site, each measured under its own power drift.
pub fn sample_site_tasks(
    site: &Site,
    cfg: &TaskConfig,
    normalizer: &FeatureNormalizer,
    count: usize,
    first_id: u64,
    drift_db: f64,
    seed: u64,
) -> Result<Vec<LocalizationTask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let offsets = draw_power_drift(site.env.ap_count(), drift_db, &mut rng);
            let env = site.env.clone().with_power_offsets(offsets)?;
            sample_task(&site.db, &env, cfg, normalizer, first_id + i as u64, &site.env.env_id, &mut rng)
        })
        .collect()
}

fn build_site(recipe: &DomainRecipe, seed: u64, samples_per_rp: usize) -> Result<Site> {
    let mut preset = recipe.preset.clone();
    preset.env_id = recipe.domain_id.clone();
    preset.seed = derive_seed(preset.seed, seed);
    let env = preset.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(env.rng_seed, 1));
    let db = build_database(&env, &recipe.rp_layout, samples_per_rp, false, &mut rng)?;
    Ok(Site { env, db })
}

/// Builds every site, samples raw tasks, then fits the normalizer on the
/// training tasks and applies it everywhere.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let train_sites = cfg
        .train
        .iter()
        .map(|r| build_site(r, cfg.seed, cfg.samples_per_rp))
        .collect::<Result<Vec<_>>>()?;
    let test_site = build_site(&cfg.test, cfg.seed, cfg.samples_per_rp)?;

    let mut domains = Vec::with_capacity(train_sites.len());
    for (i, site) in train_sites.iter().enumerate() {
        let first_id = (i * cfg.train_tasks_per_domain) as u64;
        let tasks = sample_site_tasks(
            site,
            &cfg.task,
            &FeatureNormalizer::Identity,
            cfg.train_tasks_per_domain,
            first_id,
            cfg.task_drift_db,
            derive_seed(cfg.seed, 100 + i as u64),
        )?;
        domains.push(Domain {
            domain_id: site.env.env_id.clone(),
            tasks,
        });
    }
    let mut train = DomainSet::new(domains);
    let normalizer = train.fit_normalizer()?;
    let target_scaling = TargetScaling::for_area(
        train_sites.iter().map(|s| s.env.area_width_m).fold(0.0, f64::max),
        train_sites.iter().map(|s| s.env.area_height_m).fold(0.0, f64::max),
    )?;
    train.apply_normalizer(&normalizer)?;

    let mut scenario = Scenario {
        train_sites,
        test_site,
        train,
        test_tasks: Vec::new(),
        normalizer,
        target_scaling,
    };
    scenario.test_tasks = scenario.sample_test_tasks(&cfg.task, cfg.test_tasks, cfg.task_drift_db, derive_seed(cfg.seed, 99))?;
    Ok(scenario)
}
