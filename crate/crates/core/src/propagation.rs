//! Synthetic RSS generation from parametric indoor path-loss models.
//!
//! Every family shares the free-space intercept `20·log10(4π/λ) − G` and
//! differs only in the distance term. Shadowing is passed in pre-sampled so
//! that [`path_loss_db`] stays a pure function; [`measure_rss`] owns the
//! random draws.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point2;

pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;

/// Distances are floored here before taking the logarithm.
pub const MIN_DISTANCE_M: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    /// Single exponent, single shadowing level.
    LogDistance,
    /// Separate exponents and shadowing for LOS and NLOS links.
    SingleSlopeLosNlos,
    /// NLOS-only model whose exponent changes at the breakpoint.
    DualSlopeNlos,
    /// Dual-slope curves for both LOS and NLOS links.
    DualSlopeLosNlos,
    /// Exponent `n(f) = n_base + slope·log10(f / f_ref)`, LOS/NLOS bases.
    FreqDependentExponent,
}

impl ModelFamily {
    /// Link state imposed by the family, or `None` when it is drawn per link.
    pub fn fixed_link_state(self) -> Option<bool> {
        match self {
            ModelFamily::LogDistance => Some(true),
            ModelFamily::DualSlopeNlos => Some(false),
            ModelFamily::SingleSlopeLosNlos
            | ModelFamily::DualSlopeLosNlos
            | ModelFamily::FreqDependentExponent => None,
        }
    }

    fn is_dual_slope(self) -> bool {
        matches!(self, ModelFamily::DualSlopeNlos | ModelFamily::DualSlopeLosNlos)
    }
}

/// All constants of a path-loss family.
///
/// Fields that a family does not use are ignored; the NLOS exponents only
/// matter for families that distinguish link state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathLossParams {
    pub model_family: ModelFamily,
    pub transmit_power_dbm: f64,
    /// LOS exponent (or the only exponent), first slope for dual-slope models.
    pub exponent_primary: f64,
    /// LOS exponent beyond the breakpoint.
    pub exponent_secondary: f64,
    pub breakpoint_m: f64,
    pub antenna_gain_db: f64,
    pub frequency_mhz: f64,
    pub sigma_los_db: f64,
    pub sigma_nlos_db: f64,
    /// NLOS exponent, first slope for dual-slope models.
    pub exponent_nlos: f64,
    /// NLOS exponent beyond the breakpoint.
    pub exponent_nlos_secondary: f64,
    /// Exponent change per decade of frequency (frequency-dependent family).
    pub exponent_freq_slope: f64,
    pub reference_frequency_mhz: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        Self {
            model_family: ModelFamily::LogDistance,
            transmit_power_dbm: 20.0,
            exponent_primary: 2.0,
            exponent_secondary: 2.0,
            breakpoint_m: 10.0,
            antenna_gain_db: 0.0,
            frequency_mhz: 2440.0,
            sigma_los_db: 4.0,
            sigma_nlos_db: 8.0,
            exponent_nlos: 3.0,
            exponent_nlos_secondary: 3.5,
            exponent_freq_slope: 0.0,
            reference_frequency_mhz: 1000.0,
        }
    }
}

impl PathLossParams {
    pub fn log_distance(transmit_power_dbm: f64, exponent: f64, sigma_db: f64) -> Self {
        Self {
            transmit_power_dbm,
            exponent_primary: exponent,
            sigma_los_db: sigma_db,
            ..Self::default()
        }
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT_M_S / (self.frequency_mhz * 1e6)
    }

    /// `20·log10(4π/λ) − G`, the loss at one meter without shadowing.
    pub fn intercept_db(&self) -> f64 {
        20.0 * (4.0 * std::f64::consts::PI / self.wavelength_m()).log10() - self.antenna_gain_db
    }

    pub fn sigma_db(&self, is_los: bool) -> f64 {
        let los = self.model_family.fixed_link_state().unwrap_or(is_los);
        if los {
            self.sigma_los_db
        } else {
            self.sigma_nlos_db
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("frequency_mhz", self.frequency_mhz)?;
        positive("exponent_primary", self.exponent_primary)?;
        for (name, v) in [("sigma_los_db", self.sigma_los_db), ("sigma_nlos_db", self.sigma_nlos_db)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !self.transmit_power_dbm.is_finite() || !self.antenna_gain_db.is_finite() {
            return Err(Error::config("transmit power and antenna gain must be finite"));
        }
        if self.model_family.is_dual_slope() {
            positive("breakpoint_m", self.breakpoint_m)?;
            positive("exponent_secondary", self.exponent_secondary)?;
        }
        if self.model_family.fixed_link_state().is_none() || self.model_family == ModelFamily::DualSlopeNlos {
            positive("exponent_nlos", self.exponent_nlos)?;
        }
        if self.model_family.is_dual_slope() && self.model_family != ModelFamily::DualSlopeNlos {
            positive("exponent_nlos_secondary", self.exponent_nlos_secondary)?;
        }
        if self.model_family == ModelFamily::FreqDependentExponent {
            positive("reference_frequency_mhz", self.reference_frequency_mhz)?;
            if !self.exponent_freq_slope.is_finite() {
                return Err(Error::config("exponent_freq_slope must be finite"));
            }
        }
        Ok(())
    }
}

/// Continuous dual-slope distance term in dB.
fn dual_slope_term(near: f64, far: f64, breakpoint: f64, d: f64) -> f64 {
    if d <= breakpoint {
        10.0 * near * d.log10()
    } else {
        10.0 * near * breakpoint.log10() + 10.0 * far * (d / breakpoint).log10()
    }
}

/// Path loss `P_t − P_r` in dB for one link.
///
/// `shadowing_draw` is the already-scaled Gaussian shadowing value in dB.
/// Distances below [`MIN_DISTANCE_M`] are floored; negative or non-finite
/// distances are rejected.
pub fn path_loss_db(params: &PathLossParams, distance_m: f64, is_los: bool, shadowing_draw: f64) -> Result<f64> {
    if !distance_m.is_finite() || distance_m < 0.0 {
        return Err(Error::invalid(format!("link distance must be finite and non-negative, got {distance_m}")));
    }
    let d = distance_m.max(MIN_DISTANCE_M);
    let los = params.model_family.fixed_link_state().unwrap_or(is_los);
    let distance_term = match params.model_family {
        ModelFamily::LogDistance => 10.0 * params.exponent_primary * d.log10(),
        ModelFamily::SingleSlopeLosNlos => {
            let n = if los { params.exponent_primary } else { params.exponent_nlos };
            10.0 * n * d.log10()
        }
        ModelFamily::DualSlopeNlos => {
            dual_slope_term(params.exponent_primary, params.exponent_secondary, params.breakpoint_m, d)
        }
        ModelFamily::DualSlopeLosNlos => {
            if los {
                dual_slope_term(params.exponent_primary, params.exponent_secondary, params.breakpoint_m, d)
            } else {
                dual_slope_term(params.exponent_nlos, params.exponent_nlos_secondary, params.breakpoint_m, d)
            }
        }
        ModelFamily::FreqDependentExponent => {
            let base = if los { params.exponent_primary } else { params.exponent_nlos };
            let n = base + params.exponent_freq_slope * (params.frequency_mhz / params.reference_frequency_mhz).log10();
            10.0 * n * d.log10()
        }
    };
    Ok(distance_term + params.intercept_db() + shadowing_draw)
}

/// Distance-dependent probability that a link is line-of-sight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LosProbability {
    Constant { p: f64 },
    /// 3GPP indoor-hotspot mixed office curve.
    InhMixedOffice,
    /// 3GPP indoor-hotspot open office curve.
    InhOpenOffice,
    /// Piecewise-linear `(distance_m, probability)` table, held flat past the ends.
    Table { points: Vec<(f64, f64)> },
}

impl Default for LosProbability {
    fn default() -> Self {
        LosProbability::InhMixedOffice
    }
}

impl LosProbability {
    pub fn probability(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(0.0);
        let p = match self {
            LosProbability::Constant { p } => *p,
            LosProbability::InhMixedOffice => {
                if d <= 1.2 {
                    1.0
                } else if d < 6.5 {
                    (-(d - 1.2) / 4.7).exp()
                } else {
                    (-(d - 6.5) / 32.6).exp() * 0.32
                }
            }
            LosProbability::InhOpenOffice => {
                if d <= 5.0 {
                    1.0
                } else if d <= 49.0 {
                    (-(d - 5.0) / 70.8).exp()
                } else {
                    (-(d - 49.0) / 211.7).exp() * 0.54
                }
            }
            LosProbability::Table { points } => interpolate_table(points, d),
        };
        if p.is_nan() {
            0.0
        } else {
            p.clamp(0.0, 1.0)
        }
    }
}

fn interpolate_table(points: &[(f64, f64)], d: f64) -> f64 {
    match points {
        [] => 1.0,
        [(_, p)] => *p,
        _ => {
            if d <= points[0].0 {
                return points[0].1;
            }
            for w in points.windows(2) {
                let ((d0, p0), (d1, p1)) = (w[0], w[1]);
                if d <= d1 {
                    if d1 <= d0 {
                        return p1;
                    }
                    return p0 + (p1 - p0) * (d - d0) / (d1 - d0);
                }
            }
            points[points.len() - 1].1
        }
    }
}

/// A rectangular propagation world anchored at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub env_id: String,
    pub area_width_m: f64,
    pub area_height_m: f64,
    pub ap_positions: Vec<Point2>,
    pub params: PathLossParams,
    #[serde(default)]
    pub los_probability: LosProbability,
    pub rng_seed: u64,
    /// Per-AP transmit-power drift added to every measurement; empty means
    /// none. Models a site whose APs changed since it was surveyed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ap_power_offsets_db: Vec<f64>,
}

impl Environment {
    pub fn new(
        env_id: impl Into<String>,
        area_width_m: f64,
        area_height_m: f64,
        ap_positions: Vec<Point2>,
        params: PathLossParams,
        los_probability: LosProbability,
        rng_seed: u64,
    ) -> Result<Self> {
        let env = Self {
            env_id: env_id.into(),
            area_width_m,
            area_height_m,
            ap_positions,
            params,
            los_probability,
            rng_seed,
            ap_power_offsets_db: Vec::new(),
        };
        env.validate()?;
        Ok(env)
    }

    /// Deploys `ap_count` APs uniformly at random over the area using `rng_seed`.
    pub fn with_random_aps(
        env_id: impl Into<String>,
        area_width_m: f64,
        area_height_m: f64,
        ap_count: usize,
        params: PathLossParams,
        los_probability: LosProbability,
        rng_seed: u64,
    ) -> Result<Self> {
        if !(area_width_m > 0.0 && area_height_m > 0.0) {
            return Err(Error::config("area dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let aps = (0..ap_count)
            .map(|_| {
                Point2::new(
                    rng.random_range(0.0..area_width_m),
                    rng.random_range(0.0..area_height_m),
                )
            })
            .collect();
        Self::new(env_id, area_width_m, area_height_m, aps, params, los_probability, rng_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.area_width_m.is_finite() && self.area_width_m > 0.0)
            || !(self.area_height_m.is_finite() && self.area_height_m > 0.0)
        {
            return Err(Error::config("area dimensions must be positive"));
        }
        if self.ap_positions.is_empty() {
            return Err(Error::config(format!("environment {} has no access points", self.env_id)));
        }
        if let Some(ap) = self.ap_positions.iter().find(|p| !self.contains(p)) {
            return Err(Error::config(format!(
                "access point ({}, {}) lies outside the {}x{} m area",
                ap.x, ap.y, self.area_width_m, self.area_height_m
            )));
        }
        if !self.ap_power_offsets_db.is_empty() {
            if self.ap_power_offsets_db.len() != self.ap_positions.len() {
                return Err(Error::config(format!(
                    "{} power offsets given for {} access points",
                    self.ap_power_offsets_db.len(),
                    self.ap_positions.len()
                )));
            }
            if self.ap_power_offsets_db.iter().any(|o| !o.is_finite()) {
                return Err(Error::config("power offsets must be finite"));
            }
        }
        self.params.validate()
    }

    /// The same site with per-AP power drift.
    pub fn with_power_offsets(mut self, offsets_db: Vec<f64>) -> Result<Self> {
        self.ap_power_offsets_db = offsets_db;
        self.validate()?;
        Ok(self)
    }

    pub fn ap_count(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn contains(&self, p: &Point2) -> bool {
        (0.0..=self.area_width_m).contains(&p.x) && (0.0..=self.area_height_m).contains(&p.y)
    }

    /// Fresh random stream seeded from `rng_seed`.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }

    /// Uniform random position inside the area.
    pub fn random_position<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2 {
        Point2::new(
            rng.random_range(0.0..=self.area_width_m),
            rng.random_range(0.0..=self.area_height_m),
        )
    }
}

/// One noisy measurement of every AP at a position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssSample {
    pub position: Point2,
    pub rss_dbm: Vec<f64>,
    pub los_flags: Vec<bool>,
}

/// Bernoulli LOS draw at the environment's distance-dependent probability.
pub fn sample_los<R: Rng + ?Sized>(env: &Environment, distance_m: f64, rng: &mut R) -> bool {
    let p = env.los_probability.probability(distance_m);
    rng.random::<f64>() < p
}

/// Measures every AP at `position`.
///
/// Per AP the stream is consumed as: one uniform for the LOS flag (only for
/// families that draw link state), then one standard normal for shadowing.
pub fn measure_rss<R: Rng + ?Sized>(env: &Environment, position: Point2, rng: &mut R) -> Result<RssSample> {
    if !env.contains(&position) {
        return Err(Error::invalid(format!(
            "position ({}, {}) is outside the {}x{} m area of {}",
            position.x, position.y, env.area_width_m, env.area_height_m, env.env_id
        )));
    }
    let params = &env.params;
    let mut rss_dbm = Vec::with_capacity(env.ap_count());
    let mut los_flags = Vec::with_capacity(env.ap_count());
    for (i, ap) in env.ap_positions.iter().enumerate() {
        let d = ap.distance(&position);
        let offset = env.ap_power_offsets_db.get(i).copied().unwrap_or(0.0);
        let is_los = match params.model_family.fixed_link_state() {
            Some(state) => state,
            None => sample_los(env, d, rng),
        };
        let z: f64 = StandardNormal.sample(rng);
        let shadow = params.sigma_db(is_los) * z;
        rss_dbm.push(params.transmit_power_dbm + offset - path_loss_db(params, d, is_los, shadow)?);
        los_flags.push(is_los);
    }
    Ok(RssSample {
        position,
        rss_dbm,
        los_flags,
    })
}

/// Environment description as stored in preset files.
///
/// Either `ap_positions` or `ap_count` must be given; with `ap_count` the APs
/// are deployed uniformly at random from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentPreset {
    pub env_id: String,
    pub area_width_m: f64,
    pub area_height_m: f64,
    #[serde(default)]
    pub ap_count: Option<usize>,
    #[serde(default)]
    pub ap_positions: Option<Vec<Point2>>,
    pub seed: u64,
    #[serde(default)]
    pub los_probability: LosProbability,
    pub params: PathLossParams,
}

impl EnvironmentPreset {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid environment preset: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize preset: {e}")))
    }

    pub fn build(&self) -> Result<Environment> {
        match (&self.ap_positions, self.ap_count) {
            (Some(aps), _) => Environment::new(
                self.env_id.clone(),
                self.area_width_m,
                self.area_height_m,
                aps.clone(),
                self.params.clone(),
                self.los_probability.clone(),
                self.seed,
            ),
            (None, Some(count)) => Environment::with_random_aps(
                self.env_id.clone(),
                self.area_width_m,
                self.area_height_m,
                count,
                self.params.clone(),
                self.los_probability.clone(),
                self.seed,
            ),
            (None, None) => Err(Error::config(format!(
                "preset {} needs either ap_count or ap_positions",
                self.env_id
            ))),
        }
    }
}
