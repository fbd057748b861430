//! KNN/WKNN baselines, localization-error reports and diagnostics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintDatabase;
use crate::geom::Point2;
use crate::metalearn::{write_trace_csv, MetaConfig, NetTask, TaskObjective};
use crate::neuralnet::{forward, NetSpec, ParamVector, Targets};
use crate::tasking::{LocalizationTask, TargetScaling};

/// Added to signal distances before inversion in WKNN.
pub const WKNN_EPSILON: f64 = 1e-6;

/// Unweighted mean position of the `k` signal-space-nearest reference points.
pub fn knn_localize(db: &FingerprintDatabase, observation: &[f64], k: usize) -> Result<Point2> {
    let neighbors = db.nearest(observation, k)?;
    Ok(mean_position(neighbors.iter().map(|(_, rp)| rp.position)))
}

fn mean_position(points: impl ExactSizeIterator<Item = Point2>) -> Point2 {
    let n = points.len() as f64;
    let (sx, sy) = points.fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point2::new(sx / n, sy / n)
}

/// Inverse-distance weighted mean of the `k` nearest reference points.
pub fn wknn_localize(db: &FingerprintDatabase, observation: &[f64], k: usize) -> Result<Point2> {
    let neighbors = db.nearest(observation, k)?;
    let weights: Vec<f64> = neighbors.iter().map(|(d, _)| 1.0 / (d + WKNN_EPSILON)).collect();
    if weights.iter().all(|w| w.to_bits() == weights[0].to_bits()) {
        return Ok(mean_position(neighbors.iter().map(|(_, rp)| rp.position)));
    }
    let total: f64 = weights.iter().sum();
    let (sx, sy) = neighbors
        .iter()
        .zip(&weights)
        .fold((0.0, 0.0), |(sx, sy), ((_, rp), w)| (sx + w * rp.position.x, sy + w * rp.position.y));
    Ok(Point2::new(sx / total, sy / total))
}

/// Thresholds `start, start + step, …, stop` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 10.0,
            step: 0.1,
        }
    }
}

impl ThresholdGrid {
    pub fn thresholds(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.stop >= self.start) || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::config("threshold grid needs step > 0 and stop >= start"));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.start + i as f64 * self.step).map(|t| (t * 1e9).round() / 1e9).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_tag: String,
    pub n_points: usize,
    pub mean_error_m: f64,
    /// Population standard deviation.
    pub std_error_m: f64,
    /// `(threshold m, P(error ≤ threshold))`; a final `(max error, 1.0)`
    /// point is appended when the grid stops short of every error.
    pub cdf: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl EvalReport {
    /// Summary statistics of per-point errors.
    pub fn from_errors(method_tag: &str, errors: &[f64], grid: &ThresholdGrid) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("evaluation needs at least one test point"));
        }
        if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::invalid("errors must be finite and non-negative"));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut cdf: Vec<(f64, f64)> = grid
            .thresholds()?
            .into_iter()
            .map(|t| (t, sorted.partition_point(|&e| e <= t) as f64 / n))
            .collect();
        if cdf.last().is_none_or(|&(_, p)| p < 1.0) {
            cdf.push((sorted[sorted.len() - 1], 1.0));
        }
        Ok(Self {
            method_tag: method_tag.to_string(),
            n_points: errors.len(),
            mean_error_m: mean,
            std_error_m: var.sqrt(),
            cdf,
            convergence: None,
            config: None,
            seeds: Vec::new(),
        })
    }

    /// Empirical `P(error ≤ threshold)` read off the CDF grid.
    pub fn cdf_at(&self, threshold: f64) -> f64 {
        self.cdf
            .iter()
            .take_while(|&&(t, _)| t <= threshold + 1e-12)
            .last()
            .map_or(0.0, |&(_, p)| p)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn write_cdf_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["threshold", "probability"])?;
        for (t, p) in &self.cdf {
            w.write_record([t.to_string(), p.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_convergence_csv(&self, path: &Path) -> Result<()> {
        let trace = self.convergence.as_deref().unwrap_or(&[]);
        write_trace_csv(trace, ("step", "error"), path)
    }
}

/// A frozen position estimator.
#[derive(Debug, Clone, Copy)]
pub enum Localizer<'a> {
    Knn { db: &'a FingerprintDatabase, k: usize },
    Wknn { db: &'a FingerprintDatabase, k: usize },
    Network {
        spec: &'a NetSpec,
        params: &'a ParamVector,
        scaling: TargetScaling,
    },
}

impl Localizer<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            Localizer::Knn { .. } => "knn",
            Localizer::Wknn { .. } => "wknn",
            Localizer::Network { .. } => "network",
        }
    }

    /// For fingerprint baselines the input is a raw RSS vector; for
    /// networks it is a feature vector.
    pub fn locate(&self, input: &[f64]) -> Result<Point2> {
        match *self {
            Localizer::Knn { db, k } => knn_localize(db, input, k),
            Localizer::Wknn { db, k } => wknn_localize(db, input, k),
            Localizer::Network { spec, params, scaling } => {
                let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
                    .map_err(|e| Error::invalid(e.to_string()))?;
                let out = forward(spec, params, x.view())?;
                if out.ncols() != 2 {
                    return Err(Error::invalid("localization needs a 2-output network"));
                }
                Ok(scaling.to_meters([out[[0, 0]], out[[0, 1]]]))
            }
        }
    }
}

/// A test point: ground-truth position and the localizer's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPoint {
    pub position: Point2,
    pub input: Vec<f64>,
}

/// Per-point Euclidean errors of a frozen localizer.
pub fn evaluate_method(localizer: &Localizer<'_>, test_points: &[TestPoint], grid: &ThresholdGrid) -> Result<EvalReport> {
    let errors = test_points
        .par_iter()
        .map(|tp| Ok(localizer.locate(&tp.input)?.distance(&tp.position)))
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_errors(localizer.tag(), &errors, grid)
}

/// Fine-tunes `init` on each task's support set and pools the query errors.
///
/// The convergence trace is the mean over tasks of the per-step query error.
pub fn evaluate_finetuned(
    method_tag: &str,
    spec: &NetSpec,
    init: &ParamVector,
    tasks: &[LocalizationTask],
    cfg: &MetaConfig,
    grid: &ThresholdGrid,
) -> Result<EvalReport> {
    let inits = vec![init; tasks.len()];
    evaluate_finetuned_each(method_tag, spec, &inits, tasks, cfg, grid)
}

/// As [`evaluate_finetuned`], with a separate initialization per task.
pub fn evaluate_finetuned_each(
    method_tag: &str,
    spec: &NetSpec,
    inits: &[&ParamVector],
    tasks: &[LocalizationTask],
    cfg: &MetaConfig,
    grid: &ThresholdGrid,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::invalid("evaluation needs at least one test task"));
    }
    if inits.len() != tasks.len() {
        return Err(Error::invalid("one initialization per test task is required"));
    }
    let per_task = tasks
        .par_iter()
        .zip(inits.par_iter())
        .map(|(t, init)| {
            let task = NetTask::new(spec, cfg.loss, t, &cfg.target_scaling)?;
            let r = crate::metalearn::finetune(&task, init, cfg.alpha, cfg.finetune_steps)?;
            let errors = point_errors(spec, &r.adapted, &task)?;
            Ok((errors, r.error_trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = per_task.iter().flat_map(|(e, _)| e.iter().copied()).collect();
    let mut report = EvalReport::from_errors(method_tag, &errors, grid)?;
    let steps = cfg.finetune_steps + 1;
    let convergence = (0..steps)
        .map(|s| (s, per_task.iter().map(|(_, tr)| tr[s].1).sum::<f64>() / per_task.len() as f64))
        .collect();
    report.convergence = Some(convergence);
    Ok(report)
}

fn point_errors(spec: &NetSpec, params: &ParamVector, task: &NetTask) -> Result<Vec<f64>> {
    let q = task.query();
    let Targets::Positions(t) = &q.targets else {
        return Err(Error::invalid("point errors need coordinate targets"));
    };
    let out = forward(spec, params, q.inputs.view())?;
    Ok(out
        .rows()
        .into_iter()
        .zip(t.rows())
        .map(|(o, t)| ((o[0] - t[0]).powi(2) + (o[1] - t[1]).powi(2)).sqrt() * task.error_scale())
        .collect())
}

/// Mean query error after `steps` support-only steps, for each step count
/// in `0..=steps`.
pub fn finetune_trace<T: TaskObjective + ?Sized>(task: &T, init: &ParamVector, alpha: f64, steps: usize) -> Result<Vec<f64>> {
    Ok(crate::metalearn::finetune(task, init, alpha, steps)?
        .error_trace
        .into_iter()
        .map(|(_, e)| e)
        .collect())
}

/// Mean squared L2 distance between `meta` and each fine-tuned optimum.
pub fn param_distance_diagnostic(meta: &ParamVector, per_task_optima: &[ParamVector]) -> Result<f64> {
    if per_task_optima.is_empty() {
        return Err(Error::invalid("no per-task optima given"));
    }
    if let Some(p) = per_task_optima.iter().find(|p| p.len() != meta.len()) {
        return Err(Error::invalid(format!(
            "parameter layout mismatch: {} vs {}",
            p.len(),
            meta.len()
        )));
    }
    Ok(per_task_optima.iter().map(|p| meta.squared_distance(p)).sum::<f64>() / per_task_optima.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::ReferencePoint;

    fn rp(id: u32, x: f64, y: f64, rss: Vec<f64>) -> ReferencePoint {
        ReferencePoint {
            rp_id: id,
            position: Point2::new(x, y),
            rss_mean: rss,
            raw_samples: None,
        }
    }

    fn line_db() -> FingerprintDatabase {
        FingerprintDatabase::new(
            "line",
            vec![
                rp(0, 0.0, 0.0, vec![-40.0]),
                rp(1, 2.0, 0.0, vec![-44.0]),
                rp(2, 9.0, 9.0, vec![-90.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn knn_midpoint_and_exact_match() {
        let db = line_db();
        assert_eq!(knn_localize(&db, &[-42.0], 2).unwrap(), Point2::new(1.0, 0.0));
        assert_eq!(knn_localize(&db, &[-44.0], 1).unwrap(), Point2::new(2.0, 0.0));
        assert!(knn_localize(&db, &[-44.0], 4).is_err());
        assert!(knn_localize(&db, &[-44.0], 0).is_err());
    }

    #[test]
    fn wknn_inverse_distance_weights() {
        let db = line_db();
        let p = wknn_localize(&db, &[-41.0], 2).unwrap();
        assert!((p.x - 0.5).abs() < 1e-6 && p.y == 0.0);
        let equal = wknn_localize(&db, &[-42.0], 2).unwrap();
        assert_eq!(equal, knn_localize(&db, &[-42.0], 2).unwrap());
        let exact = wknn_localize(&db, &[-40.0], 2).unwrap();
        assert!(exact.distance(&Point2::new(0.0, 0.0)) < 1e-3);
    }

    #[test]
    fn two_point_report() {
        let r = EvalReport::from_errors("t", &[3.0, 4.0], &ThresholdGrid::default()).unwrap();
        assert_eq!(r.mean_error_m, 3.5);
        assert_eq!(r.std_error_m, 0.5);
        assert_eq!(r.cdf_at(3.5), 0.5);
        assert_eq!(r.cdf_at(4.0), 1.0);
        assert_eq!(r.cdf_at(2.9), 0.0);
        assert_eq!(r.cdf.len(), 101);
        assert!(r.cdf.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn perfect_localizer_report() {
        let r = EvalReport::from_errors("t", &[0.0; 5], &ThresholdGrid::default()).unwrap();
        assert_eq!((r.mean_error_m, r.std_error_m), (0.0, 0.0));
        assert_eq!(r.cdf[0], (0.0, 1.0));
    }

    #[test]
    fn cdf_ends_at_one_beyond_grid() {
        let r = EvalReport::from_errors("t", &[1.0, 25.0], &ThresholdGrid::default()).unwrap();
        assert_eq!(r.cdf.last(), Some(&(25.0, 1.0)));
        assert!(EvalReport::from_errors("t", &[], &ThresholdGrid::default()).is_err());
    }

    #[test]
    fn grid_thresholds_are_clean_decimals() {
        let t = ThresholdGrid::default().thresholds().unwrap();
        assert_eq!(t.len(), 101);
        assert_eq!(t[3], 0.3);
        assert_eq!(t[100], 10.0);
    }

    #[test]
    fn param_distance_examples() {
        let meta = ParamVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(param_distance_diagnostic(&meta, &[meta.clone(), meta.clone()]).unwrap(), 0.0);
        let off = ParamVector::from_vec(vec![2.0, 2.0]);
        assert_eq!(param_distance_diagnostic(&meta, &[off]).unwrap(), 1.0);
        assert!(param_distance_diagnostic(&meta, &[ParamVector::zeros(3)]).is_err());
        assert!(param_distance_diagnostic(&meta, &[]).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let mut r = EvalReport::from_errors("knn", &[0.3, 1.7, 2.2], &ThresholdGrid::default()).unwrap();
        r.seeds = vec![1, 2];
        r.convergence = Some(vec![(0, 3.0), (1, 2.0)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        r.save_json(&path).unwrap();
        assert_eq!(EvalReport::load_json(&path).unwrap(), r);
        r.write_cdf_csv(&dir.path().join("cdf.csv")).unwrap();
        r.write_convergence_csv(&dir.path().join("conv.csv")).unwrap();
    }
}
