//! Fingerprint databases and the learning features derived from them.
//!
//! RSS observations become fixed-length vectors built from their `K`
//! signal-space nearest reference points. CSI amplitude images are compared
//! through per-channel color histograms and the histogram-intersection
//! distance.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{euclidean, Point2};
use crate::propagation::{measure_rss, Environment, RssSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub rp_id: u32,
    pub position: Point2,
    /// Per-AP mean RSS in dBm.
    pub rss_mean: Vec<f64>,
    #[serde(default)]
    pub raw_samples: Option<Vec<RssSample>>,
}

/// Reference points of one environment snapshot. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintDatabase {
    pub env_id: String,
    rps: Vec<ReferencePoint>,
}

impl FingerprintDatabase {
    pub fn new(env_id: impl Into<String>, rps: Vec<ReferencePoint>) -> Result<Self> {
        if rps.is_empty() {
            return Err(Error::invalid("fingerprint database needs at least one reference point"));
        }
        let width = rps[0].rss_mean.len();
        if width == 0 {
            return Err(Error::invalid("reference points must carry at least one AP reading"));
        }
        let mut seen = HashSet::with_capacity(rps.len());
        for rp in &rps {
            if !seen.insert(rp.rp_id) {
                return Err(Error::invalid(format!("duplicate rp_id {}", rp.rp_id)));
            }
            if rp.rss_mean.len() != width {
                return Err(Error::invalid(format!(
                    "rp {} has {} AP readings, expected {width}",
                    rp.rp_id,
                    rp.rss_mean.len()
                )));
            }
        }
        Ok(Self {
            env_id: env_id.into(),
            rps,
        })
    }

    pub fn rps(&self) -> &[ReferencePoint] {
        &self.rps
    }

    pub fn len(&self) -> usize {
        self.rps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rps.is_empty()
    }

    pub fn ap_count(&self) -> usize {
        self.rps[0].rss_mean.len()
    }

    /// `K` nearest reference points in signal space, ascending by distance
    /// and then by `rp_id`.
    pub fn nearest(&self, observation: &[f64], k: usize) -> Result<Vec<(f64, &ReferencePoint)>> {
        if observation.len() != self.ap_count() {
            return Err(Error::invalid(format!(
                "observation has {} readings, database {} has {} APs",
                observation.len(),
                self.env_id,
                self.ap_count()
            )));
        }
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "K = {k} must lie in 1..={} for database {}",
                self.len(),
                self.env_id
            )));
        }
        let mut scored: Vec<(f64, &ReferencePoint)> =
            self.rps.iter().map(|rp| (euclidean(observation, &rp.rss_mean), rp)).collect();
        let cmp = |a: &(f64, &ReferencePoint), b: &(f64, &ReferencePoint)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.rp_id.cmp(&b.1.rp_id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored)
    }

    /// Writes `env_id, rp_id, x_m, y_m, ap_0_dbm, ...` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["env_id".to_string(), "rp_id".into(), "x_m".into(), "y_m".into()];
        header.extend((0..self.ap_count()).map(|i| format!("ap_{i}_dbm")));
        w.write_record(&header)?;
        for rp in &self.rps {
            let mut row = vec![
                self.env_id.clone(),
                rp.rp_id.to_string(),
                rp.position.x.to_string(),
                rp.position.y.to_string(),
            ];
            row.extend(rp.rss_mean.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let expected = ["env_id", "rp_id", "x_m", "y_m"];
        if header.len() < 5 || header.iter().take(4).ne(expected) {
            return Err(Error::invalid(format!("unexpected database header: {header:?}")));
        }
        for (i, name) in header.iter().skip(4).enumerate() {
            if name != format!("ap_{i}_dbm") {
                return Err(Error::invalid(format!("unexpected column {name}, expected ap_{i}_dbm")));
            }
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad number {s:?}: {e}")))
        };
        let mut env_id: Option<String> = None;
        let mut rps = Vec::new();
        for record in r.records() {
            let record = record?;
            match &env_id {
                None => env_id = Some(record[0].to_string()),
                Some(id) if id != &record[0] => {
                    return Err(Error::invalid(format!(
                        "database file mixes environments {id} and {}",
                        &record[0]
                    )))
                }
                _ => {}
            }
            let rp_id = record[1]
                .trim()
                .parse::<u32>()
                .map_err(|e| Error::invalid(format!("bad rp_id {:?}: {e}", &record[1])))?;
            let rss_mean = record.iter().skip(4).map(parse).collect::<Result<Vec<_>>>()?;
            rps.push(ReferencePoint {
                rp_id,
                position: Point2::new(parse(&record[2])?, parse(&record[3])?),
                rss_mean,
                raw_samples: None,
            });
        }
        Self::new(env_id.unwrap_or_default(), rps)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(BufReader::new(file))
    }
}

/// Where reference points are placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RpLayout {
    /// `cols × rows` points at `spacing_m`, starting at `origin`.
    Grid {
        origin: Point2,
        spacing_m: f64,
        cols: usize,
        rows: usize,
    },
    Explicit {
        points: Vec<Point2>,
    },
    /// Uniformly random points drawn from the build stream.
    Random {
        count: usize,
    },
}

impl RpLayout {
    pub fn positions<R: Rng + ?Sized>(&self, env: &Environment, rng: &mut R) -> Vec<Point2> {
        match self {
            RpLayout::Grid {
                origin,
                spacing_m,
                cols,
                rows,
            } => (0..*rows)
                .flat_map(|r| {
                    (0..*cols).map(move |c| Point2::new(origin.x + c as f64 * spacing_m, origin.y + r as f64 * spacing_m))
                })
                .collect(),
            RpLayout::Explicit { points } => points.clone(),
            RpLayout::Random { count } => (0..*count).map(|_| env.random_position(rng)).collect(),
        }
    }
}

/// Surveys every layout position `samples_per_rp` times and stores the
/// per-AP mean as the reference fingerprint.
pub fn build_database<R: Rng + ?Sized>(
    env: &Environment,
    layout: &RpLayout,
    samples_per_rp: usize,
    keep_raw: bool,
    rng: &mut R,
) -> Result<FingerprintDatabase> {
    if samples_per_rp == 0 {
        return Err(Error::invalid("samples_per_rp must be at least 1"));
    }
    let positions = layout.positions(env, rng);
    if positions.is_empty() {
        return Err(Error::invalid("reference point layout is empty"));
    }
    let mut rps = Vec::with_capacity(positions.len());
    for (i, &position) in positions.iter().enumerate() {
        let samples = (0..samples_per_rp)
            .map(|_| measure_rss(env, position, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut rss_mean = vec![0.0; env.ap_count()];
        for s in &samples {
            for (acc, v) in rss_mean.iter_mut().zip(&s.rss_dbm) {
                *acc += v;
            }
        }
        rss_mean.iter_mut().for_each(|v| *v /= samples_per_rp as f64);
        rps.push(ReferencePoint {
            rp_id: i as u32,
            position,
            rss_mean,
            raw_samples: keep_raw.then_some(samples),
        });
    }
    FingerprintDatabase::new(env.env_id.clone(), rps)
}

/// Signal-space neighborhood of one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssFingerprint {
    pub neighbor_distances: Vec<f64>,
    pub neighbor_positions: Vec<Point2>,
    pub neighbor_ids: Vec<u32>,
}

impl RssFingerprint {
    pub fn k(&self) -> usize {
        self.neighbor_distances.len()
    }
}

pub fn rss_fingerprint(db: &FingerprintDatabase, observation: &[f64], k: usize) -> Result<RssFingerprint> {
    let nearest = db.nearest(observation, k)?;
    Ok(RssFingerprint {
        neighbor_distances: nearest.iter().map(|(d, _)| *d).collect(),
        neighbor_positions: nearest.iter().map(|(_, rp)| rp.position).collect(),
        neighbor_ids: nearest.iter().map(|(_, rp)| rp.rp_id).collect(),
    })
}

/// Affine feature scaling `(x − offset) / scale`, frozen after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureNormalizer {
    Identity,
    Affine { offset: Vec<f64>, scale: Vec<f64> },
}

impl FeatureNormalizer {
    /// Per-column z-scoring fitted on `features`. Constant columns keep scale 1.
    pub fn fit<'a, I>(features: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for f in features {
            if count == 0 {
                sum = vec![0.0; f.len()];
                sum_sq = vec![0.0; f.len()];
            } else if f.len() != sum.len() {
                return Err(Error::invalid("feature vectors of different lengths"));
            }
            for (i, v) in f.iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit a normalizer on zero samples"));
        }
        let n = count as f64;
        let offset: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sum_sq
            .iter()
            .zip(&offset)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-9 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureNormalizer::Affine { offset, scale })
    }

    pub fn apply(&self, features: &mut [f64]) -> Result<()> {
        match self {
            FeatureNormalizer::Identity => Ok(()),
            FeatureNormalizer::Affine { offset, scale } => {
                if offset.len() != features.len() {
                    return Err(Error::invalid(format!(
                        "normalizer fitted for {} features, got {}",
                        offset.len(),
                        features.len()
                    )));
                }
                for ((v, o), s) in features.iter_mut().zip(offset).zip(scale) {
                    *v = (*v - o) / s;
                }
                Ok(())
            }
        }
    }
}

/// `[dist_1, x_1, y_1, …, dist_K, x_K, y_K]` followed by normalization.
pub fn to_feature_vector(fp: &RssFingerprint, normalizer: &FeatureNormalizer) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(3 * fp.k());
    for (d, p) in fp.neighbor_distances.iter().zip(&fp.neighbor_positions) {
        v.extend_from_slice(&[*d, p.x, p.y]);
    }
    normalizer.apply(&mut v)?;
    Ok(v)
}

pub const CSI_SUBCARRIERS: usize = 52;
pub const CSI_PACKETS: usize = 50;
pub const CSI_CHANNELS: usize = 3;
pub const CSI_LEN: usize = CSI_SUBCARRIERS * CSI_PACKETS * CSI_CHANNELS;

/// Amplitude image, `[subcarrier][packet][channel]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiImage {
    amplitudes: Vec<f64>,
}

impl CsiImage {
    pub fn new(amplitudes: Vec<f64>) -> Result<Self> {
        if amplitudes.len() != CSI_LEN {
            return Err(Error::invalid(format!(
                "CSI image needs {CSI_LEN} amplitudes, got {}",
                amplitudes.len()
            )));
        }
        if let Some(v) = amplitudes.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("CSI amplitudes must be finite and non-negative, got {v}")));
        }
        Ok(Self { amplitudes })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(vec![value; CSI_LEN])
    }

    fn index(subcarrier: usize, packet: usize, channel: usize) -> usize {
        (subcarrier * CSI_PACKETS + packet) * CSI_CHANNELS + channel
    }

    pub fn get(&self, subcarrier: usize, packet: usize, channel: usize) -> f64 {
        self.amplitudes[Self::index(subcarrier, packet, channel)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn channel(&self, channel: usize) -> impl Iterator<Item = f64> + '_ {
        self.amplitudes.iter().skip(channel).step_by(CSI_CHANNELS).copied()
    }
}

/// Per-channel amplitude range of a training corpus; fixes the histogram bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusRange {
    pub min: [f64; CSI_CHANNELS],
    pub max: [f64; CSI_CHANNELS],
}

impl CorpusRange {
    pub fn from_images(images: &[CsiImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("corpus range needs at least one image"));
        }
        let mut min = [f64::INFINITY; CSI_CHANNELS];
        let mut max = [f64::NEG_INFINITY; CSI_CHANNELS];
        for img in images {
            for c in 0..CSI_CHANNELS {
                for v in img.channel(c) {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        Ok(Self { min, max })
    }
}

/// Concatenated per-channel histograms.
///
/// When `normalized`, every channel block sums to one, so the total mass
/// equals `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<f64>,
    pub normalized: bool,
    pub channels: usize,
}

impl Histogram {
    /// Single-channel histogram from explicit bin values.
    pub fn new(bins: Vec<f64>, normalized: bool) -> Result<Self> {
        if bins.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid("histogram bins must be finite and non-negative"));
        }
        if normalized && (bins.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("normalized histogram must sum to 1"));
        }
        Ok(Self {
            bins,
            normalized,
            channels: 1,
        })
    }

    pub fn mass(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn channel_bins(&self, channel: usize) -> &[f64] {
        let per = self.bins.len() / self.channels;
        &self.bins[channel * per..(channel + 1) * per]
    }
}

/// Histogram of each channel over the corpus range, `bins` colors per channel.
///
/// A channel whose corpus range is degenerate (`max <= min`) puts all of its
/// mass in the first bin. Values outside the corpus range land in the edge
/// bins.
pub fn csi_histogram(img: &CsiImage, range: &CorpusRange, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let per_channel = (CSI_SUBCARRIERS * CSI_PACKETS) as f64;
    let mut out = vec![0.0; bins * CSI_CHANNELS];
    for c in 0..CSI_CHANNELS {
        let (lo, hi) = (range.min[c], range.max[c]);
        let block = &mut out[c * bins..(c + 1) * bins];
        if !(hi > lo) {
            block[0] = 1.0;
            continue;
        }
        let width = hi - lo;
        for v in img.channel(c) {
            let pos = ((v - lo) / width * bins as f64).floor();
            let idx = if pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
            block[idx] += 1.0;
        }
        block.iter_mut().for_each(|b| *b /= per_channel);
    }
    Ok(Histogram {
        bins: out,
        normalized: true,
        channels: CSI_CHANNELS,
    })
}

/// `1 − Σ min(a_j, b_j) / min(|a|, |b|)`, clamped to `[0, 1]`.
pub fn histogram_intersection_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.bins.len() != b.bins.len() || a.channels != b.channels {
        return Err(Error::invalid(format!(
            "histograms have {} and {} bins",
            a.bins.len(),
            b.bins.len()
        )));
    }
    if a.normalized != b.normalized {
        return Err(Error::invalid("cannot compare a normalized with an unnormalized histogram"));
    }
    let intersection: f64 = a.bins.iter().zip(&b.bins).map(|(x, y)| x.min(*y)).sum();
    let denom = a.mass().min(b.mass());
    if denom <= 0.0 {
        return Ok(if a.mass() == b.mass() { 0.0 } else { 1.0 });
    }
    Ok((1.0 - intersection / denom).clamp(0.0, 1.0))
}

/// One propagation path of the synthetic CSI generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipathComponent {
    pub gain: f64,
    pub delay_ns: f64,
    pub phase_rad: f64,
}

/// Generates amplitude images `|Σ gain·e^{j(φ − 2π f_k τ)} + noise|` per
/// subcarrier, one path set per channel, with fresh complex noise per packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiSynthesizer {
    pub paths: [Vec<MultipathComponent>; CSI_CHANNELS],
    pub noise_std: f64,
    pub subcarrier_spacing_hz: f64,
}

impl CsiSynthesizer {
    pub fn new(paths: [Vec<MultipathComponent>; CSI_CHANNELS], noise_std: f64) -> Self {
        Self {
            paths,
            noise_std,
            subcarrier_spacing_hz: 312.5e3,
        }
    }

    /// Random path set: `n_paths` components per channel with decaying gains.
    pub fn random<R: Rng + ?Sized>(n_paths: usize, noise_std: f64, rng: &mut R) -> Self {
        let paths = std::array::from_fn(|_| {
            (0..n_paths)
                .map(|i| MultipathComponent {
                    gain: rng.random_range(0.5..1.0) / (1.0 + i as f64),
                    delay_ns: rng.random_range(0.0..200.0),
                    phase_rad: rng.random_range(0.0..std::f64::consts::TAU),
                })
                .collect()
        });
        Self::new(paths, noise_std)
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> CsiImage {
        let mut amplitudes = vec![0.0; CSI_LEN];
        let mut clean = [[(0.0f64, 0.0f64); CSI_CHANNELS]; CSI_SUBCARRIERS];
        for (s, row) in clean.iter_mut().enumerate() {
            let f = (s as f64 - (CSI_SUBCARRIERS as f64 - 1.0) / 2.0) * self.subcarrier_spacing_hz;
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = self.paths[c].iter().fold((0.0, 0.0), |(re, im), p| {
                    let angle = p.phase_rad - std::f64::consts::TAU * f * p.delay_ns * 1e-9;
                    (re + p.gain * angle.cos(), im + p.gain * angle.sin())
                });
            }
        }
        for p in 0..CSI_PACKETS {
            for (s, row) in clean.iter().enumerate() {
                for (c, (re, im)) in row.iter().enumerate() {
                    let nr: f64 = StandardNormal.sample(rng);
                    let ni: f64 = StandardNormal.sample(rng);
                    let amp = (re + self.noise_std * nr).hypot(im + self.noise_std * ni);
                    amplitudes[CsiImage::index(s, p, c)] = amp;
                }
            }
        }
        CsiImage { amplitudes }
    }
}

/// JSON sidecar stored next to a CSI image file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiSidecar {
    pub shape: [usize; 3],
    pub corpus_min: [f64; CSI_CHANNELS],
    pub corpus_max: [f64; CSI_CHANNELS],
}

impl CsiSidecar {
    pub fn new(range: &CorpusRange) -> Self {
        Self {
            shape: [CSI_SUBCARRIERS, CSI_PACKETS, CSI_CHANNELS],
            corpus_min: range.min,
            corpus_max: range.max,
        }
    }

    pub fn range(&self) -> CorpusRange {
        CorpusRange {
            min: self.corpus_min,
            max: self.corpus_max,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let sidecar: Self = serde_json::from_reader(BufReader::new(file))?;
        if sidecar.shape != [CSI_SUBCARRIERS, CSI_PACKETS, CSI_CHANNELS] {
            return Err(Error::invalid(format!("unsupported CSI shape {:?}", sidecar.shape)));
        }
        Ok(sidecar)
    }
}

/// One amplitude per line, in storage order.
pub fn write_csi_csv(img: &CsiImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in &img.amplitudes {
        writeln!(w, "{v}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csi_csv(path: &Path) -> Result<CsiImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(CSI_LEN);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        for field in line.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad amplitude {field:?}: {e}")))?,
            );
        }
    }
    CsiImage::new(values)
}

/// Little-endian `f64` values in storage order.
pub fn write_csi_binary(img: &CsiImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.amplitudes.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_csi_binary(path: &Path) -> Result<CsiImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != CSI_LEN * 8 {
        return Err(Error::invalid(format!(
            "binary CSI image must be {} bytes, got {}",
            CSI_LEN * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    CsiImage::new(values)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::propagation::{LosProbability, PathLossParams};

    fn env(sigma: f64) -> Environment {
        Environment::with_random_aps(
            "fp",
            12.0,
            5.0,
            24,
            PathLossParams::log_distance(20.0, 2.5, sigma),
            LosProbability::default(),
            11,
        )
        .unwrap()
    }

    fn rp(id: u32, x: f64, y: f64, rss: Vec<f64>) -> ReferencePoint {
        ReferencePoint {
            rp_id: id,
            position: Point2::new(x, y),
            rss_mean: rss,
            raw_samples: None,
        }
    }

    #[test]
    fn zero_noise_averaging_is_invariant_to_sample_count() {
        let e = env(0.0);
        let layout = RpLayout::Random { count: 12 };
        let a = build_database(&e, &layout, 1, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = build_database(&e, &layout, 100, false, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (x, y) in a.rps().iter().zip(b.rps()) {
            assert_eq!(x.position, y.position);
            for (u, v) in x.rss_mean.iter().zip(&y.rss_mean) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn site_survey_grid_has_ninety_points() {
        let e = env(4.0);
        let layout = RpLayout::Grid {
            origin: Point2::new(1.8, 1.0),
            spacing_m: 0.6,
            cols: 15,
            rows: 6,
        };
        let db = build_database(&e, &layout, 3, true, &mut e.rng()).unwrap();
        assert_eq!(db.len(), 90);
        assert!(db.rps().iter().all(|rp| e.contains(&rp.position)));
        assert_eq!(db.rps()[0].raw_samples.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn rp_counts_across_synthetic_range() {
        let e = env(4.0);
        for count in [10, 54] {
            let db = build_database(&e, &RpLayout::Random { count }, 1, false, &mut e.rng()).unwrap();
            assert_eq!(db.len(), count);
        }
    }

    #[test]
    fn empty_layout_and_zero_samples_rejected() {
        let e = env(4.0);
        let empty = RpLayout::Explicit { points: vec![] };
        assert!(build_database(&e, &empty, 1, false, &mut e.rng()).is_err());
        assert!(build_database(&e, &RpLayout::Random { count: 3 }, 0, false, &mut e.rng()).is_err());
        let outside = RpLayout::Explicit {
            points: vec![Point2::new(100.0, 0.0)],
        };
        assert!(build_database(&e, &outside, 1, false, &mut e.rng()).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = FingerprintDatabase::new("x", vec![rp(1, 0.0, 0.0, vec![1.0]), rp(1, 1.0, 0.0, vec![2.0])]);
        assert!(r.is_err());
        let r = FingerprintDatabase::new("x", vec![rp(1, 0.0, 0.0, vec![1.0]), rp(2, 1.0, 0.0, vec![2.0, 3.0])]);
        assert!(r.is_err());
    }

    #[test]
    fn fingerprint_orders_neighbors() {
        let db = FingerprintDatabase::new(
            "x",
            vec![rp(0, 0.0, 0.0, vec![5.0, 0.0]), rp(1, 2.0, 0.0, vec![3.0, 0.0])],
        )
        .unwrap();
        let fp = rss_fingerprint(&db, &[0.0, 0.0], 2).unwrap();
        assert_eq!(fp.neighbor_distances, vec![3.0, 5.0]);
        assert_eq!(fp.neighbor_positions, vec![Point2::new(2.0, 0.0), Point2::new(0.0, 0.0)]);

        let exact = rss_fingerprint(&db, &[5.0, 0.0], 1).unwrap();
        assert_eq!(exact.neighbor_distances[0], 0.0);
        assert_eq!(exact.neighbor_positions[0], Point2::new(0.0, 0.0));
        assert!(rss_fingerprint(&db, &[0.0, 0.0], 3).is_err());
        assert!(rss_fingerprint(&db, &[0.0], 1).is_err());
    }

    #[test]
    fn ties_break_by_rp_id() {
        let db = FingerprintDatabase::new(
            "x",
            vec![
                rp(7, 7.0, 0.0, vec![1.0]),
                rp(2, 2.0, 0.0, vec![-1.0]),
                rp(5, 5.0, 0.0, vec![1.0]),
            ],
        )
        .unwrap();
        let fp = rss_fingerprint(&db, &[0.0], 3).unwrap();
        assert_eq!(fp.neighbor_ids, vec![2, 5, 7]);
    }

    #[test]
    fn feature_vector_layout() {
        let fp = RssFingerprint {
            neighbor_distances: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            neighbor_positions: (0..5).map(|i| Point2::new(i as f64, -(i as f64))).collect(),
            neighbor_ids: (0..5).collect(),
        };
        let v = to_feature_vector(&fp, &FeatureNormalizer::Identity).unwrap();
        assert_eq!(v.len(), 15);
        assert_eq!(&v[..6], &[1.0, 0.0, 0.0, 2.0, 1.0, -1.0]);
    }

    #[test]
    fn default_scaling_keeps_training_features_bounded() {
        let e = env(6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let db = build_database(&e, &RpLayout::Random { count: 30 }, 5, false, &mut rng).unwrap();
        let raw: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let obs = measure_rss(&e, e.random_position(&mut rng), &mut rng).unwrap();
                to_feature_vector(&rss_fingerprint(&db, &obs.rss_dbm, 5).unwrap(), &FeatureNormalizer::Identity)
                    .unwrap()
            })
            .collect();
        let norm = FeatureNormalizer::fit(raw.iter().map(Vec::as_slice)).unwrap();
        for f in &raw {
            let mut g = f.clone();
            norm.apply(&mut g).unwrap();
            assert!(g.iter().all(|v| v.abs() <= 10.0));
        }
        let mut short = vec![0.0; 3];
        assert!(norm.apply(&mut short).is_err());
    }

    #[test]
    fn database_csv_round_trip() {
        let e = env(3.0);
        let db = build_database(&e, &RpLayout::Random { count: 6 }, 2, false, &mut e.rng()).unwrap();
        let mut buf = Vec::new();
        db.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("env_id,rp_id,x_m,y_m,ap_0_dbm,"));
        assert!(text.lines().next().unwrap().ends_with("ap_23_dbm"));
        let back = FingerprintDatabase::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, db);
    }

    fn image_from(f: impl FnMut(usize) -> f64) -> CsiImage {
        CsiImage::new((0..CSI_LEN).map(f).collect()).unwrap()
    }

    #[test]
    fn constant_image_single_bin() {
        let img = CsiImage::constant(2.0).unwrap();
        let range = CorpusRange {
            min: [0.0; 3],
            max: [4.0; 3],
        };
        let h = csi_histogram(&img, &range, 32).unwrap();
        for c in 0..CSI_CHANNELS {
            let block = h.channel_bins(c);
            assert_eq!(block.iter().filter(|b| **b > 0.0).count(), 1);
            assert!((block[16] - 1.0).abs() < 1e-12);
        }
        // Degenerate corpus range falls back to a single bin.
        let flat = CorpusRange::from_images(&[img.clone()]).unwrap();
        let h = csi_histogram(&img, &flat, 8).unwrap();
        assert_eq!(h.channel_bins(2)[0], 1.0);
        assert!(csi_histogram(&img, &range, 1).is_err());
    }

    #[test]
    fn histogram_is_permutation_invariant() {
        let a = image_from(|i| (i % 97) as f64 * 0.1);
        let b = image_from(|i| {
            // Reverse the order of samples inside each channel.
            let c = i % CSI_CHANNELS;
            let j = CSI_LEN - CSI_CHANNELS + c - (i - c);
            (j % 97) as f64 * 0.1
        });
        let range = CorpusRange::from_images(&[a.clone()]).unwrap();
        let ha = csi_histogram(&a, &range, 16).unwrap();
        let hb = csi_histogram(&b, &range, 16).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(histogram_intersection_distance(&ha, &hb).unwrap(), 0.0);
    }

    #[test]
    fn uniform_amplitudes_fill_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let range = CorpusRange {
            min: [0.0; 3],
            max: [1.0; 3],
        };
        // 13 images ≈ 1.0e5 samples across channels.
        let mut counts = vec![0.0; 32 * CSI_CHANNELS];
        let n_images = 13;
        for _ in 0..n_images {
            let img = image_from(|_| rng.random::<f64>());
            let h = csi_histogram(&img, &range, 32).unwrap();
            counts.iter_mut().zip(&h.bins).for_each(|(a, b)| *a += b / n_images as f64);
        }
        for c in 0..CSI_CHANNELS {
            for b in &counts[c * 32..(c + 1) * 32] {
                assert!((b - 1.0 / 32.0).abs() < 0.006, "{b}");
            }
        }
    }

    #[test]
    fn intersection_distance_examples() {
        let a = Histogram::new(vec![0.5, 0.5], true).unwrap();
        let b = Histogram::new(vec![0.25, 0.75], true).unwrap();
        assert!((histogram_intersection_distance(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(histogram_intersection_distance(&a, &a).unwrap(), 0.0);
        let c = Histogram::new(vec![1.0, 0.0], true).unwrap();
        let d = Histogram::new(vec![0.0, 1.0], true).unwrap();
        assert_eq!(histogram_intersection_distance(&c, &d).unwrap(), 1.0);
        let e = Histogram::new(vec![1.0, 0.0, 0.0], true).unwrap();
        assert!(histogram_intersection_distance(&a, &e).is_err());
        let u = Histogram::new(vec![2.0, 1.0], false).unwrap();
        assert!(histogram_intersection_distance(&a, &u).is_err());
        // Unnormalized histograms divide by the smaller mass.
        let v = Histogram::new(vec![1.0, 1.0], false).unwrap();
        assert!((histogram_intersection_distance(&u, &v).unwrap() - 0.0).abs() < 1e-12);
        assert!(Histogram::new(vec![0.3, 0.3], true).is_err());
    }

    #[test]
    fn synthetic_csi_separates_locations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let loc1 = CsiSynthesizer::random(4, 0.05, &mut rng);
        let loc2 = CsiSynthesizer::random(4, 0.05, &mut rng);
        let a1 = loc1.generate(&mut rng);
        let a2 = loc1.generate(&mut rng);
        let b1 = loc2.generate(&mut rng);
        let range = CorpusRange::from_images(&[a1.clone(), a2.clone(), b1.clone()]).unwrap();
        let h = |img: &CsiImage| csi_histogram(img, &range, 32).unwrap();
        let same = histogram_intersection_distance(&h(&a1), &h(&a2)).unwrap();
        let cross = histogram_intersection_distance(&h(&a1), &h(&b1)).unwrap();
        assert!(same < cross, "{same} vs {cross}");
        assert!(a1.as_slice().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn csi_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = CsiSynthesizer::random(3, 0.1, &mut rng).generate(&mut rng);
        let csv_path = dir.path().join("img.csv");
        let bin_path = dir.path().join("img.bin");
        write_csi_csv(&img, &csv_path).unwrap();
        write_csi_binary(&img, &bin_path).unwrap();
        assert_eq!(read_csi_csv(&csv_path).unwrap(), img);
        assert_eq!(read_csi_binary(&bin_path).unwrap(), img);
        let side = CsiSidecar::new(&CorpusRange::from_images(&[img.clone()]).unwrap());
        let side_path = dir.path().join("img.json");
        side.save(&side_path).unwrap();
        assert_eq!(CsiSidecar::load(&side_path).unwrap(), side);
        std::fs::write(&bin_path, [0u8; 16]).unwrap();
        assert!(read_csi_binary(&bin_path).is_err());
    }
}
