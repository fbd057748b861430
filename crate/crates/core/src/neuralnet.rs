//! Fully-connected ReLU network over a flat parameter vector with a
//! hand-written backward pass.
//!
//! Parameters are laid out layer by layer: the `fan_out × fan_in` weight
//! matrix in row-major order, then the `fan_out` biases.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

/// Layer widths from input to output. Hidden layers use `activation`; the
/// output layer is linear (coordinates or logits).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `[input, hidden..., 2]` coordinate regressor.
    pub fn regression(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::config("a localizer needs at least one hidden layer"));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        Self::new(sizes)
    }

    /// `[input, hidden..., classes]` position classifier.
    pub fn classification(input_dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::config("a localizer needs at least one hidden layer"));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("network needs an input and an output layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// `(fan_in, fan_out, offset)` for each layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_sizes.windows(2).scan(0usize, |offset, w| {
            let start = *offset;
            *offset += (w[0] + 1) * w[1];
            Some((w[0], w[1], start))
        })
    }
}

/// Flat parameter state (meta-parameters, adapted parameters, gradients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> ParamVector {
        ParamVector::from_vec(self.values.iter().map(|v| v * scale).collect())
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn squared_distance(&self, other: &ParamVector) -> f64 {
        crate::geom::squared_distance(&self.values, &other.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Per-layer `(weights, biases)` copies.
    pub fn unflatten(&self, spec: &NetSpec) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
        check_len(spec, self)?;
        Ok(spec
            .layers()
            .map(|(fan_in, fan_out, off)| {
                let (w, b) = layer_views(&self.values, fan_in, fan_out, off);
                (w.to_owned(), b.to_owned())
            })
            .collect())
    }

    pub fn flatten(spec: &NetSpec, layers: &[(Array2<f64>, Array1<f64>)]) -> Result<Self> {
        let shapes: Vec<_> = spec.layers().collect();
        if shapes.len() != layers.len() {
            return Err(Error::invalid("layer count does not match the network spec"));
        }
        let mut values = Vec::with_capacity(spec.param_count());
        for ((fan_in, fan_out, _), (w, b)) in shapes.into_iter().zip(layers) {
            if w.dim() != (fan_out, fan_in) || b.len() != fan_out {
                return Err(Error::invalid("layer shape does not match the network spec"));
            }
            values.extend(w.iter());
            values.extend(b.iter());
        }
        Ok(Self { values })
    }
}

fn check_len(spec: &NetSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::invalid(format!(
            "parameter vector has {} entries, spec {:?} needs {}",
            params.len(),
            spec.layer_sizes,
            spec.param_count()
        )));
    }
    Ok(())
}

fn layer_views(values: &[f64], fan_in: usize, fan_out: usize, off: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let w_len = fan_in * fan_out;
    let w = ArrayView2::from_shape((fan_out, fan_in), &values[off..off + w_len]).expect("layer shape");
    let b = ArrayView1::from(&values[off + w_len..off + w_len + fan_out]);
    (w, b)
}

fn layer_views_mut(
    values: &mut [f64],
    fan_in: usize,
    fan_out: usize,
    off: usize,
) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
    let w_len = fan_in * fan_out;
    let (w, b) = values[off..off + w_len + fan_out].split_at_mut(w_len);
    (
        ArrayViewMut2::from_shape((fan_out, fan_in), w).expect("layer shape"),
        ArrayViewMut1::from(b),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `[samples × output_dim]` regression targets.
    Positions(Array2<f64>),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn regression(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::invalid("batch is empty"));
        }
        if targets.nrows() != inputs.nrows() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self {
            inputs,
            targets: Targets::Positions(targets),
        })
    }

    pub fn classification(inputs: Array2<f64>, classes: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::invalid("batch is empty"));
        }
        if classes.len() != inputs.nrows() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                classes.len()
            )));
        }
        Ok(Self {
            inputs,
            targets: Targets::Classes(classes),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows `indices` of this batch, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let inputs = self.inputs.select(Axis(0), indices);
        let targets = match &self.targets {
            Targets::Positions(t) => Targets::Positions(t.select(Axis(0), indices)),
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
        };
        Batch { inputs, targets }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    Rmse,
    CrossEntropy,
}

fn check_inputs(spec: &NetSpec, params: &ParamVector, inputs: &ArrayView2<f64>) -> Result<()> {
    check_len(spec, params)?;
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::invalid(format!(
            "inputs have {} features, network expects {}",
            inputs.ncols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Forward pass; returns every layer's output (post-activation for hidden
/// layers, raw for the output layer). Index 0 is the input itself.
fn forward_trace(spec: &NetSpec, params: &ParamVector, inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let n_layers = spec.layer_sizes.len() - 1;
    let mut outs: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
    outs.push(inputs.to_owned());
    for (i, (fan_in, fan_out, off)) in spec.layers().enumerate() {
        let (w, b) = layer_views(params.as_slice(), fan_in, fan_out, off);
        let mut z = outs[i].dot(&w.t());
        z += &b;
        if i + 1 < n_layers {
            match spec.activation {
                Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            }
        }
        outs.push(z);
    }
    outs
}

pub fn forward(spec: &NetSpec, params: &ParamVector, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_inputs(spec, params, &inputs)?;
    Ok(forward_trace(spec, params, inputs).pop().expect("at least one layer"))
}

/// Loss value and its derivative with respect to the network output.
fn loss_head(output: &Array2<f64>, targets: &Targets, kind: LossKind, want_grad: bool) -> Result<(f64, Option<Array2<f64>>)> {
    let n = output.nrows() as f64;
    match (kind, targets) {
        (LossKind::Mse | LossKind::Rmse, Targets::Positions(t)) => {
            if t.dim() != output.dim() {
                return Err(Error::invalid(format!(
                    "targets have shape {:?}, network output {:?}",
                    t.dim(),
                    output.dim()
                )));
            }
            let diff = output - t;
            let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
            if kind == LossKind::Mse {
                Ok((mse, want_grad.then(|| diff * (2.0 / n))))
            } else {
                let rmse = mse.sqrt();
                let grad = want_grad.then(|| {
                    if mse > 0.0 {
                        diff * (1.0 / (n * rmse))
                    } else {
                        Array2::zeros(output.dim())
                    }
                });
                Ok((rmse, grad))
            }
        }
        (LossKind::CrossEntropy, Targets::Classes(classes)) => {
            let k = output.ncols();
            if let Some(c) = classes.iter().find(|&&c| c >= k) {
                return Err(Error::invalid(format!("class {c} out of range for {k} logits")));
            }
            let mut total = 0.0;
            let mut grad = want_grad.then(|| Array2::zeros(output.dim()));
            for (i, (row, &c)) in output.rows().into_iter().zip(classes).enumerate() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                total += log_z - row[c];
                if let Some(g) = grad.as_mut() {
                    for j in 0..k {
                        g[[i, j]] = ((row[j] - log_z).exp() - if j == c { 1.0 } else { 0.0 }) / n;
                    }
                }
            }
            Ok((total / n, grad))
        }
        (kind, _) => Err(Error::invalid(format!("loss {kind:?} does not match the batch targets"))),
    }
}

pub fn loss(spec: &NetSpec, params: &ParamVector, batch: &Batch, kind: LossKind) -> Result<f64> {
    check_inputs(spec, params, &batch.inputs.view())?;
    let out = forward_trace(spec, params, batch.inputs.view()).pop().expect("layer");
    Ok(loss_head(&out, &batch.targets, kind, false)?.0)
}

/// Loss and its exact gradient by backpropagation.
pub fn loss_and_grad(spec: &NetSpec, params: &ParamVector, batch: &Batch, kind: LossKind) -> Result<(f64, ParamVector)> {
    check_inputs(spec, params, &batch.inputs.view())?;
    let outs = forward_trace(spec, params, batch.inputs.view());
    let (value, delta) = loss_head(outs.last().expect("layer"), &batch.targets, kind, true)?;
    let mut delta = delta.expect("gradient requested");
    let mut g = ParamVector::zeros(spec.param_count());
    let shapes: Vec<_> = spec.layers().collect();
    for (i, &(fan_in, fan_out, off)) in shapes.iter().enumerate().rev() {
        let prev = &outs[i];
        {
            let (mut gw, mut gb) = layer_views_mut(g.as_mut_slice(), fan_in, fan_out, off);
            gw.assign(&delta.t().dot(prev));
            gb.assign(&delta.sum_axis(Axis(0)));
        }
        if i > 0 {
            let (w, _) = layer_views(params.as_slice(), fan_in, fan_out, off);
            let mut back = delta.dot(&w);
            // ReLU derivative from the stored post-activation.
            ndarray::Zip::from(&mut back).and(prev).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
    }
    Ok((value, g))
}

pub fn grad(spec: &NetSpec, params: &ParamVector, batch: &Batch, kind: LossKind) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch, kind).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    #[default]
    GlorotUniform,
    Zeros,
}

pub fn init_params<R: Rng + ?Sized>(spec: &NetSpec, scheme: InitScheme, rng: &mut R) -> ParamVector {
    let mut p = ParamVector::zeros(spec.param_count());
    if scheme == InitScheme::Zeros {
        return p;
    }
    for (fan_in, fan_out, off) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut p.as_mut_slice()[off..off + fan_in * fan_out] {
            *w = rng.random_range(-limit..limit);
        }
    }
    p
}

/// Network spec plus parameters; serialized as JSON with shortest
/// round-trip float formatting, so save/load is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: NetSpec,
    pub params: ParamVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(spec: NetSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        check_len(&spec, &params)?;
        Ok(Self {
            spec,
            params,
            iteration: None,
            meta: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        ckpt.spec.validate()?;
        check_len(&ckpt.spec, &ckpt.params)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> NetSpec {
        NetSpec::new(vec![3, 5, 4, 2]).unwrap()
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(small().param_count(), 4 * 5 + 6 * 4 + 5 * 2);
        assert_eq!(NetSpec::regression(15, &[64, 64]).unwrap().param_count(), 16 * 64 + 65 * 64 + 65 * 2);
        assert!(NetSpec::regression(15, &[]).is_err());
        assert!(NetSpec::new(vec![3]).is_err());
        assert!(NetSpec::new(vec![3, 0, 2]).is_err());
    }

    #[test]
    fn zero_network_predicts_zero() {
        let spec = small();
        let p = init_params(&spec, InitScheme::Zeros, &mut ChaCha8Rng::seed_from_u64(0));
        let out = forward(&spec, &p, array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_linear_layer_reproduces_input() {
        let spec = NetSpec::new(vec![3, 3]).unwrap();
        let w = Array2::<f64>::eye(3);
        let p = ParamVector::flatten(&spec, &[(w, Array1::zeros(3))]).unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(forward(&spec, &p, x.view()).unwrap(), x);
    }

    #[test]
    fn batched_forward_matches_rows() {
        let spec = small();
        let p = init_params(&spec, InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(4));
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.1, -0.7], [2.0, 2.0, 2.0]];
        let all = forward(&spec, &p, x.view()).unwrap();
        for i in 0..3 {
            let row = forward(&spec, &p, x.slice(ndarray::s![i..i + 1, ..])).unwrap();
            assert_eq!(row.row(0), all.row(i));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = small();
        let p = ParamVector::zeros(spec.param_count());
        assert!(forward(&spec, &p, array![[1.0, 2.0]].view()).is_err());
        assert!(forward(&spec, &ParamVector::zeros(3), array![[1.0, 2.0, 3.0]].view()).is_err());
        let b = Batch::regression(array![[1.0, 2.0, 3.0]], array![[1.0, 2.0, 3.0]]).unwrap();
        assert!(loss(&spec, &p, &b, LossKind::Mse).is_err());
        assert!(Batch::regression(array![[1.0, 2.0, 3.0]], array![[1.0, 2.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn loss_examples() {
        let spec = small();
        let p = ParamVector::zeros(spec.param_count());
        let b = Batch::regression(array![[1.0, 1.0, 1.0]], array![[3.0, 4.0]]).unwrap();
        assert_eq!(loss(&spec, &p, &b, LossKind::Mse).unwrap(), 25.0);
        assert_eq!(loss(&spec, &p, &b, LossKind::Rmse).unwrap(), 5.0);
        let perfect = Batch::regression(array![[1.0, 1.0, 1.0]], array![[0.0, 0.0]]).unwrap();
        assert_eq!(loss(&spec, &p, &perfect, LossKind::Mse).unwrap(), 0.0);
        let g = grad(&spec, &p, &perfect, LossKind::Mse).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
        let g = grad(&spec, &p, &perfect, LossKind::Rmse).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));

        let cls = NetSpec::new(vec![3, 4, 7]).unwrap();
        let zp = ParamVector::zeros(cls.param_count());
        let cb = Batch::classification(array![[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]], vec![3, 6]).unwrap();
        let ce = loss(&cls, &zp, &cb, LossKind::CrossEntropy).unwrap();
        assert!((ce - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn incompatible_loss_kind_rejected() {
        let spec = small();
        let p = ParamVector::zeros(spec.param_count());
        let b = Batch::regression(array![[1.0, 1.0, 1.0]], array![[3.0, 4.0]]).unwrap();
        assert!(matches!(loss(&spec, &p, &b, LossKind::CrossEntropy), Err(Error::InvalidInput(_))));
        let c = Batch::classification(array![[1.0, 1.0, 1.0]], vec![1]).unwrap();
        assert!(loss(&spec, &p, &c, LossKind::Mse).is_err());
        let out_of_range = Batch::classification(array![[1.0, 1.0, 1.0]], vec![2]).unwrap();
        assert!(loss(&spec, &p, &out_of_range, LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn init_is_seeded_and_moment_matched() {
        let spec = NetSpec::new(vec![100, 100, 2]).unwrap();
        let a = init_params(&spec, InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_params(&spec, InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let weights = &a.as_slice()[..100 * 100];
        let limit = (6.0f64 / 200.0).sqrt();
        // Uniform(−l, l) has standard deviation l / sqrt(3).
        let analytic = limit / 3f64.sqrt();
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / weights.len() as f64;
        assert!((var.sqrt() - analytic).abs() / analytic < 0.2);
        assert!(a.as_slice()[100 * 100..100 * 101].iter().all(|v| *v == 0.0));
        let z = init_params(&spec, InitScheme::Zeros, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(z.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let spec = small();
        let p = init_params(&spec, InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::new(spec.clone(), p.clone()).unwrap().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.spec, spec);
        let same_bits = back
            .params
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits);
        assert!(Checkpoint::new(spec, ParamVector::zeros(2)).is_err());
    }
}
