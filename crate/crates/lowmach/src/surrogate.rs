//! Per-species GELU MLP inference, a minimal Adam/MSE trainer, weights
//! persistence, and in-loop application with mass-fraction repair.
//!
//! Networks train and infer in z-score normalized space; the normalization
//! vectors are part of the network (and of the weights file), so inference is
//! self-contained. GELU uses the exact erf form, not the tanh approximation.

use crate::chemistry::{ChemistryError, Mechanism, SampleTable};
use crate::thermo::{self, MixtureState, ThermoError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("layer {layer}: input dim {found}, expected {expected}")]
    DimChain { layer: usize, expected: usize, found: usize },
    #[error("normalization std must be positive, got {std}")]
    BadStd { std: f64 },
    #[error("input row has {found} features, network expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptySamples,
    #[error("feature/label lengths inconsistent: {0}")]
    BadSamples(String),
    #[error("weights file: {0}")]
    Format(String),
    #[error("weights file CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("step dt {dt} is not the training dt {train_dt} or an integer fraction of it")]
    DtMismatch { dt: f64, train_dt: f64 },
    #[error("no surrogate network for non-inert species {name}")]
    MissingNet { name: String },
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error(transparent)]
    Chemistry(#[from] Box<ChemistryError>),
}

/// Exact GELU: 0.5 x (1 + erf(x/sqrt(2))).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx gelu = Phi(x) + x phi(x) with the standard normal CDF and PDF.
fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    phi_cdf + x * phi_pdf
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major out_dim x in_dim.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Norm {
    pub fn identity(dim: usize) -> Norm {
        Norm { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Column-wise mean/std of row-major data; constant features get std 1
    /// so they normalize to exactly zero.
    fn fit(data: &[f64], n_rows: usize, dim: usize) -> Norm {
        let mut mean = vec![0.0; dim];
        for row in data.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n_rows as f64;
        }
        let mut var = vec![0.0; dim];
        for row in data.chunks(dim) {
            for j in 0..dim {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n_rows as f64).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Norm { mean, std }
    }
}

/// GELU-hidden, identity-output multilayer perceptron with built-in
/// input/output normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    pub layers: Vec<Layer>,
    pub input_norm: Norm,
    pub output_norm: Norm,
}

impl MlpNetwork {
    /// Glorot-uniform initialization with identity normalization; draw order
    /// is weights row-major then (zero) biases, layer by layer.
    pub fn glorot(dims: &[usize], seed: u64) -> MlpNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    w: (0..fan_in * fan_out)
                        .map(|_| limit * (2.0 * rng.gen::<f64>() - 1.0))
                        .collect(),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        MlpNetwork {
            layers,
            input_norm: Norm::identity(dims[0]),
            output_norm: Norm::identity(*dims.last().unwrap()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[1].in_dim != pair[0].out_dim {
                return Err(SurrogateError::DimChain {
                    layer: i + 1,
                    expected: pair[0].out_dim,
                    found: pair[1].in_dim,
                });
            }
        }
        for s in self.input_norm.std.iter().chain(&self.output_norm.std) {
            if *s <= 0.0 {
                return Err(SurrogateError::BadStd { std: *s });
            }
        }
        Ok(())
    }

    /// Evaluate one input row: y = denorm(W_L(...gelu(W_1 norm(x)+b_1)...)+b_L).
    pub fn forward_row(&self, x: &[f64]) -> Result<Vec<f64>, SurrogateError> {
        if x.len() != self.input_dim() {
            return Err(SurrogateError::InputDim {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut a: Vec<f64> = x
            .iter()
            .zip(self.input_norm.mean.iter().zip(&self.input_norm.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.b.clone();
            for i in 0..layer.out_dim {
                let row = &layer.w[i * layer.in_dim..(i + 1) * layer.in_dim];
                z[i] += row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            }
            if l < last {
                for v in &mut z {
                    *v = gelu(*v);
                }
            }
            a = z;
        }
        for (v, (m, s)) in a
            .iter_mut()
            .zip(self.output_norm.mean.iter().zip(&self.output_norm.std))
        {
            *v = *v * s + m;
        }
        Ok(a)
    }

    /// Batched evaluation; row-by-row internally, so batching is bitwise
    /// equivalent to any split of the rows.
    pub fn forward(&self, x: &[f64], n_rows: usize) -> Result<Vec<f64>, SurrogateError> {
        let in_dim = self.input_dim();
        if x.len() != n_rows * in_dim {
            return Err(SurrogateError::InputDim {
                expected: n_rows * in_dim,
                found: x.len(),
            });
        }
        let mut out = Vec::with_capacity(n_rows * self.output_dim());
        for row in x.chunks(in_dim) {
            out.extend(self.forward_row(row)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> TrainerConfig {
        TrainerConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub net: MlpNetwork,
    /// Dataset MSE in physical (denormalized) units after each epoch.
    pub loss_history: Vec<f64>,
    /// Epoch at which a non-finite loss aborted training; the returned net
    /// is the last finite checkpoint.
    pub aborted_at: Option<usize>,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

/// Backpropagated gradient of the summed squared error of one sample in
/// normalized space; accumulates into grads (same shape as Adam state slots:
/// per layer, weights then biases concatenated).
fn backprop_sample(
    net: &MlpNetwork,
    x_n: &[f64],
    t_n: &[f64],
    grads: &mut [Vec<f64>],
    acts: &mut Vec<Vec<f64>>,
    zs: &mut Vec<Vec<f64>>,
) {
    let last = net.layers.len() - 1;
    acts.clear();
    zs.clear();
    acts.push(x_n.to_vec());
    for (l, layer) in net.layers.iter().enumerate() {
        let a_prev = acts.last().unwrap();
        let mut z = layer.b.clone();
        for i in 0..layer.out_dim {
            let row = &layer.w[i * layer.in_dim..(i + 1) * layer.in_dim];
            z[i] += row.iter().zip(a_prev).map(|(w, v)| w * v).sum::<f64>();
        }
        zs.push(z.clone());
        if l < last {
            for v in &mut z {
                *v = gelu(*v);
            }
        }
        acts.push(z);
    }
    // delta = dE/dz at the output (identity activation), E = sum (y - t)^2.
    let mut delta: Vec<f64> = acts[last + 1]
        .iter()
        .zip(t_n)
        .map(|(y, t)| 2.0 * (y - t))
        .collect();
    for l in (0..=last).rev() {
        let layer = &net.layers[l];
        let a_prev = &acts[l];
        let g = &mut grads[l];
        let wlen = layer.w.len();
        for i in 0..layer.out_dim {
            for j in 0..layer.in_dim {
                g[i * layer.in_dim + j] += delta[i] * a_prev[j];
            }
            g[wlen + i] += delta[i];
        }
        if l > 0 {
            let mut prev = vec![0.0; layer.in_dim];
            for i in 0..layer.out_dim {
                for j in 0..layer.in_dim {
                    prev[j] += layer.w[i * layer.in_dim + j] * delta[i];
                }
            }
            for (p, z) in prev.iter_mut().zip(&zs[l - 1]) {
                *p *= gelu_prime(*z);
            }
            delta = prev;
        }
    }
}

/// Gradient of one sample's summed squared error, in the network's
/// normalized space, laid out like the trainer's parameter slots (per layer:
/// weights then biases). `x` and `target` are physical values; they pass
/// through the stored normalizations first, exactly as training does. This is
/// the verification hook for gradient checks against finite differences.
pub fn sample_gradient(
    net: &MlpNetwork,
    x: &[f64],
    target: &[f64],
) -> Result<Vec<Vec<f64>>, SurrogateError> {
    net.validate()?;
    if x.len() != net.input_dim() {
        return Err(SurrogateError::InputDim { expected: net.input_dim(), found: x.len() });
    }
    if target.len() != net.output_dim() {
        return Err(SurrogateError::BadSamples(format!(
            "target has {} values, network outputs {}",
            target.len(),
            net.output_dim()
        )));
    }
    let norm = |v: &[f64], n: &Norm| -> Vec<f64> {
        v.iter()
            .zip(n.mean.iter().zip(&n.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    };
    let x_n = norm(x, &net.input_norm);
    let t_n = norm(target, &net.output_norm);
    let mut grads: Vec<Vec<f64>> =
        net.layers.iter().map(|l| vec![0.0; l.w.len() + l.b.len()]).collect();
    backprop_sample(net, &x_n, &t_n, &mut grads, &mut Vec::new(), &mut Vec::new());
    Ok(grads)
}

/// Mini-batch Adam on mean squared error. Normalization is fit from the
/// samples and stored in the returned network. Fixed seed makes the whole
/// run, including shuffling and initialization state, bitwise reproducible.
pub fn train(
    net_init: &MlpNetwork,
    features: &[f64],
    labels: &[f64],
    config: &TrainerConfig,
) -> Result<TrainReport, SurrogateError> {
    let in_dim = net_init.input_dim();
    let out_dim = net_init.output_dim();
    if features.is_empty() || labels.is_empty() {
        return Err(SurrogateError::EmptySamples);
    }
    if features.len() % in_dim != 0 || labels.len() % out_dim != 0 {
        return Err(SurrogateError::BadSamples(format!(
            "features {} not divisible by {in_dim} or labels {} by {out_dim}",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len() / in_dim;
    if labels.len() / out_dim != n {
        return Err(SurrogateError::BadSamples(format!(
            "{n} feature rows vs {} label rows",
            labels.len() / out_dim
        )));
    }
    if features.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(SurrogateError::BadSamples("non-finite sample values".into()));
    }
    let mut net = net_init.clone();
    net.validate()?;
    net.input_norm = Norm::fit(features, n, in_dim);
    net.output_norm = Norm::fit(labels, n, out_dim);
    let norm_rows = |data: &[f64], norm: &Norm, dim: usize| -> Vec<f64> {
        data.chunks(dim)
            .flat_map(|row| {
                row.iter()
                    .zip(norm.mean.iter().zip(&norm.std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect::<Vec<f64>>()
            })
            .collect()
    };
    let x_n = norm_rows(features, &net.input_norm, in_dim);
    let t_n = norm_rows(labels, &net.output_norm, out_dim);

    let mut adam = AdamState {
        m: net.layers.iter().map(|l| vec![0.0; l.w.len() + l.b.len()]).collect(),
        v: net.layers.iter().map(|l| vec![0.0; l.w.len() + l.b.len()]).collect(),
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads: Vec<Vec<f64>> =
        net.layers.iter().map(|l| vec![0.0; l.w.len() + l.b.len()]).collect();
    let mut acts = Vec::new();
    let mut zs = Vec::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut checkpoint = net.clone();

    let dataset_mse = |net: &MlpNetwork| -> f64 {
        let mut sum = 0.0;
        for (row, label) in features.chunks(in_dim).zip(labels.chunks(out_dim)) {
            let y = net.forward_row(row).expect("dims verified");
            sum += y.iter().zip(label).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        sum / (n * out_dim) as f64
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            for &row in batch {
                backprop_sample(
                    &net,
                    &x_n[row * in_dim..(row + 1) * in_dim],
                    &t_n[row * out_dim..(row + 1) * out_dim],
                    &mut grads,
                    &mut acts,
                    &mut zs,
                );
            }
            let scale = 1.0 / batch.len() as f64;
            adam.step += 1;
            let bc1 = 1.0 - config.beta1.powi(adam.step as i32);
            let bc2 = 1.0 - config.beta2.powi(adam.step as i32);
            for (l, layer) in net.layers.iter_mut().enumerate() {
                let wlen = layer.w.len();
                for (idx, g) in grads[l].iter().enumerate() {
                    let g = g * scale;
                    let m = &mut adam.m[l][idx];
                    let v = &mut adam.v[l][idx];
                    *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                    *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                    let update = config.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + config.eps);
                    if idx < wlen {
                        layer.w[idx] -= update;
                    } else {
                        layer.b[idx - wlen] -= update;
                    }
                }
            }
        }
        let loss = dataset_mse(&net);
        if !loss.is_finite() {
            return Ok(TrainReport {
                net: checkpoint,
                loss_history: history,
                aborted_at: Some(epoch),
            });
        }
        history.push(loss);
        checkpoint = net.clone();
    }
    Ok(TrainReport { net, loss_history: history, aborted_at: None })
}

/// One single-output network per predicted species; input feature order is
/// (T, p, Y_1..Y_n) over all mechanism species.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBundle {
    pub species_names: Vec<String>,
    pub nets: Vec<MlpNetwork>,
    /// Training dt the labels were generated with; not persisted in the
    /// weights file, so loaders must set it from case configuration.
    pub train_dt: Option<f64>,
}

impl SurrogateBundle {
    pub fn net_for(&self, name: &str) -> Option<&MlpNetwork> {
        self.species_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.nets[i])
    }
}

/// Train one network per species with any nonzero label column. Species whose
/// rates are identically zero over the table (inert behavior) get no network
/// and are left to residual absorption at application time.
pub fn train_bundle(
    table: &SampleTable,
    hidden: &[usize],
    config: &TrainerConfig,
) -> Result<SurrogateBundle, SurrogateError> {
    let n_sp = table.species_names.len();
    let in_dim = 2 + n_sp;
    let n = table.rows.len();
    if n == 0 {
        return Err(SurrogateError::EmptySamples);
    }
    let mut features = Vec::with_capacity(n * in_dim);
    for row in &table.rows {
        features.extend_from_slice(&row[..in_dim]);
    }
    let mut names = Vec::new();
    let mut nets = Vec::new();
    for (k, name) in table.species_names.iter().enumerate() {
        let labels: Vec<f64> = table.rows.iter().map(|r| r[in_dim + k]).collect();
        if labels.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        // Offset the seed per species so sibling nets start decorrelated.
        let init = MlpNetwork::glorot(&dims, config.seed.wrapping_add(k as u64));
        let report = train(&init, &features, &labels, config)?;
        names.push(name.clone());
        nets.push(report.net);
    }
    Ok(SurrogateBundle { species_names: names, nets, train_dt: Some(table.dt) })
}

const WEIGHTS_MAGIC: &[u8; 4] = b"MFNN";
const WEIGHTS_VERSION: u32 = 1;

/// Serialize a bundle in the normative little-endian layout: magic "MFNN",
/// version u32, species count u32; per network: name length u32 + bytes,
/// layer count u32, per layer (inDim u32, outDim u32, weights row-major f64,
/// bias f64), then input means/stds and output means/stds f64; trailing CRC32
/// over all preceding bytes.
pub fn weights_to_bytes(bundle: &SurrogateBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.nets.len() as u32).to_le_bytes());
    for (name, net) in bundle.species_names.iter().zip(&bundle.nets) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
        for layer in &net.layers {
            out.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
            for v in layer.w.iter().chain(&layer.b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in net
            .input_norm
            .mean
            .iter()
            .chain(&net.input_norm.std)
            .chain(&net.output_norm.mean)
            .chain(&net.output_norm.std)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<SurrogateBundle, SurrogateError> {
    struct Reader<'a> {
        b: &'a [u8],
        pos: usize,
    }
    impl Reader<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8], SurrogateError> {
            if self.pos + n > self.b.len() {
                return Err(SurrogateError::Format(format!(
                    "truncated at byte {} (wanted {n} more)",
                    self.pos
                )));
            }
            let s = &self.b[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32, SurrogateError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SurrogateError> {
            let raw = self.take(8 * n)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }
    if bytes.len() < 4 + 4 + 4 + 4 {
        return Err(SurrogateError::Format("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(SurrogateError::Crc { stored, computed });
    }
    let mut r = Reader { b: body, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(SurrogateError::Format("bad magic, not a weights file".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(SurrogateError::Format(format!(
            "unsupported version {version}, expected {WEIGHTS_VERSION}"
        )));
    }
    let n_nets = r.u32()? as usize;
    let mut names = Vec::with_capacity(n_nets);
    let mut nets = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| SurrogateError::Format(format!("species name not UTF-8: {e}")))?;
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(SurrogateError::Format(format!("network {name} has no layers")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let w = r.f64s(in_dim * out_dim)?;
            let b = r.f64s(out_dim)?;
            layers.push(Layer { in_dim, out_dim, w, b });
        }
        let in_dim = layers[0].in_dim;
        let out_dim = layers[n_layers - 1].out_dim;
        let net = MlpNetwork {
            layers,
            input_norm: Norm { mean: r.f64s(in_dim)?, std: r.f64s(in_dim)? },
            output_norm: Norm { mean: r.f64s(out_dim)?, std: r.f64s(out_dim)? },
        };
        net.validate()?;
        names.push(name);
        nets.push(net);
    }
    if r.pos != body.len() {
        return Err(SurrogateError::Format(format!(
            "{} trailing bytes after last network",
            body.len() - r.pos
        )));
    }
    Ok(SurrogateBundle { species_names: names, nets, train_dt: None })
}

pub fn save_weights(bundle: &SurrogateBundle, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, weights_to_bytes(bundle))
}

pub fn load_weights(path: &std::path::Path) -> Result<SurrogateBundle, SurrogateError> {
    let bytes = std::fs::read(path)
        .map_err(|e| SurrogateError::Format(format!("read {}: {e}", path.display())))?;
    weights_from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ApplyStats {
    /// Cells whose pre-renormalization mass defect exceeded 1e-3.
    pub fidelity_flags: usize,
    pub worst_defect: f64,
}

/// Advance species fields one step with the surrogate: per cell, infer
/// dY/dt for covered species, integrate explicitly, absorb the residual into
/// uncovered (inert) species, clip and renormalize, and recover T from the
/// conserved absolute enthalpy. `y` is component-major over mech species.
pub fn apply_surrogate_field(
    bundle: &SurrogateBundle,
    mech: &Mechanism,
    p: &[f64],
    t: &mut [f64],
    y: &mut [f64],
    dt: f64,
) -> Result<ApplyStats, SurrogateError> {
    if let Some(train_dt) = bundle.train_dt {
        let ratio = train_dt / dt;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(SurrogateError::DtMismatch { dt, train_dt });
        }
    }
    let n_sp = mech.n_species();
    let n_cells = t.len();
    // Species -> network map; every non-inert species must be covered.
    let mut net_of: Vec<Option<&MlpNetwork>> = vec![None; n_sp];
    for (k, sp) in mech.species.iter().enumerate() {
        if mech.is_inert(k) {
            continue;
        }
        match bundle.net_for(&sp.name) {
            Some(net) => {
                if net.input_dim() != 2 + n_sp {
                    return Err(SurrogateError::InputDim {
                        expected: 2 + n_sp,
                        found: net.input_dim(),
                    });
                }
                net_of[k] = Some(net);
            }
            None => return Err(SurrogateError::MissingNet { name: sp.name.clone() }),
        }
    }
    let absorbers: Vec<usize> = (0..n_sp).filter(|&k| net_of[k].is_none()).collect();
    let mut stats = ApplyStats::default();
    let mut input = vec![0.0; 2 + n_sp];
    let mut y_cell = vec![0.0; n_sp];
    for c in 0..n_cells {
        for k in 0..n_sp {
            y_cell[k] = y[k * n_cells + c];
        }
        let h0 = thermo::mixture_h(
            &mech.species,
            &MixtureState { p: p[c], t: t[c], y: &y_cell },
        );
        input[0] = t[c];
        input[1] = p[c];
        input[2..].copy_from_slice(&y_cell);
        let mut covered_sum = 0.0;
        let mut absorber_sum = 0.0;
        for k in 0..n_sp {
            if let Some(net) = net_of[k] {
                let rate = net.forward_row(&input)?[0];
                y_cell[k] += rate * dt;
                covered_sum += y_cell[k];
            } else {
                absorber_sum += y_cell[k];
            }
        }
        if !absorbers.is_empty() {
            let delta = (1.0 - covered_sum - absorber_sum) / absorbers.len() as f64;
            for &k in &absorbers {
                y_cell[k] += delta;
            }
        }
        for v in &mut y_cell {
            *v = v.clamp(0.0, 1.0);
        }
        let sum: f64 = y_cell.iter().sum();
        let defect = (sum - 1.0).abs();
        stats.worst_defect = stats.worst_defect.max(defect);
        if defect > 1e-3 {
            stats.fidelity_flags += 1;
        }
        for v in &mut y_cell {
            *v /= sum;
        }
        t[c] = thermo::t_from_h(&mech.species, h0, p[c], &y_cell, t[c])?;
        for k in 0..n_sp {
            y[k * n_cells + c] = y_cell[k];
        }
    }
    Ok(stats)
}
