//! Contrastive pre-training of a small encoder over POI feature vectors.
//!
//! The encoder maps an input vector through one ReLU hidden layer to a
//! latent vector. Training draws two Gaussian-noise views of every POI in a
//! batch and minimises the InfoNCE loss over cosine similarities, with the
//! other `2N - 2` views of the batch acting as negatives. Gradients are
//! computed analytically.
//!
//! Batch layout: a batch of `N` inputs becomes `2N` latent rows where rows
//! `i` and `i + N` are the two views of input `i`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("latent row {0} has zero norm; cosine similarity undefined")]
    ZeroNorm(usize),
    #[error("latent batch must hold an even number (>= 2) of rows, got {0}")]
    BadBatch(usize),
    #[error("no feature vectors to train on")]
    Empty,
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}, last finite loss {last_finite:?}, gradient norm {grad_norm}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        last_finite: Option<f64>,
        grad_norm: f64,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub latent: usize,
    pub temperature: f64,
    pub noise_std: f64,
    /// Inputs per batch (`N`); each contributes two views.
    pub batch: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epoch count compared at the start and end of training to judge
    /// whether the loss went down.
    pub trailing_window: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 256,
            latent: 64,
            temperature: 0.1,
            noise_std: 0.1,
            batch: 128,
            learning_rate: 1e-2,
            epochs: 50,
            trailing_window: 5,
            seed: 0,
        }
    }
}

/// Weights of the two dense layers plus the augmentation/loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// hidden x input
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// latent x hidden
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub noise_std: f64,
    pub temperature: f64,
}

/// Gradient with the same shapes as [`EncoderParams`] weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradient {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl EncoderGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.w1, &self.b1, &self.w2, &self.b2)
    }

    pub fn norm(&self) -> f64 {
        (self.w1.norm_squared() + self.b1.norm_squared() + self.w2.norm_squared() + self.b2.norm_squared()).sqrt()
    }
}

fn flatten(w1: &DMatrix<f64>, b1: &DVector<f64>, w2: &DMatrix<f64>, b2: &DVector<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(w1.len() + b1.len() + w2.len() + b2.len());
    v.extend(w1.iter());
    v.extend(b1.iter());
    v.extend(w2.iter());
    v.extend(b2.iter());
    v
}

/// Intermediate activations kept for the backward pass.
struct Forward {
    pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
    latent: DMatrix<f64>,
}

impl EncoderParams {
    /// He-initialised first layer, Xavier-initialised second layer, zero biases.
    pub fn init(input: usize, hidden: usize, latent: usize, noise_std: f64, temperature: f64, seed: u64) -> Result<Self> {
        if latent < 2 || hidden == 0 || input == 0 {
            return Err(EncoderError::Config(format!(
                "need input > 0, hidden > 0, latent >= 2 (got {input}, {hidden}, {latent})"
            )));
        }
        if temperature <= 0.0 || noise_std < 0.0 {
            return Err(EncoderError::Config("temperature must be > 0 and noise_std >= 0".into()));
        }
        let mut rng = seeded_rng(seed);
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        let w1 = DMatrix::from_fn(hidden, input, |_, _| n1.sample(&mut rng));
        let w2 = DMatrix::from_fn(latent, hidden, |_, _| n2.sample(&mut rng));
        Ok(EncoderParams {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(latent),
            noise_std,
            temperature,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.w1, &self.b1, &self.w2, &self.b2)
    }

    /// Replaces all weights from a flat vector in [`Self::to_flat`] order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for x in self.w1.iter_mut().chain(self.b1.iter_mut()).chain(self.w2.iter_mut()).chain(self.b2.iter_mut()) {
            *x = it.next().expect("flat vector too short");
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    fn forward_full(&self, inputs: &DMatrix<f64>) -> Forward {
        let mut pre = inputs * self.w1.transpose();
        for mut row in pre.row_iter_mut() {
            row += self.b1.transpose();
        }
        let hidden = pre.map(|v| v.max(0.0));
        let mut latent = &hidden * self.w2.transpose();
        for mut row in latent.row_iter_mut() {
            row += self.b2.transpose();
        }
        Forward { pre, hidden, latent }
    }

    /// Maps each input row to its latent row.
    pub fn forward(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_full(inputs).latent
    }

    /// Smallest |pre-activation| over a batch; distance to the nearest ReLU kink.
    pub fn kink_margin(&self, inputs: &DMatrix<f64>) -> f64 {
        self.forward_full(inputs).pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// SHA-256 of the text checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Plain-text checkpoint: header, scalars, then each tensor as a shape
    /// line followed by one line per row.
    pub fn to_text(&self) -> String {
        let mut s = String::from("sidforge-encoder v1\n");
        writeln!(s, "temperature {}", self.temperature).unwrap();
        writeln!(s, "noise_std {}", self.noise_std).unwrap();
        write_matrix(&mut s, "w1", &self.w1);
        write_vector(&mut s, "b1", &self.b1);
        write_matrix(&mut s, "w2", &self.w2);
        write_vector(&mut s, "b2", &self.b2);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| EncoderError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("sidforge-encoder v1") {
            return Err(bad("missing header"));
        }
        let mut scalar = |name: &str| -> Result<f64> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let rest = line.strip_prefix(name).ok_or_else(|| bad(name))?;
            rest.trim().parse().map_err(|_| bad(name))
        };
        let temperature = scalar("temperature")?;
        let noise_std = scalar("noise_std")?;
        let w1 = read_matrix(&mut lines, "w1")?;
        let b1 = read_vector(&mut lines, "b1")?;
        let w2 = read_matrix(&mut lines, "w2")?;
        let b2 = read_vector(&mut lines, "b2")?;
        if w1.nrows() != b1.len() || w2.ncols() != w1.nrows() || w2.nrows() != b2.len() {
            return Err(bad("inconsistent shapes"));
        }
        Ok(EncoderParams {
            w1,
            b1,
            w2,
            b2,
            noise_std,
            temperature,
        })
    }
}

fn write_matrix(s: &mut String, name: &str, m: &DMatrix<f64>) {
    writeln!(s, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.row_iter() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", vals.join(" ")).unwrap();
    }
}

fn write_vector(s: &mut String, name: &str, v: &DVector<f64>) {
    writeln!(s, "{name} {}", v.len()).unwrap();
    let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    writeln!(s, "{}", vals.join(" ")).unwrap();
}

fn parse_row(line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    if vals.len() != expect {
        return Err(EncoderError::Checkpoint(format!("expected {expect} values, got {}", vals.len())));
    }
    Ok(vals)
}

fn read_matrix<'a>(lines: &mut impl Iterator<Item = &'a str>, name: &str) -> Result<DMatrix<f64>> {
    let head = lines.next().ok_or_else(|| EncoderError::Checkpoint(format!("missing {name}")))?;
    let dims: Vec<usize> = head
        .strip_prefix(name)
        .ok_or_else(|| EncoderError::Checkpoint(format!("expected {name}")))?
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    let [rows, cols] = dims[..] else {
        return Err(EncoderError::Checkpoint(format!("bad shape for {name}")));
    };
    let mut flat = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next().ok_or_else(|| EncoderError::Checkpoint("truncated".into()))?;
        flat.extend(parse_row(line, cols)?);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &flat))
}

fn read_vector<'a>(lines: &mut impl Iterator<Item = &'a str>, name: &str) -> Result<DVector<f64>> {
    let head = lines.next().ok_or_else(|| EncoderError::Checkpoint(format!("missing {name}")))?;
    let len: usize = head
        .strip_prefix(name)
        .and_then(|r| r.trim().parse().ok())
        .ok_or_else(|| EncoderError::Checkpoint(format!("bad shape for {name}")))?;
    let line = lines.next().unwrap_or("");
    Ok(DVector::from_vec(parse_row(line, len)?))
}

/// Returns `x + eps` with `eps ~ N(0, noise_std^2 I)`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], noise_std: f64, rng: &mut R) -> Vec<f64> {
    if noise_std == 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(0.0, noise_std).expect("noise_std must be finite and >= 0");
    x.iter().map(|v| v + normal.sample(rng)).collect()
}

/// Builds the `2N x input` view matrix for a batch of inputs.
pub fn make_views<R: Rng + ?Sized>(inputs: &[&[f64]], noise_std: f64, rng: &mut R) -> DMatrix<f64> {
    let n = inputs.len();
    let width = inputs.first().map_or(0, |x| x.len());
    let mut flat = Vec::with_capacity(2 * n * width);
    for x in inputs {
        flat.extend(augment(x, noise_std, rng));
    }
    for x in inputs {
        flat.extend(augment(x, noise_std, rng));
    }
    DMatrix::from_row_slice(2 * n, width, &flat)
}

fn positive_of(i: usize, n: usize) -> usize {
    if i < n {
        i + n
    } else {
        i - n
    }
}

/// InfoNCE loss over `2N` latent rows (rows `i`, `i + N` are positives).
pub fn infonce_loss(latents: &DMatrix<f64>, temperature: f64) -> Result<f64> {
    Ok(infonce_with_grad(latents, temperature)?.0)
}

/// InfoNCE loss and its gradient with respect to the latent rows.
pub fn infonce_with_grad(latents: &DMatrix<f64>, temperature: f64) -> Result<(f64, DMatrix<f64>)> {
    let m = latents.nrows();
    if m < 2 || !m.is_multiple_of(2) {
        return Err(EncoderError::BadBatch(m));
    }
    let n = m / 2;
    let norms: Vec<f64> = latents.row_iter().map(|r| r.norm()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(EncoderError::ZeroNorm(i));
    }
    let mut unit = latents.clone();
    for (i, mut row) in unit.row_iter_mut().enumerate() {
        row /= norms[i];
    }
    let sim = &unit * unit.transpose();

    // coef[i][k] = dL/dsim_ik contributed by anchor i.
    let mut coef = DMatrix::<f64>::zeros(m, m);
    let mut loss = 0.0;
    for i in 0..m {
        let p = positive_of(i, n);
        let mut max = f64::NEG_INFINITY;
        for k in (0..m).filter(|&k| k != i) {
            max = max.max(sim[(i, k)] / temperature);
        }
        let mut z = 0.0;
        for k in (0..m).filter(|&k| k != i) {
            z += (sim[(i, k)] / temperature - max).exp();
        }
        let log_z = max + z.ln();
        loss += log_z - sim[(i, p)] / temperature;
        for k in (0..m).filter(|&k| k != i) {
            let prob = (sim[(i, k)] / temperature - log_z).exp();
            let target = if k == p { 1.0 } else { 0.0 };
            coef[(i, k)] = (prob - target) / (temperature * m as f64);
        }
    }
    loss /= m as f64;

    let sym = &coef + coef.transpose();
    let d_unit = &sym * &unit;
    let mut d_latent = DMatrix::<f64>::zeros(m, latents.ncols());
    for (i, norm) in norms.iter().enumerate() {
        let g = d_unit.row(i);
        let u = unit.row(i);
        let radial = g.dot(&u);
        d_latent.set_row(i, &((g - u * radial) / *norm));
    }
    Ok((loss, d_latent))
}

/// Loss and exact gradient of InfoNCE through the encoder for a fixed view
/// matrix.
pub fn infonce_gradient(params: &EncoderParams, views: &DMatrix<f64>) -> Result<(f64, EncoderGradient)> {
    let fwd = params.forward_full(views);
    let (loss, d_latent) = infonce_with_grad(&fwd.latent, params.temperature)?;
    let w2 = d_latent.transpose() * &fwd.hidden;
    let b2 = DVector::from_iterator(d_latent.ncols(), d_latent.column_iter().map(|c| c.sum()));
    let mut d_pre = &d_latent * &params.w2;
    d_pre.zip_apply(&fwd.pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let w1 = d_pre.transpose() * views;
    let b1 = DVector::from_iterator(d_pre.ncols(), d_pre.column_iter().map(|c| c.sum()));
    Ok((loss, EncoderGradient { w1, b1, w2, b2 }))
}

/// Output of [`train_encoder`].
#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub params: EncoderParams,
    /// Mean batch loss per epoch.
    pub loss_history: Vec<f64>,
    /// One embedding per input row, computed without noise.
    pub embeddings: Vec<Vec<f64>>,
}

impl TrainedEncoder {
    /// True when the mean loss of the last `window` epochs is no higher
    /// than that of the first `window` epochs.
    pub fn loss_decreased(&self, window: usize) -> bool {
        let n = self.loss_history.len();
        if n == 0 || window == 0 {
            return true;
        }
        let w = window.min(n);
        let head: f64 = self.loss_history[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = self.loss_history[n - w..].iter().sum::<f64>() / w as f64;
        tail <= head
    }
}

/// Learning rate for `epoch`: halved after each third of the budget.
pub fn step_size(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    let third = (3 * epoch) / epochs;
    base * 0.5f64.powi(third.min(2) as i32)
}

/// Trains the encoder with plain gradient descent and returns the frozen
/// parameters with per-input embeddings.
pub fn train_encoder(features: &[Vec<f64>], config: &EncoderConfig) -> Result<TrainedEncoder> {
    if features.is_empty() {
        return Err(EncoderError::Empty);
    }
    let input = features[0].len();
    let mut params = EncoderParams::init(
        input,
        config.hidden,
        config.latent,
        config.noise_std,
        config.temperature,
        crate::derive_seed(config.seed, "encoder-init"),
    )?;
    let mut rng = seeded_rng(crate::derive_seed(config.seed, "encoder-train"));
    let batch = config.batch.max(1).min(features.len());
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut last_finite = None;

    for epoch in 0..config.epochs {
        let lr = step_size(config.learning_rate, epoch, config.epochs);
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            if chunk.len() < 2 && features.len() >= 2 {
                continue;
            }
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| features[i].as_slice()).collect();
            let views = make_views(&inputs, config.noise_std, &mut rng);
            let (loss, grad) = infonce_gradient(&params, &views)?;
            let grad_norm = grad.norm();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(EncoderError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                    last_finite,
                    grad_norm,
                });
            }
            last_finite = Some(loss);
            params.w1 -= lr * grad.w1;
            params.b1 -= lr * grad.b1;
            params.w2 -= lr * grad.w2;
            params.b2 -= lr * grad.b2;
            epoch_loss += loss;
            batches += 1;
        }
        loss_history.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }

    let embeddings = embed(&params, features);
    Ok(TrainedEncoder {
        params,
        loss_history,
        embeddings,
    })
}

/// Noise-free latent vectors for every input row.
pub fn embed(params: &EncoderParams, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if features.is_empty() {
        return Vec::new();
    }
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    let inputs = DMatrix::from_row_slice(features.len(), features[0].len(), &flat);
    let latent = params.forward(&inputs);
    latent.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Cosine similarity of two vectors (0 when either is zero).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
