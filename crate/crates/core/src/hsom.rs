//! Residual hierarchical self-organizing map.
//!
//! Layer `l` is a 2D grid of prototypes trained on the residuals left by the
//! frozen layers `1..l`. Quantizing an embedding walks the layers in order,
//! picks the best-matching unit (BMU) at each, and subtracts its prototype.
//! The sequence of BMU grid coordinates is the semantic ID.
//!
//! Coordinates are 0-based `(row, col)`; layer indices are 1-based.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{derive_seed, seeded_rng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HsomError {
    #[error("layer {0} is frozen")]
    Frozen(usize),
    #[error("layer {0} is not frozen")]
    NotFrozen(usize),
    #[error("empty residual sample or batch")]
    Empty,
    #[error("neighbourhood width must be > 0, got {0}")]
    BadSigma(f64),
    #[error("grid must be at least 1x1, got {0}x{1}")]
    BadGrid(usize, usize),
    #[error("at most 26 layers can be rendered, got {0}")]
    TooManyLayers(usize),
    #[error("vector width {got} does not match layer width {want}")]
    Width { got: usize, want: usize },
    #[error("cannot parse `{0}`")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, HsomError>;

/// One grid coordinate on one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Code {
    /// 1-based.
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SomLayer {
    pub height: usize,
    pub width: usize,
    /// Row-major, one prototype per node.
    pub prototypes: Vec<Vec<f64>>,
    pub frozen: bool,
}

impl SomLayer {
    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn coord(&self, k: usize) -> (usize, usize) {
        (k / self.width, k % self.width)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn prototype(&self, row: usize, col: usize) -> &[f64] {
        &self.prototypes[self.index(row, col)]
    }

    /// SHA-256 over the grid shape and the exact prototype bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for w in &self.prototypes {
            for v in w {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Prototypes drawn as `mean(sample) + scale * N(0, I)`.
pub fn init_layer<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    residual_sample: &[Vec<f64>],
    scale: f64,
    rng: &mut R,
) -> Result<SomLayer> {
    if height == 0 || width == 0 {
        return Err(HsomError::BadGrid(height, width));
    }
    let first = residual_sample.first().ok_or(HsomError::Empty)?;
    let d = first.len();
    let mut mean = vec![0.0; d];
    for r in residual_sample {
        if r.len() != d {
            return Err(HsomError::Width { got: r.len(), want: d });
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= residual_sample.len() as f64;
    }
    let prototypes = (0..height * width)
        .map(|_| {
            mean.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + scale * z
                })
                .collect()
        })
        .collect();
    Ok(SomLayer {
        height,
        width,
        prototypes,
        frozen: false,
    })
}

/// Nearest node by Euclidean distance; ties go to the smallest row-major index.
pub fn find_bmu(layer: &SomLayer, r: &[f64]) -> (usize, usize) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, w) in layer.prototypes.iter().enumerate() {
        let d = sq_dist(r, w);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    layer.coord(best)
}

/// Gaussian weight of node `u` around `bmu` on the integer grid.
pub fn neighborhood(u: (usize, usize), bmu: (usize, usize), sigma: f64) -> Result<f64> {
    if sigma <= 0.0 || sigma.is_nan() {
        return Err(HsomError::BadSigma(sigma));
    }
    let dr = u.0 as f64 - bmu.0 as f64;
    let dc = u.1 as f64 - bmu.1 as f64;
    Ok((-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp())
}

/// One batch step. BMUs are found against the prototypes as they were on
/// entry; a node with zero total neighbourhood weight (and `eps == 0`)
/// does not move. Returns the largest prototype displacement.
pub fn batch_update(layer: &mut SomLayer, batch: &[Vec<f64>], sigma: f64, eta: f64, eps: f64) -> Result<f64> {
    if layer.frozen {
        return Err(HsomError::Frozen(0));
    }
    if batch.is_empty() {
        return Err(HsomError::Empty);
    }
    if sigma <= 0.0 || sigma.is_nan() {
        return Err(HsomError::BadSigma(sigma));
    }
    let d = layer.dim();
    // Per-BMU item count and residual sum, in batch order.
    let mut counts = vec![0usize; layer.nodes()];
    let mut sums = vec![vec![0.0; d]; layer.nodes()];
    for r in batch {
        if r.len() != d {
            return Err(HsomError::Width { got: r.len(), want: d });
        }
        let (row, col) = find_bmu(layer, r);
        let b = layer.index(row, col);
        counts[b] += 1;
        for (s, v) in sums[b].iter_mut().zip(r) {
            *s += v;
        }
    }
    let populated: Vec<usize> = (0..layer.nodes()).filter(|&b| counts[b] > 0).collect();

    let mut moved = 0.0f64;
    let mut updated = layer.prototypes.clone();
    for (k, new_w) in updated.iter_mut().enumerate() {
        let uk = layer.coord(k);
        let w = &layer.prototypes[k];
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for &b in &populated {
            let h = neighborhood(uk, layer.coord(b), sigma)?;
            if h == 0.0 {
                continue;
            }
            let c = counts[b] as f64;
            for j in 0..d {
                num[j] += h * (sums[b][j] - c * w[j]);
            }
            den += h * c;
        }
        den += eps;
        if den == 0.0 {
            continue;
        }
        let mut step2 = 0.0;
        for j in 0..d {
            let delta = eta * num[j] / den;
            new_w[j] = w[j] + delta;
            step2 += delta * delta;
        }
        moved = moved.max(step2.sqrt());
    }
    layer.prototypes = updated;
    Ok(moved)
}

/// Mean distance from each residual to its BMU prototype.
pub fn quantization_error(layer: &SomLayer, residuals: &[Vec<f64>]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let total: f64 = residuals
        .iter()
        .map(|r| {
            let (row, col) = find_bmu(layer, r);
            sq_dist(r, layer.prototype(row, col)).sqrt()
        })
        .sum();
    total / residuals.len() as f64
}

/// Epoch budget and decay schedules for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Starting neighbourhood width; `None` means `max(height, width) / 2`.
    pub sigma_start: Option<f64>,
    pub sigma_end: f64,
    pub eta_start: f64,
    pub eta_end: f64,
    pub eps: f64,
    /// Stop early once no prototype moves farther than this in an epoch.
    pub movement_tol: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 50,
            batch_size: 256,
            sigma_start: None,
            sigma_end: 0.5,
            eta_start: 0.5,
            eta_end: 0.01,
            eps: 1e-9,
            movement_tol: None,
        }
    }
}

impl Schedule {
    fn sigma0(&self, layer: &SomLayer) -> f64 {
        self.sigma_start
            .unwrap_or(layer.height.max(layer.width) as f64 / 2.0)
            .max(self.sigma_end)
    }

    /// Exponential decay from the start width to `sigma_end`.
    pub fn sigma(&self, layer: &SomLayer, epoch: usize) -> f64 {
        let s0 = self.sigma0(layer);
        if self.epochs <= 1 {
            return s0;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        s0 * (self.sigma_end / s0).powf(t)
    }

    /// Linear decay from `eta_start` to `eta_end`.
    pub fn eta(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.eta_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.eta_start + (self.eta_end - self.eta_start) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub initial_qe: f64,
    pub final_qe: f64,
    pub epochs_run: usize,
}

/// Runs the schedule on `layer` over `residuals` and freezes it.
pub fn train_layer<R: Rng + ?Sized>(
    layer: &mut SomLayer,
    residuals: &[Vec<f64>],
    schedule: &Schedule,
    rng: &mut R,
) -> Result<LayerReport> {
    if layer.frozen {
        return Err(HsomError::Frozen(0));
    }
    if residuals.is_empty() {
        return Err(HsomError::Empty);
    }
    let initial_qe = quantization_error(layer, residuals);
    let batch_size = schedule.batch_size.max(1);
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    let mut epochs_run = 0;
    for epoch in 0..schedule.epochs {
        let sigma = schedule.sigma(layer, epoch);
        let eta = schedule.eta(epoch);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut moved = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| residuals[i].clone()).collect();
            moved = moved.max(batch_update(layer, &batch, sigma, eta, schedule.eps)?);
        }
        epochs_run += 1;
        if schedule.movement_tol.is_some_and(|tol| moved < tol) {
            break;
        }
    }
    layer.frozen = true;
    Ok(LayerReport {
        layer: 0,
        initial_qe,
        final_qe: quantization_error(layer, residuals),
        epochs_run,
    })
}

/// Sequence of residuals `r^0 .. r^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub residuals: Vec<Vec<f64>>,
}

impl ResidualTrace {
    pub fn last(&self) -> &[f64] {
        self.residuals.last().expect("trace holds r^0")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SemanticId {
    pub codes: Vec<Code>,
    pub disambiguator: u32,
}

impl SemanticId {
    pub fn render(&self) -> Result<String> {
        render_sid(&self.codes, self.disambiguator)
    }
}

/// `<A_r_c><B_r_c>...`, plus `<Z#n>` when `disambiguator > 0`.
pub fn render_sid(codes: &[Code], disambiguator: u32) -> Result<String> {
    if codes.len() > 26 {
        return Err(HsomError::TooManyLayers(codes.len()));
    }
    let mut s = String::new();
    for c in codes {
        if c.layer == 0 || c.layer > 26 {
            return Err(HsomError::TooManyLayers(c.layer));
        }
        let letter = (b'A' + (c.layer - 1) as u8) as char;
        write!(s, "<{letter}_{}_{}>", c.row, c.col).unwrap();
    }
    if disambiguator > 0 {
        write!(s, "<Z#{disambiguator}>").unwrap();
    }
    Ok(s)
}

/// Inverse of [`render_sid`].
pub fn parse_sid(s: &str) -> Result<SemanticId> {
    let bad = || HsomError::Parse(s.to_string());
    let mut codes = Vec::new();
    let mut disambiguator = 0;
    let mut rest = s;
    while !rest.is_empty() {
        let body = rest.strip_prefix('<').ok_or_else(bad)?;
        let end = body.find('>').ok_or_else(bad)?;
        let token = &body[..end];
        rest = &body[end + 1..];
        if let Some(n) = token.strip_prefix("Z#") {
            if !rest.is_empty() || n.is_empty() || !n.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            disambiguator = n.parse().map_err(|_| bad())?;
            if disambiguator == 0 {
                return Err(bad());
            }
            continue;
        }
        let mut parts = token.split('_');
        let (Some(l), Some(r), Some(c), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let letter = l.as_bytes();
        if letter.len() != 1 || !letter[0].is_ascii_uppercase() {
            return Err(bad());
        }
        let layer = (letter[0] - b'A') as usize + 1;
        if layer != codes.len() + 1 {
            return Err(bad());
        }
        let num = |t: &str| {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
                Err(bad())
            } else {
                t.parse::<usize>().map_err(|_| bad())
            }
        };
        codes.push(Code {
            layer,
            row: num(r)?,
            col: num(c)?,
        });
    }
    Ok(SemanticId { codes, disambiguator })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HsomModel {
    pub layers: Vec<SomLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsomConfig {
    pub grids: Vec<(usize, usize)>,
    pub schedule: Schedule,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for HsomConfig {
    fn default() -> Self {
        HsomConfig {
            grids: vec![(4, 6), (4, 6), (8, 8), (8, 8)],
            schedule: Schedule::default(),
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// Parses `4x6,4x6,8x8`.
pub fn parse_grids(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|g| {
            let (h, w) = g.trim().split_once(['x', 'X']).ok_or_else(|| HsomError::Parse(g.into()))?;
            let h: usize = h.parse().map_err(|_| HsomError::Parse(g.into()))?;
            let w: usize = w.parse().map_err(|_| HsomError::Parse(g.into()))?;
            if h == 0 || w == 0 {
                return Err(HsomError::BadGrid(h, w));
            }
            Ok((h, w))
        })
        .collect()
}

impl HsomModel {
    /// Trains every layer in order on the residuals of the frozen layers
    /// before it.
    pub fn train(embeddings: &[Vec<f64>], config: &HsomConfig) -> Result<(Self, Vec<LayerReport>)> {
        if embeddings.is_empty() {
            return Err(HsomError::Empty);
        }
        if config.grids.len() > 26 {
            return Err(HsomError::TooManyLayers(config.grids.len()));
        }
        let mut model = HsomModel { layers: Vec::new() };
        let mut residuals = embeddings.to_vec();
        let mut reports = Vec::new();
        for (l, &(h, w)) in config.grids.iter().enumerate() {
            let mut init_rng = seeded_rng(derive_seed(config.seed, &format!("hsom-init-{l}")));
            let mut layer = init_layer(h, w, &residuals, config.init_scale, &mut init_rng)?;
            let mut train_rng = seeded_rng(derive_seed(config.seed, &format!("hsom-train-{l}")));
            let mut report = train_layer(&mut layer, &residuals, &config.schedule, &mut train_rng)?;
            report.layer = l + 1;
            for r in &mut residuals {
                let (row, col) = find_bmu(&layer, r);
                for (x, p) in r.iter_mut().zip(layer.prototype(row, col)) {
                    *x -= p;
                }
            }
            model.layers.push(layer);
            reports.push(report);
        }
        Ok((model, reports))
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Codes and residual trace of one embedding.
    pub fn quantize(&self, embedding: &[f64]) -> Result<(Vec<Code>, ResidualTrace)> {
        let mut residuals = vec![embedding.to_vec()];
        let mut codes = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if !layer.frozen {
                return Err(HsomError::NotFrozen(l + 1));
            }
            if layer.dim() != embedding.len() {
                return Err(HsomError::Width {
                    got: embedding.len(),
                    want: layer.dim(),
                });
            }
            let r = residuals.last().expect("nonempty");
            let (row, col) = find_bmu(layer, r);
            let next: Vec<f64> = r.iter().zip(layer.prototype(row, col)).map(|(a, b)| a - b).collect();
            codes.push(Code { layer: l + 1, row, col });
            residuals.push(next);
        }
        Ok((codes, ResidualTrace { residuals }))
    }

    /// Quantizes every POI; identical code sequences are told apart by
    /// disambiguators 0, 1, 2, ... in ascending POI id order.
    pub fn assign_sids<'a, I>(&self, embeddings: I) -> Result<BTreeMap<String, SemanticId>>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let mut sorted: Vec<(&str, &[f64])> = embeddings.into_iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        let mut seen: BTreeMap<Vec<Code>, u32> = BTreeMap::new();
        let mut out = BTreeMap::new();
        for (poi, e) in sorted {
            let (codes, _) = self.quantize(e)?;
            let slot = seen.entry(codes.clone()).or_insert(0);
            out.insert(
                poi.to_string(),
                SemanticId {
                    codes,
                    disambiguator: *slot,
                },
            );
            *slot += 1;
        }
        Ok(out)
    }

    /// Text checkpoint: per layer its grid shape, width, frozen flag and
    /// one prototype per line in row-major order.
    pub fn to_text(&self) -> String {
        let mut s = format!("sidforge-hsom v1\nlayers {}\n", self.layers.len());
        for layer in &self.layers {
            writeln!(s, "layer {} {} {} {}", layer.height, layer.width, layer.dim(), u8::from(layer.frozen)).unwrap();
            for w in &layer.prototypes {
                let vals: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                writeln!(s, "{}", vals.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| HsomError::Parse(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("sidforge-hsom v1") {
            return Err(bad("missing header"));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("layers "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad("layer count"))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let head: Vec<usize> = lines
                .next()
                .and_then(|l| l.strip_prefix("layer "))
                .ok_or_else(|| bad("layer header"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("layer header")))
                .collect::<Result<_>>()?;
            let [h, w, d, frozen] = head[..] else {
                return Err(bad("layer header"));
            };
            let mut prototypes = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                let row: Vec<f64> = lines
                    .next()
                    .ok_or_else(|| bad("truncated"))?
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad("prototype value")))
                    .collect::<Result<_>>()?;
                if row.len() != d {
                    return Err(bad("prototype width"));
                }
                prototypes.push(row);
            }
            layers.push(SomLayer {
                height: h,
                width: w,
                prototypes,
                frozen: frozen == 1,
            });
        }
        Ok(HsomModel { layers })
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// One line of the SID table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidEntry {
    pub poi: String,
    pub sid: String,
    /// `[layer, row, col]` triples.
    pub codes: Vec<[usize; 3]>,
    pub disambiguator: u32,
}

impl SidEntry {
    pub fn new(poi: &str, id: &SemanticId) -> Result<Self> {
        Ok(SidEntry {
            poi: poi.to_string(),
            sid: id.render()?,
            codes: id.codes.iter().map(|c| [c.layer, c.row, c.col]).collect(),
            disambiguator: id.disambiguator,
        })
    }

    pub fn semantic_id(&self) -> SemanticId {
        SemanticId {
            codes: self
                .codes
                .iter()
                .map(|&[layer, row, col]| Code { layer, row, col })
                .collect(),
            disambiguator: self.disambiguator,
        }
    }
}

/// Mean Euclidean grid distance over all same-label pairs.
pub fn mean_intra_distance(coords: &[(usize, usize)], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            if labels[i] == labels[j] {
                let dr = coords[i].0 as f64 - coords[j].0 as f64;
                let dc = coords[i].1 as f64 - coords[j].1 as f64;
                total += (dr * dr + dc * dc).sqrt();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Permutation test of grid locality: shuffles which item holds which BMU
/// coordinate and counts shuffles whose intra-label distance is at most the
/// observed one. Returns `(observed, p)` with `p = (1 + count) / (1 + perms)`.
pub fn topology_permutation_test<R: Rng + ?Sized>(
    coords: &[(usize, usize)],
    labels: &[usize],
    perms: usize,
    rng: &mut R,
) -> (f64, f64) {
    let observed = mean_intra_distance(coords, labels);
    let mut shuffled = coords.to_vec();
    let mut at_most = 0;
    for _ in 0..perms {
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        if mean_intra_distance(&shuffled, labels) <= observed {
            at_most += 1;
        }
    }
    (observed, (1 + at_most) as f64 / (1 + perms) as f64)
}

/// Mean norm of the final residual over a corpus, and of the inputs.
pub fn residual_contraction(model: &HsomModel, embeddings: &[Vec<f64>]) -> Result<(f64, f64)> {
    let mut before = 0.0;
    let mut after = 0.0;
    for e in embeddings {
        let (_, trace) = model.quantize(e)?;
        before += norm(e);
        after += norm(trace.last());
    }
    let n = embeddings.len().max(1) as f64;
    Ok((before / n, after / n))
}
