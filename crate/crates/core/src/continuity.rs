//! Null-referenced continuity metrics over ID coordinate spaces.
//!
//! NICC compares each class's mean distance to its centroid against the
//! same statistic for equally many uniform lattice points. NICS compares
//! the mean pairwise distance between class centroids against that of
//! uniformly placed points. Both nulls are Monte Carlo estimates; ratios
//! below 1 (NICC) or above 1 (NICS) indicate structure.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{derive_seed, seeded_rng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ContinuityError {
    #[error("empty class")]
    EmptyClass,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("need at least 100 null samples, got {0}")]
    TooFewSamples(usize),
    #[error("point width {got} does not match space width {want}")]
    Width { got: usize, want: usize },
    #[error("invalid id space `{0}`")]
    BadSpace(String),
}

pub type Result<T> = std::result::Result<T, ContinuityError>;

/// Integer lattice `prod_i {0, .., axes[i]-1}`, scaled by `spacing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSpace {
    pub axes: Vec<usize>,
    pub spacing: f64,
}

impl IdSpace {
    /// `n` consecutive integer IDs `0..n`.
    pub fn linear(n: usize) -> Result<Self> {
        Self::new(vec![n])
    }

    pub fn grid(height: usize, width: usize) -> Result<Self> {
        Self::new(vec![height, width])
    }

    /// Concatenated coordinates of several grids, `(r1, c1, r2, c2, ...)`.
    pub fn grids(grids: &[(usize, usize)]) -> Result<Self> {
        Self::new(grids.iter().flat_map(|&(h, w)| [h, w]).collect())
    }

    fn new(axes: Vec<usize>) -> Result<Self> {
        if axes.is_empty() || axes.contains(&0) {
            return Err(ContinuityError::BadSpace(format!("{axes:?}")));
        }
        Ok(IdSpace { axes, spacing: 1.0 })
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.spacing *= c;
        self
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Parses `linear:N`, `grid:HxW` or `grids:HxW,HxW,...`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || ContinuityError::BadSpace(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let dims = |g: &str| -> Result<(usize, usize)> {
            let (h, w) = g.trim().split_once(['x', 'X']).ok_or_else(bad)?;
            Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
        };
        match kind {
            "linear" => Self::linear(rest.trim().parse().map_err(|_| bad())?),
            "grid" => {
                let (h, w) = dims(rest)?;
                Self::grid(h, w)
            }
            "grids" => Self::grids(&rest.split(',').map(dims).collect::<Result<Vec<_>>>()?),
            _ => Err(bad()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.axes
            .iter()
            .map(|&n| rng.random_range(0..n) as f64 * self.spacing)
            .collect()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn centroid(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = points.first().ok_or(ContinuityError::EmptyClass)?;
    let mut c = vec![0.0; first.len()];
    for p in points {
        for (a, v) in c.iter_mut().zip(p) {
            *a += v;
        }
    }
    for a in &mut c {
        *a /= points.len() as f64;
    }
    Ok(c)
}

/// Mean Euclidean distance of the points to their centroid.
pub fn intra_class_dispersion(points: &[Vec<f64>]) -> Result<f64> {
    let c = centroid(points)?;
    Ok(points.iter().map(|p| dist(p, &c)).sum::<f64>() / points.len() as f64)
}

/// Mean pairwise distance between points (0 for fewer than two).
pub fn mean_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += dist(&points[i], &points[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Expected dispersion of `size` uniform lattice points.
pub fn null_dispersion(space: &IdSpace, size: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(derive_seed(seed, &format!("nicc-null-{size}")));
    let mut total = 0.0;
    for _ in 0..samples {
        let pts: Vec<Vec<f64>> = (0..size).map(|_| space.sample(&mut rng)).collect();
        total += intra_class_dispersion(&pts).expect("size >= 1");
    }
    total / samples as f64
}

/// Expected mean pairwise distance of `count` uniform lattice points.
pub fn null_separation(space: &IdSpace, count: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(derive_seed(seed, &format!("nics-null-{count}")));
    let mut total = 0.0;
    for _ in 0..samples {
        let pts: Vec<Vec<f64>> = (0..count).map(|_| space.sample(&mut rng)).collect();
        total += mean_pairwise_distance(&pts);
    }
    total / samples as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub size: usize,
    pub centroid: Vec<f64>,
    pub sigma_c: f64,
    pub sigma_random: Option<f64>,
    /// `None` for classes of size 1.
    pub nicc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub per_category: BTreeMap<String, ClassStats>,
    /// Unweighted mean of per-class NICC over classes of size >= 2.
    pub global_avg_nicc: f64,
    pub delta_inter: f64,
    pub delta_random: f64,
    pub global_avg_nics: f64,
    /// Classes left out of the NICC average.
    pub excluded: Vec<String>,
    pub null_samples: usize,
    pub seed: u64,
}

impl ContinuityReport {
    /// `category,size,sigma_c,sigma_random,nicc`, one row per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,size,sigma_c,sigma_random,nicc\n");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for (cat, s) in &self.per_category {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([
                cat.as_str(),
                &s.size.to_string(),
                &s.sigma_c.to_string(),
                &opt(s.sigma_random),
                &opt(s.nicc),
            ])
            .expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8"));
        out
    }

    /// Categories ranked by size (largest first, ties by name), truncated.
    pub fn top_categories(&self, k: usize) -> Vec<(&str, &ClassStats)> {
        let mut v: Vec<(&str, &ClassStats)> = self.per_category.iter().map(|(c, s)| (c.as_str(), s)).collect();
        v.sort_by(|a, b| b.1.size.cmp(&a.1.size).then(a.0.cmp(b.0)));
        v.truncate(k);
        v
    }
}

fn group(
    assignments: &BTreeMap<String, Vec<f64>>,
    categories: &BTreeMap<String, String>,
    space: &IdSpace,
) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    let mut classes: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (poi, coords) in assignments {
        if coords.len() != space.dim() {
            return Err(ContinuityError::Width {
                got: coords.len(),
                want: space.dim(),
            });
        }
        if let Some(cat) = categories.get(poi) {
            classes.entry(cat.clone()).or_default().push(coords.clone());
        }
    }
    Ok(classes)
}

/// Computes both metrics. POIs without a category are ignored.
pub fn evaluate(
    assignments: &BTreeMap<String, Vec<f64>>,
    categories: &BTreeMap<String, String>,
    space: &IdSpace,
    samples: usize,
    seed: u64,
) -> Result<ContinuityReport> {
    if samples < 100 {
        return Err(ContinuityError::TooFewSamples(samples));
    }
    let classes = group(assignments, categories, space)?;
    if classes.len() < 2 {
        return Err(ContinuityError::TooFewClasses(classes.len()));
    }
    let mut null_cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut per_category = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut ratios = Vec::new();
    let mut centroids = Vec::new();
    for (cat, pts) in &classes {
        let c = centroid(pts)?;
        let sigma_c = intra_class_dispersion(pts)?;
        let (sigma_random, ratio) = if pts.len() < 2 {
            excluded.push(cat.clone());
            (None, None)
        } else {
            let sr = *null_cache
                .entry(pts.len())
                .or_insert_with(|| null_dispersion(space, pts.len(), samples, seed));
            let r = if sr > 0.0 { sigma_c / sr } else { f64::NAN };
            ratios.push(r);
            (Some(sr), Some(r))
        };
        centroids.push(c.clone());
        per_category.insert(
            cat.clone(),
            ClassStats {
                size: pts.len(),
                centroid: c,
                sigma_c,
                sigma_random,
                nicc: ratio,
            },
        );
    }
    let global_avg_nicc = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let delta_inter = mean_pairwise_distance(&centroids);
    let delta_random = null_separation(space, centroids.len(), samples, seed);
    Ok(ContinuityReport {
        per_category,
        global_avg_nicc,
        delta_inter,
        delta_random,
        global_avg_nics: delta_inter / delta_random,
        excluded,
        null_samples: samples,
        seed,
    })
}

/// Global NICC and the per-class ratios.
pub fn nicc(
    assignments: &BTreeMap<String, Vec<f64>>,
    categories: &BTreeMap<String, String>,
    space: &IdSpace,
    samples: usize,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Option<f64>>)> {
    let r = evaluate(assignments, categories, space, samples, seed)?;
    let per = r.per_category.into_iter().map(|(c, s)| (c, s.nicc)).collect();
    Ok((r.global_avg_nicc, per))
}

/// Global NICS.
pub fn nics(
    assignments: &BTreeMap<String, Vec<f64>>,
    categories: &BTreeMap<String, String>,
    space: &IdSpace,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(evaluate(assignments, categories, space, samples, seed)?.global_avg_nics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_assignments(
        space: &IdSpace,
        classes: usize,
        per_class: usize,
        seed: u64,
    ) -> (BTreeMap<String, Vec<f64>>, BTreeMap<String, String>) {
        let mut rng = seeded_rng(seed);
        let mut a = BTreeMap::new();
        let mut c = BTreeMap::new();
        for k in 0..classes * per_class {
            let poi = format!("p{k:05}");
            a.insert(poi.clone(), space.sample(&mut rng));
            c.insert(poi, format!("c{}", k % classes));
        }
        (a, c)
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(intra_class_dispersion(&vec![vec![2.0, 3.0]; 5]).unwrap(), 0.0);
        assert_eq!(intra_class_dispersion(&[vec![0.0, 0.0], vec![0.0, 2.0]]).unwrap(), 1.0);
        assert_eq!(intra_class_dispersion(&[]), Err(ContinuityError::EmptyClass));
    }

    #[test]
    fn dispersion_matches_two_pass() {
        let mut rng = seeded_rng(3);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(0.0..9.0)]).collect();
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / 50.0;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / 50.0;
        let want = pts.iter().map(|p| ((p[0] - mx).powi(2) + (p[1] - my).powi(2)).sqrt()).sum::<f64>() / 50.0;
        assert!((intra_class_dispersion(&pts).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn collapsed_class_has_zero_nicc_and_singletons_are_excluded() {
        let mut a = BTreeMap::new();
        let mut c = BTreeMap::new();
        for (i, coords) in [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [0.0, 5.0], [3.0, 0.0]].iter().enumerate() {
            a.insert(format!("p{i}"), coords.to_vec());
        }
        for (p, cat) in [("p0", "x"), ("p1", "x"), ("p2", "x"), ("p3", "y"), ("p4", "z")] {
            c.insert(p.to_string(), cat.to_string());
        }
        let space = IdSpace::grid(4, 6).unwrap();
        let report = evaluate(&a, &c, &space, 200, 0).unwrap();
        assert_eq!(report.per_category["x"].nicc, Some(0.0));
        assert_eq!(report.per_category["y"].nicc, None);
        assert_eq!(report.excluded, vec!["y".to_string(), "z".to_string()]);
        assert_eq!(report.global_avg_nicc, 0.0);
    }

    #[test]
    fn uniform_assignments_have_unit_nicc() {
        let space = IdSpace::grid(4, 6).unwrap();
        let (a, c) = uniform_assignments(&space, 8, 20, 11);
        let (global, _) = nicc(&a, &c, &space, 10_000, 4).unwrap();
        assert!((0.9..=1.1).contains(&global), "{global}");
    }

    #[test]
    fn identical_centroids_have_zero_nics() {
        let mut a = BTreeMap::new();
        let mut c = BTreeMap::new();
        for (i, (coords, cat)) in [([0.0, 0.0], "x"), ([2.0, 2.0], "x"), ([0.0, 2.0], "y"), ([2.0, 0.0], "y")].iter().enumerate() {
            a.insert(format!("p{i}"), coords.to_vec());
            c.insert(format!("p{i}"), cat.to_string());
        }
        let space = IdSpace::grid(4, 4).unwrap();
        assert_eq!(nics(&a, &c, &space, 100, 0).unwrap(), 0.0);
    }

    #[test]
    fn random_nics_matches_independent_simulation() {
        let space = IdSpace::grid(8, 8).unwrap();
        let (a, c) = uniform_assignments(&space, 6, 15, 2);
        let s = nics(&a, &c, &space, 2000, 9).unwrap();
        assert!(s < 1.0, "{s}");

        // Oracle: recompute class centroids and a fresh null by hand.
        let mut sums: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
        for (p, xy) in &a {
            let e = sums.entry(c[p].as_str()).or_default();
            e.0 += xy[0];
            e.1 += xy[1];
            e.2 += 1.0;
        }
        let cents: Vec<(f64, f64)> = sums.values().map(|&(x, y, n)| (x / n, y / n)).collect();
        let pair_mean = |pts: &[(f64, f64)]| {
            let mut t = 0.0;
            let mut n = 0.0;
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    t += ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                    n += 1.0;
                }
            }
            t / n
        };
        let mut rng = seeded_rng(12345);
        let mut null = 0.0;
        for _ in 0..20_000 {
            let pts: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0..8) as f64, rng.random_range(0..8) as f64)).collect();
            null += pair_mean(&pts) / 20_000.0;
        }
        let want = pair_mean(&cents) / null;
        assert!((s / want - 1.0).abs() < 0.05, "{s} vs {want}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let space = IdSpace::grid(2, 2).unwrap();
        let (a, c) = uniform_assignments(&space, 1, 5, 0);
        assert_eq!(evaluate(&a, &c, &space, 100, 0).unwrap_err(), ContinuityError::TooFewClasses(1));
        let (a, c) = uniform_assignments(&space, 2, 5, 0);
        assert_eq!(evaluate(&a, &c, &space, 99, 0).unwrap_err(), ContinuityError::TooFewSamples(99));
        assert!(IdSpace::grid(0, 3).is_err());
        let line = IdSpace::linear(10).unwrap();
        assert!(evaluate(&a, &c, &line, 100, 0).is_err());
    }

    #[test]
    fn scaling_coordinates_and_space_keeps_ratios() {
        let space = IdSpace::grid(6, 6).unwrap();
        let (a, c) = uniform_assignments(&space, 4, 10, 5);
        let base = evaluate(&a, &c, &space, 4000, 1).unwrap();
        let scaled_a: BTreeMap<String, Vec<f64>> = a.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x * 3.5).collect())).collect();
        let scaled = evaluate(&scaled_a, &c, &space.clone().scaled(3.5), 4000, 1).unwrap();
        assert!((base.global_avg_nicc - scaled.global_avg_nicc).abs() < 1e-9);
        assert!((base.global_avg_nics - scaled.global_avg_nics).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_report() {
        let space = IdSpace::parse("grids:4x6,4x6").unwrap();
        assert_eq!(space.axes, vec![4, 6, 4, 6]);
        let (a, c) = uniform_assignments(&space, 3, 6, 8);
        let r1 = evaluate(&a, &c, &space, 300, 2).unwrap();
        let r2 = evaluate(&a, &c, &space, 300, 2).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.to_csv().starts_with("category,size,sigma_c,sigma_random,nicc\nc0,6,"));
        assert_eq!(r1.top_categories(2).len(), 2);
        assert_eq!(IdSpace::parse("linear:50").unwrap().axes, vec![50]);
        assert!(IdSpace::parse("cube:3").is_err());
    }
}
