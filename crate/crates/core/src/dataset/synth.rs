//! Seeded synthetic check-in corpora with planted cluster structure.
//!
//! Every POI belongs to one of `clusters` groups. A cluster fixes the POI
//! category, a geographic neighbourhood and a preferred hour of day; each
//! user has a home cluster they visit most of the time. The returned ledger
//! records the planted cluster of every POI so tests can score recovered
//! structure against ground truth.

use std::collections::BTreeMap;

use rand::Rng;

use super::{CheckinRecord, DAY, HOUR};
use crate::seeded_rng;

/// 2012-04-01T00:00:00Z, the start of the Foursquare collection window.
pub const EPOCH_START: i64 = 1_333_238_400;

const CATEGORY_NAMES: [&str; 12] = [
    "Coffee Shop",
    "Park",
    "Gym",
    "Office",
    "Bar",
    "Museum",
    "Train Station",
    "Bakery",
    "Bookstore",
    "Stadium",
    "University",
    "Hospital",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clusters: usize,
    pub users: usize,
    pub pois: usize,
    pub days: u32,
    /// Probability that a check-in goes to the user's home cluster.
    pub home_affinity: f64,
    /// Probability that a user is active on a given day.
    pub active_prob: f64,
    pub min_daily: usize,
    pub max_daily: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clusters: 4,
            users: 60,
            pois: 120,
            days: 90,
            home_affinity: 0.85,
            active_prob: 0.8,
            min_daily: 2,
            max_daily: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<CheckinRecord>,
    /// Planted cluster index of every POI.
    pub poi_cluster: BTreeMap<String, usize>,
    /// Home cluster of every user.
    pub user_cluster: BTreeMap<String, usize>,
    /// Number of records the generator emitted.
    pub emitted: usize,
}

impl SynthCorpus {
    /// POIs grouped by planted cluster.
    pub fn clusters(&self) -> Vec<Vec<String>> {
        let n = self.poi_cluster.values().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); n];
        for (poi, &c) in &self.poi_cluster {
            groups[c].push(poi.clone());
        }
        groups
    }
}

pub fn category_name(cluster: usize) -> String {
    let base = CATEGORY_NAMES[cluster % CATEGORY_NAMES.len()];
    let round = cluster / CATEGORY_NAMES.len();
    if round == 0 {
        base.to_string()
    } else {
        format!("{base} {round}")
    }
}

fn cluster_center(cluster: usize) -> (f64, f64) {
    (40.55 + 0.1 * (cluster % 4) as f64, -74.10 + 0.1 * (cluster / 4) as f64)
}

fn peak_hour(cluster: usize) -> i64 {
    ((8 + 4 * cluster) % 24) as i64
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

struct PoiSite {
    id: String,
    lat: f64,
    lon: f64,
}

/// Generates a corpus. Output is a pure function of the config.
pub fn generate(config: &SynthConfig) -> SynthCorpus {
    let clusters = config.clusters.max(1);
    let mut rng = seeded_rng(config.seed);

    let mut sites: Vec<Vec<PoiSite>> = (0..clusters).map(|_| Vec::new()).collect();
    let mut poi_cluster = BTreeMap::new();
    for p in 0..config.pois {
        let c = p % clusters;
        let (lat0, lon0) = cluster_center(c);
        let id = format!("p{p:04}");
        sites[c].push(PoiSite {
            id: id.clone(),
            lat: round6(lat0 + rng.random_range(-0.02..0.02)),
            lon: round6(lon0 + rng.random_range(-0.02..0.02)),
        });
        poi_cluster.insert(id, c);
    }

    let mut user_cluster = BTreeMap::new();
    let mut records = Vec::new();
    let nonempty: Vec<usize> = (0..clusters).filter(|&c| !sites[c].is_empty()).collect();
    if nonempty.is_empty() {
        return SynthCorpus {
            records,
            poi_cluster,
            user_cluster,
            emitted: 0,
        };
    }

    for u in 0..config.users {
        let user = format!("u{u:04}");
        let home = nonempty[u % nonempty.len()];
        user_cluster.insert(user.clone(), home);
        for day in 0..config.days as i64 {
            if !rng.random_bool(config.active_prob) {
                continue;
            }
            let n = rng.random_range(config.min_daily..=config.max_daily.max(config.min_daily));
            let mut visits: Vec<(i64, usize, usize)> = Vec::with_capacity(n);
            for _ in 0..n {
                let c = if rng.random_bool(config.home_affinity) {
                    home
                } else {
                    nonempty[rng.random_range(0..nonempty.len())]
                };
                let site = rng.random_range(0..sites[c].len());
                let hour = (peak_hour(c) + rng.random_range(-1..=1)).rem_euclid(24);
                let t = EPOCH_START + day * DAY + hour * HOUR + rng.random_range(0..3600);
                visits.push((t, c, site));
            }
            visits.sort_unstable();
            let mut last = i64::MIN;
            for (mut t, c, site) in visits {
                if t <= last {
                    t = last + 60;
                }
                last = t;
                let s = &sites[c][site];
                records.push(CheckinRecord {
                    user: user.clone(),
                    poi: s.id.clone(),
                    category: category_name(c),
                    timestamp: t,
                    lat: s.lat,
                    lon: s.lon,
                });
            }
        }
    }

    let emitted = records.len();
    SynthCorpus {
        records,
        poi_cluster,
        user_cluster,
        emitted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_checkins, write_checkins_csv, ColumnMapping};

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SynthConfig {
            seed: 11,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_checkins_csv(&a, &generate(&cfg).records).unwrap();
        write_checkins_csv(&b, &generate(&cfg).records).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn single_cluster_shares_one_category() {
        let corpus = generate(&SynthConfig {
            clusters: 1,
            ..Default::default()
        });
        let first = &corpus.records[0].category;
        assert!(corpus.records.iter().all(|r| &r.category == first));
    }

    #[test]
    fn four_clusters_partition_pois() {
        let corpus = generate(&SynthConfig::default());
        let groups = corpus.clusters();
        assert_eq!(groups.len(), 4);
        assert!(groups.iter().all(|g| !g.is_empty()));
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 120);
    }

    #[test]
    fn thousand_row_fixture_loads_completely() {
        // Shrink the corpus until it emits close to 1000 rows, then check the
        // loader sees exactly the generator's ledger count.
        let cfg = SynthConfig {
            users: 10,
            pois: 20,
            days: 40,
            seed: 3,
            ..Default::default()
        };
        let corpus = generate(&cfg);
        assert!((700..=1400).contains(&corpus.emitted), "{}", corpus.emitted);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.csv");
        write_checkins_csv(&path, &corpus.records).unwrap();
        let report = load_checkins(&path, &ColumnMapping::default()).unwrap();
        assert_eq!(report.records.len(), corpus.emitted);
        assert!(report.rejects.is_empty());
        assert_eq!(report.records, corpus.records);
    }
}
