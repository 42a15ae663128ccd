//! One-hot semantic feature vectors for POIs.
//!
//! Each POI is described by four binary blocks, concatenated in a fixed
//! order: category, region (a Plus Code cell), the ten busiest hours of day
//! and its ten most frequent visitors. All statistics come from the training
//! split only.

pub mod olc;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{CheckinRecord, DatasetSplit, HOUR};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error(transparent)]
    CodeLength(#[from] olc::InvalidCodeLength),
    #[error("POI `{0}` has no visits in the training split")]
    UnknownPoi(String),
    #[error("feature metadata mismatch: {0}")]
    Metadata(String),
    #[error("json error on line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Number of hour-of-day slots.
pub const SLOTS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub plus_code_len: usize,
    /// Offset added to UTC timestamps before taking the hour of day.
    pub tz_offset_secs: i64,
    pub top_slots: usize,
    pub top_visitors: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            plus_code_len: 6,
            tz_offset_secs: 0,
            top_slots: 10,
            top_visitors: 10,
        }
    }
}

/// Widths of the four blocks, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub category: usize,
    pub region: usize,
    pub temporal: usize,
    pub visitor: usize,
}

impl BlockLayout {
    pub fn total(&self) -> usize {
        self.category + self.region + self.temporal + self.visitor
    }

    /// Start offsets of the blocks within the concatenated vector.
    pub fn offsets(&self) -> [usize; 4] {
        [
            0,
            self.category,
            self.category + self.region,
            self.category + self.region + self.temporal,
        ]
    }
}

/// Frozen vocabularies that define block widths and orderings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    pub categories: Vec<String>,
    pub regions: Vec<String>,
    pub users: Vec<String>,
    pub config: FeatureConfig,
}

impl FeatureVocabulary {
    /// Collects sorted category, region and user vocabularies from train.
    pub fn from_split(split: &DatasetSplit, config: &FeatureConfig) -> Result<Self> {
        let profiles = poi_profiles(split, config)?;
        let mut categories: Vec<String> = profiles.values().map(|p| p.category.clone()).collect();
        categories.sort();
        categories.dedup();
        let mut regions: Vec<String> = profiles.values().map(|p| p.region.clone()).collect();
        regions.sort();
        regions.dedup();
        Ok(FeatureVocabulary {
            categories,
            regions,
            users: split.user_vocabulary.iter().cloned().collect(),
            config: config.clone(),
        })
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            category: self.categories.len(),
            region: self.regions.len(),
            temporal: SLOTS,
            visitor: self.users.len(),
        }
    }
}

/// The feature vector of one POI, stored as the indices of its one bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    pub poi: String,
    pub category_index: usize,
    pub region_index: usize,
    /// Ascending hour slots set in the temporal block.
    pub temporal_slots: Vec<usize>,
    /// Ascending user-vocabulary indices set in the visitor block.
    pub visitor_indices: Vec<usize>,
    pub layout: BlockLayout,
}

fn one_hot(width: usize, ones: &[usize]) -> Vec<u8> {
    let mut v = vec![0u8; width];
    for &i in ones {
        v[i] = 1;
    }
    v
}

impl FeatureVector {
    pub fn category_onehot(&self) -> Vec<u8> {
        one_hot(self.layout.category, &[self.category_index])
    }

    pub fn region_onehot(&self) -> Vec<u8> {
        one_hot(self.layout.region, &[self.region_index])
    }

    pub fn temporal_onehot(&self) -> Vec<u8> {
        one_hot(self.layout.temporal, &self.temporal_slots)
    }

    pub fn visitor_onehot(&self) -> Vec<u8> {
        one_hot(self.layout.visitor, &self.visitor_indices)
    }

    /// Blocks concatenated in category, region, temporal, visitor order.
    pub fn concatenated(&self) -> Vec<u8> {
        let mut v = self.category_onehot();
        v.extend(self.region_onehot());
        v.extend(self.temporal_onehot());
        v.extend(self.visitor_onehot());
        v
    }

    pub fn dense(&self) -> Vec<f64> {
        self.concatenated().into_iter().map(f64::from).collect()
    }
}

/// Hour-of-day slot of a timestamp after applying a timezone offset.
pub fn hour_slot(timestamp: i64, tz_offset_secs: i64) -> usize {
    ((timestamp + tz_offset_secs).rem_euclid(24 * HOUR) / HOUR) as usize
}

/// The (at most) `top` hour slots with the most visits.
///
/// Ties are broken towards the lower slot index. Returned ascending.
pub fn temporal_feature(timestamps: &[i64], tz_offset_secs: i64, top: usize) -> Vec<usize> {
    let mut counts = [0usize; SLOTS];
    for &t in timestamps {
        counts[hour_slot(t, tz_offset_secs)] += 1;
    }
    let mut ranked: Vec<usize> = (0..SLOTS).filter(|&s| counts[s] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ranked.truncate(top);
    ranked.sort_unstable();
    ranked
}

/// The (at most) `top` users who visited `poi` most often in `train_visits`.
///
/// Ties are broken by ascending user id. Returned in rank order.
pub fn visitor_feature(poi: &str, train_visits: &[CheckinRecord], top: usize) -> Result<Vec<String>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in train_visits.iter().filter(|r| r.poi == poi) {
        *counts.entry(r.user.as_str()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(FeatureError::UnknownPoi(poi.to_string()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(top).map(|(u, _)| u.to_string()).collect())
}

struct PoiProfile {
    category: String,
    region: String,
    timestamps: Vec<i64>,
}

fn train_records(split: &DatasetSplit) -> impl Iterator<Item = &CheckinRecord> {
    split.train.iter().flat_map(|t| t.entries.iter())
}

/// Per-POI category (most frequent label, ties lexicographic), region of the
/// earliest train visit, and visit timestamps.
fn poi_profiles(split: &DatasetSplit, config: &FeatureConfig) -> Result<BTreeMap<String, PoiProfile>> {
    let mut grouped: BTreeMap<&str, Vec<&CheckinRecord>> = BTreeMap::new();
    for r in train_records(split) {
        grouped.entry(r.poi.as_str()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (poi, visits) in grouped {
        let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
        for v in &visits {
            *labels.entry(v.category.as_str()).or_default() += 1;
        }
        let category = labels
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(c, _)| c.to_string())
            .unwrap_or_default();
        let first = visits
            .iter()
            .min_by_key(|v| v.timestamp)
            .expect("grouped visits are nonempty");
        let region = olc::encode(first.lat, first.lon, config.plus_code_len)?;
        out.insert(
            poi.to_string(),
            PoiProfile {
                category,
                region,
                timestamps: visits.iter().map(|v| v.timestamp).collect(),
            },
        );
    }
    Ok(out)
}

/// Builds the feature vector of a single POI from the training split.
pub fn build_feature_vector(poi: &str, split: &DatasetSplit, vocab: &FeatureVocabulary) -> Result<FeatureVector> {
    let train: Vec<CheckinRecord> = train_records(split).filter(|r| r.poi == poi).cloned().collect();
    if train.is_empty() {
        return Err(FeatureError::UnknownPoi(poi.to_string()));
    }
    let mut one = split.clone();
    one.train.retain(|t| t.entries.iter().any(|e| e.poi == poi));
    let profiles = poi_profiles(&one, &vocab.config)?;
    let profile = &profiles[poi];
    let user_index: HashMap<&str, usize> = vocab.users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    assemble(poi, profile, &train, vocab, &user_index)
}

fn assemble(
    poi: &str,
    profile: &PoiProfile,
    train_visits: &[CheckinRecord],
    vocab: &FeatureVocabulary,
    user_index: &HashMap<&str, usize>,
) -> Result<FeatureVector> {
    let category_index = vocab
        .categories
        .binary_search(&profile.category)
        .map_err(|_| FeatureError::Metadata(format!("category `{}` not in vocabulary", profile.category)))?;
    let region_index = vocab
        .regions
        .binary_search(&profile.region)
        .map_err(|_| FeatureError::Metadata(format!("region `{}` not in vocabulary", profile.region)))?;
    let temporal_slots = temporal_feature(&profile.timestamps, vocab.config.tz_offset_secs, vocab.config.top_slots);
    let mut visitor_indices = visitor_feature(poi, train_visits, vocab.config.top_visitors)?
        .iter()
        .map(|u| {
            user_index
                .get(u.as_str())
                .copied()
                .ok_or_else(|| FeatureError::Metadata(format!("user `{u}` not in vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    visitor_indices.sort_unstable();
    Ok(FeatureVector {
        poi: poi.to_string(),
        category_index,
        region_index,
        temporal_slots,
        visitor_indices,
        layout: vocab.layout(),
    })
}

/// Feature vectors for every train POI, sorted by POI id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub vocab: FeatureVocabulary,
    pub vectors: Vec<FeatureVector>,
}

impl FeatureTable {
    pub fn build(split: &DatasetSplit, config: &FeatureConfig) -> Result<Self> {
        let vocab = FeatureVocabulary::from_split(split, config)?;
        let profiles = poi_profiles(split, config)?;
        let mut visits: HashMap<&str, Vec<CheckinRecord>> = HashMap::new();
        for r in train_records(split) {
            visits.entry(r.poi.as_str()).or_default().push(r.clone());
        }
        let user_index: HashMap<&str, usize> = vocab.users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let vectors = profiles
            .iter()
            .map(|(poi, profile)| assemble(poi, profile, &visits[poi.as_str()], &vocab, &user_index))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureTable { vocab, vectors })
    }

    pub fn dense_matrix(&self) -> Vec<Vec<f64>> {
        self.vectors.iter().map(FeatureVector::dense).collect()
    }

    /// Writes one JSON line per POI with its block contents.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for v in &self.vectors {
            let line = FeatureLine {
                poi: v.poi.clone(),
                blocks: FeatureBlocks {
                    category_index: v.category_index,
                    region_code: self.vocab.regions[v.region_index].clone(),
                    temporal_slots: v.temporal_slots.clone(),
                    visitor_ids: v.visitor_indices.iter().map(|&i| self.vocab.users[i].clone()).collect(),
                },
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| FeatureError::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Sidecar with vocabularies and block widths.
    pub fn sidecar(&self) -> FeatureSidecar {
        FeatureSidecar {
            block_order: ["category", "region", "temporal", "visitor"].map(String::from).to_vec(),
            layout: self.vocab.layout(),
            vocab: self.vocab.clone(),
        }
    }

    /// Rebuilds a table from JSON lines and the sidecar.
    pub fn read_jsonl<R: BufRead>(input: R, sidecar: &FeatureSidecar) -> Result<Self> {
        let vocab = sidecar.vocab.clone();
        if vocab.layout() != sidecar.layout {
            return Err(FeatureError::Metadata("sidecar layout disagrees with vocabularies".into()));
        }
        let user_index: HashMap<&str, usize> = vocab.users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
        let mut vectors = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with("{\"_meta\"") {
                continue;
            }
            let parsed: FeatureLine =
                serde_json::from_str(&line).map_err(|source| FeatureError::Json { line: i + 1, source })?;
            let region_index = vocab
                .regions
                .binary_search(&parsed.blocks.region_code)
                .map_err(|_| FeatureError::Metadata(format!("unknown region {}", parsed.blocks.region_code)))?;
            let mut visitor_indices = parsed
                .blocks
                .visitor_ids
                .iter()
                .map(|u| {
                    user_index
                        .get(u.as_str())
                        .copied()
                        .ok_or_else(|| FeatureError::Metadata(format!("unknown user {u}")))
                })
                .collect::<Result<Vec<_>>>()?;
            visitor_indices.sort_unstable();
            vectors.push(FeatureVector {
                poi: parsed.poi,
                category_index: parsed.blocks.category_index,
                region_index,
                temporal_slots: parsed.blocks.temporal_slots,
                visitor_indices,
                layout: vocab.layout(),
            });
        }
        Ok(FeatureTable { vocab, vectors })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureLine {
    poi: String,
    blocks: FeatureBlocks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureBlocks {
    category_index: usize,
    region_code: String,
    temporal_slots: Vec<usize>,
    visitor_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub block_order: Vec<String>,
    pub layout: BlockLayout,
    pub vocab: FeatureVocabulary,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Trajectory, DAY};

    fn visit(user: &str, poi: &str, t: i64) -> CheckinRecord {
        CheckinRecord {
            user: user.into(),
            poi: poi.into(),
            category: "Cafe".into(),
            timestamp: t,
            lat: 0.0,
            lon: 0.0,
        }
    }

    #[test]
    fn single_hour_sets_one_slot() {
        let ts: Vec<i64> = (0..5).map(|d| d * DAY + 9 * HOUR + 120).collect();
        assert_eq!(temporal_feature(&ts, 0, 10), vec![9]);
    }

    #[test]
    fn twelve_hours_keep_ten_busiest() {
        // Hour h in 0..12 gets h+1 visits, so hours 2..=11 are the top ten.
        let mut ts = Vec::new();
        for h in 0..12i64 {
            for d in 0..=h {
                ts.push(d * DAY + h * HOUR);
            }
        }
        // brute force: sort slots by (count desc, slot asc), take 10
        let mut counts = [0usize; 24];
        for &t in &ts {
            counts[((t % DAY) / HOUR) as usize] += 1;
        }
        let mut order: Vec<usize> = (0..24).filter(|&s| counts[s] > 0).collect();
        order.sort_by_key(|&s| (std::cmp::Reverse(counts[s]), s));
        let mut expected: Vec<usize> = order[..10].to_vec();
        expected.sort();
        assert_eq!(expected, (2..12).collect::<Vec<_>>());
        assert_eq!(temporal_feature(&ts, 0, 10), expected);
    }

    #[test]
    fn tenth_place_tie_goes_to_lower_slot() {
        // Nine slots with 5 visits each; slots 3 and 17 tie at one visit for
        // the tenth place.
        let mut ts = Vec::new();
        for h in [0i64, 1, 2, 4, 5, 6, 7, 8, 9] {
            for d in 0..5 {
                ts.push(d * DAY + h * HOUR);
            }
        }
        ts.push(3 * HOUR);
        ts.push(17 * HOUR);
        let slots = temporal_feature(&ts, 0, 10);
        assert!(slots.contains(&3));
        assert!(!slots.contains(&17));
        assert_eq!(slots.len(), 10);
    }

    #[test]
    fn timezone_offset_shifts_slot() {
        assert_eq!(hour_slot(23 * HOUR, 2 * HOUR), 1);
        assert_eq!(hour_slot(HOUR, -2 * HOUR), 23);
    }

    #[test]
    fn visitor_topk() {
        let visits = vec![visit("a", "p", 1)];
        assert_eq!(visitor_feature("p", &visits, 10).unwrap(), vec!["a"]);

        // 15 visitors; visitor i has i+1 visits.
        let mut visits = Vec::new();
        for i in 0..15 {
            for k in 0..=i {
                visits.push(visit(&format!("v{i:02}"), "p", (k + 1) as i64));
            }
        }
        let mut brute: Vec<(usize, String)> = (0..15).map(|i| (i + 1, format!("v{i:02}"))).collect();
        brute.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<String> = brute.into_iter().take(10).map(|(_, u)| u).collect();
        assert_eq!(visitor_feature("p", &visits, 10).unwrap(), expected);
    }

    #[test]
    fn visitor_of_unknown_poi_errors() {
        assert!(matches!(
            visitor_feature("ghost", &[visit("a", "p", 1)], 10),
            Err(FeatureError::UnknownPoi(_))
        ));
    }

    fn tiny_split() -> DatasetSplit {
        // 3 categories, 2 regions, 4 train users, 5 POIs.
        let mk = |user: &str, poi: &str, cat: &str, t: i64, lat: f64| CheckinRecord {
            user: user.into(),
            poi: poi.into(),
            category: cat.into(),
            timestamp: t,
            lat,
            lon: 10.0,
        };
        let train = vec![
            Trajectory {
                user: "u1".into(),
                entries: vec![
                    mk("u1", "p1", "Cafe", 8 * HOUR, 10.0),
                    mk("u1", "p2", "Park", 9 * HOUR, 10.0),
                    mk("u1", "p1", "Cafe", 10 * HOUR, 10.0),
                ],
            },
            Trajectory {
                user: "u2".into(),
                entries: vec![
                    mk("u2", "p3", "Gym", DAY + 7 * HOUR, 20.0),
                    mk("u2", "p4", "Park", DAY + 18 * HOUR, 20.0),
                ],
            },
            Trajectory {
                user: "u3".into(),
                entries: vec![
                    mk("u3", "p5", "Cafe", 2 * DAY + 8 * HOUR, 20.0),
                    mk("u3", "p1", "Cafe", 2 * DAY + 12 * HOUR, 10.0),
                ],
            },
            Trajectory {
                user: "u4".into(),
                entries: vec![
                    mk("u4", "p2", "Park", 3 * DAY + 9 * HOUR, 10.0),
                    mk("u4", "p3", "Gym", 3 * DAY + 7 * HOUR + 1, 20.0),
                ],
            },
        ];
        let test = vec![Trajectory {
            user: "u1".into(),
            entries: vec![mk("u1", "p3", "Gym", 9 * DAY, 20.0), mk("u1", "p4", "Park", 9 * DAY + 1, 20.0)],
        }];
        DatasetSplit::from_parts(train, Vec::new(), test)
    }

    #[test]
    fn concatenated_length_and_block_order() {
        let split = tiny_split();
        let table = FeatureTable::build(&split, &FeatureConfig::default()).unwrap();
        assert_eq!(table.vocab.categories, vec!["Cafe", "Gym", "Park"]);
        assert_eq!(table.vocab.regions.len(), 2);
        assert_eq!(table.vocab.users.len(), 4);
        for v in &table.vectors {
            assert_eq!(v.concatenated().len(), 3 + 2 + 24 + 4);
            assert_eq!(v.category_onehot().iter().sum::<u8>(), 1);
            assert_eq!(v.region_onehot().iter().sum::<u8>(), 1);
            let t: u8 = v.temporal_onehot().iter().sum();
            let u: u8 = v.visitor_onehot().iter().sum();
            assert!((1..=10).contains(&t) && (1..=10).contains(&u));
        }
    }

    #[test]
    fn hand_assembled_vector_for_p1() {
        let split = tiny_split();
        let table = FeatureTable::build(&split, &FeatureConfig::default()).unwrap();
        let p1 = table.vectors.iter().find(|v| v.poi == "p1").unwrap();
        let region_10 = olc::encode(10.0, 10.0, 6).unwrap();
        let region_20 = olc::encode(20.0, 10.0, 6).unwrap();
        let mut regions = vec![region_10.clone(), region_20];
        regions.sort();
        let r_idx = regions.iter().position(|r| *r == region_10).unwrap();

        let mut expected = vec![1u8, 0, 0]; // Cafe
        expected.extend((0..2).map(|i| u8::from(i == r_idx)));
        expected.extend((0..24).map(|h| u8::from(h == 8 || h == 10 || h == 12)));
        expected.extend([1u8, 0, 1, 0]); // u1, u3
        assert_eq!(p1.concatenated(), expected);
        assert_eq!(build_feature_vector("p1", &split, &table.vocab).unwrap(), *p1);
    }

    #[test]
    fn test_only_poi_has_no_vector() {
        let mut split = tiny_split();
        split.test[0].entries[0].poi = "p9".into();
        let vocab = FeatureVocabulary::from_split(&split, &FeatureConfig::default()).unwrap();
        assert!(matches!(
            build_feature_vector("p9", &split, &vocab),
            Err(FeatureError::UnknownPoi(_))
        ));
    }

    #[test]
    fn test_split_mutation_leaves_vectors_unchanged() {
        let split = tiny_split();
        let base = FeatureTable::build(&split, &FeatureConfig::default()).unwrap();
        let mut mutated = split.clone();
        mutated.test[0].entries[0].user = "u4".into();
        mutated.test[0].entries[0].timestamp += 5 * HOUR;
        mutated.test[0].entries[1].poi = "p1".into();
        assert_eq!(FeatureTable::build(&mutated, &FeatureConfig::default()).unwrap(), base);
    }

    #[test]
    fn jsonl_and_sidecar_roundtrip() {
        let table = FeatureTable::build(&tiny_split(), &FeatureConfig::default()).unwrap();
        let mut buf = Vec::new();
        table.write_jsonl(&mut buf).unwrap();
        let sidecar = table.sidecar();
        let json = serde_json::to_string(&sidecar).unwrap();
        let sidecar: FeatureSidecar = serde_json::from_str(&json).unwrap();
        let back = FeatureTable::read_jsonl(buf.as_slice(), &sidecar).unwrap();
        assert_eq!(back, table);
        let offsets = sidecar.layout.offsets();
        assert_eq!(offsets, [0, 3, 5, 29]);
        assert_eq!(sidecar.layout.total(), 33);
    }
}
