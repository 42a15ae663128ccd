//! Check-in records, preprocessing, trajectories and chronological splits.
//!
//! A corpus flows through [`load_checkins`] (or [`synth::generate`]),
//! [`preprocess`], [`build_trajectories`] and finally
//! [`split_chronological`]. Every step is a pure transformation over owned
//! record vectors.

mod load;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use load::{load_checkins, parse_timestamp, ColumnMapping, LoadReport, RowError};

/// Seconds in one hour.
pub const HOUR: i64 = 3600;
/// Seconds in one day.
pub const DAY: i64 = 24 * HOUR;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error on line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("no records survive filtering (empty dataset)")]
    EmptyDataset,
    #[error("no trajectories to split")]
    NoTrajectories,
    #[error("trajectory window must be positive, got {0} s")]
    InvalidWindow(i64),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One check-in: who visited which POI, when and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckinRecord {
    pub user: String,
    pub poi: String,
    pub category: String,
    /// UTC seconds.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

impl CheckinRecord {
    /// Checks the timestamp and coordinate ranges.
    pub fn validate(&self) -> Result<()> {
        if self.timestamp <= 0 {
            return Err(DatasetError::InvalidRecord(format!(
                "timestamp {} must be positive",
                self.timestamp
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(DatasetError::InvalidRecord(format!(
                "latitude {} outside [-90, 90]",
                self.lat
            )));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(DatasetError::InvalidRecord(format!(
                "longitude {} outside [-180, 180]",
                self.lon
            )));
        }
        Ok(())
    }
}

/// A user's check-ins that fall within one time window.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user: String,
    pub entries: Vec<CheckinRecord>,
}

impl Trajectory {
    pub fn start(&self) -> i64 {
        self.entries.first().map_or(0, |e| e.timestamp)
    }

    pub fn end(&self) -> i64 {
        self.entries.last().map_or(0, |e| e.timestamp)
    }

    pub fn span(&self) -> i64 {
        self.end() - self.start()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryWire {
    user: String,
    entries: Vec<EntryWire>,
}

#[derive(Serialize, Deserialize)]
struct EntryWire {
    poi: String,
    category: String,
    timestamp: i64,
    lat: f64,
    lon: f64,
}

impl Serialize for Trajectory {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TrajectoryWire {
            user: self.user.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| EntryWire {
                    poi: e.poi.clone(),
                    category: e.category.clone(),
                    timestamp: e.timestamp,
                    lat: e.lat,
                    lon: e.lon,
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = TrajectoryWire::deserialize(deserializer)?;
        let user = wire.user;
        let entries = wire
            .entries
            .into_iter()
            .map(|e| CheckinRecord {
                user: user.clone(),
                poi: e.poi,
                category: e.category,
                timestamp: e.timestamp,
                lat: e.lat,
                lon: e.lon,
            })
            .collect();
        Ok(Trajectory { user, entries })
    }
}

/// Train/validation/test trajectories plus the vocabularies seen in train.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub poi_vocabulary: BTreeSet<String>,
    pub user_vocabulary: BTreeSet<String>,
    /// Validation/test trajectories dropped for mentioning unseen users or POIs.
    pub removed_unseen: usize,
}

impl DatasetSplit {
    /// Rebuilds a split from its three parts, deriving vocabularies from train.
    pub fn from_parts(train: Vec<Trajectory>, validation: Vec<Trajectory>, test: Vec<Trajectory>) -> Self {
        let (poi_vocabulary, user_vocabulary) = vocabularies(&train);
        DatasetSplit {
            train,
            validation,
            test,
            poi_vocabulary,
            user_vocabulary,
            removed_unseen: 0,
        }
    }

    pub fn all_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Filtering thresholds applied by [`preprocess`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_poi_visits: usize,
    pub min_user_records: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_poi_visits: 10,
            min_user_records: 10,
        }
    }
}

/// Removes rare POIs and inactive users until neither filter removes anything.
pub fn preprocess(records: Vec<CheckinRecord>, config: FilterConfig) -> Result<Vec<CheckinRecord>> {
    let mut current = records;
    loop {
        let before = current.len();

        let mut poi_counts: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *poi_counts.entry(r.poi.as_str()).or_default() += 1;
        }
        let keep_poi: Vec<bool> = current
            .iter()
            .map(|r| poi_counts[r.poi.as_str()] >= config.min_poi_visits)
            .collect();
        let mut kept: Vec<CheckinRecord> = current
            .into_iter()
            .zip(keep_poi)
            .filter_map(|(r, keep)| keep.then_some(r))
            .collect();

        let mut user_counts: HashMap<String, usize> = HashMap::new();
        for r in &kept {
            *user_counts.entry(r.user.clone()).or_default() += 1;
        }
        kept.retain(|r| user_counts[&r.user] >= config.min_user_records);

        current = kept;
        if current.len() == before {
            break;
        }
    }
    if current.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(current)
}

/// Groups each user's check-ins into trajectories spanning at most `window`
/// seconds.
///
/// A new trajectory starts whenever adding the next record would push the
/// span past the window. Records repeating an earlier timestamp of the same
/// user are dropped so entries stay strictly ascending. Single-record
/// trajectories are discarded. Output is ordered by user id, then time.
pub fn build_trajectories(records: &[CheckinRecord], window: i64) -> Result<Vec<Trajectory>> {
    if window <= 0 {
        return Err(DatasetError::InvalidWindow(window));
    }
    let mut by_user: BTreeMap<&str, Vec<&CheckinRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user.as_str()).or_default().push(r);
    }

    let mut out = Vec::new();
    for (user, mut recs) in by_user {
        recs.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.poi.cmp(&b.poi)));
        recs.dedup_by_key(|r| r.timestamp);

        let mut current: Vec<CheckinRecord> = Vec::new();
        for r in recs {
            if let Some(first) = current.first() {
                if r.timestamp - first.timestamp > window {
                    flush(user, &mut current, &mut out);
                }
            }
            current.push(r.clone());
        }
        flush(user, &mut current, &mut out);
    }
    Ok(out)
}

fn flush(user: &str, current: &mut Vec<CheckinRecord>, out: &mut Vec<Trajectory>) {
    let entries = std::mem::take(current);
    if entries.len() >= 2 {
        out.push(Trajectory {
            user: user.to_string(),
            entries,
        });
    }
}

/// Fractions of records assigned to train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = SplitRatios {
            train,
            validation,
            test,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(DatasetError::InvalidRatios(format!(
                "every ratio must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Chronological train/validation/test split.
///
/// The cut points are taken on the global time order of all check-in
/// records; each trajectory goes to the split holding its last record.
/// Validation and test trajectories that mention a user or POI absent from
/// train are removed.
pub fn split_chronological(trajectories: Vec<Trajectory>, ratios: SplitRatios) -> Result<DatasetSplit> {
    ratios.validate()?;
    if trajectories.is_empty() {
        return Err(DatasetError::NoTrajectories);
    }
    let mut stamps: Vec<i64> = trajectories
        .iter()
        .flat_map(|t| t.entries.iter().map(|e| e.timestamp))
        .collect();
    stamps.sort_unstable();
    let n = stamps.len();
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_val = ((ratios.validation * n as f64).round() as usize).min(n - n_train);
    let cut = |count: usize| if count == 0 { i64::MIN } else { stamps[count - 1] };
    let train_cut = cut(n_train);
    let val_cut = cut(n_train + n_val);

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for t in trajectories {
        let end = t.end();
        if end <= train_cut {
            train.push(t);
        } else if end <= val_cut {
            validation.push(t);
        } else {
            test.push(t);
        }
    }

    let (poi_vocabulary, user_vocabulary) = vocabularies(&train);
    let seen = |t: &Trajectory| {
        user_vocabulary.contains(&t.user) && t.entries.iter().all(|e| poi_vocabulary.contains(&e.poi))
    };
    let before = validation.len() + test.len();
    validation.retain(|t| seen(t));
    test.retain(|t| seen(t));
    let removed_unseen = before - validation.len() - test.len();

    Ok(DatasetSplit {
        train,
        validation,
        test,
        poi_vocabulary,
        user_vocabulary,
        removed_unseen,
    })
}

fn vocabularies(train: &[Trajectory]) -> (BTreeSet<String>, BTreeSet<String>) {
    let pois = train
        .iter()
        .flat_map(|t| t.entries.iter().map(|e| e.poi.clone()))
        .collect();
    let users = train.iter().map(|t| t.user.clone()).collect();
    (pois, users)
}

/// Writes one JSON object per trajectory.
pub fn write_trajectories<W: Write>(mut out: W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads trajectories written by [`write_trajectories`]. Lines whose object
/// carries a `_meta` key are skipped.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: "<trajectories>".into(),
            source,
        })?;
        if line.trim().is_empty() || line.starts_with("{\"_meta\"") {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: i + 1, source })?;
        out.push(t);
    }
    Ok(out)
}

/// Writes records as a comma-separated file with a
/// `user,poi,category,timestamp,lat,lon` header.
pub fn write_checkins_csv(path: &Path, records: &[CheckinRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user", "poi", "category", "timestamp", "lat", "lon"])?;
    for r in records {
        w.write_record([
            r.user.as_str(),
            r.poi.as_str(),
            r.category.as_str(),
            &r.timestamp.to_string(),
            &r.lat.to_string(),
            &r.lon.to_string(),
        ])?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(user: &str, poi: &str, t: i64) -> CheckinRecord {
        CheckinRecord {
            user: user.into(),
            poi: poi.into(),
            category: "Cafe".into(),
            timestamp: t,
            lat: 40.7,
            lon: -74.0,
        }
    }

    #[test]
    fn poi_with_nine_visits_is_removed() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(rec("u1", "keep", 1000 + i));
            records.push(rec("u2", "keep", 2000 + i));
        }
        for i in 0..9 {
            records.push(rec("u1", "rare", 3000 + i));
        }
        let out = preprocess(records, FilterConfig::default()).unwrap();
        assert!(out.iter().all(|r| r.poi != "rare"));
        assert_eq!(out.len(), 20);
    }

    #[test]
    fn user_with_exactly_ten_records_is_kept() {
        let records: Vec<_> = (0..10).map(|i| rec("u1", "p", 1000 + i)).collect();
        let out = preprocess(records, FilterConfig::default()).unwrap();
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn cascade_removes_poi_then_user() {
        // u1: 1 visit at "rare" + 9 at "shared"; u2: 10 at "shared".
        // Pass 1 drops "rare" (1 visit), leaving u1 with 9 records, so u1 is
        // dropped too. Pass 2 sees "shared" with u2's 10 visits and stops.
        let mut records = vec![rec("u1", "rare", 500)];
        records.extend((0..9).map(|i| rec("u1", "shared", 1000 + i)));
        records.extend((0..10).map(|i| rec("u2", "shared", 2000 + i)));
        assert_eq!(records.len(), 20);

        let out = preprocess(records, FilterConfig::default()).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|r| r.user == "u2" && r.poi == "shared"));
    }

    #[test]
    fn cascade_can_empty_the_corpus() {
        let mut records = vec![rec("u1", "rare", 500)];
        records.extend((0..9).map(|i| rec("u1", "shared", 1000 + i)));
        records.extend((0..9).map(|i| rec("u2", "shared", 2000 + i)));
        assert!(matches!(
            preprocess(records, FilterConfig::default()),
            Err(DatasetError::EmptyDataset)
        ));
    }

    #[test]
    fn empty_input_signals_empty_dataset() {
        assert!(matches!(
            preprocess(Vec::new(), FilterConfig::default()),
            Err(DatasetError::EmptyDataset)
        ));
    }

    #[test]
    fn records_25h_apart_form_no_trajectory() {
        let records = vec![rec("u", "a", HOUR), rec("u", "b", 26 * HOUR)];
        assert!(build_trajectories(&records, DAY).unwrap().is_empty());
    }

    #[test]
    fn three_records_within_a_day_form_one_trajectory() {
        let records = vec![
            rec("u", "a", 10),
            rec("u", "b", 10 + HOUR),
            rec("u", "c", 10 + 23 * HOUR + 30 * 60),
        ];
        let t = build_trajectories(&records, DAY).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 3);
    }

    #[test]
    fn zero_window_rejected() {
        assert!(matches!(
            build_trajectories(&[], 0),
            Err(DatasetError::InvalidWindow(0))
        ));
    }

    fn uniform_trajectories(n: usize) -> Vec<Trajectory> {
        (0..n)
            .map(|i| Trajectory {
                user: "u".into(),
                entries: vec![
                    rec("u", "p", 100 + 100 * i as i64),
                    rec("u", "p", 110 + 100 * i as i64),
                ],
            })
            .collect()
    }

    #[test]
    fn ten_uniform_trajectories_split_8_1_1() {
        let split = split_chronological(uniform_trajectories(10), SplitRatios::default()).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (8, 1, 1)
        );
    }

    #[test]
    fn test_trajectory_with_unseen_poi_removed() {
        let mut trajs = uniform_trajectories(10);
        trajs[9].entries[1].poi = "novel".into();
        let split = split_chronological(trajs, SplitRatios::default()).unwrap();
        assert_eq!(split.test.len(), 0);
        assert_eq!(split.removed_unseen, 1);
    }

    #[test]
    fn degenerate_ratios_rejected() {
        assert!(SplitRatios::new(0.9, 0.1, 0.0).is_err());
        assert!(SplitRatios::new(0.8, 0.3, 0.1).is_err());
        assert!(SplitRatios::new(-0.1, 0.6, 0.5).is_err());
        let bad = SplitRatios {
            train: 0.5,
            validation: 0.5,
            test: 0.5,
        };
        assert!(split_chronological(uniform_trajectories(3), bad).is_err());
    }

    #[test]
    fn empty_trajectory_list_rejected() {
        assert!(matches!(
            split_chronological(Vec::new(), SplitRatios::default()),
            Err(DatasetError::NoTrajectories)
        ));
    }

    #[test]
    fn lat_91_fails_validation() {
        let mut r = rec("u", "p", 5);
        r.lat = 91.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn trajectory_jsonl_roundtrip() {
        let trajs = uniform_trajectories(3);
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"user\":\"u\",\"entries\":[{\"poi\":\"p\""));
        let back = read_trajectories(buf.as_slice()).unwrap();
        assert_eq!(back, trajs);
    }
}
