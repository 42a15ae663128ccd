//! Question-answer prompts built from trajectories and semantic IDs.
//!
//! A user's trajectories are cut into roughly monthly subsections. The prompt
//! for trajectory `T` holds every check-in of the earlier subsections as
//! long-term memory, `T` without its last entry as short-term memory, and
//! asks for the POI at the time of the held-out last entry.
//!
//! Each check-in renders as one line:
//! `YYYY-MM-DD HH:MM | <SID> | category | D.DD km`, where the distance is
//! to the previous check-in of the same block (0.00 for the first).

use std::collections::BTreeMap;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::dataset::{CheckinRecord, DatasetSplit, Trajectory, DAY};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

pub const DEFAULT_SYSTEM_TEXT: &str = "You are a next-location recommender. Each check-in is written as \
`time | SID | category | distance from the previous check-in`. Think about the user's habits inside \
<think></think>, then give exactly {k} distinct SIDs inside <answer></answer>, most likely first, \
separated by commas.";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("trajectory needs at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("no semantic id for POI `{0}`")]
    UnknownPoi(String),
    #[error("trajectory index {0} out of range")]
    BadIndex(usize),
    #[error("malformed prompt: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

/// Great-circle distance in kilometres.
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Subsection index for each trajectory (input must be time-ordered).
///
/// There are `max(1, ceil(span_days / 30))` subsections; a trajectory goes
/// to the subsection that its cumulative record offset falls in, so the
/// subsections hold roughly equal numbers of records.
pub fn split_long_term(trajectories: &[Trajectory]) -> Vec<usize> {
    let (Some(first), Some(_)) = (trajectories.first(), trajectories.last()) else {
        return Vec::new();
    };
    let start = first.start();
    let end = trajectories.iter().map(Trajectory::end).max().unwrap_or(start);
    let span_days = (end - start) as f64 / DAY as f64;
    let n = ((span_days / 30.0).ceil() as usize).max(1);
    let total: usize = trajectories.iter().map(Trajectory::len).sum();
    let mut before = 0usize;
    trajectories
        .iter()
        .map(|t| {
            let s = (before * n / total.max(1)).min(n - 1);
            before += t.len();
            s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckinLine {
    pub time: String,
    pub sid: String,
    pub category: String,
    pub distance_km: f64,
}

impl CheckinLine {
    pub fn render(&self) -> String {
        format!("{} | {} | {} | {:.2} km", self.time, self.sid, self.category, self.distance_km)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(" | ").collect();
        let [time, sid, category, dist] = parts[..] else {
            return Err(PromptError::Parse(line.to_string()));
        };
        let distance_km = dist
            .strip_suffix(" km")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| PromptError::Parse(line.to_string()))?;
        Ok(CheckinLine {
            time: time.to_string(),
            sid: sid.to_string(),
            category: category.to_string(),
            distance_km,
        })
    }
}

pub fn format_time(ts: i64, tz_offset_secs: i64) -> String {
    DateTime::from_timestamp(ts + tz_offset_secs, 0)
        .map(|d| d.format("%Y-%m-%d %H:%M").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// Renders a block of consecutive check-ins; distances restart at 0.00.
pub fn render_block(
    entries: &[&CheckinRecord],
    sids: &BTreeMap<String, String>,
    tz_offset_secs: i64,
) -> Result<Vec<CheckinLine>> {
    let mut out = Vec::with_capacity(entries.len());
    let mut prev: Option<&CheckinRecord> = None;
    for e in entries {
        let sid = sids.get(&e.poi).ok_or_else(|| PromptError::UnknownPoi(e.poi.clone()))?;
        let d = prev.map_or(0.0, |p| haversine(p.lat, p.lon, e.lat, e.lon));
        out.push(CheckinLine {
            time: format_time(e.timestamp, tz_offset_secs),
            sid: sid.clone(),
            // `|` is the field separator.
            category: e.category.replace('|', "/"),
            distance_km: (d * 100.0).round() / 100.0,
        });
        prev = Some(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub k: usize,
    /// Most check-ins kept in the history block; the oldest are dropped.
    pub history_cap: usize,
    pub system_text: String,
    pub tz_offset_secs: i64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            k: 10,
            history_cap: 200,
            system_text: DEFAULT_SYSTEM_TEXT.to_string(),
            tz_offset_secs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    pub user: String,
    pub system_text: String,
    pub history_block: Vec<CheckinLine>,
    pub current_block: Vec<CheckinLine>,
    pub target_time: i64,
    pub ground_truth_sid: String,
    pub k: usize,
    /// Subsection holding the current trajectory.
    pub subsection: usize,
    pub tz_offset_secs: i64,
}

/// One JSON line of prompt output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub user: String,
    pub system: String,
    pub prompt: String,
    pub ground_truth_sid: String,
    pub target_time: i64,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl PromptInstance {
    pub fn prompt_text(&self) -> String {
        let mut s = String::from("<history>\n");
        for l in &self.history_block {
            s.push_str(&l.render());
            s.push('\n');
        }
        s.push_str("</history>\n<current>\n");
        for l in &self.current_block {
            s.push_str(&l.render());
            s.push('\n');
        }
        s.push_str("</current>\n");
        s.push_str(&format!(
            "Which POI will user {} visit at {}? Recommend {} POIs as a ranked list of SIDs.",
            self.user,
            format_time(self.target_time, self.tz_offset_secs),
            self.k
        ));
        s
    }

    pub fn system(&self) -> String {
        self.system_text.replace("{k}", &self.k.to_string())
    }

    pub fn to_record(&self, split: Option<&str>) -> PromptRecord {
        PromptRecord {
            user: self.user.clone(),
            system: self.system(),
            prompt: self.prompt_text(),
            ground_truth_sid: self.ground_truth_sid.clone(),
            target_time: self.target_time,
            k: self.k,
            split: split.map(str::to_string),
        }
    }
}

/// Structured view of a rendered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    pub history: Vec<CheckinLine>,
    pub current: Vec<CheckinLine>,
    pub question: String,
}

pub fn parse_prompt(text: &str) -> Result<ParsedPrompt> {
    let bad = |m: &str| PromptError::Parse(m.to_string());
    let block = |open: &str, close: &str| -> Result<Vec<CheckinLine>> {
        let start = text.find(open).ok_or_else(|| bad(open))? + open.len();
        let end = text[start..].find(close).ok_or_else(|| bad(close))? + start;
        text[start..end]
            .lines()
            .filter(|l| !l.is_empty())
            .map(CheckinLine::parse)
            .collect()
    };
    let history = block("<history>\n", "</history>")?;
    let current = block("<current>\n", "</current>")?;
    let question = text
        .rsplit_once("</current>\n")
        .map(|(_, q)| q.to_string())
        .ok_or_else(|| bad("question"))?;
    Ok(ParsedPrompt {
        history,
        current,
        question,
    })
}

/// Prompt for `trajectories[index]` of one user.
///
/// `trajectories` must be the user's full time-ordered list so subsections
/// match [`split_long_term`].
pub fn build_prompt(
    user: &str,
    trajectories: &[Trajectory],
    index: usize,
    sids: &BTreeMap<String, String>,
    config: &PromptConfig,
) -> Result<PromptInstance> {
    let current = trajectories.get(index).ok_or(PromptError::BadIndex(index))?;
    if current.len() < 2 {
        return Err(PromptError::TooShort(current.len()));
    }
    let sections = split_long_term(trajectories);
    let s = sections[index];
    let mut history: Vec<&CheckinRecord> = trajectories
        .iter()
        .zip(&sections)
        .filter(|(_, &sec)| sec < s)
        .flat_map(|(t, _)| t.entries.iter())
        .collect();
    if history.len() > config.history_cap {
        history.drain(..history.len() - config.history_cap);
    }
    let (target, short) = current.entries.split_last().expect("len >= 2");
    let short: Vec<&CheckinRecord> = short.iter().collect();
    Ok(PromptInstance {
        user: user.to_string(),
        system_text: config.system_text.clone(),
        history_block: render_block(&history, sids, config.tz_offset_secs)?,
        current_block: render_block(&short, sids, config.tz_offset_secs)?,
        target_time: target.timestamp,
        ground_truth_sid: sids
            .get(&target.poi)
            .cloned()
            .ok_or_else(|| PromptError::UnknownPoi(target.poi.clone()))?,
        k: config.k,
        subsection: s,
        tz_offset_secs: config.tz_offset_secs,
    })
}

/// Which part of a split a prompt targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Validation => "validation",
            Part::Test => "test",
        }
    }
}

/// Prompts for every trajectory of a split, ordered by part, user, start.
pub fn build_split_prompts(
    split: &DatasetSplit,
    sids: &BTreeMap<String, String>,
    config: &PromptConfig,
) -> Result<Vec<(Part, PromptInstance)>> {
    let mut per_user: BTreeMap<&str, Vec<(Part, &Trajectory)>> = BTreeMap::new();
    for (part, list) in [
        (Part::Train, &split.train),
        (Part::Validation, &split.validation),
        (Part::Test, &split.test),
    ] {
        for t in list {
            per_user.entry(t.user.as_str()).or_default().push((part, t));
        }
    }
    let mut out = Vec::new();
    for (user, mut list) in per_user {
        list.sort_by_key(|(_, t)| (t.start(), t.end()));
        let trajs: Vec<Trajectory> = list.iter().map(|(_, t)| (*t).clone()).collect();
        for (i, (part, _)) in list.iter().enumerate() {
            out.push((*part, build_prompt(user, &trajs, i, sids, config)?));
        }
    }
    out.sort_by(|a, b| (a.0, &a.1.user, a.1.target_time).cmp(&(b.0, &b.1.user, b.1.target_time)));
    Ok(out)
}
