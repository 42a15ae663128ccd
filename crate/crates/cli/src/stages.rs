//! Stage runners: read upstream artifacts, check their digests, run the
//! in-memory stage and stage its outputs for an atomic commit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sidforge_core::dataset::{read_trajectories, write_trajectories, DatasetSplit};
use sidforge_core::features::{FeatureSidecar, FeatureTable};
use sidforge_core::hsom::{SemanticId, SidEntry};
use sidforge_core::prompting::PromptRecord;
use sidforge_core::rewards::ScoreInput;

use crate::artifact::{self, comment_header, json_with_meta, jsonl_header, Meta, Staging};
use crate::config::{stage_digest, Config};
use crate::pipeline::{self, ScoreLine};

/// Version stamped into every artifact; bump when an output format changes.
pub const STAGE_VERSION: u32 = 1;

pub const STAGES: [&str; 9] = [
    "ingest",
    "featurize",
    "encode",
    "quantize",
    "continuity",
    "prompts",
    "score",
    "simulate",
    "evaluate",
];

/// Stages whose artifacts feed `stage`.
pub fn upstream(stage: &str) -> &'static [&'static str] {
    match stage {
        "featurize" => &["ingest"],
        "encode" => &["featurize"],
        "quantize" => &["encode"],
        "continuity" | "prompts" => &["ingest", "quantize"],
        "score" => &["prompts"],
        "evaluate" => &["score"],
        _ => &[],
    }
}

/// Cumulative digest of `stage` under `cfg`.
pub fn digest(cfg: &Config, stage: &str) -> Result<String> {
    let mut up: Vec<String> = Vec::new();
    if stage == "score" {
        if let Some(path) = cfg.opt("score.completions") {
            // External completions replace the prompts dependency.
            let bytes = std::fs::read(path).with_context(|| format!("reading completions {path}"))?;
            up.push(hex::encode(Sha256::digest(&bytes)));
        } else {
            up.push(digest(cfg, "prompts")?);
        }
    } else {
        for u in upstream(stage) {
            up.push(digest(cfg, u)?);
        }
    }
    let refs: Vec<&str> = up.iter().map(String::as_str).collect();
    Ok(stage_digest(stage, STAGE_VERSION, &refs, &cfg.stage_values(stage)?))
}

/// Optional path overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Paths {
    pub split_dir: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub sids: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    /// Primary output of the stage being run.
    pub out: Option<PathBuf>,
}

pub struct Ctx<'a> {
    pub cfg: &'a Config,
    pub paths: &'a Paths,
    pub force: bool,
}

impl Ctx<'_> {
    fn root(&self, name: &str) -> PathBuf {
        self.cfg.out_dir().join(name)
    }

    fn pick(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.root(default))
    }

    fn split_dir(&self) -> PathBuf {
        self.pick(&self.paths.split_dir, "split")
    }

    fn meta(&self, stage: &str) -> Result<Meta> {
        let mut config = self.cfg.values().clone();
        // Locations do not change content; keep them out so reruns into
        // another directory stay byte-identical.
        config.remove("out_dir");
        let mut up = BTreeMap::new();
        for u in upstream(stage) {
            up.insert(u.to_string(), digest(self.cfg, u)?);
        }
        Ok(Meta {
            stage: stage.into(),
            version: STAGE_VERSION,
            digest: digest(self.cfg, stage)?,
            upstream: up,
            config,
        })
    }

    /// Loads an artifact of `producer` and checks its digest.
    fn load(&self, path: &Path, producer: &str) -> Result<artifact::Loaded> {
        let loaded = artifact::load(path, producer)?;
        artifact::check(path, &loaded, producer, &digest(self.cfg, producer)?, self.force)?;
        Ok(loaded)
    }
}

/// Outcome of one stage, for logging.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub stage: String,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
    pub elapsed_ms: u128,
}

fn read_jsonl<T: DeserializeOwned>(body: &str, path: &Path) -> Result<Vec<T>> {
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}: line {}", path.display(), i + 2)))
        .collect()
}

fn jsonl<T: Serialize>(meta: &Meta, rows: &[T]) -> String {
    let mut s = jsonl_header(meta);
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("row serializes"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryLine {
    poi: String,
    category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingLine {
    poi: String,
    embedding: Vec<f64>,
}

const PARTS: [&str; 3] = ["train", "validation", "test"];

fn load_split(ctx: &Ctx) -> Result<DatasetSplit> {
    let dir = ctx.split_dir();
    let mut parts = Vec::new();
    for p in PARTS {
        let path = dir.join(format!("{p}.jsonl"));
        let loaded = ctx.load(&path, "ingest")?;
        parts.push(read_trajectories(loaded.body.as_bytes()).with_context(|| path.display().to_string())?);
    }
    let test = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(DatasetSplit::from_parts(train, validation, test))
}

fn load_sids(ctx: &Ctx) -> Result<BTreeMap<String, SemanticId>> {
    let path = ctx.pick(&ctx.paths.sids, "sids.jsonl");
    let loaded = ctx.load(&path, "quantize")?;
    let rows: Vec<SidEntry> = read_jsonl(&loaded.body, &path)?;
    Ok(rows.into_iter().map(|e| (e.poi.clone(), e.semantic_id())).collect())
}

fn load_categories(ctx: &Ctx) -> Result<BTreeMap<String, String>> {
    let path = ctx.pick(&ctx.paths.categories, "categories.jsonl");
    let loaded = ctx.load(&path, "ingest")?;
    let rows: Vec<CategoryLine> = read_jsonl(&loaded.body, &path)?;
    Ok(rows.into_iter().map(|c| (c.poi, c.category)).collect())
}

pub fn ingest(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let data = pipeline::ingest(ctx.cfg)?;
    let meta = ctx.meta("ingest")?;
    let mut st = Staging::default();
    let dir = ctx.pick(&ctx.paths.out, "split");
    for (name, list) in PARTS.iter().zip([&data.split.train, &data.split.validation, &data.split.test]) {
        let mut buf = jsonl_header(&meta).into_bytes();
        write_trajectories(&mut buf, list)?;
        st.write(&dir.join(format!("{name}.jsonl")), &String::from_utf8(buf)?)?;
    }
    let cats: Vec<CategoryLine> = data
        .categories()
        .into_iter()
        .map(|(poi, category)| CategoryLine { poi, category })
        .collect();
    st.write(&ctx.pick(&ctx.paths.categories, "categories.jsonl"), &jsonl(&meta, &cats))?;
    let summary = serde_json::json!({
        "source": ctx.cfg.opt("ingest.input").unwrap_or("synthetic"),
        "rows_loaded": data.loaded,
        "rows_rejected": data.rejects.len(),
        "first_rejects": data.rejects.iter().take(5).map(|r| format!("line {}: {}", r.line, r.message)).collect::<Vec<_>>(),
        "records_retained": data.records.len(),
        "pois": data.split.poi_vocabulary.len(),
        "users": data.split.user_vocabulary.len(),
        "trajectories": {
            "train": data.split.train.len(),
            "validation": data.split.validation.len(),
            "test": data.split.test.len(),
        },
        "removed_unseen": data.split.removed_unseen,
    });
    st.write(&ctx.root("ingest_report.json"), &json_with_meta(&meta, &summary))?;
    Ok((st, summary))
}

pub fn featurize(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let split = load_split(ctx)?;
    let table = pipeline::featurize(ctx.cfg, &split)?;
    let meta = ctx.meta("featurize")?;
    let mut st = Staging::default();
    let out = ctx.pick(&ctx.paths.out, "features.jsonl");
    let mut buf = jsonl_header(&meta).into_bytes();
    table.write_jsonl(&mut buf)?;
    st.write(&out, &String::from_utf8(buf)?)?;
    st.write(&sidecar_path(&out), &json_with_meta(&meta, &table.sidecar()))?;
    let layout = table.vocab.layout();
    let summary = serde_json::json!({ "pois": table.vectors.len(), "width": layout.total(), "layout": layout });
    Ok((st, summary))
}

fn sidecar_path(features: &Path) -> PathBuf {
    features.with_extension("vocab.json")
}

fn load_features(ctx: &Ctx) -> Result<FeatureTable> {
    let path = ctx.pick(&ctx.paths.features, "features.jsonl");
    let loaded = ctx.load(&path, "featurize")?;
    let side = ctx.load(&sidecar_path(&path), "featurize")?;
    let sidecar: FeatureSidecar = serde_json::from_str(&side.body)?;
    Ok(FeatureTable::read_jsonl(loaded.body.as_bytes(), &sidecar)?)
}

pub fn encode(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let table = load_features(ctx)?;
    let encoded = pipeline::encode(ctx.cfg, &table.dense_matrix())?;
    let meta = ctx.meta("encode")?;
    let rows: Vec<EmbeddingLine> = table
        .vectors
        .iter()
        .zip(&encoded.embeddings)
        .map(|(v, e)| EmbeddingLine {
            poi: v.poi.clone(),
            embedding: e.clone(),
        })
        .collect();
    let mut st = Staging::default();
    st.write(&ctx.pick(&ctx.paths.out, "embeddings.jsonl"), &jsonl(&meta, &rows))?;
    let summary = match &encoded.encoder {
        Some(t) => {
            st.write(&ctx.root("encoder.ckpt"), &(comment_header(&meta) + &t.params.to_text()))?;
            let first = t.loss_history.first().copied().unwrap_or(f64::NAN);
            let last = t.loss_history.last().copied().unwrap_or(f64::NAN);
            serde_json::json!({
                "encoder": "on",
                "pois": rows.len(),
                "first_epoch_loss": first,
                "last_epoch_loss": last,
                "loss_decreased": t.loss_decreased(5),
                "params_digest": t.params.digest(),
            })
        }
        None => serde_json::json!({ "encoder": "off", "pois": rows.len() }),
    };
    Ok((st, summary))
}

pub fn quantize(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let path = ctx.pick(&ctx.paths.embeddings, "embeddings.jsonl");
    let loaded = ctx.load(&path, "encode")?;
    let rows: Vec<EmbeddingLine> = read_jsonl(&loaded.body, &path)?;
    if rows.is_empty() {
        bail!("{}: no embeddings", path.display());
    }
    let pois: Vec<String> = rows.iter().map(|r| r.poi.clone()).collect();
    let embeddings: Vec<Vec<f64>> = rows.into_iter().map(|r| r.embedding).collect();
    let q = pipeline::quantize(ctx.cfg, &pois, &embeddings)?;
    let meta = ctx.meta("quantize")?;
    let table: Vec<SidEntry> = q
        .sids
        .iter()
        .map(|(p, s)| SidEntry::new(p, s))
        .collect::<Result<_, _>>()?;
    let mut st = Staging::default();
    st.write(&ctx.pick(&ctx.paths.out, "sids.jsonl"), &jsonl(&meta, &table))?;
    st.write(&ctx.root("hsom.ckpt"), &(comment_header(&meta) + &q.model.to_text()))?;
    st.write(&ctx.root("quantize_report.json"), &json_with_meta(&meta, &q.summary))?;
    Ok((st, serde_json::to_value(&q.summary)?))
}

pub fn continuity(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let sids = load_sids(ctx)?;
    let categories = load_categories(ctx)?;
    let report = pipeline::continuity(ctx.cfg, &sids, &categories)?;
    let meta = ctx.meta("continuity")?;
    let mut st = Staging::default();
    let out = ctx.pick(&ctx.paths.out, "continuity.json");
    st.write(&out, &json_with_meta(&meta, &report))?;
    st.write(&out.with_extension("csv"), &(comment_header(&meta) + &report.to_csv()))?;
    let top: Vec<_> = report
        .top_categories(10)
        .into_iter()
        .map(|(c, s)| serde_json::json!({ "category": c, "nicc": s.nicc, "size": s.size }))
        .collect();
    let summary = serde_json::json!({
        "global_avg_nicc": report.global_avg_nicc,
        "global_avg_nics": report.global_avg_nics,
        "excluded": report.excluded,
        "top_categories": top,
    });
    Ok((st, summary))
}

pub fn prompts(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let split = load_split(ctx)?;
    let rendered = pipeline::render_sids(&load_sids(ctx)?)?;
    let records = pipeline::prompts(ctx.cfg, &split, &rendered)?;
    let meta = ctx.meta("prompts")?;
    let mut st = Staging::default();
    st.write(&ctx.pick(&ctx.paths.out, "prompts.jsonl"), &jsonl(&meta, &records))?;
    let mut per_split: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *per_split.entry(r.split.clone().unwrap_or_default()).or_default() += 1;
    }
    Ok((st, serde_json::json!({ "prompts": records.len(), "per_split": per_split })))
}

pub fn score(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let weights = pipeline::score_weights(ctx.cfg)?;
    let meta = ctx.meta("score")?;
    let mut st = Staging::default();
    let (inputs, source) = match ctx.cfg.opt("score.completions") {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading completions {path}"))?;
            let body = match text.split_once('\n') {
                Some((first, rest)) if first.starts_with("{\"_meta\"") => rest.to_string(),
                _ => text,
            };
            (read_jsonl::<ScoreInput>(&body, Path::new(path))?, "file")
        }
        None => {
            let path = ctx.pick(&ctx.paths.prompts, "prompts.jsonl");
            let loaded = ctx.load(&path, "prompts")?;
            let prompts: Vec<PromptRecord> = read_jsonl(&loaded.body, &path)?;
            let global = baseline_popularity(ctx)?;
            let inputs = pipeline::popularity_completions(&prompts, &global, weights.k)?;
            st.write(&ctx.root("completions.jsonl"), &jsonl(&meta, &inputs))?;
            (inputs, "popularity-baseline")
        }
    };
    let lines = pipeline::score(&weights, &inputs);
    st.write(&ctx.pick(&ctx.paths.out, "scores.jsonl"), &jsonl(&meta, &lines))?;
    let n = lines.len().max(1) as f64;
    let summary = serde_json::json!({
        "completions": source,
        "scored": lines.len(),
        "mean_total": lines.iter().map(|l| l.breakdown.total).sum::<f64>() / n,
        "format_ok": lines.iter().filter(|l| l.breakdown.format == 1.0).count(),
        "max_total": weights.max_total(),
    });
    Ok((st, summary))
}

/// Training-split popularity, read from the ingest and quantize artifacts.
fn baseline_popularity(ctx: &Ctx) -> Result<Vec<String>> {
    let split = load_split(ctx)?;
    let rendered = pipeline::render_sids(&load_sids(ctx)?)?;
    Ok(pipeline::global_popularity(&split, &rendered))
}

pub fn simulate(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let (run, summary) = pipeline::simulate(ctx.cfg)?;
    let meta = ctx.meta("simulate")?;
    let mut st = Staging::default();
    let out = ctx.pick(&ctx.paths.out, "simulate_curve.csv");
    st.write(&out, &(comment_header(&meta) + &run.curve_csv()))?;
    st.write(&ctx.root("simulate_report.json"), &json_with_meta(&meta, &summary))?;
    let value = serde_json::json!({
        "final_mrr": summary.report.mrr,
        "uniform_mrr": summary.uniform_mrr,
        "acc@1": summary.report.acc(1),
        "acc@10": summary.report.acc(10),
        "final_mean_distinct": summary.final_mean_distinct,
    });
    Ok((st, value))
}

pub fn evaluate(ctx: &Ctx) -> Result<(Staging, serde_json::Value)> {
    let path = ctx.pick(&ctx.paths.scores, "scores.jsonl");
    let loaded = ctx.load(&path, "score")?;
    let lines: Vec<ScoreLine> = read_jsonl(&loaded.body, &path)?;
    let report = pipeline::evaluate(ctx.cfg, &lines)?;
    let meta = ctx.meta("evaluate")?;
    let mut st = Staging::default();
    st.write(&ctx.pick(&ctx.paths.out, "evaluation.json"), &json_with_meta(&meta, &report))?;
    Ok((st, serde_json::to_value(&report)?))
}

/// Runs one stage and commits its artifacts.
pub fn run(stage: &str, ctx: &Ctx) -> Result<Outcome> {
    let start = Instant::now();
    let (staging, summary) = match stage {
        "ingest" => ingest(ctx),
        "featurize" => featurize(ctx),
        "encode" => encode(ctx),
        "quantize" => quantize(ctx),
        "continuity" => continuity(ctx),
        "prompts" => prompts(ctx),
        "score" => score(ctx),
        "simulate" => simulate(ctx),
        "evaluate" => evaluate(ctx),
        other => bail!("unknown stage `{other}`"),
    }
    .with_context(|| format!("stage `{stage}` failed"))?;
    let artifacts = staging.commit()?;
    Ok(Outcome {
        stage: stage.into(),
        artifacts,
        summary,
        elapsed_ms: start.elapsed().as_millis(),
    })
}
