//! The stages as in-memory functions of the configuration. The stage
//! runners in [`crate::stages`] wrap these with artifact I/O.

use std::collections::{BTreeMap, HashMap};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sidforge_core::continuity::{self, ContinuityReport, IdSpace};
use sidforge_core::dataset::{
    build_trajectories, load_checkins, preprocess, split_chronological, synth, CheckinRecord, ColumnMapping,
    DatasetSplit, FilterConfig, RowError, SplitRatios, HOUR,
};
use sidforge_core::encoder::{train_encoder, EncoderConfig, TrainedEncoder};
use sidforge_core::features::{FeatureConfig, FeatureTable};
use sidforge_core::hsom::{parse_grids, residual_contraction, HsomConfig, HsomModel, LayerReport, Schedule, SemanticId};
use sidforge_core::prompting::{build_split_prompts, parse_prompt, PromptConfig, PromptRecord};
use sidforge_core::rewards::{parse_completion, render_completion, score_parsed, RewardBreakdown, RewardWeights, ScoreInput};
use sidforge_core::rftsim::{
    self, uniform_mrr, EnvConfig, EvalMode, EvalReport, KlMode, SynthEnv, ToyConfig, ToyRun,
};

use crate::config::Config;

pub struct Ingested {
    pub records: Vec<CheckinRecord>,
    /// Rows read before filtering.
    pub loaded: usize,
    pub rejects: Vec<RowError>,
    /// Planted structure when the corpus is synthetic.
    pub synth: Option<synth::SynthCorpus>,
    pub split: DatasetSplit,
}

impl Ingested {
    /// Category of every retained POI.
    pub fn categories(&self) -> BTreeMap<String, String> {
        self.records.iter().map(|r| (r.poi.clone(), r.category.clone())).collect()
    }
}

pub fn synth_config(cfg: &Config) -> Result<synth::SynthConfig> {
    Ok(synth::SynthConfig {
        clusters: cfg.get("ingest.synth_clusters")?,
        users: cfg.get("ingest.synth_users")?,
        pois: cfg.get("ingest.synth_pois")?,
        days: cfg.get("ingest.synth_days")?,
        seed: cfg.stage_seed("ingest")?,
        ..Default::default()
    })
}

fn column_mapping(cfg: &Config) -> Result<ColumnMapping> {
    let delim = match cfg.raw("ingest.delimiter") {
        "tab" | "\\t" => b'\t',
        d if d.len() == 1 => d.as_bytes()[0],
        d => bail!("ingest.delimiter must be one character or `tab`, got `{d}`"),
    };
    Ok(ColumnMapping {
        user: cfg.raw("ingest.col_user").into(),
        poi: cfg.raw("ingest.col_poi").into(),
        category: cfg.raw("ingest.col_category").into(),
        timestamp: cfg.raw("ingest.col_timestamp").into(),
        lat: cfg.raw("ingest.col_lat").into(),
        lon: cfg.raw("ingest.col_lon").into(),
        delimiter: delim,
    })
}

/// Loads (or generates) check-ins, filters them, builds trajectories and
/// splits them.
pub fn ingest(cfg: &Config) -> Result<Ingested> {
    let (raw, rejects, synth) = match cfg.opt("ingest.input") {
        Some(path) => {
            let report = load_checkins(path.as_ref(), &column_mapping(cfg)?)?;
            (report.records, report.rejects, None)
        }
        None => {
            let corpus = synth::generate(&synth_config(cfg)?);
            (corpus.records.clone(), Vec::new(), Some(corpus))
        }
    };
    let loaded = raw.len();
    let filter = FilterConfig {
        min_poi_visits: cfg.get("ingest.min_poi_visits")?,
        min_user_records: cfg.get("ingest.min_user_records")?,
    };
    let records = preprocess(raw, filter)?;
    let hours: f64 = cfg.get("ingest.delta_hours")?;
    let window = (hours * HOUR as f64).round() as i64;
    let r: Vec<f64> = cfg.get_list("ingest.ratios")?;
    let [train, validation, test] = r[..] else {
        bail!("ingest.ratios needs three values");
    };
    let split = split_chronological(build_trajectories(&records, window)?, SplitRatios::new(train, validation, test)?)?;
    Ok(Ingested {
        records,
        loaded,
        rejects,
        synth,
        split,
    })
}

pub fn feature_config(cfg: &Config) -> Result<FeatureConfig> {
    Ok(FeatureConfig {
        plus_code_len: cfg.get("featurize.plus_code_len")?,
        tz_offset_secs: cfg.get("featurize.tz_offset_secs")?,
        top_slots: cfg.get("featurize.top_slots")?,
        top_visitors: cfg.get("featurize.top_visitors")?,
    })
}

pub fn featurize(cfg: &Config, split: &DatasetSplit) -> Result<FeatureTable> {
    Ok(FeatureTable::build(split, &feature_config(cfg)?)?)
}

pub fn encoder_config(cfg: &Config) -> Result<EncoderConfig> {
    Ok(EncoderConfig {
        hidden: cfg.get("encode.hidden")?,
        latent: cfg.get("encode.dim")?,
        temperature: cfg.get("encode.tau")?,
        noise_std: cfg.get("encode.noise")?,
        batch: cfg.get("encode.batch")?,
        learning_rate: cfg.get("encode.lr")?,
        epochs: cfg.get("encode.epochs")?,
        seed: cfg.stage_seed("encode")?,
        ..Default::default()
    })
}

pub struct Encoded {
    pub embeddings: Vec<Vec<f64>>,
    /// `None` when the encoder is switched off and features pass through.
    pub encoder: Option<TrainedEncoder>,
}

pub fn encode(cfg: &Config, features: &[Vec<f64>]) -> Result<Encoded> {
    if !cfg.get::<bool>("encode.enabled")? {
        return Ok(Encoded {
            embeddings: features.to_vec(),
            encoder: None,
        });
    }
    let trained = train_encoder(features, &encoder_config(cfg)?)?;
    Ok(Encoded {
        embeddings: trained.embeddings.clone(),
        encoder: Some(trained),
    })
}

pub fn grids(cfg: &Config) -> Result<Vec<(usize, usize)>> {
    Ok(parse_grids(cfg.raw("quantize.grids"))?)
}

pub fn hsom_config(cfg: &Config) -> Result<HsomConfig> {
    Ok(HsomConfig {
        grids: grids(cfg)?,
        schedule: Schedule {
            epochs: cfg.get("quantize.epochs")?,
            batch_size: cfg.get("quantize.batch")?,
            ..Default::default()
        },
        init_scale: cfg.get("quantize.init_scale")?,
        seed: cfg.stage_seed("quantize")?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizeSummary {
    pub layers: Vec<LayerReport>,
    pub mean_input_norm: f64,
    pub mean_final_residual_norm: f64,
    pub pois: usize,
    pub collisions: usize,
}

pub struct Quantized {
    pub model: HsomModel,
    pub sids: BTreeMap<String, SemanticId>,
    pub summary: QuantizeSummary,
}

pub fn quantize(cfg: &Config, pois: &[String], embeddings: &[Vec<f64>]) -> Result<Quantized> {
    if pois.len() != embeddings.len() {
        bail!("{} POIs but {} embeddings", pois.len(), embeddings.len());
    }
    let (model, layers) = HsomModel::train(embeddings, &hsom_config(cfg)?)?;
    let sids = model.assign_sids(pois.iter().map(String::as_str).zip(embeddings.iter().map(Vec::as_slice)))?;
    let (before, after) = residual_contraction(&model, embeddings)?;
    let collisions = sids.values().filter(|s| s.disambiguator > 0).count();
    Ok(Quantized {
        model,
        summary: QuantizeSummary {
            layers,
            mean_input_norm: before,
            mean_final_residual_norm: after,
            pois: pois.len(),
            collisions,
        },
        sids,
    })
}

/// ID-space coordinates for continuity: layer 1 only, or every layer
/// concatenated, with the matching lattice.
pub fn continuity_inputs(
    cfg: &Config,
    sids: &BTreeMap<String, SemanticId>,
) -> Result<(BTreeMap<String, Vec<f64>>, IdSpace)> {
    let grids = grids(cfg)?;
    let concat = match cfg.raw("continuity.coords") {
        "layer1" => false,
        "concat" => true,
        other => bail!("continuity.coords must be `layer1` or `concat`, got `{other}`"),
    };
    let space = match cfg.opt("continuity.space") {
        Some(s) => IdSpace::parse(s)?,
        None if concat => IdSpace::grids(&grids)?,
        None => IdSpace::grid(grids[0].0, grids[0].1)?,
    };
    let coords = sids
        .iter()
        .map(|(p, s)| {
            let used = if concat { &s.codes[..] } else { &s.codes[..1] };
            let v = used.iter().flat_map(|c| [c.row as f64, c.col as f64]).collect();
            (p.clone(), v)
        })
        .collect();
    Ok((coords, space))
}

pub fn continuity(
    cfg: &Config,
    sids: &BTreeMap<String, SemanticId>,
    categories: &BTreeMap<String, String>,
) -> Result<ContinuityReport> {
    let (coords, space) = continuity_inputs(cfg, sids)?;
    Ok(continuity::evaluate(
        &coords,
        categories,
        &space,
        cfg.get("continuity.samples")?,
        cfg.stage_seed("continuity")?,
    )?)
}

pub fn prompt_config(cfg: &Config) -> Result<PromptConfig> {
    Ok(PromptConfig {
        k: cfg.get("prompts.k")?,
        history_cap: cfg.get("prompts.history_cap")?,
        tz_offset_secs: cfg.get("prompts.tz_offset_secs")?,
        ..Default::default()
    })
}

pub fn render_sids(sids: &BTreeMap<String, SemanticId>) -> Result<BTreeMap<String, String>> {
    sids.iter()
        .map(|(p, s)| Ok((p.clone(), s.render()?)))
        .collect()
}

pub fn prompts(cfg: &Config, split: &DatasetSplit, rendered: &BTreeMap<String, String>) -> Result<Vec<PromptRecord>> {
    Ok(build_split_prompts(split, rendered, &prompt_config(cfg)?)?
        .into_iter()
        .map(|(part, p)| p.to_record(Some(part.name())))
        .collect())
}

pub const BASELINE_THINK: &str = "Places this user visits most often come first, then places popular with everyone.";

/// Popularity baseline: the SIDs of the prompt's own history ordered by
/// visit count (latest visit breaks ties), then globally popular SIDs.
pub fn popularity_completions(prompts: &[PromptRecord], global: &[String], k: usize) -> Result<Vec<ScoreInput>> {
    prompts
        .iter()
        .map(|p| {
            let parsed = parse_prompt(&p.prompt).with_context(|| format!("prompt of user {}", p.user))?;
            let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
            for (i, line) in parsed.history.iter().chain(&parsed.current).enumerate() {
                let e = stats.entry(line.sid.as_str()).or_insert((0, 0));
                e.0 += 1;
                e.1 = i;
            }
            let mut own: Vec<(&str, (usize, usize))> = stats.into_iter().collect();
            own.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(b.1 .1.cmp(&a.1 .1)).then(a.0.cmp(b.0)));
            let mut items: Vec<String> = own.into_iter().map(|(s, _)| s.to_string()).take(k).collect();
            for g in global {
                if items.len() >= k {
                    break;
                }
                if !items.contains(g) {
                    items.push(g.clone());
                }
            }
            Ok(ScoreInput {
                completion: render_completion(BASELINE_THINK, &items),
                ground_truth_sid: p.ground_truth_sid.clone(),
            })
        })
        .collect()
}

/// Rendered SIDs ordered by training-split visit count, then SID text.
pub fn global_popularity(split: &DatasetSplit, rendered: &BTreeMap<String, String>) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in split.train.iter().flat_map(|t| &t.entries) {
        if let Some(s) = rendered.get(&e.poi) {
            *counts.entry(s.as_str()).or_default() += 1;
        }
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(s, _)| s.to_string()).collect()
}

pub fn score_weights(cfg: &Config) -> Result<RewardWeights> {
    let mut w = RewardWeights::parse(cfg.raw("score.weights"))?;
    w.k = cfg.get("score.k")?;
    w.target_length = cfg.get("score.target_len")?;
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub ground_truth_sid: String,
    pub items: Vec<String>,
    pub syntax_ok: bool,
    #[serde(flatten)]
    pub breakdown: RewardBreakdown,
}

pub fn score(weights: &RewardWeights, inputs: &[ScoreInput]) -> Vec<ScoreLine> {
    inputs
        .iter()
        .map(|i| {
            let p = parse_completion(&i.completion);
            ScoreLine {
                breakdown: score_parsed(&p, &i.ground_truth_sid, weights),
                ground_truth_sid: i.ground_truth_sid.clone(),
                syntax_ok: p.syntax_ok,
                items: p.items,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub env: EnvConfig,
    pub config: ToyConfig,
    pub report: EvalReport,
    pub uniform_mrr: f64,
    pub final_mean_distinct: f64,
}

pub fn toy_config(cfg: &Config) -> Result<ToyConfig> {
    let weights = RewardWeights::parse(cfg.raw("simulate.weights"))?;
    let kl_mode = match cfg.raw("simulate.kl_mode") {
        "natural" => KlMode::Natural,
        "exact" => KlMode::Exact,
        other => bail!("simulate.kl_mode must be `natural` or `exact`, got `{other}`"),
    };
    let seed = cfg.stage_seed("simulate")?;
    Ok(ToyConfig {
        steps: cfg.get("simulate.steps")?,
        group: cfg.get("simulate.group")?,
        learning_rate: cfg.get("simulate.lr")?,
        kl_coeff: cfg.get("simulate.kl")?,
        temperature: cfg.get("simulate.temperature")?,
        weights,
        with_replacement: cfg.get("simulate.with_replacement")?,
        kl_mode,
        eval_every: cfg.get("simulate.eval_every")?,
        eval_mode: EvalMode::Sampled {
            draws: cfg.get("simulate.eval_draws")?,
            seed,
        },
        seed,
    })
}

pub fn simulate(cfg: &Config) -> Result<(ToyRun, SimulateSummary)> {
    let toy = toy_config(cfg)?;
    let env_cfg = EnvConfig::parse(cfg.raw("simulate.env"), toy.seed)?;
    let env = SynthEnv::generate(&env_cfg);
    let run = rftsim::train_toy(&env, &toy)?;
    let summary = SimulateSummary {
        uniform_mrr: uniform_mrr(env_cfg.pois, toy.weights.k),
        final_mean_distinct: run.curve.last().map_or(f64::NAN, |p| p.mean_distinct),
        report: run.report.clone(),
        env: env_cfg,
        config: toy,
    };
    Ok((run, summary))
}

/// Acc@k and MRR of scored completions.
pub fn evaluate(cfg: &Config, lines: &[ScoreLine]) -> Result<EvalReport> {
    let ks: Vec<usize> = cfg.get_list("evaluate.ks")?;
    let lists: Vec<Vec<String>> = lines.iter().map(|l| l.items.clone()).collect();
    let gts: Vec<String> = lines.iter().map(|l| l.ground_truth_sid.clone()).collect();
    Ok(rftsim::evaluate(&lists, &gts, &ks, cfg.get("evaluate.mrr_k")?))
}
