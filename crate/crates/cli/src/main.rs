use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use sidforge::{run, Config, Ctx, Outcome, Paths, STAGES};

#[derive(Parser)]
#[command(name = "sidforge", version, about = "Semantic IDs, list rewards and a toy RFT harness for next-POI recommendation")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    // Not global: clap lets occurrences after the subcommand silently
    // replace the ones before it.
    /// Override one configuration key (repeatable; before the subcommand).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory holding every artifact.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Accept upstream artifacts produced under a different configuration.
    #[arg(long, global = true)]
    force: bool,
    /// One JSON object per log line.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Load (or generate) check-ins, filter, build trajectories and split.
    Ingest(IngestArgs),
    /// One-hot POI feature vectors from the training split.
    Featurize(FeaturizeArgs),
    /// Contrastive encoder over the feature vectors.
    Encode(EncodeArgs),
    /// Residual SOM training and the SID table.
    Quantize(QuantizeArgs),
    /// NICC / NICS of the SID assignment against a uniform null.
    Continuity(ContinuityArgs),
    /// Question prompts with long- and short-term history.
    Prompts(PromptsArgs),
    /// Reward breakdowns of completions (popularity baseline by default).
    Score(ScoreArgs),
    /// GRPO-style toy policy on a synthetic environment.
    Simulate(SimulateArgs),
    /// Acc@k and MRR of the scored completions.
    Evaluate(EvaluateArgs),
    /// Every stage in order.
    All(AllArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct IngestArgs {
    /// Check-in CSV/TSV; the bundled synthetic corpus when omitted.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    delta_hours: Option<String>,
    /// Directory for the split files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the synthetic corpus.
    #[arg(long)]
    seed_synth: Option<String>,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    plus_code_len: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `off` passes raw feature vectors through unchanged.
    #[arg(long, value_parser = ["on", "off"])]
    encoder: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Grid per layer, e.g. `4x6,4x6,8x8,8x8`.
    #[arg(long)]
    grids: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ContinuityArgs {
    #[arg(long)]
    sids: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
    /// `linear:N`, `grid:HxW` or `grids:HxW,...`.
    #[arg(long)]
    space: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `layer1` or `concat`.
    #[arg(long, value_parser = ["layer1", "concat"])]
    coords: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptsArgs {
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    sids: Option<PathBuf>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSON lines of `{completion, ground_truth_sid}`.
    #[arg(long)]
    completions: Option<String>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// `default`, `unit`, `no_rr`, ... or five comma-separated weights.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    target_len: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// `synth:<pois>x<contexts>`.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    with_replacement: bool,
    #[arg(long, value_parser = ["natural", "exact"])]
    kl_mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllArgs {
    /// Master seed.
    #[arg(long)]
    seed: Option<String>,
}

/// Flag values routed to configuration keys.
fn overrides(stage: &Stage) -> Vec<(&'static str, Option<String>)> {
    match stage {
        Stage::Ingest(a) => vec![
            ("ingest.input", a.input.clone()),
            ("ingest.delta_hours", a.delta_hours.clone()),
            ("ingest.seed", a.seed_synth.clone()),
        ],
        Stage::Featurize(a) => vec![("featurize.plus_code_len", a.plus_code_len.clone())],
        Stage::Encode(a) => vec![
            ("encode.dim", a.dim.clone()),
            ("encode.tau", a.tau.clone()),
            ("encode.epochs", a.epochs.clone()),
            ("encode.seed", a.seed.clone()),
            ("encode.enabled", a.encoder.as_ref().map(|e| (e == "on").to_string())),
        ],
        Stage::Quantize(a) => vec![
            ("quantize.grids", a.grids.clone()),
            ("quantize.epochs", a.epochs.clone()),
            ("quantize.seed", a.seed.clone()),
        ],
        Stage::Continuity(a) => vec![
            ("continuity.space", a.space.clone()),
            ("continuity.samples", a.samples.clone()),
            ("continuity.seed", a.seed.clone()),
            ("continuity.coords", a.coords.clone()),
        ],
        Stage::Prompts(a) => vec![("prompts.k", a.k.clone())],
        Stage::Score(a) => vec![
            ("score.completions", a.completions.clone()),
            ("score.weights", a.weights.clone()),
            ("score.k", a.k.clone()),
            ("score.target_len", a.target_len.clone()),
        ],
        Stage::Simulate(a) => vec![
            ("simulate.env", a.env.clone()),
            ("simulate.steps", a.steps.clone()),
            ("simulate.group", a.group.clone()),
            ("simulate.weights", a.weights.clone()),
            ("simulate.seed", a.seed.clone()),
            ("simulate.with_replacement", a.with_replacement.then(|| "true".to_string())),
            ("simulate.kl_mode", a.kl_mode.clone()),
        ],
        Stage::All(a) => vec![("seed", a.seed.clone())],
        Stage::Evaluate(_) | Stage::Config => Vec::new(),
    }
}

fn paths(stage: &Stage) -> Paths {
    let mut p = Paths::default();
    match stage {
        Stage::Ingest(a) => p.out = a.out.clone(),
        Stage::Featurize(a) => {
            p.split_dir = a.split.clone();
            p.out = a.out.clone();
        }
        Stage::Encode(a) => {
            p.features = a.features.clone();
            p.out = a.out.clone();
        }
        Stage::Quantize(a) => {
            p.embeddings = a.embeddings.clone();
            p.out = a.out.clone();
        }
        Stage::Continuity(a) => {
            p.sids = a.sids.clone();
            p.categories = a.categories.clone();
            p.out = a.out.clone();
        }
        Stage::Prompts(a) => {
            p.split_dir = a.split.clone();
            p.sids = a.sids.clone();
            p.out = a.out.clone();
        }
        Stage::Score(a) => {
            p.prompts = a.prompts.clone();
            p.out = a.out.clone();
        }
        Stage::Simulate(a) => p.out = a.out.clone(),
        Stage::Evaluate(a) => {
            p.scores = a.scores.clone();
            p.out = a.out.clone();
        }
        Stage::All(_) | Stage::Config => {}
    }
    p
}

fn stage_names(stage: &Stage) -> Vec<&'static str> {
    match stage {
        Stage::Ingest(_) => vec!["ingest"],
        Stage::Featurize(_) => vec!["featurize"],
        Stage::Encode(_) => vec!["encode"],
        Stage::Quantize(_) => vec!["quantize"],
        Stage::Continuity(_) => vec!["continuity"],
        Stage::Prompts(_) => vec!["prompts"],
        Stage::Score(_) => vec!["score"],
        Stage::Simulate(_) => vec!["simulate"],
        Stage::Evaluate(_) => vec!["evaluate"],
        Stage::All(_) => STAGES.to_vec(),
        Stage::Config => Vec::new(),
    }
}

fn build_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.set("out_dir", &dir.display().to_string())?;
    }
    for (key, value) in overrides(&cli.stage) {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(cfg)
}

fn log_outcome(o: &Outcome, json: bool) {
    if json {
        let line = serde_json::json!({
            "stage": o.stage,
            "status": "ok",
            "elapsed_ms": o.elapsed_ms,
            "artifacts": o.artifacts,
            "summary": o.summary,
        });
        println!("{line}");
    } else {
        println!("[{}] ok in {} ms", o.stage, o.elapsed_ms);
        for a in &o.artifacts {
            println!("  wrote {}", a.display());
        }
        println!("  {}", o.summary);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            report_error(None, &e, cli.json);
            return ExitCode::from(2);
        }
    };
    if matches!(cli.stage, Stage::Config) {
        print!("{cfg}");
        return ExitCode::SUCCESS;
    }
    let paths = paths(&cli.stage);
    let ctx = Ctx {
        cfg: &cfg,
        paths: &paths,
        force: cli.force,
    };
    for stage in stage_names(&cli.stage) {
        match run(stage, &ctx) {
            Ok(o) => log_outcome(&o, cli.json),
            Err(e) => {
                report_error(Some(stage), &e, cli.json);
                return ExitCode::FAILURE;
            }
        }
    }
    ExitCode::SUCCESS
}

fn report_error(stage: Option<&str>, e: &anyhow::Error, json: bool) {
    if json {
        let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
        println!("{}", serde_json::json!({ "stage": stage, "status": "error", "error": chain }));
    } else {
        eprintln!("error: {e:#}");
    }
}
