//! Desk-scale reinforcement fine-tuning harness.
//!
//! A [`ToyPolicy`] holds one logit vector per context. A rollout samples `k`
//! POIs as a ranked answer, wraps it in a fixed well-formed completion and
//! scores it with the reward module. Group-relative advantages then drive a
//! REINFORCE step with a KL penalty towards the initial logits.

pub mod metrics;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rewards::{render_completion, total_reward, RewardBreakdown, RewardWeights};
use crate::{derive_seed, seeded_rng};
pub use metrics::{acc_at_k, evaluate, mrr, uniform_mrr, EvalReport};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("group size must be >= 2, got {0}")]
    GroupTooSmall(usize),
    #[error("list length {k} exceeds vocabulary {n}")]
    VocabTooSmall { k: usize, n: usize },
    #[error("non-finite logits in context {context} at step {step}")]
    Diverged { context: usize, step: usize },
    #[error("invalid environment `{0}`")]
    BadEnv(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// `(r_i - mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], variance_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(SimError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(variance_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

fn log_softmax(logits: &[f64], temperature: f64, mask: Option<&[bool]>) -> Vec<f64> {
    let live = |i: usize| mask.is_none_or(|m| !m[i]);
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled
        .iter()
        .enumerate()
        .filter(|(i, _)| live(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + scaled
            .iter()
            .enumerate()
            .filter(|(i, _)| live(*i))
            .map(|(_, v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    scaled
        .iter()
        .enumerate()
        .map(|(i, v)| if live(i) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn sample_index<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in logp.iter().enumerate() {
        if *lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    /// One logit vector per context over the POI vocabulary.
    pub logits: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl ToyPolicy {
    pub fn vocab(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn probs(&self, context: usize) -> Vec<f64> {
        log_softmax(&self.logits[context], self.temperature, None)
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    /// Draws `k` items; without replacement the distribution is renormalised
    /// over the remaining items after each draw.
    pub fn sample<R: Rng + ?Sized>(&self, context: usize, k: usize, with_replacement: bool, rng: &mut R) -> Vec<usize> {
        let logits = &self.logits[context];
        if with_replacement {
            let lp = log_softmax(logits, self.temperature, None);
            return (0..k).map(|_| sample_index(&lp, rng)).collect();
        }
        let mut taken = vec![false; logits.len()];
        let mut out = Vec::with_capacity(k);
        for _ in 0..k.min(logits.len()) {
            let lp = log_softmax(logits, self.temperature, Some(&taken));
            let i = sample_index(&lp, rng);
            taken[i] = true;
            out.push(i);
        }
        out
    }

    /// Log-probability of drawing exactly `seq` in order.
    pub fn sequence_log_prob(&self, context: usize, seq: &[usize], with_replacement: bool) -> f64 {
        let logits = &self.logits[context];
        let mut taken = vec![false; logits.len()];
        let mut total = 0.0;
        for &i in seq {
            let lp = log_softmax(logits, self.temperature, (!with_replacement).then_some(&taken[..]));
            total += lp[i];
            if !with_replacement {
                taken[i] = true;
            }
        }
        total
    }

    /// Gradient of [`Self::sequence_log_prob`] with respect to the logits.
    pub fn sequence_log_prob_grad(&self, context: usize, seq: &[usize], with_replacement: bool) -> Vec<f64> {
        let logits = &self.logits[context];
        let t = self.temperature;
        let mut taken = vec![false; logits.len()];
        let mut g = vec![0.0; logits.len()];
        for &i in seq {
            let lp = log_softmax(logits, t, (!with_replacement).then_some(&taken[..]));
            for (v, lpv) in lp.iter().enumerate() {
                if *lpv != f64::NEG_INFINITY {
                    g[v] -= lpv.exp() / t;
                }
            }
            g[i] += 1.0 / t;
            if !with_replacement {
                taken[i] = true;
            }
        }
        g
    }

    /// Greedy top-`k` ranking (ties by lower index).
    pub fn top_k(&self, context: usize, k: usize) -> Vec<usize> {
        let l = &self.logits[context];
        let mut idx: Vec<usize> = (0..l.len()).collect();
        idx.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// `KL(softmax(a/T) || softmax(b/T))`.
pub fn kl_divergence(a: &[f64], b: &[f64], temperature: f64) -> f64 {
    let la = log_softmax(a, temperature, None);
    let lb = log_softmax(b, temperature, None);
    la.iter().zip(&lb).map(|(p, q)| p.exp() * (p - q)).sum()
}

/// Gradient of [`kl_divergence`] with respect to `a`.
pub fn kl_gradient(a: &[f64], b: &[f64], temperature: f64) -> Vec<f64> {
    let la = log_softmax(a, temperature, None);
    let lb = log_softmax(b, temperature, None);
    let kl: f64 = la.iter().zip(&lb).map(|(p, q)| p.exp() * (p - q)).sum();
    la.iter()
        .zip(&lb)
        .map(|(p, q)| p.exp() * ((p - q) - kl) / temperature)
        .collect()
}

/// Toy next-POI tasks: every context prefers one hidden POI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEnv {
    /// Rendered SID of every POI.
    pub sids: Vec<String>,
    /// Ground-truth POI of each context.
    pub gt: Vec<usize>,
    /// Starting (and reference) logits of each context.
    pub base_logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub pois: usize,
    pub contexts: usize,
    /// Logit drop per similarity rank of a decoy.
    pub decay: f64,
    /// The ground truth starts at a similarity rank in this 1-based range.
    pub gt_rank: (usize, usize),
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            pois: 50,
            contexts: 20,
            decay: 0.15,
            gt_rank: (5, 30),
            seed: 0,
        }
    }
}

impl EnvConfig {
    /// Parses `synth:<pois>x<contexts>`.
    pub fn parse(spec: &str, seed: u64) -> Result<Self> {
        let bad = || SimError::BadEnv(spec.to_string());
        let dims = spec.strip_prefix("synth:").ok_or_else(bad)?;
        let (p, c) = dims.split_once('x').ok_or_else(bad)?;
        let pois: usize = p.parse().map_err(|_| bad())?;
        let contexts: usize = c.parse().map_err(|_| bad())?;
        if pois == 0 || contexts == 0 {
            return Err(bad());
        }
        let d = EnvConfig::default();
        Ok(EnvConfig {
            pois,
            contexts,
            gt_rank: (d.gt_rank.0.min(pois), d.gt_rank.1.min(pois)),
            seed,
            ..d
        })
    }
}

/// SID string of toy POI `i`; injective in `i`.
pub fn toy_sid(i: usize) -> String {
    format!("<A_{}_{}><B_{}_{}>", i / 10, i % 10, (7 * i) % 5, (3 * i) % 4)
}

impl SynthEnv {
    /// Each context ranks the POIs by a random similarity order; logits fall
    /// by `decay` per rank and the ground truth is planted at a rank drawn
    /// from `gt_rank`.
    pub fn generate(cfg: &EnvConfig) -> Self {
        let mut rng = seeded_rng(derive_seed(cfg.seed, "rftsim-env"));
        let mut gt = Vec::with_capacity(cfg.contexts);
        let mut base_logits = Vec::with_capacity(cfg.contexts);
        for _ in 0..cfg.contexts {
            let mut order: Vec<usize> = (0..cfg.pois).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let (lo, hi) = (cfg.gt_rank.0.max(1), cfg.gt_rank.1.max(cfg.gt_rank.0).min(cfg.pois));
            let r = rng.random_range(lo..=hi);
            let mut logits = vec![0.0; cfg.pois];
            for (rank, &poi) in order.iter().enumerate() {
                logits[poi] = -cfg.decay * rank as f64;
            }
            gt.push(order[r - 1]);
            base_logits.push(logits);
        }
        SynthEnv {
            sids: (0..cfg.pois).map(toy_sid).collect(),
            gt,
            base_logits,
        }
    }

    pub fn contexts(&self) -> usize {
        self.gt.len()
    }
}

/// Fixed reasoning text wrapped around every toy completion.
pub const TOY_THINK: &str = "The user keeps returning to places like the recent ones, so rank those first.";

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub context: usize,
    pub completions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

pub const VARIANCE_FLOOR: f64 = 1e-8;

#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    env: &SynthEnv,
    context: usize,
    weights: &RewardWeights,
    group: usize,
    with_replacement: bool,
    rng: &mut R,
) -> Result<RolloutGroup> {
    let k = weights.k;
    if !with_replacement && k > policy.vocab() {
        return Err(SimError::VocabTooSmall { k, n: policy.vocab() });
    }
    let gt = &env.sids[env.gt[context]];
    let mut completions = Vec::with_capacity(group);
    let mut breakdowns = Vec::with_capacity(group);
    for _ in 0..group {
        let seq = policy.sample(context, k, with_replacement, rng);
        let items: Vec<String> = seq.iter().map(|&i| env.sids[i].clone()).collect();
        breakdowns.push(total_reward(&render_completion(TOY_THINK, &items), gt, weights));
        completions.push(seq);
    }
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    let advantages = group_advantages(&rewards, VARIANCE_FLOOR)?;
    Ok(RolloutGroup {
        context,
        completions,
        rewards,
        breakdowns,
        advantages,
    })
}

/// How the KL penalty enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlMode {
    /// Euclidean gradient of the exact KL, split into sub-steps of size at
    /// most 1 so large coefficients stay stable.
    Exact,
    /// Fisher-preconditioned KL (its second-order expansion about the
    /// reference) taken as an implicit step on centred logits:
    /// `d <- (d + lr * g) / (1 + lr * beta)`.
    Natural,
}

/// Surrogate objective `mean_g A_g log pi(seq_g) - beta * KL(pi || ref)`.
pub fn surrogate_objective(
    policy: &ToyPolicy,
    group: &RolloutGroup,
    kl_coeff: f64,
    reference: &[f64],
    with_replacement: bool,
) -> f64 {
    let g = group.completions.len() as f64;
    let pg: f64 = group
        .completions
        .iter()
        .zip(&group.advantages)
        .map(|(s, a)| a * policy.sequence_log_prob(group.context, s, with_replacement))
        .sum::<f64>()
        / g;
    pg - kl_coeff * kl_divergence(&policy.logits[group.context], reference, policy.temperature)
}

/// Policy-gradient part of the surrogate gradient.
pub fn pg_gradient(policy: &ToyPolicy, group: &RolloutGroup, with_replacement: bool) -> Vec<f64> {
    let g = group.completions.len() as f64;
    let mut grad = vec![0.0; policy.vocab()];
    for (s, a) in group.completions.iter().zip(&group.advantages) {
        if *a == 0.0 {
            continue;
        }
        for (acc, v) in grad.iter_mut().zip(policy.sequence_log_prob_grad(group.context, s, with_replacement)) {
            *acc += a * v / g;
        }
    }
    grad
}

/// Exact gradient of [`surrogate_objective`].
pub fn surrogate_gradient(
    policy: &ToyPolicy,
    group: &RolloutGroup,
    kl_coeff: f64,
    reference: &[f64],
    with_replacement: bool,
) -> Vec<f64> {
    let kl = kl_gradient(&policy.logits[group.context], reference, policy.temperature);
    pg_gradient(policy, group, with_replacement)
        .into_iter()
        .zip(kl)
        .map(|(p, k)| p - kl_coeff * k)
        .collect()
}

/// One ascent step on the context of `group`.
pub fn policy_update(
    policy: &mut ToyPolicy,
    group: &RolloutGroup,
    learning_rate: f64,
    kl_coeff: f64,
    reference: &[f64],
    mode: KlMode,
    with_replacement: bool,
) {
    let pg = pg_gradient(policy, group, with_replacement);
    let t = policy.temperature;
    let logits = &mut policy.logits[group.context];
    match mode {
        KlMode::Exact => {
            for (l, g) in logits.iter_mut().zip(&pg) {
                *l += learning_rate * g;
            }
            // Curvature of the KL in the logits is at most 1/T^2.
            let total = learning_rate * kl_coeff;
            let steps = (total / (t * t)).ceil().max(1.0) as usize;
            let h = total / steps as f64;
            if kl_coeff > 0.0 {
                for _ in 0..steps {
                    let kg = kl_gradient(logits, reference, t);
                    for (l, g) in logits.iter_mut().zip(kg) {
                        *l -= h * g;
                    }
                }
            }
        }
        KlMode::Natural => {
            let n = logits.len() as f64;
            let ref_mean = reference.iter().sum::<f64>() / n;
            let cur_mean = logits.iter().sum::<f64>() / n;
            let shrink = 1.0 + learning_rate * kl_coeff;
            // Same as d' = (d + lr*g)/shrink, written as an increment.
            for ((l, g), r) in logits.iter_mut().zip(&pg).zip(reference) {
                let d = (*l - cur_mean) - (r - ref_mean);
                *l += learning_rate * (g - kl_coeff * d) / shrink;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub steps: usize,
    pub group: usize,
    pub learning_rate: f64,
    pub kl_coeff: f64,
    pub temperature: f64,
    pub weights: RewardWeights,
    pub with_replacement: bool,
    pub kl_mode: KlMode,
    pub eval_every: usize,
    pub eval_mode: EvalMode,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            steps: 500,
            group: 8,
            learning_rate: 0.1,
            kl_coeff: 0.01,
            temperature: 1.0,
            weights: RewardWeights::default(),
            with_replacement: false,
            kl_mode: KlMode::Natural,
            eval_every: 50,
            eval_mode: EvalMode::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub mrr: f64,
    /// Mean distinct items per sampled completion.
    pub mean_distinct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub curve: Vec<CurvePoint>,
    pub report: EvalReport,
    pub policy: ToyPolicy,
}

impl ToyRun {
    /// `step,mean_reward,acc1,acc5,acc10,mrr` rows.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,mean_reward,acc1,acc5,acc10,mrr\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{},{},{},{}\n", p.step, p.mean_reward, p.acc1, p.acc5, p.acc10, p.mrr));
        }
        s
    }
}

/// How evaluation lists are produced from the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// `draws` sampled lists per context from a fixed evaluation seed, so a
    /// uniform policy scores the random-permutation baseline.
    Sampled { draws: usize, seed: u64 },
    /// One deterministic top-k list per context.
    Greedy,
}

impl Default for EvalMode {
    fn default() -> Self {
        EvalMode::Sampled { draws: 100, seed: 0 }
    }
}

pub fn evaluate_policy(policy: &ToyPolicy, env: &SynthEnv, k: usize, mode: EvalMode) -> EvalReport {
    let mut lists = Vec::new();
    let mut gts = Vec::new();
    match mode {
        EvalMode::Greedy => {
            for c in 0..env.contexts() {
                lists.push(policy.top_k(c, k));
                gts.push(env.gt[c]);
            }
        }
        EvalMode::Sampled { draws, seed } => {
            let mut rng = seeded_rng(derive_seed(seed, "rftsim-eval"));
            for c in 0..env.contexts() {
                for _ in 0..draws {
                    lists.push(policy.sample(c, k, false, &mut rng));
                    gts.push(env.gt[c]);
                }
            }
        }
    }
    evaluate(&lists, &gts, &[1, 5, 10], 10)
}

pub fn initial_policy(env: &SynthEnv, temperature: f64) -> ToyPolicy {
    ToyPolicy {
        logits: env.base_logits.clone(),
        temperature,
    }
}

/// Runs `steps` updates; every step rolls out and updates every context.
pub fn train_toy(env: &SynthEnv, cfg: &ToyConfig) -> Result<ToyRun> {
    if cfg.group < 2 {
        return Err(SimError::GroupTooSmall(cfg.group));
    }
    let mut policy = initial_policy(env, cfg.temperature);
    let mut rng = seeded_rng(derive_seed(cfg.seed, "rftsim-train"));
    let mut curve = Vec::new();
    let eval_every = cfg.eval_every.max(1);
    let mut reward_sum = 0.0;
    let mut distinct_sum = 0.0;
    let mut samples = 0usize;
    for step in 0..cfg.steps {
        for c in 0..env.contexts() {
            let group = rollout(&policy, env, c, &cfg.weights, cfg.group, cfg.with_replacement, &mut rng)?;
            reward_sum += group.rewards.iter().sum::<f64>();
            distinct_sum += group.completions.iter().map(|s| distinct_count(s) as f64).sum::<f64>();
            samples += group.rewards.len();
            policy_update(
                &mut policy,
                &group,
                cfg.learning_rate,
                cfg.kl_coeff,
                &env.base_logits[c],
                cfg.kl_mode,
                cfg.with_replacement,
            );
            if policy.logits[c].iter().any(|l| !l.is_finite()) {
                return Err(SimError::Diverged { context: c, step });
            }
        }
        if (step + 1) % eval_every == 0 || step + 1 == cfg.steps {
            let r = evaluate_policy(&policy, env, cfg.weights.k, cfg.eval_mode);
            curve.push(CurvePoint {
                step: step + 1,
                mean_reward: reward_sum / samples.max(1) as f64,
                acc1: r.acc(1),
                acc5: r.acc(5),
                acc10: r.acc(10),
                mrr: r.mrr,
                mean_distinct: distinct_sum / samples.max(1) as f64,
            });
            reward_sum = 0.0;
            distinct_sum = 0.0;
            samples = 0;
        }
    }
    Ok(ToyRun {
        curve,
        report: evaluate_policy(&policy, env, cfg.weights.k, cfg.eval_mode),
        policy,
    })
}

pub fn distinct_count(seq: &[usize]) -> usize {
    let mut s = seq.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len()
}
