//! Two-stage training: supervised warm-up on rule-based teacher traces,
//! then group-relative policy optimization against live retrieval rewards.
//!
//! The GRPO loss per group is
//! `-(1/N) sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)
//!  + beta (1/N) sum_i (r_kl_i - log r_kl_i - 1)`
//! with mean-centered advantages (no sigma scaling by default) and
//! sequence-level probability ratios.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, QueryWorkload, WorkQuery};
use crate::error::{Error, Result};
use crate::format::{self, GateConfig};
use crate::policy::{Init, ModelConfig, PolicyModel, SampleOptions};
use crate::reward::{self, RewardConfig};
use crate::search::{self, Index};
use crate::vocab::Vocab;

/// Which policy the KL ratio compares against. The objective as written
/// uses the old policy (identical to the probability ratio); the frozen
/// warm-up policy is the conventional alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlReference {
    OldPolicy,
    FrozenSftPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Candidates sampled per input (N).
    pub group_size: usize,
    /// Sampling temperature during GRPO rollouts.
    pub temperature: f64,
    /// Clipping range for the probability ratio.
    pub clip: f64,
    /// KL regularizer weight.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub kl_reference: KlReference,
    /// Divide advantages by the group standard deviation (off by default).
    pub sigma_normalize: bool,
    pub max_new_tokens: usize,
    pub reward: RewardConfig,
    pub gate: GateConfig,
    pub sft_examples: usize,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub sft_batch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 4,
            temperature: 0.9,
            clip: 0.2,
            beta: 0.04,
            lr: 1e-3,
            batch_size: 8,
            steps: 300,
            seed: 0,
            kl_reference: KlReference::OldPolicy,
            sigma_normalize: false,
            max_new_tokens: 96,
            reward: RewardConfig::default(),
            gate: GateConfig::default(),
            sft_examples: 1000,
            sft_epochs: 1,
            sft_lr: 1.5e-3,
            sft_batch_size: 1,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            context_len: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("clip must be in (0, 1)".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        Ok(())
    }

    /// Prompts are right-padded to this length; generation always starts at
    /// the same absolute position.
    pub fn prompt_pad_len(&self) -> usize {
        self.context_len.saturating_sub(self.max_new_tokens)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            context_len: self.context_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

/// Deterministic seed mixing (splitmix64 finalizer over combined indices).
pub fn derive_seed(base: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(c.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Adam with bias correction; the only optimizer used in either stage.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Adam {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut PolicyModel, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "gradient length {} != optimizer state {}",
                grad.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut update = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            update[i] = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        model.apply_gradient(&update, lr)
    }
}

// ---------------------------------------------------------------------------
// GRPO math
// ---------------------------------------------------------------------------

/// Mean-centered group advantages, optionally sigma-scaled.
pub fn grpo_advantages(rewards: &[f64], sigma_normalize: bool) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if sigma_normalize {
        let var = adv.iter().map(|a| a * a).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 1e-8 {
            for a in adv.iter_mut() {
                *a /= sd;
            }
        }
    }
    adv
}

/// `min(rho * a, clip(rho, 1-eps, 1+eps) * a)`.
pub fn clipped_surrogate(rho: f64, a: f64, eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
    (rho * a).min(clipped * a)
}

/// Derivative of the clipped surrogate with respect to rho (zero when the
/// clipped branch is strictly selected).
fn clipped_surrogate_drho(rho: f64, a: f64, eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
    if rho * a <= clipped * a {
        a
    } else if rho > 1.0 - eps && rho < 1.0 + eps {
        a
    } else {
        0.0
    }
}

/// `r - log r - 1`; non-negative, zero iff r = 1.
pub fn kl_penalty(r_kl: f64) -> Result<f64> {
    if r_kl <= 0.0 {
        return Err(Error::Numeric(format!("KL ratio must be positive: {r_kl}")));
    }
    Ok(r_kl - r_kl.ln() - 1.0)
}

// ---------------------------------------------------------------------------
// supervised warm-up
// ---------------------------------------------------------------------------

/// Rule-based teacher: expansions are attribute values seen in the query's
/// retrieved context, which reliably grow the retrieval union on this
/// catalog. Every target is gate-valid by construction and deterministic
/// given the catalog and workload.
pub fn make_sft_corpus(
    catalog: &Catalog,
    workload: &QueryWorkload,
    index: &Index,
    vocab: &Vocab,
    cfg: &TrainConfig,
    n: usize,
) -> Result<Vec<SftExample>> {
    if n == 0 {
        return Err(Error::Config("sft corpus size must be >= 1".into()));
    }
    if workload.queries.is_empty() {
        return Err(Error::Config("workload is empty".into()));
    }
    let mut corpus = Vec::with_capacity(n);
    for i in 0..n {
        let q = &workload.queries[i % workload.queries.len()];
        let result = search::search(index, &q.tokens, format::MAX_CONTEXT_ITEMS)?;
        let (ctx, prompt_tokens) =
            format::build_prompt(&q.tokens, &result, catalog, cfg.prompt_pad_len())?;
        // candidate value tokens from the retrieved context, query tokens excluded
        let mut values: Vec<String> = Vec::new();
        for (_, attrs) in &ctx.context_items {
            for (_, v) in attrs {
                if !q.tokens.contains(v) && !values.contains(v) {
                    values.push(v.clone());
                }
            }
        }
        // Single-value expansions keep targets short and reliably widen the
        // union. The teacher is deterministic per query (first two context
        // values) so identical inputs never carry conflicting supervision;
        // the chosen values appear in the think section first so the answer
        // can copy them.
        let mut expansions: Vec<Vec<String>> = Vec::new();
        for v in values.iter().take(2) {
            expansions.push(vec![v.clone()]);
        }
        let mut think: Vec<String> = vec!["expand".into()];
        for e in &expansions {
            think.push(e[0].clone());
        }
        let target_tokens = format::render_output(&think, &expansions);
        let mut target = vocab.encode(&target_tokens)?;
        target.push(vocab.eos());
        let prompt = format::encode_prompt_padded(vocab, &prompt_tokens, cfg.prompt_pad_len())?;
        corpus.push(SftExample { prompt, target });
    }
    Ok(corpus)
}

/// One pass of minibatch SGD over the corpus per epoch. Loss per example is
/// the mean negative log-probability of the target tokens given the prompt.
/// Returns the per-batch loss curve.
pub fn run_sft(
    model: &mut PolicyModel,
    corpus: &[SftExample],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Config("sft corpus is empty".into()));
    }
    let batch_size = batch_size.max(1);
    let mut curve = Vec::new();
    let mut opt = Adam::new(model.n_params());
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, 0, 0));
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &corpus[i];
                    let rec = model.score_recorded(&ex.prompt, &ex.target)?;
                    let t = ex.target.len() as f64;
                    let loss = -rec.sequence_logprob() / t;
                    let d_logp = vec![-1.0 / t; ex.target.len()];
                    let grad = rec.backward(&d_logp)?;
                    Ok((loss, grad))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; model.n_params()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l * scale;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi * scale;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite sft loss {loss}")));
            }
            opt.step(model, &grad, lr)?;
            curve.push(loss);
        }
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// GRPO step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GrpoInput {
    pub query: WorkQuery,
    pub prompt: Vec<u32>,
}

/// Builds the per-query GRPO inputs (retrieval context + serialized prompt).
pub fn build_inputs(
    catalog: &Catalog,
    queries: &[WorkQuery],
    index: &Index,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<GrpoInput>> {
    queries
        .iter()
        .map(|q| {
            let result = search::search(index, &q.tokens, format::MAX_CONTEXT_ITEMS)?;
            let (_, tokens) =
                format::build_prompt(&q.tokens, &result, catalog, cfg.prompt_pad_len())?;
            Ok(GrpoInput {
                query: q.clone(),
                prompt: format::encode_prompt_padded(vocab, &tokens, cfg.prompt_pad_len())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub valid_frac: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub loss: f64,
}

struct Candidate {
    generated: Vec<u32>,
    s_new: f64,
    s_old: f64,
    s_ref: f64,
    reward: f64,
    valid: bool,
}

const LOG_RATIO_CLAMP: f64 = 20.0;

/// One GRPO update: sample N candidates per input, score them against the
/// search engine, and take a single gradient step on the clipped surrogate
/// plus KL penalty.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    model: &mut PolicyModel,
    old: &PolicyModel,
    kl_ref: &PolicyModel,
    inputs: &[GrpoInput],
    cfg: &TrainConfig,
    index: &Index,
    catalog: &Catalog,
    vocab: &Vocab,
    step: usize,
    opt: &mut Adam,
) -> Result<StepMetrics> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Config("grpo step needs at least one input".into()));
    }
    let n = cfg.group_size;
    let b = inputs.len();
    let catalog_vocab = &catalog.vocabulary;

    // rollout + reward per (input, candidate), embarrassingly parallel
    let tasks: Vec<(usize, usize)> = (0..b)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .collect();
    let model_ref = &*model;
    let candidates: Vec<Candidate> = tasks
        .par_iter()
        .map(|&(i, j)| {
            let input = &inputs[i];
            let rollout = model_ref.sample(
                &input.prompt,
                &SampleOptions {
                    temperature: cfg.temperature,
                    max_new_tokens: cfg.max_new_tokens,
                    seed: derive_seed(cfg.seed, step as u64, i as u64, j as u64),
                    greedy: false,
                    eos: vocab.eos(),
                },
            )?;
            let text = vocab.render(&rollout.generated_ids);
            let parsed = format::parse_output(&text, &cfg.gate, catalog_vocab);
            let set = if parsed.valid {
                Some(format::to_expansion_set(&input.query.tokens, &parsed)?)
            } else {
                None
            };
            let breakdown = reward::compute_reward(
                index,
                catalog,
                &input.query.intent,
                set.as_ref(),
                &cfg.reward,
            )?;
            let s_old: f64 = old
                .score(&input.prompt, &rollout.generated_ids)?
                .iter()
                .sum();
            let s_ref = if cfg.kl_reference == KlReference::OldPolicy {
                s_old
            } else {
                kl_ref
                    .score(&input.prompt, &rollout.generated_ids)?
                    .iter()
                    .sum()
            };
            Ok(Candidate {
                generated: rollout.generated_ids,
                s_new: rollout.per_token_logprob.iter().sum(),
                s_old,
                s_ref,
                reward: breakdown.total,
                valid: breakdown.valid,
            })
        })
        .collect::<Result<_>>()?;

    // per-group advantages and per-candidate loss scalars
    let scale = 1.0 / (n as f64 * b as f64);
    let mut loss = 0.0;
    let mut mean_kl = 0.0;
    let mut clip_hits = 0usize;
    let mut weights = vec![0.0; candidates.len()]; // dLoss/dS_new per candidate
    for i in 0..b {
        let group = &candidates[i * n..(i + 1) * n];
        let rewards: Vec<f64> = group.iter().map(|c| c.reward).collect();
        let advantages = grpo_advantages(&rewards, cfg.sigma_normalize);
        for (j, cand) in group.iter().enumerate() {
            let u = (cand.s_new - cand.s_old).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
            let rho = u.exp();
            let u_ref = (cand.s_new - cand.s_ref).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
            let r_kl = u_ref.exp();
            let a = advantages[j];
            let surr = clipped_surrogate(rho, a, cfg.clip);
            let kl = kl_penalty(r_kl)?;
            loss += scale * (-surr + cfg.beta * kl);
            mean_kl += scale * kl;
            if clipped_surrogate_drho(rho, a, cfg.clip) == 0.0 && a != 0.0 {
                clip_hits += 1;
            }
            // d/dS_new: surrogate term via rho, KL term via r_kl
            let mut w = 0.0;
            if u.abs() < LOG_RATIO_CLAMP {
                w -= clipped_surrogate_drho(rho, a, cfg.clip) * rho;
            }
            if u_ref.abs() < LOG_RATIO_CLAMP {
                w += cfg.beta * (r_kl - 1.0);
            }
            weights[i * n + j] = scale * w;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite grpo loss {loss}")));
    }

    // backward passes only for candidates that actually contribute gradient
    let grads: Vec<Option<Vec<f64>>> = tasks
        .par_iter()
        .zip(&candidates)
        .zip(&weights)
        .map(|((&(i, _), cand), &w)| {
            if w == 0.0 {
                return Ok(None);
            }
            let rec = model_ref.score_recorded(&inputs[i].prompt, &cand.generated)?;
            let d_logp = vec![w; cand.generated.len()];
            Ok(Some(rec.backward(&d_logp)?))
        })
        .collect::<Result<_>>()?;

    let mut grad = vec![0.0; model.n_params()];
    for g in grads.into_iter().flatten() {
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    opt.step(model, &grad, cfg.lr)?;

    let total = candidates.len() as f64;
    Ok(StepMetrics {
        step,
        mean_reward: candidates.iter().map(|c| c.reward).sum::<f64>() / total,
        valid_frac: candidates.iter().filter(|c| c.valid).count() as f64 / total,
        mean_kl,
        clip_frac: clip_hits as f64 / total,
        loss,
    })
}

// ---------------------------------------------------------------------------
// full pipeline
// ---------------------------------------------------------------------------

pub struct TrainingOutput {
    pub model: PolicyModel,
    pub sft_model: PolicyModel,
    pub sft_losses: Vec<f64>,
    pub metrics: Vec<StepMetrics>,
}

/// SFT warm-up (unless a warm model is supplied) followed by GRPO. The whole
/// run is a pure function of the config and inputs; `on_step` observes
/// per-step metrics in order.
pub fn run_training(
    cfg: &TrainConfig,
    catalog: &Catalog,
    workload: &QueryWorkload,
    index: &Index,
    vocab: &Vocab,
    warm_start: Option<PolicyModel>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainingOutput> {
    cfg.validate()?;
    let (sft_model, sft_losses) = match warm_start {
        Some(m) => (m, Vec::new()),
        None => {
            let mut model = PolicyModel::new(
                cfg.model_config(vocab.len()),
                Init::Gaussian { std: 0.02 },
                derive_seed(cfg.seed, 0, 0, 1),
            )?;
            let corpus = make_sft_corpus(catalog, workload, index, vocab, cfg, cfg.sft_examples)?;
            let losses = run_sft(
                &mut model,
                &corpus,
                cfg.sft_epochs,
                cfg.sft_lr,
                cfg.sft_batch_size,
                derive_seed(cfg.seed, 0, 0, 3),
            )?;
            (model, losses)
        }
    };

    let inputs = build_inputs(catalog, &workload.queries, index, vocab, cfg)?;
    let mut model = sft_model.clone_frozen();
    let mut opt = Adam::new(model.n_params());
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = inputs.len(); // force a shuffle before the first step
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 0, 4));
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(inputs.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(inputs[order[cursor]].clone());
            cursor += 1;
        }
        let old = model.clone_frozen();
        let kl_ref = match cfg.kl_reference {
            KlReference::OldPolicy => &old,
            KlReference::FrozenSftPolicy => &sft_model,
        };
        let m = grpo_step(
            &mut model, &old, kl_ref, &batch, cfg, index, catalog, vocab, step, &mut opt,
        )?;
        on_step(&m);
        metrics.push(m);
    }
    Ok(TrainingOutput {
        model,
        sft_model,
        sft_losses,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, generate_workload};
    use crate::search::build_index;

    #[test]
    fn advantages_mean_center() {
        assert_eq!(
            grpo_advantages(&[1.0, 2.0, 3.0, 2.0], false),
            vec![-1.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(grpo_advantages(&[5.0, 5.0, 5.0], false), vec![0.0; 3]);
        let a = grpo_advantages(&[0.3, 1.7, 0.9, 2.2], false);
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
        // permutation equivariance (up to summation-order rounding)
        let b = grpo_advantages(&[2.2, 0.3, 1.7, 0.9], false);
        for (x, y) in b.iter().zip([a[3], a[0], a[1], a[2]]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_hand_cases() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-15);
        for eps in [0.1, 0.2, 0.3] {
            assert_eq!(clipped_surrogate(1.0, 0.7, eps), 0.7);
        }
        // boundedness
        for (rho, a, eps) in [(2.5, 1.3, 0.2), (0.1, -2.0, 0.1), (1.0, 0.0, 0.2)] {
            let s: f64 = clipped_surrogate(rho, a, eps);
            assert!(s.abs() <= (rho * a).abs().max((1.0 + eps) * a.abs()));
        }
    }

    #[test]
    fn kl_penalty_values() {
        assert_eq!(kl_penalty(1.0).unwrap(), 0.0);
        assert!((kl_penalty(2.0).unwrap() - 0.306_852_819_440_054_7).abs() < 1e-12);
        assert!((kl_penalty(0.5).unwrap() - 0.193_147_180_559_945_3).abs() < 1e-12);
        for r in [0.01, 0.3, 0.999, 1.001, 7.0] {
            assert!(kl_penalty(r).unwrap() >= 0.0);
        }
        assert!(kl_penalty(0.0).is_err());
        assert!(kl_penalty(-1.0).is_err());
    }

    fn small_world() -> (Catalog, QueryWorkload, Index, Vocab) {
        let catalog = generate_catalog(1, 60, 5, 3).unwrap();
        let workload = generate_workload(&catalog, 2, 12).unwrap();
        let index = build_index(&catalog).unwrap();
        let vocab = Vocab::build(catalog.vocabulary.iter().cloned());
        (catalog, workload, index, vocab)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            context_len: 192,
            max_new_tokens: 40,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sft_corpus_targets_are_valid_and_deterministic() {
        let (catalog, workload, index, vocab) = small_world();
        let cfg = small_cfg();
        let corpus = make_sft_corpus(&catalog, &workload, &index, &vocab, &cfg, 40).unwrap();
        assert_eq!(corpus.len(), 40);
        for ex in &corpus {
            let text = vocab.render(&ex.target);
            let parsed = format::parse_output(&text, &cfg.gate, &catalog.vocabulary);
            assert!(parsed.valid, "teacher target not gate-valid: {text}");
        }
        let again = make_sft_corpus(&catalog, &workload, &index, &vocab, &cfg, 40).unwrap();
        assert_eq!(corpus, again);
    }

    #[test]
    fn teacher_expansions_grow_retrieval() {
        let (catalog, workload, index, vocab) = small_world();
        let cfg = small_cfg();
        let corpus = make_sft_corpus(&catalog, &workload, &index, &vocab, &cfg, 24).unwrap();
        let mut grew = 0;
        for (ex, q) in corpus.iter().zip(workload.queries.iter().cycle()) {
            let text = vocab.render(&ex.target);
            let parsed = format::parse_output(&text, &cfg.gate, &catalog.vocabulary);
            let set = format::to_expansion_set(&q.tokens, &parsed).unwrap();
            let b = reward::compute_reward(&index, &catalog, &q.intent, Some(&set), &cfg.reward)
                .unwrap();
            if b.r_size > 1.0 {
                grew += 1;
            }
        }
        assert!(
            grew as f64 >= 0.8 * corpus.len() as f64,
            "only {grew}/{} teacher traces grew retrieval",
            corpus.len()
        );
    }

    #[test]
    fn sft_zero_lr_keeps_params_and_loss_matches_score() {
        let (catalog, workload, index, vocab) = small_world();
        let cfg = small_cfg();
        let corpus = make_sft_corpus(&catalog, &workload, &index, &vocab, &cfg, 8).unwrap();
        let mut model = PolicyModel::new(
            cfg.model_config(vocab.len()),
            Init::Gaussian { std: 0.02 },
            7,
        )
        .unwrap();
        let before = model.params.clone();
        // first batch = all 8 examples (batch_size 8, known shuffle)
        let curve = run_sft(&mut model, &corpus, 1, 0.0, 8, 3).unwrap();
        assert_eq!(model.params, before);
        let mut expect = 0.0;
        for ex in &corpus {
            let lp = model.score(&ex.prompt, &ex.target).unwrap();
            expect += -lp.iter().sum::<f64>() / ex.target.len() as f64 / corpus.len() as f64;
        }
        assert!((curve[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn sft_overfits_single_example() {
        let (catalog, workload, index, vocab) = small_world();
        let cfg = small_cfg();
        let corpus = make_sft_corpus(&catalog, &workload, &index, &vocab, &cfg, 1).unwrap();
        let mut model = PolicyModel::new(
            cfg.model_config(vocab.len()),
            Init::Gaussian { std: 0.02 },
            7,
        )
        .unwrap();
        let curve = run_sft(&mut model, &corpus, 250, 0.01, 1, 3).unwrap();
        let last = *curve.last().unwrap();
        assert!(last < 0.05, "did not overfit: final loss {last}");
    }

    #[test]
    fn grpo_step_zero_advantages_keep_params() {
        let (catalog, workload, index, vocab) = small_world();
        let mut cfg = small_cfg();
        cfg.beta = 0.0;
        cfg.steps = 1;
        let mut model = PolicyModel::new(
            cfg.model_config(vocab.len()),
            Init::Gaussian { std: 0.02 },
            7,
        )
        .unwrap();
        let inputs =
            build_inputs(&catalog, &workload.queries[..2], &index, &vocab, &cfg)
                .unwrap();
        let old = model.clone_frozen();
        let before = model.params.clone();
        // Random init produces invalid outputs, all rewards 0 => advantages 0.
        let mut opt = Adam::new(model.n_params());
        let m = grpo_step(
            &mut model, &old, &old, &inputs, &cfg, &index, &catalog, &vocab, 0, &mut opt,
        )
        .unwrap();
        assert_eq!(m.valid_frac, 0.0);
        assert_eq!(model.params, before);
    }

    #[test]
    fn zero_steps_returns_warm_model() {
        let (catalog, workload, index, vocab) = small_world();
        let mut cfg = small_cfg();
        cfg.steps = 0;
        let warm = PolicyModel::new(
            cfg.model_config(vocab.len()),
            Init::Gaussian { std: 0.02 },
            11,
        )
        .unwrap();
        let out = run_training(
            &cfg,
            &catalog,
            &workload,
            &index,
            &vocab,
            Some(warm.clone_frozen()),
            |_| {},
        )
        .unwrap();
        assert_eq!(out.model.params, warm.params);
        assert!(out.metrics.is_empty());
    }

    /// Full-objective gradient check on a tiny instance: analytic gradient
    /// of the Eq.-style loss vs central finite differences.
    #[test]
    fn grpo_loss_gradient_matches_finite_differences() {
        use rand::Rng;
        let (catalog, workload, index, vocab) = small_world();
        let mut cfg = small_cfg();
        cfg.group_size = 2;
        cfg.beta = 0.04;
        // tiny model, <= 5k params
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        let model = PolicyModel::new(
            cfg.model_config(vocab.len()),
            Init::Gaussian { std: 0.05 },
            13,
        )
        .unwrap();
        assert!(model.n_params() <= 120_000); // vocab-dominated; see below

        let inputs =
            build_inputs(&catalog, &workload.queries[..1], &index, &vocab, &cfg)
                .unwrap();
        let input = &inputs[0];
        // two fixed candidate sequences with different rewards
        let old = model.clone_frozen();
        let cands: Vec<Vec<u32>> = (0..2u64)
            .map(|j| {
                model
                    .sample(
                        &input.prompt,
                        &SampleOptions {
                            temperature: 1.2,
                            max_new_tokens: 8,
                            seed: j,
                            greedy: false,
                            eos: vocab.eos(),
                        },
                    )
                    .unwrap()
                    .generated_ids
            })
            .collect();
        let rewards = [1.3, 0.4]; // fixed rewards; loss depends on params only via logprobs
        // offset old model slightly so rho != 1 and the KL term is active
        let mut old_shift = old.clone_frozen();
        for p in old_shift.params.iter_mut() {
            *p *= 0.995;
        }

        let loss_of = |m: &PolicyModel| -> f64 {
            let adv = grpo_advantages(&rewards, false);
            let mut loss = 0.0;
            for (j, gen) in cands.iter().enumerate() {
                let s_new: f64 = m.score(&input.prompt, gen).unwrap().iter().sum();
                let s_old: f64 = old_shift.score(&input.prompt, gen).unwrap().iter().sum();
                let rho = (s_new - s_old).exp();
                loss += (-clipped_surrogate(rho, adv[j], cfg.clip)
                    + cfg.beta * kl_penalty(rho).unwrap())
                    / 2.0;
            }
            loss
        };

        // analytic gradient
        let adv = grpo_advantages(&rewards, false);
        let mut grad = vec![0.0; model.n_params()];
        for (j, gen) in cands.iter().enumerate() {
            let rec = model.score_recorded(&input.prompt, gen).unwrap();
            let s_new = rec.sequence_logprob();
            let s_old: f64 = old_shift.score(&input.prompt, gen).unwrap().iter().sum();
            let rho = (s_new - s_old).exp();
            let w = (-clipped_surrogate_drho(rho, adv[j], cfg.clip) * rho
                + cfg.beta * (rho - 1.0))
                / 2.0;
            let g = rec.backward(&vec![w; gen.len()]).unwrap();
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 50 {
            let idx = rng.gen_range(0..model.n_params());
            if grad[idx].abs() < 1e-8 {
                continue;
            }
            let h = 1e-4;
            let mut plus = model.clone_frozen();
            plus.params[idx] += h;
            let mut minus = model.clone_frozen();
            minus.params[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs());
            assert!(
                rel <= 1e-4,
                "param {idx}: fd={fd} analytic={} rel={rel}",
                grad[idx]
            );
            checked += 1;
        }
    }
}
