//! Two-stage training.
//!
//! Stage one fits the generator by cross-entropy on gold questions given
//! (deliberately corrupted) gold templates. Stage two samples styles and
//! questions, scores them with the consistency + diversity reward, and
//! updates the generator with a greedy-baselined policy gradient plus a KL
//! penalty toward the stage-one snapshot, and the retriever with plain
//! REINFORCE on the pool-normalized retrieval probability.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainerConfig;
use crate::corpus::{extract_template, SpanKind, Tagger, Template, TemplateCorpus};
use crate::dataset::{ContextAnswer, Sample};
use crate::error::{Error, Result};
use crate::generator::{
    self, candidate_ids, GenerationOutput, GradientBuffer, PointerLm, PointerLmConfig,
    SequenceModel, Trainable,
};
use crate::hashing::{combine, hash_str};
use crate::metrics;
use crate::pipeline;
use crate::retriever::{build_index, PoolScores, RetrieverGradient, RetrieverParams};
use crate::reward::{QaBackend, RewardBreakdown, RewardModel};
use crate::sampler::{retrieve_pool, sample_from_pool, SampleMode};
use crate::text::{Lexicon, MASK};

/// Probabilities of the four corruption mechanisms; the remainder is "none".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub replace_mask_with_entity: f64,
    pub add_nouns: f64,
    pub delete_mask: f64,
    pub swap_template: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            replace_mask_with_entity: 0.15,
            add_nouns: 0.15,
            delete_mask: 0.15,
            swap_template: 0.15,
        }
    }
}

impl CorruptionConfig {
    pub fn none() -> Self {
        Self {
            replace_mask_with_entity: 0.0,
            add_nouns: 0.0,
            delete_mask: 0.0,
            swap_template: 0.0,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [
            self.replace_mask_with_entity,
            self.add_nouns,
            self.delete_mask,
            self.swap_template,
        ]
    }

    pub fn none_probability(&self) -> f64 {
        1.0 - self.weights().iter().sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|p| !(0.0..=1.0).contains(p)) || w.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "corruption probabilities {w:?} must lie in [0, 1] and sum to at most 1"
            )));
        }
        Ok(())
    }
}

/// Entity strings and nouns used by the corruption mechanisms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorruptionPools {
    pub entities: Vec<Vec<String>>,
    pub nouns: Vec<String>,
}

impl CorruptionPools {
    /// Entities are tagged spans of training questions; nouns are their
    /// lowercase content words. Both are deduplicated in first-seen order.
    pub fn from_samples(samples: &[Sample], tagger: &dyn Tagger, lexicon: &Lexicon) -> Self {
        let mut pools = Self::default();
        for s in samples {
            let toks = s.question.tokens();
            for span in tagger.tag(toks) {
                if span.kind == SpanKind::Entity {
                    let e = toks[span.start..span.end].to_vec();
                    if !pools.entities.contains(&e) {
                        pools.entities.push(e);
                    }
                }
            }
            for t in toks {
                let noun = !lexicon.is_kept(t)
                    && t.chars().all(char::is_alphabetic)
                    && t.chars().next().is_some_and(char::is_lowercase);
                if noun && !pools.nouns.contains(t) {
                    pools.nouns.push(t.clone());
                }
            }
        }
        pools
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Corruption {
    ReplaceMask,
    AddNouns,
    DeleteMask,
    Swap,
    None,
}

fn draw_mechanism<R: Rng + ?Sized>(cfg: &CorruptionConfig, rng: &mut R) -> Corruption {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (p, m) in cfg.weights().into_iter().zip([
        Corruption::ReplaceMask,
        Corruption::AddNouns,
        Corruption::DeleteMask,
        Corruption::Swap,
    ]) {
        acc += p;
        if u < acc {
            return m;
        }
    }
    Corruption::None
}

/// Applies at most one corruption mechanism to `z0`. Mechanisms that need a
/// `[MASK]` (or a non-empty pool) leave `z0` unchanged when there is none.
pub fn corrupt_template<R: Rng + ?Sized>(
    z0: &Template,
    cfg: &CorruptionConfig,
    pools: &CorruptionPools,
    corpus: &[Template],
    rng: &mut R,
) -> Template {
    let toks = z0.tokens();
    let masks: Vec<usize> = (0..toks.len()).filter(|&i| toks[i] == MASK).collect();
    let rebuild = |v: Vec<String>| {
        Template::new(v, z0.source_id().map(str::to_string)).unwrap_or_else(|_| z0.clone())
    };
    match draw_mechanism(cfg, rng) {
        Corruption::ReplaceMask if !masks.is_empty() && !pools.entities.is_empty() => {
            let at = masks[rng.gen_range(0..masks.len())];
            let entity = pools.entities.choose(rng).unwrap();
            let mut v = toks[..at].to_vec();
            v.extend(entity.iter().cloned());
            v.extend(toks[at + 1..].iter().cloned());
            rebuild(v)
        }
        Corruption::AddNouns if !pools.nouns.is_empty() => {
            let mut v = toks.to_vec();
            for _ in 0..rng.gen_range(1..=2) {
                let at = rng.gen_range(0..=v.len());
                v.insert(at, pools.nouns.choose(rng).unwrap().clone());
            }
            rebuild(v)
        }
        Corruption::DeleteMask if !masks.is_empty() => {
            let at = masks[rng.gen_range(0..masks.len())];
            let mut v = toks.to_vec();
            v.remove(at);
            rebuild(v)
        }
        Corruption::Swap if !corpus.is_empty() => corpus.choose(rng).unwrap().clone(),
        _ => z0.clone(),
    }
}

/// Linear warmup over the first `warmup_ratio` of steps, then linear decay.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let total = total.max(1) as f64;
    let warm = (warmup_ratio * total).ceil();
    let s = step as f64 + 1.0;
    if s <= warm {
        base * s / warm
    } else {
        base * ((total - s + 1.0) / (total - warm + 1.0)).max(0.0)
    }
}

/// One supervised example: a prepared input and the gold candidate
/// trajectory, end token included.
pub struct SlExample<P> {
    pub prepared: P,
    pub targets: Vec<usize>,
}

impl<P> SlExample<P> {
    /// `None` when the question uses a token the model cannot produce.
    pub fn new<M: SequenceModel<Prepared = P> + ?Sized>(
        model: &M,
        x: &ContextAnswer,
        z: Option<&Template>,
        y: &[String],
    ) -> Result<Option<Self>> {
        let prepared = generator::prepare(model, x, z)?;
        Ok(candidate_ids(model, &prepared, y).map(|mut targets| {
            targets.push(model.end_index(&prepared));
            Self { prepared, targets }
        }))
    }
}

/// Token-averaged cross-entropy over the batch and its gradient.
pub fn sl_loss_and_grad<M: Trainable>(
    model: &M,
    batch: &[SlExample<M::Prepared>],
) -> (f64, M::Gradient) {
    let tokens: usize = batch.iter().map(|e| e.targets.len()).sum();
    let scale = -1.0 / tokens.max(1) as f64;
    let parts: Vec<(f64, M::Gradient)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = model.zero_grad();
            let mut nll = 0.0;
            for t in 0..ex.targets.len() {
                let prefix = &ex.targets[..t];
                nll -= model.log_probs(&ex.prepared, prefix)[ex.targets[t]];
                model.accumulate(&ex.prepared, prefix, &[(ex.targets[t], 1.0)], scale, &mut g);
            }
            (nll, g)
        })
        .collect();
    let mut grad = model.zero_grad();
    let mut nll = 0.0;
    for (l, g) in &parts {
        nll += l;
        grad.add_scaled(g, 1.0);
    }
    (nll / tokens.max(1) as f64, grad)
}

/// One supervised update; returns the pre-update loss.
pub fn sl_step<M: Trainable>(
    model: &mut M,
    batch: &[SlExample<M::Prepared>],
    lr: f64,
    max_grad_norm: f64,
) -> f64 {
    assert!(!batch.is_empty(), "empty supervised batch");
    let (loss, mut grad) = sl_loss_and_grad(model, batch);
    grad.clip(max_grad_norm);
    model.descend(&grad, lr);
    loss
}

/// Adds `scale * ∇ log p(trajectory)`.
pub fn accumulate_trajectory<M: Trainable + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    trajectory: &[usize],
    scale: f64,
    grad: &mut M::Gradient,
) {
    for t in 0..trajectory.len() {
        model.accumulate(
            prepared,
            &trajectory[..t],
            &[(trajectory[t], 1.0)],
            scale,
            grad,
        );
    }
}

/// Single-sample REINFORCE estimate `advantage * ∇ log p(trajectory)`.
pub fn reinforce_estimate<M: Trainable + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    trajectory: &[usize],
    advantage: f64,
) -> M::Gradient {
    let mut g = model.zero_grad();
    accumulate_trajectory(model, prepared, trajectory, advantage, &mut g);
    g
}

fn step_kl(p_ref: &[f64], p_cur: &[f64]) -> f64 {
    p_ref
        .iter()
        .zip(p_cur)
        .filter(|(r, _)| **r > f64::NEG_INFINITY)
        .map(|(r, c)| r.exp() * (r - c))
        .sum()
}

/// Mean over trajectory steps of `KL(p_ref(·|prefix) || p_cur(·|prefix))`.
pub fn kl_penalty<M: SequenceModel + ?Sized>(
    reference: &M,
    current: &M,
    prepared: &M::Prepared,
    trajectory: &[usize],
) -> f64 {
    if trajectory.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..trajectory.len())
        .map(|t| {
            let prefix = &trajectory[..t];
            step_kl(
                &reference.log_probs(prepared, prefix),
                &current.log_probs(prepared, prefix),
            )
            .max(0.0)
        })
        .sum();
    total / trajectory.len() as f64
}

/// Adds `scale * ∇_current kl_penalty`.
pub fn accumulate_kl_grad<M: Trainable + ?Sized>(
    reference: &M,
    current: &M,
    prepared: &M::Prepared,
    trajectory: &[usize],
    scale: f64,
    grad: &mut M::Gradient,
) {
    let n = trajectory.len().max(1) as f64;
    for t in 0..trajectory.len() {
        let prefix = &trajectory[..t];
        let targets: Vec<(usize, f64)> = reference
            .log_probs(prepared, prefix)
            .iter()
            .enumerate()
            .filter(|(_, lp)| **lp > f64::NEG_INFINITY)
            .map(|(v, lp)| (v, lp.exp()))
            .collect();
        // ∇ KL = -Σ_v p_ref(v) ∇ log p_cur(v)
        current.accumulate(prepared, prefix, &targets, -scale / n, grad);
    }
}

/// Reward of the greedy decode under the same input and style.
pub fn greedy_baseline<M: SequenceModel + ?Sized>(
    model: &M,
    prepared: &M::Prepared,
    x: &ContextAnswer,
    z: Option<&Template>,
    rewards: &RewardModel<'_>,
) -> Result<RewardBreakdown> {
    let out = generator::generate_greedy_prepared(model, prepared, model.max_output_len())?;
    Ok(rewards.score(x, &out.question, z))
}

/// One sampled style/question with its reward and baseline.
pub struct PgPair<P> {
    pub style: Template,
    pub pool_index: usize,
    pub prepared: P,
    pub trajectory: Vec<usize>,
    pub question: GenerationOutput,
    pub reward: RewardBreakdown,
    pub baseline: f64,
}

pub struct PgItem<P> {
    pub id: String,
    pub input: ContextAnswer,
    pub z0: Template,
    pub pool: Vec<Template>,
    pub pool_scores: PoolScores,
    pub pairs: Vec<PgPair<P>>,
}

pub struct PolicyGradientBatch<P> {
    pub items: Vec<PgItem<P>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlStepConfig {
    pub kl_beta: f64,
    pub generator_lr: f64,
    pub retriever_lr: f64,
    pub grad_clip: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RlDiagnostics {
    pub pairs: usize,
    pub mean_reward: f64,
    pub mean_r_cons: f64,
    pub mean_r_divs: f64,
    pub mean_baseline: f64,
    pub kl: f64,
    pub generator_grad_norm: f64,
    pub retriever_grad_norm: f64,
}

/// Gradients of the RL loss: `-mean (r - b) ∇log p_θ + β ∇KL` for the
/// generator and `-mean r ∇log p_φ` for the retriever.
pub fn rl_gradients<M: Trainable>(
    model: &M,
    reference: &M,
    params: &RetrieverParams,
    batch: &PolicyGradientBatch<M::Prepared>,
    kl_beta: f64,
) -> Result<(M::Gradient, RetrieverGradient, RlDiagnostics)> {
    for item in &batch.items {
        if item.pool_scores.encoder_version != params.version() {
            return Err(Error::StaleIndex {
                pool: item.pool_scores.encoder_version,
                live: params.version(),
            });
        }
    }
    let n: usize = batch.items.iter().map(|i| i.pairs.len()).sum();
    let mut diag = RlDiagnostics {
        pairs: n,
        ..Default::default()
    };
    let mut g_gen = model.zero_grad();
    let mut g_ret = params.zero_grad();
    if n == 0 {
        return Ok((g_gen, g_ret, diag));
    }
    let inv = 1.0 / n as f64;
    let per_item: Vec<(M::Gradient, RetrieverGradient, f64)> = batch
        .items
        .par_iter()
        .map(|item| {
            let mut g = model.zero_grad();
            let mut r = params.zero_grad();
            let mut kl = 0.0;
            for pair in &item.pairs {
                let adv = pair.reward.total - pair.baseline;
                accumulate_trajectory(model, &pair.prepared, &pair.trajectory, -adv * inv, &mut g);
                if kl_beta > 0.0 {
                    accumulate_kl_grad(
                        reference,
                        model,
                        &pair.prepared,
                        &pair.trajectory,
                        kl_beta * inv,
                        &mut g,
                    );
                }
                kl += kl_penalty(reference, model, &pair.prepared, &pair.trajectory);
                item.pool_scores.accumulate_log_prob_grad(
                    pair.pool_index,
                    -pair.reward.total * inv,
                    &mut r,
                );
            }
            (g, r, kl)
        })
        .collect();
    for (g, r, kl) in &per_item {
        g_gen.add_scaled(g, 1.0);
        g_ret.add_scaled(r, 1.0);
        diag.kl += kl * inv;
    }
    for pair in batch.items.iter().flat_map(|i| &i.pairs) {
        diag.mean_reward += pair.reward.total * inv;
        diag.mean_r_cons += pair.reward.consistency * inv;
        diag.mean_r_divs += pair.reward.diversity * inv;
        diag.mean_baseline += pair.baseline * inv;
    }
    Ok((g_gen, g_ret, diag))
}

/// One joint policy-gradient update of generator and retriever.
pub fn rl_step<M: Trainable>(
    model: &mut M,
    reference: &M,
    params: &mut RetrieverParams,
    batch: &PolicyGradientBatch<M::Prepared>,
    cfg: &RlStepConfig,
) -> Result<RlDiagnostics> {
    let (mut g_gen, mut g_ret, mut diag) =
        rl_gradients(model, reference, params, batch, cfg.kl_beta)?;
    diag.generator_grad_norm = g_gen.clip(cfg.grad_clip);
    diag.retriever_grad_norm = g_ret.clip(cfg.grad_clip);
    model.descend(&g_gen, cfg.generator_lr);
    params.descend(&g_ret, cfg.retriever_lr);
    Ok(diag)
}

/// Per-item seed derived from the root seed and a path of labels.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(combine(root, hash_str("styleqg")), |h, p| combine(h, *p))
}

/// Samples styles and questions for one training example and scores them.
#[allow(clippy::too_many_arguments)]
pub fn collect_item<M: SequenceModel>(
    model: &M,
    sample: &Sample,
    z0: &Template,
    index: &crate::retriever::RetrievalIndex,
    params: &RetrieverParams,
    cfg: &TrainerConfig,
    rewards: &RewardModel<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<PgItem<M::Prepared>> {
    let pool = retrieve_pool(index, params, z0, cfg.train_pool)?;
    let ds = sample_from_pool(
        model,
        &sample.input,
        z0,
        pool,
        params,
        &cfg.training_sampling(),
        SampleMode::Training,
        rng,
    )?;
    let mut pairs = Vec::with_capacity(ds.pairs.len());
    for p in ds.pairs {
        let prepared = generator::prepare(model, &sample.input, Some(&p.style))?;
        let reward = rewards.score(&sample.input, &p.question.question, Some(&p.style));
        let baseline =
            greedy_baseline(model, &prepared, &sample.input, Some(&p.style), rewards)?.total;
        pairs.push(PgPair {
            style: p.style,
            pool_index: p.pool_index,
            prepared,
            trajectory: p.trajectory,
            question: p.question,
            reward,
            baseline,
        });
    }
    Ok(PgItem {
        id: sample.id.clone(),
        input: sample.input.clone(),
        z0: z0.clone(),
        pool: ds.pool,
        pool_scores: ds.pool_scores,
        pairs,
    })
}

/// The template of a sample's own gold question, if it is not fully masked.
pub fn gold_template(
    sample: &Sample,
    tagger: &dyn Tagger,
    lexicon: &Lexicon,
) -> Result<Option<Template>> {
    let spans = tagger.tag(sample.question.tokens());
    match extract_template(
        &sample.question,
        &sample.input.context_token_set(),
        &spans,
        lexicon,
    ) {
        Ok(t) => Ok(Some(t)),
        Err(Error::AllMasked) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One row of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: Option<f64>,
    pub mean_r_cons: Option<f64>,
    pub mean_r_divs: Option<f64>,
    pub kl: Option<f64>,
    pub oracle_bleu_dev: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trained models and the training record.
pub struct TrainOutcome {
    pub vanilla: PointerLm,
    pub style: PointerLm,
    pub retriever: RetrieverParams,
    pub history: Vec<EpochRecord>,
    /// RL epoch selected by development Oracle BLEU (0 only when there are
    /// no RL epochs).
    pub best_epoch: usize,
    pub sl_losses: Vec<f64>,
}

/// Everything training reads.
pub struct TrainInputs<'a> {
    pub train: &'a [Sample],
    pub dev: &'a [Sample],
    pub corpus: &'a TemplateCorpus,
    pub tagger: &'a (dyn Tagger + Sync),
    pub lexicon: &'a Lexicon,
    pub qa: &'a dyn QaBackend,
}

fn sl_epochs<F>(
    model: &mut PointerLm,
    n: usize,
    cfg: &TrainerConfig,
    stage: u64,
    mut example: F,
    losses: &mut Vec<f64>,
) -> Result<()>
where
    F: FnMut(&PointerLm, usize, usize) -> Result<Option<SlExample<generator::PreparedInput>>>,
{
    let batches_per_epoch = n.div_ceil(cfg.sl_batch_size);
    let total = batches_per_epoch * cfg.sl_epochs;
    let mut step = 0;
    for epoch in 0..cfg.sl_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[stage, epoch as u64],
        )));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.sl_batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| example(model, epoch, i))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            if !batch.is_empty() {
                let lr = scheduled_lr(cfg.sl_lr, step, total, cfg.sl_warmup_ratio);
                epoch_loss += sl_step(model, &batch, lr, cfg.grad_clip);
                batches += 1;
            }
            step += 1;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(())
}

const STAGE_VANILLA: u64 = 1;
const STAGE_STYLE: u64 = 2;
const STAGE_CORRUPT: u64 = 3;
const STAGE_RL: u64 = 4;

/// Runs supervised training of the vanilla and style models, then RL
/// epochs; selects the RL epoch with the best development Oracle BLEU. With
/// `out_dir`, per-epoch checkpoints, the best models and `history.csv` are
/// written there.
pub fn train(
    inputs: &TrainInputs<'_>,
    cfg: &TrainerConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let templates = inputs.corpus.templates();
    let mut pcfg = PointerLmConfig::new(PointerLmConfig::vocab_from(
        inputs.train,
        templates,
        inputs.lexicon,
    ));
    pcfg.max_input_len = cfg.max_input_len;
    pcfg.max_output_len = cfg.max_output_len;
    let fresh = || PointerLm::new(pcfg.clone()).with_lexicon(inputs.lexicon.clone());

    let gold: Vec<Option<Template>> = inputs
        .train
        .iter()
        .map(|s| gold_template(s, inputs.tagger, inputs.lexicon))
        .collect::<Result<_>>()?;
    let pools = CorruptionPools::from_samples(inputs.train, inputs.tagger, inputs.lexicon);
    let corruption = cfg.corruption();
    let mut sl_losses = Vec::new();

    let mut vanilla = fresh();
    sl_epochs(
        &mut vanilla,
        inputs.train.len(),
        cfg,
        STAGE_VANILLA,
        |m, _, i| {
            let s = &inputs.train[i];
            SlExample::new(m, &s.input, None, s.question.tokens())
        },
        &mut sl_losses,
    )?;

    // every sample appears once with its corrupted template and once with
    // none, the input used for the vanilla slot at generation time
    let n = inputs.train.len();
    let mut style = fresh();
    sl_epochs(
        &mut style,
        2 * n,
        cfg,
        STAGE_STYLE,
        |m, epoch, i| {
            let s = &inputs.train[i % n];
            if i >= n {
                return SlExample::new(m, &s.input, None, s.question.tokens());
            }
            let z = gold[i].as_ref().map(|z0| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[STAGE_CORRUPT, epoch as u64, i as u64],
                ));
                corrupt_template(z0, &corruption, &pools, templates, &mut rng)
            });
            SlExample::new(m, &s.input, z.as_ref(), s.question.tokens())
        },
        &mut sl_losses,
    )?;

    let reference = style.clone();
    let mut params = RetrieverParams::identity(cfg.embedding_dim);
    let rewards = RewardModel::new(inputs.qa, cfg.lambda);
    let dev: &[Sample] = if cfg.dev_limit > 0 && cfg.dev_limit < inputs.dev.len() {
        &inputs.dev[..cfg.dev_limit]
    } else {
        inputs.dev
    };

    let dev_oracle = |style: &PointerLm, params: &RetrieverParams| -> Result<f64> {
        if dev.is_empty() {
            return Ok(0.0);
        }
        let index = build_index(inputs.corpus, params)?;
        let run = pipeline::generate_top_n(
            &vanilla,
            style,
            &index,
            params,
            dev,
            cfg,
            inputs.tagger,
            inputs.lexicon,
        )?;
        Ok(metrics::oracle_bleu(&run.samples))
    };

    let ckpt = |epoch: usize, style: &PointerLm, params: &RetrieverParams| -> Result<()> {
        if let Some(dir) = out_dir {
            let d = dir.join(format!("epoch-{epoch}"));
            style.save(&d, "style")?;
            params.save(&d, "retriever")?;
        }
        Ok(())
    };

    let mut history = vec![EpochRecord {
        epoch: 0,
        mean_reward: None,
        mean_r_cons: None,
        mean_r_divs: None,
        kl: None,
        oracle_bleu_dev: dev_oracle(&style, &params)?,
    }];
    ckpt(0, &style, &params)?;
    let mut best = (history[0].oracle_bleu_dev, 0, style.clone(), params.clone());

    let usable: Vec<usize> = (0..inputs.train.len())
        .filter(|&i| gold[i].is_some())
        .collect();
    let batches_per_epoch = usable.len().div_ceil(cfg.rl_batch_size);
    let total_steps = batches_per_epoch * cfg.rl_epochs;
    let mut step = 0;
    for epoch in 1..=cfg.rl_epochs {
        let index = build_index(inputs.corpus, &params)?;
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[STAGE_RL, epoch as u64],
        )));
        let mut sums = RlDiagnostics::default();
        let mut pairs = 0.0;
        for chunk in order.chunks(cfg.rl_batch_size) {
            let items = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[STAGE_RL, epoch as u64, i as u64, 1],
                    ));
                    let z0 = gold[i].as_ref().unwrap();
                    collect_item(
                        &style,
                        &inputs.train[i],
                        z0,
                        &index,
                        &params,
                        cfg,
                        &rewards,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = PolicyGradientBatch { items };
            let step_cfg = RlStepConfig {
                kl_beta: cfg.kl_beta,
                generator_lr: scheduled_lr(
                    cfg.generator_lr,
                    step,
                    total_steps,
                    cfg.rl_warmup_ratio,
                ),
                retriever_lr: scheduled_lr(
                    cfg.retriever_lr,
                    step,
                    total_steps,
                    cfg.rl_warmup_ratio,
                ),
                grad_clip: cfg.grad_clip,
            };
            let d = rl_step(&mut style, &reference, &mut params, &batch, &step_cfg)?;
            let w = d.pairs as f64;
            sums.mean_reward += d.mean_reward * w;
            sums.mean_r_cons += d.mean_r_cons * w;
            sums.mean_r_divs += d.mean_r_divs * w;
            sums.kl += d.kl * w;
            pairs += w;
            step += 1;
        }
        let norm = pairs.max(1.0);
        let oracle = dev_oracle(&style, &params)?;
        history.push(EpochRecord {
            epoch,
            mean_reward: Some(sums.mean_reward / norm),
            mean_r_cons: Some(sums.mean_r_cons / norm),
            mean_r_divs: Some(sums.mean_r_divs / norm),
            kl: Some(sums.kl / norm),
            oracle_bleu_dev: oracle,
        });
        ckpt(epoch, &style, &params)?;
        if epoch == 1 || oracle > best.0 {
            best = (oracle, epoch, style.clone(), params.clone());
        }
    }

    let (_, best_epoch, best_style, best_params) = best;
    if let Some(dir) = out_dir {
        let model_dir = dir.join("model");
        vanilla.save(&model_dir, "vanilla")?;
        best_style.save(&model_dir, "style")?;
        best_params.save(&model_dir, "retriever")?;
        write_history(&dir.join("history.csv"), &history)?;
        let mut f = fs::File::create(dir.join("best_epoch.txt")).map_err(|e| Error::io(dir, e))?;
        writeln!(f, "{best_epoch}").map_err(|e| Error::io(dir, e))?;
    }
    Ok(TrainOutcome {
        vanilla,
        style: best_style,
        retriever: best_params,
        history,
        best_epoch,
        sl_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::TabularLm;

    fn t(s: &str) -> Template {
        Template::parse(s).unwrap()
    }

    #[test]
    fn corruption_examples() {
        let z0 = t("what is [MASK] ?");
        let pools = CorruptionPools {
            entities: vec![vec!["Acme".into()]],
            nouns: vec!["city".into()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(
                corrupt_template(&z0, &CorruptionConfig::none(), &pools, &[], &mut rng),
                z0
            );
        }
        let del = CorruptionConfig {
            delete_mask: 1.0,
            ..CorruptionConfig::none()
        };
        assert_eq!(
            corrupt_template(&z0, &del, &pools, &[], &mut rng).text(),
            "what is ?"
        );
        let rep = CorruptionConfig {
            replace_mask_with_entity: 1.0,
            ..CorruptionConfig::none()
        };
        assert_eq!(
            corrupt_template(&z0, &rep, &pools, &[], &mut rng).text(),
            "what is Acme ?"
        );
        let corpus = vec![t("who [MASK] ?"), t("where is [MASK] ?")];
        let swap = CorruptionConfig {
            swap_template: 1.0,
            ..CorruptionConfig::none()
        };
        assert!(corpus.contains(&corrupt_template(&z0, &swap, &pools, &corpus, &mut rng)));
        let add = CorruptionConfig {
            add_nouns: 1.0,
            ..CorruptionConfig::none()
        };
        let n = corrupt_template(&z0, &add, &pools, &corpus, &mut rng)
            .tokens()
            .len();
        assert!((5..=6).contains(&n));
        // no mask: falls through to unchanged
        let plain = t("who is it ?");
        assert_eq!(corrupt_template(&plain, &del, &pools, &[], &mut rng), plain);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let lrs: Vec<f64> = (0..10).map(|s| scheduled_lr(1.0, s, 10, 0.2)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert!(lrs.windows(2).skip(1).all(|w| w[1] < w[0]));
        assert!(lrs[9] > 0.0);
    }

    #[test]
    fn kl_closed_form() {
        // reference uniform over {a, b}, current (0.9, 0.1) at the first step
        let reference = TabularLm::new(&["a", "b"], 1);
        let mut current = reference.clone();
        current.params_mut()[0] = 0.9f64.ln();
        current.params_mut()[1] = 0.1f64.ln();
        let kl = kl_penalty(&reference, &current, &(), &[0]);
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expect).abs() < 1e-12, "{kl} vs {expect}");
        assert!((expect - 0.5108).abs() < 1e-3);
        assert_eq!(kl_penalty(&reference, &reference, &(), &[0, 1]), 0.0);
    }

    #[test]
    fn sl_loss_closed_forms() {
        let m = TabularLm::new(&["a", "b", "c"], 3);
        // uniform over 3 at step 0 (end masked), over 4 afterwards
        let ex = SlExample {
            prepared: (),
            targets: vec![0, 3],
        };
        let (loss, _) = sl_loss_and_grad(&m, &[ex]);
        assert!((loss - (3f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sl_overfits_small_dataset() {
        let mut m = TabularLm::new(&["a", "b", "c"], 4);
        let batch: Vec<SlExample<()>> = (0..10)
            .map(|_| SlExample {
                prepared: (),
                targets: vec![0, 1, 3],
            })
            .collect();
        let first = sl_step(&mut m, &batch, 5.0, f64::INFINITY);
        let mut last = first;
        for _ in 0..500 {
            last = sl_step(&mut m, &batch, 5.0, f64::INFINITY);
        }
        assert!(last < 0.01 && last < first, "{first} -> {last}");
    }
}
