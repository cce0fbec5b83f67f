//! Optimization driver: AdamW with decoupled weight decay, cosine learning
//! rate with linear warmup, gradient accumulation, and the epoch loop for
//! both training phases.
//!
//! Losses are reduced as sum-of-CE over all masked positions in a step,
//! divided by the total masked count at step end. That makes splitting a
//! step into micro-batches a pure reassociation of the same example-ordered
//! sum, so `grad_accum x micro_batch` and one fused batch produce identical
//! updates.
//!
//! All randomness is derived functionally from `(seed, epoch, position)`:
//! shuffling, per-example masking, and adapter dropout each get their own
//! salted stream. Resuming at a step boundary therefore replays the exact
//! run, with no RNG state to persist.

use std::io::Write;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_training_batch, masked_ce_grad_sum, masked_ce_sum, TrainMode};
use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, LoraAdapterSet};
use crate::model::{backward, c, forward_full, GradStore, ModelParameters, Scalar};
use crate::vocab::{Specials, TokenSequence};

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const DROPOUT_SALT: u64 = 0x517c_c1b7_2722_0a95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    /// MLM-style corruption over any non-PAD position. Trains LoRA adapters
    /// when attached, or the full model when run on a bare base.
    Cpt,
    /// Response-region masking over instruction pairs; full-parameter.
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Linear warmup length; defaults to 3% of total steps when absent.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub seed: u64,
    pub phase: TrainPhase,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_rate_min")]
    pub mask_rate_min: f64,
    #[serde(default = "default_rate_max")]
    pub mask_rate_max: f64,
}

fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_rate_min() -> f64 {
    0.05
}
fn default_rate_max() -> f64 {
    0.95
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 5e-5,
            warmup_steps: None,
            micro_batch: 16,
            grad_accum: 2,
            epochs: 4,
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 42,
            phase: TrainPhase::Cpt,
            checkpoint_every: 0,
            mask_rate_min: default_rate_min(),
            mask_rate_max: default_rate_max(),
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.effective_batch())
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps_per_epoch(dataset_len) * self.epochs
    }

    pub fn resolved_warmup(&self, total_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (total_steps as f64 * 0.03).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.grad_accum == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "micro_batch, grad_accum and epochs must be positive".into(),
            ));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::InvalidConfig("peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from zero to `peak` over `warmup` steps, then cosine decay
/// to zero at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// First/second moment estimates for every trainable tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    /// Applied update count (drives bias correction).
    pub step: u64,
    pub m: IndexMap<String, Array2<F>>,
    pub v: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> Default for OptimizerState<F> {
    fn default() -> Self {
        OptimizerState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// What a training run owns and updates.
#[derive(Debug, Clone)]
pub enum TrainTarget<F> {
    /// Every base tensor trains.
    Full(ModelParameters<F>),
    /// Only the adapter tensors train; the base stays frozen.
    Lora(AdaptedModel<F>),
}

impl<F: Scalar> TrainTarget<F> {
    pub fn params(&self) -> &ModelParameters<F> {
        match self {
            TrainTarget::Full(p) => p,
            TrainTarget::Lora(a) => &a.base,
        }
    }

    pub fn adapters(&self) -> Option<&LoraAdapterSet<F>> {
        match self {
            TrainTarget::Full(_) => None,
            TrainTarget::Lora(a) => Some(&a.adapters),
        }
    }

    pub fn trains_base(&self) -> bool {
        matches!(self, TrainTarget::Full(_))
    }

    /// Resolve a trainable tensor name. Frozen tensors are unreachable on
    /// purpose: a LoRA target only exposes `lora.*` names.
    pub fn trainable_tensor_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        match self {
            TrainTarget::Full(p) => p.tensor_mut(name),
            TrainTarget::Lora(a) => a.adapters.tensor_mut(name),
        }
    }
}

/// Weight decay applies to weight matrices only, never layernorm
/// scale/shift or bias rows.
fn decay_applies(name: &str) -> bool {
    !(name.ends_with(".scale")
        || name.ends_with(".shift")
        || name.contains(".b_")
        || name == "head.b")
}

/// One decoupled-weight-decay AdamW update with bias correction. Returns
/// false (and leaves everything untouched) when any gradient is non-finite.
pub fn adamw_step<F: Scalar>(
    target: &mut TrainTarget<F>,
    grads: &GradStore<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<bool> {
    if !grads.all_finite() {
        log::warn!(
            "skipping optimizer step {}: non-finite gradient",
            state.step + 1
        );
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = c::<F>(cfg.beta1);
    let b2 = c::<F>(cfg.beta2);
    let one = F::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr_f = c::<F>(lr);
    let eps = c::<F>(cfg.eps);
    let wd = c::<F>(cfg.weight_decay);

    for (name, g) in grads.iter() {
        let theta = target.trainable_tensor_mut(name).ok_or_else(|| {
            Error::InvalidConfig(format!("gradient for non-trainable tensor {name}"))
        })?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(g.dim()));
        let decay = cfg.weight_decay > 0.0 && decay_applies(name);
        for ((th, &gv), (mv, vv)) in theta
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            let mut next = *th - lr_f * m_hat / (v_hat.sqrt() + eps);
            if decay {
                next = next - lr_f * wd * *th;
            }
            *th = next;
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetric {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub metrics: Vec<StepMetric>,
    /// Mean step loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    /// Examples dropped for having no maskable position.
    pub skipped_examples: u64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

pub type CheckpointFn<'a, F> =
    Box<dyn FnMut(&TrainTarget<F>, &OptimizerState<F>, u64) -> Result<()> + 'a>;

/// Output sinks for a run. `metrics` receives one flushed CSV row per
/// optimizer step; `checkpoint` fires every `checkpoint_every` steps and at
/// the end of training.
pub struct TrainHooks<'a, F: Scalar> {
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint: Option<CheckpointFn<'a, F>>,
}

impl<F: Scalar> Default for TrainHooks<'_, F> {
    fn default() -> Self {
        TrainHooks {
            metrics: None,
            checkpoint: None,
        }
    }
}

pub struct TrainOutcome<F> {
    pub target: TrainTarget<F>,
    pub state: OptimizerState<F>,
    pub report: TrainReport,
}

/// Train from scratch.
pub fn train<F: Scalar>(
    target: TrainTarget<F>,
    dataset: &[TokenSequence],
    cfg: &TrainConfig,
    specials: &Specials,
    hooks: &mut TrainHooks<'_, F>,
) -> Result<TrainOutcome<F>> {
    resume_train(
        target,
        OptimizerState::new(),
        0,
        dataset,
        cfg,
        specials,
        hooks,
    )
}

/// Continue a run from `start_step` (a chunk boundary). With the state and
/// parameters from a checkpoint this replays the uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn resume_train<F: Scalar>(
    mut target: TrainTarget<F>,
    mut state: OptimizerState<F>,
    start_step: u64,
    dataset: &[TokenSequence],
    cfg: &TrainConfig,
    specials: &Specials,
    hooks: &mut TrainHooks<'_, F>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let n = dataset.len();
    if n < cfg.micro_batch {
        return Err(Error::InvalidConfig(format!(
            "dataset of {n} examples is smaller than one micro-batch ({})",
            cfg.micro_batch
        )));
    }

    let eff = cfg.effective_batch();
    let steps_per_epoch = cfg.steps_per_epoch(n);
    let total_steps = cfg.total_steps(n);
    let warmup = cfg.resolved_warmup(total_steps);
    let mode = match cfg.phase {
        TrainPhase::Cpt => TrainMode::Pretrain,
        TrainPhase::Sft => TrainMode::Sft,
    };
    let rate_range = (cfg.mask_rate_min, cfg.mask_rate_max);
    let dropout_active =
        matches!(&target, TrainTarget::Lora(a) if a.adapters.config.dropout > 0.0);

    let mut report = TrainReport {
        total_steps,
        warmup_steps: warmup,
        ..TrainReport::default()
    };
    if let (Some(w), 0) = (hooks.metrics.as_deref_mut(), start_step) {
        writeln!(w, "step,lr,loss")?;
        w.flush()?;
    }

    let mut global_step = start_step;
    let start_epoch = (start_step as usize) / steps_per_epoch;
    let start_offset = (start_step as usize) % steps_per_epoch;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_steps = 0usize;

        for (chunk_idx, chunk) in order.chunks(eff).enumerate() {
            if epoch == start_epoch && chunk_idx < start_offset {
                continue;
            }

            let mut step_grads = GradStore::<F>::new();
            let mut ce_sum = F::zero();
            let mut masked_total = 0usize;

            for (micro_idx, micro) in chunk.chunks(cfg.micro_batch).enumerate() {
                let examples: Vec<TokenSequence> =
                    micro.iter().map(|&i| dataset[i].clone()).collect();
                let stream_base =
                    (epoch * n + chunk_idx * eff + micro_idx * cfg.micro_batch) as u64;
                let batch = make_training_batch(
                    &examples,
                    mode,
                    rate_range,
                    cfg.seed,
                    stream_base,
                    specials,
                )?;
                report.skipped_examples += batch.skipped as u64;

                for (item_idx, item) in batch.items.iter().enumerate() {
                    let mut drop_rng = if dropout_active {
                        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
                        r.set_stream(stream_base + item_idx as u64);
                        Some(r)
                    } else {
                        None
                    };
                    let (logits, cache) = forward_full(
                        target.params(),
                        target.adapters(),
                        &item.seq.ids,
                        Some(specials.pad),
                        drop_rng.as_mut(),
                    )?;
                    let (ce, count) = masked_ce_sum(&logits, &item.targets, &item.seq.masked);
                    ce_sum += ce;
                    masked_total += count;
                    let dlogits = masked_ce_grad_sum(&logits, &item.targets, &item.seq.masked);
                    let grads = backward(
                        target.params(),
                        target.adapters(),
                        &cache,
                        &dlogits,
                        target.trains_base(),
                    )?;
                    step_grads.add_store(&grads);
                }
            }

            let lr = cosine_lr(global_step as usize, warmup, total_steps, cfg.peak_lr);
            let loss = if masked_total > 0 {
                step_grads.scale(F::one() / c::<F>(masked_total as f64));
                let loss = (ce_sum / c::<F>(masked_total as f64)).to_f64().unwrap();
                adamw_step(&mut target, &step_grads, &mut state, lr, cfg)?;
                loss
            } else {
                log::warn!("step {global_step}: no maskable positions in chunk, skipping update");
                f64::NAN
            };
            global_step += 1;

            let metric = StepMetric {
                step: global_step,
                lr,
                loss,
            };
            if let Some(w) = hooks.metrics.as_deref_mut() {
                writeln!(w, "{},{},{}", metric.step, metric.lr, metric.loss)?;
                w.flush()?;
            }
            report.metrics.push(metric);
            if loss.is_finite() {
                epoch_loss_sum += loss;
                epoch_steps += 1;
            }

            if cfg.checkpoint_every > 0 && global_step % cfg.checkpoint_every as u64 == 0 {
                if let Some(f) = hooks.checkpoint.as_mut() {
                    f(&target, &state, global_step)?;
                }
            }
        }

        if epoch_steps > 0 {
            report.epoch_losses.push(epoch_loss_sum / epoch_steps as f64);
        }
    }

    if let Some(f) = hooks.checkpoint.as_mut() {
        f(&target, &state, global_step)?;
    }

    Ok(TrainOutcome {
        target,
        state,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach, LoraConfig};
    use crate::model::{init_parameters, ModelConfig};
    use crate::vocab::{build_vocab, TokenizerMode, Vocabulary};

    fn toy_model() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ffn: 64,
            vocab_size: 40,
            max_positions: 32,
            seed: 9,
        }
    }

    fn toy_vocab() -> Vocabulary {
        build_vocab(
            "the cat sat on a mat\nkedi oturdu\nabcdefghijklmnop",
            TokenizerMode::Char,
            40,
        )
        .unwrap()
    }

    fn toy_dataset(vocab: &Vocabulary, n: usize) -> Vec<TokenSequence> {
        let lines = [
            "the cat sat",
            "a cat on a mat",
            "kedi oturdu",
            "abc def",
            "mat on cat",
            "sat the cat",
        ];
        (0..n)
            .map(|i| vocab.encode(lines[i % lines.len()]))
            .collect()
    }

    #[test]
    fn cosine_schedule_joints() {
        let peak = 5e-5;
        assert_eq!(cosine_lr(0, 10, 100, peak), 0.0);
        assert_eq!(cosine_lr(10, 10, 100, peak), peak);
        assert!((cosine_lr(55, 10, 100, peak) - peak / 2.0).abs() < 1e-18);
        assert!(cosine_lr(100, 10, 100, peak).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_monotone_shape() {
        let peak = 1e-3;
        let lrs: Vec<f64> = (0..=200).map(|s| cosine_lr(s, 20, 200, peak)).collect();
        for w in lrs[..=20].windows(2) {
            assert!(w[1] >= w[0]);
        }
        for w in lrs[20..].windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn cosine_zero_warmup_starts_at_peak() {
        assert_eq!(cosine_lr(0, 0, 100, 1e-4), 1e-4);
    }

    fn scalar_target(value: f32) -> TrainTarget<f32> {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 1,
            n_heads: 1,
            d_ffn: 1,
            vocab_size: 1,
            max_positions: 1,
            seed: 0,
        };
        let mut params = ModelParameters::<f32>::zeros(&cfg);
        params.head_w[[0, 0]] = value;
        TrainTarget::Full(params)
    }

    #[test]
    fn adamw_single_scalar_matches_hand_computation() {
        // theta0=1, g=0.5, lr=0.1, b1=0.9, b2=0.999, eps=1e-8, wd=0:
        //   m = 0.05, v = 0.00025
        //   m_hat = 0.05/0.1 = 0.5, v_hat = 0.00025/0.001 = 0.25
        //   theta1 = 1 - 0.1 * 0.5/(sqrt(0.25) + 1e-8)
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut target = scalar_target(1.0);
        let mut state = OptimizerState::<f32>::new();
        let mut grads = GradStore::new();
        grads.accumulate("head.w", &Array2::from_elem((1, 1), 0.5f32));
        adamw_step(&mut target, &grads, &mut state, 0.1, &cfg).unwrap();
        let theta = target.params().head_w[[0, 0]] as f64;
        let expect = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((theta - expect).abs() < 1e-7, "{theta} vs {expect}");

        // Same update performed in f64 matches the hand numbers to 1e-12.
        let m = 0.9 * 0.0 + 0.1 * 0.5;
        let v = 0.999 * 0.0 + 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.9f64);
        let v_hat = v / (1.0 - 0.999f64);
        let theta64 = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((theta64 - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grads_no_decay_is_identity() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut target = scalar_target(0.7);
        let mut state = OptimizerState::<f32>::new();
        let mut grads = GradStore::new();
        grads.insert_zeros("head.w", (1, 1));
        adamw_step(&mut target, &grads, &mut state, 0.1, &cfg).unwrap();
        assert_eq!(target.params().head_w[[0, 0]], 0.7);
    }

    #[test]
    fn adamw_decay_shrinks_weights_geometrically() {
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut target = scalar_target(1.0);
        let mut state = OptimizerState::<f32>::new();
        let mut grads = GradStore::new();
        grads.insert_zeros("head.w", (1, 1));
        let lr = 0.1;
        for _ in 0..3 {
            adamw_step(&mut target, &grads, &mut state, lr, &cfg).unwrap();
        }
        let expect = (1.0f64 - lr * 0.01).powi(3);
        let theta = target.params().head_w[[0, 0]] as f64;
        assert!((theta - expect).abs() < 1e-7);
    }

    #[test]
    fn adamw_skips_non_finite_gradients() {
        let cfg = TrainConfig::default();
        let mut target = scalar_target(0.5);
        let mut state = OptimizerState::<f32>::new();
        let mut grads = GradStore::new();
        grads.accumulate("head.w", &Array2::from_elem((1, 1), f32::NAN));
        let stepped = adamw_step(&mut target, &grads, &mut state, 0.1, &cfg).unwrap();
        assert!(!stepped);
        assert_eq!(target.params().head_w[[0, 0]], 0.5);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn decay_classification() {
        assert!(decay_applies("layer0.attn.w_q"));
        assert!(decay_applies("tok_emb"));
        assert!(decay_applies("head.w"));
        assert!(decay_applies("lora.A.layer0.mlp.w_up"));
        assert!(!decay_applies("layer0.ln1.scale"));
        assert!(!decay_applies("final_ln.shift"));
        assert!(!decay_applies("layer1.attn.b_q"));
        assert!(!decay_applies("head.b"));
    }

    fn small_train_cfg() -> TrainConfig {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: Some(0),
            micro_batch: 4,
            grad_accum: 2,
            epochs: 2,
            seed: 17,
            phase: TrainPhase::Cpt,
            mask_rate_min: 0.15,
            mask_rate_max: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dataset_smaller_than_micro_batch_is_rejected() {
        let vocab = toy_vocab();
        let params = init_parameters::<f32>(&toy_model()).unwrap();
        let dataset = toy_dataset(&vocab, 2);
        let err = train(
            TrainTarget::Full(params),
            &dataset,
            &small_train_cfg(),
            &vocab.specials,
            &mut TrainHooks::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn metrics_rows_match_step_count() {
        let vocab = toy_vocab();
        let params = init_parameters::<f32>(&toy_model()).unwrap();
        let dataset = toy_dataset(&vocab, 16);
        let cfg = small_train_cfg();
        let mut csv = Vec::new();
        let outcome = {
            let mut hooks = TrainHooks {
                metrics: Some(&mut csv),
                checkpoint: None,
            };
            train(
                TrainTarget::Full(params),
                &dataset,
                &cfg,
                &vocab.specials,
                &mut hooks,
            )
            .unwrap()
        };
        let expected_steps = cfg.total_steps(dataset.len());
        assert_eq!(outcome.report.metrics.len(), expected_steps);
        let text = String::from_utf8(csv).unwrap();
        let rows: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(rows[0], "step,lr,loss");
        assert_eq!(rows.len() - 1, expected_steps);
    }

    #[test]
    fn training_is_deterministic() {
        let vocab = toy_vocab();
        let dataset = toy_dataset(&vocab, 12);
        let cfg = small_train_cfg();
        let run = || {
            let params = init_parameters::<f32>(&toy_model()).unwrap();
            train(
                TrainTarget::Full(params),
                &dataset,
                &cfg,
                &vocab.specials,
                &mut TrainHooks::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.report.metrics, b.report.metrics);
        assert_eq!(a.target.params(), b.target.params());
    }

    #[test]
    fn accumulation_split_is_equivalent() {
        let vocab = toy_vocab();
        let dataset = toy_dataset(&vocab, 8);
        let base = init_parameters::<f32>(&toy_model()).unwrap();
        let mut cfg = small_train_cfg();
        cfg.epochs = 1;
        cfg.micro_batch = 4;
        cfg.grad_accum = 2;
        let split = train(
            TrainTarget::Full(base.clone()),
            &dataset,
            &cfg,
            &vocab.specials,
            &mut TrainHooks::default(),
        )
        .unwrap();
        cfg.micro_batch = 8;
        cfg.grad_accum = 1;
        let fused = train(
            TrainTarget::Full(base),
            &dataset,
            &cfg,
            &vocab.specials,
            &mut TrainHooks::default(),
        )
        .unwrap();
        let mut max_diff = 0.0f32;
        split.target.params().for_each_tensor(|name, t| {
            let other = fused.target.params().tensor(name).unwrap();
            for (a, b) in t.iter().zip(other.iter()) {
                max_diff = max_diff.max((a - b).abs());
            }
        });
        assert!(max_diff < 1e-6, "max parameter diff {max_diff}");
    }

    #[test]
    fn resume_replays_the_uninterrupted_run() {
        let vocab = toy_vocab();
        let dataset = toy_dataset(&vocab, 16);
        let cfg = small_train_cfg(); // 2 steps/epoch x 2 epochs = 4 steps
        let base = init_parameters::<f32>(&toy_model()).unwrap();
        let straight = train(
            TrainTarget::Full(base.clone()),
            &dataset,
            &cfg,
            &vocab.specials,
            &mut TrainHooks::default(),
        )
        .unwrap();

        // Snapshot mid-run through the checkpoint hook, then resume.
        let mut snap: Option<(TrainTarget<f32>, OptimizerState<f32>)> = None;
        {
            let mut cfg_half = cfg.clone();
            cfg_half.checkpoint_every = 2;
            let mut hooks = TrainHooks {
                metrics: None,
                checkpoint: Some(Box::new(|t, s, step| {
                    if step == 2 && snap.is_none() {
                        snap = Some((t.clone(), s.clone()));
                    }
                    Ok(())
                })),
            };
            train(
                TrainTarget::Full(base),
                &dataset,
                &cfg_half,
                &vocab.specials,
                &mut hooks,
            )
            .unwrap();
        }
        let (target, state) = snap.unwrap();
        let resumed = resume_train(
            target,
            state,
            2,
            &dataset,
            &cfg,
            &vocab.specials,
            &mut TrainHooks::default(),
        )
        .unwrap();

        assert_eq!(straight.target.params(), resumed.target.params());
        assert_eq!(
            straight.report.metrics.last(),
            resumed.report.metrics.last()
        );
    }

    #[test]
    fn lora_training_leaves_base_bit_identical() {
        let vocab = toy_vocab();
        let dataset = toy_dataset(&vocab, 8);
        let params = init_parameters::<f32>(&toy_model()).unwrap();
        let reference = params.clone();
        let adapted = attach(
            params,
            &LoraConfig {
                rank: 4,
                alpha: 4.0,
                dropout: 0.1,
                ..LoraConfig::default()
            },
            3,
        )
        .unwrap();
        let mut cfg = small_train_cfg();
        cfg.epochs = 3;
        let outcome = train(
            TrainTarget::Lora(adapted),
            &dataset,
            &cfg,
            &vocab.specials,
            &mut TrainHooks::default(),
        )
        .unwrap();
        assert_eq!(outcome.target.params(), &reference);
        match &outcome.target {
            TrainTarget::Lora(a) => {
                assert!(a
                    .adapters
                    .pairs
                    .values()
                    .any(|p| p.b.iter().any(|&v| v != 0.0)));
            }
            _ => unreachable!(),
        }
        // Optimizer state exists only for the trainable adapter tensors.
        assert!(outcome.state.m.keys().all(|k| k.starts_with("lora.")));
    }

    #[test]
    fn tiny_dataset_overfits() {
        let vocab = toy_vocab();
        let dataset = toy_dataset(&vocab, 8);
        let params = init_parameters::<f32>(&toy_model()).unwrap();
        let cfg = TrainConfig {
            peak_lr: 5e-3,
            warmup_steps: Some(10),
            micro_batch: 8,
            grad_accum: 1,
            epochs: 500,
            weight_decay: 0.0,
            seed: 5,
            phase: TrainPhase::Cpt,
            mask_rate_min: 0.15,
            mask_rate_max: 0.3,
            ..TrainConfig::default()
        };
        let outcome = train(
            TrainTarget::Full(params),
            &dataset,
            &cfg,
            &vocab.specials,
            &mut TrainHooks::default(),
        )
        .unwrap();
        let last = outcome.report.epoch_losses.last().copied().unwrap();
        let first = outcome.report.epoch_losses[0];
        assert!(
            last < 0.35 && last < first / 3.0,
            "loss {first:.3} -> {last:.3} did not converge"
        );
    }
}
