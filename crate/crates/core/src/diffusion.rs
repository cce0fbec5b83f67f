//! The discrete absorbing-state forward process and the masked
//! cross-entropy training objective.
//!
//! A token either survives a step or transitions to `<mask>` and stays
//! there. Training draws one continuous mask rate per example instead of a
//! discrete timestep; composing the per-step kernel with rates
//! `beta_1..beta_t` masks each position with probability
//! `1 - prod(1 - beta_u)`, which is exactly the single-shot rate
//! (covered by tests below).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Scalar;
use crate::vocab::{Region, Specials, TokenSequence};

/// Per-step mask probabilities and their cumulative survival products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    survival: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("noise schedule needs >= 1 step".into()));
        }
        if betas.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
            return Err(Error::InvalidConfig("beta outside [0, 1]".into()));
        }
        let mut survival = Vec::with_capacity(betas.len());
        let mut s = 1.0;
        for &b in &betas {
            s *= 1.0 - b;
            survival.push(s);
        }
        Ok(NoiseSchedule { betas, survival })
    }

    /// `beta_t = 1/(T-t+1)`: survival decays linearly to exactly zero, so
    /// the final state is fully masked.
    pub fn linear_absorbing(t_steps: usize) -> Self {
        let betas = (1..=t_steps)
            .map(|t| 1.0 / (t_steps - t + 1) as f64)
            .collect();
        Self::from_betas(betas).expect("valid by construction")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructors reject empty schedules
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `s_t = prod_{u<=t}(1 - beta_u)`, 1-based.
    pub fn survival(&self, t: usize) -> f64 {
        self.survival[t - 1]
    }

    /// Single-shot mask probability equivalent to running steps `1..=t`.
    pub fn mask_prob(&self, t: usize) -> f64 {
        1.0 - self.survival(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// A generation-grade schedule ends effectively fully masked.
    pub fn is_generation_grade(&self) -> bool {
        *self.survival.last().unwrap() <= 1e-3
    }
}

/// Single-token transition probability of the absorbing kernel:
/// stay with `1 - beta`, absorb into `<mask>` with `beta`, and once masked
/// always masked.
pub fn transition_prob(x_prev: usize, x_next: usize, beta: f64, mask_id: usize) -> f64 {
    if x_prev == mask_id {
        if x_next == mask_id {
            1.0
        } else {
            0.0
        }
    } else if x_next == x_prev {
        1.0 - beta
    } else if x_next == mask_id {
        beta
    } else {
        0.0
    }
}

fn maskable(seq: &TokenSequence, i: usize, specials: &Specials) -> bool {
    seq.ids[i] != specials.pad && seq.region[i] != Region::Prompt
}

/// Single-shot corruption of a clean sequence: each eligible position is
/// independently replaced by `<mask>` with probability `mask_rate`. PAD and
/// prompt-region positions are never masked.
pub fn corrupt(
    x0: &TokenSequence,
    mask_rate: f64,
    specials: &Specials,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    if x0.contains_id(specials.mask) {
        return Err(Error::MaskInInput);
    }
    let mut out = x0.clone();
    for i in 0..out.len() {
        if maskable(&out, i, specials) && rng.random::<f64>() < mask_rate {
            out.ids[i] = specials.mask;
            out.masked[i] = true;
        }
    }
    Ok(out)
}

/// One kernel step on a possibly-corrupted sequence: already-masked
/// positions stay masked (the absorbing property); each still-visible
/// eligible position masks with probability `beta`.
pub fn corrupt_step(
    xt: &TokenSequence,
    beta: f64,
    specials: &Specials,
    rng: &mut ChaCha8Rng,
) -> TokenSequence {
    let mut out = xt.clone();
    for i in 0..out.len() {
        if !out.masked[i] && maskable(&out, i, specials) && rng.random::<f64>() < beta {
            out.ids[i] = specials.mask;
            out.masked[i] = true;
        }
    }
    out
}

/// Which positions a training batch may mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Mask any non-PAD position.
    Pretrain,
    /// Mask only response-region positions; the prompt stays visible.
    Sft,
}

/// One corrupted example with its supervision targets.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Corrupted sequence; `seq.masked` marks the loss positions.
    pub seq: TokenSequence,
    /// Original ids over the full length (read at masked positions).
    pub targets: Vec<usize>,
    /// Mask rate drawn for this example.
    pub rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
    /// Examples dropped for having no maskable position.
    pub skipped: usize,
}

/// Build a training batch. Each example gets its own RNG stream
/// `(seed, stream_base + index)` so results do not depend on batch
/// splitting or thread count. A draw that masks nothing is redrawn (rate
/// and positions both) until at least one position is masked.
pub fn make_training_batch(
    examples: &[TokenSequence],
    mode: TrainMode,
    rate_range: (f64, f64),
    seed: u64,
    stream_base: u64,
    specials: &Specials,
) -> Result<TrainingBatch> {
    let (rate_min, rate_max) = rate_range;
    if !(0.0..=1.0).contains(&rate_min) || !(0.0..=1.0).contains(&rate_max) || rate_min > rate_max
    {
        return Err(Error::InvalidConfig(format!(
            "mask rate range ({rate_min}, {rate_max}) invalid"
        )));
    }

    let mut batch = TrainingBatch::default();
    for (j, example) in examples.iter().enumerate() {
        if example.contains_id(specials.mask) {
            return Err(Error::MaskInInput);
        }
        let eligible: Vec<usize> = (0..example.len())
            .filter(|&i| match mode {
                TrainMode::Pretrain => maskable(example, i, specials),
                TrainMode::Sft => {
                    example.region[i] == Region::Response && example.ids[i] != specials.pad
                }
            })
            .collect();
        if eligible.is_empty() {
            batch.skipped += 1;
            continue;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_base + j as u64);

        let mut seq = example.clone();
        let rate = loop {
            let rate = if rate_max > rate_min {
                rng.random_range(rate_min..rate_max)
            } else {
                rate_min
            };
            let mut any = false;
            for &i in &eligible {
                if rng.random::<f64>() < rate {
                    seq.ids[i] = specials.mask;
                    seq.masked[i] = true;
                    any = true;
                }
            }
            if any {
                break rate;
            }
            // Degenerate draw: nothing masked, so this row would carry no
            // loss. Redraw rate and positions.
            if rate_max <= rate_min && rate_min == 0.0 {
                return Err(Error::NoMaskedPositions);
            }
        };

        batch.items.push(BatchItem {
            seq,
            targets: example.ids.clone(),
            rate,
        });
    }
    Ok(batch)
}

/// Sum of cross-entropy over masked positions, with the masked count.
/// Unmasked positions contribute exactly zero.
pub fn masked_ce_sum<F: Scalar>(
    logits: &Array2<F>,
    targets: &[usize],
    mask: &[bool],
) -> (F, usize) {
    let mut total = F::zero();
    let mut count = 0;
    for (i, (&m, &target)) in mask.iter().zip(targets.iter()).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(i);
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = max
            + row
                .fold(F::zero(), |acc, &v| acc + (v - max).exp())
                .ln();
        total += lse - row[target];
        count += 1;
    }
    (total, count)
}

/// Mean cross-entropy over masked positions only.
pub fn masked_ce_loss<F: Scalar>(
    logits: &Array2<F>,
    targets: &[usize],
    mask: &[bool],
) -> Result<F> {
    let (total, count) = masked_ce_sum(logits, targets, mask);
    if count == 0 {
        return Err(Error::NoMaskedPositions);
    }
    Ok(total / F::from_usize(count).unwrap())
}

/// Gradient of the *summed* masked cross-entropy w.r.t. the logits:
/// `softmax(row) - onehot(target)` at masked rows, zero elsewhere.
pub fn masked_ce_grad_sum<F: Scalar>(
    logits: &Array2<F>,
    targets: &[usize],
    mask: &[bool],
) -> Array2<F> {
    let mut grad = Array2::zeros(logits.dim());
    for (i, (&m, &target)) in mask.iter().zip(targets.iter()).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(i);
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        let mut out = grad.row_mut(i);
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        out[target] -= F::one();
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, Region, TokenizerMode};

    fn specials() -> Specials {
        Specials::default()
    }

    fn plain_seq(len: usize) -> TokenSequence {
        TokenSequence::plain(vec![10; len])
    }

    #[test]
    fn transition_prob_matches_kernel_cases() {
        let mask = 0;
        assert_eq!(transition_prob(9, 9, 0.3, mask), 0.7);
        assert_eq!(transition_prob(9, mask, 0.3, mask), 0.3);
        assert_eq!(transition_prob(9, 8, 0.3, mask), 0.0);
        assert_eq!(transition_prob(mask, mask, 0.99, mask), 1.0);
        assert_eq!(transition_prob(mask, 5, 0.99, mask), 0.0);
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let v = 10;
        let mask = 0;
        for beta in [0.0, 0.15, 0.5, 1.0] {
            for prev in 0..v {
                let total: f64 = (0..v).map(|next| transition_prob(prev, next, beta, mask)).sum();
                assert!((total - 1.0).abs() < 1e-12, "row {prev} sums to {total}");
            }
        }
    }

    #[test]
    fn corrupt_rate_zero_is_identity() {
        let x0 = plain_seq(20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = corrupt(&x0, 0.0, &specials(), &mut rng).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn corrupt_rate_one_masks_everything_eligible() {
        let x0 = plain_seq(20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = corrupt(&x0, 1.0, &specials(), &mut rng).unwrap();
        assert!(xt.masked.iter().all(|&m| m));
        assert!(xt.ids.iter().all(|&id| id == specials().mask));
    }

    #[test]
    fn corrupt_rejects_masked_input() {
        let mut x0 = plain_seq(5);
        x0.ids[2] = specials().mask;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            corrupt(&x0, 0.5, &specials(), &mut rng),
            Err(Error::MaskInInput)
        ));
    }

    #[test]
    fn corrupt_spares_pad_and_prompt() {
        let sp = specials();
        let mut x0 = TokenSequence::plain(vec![10, 11, sp.pad, 12, 13]);
        x0.region[3] = Region::Prompt;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = corrupt(&x0, 1.0, &sp, &mut rng).unwrap();
        assert_eq!(xt.ids[2], sp.pad);
        assert_eq!(xt.ids[3], 12);
        assert!(!xt.masked[2] && !xt.masked[3]);
        assert!(xt.masked[0] && xt.masked[1] && xt.masked[4]);
    }

    #[test]
    fn corrupt_mask_fraction_within_three_sigma() {
        let n = 10_000usize;
        let x0 = plain_seq(n);
        for (seed, rate) in [(1u64, 0.15f64), (2, 0.5), (3, 0.9)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xt = corrupt(&x0, rate, &specials(), &mut rng).unwrap();
            let masked = xt.num_masked() as f64;
            let mean = n as f64 * rate;
            let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
            assert!(
                (masked - mean).abs() < 3.0 * sigma,
                "rate {rate}: {masked} vs {mean} +- {:.1}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn absorption_under_repeated_steps() {
        let x0 = plain_seq(50);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut xt = corrupt(&x0, 0.4, &specials(), &mut rng).unwrap();
        let initially_masked: Vec<usize> = (0..xt.len()).filter(|&i| xt.masked[i]).collect();
        for _ in 0..10 {
            xt = corrupt_step(&xt, 0.2, &specials(), &mut rng);
            for &i in &initially_masked {
                assert!(xt.masked[i] && xt.ids[i] == specials().mask);
            }
        }
    }

    #[test]
    fn sequential_composition_matches_single_shot_rate() {
        // Run beta_1..beta_t sequentially over many positions; the masked
        // fraction must match 1 - prod(1 - beta_u) within three sigma.
        let schedule = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.25, 0.3]).unwrap();
        let n = 20_000usize;
        let mut xt = plain_seq(n);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 1..=schedule.len() {
            xt = corrupt_step(&xt, schedule.beta(t), &specials(), &mut rng);
        }
        let p = schedule.mask_prob(schedule.len());
        let masked = xt.num_masked() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (masked - mean).abs() < 3.0 * sigma,
            "{masked} vs {mean} +- {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn linear_absorbing_schedule_fully_masks() {
        let schedule = NoiseSchedule::linear_absorbing(16);
        assert!(schedule.is_generation_grade());
        for t in 2..=schedule.len() {
            assert!(schedule.survival(t) <= schedule.survival(t - 1));
        }
        assert!((schedule.survival(8) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sft_batches_never_mask_the_prompt() {
        let v = build_vocab("abcdef", TokenizerMode::Char, 32).unwrap();
        let pair = v.format_sft_pair("abc", "def", 64).unwrap();
        let prompt_len = pair
            .region
            .iter()
            .filter(|&&r| r == Region::Prompt)
            .count();
        for draw in 0..1000u64 {
            let batch = make_training_batch(
                std::slice::from_ref(&pair),
                TrainMode::Sft,
                (0.05, 0.95),
                99,
                draw,
                &v.specials,
            )
            .unwrap();
            let item = &batch.items[0];
            assert!(item.seq.masked[..prompt_len].iter().all(|&m| !m));
            assert!(item.seq.num_masked() >= 1);
        }
    }

    #[test]
    fn empty_response_examples_are_skipped_and_counted() {
        let v = build_vocab("ab", TokenizerMode::Char, 16).unwrap();
        let mut pair = v.format_sft_pair("a", "b", 64).unwrap();
        // Strip the response region entirely.
        pair.truncate(4);
        let batch = make_training_batch(
            &[pair],
            TrainMode::Sft,
            (0.05, 0.95),
            1,
            0,
            &v.specials,
        )
        .unwrap();
        assert!(batch.items.is_empty());
        assert_eq!(batch.skipped, 1);
    }

    #[test]
    fn every_batch_row_has_at_least_one_masked_position() {
        // A tight low range forces the resample path on short sequences.
        let examples: Vec<TokenSequence> = (0..200).map(|_| plain_seq(3)).collect();
        let batch = make_training_batch(
            &examples,
            TrainMode::Pretrain,
            (0.01, 0.05),
            7,
            0,
            &specials(),
        )
        .unwrap();
        assert_eq!(batch.items.len(), 200);
        assert!(batch.items.iter().all(|it| it.seq.num_masked() >= 1));
    }

    #[test]
    fn pretrain_fixed_rate_mirrors_mlm_statistics() {
        let examples = vec![plain_seq(10_000)];
        let batch = make_training_batch(
            &examples,
            TrainMode::Pretrain,
            (0.15, 0.15),
            11,
            0,
            &specials(),
        )
        .unwrap();
        let masked = batch.items[0].seq.num_masked() as f64;
        let mean = 10_000.0 * 0.15;
        let sigma = f64::sqrt(10_000.0 * 0.15 * 0.85);
        assert!((masked - mean).abs() < 3.0 * sigma);
    }

    #[test]
    fn batch_construction_is_stream_deterministic() {
        let examples: Vec<TokenSequence> = (0..8).map(|_| plain_seq(12)).collect();
        let a = make_training_batch(&examples, TrainMode::Pretrain, (0.05, 0.95), 3, 40, &specials())
            .unwrap();
        // Same streams reached through different batch splits.
        let b1 = make_training_batch(&examples[..4], TrainMode::Pretrain, (0.05, 0.95), 3, 40, &specials())
            .unwrap();
        let b2 = make_training_batch(&examples[4..], TrainMode::Pretrain, (0.05, 0.95), 3, 44, &specials())
            .unwrap();
        let joined: Vec<_> = b1.items.iter().chain(b2.items.iter()).collect();
        for (x, y) in a.items.iter().zip(joined) {
            assert_eq!(x.seq, y.seq);
            assert_eq!(x.rate, y.rate);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_v() {
        let v = 23usize;
        let logits = Array2::<f64>::zeros((4, v));
        let targets = vec![1, 2, 3, 4];
        let mask = vec![true, true, false, true];
        let loss = masked_ce_loss(&logits, &targets, &mask).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut logits = Array2::<f64>::zeros((2, 5));
        logits[[0, 3]] = 50.0;
        logits[[1, 1]] = 50.0;
        let loss = masked_ce_loss(&logits, &[3, 1], &[true, true]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn hand_computed_two_position_loss() {
        let logits =
            Array2::<f64>::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let loss = masked_ce_loss(&logits, &[0, 1], &[true, true]).unwrap();
        let e = std::f64::consts::E;
        let expect = (((2.0 + e).ln() - 1.0) + ((2.0 + e * e).ln() - 2.0)) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_unmasked_positions() {
        let mut logits =
            Array2::<f64>::from_shape_vec((2, 3), vec![1.0, 0.5, 0.2, 0.3, 2.0, 0.1]).unwrap();
        let targets = vec![0, 1];
        let mask = vec![true, false];
        let before = masked_ce_loss(&logits, &targets, &mask).unwrap();
        logits[[1, 0]] = -40.0;
        logits[[1, 2]] = 17.0;
        let after = masked_ce_loss(&logits, &targets, &mask).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_masked_positions_is_an_error() {
        let logits = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            masked_ce_loss(&logits, &[0, 1], &[false, false]),
            Err(Error::NoMaskedPositions)
        ));
    }

    #[test]
    fn grad_rows_zero_exactly_at_unmasked_positions() {
        let logits =
            Array2::<f64>::from_shape_vec((2, 3), vec![1.0, 0.5, 0.2, 0.3, 2.0, 0.1]).unwrap();
        let grad = masked_ce_grad_sum(&logits, &[0, 1], &[false, true]);
        assert!(grad.row(0).iter().all(|&g| g == 0.0));
        // Masked row sums to zero (softmax minus one-hot).
        assert!(grad.row(1).sum().abs() < 1e-12);
    }
}
