//! Blockwise denoising sampler.
//!
//! Generation appends a fully-masked region after the prompt, splits it
//! into fixed-length blocks, and fills blocks strictly left to right. Each
//! denoising step runs a full forward pass, reads logits at the still-
//! masked positions of the current block, applies repetition penalty,
//! temperature and (optionally) classifier-free guidance, picks a
//! candidate per position, then finalizes only the step's quota of
//! highest-confidence positions; the rest stay masked for later steps.
//! Later blocks remain fully masked while earlier ones resolve, but they
//! still participate in attention through the mask embedding.

use std::collections::HashSet;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapterSet;
use crate::model::{c, forward, ModelParameters, Scalar};
use crate::vocab::{Region, Specials, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemaskStrategy {
    /// Finalize the highest-confidence candidates, remask the rest.
    LowConf,
    /// Finalize a uniformly random subset.
    Random,
}

impl std::str::FromStr for RemaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_conf" => Ok(RemaskStrategy::LowConf),
            "random" => Ok(RemaskStrategy::Random),
            other => Err(Error::InvalidConfig(format!(
                "unknown remask strategy '{other}' (expected low_conf|random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub steps: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub block_len: usize,
    pub rep_penalty: f64,
    pub remask: RemaskStrategy,
    pub stochastic: bool,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            steps: 64,
            max_new_tokens: 64,
            temperature: 0.1,
            block_len: 32,
            rep_penalty: 1.2,
            remask: RemaskStrategy::LowConf,
            stochastic: false,
            cfg_scale: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Generated region rounded up to a whole number of blocks.
    pub fn padded_new_tokens(&self) -> usize {
        self.max_new_tokens.div_ceil(self.block_len) * self.block_len
    }

    pub fn num_blocks(&self) -> usize {
        self.padded_new_tokens() / self.block_len
    }

    pub fn steps_per_block(&self) -> usize {
        self.steps / self.num_blocks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 || self.block_len == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "steps, max_new_tokens and block_len must be positive".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if self.rep_penalty < 1.0 {
            return Err(Error::InvalidConfig("rep_penalty must be >= 1".into()));
        }
        if self.cfg_scale < 0.0 {
            return Err(Error::InvalidConfig("cfg_scale must be >= 0".into()));
        }
        if self.steps % self.num_blocks() != 0 {
            return Err(Error::InvalidConfig(format!(
                "steps {} not divisible by the {} blocks",
                self.steps,
                self.num_blocks()
            )));
        }
        Ok(())
    }
}

/// CTRL-style repetition penalty: for every token id in the context,
/// positive logits divide by the penalty and non-positive ones multiply.
pub fn apply_repetition_penalty<F: Scalar>(
    logits: &mut Array1<F>,
    context: &HashSet<usize>,
    penalty: f64,
) {
    if penalty == 1.0 {
        return;
    }
    let p = c::<F>(penalty);
    for &id in context {
        if id < logits.len() {
            let l = logits[id];
            logits[id] = if l > F::zero() { l / p } else { l * p };
        }
    }
}

/// Classifier-free guidance combination `(1+w)*cond - w*uncond`. At `w = 0`
/// the conditional logits pass through bitwise.
pub fn apply_cfg<F: Scalar>(cond: &Array1<F>, uncond: &Array1<F>, w: f64) -> Array1<F> {
    if w == 0.0 {
        return cond.clone();
    }
    let wp = c::<F>(1.0 + w);
    let wn = c::<F>(w);
    cond * wp - &(uncond * wn)
}

/// Pick the `k` positions to finalize this step. Low-confidence remasking
/// keeps the `k` highest-confidence candidates (ties to the lower position
/// index); random remasking keeps a uniform subset.
pub fn confidence_select<F: Scalar>(
    confidences: &[(usize, F)],
    k: usize,
    strategy: RemaskStrategy,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    debug_assert!(k <= confidences.len());
    match strategy {
        RemaskStrategy::LowConf => {
            let mut ranked: Vec<&(usize, F)> = confidences.iter().collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut chosen: Vec<usize> = ranked[..k].iter().map(|(pos, _)| *pos).collect();
            chosen.sort_unstable();
            chosen
        }
        RemaskStrategy::Random => {
            let mut chosen: Vec<usize> = rand::seq::index::sample(rng, confidences.len(), k)
                .into_iter()
                .map(|i| confidences[i].0)
                .collect();
            chosen.sort_unstable();
            chosen
        }
    }
}

fn softmax_row<F: Scalar>(row: &Array1<F>) -> Array1<F> {
    let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut out = row.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

fn sample_categorical<F: Scalar>(probs: &Array1<F>, rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p.to_f64().unwrap();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax<F: Scalar>(probs: &Array1<F>) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Run the reverse process over `cfg.max_new_tokens` positions appended to
/// `prompt`. The output contains no mask token and leaves the prompt
/// untouched; `trace` (when given) observes the sequence after every
/// denoising step.
pub fn generate<F: Scalar>(
    params: &ModelParameters<F>,
    adapters: Option<&LoraAdapterSet<F>>,
    prompt: &TokenSequence,
    cfg: &GeneratorConfig,
    specials: &Specials,
    mut trace: Option<&mut dyn FnMut(&TokenSequence)>,
) -> Result<TokenSequence> {
    cfg.validate()?;
    if prompt.contains_id(specials.mask) {
        return Err(Error::MaskInInput);
    }
    let prompt_len = prompt.len();
    let padded = cfg.padded_new_tokens();
    let total_len = prompt_len + padded;
    if total_len > params.config.max_positions {
        return Err(Error::SequenceTooLong {
            len: total_len,
            max: params.config.max_positions,
        });
    }

    let gen_region = if prompt.region.contains(&Region::Prompt) {
        Region::Response
    } else {
        Region::Plain
    };
    let mut seq = prompt.clone();
    seq.ids.extend(std::iter::repeat_n(specials.mask, padded));
    seq.masked.extend(std::iter::repeat_n(true, padded));
    seq.region.extend(std::iter::repeat_n(gen_region, padded));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spb = cfg.steps_per_block();
    let temp = c::<F>(cfg.temperature);

    for block in 0..cfg.num_blocks() {
        let block_start = prompt_len + block * cfg.block_len;
        let block_end = block_start + cfg.block_len;
        for step in 0..spb {
            let logits = forward(params, adapters, &seq.ids, Some(specials.pad))?;
            let uncond_logits = if cfg.cfg_scale > 0.0 {
                let mut uncond_ids = seq.ids.clone();
                for id in uncond_ids.iter_mut().take(prompt_len) {
                    *id = specials.mask;
                }
                Some(forward(params, adapters, &uncond_ids, Some(specials.pad))?)
            } else {
                None
            };

            let context: HashSet<usize> = seq
                .ids
                .iter()
                .zip(&seq.masked)
                .filter(|(_, &m)| !m)
                .map(|(&id, _)| id)
                .collect();

            let masked_pos: Vec<usize> = (block_start..block_end)
                .filter(|&i| seq.masked[i])
                .collect();
            // Even spread of the block's quota over its steps.
            let quota = cfg.block_len * (step + 1) / spb - cfg.block_len * step / spb;
            if quota == 0 {
                if let Some(t) = trace.as_mut() {
                    t(&seq);
                }
                continue;
            }

            let mut candidates = Vec::with_capacity(masked_pos.len());
            let mut confidences: Vec<(usize, F)> = Vec::with_capacity(masked_pos.len());
            for &pos in &masked_pos {
                let mut row = logits.row(pos).to_owned();
                apply_repetition_penalty(&mut row, &context, cfg.rep_penalty);
                row.mapv_inplace(|v| v / temp);
                let mut row = match &uncond_logits {
                    Some(u) => {
                        let mut urow = u.row(pos).to_owned();
                        apply_repetition_penalty(&mut urow, &context, cfg.rep_penalty);
                        urow.mapv_inplace(|v| v / temp);
                        apply_cfg(&row, &urow, cfg.cfg_scale)
                    }
                    None => row,
                };
                // The absorbing state and padding are never valid output.
                row[specials.mask] = c(f64::from(f32::MIN));
                row[specials.pad] = c(f64::from(f32::MIN));
                let probs = softmax_row(&row);
                let token = if cfg.stochastic {
                    sample_categorical(&probs, &mut rng)
                } else {
                    argmax(&probs)
                };
                candidates.push((pos, token));
                confidences.push((pos, probs[token]));
            }

            let chosen = confidence_select(&confidences, quota, cfg.remask, &mut rng);
            for &pos in &chosen {
                let (_, token) = candidates.iter().find(|(p, _)| *p == pos).unwrap();
                seq.ids[pos] = *token;
                seq.masked[pos] = false;
            }
            if let Some(t) = trace.as_mut() {
                t(&seq);
            }
        }
        debug_assert!((block_start..block_end).all(|i| !seq.masked[i]));
    }

    seq.truncate(prompt_len + cfg.max_new_tokens);
    debug_assert!(!seq.contains_id(specials.mask));
    Ok(seq)
}

/// Render one trace row: token strings with `_` standing in for the mask.
pub fn render_trace_row(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    let parts: Vec<String> = seq
        .ids
        .iter()
        .zip(&seq.masked)
        .map(|(&id, &m)| {
            if m {
                "_".to_string()
            } else {
                vocab.token(id).unwrap_or("?").to_string()
            }
        })
        .collect();
    match vocab.mode {
        crate::vocab::TokenizerMode::Char => parts.concat(),
        crate::vocab::TokenizerMode::Word => parts.join(" "),
    }
}

/// Decode the generated region, truncating at the first end-of-sequence
/// token.
pub fn decode_generated(vocab: &Vocabulary, seq: &TokenSequence, prompt_len: usize) -> String {
    let gen = &seq.ids[prompt_len.min(seq.len())..];
    let cut = gen
        .iter()
        .position(|&id| id == vocab.specials.eos)
        .unwrap_or(gen.len());
    let trimmed = TokenSequence::plain(gen[..cut].to_vec());
    vocab.decode(&trimmed)
}
