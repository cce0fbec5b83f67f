//! Low-rank adaptation over a frozen base model.
//!
//! Each targeted weight `W` (stored `[in, out]`) gets a pair `A: [r, in]`,
//! `B: [out, r]` applied as `y = x·W + (alpha/r)·((dropout(x)·Aᵀ)·Bᵀ)`.
//! `B` starts at zero, so the adapted model equals the base at attach time;
//! `merge` folds `(alpha/r)·Aᵀ·Bᵀ` back into `W`.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{c, forward, forward_full, ForwardCache, ModelParameters, Scalar};

/// Suffixes of the base tensors an adapter may target.
pub const ADAPTABLE_SUFFIXES: [&str; 6] = [
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "mlp.w_up",
    "mlp.w_down",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Name patterns matched as substrings against the adaptable weight
    /// tensors. Defaults to all attention and MLP projections.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 8.0,
            dropout: 0.1,
            targets: ADAPTABLE_SUFFIXES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("lora rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "lora dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig("lora targets empty".into()));
        }
        Ok(())
    }
}

/// One adapter pair. `a: [r, in]`, `b: [out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<F> {
    pub a: Array2<F>,
    pub b: Array2<F>,
}

/// Adapter pairs keyed by the base tensor name they modify.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet<F> {
    pub config: LoraConfig,
    pub pairs: IndexMap<String, LoraPair<F>>,
}

impl<F: Scalar> LoraAdapterSet<F> {
    pub fn num_elements(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<F>> {
        if let Some(target) = name.strip_prefix("lora.A.") {
            return self.pairs.get(target).map(|p| &p.a);
        }
        if let Some(target) = name.strip_prefix("lora.B.") {
            return self.pairs.get(target).map(|p| &p.b);
        }
        None
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        if let Some(target) = name.strip_prefix("lora.A.") {
            return self.pairs.get_mut(target).map(|p| &mut p.a);
        }
        if let Some(target) = name.strip_prefix("lora.B.") {
            return self.pairs.get_mut(target).map(|p| &mut p.b);
        }
        None
    }

    /// Visit adapter tensors as `(name, array)`, A before B per target.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<F>)) {
        for (target, pair) in &self.pairs {
            f(&format!("lora.A.{target}"), &pair.a);
            f(&format!("lora.B.{target}"), &pair.b);
        }
    }
}

/// Base parameters plus an attached adapter set.
#[derive(Debug, Clone)]
pub struct AdaptedModel<F> {
    pub base: ModelParameters<F>,
    pub adapters: LoraAdapterSet<F>,
}

/// Resolve target patterns against the adaptable weight names.
fn resolve_targets<F: Scalar>(
    params: &ModelParameters<F>,
    cfg: &LoraConfig,
) -> Result<Vec<String>> {
    let mut adaptable = Vec::new();
    params.for_each_tensor(|name, _| {
        if ADAPTABLE_SUFFIXES.iter().any(|s| name.ends_with(s)) {
            adaptable.push(name.to_string());
        }
    });

    let mut resolved = Vec::new();
    for pattern in &cfg.targets {
        let matched: Vec<&String> = adaptable.iter().filter(|n| n.contains(pattern)).collect();
        if matched.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "lora target pattern '{pattern}' matches no adaptable tensor"
            )));
        }
        for name in matched {
            if !resolved.contains(name) {
                resolved.push(name.clone());
            }
        }
    }
    // Canonical order regardless of pattern order.
    resolved.sort_by_key(|n| adaptable.iter().position(|a| a == n).unwrap());
    Ok(resolved)
}

/// Attach fresh adapters: `A ~ N(0, 1/sqrt(r))`, `B = 0`, base frozen.
pub fn attach<F: Scalar>(
    base: ModelParameters<F>,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<AdaptedModel<F>> {
    cfg.validate()?;
    let targets = resolve_targets(&base, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (cfg.rank as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");

    let mut pairs = IndexMap::new();
    for name in targets {
        let w = base.tensor(&name).expect("resolved name exists");
        let (in_dim, out_dim) = w.dim();
        let mut a = Array2::zeros((cfg.rank, in_dim));
        for v in a.iter_mut() {
            *v = c(normal.sample(&mut rng));
        }
        let b = Array2::zeros((out_dim, cfg.rank));
        pairs.insert(name, LoraPair { a, b });
    }

    Ok(AdaptedModel {
        base,
        adapters: LoraAdapterSet {
            config: cfg.clone(),
            pairs,
        },
    })
}

impl<F: Scalar> AdaptedModel<F> {
    /// Fold every adapter delta into its base weight and drop the adapters.
    pub fn merge(self) -> ModelParameters<F> {
        let AdaptedModel { mut base, adapters } = self;
        let scaling = c::<F>(adapters.config.scaling());
        for (target, pair) in adapters.pairs {
            let w = base.tensor_mut(&target).expect("target exists");
            let delta = pair.a.t().dot(&pair.b.t());
            *w = &*w + &(delta * scaling);
        }
        base
    }

    /// Fraction of elements that train: adapter elements over everything.
    pub fn trainable_fraction(&self) -> f64 {
        let adapter = self.adapters.num_elements() as f64;
        let base = self.base.num_elements() as f64;
        adapter / (base + adapter)
    }

    /// Eval-mode forward through base + adapters.
    pub fn forward(&self, ids: &[usize], pad_id: Option<usize>) -> Result<Array2<F>> {
        forward(&self.base, Some(&self.adapters), ids, pad_id)
    }

    /// Training-mode forward with cache; `dropout_rng` enables adapter
    /// dropout.
    pub fn forward_full(
        &self,
        ids: &[usize],
        pad_id: Option<usize>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<F>, ForwardCache<F>)> {
        forward_full(&self.base, Some(&self.adapters), ids, pad_id, dropout_rng)
    }
}
