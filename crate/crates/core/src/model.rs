//! A small bidirectional transformer encoder with exact, hand-written
//! gradients.
//!
//! Blocks are pre-layernorm with a GELU MLP and learned absolute position
//! embeddings. Attention is full (no causal mask); only padding positions
//! are excluded, via additive masking of their key columns. Mask tokens
//! attend and are attended to like any other token, since predictions are
//! read at exactly those positions.
//!
//! All tensors live in a flat, unique name namespace (`tok_emb`,
//! `layer0.attn.w_q`, ...) so adapters, the optimizer, and checkpoints can
//! address them uniformly. Arithmetic is generic over [`Scalar`]: `f32` for
//! training, `f64` for finite-difference gradient checks.

use std::fmt;

use ndarray::{s, Array1, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapterSet, LoraPair};

/// Element type for all model arithmetic.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` constant into the active scalar type.
pub(crate) fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant representable in scalar type")
}

const LN_EPS: f64 = 1e-5;
const ATTN_MASK_NEG: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub scale: Array2<F>,
    pub shift: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1: LayerNormParams<F>,
    pub w_q: Array2<F>,
    pub b_q: Array2<F>,
    pub w_k: Array2<F>,
    pub b_k: Array2<F>,
    pub w_v: Array2<F>,
    pub b_v: Array2<F>,
    pub w_o: Array2<F>,
    pub b_o: Array2<F>,
    pub ln2: LayerNormParams<F>,
    pub w_up: Array2<F>,
    pub b_up: Array2<F>,
    pub w_down: Array2<F>,
    pub b_down: Array2<F>,
}

/// Named-tensor store for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F> {
    pub config: ModelConfig,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln: LayerNormParams<F>,
    pub head_w: Array2<F>,
    pub head_b: Array2<F>,
}

impl<F: Scalar> ModelParameters<F> {
    /// All-zero parameters with the right shapes (layernorm scales included).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let ln = || LayerNormParams {
            scale: Array2::zeros((1, d)),
            shift: Array2::zeros((1, d)),
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1: ln(),
                w_q: Array2::zeros((d, d)),
                b_q: Array2::zeros((1, d)),
                w_k: Array2::zeros((d, d)),
                b_k: Array2::zeros((1, d)),
                w_v: Array2::zeros((d, d)),
                b_v: Array2::zeros((1, d)),
                w_o: Array2::zeros((d, d)),
                b_o: Array2::zeros((1, d)),
                ln2: ln(),
                w_up: Array2::zeros((d, config.d_ffn)),
                b_up: Array2::zeros((1, config.d_ffn)),
                w_down: Array2::zeros((config.d_ffn, d)),
                b_down: Array2::zeros((1, d)),
            })
            .collect();
        ModelParameters {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_positions, d)),
            layers,
            final_ln: ln(),
            head_w: Array2::zeros((d, config.vocab_size)),
            head_b: Array2::zeros((1, config.vocab_size)),
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(|n, _| names.push(n.to_string()));
        names
    }

    /// Borrow a tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&Array2<F>> {
        self.route(name).map(|r| &*r)
    }

    fn route(&self, name: &str) -> Option<&Array2<F>> {
        match name {
            "tok_emb" => return Some(&self.tok_emb),
            "pos_emb" => return Some(&self.pos_emb),
            "final_ln.scale" => return Some(&self.final_ln.scale),
            "final_ln.shift" => return Some(&self.final_ln.shift),
            "head.w" => return Some(&self.head_w),
            "head.b" => return Some(&self.head_b),
            _ => {}
        }
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let idx: usize = rest[..dot].parse().ok()?;
        let l = self.layers.get(idx)?;
        Some(match &rest[dot + 1..] {
            "ln1.scale" => &l.ln1.scale,
            "ln1.shift" => &l.ln1.shift,
            "attn.w_q" => &l.w_q,
            "attn.b_q" => &l.b_q,
            "attn.w_k" => &l.w_k,
            "attn.b_k" => &l.b_k,
            "attn.w_v" => &l.w_v,
            "attn.b_v" => &l.b_v,
            "attn.w_o" => &l.w_o,
            "attn.b_o" => &l.b_o,
            "ln2.scale" => &l.ln2.scale,
            "ln2.shift" => &l.ln2.shift,
            "mlp.w_up" => &l.w_up,
            "mlp.b_up" => &l.b_up,
            "mlp.w_down" => &l.w_down,
            "mlp.b_down" => &l.b_down,
            _ => return None,
        })
    }

    /// Mutably borrow a tensor by name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        match name {
            "tok_emb" => return Some(&mut self.tok_emb),
            "pos_emb" => return Some(&mut self.pos_emb),
            "final_ln.scale" => return Some(&mut self.final_ln.scale),
            "final_ln.shift" => return Some(&mut self.final_ln.shift),
            "head.w" => return Some(&mut self.head_w),
            "head.b" => return Some(&mut self.head_b),
            _ => {}
        }
        let rest = name.strip_prefix("layer")?;
        let dot = rest.find('.')?;
        let idx: usize = rest[..dot].parse().ok()?;
        let l = self.layers.get_mut(idx)?;
        Some(match &rest[dot + 1..] {
            "ln1.scale" => &mut l.ln1.scale,
            "ln1.shift" => &mut l.ln1.shift,
            "attn.w_q" => &mut l.w_q,
            "attn.b_q" => &mut l.b_q,
            "attn.w_k" => &mut l.w_k,
            "attn.b_k" => &mut l.b_k,
            "attn.w_v" => &mut l.w_v,
            "attn.b_v" => &mut l.b_v,
            "attn.w_o" => &mut l.w_o,
            "attn.b_o" => &mut l.b_o,
            "ln2.scale" => &mut l.ln2.scale,
            "ln2.shift" => &mut l.ln2.shift,
            "mlp.w_up" => &mut l.w_up,
            "mlp.b_up" => &mut l.b_up,
            "mlp.w_down" => &mut l.w_down,
            "mlp.b_down" => &mut l.b_down,
            _ => return None,
        })
    }

    pub fn num_elements(&self) -> usize {
        let mut total = 0;
        self.for_each_tensor(|_, t| total += t.len());
        total
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Convert to another scalar type (used to move checkpoints between the
    /// f32 training path and the f64 gradient-check path).
    pub fn convert<G: Scalar>(&self) -> ModelParameters<G> {
        let mut out = ModelParameters::<G>::zeros(&self.config);
        for name in self.tensor_names() {
            let src = self.tensor(&name).unwrap();
            let dst = out.tensor_mut(&name).unwrap();
            *dst = src.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap());
        }
        out
    }
}

/// Deterministic initialization: scaled normal (std 0.02) for projections
/// and embeddings, layernorm scale 1 / shift 0, biases 0.
pub fn init_parameters<F: Scalar>(config: &ModelConfig) -> Result<ModelParameters<F>> {
    config.validate()?;
    let mut params = ModelParameters::<F>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut fill = |t: &mut Array2<F>| {
        for v in t.iter_mut() {
            *v = c(normal.sample(&mut rng));
        }
    };
    fill(&mut params.tok_emb);
    fill(&mut params.pos_emb);
    for i in 0..config.n_layers {
        let l = &mut params.layers[i];
        fill(&mut l.w_q);
        fill(&mut l.w_k);
        fill(&mut l.w_v);
        fill(&mut l.w_o);
        fill(&mut l.w_up);
        fill(&mut l.w_down);
    }
    fill(&mut params.head_w);
    for i in 0..config.n_layers {
        params.layers[i].ln1.scale.fill(F::one());
        params.layers[i].ln2.scale.fill(F::one());
    }
    params.final_ln.scale.fill(F::one());
    Ok(params)
}

/// Gradients keyed by tensor name. Only trainable tensors get an entry.
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    map: indexmap::IndexMap<String, Array2<F>>,
}

impl<F: Scalar> Default for GradStore<F> {
    fn default() -> Self {
        GradStore {
            map: indexmap::IndexMap::new(),
        }
    }
}

impl<F: Scalar> GradStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_zeros(&mut self, name: &str, shape: (usize, usize)) {
        self.map
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(shape));
    }

    pub fn accumulate(&mut self, name: &str, g: &Array2<F>) {
        match self.map.get_mut(name) {
            Some(existing) => *existing += g,
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, factor: F) {
        for (_, g) in self.map.iter_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Elementwise sum with another store over the union of names.
    pub fn add_store(&mut self, other: &GradStore<F>) {
        for (name, g) in other.iter() {
            self.accumulate(name, g);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Cached adapter activations for one adapted linear.
#[derive(Debug, Clone)]
pub struct AdapterCache<F> {
    /// Adapter-path input after dropout (the raw input in eval mode).
    pub xd: Array2<F>,
    /// `xd · Aᵀ`, shape `[L, r]`.
    pub u: Array2<F>,
    /// Inverted-dropout keep mask (values 0 or 1/(1-p)); `None` in eval mode.
    pub drop: Option<Array2<F>>,
}

pub struct LayerAdapterCache<F> {
    pub q: Option<AdapterCache<F>>,
    pub k: Option<AdapterCache<F>>,
    pub v: Option<AdapterCache<F>>,
    pub o: Option<AdapterCache<F>>,
    pub up: Option<AdapterCache<F>>,
    pub down: Option<AdapterCache<F>>,
}

impl<F> LayerAdapterCache<F> {
    fn empty() -> Self {
        LayerAdapterCache {
            q: None,
            k: None,
            v: None,
            o: None,
            up: None,
            down: None,
        }
    }
}

pub struct LayerForwardCache<F> {
    pub xhat1: Array2<F>,
    pub inv_std1: Array1<F>,
    pub a_in: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub attn: Vec<Array2<F>>,
    pub ctx: Array2<F>,
    pub xhat2: Array2<F>,
    pub inv_std2: Array1<F>,
    pub m_in: Array2<F>,
    pub u_pre: Array2<F>,
    pub g: Array2<F>,
    pub adapters: LayerAdapterCache<F>,
}

/// Activations retained by [`forward_full`] for the exact backward pass.
pub struct ForwardCache<F> {
    pub ids: Vec<usize>,
    pub visible: Vec<bool>,
    pub layers: Vec<LayerForwardCache<F>>,
    pub xhat_f: Array2<F>,
    pub inv_std_f: Array1<F>,
    pub f_in: Array2<F>,
}

fn layernorm_fwd<F: Scalar>(
    x: &Array2<F>,
    ln: &LayerNormParams<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let (l, d) = x.dim();
    let dn = c::<F>(d as f64);
    let eps = c::<F>(LN_EPS);
    let mut xhat = Array2::zeros((l, d));
    let mut inv_std = Array1::zeros(l);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / dn;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
        let inv = F::one() / (var + eps).sqrt();
        inv_std[i] = inv;
        let mut dst = xhat.row_mut(i);
        for (o, &v) in dst.iter_mut().zip(row.iter()) {
            *o = (v - mean) * inv;
        }
    }
    let y = &xhat * &ln.scale + &ln.shift;
    (y, xhat, inv_std)
}

fn layernorm_bwd<F: Scalar>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    inv_std: &Array1<F>,
    ln: &LayerNormParams<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (l, d) = dy.dim();
    let dn = c::<F>(d as f64);
    let dscale = (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dshift = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &ln.scale;
    let mut dx = Array2::zeros((l, d));
    for i in 0..l {
        let dxh = dxhat.row(i);
        let xh = xhat.row(i);
        let m1 = dxh.sum() / dn;
        let m2 = dxh
            .iter()
            .zip(xh.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            / dn;
        let inv = inv_std[i];
        let mut dst = dx.row_mut(i);
        for ((o, &a), &b) in dst.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = inv * (a - m1 - b * m2);
        }
    }
    (dx, dscale, dshift)
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

fn gelu<F: Scalar>(x: F) -> F {
    let c0 = c::<F>(GELU_C0);
    let c1 = c::<F>(GELU_C1);
    let half = c::<F>(0.5);
    let t = (c0 * (x + c1 * x * x * x)).tanh();
    half * x * (F::one() + t)
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c0 = c::<F>(GELU_C0);
    let c1 = c::<F>(GELU_C1);
    let half = c::<F>(0.5);
    let three = c::<F>(3.0);
    let inner = c0 * (x + c1 * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c0 * (F::one() + three * c1 * x * x)
}

/// Numerically stable row softmax, in place.
pub fn softmax_rows_inplace<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of row softmax: `ds = p * (dp - <dp, p>)` per row.
fn softmax_rows_bwd<F: Scalar>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(p.dim());
    for ((mut orow, prow), dprow) in out.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = prow
            .iter()
            .zip(dprow.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &pv), &dv) in orow.iter_mut().zip(prow.iter()).zip(dprow.iter()) {
            *o = pv * (dv - dot);
        }
    }
    out
}

struct AdapterRef<'a, F> {
    pair: &'a LoraPair<F>,
    scaling: F,
    dropout: f64,
}

/// `y = x·W + b`, plus the scaled low-rank path when an adapter is attached.
fn linear_fwd<F: Scalar>(
    x: &Array2<F>,
    w: &Array2<F>,
    b: &Array2<F>,
    adapter: Option<AdapterRef<'_, F>>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> (Array2<F>, Option<AdapterCache<F>>) {
    let mut y = x.dot(w) + b;
    let cache = adapter.map(|ad| {
        let (xd, drop) = match (rng.as_deref_mut(), ad.dropout > 0.0) {
            (Some(r), true) => {
                let keep = 1.0 - ad.dropout;
                let scale = c::<F>(1.0 / keep);
                let mask = Array2::from_shape_fn(x.dim(), |_| {
                    if r.random::<f64>() < keep {
                        scale
                    } else {
                        F::zero()
                    }
                });
                (x * &mask, Some(mask))
            }
            _ => (x.clone(), None),
        };
        let u = xd.dot(&ad.pair.a.t());
        y = &y + &(u.dot(&ad.pair.b.t()) * ad.scaling);
        AdapterCache { xd, u, drop }
    });
    (y, cache)
}

struct LinearGrads<F> {
    dx: Array2<F>,
    dw: Option<Array2<F>>,
    db: Option<Array2<F>>,
    dab: Option<(Array2<F>, Array2<F>)>,
}

fn linear_bwd<F: Scalar>(
    dy: &Array2<F>,
    x: &Array2<F>,
    w: &Array2<F>,
    adapter: Option<(&LoraPair<F>, &AdapterCache<F>, F)>,
    want_base: bool,
) -> LinearGrads<F> {
    let mut dx = dy.dot(&w.t());
    let (dw, db) = if want_base {
        (
            Some(x.t().dot(dy)),
            Some(dy.sum_axis(Axis(0)).insert_axis(Axis(0))),
        )
    } else {
        (None, None)
    };
    let dab = adapter.map(|(pair, cache, scaling)| {
        let ddelta = dy * scaling;
        let db_mat = ddelta.t().dot(&cache.u);
        let du = ddelta.dot(&pair.b);
        let da = du.t().dot(&cache.xd);
        let dxd = du.dot(&pair.a);
        match &cache.drop {
            Some(mask) => dx = &dx + &(&dxd * mask),
            None => dx = &dx + &dxd,
        }
        (da, db_mat)
    });
    LinearGrads { dx, dw, db, dab }
}

fn adapter_for<'a, F: Scalar>(
    adapters: Option<&'a LoraAdapterSet<F>>,
    name: &str,
) -> Option<AdapterRef<'a, F>> {
    adapters.and_then(|set| {
        set.pairs.get(name).map(|pair| AdapterRef {
            pair,
            scaling: c(set.config.scaling()),
            dropout: set.config.dropout,
        })
    })
}

fn validate_inputs<F: Scalar>(params: &ModelParameters<F>, ids: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if ids.len() > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Full forward pass retaining every activation needed by [`backward`].
///
/// `pad_id` positions are excluded from attention (their key columns get a
/// large negative additive mask). `dropout_rng` enables adapter dropout;
/// pass `None` for eval mode.
pub fn forward_full<F: Scalar>(
    params: &ModelParameters<F>,
    adapters: Option<&LoraAdapterSet<F>>,
    ids: &[usize],
    pad_id: Option<usize>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<F>, ForwardCache<F>)> {
    validate_inputs(params, ids)?;
    let cfg = &params.config;
    let (l, d) = (ids.len(), cfg.d_model);
    let visible: Vec<bool> = ids.iter().map(|&id| Some(id) != pad_id).collect();

    let mut h = Array2::zeros((l, d));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = h.row_mut(i);
        row.assign(&params.tok_emb.row(id));
        row += &params.pos_emb.row(i);
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let attn_scale = c::<F>(1.0 / (dh as f64).sqrt());
    let neg = c::<F>(ATTN_MASK_NEG);

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for (li, layer) in params.layers.iter().enumerate() {
        let mut ad_cache = LayerAdapterCache::empty();

        let (a_in, xhat1, inv_std1) = layernorm_fwd(&h, &layer.ln1);
        let prefix = format!("layer{li}");
        let (q, cq) = linear_fwd(
            &a_in,
            &layer.w_q,
            &layer.b_q,
            adapter_for(adapters, &format!("{prefix}.attn.w_q")),
            &mut dropout_rng,
        );
        let (k, ck) = linear_fwd(
            &a_in,
            &layer.w_k,
            &layer.b_k,
            adapter_for(adapters, &format!("{prefix}.attn.w_k")),
            &mut dropout_rng,
        );
        let (v, cv) = linear_fwd(
            &a_in,
            &layer.w_v,
            &layer.b_v,
            adapter_for(adapters, &format!("{prefix}.attn.w_v")),
            &mut dropout_rng,
        );
        ad_cache.q = cq;
        ad_cache.k = ck;
        ad_cache.v = cv;

        let mut ctx = Array2::zeros((l, d));
        let mut attn_heads = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let qs = q.slice(cols);
            let ks = k.slice(cols);
            let vs = v.slice(cols);
            let mut scores = qs.dot(&ks.t());
            scores.mapv_inplace(|x| x * attn_scale);
            for (j, &vis) in visible.iter().enumerate() {
                if !vis {
                    scores.column_mut(j).mapv_inplace(|x| x + neg);
                }
            }
            softmax_rows_inplace(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&vs));
            attn_heads.push(scores);
        }

        let (attn_out, co) = linear_fwd(
            &ctx,
            &layer.w_o,
            &layer.b_o,
            adapter_for(adapters, &format!("{prefix}.attn.w_o")),
            &mut dropout_rng,
        );
        ad_cache.o = co;
        h = &h + &attn_out;

        let (m_in, xhat2, inv_std2) = layernorm_fwd(&h, &layer.ln2);
        let (u_pre, cup) = linear_fwd(
            &m_in,
            &layer.w_up,
            &layer.b_up,
            adapter_for(adapters, &format!("{prefix}.mlp.w_up")),
            &mut dropout_rng,
        );
        ad_cache.up = cup;
        let g = u_pre.mapv(gelu);
        let (down, cdown) = linear_fwd(
            &g,
            &layer.w_down,
            &layer.b_down,
            adapter_for(adapters, &format!("{prefix}.mlp.w_down")),
            &mut dropout_rng,
        );
        ad_cache.down = cdown;
        h = &h + &down;

        layer_caches.push(LayerForwardCache {
            xhat1,
            inv_std1,
            a_in,
            q,
            k,
            v,
            attn: attn_heads,
            ctx,
            xhat2,
            inv_std2,
            m_in,
            u_pre,
            g,
            adapters: ad_cache,
        });
    }

    let (f_in, xhat_f, inv_std_f) = layernorm_fwd(&h, &params.final_ln);
    let logits = f_in.dot(&params.head_w) + &params.head_b;

    Ok((
        logits,
        ForwardCache {
            ids: ids.to_vec(),
            visible,
            layers: layer_caches,
            xhat_f,
            inv_std_f,
            f_in,
        },
    ))
}

/// Eval-mode forward returning logits only.
pub fn forward<F: Scalar>(
    params: &ModelParameters<F>,
    adapters: Option<&LoraAdapterSet<F>>,
    ids: &[usize],
    pad_id: Option<usize>,
) -> Result<Array2<F>> {
    forward_full(params, adapters, ids, pad_id, None).map(|(logits, _)| logits)
}

/// Exact gradients of a scalar loss given `d loss / d logits`.
///
/// When `train_base` is false only adapter tensors (`lora.A.*` / `lora.B.*`)
/// receive entries; frozen base tensors get none. Adapter entries appear
/// whenever adapters are attached.
pub fn backward<F: Scalar>(
    params: &ModelParameters<F>,
    adapters: Option<&LoraAdapterSet<F>>,
    cache: &ForwardCache<F>,
    dlogits: &Array2<F>,
    train_base: bool,
) -> Result<GradStore<F>> {
    let cfg = &params.config;
    let l = cache.ids.len();
    if dlogits.dim() != (l, cfg.vocab_size) {
        return Err(Error::InvalidConfig(format!(
            "dlogits shape {:?} does not match forward pass ({}, {})",
            dlogits.dim(),
            l,
            cfg.vocab_size
        )));
    }

    let mut grads = GradStore::new();
    if train_base {
        params.for_each_grad_slot(|name, shape| grads.insert_zeros(name, shape));
    }
    if let Some(set) = adapters {
        for (target, pair) in set.pairs.iter() {
            grads.insert_zeros(&format!("lora.A.{target}"), pair.a.dim());
            grads.insert_zeros(&format!("lora.B.{target}"), pair.b.dim());
        }
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let attn_scale = c::<F>(1.0 / (dh as f64).sqrt());
    let scaling = adapters.map(|s| c::<F>(s.config.scaling())).unwrap_or_else(F::zero);

    // Head and final layernorm.
    if train_base {
        grads.accumulate("head.w", &cache.f_in.t().dot(dlogits));
        grads.accumulate("head.b", &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
    }
    let df_in = dlogits.dot(&params.head_w.t());
    let (mut dh_run, dscale_f, dshift_f) =
        layernorm_bwd(&df_in, &cache.xhat_f, &cache.inv_std_f, &params.final_ln);
    if train_base {
        grads.accumulate("final_ln.scale", &dscale_f);
        grads.accumulate("final_ln.shift", &dshift_f);
    }

    let apply_linear_bwd = |grads: &mut GradStore<F>,
                                dy: &Array2<F>,
                                x: &Array2<F>,
                                w: &Array2<F>,
                                target: &str,
                                ad: &Option<AdapterCache<F>>|
     -> Array2<F> {
        let adapter = adapters.and_then(|set| {
            set.pairs
                .get(target)
                .map(|pair| (pair, ad.as_ref().expect("adapter cache present"), scaling))
        });
        let out = linear_bwd(dy, x, w, adapter, train_base);
        if let (Some(dw), Some(db)) = (&out.dw, &out.db) {
            let (wn, bn) = weight_bias_names(target);
            grads.accumulate(&wn, dw);
            grads.accumulate(&bn, db);
        }
        if let Some((da, db_mat)) = &out.dab {
            grads.accumulate(&format!("lora.A.{target}"), da);
            grads.accumulate(&format!("lora.B.{target}"), db_mat);
        }
        out.dx
    };

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let prefix = format!("layer{li}");

        // MLP sublayer.
        let ddown = dh_run.clone();
        let dg = apply_linear_bwd(
            &mut grads,
            &ddown,
            &lc.g,
            &layer.w_down,
            &format!("{prefix}.mlp.w_down"),
            &lc.adapters.down,
        );
        let mut du_pre = dg;
        du_pre.zip_mut_with(&lc.u_pre, |dv, &u| *dv *= gelu_grad(u));
        let dm_in = apply_linear_bwd(
            &mut grads,
            &du_pre,
            &lc.m_in,
            &layer.w_up,
            &format!("{prefix}.mlp.w_up"),
            &lc.adapters.up,
        );
        let (dx2, dscale2, dshift2) = layernorm_bwd(&dm_in, &lc.xhat2, &lc.inv_std2, &layer.ln2);
        if train_base {
            grads.accumulate(&format!("{prefix}.ln2.scale"), &dscale2);
            grads.accumulate(&format!("{prefix}.ln2.shift"), &dshift2);
        }
        dh_run = &dh_run + &dx2;

        // Attention sublayer.
        let dattn_out = dh_run.clone();
        let dctx = apply_linear_bwd(
            &mut grads,
            &dattn_out,
            &lc.ctx,
            &layer.w_o,
            &format!("{prefix}.attn.w_o"),
            &lc.adapters.o,
        );

        let mut dq = Array2::zeros((l, cfg.d_model));
        let mut dk = Array2::zeros((l, cfg.d_model));
        let mut dv = Array2::zeros((l, cfg.d_model));
        for hd in 0..n_heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let attn = &lc.attn[hd];
            let v_h = lc.v.slice(cols);
            let q_h = lc.q.slice(cols);
            let k_h = lc.k.slice(cols);

            let dattn = dctx_h.dot(&v_h.t());
            let mut dv_h = dv.slice_mut(cols);
            dv_h += &attn.t().dot(&dctx_h);

            let mut dscores = softmax_rows_bwd(attn, &dattn);
            dscores.mapv_inplace(|x| x * attn_scale);
            let mut dq_h = dq.slice_mut(cols);
            dq_h += &dscores.dot(&k_h);
            let mut dk_h = dk.slice_mut(cols);
            dk_h += &dscores.t().dot(&q_h);
        }

        let da_q = apply_linear_bwd(
            &mut grads,
            &dq,
            &lc.a_in,
            &layer.w_q,
            &format!("{prefix}.attn.w_q"),
            &lc.adapters.q,
        );
        let da_k = apply_linear_bwd(
            &mut grads,
            &dk,
            &lc.a_in,
            &layer.w_k,
            &format!("{prefix}.attn.w_k"),
            &lc.adapters.k,
        );
        let da_v = apply_linear_bwd(
            &mut grads,
            &dv,
            &lc.a_in,
            &layer.w_v,
            &format!("{prefix}.attn.w_v"),
            &lc.adapters.v,
        );
        let da_in = &da_q + &da_k + &da_v;
        let (dx1, dscale1, dshift1) = layernorm_bwd(&da_in, &lc.xhat1, &lc.inv_std1, &layer.ln1);
        if train_base {
            grads.accumulate(&format!("{prefix}.ln1.scale"), &dscale1);
            grads.accumulate(&format!("{prefix}.ln1.shift"), &dshift1);
        }
        dh_run = &dh_run + &dx1;
    }

    if train_base {
        let mut d_tok = Array2::zeros(params.tok_emb.dim());
        let mut d_pos = Array2::zeros(params.pos_emb.dim());
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut trow = d_tok.row_mut(id);
            trow += &dh_run.row(i);
            let mut prow = d_pos.row_mut(i);
            prow += &dh_run.row(i);
        }
        grads.accumulate("tok_emb", &d_tok);
        grads.accumulate("pos_emb", &d_pos);
    }

    Ok(grads)
}

/// `target.with.w_name` -> (weight name, matching bias name).
fn weight_bias_names(target: &str) -> (String, String) {
    let bias = if let Some(pos) = target.rfind(".w_") {
        format!("{}.b_{}", &target[..pos], &target[pos + 3..])
    } else {
        format!("{target}.bias")
    };
    (target.to_string(), bias)
}

impl<F: Scalar> ModelParameters<F> {
    /// Visit `(name, shape)` for every tensor, canonical order.
    pub fn for_each_grad_slot(&self, mut f: impl FnMut(&str, (usize, usize))) {
        self.for_each_tensor(|name, t| f(name, t.dim()));
    }

    /// Visit every tensor as `(name, array)` in canonical order. This is the
    /// one authoritative name list; `tensor`/`tensor_mut` route the same
    /// names.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Array2<F>)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.ln1.scale"), &l.ln1.scale);
            f(&format!("layer{i}.ln1.shift"), &l.ln1.shift);
            f(&format!("layer{i}.attn.w_q"), &l.w_q);
            f(&format!("layer{i}.attn.b_q"), &l.b_q);
            f(&format!("layer{i}.attn.w_k"), &l.w_k);
            f(&format!("layer{i}.attn.b_k"), &l.b_k);
            f(&format!("layer{i}.attn.w_v"), &l.w_v);
            f(&format!("layer{i}.attn.b_v"), &l.b_v);
            f(&format!("layer{i}.attn.w_o"), &l.w_o);
            f(&format!("layer{i}.attn.b_o"), &l.b_o);
            f(&format!("layer{i}.ln2.scale"), &l.ln2.scale);
            f(&format!("layer{i}.ln2.shift"), &l.ln2.shift);
            f(&format!("layer{i}.mlp.w_up"), &l.w_up);
            f(&format!("layer{i}.mlp.b_up"), &l.b_up);
            f(&format!("layer{i}.mlp.w_down"), &l.w_down);
            f(&format!("layer{i}.mlp.b_down"), &l.b_down);
        }
        f("final_ln.scale", &self.final_ln.scale);
        f("final_ln.shift", &self.final_ln.shift);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }
}
