//! Binary checkpoint format.
//!
//! Layout: magic `MDLM`, version `u32` (little-endian), header length
//! `u64`, a UTF-8 text header, then raw little-endian `f32` tensor data in
//! directory order.
//!
//! The header carries the model config, the training config of the run
//! that produced the file (with its resolved warmup), trainer progress,
//! the adapter config when adapters ship with the file, and a `[tensors]`
//! directory of `name dtype rowsxcols offset` lines. Adapter tensors are
//! named `lora.A.<target>` / `lora.B.<target>`; optimizer moments are
//! `opt.m.<name>` / `opt.v.<name>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, LoraAdapterSet, LoraConfig, LoraPair};
use crate::model::{ModelConfig, ModelParameters};
use crate::trainer::{OptimizerState, TrainConfig, TrainPhase, TrainTarget};

pub const MAGIC: &[u8; 4] = b"MDLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainerProgress {
    /// Chunks consumed (resume point).
    pub global_step: u64,
    /// Optimizer updates applied (bias-correction counter).
    pub optimizer_step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub progress: Option<TrainerProgress>,
    pub lora_config: Option<LoraConfig>,
    pub tensors: IndexMap<String, Array2<f32>>,
}

impl Checkpoint {
    /// Package a training target (plus optional optimizer state) for disk.
    pub fn from_target(
        target: &TrainTarget<f32>,
        train_config: Option<&TrainConfig>,
        opt_state: Option<&OptimizerState<f32>>,
        global_step: u64,
    ) -> Checkpoint {
        let mut tensors = IndexMap::new();
        target.params().for_each_tensor(|name, t| {
            tensors.insert(name.to_string(), t.clone());
        });
        let lora_config = target.adapters().map(|set| {
            set.for_each_tensor(|name, t| {
                tensors.insert(name.to_string(), t.clone());
            });
            set.config.clone()
        });
        let progress = opt_state.map(|s| {
            for (name, m) in &s.m {
                tensors.insert(format!("opt.m.{name}"), m.clone());
            }
            for (name, v) in &s.v {
                tensors.insert(format!("opt.v.{name}"), v.clone());
            }
            TrainerProgress {
                global_step,
                optimizer_step: s.step,
            }
        });
        Checkpoint {
            model_config: target.params().config.clone(),
            train_config: train_config.cloned(),
            progress,
            lora_config,
            tensors,
        }
    }

    /// Rebuild the training target and optimizer state.
    pub fn into_parts(
        mut self,
    ) -> Result<(TrainTarget<f32>, OptimizerState<f32>, TrainerProgress)> {
        let mut params = ModelParameters::<f32>::zeros(&self.model_config);
        for name in params.tensor_names() {
            let t = self
                .tensors
                .shift_remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            let slot = params.tensor_mut(&name).unwrap();
            if t.dim() != slot.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.dim(),
                    slot.dim()
                )));
            }
            *slot = t;
        }

        let target = match &self.lora_config {
            Some(cfg) => {
                let mut pairs: IndexMap<String, LoraPair<f32>> = IndexMap::new();
                let adapter_names: Vec<String> = self
                    .tensors
                    .keys()
                    .filter(|k| k.starts_with("lora.A."))
                    .cloned()
                    .collect();
                for a_name in adapter_names {
                    let t = a_name.strip_prefix("lora.A.").unwrap().to_string();
                    let a = self.tensors.shift_remove(&a_name).unwrap();
                    let b = self
                        .tensors
                        .shift_remove(&format!("lora.B.{t}"))
                        .ok_or_else(|| {
                            Error::Checkpoint(format!("missing tensor 'lora.B.{t}'"))
                        })?;
                    pairs.insert(t, LoraPair { a, b });
                }
                if pairs.is_empty() {
                    return Err(Error::Checkpoint(
                        "lora config present but no adapter tensors".into(),
                    ));
                }
                TrainTarget::Lora(AdaptedModel {
                    base: params,
                    adapters: LoraAdapterSet {
                        config: cfg.clone(),
                        pairs,
                    },
                })
            }
            None => TrainTarget::Full(params),
        };

        let mut state = OptimizerState::new();
        state.step = self.progress.map(|p| p.optimizer_step).unwrap_or(0);
        let moment_names: Vec<String> = self.tensors.keys().cloned().collect();
        for name in moment_names {
            if let Some(base) = name.strip_prefix("opt.m.").map(str::to_string) {
                state
                    .m
                    .insert(base, self.tensors.shift_remove(&name).unwrap());
            } else if let Some(base) = name.strip_prefix("opt.v.").map(str::to_string) {
                state
                    .v
                    .insert(base, self.tensors.shift_remove(&name).unwrap());
            }
        }

        Ok((target, state, self.progress.unwrap_or_default()))
    }

    fn render_header(&self) -> String {
        let mut h = String::new();
        let m = &self.model_config;
        h.push_str("[model]\n");
        h.push_str(&format!("n_layers = {}\n", m.n_layers));
        h.push_str(&format!("d_model = {}\n", m.d_model));
        h.push_str(&format!("n_heads = {}\n", m.n_heads));
        h.push_str(&format!("d_ffn = {}\n", m.d_ffn));
        h.push_str(&format!("vocab_size = {}\n", m.vocab_size));
        h.push_str(&format!("max_positions = {}\n", m.max_positions));
        h.push_str(&format!("seed = {}\n", m.seed));

        if let Some(t) = &self.train_config {
            h.push_str("\n[train]\n");
            h.push_str(&format!(
                "phase = {}\n",
                match t.phase {
                    TrainPhase::Cpt => "cpt",
                    TrainPhase::Sft => "sft",
                }
            ));
            h.push_str(&format!("peak_lr = {}\n", t.peak_lr));
            if let Some(w) = t.warmup_steps {
                h.push_str(&format!("warmup_steps = {w}\n"));
            }
            h.push_str(&format!("micro_batch = {}\n", t.micro_batch));
            h.push_str(&format!("grad_accum = {}\n", t.grad_accum));
            h.push_str(&format!("epochs = {}\n", t.epochs));
            h.push_str(&format!("weight_decay = {}\n", t.weight_decay));
            h.push_str(&format!("beta1 = {}\n", t.beta1));
            h.push_str(&format!("beta2 = {}\n", t.beta2));
            h.push_str(&format!("eps = {}\n", t.eps));
            h.push_str(&format!("seed = {}\n", t.seed));
            h.push_str(&format!("checkpoint_every = {}\n", t.checkpoint_every));
            h.push_str(&format!("mask_rate_min = {}\n", t.mask_rate_min));
            h.push_str(&format!("mask_rate_max = {}\n", t.mask_rate_max));
        }

        if let Some(p) = &self.progress {
            h.push_str("\n[state]\n");
            h.push_str(&format!("global_step = {}\n", p.global_step));
            h.push_str(&format!("optimizer_step = {}\n", p.optimizer_step));
        }

        if let Some(l) = &self.lora_config {
            h.push_str("\n[lora]\n");
            h.push_str(&format!("rank = {}\n", l.rank));
            h.push_str(&format!("alpha = {}\n", l.alpha));
            h.push_str(&format!("dropout = {}\n", l.dropout));
            h.push_str(&format!("targets = {}\n", l.targets.join(",")));
        }

        h.push_str("\n[tensors]\n");
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let (r, c) = t.dim();
            h.push_str(&format!("{name} f32 {r}x{c} {offset}\n"));
            offset += (t.len() * 4) as u64;
        }
        h
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = ckpt.render_header();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for t in ckpt.tensors.values() {
        for &v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read magic, version and the raw header text without touching tensor
/// data. `inspect` builds on this.
pub fn read_header(path: &Path) -> Result<(u32, String)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected 'MDLM'",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)
        .map_err(|_| Error::Checkpoint("file too short for version".into()))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header = String::from_utf8(header)
        .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
    Ok((version, header))
}

struct DirEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

fn parse_header(header: &str) -> Result<(Checkpoint, Vec<DirEntry>)> {
    let mut sections: IndexMap<String, IndexMap<String, String>> = IndexMap::new();
    let mut dir = Vec::new();
    let mut current = String::new();
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        if current == "tensors" {
            let mut parts = line.split_whitespace();
            let (name, dtype, shape, offset) = (
                parts.next().ok_or_else(|| bad_dir(line))?,
                parts.next().ok_or_else(|| bad_dir(line))?,
                parts.next().ok_or_else(|| bad_dir(line))?,
                parts.next().ok_or_else(|| bad_dir(line))?,
            );
            if dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has unsupported dtype {dtype}"
                )));
            }
            let (r, c) = shape
                .split_once('x')
                .ok_or_else(|| bad_dir(line))
                .and_then(|(r, c)| {
                    Ok((
                        r.parse().map_err(|_| bad_dir(line))?,
                        c.parse().map_err(|_| bad_dir(line))?,
                    ))
                })?;
            dir.push(DirEntry {
                name: name.to_string(),
                rows: r,
                cols: c,
                offset: offset.parse().map_err(|_| bad_dir(line))?,
            });
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            sections
                .entry(current.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
        }
    }

    let model = sections
        .get("model")
        .ok_or_else(|| Error::Checkpoint("header missing [model] section".into()))?;
    let get = |map: &IndexMap<String, String>, key: &str| -> Result<String> {
        map.get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("header missing key '{key}'")))
    };
    let parse_num = |map: &IndexMap<String, String>, key: &str| -> Result<usize> {
        get(map, key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for '{key}'")))
    };
    let parse_f = |map: &IndexMap<String, String>, key: &str| -> Result<f64> {
        get(map, key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for '{key}'")))
    };

    let model_config = ModelConfig {
        n_layers: parse_num(model, "n_layers")?,
        d_model: parse_num(model, "d_model")?,
        n_heads: parse_num(model, "n_heads")?,
        d_ffn: parse_num(model, "d_ffn")?,
        vocab_size: parse_num(model, "vocab_size")?,
        max_positions: parse_num(model, "max_positions")?,
        seed: parse_num(model, "seed")? as u64,
    };

    let train_config = match sections.get("train") {
        Some(t) => Some(TrainConfig {
            phase: match get(t, "phase")?.as_str() {
                "cpt" => TrainPhase::Cpt,
                "sft" => TrainPhase::Sft,
                other => {
                    return Err(Error::Checkpoint(format!("unknown phase '{other}'")));
                }
            },
            peak_lr: parse_f(t, "peak_lr")?,
            warmup_steps: t
                .get("warmup_steps")
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Checkpoint("bad warmup_steps".into()))
                })
                .transpose()?,
            micro_batch: parse_num(t, "micro_batch")?,
            grad_accum: parse_num(t, "grad_accum")?,
            epochs: parse_num(t, "epochs")?,
            weight_decay: parse_f(t, "weight_decay")?,
            beta1: parse_f(t, "beta1")?,
            beta2: parse_f(t, "beta2")?,
            eps: parse_f(t, "eps")?,
            seed: parse_num(t, "seed")? as u64,
            checkpoint_every: parse_num(t, "checkpoint_every")?,
            mask_rate_min: parse_f(t, "mask_rate_min")?,
            mask_rate_max: parse_f(t, "mask_rate_max")?,
        }),
        None => None,
    };

    let progress = match sections.get("state") {
        Some(s) => Some(TrainerProgress {
            global_step: parse_num(s, "global_step")? as u64,
            optimizer_step: parse_num(s, "optimizer_step")? as u64,
        }),
        None => None,
    };

    let lora_config = match sections.get("lora") {
        Some(l) => Some(LoraConfig {
            rank: parse_num(l, "rank")?,
            alpha: parse_f(l, "alpha")?,
            dropout: parse_f(l, "dropout")?,
            targets: get(l, "targets")?
                .split(',')
                .map(|s| s.to_string())
                .collect(),
        }),
        None => None,
    };

    Ok((
        Checkpoint {
            model_config,
            train_config,
            progress,
            lora_config,
            tensors: IndexMap::new(),
        },
        dir,
    ))
}

fn bad_dir(line: &str) -> Error {
    Error::Checkpoint(format!("malformed tensor directory line '{line}'"))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (_, header) = read_header(path)?;
    let (mut ckpt, dir) = parse_header(&header)?;

    let mut r = BufReader::new(File::open(path)?);
    let data_start = 4 + 4 + 8 + header.len() as u64;
    std::io::copy(&mut (&mut r).take(data_start), &mut std::io::sink())?;

    let mut pos = 0u64;
    for entry in dir {
        if entry.offset != pos {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' directory offset {} does not match data position {pos}",
                entry.name, entry.offset
            )));
        }
        let n = entry.rows * entry.cols;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::Checkpoint(format!("truncated tensor data for '{}'", entry.name))
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Array2::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", entry.name)))?;
        ckpt.tensors.insert(entry.name, t);
        pos += (n * 4) as u64;
    }
    Ok(ckpt)
}
