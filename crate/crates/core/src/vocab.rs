//! Tokenization and vocabulary management.
//!
//! A [`Vocabulary`] assigns contiguous ids `0..V`, with the first
//! [`NUM_SPECIALS`] ids reserved: the absorbing `<mask>` state, padding,
//! sequence markers, `<unk>`, and the three instruction-scaffold markers
//! used by SFT formatting. Raw text never encodes to a special id;
//! out-of-vocabulary symbols fall back to `<unk>`.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Count of reserved ids at the bottom of every vocabulary.
pub const NUM_SPECIALS: usize = 8;

/// Token strings for the reserved ids, in id order.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = [
    "<mask>", "<pad>", "<bos>", "<eos>", "<unk>", "<instr>", "</instr>", "<resp>",
];

/// Reserved token ids. Fixed for every vocabulary built by this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub mask: usize,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub unk: usize,
    pub instr_open: usize,
    pub instr_close: usize,
    pub resp_open: usize,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            mask: 0,
            pad: 1,
            bos: 2,
            eos: 3,
            unk: 4,
            instr_open: 5,
            instr_close: 6,
            resp_open: 7,
        }
    }
}

impl Specials {
    pub fn all(&self) -> [usize; NUM_SPECIALS] {
        [
            self.mask,
            self.pad,
            self.bos,
            self.eos,
            self.unk,
            self.instr_open,
            self.instr_close,
            self.resp_open,
        ]
    }

    pub fn contains(&self, id: usize) -> bool {
        self.all().contains(&id)
    }
}

/// Tokenization granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// One token per Unicode scalar value (default; round-trips exactly).
    Char,
    /// Whitespace-separated words.
    Word,
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerMode::Char => write!(f, "char"),
            TokenizerMode::Word => write!(f, "word"),
        }
    }
}

impl std::str::FromStr for TokenizerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizerMode::Char),
            "word" => Ok(TokenizerMode::Word),
            other => Err(Error::InvalidConfig(format!(
                "unknown tokenizer mode '{other}' (expected char|word)"
            ))),
        }
    }
}

/// Per-position role label within a [`TokenSequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Prompt,
    Response,
    Plain,
}

/// Token ids with a per-position mask indicator and region label.
///
/// Invariant: the three vectors share one length, and `masked[i]` implies
/// `ids[i]` is the mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub masked: Vec<bool>,
    pub region: Vec<Region>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, masked: Vec<bool>, region: Vec<Region>) -> Self {
        assert_eq!(ids.len(), masked.len());
        assert_eq!(ids.len(), region.len());
        TokenSequence { ids, masked, region }
    }

    /// All positions plain and unmasked.
    pub fn plain(ids: Vec<usize>) -> Self {
        let n = ids.len();
        TokenSequence {
            ids,
            masked: vec![false; n],
            region: vec![Region::Plain; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn contains_id(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    /// Truncate in place to at most `max_len` positions.
    pub fn truncate(&mut self, max_len: usize) {
        self.ids.truncate(max_len);
        self.masked.truncate(max_len);
        self.region.truncate(max_len);
    }
}

/// Token <-> id bijection with reserved specials.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
    pub mode: TokenizerMode,
    pub specials: Specials,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the specials
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    /// Split raw text into symbol strings under the active mode.
    fn symbols(mode: TokenizerMode, text: &str) -> Vec<String> {
        match mode {
            TokenizerMode::Char => text.chars().map(|c| c.to_string()).collect(),
            TokenizerMode::Word => text.split_whitespace().map(|w| w.to_string()).collect(),
        }
    }

    /// Encode raw text. Every position is `Region::Plain` and unmasked;
    /// out-of-vocabulary symbols (and symbols spelled like a special token)
    /// map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = Self::symbols(self.mode, text)
            .iter()
            .map(|sym| match self.id_of.get(sym) {
                Some(&id) if !self.specials.contains(id) => id,
                _ => self.specials.unk,
            })
            .collect();
        TokenSequence::plain(ids)
    }

    /// Decode a sequence back to text. Char mode concatenates token strings;
    /// word mode joins them with single spaces.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        let parts: Vec<&str> = seq
            .ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[4]))
            .collect();
        match self.mode {
            TokenizerMode::Char => parts.concat(),
            TokenizerMode::Word => parts.join(" "),
        }
    }

    /// Lay out an instruction/response pair:
    /// `<instr> instruction </instr> <resp>` (all `Prompt`) followed by
    /// `response <eos>` (all `Response`), truncated to `max_len` with the
    /// terminal `<eos>` always retained.
    pub fn format_sft_pair(
        &self,
        instruction: &str,
        response: &str,
        max_len: usize,
    ) -> Result<TokenSequence> {
        let s = self.specials;
        let instr_ids = self.encode(instruction).ids;
        let scaffold_len = instr_ids.len() + 3; // <instr> ... </instr> <resp>
        if scaffold_len + 1 > max_len {
            return Err(Error::InstructionTooLong {
                needed: scaffold_len + 1,
                max_len,
            });
        }

        let mut ids = Vec::with_capacity(max_len);
        ids.push(s.instr_open);
        ids.extend_from_slice(&instr_ids);
        ids.push(s.instr_close);
        ids.push(s.resp_open);
        let prompt_len = ids.len();

        let mut resp_ids = self.encode(response).ids;
        let room = max_len - prompt_len - 1; // reserve the terminal <eos>
        resp_ids.truncate(room);
        ids.extend_from_slice(&resp_ids);
        ids.push(s.eos);

        let n = ids.len();
        let mut region = vec![Region::Prompt; n];
        for r in region.iter_mut().skip(prompt_len) {
            *r = Region::Response;
        }
        Ok(TokenSequence::new(ids, vec![false; n], region))
    }

    /// The prompt half of an SFT layout: `<instr> instruction </instr>
    /// <resp>`, all labeled `Prompt`. Generation fills the response region
    /// after it.
    pub fn format_sft_prompt(&self, instruction: &str) -> TokenSequence {
        let s = self.specials;
        let mut ids = vec![s.instr_open];
        ids.extend(self.encode(instruction).ids);
        ids.push(s.instr_close);
        ids.push(s.resp_open);
        let n = ids.len();
        TokenSequence::new(ids, vec![false; n], vec![Region::Prompt; n])
    }

    /// Render as the on-disk vocabulary file: a short header, then one token
    /// per line in id order.
    pub fn render(&self) -> String {
        let s = self.specials;
        let mut out = String::new();
        out.push_str("mdlm-vocab v1\n");
        out.push_str(&format!("mode {}\n", self.mode));
        out.push_str(&format!(
            "specials mask={} pad={} bos={} eos={} unk={} instr_open={} instr_close={} resp_open={}\n",
            s.mask, s.pad, s.bos, s.eos, s.unk, s.instr_open, s.instr_close, s.resp_open
        ));
        out.push_str(&format!("tokens {}\n", self.tokens.len()));
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Vocabulary> {
        let bad = |msg: &str| Error::InvalidConfig(format!("vocabulary file: {msg}"));
        let mut lines = text.split('\n');
        if lines.next() != Some("mdlm-vocab v1") {
            return Err(bad("missing 'mdlm-vocab v1' header"));
        }
        let mode: TokenizerMode = lines
            .next()
            .and_then(|l| l.strip_prefix("mode "))
            .ok_or_else(|| bad("missing mode line"))?
            .parse()?;
        let _specials_line = lines.next().ok_or_else(|| bad("missing specials line"))?;
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("tokens "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing token count line"))?;
        let tokens: Vec<String> = lines.take(count).map(|l| l.to_string()).collect();
        if tokens.len() != count {
            return Err(bad("token list shorter than declared count"));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(|t| t.as_str()) != Some(*expected) {
                return Err(bad(&format!("special token {i} should be {expected}")));
            }
        }
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            tokens,
            id_of,
            mode,
            specials: Specials::default(),
        })
    }
}

/// Build a vocabulary from raw corpus text: the reserved specials plus the
/// most frequent symbols, capped at `max_size` ids total. Ties break by
/// first occurrence, so identical input yields an identical vocabulary.
pub fn build_vocab(corpus: &str, mode: TokenizerMode, max_size: usize) -> Result<Vocabulary> {
    if max_size <= NUM_SPECIALS {
        return Err(Error::VocabTooSmall {
            max_size,
            specials: NUM_SPECIALS,
        });
    }

    let mut counts: IndexMap<String, u64> = IndexMap::new();
    for line in corpus.lines() {
        for sym in Vocabulary::symbols(mode, line) {
            if SPECIAL_TOKENS.contains(&sym.as_str()) {
                continue; // raw text never claims a reserved spelling
            }
            *counts.entry(sym).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut ranked: Vec<(usize, String, u64)> = counts
        .into_iter()
        .enumerate()
        .map(|(i, (sym, c))| (i, sym, c))
        .collect();
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size - NUM_SPECIALS)
            .map(|(_, sym, _)| sym),
    );

    let id_of = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary {
        tokens,
        id_of,
        mode,
        specials: Specials::default(),
    })
}
