//! Word tokenizer over the closed prompt grammar and a small text encoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::prompt::PromptTemplate;
use crate::rng::RngStream;
use crate::tensor::ops::KeyMask;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// `<pad>`, `<unk>`, then every word `template` can emit.
    pub fn from_template(template: &PromptTemplate) -> Self {
        let mut words = vec!["<pad>".to_owned(), "<unk>".to_owned()];
        words.extend(template.words());
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Lowercase whitespace split, truncated or padded to `max_len`.
    pub fn tokenize(&self, prompt: &str, max_len: usize) -> Tokens {
        let mut ids: Vec<usize> = prompt.to_lowercase().split_whitespace().take(max_len).map(|w| self.id(w)).collect();
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| i < real).collect();
        Tokens { ids, mask }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Tokens {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn unknown_count(&self) -> usize {
        self.ids.iter().zip(&self.mask).filter(|(&id, &m)| m && id == UNK_ID).count()
    }
}

/// A batch of encoded prompts: `seq` is `[n, len, d_text]`.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub seq: Tensor,
    pub mask: KeyMask,
}

impl Conditioning {
    pub fn batch(&self) -> usize {
        self.seq.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.seq.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.seq.shape()[2]
    }

    /// Rows picked by index (repeats allowed), detached from any graph.
    pub fn gather(&self, rows: &[usize]) -> Result<Conditioning> {
        let (l, d) = (self.len(), self.dim());
        if rows.is_empty() || rows.iter().any(|&r| r >= self.batch()) {
            return Err(Error::invalid("conditioning row out of range"));
        }
        let mut data = Vec::with_capacity(rows.len() * l * d);
        let mut valid = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            data.extend_from_slice(&self.seq.data()[r * l * d..(r + 1) * l * d]);
            valid.extend_from_slice(&self.mask.valid[r * l..(r + 1) * l]);
        }
        Ok(Conditioning { seq: Tensor::new(&[rows.len(), l, d], data)?, mask: KeyMask::new(rows.len(), l, valid)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub d_text: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { d_text: 64, heads: 4, max_len: 16 }
    }
}

/// Sinusoidal position table, `[len, dim]`.
pub fn positional_table(len: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            out[p * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() } as f32;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab: Vocabulary,
    token_table: String,
    pad_vector: String,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, config: TextConfig, vocab: Vocabulary, rng: &mut RngStream) -> Result<Self> {
        let d = config.d_text;
        if d == 0 || config.heads == 0 || !d.is_multiple_of(config.heads) || config.max_len == 0 {
            return Err(Error::Config(format!("invalid text encoder dimensions {config:?}")));
        }
        let token_table = "text.token_embedding".to_owned();
        let mut sub = rng.substream(&token_table);
        store.insert(token_table.clone(), Tensor::randn(&[vocab.len(), d], 1.0, &mut sub));
        let pad_vector = "text.pad".to_owned();
        store.insert(pad_vector.clone(), Tensor::zeros(&[d]));
        let q = Linear::new(store, "text.attn.w_q", d, d, false, rng);
        let k = Linear::new(store, "text.attn.w_k", d, d, false, rng);
        let v = Linear::new(store, "text.attn.w_v", d, d, false, rng);
        let o = Linear::new(store, "text.attn.w_o", d, d, false, rng);
        Ok(Self { config, vocab, token_table, pad_vector, q, k, v, o })
    }

    pub fn tokenize(&self, prompt: &str) -> Tokens {
        self.vocab.tokenize(prompt, self.config.max_len)
    }

    /// Token plus position embeddings, `[n*len, d_text]`, before attention.
    pub fn embed(&self, store: &ParamStore, batch: &[Tokens]) -> Result<Tensor> {
        let len = batch.first().map(|t| t.ids.len()).ok_or_else(|| Error::invalid("empty prompt batch"))?;
        if batch.iter().any(|t| t.ids.len() != len || t.mask.len() != len) {
            return Err(Error::invalid("token sequences differ in length"));
        }
        let ids: Vec<usize> = batch.iter().flat_map(|t| t.ids.iter().copied()).collect();
        let tok = store.get(&self.token_table)?.embedding(&ids)?;
        let d = self.config.d_text;
        let pos = positional_table(len, d);
        let pos: Vec<f32> = (0..batch.len()).flat_map(|_| pos.iter().copied()).collect();
        tok.add(&Tensor::new(&[batch.len() * len, d], pos)?)
    }

    /// Conditioning sequence for a batch of tokenized prompts.
    pub fn encode(&self, store: &ParamStore, batch: &[Tokens]) -> Result<Conditioning> {
        if let Some(t) = batch.iter().find(|t| !t.mask.iter().any(|&m| m)) {
            return Err(Error::invalid(format!("prompt has no tokens: {:?}", t.ids)));
        }
        let e = self.embed(store, batch)?;
        let (n, len, d) = (batch.len(), batch[0].ids.len(), self.config.d_text);
        let mask = KeyMask::new(n, len, batch.iter().flat_map(|t| t.mask.iter().copied()).collect())?;
        let q = self.q.forward(store, &e)?;
        let k = self.k.forward(store, &e)?;
        let v = self.v.forward(store, &e)?;
        let a = attention::multi_head(&q, &k, &v, n, self.config.heads, &mask)?;
        let h = e.add(&self.o.forward(store, &a)?)?;
        let keep: Vec<bool> = mask.valid.clone();
        let seq = h.fill_rows(&keep, store.get(&self.pad_vector)?)?.reshape(&[n, len, d])?;
        Ok(Conditioning { seq, mask })
    }

    pub fn encode_prompts(&self, store: &ParamStore, prompts: &[String]) -> Result<Conditioning> {
        if prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::invalid("empty prompt"));
        }
        let toks: Vec<Tokens> = prompts.iter().map(|p| self.tokenize(p)).collect();
        self.encode(store, &toks)
    }
}
