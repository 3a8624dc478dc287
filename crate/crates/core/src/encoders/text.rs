//! Causal transformer text encoder pooled at the end token.

use clim_tensor::{Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{LayerNorm, Linear, ResAttnBlock};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            max_len: 12,
            depth: 2,
            width: 64,
            heads: 4,
            embed_dim: 32,
            mlp_ratio: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_len < 2 {
            return Err(Error::Config("text vocabulary and max_len must be positive".into()));
        }
        if self.depth == 0 || self.heads == 0 || self.width % self.heads != 0 || self.width < 2 {
            return Err(Error::Config(format!(
                "text width {} with {} heads and depth {} is invalid",
                self.width, self.heads, self.depth
            )));
        }
        if self.embed_dim < 2 || self.mlp_ratio == 0 {
            return Err(Error::Config("text embed_dim must be at least 2".into()));
        }
        Ok(())
    }
}

pub struct TextOutput<'t, T: Real> {
    /// Unit-norm caption embeddings `[n, embed_dim]`.
    pub pooled: Var<'t, T>,
    /// Projected (unnormalized) output of every position, `[n·max_len, embed_dim]`.
    pub tokens: Var<'t, T>,
    /// Position of the end token in each sequence.
    pub end_positions: Vec<usize>,
}

impl<'t, T: Real> TextOutput<'t, T> {
    /// Unit-norm embeddings of the word positions (between the start and end
    /// tokens) of sequence `i`.
    pub fn words(&self, i: usize, max_len: usize) -> Result<Var<'t, T>> {
        let end = self.end_positions[i];
        if end < 2 {
            return Err(Error::Loss(format!("sequence {i} has no words")));
        }
        let ids: Vec<usize> = (i * max_len + 1..i * max_len + end).collect();
        Ok(self.tokens.gather_rows(&ids)?.l2_normalize()?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub token_embedding: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<ResAttnBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(config: TextConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let token_embedding = store.randn("text.token_embedding", [config.vocab_size, d], 0.02, rng);
        let positional = store.randn("text.positional", [config.max_len, d], 0.01, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                ResAttnBlock::new(
                    store,
                    &format!("text.blocks.{i}"),
                    d,
                    config.heads,
                    config.mlp_ratio,
                    config.depth,
                    rng,
                )
            })
            .collect();
        let ln_final = LayerNorm::new(store, "text.ln_final", d);
        let proj = Linear::new(
            store,
            "text.proj",
            d,
            config.embed_dim,
            (d as f64).powf(-0.5),
            false,
            rng,
        );
        Ok(Self {
            config,
            token_embedding,
            positional,
            blocks,
            ln_final,
            proj,
        })
    }

    fn causal_mask<T: Real>(&self) -> Tensor<T> {
        let l = self.config.max_len;
        let mut mask = Tensor::zeros([l, l]);
        for i in 0..l {
            for j in i + 1..l {
                mask.data_mut()[i * l + j] = T::neg_infinity();
            }
        }
        mask
    }

    /// Encodes padded token sequences of exactly `max_len` ids, each
    /// containing `end_token`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        seqs: &[Vec<usize>],
        end_token: usize,
    ) -> Result<TextOutput<'t, T>> {
        let (l, vocab) = (self.config.max_len, self.config.vocab_size);
        if seqs.is_empty() {
            return Err(Error::Config("text forward on an empty batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * l);
        let mut end_positions = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() != l {
                return Err(Error::Config(format!(
                    "token sequence of length {} (expected {l})",
                    s.len()
                )));
            }
            if let Some(&id) = s.iter().find(|&&id| id >= vocab) {
                return Err(Error::UnknownToken { id, vocab });
            }
            let end = s
                .iter()
                .position(|&id| id == end_token)
                .ok_or_else(|| Error::Config("token sequence has no end token".into()))?;
            end_positions.push(end);
            ids.extend_from_slice(s);
        }
        let n = seqs.len();
        let tok = p[self.token_embedding].gather_rows(&ids)?;
        let pos = if n == 1 {
            p[self.positional]
        } else {
            Var::concat(&vec![p[self.positional]; n], 0)?
        };
        let mut x = tok.add(pos)?;
        let mask = self.causal_mask();
        for block in &self.blocks {
            x = block.forward(p, x, n, l, Some(&mask))?;
        }
        let tokens = self.proj.forward(p, self.ln_final.forward(p, x)?)?;
        let ends: Vec<usize> = end_positions.iter().enumerate().map(|(i, &e)| i * l + e).collect();
        let pooled = tokens.gather_rows(&ends)?.l2_normalize()?;
        Ok(TextOutput {
            pooled,
            tokens,
            end_positions,
        })
    }
}
