//! Abstract token prompts. Tokens are bare identifiers; embeddings are drawn
//! deterministically per token id so the same id embeds identically in every
//! prompt built from the same seed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Sentinel token ids. Content tokens use ids >= 2.
pub const START_TOKEN: u32 = 0;
pub const PAD_TOKEN: u32 = 1;

/// Ordered token ids with their embedding rows. Position 0 is always START;
/// trailing positions are PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrompt {
    pub tokens: Vec<u32>,
    pub embeddings: Array2<f64>,
}

impl TextPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// True when the prompt carries no content tokens (START + PAD only).
    pub fn is_unconditional(&self) -> bool {
        self.tokens
            .iter()
            .all(|&t| t == START_TOKEN || t == PAD_TOKEN)
    }

    /// Positions holding PAD tokens.
    pub fn pad_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == PAD_TOKEN)
            .map(|(i, _)| i)
            .collect()
    }
}

/// The deterministic embedding row for one token id.
pub fn token_embedding(token: u32, dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = derive_rng(seed, "token-embedding", u64::from(token));
    Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

fn build_prompt(tokens: Vec<u32>, dim: usize, seed: u64) -> TextPrompt {
    let mut embeddings = Array2::zeros((tokens.len(), dim));
    for (row, &token) in tokens.iter().enumerate() {
        embeddings
            .row_mut(row)
            .assign(&token_embedding(token, dim, seed));
    }
    TextPrompt { tokens, embeddings }
}

/// The unconditional prompt: START followed by PAD tokens.
pub fn empty_prompt(length: usize, dim: usize, seed: u64) -> Result<TextPrompt> {
    if length < 1 {
        return Err(Error::parameter("prompt length must be >= 1"));
    }
    if dim < 1 {
        return Err(Error::parameter("embedding dim must be >= 1"));
    }
    let mut tokens = vec![PAD_TOKEN; length];
    tokens[0] = START_TOKEN;
    Ok(build_prompt(tokens, dim, seed))
}

/// A content prompt: START, the given content ids, then PAD to `length`.
pub fn content_prompt(content: &[u32], length: usize, dim: usize, seed: u64) -> Result<TextPrompt> {
    if length < 1 {
        return Err(Error::parameter("prompt length must be >= 1"));
    }
    if dim < 1 {
        return Err(Error::parameter("embedding dim must be >= 1"));
    }
    if content.len() + 1 > length {
        return Err(Error::parameter(format!(
            "{} content tokens plus START do not fit in length {length}",
            content.len()
        )));
    }
    if let Some(bad) = content.iter().find(|&&t| t < 2) {
        return Err(Error::parameter(format!(
            "content token ids must be >= 2 (0/1 are START/PAD), got {bad}"
        )));
    }
    let mut tokens = Vec::with_capacity(length);
    tokens.push(START_TOKEN);
    tokens.extend_from_slice(content);
    tokens.resize(length, PAD_TOKEN);
    Ok(build_prompt(tokens, dim, seed))
}

/// Prompt parameters as they appear in the run-config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub length: usize,
    pub content_tokens: Vec<u32>,
}

impl PromptSpec {
    pub fn build(&self, dim: usize, seed: u64) -> Result<TextPrompt> {
        content_prompt(&self.content_tokens, self.length, dim, seed)
    }
}
