//! Shared transformer encoder: tokenizer, forward pass, MLM pretraining and
//! the binary checkpoint format.

mod checkpoint;
mod mlm;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a64;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlm::{mask_count, mask_sequence, mlm_loss, pretrain, MaskedSeq, MlmConfig, MlmTrainer};
pub use model::{Backbone, LayerParams};
pub(crate) use model::{LayerLora, LoraBranch};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED_TOKENS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= RESERVED_TOKENS as usize {
            return Err(Error::contract("vocab_size must exceed the 4 reserved ids"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters used at scoring time (everything except the MLM head).
    pub fn encoder_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d) + 4 * d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer
    }

    pub fn mlm_head_param_count(&self) -> usize {
        self.d_model * self.vocab_size
    }
}

/// Token ids for one text, always starting with [`CLS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Set when the text produced more than `max_seq_len` tokens.
    pub truncated: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits `text` into lowercase words, breaking on anything that is not
/// alphanumeric.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Id of a single (already lowercased) word.
pub fn word_id(word: &str, vocab_size: usize) -> u32 {
    let buckets = (vocab_size as u64) - RESERVED_TOKENS as u64;
    RESERVED_TOKENS + (fnv1a64(word.as_bytes()) % buckets) as u32
}

/// Hashing tokenizer: each word maps to `4 + fnv1a64(word) mod (vocab - 4)`.
pub fn tokenize(text: &str, config: &BackboneConfig) -> TokenSeq {
    let mut ids = vec![CLS];
    let mut truncated = false;
    for w in words(text) {
        if ids.len() == config.max_seq_len {
            truncated = true;
            break;
        }
        ids.push(word_id(&w, config.vocab_size));
    }
    TokenSeq { ids, truncated }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_just_cls() {
        let t = tokenize("", &BackboneConfig::default());
        assert_eq!(t.ids, vec![CLS]);
        assert!(!t.truncated);
    }

    #[test]
    fn repeated_word_repeats_id() {
        let t = tokenize("Wasser und wasser", &BackboneConfig::default());
        assert_eq!(t.ids.len(), 4);
        assert_eq!(t.ids[1], t.ids[3]);
    }

    #[test]
    fn punctuation_splits_and_case_folds() {
        let cfg = BackboneConfig::default();
        assert_eq!(tokenize("Stoff, leitet!", &cfg), tokenize("stoff leitet", &cfg));
    }

    #[test]
    fn truncates_at_max_len() {
        let cfg = BackboneConfig {
            max_seq_len: 4,
            ..Default::default()
        };
        let t = tokenize("a b c d e f", &cfg);
        assert_eq!(t.ids.len(), 4);
        assert!(t.truncated);
        assert!(!tokenize("a b c", &cfg).truncated);
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let tiny_vocab = BackboneConfig {
            vocab_size: 4,
            ..Default::default()
        };
        assert!(tiny_vocab.validate().is_err());
    }

    #[test]
    fn default_encoder_size() {
        // embeddings 64000 + 4096, two layers of 33472
        assert_eq!(BackboneConfig::default().encoder_param_count(), 135_040);
    }
}
