use stfm_tensor::nn::Embedding;
use stfm_tensor::{ParamStore, Rng, Tape, Var};

use super::bpe::Bpe;
use crate::data_model::{Modality, ScaleConfig, TokenSequence};
use crate::error::{Error, Result};

/// Token ids after validation, plus whether `T_max` forced a cut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

pub fn tokenize(bpe: &Bpe, transcript: &str, max_len: usize) -> Result<TextTokens> {
    let text = transcript.trim();
    if text.is_empty() {
        return Err(Error::arg("transcript is empty"));
    }
    let mut ids: Vec<usize> = bpe.encode(text).into_iter().map(|i| i as usize).collect();
    let truncated = ids.len() > max_len;
    if truncated {
        log::warn!("transcript of {} tokens truncated to {max_len}", ids.len());
        ids.truncate(max_len);
    }
    Ok(TextTokens { ids, truncated })
}

/// Token embedding plus learned absolute positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    tokens: Embedding,
    positions: Embedding,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ScaleConfig, vocab: usize, rng: &mut Rng) -> Self {
        Self {
            tokens: Embedding::new(store, &format!("{name}.tok"), vocab, cfg.channels, 0.5, rng),
            positions: Embedding::new(store, &format!("{name}.pos"), cfg.text_max_len, cfg.channels, 0.1, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.tokens.count
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Var<'t> {
        let tok = self.tokens.forward(tape, store, ids);
        tok.add(self.positions.prefix(tape, store, ids.len()))
    }

    pub fn encode(&self, store: &ParamStore, bpe: &Bpe, transcript: &str) -> Result<TokenSequence> {
        let toks = tokenize(bpe, transcript, self.positions.count)?;
        let tape = Tape::new();
        let y = self.forward(&tape, store, &toks.ids);
        let mut seq = TokenSequence::new((*y.value()).clone(), Modality::Text)?;
        seq.truncated = toks.truncated;
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stfm_tensor::rng;

    fn setup() -> (ParamStore, TextEncoder, Bpe, ScaleConfig) {
        let cfg = ScaleConfig::desk();
        let bpe = Bpe::bytes_only();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, "text", &cfg, bpe.vocab_size(), &mut rng(1));
        (store, enc, bpe, cfg)
    }

    #[test]
    fn hello_world_round_trips() {
        let (store, enc, bpe, cfg) = setup();
        let seq = enc.encode(&store, &bpe, "hello world").unwrap();
        let toks = tokenize(&bpe, "hello world", cfg.text_max_len).unwrap();
        assert_eq!(seq.len(), toks.ids.len());
        assert_eq!(seq.channels(), cfg.channels);
        let ids: Vec<u32> = toks.ids.iter().map(|&i| i as u32).collect();
        assert_eq!(bpe.decode(&ids), "hello world");
    }

    #[test]
    fn single_char_and_empty() {
        let (store, enc, bpe, cfg) = setup();
        let seq = enc.encode(&store, &bpe, "a").unwrap();
        assert_eq!(seq.data().shape(), &[1, cfg.channels]);
        assert!(matches!(enc.encode(&store, &bpe, "   "), Err(Error::Argument(_))));
    }

    #[test]
    fn overflow_is_truncated_and_flagged() {
        let (store, enc, bpe, cfg) = setup();
        let long = "x".repeat(cfg.text_max_len + 5);
        let seq = enc.encode(&store, &bpe, &long).unwrap();
        assert_eq!(seq.len(), cfg.text_max_len);
        assert!(seq.truncated);
    }
}
