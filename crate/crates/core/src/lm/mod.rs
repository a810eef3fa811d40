//! Tiny decoder-only language model: tokenizer, forward/backward, scoring and
//! hidden-state extraction.

pub mod checkpoint;
pub(crate) mod ops;
mod model;
mod tokenizer;

pub use model::{ForwardPass, LayerSel, LmConfig, LmModel, ParamLayout};
pub use tokenizer::{segment, Tokenizer, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID};

use crate::error::{Error, Result};

/// Summed log-probability of a text and the number of scored tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqScore {
    pub logprob: f64,
    pub num_tokens: usize,
}

impl SeqScore {
    pub fn normalized(&self) -> f64 {
        self.logprob / self.num_tokens as f64
    }

    pub fn value(&self, normalize: bool) -> f64 {
        if normalize {
            self.normalized()
        } else {
            self.logprob
        }
    }
}

/// Log-probability in nats of `text` with `BOS` prepended and `EOS` scored.
pub fn score_text(model: &LmModel, tokenizer: &Tokenizer, text: &str) -> Result<SeqScore> {
    let ids = tokenizer.encode(text)?;
    let (num_tokens, logprob) = model.sequence_logprob(&ids)?;
    Ok(SeqScore {
        logprob,
        num_tokens,
    })
}

/// [`score_text`] reduced to a single number, optionally per-token.
pub fn score_sequence(
    model: &LmModel,
    text: &str,
    tokenizer: &Tokenizer,
    normalize: bool,
) -> Result<f64> {
    Ok(score_text(model, tokenizer, text)?.value(normalize))
}

/// Mean hidden state over the text's tokens at `layer`, skipping the first
/// `skip_leading` word tokens. `BOS` is fed as context but never averaged.
pub fn extract_representation(
    model: &LmModel,
    text: &str,
    tokenizer: &Tokenizer,
    layer: LayerSel,
    skip_leading: usize,
) -> Result<Vec<f64>> {
    extract_representation_trimmed(model, text, tokenizer, layer, skip_leading, 0)
}

/// As [`extract_representation`], also leaving the last `skip_trailing`
/// word tokens out of the mean.
pub fn extract_representation_trimmed(
    model: &LmModel,
    text: &str,
    tokenizer: &Tokenizer,
    layer: LayerSel,
    skip_leading: usize,
    skip_trailing: usize,
) -> Result<Vec<f64>> {
    let words = tokenizer.encode_words(text)?;
    if words.is_empty() {
        return Err(Error::EmptyInput("text has no tokens".into()));
    }
    if skip_leading + skip_trailing >= words.len() {
        return Err(Error::Argument(format!(
            "cannot skip {} of {} tokens",
            skip_leading + skip_trailing,
            words.len()
        )));
    }
    let mut ids = Vec::with_capacity(words.len() + 1);
    ids.push(BOS_ID);
    ids.extend(&words);
    let pass = model.forward_pass(&ids)?;
    let hidden = pass.hidden(layer)?;
    let d = model.config().d_model;
    let rows = &hidden[(1 + skip_leading) * d..hidden.len() - skip_trailing * d];
    let count = (rows.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (LmModel, Tokenizer) {
        let tok = Tokenizer::build([["the cat sat on a mat today"]]).unwrap();
        let cfg = LmConfig {
            vocab_size: tok.vocab_size(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_context: 12,
        };
        (LmModel::init(cfg, 5).unwrap(), tok)
    }

    #[test]
    fn uniform_model_scores_ln_vocab_per_token() {
        let tok = Tokenizer::from_vocab(
            ["<pad>", "<bos>", "<eos>", "a", "b", "c", "d", "e", "f", "g"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let cfg = LmConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            max_context: 8,
        };
        let model = LmModel::zeros(cfg).unwrap();
        // "a b c" → 3 words + EOS = 4 scored tokens
        let raw = score_sequence(&model, "a b c", &tok, false).unwrap();
        assert!((raw - (-4.0 * 10f64.ln())).abs() < 1e-12);
        assert!((raw - (-9.2103)).abs() < 1e-4);
        let norm = score_sequence(&model, "a b c", &tok, true).unwrap();
        assert!((norm + 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_token_representation_is_its_hidden_state() {
        let (model, tok) = setup();
        let rep = extract_representation(&model, "cat", &tok, LayerSel::Last, 0).unwrap();
        let ids = [BOS_ID, tok.id("cat").unwrap()];
        let pass = model.forward_pass(&ids).unwrap();
        let d = model.config().d_model;
        assert_eq!(rep, pass.hidden(LayerSel::Last).unwrap()[d..2 * d]);
    }

    #[test]
    fn representation_is_order_sensitive() {
        let (model, tok) = setup();
        let a = extract_representation(&model, "the cat", &tok, LayerSel::Last, 0).unwrap();
        let b = extract_representation(&model, "cat the", &tok, LayerSel::Last, 0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn bad_layer_and_unknown_token() {
        let (model, tok) = setup();
        assert!(matches!(
            extract_representation(&model, "cat", &tok, LayerSel::Index(9), 0),
            Err(Error::Layer { .. })
        ));
        assert!(matches!(
            score_sequence(&model, "dog", &tok, true),
            Err(Error::Vocabulary { .. })
        ));
    }
}
