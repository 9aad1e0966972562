//! Trainable stand-ins for pretrained modality encoders: a token embedding
//! table for text and bias-free projections for visual/acoustic vectors.

use std::path::Path;

use rand::Rng;

use crate::config::{Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::{Init, Linear, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_visual: usize,
    pub d_acoustic: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.d_visual == 0 || self.d_acoustic == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Longest text an utterance keeps: room is left for [CLS] and [SEP].
    pub fn max_text_len(&self) -> usize {
        self.max_seq_len - 2
    }
}

impl From<&ModelConfig> for EncoderConfig {
    fn from(c: &ModelConfig) -> Self {
        EncoderConfig {
            vocab_size: c.vocab_size,
            d_model: c.d_model,
            d_visual: c.d_visual,
            d_acoustic: c.d_acoustic,
            max_seq_len: c.max_seq_len,
        }
    }
}

/// Keeps the most recent `max_len` tokens.
pub fn truncate_left(tokens: &[usize], max_len: usize) -> &[usize] {
    &tokens[tokens.len().saturating_sub(max_len)..]
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tokens: ParamId,
    pub positions: ParamId,
    cfg: EncoderConfig,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let init = Init::Uniform { fan_in: cfg.d_model };
        Ok(TextEncoder {
            tokens: store.add("text.tokens", cfg.vocab_size, cfg.d_model, init, rng),
            positions: store.add("text.positions", cfg.max_seq_len, cfg.d_model, init, rng),
            cfg,
        })
    }

    /// Row `i` is `token_embedding(tokens[i]) + position_embedding(i)`.
    /// Overlong input keeps its most recent tokens.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Vocab {
                id,
                vocab_size: self.cfg.vocab_size,
            });
        }
        let kept = truncate_left(tokens, self.cfg.max_text_len());
        let positions: Vec<usize> = (0..kept.len()).collect();
        let table = tape.param(store, self.tokens);
        let pos_table = tape.param(store, self.positions);
        let tok = tape.embedding(table, kept)?;
        let pos = tape.embedding(pos_table, &positions)?;
        tape.add(tok, pos)
    }
}

#[derive(Clone, Debug)]
pub struct ModalEncoder {
    pub visual: Linear,
    pub acoustic: Linear,
}

impl ModalEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(ModalEncoder {
            visual: Linear::new(store, "visual.proj", cfg.d_visual, cfg.d_model, rng),
            acoustic: Linear::new(store, "acoustic.proj", cfg.d_acoustic, cfg.d_model, rng),
        })
    }

    /// Projects a visual or acoustic feature vector to one `1 × d_model` row.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, v: &[f64], modality: Modality) -> Result<Var> {
        let proj = match modality {
            Modality::Visual => &self.visual,
            Modality::Acoustic => &self.acoustic,
            Modality::Text => {
                return Err(Error::Modality("text is not a fixed-length vector".into()))
            }
        };
        if v.len() != proj.in_dim {
            return Err(Error::Dimension(format!(
                "{} vector has length {}, expected {}",
                modality.name(),
                v.len(),
                proj.in_dim
            )));
        }
        let x = tape.constant(Tensor::vector(v.to_vec()));
        proj.forward(tape, store, x)
    }
}

/// Reads a vocabulary file: one token per line, line number (from 0) is the id.
pub fn read_vocab(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}

pub fn write_vocab(path: impl AsRef<Path>, tokens: &[String]) -> Result<()> {
    let mut s = tokens.join("\n");
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            d_model: 4,
            d_visual: 3,
            d_acoustic: 2,
            max_seq_len: 6,
        }
    }

    fn setup() -> (ParamStore, TextEncoder, ModalEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let t = TextEncoder::new(&mut store, cfg(), &mut rng).unwrap();
        let m = ModalEncoder::new(&mut store, cfg(), &mut rng).unwrap();
        (store, t, m)
    }

    #[test]
    fn single_token_is_embedding_plus_position() {
        let (store, t, _) = setup();
        let mut tape = Tape::new();
        let out = t.encode(&mut tape, &store, &[5]).unwrap();
        let e = store.get(t.tokens).row(5);
        let p = store.get(t.positions).row(0);
        let want: Vec<f64> = e.iter().zip(p).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(out).data(), want.as_slice());
    }

    #[test]
    fn repeated_token_differs_by_position_delta() {
        let (store, t, _) = setup();
        let mut tape = Tape::new();
        let out = tape_value(&t, &store, &mut tape, &[7, 7]);
        let pos = store.get(t.positions);
        for j in 0..4 {
            let got = out.get(1, j) - out.get(0, j);
            let want = pos.get(1, j) - pos.get(0, j);
            assert!((got - want).abs() < 1e-15);
        }
    }

    fn tape_value(t: &TextEncoder, s: &ParamStore, tape: &mut Tape, toks: &[usize]) -> Tensor {
        let v = t.encode(tape, s, toks).unwrap();
        tape.value(v).clone()
    }

    #[test]
    fn empty_text_is_zero_rows() {
        let (store, t, _) = setup();
        let mut tape = Tape::new();
        let out = tape_value(&t, &store, &mut tape, &[]);
        assert_eq!(out.shape(), &[0, 4]);
    }

    #[test]
    fn overlong_text_keeps_latest_tokens() {
        let (store, t, _) = setup();
        let mut tape = Tape::new();
        let long = tape_value(&t, &store, &mut tape, &[1, 2, 3, 4, 5, 6]);
        let tail = tape_value(&t, &store, &mut tape, &[3, 4, 5, 6]);
        assert_eq!(long, tail);
        assert_eq!(long.rows(), cfg().max_text_len());
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let (store, t, _) = setup();
        let mut tape = Tape::new();
        assert!(matches!(
            t.encode(&mut tape, &store, &[10]),
            Err(Error::Vocab { id: 10, .. })
        ));
    }

    #[test]
    fn modal_projection_is_linear() {
        let (store, _, m) = setup();
        let mut tape = Tape::new();
        let v = [0.5, -1.0, 2.0];
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let a = m.encode(&mut tape, &store, &v, Modality::Visual).unwrap();
        let b = m.encode(&mut tape, &store, &v2, Modality::Visual).unwrap();
        let z = m.encode(&mut tape, &store, &[0.0; 3], Modality::Visual).unwrap();
        assert!(tape.value(z).data().iter().all(|&x| x == 0.0));
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn modal_projection_matches_scalar_loop() {
        let (store, _, m) = setup();
        let mut tape = Tape::new();
        let v = [0.3, -0.7];
        let out = m.encode(&mut tape, &store, &v, Modality::Acoustic).unwrap();
        let w = store.get(m.acoustic.weight);
        for i in 0..4 {
            let mut want = 0.0;
            for j in 0..2 {
                want += w.get(i, j) * v[j];
            }
            assert!((tape.value(out).data()[i] - want).abs() < 1e-15);
        }
        assert_eq!(tape.value(out).shape(), &[1, 4]);
    }

    #[test]
    fn wrong_vector_length() {
        let (store, _, m) = setup();
        let mut tape = Tape::new();
        assert!(matches!(
            m.encode(&mut tape, &store, &[1.0], Modality::Visual),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let toks: Vec<String> = ["[PAD]", "happy", "sad"].iter().map(|s| s.to_string()).collect();
        write_vocab(&p, &toks).unwrap();
        assert_eq!(read_vocab(&p).unwrap(), toks);
    }
}
