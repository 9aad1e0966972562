//! Synthetic conversations with planted emotion rules.
//!
//! Token layout shared by every rule: ids 0..4 mark group 0 or 1 (two
//! synonyms each), ids 4..8 mark polarity 0 or 1, and every id from
//! [`FIRST_FILLER`] up is filler.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conversation::{Conversation, Dataset, Expression, Label};
use crate::encoders::write_vocab;
use crate::error::{Error, Result};

pub const FIRST_FILLER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Label = `2·group + polarity of the turn K back` (polarity 0 when there is none).
    TextContext,
    /// Label set by the current visual and acoustic vectors alone.
    ModalInstant,
    /// Label = `2·group + [visual · w_group > 0]` with `w_1 = −w_0`.
    CrossModal,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::TextContext => "text_context",
            RuleKind::ModalInstant => "modal_instant",
            RuleKind::CrossModal => "cross_modal",
        }
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "text_context" => Ok(RuleKind::TextContext),
            "modal_instant" => Ok(RuleKind::ModalInstant),
            "cross_modal" => Ok(RuleKind::CrossModal),
            other => Err(Error::Config(format!("unknown rule {other:?}"))),
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rule: RuleKind,
    pub conversations: usize,
    /// Turns per conversation.
    pub turns: usize,
    pub speakers: usize,
    /// Dependency lag for text_context; recorded for the other rules.
    pub lag: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub d_visual: usize,
    pub d_acoustic: usize,
    /// Classes for modal_instant; the other rules always use 4.
    pub modal_classes: usize,
    /// Half-width of the uniform noise added to modal prototypes.
    pub noise: f64,
    /// Filler tokens per utterance, inclusive range.
    pub filler_min: usize,
    pub filler_max: usize,
    /// Minimum `|v · w|` kept for cross_modal visual vectors.
    pub margin: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            rule: RuleKind::ModalInstant,
            conversations: 20,
            turns: 10,
            speakers: 2,
            lag: 1,
            seed: 0,
            vocab_size: 64,
            d_visual: 32,
            d_acoustic: 16,
            modal_classes: 6,
            noise: 0.3,
            filler_min: 1,
            filler_max: 3,
            margin: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        match self.rule {
            RuleKind::ModalInstant => self.modal_classes,
            RuleKind::TextContext | RuleKind::CrossModal => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conversations", self.conversations),
            ("turns", self.turns),
            ("speakers", self.speakers),
            ("d_visual", self.d_visual),
            ("d_acoustic", self.d_acoustic),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.vocab_size <= FIRST_FILLER {
            return Err(Error::Config(format!("vocab_size must exceed {FIRST_FILLER}")));
        }
        if self.filler_min > self.filler_max {
            return Err(Error::Config("filler_min exceeds filler_max".into()));
        }
        if self.rule == RuleKind::TextContext && self.lag == 0 {
            return Err(Error::Config("text_context needs a lag of at least 1".into()));
        }
        if self.rule == RuleKind::ModalInstant {
            if self.modal_classes < 2 {
                return Err(Error::Config("modal_instant needs at least 2 classes".into()));
            }
            if !(0.0..1.0).contains(&self.noise) {
                return Err(Error::Config("noise must be in [0, 1) to keep prototypes separable".into()));
            }
            // 2^d codewords must cover the classes
            if self.d_visual < usize::BITS as usize && (1usize << self.d_visual) < self.modal_classes {
                return Err(Error::Config("d_visual too small for the class count".into()));
            }
        }
        Ok(())
    }
}

/// Sidecar written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub num_classes: usize,
    pub num_utterances: usize,
    /// Best accuracy of a predictor that sees only the target's text.
    pub text_free_ceiling: f64,
    /// modal_instant sign codewords, per class.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub visual_prototypes: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub acoustic_prototypes: Vec<Vec<f64>>,
    /// cross_modal direction `w_0`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub direction: Vec<f64>,
}

fn hamming(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// `count` ±1 codewords of length `dim` with pairwise Hamming distance at least `dim / 4`.
pub fn sign_codewords<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let min_dist = (dim / 4).max(1);
    let mut words: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while words.len() < count {
        let w: Vec<f64> = (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        attempts += 1;
        let need = if attempts > 10_000 { 1 } else { min_dist };
        if words.iter().all(|o| hamming(o, &w) >= need) {
            words.push(w);
        }
    }
    words
}

fn group_token<R: Rng + ?Sized>(rng: &mut R, group: usize) -> usize {
    2 * group + rng.random_range(0..2)
}

fn polarity_token<R: Rng + ?Sized>(rng: &mut R, polarity: usize) -> usize {
    4 + 2 * polarity + rng.random_range(0..2)
}

fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, half: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-half..=half)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Closed-form accuracy ceiling of a predictor that sees only the target's
/// text under text_context: polarity is known to be 0 for the first `lag`
/// turns and a fair coin afterwards, but the turn index is not observed.
pub fn text_context_free_ceiling(turns: usize, lag: usize) -> f64 {
    let known = lag.min(turns) as f64;
    let unknown = turns.saturating_sub(lag) as f64;
    (known + 0.5 * unknown) / turns as f64
}

/// Generates the dataset and its manifest.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, Manifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = Manifest {
        spec: spec.clone(),
        num_classes: spec.num_classes(),
        num_utterances: spec.conversations * spec.turns,
        text_free_ceiling: 0.0,
        visual_prototypes: Vec::new(),
        acoustic_prototypes: Vec::new(),
        direction: Vec::new(),
    };
    match spec.rule {
        RuleKind::ModalInstant => {
            manifest.visual_prototypes = sign_codewords(&mut rng, spec.modal_classes, spec.d_visual);
            manifest.acoustic_prototypes = sign_codewords(&mut rng, spec.modal_classes, spec.d_acoustic);
            // text is filler: the best text-only guess is the most frequent class
            manifest.text_free_ceiling = 1.0 / spec.modal_classes as f64;
        }
        RuleKind::TextContext => {
            manifest.text_free_ceiling = text_context_free_ceiling(spec.turns, spec.lag);
        }
        RuleKind::CrossModal => {
            let w = uniform_vec(&mut rng, spec.d_visual, 1.0);
            let norm = dot(&w, &w).sqrt();
            manifest.direction = w.iter().map(|x| x / norm).collect();
            manifest.text_free_ceiling = 0.5;
        }
    }

    let fillers = FIRST_FILLER..spec.vocab_size;
    let mut conversations = Vec::with_capacity(spec.conversations);
    for c in 0..spec.conversations {
        let groups: Vec<usize> = (0..spec.turns).map(|_| rng.random_range(0..2)).collect();
        let polarities: Vec<usize> = (0..spec.turns).map(|_| rng.random_range(0..2)).collect();
        let mut expressions = Vec::with_capacity(spec.turns);
        for i in 0..spec.turns {
            let speaker = rng.random_range(1..=spec.speakers);
            let n_fill = rng.random_range(spec.filler_min..=spec.filler_max);
            let mut text: Vec<usize> = (0..n_fill).map(|_| rng.random_range(fillers.clone())).collect();
            let (label, visual, acoustic) = match spec.rule {
                RuleKind::ModalInstant => {
                    let class = rng.random_range(0..spec.modal_classes);
                    let mut v = manifest.visual_prototypes[class].clone();
                    let mut a = manifest.acoustic_prototypes[class].clone();
                    for x in v.iter_mut().chain(a.iter_mut()) {
                        *x += rng.random_range(-spec.noise..=spec.noise);
                    }
                    (class, v, a)
                }
                RuleKind::TextContext => {
                    text.push(group_token(&mut rng, groups[i]));
                    text.push(polarity_token(&mut rng, polarities[i]));
                    let s = if i >= spec.lag { polarities[i - spec.lag] } else { 0 };
                    let v = uniform_vec(&mut rng, spec.d_visual, 1.0);
                    let a = uniform_vec(&mut rng, spec.d_acoustic, 1.0);
                    (2 * groups[i] + s, v, a)
                }
                RuleKind::CrossModal => {
                    text.push(group_token(&mut rng, groups[i]));
                    let v = loop {
                        let v = uniform_vec(&mut rng, spec.d_visual, 1.0);
                        if dot(&v, &manifest.direction).abs() >= spec.margin {
                            break v;
                        }
                    };
                    let sign = dot(&v, &manifest.direction) > 0.0;
                    // w_1 = -w_0 flips the sign test for group 1
                    let s = usize::from(sign != (groups[i] == 1));
                    let a = uniform_vec(&mut rng, spec.d_acoustic, 1.0);
                    (2 * groups[i] + s, v, a)
                }
            };
            text.shuffle(&mut rng);
            expressions.push(Expression {
                turn: i + 1,
                speaker,
                text,
                visual,
                acoustic,
                label: Label::Categorical(label),
            });
        }
        conversations.push(Conversation::new(format!("{}-{c:04}", spec.rule), expressions)?);
    }
    Ok((Dataset::new(conversations)?, manifest))
}

pub fn vocabulary(vocab_size: usize) -> Vec<String> {
    (0..vocab_size)
        .map(|id| match id {
            0..4 => format!("group{}_{}", id / 2, id % 2),
            4..8 => format!("polarity{}_{}", (id - 4) / 2, id % 2),
            _ => format!("filler{id}"),
        })
        .collect()
}

/// Writes `<out>` (JSON Lines), `<out>.manifest.json` and `<out>.vocab.txt`.
pub fn write_dataset(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    let (data, manifest) = generate(spec)?;
    data.write_jsonl(out)?;
    let sidecar = |suffix: &str| {
        let mut name = out.as_os_str().to_owned();
        name.push(suffix);
        std::path::PathBuf::from(name)
    };
    std::fs::write(sidecar(".manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    write_vocab(sidecar(".vocab.txt"), &vocabulary(spec.vocab_size))?;
    Ok(manifest)
}
