//! Conversations as ordered multimodal expressions, the two context windows
//! used by the model, and the JSON Lines dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of continuous emotion dimensions (valence, arousal, expectancy, power).
pub const CONTINUOUS_DIMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Categorical(usize),
    Continuous([f64; CONTINUOUS_DIMS]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Categorical,
    Continuous,
}

impl Label {
    pub fn kind(&self) -> LabelKind {
        match self {
            Label::Categorical(_) => LabelKind::Categorical,
            Label::Continuous(_) => LabelKind::Continuous,
        }
    }
}

/// One turn: what a speaker said, showed and sounded like, with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Expression {
    /// 1-based position in the conversation.
    pub turn: usize,
    /// 1-based speaker id.
    pub speaker: usize,
    pub text: Vec<usize>,
    pub visual: Vec<f64>,
    pub acoustic: Vec<f64>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    expressions: Vec<Expression>,
    speakers: usize,
}

impl Conversation {
    /// Validates turn numbering (exactly `1..=L`), speaker ids (`>= 1`) and a
    /// single label kind. The speaker count is the largest speaker id.
    pub fn new(id: impl Into<String>, expressions: Vec<Expression>) -> Result<Self> {
        let id = id.into();
        if expressions.is_empty() {
            return Err(Error::Data(format!("conversation {id} is empty")));
        }
        for (k, e) in expressions.iter().enumerate() {
            if e.turn != k + 1 {
                return Err(Error::Data(format!(
                    "conversation {id}: expression {k} has turn {} (expected {})",
                    e.turn,
                    k + 1
                )));
            }
            if e.speaker == 0 {
                return Err(Error::Data(format!("conversation {id}: speaker ids are 1-based")));
            }
        }
        let kind = expressions[0].label.kind();
        if expressions.iter().any(|e| e.label.kind() != kind) {
            return Err(Error::Data(format!("conversation {id}: mixed label kinds")));
        }
        let speakers = expressions.iter().map(|e| e.speaker).max().unwrap();
        Ok(Conversation {
            id,
            expressions,
            speakers,
        })
    }

    pub fn len(&self) -> usize {
        self.expressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expressions.is_empty()
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn expressions(&self) -> &[Expression] {
        &self.expressions
    }

    pub fn label_kind(&self) -> LabelKind {
        self.expressions[0].label.kind()
    }

    /// Expression at 1-based `turn`.
    pub fn turn(&self, turn: usize) -> Result<&Expression> {
        if turn == 0 || turn > self.len() {
            return Err(Error::Index(format!(
                "turn {turn} outside 1..={} in conversation {}",
                self.len(),
                self.id
            )));
        }
        Ok(&self.expressions[turn - 1])
    }

    /// 1-based turns in `[max(1, i-K), i)`.
    fn window(&self, turn: usize, window: usize) -> Result<std::ops::Range<usize>> {
        self.turn(turn)?;
        Ok(turn.saturating_sub(window).max(1)..turn)
    }

    /// Turns of the conversational context as 1-based indices.
    pub fn conversational_turns(&self, turn: usize, window: usize) -> Result<Vec<usize>> {
        Ok(self.window(turn, window)?.collect())
    }

    /// Turns of the individual context as 1-based indices.
    pub fn individual_turns(&self, turn: usize, window: usize) -> Result<Vec<usize>> {
        let speaker = self.turn(turn)?.speaker;
        Ok(self
            .window(turn, window)?
            .filter(|&t| self.expressions[t - 1].speaker == speaker)
            .collect())
    }
}

/// The `window` preceding turns spoken by the target's own speaker, oldest first.
pub fn individual_context(conv: &Conversation, turn: usize, window: usize) -> Result<Vec<&Expression>> {
    Ok(conv
        .individual_turns(turn, window)?
        .into_iter()
        .map(|t| &conv.expressions[t - 1])
        .collect())
}

/// The `window` preceding turns by any speaker, oldest first.
pub fn conversational_context(
    conv: &Conversation,
    turn: usize,
    window: usize,
) -> Result<Vec<&Expression>> {
    Ok(conv
        .conversational_turns(turn, window)?
        .into_iter()
        .map(|t| &conv.expressions[t - 1])
        .collect())
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    text: Vec<usize>,
    visual: Vec<f64>,
    acoustic: Vec<f64>,
    label: Label,
}

#[derive(Serialize, Deserialize)]
struct ConversationRecord {
    conv_id: String,
    speakers: Vec<usize>,
    utterances: Vec<UtteranceRecord>,
}

impl Conversation {
    pub fn to_json_line(&self) -> Result<String> {
        let rec = ConversationRecord {
            conv_id: self.id.clone(),
            speakers: self.expressions.iter().map(|e| e.speaker).collect(),
            utterances: self
                .expressions
                .iter()
                .map(|e| UtteranceRecord {
                    text: e.text.clone(),
                    visual: e.visual.clone(),
                    acoustic: e.acoustic.clone(),
                    label: e.label.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: ConversationRecord = serde_json::from_str(line)?;
        if rec.speakers.len() != rec.utterances.len() {
            return Err(Error::Data(format!(
                "conversation {}: {} speakers for {} utterances",
                rec.conv_id,
                rec.speakers.len(),
                rec.utterances.len()
            )));
        }
        let expressions = rec
            .utterances
            .into_iter()
            .zip(rec.speakers)
            .enumerate()
            .map(|(k, (u, speaker))| Expression {
                turn: k + 1,
                speaker,
                text: u.text,
                visual: u.visual,
                acoustic: u.acoustic,
                label: u.label,
            })
            .collect();
        Conversation::new(rec.conv_id, expressions)
    }
}

/// A list of conversations sharing one label kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn new(conversations: Vec<Conversation>) -> Result<Self> {
        if let Some(first) = conversations.first() {
            let kind = first.label_kind();
            if conversations.iter().any(|c| c.label_kind() != kind) {
                return Err(Error::Data("dataset mixes categorical and continuous labels".into()));
            }
        }
        Ok(Dataset { conversations })
    }

    pub fn label_kind(&self) -> Option<LabelKind> {
        self.conversations.first().map(Conversation::label_kind)
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut conversations = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let conv = Conversation::from_json_line(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
            conversations.push(conv);
        }
        Dataset::new(conversations)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for c in &self.conversations {
            writeln!(w, "{}", c.to_json_line()?)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn conversation_with_speakers(speakers: &[usize]) -> Conversation {
        let expressions = speakers
            .iter()
            .enumerate()
            .map(|(k, &s)| Expression {
                turn: k + 1,
                speaker: s,
                text: vec![k],
                visual: vec![0.0],
                acoustic: vec![0.0],
                label: Label::Categorical(0),
            })
            .collect();
        Conversation::new("c", expressions).unwrap()
    }

    fn turns(xs: &[&Expression]) -> Vec<(usize, usize)> {
        xs.iter().map(|e| (e.turn, e.speaker)).collect()
    }

    /// X = {x^1_1, x^1_2, x^2_3, x^1_4, x^3_5, x^2_6, x^1_7, x^2_8}
    fn table_one() -> Conversation {
        conversation_with_speakers(&[1, 1, 2, 1, 3, 2, 1, 2])
    }

    #[test]
    fn table_one_contexts() {
        let c = table_one();
        assert_eq!(c.speakers(), 3);
        assert_eq!(turns(&individual_context(&c, 7, 3).unwrap()), vec![(4, 1)]);
        assert_eq!(
            turns(&conversational_context(&c, 7, 3).unwrap()),
            vec![(4, 1), (5, 3), (6, 2)]
        );
    }

    #[test]
    fn first_turn_has_no_context() {
        let c = table_one();
        assert!(individual_context(&c, 1, 5).unwrap().is_empty());
        assert!(conversational_context(&c, 1, 5).unwrap().is_empty());
    }

    #[test]
    fn last_turn_of_second_speaker() {
        let c = table_one();
        assert_eq!(turns(&individual_context(&c, 8, 3).unwrap()), vec![(6, 2)]);
    }

    #[test]
    fn window_clips_at_start() {
        let c = table_one();
        assert_eq!(
            turns(&conversational_context(&c, 3, 10).unwrap()),
            vec![(1, 1), (2, 1)]
        );
    }

    #[test]
    fn out_of_range_turn_is_index_error() {
        let c = table_one();
        assert!(matches!(individual_context(&c, 0, 3), Err(Error::Index(_))));
        assert!(matches!(conversational_context(&c, 9, 3), Err(Error::Index(_))));
    }

    #[test]
    fn rejects_gaps_and_mixed_labels() {
        let mut c = table_one().expressions;
        c[3].turn = 9;
        assert!(Conversation::new("x", c).is_err());
        let mut c = table_one().expressions;
        c[0].label = Label::Continuous([0.0; 4]);
        assert!(Conversation::new("x", c).is_err());
    }

    #[test]
    fn json_line_round_trip() {
        let mut c = table_one();
        c.expressions[2].visual = vec![0.1, -2.5e-7];
        let line = c.to_json_line().unwrap();
        assert_eq!(Conversation::from_json_line(&line).unwrap(), c);
        let cont = r#"{"conv_id":"a","speakers":[1,2],"utterances":[
            {"text":[1],"visual":[0.0],"acoustic":[0.0],"label":[0.1,0.2,0.3,0.4]},
            {"text":[],"visual":[0.0],"acoustic":[0.0],"label":[1,2,3,4]}]}"#
            .replace('\n', "");
        let c = Conversation::from_json_line(&cont).unwrap();
        assert_eq!(c.label_kind(), LabelKind::Continuous);
    }
}
