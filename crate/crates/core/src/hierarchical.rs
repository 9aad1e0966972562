//! Hierarchical Transformer: a branch encoder over each target packed with
//! its individual context, and a backbone encoder over the branch features
//! of the conversational context. Context preference is realized purely as
//! attention masks.

use rand::Rng;

use crate::config::ContextPreference;
use crate::conversation::Conversation;
use crate::error::{Error, Result};
use crate::numeric::{Encoder, Init, Mask, ParamId, ParamStore, Tape, Var};

pub const SEGMENT_TARGET: usize = 0;
pub const SEGMENT_CONTEXT: usize = 1;

/// Token-level plan for one branch sequence
/// `[CLS] target [SEP] context_1 ... context_n`, after truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchLayout {
    /// Target rows kept (the most recent ones when truncated).
    pub target_len: usize,
    /// Rows dropped from the front of the target.
    pub target_skip: usize,
    /// Indices of kept context items in the caller's list (oldest dropped first).
    pub kept_context: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub mask: Mask,
}

impl BranchLayout {
    pub fn new(
        target_len: usize,
        context_lens: &[usize],
        preference: ContextPreference,
        max_len: usize,
    ) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        let mut first_kept = 0;
        let mut ctx_total: usize = context_lens.iter().sum();
        while first_kept < context_lens.len() && 2 + target_len + ctx_total > max_len {
            ctx_total -= context_lens[first_kept];
            first_kept += 1;
        }
        let kept_target = target_len.min(max_len - 2);
        let target_skip = target_len - kept_target;
        let kept_context: Vec<usize> = (first_kept..context_lens.len()).collect();

        let head = 2 + kept_target;
        let len = head + ctx_total;
        let mut segment_ids = vec![SEGMENT_TARGET; head];
        segment_ids.resize(len, SEGMENT_CONTEXT);
        let mask = match preference {
            ContextPreference::Dependent => Mask::ones(len),
            ContextPreference::Free => Mask::from_fn(len, len, |i, j| {
                if segment_ids[i] == SEGMENT_TARGET {
                    segment_ids[j] == SEGMENT_TARGET
                } else {
                    i == j
                }
            })?,
        };
        Ok(BranchLayout {
            target_len: kept_target,
            target_skip,
            kept_context,
            segment_ids,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }
}

/// A packed branch sequence on a tape.
#[derive(Clone, Debug)]
pub struct BranchInput {
    pub rows: Var,
    pub segment_ids: Vec<usize>,
    pub attn_mask: Mask,
    pub cls_index: usize,
}

/// Branch encoder with its special rows.
#[derive(Clone, Debug)]
pub struct Branch {
    pub cls: ParamId,
    pub sep: ParamId,
    pub segments: ParamId,
    pub encoder: Encoder,
    pub max_seq_len: usize,
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        max_seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::Uniform { fan_in: d_model };
        Ok(Branch {
            cls: store.add(format!("{name}.cls"), 1, d_model, init, rng),
            sep: store.add(format!("{name}.sep"), 1, d_model, init, rng),
            segments: store.add(format!("{name}.segments"), 2, d_model, init, rng),
            encoder: Encoder::new(store, name, n_layers, d_model, heads, d_ff, rng)?,
            max_seq_len,
        })
    }

    /// Packs `[CLS] target [SEP] context...` and adds segment embeddings.
    pub fn build_input(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        target: Var,
        context: &[Var],
        preference: ContextPreference,
    ) -> Result<BranchInput> {
        let target_len = tape.value(target).rows();
        let context_lens: Vec<usize> = context.iter().map(|&c| tape.value(c).rows()).collect();
        let layout = BranchLayout::new(target_len, &context_lens, preference, self.max_seq_len)?;
        let target = if layout.target_skip > 0 {
            tape.slice_rows(target, layout.target_skip, layout.target_len)?
        } else {
            target
        };
        let mut parts = vec![tape.param(store, self.cls), target, tape.param(store, self.sep)];
        parts.extend(layout.kept_context.iter().map(|&k| context[k]));
        let rows = tape.concat_rows(&parts)?;
        let seg_table = tape.param(store, self.segments);
        let seg = tape.embedding(seg_table, &layout.segment_ids)?;
        let rows = tape.add(rows, seg)?;
        Ok(BranchInput {
            rows,
            segment_ids: layout.segment_ids,
            attn_mask: layout.mask,
            cls_index: 0,
        })
    }

    /// Final-layer row at [CLS].
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, input: &BranchInput) -> Result<Var> {
        let h = self.encoder.forward(tape, store, input.rows, &input.attn_mask)?;
        tape.row(h, input.cls_index)
    }
}

/// Mask of the backbone over `n` rows whose last row is the target.
pub fn backbone_mask(n: usize, preference: ContextPreference) -> Mask {
    match preference {
        ContextPreference::Dependent => Mask::ones(n),
        ContextPreference::Free => Mask::identity(n),
    }
}

/// Backbone encoder with learned slot embeddings indexed by distance from
/// the target (target is slot 0, the turn before it slot 1, ...).
#[derive(Clone, Debug)]
pub struct Backbone {
    pub slots: ParamId,
    pub encoder: Encoder,
    pub max_slots: usize,
}

impl Backbone {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        context_window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let max_slots = context_window + 1;
        Ok(Backbone {
            slots: store.add(
                format!("{name}.slots"),
                max_slots,
                d_model,
                Init::Uniform { fan_in: d_model },
                rng,
            ),
            encoder: Encoder::new(store, name, n_layers, d_model, heads, d_ff, rng)?,
            max_slots,
        })
    }

    /// `features` are the context features in conversation order followed by
    /// the target feature; returns the final-layer row of the target.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &[Var],
        preference: ContextPreference,
    ) -> Result<Var> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Index("backbone needs at least the target feature".into()));
        }
        if n > self.max_slots {
            return Err(Error::Index(format!(
                "{n} features exceed the {} backbone slots",
                self.max_slots
            )));
        }
        let rows = tape.concat_rows(features)?;
        let distances: Vec<usize> = (0..n).rev().collect();
        let table = tape.param(store, self.slots);
        let slots = tape.embedding(table, &distances)?;
        let x = tape.add(rows, slots)?;
        let h = self.encoder.forward(tape, store, x, &backbone_mask(n, preference))?;
        tape.row(h, n - 1)
    }
}

/// Branch plus backbone for one modality (or shared by all).
#[derive(Clone, Debug)]
pub struct HierarchicalTransformer {
    pub branch: Branch,
    pub backbone: Backbone,
    pub context_window: usize,
}

impl HierarchicalTransformer {
    /// Representation of every turn of `conv` for one modality.
    ///
    /// `rows[k]` is the encoded input of turn `k + 1`. Each branch feature is
    /// computed once and reused by every target whose context contains it.
    pub fn encode_conversation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conv: &Conversation,
        rows: &[Var],
        preference: ContextPreference,
    ) -> Result<Vec<Var>> {
        if rows.len() != conv.len() {
            return Err(Error::Dimension(format!(
                "{} encoded turns for a {}-turn conversation",
                rows.len(),
                conv.len()
            )));
        }
        let k = self.context_window;
        let mut features = Vec::with_capacity(conv.len());
        for turn in 1..=conv.len() {
            let ctx: Vec<Var> = conv
                .individual_turns(turn, k)?
                .into_iter()
                .map(|t| rows[t - 1])
                .collect();
            let input = self.branch.build_input(tape, store, rows[turn - 1], &ctx, preference)?;
            features.push(self.branch.encode(tape, store, &input)?);
        }
        let mut reps = Vec::with_capacity(conv.len());
        for turn in 1..=conv.len() {
            let mut seq: Vec<Var> = conv
                .conversational_turns(turn, k)?
                .into_iter()
                .map(|t| features[t - 1])
                .collect();
            seq.push(features[turn - 1]);
            reps.push(self.backbone.encode(tape, store, &seq, preference)?);
        }
        Ok(reps)
    }
}
