//! The full model: modality encoders, per-modality hierarchical Transformers,
//! a fusion stage selected by [`FusionVariant`], and the prediction head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionVariant, KvConfig, Modality, ModelConfig};
use crate::conversation::{Conversation, Label};
use crate::discriminator::{Head, Prediction};
use crate::encoders::{EncoderConfig, ModalEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::hierarchical::{Backbone, Branch, HierarchicalTransformer};
use crate::mgif::{GateOutput, PairGates, VectorFusion};
use crate::numeric::{Checkpoint, Linear, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub enum Fusion {
    GateTrm { gates: PairGates, fusion: VectorFusion },
    GateConcat { gates: PairGates, proj: Linear },
    TrmOnly { fusion: VectorFusion },
    ConcatOnly { proj: Linear },
    TextOnly { proj: Linear },
}

/// Parameter layout of a model; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub modal: ModalEncoder,
    /// One entry when modalities share parameters, otherwise one per modality in t, v, a order.
    pub hts: Vec<HierarchicalTransformer>,
    pub fusion: Fusion,
    pub head: Head,
}

/// Tape nodes of one conversation's forward pass.
#[derive(Clone, Debug)]
pub struct ConversationOutput {
    /// Per modality (t, v, a), one representation per turn.
    pub reps: [Option<Vec<Var>>; 3],
    /// Gate nodes per turn (gated variants only).
    pub gates: Vec<Vec<GateOutput>>,
    /// Fused vectors stacked, `L × D_h`.
    pub fused: Var,
    /// Head output, `L × C` probabilities or `L × 4` values.
    pub outputs: Var,
}

impl Network {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc_cfg = EncoderConfig::from(cfg);
        let text = TextEncoder::new(store, enc_cfg, &mut rng)?;
        let modal = ModalEncoder::new(store, enc_cfg, &mut rng)?;
        let d = cfg.d_model;
        let d_ff = d * cfg.ffn_mult;
        let ht_names: Vec<String> = if cfg.share_modal_params {
            vec!["ht".into()]
        } else {
            Modality::ALL.iter().map(|m| format!("ht.{}", m.name())).collect()
        };
        let hts = ht_names
            .iter()
            .map(|n| {
                Ok(HierarchicalTransformer {
                    branch: Branch::new(store, &format!("{n}.branch"), cfg.n_branch, d, cfg.heads, d_ff, cfg.max_seq_len, &mut rng)?,
                    backbone: Backbone::new(store, &format!("{n}.backbone"), cfg.n_backbone, d, cfg.heads, d_ff, cfg.context_window, &mut rng)?,
                    context_window: cfg.context_window,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let d_h = cfg.fusion_d_h;
        let f_ff = d_h * cfg.ffn_mult;
        let n_mod = cfg.modalities.len();
        let fusion = match cfg.fusion_variant {
            FusionVariant::GateTrm => {
                let gates = PairGates::new(store, "gate", cfg.modalities, d, d_h, &mut rng)?;
                let fusion = VectorFusion::new(store, "fusion", gates.len(), cfg.fusion_layers, d_h, cfg.fusion_heads, f_ff, &mut rng)?;
                Fusion::GateTrm { gates, fusion }
            }
            FusionVariant::GateConcat => {
                let gates = PairGates::new(store, "gate", cfg.modalities, d, d_h, &mut rng)?;
                let proj = Linear::new(store, "fusion.concat", gates.len() * d_h, d_h, &mut rng);
                Fusion::GateConcat { gates, proj }
            }
            FusionVariant::TrmOnly => Fusion::TrmOnly {
                fusion: VectorFusion::new(store, "fusion", n_mod, cfg.fusion_layers, d_h, cfg.fusion_heads, f_ff, &mut rng)?,
            },
            FusionVariant::ConcatOnly => Fusion::ConcatOnly {
                proj: Linear::new(store, "fusion.concat", n_mod * d, d_h, &mut rng),
            },
            FusionVariant::TextOnly => Fusion::TextOnly {
                proj: Linear::new(store, "fusion.text", d, d_h, &mut rng),
            },
        };
        let head = Head::new(store, d_h, cfg.head_kind, cfg.num_classes, &mut rng);
        Ok(Network {
            cfg: cfg.clone(),
            text,
            modal,
            hts,
            fusion,
            head,
        })
    }

    pub fn ht(&self, m: Modality) -> &HierarchicalTransformer {
        if self.hts.len() == 1 {
            &self.hts[0]
        } else {
            &self.hts[m.index()]
        }
    }

    fn check_conversation(&self, conv: &Conversation) -> Result<()> {
        if conv.label_kind() != self.cfg.head_kind.label_kind() {
            return Err(Error::Config(format!(
                "{} head given conversation {} with {:?} labels",
                self.cfg.head_kind,
                conv.id,
                conv.label_kind()
            )));
        }
        Ok(())
    }

    /// Representation `r_(m)` of every turn for one modality.
    pub fn modality_reps(&self, tape: &mut Tape, store: &ParamStore, conv: &Conversation, m: Modality) -> Result<Vec<Var>> {
        let rows = conv
            .expressions()
            .iter()
            .map(|e| match m {
                Modality::Text => self.text.encode(tape, store, &e.text),
                Modality::Visual => self.modal.encode(tape, store, &e.visual, m),
                Modality::Acoustic => self.modal.encode(tape, store, &e.acoustic, m),
            })
            .collect::<Result<Vec<_>>>()?;
        self.ht(m).encode_conversation(tape, store, conv, &rows, self.cfg.policy.get(m))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, conv: &Conversation) -> Result<ConversationOutput> {
        let active = self.cfg.active_modalities();
        let mut reps: [Option<Vec<Var>>; 3] = [None, None, None];
        for m in active.iter() {
            reps[m.index()] = Some(self.modality_reps(tape, store, conv, m)?);
        }
        let mut fused = Vec::with_capacity(conv.len());
        let mut gates = Vec::new();
        for i in 0..conv.len() {
            let r: [Option<Var>; 3] = std::array::from_fn(|k| reps[k].as_ref().map(|v| v[i]));
            let present: Vec<Var> = r.iter().flatten().copied().collect();
            let u = match &self.fusion {
                Fusion::GateTrm { gates: g, fusion } => {
                    let outs = g.fuse_all(tape, store, &r)?;
                    let hs: Vec<Var> = outs.iter().map(|o| o.h).collect();
                    gates.push(outs);
                    fusion.forward(tape, store, &hs)?
                }
                Fusion::GateConcat { gates: g, proj } => {
                    let outs = g.fuse_all(tape, store, &r)?;
                    let hs: Vec<Var> = outs.iter().map(|o| o.h).collect();
                    gates.push(outs);
                    let cat = tape.concat_cols(&hs)?;
                    proj.forward(tape, store, cat)?
                }
                Fusion::TrmOnly { fusion } => fusion.forward(tape, store, &present)?,
                Fusion::ConcatOnly { proj } => {
                    let cat = tape.concat_cols(&present)?;
                    proj.forward(tape, store, cat)?
                }
                Fusion::TextOnly { proj } => {
                    let t = r[Modality::Text.index()]
                        .ok_or_else(|| Error::Modality("text-only fusion without text".into()))?;
                    proj.forward(tape, store, t)?
                }
            };
            fused.push(u);
        }
        let fused = tape.concat_rows(&fused)?;
        let outputs = self.head.forward(tape, store, fused)?;
        Ok(ConversationOutput {
            reps,
            gates,
            fused,
            outputs,
        })
    }

    /// Forward pass plus the mean loss over the conversation's turns.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, conv: &Conversation) -> Result<(ConversationOutput, Var)> {
        self.check_conversation(conv)?;
        let out = self.forward(tape, store, conv)?;
        let labels: Vec<Label> = conv.expressions().iter().map(|e| e.label.clone()).collect();
        let loss = self.head.loss(tape, out.outputs, &labels)?;
        Ok((out, loss))
    }

    pub fn predict(&self, store: &ParamStore, conv: &Conversation) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, conv)?;
        Ok(self.head.predictions(&tape, out.outputs))
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct DialogueTrm {
    pub net: Network,
    pub store: ParamStore,
}

impl DialogueTrm {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(cfg, &mut store)?;
        Ok(DialogueTrm { net, store })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn predict(&self, conv: &Conversation) -> Result<Vec<Prediction>> {
        self.net.predict(&self.store, conv)
    }

    /// Values of `r_(m)` for every turn.
    pub fn modality_reps(&self, conv: &Conversation, m: Modality) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let reps = self.net.modality_reps(&mut tape, &self.store, conv, m)?;
        Ok(reps.iter().map(|&v| tape.value(v).data().to_vec()).collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.cfg().to_kv().to_string())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_kv(&KvConfig::parse(&ckpt.config)?)?;
        let mut model = DialogueTrm::new(&cfg)?;
        ckpt.apply_to(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        DialogueTrm::from_checkpoint(&Checkpoint::load(path)?)
    }
}
