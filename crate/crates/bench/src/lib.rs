//! Fixtures shared by the benchmarks in `benches/`.

use dtrm_core::config::{FusionVariant, ModelConfig};
use dtrm_core::conversation::Conversation;
use dtrm_core::model::DialogueTrm;
use dtrm_core::synth::{generate, RuleKind, SynthSpec};

/// The default model shape with a given fusion variant.
pub fn desk_config(variant: FusionVariant) -> ModelConfig {
    ModelConfig {
        fusion_variant: variant,
        ..ModelConfig::default()
    }
}

/// A freshly initialized model and one 10-turn synthetic conversation that fits it.
pub fn fixture(cfg: &ModelConfig) -> (DialogueTrm, Conversation) {
    let spec = SynthSpec {
        rule: RuleKind::CrossModal,
        conversations: 1,
        vocab_size: cfg.vocab_size,
        d_visual: cfg.d_visual,
        d_acoustic: cfg.d_acoustic,
        ..SynthSpec::default()
    };
    let mut data = generate(&spec).expect("valid spec").0;
    let cfg = ModelConfig {
        num_classes: 4,
        ..*cfg
    };
    (DialogueTrm::new(&cfg).expect("valid config"), data.conversations.remove(0))
}
