//! Flat `key = value` configuration files and the model configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::conversation::LabelKind;
use crate::error::{Error, Result};

/// Parsed `key = value` lines. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        KvConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key} = {v}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Merges `other` on top of `self`.
    pub fn extend(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Visual,
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Acoustic];

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Visual => 'v',
            Modality::Acoustic => 'a',
        }
    }

    /// Position in [`Modality::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" | "text" => Ok(Modality::Text),
            "v" | "visual" => Ok(Modality::Visual),
            "a" | "acoustic" => Ok(Modality::Acoustic),
            _ => Err(Error::Config(format!("unknown modality {s}"))),
        }
    }
}

/// Which modalities a model consumes, in canonical t, v, a order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalitySet {
    pub text: bool,
    pub visual: bool,
    pub acoustic: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet {
        text: true,
        visual: true,
        acoustic: true,
    };

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
            Modality::Acoustic => self.acoustic,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.contains(*m))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FromStr for ModalitySet {
    type Err = Error;
    /// Accepts letters or names separated by commas, or a bare letter string like `tva`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = ModalitySet {
            text: false,
            visual: false,
            acoustic: false,
        };
        let parts: Vec<String> = if s.contains(',') {
            s.split(',').map(|p| p.trim().to_string()).collect()
        } else {
            s.chars().map(|c| c.to_string()).collect()
        };
        for p in parts.iter().filter(|p| !p.is_empty()) {
            match p.parse::<Modality>()? {
                Modality::Text => set.text = true,
                Modality::Visual => set.visual = true,
                Modality::Acoustic => set.acoustic = true,
            }
        }
        Ok(set)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.iter().map(|m| m.letter().to_string()).collect();
        write!(f, "{}", s.join(","))
    }
}

/// Context preference of one modality: attend to context or ignore it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextPreference {
    Dependent,
    Free,
}

impl FromStr for ContextPreference {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dependent" | "dep" | "d" => Ok(ContextPreference::Dependent),
            "free" | "f" => Ok(ContextPreference::Free),
            _ => Err(Error::Config(format!("unknown context preference {s}"))),
        }
    }
}

impl fmt::Display for ContextPreference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextPreference::Dependent => "dependent",
            ContextPreference::Free => "free",
        })
    }
}

/// Per-modality context preference. Text defaults to dependent, visual and
/// acoustic to free.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MaskPolicy {
    pub text: ContextPreference,
    pub visual: ContextPreference,
    pub acoustic: ContextPreference,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            text: ContextPreference::Dependent,
            visual: ContextPreference::Free,
            acoustic: ContextPreference::Free,
        }
    }
}

impl MaskPolicy {
    pub fn get(&self, m: Modality) -> ContextPreference {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
            Modality::Acoustic => self.acoustic,
        }
    }

    pub fn set(&mut self, m: Modality, p: ContextPreference) {
        match m {
            Modality::Text => self.text = p,
            Modality::Visual => self.visual = p,
            Modality::Acoustic => self.acoustic = p,
        }
    }

    /// Three letters `d`/`f` for text, visual, acoustic (e.g. `dff`).
    pub fn short(&self) -> String {
        Modality::ALL
            .iter()
            .map(|&m| match self.get(m) {
                ContextPreference::Dependent => 'd',
                ContextPreference::Free => 'f',
            })
            .collect()
    }

    pub fn from_short(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 3 {
            return Err(Error::Config(format!("policy {s}: expected three of d/f for t,v,a")));
        }
        let mut p = MaskPolicy::default();
        for (m, c) in Modality::ALL.into_iter().zip(chars) {
            p.set(m, c.to_string().parse()?);
        }
        Ok(p)
    }
}

/// How the per-modality representations are combined before the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    /// Pairwise gates, then a Transformer over the gated vectors.
    GateTrm,
    /// Pairwise gates, then concatenation and a linear map.
    GateConcat,
    /// Transformer over the raw modality representations.
    TrmOnly,
    /// Concatenated modality representations through a linear map.
    ConcatOnly,
    /// Text representation only, through a linear map.
    TextOnly,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::GateTrm,
        FusionVariant::GateConcat,
        FusionVariant::TrmOnly,
        FusionVariant::ConcatOnly,
        FusionVariant::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::GateTrm => "gate+trm",
            FusionVariant::GateConcat => "gate+concat",
            FusionVariant::TrmOnly => "trm-only",
            FusionVariant::ConcatOnly => "concat-only",
            FusionVariant::TextOnly => "text-only",
        }
    }

    pub fn uses_gates(self) -> bool {
        matches!(self, FusionVariant::GateTrm | FusionVariant::GateConcat)
    }
}

impl FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion variant {s}")))
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Categorical,
    Continuous,
}

impl HeadKind {
    pub fn label_kind(self) -> LabelKind {
        match self {
            HeadKind::Categorical => LabelKind::Categorical,
            HeadKind::Continuous => LabelKind::Continuous,
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(HeadKind::Categorical),
            "continuous" => Ok(HeadKind::Continuous),
            _ => Err(Error::Config(format!("unknown head kind {s}"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Categorical => "categorical",
            HeadKind::Continuous => "continuous",
        })
    }
}

/// Everything needed to build a model's parameters and forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_visual: usize,
    pub d_acoustic: usize,
    pub max_seq_len: usize,
    /// Context window `K`.
    pub context_window: usize,
    pub n_branch: usize,
    pub n_backbone: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of the layer width.
    pub ffn_mult: usize,
    pub policy: MaskPolicy,
    pub share_modal_params: bool,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub fusion_d_h: usize,
    pub fusion_variant: FusionVariant,
    pub modalities: ModalitySet,
    pub head_kind: HeadKind,
    pub num_classes: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            d_visual: 32,
            d_acoustic: 16,
            max_seq_len: 32,
            context_window: 8,
            n_branch: 2,
            n_backbone: 2,
            heads: 4,
            ffn_mult: 4,
            policy: MaskPolicy::default(),
            share_modal_params: true,
            fusion_layers: 2,
            fusion_heads: 4,
            fusion_d_h: 64,
            fusion_variant: FusionVariant::GateTrm,
            modalities: ModalitySet::ALL,
            head_kind: HeadKind::Categorical,
            num_classes: 6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let d_model = kv.get_or("d_model", d.d_model)?;
        let mut policy = MaskPolicy::default();
        for m in Modality::ALL {
            if let Some(p) = kv.get::<ContextPreference>(&format!("policy.{}", m.name()))? {
                policy.set(m, p);
            }
        }
        let cfg = ModelConfig {
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            d_model,
            d_visual: kv.get_or("d_visual", d.d_visual)?,
            d_acoustic: kv.get_or("d_acoustic", d.d_acoustic)?,
            max_seq_len: kv.get_or("max_seq_len", d.max_seq_len)?,
            context_window: kv.get_or("context_window", d.context_window)?,
            n_branch: kv.get_or("n_branch", d.n_branch)?,
            n_backbone: kv.get_or("n_backbone", d.n_backbone)?,
            heads: kv.get_or("heads", d.heads)?,
            ffn_mult: kv.get_or("ffn_mult", d.ffn_mult)?,
            policy,
            share_modal_params: kv.get_or("share_modal_params", d.share_modal_params)?,
            fusion_layers: kv.get_or("fusion.n_layers", d.fusion_layers)?,
            fusion_heads: kv.get_or("fusion.heads", d.fusion_heads)?,
            fusion_d_h: kv.get_or("fusion.d_h", d_model)?,
            fusion_variant: kv.get_or("fusion.variant", d.fusion_variant)?,
            modalities: kv.get_or("modalities", d.modalities)?,
            head_kind: kv.get_or("head.kind", d.head_kind)?,
            num_classes: kv.get_or("head.num_classes", d.num_classes)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("vocab_size", self.vocab_size);
        kv.set("d_model", self.d_model);
        kv.set("d_visual", self.d_visual);
        kv.set("d_acoustic", self.d_acoustic);
        kv.set("max_seq_len", self.max_seq_len);
        kv.set("context_window", self.context_window);
        kv.set("n_branch", self.n_branch);
        kv.set("n_backbone", self.n_backbone);
        kv.set("heads", self.heads);
        kv.set("ffn_mult", self.ffn_mult);
        for m in Modality::ALL {
            kv.set(&format!("policy.{}", m.name()), self.policy.get(m));
        }
        kv.set("share_modal_params", self.share_modal_params);
        kv.set("fusion.n_layers", self.fusion_layers);
        kv.set("fusion.heads", self.fusion_heads);
        kv.set("fusion.d_h", self.fusion_d_h);
        kv.set("fusion.variant", self.fusion_variant);
        kv.set("modalities", self.modalities);
        kv.set("head.kind", self.head_kind);
        kv.set("head.num_classes", self.num_classes);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_visual", self.d_visual),
            ("d_acoustic", self.d_acoustic),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("fusion.heads", self.fusion_heads),
            ("fusion.d_h", self.fusion_d_h),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must leave room for [CLS] and [SEP]".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.fusion_d_h.is_multiple_of(self.fusion_heads) {
            return Err(Error::Config(format!(
                "fusion.d_h {} not divisible by fusion.heads {}",
                self.fusion_d_h, self.fusion_heads
            )));
        }
        match self.fusion_variant {
            FusionVariant::TextOnly => {
                if !self.modalities.text {
                    return Err(Error::Config("text-only needs the text modality".into()));
                }
            }
            FusionVariant::GateTrm | FusionVariant::GateConcat => {
                if self.modalities.len() < 2 {
                    return Err(Error::Config("gated fusion needs at least two modalities".into()));
                }
            }
            FusionVariant::TrmOnly | FusionVariant::ConcatOnly => {
                if self.modalities.is_empty() {
                    return Err(Error::Config("no modalities selected".into()));
                }
            }
        }
        if self.fusion_variant == FusionVariant::TrmOnly && self.fusion_d_h != self.d_model {
            return Err(Error::Config("trm-only fuses raw representations: fusion.d_h must equal d_model".into()));
        }
        if self.head_kind == HeadKind::Categorical && self.num_classes < 2 {
            return Err(Error::Config("head.num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Modalities whose hierarchical encoders actually run.
    pub fn active_modalities(&self) -> ModalitySet {
        if self.fusion_variant == FusionVariant::TextOnly {
            ModalitySet {
                text: true,
                visual: false,
                acoustic: false,
            }
        } else {
            self.modalities
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            d_model: 16,
            fusion_d_h: 8,
            heads: 2,
            fusion_heads: 2,
            fusion_variant: FusionVariant::GateConcat,
            modalities: "t,a".parse().unwrap(),
            policy: MaskPolicy::from_short("fdd").unwrap(),
            ..ModelConfig::default()
        };
        let text = cfg.to_kv().to_string();
        let back = ModelConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parses_comments_and_rejects_garbage() {
        let kv = KvConfig::parse("# comment\nd_model = 8 # inline\n\nheads=2\n").unwrap();
        assert_eq!(kv.get::<usize>("d_model").unwrap(), Some(8));
        assert!(KvConfig::parse("novalue\n").is_err());
        assert!(kv.get::<bool>("d_model").is_err());
    }

    #[test]
    fn validation_catches_bad_widths() {
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            modalities: "t".parse().unwrap(),
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            max_seq_len: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn modality_set_forms() {
        let a: ModalitySet = "tva".parse().unwrap();
        let b: ModalitySet = "text,visual,acoustic".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "t,v,a");
        assert!("x".parse::<ModalitySet>().is_err());
    }
}
