//! Fusion-variant by context-policy grid with identical seeds and schedule
//! for every cell.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{FusionVariant, HeadKind, MaskPolicy, ModelConfig};
use crate::conversation::{Conversation, Dataset};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::train::{evaluate, evaluate_conversations, mean_std, run_configs, train, TrainConfig};

/// One grid cell: a fusion variant, optionally with its own mask policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridEntry {
    pub variant: FusionVariant,
    pub policy: Option<MaskPolicy>,
}

impl FromStr for GridEntry {
    type Err = Error;

    /// `gate+trm` or `gate+trm:dff`.
    fn from_str(s: &str) -> Result<Self> {
        let (variant, policy) = match s.split_once(':') {
            Some((v, p)) => (v, Some(MaskPolicy::from_short(p)?)),
            None => (s, None),
        };
        Ok(GridEntry {
            variant: variant.trim().parse()?,
            policy,
        })
    }
}

impl fmt::Display for GridEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.policy {
            Some(p) => write!(f, "{}:{}", self.variant, p.short()),
            None => write!(f, "{}", self.variant),
        }
    }
}

/// Comma-separated grid entries.
pub fn parse_grid(s: &str) -> Result<Vec<GridEntry>> {
    let grid = s
        .split(',')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<GridEntry>>>()?;
    if grid.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub entry: String,
    pub variant: String,
    pub policy: String,
    /// Weighted F1 for categorical heads, mean Pearson R for continuous ones.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub metric: String,
    pub runs: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, entry: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.entry == entry)
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.entry.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:width$}  {:>8}  {:>8}  runs\n", "variant", self.metric, "std");
        for r in &self.rows {
            let _ = writeln!(s, "{:width$}  {:>8.4}  {:>8.4}  {}", r.entry, r.mean, r.std, r.scores.len());
        }
        s
    }
}

fn score(kind: HeadKind, report: &EvalReport) -> f64 {
    match kind {
        HeadKind::Categorical => report.weighted_f1,
        HeadKind::Continuous => {
            let r = report.pearson_r.as_deref().unwrap_or(&[]);
            r.iter().sum::<f64>() / r.len().max(1) as f64
        }
    }
}

/// Trains every grid entry `runs` times and scores the best-validation
/// checkpoint on `test` (or on the validation split when `test` is absent).
pub fn ablate(
    grid: &[GridEntry],
    train_cfg: &TrainConfig,
    base: &ModelConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    runs: usize,
) -> Result<AblationTable> {
    if runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for entry in grid {
        let cfg = ModelConfig {
            fusion_variant: entry.variant,
            policy: entry.policy.unwrap_or(base.policy),
            ..*base
        };
        cfg.validate()?;
        let mut scores = Vec::with_capacity(runs);
        let mut reports = Vec::with_capacity(runs);
        for run in 0..runs {
            let (tc, mc) = run_configs(train_cfg, &cfg, run);
            let out = train(&tc, &mc, data, None)?;
            let report = match test {
                Some(t) => evaluate(&out.best, t)?,
                None if !out.val_indices.is_empty() => {
                    let val: Vec<&Conversation> = out.val_indices.iter().map(|&i| &data.conversations[i]).collect();
                    evaluate_conversations(&out.best, &val)?
                }
                None => evaluate(&out.best, data)?,
            };
            let s = score(cfg.head_kind, &report);
            log::info!("{entry} run {run}: {s:.4}");
            scores.push(s);
            reports.push(report);
        }
        let (mean, std) = mean_std(&scores);
        rows.push(AblationRow {
            entry: entry.to_string(),
            variant: entry.variant.to_string(),
            policy: cfg.policy.short(),
            scores,
            mean,
            std,
            reports,
        });
    }
    Ok(AblationTable {
        metric: match base.head_kind {
            HeadKind::Categorical => "w-f1".into(),
            HeadKind::Continuous => "mean-r".into(),
        },
        runs,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ContextPreference;
    use crate::synth::{generate, RuleKind, SynthSpec};

    #[test]
    fn grid_parsing() {
        let g = parse_grid("gate+trm:dff, text-only,concat-only:fff").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[0].policy.unwrap().text, ContextPreference::Dependent);
        assert_eq!(g[1].policy, None);
        assert_eq!(g[2].to_string(), "concat-only:fff");
        assert!(parse_grid("gate").is_err());
        assert!(parse_grid("gate+trm:dx").is_err());
        assert!(parse_grid(" , ").is_err());
    }

    #[test]
    fn repeated_entry_scores_identically() {
        let spec = SynthSpec {
            rule: RuleKind::ModalInstant,
            conversations: 4,
            turns: 4,
            vocab_size: 16,
            d_visual: 4,
            d_acoustic: 3,
            modal_classes: 3,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap().0;
        let base = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            d_visual: 4,
            d_acoustic: 3,
            max_seq_len: 12,
            context_window: 2,
            n_branch: 1,
            n_backbone: 1,
            heads: 2,
            ffn_mult: 2,
            fusion_layers: 1,
            fusion_heads: 2,
            fusion_d_h: 8,
            num_classes: 3,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup_steps: 1,
            epochs: 2,
            batch_size: 2,
            val_ratio: 0.0,
            ..TrainConfig::default()
        };
        let grid = parse_grid("text-only,text-only,gate+concat:fff").unwrap();
        let t = ablate(&grid, &cfg, &base, &data, Some(&data), 2).unwrap();
        assert_eq!(t.rows[0].scores, t.rows[1].scores);
        assert_eq!(t.rows[2].policy, "fff");
        assert!(t.render().lines().count() == 4);
    }
}
