//! Minibatch training with AdamW and a linear warmup/decay schedule, plus
//! evaluation and multi-run summaries.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HeadKind, KvConfig, ModelConfig};
use crate::conversation::{Conversation, Dataset, Label, CONTINUOUS_DIMS};
use crate::discriminator::{self, Prediction};
use crate::error::{Error, Result};
use crate::metrics::{pearson_per_dim, weighted_scores, EvalReport};
use crate::model::DialogueTrm;
use crate::numeric::{ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub epochs: usize,
    /// Conversations per step.
    pub batch_size: usize,
    /// Seed for the validation split and batch order.
    pub seed: u64,
    /// Fraction of conversations held out for checkpoint selection.
    pub val_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            val_ratio: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_ratio) {
            return Err(Error::Config("val_ratio must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config("weight_decay must be >= 0 and adam_eps > 0".into()));
        }
        Ok(())
    }

    /// Reads `lr`, `warmup_steps`, `weight_decay`, `betas` (`b1,b2`),
    /// `adam_eps`, `epochs`, `batch_size`, `seed` and `val_ratio`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let betas = match kv.get_str("betas") {
            Some(s) => {
                let parts: Vec<&str> = s.split(',').map(str::trim).collect();
                match parts.as_slice() {
                    [a, b] => (
                        a.parse().map_err(|_| Error::Config(format!("bad beta {a:?}")))?,
                        b.parse().map_err(|_| Error::Config(format!("bad beta {b:?}")))?,
                    ),
                    _ => return Err(Error::Config(format!("betas must be two numbers, got {s:?}"))),
                }
            }
            None => d.betas,
        };
        let cfg = TrainConfig {
            lr: kv.get_or("lr", d.lr)?,
            warmup_steps: kv.get_or("warmup_steps", d.warmup_steps)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            betas,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seed: kv.get_or("seed", d.seed)?,
            val_ratio: kv.get_or("val_ratio", d.val_ratio)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("lr", self.lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("betas", format!("{},{}", self.betas.0, self.betas.1));
        kv.set("adam_eps", self.adam_eps);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("val_ratio", self.val_ratio);
        kv
    }
}

/// Linear warmup to `peak` over `warmup` updates, then linear decay reaching
/// zero at update `total`. Updates are counted from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    /// Rate for the update that follows `step` completed updates.
    pub fn at(&self, step: usize) -> f64 {
        let k = step + 1;
        if k <= self.warmup {
            self.peak * (k as f64 / self.warmup as f64)
        } else if k >= self.total {
            0.0
        } else {
            self.peak * ((self.total - k) as f64 / (self.total - self.warmup) as f64)
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        AdamW {
            betas,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Parameters without a gradient only receive weight decay.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = if store.decays(id) { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let (data, grad) = store.get_mut(id).data_and_grad_mut();
            for i in 0..data.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps) + decay * data[i];
                data[i] -= lr * update;
            }
        }
    }
}

/// Seeded split into (train, validation) conversation indices.
pub fn split_indices(n: usize, val_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_ratio).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Weighted F1 (categorical) or loss (continuous) on the validation split.
    pub val_score: Option<f64>,
}

pub fn log_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in log {
        let _ = writeln!(s, "{},{:e},{}", r.step, r.lr, r.loss);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DialogueTrm,
    pub best: DialogueTrm,
    pub best_epoch: usize,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

fn is_better(kind: HeadKind, candidate: f64, best: Option<f64>) -> bool {
    match best {
        None => true,
        Some(b) => match kind {
            HeadKind::Categorical => candidate > b,
            HeadKind::Continuous => candidate < b,
        },
    }
}

fn dump_batch(dir: &Path, step: usize, batch: &[&Conversation]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("nan_batch_step{step}.jsonl"));
    let mut s = String::new();
    for c in batch {
        s.push_str(&c.to_json_line()?);
        s.push('\n');
    }
    std::fs::write(&path, s)?;
    Ok(path)
}

/// Trains a fresh model built from `model_cfg`.
///
/// A non-finite batch loss aborts with [`Error::Numeric`]; when `dump_dir`
/// is given the offending batch is written there first.
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &Dataset, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_model(cfg, DialogueTrm::new(model_cfg)?, data, dump_dir)
}

pub fn train_model(cfg: &TrainConfig, mut model: DialogueTrm, data: &Dataset, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.conversations.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let kind = model.cfg().head_kind;
    let (train_idx, val_idx) = split_indices(data.conversations.len(), cfg.val_ratio, cfg.seed);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        peak: cfg.lr,
        warmup: cfg.warmup_steps,
        total: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(&model.store, cfg.betas, cfg.adam_eps, cfg.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let val_set: Vec<&Conversation> = val_idx.iter().map(|&i| &data.conversations[i]).collect();

    let mut steps = Vec::with_capacity(schedule.total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order = train_idx.clone();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_utts = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Conversation> = chunk.iter().map(|&i| &data.conversations[i]).collect();
            let n_utts: usize = batch.iter().map(|c| c.len()).sum();
            model.store.zero_grads();
            let mut batch_loss = 0.0;
            for conv in &batch {
                let mut tape = Tape::new();
                let (_, loss) = model.net.loss(&mut tape, &model.store, conv)?;
                let weighted = tape.scale(loss, conv.len() as f64 / n_utts as f64);
                batch_loss += tape.value(weighted).data()[0];
                if !batch_loss.is_finite() {
                    break;
                }
                tape.backward(weighted)?.accumulate_into(&mut model.store);
            }
            let lr = schedule.at(step);
            if !batch_loss.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|c| c.id.as_str()).collect();
                let mut msg = format!("loss {batch_loss} at step {step} (lr {lr:e}) in batch {ids:?}");
                if let Some(dir) = dump_dir {
                    let path = dump_batch(dir, step, &batch)?;
                    let _ = write!(msg, "; batch written to {}", path.display());
                }
                log::error!("{msg}");
                return Err(Error::Numeric(msg));
            }
            opt.step(&mut model.store, lr);
            log::debug!("step {step} lr {lr:e} loss {batch_loss:.6}");
            steps.push(StepLog {
                step,
                lr,
                loss: batch_loss,
            });
            epoch_loss += batch_loss * n_utts as f64;
            epoch_utts += n_utts;
            step += 1;
        }
        model.store.zero_grads();
        let val_score = if val_set.is_empty() {
            None
        } else {
            let report = evaluate_conversations(&model, &val_set)?;
            Some(match kind {
                HeadKind::Categorical => report.weighted_f1,
                HeadKind::Continuous => report.loss.unwrap_or(f64::INFINITY),
            })
        };
        let train_loss = epoch_loss / epoch_utts.max(1) as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.5} val {val_score:?}");
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_score,
        });
        let score = val_score.unwrap_or(-(epoch as f64));
        let candidate = if val_score.is_some() { score } else { f64::NAN };
        if val_score.is_none() || is_better(kind, candidate, best.as_ref().map(|b| b.0)) {
            best = Some((candidate, epoch, model.store.clone()));
        }
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: DialogueTrm {
            net: model.net.clone(),
            store: best_store,
        },
        model,
        best_epoch,
        steps,
        epochs,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// Metrics and mean loss of `model` over `convs`.
pub fn evaluate_conversations(model: &DialogueTrm, convs: &[&Conversation]) -> Result<EvalReport> {
    if convs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut preds: Vec<Prediction> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    for c in convs {
        preds.extend(model.predict(c)?);
        labels.extend(c.expressions().iter().map(|e| e.label.clone()));
    }
    let loss = discriminator::loss(&preds, &labels)?;
    let mut report = match model.cfg().head_kind {
        HeadKind::Categorical => {
            let p: Vec<usize> = preds.iter().map(|p| p.class().expect("categorical")).collect();
            let y = labels
                .iter()
                .map(|l| match l {
                    Label::Categorical(c) => Ok(*c),
                    Label::Continuous(_) => Err(Error::Config("continuous label for a categorical head".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            weighted_scores(&p, &y)?
        }
        HeadKind::Continuous => {
            let p: Vec<Vec<f64>> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Continuous { values } => values.to_vec(),
                    Prediction::Categorical { .. } => unreachable!("continuous head"),
                })
                .collect();
            let y: Vec<Vec<f64>> = labels
                .iter()
                .map(|l| match l {
                    Label::Continuous(v) => Ok(v.to_vec()),
                    Label::Categorical(_) => Err(Error::Config("categorical label for a continuous head".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            EvalReport {
                pearson_r: Some(pearson_per_dim(&p, &y, CONTINUOUS_DIMS)?),
                ..EvalReport::default()
            }
        }
    };
    report.loss = Some(loss);
    Ok(report)
}

pub fn evaluate(model: &DialogueTrm, data: &Dataset) -> Result<EvalReport> {
    let convs: Vec<&Conversation> = data.conversations.iter().collect();
    evaluate_conversations(model, &convs)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Configs of run `r` of a multi-run experiment: both seeds are offset by `r`.
pub fn run_configs(cfg: &TrainConfig, model_cfg: &ModelConfig, run: usize) -> (TrainConfig, ModelConfig) {
    let offset = run as u64;
    (
        TrainConfig {
            seed: cfg.seed.wrapping_add(offset),
            ..cfg.clone()
        },
        ModelConfig {
            seed: model_cfg.seed.wrapping_add(offset),
            ..model_cfg.clone()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionVariant;
    use crate::synth::{generate, RuleKind, SynthSpec};

    #[test]
    fn first_step_of_long_warmup() {
        let s = LrSchedule {
            peak: 6e-6,
            warmup: 1200,
            total: 10_000,
        };
        assert_eq!(s.at(0), 6e-6 * (1.0 / 1200.0));
    }

    #[test]
    fn schedule_peaks_at_warmup_and_ends_at_zero() {
        let s = LrSchedule {
            peak: 1.0,
            warmup: 10,
            total: 50,
        };
        let rates: Vec<f64> = (0..50).map(|k| s.at(k)).collect();
        let peak = rates.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, 1.0);
        assert_eq!(rates.iter().position(|&r| r == 1.0), Some(9));
        assert_eq!(rates[49], 0.0);
        // constant slopes on each side of the peak
        for k in 1..9 {
            assert!(((rates[k] - rates[k - 1]) - 0.1).abs() < 1e-12);
        }
        for k in 11..50 {
            assert!(((rates[k - 1] - rates[k]) - 1.0 / 40.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_warmup_starts_decaying() {
        let s = LrSchedule {
            peak: 2.0,
            warmup: 0,
            total: 4,
        };
        assert_eq!((0..4).map(|k| s.at(k)).collect::<Vec<_>>(), vec![1.5, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 2, crate::numeric::Init::Zeros, &mut rng);
        store.get_mut(w).accumulate_grad(&[0.5, -3.0]);
        let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-12, 0.0);
        opt.step(&mut store, 0.1);
        let d = store.get(w).data();
        assert!((d[0] + 0.1).abs() < 1e-9 && (d[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn adamw_decay_skips_norm_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 1, crate::numeric::Init::Uniform { fan_in: 1 }, &mut rng);
        let g = store.add("g", 1, 1, crate::numeric::Init::Ones, &mut rng);
        let w0 = store.get(w).data()[0];
        let mut opt = AdamW::new(&store, (0.9, 0.999), 1e-8, 0.5);
        opt.step(&mut store, 0.1);
        assert!((store.get(w).data()[0] - w0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(store.get(g).data()[0], 1.0);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(10, 0.2, 7);
        assert_eq!((t.len(), v.len()), (8, 2));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(10, 0.2, 7), (t, v));
        assert_eq!(split_indices(1, 0.5, 0).1.len(), 0);
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
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
            fusion_variant: FusionVariant::GateTrm,
            ..ModelConfig::default()
        }
    }

    fn small_data() -> Dataset {
        generate(&SynthSpec {
            rule: RuleKind::ModalInstant,
            conversations: 5,
            turns: 4,
            vocab_size: 16,
            d_visual: 4,
            d_acoustic: 3,
            modal_classes: 3,
            ..SynthSpec::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 2,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let data = small_data();
        let start = DialogueTrm::new(&small_model()).unwrap();
        let out = train_model(&cfg, start.clone(), &data, None).unwrap();
        assert_eq!(out.model.checkpoint().to_bytes(), start.checkpoint().to_bytes());
        assert_eq!(out.steps.len(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup_steps: 2,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let data = small_data();
        let a = train(&cfg, &small_model(), &data, None).unwrap();
        let b = train(&cfg, &small_model(), &data, None).unwrap();
        assert_eq!(a.model.checkpoint().to_bytes(), b.model.checkpoint().to_bytes());
        assert_eq!(a.steps, b.steps);
        assert_ne!(a.model.checkpoint().to_bytes(), DialogueTrm::new(&small_model()).unwrap().checkpoint().to_bytes());
        assert!(log_csv(&a.steps).starts_with("step,lr,loss\n0,"));
    }

    #[test]
    fn nan_loss_aborts_with_dump() {
        let data = small_data();
        let mut model = DialogueTrm::new(&small_model()).unwrap();
        let id = model.store.lookup("head.cat").unwrap();
        model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = train_model(&TrainConfig::default(), model, &data, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let dumped: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(dumped.len(), 1);
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig {
            lr: 6e-6,
            warmup_steps: 1200,
            betas: (0.8, 0.99),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut kv = KvConfig::default();
        kv.set("betas", "0.9");
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    proptest::proptest! {
        #[test]
        fn schedule_is_piecewise_linear(peak in 1e-6f64..1.0, warmup in 0usize..50, extra in 1usize..100) {
            let s = LrSchedule { peak, warmup, total: warmup + extra };
            let rates: Vec<f64> = (0..s.total).map(|k| s.at(k)).collect();
            let top = rates.iter().cloned().fold(0.0, f64::max);
            if warmup > 0 {
                proptest::prop_assert_eq!(rates[warmup - 1], peak);
            }
            proptest::prop_assert!(top <= peak);
            proptest::prop_assert_eq!(*rates.last().unwrap(), 0.0);
            // no jumps larger than one slope step
            let step = peak / warmup.max(1).min(extra) as f64;
            for w in rates.windows(2) {
                proptest::prop_assert!((w[1] - w[0]).abs() <= step * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn mean_std_of_runs() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
