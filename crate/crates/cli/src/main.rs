use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dtrm_core::ablate::{ablate, parse_grid};
use dtrm_core::config::{ContextPreference, KvConfig, Modality, ModelConfig};
use dtrm_core::conversation::{Conversation, Dataset, Expression, Label, LabelKind};
use dtrm_core::encoders::read_vocab;
use dtrm_core::hierarchical::{backbone_mask, BranchLayout};
use dtrm_core::model::DialogueTrm;
use dtrm_core::numeric::Mask;
use dtrm_core::synth::{write_dataset, RuleKind, SynthSpec};
use dtrm_core::train::{evaluate, log_csv, mean_std, run_configs, train, TrainConfig};

#[derive(Parser)]
#[command(name = "dtrm", version, about = "Multimodal emotion recognition in conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted rule.
    GenData(GenData),
    /// Train a model from a key=value config.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and score a grid of fusion variants and mask policies.
    Ablate(AblateArgs),
    /// Print an attention mask as a 0/1 grid.
    InspectMask(InspectArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    rule: RuleKind,
    /// Number of conversations.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Turns per conversation.
    #[arg(long = "L", default_value_t = 10)]
    turns: usize,
    /// Speakers per conversation.
    #[arg(long = "N", default_value_t = 2)]
    speakers: usize,
    /// Dependency lag of the text_context rule.
    #[arg(long = "K", default_value_t = 1)]
    lag: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    d_visual: usize,
    #[arg(long, default_value_t = 16)]
    d_acoustic: usize,
    /// Classes of the modal_instant rule.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value file with model and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Repeat with seeds offset by the run index and report mean and std.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated `variant[:policy]` entries, e.g. `gate+trm:dff,text-only`.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the table and JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Held-out dataset to score on; the validation split is used otherwise.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Branch,
    Backbone,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    policy: ContextPreference,
    /// 1-based target turn.
    #[arg(long)]
    turn: usize,
    /// Context window.
    #[arg(long = "K", default_value_t = 3)]
    window: usize,
    #[arg(long, value_enum, default_value = "branch")]
    level: Level,
    /// Speaker of each turn when no dataset is given.
    #[arg(long, default_value = "1,1,2,1,3,2,1,2", value_delimiter = ',')]
    speakers: Vec<usize>,
    /// Tokens per turn when no dataset is given.
    #[arg(long, default_value_t = 2)]
    tokens: usize,
    /// Take the conversation from this dataset instead.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Conversation index within `--data`.
    #[arg(long, default_value_t = 0)]
    conv: usize,
    /// Row lengths come from this modality (visual and acoustic are one row per turn).
    #[arg(long, default_value = "text")]
    modality: Modality,
    #[arg(long, default_value_t = 512)]
    max_seq_len: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::InspectMask(a) => inspect(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = SynthSpec {
        rule: a.rule,
        conversations: a.n,
        turns: a.turns,
        speakers: a.speakers,
        lag: a.lag,
        seed: a.seed,
        vocab_size: a.vocab,
        d_visual: a.d_visual,
        d_acoustic: a.d_acoustic,
        modal_classes: a.classes,
        noise: a.noise,
        ..SynthSpec::default()
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let m = write_dataset(&spec, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} conversations ({} utterances, {} classes) to {}; text-only ceiling {:.3}",
        spec.conversations,
        m.num_utterances,
        m.num_classes,
        a.out.display(),
        m.text_free_ceiling
    );
    Ok(())
}

fn load_kv(config: Option<&Path>, overrides: &[String]) -> Result<KvConfig> {
    let mut kv = match config {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KvConfig::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn sidecar(data: &Path, suffix: &str) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// Fills data-dependent keys the config leaves out.
fn infer_from_data(kv: &mut KvConfig, data: &Dataset, path: &Path) -> Result<()> {
    let exprs: Vec<&Expression> = data.conversations.iter().flat_map(|c| c.expressions()).collect();
    let first = exprs.first().context("dataset has no utterances")?;
    let mut fill = |key: &str, value: String| {
        if kv.get_str(key).is_none() {
            log::info!("{key} = {value} (from data)");
            kv.set(key, value);
        }
    };
    fill("d_visual", first.visual.len().to_string());
    fill("d_acoustic", first.acoustic.len().to_string());
    let vocab = match read_vocab(sidecar(path, ".vocab.txt")) {
        Ok(v) => v.len(),
        Err(_) => exprs.iter().flat_map(|e| e.text.iter().copied()).max().unwrap_or(0) + 1,
    };
    fill("vocab_size", vocab.to_string());
    match data.label_kind() {
        Some(LabelKind::Categorical) => {
            let classes = exprs
                .iter()
                .filter_map(|e| match e.label {
                    Label::Categorical(c) => Some(c),
                    Label::Continuous(_) => None,
                })
                .max()
                .unwrap_or(0)
                + 1;
            fill("head.kind", "categorical".into());
            fill("head.num_classes", classes.to_string());
        }
        Some(LabelKind::Continuous) => fill("head.kind", "continuous".into()),
        None => {}
    }
    Ok(())
}

fn read_data(path: &Path) -> Result<Dataset> {
    Dataset::read_jsonl(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn configs(config: Option<&Path>, overrides: &[String], data: &Dataset, data_path: &Path) -> Result<(KvConfig, TrainConfig, ModelConfig)> {
    let mut kv = load_kv(config, overrides)?;
    infer_from_data(&mut kv, data, data_path)?;
    let tc = TrainConfig::from_kv(&kv)?;
    let mc = ModelConfig::from_kv(&kv)?;
    Ok((kv, tc, mc))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    if a.runs == 0 {
        bail!("--runs must be positive");
    }
    let data = read_data(&a.data)?;
    let (_, tc, mc) = configs(a.config.as_deref(), &a.overrides, &data, &a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut scores = Vec::new();
    for run in 0..a.runs {
        let dir = if a.runs == 1 { a.out.clone() } else { a.out.join(format!("run{run}")) };
        fs::create_dir_all(&dir)?;
        let (tc, mc) = run_configs(&tc, &mc, run);
        let mut effective = mc.to_kv();
        effective.extend(&tc.to_kv());
        fs::write(dir.join("config.txt"), effective.to_string())?;
        let out = train(&tc, &mc, &data, Some(&dir))?;
        out.model.save(dir.join("final.ckpt"))?;
        out.best.save(dir.join("best.ckpt"))?;
        fs::write(dir.join("train_log.csv"), log_csv(&out.steps))?;
        fs::write(dir.join("epochs.json"), serde_json::to_string_pretty(&out.epochs)? + "\n")?;
        let best = out.epochs[out.best_epoch - 1].val_score;
        println!(
            "run {run}: {} steps, final train loss {:.5}, best epoch {} (validation score {})",
            out.steps.len(),
            out.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            out.best_epoch,
            best.map_or("n/a".into(), |s| format!("{s:.4}"))
        );
        if let Some(s) = best {
            scores.push(s);
        }
    }
    if a.runs > 1 && !scores.is_empty() {
        let (mean, std) = mean_std(&scores);
        println!("validation score over {} runs: {mean:.4} ± {std:.4}", scores.len());
        let summary = serde_json::json!({ "scores": scores, "mean": mean, "std": std });
        fs::write(a.out.join("runs.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = DialogueTrm::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let data = read_data(&a.data)?;
    let report = evaluate(&model, &data)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        fs::write(p, json.clone() + "\n")?;
    }
    if a.json {
        println!("{json}");
        return Ok(());
    }
    if !report.per_class.is_empty() {
        println!("{:>5}  {:>7}  {:>9}  {:>6}  {:>7}", "class", "support", "precision", "recall", "f1");
        for (c, s) in &report.per_class {
            println!("{c:>5}  {:>7}  {:>9.4}  {:>6.4}  {:>7.4}", s.support, s.precision, s.accuracy, s.f1);
        }
        println!("weighted acc {:.4}  weighted f1 {:.4}", report.weighted_acc, report.weighted_f1);
    }
    if let Some(r) = &report.pearson_r {
        let names = ["valence", "arousal", "expectancy", "power"];
        for (n, v) in names.iter().zip(r) {
            println!("{n:>10}  r = {v:.4}");
        }
    }
    if let Some(l) = report.loss {
        println!("loss {l:.5}");
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let data = read_data(&a.data)?;
    let test = a.test.as_deref().map(read_data).transpose()?;
    let (_, tc, mc) = configs(a.config.as_deref(), &a.overrides, &data, &a.data)?;
    let table = ablate(&grid, &tc, &mc, &data, test.as_ref(), a.runs)?;
    fs::create_dir_all(&a.out)?;
    let rendered = table.render();
    fs::write(a.out.join("ablation.txt"), &rendered)?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    print!("{rendered}");
    Ok(())
}

fn print_grid(mask: &Mask, labels: &[String]) {
    let w = labels.iter().map(String::len).max().unwrap_or(1);
    for (i, label) in labels.iter().enumerate() {
        let row: Vec<&str> = (0..mask.cols()).map(|j| if mask.allowed(i, j) { "1" } else { "0" }).collect();
        println!("{label:>w$}  {}", row.join(" "));
    }
}

fn inspect(a: InspectArgs) -> Result<()> {
    let conv = match &a.data {
        Some(p) => {
            let data = read_data(p)?;
            data.conversations
                .get(a.conv)
                .with_context(|| format!("{} has {} conversations", p.display(), data.conversations.len()))?
                .clone()
        }
        None => {
            let exprs = a
                .speakers
                .iter()
                .enumerate()
                .map(|(k, &speaker)| Expression {
                    turn: k + 1,
                    speaker,
                    text: vec![0; a.tokens.max(1)],
                    visual: vec![0.0],
                    acoustic: vec![0.0],
                    label: Label::Categorical(0),
                })
                .collect();
            Conversation::new("inspect", exprs)?
        }
    };
    let rows_of = |turn: usize| -> Result<usize> {
        let e = conv.turn(turn)?;
        Ok(match a.modality {
            Modality::Text => e.text.len(),
            Modality::Visual | Modality::Acoustic => 1,
        })
    };
    match a.level {
        Level::Branch => {
            let ctx = conv.individual_turns(a.turn, a.window)?;
            let lens = ctx.iter().map(|&t| rows_of(t)).collect::<Result<Vec<_>>>()?;
            let layout = BranchLayout::new(rows_of(a.turn)?, &lens, a.policy, a.max_seq_len)?;
            let mut labels = vec!["[CLS]".to_string()];
            labels.extend((0..layout.target_len).map(|_| format!("x{}", a.turn)));
            labels.push("[SEP]".into());
            for &k in &layout.kept_context {
                labels.extend((0..lens[k]).map(|_| format!("x{}", ctx[k])));
            }
            println!(
                "branch mask, target turn {} (speaker {}), individual context {:?}, policy {}",
                a.turn,
                conv.turn(a.turn)?.speaker,
                ctx,
                a.policy
            );
            print_grid(&layout.mask, &labels);
        }
        Level::Backbone => {
            let ctx = conv.conversational_turns(a.turn, a.window)?;
            let mask = backbone_mask(ctx.len() + 1, a.policy);
            let labels: Vec<String> = ctx.iter().chain([&a.turn]).map(|t| format!("x{t}")).collect();
            println!("backbone mask, target turn {}, conversational context {:?}, policy {}", a.turn, ctx, a.policy);
            print_grid(&mask, &labels);
        }
    }
    Ok(())
}
