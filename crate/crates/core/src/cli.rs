//! The `hoiq` command line: generate, distill-labels, train, detect, eval,
//! ablate. Every command writes a JSON snapshot of its resolved settings next
//! to its outputs.
//!
//! Exit codes: 0 success, 1 invalid settings, 2 file or parse error,
//! 3 non-finite loss.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{category_counts, oracle_detect, read_dataset, write_dataset, Scene, Vocabulary, RARE_THRESHOLD};
use crate::detector::{read_predictions, write_predictions};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::experiment::{generate_splits, run_arm, ArmResult, BenchmarkConfig, Splits};
use crate::pdqd::{make_pseudo_labels, read_pseudo_label_cache, write_pseudo_label_cache};
use crate::textbank::{read_vocab_file, write_vocab_file, PromptTemplate};
use crate::train::{load_model, predict, prepare_samples, RunPaths, TrainData, Trainer};

pub const TRAIN_FILE: &str = "train.hoi";
pub const VAL_FILE: &str = "val.hoi";
pub const TEST_FILE: &str = "test.hoi";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const RARE_FILE: &str = "rare.tsv";
pub const LABELS_FILE: &str = "pseudo_labels.tsv";

#[derive(Parser, Debug)]
#[command(name = "hoiq", version, about = "Semantic query initialisation for HOI detection on a synthetic benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train/val/test scene files, the vocabulary and the Rare manifest.
    Generate(GenerateArgs),
    /// Run the oracle detector over the training split and cache pseudo-labels.
    DistillLabels(DistillArgs),
    /// Train a model; appends per-epoch metrics and saves checkpoints.
    Train(TrainArgs),
    /// Run a checkpoint over a split and write predictions.
    Detect(DetectArgs),
    /// Score a prediction file against a split.
    Eval(EvalArgs),
    /// Train one model per grid cell and tabulate test mAP.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Benchmark config JSON (vocabulary, split sizes, model, optimiser).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub no_actor: bool,
    #[arg(long)]
    pub no_pdqd: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

impl Overrides {
    /// Loads `--config` (or the defaults) and applies the flags on top.
    pub fn resolve(&self) -> Result<BenchmarkConfig> {
        let mut b = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse { path: p.display().to_string(), line: e.line(), msg: e.to_string() })?
            }
            None => BenchmarkConfig::default(),
        };
        let m = &mut b.train.model;
        if let Some(s) = self.seed {
            m.seed = s;
            b.train.shuffle_seed = s;
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.lambda1, self.lambda1);
        set(&mut m.lambda2, self.lambda2);
        set(&mut m.gamma1, self.gamma1);
        set(&mut m.gamma2, self.gamma2);
        if let Some(t) = &self.template {
            PromptTemplate::by_name(t)?;
            m.template = t.clone();
        }
        m.use_actor &= !self.no_actor;
        m.use_pdqd &= !self.no_pdqd;
        if let Some(e) = self.epochs {
            b.train.epochs = e;
        }
        set(&mut b.train.lr, self.lr);
        if let Some(p) = self.patience {
            b.train.patience = p;
        }
        b.train.validate()?;
        Ok(b)
    }
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train_scenes: Option<usize>,
    #[arg(long)]
    pub val_scenes: Option<usize>,
    #[arg(long)]
    pub test_scenes: Option<usize>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Args, Debug, Clone)]
pub struct DistillArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<data>/pseudo_labels.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for metrics, checkpoints and the snapshot.
    #[arg(long)]
    pub out: PathBuf,
    /// Pseudo-label cache; defaults to `<data>/pseudo_labels.tsv` when present.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Continue from `<out>/last.json`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_FILE,
            Split::Val => VAL_FILE,
            Split::Test => TEST_FILE,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Report stem; `.tsv` and `.json` are appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// ACTOR and PDQD each on or off.
    Modules,
    /// λ₁, λ₂ ∈ {1, 0.1}.
    Lambda,
    /// γ₁, γ₂ ∈ {1, 0.1}.
    Gamma,
    /// The four builtin prompt templates.
    Template,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: Grid,
    /// Dataset directory; without it, splits are generated from `--seed`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Overrides,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

/// Runs one command; returns the lines it would print.
pub fn run(command: Command) -> Result<Vec<String>> {
    match command {
        Command::Generate(a) => cmd_generate(&a),
        Command::DistillLabels(a) => cmd_distill(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn write_snapshot(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Snapshot path for a single-file output: `<file>.config.json`.
fn sidecar(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    file.with_file_name(name)
}

fn parent_dir(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn load_vocab(data: &Path) -> Result<Vocabulary> {
    Vocabulary::from_pairs(&read_vocab_file(&data.join(VOCAB_FILE))?)
}

pub fn load_split(data: &Path, split: Split) -> Result<Vec<Scene>> {
    read_dataset(&data.join(split.file()))
}

pub fn rare_manifest(vocab: &Vocabulary, counts: &[usize]) -> String {
    let mut s = String::from("category\tverb\tobject\ttrain_count\trare\n");
    for (id, &n) in counts.iter().enumerate() {
        let (v, o) = vocab.category(id);
        s.push_str(&format!("{id}\t{}\t{}\t{n}\t{}\n", vocab.verbs[v], vocab.objects[o], u8::from(n < RARE_THRESHOLD)));
    }
    s
}

#[derive(Serialize)]
struct GenerateSnapshot<'a> {
    command: &'static str,
    master_seed: u64,
    benchmark: &'a BenchmarkConfig,
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<Vec<String>> {
    let mut bench = a.common.resolve()?;
    bench.train_scenes = a.train_scenes.unwrap_or(bench.train_scenes);
    bench.val_scenes = a.val_scenes.unwrap_or(bench.val_scenes);
    bench.test_scenes = a.test_scenes.unwrap_or(bench.test_scenes);
    bench.vocab.validate()?;
    let seed = a.common.seed.unwrap_or(0);
    let Splits { train, val, test } = generate_splits(seed, &bench)?;
    let vocab = bench.vocab.vocabulary();
    create_dir(&a.out)?;
    write_dataset(&a.out.join(TRAIN_FILE), &train)?;
    write_dataset(&a.out.join(VAL_FILE), &val)?;
    write_dataset(&a.out.join(TEST_FILE), &test)?;
    write_vocab_file(&a.out.join(VOCAB_FILE), &vocab.pairs())?;
    let rare = a.out.join(RARE_FILE);
    fs::write(&rare, rare_manifest(&vocab, &category_counts(&train, &vocab))).map_err(|e| Error::io(&rare, e))?;
    write_snapshot(&a.out.join("config.json"), &GenerateSnapshot { command: "generate", master_seed: seed, benchmark: &bench })?;
    Ok(vec![format!(
        "wrote {} train, {} val, {} test scenes to {}",
        train.len(),
        val.len(),
        test.len(),
        a.out.display()
    )])
}

#[derive(Serialize)]
struct DistillSnapshot<'a> {
    command: &'static str,
    data: &'a Path,
    tau: f64,
    noise: crate::data::NoiseConfig,
}

pub fn cmd_distill(a: &DistillArgs) -> Result<Vec<String>> {
    let bench = a.common.resolve()?;
    let tau = a.tau.unwrap_or(bench.train.tau);
    let vocab = load_vocab(&a.data)?;
    let scenes = load_split(&a.data, Split::Train)?;
    let rows = scenes
        .iter()
        .map(|s| {
            let dets: Vec<(usize, f64)> = oracle_detect(s, &bench.train.noise).iter().map(|d| (d.class, d.confidence)).collect();
            Ok((s.image_id, make_pseudo_labels(&dets, vocab.objects.len(), tau)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = a.out.clone().unwrap_or_else(|| a.data.join(LABELS_FILE));
    parent_dir(&out)?;
    write_pseudo_label_cache(&out, &rows)?;
    write_snapshot(&sidecar(&out), &DistillSnapshot { command: "distill-labels", data: &a.data, tau, noise: bench.train.noise })?;
    Ok(vec![format!("wrote pseudo-labels for {} scenes to {}", rows.len(), out.display())])
}

pub fn cmd_train(a: &TrainArgs) -> Result<Vec<String>> {
    let bench = a.common.resolve()?;
    let vocab = load_vocab(&a.data)?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    let paths = RunPaths::new(&a.out);
    let mut trainer = if a.resume {
        let mut t = Trainer::load_checkpoint(&paths.last(), &vocab)?;
        t.config.epochs = bench.train.epochs;
        t
    } else {
        Trainer::new(bench.train.clone(), &vocab)?
    };
    let config = trainer.config.clone();
    let labels = a.labels.clone().or_else(|| Some(a.data.join(LABELS_FILE)).filter(|p| p.exists()));
    let data = match &labels {
        Some(p) => TrainData::with_labels(vocab, &train, &read_pseudo_label_cache(p, config.model.n_objects, config.tau)?, val, &config)?,
        None => TrainData::new(vocab, &train, val, &config)?,
    };
    trainer.fit(&data, Some(&paths))?;
    let conv = crate::train::convergence_epoch(&trainer.history);
    let mut lines = vec![format!("trained to epoch {} (best val mAP {:.4})", trainer.epoch, trainer.best_map)];
    if let Some(c) = conv {
        lines.push(format!("convergence epoch {c}"));
    }
    lines.push(format!("metrics {}", paths.metrics().display()));
    lines.push(format!("checkpoint {}", paths.best().display()));
    Ok(lines)
}

#[derive(Serialize)]
struct DetectSnapshot<'a> {
    command: &'static str,
    checkpoint: &'a Path,
    data: &'a Path,
    split: Split,
}

pub fn cmd_detect(a: &DetectArgs) -> Result<Vec<String>> {
    let vocab = load_vocab(&a.data)?;
    let scenes = load_split(&a.data, a.split)?;
    let model = load_model(&a.checkpoint, &vocab)?;
    let samples = prepare_samples(&scenes, &model.config, &crate::data::NoiseConfig::off(), crate::pdqd::DEFAULT_TAU)?;
    let records = predict(&model, &samples)?;
    parent_dir(&a.out)?;
    write_predictions(&a.out, &records)?;
    write_snapshot(&sidecar(&a.out), &DetectSnapshot { command: "detect", checkpoint: &a.checkpoint, data: &a.data, split: a.split })?;
    Ok(vec![format!("wrote predictions for {} images to {}", records.len(), a.out.display())])
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    command: &'static str,
    pred: &'a Path,
    data: &'a Path,
    split: Split,
    rare_threshold: usize,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<String>> {
    let vocab = load_vocab(&a.data)?;
    let scenes = load_split(&a.data, a.split)?;
    let counts = category_counts(&load_split(&a.data, Split::Train)?, &vocab);
    let preds = read_predictions(&a.pred)?;
    let report = evaluate(&preds, &scenes, &vocab, &counts, RARE_THRESHOLD)?;
    parent_dir(&a.out)?;
    let (tsv, json) = report.write(&a.out)?;
    write_snapshot(
        &sidecar(&a.out),
        &EvalSnapshot { command: "eval", pred: &a.pred, data: &a.data, split: a.split, rare_threshold: RARE_THRESHOLD },
    )?;
    Ok(vec![
        format!(
            "mAP full {:.4} rare {:.4} nonrare {:.4}",
            report.map_full, report.map_rare, report.map_nonrare
        ),
        format!("report {}", tsv.display()),
        format!("report {}", json.display()),
    ])
}

/// One ablation cell: a label and the model settings it changes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub label: String,
    pub config: crate::detector::ModelConfig,
}

pub fn grid_cells(grid: Grid, base: &crate::detector::ModelConfig) -> Vec<Cell> {
    let cell = |label: String, config| Cell { label, config };
    let pairs = [(1.0, 1.0), (1.0, 0.1), (0.1, 1.0), (0.1, 0.1)];
    match grid {
        Grid::Modules => [(false, false, "baseline"), (true, false, "actor"), (false, true, "pdqd"), (true, true, "actor+pdqd")]
            .into_iter()
            .map(|(a, p, l)| cell(l.into(), crate::detector::ModelConfig { use_actor: a, use_pdqd: p, ..base.clone() }))
            .collect(),
        Grid::Lambda => pairs
            .iter()
            .map(|&(l1, l2)| cell(format!("lambda1={l1}/lambda2={l2}"), crate::detector::ModelConfig { lambda1: l1, lambda2: l2, ..base.clone() }))
            .collect(),
        Grid::Gamma => pairs
            .iter()
            .map(|&(g1, g2)| cell(format!("gamma1={g1}/gamma2={g2}"), crate::detector::ModelConfig { gamma1: g1, gamma2: g2, ..base.clone() }))
            .collect(),
        Grid::Template => PromptTemplate::builtin()
            .into_iter()
            .map(|t| cell(t.name.clone(), crate::detector::ModelConfig { template: t.name, ..base.clone() }))
            .collect(),
    }
}

pub const ABLATE_COLUMNS: &str = "cell\tmap_full\tmap_rare\tmap_nonrare\tconvergence_epoch";

pub fn ablation_table(results: &[ArmResult]) -> String {
    let mut s = format!("{ABLATE_COLUMNS}\n");
    for r in results {
        let conv = r.convergence_epoch.map_or_else(|| "-".to_string(), |c| c.to_string());
        s.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\t{conv}\n", r.label, r.test.map_full, r.test.map_rare, r.test.map_nonrare));
    }
    s
}

#[derive(Serialize)]
struct AblateSnapshot<'a> {
    command: &'static str,
    grid: Grid,
    seed: u64,
    data: Option<&'a Path>,
    benchmark: &'a BenchmarkConfig,
    cells: &'a [Cell],
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<String>> {
    let bench = a.common.resolve()?;
    let seed = bench.train.model.seed;
    let splits = match &a.data {
        Some(d) => Splits { train: load_split(d, Split::Train)?, val: load_split(d, Split::Val)?, test: load_split(d, Split::Test)? },
        None => generate_splits(seed, &bench)?,
    };
    if let Some(d) = &a.data {
        let vocab = load_vocab(d)?;
        if vocab != bench.vocab.vocabulary() {
            return Err(Error::Validation("dataset vocabulary differs from the benchmark config".into()));
        }
    }
    let cells = grid_cells(a.grid, &bench.train.model);
    create_dir(&a.out)?;
    write_snapshot(
        &a.out.join("config.json"),
        &AblateSnapshot { command: "ablate", grid: a.grid, seed, data: a.data.as_deref(), benchmark: &bench, cells: &cells },
    )?;
    let mut results = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let paths = RunPaths::new(a.out.join(format!("cell{i}")));
        results.push(run_arm(&c.label, seed, &c.config, &splits, &bench, Some(&paths))?);
    }
    let table = ablation_table(&results);
    let tsv = a.out.join("ablation.tsv");
    fs::write(&tsv, &table).map_err(|e| Error::io(&tsv, e))?;
    let json = a.out.join("ablation.json");
    write_snapshot(&json, &results)?;
    let mut lines: Vec<String> = table.lines().map(str::to_string).collect();
    lines.push(format!("report {}", tsv.display()));
    Ok(lines)
}
