//! Command-line front end. Each command except `count` writes a run
//! directory holding its artifacts and a `manifest.json` that records how
//! they were produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analyze::{export_features, gradient_sums, ChangeReport, ReportMeta};
use crate::bench::{self, BenchConfig, BenchSummary};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{checkpoint, DualEncoder, ModelConfig};
use crate::params::{count_trainable, diff, Grouping, Snapshot, Strategy};
use crate::report::write_csv;
use crate::synthdata::{self, generate, sample_shots, DatasetSpec, SyntheticDataset};
use crate::train::{
    evaluate, evaluate_split, finetune, pretrain, EvalResult, FinetuneOptions, PretrainConfig, PretrainReport,
    Regularizer, TrainConfig, TrainReport,
};

pub const MANIFEST: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.cfit";
const DEFAULT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "clipfit", version, about = "Selective fine-tuning of a miniature dual-encoder model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Contrastive pretraining from random init.
    Pretrain(PretrainArgs),
    /// Few-shot fine-tuning under a freeze strategy.
    Finetune(FinetuneArgs),
    /// Base-to-new evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Print the trainable scalar count of a strategy.
    Count(CountArgs),
    /// Change, gradient, or feature reports.
    Analyze(AnalyzeArgs),
    /// Full benchmark pipeline with a pass/fail line per check.
    Bench(BenchArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Run directory. Defaults to a name derived from command, seed and inputs under `runs/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset spec (JSON). Defaults to the committed benchmark.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory or `gen` run directory.
    #[arg(long)]
    pub data: PathBuf,
    /// `{"model": .., "pretrain": ..}` (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Preset name or path predicate such as `text.*.ffn.proj.bias`.
    #[arg(long, default_value = "clipfit")]
    pub strategy: String,
    /// Training config (JSON). Defaults to the benchmark recipe.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub shots: usize,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub regularizer: Option<Regularizer>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSelector {
    BaseToNew,
    Base,
    New,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "base-to-new")]
    pub split: SplitSelector,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Preset name (`toy`, `vit_b16_clip`) or a model config file.
    pub model: String,
    /// Preset name or path predicate.
    pub strategy: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Changes,
    Gradients,
    Features,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// A `finetune` run directory.
    #[arg(long, conflicts_with = "pair", required_unless_present = "pair")]
    pub run: Option<PathBuf>,
    /// Two checkpoints, before and after.
    #[arg(long, num_args = 2, value_names = ["BEFORE", "AFTER"])]
    pub pair: Option<Vec<PathBuf>>,
    #[arg(long, value_enum, default_value = "changes")]
    pub report: ReportKind,
    /// Dataset for feature export.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Benchmark config (JSON). Defaults to the committed benchmark.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

/// Provenance record written into every run directory. Holds no
/// timestamps or output location, so reruns produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, without `--out`.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub version: String,
}

/// Config file of `pretrain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainRun {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            pretrain: BenchConfig::committed().pretrain,
        }
    }
}

/// What `pretrain` writes to `pretrain_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub report: PretrainReport,
    pub zero_shot: EvalResult,
}

/// Exit status for an error: 2 for bad input or configuration, 3 for
/// numeric failure, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Config(_)
        | Error::Spec(_)
        | Error::Json(_)
        | Error::UnknownName(_)
        | Error::EmptyMask(_)
        | Error::Shots { .. }
        | Error::Vocabulary { .. } => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

pub fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse_from(std::iter::once("clipfit".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli, &argv) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Parses and runs `args` (without the program name). Returns the run
/// directory, if the command wrote one.
pub fn run<S: AsRef<str>>(args: &[S]) -> Result<Option<PathBuf>> {
    let argv: Vec<String> = args.iter().map(|s| s.as_ref().to_string()).collect();
    let cli = Cli::try_parse_from(std::iter::once("clipfit".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Config(e.to_string()))?;
    execute(&cli, &argv)
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<Option<PathBuf>> {
    let exec = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    let argv = without_out(argv);
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, argv, exec).map(Some),
        Command::Pretrain(a) => cmd_pretrain(a, argv, exec).map(Some),
        Command::Finetune(a) => cmd_finetune(a, argv, exec).map(Some),
        Command::Eval(a) => cmd_eval(a, argv, exec).map(Some),
        Command::Count(a) => {
            println!("{}", cmd_count(&a.model, &a.strategy)?);
            Ok(None)
        }
        Command::Analyze(a) => cmd_analyze(a, argv, exec).map(Some),
        Command::Bench(a) => cmd_bench(a, argv, exec).map(Some),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn without_out(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Accepts a dataset directory or a `gen` run directory.
fn dataset_dir(path: &Path) -> PathBuf {
    let nested = path.join("data");
    if nested.join(synthdata::MANIFEST_FILE).is_file() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Collects input digests and assembles the manifest for one command.
struct Recorder {
    command: &'static str,
    argv: Vec<String>,
    inputs: BTreeMap<String, String>,
}

impl Recorder {
    fn new(command: &'static str, argv: Vec<String>) -> Self {
        Self {
            command,
            argv,
            inputs: BTreeMap::new(),
        }
    }

    fn file(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn dataset(&mut self, path: &Path) -> Result<SyntheticDataset> {
        let dir = dataset_dir(path);
        self.file(&dir.join(synthdata::MANIFEST_FILE))?;
        self.file(&dir.join(synthdata::DATA_FILE))?;
        synthdata::load(&dir)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<checkpoint::Checkpoint> {
        let bytes = self.file(path)?;
        checkpoint::from_bytes(&bytes, path)
    }

    fn config<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let bytes = self.file(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn config_or_default<T: serde::de::DeserializeOwned + Default>(&mut self, path: Option<&Path>) -> Result<T> {
        path.map_or_else(|| Ok(T::default()), |p| self.config(p))
    }

    /// Creates the run directory: `--out` if given, else
    /// `runs/{command}[-{tag}][-seed{seed}]-{hash8}`.
    fn open(&self, out: &OutArg, tag: Option<&str>, seed: Option<u64>, config: &serde_json::Value) -> Result<PathBuf> {
        let dir = match &out.out {
            Some(d) => d.clone(),
            None => {
                let key = serde_json::to_vec(&json!([self.command, config, self.inputs]))?;
                let mut name = self.command.to_string();
                if let Some(t) = tag {
                    let safe: String = t
                        .chars()
                        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
                        .collect();
                    name.push('-');
                    name.push_str(&safe);
                }
                if let Some(s) = seed {
                    name.push_str(&format!("-seed{s}"));
                }
                name.push('-');
                name.push_str(&sha256_hex(&key)[..8]);
                Path::new(DEFAULT_ROOT).join(name)
            }
        };
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn finish(self, dir: &Path, config: serde_json::Value, seeds: Vec<u64>, outputs: &[&str]) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: self.argv,
            config,
            seeds,
            inputs: self.inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        println!("{}", dir.display());
        Ok(dir.to_path_buf())
    }
}

pub fn cmd_gen(a: &GenArgs, argv: Vec<String>, exec: ExecMode) -> Result<PathBuf> {
    let mut rec = Recorder::new("gen", argv);
    let mut spec = match a.config.as_deref() {
        Some(p) => rec.config::<DatasetSpec>(p)?,
        None => DatasetSpec::committed(a.seed.unwrap_or(1)),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let config = serde_json::to_value(&spec)?;
    let dir = rec.open(&a.out, None, Some(spec.seed), &config)?;
    let data = generate(&spec, exec)?;
    synthdata::save(&dir.join("data"), &data)?;
    rec.finish(&dir, config, vec![spec.seed], &["data/manifest.json", "data/data.bin"])
}

pub fn cmd_pretrain(a: &PretrainArgs, argv: Vec<String>, exec: ExecMode) -> Result<PathBuf> {
    let mut rec = Recorder::new("pretrain", argv);
    let mut run: PretrainRun = rec.config_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        run.pretrain.seed = s;
    }
    run.model.validate()?;
    run.pretrain.validate()?;
    let data = rec.dataset(&a.data)?;
    let seed = run.pretrain.seed;
    let config = serde_json::to_value(&run)?;
    let dir = rec.open(&a.out, None, Some(seed), &config)?;

    let (model, report) = pretrain(DualEncoder::new(run.model.clone(), seed)?, &data.pretrain, &run.pretrain, exec)?;
    let spec = &data.spec;
    let zero_shot = evaluate(&model, &data.base_test, &data.new_test, &spec.base_classes(), &spec.new_classes(), exec)?;
    let mut meta = BTreeMap::new();
    meta.insert("stage".into(), json!("pretrain"));
    meta.insert("seed".into(), json!(seed));
    checkpoint::save(&dir.join(MODEL_FILE), &model, &meta)?;
    write_csv(
        &dir.join("pretrain_loss.csv"),
        "pretrain_loss",
        &["step", "loss", "temperature"],
        report
            .loss
            .iter()
            .zip(&report.temperature)
            .enumerate()
            .map(|(i, (l, t))| vec![i.to_string(), l.to_string(), t.to_string()]),
    )?;
    write_json(&dir.join("pretrain_report.json"), &PretrainSummary { report, zero_shot })?;
    rec.finish(&dir, config, vec![seed], &[MODEL_FILE, "pretrain_report.json", "pretrain_loss.csv"])
}

#[derive(Serialize)]
struct FinetuneResolved<'a> {
    strategy: &'a Strategy,
    shots: usize,
    train: &'a TrainConfig,
}

pub fn cmd_finetune(a: &FinetuneArgs, argv: Vec<String>, exec: ExecMode) -> Result<PathBuf> {
    let mut rec = Recorder::new("finetune", argv);
    let mut cfg = match a.config.as_deref() {
        Some(p) => rec.config::<TrainConfig>(p)?,
        None => BenchConfig::committed().finetune,
    };
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    if let Some(r) = a.regularizer {
        cfg.regularizer = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let strategy: Strategy = a.strategy.parse()?;
    if a.shots == 0 {
        return Err(Error::Config("--shots must be at least 1".into()));
    }
    let ckpt = rec.checkpoint(&a.checkpoint)?;
    let data = rec.dataset(&a.data)?;
    let config = serde_json::to_value(FinetuneResolved {
        strategy: &strategy,
        shots: a.shots,
        train: &cfg,
    })?;
    let dir = rec.open(&a.out, Some(strategy.name()), Some(cfg.seed), &config)?;

    let spec = &data.spec;
    let base = spec.base_classes();
    let shots = sample_shots(&data.base_train(), a.shots, cfg.seed)?;
    let opts = FinetuneOptions {
        exec,
        ..FinetuneOptions::default()
    };
    let outcome = finetune(&ckpt.model, &shots, &base, &strategy, &cfg, &opts)?;
    let eval = evaluate(&outcome.model, &data.base_test, &data.new_test, &base, &spec.new_classes(), exec)?;

    let mut meta = BTreeMap::new();
    meta.insert("stage".into(), json!("finetune"));
    meta.insert("strategy".into(), json!(strategy.name()));
    meta.insert("seed".into(), json!(cfg.seed));
    checkpoint::save(&dir.join(MODEL_FILE), &outcome.model, &meta)?;
    write_json(&dir.join("train_report.json"), &outcome.report)?;
    outcome.report.write_csvs(&dir)?;
    write_json(&dir.join("eval.json"), &eval)?;
    eval.write_csv(&dir.join("eval.csv"))?;
    eprintln!("base {:.2}  new {:.2}  hm {:.2}", eval.base_acc, eval.new_acc, eval.hm);
    rec.finish(
        &dir,
        config,
        vec![cfg.seed],
        &[MODEL_FILE, "train_report.json", "loss.csv", "changes.csv", "eval.json", "eval.csv"],
    )
}

pub fn cmd_eval(a: &EvalArgs, argv: Vec<String>, exec: ExecMode) -> Result<PathBuf> {
    let mut rec = Recorder::new("eval", argv);
    let ckpt = rec.checkpoint(&a.checkpoint)?;
    let data = rec.dataset(&a.data)?;
    let config = json!({ "split": a.split });
    let dir = rec.open(&a.out, None, None, &config)?;
    let (base, new) = (data.spec.base_classes(), data.spec.new_classes());
    let model = &ckpt.model;
    match a.split {
        SplitSelector::BaseToNew => {
            let eval = evaluate(model, &data.base_test, &data.new_test, &base, &new, exec)?;
            write_json(&dir.join("eval.json"), &eval)?;
            eval.write_csv(&dir.join("eval.csv"))?;
            eprintln!("base {:.2}  new {:.2}  hm {:.2}", eval.base_acc, eval.new_acc, eval.hm);
            rec.finish(&dir, config, vec![], &["eval.json", "eval.csv"])
        }
        SplitSelector::Base | SplitSelector::New => {
            let (examples, classes) = if a.split == SplitSelector::Base {
                (&data.base_test, &base)
            } else {
                (&data.new_test, &new)
            };
            let result = evaluate_split(model, examples, classes, exec)?;
            write_json(&dir.join("eval.json"), &result)?;
            eprintln!("accuracy {:.2}", result.accuracy);
            rec.finish(&dir, config, vec![], &["eval.json"])
        }
    }
}

pub fn cmd_count(model: &str, strategy: &str) -> Result<usize> {
    let config = match ModelConfig::preset(model) {
        Some(c) => c,
        None => read_json(Path::new(model))?,
    };
    config.validate()?;
    Ok(count_trainable(&config, &strategy.parse()?))
}

pub fn cmd_analyze(a: &AnalyzeArgs, argv: Vec<String>, exec: ExecMode) -> Result<PathBuf> {
    let mut rec = Recorder::new("analyze", argv);
    let (model, report, tag) = match (&a.run, &a.pair) {
        (Some(run), _) => {
            let report: TrainReport = serde_json::from_slice(&rec.file(&run.join("train_report.json"))?)?;
            let model = rec.checkpoint(&run.join(MODEL_FILE))?.model;
            let tag = report.strategy.clone();
            (model, Some(report), tag)
        }
        (None, Some(pair)) => {
            let before = rec.checkpoint(&pair[0])?.model;
            let after = rec.checkpoint(&pair[1])?.model;
            if a.report == ReportKind::Changes {
                let changes = diff(&Snapshot::capture(&before, 0), &Snapshot::capture(&after, 0), Grouping::PerTensor)?;
                let meta = ReportMeta {
                    strategy: "pair".into(),
                    dataset_id: String::new(),
                    seeds: vec![],
                };
                let config = json!({ "report": a.report });
                let dir = rec.open(&a.out, Some("pair"), None, &config)?;
                let report = ChangeReport::from_changes(changes, meta);
                write_json(&dir.join("changes.json"), &report)?;
                report.write_csv(&dir.join("changes.csv"))?;
                return rec.finish(&dir, config, vec![], &["changes.json", "changes.csv"]);
            }
            (after, None, "pair".to_string())
        }
        (None, None) => return Err(Error::Config("analyze needs --run or --pair".into())),
    };
    let config = json!({ "report": a.report });
    let meta = || ReportMeta {
        strategy: tag.clone(),
        dataset_id: String::new(),
        seeds: report.as_ref().map(|r| vec![r.config.seed]).unwrap_or_default(),
    };
    match a.report {
        ReportKind::Changes | ReportKind::Gradients => {
            let report = report
                .as_ref()
                .ok_or_else(|| Error::Config("gradient reports need --run".into()))?;
            let dir = rec.open(&a.out, Some(&tag), Some(report.config.seed), &config)?;
            if a.report == ReportKind::Changes {
                let r = ChangeReport::from_train_report(report, meta());
                write_json(&dir.join("changes.json"), &r)?;
                r.write_csv(&dir.join("changes.csv"))?;
                print!("{r}");
                rec.finish(&dir, config, vec![report.config.seed], &["changes.json", "changes.csv"])
            } else {
                let r = gradient_sums(report, meta());
                write_json(&dir.join("gradients.json"), &r)?;
                r.write_csv(&dir.join("gradients.csv"))?;
                rec.finish(&dir, config, vec![report.config.seed], &["gradients.json", "gradients.csv"])
            }
        }
        ReportKind::Features => {
            let data_path = a
                .data
                .as_deref()
                .ok_or_else(|| Error::Config("feature export needs --data".into()))?;
            let data = rec.dataset(data_path)?;
            let dir = rec.open(&a.out, Some(&tag), None, &config)?;
            let test: Vec<_> = data.base_test.iter().chain(&data.new_test).cloned().collect();
            let export = export_features(&model, &test, exec)?;
            export.write_csv(&dir.join("features.csv"))?;
            let summary = json!({
                "explained_variance": export.explained_variance,
                "fisher_ratio": export.fisher_ratio()?,
            });
            write_json(&dir.join("features.json"), &summary)?;
            rec.finish(&dir, config, vec![], &["features.csv", "features.json"])
        }
    }
}

/// One pass/fail line of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub passed: bool,
}

pub fn bench_checks(s: &BenchSummary) -> Vec<Check> {
    let check = |name: &str, value: f64, passed: bool| Check {
        name: name.to_string(),
        value,
        passed,
    };
    let kd_zero = s.seeds.iter().all(|o| o.kd_at_start == 0.0);
    vec![
        check("clipfit base gain over zero-shot >= 10", s.base_gain(), s.base_gain() >= 10.0),
        check("kd hm - no-reg hm >= 0", s.kd_hm_gain(), s.kd_hm_gain() >= 0.0),
        check("layernorm_image hm - proj_bias_text hm > 0", s.layernorm_over_proj_bias(), s.layernorm_over_proj_bias() > 0.0),
        check("track vs diff error <= 1e-12", s.track_diff_max_error(), s.track_diff_max_error() <= 1e-12),
        check("gradient/change spearman > 0", s.spearman(), s.spearman() > 0.0),
        check("top-k hm - bottom-k hm >= 0", s.top_over_bottom(), s.top_over_bottom() >= 0.0),
        check("kd at first step == 0", if kd_zero { 0.0 } else { 1.0 }, kd_zero),
        check("kd cosine - no-reg cosine >= 0", s.kd_cosine_gain(), s.kd_cosine_gain() >= 0.0),
    ]
}

pub fn cmd_bench(a: &BenchArgs, argv: Vec<String>, exec: ExecMode) -> Result<PathBuf> {
    let mut rec = Recorder::new("bench", argv);
    let mut cfg: BenchConfig = rec.config_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("bench needs at least one seed".into()));
    }
    cfg.exec = exec;
    cfg.pretrain.validate()?;
    cfg.finetune.validate()?;
    let config = serde_json::to_value(&cfg)?;
    let dir = rec.open(&a.out, None, None, &config)?;
    let summary = bench::run(&cfg)?;
    for o in &summary.seeds {
        eprintln!(
            "seed {}: zero-shot {:.2}/{:.2}  clipfit {:.2}/{:.2}  no-reg {:.2}/{:.2}",
            o.seed,
            o.zero_shot.base_acc,
            o.zero_shot.new_acc,
            o.clipfit_kd.base_acc,
            o.clipfit_kd.new_acc,
            o.clipfit_none.base_acc,
            o.clipfit_none.new_acc
        );
    }
    let checks = bench_checks(&summary);
    for c in &checks {
        println!("{} {} ({:.4})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value);
    }
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("checks.json"), &checks)?;
    let seeds = cfg.seeds.clone();
    rec.finish(&dir, config, seeds, &["summary.json", "checks.json"])
}

/// Re-runs a manifest's command after checking that its inputs are
/// unchanged.
pub fn cmd_replay(a: &ReplayArgs) -> Result<Option<PathBuf>> {
    let manifest: RunManifest = read_json(&a.manifest)?;
    for (path, digest) in &manifest.inputs {
        let now = sha256_hex(&fs::read(path)?);
        if &now != digest {
            return Err(Error::Config(format!("input {path} changed since the run was recorded")));
        }
    }
    let mut argv = manifest.argv.clone();
    if let Some(out) = &a.out.out {
        argv.push("--out".into());
        argv.push(out.display().to_string());
    }
    run(&argv)
}
