//! `ascnet`: feature extraction, training, evaluation, and export for the
//! Gammatone + squeeze-excitation scene classifier.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use ascnet::data::{self, DatasetIndex, FeatureCache, Split};
use ascnet::dsp::{self, FrontendConfig, NormStats};
use ascnet::exec::Exec;
use ascnet::modelio::{self, ArtifactMeta, ModelArtifact, Precision};
use ascnet::nn::{argmax_rows, ModelSpec};
use ascnet::train::{self, Sample, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ascnet",
    version,
    about = "Acoustic scene classification pipeline"
)]
#[command(args_override_self = true, subcommand_required = true)]
struct Cli {
    /// `key = value` file; keys are long flag names, flags override them
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (1 runs everything sequentially)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute and cache Gammatone features for every clip in a metadata file
    Extract(ExtractArgs),
    /// Per-band normalization statistics over a cached split (training by default)
    Stats(StatsArgs),
    /// Train on the cached training split, selecting on validation accuracy
    Train(TrainArgs),
    /// Accuracy, per-class and per-device breakdown on labelled clips
    Eval(EvalArgs),
    /// Write `filename,scene_label` predictions for a list of clips
    Predict(PredictArgs),
    /// Re-encode a model artifact, optionally folding batch norm
    Export(ExportArgs),
    /// Parameter and byte accounting of a model artifact
    Size(SizeArgs),
    /// Generate the synthetic tone corpus
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct FrontendArgs {
    #[arg(long, default_value_t = 64)]
    n_bands: usize,
    #[arg(long, default_value_t = 20.0)]
    f_low: f64,
    #[arg(long, default_value_t = 22050.0)]
    f_high: f64,
}

impl FrontendArgs {
    fn config(&self) -> FrontendConfig {
        FrontendConfig {
            n_bands: self.n_bands,
            f_low: self.f_low,
            f_high: self.f_high,
            ..FrontendConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    meta: PathBuf,
    /// Directory metadata paths are relative to [default: the metadata's directory]
    #[arg(long)]
    audio_root: Option<PathBuf>,
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    frontend: FrontendArgs,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Which part of the cached index the statistics are estimated on
    #[arg(long, value_enum, default_value_t = StatsSplit::Train)]
    stats_split: StatsSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StatsSplit {
    Train,
    Val,
    Test,
    All,
}

impl StatsSplit {
    fn select(self, index: &DatasetIndex) -> Vec<&data::DatasetEntry> {
        let split = match self {
            StatsSplit::Train => Split::Train,
            StatsSplit::Val => Split::Val,
            StatsSplit::Test => Split::Test,
            StatsSplit::All => return index.entries.iter().collect(),
        };
        index.split(split)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// History CSV [default: the artifact path with a .csv extension]
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    plateau_factor: f64,
    #[arg(long, default_value_t = 20)]
    plateau_patience: usize,
    #[arg(long, default_value_t = 50)]
    early_stop_patience: usize,
    #[arg(long, default_value_t = 40)]
    filters: usize,
    /// Suppress per-epoch progress on standard error
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    audio_root: Option<PathBuf>,
    /// Only evaluate entries of this split (train, val, test)
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// One WAV path per line
    #[arg(long)]
    input_list: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory list entries are relative to [default: the list's directory]
    #[arg(long)]
    audio_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "fp16")]
    precision: String,
    #[arg(long)]
    fold_bn: bool,
}

#[derive(Debug, Args)]
struct SizeArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    clips_per_class: usize,
    /// Clip length in seconds
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
}

/// Exit 1 for bad data, 2 for bad usage or configuration.
#[derive(Debug)]
enum Failure {
    Data(String),
    Usage(String),
}

impl From<ascnet::Error> for Failure {
    fn from(e: ascnet::Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn parent_dir(p: &Path) -> PathBuf {
    p.parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn require_file(path: &Path, hint: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{} not found: {hint}",
            path.display()
        )))
    }
}

fn cmd_extract(a: &ExtractArgs, exec: Exec) -> CmdResult {
    let cfg = a.frontend.config();
    cfg.validate()?;
    let index = DatasetIndex::load(&a.meta, Split::Train)?;
    let root = a.audio_root.clone().unwrap_or_else(|| parent_dir(&a.meta));
    let report = data::cache_features(&index, &root, &a.cache, &cfg, exec)?;
    for (path, msg) in &report.failures {
        eprintln!("failed: {path}: {msg}");
    }
    eprintln!(
        "{} clips: {} cached, {} recomputed, {} failed",
        report.total,
        report.hits,
        report.recomputed,
        report.failures.len()
    );
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!(
            "{} clips failed",
            report.failures.len()
        )))
    }
}

fn cmd_stats(a: &StatsArgs) -> CmdResult {
    let cache = FeatureCache::open(&a.cache)?;
    let index = cache.index()?;
    let entries = a.stats_split.select(&index);
    if entries.is_empty() {
        return Err(Failure::Data(format!(
            "the cached index has no entries for --stats-split {}",
            a.stats_split
                .to_possible_value()
                .map_or("?".into(), |v| v.get_name().to_string())
        )));
    }
    let mut acc: Option<dsp::StatsAccumulator> = None;
    for e in &entries {
        let m = cache.load(&e.path)?;
        acc.get_or_insert_with(|| dsp::StatsAccumulator::new(m.bands))
            .add(&m)?;
    }
    let stats = acc.expect("non-empty split").finish()?;
    stats.save(&a.out)?;
    println!(
        "{} bands from {} frames of {} clips -> {}",
        stats.mean.len(),
        stats.count,
        entries.len(),
        a.out.display()
    );
    Ok(())
}

fn split_samples(
    cache: &FeatureCache,
    index: &DatasetIndex,
    split: Split,
    stats: &NormStats,
) -> Result<Vec<Sample>, Failure> {
    Ok(train::load_samples(cache, &index.split(split), stats)?)
}

fn cmd_train(a: &TrainArgs, seed: u64, exec: Exec) -> CmdResult {
    require_file(&a.stats, "run stats first")?;
    let stats = NormStats::load(&a.stats)?;
    let cache = FeatureCache::open(&a.cache)?;
    let index = cache.index()?;
    let frontend = cache.frontend()?;
    let cfg = TrainConfig {
        initial_lr: a.lr,
        plateau_factor: a.plateau_factor,
        plateau_patience: a.plateau_patience,
        early_stop_patience: a.early_stop_patience,
        max_epochs: a.max_epochs,
        batch_size: a.batch_size,
        seed,
        exec,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let spec = ModelSpec {
        filters: a.filters,
        ..ModelSpec::default()
    };
    spec.validate()?;
    let train_set = split_samples(&cache, &index, Split::Train, &stats)?;
    let val_set = split_samples(&cache, &index, Split::Val, &stats)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Failure::Data(format!(
            "need training and validation clips, found {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let quiet = a.quiet;
    let outcome = train::train_with(&spec, &train_set, &val_set, &cfg, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.5}  train {:.4}  val {:.4}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc
            );
        }
    })?;
    let meta = ArtifactMeta {
        spec: spec.clone(),
        frontend,
        classes: index.classes(),
        norm: Some(stats),
    };
    ModelArtifact::from_model(&outcome.best, meta, Precision::Binary32).save(&a.out)?;
    let history = a
        .history
        .clone()
        .unwrap_or_else(|| a.out.with_extension("csv"));
    train::write_history_csv(&history, outcome.history())?;
    println!(
        "best val accuracy {:.4} at epoch {} of {}",
        outcome.state.best_val_acc, outcome.state.best_epoch, outcome.state.epoch
    );
    Ok(())
}

/// Features for one clip, computed the way the artifact was trained.
fn clip_features(
    path: &Path,
    frontend: &dsp::Frontend,
    norm: Option<&NormStats>,
) -> ascnet::Result<dsp::FeatureMatrix> {
    let clip = data::read_wav(path)?;
    let m = frontend.gammatonegram(&clip).map_err(|e| e.in_file(path))?;
    match norm {
        Some(s) => dsp::apply_normalization(&m, s),
        None => Ok(m),
    }
}

fn load_artifact(path: &Path) -> Result<(ModelArtifact, ascnet::nn::Model), Failure> {
    require_file(path, "train or export a model first")?;
    let artifact = ModelArtifact::load(path)?;
    let model = artifact.to_model()?;
    Ok((artifact, model))
}

fn cmd_eval(a: &EvalArgs, exec: Exec) -> CmdResult {
    let (artifact, model) = load_artifact(&a.model)?;
    let mut index = DatasetIndex::load(&a.meta, Split::Test)?;
    if let Some(s) = &a.split {
        let split: Split = s.parse()?;
        index.entries.retain(|e| e.split == split);
    }
    if index.is_empty() {
        return Err(Failure::Data("no clips to evaluate".into()));
    }
    let root = a.audio_root.clone().unwrap_or_else(|| parent_dir(&a.meta));
    let frontend = dsp::Frontend::new(artifact.meta.frontend.clone())?;
    let norm = artifact.meta.norm.as_ref();
    let samples = exec
        .map(index.len(), |i| {
            let e = &index.entries[i];
            clip_features(&root.join(&e.path), &frontend, norm).map(|features| Sample {
                features,
                label: e.label_index().expect("validated label"),
                device: e.device_id.clone(),
            })
        })
        .into_iter()
        .collect::<ascnet::Result<Vec<_>>>()?;
    let m = train::evaluate(
        &model.with_exec(exec),
        &samples,
        &TrainConfig::default().loss,
        32,
    )?;
    println!("clips {}", m.total);
    println!("accuracy {:.4}", m.accuracy);
    println!("mean_focal_loss {:.6}", m.mean_loss);
    for g in m.per_class.iter().filter(|g| g.total > 0) {
        println!(
            "class {:<18} {:.4} ({}/{})",
            g.name,
            g.accuracy(),
            g.correct,
            g.total
        );
    }
    for g in &m.per_device {
        println!(
            "device {:<17} {:.4} ({}/{})",
            g.name,
            g.accuracy(),
            g.correct,
            g.total
        );
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs, exec: Exec) -> CmdResult {
    let (artifact, model) = load_artifact(&a.model)?;
    let list = fs::read_to_string(&a.input_list)
        .map_err(|e| Failure::Data(format!("{}: {e}", a.input_list.display())))?;
    let names: Vec<&str> = list
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let root = a
        .audio_root
        .clone()
        .unwrap_or_else(|| parent_dir(&a.input_list));
    let frontend = dsp::Frontend::new(artifact.meta.frontend.clone())?;
    let norm = artifact.meta.norm.as_ref();
    let feats = exec
        .map(names.len(), |i| {
            clip_features(&root.join(names[i]), &frontend, norm)
        })
        .into_iter()
        .collect::<ascnet::Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(names.len());
    for (name, f) in names.iter().zip(&feats) {
        let probs = model.predict(&ascnet::nn::batch_from_features(&[f])?)?;
        let k = argmax_rows(&probs)[0];
        let label = artifact
            .meta
            .classes
            .get(k)
            .cloned()
            .unwrap_or_else(|| k.to_string());
        rows.push((name.to_string(), label));
    }
    fs::write(&a.out, data::predictions_csv(&rows))
        .map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    eprintln!("{} predictions -> {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> CmdResult {
    let precision: Precision = a.precision.parse()?;
    let (artifact, model) = load_artifact(&a.model)?;
    let model = if a.fold_bn {
        modelio::fold_batchnorm(&model)?
    } else {
        model
    };
    let out = ModelArtifact::from_model(&model, artifact.meta.clone(), precision);
    out.save(&a.out)?;
    println!("{}", modelio::size_report(&out)?);
    Ok(())
}

fn cmd_size(a: &SizeArgs) -> CmdResult {
    let (artifact, _) = load_artifact(&a.model)?;
    println!("{}", modelio::size_report(&artifact)?);
    Ok(())
}

fn cmd_synth(a: &SynthArgs, seed: u64, exec: Exec) -> CmdResult {
    let index = data::synth_dataset(&a.out_dir, seed, a.clips_per_class, a.duration, exec)?;
    println!(
        "{} clips ({} train, {} val) -> {}",
        index.len(),
        index.split(Split::Train).len(),
        index.split(Split::Val).len(),
        a.out_dir.join("meta.tsv").display()
    );
    Ok(())
}

fn parse_args(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command();
    let first = cmd.clone().try_get_matches_from(&args)?;
    let cli = Cli::from_arg_matches(&first)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let sub = first.subcommand_name().expect("subcommand is required");
    let spliced = config::splice(&cmd, &args, sub, path)
        .map_err(|msg| Cli::command().error(clap::error::ErrorKind::InvalidValue, msg))?;
    Cli::from_arg_matches(&cmd.try_get_matches_from(spliced)?)
}

fn run(cli: &Cli) -> CmdResult {
    let exec = match cli.jobs {
        Some(0) => return Err(Failure::Usage("--jobs must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            // fails only if a pool was already installed, which then stays in use
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    match &cli.command {
        Command::Extract(a) => cmd_extract(a, exec),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a, cli.seed, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Predict(a) => cmd_predict(a, exec),
        Command::Export(a) => cmd_export(a),
        Command::Size(a) => cmd_size(a),
        Command::Synth(a) => cmd_synth(a, cli.seed, exec),
    }
}

fn main() -> ExitCode {
    let cli = match parse_args(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
