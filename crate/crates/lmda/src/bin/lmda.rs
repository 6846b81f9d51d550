//! Command-line frontend: synthesize datasets, preprocess, train with
//! optional ablation, evaluate checkpoints and emit interpretation
//! artifacts.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lmda::dataio::{self, builtin_montage, DataError, Montage, TrialSet};
use lmda::interpret::{
    algorithm1_ern, algorithm2_mi, export_class_artifacts, select_confident, topo_csv, topo_export,
    topo_svg, InterpretError,
};
use lmda::model::{load_model, save_model, LmdaModel, ModelConfig, ModelError};
use lmda::sigproc::{self, SigError};
use lmda::train::{evaluate, train_loop, PrimaryMetric, TrainConfig, TrainError};
use lmda::util::{atomic_write, fmt_sig6};

#[derive(Parser)]
#[command(name = "lmda", version, about = "EEG decoding pipeline: synthesis, preprocessing, training, evaluation, interpretation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset
    Synth(SynthArgs),
    /// Filter, resample, normalize or align an existing dataset
    Preprocess(PreprocessArgs),
    /// Train a model and log per-epoch metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Emit class-activation interpretation artifacts
    Explain(ExplainArgs),
    /// Print the header of a dataset or checkpoint file
    Info(InfoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Erp,
    Erd,
}

#[derive(Args)]
struct SynthArgs {
    /// Paradigm to synthesize
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// Sampling rate in Hz
    #[arg(long, default_value_t = 250.0)]
    fs: f64,
    /// RNG seed; falls back to LMDA_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input dataset
    #[arg(long)]
    data: PathBuf,
    /// Bandpass edges as LOW:HIGH in Hz
    #[arg(long)]
    band: Option<String>,
    /// FIR filter order (even)
    #[arg(long, default_value_t = 200)]
    order: usize,
    /// Target sampling rate in Hz (downsampling only)
    #[arg(long)]
    resample: Option<f64>,
    /// Subtract the mean of the first S seconds per trial and channel
    #[arg(long)]
    baseline_secs: Option<f64>,
    /// Per-channel z-scoring
    #[arg(long)]
    normalize: bool,
    /// Whiten by the trial-averaged covariance
    #[arg(long)]
    align: bool,
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricFlag {
    Acc,
    Auc,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset
    #[arg(long)]
    data: PathBuf,
    /// Held-out test dataset
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the channel attention module
    #[arg(long)]
    no_channel_attn: bool,
    /// Disable the depth attention module
    #[arg(long)]
    no_depth_attn: bool,
    /// Comma-separated per-class loss weights
    #[arg(long)]
    class_weights: Option<String>,
    /// Metric driving the best/last-10 summary
    #[arg(long, value_enum, default_value_t = MetricFlag::Acc)]
    metric: MetricFlag,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV path
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExplainMode {
    Ern,
    Mi,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: ExplainMode,
    /// Confident trials per class
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    /// Most active time points per trial (mi mode)
    #[arg(long, default_value_t = 10)]
    top_t: usize,
    /// Topography grid resolution
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InfoArgs {
    /// Dataset or checkpoint file
    #[arg(long)]
    path: PathBuf,
}

/// Error wrapper carrying the process exit code.
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SigError> for CliError {
    fn from(e: SigError) -> Self {
        match e {
            SigError::BadBand { .. } | SigError::BadOrder(_) | SigError::Upsample { .. } => {
                CliError::Usage(e.to_string())
            }
            SigError::ZeroVariance { .. } | SigError::SingularCovariance(_) | SigError::IrrationalRatio { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Incompatible(_) => CliError::Usage(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<InterpretError> for CliError {
    fn from(e: InterpretError) -> Self {
        match e {
            InterpretError::Model(m) => m.into(),
            InterpretError::Train(t) => t.into(),
            InterpretError::Io { .. } => CliError::Data(e.to_string()),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    lmda::util::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are successes, flag errors are usage errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("LMDA_SEED").ok().and_then(|s| s.parse().ok())).unwrap_or(0)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Info(a) => cmd_info(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed);
    let kind = match a.kind {
        SynthKind::Erp => "erp",
        SynthKind::Erd => "erd",
    };
    println!(
        "synth kind={kind} n_per_class={} channels={} samples={} fs={} seed={seed} out={}",
        a.n_per_class,
        a.channels,
        a.samples,
        a.fs,
        a.out.display()
    );
    let set = match a.kind {
        SynthKind::Erp => dataio::synth_erp(a.n_per_class, a.channels, a.samples, a.fs, seed)?,
        SynthKind::Erd => dataio::synth_erd(a.n_per_class, a.channels, a.samples, a.fs, seed)?,
    };
    dataio::save(&set, &a.out)?;
    println!("wrote {} trials to {}", set.n_trials(), a.out.display());
    Ok(())
}

fn parse_band(s: &str) -> Result<(f64, f64), CliError> {
    let err = || CliError::Usage(format!("--band expects LOW:HIGH in Hz, got '{s}'"));
    let (lo, hi) = s.split_once(':').ok_or_else(err)?;
    Ok((lo.trim().parse().map_err(|_| err())?, hi.trim().parse().map_err(|_| err())?))
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    println!(
        "preprocess data={} band={} order={} resample={} baseline_secs={} normalize={} align={} out={}",
        a.data.display(),
        a.band.as_deref().unwrap_or("-"),
        a.order,
        a.resample.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        a.baseline_secs.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        a.normalize,
        a.align,
        a.out.display()
    );
    let mut set = dataio::load(&a.data)?;
    if let Some(band) = &a.band {
        let (lo, hi) = parse_band(band)?;
        let filt = sigproc::design_bandpass(a.order, lo, hi, set.fs_hz)?;
        set = sigproc::filter_trials(&set, &filt)?;
    }
    if let Some(target) = a.resample {
        set = sigproc::resample(&set, target)?;
    }
    if let Some(secs) = a.baseline_secs {
        let n = (secs * set.fs_hz).round() as usize;
        set = sigproc::baseline_correct_prefix(&set, n)?;
    }
    if a.normalize {
        set = sigproc::channel_normalize(&set)?;
    }
    if a.align {
        set = sigproc::euclidean_align(&set)?;
    }
    dataio::save(&set, &a.out)?;
    println!(
        "wrote {} trials ({} ch x {} samples @ {} Hz) to {}",
        set.n_trials(),
        set.n_channels(),
        set.n_samples(),
        set.fs_hz,
        a.out.display()
    );
    Ok(())
}

fn parse_class_weights(s: &str, k: usize) -> Result<Vec<f64>, CliError> {
    let ws: Result<Vec<f64>, _> = s.split(',').map(|w| w.trim().parse::<f64>()).collect();
    let ws = ws.map_err(|_| CliError::Usage(format!("--class-weights expects comma-separated numbers, got '{s}'")))?;
    if ws.len() != k {
        return Err(CliError::Usage(format!("--class-weights has {} entries for {} classes", ws.len(), k)));
    }
    Ok(ws)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed);
    let train = dataio::load(&a.data)?;
    let test = dataio::load(&a.test)?;
    let mut mc = ModelConfig::new(
        train.n_channels(),
        train.n_samples(),
        train.n_classes(),
        train.fs_hz,
        train.n_trials(),
        seed,
    );
    mc.use_channel_attn = !a.no_channel_attn;
    mc.use_depth_attn = !a.no_depth_attn;
    let mut tc = TrainConfig::new(seed);
    tc.epochs = a.epochs;
    tc.batch_size = a.batch;
    tc.lr = a.lr;
    tc.primary = match a.metric {
        MetricFlag::Acc => PrimaryMetric::Accuracy,
        MetricFlag::Auc => PrimaryMetric::Auc,
    };
    if let Some(cw) = &a.class_weights {
        tc.class_weights = Some(parse_class_weights(cw, train.n_classes())?);
    }
    println!(
        "train data={} test={} epochs={} batch={} lr={} seed={seed} channel_attn={} depth_attn={} metric={} out={} log={}",
        a.data.display(),
        a.test.display(),
        tc.epochs,
        tc.batch_size,
        tc.lr,
        mc.use_channel_attn,
        mc.use_depth_attn,
        match tc.primary {
            PrimaryMetric::Accuracy => "acc",
            PrimaryMetric::Auc => "auc",
        },
        a.out.display(),
        a.log.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()),
    );
    let mut model = LmdaModel::init(mc)?;
    println!("model parameters: {}", model.param_count());
    let record = train_loop(&mut model, &train, &test, &tc)?;
    save_model(&model, &a.out)?;
    if let Some(log) = &a.log {
        atomic_write(log, record.to_csv().as_bytes())
            .map_err(|e| CliError::Data(format!("io error on {}: {e}", log.display())))?;
    }
    let last = record.rows.last().expect("at least one epoch");
    println!(
        "final epoch {}: loss={} acc={} kappa={} auc={}",
        last.epoch,
        fmt_sig6(last.train_loss),
        fmt_sig6(last.test_acc),
        fmt_sig6(last.test_kappa),
        last.test_auc.map(fmt_sig6).unwrap_or_else(|| "-".into()),
    );
    println!("best metric: {}  last-10 mean: {}", fmt_sig6(record.best_metric), fmt_sig6(record.last10_mean));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    println!("eval model={} data={} batch={}", a.model.display(), a.data.display(), a.batch);
    let mut model = load_model(&a.model)?;
    let set = dataio::load(&a.data)?;
    let eval = evaluate(&mut model, &set, a.batch)?;
    println!(
        "acc={} kappa={} auc={}",
        fmt_sig6(eval.accuracy),
        fmt_sig6(eval.kappa),
        eval.auc.map(fmt_sig6).unwrap_or_else(|| "-".into()),
    );
    Ok(())
}

/// Montage for the set: recorded positions when present, the built-in
/// name table otherwise.
fn montage_for(set: &TrialSet) -> Montage {
    match &set.channel_pos {
        Some(pos) => Montage::from_pairs(set.channel_names.iter().cloned().zip(pos.iter().cloned())),
        None => builtin_montage(),
    }
}

fn cmd_explain(a: ExplainArgs) -> Result<(), CliError> {
    println!(
        "explain model={} data={} mode={} per_class={} top_t={} grid={} out_dir={}",
        a.model.display(),
        a.data.display(),
        match a.mode {
            ExplainMode::Ern => "ern",
            ExplainMode::Mi => "mi",
        },
        a.per_class,
        a.top_t,
        a.grid,
        a.out_dir.display()
    );
    let mut model = load_model(&a.model)?;
    let set = dataio::load(&a.data)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Data(format!("io error on {}: {e}", a.out_dir.display())))?;
    let selection = select_confident(&mut model, &set, a.per_class)?;
    for (j, short) in selection.shortfall.iter().enumerate() {
        if *short > 0 {
            eprintln!("warning: class {} has only {} confident trials of {} requested", j, a.per_class - short, a.per_class);
        }
    }
    let montage = montage_for(&set);
    match a.mode {
        ExplainMode::Ern => {
            let results = algorithm1_ern(&mut model, &selection.per_class)?;
            for res in &results {
                let class_name = &set.class_names[res.class_id];
                export_class_artifacts(
                    &a.out_dir,
                    class_name,
                    res,
                    set.fs_hz,
                    &set.channel_names,
                    &montage,
                    a.grid,
                )?;
                println!(
                    "class {class_name}: prominent time {} s",
                    fmt_sig6(res.prominent_time_s)
                );
            }
        }
        ExplainMode::Mi => {
            let weights = algorithm2_mi(&mut model, &selection.per_class, a.top_t)?;
            for (j, w) in weights.iter().enumerate() {
                let class_name = &set.class_names[j];
                let topo = topo_export(w, &set.channel_names, &montage, a.grid)?;
                write_artifact(&a.out_dir.join(format!("topo_{class_name}.csv")), topo_csv(&topo).as_bytes())?;
                write_artifact(&a.out_dir.join(format!("topo_{class_name}.svg")), topo_svg(&topo).as_bytes())?;
                let best = w
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                println!("class {class_name}: dominant channel {}", set.channel_names[best]);
            }
        }
    }
    println!("artifacts written to {}", a.out_dir.display());
    Ok(())
}

fn write_artifact(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    atomic_write(path, bytes).map_err(|e| CliError::Data(format!("io error on {}: {e}", path.display())))
}

fn cmd_info(a: InfoArgs) -> Result<(), CliError> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(&a.path)
            .map_err(|e| CliError::Data(format!("io error on {}: {e}", a.path.display())))?;
        f.read_exact(&mut magic)
            .map_err(|e| CliError::Data(format!("io error on {}: {e}", a.path.display())))?;
    }
    match &magic {
        b"EEGB" => {
            println!("{}", dataio::read_header_json(&a.path)?);
        }
        b"LMDM" => {
            let model = load_model(&a.path)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&model.config).expect("config serialization cannot fail")
            );
            println!("parameters: {}", model.param_count());
        }
        other => {
            return Err(CliError::Data(format!(
                "{}: unknown magic {:?}",
                a.path.display(),
                String::from_utf8_lossy(other)
            )));
        }
    }
    Ok(())
}
