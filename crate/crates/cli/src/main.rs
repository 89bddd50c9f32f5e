//! `re-tagger`: train, evaluate, predict and serve the room-type classifier.
//!
//! Exit codes: 0 success, 1 user error (bad flags, files or data), 2 internal
//! error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use re_tagger_core::{
    evaluate, export_bundle, load_bundle, load_manifest, run_two_stage, split, synthetic, undersample, write_manifest,
    BackboneKind, ExampleSet, ModelHandle, OnUnreadable, PreprocessConfig,
};
use re_tagger_service::ServiceError;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) => f.write_str(m),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<re_tagger_core::Error> for CliError {
    fn from(e: re_tagger_core::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Bundle { ref source, .. } if !source.is_user_error() => CliError::Internal(e.to_string()),
            ServiceError::Io(_) => CliError::Internal(e.to_string()),
            e => CliError::User(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "re-tagger", version, about = "Room-type classifier for real-estate photos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Undersample, split, train in two stages and write a bundle.
    Train(TrainArgs),
    /// Score a bundle on a labeled manifest.
    Eval(EvalArgs),
    /// Print the class scores of one image as JSON.
    Predict(PredictArgs),
    /// Serve a bundle over HTTP.
    Serve(ServeArgs),
    /// Write a generated six-class dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// CSV with `path,raw_tag` columns.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the bundle, report and effective config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    epochs1: Option<usize>,
    #[arg(long)]
    epochs2: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Safetensors file with pretrained backbone weights.
    #[arg(long)]
    pretrained_weights: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Labeled test manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for `eval.json`, `table.txt` and the effective config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave unreadable images out instead of failing.
    #[arg(long)]
    skip_unreadable: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    bundle: PathBuf,
    image: PathBuf,
    /// Also print the top label on a second line.
    #[arg(long)]
    top: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    max_upload_bytes: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class in canonical order (balcony, bathroom, bedroom,
    /// hall, kitchen, others).
    #[arg(long, value_delimiter = ',', default_values_t = [60, 50, 40, 40, 35, 30])]
    counts: Vec<usize>,
    #[command(flatten)]
    common: Common,
}

fn parse_backbone(s: &str) -> Result<BackboneKind, String> {
    s.parse().map_err(|e: re_tagger_core::Error| e.to_string())
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| CliError::User(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::User(format!("cannot write {}: {e}", path.display())))
}

fn train(args: TrainArgs) -> CliResult {
    let mut c = args.common.resolve()?;
    if let Some(b) = args.backbone {
        c.architecture.backbone = b;
    }
    if let Some(p) = args.pretrained_weights {
        c.architecture.pretrained = true;
        c.architecture.pretrained_weights = Some(p);
    }
    if let Some(n) = args.epochs1 {
        c.training.epochs_stage1 = n;
    }
    if let Some(n) = args.epochs2 {
        c.training.epochs_stage2 = n;
    }
    if let Some(n) = args.batch_size {
        c.training.batch_size = n;
    }
    if let Some(lr) = args.learning_rate {
        c.training.learning_rate = lr;
    }
    c.resolve_seed();
    c.architecture.validate()?;
    c.training.validate()?;
    let spec = c.split_spec()?;

    let manifest = load_manifest(&args.manifest)?;
    tracing::info!("loaded {} records: {}", manifest.len(), manifest.counts());
    let balanced = undersample(&manifest, c.seed)?;
    let (train_set, val_set) = split(&balanced, &spec)?;
    tracing::info!("training on {} images, validating on {}", train_set.len(), val_set.len());

    create_dir(&args.out)?;
    c.write(&args.out.join("config.toml"))?;
    write_manifest(&train_set, args.out.join("train.csv"))?;
    write_manifest(&val_set, args.out.join("validation.csv"))?;

    let preprocess = PreprocessConfig::for_input(c.architecture.input_shape);
    let mut model = ModelHandle::build(&c.architecture, re_tagger_core::candle_core::DType::F32)?;
    let report = run_two_stage(
        &mut model,
        &ExampleSet::from_manifest(&train_set, preprocess.clone()),
        &ExampleSet::from_manifest(&val_set, preprocess.clone()),
        &c.training,
    )?;
    write_file(&args.out.join("report.jsonl"), report.to_jsonl()?)?;
    let bundle = export_bundle(model, preprocess, Some(c.training.clone()), args.out.join("bundle"))?;
    if let Some(v) = report.final_validation() {
        println!("validation accuracy {:.4}, loss {:.4}", v.accuracy, v.loss);
    }
    println!("bundle {} written to {}", bundle.identifier(), args.out.join("bundle").display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult {
    let mut c = args.common.resolve()?;
    c.resolve_seed();
    let bundle = load_bundle(&args.bundle)?;
    let manifest = load_manifest(&args.manifest)?;
    let policy = if args.skip_unreadable {
        OnUnreadable::Skip
    } else {
        OnUnreadable::Abort
    };
    let report = evaluate(&bundle, &manifest, policy)?;
    let table = report.to_table();
    print!("{table}");
    println!("accuracy {:.4} on {} images", report.accuracy, report.samples);
    if let Some(out) = &args.out {
        create_dir(out)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
        write_file(&out.join("eval.json"), json + "\n")?;
        write_file(&out.join("table.txt"), &table)?;
        c.write(&out.join("config.toml"))?;
    }
    Ok(())
}

fn predict(args: PredictArgs) -> CliResult {
    let mut c = args.common.resolve()?;
    c.resolve_seed();
    let bundle = load_bundle(&args.bundle)?;
    let bytes = std::fs::read(&args.image)
        .map_err(|e| CliError::User(format!("cannot read {}: {e}", args.image.display())))?;
    let scores = bundle.predict(&bytes).map_err(|e| match e {
        re_tagger_core::Error::Decode(m) => CliError::User(format!("{}: {m}", args.image.display())),
        e => e.into(),
    })?;
    println!("{}", scores.to_json());
    if args.top {
        println!("{}", scores.top_label());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> CliResult {
    let mut c = args.common.resolve()?;
    c.resolve_seed();
    let mut service = c.service.clone();
    service.bundle = args.bundle;
    if let Some(h) = args.host {
        service.host = h;
    }
    if let Some(p) = args.port {
        service.port = p;
    }
    if let Some(n) = args.max_upload_bytes {
        service.max_upload_bytes = n;
    }
    if let Some(n) = args.workers {
        service.workers = n;
    }
    tracing::debug!("effective service config: {service:?}");
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    runtime.block_on(async move {
        let listener = re_tagger_service::bind(&service).await?;
        re_tagger_service::serve(listener, service, re_tagger_service::shutdown_signal()).await?;
        Ok(())
    })
}

fn synth(args: SynthArgs) -> CliResult {
    let c = args.common.resolve()?;
    let counts: [usize; 6] = args
        .counts
        .try_into()
        .map_err(|_| CliError::User("--counts takes six values".into()))?;
    let (path, manifest) = synthetic::write_dataset(&args.out, counts, c.seed)?;
    println!("{} images, manifest {}", manifest.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
