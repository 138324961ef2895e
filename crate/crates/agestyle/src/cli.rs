//! Command-line interface: data prep, training, translation, augmentation,
//! and report subcommands with machine-readable JSON on stdout.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::augment::{
    aging_accuracy, augment, gt_means_profile, AgeEstimator, ConstantEstimator, OldestTargetPicker,
    SubprocessEstimator, TargetPicker, ToyOracleEstimator, UniformPicker,
};
use crate::dataset::{generate_toy, load_manifest, ToySpec};
use crate::diversity::diversity_report;
use crate::error::{Error, Result};
use crate::trainer::{load_image, save_image, translate, TrainConfig};

#[derive(Parser)]
#[command(
    name = "agestyle",
    version,
    about = "Style-based face aging for dataset diversity enhancement"
)]
struct Cli {
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ring-count corpus.
    Toygen(ToygenArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Translate one image toward a target image's age style.
    Translate(TranslateArgs),
    /// Translate every record to the remaining age groups.
    Augment(AugmentArgs),
    /// Compute diversity indices of a manifest.
    AuditDiversity(AuditArgs),
    /// Evaluate aging accuracy with an age estimator.
    EvalAge(EvalAgeArgs),
}

#[derive(Args)]
struct ToygenArgs {
    /// Output directory for images and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "image_size", default_value_t = 64)]
    image_size: usize,
    #[arg(long = "samples_per_group", default_value_t = 200)]
    samples_per_group: usize,
    #[arg(long = "noise_level", default_value_t = 0.1)]
    noise_level: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training-set manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with the full train config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long = "learning_rate")]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "image_size")]
    image_size: Option<usize>,
    #[arg(long = "n_layers")]
    n_layers: Option<usize>,
    #[arg(long = "base_channels")]
    base_channels: Option<usize>,
    #[arg(long = "lambda_rec")]
    lambda_rec: Option<f64>,
    #[arg(long = "lambda_id")]
    lambda_id: Option<f64>,
    #[arg(long = "lambda_gp")]
    lambda_gp: Option<f64>,
    #[arg(long = "use_translated_target_cycle")]
    use_translated_target_cycle: Option<bool>,
    #[arg(long = "checkpoint_every")]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to translate.
    #[arg(long)]
    input: PathBuf,
    /// Image providing the target age style.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to augment (style targets come from here too).
    #[arg(long)]
    manifest: PathBuf,
    /// Fallback target pool for groups missing from the manifest.
    #[arg(long = "train_manifest")]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Target selection strategy: uniform or oldest.
    #[arg(long, default_value = "uniform")]
    picker: String,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the report to <out>/diversity.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalAgeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest providing group-0 source images.
    #[arg(long = "source_manifest")]
    source_manifest: PathBuf,
    /// Manifest providing style targets (defaults to the source manifest).
    #[arg(long = "target_manifest")]
    target_manifest: Option<PathBuf>,
    /// In-process estimator name; currently `toy` or `constant:<years>`.
    #[arg(long, default_value = "toy", conflicts_with = "estimator_cmd")]
    estimator: String,
    /// External estimator: a command that gets the image path appended and
    /// prints the age on one line. Split on whitespace.
    #[arg(long = "estimator_cmd")]
    estimator_cmd: Option<String>,
    /// Ground-truth profile (toy, morph, cacd) or three comma-separated means.
    #[arg(long = "gt_means", default_value = "toy")]
    gt_means: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Target selection strategy: uniform or oldest.
    #[arg(long, default_value = "uniform")]
    picker: String,
}

/// Parse argv and execute. Returns the process exit code: 0 success, 1 user
/// error, 2 internal error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for problems in the user's inputs, 2 for violated internal invariants.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ShapeMismatch { .. }
        | Error::ChannelMismatch { .. }
        | Error::MissingLayer { .. }
        | Error::NonFiniteLoss { .. }
        | Error::TrainDiverged { .. } => 2,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Toygen(args) => toygen(args),
        Command::Train(args) => train(args),
        Command::Translate(args) => run_translate(args),
        Command::Augment(args) => run_augment(args),
        Command::AuditDiversity(args) => audit(args),
        Command::EvalAge(args) => eval_age(args),
    }
}

/// Use the given seed, or generate one and make it visible.
fn resolve_seed(flag: Option<u64>) -> u64 {
    match flag {
        Some(seed) => seed,
        None => {
            let seed: u64 = rand::thread_rng().gen();
            log::info!("no --seed given; generated seed {seed}");
            seed
        }
    }
}

fn toygen(args: ToygenArgs) -> Result<()> {
    let spec = ToySpec {
        image_size: args.image_size,
        samples_per_group: args.samples_per_group,
        noise_level: args.noise_level,
        seed: resolve_seed(args.seed),
    };
    let manifest = generate_toy(&spec, &args.out)?;
    let csv = args.out.join("manifest.csv");
    manifest.save_csv(&csv)?;
    println!(
        "wrote {} images ({} per group) at {}px, seed {}",
        manifest.len(),
        spec.samples_per_group,
        spec.image_size,
        spec.seed
    );
    println!("manifest: {}", csv.display());
    Ok(())
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.beta1 {
        config.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        config.beta2 = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.image_size {
        config.image_size = v;
    }
    if let Some(v) = args.n_layers {
        config.n_layers = v;
    }
    if let Some(v) = args.base_channels {
        config.base_channels = v;
    }
    if let Some(v) = args.lambda_rec {
        config.weights.lambda_rec = v;
    }
    if let Some(v) = args.lambda_id {
        config.weights.lambda_id = v;
    }
    if let Some(v) = args.lambda_gp {
        config.weights.lambda_gp = v;
    }
    if let Some(v) = args.use_translated_target_cycle {
        config.use_translated_target_cycle = v;
    }
    if let Some(v) = args.checkpoint_every {
        config.checkpoint_every = v;
    }
    config.seed = match (args.seed, &args.config) {
        (Some(seed), _) => seed,
        (None, Some(_)) => config.seed,
        (None, None) => resolve_seed(None),
    };
    config.validate()?;
    Ok(config)
}

fn train(args: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let artifacts = match &args.resume {
        Some(checkpoint) => crate::trainer::resume(checkpoint, &manifest, &args.out, args.steps)?,
        None => {
            let config = build_train_config(&args)?;
            fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
            let rendered = toml::to_string_pretty(&config)
                .map_err(|e| Error::Config(format!("render config: {e}")))?;
            fs::write(args.out.join("config.toml"), rendered)
                .map_err(|e| Error::io(args.out.join("config.toml"), e))?;
            crate::trainer::train(&config, &manifest, &args.out)?
        }
    };
    println!("final checkpoint: {}", artifacts.final_checkpoint.display());
    println!("loss log: {}", artifacts.loss_log.display());
    Ok(())
}

fn run_translate(args: TranslateArgs) -> Result<()> {
    let state = crate::checkpoint::load(&args.checkpoint)?;
    let size = state.config.image_size;
    let x = load_image(&args.input, size)?;
    let t = load_image(&args.target, size)?;
    let y = translate(&state.generator, &state.discriminator, &x, &t)?;
    let stem = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let out_path = args.out.join(format!("{stem}_translated.png"));
    save_image(&y, &out_path)?;
    println!("{}", out_path.display());
    Ok(())
}

fn make_picker(name: &str, seed: u64) -> Result<Box<dyn TargetPicker>> {
    match name {
        "uniform" => Ok(Box::new(UniformPicker::new(seed))),
        "oldest" => Ok(Box::new(OldestTargetPicker::new())),
        other => Err(Error::InvalidArgument(format!(
            "unknown picker {other:?}; expected uniform or oldest"
        ))),
    }
}

fn run_augment(args: AugmentArgs) -> Result<()> {
    let state = crate::checkpoint::load(&args.checkpoint)?;
    let test_set = load_manifest(&args.manifest)?;
    let train_set = args
        .train_manifest
        .as_deref()
        .map(load_manifest)
        .transpose()?;
    let seed = resolve_seed(args.seed);
    let mut picker = make_picker(&args.picker, seed)?;
    let augmented = augment(
        &state,
        &test_set,
        train_set.as_ref(),
        picker.as_mut(),
        &args.out,
    )?;
    let summary = serde_json::json!({
        "manifest": args.out.join("manifest.csv"),
        "records": augmented.len(),
        "group_counts": augmented.group_counts(),
        "seed": seed,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn audit(args: AuditArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let report = diversity_report(&manifest)?;
    let json = serde_json::to_string_pretty(&report).expect("json");
    println!("{json}");
    eprintln!("{report}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        fs::write(out.join("diversity.json"), &json)
            .map_err(|e| Error::io(out.join("diversity.json"), e))?;
    }
    Ok(())
}

fn parse_gt_means(spec: &str) -> Result<[f64; 3]> {
    if let Some(profile) = gt_means_profile(spec) {
        return Ok(profile);
    }
    let parts: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::InvalidArgument(format!(
                "gt_means {spec:?} is neither a profile (toy, morph, cacd) nor three numbers"
            ))
        })?;
    parts.try_into().map_err(|_| {
        Error::InvalidArgument(format!("gt_means {spec:?} must have exactly three values"))
    })
}

fn make_estimator(args: &EvalAgeArgs) -> Result<Box<dyn AgeEstimator>> {
    if let Some(cmd) = &args.estimator_cmd {
        let mut words = cmd.split_whitespace().map(str::to_string);
        let program = words
            .next()
            .ok_or_else(|| Error::InvalidArgument("estimator_cmd must name a program".into()))?;
        return Ok(Box::new(SubprocessEstimator::new(program, words.collect())));
    }
    match args.estimator.as_str() {
        "toy" => Ok(Box::new(ToyOracleEstimator)),
        other => match other.strip_prefix("constant:").and_then(|v| v.parse().ok()) {
            Some(age) => Ok(Box::new(ConstantEstimator(age))),
            None => Err(Error::InvalidArgument(format!(
                "unknown estimator {other:?}; expected toy or constant:<years>"
            ))),
        },
    }
}

fn eval_age(args: EvalAgeArgs) -> Result<()> {
    let state = crate::checkpoint::load(&args.checkpoint)?;
    let source = load_manifest(&args.source_manifest)?;
    let targets = match &args.target_manifest {
        Some(path) => load_manifest(path)?,
        None => source.clone(),
    };
    let estimator = make_estimator(&args)?;
    let seed = resolve_seed(args.seed);
    let mut picker = make_picker(&args.picker, seed)?;
    let gt_means = parse_gt_means(&args.gt_means)?;
    let report = aging_accuracy(
        &state,
        &source,
        &targets,
        estimator.as_ref(),
        picker.as_mut(),
        gt_means,
        &args.out,
    )?;
    let json = serde_json::to_string_pretty(&report).expect("json");
    println!("{json}");
    eprintln!("{report}");
    fs::write(args.out.join("age_accuracy.json"), &json)
        .map_err(|e| Error::io(args.out.join("age_accuracy.json"), e))?;
    Ok(())
}
