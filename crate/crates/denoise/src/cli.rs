//! Command-line front end for the `denoise` binary.
//!
//! One subcommand per workflow: `train`, `denoise`, `eval`, `profile`,
//! `visualize`, `classify-train`, and `route`. Human-readable progress
//! goes to standard error; machine output (images, models, CSV/JSON)
//! goes to files or standard output only. Exit codes: 0 on success, 1 on
//! a usage error, 2 on a runtime failure.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! `--config` JSON file, then explicit flags. A flag always wins.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::error::Error;
use crate::eval::{
    self, denoise_image, evaluate, gain_profile, profile_csv, records_from_csv, report_csv,
    Aggregate, BaselineScores, EvalReport, ReportFormat, PAD_MARGIN,
};
use crate::image_io::{load_corpus, load_image, save_image, to_net_range};
use crate::net::{visualize_estimates, Network, NetworkConfig};
use crate::noise::NoiseSpec;
use crate::router::{
    load_labeled_corpus, route_denoise, Classifier, ClassifierConfig, ClassifierTrainConfig,
    ClassLabel, DenoiserRegistry, RouteMode, train_classifier,
};
use crate::train::{loss_log_csv, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "denoise",
    version,
    about = "Train, run, and score residual denoisers for Gaussian and Poisson noise",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for parallel sections; results are identical for
    /// any value [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on a directory of clean images
    Train(TrainArgs),
    /// Run a model over one noisy image
    Denoise(DenoiseArgs),
    /// Score a model over a corpus of clean images with synthetic noise
    Eval(EvalArgs),
    /// Rank per-image gains of an evaluation against baseline scores
    Profile(ProfileArgs),
    /// Save a model's per-layer noise estimates as images
    Visualize(VisualizeArgs),
    /// Train the routing classifier on a directory-per-class corpus
    ClassifyTrain(ClassifyTrainArgs),
    /// Classify an image and denoise it with the routed model
    Route(RouteArgs),
}

/// Which corruption to synthesize. Exactly one of the two flags selects
/// the noise family.
#[derive(Args, Clone, Copy)]
struct NoiseArgs {
    /// Gaussian noise standard deviation on the 0-255 intensity scale
    #[arg(long, value_name = "SIGMA", conflicts_with = "peak")]
    sigma: Option<f64>,
    /// Poisson noise peak expected photon count
    #[arg(long, value_name = "PEAK")]
    peak: Option<f64>,
}

impl NoiseArgs {
    fn spec(&self) -> Option<NoiseSpec> {
        match (self.sigma, self.peak) {
            (Some(sigma_255), None) => Some(NoiseSpec::Gaussian { sigma_255 }),
            (None, Some(peak)) => Some(NoiseSpec::Poisson { peak }),
            (None, None) => None,
            (Some(_), Some(_)) => unreachable!("clap rejects the conflict"),
        }
    }

    fn required(&self) -> std::result::Result<NoiseSpec, CliError> {
        self.spec()
            .ok_or_else(|| CliError::Usage("pass --sigma S or --peak P to pick the noise".into()))
    }
}

/// Optional JSON settings file. Recognized top-level keys: "network",
/// "train", "classifier", "classifier_train"; each holds that
/// configuration object. Unknown keys are rejected.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    network: Option<NetworkConfig>,
    train: Option<TrainConfig>,
    classifier: Option<ClassifierConfig>,
    classifier_train: Option<ClassifierTrainConfig>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> std::result::Result<FileConfig, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of clean training images (PNG/PGM)
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Where to write the trained model
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
    /// JSON settings file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Network depth in layers [default: 20]
    #[arg(long, value_name = "D")]
    depth: Option<usize>,
    /// Convolutions per layer, the per-layer estimate included when skip
    /// connections are on [default: 64]
    #[arg(long, value_name = "K")]
    kernels: Option<usize>,
    /// Drop per-layer estimates: plain feedforward stack closed by a
    /// single residual convolution
    #[arg(long)]
    no_skip: bool,
    /// Square training patch side [default: 128]
    #[arg(long, value_name = "P")]
    patch: Option<usize>,
    /// Border width excluded from the loss [default: 21]
    #[arg(long, value_name = "M")]
    margin: Option<usize>,
    /// Optimization steps [default: 2000]
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// Patches per step [default: 64]
    #[arg(long, value_name = "B")]
    batch_size: Option<usize>,
    /// ADAM learning rate [default: 0.0001]
    #[arg(long, value_name = "A")]
    alpha: Option<f64>,
    /// Disable horizontal-flip augmentation
    #[arg(long)]
    no_hflip: bool,
    /// Root seed for initialization and sampling [default: 0]
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Write a checkpoint every N steps next to the model (0 = never)
    /// [default: 0]
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<u64>,
    /// Record the loss every N steps [default: 1]
    #[arg(long, value_name = "N")]
    log_every: Option<u64>,
    /// Write the loss log as CSV here
    #[arg(long, value_name = "FILE")]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Trained model file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Noisy input image (PNG/PGM)
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Where to write the denoised image (PNG/PGM by extension)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Mirror-padding width applied before inference [default: 21]
    #[arg(long, value_name = "M")]
    margin: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Directory of clean evaluation images
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Noise realizations per image [default: 15]
    #[arg(long, value_name = "N")]
    realizations: Option<usize>,
    /// Evaluation seed keying the per-image noise streams [default: 0]
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Mirror-padding width applied before inference [default: 21]
    #[arg(long, value_name = "M")]
    margin: Option<usize>,
    /// Override the corruption stored in the model file
    #[command(flatten)]
    noise: NoiseArgs,
    /// Report format [default: csv]
    #[arg(long, value_enum, value_name = "FMT")]
    format: Option<OutputFormat>,
    /// Write the report here instead of standard output
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Evaluation record CSV produced by `eval`
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// Baseline per-image PSNR CSV (`image,psnr`)
    #[arg(long, value_name = "FILE")]
    baseline: PathBuf,
    /// Output format [default: csv]
    #[arg(long, value_enum, value_name = "FMT")]
    format: Option<OutputFormat>,
    /// Write the gain profile here instead of standard output
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Trained model file (skip connections required)
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Noisy input image
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Directory for the estimate images (created if missing)
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// 1-based layers to render, comma separated [default: every layer]
    #[arg(long, value_name = "L1,L2,...", value_delimiter = ',')]
    layers: Option<Vec<usize>>,
}

#[derive(Args)]
struct ClassifyTrainArgs {
    /// Labeled corpus: one subdirectory per class
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,
    /// Where to write the trained classifier
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
    /// JSON settings file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Square side images are resized to before classification
    /// [default: 128]
    #[arg(long, value_name = "P")]
    side: Option<usize>,
    /// Optimization steps [default: 400]
    #[arg(long, value_name = "N")]
    steps: Option<u64>,
    /// Images per step [default: 16]
    #[arg(long, value_name = "B")]
    batch_size: Option<usize>,
    /// ADAM learning rate [default: 0.0001]
    #[arg(long, value_name = "A")]
    alpha: Option<f64>,
    /// Root seed for initialization and sampling [default: 0]
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Write the loss log as CSV here
    #[arg(long, value_name = "FILE")]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    /// Registry JSON mapping classes and noise to model files
    #[arg(long, value_name = "FILE")]
    registry: PathBuf,
    /// Trained classifier file deciding the class
    #[arg(long, value_name = "FILE", conflicts_with = "class")]
    classifier: Option<PathBuf>,
    /// Skip classification and trust this class name (oracle routing)
    #[arg(long, value_name = "NAME")]
    class: Option<String>,
    /// Noisy input image
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Where to write the denoised image
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Mirror-padding width applied before inference [default: 21]
    #[arg(long, value_name = "M")]
    margin: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Parses `std::env::args`, runs the selected subcommand, and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                0
            } else {
                eprint!("{e}");
                1
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be >= 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return 2;
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), CliError> {
    match command {
        Command::Train(args) => run_train(args),
        Command::Denoise(args) => run_denoise(args),
        Command::Eval(args) => run_eval(args),
        Command::Profile(args) => run_profile(args),
        Command::Visualize(args) => run_visualize(args),
        Command::ClassifyTrain(args) => run_classify_train(args),
        Command::Route(args) => run_route(args),
    }
}

/// Applies defaults, file config, and flags, in that order.
fn merge_train_config(args: &TrainArgs, file: &FileConfig) -> (NetworkConfig, TrainConfig) {
    let mut net = file.network.unwrap_or_default();
    if args.no_skip {
        net.skip_connections = false;
    }
    if let Some(depth) = args.depth {
        net.depth = depth;
    }
    if let Some(kernels) = args.kernels {
        // Ablation tables count every convolution in a layer, so with
        // skip connections one kernel is the estimate conv.
        net.feed_channels = if net.skip_connections {
            kernels.saturating_sub(1)
        } else {
            kernels
        };
    }
    let mut tc = file.train.clone().unwrap_or_default();
    if let Some(patch) = args.patch {
        tc.patch = patch;
    }
    if let Some(margin) = args.margin {
        tc.loss_margin = margin;
    }
    if let Some(steps) = args.steps {
        tc.steps = steps;
    }
    if let Some(batch) = args.batch_size {
        tc.batch_size = batch;
    }
    if let Some(alpha) = args.alpha {
        tc.adam.alpha = alpha;
    }
    if args.no_hflip {
        tc.hflip = false;
    }
    if let Some(seed) = args.seed {
        tc.seed = seed;
        net.seed = seed;
    }
    if let Some(every) = args.checkpoint_every {
        tc.checkpoint_every = every;
    }
    if let Some(every) = args.log_every {
        tc.log_every = every;
    }
    (net, tc)
}

fn run_train(args: TrainArgs) -> std::result::Result<(), CliError> {
    let spec = args.noise.required()?;
    let file = FileConfig::load(args.config.as_deref())?;
    let (net_cfg, train_cfg) = merge_train_config(&args, &file);
    net_cfg.validate().map_err(usage)?;
    train_cfg.validate().map_err(usage)?;
    let corpus = load_corpus(&args.corpus)?;
    log::info!(
        "training on {} images: depth {}, {} kernels/layer, {}",
        corpus.len(),
        net_cfg.depth,
        net_cfg.kernels_per_layer(),
        spec.describe()
    );
    let checkpoint_dir = if train_cfg.checkpoint_every > 0 {
        Some(args.out.parent().unwrap_or(Path::new(".")).to_path_buf())
    } else {
        None
    };
    let outcome = train(&corpus, net_cfg, &train_cfg, &spec, checkpoint_dir.as_deref())?;
    outcome.network.save(&spec, &outcome.fingerprint, &args.out)?;
    log::info!("wrote model to {}", args.out.display());
    if let Some(path) = &args.loss_log {
        std::fs::write(path, loss_log_csv(&outcome.loss_log))
            .map_err(|e| Error::io(path, e))?;
        log::info!("wrote loss log to {}", path.display());
    }
    Ok(())
}

fn run_denoise(args: DenoiseArgs) -> std::result::Result<(), CliError> {
    let (net, spec, _) = Network::load(&args.model)?;
    let img = load_image(&args.input)?;
    log::info!(
        "denoising {}x{} image with a {} model",
        img.height(),
        img.width(),
        spec.describe()
    );
    let out = denoise_image(&net, &img, args.margin.unwrap_or(PAD_MARGIN))?;
    save_image(&out, &args.out)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> std::result::Result<(), CliError> {
    let (net, stored_spec, _) = Network::load(&args.model)?;
    let spec = match args.noise.spec() {
        Some(chosen) => {
            if chosen != stored_spec {
                log::warn!(
                    "evaluating under {} though the model was trained for {}",
                    chosen.describe(),
                    stored_spec.describe()
                );
            }
            chosen
        }
        None => stored_spec,
    };
    let corpus = load_corpus(&args.corpus)?;
    let report = evaluate(
        &corpus,
        &net,
        &spec,
        args.realizations.unwrap_or(15),
        args.seed.unwrap_or(0),
        args.margin.unwrap_or(PAD_MARGIN),
    )?;
    if let (Some(n), Some(d)) = (
        report.aggregate.mean_psnr_noisy,
        report.aggregate.mean_psnr_denoised,
    ) {
        log::info!("mean PSNR: noisy {n:.2} dB, denoised {d:.2} dB");
    }
    write_or_print(
        args.out.as_deref(),
        &report,
        args.format.unwrap_or(OutputFormat::Csv),
    )
}

fn run_profile(args: ProfileArgs) -> std::result::Result<(), CliError> {
    let report_text =
        std::fs::read_to_string(&args.report).map_err(|e| Error::io(&args.report, e))?;
    let records = records_from_csv(&report_text)?;
    let baseline = BaselineScores::read(&args.baseline)?;
    let report = EvalReport {
        aggregate: Aggregate::from_records(&records),
        records,
        profile: None,
    };
    let profile = gain_profile(&report, &baseline)?;
    log::info!(
        "{} images: win rate {:.3}, zero-crossing fraction {:.3}",
        profile.entries.len(),
        profile.win_rate,
        profile.zero_crossing_fraction
    );
    let text = match args.format.unwrap_or(OutputFormat::Csv) {
        OutputFormat::Csv => profile_csv(&profile),
        OutputFormat::Json => serde_json::to_string_pretty(&profile).map_err(Error::from)? + "\n",
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
            log::info!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run_visualize(args: VisualizeArgs) -> std::result::Result<(), CliError> {
    let (net, _, _) = Network::load(&args.model)?;
    let img = load_image(&args.input)?;
    let layers: Vec<usize> = match args.layers {
        Some(list) if !list.is_empty() => list,
        _ => (1..=net.config().depth).collect(),
    };
    let trace = net.forward(&to_net_range(&img), false)?;
    let images = visualize_estimates(&trace, &layers)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    for (layer, estimate) in layers.iter().zip(&images) {
        let path = args.out_dir.join(format!("estimate-{layer:02}.png"));
        save_image(estimate, &path)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn merge_classifier_config(
    args: &ClassifyTrainArgs,
    file: &FileConfig,
    n_classes: usize,
) -> (ClassifierConfig, ClassifierTrainConfig) {
    let mut cfg = file
        .classifier
        .clone()
        .unwrap_or_else(|| ClassifierConfig::desk(n_classes));
    if let Some(side) = args.side {
        cfg.input_side = side;
    }
    let mut tcfg = file.classifier_train.clone().unwrap_or_default();
    if let Some(steps) = args.steps {
        tcfg.steps = steps;
    }
    if let Some(batch) = args.batch_size {
        tcfg.batch_size = batch;
    }
    if let Some(alpha) = args.alpha {
        tcfg.adam.alpha = alpha;
    }
    if let Some(seed) = args.seed {
        tcfg.seed = seed;
        cfg.seed = seed;
    }
    (cfg, tcfg)
}

fn run_classify_train(args: ClassifyTrainArgs) -> std::result::Result<(), CliError> {
    let spec = args.noise.required()?;
    let file = FileConfig::load(args.config.as_deref())?;
    let (samples, classes) = load_labeled_corpus(&args.corpus)?;
    let (cfg, tcfg) = merge_classifier_config(&args, &file, classes.len());
    cfg.validate(classes.len()).map_err(usage)?;
    tcfg.validate().map_err(usage)?;
    log::info!(
        "training classifier on {} images over {} classes, {}",
        samples.len(),
        classes.len(),
        spec.describe()
    );
    let outcome = train_classifier(&samples, &classes, &cfg, &tcfg, &spec)?;
    outcome.classifier.save(&args.out)?;
    log::info!("wrote classifier to {}", args.out.display());
    if let Some(path) = &args.loss_log {
        std::fs::write(path, loss_log_csv(&outcome.loss_log))
            .map_err(|e| Error::io(path, e))?;
        log::info!("wrote loss log to {}", path.display());
    }
    Ok(())
}

fn run_route(args: RouteArgs) -> std::result::Result<(), CliError> {
    let spec = args.noise.required()?;
    let registry = DenoiserRegistry::from_file(&args.registry)?;
    let classifier = match &args.classifier {
        Some(path) => Some(Classifier::load(path)?),
        None => None,
    };
    // The oracle label index is irrelevant to dispatch; only the name
    // reaches the registry.
    let oracle = args.class.as_ref().map(|name| ClassLabel::new(0, name.clone()));
    let mode = match (&classifier, &oracle) {
        (Some(c), None) => RouteMode::Classifier(c),
        (None, Some(label)) => RouteMode::Oracle(label),
        (None, None) => {
            return Err(CliError::Usage(
                "pass --classifier FILE or --class NAME to pick the routing mode".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the conflict"),
    };
    let img = load_image(&args.input)?;
    let outcome = route_denoise(&img, &registry, mode, &spec, args.margin.unwrap_or(PAD_MARGIN))?;
    save_image(&outcome.image, &args.out)?;
    log::info!(
        "routed to class {:?} (model {:?}), wrote {}",
        outcome.label.name,
        outcome.model_class,
        args.out.display()
    );
    let summary = serde_json::json!({
        "class": outcome.label.name,
        "model_class": outcome.model_class,
        "probabilities": outcome.probabilities,
    });
    println!("{summary}");
    Ok(())
}

fn write_or_print(
    out: Option<&Path>,
    report: &EvalReport,
    format: OutputFormat,
) -> std::result::Result<(), CliError> {
    match out {
        Some(path) => {
            let fmt = match format {
                OutputFormat::Csv => ReportFormat::Csv,
                OutputFormat::Json => ReportFormat::Json,
            };
            eval::emit_report(report, path, fmt)?;
            log::info!("wrote {}", path.display());
        }
        None => {
            let text = match format {
                OutputFormat::Csv => report_csv(report),
                OutputFormat::Json => {
                    serde_json::to_string_pretty(report).map_err(Error::from)? + "\n"
                }
            };
            print!("{text}");
        }
    }
    Ok(())
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}
