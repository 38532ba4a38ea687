//! Command-line driver: VAD transforms, partition statistics, synthetic data
//! generation, training, evaluation and gradient checking.
//!
//! Exit codes: 0 on success, 1 when a check or metric gate fails
//! (`gradcheck`), 2 on usage or input errors. Every subcommand prints its
//! resolved effective configuration (built-in defaults, overridden by
//! `--config` file values, overridden by flags) before doing work.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use vadsphere::data::{
    filter_x_labels, load_features, load_manifest, split_per_category, synthesize_dataset,
    SynthConfig,
};
use vadsphere::geometry::{
    assign_region, make_partition, normalize_vad, to_spherical, RegionPartition, VadPoint,
};
use vadsphere::gradcheck::{run_suite, GradCheckConfig};
use vadsphere::losses::{inverse_frequency_weights, ScheduleConfig};
use vadsphere::metrics::EvalReport;
use vadsphere::nn::{Model, ModelConfig, PoolingKind};
use vadsphere::trainer::{
    auxiliary_weights, build_category_vocab, fit, history_to_tsv, validate, AuxMode, LoadedSet,
    TrainConfig, WceMode,
};

#[derive(Parser)]
#[command(
    name = "vadsphere",
    version,
    about = "Spherical VAD emotion space toolkit",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw VAD triple and print its spherical form and region.
    Transform(TransformArgs),
    /// Region occupancy and inverse-frequency weights for a manifest.
    PartitionStats(PartitionStatsArgs),
    /// Generate a synthetic manifest plus feature files.
    Synth(SynthArgs),
    /// Train a model on a manifest and write checkpoint, history and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest and write the report.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AuxModeArg {
    SphericalRegion,
    Categorical,
    None,
}

impl From<AuxModeArg> for AuxMode {
    fn from(value: AuxModeArg) -> Self {
        match value {
            AuxModeArg::SphericalRegion => AuxMode::SphericalRegion,
            AuxModeArg::Categorical => AuxMode::Categorical,
            AuxModeArg::None => AuxMode::None,
        }
    }
}

impl Display for AuxModeArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxModeArg::SphericalRegion => "spherical-region",
            AuxModeArg::Categorical => "categorical",
            AuxModeArg::None => "none",
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WceArg {
    Weighted,
    Unweighted,
}

impl Display for WceArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WceArg::Weighted => "weighted",
            WceArg::Unweighted => "unweighted",
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Style,
    AttentiveStats,
}

impl Display for PoolingArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingArg::Style => "style",
            PoolingArg::AttentiveStats => "attentive-stats",
        })
    }
}

#[derive(Args)]
struct TransformArgs {
    /// Raw VAD triple "v,a,d", each component in [1,7].
    #[arg(long)]
    vad: String,
    /// Angular width of the partition in degrees.
    #[arg(long)]
    angle: Option<f64>,
    /// Key-value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionStatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    angle: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for manifest.tsv and features/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    angle: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest. Without --val-manifest, a per-category sample is
    /// carved out for validation and the remainder is trained on.
    #[arg(long)]
    manifest: PathBuf,
    /// Separate validation manifest.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Validation samples per category when carving from --manifest.
    #[arg(long)]
    val_per_class: Option<usize>,
    /// Output directory for model.ckpt, history.tsv and report files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    angle: Option<f64>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    aux_mode: Option<AuxModeArg>,
    #[arg(long)]
    wce: Option<WceArg>,
    #[arg(long)]
    pooling: Option<PoolingArg>,
    /// Decay the auxiliary weight per the schedule (true) or hold it at 1.
    #[arg(long)]
    dynamic_weighting: Option<bool>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    angle: Option<f64>,
    /// Prefix for the report files (<prefix>.txt and <prefix>.json).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    aux_mode: Option<AuxModeArg>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random seeds per check.
    #[arg(long)]
    seeds: Option<u64>,
    /// Central-difference step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    layer_tol: Option<f64>,
    #[arg(long)]
    model_tol: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Errors and exit codes.

enum CliError {
    /// Usage or input problem: exit 2.
    Input(String),
    /// A check or metric gate failed: exit 1.
    Check(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Transform(args) => cmd_transform(args),
        Command::PartitionStats(args) => cmd_partition_stats(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// Config-file handling: `key = value` lines, `#` comments. Keys are the long
// flag names. Flags override file values; file values override defaults.

struct FileConfig {
    values: HashMap<String, String>,
    path: Option<PathBuf>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read config {path:?}: {e}")))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Input(format!(
                        "config {path:?} line {}: expected `key = value`",
                        lineno + 1
                    ))
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig {
            values,
            path: path.map(Path::to_path_buf),
        })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                CliError::Input(format!(
                    "config {:?}: cannot parse {key} = `{raw}`",
                    self.path.as_deref().unwrap_or(Path::new("<none>"))
                ))
            }),
        }
    }
}

/// flag > config file > default.
fn resolve<T>(flag: Option<T>, file: Result<Option<T>, CliError>, default: T) -> Result<T, CliError> {
    Ok(flag.or(file?).unwrap_or(default))
}

fn print_config(entries: &[(&str, String)]) {
    for (key, value) in entries {
        println!("config: {key} = {value}");
    }
}

// ---------------------------------------------------------------------------
// Subcommands.

fn parse_vad_triple(raw: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Input(format!(
            "--vad expects `v,a,d`, got `{raw}`"
        )));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|_| CliError::Input(format!("`{part}` is not a number")))?;
    }
    Ok(out)
}

fn cmd_transform(args: TransformArgs) -> CliResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let angle = resolve(args.angle, file.get("angle"), 90.0)?;
    print_config(&[
        ("vad", args.vad.clone()),
        ("angle", angle.to_string()),
    ]);

    let [v, a, d] = parse_vad_triple(&args.vad)?;
    let raw = VadPoint::raw(v, a, d)?;
    let norm = normalize_vad(&raw)?;
    let spherical = to_spherical(&norm)?;
    let partition = make_partition(angle)?;
    let label = assign_region(&partition, &spherical);

    println!("raw vad:       ({}, {}, {})", raw.v, raw.a, raw.d);
    println!(
        "normalized:    ({:.6}, {:.6}, {:.6})",
        norm.v, norm.a, norm.d
    );
    println!(
        "spherical:     r={:.6} azimuth={:.4}deg elevation={:.4}deg",
        spherical.r, spherical.azimuth_deg, spherical.elevation_deg
    );
    if spherical.r < vadsphere::geometry::DEGENERATE_RADIUS {
        println!("note:          magnitude ~ 0; angles use the canonical degenerate convention");
    }
    println!(
        "region:        {} of {} (angle {angle}deg, {} azimuth x {} elevation cells)",
        label.0,
        partition.n_regions(),
        partition.n_phi,
        partition.n_theta
    );
    Ok(())
}

fn cmd_partition_stats(args: PartitionStatsArgs) -> CliResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let angle = resolve(args.angle, file.get("angle"), 90.0)?;
    print_config(&[
        ("manifest", format!("{}", args.manifest.display())),
        ("angle", angle.to_string()),
    ]);

    let partition = make_partition(angle)?;
    let records = load_manifest(&args.manifest)?;
    let counts = vadsphere::data::compute_region_counts(&records, &partition)?;
    let total: u64 = counts.iter().sum();
    if total == 0 {
        println!("warning: manifest is empty");
    }

    let weights = if total > 0 {
        Some(inverse_frequency_weights(&counts)?)
    } else {
        None
    };
    println!(
        "partition: angle {angle}deg -> N = {} ({} azimuth x {} elevation)",
        partition.n_regions(),
        partition.n_phi,
        partition.n_theta
    );
    println!("{:<8} {:>8} {:>9} {:>10}", "region", "count", "percent", "weight");
    for (region, &count) in counts.iter().enumerate() {
        let percent = if total > 0 {
            100.0 * count as f64 / total as f64
        } else {
            0.0
        };
        match &weights {
            Some(w) => println!(
                "{:<8} {:>8} {:>8.2}% {:>10.4}",
                region,
                count,
                percent,
                w.weights()[region]
            ),
            None => println!("{:<8} {:>8} {:>8.2}% {:>10}", region, count, percent, "-"),
        }
    }
    println!("{:<8} {:>8} {:>8.2}%", "total", total, if total > 0 { 100.0 } else { 0.0 });
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let n = resolve(args.n, file.get("n"), 512)?;
    let feat_dim = resolve(args.feat_dim, file.get("feat-dim"), 16)?;
    let frames = resolve(args.frames, file.get("frames"), 10)?;
    let noise = resolve(args.noise, file.get("noise"), 0.05)?;
    let seed = resolve(args.seed, file.get("seed"), 0)?;
    let angle = resolve(args.angle, file.get("angle"), 90.0)?;
    print_config(&[
        ("out", format!("{}", args.out.display())),
        ("n", n.to_string()),
        ("feat-dim", feat_dim.to_string()),
        ("frames", frames.to_string()),
        ("noise", noise.to_string()),
        ("seed", seed.to_string()),
        ("angle", angle.to_string()),
    ]);

    if n == 0 {
        return Err(CliError::Input("--n must be >= 1".into()));
    }
    let partition = make_partition(angle)?;
    let dataset = synthesize_dataset(
        &args.out,
        &SynthConfig {
            n,
            feat_dim,
            frames,
            noise,
            seed,
            partition,
        },
    )?;
    println!(
        "wrote {} records to {} (manifest.tsv + features/)",
        dataset.records.len(),
        args.out.display()
    );
    println!("region occupancy: {:?}", dataset.region_counts);
    Ok(())
}

struct ResolvedTrain {
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    angle: f64,
    val_per_class: usize,
}

fn resolve_train(args: &TrainArgs, feat_dim_from_data: usize) -> Result<ResolvedTrain, CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let angle = resolve(args.angle, file.get("angle"), 90.0)?;
    let feat_dim = resolve(args.feat_dim, file.get("feat-dim"), feat_dim_from_data)?;
    let hidden = resolve(args.hidden, file.get("hidden"), 32)?;
    let heads = resolve(args.heads, file.get("heads"), 2)?;
    let kernel = resolve(args.kernel, file.get("kernel"), 5)?;
    let epochs = resolve(args.epochs, file.get("epochs"), 30)?;
    let batch_size = resolve(args.batch_size, file.get("batch-size"), 32)?;
    let lr = resolve(args.lr, file.get("lr"), 1e-3)?;
    let weight_decay = resolve(args.weight_decay, file.get("weight-decay"), 0.01)?;
    let seed = resolve(args.seed, file.get("seed"), 0)?;
    let val_per_class = resolve(args.val_per_class, file.get("val-per-class"), 8)?;
    let dynamic = resolve(args.dynamic_weighting, file.get("dynamic-weighting"), true)?;

    let aux_mode: AuxMode = args.aux_mode.map(AuxMode::from).unwrap_or_else(|| {
        match file.values.get("aux-mode").map(String::as_str) {
            Some("categorical") => AuxMode::Categorical,
            Some("none") => AuxMode::None,
            _ => AuxMode::SphericalRegion,
        }
    });
    let wce_mode = match (args.wce, file.values.get("wce").map(String::as_str)) {
        (Some(WceArg::Unweighted), _) | (None, Some("unweighted")) => WceMode::Unweighted,
        _ => WceMode::Weighted,
    };
    let pooling = match (args.pooling, file.values.get("pooling").map(String::as_str)) {
        (Some(PoolingArg::AttentiveStats), _) | (None, Some("attentive-stats")) => {
            PoolingKind::AttentiveStats
        }
        _ => PoolingKind::StylePooling,
    };

    let partition = make_partition(angle)?;
    let model_cfg = ModelConfig {
        feat_dim,
        hidden_dim: hidden,
        n_heads: heads,
        kernel_size: kernel,
        n_regions: partition.n_regions(),
        pooling,
        seed,
    };
    let train_cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        weight_decay,
        schedule: ScheduleConfig {
            enabled: dynamic,
            ..ScheduleConfig::default()
        },
        aux_mode,
        wce_mode,
        seed,
        ..TrainConfig::default()
    };
    Ok(ResolvedTrain {
        model_cfg,
        train_cfg,
        angle,
        val_per_class,
    })
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let records = load_manifest(&args.manifest)?;
    if records.is_empty() {
        return Err(CliError::Input(format!(
            "manifest {} has no records",
            args.manifest.display()
        )));
    }
    let (_, probe_dim) = vadsphere::data::feature_dims(&records[0].feature_path)?;

    let resolved = resolve_train(&args, probe_dim)?;
    let ResolvedTrain {
        mut model_cfg,
        train_cfg,
        angle,
        val_per_class,
    } = resolved;

    print_config(&[
        ("manifest", format!("{}", args.manifest.display())),
        (
            "val-manifest",
            args.val_manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "<carved from manifest>".into()),
        ),
        ("val-per-class", val_per_class.to_string()),
        ("out", format!("{}", args.out.display())),
        ("angle", angle.to_string()),
        ("feat-dim", model_cfg.feat_dim.to_string()),
        ("hidden", model_cfg.hidden_dim.to_string()),
        ("heads", model_cfg.n_heads.to_string()),
        ("kernel", model_cfg.kernel_size.to_string()),
        ("epochs", train_cfg.epochs.to_string()),
        ("batch-size", train_cfg.batch_size.to_string()),
        ("lr", train_cfg.lr.to_string()),
        ("weight-decay", train_cfg.weight_decay.to_string()),
        ("seed", train_cfg.seed.to_string()),
        (
            "aux-mode",
            match train_cfg.aux_mode {
                AuxMode::SphericalRegion => "spherical-region".into(),
                AuxMode::Categorical => "categorical".into(),
                AuxMode::None => "none".into(),
            },
        ),
        (
            "wce",
            match train_cfg.wce_mode {
                WceMode::Weighted => "weighted".into(),
                WceMode::Unweighted => "unweighted".into(),
            },
        ),
        (
            "pooling",
            match model_cfg.pooling {
                PoolingKind::StylePooling => "style".into(),
                PoolingKind::AttentiveStats => "attentive-stats".into(),
            },
        ),
        ("dynamic-weighting", train_cfg.schedule.enabled.to_string()),
    ]);

    let partition = make_partition(angle)?;
    let (records, removed) = filter_x_labels(records);
    if removed > 0 {
        println!("excluded {removed} ambiguous (X-label) records");
    }

    let (train_records, val_records) = match &args.val_manifest {
        Some(val_path) => {
            let val = load_manifest(val_path)?;
            let (val, val_removed) = filter_x_labels(val);
            if val_removed > 0 {
                println!("excluded {val_removed} ambiguous (X-label) validation records");
            }
            (records, val)
        }
        None => {
            let split = split_per_category(&records, val_per_class, train_cfg.seed);
            for category in &split.undersized {
                println!(
                    "warning: category `{category}` has fewer than {val_per_class} records; all go to validation"
                );
            }
            (split.test, split.val)
        }
    };
    if val_records.len() < 2 {
        return Err(CliError::Input(
            "validation split has fewer than 2 records".into(),
        ));
    }

    let vocab = build_category_vocab(&[&train_records, &val_records]);
    let train_set = LoadedSet::load(&train_records, partition, model_cfg.feat_dim, &vocab)?;
    let val_set = LoadedSet::load(&val_records, partition, model_cfg.feat_dim, &vocab)?;
    if train_cfg.aux_mode == AuxMode::Categorical {
        model_cfg.n_regions = vocab.len();
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", args.out.display())))?;
    let checkpoint = args.out.join("model.ckpt");
    let mut model = Model::new(model_cfg)?;
    let result = fit(&mut model, &train_set, &val_set, &train_cfg, &checkpoint)?;

    let history_path = args.out.join("history.tsv");
    std::fs::write(&history_path, history_to_tsv(&result.history))
        .map_err(|e| CliError::Input(format!("cannot write history: {e}")))?;

    let best = &result.history[result.best_epoch];
    println!(
        "trained {} epochs over {} records ({} validation)",
        train_cfg.epochs,
        train_set.items.len(),
        val_set.items.len()
    );
    println!(
        "best epoch {} val_loss {:.6} ccc_mean {:.4} macro_f1 {:.4} accuracy {:.4}",
        result.best_epoch, result.best_val_loss, best.val.ccc_mean, best.val.macro_f1, best.val.accuracy
    );
    println!("checkpoint: {}", checkpoint.display());
    println!("history:    {}", history_path.display());

    // Final-state report files from the best checkpoint.
    let best_model = Model::load(&checkpoint)?;
    let weights = auxiliary_weights(&train_set, &train_cfg)?;
    let outcome = validate(&best_model, &val_set, &weights, &train_cfg, result.best_epoch)?;
    write_report(&args.out.join("val-report"), &outcome.report)?;
    Ok(())
}

fn write_report(prefix: &Path, report: &EvalReport) -> Result<(), CliError> {
    let txt = prefix.with_extension("txt");
    let json = prefix.with_extension("json");
    std::fs::write(&txt, report.to_kv_text())
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", txt.display())))?;
    std::fs::write(&json, report.to_json())
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", json.display())))?;
    println!("report:     {} and {}", txt.display(), json.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let angle = resolve(args.angle, file.get("angle"), 90.0)?;
    let batch_size = resolve(args.batch_size, file.get("batch-size"), 32)?;
    let aux_mode: AuxMode = args
        .aux_mode
        .map(AuxMode::from)
        .unwrap_or(AuxMode::SphericalRegion);
    print_config(&[
        ("checkpoint", format!("{}", args.checkpoint.display())),
        ("manifest", format!("{}", args.manifest.display())),
        ("angle", angle.to_string()),
        ("batch-size", batch_size.to_string()),
    ]);

    let model = Model::load(&args.checkpoint)?;
    let partition = make_partition(angle)?;
    let records = load_manifest(&args.manifest)?;
    let (records, removed) = filter_x_labels(records);
    if removed > 0 {
        println!("excluded {removed} ambiguous (X-label) records");
    }
    if records.len() < 2 {
        return Err(CliError::Input("need at least 2 records to evaluate".into()));
    }

    let vocab = build_category_vocab(&[&records]);
    let set = LoadedSet::load(&records, partition, model.config().feat_dim, &vocab)?;
    let expected_classes = set.aux_classes(aux_mode);
    if model.config().n_regions != expected_classes {
        return Err(CliError::Input(format!(
            "checkpoint classifier width {} does not match --angle {angle} ({} classes expected)",
            model.config().n_regions,
            expected_classes
        )));
    }

    let cfg = TrainConfig {
        batch_size,
        aux_mode,
        // Evaluation reports the plain losses; lambda plays no role here.
        schedule: ScheduleConfig {
            enabled: false,
            ..ScheduleConfig::default()
        },
        ..TrainConfig::default()
    };
    let weights = auxiliary_weights(&set, &cfg)?;
    let outcome = validate(&model, &set, &weights, &cfg, 0)?;
    println!(
        "ccc: v {:.4} a {:.4} d {:.4} | mean {:.4}",
        outcome.report.ccc_v, outcome.report.ccc_a, outcome.report.ccc_d, outcome.report.ccc_mean
    );
    println!(
        "classification: macro_f1 {:.4} accuracy {:.4}",
        outcome.report.macro_f1, outcome.report.accuracy
    );
    if let Some(prefix) = &args.out {
        if let Some(parent) = prefix.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| {
                    CliError::Input(format!("cannot create {}: {e}", parent.display()))
                })?;
            }
        }
        write_report(prefix, &outcome.report)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    let file = FileConfig::load(args.config.as_deref())?;
    let defaults = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        seeds: resolve(args.seeds, file.get("seeds"), defaults.seeds)?,
        fd_step: resolve(args.step, file.get("step"), defaults.fd_step)?,
        layer_tolerance: resolve(args.layer_tol, file.get("layer-tol"), defaults.layer_tolerance)?,
        model_tolerance: resolve(args.model_tol, file.get("model-tol"), defaults.model_tolerance)?,
    };
    print_config(&[
        ("seeds", cfg.seeds.to_string()),
        ("step", cfg.fd_step.to_string()),
        ("layer-tol", cfg.layer_tolerance.to_string()),
        ("model-tol", cfg.model_tolerance.to_string()),
    ]);
    if cfg.seeds == 0 {
        return Err(CliError::Input("--seeds must be >= 1".into()));
    }

    let report = run_suite(&cfg);
    for check in &report.checks {
        println!(
            "{}: max rel err {:.3e} (tolerance {:.1e}) {}",
            check.name,
            check.max_rel_err,
            check.tolerance,
            if check.passed() { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradient suite passed on {} seeds", report.seeds);
        Ok(())
    } else {
        let worst = report.worst().expect("at least one check");
        Err(CliError::Check(format!(
            "{}: max rel err {:.3e} exceeds tolerance {:.1e}",
            worst.name, worst.max_rel_err, worst.tolerance
        )))
    }
}
