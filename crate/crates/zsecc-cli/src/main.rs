//! `zsecc` — pipeline driver for zero-space ECC experiments.
//!
//! Typical run:
//!
//! ```text
//! zsecc train --out float.zsec
//! zsecc wot --model float.zsec --out wot.zsec --census-csv census.csv
//! zsecc protect --model wot.zsec --strategy in-place --out prot.zsec
//! zsecc inject --model prot.zsec --rate 1e-4 --seed 7 --out faulted.zsec
//! zsecc eval --model faulted.zsec
//! zsecc report --config experiment.cfg
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Failures print
//! one `error: ...` line to stderr.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use zsecc::fault::{
    apply_strategy_store, apply_strategy_store_with, inject_model, recover, run_experiment,
    FaultModel, FaultScope, ProtectionStrategy,
};
use zsecc::nn::{self, Dataset, FloatModel, QuantModel};
use zsecc::store::{load_model, save_model, StoredModel};
use zsecc::wot::{self, WotConfig};

#[derive(Parser)]
#[command(
    name = "zsecc",
    version,
    about = "Zero-space ECC protection for int8 CNN weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float reference CNN and save it.
    Train(TrainArgs),
    /// Quantize a float model to int8 (activation scales calibrated on
    /// the first training batch).
    Quantize(QuantizeArgs),
    /// Throttled fine-tuning until the 8-bit baseline accuracy is
    /// recovered; saves the compliant quantized model.
    Wot(WotArgs),
    /// Re-store a quantized model under a protection strategy.
    Protect(ProtectArgs),
    /// Flip random bits in a protected model's weight memory.
    Inject(InjectArgs),
    /// Evaluate a model's accuracy on the test set.
    Eval(EvalArgs),
    /// Count large weights (outside [-64, 63]) by block position.
    Census(CensusArgs),
    /// Run the full strategy-by-rate fault-injection grid and write the
    /// per-trial, aggregate, and histogram CSVs.
    Report(ReportArgs),
}

/// Dataset selection, shared by the commands that need images. IDX file
/// pairs win over the synthetic generator when given.
#[derive(Args, Clone)]
struct DataOpts {
    /// Seed for the synthetic dataset.
    #[arg(long, default_value_t = 42)]
    synthetic_seed: u64,
    /// Class count for the synthetic dataset.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Training sample count (synthetic).
    #[arg(long, default_value_t = 2000)]
    train_count: usize,
    /// Test sample count (synthetic).
    #[arg(long, default_value_t = 500)]
    test_count: usize,
    /// IDX training images file.
    #[arg(long, requires = "idx_train_labels")]
    idx_train_images: Option<PathBuf>,
    /// IDX training labels file.
    #[arg(long, requires = "idx_train_images")]
    idx_train_labels: Option<PathBuf>,
    /// IDX test images file.
    #[arg(long, requires = "idx_test_labels")]
    idx_test_images: Option<PathBuf>,
    /// IDX test labels file.
    #[arg(long, requires = "idx_test_images")]
    idx_test_labels: Option<PathBuf>,
}

impl DataOpts {
    fn load(&self) -> anyhow::Result<(Dataset, Dataset)> {
        let train = match (&self.idx_train_images, &self.idx_train_labels) {
            (Some(images), Some(labels)) => Some(nn::load_idx(images, labels)?),
            _ => None,
        };
        let test = match (&self.idx_test_images, &self.idx_test_labels) {
            (Some(images), Some(labels)) => Some(nn::load_idx(images, labels)?),
            _ => None,
        };
        let (train, test) = match (train, test) {
            (Some(train), Some(test)) => (train, test),
            (None, None) => {
                let pool = nn::generate_synthetic(
                    self.synthetic_seed,
                    self.classes,
                    self.train_count + self.test_count,
                );
                pool.split(self.train_count)
            }
            (Some(train), None) => {
                // Carve the test split off the tail of the one file.
                let head = train.count.saturating_sub(self.test_count);
                train.split(head)
            }
            (None, Some(_)) => {
                return Err(usage_error("IDX test data given without training data"));
            }
        };
        if train.count == 0 || test.count == 0 {
            return Err(usage_error(format!(
                "empty dataset split: {} training and {} test samples",
                train.count, test.count
            )));
        }
        Ok((train, test))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataOpts,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed for weight init and batch shuffling.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    data: DataOpts,
    /// Input float model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WotArgs {
    #[command(flatten)]
    data: DataOpts,
    /// Input float model.
    #[arg(long)]
    model: PathBuf,
    /// Output quantized model (block-constraint compliant).
    #[arg(long)]
    out: PathBuf,
    /// Census log CSV path.
    #[arg(long)]
    census_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    max_epochs: usize,
    #[arg(long, default_value_t = 200)]
    eval_interval: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Accuracy to recover; defaults to the measured 8-bit baseline.
    #[arg(long)]
    target_accuracy: Option<f64>,
}

#[derive(Args)]
struct ProtectArgs {
    /// Input quantized model.
    #[arg(long)]
    model: PathBuf,
    /// One of: faulty, zero, ecc, in-place.
    #[arg(long)]
    strategy: String,
    /// Bias storage: `ecc` (standard (72,64,1), the default for protected
    /// strategies) or `raw`.
    #[arg(long, default_value = "ecc")]
    biases: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    /// Input protected model.
    #[arg(long)]
    model: PathBuf,
    /// Fault rate: flipped bits / total in-scope bits, in `[0, 1]`.
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    seed: u64,
    /// Injection scope: `all` (payload + redundancy) or `weights`.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataOpts,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct CensusArgs {
    /// Input quantized model.
    #[arg(long)]
    model: PathBuf,
    /// Write the position histogram CSV here.
    #[arg(long)]
    histogram_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
    /// Input quantized model (any strategy; recovered before the runs).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated fault rates.
    #[arg(long)]
    rates: Option<String>,
    #[arg(long)]
    trials: Option<u32>,
    /// Comma-separated strategies.
    #[arg(long)]
    strategies: Option<String>,
    /// `all` or `weights`.
    #[arg(long)]
    scope: Option<String>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Model name column in the CSVs.
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    trials_csv: Option<PathBuf>,
    #[arg(long)]
    aggregate_csv: Option<PathBuf>,
    #[arg(long)]
    histogram_csv: Option<PathBuf>,
}

/// Marker for problems that are the caller's fault (exit code 1).
#[derive(Debug)]
struct UsageError(String);

impl Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() {
    // Die quietly when a pipe reader closes early, as line tools should.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        let code = if e.downcast_ref::<UsageError>().is_some() {
            1
        } else {
            2
        };
        std::process::exit(code);
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::Wot(args) => cmd_wot(args),
        Command::Protect(args) => cmd_protect(args),
        Command::Inject(args) => cmd_inject(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Census(args) => cmd_census(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn load_float(path: &Path) -> anyhow::Result<FloatModel> {
    match load_model(path)? {
        StoredModel::Float(fm) => Ok(fm),
        StoredModel::Protected(_) => Err(usage_error(format!(
            "{} holds a quantized model, expected a float model",
            path.display()
        ))),
    }
}

fn load_quant(path: &Path) -> anyhow::Result<QuantModel> {
    match load_model(path)? {
        StoredModel::Protected(pm) => Ok(recover(&pm).0),
        StoredModel::Float(_) => Err(usage_error(format!(
            "{} holds a float model, expected a quantized model",
            path.display()
        ))),
    }
}

fn calibration_refs(train: &Dataset, batch: usize) -> Vec<&[u8]> {
    (0..batch.min(train.count))
        .map(|i| train.image(i))
        .collect()
}

fn parse_scope(s: &str) -> anyhow::Result<FaultScope> {
    match s {
        "all" | "all-stored-bits" => Ok(FaultScope::AllStoredBits),
        "weights" | "weight-bits-only" => Ok(FaultScope::WeightBitsOnly),
        other => Err(usage_error(format!(
            "unknown scope '{other}' (use 'all' or 'weights')"
        ))),
    }
}

fn parse_strategy(s: &str) -> anyhow::Result<ProtectionStrategy> {
    ProtectionStrategy::parse(s).ok_or_else(|| {
        usage_error(format!(
            "unknown strategy '{s}' (use faulty, zero, ecc, or in-place)"
        ))
    })
}

fn write_text(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let (train, test) = args.data.load()?;
    let mut model = FloatModel::reference(args.seed);
    let cfg = nn::SgdConfig {
        lr: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
    };
    let losses = nn::train_float(&mut model, &train, &cfg);
    let train_acc = nn::evaluate_float(&model, &train);
    let test_acc = nn::evaluate_float(&model, &test);
    save_model(&args.out, &StoredModel::Float(model))?;
    println!("final_loss={:.6}", losses.last().unwrap());
    println!("train_accuracy={train_acc:.6}");
    println!("test_accuracy={test_acc:.6}");
    println!("model={}", args.out.display());
    Ok(())
}

fn cmd_quantize(args: QuantizeArgs) -> anyhow::Result<()> {
    let (train, test) = args.data.load()?;
    let fm = load_float(&args.model)?;
    let qm = nn::quantize_model(&fm, &calibration_refs(&train, 32));
    let acc = nn::eval_int8(&qm, &test.image_refs(), &test.labels);
    let store = apply_strategy_store(&qm, ProtectionStrategy::Faulty)
        .expect("raw storage cannot violate the block constraint");
    save_model(&args.out, &StoredModel::Protected(store))?;
    println!("int8_accuracy={acc:.6}");
    println!("model={}", args.out.display());
    Ok(())
}

fn cmd_wot(args: WotArgs) -> anyhow::Result<()> {
    let (train, test) = args.data.load()?;
    let fm = load_float(&args.model)?;
    let baseline = {
        let qm = nn::quantize_model(&fm, &calibration_refs(&train, args.batch_size));
        nn::eval_int8(&qm, &test.image_refs(), &test.labels)
    };
    let cfg = WotConfig {
        lambda: args.lambda,
        lr: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        target_accuracy: args.target_accuracy.unwrap_or(baseline),
        seed: args.seed,
        eval_interval: args.eval_interval,
    };
    let outcome = wot::wot_train(&fm, &train, &test, &cfg);
    if let Some(path) = &args.census_csv {
        let mut buf = Vec::new();
        wot::write_census_csv(&mut buf, &outcome.records)?;
        write_text(path, &buf)?;
    }
    let store = apply_strategy_store(&outcome.model, ProtectionStrategy::Faulty)
        .expect("raw storage cannot violate the block constraint");
    save_model(&args.out, &StoredModel::Protected(store))?;
    println!("baseline_accuracy={baseline:.6}");
    println!("target_accuracy={:.6}", cfg.target_accuracy);
    println!("final_accuracy={:.6}", outcome.final_accuracy);
    println!("iterations={}", outcome.iterations);
    println!("converged={}", outcome.converged);
    println!("model={}", args.out.display());
    if !outcome.converged {
        eprintln!(
            "warning: target accuracy not reached within {} epochs; best model saved",
            args.max_epochs
        );
    }
    Ok(())
}

fn cmd_protect(args: ProtectArgs) -> anyhow::Result<()> {
    let strategy = parse_strategy(&args.strategy)?;
    let bias_ecc = match args.biases.as_str() {
        "ecc" => strategy != ProtectionStrategy::Faulty,
        "raw" => false,
        other => {
            return Err(usage_error(format!(
                "unknown bias mode '{other}' (use 'ecc' or 'raw')"
            )))
        }
    };
    let qm = load_quant(&args.model)?;
    let store = apply_strategy_store_with(&qm, strategy, bias_ecc)?;
    let overhead = store.space_overhead_pct();
    save_model(&args.out, &StoredModel::Protected(store))?;
    println!("strategy={strategy}");
    println!("space_overhead_pct={overhead}");
    println!("model={}", args.out.display());
    Ok(())
}

fn cmd_inject(args: InjectArgs) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&args.rate) {
        return Err(usage_error(format!("rate {} outside [0, 1]", args.rate)));
    }
    let scope = parse_scope(&args.scope)?;
    let StoredModel::Protected(mut pm) = load_model(&args.model)? else {
        return Err(usage_error("inject needs a protected model file"));
    };
    let positions = inject_model(
        &mut pm,
        &FaultModel {
            rate: args.rate,
            seed: args.seed,
            scope,
        },
    );
    save_model(&args.out, &StoredModel::Protected(pm))?;
    println!("flips={}", positions.len());
    println!("model={}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (_, test) = args.data.load()?;
    match load_model(&args.model)? {
        StoredModel::Float(fm) => {
            let acc = nn::evaluate_float(&fm, &test);
            println!("accuracy={acc:.6}");
        }
        StoredModel::Protected(pm) => {
            let (qm, counters) = recover(&pm);
            let acc = nn::eval_int8(&qm, &test.image_refs(), &test.labels);
            println!("accuracy={acc:.6}");
            println!("corrected={}", counters.corrected);
            println!("detected_double={}", counters.detected_double);
            println!("detected_uncorrectable={}", counters.detected_uncorrectable);
        }
    }
    Ok(())
}

fn cmd_census(args: CensusArgs) -> anyhow::Result<()> {
    let qm = load_quant(&args.model)?;
    let census = wot::census(&qm);
    println!("large_count={}", census.large_count);
    println!(
        "by_position={}",
        census.by_position.map(|c| c.to_string()).join(",")
    );
    if let Some(path) = &args.histogram_csv {
        let mut buf = Vec::new();
        wot::write_histogram_csv(&mut buf, &census)?;
        write_text(path, &buf)?;
    }
    Ok(())
}

fn parse_config_file(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            usage_error(format!(
                "{}:{}: expected key=value",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let cfg = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    let get = |key: &str| cfg.get(key).cloned();

    // Flags win over config entries; config wins over defaults.
    let model_path = args
        .model
        .or_else(|| get("model").map(PathBuf::from))
        .ok_or_else(|| usage_error("no model given (flag --model or config key 'model')"))?;
    let rates: Vec<f64> = args
        .rates
        .or_else(|| get("rates"))
        .unwrap_or_else(|| "1e-6,1e-5,1e-4,1e-3".to_string())
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| usage_error(format!("bad rate '{s}'")))
        })
        .collect::<Result<_, _>>()?;
    let trials = match args.trials {
        Some(t) => t,
        None => match get("trials") {
            Some(s) => s
                .parse()
                .map_err(|_| usage_error(format!("bad trials '{s}'")))?,
            None => 10,
        },
    };
    let strategies: Vec<ProtectionStrategy> = args
        .strategies
        .or_else(|| get("strategies"))
        .unwrap_or_else(|| "faulty,zero,ecc,in-place".to_string())
        .split(',')
        .map(|s| parse_strategy(s.trim()))
        .collect::<Result<_, _>>()?;
    let scope = parse_scope(
        &args
            .scope
            .or_else(|| get("scope"))
            .unwrap_or_else(|| "all".to_string()),
    )?;
    let base_seed = match args.base_seed {
        Some(s) => s,
        None => match get("base_seed") {
            Some(s) => s
                .parse()
                .map_err(|_| usage_error(format!("bad base_seed '{s}'")))?,
            None => 1000,
        },
    };
    let model_name = args
        .model_name
        .or_else(|| get("model_name"))
        .unwrap_or_else(|| "desk-cnn".to_string());
    let path_of = |flag: Option<PathBuf>, key: &str, default: &str| {
        flag.or_else(|| get(key).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(default))
    };
    let trials_csv = path_of(args.trials_csv, "trials_csv", "trials.csv");
    let aggregate_csv = path_of(args.aggregate_csv, "aggregate_csv", "aggregate.csv");
    let histogram_csv = path_of(args.histogram_csv, "histogram_csv", "histogram.csv");

    // Dataset keys mirror the flags; flags only override when users pass
    // them, which clap cannot distinguish from defaults, so config keys
    // take precedence for the synthetic parameters.
    let mut data = args.data.clone();
    if let Some(s) = get("synthetic_seed") {
        data.synthetic_seed = s.parse().map_err(|_| usage_error("bad synthetic_seed"))?;
    }
    if let Some(s) = get("classes") {
        data.classes = s.parse().map_err(|_| usage_error("bad classes"))?;
    }
    if let Some(s) = get("train_count") {
        data.train_count = s.parse().map_err(|_| usage_error("bad train_count"))?;
    }
    if let Some(s) = get("test_count") {
        data.test_count = s.parse().map_err(|_| usage_error("bad test_count"))?;
    }
    for (key, field) in [
        ("idx_train_images", &mut data.idx_train_images),
        ("idx_train_labels", &mut data.idx_train_labels),
        ("idx_test_images", &mut data.idx_test_images),
        ("idx_test_labels", &mut data.idx_test_labels),
    ] {
        if field.is_none() {
            *field = get(key).map(PathBuf::from);
        }
    }

    let (_, test) = data.load()?;
    let qm = load_quant(&model_path)?;
    let report = run_experiment(
        &qm,
        &test,
        &strategies,
        &rates,
        trials,
        base_seed,
        scope,
        &model_name,
    )
    .map_err(|e| anyhow!(e))?;

    let mut buf = Vec::new();
    report.write_trials_csv(&mut buf)?;
    write_text(&trials_csv, &buf)?;
    buf.clear();
    report.write_aggregate_csv(&mut buf)?;
    write_text(&aggregate_csv, &buf)?;
    buf.clear();
    wot::write_histogram_csv(&mut buf, &wot::census(&qm))?;
    write_text(&histogram_csv, &buf)?;

    println!("trials_csv={}", trials_csv.display());
    println!("aggregate_csv={}", aggregate_csv.display());
    println!("histogram_csv={}", histogram_csv.display());
    Ok(())
}
