//! Command-line interface for the changeable-rate CSI feedback toolkit.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs;
use std::path::PathBuf;
use varirate::channel::{generate_dataset, load_dataset, save_dataset, DatasetConfig, Scenario};
use varirate::harness::{
    effective_seed, emit_report, evaluate_nmse, load_checkpoint, prepare, results_to_csv,
    retrain_decoder, run_experiment, save_checkpoint, ExperimentConfig, ExperimentResult,
    OptimizerKind, TrainConfig,
};
use varirate::focu::OverheadPolicy;
use varirate::quant::{
    dequantize, pqb_surrogate_gradient, quantize, sigmoid_derivative, sigmoid_map,
    soft_quantize, QuantizerKind, QuantizerSpec, BUMP_NORMALIZATION,
};

#[derive(Parser)]
#[command(name = "varirate", version, about = "Changeable-rate CSI feedback compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Indoor,
    Outdoor,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Toy,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    None,
    MuLaw,
    PassingGradient,
    SoftToHard,
    Pqb,
}

impl From<KindArg> for QuantizerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::None => QuantizerKind::None,
            KindArg::MuLaw => QuantizerKind::MuLaw,
            KindArg::PassingGradient => QuantizerKind::PassingGradient,
            KindArg::SoftToHard => QuantizerKind::SoftToHard,
            KindArg::Pqb => QuantizerKind::Pqb,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic channel dataset and save it to disk.
    GenData(GenDataArgs),
    /// Train a model per an experiment config file and persist results.
    Train(TrainArgs),
    /// Retrain only the decoder of a checkpointed model (two-phase
    /// quantization protocol).
    RetrainDecoder(RetrainArgs),
    /// Evaluate NMSE of a checkpointed model at given kept lengths.
    Eval(EvalArgs),
    /// Print exact parameter accounting and storage-savings tables.
    CountParams,
    /// Print quantizer transfer curves and surrogate gradients as CSV.
    QuantizeDemo(QuantizeDemoArgs),
    /// Render a combined report from persisted experiment results.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value_t = ScenarioArg::Indoor)]
    scenario: ScenarioArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Toy)]
    scale: ScaleArg,
    #[arg(long, default_value_t = 640)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON, see `ExperimentConfig`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for result.json / history.csv / checkpoint.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    train_count: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = KindArg::MuLaw)]
    kind: KindArg,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    /// Where to write the retrained checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    train_count: usize,
    /// Kept lengths to evaluate (repeatable).
    #[arg(long = "n", required = true)]
    kept: Vec<usize>,
}

#[derive(Args)]
struct QuantizeDemoArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Pqb)]
    kind: KindArg,
    #[arg(long, default_value_t = 4)]
    bits: u8,
    #[arg(long, default_value_t = 255.0)]
    mu: f64,
    #[arg(long, default_value_t = 8.0)]
    a: f64,
    #[arg(long, default_value_t = 201)]
    points: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories containing result.json (repeatable).
    #[arg(long = "results", required = true)]
    results: Vec<PathBuf>,
    /// Optional CSV output path for machine-readable grid entries.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::RetrainDecoder(a) => retrain_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::CountParams => {
            print!("{}", varirate::harness::render_param_table());
            println!();
            print!("{}", varirate::harness::render_storage_table());
            Ok(())
        }
        Command::QuantizeDemo(a) => quantize_demo(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let scenario = match a.scenario {
        ScenarioArg::Indoor => Scenario::Indoor,
        ScenarioArg::Outdoor => Scenario::Outdoor,
    };
    let seed = effective_seed(a.seed);
    let config = match a.scale {
        ScaleArg::Toy => DatasetConfig::toy(scenario, a.samples, seed),
        ScaleArg::Full => DatasetConfig::full_scale(scenario, a.samples, seed),
    };
    let dataset = generate_dataset(&config)?;
    save_dataset(&a.out, &dataset)?;
    println!("wrote {} samples to {}", dataset.samples.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("reading {}", a.config.display()))?;
    let config: ExperimentConfig = serde_json::from_str(&text).context("parsing config")?;
    let result = run_experiment(&config, &a.out)?;
    println!("experiment written to {}", a.out.display());
    println!("final training loss: {:.6e}", result.history_final_loss);
    for e in &result.nmse_db {
        let b = e.b.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
        println!("NMSE n={:>4} b={b}: {:.3} dB", e.n, e.value);
    }
    Ok(())
}

fn retrain_cmd(a: RetrainArgs) -> Result<()> {
    let mut model = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let split = prepare(&dataset, model.variant.family, a.train_count)?;
    let m = model.variant.m;
    let spec = QuantizerSpec::new(a.kind.into(), a.bits);
    spec.validate()?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        optimizer: OptimizerKind::AdaptiveMoment,
        seed: effective_seed(a.seed),
        overhead_policy: if model.variant.changeable_rate {
            OverheadPolicy::uniform(m)
        } else {
            OverheadPolicy::fixed(m, m)
        },
        quantizer: spec,
    };
    let history = retrain_decoder(&mut model, &split.train, &config)?;
    save_checkpoint(&a.out, &model)?;
    println!(
        "retrained decoder for {} epochs; best loss {:.6e}; checkpoint: {}",
        a.epochs,
        history.best_loss,
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut model = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let split = prepare(&dataset, model.variant.family, a.train_count)?;
    for &n in &a.kept {
        let v = evaluate_nmse(&mut model, &split.test, n)?;
        println!("NMSE n={n}: {v:.3} dB");
    }
    Ok(())
}

fn quantize_demo(a: QuantizeDemoArgs) -> Result<()> {
    if a.points < 2 {
        bail!("need at least 2 points");
    }
    let mut spec = QuantizerSpec::new(a.kind.into(), a.bits);
    spec.mu = a.mu;
    spec.a = a.a;
    spec.validate()?;
    let kind: QuantizerKind = a.kind.into();
    println!("x,bounded,symbol,dequantized,soft,surrogate_gradient");
    let c = *BUMP_NORMALIZATION;
    for i in 0..a.points {
        let x = -6.0 + 12.0 * i as f64 / (a.points - 1) as f64;
        let y = sigmoid_map(x);
        let s = quantize(y, a.bits);
        let yd = dequantize(s, a.bits)?;
        let soft = soft_quantize(y, a.bits, a.a);
        let grad = match kind {
            QuantizerKind::Pqb => {
                sigmoid_derivative(x) * pqb_surrogate_gradient(y, a.bits, spec.d_abs(), c)
            }
            QuantizerKind::PassingGradient => sigmoid_derivative(x),
            _ => 0.0,
        };
        println!("{x},{y},{s},{yd},{soft},{grad}");
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut results: Vec<ExperimentResult> = Vec::new();
    for dir in &a.results {
        let path = if dir.is_dir() { dir.join("result.json") } else { dir.clone() };
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        results.push(serde_json::from_str(&text)?);
    }
    let mut stdout = std::io::stdout().lock();
    emit_report(&results, &mut stdout)?;
    if let Some(csv) = a.csv {
        fs::write(&csv, results_to_csv(&results))?;
        println!("csv written to {}", csv.display());
    }
    Ok(())
}
