use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use fedspace::data::{load_cifar100, DatasetSource, LabeledDataset, SplitTag};
use fedspace::eval::evaluate;
use fedspace::fractal::{build_pretrain_dataset, load_fractal_dataset, save_fractal_dataset, FractalConfig, RenderConfig};
use fedspace::metrics::emit_metrics;
use fedspace::nn::checkpoint::{load_params, save_params};
use fedspace::nn::{EncoderArch, LrSchedule, ModelArch, ModelParams};
use fedspace::orchestrator::{SimConfig, Simulation};
use fedspace::pretrain::{pretrain, PretrainConfig};
use fedspace::server::{load_server_state, save_server_state};
use fedspace::splitgen::{generate_split, load_split, save_split, SplitConfig};
use fedspace::{rng, Error};

/// Asynchronous federated continual learning simulator.
#[derive(Parser)]
#[command(name = "fedspace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a federated split with per-client task streams.
    GenSplit(GenSplit),
    /// Render a labeled fractal dataset.
    GenFractals(GenFractals),
    /// Pretrain an encoder on a fractal dataset.
    Pretrain(PretrainCmd),
    /// Run a simulation.
    Train(Train),
    /// Evaluate a checkpoint on a test set.
    Eval(Eval),
}

#[derive(Args)]
struct GenSplit {
    /// `train.bin` path, `synthetic` or `blobs:key=value,...`
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    clients: usize,
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    #[arg(long, default_value_t = 10)]
    classes_per_task: usize,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.5)]
    exponent: f64,
    #[arg(long, default_value_t = 64)]
    min_size: usize,
    #[arg(long)]
    min_stage_len: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    assign_fraction: f64,
    #[arg(long)]
    shuffle_classes: bool,
    #[arg(long)]
    rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenFractals {
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 50_000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Run config whose encoder is pretrained; defaults to the built-in conv encoder.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    theta0: Option<PathBuf>,
    /// Overrides the dataset named in the config.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    /// Server state or parameter checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// `test.bin` path or `blobs:key=value,...`
    #[arg(long)]
    test: String,
}

fn load_model(path: &Path) -> fedspace::Result<ModelParams> {
    let head = fs::read(path)?;
    if head.starts_with(b"FSSERVER") {
        Ok(load_server_state(path)?.params)
    } else {
        load_params(path)
    }
}

fn read_config(path: &Path) -> anyhow::Result<SimConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
    Ok(SimConfig::from_json(&text)?)
}

fn gen_split(a: GenSplit) -> anyhow::Result<()> {
    let source: DatasetSource = a.dataset.parse()?;
    let (train, _) = source.load()?;
    let cfg = SplitConfig {
        n_clients: a.clients,
        num_tasks: a.tasks,
        classes_per_task: a.classes_per_task,
        alpha: a.alpha,
        exponent: a.exponent,
        seed: a.seed,
        total_rounds: a.rounds,
        min_size: a.min_size,
        min_stage_len: a.min_stage_len,
        shuffle_classes: a.shuffle_classes,
        assign_fraction: a.assign_fraction,
    };
    let split = generate_split(&train, &cfg)?;
    save_split(&a.out, &split)?;
    log::info!("wrote {} clients to {}", split.num_clients(), a.out.display());
    Ok(())
}

fn gen_fractals(a: GenFractals) -> anyhow::Result<()> {
    let cfg = FractalConfig {
        num_classes: a.classes,
        images_per_class: a.per_class,
        render: RenderConfig { size: a.size, iterations: a.iterations, ..Default::default() },
        seed: a.seed,
        ..Default::default()
    };
    let ds = build_pretrain_dataset(&cfg)?;
    save_fractal_dataset(&a.out, &ds)?;
    log::info!("wrote {} images to {}", ds.labels.len(), a.out.display());
    Ok(())
}

fn pretrain_cmd(a: PretrainCmd) -> anyhow::Result<()> {
    let encoder = match &a.config {
        Some(p) => read_config(p)?.encoder,
        None => SimConfig::default().encoder,
    };
    let EncoderArch::Conv { in_channels, .. } = encoder else {
        bail!(Error::Config("fractal pretraining needs a conv encoder".into()));
    };
    let fractals = load_fractal_dataset(&a.data)?;
    let data = fractals.to_dataset(in_channels)?;
    let arch = ModelArch { encoder, num_outputs: data.num_classes(), rotation_head: false };
    let init = ModelParams::init(arch, &mut rng::stream(a.seed, "pretrain-init", &[]))?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        schedule: LrSchedule { base_lr: a.lr, ..Default::default() },
        seed: a.seed,
        ..Default::default()
    };
    let (params, report) = pretrain(init, &data, &cfg)?;
    save_params(&a.out, &params)?;
    println!("train accuracy {:.4}", report.train_accuracy);
    Ok(())
}

fn train(a: Train) -> anyhow::Result<()> {
    let mut config = read_config(&a.config)?;
    if let Some(d) = &a.dataset {
        config.dataset = Some(d.parse()?);
    }
    let source = config.dataset.clone().ok_or_else(|| Error::Config("no dataset in config or on the command line".into()))?;
    let split_path = a.split.or_else(|| config.split.clone()).ok_or_else(|| Error::Config("no split file given".into()))?;
    let out = a.out.or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/latest"));
    let theta0 = match a.theta0.or_else(|| config.theta0.clone()) {
        Some(p) => Some(load_model(&p)?),
        None => None,
    };
    let (train, test) = source.load()?;
    let split = load_split(&split_path)?;
    let mut sim = Simulation::new(config.clone(), &split, &train, &test, theta0.as_ref())?;
    let logs = sim.run()?;
    emit_metrics(&out, &logs, &config)?;
    save_server_state(out.join("checkpoint.bin"), &sim.state)?;
    save_params(out.join("model.bin"), &sim.state.params)?;
    match logs.iter().rev().find_map(|l| l.accuracy) {
        Some(acc) => println!("final accuracy {acc:.4}"),
        None => println!("no evaluation performed"),
    }
    Ok(())
}

fn load_test(spec: &str) -> fedspace::Result<LabeledDataset> {
    match spec.parse::<DatasetSource>()? {
        DatasetSource::Blobs(b) => Ok(b.generate()?.1),
        DatasetSource::Cifar100 { .. } => load_cifar100(spec, SplitTag::Test),
    }
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let params = load_model(&a.checkpoint)?;
    let test = load_test(&a.test)?;
    println!("accuracy {:.4}", evaluate(&params, &test)?);
    Ok(())
}

/// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(Error::Config(_) | Error::Schema(_) | Error::Constraint(_) | Error::Capacity { .. } | Error::Dimension(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSplit(a) => gen_split(a),
        Command::GenFractals(a) => gen_fractals(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow!(Error::Config("x".into()))), 2);
        assert_eq!(exit_code(&anyhow!(Error::Numeric("nan".into()))), 3);
        let wrapped = Error::Client { client: 1, round: 2, source: Box::new(Error::Numeric("inf".into())) };
        assert_eq!(exit_code(&anyhow!(wrapped)), 3);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }
}
