use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lanenum::harness::{
    self, compare, default_log_path, evaluate, predict_overlay, CompareConfig, Predictor,
    TrainConfig, TrainedModel,
};
use lanenum::maskgeom::HeuristicConfig;
use lanenum::models::{build_config, Scale, Variant};
use lanenum::scene::{read_dataset, write_dataset, DatasetRequest, SplitName};
use lanenum::tensor::{count_costs, read_model};
use lanenum::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lanenum",
    version,
    about = "Ego lane number prediction on synthetic road scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a classifier variant (A, C or D).
    Train(TrainArgs),
    /// Evaluate a model file or the mask heuristic on one split.
    Eval(EvalArgs),
    /// Train/evaluate all four variants and write the results table.
    Compare(CompareArgs),
    /// Print parameter and FLOPs counts of a variant's classifier.
    Flops(FlopsArgs),
    /// Evaluate the mask heuristic (same as `eval --heuristic`).
    Heuristic(HeuristicArgs),
    /// Predict one sample and write an overlay image.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mask frames per sample (2n+1).
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 0.0)]
    line_dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    pixel_flip: f64,
    #[arg(long, default_value_t = 0)]
    thickness_jitter: usize,
    #[arg(long, default_value_t = 0.1)]
    ambiguous_prob: f64,
    /// Image size as HxW.
    #[arg(long, default_value = "100x100")]
    hw: String,
    #[arg(long)]
    image_noise: Option<f64>,
    #[arg(long)]
    min_contrast: Option<f64>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    variant: String,
    #[arg(long, default_value = "desk")]
    scale: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training log path (defaults to the model path with a `.log` extension).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
}

#[derive(Args)]
#[group(id = "predictor", required = true, multiple = false, args = ["model", "heuristic"])]
struct PredictorArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    heuristic: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Print metrics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "desk")]
    scale: String,
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Training epochs per classifier run.
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    /// Text table; a JSON copy is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    variant: String,
    #[arg(long, default_value = "paper")]
    scale: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct HeuristicArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[command(flatten)]
    predictor: PredictorArgs,
    #[arg(long)]
    overlay: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lanenum: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => {
            let predictor = load_predictor(&a.predictor)?;
            eval(&a.data, &a.split, &predictor, a.json)
        }
        Command::Heuristic(a) => eval(
            &a.data,
            &a.split,
            &Predictor::Heuristic(HeuristicConfig::default()),
            a.json,
        ),
        Command::Compare(a) => run_compare(a),
        Command::Flops(a) => flops(a),
        Command::Predict(a) => {
            let predictor = load_predictor(&a.predictor)?;
            let dataset = read_dataset(&a.data)?;
            harness::check_compatible(&predictor, &dataset)?;
            let sample = dataset.samples.get(a.index).ok_or_else(|| {
                Error::usage(format!(
                    "index {} out of range ({} samples)",
                    a.index,
                    dataset.samples.len()
                ))
            })?;
            let digit = predict_overlay(&predictor, sample, &a.overlay)?;
            println!(
                "sample {} label {} predicted {digit} -> {}",
                a.index,
                sample.label,
                a.overlay.display()
            );
            Ok(())
        }
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::usage(format!("--hw {s:?}: expected HxW")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::usage(format!("--hw {s:?}: expected HxW")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn gen(a: GenArgs) -> Result<()> {
    if a.frames == 0 || a.frames % 2 == 0 {
        return Err(Error::usage(format!(
            "--frames {} must be odd (2n+1)",
            a.frames
        )));
    }
    let (h, w) = parse_hw(&a.hw)?;
    let mut req = DatasetRequest::new(a.count, a.seed);
    if let Some(name) = a.name {
        req.name = name;
    }
    let g = &mut req.generator;
    g.height = h;
    g.width = w;
    g.temporal_radius = a.frames / 2;
    g.p_ambiguous = a.ambiguous_prob;
    if let Some(v) = a.image_noise {
        g.image_noise = v;
    }
    if let Some(v) = a.min_contrast {
        g.min_line_contrast = v;
    }
    req.corruption.line_dropout_p = a.line_dropout;
    req.corruption.pixel_flip_q = a.pixel_flip;
    req.corruption.thickness_jitter = a.thickness_jitter;
    let m = write_dataset(&a.out, &req, a.workers)?;
    println!(
        "wrote {} samples ({}x{}, {} frames) to {}; classes {:?}; split {}/{}",
        m.sample_count,
        m.height,
        m.width,
        m.frames,
        a.out.display(),
        m.class_histogram,
        m.train_count,
        m.test_count
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let scale: Scale = a.scale.parse()?;
    let mut cfg = TrainConfig::new(&a.data, variant, scale, a.epochs, a.seed);
    cfg.batch_size = a.batch_size;
    cfg.lr = a.lr;
    cfg.momentum = a.momentum;
    cfg.validate()?;
    let log_path = a.log.unwrap_or_else(|| default_log_path(&a.out));
    let dataset = read_dataset(&a.data)?;
    let outcome = harness::train_on(&dataset, &cfg, |r| {
        println!(
            "epoch {:>3}  loss {:.6}  train {:.4}  test {:.4}",
            r.epoch, r.mean_loss, r.train_accuracy, r.test_accuracy
        )
    })?;
    lanenum::tensor::write_model(&a.out, &outcome.model.to_file())?;
    std::fs::write(&log_path, harness::format_log(&outcome.log))?;
    println!("model {} log {}", a.out.display(), log_path.display());
    if outcome.model.state.clamp_count() > 0 {
        eprintln!(
            "warning: {} probabilities clamped in the loss",
            outcome.model.state.clamp_count()
        );
    }
    Ok(())
}

fn load_predictor(a: &PredictorArgs) -> Result<Predictor> {
    match &a.model {
        Some(path) => Ok(Predictor::Model(TrainedModel::from_file(read_model(
            path,
        )?)?)),
        None => Ok(Predictor::Heuristic(HeuristicConfig::default())),
    }
}

fn eval(data: &Path, split: &str, predictor: &Predictor, json: bool) -> Result<()> {
    let split: SplitName = split.parse()?;
    let dataset = read_dataset(data)?;
    let metrics = evaluate(predictor, &dataset, split)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&metrics)?);
    } else {
        println!("variant {}", predictor.variant());
        print!("{metrics}");
    }
    Ok(())
}

fn run_compare(a: CompareArgs) -> Result<()> {
    let scale: Scale = a.scale.parse()?;
    let dataset = read_dataset(&a.data)?;
    let cfg = CompareConfig::new(scale, a.seeds, a.epochs);
    let table = compare(&dataset, &cfg, |line| eprintln!("{line}"))?;
    let text = table.to_text();
    std::fs::write(&a.out, &text)?;
    std::fs::write(
        a.out.with_extension("json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    print!("{text}");
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let scale: Scale = a.scale.parse()?;
    let report = count_costs(&build_config(variant, scale)?)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("variant {variant} scale {scale}");
    println!("{:<16} {:>12} {:>16}", "layer", "params", "flops");
    for l in &report.per_layer {
        println!("{:<16} {:>12} {:>16}", l.name, l.params, l.flops);
    }
    println!("{:<16} {:>12} {:>16}", "total", report.params, report.flops);
    println!("convention: {}", report.convention);
    Ok(())
}
