use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use d3fnet::dade::DadeConfig;
use d3fnet::gradcheck::{op_suite, OP_TOLERANCE};
use d3fnet::model::{load_checkpoint, ModelConfig, Variant};
use d3fnet::rf::{analyze, render_coverage};
use d3fnet::train::{
    evaluate, load_dataset, load_image, predict, save_gray_png, train, write_synth_dataset, DataSource, LossKind,
    SynthSpec, TrainConfig,
};
use d3fnet::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal or numerical failure (non-finite loss, shape bug)
  2  usage error (bad flags or flag values)
  3  missing or unreadable file
  4  malformed or invalid configuration
  5  checkpoint does not match the expected schema or model
  6  image could not be read, written, or has an unusable size
  7  gradient check exceeded its tolerance

Errors are printed to stderr as one JSON line: {\"error\", \"code\", \"message\"}.";

#[derive(Parser)]
#[command(name = "d3fnet", version, about = "Road segmentation with dilated differential attention", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Receptive-field coverage of a dilation-rate cascade.
    AnalyzeRf(AnalyzeRf),
    /// Generate a synthetic road dataset.
    Synth(Synth),
    /// Train a model and write checkpoints plus a loss log.
    Train(Box<Train>),
    /// Score a checkpoint on a dataset directory.
    Eval(Eval),
    /// Predict a road mask for one image.
    Infer(Infer),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
#[command(after_help = EXIT_CODES)]
struct AnalyzeRf {
    /// Comma-separated dilation rates, e.g. 1,3,5,9.
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<usize>,
    /// Write the coverage map as a grayscale PNG.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the JSON report to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
#[command(after_help = EXIT_CODES)]
struct Synth {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Tile side in pixels, a multiple of 32.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[command(after_help = EXIT_CODES)]
struct Train {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, loss.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Dataset directory of <id>_sat.png / <id>_mask.png pairs.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Train on this many generated tiles instead of a directory.
    #[arg(long)]
    synth: Option<usize>,
    /// Input size; also the generated tile size.
    #[arg(long)]
    size: Option<usize>,
    /// baseline | dade_only | full
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds batch order and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds weight initialization.
    #[arg(long)]
    model_seed: Option<u64>,
    /// bce_dice | bce
    #[arg(long)]
    loss: Option<LossKind>,
    /// Bottleneck dilation rates.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<usize>>,
    /// Weight of the second attention map, in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
#[command(after_help = EXIT_CODES)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory of <id>_sat.png / <id>_mask.png pairs.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(after_help = EXIT_CODES)]
struct Infer {
    #[arg(long)]
    ckpt: PathBuf,
    /// RGB input; both sides must be multiples of 32.
    #[arg(long)]
    image: PathBuf,
    /// Output mask PNG (road = 255).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
#[command(after_help = EXIT_CODES)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl Failure {
    fn new(kind: &'static str, code: u8, message: impl Into<String>) -> Self {
        Failure {
            kind,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Usage(_) => ("usage", 2),
            Error::Io { .. } => ("io", 3),
            Error::Config(_) | Error::Json(_) => ("config", 4),
            Error::Checkpoint { .. } => ("checkpoint", 5),
            Error::Image { .. } => ("image", 6),
            Error::NonFinite(_) => ("numeric", 1),
            _ => ("internal", 1),
        };
        Failure::new(kind, code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn analyze_rf(a: AnalyzeRf) -> Outcome {
    let (map, report) = analyze(&a.rates).map_err(|e| match e {
        Error::Usage(m) => Failure::new("usage", 2, m),
        e => e.into(),
    })?;
    let value = serde_json::to_value(&report).map_err(Error::from)?;
    if let Some(path) = &a.out {
        render_coverage(&map, path)?;
    }
    if let Some(path) = &a.json {
        write_json(path, &value)?;
    }
    print_json(&value);
    Ok(())
}

fn synth(s: Synth) -> Outcome {
    let spec = SynthSpec {
        seed: s.seed,
        count: s.count,
        size: s.size,
    };
    let tiles = write_synth_dataset(&spec, &s.out)?;
    print_json(&json!({
        "dir": s.out,
        "seed": s.seed,
        "size": s.size,
        "samples": tiles.iter().map(|t| json!({"id": t.id, "road_fraction": t.road_fraction()})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn train_config(t: &Train) -> Result<TrainConfig, Failure> {
    let mut cfg = match &t.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| Failure::new("config", 4, format!("{}: {e}", path.display())))?
        }
        None => {
            let size = t.size.unwrap_or(128);
            let spec = SynthSpec {
                seed: t.seed.unwrap_or(0),
                count: 4,
                size,
            };
            TrainConfig::new(ModelConfig::desk(size, Variant::Full, 0), DataSource::Synth(spec), 100)
        }
    };
    if let Some(size) = t.size {
        cfg.model.input_size = size;
        if let DataSource::Synth(s) = &mut cfg.data {
            s.size = size;
        }
    }
    if let Some(v) = t.variant {
        cfg.model.variant = v;
    }
    if let Some(v) = t.steps {
        cfg.steps = v;
    }
    if let Some(v) = t.lr {
        cfg.lr = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.seed {
        cfg.seed = v;
        if let DataSource::Synth(s) = &mut cfg.data {
            s.seed = v;
        }
    }
    if let Some(v) = t.model_seed {
        cfg.model.seed = v;
    }
    if let Some(v) = t.loss {
        cfg.loss = v;
    }
    if let Some(v) = t.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if t.rates.is_some() || t.lambda.is_some() {
        let d = &cfg.model.dade;
        cfg.model.dade = DadeConfig::new(
            d.channels,
            t.rates.clone().unwrap_or_else(|| d.rates.clone()),
            d.attention.heads,
            t.lambda.unwrap_or(d.attention.lambda),
        )?;
    }
    if let Some(dir) = &t.data {
        cfg.data = DataSource::Dir(dir.clone());
    }
    if let Some(n) = t.synth {
        cfg.data = DataSource::Synth(SynthSpec {
            seed: cfg.seed,
            count: n,
            size: cfg.model.input_size,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(t: Train) -> Outcome {
    let cfg = train_config(&t)?;
    std::fs::create_dir_all(&t.out).map_err(|e| Error::Io {
        path: t.out.clone(),
        source: e,
    })?;
    write_json(&t.out.join("config.json"), &serde_json::to_value(&cfg).map_err(Error::from)?)?;
    let quiet = t.quiet;
    let run = train(&cfg, &t.out, t.resume.as_deref(), |step, loss| {
        if !quiet && (step % 10 == 0 || step == 1) {
            eprintln!("step {step} loss {loss:.6}");
        }
    })?;
    print_json(&json!({
        "steps": cfg.steps,
        "final_loss": run.losses.last().map(|l| l.1),
        "checkpoint": run.final_checkpoint,
        "checkpoints": run.checkpoints,
        "loss_log": t.out.join(d3fnet::train::LOSS_LOG),
    }));
    Ok(())
}

fn check_threshold(t: f64) -> Outcome {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Failure::new("usage", 2, format!("threshold {t} outside (0, 1)")))
    }
}

fn eval_cmd(e: Eval) -> Outcome {
    check_threshold(e.threshold)?;
    let mut model = load_checkpoint::<f32>(&e.ckpt)?;
    let samples = load_dataset(&e.data)?;
    let report = evaluate(&mut model, &samples, e.threshold)?;
    let value = serde_json::to_value(&report).map_err(Error::from)?;
    match &e.out {
        Some(path) => write_json(path, &value),
        None => {
            print_json(&value);
            Ok(())
        }
    }
}

fn infer_cmd(i: Infer) -> Outcome {
    check_threshold(i.threshold)?;
    let sample = load_image(&i.image)?;
    if sample.height % 32 != 0 || sample.width % 32 != 0 {
        return Err(Error::Image {
            path: i.image.clone(),
            message: format!("size {}x{} is not a multiple of 32", sample.width, sample.height),
        }
        .into());
    }
    let mut model = load_checkpoint::<f32>(&i.ckpt)?;
    let p = predict(&mut model, &sample)?;
    let mask = p.iter().map(|&v| if v as f64 >= i.threshold { 255 } else { 0 }).collect();
    save_gray_png(&i.out, sample.width, sample.height, mask)?;
    Ok(())
}

fn gradcheck_cmd(g: Gradcheck) -> Outcome {
    let entries = op_suite(g.seed)?;
    if g.json {
        print_json(&json!({
            "seed": g.seed,
            "tolerance": OP_TOLERANCE,
            "ops": entries.iter().map(|e| json!({
                "op": e.name,
                "max_rel_error": e.max_rel_error,
                "checked": e.checked,
                "pass": e.passed(),
            })).collect::<Vec<_>>(),
        }));
    } else {
        println!("{:<18} {:>13} {:>8}  status", "op", "max_rel_error", "checked");
        for e in &entries {
            let status = if e.passed() { "ok" } else { "FAIL" };
            println!("{:<18} {:>13.3e} {:>8}  {status}", e.name, e.max_rel_error, e.checked);
        }
    }
    let failed: Vec<_> = entries.iter().filter(|e| !e.passed()).map(|e| e.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            "gradcheck",
            7,
            format!("relative error above {OP_TOLERANCE:e} for: {}", failed.join(", ")),
        ))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let message = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", json!({"error": "usage", "code": 2, "message": message}));
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::AnalyzeRf(a) => analyze_rf(a),
        Command::Synth(s) => synth(s),
        Command::Train(t) => train_cmd(*t),
        Command::Eval(e) => eval_cmd(e),
        Command::Infer(i) => infer_cmd(i),
        Command::Gradcheck(g) => gradcheck_cmd(g),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "code": f.code, "message": f.message}));
            ExitCode::from(f.code)
        }
    }
}
