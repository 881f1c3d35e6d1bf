mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mixfire::attention::{bench_attention, MIN_BENCH_LENGTHS};
use mixfire::backbone::BackboneConfig;
use mixfire::data::{generate_synthetic, load_directory};
use mixfire::eval::cross_validate_with;
use mixfire::explain::{argmax_2d, export_heatmap_with_sidecar, gradcam, upsample_nearest};
use mixfire::gradcheck::{run_suite, TOLERANCE};
use mixfire::imageio::{read_gray, resize_bilinear};
use mixfire::model::{argmax, model_forward};
use mixfire::train::{train, TrainConfig};
use mixfire::{ModelConfig, ModelParams};

use manifest::{write_atomic, RunManifest};

/// Environment variable capping the worker threads used for training.
const THREADS_VAR: &str = "MIXFIRE_THREADS";

#[derive(Parser)]
#[command(name = "mixfire", version, about = "Linear-attention MLP-Mixer classifier with Grad-CAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic three-shape dataset to disk.
    GenData(GenDataArgs),
    /// Train one model on a dataset directory.
    Train(TrainArgs),
    /// Stratified k-fold cross-validation.
    Cv(CvArgs),
    /// Grad-CAM heatmap for one image.
    Explain(ExplainArgs),
    /// Linear versus quadratic attention timing.
    BenchAttn(BenchArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Hidden width of the token-mixing MLP.
    #[arg(long, default_value_t = 128)]
    token_hidden: usize,
    /// Hidden width of the channel-mixing MLP.
    #[arg(long, default_value_t = 512)]
    channel_hidden: usize,
    /// Side length images are resized to.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model file (MXF1).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "cv_report.json")]
    report: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct ExplainArgs {
    /// Model file written by `train`; its manifest supplies the architecture.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    /// Output PGM heatmap.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random seeds per operation.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mixfire::Error> for Failure {
    fn from(e: mixfire::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl ModelArgs {
    fn check(&self) -> Result<(), Failure> {
        if self.token_hidden == 0 || self.channel_hidden == 0 {
            return Err(usage("--token-hidden and --channel-hidden must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(usage("--image-size must be at least 16"));
        }
        Ok(())
    }

    fn config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: self.image_size,
                num_classes,
                ..BackboneConfig::default()
            },
            token_hidden: self.token_hidden,
            channel_hidden: self.channel_hidden,
            ..ModelConfig::default()
        }
    }
}

impl OptimArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig, Failure> {
        let c = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed,
            ..TrainConfig::default()
        };
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

fn write_manifest(
    artifact: &Path,
    command: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    artifacts: Vec<&Path>,
    summary: serde_json::Value,
    start: Instant,
) -> anyhow::Result<()> {
    let m = RunManifest {
        command: command.to_string(),
        config,
        seeds,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        summary,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    m.write(&RunManifest::path_for(artifact))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let start = Instant::now();
    if a.per_class == 0 {
        return Err(usage("--per-class must be at least 1"));
    }
    if a.size < 16 {
        return Err(usage("--size must be at least 16"));
    }
    let ds = generate_synthetic(a.per_class, a.size, a.seed)?;
    ds.write_to(&a.out)?;
    write_manifest(
        &a.out.join("dataset"),
        "gen-data",
        json!({ "out": a.out, "per_class": a.per_class, "size": a.size, "seed": a.seed }),
        vec![a.seed],
        vec![&a.out],
        json!({ "images": ds.len(), "classes": ds.class_names }),
        start,
    )?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let start = Instant::now();
    a.model.check()?;
    let tc = a.optim.config(a.seed)?;
    let ds = load_directory(&a.data, a.model.image_size)?;
    let mc = a.model.config(ds.num_classes());
    let outcome = train(&ds, &mc, &tc)?;
    write_atomic(&a.out, &outcome.params.to_bytes())?;
    let correct = ds
        .images
        .iter()
        .zip(&ds.labels)
        .map(|(img, &l)| model_forward(img, &outcome.params, &mc).map(|p| argmax(p.data()) == l))
        .collect::<mixfire::Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    let accuracy = correct as f64 / ds.len() as f64;
    write_manifest(
        &a.out,
        "train",
        json!({ "data": a.data, "model": mc, "train": tc, "class_names": ds.class_names }),
        vec![a.seed],
        vec![&a.out],
        json!({ "loss_history": outcome.loss_history, "train_accuracy": accuracy }),
        start,
    )?;
    println!(
        "trained on {} images: final loss {:.6}, train accuracy {:.4}",
        ds.len(),
        outcome.loss_history.last().copied().unwrap_or(f64::NAN),
        accuracy
    );
    Ok(())
}

fn cv_cmd(a: CvArgs) -> CmdResult {
    let start = Instant::now();
    if a.folds < 2 {
        return Err(usage("--folds must be at least 2"));
    }
    a.model.check()?;
    let tc = a.optim.config(a.seed)?;
    let ds = load_directory(&a.data, a.model.image_size)?;
    if a.folds > ds.len() {
        return Err(usage(format!("--folds {} exceeds the {} images", a.folds, ds.len())));
    }
    let mc = a.model.config(ds.num_classes());
    let out = cross_validate_with(&ds, &mc, &tc, a.folds, a.seed, |f, r| {
        eprintln!("fold {f}: accuracy {:.4} f1 {:.4}", r.accuracy, r.f1);
    })?;
    write_atomic(&a.report, out.report.to_json().as_bytes())?;
    let mean = out.report.mean.expect("cross-validation fills the mean");
    write_manifest(
        &a.report,
        "cv",
        json!({ "data": a.data, "folds": a.folds, "model": mc, "train": tc }),
        vec![a.seed],
        vec![&a.report],
        json!({ "mean": mean }),
        start,
    )?;
    println!(
        "mean accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
        mean.accuracy, mean.precision, mean.recall, mean.f1
    );
    Ok(())
}

fn explain_cmd(a: ExplainArgs) -> CmdResult {
    let start = Instant::now();
    let params = ModelParams::load(&a.model)?;
    let manifest_path = RunManifest::path_for(&a.model);
    let manifest = RunManifest::read(&manifest_path)?;
    let mc: ModelConfig = serde_json::from_value(manifest.config["model"].clone())
        .with_context(|| format!("{}: no model configuration", manifest_path.display()))?;
    let original = read_gray(&a.image)?;
    let (_, h, w) = (original.shape()[0], original.shape()[1], original.shape()[2]);
    let image = resize_bilinear(&original, mc.backbone.input_size)?;
    let map = gradcam(&params, &mc, &image, a.class)?;
    let up = upsample_nearest(&map.values, h.max(map.height()), w.max(map.width()))?;
    export_heatmap_with_sidecar(&up, a.class, &a.out)?;
    let probs = model_forward(&image, &params, &mc)?;
    let (row, col) = argmax_2d(&up);
    write_manifest(
        &a.out,
        "explain",
        json!({ "model": a.model, "image": a.image, "class": a.class }),
        vec![],
        vec![&a.out],
        json!({ "predicted": argmax(probs.data()), "probs": probs.data(), "argmax": [col, row] }),
        start,
    )?;
    println!(
        "class {}: heatmap {}×{} peak at x={col} y={row}, predicted class {}",
        a.class,
        up.shape()[1],
        up.shape()[0],
        argmax(probs.data())
    );
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> CmdResult {
    let start = Instant::now();
    if a.lengths.len() < MIN_BENCH_LENGTHS {
        return Err(usage(format!("--lengths needs at least {MIN_BENCH_LENGTHS} values")));
    }
    if a.lengths.windows(2).any(|w| w[0] >= w[1]) || a.lengths[0] == 0 {
        return Err(usage("--lengths must be positive and strictly ascending"));
    }
    if a.d == 0 || a.repeats == 0 {
        return Err(usage("--d and --repeats must be at least 1"));
    }
    let report = bench_attention(&a.lengths, a.d, a.repeats, a.seed)?;
    let csv = report.to_csv();
    match &a.out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            write_manifest(
                path,
                "bench-attn",
                json!({ "lengths": a.lengths, "d": a.d, "repeats": a.repeats, "seed": a.seed }),
                vec![a.seed],
                vec![path],
                json!({ "linear_slope": report.linear_slope, "quadratic_slope": report.quadratic_slope }),
                start,
            )?;
            println!(
                "slopes: linear {:.3}, quadratic {:.3}",
                report.linear_slope, report.quadratic_slope
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let entries = run_suite(&seeds)?;
    let mut failed = 0;
    for e in &entries {
        let verdict = if e.passed() { "pass" } else { "FAIL" };
        println!(
            "{verdict} {:<20} max_rel_error {:.3e} over {} entries ({:.2}s)",
            e.name, e.max_rel_error, e.checked, e.seconds
        );
        failed += usize::from(!e.passed());
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{failed} operation(s) exceeded relative error {TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::BenchAttn(a) => bench_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
