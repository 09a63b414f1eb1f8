//! `conformer`: train, evaluate, audit, inspect, benchmark and gradient-check
//! dual-branch networks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use conformer::audit::{audit, compare_with_references, render_comparison};
use conformer::bench::bench;
use conformer::checkpoint::Checkpoint;
use conformer::data::{load_image_folder, read_png, synth_shapes, Dataset, PIXEL_MEAN, PIXEL_STD};
use conformer::eval::{evaluate, Transform};
use conformer::gradcheck::check_model;
use conformer::trainer::MetricsWriter;
use conformer::viz::{self, Colormap, Heatmap};
use conformer::{Conformer, ConformerConfig, Error, TrainConfig, Trainer};
use conformer_tensor::gradcheck::GradCheckConfig;
use conformer_tensor::Tensor;

#[derive(Parser)]
#[command(name = "conformer", version, about = "Dual-branch CNN/transformer networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both classifiers and write metrics and checkpoints.
    Train(TrainArgs),
    /// Accuracy of a checkpoint, optionally under rotation or resizing.
    Eval(EvalArgs),
    /// Parameter and MAC budget of an architecture.
    Audit(AuditArgs),
    /// Write CAM, attention-rollout and feature-map heatmaps for one image.
    Inspect(InspectArgs),
    /// Inference throughput on random inputs.
    Bench(BenchArgs),
    /// Finite-difference check of every parameter gradient in f64.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Image-folder dataset: one subdirectory of PNGs per class.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use this many generated shape images instead of a folder.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Seed of the generated images.
    #[arg(long, default_value_t = 7)]
    synthetic_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture JSON file or preset name.
    #[arg(long)]
    config: String,
    /// Training hyperparameters as JSON; flags below override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for metrics.jsonl and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snapshot_interval: Option<u64>,
    /// Stop after this many updates without shortening the schedule.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Do not echo metrics to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Rotation angles in degrees (repeatable).
    #[arg(long)]
    rotate: Vec<f64>,
    /// Square input sizes to resize to (repeatable).
    #[arg(long)]
    resize: Vec<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AuditArgs {
    /// Architecture JSON file or preset name.
    #[arg(long)]
    config: String,
    /// Defaults to the configured input size.
    #[arg(long)]
    input_size: Option<usize>,
    /// Compare against the published budgets.
    #[arg(long, value_enum)]
    compare: Option<Reference>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Paper,
}

#[derive(Args)]
struct InspectArgs {
    /// Trained weights; without it a freshly initialized --config model is used.
    #[arg(long, required_unless_present = "config")]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<String>,
    /// PNG input at the model's resolution.
    #[arg(long, required_unless_present = "synthetic_index")]
    image: Option<PathBuf>,
    /// Use item i of the generated shapes test split instead of a file.
    #[arg(long, conflicts_with = "image")]
    synthetic_index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Class activation map for this class (defaults to the prediction).
    #[arg(long)]
    cam: bool,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    rollout: bool,
    /// Feature-map selector: stem, c2..c5, trans.final, all, or a block like c3.b05.
    #[arg(long)]
    features: Option<String>,
    #[arg(long, value_enum, default_value_t = Cmap::Viridis)]
    colormap: Cmap,
    /// Blend heatmaps over the input at 40% opacity.
    #[arg(long)]
    overlay: bool,
    /// Also write raw TNSR tensors.
    #[arg(long)]
    raw: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cmap {
    Gray,
    Viridis,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Probed coordinates per parameter tensor.
    #[arg(long, default_value_t = 6)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    /// A comparison (audit or gradcheck) did not pass.
    Mismatch,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Mismatch) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Argument(_) | Error::Config { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn configure_threads() -> Result<(), String> {
    if let Ok(v) = std::env::var("CONFORMER_THREADS") {
        let n: usize = v.parse().map_err(|_| format!("CONFORMER_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn env_seed() -> conformer::Result<Option<u64>> {
    match std::env::var("CONFORMER_SEED") {
        Ok(v) => {
            v.parse().map(Some).map_err(|_| Error::Argument(format!("CONFORMER_SEED must be an integer, got `{v}`")))
        }
        Err(_) => Ok(None),
    }
}

/// A JSON file when the path exists, otherwise a preset name (".json" optional).
fn load_config(spec: &str) -> conformer::Result<ConformerConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        return ConformerConfig::load(path);
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
    ConformerConfig::preset(name).map_err(|_| {
        Error::Argument(format!(
            "`{spec}` is neither a config file nor a preset ({})",
            conformer::config::PRESETS.join(", ")
        ))
    })
}

fn load_data(args: &DataArgs, size: usize, classes: usize, split: &str) -> conformer::Result<Dataset> {
    match (&args.data, args.synthetic) {
        (Some(dir), _) => load_image_folder(dir),
        (None, Some(n)) => synth_shapes(classes.min(4), size, n, args.synthetic_seed, split),
        (None, None) => Err(Error::Argument("pass --data <dir> or --synthetic <count>".into())),
    }
}

fn run(cmd: Command) -> conformer::Result<Outcome> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit_cmd(a),
        Command::Inspect(a) => inspect(a),
        Command::Bench(a) => {
            let cfg = load_config(&a.config)?;
            let r = bench(&cfg, a.batch, a.iters, a.warmup)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!(
                    "{:.1} images/s (median of {}, batch {}, {}x{})",
                    r.images_per_second, a.iters, r.batch, r.input_size, r.input_size
                );
                println!("hardware: {}", r.hardware);
            }
            Ok(Outcome::Ok)
        }
        Command::Gradcheck(a) => {
            let cfg = load_config(&a.config)?;
            let seed = env_seed()?.unwrap_or(a.seed);
            let report =
                check_model(&cfg, seed, GradCheckConfig { eps: a.eps, tol: a.tol, coords_per_tensor: a.coords })?;
            let checked: usize = report.params.iter().map(|p| p.checked).sum();
            let skipped: usize = report.params.iter().map(|p| p.skipped).sum();
            println!("{} tensors, {checked} coordinates checked, {skipped} skipped at kinks", report.params.len());
            if let Some(w) = report.worst() {
                println!(
                    "worst: {} [{}] rel.err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    w.name, w.worst_index, w.max_rel_error, w.analytic, w.numeric
                );
            }
            for f in report.failures() {
                println!("FAIL {} rel.err {:.3e} ({} checked)", f.name, f.max_rel_error, f.checked);
            }
            let pass = report.passed();
            println!("{} at tol {:e}", if pass { "PASS" } else { "FAIL" }, a.tol);
            Ok(if pass { Outcome::Ok } else { Outcome::Mismatch })
        }
    }
}

fn train(a: TrainArgs) -> conformer::Result<Outcome> {
    let mut tc = match &a.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.warmup_steps {
        tc.warmup_steps = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.snapshot_interval {
        tc.snapshot_interval = v;
    }
    if let Some(v) = env_seed()? {
        tc.seed = v;
    }
    tc.validate()?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, tc.clone())?,
        None => Trainer::new(Conformer::new(load_config(&a.config)?, tc.seed)?, tc.clone())?,
    };
    let cfg = trainer.model.config.clone();
    let data = load_data(&a.data, cfg.input_size, cfg.num_classes, "train")?;
    cfg.check_input_size(data.resolution())?;
    std::fs::create_dir_all(&a.out)?;
    let mut metrics = MetricsWriter::create(&a.out.join("metrics.jsonl"), !a.quiet)?;
    let out = a.out.clone();
    trainer.run(&data, a.max_steps, |rec, t| {
        metrics.write(rec)?;
        if tc.snapshot_interval > 0 && rec.step % tc.snapshot_interval == 0 {
            t.checkpoint().save(&out.join(format!("step_{:06}.cfmr", rec.step)))?;
        }
        Ok(())
    })?;
    metrics.finish()?;
    trainer.checkpoint().save(&a.out.join("final.cfmr"))?;
    Ok(Outcome::Ok)
}

fn model_from_checkpoint(path: &Path) -> conformer::Result<Conformer> {
    let ckpt = Checkpoint::load(path)?;
    let trainer = Trainer::resume(&ckpt, TrainConfig::default())?;
    Ok(trainer.model)
}

fn eval(a: EvalArgs) -> conformer::Result<Outcome> {
    let model = model_from_checkpoint(&a.checkpoint)?;
    let cfg = &model.config;
    let data = load_data(&a.data, cfg.input_size, cfg.num_classes, "test")?;
    let mut transforms = vec![Transform::None];
    transforms.extend(a.rotate.iter().map(|&d| Transform::Rotate(d)));
    transforms.extend(a.resize.iter().map(|&s| Transform::Resize(s)));
    let reports = transforms.into_iter().map(|t| evaluate(&model, &data, t)).collect::<conformer::Result<Vec<_>>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}%", 100.0 * x));
        println!("{:<14} {:>8} {:>8} {:>8}", "transform", "cnn", "trans", "summed");
        for r in reports {
            println!(
                "{:<14} {:>8} {:>8} {:>7.2}%",
                r.transform,
                fmt(r.cnn_acc),
                fmt(r.trans_acc),
                100.0 * r.summed_acc
            );
        }
    }
    Ok(Outcome::Ok)
}

fn audit_cmd(a: AuditArgs) -> conformer::Result<Outcome> {
    let cfg = load_config(&a.config)?;
    let size = a.input_size.unwrap_or(cfg.input_size);
    let report = audit(&cfg, size)?;
    let rows = match a.compare {
        Some(Reference::Paper) => Some(compare_with_references(&cfg)?),
        None => None,
    };
    if a.json {
        let v = serde_json::json!({ "report": report, "comparison": rows });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        print!("{}", report.render());
        if let Some(r) = &rows {
            println!();
            print!("{}", render_comparison(r));
        }
    }
    let pass = rows.is_none_or(|r| r.iter().all(|x| x.pass));
    Ok(if pass { Outcome::Ok } else { Outcome::Mismatch })
}

fn inspect(a: InspectArgs) -> conformer::Result<Outcome> {
    let model = match (&a.checkpoint, &a.config) {
        (Some(p), _) => model_from_checkpoint(p)?,
        (None, Some(c)) => Conformer::new(load_config(c)?, env_seed()?.unwrap_or(0))?,
        (None, None) => return Err(Error::Argument("pass --checkpoint or --config".into())),
    };
    let size = model.config.input_size;
    let image = match (&a.image, a.synthetic_index) {
        (Some(p), _) => {
            let (w, h, px) = read_png(p)?;
            if w != size || h != size {
                return Err(Error::Argument(format!("image is {w}x{h}; this model expects {size}x{size}")));
            }
            Tensor::new([3, size, size], px.into_iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD).collect())?
        }
        (None, Some(i)) => {
            let d = synth_shapes(model.config.num_classes.min(4), size, i + 1, 7, "test")?;
            d.images.narrow(0, i, 1)?.reshape([3, size, size])?
        }
        (None, None) => return Err(Error::Argument("pass --image or --synthetic-index".into())),
    };
    if !(a.cam || a.rollout || a.features.is_some()) {
        return Err(Error::Argument("nothing to do: pass --cam, --rollout or --features".into()));
    }
    std::fs::create_dir_all(&a.out)?;
    let cmap = match a.colormap {
        Cmap::Gray => Colormap::Gray,
        Cmap::Viridis => Colormap::Viridis,
    };
    let overlay = a.overlay.then_some(&image);
    let emit = |stem: &str, map: &Heatmap, raw: Option<&Tensor<f32>>| -> conformer::Result<()> {
        let png = a.out.join(format!("{stem}.png"));
        viz::write_png(&png, map, cmap, overlay)?;
        println!("{} ({})", png.display(), map.tag);
        if a.raw {
            let t = match raw {
                Some(t) => t.clone(),
                None => Tensor::new([map.height, map.width], map.values.clone())?,
            };
            viz::write_tnsr(&a.out.join(format!("{stem}.tnsr")), &t)?;
        }
        Ok(())
    };
    if a.cam {
        let class = match a.class {
            Some(c) => c,
            None => {
                let batch = image.reshape([1, 3, size, size])?;
                conformer::model::argmax(&model.logits(&batch)?.predict()?)[0]
            }
        };
        emit(&format!("cam_class{class}"), &viz::cam(&model, &image, class)?, None)?;
    }
    if a.rollout {
        emit("rollout", &viz::attention_rollout(&model, &image)?, None)?;
    }
    if let Some(sel) = &a.features {
        for f in viz::export_feature_maps(&model, &image, sel)? {
            emit(&format!("featmap_{}", f.name), &f.heatmap, Some(&f.raw))?;
        }
    }
    Ok(Outcome::Ok)
}
