use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gfr_core::harness::checkpoint;
use gfr_core::harness::dataset::{
    generate_dataset, is_non_empty_dir, read_dataset, read_dataset_config, write_dataset, write_detections, CONFIG_FILE,
};
use gfr_core::harness::diagnostics::{gate_diagnostics, nan_dump};
use gfr_core::harness::eval::{build_report, predict_dataset};
use gfr_core::harness::params::count_params;
use gfr_core::harness::train::{train, LossRecord};
use gfr_core::harness::SceneAnnotation;
use gfr_core::{Detector, Error, RunConfig};

const AFTER_HELP: &str = "Environment:\n  GFR_THREADS  worker threads for convolution kernels (default 1)";

#[derive(Parser, Debug)]
#[command(name = "gfr", version, about = "Gated feature reuse detector on synthetic scenes", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the parameter table of a configuration as CSV.
    Params(ConfigArgs),
    /// Write gate diagnostics for a checkpoint and dataset.
    Diag(DiagArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// key = value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set learning_rate=0.005 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Disable the attention gates.
    #[arg(long)]
    no_gates: bool,
    /// Replace feature-reuse blocks by full-width new features.
    #[arg(long)]
    no_feature_reuse: bool,
    /// Drop the 1.6 and 1/1.6 aspect-ratio priors.
    #[arg(long)]
    no_extra_aspect: bool,
    /// Seed for every random choice of the command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of scenes.
    #[arg(long)]
    count: Option<usize>,
    /// Bucket weights, e.g. small=0.5,medium=0.25,large=0.25.
    #[arg(long)]
    size_mix: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by `gfr gen`.
    #[arg(long)]
    data: PathBuf,
    /// Number of SGD iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory for checkpoint.bin, loss.csv and config.txt.
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for report.json and detections.jsonl.
    #[arg(long)]
    report: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct DiagArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the diagnostic bundle.
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl ConfigArgs {
    /// `base`, then the config file, then flags.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            c.set(k, v)?;
        }
        if self.no_gates {
            c.use_gates = false;
        }
        if self.no_feature_reuse {
            c.use_feature_reuse = false;
        }
        if self.no_extra_aspect {
            c.extra_aspect_1_6 = false;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        c.validate()?;
        Ok(c)
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if is_non_empty_dir(dir) {
        if !force {
            bail!("{} exists and is not empty (use --force to overwrite)", dir.display());
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn check_dataset(config: &RunConfig, scenes: &[SceneAnnotation]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        let [_, c, h, w] = s.image.shape();
        if c != 3 || h != config.input_size || w != config.input_size {
            bail!(
                "image {i} has shape 3x{h}x{w} (channels {c}) but input_size is {}",
                config.input_size
            );
        }
        if let Some(o) = s.objects.iter().find(|o| o.class_id >= config.num_classes) {
            bail!(
                "image {i} has class {} but num_classes is {}",
                o.class_id,
                config.num_classes
            );
        }
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut config = args.config.resolve(RunConfig::default())?;
    if let Some(n) = args.count {
        config.count = n;
    }
    if let Some(mix) = &args.size_mix {
        config.size_mix = mix.parse()?;
    }
    if is_non_empty_dir(&args.out) && !args.force {
        bail!(
            "{} exists and is not empty (use --force to overwrite)",
            args.out.display()
        );
    }
    let scenes = generate_dataset(&config);
    write_dataset(&args.out, &config, &scenes, args.force)?;
    let objects: usize = scenes.iter().map(|s| s.objects.len()).sum();
    println!(
        "wrote {} scenes with {objects} objects to {}",
        scenes.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if !args.data.is_dir() {
        bail!("dataset directory {} does not exist", args.data.display());
    }
    // Without --config the dataset's own echo supplies the defaults.
    let base = if args.config.config.is_none() {
        read_dataset_config(&args.data)?.unwrap_or_default()
    } else {
        RunConfig::default()
    };
    let mut config = args.config.resolve(base)?;
    if let Some(iters) = args.iters {
        config.iterations = iters;
    }
    let scenes = read_dataset(&args.data)?;
    check_dataset(&config, &scenes)?;
    prepare_out_dir(&args.out, args.force)?;
    fs::write(args.out.join(CONFIG_FILE), config.to_text())?;

    let mut detector = Detector::new(config.model_config(), config.seed)?;
    let train_config = config.train_config();
    let every = (config.iterations / 20).max(1);
    let mut seen: Vec<LossRecord> = Vec::new();
    let result = train(&mut detector, &scenes, &train_config, |r| {
        if r.iteration % every == 0 || r.iteration + 1 == config.iterations {
            eprintln!("iter {:>5}  loss {:.5}  lr {}", r.iteration, r.loss, r.learning_rate);
        }
        seen.push(*r);
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NanLoss { iteration }) => {
            let path = args.out.join("nan_dump.json");
            fs::write(&path, nan_dump(iteration, &seen, &detector.store)?)?;
            bail!(
                "loss became non-finite at iteration {iteration}; diagnostics in {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    outcome.write_csv(BufWriter::new(fs::File::create(args.out.join("loss.csv"))?))?;
    if !outcome.evals.is_empty() {
        let mut s = String::from("iteration,map\n");
        for e in &outcome.evals {
            s += &format!(
                "{},{}\n",
                e.iteration,
                e.map.map_or(String::new(), |m| format!("{m:?}"))
            );
        }
        fs::write(args.out.join("eval.csv"), s)?;
    }
    checkpoint::save(&args.out.join("checkpoint.bin"), &config, &detector.store)?;
    match outcome.stopped_at {
        Some(i) => println!("target mAP reached after {i} iterations"),
        None => println!("trained {} iterations", outcome.losses.len()),
    }
    if let Some(l) = outcome.final_loss() {
        println!("final loss {l:.6}");
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (config, detector) =
        checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let scenes = read_dataset(&args.data)?;
    check_dataset(&config, &scenes)?;
    prepare_out_dir(&args.report, args.force)?;
    fs::write(args.report.join(CONFIG_FILE), config.to_text())?;
    let (dets, attention) = predict_dataset(&detector, &scenes, &config.decode_params())?;
    let report = build_report(config.num_classes, config.scale_sizes.len(), &scenes, &dets, &attention);
    fs::write(args.report.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_detections(
        BufWriter::new(fs::File::create(args.report.join("detections.jsonl"))?),
        &dets,
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match report.map {
        Some(m) => println!("mAP {m:.4} over {} images", report.num_images),
        None => println!("mAP undefined over {} images", report.num_images),
    }
    Ok(())
}

fn cmd_params(args: &ConfigArgs) -> Result<()> {
    let config = args.resolve(RunConfig::default())?;
    let detector = Detector::new(config.model_config(), config.seed)?;
    count_params(&detector).write_csv(std::io::stdout().lock())?;
    Ok(())
}

fn cmd_diag(args: &DiagArgs) -> Result<()> {
    let (config, detector) =
        checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let scenes = read_dataset(&args.data)?;
    check_dataset(&config, &scenes)?;
    prepare_out_dir(&args.out, args.force)?;
    fs::write(args.out.join(CONFIG_FILE), config.to_text())?;
    let diag = gate_diagnostics(&detector, &scenes)?;
    diag.write_bundle(&args.out)?;
    for c in &diag.summary.small_vs_large {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "scale {}: small {} large {} diff {}",
            c.scale,
            f(c.small),
            f(c.large),
            f(c.difference)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Params(a) => cmd_params(a),
        Command::Diag(a) => cmd_diag(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
