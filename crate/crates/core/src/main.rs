use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use volnorm::bench::{emit_report, run_plan, ExperimentPlan, Execution, ReportFormat, RunOptions, SeedRun};
use volnorm::data::{
    generate_synthetic, read_nrrd, read_nrrd_pair, write_nrrd, write_pgm_slices, DatasetManifest, Grid3,
    NrrdEncoding, Volume,
};
use volnorm::gradcheck::run_all;
use volnorm::net::{UNet, UNetSpec};
use volnorm::norm::{NormKind, NormMethod, DEFAULT_EPSILON};
use volnorm::objective::dice_hard;
use volnorm::tensor::DType;
use volnorm::train::{load_checkpoint, predict_volume};
use volnorm::{Error, Real, Result};

#[derive(Parser)]
#[command(name = "volnorm", version, about = "Normalization benchmark for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment plan and write the comparison report.
    Bench(BenchArgs),
    /// Run every finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset as NRRD files plus its manifest.
    Synth(SynthArgs),
    /// Segment a volume with a saved checkpoint and dump the mask.
    Predict(PredictArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Report destination; `.csv` selects CSV unless --format says otherwise. Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or markdown
    #[arg(long)]
    format: Option<ReportFormat>,
    /// One run at a time (the default).
    #[arg(long, conflicts_with = "parallel")]
    serial: bool,
    /// Spread runs over worker threads.
    #[arg(long)]
    parallel: bool,
    /// Worker threads for --parallel; defaults to the available cores.
    #[arg(long, requires = "parallel")]
    workers: Option<usize>,
    /// Override the plan's precision (f64 or f32).
    #[arg(long)]
    precision: Option<String>,
    /// Save every trained network into this directory.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Suppress per-run progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Skip the whole-network suite.
    #[arg(long)]
    skip_network: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training volumes to write.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Held-out volumes to write.
    #[arg(long, default_value_t = 0)]
    eval: usize,
    /// Template manifest; its seed and counts are replaced by the flags.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// NRRD image to segment.
    #[arg(long, conflicts_with = "seed")]
    image: Option<PathBuf>,
    /// Reference NRRD label map for scoring.
    #[arg(long, requires = "image")]
    mask: Option<PathBuf>,
    /// Segment a synthetic volume with this seed instead of a file.
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest describing the synthetic volume.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// none, batch, group:G or instance
    #[arg(long, default_value = "instance")]
    norm: NormKind,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 8)]
    base_filters: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value = "f64")]
    precision: String,
}

fn precision(raw: &str) -> Result<DType> {
    match raw {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        other => Err(Error::Usage(format!("precision must be f64 or f32, got `{other}`"))),
    }
}

fn progress(method: &NormMethod, run: &SeedRun) {
    let dice = match (run.dice, &run.error) {
        (_, Some(e)) => format!("failed: {e}"),
        (Some(d), _) => format!("dice {d:.4}"),
        (None, _) => "diverged".into(),
    };
    eprintln!(
        "{:<10} seed {:<3} {:>8.3} s/epoch  {dice}",
        method.kind.to_string(),
        run.seed,
        run.epoch_seconds
    );
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut plan = ExperimentPlan::load(&args.plan)?;
    if let Some(p) = &args.precision {
        plan.precision = precision(p)?;
    }
    let execution = if args.parallel {
        let workers = args
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Execution::Parallel { workers }
    } else {
        Execution::Serial
    };
    let options = RunOptions {
        execution,
        checkpoint_dir: args.checkpoints,
        progress: (!args.quiet).then_some(progress as fn(&NormMethod, &SeedRun)),
    };
    let reports = run_plan(&plan, &options)?;
    let format = args
        .format
        .or_else(|| args.out.as_deref().map(ReportFormat::from_path))
        .unwrap_or(ReportFormat::Markdown);
    let text = emit_report(&reports, format);
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let results = run_all(!args.skip_network)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<28} max_rel_err {:>10.3e}  tol {:.0e}  {verdict}", r.name, r.max_rel_err, r.tolerance);
    }
    Ok(ok)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut manifest = match &args.manifest {
        Some(path) => DatasetManifest::load(path)?,
        None => DatasetManifest::default(),
    };
    manifest.synth.seed = args.seed;
    manifest.train_count = args.count;
    manifest.eval_count = args.eval;
    let data = manifest.generate()?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("manifest.cfg"), manifest.render())?;
    for (split, volumes) in [("train", &data.train), ("eval", &data.eval)] {
        for (i, vol) in volumes.iter().enumerate() {
            write_nrrd(args.out.join(format!("{split}_{i:03}_image.nrrd")), &vol.intensity_grid(), NrrdEncoding::Raw)?;
            write_nrrd(args.out.join(format!("{split}_{i:03}_mask.nrrd")), &vol.mask_grid(), NrrdEncoding::Raw)?;
        }
    }
    println!(
        "wrote {} training and {} held-out volumes to {}",
        data.train.len(),
        data.eval.len(),
        args.out.display()
    );
    Ok(())
}

fn segment<T: Real>(spec: UNetSpec, checkpoint: &Path, volume: &Volume) -> Result<Vec<f64>> {
    let mut net = UNet::<T>::build(spec, 0)?;
    net.params_mut().load_values(&load_checkpoint::<T>(checkpoint)?)?;
    Ok(predict_volume(&net, volume)?.cast::<f64>().into_vec())
}

fn predict(args: PredictArgs) -> Result<()> {
    let (volume, labelled) = match (&args.image, args.seed) {
        (Some(image), _) => match &args.mask {
            Some(mask) => (read_nrrd_pair(image, mask)?, true),
            None => (read_nrrd(image)?, false),
        },
        (None, Some(seed)) => {
            let manifest = match &args.manifest {
                Some(path) => DatasetManifest::load(path)?,
                None => DatasetManifest::default(),
            };
            (generate_synthetic(&manifest.synth.with_seed(seed))?, true)
        }
        (None, None) => return Err(Error::Usage("predict needs --image or --seed".into())),
    };
    let spec = UNetSpec::new(args.levels, args.base_filters, NormMethod::new(args.norm).with_epsilon(args.epsilon));
    let mask = match precision(&args.precision)? {
        DType::F64 => segment::<f64>(spec, &args.checkpoint, &volume)?,
        DType::F32 => segment::<f32>(spec, &args.checkpoint, &volume)?,
    };
    let grid = Grid3::new(volume.slices(), volume.height(), volume.width(), mask)?;
    fs::create_dir_all(&args.out)?;
    let tensor = volume.mask_tensor();
    let predicted = grid.to_tensor();
    predicted.write_blob(fs::File::create(args.out.join("mask.tensor"))?)?;
    let slices = write_pgm_slices(args.out.join("slices"), "mask", &grid)?;
    write_pgm_slices(args.out.join("slices"), "image", &volume.intensity_grid())?;
    println!("wrote mask.tensor and {} slice images to {}", slices.len(), args.out.display());
    if labelled {
        println!("dice {:.4}", dice_hard(&predicted, &tensor)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(a) => bench(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a).map(|()| true),
        Command::Predict(a) => predict(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
