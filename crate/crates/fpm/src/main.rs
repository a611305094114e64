use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fpm::config::{load_json, ReconstructOverrides, SimulateConfig, SweepConfig};
use fpm::container::{load_dataset, save_dataset};
use fpm::error::{FpmError, Result};
use fpm::export::{export_results, read_png16};
use fpm::field::RealField2D;
use fpm::forward::{generate_dataset_with_exposures, FpmDataset, GroundTruth, NoiseModel};
use fpm::gradient::{ParamFlags, SystemParameters};
use fpm::metrics::reconstruction_psnr;
use fpm::reconstruct::{reconstruct, refocus, RoiRect, RunMethod, RunOptions};

#[derive(Parser)]
#[command(name = "fpm", about = "Fourier ptychography simulation and reconstruction", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a system config.
    Simulate(SimulateArgs),
    /// Reconstruct a dataset and export images, parameters and a trace.
    Reconstruct(ReconstructArgs),
    /// Score an exported reconstruction against dataset ground truth.
    Evaluate(EvaluateArgs),
    /// Joint object and defocus recovery on a region of interest.
    Refocus(RefocusArgs),
    /// Run a method sweep and summarize convergence per run.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output path prefix for the dataset container.
    #[arg(long)]
    out: PathBuf,
    /// Seed for every random draw in this command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground-truth amplitude PNG (grayscale, mapped to [0,1]). Requires
    /// --truth-phase; without both, a synthetic truth is generated.
    #[arg(long, requires = "truth_phase")]
    truth_amp: Option<PathBuf>,
    /// Ground-truth phase PNG (grayscale, mapped to [-pi,pi)).
    #[arg(long, requires = "truth_amp")]
    truth_phase: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Sequential,
    Global,
    Batch,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset path prefix.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Batch)]
    method: MethodArg,
    /// Images per update for the batch method.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra parameter classes to optimize, comma separated: pupil,z,gamma.
    /// The object spectrum is always optimized.
    #[arg(long, value_delimiter = ',')]
    enable: Vec<String>,
    /// Epochs restricted to the spectrum before the enabled classes join.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// JSON file overriding optimizer and loss settings.
    #[arg(long)]
    overrides: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory produced by `fpm reconstruct`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset path prefix holding the ground truth.
    #[arg(long)]
    truth: PathBuf,
    /// Output JSON path (default: <run>/evaluation.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RefocusArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Region of interest in camera pixels: x,y,w,h.
    #[arg(long, value_delimiter = ',')]
    roi: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Sweep config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Refocus(a) => run_refocus(a),
        Command::Benchmark(a) => run_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn truth_from_pngs(amp_path: &PathBuf, phase_path: &PathBuf, hr: usize) -> Result<GroundTruth> {
    let load = |p: &PathBuf| -> Result<RealField2D> {
        let img = image::open(p)?.into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != hr || h != hr {
            return Err(FpmError::DimensionMismatch {
                expected: format!("{hr}x{hr}"),
                actual: format!("{h}x{w}"),
            });
        }
        let mut out = RealField2D::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                out.set(r, c, img.get_pixel(c as u32, r as u32).0[0] as f64 / 65535.0);
            }
        }
        Ok(out)
    };
    let amplitude = load(amp_path)?;
    let mut phase = load(phase_path)?;
    for v in phase.data.iter_mut() {
        *v = *v * 2.0 * std::f64::consts::PI - std::f64::consts::PI;
    }
    GroundTruth::new(amplitude, phase)
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: SimulateConfig = load_json(&a.config)?;
    cfg.validate()?;
    let system = cfg.system.clone();
    let truth = match (&a.truth_amp, &a.truth_phase) {
        (Some(amp), Some(phase)) => truth_from_pngs(amp, phase, system.hr_size())?,
        _ => GroundTruth::synthetic(&system, a.seed)?,
    };
    let mut params = SystemParameters::ideal(&system)?;
    params.defocus_um = cfg.defocus_um;
    if let Some([lo, hi]) = cfg.gamma_range {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(2);
        for g in params.intensities.iter_mut() {
            *g = lo + (hi - lo) * rng.random::<f64>();
        }
    }
    let noise = match cfg.noise.take() {
        Some(mut n) => {
            n.seed = a.seed;
            n
        }
        None => NoiseModel::none(),
    };
    let dataset =
        generate_dataset_with_exposures(&truth, &system, &params, &noise, cfg.exposures.clone())?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_dataset(&dataset, &a.out)?;
    println!(
        "wrote {} planes of {}x{} to {}",
        dataset.led_count(),
        system.lr_size,
        system.lr_size,
        a.out.display()
    );
    Ok(())
}

fn parse_flags(enable: &[String]) -> Result<ParamFlags> {
    let mut flags = ParamFlags::spectrum_only();
    for item in enable {
        let item = item.trim();
        match item {
            "" => {}
            "pupil" => flags.pupil = true,
            "z" | "defocus" => flags.defocus = true,
            "gamma" => flags.gamma = true,
            other => {
                return Err(FpmError::Config(format!(
                    "unknown parameter class '{other}', expected pupil, z or gamma"
                )))
            }
        }
    }
    Ok(flags)
}

fn build_method(method: MethodArg, batch_size: Option<usize>, n: usize) -> Result<RunMethod> {
    match method {
        MethodArg::Sequential => Ok(RunMethod::Sequential),
        MethodArg::Global => Ok(RunMethod::Global),
        MethodArg::Batch => {
            let b = batch_size.unwrap_or_else(|| (n / 4).max(1));
            Ok(RunMethod::RandomBatch { batch_size: b })
        }
    }
}

fn apply_overrides(opts: &mut RunOptions, path: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = path {
        let ov: ReconstructOverrides = load_json(path)?;
        if let Some(o) = ov.optimizer {
            o.validate()?;
            opts.optimizer = o;
        }
        if let Some(l) = ov.loss {
            opts.loss = l;
        }
        if let Some(w) = ov.warmup_epochs {
            opts.warmup_epochs = w;
        }
    }
    Ok(())
}

fn run_reconstruct(a: ReconstructArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let method = build_method(a.method, a.batch_size, dataset.led_count())?;
    let mut opts = RunOptions::new(method, a.epochs, a.seed);
    opts.flags = parse_flags(&a.enable)?;
    if let Some(w) = a.warmup_epochs {
        opts.warmup_epochs = w;
    }
    apply_overrides(&mut opts, &a.overrides)?;
    let (state, trace) = reconstruct(&dataset, &opts)?;
    export_results(&state, &trace, &a.out)?;
    report_run(&trace, &a.out);
    Ok(())
}

fn report_run(trace: &fpm::reconstruct::ConvergenceTrace, out: &PathBuf) {
    if let Some(reason) = &trace.diverged {
        println!("diverged: {reason}");
    }
    if let Some(last) = trace.rows.last() {
        println!(
            "finished epoch {} with loss {:.6e} in {:.2}s, results in {}",
            last.epoch,
            last.loss,
            last.seconds,
            out.display()
        );
    }
}

#[derive(serde::Serialize)]
struct Evaluation {
    amplitude_psnr_db: f64,
    phase_psnr_db: f64,
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let dataset = load_dataset(&a.truth)?;
    let truth = dataset.truth.as_ref().ok_or_else(|| {
        FpmError::Dataset(format!("{} carries no ground truth", a.truth.display()))
    })?;
    let scales: fpm::export::ExportScales = load_json(&a.run.join("scales.json"))?;
    let amplitude = read_png16(&a.run.join("amplitude.png"), scales.amplitude)?;
    let phase = read_png16(&a.run.join("phase.png"), scales.phase)?;
    let (amp_db, phase_db) = reconstruction_psnr(&amplitude, &phase, truth)?;
    let eval = Evaluation {
        amplitude_psnr_db: amp_db,
        phase_psnr_db: phase_db,
    };
    let out = a.out.unwrap_or_else(|| a.run.join("evaluation.json"));
    fs::write(&out, serde_json::to_string_pretty(&eval)?)?;
    println!("amplitude {amp_db:.2} dB, phase {phase_db:.2} dB");
    Ok(())
}

fn run_refocus(a: RefocusArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    if a.roi.len() != 4 {
        return Err(FpmError::Config("roi must be x,y,w,h".into()));
    }
    let roi = RoiRect {
        x: a.roi[0],
        y: a.roi[1],
        w: a.roi[2],
        h: a.roi[3],
    };
    let n = dataset.led_count();
    let mut opts = RunOptions::new(RunMethod::RandomBatch { batch_size: (n / 4).max(1) }, a.epochs, a.seed);
    opts.flags = ParamFlags::spectrum_only();
    let (state, trace) = refocus(&dataset, roi, &opts)?;
    export_results(&state, &trace, &a.out)?;
    println!("recovered defocus {:.3} um", state.params.defocus_um);
    report_run(&trace, &a.out);
    Ok(())
}

fn run_benchmark(a: BenchmarkArgs) -> Result<()> {
    let cfg: SweepConfig = load_json(&a.config)?;
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    let truth = GroundTruth::synthetic(&cfg.system, cfg.truth_seed)?;
    let params = SystemParameters::ideal(&cfg.system)?;

    let mut summary = csv::Writer::from_path(a.out.join("summary.csv"))?;
    summary.write_record([
        "label",
        "seed",
        "final_loss",
        "seconds",
        "amplitude_psnr_db",
        "phase_psnr_db",
    ])?;
    for seed in &cfg.seeds {
        let noise = match &cfg.noise {
            Some(n) => {
                let mut n = n.clone();
                n.seed = *seed;
                n
            }
            None => NoiseModel::none(),
        };
        let dataset: FpmDataset =
            fpm::forward::generate_dataset(&truth, &cfg.system, &params, &noise)?;
        for run in &cfg.runs {
            let opts = RunOptions::new(run.method, cfg.epochs, *seed);
            let (state, trace) = reconstruct(&dataset, &opts)?;
            let dir = a.out.join(format!("{}-seed{}", run.label, seed));
            export_results(&state, &trace, &dir)?;
            let last = trace
                .rows
                .last()
                .ok_or_else(|| FpmError::Config("empty trace".into()))?;
            summary.write_record([
                run.label.clone(),
                seed.to_string(),
                format!("{:.17e}", last.loss),
                format!("{:.6}", last.seconds),
                last.amplitude_psnr_db.map_or(String::new(), |v| format!("{v:.6}")),
                last.phase_psnr_db.map_or(String::new(), |v| format!("{v:.6}")),
            ])?;
            println!(
                "{} seed {}: loss {:.6e} after {} epochs",
                run.label, seed, last.loss, cfg.epochs
            );
        }
    }
    summary.flush()?;
    Ok(())
}
