mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use splatterlab::eval::{geometry_render, metrics_report, sweep_cameras};
use splatterlab::gradcheck::suite::{run_operation, SuiteConfig, OPERATIONS};
use splatterlab::losses::composite;
use splatterlab::rasterizer::render;
use splatterlab::splatter::SplatterImage;
use splatterlab::synthgen::{generate_dataset, load_dataset_sample, validate_dataset, Manifest, MultiViewSample};
use splatterlab::training::{fit_with_progress, FitConfig, FitProblem};
use splatterlab::{GaussianSet, Image};

use config::{FitRecord, RunConfig, DECODE_FILE, GRID_FILE, RECORD_FILE, TRACE_FILE};

#[derive(Parser)]
#[command(name = "splatterlab", version, about = "Fit, render and evaluate splatter-image reconstructions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural multi-view dataset.
    Gen(GenArgs),
    /// Check every sample of a dataset against the capture protocol.
    ValidateDs(ValidateArgs),
    /// Fit splatter images to dataset samples.
    Fit(FitArgs),
    /// Render a fitted grid in the sample views or along a novel-view sweep.
    Render(RenderArgs),
    /// Render shaded geometry of a fitted grid.
    Geo(GeoArgs),
    /// Compute PSNR, SSIM and jitter of a fitted grid.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root to create.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset root.
    dir: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample index to fit.
    #[arg(long, conflicts_with = "all")]
    sample: Option<usize>,
    /// Fit every sample of the dataset.
    #[arg(long)]
    all: bool,
    /// Output directory; each sample gets its own subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Gaussians per pixel.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    grid: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_j: Option<f64>,
    /// Disable the perturbed twin pipeline.
    #[arg(long)]
    no_pairing: bool,
    /// Supervision views held out from fitting.
    #[arg(long)]
    holdout: Option<usize>,
    /// Print the loss every this many iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    /// Fitted grid written by `fit`.
    #[arg(long)]
    grid: PathBuf,
    /// Render the novel-view sweep instead of the sample views.
    #[arg(long)]
    sweep: bool,
    /// Output directory (defaults to `renders/` beside the grid).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GeoArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Output directory (defaults to `geometry/` beside the grid).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Frames of re-detected face boxes for the jitter metric (0 skips it).
    #[arg(long, default_value_t = 8)]
    jitter_frames: usize,
    /// Report path (defaults to `metrics.json` beside the grid).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Checked cases per operation.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Relative tolerance.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Absolute tolerance near zero.
    #[arg(long, default_value_t = 1e-6)]
    abs_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to these operations (repeatable).
    #[arg(long = "op")]
    ops: Vec<String>,
}

/// Errors that map to the usage exit code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Ok(v) = std::env::var("SPLATTERLAB_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SPLATTERLAB_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("{}", <Cli as clap::CommandFactory>::command().render_usage());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Gen(a) => gen(a),
        Command::ValidateDs(a) => validate(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render_cmd(a),
        Command::Geo(a) => geo(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn gen(a: GenArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.dataset.n_samples = n;
    }
    if let Some(seed) = a.seed {
        cfg.dataset.seed = seed;
    }
    let out = a.out.or(cfg.paths.out.clone()).ok_or_else(|| usage("gen needs --out"))?;
    cfg.validate()?;
    let manifest = generate_dataset(&cfg.dataset, &out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> anyhow::Result<ExitCode> {
    let report = validate_dataset(&a.dir)?;
    for f in &report.failures {
        println!("FAIL {f}");
    }
    println!("{} samples, {} failures", report.samples, report.failures.len());
    Ok(if report.is_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn fit(a: FitArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let f = &mut cfg.fit;
    if let Some(v) = a.iterations {
        f.iterations = v;
    }
    if let Some(v) = a.layers {
        f.layers = v;
    }
    if let Some(v) = a.grid {
        f.grid_size = v;
    }
    if let Some(v) = a.seed {
        f.seed = v;
    }
    if let Some(v) = a.lambda_j {
        f.weights.lambda_j = v;
    }
    if let Some(v) = a.holdout {
        f.holdout = v;
    }
    if a.no_pairing {
        f.jitter_pairing = false;
    }
    cfg.validate()?;
    let data = a.data.or(cfg.paths.data.clone()).ok_or_else(|| usage("fit needs --data"))?;
    let out = a.out.or(cfg.paths.out.clone()).ok_or_else(|| usage("fit needs --out"))?;
    let manifest = Manifest::read(&data)?;
    let indices: Vec<usize> = match (a.sample, a.all) {
        (Some(i), false) => vec![i],
        (None, true) => (0..manifest.samples.len()).collect(),
        (None, false) => vec![0],
        (Some(_), true) => return Err(usage("--sample and --all are exclusive")),
    };
    for i in indices {
        let entry = manifest
            .samples
            .get(i)
            .ok_or_else(|| usage(format!("sample {i} out of range ({} samples)", manifest.samples.len())))?;
        let sample = load_dataset_sample(&data, i)?;
        let dir = out.join(&entry.dir);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let trace_path = dir.join(TRACE_FILE);
        let mut trace = std::io::BufWriter::new(
            std::fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?,
        );
        let mut io_error = None;
        let result = fit_with_progress(&sample, &cfg.fit, |r| {
            if a.log_every > 0 && (r.iteration % a.log_every == 0 || r.iteration + 1 == cfg.fit.iterations) {
                log::info!("sample {i} iteration {} loss {:.6}", r.iteration, r.loss.total);
            }
            if io_error.is_none() {
                if let Err(e) = serde_json::to_writer(&mut trace, r).map_err(anyhow::Error::from).and_then(|_| {
                    trace.write_all(b"\n")?;
                    Ok(())
                }) {
                    io_error = Some(e);
                }
            }
        })?;
        if let Some(e) = io_error {
            return Err(e.context(format!("writing {}", trace_path.display())));
        }
        trace.flush()?;
        result.grid.write(dir.join(GRID_FILE))?;
        write_json(&dir.join(DECODE_FILE), &cfg.fit.decode)?;
        let final_loss = result.trace.last().map_or(f64::NAN, |r| r.loss.total);
        let record = FitRecord {
            data: std::path::absolute(&data).unwrap_or(data.clone()),
            sample: i,
            config: cfg.fit.clone(),
            final_loss,
            scale: result.reconstruction.scale.s,
        };
        write_json(&dir.join(RECORD_FILE), &record)?;
        println!("{}: final loss {final_loss:.6}, scale {:.4}", dir.display(), record.scale);
    }
    Ok(ExitCode::SUCCESS)
}

/// A fitted grid with the sample and configuration it was fitted to.
struct Fitted {
    grid: SplatterImage,
    record: FitRecord,
    sample: MultiViewSample,
}

impl Fitted {
    fn load(grid: &Path) -> anyhow::Result<Self> {
        let record = FitRecord::beside(grid)?;
        let sample = load_dataset_sample(&record.data, record.sample)?;
        let grid = SplatterImage::read(grid)?;
        Ok(Self { grid, record, sample })
    }

    fn gaussians(&self) -> anyhow::Result<GaussianSet> {
        let problem = FitProblem::new(&self.sample, &self.record.config)?;
        Ok(problem.reconstruct(&self.grid, &self.sample.face_box)?.gaussians)
    }

    fn config(&self) -> &FitConfig {
        &self.record.config
    }
}

fn beside(grid: &Path, name: &str) -> PathBuf {
    grid.parent().unwrap_or(Path::new(".")).join(name)
}

fn write_pngs(dir: &Path, images: &[(String, Image)]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    images.par_iter().try_for_each(|(name, img)| -> anyhow::Result<()> {
        img.write_png(dir.join(format!("{name}.png")))?;
        Ok(())
    })?;
    for (name, _) in images {
        println!("{}", dir.join(format!("{name}.png")).display());
    }
    Ok(())
}

fn sweep_name(prefix: &str, angle: f64) -> String {
    format!("{prefix}{}", angle.round() as i64)
}

fn render_cmd(a: RenderArgs) -> anyhow::Result<ExitCode> {
    let fitted = Fitted::load(&a.grid)?;
    let gs = fitted.gaussians()?;
    let bg = fitted.sample.background();
    let cams: Vec<(String, splatterlab::Camera)> = if a.sweep {
        sweep_cameras(&fitted.sample)?
            .into_iter()
            .map(|(angle, cam)| (sweep_name("sweep_", angle), cam))
            .collect()
    } else {
        std::iter::once(("input".to_string(), fitted.sample.input.camera.clone()))
            .chain(fitted.sample.views.iter().enumerate().map(|(k, v)| (format!("view_{}", k + 1), v.camera.clone())))
            .collect()
    };
    let images = cams
        .par_iter()
        .map(|(name, cam)| {
            let out = render(&gs, cam)?;
            Ok((name.clone(), composite(&out.color, &out.alpha, &bg)?))
        })
        .collect::<splatterlab::Result<Vec<_>>>()?;
    write_pngs(&a.out.unwrap_or_else(|| beside(&a.grid, "renders")), &images)?;
    Ok(ExitCode::SUCCESS)
}

fn geo(a: GeoArgs) -> anyhow::Result<ExitCode> {
    let fitted = Fitted::load(&a.grid)?;
    let gs = fitted.gaussians()?;
    let mut cams = vec![("geo_input".to_string(), fitted.sample.input.camera.clone())];
    cams.extend(sweep_cameras(&fitted.sample)?.into_iter().map(|(angle, cam)| (sweep_name("geo_", angle), cam)));
    let images = cams
        .par_iter()
        .map(|(name, cam)| Ok((name.clone(), geometry_render(&gs, cam)?)))
        .collect::<splatterlab::Result<Vec<_>>>()?;
    write_pngs(&a.out.unwrap_or_else(|| beside(&a.grid, "geometry")), &images)?;
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let fitted = Fitted::load(&a.grid)?;
    let (mut report, renders) = metrics_report(&fitted.sample, fitted.config(), &fitted.grid, a.jitter_frames)?;
    let out = a.out.unwrap_or_else(|| beside(&a.grid, "metrics.json"));
    let render_dir = out.parent().unwrap_or(Path::new(".")).join("eval");
    let images: Vec<(String, Image)> = report
        .views
        .iter()
        .zip(renders.renders)
        .map(|(v, img)| (v.view.clone(), img))
        .collect();
    std::fs::create_dir_all(&render_dir).with_context(|| format!("creating {}", render_dir.display()))?;
    for (name, img) in &images {
        img.write_png(render_dir.join(format!("{name}.png")))?;
        report.renders.push(format!("eval/{name}.png"));
    }
    write_json(&out, &report)?;
    for v in &report.views {
        println!(
            "{:<8} psnr {:6.2} dB  ssim {:.4}{}",
            v.view,
            v.psnr,
            v.ssim,
            if v.held_out { "  (held out)" } else { "" }
        );
    }
    if let Some(h) = report.held_out_mean_psnr {
        println!("held-out mean psnr {h:.2} dB");
    }
    if let Some(j) = report.jitter {
        println!("jitter {j:.6}");
    }
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    if a.cases == 0 || !(a.tol > 0.0) || !(a.abs_tol >= 0.0) {
        bail!(usage("--cases must be positive and tolerances non-negative"));
    }
    let ops: Vec<&str> = if a.ops.is_empty() {
        OPERATIONS.to_vec()
    } else {
        for op in &a.ops {
            if !OPERATIONS.contains(&op.as_str()) {
                return Err(usage(format!("unknown operation {op:?}; known: {}", OPERATIONS.join(", "))));
            }
        }
        a.ops.iter().map(String::as_str).collect()
    };
    let cfg = SuiteConfig {
        cases: a.cases,
        rel_tol: a.tol,
        abs_tol: a.abs_tol,
        seed: a.seed,
        ..SuiteConfig::default()
    };
    let mut all_ok = true;
    for op in ops {
        let start = std::time::Instant::now();
        let r = run_operation(op, &cfg)?;
        let ok = r.ok(a.cases);
        all_ok &= ok;
        println!(
            "{} {:<20} {:>4}/{:<4} cases  {:>4} coords  max rel err {:.2e}  {:.1}s",
            if ok { "PASS" } else { "FAIL" },
            r.op,
            r.passed,
            a.cases,
            r.coordinates,
            r.max_rel_error,
            start.elapsed().as_secs_f64()
        );
        for f in &r.failures {
            println!("    {f}");
        }
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
