use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use unigs::bench::{bench_csv, bench_views, constant_columns, DEFAULT_VIEW_COUNTS};
use unigs::checks::{all_passed, format_report, run_checks};
use unigs::decoder::{DecoderConfig, UniGs};
use unigs::loss::LossConfig;
use unigs::ply::{read_ply, write_ply, write_ply_raw};
use unigs::renderer::render;
use unigs::scene::{load_scene, save_scene, synth_scene, Scene, Split, SynthKind};
use unigs::tensor::fault::Fault;
use unigs::train::{evaluate, fit_scene, mean_psnr, mean_ssim, metrics_csv, FitConfig, TrainConfig, Trainer, BACKGROUND};

#[derive(Parser)]
#[command(name = "unigs", version, about = "Feed-forward 3D Gaussian reconstruction from posed views")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural scene directory.
    Synth(SynthArgs),
    /// Optimize Gaussians directly against one scene.
    Fit(FitArgs),
    /// Train the network end to end on a few small scenes.
    TrainTiny(TrainArgs),
    /// Render the views of a scene from a PLY or a trained checkpoint.
    Render(RenderArgs),
    /// Run the invariant suite.
    Check(CheckArgs),
    /// Forward cost and buffer sizes for 1 to 8 input views.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Spheres3,
    Cube,
    RandomGaussians,
}

impl From<Kind> for SynthKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Spheres3 => SynthKind::Spheres3,
            Kind::Cube => SynthKind::Cube,
            Kind::RandomGaussians => SynthKind::RandomGaussians,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "spheres3")]
    kind: Kind,
    #[arg(long)]
    out: PathBuf,
    /// Input views.
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 4)]
    heldout: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_gaussians: usize,
    #[arg(long, default_value_t = 1500)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use only the first this many input views.
    #[arg(long)]
    views: Option<usize>,
    /// JSON file overriding decoder settings; the sampling box is used here.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directories. Without any, synthetic scenes are generated.
    #[arg(long)]
    scene: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of synthetic scenes when no --scene is given.
    #[arg(long, default_value_t = 4)]
    synth: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long)]
    n_gaussians: Option<usize>,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; --iters is the new total step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Log every this many epochs.
    #[arg(long, default_value_t = 25)]
    log_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "checkpoint")]
    ply: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input views fed to the network.
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    /// Only run checks whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
    /// Run with a deliberate kernel fault to confirm the suite catches it.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SoftmaxAxis,
}

#[derive(Args)]
struct BenchArgs {
    /// Scene with at least 8 input views. Without it a synthetic one is made.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_gaussians: Option<usize>,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn decoder_config(path: Option<&Path>) -> Result<DecoderConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg: DecoderConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => Ok(DecoderConfig::default()),
    }
}

fn write_renders(set: &unigs::gaussian::GaussianSet, scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for v in &scene.views {
        let tag = match v.split {
            Split::Input => "input",
            Split::Heldout => "heldout",
        };
        let stem = Path::new(&v.name).file_stem().and_then(|s| s.to_str()).unwrap_or("view");
        render(set, &v.camera, BACKGROUND).0.save_png(&dir.join(format!("{tag}_{stem}.png")))?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.resolution % 4 != 0 || a.resolution == 0 {
        bail!("--resolution must be a positive multiple of 4");
    }
    let (scene, gt) = synth_scene(a.kind.into(), a.views, a.heldout, a.resolution, a.resolution, a.seed)?;
    save_scene(&scene, &a.out)?;
    write_ply(&a.out.join("ground_truth.ply"), &gt)?;
    eprintln!("wrote {} views and {} ground-truth Gaussians to {}", scene.views.len(), gt.len(), a.out.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let dec = decoder_config(a.config.as_deref())?;
    let cfg = FitConfig {
        n_gaussians: a.n_gaussians,
        iters: a.iters,
        lr: a.lr,
        seed: a.seed,
        views: a.views,
        cov_center: dec.cov_center,
        cov_half_extent: dec.cov_half_extent,
        ..FitConfig::default()
    };
    let r = fit_scene(&scene, &cfg, &LossConfig::default(), |step, loss| eprintln!("step {step:5}  loss {loss:.6}"))?;
    fs::create_dir_all(&a.out)?;
    write_ply_raw(&a.out.join("gaussians.ply"), &r.raw)?;
    let mut rows = r.train.clone();
    rows.extend(r.heldout.iter().cloned());
    fs::write(a.out.join("metrics.csv"), metrics_csv(&a.scene.display().to_string(), &rows))?;
    let mut loss = String::from("step,loss\n");
    for (i, l) in r.losses.iter().enumerate() {
        loss.push_str(&format!("{i},{l:.8e}\n"));
    }
    fs::write(a.out.join("loss.csv"), loss)?;
    write_renders(&r.gaussians, &scene, &a.out.join("renders"))?;
    println!(
        "train PSNR {:.2} dB, held-out PSNR {:.2} dB, held-out SSIM {:.4}",
        mean_psnr(&r.train),
        mean_psnr(&r.heldout),
        mean_ssim(&r.heldout)
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let scenes: Vec<Scene> = if a.scene.is_empty() {
        (0..a.synth as u64)
            .map(|s| Ok(synth_scene(SynthKind::Spheres3, a.views, 2, a.resolution, a.resolution, a.seed + s)?.0.normalized()?))
            .collect::<Result<_>>()?
    } else {
        a.scene.iter().map(|p| Ok(load_scene(p)?)).collect::<Result<_>>()?
    };
    if scenes.is_empty() {
        bail!("no scenes to train on");
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::load(p)?;
            t.cfg.iters = a.iters;
            t
        }
        None => {
            let mut dec = decoder_config(a.config.as_deref())?;
            if let Some(n) = a.n_gaussians {
                dec.n_gaussians = n;
            }
            Trainer::new(TrainConfig {
                decoder: dec,
                iters: a.iters,
                lr: a.lr,
                seed: a.seed,
                views: a.views,
                log_every: a.log_every,
            })?
        }
    };
    let loss_cfg = LossConfig::default();
    let start = trainer.train_psnr(&scenes)?;
    eprintln!("step {:5}  train PSNR {start:.2} dB", trainer.step);
    let logs = trainer.run(&scenes, &loss_cfg, |e| {
        eprintln!("epoch {:4}  step {:5}  loss {:.6}  train PSNR {:.2} dB", e.epoch, e.step, e.loss, e.train_psnr)
    })?;
    let end = trainer.train_psnr(&scenes)?;
    let heldout = trainer.heldout_psnr(&scenes)?;
    fs::create_dir_all(&a.out)?;
    trainer.save(&a.out.join("model.ckpt"))?;
    let mut log = String::from("epoch,step,loss,train_psnr\n");
    for e in &logs {
        log.push_str(&format!("{},{},{:.8e},{:.4}\n", e.epoch, e.step, e.loss, e.train_psnr));
    }
    fs::write(a.out.join("train_log.csv"), log)?;
    let mut rows = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let (set, _) = trainer.model.reconstruct(&s.input_batch(Some(trainer.cfg.views))?)?;
        let mut m = evaluate(&set, s, Split::Input)?;
        m.extend(evaluate(&set, s, Split::Heldout)?);
        rows.push(metrics_csv(&format!("scene{i}"), &m));
    }
    let header_len = "scene,view,split,psnr,ssim,mse\n".len();
    let mut csv = rows[0].clone();
    for r in &rows[1..] {
        csv.push_str(&r[header_len..]);
    }
    fs::write(a.out.join("metrics.csv"), csv)?;
    println!("train PSNR {start:.2} -> {end:.2} dB (+{:.2}), held-out PSNR {heldout:.2} dB", end - start);
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let set = match (&a.ply, &a.checkpoint) {
        (Some(p), _) => read_ply(p)?,
        (None, Some(c)) => {
            let model = unigs::train::load_model(c)?;
            model.reconstruct(&scene.input_batch(a.views)?)?.0
        }
        (None, None) => bail!("pass --ply or --checkpoint"),
    };
    write_renders(&set, &scene, &a.out)?;
    let mut m = evaluate(&set, &scene, Split::Input)?;
    m.extend(evaluate(&set, &scene, Split::Heldout)?);
    fs::write(a.out.join("metrics.csv"), metrics_csv(&a.scene.display().to_string(), &m))?;
    println!("rendered {} views, mean PSNR {:.2} dB", m.len(), mean_psnr(&m));
    Ok(())
}

fn check(a: CheckArgs) -> Result<ExitCode> {
    let fault = a.inject_fault.map(|FaultArg::SoftmaxAxis| Fault::SoftmaxAxis);
    let results = run_checks(a.filter.as_deref(), fault);
    print!("{}", format_report(&results));
    Ok(if all_passed(&results) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let max = *DEFAULT_VIEW_COUNTS.iter().max().unwrap();
    let scene = match &a.scene {
        Some(p) => load_scene(p)?,
        None => synth_scene(SynthKind::Spheres3, max, 0, a.resolution, a.resolution, a.seed)?.0.normalized()?,
    };
    let model = match &a.checkpoint {
        Some(c) => unigs::train::load_model(c)?,
        None => {
            let mut cfg = decoder_config(a.config.as_deref())?;
            if let Some(n) = a.n_gaussians {
                cfg.n_gaussians = n;
            }
            UniGs::new(cfg, a.seed)?
        }
    };
    let rows = bench_views(&model, &scene, &DEFAULT_VIEW_COUNTS, a.repeats)?;
    let csv = bench_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    match constant_columns(&rows, model.cfg.n_gaussians) {
        Ok(()) => Ok(ExitCode::SUCCESS),
        Err(e) => {
            eprintln!("view-count invariant violated: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Synth(a) => synth(a).map(|_| ExitCode::SUCCESS),
        Cmd::Fit(a) => fit(a).map(|_| ExitCode::SUCCESS),
        Cmd::TrainTiny(a) => train(a).map(|_| ExitCode::SUCCESS),
        Cmd::Render(a) => render_cmd(a).map(|_| ExitCode::SUCCESS),
        Cmd::Check(a) => check(a),
        Cmd::Bench(a) => bench(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
