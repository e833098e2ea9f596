//! Command-line front end: scene generation, training, inference, evaluation,
//! gradient checks and parameter accounting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hnet::attention::AttentionMode;
use hnet::error::{Error, Result};
use hnet::model::{self, DepthTransform, ModelConfig, ParamBreakdown};
use hnet::scene::{self, SceneConfig};
use hnet::suite::{self, SuiteOptions};
use hnet::train::{self, TrainConfig};
use hnet::{checkpoint, io, metrics, Tensor};

#[derive(Parser)]
#[command(name = "hnet", version, about = "Self-supervised stereo depth with epipolar attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stereo pair with ground truth.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "two-plane")]
        preset: String,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on generated scenes; writes model.ckpt, loss.csv and train.toml.
    Train {
        /// Training config (TOML); the toy setup when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        mode: Option<AttentionMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict depth for a scene directory written by `gen`.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// `infer` plus depth metrics against the scene's ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = metrics::DEFAULT_CAP)]
        cap: f64,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Parameter breakdown of a model config.
    Params {
        #[arg(long, default_value = "ot-mea")]
        mode: AttentionMode,
        /// Model config (TOML); the toy model when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Contents of `scene.toml` in a scene directory.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    seed: u64,
    preset: String,
    scene: SceneConfig,
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn gen(seed: u64, preset: &str, height: usize, width: usize, out: &Path) -> Result<()> {
    let cfg = SceneConfig::preset(preset, height, width)?;
    let sample = scene::generate_scene(&cfg, seed)?;
    fs::create_dir_all(out)?;
    let cmd = command_line();
    io::write_ppm(&out.join("left.ppm"), &sample.left)?;
    io::write_ppm(&out.join("right.ppm"), &sample.right)?;
    io::write_raw_f32(&out.join("gt_disparity.f32"), &sample.gt_disparity, "pixels", &cmd)?;
    io::write_raw_f32(&out.join("gt_depth.f32"), &sample.gt_depth, "depth units", &cmd)?;
    io::write_raw_f32(&out.join("occlusion.f32"), &sample.occlusion, "1 = occluded", &cmd)?;
    let file = SceneFile {
        seed,
        preset: preset.to_string(),
        scene: cfg,
    };
    fs::write(out.join("scene.toml"), toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))?)?;
    println!("wrote {} ({preset}, seed {seed}, visible {:.3})", out.display(), sample.visible_fraction());
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    steps: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    mode: Option<AttentionMode>,
    out: &Path,
) -> Result<bool> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_text(&read_text(p)?)?,
        None => TrainConfig::toy(500, 1e-4, 0),
    };
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = lr {
        cfg.learning_rate = v;
    }
    if let Some(m) = mode {
        cfg.model.attention = m;
    }
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("train.toml"), cfg.to_text()?)?;
    let every = (cfg.steps / 10).max(1);
    let outcome = train::train(&cfg, |row| {
        if row.step % every == 0 {
            eprintln!("step {:>5}  total {:.6}  photometric {:.6}  lr {:e}", row.step, row.total, row.photometric, row.lr);
        }
    })?;
    checkpoint::save(&out.join("model.ckpt"), &outcome.params)?;
    fs::write(out.join("loss.csv"), train::log_csv(&outcome.log))?;
    if let Some(step) = outcome.diverged_at {
        eprintln!("training diverged at step {step}; kept the last finite weights");
        return Ok(false);
    }
    if let Some(r) = &outcome.final_report {
        println!("final total {:.6}  photometric {:.6}  smoothness {:.6}", r.total, r.photometric(), r.smoothness());
    }
    Ok(true)
}

/// Writes depth dumps and visualizations; returns the left depth map.
fn infer(ckpt: &Path, scene_dir: &Path, out: &Path) -> Result<Tensor> {
    let params = checkpoint::load(ckpt)?;
    let file: SceneFile =
        toml::from_str(&read_text(&scene_dir.join("scene.toml"))?).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let left = io::read_ppm(&scene_dir.join("left.ppm"))?;
    let right = io::read_ppm(&scene_dir.join("right.ppm"))?;
    let cfg = &params.config;
    if left.shape() != [3, cfg.height, cfg.width] {
        return Err(Error::InvalidConfig(format!(
            "checkpoint expects {}x{} images, scene is {}x{}",
            cfg.height,
            cfg.width,
            left.shape()[1],
            left.shape()[2]
        )));
    }
    let pred = train::predict(&params, &left, &right, file.scene.camera().fb(), &DepthTransform::default())?;
    fs::create_dir_all(out)?;
    let cmd = command_line();
    io::write_raw_f32(&out.join("depth_left.f32"), &pred.depth_left, "depth units", &cmd)?;
    io::write_raw_f32(&out.join("depth_right.f32"), &pred.depth_right, "depth units", &cmd)?;
    io::write_visualization(&out.join("depth_left.pgm"), &pred.depth_left, "depth units", &cmd)?;
    io::write_visualization(&out.join("depth_right.pgm"), &pred.depth_right, "depth units", &cmd)?;
    Ok(pred.depth_left)
}

fn eval(ckpt: &Path, scene_dir: &Path, out: &Path, cap: f64) -> Result<()> {
    let depth = infer(ckpt, scene_dir, out)?;
    let gt = io::read_raw_f32(&scene_dir.join("gt_depth.f32"))?;
    let report = metrics::compute_metrics(&depth, &gt, cap)?;
    fs::write(out.join("metrics.csv"), format!("{}\n{}\n", metrics::CSV_HEADER, report.csv_row()))?;
    println!("{report}");
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<bool> {
    let opts = SuiteOptions {
        seeds,
        ..Default::default()
    };
    let results = suite::run_suite(&opts)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<34} {:.3e}  {}", r.name, r.worst, if r.passed() { "ok" } else { "FAIL" });
        worst = worst.max(r.worst);
    }
    println!("worst relative error {worst:.3e}");
    Ok(results.iter().all(|r| r.passed()))
}

fn params(mode: AttentionMode, config: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ModelConfig::from_text(&read_text(p)?)?,
        None => ModelConfig::toy(),
    };
    cfg.attention = mode;
    cfg.validate()?;
    let built = model::param_count(&model::build(&cfg, &mut hnet::rng::Rng::new(0))?);
    debug_assert_eq!(built, ParamBreakdown::analytic(&cfg));
    println!("mode      {mode}");
    println!("encoder   {}", built.encoder);
    println!("fusion    {}", built.fusion);
    println!("decoder   {}", built.decoder);
    println!("heads     {}", built.heads);
    println!("attention {}", built.attention);
    println!("backbone  {}", built.backbone());
    println!("total     {}", built.total());
    println!("overhead  {:.2}%", 100.0 * built.attention_overhead());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Gen {
            seed,
            preset,
            height,
            width,
            out,
        } => gen(seed, &preset, height, width, &out).map(|_| true),
        Command::Train {
            config,
            steps,
            seed,
            lr,
            mode,
            out,
        } => train_cmd(config.as_deref(), steps, seed, lr, mode, &out),
        Command::Infer { checkpoint, scene, out } => infer(&checkpoint, &scene, &out).map(|_| true),
        Command::Eval {
            checkpoint,
            scene,
            out,
            cap,
        } => eval(&checkpoint, &scene, &out, cap).map(|_| true),
        Command::Gradcheck { seeds } => gradcheck(seeds),
        Command::Params { mode, config } => params(mode, config.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
