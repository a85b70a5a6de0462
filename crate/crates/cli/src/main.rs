//! `rayformer`: simulate a coded snapshot, reconstruct it, render, evaluate and verify gradients.
//!
//! Output directory layout:
//!
//! ```text
//! config.json            fully resolved configuration
//! masks.rayf             coded masks (N, H, W)
//! measurement.rayf       snapshot (H, W, 3)
//! gt.rayf, gt/frame_###.ppm       ground-truth frames
//! train.log              one line per iteration
//! checkpoint.raya, checkpoints/   final and periodic parameters
//! recon/frame_###.ppm    reconstructed frames
//! metrics.csv            per-frame PSNR/SSIM against ground truth
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayformer_core::config::RunConfig;
use rayformer_core::container::{read_archive, read_ppm, read_tensor, write_ppm, write_tensor};
use rayformer_core::gradcheck;
use rayformer_core::metrics::evaluate_frames;
use rayformer_core::rayformer::RayFormer;
use rayformer_core::sci::{FrameStack, MaskStack, Measurement};
use rayformer_core::training::{render_reconstruction, train, Problem, RunOutput};
use rayformer_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;

#[derive(Parser)]
#[command(
    name = "rayformer",
    version,
    about = "Neural-field reconstruction of coded video snapshots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the ground-truth scene, draw masks and write the coded snapshot.
    Simulate(Common),
    /// Fit the model to a snapshot (simulated on the fly unless --data is given).
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `simulate` to reconstruct from.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render frames from a checkpoint (an untrained model without one).
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated zero-based frame indices; all frames by default.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
    },
    /// Compare two directories of `frame_###.ppm` files.
    Eval {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write metrics.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Square window side for patch-level sampling.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long = "lambda-tv")]
    lambda_tv: Option<f64>,
    /// Disable inter-ray attention.
    #[arg(long)]
    no_inter: bool,
    /// Disable intra-ray attention.
    #[arg(long)]
    no_intra: bool,
    /// Sample scattered pixels instead of contiguous windows.
    #[arg(long)]
    no_patch: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(iters) = self.iters {
            config.train.iterations = iters;
        }
        if let Some(w) = self.patch {
            config.train.window = [w, w];
        }
        if let Some(lambda) = self.lambda_tv {
            config.loss.lambda_tv = lambda;
        }
        if self.no_inter {
            config.model.network.inter = false;
        }
        if self.no_intra {
            config.model.network.intra = false;
        }
        if self.no_patch {
            config.train.patch_sampling = false;
        }
        config.validate()?;
        Ok(config)
    }
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFICATION)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_CONFIG
            })
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("RAYF_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "RAYF_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(common) => {
            let config = common.resolve()?;
            prepare_out(&common.out, &config)?;
            let problem = config.simulate()?;
            write_dataset(&common.out, &problem)?;
            println!(
                "wrote {} frames of {}x{} to {}",
                problem.n_frames(),
                problem.intrinsics.height,
                problem.intrinsics.width,
                common.out.display()
            );
            Ok(())
        }
        Command::Train { common, data } => {
            let config = common.resolve()?;
            prepare_out(&common.out, &config)?;
            let problem = match &data {
                Some(dir) => load_dataset(dir, &config)?,
                None => {
                    let problem = config.simulate()?;
                    write_dataset(&common.out, &problem)?;
                    problem
                }
            };
            let out = RunOutput {
                dir: common.out.clone(),
            };
            let report = train(
                &config.model,
                &config.bounds,
                &config.train,
                &config.loss,
                &problem,
                config.seed,
                Some(&out),
            )?;
            write_frames(&common.out.join("recon"), &report.reconstruction, None)?;
            println!("measurement PSNR {:.2} dB", report.measurement_psnr);
            if let Some(gt) = &problem.ground_truth {
                let metrics = evaluate_frames(&report.reconstruction, gt)?;
                fs::write(common.out.join("metrics.csv"), metrics.to_csv())?;
                print!("{}", metrics.to_table());
            }
            Ok(())
        }
        Command::Render {
            common,
            checkpoint,
            frames,
        } => {
            let config = match (&common.config, &checkpoint) {
                (None, Some(ckpt)) => {
                    let echoed = ckpt.parent().map(|d| d.join("config.json"));
                    match echoed.filter(|p| p.exists()) {
                        Some(path) => Common {
                            config: Some(path),
                            ..common.clone()
                        }
                        .resolve()?,
                        None => common.resolve()?,
                    }
                }
                _ => common.resolve()?,
            };
            let mut model = RayFormer::new(config.model, config.bounds, config.seed)?;
            if let Some(path) = &checkpoint {
                model.params.load_archive(&read_archive(path)?)?;
            }
            let sim = &config.simulation;
            let recon = render_reconstruction(
                &model,
                &sim.intrinsics()?,
                sim.n_frames,
                sim.near_far(),
                config.train.l_samples,
                config.train.window,
            )?;
            if let Some(&bad) = frames.iter().find(|&&i| i >= sim.n_frames) {
                return Err(Error::Index(format!(
                    "frame {bad} requested, model has {}",
                    sim.n_frames
                ))
                .into());
            }
            let selection = (!frames.is_empty()).then_some(frames.as_slice());
            let dir = common.out.join("recon");
            write_frames(&dir, &recon, selection)?;
            println!("rendered to {}", dir.display());
            Ok(())
        }
        Command::Eval { frames, gt, out } => {
            let recon = read_frame_dir(&frames)?;
            let truth = read_frame_dir(&gt)?;
            let report = evaluate_frames(&recon, &truth)?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("metrics.csv"), report.to_csv())?;
            }
            Ok(())
        }
        Command::Gradcheck(common) => {
            let config = common.resolve()?;
            let report = gradcheck::run_all(&config.model, config.seed)?;
            print!("{}", report.to_table());
            if report.all_pass() {
                Ok(())
            } else {
                let failed = report.rows.iter().filter(|r| !r.pass).count();
                Err(Failure::Verification(format!(
                    "{failed} gradient check(s) failed"
                )))
            }
        }
    }
}

fn prepare_out(dir: &Path, config: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.to_json())?;
    Ok(())
}

fn write_dataset(dir: &Path, problem: &Problem) -> Result<(), Failure> {
    write_tensor(&dir.join("masks.rayf"), &problem.masks.to_tensor())?;
    write_tensor(
        &dir.join("measurement.rayf"),
        &problem.measurement.to_tensor(),
    )?;
    if let Some(gt) = &problem.ground_truth {
        write_tensor(&dir.join("gt.rayf"), &gt.to_tensor())?;
        write_frames(&dir.join("gt"), gt, None)?;
    }
    Ok(())
}

fn load_dataset(dir: &Path, config: &RunConfig) -> Result<Problem, Failure> {
    let masks = MaskStack::from_tensor(read_tensor(&dir.join("masks.rayf"))?)?;
    let measurement = Measurement::from_tensor(
        read_tensor(&dir.join("measurement.rayf"))?,
        config.simulation.noise_sigma,
    )?;
    let gt_path = dir.join("gt.rayf");
    let ground_truth = if gt_path.exists() {
        Some(FrameStack::from_tensor(read_tensor(&gt_path)?)?)
    } else {
        None
    };
    let problem = Problem {
        measurement,
        masks,
        intrinsics: config.simulation.intrinsics()?,
        near_far: config.simulation.near_far(),
        ground_truth,
    };
    problem.validate()?;
    Ok(problem)
}

fn write_frames(
    dir: &Path,
    frames: &FrameStack,
    selection: Option<&[usize]>,
) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    let all: Vec<usize> = (0..frames.n_frames).collect();
    for &i in selection.unwrap_or(&all) {
        write_ppm(
            &dir.join(format!("frame_{i:03}.ppm")),
            frames.height,
            frames.width,
            frames.frame(i),
        )?;
    }
    Ok(())
}

fn read_frame_dir(dir: &Path) -> Result<FrameStack, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".ppm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no frame_###.ppm files in {}", dir.display())).into());
    }
    let mut values = Vec::new();
    let mut size = None;
    for path in &paths {
        let (h, w, rgb) = read_ppm(path)?;
        if size.is_some_and(|s| s != (h, w)) {
            return Err(Error::Dimension(format!(
                "{} differs in size from earlier frames",
                path.display()
            ))
            .into());
        }
        size = Some((h, w));
        values.extend(rgb);
    }
    let (h, w) = size.unwrap_or((0, 0));
    Ok(FrameStack::new(paths.len(), h, w, 3, values)?)
}
