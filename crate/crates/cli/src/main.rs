use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use se3track::io::{self, Config, DatasetMeta, DATASET_VERSION};
use se3track::metrics::{evaluate_sequence, ModelPoints, ADDS_BRUTE_FORCE_LIMIT};
use se3track::nn::{self, NetEstimator, Network, Sample};
use se3track::render::render_rgbd;
use se3track::synth::{generate_pair, generate_sequence};
use se3track::tracker::{IcpEstimator, ResidualEstimator, Tracker};

#[derive(Parser)]
#[command(name = "se3track", version, about = "Model-based 6D object pose tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training set of rendered image pairs with ground-truth twists.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the residual network on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Track an object through an RGB-D sequence directory.
    Track {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        init_pose: PathBuf,
        #[arg(long, value_enum)]
        estimator: EstimatorKind,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted poses against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Use ADD-S as the headline metric.
        #[arg(long)]
        symmetric: bool,
        #[arg(long, default_value_t = se3track::metrics::DEFAULT_DMAX)]
        dmax: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render RGB-D images of a mesh at a pose.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Writes `<out>_rgb.png` and `<out>_depth.png`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic tracking sequence with ground truth.
    GenSeq {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `sequence.frames`.
        #[arg(long)]
        frames: Option<usize>,
        /// Overrides `sequence.depth_noise_sigma`, meters.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the annotated default configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorKind {
    Icp,
    Net,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, count: usize, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let mesh = cfg.load_mesh()?;
    let k = cfg.camera()?;
    let synth = cfg.synth_config();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut clamped = 0;
    for i in 0..count {
        let g = generate_pair(&mesh, &k, &synth, seed, i as u64).with_context(|| format!("pair {i}"))?;
        clamped += io::write_pair(out, i, &g.pair, cfg.depth_scale)?;
    }
    if clamped > 0 {
        eprintln!("warning: {clamped} depth pixels exceeded the 16-bit range and were clamped");
    }
    let meta = DatasetMeta { version: DATASET_VERSION, count, seed, crop_size: synth.crop_size, depth_scale: cfg.depth_scale };
    io::write_dataset_meta(out, &meta)?;
    eprintln!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, epochs: Option<usize>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut tc = cfg.train.clone();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let (_, pairs) = io::read_dataset(data)?;
    let samples: Vec<Sample<f32>> = pairs
        .iter()
        .map(|p| Sample::new(nn::prepare_input(&p.img_prev, &p.img_cur, &cfg.network), &p.gt_twist))
        .collect();
    let mut net = Network::<f32>::init(&cfg.network, tc.seed)?;
    let every = (tc.epochs / 10).max(1);
    let report = nn::train_with_progress(&mut net, &samples, &tc, |e, l| {
        if e % every == 0 || e + 1 == tc.epochs {
            eprintln!("epoch {e:4} loss {l:.6e}");
        }
    })?;
    net.save(out)?;
    let mut history = out.as_os_str().to_owned();
    history.push(".history.json");
    io::save_json(Path::new(&history), &report)?;
    eprintln!("saved {} weights to {}", net.param_count(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn track(
    seq: &Path,
    mesh: &Path,
    init_pose: &Path,
    kind: EstimatorKind,
    weights: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let mesh = io::load_mesh(mesh)?;
    let sequence = io::read_sequence(seq, cfg.depth_scale)?;
    let init = io::load_pose(init_pose)?;
    let tracker = Tracker::new(&mesh, sequence.intrinsics, cfg.crop_size)?;
    let (name, estimator): (&str, Box<dyn ResidualEstimator>) = match kind {
        EstimatorKind::Icp => ("icp", Box::new(IcpEstimator::new(&mesh, cfg.tracker)?)),
        EstimatorKind::Net => {
            let Some(w) = weights else {
                bail!("--estimator net requires --weights");
            };
            ("net", Box::new(NetEstimator { net: Network::load(w, &cfg.network)? }))
        }
    };
    let traj = tracker.track_sequence(init, &sequence.frames, estimator.as_ref());
    io::write_trajectory(out, name, &traj)?;
    let lost = traj.lost_flags().iter().filter(|l| **l).count();
    eprintln!("tracked {} frames ({lost} lost) into {}", traj.poses.len(), out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, mesh: &Path, symmetric: bool, dmax: f64, out: &Path) -> Result<()> {
    let mesh = io::load_mesh(mesh)?;
    let model = ModelPoints::subsampled(&mesh.vertices, ADDS_BRUTE_FORCE_LIMIT)?;
    let (poses, lost) = io::read_predictions(pred)?;
    let gt_poses = io::read_ground_truth(gt)?;
    let report = evaluate_sequence(&poses, &gt_poses, &model, symmetric, dmax, Some(&lost))?;
    io::write_report(out, &report)?;
    println!("{} AUC {:.6} over {} frames ({} lost)", report.headline_metric, report.headline_auc, report.frames, report.lost_frames);
    Ok(())
}

fn render(mesh: &Path, pose: &Path, intrinsics: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let mesh = io::load_mesh(mesh)?;
    let pose = io::load_pose(pose)?;
    let k = io::load_intrinsics(intrinsics)?;
    let img = render_rgbd(&mesh, &pose, &k);
    let clamped = io::save_rgbd(out, &img, cfg.depth_scale)?;
    if clamped > 0 {
        eprintln!("warning: {clamped} depth pixels exceeded the 16-bit range and were clamped");
    }
    Ok(())
}

fn gen_seq(config: Option<&Path>, out: &Path, frames: Option<usize>, noise: Option<f64>, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let mut sc = cfg.sequence;
    sc.frames = frames.unwrap_or(sc.frames);
    sc.depth_noise_sigma = noise.unwrap_or(sc.depth_noise_sigma);
    if sc.frames == 0 || !(sc.depth_noise_sigma >= 0.0) {
        bail!("--frames must be positive and --noise non-negative");
    }
    let mesh = cfg.load_mesh()?;
    let k = cfg.camera()?;
    let seq = generate_sequence(&mesh, &k, &sc, seed)?;
    io::write_sequence(out, &seq.frames, Some(&seq.poses), &k, cfg.depth_scale)?;
    io::save_obj(&out.join("model.obj"), &mesh)?;
    eprintln!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, count, seed } => gen_data(config.as_deref(), &out, count, seed),
        Command::Train { data, config, out, epochs } => train(&data, config.as_deref(), &out, epochs),
        Command::Track { seq, mesh, init_pose, estimator, weights, config, out } => {
            track(&seq, &mesh, &init_pose, estimator, weights.as_deref(), config.as_deref(), &out)
        }
        Command::Eval { pred, gt, mesh, symmetric, dmax, out } => eval(&pred, &gt, &mesh, symmetric, dmax, &out),
        Command::Render { mesh, pose, intrinsics, out, config } => render(&mesh, &pose, &intrinsics, &out, config.as_deref()),
        Command::GenSeq { config, out, frames, noise, seed } => gen_seq(config.as_deref(), &out, frames, noise, seed),
        Command::InitConfig { out } => Ok(io::write_atomic(&out, Config::example().as_bytes())?),
    }
}

/// Prints the flags accepted by the subcommand named on the command line.
fn list_flags() {
    let cmd = Cli::command();
    let Some(sub) = std::env::args().nth(1).and_then(|name| cmd.find_subcommand(&name).cloned()) else {
        return;
    };
    let flags: Vec<String> = sub.get_arguments().filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
    eprintln!("valid flags for {}: {} --help", sub.get_name(), flags.join(" "));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if e.kind() == ErrorKind::UnknownArgument {
                list_flags();
            }
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
