use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgnn::eval::{completion_recall, l1_metrics, MetricsReport};
use sgnn::fusion::{fuse, FusionConfig};
use sgnn::grid::{CropSpec, VoxelCoord, DEFAULT_TRUNCATION, DEFAULT_VOXEL_SIZE};
use sgnn::io::{read_checkpoint, read_tsdf, write_tsdf};
use sgnn::mesh::{marching_cubes, write_ply};
use sgnn::model::SgnnModel;
use sgnn::pipeline::{generate_dataset, load_frames, load_pairs, load_scene, write_pairs, GenDataConfig, PairConfig};
use sgnn::synthcam::CameraIntrinsics;
use sgnn::trainer::{TrainConfig, Trainer};
use sgnn::{Error, Result};

/// Self-supervised sparse generative scan completion.
#[derive(Parser)]
#[command(name = "sgnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic rooms and render depth frames of each.
    GenData(GenDataArgs),
    /// Fuse a directory of depth frames into a sparse TSDF.
    Fuse(FuseArgs),
    /// Build input/target training pairs from generated scenes.
    Pairs(PairsArgs),
    /// Train a completion model on a directory of pairs.
    Train(TrainArgs),
    /// Complete a scan with a trained checkpoint.
    Complete(CompleteArgs),
    /// Extract a triangle mesh from a TSDF as ASCII PLY.
    Mesh(MeshArgs),
    /// Compare a predicted TSDF against a target.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of rooms.
    #[arg(long, default_value_t = 2)]
    scenes: usize,
    /// Depth frames per room.
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Seed for scene layout and camera paths.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image width in pixels.
    #[arg(long, default_value_t = 160)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 120)]
    height: usize,
    /// Horizontal field of view in degrees.
    #[arg(long, default_value_t = 60.0)]
    hfov: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FusionArgs {
    /// Voxel edge length in meters.
    #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
    voxel_size: f32,
    /// Truncation in voxel units.
    #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
    truncation: f32,
    /// Depth readings beyond this many meters are ignored.
    #[arg(long, default_value_t = 10.0)]
    max_depth: f32,
}

impl FusionArgs {
    fn config(&self) -> FusionConfig {
        FusionConfig {
            voxel_size: self.voxel_size,
            truncation: self.truncation,
            max_depth: self.max_depth,
        }
    }
}

#[derive(Args)]
struct FuseArgs {
    /// Directory of `.depth` frames.
    #[arg(long)]
    frames: PathBuf,
    #[command(flatten)]
    fusion: FusionArgs,
    /// Output `.tsdf` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PairsArgs {
    /// Dataset written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Fraction of frames fused into the input.
    #[arg(long, default_value_t = 0.5)]
    input_fraction: f64,
    /// Fraction of frames fused into the target.
    #[arg(long, default_value_t = 1.0)]
    target_fraction: f64,
    /// Cut random boxes out of the target instead of dropping frames.
    #[arg(long)]
    crops_baseline: bool,
    /// Seed for frame subsets and removed boxes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    fusion: FusionArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `pairs`.
    #[arg(long)]
    pairs: PathBuf,
    /// key=value training config; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for `losses.csv` and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompleteArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input `.tsdf` scan.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output `.tsdf` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MeshArgs {
    /// Input `.tsdf` file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output `.ply` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted `.tsdf`.
    #[arg(long)]
    pred: PathBuf,
    /// Target `.tsdf`.
    #[arg(long)]
    target: PathBuf,
    /// Input scan; defines the unobserved region and enables recall.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Evaluation box `x,y,z,dx,dy,dz` in voxels; defaults to the target bounds.
    #[arg(long = "box")]
    bbox: Option<String>,
    /// Scene file for completion recall (needs --input).
    #[arg(long)]
    scene: Option<PathBuf>,
}

fn parse_box(s: &str) -> Result<CropSpec> {
    let v: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("box must be six integers, got {s:?}")))?;
    match v.as_slice() {
        &[x, y, z, dx, dy, dz] if dx > 0 && dy > 0 && dz > 0 => Ok(CropSpec::new(
            VoxelCoord::new(x as i32, y as i32, z as i32),
            [dx as usize, dy as usize, dz as usize],
        )),
        _ => Err(Error::Argument(format!("box must be x,y,z,dx,dy,dz with positive extents, got {s:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let intrinsics = CameraIntrinsics::with_fov(a.width, a.height, a.hfov);
            let cfg = GenDataConfig {
                scenes: a.scenes,
                frames: a.frames,
                seed: a.seed,
                intrinsics,
            };
            generate_dataset(&a.out, &cfg)
        }
        Command::Fuse(a) => {
            let cfg = a.fusion.config();
            cfg.validate()?;
            let s = fuse(&load_frames(&a.frames)?, &cfg)?;
            write_tsdf(&a.out, &s)
        }
        Command::Pairs(a) => {
            let cfg = PairConfig {
                input_fraction: a.input_fraction,
                target_fraction: a.target_fraction,
                fusion: a.fusion.config(),
                seed: a.seed,
                crops_baseline: a.crops_baseline,
            };
            write_pairs(&a.data, &a.out, &cfg).map(|_| ())
        }
        Command::Train(a) => train(&a),
        Command::Complete(a) => {
            let mut model = read_checkpoint(&a.checkpoint)?.into_model()?;
            let out = model.complete(&read_tsdf(&a.input)?)?;
            write_tsdf(&a.out, &out)
        }
        Command::Mesh(a) => write_ply(&a.out, &marching_cubes(&read_tsdf(&a.input)?)),
        Command::Eval(a) => eval(&a),
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::from_text(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let pairs = load_pairs(&a.pairs)?;
    let (model, iteration) = match &a.resume {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            let it = ck.iteration;
            (ck.into_model()?, it)
        }
        None => (SgnnModel::new(cfg.model.clone(), cfg.seed)?, 0),
    };
    let mut trainer = Trainer::resume(model, &pairs, cfg, iteration)?;
    trainer.run(Some(&a.out))?;
    if let Some(last) = trainer.log.last() {
        log::info!("finished at iteration {} with loss {}", trainer.iteration, last.total);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let pred = read_tsdf(&a.pred)?;
    let target = read_tsdf(&a.target)?;
    let input = a.input.as_deref().map(read_tsdf).transpose()?;
    let bbox = match &a.bbox {
        Some(s) => parse_box(s)?,
        None => target
            .bounding_crop()
            .ok_or_else(|| Error::Argument("target is empty; pass --box".into()))?,
    };
    let report = l1_metrics(&pred, &target, &bbox, input.as_ref())?;
    let recall = match (&a.scene, &input) {
        (Some(scene), Some(input)) => Some(completion_recall(&pred, &load_scene(scene)?, input)),
        (Some(_), None) => return Err(Error::Argument("--scene needs --input".into())),
        _ => None,
    };
    print_report(&report, recall);
    Ok(())
}

fn print_report(r: &MetricsReport, recall: Option<f64>) {
    match recall {
        Some(v) => {
            println!("{},completion_recall", MetricsReport::CSV_HEADER);
            println!("{},{v}", r.csv_row());
        }
        None => {
            println!("{}", MetricsReport::CSV_HEADER);
            println!("{}", r.csv_row());
        }
    }
    eprint!("{r}");
    if let Some(v) = recall {
        eprintln!("completion recall {v:.4}");
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Usage(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
