//! Trains a small completion model on two synthetic rooms and prints the
//! per-level loss log.
//!
//! cargo run --release --example train [iterations]

use sgnn::fusion::FusionConfig;
use sgnn::model::{ModelConfig, SgnnModel};
use sgnn::pipeline::{generate_scene, make_pair, GenDataConfig, PairConfig};
use sgnn::synthcam::CameraIntrinsics;
use sgnn::trainer::{IterationLog, TrainConfig, Trainer};

fn main() -> sgnn::Result<()> {
    let iterations: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let data = GenDataConfig { scenes: 2, frames: 16, seed: 1, intrinsics: CameraIntrinsics::default() };
    let pc = PairConfig { fusion: FusionConfig::with_voxel_size(0.08), ..PairConfig::default() };
    let pairs = (0..data.scenes)
        .map(|i| generate_scene(&data, i).and_then(|(_, frames)| make_pair(&frames, &pc, i)))
        .collect::<sgnn::Result<Vec<_>>>()?;

    let cfg = TrainConfig {
        batch_size: 2,
        n_level: iterations / 3 + 1,
        iterations,
        crop_dims: [32, 32, 32],
        model: ModelConfig::test_scale(),
        ..TrainConfig::default()
    };
    let model = SgnnModel::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, &pairs, cfg)?;
    println!("{}", IterationLog::csv_header(trainer.config.model.levels));
    while trainer.iteration < iterations {
        let entry = trainer.step()?;
        if entry.iteration % 10 == 0 || entry.iteration + 1 == iterations {
            println!("{}", entry.csv_row());
        }
    }
    Ok(())
}
