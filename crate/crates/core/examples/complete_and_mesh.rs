//! Completes a partial scan with a briefly trained model and writes meshes
//! of the input and the completion.
//!
//! cargo run --release --example complete_and_mesh [out_dir]

use std::path::PathBuf;

use sgnn::fusion::FusionConfig;
use sgnn::mesh::{marching_cubes, write_ply};
use sgnn::model::{ModelConfig, SgnnModel};
use sgnn::pipeline::{generate_scene, make_pair, GenDataConfig, PairConfig};
use sgnn::synthcam::CameraIntrinsics;
use sgnn::trainer::{train, TrainConfig};

fn main() -> sgnn::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let data = GenDataConfig { scenes: 1, frames: 16, seed: 5, intrinsics: CameraIntrinsics::default() };
    let pc = PairConfig { fusion: FusionConfig::with_voxel_size(0.08), ..PairConfig::default() };
    let (_, frames) = generate_scene(&data, 0)?;
    let pair = make_pair(&frames, &pc, 0)?;

    let cfg = TrainConfig {
        batch_size: 2,
        n_level: 20,
        iterations: 80,
        crop_dims: [32, 32, 32],
        model: ModelConfig::test_scale(),
        ..TrainConfig::default()
    };
    let model = SgnnModel::new(cfg.model.clone(), cfg.seed)?;
    let (mut model, log) = train(std::slice::from_ref(&pair), model, cfg, None)?;
    println!("final loss {:.4}", log.last().map_or(f32::NAN, |l| l.total));

    let completed = model.complete(&pair.input)?;
    for (name, tsdf) in [("input", &pair.input), ("completed", &completed)] {
        let mesh = marching_cubes(tsdf);
        let path = out.join(format!("{name}.ply"));
        write_ply(&path, &mesh)?;
        println!("{name:<9} {:>7} voxels {:>7} triangles -> {}", tsdf.len(), mesh.triangles.len(), path.display());
    }
    Ok(())
}
