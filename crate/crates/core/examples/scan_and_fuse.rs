//! Renders depth frames of a synthetic room and fuses them into a sparse TSDF.
//!
//! cargo run --release --example scan_and_fuse [out.tsdf]

use sgnn::fusion::{fuse, FusionConfig};
use sgnn::io::write_tsdf;
use sgnn::synthcam::{make_room_scene, scan_scene, CameraIntrinsics};

fn main() -> sgnn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("room.tsdf"), Into::into);
    let scene = make_room_scene(7);
    let frames = scan_scene(&scene, 12, CameraIntrinsics::default(), 7)?;
    let valid: usize = frames.iter().map(|f| f.valid_count()).sum();
    println!("{} frames, {valid} valid depth pixels", frames.len());

    let cfg = FusionConfig::with_voxel_size(0.05);
    let tsdf = fuse(&frames, &cfg)?;
    let (lo, hi) = tsdf.bounds().expect("fused something");
    println!(
        "{} voxels, {} near the surface, bounds {:?}..{:?}",
        tsdf.len(),
        tsdf.surface_count(),
        lo.xyz(),
        hi.xyz()
    );
    write_tsdf(&out, &tsdf)?;
    println!("wrote {}", out.display());
    Ok(())
}
