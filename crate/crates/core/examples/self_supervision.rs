//! Builds a frame-removal pair and a crop-removal pair from one scan and
//! compares how much of the target each input misses.

use sgnn::fusion::{fuse, FusionConfig};
use sgnn::selfsup::{build_pair, crops_baseline_pair, ScanPair};
use sgnn::synthcam::{make_room_scene, scan_scene, CameraIntrinsics};

fn describe(name: &str, p: &ScanPair) {
    let missing = p
        .mask
        .iter()
        .filter(|c| p.target.get(c).is_some_and(|e| e.d.abs() < 1.0))
        .filter(|c| !p.input.get(c).is_some_and(|e| e.d.abs() < 1.0))
        .count();
    println!(
        "{name:<14} input {:>7}  target {:>7}  loss mask {:>7}  target surface absent from input {missing}",
        p.input.len(),
        p.target.len(),
        p.mask.len()
    );
}

fn main() -> sgnn::Result<()> {
    let scene = make_room_scene(3);
    let frames = scan_scene(&scene, 24, CameraIntrinsics::default(), 3)?;
    let cfg = FusionConfig::with_voxel_size(0.05);

    // Input from half of the frames, target from all of them.
    let pair = build_pair(&frames, 0.5, 1.0, &cfg, 3)?;
    describe("frame removal", &pair);

    // Ablation: the input is the full scan with random boxes cut out.
    let full = fuse(&frames, &cfg)?;
    let crops = crops_baseline_pair(&full, 3)?;
    describe("crop removal", &crops);
    Ok(())
}
