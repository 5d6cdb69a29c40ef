//! Scores two trivial completions of a partial scan: returning the input
//! unchanged and returning the fused target.

use sgnn::eval::{completion_recall, l1_metrics};
use sgnn::fusion::FusionConfig;
use sgnn::selfsup::build_pair;
use sgnn::synthcam::{make_room_scene, scan_scene, CameraIntrinsics};

fn main() -> sgnn::Result<()> {
    let scene = make_room_scene(9);
    let frames = scan_scene(&scene, 24, CameraIntrinsics::default(), 9)?;
    let pair = build_pair(&frames, 0.5, 1.0, &FusionConfig::with_voxel_size(0.05), 9)?;
    let bbox = pair.target.bounding_crop().expect("non-empty target");

    for (name, pred) in [("input", &pair.input), ("target", &pair.target)] {
        let report = l1_metrics(pred, &pair.target, &bbox, Some(&pair.input))?;
        let recall = completion_recall(pred, &scene, &pair.input);
        println!("prediction = {name}");
        print!("{report}");
        println!("completion recall {recall:.4}\n");
    }
    Ok(())
}
