//! On-disk dataset layout shared by the CLI, the examples and the tests.
//!
//! ```text
//! data/scene_000/scene.txt           scene description
//! data/scene_000/frame_000.depth     rendered frames
//! pairs/pair_000/{input,target,mask}.tsdf
//! pairs/pair_000/scene.txt           copy of the source scene
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::{fuse_subset, FusionConfig};
use crate::io::{read_depth, read_tsdf, write_depth, write_tsdf};
use crate::selfsup::{build_pair, crops_baseline_pair, pair_frame_indices, ScanPair};
use crate::synthcam::{make_room_scene, scan_scene, CameraIntrinsics, DepthFrame, Scene};
use crate::util::mix_seed;

pub const SCENE_FILE: &str = "scene.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenDataConfig {
    pub scenes: usize,
    pub frames: usize,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
}

/// Scene `i` of a generated dataset and its frames.
pub fn generate_scene(cfg: &GenDataConfig, i: usize) -> Result<(Scene, Vec<DepthFrame>)> {
    let scene = make_room_scene(mix_seed(cfg.seed, i as u64));
    let frames = scan_scene(&scene, cfg.frames, cfg.intrinsics, mix_seed(cfg.seed, 10_000 + i as u64))?;
    Ok((scene, frames))
}

pub fn generate_dataset(out: &Path, cfg: &GenDataConfig) -> Result<()> {
    if cfg.scenes == 0 || cfg.frames == 0 {
        return Err(Error::Argument("need at least one scene and one frame".into()));
    }
    cfg.intrinsics.validate()?;
    for i in 0..cfg.scenes {
        let (scene, frames) = generate_scene(cfg, i)?;
        let dir = out.join(format!("scene_{i:03}"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(SCENE_FILE), scene.to_text())?;
        for (j, f) in frames.iter().enumerate() {
            write_depth(&dir.join(format!("frame_{j:03}.depth")), f)?;
        }
        log::info!("wrote {} ({} frames)", dir.display(), frames.len());
    }
    Ok(())
}

fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.retain(|p| keep(p));
    v.sort();
    Ok(v)
}

/// Subdirectories of `dir` holding a scene file, sorted by name.
pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    sorted_entries(dir, |p| p.join(SCENE_FILE).is_file())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let file = if path.is_dir() { path.join(SCENE_FILE) } else { path.to_path_buf() };
    Scene::from_text(&fs::read_to_string(file)?)
}

/// Every `*.depth` file of `dir` in name order.
pub fn load_frames(dir: &Path) -> Result<Vec<DepthFrame>> {
    let files = sorted_entries(dir, |p| p.extension().is_some_and(|e| e == "depth"))?;
    if files.is_empty() {
        return Err(Error::Argument(format!("no .depth files in {}", dir.display())));
    }
    files.iter().map(|f| read_depth(f)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairConfig {
    pub input_fraction: f64,
    pub target_fraction: f64,
    pub fusion: FusionConfig,
    pub seed: u64,
    /// Build inputs by cutting boxes out of the target instead of dropping frames.
    pub crops_baseline: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            input_fraction: 0.5,
            target_fraction: 1.0,
            fusion: FusionConfig::default(),
            seed: 0,
            crops_baseline: false,
        }
    }
}

/// Pair for the `k`-th scene of a dataset.
pub fn make_pair(frames: &[DepthFrame], cfg: &PairConfig, k: usize) -> Result<ScanPair> {
    let seed = mix_seed(cfg.seed, k as u64);
    if cfg.crops_baseline {
        let (target_idx, _) = pair_frame_indices(frames.len(), cfg.target_fraction, cfg.target_fraction, seed)?;
        let target = fuse_subset(frames, &target_idx, &cfg.fusion)?;
        crops_baseline_pair(&target, seed)
    } else {
        build_pair(frames, cfg.input_fraction, cfg.target_fraction, &cfg.fusion, seed)
    }
}

pub fn write_pair(dir: &Path, pair: &ScanPair) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tsdf(&dir.join("input.tsdf"), &pair.input)?;
    write_tsdf(&dir.join("target.tsdf"), &pair.target)?;
    write_tsdf(&dir.join("mask.tsdf"), &pair.mask_as_tsdf())?;
    Ok(())
}

pub fn read_pair(dir: &Path) -> Result<ScanPair> {
    let input = read_tsdf(&dir.join("input.tsdf"))?;
    let target = read_tsdf(&dir.join("target.tsdf"))?;
    let mask = read_tsdf(&dir.join("mask.tsdf"))?;
    Ok(ScanPair::from_mask_tsdf(input, target, &mask))
}

/// Builds one pair per scene directory of `data` and writes them under `out`.
pub fn write_pairs(data: &Path, out: &Path, cfg: &PairConfig) -> Result<usize> {
    cfg.fusion.validate()?;
    let scenes = scene_dirs(data)?;
    if scenes.is_empty() {
        return Err(Error::Argument(format!("no scene directories in {}", data.display())));
    }
    for (k, dir) in scenes.iter().enumerate() {
        let frames = load_frames(dir)?;
        let pair = make_pair(&frames, cfg, k)?;
        let pdir = out.join(format!("pair_{k:03}"));
        write_pair(&pdir, &pair)?;
        fs::copy(dir.join(SCENE_FILE), pdir.join(SCENE_FILE))?;
        log::info!("wrote {} (input {}, target {})", pdir.display(), pair.input.len(), pair.target.len());
    }
    Ok(scenes.len())
}

/// Every `pair_*` directory under `dir`, in name order.
pub fn load_pairs(dir: &Path) -> Result<Vec<ScanPair>> {
    let dirs = sorted_entries(dir, |p| p.join("input.tsdf").is_file())?;
    dirs.iter().map(|d| read_pair(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_and_pairs_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = GenDataConfig {
            scenes: 1,
            frames: 4,
            seed: 3,
            intrinsics: CameraIntrinsics::with_fov(40, 30, 60.0),
        };
        generate_dataset(&tmp.path().join("data"), &cfg).unwrap();
        let dirs = scene_dirs(&tmp.path().join("data")).unwrap();
        assert_eq!(dirs.len(), 1);
        let (scene, frames) = generate_scene(&cfg, 0).unwrap();
        assert_eq!(load_scene(&dirs[0]).unwrap(), scene);
        assert_eq!(load_frames(&dirs[0]).unwrap(), frames);

        let pc = PairConfig {
            fusion: FusionConfig::with_voxel_size(0.1),
            ..PairConfig::default()
        };
        assert_eq!(write_pairs(&tmp.path().join("data"), &tmp.path().join("pairs"), &pc).unwrap(), 1);
        let pairs = load_pairs(&tmp.path().join("pairs")).unwrap();
        assert_eq!(pairs, vec![make_pair(&frames, &pc, 0).unwrap()]);
    }
}
