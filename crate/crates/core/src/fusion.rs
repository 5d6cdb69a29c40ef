//! Weighted-average volumetric integration of depth frames into a sparse TSDF.

use crate::error::{Error, Result};
use crate::grid::{SparseTsdf, VoxelCoord, DEFAULT_TRUNCATION, DEFAULT_VOXEL_SIZE};
use crate::synthcam::{DepthFrame, Vec3};

/// Voxels up to this many truncation widths behind the measured surface are
/// updated (clamped to `-τ`), so occluded space right behind a surface is
/// stored explicitly as unobserved.
pub const BACK_BAND_TRUNCATIONS: f32 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    /// Meters.
    pub voxel_size: f32,
    /// Voxel units.
    pub truncation: f32,
    /// Meters; larger measurements are ignored.
    pub max_depth: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            voxel_size: DEFAULT_VOXEL_SIZE,
            truncation: DEFAULT_TRUNCATION,
            max_depth: 10.0,
        }
    }
}

impl FusionConfig {
    pub fn with_voxel_size(voxel_size: f32) -> Self {
        Self {
            voxel_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size > 0.0 && self.truncation > 0.0 && self.max_depth > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("fusion parameters must be positive: {self:?}")))
        }
    }

    pub fn empty_grid(&self) -> SparseTsdf {
        SparseTsdf::new(self.voxel_size, self.truncation)
    }
}

/// Projective signed distance of one voxel against one frame, in voxel units
/// and clamped to `±τ`. `None` if the frame says nothing about the voxel.
pub fn projective_sdf(frame: &DepthFrame, world: &Vec3, cfg: &FusionConfig) -> Option<f32> {
    let cam = frame.pose.inverse_transform_point(world);
    let (u, v) = frame.intrinsics.project(&cam)?;
    let depth = frame.depth(u, v);
    if !(depth > 0.0 && depth <= cfg.max_depth) {
        return None;
    }
    let raw = ((depth as f64 - cam.z) / cfg.voxel_size as f64) as f32;
    if raw < -BACK_BAND_TRUNCATIONS * cfg.truncation {
        return None;
    }
    Some(raw.clamp(-cfg.truncation, cfg.truncation))
}

/// Voxel index range (inclusive) that can receive updates from `frame`.
fn frustum_bounds(frame: &DepthFrame, cfg: &FusionConfig) -> Option<([i32; 3], [i32; 3])> {
    let far = frame
        .depths
        .iter()
        .copied()
        .filter(|&d| d > 0.0 && d <= cfg.max_depth)
        .fold(0.0f32, f32::max);
    if far <= 0.0 {
        return None;
    }
    let far = (far + BACK_BAND_TRUNCATIONS * cfg.truncation * cfg.voxel_size) as f64;
    let intr = &frame.intrinsics;
    let w = intr.width as f64 - 0.5;
    let h = intr.height as f64 - 0.5;
    let mut lo = frame.pose.translation();
    let mut hi = lo;
    for &(u, v) in &[(-0.5, -0.5), (w, -0.5), (-0.5, h), (w, h)] {
        let p = frame.pose.transform_point(&(intr.ray(u, v) * far));
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    let vs = cfg.voxel_size as f64;
    let lo = [0, 1, 2].map(|i| (lo[i] / vs).floor() as i32 - 1);
    let hi = [0, 1, 2].map(|i| (hi[i] / vs).ceil() as i32 + 1);
    Some((lo, hi))
}

/// Integrates one frame. Every voxel whose center projects onto a valid pixel
/// and lies no further than the back band behind the measured surface gets the
/// running weighted mean update with unit weight.
pub fn integrate(grid: &mut SparseTsdf, frame: &DepthFrame, cfg: &FusionConfig) -> Result<()> {
    cfg.validate()?;
    if grid.voxel_size != cfg.voxel_size {
        return Err(Error::Config(format!(
            "grid voxel size {} does not match fusion voxel size {}",
            grid.voxel_size, cfg.voxel_size
        )));
    }
    let Some((lo, hi)) = frustum_bounds(frame, cfg) else {
        return Ok(());
    };
    let tau = cfg.truncation;
    let vs = cfg.voxel_size as f64;
    let rot_t = frame.pose.rotation().transpose();
    let origin = frame.pose.translation();
    let intr = &frame.intrinsics;
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let world = Vec3::new(x as f64 * vs, y as f64 * vs, z as f64 * vs);
                let here = rot_t * (world - origin);
                let Some((u, v)) = intr.project(&here) else {
                    continue;
                };
                let depth = frame.depth(u, v);
                if !(depth > 0.0 && depth <= cfg.max_depth) {
                    continue;
                }
                let raw = ((depth as f64 - here.z) / vs) as f32;
                if raw < -BACK_BAND_TRUNCATIONS * tau {
                    continue;
                }
                let sdf = raw.clamp(-tau, tau);
                let e = grid.entry_mut(VoxelCoord::new(x, y, z));
                let d = (e.w * e.d + sdf) / (e.w + 1.0);
                e.d = d.clamp(-tau, tau);
                e.w += 1.0;
                e.observed = e.d > -tau;
            }
        }
    }
    Ok(())
}

/// Integrates `frames` in order into an empty grid.
pub fn fuse(frames: &[DepthFrame], cfg: &FusionConfig) -> Result<SparseTsdf> {
    if frames.is_empty() {
        return Err(Error::Argument("fusion needs at least one frame".into()));
    }
    let mut grid = cfg.empty_grid();
    for frame in frames {
        integrate(&mut grid, frame, cfg)?;
    }
    Ok(grid)
}

/// Like [`fuse`] over `frames[i]` for each index in `subset`.
pub fn fuse_subset(frames: &[DepthFrame], subset: &[usize], cfg: &FusionConfig) -> Result<SparseTsdf> {
    if subset.is_empty() {
        return Err(Error::Argument("fusion needs at least one frame".into()));
    }
    let mut grid = cfg.empty_grid();
    for &i in subset {
        let frame = frames
            .get(i)
            .ok_or_else(|| Error::Index(format!("frame {i} of {}", frames.len())))?;
        integrate(&mut grid, frame, cfg)?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcam::{
        make_room_scene, render_depth, scan_scene, Aabb, CameraIntrinsics, Pose, Primitive, Scene,
    };

    fn wall_frame() -> DepthFrame {
        let scene = Scene::new(
            vec![Primitive::Plane {
                normal: Vec3::new(0.0, 0.0, -1.0),
                offset: -1.0,
            }],
            Aabb::new(Vec3::repeat(-5.0), Vec3::repeat(5.0)),
        );
        render_depth(&scene, Pose::identity(), CameraIntrinsics::with_fov(41, 41, 40.0)).unwrap()
    }

    #[test]
    fn voxel_in_front_of_wall() {
        let cfg = FusionConfig::default();
        let grid = fuse(&[wall_frame()], &cfg).unwrap();
        // Voxel (0,0,49) sits on the optical axis at z = 0.98 m.
        let e = grid.get(&VoxelCoord::new(0, 0, 49)).unwrap();
        assert!((e.d - 1.0).abs() < 1e-3, "{}", e.d);
        assert!(e.observed);
        assert_eq!(e.w, 1.0);
    }

    #[test]
    fn voxel_behind_wall_clamps_unobserved() {
        let cfg = FusionConfig::default();
        let grid = fuse(&[wall_frame()], &cfg).unwrap();
        let e = grid.get(&VoxelCoord::new(0, 0, 54)).unwrap();
        assert_eq!(e.d, -3.0);
        assert!(!e.observed);
        // Beyond the back band nothing is stored.
        assert!(grid.get(&VoxelCoord::new(0, 0, 57)).is_none());
    }

    #[test]
    fn voxel_outside_frustum_absent() {
        let cfg = FusionConfig::default();
        let grid = fuse(&[wall_frame()], &cfg).unwrap();
        assert!(grid.get(&VoxelCoord::new(0, 0, -10)).is_none());
        assert!(grid.get(&VoxelCoord::new(40, 0, 49)).is_none());
    }

    #[test]
    fn mismatched_voxel_size_is_config_error() {
        let mut grid = SparseTsdf::new(0.05, 3.0);
        let err = integrate(&mut grid, &wall_frame(), &FusionConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn empty_frame_list_is_argument_error() {
        assert!(matches!(fuse(&[], &FusionConfig::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn same_frame_twice_doubles_weight() {
        let cfg = FusionConfig::default();
        let f = wall_frame();
        let once = fuse(std::slice::from_ref(&f), &cfg).unwrap();
        let twice = fuse(&[f.clone(), f], &cfg).unwrap();
        assert_eq!(once.len(), twice.len());
        for (c, e) in once.iter() {
            let t = twice.get(c).unwrap();
            assert!((t.d - e.d).abs() < 1e-6);
            assert_eq!(t.w, 2.0 * e.w);
        }
    }

    #[test]
    fn one_frame_equals_integrate() {
        let cfg = FusionConfig::default();
        let f = wall_frame();
        let mut g = cfg.empty_grid();
        integrate(&mut g, &f, &cfg).unwrap();
        assert_eq!(fuse(&[f], &cfg).unwrap(), g);
    }

    #[test]
    fn fused_entries_respect_invariants() {
        let cfg = FusionConfig::with_voxel_size(0.08);
        let scene = make_room_scene(4);
        let frames = scan_scene(&scene, 6, CameraIntrinsics::with_fov(48, 36, 60.0), 4).unwrap();
        let grid = fuse(&frames, &cfg).unwrap();
        for (c, e) in grid.iter() {
            assert!(e.d.abs() <= cfg.truncation);
            assert!(e.w >= 1.0 && e.w <= 6.0);
            assert_eq!(e.observed, e.d > -cfg.truncation);
            // Weight equals the number of frames that updated the voxel.
            let world = Vec3::new(c.x as f64, c.y as f64, c.z as f64) * cfg.voxel_size as f64;
            let n = frames
                .iter()
                .filter(|f| projective_sdf(f, &world, &cfg).is_some())
                .count();
            assert_eq!(e.w as usize, n);
        }
    }

    #[test]
    fn fronto_parallel_wall_matches_true_distance() {
        let cfg = FusionConfig::default();
        let grid = fuse(&[wall_frame()], &cfg).unwrap();
        let mut checked = 0;
        for (c, e) in grid.iter() {
            let z = c.z as f64 * 0.02;
            let true_sdf = 1.0 - z;
            if e.w > 0.0 && true_sdf.abs() < 3.0 * 0.02 {
                assert!((e.d as f64 - true_sdf / 0.02).abs() < 0.5, "{c:?} {}", e.d);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn frame_order_does_not_change_result() {
        let cfg = FusionConfig::with_voxel_size(0.06);
        let scene = make_room_scene(8);
        let frames = scan_scene(&scene, 5, CameraIntrinsics::with_fov(48, 36, 60.0), 1).unwrap();
        let forward = fuse(&frames, &cfg).unwrap();
        let mut rev = frames.clone();
        rev.reverse();
        rev.swap(0, 2);
        let shuffled = fuse(&rev, &cfg).unwrap();
        assert_eq!(forward.len(), shuffled.len());
        for (c, e) in forward.iter() {
            let o = shuffled.get(c).expect("entry set must match");
            assert!((o.d - e.d).abs() <= 1e-6, "{} vs {}", o.d, e.d);
            assert_eq!(o.w, e.w);
        }
    }
}
