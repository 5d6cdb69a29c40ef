//! Masked ℓ1 distance metrics and synthetic completion recall.

use std::fmt;

use rustc_hash::FxHashSet;

use crate::error::{Error, Result};
use crate::grid::{densify, CropSpec, SparseTsdf, VoxelCoord};
use crate::synthcam::{voxel_center, Scene};

/// Truncation applied to both fields before comparing.
pub const GLOBAL_TRUNCATION: f32 = 3.0;

/// Distance below which a voxel counts as near a surface.
pub const NEAR_THRESHOLD: f32 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub l1_entire: f64,
    pub l1_unobserved: f64,
    pub l1_target: f64,
    pub l1_predicted: f64,
    pub n_entire: usize,
    pub n_unobserved: usize,
    pub n_target: usize,
    pub n_predicted: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "l1_entire,l1_unobserved,l1_target,l1_predicted,n_entire,n_unobserved,n_target,n_predicted";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.l1_entire,
            self.l1_unobserved,
            self.l1_target,
            self.l1_predicted,
            self.n_entire,
            self.n_unobserved,
            self.n_target,
            self.n_predicted
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "region        l1        voxels")?;
        for (name, v, n) in [
            ("entire", self.l1_entire, self.n_entire),
            ("unobserved", self.l1_unobserved, self.n_unobserved),
            ("target", self.l1_target, self.n_target),
            ("predicted", self.l1_predicted, self.n_predicted),
        ] {
            writeln!(f, "{name:<12}  {v:<8.5}  {n}")?;
        }
        Ok(())
    }
}

fn observed(s: &SparseTsdf, c: &VoxelCoord) -> bool {
    s.get(c).is_some_and(|e| e.d > -s.truncation)
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Mean `||pred| - |target||` over the box, in voxel units.
///
/// Missing cells read as the global truncation and voxels the target did not
/// observe (absent or at `-τ`) are left out of every region. The unobserved
/// region holds voxels the `input` did not observe; without an input it
/// holds target voxels next to a target voxel at `-τ`.
pub fn l1_metrics(pred: &SparseTsdf, target: &SparseTsdf, bbox: &CropSpec, input: Option<&SparseTsdf>) -> Result<MetricsReport> {
    for (name, s) in [("prediction", Some(pred)), ("input", input)] {
        if let Some(s) = s {
            if s.voxel_size != target.voxel_size {
                return Err(Error::Argument(format!(
                    "{name} voxel size {} differs from target {}",
                    s.voxel_size, target.voxel_size
                )));
            }
        }
    }
    let p = densify(pred, bbox, GLOBAL_TRUNCATION);
    let t = densify(target, bbox, GLOBAL_TRUNCATION);
    let (mut entire, mut unobs, mut tgt, mut prd) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());
    for (i, c) in bbox.coords().enumerate() {
        if !observed(target, &c) {
            continue;
        }
        let (pv, tv) = (p.values[i].abs() as f64, t.values[i].abs() as f64);
        let err = (pv - tv).abs();
        entire.add(err);
        let in_unobserved = match input {
            Some(inp) => !observed(inp, &c),
            None => NEIGHBORS6.iter().any(|o| {
                target
                    .get(&c.offset(o[0], o[1], o[2]))
                    .is_some_and(|e| e.d <= -target.truncation)
            }),
        };
        if in_unobserved {
            unobs.add(err);
        }
        if tv <= NEAR_THRESHOLD as f64 {
            tgt.add(err);
        }
        if pv <= NEAR_THRESHOLD as f64 {
            prd.add(err);
        }
    }
    Ok(MetricsReport {
        l1_entire: entire.get(),
        l1_unobserved: unobs.get(),
        l1_target: tgt.get(),
        l1_predicted: prd.get(),
        n_entire: entire.n,
        n_unobserved: unobs.n,
        n_target: tgt.n,
        n_predicted: prd.n,
    })
}

const NEIGHBORS6: [[i32; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

fn surface_set(s: &SparseTsdf) -> FxHashSet<VoxelCoord> {
    s.iter()
        .filter(|(_, e)| e.d.abs() < NEAR_THRESHOLD)
        .map(|(c, _)| *c)
        .collect()
}

fn near(set: &FxHashSet<VoxelCoord>, c: VoxelCoord) -> bool {
    (-1..=1).any(|dx| (-1..=1).any(|dy| (-1..=1).any(|dz| set.contains(&c.offset(dx, dy, dz)))))
}

/// Ground-truth surface voxels the input missed, and how many of them the
/// prediction recovered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecallCounts {
    pub missing: usize,
    pub recovered: usize,
}

impl RecallCounts {
    pub fn fraction(&self) -> f64 {
        if self.missing == 0 {
            0.0
        } else {
            self.recovered as f64 / self.missing as f64
        }
    }
}

/// Voxels whose center is within one voxel size of the scene surface,
/// inside the scanner-reachable interior grown by one voxel.
pub fn ground_truth_surface(scene: &Scene, voxel_size: f32) -> Vec<VoxelCoord> {
    let vs = voxel_size as f64;
    let region = scene.interior.expanded(vs);
    let lo = region.min.map(|v| (v / vs).floor() as i32);
    let hi = region.max.map(|v| (v / vs).ceil() as i32);
    let mut out = Vec::new();
    for x in lo.x..=hi.x {
        for y in lo.y..=hi.y {
            for z in lo.z..=hi.z {
                let p = voxel_center([x, y, z], vs);
                if region.contains(&p, 0.0) && scene.sdf(&p).abs() < vs {
                    out.push(VoxelCoord::new(x, y, z));
                }
            }
        }
    }
    out
}

pub fn completion_recall_counts(pred: &SparseTsdf, scene: &Scene, input: &SparseTsdf) -> RecallCounts {
    let have = surface_set(input);
    let got = surface_set(pred);
    let mut r = RecallCounts::default();
    for c in ground_truth_surface(scene, input.voxel_size) {
        if near(&have, c) {
            continue;
        }
        r.missing += 1;
        if near(&got, c) {
            r.recovered += 1;
        }
    }
    r
}

/// Fraction of ground-truth surface absent from `input` that `pred` places
/// a surface voxel within one voxel of.
pub fn completion_recall(pred: &SparseTsdf, scene: &Scene, input: &SparseTsdf) -> f64 {
    completion_recall_counts(pred, scene, input).fraction()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TsdfEntry;
    use crate::synthcam::{Aabb, Primitive, Vec3};

    fn grid(vals: &[(i32, f32)]) -> SparseTsdf {
        vals.iter()
            .map(|&(x, d)| (VoxelCoord::new(x, 0, 0), TsdfEntry::observed(d)))
            .collect::<SparseTsdf>()
    }

    #[test]
    fn identical_fields_give_zero_report() {
        let t = grid(&[(0, 0.5), (1, -0.2), (2, 2.0), (3, -3.0)]);
        let r = l1_metrics(&t, &t, &CropSpec::new(VoxelCoord::new(0, 0, 0), [4, 1, 1]), None).unwrap();
        assert_eq!((r.l1_entire, r.l1_unobserved, r.l1_target, r.l1_predicted), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.n_entire, 3);
        // Voxel 2 neighbours the -τ voxel 3.
        assert_eq!(r.n_unobserved, 1);
    }

    #[test]
    fn constant_offset_is_reported() {
        let t = grid(&[(0, 0.25), (1, 1.0), (2, 2.0)]);
        let p = grid(&[(0, 0.75), (1, 1.5), (2, 2.5)]);
        let r = l1_metrics(&p, &t, &CropSpec::new(VoxelCoord::new(0, 0, 0), [3, 1, 1]), None).unwrap();
        assert!((r.l1_entire - 0.5).abs() < 1e-12);
    }

    #[test]
    fn voxel_size_mismatch_is_rejected() {
        let t = SparseTsdf::new(0.02, 3.0);
        let p = SparseTsdf::new(0.05, 3.0);
        assert!(matches!(
            l1_metrics(&p, &t, &CropSpec::at_origin([2, 2, 2]), None),
            Err(Error::Argument(_))
        ));
    }

    fn ball_scene() -> Scene {
        let extent = Aabb::new(Vec3::zeros(), Vec3::repeat(1.0));
        Scene::new(vec![Primitive::Sphere { center: Vec3::repeat(0.5), radius: 0.3 }], extent)
    }

    fn gt_tsdf(scene: &Scene, vs: f32) -> SparseTsdf {
        ground_truth_surface(scene, vs)
            .into_iter()
            .map(|c| {
                let d = scene.sdf(&voxel_center(c.xyz(), vs as f64)) / vs as f64;
                (c, TsdfEntry::observed(d as f32 * 0.99))
            })
            .collect::<SparseTsdf>()
            .with_voxel_size(vs)
    }

    #[test]
    fn recall_bounds() {
        let scene = ball_scene();
        let full = gt_tsdf(&scene, 0.05);
        let half: SparseTsdf = full
            .iter()
            .filter(|(c, _)| c.x < 10)
            .map(|(c, e)| (*c, *e))
            .collect::<SparseTsdf>()
            .with_voxel_size(0.05);
        assert_eq!(completion_recall(&half, &scene, &half), 0.0);
        assert_eq!(completion_recall(&full, &scene, &half), 1.0);
        assert!(completion_recall_counts(&full, &scene, &half).missing > 0);
    }
}
