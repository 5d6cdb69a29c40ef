//! Training pairs built by fusing nested subsets of one scan's frames.
//!
//! The target is fused from a subset of the frames, the input from a further
//! subset of the target's frames. Losses only apply where the target has been
//! observed (`d > -τ`).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse_subset, FusionConfig};
use crate::grid::{crop, CropSpec, SparseTsdf, VoxelCoord};
use crate::synthcam::DepthFrame;
use crate::util::mix_seed;

/// Minimum number of input surface voxels a training crop must contain.
pub const MIN_CROP_SURFACE_VOXELS: usize = 100;

/// One self-supervision sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPair {
    pub input: SparseTsdf,
    pub target: SparseTsdf,
    /// Sorted coordinates where the loss applies.
    pub mask: Vec<VoxelCoord>,
}

impl ScanPair {
    /// Builds a pair whose mask is every target entry with `d > -τ`.
    pub fn new(input: SparseTsdf, target: SparseTsdf) -> Self {
        let mask = target.observed_mask();
        Self { input, target, mask }
    }

    pub fn in_mask(&self, c: &VoxelCoord) -> bool {
        self.mask.binary_search(c).is_ok()
    }

    /// Mask stored as a TSDF (unit weights, zero distance) for the pair file layout.
    pub fn mask_as_tsdf(&self) -> SparseTsdf {
        let mut m = self.target.empty_like();
        for c in &self.mask {
            m.insert(*c, crate::grid::TsdfEntry::new(0.0, 1.0, true));
        }
        m
    }

    pub fn from_mask_tsdf(input: SparseTsdf, target: SparseTsdf, mask: &SparseTsdf) -> Self {
        Self {
            input,
            target,
            mask: mask.sorted_coords(),
        }
    }
}

/// Indices of a uniformly random subset of `round(fraction·n)` (at least one)
/// of `0..n`, in increasing order.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Argument("cannot subsample an empty frame list".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Random subset of frames keeping their original order.
pub fn subsample_frames<T: Clone>(frames: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    Ok(subsample_indices(frames.len(), fraction, seed)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

/// Frame indices used for the target and for the input of a pair.
pub fn pair_frame_indices(
    n: usize,
    input_fraction: f64,
    target_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(input_fraction > 0.0 && input_fraction <= target_fraction && target_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "need 0 < input_fraction <= target_fraction <= 1, got {input_fraction} and {target_fraction}"
        )));
    }
    let target = subsample_indices(n, target_fraction, mix_seed(seed, 1))?;
    let rel = input_fraction / target_fraction;
    let input = subsample_indices(target.len(), rel, mix_seed(seed, 2))?
        .into_iter()
        .map(|i| target[i])
        .collect();
    Ok((target, input))
}

/// Fuses a target from `target_fraction` of the frames and an input from a
/// nested subset covering `input_fraction` of the original frames.
pub fn build_pair(
    frames: &[DepthFrame],
    input_fraction: f64,
    target_fraction: f64,
    cfg: &FusionConfig,
    seed: u64,
) -> Result<ScanPair> {
    let (target_idx, input_idx) = pair_frame_indices(frames.len(), input_fraction, target_fraction, seed)?;
    let target = fuse_subset(frames, &target_idx, cfg)?;
    let input = fuse_subset(frames, &input_idx, cfg)?;
    Ok(ScanPair::new(input, target))
}

/// Applies the same crop box to input, target and mask.
pub fn crop_pair(p: &ScanPair, spec: &CropSpec) -> ScanPair {
    ScanPair {
        input: crop(&p.input, spec),
        target: crop(&p.target, spec),
        mask: p
            .mask
            .iter()
            .filter(|c| spec.contains(c))
            .map(|c| *c - spec.origin)
            .collect(),
    }
}

/// Uniform sampler over crop origins whose input crop holds enough surface.
///
/// Counts come from a 3D prefix sum over the input's surface voxels, so
/// repeated draws for the same pair are cheap.
pub struct CropSampler {
    dims: [usize; 3],
    lo: [i32; 3],
    n: [usize; 3],
    prefix: Vec<u32>,
    min_surface: usize,
}

impl CropSampler {
    pub fn new(input: &SparseTsdf, dims: [usize; 3], min_surface: usize) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Argument(format!("crop dims must be positive, got {dims:?}")));
        }
        let surface: Vec<VoxelCoord> = input
            .iter()
            .filter(|(_, e)| e.d.abs() < 1.0)
            .map(|(c, _)| *c)
            .collect();
        if surface.len() < min_surface {
            return Err(Error::Sampling(format!(
                "input has {} surface voxels, fewer than the {min_surface} a crop needs",
                surface.len()
            )));
        }
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for c in &surface {
            for (i, v) in c.xyz().into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        let n = [0, 1, 2].map(|i| (hi[i] - lo[i] + 1) as usize);
        let (sx, sy) = (n[0] + 1, n[1] + 1);
        let mut prefix = vec![0u32; sx * sy * (n[2] + 1)];
        let at = |x: usize, y: usize, z: usize| (z * sy + y) * sx + x;
        for c in &surface {
            let [x, y, z] = [0, 1, 2].map(|i| (c.xyz()[i] - lo[i]) as usize);
            prefix[at(x + 1, y + 1, z + 1)] += 1;
        }
        for z in 1..=n[2] {
            for y in 1..=n[1] {
                for x in 1..=n[0] {
                    prefix[at(x, y, z)] = prefix[at(x, y, z)]
                        .wrapping_add(prefix[at(x - 1, y, z)])
                        .wrapping_add(prefix[at(x, y - 1, z)])
                        .wrapping_add(prefix[at(x, y, z - 1)])
                        .wrapping_sub(prefix[at(x - 1, y - 1, z)])
                        .wrapping_sub(prefix[at(x - 1, y, z - 1)])
                        .wrapping_sub(prefix[at(x, y - 1, z - 1)])
                        .wrapping_add(prefix[at(x - 1, y - 1, z - 1)]);
                }
            }
        }
        Ok(Self {
            dims,
            lo,
            n,
            prefix,
            min_surface,
        })
    }

    /// Surface voxels inside the crop starting at `origin`.
    pub fn count(&self, origin: [i32; 3]) -> usize {
        let mut a = [0usize; 3];
        let mut b = [0usize; 3];
        for i in 0..3 {
            let start = origin[i] - self.lo[i];
            let end = start + self.dims[i] as i32;
            a[i] = start.clamp(0, self.n[i] as i32) as usize;
            b[i] = end.clamp(0, self.n[i] as i32) as usize;
            if a[i] >= b[i] {
                return 0;
            }
        }
        let (sx, sy) = (self.n[0] + 1, self.n[1] + 1);
        let p = |x: usize, y: usize, z: usize| self.prefix[(z * sy + y) * sx + x] as i64;
        let total = p(b[0], b[1], b[2]) - p(a[0], b[1], b[2]) - p(b[0], a[1], b[2]) - p(b[0], b[1], a[2])
            + p(a[0], a[1], b[2])
            + p(a[0], b[1], a[2])
            + p(b[0], a[1], a[2])
            - p(a[0], a[1], a[2]);
        total as usize
    }

    fn origin_range(&self) -> [(i32, i32); 3] {
        [0, 1, 2].map(|i| {
            let start = self.lo[i] - self.dims[i] as i32 + 1;
            (start, self.lo[i] + self.n[i] as i32 - 1)
        })
    }

    /// Draws an origin uniformly among the valid ones.
    pub fn sample(&self, seed: u64) -> Result<CropSpec> {
        let range = self.origin_range();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Rejection sampling is exactly uniform over the valid set.
        for _ in 0..20_000 {
            let o = range.map(|(a, b)| rng.gen_range(a..=b));
            if self.count(o) >= self.min_surface {
                return Ok(self.spec(o));
            }
        }
        // Valid origins are rare: enumerate them.
        let mut valid = Vec::new();
        for z in range[2].0..=range[2].1 {
            for y in range[1].0..=range[1].1 {
                for x in range[0].0..=range[0].1 {
                    if self.count([x, y, z]) >= self.min_surface {
                        valid.push([x, y, z]);
                    }
                }
            }
        }
        if valid.is_empty() {
            return Err(Error::Sampling(format!(
                "no {:?} crop holds {} surface voxels",
                self.dims, self.min_surface
            )));
        }
        Ok(self.spec(valid[rng.gen_range(0..valid.len())]))
    }

    fn spec(&self, o: [i32; 3]) -> CropSpec {
        CropSpec::new(VoxelCoord::new(o[0], o[1], o[2]), self.dims)
    }
}

/// Crops input, target and mask with one random box containing at least
/// [`MIN_CROP_SURFACE_VOXELS`] input surface voxels.
pub fn random_crop_pair(p: &ScanPair, dims: [usize; 3], seed: u64) -> Result<ScanPair> {
    let sampler = CropSampler::new(&p.input, dims, MIN_CROP_SURFACE_VOXELS)?;
    let spec = sampler.sample(seed)?;
    Ok(crop_pair(p, &spec))
}

/// Ablation pair: the input is the target with one to four random boxes cut out.
pub fn crops_baseline_pair(target: &SparseTsdf, seed: u64) -> Result<ScanPair> {
    crops_baseline_pair_with(target, 1..=4, seed)
}

/// Like [`crops_baseline_pair`] with a configurable number of removed boxes.
/// Each box spans 10–40% of the target's extent per axis.
pub fn crops_baseline_pair_with(
    target: &SparseTsdf,
    boxes: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<ScanPair> {
    let (lo, hi) = target
        .bounds()
        .ok_or_else(|| Error::Argument("crop baseline needs a non-empty target".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_boxes = rng.gen_range(boxes);
    let extent = [hi.x - lo.x + 1, hi.y - lo.y + 1, hi.z - lo.z + 1];
    let mut removed = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let mut origin = [0i32; 3];
        let mut dims = [0usize; 3];
        for i in 0..3 {
            let size = ((rng.gen_range(0.1..=0.4) * extent[i] as f64).round() as i32).max(1);
            let start = lo.xyz()[i] + rng.gen_range(0..=(extent[i] - size).max(0));
            origin[i] = start;
            dims[i] = size as usize;
        }
        removed.push(CropSpec::new(VoxelCoord::new(origin[0], origin[1], origin[2]), dims));
    }
    let mut input = target.empty_like();
    for (c, e) in target.iter() {
        if !removed.iter().any(|b| b.contains(c)) {
            input.insert(*c, *e);
        }
    }
    Ok(ScanPair::new(input, target.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TsdfEntry;
    use crate::synthcam::{make_room_scene, scan_scene, CameraIntrinsics};

    fn frames() -> (Vec<DepthFrame>, FusionConfig) {
        let scene = make_room_scene(12);
        let f = scan_scene(&scene, 10, CameraIntrinsics::with_fov(48, 36, 60.0), 12).unwrap();
        (f, FusionConfig::with_voxel_size(0.08))
    }

    #[test]
    fn full_fraction_is_identity() {
        assert_eq!(subsample_indices(7, 1.0, 3).unwrap(), (0..7).collect::<Vec<_>>());
        let v: Vec<u32> = (0..10).collect();
        assert_eq!(subsample_frames(&v, 1.0, 0).unwrap(), v);
    }

    #[test]
    fn half_of_ten_is_five_sorted_subset() {
        let v: Vec<u32> = (0..10).collect();
        let s = subsample_frames(&v, 0.5, 42).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, subsample_frames(&v, 0.5, 42).unwrap());
        assert_eq!(subsample_indices(10, 0.01, 1).unwrap().len(), 1);
    }

    #[test]
    fn subsample_rejects_bad_input() {
        assert!(subsample_indices(0, 0.5, 0).is_err());
        assert!(subsample_indices(5, 0.0, 0).is_err());
        assert!(subsample_indices(5, 1.5, 0).is_err());
    }

    #[test]
    fn fraction_ordering_is_enforced() {
        let (f, cfg) = frames();
        assert!(matches!(build_pair(&f, 0.6, 0.5, &cfg, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn supported_fraction_pairs() {
        for &(a, b) in &[(0.3, 0.5), (0.4, 0.6), (0.5, 1.0)] {
            let (t, i) = pair_frame_indices(24, a, b, 5).unwrap();
            assert_eq!(t.len(), (b * 24.0_f64).round() as usize);
            assert_eq!(i.len(), (t.len() as f64 * a / b).round() as usize);
            assert!(i.iter().all(|x| t.contains(x)));
        }
    }

    #[test]
    fn equal_fractions_give_identical_input() {
        let (f, cfg) = frames();
        let p = build_pair(&f, 0.6, 0.6, &cfg, 7).unwrap();
        assert_eq!(p.input, p.target);
    }

    #[test]
    fn nested_pair_invariants() {
        let (f, cfg) = frames();
        let p = build_pair(&f, 0.5, 1.0, &cfg, 3).unwrap();
        let tau = p.target.truncation;
        let mut within = 0;
        for (c, e) in p.input.iter() {
            let t = p.target.get(c).expect("input must be a subset of target");
            let diff = (t.d - e.d).abs();
            // Conflicting frames can pull the averages almost 2τ apart.
            assert!(diff <= 2.0 * tau);
            within += (diff <= tau + 1e-5) as usize;
        }
        assert!(within as f64 >= 0.98 * p.input.len() as f64, "{within} of {}", p.input.len());
        for c in &p.mask {
            let t = p.target.get(c).expect("mask coords exist in target");
            assert!(t.d > -tau);
        }
        let deep = p.target.iter().filter(|(_, e)| e.d <= -tau).count();
        assert_eq!(p.mask.len() + deep, p.target.len());
    }

    #[test]
    fn crop_covering_everything_only_shifts() {
        let (f, cfg) = frames();
        let p = build_pair(&f, 0.5, 1.0, &cfg, 3).unwrap();
        let spec = p.target.bounding_crop().unwrap();
        let c = crop_pair(&p, &spec);
        assert_eq!(c.input.len(), p.input.len());
        assert_eq!(c.target.len(), p.target.len());
        assert_eq!(c.mask.len(), p.mask.len());
    }

    #[test]
    fn random_crop_is_deterministic_and_valid() {
        let (f, cfg) = frames();
        let p = build_pair(&f, 0.5, 1.0, &cfg, 3).unwrap();
        let dims = [16, 16, 24];
        let a = random_crop_pair(&p, dims, 9).unwrap();
        let b = random_crop_pair(&p, dims, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.input.surface_count() >= MIN_CROP_SURFACE_VOXELS);
        let spec = CropSpec::at_origin(dims);
        assert!(a.target.iter().all(|(c, _)| spec.contains(c)));
    }

    #[test]
    fn mask_of_crop_equals_crop_of_mask() {
        let (f, cfg) = frames();
        let p = build_pair(&f, 0.5, 1.0, &cfg, 1).unwrap();
        for seed in 0..5 {
            let c = random_crop_pair(&p, [20, 14, 30], seed).unwrap();
            assert_eq!(c.mask, c.target.observed_mask());
        }
    }

    #[test]
    fn crop_sampler_counts_match_brute_force() {
        let (f, cfg) = frames();
        let p = build_pair(&f, 0.5, 1.0, &cfg, 1).unwrap();
        let dims = [7, 9, 5];
        let sampler = CropSampler::new(&p.input, dims, 1).unwrap();
        let (lo, _) = p.input.bounds().unwrap();
        for k in 0..30 {
            let o = [lo.x + k % 11, lo.y + (k * 3) % 13, lo.z + (k * 7) % 9];
            let spec = CropSpec::new(VoxelCoord::new(o[0], o[1], o[2]), dims);
            let brute = p
                .input
                .iter()
                .filter(|(c, e)| e.d.abs() < 1.0 && spec.contains(c))
                .count();
            assert_eq!(sampler.count(o), brute);
        }
    }

    #[test]
    fn impossible_crop_is_sampling_error() {
        let mut s = SparseTsdf::default();
        s.insert(VoxelCoord::new(0, 0, 0), TsdfEntry::observed(0.1));
        let p = ScanPair::new(s.clone(), s);
        assert!(matches!(random_crop_pair(&p, [4, 4, 4], 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn crop_baseline_removes_boxes() {
        let (f, cfg) = frames();
        let target = fuse_subset(&f, &(0..f.len()).collect::<Vec<_>>(), &cfg).unwrap();
        let same = crops_baseline_pair_with(&target, 0..=0, 1).unwrap();
        assert_eq!(same.input, same.target);
        let mut shrunk = 0;
        for seed in 0..6 {
            let p = crops_baseline_pair(&target, seed).unwrap();
            shrunk += (p.input.len() < target.len()) as usize;
            for (c, e) in p.input.iter() {
                assert_eq!(target.get(c), Some(e));
            }
            assert_eq!(p.mask, target.observed_mask());
        }
        assert!(shrunk >= 3);
        assert!(crops_baseline_pair(&SparseTsdf::default(), 0).is_err());
    }
}
