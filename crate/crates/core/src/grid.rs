//! Sparse and dense voxel containers.
//!
//! A [`SparseTsdf`] maps integer voxel coordinates to a truncated signed
//! distance, a fusion weight and an observed flag. Distances are stored in
//! voxel units and are positive in free space, negative behind surfaces.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};

pub const DEFAULT_VOXEL_SIZE: f32 = 0.02;
pub const DEFAULT_TRUNCATION: f32 = 3.0;
pub const DEFAULT_CROP_DIMS: [usize; 3] = [64, 64, 128];

/// Integer voxel index, optionally tagged with a sample index inside a minibatch.
///
/// Ordering is batch-major, then lexicographic in `(x, y, z)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub batch: u16,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { batch: 0, x, y, z }
    }

    pub const fn with_batch(self, batch: u16) -> Self {
        Self { batch, ..self }
    }

    /// Componentwise floor division, used to map a child voxel to its parent.
    pub fn div_floor(self, factor: i32) -> Self {
        Self {
            batch: self.batch,
            x: self.x.div_euclid(factor),
            y: self.y.div_euclid(factor),
            z: self.z.div_euclid(factor),
        }
    }

    pub fn scale(self, factor: i32) -> Self {
        Self {
            batch: self.batch,
            x: self.x * factor,
            y: self.y * factor,
            z: self.z * factor,
        }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Self {
            batch: self.batch,
            x: self.x + dx,
            y: self.y + dy,
            z: self.z + dz,
        }
    }

    pub fn xyz(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for VoxelCoord {
    type Output = VoxelCoord;

    /// Adds spatial components; the batch index of `self` is kept.
    fn add(self, rhs: VoxelCoord) -> VoxelCoord {
        self.offset(rhs.x, rhs.y, rhs.z)
    }
}

impl Sub for VoxelCoord {
    type Output = VoxelCoord;

    fn sub(self, rhs: VoxelCoord) -> VoxelCoord {
        self.offset(-rhs.x, -rhs.y, -rhs.z)
    }
}

/// One stored TSDF sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsdfEntry {
    /// Signed distance in voxel units.
    pub d: f32,
    /// Fusion weight, always positive for stored entries.
    pub w: f32,
    pub observed: bool,
}

impl TsdfEntry {
    pub fn new(d: f32, w: f32, observed: bool) -> Self {
        Self { d, w, observed }
    }

    /// Entry as produced by a single clean observation.
    pub fn observed(d: f32) -> Self {
        Self { d, w: 1.0, observed: true }
    }
}

/// Sparse truncated signed distance field.
#[derive(Clone, Debug)]
pub struct SparseTsdf {
    pub voxel_size: f32,
    pub truncation: f32,
    entries: FxHashMap<VoxelCoord, TsdfEntry>,
}

impl Default for SparseTsdf {
    fn default() -> Self {
        Self::new(DEFAULT_VOXEL_SIZE, DEFAULT_TRUNCATION)
    }
}

impl PartialEq for SparseTsdf {
    fn eq(&self, other: &Self) -> bool {
        self.voxel_size == other.voxel_size
            && self.truncation == other.truncation
            && self.entries == other.entries
    }
}

impl SparseTsdf {
    pub fn new(voxel_size: f32, truncation: f32) -> Self {
        Self {
            voxel_size,
            truncation,
            entries: FxHashMap::default(),
        }
    }

    /// An empty field sharing voxel size and truncation with `self`.
    pub fn with_voxel_size(mut self, voxel_size: f32) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn empty_like(&self) -> Self {
        Self::new(self.voxel_size, self.truncation)
    }

    pub fn with_capacity(voxel_size: f32, truncation: f32, capacity: usize) -> Self {
        let mut entries = FxHashMap::default();
        entries.reserve(capacity);
        Self {
            voxel_size,
            truncation,
            entries,
        }
    }

    /// Inserts an entry, enforcing the container invariants: `d` is clamped to
    /// `[-τ, τ]` and entries at `d <= -τ` are never flagged observed.
    /// Entries with non-positive weight are ignored.
    pub fn insert(&mut self, coord: VoxelCoord, entry: TsdfEntry) {
        if !(entry.w > 0.0) {
            return;
        }
        let tau = self.truncation;
        let d = entry.d.clamp(-tau, tau);
        let observed = entry.observed && d > -tau;
        self.entries.insert(coord, TsdfEntry { d, w: entry.w, observed });
    }

    pub fn remove(&mut self, coord: &VoxelCoord) -> Option<TsdfEntry> {
        self.entries.remove(coord)
    }

    pub fn get(&self, coord: &VoxelCoord) -> Option<&TsdfEntry> {
        self.entries.get(coord)
    }

    pub fn contains(&self, coord: &VoxelCoord) -> bool {
        self.entries.contains_key(coord)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unordered iteration over entries.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelCoord, &TsdfEntry)> {
        self.entries.iter()
    }

    /// Entries sorted by coordinate. Use this wherever output must be deterministic.
    pub fn sorted_entries(&self) -> Vec<(VoxelCoord, TsdfEntry)> {
        let mut v: Vec<_> = self.entries.iter().map(|(c, e)| (*c, *e)).collect();
        v.sort_unstable_by_key(|(c, _)| *c);
        v
    }

    pub fn sorted_coords(&self) -> Vec<VoxelCoord> {
        let mut v: Vec<_> = self.entries.keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// Inclusive bounding box of the stored coordinates.
    pub fn bounds(&self) -> Option<(VoxelCoord, VoxelCoord)> {
        let mut it = self.entries.keys();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for c in it {
            lo.x = lo.x.min(c.x);
            lo.y = lo.y.min(c.y);
            lo.z = lo.z.min(c.z);
            hi.x = hi.x.max(c.x);
            hi.y = hi.y.max(c.y);
            hi.z = hi.z.max(c.z);
        }
        Some((lo, hi))
    }

    /// Coordinates where the loss applies: entries with `d > -τ`.
    pub fn observed_mask(&self) -> Vec<VoxelCoord> {
        let tau = self.truncation;
        let mut v: Vec<_> = self
            .entries
            .iter()
            .filter(|(_, e)| e.d > -tau)
            .map(|(c, _)| *c)
            .collect();
        v.sort_unstable();
        v
    }

    /// Number of entries with `|d| < 1`, i.e. voxels straddling a surface.
    pub fn surface_count(&self) -> usize {
        self.entries.values().filter(|e| e.d.abs() < 1.0).count()
    }

    /// Smallest bounding crop that covers every entry.
    pub fn bounding_crop(&self) -> Option<CropSpec> {
        let (lo, hi) = self.bounds()?;
        Some(CropSpec {
            origin: lo,
            dims: [
                (hi.x - lo.x + 1) as usize,
                (hi.y - lo.y + 1) as usize,
                (hi.z - lo.z + 1) as usize,
            ],
        })
    }

    /// Applies `f` to every stored coordinate.
    pub fn map_coords(&self, f: impl Fn(VoxelCoord) -> VoxelCoord) -> SparseTsdf {
        let mut out = SparseTsdf::with_capacity(self.voxel_size, self.truncation, self.len());
        for (c, e) in &self.entries {
            out.entries.insert(f(*c), *e);
        }
        out
    }

    pub(crate) fn entry_mut(&mut self, coord: VoxelCoord) -> &mut TsdfEntry {
        self.entries
            .entry(coord)
            .or_insert(TsdfEntry { d: 0.0, w: 0.0, observed: false })
    }
}

impl FromIterator<(VoxelCoord, TsdfEntry)> for SparseTsdf {
    fn from_iter<I: IntoIterator<Item = (VoxelCoord, TsdfEntry)>>(iter: I) -> Self {
        let mut s = SparseTsdf::default();
        for (c, e) in iter {
            s.insert(c, e);
        }
        s
    }
}

/// Axis-aligned box of voxels: `origin .. origin + dims`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub origin: VoxelCoord,
    pub dims: [usize; 3],
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            origin: VoxelCoord::default(),
            dims: DEFAULT_CROP_DIMS,
        }
    }
}

impl CropSpec {
    pub fn new(origin: VoxelCoord, dims: [usize; 3]) -> Self {
        Self { origin, dims }
    }

    pub fn at_origin(dims: [usize; 3]) -> Self {
        Self::new(VoxelCoord::default(), dims)
    }

    pub fn contains(&self, c: &VoxelCoord) -> bool {
        let o = self.origin;
        let inside = |v: i32, o: i32, d: usize| v >= o && ((v - o) as i64) < d as i64;
        inside(c.x, o.x, self.dims[0]) && inside(c.y, o.y, self.dims[1]) && inside(c.z, o.z, self.dims[2])
    }

    pub fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear x-fastest index of a contained coordinate.
    pub fn linear_index(&self, c: &VoxelCoord) -> Option<usize> {
        if !self.contains(c) {
            return None;
        }
        let lx = (c.x - self.origin.x) as usize;
        let ly = (c.y - self.origin.y) as usize;
        let lz = (c.z - self.origin.z) as usize;
        Some((lz * self.dims[1] + ly) * self.dims[0] + lx)
    }

    /// Iterates contained coordinates in x-fastest order.
    pub fn coords(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        let o = self.origin;
        let [dx, dy, dz] = self.dims;
        (0..dz).flat_map(move |z| {
            (0..dy).flat_map(move |y| {
                (0..dx).map(move |x| o.offset(x as i32, y as i32, z as i32))
            })
        })
    }
}

/// Dense voxel grid with planar channels and x-fastest spatial layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    pub origin: VoxelCoord,
    pub dims: [usize; 3],
    pub voxel_size: f32,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl DenseGrid {
    pub fn filled(origin: VoxelCoord, dims: [usize; 3], voxel_size: f32, channels: usize, fill: f32) -> Self {
        let n = dims.iter().product::<usize>() * channels;
        Self {
            origin,
            dims,
            voxel_size,
            channels,
            values: vec![fill; n],
        }
    }

    pub fn spec(&self) -> CropSpec {
        CropSpec::new(self.origin, self.dims)
    }

    pub fn index(&self, c: &VoxelCoord, channel: usize) -> Option<usize> {
        let spatial = self.spec().linear_index(c)?;
        Some(channel * self.dims.iter().product::<usize>() + spatial)
    }

    pub fn get(&self, c: &VoxelCoord) -> Option<f32> {
        self.index(c, 0).map(|i| self.values[i])
    }

    pub fn set(&mut self, c: &VoxelCoord, v: f32) -> bool {
        match self.index(c, 0) {
            Some(i) => {
                self.values[i] = v;
                true
            }
            None => false,
        }
    }
}

/// Writes the sparse distances into a dense box; cells without an entry get `fill`.
pub fn densify(s: &SparseTsdf, spec: &CropSpec, fill: f32) -> DenseGrid {
    let mut g = DenseGrid::filled(spec.origin, spec.dims, s.voxel_size, 1, fill);
    for (c, e) in s.iter() {
        if let Some(i) = spec.linear_index(c) {
            g.values[i] = e.d;
        }
    }
    g
}

/// Keeps every cell with `|value| < truncation` as an observed, unit-weight entry.
pub fn sparsify(g: &DenseGrid, truncation: f32) -> Result<SparseTsdf> {
    if g.channels != 1 {
        return Err(Error::Shape(format!(
            "sparsify expects a single-channel grid, got {} channels",
            g.channels
        )));
    }
    let spec = g.spec();
    let mut s = SparseTsdf::new(g.voxel_size, truncation);
    for (c, &v) in spec.coords().zip(g.values.iter()) {
        if v.abs() < truncation {
            s.insert(c, TsdfEntry::observed(v));
        }
    }
    Ok(s)
}

/// Entries inside `spec`, re-indexed so that `spec.origin` becomes the origin.
pub fn crop(s: &SparseTsdf, spec: &CropSpec) -> SparseTsdf {
    let mut out = s.empty_like();
    for (c, e) in s.iter() {
        if spec.contains(c) {
            out.entries.insert(*c - spec.origin, *e);
        }
    }
    out
}

/// Pools a field onto a grid coarser by `factor`.
///
/// The parent keeps the child distance of smallest magnitude (ties go to the
/// lexicographically smallest child), ORs the observed flags and sums the
/// weights. Distances stay in the original voxel units; the voxel size of the
/// result is multiplied by `factor`.
pub fn downsample_target(s: &SparseTsdf, factor: i32) -> Result<SparseTsdf> {
    if factor < 2 || factor.count_ones() != 1 {
        return Err(Error::Argument(format!(
            "downsample factor must be a power of two >= 2, got {factor}"
        )));
    }
    struct Acc {
        best: VoxelCoord,
        d: f32,
        w: f32,
        observed: bool,
    }
    let mut parents: FxHashMap<VoxelCoord, Acc> = FxHashMap::default();
    for (c, e) in s.iter() {
        let p = c.div_floor(factor);
        match parents.get_mut(&p) {
            None => {
                parents.insert(
                    p,
                    Acc {
                        best: *c,
                        d: e.d,
                        w: e.w,
                        observed: e.observed,
                    },
                );
            }
            Some(acc) => {
                let better = match e.d.abs().partial_cmp(&acc.d.abs()) {
                    Some(Ordering::Less) => true,
                    Some(Ordering::Equal) => c < &acc.best,
                    _ => false,
                };
                if better {
                    acc.best = *c;
                    acc.d = e.d;
                }
                acc.w += e.w;
                acc.observed |= e.observed;
            }
        }
    }
    let mut out = SparseTsdf::with_capacity(s.voxel_size * factor as f32, s.truncation, parents.len());
    for (p, acc) in parents {
        out.entries.insert(
            p,
            TsdfEntry {
                d: acc.d,
                w: acc.w,
                observed: acc.observed,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tsdf(seed: u64, n: usize, extent: i32) -> SparseTsdf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = SparseTsdf::new(0.02, 3.0);
        while s.len() < n {
            let c = VoxelCoord::new(
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
            );
            s.insert(c, TsdfEntry::observed(rng.gen_range(-2.99f32..2.99)));
        }
        s
    }

    #[test]
    fn densify_empty_is_all_fill() {
        let s = SparseTsdf::default();
        let g = densify(&s, &CropSpec::at_origin([3, 4, 5]), 3.0);
        assert_eq!(g.values.len(), 60);
        assert!(g.values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn densify_single_entry() {
        let mut s = SparseTsdf::default();
        s.insert(VoxelCoord::new(0, 0, 0), TsdfEntry::observed(-1.0));
        let g = densify(&s, &CropSpec::at_origin([2, 2, 2]), 3.0);
        assert_eq!(g.values.iter().filter(|&&v| v == -1.0).count(), 1);
        assert_eq!(g.values.iter().filter(|&&v| v == 3.0).count(), 7);
        assert_eq!(g.values[0], -1.0);
    }

    #[test]
    fn densify_sparsify_round_trip() {
        let s = random_tsdf(11, 20, 4);
        let spec = s.bounding_crop().unwrap();
        let back = sparsify(&densify(&s, &spec, 3.0), 3.0).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sparsify_drops_truncated_cells() {
        let mut g = DenseGrid::filled(VoxelCoord::default(), [3, 3, 3], 0.02, 1, 3.0);
        assert!(sparsify(&g, 3.0).unwrap().is_empty());
        g.set(&VoxelCoord::new(1, 2, 0), 0.5);
        let s = sparsify(&g, 3.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(&VoxelCoord::new(1, 2, 0)).unwrap().d, 0.5);
    }

    #[test]
    fn sparsify_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let origin = VoxelCoord::new(-2, 1, 3);
        let mut g = DenseGrid::filled(origin, [5, 4, 6], 0.02, 1, 0.0);
        for v in g.values.iter_mut() {
            *v = rng.gen_range(-5.0f32..5.0);
        }
        let s = sparsify(&g, 3.0).unwrap();
        let mut expected = Vec::new();
        for z in 0..6 {
            for y in 0..4 {
                for x in 0..5 {
                    let v = g.values[(z * 4 + y) * 5 + x];
                    if v.abs() < 3.0 {
                        expected.push((origin.offset(x as i32, y as i32, z as i32), v));
                    }
                }
            }
        }
        expected.sort_by_key(|(c, _)| *c);
        let got: Vec<_> = s.sorted_entries().into_iter().map(|(c, e)| (c, e.d)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn sparsify_rejects_multichannel() {
        let g = DenseGrid::filled(VoxelCoord::default(), [2, 2, 2], 0.02, 2, 0.0);
        assert!(matches!(sparsify(&g, 3.0), Err(Error::Shape(_))));
    }

    #[test]
    fn crop_whole_extent_shifts_origin() {
        let s = random_tsdf(3, 30, 5);
        let spec = s.bounding_crop().unwrap();
        let c = crop(&s, &spec);
        assert_eq!(c.len(), s.len());
        for (coord, e) in s.iter() {
            assert_eq!(c.get(&(*coord - spec.origin)), Some(e));
        }
    }

    #[test]
    fn crop_of_empty_region() {
        let s = random_tsdf(3, 30, 5);
        let c = crop(&s, &CropSpec::new(VoxelCoord::new(100, 100, 100), [4, 4, 4]));
        assert!(c.is_empty());
    }

    #[test]
    fn crop_matches_membership_test() {
        let s = random_tsdf(9, 200, 8);
        let spec = CropSpec::new(VoxelCoord::new(-3, -1, 0), [5, 7, 6]);
        let c = crop(&s, &spec);
        let expected: Vec<_> = s
            .sorted_entries()
            .into_iter()
            .filter(|(v, _)| {
                v.x >= -3 && v.x < 2 && v.y >= -1 && v.y < 6 && v.z >= 0 && v.z < 6
            })
            .map(|(v, e)| (v - spec.origin, e))
            .collect();
        let mut got = c.sorted_entries();
        got.sort_by_key(|(v, _)| *v);
        assert_eq!(got, expected);
    }

    #[test]
    fn downsample_picks_min_abs_child() {
        let mut s = SparseTsdf::default();
        let ds = [-1.0, 2.0, 0.25, -0.5, 1.5, -2.5, 0.75, -0.3];
        let mut i = 0;
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    s.insert(VoxelCoord::new(x, y, z), TsdfEntry::new(ds[i], 1.0, i == 5));
                    i += 1;
                }
            }
        }
        let p = downsample_target(&s, 2).unwrap();
        assert_eq!(p.len(), 1);
        let e = p.get(&VoxelCoord::new(0, 0, 0)).unwrap();
        assert_eq!(e.d, 0.25);
        assert_eq!(e.w, 8.0);
        assert!(e.observed);
    }

    #[test]
    fn downsample_single_entry() {
        let mut s = SparseTsdf::default();
        s.insert(VoxelCoord::new(5, 3, 7), TsdfEntry::observed(1.25));
        let p = downsample_target(&s, 2).unwrap();
        assert_eq!(p.get(&VoxelCoord::new(2, 1, 3)).unwrap().d, 1.25);
        assert_eq!(p.voxel_size, s.voxel_size * 2.0);
    }

    #[test]
    fn downsample_negative_coords_floor() {
        let mut s = SparseTsdf::default();
        s.insert(VoxelCoord::new(-1, -3, 0), TsdfEntry::observed(0.5));
        let p = downsample_target(&s, 2).unwrap();
        assert!(p.contains(&VoxelCoord::new(-1, -2, 0)));
    }

    #[test]
    fn downsample_tie_breaks_on_smallest_coord() {
        let mut s = SparseTsdf::default();
        s.insert(VoxelCoord::new(1, 0, 0), TsdfEntry::observed(0.5));
        s.insert(VoxelCoord::new(0, 1, 0), TsdfEntry::observed(-0.5));
        let p = downsample_target(&s, 2).unwrap();
        assert_eq!(p.get(&VoxelCoord::new(0, 0, 0)).unwrap().d, -0.5);
    }

    #[test]
    fn downsample_rejects_bad_factor() {
        let s = SparseTsdf::default();
        assert!(downsample_target(&s, 3).is_err());
        assert!(downsample_target(&s, 1).is_err());
    }

    #[test]
    fn downsample_by_four_composes() {
        let s = random_tsdf(21, 300, 12);
        let once = downsample_target(&s, 4).unwrap();
        let twice = downsample_target(&downsample_target(&s, 2).unwrap(), 2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn insert_enforces_invariants() {
        let mut s = SparseTsdf::new(0.02, 3.0);
        s.insert(VoxelCoord::new(0, 0, 0), TsdfEntry::new(-7.0, 1.0, true));
        s.insert(VoxelCoord::new(1, 0, 0), TsdfEntry::new(1.0, 0.0, true));
        let e = s.get(&VoxelCoord::new(0, 0, 0)).unwrap();
        assert_eq!(e.d, -3.0);
        assert!(!e.observed);
        assert!(!s.contains(&VoxelCoord::new(1, 0, 0)));
    }

    proptest! {
        #[test]
        fn crop_is_idempotent(seed in 0u64..1000, ox in -6i32..6, oy in -6i32..6, oz in -6i32..6,
                              dx in 1usize..8, dy in 1usize..8, dz in 1usize..8) {
            let s = random_tsdf(seed, 60, 8);
            let spec = CropSpec::new(VoxelCoord::new(ox, oy, oz), [dx, dy, dz]);
            let once = crop(&s, &spec);
            let twice = crop(&once, &CropSpec::at_origin([dx, dy, dz]));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn downsample_preserves_surface_presence(seed in 0u64..1000, factor in prop::sample::select(vec![2, 4, 8])) {
            let s = random_tsdf(seed, 80, 10);
            let p = downsample_target(&s, factor).unwrap();
            for (c, e) in s.iter() {
                if e.d.abs() < s.truncation {
                    let parent = p.get(&c.div_floor(factor)).unwrap();
                    prop_assert!(parent.d.abs() < s.truncation);
                }
            }
        }

        #[test]
        fn round_trip_within_truncation(seed in 0u64..1000) {
            let s = random_tsdf(seed, 25, 6);
            let spec = s.bounding_crop().unwrap();
            let back = sparsify(&densify(&s, &spec, s.truncation), s.truncation).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
