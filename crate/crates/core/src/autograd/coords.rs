//! Sorted coordinate sets and the convolution rulebooks built on them.

use std::sync::{Arc, OnceLock};

use rustc_hash::FxHashMap;

use crate::grid::VoxelCoord;

/// Input/output row pairs of a sparse convolution, grouped by kernel offset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    /// `pairs[o]` lists `(input row, output row)` for kernel offset `o`.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Index of a 3×3×3 neighbor offset with components in `-1..=1`.
pub fn subm_offset_index(dx: i32, dy: i32, dz: i32) -> usize {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize
}

/// Index of a child position inside its 2×2×2 parent cell.
pub fn child_offset_index(cx: i32, cy: i32, cz: i32) -> usize {
    (cx + 2 * cy + 4 * cz) as usize
}

fn child_offset(c: &VoxelCoord) -> usize {
    child_offset_index(c.x.rem_euclid(2), c.y.rem_euclid(2), c.z.rem_euclid(2))
}

/// Unique, sorted active coordinates of a sparse tensor.
///
/// Rulebooks are cached, so graphs that reuse a set share the lookups.
#[derive(Debug, Default)]
pub struct CoordSet {
    coords: Vec<VoxelCoord>,
    index: FxHashMap<VoxelCoord, u32>,
    subm: OnceLock<Arc<Rulebook>>,
    down: OnceLock<(Arc<CoordSet>, Arc<Rulebook>)>,
    up: OnceLock<(Arc<CoordSet>, Arc<Rulebook>)>,
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl CoordSet {
    pub fn new(mut coords: Vec<VoxelCoord>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        let index = coords.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
        Self {
            coords,
            index,
            ..Self::default()
        }
    }

    pub fn shared(coords: Vec<VoxelCoord>) -> Arc<Self> {
        Arc::new(Self::new(coords))
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn find(&self, c: &VoxelCoord) -> Option<usize> {
        self.index.get(c).map(|&i| i as usize)
    }

    /// Row of each of `self`'s coordinates in `other`.
    pub fn rows_in(&self, other: &CoordSet) -> Vec<Option<u32>> {
        self.coords.iter().map(|c| other.index.get(c).copied()).collect()
    }

    /// Submanifold 3×3×3 rules: output set equals input set.
    pub fn subm_rules(&self) -> Arc<Rulebook> {
        self.subm
            .get_or_init(|| {
                let mut pairs = vec![Vec::new(); 27];
                for (i, c) in self.coords.iter().enumerate() {
                    for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                if let Some(&j) = self.index.get(&c.offset(dx, dy, dz)) {
                                    pairs[subm_offset_index(dx, dy, dz)].push((j, i as u32));
                                }
                            }
                        }
                    }
                }
                Arc::new(Rulebook {
                    n_in: self.len(),
                    n_out: self.len(),
                    pairs,
                })
            })
            .clone()
    }

    /// Parent set at half resolution and the stride-2 2×2×2 rules into it.
    pub fn downsample(&self) -> (Arc<CoordSet>, Arc<Rulebook>) {
        self.down
            .get_or_init(|| {
                let parents = CoordSet::shared(self.coords.iter().map(|c| c.div_floor(2)).collect());
                let mut pairs = vec![Vec::new(); 8];
                for (i, c) in self.coords.iter().enumerate() {
                    let p = parents.find(&c.div_floor(2)).expect("parent exists") as u32;
                    pairs[child_offset(c)].push((i as u32, p));
                }
                let rules = Arc::new(Rulebook {
                    n_in: self.len(),
                    n_out: parents.len(),
                    pairs,
                });
                (parents, rules)
            })
            .clone()
    }

    /// All eight children of every coordinate and the transposed 2×2×2 rules
    /// that scatter each parent into them.
    pub fn upsample(&self) -> (Arc<CoordSet>, Arc<Rulebook>) {
        self.up
            .get_or_init(|| {
                let mut kids = Vec::with_capacity(self.len() * 8);
                for c in &self.coords {
                    let base = c.scale(2);
                    for cz in 0..2 {
                        for cy in 0..2 {
                            for cx in 0..2 {
                                kids.push(base.offset(cx, cy, cz));
                            }
                        }
                    }
                }
                let children = CoordSet::shared(kids);
                let mut pairs = vec![Vec::new(); 8];
                for (j, c) in children.coords.iter().enumerate() {
                    let p = self.find(&c.div_floor(2)).expect("parent exists") as u32;
                    pairs[child_offset(c)].push((p, j as u32));
                }
                let rules = Arc::new(Rulebook {
                    n_in: self.len(),
                    n_out: children.len(),
                    pairs,
                });
                (children, rules)
            })
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: i32, y: i32, z: i32) -> VoxelCoord {
        VoxelCoord::new(x, y, z)
    }

    #[test]
    fn set_is_sorted_and_unique() {
        let s = CoordSet::new(vec![c(1, 0, 0), c(0, 0, 0), c(1, 0, 0)]);
        assert_eq!(s.coords(), &[c(0, 0, 0), c(1, 0, 0)]);
        assert_eq!(s.find(&c(1, 0, 0)), Some(1));
        assert_eq!(s.find(&c(2, 0, 0)), None);
    }

    #[test]
    fn subm_rules_pair_neighbors() {
        let s = CoordSet::new(vec![c(0, 0, 0), c(1, 0, 0), c(5, 5, 5)]);
        let r = s.subm_rules();
        assert_eq!(r.pairs[subm_offset_index(0, 0, 0)].len(), 3);
        // Output 0 reads input 1 through offset +x, output 1 reads input 0 through -x.
        assert_eq!(r.pairs[subm_offset_index(1, 0, 0)], vec![(1, 0)]);
        assert_eq!(r.pairs[subm_offset_index(-1, 0, 0)], vec![(0, 1)]);
        assert_eq!(r.pair_count(), 5);
    }

    #[test]
    fn downsample_handles_negative_coords() {
        let s = CoordSet::new(vec![c(-1, -1, -1), c(-2, 0, 1), c(0, 0, 0), c(1, 1, 1)]);
        let (p, r) = s.downsample();
        assert_eq!(p.coords(), &[c(-1, -1, -1), c(-1, 0, 0), c(0, 0, 0)]);
        assert_eq!(r.pair_count(), 4);
        assert_eq!(r.pairs[7], vec![(1, 0), (3, 2)]);
    }

    #[test]
    fn upsample_covers_all_children() {
        let s = CoordSet::new(vec![c(0, 0, 0), c(-1, 2, 0)]);
        let (kids, r) = s.upsample();
        assert_eq!(kids.len(), 16);
        assert_eq!(r.pair_count(), 16);
        let (back, _) = kids.downsample();
        assert_eq!(back.coords(), s.coords());
    }
}
