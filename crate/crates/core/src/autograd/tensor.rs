//! Sparse and dense tensor handles and the convolution ops built on them.

use std::sync::Arc;

use super::coords::CoordSet;
use super::graph::{BnLayout, BnMode, BnStats, ConvGeom, Graph, Var};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::grid::VoxelCoord;

/// Features on a sorted coordinate set, row-major `[row][channel]`.
#[derive(Clone, Debug)]
pub struct SparseTensor {
    pub coords: Arc<CoordSet>,
    pub feats: Var,
    pub channels: usize,
}

impl SparseTensor {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Planar `(batch, channel, z, y, x)` grid anchored at `origin`.
#[derive(Clone, Debug)]
pub struct DenseTensor {
    pub origin: [i32; 3],
    /// `[x, y, z]` extent.
    pub dims: [usize; 3],
    pub batch: usize,
    pub channels: usize,
    pub data: Var,
}

impl DenseTensor {
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    /// Offset of channel 0 of `c`, or `None` outside the grid.
    pub fn cell(&self, c: &VoxelCoord) -> Option<usize> {
        dense_cell(self.origin, self.dims, self.batch, self.channels, c)
    }
}

fn dense_cell(origin: [i32; 3], dims: [usize; 3], batch: usize, channels: usize, c: &VoxelCoord) -> Option<usize> {
    let rel = [c.x - origin[0], c.y - origin[1], c.z - origin[2]];
    if (c.batch as usize) >= batch || rel.iter().zip(&dims).any(|(&r, &d)| r < 0 || r as usize >= d) {
        return None;
    }
    let [x, y, z] = rel.map(|r| r as usize);
    let spatial: usize = dims.iter().product();
    Some(c.batch as usize * channels * spatial + (z * dims[1] + y) * dims[0] + x)
}

impl<T: Scalar> Graph<T> {
    /// Constant sparse tensor.
    pub fn sparse_input(&mut self, coords: Arc<CoordSet>, channels: usize, feats: Vec<T>) -> Result<SparseTensor> {
        if feats.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} features for {} coords × {channels} channels",
                feats.len(),
                coords.len()
            )));
        }
        Ok(SparseTensor {
            feats: self.input(feats),
            coords,
            channels,
        })
    }

    /// Submanifold 3×3×3 convolution; weights `[27][cin][cout]`.
    pub fn subm_conv3(&mut self, x: &SparseTensor, w: Var, bias: Option<Var>, cout: usize) -> Result<SparseTensor> {
        let rules = x.coords.subm_rules();
        let feats = self.sparse_conv(x.feats, x.channels, w, bias, cout, rules)?;
        Ok(SparseTensor {
            coords: x.coords.clone(),
            feats,
            channels: cout,
        })
    }

    /// Stride-2 2×2×2 convolution onto the parent set; weights `[8][cin][cout]`.
    pub fn down_conv2(&mut self, x: &SparseTensor, w: Var, bias: Option<Var>, cout: usize) -> Result<SparseTensor> {
        let (parents, rules) = x.coords.downsample();
        let feats = self.sparse_conv(x.feats, x.channels, w, bias, cout, rules)?;
        Ok(SparseTensor {
            coords: parents,
            feats,
            channels: cout,
        })
    }

    /// Transposed stride-2 convolution onto all eight children of every
    /// coordinate; weights `[8][cin][cout]`.
    pub fn up_conv2(&mut self, x: &SparseTensor, w: Var, bias: Option<Var>, cout: usize) -> Result<SparseTensor> {
        let (children, rules) = x.coords.upsample();
        let feats = self.sparse_conv(x.feats, x.channels, w, bias, cout, rules)?;
        Ok(SparseTensor {
            coords: children,
            feats,
            channels: cout,
        })
    }

    /// Zero-padded 3×3×3 dense convolution that keeps the grid extent;
    /// weights `[27][cin][cout]`.
    pub fn dense_conv3(&mut self, x: &DenseTensor, w: Var, bias: Option<Var>, cout: usize) -> Result<DenseTensor> {
        let geom = ConvGeom {
            batch: x.batch,
            cin: x.channels,
            cout,
            kernel: 3,
            pad: 1,
            dims: x.dims,
        };
        let data = self.dense_conv(x.data, w, bias, geom)?;
        Ok(DenseTensor {
            data,
            channels: cout,
            ..x.clone()
        })
    }

    /// Scatters a sparse tensor into a zero-filled dense box. Every
    /// coordinate must fall inside the box.
    pub fn to_dense(
        &mut self,
        x: &SparseTensor,
        origin: [i32; 3],
        dims: [usize; 3],
        batch: usize,
    ) -> Result<DenseTensor> {
        let cells = x
            .coords
            .coords()
            .iter()
            .map(|c| {
                dense_cell(origin, dims, batch, x.channels, c)
                    .ok_or_else(|| Error::Shape(format!("{c:?} lies outside the dense box")))
            })
            .collect::<Result<Vec<_>>>()?;
        let spatial: usize = dims.iter().product();
        let len = batch * x.channels * spatial;
        let data = self.scatter_dense(x.feats, x.channels, spatial, Arc::new(cells), len, T::zero())?;
        Ok(DenseTensor {
            origin,
            dims,
            batch,
            channels: x.channels,
            data,
        })
    }

    /// Reads a dense tensor at `coords`; coordinates outside the box read as zero.
    pub fn to_sparse(&mut self, x: &DenseTensor, coords: Arc<CoordSet>) -> Result<SparseTensor> {
        let cells: Vec<Option<usize>> = coords.coords().iter().map(|c| x.cell(c)).collect();
        let feats = self.gather_dense(x.data, x.channels, x.spatial(), Arc::new(cells))?;
        Ok(SparseTensor {
            coords,
            feats,
            channels: x.channels,
        })
    }

    /// Features of `x` at `coords`, zeros where `x` has no entry.
    pub fn gather_coords(&mut self, x: &SparseTensor, coords: Arc<CoordSet>) -> Result<SparseTensor> {
        let rows = Arc::new(coords.rows_in(&x.coords));
        let feats = self.gather_rows(x.feats, x.channels, rows)?;
        Ok(SparseTensor {
            coords,
            feats,
            channels: x.channels,
        })
    }

    /// `[dst | src]` on `dst`'s coordinates; `src` contributes zeros where it
    /// has no entry.
    pub fn skip_concat(&mut self, dst: &SparseTensor, src: &SparseTensor) -> Result<SparseTensor> {
        let moved = self.gather_coords(src, dst.coords.clone())?;
        self.concat_sparse(&[dst, &moved])
    }

    /// Channel concatenation of tensors on the same coordinate set.
    pub fn concat_sparse(&mut self, parts: &[&SparseTensor]) -> Result<SparseTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if parts
            .iter()
            .any(|p| !Arc::ptr_eq(&p.coords, &first.coords) && p.coords != first.coords)
        {
            return Err(Error::Shape("concat operands live on different coordinates".into()));
        }
        let pv: Vec<(Var, usize)> = parts.iter().map(|p| (p.feats, p.channels)).collect();
        let feats = self.concat(&pv, first.len())?;
        Ok(SparseTensor {
            coords: first.coords.clone(),
            feats,
            channels: pv.iter().map(|p| p.1).sum(),
        })
    }

    pub fn batch_norm_sparse(
        &mut self,
        x: &SparseTensor,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(SparseTensor, Option<BnStats>)> {
        let layout = BnLayout::Rows {
            n: x.len(),
            channels: x.channels,
        };
        let (feats, stats) = self.batch_norm(x.feats, layout, gamma, beta, mode)?;
        Ok((SparseTensor { feats, ..x.clone() }, stats))
    }

    pub fn batch_norm_dense(
        &mut self,
        x: &DenseTensor,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(DenseTensor, Option<BnStats>)> {
        let layout = BnLayout::Planar {
            batch: x.batch,
            channels: x.channels,
            spatial: x.spatial(),
        };
        let (data, stats) = self.batch_norm(x.data, layout, gamma, beta, mode)?;
        Ok((DenseTensor { data, ..x.clone() }, stats))
    }

    pub fn relu_sparse(&mut self, x: &SparseTensor) -> SparseTensor {
        SparseTensor {
            feats: self.relu(x.feats),
            ..x.clone()
        }
    }

    pub fn relu_dense(&mut self, x: &DenseTensor) -> DenseTensor {
        DenseTensor {
            data: self.relu(x.data),
            ..x.clone()
        }
    }
}
