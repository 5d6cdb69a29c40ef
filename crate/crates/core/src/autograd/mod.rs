//! Reverse-mode automatic differentiation for sparse and dense 3D tensors.

mod coords;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use coords::{child_offset_index, subm_offset_index, CoordSet, Rulebook};
pub use graph::{log_transform, BnLayout, BnMode, BnStats, ConvGeom, Graph, Var, BN_EPS};
pub use params::{Adam, ParamId, ParamStore, Parameter};
pub use scalar::{gemm, Scalar};
pub use tensor::{DenseTensor, SparseTensor};

#[cfg(test)]
mod tests;
