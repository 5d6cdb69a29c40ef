//! Tape-based reverse-mode differentiation over flat buffers.

use std::sync::Arc;

use super::coords::Rulebook;
use super::params::{ParamId, ParamStore};
use super::scalar::{gemm, Scalar};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Memory layout of a batch-norm input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnLayout {
    /// `n` rows of `channels` interleaved features (sparse tensors).
    Rows { n: usize, channels: usize },
    /// `batch` blocks of `channels` planes of `spatial` values (dense tensors).
    Planar { batch: usize, channels: usize, spatial: usize },
}

impl BnLayout {
    pub fn channels(&self) -> usize {
        match *self {
            BnLayout::Rows { channels, .. } | BnLayout::Planar { channels, .. } => channels,
        }
    }

    fn len(&self) -> usize {
        match *self {
            BnLayout::Rows { n, channels } => n * channels,
            BnLayout::Planar { batch, channels, spatial } => batch * channels * spatial,
        }
    }

    fn per_channel(&self) -> usize {
        match *self {
            BnLayout::Rows { n, .. } => n,
            BnLayout::Planar { batch, spatial, .. } => batch * spatial,
        }
    }

    /// Calls `f(flat_index, channel)` for every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match *self {
            BnLayout::Rows { n, channels } => {
                for i in 0..n * channels {
                    f(i, i % channels);
                }
            }
            BnLayout::Planar { batch, channels, spatial } => {
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for i in base..base + spatial {
                            f(i, c);
                        }
                    }
                }
            }
        }
    }
}

/// Statistics to normalize with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Batch statistics; the op reports them for running-average updates.
    Train,
    /// Fixed running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Batch mean and unbiased variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

/// Geometry of a stride-1 dense 3D convolution on `(batch, channel, z, y, x)`
/// buffers with x fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub pad: usize,
    /// Input extent `[x, y, z]`.
    pub dims: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        self.dims.map(|d| (d + 2 * self.pad + 1).saturating_sub(self.kernel))
    }

    fn in_spatial(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.out_dims().iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    /// Visits `(col_row, s, input_index)` for every in-bounds tap of one
    /// batch element, where the column matrix is `[(tap·cin + ci)][S_out]`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let od = self.out_dims();
        let si = self.in_spatial();
        let k = self.kernel;
        let pad = self.pad as isize;
        let [dx, dy, dz] = self.dims.map(|d| d as isize);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let tap = kx + k * (ky + k * kz);
                    for ci in 0..self.cin {
                        let row = tap * self.cin + ci;
                        let mut s = 0;
                        for oz in 0..od[2] {
                            let iz = (oz + kz) as isize - pad;
                            for oy in 0..od[1] {
                                let iy = (oy + ky) as isize - pad;
                                let inside = iz >= 0 && iz < dz && iy >= 0 && iy < dy;
                                for ox in 0..od[0] {
                                    let ix = (ox + kx) as isize - pad;
                                    if inside && ix >= 0 && ix < dx {
                                        f(row, s, ci * si + ((iz * dy + iy) * dx + ix) as usize);
                                    }
                                    s += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let so = self.out_spatial();
        col.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|row, s, i| col[row * so + s] = input[i]);
    }

    /// Adjoint of [`Self::im2col`], accumulating into `input`.
    fn col2im<T: Scalar>(&self, col: &[T], input: &mut [T]) {
        let so = self.out_spatial();
        self.for_each_tap(|row, s, i| input[i] += col[row * so + s]);
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    SparseConv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        rules: Arc<Rulebook>,
        cin: usize,
        cout: usize,
    },
    DenseConv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GatherRows {
        x: Var,
        channels: usize,
        rows: Arc<Vec<Option<u32>>>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    /// Rows to a planar dense buffer; `cells[i]` is the offset of row `i`'s
    /// channel 0, channel `c` lives at `cells[i] + c·spatial`.
    ScatterDense {
        x: Var,
        channels: usize,
        spatial: usize,
        cells: Arc<Vec<usize>>,
    },
    GatherDense {
        x: Var,
        channels: usize,
        spatial: usize,
        cells: Arc<Vec<Option<usize>>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Add(Var, Var),
    L1Log {
        pred: Var,
        rows: Vec<usize>,
        targets: Vec<T>,
    },
    Bce {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    Dot {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<T> {
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations as they execute and differentiates a scalar result.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Signed log transform `sign(v)·ln(1 + |v|)`.
pub fn log_transform(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let value = p.value.iter().map(|&v| T::of(v as f64)).collect();
        self.push(value, Op::Param(id), p.trainable)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Sparse convolution driven by a rulebook; weights are `[offset][cin][cout]`.
    pub fn sparse_conv(
        &mut self,
        x: Var,
        cin: usize,
        w: Var,
        bias: Option<Var>,
        cout: usize,
        rules: Arc<Rulebook>,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != rules.n_in * cin {
            return Err(Error::Shape(format!(
                "sparse conv input has {} values, expected {}×{}",
                xv.len(),
                rules.n_in,
                cin
            )));
        }
        if self.value(w).len() != rules.kernel_volume() * cin * cout {
            return Err(Error::Shape("sparse conv weight shape mismatch".into()));
        }
        if bias.is_some_and(|b| self.value(b).len() != cout) {
            return Err(Error::Shape("sparse conv bias shape mismatch".into()));
        }
        let wv = self.value(w);
        let mut out = vec![T::zero(); rules.n_out * cout];
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let mut xin = Vec::new();
        let mut tmp = Vec::new();
        for (o, pairs) in rules.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let np = pairs.len();
            xin.clear();
            for &(i, _) in pairs {
                xin.extend_from_slice(&xv[i as usize * cin..][..cin]);
            }
            tmp.clear();
            tmp.resize(np * cout, T::zero());
            gemm(np, cin, cout, T::one(), &xin, false, &wv[o * cin * cout..], false, T::zero(), &mut tmp);
            for (p, &(_, j)) in pairs.iter().enumerate() {
                add_into(&mut out[j as usize * cout..][..cout], &tmp[p * cout..][..cout]);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::SparseConv {
                x,
                w,
                bias,
                rules,
                cin,
                cout,
            },
            rg,
        ))
    }

    /// Dense stride-1 convolution (cross-correlation); weights are
    /// `[tap][cin][cout]` with tap `kx + k·(ky + k·kz)`.
    pub fn dense_conv(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let si = geom.in_spatial();
        let so = geom.out_spatial();
        if self.value(x).len() != geom.batch * geom.cin * si {
            return Err(Error::Shape("dense conv input shape mismatch".into()));
        }
        if self.value(w).len() != geom.taps() * geom.cin * geom.cout {
            return Err(Error::Shape("dense conv weight shape mismatch".into()));
        }
        if bias.is_some_and(|b| self.value(b).len() != geom.cout) {
            return Err(Error::Shape("dense conv bias shape mismatch".into()));
        }
        let kc = geom.taps() * geom.cin;
        let mut col = vec![T::zero(); kc * so];
        let mut out = vec![T::zero(); geom.batch * geom.cout * so];
        let (xv, wv) = (self.value(x), self.value(w));
        for b in 0..geom.batch {
            geom.im2col(&xv[b * geom.cin * si..][..geom.cin * si], &mut col);
            let ob = &mut out[b * geom.cout * so..][..geom.cout * so];
            gemm(geom.cout, kc, so, T::one(), wv, true, &col, false, T::zero(), ob);
            if let Some(bias) = bias {
                let bv = self.value(bias);
                for (c, plane) in ob.chunks_exact_mut(so).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::DenseConv { x, w, bias, geom }, rg))
    }

    /// Row `i` of the result is row `rows[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, channels: usize, rows: Arc<Vec<Option<u32>>>) -> Result<Var> {
        let xv = self.value(x);
        let n_in = xv.len() / channels.max(1);
        if rows.iter().flatten().any(|&r| r as usize >= n_in) {
            return Err(Error::Index("gather_rows row out of range".into()));
        }
        let mut out = vec![T::zero(); rows.len() * channels];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                out[i * channels..][..channels].copy_from_slice(&xv[*r as usize * channels..][..channels]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows { x, channels, rows }, rg))
    }

    /// Channel-wise concatenation of row-major tensors with equal row counts.
    pub fn concat(&mut self, parts: &[(Var, usize)], rows: usize) -> Result<Var> {
        for &(v, c) in parts {
            if self.value(v).len() != rows * c {
                return Err(Error::Shape(format!(
                    "concat part has {} values, expected {rows}×{c}",
                    self.value(v).len()
                )));
            }
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for &(v, c) in parts {
            let pv = self.value(v);
            for r in 0..rows {
                out[r * total + off..][..c].copy_from_slice(&pv[r * c..][..c]);
            }
            off += c;
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                rows,
            },
            rg,
        ))
    }

    /// Writes rows into a planar buffer of `len` values filled with `fill`.
    pub fn scatter_dense(
        &mut self,
        x: Var,
        channels: usize,
        spatial: usize,
        cells: Arc<Vec<usize>>,
        len: usize,
        fill: T,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != cells.len() * channels {
            return Err(Error::Shape("scatter_dense row count mismatch".into()));
        }
        if cells.iter().any(|&c| c + (channels.max(1) - 1) * spatial >= len) {
            return Err(Error::Index("scatter_dense cell out of range".into()));
        }
        let mut out = vec![fill; len];
        for (i, &cell) in cells.iter().enumerate() {
            for c in 0..channels {
                out[cell + c * spatial] = xv[i * channels + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ScatterDense {
                x,
                channels,
                spatial,
                cells,
            },
            rg,
        ))
    }

    /// Reads rows out of a planar buffer; `None` cells read as zero.
    pub fn gather_dense(
        &mut self,
        x: Var,
        channels: usize,
        spatial: usize,
        cells: Arc<Vec<Option<usize>>>,
    ) -> Result<Var> {
        let xv = self.value(x);
        if cells.iter().flatten().any(|&c| c + (channels.max(1) - 1) * spatial >= xv.len()) {
            return Err(Error::Index("gather_dense cell out of range".into()));
        }
        let mut out = vec![T::zero(); cells.len() * channels];
        for (i, cell) in cells.iter().enumerate() {
            if let Some(cell) = cell {
                for c in 0..channels {
                    out[i * channels + c] = xv[cell + c * spatial];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherDense {
                x,
                channels,
                spatial,
                cells,
            },
            rg,
        ))
    }

    /// Batch normalization with per-channel affine `gamma`, `beta`.
    ///
    /// In training mode the returned statistics hold the batch mean and the
    /// unbiased batch variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        layout: BnLayout,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        let c = layout.channels();
        if self.value(x).len() != layout.len() {
            return Err(Error::Shape("batch norm input does not match layout".into()));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape("batch norm affine shape mismatch".into()));
        }
        let xv = self.value(x);
        let n = layout.per_channel();
        let eps = T::of(BN_EPS);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let nt = T::of(n.max(1) as f64);
                let mut mean = vec![T::zero(); c];
                layout.for_each(|i, ch| mean[ch] += xv[i]);
                mean.iter_mut().for_each(|m| *m = *m / nt);
                let mut var = vec![T::zero(); c];
                layout.for_each(|i, ch| {
                    let d = xv[i] - mean[ch];
                    var[ch] += d * d;
                });
                let unbiased = var
                    .iter()
                    .map(|v| (v.as_f64() / (n.max(2) - 1) as f64) as f32)
                    .collect();
                var.iter_mut().for_each(|v| *v = *v / nt);
                let stats = BnStats {
                    mean: mean.iter().map(|m| m.as_f64() as f32).collect(),
                    var: unbiased,
                    count: n,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batch norm running stats shape mismatch".into()));
                }
                (
                    mean.iter().map(|&m| T::of(m as f64)).collect(),
                    var.iter().map(|&v| T::of(v as f64)).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        layout.for_each(|i, ch| {
            xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
            out[i] = gv[ch] * xhat[i] + bv[ch];
        });
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let y = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((y, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape("add operands differ in size".into()));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    fn check_rows(&self, x: Var, rows: &[usize], targets: &[T]) -> Result<()> {
        if rows.len() != targets.len() {
            return Err(Error::Shape("loss rows and targets differ in length".into()));
        }
        let n = self.value(x).len();
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::Index("loss row out of range".into()));
        }
        Ok(())
    }

    /// Mean over `rows` of `|t(pred) − t(target)|` with the signed log
    /// transform `t`; zero when `rows` is empty.
    pub fn l1_log(&mut self, pred: Var, rows: Vec<usize>, targets: Vec<T>) -> Result<Var> {
        self.check_rows(pred, &rows, &targets)?;
        let pv = self.value(pred);
        let mut sum = 0.0;
        for (&r, &t) in rows.iter().zip(&targets) {
            sum += (log_transform(pv[r].as_f64()) - log_transform(t.as_f64())).abs();
        }
        let loss = if rows.is_empty() { 0.0 } else { sum / rows.len() as f64 };
        let rg = self.rg(&[pred]);
        Ok(self.push(vec![T::of(loss)], Op::L1Log { pred, rows, targets }, rg))
    }

    /// Mean binary cross-entropy of `rows` of `logits` against 0/1 targets;
    /// zero when `rows` is empty.
    pub fn bce_logits(&mut self, logits: Var, rows: Vec<usize>, targets: Vec<T>) -> Result<Var> {
        self.check_rows(logits, &rows, &targets)?;
        let zv = self.value(logits);
        let mut sum = T::zero();
        for (&r, &y) in rows.iter().zip(&targets) {
            let z = zv[r];
            sum += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        }
        let loss = if rows.is_empty() { T::zero() } else { sum / T::of(rows.len() as f64) };
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![loss], Op::Bce { logits, rows, targets }, rg))
    }

    /// `Σ weight·term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape("weighted_sum terms must be scalars".into()));
            }
            total += w * self.scalar(v);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(vec![total], Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Scalar `Σ x_i·w_i` against a constant vector.
    pub fn dot(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(Error::Shape("dot operands differ in size".into()));
        }
        let s = self.value(x).iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s], Op::Dot { x, w }, rg))
    }

    /// Reverse pass from a scalar node. Gradients of earlier calls are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, node has {} values",
                self.value(loss).len()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(gout) = node.grad.as_deref() else {
                continue;
            };
            backward_node(before, node, gout);
        }
        Ok(())
    }

    /// Adds gradients of parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for n in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&n.op, &n.grad) {
                let g32: Vec<f32> = g.iter().map(|v| v.as_f64() as f32).collect();
                store.accumulate_grad(*id, &g32);
            }
        }
    }
}

fn grad_slot<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Vec<T>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

fn backward_node<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, gout: &[T]) {
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::SparseConv {
            x,
            w,
            bias,
            rules,
            cin,
            cout,
        } => {
            let (cin, cout) = (*cin, *cout);
            if let Some(gb) = bias.and_then(|b| grad_slot(nodes, b)) {
                for row in gout.chunks_exact(cout) {
                    add_into(gb, row);
                }
            }
            let mut gx = nodes[x.0].requires_grad.then(|| vec![T::zero(); nodes[x.0].value.len()]);
            let mut gw = nodes[w.0].requires_grad.then(|| vec![T::zero(); nodes[w.0].value.len()]);
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (mut g, mut xin, mut tmp) = (Vec::new(), Vec::new(), Vec::new());
            for (o, pairs) in rules.pairs.iter().enumerate() {
                if pairs.is_empty() {
                    continue;
                }
                let np = pairs.len();
                g.clear();
                for &(_, j) in pairs {
                    g.extend_from_slice(&gout[j as usize * cout..][..cout]);
                }
                if let Some(gx) = gx.as_mut() {
                    tmp.clear();
                    tmp.resize(np * cin, T::zero());
                    gemm(np, cout, cin, T::one(), &g, false, &wv[o * cin * cout..], true, T::zero(), &mut tmp);
                    for (p, &(i, _)) in pairs.iter().enumerate() {
                        add_into(&mut gx[i as usize * cin..][..cin], &tmp[p * cin..][..cin]);
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    xin.clear();
                    for &(i, _) in pairs {
                        xin.extend_from_slice(&xv[i as usize * cin..][..cin]);
                    }
                    let dst = &mut gw[o * cin * cout..][..cin * cout];
                    gemm(cin, np, cout, T::one(), &xin, true, &g, false, T::one(), dst);
                }
            }
            if let Some(gx) = gx {
                add_into(grad_slot(nodes, *x).expect("requires grad"), &gx);
            }
            if let Some(gw) = gw {
                add_into(grad_slot(nodes, *w).expect("requires grad"), &gw);
            }
        }
        Op::DenseConv { x, w, bias, geom } => {
            let so = geom.out_spatial();
            let si = geom.in_spatial();
            let kc = geom.taps() * geom.cin;
            if let Some(gb) = bias.and_then(|b| grad_slot(nodes, b)) {
                for bi in 0..geom.batch {
                    for (c, g) in gb.iter_mut().enumerate() {
                        *g += gout[(bi * geom.cout + c) * so..][..so].iter().copied().sum::<T>();
                    }
                }
            }
            let mut gx = nodes[x.0].requires_grad.then(|| vec![T::zero(); nodes[x.0].value.len()]);
            let mut gw = nodes[w.0].requires_grad.then(|| vec![T::zero(); nodes[w.0].value.len()]);
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let mut col = vec![T::zero(); kc * so];
            for b in 0..geom.batch {
                let go = &gout[b * geom.cout * so..][..geom.cout * so];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&xv[b * geom.cin * si..][..geom.cin * si], &mut col);
                    gemm(kc, so, geom.cout, T::one(), &col, false, go, true, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(kc, geom.cout, so, T::one(), wv, false, go, false, T::zero(), &mut col);
                    geom.col2im(&col, &mut gx[b * geom.cin * si..][..geom.cin * si]);
                }
            }
            if let Some(gx) = gx {
                add_into(grad_slot(nodes, *x).expect("requires grad"), &gx);
            }
            if let Some(gw) = gw {
                add_into(grad_slot(nodes, *w).expect("requires grad"), &gw);
            }
        }
        Op::GatherRows { x, channels, rows } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let c = *channels;
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        add_into(&mut gx[*r as usize * c..][..c], &gout[i * c..][..c]);
                    }
                }
            }
        }
        Op::Concat { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut off = 0;
            for &(v, c) in parts {
                if let Some(gv) = grad_slot(nodes, v) {
                    for r in 0..*rows {
                        add_into(&mut gv[r * c..][..c], &gout[r * total + off..][..c]);
                    }
                }
                off += c;
            }
        }
        Op::ScatterDense {
            x,
            channels,
            spatial,
            cells,
        } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for (i, &cell) in cells.iter().enumerate() {
                    for c in 0..*channels {
                        gx[i * channels + c] += gout[cell + c * spatial];
                    }
                }
            }
        }
        Op::GatherDense {
            x,
            channels,
            spatial,
            cells,
        } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for (i, cell) in cells.iter().enumerate() {
                    if let Some(cell) = cell {
                        for c in 0..*channels {
                            gx[cell + c * spatial] += gout[i * channels + c];
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            layout,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = layout.channels();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            layout.for_each(|i, ch| {
                sum_g[ch] += gout[i];
                sum_gx[ch] += gout[i] * xhat[i];
            });
            if let Some(gb) = grad_slot(nodes, *beta) {
                add_into(gb, &sum_g);
            }
            if let Some(gg) = grad_slot(nodes, *gamma) {
                add_into(gg, &sum_gx);
            }
            if nodes[x.0].requires_grad {
                let gv = nodes[gamma.0].value.clone();
                let gx = grad_slot(nodes, *x).expect("requires grad");
                if *batch_stats {
                    let n = T::of(layout.per_channel().max(1) as f64);
                    layout.for_each(|i, ch| {
                        let s = gv[ch] * inv_std[ch] / n;
                        gx[i] += s * (n * gout[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                    });
                } else {
                    layout.for_each(|i, ch| gx[i] += gv[ch] * inv_std[ch] * gout[i]);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for (i, (&y, &g)) in node.value.iter().zip(gout).enumerate() {
                    if y > T::zero() {
                        gx[i] += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for (i, (&y, &g)) in node.value.iter().zip(gout).enumerate() {
                    gx[i] += g * y * (T::one() - y);
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.clone();
                let gx = grad_slot(nodes, *x).expect("requires grad");
                for (i, &g) in gout.iter().enumerate() {
                    if xv[i] > *lo && xv[i] < *hi {
                        gx[i] += g;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = grad_slot(nodes, *v) {
                    add_into(gv, gout);
                }
            }
        }
        Op::L1Log { pred, rows, targets } => {
            if nodes[pred.0].requires_grad && !rows.is_empty() {
                let scale = gout[0].as_f64() / rows.len() as f64;
                let pv: Vec<f64> = rows.iter().map(|&r| nodes[pred.0].value[r].as_f64()).collect();
                let gp = grad_slot(nodes, *pred).expect("requires grad");
                for ((&r, &t), &p) in rows.iter().zip(targets).zip(&pv) {
                    let d = log_transform(p) - log_transform(t.as_f64());
                    if d != 0.0 {
                        gp[r] += T::of(scale * d.signum() / (1.0 + p.abs()));
                    }
                }
            }
        }
        Op::Bce { logits, rows, targets } => {
            if nodes[logits.0].requires_grad && !rows.is_empty() {
                let scale = gout[0] / T::of(rows.len() as f64);
                let zv: Vec<T> = rows.iter().map(|&r| nodes[logits.0].value[r]).collect();
                let gz = grad_slot(nodes, *logits).expect("requires grad");
                for ((&r, &y), &z) in rows.iter().zip(targets).zip(&zv) {
                    gz[r] += scale * (sigmoid(z) - y);
                }
            }
        }
        Op::WeightedSum(terms) => {
            for &(v, w) in terms {
                if let Some(gv) = grad_slot(nodes, v) {
                    gv[0] += w * gout[0];
                }
            }
        }
        Op::Dot { x, w } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                for (g, &wi) in gx.iter_mut().zip(w) {
                    *g += gout[0] * wi;
                }
            }
        }
    }
}
