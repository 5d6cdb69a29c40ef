//! Hierarchical sparse generative completion network.
//!
//! A sparse encoder compresses the input by 2 per stage. The deepest features
//! are densified and decoded into coarse occupancy `O_0` and distance `S_0`.
//! Each hierarchy step keeps the coordinates whose occupancy passes the gate,
//! attaches encoder skip features, upsamples by 2 and predicts the next
//! `O_k`, `S_k`. A final sparse block refines distances at full resolution.
//!
//! Prediction level `k` lives at stride `2^(L-k)`, so levels `0..=L` reach
//! full resolution at `k = L`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, BnStats, CoordSet, DenseTensor, Graph, ParamId, ParamStore, SparseTensor, Var};
use crate::error::{Error, Result};
use crate::grid::{SparseTsdf, TsdfEntry, VoxelCoord, DEFAULT_TRUNCATION};

pub const BN_MOMENTUM: f32 = 0.1;

/// What the network sees of the input scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputRepr {
    /// Voxels with `|d| < τ`, feature `d`.
    #[default]
    Tsdf,
    /// Voxels with `|d| < τ`, feature 1.
    Occupancy,
    /// Surface voxels `|d| < 1`, feature 1.
    PointCloud,
}

/// What the final head predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputRepr {
    #[default]
    Tsdf,
    /// Surface occupancy logits.
    Occupancy,
}

impl fmt::Display for InputRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputRepr::Tsdf => "tsdf",
            InputRepr::Occupancy => "occupancy",
            InputRepr::PointCloud => "pointcloud",
        })
    }
}

impl FromStr for InputRepr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsdf" => Ok(InputRepr::Tsdf),
            "occupancy" => Ok(InputRepr::Occupancy),
            "pointcloud" | "pointcloud-occupancy" => Ok(InputRepr::PointCloud),
            _ => Err(Error::Config(format!("unknown input representation {s:?}"))),
        }
    }
}

impl fmt::Display for OutputRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputRepr::Tsdf => "tsdf",
            OutputRepr::Occupancy => "occupancy",
        })
    }
}

impl FromStr for OutputRepr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsdf" => Ok(OutputRepr::Tsdf),
            "occupancy" => Ok(OutputRepr::Occupancy),
            _ => Err(Error::Config(format!("unknown output representation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of encoder stages `L`.
    pub levels: usize,
    pub base_width: usize,
    pub input_repr: InputRepr,
    pub output_repr: OutputRepr,
    /// Voxel units.
    pub truncation: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_width: 16,
            input_repr: InputRepr::Tsdf,
            output_repr: OutputRepr::Tsdf,
            truncation: DEFAULT_TRUNCATION,
        }
    }
}

impl ModelConfig {
    pub fn test_scale() -> Self {
        Self {
            base_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 || self.base_width == 0 || self.truncation <= 0.0 {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        Ok(())
    }

    /// Encoder width at stage `i` (1-based).
    pub fn stage_width(&self, i: usize) -> usize {
        self.base_width << (i.max(1) - 1)
    }

    /// Stride of prediction level `k`.
    pub fn level_stride(&self, k: usize) -> i32 {
        1 << (self.levels - k)
    }

    /// Prediction levels computed when `active` levels are switched on. The
    /// last switch brings in the full-resolution level and the refinement.
    pub fn predicted_levels(&self, active: usize) -> usize {
        if active >= self.levels {
            self.levels + 1
        } else {
            active.max(1)
        }
    }

    /// Serialized as `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "levels={}\nbase_width={}\ninput_repr={}\noutput_repr={}\ntruncation={}\n",
            self.levels, self.base_width, self.input_repr, self.output_repr, self.truncation
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
            let bad = || Error::Format(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "levels" => cfg.levels = v.trim().parse().map_err(|_| bad())?,
                "base_width" => cfg.base_width = v.trim().parse().map_err(|_| bad())?,
                "truncation" => cfg.truncation = v.trim().parse().map_err(|_| bad())?,
                "input_repr" => cfg.input_repr = v.trim().parse()?,
                "output_repr" => cfg.output_repr = v.trim().parse()?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gate rule: `sigmoid(z) > 0.5`, strict.
pub fn gate_passes(logit: f32) -> bool {
    1.0 / (1.0 + (-(logit as f64)).exp()) > 0.5
}

/// Indices of logits passing the gate.
pub fn gate_indices(logits: &[f32]) -> Vec<usize> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, &z)| gate_passes(z))
        .map(|(i, _)| i)
        .collect()
}

/// Network input assembled from one or more scans, one batch index each.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub coords: Arc<CoordSet>,
    pub feats: Vec<f32>,
    pub batch: usize,
}

impl ModelInput {
    pub fn new(scans: &[&SparseTsdf], repr: InputRepr) -> Result<Self> {
        if scans.len() > u16::MAX as usize {
            return Err(Error::Argument("batch too large".into()));
        }
        let mut rows: Vec<(VoxelCoord, f32)> = Vec::new();
        for (b, s) in scans.iter().enumerate() {
            for (c, e) in s.iter() {
                let keep = match repr {
                    InputRepr::Tsdf | InputRepr::Occupancy => e.d.abs() < s.truncation,
                    InputRepr::PointCloud => e.d.abs() < 1.0,
                };
                if keep {
                    let f = if repr == InputRepr::Tsdf { e.d } else { 1.0 };
                    rows.push((c.with_batch(b as u16), f));
                }
            }
        }
        rows.sort_unstable_by_key(|r| r.0);
        let coords = CoordSet::shared(rows.iter().map(|r| r.0).collect());
        Ok(Self {
            coords,
            feats: rows.into_iter().map(|r| r.1).collect(),
            batch: scans.len(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// A level's tensor: dense at level 0, sparse above.
#[derive(Clone, Debug)]
pub enum LevelTensor {
    Dense(DenseTensor),
    Sparse(SparseTensor),
}

impl LevelTensor {
    pub fn var(&self) -> Var {
        match self {
            LevelTensor::Dense(d) => d.data,
            LevelTensor::Sparse(s) => s.feats,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            LevelTensor::Dense(d) => d.channels,
            LevelTensor::Sparse(s) => s.channels,
        }
    }

    /// Index into the value buffer of a single-channel tensor at `c`.
    pub fn value_index(&self, c: &VoxelCoord) -> Option<usize> {
        match self {
            LevelTensor::Dense(d) => d.cell(c),
            LevelTensor::Sparse(s) => s.coords.find(c),
        }
    }

    /// Coordinates covered, in value order.
    pub fn coords(&self) -> Vec<VoxelCoord> {
        match self {
            LevelTensor::Dense(d) => {
                let mut v = Vec::with_capacity(d.batch * d.spatial());
                for b in 0..d.batch {
                    for z in 0..d.dims[2] {
                        for y in 0..d.dims[1] {
                            for x in 0..d.dims[0] {
                                v.push(
                                    VoxelCoord::new(
                                        d.origin[0] + x as i32,
                                        d.origin[1] + y as i32,
                                        d.origin[2] + z as i32,
                                    )
                                    .with_batch(b as u16),
                                );
                            }
                        }
                    }
                }
                v
            }
            LevelTensor::Sparse(s) => s.coords.coords().to_vec(),
        }
    }
}

/// Predictions of one hierarchy level.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: usize,
    pub stride: i32,
    pub features: LevelTensor,
    pub occupancy: LevelTensor,
    pub sdf: LevelTensor,
    /// Coordinates passed on to the next level (or to refinement).
    pub gated: Arc<CoordSet>,
}

#[derive(Clone, Debug)]
pub struct HierarchyOutput {
    pub levels: Vec<LevelOutput>,
    /// Full-resolution distances (or occupancy logits), present once every
    /// level is active.
    pub final_values: Option<SparseTensor>,
    pub active_levels: usize,
    pub batch: usize,
}

/// Extra coordinates unioned into the gate while training, per level.
#[derive(Clone, Debug, Default)]
pub struct GateAugment {
    pub levels: Vec<Vec<VoxelCoord>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Subm,
    Down,
    Up,
    Dense,
}

#[derive(Clone, Debug)]
struct ConvBn {
    kind: ConvKind,
    cout: usize,
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Step {
    convs: Vec<ConvBn>,
    occ: Head,
    sdf: Head,
}

/// Network parameters and layer layout.
#[derive(Clone, Debug)]
pub struct SgnnModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Vec<Vec<ConvBn>>,
    coarse: Vec<ConvBn>,
    coarse_occ: Head,
    coarse_sdf: Head,
    steps: Vec<Step>,
    refine: Vec<ConvBn>,
    refine_out: Head,
    training: bool,
}

fn taps(kind: ConvKind) -> usize {
    match kind {
        ConvKind::Subm | ConvKind::Dense => 27,
        ConvKind::Down | ConvKind::Up => 8,
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv_bn(&mut self, name: &str, kind: ConvKind, cin: usize, cout: usize) -> ConvBn {
        let k = taps(kind);
        let w = self
            .store
            .add_uniform(&format!("{name}.w"), &[k, cin, cout], k * cin, &mut self.rng);
        ConvBn {
            kind,
            cout,
            w,
            gamma: self.store.add(&format!("{name}.bn.gamma"), &[cout], vec![1.0; cout]),
            beta: self.store.add(&format!("{name}.bn.beta"), &[cout], vec![0.0; cout]),
            mean: self
                .store
                .add_buffer(&format!("{name}.bn.running_mean"), &[cout], vec![0.0; cout]),
            var: self
                .store
                .add_buffer(&format!("{name}.bn.running_var"), &[cout], vec![1.0; cout]),
        }
    }

    fn head(&mut self, name: &str, taps: usize, cin: usize) -> Head {
        Head {
            w: self
                .store
                .add_uniform(&format!("{name}.w"), &[taps, cin, 1], taps * cin, &mut self.rng),
            b: self.store.add(&format!("{name}.b"), &[1], vec![0.0]),
        }
    }
}

impl SgnnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut encoder = Vec::with_capacity(l);
        let mut cin = 1;
        for i in 1..=l {
            let c = config.stage_width(i);
            encoder.push(vec![
                b.conv_bn(&format!("enc{i}.conv1"), ConvKind::Subm, cin, c),
                b.conv_bn(&format!("enc{i}.conv2"), ConvKind::Subm, c, c),
                b.conv_bn(&format!("enc{i}.down"), ConvKind::Down, c, c),
            ]);
            cin = c;
        }
        let cl = config.stage_width(l);
        let coarse = vec![
            b.conv_bn("coarse.conv1", ConvKind::Dense, cl, cl),
            b.conv_bn("coarse.conv2", ConvKind::Dense, cl, cl),
        ];
        let coarse_occ = b.head("coarse.occ", 1, cl);
        let coarse_sdf = b.head("coarse.sdf", 1, cl);
        let mut steps = Vec::with_capacity(l);
        let mut fw = cl;
        for s in 0..l {
            let skip = config.stage_width(l - s);
            let d = config.stage_width((l - s).max(1));
            let name = format!("level{}", s + 1);
            steps.push(Step {
                convs: vec![
                    b.conv_bn(&format!("{name}.conv1"), ConvKind::Subm, fw + 2 + skip, d),
                    b.conv_bn(&format!("{name}.conv2"), ConvKind::Subm, d, d),
                    b.conv_bn(&format!("{name}.up"), ConvKind::Up, d, d),
                    b.conv_bn(&format!("{name}.conv3"), ConvKind::Subm, d, d),
                ],
                occ: b.head(&format!("{name}.occ"), 27, d),
                sdf: b.head(&format!("{name}.sdf"), 27, d),
            });
            fw = d;
        }
        let c1 = config.stage_width(1);
        let refine = vec![
            b.conv_bn("refine.conv1", ConvKind::Subm, fw + 2 + c1, c1),
            b.conv_bn("refine.conv2", ConvKind::Subm, c1, c1),
        ];
        let refine_out = b.head("refine.out", 27, c1);
        Ok(Self {
            config,
            params,
            encoder,
            coarse,
            coarse_occ,
            coarse_sdf,
            steps,
            refine,
            refine_out,
            training: true,
        })
    }

    pub fn train_mode(&mut self) {
        self.training = true;
    }

    pub fn eval_mode(&mut self) {
        self.training = false;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// 1-based schedule group of a parameter: group `k` starts training at
    /// iteration `(k-1)·N_level`.
    pub fn param_group(&self, name: &str) -> usize {
        let l = self.config.levels;
        if let Some(rest) = name.strip_prefix("level") {
            let j: usize = rest
                .split('.')
                .next()
                .and_then(|n| n.parse().ok())
                .unwrap_or(1);
            (j + 1).min(l)
        } else if name.starts_with("refine") {
            l
        } else {
            1
        }
    }

    fn bn_update(&mut self, layer: &ConvBn, stats: Option<BnStats>) {
        if let Some(s) = stats.filter(|s| s.count > 1) {
            self.params.update_running(layer.mean, &s.mean, BN_MOMENTUM);
            self.params.update_running(layer.var, &s.var, BN_MOMENTUM);
        }
    }

    fn bn_mode(&self, layer: &ConvBn) -> BnMode<'_> {
        if self.training {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: &self.params.get(layer.mean).value,
                var: &self.params.get(layer.var).value,
            }
        }
    }

    fn sparse_block(&mut self, g: &mut Graph<f32>, x: &SparseTensor, layer: &ConvBn) -> Result<SparseTensor> {
        let w = g.param(&self.params, layer.w);
        let y = match layer.kind {
            ConvKind::Subm => g.subm_conv3(x, w, None, layer.cout)?,
            ConvKind::Down => g.down_conv2(x, w, None, layer.cout)?,
            ConvKind::Up => g.up_conv2(x, w, None, layer.cout)?,
            ConvKind::Dense => return Err(Error::Shape("dense layer on sparse tensor".into())),
        };
        let gamma = g.param(&self.params, layer.gamma);
        let beta = g.param(&self.params, layer.beta);
        let (y, stats) = g.batch_norm_sparse(&y, gamma, beta, self.bn_mode(layer))?;
        self.bn_update(layer, stats);
        Ok(g.relu_sparse(&y))
    }

    fn dense_block(&mut self, g: &mut Graph<f32>, x: &DenseTensor, layer: &ConvBn) -> Result<DenseTensor> {
        let w = g.param(&self.params, layer.w);
        let y = g.dense_conv3(x, w, None, layer.cout)?;
        let gamma = g.param(&self.params, layer.gamma);
        let beta = g.param(&self.params, layer.beta);
        let (y, stats) = g.batch_norm_dense(&y, gamma, beta, self.bn_mode(layer))?;
        self.bn_update(layer, stats);
        Ok(g.relu_dense(&y))
    }

    fn sparse_head(&self, g: &mut Graph<f32>, x: &SparseTensor, head: &Head) -> Result<SparseTensor> {
        let w = g.param(&self.params, head.w);
        let b = g.param(&self.params, head.b);
        g.subm_conv3(x, w, Some(b), 1)
    }

    fn dense_head(&self, g: &mut Graph<f32>, x: &DenseTensor, head: &Head) -> Result<DenseTensor> {
        let w = g.param(&self.params, head.w);
        let b = g.param(&self.params, head.b);
        let geom = crate::autograd::ConvGeom {
            batch: x.batch,
            cin: x.channels,
            cout: 1,
            kernel: 1,
            pad: 0,
            dims: x.dims,
        };
        let data = g.dense_conv(x.data, w, Some(b), geom)?;
        Ok(DenseTensor {
            data,
            channels: 1,
            ..x.clone()
        })
    }

    /// Encoder feature maps at strides `2^0..=2^L`. Entry 0 holds the
    /// full-resolution features of the first stage before it downsamples.
    pub fn encode(&mut self, g: &mut Graph<f32>, input: &ModelInput) -> Result<Vec<SparseTensor>> {
        if input.is_empty() {
            return Err(Error::Inference("input scan has no voxels to encode".into()));
        }
        let mut x = g.sparse_input(input.coords.clone(), 1, input.feats.clone())?;
        let mut stages = Vec::with_capacity(self.config.levels + 1);
        for i in 0..self.config.levels {
            for j in 0..3 {
                let layer = self.encoder[i][j].clone();
                x = self.sparse_block(g, &x, &layer)?;
                if i == 0 && j == 1 {
                    stages.push(x.clone());
                }
            }
            stages.push(x.clone());
        }
        Ok(stages)
    }

    /// Dense `F_0`, `O_0`, `S_0` over the deepest features' extent padded by one.
    pub fn coarse_predict(
        &mut self,
        g: &mut Graph<f32>,
        deepest: &SparseTensor,
        batch: usize,
    ) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
        let coords = deepest.coords.coords();
        let first = coords
            .first()
            .ok_or_else(|| Error::Inference("encoder produced no coordinates".into()))?;
        let mut lo = first.xyz();
        let mut hi = lo;
        for c in coords {
            for (i, v) in c.xyz().into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        let origin = lo.map(|v| v - 1);
        let dims = [0, 1, 2].map(|i| (hi[i] - lo[i] + 3) as usize);
        let mut f = g.to_dense(deepest, origin, dims, batch)?;
        for j in 0..self.coarse.len() {
            let layer = self.coarse[j].clone();
            f = self.dense_block(g, &f, &layer)?;
        }
        let occ = self.dense_head(g, &f, &self.coarse_occ.clone())?;
        let sdf = self.dense_head(g, &f, &self.coarse_sdf.clone())?;
        Ok((f, occ, sdf))
    }

    /// Gated coordinates of a level: logits passing the gate plus, in
    /// training, the augmentation coordinates that lie in the level's domain.
    pub fn gate_coords(g: &Graph<f32>, occ: &LevelTensor, augment: Option<&[VoxelCoord]>) -> Arc<CoordSet> {
        let coords = occ.coords();
        let logits = g.value(occ.var());
        let mut keep: Vec<VoxelCoord> = gate_indices(logits).into_iter().map(|i| coords[i]).collect();
        if let Some(extra) = augment {
            keep.extend(extra.iter().filter(|c| occ.value_index(c).is_some()));
        }
        CoordSet::shared(keep)
    }

    /// `concat(F_k, O_k, S_k)` restricted to `coords`.
    pub fn sparsify_gate(
        g: &mut Graph<f32>,
        features: &LevelTensor,
        occ: &LevelTensor,
        sdf: &LevelTensor,
        coords: Arc<CoordSet>,
    ) -> Result<SparseTensor> {
        let mut parts = Vec::with_capacity(3);
        for t in [features, occ, sdf] {
            parts.push(match t {
                LevelTensor::Dense(d) => g.to_sparse(d, coords.clone())?,
                LevelTensor::Sparse(s) => g.gather_coords(s, coords.clone())?,
            });
        }
        g.concat_sparse(&[&parts[0], &parts[1], &parts[2]])
    }

    /// Hierarchy step `s`: from gated level-`s` features to level `s+1`.
    pub fn hierarchy_level(
        &mut self,
        g: &mut Graph<f32>,
        step: usize,
        x: &SparseTensor,
        skip: &SparseTensor,
    ) -> Result<(SparseTensor, SparseTensor, SparseTensor)> {
        let mut h = g.skip_concat(x, skip)?;
        let st = self.steps[step].clone();
        for layer in &st.convs {
            h = self.sparse_block(g, &h, layer)?;
        }
        let occ = self.sparse_head(g, &h, &st.occ)?;
        let sdf = self.sparse_head(g, &h, &st.sdf)?;
        Ok((h, occ, sdf))
    }

    /// Final full-resolution values on the gated set, with the
    /// full-resolution encoder features as skip input. Distances are clamped
    /// to `±τ`, occupancy logits are left raw.
    pub fn refine_final(&mut self, g: &mut Graph<f32>, x: &SparseTensor, skip: &SparseTensor) -> Result<SparseTensor> {
        let mut h = g.skip_concat(x, skip)?;
        for j in 0..self.refine.len() {
            let layer = self.refine[j].clone();
            h = self.sparse_block(g, &h, &layer)?;
        }
        let out = self.sparse_head(g, &h, &self.refine_out.clone())?;
        Ok(match self.config.output_repr {
            OutputRepr::Tsdf => {
                let tau = self.config.truncation;
                SparseTensor {
                    feats: g.clamp(out.feats, -tau, tau),
                    ..out
                }
            }
            OutputRepr::Occupancy => out,
        })
    }

    /// Runs the network with `active` levels switched on. `augment` supplies
    /// the training-time gate union per prediction level.
    pub fn forward(
        &mut self,
        g: &mut Graph<f32>,
        input: &ModelInput,
        active: usize,
        augment: Option<&GateAugment>,
    ) -> Result<HierarchyOutput> {
        let l = self.config.levels;
        if active == 0 || active > l {
            return Err(Error::Argument(format!("active levels must be in 1..={l}, got {active}")));
        }
        let n_pred = self.config.predicted_levels(active);
        let full = n_pred == l + 1;
        let stages = self.encode(g, input)?;
        let (f0, o0, s0) = self.coarse_predict(g, &stages[l], input.batch)?;
        let aug = |k: usize| augment.and_then(|a| a.levels.get(k)).map(Vec::as_slice);
        let mut levels = Vec::with_capacity(n_pred);
        let (f0, o0, s0) = (LevelTensor::Dense(f0), LevelTensor::Dense(o0), LevelTensor::Dense(s0));
        let gated = Self::gate_coords(g, &o0, aug(0));
        levels.push(LevelOutput {
            level: 0,
            stride: self.config.level_stride(0),
            features: f0,
            occupancy: o0,
            sdf: s0,
            gated,
        });
        for step in 0..n_pred - 1 {
            let prev = &levels[step];
            let x = Self::sparsify_gate(g, &prev.features, &prev.occupancy, &prev.sdf, prev.gated.clone())?;
            let (f, o, s) = self.hierarchy_level(g, step, &x, &stages[l - step])?;
            let (f, o, s) = (LevelTensor::Sparse(f), LevelTensor::Sparse(o), LevelTensor::Sparse(s));
            let gated = Self::gate_coords(g, &o, aug(step + 1));
            levels.push(LevelOutput {
                level: step + 1,
                stride: self.config.level_stride(step + 1),
                features: f,
                occupancy: o,
                sdf: s,
                gated,
            });
        }
        let final_values = if full {
            let last = &levels[l];
            let x = Self::sparsify_gate(g, &last.features, &last.occupancy, &last.sdf, last.gated.clone())?;
            Some(self.refine_final(g, &x, &stages[0])?)
        } else {
            None
        };
        Ok(HierarchyOutput {
            levels,
            final_values,
            active_levels: active,
            batch: input.batch,
        })
    }

    /// Eval-mode completion of one scan into a full-resolution sparse TSDF.
    ///
    /// With occupancy output, logits `z` become pseudo-distances `-z`
    /// (clamped), so the zero level set is the 0.5 probability contour.
    pub fn complete(&mut self, scan: &SparseTsdf) -> Result<SparseTsdf> {
        let was_training = self.training;
        self.eval_mode();
        let result = self.complete_inner(scan);
        self.training = was_training;
        result
    }

    fn complete_inner(&mut self, scan: &SparseTsdf) -> Result<SparseTsdf> {
        let input = ModelInput::new(&[scan], self.config.input_repr)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &input, self.config.levels, None)?;
        let fin = out.final_values.expect("all levels active");
        let tau = scan.truncation;
        let mut result = SparseTsdf::new(scan.voxel_size, tau);
        for (c, &v) in fin.coords.coords().iter().zip(g.value(fin.feats)) {
            let d = match self.config.output_repr {
                OutputRepr::Tsdf => v,
                OutputRepr::Occupancy => -v,
            };
            result.insert(c.with_batch(0), TsdfEntry::observed(d.clamp(-tau, tau)));
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(offset: [i32; 3]) -> SparseTsdf {
        let mut s = SparseTsdf::new(0.05, 3.0);
        for x in 0..12 {
            for y in 0..10 {
                for z in 0..3 {
                    let d = z as f32 - 1.0;
                    s.insert(
                        VoxelCoord::new(x + offset[0], y + offset[1], z + offset[2]),
                        TsdfEntry::observed(d),
                    );
                }
            }
        }
        s
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            levels: 2,
            base_width: 4,
            input_repr: InputRepr::PointCloud,
            output_repr: OutputRepr::Occupancy,
            truncation: 3.0,
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("levels=0").is_err());
    }

    #[test]
    fn gate_is_strict() {
        assert!(!gate_passes(0.0));
        assert!(!gate_passes(-0.0));
        assert!(gate_passes(1e-3));
        assert!(!gate_passes(-1e-3));
        assert_eq!(gate_indices(&[-5.0, 0.0, 2.0, 0.1]), vec![2, 3]);
    }

    #[test]
    fn single_voxel_survives_every_stage() {
        let mut m = SgnnModel::new(ModelConfig::test_scale(), 0).unwrap();
        let mut s = SparseTsdf::new(0.05, 3.0);
        s.insert(VoxelCoord::new(5, -3, 9), TsdfEntry::observed(0.5));
        let input = ModelInput::new(&[&s], InputRepr::Tsdf).unwrap();
        let mut g = Graph::new();
        let stages = m.encode(&mut g, &input).unwrap();
        assert_eq!(stages.len(), 4);
        for (i, st) in stages.iter().enumerate() {
            assert_eq!(st.len(), 1);
            let f = 1 << i;
            assert_eq!(st.coords.coords()[0], VoxelCoord::new(5, -3, 9).div_floor(f));
        }
    }

    #[test]
    fn empty_input_is_inference_error() {
        let mut m = SgnnModel::new(ModelConfig::test_scale(), 0).unwrap();
        let s = SparseTsdf::new(0.05, 3.0);
        let input = ModelInput::new(&[&s], InputRepr::Tsdf).unwrap();
        let mut g = Graph::new();
        assert!(matches!(m.encode(&mut g, &input), Err(Error::Inference(_))));
    }

    #[test]
    fn progressive_forward_shapes() {
        let mut m = SgnnModel::new(ModelConfig::test_scale(), 1).unwrap();
        let s = blob([0, 0, 0]);
        let input = ModelInput::new(&[&s], InputRepr::Tsdf).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &input, 1, None).unwrap();
        assert_eq!(out.levels.len(), 1);
        assert!(out.final_values.is_none());
        assert!(matches!(out.levels[0].occupancy, LevelTensor::Dense(_)));
        // Augmenting with every input voxel's parent keeps all levels populated.
        let aug = GateAugment {
            levels: (0..=3)
                .map(|k| s.iter().map(|(c, _)| c.div_floor(1 << (3 - k))).collect())
                .collect(),
        };
        let mut g = Graph::new();
        let out = m.forward(&mut g, &input, 3, Some(&aug)).unwrap();
        assert_eq!(out.levels.len(), 4);
        for w in out.levels.windows(2) {
            assert_eq!(w[1].stride * 2, w[0].stride);
            let LevelTensor::Sparse(o) = &w[1].occupancy else {
                panic!("upper levels are sparse")
            };
            for c in o.coords.coords() {
                assert!(w[0].gated.find(&c.div_floor(2)).is_some());
            }
        }
        let fin = out.final_values.unwrap();
        assert_eq!(fin.coords, out.levels[3].gated);
        assert!(g.value(fin.feats).iter().all(|v| v.abs() <= 3.0));
    }

    #[test]
    fn param_groups_follow_schedule() {
        let m = SgnnModel::new(ModelConfig::test_scale(), 0).unwrap();
        assert_eq!(m.param_group("enc1.conv1.w"), 1);
        assert_eq!(m.param_group("coarse.occ.w"), 1);
        assert_eq!(m.param_group("level1.conv1.w"), 2);
        assert_eq!(m.param_group("level2.conv1.w"), 3);
        assert_eq!(m.param_group("level3.occ.b"), 3);
        assert_eq!(m.param_group("refine.out.w"), 3);
    }

    #[test]
    fn eval_forward_is_translation_equivariant() {
        let mut m = SgnnModel::new(ModelConfig::test_scale(), 2).unwrap();
        // Give the gate something to pass so every level is exercised.
        for name in ["coarse.occ.b", "level1.occ.b", "level2.occ.b", "level3.occ.b"] {
            let id = m.params.id(name).unwrap();
            m.params.get_mut(id).value[0] = 4.0;
        }
        let a = m.complete(&blob([0, 0, 0])).unwrap();
        let b = m.complete(&blob([8, -16, 24])).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for (c, e) in a.iter() {
            assert_eq!(b.get(&c.offset(8, -16, 24)).map(|x| x.d.to_bits()), Some(e.d.to_bits()));
        }
    }
}
