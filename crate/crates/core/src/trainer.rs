//! Progressive training with masked proxy losses at every hierarchy level.

use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHasher;

use crate::autograd::{Adam, Graph, Var};
use crate::error::{Error, Result};
use crate::grid::{downsample_target, SparseTsdf, VoxelCoord, DEFAULT_CROP_DIMS, DEFAULT_TRUNCATION};
use crate::io::{write_checkpoint, Checkpoint};
use crate::model::{GateAugment, HierarchyOutput, ModelConfig, ModelInput, OutputRepr, SgnnModel};
use crate::selfsup::{crop_pair, CropSampler, ScanPair, MIN_CROP_SURFACE_VOXELS};
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub occupancy: f32,
    pub sdf: f32,
    pub final_sdf: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            occupancy: 1.0,
            sdf: 1.0,
            final_sdf: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    /// Iterations between successive level introductions.
    pub n_level: u64,
    pub iterations: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub crop_dims: [usize; 3],
    /// Write a checkpoint every this many iterations; 0 writes only the last.
    pub checkpoint_every: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            n_level: 2000,
            iterations: 6000,
            seed: 0,
            model: ModelConfig::default(),
            crop_dims: DEFAULT_CROP_DIMS,
            checkpoint_every: 0,
            weights: LossWeights::default(),
        }
    }
}

fn parse_dims(v: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = v.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    parts.try_into().ok()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let w = &self.weights;
        let ok = self.lr > 0.0
            && self.batch_size > 0
            && self.n_level > 0
            && self.crop_dims.iter().all(|&d| d > 0)
            && w.occupancy >= 0.0
            && w.sdf >= 0.0
            && w.final_sdf >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    /// Parses `key=value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("bad value for {k}: {v:?}"));
            match k {
                "lr" => cfg.lr = v.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad())?,
                "n_level" => cfg.n_level = v.parse().map_err(|_| bad())?,
                "iterations" => cfg.iterations = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "levels" => cfg.model.levels = v.parse().map_err(|_| bad())?,
                "base_width" => cfg.model.base_width = v.parse().map_err(|_| bad())?,
                "input_repr" => cfg.model.input_repr = v.parse()?,
                "output_repr" => cfg.model.output_repr = v.parse()?,
                "truncation" => cfg.model.truncation = v.parse().map_err(|_| bad())?,
                "crop" | "crop_dims" => cfg.crop_dims = parse_dims(v).ok_or_else(bad)?,
                "checkpoint_every" => cfg.checkpoint_every = v.parse().map_err(|_| bad())?,
                "w_occ" => cfg.weights.occupancy = v.parse().map_err(|_| bad())?,
                "w_sdf" => cfg.weights.sdf = v.parse().map_err(|_| bad())?,
                "w_final" => cfg.weights.final_sdf = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let [x, y, z] = self.crop_dims;
        format!(
            "lr={}\nbatch_size={}\nn_level={}\niterations={}\nseed={}\nlevels={}\nbase_width={}\n\
             input_repr={}\noutput_repr={}\ntruncation={}\ncrop={x},{y},{z}\ncheckpoint_every={}\n\
             w_occ={}\nw_sdf={}\nw_final={}\n",
            self.lr,
            self.batch_size,
            self.n_level,
            self.iterations,
            self.seed,
            self.model.levels,
            self.model.base_width,
            self.model.input_repr,
            self.model.output_repr,
            self.model.truncation,
            self.checkpoint_every,
            self.weights.occupancy,
            self.weights.sdf,
            self.weights.final_sdf,
        )
    }
}

/// Number of switched-on levels at `iteration`: `min(1 + ⌊it / N_level⌋, L)`.
pub fn active_levels(iteration: u64, n_level: u64, levels: usize) -> usize {
    let a = 1 + iteration / n_level.max(1);
    a.min(levels as u64) as usize
}

/// Masked targets of one prediction level, batch-tagged and sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTarget {
    /// Child-to-parent factor relative to full resolution.
    pub factor: i32,
    pub coords: Vec<VoxelCoord>,
    /// Distances in full-resolution voxel units.
    pub d: Vec<f32>,
}

impl LevelTarget {
    fn occupied(&self, truncation: f32) -> Vec<VoxelCoord> {
        self.coords
            .iter()
            .zip(&self.d)
            .filter(|(_, d)| d.abs() < truncation)
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Loss targets for every prediction level of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub levels: Vec<LevelTarget>,
    pub truncation: f32,
}

impl LossTargets {
    /// Only target entries inside each pair's mask are used, so values
    /// outside the mask cannot influence any level.
    pub fn new(pairs: &[&ScanPair], levels: usize) -> Result<Self> {
        let (voxel_size, truncation) = pairs
            .first()
            .map_or((1.0, DEFAULT_TRUNCATION), |p| (p.target.voxel_size, p.target.truncation));
        let mut masked = SparseTsdf::new(voxel_size, truncation);
        for (b, p) in pairs.iter().enumerate() {
            for c in &p.mask {
                if let Some(e) = p.target.get(c) {
                    masked.insert(c.with_batch(b as u16), *e);
                }
            }
        }
        let mut out = Vec::with_capacity(levels + 1);
        for k in 0..=levels {
            let factor = 1 << (levels - k);
            let level = if factor == 1 {
                masked.clone()
            } else {
                downsample_target(&masked, factor)?
            };
            let entries = level.sorted_entries();
            out.push(LevelTarget {
                factor,
                coords: entries.iter().map(|e| e.0).collect(),
                d: entries.iter().map(|e| e.1.d).collect(),
            });
        }
        Ok(Self {
            levels: out,
            truncation,
        })
    }

    /// Occupied target coordinates per level, for the training gate.
    pub fn gate_augment(&self) -> GateAugment {
        GateAugment {
            levels: self.levels.iter().map(|l| l.occupied(self.truncation)).collect(),
        }
    }
}

/// Graph nodes of the loss and its components.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Per prediction level, `None` when the level was not computed.
    pub occupancy: Vec<Option<Var>>,
    pub sdf: Vec<Option<Var>>,
    pub final_sdf: Option<Var>,
}

/// `Σ_k w_o·BCE(O_k) + w_s·ℓ1(t(S_k))` over computed levels, plus the final
/// `w_f·ℓ1(t(·))` term once refinement runs. Every term only sees masked
/// target coordinates the level predicted.
pub fn total_loss(
    g: &mut Graph<f32>,
    out: &HierarchyOutput,
    targets: &LossTargets,
    weights: &LossWeights,
    output_repr: OutputRepr,
) -> Result<LossTerms> {
    let n_levels = targets.levels.len();
    let tau = targets.truncation;
    let mut occ_terms = vec![None; n_levels];
    let mut sdf_terms = vec![None; n_levels];
    let mut terms = Vec::new();
    for lo in &out.levels {
        let t = targets
            .levels
            .get(lo.level)
            .ok_or_else(|| Error::Argument(format!("no targets for level {}", lo.level)))?;
        let mut rows = Vec::new();
        let mut occ = Vec::new();
        let mut sdf = Vec::new();
        for (c, &d) in t.coords.iter().zip(&t.d) {
            if let Some(i) = lo.occupancy.value_index(c) {
                rows.push(i);
                occ.push(if d.abs() < tau { 1.0 } else { 0.0 });
                sdf.push(d / t.factor as f32);
            }
        }
        let o = g.bce_logits(lo.occupancy.var(), rows.clone(), occ)?;
        let s = g.l1_log(lo.sdf.var(), rows, sdf)?;
        terms.push((o, weights.occupancy));
        terms.push((s, weights.sdf));
        occ_terms[lo.level] = Some(o);
        sdf_terms[lo.level] = Some(s);
    }
    let final_sdf = match &out.final_values {
        Some(fin) => {
            let t = targets.levels.last().expect("at least one level");
            let mut rows = Vec::new();
            let mut vals = Vec::new();
            for (c, &d) in t.coords.iter().zip(&t.d) {
                if let Some(i) = fin.coords.find(c) {
                    rows.push(i);
                    vals.push(match output_repr {
                        OutputRepr::Tsdf => d,
                        OutputRepr::Occupancy => (d.abs() < 1.0) as u8 as f32,
                    });
                }
            }
            let v = match output_repr {
                OutputRepr::Tsdf => g.l1_log(fin.feats, rows, vals)?,
                OutputRepr::Occupancy => g.bce_logits(fin.feats, rows, vals)?,
            };
            terms.push((v, weights.final_sdf));
            Some(v)
        }
        None => None,
    };
    let total = g.weighted_sum(&terms)?;
    Ok(LossTerms {
        total,
        occupancy: occ_terms,
        sdf: sdf_terms,
        final_sdf,
    })
}

/// Loss values of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    pub active_levels: usize,
    pub samples: usize,
    pub total: f32,
    pub occupancy: Vec<Option<f32>>,
    pub sdf: Vec<Option<f32>>,
    pub final_sdf: Option<f32>,
}

impl IterationLog {
    pub fn csv_header(levels: usize) -> String {
        let mut h = String::from("iteration,active_levels,samples,total");
        for k in 0..=levels {
            let _ = write!(h, ",occ_{k},sdf_{k}");
        }
        h.push_str(",final");
        h
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut r = format!("{},{},{},{}", self.iteration, self.active_levels, self.samples, self.total);
        for (o, s) in self.occupancy.iter().zip(&self.sdf) {
            let _ = write!(r, ",{},{}", opt(*o), opt(*s));
        }
        let _ = write!(r, ",{}", opt(self.final_sdf));
        r
    }
}

fn fingerprint(p: &ScanPair) -> u64 {
    let mut h = FxHasher::default();
    for (c, e) in p.input.sorted_entries() {
        c.hash(&mut h);
        e.d.to_bits().hash(&mut h);
    }
    for (c, e) in p.target.sorted_entries() {
        c.hash(&mut h);
        e.d.to_bits().hash(&mut h);
        e.observed.hash(&mut h);
    }
    p.mask.hash(&mut h);
    h.finish()
}

/// Orders a batch by content so the loss does not depend on sample order.
pub fn canonical_order(pairs: &mut [ScanPair]) {
    pairs.sort_by_cached_key(fingerprint);
}

/// One optimization step on a prepared batch. Returns the loss values.
pub fn train_step(
    model: &mut SgnnModel,
    adam: &Adam,
    batch: &[ScanPair],
    active: usize,
    weights: &LossWeights,
) -> Result<(f32, LossValues)> {
    let refs: Vec<&ScanPair> = batch.iter().collect();
    let inputs: Vec<&SparseTsdf> = batch.iter().map(|p| &p.input).collect();
    let input = ModelInput::new(&inputs, model.config.input_repr)?;
    let targets = LossTargets::new(&refs, model.config.levels)?;
    let augment = targets.gate_augment();
    model.train_mode();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &input, active, Some(&augment))?;
    let terms = total_loss(&mut g, &out, &targets, weights, model.config.output_repr)?;
    g.backward(terms.total)?;
    model.params.zero_grad();
    g.accumulate_param_grads(&mut model.params);
    adam.step(&mut model.params);
    let value = |v: Option<Var>| v.map(|v| g.scalar(v));
    Ok((
        g.scalar(terms.total),
        LossValues {
            occupancy: terms.occupancy.iter().map(|v| value(*v)).collect(),
            sdf: terms.sdf.iter().map(|v| value(*v)).collect(),
            final_sdf: value(terms.final_sdf),
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub occupancy: Vec<Option<f32>>,
    pub sdf: Vec<Option<f32>>,
    pub final_sdf: Option<f32>,
}

/// Training state: model, data, crop samplers and progress.
pub struct Trainer<'a> {
    pub model: SgnnModel,
    pub config: TrainConfig,
    pub iteration: u64,
    pub log: Vec<IterationLog>,
    dataset: &'a [ScanPair],
    samplers: Vec<Option<CropSampler>>,
    adam: Adam,
}

impl<'a> Trainer<'a> {
    pub fn new(model: SgnnModel, dataset: &'a [ScanPair], config: TrainConfig) -> Result<Self> {
        Self::resume(model, dataset, config, 0)
    }

    /// Continues from `iteration`; the model must carry the optimizer state
    /// saved at that point.
    pub fn resume(model: SgnnModel, dataset: &'a [ScanPair], config: TrainConfig, iteration: u64) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Argument("training needs at least one scan pair".into()));
        }
        if model.config != config.model {
            return Err(Error::Config("model does not match the training config".into()));
        }
        let samplers: Vec<Option<CropSampler>> = dataset
            .iter()
            .map(|p| CropSampler::new(&p.input, config.crop_dims, MIN_CROP_SURFACE_VOXELS).ok())
            .collect();
        if samplers.iter().all(Option::is_none) {
            return Err(Error::Sampling(format!(
                "no pair holds {MIN_CROP_SURFACE_VOXELS} surface voxels for a {:?} crop",
                config.crop_dims
            )));
        }
        Ok(Self {
            adam: Adam::with_lr(config.lr),
            model,
            config,
            iteration,
            log: Vec::new(),
            dataset,
            samplers,
        })
    }

    /// Dataset index of the `pos`-th drawn sample; the order is reshuffled
    /// every epoch.
    fn sample_index(&self, pos: u64) -> usize {
        let n = self.dataset.len() as u64;
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, 1_000 + pos / n));
        order.shuffle(&mut rng);
        order[(pos % n) as usize]
    }

    /// Cropped pairs of the batch for `iteration`; samples whose crop cannot
    /// be drawn are skipped.
    pub fn batch(&self, iteration: u64) -> Vec<ScanPair> {
        let b = self.config.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        for j in 0..b {
            let pos = iteration * b + j;
            let idx = self.sample_index(pos);
            let Some(sampler) = &self.samplers[idx] else {
                continue;
            };
            match sampler.sample(mix_seed(mix_seed(self.config.seed, 2), pos)) {
                Ok(spec) => out.push(crop_pair(&self.dataset[idx], &spec)),
                Err(e) => log::debug!("skipping sample {idx}: {e}"),
            }
        }
        canonical_order(&mut out);
        out
    }

    pub fn step(&mut self) -> Result<IterationLog> {
        let it = self.iteration;
        let active = active_levels(it, self.config.n_level, self.config.model.levels);
        let batch = self.batch(it);
        if batch.is_empty() {
            return Err(Error::Sampling(format!("iteration {it} drew no usable crops")));
        }
        let (total, v) = train_step(&mut self.model, &self.adam, &batch, active, &self.config.weights)?;
        let entry = IterationLog {
            iteration: it,
            active_levels: active,
            samples: batch.len(),
            total,
            occupancy: v.occupancy,
            sdf: v.sdf,
            final_sdf: v.final_sdf,
        };
        log::debug!("{}", entry.csv_row());
        self.iteration += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.iteration)
    }

    /// Trains up to `config.iterations`. With `out_dir`, appends to
    /// `losses.csv` and writes `checkpoint_<it>.ckpt` files plus
    /// `latest.ckpt`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        let mut csv = None;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            let path = dir.join("losses.csv");
            let mut text = if self.iteration > 0 && path.exists() {
                fs::read_to_string(&path)?
            } else {
                IterationLog::csv_header(self.config.model.levels) + "\n"
            };
            if self.iteration > 0 {
                // Drop rows past the resume point so the log stays consistent.
                let keep = (self.iteration + 1) as usize;
                text = text.lines().take(keep).map(|l| format!("{l}\n")).collect();
            }
            csv = Some((path, text));
        }
        while self.iteration < self.config.iterations {
            let entry = self.step()?;
            if let (Some(dir), Some((path, text))) = (out_dir, csv.as_mut()) {
                text.push_str(&entry.csv_row());
                text.push('\n');
                let every = self.config.checkpoint_every;
                let last = self.iteration == self.config.iterations;
                if (every > 0 && self.iteration % every == 0) || last {
                    fs::write(&*path, text.as_bytes())?;
                    let ck = self.checkpoint();
                    write_checkpoint(&checkpoint_path(dir, self.iteration), &ck)?;
                    write_checkpoint(&dir.join("latest.ckpt"), &ck)?;
                }
            }
        }
        if let Some((path, text)) = csv {
            fs::write(path, text)?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.ckpt"))
}

/// Trains a fresh run to completion and returns the model and loss log.
pub fn train(dataset: &[ScanPair], model: SgnnModel, config: TrainConfig, out_dir: Option<&Path>) -> Result<(SgnnModel, Vec<IterationLog>)> {
    let mut t = Trainer::new(model, dataset, config)?;
    t.run(out_dir)?;
    Ok((t.model, t.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TsdfEntry;

    fn plane_pair(offset: i32) -> ScanPair {
        let mut target = SparseTsdf::new(0.05, 3.0);
        let mut input = SparseTsdf::new(0.05, 3.0);
        for x in 0..16 {
            for y in 0..16 {
                for z in 0..8 {
                    let d = (z as f32 - 3.5 + 0.1 * offset as f32).clamp(-3.0, 3.0);
                    let c = VoxelCoord::new(x, y, z);
                    target.insert(c, TsdfEntry::observed(d));
                    if x < 10 {
                        input.insert(c, TsdfEntry::observed(d));
                    }
                }
            }
        }
        ScanPair::new(input, target)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            n_level: 3,
            iterations: 8,
            crop_dims: [16, 16, 8],
            model: ModelConfig {
                levels: 2,
                base_width: 4,
                ..ModelConfig::test_scale()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_steps_at_boundaries() {
        assert_eq!(active_levels(0, 2000, 3), 1);
        assert_eq!(active_levels(1999, 2000, 3), 1);
        assert_eq!(active_levels(2000, 2000, 3), 2);
        assert_eq!(active_levels(4000, 2000, 3), 3);
        assert_eq!(active_levels(1_000_000, 2000, 3), 3);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = small_config();
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::from_text("lr=-1").is_err());
        assert!(TrainConfig::from_text("bogus=1").is_err());
        assert!(TrainConfig::from_text("batch_size").is_err());
    }

    #[test]
    fn level_targets_are_masked_and_pooled() {
        let p = plane_pair(0);
        let t = LossTargets::new(&[&p], 2).unwrap();
        assert_eq!(t.levels.len(), 3);
        assert_eq!(t.levels[2].factor, 1);
        assert_eq!(t.levels[0].factor, 4);
        // 16×16×8 at factor 4 → 4×4×2 parents.
        assert_eq!(t.levels[0].coords.len(), 32);
        assert_eq!(t.levels[2].coords.len(), p.mask.len());
    }

    #[test]
    fn perfect_prediction_gives_zero_sdf_loss() {
        let mut g = Graph::<f32>::new();
        let p = plane_pair(0);
        let t = LossTargets::new(&[&p], 1).unwrap();
        let full = &t.levels[1];
        let coords = crate::autograd::CoordSet::shared(full.coords.clone());
        let pred = g.variable(full.d.clone());
        let rows: Vec<usize> = (0..full.coords.len()).collect();
        let l = g.l1_log(pred, rows, full.d.clone()).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert_eq!(coords.len(), full.coords.len());
    }

    #[test]
    fn empty_dataset_is_argument_error() {
        let cfg = small_config();
        let m = SgnnModel::new(cfg.model.clone(), 0).unwrap();
        assert!(matches!(Trainer::new(m, &[], cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let data = vec![plane_pair(0), plane_pair(3)];
        let cfg = small_config();
        let run = |iters: u64| {
            let m = SgnnModel::new(cfg.model.clone(), 5).unwrap();
            let mut c = cfg.clone();
            c.iterations = iters;
            train(&data, m, c, None).unwrap()
        };
        let (m1, log1) = run(8);
        let (_, log2) = run(8);
        assert_eq!(log1, log2);
        // With two levels the second stage brings in the last two
        // prediction levels and refinement together.
        assert!(log1[2].occupancy[1].is_none());
        assert!(log1[2].final_sdf.is_none());
        assert!(log1[3].occupancy[2].is_some());
        assert!(log1[3].final_sdf.is_some());
        let (half, _) = run(4);
        let ck = Checkpoint::from_model(&half, 4);
        let restored = ck.into_model().unwrap();
        let mut t = Trainer::resume(restored, &data, cfg.clone(), 4).unwrap();
        t.run(None).unwrap();
        assert_eq!(t.log, log1[4..].to_vec());
        for (a, b) in t.model.params.iter().zip(m1.params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let data = vec![plane_pair(0), plane_pair(3)];
        let cfg = small_config();
        let mut batch: Vec<ScanPair> = data.clone();
        let mut m1 = SgnnModel::new(cfg.model.clone(), 1).unwrap();
        let mut m2 = m1.clone();
        let adam = Adam::default();
        canonical_order(&mut batch);
        let a = train_step(&mut m1, &adam, &batch, 2, &cfg.weights).unwrap();
        batch.reverse();
        canonical_order(&mut batch);
        let b = train_step(&mut m2, &adam, &batch, 2, &cfg.weights).unwrap();
        assert_eq!(a, b);
    }
}
