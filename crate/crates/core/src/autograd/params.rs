//! Named parameters, running statistics and the Adam optimizer.

use rand::Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Adam first and second moments.
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of optimizer updates applied to this tensor.
    pub step: u64,
    /// Buffers such as batch-norm running statistics are not optimized.
    pub trainable: bool,
    touched: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// True once a backward pass reached this tensor since the last `zero_grad`.
    pub fn touched(&self) -> bool {
        self.touched
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: FxHashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, dims: &[usize], value: Vec<f32>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let n = value.len();
        debug_assert_eq!(n, dims.iter().product::<usize>());
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            dims: dims.to_vec(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            trainable,
            touched: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, dims: &[usize], value: Vec<f32>) -> ParamId {
        self.push(name, dims, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, dims: &[usize], value: Vec<f32>) -> ParamId {
        self.push(name, dims, value, false)
    }

    /// Uniform He-style initialization with bound `sqrt(6 / fan_in)`.
    pub fn add_uniform(&mut self, name: &str, dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
        let n = dims.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, dims, value)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f32]) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
        p.touched = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.touched = false;
        }
    }

    /// Exponential moving average update of a running-statistics buffer.
    pub fn update_running(&mut self, id: ParamId, batch_value: &[f32], momentum: f32) {
        let p = &mut self.params[id.0];
        for (r, b) in p.value.iter_mut().zip(batch_value) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }

    /// Copies values, moments and step counts of every tensor named in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for src in &other.params {
            let id = self
                .id(&src.name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {} is not in the model", src.name)))?;
            let dst = &mut self.params[id.0];
            if dst.dims != src.dims {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    src.name, dst.dims, src.dims
                )));
            }
            dst.value.clone_from(&src.value);
            dst.m.clone_from(&src.m);
            dst.v.clone_from(&src.v);
            dst.step = src.step;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Updates every trainable tensor that received a gradient. Tensors the
    /// backward pass never reached keep their values and moments bit for bit.
    pub fn step(&self, store: &mut ParamStore) {
        for p in store.iter_mut().filter(|p| p.trainable && p.touched) {
            p.step += 1;
            let c1 = 1.0 - (self.beta1 as f64).powf(p.step as f64);
            let c2 = 1.0 - (self.beta2 as f64).powf(p.step as f64);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] as f64 / c1;
                let v_hat = p.v[i] as f64 / c2;
                p.value[i] -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let a = s.add("a", &[2], vec![1.0, -1.0]);
        let b = s.add("b", &[1], vec![5.0]);
        s.accumulate_grad(a, &[0.3, -2.0]);
        Adam::with_lr(0.01).step(&mut s);
        // With bias correction the first update is lr·sign(g) up to eps.
        assert!((s.get(a).value[0] - 0.99).abs() < 1e-6);
        assert!((s.get(a).value[1] + 0.99).abs() < 1e-6);
        assert_eq!(s.get(b).value, vec![5.0]);
        assert_eq!(s.get(b).step, 0);
        assert_eq!(s.get(a).step, 1);
    }

    #[test]
    fn adam_matches_hand_rolled_reference() {
        let mut s = ParamStore::new();
        let a = s.add("a", &[1], vec![0.5]);
        let opt = Adam::with_lr(0.1);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * x; // gradient of x²
            s.zero_grad();
            s.accumulate_grad(a, &[2.0 * s.get(a).value[0]]);
            opt.step(&mut s);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.get(a).value[0] as f64 - x).abs() < 1e-5);
    }

    #[test]
    fn buffers_are_not_optimized() {
        let mut s = ParamStore::new();
        let r = s.add_buffer("bn.running_mean", &[1], vec![0.0]);
        s.accumulate_grad(r, &[1.0]);
        Adam::default().step(&mut s);
        assert_eq!(s.get(r).value, vec![0.0]);
        s.update_running(r, &[1.0], 0.1);
        assert!((s.get(r).value[0] - 0.1).abs() < 1e-7);
    }
}
