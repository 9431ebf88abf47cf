//! Named parameter storage, tape binding, hashing and the SGD optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Tensor, Var};

/// Parameters of one sub-network, keyed by dotted names such as `video.conv1.w`.
///
/// Values are kept on the float32 grid (see [`ParamSet::quantize_f32`]) so
/// that a float32 checkpoint restores them exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Arc<Tensor>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|v| v.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(Arc::clone(v), trainable)))
            .collect();
        Bound { vars }
    }

    /// Rounds every value to the nearest float32.
    pub fn quantize_f32(&mut self) {
        for v in self.entries.values_mut() {
            Arc::make_mut(v).mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// SHA-256 over names, shapes and float32 payloads, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &x in v.iter() {
                h.update((x as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A [`ParamSet`] registered on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Panics on unknown names: parameter names are fixed by the architecture
    /// and validated when a checkpoint is loaded.
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Collects gradients for every bound parameter the root depends on.
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| g.get(*v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}

/// Parameter initializers.
pub struct Init<'r, R: Rng> {
    rng: &'r mut R,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { rng }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// He-normal initialization, `std = sqrt(2 / fan_in)`.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(IxDyn(shape))
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }

    /// Applies one update. Parameters and momentum buffers are re-quantized
    /// to float32 so a checkpoint captures the optimizer state exactly.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let names: Vec<String> = params.entries.keys().cloned().collect();
        for name in names {
            let p = params.get_mut(&name).unwrap();
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.raw_dim()));
            v.mapv_inplace(|x| x * self.momentum);
            if let Some(g) = grads.get(&name) {
                *v += g;
            }
            if self.weight_decay != 0.0 {
                v.scaled_add(self.weight_decay, p);
            }
            v.mapv_inplace(|x| x as f32 as f64);
            p.scaled_add(-lr, v);
        }
        params.quantize_f32();
    }
}
