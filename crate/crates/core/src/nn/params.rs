use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use tch::{Kind, Tensor};

use crate::seed::{self, Rng};

/// Named tensors of one model. Trainable entries carry `requires_grad`;
/// buffers (power-iteration vectors, running statistics) do not.
///
/// Iteration order is by name, which keeps optimizer updates and checkpoint
/// layouts deterministic.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns a shallow handle to it.
    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Tensor {
        let tensor = if trainable {
            tensor.set_requires_grad(true)
        } else {
            tensor
        };
        let handle = tensor.shallow_clone();
        self.entries.insert(name.to_string(), Entry { tensor, trainable });
        handle
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn num_trainable(&self) -> i64 {
        self.trainable().map(|(_, t)| t.numel() as i64).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.trainable() {
            let mut g = t.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    /// Overwrites every tensor that also exists in `values`, in place.
    pub fn copy_from(&self, values: &BTreeMap<String, Tensor>) {
        tch::no_grad(|| {
            for (name, e) in &self.entries {
                if let Some(v) = values.get(name) {
                    e.tensor.shallow_clone().copy_(v);
                }
            }
        });
    }

    /// Deep copy of all values, detached from the graph.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor.detach().copy()))
            .collect()
    }
}

/// Deterministic initializers driven by a seed per tensor name.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng_for(&self, name: &str) -> Rng {
        seed::derived_rng(self.seed, &[seed::tag(name)])
    }

    pub fn normal(&self, name: &str, shape: &[i64], std: f64) -> Tensor {
        let mut rng = self.rng_for(name);
        let n: i64 = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
            .collect();
        Tensor::from_slice(&values).view(shape)
    }

    /// Orthogonal initialization of the `(shape[0], prod(shape[1..]))` matrix view.
    pub fn orthogonal(&self, name: &str, shape: &[i64], gain: f64) -> Tensor {
        let rows = shape[0];
        let cols: i64 = shape[1..].iter().product::<i64>().max(1);
        let g = self.normal(name, &[rows.max(cols), rows.min(cols)], 1.0);
        let (q, r) = Tensor::linalg_qr(&g, "reduced");
        // sign correction makes the draw uniform over the orthogonal group
        let signs = r.diagonal(0, 0, 1).sign();
        let signs = signs.where_self(&signs.ne(0.0), &Tensor::ones_like(&signs));
        let q = q * signs.unsqueeze(0);
        let q = if rows < cols { q.tr() } else { q };
        (q * gain).contiguous().view(shape).to_kind(Kind::Float)
    }

    pub fn zeros(shape: &[i64]) -> Tensor {
        Tensor::zeros(shape, (Kind::Float, tch::Device::Cpu))
    }
}
