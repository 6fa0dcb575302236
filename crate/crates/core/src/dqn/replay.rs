use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Observation stored as its non-zero pixels. Exact: every stored value is
/// the original `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseObs {
    len: usize,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseObs {
    pub fn from_dense(values: &[f32]) -> Self {
        let mut indices = Vec::new();
        let mut nz = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 {
                indices.push(i as u32);
                nz.push(v);
            }
        }
        SparseObs {
            len: values.len(),
            indices,
            values: nz,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// `(index, value)` pairs in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.indices.iter().zip(&self.values).map(|(&i, &v)| (i as usize, v))
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.len];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.to_dense())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: SparseObs,
    pub a: usize,
    pub r: f32,
    pub s_next: SparseObs,
    pub done: bool,
    /// Environment steps between `s` and `s_next`; `r` is the discounted
    /// reward over those steps.
    pub horizon: u32,
}

impl Transition {
    pub fn new(s: SparseObs, a: usize, r: f32, s_next: SparseObs, done: bool, n_actions: usize) -> Result<Self> {
        if !r.is_finite() {
            return Err(Error::invalid("transition", format!("reward {r} is not finite")));
        }
        if a >= n_actions {
            return Err(Error::invalid("transition", format!("action {a} >= {n_actions}")));
        }
        Ok(Transition {
            s,
            a,
            r,
            s_next,
            done,
            horizon: 1,
        })
    }

    pub fn with_horizon(mut self, horizon: u32) -> Self {
        self.horizon = horizon.max(1);
        self
    }
}

/// Fixed-capacity ring of transitions; once full, each push overwrites the oldest.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        self.sample_indices(batch, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}
