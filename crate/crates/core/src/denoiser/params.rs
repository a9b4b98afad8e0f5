//! Flat parameter storage shared by the model, the optimizer, and the
//! checkpoint writer. Every tensor is a named, shape-tagged slice of one
//! contiguous `Vec<f64>`, so gradients, Adam moments, and finite-difference
//! probes all align by plain index.

use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Layout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Layout {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Weight initialization applied when a tensor is registered.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zero,
    /// Normal with std `1 / sqrt(fan_in)`.
    FanIn(usize),
    /// Normal with the given std.
    Normal(f64),
}

pub struct ParamBuilder<'r, R: Rng> {
    layout: Layout,
    data: Vec<f64>,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder {
            layout: Layout::default(),
            data: Vec::new(),
            rng,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.layout.total;
        self.layout.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        self.layout.total += len;
        match init {
            Init::Zero => self.data.extend(std::iter::repeat_n(0.0, len)),
            Init::FanIn(fan_in) => {
                let dist = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).unwrap();
                self.data.extend((0..len).map(|_| dist.sample(self.rng)));
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).unwrap();
                self.data.extend((0..len).map(|_| dist.sample(self.rng)));
            }
        }
        ParamId(self.layout.entries.len() - 1)
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            layout: Arc::new(self.layout),
            data: self.data,
        }
    }
}

/// The model's parameters: a shared layout plus one flat value vector.
#[derive(Clone, Debug)]
pub struct ParamStore {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f64> {
        let e = self.layout.entry(id);
        debug_assert_eq!(e.shape.len(), 1);
        ArrayView1::from_shape(e.shape[0], &self.data[e.offset..e.offset + e.len]).unwrap()
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = self.layout.entry(id);
        debug_assert_eq!(e.shape.len(), 2);
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &self.data[e.offset..e.offset + e.len])
            .unwrap()
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let e = self.layout.entry(id).clone();
        ArrayViewMut1::from_shape(e.shape[0], &mut self.data[e.offset..e.offset + e.len]).unwrap()
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let e = self.layout.entry(id).clone();
        ArrayViewMut2::from_shape(
            (e.shape[0], e.shape[1]),
            &mut self.data[e.offset..e.offset + e.len],
        )
        .unwrap()
    }

    /// Look up a tensor by name (used by the checkpoint loader).
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.layout
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

/// Gradient (or moment) buffer aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            layout: Arc::clone(&store.layout),
            data: vec![0.0; store.data.len()],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn view2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let e = self.layout.entry(id).clone();
        ArrayViewMut2::from_shape(
            (e.shape[0], e.shape[1]),
            &mut self.data[e.offset..e.offset + e.len],
        )
        .unwrap()
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        let e = self.layout.entry(id).clone();
        ArrayViewMut1::from_shape(e.shape[0], &mut self.data[e.offset..e.offset + e.len]).unwrap()
    }

    /// Elementwise accumulate another buffer (used to merge per-scenario
    /// gradients in a fixed order).
    pub fn accumulate(&mut self, other: &GradBuffer) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

/// AdamW: first-order updates with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; store.data.len()],
            v: vec![0.0; store.data.len()],
            step: 0,
        }
    }

    /// One update with the given learning rate (schedules are applied by the
    /// caller). Weight decay is decoupled: `w -= lr * wd * w`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        if grads.data.len() != store.data.len() {
            return Err(Error::invalid("gradient buffer does not match parameters"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.data.len() {
            let g = grads.data[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            store.data[i] -= lr * self.weight_decay * store.data[i];
            store.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
