use ndarray::{ArrayD, ArrayView1, ArrayView2, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub frozen: bool,
}

/// Named parameter tensors of one network, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>, frozen: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialised tensor.
    pub fn add_he<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        frozen: bool,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_normal(name, shape, std, frozen, rng)
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        frozen: bool,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng) as f32);
        self.add(name, value, frozen)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize], frozen: bool) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)), frozen)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.params[id.0].value
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f32> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-D parameter")
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f32> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn element_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.value(id).len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of `ids`.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let p = self.get(id);
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn digest_all(&self) -> String {
        let ids: Vec<_> = self.iter().map(|(id, _)| id).collect();
        self.digest(&ids)
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    slots: Vec<Option<ArrayD<f32>>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate<D: ndarray::Dimension>(&mut self, id: ParamId, g: ndarray::Array<f32, D>) {
        let g = g.into_dyn();
        let g = if g.is_standard_layout() {
            g
        } else {
            g.as_standard_layout().into_owned()
        };
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.slots[id.0].as_ref()
    }

    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over the gradients of `ids`, accumulated in f64.
    pub fn global_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Whether any gradient was recorded for `id`.
    pub fn has(&self, id: ParamId) -> bool {
        self.slots[id.0].is_some()
    }
}
