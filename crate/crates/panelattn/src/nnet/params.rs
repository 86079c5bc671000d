//! Named parameter storage with per-group trainability and a flat gradient
//! layout.
//!
//! Every learnable tensor lives in one [`ParamStore`], addressed by a
//! [`ParamId`] handle. The optimizer, checkpointing, parameter counting,
//! and the freezing contract all operate on this uniform view.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

use super::real::Real;

/// Parameter group, the unit of freezing and counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    Encoder,
    Head,
    Lora,
    Opro,
    OproBd,
    Apb,
    Asym,
}

impl Group {
    pub fn name(&self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Encoder => "encoder",
            Group::Head => "head",
            Group::Lora => "lora",
            Group::Opro => "opro",
            Group::OproBd => "opro_bd",
            Group::Apb => "apb",
            Group::Asym => "asym",
        }
    }

    pub fn all() -> [Group; 8] {
        [
            Group::Backbone,
            Group::Encoder,
            Group::Head,
            Group::Lora,
            Group::Opro,
            Group::OproBd,
            Group::Apb,
            Group::Asym,
        ]
    }
}

/// Handle to one tensor in the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub group: Group,
    pub value: ArrayD<F>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add1(&mut self, name: impl Into<String>, group: Group, value: Array1<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value: value.into_dyn(),
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add2(&mut self, name: impl Into<String>, group: Group, value: Array2<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value: value.into_dyn(),
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get1(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.entries[id.0]
            .value
            .view()
            .into_dimensionality()
            .expect("parameter registered as 1-d")
    }

    pub fn get2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.entries[id.0]
            .value
            .view()
            .into_dimensionality()
            .expect("parameter registered as 2-d")
    }

    pub fn get1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        self.entries[id.0]
            .value
            .view_mut()
            .into_dimensionality()
            .expect("parameter registered as 1-d")
    }

    pub fn get2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        self.entries[id.0]
            .value
            .view_mut()
            .into_dimensionality()
            .expect("parameter registered as 2-d")
    }

    /// 2-d parameter converted to f64 (for operator math).
    pub fn get2_f64(&self, id: ParamId) -> Array2<f64> {
        self.get2(id).mapv(|v| v.to64())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Marks exactly the given groups trainable.
    pub fn set_trainable_groups(&mut self, groups: &[Group]) {
        for e in &mut self.entries {
            e.trainable = groups.contains(&e.group);
        }
    }

    /// Total scalar count per group (all parameters, trainable or not).
    pub fn group_counts(&self) -> Vec<(Group, u64)> {
        let mut counts: Vec<(Group, u64)> = Vec::new();
        for g in Group::all() {
            let n: u64 = self
                .entries
                .iter()
                .filter(|e| e.group == g)
                .map(|e| e.value.len() as u64)
                .sum();
            if n > 0 {
                counts.push((g, n));
            }
        }
        counts
    }

    /// SHA-256 over a group's names, shapes, and f64-widened values. Used to
    /// verify the freezing contract.
    pub fn group_sha256(&self, group: Group) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if e.group != group {
                continue;
            }
            hasher.update(e.name.as_bytes());
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                hasher.update(v.to64().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flat layout over trainable parameters, in store order.
    pub fn trainable_layout(&self) -> TrainableLayout {
        let mut slots = vec![None; self.entries.len()];
        let mut offset = 0usize;
        for (i, e) in self.entries.iter().enumerate() {
            if e.trainable {
                slots[i] = Some(offset);
                offset += e.value.len();
            }
        }
        TrainableLayout {
            slots,
            total: offset,
        }
    }

    /// Copies flat values into the trainable parameters (optimizer update).
    pub fn load_trainable(&mut self, layout: &TrainableLayout, flat: &[F]) -> Result<()> {
        if flat.len() != layout.total {
            return Err(Error::shape(format!(
                "flat vector has {} values, layout expects {}",
                flat.len(),
                layout.total
            )));
        }
        for (i, e) in self.entries.iter_mut().enumerate() {
            if let Some(off) = layout.slots[i] {
                let len = e.value.len();
                for (dst, src) in e.value.iter_mut().zip(flat[off..off + len].iter()) {
                    *dst = *src;
                }
            }
        }
        Ok(())
    }

    /// Copies the trainable parameters into a flat vector.
    pub fn dump_trainable(&self, layout: &TrainableLayout) -> Vec<F> {
        let mut flat = vec![F::zero(); layout.total];
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(off) = layout.slots[i] {
                for (dst, src) in flat[off..off + e.value.len()].iter_mut().zip(e.value.iter()) {
                    *dst = *src;
                }
            }
        }
        flat
    }

    /// Adds `delta` to one flat-indexed coordinate of a tensor (finite
    /// difference probes).
    pub fn nudge(&mut self, id: ParamId, flat_index: usize, delta: F) {
        let value = &mut self.entries[id.0].value;
        let slice = value
            .as_slice_mut()
            .expect("parameters are stored contiguously");
        slice[flat_index] += delta;
    }

    /// Replaces a tensor's values (same shape), e.g. when loading a
    /// checkpoint.
    pub fn assign(&mut self, id: ParamId, value: ArrayD<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, assignment has {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }
}

/// Offsets of each trainable parameter inside the flat gradient vector.
#[derive(Debug, Clone)]
pub struct TrainableLayout {
    /// Per param id: offset into the flat vector, `None` when frozen.
    pub slots: Vec<Option<usize>>,
    pub total: usize,
}

impl TrainableLayout {
    pub fn offset(&self, id: ParamId) -> Option<usize> {
        self.slots[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].is_some()
    }
}

/// Flat gradient accumulator plus f64 side-buffers for the operator chain
/// (gradients w.r.t. whole orthogonal operators, folded through the
/// exponential adjoint once per step).
#[derive(Debug, Clone)]
pub struct GradAccum<F> {
    pub flat: Vec<F>,
    pub op_slots: Vec<Array2<f64>>,
}

impl<F: Real> GradAccum<F> {
    pub fn zeros(layout: &TrainableLayout, op_slot_dims: &[usize]) -> Self {
        Self {
            flat: vec![F::zero(); layout.total],
            op_slots: op_slot_dims.iter().map(|d| Array2::zeros((*d, *d))).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradAccum<F>) {
        debug_assert_eq!(self.flat.len(), other.flat.len());
        for (a, b) in self.flat.iter_mut().zip(other.flat.iter()) {
            *a += *b;
        }
        for (a, b) in self.op_slots.iter_mut().zip(other.op_slots.iter()) {
            *a += b;
        }
    }

    /// Accumulates into a 2-d parameter's slot, if trainable.
    pub fn acc2(&mut self, layout: &TrainableLayout, id: ParamId, g: &ArrayView2<F>) {
        if let Some(off) = layout.offset(id) {
            let mut idx = off;
            for v in g.iter() {
                self.flat[idx] += *v;
                idx += 1;
            }
        }
    }

    /// Accumulates into a 1-d parameter's slot, if trainable.
    pub fn acc1(&mut self, layout: &TrainableLayout, id: ParamId, g: &ArrayView1<F>) {
        if let Some(off) = layout.offset(id) {
            let mut idx = off;
            for v in g.iter() {
                self.flat[idx] += *v;
                idx += 1;
            }
        }
    }

    /// Accumulates an f64 matrix into a 2-d parameter's slot, if trainable.
    pub fn acc2_f64(&mut self, layout: &TrainableLayout, id: ParamId, g: &Array2<f64>) {
        if let Some(off) = layout.offset(id) {
            let mut idx = off;
            for v in g.iter() {
                self.flat[idx] += F::of(*v);
                idx += 1;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flat
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to64().abs()))
    }
}

/// Reads one scalar of a (possibly frozen) gradient slot; test support.
pub fn flat_index_of<F: Real>(
    store: &ParamStore<F>,
    layout: &TrainableLayout,
    name: &str,
    coord: &[usize],
) -> Option<usize> {
    let id = store.find(name)?;
    let off = layout.offset(id)?;
    let shape = store.entry(id).value.shape().to_vec();
    let mut stride = 1usize;
    let mut idx = 0usize;
    for (d, c) in shape.iter().rev().zip(coord.iter().rev()) {
        idx += c * stride;
        stride *= d;
    }
    Some(off + idx)
}
