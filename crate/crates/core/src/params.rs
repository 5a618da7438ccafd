//! Named parameter storage, grouping, freeze flags and checksums.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Receives gradients when its group is trainable.
    Weight,
    /// Running statistics; updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Matrix,
}

impl Param {
    /// The submodule a parameter belongs to: everything before the first `.`.
    pub fn group(&self) -> &str {
        group_of(&self.name)
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Summary of one named submodule's parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub name: String,
    pub trainable: bool,
    pub checksum: String,
    pub num_values: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, kind, value });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Group names in first-insertion order.
    pub fn group_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.iter().any(|g| g == p.group()) {
                out.push(p.group().to_string());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values of every
    /// parameter (weights and buffers) in `group`.
    pub fn group_checksum(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group() == group) {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.group_names().into_iter().map(|g| {
            let c = self.group_checksum(&g);
            (g, c)
        }).collect()
    }

    pub fn group_size(&self, group: &str) -> usize {
        self.params.iter().filter(|p| p.group() == group).map(|p| p.value.len()).sum()
    }
}

/// 64-bit FNV-1a, used to derive per-parameter RNG streams from names.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Normal(0, std) initialization with an RNG stream keyed by `(seed, name)`,
/// so a parameter's initial value does not depend on which other
/// submodules exist.
pub fn init_normal(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
}

/// Binds stored parameters into a [`Graph`] at most once per forward pass.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    grads: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Binder<'a> {
    /// `grads = false` binds everything as constants (inference).
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a, grads: bool) -> Self {
        Self { store, trainable: Box::new(trainable), grads, bound: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str) -> Var {
        let id = self.store.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let req = self.grads && p.kind == ParamKind::Weight && (self.trainable)(p.group());
        let v = g.leaf(p.value.clone(), req);
        self.bound.insert(id, v);
        v
    }

    /// Every bound parameter with its graph variable, in id order.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        v.sort_by_key(|(p, _)| *p);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_values_per_group() {
        let mut s = ParamStore::new();
        let a = s.insert("encoder.w", ParamKind::Weight, Matrix::zeros(2, 2));
        s.insert("emoe.w", ParamKind::Weight, Matrix::zeros(2, 2));
        let enc = s.group_checksum("encoder");
        let emoe = s.group_checksum("emoe");
        s.value_mut(a).set(0, 0, 1.0);
        assert_ne!(s.group_checksum("encoder"), enc);
        assert_eq!(s.group_checksum("emoe"), emoe);
        assert_eq!(s.group_names(), vec!["encoder", "emoe"]);
    }

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let a = init_normal(3, "emoe.l1.e1.w", 2, 3, 1.0);
        let _ = init_normal(3, "other", 5, 5, 1.0);
        assert_eq!(a, init_normal(3, "emoe.l1.e1.w", 2, 3, 1.0));
        assert_ne!(a, init_normal(3, "emoe.l1.e2.w", 2, 3, 1.0));
    }
}
