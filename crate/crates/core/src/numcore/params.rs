use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Named, insertion-ordered parameter tensors.
///
/// Gradients use the same type: a gradient store has exactly the names and
/// shapes of the parameters it belongs to (see [`ParamStore::zeros_like`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self { entries: IndexMap::new(), rng_seed }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Misaligned(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Misaligned(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Misaligned(format!("no parameter named `{name}`")))
    }

    /// Slice of a parameter's data; panics on unknown names, which are a
    /// programming error once a model has been built against this store.
    pub fn slice(&self, name: &str) -> &[f64] {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .data()
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .data_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every entry from a flat vector laid out as [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Misaligned(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for t in self.entries.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Names present in exactly one of the two stores, or with differing shapes.
    pub fn alignment_diff(&self, other: &ParamStore) -> Vec<String> {
        let mut diff = Vec::new();
        for (k, v) in &self.entries {
            match other.entries.get(k) {
                None => diff.push(format!("-{k}")),
                Some(o) if o.shape() != v.shape() => {
                    diff.push(format!("~{k} {:?} vs {:?}", v.shape(), o.shape()))
                }
                _ => {}
            }
        }
        for k in other.entries.keys() {
            if !self.entries.contains_key(k) {
                diff.push(format!("+{k}"));
            }
        }
        diff
    }

    pub fn ensure_aligned(&self, other: &ParamStore) -> Result<()> {
        let diff = self.alignment_diff(other);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Misaligned(diff.join(", ")))
        }
    }

    /// `self += scale · other`; stores must be aligned.
    pub fn add_scaled(&mut self, scale: f64, other: &ParamStore) -> Result<()> {
        self.ensure_aligned(other)?;
        for (t, o) in self.entries.values_mut().zip(other.entries.values()) {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Deterministic parameter initializer seeded from a store's `rng_seed`.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Weight matrix `rows × cols`, uniform in `±sqrt(1/cols)`.
    pub fn linear(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize) -> Result<()> {
        let bound = (1.0 / cols.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        store.insert(name, Tensor::new(vec![rows, cols], data)?)
    }

    pub fn zeros(&mut self, store: &mut ParamStore, name: &str, n: usize) -> Result<()> {
        store.insert(name, Tensor::zeros(&[n]))
    }

    pub fn ones(&mut self, store: &mut ParamStore, name: &str, n: usize) -> Result<()> {
        store.insert(name, Tensor::filled(&[n], 1.0))
    }
}
