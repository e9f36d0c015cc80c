//! Named parameter tensors with partition tags and Glorot initialization.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{IrweError, Result};
use crate::nn::tape::{Tape, Var};

/// Which optimizer group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Partition {
    /// Identity-module parameters (autoencoder, reducer, identity attention).
    Identity,
    /// Position-module parameters (reweighting, fusion, transformer, readout).
    Position,
    /// Never updated (the random projection matrix).
    Frozen,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    tensors: BTreeMap<String, (Array2<f64>, Partition)>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>, part: Partition) {
        assert!(
            self.tensors
                .insert(name.to_owned(), (value, part))
                .is_none(),
            "duplicate parameter `{name}`"
        );
    }

    /// Glorot-uniform weight of the given shape.
    pub fn init_weight(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        part: Partition,
        rng: &mut ChaCha12Rng,
    ) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.insert(name, w, part);
    }

    /// Zero bias stored as a 1xN row.
    pub fn init_bias(&mut self, name: &str, cols: usize, part: Partition) {
        self.insert(name, Array2::zeros((1, cols)), part);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .0
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        &mut self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .0
    }

    pub fn partition(&self, name: &str) -> Partition {
        self.tensors[name].1
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn names_in(&self, part: Partition) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, (_, p))| *p == part)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, (t, _)) in &self.tensors {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(IrweError::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>, Partition)> {
        self.tensors.iter().map(|(n, (t, p))| (n, t, *p))
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-forward binding of parameters to tape leaves so a backward pass can
/// map node gradients back to parameter names.
pub struct Binding {
    bound: Vec<(String, Var)>,
}

impl Binding {
    pub fn new() -> Binding {
        Binding { bound: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ParamStore, name: &str) -> Var {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let v = tape.leaf(params.get(name).clone());
        self.bound.push((name.to_owned(), v));
        v
    }

    /// Extract gradients for every bound parameter after `tape.backward`.
    pub fn grads(&self, node_grads: &[Array2<f64>]) -> Vec<(String, Array2<f64>)> {
        self.bound
            .iter()
            .map(|(n, v)| (n.clone(), node_grads[v.0].clone()))
            .collect()
    }
}

impl Default for Binding {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::child_rng;

    #[test]
    fn glorot_bounds_and_partitions() {
        let mut ps = ParamStore::new();
        let mut rng = child_rng(1, "init", 0);
        ps.init_weight("w", 30, 20, Partition::Identity, &mut rng);
        ps.init_bias("b", 20, Partition::Position);
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(ps.get("w").iter().all(|&x| x.abs() < bound));
        assert!(ps.get("b").iter().all(|&x| x == 0.0));
        assert_eq!(ps.names_in(Partition::Identity), vec!["w".to_string()]);
        assert_eq!(ps.names_in(Partition::Position), vec!["b".to_string()]);
        assert!(ps.check_finite().is_ok());
        ps.get_mut("w")[[0, 0]] = f64::NAN;
        assert!(matches!(
            ps.check_finite(),
            Err(IrweError::NonFinite(n)) if n == "w"
        ));
    }

    #[test]
    fn binding_dedupes_and_reports_grads() {
        let mut ps = ParamStore::new();
        ps.insert(
            "w",
            Array2::from_shape_fn((2, 2), |(i, j)| (i + j) as f64),
            Partition::Identity,
        );
        let mut tape = Tape::new();
        let mut b = Binding::new();
        let v1 = b.bind(&mut tape, &ps, "w");
        let v2 = b.bind(&mut tape, &ps, "w");
        assert_eq!(v1, v2);
        let loss = tape.sum_squares(v1);
        let grads = tape.backward(loss);
        let out = b.grads(&grads);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, ps.get("w") * 2.0);
    }
}
