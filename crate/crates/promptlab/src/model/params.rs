//! Named, ordered parameter storage shared by both encoder branches.

use crate::tensor::{Data, Gradients, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Flat ordered map of named tensors. Order is fixed at construction, which
/// keeps optimizer sweeps and checkpoints deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Data)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, data: Data) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter {name}"
        );
        self.entries.push((name.to_string(), data));
    }

    pub fn get(&self, name: &str) -> &Data {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Data)> {
        self.entries.iter().map(|(n, d)| (n.as_str(), d))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Data)> {
        self.entries.iter_mut().map(|(n, d)| (n.as_str(), d))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, d)| d.len()).sum()
    }

    /// Put every parameter on a tape as a leaf, preserving order.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            entries: self
                .entries
                .iter()
                .map(|(n, d)| (n.clone(), tape.leaf(d.clone())))
                .collect(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape leaves for one forward pass, in the same order as the store.
pub struct ParamVars<'t> {
    entries: Vec<(String, Var<'t>)>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collect (name, gradient) pairs for every parameter leaf.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(String, Data)> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), grads.get(*v)))
            .collect()
    }
}

/// Xavier-uniform weight matrix.
pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Data {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Data::matrix(rows, cols, values)
}

/// Small-uniform token-style initialization.
pub fn init_tokens(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Data {
    let values = (0..rows * cols).map(|_| rng.gen_range(-0.05..0.05)).collect();
    Data::matrix(rows, cols, values)
}

pub fn ones(n: usize) -> Data {
    Data::vector(vec![1.0; n])
}

pub fn zeros_vec(n: usize) -> Data {
    Data::vector(vec![0.0; n])
}
