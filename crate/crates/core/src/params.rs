//! Named parameter sets and their graph bindings.
//!
//! Parameters live in a `BTreeMap` so iteration order (and therefore
//! optimizer update order and checkpoint layout) is deterministic.

use std::collections::BTreeMap;

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Glorot-uniform bound for a weight with the given fan-in/fan-out.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Weight initialized uniform in +/- sqrt(6/(fan_in+fan_out)).
pub fn glorot<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let b = glorot_bound(fan_in, fan_out);
    Tensor::uniform(shape, -b, b, rng)
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let prev = self.entries.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Merge another set under a key prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: Params) {
        for (name, t) in other.entries {
            self.insert(&format!("{prefix}.{name}"), t);
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> Params {
        let lead = format!("{prefix}.");
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&lead).map(|rest| (rest.to_string(), v.clone()))
            })
            .collect();
        Params { entries }
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Insert every tensor as a graph input, keeping the name -> node map.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), g.input(t.clone())))
            .collect();
        Binding { ids }
    }
}

/// Graph nodes for a bound [`Params`].
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    /// Assemble a binding from existing nodes (used by gradient checks that
    /// need to perturb parameter inputs themselves).
    pub fn from_ids(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Binding { ids: pairs.into_iter().collect() }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iteration_order_is_name_sorted() {
        let mut p = Params::new();
        p.insert("z", Tensor::scalar(1.0));
        p.insert("a", Tensor::scalar(2.0));
        p.insert("m", Tensor::scalar(3.0));
        let names: Vec<&String> = p.names().collect();
        assert_eq!(names, ["a", "m", "z"]);
    }

    #[test]
    fn glorot_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = glorot(&[64, 32], 64, 32, &mut rng);
        let b = glorot_bound(64, 32);
        assert!(t.data().iter().all(|v| v.abs() <= b));
    }
}
