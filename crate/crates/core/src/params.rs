//! Named parameter storage and graph binding.
//!
//! All model parameters live in a flat [`ParamStore`] keyed by dotted names
//! (`backbone.layer0.attn.wq`, `adapter.fac.layer2.up.w`, ...). The dotted
//! prefixes are the unit of freezing and of checkpoint selection. A
//! [`Binder`] inserts parameters into a [`Graph`] as leaves, once each, with
//! `requires_grad` cleared for any name matched by a freeze prefix — frozen
//! parameters therefore never receive gradient storage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::rng::Rng;

/// Ordered name → tensor map. Iteration order is the sorted name order,
/// which is what makes checkpoints and optimizer sweeps canonical.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Insert a trainable parameter initialized from `sigma`-scaled normals.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], sigma: f64, rng: &mut Rng) {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.normal(sigma)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("valid shape").trainable();
        self.insert(name, t);
    }

    /// Insert a trainable parameter filled with a constant.
    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) {
        let numel: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), vec![value; numel])
            .expect("valid shape")
            .trainable();
        self.insert(name, t);
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.params.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of scalars across parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> u64 {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    /// Clone the sub-store of parameters whose name starts with any prefix.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        ParamStore { params }
    }

    /// Copy every entry of `other` into this store, overwriting collisions.
    pub fn merge(&mut self, other: &ParamStore) {
        for (name, t) in other.iter() {
            self.params.insert(name.clone(), t.clone());
        }
    }

    /// Drop all gradients.
    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.set_grad(None);
        }
    }
}

/// Binds store parameters into a graph, once per name, honoring freezing.
pub struct Binder<'s> {
    store: &'s ParamStore,
    freeze_prefixes: Vec<String>,
    bound: BTreeMap<String, Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, freeze_prefixes: &[String]) -> Self {
        Binder {
            store,
            freeze_prefixes: freeze_prefixes.to_vec(),
            bound: BTreeMap::new(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.freeze_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Graph leaf for the named parameter, inserting it on first use.
    pub fn var(&mut self, graph: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self
            .store
            .get(name)
            .ok_or_else(|| Error::Configuration(format!("unknown parameter {name:?}")))?;
        let mut leaf = tensor.clone();
        leaf.set_grad(None);
        leaf.set_requires_grad(tensor.requires_grad() && !self.is_frozen(name));
        let v = graph.leaf(leaf);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names and graph handles of everything bound so far.
    pub fn bound(&self) -> impl Iterator<Item = (&String, Var)> {
        self.bound.iter().map(|(n, &v)| (n, v))
    }

    /// After a backward sweep, gather gradients for every bound trainable
    /// non-frozen parameter (zeros when the parameter did not reach the
    /// loss). Frozen parameters are absent from the result.
    pub fn collect_grads(&self, graph: &Graph) -> BTreeMap<String, Vec<f64>> {
        let mut grads = BTreeMap::new();
        for (name, &v) in &self.bound {
            if self.is_frozen(name) {
                continue;
            }
            let tensor = graph.value(v);
            if !tensor.requires_grad() {
                continue;
            }
            let grad = graph
                .grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            grads.insert(name.clone(), grad);
        }
        grads
    }
}

/// Attach collected gradients to the store's tensors. Parameters without an
/// entry (frozen or unbound) keep no gradient.
pub fn apply_grads(store: &mut ParamStore, grads: BTreeMap<String, Vec<f64>>) {
    for (name, grad) in grads {
        if let Some(t) = store.get_mut(&name) {
            t.set_grad(Some(grad));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names: &[&str]) -> ParamStore {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        for n in names {
            store.insert_normal(n, &[2, 2], 0.02, &mut rng);
        }
        store
    }

    #[test]
    fn binder_reuses_vars() {
        let store = store_with(&["a.w"]);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, &[]);
        let v1 = b.var(&mut g, "a.w").unwrap();
        let v2 = b.var(&mut g, "a.w").unwrap();
        assert_eq!(v1, v2);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn frozen_prefix_clears_requires_grad() {
        let store = store_with(&["backbone.w", "adapter.w"]);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, &["backbone.".to_string()]);
        let frozen = b.var(&mut g, "backbone.w").unwrap();
        let live = b.var(&mut g, "adapter.w").unwrap();
        assert!(!g.value(frozen).requires_grad());
        assert!(g.value(live).requires_grad());
    }

    #[test]
    fn collected_grads_skip_frozen() {
        let mut store = store_with(&["backbone.w", "adapter.w"]);
        let grads = {
            let mut g = Graph::new();
            let mut b = Binder::new(&store, &["backbone.".to_string()]);
            let frozen = b.var(&mut g, "backbone.w").unwrap();
            let live = b.var(&mut g, "adapter.w").unwrap();
            let sum_f = g.sum(frozen);
            let sum_l = g.sum(live);
            let loss = g.add(sum_f, sum_l).unwrap();
            g.backward(loss).unwrap();
            b.collect_grads(&g)
        };
        assert!(!grads.contains_key("backbone.w"));
        apply_grads(&mut store, grads);
        assert!(store.get("backbone.w").unwrap().grad().is_none());
        assert_eq!(store.get("adapter.w").unwrap().grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn unknown_parameter_is_configuration_error() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut b = Binder::new(&store, &[]);
        assert!(matches!(
            b.var(&mut g, "nope"),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn subset_and_count() {
        let store = store_with(&["a.w", "a.b", "c.w"]);
        assert_eq!(store.count_scalars("a."), 8);
        let sub = store.subset(&["a."]);
        assert_eq!(sub.len(), 2);
        assert!(!sub.contains("c.w"));
    }
}
