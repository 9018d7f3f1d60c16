//! Named parameter store with freeze semantics.

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Val};
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;

/// Ordered name -> tensor map. Frozen names are excluded from optimizer
/// updates and must stay bit-identical across steps.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Scalar = f32> {
    params: IndexMap<String, Tensor<E>>,
    frozen: BTreeSet<String>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        t.set_requires_grad(true);
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }
}

impl ParamStore<f32> {
    /// SHA-256 over the little-endian payloads of all parameters whose name
    /// starts with `prefix`, in store order. Used for bit-exact freeze checks.
    pub fn checksum(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                h.update(t.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Tape bindings for a store's parameters, name -> leaf value.
pub struct Bound {
    vals: IndexMap<String, Val>,
}

impl Bound {
    pub fn val(&self, name: &str) -> Val {
        *self
            .vals
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Val)> {
        self.vals.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Register every parameter as a tape leaf.
pub fn bind_params<E: Scalar>(tape: &mut Tape<E>, store: &ParamStore<E>) -> Bound {
    let mut vals = IndexMap::new();
    for (name, t) in store.iter() {
        vals.insert(name.to_string(), tape.leaf(t.clone()));
    }
    Bound { vals }
}

/// Gradients of a recorded scalar loss with respect to every non-frozen
/// parameter. Parameters the loss never touched come back as zero tensors.
pub fn grad<E: Scalar>(
    tape: &Tape<E>,
    loss: Val,
    bound: &Bound,
    store: &ParamStore<E>,
) -> Result<IndexMap<String, Tensor<E>>> {
    let grads: Gradients<E> = tape.backward(loss)?;
    let mut out = IndexMap::new();
    for (name, t) in store.iter() {
        if store.is_frozen(name) {
            continue;
        }
        let g = match grads.wrt(bound.val(name)) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape().to_vec()),
        };
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn grad_zero_for_unreachable_params() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("used", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        ps.insert("unused", Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &ps);
        let w = bound.val("used");
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = grad(&tape, loss, &bound, &ps).unwrap();
        assert_eq!(g["used"].data(), &[2.0, 4.0]);
        assert_eq!(g["unused"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_params_excluded_from_grad_map() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("a", Tensor::from_vec(vec![1], vec![2.0]).unwrap())
            .unwrap();
        ps.insert("b", Tensor::from_vec(vec![1], vec![3.0]).unwrap())
            .unwrap();
        ps.freeze("b");
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &ps);
        let s = tape.add(bound.val("a"), bound.val("b")).unwrap();
        let s2 = tape.mul(s, s).unwrap();
        let loss = tape.sum(s2).unwrap();
        let g = grad(&tape, loss, &bound, &ps).unwrap();
        assert!(g.contains_key("a"));
        assert!(!g.contains_key("b"));
    }

    #[test]
    fn checksum_tracks_prefix_content() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("lm.w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        ps.insert("dec.w", Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let before = ps.checksum("dec.");
        ps.get_mut("lm.w").unwrap().data_mut()[0] = 9.0;
        assert_eq!(before, ps.checksum("dec."));
        ps.get_mut("dec.w").unwrap().data_mut()[0] = 9.0;
        assert_ne!(before, ps.checksum("dec."));
    }
}
