use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Ordered collection of named trainable tensors.
///
/// Insertion order is the serialization order, so two stores built by the
/// same code are byte-identical on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<F> {
    entries: IndexMap<String, Tensor<F>>,
}

impl<F: Element> Params<F> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.entries.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.entries.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Records the named parameter as a graph leaf.
    pub fn leaf(&self, graph: &mut Graph<F>, name: &str) -> Result<Var> {
        let (index, _, tensor) = self
            .entries
            .get_full(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        graph.param_leaf(index, tensor.clone())
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds every parameter-leaf gradient of a finished graph into the
    /// matching tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, graph: &Graph<F>) -> Result<()> {
        for (index, grad) in graph.param_grads() {
            let (_, tensor) = self
                .entries
                .get_index_mut(index)
                .ok_or_else(|| Error::Contract(format!("graph refers to parameter #{index}")))?;
            tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn cast<G: Element>(&self) -> Params<G> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Human-readable list of names and shapes that differ, or `None` when
    /// both stores agree on every name and shape.
    pub fn layout_diff(&self, other: &Params<F>) -> Option<String> {
        let mut lines = Vec::new();
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => lines.push(format!("  - {name} {:?} (expected, missing)", t.shape())),
                Some(o) if o.shape() != t.shape() => lines.push(format!(
                    "  ~ {name}: expected {:?}, found {:?}",
                    t.shape(),
                    o.shape()
                )),
                _ => {}
            }
        }
        for (name, t) in &other.entries {
            if !self.entries.contains_key(name) {
                lines.push(format!("  + {name} {:?} (unexpected)", t.shape()));
            }
        }
        (!lines.is_empty()).then(|| lines.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_flow_back_by_name() {
        let mut p = Params::<f64>::new();
        p.insert("a", Tensor::full([2], 2.0));
        p.insert("b", Tensor::full([2], 3.0));
        let mut g = Graph::new();
        let a = p.leaf(&mut g, "a").unwrap();
        let b = p.leaf(&mut g, "b").unwrap();
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        p.accumulate_grads(&g).unwrap();
        assert_eq!(p.get("a").unwrap().grad().unwrap(), &[3.0, 3.0]);
        assert_eq!(p.get("b").unwrap().grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn layout_diff_lists_each_difference() {
        let mut a = Params::<f32>::new();
        a.insert("x", Tensor::zeros([2]));
        a.insert("y", Tensor::zeros([3]));
        let mut b = Params::<f32>::new();
        b.insert("x", Tensor::zeros([4]));
        b.insert("z", Tensor::zeros([1]));
        let diff = a.layout_diff(&b).unwrap();
        assert!(diff.contains("~ x"));
        assert!(diff.contains("- y"));
        assert!(diff.contains("+ z"));
        assert!(a.layout_diff(&a.clone()).is_none());
    }
}
