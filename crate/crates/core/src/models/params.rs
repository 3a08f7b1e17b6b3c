use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensors of one network, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the graph, as variables or constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for the bound nodes; parameters that did not influence
    /// the root get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients<S>, bound: &[NodeId]) -> Vec<Tensor<S>> {
        bound
            .iter()
            .zip(&self.tensors)
            .map(|(&id, t)| {
                grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for &x in t.data() {
                h.update(x.f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_single_bit_changes() {
        let mut p = ParamStore::<f32>::new();
        p.push("w", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let before = p.hash();
        assert_eq!(before, p.clone().hash());
        p.tensors_mut()[0].data_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert_ne!(before, p.hash());
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut p = ParamStore::<f64>::new();
        p.push("a", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        p.push("b", Tensor::from_vec(1, 1, vec![5.0]));
        let mut g = Graph::new();
        let ids = p.bind(&mut g, true);
        let s = g.sum(ids[0]);
        let mut grads = g.backward(s);
        let out = p.collect_grads(&mut grads, &ids);
        assert_eq!(out[0].data(), &[1.0, 1.0]);
        assert_eq!(out[1].data(), &[0.0]);
    }
}
