//! Flat store of named, shaped parameter tensors.
//!
//! Layout structs elsewhere hold [`ParamId`]s into a store; binding the
//! store to a [`Tape`] turns each entry into a gradient-tracked leaf.
//! Values sit behind `Arc` so many tapes can bind the same parameters
//! concurrently without copying; the optimizer mutates them between steps
//! via [`ParamStore::value_mut`].

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn index_of(&self, id: ParamId) -> usize {
        id.0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    /// Mutable view of one parameter's values. Copies only if another
    /// tape still holds the previous snapshot.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn value_mut_at(&mut self, index: usize) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[index].value)
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.entries.push(ParamEntry {
            name,
            shape,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    /// Bind every entry to `tape` as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundParams<'t>> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            tensors.push(tape.leaf_shared(Arc::clone(&e.value), &e.shape, true)?);
        }
        Ok(BoundParams { tensors })
    }
}

/// Per-tape leaf tensors for every parameter of a store, in store order.
pub struct BoundParams<'t> {
    tensors: Vec<Tensor<'t>>,
}

impl<'t> Index<ParamId> for BoundParams<'t> {
    type Output = Tensor<'t>;

    fn index(&self, id: ParamId) -> &Tensor<'t> {
        &self.tensors[id.0]
    }
}

impl<'t> BoundParams<'t> {
    /// Gradients accumulated on the tape, in store order; zeros where no
    /// gradient flowed.
    pub fn gradients(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(store.entries())
            .map(|(t, e)| t.grad().unwrap_or_else(|| vec![0.0; e.numel()]))
            .collect()
    }
}

/// Affine map parameters: weight `[d_in, d_out]` plus bias `[d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

/// Depthwise convolution parameters: kernels `[C, K]` plus bias `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub kernels: ParamId,
    pub bias: ParamId,
}

/// Layer-norm parameters: gain (ones) and shift (zeros), both `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

/// Allocates named parameters with deterministic seeded initialization.
/// Entry order is the allocation order, so identical construction code and
/// seed always yield bit-identical stores.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    scope: Vec<String>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            scope: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn qualified(&self, name: &str) -> String {
        if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.scope.join("."))
        }
    }

    /// Uniform in `(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let value: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.push(self.qualified(name), shape.to_vec(), value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.push(self.qualified(name), shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.push(self.qualified(name), shape.to_vec(), vec![1.0; n])
    }

    /// Weight uniform with bound `1/sqrt(d_in)`, bias zeros.
    pub fn affine(&mut self, name: &str, d_in: usize, d_out: usize) -> Affine {
        self.scoped(name, |pb| {
            let bound = 1.0 / (d_in as f64).sqrt();
            Affine {
                w: pb.uniform("w", &[d_in, d_out], bound),
                b: pb.zeros("b", &[d_out]),
            }
        })
    }

    /// Kernels uniform with bound `1/sqrt(K)`, bias zeros.
    pub fn depthwise(&mut self, name: &str, channels: usize, kernel: usize) -> Conv {
        self.scoped(name, |pb| {
            let bound = 1.0 / (kernel as f64).sqrt();
            Conv {
                kernels: pb.uniform("kernels", &[channels, kernel], bound),
                bias: pb.zeros("bias", &[channels]),
            }
        })
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Norm {
        self.scoped(name, |pb| Norm {
            gain: pb.ones("gain", &[dim]),
            shift: pb.zeros("shift", &[dim]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_names_and_determinism() {
        let build = |seed| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            pb.scoped("layer.0", |pb| {
                pb.affine("proj", 4, 3);
                pb.norm("norm", 4);
            });
            store
        };
        let a = build(7);
        let b = build(7);
        let names: Vec<&str> = a.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "layer.0.proj.w",
                "layer.0.proj.b",
                "layer.0.norm.gain",
                "layer.0.norm.shift"
            ]
        );
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.total_params(), 4 * 3 + 3 + 4 + 4);
        let c = build(8);
        assert_ne!(a.entries()[0].value, c.entries()[0].value);
    }

    #[test]
    fn bind_tracks_gradients_per_entry() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let a = pb.uniform("a", &[2], 1.0);
        let _b = pb.zeros("b", &[3]);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        bound[a].sum_all().backward().unwrap();
        let grads = bound.gradients(&store);
        assert_eq!(grads[0], vec![1.0, 1.0]);
        assert_eq!(grads[1], vec![0.0; 3]);
    }
}
