//! Named parameter and buffer storage shared by the networks.
//!
//! Every layer owns [`ParamId`]s into one [`ParamStore`]. The store keeps,
//! per entry, the value, a gradient of identical shape, a trainable flag and
//! lazily-created Adam state. Freezing a subnet between training phases is a
//! matter of flipping trainable flags; a frozen parameter is bound into
//! graphs without gradient tracking, so no compute is spent on it.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Element, Tensor};

/// Handle to one parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub trainable: bool,
    /// Buffers (running statistics, flags) are never trainable and are
    /// skipped when phases re-enable parameter groups.
    pub buffer: bool,
    pub adam: Option<AdamState<E>>,
}

/// Flat registry of named tensors: trainable weights plus frozen buffers.
#[derive(Debug, Default)]
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    by_name: HashMap<String, ParamId>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.register_inner(name.into(), value, false)
    }

    /// Registers a non-trainable buffer (running statistics and the like).
    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        self.register_inner(name.into(), value, true)
    }

    fn register_inner(&mut self, name: String, value: Tensor<E>, buffer: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            trainable: !buffer,
            buffer,
            adam: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_adam(&mut self, id: ParamId, state: Option<AdamState<E>>) {
        self.entries[id.0].adam = state;
    }

    /// Marks every parameter non-trainable. Training phases then re-enable
    /// exactly the sets they own.
    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    /// Freezes everything, then re-enables non-buffer parameters whose name
    /// starts with any of the prefixes.
    pub fn enable_only(&mut self, prefixes: &[&str]) {
        for e in &mut self.entries {
            e.trainable = !e.buffer && prefixes.iter().any(|p| e.name.starts_with(p));
        }
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(E::zero());
        }
    }

    /// Accumulates `g` into the parameter's gradient.
    pub fn add_grad(&mut self, id: ParamId, g: &Tensor<E>) -> Result<()> {
        self.entries[id.0].grad.add_assign(g)
    }

    /// Adam update on every trainable parameter with the given rate.
    pub fn adam_step_all(&mut self, cfg: &AdamConfig, lr: f64) -> Result<()> {
        for e in &mut self.entries {
            if !e.trainable {
                continue;
            }
            let st = e
                .adam
                .get_or_insert_with(|| AdamState::new(e.value.shape()));
            adam_step(&mut e.value, &e.grad, st, cfg, lr)?;
        }
        Ok(())
    }

    /// Byte-identical snapshot of all values, used by freeze-contract tests.
    pub fn snapshot(&self) -> Vec<Tensor<E>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Indices whose values differ bitwise from the snapshot.
    pub fn changed_since(&self, snapshot: &[Tensor<E>]) -> Vec<String> {
        self.entries
            .iter()
            .zip(snapshot)
            .filter(|(e, s)| !e.value.bit_eq(s))
            .map(|(e, _)| e.name.clone())
            .collect()
    }
}

/// One forward/backward session binding store parameters into a graph.
///
/// Parameters bind lazily and at most once per graph, so a shared subnet
/// invoked twice reuses its nodes' leaves.
pub struct Session<E: Element> {
    pub graph: Graph<E>,
    bound: HashMap<ParamId, Var>,
    inference: bool,
}

impl<E: Element> Session<E> {
    pub fn new(graph: Graph<E>) -> Self {
        Self {
            graph,
            bound: HashMap::new(),
            inference: false,
        }
    }

    /// A session that binds every parameter without gradient tracking,
    /// regardless of trainable flags.
    pub fn inference(graph: Graph<E>) -> Self {
        Self {
            graph,
            bound: HashMap::new(),
            inference: true,
        }
    }

    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let e = store.entry(id);
        let var = self.graph.leaf(e.value.clone(), e.trainable && !self.inference);
        self.bound.insert(id, var);
        var
    }

    /// Runs backward from `loss` and accumulates parameter gradients.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<E>) -> Result<()> {
        self.graph.backward(loss)?;
        self.collect_grads(store)
    }

    /// Backward from an externally supplied gradient seed.
    pub fn backward_seeded(
        &mut self,
        var: Var,
        seed: Tensor<E>,
        store: &mut ParamStore<E>,
    ) -> Result<()> {
        self.graph.backward_seeded(var, seed)?;
        self.collect_grads(store)
    }

    fn collect_grads(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        let mut ids: Vec<(ParamId, Var)> = self.bound.iter().map(|(k, v)| (*k, *v)).collect();
        ids.sort_by_key(|(id, _)| id.0);
        for (id, var) in ids {
            if let Some(g) = self.graph.grad(var) {
                let g = g.clone();
                store.add_grad(id, &g)?;
            }
        }
        Ok(())
    }
}

/// He-normal initialization for a convolution weight `[C_out, C_in, k, k]`:
/// zero-mean normal with variance `2 / (C_in * k * k)`.
pub fn he_conv_weight<E: Element>(
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    let fan_in: usize = shape[1..].iter().product();
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// He-normal initialization for a linear weight `[D_out, D_in]`.
pub fn he_linear_weight<E: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    let fan_in = shape[1];
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn normal_tensor<E: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("volume matches")
}

/// Deterministic RNG stream derived from a root seed and a label, so every
/// consumer owns an independent stream regardless of call order.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = 0xcbf29ce484222325u64; // FNV-1a
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_matches_value_shape_and_zeroes() {
        let mut store = ParamStore::<f32>::new();
        let id = store.register("w", Tensor::filled(&[2, 3], 1.0));
        assert_eq!(store.grad(id).shape(), store.value(id).shape());
        store.add_grad(id, &Tensor::filled(&[2, 3], 2.0)).unwrap();
        assert_eq!(store.grad(id).data()[0], 2.0);
        store.zero_grad();
        assert!(store.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::filled(&[2], 3.0));
        let mut s = Session::new(Graph::new());
        let a = s.param(&store, id);
        let b = s.param(&store, id);
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", Tensor::filled(&[3], 2.0));
        store.set_trainable(id, false);
        let mut s = Session::new(Graph::new());
        let w = s.param(&store, id);
        let y = s.graph.relu(w);
        let l = s.graph.sum_all(y);
        s.backward(l, &mut store).unwrap();
        assert!(store.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_statistics() {
        // variance ~ 2 / fan_in within 20% over >= 10k draws
        let mut rng = seeded_rng(7, "he-test");
        let w = he_conv_weight::<f64>(&[20, 64, 3, 3], &mut rng);
        let n = w.len() as f64;
        assert!(n >= 10_000.0);
        let mean = w.sum_f64() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = 2.0 / 576.0;
        assert!((var - want).abs() < 0.2 * want, "var {var} vs {want}");
    }

    #[test]
    fn seeded_rng_is_reproducible_and_label_dependent() {
        use rand::RngCore;
        let a = seeded_rng(1, "x").next_u64();
        let b = seeded_rng(1, "x").next_u64();
        let c = seeded_rng(1, "y").next_u64();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
