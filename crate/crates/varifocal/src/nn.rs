//! Layer building blocks: thin structs owning [`ParamId`]s plus forward
//! methods that record onto a [`Session`] graph.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::ops::norm::RunningStats;
use crate::ops::BnMode;
use crate::params::{he_conv_weight, he_linear_weight, ParamId, ParamStore, Session};
use crate::tensor::{Element, Tensor};

/// Convolution layer with square kernel. Weights are He-normal, biases zero.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), he_conv_weight(&[c_out, c_in, k, k], rng));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let w = sess.param(store, self.weight);
        let b = sess.param(store, self.bias);
        sess.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully-connected layer, He-normal weights and zero biases.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), he_linear_weight(&[d_out, d_in], rng));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias }
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let w = sess.param(store, self.weight);
        let b = sess.param(store, self.bias);
        sess.graph.fully_connected(x, w, b)
    }
}

/// Batch normalization layer. Gamma starts at 1, beta at 0; running
/// statistics live in the store as non-trainable buffers so checkpoints
/// carry them.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// 1-element flag tensor: nonzero once train mode populated the stats.
    pub running_init: ParamId,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Shared BN internals: epsilon and EMA momentum of the running statistics.
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Tensor::filled(&[channels], E::one()));
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean =
            store.register_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var =
            store.register_buffer(format!("{name}.running_var"), Tensor::filled(&[channels], E::one()));
        let running_init = store.register_buffer(format!("{name}.running_init"), Tensor::zeros(&[1]));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            running_init,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &mut ParamStore<E>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let g = sess.param(store, self.gamma);
        let b = sess.param(store, self.beta);
        let mut rs = RunningStats {
            mean: store.value(self.running_mean).clone(),
            var: store.value(self.running_var).clone(),
            initialized: store.value(self.running_init).item()?.to_f64() > 0.5,
        };
        let y = sess
            .graph
            .batch_norm2d(x, g, b, mode, &mut rs, self.epsilon, self.momentum)?;
        if mode == BnMode::Train {
            *store.value_mut(self.running_mean) = rs.mean;
            *store.value_mut(self.running_var) = rs.var;
            *store.value_mut(self.running_init) = Tensor::filled(&[1], E::one());
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::seeded_rng;

    #[test]
    fn bn_layer_keeps_running_stats_in_store() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let mut sess = Session::new(Graph::new());
        let x = sess
            .graph
            .leaf(Tensor::from_vec(vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap(), false);
        bn.forward(&mut sess, &mut store, x, BnMode::Train).unwrap();
        assert!(store.value(bn.running_init).item().unwrap() > 0.5);
        assert!(store.value(bn.running_mean).data().iter().any(|&v| v != 0.0));

        // eval mode now works and leaves the stats untouched
        let snap = store.value(bn.running_mean).clone();
        let mut sess = Session::new(Graph::new());
        let x = sess.graph.leaf(Tensor::filled(&[1, 2, 2, 2], 1.0f32), false);
        bn.forward(&mut sess, &mut store, x, BnMode::Eval).unwrap();
        assert!(store.value(bn.running_mean).bit_eq(&snap));
    }

    #[test]
    fn conv_layer_same_seed_same_weights() {
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        let c1 = Conv2d::new(&mut s1, &mut seeded_rng(11, "c"), "c", 3, 8, 3, 1, 1);
        let c2 = Conv2d::new(&mut s2, &mut seeded_rng(11, "c"), "c", 3, 8, 3, 1, 1);
        assert!(s1.value(c1.weight).bit_eq(s2.value(c2.weight)));
    }
}
