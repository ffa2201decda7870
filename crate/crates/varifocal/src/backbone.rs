//! Shared feature extractor: one stem convolution, three wide residual
//! blocks of four pre-activation units, then a final BN + ReLU.
//!
//! The first unit of each block doubles the channel count and halves the
//! spatial extent through a strided convolution, so the extractor always
//! downsamples by exactly 8: a `1 x S x S` image becomes `C_f x S/8 x S/8`
//! with `C_f = round(640 * width_scale)` channels. `width_scale = 1`
//! reproduces the full-size feature dimensions (640 x 32 x 32 from 256 px
//! inputs); smaller scales shrink every width proportionally for desk-scale
//! training.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{BatchNorm2d, Conv2d};
use crate::ops::BnMode;
use crate::params::{ParamStore, Session};
use crate::tensor::Element;

/// Channel widths `[stem, block1, block2, block3]` for a width scale.
pub fn widths(width_scale: f64) -> [usize; 4] {
    let w = |base: f64| ((base * width_scale).round() as usize).max(1);
    [w(16.0), w(160.0), w(320.0), w(640.0)]
}

/// Pre-activation residual unit: BN-ReLU-Conv3x3(stride)-BN-ReLU-Conv3x3,
/// plus an identity shortcut when shape is preserved or a strided 1x1
/// projection otherwise.
#[derive(Debug, Clone)]
pub struct WideResidualUnit {
    pub n_in: usize,
    pub n_out: usize,
    pub stride: usize,
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl WideResidualUnit {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
        stride: usize,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "units downsample by at most 2");
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), n_in);
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), n_in, n_out, 3, stride, 1);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), n_out);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), n_out, n_out, 3, 1, 1);
        let shortcut = (n_in != n_out || stride != 1)
            .then(|| Conv2d::new(store, rng, &format!("{name}.shortcut"), n_in, n_out, 1, stride, 0));
        Self { n_in, n_out, stride, bn1, conv1, bn2, conv2, shortcut }
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &mut ParamStore<E>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = sess.graph.value(x).shape().to_vec();
        let c_in = shape[shape.len() - 3];
        if c_in != self.n_in {
            return Err(Error::shape(format!(
                "residual unit expects {} input channels, got {c_in}",
                self.n_in
            )));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::shape(format!(
                "spatial extent {h}x{w} not divisible by stride {}",
                self.stride
            )));
        }
        let mut m = self.bn1.forward(sess, store, x, mode)?;
        m = sess.graph.relu(m);
        m = self.conv1.forward(sess, store, m)?;
        m = self.bn2.forward(sess, store, m, mode)?;
        m = sess.graph.relu(m);
        m = self.conv2.forward(sess, store, m)?;
        let s = match &self.shortcut {
            Some(proj) => proj.forward(sess, store, x)?,
            None => x,
        };
        sess.graph.add(m, s)
    }
}

/// The deep CNN shared (architecturally) by the global and local networks.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub width_scale: f64,
    stem: Conv2d,
    blocks: Vec<WideResidualUnit>,
    final_bn: BatchNorm2d,
    out_channels: usize,
}

pub const UNITS_PER_BLOCK: usize = 4;

impl FeatureExtractor {
    /// Builds and He-initializes an extractor under `prefix.*` names.
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width_scale: f64,
    ) -> Self {
        let [w_stem, w1, w2, w3] = widths(width_scale);
        let stem = Conv2d::new(store, rng, &format!("{prefix}.stem"), 1, w_stem, 3, 1, 1);
        let mut blocks = Vec::new();
        let mut c_in = w_stem;
        for (b, w_out) in [w1, w2, w3].into_iter().enumerate() {
            for u in 0..UNITS_PER_BLOCK {
                let stride = if u == 0 { 2 } else { 1 };
                let name = format!("{prefix}.b{}.u{u}", b + 1);
                blocks.push(WideResidualUnit::new(store, rng, &name, c_in, w_out, stride));
                c_in = w_out;
            }
        }
        let final_bn = BatchNorm2d::new(store, &format!("{prefix}.final_bn"), w3);
        Self {
            width_scale,
            stem,
            blocks,
            final_bn,
            out_channels: w3,
        }
    }

    /// Number of output feature channels, `round(640 * width_scale)`.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[N, 1, S, S]` (or `[1, S, S]`) to `[N, C_f, S/8, S/8]` features.
    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &mut ParamStore<E>,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = sess.graph.value(x).shape().to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!(
                "extractor input {h}x{w} must be divisible by 8"
            )));
        }
        let mut v = self.stem.forward(sess, store, x)?;
        for unit in &self.blocks {
            v = unit.forward(sess, store, v, mode)?;
        }
        v = self.final_bn.forward(sess, store, v, mode)?;
        Ok(sess.graph.relu(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::seeded_rng;
    use crate::tensor::Tensor;

    fn run_extractor(width_scale: f64, side: usize) -> Vec<usize> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(3, "fx");
        let fx = FeatureExtractor::new(&mut store, &mut rng, "g", width_scale);
        let mut sess = Session::new(Graph::new());
        let x = sess.graph.leaf(Tensor::filled(&[2, 1, side, side], 0.3), false);
        let y = fx.forward(&mut sess, &mut store, x, BnMode::Train).unwrap();
        sess.graph.value(y).shape().to_vec()
    }

    #[test]
    fn widths_scale_with_the_knob() {
        assert_eq!(widths(1.0), [16, 160, 320, 640]);
        assert_eq!(widths(0.25), [4, 40, 80, 160]);
        assert_eq!(widths(0.1), [2, 16, 32, 64]);
    }

    #[test]
    fn downsampling_is_exactly_eight() {
        assert_eq!(run_extractor(0.1, 64), vec![2, 64, 8, 8]);
        assert_eq!(run_extractor(0.1, 128), vec![2, 64, 16, 16]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(3, "fx");
        let fx = FeatureExtractor::new(&mut store, &mut rng, "g", 0.1);
        let mut sess = Session::new(Graph::new());
        let x = sess.graph.leaf(Tensor::filled(&[1, 1, 60, 60], 0.3), false);
        assert!(fx.forward(&mut sess, &mut store, x, BnMode::Train).is_err());
    }

    #[test]
    fn unit_shape_contract_and_channel_check() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(5, "unit");
        let unit = WideResidualUnit::new(&mut store, &mut rng, "u", 4, 8, 2);
        let mut sess = Session::new(Graph::new());
        let x = sess.graph.leaf(Tensor::filled(&[1, 4, 16, 16], 0.1), false);
        let y = unit.forward(&mut sess, &mut store, x, BnMode::Train).unwrap();
        assert_eq!(sess.graph.value(y).shape(), &[1, 8, 8, 8]);

        let bad = sess.graph.leaf(Tensor::filled(&[1, 3, 16, 16], 0.1), false);
        assert!(unit.forward(&mut sess, &mut store, bad, BnMode::Train).is_err());
    }

    #[test]
    fn zeroed_main_path_passes_shortcut_through() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(7, "unit");
        let unit = WideResidualUnit::new(&mut store, &mut rng, "u", 3, 3, 1);
        // zero the final conv so main path contributes nothing
        store.value_mut(unit.conv2.weight).fill(0.0);
        store.value_mut(unit.conv2.bias).fill(0.0);
        let mut sess = Session::new(Graph::new());
        let input = Tensor::from_vec(vec![1, 3, 4, 4], (0..48).map(|v| v as f32 * 0.1).collect()).unwrap();
        let x = sess.graph.leaf(input.clone(), false);
        let y = unit.forward(&mut sess, &mut store, x, BnMode::Train).unwrap();
        assert!(sess.graph.value(y).bit_eq(&input));
    }

    #[test]
    fn zero_input_stays_finite() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(9, "unit");
        let unit = WideResidualUnit::new(&mut store, &mut rng, "u", 2, 4, 2);
        let mut sess = Session::new(Graph::new());
        let x = sess.graph.leaf(Tensor::zeros(&[1, 2, 8, 8]), false);
        let y = unit.forward(&mut sess, &mut store, x, BnMode::Train).unwrap();
        assert!(sess.graph.value(y).check_finite("unit output").is_ok());
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        let f1 = FeatureExtractor::new(&mut s1, &mut seeded_rng(42, "fx"), "g", 0.1);
        let f2 = FeatureExtractor::new(&mut s2, &mut seeded_rng(42, "fx"), "g", 0.1);
        assert_eq!(s1.len(), s2.len());
        for (a, b) in s1.ids().zip(s2.ids()) {
            assert!(s1.value(a).bit_eq(s2.value(b)), "{}", s1.name(a));
        }
        let _ = (f1, f2);
    }

    #[test]
    fn bn_gammas_start_at_one() {
        let mut store = ParamStore::<f32>::new();
        let _fx = FeatureExtractor::new(&mut store, &mut seeded_rng(1, "fx"), "g", 0.1);
        for id in store.ids() {
            if store.name(id).ends_with(".gamma") {
                assert!(store.value(id).data().iter().all(|&v| v == 1.0));
            }
        }
    }
}
