//! The two-scale model: G-Net, localization head, L-Net and the stage-2
//! feature-ensemble MLPs, all over one parameter store.
//!
//! Parameter name prefixes double as freeze groups:
//! `g.` global extractor + its classification heads, `loc.` localization
//! head, `l.` local extractor + heads, `mlp.` stage-2 classifiers.

use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{POLARITY_CLASSES, TYPE_CLASSES};
use crate::nn::Linear;
use crate::ops::{softmax, BnMode};
use crate::params::{seeded_rng, ParamStore, Session};
use crate::tensor::{Element, Tensor};
use crate::zoom::{box_to_pixels, crop_and_zoom, PixelBox, RelativeBox, VarifocalConstants};

/// All derived layer sizes for a `(width_scale, image_side)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_channels: usize,
    pub g_feat_side: usize,
    pub l_feat_side: usize,
    pub g_cls_pool: usize,
    pub g_loc_pool: usize,
    pub l_cls_pool: usize,
    /// Flattened per-net classifier input: `C_f * 4 * 4`.
    pub cls_in: usize,
    /// Flattened localization input: `C_f * 8 * 8`.
    pub loc_in: usize,
    pub loc_hidden: usize,
    /// Concatenated ensemble input: `2 * C_f * 4 * 4`.
    pub ensemble_in: usize,
    pub ensemble_hidden: usize,
}

impl ModelDims {
    pub fn new(width_scale: f64, image_side: usize) -> Result<Self> {
        if image_side % 64 != 0 || image_side == 0 {
            return Err(Error::invalid(format!(
                "image side must be a positive multiple of 64, got {image_side}"
            )));
        }
        let c_f = ((640.0 * width_scale).round() as usize).max(1);
        let g_feat = image_side / 8;
        let l_feat = image_side / 16;
        let scale_dim = |base: f64| ((base * width_scale).round() as usize).max(8);
        Ok(Self {
            feature_channels: c_f,
            g_feat_side: g_feat,
            l_feat_side: l_feat,
            g_cls_pool: g_feat / 4,
            g_loc_pool: g_feat / 8,
            l_cls_pool: l_feat / 4,
            cls_in: c_f * 16,
            loc_in: c_f * 64,
            loc_hidden: scale_dim(1024.0),
            ensemble_in: 2 * c_f * 16,
            ensemble_hidden: scale_dim(512.0),
        })
    }
}

/// Per-net type and polarity heads over max-pooled features.
#[derive(Debug, Clone)]
pub struct ClassificationHeads {
    pub type_fc: Linear,
    pub polarity_fc: Linear,
}

impl ClassificationHeads {
    fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
    ) -> Self {
        Self {
            type_fc: Linear::new(store, rng, &format!("{prefix}.type"), d_in, TYPE_CLASSES),
            polarity_fc: Linear::new(store, rng, &format!("{prefix}.pol"), d_in, POLARITY_CLASSES),
        }
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &ParamStore<E>,
        pooled: Var,
    ) -> Result<(Var, Var)> {
        let t = self.type_fc.forward(sess, store, pooled)?;
        let p = self.polarity_fc.forward(sess, store, pooled)?;
        Ok((t, p))
    }
}

/// Max-pool, two FC layers and a sigmoid producing `(u_x, u_y, u_l)`.
#[derive(Debug, Clone)]
pub struct LocalizationHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LocalizationHead {
    fn new<E: Element>(store: &mut ParamStore<E>, rng: &mut ChaCha8Rng, dims: &ModelDims) -> Self {
        Self {
            fc1: Linear::new(store, rng, "loc.fc1", dims.loc_in, dims.loc_hidden),
            fc2: Linear::new(store, rng, "loc.fc2", dims.loc_hidden, 3),
        }
    }

    /// From the flattened loc-pool vector to sigmoid box coordinates.
    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &ParamStore<E>,
        pooled: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(sess, store, pooled)?;
        let h = sess.graph.relu(h);
        let out = self.fc2.forward(sess, store, h)?;
        Ok(sess.graph.sigmoid(out))
    }
}

/// Stage-2 classifier: FC - ReLU - FC over the concatenated features.
#[derive(Debug, Clone)]
pub struct EnsembleMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EnsembleMlp {
    fn new<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{prefix}.fc1"), d_in, d_hidden),
            fc2: Linear::new(store, rng, &format!("{prefix}.fc2"), d_hidden, d_out),
        }
    }

    pub fn forward<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &ParamStore<E>,
        features: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(sess, store, features)?;
        let h = sess.graph.relu(h);
        self.fc2.forward(sess, store, h)
    }
}

/// The complete model.
#[derive(Debug)]
pub struct VarifocalModel {
    pub dims: ModelDims,
    pub consts: VarifocalConstants,
    pub width_scale: f64,
    pub g_extractor: FeatureExtractor,
    pub g_heads: ClassificationHeads,
    pub localizer: LocalizationHead,
    pub l_extractor: FeatureExtractor,
    pub l_heads: ClassificationHeads,
    pub type_mlp: EnsembleMlp,
    pub polarity_mlp: EnsembleMlp,
}

impl VarifocalModel {
    /// He-initializes every subnet from streams derived from `seed`.
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        seed: u64,
        width_scale: f64,
        consts: VarifocalConstants,
    ) -> Result<Self> {
        let dims = ModelDims::new(width_scale, consts.image_side)?;
        let mut rng_g = seeded_rng(seed, "init-g");
        let g_extractor = FeatureExtractor::new(store, &mut rng_g, "g.fx", width_scale);
        let g_heads = ClassificationHeads::new(store, &mut rng_g, "g.cls", dims.cls_in);
        let mut rng_loc = seeded_rng(seed, "init-loc");
        let localizer = LocalizationHead::new(store, &mut rng_loc, &dims);
        let mut rng_l = seeded_rng(seed, "init-l");
        let l_extractor = FeatureExtractor::new(store, &mut rng_l, "l.fx", width_scale);
        let l_heads = ClassificationHeads::new(store, &mut rng_l, "l.cls", dims.cls_in);
        let mut rng_m = seeded_rng(seed, "init-mlp");
        let type_mlp = EnsembleMlp::new(
            store,
            &mut rng_m,
            "mlp.type",
            dims.ensemble_in,
            dims.ensemble_hidden,
            TYPE_CLASSES,
        );
        let polarity_mlp = EnsembleMlp::new(
            store,
            &mut rng_m,
            "mlp.pol",
            dims.ensemble_in,
            dims.ensemble_hidden,
            POLARITY_CLASSES,
        );
        Ok(Self {
            dims,
            consts,
            width_scale,
            g_extractor,
            g_heads,
            localizer,
            l_extractor,
            l_heads,
            type_mlp,
            polarity_mlp,
        })
    }

    /// Global features of a `[N, 1, S, S]` batch.
    pub fn extract_g<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &mut ParamStore<E>,
        images: Var,
        mode: BnMode,
    ) -> Result<Var> {
        self.g_extractor.forward(sess, store, images, mode)
    }

    /// Local features of a `[N, 1, z, z]` crop batch.
    pub fn extract_l<E: Element>(
        &self,
        sess: &mut Session<E>,
        store: &mut ParamStore<E>,
        crops: Var,
        mode: BnMode,
    ) -> Result<Var> {
        self.l_extractor.forward(sess, store, crops, mode)
    }

    /// Classification pooling: max-pool to 4x4 and flatten to `[N, C_f*16]`.
    pub fn pool_cls<E: Element>(&self, sess: &mut Session<E>, feat: Var, kernel: usize) -> Result<Var> {
        let pooled = sess.graph.max_pool2d(feat, kernel.max(1), kernel.max(1))?;
        let shape = sess.graph.value(pooled).shape().to_vec();
        let n = shape[0];
        let flat: usize = shape[1..].iter().product();
        sess.graph.reshape(pooled, vec![n, flat])
    }

    /// Localization pooling: max-pool to 8x8 and flatten to `[N, C_f*64]`.
    pub fn pool_loc<E: Element>(&self, sess: &mut Session<E>, feat: Var) -> Result<Var> {
        self.pool_cls(sess, feat, self.dims.g_loc_pool)
    }

    /// Boxes for a `[N, 3]` sigmoid output tensor.
    pub fn boxes_from_u(&self, u: &Tensor<f32>) -> Vec<(RelativeBox, PixelBox)> {
        let n = u.shape()[0];
        (0..n)
            .map(|i| {
                let r = RelativeBox::new(
                    u.data()[i * 3] as f64,
                    u.data()[i * 3 + 1] as f64,
                    u.data()[i * 3 + 2] as f64,
                );
                (r, box_to_pixels(&r, &self.consts))
            })
            .collect()
    }

    /// End-to-end single-image inference: global pass, zoom, local pass,
    /// ensemble probabilities. Expects the normalized `[1, S, S]` tensor.
    pub fn predict(
        &self,
        store: &mut ParamStore<f32>,
        image: &Tensor<f32>,
    ) -> Result<Prediction> {
        let s = self.consts.image_side;
        if image.shape() != [1, s, s] {
            return Err(Error::shape(format!(
                "predict expects [1, {s}, {s}], got {:?}",
                image.shape()
            )));
        }
        let mut sess = Session::inference(Graph::new());
        let batch = image.reshaped(vec![1, 1, s, s])?;
        let x = sess.graph.leaf(batch, false);
        let feat = self.extract_g(&mut sess, store, x, BnMode::Eval)?;
        let loc_pool = self.pool_loc(&mut sess, feat)?;
        let u = self.localizer.forward(&mut sess, store, loc_pool)?;
        let cls_pool = self.pool_cls(&mut sess, feat, self.dims.g_cls_pool)?;
        let g_pool_val = sess.graph.value(cls_pool).clone();
        let (rel, pix) = self.boxes_from_u(sess.graph.value(u))[0];

        let crop = crop_and_zoom(image, &pix, &self.consts)?;
        let z = self.consts.zoom_side;
        let crop = crop.reshaped(vec![1, 1, z, z])?;
        let c = sess.graph.leaf(crop, false);
        let l_feat = self.extract_l(&mut sess, store, c, BnMode::Eval)?;
        let l_pool = self.pool_cls(&mut sess, l_feat, self.dims.l_cls_pool)?;
        let l_pool_val = sess.graph.value(l_pool).clone();

        let g_leaf = sess.graph.leaf(g_pool_val, false);
        let l_leaf = sess.graph.leaf(l_pool_val, false);
        let both = sess.graph.concat_cols(g_leaf, l_leaf)?;
        let tl = self.type_mlp.forward(&mut sess, store, both)?;
        let pl = self.polarity_mlp.forward(&mut sess, store, both)?;
        let tp = softmax(sess.graph.value(tl));
        let pp = softmax(sess.graph.value(pl));
        Ok(Prediction {
            type_probs: tp.data().iter().map(|&v| v as f64).collect(),
            polarity_probs: pp.data().iter().map(|&v| v as f64).collect(),
            relative_box: rel,
            pixel_box: pix,
        })
    }
}

/// Output of end-to-end inference for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub type_probs: Vec<f64>,
    pub polarity_probs: Vec<f64>,
    pub relative_box: RelativeBox,
    pub pixel_box: PixelBox,
}

impl Prediction {
    pub fn type_argmax(&self) -> usize {
        argmax(&self.type_probs)
    }

    pub fn polarity_argmax(&self) -> usize {
        argmax(&self.polarity_probs)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_dims_match_the_reference_tables() {
        let d = ModelDims::new(1.0, 256).unwrap();
        assert_eq!(d.feature_channels, 640);
        assert_eq!(d.g_feat_side, 32);
        assert_eq!(d.l_feat_side, 16);
        assert_eq!(d.g_cls_pool, 8); // 32 -> 4
        assert_eq!(d.g_loc_pool, 4); // 32 -> 8
        assert_eq!(d.l_cls_pool, 4); // 16 -> 4
        assert_eq!(d.cls_in, 640 * 16);
        assert_eq!(d.loc_in, 640 * 64);
        assert_eq!(d.loc_hidden, 1024);
        assert_eq!(d.ensemble_in, 20480);
        assert_eq!(d.ensemble_hidden, 512);
    }

    #[test]
    fn desk_scale_dims() {
        let d = ModelDims::new(0.25, 256).unwrap();
        assert_eq!(d.feature_channels, 160);
        assert_eq!(d.ensemble_in, 2 * 160 * 16);
        let d = ModelDims::new(0.1, 64).unwrap();
        assert_eq!(d.feature_channels, 64);
        assert_eq!(d.g_feat_side, 8);
        assert_eq!(d.g_loc_pool, 1);
        assert!(ModelDims::new(0.25, 60).is_err());
    }

    #[test]
    fn localizer_zeroed_fc2_outputs_half() {
        let mut store = ParamStore::<f32>::new();
        let consts = VarifocalConstants::for_image_side(64, 10.0).unwrap();
        let model = VarifocalModel::new(&mut store, 1, 0.1, consts).unwrap();
        store.value_mut(model.localizer.fc2.weight).fill(0.0);
        store.value_mut(model.localizer.fc2.bias).fill(0.0);
        let mut sess = Session::new(Graph::new());
        let pooled = sess
            .graph
            .leaf(Tensor::filled(&[2, model.dims.loc_in], 0.3), false);
        let u = model.localizer.forward(&mut sess, &store, pooled).unwrap();
        for &v in sess.graph.value(u).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn localizer_outputs_stay_in_unit_interval() {
        let mut store = ParamStore::<f32>::new();
        let consts = VarifocalConstants::for_image_side(64, 10.0).unwrap();
        let model = VarifocalModel::new(&mut store, 2, 0.1, consts).unwrap();
        let mut sess = Session::new(Graph::new());
        let pooled = sess.graph.leaf(
            Tensor::from_vec(
                vec![1, model.dims.loc_in],
                (0..model.dims.loc_in).map(|i| ((i * 37) % 17) as f32 - 8.0).collect(),
            )
            .unwrap(),
            false,
        );
        let u = model.localizer.forward(&mut sess, &store, pooled).unwrap();
        for &v in sess.graph.value(u).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
