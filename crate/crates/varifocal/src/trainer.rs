//! The four-step training schedule and end-to-end evaluation.
//!
//! Step 1 He-initializes both extractors (done at model construction).
//! Step 2 trains the G-Net (extractor + classification heads) on whole
//! images. Step 3 pre-trains the localization head once, supervised by
//! foreground-derived box targets. Step 4 alternates: (a) train the L-Net
//! on zoomed crops with the localizer frozen, then (b) fine-tune the
//! localizer alone, driving its coordinates with the boxcar gradient of the
//! L-Net loss. Stage 2 finally trains the ensemble MLPs on concatenated
//! pooled features of both frozen nets.
//!
//! Each phase flips trainable flags so that it can only touch its own
//! parameter set; everything upstream of a frozen subnet is computed in
//! eval mode and reused through feature caches.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::data::augment;
use crate::data::preprocess::{normalize, pad_to_square, Preprocessor};
use crate::data::Dataset;
use crate::dispatch::CaseProbabilities;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{multitask_loss, polarity_loss, type_loss, LossConfig};
use crate::metrics::{
    acc_per_case, acc_per_case_d, accuracy, roc_auc_macro, CaseOutcome, ConfusionMatrix,
    EvaluationReport,
};
use crate::model::{argmax, ModelDims, VarifocalModel};
use crate::ops::{softmax, BnMode, Reduction};
use crate::optim::{scheduled_lr, AdamConfig};
use crate::params::{seeded_rng, ParamStore, Session};
use crate::tensor::Tensor;
use crate::zoom::{crop_and_zoom, ground_truth_box, localization_backward, PixelBox, VarifocalConstants};

/// Everything a training run needs to know.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub width_scale: f64,
    pub image_side: usize,
    pub boxcar_k: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub reduction: Reduction,
    pub adam: AdamConfig,
    pub step2_epochs: usize,
    pub step3_epochs: usize,
    pub step4_rounds: usize,
    pub step4a_epochs: usize,
    pub step4b_epochs: usize,
    pub stage2_epochs: usize,
    pub augment: bool,
    /// Round-over-round validation-loss decrease below this stops step 4.
    pub plateau_tol: f64,
    /// Foreground threshold on the 0-255 scale for box targets.
    pub fg_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width_scale: 1.0,
            image_side: 256,
            boxcar_k: 10.0,
            batch_size: 32,
            lambda: 0.5,
            reduction: Reduction::Mean,
            adam: AdamConfig::default(),
            step2_epochs: 30,
            step3_epochs: 30,
            step4_rounds: 3,
            step4a_epochs: 10,
            step4b_epochs: 1,
            stage2_epochs: 20,
            augment: true,
            plateau_tol: 1e-4,
            fg_threshold: 250.0,
        }
    }
}

impl TrainConfig {
    fn loss_cfg(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            reduction: self.reduction,
        }
    }
}

/// One row of the loss log CSV.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub epoch: u64,
    pub split: String,
    pub l_t: Option<f64>,
    pub l_p: Option<f64>,
    pub l_u: Option<f64>,
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "l_t", "l_p", "l_u"])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            fmt(r.l_t),
            fmt(r.l_p),
            fmt(r.l_u),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Cached pooled G-Net features for a fixed index list.
pub struct GPools {
    /// Flattened loc-pool vectors, one per index.
    pub loc: Vec<Tensor<f32>>,
    /// Flattened cls-pool vectors, one per index.
    pub cls: Vec<Tensor<f32>>,
}

/// Which classifier produces the evaluated probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    GNet,
    LNet,
    Ensemble,
}

/// Per-sample probabilities and ground truth over an index list.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub case_ids: Vec<String>,
    pub type_truth: Vec<usize>,
    pub pol_truth: Vec<usize>,
    pub type_probs: Vec<Vec<f64>>,
    pub pol_probs: Vec<Vec<f64>>,
}

/// Training progress marker stored in checkpoints.
pub const STEP_NONE: u8 = 1;
pub const STEP_GNET: u8 = 2;
pub const STEP_LOCALIZER: u8 = 3;
pub const STEP_ALTERNATE: u8 = 4;
pub const STEP_ENSEMBLE: u8 = 5;

pub struct Trainer {
    pub cfg: TrainConfig,
    pub consts: VarifocalConstants,
    pub preproc: Preprocessor,
    pub store: ParamStore<f32>,
    pub model: VarifocalModel,
    pub completed_step: u8,
    pub log: Vec<LogRow>,
    epoch_counter: u64,
}

impl Trainer {
    /// Step 1: build and He-initialize the model from the seed.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let consts = VarifocalConstants::for_image_side(cfg.image_side, cfg.boxcar_k)?;
        let preproc = Preprocessor::for_image_side(cfg.image_side)?;
        let mut store = ParamStore::new();
        let model = VarifocalModel::new(&mut store, cfg.seed, cfg.width_scale, consts)?;
        Ok(Self {
            cfg,
            consts,
            preproc,
            store,
            model,
            completed_step: STEP_NONE,
            log: Vec::new(),
            epoch_counter: 0,
        })
    }

    fn next_epoch(&mut self) -> u64 {
        self.epoch_counter += 1;
        self.epoch_counter
    }

    /// Normalized network input for one sample, optionally augmented with
    /// the stream derived from `(seed, phase, epoch, index)`.
    fn load_input(
        &self,
        data: &Dataset,
        idx: usize,
        augment_key: Option<(&str, usize)>,
    ) -> Result<(Tensor<f32>, usize, usize)> {
        let sample = data.sample(idx);
        let img = sample.image()?;
        let padded = pad_to_square(img, self.preproc.pad_side)?;
        let (img, polarity) = match augment_key {
            Some((phase, epoch)) => {
                let mut rng =
                    seeded_rng(self.cfg.seed, &format!("aug-{phase}-{epoch}-{idx}"));
                augment::augment(&padded, sample.polarity_label, &mut rng)
            }
            None => (padded, sample.polarity_label),
        };
        let tensor = self.preproc.resize_and_normalize(&img)?;
        Ok((tensor, sample.type_label, polarity))
    }

    /// Stacks per-sample `[1, S, S]` tensors into `[B, 1, S, S]`.
    fn stack(tensors: &[Tensor<f32>]) -> Tensor<f32> {
        let per = tensors[0].len();
        let mut data = Vec::with_capacity(per * tensors.len());
        for t in tensors {
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![tensors.len()];
        shape.extend_from_slice(tensors[0].shape());
        Tensor::from_vec(shape, data).expect("volumes agree")
    }

    fn batch_inputs(
        &self,
        data: &Dataset,
        idxs: &[usize],
        augment_key: Option<(&str, usize)>,
    ) -> Result<(Tensor<f32>, Vec<usize>, Vec<usize>)> {
        let mut images = Vec::with_capacity(idxs.len());
        let mut types = Vec::with_capacity(idxs.len());
        let mut pols = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let (t, ty, po) = self.load_input(data, i, augment_key)?;
            images.push(t);
            types.push(ty);
            pols.push(po);
        }
        Ok((Self::stack(&images), types, pols))
    }

    fn shuffled(&self, idx: &[usize], label: &str) -> Vec<usize> {
        let mut order = idx.to_vec();
        let mut rng = seeded_rng(self.cfg.seed, label);
        order.shuffle(&mut rng);
        order
    }

    fn check_finite(&self, loss: f64, context: &str) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged(format!("{context}: loss = {loss}")))
        }
    }

    /// Step 2: train G-Net feature extractor and classification heads.
    pub fn step2_train_gnet(&mut self, data: &Dataset, train_idx: &[usize]) -> Result<()> {
        let loss_cfg = self.cfg.loss_cfg();
        self.store.enable_only(&["g."]);
        for epoch in 0..self.cfg.step2_epochs {
            let t0 = Instant::now();
            let lr = scheduled_lr(self.cfg.adam.base_lr, epoch as u64);
            let order = self.shuffled(train_idx, &format!("step2-{epoch}"));
            let mut sum_t = 0.0;
            let mut sum_p = 0.0;
            let mut correct = 0usize;
            let mut seen = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                let aug = self.cfg.augment.then_some(("step2", epoch));
                let (x, types, pols) = self.batch_inputs(data, chunk, aug)?;
                let mut sess = Session::new(Graph::new());
                let xv = sess.graph.leaf(x, false);
                let feat = self.model.extract_g(&mut sess, &mut self.store, xv, BnMode::Train)?;
                let pool = self.model.pool_cls(&mut sess, feat, self.model.dims.g_cls_pool)?;
                let (tl, pl) = self.model.g_heads.forward(&mut sess, &self.store, pool)?;
                let lt = type_loss(&mut sess.graph, tl, &types, &loss_cfg)?;
                let lp = polarity_loss(&mut sess.graph, pl, &pols, &loss_cfg)?;
                let loss = multitask_loss(&mut sess.graph, lt, lp, &loss_cfg)?;
                let (lt_v, lp_v) = (
                    sess.graph.value(lt).item()? as f64,
                    sess.graph.value(lp).item()? as f64,
                );
                self.check_finite(lt_v + lp_v, "step2")?;
                let logits = sess.graph.value(tl).clone();
                sess.backward(loss, &mut self.store)?;
                self.store.adam_step_all(&self.cfg.adam, lr)?;
                self.store.zero_grad();
                sum_t += lt_v * chunk.len() as f64;
                sum_p += lp_v * chunk.len() as f64;
                for (r, &want) in types.iter().enumerate() {
                    let row: Vec<f64> = logits.data()[r * 24..(r + 1) * 24]
                        .iter()
                        .map(|&v| v as f64)
                        .collect();
                    if argmax(&row) == want {
                        correct += 1;
                    }
                }
                seen += chunk.len();
            }
            let epoch_id = self.next_epoch();
            let (l_t, l_p) = (sum_t / seen as f64, sum_p / seen as f64);
            eprintln!(
                "[step2] epoch {epoch}: L_t {l_t:.4} L_p {l_p:.4} train-acc {:.3} lr {lr:.2e} ({:.0}s)",
                correct as f64 / seen as f64,
                t0.elapsed().as_secs_f64()
            );
            self.log.push(LogRow {
                epoch: epoch_id,
                split: "train".into(),
                l_t: Some(l_t),
                l_p: Some(l_p),
                l_u: None,
            });
        }
        self.completed_step = self.completed_step.max(STEP_GNET);
        Ok(())
    }

    /// Evaluates the frozen G-Net over `idx`, returning flattened loc-pool
    /// and cls-pool vectors per sample.
    pub fn compute_g_pools(&mut self, data: &Dataset, idx: &[usize]) -> Result<GPools> {
        let mut loc = Vec::with_capacity(idx.len());
        let mut cls = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(self.cfg.batch_size) {
            let (x, _, _) = self.batch_inputs(data, chunk, None)?;
            let mut sess = Session::inference(Graph::new());
            let xv = sess.graph.leaf(x, false);
            let feat = self.model.extract_g(&mut sess, &mut self.store, xv, BnMode::Eval)?;
            let lp = self.model.pool_loc(&mut sess, feat)?;
            let cp = self.model.pool_cls(&mut sess, feat, self.model.dims.g_cls_pool)?;
            let (lp_t, cp_t) = (sess.graph.value(lp), sess.graph.value(cp));
            let dims = self.model.dims;
            for r in 0..chunk.len() {
                loc.push(Tensor::from_vec(
                    vec![dims.loc_in],
                    lp_t.data()[r * dims.loc_in..(r + 1) * dims.loc_in].to_vec(),
                )?);
                cls.push(Tensor::from_vec(
                    vec![dims.cls_in],
                    cp_t.data()[r * dims.cls_in..(r + 1) * dims.cls_in].to_vec(),
                )?);
            }
        }
        Ok(GPools { loc, cls })
    }

    /// Supervised box targets for `idx` (no augmentation).
    pub fn compute_box_targets(&self, data: &Dataset, idx: &[usize]) -> Result<Vec<[f32; 3]>> {
        idx.iter()
            .map(|&i| {
                let img = data.sample(i).image()?;
                let padded = pad_to_square(img, self.preproc.pad_side)?;
                let resized = self.preproc.resize_padded(&padded)?;
                let raw = Tensor::from_vec(
                    vec![1, self.consts.image_side, self.consts.image_side],
                    resized.data.clone(),
                )?;
                let u = ground_truth_box(&raw, &self.consts, self.cfg.fg_threshold)?;
                Ok([u.x as f32, u.y as f32, u.l as f32])
            })
            .collect()
    }

    fn stack_rows(rows: &[Tensor<f32>]) -> Tensor<f32> {
        let d = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend_from_slice(r.data());
        }
        Tensor::from_vec(vec![rows.len(), d], data).expect("equal rows")
    }

    /// Step 3: pre-train the localization head once on supervised targets.
    /// Returns the final mean absolute coordinate error on the training set.
    pub fn step3_pretrain_localizer(
        &mut self,
        pools: &GPools,
        targets: &[[f32; 3]],
    ) -> Result<f64> {
        if pools.loc.len() != targets.len() {
            return Err(Error::invalid("pools and box targets disagree in length"));
        }
        self.store.enable_only(&["loc."]);
        let positions: Vec<usize> = (0..targets.len()).collect();
        for epoch in 0..self.cfg.step3_epochs {
            let lr = scheduled_lr(self.cfg.adam.base_lr, epoch as u64);
            let order = self.shuffled(&positions, &format!("step3-{epoch}"));
            let mut sum_u = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let rows: Vec<Tensor<f32>> =
                    chunk.iter().map(|&p| pools.loc[p].clone()).collect();
                let target = Tensor::from_vec(
                    vec![chunk.len(), 3],
                    chunk.iter().flat_map(|&p| targets[p]).collect(),
                )?;
                let mut sess = Session::new(Graph::new());
                let x = sess.graph.leaf(Self::stack_rows(&rows), false);
                let u = self.model.localizer.forward(&mut sess, &self.store, x)?;
                let loss = sess.graph.smooth_l1(u, &target, self.cfg.reduction)?;
                let l_v = sess.graph.value(loss).item()? as f64;
                self.check_finite(l_v, "step3")?;
                sess.backward(loss, &mut self.store)?;
                self.store.adam_step_all(&self.cfg.adam, lr)?;
                self.store.zero_grad();
                sum_u += l_v * chunk.len() as f64;
            }
            let epoch_id = self.next_epoch();
            self.log.push(LogRow {
                epoch: epoch_id,
                split: "train".into(),
                l_t: None,
                l_p: None,
                l_u: Some(sum_u / targets.len() as f64),
            });
        }
        // final coordinate error
        let u = self.localize_batch(&pools.loc)?;
        let mut err = 0.0;
        for (row, t) in u.iter().zip(targets) {
            for c in 0..3 {
                err += (row[c] as f64 - t[c] as f64).abs();
            }
        }
        let mae = err / (3.0 * targets.len() as f64);
        eprintln!("[step3] localizer pre-trained; train MAE {mae:.4}");
        self.completed_step = self.completed_step.max(STEP_LOCALIZER);
        Ok(mae)
    }

    /// Localizer outputs for a list of pooled loc vectors (inference).
    pub fn localize_batch(&mut self, loc_pools: &[Tensor<f32>]) -> Result<Vec<[f32; 3]>> {
        let mut out = Vec::with_capacity(loc_pools.len());
        for chunk in loc_pools.chunks(self.cfg.batch_size.max(1)) {
            let mut sess = Session::inference(Graph::new());
            let x = sess.graph.leaf(Self::stack_rows(chunk), false);
            let u = self.model.localizer.forward(&mut sess, &self.store, x)?;
            let uv = sess.graph.value(u);
            for r in 0..chunk.len() {
                out.push([
                    uv.data()[r * 3],
                    uv.data()[r * 3 + 1],
                    uv.data()[r * 3 + 2],
                ]);
            }
        }
        Ok(out)
    }

    fn boxes_for(&mut self, loc_pools: &[Tensor<f32>]) -> Result<Vec<PixelBox>> {
        let us = self.localize_batch(loc_pools)?;
        Ok(us
            .iter()
            .map(|u| {
                crate::zoom::box_to_pixels(
                    &crate::zoom::RelativeBox::new(u[0] as f64, u[1] as f64, u[2] as f64),
                    &self.consts,
                )
            })
            .collect())
    }

    fn crop_batch(
        &self,
        data: &Dataset,
        idxs: &[usize],
        boxes: &[PixelBox],
    ) -> Result<(Tensor<f32>, Vec<usize>, Vec<usize>)> {
        let mut crops = Vec::with_capacity(idxs.len());
        let mut types = Vec::with_capacity(idxs.len());
        let mut pols = Vec::with_capacity(idxs.len());
        for (&i, bx) in idxs.iter().zip(boxes) {
            let (norm, ty, po) = self.load_input(data, i, None)?;
            crops.push(crop_and_zoom(&norm, bx, &self.consts)?);
            types.push(ty);
            pols.push(po);
        }
        Ok((Self::stack(&crops), types, pols))
    }

    /// L-Net multitask loss over an index list with fixed boxes, eval mode.
    fn lnet_eval_loss(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        boxes: &[PixelBox],
    ) -> Result<f64> {
        let loss_cfg = self.cfg.loss_cfg();
        let mut total = 0.0;
        let mut seen = 0usize;
        for (chunk_idx, chunk_boxes) in idx
            .chunks(self.cfg.batch_size)
            .zip(boxes.chunks(self.cfg.batch_size))
        {
            let (x, types, pols) = self.crop_batch(data, chunk_idx, chunk_boxes)?;
            let mut sess = Session::inference(Graph::new());
            let xv = sess.graph.leaf(x, false);
            let feat = self.model.extract_l(&mut sess, &mut self.store, xv, BnMode::Eval)?;
            let pool = self.model.pool_cls(&mut sess, feat, self.model.dims.l_cls_pool)?;
            let (tl, pl) = self.model.l_heads.forward(&mut sess, &self.store, pool)?;
            let lt = type_loss(&mut sess.graph, tl, &types, &loss_cfg)?;
            let lp = polarity_loss(&mut sess.graph, pl, &pols, &loss_cfg)?;
            let loss = multitask_loss(&mut sess.graph, lt, lp, &loss_cfg)?;
            total += sess.graph.value(loss).item()? as f64 * chunk_idx.len() as f64;
            seen += chunk_idx.len();
        }
        Ok(total / seen as f64)
    }

    /// Step 4: alternate L-Net training and localizer fine-tuning.
    pub fn step4_alternate(
        &mut self,
        data: &Dataset,
        train_idx: &[usize],
        pools: &GPools,
        val: Option<(&[usize], &GPools)>,
    ) -> Result<()> {
        let loss_cfg = self.cfg.loss_cfg();
        let mut prev_val: Option<f64> = None;
        for round in 0..self.cfg.step4_rounds {
            // (a) fixed localizer, train the L-Net on its crops
            let boxes = self.boxes_for(&pools.loc)?;
            self.store.enable_only(&["l."]);
            for epoch in 0..self.cfg.step4a_epochs {
                let t0 = Instant::now();
                let lr = scheduled_lr(self.cfg.adam.base_lr, epoch as u64);
                let positions: Vec<usize> = (0..train_idx.len()).collect();
                let order = self.shuffled(&positions, &format!("step4a-{round}-{epoch}"));
                let mut sum_t = 0.0;
                let mut sum_p = 0.0;
                for chunk in order.chunks(self.cfg.batch_size) {
                    let chunk_idx: Vec<usize> = chunk.iter().map(|&p| train_idx[p]).collect();
                    let chunk_boxes: Vec<PixelBox> = chunk.iter().map(|&p| boxes[p]).collect();
                    let (x, types, pols) = self.crop_batch(data, &chunk_idx, &chunk_boxes)?;
                    let mut sess = Session::new(Graph::new());
                    let xv = sess.graph.leaf(x, false);
                    let feat =
                        self.model.extract_l(&mut sess, &mut self.store, xv, BnMode::Train)?;
                    let pool =
                        self.model.pool_cls(&mut sess, feat, self.model.dims.l_cls_pool)?;
                    let (tl, pl) = self.model.l_heads.forward(&mut sess, &self.store, pool)?;
                    let lt = type_loss(&mut sess.graph, tl, &types, &loss_cfg)?;
                    let lp = polarity_loss(&mut sess.graph, pl, &pols, &loss_cfg)?;
                    let loss = multitask_loss(&mut sess.graph, lt, lp, &loss_cfg)?;
                    let (lt_v, lp_v) = (
                        sess.graph.value(lt).item()? as f64,
                        sess.graph.value(lp).item()? as f64,
                    );
                    self.check_finite(lt_v + lp_v, "step4a")?;
                    sess.backward(loss, &mut self.store)?;
                    self.store.adam_step_all(&self.cfg.adam, lr)?;
                    self.store.zero_grad();
                    sum_t += lt_v * chunk.len() as f64;
                    sum_p += lp_v * chunk.len() as f64;
                }
                let epoch_id = self.next_epoch();
                eprintln!(
                    "[step4a r{round}] epoch {epoch}: L_t {:.4} L_p {:.4} ({:.0}s)",
                    sum_t / train_idx.len() as f64,
                    sum_p / train_idx.len() as f64,
                    t0.elapsed().as_secs_f64()
                );
                self.log.push(LogRow {
                    epoch: epoch_id,
                    split: "train".into(),
                    l_t: Some(sum_t / train_idx.len() as f64),
                    l_p: Some(sum_p / train_idx.len() as f64),
                    l_u: None,
                });
            }

            // (b) fixed L-Net, fine-tune the localizer through the boxcar
            self.store.enable_only(&["loc."]);
            for epoch in 0..self.cfg.step4b_epochs {
                let t0 = Instant::now();
                let lr = scheduled_lr(self.cfg.adam.base_lr, epoch as u64);
                let positions: Vec<usize> = (0..train_idx.len()).collect();
                let order = self.shuffled(&positions, &format!("step4b-{round}-{epoch}"));
                let mut sum_cls = 0.0;
                for chunk in order.chunks(self.cfg.batch_size) {
                    sum_cls += self.step4b_batch(data, train_idx, pools, chunk, lr)?
                        * chunk.len() as f64;
                }
                let epoch_id = self.next_epoch();
                eprintln!(
                    "[step4b r{round}] epoch {epoch}: L_cls {:.4} ({:.0}s)",
                    sum_cls / train_idx.len() as f64,
                    t0.elapsed().as_secs_f64()
                );
                self.log.push(LogRow {
                    epoch: epoch_id,
                    split: "train".into(),
                    l_t: None,
                    l_p: None,
                    l_u: Some(sum_cls / train_idx.len() as f64),
                });
            }

            // plateau check on the validation fold
            if let Some((val_idx, val_pools)) = val {
                let val_boxes = self.boxes_for(&val_pools.loc)?;
                let val_loss = self.lnet_eval_loss(data, val_idx, &val_boxes)?;
                let epoch_id = self.next_epoch();
                self.log.push(LogRow {
                    epoch: epoch_id,
                    split: "val".into(),
                    l_t: Some(val_loss),
                    l_p: None,
                    l_u: None,
                });
                eprintln!("[step4 r{round}] val multitask loss {val_loss:.4}");
                if let Some(prev) = prev_val {
                    if prev - val_loss < self.cfg.plateau_tol {
                        eprintln!("[step4] plateau reached after round {round}");
                        break;
                    }
                }
                prev_val = Some(val_loss);
            }
        }
        self.completed_step = self.completed_step.max(STEP_ALTERNATE);
        Ok(())
    }

    /// One step-4b batch: L-Net gradient at its input mapped through the
    /// boxcar onto the box coordinates, then through the localization head.
    fn step4b_batch(
        &mut self,
        data: &Dataset,
        train_idx: &[usize],
        pools: &GPools,
        chunk: &[usize],
        lr: f64,
    ) -> Result<f64> {
        let loss_cfg = self.cfg.loss_cfg();
        let z = self.consts.zoom_side;

        // localization forward with gradients
        let rows: Vec<Tensor<f32>> = chunk.iter().map(|&p| pools.loc[p].clone()).collect();
        let mut loc_sess = Session::new(Graph::new());
        let x = loc_sess.graph.leaf(Self::stack_rows(&rows), false);
        let u = self.model.localizer.forward(&mut loc_sess, &self.store, x)?;
        let boxes = self.model.boxes_from_u(loc_sess.graph.value(u));

        // frozen L-Net forward on the crops, tracking the input gradient
        let chunk_idx: Vec<usize> = chunk.iter().map(|&p| train_idx[p]).collect();
        let chunk_boxes: Vec<PixelBox> = boxes.iter().map(|(_, pb)| *pb).collect();
        let (crops, types, pols) = self.crop_batch(data, &chunk_idx, &chunk_boxes)?;
        let mut l_sess = Session::new(Graph::new());
        let cv = l_sess.graph.leaf(crops, true);
        let feat = self.model.extract_l(&mut l_sess, &mut self.store, cv, BnMode::Eval)?;
        let pool = self.model.pool_cls(&mut l_sess, feat, self.model.dims.l_cls_pool)?;
        let (tl, pl) = self.model.l_heads.forward(&mut l_sess, &self.store, pool)?;
        let lt = type_loss(&mut l_sess.graph, tl, &types, &loss_cfg)?;
        let lp = polarity_loss(&mut l_sess.graph, pl, &pols, &loss_cfg)?;
        let loss = multitask_loss(&mut l_sess.graph, lt, lp, &loss_cfg)?;
        let loss_v = l_sess.graph.value(loss).item()? as f64;
        self.check_finite(loss_v, "step4b")?;
        l_sess.backward(loss, &mut self.store)?;
        let g_top = l_sess
            .graph
            .grad(cv)
            .ok_or_else(|| Error::Autodiff("no gradient at the L-Net input".into()))?;

        // per-sample boxcar gradients seed the localization graph
        let mut seed = Tensor::zeros(&[chunk.len(), 3]);
        for (r, (_, pb)) in boxes.iter().enumerate() {
            let g_slice = Tensor::from_vec(
                vec![z, z],
                g_top.data()[r * z * z..(r + 1) * z * z].to_vec(),
            )?;
            let (du_x, du_y, du_l) = localization_backward(&g_slice, pb, &self.consts)?;
            seed.data_mut()[r * 3] = du_x as f32;
            seed.data_mut()[r * 3 + 1] = du_y as f32;
            seed.data_mut()[r * 3 + 2] = du_l as f32;
        }
        loc_sess.backward_seeded(u, seed, &mut self.store)?;
        self.store.adam_step_all(&self.cfg.adam, lr)?;
        self.store.zero_grad();
        Ok(loss_v)
    }

    /// L-Net pooled features for fixed boxes (eval mode).
    pub fn compute_l_pools(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        boxes: &[PixelBox],
    ) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(idx.len());
        for (chunk_idx, chunk_boxes) in idx
            .chunks(self.cfg.batch_size)
            .zip(boxes.chunks(self.cfg.batch_size))
        {
            let (x, _, _) = self.crop_batch(data, chunk_idx, chunk_boxes)?;
            let mut sess = Session::inference(Graph::new());
            let xv = sess.graph.leaf(x, false);
            let feat = self.model.extract_l(&mut sess, &mut self.store, xv, BnMode::Eval)?;
            let pool = self.model.pool_cls(&mut sess, feat, self.model.dims.l_cls_pool)?;
            let pv = sess.graph.value(pool);
            let d = self.model.dims.cls_in;
            for r in 0..chunk_idx.len() {
                out.push(Tensor::from_vec(
                    vec![d],
                    pv.data()[r * d..(r + 1) * d].to_vec(),
                )?);
            }
        }
        Ok(out)
    }

    /// Stage 2: train the two ensemble MLPs on concatenated pooled features
    /// of the frozen nets.
    pub fn train_ensemble_mlps(
        &mut self,
        data: &Dataset,
        train_idx: &[usize],
        pools: &GPools,
    ) -> Result<()> {
        let boxes = self.boxes_for(&pools.loc)?;
        let l_pools = self.compute_l_pools(data, train_idx, &boxes)?;
        let features: Vec<Tensor<f32>> = pools
            .cls
            .iter()
            .zip(&l_pools)
            .map(|(g, l)| {
                let mut data = Vec::with_capacity(g.len() + l.len());
                data.extend_from_slice(g.data());
                data.extend_from_slice(l.data());
                Tensor::from_vec(vec![g.len() + l.len()], data).expect("volume")
            })
            .collect();
        let labels: Vec<(usize, usize)> = train_idx
            .iter()
            .map(|&i| {
                let s = data.sample(i);
                (s.type_label, s.polarity_label)
            })
            .collect();

        self.store.enable_only(&["mlp."]);
        for epoch in 0..self.cfg.stage2_epochs {
            let lr = scheduled_lr(self.cfg.adam.base_lr, epoch as u64);
            let positions: Vec<usize> = (0..train_idx.len()).collect();
            let order = self.shuffled(&positions, &format!("stage2-{epoch}"));
            let mut sum_t = 0.0;
            let mut sum_p = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let rows: Vec<Tensor<f32>> =
                    chunk.iter().map(|&p| features[p].clone()).collect();
                let types: Vec<usize> = chunk.iter().map(|&p| labels[p].0).collect();
                let pols: Vec<usize> = chunk.iter().map(|&p| labels[p].1).collect();
                let mut sess = Session::new(Graph::new());
                let x = sess.graph.leaf(Self::stack_rows(&rows), false);
                let tl = self.model.type_mlp.forward(&mut sess, &self.store, x)?;
                let pl = self.model.polarity_mlp.forward(&mut sess, &self.store, x)?;
                // independent heads: plain sum, gradients do not interact
                let lt = sess.graph.cross_entropy(tl, &types, self.cfg.reduction)?;
                let lp = sess.graph.cross_entropy(pl, &pols, self.cfg.reduction)?;
                let loss = sess.graph.add(lt, lp)?;
                let (lt_v, lp_v) = (
                    sess.graph.value(lt).item()? as f64,
                    sess.graph.value(lp).item()? as f64,
                );
                self.check_finite(lt_v + lp_v, "stage2")?;
                sess.backward(loss, &mut self.store)?;
                self.store.adam_step_all(&self.cfg.adam, lr)?;
                self.store.zero_grad();
                sum_t += lt_v * chunk.len() as f64;
                sum_p += lp_v * chunk.len() as f64;
            }
            let epoch_id = self.next_epoch();
            self.log.push(LogRow {
                epoch: epoch_id,
                split: "train".into(),
                l_t: Some(sum_t / train_idx.len() as f64),
                l_p: Some(sum_p / train_idx.len() as f64),
                l_u: None,
            });
        }
        self.completed_step = self.completed_step.max(STEP_ENSEMBLE);
        Ok(())
    }

    /// Probabilities of a variant over an index list.
    pub fn evaluate(&mut self, data: &Dataset, idx: &[usize], variant: Variant) -> Result<EvalOutputs> {
        let pools = self.compute_g_pools(data, idx)?;
        self.evaluate_with_pools(data, idx, &pools, variant)
    }

    /// As [`Trainer::evaluate`] but reusing precomputed G pools.
    pub fn evaluate_with_pools(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        pools: &GPools,
        variant: Variant,
    ) -> Result<EvalOutputs> {
        let mut type_probs = Vec::with_capacity(idx.len());
        let mut pol_probs = Vec::with_capacity(idx.len());
        match variant {
            Variant::GNet => {
                for chunk in (0..idx.len()).collect::<Vec<_>>().chunks(self.cfg.batch_size) {
                    let rows: Vec<Tensor<f32>> =
                        chunk.iter().map(|&p| pools.cls[p].clone()).collect();
                    let mut sess = Session::inference(Graph::new());
                    let x = sess.graph.leaf(Self::stack_rows(&rows), false);
                    let (tl, pl) = self.model.g_heads.forward(&mut sess, &self.store, x)?;
                    push_probs(&mut type_probs, sess.graph.value(tl));
                    push_probs(&mut pol_probs, sess.graph.value(pl));
                }
            }
            Variant::LNet | Variant::Ensemble => {
                let boxes = self.boxes_for(&pools.loc)?;
                let l_pools = self.compute_l_pools(data, idx, &boxes)?;
                for chunk in (0..idx.len()).collect::<Vec<_>>().chunks(self.cfg.batch_size) {
                    let mut sess = Session::inference(Graph::new());
                    match variant {
                        Variant::LNet => {
                            let rows: Vec<Tensor<f32>> =
                                chunk.iter().map(|&p| l_pools[p].clone()).collect();
                            let x = sess.graph.leaf(Self::stack_rows(&rows), false);
                            let (tl, pl) =
                                self.model.l_heads.forward(&mut sess, &self.store, x)?;
                            push_probs(&mut type_probs, sess.graph.value(tl));
                            push_probs(&mut pol_probs, sess.graph.value(pl));
                        }
                        _ => {
                            let rows: Vec<Tensor<f32>> = chunk
                                .iter()
                                .map(|&p| {
                                    let g = &pools.cls[p];
                                    let l = &l_pools[p];
                                    let mut d = Vec::with_capacity(g.len() + l.len());
                                    d.extend_from_slice(g.data());
                                    d.extend_from_slice(l.data());
                                    Tensor::from_vec(vec![g.len() + l.len()], d).expect("volume")
                                })
                                .collect();
                            let x = sess.graph.leaf(Self::stack_rows(&rows), false);
                            let tl = self.model.type_mlp.forward(&mut sess, &self.store, x)?;
                            let pl =
                                self.model.polarity_mlp.forward(&mut sess, &self.store, x)?;
                            push_probs(&mut type_probs, sess.graph.value(tl));
                            push_probs(&mut pol_probs, sess.graph.value(pl));
                        }
                    }
                }
            }
        }
        Ok(EvalOutputs {
            case_ids: idx.iter().map(|&i| data.case_of(i).case_id.clone()).collect(),
            type_truth: idx.iter().map(|&i| data.sample(i).type_label).collect(),
            pol_truth: idx.iter().map(|&i| data.sample(i).polarity_label).collect(),
            type_probs,
            pol_probs,
        })
    }

    /// Saves parameters, optimizer state and progress metadata.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("completed_step".to_string(), self.completed_step as f64);
        meta.insert("width_scale".to_string(), self.cfg.width_scale);
        meta.insert("image_side".to_string(), self.cfg.image_side as f64);
        meta.insert("seed".to_string(), self.cfg.seed as f64);
        checkpoint::save_store(path, &self.store, &meta)
    }

    /// Rebuilds a trainer from a config and checkpoint. The stored
    /// architecture metadata must match the config.
    pub fn load_checkpoint(cfg: TrainConfig, path: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let meta = checkpoint::load_store(path, &mut t.store)?;
        let want = |key: &str, have: f64| -> Result<()> {
            match meta.get(key) {
                Some(&v) if v == have => Ok(()),
                Some(&v) => Err(Error::Checkpoint(format!(
                    "checkpoint {key} = {v}, config wants {have}"
                ))),
                None => Err(Error::Checkpoint(format!("checkpoint missing {key}"))),
            }
        };
        want("width_scale", t.cfg.width_scale)?;
        want("image_side", t.cfg.image_side as f64)?;
        t.completed_step = meta
            .get("completed_step")
            .copied()
            .unwrap_or(STEP_NONE as f64) as u8;
        Ok(t)
    }

    /// Runs every remaining phase of the schedule, optionally writing a
    /// checkpoint after each step.
    pub fn train_full(
        &mut self,
        data: &Dataset,
        train_idx: &[usize],
        val_idx: Option<&[usize]>,
        ckpt_dir: Option<&Path>,
    ) -> Result<()> {
        let save = |t: &Trainer, tag: &str| -> Result<()> {
            if let Some(dir) = ckpt_dir {
                std::fs::create_dir_all(dir)?;
                t.save_checkpoint(&dir.join(format!("ckpt_{tag}.vfck")))?;
            }
            Ok(())
        };
        if self.completed_step < STEP_GNET {
            self.step2_train_gnet(data, train_idx)?;
            save(self, "step2")?;
        }
        let pools = self.compute_g_pools(data, train_idx)?;
        if self.completed_step < STEP_LOCALIZER {
            let targets = self.compute_box_targets(data, train_idx)?;
            self.step3_pretrain_localizer(&pools, &targets)?;
            save(self, "step3")?;
        }
        if self.completed_step < STEP_ALTERNATE {
            let val = match val_idx {
                Some(vi) => {
                    let vp = self.compute_g_pools(data, vi)?;
                    Some((vi, vp))
                }
                None => None,
            };
            let val_ref = val.as_ref().map(|(vi, vp)| (*vi, vp));
            self.step4_alternate(data, train_idx, &pools, val_ref)?;
            save(self, "step4")?;
        }
        if self.completed_step < STEP_ENSEMBLE {
            self.train_ensemble_mlps(data, train_idx, &pools)?;
            save(self, "final")?;
        }
        Ok(())
    }
}

fn push_probs(out: &mut Vec<Vec<f64>>, logits: &Tensor<f32>) {
    let probs = softmax(logits);
    let cols = *probs.shape().last().expect("non-empty");
    for r in 0..probs.shape()[0] {
        out.push(
            probs.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        );
    }
}

/// Groups evaluation outputs by case for the per-case metrics.
pub fn group_by_case(outputs: &EvalOutputs) -> Vec<(CaseProbabilities, Vec<usize>, Vec<usize>)> {
    let mut order: Vec<String> = Vec::new();
    for id in &outputs.case_ids {
        if !order.contains(id) {
            order.push(id.clone());
        }
    }
    order
        .into_iter()
        .map(|case_id| {
            let rows: Vec<usize> = (0..outputs.case_ids.len())
                .filter(|&i| outputs.case_ids[i] == case_id)
                .collect();
            let probs = CaseProbabilities::new(
                case_id,
                rows.iter().map(|&i| outputs.type_probs[i].clone()).collect(),
            );
            let truths: Vec<usize> = rows.iter().map(|&i| outputs.type_truth[i]).collect();
            let preds: Vec<usize> = rows.iter().map(|&i| argmax(&outputs.type_probs[i])).collect();
            (probs, truths, preds)
        })
        .collect()
}

/// Builds the full evaluation report from per-sample outputs.
pub fn build_report(outputs: &EvalOutputs, th: f64, with_dispatch: bool) -> Result<EvaluationReport> {
    let type_preds: Vec<usize> = outputs.type_probs.iter().map(|r| argmax(r)).collect();
    let pol_preds: Vec<usize> = outputs.pol_probs.iter().map(|r| argmax(r)).collect();
    let cm_type = ConfusionMatrix::from_pairs(&type_preds, &outputs.type_truth, 24)?;
    let cm_pol = ConfusionMatrix::from_pairs(&pol_preds, &outputs.pol_truth, 2)?;
    let groups = group_by_case(outputs);
    let case_outcomes: Vec<CaseOutcome> = groups
        .iter()
        .map(|(_, truths, preds)| CaseOutcome {
            preds: preds.clone(),
            truths: truths.clone(),
        })
        .collect();
    let per_case = acc_per_case(&case_outcomes)?;
    let per_case_d = if with_dispatch {
        let pairs: Vec<(CaseProbabilities, Vec<usize>)> = groups
            .iter()
            .map(|(p, t, _)| (p.clone(), t.clone()))
            .collect();
        Some(acc_per_case_d(&pairs, th)?)
    } else {
        None
    };
    let (auc_type, skipped) = roc_auc_macro(&outputs.type_probs, &outputs.type_truth)?;
    let (auc_pol, _) = roc_auc_macro(&outputs.pol_probs, &outputs.pol_truth)?;
    Ok(EvaluationReport {
        n_samples: outputs.type_truth.len(),
        n_cases: case_outcomes.len(),
        acc_type: accuracy(&type_preds, &outputs.type_truth)?,
        f1_macro_type: cm_type.f1_macro(),
        acc_polarity: accuracy(&pol_preds, &outputs.pol_truth)?,
        f1_macro_polarity: cm_pol.f1_macro(),
        acc_per_case: per_case,
        acc_per_case_d: per_case_d,
        auc_macro_type: auc_type,
        auc_macro_polarity: auc_pol,
        per_class_type: cm_type.per_class(),
        auc_skipped_types: skipped,
    })
}

/// Confusion matrix of the type task for report side-outputs.
pub fn type_confusion(outputs: &EvalOutputs) -> Result<ConfusionMatrix> {
    let preds: Vec<usize> = outputs.type_probs.iter().map(|r| argmax(r)).collect();
    ConfusionMatrix::from_pairs(&preds, &outputs.type_truth, 24)
}
