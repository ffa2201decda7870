//! Training objectives: multi-task classification and localization losses.
//!
//! Type and polarity use softmax cross-entropy, combined as
//! `L = L_type + lambda * L_polarity` with the polarity weight defaulting to
//! 0.5. Localization pre-training uses smooth-L1 on the predicted relative
//! coordinates; weakly-supervised fine-tuning reuses the classification loss
//! of the local network instead, so only one of the two terms is active in
//! any given phase.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::Reduction;
use crate::tensor::Element;

pub const TYPE_CLASSES: usize = 24;
pub const POLARITY_CLASSES: usize = 2;

/// Balance and reduction for the multi-task objective.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight of the polarity term.
    pub lambda: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            reduction: Reduction::Mean,
        }
    }
}

/// Ground-truth labels for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiTaskTargets {
    /// Chromosome type, 0..=21 autosomes, 22 = X, 23 = Y.
    pub type_label: usize,
    /// 1 when the q-arm points downward, 0 otherwise.
    pub polarity_label: usize,
}

impl MultiTaskTargets {
    pub fn validate(&self) -> Result<()> {
        if self.type_label >= TYPE_CLASSES {
            return Err(crate::Error::invalid(format!(
                "type label {} out of range",
                self.type_label
            )));
        }
        if self.polarity_label >= POLARITY_CLASSES {
            return Err(crate::Error::invalid(format!(
                "polarity label {} out of range",
                self.polarity_label
            )));
        }
        Ok(())
    }
}

/// Cross-entropy over the 24 type classes.
pub fn type_loss<E: Element>(
    g: &mut Graph<E>,
    logits: Var,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    g.cross_entropy(logits, targets, cfg.reduction)
}

/// Cross-entropy over the 2 polarity classes.
pub fn polarity_loss<E: Element>(
    g: &mut Graph<E>,
    logits: Var,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    g.cross_entropy(logits, targets, cfg.reduction)
}

/// `L_type + lambda * L_polarity`.
pub fn multitask_loss<E: Element>(
    g: &mut Graph<E>,
    type_part: Var,
    polarity_part: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    g.add_scaled(type_part, polarity_part, E::from_f64(cfg.lambda))
}

/// Which term of the localization objective is live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalizationPhase {
    /// Supervised pre-training: only the coordinate loss is minimized.
    Pretrain,
    /// Weakly-supervised fine-tuning: only the local-net classification
    /// loss drives the subnet.
    FineTune,
}

/// Total localization loss `L_u + L_cls`; in each phase the inactive part
/// enters as a constant so no gradient flows through it.
pub fn localization_total_loss<E: Element>(
    g: &mut Graph<E>,
    coord_part: Var,
    cls_part: Var,
) -> Result<Var> {
    g.add(coord_part, cls_part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn multitask_hand_values() {
        let cfg = LossConfig {
            lambda: 0.5,
            reduction: Reduction::Sum,
        };
        let mut g = Graph::<f64>::new();
        // L_t = ln 24 (uniform over 24), L_p = ln 2 (uniform over 2)
        let tl = g.leaf(Tensor::zeros(&[1, 24]), false);
        let pl = g.leaf(Tensor::zeros(&[1, 2]), false);
        let lt = type_loss(&mut g, tl, &[3], &cfg).unwrap();
        let lp = polarity_loss(&mut g, pl, &[1], &cfg).unwrap();
        let total = multitask_loss(&mut g, lt, lp, &cfg).unwrap();
        let want = 24.0f64.ln() + 0.5 * 2.0f64.ln();
        assert!((g.value(total).item().unwrap() - want).abs() < 1e-9);
        assert!((want - 3.525).abs() < 5e-4);
    }

    #[test]
    fn degenerate_combinations() {
        let cfg = LossConfig {
            lambda: 0.5,
            reduction: Reduction::Sum,
        };
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(1.0), false);
        let b = g.leaf(Tensor::scalar(0.0), false);
        let t = multitask_loss(&mut g, a, b, &cfg).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 1.0);
        let c = g.leaf(Tensor::scalar(0.0), false);
        let d = g.leaf(Tensor::scalar(2.0), false);
        let t = multitask_loss(&mut g, c, d, &cfg).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 1.0);
    }

    #[test]
    fn lambda_scales_polarity_gradient_linearly() {
        // gradients of the combined loss decompose linearly in lambda
        for lambda in [0.25, 0.5, 2.0] {
            let cfg = LossConfig {
                lambda,
                reduction: Reduction::Sum,
            };
            let mut g = Graph::<f64>::new();
            let logits_t = g.leaf(Tensor::from_vec(vec![1, 3], vec![0.3, -0.4, 0.2]).unwrap(), true);
            let logits_p = g.leaf(Tensor::from_vec(vec![1, 2], vec![0.9, -0.1]).unwrap(), true);
            let lt = g.cross_entropy(logits_t, &[0], cfg.reduction).unwrap();
            let lp = g.cross_entropy(logits_p, &[1], cfg.reduction).unwrap();
            let total = multitask_loss(&mut g, lt, lp, &cfg).unwrap();
            g.backward(total).unwrap();
            // reference gradients at lambda = 1 computed in a fresh graph
            let mut r = Graph::<f64>::new();
            let rp = r.leaf(Tensor::from_vec(vec![1, 2], vec![0.9, -0.1]).unwrap(), true);
            let rl = r.cross_entropy(rp, &[1], Reduction::Sum).unwrap();
            r.backward(rl).unwrap();
            for (a, b) in g
                .grad(logits_p)
                .unwrap()
                .data()
                .iter()
                .zip(r.grad(rp).unwrap().data())
            {
                assert!((a - lambda * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_validation() {
        assert!(MultiTaskTargets { type_label: 23, polarity_label: 1 }.validate().is_ok());
        assert!(MultiTaskTargets { type_label: 24, polarity_label: 0 }.validate().is_err());
        assert!(MultiTaskTargets { type_label: 0, polarity_label: 2 }.validate().is_err());
    }
}
