//! Loss kernels: fused softmax cross-entropy and smooth-L1.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// How per-sample losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Plain sum over samples, matching the written loss formulas.
    Sum,
    /// Sum divided by the number of samples; the training default.
    Mean,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

fn ce_dims(logits: &[usize], targets: &[usize]) -> Result<(usize, usize)> {
    let &[n, c] = logits else {
        return Err(Error::shape(format!(
            "cross_entropy logits must be [N,C], got {logits:?}"
        )));
    };
    if targets.len() != n {
        return Err(Error::shape(format!(
            "cross_entropy got {n} rows but {} targets",
            targets.len()
        )));
    }
    Ok((n, c))
}

/// `-log softmax(logits)[target]` rows, reduced. Targets are class indices.
pub fn cross_entropy<E: Element>(
    logits: &Tensor<E>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<E> {
    let (n, c) = ce_dims(logits.shape(), targets)?;
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::invalid(format!(
                "cross_entropy target {t} out of range for {c} classes"
            )));
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(E::neg_infinity(), E::max).to_f64();
        let lse = m + row.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
        total += lse - row[t].to_f64();
    }
    Ok(E::from_f64(total * reduction.scale(n)))
}

impl<E: Element> Graph<E> {
    /// Fused softmax + negative log-likelihood, reduced to a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let value = cross_entropy(self.value(logits), targets, reduction)?;
        let (n, c) = ce_dims(self.value(logits).shape(), targets)?;
        let lv = self.value(logits).clone();
        let targets = targets.to_vec();
        self.push_op(Tensor::scalar(value), &[logits], move |g| {
            let scale = g.data()[0].to_f64() * reduction.scale(n);
            let probs = super::basic::softmax(&lv);
            let mut dl = Tensor::zeros(lv.shape());
            let d = dl.data_mut();
            for (r, &t) in targets.iter().enumerate() {
                for j in 0..c {
                    let p = probs.data()[r * c + j].to_f64();
                    let delta = if j == t { 1.0 } else { 0.0 };
                    d[r * c + j] = E::from_f64((p - delta) * scale);
                }
            }
            vec![(logits, dl)]
        })
    }

    /// Smooth-L1 (Huber with delta = 1) between `pred` and a constant target,
    /// summed over every coordinate and reduced over rows.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<E>, reduction: Reduction) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "smooth_l1: {:?} vs {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let rows = if pv.rank() >= 2 { pv.shape()[0] } else { 1 };
        let scale = reduction.scale(rows);
        let mut total = 0.0f64;
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            let d = (p - t).to_f64();
            total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let pv = pv.clone();
        let target = target.clone();
        self.push_op(
            Tensor::scalar(E::from_f64(total * scale)),
            &[pred],
            move |g| {
                let gs = g.data()[0].to_f64() * scale;
                let mut dp = Tensor::zeros(pv.shape());
                for ((o, &p), &t) in dp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    let d = (p - t).to_f64();
                    let slope = if d.abs() < 1.0 { d } else { d.signum() };
                    *o = E::from_f64(slope * gs);
                }
                vec![(pred, dp)]
            },
        )
    }
}

/// Value of the smooth-L1 kernel at one residual.
pub fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}
