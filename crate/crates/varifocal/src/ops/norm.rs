//! Batch normalization over the channel axis of `N x C x H x W` maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Whether batch statistics (train) or running statistics (eval) normalise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean/variance updated by exponential moving average in train mode.
#[derive(Debug, Clone)]
pub struct RunningStats<E: Element> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
    /// Set once train mode has populated the statistics.
    pub initialized: bool,
}

impl<E: Element> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::filled(&[channels], E::one()),
            initialized: false,
        }
    }
}

struct BnDims {
    n: usize,
    c: usize,
    hw: usize,
    squeeze: bool,
}

fn bn_dims(input: &[usize], channels: usize) -> Result<BnDims> {
    let (n, c, hw, squeeze) = match *input {
        [c, h, w] => (1, c, h * w, true),
        [n, c, h, w] => (n, c, h * w, false),
        ref other => {
            return Err(Error::shape(format!(
                "batch_norm2d input must be [C,H,W] or [N,C,H,W], got {other:?}"
            )))
        }
    };
    if c != channels {
        return Err(Error::shape(format!(
            "batch_norm2d configured for {channels} channels, input has {c}"
        )));
    }
    Ok(BnDims { n, c, hw, squeeze })
}

/// Per-channel batch statistics computed in f64 for order-independent sums.
fn batch_stats<E: Element>(x: &Tensor<E>, d: &BnDims) -> (Vec<f64>, Vec<f64>) {
    let m = (d.n * d.hw) as f64;
    let plane = d.c * d.hw;
    let mut stats: Vec<(f64, f64)> = vec![(0.0, 0.0); d.c];
    stats.par_iter_mut().enumerate().for_each(|(c, slot)| {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..d.n {
            let s = &x.data()[i * plane + c * d.hw..i * plane + (c + 1) * d.hw];
            for &v in s {
                let v = v.to_f64();
                sum += v;
                sumsq += v * v;
            }
        }
        *slot = (sum, sumsq);
    });
    let mut mean = Vec::with_capacity(d.c);
    let mut var = Vec::with_capacity(d.c);
    for (sum, sumsq) in stats {
        let mu = sum / m;
        mean.push(mu);
        var.push((sumsq / m - mu * mu).max(0.0));
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn normalize<E: Element>(
    x: &Tensor<E>,
    d: &BnDims,
    mean: &[f64],
    var: &[f64],
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    epsilon: f64,
) -> (Tensor<E>, Vec<f64>) {
    let plane = d.c * d.hw;
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    let dst = out.data_mut();
    dst.par_chunks_mut(d.hw).enumerate().for_each(|(chunk, o)| {
        let c = chunk % d.c;
        let base = (chunk / d.c) * plane + c * d.hw;
        let g = E::from_f64(gamma.data()[c].to_f64() * inv[c]);
        let b = E::from_f64(beta.data()[c].to_f64() - gamma.data()[c].to_f64() * mean[c] * inv[c]);
        for (ov, &xv) in o.iter_mut().zip(&x.data()[base..base + d.hw]) {
            *ov = g * xv + b;
        }
    });
    (out, inv)
}

/// Forward pass without gradient tracking (used by inference paths).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mode: BnMode,
    running: &mut RunningStats<E>,
    epsilon: f64,
    momentum: f64,
) -> Result<Tensor<E>> {
    let channels = gamma.len();
    if beta.len() != channels || running.mean.len() != channels {
        return Err(Error::shape("batch_norm2d parameter length mismatch".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::invalid("batch_norm2d epsilon must be > 0"));
    }
    let d = bn_dims(input.shape(), channels)?;
    match mode {
        BnMode::Train => {
            let m = d.n * d.hw;
            if m < 2 {
                return Err(Error::invalid(
                    "batch_norm2d train mode needs at least 2 values per channel",
                ));
            }
            let (mean, var) = batch_stats(input, &d);
            update_running(running, &mean, &var, m, momentum);
            Ok(normalize(input, &d, &mean, &var, gamma, beta, epsilon).0)
        }
        BnMode::Eval => {
            if !running.initialized {
                return Err(Error::invalid(
                    "batch_norm2d eval mode without populated running stats",
                ));
            }
            let mean: Vec<f64> = running.mean.data().iter().map(|v| v.to_f64()).collect();
            let var: Vec<f64> = running.var.data().iter().map(|v| v.to_f64()).collect();
            Ok(normalize(input, &d, &mean, &var, gamma, beta, epsilon).0)
        }
    }
}

fn update_running<E: Element>(
    running: &mut RunningStats<E>,
    mean: &[f64],
    var: &[f64],
    m: usize,
    momentum: f64,
) {
    // running variance uses the unbiased estimate
    let unbias = m as f64 / (m as f64 - 1.0);
    let rm = running.mean.data_mut();
    for (r, &mu) in rm.iter_mut().zip(mean) {
        *r = E::from_f64((1.0 - momentum) * r.to_f64() + momentum * mu);
    }
    let rv = running.var.data_mut();
    for (r, &v) in rv.iter_mut().zip(var) {
        *r = E::from_f64((1.0 - momentum) * r.to_f64() + momentum * v * unbias);
    }
    running.initialized = true;
}

impl<E: Element> Graph<E> {
    /// Records batch normalization; in train mode this also advances the
    /// running statistics as a side effect of the forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: &mut RunningStats<E>,
        epsilon: f64,
        momentum: f64,
    ) -> Result<Var> {
        let channels = self.value(gamma).len();
        if epsilon <= 0.0 {
            return Err(Error::invalid("batch_norm2d epsilon must be > 0"));
        }
        let d = bn_dims(self.value(x).shape(), channels)?;
        let (mean, var) = match mode {
            BnMode::Train => {
                let m = d.n * d.hw;
                if m < 2 {
                    return Err(Error::invalid(
                        "batch_norm2d train mode needs at least 2 values per channel",
                    ));
                }
                let (mean, var) = batch_stats(self.value(x), &d);
                update_running(running, &mean, &var, m, momentum);
                (mean, var)
            }
            BnMode::Eval => {
                if !running.initialized {
                    return Err(Error::invalid(
                        "batch_norm2d eval mode without populated running stats",
                    ));
                }
                (
                    running.mean.data().iter().map(|v| v.to_f64()).collect(),
                    running.var.data().iter().map(|v| v.to_f64()).collect(),
                )
            }
        };
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (out, inv) = normalize(self.value(x), &d, &mean, &var, &gv, &bv, epsilon);
        let xv = self.value(x).clone();
        let batch_mode = mode == BnMode::Train;
        let (n, c, hw, squeeze) = (d.n, d.c, d.hw, d.squeeze);
        self.push_op(out, &[x, gamma, beta], move |g| {
            let plane = c * hw;
            let m = (n * hw) as f64;
            let mut dx = Tensor::zeros(xv.shape());
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            let _ = squeeze;
            // per-channel reductions first
            let sums: Vec<(f64, f64)> = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for i in 0..n {
                        let base = i * plane + ch * hw;
                        for j in 0..hw {
                            let dy = g.data()[base + j].to_f64();
                            let xhat = (xv.data()[base + j].to_f64() - mean[ch]) * inv[ch];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    (sum_dy, sum_dy_xhat)
                })
                .collect();
            for ch in 0..c {
                dgamma.data_mut()[ch] = E::from_f64(sums[ch].1);
                dbeta.data_mut()[ch] = E::from_f64(sums[ch].0);
            }
            let dxd = dx.data_mut();
            dxd.par_chunks_mut(hw).enumerate().for_each(|(chunk, o)| {
                let ch = chunk % c;
                let base = (chunk / c) * plane + ch * hw;
                let gam = gv.data()[ch].to_f64();
                let (sum_dy, sum_dy_xhat) = sums[ch];
                if batch_mode {
                    for (j, ov) in o.iter_mut().enumerate() {
                        let dy = g.data()[base + j].to_f64();
                        let xhat = (xv.data()[base + j].to_f64() - mean[ch]) * inv[ch];
                        let v = gam * inv[ch] * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
                        *ov = E::from_f64(v);
                    }
                } else {
                    // running stats are constants: straight-through scale
                    for (j, ov) in o.iter_mut().enumerate() {
                        let dy = g.data()[base + j].to_f64();
                        *ov = E::from_f64(dy * gam * inv[ch]);
                    }
                }
            });
            vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(t: &[f64]) -> (f64, f64) {
        let n = t.len() as f64;
        let m = t.iter().sum::<f64>() / n;
        let v = t.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        (m, v)
    }

    #[test]
    fn constant_input_maps_to_beta() {
        // gamma=1, beta=0, constant input -> all zeros (train mode)
        let x = Tensor::<f64>::filled(&[1, 2, 3, 3], 4.0);
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut rs = RunningStats::new(2);
        let y = batch_norm2d(&x, &gamma, &beta, BnMode::Train, &mut rs, 1e-5, 0.1).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));

        // gamma=0, beta=b -> constant b
        let gamma = Tensor::zeros(&[2]);
        let beta = Tensor::filled(&[2], 0.7);
        let y = batch_norm2d(&x, &gamma, &beta, BnMode::Train, &mut rs, 1e-5, 0.1).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn two_element_channel_normalizes_to_unit() {
        // {0, 2} -> {-1, +1} as epsilon -> 0
        let x = Tensor::<f64>::from_vec(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rs = RunningStats::new(1);
        let y = batch_norm2d(&x, &gamma, &beta, BnMode::Train, &mut rs, 1e-12, 0.1).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let x = Tensor::<f64>::from_vec(vec![2, 3, 4, 4], vals).unwrap();
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut rs = RunningStats::new(3);
        let y = batch_norm2d(&x, &gamma, &beta, BnMode::Train, &mut rs, 1e-9, 0.1).unwrap();
        for c in 0..3 {
            let mut vals = Vec::new();
            for i in 0..2 {
                for j in 0..16 {
                    vals.push(y.data()[i * 48 + c * 16 + j]);
                }
            }
            let (m, v) = stats(&vals);
            assert!(m.abs() < 1e-9, "channel {c} mean {m}");
            assert!((v - 1.0).abs() < 1e-6, "channel {c} var {v}");
        }
    }

    #[test]
    fn eval_without_stats_is_an_error() {
        let x = Tensor::<f64>::filled(&[1, 4, 4], 1.0);
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rs = RunningStats::new(1);
        assert!(batch_norm2d(&x, &gamma, &beta, BnMode::Eval, &mut rs, 1e-5, 0.1).is_err());
    }

    #[test]
    fn bad_epsilon_rejected() {
        let x = Tensor::<f64>::filled(&[1, 4, 4], 1.0);
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rs = RunningStats::new(1);
        assert!(batch_norm2d(&x, &gamma, &beta, BnMode::Train, &mut rs, 0.0, 0.1).is_err());
    }
}
