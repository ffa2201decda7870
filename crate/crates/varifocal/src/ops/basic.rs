//! Elementwise ops, reductions, reshapes and softmax.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Below this volume elementwise kernels stay single-threaded.
const PAR_CHUNK: usize = 1 << 16;

pub(crate) fn unary<E: Element>(x: &Tensor<E>, f: impl Fn(E) -> E + Sync) -> Tensor<E> {
    let mut out = Tensor::zeros(x.shape());
    out.data_mut()
        .par_chunks_mut(PAR_CHUNK)
        .zip(x.data().par_chunks(PAR_CHUNK))
        .for_each(|(dst, src)| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = f(*s);
            }
        });
    out
}

pub(crate) fn binary<E: Element>(
    op: &str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E + Sync,
) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(a.shape());
    out.data_mut()
        .par_chunks_mut(PAR_CHUNK)
        .zip(a.data().par_chunks(PAR_CHUNK).zip(b.data().par_chunks(PAR_CHUNK)))
        .for_each(|(dst, (sa, sb))| {
            for ((d, &x), &y) in dst.iter_mut().zip(sa).zip(sb) {
                *d = f(x, y);
            }
        });
    Ok(out)
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Row-wise softmax of a `[C]` or `[N, C]` tensor, stabilised by
/// max-subtraction so arbitrary logit shifts cannot overflow.
pub fn softmax<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let (rows, cols) = match logits.shape() {
        [c] => (1, *c),
        [n, c] => (*n, *c),
        other => panic!("softmax expects rank 1 or 2, got {other:?}"),
    };
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let orow = &mut dst[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut denom = E::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            denom += e;
        }
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    out
}

impl<E: Element> Graph<E> {
    /// Elementwise `max(0, x)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let out = unary(&xv, |v| if v > E::zero() { v } else { E::zero() });
        self.push_op(out, &[x], move |g| {
            let mut dx = Tensor::zeros(xv.shape());
            let d = dx.data_mut();
            for ((d, &gv), &v) in d.iter_mut().zip(g.data()).zip(xv.data()) {
                *d = if v > E::zero() { gv } else { E::zero() };
            }
            vec![(x, dx)]
        })
        .expect("relu is infallible")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = unary(self.value(x), sigmoid_scalar);
        let saved = out.clone();
        self.push_op(out, &[x], move |g| {
            let mut dx = Tensor::zeros(saved.shape());
            for ((d, &gv), &s) in dx.data_mut().iter_mut().zip(g.data()).zip(saved.data()) {
                *d = gv * s * (E::one() - s);
            }
            vec![(x, dx)]
        })
        .expect("sigmoid is infallible")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push_op(out, &[a, b], move |g| vec![(a, g.clone()), (b, g.clone())])
    }

    /// `a + lambda * b`; the weighted multi-task combination.
    pub fn add_scaled(&mut self, a: Var, b: Var, lambda: E) -> Result<Var> {
        let out = binary("add_scaled", self.value(a), self.value(b), |x, y| {
            x + lambda * y
        })?;
        self.push_op(out, &[a, b], move |g| {
            vec![(a, g.clone()), (b, g.map(|v| v * lambda))]
        })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = binary("mul", &av, &bv, |x, y| x * y)?;
        self.push_op(out, &[a, b], move |g| {
            let da = binary("mul-back", g, &bv, |x, y| x * y).expect("shapes match");
            let db = binary("mul-back", g, &av, |x, y| x * y).expect("shapes match");
            vec![(a, da), (b, db)]
        })
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let out = unary(self.value(x), |v| v * c);
        self.push_op(out, &[x], move |g| vec![(x, g.map(|v| v * c))])
            .expect("scale is infallible")
    }

    /// Sum of all elements into a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let s = E::from_f64(self.value(x).sum_f64());
        self.push_op(Tensor::scalar(s), &[x], move |g| {
            let gv = g.data()[0];
            vec![(x, Tensor::filled(&shape, gv))]
        })
        .expect("sum is infallible")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let shape = self.value(x).shape().to_vec();
        let m = E::from_f64(self.value(x).sum_f64() / n as f64);
        self.push_op(Tensor::scalar(m), &[x], move |g| {
            let gv = g.data()[0] / E::from_f64(n as f64);
            vec![(x, Tensor::filled(&shape, gv))]
        })
        .expect("mean is infallible")
    }

    /// Shape-only view; gradient flows through unchanged.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let old = self.value(x).shape().to_vec();
        let out = self.value(x).reshaped(shape)?;
        self.push_op(out, &[x], move |g| {
            vec![(x, g.reshaped(old).expect("volume preserved"))]
        })
    }

    /// Concatenates two `[N, D]` tensors along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[n1, d1], &[n2, d2]) = (av.shape(), bv.shape()) else {
            return Err(Error::shape(format!(
                "concat_cols expects rank 2, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        };
        if n1 != n2 {
            return Err(Error::shape(format!(
                "concat_cols row mismatch: {n1} vs {n2}"
            )));
        }
        let mut out = Tensor::zeros(&[n1, d1 + d2]);
        {
            let dst = out.data_mut();
            for r in 0..n1 {
                dst[r * (d1 + d2)..r * (d1 + d2) + d1]
                    .copy_from_slice(&av.data()[r * d1..(r + 1) * d1]);
                dst[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)]
                    .copy_from_slice(&bv.data()[r * d2..(r + 1) * d2]);
            }
        }
        self.push_op(out, &[a, b], move |g| {
            let mut da = Tensor::zeros(&[n1, d1]);
            let mut db = Tensor::zeros(&[n1, d2]);
            for r in 0..n1 {
                da.data_mut()[r * d1..(r + 1) * d1]
                    .copy_from_slice(&g.data()[r * (d1 + d2)..r * (d1 + d2) + d1]);
                db.data_mut()[r * d2..(r + 1) * d2]
                    .copy_from_slice(&g.data()[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)]);
            }
            vec![(a, da), (b, db)]
        })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let out = softmax(self.value(logits));
        let saved = out.clone();
        self.push_op(out, &[logits], move |g| {
            let cols = *saved.shape().last().expect("non-empty shape");
            let rows = saved.len() / cols;
            let mut dx = Tensor::zeros(saved.shape());
            let d = dx.data_mut();
            for r in 0..rows {
                let y = &saved.data()[r * cols..(r + 1) * cols];
                let gy = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = y
                    .iter()
                    .zip(gy)
                    .map(|(&yv, &gv)| (yv * gv).to_f64())
                    .sum();
                let dot = E::from_f64(dot);
                for c in 0..cols {
                    d[r * cols + c] = y[c] * (gy[c] - dot);
                }
            }
            vec![(logits, dx)]
        })
        .expect("softmax is infallible")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![v.len()], v).unwrap()
    }

    #[test]
    fn relu_spec_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(vec![-1.0, 0.0, 2.0]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let x = g.leaf(t64(vec![-3.0, -0.5]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.leaf(t64(vec![3.0, 0.5]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[3.0, 0.5]);
    }

    #[test]
    fn softmax_uniform_logits_are_uniform() {
        let y = softmax(&Tensor::<f64>::filled(&[24], 0.3));
        for &v in y.data() {
            assert!((v - 1.0 / 24.0).abs() < 1e-12);
        }
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_limit_and_hand_value() {
        // {0, large} -> ~{0, 1}
        let y = softmax(&t64(vec![0.0, 200.0]));
        assert!(y.data()[0] < 1e-10);
        assert!((y.data()[1] - 1.0).abs() < 1e-10);
        // {0, ln 3} -> {0.25, 0.75}
        let y = softmax(&t64(vec![0.0, 3.0f64.ln()]));
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&t64(vec![0.1, 2.0, -1.0]));
        let b = softmax(&t64(vec![100.1, 102.0, 99.0]));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.leaf(Tensor::from_vec(vec![1, 3], vec![3.0, 4.0, 5.0]).unwrap(), true);
        let c = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().shape(), &[1, 2]);
        assert_eq!(g.grad(b).unwrap().shape(), &[1, 3]);
    }
}
