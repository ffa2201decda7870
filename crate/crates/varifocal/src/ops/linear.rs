//! Fully-connected layers: `y = W x + b`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

fn fc_dims(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<(usize, usize, usize, bool)> {
    let (n, d_in, squeeze) = match *input {
        [d] => (1, d, true),
        [n, d] => (n, d, false),
        ref other => {
            return Err(Error::shape(format!(
                "fully_connected input must be [D] or [N,D], got {other:?}"
            )))
        }
    };
    let &[d_out, w_in] = weight else {
        return Err(Error::shape(format!(
            "fully_connected weight must be [D_out,D_in], got {weight:?}"
        )));
    };
    if w_in != d_in {
        return Err(Error::shape(format!(
            "fully_connected: weight expects {w_in} inputs, input has {d_in}"
        )));
    }
    if bias != [d_out] {
        return Err(Error::shape(format!(
            "fully_connected bias must be [{d_out}], got {bias:?}"
        )));
    }
    Ok((n, d_in, d_out, squeeze))
}

/// `[N, D_out]` (or `[D_out]`) affine map of `[N, D_in]` rows.
pub fn fully_connected<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, d_in, d_out, squeeze) = fc_dims(input.shape(), weight.shape(), bias.shape())?;
    let shape = if squeeze { vec![d_out] } else { vec![n, d_out] };
    let mut out = Tensor::zeros(&shape);
    // out[n, o] = sum_i x[n, i] * w[o, i]  -> GEMM with B = W^T via strides
    unsafe {
        E::gemm(
            n,
            d_in,
            d_out,
            E::one(),
            input.data().as_ptr(),
            d_in as isize,
            1,
            weight.data().as_ptr(),
            1,
            d_in as isize,
            E::zero(),
            out.data_mut().as_mut_ptr(),
            d_out as isize,
            1,
        );
    }
    let dst = out.data_mut();
    for r in 0..n {
        for (v, &b) in dst[r * d_out..(r + 1) * d_out].iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

impl<E: Element> Graph<E> {
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = fully_connected(self.value(x), self.value(w), self.value(b))?;
        let (n, d_in, d_out, squeeze) =
            fc_dims(self.value(x).shape(), self.value(w).shape(), self.value(b).shape())?;
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        let (need_dx, need_dw, need_db) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        self.push_op(out, &[x, w, b], move |g| {
            let mut grads = Vec::new();
            let gd = g.data();
            if need_dx {
                // dx = g * W
                let mut dx = Tensor::zeros(xv.shape());
                unsafe {
                    E::gemm(
                        n,
                        d_out,
                        d_in,
                        E::one(),
                        gd.as_ptr(),
                        d_out as isize,
                        1,
                        wv.data().as_ptr(),
                        d_in as isize,
                        1,
                        E::zero(),
                        dx.data_mut().as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                grads.push((x, dx));
            }
            if need_dw {
                // dW = g^T * x
                let mut dw = Tensor::zeros(wv.shape());
                unsafe {
                    E::gemm(
                        d_out,
                        n,
                        d_in,
                        E::one(),
                        gd.as_ptr(),
                        1,
                        d_out as isize,
                        xv.data().as_ptr(),
                        d_in as isize,
                        1,
                        E::zero(),
                        dw.data_mut().as_mut_ptr(),
                        d_in as isize,
                        1,
                    );
                }
                grads.push((w, dw));
            }
            if need_db {
                let mut db = Tensor::zeros(&[d_out]);
                let dbd = db.data_mut();
                for r in 0..n {
                    for (acc, &gv) in dbd.iter_mut().zip(&gd[r * d_out..(r + 1) * d_out]) {
                        *acc += gv;
                    }
                }
                grads.push((b, db));
            }
            let _ = squeeze;
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_keeps_input() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = fully_connected(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weight_returns_bias() {
        let x = Tensor::<f64>::filled(&[4], 9.0);
        let w = Tensor::zeros(&[2, 4]);
        let b = Tensor::from_vec(vec![2], vec![0.25, -1.5]).unwrap();
        let y = fully_connected(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5]);
    }

    #[test]
    fn hand_computed_row() {
        // W=[[1,2]], x=[3,4], b=[1] -> [12]
        let x = Tensor::<f64>::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let y = fully_connected(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[12.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Tensor::<f64>::filled(&[3], 1.0);
        let w = Tensor::zeros(&[2, 4]);
        let b = Tensor::zeros(&[2]);
        assert!(fully_connected(&x, &w, &b).is_err());
    }
}
