//! Bilinear resizing with the align-corners convention.
//!
//! Source coordinates are `dst * (in-1)/(out-1)`, so the four corner pixels
//! map exactly and a same-size resize is the identity.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

struct Taps {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    (0..n_out)
        .map(|o| {
            if n_out == 1 || n_in == 1 {
                return Taps { i0: 0, i1: 0, w1: 0.0 };
            }
            let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Taps { i0, i1, w1: src - i0 as f64 }
        })
        .collect()
}

fn resize_dims(input: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize, bool)> {
    let (c, h, w, squeeze) = match *input {
        [c, h, w] => (c, h, w, true),
        [n, c, h, w] => (n * c, h, w, false),
        ref other => {
            return Err(Error::shape(format!(
                "bilinear_resize input must be [C,H,W] or [N,C,H,W], got {other:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize target size must be positive"));
    }
    Ok((c, h, w, squeeze))
}

/// Resizes each `H x W` plane to `out_h x out_w`.
pub fn bilinear_resize<E: Element>(
    input: &Tensor<E>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let (planes, h, w, _) = resize_dims(input.shape(), out_h, out_w)?;
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    let ys = axis_taps(h, out_h);
    let xs = axis_taps(w, out_w);
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let o = &mut dst[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let v00 = src[ty.i0 * w + tx.i0].to_f64();
                let v01 = src[ty.i0 * w + tx.i1].to_f64();
                let v10 = src[ty.i1 * w + tx.i0].to_f64();
                let v11 = src[ty.i1 * w + tx.i1].to_f64();
                let top = v00 + (v01 - v00) * tx.w1;
                let bot = v10 + (v11 - v10) * tx.w1;
                o[oy * out_w + ox] = E::from_f64(top + (bot - top) * ty.w1);
            }
        }
    }
    Ok(out)
}

impl<E: Element> Graph<E> {
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        let (planes, h, w, _) = resize_dims(self.value(x).shape(), out_h, out_w)?;
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(out, &[x], move |g| {
            let ys = axis_taps(h, out_h);
            let xs = axis_taps(w, out_w);
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for p in 0..planes {
                let gsrc = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for (oy, ty) in ys.iter().enumerate() {
                    for (ox, tx) in xs.iter().enumerate() {
                        let gv = gsrc[oy * out_w + ox].to_f64();
                        dst[ty.i0 * w + tx.i0] += E::from_f64(gv * (1.0 - ty.w1) * (1.0 - tx.w1));
                        dst[ty.i0 * w + tx.i1] += E::from_f64(gv * (1.0 - ty.w1) * tx.w1);
                        dst[ty.i1 * w + tx.i0] += E::from_f64(gv * ty.w1 * (1.0 - tx.w1));
                        dst[ty.i1 * w + tx.i1] += E::from_f64(gv * ty.w1 * tx.w1);
                    }
                }
            }
            vec![(x, dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_vec(vec![1, 2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let y = bilinear_resize(&x, 2, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn constant_stays_constant_any_size() {
        let x = Tensor::<f64>::filled(&[2, 5, 7], 3.25);
        let y = bilinear_resize(&x, 13, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn row_interpolation_hand_value() {
        // {0, 1} -> {0, 0.5, 1} with align-corners
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 3).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn output_within_input_range() {
        let x = Tensor::<f64>::from_vec(vec![1, 3, 3], vec![0., 9., 1., 5., 2., 7., 3., 8., 4.]).unwrap();
        let y = bilinear_resize(&x, 11, 17).unwrap();
        for &v in y.data() {
            assert!((0.0..=9.0).contains(&v));
        }
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::<f64>::filled(&[1, 2, 2], 1.0);
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }
}
