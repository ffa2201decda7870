//! Max pooling with deterministic argmax gradient routing.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

struct PoolDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    h_out: usize,
    w_out: usize,
    squeeze: bool,
}

fn pool_dims(input: &[usize], kernel: usize, stride: usize) -> Result<PoolDims> {
    let (n, c, h, w, squeeze) = match *input {
        [c, h, w] => (1, c, h, w, true),
        [n, c, h, w] => (n, c, h, w, false),
        ref other => {
            return Err(Error::shape(format!(
                "max_pool2d input must be [C,H,W] or [N,C,H,W], got {other:?}"
            )))
        }
    };
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d kernel and stride must be >= 1"));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(format!(
            "max_pool2d kernel {kernel} larger than input {h}x{w}"
        )));
    }
    let h_out = (h - kernel) / stride + 1;
    let w_out = (w - kernel) / stride + 1;
    Ok(PoolDims { n, c, h, w, h_out, w_out, squeeze })
}

fn forward_with_argmax<E: Element>(
    input: &Tensor<E>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<E>, Vec<u32>)> {
    let d = pool_dims(input.shape(), kernel, stride)?;
    let mut shape = vec![d.n, d.c, d.h_out, d.w_out];
    if d.squeeze {
        shape.remove(0);
    }
    let mut out = Tensor::zeros(&shape);
    let mut argmax = vec![0u32; d.n * d.c * d.h_out * d.w_out];
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..d.n * d.c {
        let p = &src[plane * d.h * d.w..(plane + 1) * d.h * d.w];
        for oy in 0..d.h_out {
            for ox in 0..d.w_out {
                let mut best = E::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..kernel {
                    let iy = oy * stride + dy;
                    for dx in 0..kernel {
                        let ix = ox * stride + dx;
                        let v = p[iy * d.w + ix];
                        // strictly-greater keeps the first index on ties
                        if v > best {
                            best = v;
                            best_idx = iy * d.w + ix;
                        }
                    }
                }
                dst[o] = best;
                argmax[o] = (plane * d.h * d.w + best_idx) as u32;
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Max over `kernel x kernel` windows stepped by `stride`.
pub fn max_pool2d<E: Element>(
    input: &Tensor<E>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<E>> {
    forward_with_argmax(input, kernel, stride).map(|(out, _)| out)
}

impl<E: Element> Graph<E> {
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = forward_with_argmax(self.value(x), kernel, stride)?;
        let in_shape = self.value(x).shape().to_vec();
        self.push_op(out, &[x], move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                d[idx as usize] += gv;
            }
            vec![(x, dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_constant_output() {
        let x = Tensor::<f64>::filled(&[2, 8, 8], 2.5);
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn window_takes_max() {
        let x = Tensor::<f64>::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn table_shape_contract() {
        // 640x32x32 pooled by 8 -> 640x4x4 (scaled down here channel-wise)
        let x = Tensor::<f32>::filled(&[640, 32, 32], 1.0);
        let y = max_pool2d(&x, 8, 8).unwrap();
        assert_eq!(y.shape(), &[640, 4, 4]);
    }

    #[test]
    fn kernel_too_large_rejected() {
        let x = Tensor::<f64>::filled(&[1, 3, 3], 1.0);
        assert!(max_pool2d(&x, 4, 1).is_err());
    }

    #[test]
    fn gradient_mass_is_conserved_and_ties_go_first() {
        let mut g = Graph::<f64>::new();
        // all equal: tie broken to the first scanned element of each window
        let x = g.leaf(Tensor::filled(&[1, 2, 4], 1.0), true);
        let y = g.max_pool2d(x, 2, 2).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let dx = g.grad(x).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let incoming = 2.0; // two output cells, grad 1 each
        assert_eq!(dx.sum_f64(), incoming);
    }
}
