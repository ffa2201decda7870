//! The varifocal mechanism: box geometry, boxcar masking and its gradients.
//!
//! A localization head predicts a relative square box `(u_x, u_y, u_l)` in
//! `[0,1]^3`. [`box_to_pixels`] maps it into pixel space so that the box
//! center can shift at most `T2` from the minimum margin `T1` and the side
//! stays within `[T1, 2*T1]` — every admissible box lies inside the image.
//!
//! The forward crop slices the image directly and rescales it with bilinear
//! interpolation. Slicing has no derivative with respect to the box, so the
//! backward path goes through a separable boxcar mask built from smoothed
//! Heaviside steps ([`boxcar_mask`]); [`boxcar_coordinate_gradients`]
//! evaluates the analytic derivative of that mask with respect to the box
//! parameters against any per-pixel sensitivity field.

use crate::error::{Error, Result};
use crate::ops::resize::bilinear_resize;
use crate::tensor::{Element, Tensor};

/// Fixed geometry of the zoom: minimum margin `t1`, maximum shift
/// `t2 = 2*t1`, logistic sharpness `k`, and the square sizes of the input
/// image and the zoomed output.
#[derive(Debug, Clone, Copy)]
pub struct VarifocalConstants {
    pub t1: f64,
    pub t2: f64,
    pub k: f64,
    pub image_side: usize,
    pub zoom_side: usize,
}

impl VarifocalConstants {
    /// Derives all constants from the image side: `t1 = side/4` and
    /// `t2 = side/2`, so `t1 + t2 + t1` covers the image exactly.
    pub fn for_image_side(image_side: usize, k: f64) -> Result<Self> {
        if image_side % 4 != 0 || image_side == 0 {
            return Err(Error::invalid(format!(
                "image side must be a positive multiple of 4, got {image_side}"
            )));
        }
        if k <= 0.0 {
            return Err(Error::invalid("logistic sharpness k must be > 0"));
        }
        Ok(Self {
            t1: image_side as f64 / 4.0,
            t2: image_side as f64 / 2.0,
            k,
            image_side,
            zoom_side: image_side / 2,
        })
    }

    /// The full-scale configuration: 256px images, T1 = 64, T2 = 128,
    /// 128px zoom, k = 10.
    pub fn standard() -> Self {
        Self::for_image_side(256, 10.0).expect("256 is a multiple of 4")
    }
}

/// Normalized box prediction, each component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeBox {
    pub x: f64,
    pub y: f64,
    pub l: f64,
}

impl RelativeBox {
    pub fn new(x: f64, y: f64, l: f64) -> Self {
        Self { x, y, l }
    }

    pub fn in_unit_cube(&self) -> bool {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        ok(self.x) && ok(self.y) && ok(self.l)
    }
}

/// Pixel-space square region with corners `(x_tl, y_tl)`–`(x_br, y_br)` and
/// half side `half_side`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
    pub half_side: f64,
}

impl PixelBox {
    pub fn side(&self) -> f64 {
        2.0 * self.half_side
    }
}

/// Maps a relative box to pixel coordinates:
/// half side `t_l = u_l*T1/2 + T1/2`, center `(T1 + u_x*T2, T1 + u_y*T2)`.
pub fn box_to_pixels(u: &RelativeBox, c: &VarifocalConstants) -> PixelBox {
    let t_l = u.l * c.t1 / 2.0 + c.t1 / 2.0;
    let cx = c.t1 + u.x * c.t2;
    let cy = c.t1 + u.y * c.t2;
    PixelBox {
        x_tl: cx - t_l,
        y_tl: cy - t_l,
        x_br: cx + t_l,
        y_br: cy + t_l,
        half_side: t_l,
    }
}

/// Logistic approximation of the Heaviside step: `1 / (1 + exp(-k*x))`.
pub fn heaviside_smooth(x: f64, k: f64) -> f64 {
    debug_assert!(k > 0.0);
    if k * x >= 0.0 {
        1.0 / (1.0 + (-k * x).exp())
    } else {
        let e = (k * x).exp();
        e / (1.0 + e)
    }
}

/// `d/dx` of [`heaviside_smooth`]: `k * H * (1 - H)`.
pub fn heaviside_deriv(x: f64, k: f64) -> f64 {
    let h = heaviside_smooth(x, k);
    k * h * (1.0 - h)
}

/// 1-D boxcar profile `H(t - lo) - H(t - hi)` sampled at integer pixel
/// coordinates `0..n`.
fn edge_profile(n: usize, lo: f64, hi: f64, k: f64) -> Vec<f64> {
    (0..n)
        .map(|t| heaviside_smooth(t as f64 - lo, k) - heaviside_smooth(t as f64 - hi, k))
        .collect()
}

/// Separable 2-D boxcar mask over the full image grid; values in `[0, 1]`,
/// close to 1 well inside the box and close to 0 well outside.
pub fn boxcar_mask<E: Element>(bx: &PixelBox, c: &VarifocalConstants) -> Tensor<E> {
    let n = c.image_side;
    let xs = edge_profile(n, bx.x_tl, bx.x_br, c.k);
    let ys = edge_profile(n, bx.y_tl, bx.y_br, c.k);
    let mut out = Tensor::zeros(&[n, n]);
    let d = out.data_mut();
    for (y, &wy) in ys.iter().enumerate() {
        for (x, &wx) in xs.iter().enumerate() {
            d[y * n + x] = E::from_f64(wy * wx);
        }
    }
    out
}

/// Integer slice bounds of a pixel box, corners rounded half-up and clamped
/// to the image.
pub fn rounded_slice(bx: &PixelBox, c: &VarifocalConstants) -> (usize, usize, usize, usize) {
    let side = c.image_side as f64;
    let r = |v: f64| (v + 0.5).floor().clamp(0.0, side) as usize;
    (r(bx.x_tl), r(bx.y_tl), r(bx.x_br), r(bx.y_br))
}

/// Hard forward crop: slices the rounded box out of a `[1, S, S]` image and
/// rescales it to `[1, zoom, zoom]` bilinearly.
pub fn crop_and_zoom<E: Element>(
    image: &Tensor<E>,
    bx: &PixelBox,
    c: &VarifocalConstants,
) -> Result<Tensor<E>> {
    let s = c.image_side;
    if image.shape() != [1, s, s] {
        return Err(Error::shape(format!(
            "crop_and_zoom expects [1, {s}, {s}], got {:?}",
            image.shape()
        )));
    }
    let (x0, y0, x1, y1) = rounded_slice(bx, c);
    if x1 < x0 + 2 || y1 < y0 + 2 {
        return Err(Error::invalid(format!(
            "degenerate box after rounding: {x0}..{x1} x {y0}..{y1}"
        )));
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let mut slice = Tensor::zeros(&[1, h, w]);
    {
        let d = slice.data_mut();
        for y in 0..h {
            d[y * w..(y + 1) * w]
                .copy_from_slice(&image.data()[(y0 + y) * s + x0..(y0 + y) * s + x1]);
        }
    }
    bilinear_resize(&slice, c.zoom_side, c.zoom_side)
}

/// Gradients of a scalar objective with respect to `(u_x, u_y, u_l)` given a
/// per-pixel sensitivity `s(p) = dL/dmask(p)` on the image grid:
///
/// `dL/du_g = sum_p s(p) * dmask/dt_g(p) * dt_g/du_g`
///
/// with `dt_x/du_x = dt_y/du_y = T2` and `dt_l/du_l = T1/2`. The mask is
/// separable, so the sums reduce to marginals against the 1-D profiles.
pub fn boxcar_coordinate_gradients<E: Element>(
    sensitivity: &Tensor<E>,
    bx: &PixelBox,
    c: &VarifocalConstants,
) -> Result<(f64, f64, f64)> {
    let n = c.image_side;
    let flat = sensitivity.len();
    if flat != n * n {
        return Err(Error::shape(format!(
            "sensitivity must cover the {n}x{n} grid, got {:?}",
            sensitivity.shape()
        )));
    }
    let xs = edge_profile(n, bx.x_tl, bx.x_br, c.k);
    let ys = edge_profile(n, bx.y_tl, bx.y_br, c.k);
    // derivative of the 1-D profile w.r.t. the center coordinate ...
    let dxs_c: Vec<f64> = (0..n)
        .map(|t| -heaviside_deriv(t as f64 - bx.x_tl, c.k) + heaviside_deriv(t as f64 - bx.x_br, c.k))
        .collect();
    let dys_c: Vec<f64> = (0..n)
        .map(|t| -heaviside_deriv(t as f64 - bx.y_tl, c.k) + heaviside_deriv(t as f64 - bx.y_br, c.k))
        .collect();
    // ... and w.r.t. the half side (both edges move apart)
    let dxs_l: Vec<f64> = (0..n)
        .map(|t| heaviside_deriv(t as f64 - bx.x_tl, c.k) + heaviside_deriv(t as f64 - bx.x_br, c.k))
        .collect();
    let dys_l: Vec<f64> = (0..n)
        .map(|t| heaviside_deriv(t as f64 - bx.y_tl, c.k) + heaviside_deriv(t as f64 - bx.y_br, c.k))
        .collect();

    // marginals of s against the orthogonal profile
    let data = sensitivity.data();
    let mut over_y = vec![0.0f64; n]; // sum_y s(x,y) * Y(y), indexed by x
    let mut over_x = vec![0.0f64; n]; // sum_x s(x,y) * X(x), indexed by y
    for y in 0..n {
        let row = &data[y * n..(y + 1) * n];
        let wy = ys[y];
        let mut rx = 0.0;
        for (x, &sv) in row.iter().enumerate() {
            let sv = sv.to_f64();
            over_y[x] += sv * wy;
            rx += sv * xs[x];
        }
        over_x[y] = rx;
    }

    let du_x: f64 = over_y.iter().zip(&dxs_c).map(|(m, d)| m * d).sum::<f64>() * c.t2;
    let du_y: f64 = over_x.iter().zip(&dys_c).map(|(m, d)| m * d).sum::<f64>() * c.t2;
    let du_l: f64 = (over_y.iter().zip(&dxs_l).map(|(m, d)| m * d).sum::<f64>()
        + over_x.iter().zip(&dys_l).map(|(m, d)| m * d).sum::<f64>())
        * (c.t1 / 2.0);
    Ok((du_x, du_y, du_l))
}

/// Maps the loss gradient at the zoomed local input back onto image pixels
/// (nearest-neighbor within in the cropped slice) as the negative squared
/// sensitivity `s(p) = -G_top(p)^2` used during weakly-supervised
/// fine-tuning.
pub fn heuristic_sensitivity<E: Element>(
    g_top: &Tensor<E>,
    bx: &PixelBox,
    c: &VarifocalConstants,
) -> Result<Tensor<f64>> {
    let z = c.zoom_side;
    if g_top.len() != z * z {
        return Err(Error::shape(format!(
            "G_top must be the {z}x{z} zoom grid, got {:?}",
            g_top.shape()
        )));
    }
    let (x0, y0, x1, y1) = rounded_slice(bx, c);
    let (w, h) = (x1 - x0, y1 - y0);
    if w < 2 || h < 2 {
        return Err(Error::invalid("degenerate box in heuristic_sensitivity"));
    }
    let n = c.image_side;
    let mut out = Tensor::zeros(&[n, n]);
    let d = out.data_mut();
    let g = g_top.data();
    for y in 0..h {
        let zy = ((y as f64) * (z - 1) as f64 / (h - 1) as f64).round() as usize;
        for x in 0..w {
            let zx = ((x as f64) * (z - 1) as f64 / (w - 1) as f64).round() as usize;
            let v = g[zy * z + zx].to_f64();
            d[(y0 + y) * n + (x0 + x)] = -v * v;
        }
    }
    Ok(out)
}

/// Full backward path for the box coordinates: negative-squared G_top mapped
/// into image space, then through the boxcar derivative.
pub fn localization_backward<E: Element>(
    g_top: &Tensor<E>,
    bx: &PixelBox,
    c: &VarifocalConstants,
) -> Result<(f64, f64, f64)> {
    let sens = heuristic_sensitivity(g_top, bx, c)?;
    boxcar_coordinate_gradients(&sens, bx, c)
}

/// Supervised pre-training target for the localization head: the box is
/// centered (`u_x* = u_y* = 0.5`) and `u_l*` covers the foreground extent,
/// `clamp(d/T1 - 1, 0, 1)` where `d` is the larger foreground bounding-box
/// dimension. Foreground means intensity strictly below `fg_threshold` on
/// the 0-255 scale.
pub fn ground_truth_box<E: Element>(
    image: &Tensor<E>,
    c: &VarifocalConstants,
    fg_threshold: f64,
) -> Result<RelativeBox> {
    let s = c.image_side;
    if image.len() != s * s {
        return Err(Error::shape(format!(
            "ground_truth_box expects a {s}x{s} image, got {:?}",
            image.shape()
        )));
    }
    let mut min_x = usize::MAX;
    let mut max_x = 0usize;
    let mut min_y = usize::MAX;
    let mut max_y = 0usize;
    for (i, &v) in image.data().iter().enumerate() {
        if v.to_f64() < fg_threshold {
            let (y, x) = (i / s, i % s);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if min_x == usize::MAX {
        return Err(Error::Data("image has no foreground pixels".into()));
    }
    let d = (max_x - min_x + 1).max(max_y - min_y + 1) as f64;
    Ok(RelativeBox::new(0.5, 0.5, (d / c.t1 - 1.0).clamp(0.0, 1.0)))
}
