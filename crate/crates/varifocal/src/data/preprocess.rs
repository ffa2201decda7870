//! Image preprocessing: pad onto a white square, resize, per-image
//! normalization to zero mean and unit variance.

use super::ImageGray;
use crate::error::{Error, Result};
use crate::ops::resize::bilinear_resize;
use crate::tensor::Tensor;

/// Background intensity of the padded canvas, matching the white background
/// of stained chromosome photographs.
pub const BACKGROUND: f32 = 255.0;

/// Pad-then-resize geometry. The full-scale pipeline pads to 320 px and
/// resizes to 256 px; other network sizes keep the same 5:4 ratio.
#[derive(Debug, Clone, Copy)]
pub struct Preprocessor {
    pub pad_side: usize,
    pub out_side: usize,
}

impl Preprocessor {
    pub fn standard() -> Self {
        Self { pad_side: 320, out_side: 256 }
    }

    pub fn for_image_side(out_side: usize) -> Result<Self> {
        if out_side == 0 || out_side % 4 != 0 {
            return Err(Error::invalid(format!(
                "output side must be a positive multiple of 4, got {out_side}"
            )));
        }
        Ok(Self { pad_side: out_side * 5 / 4, out_side })
    }
}

/// Centers the image on a `side x side` canvas filled with white.
pub fn pad_to_square(img: &ImageGray, side: usize) -> Result<ImageGray> {
    if img.width > side || img.height > side {
        return Err(Error::Data(format!(
            "image {}x{} exceeds the {side} px canvas; rescale upstream",
            img.width, img.height
        )));
    }
    let mut out = ImageGray::filled(side, side, BACKGROUND);
    let x0 = (side - img.width) / 2;
    let y0 = (side - img.height) / 2;
    for y in 0..img.height {
        let src = &img.data[y * img.width..(y + 1) * img.width];
        out.data[(y0 + y) * side + x0..(y0 + y) * side + x0 + img.width].copy_from_slice(src);
    }
    Ok(out)
}

/// Bilinear resize of a grayscale image (align-corners convention).
pub fn resize_image(img: &ImageGray, out_w: usize, out_h: usize) -> Result<ImageGray> {
    let t = Tensor::from_vec(vec![1, img.height, img.width], img.data.clone())?;
    let r = bilinear_resize(&t, out_h, out_w)?;
    Ok(ImageGray {
        width: out_w,
        height: out_h,
        data: r.data().to_vec(),
    })
}

/// Per-image standardization `(x - mean) / std`; rejects constant images.
pub fn normalize(img: &ImageGray) -> Result<Tensor<f32>> {
    let n = img.data.len() as f64;
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img
        .data
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(Error::Data("constant image: zero variance".into()));
    }
    let inv = 1.0 / var.sqrt();
    let data = img
        .data
        .iter()
        .map(|&v| ((v as f64 - mean) * inv) as f32)
        .collect();
    Tensor::from_vec(vec![1, img.height, img.width], data)
}

impl Preprocessor {
    /// Resizes a padded square image to the network side without
    /// normalizing; ground-truth boxes are computed on this 0-255 image.
    pub fn resize_padded(&self, padded: &ImageGray) -> Result<ImageGray> {
        if padded.width != self.pad_side || padded.height != self.pad_side {
            return Err(Error::Data(format!(
                "expected a {0}x{0} padded image, got {1}x{2}",
                self.pad_side, padded.width, padded.height
            )));
        }
        resize_image(padded, self.out_side, self.out_side)
    }

    /// Full chain on a padded image: resize to the network side and
    /// normalize to zero mean / unit variance.
    pub fn resize_and_normalize(&self, padded: &ImageGray) -> Result<Tensor<f32>> {
        normalize(&self.resize_padded(padded)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_canvas_is_unchanged() {
        let img = ImageGray::filled(320, 320, 17.0);
        let out = pad_to_square(&img, 320).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn padding_centers_and_fills_white() {
        let img = ImageGray::filled(200, 100, 0.0);
        let out = pad_to_square(&img, 320).unwrap();
        // corners are background
        assert_eq!(out.get(0, 0), 255.0);
        assert_eq!(out.get(319, 319), 255.0);
        // content centered: x in [60, 260), y in [110, 210)
        assert_eq!(out.get(60, 110), 0.0);
        assert_eq!(out.get(259, 209), 0.0);
        assert_eq!(out.get(59, 110), 255.0);
        // white fraction: 1 - (200*100)/(320*320)
        let white = out.data.iter().filter(|&&v| v == 255.0).count() as f64;
        let want = 1.0 - (200.0 * 100.0) / (320.0 * 320.0);
        assert!((white / (320.0 * 320.0) - want).abs() < 1e-12);
    }

    #[test]
    fn oversized_image_rejected() {
        let img = ImageGray::filled(321, 50, 0.0);
        assert!(pad_to_square(&img, 320).is_err());
    }

    #[test]
    fn normalization_postcondition() {
        let pp = Preprocessor::standard();
        let mut img = ImageGray::filled(300, 240, 255.0);
        for y in 100..140 {
            for x in 120..180 {
                img.set(x, y, ((x * 7 + y * 13) % 200) as f32);
            }
        }
        let padded = pad_to_square(&img, pp.pad_side).unwrap();
        let t = pp.resize_and_normalize(&padded).unwrap();
        assert_eq!(t.shape(), &[1, 256, 256]);
        let n = t.len() as f64;
        let mean = t.sum_f64() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 1e-6, "std {}", var.sqrt());
    }

    #[test]
    fn two_valued_image_normalizes_to_symmetric_values() {
        let mut img = ImageGray::filled(2, 1, 0.0);
        img.set(1, 0, 255.0);
        let t = normalize(&img).unwrap();
        assert!((t.data()[0] + 1.0).abs() < 1e-6);
        assert!((t.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_image_rejected() {
        let img = ImageGray::filled(10, 10, 128.0);
        assert!(normalize(&img).is_err());
    }
}
