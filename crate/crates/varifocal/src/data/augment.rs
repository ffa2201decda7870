//! Training-time augmentation: horizontal flip, rotation with white fill,
//! and vertical flip (which swaps the polarity label).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::BACKGROUND;
use super::ImageGray;

/// Mirror left-right. Labels are unaffected.
pub fn hflip(img: &ImageGray) -> ImageGray {
    let mut out = img.clone();
    for y in 0..img.height {
        let row = &mut out.data[y * img.width..(y + 1) * img.width];
        row.reverse();
    }
    out
}

/// Mirror top-bottom. The polarity label of the sample must be toggled by
/// the caller.
pub fn vflip(img: &ImageGray) -> ImageGray {
    let mut out = img.clone();
    for y in 0..img.height {
        let src = &img.data[(img.height - 1 - y) * img.width..(img.height - y) * img.width];
        out.data[y * img.width..(y + 1) * img.width].copy_from_slice(src);
    }
    out
}

/// Rotates about the image center by `degrees` (counter-clockwise), sampling
/// bilinearly and filling uncovered pixels with white background.
pub fn rotate_about_center(img: &ImageGray, degrees: f64) -> ImageGray {
    if degrees == 0.0 {
        return img.clone();
    }
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = ImageGray::filled(img.width, img.height, BACKGROUND);
    for y in 0..img.height {
        for x in 0..img.width {
            // inverse map: rotate the output pixel back into source space
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let v = sample_bilinear(img, sx, sy);
            out.set(x, y, v);
        }
    }
    out
}

fn sample_bilinear(img: &ImageGray, x: f64, y: f64) -> f32 {
    if x < 0.0 || y < 0.0 || x > (img.width - 1) as f64 || y > (img.height - 1) as f64 {
        return BACKGROUND;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
    let bot = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// One augmentation draw: rotation angle uniform in [0, 45] degrees, then
/// each flip with probability one half.
#[derive(Debug, Clone, Copy)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            rotation_deg: rng.random_range(0.0..=45.0),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
        }
    }
}

/// Applies a draw to an image and polarity label, returning the transformed
/// image and the (possibly toggled) polarity. Type labels never change.
pub fn apply(img: &ImageGray, polarity: usize, draw: &AugmentDraw) -> (ImageGray, usize) {
    let mut out = rotate_about_center(img, draw.rotation_deg);
    if draw.hflip {
        out = hflip(&out);
    }
    let mut polarity = polarity;
    if draw.vflip {
        out = vflip(&out);
        polarity = 1 - polarity;
    }
    (out, polarity)
}

/// Samples a draw and applies it.
pub fn augment(
    img: &ImageGray,
    polarity: usize,
    rng: &mut ChaCha8Rng,
) -> (ImageGray, usize) {
    let draw = AugmentDraw::sample(rng);
    apply(img, polarity, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    fn test_image() -> ImageGray {
        let mut img = ImageGray::filled(8, 6, 255.0);
        for y in 0..6 {
            for x in 0..8 {
                img.set(x, y, (x * 10 + y) as f32);
            }
        }
        img
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = test_image();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn vflip_is_an_involution_and_toggles_polarity() {
        let img = test_image();
        assert_eq!(vflip(&vflip(&img)), img);
        let draw = AugmentDraw { rotation_deg: 0.0, hflip: false, vflip: true };
        let (out, pol) = apply(&img, 1, &draw);
        assert_eq!(pol, 0);
        assert_eq!(out, vflip(&img));
        let (_, pol) = apply(&img, 0, &draw);
        assert_eq!(pol, 1);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = test_image();
        assert_eq!(rotate_about_center(&img, 0.0), img);
    }

    #[test]
    fn rotation_preserves_center_and_fills_corners() {
        let mut img = ImageGray::filled(21, 21, 255.0);
        img.set(10, 10, 0.0);
        let out = rotate_about_center(&img, 30.0);
        assert_eq!(out.get(10, 10), 0.0);
        assert_eq!(out.get(0, 0), 255.0);
    }

    #[test]
    fn draws_are_deterministic_per_seed() {
        let mut a = seeded_rng(5, "aug");
        let mut b = seeded_rng(5, "aug");
        for _ in 0..10 {
            let da = AugmentDraw::sample(&mut a);
            let db = AugmentDraw::sample(&mut b);
            assert_eq!(da.rotation_deg, db.rotation_deg);
            assert_eq!(da.hflip, db.hflip);
            assert_eq!(da.vflip, db.vflip);
        }
    }

    #[test]
    fn rotation_angles_within_spec_range() {
        let mut rng = seeded_rng(9, "aug");
        for _ in 0..200 {
            let d = AugmentDraw::sample(&mut rng);
            assert!((0.0..=45.0).contains(&d.rotation_deg));
        }
    }
}
