//! Synthetic chromosome corpus: a stand-in for clinical data.
//!
//! Each of the 24 classes gets a fixed prototype — length, width,
//! centromere position and a 1-D banding profile — rendered as a vertical
//! band figure on a white canvas. Per-sample randomness adds length/width
//! jitter, a sinusoidal horizontal shear (curvature), pixel noise and a
//! random polarity realized by vertical flipping. Lengths decrease
//! monotonically from class 1 to 22 with Y shortest, mimicking real
//! karyotype ordering, and the banding patterns are distinct enough that a
//! nearest-prototype classifier separates clean renders perfectly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CaseRecord, ImageGray, Sample, Sex};
use crate::data::preprocess::BACKGROUND;
use crate::error::{Error, Result};
use crate::losses::TYPE_CLASSES;
use crate::params::seeded_rng;

/// Body intensity around which bands oscillate.
const BODY_BASE: f64 = 150.0;
/// Centromere brightening.
const CENTROMERE_GAIN: f64 = 70.0;

/// One dark band of the profile, in arm-length coordinates `t in [0,1]`.
#[derive(Debug, Clone, Copy)]
pub struct Band {
    pub center: f64,
    pub width: f64,
    pub depth: f64,
}

/// Per-class rendering constants.
#[derive(Debug, Clone)]
pub struct ClassPrototype {
    /// Class index 0..=23 (22 = X, 23 = Y).
    pub class: usize,
    /// Body length in pixels on the 320 px canvas scale.
    pub length: f64,
    /// Body width in pixels.
    pub width: f64,
    /// Centromere position from the p-arm end, fraction of length < 0.45,
    /// so the long q-arm always points the other way.
    pub centromere: f64,
    pub bands: Vec<Band>,
}

impl ClassPrototype {
    /// Intensity profile along the body, `t = 0` at the p-arm tip.
    pub fn intensity(&self, t: f64) -> f64 {
        let mut v = BODY_BASE;
        for b in &self.bands {
            let z = (t - b.center) / b.width;
            v -= b.depth * (-z * z).exp();
        }
        let zc = (t - self.centromere) / 0.03;
        v += CENTROMERE_GAIN * (-zc * zc).exp();
        v.clamp(20.0, 235.0)
    }
}

/// Builds the 24 fixed prototypes. Deterministic: band layouts come from a
/// per-class seeded stream.
pub fn class_prototypes() -> Vec<ClassPrototype> {
    (0..TYPE_CLASSES)
        .map(|class| {
            let mut rng = seeded_rng(0x5EED, &format!("prototype-{class}"));
            let length = match class {
                22 => 190.0,         // X sits among the mid autosomes
                23 => 62.0,          // Y is the shortest body
                c => 270.0 - c as f64 * 9.3,
            };
            let width = 16.0 + length / 9.0;
            let centromere = 0.18 + 0.24 * ((class * 7 + 3) % 10) as f64 / 9.0;
            let n_bands = 3 + (class * 2654435761 % 5);
            let mut bands: Vec<Band> = (0..n_bands)
                .map(|_| Band {
                    center: rng.random_range(0.06..0.94),
                    width: rng.random_range(0.025..0.075),
                    depth: rng.random_range(70.0..130.0),
                })
                .collect();
            bands.sort_by(|a, b| a.center.partial_cmp(&b.center).expect("finite"));
            ClassPrototype { class, length, width, centromere, bands }
        })
        .collect()
}

/// Per-sample randomization of a render.
#[derive(Debug, Clone, Copy)]
pub struct RenderJitter {
    pub length_scale: f64,
    pub width_scale: f64,
    pub depth_scale: f64,
    /// Shear amplitude in pixels and phase of the sinusoidal bend.
    pub shear_amp: f64,
    pub shear_freq: f64,
    pub shear_phase: f64,
    pub noise_std: f64,
}

impl RenderJitter {
    pub fn none() -> Self {
        Self {
            length_scale: 1.0,
            width_scale: 1.0,
            depth_scale: 1.0,
            shear_amp: 0.0,
            shear_freq: 1.0,
            shear_phase: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn sample(rng: &mut ChaCha8Rng, length: f64) -> Self {
        Self {
            length_scale: rng.random_range(0.92..1.08),
            width_scale: rng.random_range(0.9..1.1),
            depth_scale: rng.random_range(0.9..1.1),
            shear_amp: rng.random_range(0.0..0.11 * length),
            shear_freq: rng.random_range(0.7..1.3),
            shear_phase: rng.random_range(0.0..std::f64::consts::TAU),
            noise_std: rng.random_range(3.0..7.0),
        }
    }
}

/// Renders one chromosome body. `polarity = 1` leaves the q-arm downward
/// (the baseline orientation); `polarity = 0` flips the figure vertically.
pub fn render(
    proto: &ClassPrototype,
    jitter: &RenderJitter,
    polarity: usize,
    rng: &mut ChaCha8Rng,
) -> ImageGray {
    let length = proto.length * jitter.length_scale;
    let width = proto.width * jitter.width_scale;
    let margin = 6.0;
    let w_img = (width + 2.0 * jitter.shear_amp + 2.0 * margin).ceil() as usize;
    let h_img = (length + 2.0 * margin).ceil() as usize;
    let mut img = ImageGray::filled(w_img, h_img, BACKGROUND);
    let y0 = (h_img as f64 - length) / 2.0;
    let cx = w_img as f64 / 2.0;
    for y in 0..h_img {
        let t = (y as f64 - y0) / length;
        if !(0.0..=1.0).contains(&t) {
            continue;
        }
        // taper the width toward both tips for rounded ends
        let taper = (1.0 - (2.0 * t - 1.0).powi(6)).max(0.0).sqrt();
        let half_w = width * taper / 2.0;
        if half_w < 0.5 {
            continue;
        }
        let bend = jitter.shear_amp
            * (std::f64::consts::PI * t * jitter.shear_freq + jitter.shear_phase).sin();
        let center = cx + bend;
        let base = {
            let mut v = BODY_BASE;
            for b in &proto.bands {
                let z = (t - b.center) / b.width;
                v -= b.depth * jitter.depth_scale * (-z * z).exp();
            }
            let zc = (t - proto.centromere) / 0.03;
            v += CENTROMERE_GAIN * (-zc * zc).exp();
            v.clamp(20.0, 235.0)
        };
        let x_lo = (center - half_w).floor().max(0.0) as usize;
        let x_hi = (center + half_w).ceil().min(w_img as f64 - 1.0) as usize;
        for x in x_lo..=x_hi {
            if (x as f64 - center).abs() <= half_w {
                let noise = if jitter.noise_std > 0.0 {
                    // Box-Muller keeps the dependency surface small
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    jitter.noise_std * (-2.0 * u1.ln()).sqrt() * u2.cos()
                } else {
                    0.0
                };
                // quantize so PNG round-trips are lossless
                img.set(x, y, (base + noise).clamp(0.0, 249.0).round() as f32);
            }
        }
    }
    if polarity == 0 {
        super::augment::vflip(&img)
    } else {
        img
    }
}

/// Clean reference render: no jitter, no noise.
pub fn render_clean(proto: &ClassPrototype, polarity: usize) -> ImageGray {
    let mut rng = seeded_rng(0, "clean");
    render(proto, &RenderJitter::none(), polarity, &mut rng)
}

/// Corpus generation settings.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub cases: usize,
    /// Fraction of cases given one extra copy of a random autosome.
    pub trisomy_fraction: f64,
    /// Probability that a case is male (one X, one Y).
    pub male_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: 10,
            trisomy_fraction: 0.0,
            male_fraction: 0.5,
        }
    }
}

/// Generates one case: two of each autosome, XX or XY, optionally a third
/// copy of `trisomy` (an autosome class).
pub fn generate_case(
    prototypes: &[ClassPrototype],
    case_id: &str,
    sex: Sex,
    trisomy: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<CaseRecord> {
    if prototypes.len() != TYPE_CLASSES {
        return Err(Error::Data(format!(
            "expected {TYPE_CLASSES} prototypes, got {}",
            prototypes.len()
        )));
    }
    if let Some(k) = trisomy {
        if k >= 22 {
            return Err(Error::Data(format!("trisomy class {k} must be an autosome")));
        }
    }
    let mut classes: Vec<usize> = Vec::with_capacity(47);
    for k in 0..22 {
        classes.push(k);
        classes.push(k);
    }
    match sex {
        Sex::Female => {
            classes.push(22);
            classes.push(22);
        }
        Sex::Male | Sex::Unknown => {
            classes.push(22);
            classes.push(23);
        }
    }
    if let Some(k) = trisomy {
        classes.push(k);
    }
    let samples = classes
        .into_iter()
        .map(|k| {
            let polarity = usize::from(rng.random_bool(0.5));
            let jitter = RenderJitter::sample(rng, prototypes[k].length);
            let img = render(&prototypes[k], &jitter, polarity, rng);
            Sample::in_memory(img, k, polarity, case_id)
        })
        .collect();
    Ok(CaseRecord {
        case_id: case_id.to_string(),
        sex,
        samples,
    })
}

/// Generates a whole corpus in memory.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<CaseRecord>> {
    let prototypes = class_prototypes();
    let mut out = Vec::with_capacity(cfg.cases);
    for i in 0..cfg.cases {
        let case_id = format!("case_{i:05}");
        // one stream per case keeps generation order-independent
        let mut rng = seeded_rng(cfg.seed, &format!("gen-{case_id}"));
        let sex = if rng.random_bool(cfg.male_fraction) {
            Sex::Male
        } else {
            Sex::Female
        };
        let trisomy = rng
            .random_bool(cfg.trisomy_fraction)
            .then(|| rng.random_range(0..22usize));
        out.push(generate_case(&prototypes, &case_id, sex, trisomy, &mut rng)?);
    }
    Ok(out)
}

/// Nearest-prototype classification of a rendered image by its vertical
/// intensity profile; the sanity oracle for corpus separability. Returns
/// `(class, polarity)`.
pub fn nearest_prototype(img: &ImageGray, prototypes: &[ClassPrototype]) -> (usize, usize) {
    let probe = profile_signature(img);
    let mut best = (0usize, 1usize);
    let mut best_d = f64::INFINITY;
    for proto in prototypes {
        for polarity in [0usize, 1] {
            let reference = profile_signature(&render_clean(proto, polarity));
            let d = signature_distance(&probe, &reference);
            if d < best_d {
                best_d = d;
                best = (proto.class, polarity);
            }
        }
    }
    best
}

/// Foreground length plus a 64-sample column-mean intensity profile.
fn profile_signature(img: &ImageGray) -> (f64, Vec<f64>) {
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for y in 0..img.height {
        let mut sum = 0.0;
        let mut count = 0usize;
        for x in 0..img.width {
            let v = img.get(x, y) as f64;
            if v < 250.0 {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            rows.push((y, sum / count as f64));
        }
    }
    if rows.is_empty() {
        return (0.0, vec![BACKGROUND as f64; 64]);
    }
    let length = (rows.last().expect("non-empty").0 - rows[0].0 + 1) as f64;
    let profile: Vec<f64> = (0..64)
        .map(|i| {
            let pos = i as f64 / 63.0 * (rows.len() - 1) as f64;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = rows[j].1;
            let b = rows[(j + 1).min(rows.len() - 1)].1;
            a + (b - a) * frac
        })
        .collect();
    (length, profile)
}

fn signature_distance(a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)) -> f64 {
    let dl = (a.0 - b.0) / 30.0;
    let dp: f64 = a
        .1
        .iter()
        .zip(&b.1)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / (64.0 * 40.0 * 40.0);
    dl * dl + dp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_are_ordered_and_deterministic() {
        let p = class_prototypes();
        assert_eq!(p.len(), 24);
        for c in 0..21 {
            assert!(p[c].length > p[c + 1].length, "autosome lengths must decrease");
        }
        for proto in &p {
            assert!(proto.centromere < 0.45);
        }
        // Y shortest
        assert!(p[23].length < p[21].length);
        let q = class_prototypes();
        assert_eq!(p[5].bands.len(), q[5].bands.len());
        assert_eq!(p[5].bands[0].center, q[5].bands[0].center);
    }

    #[test]
    fn male_case_has_one_x_one_y() {
        let protos = class_prototypes();
        let mut rng = seeded_rng(1, "case");
        let case = generate_case(&protos, "c", Sex::Male, None, &mut rng).unwrap();
        assert_eq!(case.samples.len(), 46);
        let count = |k: usize| case.samples.iter().filter(|s| s.type_label == k).count();
        assert_eq!(count(22), 1);
        assert_eq!(count(23), 1);
        for a in 0..22 {
            assert_eq!(count(a), 2);
        }
    }

    #[test]
    fn female_case_has_two_x_no_y() {
        let protos = class_prototypes();
        let mut rng = seeded_rng(2, "case");
        let case = generate_case(&protos, "c", Sex::Female, None, &mut rng).unwrap();
        assert_eq!(case.samples.len(), 46);
        let count = |k: usize| case.samples.iter().filter(|s| s.type_label == k).count();
        assert_eq!(count(22), 2);
        assert_eq!(count(23), 0);
    }

    #[test]
    fn trisomy_case_has_47_samples() {
        let protos = class_prototypes();
        let mut rng = seeded_rng(3, "case");
        let case = generate_case(&protos, "c", Sex::Female, Some(20), &mut rng).unwrap();
        assert_eq!(case.samples.len(), 47);
        assert_eq!(case.samples.iter().filter(|s| s.type_label == 20).count(), 3);
        assert!(generate_case(&protos, "c", Sex::Male, Some(22), &mut rng).is_err());
    }

    #[test]
    fn renders_fit_the_padding_canvas() {
        let protos = class_prototypes();
        let mut rng = seeded_rng(4, "render");
        for proto in &protos {
            for _ in 0..3 {
                let jitter = RenderJitter::sample(&mut rng, proto.length);
                let img = render(proto, &jitter, 1, &mut rng);
                assert!(img.width <= 320 && img.height <= 320, "class {}", proto.class);
                // some foreground exists
                assert!(img.data.iter().any(|&v| v < 250.0));
            }
        }
    }

    #[test]
    fn nearest_prototype_is_perfect_on_clean_renders() {
        let protos = class_prototypes();
        for proto in &protos {
            for polarity in [0, 1] {
                let img = render_clean(proto, polarity);
                let (class, pol) = nearest_prototype(&img, &protos);
                assert_eq!(class, proto.class, "class {} misread", proto.class);
                assert_eq!(pol, polarity, "polarity of class {}", proto.class);
            }
        }
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let cfg = GeneratorConfig { seed: 11, cases: 3, ..Default::default() };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.sex, cb.sex);
            assert_eq!(ca.samples.len(), cb.samples.len());
            for (sa, sb) in ca.samples.iter().zip(&cb.samples) {
                assert_eq!(sa.type_label, sb.type_label);
                assert_eq!(sa.polarity_label, sb.polarity_label);
                assert_eq!(sa.image().unwrap(), sb.image().unwrap());
            }
        }
    }
}
