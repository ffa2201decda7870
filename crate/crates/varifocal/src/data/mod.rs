//! Dataset plumbing: images, cases, manifests, folds, preprocessing,
//! augmentation and the synthetic corpus generator.

pub mod augment;
pub mod manifest;
pub mod preprocess;
pub mod synthetic;

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::params::seeded_rng;

/// Grayscale image with f32 intensities on the 0-255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageGray {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Loads an 8-bit grayscale PNG (other color types are converted).
    pub fn load_png(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self {
            width: w,
            height: h,
            data: img.into_raw().into_iter().map(|v| v as f32).collect(),
        })
    }

    /// Saves as 8-bit grayscale PNG, rounding and clamping intensities.
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer sized to dimensions");
        img.save(path)?;
        Ok(())
    }
}

/// Patient sex, fixing which sex chromosomes a case carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "male" | "m" | "M" => Ok(Sex::Male),
            "female" | "f" | "F" => Ok(Sex::Female),
            "unknown" => Ok(Sex::Unknown),
            other => Err(Error::Data(format!("unknown sex {other:?}"))),
        }
    }
}

/// Where a sample's pixels come from.
#[derive(Debug)]
enum ImageSource {
    Memory(ImageGray),
    File(PathBuf, OnceLock<ImageGray>),
}

/// One chromosome image with labels, grouped under a patient case.
#[derive(Debug)]
pub struct Sample {
    source: ImageSource,
    pub type_label: usize,
    pub polarity_label: usize,
    pub case_id: String,
}

impl Sample {
    pub fn in_memory(
        image: ImageGray,
        type_label: usize,
        polarity_label: usize,
        case_id: impl Into<String>,
    ) -> Self {
        Self {
            source: ImageSource::Memory(image),
            type_label,
            polarity_label,
            case_id: case_id.into(),
        }
    }

    pub fn from_file(
        path: PathBuf,
        type_label: usize,
        polarity_label: usize,
        case_id: impl Into<String>,
    ) -> Self {
        Self {
            source: ImageSource::File(path, OnceLock::new()),
            type_label,
            polarity_label,
            case_id: case_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.type_label >= crate::losses::TYPE_CLASSES {
            return Err(Error::Data(format!("type label {} out of range", self.type_label)));
        }
        if self.polarity_label >= crate::losses::POLARITY_CLASSES {
            return Err(Error::Data(format!(
                "polarity label {} out of range",
                self.polarity_label
            )));
        }
        Ok(())
    }

    /// The decoded image; file-backed samples decode once and cache.
    pub fn image(&self) -> Result<&ImageGray> {
        match &self.source {
            ImageSource::Memory(img) => Ok(img),
            ImageSource::File(path, cell) => {
                if let Some(img) = cell.get() {
                    return Ok(img);
                }
                let img = ImageGray::load_png(path)?;
                Ok(cell.get_or_init(|| img))
            }
        }
    }
}

/// All samples of one patient case.
#[derive(Debug)]
pub struct CaseRecord {
    pub case_id: String,
    pub sex: Sex,
    pub samples: Vec<Sample>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.validate()?;
            if s.case_id != self.case_id {
                return Err(Error::Data(format!(
                    "sample of case {} found under case {}",
                    s.case_id, self.case_id
                )));
            }
        }
        Ok(())
    }
}

/// A corpus of cases plus flat sample indexing.
#[derive(Debug)]
pub struct Dataset {
    pub cases: Vec<CaseRecord>,
    /// (case index, sample index) per flat id.
    index: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn from_cases(cases: Vec<CaseRecord>) -> Result<Self> {
        let mut index = Vec::new();
        for (c, case) in cases.iter().enumerate() {
            case.validate()?;
            for s in 0..case.samples.len() {
                index.push((c, s));
            }
        }
        Ok(Self { cases, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sample(&self, flat: usize) -> &Sample {
        let (c, s) = self.index[flat];
        &self.cases[c].samples[s]
    }

    pub fn case_of(&self, flat: usize) -> &CaseRecord {
        &self.cases[self.index[flat].0]
    }

    /// Flat ids belonging to the given folds.
    pub fn fold_indices(&self, split: &FoldSplit, folds: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let fold = split.fold_of(&self.case_of(i).case_id);
                fold.map(|f| folds.contains(&f)).unwrap_or(false)
            })
            .collect()
    }
}

pub const NUM_FOLDS: usize = 5;

/// Case-level five-fold split: every sample of a case shares its fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    assignment: Vec<(String, usize)>,
}

impl FoldSplit {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignment
            .iter()
            .find(|(id, _)| id == case_id)
            .map(|(_, f)| *f)
    }

    pub fn assignments(&self) -> &[(String, usize)] {
        &self.assignment
    }
}

/// Deterministic seeded shuffle of case ids into [`NUM_FOLDS`] folds of
/// near-equal size (within one case).
pub fn split_folds(case_ids: &[String], seed: u64) -> Result<FoldSplit> {
    if case_ids.len() < NUM_FOLDS {
        return Err(Error::Data(format!(
            "need at least {NUM_FOLDS} cases for a {NUM_FOLDS}-fold split, got {}",
            case_ids.len()
        )));
    }
    let mut ids: Vec<String> = case_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != case_ids.len() {
        return Err(Error::Data("duplicate case ids in fold split".into()));
    }
    let mut rng = seeded_rng(seed, "fold-split");
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % NUM_FOLDS))
        .collect();
    Ok(FoldSplit { assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:04}")).collect()
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let split = split_folds(&ids(10), 7).unwrap();
        let mut sizes = [0usize; NUM_FOLDS];
        for (_, f) in split.assignments() {
            sizes[*f] += 1;
        }
        assert_eq!(sizes, [2, 2, 2, 2, 2]);
        let again = split_folds(&ids(10), 7).unwrap();
        assert_eq!(split, again);
        let other = split_folds(&ids(10), 8).unwrap();
        assert_ne!(split, other);
    }

    #[test]
    fn every_case_lands_in_exactly_one_fold() {
        let split = split_folds(&ids(23), 3).unwrap();
        for id in ids(23) {
            assert!(split.fold_of(&id).is_some());
        }
        let mut sizes = [0usize; NUM_FOLDS];
        for (_, f) in split.assignments() {
            sizes[*f] += 1;
        }
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        assert!(max - min <= 1);
    }

    #[test]
    fn too_few_cases_rejected() {
        assert!(split_folds(&ids(4), 1).is_err());
    }

    #[test]
    fn labels_validated() {
        let img = ImageGray::filled(4, 4, 255.0);
        assert!(Sample::in_memory(img.clone(), 24, 0, "c").validate().is_err());
        assert!(Sample::in_memory(img.clone(), 0, 2, "c").validate().is_err());
        assert!(Sample::in_memory(img, 23, 1, "c").validate().is_ok());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ImageGray::filled(5, 3, 255.0);
        img.set(2, 1, 0.0);
        img.set(4, 2, 128.0);
        img.save_png(&path).unwrap();
        let back = ImageGray::load_png(&path).unwrap();
        assert_eq!(back, img);
    }
}
