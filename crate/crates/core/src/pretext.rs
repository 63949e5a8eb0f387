//! Region-duplication pretext task.
//!
//! A patch is cut into a 2×2 grid and one quadrant is copied over another.
//! There are six such copies plus the untouched patch, giving a seven-way
//! classification problem whose labels cost nothing to produce.

use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::evaluation::DatasetManifest;
use crate::imagecore::{
    extract_quadrant, write_image, write_quadrant, ImageError, PatchImage, Quadrant,
};

#[derive(Debug, Error)]
pub enum PretextError {
    #[error("manifest has no slices")]
    EmptyManifest,
    #[error("sampling fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("pool of {available} slices cannot supply {needed}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("label {0} is not a duplication class (0..=6)")]
    BadLabel(i64),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which quadrant (if any) was copied where.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum DuplicationClass {
    Normal = 0,
    TopHorizontal = 1,
    BottomHorizontal = 2,
    LeftVertical = 3,
    RightVertical = 4,
    Diagonal = 5,
    OffDiagonal = 6,
}

/// Source → target quadrant for every class. `None` leaves the patch alone.
///
/// The top-horizontal and diagonal directions are fixed by the task
/// definition; the other four copy outward from the top row or left column.
pub const DUPLICATION_MAP: [(DuplicationClass, Option<(Quadrant, Quadrant)>); 7] = {
    use DuplicationClass::*;
    use Quadrant::*;
    [
        (Normal, None),
        (TopHorizontal, Some((TopLeft, TopRight))),
        (BottomHorizontal, Some((BottomLeft, BottomRight))),
        (LeftVertical, Some((TopLeft, BottomLeft))),
        (RightVertical, Some((TopRight, BottomRight))),
        (Diagonal, Some((TopLeft, BottomRight))),
        (OffDiagonal, Some((TopRight, BottomLeft))),
    ]
};

impl DuplicationClass {
    pub const COUNT: usize = 7;

    pub const ALL: [DuplicationClass; 7] = [
        DuplicationClass::Normal,
        DuplicationClass::TopHorizontal,
        DuplicationClass::BottomHorizontal,
        DuplicationClass::LeftVertical,
        DuplicationClass::RightVertical,
        DuplicationClass::Diagonal,
        DuplicationClass::OffDiagonal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// `(source, target)` quadrants of the copy, `None` for [`DuplicationClass::Normal`].
    pub fn copy(self) -> Option<(Quadrant, Quadrant)> {
        DUPLICATION_MAP[self.index()].1
    }

    pub fn name(self) -> &'static str {
        match self {
            DuplicationClass::Normal => "normal",
            DuplicationClass::TopHorizontal => "top-horizontal",
            DuplicationClass::BottomHorizontal => "bottom-horizontal",
            DuplicationClass::LeftVertical => "left-vertical",
            DuplicationClass::RightVertical => "right-vertical",
            DuplicationClass::Diagonal => "diagonal",
            DuplicationClass::OffDiagonal => "off-diagonal",
        }
    }
}

impl fmt::Display for DuplicationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn apply_duplication(patch: &PatchImage, class: DuplicationClass) -> PatchImage {
    match class.copy() {
        None => patch.clone(),
        Some((src, dst)) => {
            let block = extract_quadrant(patch, src);
            write_quadrant(patch, dst, &block).expect("quadrant sizes always agree")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretextExample {
    pub patch: PatchImage,
    pub label: DuplicationClass,
    pub source_patch_id: String,
}

impl PretextExample {
    /// `<source_patch_id>__d<label>`, also the stem of the example's image file.
    pub fn example_id(&self) -> String {
        format!("{}__d{}", self.source_patch_id, self.label.index())
    }
}

/// One example per duplication class, in class order; element 0 is the input.
pub fn generate_pretext_examples(patch: &PatchImage) -> Vec<PretextExample> {
    let source_patch_id = patch.id();
    DuplicationClass::ALL
        .iter()
        .map(|&label| PretextExample {
            patch: apply_duplication(patch, label),
            label,
            source_patch_id: source_patch_id.clone(),
        })
        .collect()
}

/// Expands every patch into its seven examples, preserving patch order.
pub fn build_pretext_dataset(patches: &[PatchImage]) -> Vec<PretextExample> {
    patches
        .par_iter()
        .map(generate_pretext_examples)
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretextSampling {
    fraction: f64,
    seed: u64,
}

impl PretextSampling {
    pub fn new(fraction: f64, seed: u64) -> Result<Self, PretextError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(PretextError::BadFraction(fraction));
        }
        Ok(Self { fraction, seed })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `⌈fraction × n⌉`, with a small guard so that e.g. 0.15 × 400 is 60 and not 61.
    pub fn sample_size(&self, n: usize) -> usize {
        let raw = self.fraction * n as f64;
        ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
    }
}

/// Draws slices for pretext training without looking at tissue labels.
/// The result is sorted by slice id.
pub fn sample_pretext_slices(
    manifest: &DatasetManifest,
    sampling: &PretextSampling,
) -> Result<Vec<String>, PretextError> {
    let ids: Vec<String> = manifest.slices().iter().map(|s| s.slice_id.clone()).collect();
    sample_pretext_pool(&ids, manifest.len(), sampling)
}

/// Like [`sample_pretext_slices`], but draws from `pool` only. The sample size
/// is still the fraction of `total`, so restricting the pool to a training
/// split does not shrink the pretext set.
pub fn sample_pretext_pool(
    pool: &[String],
    total: usize,
    sampling: &PretextSampling,
) -> Result<Vec<String>, PretextError> {
    if pool.is_empty() || total == 0 {
        return Err(PretextError::EmptyManifest);
    }
    // Canonical order first, so the draw does not depend on row order.
    let mut ids: Vec<&str> = pool.iter().map(String::as_str).collect();
    ids.sort_unstable();
    ids.dedup();
    let k = sampling.sample_size(total);
    if k > ids.len() {
        return Err(PretextError::PoolTooSmall {
            needed: k,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut picked: Vec<String> = sample(&mut rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Writes `manifest.csv` (`example_id,source_patch_id,label`) plus one image per
/// example named `<example_id>.<ext>` into `dir`.
pub fn write_pretext_dataset(
    dir: &Path,
    examples: &[PretextExample],
    ext: &str,
) -> Result<(), PretextError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    w.write_record(["example_id", "source_patch_id", "label"])?;
    for ex in examples {
        let id = ex.example_id();
        w.write_record([id.as_str(), ex.source_patch_id.as_str(), &ex.label.index().to_string()])?;
    }
    w.flush()?;
    examples.par_iter().try_for_each(|ex| {
        write_image(&dir.join(format!("{}.{ext}", ex.example_id())), ex.patch.image())
    })?;
    Ok(())
}

/// Reads a dataset written by [`write_pretext_dataset`].
pub fn read_pretext_dataset(dir: &Path) -> Result<Vec<PretextExample>, PretextError> {
    let mut r = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let rows: Vec<(String, String, i64)> = r
        .deserialize()
        .collect::<Result<Vec<(String, String, i64)>, _>>()?;
    rows.into_par_iter()
        .map(|(example_id, source_patch_id, label)| {
            let label = usize::try_from(label)
                .ok()
                .and_then(DuplicationClass::from_index)
                .ok_or(PretextError::BadLabel(label))?;
            let path = ["png", "ppm"]
                .iter()
                .map(|ext| dir.join(format!("{example_id}.{ext}")))
                .find(|p| p.exists())
                .ok_or_else(|| {
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("no image for example {example_id}"),
                    )
                })?;
            let image = crate::imagecore::read_image(&path)?;
            let origin = crate::imagecore::PatchOrigin::parse(&source_patch_id)?;
            Ok(PretextExample {
                patch: PatchImage::new(origin, image)?,
                label,
                source_patch_id,
            })
        })
        .collect()
}
