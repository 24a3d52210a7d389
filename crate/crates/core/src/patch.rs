//! Patch enumeration and aggregation: sliding windows, random multi-size
//! sampling, per-subject summaries and plane fusion.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GltError, Result};
use crate::model::GltModel;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::predict_patches;

/// Square crop with top-left corner `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchSpec {
    pub fn new(row: usize, col: usize, size: usize) -> Self {
        PatchSpec { row, col, size }
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.size > 0 && self.row + self.size <= h && self.col + self.size <= w
    }

    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.fits(h, w) {
            Ok(())
        } else {
            Err(GltError::Contract(format!(
                "patch at ({}, {}) of size {} lies outside the {h}×{w} image",
                self.row, self.col, self.size
            )))
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.size && c >= self.col && c < self.col + self.size
    }
}

/// All windows of side `size` with step `size / 2`, row-major.
pub fn sliding_window(h: usize, w: usize, size: usize) -> Result<Vec<PatchSpec>> {
    if size == 0 || size % 2 != 0 {
        return Err(GltError::Contract(format!("patch size {size} must be positive and even")));
    }
    if size > h.min(w) {
        return Err(GltError::Contract(format!("patch size {size} exceeds the {h}×{w} image")));
    }
    let step = size / 2;
    let rows = (h - size) / step + 1;
    let cols = (w - size) / step + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(PatchSpec::new(r * step, c * step, size));
        }
    }
    Ok(out)
}

/// Admissible patch sizes for multi-size sampling: 32, 40, … up to the
/// upper bound, clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SizeGrid {
    /// 32..=96
    To96,
    /// 32..=104
    #[default]
    To104,
}

impl SizeGrid {
    pub const MIN: usize = 32;
    pub const STEP: usize = 8;

    pub fn max(self) -> usize {
        match self {
            SizeGrid::To96 => 96,
            SizeGrid::To104 => 104,
        }
    }

    pub fn sizes(self, h: usize, w: usize) -> Vec<usize> {
        (Self::MIN..=self.max())
            .step_by(Self::STEP)
            .filter(|&s| s <= h.min(w))
            .collect()
    }
}

impl std::str::FromStr for SizeGrid {
    type Err = GltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "96" => Ok(SizeGrid::To96),
            "104" => Ok(SizeGrid::To104),
            _ => Err(GltError::Contract(format!("size grid must end at 96 or 104, got {s:?}"))),
        }
    }
}

/// `n` patches drawn with replacement: size uniform over the grid, then
/// top-left corner uniform over valid positions.
pub fn sample_multisize_with<R: Rng>(h: usize, w: usize, n: usize, grid: SizeGrid, rng: &mut R) -> Result<Vec<PatchSpec>> {
    if n == 0 {
        return Err(GltError::Contract("cannot sample zero patches".into()));
    }
    let sizes = grid.sizes(h, w);
    if sizes.is_empty() {
        return Err(GltError::Contract(format!(
            "no patch size of at least {} fits the {h}×{w} image",
            SizeGrid::MIN
        )));
    }
    Ok((0..n)
        .map(|_| {
            let size = *sizes.choose(rng).expect("non-empty");
            let row = rng.random_range(0..=h - size);
            let col = rng.random_range(0..=w - size);
            PatchSpec::new(row, col, size)
        })
        .collect())
}

pub fn sample_multisize(h: usize, w: usize, n: usize, seed: u64) -> Result<Vec<PatchSpec>> {
    sample_multisize_with(h, w, n, SizeGrid::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-patch predictions for one subject and their mean and (population)
/// standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeEstimate {
    pub per_patch: Vec<(PatchSpec, f64)>,
    pub m: f64,
    pub sigma: f64,
}

impl AgeEstimate {
    pub fn from_predictions(per_patch: Vec<(PatchSpec, f64)>) -> Result<Self> {
        if per_patch.is_empty() {
            return Err(GltError::Contract("no patch predictions".into()));
        }
        let (m, sigma) = mean_std(per_patch.iter().map(|p| p.1));
        if !m.is_finite() {
            return Err(GltError::Numerical("non-finite patch prediction".into()));
        }
        Ok(AgeEstimate { per_patch, m, sigma })
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Average of the three per-plane estimates.
pub fn fuse_planes(axial: f64, coronal: f64, sagittal: f64) -> Result<f64> {
    if !(axial.is_finite() && coronal.is_finite() && sagittal.is_finite()) {
        return Err(GltError::Numerical(format!(
            "cannot fuse non-finite plane estimates ({axial}, {coronal}, {sagittal})"
        )));
    }
    Ok((axial + coronal + sagittal) / 3.0)
}

/// Sliding-window estimate for one image `[K×H×W]`.
pub fn infer_single_size<T: Scalar>(model: &GltModel, store: &ParamStore<T>, image: &Tensor<T>, size: usize) -> Result<AgeEstimate> {
    let [_, h, w] = image.shape()[..] else {
        return Err(GltError::dim("infer", format!("expected [K×H×W], got {:?}", image.shape())));
    };
    let specs = sliding_window(h, w, size)?;
    let ys = predict_patches(model, store, image, &specs, INFER_CHUNK)?;
    AgeEstimate::from_predictions(specs.into_iter().zip(ys).collect())
}

/// Estimate from `n` random multi-size patches of one image.
pub fn infer_multisize<T: Scalar>(
    model: &GltModel,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    n: usize,
    grid: SizeGrid,
    seed: u64,
) -> Result<AgeEstimate> {
    let [_, h, w] = image.shape()[..] else {
        return Err(GltError::dim("infer", format!("expected [K×H×W], got {:?}", image.shape())));
    };
    let specs = sample_multisize_with(h, w, n, grid, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let ys = predict_patches(model, store, image, &specs, INFER_CHUNK)?;
    AgeEstimate::from_predictions(specs.into_iter().zip(ys).collect())
}

/// Patches per local forward pass at inference.
const INFER_CHUNK: usize = 64;

pub const PATCH_CSV_HEADER: &str = "subject_id,plane,row,col,size,predicted_age";

pub fn write_patch_rows<W: Write>(mut w: W, subject: &str, plane: &str, est: &AgeEstimate) -> Result<()> {
    for (p, y) in &est.per_patch {
        writeln!(w, "{subject},{plane},{},{},{},{y}", p.row, p.col, p.size)?;
    }
    Ok(())
}

/// One row of a per-patch CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub subject: String,
    pub plane: String,
    pub patch: PatchSpec,
    pub predicted: f64,
}

pub fn read_patch_csv(text: &str) -> Result<Vec<PatchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == PATCH_CSV_HEADER => {}
        other => return Err(GltError::Format(format!("bad per-patch header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || GltError::Format(format!("per-patch row {}: {l:?}", i + 2));
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok(PatchRecord {
                subject: c[0].to_string(),
                plane: c[1].to_string(),
                patch: PatchSpec::new(num(c[2])?, num(c[3])?, num(c[4])?),
                predicted: c[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
