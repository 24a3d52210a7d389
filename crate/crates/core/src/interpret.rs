//! Patch-evidence heatmaps and the per-age uncertainty curve.
//!
//! A heatmap counts, per pixel, how many of the lowest-error patches cover
//! it, then divides by the maximum count. Among patches with equal error
//! the one earlier in row-major order (row, then column) wins.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{GltError, Result};
use crate::patch::PatchSpec;

/// Patches selected per size for a subject heatmap, and per subject for a
/// group heatmap.
pub const LOWEST: usize = 5;

/// Patch sizes that feed group heatmaps.
pub const GROUP_SIZES: [usize; 2] = [32, 40];

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, each in `[0, 1]`.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Divides by the maximum; an all-zero grid stays zero.
    pub fn normalized(height: usize, width: usize, counts: Vec<f64>) -> Self {
        let max = counts.iter().cloned().fold(0.0, f64::max);
        let values = if max > 0.0 { counts.into_iter().map(|c| c / max).collect() } else { counts };
        Heatmap { height, width, values }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// Sum over the rectangle with top-left `(r0, c0)` and size `rows×cols`.
    pub fn mass(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> f64 {
        (r0..r0 + rows).map(|r| (c0..c0 + cols).map(|c| self.get(r, c)).sum::<f64>()).sum()
    }

    /// 8-bit binary PGM, values scaled to 0–255.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    /// One CSV row per image row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Writes `<stem>.pgm` and `<stem>.csv`; dots already in the stem stay.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        let mut pgm = Vec::new();
        self.write_pgm(&mut pgm)?;
        fs::write(with(".pgm"), pgm)?;
        let mut csv = Vec::new();
        self.write_csv(&mut csv)?;
        fs::write(with(".csv"), csv)?;
        Ok(())
    }
}

/// The `k` patches with the lowest error.
pub fn select_lowest(per_patch: &[(PatchSpec, f64)], k: usize) -> Vec<PatchSpec> {
    let mut v: Vec<&(PatchSpec, f64)> = per_patch.iter().collect();
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then((a.0.row, a.0.col).cmp(&(b.0.row, b.0.col))));
    v.into_iter().take(k).map(|p| p.0).collect()
}

/// Per-pixel coverage counts of `patches`.
pub fn coverage(height: usize, width: usize, patches: &[PatchSpec]) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; height * width];
    for p in patches {
        p.check(height, width)?;
        for r in p.row..p.row + p.size {
            for c in &mut counts[r * width + p.col..r * width + p.col + p.size] {
                *c += 1.0;
            }
        }
    }
    Ok(counts)
}

fn check_errors(per_patch: &[(PatchSpec, f64)]) -> Result<()> {
    if per_patch.is_empty() {
        return Err(GltError::Contract("no patch errors".into()));
    }
    if per_patch.iter().any(|p| !p.1.is_finite()) {
        return Err(GltError::Numerical("non-finite patch error".into()));
    }
    Ok(())
}

/// Union of the [`LOWEST`] lowest-error patches of every size, given
/// `(patch, absolute error)` pairs.
pub fn subject_heatmap(height: usize, width: usize, per_patch: &[(PatchSpec, f64)]) -> Result<Heatmap> {
    check_errors(per_patch)?;
    let mut by_size: BTreeMap<usize, Vec<(PatchSpec, f64)>> = BTreeMap::new();
    for &p in per_patch {
        by_size.entry(p.0.size).or_default().push(p);
    }
    let selected: Vec<PatchSpec> = by_size.values().flat_map(|g| select_lowest(g, LOWEST)).collect();
    Ok(Heatmap::normalized(height, width, coverage(height, width, &selected)?))
}

/// Coverage of the [`LOWEST`] lowest-error patches among sizes
/// [`GROUP_SIZES`] for one subject.
pub fn subject_group_counts(height: usize, width: usize, per_patch: &[(PatchSpec, f64)]) -> Result<Vec<f64>> {
    check_errors(per_patch)?;
    let small: Vec<(PatchSpec, f64)> = per_patch.iter().copied().filter(|p| GROUP_SIZES.contains(&p.0.size)).collect();
    coverage(height, width, &select_lowest(&small, LOWEST))
}

/// Absolute patch errors of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectErrors {
    pub id: String,
    pub age: f64,
    pub per_patch: Vec<(PatchSpec, f64)>,
}

/// Average of [`subject_group_counts`] over subjects with age in
/// `[age_lo, age_hi)`, max-normalized. `None` (with a warning) when the
/// bin is empty.
pub fn group_heatmap(
    height: usize,
    width: usize,
    subjects: &[SubjectErrors],
    age_lo: f64,
    age_hi: f64,
) -> Result<Option<Heatmap>> {
    let members: Vec<&SubjectErrors> = subjects.iter().filter(|s| s.age >= age_lo && s.age < age_hi).collect();
    if members.is_empty() {
        log::warn!("no subjects aged [{age_lo}, {age_hi}); group heatmap skipped");
        return Ok(None);
    }
    let mut sum = vec![0.0; height * width];
    for s in &members {
        for (a, c) in sum.iter_mut().zip(subject_group_counts(height, width, &s.per_patch)?) {
            *a += c;
        }
    }
    let n = members.len() as f64;
    Ok(Some(Heatmap::normalized(height, width, sum.into_iter().map(|v| v / n).collect())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaRow {
    pub age: i64,
    pub mean_sigma: f64,
    /// Mean of `mean_sigma` over the populated years within ±2.
    pub smoothed: f64,
    pub count: usize,
}

/// Mean σ per integer year of age (floor), with a centred 5-year moving
/// average and per-year counts. Years without subjects are omitted.
pub fn sigma_distribution(estimates: &[(f64, f64)]) -> Result<Vec<SigmaRow>> {
    if estimates.is_empty() {
        return Err(GltError::Contract("no estimates for the σ distribution".into()));
    }
    let mut years: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for &(age, sigma) in estimates {
        if !age.is_finite() || !sigma.is_finite() {
            return Err(GltError::Numerical(format!("non-finite estimate ({age}, {sigma})")));
        }
        let e = years.entry(age.floor() as i64).or_default();
        e.0 += sigma;
        e.1 += 1;
    }
    let means: BTreeMap<i64, f64> = years.iter().map(|(&y, &(s, n))| (y, s / n as f64)).collect();
    Ok(years
        .iter()
        .map(|(&y, &(_, count))| {
            let window: Vec<f64> = means.range(y - 2..=y + 2).map(|(_, &m)| m).collect();
            SigmaRow {
                age: y,
                mean_sigma: means[&y],
                smoothed: window.iter().sum::<f64>() / window.len() as f64,
                count,
            }
        })
        .collect())
}

pub fn write_sigma_csv<W: Write>(mut w: W, rows: &[SigmaRow]) -> Result<()> {
    writeln!(w, "age,mean_sigma,smoothed,count")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.age, r.mean_sigma, r.smoothed, r.count)?;
    }
    Ok(())
}
