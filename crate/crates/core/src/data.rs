//! Volumes, slice extraction, cohort files, and the synthetic cohort
//! generator.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GltError, Result};
use crate::tensor::Tensor;

/// Dense 3D volume, row-major over `(x, y, z)` (z fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) || dims.iter().product::<usize>() != voxels.len() {
            return Err(GltError::dim("volume", format!("dims {dims:?} for {} voxels", voxels.len())));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(GltError::Numerical("non-finite voxel".into()));
        }
        Ok(Volume { dims, voxels })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        let [_, ny, nz] = self.dims;
        self.voxels[(x * ny + y) * nz + z]
    }
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    Tensor::new(&vol.dims, vol.voxels.clone())?.save(path)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let t = Tensor::<f32>::load(path)?;
    let [x, y, z] = t.shape()[..] else {
        return Err(GltError::Format(format!(
            "{}: volume must have rank 3, found rank {}",
            path.display(),
            t.rank()
        )));
    };
    Volume::new([x, y, z], t.into_data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    /// Fixed z; slices are `X×Y`.
    Axial,
    /// Fixed y; slices are `X×Z`.
    Coronal,
    /// Fixed x; slices are `Y×Z`.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Axis held fixed, and the `(row, col)` axes of a slice.
    fn axes(self) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (2, 0, 1),
            Plane::Coronal => (1, 0, 2),
            Plane::Sagittal => (0, 1, 2),
        }
    }

    pub fn slice_dims(self, dims: [usize; 3]) -> (usize, usize) {
        let (_, r, c) = self.axes();
        (dims[r], dims[c])
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        })
    }
}

impl FromStr for Plane {
    type Err = GltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            _ => Err(GltError::Contract(format!("unknown plane {s:?}"))),
        }
    }
}

/// Indices of `k` consecutive slices around the centre `⌊dim/2⌋`.
pub fn slice_indices(dim: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > dim {
        return Err(GltError::Contract(format!("cannot take {k} slices from a dimension of {dim}")));
    }
    let c = dim / 2;
    let lo = c.checked_sub(k / 2).ok_or_else(|| GltError::Contract(format!("{k} slices underflow {dim}")))?;
    if lo + k > dim {
        return Err(GltError::Contract(format!("{k} slices around {c} overflow {dim}")));
    }
    Ok((lo..lo + k).collect())
}

/// `k` central slices of one plane as `[K×H×W]`.
pub fn extract_slices(vol: &Volume, plane: Plane, k: usize) -> Result<Tensor<f32>> {
    let (fixed, ra, ca) = plane.axes();
    let idx = slice_indices(vol.dims[fixed], k)?;
    let (h, w) = (vol.dims[ra], vol.dims[ca]);
    let mut out = Vec::with_capacity(k * h * w);
    let mut pos = [0usize; 3];
    for &i in &idx {
        pos[fixed] = i;
        for r in 0..h {
            pos[ra] = r;
            for c in 0..w {
                pos[ca] = c;
                out.push(vol.at(pos[0], pos[1], pos[2]));
            }
        }
    }
    Tensor::new(&[k, h, w], out)
}

/// One subject: target age and a slice stack per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub age: f64,
    pub axial: Tensor<f32>,
    pub coronal: Tensor<f32>,
    pub sagittal: Tensor<f32>,
}

impl SubjectRecord {
    pub fn from_volume(id: String, age: f64, vol: &Volume, k: usize) -> Result<Self> {
        Ok(SubjectRecord {
            id,
            age,
            axial: extract_slices(vol, Plane::Axial, k)?,
            coronal: extract_slices(vol, Plane::Coronal, k)?,
            sagittal: extract_slices(vol, Plane::Sagittal, k)?,
        })
    }

    pub fn plane(&self, p: Plane) -> &Tensor<f32> {
        match p {
            Plane::Axial => &self.axial,
            Plane::Coronal => &self.coronal,
            Plane::Sagittal => &self.sagittal,
        }
    }
}

/// Axis-aligned box of voxels `[lo, hi)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignalBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl SignalBox {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    /// The box's footprint on a slice of `plane` as
    /// `(row0, col0, rows, cols)`.
    pub fn rectangle(&self, plane: Plane) -> (usize, usize, usize, usize) {
        let (_, r, c) = plane.axes();
        (self.lo[r], self.lo[c], self.hi[r] - self.lo[r], self.hi[c] - self.lo[c])
    }
}

/// Parameters of the synthetic cohort.
///
/// Each voxel is a smooth random background of amplitude `noise`, plus a
/// uniform brightness `ramp · u`, plus, inside `signal`, a sinusoidal
/// texture of amplitude `texture` whose period shrinks from `period_young`
/// to `period_old` voxels as `u` goes from 0 to 1. Here `u` is the age
/// rescaled to `[0, 1]` over `age_range`. Values are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub dims: [usize; 3],
    pub age_range: (f64, f64),
    pub signal: SignalBox,
    pub noise: f64,
    pub ramp: f64,
    pub texture: f64,
    pub period_young: f64,
    pub period_old: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 200,
            dims: [64, 64, 64],
            age_range: (0.0, 97.0),
            signal: SignalBox { lo: [12, 28, 20], hi: [36, 52, 44] },
            noise: 0.15,
            ramp: 0.1,
            texture: 0.2,
            period_young: 10.0,
            period_old: 3.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.age_range;
        let ok_box = (0..3).all(|a| self.signal.lo[a] < self.signal.hi[a] && self.signal.hi[a] <= self.dims[a]);
        if self.dims.contains(&0) || !(lo < hi) || !lo.is_finite() || !hi.is_finite() || lo < 0.0 {
            return Err(GltError::Contract(format!(
                "invalid cohort dims {:?} or age range {:?}",
                self.dims, self.age_range
            )));
        }
        if !ok_box {
            return Err(GltError::Contract(format!("signal box {:?} outside {:?}", self.signal, self.dims)));
        }
        if self.noise < 0.0 || self.period_old < 2.0 || self.period_young < 2.0 {
            return Err(GltError::Contract("noise must be ≥ 0 and texture periods ≥ 2 voxels".into()));
        }
        Ok(())
    }

    fn subject_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }

    /// Age of subject `i`, uniform over the age range.
    pub fn age(&self, i: usize) -> f64 {
        let (lo, hi) = self.age_range;
        self.subject_rng(i).random_range(lo..hi)
    }

    pub fn subject_id(i: usize) -> String {
        format!("s{i:04}")
    }

    /// Volume of subject `i` (age from [`Self::age`]).
    pub fn subject(&self, i: usize) -> Result<(f64, Volume)> {
        let age = self.age(i);
        let mut rng = self.subject_rng(i);
        let _: f64 = rng.random();
        Ok((age, self.volume(age, &mut rng)?))
    }

    /// Volume for a given age, drawing the background from `rng`.
    pub fn volume<R: Rng>(&self, age: f64, rng: &mut R) -> Result<Volume> {
        self.validate()?;
        let (lo, hi) = self.age_range;
        let u = ((age - lo) / (hi - lo)).clamp(0.0, 1.0);
        let period = self.period_young + (self.period_old - self.period_young) * u;
        let omega = 2.0 * PI / period;
        let [nx, ny, nz] = self.dims;

        // Separable low-frequency background: a few random cosine waves
        // per axis, each 1..=3 cycles across the volume.
        let mut waves: [Vec<f64>; 3] = Default::default();
        for (a, n) in [nx, ny, nz].into_iter().enumerate() {
            let mut w = vec![0.0; n];
            for _ in 0..3 {
                let cycles = rng.random_range(1.0..3.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp: f64 = StandardNormal.sample(rng);
                for (i, v) in w.iter_mut().enumerate() {
                    *v += amp * (2.0 * PI * cycles * i as f64 / n as f64 + phase).cos() / 3.0;
                }
            }
            waves[a] = w;
        }
        let phase = [
            rng.random_range(0.0..2.0 * PI) * self.noise.min(1.0),
            rng.random_range(0.0..2.0 * PI) * self.noise.min(1.0),
        ];
        let base = 0.35 + self.ramp * u;
        let mut voxels = Vec::with_capacity(nx * ny * nz);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let mut v = base + self.noise * (waves[0][x] + waves[1][y] + waves[2][z]);
                    if self.signal.contains([x, y, z]) {
                        let t = (omega * x as f64 + phase[0]).sin() * (omega * y as f64 + phase[1]).sin();
                        v += self.texture * t;
                    }
                    voxels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Volume::new(self.dims, voxels)
    }

    /// All subjects as slice stacks of `k` slices per plane.
    pub fn generate(&self, k: usize) -> Result<Vec<SubjectRecord>> {
        self.validate()?;
        (0..self.subjects)
            .map(|i| {
                let (age, vol) = self.subject(i)?;
                SubjectRecord::from_volume(Self::subject_id(i), age, &vol, k)
            })
            .collect()
    }
}

pub const MANIFEST_HEADER: &str = "id,age,axial_path,coronal_path,sagittal_path";

/// Writes each record's slice stacks under `dir/slices/` and a cohort
/// manifest `dir/manifest.csv` with paths relative to `dir`.
pub fn write_cohort(dir: &Path, records: &[SubjectRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("slices"))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for r in records {
        let mut paths = Vec::new();
        for p in Plane::ALL {
            let rel = format!("slices/{}_{p}.glt", r.id);
            r.plane(p).save(&dir.join(&rel))?;
            paths.push(rel);
        }
        manifest.push_str(&format!("{},{},{}\n", r.id, r.age, paths.join(",")));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a manifest written by [`write_cohort`]; relative paths resolve
/// against the manifest's directory.
pub fn load_cohort(manifest: &Path) -> Result<Vec<SubjectRecord>> {
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(GltError::Format(format!("{}: bad manifest header", manifest.display())));
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let bad = || GltError::Format(format!("{} row {}: {line:?}", manifest.display(), i + 2));
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 5 {
            return Err(bad());
        }
        let age: f64 = c[1].parse().map_err(|_| bad())?;
        let load = |p: &str| -> Result<Tensor<f32>> {
            let t = Tensor::<f32>::load(&base.join(p))?;
            if t.rank() != 3 {
                return Err(GltError::Format(format!("{p}: slice stack must have rank 3, found {}", t.rank())));
            }
            Ok(t)
        };
        let rec = SubjectRecord {
            id: c[0].to_string(),
            age,
            axial: load(c[2])?,
            coronal: load(c[3])?,
            sagittal: load(c[4])?,
        };
        let k = rec.axial.shape()[0];
        if rec.coronal.shape()[0] != k || rec.sagittal.shape()[0] != k {
            return Err(GltError::Format(format!("{}: slice counts differ across planes", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ramp_volume(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::new(dims, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn slice_index_examples() {
        assert_eq!(slice_indices(120, 5).unwrap(), vec![58, 59, 60, 61, 62]);
        assert_eq!(slice_indices(120, 1).unwrap(), vec![60]);
        assert_eq!(slice_indices(7, 4).unwrap(), vec![1, 2, 3, 4]);
        assert!(matches!(slice_indices(4, 5), Err(GltError::Contract(_))));
    }

    #[test]
    fn extracted_values_are_direct_reads() {
        let v = ramp_volume([6, 7, 8]);
        let ax = extract_slices(&v, Plane::Axial, 3).unwrap();
        assert_eq!(ax.shape(), &[3, 6, 7]);
        assert_eq!(ax.data()[(1 * 6 + 2) * 7 + 5], v.at(2, 5, 4));
        let co = extract_slices(&v, Plane::Coronal, 1).unwrap();
        assert_eq!(co.shape(), &[1, 6, 8]);
        assert_eq!(co.data()[3 * 8 + 7], v.at(3, 3, 7));
        let sa = extract_slices(&v, Plane::Sagittal, 2).unwrap();
        assert_eq!(sa.shape(), &[2, 7, 8]);
        assert_eq!(sa.data()[(7 + 6) * 8 + 1], v.at(3, 6, 1));
        assert!(extract_slices(&v, Plane::Sagittal, 7).is_err());
    }

    #[test]
    fn volume_round_trip_and_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { dims: [16, 12, 20], signal: SignalBox { lo: [2, 2, 2], hi: [8, 8, 8] }, ..Default::default() };
        let (_, v) = spec.subject(3).unwrap();
        let p = dir.path().join("v.glt");
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_volume(&p), Err(GltError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_volume(&p), Err(GltError::Format(_))));
        Tensor::<f32>::zeros(&[4, 4]).save(&p).unwrap();
        let err = load_volume(&p).unwrap_err().to_string();
        assert!(err.contains("rank 2"), "{err}");
    }

    #[test]
    fn noiseless_equal_ages_give_identical_volumes() {
        let spec = SyntheticSpec { dims: [24, 24, 24], signal: SignalBox { lo: [4, 4, 4], hi: [16, 16, 16] }, noise: 0.0, ..Default::default() };
        let a = spec.volume(40.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = spec.volume(40.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, spec.volume(41.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
    }

    #[test]
    fn cohort_is_reproducible_and_round_trips() {
        let spec = SyntheticSpec { subjects: 4, dims: [20, 20, 20], signal: SignalBox { lo: [2, 2, 2], hi: [10, 10, 10] }, ..Default::default() };
        let a = spec.generate(3).unwrap();
        assert_eq!(a, spec.generate(3).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let m = write_cohort(dir.path(), &a).unwrap();
        let b = load_cohort(&m).unwrap();
        assert_eq!(a, b);
        assert!(load_cohort(&dir.path().join("missing.csv")).is_err());
    }

    /// Mean absolute horizontal difference inside the signal rectangle of
    /// the centre axial slice: a roughness measure that grows with the
    /// texture frequency.
    fn roughness(spec: &SyntheticSpec, vol: &Volume) -> f64 {
        let z = spec.dims[2] / 2;
        let (r0, c0, h, w) = spec.signal.rectangle(Plane::Axial);
        let mut s = 0.0;
        for x in r0..r0 + h {
            for y in c0..c0 + w - 1 {
                s += (vol.at(x, y + 1, z) - vol.at(x, y, z)).abs() as f64;
            }
        }
        s / (h * (w - 1)) as f64
    }

    #[test]
    fn signal_separates_extreme_ages() {
        let spec = SyntheticSpec::default();
        let (lo, hi) = spec.age_range;
        let sample = |age: f64, seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| roughness(&spec, &spec.volume(age, &mut rng).unwrap())).collect()
        };
        let (a, b) = (sample(lo, 1), sample(hi, 2));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let pooled = ((var(&a) + var(&b)) / 2.0).sqrt();
        assert!((mean(&b) - mean(&a)).abs() > 3.0 * pooled, "{a:?} {b:?}");
    }

    #[test]
    fn ages_are_uniform() {
        // χ² with 9 degrees of freedom; 21.67 is the 0.99 quantile.
        let spec = SyntheticSpec { subjects: 1000, ..Default::default() };
        let mut bins = [0usize; 10];
        for i in 0..spec.subjects {
            let u = (spec.age(i) - spec.age_range.0) / (spec.age_range.1 - spec.age_range.0);
            bins[((u * 10.0) as usize).min(9)] += 1;
        }
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - 100.0).powi(2) / 100.0).sum();
        assert!(chi2 < 21.67, "{bins:?}");
    }

    proptest! {
        #[test]
        fn slice_indices_follow_centre_rule(dim in 1usize..200, k in 1usize..200) {
            prop_assume!(k <= dim);
            let idx = slice_indices(dim, k).unwrap();
            let c = dim / 2;
            prop_assert_eq!(idx.len(), k);
            prop_assert_eq!(idx[0], c - k / 2);
            prop_assert_eq!(*idx.last().unwrap(), c + k.div_ceil(2) - 1);
        }
    }
}
