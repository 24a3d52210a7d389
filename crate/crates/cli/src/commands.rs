use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use glt::autodiff::GradCheckOptions;
use glt::checks::gradcheck_suite;
use glt::data::{load_cohort, save_volume, write_cohort, Plane, SubjectRecord, SyntheticSpec};
use glt::interpret::{group_heatmap, sigma_distribution, subject_heatmap, write_sigma_csv, SubjectErrors};
use glt::metrics::EvalReport;
use glt::model::GltModel;
use glt::nn::checkpoint::{load_checkpoint, save_checkpoint};
use glt::nn::ParamStore;
use glt::patch::{
    fuse_planes, infer_multisize, infer_single_size, read_patch_csv, write_patch_rows, AgeEstimate, PATCH_CSV_HEADER,
};
use glt::train::{train as fit, write_loss_csv};
use glt::{GltError, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Inference, Precision, RunConfig};
use crate::CliError;

type Res = Result<(), CliError>;

pub const SPLIT_HEADER: &str = "id,fold";
pub const ESTIMATE_HEADER: &str = "subject_id,plane,age,height,width,estimate,sigma";

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn manifest(cfg: &RunConfig) -> PathBuf {
    cfg.cohort.join("manifest.csv")
}

fn checkpoint_dir(cfg: &RunConfig, plane: Plane) -> PathBuf {
    cfg.out.join(plane.to_string()).join("checkpoint")
}

fn eval_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("eval")
}

pub fn synth(cfg: &RunConfig) -> Res {
    if cfg.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let spec = SyntheticSpec { subjects: cfg.n, ..cfg.synthetic() };
    spec.validate()?;
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (age, vol) = spec.subject(i)?;
        let id = SyntheticSpec::subject_id(i);
        if cfg.save_volumes {
            let dir = cfg.cohort.join("volumes");
            fs::create_dir_all(&dir)?;
            save_volume(&vol, &dir.join(format!("{id}.glt")))?;
        }
        records.push(SubjectRecord::from_volume(id, age, &vol, cfg.slices)?);
    }
    let path = write_cohort(&cfg.cohort, &records)?;
    cfg.echo(&cfg.cohort, "synth")?;
    log::info!("wrote {} subjects to {}", records.len(), path.display());
    Ok(())
}

/// Fold of every subject: a seeded shuffle dealt round-robin.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn load_records(cfg: &RunConfig) -> Result<Vec<SubjectRecord>, CliError> {
    let records = load_cohort(&manifest(cfg))?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("{} lists no subjects", manifest(cfg).display())));
    }
    Ok(records)
}

/// Held-out subjects are those in `cfg.fold`; with one fold every subject
/// is both trained and evaluated on.
fn held_out(cfg: &RunConfig, fold: usize) -> bool {
    cfg.folds == 1 || fold == cfg.fold
}

pub fn train(cfg: &RunConfig) -> Res {
    let records = load_records(cfg)?;
    let folds = assign_folds(records.len(), cfg.folds, cfg.seed);
    let mut split = create(&cfg.out.join("split.csv"))?;
    writeln!(split, "{SPLIT_HEADER}")?;
    for (r, f) in records.iter().zip(&folds) {
        writeln!(split, "{},{f}", r.id)?;
    }
    split.flush()?;
    cfg.echo(&cfg.out, "train")?;
    let train_set: Vec<&SubjectRecord> = records
        .iter()
        .zip(&folds)
        .filter(|(_, &f)| cfg.folds == 1 || f != cfg.fold)
        .map(|(r, _)| r)
        .collect();
    log::info!("training on {} of {} subjects ({} mode)", train_set.len(), records.len(), cfg.mode);
    match cfg.precision {
        Precision::F32 => train_planes::<f32>(cfg, &train_set),
        Precision::F64 => train_planes::<f64>(cfg, &train_set),
    }
}

fn train_planes<T: Scalar>(cfg: &RunConfig, subjects: &[&SubjectRecord]) -> Res {
    for &plane in &cfg.planes {
        let images: Vec<Tensor<T>> = subjects.iter().map(|r| r.plane(plane).cast()).collect();
        let data: Vec<(&Tensor<T>, f64)> = images.iter().zip(subjects).map(|(x, r)| (x, r.age)).collect();
        let mut store = ParamStore::<T>::new();
        let model = GltModel::new(&mut store, cfg.model(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let curve = fit(&model, &mut store, &data, &cfg.training())?;
        save_checkpoint(&store, &checkpoint_dir(cfg, plane))?;
        write_loss_csv(create(&cfg.out.join(plane.to_string()).join("loss.csv"))?, &curve)?;
        if let Some(last) = curve.last() {
            log::info!("{plane}: final step loss {}", last.loss);
        }
    }
    Ok(())
}

fn read_split(cfg: &RunConfig) -> Result<BTreeMap<String, usize>, CliError> {
    let path = cfg.out.join("split.csv");
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SPLIT_HEADER) {
        return Err(GltError::Format(format!("{}: bad header", path.display())).into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, f) = l.split_once(',').ok_or_else(|| GltError::Format(format!("split row {l:?}")))?;
            let f = f.trim().parse().map_err(|_| GltError::Format(format!("split row {l:?}")))?;
            Ok((id.to_string(), f))
        })
        .collect()
}

pub fn eval(cfg: &RunConfig) -> Res {
    let records = load_records(cfg)?;
    let split = read_split(cfg)?;
    let test: Vec<&SubjectRecord> = records
        .iter()
        .filter(|r| split.get(&r.id).is_some_and(|&f| held_out(cfg, f)))
        .collect();
    if test.is_empty() {
        return Err(CliError::Usage(format!("no subjects in held-out fold {}", cfg.fold)));
    }
    cfg.echo(&cfg.out, "eval")?;
    log::info!("evaluating {} held-out subjects", test.len());
    match cfg.precision {
        Precision::F32 => eval_planes::<f32>(cfg, &test),
        Precision::F64 => eval_planes::<f64>(cfg, &test),
    }
}

fn estimate<T: Scalar>(
    cfg: &RunConfig,
    model: &GltModel,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    stream: u64,
) -> glt::Result<AgeEstimate> {
    match cfg.inference {
        Inference::Single => infer_single_size(model, store, image, cfg.eval_patch_size),
        Inference::Multi => infer_multisize(model, store, image, cfg.eval_patches, cfg.size_grid, cfg.seed.wrapping_add(stream)),
    }
}

fn eval_planes<T: Scalar>(cfg: &RunConfig, test: &[&SubjectRecord]) -> Res {
    let dir = eval_dir(cfg);
    let mut patches = create(&dir.join("patches.csv"))?;
    writeln!(patches, "{PATCH_CSV_HEADER}")?;
    let mut estimates = create(&dir.join("estimates.csv"))?;
    writeln!(estimates, "{ESTIMATE_HEADER}")?;
    let ages: Vec<f64> = test.iter().map(|r| r.age).collect();
    let mut per_plane: Vec<(Plane, Vec<f64>)> = Vec::new();
    for &plane in &cfg.planes {
        let mut store = ParamStore::<T>::new();
        let model = GltModel::new(&mut store, cfg.model(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        load_checkpoint(&mut store, &checkpoint_dir(cfg, plane))?;
        let mut ms = Vec::with_capacity(test.len());
        for (i, r) in test.iter().enumerate() {
            let image: Tensor<T> = r.plane(plane).cast();
            let [_, h, w] = image.shape()[..] else { unreachable!("slice stacks have rank 3") };
            let est = estimate(cfg, &model, &store, &image, i as u64)?;
            write_patch_rows(&mut patches, &r.id, &plane.to_string(), &est)?;
            writeln!(estimates, "{},{plane},{},{h},{w},{},{}", r.id, r.age, est.m, est.sigma)?;
            ms.push(est.m);
        }
        let report = EvalReport::compute(&ms, &ages)?;
        report.write_csv(create(&dir.join(format!("report_{plane}.csv")))?)?;
        println!("== {plane} ==\n{}", report.to_table());
        per_plane.push((plane, ms));
    }
    patches.flush()?;
    estimates.flush()?;
    let find = |p: Plane| per_plane.iter().find(|(q, _)| *q == p).map(|(_, m)| m);
    if let (Some(a), Some(c), Some(s)) = (find(Plane::Axial), find(Plane::Coronal), find(Plane::Sagittal)) {
        let fused: Vec<f64> = (0..test.len())
            .map(|i| fuse_planes(a[i], c[i], s[i]))
            .collect::<glt::Result<_>>()?;
        let mut w = create(&dir.join("fused.csv"))?;
        writeln!(w, "subject_id,age,fused")?;
        for (r, f) in test.iter().zip(&fused) {
            writeln!(w, "{},{},{f}", r.id, r.age)?;
        }
        w.flush()?;
        let report = EvalReport::compute(&fused, &ages)?;
        report.write_csv(create(&dir.join("report_fused.csv"))?)?;
        println!("== fused ==\n{}", report.to_table());
    } else {
        log::warn!("fusion needs all three planes; fused report skipped");
    }
    Ok(())
}

struct EstimateRow {
    subject: String,
    plane: String,
    age: f64,
    height: usize,
    width: usize,
    sigma: f64,
}

fn read_estimates(path: &Path) -> Result<Vec<EstimateRow>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ESTIMATE_HEADER) {
        return Err(GltError::Format(format!("{}: bad header", path.display())).into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || CliError::Core(GltError::Format(format!("estimate row {l:?}")));
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 7 {
                return Err(bad());
            }
            Ok(EstimateRow {
                subject: c[0].into(),
                plane: c[1].into(),
                age: c[2].parse().map_err(|_| bad())?,
                height: c[3].parse().map_err(|_| bad())?,
                width: c[4].parse().map_err(|_| bad())?,
                sigma: c[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn heatmap(cfg: &RunConfig) -> Res {
    let dir = eval_dir(cfg);
    let (pp, ep) = (dir.join("patches.csv"), dir.join("estimates.csv"));
    if !pp.exists() || !ep.exists() {
        return Err(CliError::Usage(format!(
            "no per-patch predictions under {}; run `glt eval --inference multi` first",
            dir.display()
        )));
    }
    let patches = read_patch_csv(&fs::read_to_string(&pp)?)?;
    let estimates = read_estimates(&ep)?;
    let out = cfg.out.join("heatmaps");
    cfg.echo(&out, "heatmap")?;

    let mut planes: Vec<&str> = estimates.iter().map(|e| e.plane.as_str()).collect();
    planes.dedup();
    for plane in planes {
        let rows: Vec<&EstimateRow> = estimates.iter().filter(|e| e.plane == plane).collect();
        let (h, w) = (rows[0].height, rows[0].width);
        let mut subjects = Vec::with_capacity(rows.len());
        for e in &rows {
            let per_patch: Vec<_> = patches
                .iter()
                .filter(|p| p.plane == plane && p.subject == e.subject)
                .map(|p| (p.patch, (p.predicted - e.age).abs()))
                .collect();
            if per_patch.is_empty() {
                return Err(CliError::Usage(format!("no patch rows for {} on {plane}; rerun `glt eval`", e.subject)));
            }
            subjects.push(SubjectErrors { id: e.subject.clone(), age: e.age, per_patch });
        }
        let pdir = out.join(plane);
        fs::create_dir_all(&pdir)?;
        for s in subjects.iter().take(cfg.subject_maps) {
            subject_heatmap(h, w, &s.per_patch)?.save(&pdir.join(format!("subject_{}", s.id)))?;
        }
        let max_age = subjects.iter().map(|s| s.age).fold(f64::MIN, f64::max);
        let min_age = subjects.iter().map(|s| s.age).fold(f64::MAX, f64::min);
        let mut k = (min_age / cfg.bin_width).floor() as i64;
        let mut written = 0;
        while (k as f64) * cfg.bin_width <= max_age {
            let (lo, hi) = (k as f64 * cfg.bin_width, (k + 1) as f64 * cfg.bin_width);
            if let Some(map) = group_heatmap(h, w, &subjects, lo, hi)? {
                map.save(&pdir.join(format!("group_{lo}_{hi}")))?;
                written += 1;
            }
            k += 1;
        }
        let sigmas: Vec<(f64, f64)> = rows.iter().map(|e| (e.age, e.sigma)).collect();
        write_sigma_csv(create(&pdir.join("sigma.csv"))?, &sigma_distribution(&sigmas)?)?;
        log::info!(
            "{plane}: {} subject maps, {written} group maps in {}",
            subjects.len().min(cfg.subject_maps),
            pdir.display()
        );
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Res {
    let opts = GradCheckOptions {
        seed: cfg.seed,
        analytic_scale: cfg.analytic_scale,
        ..Default::default()
    };
    let suite = gradcheck_suite(&opts)?;
    cfg.echo(&cfg.out, "gradcheck")?;
    let mut w = create(&cfg.out.join("gradcheck.csv"))?;
    writeln!(w, "group,parameter,max_relative_error,tolerance,passed")?;
    let mut failed = Vec::new();
    for e in &suite {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<18} {:>10.3e}  (< {:.0e})  {status}", e.group, e.report.max_relative_error, e.tolerance);
        for (name, err) in &e.report.per_parameter_errors {
            println!("    {name:<40} {err:.3e}");
            writeln!(w, "{},{name},{err},{},{}", e.group, e.tolerance, *err < e.tolerance)?;
        }
        if !e.passed() {
            failed.push(e.group.clone());
        }
    }
    w.flush()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}
