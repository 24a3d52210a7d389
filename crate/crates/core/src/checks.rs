//! Finite-difference gradient checks over every layer type and a toy model,
//! shared by the command-line driver and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{GlaConfig, GlobalLocalAttention};
use crate::autodiff::{gradcheck, GradCheckOptions, GradCheckReport, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::model::{crop_patches, GltBlock, GltConfig, GltModel, ModelMode};
use crate::nn::{BatchNorm2d, Conv2d, Linear, Mode, ParamKind, ParamStore, Session};
use crate::patch::PatchSpec;
use crate::tensor::Tensor;

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Coordinates sampled per input for the whole-model checks.
const MODEL_SAMPLE: usize = 6;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub group: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Two stages of one block each, 2 input channels, `d_model` 8 in 2 heads.
pub fn toy_config(mode: ModelMode) -> GltConfig {
    GltConfig {
        backbone: BackboneConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            input_channels: 2,
        },
        attention: GlaConfig::new(8, 2).expect("8 splits into 2 heads"),
        blocks: 2,
        mode,
        detach_global: false,
    }
}

fn trainable_inputs(store: &ParamStore<f64>) -> Vec<(String, Tensor<f64>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect()
}

/// Checks `Σ f(params, inputs) ⊙ R` for a fixed random `R`, through every
/// store entry and every extra input.
fn check_module(
    store: &ParamStore<f64>,
    extra: Vec<(String, Tensor<f64>)>,
    mode: Mode,
    opts: &GradCheckOptions,
    f: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let n = store.len();
    let mut inputs = trainable_inputs(store);
    inputs.extend(extra);
    gradcheck(
        &inputs,
        |tape, vars| {
            let mut s = Session::with_bound(tape, store, &vars[..n], mode);
            let y = f(&mut s, &vars[n..])?;
            let shape = s.tape.shape(y).to_vec();
            let r = s.tape.constant(random_tensor(&shape, &mut ChaCha8Rng::seed_from_u64(99)));
            let p = s.tape.mul(y, r)?;
            Ok(s.tape.sum(p))
        },
        opts,
    )
}

/// Drops buffers from a report: running statistics never receive gradients
/// and are only listed for completeness.
fn without_buffers(store: &ParamStore<f64>, mut rep: GradCheckReport) -> GradCheckReport {
    let buffer = |name: &str| {
        store
            .id(name)
            .is_some_and(|id| store.get(id).kind == ParamKind::Buffer)
    };
    rep.per_parameter_errors.retain(|(n, _)| !buffer(n));
    rep.max_relative_error = rep
        .per_parameter_errors
        .iter()
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);
    rep
}

fn layer_entries(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut push = |group: &str, store: &ParamStore<f64>, rep: GradCheckReport| {
        out.push(SuiteEntry {
            group: group.into(),
            tolerance: LAYER_TOLERANCE,
            report: without_buffers(store, rep),
        })
    };

    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 1, true, rng);
    let x = random_tensor(&[2, 2, 5, 5], rng);
    let rep = check_module(&store, vec![("input".into(), x)], Mode::Train, opts, |s, v| conv.forward(s, v[0]))?;
    push("conv2d", &store, rep);

    for (group, mode) in [("batchnorm_train", Mode::Train), ("batchnorm_eval", Mode::Eval)] {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3);
        store.get_mut(bn.gamma).tensor = random_tensor(&[3], rng);
        let x = random_tensor(&[4, 3, 3, 3], rng);
        let rep = check_module(&store, vec![("input".into(), x)], mode, opts, |s, v| bn.forward(s, v[0]))?;
        push(group, &store, rep);
    }

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "linear", 5, 2, rng);
    let x = random_tensor(&[3, 5], rng);
    let rep = check_module(&store, vec![("input".into(), x)], Mode::Train, opts, |s, v| lin.forward(s, v[0]))?;
    push("linear", &store, rep);

    let store = ParamStore::new();
    let x = random_tensor(&[2, 3, 6, 4], rng);
    let rep = check_module(&store, vec![("input".into(), x)], Mode::Train, opts, |s, v| {
        let y = s.tape.maxpool2(v[0])?;
        let y = s.tape.relu(y);
        s.tape.avgpool_global(y)
    })?;
    push("relu_pooling", &store, rep);

    let mut store = ParamStore::new();
    let att = GlobalLocalAttention::new(&mut store, "attention", GlaConfig::new(4, 2)?, rng)?;
    let extra = vec![
        ("f_local".into(), random_tensor(&[2, 4, 2, 2], rng)),
        ("f_global".into(), random_tensor(&[2, 4, 3, 4], rng)),
    ];
    let rep = check_module(&store, extra, Mode::Train, opts, |s, v| Ok(att.forward(s, v[0], v[1])?.0))?;
    push("attention", &store, rep);

    let mut store = ParamStore::new();
    let block = GltBlock::new(&mut store, "glt_block", GlaConfig::new(8, 2)?, rng)?;
    let extra = vec![
        ("f_local".into(), random_tensor(&[3, 8, 2, 2], rng)),
        ("f_global".into(), random_tensor(&[3, 8, 3, 4], rng)),
    ];
    let rep = check_module(&store, extra, Mode::Train, opts, |s, v| Ok(block.forward(s, v[0], v[1])?.0))?;
    push("glt_block", &store, rep);
    Ok(out)
}

/// Whole toy model in training mode: two images, six 8×8 patches, the sum
/// of both heads' outputs as the readout.
pub fn model_gradcheck(mode: ModelMode, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = GltModel::new(&mut store, toy_config(mode), &mut rng)?;
    let images = random_tensor(&[2, 2, 12, 16], &mut rng);
    let patches: Vec<(usize, PatchSpec)> = [(0, 0, 0), (0, 4, 8), (0, 2, 3), (1, 1, 1), (1, 0, 8), (1, 4, 4)]
        .iter()
        .map(|&(i, r, c)| (i, PatchSpec::new(r, c, 8)))
        .collect();
    let crops = crop_patches(&images, &patches)?;
    let rows: Vec<usize> = patches.iter().map(|p| p.0).collect();
    let n = store.len();
    let mut inputs = trainable_inputs(&store);
    inputs.push(("images".into(), images));
    inputs.push(("patches".into(), crops));
    let rep = gradcheck(
        &inputs,
        |tape, v| {
            let mut s = Session::with_bound(tape, &store, &v[..n], Mode::Train);
            let g = m.global_pass(&mut s, v[n])?;
            let l = m.local_pass(&mut s, v[n + 1], g.map(|g| (g.features, &rows[..])))?;
            // A smooth readout: absolute values have kinks the finite
            // differences could straddle.
            let la = s.tape.sum(l.age);
            match g {
                Some(g) => {
                    let ga = s.tape.sum(g.age);
                    s.tape.add(ga, la)
                }
                None => Ok(la),
            }
        },
        opts,
    )?;
    Ok(without_buffers(&store, rep))
}

/// Every layer type at [`LAYER_TOLERANCE`], then a toy backbone and the toy
/// model in both modes at [`MODEL_TOLERANCE`].
pub fn gradcheck_suite(opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = layer_entries(opts, &mut rng)?;
    let sampled = GradCheckOptions {
        max_elements_per_input: opts.max_elements_per_input.or(Some(MODEL_SAMPLE)),
        ..opts.clone()
    };

    let mut store = ParamStore::new();
    let cfg = BackboneConfig {
        stage_channels: vec![4, 8],
        blocks_per_stage: 2,
        input_channels: 2,
    };
    let bb = Backbone::new(&mut store, "backbone", cfg, &mut rng);
    let x = random_tensor(&[2, 2, 8, 8], &mut rng);
    let rep = check_module(&store, vec![("input".into(), x)], Mode::Train, &sampled, |s, v| bb.forward(s, v[0]))?;
    out.push(SuiteEntry {
        group: "backbone".into(),
        tolerance: MODEL_TOLERANCE,
        report: without_buffers(&store, rep),
    });

    for (group, mode) in [("model_glt", ModelMode::Full), ("model_local_only", ModelMode::LocalOnly)] {
        out.push(SuiteEntry {
            group: group.into(),
            tolerance: MODEL_TOLERANCE,
            report: model_gradcheck(mode, opts.seed.wrapping_add(11), &sampled)?,
        });
    }
    Ok(out)
}
