//! Flat `key = value` run configuration. Every key has a default; a file
//! or `--set` may override any of them, and unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use glt::attention::{GlaConfig, ScoreScale};
use glt::backbone::BackboneConfig;
use glt::data::{Plane, SignalBox, SyntheticSpec};
use glt::model::{GltConfig, ModelMode};
use glt::nn::StepDecay;
use glt::patch::SizeGrid;
use glt::train::{PatchPolicy, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inference {
    /// Sliding window at `eval_patch_size`.
    Single,
    /// `eval_patches` random patches over the size grid.
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Fixed,
    Multi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub cohort: PathBuf,
    pub out: PathBuf,
    pub seed: u64,

    pub n: usize,
    pub dims: [usize; 3],
    pub age_min: f64,
    pub age_max: f64,
    pub noise: f64,
    pub ramp: f64,
    pub texture: f64,
    pub period_young: f64,
    pub period_old: f64,
    pub signal_lo: [usize; 3],
    pub signal_hi: [usize; 3],
    pub save_volumes: bool,
    pub slices: usize,

    pub planes: Vec<Plane>,
    pub mode: ModelMode,
    pub precision: Precision,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub score_scale: ScoreScale,
    pub detach_global: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_period: usize,
    pub lr_decay_factor: f64,
    pub patch_policy: PolicyKind,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub size_grid: SizeGrid,
    pub init_bias_to_mean: bool,
    pub folds: usize,
    pub fold: usize,

    pub inference: Inference,
    pub eval_patch_size: usize,
    pub eval_patches: usize,

    pub bin_width: f64,
    pub subject_maps: usize,

    pub analytic_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticSpec::default();
        let model = GltConfig::desk(5);
        RunConfig {
            cohort: "cohort".into(),
            out: "run".into(),
            seed: synth.seed,
            n: synth.subjects,
            dims: synth.dims,
            age_min: synth.age_range.0,
            age_max: synth.age_range.1,
            noise: synth.noise,
            ramp: synth.ramp,
            texture: synth.texture,
            period_young: synth.period_young,
            period_old: synth.period_old,
            signal_lo: synth.signal.lo,
            signal_hi: synth.signal.hi,
            save_volumes: false,
            slices: model.backbone.input_channels,
            planes: Plane::ALL.to_vec(),
            mode: ModelMode::Full,
            precision: Precision::F32,
            stage_channels: model.backbone.stage_channels,
            blocks_per_stage: model.backbone.blocks_per_stage,
            d_model: model.attention.d_model,
            heads: model.attention.heads,
            blocks: model.blocks,
            score_scale: model.attention.scale,
            detach_global: model.detach_global,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            lr_decay_period: 10,
            lr_decay_factor: 0.5,
            patch_policy: PolicyKind::Fixed,
            patch_size: 32,
            patches_per_image: 4,
            size_grid: SizeGrid::To104,
            init_bias_to_mean: true,
            folds: 5,
            fold: 0,
            inference: Inference::Single,
            eval_patch_size: 32,
            eval_patches: 200,
            bin_width: 5.0,
            subject_maps: 10,
            analytic_scale: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_triple(key: &str, v: &str, sep: char) -> Result<[usize; 3], String> {
    let xs: Vec<usize> = v.split(sep).map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?;
    xs.try_into().map_err(|_| format!("{key}: expected three values, got {v:?}"))
}

fn join<T: Display>(xs: &[T], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let v = v.trim();
        match key {
            "cohort" => self.cohort = v.into(),
            "out" => self.out = v.into(),
            "seed" => self.seed = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "dims" => self.dims = parse_triple(key, v, 'x')?,
            "age_min" => self.age_min = parse(key, v)?,
            "age_max" => self.age_max = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "ramp" => self.ramp = parse(key, v)?,
            "texture" => self.texture = parse(key, v)?,
            "period_young" => self.period_young = parse(key, v)?,
            "period_old" => self.period_old = parse(key, v)?,
            "signal_lo" => self.signal_lo = parse_triple(key, v, ',')?,
            "signal_hi" => self.signal_hi = parse_triple(key, v, ',')?,
            "save_volumes" => self.save_volumes = parse(key, v)?,
            "slices" => self.slices = parse(key, v)?,
            "planes" => self.planes = v.split(',').map(|p| p.trim().parse().map_err(|e| format!("{key}: {e}"))).collect::<Result<_, _>>()?,
            "mode" => self.mode = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("{key}: expected f32 or f64, got {v:?}")),
                }
            }
            "stage_channels" => self.stage_channels = parse_list(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "score_scale" => {
                self.score_scale = match v {
                    "per_head" => ScoreScale::PerHead,
                    "model" => ScoreScale::Model,
                    _ => return Err(format!("{key}: expected per_head or model, got {v:?}")),
                }
            }
            "detach_global" => self.detach_global = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay_period" => self.lr_decay_period = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "patch_policy" => {
                self.patch_policy = match v {
                    "fixed" => PolicyKind::Fixed,
                    "multi" => PolicyKind::Multi,
                    _ => return Err(format!("{key}: expected fixed or multi, got {v:?}")),
                }
            }
            "patch_size" => self.patch_size = parse(key, v)?,
            "patches_per_image" => self.patches_per_image = parse(key, v)?,
            "size_grid" => self.size_grid = v.parse().map_err(|e| format!("{key}: {e}"))?,
            "init_bias_to_mean" => self.init_bias_to_mean = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "fold" => self.fold = parse(key, v)?,
            "inference" => {
                self.inference = match v {
                    "single" => Inference::Single,
                    "multi" => Inference::Multi,
                    _ => return Err(format!("{key}: expected single or multi, got {v:?}")),
                }
            }
            "eval_patch_size" => self.eval_patch_size = parse(key, v)?,
            "eval_patches" => self.eval_patches = parse(key, v)?,
            "bin_width" => self.bin_width = parse(key, v)?,
            "subject_maps" => self.subject_maps = parse(key, v)?,
            "analytic_scale" => self.analytic_scale = parse(key, v)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let sz = |g: SizeGrid| g.max().to_string();
        vec![
            ("cohort", self.cohort.display().to_string()),
            ("out", self.out.display().to_string()),
            ("seed", self.seed.to_string()),
            ("n", self.n.to_string()),
            ("dims", join(&self.dims, "x")),
            ("age_min", self.age_min.to_string()),
            ("age_max", self.age_max.to_string()),
            ("noise", self.noise.to_string()),
            ("ramp", self.ramp.to_string()),
            ("texture", self.texture.to_string()),
            ("period_young", self.period_young.to_string()),
            ("period_old", self.period_old.to_string()),
            ("signal_lo", join(&self.signal_lo, ",")),
            ("signal_hi", join(&self.signal_hi, ",")),
            ("save_volumes", self.save_volumes.to_string()),
            ("slices", self.slices.to_string()),
            ("planes", join(&self.planes, ",")),
            ("mode", self.mode.to_string()),
            ("precision", match self.precision { Precision::F32 => "f32", Precision::F64 => "f64" }.into()),
            ("stage_channels", join(&self.stage_channels, ",")),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("score_scale", match self.score_scale { ScoreScale::PerHead => "per_head", ScoreScale::Model => "model" }.into()),
            ("detach_global", self.detach_global.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_period", self.lr_decay_period.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("patch_policy", match self.patch_policy { PolicyKind::Fixed => "fixed", PolicyKind::Multi => "multi" }.into()),
            ("patch_size", self.patch_size.to_string()),
            ("patches_per_image", self.patches_per_image.to_string()),
            ("size_grid", sz(self.size_grid)),
            ("init_bias_to_mean", self.init_bias_to_mean.to_string()),
            ("folds", self.folds.to_string()),
            ("fold", self.fold.to_string()),
            ("inference", match self.inference { Inference::Single => "single", Inference::Multi => "multi" }.into()),
            ("eval_patch_size", self.eval_patch_size.to_string()),
            ("eval_patches", self.eval_patches.to_string()),
            ("bin_width", self.bin_width.to_string()),
            ("subject_maps", self.subject_maps.to_string()),
            ("analytic_scale", self.analytic_scale.to_string()),
        ]
    }

    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected key = value, got {raw:?}", i + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            subjects: self.n,
            dims: self.dims,
            age_range: (self.age_min, self.age_max),
            signal: SignalBox { lo: self.signal_lo, hi: self.signal_hi },
            noise: self.noise,
            ramp: self.ramp,
            texture: self.texture,
            period_young: self.period_young,
            period_old: self.period_old,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> GltConfig {
        GltConfig {
            backbone: BackboneConfig {
                stage_channels: self.stage_channels.clone(),
                blocks_per_stage: self.blocks_per_stage,
                input_channels: self.slices,
            },
            attention: GlaConfig { d_model: self.d_model, heads: self.heads, scale: self.score_scale },
            blocks: self.blocks,
            mode: self.mode,
            detach_global: self.detach_global,
        }
    }

    pub fn training(&self) -> TrainConfig {
        let policy = match self.patch_policy {
            PolicyKind::Fixed => PatchPolicy::Fixed { size: self.patch_size, per_image: self.patches_per_image },
            PolicyKind::Multi => PatchPolicy::MultiSize { per_image: self.patches_per_image, grid: self.size_grid },
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            decay: StepDecay { period: self.lr_decay_period, factor: self.lr_decay_factor },
            policy,
            seed: self.seed,
            init_bias_to_mean: self.init_bias_to_mean,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model().validate().map_err(|e| e.to_string())?;
        self.training().validate().map_err(|e| e.to_string())?;
        if self.folds == 0 || self.fold >= self.folds {
            return Err(format!("fold {} outside 0..{}", self.fold, self.folds));
        }
        if self.planes.is_empty() {
            return Err("planes: at least one plane".into());
        }
        if !(self.bin_width > 0.0) {
            return Err("bin_width must be positive".into());
        }
        Ok(())
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path, command: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = self.render();
        log::info!("resolved config for {command}:\n{text}");
        std::fs::write(dir.join(format!("{command}.config")), text)
    }
}
