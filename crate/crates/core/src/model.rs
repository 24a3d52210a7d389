//! The two-pathway model: global and local backbones, a stack of
//! global-local transformer blocks refining the local features, and an
//! age head on each pathway.

use rand::Rng;

use crate::attention::{GlaConfig, GlobalLocalAttention};
use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{GltError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, Mode, ParamStore, Session};
use crate::patch::PatchSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention, channel concat with the local feature, two 1×1 conv blocks,
/// residual add onto the local feature.
#[derive(Clone, Debug)]
pub struct GltBlock {
    pub attention: GlobalLocalAttention,
    ff1: Conv2d,
    bn1: BatchNorm2d,
    ff2: Conv2d,
    bn2: BatchNorm2d,
}

impl GltBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: GlaConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let attention = GlobalLocalAttention::build(store, &format!("{name}.attention"), cfg, false, rng)?;
        Ok(GltBlock {
            attention,
            ff1: Conv2d::new(store, &format!("{name}.ff1"), 2 * d, d, 1, 0, false, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), d),
            ff2: Conv2d::new(store, &format!("{name}.ff2"), d, d, 1, 0, false, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), d),
        })
    }

    /// Returns the refined local feature (same shape as `f_local`) and the
    /// attention weights.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, f_local: Var, f_global: Var) -> Result<(Var, Var)> {
        let (g, weights) = self.attention.forward(s, f_local, f_global)?;
        let x = s.tape.concat(&[g, f_local], 1)?;
        let x = self.ff1.forward(s, x)?;
        let x = self.bn1.forward(s, x)?;
        let x = s.tape.relu(x);
        let x = self.ff2.forward(s, x)?;
        let x = self.bn2.forward(s, x)?;
        let x = s.tape.relu(x);
        Ok((s.tape.add(f_local, x)?, weights))
    }

    /// Zeroes the last feed-forward conv and its norm's shift and running
    /// mean, making the block the identity on the local feature.
    pub fn zero_residual_branch<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.ff2.weight, self.bn2.beta, self.bn2.running_mean] {
            store.get_mut(id).tensor.data_mut().fill(T::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ModelMode {
    /// Both pathways fused by the transformer blocks.
    #[default]
    Full,
    /// Local pathway alone (patch-only baseline).
    LocalOnly,
}

impl std::str::FromStr for ModelMode {
    type Err = GltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glt" | "full" => Ok(ModelMode::Full),
            "local_only" => Ok(ModelMode::LocalOnly),
            _ => Err(GltError::Contract(format!("mode must be glt or local_only, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelMode::Full => "glt",
            ModelMode::LocalOnly => "local_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GltConfig {
    /// Shared by both pathways; each gets its own parameters.
    pub backbone: BackboneConfig,
    pub attention: GlaConfig,
    pub blocks: usize,
    pub mode: ModelMode,
    /// Stop gradients from the blocks at the global feature, so the global
    /// backbone learns from its own head only.
    pub detach_global: bool,
}

impl Default for GltConfig {
    fn default() -> Self {
        GltConfig {
            backbone: BackboneConfig::default(),
            attention: GlaConfig::default(),
            blocks: 6,
            mode: ModelMode::Full,
            detach_global: false,
        }
    }
}

impl GltConfig {
    /// Small widths that train in minutes on one core.
    pub fn desk(input_channels: usize) -> Self {
        GltConfig {
            backbone: BackboneConfig {
                stage_channels: vec![8, 16, 32, 64],
                blocks_per_stage: 2,
                input_channels,
            },
            attention: GlaConfig::new(64, 4).expect("valid"),
            blocks: 2,
            mode: ModelMode::Full,
            detach_global: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.blocks) {
            return Err(GltError::Contract(format!("block count {} outside 1..=10", self.blocks)));
        }
        if self.backbone.stage_channels.is_empty() || self.backbone.blocks_per_stage == 0 {
            return Err(GltError::Contract("backbone needs at least one stage and block".into()));
        }
        self.attention.validate()?;
        if self.attention.d_model != self.backbone.out_channels() {
            return Err(GltError::dim(
                "glt_model",
                format!(
                    "attention width {} differs from backbone output channels {}",
                    self.attention.d_model,
                    self.backbone.out_channels()
                ),
            ));
        }
        Ok(())
    }
}

/// Output of the global pathway for a batch of images.
#[derive(Clone, Copy, Debug)]
pub struct GlobalPass {
    /// `[B×d×h×w]`
    pub features: Var,
    /// `[B×1]`
    pub age: Var,
}

/// Output of the local pathway for a batch of patches.
#[derive(Clone, Debug)]
pub struct LocalPass {
    /// `[P×1]`
    pub age: Var,
    /// Refined local feature after the last block, `[P×d×h'×w']`.
    pub features: Var,
    /// Attention weights of every block, `[P·heads×N₂×N₁]` each.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GltModel {
    pub cfg: GltConfig,
    pub global_backbone: Option<Backbone>,
    pub local_backbone: Backbone,
    pub blocks: Vec<GltBlock>,
    pub global_head: Option<Linear>,
    pub local_head: Linear,
}

impl GltModel {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: GltConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.attention.d_model;
        let full = cfg.mode == ModelMode::Full;
        let global_backbone = full.then(|| Backbone::new(store, "global_backbone", cfg.backbone.clone(), rng));
        let local_backbone = Backbone::new(store, "local_backbone", cfg.backbone.clone(), rng);
        let mut blocks = Vec::new();
        if full {
            for i in 0..cfg.blocks {
                blocks.push(GltBlock::new(store, &format!("blocks.{i}"), cfg.attention.clone(), rng)?);
            }
        }
        let global_head = full.then(|| Linear::new(store, "global_head", d, 1, rng));
        let local_head = Linear::new(store, "local_head", d, 1, rng);
        Ok(GltModel {
            cfg,
            global_backbone,
            local_backbone,
            blocks,
            global_head,
            local_head,
        })
    }

    pub fn mode(&self) -> ModelMode {
        self.cfg.mode
    }

    fn head<T: Scalar>(s: &mut Session<'_, T>, head: &Linear, f: Var) -> Result<Var> {
        let pooled = s.tape.avgpool_global(f)?;
        head.forward(s, pooled)
    }

    /// Global feature and age for `images[B×K×H×W]`; `None` in local-only mode.
    pub fn global_pass<T: Scalar>(&self, s: &mut Session<'_, T>, images: Var) -> Result<Option<GlobalPass>> {
        let (Some(bb), Some(head)) = (&self.global_backbone, &self.global_head) else {
            return Ok(None);
        };
        let features = bb.forward(s, images)?;
        let age = Self::head(s, head, features)?;
        Ok(Some(GlobalPass { features, age }))
    }

    /// Local pathway for `patches[P×K×s×s]`. In full mode `global` carries
    /// the global feature map and, per patch, the row of it to attend to.
    pub fn local_pass<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        patches: Var,
        global: Option<(Var, &[usize])>,
    ) -> Result<LocalPass> {
        let mut f = self.local_backbone.forward(s, patches)?;
        let mut attention = Vec::new();
        if !self.blocks.is_empty() {
            let (fg, rows) = global.ok_or_else(|| GltError::Contract("full mode needs the global feature".into()))?;
            let p = s.tape.shape(patches)[0];
            if rows.len() != p {
                return Err(GltError::Contract(format!("{p} patches but {} image indices", rows.len())));
            }
            let fg = if self.cfg.detach_global { s.tape.detach(fg) } else { fg };
            let identity = rows.len() == s.tape.shape(fg)[0] && rows.iter().enumerate().all(|(i, &r)| i == r);
            let fg = if identity { fg } else { s.tape.gather_batch(fg, rows)? };
            for block in &self.blocks {
                let (next, w) = block.forward(s, f, fg)?;
                f = next;
                attention.push(w);
            }
        }
        let age = Self::head(s, &self.local_head, f)?;
        Ok(LocalPass { age, features: f, attention })
    }

    /// Eval-mode prediction for one image `[K×H×W]` and one patch:
    /// `(global age, local age)`, the former absent in local-only mode.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>, patch: PatchSpec) -> Result<(Option<T>, T)> {
        let batch = image.reshaped(&batch_shape(image.shape())?)?;
        let crop = crop_patches(&batch, &[(0, patch)])?;
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, Mode::Eval);
        let x = s.tape.constant(batch);
        let g = self.global_pass(&mut s, x)?;
        let xl = s.tape.constant(crop);
        let l = self.local_pass(&mut s, xl, g.map(|g| (g.features, &[0usize][..])))?;
        let global = g.map(|g| s.tape.value(g.age)[0]);
        Ok((global, s.tape.value(l.age)[0]))
    }

    /// Zero head weights and bias `b`: every prediction becomes `b`.
    pub fn set_constant_heads<T: Scalar>(&self, store: &mut ParamStore<T>, b: T) {
        for head in self.global_head.iter().chain([&self.local_head]) {
            store.get_mut(head.weight).tensor.data_mut().fill(T::zero());
            store.get_mut(head.bias).tensor.data_mut().fill(b);
        }
    }

    pub fn set_head_bias<T: Scalar>(&self, store: &mut ParamStore<T>, b: T) {
        for head in self.global_head.iter().chain([&self.local_head]) {
            store.get_mut(head.bias).tensor.data_mut().fill(b);
        }
    }
}

fn batch_shape(shape: &[usize]) -> Result<Vec<usize>> {
    match shape {
        [k, h, w] => Ok(vec![1, *k, *h, *w]),
        _ => Err(GltError::dim("predict", format!("expected an image [K×H×W], got {shape:?}"))),
    }
}

/// Stacks crops `[P×K×s×s]` of `images[B×K×H×W]`; every patch must have
/// the same size and lie inside the image.
pub fn crop_patches<T: Scalar>(images: &Tensor<T>, patches: &[(usize, PatchSpec)]) -> Result<Tensor<T>> {
    let [b, k, h, w] = images.shape()[..] else {
        return Err(GltError::dim("crop", format!("expected [B×K×H×W], got {:?}", images.shape())));
    };
    let Some(&(_, first)) = patches.first() else {
        return Err(GltError::Contract("no patches to crop".into()));
    };
    let size = first.size;
    let mut out = Vec::with_capacity(patches.len() * k * size * size);
    let src = images.data();
    for &(i, p) in patches {
        if i >= b {
            return Err(GltError::Contract(format!("image index {i} out of {b}")));
        }
        if p.size != size {
            return Err(GltError::Contract(format!("mixed patch sizes {size} and {} in one batch", p.size)));
        }
        p.check(h, w)?;
        for c in 0..k {
            let plane = &src[(i * k + c) * h * w..(i * k + c + 1) * h * w];
            for r in p.row..p.row + size {
                out.extend_from_slice(&plane[r * w + p.col..r * w + p.col + size]);
            }
        }
    }
    Tensor::new(&[patches.len(), k, size, size], out)
}

/// Mean absolute error of `pred[n×1]` against constant targets.
pub fn mae_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &[T]) -> Result<Var> {
    if tape.value(pred).len() != target.len() || target.is_empty() {
        return Err(GltError::dim(
            "mae_loss",
            format!("{} predictions for {} targets", tape.value(pred).len(), target.len()),
        ));
    }
    if !tape.value(pred).iter().chain(target).all(|v| v.is_finite()) {
        return Err(GltError::Numerical("non-finite prediction or target in loss".into()));
    }
    let t = tape.constant(Tensor::new(tape.shape(pred), target.to_vec())?);
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `MAE(global) + MAE(local)`; the global term is omitted when absent.
pub fn training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    global: Option<(Var, &[T])>,
    local: (Var, &[T]),
) -> Result<Var> {
    let l = mae_loss(tape, local.0, local.1)?;
    match global {
        Some((p, t)) => {
            let g = mae_loss(tape, p, t)?;
            tape.add(g, l)
        }
        None => Ok(l),
    }
}
