//! Training loop: seeded subject batches, per-image patch sampling, the
//! summed absolute-error objective and Adam with step decay.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{GltError, Result};
use crate::model::{crop_patches, training_loss, GltModel};
use crate::nn::{Adam, Mode, ParamStore, Session, StepDecay};
use crate::patch::{sample_multisize_with, PatchSpec, SizeGrid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How local patches are drawn for each image in a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchPolicy {
    /// `per_image` patches of one size at uniform positions.
    Fixed { size: usize, per_image: usize },
    /// `per_image` patches of uniformly drawn grid sizes and positions.
    MultiSize { per_image: usize, grid: SizeGrid },
}

impl PatchPolicy {
    pub fn sample<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> Result<Vec<PatchSpec>> {
        match *self {
            PatchPolicy::Fixed { size, per_image } => {
                if size > h.min(w) || size == 0 {
                    return Err(GltError::Contract(format!("patch size {size} does not fit {h}×{w}")));
                }
                Ok((0..per_image)
                    .map(|_| PatchSpec::new(rng.random_range(0..=h - size), rng.random_range(0..=w - size), size))
                    .collect())
            }
            PatchPolicy::MultiSize { per_image, grid } => sample_multisize_with(h, w, per_image, grid, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: StepDecay,
    pub policy: PatchPolicy,
    pub seed: u64,
    /// Start both head biases at the mean training target.
    pub init_bias_to_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 18,
            lr0: 1e-4,
            decay: StepDecay { period: 25, factor: 0.5 },
            policy: PatchPolicy::Fixed { size: 64, per_image: 1 },
            seed: 0,
            init_bias_to_mean: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let per_image = match self.policy {
            PatchPolicy::Fixed { size, per_image } => {
                if size == 0 {
                    return Err(GltError::Contract("patch size must be positive".into()));
                }
                per_image
            }
            PatchPolicy::MultiSize { per_image, .. } => per_image,
        };
        if self.epochs == 0
            || self.batch_size == 0
            || per_image == 0
            || !(self.lr0 > 0.0)
            || self.decay.period == 0
            || !(self.decay.factor > 0.0)
        {
            return Err(GltError::Contract(format!("training settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_csv<W: Write>(mut w: W, curve: &[LossPoint]) -> Result<()> {
    writeln!(w, "epoch,step,loss")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.epoch, p.step, p.loss)?;
    }
    Ok(())
}

/// Stacks `[K×H×W]` images into `[B×K×H×W]`.
pub fn stack_images<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| GltError::Contract("no images to stack".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(GltError::dim("stack", format!("expected [K×H×W], got {shape:?}")));
    }
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(GltError::shapes("stack", &shape, im.shape()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)
}

/// Trains `model` in place on `(image[K×H×W], age)` pairs and returns the
/// per-step loss curve.
///
/// Each epoch visits the subjects in a seeded random order, in batches of
/// `batch_size` (a trailing batch of one is skipped, since batch
/// statistics need two samples). Patches of equal size are batched
/// together; all of them reuse the global feature of their image.
pub fn train<T: Scalar>(
    model: &GltModel,
    store: &mut ParamStore<T>,
    data: &[(&Tensor<T>, f64)],
    cfg: &TrainConfig,
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GltError::Contract("empty training set".into()));
    }
    let shape = data[0].0.shape().to_vec();
    let (h, w) = match shape[..] {
        [_, h, w] => (h, w),
        _ => return Err(GltError::dim("train", format!("expected [K×H×W] images, got {shape:?}"))),
    };
    if cfg.init_bias_to_mean {
        let mean = data.iter().map(|d| d.1).sum::<f64>() / data.len() as f64;
        model.set_head_bias(store, T::from_f64_lossy(mean));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr0, cfg.decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 && data.len() >= 2 {
                continue;
            }
            let images: Vec<&Tensor<T>> = chunk.iter().map(|&i| data[i].0).collect();
            let ages: Vec<T> = chunk.iter().map(|&i| T::from_f64_lossy(data[i].1)).collect();
            let batch = stack_images(&images)?;
            let mut groups: BTreeMap<usize, Vec<(usize, PatchSpec)>> = BTreeMap::new();
            for b in 0..chunk.len() {
                for p in cfg.policy.sample(h, w, &mut rng)? {
                    groups.entry(p.size).or_default().push((b, p));
                }
            }
            let loss = train_step(model, store, &mut adam, batch, &ages, &groups, epoch)
                .map_err(|e| match e {
                    GltError::Numerical(m) => GltError::Numerical(format!("epoch {epoch}, step {step}: {m}")),
                    other => other,
                })?;
            curve.push(LossPoint { epoch, step, loss });
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        log::info!("epoch {epoch}: mean loss {:.4}", epoch_loss / batches.max(1) as f64);
    }
    Ok(curve)
}

fn train_step<T: Scalar>(
    model: &GltModel,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: Tensor<T>,
    ages: &[T],
    groups: &BTreeMap<usize, Vec<(usize, PatchSpec)>>,
    epoch: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, Mode::Train);
    let mut local = Vec::new();
    let mut local_targets = Vec::new();
    let crops: Vec<Tensor<T>> = groups.values().map(|g| crop_patches(&batch, g)).collect::<Result<_>>()?;
    let x = s.tape.constant(batch);
    let global = model.global_pass(&mut s, x)?;
    for (group, crop) in groups.values().zip(crops) {
        let rows: Vec<usize> = group.iter().map(|p| p.0).collect();
        let xl = s.tape.constant(crop);
        let l = model.local_pass(&mut s, xl, global.map(|g| (g.features, &rows[..])))?;
        local.push(l.age);
        local_targets.extend(rows.iter().map(|&r| ages[r]));
    }
    let pl = if local.len() == 1 { local[0] } else { s.tape.concat(&local, 0)? };
    let loss = training_loss(s.tape, global.map(|g| (g.age, ages)), (pl, &local_targets))?;
    let value = s.tape.value(loss)[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(GltError::Numerical(format!("loss is {value}")));
    }
    let (bound, bn) = s.finish();
    tape.backward(loss)?;
    store.accumulate_grads(&tape, &bound);
    store.apply_bn_updates(&bn);
    adam.step(store, epoch)?;
    Ok(value)
}

/// Eval-mode local predictions for many patches of one image `[K×H×W]`.
/// The global feature is computed once; patches run in chunks of
/// `chunk` per size.
pub fn predict_patches<T: Scalar>(
    model: &GltModel,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    patches: &[PatchSpec],
    chunk: usize,
) -> Result<Vec<f64>> {
    let batch = stack_images(&[image])?;
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, store, Mode::Eval);
    let x = s.tape.constant(batch.clone());
    let global = model.global_pass(&mut s, x)?;
    let mark = s.tape.len();
    drop(s);
    let mut out = vec![0.0; patches.len()];
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        groups.entry(p.size).or_default().push(i);
    }
    for idx in groups.values() {
        for part in idx.chunks(chunk.max(1)) {
            let specs: Vec<(usize, PatchSpec)> = part.iter().map(|&i| (0, patches[i])).collect();
            let crop = crop_patches(&batch, &specs)?;
            let rows = vec![0; part.len()];
            let mut s = Session::new(&mut tape, store, Mode::Eval);
            let xl = s.tape.constant(crop);
            let l = model.local_pass(&mut s, xl, global.map(|g| (g.features, &rows[..])))?;
            for (&i, v) in part.iter().zip(s.tape.value(l.age)) {
                out[i] = v.to_f64_lossy();
            }
            tape.truncate(mark);
        }
    }
    Ok(out)
}
