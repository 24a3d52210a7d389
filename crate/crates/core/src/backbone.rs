//! VGG-style feature extractor: stages of (conv3×3 → BN → ReLU) blocks,
//! each stage followed by a 2×2 max pool.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{GltError, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamStore, Session};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            input_channels: 5,
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    /// Smallest input side that survives every pooling stage.
    pub fn min_input(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn output_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.stage_channels.len();
        (h >> s, w >> s)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: BackboneConfig, rng: &mut R) -> Self {
        assert!(!cfg.stage_channels.is_empty() && cfg.blocks_per_stage > 0);
        let mut in_ch = cfg.input_channels;
        let mut stages = Vec::new();
        let mut idx = 0;
        for &ch in &cfg.stage_channels {
            let mut blocks = Vec::new();
            for _ in 0..cfg.blocks_per_stage {
                let prefix = format!("{name}.block{idx}");
                blocks.push(Block {
                    // BN's shift replaces the conv bias.
                    conv: Conv2d::new(store, &format!("{prefix}.conv"), in_ch, ch, 3, 1, false, rng),
                    bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), ch),
                });
                in_ch = ch;
                idx += 1;
            }
            stages.push(blocks);
        }
        Backbone { cfg, stages }
    }

    /// `[B×K×H×W] → [B×d×⌊H/2ˢ⌋×⌊W/2ˢ⌋]` for `s` stages.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let min = self.cfg.min_input();
        match shape[..] {
            [_, c, h, w] if c == self.cfg.input_channels && h >= min && w >= min => {}
            _ => {
                return Err(GltError::dim(
                    "backbone",
                    format!(
                        "expected [B, {}, H≥{min}, W≥{min}], got {shape:?}",
                        self.cfg.input_channels
                    ),
                ))
            }
        }
        let mut h = x;
        for stage in &self.stages {
            for b in stage {
                h = b.conv.forward(s, h)?;
                h = b.bn.forward(s, h)?;
                h = s.tape.relu(h);
            }
            h = s.tape.maxpool2(h)?;
        }
        Ok(h)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.stages.iter().flatten().map(|b| &b.conv)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{gradcheck, GradCheckOptions, Tape};
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn toy() -> BackboneConfig {
        BackboneConfig {
            stage_channels: vec![4, 8, 16, 32],
            blocks_per_stage: 2,
            input_channels: 2,
        }
    }

    fn out_shape(cfg: &BackboneConfig, h: usize, w: usize) -> Vec<usize> {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, "bb", cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(Tensor::zeros(&[1, cfg.input_channels, h, w]));
        let y = bb.forward(&mut s, x).unwrap();
        tape.shape(y).to_vec()
    }

    #[test]
    fn full_scale_shapes() {
        let cfg = BackboneConfig {
            input_channels: 1,
            ..BackboneConfig::default()
        };
        assert_eq!(out_shape(&cfg, 64, 64), vec![1, 512, 4, 4]);
        assert_eq!(cfg.output_spatial(130, 170), (8, 10));
    }

    #[test]
    fn too_small_input_fails_before_compute() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", toy(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(Tensor::zeros(&[1, 2, 15, 40]));
        let before = s.tape.len();
        assert!(matches!(bb.forward(&mut s, x), Err(GltError::Dimension { .. })));
        assert_eq!(s.tape.len(), before);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", toy(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let x = s.tape.constant(Tensor::zeros(&[2, 2, 32, 16]));
        let y = bb.forward(&mut s, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy_backbone_gradcheck() {
        let cfg = toy();
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, "bb", cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..2 * 2 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut inputs: Vec<(String, Tensor<f64>)> =
            store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect();
        inputs.push(("input".into(), Tensor::new(&[2, 2, 16, 16], x).unwrap()));
        let n = store.len();
        let proj: Vec<f64> = (0..2 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let opts = GradCheckOptions {
            max_elements_per_input: Some(12),
            ..Default::default()
        };
        let rep = gradcheck(
            &inputs,
            |tape, vars| {
                let mut s = Session::with_bound(tape, &store, &vars[..n], Mode::Train);
                let y = bb.forward(&mut s, vars[n])?;
                let r = s.tape.constant(Tensor::new(&[2, 32, 1, 1], proj.clone())?);
                let p = s.tape.mul(y, r)?;
                Ok(s.tape.sum(p))
            },
            &opts,
        )
        .unwrap();
        assert!(rep.passed(1e-3), "{rep:?}");
    }

    proptest::proptest! {
        #[test]
        fn output_shape_is_four_floor_halvings(h in 16usize..70, w in 16usize..70) {
            let cfg = BackboneConfig { stage_channels: vec![2, 2, 2, 2], blocks_per_stage: 2, input_channels: 1 };
            proptest::prop_assert_eq!(out_shape(&cfg, h, w), vec![1, 2, h / 2 / 2 / 2 / 2, w / 2 / 2 / 2 / 2]);
        }
    }
}
