use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::params::{BnUpdate, Mode, ParamId, ParamKind, ParamStore, Session};
use crate::autodiff::{BnStats, Var};
use crate::error::{GltError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fan-in scaled normal, `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Stride-1 2D convolution with square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable);
        let bias = with_bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), ParamKind::Trainable));
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight,
            bias,
        }
    }

    /// Spatial output size for an input of size `len`.
    pub fn output_len(&self, len: usize) -> usize {
        len + 2 * self.padding + 1 - self.kernel
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(GltError::dim(
                "conv2d",
                format!("expected [B, {}, H, W], got {shape:?}", self.in_channels),
            ));
        }
        let w = s.param(self.weight);
        let b = self.bias.map(|id| s.param(id));
        s.tape.conv2d(x, w, b, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer),
        }
    }

    /// Train mode normalizes with batch statistics and records a running
    /// statistics update on the session; eval mode uses the running values.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(GltError::dim(
                "batch_norm",
                format!("expected {} channels, got {shape:?}", self.channels),
            ));
        }
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let stats = match s.mode() {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Fixed {
                mean: s.param_value(self.running_mean).to_vec(),
                var: s.param_value(self.running_var).to_vec(),
            },
        };
        let (y, moments) = s.tape.batch_norm(x, gamma, beta, T::from_f64_lossy(self.eps), stats)?;
        if let Some(moments) = moments {
            s.record_bn_update(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                moments,
            });
        }
        Ok(y)
    }
}

/// Fully connected layer `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        // U(−1/√in, 1/√in): a regression head starts near its bias.
        let bound = 1.0 / (in_features as f64).sqrt();
        let data = (0..in_features * out_features)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        let w = Tensor::new(&[in_features, out_features], data).expect("shape and data agree");
        Linear {
            in_features,
            out_features,
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), ParamKind::Trainable),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(GltError::dim(
                "linear",
                format!("expected [B, {}], got {shape:?}", self.in_features),
            ));
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.matmul(x, w)?;
        s.tape.add_channel_bias(y, b)
    }
}
