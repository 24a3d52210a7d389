//! Trainable layers, parameter storage, optimizer and checkpoints.

pub mod checkpoint;
mod layers;
mod optim;
mod params;

pub use layers::{kaiming_normal, BatchNorm2d, Conv2d, Linear};
pub use optim::{Adam, StepDecay};
pub use params::{BnUpdate, Mode, Param, ParamId, ParamKind, ParamStore, Session};
