//! Global-local attention: queries from the local pathway attend over keys
//! and values from the global pathway.
//!
//! For every local position `i` and global position `j` the score is
//! `q_i · k_j`, scaled and normalized over `j` with a softmax; the output at
//! `i` is the attention-weighted sum of the values. Channels are split into
//! `heads` equal groups that attend independently, and the concatenated
//! head outputs are projected back to `d_model` channels. There are no
//! positional encodings, so the result does not depend on how the global
//! positions are ordered.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{GltError, Result};
use crate::nn::{Conv2d, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator used to scale the dot-product scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreScale {
    /// `√(d_model / heads)`
    PerHead,
    /// `√d_model`
    Model,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub scale: ScoreScale,
}

impl Default for GlaConfig {
    fn default() -> Self {
        GlaConfig {
            d_model: 512,
            heads: 8,
            scale: ScoreScale::PerHead,
        }
    }
}

impl GlaConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        let cfg = GlaConfig {
            d_model,
            heads,
            scale: ScoreScale::PerHead,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(GltError::dim(
                "attention",
                format!("d_model {} not divisible into {} heads", self.d_model, self.heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn inv_scale(&self) -> f64 {
        let d = match self.scale {
            ScoreScale::PerHead => self.head_dim(),
            ScoreScale::Model => self.d_model,
        };
        1.0 / (d as f64).sqrt()
    }
}

/// Normalized attention weights, `[B × heads × N₂ × N₁]`.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn batch(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn keys(&self) -> usize {
        self.weights.shape()[3]
    }

    /// Weights of one attention row.
    pub fn row(&self, batch: usize, head: usize, query: usize) -> &[T] {
        let n1 = self.keys();
        let start = ((batch * self.heads() + head) * self.queries() + query) * n1;
        &self.weights.data()[start..start + n1]
    }

    /// Writes `head,query_index,key_index,weight` rows for one batch item.
    pub fn write_csv<W: Write>(&self, batch: usize, mut w: W) -> Result<()> {
        writeln!(w, "head,query_index,key_index,weight")?;
        for h in 0..self.heads() {
            for q in 0..self.queries() {
                for (k, v) in self.row(batch, h, q).iter().enumerate() {
                    writeln!(w, "{h},{q},{k},{v}")?;
                }
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention on token matrices
/// `q[B×N₂×d]`, `k[B×N₁×d]`, `v[B×N₁×d]`.
///
/// Returns the concatenated head outputs `[B×N₂×d]` and the weights
/// `[B·heads×N₂×N₁]`.
pub fn multi_head_attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &GlaConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let d = cfg.d_model;
    let ok = sq.len() == 3
        && sk.len() == 3
        && sk == sv
        && sq[0] == sk[0]
        && sq[2] == d
        && sk[2] == d;
    if !ok {
        return Err(GltError::dim(
            "attention",
            format!("query {sq:?}, key {sk:?}, value {sv:?} with d_model {d}"),
        ));
    }
    let (b, n2, n1, h, dh) = (sq[0], sq[1], sk[1], cfg.heads, cfg.head_dim());
    let split = |tape: &mut Tape<T>, x: Var, n: usize| -> Result<Var> {
        let x = tape.reshape(x, &[b, n, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, n, dh])
    };
    let qh = split(tape, q, n2)?;
    let kh = split(tape, k, n1)?;
    let vh = split(tape, v, n1)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, T::from_f64_lossy(cfg.inv_scale()));
    let weights = tape.softmax(scores, 2)?;
    let out = tape.matmul(weights, vh)?;
    let out = tape.reshape(out, &[b, h, n2, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[b, n2, d])?;
    Ok((out, weights))
}

/// Attention on plain row-major matrices `q[N₂×d]`, `k[N₁×d]`, `v[N₁×d]`
/// with `d = cfg.d_model`; no projections are applied.
pub fn gla_attend<T: Scalar>(q: &[T], k: &[T], v: &[T], cfg: &GlaConfig) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    cfg.validate()?;
    let d = cfg.d_model;
    if q.len() % d != 0 || k.len() % d != 0 || k.len() != v.len() {
        return Err(GltError::dim(
            "gla_attend",
            format!("lengths q {} k {} v {} incompatible with d {d}", q.len(), k.len(), v.len()),
        ));
    }
    let (n2, n1) = (q.len() / d, k.len() / d);
    if n1 == 0 {
        return Err(GltError::Contract("no global positions to attend over (N₁ = 0)".into()));
    }
    if n2 == 0 {
        return Err(GltError::Contract("no local queries (N₂ = 0)".into()));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(Tensor::new(&[1, n2, d], q.to_vec())?);
    let kv = tape.constant(Tensor::new(&[1, n1, d], k.to_vec())?);
    let vv = tape.constant(Tensor::new(&[1, n1, d], v.to_vec())?);
    let (out, w) = multi_head_attend(&mut tape, qv, kv, vv, cfg)?;
    let out = tape.tensor(out).reshaped(&[n2, d])?;
    let weights = tape.tensor(w).reshaped(&[1, cfg.heads, n2, n1])?;
    Ok((out, AttentionTrace { weights }))
}

/// `[B×d×h×w] → [B×(h·w)×d]`, positions in row-major order.
pub fn flatten_positions<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [b, d, h, w] = s[..] else {
        return Err(GltError::dim("flatten_positions", format!("expected rank 4, got {s:?}")));
    };
    let x = tape.reshape(x, &[b, d, h * w])?;
    tape.permute(x, &[0, 2, 1])
}

/// Inverse of [`flatten_positions`].
pub fn unflatten_positions<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [b, n, d] = s[..] else {
        return Err(GltError::dim("unflatten_positions", format!("expected rank 3, got {s:?}")));
    };
    if n != h * w {
        return Err(GltError::dim("unflatten_positions", format!("{n} positions cannot form {h}×{w}")));
    }
    let x = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(x, &[b, d, h, w])
}

/// Attention layer with 1×1 projections for query, key, value and output.
#[derive(Clone, Debug)]
pub struct GlobalLocalAttention {
    pub cfg: GlaConfig,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub output: Conv2d,
}

impl GlobalLocalAttention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: GlaConfig, rng: &mut R) -> Result<Self> {
        Self::build(store, name, cfg, true, rng)
    }

    /// Like [`Self::new`], but with `shift_biases = false` the value and
    /// output projections get no bias. Both only add a per-channel constant
    /// to the output, so they are redundant when a batch norm follows.
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: GlaConfig,
        shift_biases: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        // A key bias adds the same amount to every score of a query row,
        // which the softmax cancels; the key projection has none.
        let mut proj = |part: &str, bias: bool| Conv2d::new(store, &format!("{name}.{part}"), d, d, 1, 0, bias, rng);
        Ok(GlobalLocalAttention {
            query: proj("query", true),
            key: proj("key", false),
            value: proj("value", shift_biases),
            output: proj("output", shift_biases),
            cfg,
        })
    }

    /// Projects and flattens: `F^Q[B×N₂×d]` from the local map and
    /// `F^K`, `F^V[B×N₁×d]` from the global map.
    pub fn project_qkv<T: Scalar>(&self, s: &mut Session<'_, T>, f_local: Var, f_global: Var) -> Result<(Var, Var, Var)> {
        let (sl, sg) = (s.tape.shape(f_local).to_vec(), s.tape.shape(f_global).to_vec());
        let d = self.cfg.d_model;
        if sl.len() != 4 || sg.len() != 4 || sl[1] != d || sg[1] != d || sl[0] != sg[0] {
            return Err(GltError::dim(
                "project_qkv",
                format!("local {sl:?} and global {sg:?} must be [B, {d}, h, w] with equal B"),
            ));
        }
        let q = self.query.forward(s, f_local)?;
        let k = self.key.forward(s, f_global)?;
        let v = self.value.forward(s, f_global)?;
        Ok((
            flatten_positions(s.tape, q)?,
            flatten_positions(s.tape, k)?,
            flatten_positions(s.tape, v)?,
        ))
    }

    /// Global-context feature with the shape of `f_local`, plus the
    /// attention weights `[B·heads×N₂×N₁]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, f_local: Var, f_global: Var) -> Result<(Var, Var)> {
        let (q, k, v) = self.project_qkv(s, f_local, f_global)?;
        let (g, w) = multi_head_attend(s.tape, q, k, v, &self.cfg)?;
        let sl = s.tape.shape(f_local).to_vec();
        let g = unflatten_positions(s.tape, g, sl[2], sl[3])?;
        let g = self.output.forward(s, g)?;
        Ok((g, w))
    }

    /// Reads attention weights recorded by [`Self::forward`] as a trace.
    pub fn trace<T: Scalar>(&self, tape: &Tape<T>, weights: Var) -> Result<AttentionTrace<T>> {
        let s = tape.shape(weights).to_vec();
        let b = s[0] / self.cfg.heads;
        Ok(AttentionTrace {
            weights: tape.tensor(weights).reshaped(&[b, self.cfg.heads, s[1], s[2]])?,
        })
    }
}
