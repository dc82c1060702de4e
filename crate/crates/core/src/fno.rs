//! One-dimensional Fourier neural operator.
//!
//! ```text
//! u0      = P [f; i/T] + p
//! z       = W u + K(u) + b            K(u) = irfft(R . rfft(u)[..modes])
//! u_{l+1} = u + M2 gelu(M1 dropout(gelu(z)) + c1) + c2
//! y       = Q2 gelu(Q1 u_L + q1) + q2
//! ```
//!
//! Channel maps are 1x1 convolutions, i.e. matrices applied along the
//! channel axis of `[batch, channel, time]` tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub n_modes: usize,
    pub n_blocks: usize,
    pub dropout_p: f64,
    /// Appends a `t / T` channel to the input before lifting.
    #[serde(default = "default_true")]
    pub positional_embedding: bool,
    /// Zero samples appended to the time axis inside the operator.
    #[serde(default)]
    pub padding: usize,
}

fn default_true() -> bool {
    true
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 2,
            width: 32,
            n_modes: 64,
            n_blocks: 4,
            dropout_p: 0.2,
            positional_embedding: true,
            padding: 0,
        }
    }
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.n_modes == 0 {
            return Err(Error::invalid(format!("FNO sizes must be positive: {self:?}")));
        }
        if self.width < self.out_channels {
            return Err(Error::invalid(format!(
                "width {} is smaller than out_channels {}",
                self.width, self.out_channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn lifted_inputs(&self) -> usize {
        self.in_channels + usize::from(self.positional_embedding)
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (w, k, o) = (self.width, self.n_modes, self.out_channels);
        let lift = w * self.lifted_inputs() + w;
        let block = 2 * k * w * w + 3 * w * w + 3 * w;
        let project = w * w + w + o * w + o;
        lift + self.n_blocks * block + project
    }
}

// parameter slots
const LIFT_W: usize = 0;
const LIFT_B: usize = 1;
const PER_BLOCK: usize = 7;
const SPECTRAL: usize = 0;
const LOCAL_W: usize = 1;
const BIAS: usize = 2;
const MLP1_W: usize = 3;
const MLP1_B: usize = 4;
const MLP2_W: usize = 5;
const MLP2_B: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct FnoModel {
    pub config: FnoConfig,
    pub params: ParamStore,
}

/// Glorot-uniform scaled by `gain`.
fn glorot(r: &mut StreamRng, fan_out: usize, fan_in: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in).map(|_| rng::uniform(r, -a, a)).collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("shape matches")
}

impl FnoModel {
    fn build(config: FnoConfig, mut fill: impl FnMut(&str, &[usize]) -> Tensor) -> Result<Self> {
        config.validate()?;
        let (w, k, o) = (config.width, config.n_modes, config.out_channels);
        let mut params = ParamStore::new();
        let mut add = |name: String, shape: &[usize]| {
            let t = fill(&name, shape);
            params.push(name, t);
        };
        add("lift.weight".into(), &[w, config.lifted_inputs()]);
        add("lift.bias".into(), &[w, 1]);
        for b in 0..config.n_blocks {
            add(format!("blocks.{b}.spectral"), &[w, w, k, 2]);
            add(format!("blocks.{b}.local.weight"), &[w, w]);
            add(format!("blocks.{b}.bias"), &[w, 1]);
            add(format!("blocks.{b}.mlp1.weight"), &[w, w]);
            add(format!("blocks.{b}.mlp1.bias"), &[w, 1]);
            add(format!("blocks.{b}.mlp2.weight"), &[w, w]);
            add(format!("blocks.{b}.mlp2.bias"), &[w, 1]);
        }
        add("project1.weight".into(), &[w, w]);
        add("project1.bias".into(), &[w, 1]);
        add("project2.weight".into(), &[o, w]);
        add("project2.bias".into(), &[o, 1]);
        Ok(Self { config, params })
    }

    pub fn zeros(config: FnoConfig) -> Result<Self> {
        Self::build(config, |_, s| Tensor::zeros(s))
    }

    /// Spectral weights `N(0, 1/width^2)`, channel maps Glorot-uniform
    /// (gain `sqrt(2)` in front of a GELU), biases zero.
    pub fn init(config: FnoConfig, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let std = 1.0 / config.width as f64;
        Self::build(config, |name, s| {
            if name.ends_with("spectral") {
                let n = s.iter().product();
                Tensor::new(s.to_vec(), (0..n).map(|_| std * rng::normal(&mut r)).collect()).expect("shape")
            } else if name.ends_with("weight") {
                // rectifier gain on maps that feed a GELU
                let feeds_gelu = name.contains("local") || name.contains("mlp1") || name.starts_with("project1");
                let gain = if feeds_gelu { std::f64::consts::SQRT_2 } else { 1.0 };
                glorot(&mut r, s[0], s[1], gain)
            } else {
                Tensor::zeros(s)
            }
        })
    }

    fn slot(&self, params: &[Var], block: usize, which: usize) -> Var {
        params[2 + block * PER_BLOCK + which]
    }

    /// `[B, in, T]` to `[B, out, T]`. Dropout masks are derived from `seed`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var, train: bool, seed: u64) -> Result<Var> {
        let cfg = &self.config;
        if params.len() != self.params.len() {
            return Err(Error::shape("fno", format!("{} parameters bound, {} expected", params.len(), self.params.len())));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.in_channels {
            return Err(Error::shape("fno", format!("expected [B, {}, T], got {shape:?}", cfg.in_channels)));
        }
        let (batch, t) = (shape[0], shape[2]);
        let n = t + cfg.padding;
        if cfg.n_modes > n / 2 + 1 {
            return Err(Error::invalid(format!("{} modes exceed {} available bins", cfg.n_modes, n / 2 + 1)));
        }
        let mut input = x;
        if cfg.positional_embedding {
            // i / T keeps positions identical across resolutions
            let denom = t as f64;
            let mut grid = Vec::with_capacity(batch * t);
            for _ in 0..batch {
                grid.extend((0..t).map(|i| i as f64 / denom));
            }
            let gv = g.constant(Tensor::new(vec![batch, 1, t], grid)?);
            input = g.concat(&[x, gv], 1)?;
        }
        let mut u = channel_map(g, params[LIFT_W], params[LIFT_B], input)?;
        if cfg.padding > 0 {
            let pad = g.constant(Tensor::zeros(&[batch, cfg.width, cfg.padding]));
            u = g.concat(&[u, pad], 2)?;
        }
        for b in 0..cfg.n_blocks {
            let s = spectral_conv(g, u, self.slot(params, b, SPECTRAL), cfg.n_modes)?;
            let l = g.matmul(self.slot(params, b, LOCAL_W), u)?;
            let z = g.add(l, s)?;
            let z = g.add(z, self.slot(params, b, BIAS))?;
            let a = g.gelu(z);
            let a = g.dropout(a, cfg.dropout_p, train, rng::derive(seed, b as u64))?;
            let h = channel_map(g, self.slot(params, b, MLP1_W), self.slot(params, b, MLP1_B), a)?;
            let h = g.gelu(h);
            let h = channel_map(g, self.slot(params, b, MLP2_W), self.slot(params, b, MLP2_B), h)?;
            u = g.add(u, h)?;
        }
        if cfg.padding > 0 {
            u = g.slice(u, 2, 0, t)?;
        }
        let base = 2 + cfg.n_blocks * PER_BLOCK;
        let h = channel_map(g, params[base], params[base + 1], u)?;
        let h = g.gelu(h);
        channel_map(g, params[base + 2], params[base + 3], h)
    }
}

/// `W x + b` along the channel axis of `[B, C, T]`.
fn channel_map(g: &mut Graph, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = g.matmul(w, x)?;
    g.add(y, b)
}

/// `irfft(R . rfft(v))` keeping the lowest `n_modes` bins, for `v` of shape
/// `[B, C, T]` and `r` of shape `[C, C', n_modes, 2]`.
pub fn spectral_conv(g: &mut Graph, v: Var, r: Var, n_modes: usize) -> Result<Var> {
    let t = *g.shape(v).last().ok_or_else(|| Error::shape("spectral_conv", "scalar input"))?;
    let f = g.rfft(v, n_modes)?;
    let y = g.complex_matmul(f, r)?;
    g.irfft(y, t)
}
