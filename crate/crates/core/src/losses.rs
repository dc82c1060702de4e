//! Time-domain MSE, STFT magnitude and phase losses, and their blend.
//!
//! Signals are `[batch, channel, time]` tensors. The spectral terms are
//! computed per `(batch, channel)` series and averaged.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::spectral;
use crate::training::NormStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralLossConfig {
    pub n_fft: usize,
    pub hop: usize,
    /// Highest supervised frequency in Hz.
    pub f_max: f64,
    pub lambda_mag: f64,
    pub lambda_phase: f64,
    /// Weight of the time-domain MSE in the blend.
    pub alpha: f64,
    pub epsilon: f64,
    pub sample_rate: f64,
}

impl Default for SpectralLossConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 512,
            f_max: 4.0,
            lambda_mag: 1.0,
            lambda_phase: 0.1,
            alpha: 0.8,
            epsilon: 1e-8,
            sample_rate: 25.0,
        }
    }
}

impl SpectralLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::invalid(format!(
                "need 1 <= hop <= n_fft and n_fft >= 2 (got hop {}, n_fft {})",
                self.hop, self.n_fft
            )));
        }
        if !(self.sample_rate > 0.0) || !(self.f_max >= 0.0) || self.f_max > self.sample_rate / 2.0 {
            return Err(Error::invalid(format!(
                "f_max {} must lie in [0, Nyquist = {}]",
                self.f_max,
                self.sample_rate / 2.0
            )));
        }
        if !(self.epsilon > 0.0) || self.lambda_mag < 0.0 || self.lambda_phase < 0.0 {
            return Err(Error::invalid("epsilon must be positive and weights non-negative"));
        }
        Ok(())
    }

    /// Bins `k` with `k * fs / n_fft <= f_max`.
    pub fn kept_bins(&self) -> usize {
        let k = (self.f_max * self.n_fft as f64 / self.sample_rate).floor() as usize + 1;
        k.min(self.n_fft / 2 + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossMode {
    MseOnly,
    Spectrogram(SpectralLossConfig),
}

impl LossMode {
    pub fn label(&self) -> &'static str {
        match self {
            LossMode::MseOnly => "mse",
            LossMode::Spectrogram(_) => "spectrogram",
        }
    }
}

pub fn mse(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(truth) {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(truth)),
        ));
    }
    let d = g.sub(pred, truth)?;
    let d2 = g.square(d);
    Ok(g.mean(d2))
}

fn check_series(g: &Graph, pred: Var, truth: &Tensor, cfg: &SpectralLossConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let s = g.shape(pred);
    if s.len() != 3 || s != truth.shape() {
        return Err(Error::shape(
            "spectral loss",
            format!("expected matching [batch, channel, time], got {s:?} and {:?}", truth.shape()),
        ));
    }
    if s[2] < cfg.n_fft {
        return Err(Error::invalid(format!(
            "series of length {} is shorter than n_fft = {}",
            s[2], cfg.n_fft
        )));
    }
    Ok((s[0] * s[1], spectral::frame_count(s[2], cfg.n_fft, cfg.hop)))
}

/// Windowed STFT bins `[B, C, M, K, 2]` of `x`.
fn stft_node(g: &mut Graph, x: Var, cfg: &SpectralLossConfig) -> Result<Var> {
    let frames = g.frames(x, cfg.n_fft, cfg.hop)?;
    let w = g.constant(Tensor::from_vec(spectral::hann(cfg.n_fft)));
    let windowed = g.mul(frames, w)?;
    g.rfft(windowed, cfg.kept_bins())
}

/// Plain STFT bins of a constant series, laid out like [`stft_node`].
fn stft_values(truth: &Tensor, cfg: &SpectralLossConfig) -> Vec<f64> {
    let t = truth.shape()[2];
    let k = cfg.kept_bins();
    let mut out = Vec::new();
    for row in truth.data().chunks(t) {
        let s = spectral::stft(row, cfg.sample_rate, cfg.n_fft, cfg.hop).expect("length checked");
        for m in 0..s.frames {
            for c in &s.frame(m)[..k] {
                out.push(c.re);
                out.push(c.im);
            }
        }
    }
    out
}

/// Smoothed magnitude `sqrt(re^2 + im^2 + eps^2)` of `[..., 2]` bins.
fn magnitude(g: &mut Graph, z: Var, eps: f64) -> Result<Var> {
    let sq = g.square(z);
    let axis = g.shape(z).len() - 1;
    let p = g.sum_axis(sq, axis)?;
    let p = g.add_scalar(p, eps * eps);
    Ok(g.sqrt(p))
}

/// Spectral convergence `||(|P| - |X|)|| / (||X|| + eps)` over the kept
/// bins of each series, averaged over series. `truth` is in the same
/// physical units as `pred`.
pub fn spec_mag_loss(g: &mut Graph, pred: Var, truth: &Tensor, cfg: &SpectralLossConfig) -> Result<Var> {
    let (series, m) = check_series(g, pred, truth, cfg)?;
    let k = cfg.kept_bins();
    let p = stft_node(g, pred, cfg)?;
    let mp = magnitude(g, p, cfg.epsilon)?;
    let xs = stft_values(truth, cfg);
    let mx: Vec<f64> = xs
        .chunks(2)
        .map(|c| (c[0] * c[0] + c[1] * c[1] + cfg.epsilon * cfg.epsilon).sqrt())
        .collect();
    let den: Vec<f64> = mx
        .chunks(m * k)
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt() + cfg.epsilon)
        .collect();
    let mx = g.constant(Tensor::new(g.shape(mp).to_vec(), mx)?);
    let d = g.sub(mp, mx)?;
    let d2 = g.square(d);
    let d2 = g.reshape(d2, &[series, m * k])?;
    let num = g.sum_axis(d2, 1)?;
    // keeps the root differentiable when pred equals truth
    let num = g.add_scalar(num, cfg.epsilon * cfg.epsilon);
    let num = g.sqrt(num);
    let den = g.constant(Tensor::new(vec![series, 1], den)?);
    let ratio = g.div(num, den)?;
    Ok(g.mean(ratio))
}

/// Mean squared wrapped phase difference `angle(P conj(X))` over kept bins
/// whose true magnitude is at least `eps` times the frame maximum.
pub fn spec_phase_loss(g: &mut Graph, pred: Var, truth: &Tensor, cfg: &SpectralLossConfig) -> Result<Var> {
    let (series, m) = check_series(g, pred, truth, cfg)?;
    let k = cfg.kept_bins();
    let p = stft_node(g, pred, cfg)?;
    let xs = stft_values(truth, cfg);
    let cells = series * m * k;
    let (mut xr, mut xi) = (Vec::with_capacity(cells), Vec::with_capacity(cells));
    for c in xs.chunks(2) {
        xr.push(c[0]);
        xi.push(c[1]);
    }
    let mag: Vec<f64> = xr.iter().zip(&xi).map(|(a, b)| a.hypot(*b)).collect();
    let mut weight = vec![0.0; cells];
    for s in 0..series {
        let mut count = 0usize;
        for f in 0..m {
            let frame = &mag[(s * m + f) * k..][..k];
            let peak = frame.iter().cloned().fold(0.0, f64::max);
            for q in 0..k {
                if peak > 0.0 && frame[q] >= cfg.epsilon * peak {
                    weight[(s * m + f) * k + q] = 1.0;
                    count += 1;
                }
            }
        }
        if count > 0 {
            for w in &mut weight[s * m * k..(s + 1) * m * k] {
                *w /= (count * series) as f64;
            }
        }
    }
    let shape = g.shape(p)[..4].to_vec();
    let mut shape1 = shape.clone();
    shape1.push(1);
    let pr = g.slice(p, 4, 0, 1)?;
    let pi = g.slice(p, 4, 1, 1)?;
    let xr = g.constant(Tensor::new(shape1.clone(), xr)?);
    let xi = g.constant(Tensor::new(shape1.clone(), xi)?);
    let a = g.mul(pr, xr)?;
    let b = g.mul(pi, xi)?;
    let re = g.add(a, b)?;
    let c = g.mul(pi, xr)?;
    let d = g.mul(pr, xi)?;
    let im = g.sub(c, d)?;
    let phase = g.atan2(im, re)?;
    let p2 = g.square(phase);
    let w = g.constant(Tensor::new(shape1, weight)?);
    let weighted = g.mul(p2, w)?;
    Ok(g.sum(weighted))
}

/// Loss terms of one evaluation; `total` is the value to differentiate.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub mag: Option<Var>,
    pub phase: Option<Var>,
}

/// `alpha * mse + (1 - alpha) * (lambda_mag * L_mag + lambda_phase * L_phase)`.
///
/// `pred` and `truth` are normalized displacements `[B, 2, T]`. The MSE is
/// taken in normalized units, the spectral terms after mapping both back to
/// metres with the x1/x2 statistics.
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    truth: &Tensor,
    mode: &LossMode,
    stats: Option<&NormStats>,
) -> Result<LossTerms> {
    let t = g.constant(truth.clone());
    let m = mse(g, pred, t)?;
    let cfg = match mode {
        LossMode::MseOnly => return Ok(LossTerms { total: m, mse: m, mag: None, phase: None }),
        LossMode::Spectrogram(cfg) => cfg,
    };
    cfg.validate()?;
    if cfg.alpha == 1.0 {
        return Ok(LossTerms { total: m, mse: m, mag: None, phase: None });
    }
    let stats = stats.ok_or_else(|| Error::invalid("spectral loss needs normalization statistics"))?;
    let shape = truth.shape();
    if shape.len() != 3 || shape[1] != 2 {
        return Err(Error::shape("total_loss", format!("expected [B, 2, T], got {shape:?}")));
    }
    let scale = g.constant(Tensor::new(vec![2, 1], vec![stats.std[1], stats.std[2]])?);
    let shift = g.constant(Tensor::new(vec![2, 1], vec![stats.mean[1], stats.mean[2]])?);
    let scaled = g.mul(pred, scale)?;
    let phys = g.add(scaled, shift)?;
    let (b, t_len) = (shape[0], shape[2]);
    let mut truth_phys = truth.clone();
    for bi in 0..b {
        for c in 0..2 {
            let row = &mut truth_phys.data_mut()[(bi * 2 + c) * t_len..][..t_len];
            for v in row {
                *v = *v * stats.std[c + 1] + stats.mean[c + 1];
            }
        }
    }
    let mag = spec_mag_loss(g, phys, &truth_phys, cfg)?;
    let phase = spec_phase_loss(g, phys, &truth_phys, cfg)?;
    let wm = g.scale(mag, cfg.lambda_mag);
    let wp = g.scale(phase, cfg.lambda_phase);
    let spec = g.add(wm, wp)?;
    let a = g.scale(m, cfg.alpha);
    let s = g.scale(spec, 1.0 - cfg.alpha);
    let total = g.add(a, s)?;
    Ok(LossTerms { total, mse: m, mag: Some(mag), phase: Some(phase) })
}

/// The blend applied to already-computed component values.
pub fn blend(alpha: f64, lambda_mag: f64, lambda_phase: f64, mse: f64, mag: f64, phase: f64) -> f64 {
    alpha * mse + (1.0 - alpha) * (lambda_mag * mag + lambda_phase * phase)
}
