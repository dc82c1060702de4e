//! FFT-based primitives: real transforms, STFT, Welch PSD and
//! magnitude-squared coherence.
//!
//! Conventions: forward transforms are unnormalized, inverse transforms
//! are scaled by `1/n`. The Hann window is periodic (denominator `n`).
//! One-sided densities double every bin except DC and Nyquist.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place unnormalized forward complex FFT.
pub fn fft_in_place(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), false).process(buf);
    }
}

/// In-place unnormalized inverse complex FFT (no `1/n` factor).
pub fn ifft_in_place(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), true).process(buf);
    }
}

/// Real-input DFT of `x` zero-padded or truncated to `n`; returns `n/2 + 1` bins.
pub fn rfft(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(x.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft_in_place(&mut buf);
    buf.truncate(n / 2 + 1);
    buf
}

/// Inverse of [`rfft`]: builds the Hermitian spectrum from the given bins
/// (missing bins are zero; imaginary parts of DC and Nyquist are ignored)
/// and returns `n` real samples scaled by `1/n`.
pub fn irfft(spec: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for (k, &v) in spec.iter().enumerate().take(half + 1) {
        if k == 0 || (n % 2 == 0 && k == half) {
            buf[k] = Complex64::new(v.re, 0.0);
        } else {
            buf[k] = v;
            buf[n - k] = v.conj();
        }
    }
    ifft_in_place(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Periodic Hann window `0.5 - 0.5 cos(2 pi i / n)`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Complex STFT, frames stored row-major as `values[m * bins + k]`.
#[derive(Debug, Clone)]
pub struct SpectrogramData {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex64>,
    pub frame_times: Vec<f64>,
    pub bin_freqs: Vec<f64>,
    pub n_fft: usize,
    pub hop: usize,
}

impl SpectrogramData {
    pub fn at(&self, m: usize, k: usize) -> Complex64 {
        self.values[m * self.bins + k]
    }

    pub fn frame(&self, m: usize) -> &[Complex64] {
        &self.values[m * self.bins..(m + 1) * self.bins]
    }
}

pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    if len < n_fft {
        0
    } else {
        (len - n_fft) / hop + 1
    }
}

/// Frame `m` covers `[m * hop, m * hop + n_fft)`; a trailing partial frame is dropped.
pub fn stft(x: &[f64], fs: f64, n_fft: usize, hop: usize) -> Result<SpectrogramData> {
    if n_fft < 2 || hop == 0 {
        return Err(Error::invalid(format!(
            "stft needs n_fft >= 2 and hop >= 1 (got {n_fft}, {hop})"
        )));
    }
    if x.len() < n_fft {
        return Err(Error::invalid(format!(
            "series of length {} is shorter than n_fft = {n_fft}",
            x.len()
        )));
    }
    let window = hann(n_fft);
    let frames = frame_count(x.len(), n_fft, hop);
    let bins = n_fft / 2 + 1;
    let mut values = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for m in 0..frames {
        let start = m * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft_in_place(&mut buf);
        values.extend_from_slice(&buf[..bins]);
    }
    Ok(SpectrogramData {
        frames,
        bins,
        values,
        frame_times: (0..frames).map(|m| (m * hop) as f64 / fs).collect(),
        bin_freqs: (0..bins).map(|k| k as f64 * fs / n_fft as f64).collect(),
        n_fft,
        hop,
    })
}

/// Welch segmentation: `seg_len` samples per segment, consecutive segments
/// start `seg_len - floor(overlap * seg_len)` samples apart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchParams {
    pub seg_len: usize,
    pub overlap: f64,
}

impl WelchParams {
    /// `L = min(256, T / 4)` with 50% overlap.
    pub fn for_length(t: usize) -> Self {
        Self {
            seg_len: 256.min(t / 4),
            overlap: 0.5,
        }
    }

    pub fn step(&self) -> usize {
        let overlap_samples = (self.overlap * self.seg_len as f64).floor() as usize;
        (self.seg_len - overlap_samples).max(1)
    }

    pub fn segments(&self, len: usize) -> usize {
        frame_count(len, self.seg_len, self.step())
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.seg_len < 2 {
            return Err(Error::invalid(format!(
                "Welch segment length must be >= 2 (series length {len})"
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid("Welch overlap must be in [0, 1)"));
        }
        if len < self.seg_len {
            return Err(Error::invalid(format!(
                "series of length {len} is shorter than the Welch segment {}",
                self.seg_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
    pub segment_len: usize,
    pub overlap: f64,
    /// Window energy `sum w^2`.
    pub window_energy: f64,
    pub segments: usize,
}

/// Windowed segment spectra of `x`, one `Vec` per segment.
fn segment_spectra(x: &[f64], params: &WelchParams, window: &[f64]) -> Vec<Vec<Complex64>> {
    let l = params.seg_len;
    let step = params.step();
    let count = params.segments(x.len());
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![Complex64::new(0.0, 0.0); l];
    for s in 0..count {
        let start = s * step;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft_in_place(&mut buf);
        out.push(buf[..l / 2 + 1].to_vec());
    }
    out
}

fn one_sided_factor(k: usize, l: usize) -> f64 {
    if k == 0 || (l % 2 == 0 && k == l / 2) {
        1.0
    } else {
        2.0
    }
}

pub fn welch_psd(x: &[f64], fs: f64) -> Result<PsdEstimate> {
    welch_psd_with(x, fs, WelchParams::for_length(x.len()))
}

/// One-sided Welch PSD in units²/Hz:
/// `S(f_k) = c_k / (fs W K) * sum_segments |X_s(f_k)|^2`.
pub fn welch_psd_with(x: &[f64], fs: f64, params: WelchParams) -> Result<PsdEstimate> {
    params.check(x.len())?;
    let l = params.seg_len;
    let window = hann(l);
    let w_energy: f64 = window.iter().map(|w| w * w).sum();
    let spectra = segment_spectra(x, &params, &window);
    let k_segments = spectra.len();
    let bins = l / 2 + 1;
    let mut values = vec![0.0; bins];
    for spec in &spectra {
        for (v, c) in values.iter_mut().zip(spec) {
            *v += c.norm_sqr();
        }
    }
    let norm = 1.0 / (fs * w_energy * k_segments as f64);
    for (k, v) in values.iter_mut().enumerate() {
        *v *= norm * one_sided_factor(k, l);
    }
    Ok(PsdEstimate {
        freqs: (0..bins).map(|k| k as f64 * fs / l as f64).collect(),
        values,
        segment_len: l,
        overlap: params.overlap,
        window_energy: w_energy,
        segments: k_segments,
    })
}

/// Magnitude-squared coherence on the Welch grid; returns `(freqs, values)`.
pub fn coherence(a: &[f64], b: &[f64], fs: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    coherence_with(a, b, fs, WelchParams::for_length(a.len()))
}

/// `C(f) = |G_ab|^2 / (G_aa G_bb)`, clipped to `[0, 1]`. Bins where either
/// auto-spectrum vanishes are reported as 0.
pub fn coherence_with(
    a: &[f64],
    b: &[f64],
    fs: f64,
    params: WelchParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "coherence needs equal lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    params.check(a.len())?;
    if params.segments(a.len()) < 2 {
        return Err(Error::invalid(
            "coherence from a single segment is identically 1; need at least 2 segments",
        ));
    }
    let l = params.seg_len;
    let window = hann(l);
    let sa = segment_spectra(a, &params, &window);
    let sb = segment_spectra(b, &params, &window);
    let bins = l / 2 + 1;
    let mut gab = vec![Complex64::new(0.0, 0.0); bins];
    let mut gaa = vec![0.0; bins];
    let mut gbb = vec![0.0; bins];
    for (xa, xb) in sa.iter().zip(&sb) {
        for k in 0..bins {
            gab[k] += xa[k] * xb[k].conj();
            gaa[k] += xa[k].norm_sqr();
            gbb[k] += xb[k].norm_sqr();
        }
    }
    // common scale factors cancel in the ratio
    let values = (0..bins)
        .map(|k| {
            let den = gaa[k] * gbb[k];
            if den > 0.0 {
                (gab[k].norm_sqr() / den).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let freqs = (0..bins).map(|k| k as f64 * fs / l as f64).collect();
    Ok((freqs, values))
}
