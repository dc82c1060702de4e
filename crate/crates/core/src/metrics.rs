//! Energy ratio, PSD NRMSE and band-averaged coherence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral;

/// Default upper band edge of the coherence score, in Hz.
pub const COHERENCE_F_MAX: f64 = 4.0;

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn same_length(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(format!(
            "metric inputs must be non-empty and equally long ({} vs {})",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// `RMS(pred) / RMS(truth)`.
pub fn energy_ratio(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_length(pred, truth)?;
    let rt = rms(truth);
    if rt == 0.0 {
        return Err(Error::UndefinedMetric("energy ratio of a zero-energy truth".into()));
    }
    Ok(rms(pred) / rt)
}

/// `100 * RMS(S_pred - S_truth) / RMS(S_truth)` of Welch densities.
pub fn psd_nrmse(pred: &[f64], truth: &[f64], fs: f64) -> Result<f64> {
    same_length(pred, truth)?;
    let sp = spectral::welch_psd(pred, fs)?;
    let st = spectral::welch_psd(truth, fs)?;
    let diff: Vec<f64> = sp.values.iter().zip(&st.values).map(|(a, b)| a - b).collect();
    let den = rms(&st.values);
    if den == 0.0 {
        return Err(Error::UndefinedMetric("PSD NRMSE of a zero-spectrum truth".into()));
    }
    Ok(100.0 * rms(&diff) / den)
}

/// Mean magnitude-squared coherence over bins with `f <= f_max`, in percent.
pub fn coherence_score(pred: &[f64], truth: &[f64], fs: f64, f_max: f64) -> Result<f64> {
    same_length(pred, truth)?;
    let (freqs, coh) = spectral::coherence(pred, truth, fs)?;
    let band: Vec<f64> = freqs
        .iter()
        .zip(&coh)
        .filter(|(f, _)| **f <= f_max)
        .map(|(_, c)| *c)
        .collect();
    if band.is_empty() {
        return Err(Error::invalid(format!("no coherence bins at or below {f_max} Hz")));
    }
    Ok(100.0 * band.iter().sum::<f64>() / band.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub energy_ratio: f64,
    pub psd_nrmse: f64,
    pub coherence: f64,
}

impl ChannelMetrics {
    pub fn compute(pred: &[f64], truth: &[f64], fs: f64, f_max: f64) -> Result<Self> {
        Ok(Self {
            energy_ratio: energy_ratio(pred, truth)?,
            psd_nrmse: psd_nrmse(pred, truth, fs)?,
            coherence: coherence_score(pred, truth, fs, f_max)?,
        })
    }
}

/// Per-channel means over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub channels: Vec<ChannelMetrics>,
}

/// Metrics of every `(sample, channel)` pair, averaged per channel in
/// sample order. Inputs are in physical units, indexed `[sample][channel]`.
pub fn evaluate_testset(
    preds: &[Vec<Vec<f64>>],
    truths: &[Vec<Vec<f64>>],
    fs: f64,
    f_max: f64,
) -> Result<MetricsReport> {
    if preds.len() != truths.len() || truths.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let n_ch = truths[0].len();
    let mut sums = vec![[0.0; 3]; n_ch];
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.len() != n_ch || t.len() != n_ch {
            return Err(Error::invalid("channel count differs between samples").at_sample(i));
        }
        for c in 0..n_ch {
            let m = ChannelMetrics::compute(&p[c], &t[c], fs, f_max).map_err(|e| e.at_sample(i))?;
            sums[c][0] += m.energy_ratio;
            sums[c][1] += m.psd_nrmse;
            sums[c][2] += m.coherence;
        }
    }
    let n = truths.len() as f64;
    Ok(MetricsReport {
        n_samples: truths.len(),
        channels: sums
            .iter()
            .map(|s| ChannelMetrics {
                energy_ratio: s[0] / n,
                psd_nrmse: s[1] / n,
                coherence: s[2] / n,
            })
            .collect(),
    })
}
