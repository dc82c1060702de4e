//! Excitation signals: the randomized two-tone training forcing and the
//! out-of-distribution stress signals (linear chirp, Gaussian impulse,
//! piecewise-constant steps).

use std::f64::consts::TAU;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Peak amplitude of the sine term of the two-tone forcing, in newtons.
pub const SIN_SCALE: f64 = 20.0;
/// Peak amplitude of the cosine term of the two-tone forcing, in newtons.
pub const COS_SCALE: f64 = 16.0;

/// Uniform sampling grid `t_i = t0 + i * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub t0: f64,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        Self::with_origin(dt, n_steps, 0.0)
    }

    pub fn with_origin(dt: f64, n_steps: usize, t0: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")));
        }
        if n_steps < 2 {
            return Err(Error::invalid(format!(
                "a grid needs at least 2 samples, got {n_steps}"
            )));
        }
        if !t0.is_finite() {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(Self { dt, n_steps, t0 })
    }

    /// 200 s at 25 Hz.
    pub fn standard() -> Self {
        Self {
            dt: 0.04,
            n_steps: 5000,
            t0: 0.0,
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_steps).map(|i| self.time(i)).collect()
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps - 1)
    }

    /// Time between the first and last sample.
    pub fn span(&self) -> f64 {
        (self.n_steps - 1) as f64 * self.dt
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.dt
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self::standard()
    }
}

/// `F(t) = 20 a_sin sin(2 pi f1 t + phi1) + 16 a_cos cos(2 pi f2 t + phi2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoTone {
    pub a_sin: f64,
    pub a_cos: f64,
    pub f1: f64,
    pub f2: f64,
    pub phi1: f64,
    pub phi2: f64,
}

impl TwoTone {
    pub fn eval(&self, t: f64) -> f64 {
        SIN_SCALE * self.a_sin * (TAU * self.f1 * t + self.phi1).sin()
            + COS_SCALE * self.a_cos * (TAU * self.f2 * t + self.phi2).cos()
    }
}

/// Linear frequency sweep from `f_start` at the first grid sample to
/// `f_end` at the last one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chirp {
    pub f_start: f64,
    pub f_end: f64,
}

impl Chirp {
    pub const DEFAULT_AMPLITUDE: f64 = 10.0;

    pub fn stress_default() -> Self {
        Self {
            f_start: 0.01,
            f_end: 2.0,
        }
    }

    fn rate(&self, grid: &TimeGrid) -> f64 {
        (self.f_end - self.f_start) / grid.span()
    }

    pub fn instantaneous_frequency(&self, t: f64, grid: &TimeGrid) -> f64 {
        self.f_start + self.rate(grid) * (t - grid.t0)
    }

    /// Phase is the integral of the instantaneous frequency from `grid.t0`.
    pub fn eval(&self, t: f64, grid: &TimeGrid, amplitude: f64) -> f64 {
        let tau = t - grid.t0;
        let phase = TAU * (self.f_start * tau + 0.5 * self.rate(grid) * tau * tau);
        amplitude * phase.sin()
    }
}

/// Gaussian pulse `A exp(-(t - tc)^2 / (2 w^2))`, exactly zero beyond six widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impulse {
    pub t_center: f64,
    pub amplitude: f64,
    pub width: f64,
}

impl Impulse {
    pub const CUTOFF_WIDTHS: f64 = 6.0;

    pub fn stress_default() -> Self {
        Self {
            t_center: 50.0,
            amplitude: 50.0,
            width: 0.2,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let z = (t - self.t_center) / self.width;
        if z.abs() > Self::CUTOFF_WIDTHS {
            0.0
        } else {
            self.amplitude * (-0.5 * z * z).exp()
        }
    }
}

/// Piecewise-constant schedule of `(t_switch, level)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub levels: Vec<(f64, f64)>,
}

impl Step {
    /// Levels 10, -10, 15, 0 N switching every 50 s.
    pub fn stress_default() -> Self {
        Self {
            levels: vec![(0.0, 10.0), (50.0, -10.0), (100.0, 15.0), (150.0, 0.0)],
        }
    }

    /// Level of the latest switch with `t_switch <= t`, or 0 before the first.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.levels.partition_point(|&(ts, _)| ts <= t);
        if n == 0 {
            0.0
        } else {
            self.levels[n - 1].1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForcingSpec {
    TwoTone(TwoTone),
    Chirp { chirp: Chirp, amplitude: f64 },
    Impulse(Impulse),
    Step(Step),
}

impl ForcingSpec {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        match self {
            ForcingSpec::TwoTone(s) => {
                if !(s.f1 > 0.0 && s.f2 > 0.0) {
                    return Err(Error::invalid("two-tone frequencies must be positive"));
                }
            }
            ForcingSpec::Chirp { chirp, .. } => {
                if !(chirp.f_start > 0.0 && chirp.f_start < chirp.f_end) {
                    return Err(Error::invalid(
                        "chirp needs 0 < f_start < f_end".to_string(),
                    ));
                }
            }
            ForcingSpec::Impulse(p) => {
                if !(p.width > 0.0) {
                    return Err(Error::invalid("impulse width must be positive"));
                }
                if p.t_center < grid.t0 || p.t_center > grid.t_end() {
                    return Err(Error::invalid(format!(
                        "impulse center {} s lies outside the grid [{}, {}]",
                        p.t_center,
                        grid.t0,
                        grid.t_end()
                    )));
                }
            }
            ForcingSpec::Step(s) => {
                if s.levels.is_empty() {
                    return Err(Error::invalid("step schedule has no levels"));
                }
                if s.levels.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::invalid(
                        "step switch times must be strictly increasing",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Continuous-time value; `None` for discontinuous signals, which the
    /// integrator handles through the sampled series instead.
    pub fn closed_form(&self, t: f64, grid: &TimeGrid) -> Option<f64> {
        match self {
            ForcingSpec::TwoTone(s) => Some(s.eval(t)),
            ForcingSpec::Chirp { chirp, amplitude } => Some(chirp.eval(t, grid, *amplitude)),
            ForcingSpec::Impulse(p) => Some(p.eval(t)),
            ForcingSpec::Step(_) => None,
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        self.validate(grid)?;
        Ok(match self {
            ForcingSpec::TwoTone(s) => sample_two_tone(s, grid),
            ForcingSpec::Chirp { chirp, amplitude } => sample_chirp(chirp, grid, *amplitude),
            ForcingSpec::Impulse(p) => sample_impulse(p, grid)?,
            ForcingSpec::Step(s) => sample_step(s, grid),
        })
    }
}

/// Forcing frequency regimes of the training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqConfig {
    /// A: f1 ~ U(0.04, 1.1) Hz, f2 ~ U(0.09, 2.1) Hz.
    Broadband,
    /// B: f1 = 1 Hz, f2 = 2 Hz.
    HighFreq,
    /// C: f1 = 0.05 Hz, f2 = 0.1 Hz.
    LowFreq,
}

impl FreqConfig {
    pub const ALL: [FreqConfig; 3] = [FreqConfig::Broadband, FreqConfig::HighFreq, FreqConfig::LowFreq];

    pub fn label(&self) -> &'static str {
        match self {
            FreqConfig::Broadband => "broadband",
            FreqConfig::HighFreq => "high",
            FreqConfig::LowFreq => "low",
        }
    }
}

impl std::str::FromStr for FreqConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "broadband" => Ok(FreqConfig::Broadband),
            "b" | "high" | "high_freq" | "highfreq" => Ok(FreqConfig::HighFreq),
            "c" | "low" | "low_freq" | "lowfreq" => Ok(FreqConfig::LowFreq),
            other => Err(Error::invalid(format!("unknown frequency config '{other}'"))),
        }
    }
}

impl std::fmt::Display for FreqConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub fn sample_two_tone(spec: &TwoTone, grid: &TimeGrid) -> Vec<f64> {
    (0..grid.n_steps).map(|i| spec.eval(grid.time(i))).collect()
}

/// Draw order: a_sin, a_cos, phi1, phi2, then f1, f2 (broadband only).
pub fn draw_forcing<R: RngCore + ?Sized>(config: FreqConfig, rng: &mut R) -> TwoTone {
    let a_sin = rng::unit_f64(rng);
    let a_cos = rng::unit_f64(rng);
    let phi1 = rng::uniform(rng, 0.0, TAU);
    let phi2 = rng::uniform(rng, 0.0, TAU);
    let (f1, f2) = match config {
        FreqConfig::Broadband => (rng::uniform(rng, 0.04, 1.1), rng::uniform(rng, 0.09, 2.1)),
        FreqConfig::HighFreq => (1.0, 2.0),
        FreqConfig::LowFreq => (0.05, 0.1),
    };
    TwoTone {
        a_sin,
        a_cos,
        f1,
        f2,
        phi1,
        phi2,
    }
}

pub fn sample_chirp(spec: &Chirp, grid: &TimeGrid, amplitude: f64) -> Vec<f64> {
    (0..grid.n_steps)
        .map(|i| spec.eval(grid.time(i), grid, amplitude))
        .collect()
}

pub fn sample_impulse(spec: &Impulse, grid: &TimeGrid) -> Result<Vec<f64>> {
    if spec.t_center < grid.t0 || spec.t_center > grid.t_end() {
        return Err(Error::invalid(format!(
            "impulse center {} s lies outside the grid",
            spec.t_center
        )));
    }
    Ok((0..grid.n_steps).map(|i| spec.eval(grid.time(i))).collect())
}

pub fn sample_step(spec: &Step, grid: &TimeGrid) -> Vec<f64> {
    (0..grid.n_steps).map(|i| spec.eval(grid.time(i))).collect()
}

/// Instantaneous frequency of a sampled chirp, by the phase derivative.
pub fn chirp_frequency_track(spec: &Chirp, grid: &TimeGrid) -> Vec<f64> {
    (0..grid.n_steps)
        .map(|i| spec.instantaneous_frequency(grid.time(i), grid))
        .collect()
}
