//! Two-degree-of-freedom mass-spring plant, its adaptive integration and
//! dataset generation.
//!
//! ```text
//! m1 x1'' + k1(t) x1 + k2 (x1 - x2) + k3 (x1 - x2)^3 = F(t)
//! m2 x2'' + k2 (x2 - x1) + k3 (x2 - x1)^3 = 0
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::rng;
use crate::signals::{self, ForcingSpec, FreqConfig, TimeGrid};
use crate::training::NormStats;

pub const DATASET_MAGIC: &[u8; 5] = b"FNOD1";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const CHANNEL_NAMES: [&str; 3] = ["forcing", "x1", "x2"];

/// First index of the fixed held-out block; samples below it form the
/// training pool.
pub const TEST_START: usize = 2048;
pub const TEST_END: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemCase {
    Linear,
    LinearSoftening,
    Nonlinear,
    NonlinearSoftening,
}

impl SystemCase {
    pub const ALL: [SystemCase; 4] = [
        SystemCase::Linear,
        SystemCase::LinearSoftening,
        SystemCase::Nonlinear,
        SystemCase::NonlinearSoftening,
    ];

    pub fn is_softening(&self) -> bool {
        matches!(self, SystemCase::LinearSoftening | SystemCase::NonlinearSoftening)
    }

    pub fn is_nonlinear(&self) -> bool {
        matches!(self, SystemCase::Nonlinear | SystemCase::NonlinearSoftening)
    }

    pub fn label(&self) -> &'static str {
        match self {
            SystemCase::Linear => "linear",
            SystemCase::LinearSoftening => "linear_softening",
            SystemCase::Nonlinear => "nonlinear",
            SystemCase::NonlinearSoftening => "nonlinear_softening",
        }
    }
}

impl std::str::FromStr for SystemCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "1" | "linear" => Ok(SystemCase::Linear),
            "2" | "linear_softening" => Ok(SystemCase::LinearSoftening),
            "3" | "nonlinear" => Ok(SystemCase::Nonlinear),
            "4" | "nonlinear_softening" => Ok(SystemCase::NonlinearSoftening),
            other => Err(Error::invalid(format!("unknown system case '{other}'"))),
        }
    }
}

impl std::fmt::Display for SystemCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub m1: f64,
    pub m2: f64,
    pub k1_const: f64,
    pub k1_soft_floor: f64,
    pub k1_soft_amp: f64,
    pub k1_soft_rate: f64,
    pub k2: f64,
    pub k3: f64,
}

impl SystemParams {
    pub fn for_case(case: SystemCase) -> Self {
        Self {
            m1: 5.0,
            m2: 10.0,
            k1_const: 30.0,
            k1_soft_floor: 10.0,
            k1_soft_amp: 30.0,
            k1_soft_rate: 0.05,
            k2: 50.0,
            k3: if case.is_nonlinear() { 20.0 } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.m1,
            self.m2,
            self.k1_const,
            self.k1_soft_floor,
            self.k1_soft_amp,
            self.k1_soft_rate,
            self.k2,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.k3 >= 0.0) {
            return Err(Error::invalid(format!("non-physical system parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x1: f64,
    pub v1: f64,
    pub x2: f64,
    pub v2: f64,
}

impl State {
    /// x1(0) = 0.1 m, x2(0) = 0.2 m, both at rest.
    pub fn reference_ics() -> Self {
        Self {
            x1: 0.1,
            v1: 0.0,
            x2: 0.2,
            v2: 0.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.v1, self.x2, self.v2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x1: a[0],
            v1: a[1],
            x2: a[2],
            v2: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn stiffness_k1(case: SystemCase, params: &SystemParams, t: f64) -> f64 {
    if case.is_softening() {
        params.k1_soft_floor + params.k1_soft_amp * (-params.k1_soft_rate * t).exp()
    } else {
        params.k1_const
    }
}

/// Time derivative `(x1', v1', x2', v2')` under force `f` on mass 1.
pub fn rhs(state: &State, t: f64, case: SystemCase, params: &SystemParams, f: f64) -> Result<State> {
    if !state.is_finite() || !f.is_finite() {
        return Err(Error::invalid(format!("non-finite state {state:?} at t = {t}")));
    }
    Ok(State::from_array(derivative(
        &state.to_array(),
        t,
        case,
        params,
        f,
    )))
}

#[inline]
fn derivative(y: &[f64; 4], t: f64, case: SystemCase, p: &SystemParams, f: f64) -> [f64; 4] {
    let k1 = stiffness_k1(case, p, t);
    let d = y[0] - y[2];
    let coupling = p.k2 * d + p.k3 * d * d * d;
    [
        y[1],
        (f - k1 * y[0] - coupling) / p.m1,
        y[3],
        coupling / p.m2,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 5_000_000,
        }
    }
}

/// Force applied between grid samples.
#[derive(Clone, Copy)]
pub enum Excitation<'a> {
    /// Exact continuous-time force.
    Analytic(&'a dyn Fn(f64) -> f64),
    /// Grid samples, linearly interpolated. The integrator stops at every
    /// grid point so no step straddles a kink of the interpolant.
    Sampled(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub forcing: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl Trajectory {
    pub fn displacement(&self, channel: usize) -> &[f64] {
        match channel {
            0 => &self.x1,
            1 => &self.x2,
            _ => panic!("displacement channel {channel} out of range"),
        }
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th minus 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension (Hairer, Norsett & Wanner)
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

type Vec4 = [f64; 4];

#[inline]
fn axpy(y: &Vec4, terms: &[(f64, &Vec4)], h: f64) -> Vec4 {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..4 {
            out[i] += h * c * k[i];
        }
    }
    out
}

fn finite(v: &Vec4) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Adaptive Dormand-Prince 5(4) with dense output at every grid time.
pub fn integrate(
    case: SystemCase,
    params: &SystemParams,
    grid: &TimeGrid,
    excitation: Excitation<'_>,
    ics: State,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    let states = integrate_states(case, params, grid, excitation, ics, opts)?;
    let forcing = match excitation {
        Excitation::Analytic(f) => (0..grid.n_steps).map(|i| f(grid.time(i))).collect(),
        Excitation::Sampled(s) => s.to_vec(),
    };
    Ok(Trajectory {
        grid: *grid,
        forcing,
        x1: states.iter().map(|s| s.x1).collect(),
        x2: states.iter().map(|s| s.x2).collect(),
    })
}

/// Full state at every grid time.
pub fn integrate_states(
    case: SystemCase,
    params: &SystemParams,
    grid: &TimeGrid,
    excitation: Excitation<'_>,
    ics: State,
    opts: &SolverOptions,
) -> Result<Vec<State>> {
    params.validate()?;
    if !ics.is_finite() {
        return Err(Error::invalid("initial conditions must be finite"));
    }
    let n = grid.n_steps;
    if let Excitation::Sampled(s) = excitation {
        if s.len() != n {
            return Err(Error::invalid(format!(
                "forcing has {} samples but the grid has {n}",
                s.len()
            )));
        }
    }
    let force = |t: f64| -> f64 {
        match excitation {
            Excitation::Analytic(f) => f(t),
            Excitation::Sampled(s) => {
                let u = ((t - grid.t0) / grid.dt).max(0.0);
                let i = (u.floor() as usize).min(n - 2);
                let frac = (u - i as f64).clamp(0.0, 1.0);
                s[i] + (s[i + 1] - s[i]) * frac
            }
        }
    };
    let stop_at_grid = matches!(excitation, Excitation::Sampled(_));
    let eval = |t: f64, y: &Vec4| derivative(y, t, case, params, force(t));

    let mut y = ics.to_array();
    let mut states = vec![ics; n];

    let t_end = grid.t_end();
    let mut t = grid.t0;
    let mut next_out = 1usize;
    let mut k1 = eval(t, &y);
    let mut h = initial_step(&eval, t, &y, &k1, opts).min(grid.dt);
    let mut steps = 0usize;
    let mut rejected_last = false;

    while next_out < n {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Integration {
                t,
                reason: format!("exceeded {} steps", opts.max_steps),
            });
        }
        let mut limit = t_end;
        if stop_at_grid {
            limit = grid.time(next_out);
        }
        let mut landing = false;
        if t + h >= limit - 1e-12 * limit.abs().max(1.0) {
            h = limit - t;
            landing = true;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::Integration {
                t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }

        let k2 = eval(t + C2 * h, &axpy(&y, &[(A21, &k1)], h));
        let k3 = eval(t + C3 * h, &axpy(&y, &[(A31, &k1), (A32, &k2)], h));
        let k4 = eval(t + C4 * h, &axpy(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], h));
        let k5 = eval(
            t + C5 * h,
            &axpy(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], h),
        );
        let k6 = eval(
            t + h,
            &axpy(
                &y,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
                h,
            ),
        );
        let y_new = axpy(
            &y,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
            h,
        );
        let k7 = eval(t + h, &y_new);

        let mut err = 0.0;
        let mut ok = finite(&y_new) && finite(&k7);
        if ok {
            for i in 0..4 {
                let e = h
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                err += (e / sc).powi(2);
            }
            err = (err / 4.0).sqrt();
            ok = err.is_finite();
        }

        if ok && err <= 1.0 {
            let t_new = if landing { limit } else { t + h };
            // dense output for every grid time in (t, t_new]
            let mut r5 = [0.0; 4];
            for i in 0..4 {
                r5[i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            while next_out < n {
                let tout = grid.time(next_out);
                let at_end = landing && (next_out == n - 1 || stop_at_grid);
                if tout > t_new && !at_end {
                    break;
                }
                let out = if at_end && tout >= t_new - 1e-9 * grid.dt {
                    y_new
                } else {
                    let theta = (tout - t) / h;
                    let theta1 = 1.0 - theta;
                    let mut v = [0.0; 4];
                    for i in 0..4 {
                        let r2 = y_new[i] - y[i];
                        let r3 = h * k1[i] - r2;
                        let r4 = r2 - h * k7[i] - r3;
                        v[i] = y[i] + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5[i])));
                    }
                    v
                };
                states[next_out] = State::from_array(out);
                next_out += 1;
                if at_end {
                    break;
                }
            }
            t = t_new;
            y = y_new;
            k1 = k7;
            let factor = if err == 0.0 {
                10.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
            };
            h *= if rejected_last { factor.min(1.0) } else { factor };
            // never step over more than one sample so short pulses are seen
            h = h.min(grid.dt);
            rejected_last = false;
        } else {
            let factor = if ok {
                (0.9 * err.powf(-0.2)).clamp(0.2, 1.0)
            } else {
                0.2
            };
            h *= factor;
            rejected_last = true;
        }
    }

    Ok(states)
}

fn initial_step(
    eval: &impl Fn(f64, &Vec4) -> Vec4,
    t: f64,
    y: &Vec4,
    f0: &Vec4,
    opts: &SolverOptions,
) -> f64 {
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let rms = |v: &Vec4| {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / 4.0).sqrt()
    };
    let d0 = rms(y);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = axpy(y, &[(1.0, f0)], h0);
    let f1 = eval(t + h0, &y1);
    let diff: Vec4 = std::array::from_fn(|i| f1[i] - f0[i]);
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

/// Integrates a stress or training forcing, using the closed form when the
/// signal has one and the interpolated samples otherwise.
pub fn integrate_forcing(
    case: SystemCase,
    params: &SystemParams,
    grid: &TimeGrid,
    spec: &ForcingSpec,
    ics: State,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    let samples = spec.sample(grid)?;
    let mut traj = if spec.closed_form(grid.t0, grid).is_some() {
        let f = |t: f64| spec.closed_form(t, grid).unwrap_or(0.0);
        integrate(case, params, grid, Excitation::Analytic(&f), ics, opts)?
    } else {
        integrate(case, params, grid, Excitation::Sampled(&samples), ics, opts)?
    };
    traj.forcing = samples;
    Ok(traj)
}

/// Training trajectory `index` of the dataset keyed by `seed`.
pub fn generate_sample(
    case: SystemCase,
    config: FreqConfig,
    grid: &TimeGrid,
    seed: u64,
    index: usize,
) -> Result<Trajectory> {
    let mut sub = rng::keyed(seed, index as u64);
    let spec = signals::draw_forcing(config, &mut sub);
    let params = SystemParams::for_case(case);
    let f = |t: f64| spec.eval(t);
    let mut traj = integrate(
        case,
        &params,
        grid,
        Excitation::Analytic(&f),
        State::reference_ics(),
        &SolverOptions::default(),
    )
    .map_err(|e| e.at_sample(index))?;
    traj.forcing = signals::sample_two_tone(&spec, grid);
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub case: SystemCase,
    pub config: FreqConfig,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Global index of `samples[0]`.
    pub start_index: usize,
    pub samples: Vec<Trajectory>,
    /// Statistics of the samples that fall in the training pool
    /// (global index below [`TEST_START`]); `None` if there are none.
    pub norm_stats: Option<NormStats>,
}

pub fn generate_dataset(case: SystemCase, config: FreqConfig, n_samples: usize, seed: u64) -> Result<Dataset> {
    generate_range(case, config, &TimeGrid::standard(), seed, 0, n_samples)
}

/// Samples `start .. start + n_samples` of the dataset keyed by `seed`.
pub fn generate_range(
    case: SystemCase,
    config: FreqConfig,
    grid: &TimeGrid,
    seed: u64,
    start: usize,
    n_samples: usize,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::invalid("a dataset needs at least one sample"));
    }
    let samples = (start..start + n_samples)
        .map(|i| generate_sample(case, config, grid, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset {
        case,
        config,
        grid: *grid,
        seed,
        start_index: start,
        samples,
        norm_stats: None,
    };
    ds.norm_stats = ds.pool_stats();
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    case: SystemCase,
    freq_config: FreqConfig,
    n_samples: usize,
    n_steps: usize,
    dt: f64,
    seed: u64,
    #[serde(default)]
    start_index: usize,
    channel_names: Vec<String>,
    norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn end_index(&self) -> usize {
        self.start_index + self.samples.len()
    }

    /// Sample by global index.
    pub fn get(&self, index: usize) -> Option<&Trajectory> {
        index
            .checked_sub(self.start_index)
            .and_then(|i| self.samples.get(i))
    }

    fn pool_stats(&self) -> Option<NormStats> {
        let pool: Vec<&Trajectory> = self
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| self.start_index + i < TEST_START)
            .map(|(_, t)| t)
            .collect();
        if pool.is_empty() {
            None
        } else {
            NormStats::from_trajectories(pool.into_iter()).ok()
        }
    }

    pub fn write<W: std::io::Write>(&self, w: W) -> Result<()> {
        let header = DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            case: self.case,
            freq_config: self.config,
            n_samples: self.samples.len(),
            n_steps: self.grid.n_steps,
            dt: self.grid.dt,
            seed: self.seed,
            start_index: self.start_index,
            channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            norm_stats: self.norm_stats.clone(),
        };
        let payload = self
            .samples
            .iter()
            .flat_map(|s| s.forcing.iter().copied())
            .chain(self.samples.iter().flat_map(|s| s.x1.iter().copied()))
            .chain(self.samples.iter().flat_map(|s| s.x2.iter().copied()));
        container::write(w, DATASET_MAGIC, &header, payload)
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let (h, payload): (DatasetHeader, Vec<f64>) = container::read(r, DATASET_MAGIC)?;
        if h.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format version {}",
                h.format_version
            )));
        }
        if h.channel_names != CHANNEL_NAMES {
            return Err(Error::Format(format!(
                "unexpected channel layout {:?}",
                h.channel_names
            )));
        }
        let grid = TimeGrid::new(h.dt, h.n_steps)?;
        let per_channel = h.n_samples * h.n_steps;
        if payload.len() != 3 * per_channel {
            return Err(Error::Format(format!(
                "payload holds {} values, header implies {}",
                payload.len(),
                3 * per_channel
            )));
        }
        let chan = |c: usize, s: usize| {
            let off = c * per_channel + s * h.n_steps;
            payload[off..off + h.n_steps].to_vec()
        };
        let samples = (0..h.n_samples)
            .map(|s| Trajectory {
                grid,
                forcing: chan(0, s),
                x1: chan(1, s),
                x2: chan(2, s),
            })
            .collect();
        Ok(Dataset {
            case: h.case,
            config: h.freq_config,
            grid,
            seed: h.seed,
            start_index: h.start_index,
            samples,
            norm_stats: h.norm_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Checks that every sample shared with `other` (by global index) is
    /// bit-identical and that both describe the same generator.
    pub fn is_prefix_consistent_with(&self, other: &Dataset) -> bool {
        if self.case != other.case
            || self.config != other.config
            || self.seed != other.seed
            || self.grid != other.grid
        {
            return false;
        }
        let lo = self.start_index.max(other.start_index);
        let hi = self.end_index().min(other.end_index());
        (lo..hi).all(|i| {
            let (a, b) = (self.get(i).unwrap(), other.get(i).unwrap());
            bits_equal(&a.forcing, &b.forcing)
                && bits_equal(&a.x1, &b.x1)
                && bits_equal(&a.x2, &b.x2)
        })
    }
}

pub(crate) fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
