//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The training criteria run at desk scale with capped epochs and share a
//! lock so they do not compete for cores.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use fnodyn::autodiff::{Graph, Tensor, Var};
use fnodyn::dynamics::{self, Dataset, Excitation, SolverOptions, State, SystemCase, SystemParams};
use fnodyn::error::Result;
use fnodyn::fno::{self, FnoConfig, FnoModel};
use fnodyn::losses::{self, LossMode, SpectralLossConfig};
use fnodyn::lstm::{LstmConfig, LstmModel};
use fnodyn::metrics::{self, MetricsReport};
use fnodyn::model::{Checkpoint, Model};
use fnodyn::rng;
use fnodyn::signals::{self, FreqConfig, TimeGrid};
use fnodyn::spectral;
use fnodyn::training::{self, NormStats, TrainConfig};

static HEAVY: Mutex<()> = Mutex::new(());

const DATA_SEED: u64 = 2024;
const TEST_N: usize = 256;

/// Written straight to stdout so the line survives the harness capturing
/// the output of passing tests.
fn verdict(n: usize, title: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} ({title}): {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn normal_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
}

// ---------------------------------------------------------------- gradients

type OpFn<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;

/// Worst relative error between the tape gradient of `sum(op(x) * r)` and
/// central differences, taken per input as `max|ga - gn| / max|gn|`.
fn grad_error(inputs: &[Tensor], op: &OpFn, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars).unwrap();
    let r = normal_tensor(77, g.shape(out));
    let rc = g.constant(r.clone());
    let prod = g.mul(out, rc).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v).unwrap()).collect();

    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs);
            xs[i].data_mut()[j] = x0;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = numeric
            .iter()
            .zip(analytic[i].data())
            .fold(0.0f64, |m, (n, a)| m.max((n - a).abs()));
        worst = worst.max(if scale > 1e-12 { diff / scale } else { diff });
    }
    worst
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let x23 = normal_tensor(1, &[2, 3]);
    let y23 = normal_tensor(2, &[2, 3]);
    let row3 = normal_tensor(3, &[3]);
    let positive = map_tensor(&normal_tensor(4, &[2, 3]), |v| 0.5 + v.abs());
    // kinks of relu kept well away from the probes
    let off_zero = map_tensor(&x23, |v| v + 0.2 * v.signum());
    let a34 = normal_tensor(5, &[3, 4]);
    let b42 = normal_tensor(6, &[4, 2]);
    let a234 = normal_tensor(7, &[2, 3, 4]);
    let b245 = normal_tensor(8, &[2, 4, 5]);
    let b45 = normal_tensor(9, &[4, 5]);
    let a53 = normal_tensor(10, &[5, 3]);
    let sig = normal_tensor(11, &[2, 3, 16]);
    let odd = normal_tensor(12, &[2, 9]);
    let bins9 = normal_tensor(13, &[2, 3, 9, 2]);
    let bins4 = normal_tensor(14, &[2, 3, 4, 2]);
    let cx = normal_tensor(15, &[2, 3, 5, 2]);
    let cw = normal_tensor(16, &[3, 4, 5, 2]);
    let long = normal_tensor(17, &[2, 20]);
    let (lx, lh, lc) = (normal_tensor(18, &[2, 3]), normal_tensor(19, &[2, 4]), normal_tensor(20, &[2, 4]));
    let (wih, whh, lb) = (
        map_tensor(&normal_tensor(21, &[3, 16]), |v| 0.5 * v),
        map_tensor(&normal_tensor(22, &[4, 16]), |v| 0.5 * v),
        normal_tensor(23, &[16]),
    );

    let mut cases: Vec<(&str, Vec<Tensor>, OpFn, bool)> = vec![
        ("add", vec![x23.clone(), y23.clone()], Box::new(|g, v| g.add(v[0], v[1])), false),
        ("add broadcast", vec![x23.clone(), row3.clone()], Box::new(|g, v| g.add(v[0], v[1])), false),
        ("sub broadcast", vec![row3.clone(), x23.clone()], Box::new(|g, v| g.sub(v[0], v[1])), false),
        ("mul broadcast", vec![x23.clone(), row3.clone()], Box::new(|g, v| g.mul(v[0], v[1])), false),
        ("div", vec![y23.clone(), positive.clone()], Box::new(|g, v| g.div(v[0], v[1])), false),
        ("atan2", vec![x23.clone(), y23.clone()], Box::new(|g, v| g.atan2(v[0], v[1])), false),
        ("neg", vec![x23.clone()], Box::new(|g, v| Ok(g.neg(v[0]))), false),
        ("scale", vec![x23.clone()], Box::new(|g, v| Ok(g.scale(v[0], -1.7))), false),
        ("add_scalar", vec![x23.clone()], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))), false),
        ("square", vec![x23.clone()], Box::new(|g, v| Ok(g.square(v[0]))), false),
        ("sqrt", vec![positive.clone()], Box::new(|g, v| Ok(g.sqrt(v[0]))), false),
        ("exp", vec![x23.clone()], Box::new(|g, v| Ok(g.exp(v[0]))), false),
        ("tanh", vec![x23.clone()], Box::new(|g, v| Ok(g.tanh(v[0]))), false),
        ("sigmoid", vec![x23.clone()], Box::new(|g, v| Ok(g.sigmoid(v[0]))), false),
        ("gelu", vec![x23.clone()], Box::new(|g, v| Ok(g.gelu(v[0]))), false),
        ("relu", vec![off_zero.clone()], Box::new(|g, v| Ok(g.relu(v[0]))), false),
        ("matmul 2x2", vec![a34.clone(), b42.clone()], Box::new(|g, v| g.matmul(v[0], v[1])), false),
        ("matmul 3x2", vec![a234.clone(), b45.clone()], Box::new(|g, v| g.matmul(v[0], v[1])), false),
        ("matmul 2x3", vec![a53.clone(), normal_tensor(24, &[2, 3, 4])], Box::new(|g, v| g.matmul(v[0], v[1])), false),
        ("matmul 3x3", vec![a234.clone(), b245.clone()], Box::new(|g, v| g.matmul(v[0], v[1])), false),
        ("permute", vec![a234.clone()], Box::new(|g, v| g.permute(v[0], &[2, 0, 1])), false),
        ("transpose", vec![a234.clone()], Box::new(|g, v| g.transpose(v[0], 1, 2)), false),
        ("reshape", vec![a234.clone()], Box::new(|g, v| g.reshape(v[0], &[6, 4])), false),
        ("slice", vec![a234.clone()], Box::new(|g, v| g.slice(v[0], 2, 1, 2)), false),
        ("concat", vec![a234.clone(), normal_tensor(25, &[2, 1, 4])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1)), false),
        ("sum", vec![a234.clone()], Box::new(|g, v| Ok(g.sum(v[0]))), false),
        ("mean", vec![a234.clone()], Box::new(|g, v| Ok(g.mean(v[0]))), false),
        ("sum_axis", vec![a234.clone()], Box::new(|g, v| g.sum_axis(v[0], 1)), false),
        ("dropout", vec![a234.clone()], Box::new(|g, v| g.dropout(v[0], 0.3, true, 9)), false),
        ("frames", vec![long.clone()], Box::new(|g, v| g.frames(v[0], 8, 4)), false),
        (
            "lstm_cell",
            vec![lx, lh, lc, wih, whh, lb],
            Box::new(|g, v| g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])),
            false,
        ),
        ("complex_matmul", vec![cx.clone(), cw.clone()], Box::new(|g, v| g.complex_matmul(v[0], v[1])), false),
        ("rfft full", vec![sig.clone()], Box::new(|g, v| g.rfft(v[0], 9)), true),
        ("rfft truncated", vec![sig.clone()], Box::new(|g, v| g.rfft(v[0], 5)), true),
        ("rfft odd length", vec![odd.clone()], Box::new(|g, v| g.rfft(v[0], 5)), true),
        ("irfft full", vec![bins9], Box::new(|g, v| g.irfft(v[0], 16)), true),
        ("irfft truncated", vec![bins4], Box::new(|g, v| g.irfft(v[0], 16)), true),
        ("irfft odd length", vec![normal_tensor(26, &[2, 5, 2])], Box::new(|g, v| g.irfft(v[0], 9)), true),
        (
            "spectral conv",
            vec![sig.clone(), map_tensor(&normal_tensor(27, &[3, 4, 5, 2]), |v| 0.3 * v)],
            Box::new(|g, v| fno::spectral_conv(g, v[0], v[1], 5)),
            true,
        ),
    ];

    // LSTM unrolled over 16 steps, differentiated w.r.t. input and weights
    let lstm = LstmModel::init(
        LstmConfig { input_size: 1, hidden_size: 4, n_layers: 2, fc_sizes: vec![5], out_channels: 2 },
        3,
    )
    .unwrap();
    let np = lstm.params.len();
    let mut lstm_inputs: Vec<Tensor> = lstm.params.tensors().cloned().collect();
    lstm_inputs.push(normal_tensor(28, &[2, 1, 16]));
    cases.push((
        "lstm unroll 16",
        lstm_inputs,
        Box::new(move |g, v| lstm.forward(g, &v[..np], v[np], false)),
        false,
    ));

    // total loss of a small FNO, w.r.t. all weights
    let fcfg = FnoConfig { width: 8, n_modes: 4, n_blocks: 2, dropout_p: 0.0, ..Default::default() };
    let fno_model = FnoModel::init(fcfg, 4).unwrap();
    let nf = fno_model.params.len();
    let mut fno_inputs: Vec<Tensor> = fno_model.params.tensors().cloned().collect();
    fno_inputs.push(normal_tensor(29, &[2, 1, 64]));
    let truth = normal_tensor(30, &[2, 2, 64]);
    let stats = NormStats { mean: [0.0, 0.05, -0.1], std: [1.0, 0.6, 1.4] };
    let mode = LossMode::Spectrogram(SpectralLossConfig { n_fft: 32, hop: 16, f_max: 8.0, ..Default::default() });
    cases.push((
        "fno total_loss",
        fno_inputs,
        Box::new(move |g, v| {
            let y = fno_model.forward(g, &v[..nf], v[nf], false, 0)?;
            Ok(losses::total_loss(g, y, &truth, &mode, Some(&stats))?.total)
        }),
        true,
    ));

    let mut failures = Vec::new();
    let (mut worst_plain, mut worst_fft): (f64, f64) = (0.0, 0.0);
    for (name, inputs, op, fft) in &cases {
        let err = grad_error(inputs, op, 1e-6);
        let tol = if *fft { 1e-4 } else { 1e-5 };
        if *fft {
            worst_fft = worst_fft.max(err);
        } else {
            worst_plain = worst_plain.max(err);
        }
        if !(err <= tol) {
            failures.push(format!("{name}: {err:.2e}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} checks, worst {worst_plain:.1e} (non-FFT) / {worst_fft:.1e} (FFT), {secs:.1}s {failures:?}",
            cases.len()
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ physics

fn free_linear(grid: &TimeGrid, opts: &SolverOptions) -> Vec<State> {
    let params = SystemParams::for_case(SystemCase::Linear);
    let zero = |_t: f64| 0.0;
    dynamics::integrate_states(SystemCase::Linear, &params, grid, Excitation::Analytic(&zero), State::reference_ics(), opts)
        .unwrap()
}

fn energy(s: &State, p: &SystemParams) -> f64 {
    let d = s.x1 - s.x2;
    0.5 * p.m1 * s.v1 * s.v1 + 0.5 * p.m2 * s.v2 * s.v2 + 0.5 * p.k1_const * s.x1 * s.x1 + 0.5 * p.k2 * d * d
}

fn max_energy_drift(opts: &SolverOptions) -> f64 {
    let params = SystemParams::for_case(SystemCase::Linear);
    let states = free_linear(&TimeGrid::standard(), opts);
    let e0 = energy(&states[0], &params);
    states.iter().map(|s| (energy(s, &params) - e0).abs() / e0).fold(0.0, f64::max)
}

/// Natural frequencies in Hz from `det(K - w^2 M) = 0`.
fn eigenfrequencies(p: &SystemParams) -> (f64, f64) {
    let a = p.m1 * p.m2;
    let b = -(p.m1 * p.k2 + p.m2 * (p.k1_const + p.k2));
    let c = p.k1_const * p.k2;
    let disc = (b * b - 4.0 * a * c).sqrt();
    let lo = (-b - disc) / (2.0 * a);
    let hi = (-b + disc) / (2.0 * a);
    (lo.sqrt() / (2.0 * PI), hi.sqrt() / (2.0 * PI))
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Largest relative L2 change of first-sample trajectories, over every
/// case and forcing config, when both tolerances of `opts` are halved.
fn halving_change(opts: &SolverOptions) -> f64 {
    let grid = TimeGrid::standard();
    let tight = SolverOptions { rtol: opts.rtol / 2.0, atol: opts.atol / 2.0, ..*opts };
    let mut worst: f64 = 0.0;
    for case in SystemCase::ALL {
        for config in FreqConfig::ALL {
            let forcing = signals::draw_forcing(config, &mut rng::keyed(DATA_SEED, 0));
            let f = |t: f64| forcing.eval(t);
            let p = SystemParams::for_case(case);
            let a = dynamics::integrate(case, &p, &grid, Excitation::Analytic(&f), State::reference_ics(), opts).unwrap();
            let b = dynamics::integrate(case, &p, &grid, Excitation::Analytic(&f), State::reference_ics(), &tight).unwrap();
            worst = worst.max(rel_l2(&b.x1, &a.x1)).max(rel_l2(&b.x2, &a.x2));
        }
    }
    worst
}

#[test]
fn criterion_2_physics_suite() {
    let start = Instant::now();
    let params = SystemParams::for_case(SystemCase::Linear);
    let grid = TimeGrid::standard();
    let opts = SolverOptions::default();

    let drift = max_energy_drift(&opts);
    let energy_ok = drift <= 1e-6;

    let (f_lo, f_hi) = eigenfrequencies(&params);
    let eig_ok = (f_lo - 0.1976).abs() < 5e-5 && (f_hi - 0.7021).abs() < 5e-5;

    // summed x1 + x2 spectra so neither mode hides in a node of one channel
    let states = free_linear(&grid, &opts);
    let x1: Vec<f64> = states.iter().map(|s| s.x1).collect();
    let x2: Vec<f64> = states.iter().map(|s| s.x2).collect();
    let p1 = spectral::welch_psd(&x1, grid.sample_rate()).unwrap();
    let p2 = spectral::welch_psd(&x2, grid.sample_rate()).unwrap();
    let psd: Vec<f64> = p1.values.iter().zip(&p2.values).map(|(a, b)| a + b).collect();
    let bin = p1.freqs[1];
    let mut peaks: Vec<usize> = (1..psd.len() - 1).filter(|&k| psd[k] > psd[k - 1] && psd[k] >= psd[k + 1]).collect();
    peaks.sort_by(|a, b| psd[*b].total_cmp(&psd[*a]));
    let mut top: Vec<f64> = peaks.iter().take(2).map(|&k| p1.freqs[k]).collect();
    top.sort_by(f64::total_cmp);
    let peaks_ok = top.len() == 2 && (top[0] - f_lo).abs() <= bin && (top[1] - f_hi).abs() <= bin;

    let change = halving_change(&opts);
    let halving_ok = change < 1e-7;
    let secs = start.elapsed().as_secs_f64();
    let pass = energy_ok && eig_ok && peaks_ok && halving_ok && secs < 30.0;

    // the same two checks with tolerances a hundred times tighter, for context
    let fine = SolverOptions { rtol: 1e-10, atol: 1e-12, ..opts };
    let (fine_drift, fine_change) = (max_energy_drift(&fine), halving_change(&fine));
    verdict(
        2,
        "physics suite",
        pass,
        &format!(
            "at rtol {:e}: energy drift {drift:.2e}, tolerance-halving change {change:.2e}; \
             modes {f_lo:.4}/{f_hi:.4} Hz, PSD peaks {top:?} (bin {bin:.4}); {secs:.1}s. \
             At rtol 1e-10: drift {fine_drift:.1e}, halving change {fine_change:.1e}",
            opts.rtol
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ metrics

/// Periodic Hann Welch estimate by direct DFT sums.
fn naive_segments(x: &[f64]) -> (usize, Vec<Vec<(f64, f64)>>, f64) {
    let l = 256.min(x.len() / 4);
    let step = l / 2;
    let w: Vec<f64> = (0..l).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / l as f64).cos()).collect();
    let mut segs = Vec::new();
    let mut s = 0;
    while s + l <= x.len() {
        let spec = (0..=l / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..l {
                    let ang = -2.0 * PI * (k * n) as f64 / l as f64;
                    re += w[n] * x[s + n] * ang.cos();
                    im += w[n] * x[s + n] * ang.sin();
                }
                (re, im)
            })
            .collect();
        segs.push(spec);
        s += step;
    }
    (l, segs, w.iter().map(|v| v * v).sum())
}

fn naive_psd(x: &[f64], fs: f64) -> Vec<f64> {
    let (l, segs, u) = naive_segments(x);
    (0..=l / 2)
        .map(|k| {
            let c = if k == 0 || k == l / 2 { 1.0 } else { 2.0 };
            c * segs.iter().map(|s| s[k].0 * s[k].0 + s[k].1 * s[k].1).sum::<f64>() / (fs * u * segs.len() as f64)
        })
        .collect()
}

fn naive_coherence_score(a: &[f64], b: &[f64], fs: f64, f_max: f64) -> f64 {
    let (l, sa, _) = naive_segments(a);
    let (_, sb, _) = naive_segments(b);
    let mut vals = Vec::new();
    for k in 0..=l / 2 {
        if k as f64 * fs / l as f64 > f_max {
            break;
        }
        let (mut cr, mut ci, mut paa, mut pbb) = (0.0, 0.0, 0.0, 0.0);
        for (x, y) in sa.iter().zip(&sb) {
            cr += x[k].0 * y[k].0 + x[k].1 * y[k].1;
            ci += x[k].1 * y[k].0 - x[k].0 * y[k].1;
            paa += x[k].0 * x[k].0 + x[k].1 * x[k].1;
            pbb += y[k].0 * y[k].0 + y[k].1 * y[k].1;
        }
        let c = if paa * pbb > 0.0 { ((cr * cr + ci * ci) / (paa * pbb)).clamp(0.0, 1.0) } else { 0.0 };
        vals.push(c);
    }
    100.0 * vals.iter().sum::<f64>() / vals.len() as f64
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn criterion_3_metric_oracles() {
    let fs = 25.0;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for seed in 0..3 {
        let truth = normal_tensor(100 + seed, &[1500]).into_data();
        let noise = normal_tensor(200 + seed, &[1500]).into_data();
        // a filtered, scaled, noisy copy
        let pred: Vec<f64> = (0..1500)
            .map(|i| 0.8 * truth[i] + 0.3 * truth[i.saturating_sub(3)] + 0.4 * noise[i])
            .collect();

        let er = metrics::energy_ratio(&pred, &truth).unwrap();
        let er_oracle = rms(&pred) / rms(&truth);
        let sp = naive_psd(&pred, fs);
        let st = naive_psd(&truth, fs);
        let diff: Vec<f64> = sp.iter().zip(&st).map(|(a, b)| a - b).collect();
        let nrmse_oracle = 100.0 * rms(&diff) / rms(&st);
        let nrmse = metrics::psd_nrmse(&pred, &truth, fs).unwrap();
        let sc = metrics::coherence_score(&pred, &truth, fs, 4.0).unwrap();
        let sc_oracle = naive_coherence_score(&pred, &truth, fs, 4.0);
        let psd_lib = spectral::welch_psd(&pred, fs).unwrap().values;
        let psd_err = psd_lib.iter().zip(&sp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            / sp.iter().cloned().fold(0.0, f64::max);
        for e in [(er - er_oracle).abs(), (nrmse - nrmse_oracle).abs() / 100.0, (sc - sc_oracle).abs() / 100.0, psd_err] {
            worst = worst.max(e);
        }
    }
    ok &= worst <= 1e-10;

    let x = normal_tensor(300, &[2000]).into_data();
    let ident = metrics::ChannelMetrics::compute(&x, &x, fs, 4.0).unwrap();
    let ident_ok = ident.energy_ratio == 1.0 && ident.psd_nrmse == 0.0 && (ident.coherence - 100.0).abs() <= 1e-10;
    let mut scale_err: f64 = 0.0;
    for c in [0.25, 1.5, 3.0] {
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        scale_err = scale_err.max((metrics::energy_ratio(&cx, &x).unwrap() - c).abs());
    }
    let double: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let n2 = metrics::psd_nrmse(&double, &x, fs).unwrap();
    scale_err = scale_err.max((n2 - 300.0).abs());
    let scaling_ok = scale_err <= 1e-6;

    let pass = ok && ident_ok && scaling_ok;
    verdict(
        3,
        "metric oracles",
        pass,
        &format!("oracle error {worst:.1e}, identity {ident:?}, scaling error {scale_err:.1e}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------------- losses

fn loss_value(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn tone_batch(f0: f64, fs: f64, phase: f64, n: usize) -> Tensor {
    Tensor::new(vec![1, 1, n], (0..n).map(|i| (2.0 * PI * f0 * i as f64 / fs + phase).sin()).collect()).unwrap()
}

#[test]
fn criterion_4_loss_identities() {
    let cfg = SpectralLossConfig { n_fft: 128, hop: 64, f_max: 6.0, ..Default::default() };
    let mode = LossMode::Spectrogram(cfg);
    let stats = NormStats { mean: [0.0, 0.02, -0.01], std: [1.0, 0.3, 0.5] };
    let x = normal_tensor(400, &[2, 2, 512]);

    let zero = loss_value(|g| {
        let p = g.constant(x.clone());
        Ok(losses::total_loss(g, p, &x, &mode, Some(&stats))?.total)
    });
    let zero_ok = zero.abs() < 1e-6;

    // a phase error of 2 pi - d costs the same as d
    let fs = cfg.sample_rate;
    let f0 = 16.0 * fs / 128.0;
    let truth = tone_batch(f0, fs, 0.0, 1024);
    let phase_loss = |phi: f64| {
        loss_value(|g| {
            let p = g.constant(tone_batch(f0, fs, phi, 1024));
            losses::spec_phase_loss(g, p, &truth, &cfg)
        })
    };
    let d = 0.4;
    let (small, wrapped, turned) = (phase_loss(d), phase_loss(2.0 * PI - d), phase_loss(d + 2.0 * PI));
    let neg = phase_loss(-d);
    let wrap_ok = (small - neg).abs() <= 1e-6 * small
        && (wrapped - small).abs() <= 1e-6 * small
        && (turned - small).abs() <= 1e-9 * small
        && small < 1.05 * d * d;

    let twice = map_tensor(&x, |v| 2.0 * v);
    let mag = loss_value(|g| {
        let p = g.constant(twice.clone());
        losses::spec_mag_loss(g, p, &x, &cfg)
    });
    let mag_ok = (mag - 1.0).abs() <= 1e-6;

    let y = normal_tensor(401, &[2, 2, 512]);
    let endpoint = LossMode::Spectrogram(SpectralLossConfig { alpha: 1.0, ..cfg });
    let a = loss_value(|g| {
        let p = g.constant(y.clone());
        Ok(losses::total_loss(g, p, &x, &endpoint, Some(&stats))?.total)
    });
    let b = loss_value(|g| {
        let p = g.constant(y.clone());
        let t = g.constant(x.clone());
        losses::mse(g, p, t)
    });
    let direct = y.data().iter().zip(x.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
    let alpha_ok = a.to_bits() == b.to_bits() && (a - direct).abs() < 1e-14;

    let pass = zero_ok && wrap_ok && mag_ok && alpha_ok;
    verdict(
        4,
        "loss identities",
        pass,
        &format!(
            "L(x,x) = {zero:.1e}, phase loss at d/-d/2pi-d/2pi+d = {small:.4e}/{neg:.4e}/{wrapped:.4e}/{turned:.4e}, \
             L_mag(2x,x) = {mag:.9}, alpha=1 {a:.6e} vs mse {b:.6e}"
        ),
    );
    assert!(pass);
}

// ----------------------------------------------------------------- training

struct Run {
    report: MetricsReport,
    best_epoch: usize,
    epochs: usize,
    secs: f64,
}

impl Run {
    fn mean_er_dev(&self) -> f64 {
        self.report.channels.iter().map(|c| (c.energy_ratio - 1.0).abs()).sum::<f64>() / self.report.channels.len() as f64
    }

    fn mean_nrmse(&self) -> f64 {
        self.report.channels.iter().map(|c| c.psd_nrmse).sum::<f64>() / self.report.channels.len() as f64
    }

    fn summary(&self) -> String {
        let ch: Vec<String> = self
            .report
            .channels
            .iter()
            .map(|c| format!("ER {:.3} NRMSE {:.1}% SC {:.1}%", c.energy_ratio, c.psd_nrmse, c.coherence))
            .collect();
        format!("[{}] best {}/{} epochs, {:.0}s", ch.join("; "), self.best_epoch, self.epochs, self.secs)
    }
}

struct Protocol {
    case: SystemCase,
    config: FreqConfig,
    grid: TimeGrid,
    train_size: usize,
    max_epochs: usize,
    seed: u64,
    loss: LossMode,
}

fn run(p: &Protocol, model: Model) -> Run {
    let start = Instant::now();
    let data = dynamics::generate_range(p.case, p.config, &p.grid, DATA_SEED, 0, p.train_size).unwrap();
    let test = dynamics::generate_range(p.case, p.config, &p.grid, DATA_SEED, dynamics::TEST_START, TEST_N).unwrap();
    let cfg = TrainConfig { train_size: p.train_size, seed: p.seed, max_epochs: p.max_epochs, loss: p.loss, ..Default::default() };
    let out = training::train(model, &data, &cfg).unwrap();
    let forcings: Vec<&[f64]> = test.samples.iter().map(|s| s.forcing.as_slice()).collect();
    let preds = training::predict_physical(&out.model, &out.norm_stats, &forcings, 16).unwrap();
    let truths: Vec<Vec<Vec<f64>>> = test.samples.iter().map(|s| vec![s.x1.clone(), s.x2.clone()]).collect();
    let report = metrics::evaluate_testset(&preds, &truths, p.grid.sample_rate(), metrics::COHERENCE_F_MAX).unwrap();
    Run { report, best_epoch: out.best_epoch, epochs: out.history.len(), secs: start.elapsed().as_secs_f64() }
}

fn fno(seed: u64) -> Model {
    Model::Fno(FnoModel::init(FnoConfig::default(), seed).unwrap())
}

#[test]
fn criterion_5_linear_trend() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let p = Protocol {
        case: SystemCase::Linear,
        config: FreqConfig::LowFreq,
        grid: TimeGrid::standard(),
        train_size: 64,
        max_epochs: 40,
        seed: 0,
        loss: LossMode::MseOnly,
    };
    let r = run(&p, fno(0));
    let pass = r.report.channels.iter().all(|c| (0.93..=1.07).contains(&c.energy_ratio) && c.psd_nrmse < 20.0);
    verdict(5, "linear trend, case 1 config C", pass, &r.summary());
    assert!(pass);
}

#[test]
fn criterion_6_nonlinearity_gap() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let proto = |case| Protocol {
        case,
        config: FreqConfig::Broadband,
        grid: TimeGrid::standard(),
        train_size: 64,
        max_epochs: 40,
        seed: 0,
        loss: LossMode::MseOnly,
    };
    let linear = run(&proto(SystemCase::Linear), fno(0));
    let nonlinear = run(&proto(SystemCase::Nonlinear), fno(0));
    let nrmse_ratio = nonlinear.mean_nrmse() / linear.mean_nrmse();
    let er_ratio = nonlinear.mean_er_dev() / linear.mean_er_dev();
    let pass = nrmse_ratio >= 2.0 && er_ratio >= 2.0;
    verdict(
        6,
        "nonlinearity gap, config A",
        pass,
        &format!(
            "NRMSE ratio {nrmse_ratio:.2}, |ER-1| ratio {er_ratio:.2}; case 1 {}; case 3 {}",
            linear.summary(),
            nonlinear.summary()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_spectrogram_loss_benefit() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let (mut spec_dev, mut mse_dev) = (0.0, 0.0);
    let mut lines = Vec::new();
    for seed in 0..3 {
        for (label, loss) in [
            ("spectrogram", LossMode::Spectrogram(SpectralLossConfig::default())),
            ("mse", LossMode::MseOnly),
        ] {
            let p = Protocol {
                case: SystemCase::Nonlinear,
                config: FreqConfig::Broadband,
                grid: TimeGrid::standard(),
                train_size: 128,
                max_epochs: 15,
                seed,
                loss,
            };
            let r = run(&p, fno(seed));
            if label == "mse" {
                mse_dev += r.mean_er_dev() / 3.0;
            } else {
                spec_dev += r.mean_er_dev() / 3.0;
            }
            lines.push(format!("seed {seed} {label} {}", r.summary()));
        }
    }
    let pass = spec_dev < mse_dev;
    verdict(
        7,
        "spectrogram loss benefit",
        pass,
        &format!("mean |ER-1| spectrogram {spec_dev:.3} vs mse {mse_dev:.3}; {}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_8_lstm_baseline_ordering() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let p = Protocol {
        case: SystemCase::Linear,
        config: FreqConfig::Broadband,
        grid: TimeGrid::new(0.04, 2000).unwrap(),
        train_size: 128,
        max_epochs: 10,
        seed: 0,
        loss: LossMode::MseOnly,
    };
    let f = run(&p, fno(0));
    let l = run(&p, Model::Lstm(LstmModel::init(LstmConfig::default(), 0).unwrap()));
    let pass = l.mean_nrmse() > f.mean_nrmse();
    verdict(
        8,
        "LSTM baseline ordering, 2000 steps",
        pass,
        &format!("PSD NRMSE lstm {:.1}% vs fno {:.1}%; fno {}; lstm {}", l.mean_nrmse(), f.mean_nrmse(), f.summary(), l.summary()),
    );
    assert!(pass);
}

// -------------------------------------------------------------- determinism

fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    ds.write(&mut buf).unwrap();
    buf
}

fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    buf
}

fn tiny_training(data: &Dataset, model: Model) -> (Vec<u8>, Vec<u8>) {
    let cfg = TrainConfig { train_size: 8, batch_size: 4, max_epochs: 3, seed: 11, ..Default::default() };
    let out = training::train(model, data, &cfg).unwrap();
    let ck = Checkpoint {
        model: out.model,
        norm_stats: Some(out.norm_stats),
        provenance: serde_json::json!({ "seed": 11 }),
    };
    let mut hist = Vec::new();
    training::write_history_csv(&mut hist, &out.history).unwrap();
    (checkpoint_bytes(&ck), hist)
}

#[test]
fn criterion_9_determinism_and_formats() {
    let _lock = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let grid = TimeGrid::standard();
    let mut problems = Vec::new();

    let a = dynamics::generate_range(SystemCase::NonlinearSoftening, FreqConfig::Broadband, &grid, 5, 0, 6).unwrap();
    let b = dynamics::generate_range(SystemCase::NonlinearSoftening, FreqConfig::Broadband, &grid, 5, 0, 6).unwrap();
    let path = dir.path().join("a.fnod");
    a.save(&path).unwrap();
    let reloaded = Dataset::load(&path).unwrap();
    if dataset_bytes(&a) != dataset_bytes(&b) || std::fs::read(&path).unwrap() != dataset_bytes(&reloaded) {
        problems.push("dataset bytes differ");
    }

    let short = TimeGrid::new(0.04, 512).unwrap();
    let data = dynamics::generate_range(SystemCase::Linear, FreqConfig::Broadband, &short, 5, 0, 8).unwrap();
    let small_fno = || Model::Fno(FnoModel::init(FnoConfig { width: 8, n_modes: 8, n_blocks: 2, ..Default::default() }, 1).unwrap());
    let small_lstm = || {
        Model::Lstm(
            LstmModel::init(LstmConfig { hidden_size: 8, n_layers: 1, fc_sizes: vec![8], ..Default::default() }, 1).unwrap(),
        )
    };
    for make in [&small_fno as &dyn Fn() -> Model, &small_lstm] {
        let (ck1, h1) = tiny_training(&data, make());
        let (ck2, h2) = tiny_training(&data, make());
        if ck1 != ck2 {
            problems.push("checkpoint bytes differ across reruns");
        }
        if h1 != h2 {
            problems.push("loss history differs across reruns");
        }
        let p = dir.path().join("m.fnoc");
        std::fs::write(&p, &ck1).unwrap();
        let again = checkpoint_bytes(&Checkpoint::load(&p).unwrap());
        if again != ck1 {
            problems.push("checkpoint save-load-save differs");
        }
    }

    let start = Instant::now();
    let small = dynamics::generate_dataset(SystemCase::Linear, FreqConfig::Broadband, 64, DATA_SEED).unwrap();
    let full = dynamics::generate_dataset(SystemCase::Linear, FreqConfig::Broadband, 4096, DATA_SEED).unwrap();
    if !small.is_prefix_consistent_with(&full) {
        problems.push("64-sample dataset is not a prefix of the 4096-sample dataset");
    }
    let gen_secs = start.elapsed().as_secs_f64();

    let pass = problems.is_empty();
    verdict(
        9,
        "determinism and formats",
        pass,
        &format!("datasets, FNO/LSTM checkpoints and histories compared; 4096 pool in {gen_secs:.0}s {problems:?}"),
    );
    assert!(pass);
}
