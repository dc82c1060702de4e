//! The `fnodyn` command line: dataset generation, training, evaluation,
//! stress tests and dataset-size sweeps.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, generate_range, Dataset, SolverOptions, State, SystemCase, SystemParams, TEST_END, TEST_START,
};
use crate::error::{Error, Result};
use crate::fno::{FnoConfig, FnoModel};
use crate::losses::{LossMode, SpectralLossConfig};
use crate::lstm::{LstmConfig, LstmModel};
use crate::metrics::{self, MetricsReport, COHERENCE_F_MAX};
use crate::model::{Checkpoint, Model, ModelKind, CHECKPOINT_FORMAT_VERSION};
use crate::signals::{Chirp, ForcingSpec, FreqConfig, Impulse, Step, TimeGrid};
use crate::training::{self, write_history_csv, EpochRecord, NormStats, TrainConfig};

pub const WORKERS_ENV: &str = "FNODYN_WORKERS";
pub const TOOL: &str = concat!("fnodyn ", env!("CARGO_PKG_VERSION"));

const SCHEMAS: &str = "\
CSV outputs start with '#' provenance lines, then a header row.

  evaluate, sweep: case,config,train_size,model,loss,channel,n_samples,
                   energy_ratio,psd_nrmse,coherence,status
      energy_ratio  RMS(pred) / RMS(truth), mean over test samples
      psd_nrmse     percent, Welch PSD error relative to RMS(PSD truth)
      coherence     percent, mean magnitude-squared coherence up to 4 Hz
      status        ok | failed: <reason> (failed rows leave metrics empty)
  train history:   epoch,train_loss,val_loss,lr
  stress:          signal,case,channel,energy_ratio,coherence
  predict, stress --series:
                   t,forcing,x1_true,x2_true,x1_pred,x2_pred

Sweep workers: set FNODYN_WORKERS (default 1).";

#[derive(Debug, Parser)]
#[command(name = "fnodyn", version, about = "Fourier neural operator surrogates for a forced two-mass oscillator", after_help = SCHEMAS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate a dataset and write it as FNOD1.
    Generate(GenerateArgs),
    /// Check that a dataset is a consistent prefix of another.
    Verify(VerifyArgs),
    /// Train one model; writes model.fnoc and history.csv.
    Train(TrainArgs),
    /// Metrics of a checkpoint on the held-out slice of a dataset.
    Evaluate(EvaluateArgs),
    /// Plot-ready prediction of one dataset sample.
    Predict(PredictArgs),
    /// Out-of-distribution test on a chirp, impulse or step forcing.
    Stress(StressArgs),
    /// Run a (case x config x train size) grid from a JSON spec.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub case: SystemCase,
    #[arg(long)]
    pub config: FreqConfig,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Global index of the first sample.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.04)]
    pub dt: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// The dataset to check.
    #[arg(long)]
    pub data: PathBuf,
    /// A dataset generated with the same seed; every sample the two share
    /// must be bit-identical.
    #[arg(long)]
    pub against: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Mse,
    Spectrogram,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "fno")]
    pub model: ModelKind,
    #[arg(long, value_enum, default_value_t = LossKind::Mse)]
    pub loss: LossKind,
    #[arg(long, default_value_t = 64)]
    pub train_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub micro_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.8)]
    pub subset_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = 25)]
    pub early_stop_patience: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub modes: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long)]
    pub no_positional: bool,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_mag: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_phase: f64,
    #[arg(long, default_value_t = 1024)]
    pub n_fft: usize,
    #[arg(long, default_value_t = 512)]
    pub hop: usize,
    #[arg(long, default_value_t = 4.0)]
    pub f_max: f64,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate only the first N held-out samples.
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Global sample index.
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StressSignal {
    Chirp,
    Impulse,
    Step,
}

impl StressSignal {
    pub fn label(&self) -> &'static str {
        match self {
            StressSignal::Chirp => "chirp",
            StressSignal::Impulse => "impulse",
            StressSignal::Step => "step",
        }
    }

    pub fn forcing(&self) -> ForcingSpec {
        match self {
            StressSignal::Chirp => ForcingSpec::Chirp { chirp: Chirp::stress_default(), amplitude: Chirp::DEFAULT_AMPLITUDE },
            StressSignal::Impulse => ForcingSpec::Impulse(Impulse::stress_default()),
            StressSignal::Step => ForcingSpec::Step(Step::stress_default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct StressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub signal: StressSignal,
    /// Plant for the ground truth; defaults to the case the model was trained on.
    #[arg(long)]
    pub case: Option<SystemCase>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the time series.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, env = WORKERS_ENV, default_value_t = 1)]
    pub workers: usize,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Stress(a) => cmd_stress(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

/// `# key: value` lines, no timestamps so reruns stay byte-identical.
pub fn provenance_header(command: &str, pairs: &[(&str, String)]) -> String {
    let mut s = format!("# {TOOL}\n# command: {command}\n");
    for (k, v) in pairs {
        let _ = writeln!(s, "# {k}: {v}");
    }
    let _ = writeln!(
        s,
        "# formats: FNOD1 v{}, FNOC1 v{}",
        dynamics::DATASET_FORMAT_VERSION,
        CHECKPOINT_FORMAT_VERSION
    );
    s
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let grid = TimeGrid::new(a.dt, a.steps)?;
    let ds = generate_range(a.case, a.config, &grid, a.seed, a.start, a.n)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.save(&a.out)?;
    eprintln!("wrote {} samples ({}..{}) to {}", ds.len(), ds.start_index, ds.end_index(), a.out.display());
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let d = Dataset::load(&a.data)?;
    let other = Dataset::load(&a.against)?;
    if !d.is_prefix_consistent_with(&other) {
        return Err(Error::Format(format!(
            "{} is not consistent with {}",
            a.data.display(),
            a.against.display()
        )));
    }
    println!(
        "ok: {} ({}..{}) agrees with {} ({}..{})",
        a.data.display(),
        d.start_index,
        d.end_index(),
        a.against.display(),
        other.start_index,
        other.end_index()
    );
    Ok(())
}

/// What one training run needs besides the data.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub model: ModelKind,
    pub fno: FnoConfig,
    pub lstm: LstmConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn build_model(&self) -> Result<Model> {
        Ok(match self.model {
            ModelKind::Fno => Model::Fno(FnoModel::init(self.fno.clone(), self.train.seed)?),
            ModelKind::Lstm => Model::Lstm(LstmModel::init(self.lstm.clone(), self.train.seed)?),
        })
    }
}

/// Trains and packs the result with its provenance.
pub fn train_checkpoint(
    data: &Dataset,
    spec: &RunSpec,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let model = spec.build_model()?;
    let out = training::train_with(model, data, &spec.train, on_epoch)?;
    let provenance = serde_json::json!({
        "tool": TOOL,
        "command": "train",
        "case": data.case,
        "freq_config": data.config,
        "data_seed": data.seed,
        "dt": data.grid.dt,
        "n_steps": data.grid.n_steps,
        "model": spec.model,
        "loss": spec.train.loss.label(),
        "train_size": spec.train.train_size,
        "seed": spec.train.seed,
        "train_config": spec.train,
        "best_epoch": out.best_epoch,
        "epochs_run": out.history.len(),
        "formats": {
            "dataset": format!("FNOD1 v{}", dynamics::DATASET_FORMAT_VERSION),
            "checkpoint": format!("FNOC1 v{CHECKPOINT_FORMAT_VERSION}"),
        },
    });
    let ck = Checkpoint { model: out.model, norm_stats: Some(out.norm_stats), provenance };
    Ok((ck, out.history))
}

pub fn write_history(path: &Path, history: &[EpochRecord], pairs: &[(&str, String)]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(provenance_header("train", pairs).as_bytes())?;
    write_history_csv(&mut w, history)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let loss = match a.loss {
        LossKind::Mse => LossMode::MseOnly,
        LossKind::Spectrogram => LossMode::Spectrogram(SpectralLossConfig {
            n_fft: a.n_fft,
            hop: a.hop,
            f_max: a.f_max,
            lambda_mag: a.lambda_mag,
            lambda_phase: a.lambda_phase,
            alpha: a.alpha,
            sample_rate: data.grid.sample_rate(),
            ..SpectralLossConfig::default()
        }),
    };
    let spec = RunSpec {
        model: a.model,
        fno: FnoConfig {
            width: a.width,
            n_modes: a.modes,
            n_blocks: a.blocks,
            dropout_p: a.dropout,
            positional_embedding: !a.no_positional,
            ..FnoConfig::default()
        },
        lstm: LstmConfig { hidden_size: a.hidden, n_layers: a.layers, ..LstmConfig::default() },
        train: TrainConfig {
            train_size: a.train_size,
            subset_fraction: a.subset_fraction,
            seed: a.seed,
            batch_size: a.batch_size,
            micro_batch: a.micro_batch,
            lr: a.lr,
            plateau_patience: a.plateau_patience,
            early_stop_patience: a.early_stop_patience,
            max_epochs: a.epochs,
            loss,
            ..TrainConfig::default()
        },
    };
    let quiet = a.quiet;
    let (ck, history) = train_checkpoint(&data, &spec, |r| {
        if !quiet {
            eprintln!("epoch {:4}  train {:.6e}  val {:.6e}  lr {:.3e}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
    })?;
    fs::create_dir_all(&a.out)?;
    ck.save(&a.out.join("model.fnoc"))?;
    let pairs = [
        ("case", data.case.to_string()),
        ("config", data.config.to_string()),
        ("data_seed", data.seed.to_string()),
        ("model", a.model.to_string()),
        ("loss", spec.train.loss.label().to_string()),
        ("train_size", a.train_size.to_string()),
        ("seed", a.seed.to_string()),
    ];
    write_history(&a.out.join("history.csv"), &history, &pairs)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn prov_str(ck: &Checkpoint, key: &str) -> String {
    match ck.provenance.get(key) {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(v) if !v.is_null() => v.to_string(),
        _ => String::new(),
    }
}

fn stats_of(ck: &Checkpoint) -> Result<&NormStats> {
    ck.norm_stats
        .as_ref()
        .ok_or_else(|| Error::Format("checkpoint carries no normalization statistics".into()))
}

/// Rejects data on a different grid from the one the model was trained on.
pub fn check_compatible(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    if ck.model.in_channels() != 1 || ck.model.out_channels() != 2 {
        return Err(Error::invalid(format!(
            "model maps {} to {} channels, datasets hold 1 forcing and 2 displacements",
            ck.model.in_channels(),
            ck.model.out_channels()
        )));
    }
    let dt = ck.provenance.get("dt").and_then(|v| v.as_f64());
    let n = ck.provenance.get("n_steps").and_then(|v| v.as_u64());
    if dt.is_some_and(|dt| dt != data.grid.dt) || n.is_some_and(|n| n as usize != data.grid.n_steps) {
        return Err(Error::invalid(format!(
            "checkpoint grid (dt {dt:?}, {n:?} steps) differs from data grid (dt {}, {} steps)",
            data.grid.dt, data.grid.n_steps
        )));
    }
    Ok(())
}

/// Indices of the held-out slice present in `data`, first `n_test` of them.
pub fn test_indices(data: &Dataset, n_test: Option<usize>) -> Result<Vec<usize>> {
    let lo = data.start_index.max(TEST_START);
    let hi = data.end_index().min(TEST_END);
    let mut idx: Vec<usize> = (lo..hi.max(lo)).collect();
    if let Some(n) = n_test {
        idx.truncate(n);
    }
    if idx.is_empty() {
        return Err(Error::invalid(format!(
            "dataset holds samples {}..{}, none in the held-out slice {TEST_START}..{TEST_END}",
            data.start_index,
            data.end_index()
        )));
    }
    Ok(idx)
}

/// Predictions and physical-unit truths of the selected samples.
pub fn predictions(ck: &Checkpoint, data: &Dataset, indices: &[usize]) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let stats = stats_of(ck)?;
    let mut forcings = Vec::with_capacity(indices.len());
    let mut truths = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = data.get(i).ok_or_else(|| Error::invalid(format!("sample {i} not in dataset")))?;
        forcings.push(s.forcing.as_slice());
        truths.push(vec![s.x1.clone(), s.x2.clone()]);
    }
    let preds = training::predict_physical(&ck.model, stats, &forcings, 8)?;
    Ok((preds, truths))
}

pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, n_test: Option<usize>) -> Result<MetricsReport> {
    check_compatible(ck, data)?;
    let idx = test_indices(data, n_test)?;
    let (preds, truths) = predictions(ck, data, &idx)?;
    metrics::evaluate_testset(&preds, &truths, data.grid.sample_rate(), COHERENCE_F_MAX).map_err(|e| match e {
        Error::Sample { index, source } => Error::Sample { index: idx[index], source },
        e => e,
    })
}

/// One line of an evaluation or sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: String,
    pub config: String,
    pub train_size: usize,
    pub model: String,
    pub loss: String,
    pub channel: String,
    pub n_samples: usize,
    pub energy_ratio: Option<f64>,
    pub psd_nrmse: Option<f64>,
    pub coherence: Option<f64>,
    pub status: String,
}

pub fn report_rows(ck: &Checkpoint, report: &MetricsReport) -> Vec<ReportRow> {
    let train_size = ck.provenance.get("train_size").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    report
        .channels
        .iter()
        .enumerate()
        .map(|(c, m)| ReportRow {
            case: prov_str(ck, "case"),
            config: prov_str(ck, "freq_config"),
            train_size,
            model: ck.model.kind().to_string(),
            loss: prov_str(ck, "loss"),
            channel: dynamics::CHANNEL_NAMES[c + 1].to_string(),
            n_samples: report.n_samples,
            energy_ratio: Some(m.energy_ratio),
            psd_nrmse: Some(m.psd_nrmse),
            coherence: Some(m.coherence),
            status: "ok".into(),
        })
        .collect()
}

pub fn write_rows<W: Write>(mut w: W, header: &str, rows: &[ReportRow]) -> Result<()> {
    w.write_all(header.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record([
            "case", "config", "train_size", "model", "loss", "channel", "n_samples", "energy_ratio", "psd_nrmse",
            "coherence", "status",
        ])?;
    }
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let report = evaluate_checkpoint(&ck, &data, a.n_test)?;
    let rows = report_rows(&ck, &report);
    let header = provenance_header(
        "evaluate",
        &[
            ("checkpoint_seed", prov_str(&ck, "seed")),
            ("data_case", data.case.to_string()),
            ("data_config", data.config.to_string()),
            ("data_seed", data.seed.to_string()),
            ("n_test", report.n_samples.to_string()),
        ],
    );
    write_rows(create(&a.out)?, &header, &rows)?;
    for r in &rows {
        println!(
            "{}: ER {:.4}  PSD NRMSE {:.2}%  SC {:.2}%",
            r.channel,
            r.energy_ratio.unwrap_or(f64::NAN),
            r.psd_nrmse.unwrap_or(f64::NAN),
            r.coherence.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn write_series(path: &Path, header: &str, grid: &TimeGrid, forcing: &[f64], truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(header.as_bytes())?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "forcing", "x1_true", "x2_true", "x1_pred", "x2_pred"])?;
    for i in 0..forcing.len() {
        out.write_record(
            [grid.time(i), forcing[i], truth[0][i], truth[1][i], pred[0][i], pred[1][i]].map(|v| v.to_string()),
        )?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    check_compatible(&ck, &data)?;
    let (preds, truths) = predictions(&ck, &data, &[a.index])?;
    let s = data.get(a.index).expect("checked by predictions");
    let header = provenance_header("predict", &[("index", a.index.to_string()), ("data_seed", data.seed.to_string())]);
    write_series(&a.out, &header, &data.grid, &s.forcing, &truths[0], &preds[0])
}

/// Ground truth, prediction and per-channel scores of one stress forcing.
#[derive(Debug, Clone)]
pub struct StressOutcome {
    pub grid: TimeGrid,
    pub forcing: Vec<f64>,
    pub truth: Vec<Vec<f64>>,
    pub pred: Vec<Vec<f64>>,
    pub energy_ratio: Vec<f64>,
    pub coherence: Vec<f64>,
}

/// Integrates `signal` on `case` from the reference initial state and
/// scores `predict` against it.
pub fn stress_test(
    case: SystemCase,
    signal: StressSignal,
    grid: &TimeGrid,
    predict: impl FnOnce(&[f64]) -> Result<Vec<Vec<f64>>>,
) -> Result<StressOutcome> {
    let spec = signal.forcing();
    spec.validate(grid)?;
    let traj = dynamics::integrate_forcing(
        case,
        &SystemParams::for_case(case),
        grid,
        &spec,
        State::reference_ics(),
        &SolverOptions::default(),
    )?;
    let truth = vec![traj.x1, traj.x2];
    let pred = predict(&traj.forcing)?;
    if pred.len() != 2 || pred.iter().any(|p| p.len() != grid.n_steps) {
        return Err(Error::shape("stress", "prediction must hold two full-length channels"));
    }
    let fs = grid.sample_rate();
    let mut energy_ratio = Vec::new();
    let mut coherence = Vec::new();
    for c in 0..2 {
        energy_ratio.push(metrics::energy_ratio(&pred[c], &truth[c])?);
        coherence.push(metrics::coherence_score(&pred[c], &truth[c], fs, COHERENCE_F_MAX)?);
    }
    Ok(StressOutcome { grid: *grid, forcing: traj.forcing, truth, pred, energy_ratio, coherence })
}

fn cmd_stress(a: &StressArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let stats = stats_of(&ck)?;
    let case = match a.case {
        Some(c) => c,
        None => prov_str(&ck, "case").parse().map_err(|_| {
            Error::invalid("checkpoint does not record its case; pass --case")
        })?,
    };
    let grid = match (
        ck.provenance.get("dt").and_then(|v| v.as_f64()),
        ck.provenance.get("n_steps").and_then(|v| v.as_u64()),
    ) {
        (Some(dt), Some(n)) => TimeGrid::new(dt, n as usize)?,
        _ => TimeGrid::standard(),
    };
    let out = stress_test(case, a.signal, &grid, |f| {
        Ok(training::predict_physical(&ck.model, stats, &[f], 1)?.remove(0))
    })?;
    let header = provenance_header(
        "stress",
        &[("signal", a.signal.label().to_string()), ("case", case.to_string()), ("checkpoint_seed", prov_str(&ck, "seed"))],
    );
    let mut w = create(&a.out)?;
    w.write_all(header.as_bytes())?;
    let mut csv_out = csv::Writer::from_writer(w);
    csv_out.write_record(["signal", "case", "channel", "energy_ratio", "coherence"])?;
    for c in 0..2 {
        csv_out.write_record([
            a.signal.label().to_string(),
            case.to_string(),
            dynamics::CHANNEL_NAMES[c + 1].to_string(),
            out.energy_ratio[c].to_string(),
            out.coherence[c].to_string(),
        ])?;
        println!("{}: ER {:.4}  SC {:.2}%", dynamics::CHANNEL_NAMES[c + 1], out.energy_ratio[c], out.coherence[c]);
    }
    csv_out.flush()?;
    if let Some(path) = &a.series {
        write_series(path, &header, &out.grid, &out.forcing, &out.truth, &out.pred)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_steps() -> usize {
    5000
}

fn default_dt() -> f64 {
    0.04
}

fn default_n_test() -> usize {
    TEST_END - TEST_START
}

/// A sweep description, read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(alias = "case")]
    pub cases: OneOrMany<SystemCase>,
    #[serde(alias = "freq_config")]
    pub configs: OneOrMany<FreqConfig>,
    pub train_sizes: Vec<usize>,
    #[serde(default)]
    pub loss: Option<LossMode>,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Fields merged over the default model configuration.
    #[serde(default)]
    pub model_config: serde_json::Map<String, serde_json::Value>,
    /// Fields merged over the default training configuration.
    #[serde(default)]
    pub training: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub seed: u64,
    /// Dataset seed; defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Restricts train sizes to 64, 128, ..., 2048.
    #[serde(default = "default_true")]
    pub paper_protocol: bool,
}

fn default_model() -> ModelKind {
    ModelKind::Fno
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, over: &serde_json::Map<String, serde_json::Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let serde_json::Value::Object(m) = &mut v {
        for (k, x) in over {
            if !m.contains_key(k) {
                return Err(Error::invalid(format!("unknown configuration field '{k}'")));
            }
            m.insert(k.clone(), x.clone());
        }
    }
    Ok(serde_json::from_value(v)?)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub case: SystemCase,
    pub config: FreqConfig,
    pub train_size: usize,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}-{}-{}", self.case, self.config, self.train_size)
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_sizes.is_empty() || self.cases.to_vec().is_empty() || self.configs.to_vec().is_empty() {
            return Err(Error::invalid("a sweep needs at least one case, config and train size"));
        }
        if self.paper_protocol {
            if let Some(s) = self.train_sizes.iter().find(|s| !(s.is_power_of_two() && (64..=2048).contains(*s))) {
                return Err(Error::invalid(format!("train size {s} is not one of 64, 128, ..., 2048")));
            }
        }
        if self.n_test == 0 || self.n_test > TEST_END - TEST_START {
            return Err(Error::invalid(format!("n_test {} outside 1..={}", self.n_test, TEST_END - TEST_START)));
        }
        Ok(())
    }

    /// Cells sorted by (case, config, size).
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for case in self.cases.to_vec() {
            for config in self.configs.to_vec() {
                for &train_size in &self.train_sizes {
                    cells.push(Cell { case, config, train_size });
                }
            }
        }
        cells.sort();
        cells.dedup();
        cells
    }

    pub fn run_spec(&self, cell: &Cell, grid: &TimeGrid) -> Result<RunSpec> {
        let mut loss = self.loss.unwrap_or(LossMode::MseOnly);
        if let LossMode::Spectrogram(cfg) = &mut loss {
            cfg.sample_rate = grid.sample_rate();
        }
        let mut train = merge(&TrainConfig::default(), &self.training)?;
        train.train_size = cell.train_size;
        train.seed = self.seed;
        train.loss = loss;
        let none = serde_json::Map::new();
        let pick = |kind| if self.model == kind { &self.model_config } else { &none };
        Ok(RunSpec {
            model: self.model,
            fno: merge(&FnoConfig::default(), pick(ModelKind::Fno))?,
            lstm: merge(&LstmConfig::default(), pick(ModelKind::Lstm))?,
            train,
        })
    }

    fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn pool_path(&self, case: SystemCase, config: FreqConfig) -> PathBuf {
        self.output_dir.join("data").join(format!("{case}-{config}-pool.fnod"))
    }

    pub fn test_path(&self, case: SystemCase, config: FreqConfig) -> PathBuf {
        self.output_dir.join("data").join(format!("{case}-{config}-test.fnod"))
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.output_dir.join("cells").join(cell.dir_name())
    }
}

pub const DONE_MARKER: &str = "done";
pub const FAILED_MARKER: &str = "failed";

/// Loads a cached dataset or generates and stores it.
fn cached_range(path: &Path, case: SystemCase, config: FreqConfig, grid: &TimeGrid, seed: u64, start: usize, n: usize) -> Result<Dataset> {
    if path.exists() {
        let d = Dataset::load(path)?;
        if d.case == case && d.config == config && d.seed == seed && d.grid == *grid && d.start_index == start && d.len() == n {
            return Ok(d);
        }
    }
    let d = generate_range(case, config, grid, seed, start, n)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    d.save(path)?;
    Ok(d)
}

fn run_cell(spec: &ExperimentSpec, cell: &Cell, pool: &Dataset, test: &Dataset) -> Result<Vec<ReportRow>> {
    let dir = spec.cell_dir(cell);
    fs::create_dir_all(&dir)?;
    let rs = spec.run_spec(cell, &pool.grid)?;
    let (ck, history) = train_checkpoint(pool, &rs, |_| {})?;
    ck.save(&dir.join("model.fnoc"))?;
    let pairs = [
        ("case", cell.case.to_string()),
        ("config", cell.config.to_string()),
        ("train_size", cell.train_size.to_string()),
        ("seed", spec.seed.to_string()),
    ];
    write_history(&dir.join("history.csv"), &history, &pairs)?;
    let report = evaluate_checkpoint(&ck, test, None)?;
    let rows = report_rows(&ck, &report);
    write_rows(create(&dir.join("metrics.csv"))?, &provenance_header("sweep", &pairs), &rows)?;
    Ok(rows)
}

fn failed_rows(spec: &ExperimentSpec, cell: &Cell, reason: &str) -> Vec<ReportRow> {
    let loss = spec.loss.unwrap_or(LossMode::MseOnly);
    dynamics::CHANNEL_NAMES[1..]
        .iter()
        .map(|ch| ReportRow {
            case: cell.case.to_string(),
            config: cell.config.to_string(),
            train_size: cell.train_size,
            model: spec.model.to_string(),
            loss: loss.label().to_string(),
            channel: ch.to_string(),
            n_samples: 0,
            energy_ratio: None,
            psd_nrmse: None,
            coherence: None,
            status: format!("failed: {}", reason.replace(['\n', '\r'], " ")),
        })
        .collect()
}

/// Runs every cell without a `done` marker, then rewrites `sweep.csv`
/// from the per-cell results. Returns the number of failed cells.
pub fn run_sweep(spec: &ExperimentSpec, workers: usize) -> Result<usize> {
    spec.validate()?;
    let grid = TimeGrid::new(spec.dt, spec.n_steps)?;
    let cells = spec.cells();
    fs::create_dir_all(&spec.output_dir)?;

    let pending: Vec<Cell> = cells
        .iter()
        .filter(|c| !spec.cell_dir(c).join(DONE_MARKER).exists())
        .copied()
        .collect();
    let mut data = Vec::new();
    for case in spec.cases.to_vec() {
        for config in spec.configs.to_vec() {
            if !pending.iter().any(|c| c.case == case && c.config == config) {
                continue;
            }
            let pool_n = spec.train_sizes.iter().copied().max().unwrap_or(1).min(TEST_START);
            let pool = cached_range(&spec.pool_path(case, config), case, config, &grid, spec.data_seed(), 0, pool_n)?;
            let test = cached_range(&spec.test_path(case, config), case, config, &grid, spec.data_seed(), TEST_START, spec.n_test)?;
            data.push(((case, config), pool, test));
        }
    }

    let next = AtomicUsize::new(0);
    let log = Mutex::new(());
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = pending.get(k) else { break };
        let (_, pool, test) = data
            .iter()
            .find(|(key, _, _)| *key == (cell.case, cell.config))
            .expect("data prepared for every pending cell");
        let dir = spec.cell_dir(cell);
        let _ = fs::remove_file(dir.join(FAILED_MARKER));
        let result = run_cell(spec, cell, pool, test);
        let _guard = log.lock();
        match result {
            Ok(_) => {
                let _ = fs::write(dir.join(DONE_MARKER), b"");
                eprintln!("cell {} done", cell.dir_name());
            }
            Err(e) => {
                let _ = fs::create_dir_all(&dir);
                let _ = fs::write(dir.join(FAILED_MARKER), e.to_string());
                eprintln!("cell {} failed: {e}", cell.dir_name());
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 1..workers.max(1).min(pending.len().max(1)) {
            s.spawn(work);
        }
        work();
    });

    let mut rows = Vec::new();
    let mut failures = 0;
    for cell in &cells {
        let dir = spec.cell_dir(cell);
        if dir.join(DONE_MARKER).exists() {
            rows.extend(read_rows(&dir.join("metrics.csv"))?);
        } else {
            failures += 1;
            let reason = fs::read_to_string(dir.join(FAILED_MARKER)).unwrap_or_else(|_| "not run".into());
            rows.extend(failed_rows(spec, cell, &reason));
        }
    }
    let header = provenance_header(
        "sweep",
        &[
            ("seed", spec.seed.to_string()),
            ("data_seed", spec.data_seed().to_string()),
            ("model", spec.model.to_string()),
            ("n_steps", spec.n_steps.to_string()),
            ("n_test", spec.n_test.to_string()),
        ],
    );
    write_rows(create(&spec.output_dir.join("sweep.csv"))?, &header, &rows)?;
    Ok(failures)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    let failures = run_sweep(&spec, a.workers)?;
    eprintln!(
        "wrote {} ({} of {} cells failed)",
        spec.output_dir.join("sweep.csv").display(),
        failures,
        spec.cells().len()
    );
    Ok(())
}
