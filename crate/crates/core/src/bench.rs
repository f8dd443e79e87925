//! Benchmark orchestration: turns one seeded scenario into a measurement
//! log, runs every estimator over it and scores them under a common
//! protocol.
//!
//! The protocol mirrors deployment. Classical estimators (raw
//! multilateration, the adaptive filter) run over the whole timeline;
//! learned estimators train on the leading windows, validate on the middle
//! slice and are only ever scored on the trailing test windows, chained
//! from a single known position at the test start. All error statistics
//! are computed on that shared test span, so the numbers in one report row
//! are directly comparable to the numbers in any other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::akf::{run_akf, AkfConfig, AkfError};
use crate::augment::{
    extract_residuals, residual_windows, train_diffusion, AugmentError, DganAugmentor,
    DiffusionConfig, DiffusionModel, ResidualRecord,
};
use crate::bilstm::{
    self, build_bilstm_windows, BilstmConfig, BilstmNet, BilstmWindow, TrainedBilstm,
};
use crate::eval::{error_stats, gate_analysis, ErrorReport, EvalError, GateAnalysis};
use crate::fusionnet::{
    self, build_windows, split_windows, EpochStats, FusionNet, FusionTrainConfig, FusionWindow,
    Split, TrainError, TrainedFusion, WindowAugmentor, WindowError,
};
use crate::imuprep::{optimize_bias, world_accel_series, BiasPoly, ImuPrepError};
use crate::neural::NeuralError;
use crate::sim::{generate, MeasurementLog, PosSample, Scenario, SimError};
use crate::trilat::{group_epochs, solve_epochs, EpochFix};
use crate::Vec3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    ImuPrep(#[from] ImuPrepError),
    #[error(transparent)]
    Akf(#[from] AkfError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("unknown method `{0}`; expected one of uwb-only, akf, bilstm, fusionnet, fusionnet-dgan")]
    UnknownMethod(String),
    #[error("log carries no reference fixes; bias optimisation needs both endpoints")]
    NoReference,
}

/// Estimators the workbench can run against one another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Raw per-epoch multilateration, no filtering.
    #[serde(rename = "uwb-only")]
    UwbOnly,
    /// Loosely coupled adaptive Kalman filter over fixes and acceleration.
    #[serde(rename = "akf")]
    Akf,
    /// Loosely coupled bidirectional LSTM over acceleration and fix fills.
    #[serde(rename = "bilstm")]
    Bilstm,
    /// Tightly coupled gated fusion network over raw ranges.
    #[serde(rename = "fusionnet")]
    FusionNet,
    /// The fusion network trained with diffusion residual augmentation.
    #[serde(rename = "fusionnet-dgan")]
    FusionNetDgan,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::UwbOnly,
        Method::Akf,
        Method::Bilstm,
        Method::FusionNet,
        Method::FusionNetDgan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::UwbOnly => "uwb-only",
            Method::Akf => "akf",
            Method::Bilstm => "bilstm",
            Method::FusionNet => "fusionnet",
            Method::FusionNetDgan => "fusionnet-dgan",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BenchError::UnknownMethod(s.to_string()))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings for one benchmark run. The defaults are desk scale: small
/// enough to train every method on a single CPU core in minutes while
/// keeping each method's structure intact. Larger dimensions are reached
/// through the same fields, nothing else changes.
///
/// The bench slices all window sets at its own `window` length so every
/// method shares slot boundaries and the test span; the window fields
/// inside the per-model configs are ignored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Ranging slots per training/inference window.
    pub window: usize,
    pub fusion: FusionTrainConfig,
    pub bilstm: BilstmConfig,
    pub diffusion: DiffusionConfig,
    pub akf: AkfConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            window: 64,
            fusion: desk_fusion_config(),
            bilstm: desk_bilstm_config(),
            diffusion: DiffusionConfig::default(),
            akf: AkfConfig::default(),
        }
    }
}

/// Fusion settings sized for a single CPU core.
pub fn desk_fusion_config() -> FusionTrainConfig {
    FusionTrainConfig {
        hidden: 24,
        max_epochs: 80,
        patience: 12,
        plateau: 6,
        ..FusionTrainConfig::default()
    }
}

/// Baseline LSTM settings sized for a single CPU core.
pub fn desk_bilstm_config() -> BilstmConfig {
    BilstmConfig {
        hidden: 16,
        max_epochs: 80,
        patience: 12,
        ..BilstmConfig::default()
    }
}

/// Everything derived from one seeded scenario before any estimator runs:
/// the measurement log, per-epoch fixes, bias-corrected world acceleration
/// and both window sets, plus the shared train/val/test split.
pub struct SeedRun {
    pub scenario: Scenario,
    pub log: MeasurementLog,
    pub fixes: Vec<EpochFix>,
    /// Bias correction fitted against the reference endpoints, and the
    /// endpoint cost it achieved.
    pub bias: BiasPoly,
    pub bias_cost: f64,
    pub accel: Vec<(f64, Vec3)>,
    pub fusion_windows: Vec<FusionWindow>,
    pub bilstm_windows: Vec<BilstmWindow>,
    pub split: Split,
    /// Closed time span covered by the test windows.
    pub test_span: (f64, f64),
    /// Ground truth at the start of the test span; the single position
    /// each learned method is granted for chained inference.
    pub test_anchor: [f64; 3],
}

/// Builds the shared per-seed inputs. Bias coefficients are fitted against
/// the reference endpoints (the deployment's surveyed start and end), so
/// every estimator downstream consumes the same corrected acceleration.
pub fn prepare(scenario: &Scenario, window: usize) -> Result<SeedRun, BenchError> {
    let log = generate(scenario)?;
    prepare_from_log(scenario, log, window)
}

/// Same preparation starting from an already materialized log, so callers
/// holding a log artifact on disk do not regenerate it.
pub fn prepare_from_log(
    scenario: &Scenario,
    log: MeasurementLog,
    window: usize,
) -> Result<SeedRun, BenchError> {
    let anchors: Vec<Vec3> = scenario
        .anchors
        .iter()
        .map(|a| Vec3::new(a[0], a[1], a[2]))
        .collect();
    let epochs = group_epochs(&log.uwb, 1.0 / scenario.uwb_rate);
    let fixes = solve_epochs(&anchors, &epochs);

    let first_ref = log.reference.first().ok_or(BenchError::NoReference)?;
    let last_ref = log.reference.last().unwrap();
    let (bias, bias_cost) = optimize_bias(
        &log.imu,
        scenario.imu.mount_rotvec,
        first_ref.position_vec(),
        last_ref.position_vec(),
    )?;
    let accel = world_accel_series(&log.imu, &bias, scenario.imu.mount_rotvec);

    let fusion_windows = build_windows(
        &log,
        &accel,
        scenario.uwb_rate,
        window,
        scenario.anchors.len(),
    )?;
    let bilstm_windows = build_bilstm_windows(&log, &accel, &fixes, scenario.uwb_rate, window)?;
    let split = split_windows(fusion_windows.len())?;

    let first_test = &fusion_windows[split.test.start];
    let last = fusion_windows.last().unwrap();
    let test_span = (first_test.t0, last.t0 + last.steps() as f64 * last.dt);
    let test_anchor = first_test.truth[0];

    Ok(SeedRun {
        scenario: scenario.clone(),
        log,
        fixes,
        bias,
        bias_cost,
        accel,
        fusion_windows,
        bilstm_windows,
        split,
        test_span,
        test_anchor,
    })
}

/// One estimator's scored output on a prepared run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    /// Error statistics over the test span.
    pub report: ErrorReport,
    /// The estimate samples inside the test span, exactly as scored.
    pub estimate: Vec<PosSample>,
    /// Gate trace over the full timeline; fusion methods only.
    pub gates: Option<GateAnalysis>,
    /// Per-epoch training history; learned methods only.
    pub history: Option<Vec<EpochStats>>,
}

fn clip_to_span(samples: &[PosSample], span: (f64, f64)) -> Vec<PosSample> {
    // span endpoints land on grid times; the margin only absorbs the
    // rounding between k/rate and t0 + k*dt
    const EDGE: f64 = 1e-9;
    samples
        .iter()
        .filter(|s| s.t >= span.0 - EDGE && s.t <= span.1 + EDGE)
        .cloned()
        .collect()
}

/// Slot-boundary times across the windowed part of the log, computed as
/// `k / rate` exactly like the simulator's timestamps.
fn slot_grid(run: &SeedRun) -> Vec<f64> {
    let per = run.fusion_windows.first().map_or(0, FusionWindow::steps);
    let n_slots = run.fusion_windows.len() * per;
    (0..=n_slots)
        .map(|k| k as f64 / run.scenario.uwb_rate)
        .collect()
}

/// Raw multilateration: every fix the epoch solver produced, unfiltered.
/// Gaps (full outages, skipped singular epochs) contribute no samples;
/// underdetermined fixes stay in, errors and all.
pub fn run_uwb_only(run: &SeedRun) -> Result<MethodRun, BenchError> {
    let samples: Vec<PosSample> = run
        .fixes
        .iter()
        .map(|f| PosSample {
            t: f.t,
            position: f.fix.position,
        })
        .collect();
    let estimate = clip_to_span(&samples, run.test_span);
    let report = error_stats(Method::UwbOnly.name(), &estimate, &run.log.truth)?;
    Ok(MethodRun {
        method: Method::UwbOnly,
        report,
        estimate,
        gates: None,
        history: None,
    })
}

/// Loosely coupled filter baseline. The filter consumes four-anchor
/// converged fixes plus corrected acceleration over the whole timeline
/// (a warm filter is the realistic comparison), then is scored on the
/// test span like everything else.
pub fn run_akf_method(run: &SeedRun, cfg: &AkfConfig) -> Result<MethodRun, BenchError> {
    let grid = slot_grid(run);
    let estimates = run_akf(&run.accel, &run.fixes, &grid, cfg)?;
    let samples: Vec<PosSample> = estimates
        .iter()
        .map(|e| PosSample {
            t: e.t,
            position: [e.position.x, e.position.y, e.position.z],
        })
        .collect();
    let estimate = clip_to_span(&samples, run.test_span);
    let report = error_stats(Method::Akf.name(), &estimate, &run.log.truth)?;
    Ok(MethodRun {
        method: Method::Akf,
        report,
        estimate,
        gates: None,
        history: None,
    })
}

/// Trains the baseline LSTM and scores chained inference over the test
/// windows.
pub fn run_bilstm_method(
    run: &SeedRun,
    cfg: &BilstmConfig,
    seed: u64,
) -> Result<(TrainedBilstm, MethodRun), BenchError> {
    let trained = bilstm::train(&run.bilstm_windows, cfg, seed)?;
    debug_assert_eq!(trained.split, run.split);
    let mut scored = score_bilstm(run, &trained.model)?;
    scored.history = Some(trained.history.clone());
    Ok((trained, scored))
}

/// Scores an already trained LSTM on the run's test windows.
pub fn score_bilstm(run: &SeedRun, model: &BilstmNet) -> Result<MethodRun, BenchError> {
    let test = &run.bilstm_windows[run.split.test.clone()];
    let estimate = bilstm::infer(model, test, run.test_anchor)?;
    let report = error_stats(Method::Bilstm.name(), &estimate, &run.log.truth)?;
    Ok(MethodRun {
        method: Method::Bilstm,
        report,
        estimate,
        gates: None,
        history: None,
    })
}

/// Trains the fusion network and scores chained inference over the test
/// windows. The gate trace is collected over the full timeline so gate
/// behaviour can be related to outages wherever they fall.
pub fn run_fusion_method(
    run: &SeedRun,
    cfg: &FusionTrainConfig,
    seed: u64,
    augmentor: Option<&mut dyn WindowAugmentor>,
    method: Method,
) -> Result<(TrainedFusion, MethodRun), BenchError> {
    let trained = fusionnet::train(&run.fusion_windows, cfg, seed, augmentor)?;
    debug_assert_eq!(trained.split, run.split);
    let mut scored = score_fusion(run, &trained.model, method)?;
    scored.history = Some(trained.history.clone());
    Ok((trained, scored))
}

/// Scores an already trained fusion network: chained inference over the
/// test windows for the error report, plus a full-timeline pass for the
/// gate trace.
pub fn score_fusion(
    run: &SeedRun,
    model: &FusionNet,
    method: Method,
) -> Result<MethodRun, BenchError> {
    let test = &run.fusion_windows[run.split.test.clone()];
    let est = fusionnet::infer(model, test, run.test_anchor)?;
    let report = error_stats(method.name(), &est.samples, &run.log.truth)?;

    let full = fusionnet::infer(model, &run.fusion_windows, run.fusion_windows[0].truth[0])?;
    let gates = gate_analysis(&full.gate_series);
    Ok(MethodRun {
        method,
        report,
        estimate: est.samples,
        gates: Some(gates),
        history: None,
    })
}

/// Splits the run's ranging residuals at the validation boundary: records
/// from the training span feed the generator, everything later is held
/// out for distribution comparisons.
pub fn residual_split(
    run: &SeedRun,
) -> Result<(Vec<ResidualRecord>, Vec<ResidualRecord>), BenchError> {
    let records = extract_residuals(&run.log, &run.scenario.anchors)?;
    let t_holdout = run.fusion_windows[run.split.val.start].t0;
    Ok(records.into_iter().partition(|r| r.t < t_holdout))
}

/// Trains the residual diffusion model on training-span windows and
/// returns it together with the held-out residual records.
pub fn train_residual_model(
    run: &SeedRun,
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<(DiffusionModel, Vec<ResidualRecord>), BenchError> {
    let (train_records, holdout) = residual_split(run)?;
    let stride = (cfg.window / 2).max(1);
    let corpus = residual_windows(&train_records, cfg.window, stride);
    let model = train_diffusion(&corpus, cfg, seed)?;
    Ok((model, holdout))
}

/// Fusion training with diffusion residual augmentation: fits the
/// generator on training-span residuals, then trains the fusion network
/// with the curriculum injector plugged in.
pub fn run_fusion_dgan(
    run: &SeedRun,
    cfg: &FusionTrainConfig,
    diffusion: &DiffusionConfig,
    seed: u64,
) -> Result<(TrainedFusion, MethodRun), BenchError> {
    let (model, _) = train_residual_model(run, diffusion, seed)?;
    let mut augmentor = DganAugmentor::new(model, run.scenario.anchors.clone(), seed);
    run_fusion_method(run, cfg, seed, Some(&mut augmentor), Method::FusionNetDgan)
}

/// Runs one named method end to end on a prepared run.
pub fn run_method(
    run: &SeedRun,
    method: Method,
    cfg: &BenchConfig,
    seed: u64,
) -> Result<MethodRun, BenchError> {
    match method {
        Method::UwbOnly => run_uwb_only(run),
        Method::Akf => run_akf_method(run, &cfg.akf),
        Method::Bilstm => run_bilstm_method(run, &cfg.bilstm, seed).map(|(_, m)| m),
        Method::FusionNet => {
            run_fusion_method(run, &cfg.fusion, seed, None, Method::FusionNet).map(|(_, m)| m)
        }
        Method::FusionNetDgan => {
            run_fusion_dgan(run, &cfg.fusion, &cfg.diffusion, seed).map(|(_, m)| m)
        }
    }
}

/// One cell of the gate/decay ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub use_aoi: bool,
    pub use_gate: bool,
    pub report: ErrorReport,
}

/// Trains the four gate/decay combinations under otherwise identical
/// settings. Training is deterministic in (config, seed), so the first
/// row reproduces a standalone unablated run bit for bit and ablation
/// tables line up with headline numbers.
pub fn ablate(
    run: &SeedRun,
    cfg: &FusionTrainConfig,
    seed: u64,
) -> Result<Vec<AblationRow>, BenchError> {
    let grid = [
        ("full", true, true),
        ("aoi-off", false, true),
        ("att-off", true, false),
        ("aoi-off-att-off", false, false),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (label, use_aoi, use_gate) in grid {
        let mut c = cfg.clone();
        c.use_aoi = use_aoi;
        c.use_gate = use_gate;
        let (_, m) = run_fusion_method(run, &c, seed, None, Method::FusionNet)?;
        rows.push(AblationRow {
            label: label.to_string(),
            use_aoi,
            use_gate,
            report: m.report,
        });
    }
    Ok(rows)
}
