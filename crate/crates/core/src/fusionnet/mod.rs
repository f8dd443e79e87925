//! Tightly coupled trajectory estimation: a gated recurrent network
//! consuming raw per-anchor ranges (with their ages) and bias-corrected
//! accelerations on a shared slot grid, trained to predict per-slot
//! displacements.
//!
//! Submodules: [`windows`] slices logs into training units, [`model`]
//! holds the network and loss, this file owns the training loop and
//! chained inference.

pub mod model;
pub mod windows;

pub use model::{
    accumulate, composite_loss, FusionArch, FusionNet, FusionVars, ForwardPass, LossWeights,
};
pub use windows::{
    build_windows, causal_fill, compute_aoi, split_windows, FusionWindow, NormStats, Split,
    WindowError,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::GateStep;
use crate::neural::optim::AdamW;
use crate::neural::tape::Tape;
use crate::neural::tensor::Tensor;
use crate::neural::NeuralError;
use crate::sim::PosSample;
use crate::sub_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: NeuralError },
}

/// Training hyperparameters. Architecture fields are duplicated here so a
/// single config block fully determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionTrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Early-stop patience on validation endpoint error, in epochs.
    pub patience: usize,
    /// Epochs without validation improvement before the rate is halved.
    pub plateau: usize,
    /// Epochs with the gate fixed at 0.5 and decay constants frozen.
    pub warmup_epochs: usize,
    pub use_aoi: bool,
    pub use_gate: bool,
    pub alpha_min: f64,
    pub loss: LossWeights,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            hidden: 128,
            embed: 3,
            lr: 3e-4,
            weight_decay: 1e-4,
            batch: 8,
            max_epochs: 150,
            patience: 20,
            plateau: 10,
            warmup_epochs: 3,
            use_aoi: true,
            use_gate: true,
            alpha_min: 0.8,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

pub struct TrainedFusion {
    pub model: FusionNet,
    pub history: Vec<EpochStats>,
    pub split: Split,
    pub best_epoch: usize,
}

/// Hook for replacing training windows with augmented variants. Called
/// once per window per epoch; returning `None` keeps the original.
pub trait WindowAugmentor {
    fn augment(&mut self, window: &FusionWindow, epoch: usize) -> Option<FusionWindow>;
}

/// Trains a fusion model on pre-built windows. The split is contiguous
/// 70/15/15; normalisation statistics come from the training slice only.
/// Validation selects the checkpoint; the test slice is never touched.
pub fn train(
    windows: &[FusionWindow],
    cfg: &FusionTrainConfig,
    seed: u64,
    mut augmentor: Option<&mut dyn WindowAugmentor>,
) -> Result<TrainedFusion, TrainError> {
    let split = split_windows(windows.len())?;
    let first = &windows[0];
    let arch = FusionArch {
        hidden: cfg.hidden,
        embed: cfg.embed,
        n_anchors: first.n_anchors(),
        window: first.steps(),
        dt: first.dt,
        use_aoi: cfg.use_aoi,
        use_gate: cfg.use_gate,
        alpha_min: cfg.alpha_min,
    };
    if arch.n_anchors == 0 {
        return Err(TrainError::TooSmall("windows carry no anchors".into()));
    }
    let stats = NormStats::compute(&windows[split.train.clone()], arch.n_anchors);
    let mut model = FusionNet::new(arch, stats, seed);
    let sizes: Vec<usize> = model.trainable().iter().map(|t| t.len()).collect();
    let decay_index = model.decay_param_index();
    let mut opt = AdamW::new(&sizes, cfg.lr, cfg.weight_decay);

    let train_idx: Vec<usize> = split.train.clone().collect();
    let val_idx: Vec<usize> = split.val.clone().collect();
    let n_params = sizes.len();

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Vec<Tensor> = model.trainable().into_iter().cloned().collect();
    let mut stale = 0usize;
    let mut plateau = 0usize;

    for epoch in 0..cfg.max_epochs {
        let warmup = epoch < cfg.warmup_epochs;
        let gate_active = cfg.use_gate && !warmup;
        let mut frozen = vec![false; n_params];
        if warmup {
            frozen[decay_index] = true;
        }

        let mut order = train_idx.clone();
        shuffle(&mut order, seed, epoch);

        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &wi in chunk {
                let augmented = augmentor
                    .as_mut()
                    .and_then(|a| a.augment(&windows[wi], epoch));
                let window = augmented.as_ref().unwrap_or(&windows[wi]);
                let pass = model.forward(&mut tape, &vars, window, gate_active);
                losses.push(composite_loss(&mut tape, pass.deltas, window, &cfg.loss));
            }
            let total = tape.add_many(&losses);
            let batch_loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let grads = tape
                .backward(batch_loss)
                .map_err(|source| TrainError::Diverged { epoch, source })?;
            let value = tape.value_scalar(batch_loss);
            loss_sum += value * chunk.len() as f64;
            loss_n += chunk.len();

            let bound = vars.var_list();
            let grad_slices: Vec<&[f64]> = bound.iter().map(|v| grads.of(*v)).collect();
            let mut params = model.trainable_mut();
            opt.step(&mut params, &grad_slices, &frozen);
        }

        let val_metric = mean_endpoint_error(&model, windows, &val_idx)
            .map_err(|source| TrainError::Diverged { epoch, source })?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_metric,
            lr: opt.lr,
        });

        if val_metric < best_val {
            best_val = val_metric;
            best_epoch = epoch;
            best_params = model.trainable().into_iter().cloned().collect();
            stale = 0;
            plateau = 0;
        } else {
            stale += 1;
            plateau += 1;
            if plateau >= cfg.plateau {
                let lr = opt.lr * 0.5;
                opt.set_lr(lr);
                plateau = 0;
            }
            if stale >= cfg.patience {
                break;
            }
        }
    }

    for (param, best) in model.trainable_mut().into_iter().zip(best_params) {
        *param = best;
    }
    Ok(TrainedFusion {
        model,
        history,
        split,
        best_epoch,
    })
}

/// Fisher-Yates with a per-epoch stream so editing the epoch count never
/// shifts earlier epochs' batch composition.
fn shuffle(indices: &mut [usize], seed: u64, epoch: usize) {
    use rand::Rng;
    let mut rng = sub_rng(seed, &format!("fusion/shuffle/{epoch}"));
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Mean endpoint miss over the given windows, each anchored at its own
/// true start (teacher-forced evaluation).
fn mean_endpoint_error(
    model: &FusionNet,
    windows: &[FusionWindow],
    idx: &[usize],
) -> Result<f64, NeuralError> {
    if idx.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut sum = 0.0;
    for &wi in idx {
        let w = &windows[wi];
        let deltas = predict_window(model, w)?;
        let track = accumulate(w.truth[0], &deltas);
        let end = track.last().unwrap();
        let truth_end = w.truth.last().unwrap();
        sum += (0..3)
            .map(|i| (end[i] - truth_end[i]).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    Ok(sum / idx.len() as f64)
}

/// Deltas for one window with frozen parameters.
pub fn predict_window(model: &FusionNet, window: &FusionWindow) -> Result<Vec<[f64; 3]>, NeuralError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let pass = model.forward(&mut tape, &vars, window, model.arch.use_gate);
    if let Some(op) = tape.poisoned() {
        return Err(NeuralError::NonFinite { op });
    }
    let v = tape.value(pass.deltas);
    Ok((0..window.steps())
        .map(|t| [v[t * 3], v[t * 3 + 1], v[t * 3 + 2]])
        .collect())
}

/// Chained inference output.
pub struct FusionEstimate {
    /// Estimated positions at slot boundaries, excluding the provided
    /// start anchor.
    pub samples: Vec<PosSample>,
    /// Per-slot gate values with visible-anchor counts.
    pub gate_series: Vec<GateStep>,
}

/// Runs the model over consecutive windows. The first window is anchored
/// at `start`; each later window continues from the previous window's
/// final estimate, so errors compound exactly as they would on-line.
pub fn infer(
    model: &FusionNet,
    windows: &[FusionWindow],
    start: [f64; 3],
) -> Result<FusionEstimate, NeuralError> {
    let mut samples = Vec::new();
    let mut gate_series = Vec::new();
    let mut anchor = start;
    for w in windows {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let pass = model.forward(&mut tape, &vars, w, model.arch.use_gate);
        if let Some(op) = tape.poisoned() {
            return Err(NeuralError::NonFinite { op });
        }
        let v = tape.value(pass.deltas);
        let deltas: Vec<[f64; 3]> = (0..w.steps())
            .map(|t| [v[t * 3], v[t * 3 + 1], v[t * 3 + 2]])
            .collect();
        let counts = w.visible_counts();
        for (t, (&alpha, &visible)) in pass.alpha.iter().zip(&counts).enumerate() {
            gate_series.push(GateStep {
                t: w.t0 + t as f64 * w.dt,
                alpha,
                visible,
            });
        }
        let track = accumulate(anchor, &deltas);
        for (s, p) in track.iter().enumerate().skip(1) {
            samples.push(PosSample {
                t: w.t0 + s as f64 * w.dt,
                position: *p,
            });
        }
        anchor = *track.last().unwrap();
    }
    Ok(FusionEstimate {
        samples,
        gate_series,
    })
}
