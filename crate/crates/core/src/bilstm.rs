//! Loose-coupled learning baseline: a stacked bidirectional LSTM that
//! maps per-slot [acceleration, trilaterated position] features to
//! displacement predictions. Unlike the gated fusion model it never sees
//! raw ranges, so it inherits multilateration's four-anchor requirement;
//! during outages its position feature goes stale by design.

use serde::{Deserialize, Serialize};

use crate::fusionnet::{accumulate, build_windows, split_windows, EpochStats, Split, TrainError};
use crate::neural::layers::{Dense, DenseVars, LstmParams, LstmVars};
use crate::neural::optim::AdamW;
use crate::neural::tape::{Tape, Var};
use crate::neural::tensor::Tensor;
use crate::neural::{Checkpoint, NeuralError};
use crate::sim::MeasurementLog;
use crate::sub_rng;
use crate::trilat::EpochFix;
use crate::Vec3;

/// Guard against zero spread in a constant feature column.
const SIGMA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilstmConfig {
    pub window: usize,
    pub layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Early-stop patience on validation loss, in epochs.
    pub patience: usize,
    /// Per-axis loss weights; the vertical axis gets extra emphasis
    /// because anchor layouts constrain it worst.
    pub w: [f64; 3],
}

impl Default for BilstmConfig {
    fn default() -> Self {
        BilstmConfig {
            window: 64,
            layers: 1,
            hidden: 32,
            lr: 1e-3,
            batch: 8,
            max_epochs: 150,
            patience: 30,
            w: [1.0, 1.0, 2.0],
        }
    }
}

impl BilstmConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.window == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(TrainError::TooSmall(
                "window, hidden and layers must be positive".into(),
            ));
        }
        if self.w.iter().any(|&w| w <= 0.0) {
            return Err(TrainError::TooSmall(
                "loss weights must be positive componentwise".into(),
            ));
        }
        Ok(())
    }
}

/// One training unit: per-slot features paired with true positions at
/// the slot boundaries (one more truth row than feature rows).
#[derive(Debug, Clone, PartialEq)]
pub struct BilstmWindow {
    pub t0: f64,
    pub dt: f64,
    /// Per slot: [ax, ay, az, px, py, pz], position causally filled.
    pub features: Vec<[f64; 6]>,
    pub truth: Vec<[f64; 3]>,
}

impl BilstmWindow {
    pub fn steps(&self) -> usize {
        self.features.len()
    }

    pub fn truth_deltas(&self) -> Vec<[f64; 3]> {
        (0..self.steps())
            .map(|t| {
                [
                    self.truth[t + 1][0] - self.truth[t][0],
                    self.truth[t + 1][1] - self.truth[t][1],
                    self.truth[t + 1][2] - self.truth[t][2],
                ]
            })
            .collect()
    }
}

/// Builds windows on the shared slot grid. Positions come from fixes
/// that converged with at least four anchors; every slot carries the
/// most recent such fix, and slots before the first fix carry the first
/// reference position (the deployment's known starting point).
pub fn build_bilstm_windows(
    log: &MeasurementLog,
    accel: &[(f64, Vec3)],
    fixes: &[EpochFix],
    rate: f64,
    window: usize,
) -> Result<Vec<BilstmWindow>, TrainError> {
    let n_anchors = log
        .uwb
        .iter()
        .map(|r| r.anchor_id + 1)
        .max()
        .unwrap_or(1);
    let base = build_windows(log, accel, rate, window, n_anchors)?;
    let n_slots = base.len() * window;

    let mut fix_pos: Vec<Option<[f64; 3]>> = vec![None; n_slots];
    for f in fixes {
        if !(f.fix.converged && !f.fix.underdetermined && f.fix.n_anchors >= 4) {
            continue;
        }
        let slot = (f.t * rate).round() as usize;
        if slot < n_slots {
            fix_pos[slot] = Some(f.fix.position);
        }
    }
    let fallback = log
        .reference
        .first()
        .map(|r| r.position)
        .or_else(|| fix_pos.iter().flatten().next().copied())
        .ok_or_else(|| {
            TrainError::TooSmall("no reference position and no usable fix to seed the fill".into())
        })?;
    let mut last = fallback;
    let filled: Vec<[f64; 3]> = fix_pos
        .into_iter()
        .map(|p| {
            if let Some(p) = p {
                last = p;
            }
            last
        })
        .collect();

    Ok(base
        .into_iter()
        .enumerate()
        .map(|(wi, fw)| {
            let features = (0..window)
                .map(|t| {
                    let a = fw.imu[t];
                    let p = filled[wi * window + t];
                    [a[0], a[1], a[2], p[0], p[1], p[2]]
                })
                .collect();
            BilstmWindow {
                t0: fw.t0,
                dt: fw.dt,
                features,
                truth: fw.truth,
            }
        })
        .collect())
}

/// Per-feature normalisation constants, from the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilstmStats {
    pub mu: [f64; 6],
    pub sigma: [f64; 6],
}

impl BilstmStats {
    pub fn compute(train: &[BilstmWindow]) -> Self {
        let mut mu = [0.0; 6];
        let mut n = 0usize;
        for w in train {
            for f in &w.features {
                for (m, v) in mu.iter_mut().zip(f) {
                    *m += v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        for m in &mut mu {
            *m /= n;
        }
        let mut var = [0.0; 6];
        for w in train {
            for f in &w.features {
                for (s, (v, m)) in var.iter_mut().zip(f.iter().zip(&mu)) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let mut sigma = [0.0; 6];
        for (s, v) in sigma.iter_mut().zip(&var) {
            *s = (v / n).sqrt();
        }
        BilstmStats { mu, sigma }
    }

    fn normalise(&self, features: &[[f64; 6]]) -> Tensor {
        let rows: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                (0..6)
                    .map(|i| (f[i] - self.mu[i]) / (self.sigma[i] + SIGMA_EPS))
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilstmArch {
    pub hidden: usize,
    pub layers: usize,
    pub window: usize,
    pub dt: f64,
}

pub struct BilstmNet {
    pub arch: BilstmArch,
    /// One (forward, backward) cell pair per stacked layer.
    pub cells: Vec<(LstmParams, LstmParams)>,
    pub head: Dense,
    pub stats: BilstmStats,
}

pub struct BilstmVars {
    cells: Vec<(LstmVars, LstmVars)>,
    head: DenseVars,
}

impl BilstmNet {
    pub fn new(arch: BilstmArch, stats: BilstmStats, seed: u64) -> Self {
        let mut rng = sub_rng(seed, "bilstm/init");
        let mut cells = Vec::with_capacity(arch.layers);
        for layer in 0..arch.layers {
            let input = if layer == 0 { 6 } else { 2 * arch.hidden };
            let fwd = LstmParams::new(input, arch.hidden, &mut rng);
            let bwd = LstmParams::new(input, arch.hidden, &mut rng);
            cells.push((fwd, bwd));
        }
        let head = Dense::new(2 * arch.hidden, 3, &mut rng);
        BilstmNet {
            arch,
            cells,
            head,
            stats,
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (f, b) in &self.cells {
            out.extend(f.params());
            out.extend(b.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (f, b) in &mut self.cells {
            out.extend(f.params_mut());
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BilstmVars {
        BilstmVars {
            cells: self
                .cells
                .iter()
                .map(|(f, b)| (f.bind(tape), b.bind(tape)))
                .collect(),
            head: self.head.bind(tape),
        }
    }

    /// Normalised features in, per-slot displacements out (T x 3).
    pub fn forward(&self, tape: &mut Tape, vars: &BilstmVars, window: &BilstmWindow) -> Var {
        let x = tape.leaf(&self.stats.normalise(&window.features));
        let mut h = x;
        for (f, b) in &vars.cells {
            let fwd = f.sequence(tape, h, false);
            let bwd = b.sequence(tape, h, true);
            h = tape.concat_cols(&[fwd, bwd]);
        }
        vars.head.forward(tape, h)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "arch": self.arch,
            "stats": self.stats,
        });
        let mut ck = Checkpoint::new("bilstm", meta);
        for (i, (f, b)) in self.cells.iter().enumerate() {
            ck.push(&format!("layer{i}.fwd.w"), f.w.clone());
            ck.push(&format!("layer{i}.fwd.u"), f.u.clone());
            ck.push(&format!("layer{i}.fwd.b"), f.b.clone());
            ck.push(&format!("layer{i}.bwd.w"), b.w.clone());
            ck.push(&format!("layer{i}.bwd.u"), b.u.clone());
            ck.push(&format!("layer{i}.bwd.b"), b.b.clone());
        }
        ck.push("head.w", self.head.w.clone());
        ck.push("head.b", self.head.b.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NeuralError> {
        ck.expect_kind("bilstm")?;
        let arch: BilstmArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| NeuralError::Checkpoint(format!("bad arch block: {e}")))?;
        let stats: BilstmStats = serde_json::from_value(ck.meta["stats"].clone())
            .map_err(|e| NeuralError::Checkpoint(format!("bad stats block: {e}")))?;
        let mut cells = Vec::with_capacity(arch.layers);
        for i in 0..arch.layers {
            let load = |suffix: &str| -> Result<Tensor, NeuralError> {
                Ok(ck.get(&format!("layer{i}.{suffix}"))?.clone())
            };
            let fwd = LstmParams {
                hidden: arch.hidden,
                w: load("fwd.w")?,
                u: load("fwd.u")?,
                b: load("fwd.b")?,
            };
            let bwd = LstmParams {
                hidden: arch.hidden,
                w: load("bwd.w")?,
                u: load("bwd.u")?,
                b: load("bwd.b")?,
            };
            cells.push((fwd, bwd));
        }
        let head = Dense {
            w: ck.get("head.w")?.clone(),
            b: ck.get("head.b")?.clone(),
        };
        Ok(BilstmNet {
            arch,
            cells,
            head,
            stats,
        })
    }
}

/// Sum over axes of weighted squared residuals, averaged over slots.
pub fn wmse_loss(tape: &mut Tape, pred: Var, window: &BilstmWindow, w: [f64; 3]) -> Var {
    let steps = window.steps();
    let target = tape.leaf(&Tensor::from_rows(
        &window
            .truth_deltas()
            .iter()
            .map(|d| d.to_vec())
            .collect::<Vec<_>>(),
    ));
    let weights = tape.leaf(&Tensor::from_vec(1, 3, w.to_vec()));
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    let weighted = tape.mul_row(sq, weights);
    let total = tape.sum_all(weighted);
    tape.scale(total, 1.0 / steps as f64)
}

pub struct TrainedBilstm {
    pub model: BilstmNet,
    pub history: Vec<EpochStats>,
    pub split: Split,
    pub best_epoch: usize,
}

/// Adam training (no weight decay) with early stopping on validation
/// loss. Split and shuffling conventions match the fusion trainer.
pub fn train(
    windows: &[BilstmWindow],
    cfg: &BilstmConfig,
    seed: u64,
) -> Result<TrainedBilstm, TrainError> {
    cfg.validate()?;
    let split = split_windows(windows.len())?;
    let arch = BilstmArch {
        hidden: cfg.hidden,
        layers: cfg.layers,
        window: windows[0].steps(),
        dt: windows[0].dt,
    };
    let stats = BilstmStats::compute(&windows[split.train.clone()]);
    let mut model = BilstmNet::new(arch, stats, seed);
    let sizes: Vec<usize> = model.trainable().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(&sizes, cfg.lr, 0.0);
    let frozen = vec![false; sizes.len()];

    let train_idx: Vec<usize> = split.train.clone().collect();
    let val_idx: Vec<usize> = split.val.clone().collect();

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Vec<Tensor> = model.trainable().into_iter().cloned().collect();
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        shuffle(&mut order, seed, epoch);

        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let losses: Vec<Var> = chunk
                .iter()
                .map(|&wi| {
                    let pred = model.forward(&mut tape, &vars, &windows[wi]);
                    wmse_loss(&mut tape, pred, &windows[wi], cfg.w)
                })
                .collect();
            let total = tape.add_many(&losses);
            let batch_loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let grads = tape
                .backward(batch_loss)
                .map_err(|source| TrainError::Diverged { epoch, source })?;
            loss_sum += tape.value_scalar(batch_loss) * chunk.len() as f64;
            loss_n += chunk.len();

            let bound = var_list(&vars);
            let grad_slices: Vec<&[f64]> = bound.iter().map(|v| grads.of(*v)).collect();
            let mut params = model.trainable_mut();
            opt.step(&mut params, &grad_slices, &frozen);
        }

        let val_metric = mean_val_loss(&model, windows, &val_idx, cfg.w)
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
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    for (param, best) in model.trainable_mut().into_iter().zip(best_params) {
        *param = best;
    }
    Ok(TrainedBilstm {
        model,
        history,
        split,
        best_epoch,
    })
}

fn var_list(vars: &BilstmVars) -> Vec<Var> {
    let mut out = Vec::new();
    for (f, b) in &vars.cells {
        out.extend(f.vars());
        out.extend(b.vars());
    }
    out.extend(vars.head.vars());
    out
}

fn shuffle(indices: &mut [usize], seed: u64, epoch: usize) {
    use rand::Rng;
    let mut rng = sub_rng(seed, &format!("bilstm/shuffle/{epoch}"));
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

fn mean_val_loss(
    model: &BilstmNet,
    windows: &[BilstmWindow],
    idx: &[usize],
    w: [f64; 3],
) -> Result<f64, NeuralError> {
    if idx.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut sum = 0.0;
    for &wi in idx {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let pred = model.forward(&mut tape, &vars, &windows[wi]);
        let loss = wmse_loss(&mut tape, pred, &windows[wi], w);
        if let Some(op) = tape.poisoned() {
            return Err(NeuralError::NonFinite { op });
        }
        sum += tape.value_scalar(loss);
    }
    Ok(sum / idx.len() as f64)
}

/// Deltas for one window with frozen parameters.
pub fn predict_window(model: &BilstmNet, window: &BilstmWindow) -> Result<Vec<[f64; 3]>, NeuralError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let pred = model.forward(&mut tape, &vars, window);
    if let Some(op) = tape.poisoned() {
        return Err(NeuralError::NonFinite { op });
    }
    let v = tape.value(pred);
    Ok((0..window.steps())
        .map(|t| [v[t * 3], v[t * 3 + 1], v[t * 3 + 2]])
        .collect())
}

/// Chained inference over consecutive windows; the reconstruction rule
/// (running sum of deltas) is shared with the fusion model.
pub fn infer(
    model: &BilstmNet,
    windows: &[BilstmWindow],
    start: [f64; 3],
) -> Result<Vec<crate::sim::PosSample>, NeuralError> {
    let mut samples = Vec::new();
    let mut anchor = start;
    for w in windows {
        let deltas = predict_window(model, w)?;
        let track = accumulate(anchor, &deltas);
        for (s, p) in track.iter().enumerate().skip(1) {
            samples.push(crate::sim::PosSample {
                t: w.t0 + s as f64 * w.dt,
                position: *p,
            });
        }
        anchor = *track.last().unwrap();
    }
    Ok(samples)
}
