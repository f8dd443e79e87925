//! Residual-level range augmentation. Real ranging residuals (measured
//! range minus geometric range) are extracted per anchor, a small
//! conditional diffusion model learns their distribution as short
//! per-anchor sequences, and training windows receive soft mixtures of
//! real and sampled residuals on a random subset of valid points. The
//! sparsity pattern is never touched: augmentation perturbs values, not
//! visibility.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::percentile;
use crate::fusionnet::{FusionWindow, TrainError, WindowAugmentor};
use crate::neural::layers::Mlp;
use crate::neural::optim::AdamW;
use crate::neural::tape::Tape;
use crate::neural::tensor::Tensor;
use crate::neural::{Checkpoint, NeuralError};
use crate::sim::MeasurementLog;
use crate::sub_rng;
use crate::Vec3;

/// Condition features: ground-truth speed proxy and visible-anchor count.
const COND_DIM: usize = 2;
/// Timestep embedding width: normalised step plus one sine/cosine pair.
const T_EMBED: usize = 3;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("log carries no ground truth")]
    MissingTruth,
    #[error("record references anchor {id} but only {n} anchors are known")]
    AnchorOutOfRange { id: usize, n: usize },
}

/// One ranging residual with the conditions it was observed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub t: f64,
    pub anchor_id: usize,
    /// Measured range minus geometric range, meters.
    pub epsilon: f64,
    /// [speed m/s, visible-anchor count].
    pub condition: [f64; COND_DIM],
}

/// Extracts one residual per valid measurement. Invalid records and
/// records outside the truth span produce nothing.
pub fn extract_residuals(
    log: &MeasurementLog,
    anchors: &[[f64; 3]],
) -> Result<Vec<ResidualRecord>, AugmentError> {
    if log.truth.len() < 2 {
        return Err(AugmentError::MissingTruth);
    }
    let t_first = log.truth.first().unwrap().t;
    let t_last = log.truth.last().unwrap().t;

    // visible-anchor count per epoch; epochs share bitwise timestamps
    let mut counts: std::collections::HashMap<u64, f64> = std::collections::HashMap::new();
    for r in log.uwb.iter().filter(|r| r.valid) {
        *counts.entry(r.t.to_bits()).or_insert(0.0) += 1.0;
    }

    let mut out = Vec::new();
    for r in log.uwb.iter().filter(|r| r.valid) {
        if r.anchor_id >= anchors.len() {
            return Err(AugmentError::AnchorOutOfRange {
                id: r.anchor_id,
                n: anchors.len(),
            });
        }
        let Some(p) = log.truth_at(r.t) else { continue };
        let a = anchors[r.anchor_id];
        let geom = (p - Vec3::new(a[0], a[1], a[2])).norm();

        let h = 0.05;
        let lo = (r.t - h).max(t_first);
        let hi = (r.t + h).min(t_last);
        let speed = match (log.truth_at(lo), log.truth_at(hi)) {
            (Some(p0), Some(p1)) if hi > lo => (p1 - p0).norm() / (hi - lo),
            _ => 0.0,
        };
        out.push(ResidualRecord {
            t: r.t,
            anchor_id: r.anchor_id,
            epsilon: r.range - geom,
            condition: [speed, counts[&r.t.to_bits()]],
        });
    }
    Ok(out)
}

/// Per-anchor sliding windows over time-ordered residuals. Each window
/// carries the mean condition of its members.
pub fn residual_windows(
    records: &[ResidualRecord],
    window: usize,
    stride: usize,
) -> Vec<(Vec<f64>, [f64; COND_DIM])> {
    assert!(window > 0 && stride > 0);
    let max_anchor = records.iter().map(|r| r.anchor_id).max();
    let Some(max_anchor) = max_anchor else {
        return Vec::new();
    };
    let mut per_anchor: Vec<Vec<&ResidualRecord>> = vec![Vec::new(); max_anchor + 1];
    for r in records {
        per_anchor[r.anchor_id].push(r);
    }
    let mut out = Vec::new();
    for series in &mut per_anchor {
        series.sort_by(|a, b| a.t.total_cmp(&b.t));
        let mut start = 0;
        while start + window <= series.len() {
            let slice = &series[start..start + window];
            let eps: Vec<f64> = slice.iter().map(|r| r.epsilon).collect();
            let mut cond = [0.0; COND_DIM];
            for r in slice {
                for (c, v) in cond.iter_mut().zip(&r.condition) {
                    *c += v;
                }
            }
            for c in &mut cond {
                *c /= window as f64;
            }
            out.push((eps, cond));
            start += stride;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Residual sequence length the model generates.
    pub window: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            window: 8,
            hidden: 64,
            lr: 1e-3,
            batch: 32,
            epochs: 120,
        }
    }
}

impl DiffusionConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.steps < 10 {
            return Err(TrainError::TooSmall(format!(
                "diffusion needs at least 10 steps, got {}",
                self.steps
            )));
        }
        if !(self.beta_min > 0.0 && self.beta_max < 1.0 && self.beta_min <= self.beta_max) {
            return Err(TrainError::TooSmall(format!(
                "noise schedule must satisfy 0 < beta_min <= beta_max < 1, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if self.window == 0 || self.hidden == 0 {
            return Err(TrainError::TooSmall(
                "window and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Denoising model over normalised residual windows: an MLP predicting
/// the noise component from (noisy window, timestep embedding, condition).
pub struct DiffusionModel {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub window: usize,
    /// Linear schedule, `betas[k]` is beta at step k+1.
    pub betas: Vec<f64>,
    /// Cumulative products of (1 - beta).
    pub alpha_bar: Vec<f64>,
    pub denoiser: Mlp,
    /// Corpus normalisation applied before diffusion, undone on output.
    pub mu: f64,
    pub sigma: f64,
}

fn linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> (Vec<f64>, Vec<f64>) {
    let betas: Vec<f64> = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    (betas, alpha_bar)
}

impl DiffusionModel {
    pub fn new(cfg: &DiffusionConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (betas, alpha_bar) = linear_schedule(cfg.steps, cfg.beta_min, cfg.beta_max);
        let dims = [
            cfg.window + T_EMBED + COND_DIM,
            cfg.hidden,
            cfg.hidden,
            cfg.window,
        ];
        let mut rng = sub_rng(seed, "diffusion/init");
        Ok(DiffusionModel {
            steps: cfg.steps,
            beta_min: cfg.beta_min,
            beta_max: cfg.beta_max,
            window: cfg.window,
            betas,
            alpha_bar,
            denoiser: Mlp::new(&dims, &mut rng),
            mu: 0.0,
            sigma: 1.0,
        })
    }

    fn embed(&self, x: &[f64], t: usize, cond: [f64; COND_DIM]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.window + T_EMBED + COND_DIM);
        v.extend_from_slice(x);
        let tn = t as f64 / self.steps as f64;
        v.push(tn);
        v.push((std::f64::consts::PI * tn).sin());
        v.push((std::f64::consts::PI * tn).cos());
        v.extend_from_slice(&cond);
        v
    }

    /// Plain forward pass used during sampling; no tape involved.
    pub fn denoise(&self, x: &[f64], t: usize, cond: [f64; COND_DIM]) -> Vec<f64> {
        let mut h = self.embed(x, t, cond);
        let last = self.denoiser.layers.len() - 1;
        for (li, layer) in self.denoiser.layers.iter().enumerate() {
            let outd = layer.w.cols;
            let mut out = vec![0.0; outd];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = layer.b.data[j];
                for (k, hv) in h.iter().enumerate() {
                    acc += hv * layer.w.data[k * outd + j];
                }
                *o = acc;
            }
            if li < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            h = out;
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "steps": self.steps,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "window": self.window,
            "mu": self.mu,
            "sigma": self.sigma,
        });
        let mut ck = Checkpoint::new("diffusion", meta);
        for (i, layer) in self.denoiser.layers.iter().enumerate() {
            ck.push(&format!("denoiser.{i}.w"), layer.w.clone());
            ck.push(&format!("denoiser.{i}.b"), layer.b.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NeuralError> {
        ck.expect_kind("diffusion")?;
        let get_f = |key: &str| -> Result<f64, NeuralError> {
            ck.meta[key]
                .as_f64()
                .ok_or_else(|| NeuralError::Checkpoint(format!("missing meta field {key}")))
        };
        let steps = get_f("steps")? as usize;
        let beta_min = get_f("beta_min")?;
        let beta_max = get_f("beta_max")?;
        let window = get_f("window")? as usize;
        let (betas, alpha_bar) = linear_schedule(steps, beta_min, beta_max);
        let mut layers = Vec::new();
        let mut i = 0;
        while let Ok(w) = ck.get(&format!("denoiser.{i}.w")) {
            let b = ck.get(&format!("denoiser.{i}.b"))?;
            layers.push(crate::neural::layers::Dense {
                w: w.clone(),
                b: b.clone(),
            });
            i += 1;
        }
        if layers.is_empty() {
            return Err(NeuralError::Checkpoint("no denoiser layers stored".into()));
        }
        Ok(DiffusionModel {
            steps,
            beta_min,
            beta_max,
            window,
            betas,
            alpha_bar,
            denoiser: Mlp { layers },
            mu: get_f("mu")?,
            sigma: get_f("sigma")?,
        })
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Fits the denoiser with the standard noise-prediction objective:
/// corrupt a normalised window to a random step, predict the injected
/// noise, minimise mean squared error.
pub fn train_diffusion(
    corpus: &[(Vec<f64>, [f64; COND_DIM])],
    cfg: &DiffusionConfig,
    seed: u64,
) -> Result<DiffusionModel, TrainError> {
    let mut model = DiffusionModel::new(cfg, seed)?;
    if corpus.is_empty() {
        return Err(TrainError::TooSmall("empty residual corpus".into()));
    }
    if corpus.iter().any(|(w, _)| w.len() != cfg.window) {
        return Err(TrainError::TooSmall(format!(
            "corpus windows must have length {}",
            cfg.window
        )));
    }

    let all: Vec<f64> = corpus.iter().flat_map(|(w, _)| w.iter().copied()).collect();
    let n = all.len() as f64;
    let mu = all.iter().sum::<f64>() / n;
    let sigma = (all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    model.mu = mu;
    model.sigma = if sigma > 0.0 { sigma } else { 1.0 };

    let x0: Vec<Vec<f64>> = corpus
        .iter()
        .map(|(w, _)| w.iter().map(|v| (v - model.mu) / model.sigma).collect())
        .collect();

    let sizes: Vec<usize> = model.denoiser.params().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(&sizes, cfg.lr, 0.0);
    let frozen = vec![false; sizes.len()];
    let mut rng = sub_rng(seed, "diffusion/train");

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &ci in chunk {
                let t = rng.gen_range(1..=cfg.steps);
                let abar = model.alpha_bar[t - 1];
                let eps: Vec<f64> = (0..cfg.window).map(|_| normal(&mut rng)).collect();
                let xt: Vec<f64> = x0[ci]
                    .iter()
                    .zip(&eps)
                    .map(|(x, e)| abar.sqrt() * x + (1.0 - abar).sqrt() * e)
                    .collect();
                inputs.push(model.embed(&xt, t, corpus[ci].1));
                targets.push(eps);
            }
            let mut tape = Tape::new();
            let vars = model.denoiser.bind(&mut tape);
            let x = tape.leaf(&Tensor::from_rows(&inputs));
            let y = tape.leaf(&Tensor::from_rows(&targets));
            let pred = vars.forward(&mut tape, x);
            let diff = tape.sub(pred, y);
            let sq = tape.mul(diff, diff);
            let loss = tape.mean_all(sq);
            let grads = tape
                .backward(loss)
                .map_err(|source| TrainError::Diverged { epoch, source })?;
            let bound = vars.vars();
            let grad_slices: Vec<&[f64]> = bound.iter().map(|v| grads.of(*v)).collect();
            let mut params = model.denoiser.params_mut();
            opt.step(&mut params, &grad_slices, &frozen);
        }
    }
    Ok(model)
}

/// Ancestral sampling through the reverse process; returns one residual
/// window in meters.
pub fn sample_residual_window(
    model: &DiffusionModel,
    cond: [f64; COND_DIM],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let w = model.window;
    let mut x: Vec<f64> = (0..w).map(|_| normal(rng)).collect();
    for t in (1..=model.steps).rev() {
        let eps_hat = model.denoise(&x, t, cond);
        let beta = model.betas[t - 1];
        let alpha = 1.0 - beta;
        let abar = model.alpha_bar[t - 1];
        let coef = beta / (1.0 - abar).sqrt();
        for (xi, e) in x.iter_mut().zip(&eps_hat) {
            *xi = (*xi - coef * e) / alpha.sqrt();
        }
        if t > 1 {
            let abar_prev = model.alpha_bar[t - 2];
            let sd = (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt();
            for xi in x.iter_mut() {
                *xi += sd * normal(rng);
            }
        }
    }
    x.iter().map(|v| v * model.sigma + model.mu).collect()
}

/// Mean ground-truth speed and mean visible count for one window, the
/// conditioning signal at injection time.
pub fn window_condition(window: &FusionWindow) -> [f64; COND_DIM] {
    let steps = window.steps().max(1) as f64;
    let speed = window
        .truth_deltas()
        .iter()
        .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        .sum::<f64>()
        / (steps * window.dt);
    let visible = window
        .mask
        .iter()
        .map(|row| row.iter().sum::<f64>())
        .sum::<f64>()
        / steps;
    [speed, visible]
}

/// Replaces the ranges of a random subset of valid points with soft
/// mixtures of real and generated residuals re-anchored on geometry.
/// Everything except the selected range values is preserved bitwise.
pub fn mix_and_inject(
    window: &FusionWindow,
    anchors: &[[f64; 3]],
    fake: &mut dyn FnMut(usize, usize) -> f64,
    alpha_gan: f64,
    subset_frac: f64,
    rng: &mut ChaCha8Rng,
) -> FusionWindow {
    assert!((0.0..=1.0).contains(&alpha_gan), "mixture weight out of range");
    let mut out = window.clone();
    if alpha_gan == 0.0 {
        return out;
    }
    let mut valid: Vec<(usize, usize)> = Vec::new();
    for (t, row) in window.mask.iter().enumerate() {
        for (a, &m) in row.iter().enumerate() {
            if m == 1.0 {
                valid.push((t, a));
            }
        }
    }
    if valid.is_empty() {
        return out;
    }
    let k = ((subset_frac * valid.len() as f64).ceil() as usize).min(valid.len());
    for i in 0..k {
        let j = rng.gen_range(i..valid.len());
        valid.swap(i, j);
    }
    for &(t, a) in &valid[..k] {
        let p = window.truth[t];
        let anchor = anchors[a];
        let geom = ((p[0] - anchor[0]).powi(2)
            + (p[1] - anchor[1]).powi(2)
            + (p[2] - anchor[2]).powi(2))
        .sqrt();
        let eps_real = window.ranges[t][a] - geom;
        let eps_fake = fake(t, a);
        let mix = (1.0 - alpha_gan) * eps_real + alpha_gan * eps_fake;
        let mix = mix.clamp(eps_real.min(eps_fake), eps_real.max(eps_fake));
        out.ranges[t][a] = geom + mix;
    }
    out
}

/// Training hook: with probability ramping up over epochs, injects
/// diffusion-sampled residuals into a window before it is used.
pub struct DganAugmentor {
    pub model: DiffusionModel,
    pub anchors: Vec<[f64; 3]>,
    pub alpha_gan: f64,
    pub subset_frac: f64,
    pub p_max: f64,
    pub ramp_epochs: usize,
    rng: ChaCha8Rng,
}

impl DganAugmentor {
    pub fn new(model: DiffusionModel, anchors: Vec<[f64; 3]>, seed: u64) -> Self {
        DganAugmentor {
            model,
            anchors,
            alpha_gan: 0.5,
            subset_frac: 0.10,
            p_max: 0.5,
            ramp_epochs: 10,
            rng: sub_rng(seed, "augment/inject"),
        }
    }

    /// Curriculum: clean data first, then a linearly growing share of
    /// augmented windows, capped at `p_max`.
    pub fn augment_probability(&self, epoch: usize) -> f64 {
        self.p_max * (epoch as f64 / self.ramp_epochs.max(1) as f64).min(1.0)
    }
}

impl WindowAugmentor for DganAugmentor {
    fn augment(&mut self, window: &FusionWindow, epoch: usize) -> Option<FusionWindow> {
        let p = self.augment_probability(epoch);
        if p <= 0.0 || !self.rng.gen_bool(p.min(1.0)) {
            return None;
        }
        let cond = window_condition(window);
        let fakes: Vec<Vec<f64>> = (0..window.n_anchors())
            .map(|_| sample_residual_window(&self.model, cond, &mut self.rng))
            .collect();
        let mut source = |t: usize, a: usize| fakes[a][t % fakes[a].len()];
        Some(mix_and_inject(
            window,
            &self.anchors,
            &mut source,
            self.alpha_gan,
            self.subset_frac,
            &mut self.rng,
        ))
    }
}

/// Anything that can produce residual samples for distribution checks.
pub trait ResidualGenerator {
    fn name(&self) -> &'static str;
    fn sample(&mut self, n: usize) -> Vec<f64>;
}

/// Moment-matched normal baseline.
pub struct GaussianFit {
    pub mu: f64,
    pub sigma: f64,
    rng: ChaCha8Rng,
}

impl GaussianFit {
    pub fn fit(train: &[f64], seed: u64) -> Self {
        let n = train.len().max(1) as f64;
        let mu = train.iter().sum::<f64>() / n;
        let sigma = (train.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
        GaussianFit {
            mu,
            sigma,
            rng: sub_rng(seed, "augment/gaussian"),
        }
    }
}

impl ResidualGenerator for GaussianFit {
    fn name(&self) -> &'static str {
        "gaussian"
    }
    fn sample(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.mu + self.sigma * normal(&mut self.rng)).collect()
    }
}

/// Empirical resampling baseline.
pub struct Bootstrap {
    pool: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Bootstrap {
    pub fn new(pool: Vec<f64>, seed: u64) -> Self {
        assert!(!pool.is_empty(), "bootstrap needs a non-empty pool");
        Bootstrap {
            pool,
            rng: sub_rng(seed, "augment/bootstrap"),
        }
    }
}

impl ResidualGenerator for Bootstrap {
    fn name(&self) -> &'static str {
        "bootstrap"
    }
    fn sample(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| self.pool[self.rng.gen_range(0..self.pool.len())])
            .collect()
    }
}

/// Diffusion model exposed through the generator interface; conditions
/// cycle through a provided pool.
pub struct DiffusionSampler<'a> {
    model: &'a DiffusionModel,
    conditions: Vec<[f64; COND_DIM]>,
    next: usize,
    rng: ChaCha8Rng,
}

impl<'a> DiffusionSampler<'a> {
    pub fn new(model: &'a DiffusionModel, conditions: Vec<[f64; COND_DIM]>, seed: u64) -> Self {
        assert!(!conditions.is_empty(), "need at least one condition");
        DiffusionSampler {
            model,
            conditions,
            next: 0,
            rng: sub_rng(seed, "augment/diffusion-sample"),
        }
    }
}

impl ResidualGenerator for DiffusionSampler<'_> {
    fn name(&self) -> &'static str {
        "diffusion"
    }
    fn sample(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let cond = self.conditions[self.next % self.conditions.len()];
            self.next += 1;
            out.extend(sample_residual_window(self.model, cond, &mut self.rng));
        }
        out.truncate(n);
        out
    }
}

/// Two-sample Kolmogorov-Smirnov distance, sup |F_a - F_b|.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "ks needs non-empty samples");
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let t = x[i].min(y[j]);
        while i < x.len() && x[i] <= t {
            i += 1;
        }
        while j < y.len() && y[j] <= t {
            j += 1;
        }
        let fa = i as f64 / x.len() as f64;
        let fb = j as f64 / y.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub name: String,
    pub ks: f64,
    pub dev_mean: f64,
    pub dev_median: f64,
    pub dev_p95: f64,
    pub dev_p99: f64,
}

/// Scores each generator against held-out real residuals: KS distance
/// plus absolute deviations of summary statistics.
pub fn compare_generators(
    real: &[f64],
    generators: &mut [&mut dyn ResidualGenerator],
    n: usize,
) -> Vec<GeneratorReport> {
    assert!(!real.is_empty());
    let mut real_sorted = real.to_vec();
    real_sorted.sort_by(f64::total_cmp);
    let real_mean = real.iter().sum::<f64>() / real.len() as f64;
    let stat = |sorted: &[f64], p: f64| percentile(sorted, p);

    generators
        .iter_mut()
        .map(|g| {
            let sample = g.sample(n);
            let mut sorted = sample.clone();
            sorted.sort_by(f64::total_cmp);
            let mean = sample.iter().sum::<f64>() / sample.len() as f64;
            GeneratorReport {
                name: g.name().to_string(),
                ks: ks_distance(real, &sample),
                dev_mean: (mean - real_mean).abs(),
                dev_median: (stat(&sorted, 50.0) - stat(&real_sorted, 50.0)).abs(),
                dev_p95: (stat(&sorted, 95.0) - stat(&real_sorted, 95.0)).abs(),
                dev_p99: (stat(&sorted, 99.0) - stat(&real_sorted, 99.0)).abs(),
            }
        })
        .collect()
}
