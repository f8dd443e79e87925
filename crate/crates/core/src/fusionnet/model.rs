//! The gated fusion network: per-slot inertial and ranging encoders, an
//! age-weighted anchor aggregation, a recurrent trunk and a scalar gate
//! that mixes the two sensor branches before the displacement head.
//!
//! The displacement head is saturating: outputs pass through
//! `s * tanh(raw / s)` with a per-axis scale `s` frozen from training
//! statistics, so a single step can never move farther than the scale.

use serde::{Deserialize, Serialize};

use super::windows::{causal_fill, compute_aoi, FusionWindow, NormStats};
use crate::neural::layers::{LstmParams, LstmVars, Mlp, MlpVars};
use crate::neural::tape::{Tape, Var};
use crate::neural::tensor::Tensor;
use crate::neural::{Checkpoint, NeuralError};
use crate::sub_rng;

pub const EPS: f64 = 1e-8;

/// Architecture and behavior switches; everything needed to rebuild the
/// parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionArch {
    pub hidden: usize,
    pub embed: usize,
    pub n_anchors: usize,
    /// Slots per window.
    pub window: usize,
    /// Slot length in seconds.
    pub dt: f64,
    /// Age-decayed anchor weighting; when off, the mask is used raw and
    /// the decay features are pinned to 1.
    pub use_aoi: bool,
    /// Learned gate; when off, the branches are mixed 50/50.
    pub use_gate: bool,
    /// Gate value enforced while no anchor is visible.
    pub alpha_min: f64,
}

impl Default for FusionArch {
    fn default() -> Self {
        FusionArch {
            hidden: 128,
            embed: 3,
            n_anchors: 6,
            window: 64,
            dt: 0.05,
            use_aoi: true,
            use_gate: true,
            alpha_min: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    pub arch: FusionArch,
    pub imu_encoder: Mlp,
    pub uwb_encoder: Mlp,
    /// Learned per-anchor identity, `N_A x E`.
    pub anchor_emb: Tensor,
    /// Unconstrained per-anchor decay parameters; softplus maps them to
    /// the positive decay constants, `1 x N_A`.
    pub decay_raw: Tensor,
    pub trunk: LstmParams,
    pub gate: Mlp,
    pub head: Mlp,
    pub stats: NormStats,
}

/// Tape bindings for one forward/backward pass, in the same order as
/// [`FusionNet::trainable`].
pub struct FusionVars {
    imu_enc: MlpVars,
    uwb_enc: MlpVars,
    emb: Var,
    decay_raw: Var,
    trunk: LstmVars,
    gate: MlpVars,
    head: MlpVars,
}

/// Everything a caller needs from one window forward pass. The `Var`
/// handles stay valid as long as the tape they were built on.
pub struct ForwardPass {
    /// Predicted per-slot displacement, `T x 3`.
    pub deltas: Var,
    /// Gate values per slot, copied out of the tape.
    pub alpha: Vec<f64>,
    /// Fraction of visible anchors per slot.
    pub q_raw: Vec<f64>,
    /// Encoded branches and their mix, exposed for invariant checks.
    pub h_imu: Var,
    pub h_uwb: Var,
    pub h_att: Var,
    /// Age-decayed anchor weights, `T x N_A`.
    pub m_tilde: Var,
    /// Combined quality score, `T x 1`.
    pub q: Var,
}

impl FusionNet {
    /// Fresh parameters; `stats` must already be frozen from the
    /// training split.
    pub fn new(arch: FusionArch, stats: NormStats, seed: u64) -> Self {
        assert_eq!(stats.range_mu.len(), arch.n_anchors, "stats anchor count");
        let h = arch.hidden;
        let mut rng = sub_rng(seed, "fusion/init");
        // softplus^-1(10): decay starts at ten slots of half-life
        let raw0 = (10f64.exp() - 1.0).ln();
        FusionNet {
            imu_encoder: Mlp::new(&[3, h, h], &mut rng),
            uwb_encoder: Mlp::new(&[2 + arch.embed, h, h], &mut rng),
            anchor_emb: Tensor::uniform(arch.n_anchors, arch.embed, 1.0, &mut rng),
            decay_raw: Tensor::filled(1, arch.n_anchors, raw0),
            trunk: LstmParams::new(2 * h + 2, h, &mut rng),
            gate: Mlp::new(&[2 * h + 1, h, 1], &mut rng),
            head: Mlp::new(&[2 * h, h, 3], &mut rng),
            stats,
            arch,
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut p = self.imu_encoder.params();
        p.extend(self.uwb_encoder.params());
        p.push(&self.anchor_emb);
        p.push(&self.decay_raw);
        p.extend(self.trunk.params());
        p.extend(self.gate.params());
        p.extend(self.head.params());
        p
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.imu_encoder.params_mut();
        p.extend(self.uwb_encoder.params_mut());
        p.push(&mut self.anchor_emb);
        p.push(&mut self.decay_raw);
        p.extend(self.trunk.params_mut());
        p.extend(self.gate.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    /// Position of `decay_raw` in the trainable list; frozen during
    /// warm-up.
    pub fn decay_param_index(&self) -> usize {
        self.imu_encoder.params().len() + self.uwb_encoder.params().len() + 1
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionVars {
        FusionVars {
            imu_enc: self.imu_encoder.bind(tape),
            uwb_enc: self.uwb_encoder.bind(tape),
            emb: tape.leaf(&self.anchor_emb),
            decay_raw: tape.leaf(&self.decay_raw),
            trunk: self.trunk.bind(tape),
            gate: self.gate.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// One window through the network. `gate_active` is false during the
    /// warm-up stage and for the fixed-mix ablation; the gate then sits
    /// at 0.5 and the outage override is disabled with it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &FusionVars,
        window: &FusionWindow,
        gate_active: bool,
    ) -> ForwardPass {
        let t_len = window.steps();
        let na = self.arch.n_anchors;
        assert_eq!(window.n_anchors(), na, "window anchor count");
        assert!(t_len > 0, "empty window");

        // inertial branch: per-slot encoder
        let imu_rows: Vec<Vec<f64>> = window.imu.iter().map(|r| r.to_vec()).collect();
        let imu_leaf = tape.leaf(&Tensor::from_rows(&imu_rows));
        let h_imu = vars.imu_enc.forward(tape, imu_leaf);

        // ranging branch: causal fill, per-anchor normalisation, age decay
        let filled = causal_fill(&window.ranges, &window.mask, &self.stats.range_mu);
        let mut d_norm = Vec::with_capacity(t_len * na);
        for row in &filled {
            for (a, &d) in row.iter().enumerate() {
                d_norm.push((d - self.stats.range_mu[a]) / (self.stats.range_sigma[a] + EPS));
            }
        }
        let d_flat = tape.leaf_from(t_len * na, 1, d_norm);

        let mask_rows: Vec<Vec<f64>> = window.mask.iter().map(|r| r.to_vec()).collect();
        let mask_leaf = tape.leaf(&Tensor::from_rows(&mask_rows));

        let decay = if self.arch.use_aoi {
            let tau_rows = compute_aoi(&window.mask);
            let tau_leaf = tape.leaf(&Tensor::from_rows(&tau_rows));
            let lambda = vars.decay_softplus(tape);
            let inv_lambda = tape.recip(lambda);
            let scaled = tape.mul_row(tau_leaf, inv_lambda);
            let neg = tape.neg(scaled);
            tape.exp(neg)
        } else {
            tape.leaf(&Tensor::filled(t_len, na, 1.0))
        };

        let decay_flat = tape.reshape(decay, t_len * na, 1);
        let emb_tiled = tape.tile_rows(vars.emb, t_len);
        let x_uwb = tape.concat_cols(&[d_flat, decay_flat, emb_tiled]);
        let h_all = vars.uwb_enc.forward(tape, x_uwb);

        let m_tilde = tape.mul(mask_leaf, decay);
        let num = tape.segment_weighted_sum(h_all, m_tilde);
        let den_raw = tape.row_sum(m_tilde);
        let den = tape.add_scalar(den_raw, EPS);
        let inv_den = tape.recip(den);
        let h_uwb = tape.mul_col(num, inv_den);

        // quality scalars
        let q_raw_vals = window.visible_fraction();
        let q_raw_leaf = tape.leaf_from(t_len, 1, q_raw_vals.clone());
        let q_decay = tape.row_mean(m_tilde);
        let q_half_raw = tape.scale(q_raw_leaf, 0.5);
        let q_half_decay = tape.scale(q_decay, 0.5);
        let q = tape.add(q_half_raw, q_half_decay);
        let q_prior = tape.leaf(&Tensor::filled(t_len, 1, self.stats.q_prior));

        // recurrent trunk
        let z = tape.concat_cols(&[h_imu, h_uwb, q, q_prior]);
        let h_rnn = vars.trunk.sequence(tape, z, false);

        // gate
        let alpha = if gate_active {
            let g_in = tape.concat_cols(&[h_imu, h_uwb, q]);
            let g_raw = vars.gate.forward(tape, g_in);
            let a_pre = tape.sigmoid(g_raw);
            // while no anchor is visible the gate is pinned to the floor:
            // scale 0 detaches the learned value, offset supplies it
            let mut scale = vec![1.0; t_len];
            let mut offset = vec![0.0; t_len];
            for (i, &qr) in q_raw_vals.iter().enumerate() {
                if qr == 0.0 {
                    scale[i] = 0.0;
                    offset[i] = self.arch.alpha_min;
                }
            }
            tape.affine_mask(a_pre, scale, offset)
        } else {
            tape.leaf(&Tensor::filled(t_len, 1, 0.5))
        };

        let neg_alpha = tape.neg(alpha);
        let one_minus = tape.add_scalar(neg_alpha, 1.0);
        let imu_part = tape.mul_col(h_imu, alpha);
        let uwb_part = tape.mul_col(h_uwb, one_minus);
        let h_att = tape.add(imu_part, uwb_part);

        // saturating displacement head
        let head_in = tape.concat_cols(&[h_rnn, h_att]);
        let raw = vars.head.forward(tape, head_in);
        let s = self.stats.step_scale;
        let s_leaf = tape.leaf_from(1, 3, s.to_vec());
        let inv_s_leaf = tape.leaf_from(1, 3, s.iter().map(|v| 1.0 / v).collect());
        let squashed = tape.mul_row(raw, inv_s_leaf);
        let bounded = tape.tanh(squashed);
        let deltas = tape.mul_row(bounded, s_leaf);

        ForwardPass {
            deltas,
            alpha: tape.value(alpha).to_vec(),
            q_raw: q_raw_vals,
            h_imu,
            h_uwb,
            h_att,
            m_tilde,
            q,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "arch": self.arch,
            "stats": self.stats,
        });
        let mut ck = Checkpoint::new("fusion", meta);
        push_mlp(&mut ck, "imu_encoder", &self.imu_encoder);
        push_mlp(&mut ck, "uwb_encoder", &self.uwb_encoder);
        ck.push("anchor_emb", self.anchor_emb.clone());
        ck.push("decay_raw", self.decay_raw.clone());
        ck.push("trunk.w", self.trunk.w.clone());
        ck.push("trunk.u", self.trunk.u.clone());
        ck.push("trunk.b", self.trunk.b.clone());
        push_mlp(&mut ck, "gate", &self.gate);
        push_mlp(&mut ck, "head", &self.head);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NeuralError> {
        ck.expect_kind("fusion")?;
        let arch: FusionArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| NeuralError::Checkpoint(format!("bad arch block: {e}")))?;
        let stats: NormStats = serde_json::from_value(ck.meta["stats"].clone())
            .map_err(|e| NeuralError::Checkpoint(format!("bad stats block: {e}")))?;
        let trunk_w = ck.get("trunk.w")?.clone();
        let hidden = trunk_w.cols / 4;
        Ok(FusionNet {
            imu_encoder: load_mlp(ck, "imu_encoder")?,
            uwb_encoder: load_mlp(ck, "uwb_encoder")?,
            anchor_emb: ck.get("anchor_emb")?.clone(),
            decay_raw: ck.get("decay_raw")?.clone(),
            trunk: LstmParams {
                hidden,
                w: trunk_w,
                u: ck.get("trunk.u")?.clone(),
                b: ck.get("trunk.b")?.clone(),
            },
            gate: load_mlp(ck, "gate")?,
            head: load_mlp(ck, "head")?,
            stats,
            arch,
        })
    }
}

impl FusionVars {
    /// Bound vars in [`FusionNet::trainable`] order.
    pub fn var_list(&self) -> Vec<Var> {
        let mut v = self.imu_enc.vars();
        v.extend(self.uwb_enc.vars());
        v.push(self.emb);
        v.push(self.decay_raw);
        v.extend(self.trunk.vars());
        v.extend(self.gate.vars());
        v.extend(self.head.vars());
        v
    }

    fn decay_softplus(&self, tape: &mut Tape) -> Var {
        tape.softplus(self.decay_raw)
    }
}

fn push_mlp(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        ck.push(&format!("{prefix}.{i}.w"), layer.w.clone());
        ck.push(&format!("{prefix}.{i}.b"), layer.b.clone());
    }
}

fn load_mlp(ck: &Checkpoint, prefix: &str) -> Result<Mlp, NeuralError> {
    let mut layers = Vec::new();
    let mut i = 0;
    while let Ok(w) = ck.get(&format!("{prefix}.{i}.w")) {
        let b = ck.get(&format!("{prefix}.{i}.b"))?;
        layers.push(crate::neural::layers::Dense {
            w: w.clone(),
            b: b.clone(),
        });
        i += 1;
    }
    if layers.is_empty() {
        return Err(NeuralError::Checkpoint(format!(
            "no layers found under '{prefix}'"
        )));
    }
    Ok(Mlp { layers })
}

/// Plain accumulation of predicted displacements from a start position;
/// the returned track satisfies `p[k+1] = p[k] + d[k]` exactly as
/// written, addition by addition.
pub fn accumulate(start: [f64; 3], deltas: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut p = start;
    out.push(p);
    for d in deltas {
        p = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
        out.push(p);
    }
    out
}

/// Loss term weights and Huber knees, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_inc: f64,
    pub w_pos: f64,
    pub w_end: f64,
    pub delta_inc: f64,
    pub delta_pos: f64,
    pub delta_end: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_inc: 1.0,
            w_pos: 0.5,
            w_end: 0.5,
            delta_inc: 0.1,
            delta_pos: 1.0,
            delta_end: 1.0,
        }
    }
}

/// Composite training loss for one window: robust penalties on per-step
/// increments, on accumulated positions anchored at the true start, and
/// on the Euclidean endpoint miss. Each term is mean-reduced.
pub fn composite_loss(
    tape: &mut Tape,
    deltas: Var,
    window: &FusionWindow,
    weights: &LossWeights,
) -> Var {
    let t_len = window.steps();
    assert_eq!((deltas.rows, deltas.cols), (t_len, 3), "delta shape");

    let target_rows: Vec<Vec<f64>> = window.truth_deltas().iter().map(|d| d.to_vec()).collect();
    let targets = tape.leaf(&Tensor::from_rows(&target_rows));
    let r_inc = tape.sub(deltas, targets);
    let h_inc = tape.huber(r_inc, weights.delta_inc);
    let term_inc = tape.mean_all(h_inc);

    // positions by the same running addition the inference path uses
    let anchor = tape.leaf_from(1, 3, window.truth[0].to_vec());
    let stacked = tape.concat_rows(&[anchor, deltas]);
    let positions = tape.cumsum_rows(stacked);
    let truth_rows: Vec<Vec<f64>> = window.truth.iter().map(|p| p.to_vec()).collect();
    let truth = tape.leaf(&Tensor::from_rows(&truth_rows));
    let r_pos = tape.sub(positions, truth);
    let h_pos = tape.huber(r_pos, weights.delta_pos);
    let term_pos = tape.mean_all(h_pos);

    let p_end = tape.slice_rows(positions, t_len, t_len + 1);
    let t_end = tape.slice_rows(truth, t_len, t_len + 1);
    let e = tape.sub(p_end, t_end);
    let e2 = tape.mul(e, e);
    let sum = tape.row_sum(e2);
    let dist = tape.sqrt_guarded(sum);
    let term_end = tape.huber(dist, weights.delta_end);

    let a = tape.scale(term_inc, weights.w_inc);
    let b = tape.scale(term_pos, weights.w_pos);
    let c = tape.scale(term_end, weights.w_end);
    let ab = tape.add(a, b);
    tape.add(ab, c)
}
