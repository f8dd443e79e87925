//! Range-based position estimation (multilateration) and geometric dilution
//! of precision.
//!
//! The solver minimizes the mean squared range residual
//! `MSE(p) = mean_i (||p - a_i|| - d_i)^2` with Levenberg-Marquardt. It
//! returns a result even for underdetermined anchor sets (fewer than four),
//! flagging them, because downstream consumers deliberately differ in how
//! they treat such fixes.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::UwbRecord;
use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum TrilatError {
    #[error("anchor/range length mismatch: {anchors} anchors, {ranges} ranges")]
    LengthMismatch { anchors: usize, ranges: usize },
    #[error("no anchors supplied")]
    Empty,
    #[error("range {index} is negative or non-finite: {value}")]
    BadRange { index: usize, value: f64 },
    #[error("anchor {index} has a non-finite coordinate")]
    BadAnchor { index: usize },
    #[error("gdop needs at least 4 anchors, got {0}")]
    InsufficientAnchors(usize),
    #[error("anchor {index} coincides with the evaluation point")]
    CoincidentAnchor { index: usize },
    #[error("singular geometry: {0}")]
    SingularGeometry(String),
}

/// Output of one multilateration solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixResult {
    pub position: [f64; 3],
    /// Mean squared range residual at the returned position.
    pub residual_mse: f64,
    pub n_anchors: usize,
    /// Dilution of precision at the solution; `None` when fewer than four
    /// anchors are available or the geometry is singular.
    pub gdop: Option<f64>,
    /// Whether the gradient-norm stopping criterion was met.
    pub converged: bool,
    /// Set when fewer than four anchors constrain the solve.
    pub underdetermined: bool,
}

impl FixResult {
    pub fn position_vec(&self) -> Vec3 {
        Vector3::from(self.position)
    }
}

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;
const MAX_ITERS: usize = 100;
// internal stop threshold, one order tighter than the documented guarantee
// that converged fixes satisfy ||grad MSE|| < 1e-8 * (1 + MSE)
const GRAD_TOL_FACTOR: f64 = 1e-9;

fn residuals_cost(anchors: &[Vec3], ranges: &[f64], p: &Vec3) -> f64 {
    let n = anchors.len() as f64;
    anchors
        .iter()
        .zip(ranges)
        .map(|(a, d)| {
            let r = (p - a).norm() - d;
            r * r
        })
        .sum::<f64>()
        / n
}

/// Accumulates J^T J, J^T r and the MSE gradient norm at `p`.
fn normal_equations(anchors: &[Vec3], ranges: &[f64], p: &Vec3) -> (Matrix3<f64>, Vec3, f64) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (a, d) in anchors.iter().zip(ranges) {
        let diff = p - a;
        let norm = diff.norm().max(1e-12);
        let dir = diff / norm;
        let r = norm - d;
        jtj += dir * dir.transpose();
        jtr += dir * r;
    }
    let grad_norm = (jtr * (2.0 / anchors.len() as f64)).norm();
    (jtj, jtr, grad_norm)
}

fn validate_inputs(anchors: &[Vec3], ranges: &[f64]) -> Result<(), TrilatError> {
    if anchors.is_empty() {
        return Err(TrilatError::Empty);
    }
    if anchors.len() != ranges.len() {
        return Err(TrilatError::LengthMismatch {
            anchors: anchors.len(),
            ranges: ranges.len(),
        });
    }
    for (index, a) in anchors.iter().enumerate() {
        if !(a.x.is_finite() && a.y.is_finite() && a.z.is_finite()) {
            return Err(TrilatError::BadAnchor { index });
        }
    }
    for (index, &value) in ranges.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(TrilatError::BadRange { index, value });
        }
    }
    Ok(())
}

/// Levenberg-Marquardt minimization of the mean squared range residual.
///
/// Damping starts at 1e-3, is multiplied by 10 after a rejected step and
/// divided by 10 after an accepted one, for at most 100 iterations. With
/// four or more anchors whose normal matrix is rank-deficient at the
/// solution, the geometry is reported as singular; with fewer than four
/// anchors the result is returned and flagged underdetermined instead.
pub fn solve(anchors: &[Vec3], ranges: &[f64], init: Vec3) -> Result<FixResult, TrilatError> {
    validate_inputs(anchors, ranges)?;
    let n = anchors.len();

    let mut p = init;
    let mut cost = residuals_cost(anchors, ranges, &p);
    let mut lambda = LAMBDA_INIT;
    let mut converged = false;

    for _ in 0..MAX_ITERS {
        let (jtj, jtr, grad_norm) = normal_equations(anchors, ranges, &p);
        if grad_norm < GRAD_TOL_FACTOR * (1.0 + cost) {
            converged = true;
            break;
        }
        // inner loop: raise damping until a step reduces the cost
        let mut stepped = false;
        while lambda <= LAMBDA_MAX {
            let damped = jtj + Matrix3::identity() * lambda;
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-jtr)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = p + step;
            let candidate_cost = residuals_cost(anchors, ranges, &candidate);
            if candidate_cost < cost {
                p = candidate;
                cost = candidate_cost;
                lambda = (lambda / 10.0).max(1e-12);
                stepped = true;
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            // no descent direction at any damping: treat the point as final
            let (_, _, g) = normal_equations(anchors, ranges, &p);
            converged = g < GRAD_TOL_FACTOR * (1.0 + cost);
            break;
        }
    }
    if !converged {
        let (_, _, g) = normal_equations(anchors, ranges, &p);
        converged = g < GRAD_TOL_FACTOR * (1.0 + cost);
    }

    let underdetermined = n < 4;
    if !underdetermined {
        let (jtj, _, _) = normal_equations(anchors, ranges, &p);
        let eigen = jtj.symmetric_eigen();
        let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let min_eig = eigen
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if max_eig <= 0.0 || min_eig <= 1e-12 * max_eig {
            return Err(TrilatError::SingularGeometry(format!(
                "normal matrix rank-deficient at solution (eigenvalues {:?})",
                eigen.eigenvalues.as_slice()
            )));
        }
    }

    let gdop_value = if underdetermined {
        None
    } else {
        gdop(anchors, &p).ok()
    };

    Ok(FixResult {
        position: [p.x, p.y, p.z],
        residual_mse: cost,
        n_anchors: n,
        gdop: gdop_value,
        converged,
        underdetermined,
    })
}

/// Geometric dilution of precision at `p`.
///
/// Builds the geometry matrix with one row `[unit vector from p to a_i, 1]`
/// per anchor and returns `sqrt(trace((G^T G)^-1))`, computed through the
/// eigenvalues of `G^T G` so near-singular geometries are detected instead
/// of silently inverted.
pub fn gdop(anchors: &[Vec3], p: &Vec3) -> Result<f64, TrilatError> {
    if anchors.len() < 4 {
        return Err(TrilatError::InsufficientAnchors(anchors.len()));
    }
    let mut gtg = Matrix4::<f64>::zeros();
    for (index, a) in anchors.iter().enumerate() {
        let diff = a - p;
        let norm = diff.norm();
        if norm < 1e-9 {
            return Err(TrilatError::CoincidentAnchor { index });
        }
        let u = diff / norm;
        let row = Vector4::new(u.x, u.y, u.z, 1.0);
        gtg += row * row.transpose();
    }
    let eigen = gtg.symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min_eig = eigen
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if max_eig <= 0.0 || min_eig <= 1e-12 * max_eig {
        return Err(TrilatError::SingularGeometry(format!(
            "geometry matrix rank-deficient (eigenvalues {:?})",
            eigen.eigenvalues.as_slice()
        )));
    }
    let trace_inv: f64 = eigen.eigenvalues.iter().map(|l| 1.0 / l).sum();
    Ok(trace_inv.sqrt())
}

/// A group of ranging measurements close enough in time to be solved as one
/// position fix.
#[derive(Debug, Clone, PartialEq)]
pub struct RangingEpoch {
    /// Mean timestamp of the contributing records.
    pub t: f64,
    /// Per-anchor freshest valid range inside the epoch window.
    pub ranges: Vec<(usize, f64)>,
}

/// Groups valid ranging records into fixed windows of `window` seconds.
///
/// Within one window the freshest record per anchor wins. Invalid records
/// never contribute. Windows without any valid record produce no epoch.
pub fn group_epochs(records: &[UwbRecord], window: f64) -> Vec<RangingEpoch> {
    assert!(window > 0.0, "epoch window must be positive");
    let mut sorted: Vec<&UwbRecord> = records.iter().filter(|r| r.valid).collect();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));

    let mut epochs: Vec<RangingEpoch> = Vec::new();
    let mut current_bin: Option<i64> = None;
    // anchor id -> (t, range), plus running sum of timestamps for the mean
    let mut bucket: Vec<(usize, f64, f64)> = Vec::new();

    let flush = |bucket: &mut Vec<(usize, f64, f64)>, epochs: &mut Vec<RangingEpoch>| {
        if bucket.is_empty() {
            return;
        }
        let t = bucket.iter().map(|(_, t, _)| t).sum::<f64>() / bucket.len() as f64;
        let mut ranges: Vec<(usize, f64)> = bucket.iter().map(|&(a, _, d)| (a, d)).collect();
        ranges.sort_by_key(|&(a, _)| a);
        epochs.push(RangingEpoch { t, ranges });
        bucket.clear();
    };

    for rec in sorted {
        let bin = (rec.t / window + 1e-9).floor() as i64;
        if current_bin != Some(bin) {
            flush(&mut bucket, &mut epochs);
            current_bin = Some(bin);
        }
        match bucket.iter_mut().find(|(a, _, _)| *a == rec.anchor_id) {
            Some(entry) => {
                // freshest record per anchor wins; records arrive time-sorted
                entry.1 = rec.t;
                entry.2 = rec.range;
            }
            None => bucket.push((rec.anchor_id, rec.t, rec.range)),
        }
    }
    flush(&mut bucket, &mut epochs);
    epochs
}

/// One timestamped fix from the sequential epoch solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochFix {
    pub t: f64,
    pub fix: FixResult,
}

/// Solves every epoch sequentially, warm-starting each solve from the
/// previous fix (first epoch: centroid of its participating anchors).
/// Epochs whose geometry is singular are skipped.
pub fn solve_epochs(anchors: &[Vec3], epochs: &[RangingEpoch]) -> Vec<EpochFix> {
    let mut fixes: Vec<EpochFix> = Vec::new();
    let mut prev: Option<Vec3> = None;
    for epoch in epochs {
        let sub_anchors: Vec<Vec3> = epoch.ranges.iter().map(|&(a, _)| anchors[a]).collect();
        let ranges: Vec<f64> = epoch.ranges.iter().map(|&(_, d)| d).collect();
        let init = prev.unwrap_or_else(|| {
            sub_anchors.iter().sum::<Vec3>() / sub_anchors.len() as f64
        });
        match solve(&sub_anchors, &ranges, init) {
            Ok(fix) => {
                prev = Some(fix.position_vec());
                fixes.push(EpochFix { t: epoch.t, fix });
            }
            Err(_) => {
                // degenerate geometry in one window must not kill the run
            }
        }
    }
    fixes
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn tetrahedron() -> Vec<Vec3> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(10.0, 0.0, 0.0),
            Vector3::new(0.0, 10.0, 0.0),
            Vector3::new(0.0, 0.0, 10.0),
        ]
    }

    fn exact_ranges(anchors: &[Vec3], p: &Vec3) -> Vec<f64> {
        anchors.iter().map(|a| (p - a).norm()).collect()
    }

    #[test]
    fn noiseless_tetrahedron_recovers_the_point() {
        let anchors = tetrahedron();
        let p_true = Vector3::new(1.0, 2.0, 3.0);
        let ranges = exact_ranges(&anchors, &p_true);
        let fix = solve(&anchors, &ranges, Vector3::zeros()).unwrap();
        assert!(fix.converged);
        assert!(!fix.underdetermined);
        assert!((fix.position_vec() - p_true).norm() < 1e-9);
        assert!(fix.residual_mse < 1e-18);
    }

    #[test]
    fn single_anchor_is_flagged_but_solved_to_the_sphere() {
        let anchors = vec![Vector3::new(0.0, 0.0, 0.0)];
        let fix = solve(&anchors, &[5.0], Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert!(fix.underdetermined);
        assert!(fix.gdop.is_none());
        let dist = (fix.position_vec() - anchors[0]).norm();
        assert!((dist - 5.0).abs() < 1e-6, "distance {dist} not on sphere");
    }

    #[test]
    fn collinear_anchors_report_singular_geometry() {
        let anchors: Vec<Vec3> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let p_true = Vector3::new(2.0, 3.0, 0.0);
        let ranges = exact_ranges(&anchors, &p_true);
        let err = solve(&anchors, &ranges, Vector3::new(1.0, 1.0, 1.0)).unwrap_err();
        assert!(matches!(err, TrilatError::SingularGeometry(_)));
        assert!(matches!(
            gdop(&anchors.iter().cloned().take(4).collect::<Vec<_>>(), &p_true),
            Err(TrilatError::SingularGeometry(_))
        ));
    }

    #[test]
    fn input_validation_errors() {
        let anchors = tetrahedron();
        assert!(matches!(
            solve(&anchors, &[1.0, 2.0], Vector3::zeros()),
            Err(TrilatError::LengthMismatch { .. })
        ));
        assert!(matches!(
            solve(&[], &[], Vector3::zeros()),
            Err(TrilatError::Empty)
        ));
        assert!(matches!(
            solve(&anchors, &[1.0, 2.0, -0.5, 1.0], Vector3::zeros()),
            Err(TrilatError::BadRange { index: 2, .. })
        ));
        assert!(matches!(
            gdop(&anchors[..3], &Vector3::zeros()),
            Err(TrilatError::InsufficientAnchors(3))
        ));
    }

    #[test]
    fn cube_corner_gdop_matches_closed_form() {
        // unit cube corners seen from the center: G^T G is diagonal
        // diag(8/3, 8/3, 8/3, 8), so trace of the inverse is 9/8 + 1/8.
        let mut anchors = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    anchors.push(Vector3::new(x, y, z));
                }
            }
        }
        let center = Vector3::new(0.5, 0.5, 0.5);
        let g = gdop(&anchors, &center).unwrap();
        assert_relative_eq!(g, 1.25_f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn gdop_matches_independent_gauss_jordan_inverse() {
        let mut rng = crate::sub_rng(11, "trilat/gdop-oracle");
        for _ in 0..50 {
            let anchors: Vec<Vec3> = (0..6)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-20.0..20.0),
                    )
                })
                .collect();
            let p = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let Ok(g) = gdop(&anchors, &p) else { continue };

            // independent path: build G^T G with plain loops, invert by
            // Gauss-Jordan elimination on a 4x8 augmented system
            let mut gtg = [[0.0_f64; 4]; 4];
            for a in &anchors {
                let diff = a - p;
                let n = diff.norm();
                let row = [diff.x / n, diff.y / n, diff.z / n, 1.0];
                for i in 0..4 {
                    for j in 0..4 {
                        gtg[i][j] += row[i] * row[j];
                    }
                }
            }
            let mut aug = [[0.0_f64; 8]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    aug[i][j] = gtg[i][j];
                }
                aug[i][4 + i] = 1.0;
            }
            for col in 0..4 {
                let pivot_row = (col..4)
                    .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
                    .unwrap();
                aug.swap(col, pivot_row);
                let pivot = aug[col][col];
                assert!(pivot.abs() > 1e-12);
                for v in aug[col].iter_mut() {
                    *v /= pivot;
                }
                let base = aug[col];
                for (row, vals) in aug.iter_mut().enumerate() {
                    if row != col {
                        let factor = vals[col];
                        for (v, b) in vals.iter_mut().zip(base.iter()) {
                            *v -= factor * b;
                        }
                    }
                }
            }
            let trace_inv: f64 = (0..4).map(|i| aug[i][4 + i]).sum();
            assert_relative_eq!(g, trace_inv.sqrt(), max_relative = 1e-9);
        }
    }

    #[test]
    fn near_coplanar_geometry_dilutes_precision() {
        let good = tetrahedron();
        let p = Vector3::new(3.0, 3.0, 3.0);
        let g_good = gdop(&good, &p).unwrap();
        // same x/y layout but squashed to a 1 cm slab in z
        let flat: Vec<Vec3> = good
            .iter()
            .map(|a| Vector3::new(a.x, a.y, a.z * 0.001))
            .collect();
        let g_flat = gdop(&flat, &p).unwrap();
        assert!(
            g_flat > 3.0 * g_good,
            "flat {g_flat} not clearly worse than {g_good}"
        );
    }

    #[test]
    fn epochs_group_by_window_and_keep_freshest_range() {
        use crate::sim::UwbRecord;
        let mk = |t: f64, anchor_id: usize, range: f64, valid: bool| UwbRecord {
            t,
            anchor_id,
            range,
            valid,
        };
        let records = vec![
            mk(0.010, 0, 10.0, true),
            mk(0.020, 0, 11.0, true), // same window, same anchor: replaces
            mk(0.030, 1, 20.0, true),
            mk(0.040, 2, 30.0, false), // invalid: ignored
            mk(0.060, 1, 21.0, true),  // next window
            mk(0.110, 3, 40.0, true),
        ];
        let epochs = group_epochs(&records, 0.05);
        assert_eq!(epochs.len(), 3);
        assert_eq!(epochs[0].ranges, vec![(0, 11.0), (1, 20.0)]);
        assert_eq!(epochs[1].ranges, vec![(1, 21.0)]);
        assert_eq!(epochs[2].ranges, vec![(3, 40.0)]);
        // mean over the two kept records, at 0.020 and 0.030
        assert_relative_eq!(epochs[0].t, 0.025, max_relative = 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Translating anchors, ranges untouched, translates the solution.
        #[test]
        fn translation_equivariance(
            px in -5.0..5.0f64, py in -5.0..5.0f64, pz in 0.0..5.0f64,
            tx in -50.0..50.0f64, ty in -50.0..50.0f64, tz in -50.0..50.0f64,
        ) {
            let anchors = tetrahedron();
            let p_true = Vector3::new(px, py, pz);
            let ranges = exact_ranges(&anchors, &p_true);
            let shift = Vector3::new(tx, ty, tz);
            let moved: Vec<Vec3> = anchors.iter().map(|a| a + shift).collect();
            let base = solve(&anchors, &ranges, Vector3::new(2.0, 2.0, 2.0)).unwrap();
            let shifted = solve(&moved, &ranges, Vector3::new(2.0, 2.0, 2.0) + shift).unwrap();
            let delta = (shifted.position_vec() - base.position_vec() - shift).norm();
            prop_assert!(delta < 1e-7, "translation broke equivariance by {delta}");
        }

        /// Any converged fix satisfies the gradient-norm stopping bound.
        #[test]
        fn converged_fixes_have_small_gradient(
            seed in 0u64..1000,
        ) {
            let mut rng = crate::sub_rng(seed, "trilat/grad-check");
            let anchors: Vec<Vec3> = (0..5)
                .map(|_| Vector3::new(
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(0.0..30.0),
                ))
                .collect();
            let p_true = Vector3::new(
                rng.gen_range(5.0..25.0),
                rng.gen_range(5.0..25.0),
                rng.gen_range(5.0..25.0),
            );
            let ranges: Vec<f64> = exact_ranges(&anchors, &p_true)
                .iter()
                .map(|d| (d + rng.gen_range(-0.3..0.3)).max(0.0))
                .collect();
            let Ok(fix) = solve(&anchors, &ranges, Vector3::new(15.0, 15.0, 15.0)) else {
                return Ok(());
            };
            if fix.converged {
                let (_, jtr, _) = normal_equations(&anchors, &ranges, &fix.position_vec());
                let grad = (jtr * (2.0 / anchors.len() as f64)).norm();
                prop_assert!(
                    grad < 1e-8 * (1.0 + fix.residual_mse),
                    "gradient {grad} too large for mse {}",
                    fix.residual_mse
                );
            }
        }
    }
}
