//! Alternative double-sided two-way ranging.
//!
//! A ranging exchange collects two round-trip delays (`ra`, `rb`) and two
//! reply delays (`da`, `db`), one pair per device. The alternative
//! double-sided estimator cancels first-order clock-drift error without
//! requiring the two reply delays to match, which is what makes it usable
//! on devices with asymmetric response times.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum RangingError {
    #[error("non-finite delay in exchange")]
    NonFiniteDelay,
    #[error("delays must be positive: ra={ra}, rb={rb}, da={da}, db={db}")]
    NonPositiveDelay { ra: f64, rb: f64, da: f64, db: f64 },
    #[error("round trip shorter than peer reply delay (ra={ra} < db={db} or rb={rb} < da={da})")]
    InvertedRoundTrip { ra: f64, rb: f64, da: f64, db: f64 },
    #[error("degenerate exchange: {0}")]
    Degenerate(String),
}

/// Timestamps of one alternative double-sided exchange, in seconds.
///
/// `ra`/`rb` are the round-trip delays measured at the initiator and the
/// responder; `da`/`db` are the corresponding reply delays. A round trip
/// contains the peer's reply delay, so `ra >= db` and `rb >= da` with
/// equality only for zero flight time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwrExchange {
    pub ra: f64,
    pub rb: f64,
    pub da: f64,
    pub db: f64,
}

impl TwrExchange {
    pub fn new(ra: f64, rb: f64, da: f64, db: f64) -> Result<Self, RangingError> {
        let x = TwrExchange { ra, rb, da, db };
        x.validate()?;
        Ok(x)
    }

    pub fn validate(&self) -> Result<(), RangingError> {
        let TwrExchange { ra, rb, da, db } = *self;
        if !(ra.is_finite() && rb.is_finite() && da.is_finite() && db.is_finite()) {
            return Err(RangingError::NonFiniteDelay);
        }
        if ra <= 0.0 || rb <= 0.0 || da <= 0.0 || db <= 0.0 {
            return Err(RangingError::NonPositiveDelay { ra, rb, da, db });
        }
        if ra < db || rb < da {
            return Err(RangingError::InvertedRoundTrip { ra, rb, da, db });
        }
        Ok(())
    }
}

/// Estimated time of flight in seconds:
/// `(ra*rb - da*db) / (2*(ra + da))`.
///
/// A result of exactly zero is legal (zero-distance exchange). A negative
/// result or a non-positive denominator means the timestamps cannot have
/// come from a physical exchange and is reported as degenerate.
pub fn time_of_flight(x: &TwrExchange) -> Result<f64, RangingError> {
    x.validate()?;
    let denom = 2.0 * (x.ra + x.da);
    if denom <= 0.0 || !denom.is_finite() {
        return Err(RangingError::Degenerate(format!(
            "denominator 2*(ra+da) = {denom} is not positive"
        )));
    }
    let tof = (x.ra * x.rb - x.da * x.db) / denom;
    if tof < 0.0 {
        return Err(RangingError::Degenerate(format!(
            "negative time of flight {tof}"
        )));
    }
    Ok(tof)
}

/// Converts a time of flight to a one-way range in meters.
pub fn range_from_tof(tof: f64, c: f64) -> f64 {
    c * tof
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetric_exchange_recovers_true_flight_time() {
        // true flight 50 ns, both reply delays 1 ms
        let t = 50e-9;
        let d = 1e-3;
        let x = TwrExchange::new(2.0 * t + d, 2.0 * t + d, d, d).unwrap();
        let tof = time_of_flight(&x).unwrap();
        assert_relative_eq!(tof, t, max_relative = 1e-12);
    }

    #[test]
    fn equal_delays_mean_zero_flight() {
        let x = TwrExchange::new(1e-3, 1e-3, 1e-3, 1e-3).unwrap();
        assert_eq!(time_of_flight(&x).unwrap(), 0.0);
    }

    #[test]
    fn worked_exchange_matches_hand_arithmetic() {
        // (ra*rb - da*db) / (2*(ra + da))
        //   = (3e-6 * 3.2e-6 - 1e-6 * 1.1e-6) / (2 * 4e-6)
        //   = (9.6e-12 - 1.1e-12) / 8e-6 = 1.0625e-6 s
        let x = TwrExchange::new(3e-6, 3.2e-6, 1e-6, 1.1e-6).unwrap();
        let tof = time_of_flight(&x).unwrap();
        assert_relative_eq!(tof, 1.0625e-6, max_relative = 1e-12);
        let range = range_from_tof(tof, SPEED_OF_LIGHT);
        assert_relative_eq!(range, 318.529486625, max_relative = 1e-12);
    }

    #[test]
    fn range_conversion_is_linear_in_c() {
        assert_eq!(range_from_tof(0.0, SPEED_OF_LIGHT), 0.0);
        assert_relative_eq!(
            range_from_tof(1e-8, SPEED_OF_LIGHT),
            2.99792458,
            max_relative = 1e-15
        );
    }

    #[test]
    fn rejects_nonpositive_and_inverted_delays() {
        assert!(matches!(
            TwrExchange::new(0.0, 1e-3, 1e-3, 1e-3),
            Err(RangingError::NonPositiveDelay { .. })
        ));
        assert!(matches!(
            TwrExchange::new(1e-3, 1e-3, 1e-3, 2e-3),
            Err(RangingError::InvertedRoundTrip { .. })
        ));
        // negative flight through direct construction
        let x = TwrExchange {
            ra: 1e-3,
            rb: 1e-3,
            da: 1.1e-3,
            db: 0.9e-3,
        };
        assert!(matches!(
            time_of_flight(&x),
            Err(RangingError::InvertedRoundTrip { .. })
        ));
    }

    /// With a clock-rate error on one device, the double-sided estimate must
    /// beat the single-sided one. Scaling device B's measurements by
    /// (1 + delta/d) models a relative drift; the single-sided estimate
    /// (ra - db)/2 picks up an error of delta/2, while the double-sided
    /// estimate only sees the drift applied to the flight time itself.
    #[test]
    fn drift_error_stays_below_single_sided_error() {
        let t = 80e-9;
        let d = 1.2e-3;
        for delta in [1e-10, 1e-9, 1e-8, 5e-8] {
            let scale = 1.0 + delta / d;
            let x = TwrExchange::new(2.0 * t + d, (2.0 * t + d) * scale, d, d * scale).unwrap();
            let alt_err = (time_of_flight(&x).unwrap() - t).abs();
            let ss_err = ((x.ra - x.db) / 2.0 - t).abs();
            assert!(
                alt_err < ss_err,
                "delta={delta}: alt {alt_err} not below single-sided {ss_err}"
            );
            // the residual error is the drift applied to the flight time
            assert!(alt_err <= 2.0 * delta / d * t + 1e-18);
        }
    }
}
