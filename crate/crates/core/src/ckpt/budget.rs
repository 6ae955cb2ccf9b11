//! Checkpoint period and overhead algebra.
//!
//! With `Ts` seconds of pure computation, checkpoints of `Tc` seconds every
//! `tau` seconds give a total duration `D = Ts + (Ts / tau) * Tc` and an
//! overhead ratio `Ovh = D / Ts = 1 + Tc / tau`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{name} must be {requirement}, got {value}")]
pub struct DomainError {
    pub name: &'static str,
    pub requirement: &'static str,
    pub value: f64,
}

fn positive(name: &'static str, value: f64) -> Result<f64, DomainError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(DomainError {
            name,
            requirement: "positive and finite",
            value,
        })
    }
}

/// Period that keeps checkpoint cost at `budget` (a fraction) of compute time.
pub fn checkpoint_period(tc: f64, budget: f64) -> Result<f64, DomainError> {
    Ok(positive("tc", tc)? / positive("budget", budget)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overhead {
    /// Total duration.
    pub d: f64,
    /// `d / ts`.
    pub ovh: f64,
}

pub fn overhead(ts: f64, tc: f64, tau: f64) -> Result<Overhead, DomainError> {
    let ts = positive("ts", ts)?;
    let tau = positive("tau", tau)?;
    if !(tc.is_finite() && tc >= 0.0) {
        return Err(DomainError {
            name: "tc",
            requirement: "non-negative and finite",
            value: tc,
        });
    }
    Ok(Overhead {
        d: ts + (ts / tau) * tc,
        ovh: 1.0 + tc / tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_percent_of_a_minute() {
        assert_eq!(checkpoint_period(60.0, 0.01).unwrap(), 6000.0);
        let o = overhead(1e5, 60.0, 6000.0).unwrap();
        assert!((o.ovh - 1.01).abs() < 1e-12);
    }

    #[test]
    fn substitution() {
        let o = overhead(100.0, 1.0, 10.0).unwrap();
        assert_eq!(o.d, 110.0);
        assert!((o.ovh - 1.1).abs() < 1e-15);
        assert_eq!(checkpoint_period(60.0, 1.0).unwrap(), 60.0);
        assert_eq!(
            overhead(42.0, 0.0, 5.0).unwrap(),
            Overhead { d: 42.0, ovh: 1.0 }
        );
    }

    #[test]
    fn domain_errors() {
        assert!(checkpoint_period(0.0, 0.01).is_err());
        assert!(checkpoint_period(60.0, -1.0).is_err());
        assert!(checkpoint_period(f64::NAN, 0.5).is_err());
        assert!(overhead(0.0, 1.0, 1.0).is_err());
        assert!(overhead(1.0, -1.0, 1.0).is_err());
        assert!(overhead(1.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn period_round_trips(ts in 1e-3f64..1e6, tc in 1e-3f64..1e4, b in 1e-4f64..10.0) {
            let tau = checkpoint_period(tc, b).unwrap();
            let o = overhead(ts, tc, tau).unwrap();
            prop_assert!(o.ovh >= 1.0);
            prop_assert!((o.ovh - 1.0 - b).abs() <= 1e-12);
            prop_assert!((o.d / ts - o.ovh).abs() <= 1e-9 * o.ovh);
        }

        #[test]
        fn longer_period_means_less_overhead(tc in 1e-3f64..1e3, tau in 1e-3f64..1e4, grow in 1e-3f64..1e3) {
            let a = overhead(1.0, tc, tau).unwrap().ovh;
            let b = overhead(1.0, tc, tau * (1.0 + grow)).unwrap().ovh;
            prop_assert!(b < a);
        }
    }
}
