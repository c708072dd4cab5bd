//! f-divergence generators and the learning-signal transform `h_f(x) = f(x) - x f'(x)`.
//!
//! | kind | f(x)     | f'(x)      | h(x)     |
//! |------|----------|------------|----------|
//! | KL   | x ln x   | ln x + 1   | -x       |
//! | RKL  | -ln x    | -1/x       | 1 - ln x |
//!
//! Additional divergences plug in by implementing [`FGenerator`].

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Stand-in for `+inf` in discrete divergences with a support violation.
pub const DIVERGENCE_SATURATION: f64 = 1e12;

const SUM_TOLERANCE: f64 = 1e-9;

/// Convex generator `f` with `f(1) = 0`.
pub trait FGenerator {
    fn f(&self, x: f64) -> f64;
    fn fprime(&self, x: f64) -> f64;

    fn h(&self, x: f64) -> f64 {
        self.f(x) - x * self.fprime(x)
    }

    /// Right limit `f(0+)`, possibly `+inf`.
    fn f_at_zero(&self) -> f64;

    /// `lim_{x -> inf} f(x) / x`, the weight of mass where the reference measure vanishes.
    fn recession_slope(&self) -> f64;
}

/// Divergence kinds named in configuration files as `"kl"` / `"rkl"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Rkl,
}

impl FGenerator for DivergenceKind {
    fn f(&self, x: f64) -> f64 {
        match self {
            DivergenceKind::Kl => x * x.ln(),
            DivergenceKind::Rkl => -x.ln(),
        }
    }

    fn fprime(&self, x: f64) -> f64 {
        match self {
            DivergenceKind::Kl => x.ln() + 1.0,
            DivergenceKind::Rkl => -1.0 / x,
        }
    }

    fn h(&self, x: f64) -> f64 {
        // closed forms avoid cancellation in f - x f'
        match self {
            DivergenceKind::Kl => -x,
            DivergenceKind::Rkl => 1.0 - x.ln(),
        }
    }

    fn f_at_zero(&self) -> f64 {
        match self {
            DivergenceKind::Kl => 0.0,
            DivergenceKind::Rkl => f64::INFINITY,
        }
    }

    fn recession_slope(&self) -> f64 {
        match self {
            DivergenceKind::Kl => f64::INFINITY,
            DivergenceKind::Rkl => 0.0,
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceKind::Kl => write!(f, "kl"),
            DivergenceKind::Rkl => write!(f, "rkl"),
        }
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(DivergenceKind::Kl),
            "rkl" => Ok(DivergenceKind::Rkl),
            other => Err(Error::Config(format!(
                "unknown divergence kind {other:?}; expected \"kl\" or \"rkl\""
            ))),
        }
    }
}

fn check_positive(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("generator argument must be positive and finite, got {x}")))
    }
}

pub fn f_value<G: FGenerator + ?Sized>(gen: &G, x: f64) -> Result<f64> {
    check_positive(x)?;
    Ok(gen.f(x))
}

pub fn h_value<G: FGenerator + ?Sized>(gen: &G, x: f64) -> Result<f64> {
    check_positive(x)?;
    Ok(gen.h(x))
}

/// Result of a discrete divergence evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteDivergence {
    pub value: f64,
    /// Set when an infinite term was replaced by [`DIVERGENCE_SATURATION`].
    pub saturated: bool,
}

pub(crate) fn check_probability_vector(v: &[f64], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} is empty")));
    }
    if let Some(bad) = v.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{name} has invalid entry {bad}")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// `D_f(q || p) = sum_i p_i f(q_i / p_i)` with limit conventions for zero entries:
/// `q_i = 0` contributes `p_i f(0+)`, `p_i = 0 < q_i` contributes `q_i * lim f(x)/x`.
pub fn divergence_discrete<G: FGenerator + ?Sized>(
    gen: &G,
    q: &[f64],
    p: &[f64],
) -> Result<DiscreteDivergence> {
    if q.len() != p.len() {
        return Err(Error::ShapeMismatch { expected: p.len(), actual: q.len() });
    }
    check_probability_vector(q, "q")?;
    check_probability_vector(p, "p")?;

    let mut value = 0.0;
    let mut saturated = false;
    for (&qi, &pi) in q.iter().zip(p) {
        let term = match (qi > 0.0, pi > 0.0) {
            (true, true) => pi * gen.f(qi / pi),
            (false, true) => pi * gen.f_at_zero(),
            (true, false) => qi * gen.recession_slope(),
            (false, false) => 0.0,
        };
        if term.is_infinite() {
            saturated = true;
            value += DIVERGENCE_SATURATION;
        } else {
            value += term;
        }
    }
    Ok(DiscreteDivergence { value, saturated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn generator_values() {
        assert_eq!(f_value(&DivergenceKind::Kl, 1.0).unwrap(), 0.0);
        assert_eq!(f_value(&DivergenceKind::Rkl, 1.0).unwrap(), 0.0);
        assert!((f_value(&DivergenceKind::Kl, 2.0).unwrap() - 1.386294361).abs() < 1e-9);
        assert!((f_value(&DivergenceKind::Rkl, 2.0).unwrap() + 0.693147181).abs() < 1e-9);
        assert_eq!(h_value(&DivergenceKind::Kl, 2.0).unwrap(), -2.0);
        assert_eq!(h_value(&DivergenceKind::Kl, 1.0).unwrap(), -1.0);
        assert_eq!(h_value(&DivergenceKind::Rkl, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn non_positive_arguments_are_domain_errors() {
        for x in [0.0, -1.0, f64::NAN] {
            assert!(matches!(f_value(&DivergenceKind::Kl, x), Err(Error::Domain(_))));
            assert!(matches!(h_value(&DivergenceKind::Rkl, x), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn discrete_examples() {
        let d = |k, q: &[f64], p: &[f64]| divergence_discrete(&k, q, p).unwrap().value;
        assert_eq!(d(DivergenceKind::Kl, &[0.5, 0.5], &[0.5, 0.5]), 0.0);
        let expected_kl = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((d(DivergenceKind::Kl, &[0.5, 0.5], &[0.25, 0.75]) - expected_kl).abs() < 1e-12);
        assert!((expected_kl - 0.143841).abs() < 1e-6);
        let rkl = d(DivergenceKind::Rkl, &[0.5, 0.5], &[0.25, 0.75]);
        assert!((rkl - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn support_violations_saturate() {
        let kl = divergence_discrete(&DivergenceKind::Kl, &[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(kl.saturated);
        assert!(kl.value > 0.5 * DIVERGENCE_SATURATION);
        // q vanishes where p does not: KL finite, RKL infinite
        let kl = divergence_discrete(&DivergenceKind::Kl, &[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(!kl.saturated);
        assert!((kl.value - 2f64.ln()).abs() < 1e-12);
        let rkl = divergence_discrete(&DivergenceKind::Rkl, &[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(rkl.saturated);
        // RKL ignores q mass where p vanishes
        let rkl = divergence_discrete(&DivergenceKind::Rkl, &[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(!rkl.saturated);
    }

    #[test]
    fn invalid_vectors_rejected() {
        assert!(divergence_discrete(&DivergenceKind::Kl, &[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(divergence_discrete(&DivergenceKind::Kl, &[1.0], &[0.5, 0.5]).is_err());
        assert!(divergence_discrete(&DivergenceKind::Kl, &[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [DivergenceKind::Kl, DivergenceKind::Rkl] {
            assert_eq!(k.to_string().parse::<DivergenceKind>().unwrap(), k);
        }
        assert!("js".parse::<DivergenceKind>().is_err());
    }

    #[test]
    fn h_matches_numerical_derivative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for kind in [DivergenceKind::Kl, DivergenceKind::Rkl] {
            for _ in 0..1000 {
                let x: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
                let step = 1e-6 * x;
                let fprime = (kind.f(x + step) - kind.f(x - step)) / (2.0 * step);
                let numeric = kind.f(x) - x * fprime;
                let tol = 1e-6 * (1.0 + x.abs());
                assert!(
                    (kind.h(x) - numeric).abs() < tol,
                    "{kind} x={x}: {} vs {numeric}",
                    kind.h(x)
                );
            }
        }
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn non_negative_and_dual((q, p) in (2usize..6).prop_flat_map(|n| (simplex(n), simplex(n)))) {
            for kind in [DivergenceKind::Kl, DivergenceKind::Rkl] {
                let d = divergence_discrete(&kind, &q, &p).unwrap().value;
                prop_assert!(d >= -1e-12);
            }
            let rkl = divergence_discrete(&DivergenceKind::Rkl, &q, &p).unwrap().value;
            let kl_swapped = divergence_discrete(&DivergenceKind::Kl, &p, &q).unwrap().value;
            prop_assert!((rkl - kl_swapped).abs() < 1e-12);
        }

        #[test]
        fn generators_are_convex(x in 1e-3f64..1e3, y in 1e-3f64..1e3, lambda in 0.01f64..0.99) {
            for kind in [DivergenceKind::Kl, DivergenceKind::Rkl] {
                let mid = kind.f(lambda * x + (1.0 - lambda) * y);
                let chord = lambda * kind.f(x) + (1.0 - lambda) * kind.f(y);
                prop_assert!(mid <= chord + 1e-12 * (1.0 + chord.abs()));
            }
        }
    }
}
