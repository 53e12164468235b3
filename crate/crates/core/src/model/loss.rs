use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
    /// Set when a probability hit [`PROB_FLOOR`] inside a logarithm.
    pub clamped: bool,
}

impl LossBreakdown {
    pub fn kl_weighted(&self) -> f64 {
        self.beta * self.kl
    }
}

/// `KL(reference ‖ local) = Σ_c ref_c · ln(ref_c / local_c)`, never negative.
pub fn kl_divergence(reference: &[f64], local: &[f64]) -> (f64, bool) {
    let mut clamped = false;
    let mut kl = 0.0;
    for (&r, &l) in reference.iter().zip(local) {
        if r <= 0.0 {
            continue;
        }
        if l < PROB_FLOOR {
            clamped = true;
        }
        kl += r * (r / l.max(PROB_FLOOR)).ln();
    }
    (kl.max(0.0), clamped)
}

/// Cross-entropy on `label` plus `beta` times the KL pull toward `probs_ref`.
pub fn loss(probs_local: &[f64], probs_ref: &[f64], label: usize, beta: f64) -> Result<LossBreakdown> {
    if probs_local.len() != probs_ref.len() {
        return Err(Error::shape(format!(
            "{} local vs {} reference probabilities",
            probs_local.len(),
            probs_ref.len()
        )));
    }
    if label >= probs_local.len() {
        return Err(Error::shape(format!(
            "label {label} out of range for {} classes",
            probs_local.len()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::config("beta", "must be non-negative"));
    }
    let p = probs_local[label];
    let mut clamped = p < PROB_FLOOR;
    let ce = -p.max(PROB_FLOOR).ln();
    let (kl, kl_clamped) = kl_divergence(probs_ref, probs_local);
    clamped |= kl_clamped;
    Ok(LossBreakdown {
        ce,
        kl,
        total: ce + beta * kl,
        beta,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_distributions_have_zero_kl() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let l = loss(&p, &p, 3, 0.8).unwrap();
        assert_eq!(l.kl, 0.0);
        assert!((l.total - l.ce).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_has_zero_ce() {
        let l = loss(&[0.0, 1.0, 0.0], &[0.2, 0.6, 0.2], 1, 0.0).unwrap();
        assert_eq!(l.ce, 0.0);
        assert!(l.clamped);
    }

    #[test]
    fn kl_against_scalar_evaluation() {
        let local = [0.25; 4];
        let reference = [0.97, 0.01, 0.01, 0.01];
        // independent hand evaluation of each term
        let expected = 0.97 * (0.97f64 / 0.25).ln() + 3.0 * (0.01 * (0.01f64 / 0.25).ln());
        let l = loss(&local, &reference, 0, 0.8).unwrap();
        assert!((l.kl - expected).abs() < 1e-14);
        assert!((expected - 1.2185938).abs() < 1e-6);
        assert!((l.ce - 4f64.ln()).abs() < 1e-15);
        assert!((l.total - (l.ce + 0.8 * l.kl)).abs() < 1e-12);
    }

    #[test]
    fn zero_label_probability_is_clamped() {
        let l = loss(&[1.0, 0.0], &[0.5, 0.5], 1, 1.0).unwrap();
        assert!(l.clamped);
        assert!((l.ce - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(l.total.is_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(loss(&[0.5, 0.5], &[1.0], 0, 0.0).is_err());
        assert!(loss(&[0.5, 0.5], &[0.5, 0.5], 2, 0.0).is_err());
        assert!(loss(&[0.5, 0.5], &[0.5, 0.5], 0, -1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn kl_is_non_negative(a in simplex(5), b in simplex(5)) {
                let (kl, _) = kl_divergence(&a, &b);
                prop_assert!(kl >= 0.0);
                prop_assert_eq!(kl_divergence(&a, &a).0, 0.0);
            }
        }
    }
}
