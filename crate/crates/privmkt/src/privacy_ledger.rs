//! Privacy-loss accounting under linear composition.
//!
//! Each period releases an ε-differentially-private view; losses add in the
//! exponent, so the ledger is a plain left-to-right sum.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    history: Vec<f64>,
    budget: f64,
    epsilon_cap: f64,
}

impl PrivacyLedger {
    pub fn new(budget: f64, epsilon_cap: f64) -> Result<Self> {
        if !(budget >= 0.0) || !budget.is_finite() {
            return Err(Error::Validation(format!("budget must be finite and >= 0, got {budget}")));
        }
        if !(epsilon_cap > 0.0) || !epsilon_cap.is_finite() {
            return Err(Error::Validation(format!("epsilon cap must be finite and > 0, got {epsilon_cap}")));
        }
        Ok(Self { history: Vec::new(), budget, epsilon_cap })
    }

    /// Appends one period's loss. Zero is rejected: a release with ε = 0 carries no information.
    pub fn record(&mut self, eps: f64) -> Result<()> {
        check_entry(self.history.len(), eps, self.epsilon_cap)?;
        self.history.push(eps);
        Ok(())
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn epsilon_cap(&self) -> f64 {
        self.epsilon_cap
    }

    pub fn cumulative(&self) -> f64 {
        sum_left_to_right(&self.history)
    }

    pub fn commitment_period(&self) -> Option<usize> {
        first_crossing(&self.history, self.budget)
    }

    pub fn is_committed(&self) -> bool {
        self.commitment_period().is_some()
    }
}

fn check_entry(index: usize, eps: f64, cap: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Validation(format!("entry {index}: epsilon must be > 0, got {eps}")));
    }
    if eps > cap {
        return Err(Error::Validation(format!("entry {index}: epsilon {eps} exceeds cap {cap}")));
    }
    Ok(())
}

fn sum_left_to_right(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in xs {
        acc += x;
    }
    acc
}

fn first_crossing(history: &[f64], budget: f64) -> Option<usize> {
    let mut acc = 0.0;
    for (t, &e) in history.iter().enumerate() {
        acc += e;
        if acc >= budget {
            return Some(t);
        }
    }
    None
}

/// Total loss of a sequence of releases, validated against the cap.
pub fn compose_epsilons(history: &[f64], epsilon_cap: f64) -> Result<f64> {
    for (i, &e) in history.iter().enumerate() {
        check_entry(i, e, epsilon_cap)?;
    }
    Ok(sum_left_to_right(history))
}

/// Likelihood-ratio bound exp(m·ε) for databases at Hamming distance m.
pub fn indistinguishability_factor(eps: f64, m: u32) -> Result<f64> {
    if m == 0 {
        return Err(Error::Validation("m must be >= 1".into()));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Validation(format!("epsilon must be finite and >= 0, got {eps}")));
    }
    Ok((m as f64 * eps).exp())
}

/// First period whose cumulative loss reaches `budget`, or `None` if never reached.
pub fn commitment_period(history: &[f64], budget: f64, epsilon_cap: f64) -> Result<Option<usize>> {
    if !(budget >= 0.0) {
        return Err(Error::Validation(format!("budget must be >= 0, got {budget}")));
    }
    for (i, &e) in history.iter().enumerate() {
        check_entry(i, e, epsilon_cap)?;
    }
    Ok(first_crossing(history, budget))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn composition_examples() {
        assert_eq!(compose_epsilons(&[], 1.0).unwrap(), 0.0);
        assert_eq!(compose_epsilons(&[0.5], 1.0).unwrap(), 0.5);
        let total = compose_epsilons(&[0.1, 0.2, 0.3], 1.0).unwrap();
        assert!((total - 0.6).abs() < 1e-15);
    }

    #[test]
    fn composition_rejects_bad_entries() {
        let err = compose_epsilons(&[0.1, 0.0], 1.0).unwrap_err();
        assert!(err.to_string().contains("entry 1"));
        let err = compose_epsilons(&[2.0], 1.0).unwrap_err();
        assert!(err.to_string().contains("entry 0"));
    }

    #[test]
    fn factor_examples() {
        let f = indistinguishability_factor(0.2, 3).unwrap();
        assert!((f - 1.8221188003905089).abs() < 1e-12);
        assert_eq!(indistinguishability_factor(0.0, 5).unwrap(), 1.0);
        assert_eq!(indistinguishability_factor(0.7, 1).unwrap(), 0.7f64.exp());
        assert!(indistinguishability_factor(0.7, 0).is_err());
    }

    #[test]
    fn commitment_examples() {
        assert_eq!(commitment_period(&[0.2, 0.2, 0.2], 0.5, 1.0).unwrap(), Some(2));
        assert_eq!(commitment_period(&[0.1], 1.0, 1.0).unwrap(), None);
        assert_eq!(commitment_period(&[0.3, 0.4], 0.0, 1.0).unwrap(), Some(0));
    }

    #[test]
    fn ledger_record_and_commit() {
        let mut l = PrivacyLedger::new(0.5, 0.3).unwrap();
        assert!(l.record(0.0).is_err());
        assert!(l.record(0.4).is_err());
        l.record(0.2).unwrap();
        assert!(!l.is_committed());
        l.record(0.3).unwrap();
        assert_eq!(l.commitment_period(), Some(1));
        assert_eq!(l.cumulative(), 0.5);
    }

    fn eps_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(1e-6f64..1.0, 0..20)
    }

    proptest! {
        #[test]
        fn additive_under_concatenation(a in eps_vec(), b in eps_vec()) {
            let mut ab = a.clone();
            ab.extend_from_slice(&b);
            let lhs = compose_epsilons(&ab, 1.0).unwrap();
            // left-to-right sum of ab equals continuing the running sum of a through b
            let mut acc = compose_epsilons(&a, 1.0).unwrap();
            for &x in &b { acc += x; }
            prop_assert_eq!(lhs, acc);
            let split = compose_epsilons(&a, 1.0).unwrap() + compose_epsilons(&b, 1.0).unwrap();
            prop_assert!((lhs - split).abs() <= 1e-12 * (1.0 + lhs));
        }

        #[test]
        fn commitment_monotone_in_budget(h in eps_vec(), b1 in 0.0f64..5.0, db in 0.0f64..5.0) {
            let p1 = commitment_period(&h, b1, 1.0).unwrap();
            let p2 = commitment_period(&h, b1 + db, 1.0).unwrap();
            match (p1, p2) {
                (Some(a), Some(b)) => prop_assert!(b >= a),
                (None, Some(_)) => prop_assert!(false, "larger budget committed earlier"),
                _ => {}
            }
        }

        #[test]
        fn factor_scales(eps in 0.0f64..2.0, m in 1u32..10) {
            let a = indistinguishability_factor(eps, m).unwrap();
            let b = indistinguishability_factor(m as f64 * eps, 1).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }
    }
}
