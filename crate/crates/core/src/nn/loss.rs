//! Cross-entropy and KL divergence, both on probability vectors and on the tape.

use super::tape::{Tape, Var};
use super::tensor::{log_softmax, Tensor};
use crate::error::{Error, Result};

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

pub fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("negative or non-finite probability in {p:?}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// `−Σ y_k ln q_k`; zero-weight terms contribute nothing even where `q_k = 0`.
pub fn cross_entropy(y: &[f64], q: &[f64]) -> Result<f64> {
    check_distribution(y)?;
    check_distribution(q)?;
    if y.len() != q.len() {
        return Err(Error::Domain(format!("length {} vs {}", y.len(), q.len())));
    }
    Ok(-y
        .iter()
        .zip(q)
        .filter(|(y, _)| **y > 0.0)
        .map(|(y, q)| y * q.ln())
        .sum::<f64>())
}

/// `KL(p‖q) = Σ p_k (ln p_k − ln q_k)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    check_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::Domain(format!("length {} vs {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.ln()))
        .sum())
}

/// Cross-entropy against a class index, from logits in log space.
pub fn cross_entropy_from_logits(target: usize, logits: &[f64]) -> f64 {
    -log_softmax(logits)[target]
}

/// `KL(p‖softmax(logits))` in log space.
pub fn kl_from_logits(p: &[f64], logits: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    let log_q = log_softmax(logits);
    Ok(p.iter()
        .zip(&log_q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| p * (p.ln() - lq))
        .sum())
}

/// `Σ_rows −Σ_k w_{rk} · logq_{rk}` for constant weights `w` (targets).
pub fn weighted_nll(tape: &mut Tape<'_>, log_q: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(log_q, w)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// `Σ_rows KL(p_r ‖ q_r)` where `p` is constant. The entropy part of the KL has
/// no gradient, so it is added as a constant to keep the value exact.
pub fn kl_rows(tape: &mut Tape<'_>, log_q: Var, p: &Tensor) -> Result<Var> {
    let neg_entropy: f64 = p
        .data()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum();
    let cross = weighted_nll(tape, log_q, p)?;
    let c = tape.constant(Tensor::scalar(neg_entropy));
    tape.add(cross, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        for p in [vec![1.0], vec![0.25; 4], vec![0.9, 0.1], vec![0.0, 0.3, 0.7]] {
            assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn kl_fixture() {
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let got = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let ce = cross_entropy(&[0.0, 1.0], &[0.6, 0.4]).unwrap();
        assert!((ce + 0.4f64.ln()).abs() < 1e-15);
        assert!((cross_entropy_from_logits(1, &[0.6f64.ln(), 0.4f64.ln()]) - ce).abs() < 1e-12);
    }

    #[test]
    fn invalid_distributions_are_domain_errors() {
        assert!(matches!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::Domain(_))));
        assert!(matches!(cross_entropy(&[1.0], &[-0.1]), Err(Error::Domain(_))));
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn tape_kl_matches_direct_formula() {
        let p = Tensor::new(2, 3, vec![0.2, 0.5, 0.3, 0.0, 0.9, 0.1]).unwrap();
        let logits = Tensor::new(2, 3, vec![0.1, -0.4, 1.3, 2.0, 0.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let l = tape.variable(logits.clone());
        let lq = tape.log_softmax_rows(l);
        let kl = kl_rows(&mut tape, lq, &p).unwrap();
        let direct: f64 = (0..2)
            .map(|r| kl_from_logits(p.row(r), logits.row(r)).unwrap())
            .sum();
        assert!((tape.value(kl).item() - direct).abs() < 1e-12);
    }
}
