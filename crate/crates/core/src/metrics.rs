//! Cosine scoring and equal error rate.

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: alloc::vec![a.len()],
            rhs: alloc::vec![b.len()],
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / libm::sqrt(na * nb))
}

/// One operating point: a trial is accepted when `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

/// FRR and FAR at every distinct score plus a threshold above all scores,
/// in increasing threshold order.
pub fn eer_curve(same: &[f64], diff: &[f64]) -> Result<Vec<RatePoint>> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::EmptyScores);
    }
    if same.iter().chain(diff).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score"));
    }
    let mut s = same.to_vec();
    let mut d = diff.to_vec();
    s.sort_by(f64::total_cmp);
    d.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = s.iter().chain(&d).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        while i < s.len() && s[i] < t {
            i += 1;
        }
        while j < d.len() && d[j] < t {
            j += 1;
        }
        out.push(RatePoint {
            threshold: t,
            frr: i as f64 / s.len() as f64,
            far: (d.len() - j) as f64 / d.len() as f64,
        });
    }
    Ok(out)
}

/// Equal error rate, linearly interpolated where `FRR - FAR` changes sign.
pub fn compute_eer(same: &[f64], diff: &[f64]) -> Result<f64> {
    let curve = eer_curve(same, diff)?;
    // FRR rises and FAR falls with the threshold, so d is non-decreasing from
    // -1 (at the lowest score, FRR = 0, FAR = 1) to +1 (above all scores).
    let mut prev = curve[0];
    for &p in &curve {
        let d = p.frr - p.far;
        if d == 0.0 {
            return Ok(p.frr);
        }
        if d > 0.0 {
            let d0 = prev.frr - prev.far;
            let w = -d0 / (d - d0);
            let frr = prev.frr + w * (p.frr - prev.frr);
            let far = prev.far + w * (p.far - prev.far);
            return Ok(0.5 * (frr + far));
        }
        prev = p;
    }
    Ok(0.5 * (prev.frr + prev.far))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_scores_have_zero_eer() {
        assert_eq!(compute_eer(&[0.9, 0.8], &[0.1, 0.2, 0.3]).unwrap(), 0.0);
    }

    #[test]
    fn inverted_scores_have_full_eer() {
        assert_eq!(compute_eer(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_score(&[1.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
        assert!(matches!(cosine_score(&[0.0], &[1.0]), Err(Error::ZeroVector)));
        assert!(cosine_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(matches!(compute_eer(&[], &[0.1]), Err(Error::EmptyScores)));
    }
}
