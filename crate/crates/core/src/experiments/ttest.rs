//! Two-tailed paired Student t-test. The t CDF is evaluated through the
//! regularized incomplete beta function computed with Lentz's continued
//! fraction, converged to well below 1e-10.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    /// Two-tailed p-value.
    pub p: f64,
    pub degrees_of_freedom: usize,
    /// Set when the paired differences have zero variance but nonzero mean;
    /// `t` is then an infinity and `p` is reported as 0.
    pub degenerate: bool,
}

/// Paired t-test over two per-pair squared-error lists. Pairing is by
/// position: caller aligns both lists on the identical test pairs.
pub fn paired_t_test(errors_a: &[f64], errors_b: &[f64]) -> Result<TTestResult> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::shape(format!(
            "paired_t_test: lengths {} and {} differ",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(Error::invalid_input("paired_t_test needs at least 2 pairs"));
    }
    let diffs: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let df = n - 1;

    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, p: 1.0, degrees_of_freedom: df, degenerate: false }
        } else {
            TTestResult {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                degrees_of_freedom: df,
                degenerate: true,
            }
        });
    }

    let t = mean / (sd / (n as f64).sqrt());
    let p = student_t_two_tailed_p(t, df as f64);
    Ok(TTestResult { t, p, degrees_of_freedom: df, degenerate: false })
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom:
/// I_{df/(df+t^2)}(df/2, 1/2).
pub fn student_t_two_tailed_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x)
}

/// I_x(a, b) via the continued fraction, using the symmetry
/// I_x(a,b) = 1 - I_{1-x}(b,a) to stay in the fast-converging region.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Lentz's algorithm for the incomplete beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation, g = 7.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_lists_give_t_zero_p_one() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn constant_nonzero_differences_are_degenerate() {
        let a = vec![2.0, 3.0, 4.0, 5.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t > 0.0);
    }

    #[test]
    fn known_differences_match_reference() {
        // differences [1,-1,2,0,1]; reference values from an independent
        // high-precision statistical computation
        let a = vec![1.0, 0.0, 2.0, 0.0, 1.0];
        let b = vec![0.0, 1.0, 0.0, 0.0, 0.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 1.176696810829104).abs() < 1e-12, "t = {}", r.t);
        assert!((r.p - 0.304558784680535).abs() < 1e-10, "p = {}", r.p);
        assert_eq!(r.degrees_of_freedom, 4);
    }

    #[test]
    fn antisymmetry() {
        let a = vec![1.2, 0.4, 2.2, 0.9, 1.4, 0.1];
        let b = vec![0.3, 1.1, 0.8, 1.6, 0.2, 0.5];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn incomplete_beta_half_symmetric_case() {
        // I_{1/2}(a, a) = 1/2 exactly
        for a in [0.5, 1.0, 2.5, 7.0] {
            let v = regularized_incomplete_beta(a, a, 0.5);
            assert!((v - 0.5).abs() < 1e-12, "a={a}: {v}");
        }
    }

    #[test]
    fn short_lists_rejected() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }
}
