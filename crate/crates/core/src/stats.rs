//! Paired two-sided Student's t-test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub mean_diff: f64,
    /// Differences had zero variance; `p_value` is 1 if they were all zero
    /// and 0 otherwise.
    pub degenerate: bool,
}

/// Paired test of `mean(a − b) = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "t-test needs at least 2 pairs, got {n}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    if var == 0.0 {
        let zero = mean == 0.0;
        return Ok(TTest {
            t: if zero {
                0.0
            } else {
                mean.signum() * f64::INFINITY
            },
            df,
            p_value: if zero { 1.0 } else { 0.0 },
            mean_diff: mean,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(TTest {
        t,
        df,
        p_value: student_t_two_sided(t, df),
        mean_diff: mean,
        degenerate: false,
    })
}

/// `P(|T| ≥ |t|)` for `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Regularised incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

// modified Lentz continued fraction
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Simpson quadrature of the Student-t density on [0, |t|].
    fn quad_p(t: f64, df: f64) -> f64 {
        let c = (libm::lgamma((df + 1.0) / 2.0)
            - libm::lgamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln())
        .exp();
        let f = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        let n = 200_000;
        let h = t.abs() / n as f64;
        let mut s = f(0.0) + f(t.abs());
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let df = rng.random_range(1..40) as f64;
            let t = rng.random_range(-4.0..4.0);
            let p = student_t_two_sided(t, df);
            assert!((p - quad_p(t, df)).abs() < 1e-9, "t={t} df={df}");
        }
    }

    #[test]
    fn known_quantile() {
        // two-sided 5% critical value for 10 degrees of freedom
        assert!((student_t_two_sided(2.228_138_851_986_274, 10.0) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn equal_samples_have_p_one() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p_value, r.degenerate), (0.0, 1.0, true));
    }

    #[test]
    fn constant_shift_is_flagged() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 1.0, 2.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!((r.p_value, r.degenerate), (0.0, true));
    }

    #[test]
    fn large_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let a: Vec<f64> = b
            .iter()
            .map(|v| v + 10.0 + 0.1 * rng.random::<f64>())
            .collect();
        assert!(paired_t_test(&a, &b).unwrap().p_value < 1e-6);
    }

    #[test]
    fn input_contracts() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }
}
