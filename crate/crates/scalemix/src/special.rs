//! Scalar special functions: Gaussian CDF machinery, log-gamma, incomplete
//! gamma/beta, Student-t CDF, and the modified Bessel function of the second
//! kind used by the Matérn correlation.
//!
//! The Gaussian tail functions are built on `erfc` so that censored-likelihood
//! terms stay accurate far into the tail; `log_norm_cdf` switches to an
//! asymptotic series once `erfc` would underflow.

use crate::quad;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[inline]
pub fn ln_norm_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal survival function.
#[inline]
pub fn norm_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// log Φ(z), accurate for arbitrarily negative z.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z > -36.0 {
        norm_cdf(z).ln()
    } else {
        // Asymptotic series for the Mills ratio:
        // Φ(z) ~ φ(z)/(-z) · (1 - 1/z² + 3/z⁴ - 15/z⁶ + 105/z⁸)
        let zi = 1.0 / (z * z);
        let series = 1.0 - zi * (1.0 - zi * (3.0 - zi * (15.0 - 105.0 * zi)));
        ln_norm_pdf(z) - (-z).ln() + series.ln()
    }
}

/// Inverse standard normal CDF (Acklam's rational approximation polished with
/// one Halley step against `erfc`, giving close to full f64 accuracy).
pub fn inv_norm_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inv_norm_cdf requires p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement.
    let e = norm_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut sum = G[0];
        for (i, &g) in G.iter().enumerate().skip(1) {
            sum += g / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
    }
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cf(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_cf(a: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "beta_inc requires x in [0,1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Student-t CDF with `nu` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    assert!(nu > 0.0);
    if t == 0.0 {
        return 0.5;
    }
    let x = nu / (nu + t * t);
    let half_ib = 0.5 * beta_inc(0.5 * nu, 0.5, x);
    if t > 0.0 {
        1.0 - half_ib
    } else {
        half_ib
    }
}

/// Bivariate standard normal CDF P(Z1 ≤ a, Z2 ≤ b) with correlation `rho`,
/// via the conditioning identity Φ₂(a,b;ρ) = ∫_{-∞}^a φ(z) Φ((b-ρz)/√(1-ρ²)) dz.
pub fn bivariate_norm_cdf(a: f64, b: f64, rho: f64) -> f64 {
    assert!(rho.abs() <= 1.0, "correlation out of range");
    if rho.abs() >= 1.0 - 1e-14 {
        return if rho > 0.0 {
            norm_cdf(a.min(b))
        } else {
            (norm_cdf(a) + norm_cdf(b) - 1.0).max(0.0)
        };
    }
    if a < -8.5 {
        return 0.0;
    }
    let s = (1.0 - rho * rho).sqrt();
    // Mass outside |z| ≤ 8.5 is below 1e-17.
    quad::integrate(
        |z| norm_pdf(z) * norm_cdf((b - rho * z) / s),
        -8.5,
        a.min(8.5),
        1e-14,
        1e-12,
        400,
    )
    .map(|v| v.clamp(0.0, 1.0))
    .unwrap_or(f64::NAN)
}

/// Modified Bessel function of the second kind K_ν(x), ν > 0, x > 0.
///
/// Half-integer orders use the closed form; other orders fall back to the
/// integral representation K_ν(x) = ∫₀^∞ exp(-x cosh t) cosh(νt) dt,
/// evaluated by adaptive quadrature on a truncated interval.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu > 0.0 && x > 0.0, "bessel_k requires nu > 0, x > 0");
    let two_nu = 2.0 * nu;
    let rounded = two_nu.round();
    if (two_nu - rounded).abs() < 1e-12 && rounded as i64 % 2 == 1 {
        let m = ((rounded as i64 - 1) / 2) as usize;
        return bessel_k_half_integer(m, x);
    }
    bessel_k_integral(nu, x)
}

/// K_{m+1/2}(x) = sqrt(pi/(2x)) e^{-x} Σ_{k=0}^{m} (m+k)! / (k!(m-k)!) (2x)^{-k}
fn bessel_k_half_integer(m: usize, x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    for k in 1..=m {
        // term ratio: (m+k)(m-k+1) / (k · 2x)
        term *= (m + k) as f64 * (m - k + 1) as f64 / (k as f64 * 2.0 * x);
        sum += term;
    }
    (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() * sum
}

/// Quadrature path exposed for cross-checking the closed forms in tests.
#[doc(hidden)]
pub fn bessel_k_via_integral_for_test(nu: f64, x: f64) -> f64 {
    bessel_k_integral(nu, x)
}

fn bessel_k_integral(nu: f64, x: f64) -> f64 {
    // Choose t_max so the integrand underflows beyond it:
    // x cosh(t) - ln cosh(νt) > ~745.
    let mut t_max = 5.0f64;
    for _ in 0..40 {
        let target = (745.0 + nu * t_max + x) / x;
        let next = libm::acosh(target.max(1.0 + 1e-12));
        if (next - t_max).abs() < 1e-9 {
            t_max = next;
            break;
        }
        t_max = next;
    }
    let ln_cosh = |u: f64| {
        let a = u.abs();
        a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
    };
    let integrand = move |t: f64| (-x * t.cosh() + ln_cosh(nu * t)).exp();
    quad::integrate(integrand, 0.0, t_max.max(1.0), 0.0, 1e-11, 400)
        .unwrap_or_else(|_| quad::composite(integrand, 0.0, t_max.max(1.0), 512))
}
