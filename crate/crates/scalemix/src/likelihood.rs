//! Density evaluations for inference: the censored conditional observation
//! likelihood, the conditional latent density given the scale factor, priors,
//! and a small-dimension Monte Carlo reference likelihood used as an oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::field::{CovMatrix, MaternParams};
use crate::linalg;
use crate::margins::{transform_t, GpdMargin, NoisyMarginal, QuantileTable, SmoothMarginal};
use crate::mixtures::{LinkFn, MixingLaw};
use crate::special;

/// Full parameter state of the hierarchical model.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct HierarchicalParams {
    pub law: MixingLaw,
    pub link: LinkFn,
    pub matern: MaternParams,
    pub tau2: f64,
    pub gpd: GpdMargin,
}

/// One observation with its censoring status.
#[derive(Debug, Clone, Copy)]
pub struct CensoredObs {
    pub y: f64,
    pub censored: bool,
    pub site: usize,
    pub t: usize,
}

/// Censored conditional log-likelihood of one observation given the smooth
/// process value at its site. Requires τ² > 0; the nugget is what separates
/// the observation from X*.
pub fn obs_loglik(
    obs: &CensoredObs,
    xstar_val: f64,
    tau2: f64,
    gpd: &GpdMargin,
    coord: [f64; 2],
    table: &QuantileTable,
) -> Result<f64> {
    if !(tau2 > 0.0) {
        return Err(Error::domain(
            "censored observation likelihood requires tau^2 > 0",
        ));
    }
    let tau = tau2.sqrt();
    if obs.censored {
        let x_p = table.quantile(gpd.censor_prob)?;
        Ok(special::log_norm_cdf((x_p - xstar_val) / tau))
    } else {
        if obs.y <= gpd.threshold {
            return Err(Error::domain(format!(
                "uncensored observation {} at or below threshold {}",
                obs.y, gpd.threshold
            )));
        }
        let t = transform_t(gpd, coord, table, obs.y)?;
        let ln_fy = gpd.pdf(coord, obs.y)?.max(1e-300).ln();
        let ln_fx = table.ln_pdf(t);
        Ok(special::ln_norm_pdf((t - xstar_val) / tau) - tau.ln() + ln_fy - ln_fx)
    }
}

/// Log-density of one replicate of the smooth process conditional on its
/// scale factor r. Support violations under the Pareto link (any x*ᵢ ≤ r)
/// give -∞, not an error; Metropolis proposals rely on that.
pub fn latent_loglik(xstar_row: &[f64], r: f64, cov: &CovMatrix, link: LinkFn) -> f64 {
    let d = cov.dim;
    debug_assert_eq!(xstar_row.len(), d);
    if !(r > 0.0) || !r.is_finite() {
        return f64::NEG_INFINITY;
    }
    match link {
        LinkFn::Pareto => {
            let mut z = Vec::with_capacity(d);
            let mut ln_x_sum = 0.0;
            for &x in xstar_row {
                if !(x > r) {
                    return f64::NEG_INFINITY;
                }
                z.push(special::inv_norm_cdf(1.0 - r / x));
                ln_x_sum += x.ln();
            }
            let q = linalg::quad_form(&cov.inv, d, &z);
            let z2: f64 = z.iter().map(|v| v * v).sum();
            -0.5 * cov.log_det - 0.5 * (q - z2) + d as f64 * r.ln() - 2.0 * ln_x_sum
        }
        LinkFn::Identity => {
            let v: Vec<f64> = xstar_row.iter().map(|&x| x / r).collect();
            let q = linalg::quad_form(&cov.inv, d, &v);
            -0.5 * cov.log_det
                - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * q
                - d as f64 * r.ln()
        }
    }
}

/// Prior hyperparameters. Everything not listed follows the fixed forms:
/// half-Cauchy(1) for positive scale-like parameters, Unif(-0.5, 0.5) for the
/// GPD shape, Unif(0,1) for the HW dependence parameter.
#[derive(Debug, Clone, Copy)]
pub struct PriorSpec {
    /// Inverse-gamma (shape, rate) for τ².
    pub tau2_shape: f64,
    pub tau2_rate: f64,
    /// Normal standard deviation for trend-surface coefficients.
    pub trend_sd: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { tau2_shape: 0.1, tau2_rate: 0.1, trend_sd: 10.0 }
    }
}

pub(crate) fn half_cauchy_ln(x: f64) -> f64 {
    if x >= 0.0 && x.is_finite() {
        (2.0 / std::f64::consts::PI).ln() - x.mul_add(x, 1.0).ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub(crate) fn inv_gamma_ln(x: f64, shape: f64, rate: f64) -> f64 {
    if x > 0.0 && x.is_finite() {
        shape * rate.ln() - special::ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
    } else {
        f64::NEG_INFINITY
    }
}

fn normal_ln(x: f64, sd: f64) -> f64 {
    special::ln_norm_pdf(x / sd) - sd.ln()
}

/// Joint prior log-density; -∞ outside the support, never NaN. The trend
/// surface support constraint (σ(s) > 0 at every site) needs the site
/// coordinates.
pub fn prior_logdensity(
    params: &HierarchicalParams,
    prior: &PriorSpec,
    coords: &[[f64; 2]],
) -> f64 {
    let mut ll = inv_gamma_ln(params.tau2, prior.tau2_shape, prior.tau2_rate);
    ll += half_cauchy_ln(params.matern.range);
    ll += half_cauchy_ln(params.matern.smoothness);
    if !(params.matern.range > 0.0 && params.matern.smoothness > 0.0) {
        return f64::NEG_INFINITY;
    }
    ll += match params.law {
        MixingLaw::Hw { delta } => {
            if delta > 0.0 && delta < 1.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        MixingLaw::Hot { beta, gamma } => half_cauchy_ln(beta) + half_cauchy_ln(gamma),
        MixingLaw::InvGammaSq { a, b } => half_cauchy_ln(a) + half_cauchy_ln(b),
    };
    // GPD block.
    if !(params.gpd.shape > -0.5 && params.gpd.shape < 0.5) {
        return f64::NEG_INFINITY;
    }
    if params.gpd.validate_at(coords).is_err() {
        return f64::NEG_INFINITY;
    }
    ll += match params.gpd.scale {
        crate::margins::ScaleModel::Constant { sigma } => half_cauchy_ln(sigma),
        crate::margins::ScaleModel::Trend { b0, b1, b2 } => {
            normal_ln(b0, prior.trend_sd) + normal_ln(b1, prior.trend_sd) + normal_ln(b2, prior.trend_sd)
        }
    };
    if ll.is_nan() {
        f64::NEG_INFINITY
    } else {
        ll
    }
}

/// Monte Carlo estimate of a log-likelihood with its relative standard error.
#[derive(Debug, Clone, Copy)]
pub struct LoglikEstimate {
    pub loglik: f64,
    /// Standard error of the log, i.e. relative SE of the likelihood value.
    pub se: f64,
}

/// Reference marginal censored log-likelihood of one replicate by Monte Carlo
/// marginalization over (R, Z); the nugget integrals are analytic inside.
/// Quasi-random (van der Corput) points drive the R-integral. Test oracle
/// only: enforced D ≤ 5, uses the slow adaptive margins throughout.
#[allow(clippy::too_many_arguments)]
pub fn reference_censored_loglik(
    y_row: &[f64],
    coords: &[[f64; 2]],
    cov: &CovMatrix,
    law: &MixingLaw,
    link: LinkFn,
    tau2: f64,
    gpd: &GpdMargin,
    n_mc: usize,
    seed: u64,
) -> Result<LoglikEstimate> {
    let d = y_row.len();
    if d > 5 {
        return Err(Error::usage("reference likelihood is an oracle for D <= 5"));
    }
    if d != cov.dim || d != coords.len() {
        return Err(Error::usage("dimension mismatch in reference likelihood"));
    }
    if !(tau2 > 0.0) {
        return Err(Error::usage("reference likelihood requires tau^2 > 0"));
    }
    let tau = tau2.sqrt();
    let noisy = NoisyMarginal::new(SmoothMarginal::new(*law, link)?, tau2)?;
    // Threshold image and per-site transformed values under the adaptive
    // (table-free) margin.
    let quantile_of = |p: f64| -> Result<f64> {
        let mut lo = -1.0;
        let mut hi = 1.0;
        while noisy.cdf(lo)? > p {
            lo = lo * 2.0 - 1.0;
        }
        while noisy.cdf(hi)? < p {
            hi = hi * 2.0 + 1.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if noisy.cdf(mid)? < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 * (1.0 + hi.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let x_p = quantile_of(gpd.censor_prob)?;
    let mut t_vals = vec![0.0; d];
    let mut ln_ratio = 0.0;
    let mut censored = vec![false; d];
    for i in 0..d {
        if y_row[i] <= gpd.threshold {
            censored[i] = true;
        } else {
            let p_y = gpd.cdf(coords[i], y_row[i])?;
            t_vals[i] = quantile_of(p_y.min(1.0 - 1e-15))?;
            ln_ratio +=
                gpd.pdf(coords[i], y_row[i])?.max(1e-300).ln() - noisy.pdf(t_vals[i])?.max(1e-300).ln();
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for k in 0..n_mc {
        let u = van_der_corput(k as u64 + 1);
        let r = law.quantile(u.min(1.0 - 1e-16))?;
        let z = crate::field::gp_draw(cov, &mut rng);
        let mut w = 1.0;
        for i in 0..d {
            let xs = r * link.apply(z[i]);
            w *= if censored[i] {
                special::norm_cdf((x_p - xs) / tau)
            } else {
                special::norm_pdf((t_vals[i] - xs) / tau) / tau
            };
        }
        sum += w;
        sum2 += w * w;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    if !(mean > 0.0) {
        return Err(Error::numerical("reference likelihood estimate collapsed to zero"));
    }
    let var = ((sum2 / n - mean * mean) / (n - 1.0)).max(0.0);
    Ok(LoglikEstimate { loglik: mean.ln() + ln_ratio, se: var.sqrt() / mean })
}

/// Base-2 van der Corput sequence on (0, 1).
fn van_der_corput(mut k: u64) -> f64 {
    let mut denom = 1.0;
    let mut out = 0.0;
    while k > 0 {
        denom *= 2.0;
        out += (k & 1) as f64 / denom;
        k >>= 1;
    }
    out
}
