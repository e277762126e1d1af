//! Mixing distributions, link functions, and simulators for the smooth scale
//! mixture process, the noisy (nugget) process, and the skew-t generator used
//! in the mis-specification study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::CovMatrix;
use crate::special;

/// Distribution of the random scale factor R.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MixingLaw {
    /// R ~ Pareto((1-δ)/δ) on [1, ∞). δ = 1/2 is the dependence-class
    /// transition point.
    Hw { delta: f64 },
    /// Weibull-type law on [1, ∞): F(r) = 1 - exp{-γ(r^β - 1)/β}, Pareto at
    /// β = 0. Continuous in β.
    Hot { beta: f64, gamma: f64 },
    /// R² ~ IG(a/2, b/2); the t / skew-t process scale.
    InvGammaSq { a: f64, b: f64 },
}

impl MixingLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MixingLaw::Hw { delta } => {
                if !(0.0..=1.0).contains(&delta) {
                    return Err(Error::domain(format!("HW delta must be in [0,1], got {delta}")));
                }
            }
            MixingLaw::Hot { beta, gamma } => {
                if !(beta >= 0.0 && beta.is_finite() && gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::domain(format!(
                        "HOT requires beta >= 0, gamma > 0; got beta={beta}, gamma={gamma}"
                    )));
                }
            }
            MixingLaw::InvGammaSq { a, b } => {
                if !(a > 0.0 && b > 0.0) {
                    return Err(Error::domain(format!(
                        "InvGammaSq requires a,b > 0; got a={a}, b={b}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lower endpoint of the support of R.
    pub fn support_lower(&self) -> f64 {
        match self {
            MixingLaw::Hw { .. } | MixingLaw::Hot { .. } => 1.0,
            MixingLaw::InvGammaSq { .. } => 0.0,
        }
    }

    pub fn cdf(&self, r: f64) -> Result<f64> {
        self.validate()?;
        let lo = self.support_lower();
        if r <= lo {
            return Ok(0.0);
        }
        Ok(match *self {
            MixingLaw::Hw { delta } => {
                let alpha = (1.0 - delta) / delta;
                1.0 - r.powf(-alpha)
            }
            MixingLaw::Hot { beta, gamma } => {
                if beta == 0.0 {
                    1.0 - r.powf(-gamma)
                } else {
                    1.0 - (-gamma * (r.powf(beta) - 1.0) / beta).exp()
                }
            }
            MixingLaw::InvGammaSq { a, b } => special::gamma_q(0.5 * a, 0.5 * b / (r * r)),
        })
    }

    pub fn pdf(&self, r: f64) -> Result<f64> {
        self.validate()?;
        if r <= self.support_lower() {
            return Ok(0.0);
        }
        Ok(match *self {
            MixingLaw::Hw { delta } => {
                let alpha = (1.0 - delta) / delta;
                alpha * r.powf(-alpha - 1.0)
            }
            MixingLaw::Hot { beta, gamma } => {
                if beta == 0.0 {
                    gamma * r.powf(-gamma - 1.0)
                } else {
                    gamma * r.powf(beta - 1.0) * (-gamma * (r.powf(beta) - 1.0) / beta).exp()
                }
            }
            MixingLaw::InvGammaSq { a, b } => {
                // f_R(r) = 2 r f_{IG(a/2,b/2)}(r²)
                let (al, be) = (0.5 * a, 0.5 * b);
                let x = r * r;
                let ln = al * be.ln() - special::ln_gamma(al) - (al + 1.0) * x.ln() - be / x;
                2.0 * r * ln.exp()
            }
        })
    }

    pub fn log_pdf(&self, r: f64) -> f64 {
        if r <= self.support_lower() {
            return f64::NEG_INFINITY;
        }
        match *self {
            MixingLaw::Hw { delta } => {
                let alpha = (1.0 - delta) / delta;
                alpha.ln() - (alpha + 1.0) * r.ln()
            }
            MixingLaw::Hot { beta, gamma } => {
                if beta == 0.0 {
                    gamma.ln() - (gamma + 1.0) * r.ln()
                } else {
                    gamma.ln() + (beta - 1.0) * r.ln() - gamma * (r.powf(beta) - 1.0) / beta
                }
            }
            MixingLaw::InvGammaSq { a, b } => {
                let (al, be) = (0.5 * a, 0.5 * b);
                let x = r * r;
                (2.0 * r).ln()
                    + al * be.ln()
                    - special::ln_gamma(al)
                    - (al + 1.0) * x.ln()
                    - be / x
            }
        }
    }

    /// -ln P(R > r). Closed form per family; exact deep in the tail where
    /// 1 - cdf(r) would lose all precision.
    pub fn neg_log_survival(&self, r: f64) -> Result<f64> {
        self.validate()?;
        if r <= self.support_lower() {
            return Ok(0.0);
        }
        Ok(match *self {
            MixingLaw::Hw { delta } => {
                if delta == 0.0 {
                    f64::INFINITY
                } else {
                    ((1.0 - delta) / delta) * r.ln()
                }
            }
            MixingLaw::Hot { beta, gamma } => {
                if beta == 0.0 {
                    gamma * r.ln()
                } else {
                    gamma * (r.powf(beta) - 1.0) / beta
                }
            }
            MixingLaw::InvGammaSq { a, b } => {
                -special::gamma_p(0.5 * a, 0.5 * b / (r * r)).ln()
            }
        })
    }

    /// Quantile parameterized by the survival probability s = 1 - p.
    /// Keeps full precision for s far below machine epsilon of 1.
    pub fn quantile_sf(&self, s: f64) -> Result<f64> {
        self.validate()?;
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::domain(format!("quantile_sf needs s in (0,1], got {s}")));
        }
        Ok(match *self {
            MixingLaw::Hw { delta } => s.powf(-delta / (1.0 - delta)),
            MixingLaw::Hot { beta, gamma } => {
                if beta == 0.0 {
                    s.powf(-1.0 / gamma)
                } else {
                    (1.0 - (beta / gamma) * s.ln()).powf(1.0 / beta)
                }
            }
            MixingLaw::InvGammaSq { a, b } => {
                // survival(r) = gamma_p(a/2, b/(2r²)) is decreasing in r; bisect.
                let surv = |r: f64| special::gamma_p(0.5 * a, 0.5 * b / (r * r));
                let mut lo = 1e-12;
                let mut hi = 1.0;
                while surv(hi) > s {
                    hi *= 2.0;
                    if hi > 1e300 {
                        return Err(Error::numerical("InvGammaSq quantile_sf diverged"));
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if surv(mid) > s {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-14 * hi {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        })
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        self.validate()?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("quantile needs p in [0,1), got {p}")));
        }
        if p == 0.0 {
            return Ok(self.support_lower());
        }
        Ok(match *self {
            MixingLaw::Hw { delta } => {
                let alpha = (1.0 - delta) / delta;
                (1.0 - p).powf(-1.0 / alpha)
            }
            MixingLaw::Hot { beta, gamma } => {
                if beta == 0.0 {
                    (1.0 - p).powf(-1.0 / gamma)
                } else {
                    // closed form: r = (1 - (β/γ) log(1-p))^{1/β}
                    (1.0 - (beta / gamma) * (1.0 - p).ln()).powf(1.0 / beta)
                }
            }
            MixingLaw::InvGammaSq { .. } => {
                // Bisection; the cdf is cheap and monotone.
                let mut lo = 1e-12;
                let mut hi = 1.0;
                while self.cdf(hi)? < p {
                    hi *= 2.0;
                    if hi > 1e300 {
                        return Err(Error::numerical("InvGammaSq quantile diverged"));
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid)? < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-13 * hi {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        })
    }
}

/// Link applied to the latent Gaussian field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LinkFn {
    Identity,
    /// g(z) = 1/(1 - Φ(z)); maps a standard normal to a standard Pareto on (1, ∞).
    Pareto,
}

impl LinkFn {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            LinkFn::Identity => z,
            LinkFn::Pareto => 1.0 / special::norm_sf(z),
        }
    }

    /// g⁻¹; for the Pareto link g⁻¹(x) = Φ⁻¹(1 - 1/x), defined for x > 1.
    pub fn inverse(&self, x: f64) -> Result<f64> {
        match self {
            LinkFn::Identity => Ok(x),
            LinkFn::Pareto => {
                if x <= 1.0 {
                    return Err(Error::domain(format!("Pareto link inverse needs x > 1, got {x}")));
                }
                Ok(special::inv_norm_cdf(1.0 - 1.0 / x))
            }
        }
    }

    /// Lower endpoint of the range of g.
    pub fn range_lower(&self) -> f64 {
        match self {
            LinkFn::Identity => f64::NEG_INFINITY,
            LinkFn::Pareto => 1.0,
        }
    }
}

/// Latent state of the hierarchical model: the smooth field per replicate and
/// the shared scale factor per replicate.
#[derive(Debug, Clone)]
pub struct LatentState {
    /// T x D smooth-process values.
    pub xstar: Vec<Vec<f64>>,
    /// Length-T scale factors.
    pub r: Vec<f64>,
}

impl LatentState {
    pub fn replicates(&self) -> usize {
        self.r.len()
    }
}

/// One independently-seeded RNG stream per time replicate, derived from a
/// master seed. Stream 0 is reserved for serial (non-replicate) draws.
pub fn replicate_rng(master_seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Stream offsets so distinct simulation stages never share a stream.
pub const STREAM_SMOOTH: u64 = 1 << 32;
pub const STREAM_NUGGET: u64 = 2 << 32;
pub const STREAM_SKEWT: u64 = 3 << 32;

/// Simulate T replicates of the smooth process X* = R · g(Z).
pub fn simulate_smooth(
    cov: &CovMatrix,
    law: &MixingLaw,
    link: LinkFn,
    replicates: usize,
    master_seed: u64,
) -> Result<LatentState> {
    law.validate()?;
    let mut xstar = Vec::with_capacity(replicates);
    let mut r = Vec::with_capacity(replicates);
    for t in 0..replicates {
        let mut rng = replicate_rng(master_seed, STREAM_SMOOTH + t as u64);
        let z = crate::field::gp_draw(cov, &mut rng);
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let rt = law.quantile(u)?;
        xstar.push(z.iter().map(|&zi| rt * link.apply(zi)).collect());
        r.push(rt);
    }
    Ok(LatentState { xstar, r })
}

/// X = X* + ε with ε iid N(0, τ²). τ² = 0 returns the smooth values unchanged.
pub fn add_nugget(state: &LatentState, tau2: f64, master_seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(tau2 >= 0.0 && tau2.is_finite()) {
        return Err(Error::domain(format!("nugget variance must be nonneg, got {tau2}")));
    }
    if tau2 == 0.0 {
        return Ok(state.xstar.clone());
    }
    let tau = tau2.sqrt();
    let mut out = Vec::with_capacity(state.xstar.len());
    for (t, row) in state.xstar.iter().enumerate() {
        let mut rng = replicate_rng(master_seed, STREAM_NUGGET + t as u64);
        out.push(
            row.iter()
                .map(|&x| x + tau * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
    }
    Ok(out)
}

/// Skew-t mis-specification generator: X*_t = R_t (λ|W_t| + Z_t(s)) with
/// R_t² ~ IG(a/2, b/2) and a single skewing scalar W_t per replicate.
pub fn simulate_skew_t(
    cov: &CovMatrix,
    a: f64,
    b: f64,
    lambda: f64,
    replicates: usize,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::domain("skew-t requires a, b > 0"));
    }
    let gamma = Gamma::new(0.5 * a, 2.0 / b)
        .map_err(|e| Error::domain(format!("bad gamma params: {e}")))?;
    let mut out = Vec::with_capacity(replicates);
    for t in 0..replicates {
        let mut rng = replicate_rng(master_seed, STREAM_SKEWT + t as u64);
        let r2 = 1.0 / gamma.sample(&mut rng);
        let rt = r2.sqrt();
        let w: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        let z = crate::field::gp_draw(cov, &mut rng);
        out.push(z.iter().map(|&zi| rt * (lambda * w + zi)).collect());
    }
    Ok(out)
}
