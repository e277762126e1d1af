//! Stationary Gaussian random field machinery: Matérn correlation, covariance
//! construction with jitter escalation, simulation, and Gaussian conditioning
//! for held-out prediction.
//!
//! Matérn convention: C(h) = (2^{1-ν}/Γ(ν)) (√(2ν) h/ρ)^ν K_ν(√(2ν) h/ρ).
//! The √(2ν) scaling is fixed here once and for all; range values quoted
//! elsewhere assume this parameterization.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::special;

/// Spatial coordinates and pairwise Euclidean distances for D stations.
#[derive(Debug, Clone)]
pub struct SiteSet {
    pub coords: Vec<[f64; 2]>,
    pub dist: Vec<f64>, // D x D, row-major
}

impl SiteSet {
    pub fn from_coords(coords: Vec<[f64; 2]>) -> Self {
        let d = coords.len();
        let mut dist = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                let h = (dx * dx + dy * dy).sqrt();
                dist[i * d + j] = h;
                dist[j * d + i] = h;
            }
        }
        Self { coords, dist }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.len() + j]
    }

    /// Largest pairwise distance (domain diameter).
    pub fn diameter(&self) -> f64 {
        self.dist.iter().cloned().fold(0.0, f64::max)
    }

    /// Read sites from CSV with header `id,x,y`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let expect = ["id", "x", "y"];
        for (i, name) in expect.iter().enumerate() {
            if headers.get(i).map(|h| h.trim()) != Some(*name) {
                return Err(Error::usage(format!(
                    "sites CSV must have header id,x,y; got {:?}",
                    headers
                )));
            }
        }
        let mut coords = Vec::new();
        for record in reader.records() {
            let record = record?;
            let x: f64 = record
                .get(1)
                .ok_or_else(|| Error::usage("missing x column"))?
                .trim()
                .parse()
                .map_err(|e| Error::usage(format!("bad x value: {e}")))?;
            let y: f64 = record
                .get(2)
                .ok_or_else(|| Error::usage("missing y column"))?
                .trim()
                .parse()
                .map_err(|e| Error::usage(format!("bad y value: {e}")))?;
            coords.push([x, y]);
        }
        Ok(Self::from_coords(coords))
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["id", "x", "y"])?;
        for (i, c) in self.coords.iter().enumerate() {
            writer.write_record([i.to_string(), c[0].to_string(), c[1].to_string()])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Uniform draw of `d` sites on the unit square.
    pub fn uniform_unit_square<R: Rng>(d: usize, rng: &mut R) -> Self {
        let coords = (0..d).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        Self::from_coords(coords)
    }
}

/// Matérn correlation parameters (range, smoothness).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MaternParams {
    pub range: f64,
    pub smoothness: f64,
}

impl MaternParams {
    pub fn new(range: f64, smoothness: f64) -> Result<Self> {
        if !(range > 0.0 && range.is_finite() && smoothness > 0.0 && smoothness.is_finite()) {
            return Err(Error::domain(format!(
                "Matern params must be positive finite, got rho={range}, nu={smoothness}"
            )));
        }
        Ok(Self { range, smoothness })
    }
}

/// Matérn correlation at separation `h` under the √(2ν) convention.
pub fn matern_corr(h: f64, params: &MaternParams) -> Result<f64> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::domain(format!("distance must be finite nonneg, got {h}")));
    }
    let nu = params.smoothness;
    let x = (2.0 * nu).sqrt() * h / params.range;
    if x < 1e-8 {
        // C(h) = 1 - O(x^2 log x); below this scale the correction is < 1e-15.
        return Ok(1.0);
    }
    // Half-integer fast paths.
    let corr = if (nu - 0.5).abs() < 1e-12 {
        (-x).exp()
    } else if (nu - 1.5).abs() < 1e-12 {
        (1.0 + x) * (-x).exp()
    } else if (nu - 2.5).abs() < 1e-12 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        let ln_pref = (1.0 - nu) * std::f64::consts::LN_2 - special::ln_gamma(nu) + nu * x.ln();
        ln_pref.exp() * special::bessel_k(nu, x)
    };
    Ok(corr.clamp(0.0, 1.0))
}

/// Symmetric positive-definite correlation matrix with its Cholesky factor,
/// inverse, and log-determinant. Immutable once built; safe to share.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    pub dim: usize,
    pub sigma: Vec<f64>,
    pub chol: Vec<f64>,
    pub inv: Vec<f64>,
    pub log_det: f64,
    pub jitter: f64,
}

/// Jitter escalation policy: start at 1e-10, multiply by 10 up to 1e-6.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Build the Matérn correlation matrix for a site set, factorize it, and keep
/// the pieces the likelihood needs.
pub fn build_cov(sites: &SiteSet, params: &MaternParams) -> Result<CovMatrix> {
    let d = sites.len();
    if d == 0 {
        return Err(Error::usage("cannot build covariance for zero sites"));
    }
    let mut sigma = vec![0.0; d * d];
    for i in 0..d {
        sigma[i * d + i] = 1.0;
        for j in 0..i {
            let c = matern_corr(sites.distance(i, j), params)?;
            sigma[i * d + j] = c;
            sigma[j * d + i] = c;
        }
    }
    cov_from_sigma(sigma, d)
}

/// Factorize an explicit correlation/covariance matrix with jitter escalation.
pub fn cov_from_sigma(sigma: Vec<f64>, d: usize) -> Result<CovMatrix> {
    let mut jitter = 0.0;
    let mut attempt = sigma.clone();
    loop {
        if let Some(chol) = linalg::cholesky(&attempt, d) {
            let log_det = linalg::chol_log_det(&chol, d);
            let inv = linalg::chol_inverse(&chol, d);
            return Ok(CovMatrix {
                dim: d,
                sigma: attempt,
                chol,
                inv,
                log_det,
                jitter,
            });
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX {
            return Err(Error::Singular { jitter: jitter / 10.0 });
        }
        attempt = sigma.clone();
        for i in 0..d {
            attempt[i * d + i] += jitter;
        }
    }
}

/// One mean-zero Gaussian draw with the factorized covariance.
pub fn gp_draw<R: Rng>(cov: &CovMatrix, rng: &mut R) -> Vec<f64> {
    let d = cov.dim;
    let noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; d];
    for i in 0..d {
        let mut v = 0.0;
        for k in 0..=i {
            v += cov.chol[i * d + k] * noise[k];
        }
        out[i] = v;
    }
    out
}

/// Gaussian conditioning: mean and covariance of the `pred_idx` coordinates
/// given observed values at `obs_idx`.
pub fn conditional_gp(
    cov: &CovMatrix,
    obs_idx: &[usize],
    obs_vals: &[f64],
    pred_idx: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if obs_idx.len() != obs_vals.len() {
        return Err(Error::usage("obs_idx and obs_vals length mismatch"));
    }
    for p in pred_idx {
        if obs_idx.contains(p) {
            return Err(Error::usage("obs and pred index sets must be disjoint"));
        }
    }
    let d = cov.dim;
    let np = pred_idx.len();
    if np == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let no = obs_idx.len();
    if no == 0 {
        let mut sub = vec![0.0; np * np];
        for (a, &i) in pred_idx.iter().enumerate() {
            for (b, &j) in pred_idx.iter().enumerate() {
                sub[a * np + b] = cov.sigma[i * d + j];
            }
        }
        return Ok((vec![0.0; np], sub));
    }
    // Factorize the observed block.
    let mut soo = vec![0.0; no * no];
    for (a, &i) in obs_idx.iter().enumerate() {
        for (b, &j) in obs_idx.iter().enumerate() {
            soo[a * no + b] = cov.sigma[i * d + j];
        }
    }
    let l = linalg::cholesky(&soo, no)
        .ok_or_else(|| Error::numerical("observed block not positive definite"))?;
    let alpha = linalg::chol_solve(&l, no, obs_vals);
    // Cross block rows: Σ_{p,o}
    let mut mean = vec![0.0; np];
    let mut cross: Vec<Vec<f64>> = Vec::with_capacity(np);
    for (a, &i) in pred_idx.iter().enumerate() {
        let row: Vec<f64> = obs_idx.iter().map(|&j| cov.sigma[i * d + j]).collect();
        mean[a] = row.iter().zip(&alpha).map(|(r, al)| r * al).sum();
        cross.push(row);
    }
    let mut cond = vec![0.0; np * np];
    // Σ_{p|o} = Σ_pp - Σ_po Σ_oo^{-1} Σ_op
    let solved: Vec<Vec<f64>> = cross.iter().map(|row| linalg::chol_solve(&l, no, row)).collect();
    for a in 0..np {
        for b in 0..np {
            let spp = cov.sigma[pred_idx[a] * d + pred_idx[b]];
            let corr: f64 = cross[a].iter().zip(&solved[b]).map(|(x, y)| x * y).sum();
            cond[a * np + b] = spp - corr;
        }
    }
    Ok((mean, cond))
}
