//! Extremal dependence diagnostics: the conditional exceedance curve χ_u(h),
//! its companion χ̄_u(h), the coefficient of tail dependence η, closed-form
//! limits for the two mixing families, and a numerical verifier that the
//! additive nugget does not change the tail-dependence regime.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{matern_corr, SiteSet};
use crate::likelihood::HierarchicalParams;
use crate::mixtures::{replicate_rng, LinkFn, MixingLaw};
use crate::special;

/// Streams for the Monte Carlo samplers, disjoint from the MCMC streams.
const STREAM_DEP: u64 = 32 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Chi,
    Chibar,
}

/// A dependence curve over exceedance levels with pointwise envelopes.
#[derive(Debug, Clone)]
pub struct DependenceCurve {
    pub u_grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Separation distance the curve refers to.
    pub h: f64,
    pub kind: CurveKind,
    pub warnings: Vec<String>,
}

impl DependenceCurve {
    fn validate(&self) -> Result<()> {
        if self.u_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::usage("u grid must be strictly increasing"));
        }
        if self.u_grid.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::usage("u grid must lie in (0,1)"));
        }
        Ok(())
    }

    /// CSV with header `u,estimate,lo,hi`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["u", "estimate", "lo", "hi"])?;
        for k in 0..self.u_grid.len() {
            w.write_record([
                format!("{:.10}", self.u_grid[k]),
                format!("{:.10}", self.estimate[k]),
                format!("{:.10}", self.lo[k]),
                format!("{:.10}", self.hi[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rank transform one series to (0,1) via k/(n+1).
fn rank_uniform(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; n];
    let mut k = 0usize;
    while k < n {
        // Ties share the average rank so duplicated series stay comonotone.
        let mut j = k;
        while j + 1 < n && v[idx[j + 1]] == v[idx[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=j] {
            out[i] = avg / (n as f64 + 1.0);
        }
        k = j + 1;
    }
    out
}

/// All ordered site pairs whose separation is within `eps` of `h`, as rank
/// uniform score pairs pooled over replicates. Both orderings are included so
/// the conditional probability is symmetric in the pair.
fn paired_scores(
    data: &[Vec<f64>],
    sites: &SiteSet,
    h: f64,
    eps: f64,
) -> Result<Vec<(f64, f64)>> {
    let d = sites.len();
    if data.is_empty() {
        return Err(Error::usage("need at least one replicate"));
    }
    let ranks: Vec<Vec<f64>> = (0..d)
        .map(|i| rank_uniform(&data.iter().map(|row| row[i]).collect::<Vec<_>>()))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            if (sites.distance(i, j) - h).abs() <= eps {
                for t in 0..data.len() {
                    pairs.push((ranks[i][t], ranks[j][t]));
                    pairs.push((ranks[j][t], ranks[i][t]));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::usage(format!(
            "no site pairs within {eps:.4} of separation {h:.4}"
        )));
    }
    Ok(pairs)
}

/// Default pairing tolerance: 5% of the domain diameter.
pub fn default_eps(sites: &SiteSet) -> f64 {
    0.05 * sites.diameter()
}

/// Rank-uniform score pairs for all site pairs within `eps` of separation
/// `h`, pooled over replicates — the input [`eta_estimate`] expects when
/// working from observed data.
pub fn empirical_pairs(
    data: &[Vec<f64>],
    sites: &SiteSet,
    h: f64,
    eps_tol: Option<f64>,
) -> Result<Vec<(f64, f64)>> {
    let eps = eps_tol.unwrap_or_else(|| default_eps(sites));
    paired_scores(data, sites, h, eps)
}

fn binomial_envelope(p: f64, m: f64) -> (f64, f64) {
    let se = (p * (1.0 - p) / m.max(1.0)).sqrt();
    ((p - 1.96 * se).max(0.0), (p + 1.96 * se).min(1.0))
}

/// χ curve from uniform-score pairs: χ̂_u = #{both > u} / #{second > u},
/// with pointwise binomial envelopes that treat pairs as independent.
fn chi_from_scores(pairs: &[(f64, f64)], u_grid: &[f64], h: f64) -> Result<DependenceCurve> {
    let mut estimate = Vec::with_capacity(u_grid.len());
    let mut lo = Vec::with_capacity(u_grid.len());
    let mut hi = Vec::with_capacity(u_grid.len());
    let mut warnings = Vec::new();
    for &u in u_grid {
        let denom = pairs.iter().filter(|p| p.1 > u).count();
        let joint = pairs.iter().filter(|p| p.0 > u && p.1 > u).count();
        if denom == 0 {
            warnings.push(format!("no exceedances of level {u}; curve set to 0 there"));
            estimate.push(0.0);
            lo.push(0.0);
            hi.push(1.0);
            continue;
        }
        let chi = joint as f64 / denom as f64;
        let (l, hgh) = binomial_envelope(chi, denom as f64);
        estimate.push(chi);
        lo.push(l);
        hi.push(hgh);
    }
    let curve =
        DependenceCurve { u_grid: u_grid.to_vec(), estimate, lo, hi, h, kind: CurveKind::Chi, warnings };
    curve.validate()?;
    Ok(curve)
}

/// Empirical χ_u(h) from a replicates × sites data matrix. Ranks are computed
/// per site, so the curve is invariant to monotone marginal transformations.
pub fn empirical_chi(
    data: &[Vec<f64>],
    sites: &SiteSet,
    h: f64,
    eps_tol: Option<f64>,
    u_grid: &[f64],
) -> Result<DependenceCurve> {
    let eps = eps_tol.unwrap_or_else(|| default_eps(sites));
    let pairs = paired_scores(data, sites, h, eps)?;
    chi_from_scores(&pairs, u_grid, h)
}

/// χ̄_u = 2·log(1−u)/log P̂(joint exceedance) − 1 from uniform-score pairs.
/// Levels with zero joint exceedances are dropped with a warning.
fn chibar_from_scores(pairs: &[(f64, f64)], u_grid: &[f64], h: f64) -> Result<DependenceCurve> {
    let n = pairs.len() as f64;
    let mut u_kept = Vec::new();
    let mut estimate = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut warnings = Vec::new();
    for &u in u_grid {
        let joint = pairs.iter().filter(|p| p.0 > u && p.1 > u).count();
        if joint == 0 {
            warnings.push(format!(
                "zero joint exceedances at level {u}; curve truncated"
            ));
            continue;
        }
        let p = joint as f64 / n;
        let l2u = 2.0 * (1.0 - u).ln();
        let cb = |pv: f64| (l2u / pv.ln() - 1.0).clamp(-1.0, 1.0);
        let (p_lo, p_hi) = binomial_envelope(p, n);
        u_kept.push(u);
        estimate.push(cb(p));
        // χ̄ is increasing in p (log(1−u) < 0), so the envelope maps through.
        lo.push(cb(p_lo.max(1e-15)));
        hi.push(if p_hi >= 1.0 { 1.0 } else { cb(p_hi) });
    }
    if u_kept.is_empty() {
        return Err(Error::usage("no level has a positive joint exceedance count"));
    }
    let curve =
        DependenceCurve { u_grid: u_kept, estimate, lo, hi, h, kind: CurveKind::Chibar, warnings };
    curve.validate()?;
    Ok(curve)
}

/// Empirical χ̄_u(h) from a replicates × sites data matrix.
pub fn empirical_chibar(
    data: &[Vec<f64>],
    sites: &SiteSet,
    h: f64,
    eps_tol: Option<f64>,
    u_grid: &[f64],
) -> Result<DependenceCurve> {
    let eps = eps_tol.unwrap_or_else(|| default_eps(sites));
    let pairs = paired_scores(data, sites, h, eps)?;
    chibar_from_scores(&pairs, u_grid, h)
}

/// χ̄ curve for explicitly simulated pairs already on any common marginal
/// scale (ranks are applied internally).
pub fn chibar_from_pairs(pairs: &[(f64, f64)], u_grid: &[f64], h: f64) -> Result<DependenceCurve> {
    let uni = rank_pairs(pairs);
    chibar_from_scores(&uni, u_grid, h)
}

/// Rank-transform simulated pairs to the uniform scale, pooling both
/// coordinates (they share a marginal by exchangeability of the model).
fn rank_pairs(pairs: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ra = rank_uniform(&a);
    let rb = rank_uniform(&b);
    ra.into_iter().zip(rb).collect()
}

/// Simulate `n` bivariate pairs from the noisy model at correlation `rho`:
/// X = R·g(Z) + τ·ε with Z a correlated standard Gaussian pair.
pub fn simulate_model_pairs(
    law: &MixingLaw,
    link: LinkFn,
    rho: f64,
    tau2: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    law.validate()?;
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::usage(format!("correlation must be in [-1,1], got {rho}")));
    }
    if !(tau2 >= 0.0) {
        return Err(Error::usage("tau2 must be nonnegative"));
    }
    let mut rng = replicate_rng(seed, STREAM_DEP);
    let tau = tau2.sqrt();
    let root = (1.0 - rho * rho).max(0.0).sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let z1 = n1;
        let z2 = rho * n1 + root * n2;
        let r = law.quantile(rng.gen::<f64>())?;
        let x1 = r * link.apply(z1) + tau * rng.sample::<f64, _>(StandardNormal);
        let x2 = r * link.apply(z2) + tau * rng.sample::<f64, _>(StandardNormal);
        out.push((x1, x2));
    }
    Ok(out)
}

/// Model-based χ_u(h) by Monte Carlo: simulate pairs at the Matérn
/// correlation implied by `h`, rank-transform, and evaluate the conditional
/// exceedance ratio on the grid.
pub fn model_chi(
    params: &HierarchicalParams,
    h: f64,
    u_grid: &[f64],
    n_sim: usize,
    seed: u64,
) -> Result<DependenceCurve> {
    let rho = matern_corr(h, &params.matern)?;
    let pairs = simulate_model_pairs(&params.law, params.link, rho, params.tau2, n_sim, seed)?;
    // Include both orderings for symmetry, as in the empirical estimator.
    let mut uni = rank_pairs(&pairs);
    let flipped: Vec<(f64, f64)> = uni.iter().map(|&(a, b)| (b, a)).collect();
    uni.extend(flipped);
    chi_from_scores(&uni, u_grid, h)
}

/// η estimate from a log–log regression of the joint survival probability on
/// 1 − u over several deep levels.
#[derive(Debug, Clone)]
pub struct EtaEstimate {
    pub eta: f64,
    pub se: f64,
    /// Residuals of the regression at the retained levels.
    pub residuals: Vec<f64>,
    pub levels_used: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Default levels for η estimation: a logarithmic ladder u = 1 − 10^(−k),
/// k = 1, 1.25, …, 4. The wide span is deliberate — it separates the power
/// term from the slowly varying curvature term in the tail regression, which
/// are nearly collinear over a narrow deep-tail window.
pub fn default_eta_levels() -> Vec<f64> {
    (4..=16).map(|i| 1.0 - 10f64.powf(-(i as f64) * 0.25)).collect()
}

/// Estimate η from simulated pairs (any common marginal scale; ranks applied
/// internally): regress log P̂(U₁>u, U₂>u) on log(1−u); η̂ = 1/slope.
/// Levels with zero joint counts are dropped with a warning.
pub fn eta_estimate(pairs: &[(f64, f64)], u_levels: &[f64]) -> Result<EtaEstimate> {
    if pairs.len() < 100 {
        return Err(Error::usage("eta estimation needs a reasonable sample size"));
    }
    if u_levels.len() < 2 {
        return Err(Error::usage("eta estimation needs at least two levels"));
    }
    let uni = rank_pairs(pairs);
    let n = uni.len() as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    let mut levels_used = Vec::new();
    let mut warnings = Vec::new();
    for &u in u_levels {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::usage(format!("levels must lie in (0,1), got {u}")));
        }
        let joint = uni.iter().filter(|p| p.0 > u && p.1 > u).count();
        if joint == 0 {
            warnings.push(format!("zero joint exceedances at level {u}; level dropped"));
            continue;
        }
        let p = joint as f64 / n;
        xs.push((1.0 - u).ln());
        ys.push(p.ln());
        // Inverse binomial variance of ln p̂.
        ws.push(n * p / (1.0 - p));
        levels_used.push(u);
    }
    if xs.len() < 2 {
        return Err(Error::numerical(
            "fewer than two levels retain joint exceedances; lower the levels or raise n_sim",
        ));
    }
    // Weighted regression of ln p on ln(1−u). Ledford–Tawn tails carry a
    // slowly varying factor L(t), t = −ln(1−u), which bends the log–log line;
    // with enough levels a ln t regressor absorbs its leading (t^c-type)
    // curvature so the slope estimates the pure power 1/η with far less bias
    // (the Gaussian pair is the canonical case: L(t) ∝ t^{−ρ/(1+ρ)}). The
    // extra regressor is only identified when t spans a wide range; over a
    // narrow window ln t is nearly collinear with t and the three-term fit is
    // unstable, so fall back to the plain two-term slope there.
    let t_min = xs.iter().cloned().fold(f64::INFINITY, |a, x| a.min(-x));
    let t_max = xs.iter().cloned().fold(0.0f64, |a, x| a.max(-x));
    let curvature = xs.len() >= 6 && t_max >= 3.0 * t_min;
    let cols = if curvature { 3 } else { 2 };
    let design: Vec<Vec<f64>> = xs
        .iter()
        .map(|&x| {
            let mut row = vec![1.0, x];
            if curvature {
                row.push((-x).ln());
            }
            row
        })
        .collect();
    // Normal equations XᵀWX b = XᵀWy (tiny system; solved by Gauss elim.).
    let mut a = vec![0.0; cols * cols];
    let mut rhs = vec![0.0; cols];
    for (row, (&y, &w)) in design.iter().zip(ys.iter().zip(&ws)) {
        for i in 0..cols {
            rhs[i] += w * row[i] * y;
            for j in 0..cols {
                a[i * cols + j] += w * row[i] * row[j];
            }
        }
    }
    let l = crate::linalg::cholesky(&a, cols)
        .ok_or_else(|| Error::numerical("singular design in eta regression"))?;
    let coef = crate::linalg::chol_solve(&l, cols, &rhs);
    // Variance of the slope coefficient: e₁ᵀ (XᵀWX)⁻¹ e₁.
    let mut e1 = vec![0.0; cols];
    e1[1] = 1.0;
    let slope_var = crate::linalg::chol_solve(&l, cols, &e1)[1];
    let slope = coef[1];
    if !(slope > 0.0) {
        return Err(Error::numerical(format!(
            "joint survival not decreasing in level (slope {slope}); cannot form eta"
        )));
    }
    let residuals: Vec<f64> = design
        .iter()
        .zip(&ys)
        .map(|(row, &y)| y - row.iter().zip(&coef).map(|(r, c)| r * c).sum::<f64>())
        .collect();
    // Weights are true inverse variances, so the WLS covariance applies; an
    // overdispersion factor guards against residual model error.
    let dof = (xs.len() as f64 - cols as f64).max(1.0);
    let chi2: f64 = residuals
        .iter()
        .zip(&ws)
        .map(|(r, &w)| w * r * r)
        .sum::<f64>()
        / dof;
    let se_slope = (slope_var * chi2.max(1.0)).sqrt();
    let eta = 1.0 / slope;
    let se = se_slope / (slope * slope);
    Ok(EtaEstimate { eta, se, residuals, levels_used, warnings })
}

/// η for a bivariate standard Gaussian pair: (1 + ρ)/2.
pub fn gaussian_eta(rho: f64) -> f64 {
    (1.0 + rho) / 2.0
}

/// Coefficient of tail dependence for the Pareto-scale model: 1 when
/// δ > 1/2, δ/(1−δ) when η_Z/(η_Z+1) < δ ≤ 1/2, and η_Z below that.
pub fn hw_eta(delta: f64, eta_z: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) || !(eta_z > 0.0 && eta_z < 1.0) {
        return Err(Error::usage("hw_eta needs delta and eta_z in (0,1)"));
    }
    Ok(if delta > 0.5 {
        1.0
    } else if delta > eta_z / (eta_z + 1.0) {
        delta / (1.0 - delta)
    } else {
        eta_z
    })
}

/// Limiting χ for the Pareto-scale model with δ > 1/2 at Gaussian correlation
/// ρ: ((2δ−1)/δ)·E[min{g(Z_i), g(Z_k)}^{(1−δ)/δ}], by Monte Carlo over the
/// Gaussian pair. Returns 0 for δ ≤ 1/2 (asymptotic independence).
pub fn hw_chi_limit(delta: f64, rho: f64, n_sim: usize, seed: u64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::usage("delta must be in (0,1)"));
    }
    if delta <= 0.5 {
        return Ok(0.0);
    }
    let mut rng = replicate_rng(seed, STREAM_DEP + 1);
    let root = (1.0 - rho * rho).max(0.0).sqrt();
    let pow = (1.0 - delta) / delta;
    let mut acc = 0.0;
    for _ in 0..n_sim {
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let g1 = LinkFn::Pareto.apply(n1);
        let g2 = LinkFn::Pareto.apply(rho * n1 + root * n2);
        acc += g1.min(g2).powf(pow);
    }
    Ok((2.0 * delta - 1.0) / delta * (acc / n_sim as f64))
}

/// Limiting χ for the Weibull-tail family at β = 0 (Pareto scale, the
/// Student-t-like regime): 2{1 − T_{γ+1}(√((γ+1)(1−ρ)/(1+ρ)))}.
pub fn hot_chi_limit(gamma: f64, rho: f64) -> Result<f64> {
    if !(gamma > 0.0) || !(-1.0 < rho && rho <= 1.0) {
        return Err(Error::usage("need gamma > 0 and rho in (-1, 1]"));
    }
    if rho == 1.0 {
        return Ok(1.0);
    }
    let arg = ((gamma + 1.0) * (1.0 - rho) / (1.0 + rho)).sqrt();
    Ok(2.0 * (1.0 - special::student_t_cdf(arg, gamma + 1.0)))
}

/// One cell of the nugget-invariance verification: η̂ for the smooth process
/// (τ² = 0) against η̂ for the noisy one (τ² = 1) at the same (δ, η_Z).
#[derive(Debug, Clone, serde::Serialize)]
pub struct Prop1Cell {
    pub delta: f64,
    pub eta_z: f64,
    pub eta_smooth: f64,
    pub se_smooth: f64,
    pub eta_noisy: f64,
    pub se_noisy: f64,
    /// True when |η̂₁ − η̂₀| > 3·combined SE.
    pub flagged: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Prop1Report {
    pub cells: Vec<Prop1Cell>,
    pub n_sim: usize,
}

impl Prop1Report {
    pub fn n_flagged(&self) -> usize {
        self.cells.iter().filter(|c| c.flagged).count()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "delta", "eta_z", "eta_smooth", "se_smooth", "eta_noisy", "se_noisy", "flagged",
        ])?;
        for c in &self.cells {
            w.write_record([
                format!("{:.6}", c.delta),
                format!("{:.6}", c.eta_z),
                format!("{:.6}", c.eta_smooth),
                format!("{:.6}", c.se_smooth),
                format!("{:.6}", c.eta_noisy),
                format!("{:.6}", c.se_noisy),
                c.flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Estimate η over a (δ, η_Z) grid for the Pareto-scale model with and
/// without the unit nugget. The Gaussian pair is sampled from a copula with
/// correlation 2·η_Z − 1, so η_Z is exactly the Gaussian coefficient of tail
/// dependence. Cells where the nugget shifts η̂ by more than three combined
/// standard errors are flagged.
pub fn verify_proposition1(
    deltas: &[f64],
    eta_zs: &[f64],
    n_sim: usize,
    seed: u64,
) -> Result<Prop1Report> {
    let levels = default_eta_levels();
    let mut cells = Vec::with_capacity(deltas.len() * eta_zs.len());
    let mut stream = 0u64;
    for &delta in deltas {
        for &eta_z in eta_zs {
            if !(eta_z > 0.0 && eta_z < 1.0) {
                return Err(Error::usage("eta_z must lie in (0,1)"));
            }
            let rho = 2.0 * eta_z - 1.0;
            let law = MixingLaw::Hw { delta };
            let run = |tau2: f64, stream: u64| -> Result<(f64, f64)> {
                let pairs = simulate_model_pairs(
                    &law,
                    LinkFn::Pareto,
                    rho,
                    tau2,
                    n_sim,
                    seed.wrapping_add(stream),
                )?;
                let est = eta_estimate(&pairs, &levels)?;
                Ok((est.eta, est.se))
            };
            let (eta_smooth, se_smooth) = run(0.0, stream)?;
            let (eta_noisy, se_noisy) = run(1.0, stream + 1)?;
            stream += 2;
            let combined = (se_smooth * se_smooth + se_noisy * se_noisy).sqrt();
            cells.push(Prop1Cell {
                delta,
                eta_z,
                eta_smooth,
                se_smooth,
                eta_noisy,
                se_noisy,
                flagged: (eta_noisy - eta_smooth).abs() > 3.0 * combined,
            });
        }
    }
    Ok(Prop1Report { cells, n_sim })
}

/// Pointwise aggregation of dependence curves over posterior draws: mean
/// curve with 2.5/97.5 percentile bands.
pub fn aggregate_curves(curves: &[DependenceCurve]) -> Result<DependenceCurve> {
    let first = curves.first().ok_or_else(|| Error::usage("no curves to aggregate"))?;
    if curves.iter().any(|c| c.u_grid != first.u_grid || c.kind != first.kind) {
        return Err(Error::usage("curves must share a grid and kind"));
    }
    let n = curves.len();
    let mut estimate = Vec::with_capacity(first.u_grid.len());
    let mut lo = Vec::with_capacity(first.u_grid.len());
    let mut hi = Vec::with_capacity(first.u_grid.len());
    for k in 0..first.u_grid.len() {
        let mut vals: Vec<f64> = curves.iter().map(|c| c.estimate[k]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        estimate.push(vals.iter().sum::<f64>() / n as f64);
        lo.push(vals[((0.025 * (n - 1) as f64).round() as usize).min(n - 1)]);
        hi.push(vals[((0.975 * (n - 1) as f64).round() as usize).min(n - 1)]);
    }
    Ok(DependenceCurve {
        u_grid: first.u_grid.clone(),
        estimate,
        lo,
        hi,
        h: first.h,
        kind: first.kind,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MaternParams;
    use crate::margins::{GpdMargin, ScaleModel};

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect()
    }

    fn two_sites() -> SiteSet {
        SiteSet::from_coords(vec![[0.0, 0.0], [1.0, 0.0]])
    }

    fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = replicate_rng(seed, 0);
        let root = (1.0 - rho * rho).sqrt();
        (0..n)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (a, rho * a + root * b)
            })
            .collect()
    }

    #[test]
    fn comonotone_chi_is_one() {
        let sites = two_sites();
        let mut rng = replicate_rng(3, 0);
        let data: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let v: f64 = rng.gen();
                vec![v, v]
            })
            .collect();
        let curve = empirical_chi(&data, &sites, 1.0, Some(0.1), &grid(0.5, 0.95, 10)).unwrap();
        for &e in &curve.estimate {
            assert_eq!(e, 1.0);
        }
        // Comonotone χ̄ is 1 everywhere too.
        let cb = empirical_chibar(&data, &sites, 1.0, Some(0.1), &grid(0.5, 0.95, 10)).unwrap();
        for &e in &cb.estimate {
            assert!((e - 1.0).abs() < 0.05, "chibar {e}");
        }
    }

    #[test]
    fn independent_chi_tracks_one_minus_u() {
        let sites = two_sites();
        let mut rng = replicate_rng(4, 0);
        let data: Vec<Vec<f64>> = (0..40_000).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let u_grid = grid(0.5, 0.95, 10);
        let curve = empirical_chi(&data, &sites, 1.0, Some(0.1), &u_grid).unwrap();
        for (k, &u) in u_grid.iter().enumerate() {
            assert!(
                curve.lo[k] <= 1.0 - u && 1.0 - u <= curve.hi[k],
                "u={u}: envelope [{}, {}] misses {}",
                curve.lo[k],
                curve.hi[k],
                1.0 - u
            );
        }
        // Independent χ̄ tends to 0.
        let cb = empirical_chibar(&data, &sites, 1.0, Some(0.1), &[0.95, 0.98, 0.99]).unwrap();
        for &e in &cb.estimate {
            assert!(e.abs() < 0.12, "chibar {e}");
        }
    }

    #[test]
    fn chi_invariant_under_monotone_transform() {
        let sites = two_sites();
        let mut rng = replicate_rng(5, 0);
        let data: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                vec![a, 0.6 * a + 0.8 * b]
            })
            .collect();
        let warped: Vec<Vec<f64>> = data.iter().map(|r| vec![r[0].exp(), r[1]]).collect();
        let u_grid = grid(0.5, 0.95, 10);
        let c1 = empirical_chi(&data, &sites, 1.0, Some(0.1), &u_grid).unwrap();
        let c2 = empirical_chi(&warped, &sites, 1.0, Some(0.1), &u_grid).unwrap();
        assert_eq!(c1.estimate, c2.estimate);
        assert_eq!(c1.lo, c2.lo);
    }

    #[test]
    fn no_qualifying_pairs_is_an_error() {
        let sites = two_sites();
        let data = vec![vec![0.1, 0.2]];
        assert!(empirical_chi(&data, &sites, 5.0, Some(0.01), &[0.5, 0.9]).is_err());
    }

    #[test]
    fn model_chi_limits_match_closed_forms() {
        let params = HierarchicalParams {
            law: MixingLaw::Hw { delta: 0.7 },
            link: LinkFn::Pareto,
            matern: MaternParams { range: 1.0, smoothness: 0.5 },
            tau2: 0.0,
            gpd: GpdMargin {
                threshold: 0.0,
                scale: ScaleModel::Constant { sigma: 1.0 },
                shape: 0.0,
                censor_prob: 0.8,
            },
        };
        let h = 0.5;
        let rho = matern_corr(h, &params.matern).unwrap();
        let u_grid = [0.9, 0.99, 0.999, 0.9999];
        let curve = model_chi(&params, h, &u_grid, 2_000_000, 9).unwrap();
        let limit = hw_chi_limit(0.7, rho, 2_000_000, 10).unwrap();
        let last = *curve.estimate.last().unwrap();
        assert!(
            (last - limit).abs() < 0.03,
            "chi at deepest level {last} vs limit {limit}"
        );

        // Asymptotic independence: delta = 0.3 decays toward 0.
        let mut p2 = params;
        p2.law = MixingLaw::Hw { delta: 0.3 };
        let c2 = model_chi(&p2, h, &u_grid, 2_000_000, 11).unwrap();
        assert!(c2.estimate.windows(2).all(|w| w[1] <= w[0] + 0.02), "not decreasing: {:?}", c2.estimate);
        assert!(*c2.estimate.last().unwrap() < 0.05);
        assert_eq!(hw_chi_limit(0.3, rho, 1000, 1).unwrap(), 0.0);

        // h = 0 (rho = 1), tau2 = 0: comonotone pair, chi identically 1.
        let c3 = model_chi(&params, 0.0, &[0.5, 0.9, 0.99], 50_000, 12).unwrap();
        for &e in &c3.estimate {
            assert_eq!(e, 1.0);
        }
    }

    #[test]
    fn weibull_scale_chi_matches_student_t_form() {
        // beta = 0 makes the scale Pareto with index gamma; the identity-link
        // mixture then has the Student-t tail dependence coefficient.
        let gamma = 1.0;
        let rho = 0.5;
        let closed = hot_chi_limit(gamma, rho).unwrap();
        let law = MixingLaw::Hot { beta: 0.0, gamma };
        let pairs = simulate_model_pairs(&law, LinkFn::Identity, rho, 0.0, 4_000_000, 21).unwrap();
        let uni = rank_pairs(&pairs);
        let u = 0.9999;
        let joint = uni.iter().filter(|p| p.0 > u && p.1 > u).count() as f64;
        let denom = uni.iter().filter(|p| p.1 > u).count() as f64;
        let chi_hat = joint / denom;
        // 3 binomial SEs plus a little slack for pre-asymptotic bias.
        let se = (chi_hat * (1.0 - chi_hat) / denom).sqrt();
        assert!(
            (chi_hat - closed).abs() < 3.0 * se + 0.02,
            "chi_hat {chi_hat} vs closed form {closed}"
        );
    }

    #[test]
    #[ignore]
    fn debug_eta_variants() {
        // Count-based comparison of regression variants for the eta slope.
        for &rho in &[0.0f64, 0.4, 0.8] {
            let pairs = gaussian_pairs(rho, 5_000_000, 100 + (rho * 10.0) as u64);
            let uni = rank_pairs(&pairs);
            let n = uni.len() as f64;
            let ks: Vec<f64> = (4..=16).map(|i| i as f64 * 0.25).collect(); // k in [1,4]
            let mut t = Vec::new();
            let mut y = Vec::new();
            let mut w = Vec::new();
            for &k in &ks {
                let u = 1.0 - 10f64.powf(-k);
                let joint = uni.iter().filter(|p| p.0 > u && p.1 > u).count();
                if joint == 0 {
                    continue;
                }
                let p = joint as f64 / n;
                t.push(-(1.0 - u).ln());
                y.push(p.ln());
                w.push(n * p / (1.0 - p));
            }
            let fit = |rows: Vec<Vec<f64>>, y: &[f64], w: &[f64]| -> Vec<f64> {
                let c = rows[0].len();
                let mut a = vec![0.0; c * c];
                let mut rhs = vec![0.0; c];
                for ((row, &yy), &ww) in rows.iter().zip(y).zip(w) {
                    for i in 0..c {
                        rhs[i] += ww * row[i] * yy;
                        for j in 0..c {
                            a[i * c + j] += ww * row[i] * row[j];
                        }
                    }
                }
                let l = crate::linalg::cholesky(&a, c).unwrap();
                crate::linalg::chol_solve(&l, c, &rhs)
            };
            let deep: Vec<usize> = (0..t.len()).filter(|&i| t[i] > 4.5).collect();
            let mk = |idx: &[usize], f: &dyn Fn(f64) -> Vec<f64>| {
                (
                    idx.iter().map(|&i| f(t[i])).collect::<Vec<_>>(),
                    idx.iter().map(|&i| y[i]).collect::<Vec<f64>>(),
                    idx.iter().map(|&i| w[i]).collect::<Vec<f64>>(),
                )
            };
            let all: Vec<usize> = (0..t.len()).collect();
            let (r1, y1, w1) = mk(&deep, &|tt| vec![1.0, tt]);
            let c1 = fit(r1, &y1, &w1);
            let (r2, y2, w2) = mk(&all, &|tt| vec![1.0, tt, tt.ln()]);
            let c2 = fit(r2, &y2, &w2);
            let (r3, y3, w3) = mk(&all, &|tt| vec![1.0, tt, 1.0 / tt]);
            let c3 = fit(r3, &y3, &w3);
            let (r4, y4, w4) = mk(&all, &|tt| vec![1.0, tt]);
            let c4 = fit(r4, &y4, &w4);
            println!(
                "rho={rho}: true {:.3} | deep2 {:.4} | lnt3 {:.4} | invt3 {:.4} | all2 {:.4}",
                (1.0 + rho) / 2.0,
                -1.0 / c1[1],
                -1.0 / c2[1],
                -1.0 / c3[1],
                -1.0 / c4[1],
            );
        }
    }

    #[test]
    fn gaussian_eta_matches_formula() {
        for &rho in &[0.0, 0.4, 0.8] {
            let pairs = gaussian_pairs(rho, 5_000_000, 100 + (rho * 10.0) as u64);
            let est = eta_estimate(&pairs, &default_eta_levels()).unwrap();
            assert!(
                (est.eta - gaussian_eta(rho)).abs() < 0.03,
                "rho={rho}: eta {} vs {}",
                est.eta,
                gaussian_eta(rho)
            );
            assert_eq!(est.residuals.len(), est.levels_used.len());
        }
    }

    #[test]
    fn pareto_scale_eta_regimes() {
        // delta > 1/2: asymptotic dependence, eta = 1.
        let pairs =
            simulate_model_pairs(&MixingLaw::Hw { delta: 0.7 }, LinkFn::Pareto, 0.5, 0.0, 3_000_000, 40)
                .unwrap();
        let est = eta_estimate(&pairs, &default_eta_levels()).unwrap();
        assert!(est.eta > 0.9, "delta=0.7: eta {}", est.eta);

        // delta = 0.4 with eta_Z = 0.75: eta_Z/(1+eta_Z) = 3/7 > 0.4, so the
        // Gaussian regime applies and eta = eta_Z = 0.75.
        let rho = 2.0 * 0.75 - 1.0;
        let pairs =
            simulate_model_pairs(&MixingLaw::Hw { delta: 0.4 }, LinkFn::Pareto, rho, 0.0, 5_000_000, 41)
                .unwrap();
        let est = eta_estimate(&pairs, &default_eta_levels()).unwrap();
        assert!((est.eta - 0.75).abs() < 0.05, "delta=0.4: eta {}", est.eta);
    }

    #[test]
    fn steep_weibull_tail_forces_eta_half() {
        // Marginal survival exp(-x^3) (Weibull index 3 > 2) with strong
        // dependence: the unit nugget drives eta to 1/2 regardless.
        let mut rng = replicate_rng(50, 0);
        let rho: f64 = 0.3;
        let root = (1.0 - rho * rho).sqrt();
        let n = 8_000_000;
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let z2 = rho * a + root * b;
            let mk = |z: f64| -> f64 {
                let u = special::norm_cdf(z).clamp(1e-16, 1.0 - 1e-16);
                (-(1.0f64 - u).ln()).powf(1.0 / 3.0)
            };
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            pairs.push((mk(a) + e1, mk(z2) + e2));
        }
        let est = eta_estimate(&pairs, &default_eta_levels()).unwrap();
        assert!((est.eta - 0.5).abs() < 0.03, "eta {}", est.eta);
    }

    #[test]
    fn proposition1_grid_smoke() {
        let report = verify_proposition1(&[0.2, 0.7], &[0.5], 1_500_000, 7).unwrap();
        assert_eq!(report.cells.len(), 2);
        for cell in &report.cells {
            if cell.delta == 0.7 {
                assert!(cell.eta_smooth > 0.85 && cell.eta_noisy > 0.85, "{cell:?}");
            } else {
                assert!(
                    (cell.eta_smooth - 0.5).abs() < 0.05 && (cell.eta_noisy - 0.5).abs() < 0.05,
                    "{cell:?}"
                );
            }
            assert!(!cell.flagged, "nugget shifted eta: {cell:?}");
        }
    }

    #[test]
    fn aggregate_and_csv_roundtrip() {
        let sites = two_sites();
        let mut rng = replicate_rng(8, 0);
        let curves: Vec<DependenceCurve> = (0..20)
            .map(|_| {
                let data: Vec<Vec<f64>> =
                    (0..500).map(|_| vec![rng.gen(), rng.gen()]).collect();
                empirical_chi(&data, &sites, 1.0, Some(0.1), &grid(0.5, 0.9, 5)).unwrap()
            })
            .collect();
        let agg = aggregate_curves(&curves).unwrap();
        for k in 0..agg.u_grid.len() {
            assert!(agg.lo[k] <= agg.estimate[k] + 1e-12);
            assert!(agg.hi[k] >= agg.estimate[k] - 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chi.csv");
        agg.write_csv(&path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.starts_with("u,estimate,lo,hi"));
        assert_eq!(content.lines().count(), 6);
    }
}
