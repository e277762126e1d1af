//! Marginal distributions of the smooth process X* = R g(Z(s)) and the noisy
//! process X = X* + ε, the nugget convolution CDF, spline quantile tables, the
//! GPD/empirical observation margins (optionally with a linear trend surface
//! in the GPD scale), and the marginal transformation T = F_X⁻¹ ∘ F_Y.
//!
//! Two evaluation paths coexist:
//! * `SmoothMarginal` / `NoisyMarginal` use adaptive quadrature and serve as
//!   the slow, high-accuracy reference.
//! * `SmoothTable` / `QuantileTable` are the fast cached forms rebuilt by the
//!   sampler whenever (θ_R, τ²) change. For the Pareto link the smooth CDF
//!   reduces to F_R(x) − E[R 1{R ≤ x}]/x, so the table stores one cumulative
//!   scale-mass spline and is near exact; the identity link falls back to
//!   interpolation on a fixed-node quadrature grid.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mixtures::{LinkFn, MixingLaw};
use crate::quad;
use crate::special;
use crate::spline::{isotonic_nondecreasing, CubicSpline, MonotoneSpline};

/// Marginal law of the smooth process for a given mixing law and link.
#[derive(Debug, Clone, Copy)]
pub struct SmoothMarginal {
    pub law: MixingLaw,
    pub link: LinkFn,
}

impl SmoothMarginal {
    pub fn new(law: MixingLaw, link: LinkFn) -> Result<Self> {
        law.validate()?;
        Ok(Self { law, link })
    }

    /// Lower endpoint of the support of X*.
    pub fn support_lower(&self) -> f64 {
        match self.link {
            LinkFn::Identity => f64::NEG_INFINITY,
            // g(Z) > 1, so X* > inf supp(R) · 1.
            LinkFn::Pareto => self.law.support_lower(),
        }
    }

    /// F_{X*}(x) by adaptive quadrature with the substitution r = F_R⁻¹(p),
    /// which turns the possibly heavy-tailed r-integral into one over (0, 1).
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::domain("smooth cdf needs finite x"));
        }
        let law = self.law;
        match self.link {
            LinkFn::Pareto => {
                if x <= self.support_lower() {
                    return Ok(0.0);
                }
                // P(g(Z) ≤ x/r) = (1 - r/x)₊ for the Pareto link.
                let pstar = law.cdf(x)?;
                if pstar <= 0.0 {
                    return Ok(0.0);
                }
                let v = quad::integrate(
                    |p| (1.0 - law.quantile(p).unwrap_or(x) / x).max(0.0),
                    0.0,
                    pstar,
                    1e-13,
                    1e-10,
                    600,
                )?;
                Ok(v.clamp(0.0, 1.0))
            }
            LinkFn::Identity => {
                if x == 0.0 && law.support_lower() >= 0.0 {
                    // R > 0 and Z symmetric make this exact.
                    return Ok(0.5);
                }
                let v = quad::integrate(
                    |p| special::norm_cdf(x / law.quantile(p).unwrap_or(f64::INFINITY)),
                    0.0,
                    1.0,
                    1e-13,
                    1e-10,
                    600,
                )?;
                Ok(v.clamp(0.0, 1.0))
            }
        }
    }

    /// f_{X*}(x), same substitution as `cdf`.
    pub fn pdf(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::domain("smooth pdf needs finite x"));
        }
        let law = self.law;
        match self.link {
            LinkFn::Pareto => {
                if x <= self.support_lower() {
                    return Ok(0.0);
                }
                let pstar = law.cdf(x)?;
                if pstar <= 0.0 {
                    return Ok(0.0);
                }
                // f(x) = E[R 1{R ≤ x}] / x².
                let m = quad::integrate(
                    |p| law.quantile(p).unwrap_or(x).min(x),
                    0.0,
                    pstar,
                    1e-13,
                    1e-10,
                    600,
                )?;
                Ok((m / (x * x)).max(0.0))
            }
            LinkFn::Identity => {
                let v = quad::integrate(
                    |p| {
                        let r = law.quantile(p).unwrap_or(f64::INFINITY);
                        if r.is_finite() && r > 0.0 {
                            special::norm_pdf(x / r) / r
                        } else {
                            0.0
                        }
                    },
                    0.0,
                    1.0,
                    1e-13,
                    1e-10,
                    600,
                )?;
                Ok(v.max(0.0))
            }
        }
    }
}

/// Marginal law of X = X* + ε, ε ~ N(0, τ²). Adaptive reference path; the
/// sampler uses `QuantileTable` built via `build_table`.
#[derive(Debug, Clone, Copy)]
pub struct NoisyMarginal {
    pub smooth: SmoothMarginal,
    pub tau2: f64,
}

impl NoisyMarginal {
    pub fn new(smooth: SmoothMarginal, tau2: f64) -> Result<Self> {
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::domain(format!("nugget variance must be nonneg, got {tau2}")));
        }
        Ok(Self { smooth, tau2 })
    }

    /// Convolution CDF: 1 - F_X(x) = ∫ {1 - F_{X*}(x - ε)} φ_τ(ε) dε,
    /// truncated at |ε| ≤ 8τ where the normal weight is below 1e-15.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if self.tau2 == 0.0 {
            return self.smooth.cdf(x);
        }
        let tau = self.tau2.sqrt();
        let smooth = self.smooth;
        let v = quad::integrate(
            |e| smooth.cdf(x - e).unwrap_or(f64::NAN) * special::norm_pdf(e / tau) / tau,
            -8.0 * tau,
            8.0 * tau,
            1e-10,
            1e-8,
            400,
        )?;
        if !v.is_finite() {
            return Err(Error::numerical("nugget convolution hit a smooth-cdf failure"));
        }
        Ok(v.clamp(0.0, 1.0))
    }

    pub fn pdf(&self, x: f64) -> Result<f64> {
        if self.tau2 == 0.0 {
            return self.smooth.pdf(x);
        }
        let tau = self.tau2.sqrt();
        let smooth = self.smooth;
        let v = quad::integrate(
            |e| smooth.pdf(x - e).unwrap_or(f64::NAN) * special::norm_pdf(e / tau) / tau,
            -8.0 * tau,
            8.0 * tau,
            1e-12,
            1e-8,
            400,
        )?;
        if !v.is_finite() {
            return Err(Error::numerical("nugget convolution hit a smooth-pdf failure"));
        }
        Ok(v.max(0.0))
    }

    pub fn build_table(&self, grid: &GridSpec) -> Result<QuantileTable> {
        let st = SmoothTable::build(&self.smooth, grid)?;
        QuantileTable::build(&st, self.tau2, grid)
    }
}

/// Control-point layout for `QuantileTable`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Number of final control points.
    pub points: usize,
    /// Smallest / largest probability the table must cover.
    pub p_lo: f64,
    pub p_hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 400, p_lo: 1e-7, p_hi: 1.0 - 1e-7 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 50 {
            return Err(Error::usage("grid needs at least 50 control points"));
        }
        if !(self.p_lo > 0.0 && self.p_lo < 0.5 && self.p_hi > 0.5 && self.p_hi < 1.0) {
            return Err(Error::usage(format!(
                "grid p-range must satisfy 0 < p_lo < 0.5 < p_hi < 1, got [{}, {}]",
                self.p_lo, self.p_hi
            )));
        }
        Ok(())
    }
}

enum SmoothMode {
    /// Pareto link: knots in u = -ln F̄_R and the cumulative scale mass
    /// A(u) = ∫₀^u F_R⁻¹(1 - e^{-v}) e^{-v} dv, giving
    /// F(x) = F_R(x) - A(u*(x))/x exactly up to spline error in A.
    ScaleMass(MonotoneSpline),
    /// Identity link: interpolated CDF (x → p) and ln-pdf (asinh x → ln f)
    /// from a fixed-node quadrature grid.
    Interp { cdf: MonotoneSpline, ln_pdf: CubicSpline },
}

/// Fast cached form of a smooth marginal; rebuilt whenever θ_R changes.
/// Supports the HW and HOT mixing families (the fitted models).
pub struct SmoothTable {
    pub law: MixingLaw,
    pub link: LinkFn,
    u_max: f64,
    mode: SmoothMode,
}

impl SmoothTable {
    pub fn build(smooth: &SmoothMarginal, grid: &GridSpec) -> Result<Self> {
        grid.validate()?;
        smooth.law.validate()?;
        if matches!(smooth.law, MixingLaw::InvGammaSq { .. }) && smooth.link == LinkFn::Pareto {
            return Err(Error::usage(
                "Pareto-link quantile tables support the HW and HOT mixing families only",
            ));
        }
        // Tail depth: resolve survival down to 1e-3 of the table's own floor.
        let u_max = -((1.0 - grid.p_hi) * 1e-3).ln();
        match smooth.link {
            LinkFn::Pareto => {
                // Knot spacing tied to the log-growth rate of the quantile so
                // the relative spline error in A stays near 1e-5.
                let c_eff: f64 = match smooth.law {
                    MixingLaw::Hw { delta } => delta / (1.0 - delta).max(1e-3),
                    MixingLaw::Hot { beta, gamma } => {
                        if beta == 0.0 {
                            1.0 / gamma
                        } else {
                            (1.0 / gamma).min(2.0)
                        }
                    }
                    MixingLaw::InvGammaSq { .. } => unreachable!(),
                };
                let n = ((u_max * c_eff / 0.062).ceil() as usize).clamp(400, 20_000);
                let h = u_max / n as f64;
                let mut u_knots = Vec::with_capacity(n + 1);
                let mut a_knots = Vec::with_capacity(n + 1);
                let mut acc = 0.0;
                u_knots.push(0.0);
                a_knots.push(0.0);
                let law = smooth.law;
                for k in 0..n {
                    let a = k as f64 * h;
                    let b = a + h;
                    let panel = quad::kronrod15_fixed(
                        |u| {
                            let q = law.quantile_sf((-u).exp()).unwrap_or(1e290).min(1e290);
                            q * (-u).exp()
                        },
                        a,
                        b,
                    );
                    acc += panel.max(0.0);
                    u_knots.push(b);
                    a_knots.push(acc);
                }
                let spline = MonotoneSpline::new(u_knots, a_knots)?;
                Ok(Self { law: smooth.law, link: smooth.link, u_max, mode: SmoothMode::ScaleMass(spline) })
            }
            LinkFn::Identity => {
                // Fixed quadrature nodes in u = -ln F̄_R, shared across x.
                let n_panels = 100usize;
                let hp = u_max / n_panels as f64;
                let mut nodes: Vec<(f64, f64)> = Vec::with_capacity(n_panels * 15);
                for k in 0..n_panels {
                    for (u, w) in quad::kronrod15_nodes(k as f64 * hp, (k + 1) as f64 * hp) {
                        let q = smooth.law.quantile_sf((-u).exp())?;
                        nodes.push((q, w * (-u).exp()));
                    }
                }
                let tail = 0.5 * (-u_max).exp();
                let raw_cdf = |x: f64| -> f64 {
                    let mut s = tail;
                    for &(q, w) in &nodes {
                        s += w * special::norm_cdf(x / q);
                    }
                    s.clamp(0.0, 1.0)
                };
                let raw_pdf = |x: f64| -> f64 {
                    let mut s = 0.0;
                    for &(q, w) in &nodes {
                        s += w * special::norm_pdf(x / q) / q;
                    }
                    s.max(0.0)
                };
                let p_edge_lo = grid.p_lo * 1e-2;
                let p_edge_hi = 1.0 - (1.0 - grid.p_hi) * 1e-2;
                let x_hi = bisect_root(|x| raw_cdf(x) - p_edge_hi, 0.0, 1.0, true)?;
                let x_lo = bisect_root(|x| raw_cdf(x) - p_edge_lo, 0.0, -1.0, false)?;
                // Coarse pass locates the final knots at near-uniform logit(p).
                let coarse_n = 64usize;
                let (ta, tb) = (x_lo.asinh(), x_hi.asinh());
                let mut cx = Vec::with_capacity(coarse_n);
                let mut cp = Vec::with_capacity(coarse_n);
                for j in 0..coarse_n {
                    let t = ta + (tb - ta) * j as f64 / (coarse_n - 1) as f64;
                    cx.push(t.sinh());
                    cp.push(raw_cdf(t.sinh()));
                }
                isotonic_nondecreasing(&mut cp);
                let coarse = MonotoneSpline::new(cx, cp)?;
                let n_knots = grid.points.max(200);
                let (la, lb) = (logit(p_edge_lo * 2.0), logit(1.0 - (1.0 - p_edge_hi) * 2.0));
                let mut xs: Vec<f64> = Vec::with_capacity(n_knots);
                for j in 0..n_knots {
                    let p = inv_logit(la + (lb - la) * j as f64 / (n_knots - 1) as f64);
                    let x = invert_monotone(&coarse, p).clamp(x_lo, x_hi);
                    if xs.last().map_or(true, |&last| x > last + 1e-12 * (1.0 + x.abs())) {
                        xs.push(x);
                    }
                }
                let mut ps: Vec<f64> = xs.iter().map(|&x| raw_cdf(x)).collect();
                isotonic_nondecreasing(&mut ps);
                let ts: Vec<f64> = xs.iter().map(|&x| x.asinh()).collect();
                let lnf: Vec<f64> = xs.iter().map(|&x| raw_pdf(x).max(1e-300).ln()).collect();
                let cdf = MonotoneSpline::new(xs, ps)?;
                let ln_pdf = CubicSpline::new(ts, lnf)?;
                Ok(Self { law: smooth.law, link: smooth.link, u_max, mode: SmoothMode::Interp { cdf, ln_pdf } })
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match &self.mode {
            SmoothMode::ScaleMass(a) => {
                if x <= self.law.support_lower() {
                    return 0.0;
                }
                let u = self.law.neg_log_survival(x).unwrap_or(f64::INFINITY);
                let pstar = -(-u).exp_m1();
                (pstar - a.eval(u.min(self.u_max)) / x).clamp(0.0, 1.0)
            }
            SmoothMode::Interp { cdf, .. } => cdf.eval(x).clamp(0.0, 1.0),
        }
    }

    /// 1 - cdf computed without cancellation; matters for deep-tail brackets.
    pub fn survival(&self, x: f64) -> f64 {
        match &self.mode {
            SmoothMode::ScaleMass(a) => {
                if x <= self.law.support_lower() {
                    return 1.0;
                }
                let u = self.law.neg_log_survival(x).unwrap_or(f64::INFINITY);
                ((-u).exp() + a.eval(u.min(self.u_max)) / x).clamp(0.0, 1.0)
            }
            SmoothMode::Interp { cdf, .. } => (1.0 - cdf.eval(x)).clamp(0.0, 1.0),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match &self.mode {
            SmoothMode::ScaleMass(a) => {
                if x <= self.law.support_lower() {
                    return 0.0;
                }
                let u = self.law.neg_log_survival(x).unwrap_or(f64::INFINITY);
                (a.eval(u.min(self.u_max)) / (x * x)).max(0.0)
            }
            SmoothMode::Interp { cdf, ln_pdf } => {
                let (xs, _) = cdf.knots();
                if x < xs[0] || x > xs[xs.len() - 1] {
                    return 0.0;
                }
                ln_pdf.eval(x.asinh()).exp()
            }
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("smooth quantile needs p in (0,1), got {p}")));
        }
        match &self.mode {
            SmoothMode::ScaleMass(_) => {
                let lo0 = self.law.support_lower();
                if p >= 0.5 {
                    let s = 1.0 - p;
                    bisect_root(|x| s - self.survival(x), lo0, lo0 + 1.0, true)
                } else {
                    bisect_root(|x| self.cdf(x) - p, lo0, lo0 + 1.0, true)
                }
            }
            SmoothMode::Interp { cdf, .. } => Ok(invert_monotone(cdf, p)),
        }
    }

    /// Quantile parameterized by the survival probability; avoids the 1 - p
    /// roundoff of `quantile` deep in the upper tail, where percentile
    /// matching between two tables needs full precision.
    pub fn quantile_sf(&self, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::domain(format!("smooth quantile_sf needs s in (0,1), got {s}")));
        }
        match &self.mode {
            SmoothMode::ScaleMass(_) => {
                let lo0 = self.law.support_lower();
                bisect_root(|x| s - self.survival(x), lo0, lo0 + 1.0, true)
            }
            SmoothMode::Interp { cdf, .. } => Ok(invert_monotone(cdf, 1.0 - s)),
        }
    }
}

/// Spline quantile table for the noisy margin: monotone CDF control points
/// plus a log-density spline, both over the same knots. Quantiles invert the
/// CDF spline itself, so the table is self-consistent by construction.
pub struct QuantileTable {
    pub law: MixingLaw,
    pub link: LinkFn,
    pub tau2: f64,
    /// True when quadrature noise forced an isotonic repair of the CDF knots.
    pub repaired: bool,
    cdf: MonotoneSpline,
    ln_pdf: CubicSpline,
}

impl QuantileTable {
    /// Number of fixed convolution panels; the Gaussian weight over [-8τ, 8τ]
    /// split six ways is resolved by the 15-point rule far below 1e-9.
    const CONV_PANELS: usize = 6;

    pub fn build(st: &SmoothTable, tau2: f64, grid: &GridSpec) -> Result<Self> {
        grid.validate()?;
        if !(tau2 >= 0.0 && tau2.is_finite()) {
            return Err(Error::domain(format!("nugget variance must be nonneg, got {tau2}")));
        }
        let tau = tau2.sqrt();
        let pad = 8.0 * tau;
        let x_min = st.quantile(grid.p_lo * 0.03)? - pad;
        let x_max = st.quantile(1.0 - (1.0 - grid.p_hi) * 0.03)? + pad;
        let eval = |x: f64| -> (f64, f64) {
            if tau2 == 0.0 {
                (st.cdf(x), st.pdf(x))
            } else {
                conv_pair(st, x, tau)
            }
        };
        // Coarse pass to place final knots near-uniformly in logit(p).
        let coarse_n = 80usize;
        let (ta, tb) = (x_min.asinh(), x_max.asinh());
        let mut cx = Vec::with_capacity(coarse_n);
        let mut cp = Vec::with_capacity(coarse_n);
        for j in 0..coarse_n {
            let t = ta + (tb - ta) * j as f64 / (coarse_n - 1) as f64;
            let x = t.sinh();
            cx.push(x);
            cp.push(eval(x).0);
        }
        isotonic_nondecreasing(&mut cp);
        let coarse = MonotoneSpline::new(cx, cp)?;

        let (la, lb) = (
            logit(grid.p_lo * 0.5),
            logit(1.0 - (1.0 - grid.p_hi) * 0.5),
        );
        let mut xs: Vec<f64> = Vec::with_capacity(grid.points);
        for j in 0..grid.points {
            let p = inv_logit(la + (lb - la) * j as f64 / (grid.points - 1) as f64);
            let x = invert_monotone(&coarse, p).clamp(x_min, x_max);
            if xs.last().map_or(true, |&last| x > last + 1e-12 * (1.0 + x.abs())) {
                xs.push(x);
            }
        }
        if xs.len() < 10 {
            return Err(Error::numerical("quantile table collapsed to too few knots"));
        }
        let mut ps = Vec::with_capacity(xs.len());
        let mut lnf = Vec::with_capacity(xs.len());
        for &x in &xs {
            let (p, f) = eval(x);
            ps.push(p);
            lnf.push(f.max(1e-300).ln());
        }
        let repaired = isotonic_nondecreasing(&mut ps);
        let ts: Vec<f64> = xs.iter().map(|&x| x.asinh()).collect();
        let cdf = MonotoneSpline::new(xs, ps)?;
        let ln_pdf = CubicSpline::new(ts, lnf)?;
        Ok(Self { law: st.law, link: st.link, tau2, repaired, cdf, ln_pdf })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if self.tau2 == 0.0 && self.link == LinkFn::Pareto && x <= self.law.support_lower() {
            return 0.0;
        }
        self.cdf.eval(x).clamp(0.0, 1.0)
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("table quantile needs p in (0,1), got {p}")));
        }
        Ok(invert_monotone(&self.cdf, p))
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.ln_pdf.eval(x.asinh())
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// (smallest, largest) tabulated probability.
    pub fn p_range(&self) -> (f64, f64) {
        (self.cdf.y_min(), self.cdf.y_max())
    }

    /// (smallest, largest) tabulated x.
    pub fn x_range(&self) -> (f64, f64) {
        (self.cdf.x_min(), self.cdf.x_max())
    }

    const MAGIC: &'static [u8; 4] = b"SMQT";
    const VERSION: u32 = 1;

    /// Binary sidecar: versioned header then little-endian doubles.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&Self::VERSION.to_le_bytes());
        let (law_tag, a, b) = match self.law {
            MixingLaw::Hw { delta } => (0u8, delta, 0.0),
            MixingLaw::Hot { beta, gamma } => (1u8, beta, gamma),
            MixingLaw::InvGammaSq { a, b } => (2u8, a, b),
        };
        buf.push(law_tag);
        buf.push(match self.link {
            LinkFn::Identity => 0u8,
            LinkFn::Pareto => 1u8,
        });
        buf.push(self.repaired as u8);
        buf.push(0u8);
        for v in [a, b, self.tau2] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let (xs, ps) = self.cdf.knots();
        let (_, lnf) = self.ln_pdf.knots();
        buf.extend_from_slice(&(xs.len() as u32).to_le_bytes());
        for arr in [xs, ps, lnf] {
            for &v in arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::usage("quantile table sidecar truncated"));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != Self::MAGIC {
            return Err(Error::usage("not a quantile table sidecar"));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != Self::VERSION {
            return Err(Error::usage(format!("unsupported sidecar version {ver}")));
        }
        let law_tag = take(&mut pos, 1)?[0];
        let link_tag = take(&mut pos, 1)?[0];
        let repaired = take(&mut pos, 1)?[0] != 0;
        let _pad = take(&mut pos, 1)?;
        let f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
            }
            Ok(out)
        };
        let head = f64s(&mut pos, 3)?;
        let (a, b, tau2) = (head[0], head[1], head[2]);
        let law = match law_tag {
            0 => MixingLaw::Hw { delta: a },
            1 => MixingLaw::Hot { beta: a, gamma: b },
            2 => MixingLaw::InvGammaSq { a, b },
            t => return Err(Error::usage(format!("unknown mixing-law tag {t}"))),
        };
        let link = match link_tag {
            0 => LinkFn::Identity,
            1 => LinkFn::Pareto,
            t => return Err(Error::usage(format!("unknown link tag {t}"))),
        };
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let xs = f64s(&mut pos, n)?;
        let ps = f64s(&mut pos, n)?;
        let lnf = f64s(&mut pos, n)?;
        let ts: Vec<f64> = xs.iter().map(|&x| x.asinh()).collect();
        Ok(Self {
            law,
            link,
            tau2,
            repaired,
            cdf: MonotoneSpline::new(xs, ps)?,
            ln_pdf: CubicSpline::new(ts, lnf)?,
        })
    }
}

/// One shared fixed-node pass computing the convolution CDF and pdf at x.
/// A panel edge is pinned to the support kink of F_{X*} (Pareto link), where
/// the integrand loses smoothness.
fn conv_pair(st: &SmoothTable, x: f64, tau: f64) -> (f64, f64) {
    let lim = 8.0 * tau;
    let mut edges: Vec<f64> = vec![-lim, lim];
    if st.link == LinkFn::Pareto {
        let e0 = x - st.law.support_lower();
        if e0 > -lim && e0 < lim {
            edges.insert(1, e0);
        }
    }
    let mut c = 0.0;
    let mut d = 0.0;
    for pair in edges.windows(2) {
        let width = pair[1] - pair[0];
        let n = ((QuantileTable::CONV_PANELS as f64 * width / (2.0 * lim)).ceil() as usize).max(2);
        let h = width / n as f64;
        for k in 0..n {
            let a = pair[0] + k as f64 * h;
            for (e, w) in quad::kronrod15_nodes(a, a + h) {
                let phi = w * special::norm_pdf(e / tau) / tau;
                let y = x - e;
                c += phi * st.cdf(y);
                d += phi * st.pdf(y);
            }
        }
    }
    (c.clamp(0.0, 1.0), d.max(0.0))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn inv_logit(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Invert a monotone spline at probability p, with linear extension past the
/// knot range. Bisection to near machine precision within the segment.
fn invert_monotone(s: &MonotoneSpline, p: f64) -> f64 {
    let (xs, ys) = s.knots();
    let n = xs.len();
    if p <= ys[0] {
        let sl = s.derivative(xs[0]);
        return if sl > 0.0 { xs[0] - (ys[0] - p) / sl } else { xs[0] };
    }
    if p >= ys[n - 1] {
        let sl = s.derivative(xs[n - 1]);
        return if sl > 0.0 { xs[n - 1] + (p - ys[n - 1]) / sl } else { xs[n - 1] };
    }
    let k = ys.partition_point(|&v| v < p).clamp(1, n - 1) - 1;
    let (mut lo, mut hi) = (xs[k], xs[k + 1]);
    for _ in 0..90 {
        let mid = 0.5 * (lo + hi);
        if s.eval(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Find the root of an increasing function by geometric bracket growth from
/// `start` in the direction of `probe`, then bisection.
fn bisect_root<F: Fn(f64) -> f64>(f: F, start: f64, probe: f64, upward: bool) -> Result<f64> {
    let mut a = start;
    let mut b = probe;
    let mut step = (b - a).abs().max(1.0);
    // Grow until the bracket straddles the root.
    for _ in 0..2000 {
        let fb = f(b);
        if (upward && fb >= 0.0) || (!upward && fb <= 0.0) {
            break;
        }
        a = b;
        step *= 2.0;
        b = if upward { b + step } else { b - step };
        if b.abs() > 1e300 {
            return Err(Error::numerical("root bracket diverged"));
        }
    }
    let (mut lo, mut hi) = if a < b { (a, b) } else { (b, a) };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// GPD scale: constant or a linear trend surface in site coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ScaleModel {
    Constant { sigma: f64 },
    /// σ(s) = b0 + b1·lon + b2·lat.
    Trend { b0: f64, b1: f64, b2: f64 },
}

impl ScaleModel {
    pub fn at(&self, coord: [f64; 2]) -> f64 {
        match *self {
            ScaleModel::Constant { sigma } => sigma,
            ScaleModel::Trend { b0, b1, b2 } => b0 + b1 * coord[0] + b2 * coord[1],
        }
    }
}

/// Observation margin: mass `censor_prob` at or below the threshold, GPD above.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpdMargin {
    pub threshold: f64,
    pub scale: ScaleModel,
    pub shape: f64,
    pub censor_prob: f64,
}

/// |ξ| below this uses the exponential (ξ → 0) expressions.
const XI_EPS: f64 = 1e-8;

impl GpdMargin {
    pub fn validate(&self) -> Result<()> {
        if !(self.censor_prob > 0.0 && self.censor_prob < 1.0) {
            return Err(Error::domain(format!(
                "censor probability must be in (0,1), got {}",
                self.censor_prob
            )));
        }
        if !self.shape.is_finite() {
            return Err(Error::domain("GPD shape must be finite"));
        }
        Ok(())
    }

    /// Prior-support constraint: σ(s) > 0 at every site.
    pub fn validate_at(&self, coords: &[[f64; 2]]) -> Result<()> {
        self.validate()?;
        for (i, &c) in coords.iter().enumerate() {
            if !(self.scale.at(c) > 0.0) {
                return Err(Error::domain(format!(
                    "trend surface gives nonpositive GPD scale at site {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn cdf(&self, coord: [f64; 2], y: f64) -> Result<f64> {
        self.validate()?;
        let (u, p, xi) = (self.threshold, self.censor_prob, self.shape);
        if y <= u {
            return Ok(p);
        }
        let sigma = self.scale.at(coord);
        if !(sigma > 0.0) {
            return Err(Error::domain("GPD scale must be positive"));
        }
        let e = (y - u) / sigma;
        let tail = if xi.abs() < XI_EPS {
            (-e).exp()
        } else {
            let z = 1.0 + xi * e;
            if z <= 0.0 {
                return Err(Error::domain(format!(
                    "y={y} outside GPD support (upper endpoint {})",
                    u - sigma / xi
                )));
            }
            z.powf(-1.0 / xi)
        };
        Ok(p + (1.0 - p) * (1.0 - tail))
    }

    pub fn pdf(&self, coord: [f64; 2], y: f64) -> Result<f64> {
        self.validate()?;
        let (u, p, xi) = (self.threshold, self.censor_prob, self.shape);
        if y <= u {
            return Ok(0.0);
        }
        let sigma = self.scale.at(coord);
        if !(sigma > 0.0) {
            return Err(Error::domain("GPD scale must be positive"));
        }
        let e = (y - u) / sigma;
        let dens = if xi.abs() < XI_EPS {
            (-e).exp() / sigma
        } else {
            let z = 1.0 + xi * e;
            if z <= 0.0 {
                return Err(Error::domain("y outside GPD support"));
            }
            z.powf(-1.0 / xi - 1.0) / sigma
        };
        Ok((1.0 - p) * dens)
    }

    /// Quantile of the mixed CDF. Probabilities at or below the censoring mass
    /// map to the threshold itself.
    pub fn quantile(&self, coord: [f64; 2], q: f64) -> Result<f64> {
        self.validate()?;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::domain(format!("quantile needs q in (0,1), got {q}")));
        }
        let (u, p, xi) = (self.threshold, self.censor_prob, self.shape);
        if q <= p {
            return Ok(u);
        }
        let sigma = self.scale.at(coord);
        if !(sigma > 0.0) {
            return Err(Error::domain("GPD scale must be positive"));
        }
        let t = (q - p) / (1.0 - p);
        Ok(if xi.abs() < XI_EPS {
            u - sigma * (1.0 - t).ln()
        } else {
            u + sigma * ((1.0 - t).powf(-xi) - 1.0) / xi
        })
    }
}

/// Marginal transformation T(y) = F_X⁻¹(F_Y(y)) for y at or above the
/// threshold (below it F_Y is the constant censoring mass).
pub fn transform_t(
    gpd: &GpdMargin,
    coord: [f64; 2],
    table: &QuantileTable,
    y: f64,
) -> Result<f64> {
    if y < gpd.threshold {
        return Err(Error::domain(format!(
            "transform defined for y >= threshold {}, got {y}",
            gpd.threshold
        )));
    }
    let p = gpd.cdf(coord, y)?.min(1.0 - 1e-16);
    table.quantile(p)
}

/// T⁻¹(x) = F_Y⁻¹(F_X(x)); values with F_X(x) at or below the censoring mass
/// collapse onto the threshold.
pub fn transform_t_inverse(
    gpd: &GpdMargin,
    coord: [f64; 2],
    table: &QuantileTable,
    x: f64,
) -> Result<f64> {
    let p = table.cdf(x);
    if p <= gpd.censor_prob {
        return Ok(gpd.threshold);
    }
    gpd.quantile(coord, p.min(1.0 - 1e-16))
}

/// Semiparametric per-site margin: empirical CDF below the threshold, ML-fitted
/// GPD above it.
#[derive(Debug, Clone)]
pub struct SemiMargin {
    sorted: Vec<f64>,
    pub threshold: f64,
    /// Empirical proportion of observations at or below the threshold.
    pub p_below: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl SemiMargin {
    pub fn fit(series: &[f64], threshold: f64, min_exceed: usize) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::MarginFit("empty series".into()));
        }
        let mut sorted: Vec<f64> = series.to_vec();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::MarginFit("series contains non-finite values".into()));
        }
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let excess: Vec<f64> = sorted
            .iter()
            .filter(|&&y| y > threshold)
            .map(|&y| y - threshold)
            .collect();
        if excess.len() < min_exceed.max(1) {
            return Err(Error::MarginFit(format!(
                "only {} exceedances of u={threshold}, need at least {}",
                excess.len(),
                min_exceed.max(1)
            )));
        }
        let (sigma, xi) = gpd_mle(&excess)?;
        let p_below = (sorted.len() - excess.len()) as f64 / sorted.len() as f64;
        Ok(Self { sorted, threshold, p_below, sigma, xi })
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y <= self.threshold {
            let k = self.sorted.partition_point(|&v| v <= y);
            // n+1 scaling keeps the empirical part off the 0/1 endpoints.
            return k as f64 / (self.sorted.len() as f64 + 1.0);
        }
        let e = (y - self.threshold) / self.sigma;
        let tail = if self.xi.abs() < XI_EPS {
            (-e).exp()
        } else {
            let z: f64 = 1.0 + self.xi * e;
            if z <= 0.0 {
                0.0
            } else {
                z.powf(-1.0 / self.xi)
            }
        };
        self.p_below + (1.0 - self.p_below) * (1.0 - tail)
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("quantile needs p in (0,1), got {p}")));
        }
        if p <= self.p_below {
            let n = self.sorted.len() as f64;
            let idx = ((p * (n + 1.0)).ceil() as usize).clamp(1, self.sorted.len()) - 1;
            return Ok(self.sorted[idx]);
        }
        let t = (p - self.p_below) / (1.0 - self.p_below);
        Ok(if self.xi.abs() < XI_EPS {
            self.threshold - self.sigma * (1.0 - t).ln()
        } else {
            self.threshold + self.sigma * ((1.0 - t).powf(-self.xi) - 1.0) / self.xi
        })
    }
}

/// GPD maximum likelihood on excesses via Nelder-Mead in (ln σ, ξ).
fn gpd_mle(excess: &[f64]) -> Result<(f64, f64)> {
    let n = excess.len() as f64;
    let mean = excess.iter().sum::<f64>() / n;
    let var = excess.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    // Moment start; exact for exponential data.
    let xi0 = (0.5 * (1.0 - mean * mean / var.max(1e-12))).clamp(-0.4, 0.4);
    let sig0 = (0.5 * mean * (mean * mean / var.max(1e-12) + 1.0)).max(1e-8);
    let nll = |theta: &[f64]| -> f64 {
        let sigma = theta[0].exp();
        let xi = theta[1];
        if !(xi > -0.99 && xi < 1.0) || !sigma.is_finite() {
            return f64::INFINITY;
        }
        let mut ll = -n * theta[0];
        for &e in excess {
            if xi.abs() < XI_EPS {
                ll -= e / sigma;
            } else {
                let z = 1.0 + xi * e / sigma;
                if z <= 0.0 {
                    return f64::INFINITY;
                }
                ll -= (1.0 + 1.0 / xi) * z.ln();
            }
        }
        -ll
    };
    let best = nelder_mead(&nll, &[sig0.ln(), xi0], 0.2, 500, 1e-10);
    let (sigma, xi) = (best[0].exp(), best[1]);
    if !sigma.is_finite() || !xi.is_finite() || nll(&best).is_infinite() {
        return Err(Error::MarginFit("GPD likelihood maximization failed".into()));
    }
    Ok((sigma, xi))
}

/// Minimal Nelder-Mead simplex minimizer. Good enough for the 2-4 dimensional
/// smooth objectives used here; not exposed outside the crate.
pub(crate) fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    step: f64,
    max_iter: usize,
    tol: f64,
) -> Vec<f64> {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        if (simplex[n].1 - simplex[0].1).abs() <= tol * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let mix = |alpha: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + alpha * (c - w))
                .collect()
        };
        let refl = mix(1.0);
        let f_refl = f(&refl);
        if f_refl < simplex[0].1 {
            let exp = mix(2.0);
            let f_exp = f(&exp);
            simplex[n] = if f_exp < f_refl { (exp, f_exp) } else { (refl, f_refl) };
        } else if f_refl < simplex[n - 1].1 {
            simplex[n] = (refl, f_refl);
        } else {
            let contr = mix(-0.5);
            let f_contr = f(&contr);
            if f_contr < worst.1 {
                simplex[n] = (contr, f_contr);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    for (x, b) in entry.0.iter_mut().zip(&best) {
                        *x = b + 0.5 * (*x - b);
                    }
                    entry.1 = f(&entry.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex[0].0.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixtures::replicate_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn hw_smooth(delta: f64) -> SmoothMarginal {
        SmoothMarginal::new(MixingLaw::Hw { delta }, LinkFn::Pareto).unwrap()
    }

    #[test]
    fn hw_half_closed_form_survival() {
        // δ=1/2: X* is a product of two standard Paretos, so the survival is
        // (1 + ln x)/x exactly.
        let m = hw_smooth(0.5);
        let st = SmoothTable::build(&m, &GridSpec::default()).unwrap();
        for &x in &[2.0f64, 10.0, 100.0, 1e4] {
            let exact = 1.0 - (1.0 + x.ln()) / x;
            let slow = m.cdf(x).unwrap();
            let fast = st.cdf(x);
            assert!((slow - exact).abs() < 1e-9, "x={x}: adaptive {slow} vs {exact}");
            assert!((fast - exact).abs() < 1e-7, "x={x}: table {fast} vs {exact}");
            let sv = st.survival(x);
            assert!(
                ((sv - (1.0 + x.ln()) / x) / sv).abs() < 1e-5,
                "x={x}: survival {sv}"
            );
        }
        assert_eq!(m.cdf(1.0).unwrap(), 0.0);
        assert!(m.cdf(1e12).unwrap() > 0.999_999);
    }

    #[test]
    fn invgamma_identity_is_scaled_t() {
        // R² ~ IG(a/2, b/2) with identity link gives X* = sqrt(b/a)·t_a.
        let (a, b) = (6.0f64, 16.0f64);
        let m = SmoothMarginal::new(MixingLaw::InvGammaSq { a, b }, LinkFn::Identity).unwrap();
        let s = (b / a).sqrt();
        for &x in &[-4.0f64, -1.0, 0.0, 0.5, 2.0, 7.0] {
            let exact = special::student_t_cdf(x / s, a);
            let got = m.cdf(x).unwrap();
            assert!((got - exact).abs() < 1e-8, "x={x}: {got} vs {exact}");
        }
    }

    #[test]
    fn invgamma_identity_table_matches_scaled_t() {
        // The identity-link table path must also cover the t-process margin,
        // since the model-comparison fits need it.
        let (a, b) = (6.0f64, 16.0f64);
        let m = SmoothMarginal::new(MixingLaw::InvGammaSq { a, b }, LinkFn::Identity).unwrap();
        let st = SmoothTable::build(&m, &GridSpec::default()).unwrap();
        let s = (b / a).sqrt();
        // The identity-link table interpolates the CDF between ~400 knots;
        // between-knot error is a few 1e-6, well inside the 1e-4 accuracy
        // the censored likelihood needs.
        for &x in &[-6.0f64, -1.0, 0.0, 0.5, 2.0, 9.0] {
            let exact = special::student_t_cdf(x / s, a);
            let got = st.cdf(x);
            assert!((got - exact).abs() < 1e-5, "x={x}: {got} vs {exact}");
        }
        let table = QuantileTable::build(&st, 0.25, &GridSpec::default()).unwrap();
        for &p in &[0.05f64, 0.5, 0.95] {
            let x = table.quantile(p).unwrap();
            assert!((table.cdf(x) - p).abs() < 1e-6);
        }
        // Nugget convolution sanity: symmetric margin keeps a zero median.
        assert!(table.quantile(0.5).unwrap().abs() < 1e-3);
    }

    #[test]
    fn smooth_pdf_matches_cdf_derivative() {
        let cases = [
            SmoothMarginal::new(MixingLaw::Hw { delta: 0.3 }, LinkFn::Pareto).unwrap(),
            SmoothMarginal::new(MixingLaw::Hw { delta: 0.7 }, LinkFn::Pareto).unwrap(),
            SmoothMarginal::new(MixingLaw::Hot { beta: 0.5, gamma: 1.0 }, LinkFn::Identity).unwrap(),
        ];
        for m in cases {
            for &x in &[1.5f64, 2.0, 4.0, 9.0] {
                let h = 1e-5 * x;
                let fd = (m.cdf(x + h).unwrap() - m.cdf(x - h).unwrap()) / (2.0 * h);
                let pdf = m.pdf(x).unwrap();
                assert!(
                    (fd - pdf).abs() < 1e-6 * (1.0 + pdf.abs()),
                    "{:?} x={x}: fd={fd} pdf={pdf}",
                    m.law
                );
            }
        }
    }

    #[test]
    fn smooth_cdf_matches_monte_carlo_identity_link() {
        let law = MixingLaw::Hot { beta: 0.5, gamma: 1.0 };
        let m = SmoothMarginal::new(law, LinkFn::Identity).unwrap();
        let n = 1_000_000usize;
        let mut rng = replicate_rng(101, 0);
        let xs = [0.0f64, 1.0, 3.0, -2.0];
        let mut hits = [0usize; 4];
        for _ in 0..n {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let r = law.quantile(u).unwrap();
            let z: f64 = rng.sample(StandardNormal);
            let v = r * z;
            for (k, &x) in xs.iter().enumerate() {
                if v <= x {
                    hits[k] += 1;
                }
            }
        }
        for (k, &x) in xs.iter().enumerate() {
            let p = m.cdf(x).unwrap();
            let p_hat = hits[k] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((p_hat - p).abs() < 4.0 * se, "x={x}: {p_hat} vs {p}");
        }
    }

    #[test]
    fn noisy_reduces_to_smooth_at_zero_tau() {
        let m = NoisyMarginal::new(hw_smooth(0.4), 0.0).unwrap();
        for &x in &[1.2f64, 3.0, 50.0] {
            let a = m.cdf(x).unwrap();
            let b = m.smooth.cdf(x).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn noisy_cdf_matches_monte_carlo() {
        // HW δ=0.7, τ²=9 at x=11, the harder §5.1-style setting.
        let law = MixingLaw::Hw { delta: 0.7 };
        let m = NoisyMarginal::new(hw_smooth(0.7), 9.0).unwrap();
        let n = 1_000_000usize;
        let mut rng = replicate_rng(77, 0);
        let x0 = 11.0f64;
        let mut hits = 0usize;
        for _ in 0..n {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let r = law.quantile(u).unwrap();
            let z: f64 = rng.sample(StandardNormal);
            let w = 1.0 / special::norm_sf(z);
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * 3.0;
            if r * w + eps <= x0 {
                hits += 1;
            }
        }
        let p = m.cdf(x0).unwrap();
        let p_hat = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((p_hat - p).abs() < 4.0 * se, "{p_hat} vs {p}");
        // Full real-line support with a nugget.
        assert!(m.cdf(-20.0).unwrap() < 1e-8);
    }

    #[test]
    fn table_roundtrip_and_oracle() {
        let noisy = NoisyMarginal::new(hw_smooth(0.3), 9.0).unwrap();
        let table = noisy.build_table(&GridSpec::default()).unwrap();
        // Roundtrip |F(F⁻¹(p)) - p| over the full covered range.
        let (la, lb) = (logit(1e-6), logit(1.0 - 1e-6));
        for j in 0..1000 {
            let p = inv_logit(la + (lb - la) * j as f64 / 999.0);
            let x = table.quantile(p).unwrap();
            let back = table.cdf(x);
            assert!((back - p).abs() < 1e-6, "p={p}: back={back}");
        }
        // Table quantile vs bisection root-finding on the adaptive CDF.
        for &p in &[0.2f64, 0.5, 0.8, 0.95] {
            let x_tab = table.quantile(p).unwrap();
            let x_ref =
                bisect_root(|x| noisy.cdf(x).unwrap() - p, 0.0, 1.0, true).unwrap();
            assert!(
                (x_tab - x_ref).abs() < 1e-4 * (1.0 + x_ref.abs()),
                "p={p}: table {x_tab} vs root {x_ref}"
            );
        }
        // Interpolated CDF against the adaptive reference.
        for &x in &[-3.0f64, 2.0, 8.0, 30.0, 200.0] {
            let a = table.cdf(x);
            let b = noisy.cdf(x).unwrap();
            assert!((a - b).abs() < 5e-5, "x={x}: {a} vs {b}");
        }
        // Log-density against the adaptive reference.
        for &x in &[0.0f64, 5.0, 20.0] {
            let a = table.pdf(x);
            let b = noisy.pdf(x).unwrap();
            assert!((a - b).abs() < 2e-3 * b.max(1e-4), "x={x}: {a} vs {b}");
        }
        // Monotone on a dense grid.
        let mut prev = -1.0;
        for j in 0..2000 {
            let x = -20.0 + j as f64 * 0.5;
            let p = table.cdf(x);
            assert!(p >= prev - 1e-14);
            prev = p;
        }
    }

    #[test]
    fn table_covers_identity_link_and_symmetry() {
        let smooth =
            SmoothMarginal::new(MixingLaw::Hot { beta: 0.5, gamma: 1.0 }, LinkFn::Identity)
                .unwrap();
        let noisy = NoisyMarginal::new(smooth, 0.04).unwrap();
        let table = noisy.build_table(&GridSpec::default()).unwrap();
        // X* = R·Z is symmetric about zero, and the nugget preserves that.
        let med = table.quantile(0.5).unwrap();
        assert!(med.abs() < 1e-4, "median {med}");
        for &p in &[0.1f64, 0.5, 0.9, 0.99] {
            let x = table.quantile(p).unwrap();
            assert!((table.cdf(x) - p).abs() < 1e-6);
        }
        // CDF against the adaptive reference.
        for &x in &[-4.0f64, 0.0, 1.0, 6.0] {
            let a = table.cdf(x);
            let b = noisy.cdf(x).unwrap();
            assert!((a - b).abs() < 1e-4, "x={x}: {a} vs {b}");
        }
    }

    #[test]
    fn table_sidecar_roundtrip() {
        let noisy = NoisyMarginal::new(hw_smooth(0.4), 1.0).unwrap();
        let table = noisy
            .build_table(&GridSpec { points: 200, ..GridSpec::default() })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("margin.tbl");
        table.save(&path).unwrap();
        let loaded = QuantileTable::load(&path).unwrap();
        assert_eq!(loaded.law, table.law);
        assert_eq!(loaded.link, table.link);
        assert_eq!(loaded.tau2, table.tau2);
        for &p in &[0.01f64, 0.5, 0.99] {
            assert_eq!(loaded.quantile(p).unwrap(), table.quantile(p).unwrap());
        }
        for &x in &[0.5f64, 4.0, 40.0] {
            assert_eq!(loaded.cdf(x), table.cdf(x));
            assert_eq!(loaded.ln_pdf(x), table.ln_pdf(x));
        }
        assert!(QuantileTable::load(&dir.path().join("missing.tbl")).is_err());
    }

    #[test]
    fn gpd_margin_basics() {
        let m = GpdMargin {
            threshold: 11.0,
            scale: ScaleModel::Constant { sigma: 1.0 },
            shape: 0.0,
            censor_prob: 0.8,
        };
        let c = [0.0, 0.0];
        assert_eq!(m.cdf(c, 11.0).unwrap(), 0.8);
        assert_eq!(m.cdf(c, 5.0).unwrap(), 0.8);
        let expect = 0.8 + 0.2 * (1.0 - (-1.0f64).exp());
        assert!((m.cdf(c, 12.0).unwrap() - expect).abs() < 1e-14);
        assert_eq!(m.quantile(c, 0.5).unwrap(), 11.0);

        let m2 = GpdMargin {
            threshold: 0.0,
            scale: ScaleModel::Constant { sigma: 2.0 },
            shape: 0.5,
            censor_prob: 0.3,
        };
        for &q in &[0.31f64, 0.6, 0.9, 0.999] {
            let y = m2.quantile(c, q).unwrap();
            assert!((m2.cdf(c, y).unwrap() - q).abs() < 1e-10, "q={q}");
            let h = 1e-6 * (1.0 + y.abs());
            let fd = (m2.cdf(c, y + h).unwrap() - m2.cdf(c, y - h).unwrap()) / (2.0 * h);
            assert!((fd - m2.pdf(c, y).unwrap()).abs() < 1e-5 * (1.0 + fd));
        }
        // Negative shape: finite upper endpoint, beyond it is a domain error.
        let m3 = GpdMargin {
            threshold: 0.0,
            scale: ScaleModel::Constant { sigma: 1.0 },
            shape: -0.4,
            censor_prob: 0.5,
        };
        assert!(m3.cdf(c, 10.0).is_err());
        assert!(m3.pdf(c, 10.0).is_err());
    }

    #[test]
    fn trend_surface_positivity() {
        let m = GpdMargin {
            threshold: 0.0,
            scale: ScaleModel::Trend { b0: 1.0, b1: -2.0, b2: 0.0 },
            shape: 0.1,
            censor_prob: 0.8,
        };
        assert!(m.validate_at(&[[0.1, 0.0], [0.2, 0.3]]).is_ok());
        assert!(m.validate_at(&[[0.1, 0.0], [0.9, 0.3]]).is_err());
        assert!(
            (m.scale.at([0.25, 0.7]) - 0.5).abs() < 1e-15,
            "trend surface evaluation"
        );
    }

    #[test]
    fn transform_roundtrip_and_monotonicity() {
        let gpd = GpdMargin {
            threshold: 11.0,
            scale: ScaleModel::Constant { sigma: 1.0 },
            shape: 0.0,
            censor_prob: 0.8,
        };
        let noisy = NoisyMarginal::new(hw_smooth(0.3), 9.0).unwrap();
        let table = noisy.build_table(&GridSpec::default()).unwrap();
        let c = [0.3, 0.4];
        // Threshold maps to the p-quantile of X.
        let x_u = transform_t(&gpd, c, &table, 11.0).unwrap();
        assert!((x_u - table.quantile(0.8).unwrap()).abs() < 1e-12);
        // Roundtrip at u + σ.
        let y = 12.0;
        let x = transform_t(&gpd, c, &table, y).unwrap();
        let back = transform_t_inverse(&gpd, c, &table, x).unwrap();
        assert!((back - y).abs() < 1e-6, "roundtrip {back} vs {y}");
        // Strictly increasing on (u, u + 10σ).
        let mut prev = f64::NEG_INFINITY;
        for j in 0..200 {
            let yj = 11.0 + 10.0 * (j as f64 + 0.5) / 200.0;
            let xj = transform_t(&gpd, c, &table, yj).unwrap();
            assert!(xj > prev, "not increasing at y={yj}");
            prev = xj;
        }
        // Composition against the two independently validated pieces.
        let p = gpd.cdf(c, 12.0).unwrap();
        let x_ref = bisect_root(|x| noisy.cdf(x).unwrap() - p, 0.0, 1.0, true).unwrap();
        let x_t = transform_t(&gpd, c, &table, 12.0).unwrap();
        assert!((x_t - x_ref).abs() < 1e-4 * (1.0 + x_ref.abs()));
        // Below threshold is rejected.
        assert!(transform_t(&gpd, c, &table, 10.0).is_err());
    }

    #[test]
    fn semiparametric_fit_recovers_exponential() {
        let mut rng = replicate_rng(5, 0);
        let n = 10_000usize;
        let data: Vec<f64> = (0..n)
            .map(|_| -(rng.gen_range(f64::MIN_POSITIVE..1.0f64)).ln())
            .collect();
        let u = {
            let mut s = data.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[(0.9 * n as f64) as usize]
        };
        let fit = SemiMargin::fit(&data, u, 20).unwrap();
        assert!(fit.xi.abs() < 0.1, "xi {}", fit.xi);
        assert!((fit.sigma - 1.0).abs() < 0.1, "sigma {}", fit.sigma);
        assert!((fit.p_below - 0.9).abs() < 0.01);
        // Blended cdf at u equals the empirical proportion below u.
        let k = data.iter().filter(|&&y| y <= u).count() as f64;
        assert!((fit.cdf(u) - k / (n as f64 + 1.0)).abs() < 1e-12);
        // Quantile/cdf consistency on both sides of the threshold.
        for &p in &[0.2f64, 0.85, 0.95, 0.999] {
            let y = fit.quantile(p).unwrap();
            assert!((fit.cdf(y) - p).abs() < 0.02, "p={p}");
        }
        // All data below u is degenerate.
        assert!(SemiMargin::fit(&data, 1e9, 20).is_err());
    }

    #[test]
    fn nelder_mead_minimizes_quadratic() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2) + 5.0;
        let best = nelder_mead(&f, &[0.0, 0.0], 0.5, 400, 1e-14);
        assert!((best[0] - 3.0).abs() < 1e-5);
        assert!((best[1] + 1.0).abs() < 1e-5);
    }
}
