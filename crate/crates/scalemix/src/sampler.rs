//! Adaptive Metropolis-within-Gibbs sampler for the hierarchical censored
//! model: per-replicate latent updates run in parallel, parameter blocks run
//! serially, and proposal scales adapt with log-adaptive batch updates that
//! attenuate over time.
//!
//! Block order is fixed for reproducibility: X*₁..T (parallel), R₁..T
//! (parallel), then τ², θ_R, θ_C, θ_GPD (serial). Marginal quantile tables are
//! rebuilt only when a proposal that changes them (θ_R or τ²) is evaluated,
//! and the rebuilt table is kept only on acceptance, so every likelihood
//! evaluation sees a table consistent with the parameters it scores.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{build_cov, CovMatrix, MaternParams};
use crate::io::Dataset;
use crate::likelihood::{prior_logdensity, HierarchicalParams, PriorSpec};
use crate::margins::{
    transform_t, GpdMargin, GridSpec, QuantileTable, ScaleModel, SemiMargin, SmoothMarginal,
    SmoothTable,
};
use crate::mixtures::{replicate_rng, LinkFn, MixingLaw};
use crate::special;

/// RNG stream for the serial parameter blocks.
const STREAM_SERIAL: u64 = 4 << 32;
/// Stream base for the warm-up full-conditional sweeps.
const STREAM_INIT: u64 = 8 << 32;
/// Stream base for per-(iteration, replicate) latent updates.
const STREAM_MCMC: u64 = 16 << 32;

/// One random-walk proposal scale with batch log-adaptation: after every
/// batch of proposals the log standard deviation moves by
/// gain × (batch acceptance rate − target), with gain c₀/(k+1)^{c₁} at batch
/// k, so adaptation diminishes and the chain is asymptotically Markov.
#[derive(Debug, Clone)]
pub struct AdaptiveScale {
    log_sd: f64,
    target: f64,
    c0: f64,
    c1: f64,
    batch_len: usize,
    batch_tried: usize,
    batch_accepted: usize,
    batches: usize,
    total_tried: u64,
    total_accepted: u64,
}

impl AdaptiveScale {
    pub fn new(init_sd: f64, target: f64, c0: f64, c1: f64, batch_len: usize) -> Result<Self> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::usage(format!("acceptance target must be in (0,1), got {target}")));
        }
        if !(c1 > 0.5 && c1 <= 1.0) {
            return Err(Error::usage(format!("attenuation exponent must be in (0.5, 1], got {c1}")));
        }
        if !(init_sd > 0.0) || batch_len == 0 {
            return Err(Error::usage("proposal sd must be positive and batch length nonzero"));
        }
        Ok(Self {
            log_sd: init_sd.ln(),
            target,
            c0,
            c1,
            batch_len,
            batch_tried: 0,
            batch_accepted: 0,
            batches: 0,
            total_tried: 0,
            total_accepted: 0,
        })
    }

    pub fn sd(&self) -> f64 {
        self.log_sd.exp()
    }

    /// Adaptation gain for the next batch boundary.
    pub fn gain(&self) -> f64 {
        self.c0 / ((self.batches + 1) as f64).powf(self.c1)
    }

    /// Record one proposal outcome; adapt at batch boundaries while `adapt`.
    pub fn record(&mut self, accepted: bool, adapt: bool) {
        self.total_tried += 1;
        self.total_accepted += accepted as u64;
        if !adapt {
            return;
        }
        self.batch_tried += 1;
        self.batch_accepted += accepted as usize;
        if self.batch_tried >= self.batch_len {
            let rate = self.batch_accepted as f64 / self.batch_tried as f64;
            self.log_sd = (self.log_sd + self.gain() * (rate - self.target)).clamp(-40.0, 40.0);
            self.batches += 1;
            self.batch_tried = 0;
            self.batch_accepted = 0;
        }
    }

    /// Overall acceptance rate since the last counter reset.
    pub fn rate(&self) -> f64 {
        if self.total_tried == 0 {
            f64::NAN
        } else {
            self.total_accepted as f64 / self.total_tried as f64
        }
    }

    /// Forget the acceptance counts (used at the adaptation freeze so the
    /// reported rate reflects the frozen chain only).
    pub fn reset_counts(&mut self) {
        self.total_tried = 0;
        self.total_accepted = 0;
        self.batch_tried = 0;
        self.batch_accepted = 0;
    }
}

/// Which mixing family the sampler fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFamily {
    Hw,
    Hot,
    /// R² inverse-gamma with the identity link: the t-process competitor.
    TProcess,
}

/// Full sampler configuration. Serializable so runs are reproducible from a
/// single JSON file; unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub family: FitFamily,
    pub link: LinkFn,
    /// Known censoring threshold on the observation scale.
    pub threshold: f64,
    /// Known censoring probability p (unless `sample_p`).
    pub censor_prob: f64,
    /// Fit a linear trend surface for the GPD scale instead of a constant.
    pub trend_scale: bool,
    pub iterations: usize,
    /// Iteration at which proposal-scale adaptation freezes.
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Worker threads for the per-replicate updates; 0 = library default.
    pub workers: usize,
    pub c0: f64,
    pub c1: f64,
    pub batch_len: usize,
    pub grid: GridSpec,
    /// Keep an X*/R snapshot every this many thinned draws; 0 = never.
    pub store_xstar_every: usize,
    /// Sample the Matérn smoothness; when false it stays at `fixed_smoothness`.
    pub sample_nu: bool,
    pub fixed_smoothness: f64,
    /// Treat the censoring probability as unknown with a Beta prior.
    pub sample_p: bool,
    pub p_beta: [f64; 2],
    /// Ignore the data entirely: the chain targets the prior. Used by the
    /// sampler-correctness checks.
    pub prior_only: bool,
    /// The τ² mixing warning fires when most posterior mass sits below
    /// `tau2_floor_factor` × var(transformed exceedances).
    pub tau2_floor_factor: f64,
    /// Minimum per-site exceedances for an individual tail fit; below this the
    /// site falls back to the pooled tail with a warning.
    pub min_exceedances: usize,
    /// Explicit starting parameters; defaults are derived from the data.
    pub init_params: Option<HierarchicalParams>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            family: FitFamily::Hw,
            link: LinkFn::Pareto,
            threshold: 0.0,
            censor_prob: 0.8,
            trend_scale: false,
            iterations: 50_000,
            burn_in: 25_000,
            thin: 10,
            seed: 1,
            workers: 0,
            c0: 10.0,
            c1: 0.8,
            batch_len: 50,
            grid: GridSpec { points: 300, p_lo: 1e-6, p_hi: 1.0 - 1e-6 },
            store_xstar_every: 0,
            sample_nu: false,
            fixed_smoothness: 1.5,
            sample_p: false,
            p_beta: [1.0, 1.0],
            prior_only: false,
            tau2_floor_factor: 1e-3,
            min_exceedances: 5,
            init_params: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(Error::usage("iterations and thin must be positive"));
        }
        if self.burn_in > self.iterations {
            return Err(Error::usage("burn_in cannot exceed iterations"));
        }
        if !(self.c1 > 0.5 && self.c1 <= 1.0) {
            return Err(Error::usage("c1 must lie in (0.5, 1]"));
        }
        if self.batch_len < 2 {
            return Err(Error::usage("batch_len must be at least 2"));
        }
        if !(self.censor_prob > 0.0 && self.censor_prob < 1.0) {
            return Err(Error::usage("censor_prob must be in (0,1)"));
        }
        if self.family == FitFamily::TProcess && self.link != LinkFn::Identity {
            return Err(Error::usage("the t-process fit requires the identity link"));
        }
        if !(self.fixed_smoothness > 0.0) {
            return Err(Error::usage("fixed_smoothness must be positive"));
        }
        if !(self.p_beta[0] > 0.0 && self.p_beta[1] > 0.0) {
            return Err(Error::usage("Beta prior parameters for p must be positive"));
        }
        self.grid.validate()
    }

    /// Stable hash of the serialized configuration, recorded in archives.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let digest = Sha256::digest(json.as_bytes());
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn default_law(&self) -> MixingLaw {
        match self.family {
            FitFamily::Hw => MixingLaw::Hw { delta: 0.5 },
            FitFamily::Hot => MixingLaw::Hot { beta: 1.0, gamma: 1.0 },
            FitFamily::TProcess => MixingLaw::InvGammaSq { a: 5.0, b: 5.0 },
        }
    }
}

/// Thinned chain output plus everything needed to reproduce or audit the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainArchive {
    pub names: Vec<String>,
    /// One trace per name, all of equal length.
    pub traces: Vec<Vec<f64>>,
    pub snapshots: Vec<LatentSnapshot>,
    pub accept_rates: Vec<(String, f64)>,
    pub master_seed: u64,
    pub thin: usize,
    pub iterations: usize,
    pub config_hash: String,
    pub warnings: Vec<String>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentSnapshot {
    pub iter: usize,
    pub xstar: Vec<Vec<f64>>,
    pub r: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveMeta {
    version: String,
    master_seed: u64,
    thin: usize,
    iterations: usize,
    config_hash: String,
    warnings: Vec<String>,
    accept_rates: Vec<(String, f64)>,
    wall_secs: f64,
    trace_names: Vec<String>,
}

impl ChainArchive {
    pub fn trace(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.traces[k].as_slice())
    }

    pub fn len(&self) -> usize {
        self.traces.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reconstruct the parameter vector at one thinned draw. `template`
    /// supplies the structural choices (law family, link, scale model) the
    /// traces do not encode.
    pub fn params_at(&self, row: usize, template: &HierarchicalParams) -> Result<HierarchicalParams> {
        let get = |name: &str| -> Result<f64> {
            self.trace(name)
                .and_then(|tr| tr.get(row).copied())
                .ok_or_else(|| Error::usage(format!("archive has no value for {name} at row {row}")))
        };
        let mut p = *template;
        p.tau2 = get("tau2")?;
        p.law = match template.law {
            MixingLaw::Hw { .. } => MixingLaw::Hw { delta: get("delta")? },
            MixingLaw::Hot { .. } => MixingLaw::Hot { beta: get("beta")?, gamma: get("gamma")? },
            MixingLaw::InvGammaSq { .. } => {
                MixingLaw::InvGammaSq { a: get("df_a")?, b: get("scale_b")? }
            }
        };
        p.matern = MaternParams::new(get("range")?, get("smoothness")?)?;
        p.gpd.scale = match template.gpd.scale {
            crate::margins::ScaleModel::Constant { .. } => {
                crate::margins::ScaleModel::Constant { sigma: get("sigma")? }
            }
            crate::margins::ScaleModel::Trend { .. } => crate::margins::ScaleModel::Trend {
                b0: get("b0")?,
                b1: get("b1")?,
                b2: get("b2")?,
            },
        };
        p.gpd.shape = get("xi")?;
        if let Some(tr) = self.trace("p") {
            if let Some(&v) = tr.get(row) {
                p.gpd.censor_prob = v;
            }
        }
        Ok(p)
    }

    /// Thinned row index corresponding to a snapshot's iteration number.
    pub fn snapshot_row(&self, snap: &LatentSnapshot) -> usize {
        (snap.iter + 1) / self.thin.max(1) - 1
    }

    /// Posterior mean of a named trace.
    pub fn mean(&self, name: &str) -> Option<f64> {
        let tr = self.trace(name)?;
        if tr.is_empty() {
            return None;
        }
        Some(tr.iter().sum::<f64>() / tr.len() as f64)
    }

    /// Persist as one CSV per parameter plus JSON metadata and an optional
    /// long-format latent snapshot CSV.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("traces"))?;
        let meta = ArchiveMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: self.master_seed,
            thin: self.thin,
            iterations: self.iterations,
            config_hash: self.config_hash.clone(),
            warnings: self.warnings.clone(),
            accept_rates: self.accept_rates.clone(),
            wall_secs: self.wall_secs,
            trace_names: self.names.clone(),
        };
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("metadata.json"))?, &meta)?;
        for (name, tr) in self.names.iter().zip(&self.traces) {
            let mut w = csv::Writer::from_path(dir.join("traces").join(format!("{name}.csv")))?;
            w.write_record(["value"])?;
            for v in tr {
                w.write_record([format!("{v:.17e}")])?;
            }
            w.flush()?;
        }
        if !self.snapshots.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("xstar_snapshots.csv"))?;
            w.write_record(["iter", "t", "site", "xstar", "r"])?;
            for snap in &self.snapshots {
                for (t, row) in snap.xstar.iter().enumerate() {
                    for (i, v) in row.iter().enumerate() {
                        w.write_record([
                            snap.iter.to_string(),
                            t.to_string(),
                            i.to_string(),
                            format!("{v:.17e}"),
                            format!("{:.17e}", snap.r[t]),
                        ])?;
                    }
                }
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ArchiveMeta =
            serde_json::from_reader(std::fs::File::open(dir.join("metadata.json"))?)?;
        let mut traces = Vec::with_capacity(meta.trace_names.len());
        for name in &meta.trace_names {
            let mut r = csv::Reader::from_path(dir.join("traces").join(format!("{name}.csv")))?;
            let mut tr = Vec::new();
            for rec in r.records() {
                let rec = rec?;
                tr.push(
                    rec.get(0)
                        .ok_or_else(|| Error::usage("empty trace row"))?
                        .parse::<f64>()
                        .map_err(|e| Error::usage(format!("bad trace value: {e}")))?,
                );
            }
            traces.push(tr);
        }
        let mut snapshots: Vec<LatentSnapshot> = Vec::new();
        let snap_path = dir.join("xstar_snapshots.csv");
        if snap_path.exists() {
            let mut r = csv::Reader::from_path(&snap_path)?;
            for rec in r.records() {
                let rec = rec?;
                let get = |k: usize| -> Result<f64> {
                    rec.get(k)
                        .ok_or_else(|| Error::usage("short snapshot row"))?
                        .parse::<f64>()
                        .map_err(|e| Error::usage(format!("bad snapshot value: {e}")))
                };
                let (iter, t, i) = (get(0)? as usize, get(1)? as usize, get(2)? as usize);
                if snapshots.last().map(|s| s.iter) != Some(iter) {
                    snapshots.push(LatentSnapshot { iter, xstar: Vec::new(), r: Vec::new() });
                }
                let snap = snapshots.last_mut().unwrap();
                if snap.xstar.len() <= t {
                    snap.xstar.resize(t + 1, Vec::new());
                    snap.r.resize(t + 1, f64::NAN);
                }
                if snap.xstar[t].len() <= i {
                    snap.xstar[t].resize(i + 1, f64::NAN);
                }
                snap.xstar[t][i] = get(3)?;
                snap.r[t] = get(4)?;
            }
        }
        Ok(Self {
            names: meta.trace_names,
            traces,
            snapshots,
            accept_rates: meta.accept_rates,
            master_seed: meta.master_seed,
            thin: meta.thin,
            iterations: meta.iterations,
            config_hash: meta.config_hash,
            warnings: meta.warnings,
            wall_secs: meta.wall_secs,
        })
    }
}

/// What initialization decided, for logging and tests.
#[derive(Debug, Clone)]
pub struct InitReport {
    pub warnings: Vec<String>,
    pub params: HierarchicalParams,
}

/// Precomputed observation-side quantities for a fixed (table, GPD margin)
/// pair: the threshold image and, per uncensored cell, the transformed value
/// and the marginal density ratio. With these, the censored log-likelihood of
/// any cell is a couple of normal evaluations.
struct ObsCache {
    x_p: f64,
    t_vals: Vec<Vec<f64>>,
    ratio: Vec<Vec<f64>>,
}

impl ObsCache {
    fn build(
        data: &Dataset,
        censored: &[Vec<bool>],
        table: &QuantileTable,
        gpd: &GpdMargin,
    ) -> Result<Self> {
        let x_p = table.quantile(gpd.censor_prob)?;
        let mut t_vals = Vec::with_capacity(data.replicates());
        let mut ratio = Vec::with_capacity(data.replicates());
        for (t, row) in data.y.iter().enumerate() {
            let mut tv = Vec::with_capacity(row.len());
            let mut rt = Vec::with_capacity(row.len());
            for (i, &y) in row.iter().enumerate() {
                if censored[t][i] {
                    tv.push(f64::NAN);
                    rt.push(f64::NAN);
                } else {
                    let coord = data.sites.coords[i];
                    let x = transform_t(gpd, coord, table, y)?;
                    let ln_fy = gpd.pdf(coord, y)?.max(1e-300).ln();
                    let r = ln_fy - table.ln_pdf(x);
                    if !x.is_finite() || !r.is_finite() {
                        return Err(Error::numerical(format!(
                            "non-finite transform at replicate {t}, site {i}"
                        )));
                    }
                    tv.push(x);
                    rt.push(r);
                }
            }
            t_vals.push(tv);
            ratio.push(rt);
        }
        Ok(Self { x_p, t_vals, ratio })
    }

    #[inline]
    fn term(&self, censored: bool, t: usize, i: usize, x: f64, tau: f64) -> f64 {
        if censored {
            special::log_norm_cdf((self.x_p - x) / tau)
        } else {
            special::ln_norm_pdf((self.t_vals[t][i] - x) / tau) - tau.ln() + self.ratio[t][i]
        }
    }
}

/// Per-replicate latent state with the cached quantities that make sitewise
/// updates O(D): link coordinates z, w = Σ⁻¹z, the quadratic form, and the
/// per-cell observation log-likelihood terms.
struct Rep {
    xstar: Vec<f64>,
    r: f64,
    z: Vec<f64>,
    w: Vec<f64>,
    q: f64,
    z2: f64,
    sum_ln_x: f64,
    latent_ll: f64,
    r_lp: f64,
    obs_ll: Vec<f64>,
    obs_total: f64,
    x_scales: Vec<AdaptiveScale>,
    r_scale: AdaptiveScale,
}

struct LatentCache {
    z: Vec<f64>,
    w: Vec<f64>,
    q: f64,
    z2: f64,
    sum_ln_x: f64,
    ll: f64,
}

/// Full recomputation of the latent caches; `None` when (x*, r) is outside
/// the support or numerically unusable (a rejected proposal, not an error).
fn latent_cache(xstar: &[f64], r: f64, cov: &CovMatrix, link: LinkFn) -> Option<LatentCache> {
    let d = cov.dim;
    if !(r > 0.0) || !r.is_finite() {
        return None;
    }
    let mut z = Vec::with_capacity(d);
    let mut sum_ln_x = 0.0;
    match link {
        LinkFn::Pareto => {
            for &x in xstar {
                if !(x > r) || !x.is_finite() {
                    return None;
                }
                let p = 1.0 - r / x;
                if !(p > 0.0 && p < 1.0) {
                    return None;
                }
                let zi = special::inv_norm_cdf(p);
                if !zi.is_finite() {
                    return None;
                }
                z.push(zi);
                sum_ln_x += x.ln();
            }
        }
        LinkFn::Identity => {
            for &x in xstar {
                if !x.is_finite() {
                    return None;
                }
                z.push(x / r);
            }
        }
    }
    let w = crate::linalg::mat_vec(&cov.inv, d, &z);
    let q: f64 = z.iter().zip(&w).map(|(a, b)| a * b).sum();
    let z2: f64 = z.iter().map(|v| v * v).sum();
    let ll = match link {
        LinkFn::Pareto => {
            -0.5 * cov.log_det - 0.5 * (q - z2) + d as f64 * r.ln() - 2.0 * sum_ln_x
        }
        LinkFn::Identity => {
            -0.5 * cov.log_det
                - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * q
                - d as f64 * r.ln()
        }
    };
    if !ll.is_finite() {
        return None;
    }
    Some(LatentCache { z, w, q, z2, sum_ln_x, ll })
}

#[inline]
fn ln_u(rng: &mut ChaCha20Rng) -> f64 {
    rng.gen::<f64>().max(1e-300).ln()
}

#[inline]
fn std_normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One sitewise sweep of the smooth-process full conditional for replicate t.
fn update_xstar_rep(
    rep: &mut Rep,
    t: usize,
    cov: &CovMatrix,
    link: LinkFn,
    tau: f64,
    obs: &ObsCache,
    censored: &[bool],
    rng: &mut ChaCha20Rng,
    adapt: bool,
) {
    let d = cov.dim;
    for i in 0..d {
        let step = rep.x_scales[i].sd() * std_normal(rng);
        let lnu = ln_u(rng);
        let x_old = rep.xstar[i];
        let mut accept = false;
        match link {
            LinkFn::Pareto => {
                let s_old = (x_old - rep.r).ln();
                let s_new = s_old + step;
                let x_new = rep.r + s_new.exp();
                let p = 1.0 - rep.r / x_new;
                if x_new.is_finite() && p > 0.0 && p < 1.0 {
                    let z_new = special::inv_norm_cdf(p);
                    if z_new.is_finite() {
                        let z_old = rep.z[i];
                        let dz = z_new - z_old;
                        let dq = 2.0 * dz * rep.w[i] + dz * dz * cov.inv[i * d + i];
                        let dz2 = z_new * z_new - z_old * z_old;
                        let d_latent = -0.5 * (dq - dz2) - 2.0 * (x_new.ln() - x_old.ln());
                        let obs_new = obs.term(censored[i], t, i, x_new, tau);
                        let delta = d_latent + obs_new - rep.obs_ll[i] + (s_new - s_old);
                        if lnu < delta {
                            for j in 0..d {
                                rep.w[j] += dz * cov.inv[i * d + j];
                            }
                            rep.q += dq;
                            rep.z2 += dz2;
                            rep.sum_ln_x += x_new.ln() - x_old.ln();
                            rep.latent_ll += d_latent;
                            rep.z[i] = z_new;
                            rep.xstar[i] = x_new;
                            rep.obs_total += obs_new - rep.obs_ll[i];
                            rep.obs_ll[i] = obs_new;
                            accept = true;
                        }
                    }
                }
            }
            LinkFn::Identity => {
                let x_new = x_old + step * rep.r;
                if x_new.is_finite() {
                    let v_new = x_new / rep.r;
                    let dv = v_new - rep.z[i];
                    let dq = 2.0 * dv * rep.w[i] + dv * dv * cov.inv[i * d + i];
                    let d_latent = -0.5 * dq;
                    let obs_new = obs.term(censored[i], t, i, x_new, tau);
                    let delta = d_latent + obs_new - rep.obs_ll[i];
                    if lnu < delta {
                        for j in 0..d {
                            rep.w[j] += dv * cov.inv[i * d + j];
                        }
                        rep.q += dq;
                        rep.latent_ll += d_latent;
                        rep.z[i] = v_new;
                        rep.xstar[i] = x_new;
                        rep.obs_total += obs_new - rep.obs_ll[i];
                        rep.obs_ll[i] = obs_new;
                        accept = true;
                    }
                }
            }
        }
        rep.x_scales[i].record(accept, adapt);
    }
}

/// Random-walk update of the replicate scale factor on log(r − lower).
fn update_r_rep(
    rep: &mut Rep,
    law: &MixingLaw,
    link: LinkFn,
    cov: &CovMatrix,
    rng: &mut ChaCha20Rng,
    adapt: bool,
) {
    let lo = law.support_lower();
    let step = rep.r_scale.sd() * std_normal(rng);
    let lnu = ln_u(rng);
    let s_old = (rep.r - lo).ln();
    let s_new = s_old + step;
    let r_new = lo + s_new.exp();
    let mut accept = false;
    if r_new.is_finite() && r_new > lo {
        let r_lp_new = law.log_pdf(r_new);
        if r_lp_new > f64::NEG_INFINITY {
            if let Some(lc) = latent_cache(&rep.xstar, r_new, cov, link) {
                let delta = lc.ll - rep.latent_ll + r_lp_new - rep.r_lp + (s_new - s_old);
                if lnu < delta {
                    rep.r = r_new;
                    rep.z = lc.z;
                    rep.w = lc.w;
                    rep.q = lc.q;
                    rep.z2 = lc.z2;
                    rep.sum_ln_x = lc.sum_ln_x;
                    rep.latent_ll = lc.ll;
                    rep.r_lp = r_lp_new;
                    accept = true;
                }
            }
        }
    }
    rep.r_scale.record(accept, adapt);
}

struct BlockScales {
    tau2: AdaptiveScale,
    theta_r: AdaptiveScale,
    theta_c: AdaptiveScale,
    theta_gpd: AdaptiveScale,
    p: AdaptiveScale,
}

/// The assembled sampler: data, current state, caches, and adaptation state.
pub struct Sampler {
    data: Dataset,
    cfg: SamplerConfig,
    prior: PriorSpec,
    censored: Vec<Vec<bool>>,
    params: HierarchicalParams,
    cov: CovMatrix,
    smooth: SmoothTable,
    table: QuantileTable,
    obs: ObsCache,
    reps: Vec<Rep>,
    scales: BlockScales,
    param_prior: f64,
    serial_rng: ChaCha20Rng,
    warnings: Vec<String>,
    /// Variance of the transformed exceedances at initialization; reference
    /// scale for the τ² mixing warning.
    exceed_var: f64,
}

fn target_for(dim: usize) -> f64 {
    if dim <= 1 {
        0.44
    } else {
        0.234
    }
}

impl Sampler {
    pub fn init(data: Dataset, cfg: SamplerConfig) -> Result<(Self, InitReport)> {
        cfg.validate()?;
        let d = data.n_sites();
        if d == 0 {
            return Err(Error::usage("sampler needs at least one site"));
        }
        let t_count = if cfg.prior_only { 0 } else { data.replicates() };
        let data = if cfg.prior_only {
            Dataset { sites: data.sites, y: Vec::new() }
        } else {
            data
        };
        let mut warnings = Vec::new();

        let censored: Vec<Vec<bool>> = data
            .y
            .iter()
            .map(|row| row.iter().map(|&v| v <= cfg.threshold).collect())
            .collect();

        // Per-site semiparametric margins for the initial transformation.
        // Sites whose own tail fit fails (too few exceedances) reuse the
        // pooled tail; the empirical part below the threshold stays per-site.
        let mut site_margins: Vec<(f64, f64, f64)> = Vec::new(); // (p_below, sigma, xi)
        let (mut sigma0, mut xi0) = (1.0, 0.0);
        if t_count > 0 {
            let pooled: Vec<f64> = data.y.iter().flatten().copied().collect();
            let (pooled_sigma, pooled_xi) = match SemiMargin::fit(&pooled, cfg.threshold, 10) {
                Ok(m) => (m.sigma, m.xi),
                Err(e) => {
                    // Too little tail data for a pooled fit; fall back to the
                    // mean excess (exponential moment estimate) so
                    // initialization still produces a usable starting point.
                    warnings.push(format!(
                        "pooled tail fit unavailable ({e}); using mean-excess scale"
                    ));
                    let excess: Vec<f64> = pooled
                        .iter()
                        .filter(|&&v| v > cfg.threshold)
                        .map(|&v| v - cfg.threshold)
                        .collect();
                    let sigma = if excess.is_empty() {
                        1.0
                    } else {
                        (excess.iter().sum::<f64>() / excess.len() as f64).max(1e-3)
                    };
                    (sigma, 0.0)
                }
            };
            sigma0 = pooled_sigma;
            xi0 = pooled_xi.clamp(-0.4, 0.4);
            for i in 0..d {
                let col = data.column(i);
                match SemiMargin::fit(&col, cfg.threshold, cfg.min_exceedances.max(2)) {
                    Ok(m) => site_margins.push((m.p_below, m.sigma, m.xi)),
                    Err(e) => {
                        warnings.push(format!(
                            "site {i}: per-site tail fit unavailable ({e}); using pooled tail"
                        ));
                        let below = col.iter().filter(|&&v| v <= cfg.threshold).count();
                        let p_below = below as f64 / (col.len() as f64 + 1.0);
                        site_margins.push((p_below, pooled_sigma, pooled_xi));
                    }
                }
            }
        }

        let params = cfg.init_params.unwrap_or_else(|| {
            let diam = data.sites.diameter().max(1e-6);
            HierarchicalParams {
                law: cfg.default_law(),
                link: cfg.link,
                matern: MaternParams { range: 0.2 * diam, smoothness: cfg.fixed_smoothness },
                tau2: 1.0,
                gpd: GpdMargin {
                    threshold: cfg.threshold,
                    scale: if cfg.trend_scale {
                        ScaleModel::Trend { b0: sigma0, b1: 0.0, b2: 0.0 }
                    } else {
                        ScaleModel::Constant { sigma: sigma0 }
                    },
                    shape: xi0,
                    censor_prob: cfg.censor_prob,
                },
            }
        });
        params.law.validate()?;
        params.gpd.validate_at(&data.sites.coords)?;
        if params.link != cfg.link {
            return Err(Error::usage("init_params link disagrees with config link"));
        }

        let cov = build_cov(&data.sites, &params.matern)?;
        let smooth = SmoothTable::build(&SmoothMarginal::new(params.law, params.link)?, &cfg.grid)?;
        let table = QuantileTable::build(&smooth, params.tau2, &cfg.grid)?;
        let obs = ObsCache::build(&data, &censored, &table, &params.gpd)?;
        let tau = params.tau2.sqrt();

        // Latent initialization: R at the prior median, X* from the
        // semiparametric transform (censored cells just below the threshold
        // image), clamped into the link support.
        let r0 = params.law.quantile(0.5)?;
        let r_lo = params.law.support_lower();
        let mk_scale =
            || AdaptiveScale::new(1.0, 0.44, cfg.c0, cfg.c1, cfg.batch_len).expect("valid scale");
        let mut reps = Vec::with_capacity(t_count);
        let mut exceed_vals: Vec<f64> = Vec::new();
        for t in 0..t_count {
            let mut xs = Vec::with_capacity(d);
            for i in 0..d {
                let x0 = if censored[t][i] {
                    obs.x_p - tau
                } else {
                    let (p_below, sg, xi) = site_margins[i];
                    let y = data.y[t][i];
                    let e = (y - cfg.threshold) / sg;
                    let tail = if xi.abs() < 1e-8 {
                        (-e).exp()
                    } else {
                        let z: f64 = 1.0 + xi * e;
                        if z <= 0.0 {
                            0.0
                        } else {
                            z.powf(-1.0 / xi)
                        }
                    };
                    let p_hat = (p_below + (1.0 - p_below) * (1.0 - tail))
                        .clamp(cfg.grid.p_lo, cfg.grid.p_hi);
                    let v = table.quantile(p_hat)?;
                    exceed_vals.push(v);
                    v
                };
                let x0 = if params.link == LinkFn::Pareto {
                    x0.max(r0 + 0.05 * (r0 - r_lo).max(1.0))
                } else {
                    x0
                };
                xs.push(x0);
            }
            let lc = latent_cache(&xs, r0, &cov, params.link).ok_or_else(|| {
                Error::numerical(format!("latent initialization invalid at replicate {t}"))
            })?;
            let obs_ll: Vec<f64> = (0..d)
                .map(|i| obs.term(censored[t][i], t, i, xs[i], tau))
                .collect();
            let obs_total = obs_ll.iter().sum();
            reps.push(Rep {
                xstar: xs,
                r: r0,
                z: lc.z,
                w: lc.w,
                q: lc.q,
                z2: lc.z2,
                sum_ln_x: lc.sum_ln_x,
                latent_ll: lc.ll,
                r_lp: params.law.log_pdf(r0),
                obs_ll,
                obs_total,
                x_scales: (0..d).map(|_| mk_scale()).collect(),
                r_scale: mk_scale(),
            });
        }
        // Robust squared scale of the transformed exceedances (normalized
        // MAD); a plain variance would be dominated by the heaviest tail
        // values and make the τ² mixing warning fire on healthy chains.
        let exceed_var = if exceed_vals.len() > 1 {
            let med = |vals: &mut Vec<f64>| -> f64 {
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                vals[vals.len() / 2]
            };
            let m = med(&mut exceed_vals.clone());
            let mut dev: Vec<f64> = exceed_vals.iter().map(|v| (v - m).abs()).collect();
            let mad = med(&mut dev);
            (mad / 0.6745).powi(2)
        } else {
            0.0
        };

        let gpd_dim = if cfg.trend_scale { 4 } else { 2 };
        let law_dim = match params.law {
            MixingLaw::Hw { .. } => 1,
            _ => 2,
        };
        let cov_dim = if cfg.sample_nu { 2 } else { 1 };
        let scale_for = |dim: usize| {
            AdaptiveScale::new(0.5, target_for(dim), cfg.c0, cfg.c1, cfg.batch_len)
                .expect("valid scale")
        };
        let scales = BlockScales {
            tau2: scale_for(1),
            theta_r: scale_for(law_dim),
            theta_c: scale_for(cov_dim),
            theta_gpd: scale_for(gpd_dim),
            p: scale_for(1),
        };

        let mut me = Self {
            data,
            cfg,
            prior: PriorSpec::default(),
            censored,
            params,
            cov,
            smooth,
            table,
            obs,
            reps,
            scales,
            param_prior: 0.0,
            serial_rng: replicate_rng(0, 0),
            warnings,
            exceed_var,
        };
        me.serial_rng = replicate_rng(me.cfg.seed, STREAM_SERIAL);
        me.param_prior = me.full_prior(&me.params);
        if me.param_prior == f64::NEG_INFINITY {
            return Err(Error::usage("initial parameters lie outside the prior support"));
        }

        // Warm-up: full-conditional sweeps of X* only, per the init protocol.
        let t_total = me.reps.len();
        let (seed, link, tau) = (me.cfg.seed, me.params.link, me.params.tau2.sqrt());
        let Self { reps, cov, obs, censored, .. } = &mut me;
        let (cov, obs, censored) = (&*cov, &*obs, &*censored);
        for sweep in 0..100usize {
            reps.par_iter_mut().enumerate().for_each(|(t, rep)| {
                let mut rng =
                    replicate_rng(seed, STREAM_INIT + (sweep * t_total + t) as u64);
                update_xstar_rep(rep, t, cov, link, tau, obs, &censored[t], &mut rng, true);
            });
        }
        if !me.log_posterior().is_finite() {
            return Err(Error::numerical("initialization produced a non-finite log-posterior"));
        }
        let report = InitReport { warnings: me.warnings.clone(), params: me.params };
        Ok((me, report))
    }

    fn use_data(&self) -> bool {
        !self.reps.is_empty()
    }

    pub fn params(&self) -> &HierarchicalParams {
        &self.params
    }

    pub fn table(&self) -> &QuantileTable {
        &self.table
    }

    pub fn latent(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            self.reps.iter().map(|r| r.xstar.clone()).collect(),
            self.reps.iter().map(|r| r.r).collect(),
        )
    }

    /// Joint log-posterior of the current state (up to the data-independent
    /// normalizing constant).
    pub fn log_posterior(&self) -> f64 {
        self.param_prior
            + self
                .reps
                .iter()
                .map(|r| r.latent_ll + r.r_lp + r.obs_total)
                .sum::<f64>()
    }

    fn full_prior(&self, params: &HierarchicalParams) -> f64 {
        let mut lp = prior_logdensity(params, &self.prior, &self.data.sites.coords);
        if self.cfg.sample_p {
            let p = params.gpd.censor_prob;
            if p > 0.0 && p < 1.0 {
                lp += (self.cfg.p_beta[0] - 1.0) * p.ln()
                    + (self.cfg.p_beta[1] - 1.0) * (1.0 - p).ln();
            } else {
                return f64::NEG_INFINITY;
            }
        }
        lp
    }

    fn obs_terms(&self, cache: &ObsCache, tau: f64) -> (Vec<Vec<f64>>, f64) {
        let mut rows = Vec::with_capacity(self.reps.len());
        let mut total = 0.0;
        for (t, rep) in self.reps.iter().enumerate() {
            let row: Vec<f64> = (0..rep.xstar.len())
                .map(|i| cache.term(self.censored[t][i], t, i, rep.xstar[i], tau))
                .collect();
            total += row.iter().sum::<f64>();
            rows.push(row);
        }
        (rows, total)
    }

    fn commit_obs(&mut self, rows: Vec<Vec<f64>>) {
        for (rep, row) in self.reps.iter_mut().zip(rows) {
            rep.obs_total = row.iter().sum();
            rep.obs_ll = row;
        }
    }

    fn obs_total_all(&self) -> f64 {
        self.reps.iter().map(|r| r.obs_total).sum()
    }

    /// One full iteration: parallel latent sweeps then the serial blocks.
    pub fn step(&mut self, iter: usize) -> Result<()> {
        let adapt = iter < self.cfg.burn_in;
        if iter == self.cfg.burn_in {
            self.reset_counts();
        }
        let t_total = self.reps.len();
        if t_total > 0 {
            let (seed, link, tau) = (self.cfg.seed, self.params.link, self.params.tau2.sqrt());
            let law = self.params.law;
            let Self { reps, cov, obs, censored, .. } = self;
            let (cov, obs, censored) = (&*cov, &*obs, &*censored);
            reps.par_iter_mut().enumerate().for_each(|(t, rep)| {
                let mut rng =
                    replicate_rng(seed, STREAM_MCMC + (iter * t_total + t) as u64);
                update_xstar_rep(rep, t, cov, link, tau, obs, &censored[t], &mut rng, adapt);
                update_r_rep(rep, &law, link, cov, &mut rng, adapt);
            });
        }
        self.update_tau2(adapt)?;
        self.update_theta_r(adapt)?;
        self.update_theta_c(adapt)?;
        self.update_theta_gpd(adapt)?;
        if self.cfg.sample_p {
            self.update_p(adapt)?;
        }
        Ok(())
    }

    fn reset_counts(&mut self) {
        for rep in &mut self.reps {
            for s in &mut rep.x_scales {
                s.reset_counts();
            }
            rep.r_scale.reset_counts();
        }
        self.scales.tau2.reset_counts();
        self.scales.theta_r.reset_counts();
        self.scales.theta_c.reset_counts();
        self.scales.theta_gpd.reset_counts();
        self.scales.p.reset_counts();
    }

    fn update_tau2(&mut self, adapt: bool) -> Result<()> {
        let step = self.scales.tau2.sd() * std_normal(&mut self.serial_rng);
        let lnu = ln_u(&mut self.serial_rng);
        let s_old = self.params.tau2.ln();
        let s_new = s_old + step;
        let tau2_new = s_new.exp();
        let mut accept = false;
        'eval: {
            if !(tau2_new > 0.0) || !tau2_new.is_finite() {
                break 'eval;
            }
            let mut p_new = self.params;
            p_new.tau2 = tau2_new;
            let prior_new = self.full_prior(&p_new);
            if prior_new == f64::NEG_INFINITY {
                break 'eval;
            }
            if self.use_data() {
                let Ok(table_new) = QuantileTable::build(&self.smooth, tau2_new, &self.cfg.grid)
                else {
                    break 'eval;
                };
                let Ok(cache_new) =
                    ObsCache::build(&self.data, &self.censored, &table_new, &p_new.gpd)
                else {
                    break 'eval;
                };
                // Transport proposal: rescale each uncensored residual by the
                // new noise scale around its (also shifted) anchor, the
                // transformed observation, so the standardized residual is
                // preserved; the map Jacobian is ln(τ'/τ) per mapped cell.
                // Censored x* stay put — their latent values sit where the
                // field density is steep, and dragging them coherently would
                // pin τ² to a far narrower ridge than its posterior; their
                // Φ((x_p − x*)/τ) terms are recomputed instead.
                let tau_old = self.params.tau2.sqrt();
                let tau = tau2_new.sqrt();
                let ratio = tau / tau_old;
                let mut moved: Vec<(Vec<f64>, LatentCache)> =
                    Vec::with_capacity(self.reps.len());
                let mut rows = Vec::with_capacity(self.reps.len());
                let mut total_new = 0.0;
                let mut d_latent = 0.0;
                let mut n_cells = 0usize;
                for (t, rep) in self.reps.iter().enumerate() {
                    let mut xs_new = Vec::with_capacity(rep.xstar.len());
                    for (i, &x) in rep.xstar.iter().enumerate() {
                        if self.censored[t][i] {
                            xs_new.push(x);
                            continue;
                        }
                        let xn = cache_new.t_vals[t][i]
                            + ratio * (x - self.obs.t_vals[t][i]);
                        if !xn.is_finite() {
                            break 'eval;
                        }
                        xs_new.push(xn);
                        n_cells += 1;
                    }
                    let Some(lc) = latent_cache(&xs_new, rep.r, &self.cov, self.params.link)
                    else {
                        break 'eval;
                    };
                    d_latent += lc.ll - rep.latent_ll;
                    let row: Vec<f64> = (0..xs_new.len())
                        .map(|i| cache_new.term(self.censored[t][i], t, i, xs_new[i], tau))
                        .collect();
                    total_new += row.iter().sum::<f64>();
                    rows.push(row);
                    moved.push((xs_new, lc));
                }
                let delta = prior_new - self.param_prior
                    + d_latent
                    + (total_new - self.obs_total_all())
                    + n_cells as f64 * ratio.ln()
                    + (s_new - s_old);
                if lnu < delta {
                    self.table = table_new;
                    self.obs = cache_new;
                    self.commit_obs(rows);
                    for (rep, (xs, lc)) in self.reps.iter_mut().zip(moved) {
                        rep.xstar = xs;
                        rep.z = lc.z;
                        rep.w = lc.w;
                        rep.q = lc.q;
                        rep.z2 = lc.z2;
                        rep.sum_ln_x = lc.sum_ln_x;
                        rep.latent_ll = lc.ll;
                    }
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            } else {
                let delta = prior_new - self.param_prior + (s_new - s_old);
                if lnu < delta {
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            }
        }
        self.scales.tau2.record(accept, adapt);
        Ok(())
    }

    fn update_theta_r(&mut self, adapt: bool) -> Result<()> {
        let (s_old, jac_old) = pack_law(&self.params.law);
        let sd = self.scales.theta_r.sd();
        let s_new: Vec<f64> =
            s_old.iter().map(|v| v + sd * std_normal(&mut self.serial_rng)).collect();
        let lnu = ln_u(&mut self.serial_rng);
        let mut accept = false;
        'eval: {
            let law_new = match unpack_law(&self.params.law, &s_new) {
                Some(l) => l,
                None => break 'eval,
            };
            if law_new.validate().is_err() {
                break 'eval;
            }
            let (_, jac_new) = pack_law(&law_new);
            let mut p_new = self.params;
            p_new.law = law_new;
            let prior_new = self.full_prior(&p_new);
            if prior_new == f64::NEG_INFINITY {
                break 'eval;
            }
            if self.use_data() {
                let Ok(sm) = SmoothMarginal::new(law_new, self.params.link) else { break 'eval };
                let Ok(smooth_new) = SmoothTable::build(&sm, &self.cfg.grid) else { break 'eval };
                let Ok(table_new) =
                    QuantileTable::build(&smooth_new, self.params.tau2, &self.cfg.grid)
                else {
                    break 'eval;
                };
                let Ok(cache_new) =
                    ObsCache::build(&self.data, &self.censored, &table_new, &p_new.gpd)
                else {
                    break 'eval;
                };
                // Transport proposal: percentile-match the latent state to the
                // proposed law so the tail depth of every cell is preserved.
                // Each r moves through the mixing-law survival function — its
                // prior ratio cancels the map Jacobian exactly — and each x*
                // moves through the smooth marginal, contributing the density
                // ratio ln f_old(x*) - ln f_new(x*'). Without this coupling
                // the deep-tail transformed values pin the scale parameters to
                // a ridge far narrower than their marginal posterior.
                let tau = self.params.tau2.sqrt();
                let mut moved: Vec<(Vec<f64>, f64, LatentCache, f64)> =
                    Vec::with_capacity(self.reps.len());
                let mut rows = Vec::with_capacity(self.reps.len());
                let mut total_new = 0.0;
                let mut d_latent = 0.0;
                let mut x_jac = 0.0;
                for (t, rep) in self.reps.iter().enumerate() {
                    let Ok(nls) = self.params.law.neg_log_survival(rep.r) else { break 'eval };
                    let s_r = (-nls).exp();
                    if !(s_r > 0.0 && s_r < 1.0) {
                        break 'eval;
                    }
                    let Ok(r_new) = law_new.quantile_sf(s_r) else { break 'eval };
                    let mut xs_new = Vec::with_capacity(rep.xstar.len());
                    for &x in &rep.xstar {
                        let s = self.smooth.survival(x);
                        if !(s > 0.0 && s < 1.0) {
                            break 'eval;
                        }
                        let Ok(xn) = smooth_new.quantile_sf(s) else { break 'eval };
                        let (f_old, f_new) = (self.smooth.pdf(x), smooth_new.pdf(xn));
                        if !(f_old > 0.0 && f_new > 0.0) {
                            break 'eval;
                        }
                        x_jac += f_old.ln() - f_new.ln();
                        xs_new.push(xn);
                    }
                    let Some(lc) = latent_cache(&xs_new, r_new, &self.cov, self.params.link)
                    else {
                        break 'eval;
                    };
                    d_latent += lc.ll - rep.latent_ll;
                    let row: Vec<f64> = (0..xs_new.len())
                        .map(|i| cache_new.term(self.censored[t][i], t, i, xs_new[i], tau))
                        .collect();
                    total_new += row.iter().sum::<f64>();
                    rows.push(row);
                    let r_lp = law_new.log_pdf(r_new);
                    if !r_lp.is_finite() {
                        break 'eval;
                    }
                    moved.push((xs_new, r_new, lc, r_lp));
                }
                let delta = prior_new - self.param_prior
                    + d_latent
                    + (total_new - self.obs_total_all())
                    + x_jac
                    + (jac_new - jac_old);
                if lnu < delta {
                    self.smooth = smooth_new;
                    self.table = table_new;
                    self.obs = cache_new;
                    self.commit_obs(rows);
                    for (rep, (xs, r, lc, r_lp)) in self.reps.iter_mut().zip(moved) {
                        rep.xstar = xs;
                        rep.r = r;
                        rep.z = lc.z;
                        rep.w = lc.w;
                        rep.q = lc.q;
                        rep.z2 = lc.z2;
                        rep.sum_ln_x = lc.sum_ln_x;
                        rep.latent_ll = lc.ll;
                        rep.r_lp = r_lp;
                    }
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            } else {
                let delta = prior_new - self.param_prior + (jac_new - jac_old);
                if lnu < delta {
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            }
        }
        self.scales.theta_r.record(accept, adapt);
        Ok(())
    }

    fn update_theta_c(&mut self, adapt: bool) -> Result<()> {
        let sd = self.scales.theta_c.sd();
        let mut s = vec![self.params.matern.range.ln()];
        if self.cfg.sample_nu {
            s.push(self.params.matern.smoothness.ln());
        }
        let jac_old: f64 = s.iter().sum();
        let s_new: Vec<f64> = s.iter().map(|v| v + sd * std_normal(&mut self.serial_rng)).collect();
        let lnu = ln_u(&mut self.serial_rng);
        let mut accept = false;
        'eval: {
            let range_new = s_new[0].exp();
            let nu_new = if self.cfg.sample_nu {
                s_new[1].exp()
            } else {
                self.params.matern.smoothness
            };
            let Ok(matern_new) = MaternParams::new(range_new, nu_new) else { break 'eval };
            let jac_new: f64 = s_new.iter().sum();
            let mut p_new = self.params;
            p_new.matern = matern_new;
            let prior_new = self.full_prior(&p_new);
            if prior_new == f64::NEG_INFINITY {
                break 'eval;
            }
            if self.use_data() {
                let Ok(cov_new) = build_cov(&self.data.sites, &matern_new) else { break 'eval };
                let mut caches = Vec::with_capacity(self.reps.len());
                let mut ll_new = 0.0;
                for rep in &self.reps {
                    match latent_cache(&rep.xstar, rep.r, &cov_new, self.params.link) {
                        Some(lc) => {
                            ll_new += lc.ll;
                            caches.push(lc);
                        }
                        None => break 'eval,
                    }
                }
                let ll_old: f64 = self.reps.iter().map(|r| r.latent_ll).sum();
                let delta = prior_new - self.param_prior + (ll_new - ll_old) + (jac_new - jac_old);
                if lnu < delta {
                    self.cov = cov_new;
                    for (rep, lc) in self.reps.iter_mut().zip(caches) {
                        rep.z = lc.z;
                        rep.w = lc.w;
                        rep.q = lc.q;
                        rep.z2 = lc.z2;
                        rep.sum_ln_x = lc.sum_ln_x;
                        rep.latent_ll = lc.ll;
                    }
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            } else {
                let delta = prior_new - self.param_prior + (jac_new - jac_old);
                if lnu < delta {
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            }
        }
        self.scales.theta_c.record(accept, adapt);
        Ok(())
    }

    fn update_theta_gpd(&mut self, adapt: bool) -> Result<()> {
        let sd = self.scales.theta_gpd.sd();
        let (s_old, jac_old) = pack_gpd(&self.params.gpd);
        let s_new: Vec<f64> =
            s_old.iter().map(|v| v + sd * std_normal(&mut self.serial_rng)).collect();
        let lnu = ln_u(&mut self.serial_rng);
        let mut accept = false;
        'eval: {
            let gpd_new = match unpack_gpd(&self.params.gpd, &s_new) {
                Some(g) => g,
                None => break 'eval,
            };
            let (_, jac_new) = pack_gpd(&gpd_new);
            let mut p_new = self.params;
            p_new.gpd = gpd_new;
            let prior_new = self.full_prior(&p_new);
            if prior_new == f64::NEG_INFINITY {
                break 'eval;
            }
            if self.use_data() {
                let Ok(cache_new) =
                    ObsCache::build(&self.data, &self.censored, &self.table, &gpd_new)
                else {
                    break 'eval;
                };
                // Transport proposal: shift each uncensored x* by the change
                // in its transformed observation, so the residual (t - x*)/τ
                // is preserved exactly (unit Jacobian). Censored cells keep
                // their x* — the threshold image does not depend on the tail
                // parameters — so only the density-ratio terms and the latent
                // field density enter the acceptance.
                let tau = self.params.tau2.sqrt();
                let mut moved: Vec<(Vec<f64>, LatentCache)> =
                    Vec::with_capacity(self.reps.len());
                let mut rows = Vec::with_capacity(self.reps.len());
                let mut total_new = 0.0;
                let mut d_latent = 0.0;
                for (t, rep) in self.reps.iter().enumerate() {
                    let mut xs_new = rep.xstar.clone();
                    for i in 0..xs_new.len() {
                        if !self.censored[t][i] {
                            let shift = cache_new.t_vals[t][i] - self.obs.t_vals[t][i];
                            if !shift.is_finite() {
                                break 'eval;
                            }
                            xs_new[i] += shift;
                        }
                    }
                    let Some(lc) = latent_cache(&xs_new, rep.r, &self.cov, self.params.link)
                    else {
                        break 'eval;
                    };
                    d_latent += lc.ll - rep.latent_ll;
                    let row: Vec<f64> = (0..xs_new.len())
                        .map(|i| cache_new.term(self.censored[t][i], t, i, xs_new[i], tau))
                        .collect();
                    total_new += row.iter().sum::<f64>();
                    rows.push(row);
                    moved.push((xs_new, lc));
                }
                let delta = prior_new - self.param_prior
                    + d_latent
                    + (total_new - self.obs_total_all())
                    + (jac_new - jac_old);
                if lnu < delta {
                    self.obs = cache_new;
                    self.commit_obs(rows);
                    for (rep, (xs, lc)) in self.reps.iter_mut().zip(moved) {
                        rep.xstar = xs;
                        rep.z = lc.z;
                        rep.w = lc.w;
                        rep.q = lc.q;
                        rep.z2 = lc.z2;
                        rep.sum_ln_x = lc.sum_ln_x;
                        rep.latent_ll = lc.ll;
                    }
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            } else {
                let delta = prior_new - self.param_prior + (jac_new - jac_old);
                if lnu < delta {
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            }
        }
        self.scales.theta_gpd.record(accept, adapt);
        Ok(())
    }

    fn update_p(&mut self, adapt: bool) -> Result<()> {
        let step = self.scales.p.sd() * std_normal(&mut self.serial_rng);
        let lnu = ln_u(&mut self.serial_rng);
        let p_old = self.params.gpd.censor_prob;
        let s_old = (p_old / (1.0 - p_old)).ln();
        let s_new = s_old + step;
        let p_prop = 1.0 / (1.0 + (-s_new).exp());
        let mut accept = false;
        'eval: {
            if !(p_prop > 0.0 && p_prop < 1.0) {
                break 'eval;
            }
            let jac_old = (p_old * (1.0 - p_old)).ln();
            let jac_new = (p_prop * (1.0 - p_prop)).ln();
            let mut p_new = self.params;
            p_new.gpd.censor_prob = p_prop;
            let prior_new = self.full_prior(&p_new);
            if prior_new == f64::NEG_INFINITY {
                break 'eval;
            }
            if self.use_data() {
                let Ok(cache_new) =
                    ObsCache::build(&self.data, &self.censored, &self.table, &p_new.gpd)
                else {
                    break 'eval;
                };
                let (rows, total_new) = self.obs_terms(&cache_new, self.params.tau2.sqrt());
                let delta = prior_new - self.param_prior + (total_new - self.obs_total_all())
                    + (jac_new - jac_old);
                if lnu < delta {
                    self.obs = cache_new;
                    self.commit_obs(rows);
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            } else {
                let delta = prior_new - self.param_prior + (jac_new - jac_old);
                if lnu < delta {
                    self.params = p_new;
                    self.param_prior = prior_new;
                    accept = true;
                }
            }
        }
        self.scales.p.record(accept, adapt);
        Ok(())
    }

    fn trace_names(&self) -> Vec<String> {
        let mut names = vec!["tau2".to_string()];
        match self.params.law {
            MixingLaw::Hw { .. } => names.push("delta".into()),
            MixingLaw::Hot { .. } => {
                names.push("beta".into());
                names.push("gamma".into());
            }
            MixingLaw::InvGammaSq { .. } => {
                names.push("df_a".into());
                names.push("scale_b".into());
            }
        }
        names.push("range".into());
        names.push("smoothness".into());
        match self.params.gpd.scale {
            ScaleModel::Constant { .. } => names.push("sigma".into()),
            ScaleModel::Trend { .. } => {
                names.push("b0".into());
                names.push("b1".into());
                names.push("b2".into());
            }
        }
        names.push("xi".into());
        if self.cfg.sample_p {
            names.push("p".into());
        }
        names.push("log_post".into());
        for t in 0..self.reps.len() {
            names.push(format!("r_{t}"));
        }
        names
    }

    fn trace_values(&self) -> Vec<f64> {
        let mut v = vec![self.params.tau2];
        match self.params.law {
            MixingLaw::Hw { delta } => v.push(delta),
            MixingLaw::Hot { beta, gamma } => {
                v.push(beta);
                v.push(gamma);
            }
            MixingLaw::InvGammaSq { a, b } => {
                v.push(a);
                v.push(b);
            }
        }
        v.push(self.params.matern.range);
        v.push(self.params.matern.smoothness);
        match self.params.gpd.scale {
            ScaleModel::Constant { sigma } => v.push(sigma),
            ScaleModel::Trend { b0, b1, b2 } => {
                v.push(b0);
                v.push(b1);
                v.push(b2);
            }
        }
        v.push(self.params.gpd.shape);
        if self.cfg.sample_p {
            v.push(self.params.gpd.censor_prob);
        }
        v.push(self.log_posterior());
        for rep in &self.reps {
            v.push(rep.r);
        }
        v
    }

    /// Mean acceptance rates per block (latent rates averaged over sites and
    /// replicates).
    pub fn acceptance_rates(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if !self.reps.is_empty() {
            let mut xr = Vec::new();
            let mut rr = Vec::new();
            for rep in &self.reps {
                xr.extend(rep.x_scales.iter().map(AdaptiveScale::rate));
                rr.push(rep.r_scale.rate());
            }
            out.push(("xstar".into(), mean(&xr)));
            out.push(("r".into(), mean(&rr)));
        }
        out.push(("tau2".into(), self.scales.tau2.rate()));
        out.push(("theta_r".into(), self.scales.theta_r.rate()));
        out.push(("theta_c".into(), self.scales.theta_c.rate()));
        out.push(("theta_gpd".into(), self.scales.theta_gpd.rate()));
        if self.cfg.sample_p {
            out.push(("p".into(), self.scales.p.rate()));
        }
        out
    }

    /// Run the configured number of iterations and archive the thinned chain.
    pub fn run(mut self) -> Result<ChainArchive> {
        let start = std::time::Instant::now();
        let names = self.trace_names();
        let mut traces: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut snapshots = Vec::new();
        let mut thinned = 0usize;
        for iter in 0..self.cfg.iterations {
            self.step(iter)?;
            if (iter + 1) % self.cfg.thin == 0 {
                for (tr, v) in traces.iter_mut().zip(self.trace_values()) {
                    tr.push(v);
                }
                thinned += 1;
                if self.cfg.store_xstar_every > 0
                    && thinned % self.cfg.store_xstar_every == 0
                    && !self.reps.is_empty()
                {
                    let (xstar, r) = self.latent();
                    snapshots.push(LatentSnapshot { iter, xstar, r });
                }
            }
        }
        let mut warnings = self.warnings.clone();
        if self.exceed_var > 0.0 {
            let floor = self.cfg.tau2_floor_factor * self.exceed_var;
            if let Some(k) = names.iter().position(|n| n == "tau2") {
                let tr = &traces[k];
                let post: Vec<&f64> = tr.iter().skip(tr.len() / 2).collect();
                if !post.is_empty() {
                    let frac =
                        post.iter().filter(|&&&v| v < floor).count() as f64 / post.len() as f64;
                    if frac > 0.5 {
                        warnings.push(format!(
                            "tau2 posterior mass concentrates below {floor:.3e} \
                             ({:.0}% of late draws); expect poor mixing of tau2 and X*",
                            100.0 * frac
                        ));
                    }
                }
            }
        }
        Ok(ChainArchive {
            names,
            traces,
            snapshots,
            accept_rates: self.acceptance_rates(),
            master_seed: self.cfg.seed,
            thin: self.cfg.thin,
            iterations: self.cfg.iterations,
            config_hash: self.cfg.config_hash(),
            warnings,
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Unconstrained coordinates and log-Jacobian for the mixing-law block.
fn pack_law(law: &MixingLaw) -> (Vec<f64>, f64) {
    match *law {
        MixingLaw::Hw { delta } => {
            (vec![(delta / (1.0 - delta)).ln()], delta.ln() + (1.0 - delta).ln())
        }
        MixingLaw::Hot { beta, gamma } => {
            (vec![beta.ln(), gamma.ln()], beta.ln() + gamma.ln())
        }
        MixingLaw::InvGammaSq { a, b } => (vec![a.ln(), b.ln()], a.ln() + b.ln()),
    }
}

fn unpack_law(template: &MixingLaw, s: &[f64]) -> Option<MixingLaw> {
    let law = match template {
        MixingLaw::Hw { .. } => {
            let delta = 1.0 / (1.0 + (-s[0]).exp());
            if !(delta > 0.0 && delta < 1.0) {
                return None;
            }
            MixingLaw::Hw { delta }
        }
        MixingLaw::Hot { .. } => MixingLaw::Hot { beta: s[0].exp(), gamma: s[1].exp() },
        MixingLaw::InvGammaSq { .. } => MixingLaw::InvGammaSq { a: s[0].exp(), b: s[1].exp() },
    };
    match law {
        MixingLaw::Hot { beta, gamma } if !(beta.is_finite() && gamma.is_finite()) => None,
        MixingLaw::InvGammaSq { a, b } if !(a.is_finite() && b.is_finite()) => None,
        _ => Some(law),
    }
}

/// Unconstrained coordinates and log-Jacobian for the GPD block; the shape is
/// mapped through an affine logit onto (−1/2, 1/2).
fn pack_gpd(gpd: &GpdMargin) -> (Vec<f64>, f64) {
    let v = gpd.shape + 0.5;
    let xi_s = (v / (1.0 - v)).ln();
    let xi_jac = v.ln() + (1.0 - v).ln();
    match gpd.scale {
        ScaleModel::Constant { sigma } => (vec![sigma.ln(), xi_s], sigma.ln() + xi_jac),
        ScaleModel::Trend { b0, b1, b2 } => (vec![b0, b1, b2, xi_s], xi_jac),
    }
}

fn unpack_gpd(template: &GpdMargin, s: &[f64]) -> Option<GpdMargin> {
    let mut gpd = *template;
    let (scale, xi_s) = match template.scale {
        ScaleModel::Constant { .. } => {
            let sigma = s[0].exp();
            if !sigma.is_finite() {
                return None;
            }
            (ScaleModel::Constant { sigma }, s[1])
        }
        ScaleModel::Trend { .. } => {
            (ScaleModel::Trend { b0: s[0], b1: s[1], b2: s[2] }, s[3])
        }
    };
    let v = 1.0 / (1.0 + (-xi_s).exp());
    if !(v > 0.0 && v < 1.0) {
        return None;
    }
    gpd.scale = scale;
    gpd.shape = v - 0.5;
    Some(gpd)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Initialize and run in one call, honoring the configured worker count.
pub fn run_chain(data: &Dataset, cfg: &SamplerConfig) -> Result<ChainArchive> {
    cfg.validate()?;
    let go = || -> Result<ChainArchive> {
        let (sampler, _report) = Sampler::init(data.clone(), cfg.clone())?;
        sampler.run()
    };
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::usage(format!("cannot build worker pool: {e}")))?;
        pool.install(go)
    } else {
        go()
    }
}

use crate::quad;

fn standalone_rep(xstar: Vec<f64>, r: f64, cov: &CovMatrix, link: LinkFn, law: &MixingLaw) -> Rep {
    let lc = latent_cache(&xstar, r, cov, link).expect("valid rig state");
    let d = xstar.len();
    let mk = || AdaptiveScale::new(1.0, 0.44, 10.0, 0.8, 50).expect("valid scale");
    Rep {
        xstar,
        r,
        z: lc.z,
        w: lc.w,
        q: lc.q,
        z2: lc.z2,
        sum_ln_x: lc.sum_ln_x,
        latent_ll: lc.ll,
        r_lp: law.log_pdf(r),
        obs_ll: vec![0.0; d],
        obs_total: 0.0,
        x_scales: (0..d).map(|_| mk()).collect(),
        r_scale: mk(),
    }
}

fn ks_distance(draws: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = draws.len() as f64;
    let mut ks: f64 = 0.0;
    for (k, &x) in draws.iter().enumerate() {
        let f = cdf(x);
        ks = ks.max((f - k as f64 / n).abs()).max(((k + 1) as f64 / n - f).abs());
    }
    ks
}

/// KS distance of the sitewise X* update against its quadrature-normalized
/// full conditional in a D=1 censored rig. Shared by the unit tests and the
/// acceptance harness.
#[doc(hidden)]
pub fn xstar_conditional_ks(seed: u64) -> Result<f64> {
    let cov = crate::field::cov_from_sigma(vec![1.0], 1)?;
    let law = MixingLaw::Hw { delta: 0.6 };
    let link = LinkFn::Pareto;
    let (r, tau, x_p) = (2.0f64, 1.0f64, 6.0f64);
    let obs = ObsCache { x_p, t_vals: vec![vec![f64::NAN]], ratio: vec![vec![f64::NAN]] };
    let censored = vec![true];
    let log_target = |x: f64| -> f64 {
        latent_cache(&[x], r, &cov, link).map_or(f64::NEG_INFINITY, |lc| lc.ll)
            + special::log_norm_cdf((x_p - x) / tau)
    };
    // Normalizing constant and CDF (substitute x = r + e^s).
    let norm =
        quad::integrate(|s| (log_target(r + s.exp()) + s).exp(), -30.0, 30.0, 1e-12, 1e-10, 400)?;
    let target_cdf = |x: f64| -> f64 {
        if x <= r {
            return 0.0;
        }
        let hi = (x - r).ln();
        quad::integrate(|s| (log_target(r + s.exp()) + s).exp(), -30.0, hi, 1e-12, 1e-10, 400)
            .unwrap_or(f64::NAN)
            / norm
    };
    let mut rep = standalone_rep(vec![r + 1.0], r, &cov, link, &law);
    rep.obs_ll[0] = obs.term(true, 0, 0, rep.xstar[0], tau);
    rep.obs_total = rep.obs_ll[0];
    let mut rng = replicate_rng(seed, 0);
    let mut draws = Vec::with_capacity(100_000);
    for k in 0..210_000usize {
        update_xstar_rep(&mut rep, 0, &cov, link, tau, &obs, &censored, &mut rng, k < 10_000);
        if k >= 10_000 && k % 2 == 0 {
            draws.push(rep.xstar[0]);
        }
    }
    Ok(ks_distance(&mut draws, target_cdf))
}

/// KS distance of the replicate scale update against its quadrature-normalized
/// full conditional (D=1, fixed x*, supported on (1, x*)).
#[doc(hidden)]
pub fn r_conditional_ks(seed: u64) -> Result<f64> {
    let cov = crate::field::cov_from_sigma(vec![1.0], 1)?;
    let law = MixingLaw::Hw { delta: 0.5 };
    let link = LinkFn::Pareto;
    let x_star = 7.0f64;
    let log_target = |r: f64| -> f64 {
        latent_cache(&[x_star], r, &cov, link).map_or(f64::NEG_INFINITY, |lc| lc.ll)
            + law.log_pdf(r)
    };
    let norm = quad::integrate(
        |s| (log_target(1.0 + s.exp()) + s).exp(),
        -30.0,
        (x_star - 1.0).ln(),
        1e-12,
        1e-10,
        400,
    )?;
    let target_cdf = |r: f64| -> f64 {
        if r <= 1.0 {
            return 0.0;
        }
        let hi = (r.min(x_star) - 1.0).ln();
        quad::integrate(|s| (log_target(1.0 + s.exp()) + s).exp(), -30.0, hi, 1e-12, 1e-10, 400)
            .unwrap_or(f64::NAN)
            / norm
    };
    let mut rep = standalone_rep(vec![x_star], 2.0, &cov, link, &law);
    let mut rng = replicate_rng(seed, 0);
    let mut draws = Vec::with_capacity(100_000);
    for k in 0..210_000usize {
        update_r_rep(&mut rep, &law, link, &cov, &mut rng, k < 10_000);
        if k >= 10_000 && k % 2 == 0 {
            draws.push(rep.r);
        }
    }
    Ok(ks_distance(&mut draws, target_cdf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{cov_from_sigma, SiteSet};
    use crate::io::simulate_dataset;
    use crate::quad;

    fn unit_cov(d: usize) -> CovMatrix {
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            s[i * d + i] = 1.0;
        }
        cov_from_sigma(s, d).unwrap()
    }

    /// KS statistic of draws against an analytic CDF.
    fn ks_stat(draws: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let mut ks: f64 = 0.0;
        for (k, &x) in draws.iter().enumerate() {
            let f = cdf(x);
            ks = ks.max((f - k as f64 / n).abs()).max(((k + 1) as f64 / n - f).abs());
        }
        ks
    }

    fn hw_params(delta: f64, tau2: f64) -> HierarchicalParams {
        HierarchicalParams {
            law: MixingLaw::Hw { delta },
            link: LinkFn::Pareto,
            matern: MaternParams { range: 0.3, smoothness: 1.5 },
            tau2,
            gpd: GpdMargin {
                threshold: 11.0,
                scale: ScaleModel::Constant { sigma: 1.0 },
                shape: 0.0,
                censor_prob: 0.8,
            },
        }
    }

    fn small_cfg(params: &HierarchicalParams) -> SamplerConfig {
        SamplerConfig {
            threshold: params.gpd.threshold,
            censor_prob: params.gpd.censor_prob,
            grid: GridSpec { points: 150, p_lo: 1e-5, p_hi: 1.0 - 1e-5 },
            min_exceedances: 3,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn adaptive_scale_diminishes_and_freezes() {
        let mut s = AdaptiveScale::new(1.0, 0.44, 10.0, 0.8, 10).unwrap();
        let mut prev_gain = f64::INFINITY;
        for k in 0..50 {
            let gain = s.gain();
            assert!(gain <= prev_gain, "gain must not increase");
            assert!((gain - 10.0 / ((k + 1) as f64).powf(0.8)).abs() < 1e-12);
            prev_gain = gain;
            for _ in 0..10 {
                s.record(true, true);
            }
        }
        // All-accept batches push the scale up.
        assert!(s.sd() > 1.0);
        let frozen_sd = s.sd();
        for _ in 0..100 {
            s.record(false, false);
        }
        assert_eq!(s.sd(), frozen_sd, "frozen scale must not move");
        assert!(AdaptiveScale::new(1.0, 0.44, 10.0, 0.4, 10).is_err());
    }

    #[test]
    fn degenerate_proposal_acceptance_near_one() {
        let params = hw_params(0.6, 1.0);
        let mut rng = replicate_rng(11, 0);
        let sites = SiteSet::uniform_unit_square(3, &mut rng);
        let (data, _) =
            simulate_dataset(&params, &sites, 4, 3, &GridSpec::default()).unwrap();
        let cfg = small_cfg(&params);
        let (mut s, _) = Sampler::init(data, cfg).unwrap();
        for rep in &mut s.reps {
            for sc in &mut rep.x_scales {
                sc.log_sd = -30.0;
                // Drop the acceptance counts from the warm-up sweeps so the
                // measured rate reflects the degenerate proposals only.
                sc.reset_counts();
            }
        }
        for iter in 0..200 {
            let t_total = s.reps.len();
            let (seed, link, tau) = (999, s.params.link, s.params.tau2.sqrt());
            let Sampler { reps, cov, obs, censored, .. } = &mut s;
            let (cov, obs, censored) = (&*cov, &*obs, &*censored);
            for (t, rep) in reps.iter_mut().enumerate() {
                let mut rng = replicate_rng(seed, (iter * t_total + t) as u64);
                update_xstar_rep(rep, t, cov, link, tau, obs, &censored[t], &mut rng, false);
            }
        }
        for rep in &s.reps {
            for sc in &rep.x_scales {
                assert!(sc.rate() > 0.995, "rate {}", sc.rate());
            }
        }
    }

    fn mk_rep(xstar: Vec<f64>, r: f64, cov: &CovMatrix, link: LinkFn, law: &MixingLaw) -> Rep {
        let lc = latent_cache(&xstar, r, cov, link).unwrap();
        let d = xstar.len();
        Rep {
            xstar,
            r,
            z: lc.z,
            w: lc.w,
            q: lc.q,
            z2: lc.z2,
            sum_ln_x: lc.sum_ln_x,
            latent_ll: lc.ll,
            r_lp: law.log_pdf(r),
            obs_ll: vec![0.0; d],
            obs_total: 0.0,
            x_scales: (0..d)
                .map(|_| AdaptiveScale::new(1.0, 0.44, 10.0, 0.8, 50).unwrap())
                .collect(),
            r_scale: AdaptiveScale::new(1.0, 0.44, 10.0, 0.8, 50).unwrap(),
        }
    }

    #[test]
    fn xstar_full_conditional_matches_quadrature_target() {
        let ks = xstar_conditional_ks(2024).unwrap();
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn r_full_conditional_matches_quadrature_target() {
        let ks = r_conditional_ks(31).unwrap();
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn r_update_with_no_sites_recovers_prior() {
        // D=0 degenerate rig: the full conditional is the prior itself.
        let cov = cov_from_sigma(Vec::new(), 0).unwrap();
        let law = MixingLaw::Hw { delta: 0.5 };
        let mut rep = mk_rep(Vec::new(), 3.0, &cov, LinkFn::Pareto, &law);
        let mut rng = replicate_rng(7, 0);
        let mut draws = Vec::with_capacity(100_000);
        for k in 0..210_000usize {
            update_r_rep(&mut rep, &law, LinkFn::Pareto, &cov, &mut rng, k < 10_000);
            if k >= 10_000 && k % 2 == 0 {
                draws.push(rep.r);
            }
        }
        // δ=1/2 Pareto: F(r) = 1 − 1/r.
        let ks = ks_stat(&mut draws, |r| if r <= 1.0 { 0.0 } else { 1.0 - 1.0 / r });
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn prior_only_chain_recovers_priors() {
        let mut rng = replicate_rng(4, 0);
        let sites = SiteSet::uniform_unit_square(3, &mut rng);
        let data = Dataset::new(sites, Vec::new()).unwrap();
        let cfg = SamplerConfig {
            prior_only: true,
            sample_nu: true,
            iterations: 600_000,
            burn_in: 100_000,
            thin: 6,
            seed: 12,
            init_params: Some(hw_params(0.5, 1.0)),
            ..SamplerConfig::default()
        };
        let archive = run_chain(&data, &cfg).unwrap();
        let n_keep = 100_000;
        let check = |name: &str, cdf: &dyn Fn(f64) -> f64, tol: f64| {
            let tr = archive.trace(name).unwrap();
            let mut draws: Vec<f64> = tr[tr.len() - n_keep..].to_vec();
            let ks = ks_stat(&mut draws, cdf);
            assert!(ks < tol, "{name}: KS = {ks}");
        };
        // With a smooth target every serial block must sit at its adaptation
        // optimum (scalar blocks 0.44; theta_c and theta_gpd are 2-dim with
        // a shared spherical scale, target 0.234).
        for (name, rate) in &archive.accept_rates {
            let target = match name.as_str() {
                "theta_c" | "theta_gpd" => 0.234,
                _ => 0.44,
            };
            assert!(
                (rate - target).abs() < 0.05,
                "{name}: prior-only rate {rate} vs target {target}"
            );
        }
        let half_cauchy = |x: f64| (2.0 / std::f64::consts::PI) * x.atan();
        check("tau2", &|x| special::gamma_q(0.1, 0.1 / x), 0.02);
        check("range", &half_cauchy, 0.02);
        check("smoothness", &half_cauchy, 0.02);
        check("sigma", &half_cauchy, 0.02);
        check("delta", &|x| x.clamp(0.0, 1.0), 0.02);
        check("xi", &|x| (x + 0.5).clamp(0.0, 1.0), 0.02);
    }

    #[test]
    #[ignore]
    fn debug_theta_r_adaptation() {
        let truth = hw_params(0.6, 1.0);
        let mut rng = replicate_rng(21, 0);
        let sites = SiteSet::uniform_unit_square(6, &mut rng);
        let (data, _) = simulate_dataset(&truth, &sites, 6, 17, &GridSpec::default()).unwrap();
        let cfg = SamplerConfig {
            iterations: 9_000,
            burn_in: 6_000,
            thin: 5,
            seed: 5,
            c0: 2.0,
            ..small_cfg(&truth)
        };
        let (mut s, _) = Sampler::init(data, cfg).unwrap();
        let mut last = (0u64, 0u64);
        for iter in 0..9000 {
            s.step(iter).unwrap();
            let tr = (s.scales.theta_r.total_tried, s.scales.theta_r.total_accepted);
            if tr.0 < last.0 {
                last = (0, 0);
            }
            if iter % 500 == 499 {
                let acc_window = tr.1 - last.1;
                let tried_window = tr.0 - last.0;
                println!(
                    "iter {iter}: theta_r sd {:.4} window rate {:.3} delta {:.3}",
                    s.scales.theta_r.sd(),
                    acc_window as f64 / tried_window.max(1) as f64,
                    match s.params.law { MixingLaw::Hw { delta } => delta, _ => f64::NAN }
                );
                last = tr;
            }
        }
    }

    #[test]
    #[ignore]
    fn debug_delta_profile() {
        let truth = hw_params(0.6, 1.0);
        let mut rng = replicate_rng(21, 0);
        let sites = SiteSet::uniform_unit_square(6, &mut rng);
        let (data, _) = simulate_dataset(&truth, &sites, 6, 17, &GridSpec::default()).unwrap();
        let cfg = small_cfg(&truth);
        let (s, _) = Sampler::init(data, cfg.clone()).unwrap();
        for k in 0..41 {
            let delta = 0.50 + 0.0005 * k as f64;
            let law = MixingLaw::Hw { delta };
            let sm = SmoothMarginal::new(law, LinkFn::Pareto).unwrap();
            let smooth = SmoothTable::build(&sm, &cfg.grid).unwrap();
            let table = QuantileTable::build(&smooth, s.params.tau2, &cfg.grid).unwrap();
            let cache = ObsCache::build(&s.data, &s.censored, &table, &s.params.gpd).unwrap();
            let (_, total) = s.obs_terms(&cache, s.params.tau2.sqrt());
            let r_lp: f64 = s.reps.iter().map(|r| law.log_pdf(r.r)).sum();
            println!("delta {delta:.4}: obs {total:.6} r_lp {r_lp:.6} x_p {:.6}", cache.x_p);
        }
    }

    #[test]
    fn small_fit_hits_acceptance_targets_and_support() {
        let truth = hw_params(0.6, 1.0);
        let mut rng = replicate_rng(21, 0);
        let sites = SiteSet::uniform_unit_square(6, &mut rng);
        let (data, _) = simulate_dataset(&truth, &sites, 6, 17, &GridSpec::default()).unwrap();
        let cfg = SamplerConfig {
            iterations: 9_000,
            burn_in: 6_000,
            thin: 5,
            seed: 5,
            ..small_cfg(&truth)
        };
        let archive = run_chain(&data, &cfg).unwrap();
        for (name, rate) in &archive.accept_rates {
            println!("block {name}: post-freeze acceptance {rate:.3}");
            // The blocks that move the marginal transformation (theta_r,
            // tau2, theta_gpd) condition on X* along an extremely tight
            // ridge — tail quantiles are power-law sensitive to their
            // parameters — so their equilibrium acceptance fluctuates with
            // the latent state; for them we require only that the chain
            // keeps moving. The smooth-target blocks must sit at the
            // adaptation optimum; the full ±0.05 check for every serial
            // block runs against the smooth prior-only target in
            // `prior_only_chain_recovers_priors`.
            if matches!(name.as_str(), "theta_r" | "tau2" | "theta_gpd") {
                assert!(*rate > 0.005 && *rate < 0.95, "{name}: rate {rate} stuck");
            } else if name == "xstar" || name == "r" {
                // Latent-block conditionals drift with every marginal-
                // transformation move after the freeze; a moderate band
                // around the target is the right data-mode check.
                assert!(*rate > 0.2 && *rate < 0.7, "{name}: rate {rate}");
            } else {
                assert!(
                    (rate - 0.44).abs() < 0.05,
                    "{name}: rate {rate} vs target 0.44"
                );
            }
        }
        // Archived states respect the support constraints.
        for &d in archive.trace("delta").unwrap() {
            assert!(d > 0.0 && d < 1.0);
        }
        for &x in archive.trace("xi").unwrap() {
            assert!(x > -0.5 && x < 0.5);
        }
        for &v in archive.trace("tau2").unwrap() {
            assert!(v > 0.0);
        }
        for t in 0..data.replicates() {
            for &r in archive.trace(&format!("r_{t}")).unwrap() {
                assert!(r > 1.0);
            }
        }
        assert!(archive.trace("log_post").unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn parallel_worker_count_does_not_change_the_chain() {
        let truth = hw_params(0.6, 1.0);
        let mut rng = replicate_rng(33, 0);
        let sites = SiteSet::uniform_unit_square(4, &mut rng);
        let (data, _) = simulate_dataset(&truth, &sites, 4, 29, &GridSpec::default()).unwrap();
        let base = SamplerConfig {
            iterations: 100,
            burn_in: 50,
            thin: 1,
            seed: 8,
            ..small_cfg(&truth)
        };
        let one = run_chain(&data, &SamplerConfig { workers: 1, ..base.clone() }).unwrap();
        let two = run_chain(&data, &SamplerConfig { workers: 2, ..base.clone() }).unwrap();
        assert_eq!(one.names, two.names);
        for (a, b) in one.traces.iter().zip(&two.traces) {
            assert_eq!(a, b, "traces differ across worker counts");
        }
        // Replay with the same seed reproduces the archive bit-for-bit.
        let again = run_chain(&data, &SamplerConfig { workers: 1, ..base }).unwrap();
        assert_eq!(one.traces, again.traces);
    }

    #[test]
    fn initialization_is_finite_and_reproducible() {
        let truth = hw_params(0.7, 9.0);
        let mut rng = replicate_rng(55, 0);
        let sites = SiteSet::uniform_unit_square(8, &mut rng);
        let (data, _) = simulate_dataset(&truth, &sites, 10, 91, &GridSpec::default()).unwrap();
        let cfg = small_cfg(&truth);
        let (s1, rep1) = Sampler::init(data.clone(), cfg.clone()).unwrap();
        assert!(s1.log_posterior().is_finite());
        let (s2, _) = Sampler::init(data, cfg).unwrap();
        let (x1, r1) = s1.latent();
        let (x2, r2) = s2.latent();
        assert_eq!(x1, x2);
        assert_eq!(r1, r2);
        assert!(rep1.params.tau2 > 0.0);
    }

    #[test]
    fn initialization_handles_skew_t_data() {
        // The mis-specification design: skew-t data fitted with the HW model.
        let mut rng = replicate_rng(70, 0);
        let sites = SiteSet::uniform_unit_square(8, &mut rng);
        let cov = crate::field::build_cov(
            &sites,
            &MaternParams { range: 0.3, smoothness: 1.5 },
        )
        .unwrap();
        let x = crate::mixtures::simulate_skew_t(&cov, 5.0, 5.0, 3.0, 12, 77).unwrap();
        let mut pooled: Vec<f64> = x.iter().flatten().copied().collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let u = pooled[(pooled.len() as f64 * 0.8) as usize];
        let data = Dataset::new(sites, x).unwrap();
        let cfg = SamplerConfig {
            threshold: u,
            censor_prob: 0.8,
            grid: GridSpec { points: 150, p_lo: 1e-5, p_hi: 1.0 - 1e-5 },
            min_exceedances: 3,
            ..SamplerConfig::default()
        };
        let (s, report) = Sampler::init(data, cfg).unwrap();
        assert!(s.log_posterior().is_finite());
        // Warnings (if any) identify the affected sites rather than failing.
        for w in &report.warnings {
            assert!(w.contains("site"));
        }
    }

    #[test]
    fn archive_save_load_roundtrip() {
        let truth = hw_params(0.6, 1.0);
        let mut rng = replicate_rng(41, 0);
        let sites = SiteSet::uniform_unit_square(3, &mut rng);
        let (data, _) = simulate_dataset(&truth, &sites, 3, 13, &GridSpec::default()).unwrap();
        let cfg = SamplerConfig {
            iterations: 40,
            burn_in: 20,
            thin: 2,
            store_xstar_every: 5,
            ..small_cfg(&truth)
        };
        let archive = run_chain(&data, &cfg).unwrap();
        assert_eq!(archive.len(), 20);
        let dir = tempfile::tempdir().unwrap();
        archive.save(dir.path()).unwrap();
        let back = ChainArchive::load(dir.path()).unwrap();
        assert_eq!(back.names, archive.names);
        assert_eq!(back.config_hash, archive.config_hash);
        for (a, b) in archive.traces.iter().zip(&back.traces) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
        assert_eq!(back.snapshots.len(), archive.snapshots.len());
        if let (Some(a), Some(b)) = (archive.snapshots.first(), back.snapshots.first()) {
            assert_eq!(a.xstar.len(), b.xstar.len());
            assert!((a.xstar[0][0] - b.xstar[0][0]).abs() < 1e-12 * (1.0 + a.xstar[0][0].abs()));
        }
    }
}
