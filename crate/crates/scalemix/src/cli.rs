//! Command-line front end for the `scalemix` binary.
//!
//! Subcommands: `simulate`, `fit`, `diagnose`, `score`, `coverage`,
//! `verify-prop1`, `tau-study`. Every subcommand validates its configuration
//! before touching the filesystem, then writes a `manifest.json` (command,
//! seed, configuration, configuration hash, crate version) into the output
//! directory so a run can be audited and reproduced exactly.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure,
//! 4 I/O failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dependence::{
    default_eta_levels, empirical_chi, empirical_chibar, empirical_pairs, eta_estimate,
    model_chi, verify_proposition1, DependenceCurve,
};
use crate::error::{Error, Result};
use crate::field::{MaternParams, SiteSet};
use crate::io::{simulate_dataset, write_truth, Dataset, TruthRecord};
use crate::likelihood::HierarchicalParams;
use crate::margins::{GpdMargin, GridSpec, ScaleModel};
use crate::mixtures::{replicate_rng, LinkFn, MixingLaw};
use crate::sampler::{run_chain, ChainArchive, FitFamily, SamplerConfig};
use crate::scoring::{
    batch_means_se, coverage_study, log_score, HoldoutPlan, ParamDraws,
};

#[derive(Debug, Parser)]
#[command(
    name = "scalemix",
    version,
    about = "Transformed Gaussian scale mixtures with nugget effects for spatial extremes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Simulate a dataset from a named design preset (with optional overrides).
    Simulate(SimulateArgs),
    /// Fit the hierarchical model by MCMC and archive the thinned chain.
    Fit(FitArgs),
    /// Tail-dependence diagnostics: empirical χ/χ̄/η curves, and a
    /// posterior model-based χ envelope when an archive is supplied.
    Diagnose(DiagnoseArgs),
    /// Held-out log scores: refit on a site subset per family, then score the
    /// held-out sites under each archived posterior snapshot.
    Score(ScoreArgs),
    /// Simulate-fit-check interval coverage over many datasets.
    Coverage(CoverageArgs),
    /// Numerically check that the nugget does not move the tail-dependence
    /// class: compare η with and without noise over a (δ, η_Z) grid.
    VerifyProp1(Prop1Args),
    /// Fit the δ = 1/2 transition design at several nugget variances and
    /// report chain mixing (ESS, batch-means SE) per case.
    TauStudy(TauStudyArgs),
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Named simulation designs. `hw-d03` / `hw-d07`: Pareto-scale model on the
/// unit square, D=200 sites, T=40 replicates, Matérn(ν=1.5, range 0.1),
/// τ²=9, δ=0.3 or 0.7. `hot`: Weibull-type scale with the identity link,
/// D=200, T=20, Matérn(ν=1.5, range 0.05), β=0.5, γ=1, τ²=0.04. All share
/// the observation margin: threshold 11, unit GPD scale, ξ=0, p=0.8.
pub fn preset(name: &str) -> Result<(HierarchicalParams, usize, usize)> {
    let gpd = GpdMargin {
        threshold: 11.0,
        scale: ScaleModel::Constant { sigma: 1.0 },
        shape: 0.0,
        censor_prob: 0.8,
    };
    let hw = |delta: f64| HierarchicalParams {
        law: MixingLaw::Hw { delta },
        link: LinkFn::Pareto,
        matern: MaternParams { range: 0.1, smoothness: 1.5 },
        tau2: 9.0,
        gpd,
    };
    match name {
        "hw-d03" => Ok((hw(0.3), 200, 40)),
        "hw-d07" => Ok((hw(0.7), 200, 40)),
        "hot" => Ok((
            HierarchicalParams {
                law: MixingLaw::Hot { beta: 0.5, gamma: 1.0 },
                link: LinkFn::Identity,
                matern: MaternParams { range: 0.05, smoothness: 1.5 },
                tau2: 0.04,
                gpd,
            },
            200,
            20,
        )),
        other => Err(Error::usage(format!(
            "unknown preset {other:?}; available: hw-d03, hw-d07, hot"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a C,
    config_hash: String,
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C) -> Result<()> {
    let json = serde_json::to_string(config)?;
    let digest = Sha256::digest(json.as_bytes());
    let config_hash: String = digest[..16].iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        config_hash,
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| Error::usage(format!("bad {what} value {tok:?}: {e}")))
        })
        .collect()
}

fn default_u_grid() -> Vec<f64> {
    (80..100).map(|k| k as f64 / 100.0).collect()
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Design preset: hw-d03, hw-d07, or hot.
    #[arg(long, default_value = "hw-d07")]
    pub preset: String,
    /// Override the number of sites.
    #[arg(long)]
    pub d: Option<usize>,
    /// Override the number of replicates.
    #[arg(long)]
    pub t: Option<usize>,
    /// Override the mixing parameter (δ for hw presets, β for hot).
    #[arg(long)]
    pub mixing: Option<f64>,
    /// Override the nugget variance.
    #[arg(long)]
    pub tau2: Option<f64>,
    /// Override the Matérn range.
    #[arg(long)]
    pub range: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let (mut params, d_default, t_default) = preset(&a.preset)?;
    if let Some(m) = a.mixing {
        params.law = match params.law {
            MixingLaw::Hw { .. } => MixingLaw::Hw { delta: m },
            MixingLaw::Hot { gamma, .. } => MixingLaw::Hot { beta: m, gamma },
            MixingLaw::InvGammaSq { b, .. } => MixingLaw::InvGammaSq { a: m, b },
        };
    }
    if let Some(t2) = a.tau2 {
        params.tau2 = t2;
    }
    if let Some(r) = a.range {
        params.matern.range = r;
    }
    params.law.validate()?;
    let d = a.d.unwrap_or(d_default);
    let t = a.t.unwrap_or(t_default);
    if d == 0 || t == 0 {
        return Err(Error::usage("d and t must be positive"));
    }
    let mut rng = replicate_rng(a.seed, 0);
    let sites = SiteSet::uniform_unit_square(d, &mut rng);
    let (data, _) = simulate_dataset(&params, &sites, t, a.seed, &GridSpec::default())?;
    std::fs::create_dir_all(&a.out)?;
    write_manifest(&a.out, "simulate", a.seed, a)?;
    data.write_csv(&a.out.join("data.csv"))?;
    sites.to_csv(&a.out.join("sites.csv"))?;
    write_truth(
        &a.out.join("truth.json"),
        &TruthRecord { params, seed: a.seed, replicates: t },
    )?;
    println!(
        "simulated {} replicates at {} sites (preset {}) into {}",
        t,
        d,
        a.preset,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Long-format observation CSV (t,site_id,y).
    #[arg(long)]
    pub data: PathBuf,
    /// Site coordinate CSV.
    #[arg(long)]
    pub sites: PathBuf,
    /// Output directory for the archive (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Full sampler configuration JSON; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mixing family to fit: hw, hot, or t-process.
    #[arg(long)]
    pub family: Option<String>,
    /// Censoring threshold on the observation scale.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for replicate-level parallelism (0 = library default).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Fit a linear trend surface for the GPD scale.
    #[arg(long)]
    pub trend_scale: bool,
    /// Sample the Matérn smoothness instead of fixing it.
    #[arg(long)]
    pub sample_nu: bool,
    /// Keep an X*/R snapshot every N thinned draws (0 = never).
    #[arg(long)]
    pub store_xstar_every: Option<usize>,
}

pub fn family_from_str(s: &str) -> Result<FitFamily> {
    match s {
        "hw" => Ok(FitFamily::Hw),
        "hot" => Ok(FitFamily::Hot),
        "t-process" | "t_process" => Ok(FitFamily::TProcess),
        other => Err(Error::usage(format!(
            "unknown family {other:?}; available: hw, hot, t-process"
        ))),
    }
}

fn resolve_fit_config(a: &FitArgs) -> Result<SamplerConfig> {
    let mut cfg: SamplerConfig = match &a.config {
        Some(path) => serde_json::from_reader(std::fs::File::open(path)?)?,
        None => SamplerConfig::default(),
    };
    if let Some(f) = &a.family {
        cfg.family = family_from_str(f)?;
        if cfg.family == FitFamily::TProcess {
            cfg.link = LinkFn::Identity;
        }
    }
    if let Some(v) = a.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.burn_in {
        cfg.burn_in = v;
    }
    if let Some(v) = a.thin {
        cfg.thin = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    if a.trend_scale {
        cfg.trend_scale = true;
    }
    if a.sample_nu {
        cfg.sample_nu = true;
    }
    if let Some(v) = a.store_xstar_every {
        cfg.store_xstar_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let cfg = resolve_fit_config(a)?;
    let data = Dataset::read_csv(&a.data, &a.sites)?;
    let archive = run_chain(&data, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    write_manifest(&a.out, "fit", cfg.seed, &cfg)?;
    // The resolved configuration travels with the archive so downstream
    // commands (diagnose, score) can rebuild the parameter template.
    serde_json::to_writer_pretty(std::fs::File::create(a.out.join("config.json"))?, &cfg)?;
    archive.save(&a.out)?;
    println!("chain: {} thinned draws in {:.1}s", archive.len(), archive.wall_secs);
    for (name, rate) in &archive.accept_rates {
        println!("  accept[{name}] = {rate:.3}");
    }
    for name in ["delta", "beta", "df_a", "tau2", "range", "sigma", "xi"] {
        if let Some(m) = archive.mean(name) {
            println!("  posterior mean {name} = {m:.4}");
        }
    }
    for w in &archive.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Rebuild the parameter template implied by a fit configuration: the law
/// variant, link, margin structure, and fixed smoothness must match the trace
/// names in the archive; all sampled values are overwritten per draw.
pub fn template_from_config(cfg: &SamplerConfig) -> HierarchicalParams {
    let law = match cfg.family {
        FitFamily::Hw => MixingLaw::Hw { delta: 0.5 },
        FitFamily::Hot => MixingLaw::Hot { beta: 1.0, gamma: 1.0 },
        FitFamily::TProcess => MixingLaw::InvGammaSq { a: 5.0, b: 5.0 },
    };
    let scale = if cfg.trend_scale {
        ScaleModel::Trend { b0: 1.0, b1: 0.0, b2: 0.0 }
    } else {
        ScaleModel::Constant { sigma: 1.0 }
    };
    HierarchicalParams {
        law,
        link: cfg.link,
        matern: MaternParams { range: 0.2, smoothness: cfg.fixed_smoothness },
        tau2: 1.0,
        gpd: GpdMargin {
            threshold: cfg.threshold,
            scale,
            shape: 0.0,
            censor_prob: cfg.censor_prob,
        },
    }
}

fn load_fit(dir: &Path) -> Result<(ChainArchive, SamplerConfig)> {
    let cfg: SamplerConfig = serde_json::from_reader(std::fs::File::open(dir.join("config.json"))?)?;
    let archive = ChainArchive::load(dir)?;
    Ok((archive, cfg))
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sites: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Archive directory from a previous `fit`; enables the model-based
    /// posterior χ envelope.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Separation distance for the curves (default: median pair distance).
    #[arg(long)]
    pub h: Option<f64>,
    /// Pair-matching tolerance (default: 5% of the domain diameter).
    #[arg(long)]
    pub eps: Option<f64>,
    /// Comma-separated exceedance levels (default 0.80..0.99).
    #[arg(long)]
    pub u_grid: Option<String>,
    /// Posterior draws used for the model envelope.
    #[arg(long, default_value_t = 50)]
    pub envelope_draws: usize,
    /// Pairs simulated per posterior draw for the model envelope.
    #[arg(long, default_value_t = 200_000)]
    pub n_sim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn median_pair_distance(sites: &SiteSet) -> f64 {
    let d = sites.len();
    let mut ds = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            ds.push(sites.distance(i, j));
        }
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ds[ds.len() / 2]
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let u_grid = match &a.u_grid {
        Some(s) => parse_list(s, "u_grid")?,
        None => default_u_grid(),
    };
    let data = Dataset::read_csv(&a.data, &a.sites)?;
    let h = a.h.unwrap_or_else(|| median_pair_distance(&data.sites));
    let reports = a.out.join("reports");
    std::fs::create_dir_all(&reports)?;
    write_manifest(&a.out, "diagnose", a.seed, a)?;

    let chi = empirical_chi(&data.y, &data.sites, h, a.eps, &u_grid)?;
    chi.write_csv(&reports.join("chi_empirical.csv"))?;
    let chibar = empirical_chibar(&data.y, &data.sites, h, a.eps, &u_grid)?;
    chibar.write_csv(&reports.join("chibar_empirical.csv"))?;
    for w in chi.warnings.iter().chain(&chibar.warnings) {
        eprintln!("warning: {w}");
    }

    let pairs = empirical_pairs(&data.y, &data.sites, h, a.eps)?;
    // Keep only levels deep enough to still expect ~20 marginal exceedances;
    // the full ladder reaches depths observational data cannot support.
    let cap = 1.0 - 20.0 / pairs.len() as f64;
    let levels: Vec<f64> = default_eta_levels().into_iter().filter(|&u| u <= cap).collect();
    if levels.len() >= 2 {
        match eta_estimate(&pairs, &levels) {
            Ok(eta) => {
                let mut w = csv::Writer::from_path(reports.join("eta.csv"))?;
                w.write_record(["h", "eta", "se", "levels_used"])?;
                w.write_record([
                    format!("{h:.6}"),
                    format!("{:.6}", eta.eta),
                    format!("{:.6}", eta.se),
                    eta.levels_used.len().to_string(),
                ])?;
                w.flush()?;
                println!("h = {h:.4}: empirical eta = {:.3} (se {:.3})", eta.eta, eta.se);
            }
            Err(e) => eprintln!("warning: eta estimate unavailable: {e}"),
        }
    } else {
        eprintln!("warning: too few pairs ({}) for an eta estimate", pairs.len());
    }

    if let Some(dir) = &a.archive {
        let (archive, cfg) = load_fit(dir)?;
        let template = template_from_config(&cfg);
        let n = archive.len();
        if n == 0 {
            return Err(Error::usage("archive holds no draws"));
        }
        let draws = a.envelope_draws.min(n).max(1);
        let mut curves: Vec<DependenceCurve> = Vec::with_capacity(draws);
        for k in 0..draws {
            let row = k * (n - 1) / draws.max(1);
            let params = archive.params_at(row, &template)?;
            curves.push(model_chi(&params, h, &u_grid, a.n_sim, a.seed.wrapping_add(k as u64))?);
        }
        let envelope = crate::dependence::aggregate_curves(&curves)?;
        envelope.write_csv(&reports.join("chi_model_envelope.csv"))?;
        println!("model envelope over {draws} posterior draws written");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sites: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of randomly held-out sites.
    #[arg(long, default_value_t = 5)]
    pub holdout: usize,
    /// Families to fit and compare, comma separated (hw, hot, t-process).
    #[arg(long, default_value = "hw")]
    pub families: String,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 4000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 2000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 5)]
    pub thin: usize,
    /// Keep an X*/R snapshot every N thinned draws.
    #[arg(long, default_value_t = 20)]
    pub store_xstar_every: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let data = Dataset::read_csv(&a.data, &a.sites)?;
    let plan = HoldoutPlan::random(data.n_sites(), a.holdout, a.seed)?;
    let fitted = data.subset(&plan.fitted)?;
    let families: Vec<FitFamily> = a
        .families
        .split(',')
        .map(|s| family_from_str(s.trim()))
        .collect::<Result<_>>()?;
    if families.is_empty() {
        return Err(Error::usage("need at least one family"));
    }
    let reports = a.out.join("reports");
    std::fs::create_dir_all(&reports)?;
    write_manifest(&a.out, "score", a.seed, a)?;

    let mut w = csv::Writer::from_path(reports.join("log_scores.csv"))?;
    w.write_record(["family", "snapshot", "log_score"])?;
    let mut summary = Vec::new();
    for family in &families {
        let mut cfg = SamplerConfig {
            family: *family,
            iterations: a.iterations,
            burn_in: a.burn_in,
            thin: a.thin,
            seed: a.seed,
            store_xstar_every: a.store_xstar_every,
            workers: a.workers.unwrap_or(0),
            ..SamplerConfig::default()
        };
        if *family == FitFamily::TProcess {
            cfg.link = LinkFn::Identity;
        }
        if let Some(th) = a.threshold {
            cfg.threshold = th;
        } else {
            // Default the threshold to the pooled censor-probability quantile.
            let mut pool: Vec<f64> = data.y.iter().flatten().copied().collect();
            pool.sort_by(|x, y| x.partial_cmp(y).unwrap());
            cfg.threshold = pool[((cfg.censor_prob * pool.len() as f64) as usize).min(pool.len() - 1)];
        }
        cfg.validate()?;
        let archive = run_chain(&fitted, &cfg)?;
        let template = template_from_config(&cfg);
        let scores = log_score(&archive, &data, &plan, &template, &cfg.grid, a.seed)?;
        let name = format!("{:?}", family).to_lowercase();
        for (k, s) in scores.iter().enumerate() {
            w.write_record([name.clone(), k.to_string(), format!("{s:.6}")])?;
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("family {name}: mean held-out log score {mean:.3} over {} snapshots", scores.len());
        summary.push((name, mean));
    }
    w.flush()?;
    if summary.len() > 1 {
        let best = summary
            .iter()
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        println!("best family by mean log score: {}", best.0);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// coverage
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[arg(long, default_value_t = 25)]
    pub datasets: usize,
    #[arg(long, default_value_t = 50)]
    pub d: usize,
    #[arg(long, default_value_t = 10)]
    pub t: usize,
    /// True mixing parameter δ of the generating Pareto-scale model.
    #[arg(long, default_value_t = 0.7)]
    pub delta: f64,
    #[arg(long, default_value_t = 9.0)]
    pub tau2: f64,
    #[arg(long, default_value_t = 0.1)]
    pub range: f64,
    #[arg(long, default_value_t = 50_000)]
    pub iterations: usize,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    /// Comma-separated HPD levels.
    #[arg(long, default_value = "0.8,0.9,0.95")]
    pub levels: String,
    /// Sample the Matérn smoothness so its coverage is monitored too.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub sample_nu: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// One simulate-fit cycle of the coverage study, shared with the acceptance
/// harness: returns posterior draws and truths for the monitored parameters.
pub fn coverage_run(a: &CoverageArgs, i: usize) -> Result<Vec<ParamDraws>> {
    let (mut truth, _, _) = preset("hw-d07")?;
    truth.law = MixingLaw::Hw { delta: a.delta };
    truth.tau2 = a.tau2;
    truth.matern.range = a.range;
    let seed = a.seed.wrapping_add(1000 * i as u64);
    let mut rng = replicate_rng(seed, 0);
    let sites = SiteSet::uniform_unit_square(a.d, &mut rng);
    let (data, _) = simulate_dataset(&truth, &sites, a.t, seed, &GridSpec::default())?;
    let cfg = SamplerConfig {
        iterations: a.iterations,
        burn_in: a.burn_in.unwrap_or(a.iterations / 2),
        thin: a.thin,
        seed,
        sample_nu: a.sample_nu,
        threshold: truth.gpd.threshold,
        workers: a.workers.unwrap_or(0),
        ..SamplerConfig::default()
    };
    cfg.validate()?;
    let archive = run_chain(&data, &cfg)?;
    let truths: Vec<(&str, f64)> = vec![
        ("delta", a.delta),
        ("range", a.range),
        ("smoothness", truth.matern.smoothness),
        ("tau2", a.tau2),
        ("sigma", 1.0),
        ("xi", 0.0),
    ];
    let mut out = Vec::new();
    for (name, tv) in truths {
        if let Some(trace) = archive.trace(name) {
            out.push(ParamDraws {
                name: name.to_string(),
                truth: tv,
                samples: trace.to_vec(),
            });
        }
    }
    Ok(out)
}

fn cmd_coverage(a: &CoverageArgs) -> Result<()> {
    let levels = parse_list(&a.levels, "levels")?;
    let reports = a.out.join("reports");
    std::fs::create_dir_all(&reports)?;
    write_manifest(&a.out, "coverage", a.seed, a)?;
    let report = coverage_study(a.datasets, &levels, |i| {
        let r = coverage_run(a, i);
        match &r {
            Ok(_) => println!("dataset {i}: done"),
            Err(e) => eprintln!("dataset {i}: failed: {e}"),
        }
        r
    })?;
    report.write_csv(&reports.join("coverage.csv"))?;
    for row in &report.rows {
        println!(
            "{:<12} level {:.2}: coverage {:.3} (95% CI [{:.3}, {:.3}])",
            row.param, row.level, row.coverage, row.lo, row.hi
        );
    }
    if report.n_failed > 0 {
        eprintln!("{} of {} datasets failed and were excluded", report.n_failed, a.datasets);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-prop1
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct Prop1Args {
    /// Comma-separated δ grid.
    #[arg(long, default_value = "0.2,0.3,0.4,0.45,0.5,0.55,0.6,0.65,0.7")]
    pub deltas: String,
    /// Comma-separated η_Z grid.
    #[arg(long, default_value = "0.3,0.5,0.9")]
    pub eta_zs: String,
    /// Simulated pairs per cell and noise setting.
    #[arg(long, default_value_t = 5_000_000)]
    pub n_sim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_verify_prop1(a: &Prop1Args) -> Result<()> {
    let deltas = parse_list(&a.deltas, "deltas")?;
    let eta_zs = parse_list(&a.eta_zs, "eta_zs")?;
    let reports = a.out.join("reports");
    std::fs::create_dir_all(&reports)?;
    write_manifest(&a.out, "verify-prop1", a.seed, a)?;
    let report = verify_proposition1(&deltas, &eta_zs, a.n_sim, a.seed)?;
    report.write_csv(&reports.join("prop1.csv"))?;
    for c in &report.cells {
        println!(
            "delta {:.2} eta_z {:.2}: eta {:.3} (smooth) vs {:.3} (noisy){}",
            c.delta,
            c.eta_z,
            c.eta_smooth,
            c.eta_noisy,
            if c.flagged { "  <-- FLAGGED" } else { "" }
        );
    }
    println!("{} of {} cells flagged", report.n_flagged(), report.cells.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// tau-study
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Serialize)]
pub struct TauStudyArgs {
    /// Comma-separated nugget variances to fit at the δ = 1/2 transition.
    #[arg(long, default_value = "9,3,0.5,0.0025")]
    pub tau2s: String,
    #[arg(long, default_value_t = 50)]
    pub d: usize,
    #[arg(long, default_value_t = 10)]
    pub t: usize,
    #[arg(long, default_value_t = 10_000)]
    pub iterations: usize,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct TauStudyRow {
    pub tau2: f64,
    pub ess_delta: f64,
    pub se_delta: f64,
    pub ess_tau2: f64,
    pub se_tau2: f64,
    pub wall_secs: f64,
    pub ess_delta_per_sec: f64,
}

/// Run the τ² sensitivity harness: simulate the δ = 1/2 design at each nugget
/// variance, fit it, and report mixing diagnostics for the δ and τ² traces.
pub fn tau_study(a: &TauStudyArgs) -> Result<Vec<TauStudyRow>> {
    let tau2s = parse_list(&a.tau2s, "tau2s")?;
    let mut rows = Vec::with_capacity(tau2s.len());
    for (k, &tau2) in tau2s.iter().enumerate() {
        let (mut truth, _, _) = preset("hw-d07")?;
        truth.law = MixingLaw::Hw { delta: 0.5 };
        truth.tau2 = tau2;
        let seed = a.seed.wrapping_add(77 * k as u64);
        let mut rng = replicate_rng(seed, 0);
        let sites = SiteSet::uniform_unit_square(a.d, &mut rng);
        let (data, _) = simulate_dataset(&truth, &sites, a.t, seed, &GridSpec::default())?;
        let cfg = SamplerConfig {
            iterations: a.iterations,
            burn_in: a.burn_in.unwrap_or(a.iterations / 2),
            thin: a.thin,
            seed,
            threshold: truth.gpd.threshold,
            workers: a.workers.unwrap_or(0),
            ..SamplerConfig::default()
        };
        cfg.validate()?;
        let archive = run_chain(&data, &cfg)?;
        let delta = archive.trace("delta").ok_or_else(|| Error::numerical("missing delta trace"))?;
        let t2 = archive.trace("tau2").ok_or_else(|| Error::numerical("missing tau2 trace"))?;
        let bm_d = batch_means_se(delta, None)?;
        let bm_t = batch_means_se(t2, None)?;
        rows.push(TauStudyRow {
            tau2,
            ess_delta: bm_d.ess,
            se_delta: bm_d.se,
            ess_tau2: bm_t.ess,
            se_tau2: bm_t.se,
            wall_secs: archive.wall_secs,
            ess_delta_per_sec: bm_d.ess_per_sec(archive.wall_secs),
        });
    }
    Ok(rows)
}

fn cmd_tau_study(a: &TauStudyArgs) -> Result<()> {
    let reports = a.out.join("reports");
    std::fs::create_dir_all(&reports)?;
    write_manifest(&a.out, "tau-study", a.seed, a)?;
    let rows = tau_study(a)?;
    let mut w = csv::Writer::from_path(reports.join("tau_study.csv"))?;
    w.write_record([
        "tau2", "ess_delta", "se_delta", "ess_tau2", "se_tau2", "wall_secs", "ess_delta_per_sec",
    ])?;
    for r in &rows {
        w.write_record([
            format!("{}", r.tau2),
            format!("{:.2}", r.ess_delta),
            format!("{:.6}", r.se_delta),
            format!("{:.2}", r.ess_tau2),
            format!("{:.6}", r.se_tau2),
            format!("{:.2}", r.wall_secs),
            format!("{:.4}", r.ess_delta_per_sec),
        ])?;
        println!(
            "tau2 {:>7}: ESS(delta) {:.1}, ESS(tau2) {:.1}, SE(delta) {:.4}",
            r.tau2, r.ess_delta, r.ess_tau2, r.se_delta
        );
    }
    w.flush()?;
    if let Some(min) = rows
        .iter()
        .min_by(|x, y| x.ess_tau2.partial_cmp(&y.ess_tau2).unwrap())
    {
        println!("lowest tau2 ESS at tau2 = {}", min.tau2);
        if rows.iter().all(|r| r.tau2 >= min.tau2) {
            println!("note: mixing degrades as the nugget variance shrinks");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

/// Dispatch a parsed command.
pub fn dispatch(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Diagnose(a) => cmd_diagnose(a),
        Cmd::Score(a) => cmd_score(a),
        Cmd::Coverage(a) => cmd_coverage(a),
        Cmd::VerifyProp1(a) => cmd_verify_prop1(a),
        Cmd::TauStudy(a) => cmd_tau_study(a),
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests print and exit 0; real errors exit 2.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_truth;
    use tempfile::tempdir;

    fn run_ok(args: &[&str]) {
        let code = run(std::iter::once("scalemix").chain(args.iter().copied()));
        assert_eq!(code, 0, "command failed: {args:?}");
    }

    #[test]
    fn unknown_flag_and_bad_preset_exit_2() {
        assert_eq!(run(["scalemix", "simulate", "--no-such-flag"]), 2);
        let dir = tempdir().unwrap();
        let out = dir.path().join("x");
        assert_eq!(
            run([
                "scalemix",
                "simulate",
                "--preset",
                "nope",
                "--out",
                out.to_str().unwrap()
            ]),
            2
        );
        // Invalid config fails before any file is written.
        assert!(!out.exists());
    }

    #[test]
    fn simulate_is_deterministic_and_writes_manifest() {
        let dir = tempdir().unwrap();
        let (o1, o2, o3) = (
            dir.path().join("a"),
            dir.path().join("b"),
            dir.path().join("c"),
        );
        for o in [&o1, &o2] {
            run_ok(&[
                "simulate", "--preset", "hw-d07", "--d", "8", "--t", "4", "--seed", "9", "--out",
                o.to_str().unwrap(),
            ]);
        }
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&o1.join("data.csv")), read(&o2.join("data.csv")));
        assert_eq!(read(&o1.join("sites.csv")), read(&o2.join("sites.csv")));
        let manifest: serde_json::Value =
            serde_json::from_slice(&read(&o1.join("manifest.json"))).unwrap();
        assert_eq!(manifest["command"], "simulate");
        assert_eq!(manifest["seed"], 9);
        assert!(manifest["config_hash"].as_str().unwrap().len() == 32);
        // A different seed changes the data.
        run_ok(&[
            "simulate", "--preset", "hw-d07", "--d", "8", "--t", "4", "--seed", "10", "--out",
            o3.to_str().unwrap(),
        ]);
        assert_ne!(read(&o1.join("data.csv")), read(&o3.join("data.csv")));
        let truth = read_truth(&o1.join("truth.json")).unwrap();
        assert_eq!(truth.replicates, 4);
        match truth.params.law {
            MixingLaw::Hw { delta } => assert!((delta - 0.7).abs() < 1e-12),
            _ => panic!("wrong preset law"),
        }
    }

    #[test]
    fn preset_shapes_match_design() {
        let (p, d, t) = preset("hw-d07").unwrap();
        assert_eq!((d, t), (200, 40));
        assert_eq!(p.tau2, 9.0);
        let (p, d, t) = preset("hot").unwrap();
        assert_eq!((d, t), (200, 20));
        assert_eq!(p.link, LinkFn::Identity);
        assert_eq!(p.tau2, 0.04);
    }

    #[test]
    fn fit_then_diagnose_and_tiny_pipeline() {
        let dir = tempdir().unwrap();
        let sim = dir.path().join("sim");
        run_ok(&[
            "simulate", "--preset", "hw-d07", "--d", "10", "--t", "8", "--seed", "3", "--out",
            sim.to_str().unwrap(),
        ]);
        let fit = dir.path().join("fit");
        run_ok(&[
            "fit",
            "--data",
            sim.join("data.csv").to_str().unwrap(),
            "--sites",
            sim.join("sites.csv").to_str().unwrap(),
            "--threshold",
            "11",
            "--iterations",
            "400",
            "--burn-in",
            "200",
            "--thin",
            "4",
            "--seed",
            "2",
            "--out",
            fit.to_str().unwrap(),
        ]);
        let (archive, cfg) = load_fit(&fit).unwrap();
        assert_eq!(archive.len(), 100);
        assert_eq!(cfg.iterations, 400);
        // Same seed reproduces the archive exactly.
        let fit2 = dir.path().join("fit2");
        run_ok(&[
            "fit",
            "--data",
            sim.join("data.csv").to_str().unwrap(),
            "--sites",
            sim.join("sites.csv").to_str().unwrap(),
            "--threshold",
            "11",
            "--iterations",
            "400",
            "--burn-in",
            "200",
            "--thin",
            "4",
            "--seed",
            "2",
            "--out",
            fit2.to_str().unwrap(),
        ]);
        let (archive2, _) = load_fit(&fit2).unwrap();
        assert_eq!(archive.trace("delta").unwrap(), archive2.trace("delta").unwrap());

        let diag = dir.path().join("diag");
        run_ok(&[
            "diagnose",
            "--data",
            sim.join("data.csv").to_str().unwrap(),
            "--sites",
            sim.join("sites.csv").to_str().unwrap(),
            "--archive",
            fit.to_str().unwrap(),
            "--envelope-draws",
            "4",
            "--n-sim",
            "20000",
            "--out",
            diag.to_str().unwrap(),
        ]);
        // eta.csv is best-effort and needs more pairs than this tiny run has.
        for f in ["chi_empirical.csv", "chibar_empirical.csv", "chi_model_envelope.csv"] {
            assert!(diag.join("reports").join(f).exists(), "{f} missing");
        }
    }

    #[test]
    fn verify_prop1_smoke_writes_report() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("p1");
        run_ok(&[
            "verify-prop1",
            "--deltas",
            "0.7",
            "--eta-zs",
            "0.5",
            "--n-sim",
            "200000",
            "--out",
            out.to_str().unwrap(),
        ]);
        let body = std::fs::read_to_string(out.join("reports/prop1.csv")).unwrap();
        assert!(body.lines().count() == 2);
        assert!(body.starts_with("delta,eta_z,"));
    }
}
