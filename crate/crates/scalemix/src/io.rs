//! Dataset containers and their disk formats: long-format observation CSV,
//! site CSV, and a JSON sidecar recording the generating parameters of
//! simulated data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{build_cov, SiteSet};
use crate::likelihood::HierarchicalParams;
use crate::margins::{transform_t_inverse, GridSpec, NoisyMarginal, SmoothMarginal};
use crate::mixtures::{add_nugget, simulate_smooth, LatentState};

/// Observations on a fixed station set: `y[t][i]` is replicate t at site i.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sites: SiteSet,
    pub y: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(sites: SiteSet, y: Vec<Vec<f64>>) -> Result<Self> {
        let d = sites.len();
        for (t, row) in y.iter().enumerate() {
            if row.len() != d {
                return Err(Error::usage(format!(
                    "replicate {t} has {} values for {d} sites",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::usage(format!("replicate {t} contains non-finite values")));
            }
        }
        Ok(Self { sites, y })
    }

    pub fn replicates(&self) -> usize {
        self.y.len()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Time series observed at one site.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.y.iter().map(|row| row[i]).collect()
    }

    /// Restriction to a subset of sites, preserving the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let d = self.n_sites();
        if idx.iter().any(|&i| i >= d) {
            return Err(Error::usage("subset index out of range"));
        }
        let coords: Vec<[f64; 2]> = idx.iter().map(|&i| self.sites.coords[i]).collect();
        let y = self
            .y
            .iter()
            .map(|row| idx.iter().map(|&i| row[i]).collect())
            .collect();
        Dataset::new(SiteSet::from_coords(coords), y)
    }

    /// Long format with header `t,site_id,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "site_id", "y"])?;
        for (t, row) in self.y.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                w.write_record([t.to_string(), i.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read observations (long format `t,site_id,y`) plus the site CSV.
    pub fn read_csv(data_path: &Path, sites_path: &Path) -> Result<Self> {
        let sites = SiteSet::from_csv(sites_path)?;
        let d = sites.len();
        let mut reader = csv::Reader::from_path(data_path)?;
        let headers = reader.headers()?.clone();
        for (k, name) in ["t", "site_id", "y"].iter().enumerate() {
            if headers.get(k).map(|h| h.trim()) != Some(*name) {
                return Err(Error::usage(format!(
                    "data CSV must have header t,site_id,y; got {headers:?}"
                )));
            }
        }
        let mut cells: Vec<(usize, usize, f64)> = Vec::new();
        let mut t_max = 0usize;
        for record in reader.records() {
            let record = record?;
            let parse = |k: usize, what: &str| -> Result<f64> {
                record
                    .get(k)
                    .ok_or_else(|| Error::usage(format!("missing {what} column")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::usage(format!("bad {what} value: {e}")))
            };
            let t = parse(0, "t")? as usize;
            let i = parse(1, "site_id")? as usize;
            if i >= d {
                return Err(Error::usage(format!("site_id {i} exceeds site count {d}")));
            }
            let v = parse(2, "y")?;
            t_max = t_max.max(t + 1);
            cells.push((t, i, v));
        }
        let mut y = vec![vec![f64::NAN; d]; t_max];
        for (t, i, v) in cells {
            y[t][i] = v;
        }
        if y.iter().any(|row| row.iter().any(|v| v.is_nan())) {
            return Err(Error::usage("data CSV does not cover every (t, site) cell"));
        }
        Dataset::new(sites, y)
    }
}

/// Generating parameters of a simulated dataset, written alongside the data so
/// coverage and recovery studies can compare fits against the truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub params: HierarchicalParams,
    pub seed: u64,
    pub replicates: usize,
}

pub fn write_truth(path: &Path, truth: &TruthRecord) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, truth)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<TruthRecord> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(f)?)
}

/// Simulate a full dataset from the hierarchical model: latent smooth field,
/// nugget, then the marginal transformation onto the observation scale.
/// Returns the data and the latent state that generated it.
pub fn simulate_dataset(
    params: &HierarchicalParams,
    sites: &SiteSet,
    replicates: usize,
    seed: u64,
    grid: &GridSpec,
) -> Result<(Dataset, LatentState)> {
    params.gpd.validate_at(&sites.coords)?;
    let cov = build_cov(sites, &params.matern)?;
    let latent = simulate_smooth(&cov, &params.law, params.link, replicates, seed)?;
    let x = add_nugget(&latent, params.tau2, seed)?;
    let smooth = SmoothMarginal::new(params.law, params.link)?;
    let table = NoisyMarginal::new(smooth, params.tau2)?.build_table(grid)?;
    let mut y = Vec::with_capacity(replicates);
    for row in &x {
        let mut out = Vec::with_capacity(row.len());
        for (i, &v) in row.iter().enumerate() {
            out.push(transform_t_inverse(&params.gpd, sites.coords[i], &table, v)?);
        }
        y.push(out);
    }
    Ok((Dataset::new(sites.clone(), y)?, latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MaternParams;
    use crate::margins::{GpdMargin, ScaleModel};
    use crate::mixtures::{replicate_rng, LinkFn, MixingLaw};

    fn toy_params() -> HierarchicalParams {
        HierarchicalParams {
            law: MixingLaw::Hw { delta: 0.6 },
            link: LinkFn::Pareto,
            matern: MaternParams { range: 0.3, smoothness: 1.5 },
            tau2: 1.0,
            gpd: GpdMargin {
                threshold: 11.0,
                scale: ScaleModel::Constant { sigma: 1.0 },
                shape: 0.0,
                censor_prob: 0.8,
            },
        }
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let mut rng = replicate_rng(5, 0);
        let sites = SiteSet::uniform_unit_square(4, &mut rng);
        let y = vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 11.25, 2.0]];
        let data = Dataset::new(sites, y).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let dp = dir.path().join("data.csv");
        let sp = dir.path().join("sites.csv");
        data.write_csv(&dp).unwrap();
        data.sites.to_csv(&sp).unwrap();
        let back = Dataset::read_csv(&dp, &sp).unwrap();
        assert_eq!(back.replicates(), 2);
        for t in 0..2 {
            for i in 0..4 {
                assert_eq!(back.y[t][i], data.y[t][i]);
                assert!((back.sites.coords[i][0] - data.sites.coords[i][0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ragged_or_nonfinite_rejected() {
        let sites = SiteSet::from_coords(vec![[0.0, 0.0], [1.0, 0.0]]);
        assert!(Dataset::new(sites.clone(), vec![vec![1.0]]).is_err());
        assert!(Dataset::new(sites, vec![vec![1.0, f64::NAN]]).is_err());
    }

    #[test]
    fn simulated_dataset_exceedance_rate_matches_censor_prob() {
        let params = toy_params();
        let mut rng = replicate_rng(9, 0);
        let sites = SiteSet::uniform_unit_square(12, &mut rng);
        let (data, latent) =
            simulate_dataset(&params, &sites, 400, 42, &GridSpec::default()).unwrap();
        assert_eq!(latent.replicates(), 400);
        let total = 400 * 12;
        let exceed = data
            .y
            .iter()
            .flatten()
            .filter(|&&v| v > params.gpd.threshold)
            .count();
        let rate = exceed as f64 / total as f64;
        // Marginal exceedance probability is 1 - p = 0.2. The field is
        // spatially and temporally dependent only through D=12 shared draws,
        // so allow a generous band.
        assert!((rate - 0.2).abs() < 0.05, "exceedance rate {rate}");
        // Censored cells sit exactly at the threshold by construction.
        assert!(data
            .y
            .iter()
            .flatten()
            .all(|&v| v >= params.gpd.threshold - 1e-12));
    }

    #[test]
    fn truth_sidecar_roundtrip() {
        let truth = TruthRecord { params: toy_params(), seed: 7, replicates: 20 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        write_truth(&path, &truth).unwrap();
        let back = read_truth(&path).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.replicates, 20);
        assert_eq!(back.params.tau2, truth.params.tau2);
        match back.params.law {
            MixingLaw::Hw { delta } => assert_eq!(delta, 0.6),
            _ => panic!("law mismatch"),
        }
    }
}
