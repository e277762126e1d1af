//! Held-out validation: fit two competing mixing families on a site subset
//! and compare their log scores on the held-out sites.

use scalemix::field::{MaternParams, SiteSet};
use scalemix::io::simulate_dataset;
use scalemix::likelihood::HierarchicalParams;
use scalemix::margins::{GpdMargin, GridSpec, ScaleModel};
use scalemix::mixtures::{replicate_rng, LinkFn, MixingLaw};
use scalemix::sampler::{run_chain, FitFamily, SamplerConfig};
use scalemix::scoring::{log_score, HoldoutPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Generate from the Pareto-scale model; the t-process is the competitor.
    let truth = HierarchicalParams {
        law: MixingLaw::Hw { delta: 0.6 },
        link: LinkFn::Pareto,
        matern: MaternParams { range: 0.15, smoothness: 1.5 },
        tau2: 1.0,
        gpd: GpdMargin {
            threshold: 11.0,
            scale: ScaleModel::Constant { sigma: 1.0 },
            shape: 0.0,
            censor_prob: 0.8,
        },
    };
    let mut rng = replicate_rng(23, 0);
    let sites = SiteSet::uniform_unit_square(10, &mut rng);
    let (data, _) = simulate_dataset(&truth, &sites, 12, 23, &GridSpec::default())?;

    let plan = HoldoutPlan::random(data.n_sites(), 3, 5)?;
    let fitted = data.subset(&plan.fitted)?;
    println!("fitting {} sites, scoring {} held-out sites", plan.fitted.len(), plan.holdout.len());

    for family in [FitFamily::Hw, FitFamily::TProcess] {
        let cfg = SamplerConfig {
            family,
            link: if family == FitFamily::TProcess { LinkFn::Identity } else { LinkFn::Pareto },
            threshold: 11.0,
            iterations: 1500,
            burn_in: 750,
            thin: 5,
            seed: 4,
            store_xstar_every: 10,
            ..SamplerConfig::default()
        };
        let archive = run_chain(&fitted, &cfg)?;
        let template = scalemix::cli::template_from_config(&cfg);
        let scores = log_score(&archive, &data, &plan, &template, &cfg.grid, 9)?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("{family:?}: mean held-out log score {mean:.3} over {} snapshots", scores.len());
    }
    Ok(())
}
