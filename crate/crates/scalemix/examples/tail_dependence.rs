//! Tail-dependence estimators against their closed forms: χ for the
//! Weibull-type scale at β = 0 (a Student-t expression) and the η regimes of
//! the Pareto-scale model.

use scalemix::dependence::{
    default_eta_levels, eta_estimate, hot_chi_limit, simulate_model_pairs,
};
use scalemix::mixtures::{LinkFn, MixingLaw};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Asymptotically dependent case: Pareto scale at beta = 0 has
    // chi = 2(1 - T_{gamma+1}(sqrt((gamma+1)(1-rho)/(1+rho)))).
    let rho = 0.5;
    let pairs = simulate_model_pairs(
        &MixingLaw::Hot { beta: 0.0, gamma: 1.0 },
        LinkFn::Identity,
        rho,
        0.0,
        2_000_000,
        1,
    )?;
    let u = 0.999;
    let n = pairs.len() as f64;
    let ranks: Vec<f64> = {
        let mut xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vec![xs[(u * n) as usize], {
            let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ys[(u * n) as usize]
        }]
    };
    let joint = pairs.iter().filter(|p| p.0 > ranks[0] && p.1 > ranks[1]).count() as f64;
    let denom = pairs.iter().filter(|p| p.1 > ranks[1]).count() as f64;
    println!(
        "Weibull-type scale, beta=0, rho={rho}: chi({u}) = {:.4}, closed form limit {:.4}",
        joint / denom,
        hot_chi_limit(1.0, rho)?
    );

    // eta regimes for the Pareto-scale model.
    for (delta, expect) in [(0.7, "1 (asymptotic dependence)"), (0.4, "eta_Z = (1+rho)/2")] {
        let pairs = simulate_model_pairs(
            &MixingLaw::Hw { delta },
            LinkFn::Pareto,
            0.5,
            0.0,
            2_000_000,
            2,
        )?;
        let est = eta_estimate(&pairs, &default_eta_levels())?;
        println!("Pareto scale, delta={delta}: eta = {:.3} +- {:.3}  (theory: {expect})", est.eta, est.se);
    }
    Ok(())
}
