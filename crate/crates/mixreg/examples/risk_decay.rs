//! Risk decay of the selected estimator over a sample-size ladder
//! (scaled-down: a short ladder and few seeds, so it runs in minutes).
//!
//! The parametric example decays like 1/n; the misspecified one is slower
//! because the selected models grow with n.

use mixreg::experiment::{
    log_log_slope, run_seed_pipeline, truth_density, ExampleModel, ExperimentConfig, TruthSource,
};
use mixreg::seeding::derive_seed;
use mixreg::selection::KappaMode;

fn main() -> mixreg::Result<()> {
    let seeds: Vec<u64> = (0..3).collect();
    let ladder = [500usize, 1000, 2000];
    for example in [ExampleModel::P, ExampleModel::NP] {
        let cfg = ExperimentConfig::new(TruthSource::Example(example), 2000, "unused");
        let truth = truth_density(example);
        let template = cfg.template();
        let ks: Vec<usize> = (1..=6).collect();
        let mut points = Vec::new();
        println!("example {example:?}");
        for &n in &ladder {
            let mut kls = Vec::new();
            for &seed in &seeds {
                let (o, _) = run_seed_pipeline(
                    &truth,
                    n,
                    &ks,
                    &template,
                    &cfg.selection,
                    &KappaMode::Fixed(1.0),
                    500,
                    derive_seed(seed, n as u64),
                )?;
                kls.push(o.kl_selected);
            }
            let mean = kls.iter().sum::<f64>() / kls.len() as f64;
            println!("  n = {n:5}: mean KL {mean:.5}  (dim/2n reference for K=2: {:.5})", 8.0 / (2.0 * n as f64));
            points.push((n as f64, mean.max(1e-12)));
        }
        let (slope, _) = log_log_slope(&points);
        println!("  log-log slope: {slope:.2}");
    }
    Ok(())
}
