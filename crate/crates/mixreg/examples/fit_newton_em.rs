//! Fit a two-component model to example-P data with Newton-EM and show the
//! monotone log-likelihood trace.

use mixreg::experiment::{truth_density, ExampleModel};
use mixreg::init::{initialize, InitConfig};
use mixreg::newton_em::{fit, FitConfig};
use mixreg::selection::ModelSpec;

fn main() -> mixreg::Result<()> {
    let truth = truth_density(ExampleModel::P);
    let data = truth.sample(2000, 42)?;
    let spec = ModelSpec::free(2, 1, 1, 1, 1);

    let start = initialize(&data, &spec, &InitConfig { seed: 1, ..Default::default() })?;
    let result = fit(&data, &spec, &start, &FitConfig::default())?;

    println!("terminated by {:?} after {} iterations", result.terminated_by, result.n_iters);
    for (i, ll) in result.loglik_trace.iter().enumerate() {
        println!("  iter {i:3}: loglik {ll:.4}");
    }
    let monotone = result.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8);
    println!("trace non-decreasing: {monotone}");

    // compare against the generator on the same sample
    let prep = truth.prepared()?;
    let truth_ll: f64 = (0..data.len())
        .map(|i| prep.log_density(data.x_row(i), data.y_row(i)).unwrap())
        .sum();
    println!(
        "fitted mean loglik/point {:.5} vs truth {:.5}",
        result.final_loglik() / data.len() as f64,
        truth_ll / data.len() as f64
    );
    for (k, (w, m)) in result.params.weights().iter().zip(result.params.means()).enumerate() {
        println!(
            "  comp {k}: gate coeffs {:?}, mean coeffs {:?}, var {:.4}",
            w.coeffs, m[0].coeffs, result.params.covs()[k][(0, 0)]
        );
    }
    Ok(())
}
