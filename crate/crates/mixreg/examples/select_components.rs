//! Penalized selection of the component count on example-P data.

use mixreg::experiment::{truth_density, ExampleModel};
use mixreg::init::InitConfig;
use mixreg::selection::{select, KappaMode, ModelSpec, SelectionConfig};

fn main() -> mixreg::Result<()> {
    let truth = truth_density(ExampleModel::P);
    let data = truth.sample(2000, 3)?;
    let template = ModelSpec::free(1, 1, 1, 1, 1);
    let ks: Vec<usize> = (1..=8).collect();
    let cfg = SelectionConfig {
        init: InitConfig { seed: 5, ..Default::default() },
        kappa: KappaMode::Fixed(1.0),
        ..Default::default()
    };
    let sel = select(&data, &ks, &template, &cfg)?;

    println!("kappa = {}, criterion = -loglik + kappa * dim", sel.kappa_used);
    println!("{:>3} {:>5} {:>12} {:>12}", "K", "dim", "loglik", "criterion");
    for (&k, fit) in &sel.fits {
        println!(
            "{k:>3} {:>5} {:>12.2} {:>12.2}{}",
            template.with_k(k).dim(),
            fit.final_loglik(),
            sel.criterion[&k],
            if k == sel.chosen_k { "  <- chosen" } else { "" }
        );
    }
    if let Some(kh) = sel.kappa_hat {
        println!("slope-heuristic kappa_hat = {kh:.3} (prescribed 2*kappa_hat = {:.3})", 2.0 * kh);
    }
    Ok(())
}
