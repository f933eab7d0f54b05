//! Sample datasets from the two reference generators and write them as CSV.
//!
//! Example P is a two-component logistic-gated mixture with linear means
//! (the fitted collection contains it); example NP has quadratic means.

use mixreg::experiment::{truth_density, ExampleModel};

fn main() -> mixreg::Result<()> {
    for example in [ExampleModel::P, ExampleModel::NP] {
        let truth = truth_density(example);
        println!("example {example:?}: K = {}, gate logit w2(x) at x = 0: {:.3}", truth.k(), truth.weights()[1].eval(&[0.0])?);
        for x in [0.0, 7.0 / 15.0, 1.0] {
            let lw = truth.log_weights(&[x])?;
            let mu0 = truth.mean_at(0, &[x])?;
            let mu1 = truth.mean_at(1, &[x])?;
            println!(
                "  x = {x:.3}: pi = ({:.5}, {:.5}), means = ({:+.3}, {:+.3})",
                lw[0].exp(),
                lw[1].exp(),
                mu0[0],
                mu1[0]
            );
        }
        let data = truth.sample(2000, 7)?;
        let path = format!("example_{example:?}_n2000.csv");
        data.write_csv(std::fs::File::create(&path)?)?;
        println!("  wrote {} rows to {path}", data.len());
    }
    Ok(())
}
