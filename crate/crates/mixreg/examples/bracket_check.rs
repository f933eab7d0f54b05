//! Numerical verification of the two-sided Gaussian bracket: admissible
//! perturbations always stay inside the bracket, and a deliberately inflated
//! mean gap breaks containment.

use mixreg::error::Error;
use mixreg::seeding::rng_for;
use mixreg::selection::BoxBounds;
use mixreg::theory::{
    bracket_size_sq, delta_sigma_cap, random_bracket_instance, verify_gaussian_bracket,
    BracketConfig,
};

fn main() -> mixreg::Result<()> {
    let bounds = BoxBounds { l_min: 0.5, l_max: 2.0, lambda_min: 1.0, lambda_max: 1.0 };
    let (delta, kappa) = (0.5, 1.0);
    let ds = delta_sigma_cap(delta, kappa, 1);
    println!(
        "delta = {delta}, kappa = {kappa}: delta_sigma cap = {ds:.5}, bracket size^2 = {:.6} <= (delta/5)^2 = {:.6}",
        bracket_size_sq(1, kappa, ds),
        (delta / 5.0) * (delta / 5.0)
    );

    let cfg = BracketConfig::default();
    let mut ok = 0;
    for trial in 0..50u64 {
        let mut rng = rng_for(0xadd, trial);
        let (base, tilde) = random_bracket_instance(delta, kappa, &bounds, 0.99, &mut rng)?;
        let report = verify_gaussian_bracket(&base, &tilde, delta, kappa, &bounds, &cfg)?;
        assert!(report.ok);
        ok += 1;
    }
    println!("admissible instances verified: {ok}/50 (containment on {} grid points each)", 20 * 500);

    let falsify = BracketConfig { enforce_preconditions: false, ..Default::default() };
    let mut violated = 0;
    for trial in 0..20u64 {
        let mut rng = rng_for(0xbad, trial);
        let (base, tilde) = random_bracket_instance(delta, kappa, &bounds, 10.0, &mut rng)?;
        match verify_gaussian_bracket(&base, &tilde, delta, kappa, &bounds, &falsify) {
            Err(Error::BracketViolated { x, y, side }) => {
                if violated == 0 {
                    println!("first violation witness: x = {x:?}, y = {y:?} ({side} bound)");
                }
                violated += 1;
            }
            Ok(_) => {}
            Err(e) => return Err(e),
        }
    }
    println!("negative controls (10x mean gap): {violated}/20 violated containment");
    Ok(())
}
