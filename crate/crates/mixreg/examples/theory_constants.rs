//! Entropy constants, complexity roots and penalty shapes for a ladder of
//! model specs.

use mixreg::selection::ModelSpec;
use mixreg::theory::{
    entropy_constants, kraft_xi, milder_theoretical_penalty, sigma_m_bound, theoretical_penalty,
};

fn main() -> mixreg::Result<()> {
    let spec = ModelSpec::free(2, 1, 1, 1, 1);
    let consts = entropy_constants(&spec, 20, 1.0, 1.0)?;
    println!("C_W      = {:.6}", consts.c_w);
    println!("C_Upsilon= {:.6}", consts.c_upsilon);
    println!("C_1      = {:.6}", consts.c1);
    println!("frak_C   = {:.6}", consts.frak_c);
    println!("C (pen)  = {:.6}", consts.c_penalty);
    println!("gamma_kappa(1) = {:.6}, Kraft Xi = {:.6}", consts.gamma_kappa, kraft_xi());

    println!("\nsigma_m roots (C_m = frak_C):");
    println!("{:>4} {:>8} {:>12} {:>12} {:>12}", "K", "dim", "sigma_m", "n*sigma^2", "bound");
    let n = 2000;
    for k in [1usize, 2, 5, 10, 20] {
        let sk = spec.with_k(k);
        let r = sigma_m_bound(sk.dim(), consts.frak_c, n)?;
        println!(
            "{k:>4} {:>8} {:>12.6} {:>12.3} {:>12.3}",
            sk.dim(),
            r.sigma_m,
            r.n_sigma_sq,
            r.bound
        );
    }

    println!("\npenalties at n = {n}:");
    println!("{:>4} {:>14} {:>14} {:>10}", "K", "theoretical", "milder", "kappa*dim");
    for k in [1usize, 2, 5, 10] {
        let sk = spec.with_k(k);
        println!(
            "{k:>4} {:>14.1} {:>14.1} {:>10}",
            theoretical_penalty(&sk, n, &consts, 1.0),
            milder_theoretical_penalty(&sk, n, &consts, 1.0),
            sk.dim()
        );
    }
    Ok(())
}
