//! Conditional density estimation with mixtures of Gaussian regressions and
//! covariate-dependent logistic weights.
//!
//! The estimator models `s(y|x) = Σ_k π_{w,k}(x) Φ_{υ_k(x),Σ_k}(y)` with
//! polynomial gate and mean functions, fits each candidate component count by
//! a monotone Newton-EM algorithm, and selects the model minimizing a
//! penalized likelihood criterion whose constant can be calibrated by the
//! slope heuristic. Monte-Carlo estimators of tensorized divergences measure
//! the risk against a known generator, and a theory toolkit evaluates the
//! entropy/penalty constants behind the penalty shape and numerically checks
//! the Gaussian bracket construction.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example generate_data
//! cargo run --release --example fit_newton_em
//! cargo run --release --example select_components
//! cargo run --release --example slope_calibration
//! cargo run --release --example init_strategies
//! cargo run --release --example kl_estimates
//! cargo run --release --example risk_decay
//! cargo run --release --example theory_constants
//! cargo run --release --example bracket_check
//! ```
//!
//! The same capabilities are scriptable through the thin `mixreg` binary
//! (`generate`, `fit`, `select`, `kl`, `slope`, `theory`, `experiment`).

pub mod divergence;
pub mod error;
pub mod experiment;
pub mod init;
pub mod model;
pub mod newton_em;
pub mod polybasis;
pub mod seeding;
pub mod selection;
pub mod theory;

pub use error::{Error, Result};
pub use model::{Dataset, Mixture};
pub use newton_em::{fit, FitConfig, FitResult};
pub use selection::{select, ModelSpec, SelectionConfig, SelectionResult};
