//! Thin command-line front end over the library: dataset generation, single
//! fits, penalized selection, divergence evaluation, slope-heuristic paths,
//! the theory toolkit and full experiment runs.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixreg::divergence::kl_tensorized;
use mixreg::error::Error;
use mixreg::experiment::{parse_truth, read_mixture, run_experiment, ExperimentConfig};
use mixreg::init::{InitConfig, InitStrategy};
use mixreg::model::Dataset;
use mixreg::newton_em::{FitConfig, VarianceFloorMode};
use mixreg::selection::{
    log_spaced_grid, select, slope_heuristic, KappaMode, ModelSpec, SelectionConfig,
};
use mixreg::theory::{
    entropy_constants, random_bracket_instance, sigma_m_bound, theoretical_penalty,
    verify_gaussian_bracket, BracketConfig,
};

#[derive(Parser)]
#[command(name = "mixreg", version, about = "Gaussian regression mixtures with logistic gates")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Base directory for relative output paths.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a reference example or a mixture JSON file.
    Generate {
        /// P, NP or a path to mixture JSON.
        #[arg(long)]
        example: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one model with Newton-EM and write the fit as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a K range and select by the penalized criterion.
    Select {
        #[arg(long)]
        data: PathBuf,
        /// K range, e.g. `1..20` or `1,2,5`.
        #[arg(long, default_value = "1..10")]
        k_range: String,
        /// Penalty constant: a number or `slope`.
        #[arg(long, default_value = "1.0")]
        kappa: String,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the (kappa, dimension) path as CSV.
        #[arg(long)]
        dim_path: Option<PathBuf>,
    },
    /// Monte-Carlo tensorized KL between a truth and a fitted mixture on a
    /// dataset's design points.
    Kl {
        /// P, NP or a path to mixture JSON.
        #[arg(long)]
        truth: String,
        /// Fitted mixture JSON (a `fit` output's `params` field or a plain
        /// mixture document).
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        my: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Slope heuristic: fit a K range and locate the dimension jump.
    Slope {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1..10")]
        k_range: String,
        #[arg(long, default_value_t = 0.01)]
        grid_min: f64,
        #[arg(long, default_value_t = 10.0)]
        grid_max: f64,
        #[arg(long, default_value_t = 100)]
        grid_points: usize,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the (kappa, dimension) path as CSV.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Entropy constants, penalty values and the bracket verifier.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Full experiment: per-seed pipelines plus figure CSVs.
    Experiment {
        #[arg(long)]
        example: String,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Seed list, e.g. `1..55` or `3,5,9`.
        #[arg(long, default_value = "1..55")]
        seeds: String,
        #[arg(long, default_value = "1..10")]
        k_range: String,
        #[arg(long, default_value = "1.0")]
        kappa: String,
        #[arg(long, default_value_t = 1000)]
        my: usize,
        /// Optional sample-size ladder, e.g. `500,1000,2000,5000,10000`.
        #[arg(long)]
        ladder: Option<String>,
        #[command(flatten)]
        fit: FitArgs,
    },
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Entropy constants of a model collection (optionally with the penalty
    /// at sample size n).
    Constants {
        /// Model spec JSON; defaults to the linear 1-D spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        kmax: usize,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 1.0)]
        c_u: f64,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized verification of the Gaussian bracket construction.
    VerifyBracket {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        p: usize,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inflate the mean gap tenfold (falsification mode).
        #[arg(long)]
        negative: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Complexity root sigma_m and its n*sigma^2 bound.
    Sigma {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        c: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Fitting and initialization flags shared by the fitting subcommands.
#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 1)]
    d_w: usize,
    #[arg(long, default_value_t = 1)]
    d_upsilon: usize,
    #[arg(long, value_parser = parse_strategy, default_value = "regular")]
    init: InitStrategy,
    #[arg(long, default_value_t = 50)]
    init_trials: usize,
    #[arg(long, default_value_t = 3)]
    race_steps: usize,
    #[arg(long, default_value_t = 200)]
    max_em_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    em_rel_tol: f64,
    #[arg(long, default_value_t = 5)]
    newton_steps: usize,
    /// `fixed` (10/n), `data` (min-spacing/chi-square) or a numeric floor.
    #[arg(long, default_value = "fixed")]
    variance_floor: String,
    /// Confidence level of the data-driven floor.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_strategy(s: &str) -> Result<InitStrategy, String> {
    match s {
        "regular" => Ok(InitStrategy::Regular),
        "naive" => Ok(InitStrategy::Naive),
        "clever" => Ok(InitStrategy::Clever),
        other => Err(format!("unknown strategy {other:?} (regular|naive|clever)")),
    }
}

impl FitArgs {
    fn floor_mode(&self) -> Result<VarianceFloorMode, Error> {
        match self.variance_floor.as_str() {
            "fixed" => Ok(VarianceFloorMode::FixedTenOverN),
            "data" => Ok(VarianceFloorMode::DataDriven { alpha: self.alpha }),
            v => v
                .parse::<f64>()
                .map(VarianceFloorMode::Explicit)
                .map_err(|_| Error::InvalidConfig(format!("bad variance floor {v:?}"))),
        }
    }

    fn fit_config(&self) -> Result<FitConfig, Error> {
        Ok(FitConfig {
            max_em_iters: self.max_em_iters,
            em_rel_tol: self.em_rel_tol,
            newton_steps: self.newton_steps,
            variance_floor: self.floor_mode()?,
            enforce_coeff_bounds: false,
        })
    }

    fn init_config(&self) -> Result<InitConfig, Error> {
        Ok(InitConfig {
            strategy: self.init,
            n_trials: self.init_trials,
            race_steps: self.race_steps,
            seed: self.seed,
            variance_floor: self.floor_mode()?,
            newton_steps: self.newton_steps,
            ..Default::default()
        })
    }

    fn selection_config(&self, kappa: KappaMode) -> Result<SelectionConfig, Error> {
        Ok(SelectionConfig {
            init: self.init_config()?,
            fit: self.fit_config()?,
            kappa,
            ..Default::default()
        })
    }
}

/// Parses `a..b` (inclusive) or a comma-separated list.
fn parse_index_range(s: &str) -> Result<Vec<u64>, Error> {
    let bad = |s: &str| Error::InvalidConfig(format!("bad range {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad(s))?;
        let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad(s))?;
        if a > b {
            return Err(bad(s));
        }
        Ok((a..=b).collect())
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad(s)))
            .collect()
    }
}

fn parse_kappa(s: &str) -> Result<KappaMode, Error> {
    if s == "slope" {
        return Ok(KappaMode::Slope);
    }
    s.parse::<f64>()
        .map(KappaMode::Fixed)
        .map_err(|_| Error::InvalidConfig(format!("kappa must be a number or `slope`, got {s:?}")))
}

/// Writes to `out` (resolved against the global output directory when
/// relative), or to stdout when no path is given.
fn write_out(base: Option<&PathBuf>, out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => {
            let path = match base {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.clone(),
            };
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, text)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                writeln!(stdout)?;
            }
        }
    }
    Ok(())
}

fn load_dataset(path: &PathBuf) -> Result<Dataset, Error> {
    Dataset::read_csv(fs::File::open(path)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let base = cli.output_dir;
    match cli.command {
        Command::Generate { example, n, seed, out } => {
            let truth = parse_truth(&example)?;
            let data = truth.density().sample(n, seed)?;
            let mut buf = Vec::new();
            data.write_csv(&mut buf)?;
            write_out(base.as_ref(), &out, std::str::from_utf8(&buf).expect("ascii csv"))
        }
        Command::Fit { data, k, fit, out } => {
            let data = load_dataset(&data)?;
            let spec = ModelSpec::free(k, fit.d_w, fit.d_upsilon, data.covariate_dim(), data.response_dim());
            let init = mixreg::init::initialize(&data, &spec, &fit.init_config()?)?;
            let result = mixreg::newton_em::fit(&data, &spec, &init, &fit.fit_config()?)?;
            write_out(base.as_ref(), &out, &serde_json::to_string_pretty(&result)?)
        }
        Command::Select { data, k_range, kappa, fit, out, dim_path } => {
            let data = load_dataset(&data)?;
            let ks: Vec<usize> = parse_index_range(&k_range)?.iter().map(|&k| k as usize).collect();
            let template =
                ModelSpec::free(1, fit.d_w, fit.d_upsilon, data.covariate_dim(), data.response_dim());
            let cfg = fit.selection_config(parse_kappa(&kappa)?)?;
            let result = select(&data, &ks, &template, &cfg)?;
            if let Some(path) = dim_path {
                let mut text = String::from("kappa,dimension\n");
                for &(k, d) in &result.dim_path {
                    text.push_str(&format!("{k},{d}\n"));
                }
                write_out(base.as_ref(), &Some(path), &text)?;
            }
            write_out(base.as_ref(), &out, &serde_json::to_string_pretty(&result)?)
        }
        Command::Kl { truth, fit, data, my, seed, out } => {
            let truth = parse_truth(&truth)?.density();
            let fitted = read_mixture(&fit)?;
            let data = load_dataset(&data)?;
            let xs: Vec<&[f64]> = data.x_rows().collect();
            let est = kl_tensorized(&truth.prepared()?, &fitted.prepared()?, &xs, my, seed)?;
            write_out(base.as_ref(), &out, &serde_json::to_string_pretty(&est)?)
        }
        Command::Slope { data, k_range, grid_min, grid_max, grid_points, fit, out, path } => {
            let data = load_dataset(&data)?;
            let ks: Vec<usize> = parse_index_range(&k_range)?.iter().map(|&k| k as usize).collect();
            let template =
                ModelSpec::free(1, fit.d_w, fit.d_upsilon, data.covariate_dim(), data.response_dim());
            let cfg = fit.selection_config(KappaMode::Fixed(1.0))?;
            let sel = select(&data, &ks, &template, &cfg)?;
            let specs = sel.fits.keys().map(|&k| (k, template.with_k(k))).collect();
            let grid = log_spaced_grid(grid_min, grid_max, grid_points);
            let slope = slope_heuristic(&sel.fits, &specs, &grid)?;
            if let Some(p) = path {
                let mut text = String::from("kappa,dimension\n");
                for &(k, d) in &slope.path {
                    text.push_str(&format!("{k},{d}\n"));
                }
                write_out(base.as_ref(), &Some(p), &text)?;
            }
            write_out(base.as_ref(), &out, &serde_json::to_string_pretty(&slope)?)
        }
        Command::Theory(cmd) => run_theory(cmd, base.as_ref()),
        Command::Experiment { example, n, seeds, k_range, kappa, my, ladder, fit } => {
            let truth = parse_truth(&example)?;
            let dir = base
                .clone()
                .ok_or_else(|| Error::InvalidConfig("experiment requires --output-dir".into()))?;
            let mut cfg = ExperimentConfig::new(truth, n, dir);
            cfg.seeds = parse_index_range(&seeds)?;
            cfg.k_range = parse_index_range(&k_range)?.iter().map(|&k| k as usize).collect();
            cfg.kappa = parse_kappa(&kappa)?;
            cfg.my = my;
            cfg.ladder = ladder
                .map(|l| parse_index_range(&l).map(|v| v.iter().map(|&n| n as usize).collect()))
                .transpose()?;
            cfg.selection = fit.selection_config(cfg.kappa.clone())?;
            let summary = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

fn run_theory(cmd: TheoryCommand, base: Option<&PathBuf>) -> Result<(), Error> {
    match cmd {
        TheoryCommand::Constants { spec, kmax, kappa, c_u, n, out } => {
            let spec: ModelSpec = match spec {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
                None => ModelSpec::free(2, 1, 1, 1, 1),
            };
            let consts = entropy_constants(&spec, kmax, kappa, c_u)?;
            let mut doc = serde_json::to_value(&consts)?;
            if let Some(n) = n {
                doc["penalty_at_n"] = serde_json::json!({
                    "n": n,
                    "kappa_mult": 1.0,
                    "value": theoretical_penalty(&spec, n, &consts, 1.0),
                    "kraft_xi": mixreg::theory::kraft_xi(),
                });
            }
            write_out(base, &out, &serde_json::to_string_pretty(&doc)?)
        }
        TheoryCommand::VerifyBracket { trials, p, delta, kappa, seed, negative, out } => {
            if p != 1 {
                return Err(Error::UnsupportedDimension { what: "random bracket trials", d: 1, p });
            }
            let bounds = mixreg::selection::BoxBounds {
                l_min: 0.5,
                l_max: 2.0,
                lambda_min: 1.0,
                lambda_max: 1.0,
            };
            let factor = if negative { 10.0 } else { 0.99 };
            let cfg = BracketConfig { enforce_preconditions: !negative, ..Default::default() };
            let mut violations = 0usize;
            let mut precondition_failures = 0usize;
            let mut first_witness = None;
            for trial in 0..trials {
                let mut rng = mixreg::seeding::rng_for(seed, trial as u64);
                let (base, tilde) = random_bracket_instance(delta, kappa, &bounds, factor, &mut rng)?;
                match verify_gaussian_bracket(&base, &tilde, delta, kappa, &bounds, &cfg) {
                    Ok(_) => {}
                    Err(Error::BracketViolated { x, y, side }) => {
                        violations += 1;
                        if first_witness.is_none() {
                            first_witness = Some(serde_json::json!({"x": x, "y": y, "side": side}));
                        }
                    }
                    Err(Error::PreconditionViolated(_)) => precondition_failures += 1,
                    Err(e) => return Err(e),
                }
            }
            let doc = serde_json::json!({
                "trials": trials,
                "delta": delta,
                "kappa": kappa,
                "negative_mode": negative,
                "containment_violations": violations,
                "precondition_failures": precondition_failures,
                "first_witness": first_witness,
            });
            write_out(base, &out, &serde_json::to_string_pretty(&doc)?)
        }
        TheoryCommand::Sigma { dim, c, n, out } => {
            let r = sigma_m_bound(dim, c, n)?;
            write_out(base, &out, &serde_json::to_string_pretty(&r)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
