//! Command-line front end: validation, evaluation, gradients, solving,
//! path tracing, stability experiments, catalog dumps, and the
//! genericity sampler. Exit codes: 0 success, 1 solver failure, 2 input
//! error.

use bslp::detequiv::{self, GenericBilevel};
use bslp::harness;
use bslp::lowerlevel;
use bslp::model::{self, Instance, RiskMeasure, Sense};
use bslp::mpcc;
use bslp::risk;
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bslp",
    about = "Toolkit for risk-averse bilevel stochastic linear programs",
    version
)]
struct Cli {
    /// Worker thread cap for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an instance, run model checks, and certify the domain
    /// conditions (feasibility on the support, a dual ray bound, and a
    /// bounded follower value).
    Validate {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Print the scenario cost profile and the risk value at a point.
    Evaluate {
        #[arg(long)]
        instance: PathBuf,
        /// Leader point, comma-separated coordinates.
        x: String,
        #[arg(long, default_value = "E")]
        measure: String,
    },
    /// Risk gradient at a point plus a finite-difference cross-check.
    Grad {
        #[arg(long)]
        instance: PathBuf,
        /// Leader point, comma-separated coordinates.
        x: String,
        #[arg(long, default_value = "E")]
        measure: String,
    },
    /// Solve the leader problem for the chosen measure.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "E")]
        measure: String,
        /// oracle | path | grid
        #[arg(long, default_value = "oracle")]
        method: String,
        #[arg(long, default_value_t = mpcc::EPS0)]
        eps0: f64,
        #[arg(long, default_value_t = mpcc::FACTOR)]
        factor: f64,
        #[arg(long = "eps-min", default_value_t = mpcc::EPS_MIN)]
        eps_min: f64,
        #[arg(long = "pattern-cap", default_value_t = mpcc::DEFAULT_PATTERN_CAP)]
        pattern_cap: u32,
        #[arg(long = "grid-res", default_value_t = harness::GRID_RESOLUTION)]
        grid_res: f64,
        /// Run the regularization path from several pattern-derived starts.
        #[arg(long)]
        multistart: bool,
    },
    /// Write the regularization-path trace as CSV.
    Path {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "E")]
        measure: String,
        #[arg(long, default_value_t = mpcc::EPS0)]
        eps0: f64,
        #[arg(long, default_value_t = mpcc::FACTOR)]
        factor: f64,
        #[arg(long = "eps-min", default_value_t = mpcc::EPS_MIN)]
        eps_min: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        multistart: bool,
    },
    /// Distribution-family stability experiment; CSV plus a summary.
    Stability {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "E")]
        measure: String,
        /// escaping | clipped | constant
        #[arg(long)]
        family: Option<String>,
        /// JSON file holding an explicit family.
        #[arg(long = "family-file")]
        family_file: Option<PathBuf>,
        /// Family indices, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "2,10,100")]
        ls: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the follower basis catalog.
    Bases {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Estimate how often uniform atom noise lands on a
    /// nondifferentiability hyperplane at a point.
    Genericity {
        #[arg(long)]
        instance: PathBuf,
        /// Leader point, comma-separated coordinates.
        x: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = harness::NOISE_SCALE)]
        noise: f64,
        /// Excess target for the kink test, when checking one.
        #[arg(long)]
        eta: Option<f64>,
    },
}

enum AppError {
    Input(String),
    Solver(String),
}

impl AppError {
    fn input(e: impl ToString) -> AppError {
        AppError::Input(e.to_string())
    }

    fn solver(e: impl ToString) -> AppError {
        AppError::Solver(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Solver(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn read_instance(path: &Path) -> Result<Instance, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Input(format!("{}: {e}", path.display())))?;
    model::parse_instance(&text).map_err(|e| AppError::Input(format!("{}: {e}", path.display())))
}

fn parse_point(text: &str, n: usize) -> Result<Vec<f64>, AppError> {
    let coords: Result<Vec<f64>, _> = text.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let coords = coords.map_err(|_| AppError::Input(format!("cannot parse point '{text}'")))?;
    if coords.len() != n {
        return Err(AppError::Input(format!(
            "point has {} coordinates, instance needs {n}",
            coords.len()
        )));
    }
    Ok(coords)
}

fn parse_measure(text: &str) -> Result<RiskMeasure, AppError> {
    text.parse::<RiskMeasure>().map_err(AppError::input)
}

fn joined(xs: &[f64]) -> String {
    xs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// The single-level build matching a measure, for the oracle and path
/// methods. Measures without one (tail averages, higher orders,
/// pessimistic sense) are rejected as input errors so the caller can
/// switch method instead.
fn build_for(inst: &Instance, measure: RiskMeasure) -> Result<GenericBilevel, AppError> {
    if inst.sense == Sense::Pessimistic {
        return Err(AppError::Input(
            "no single-level build for the pessimistic sense; use --method grid".into(),
        ));
    }
    match measure {
        RiskMeasure::Expectation => detequiv::build_expectation(inst).map_err(AppError::solver),
        RiskMeasure::ExpectedExcess { eta, p } if p == 1.0 => {
            detequiv::build_expected_excess(inst, eta).map_err(AppError::solver)
        }
        RiskMeasure::SemiDeviation { rho, p } if p == 1.0 => {
            detequiv::build_semideviation(inst, rho).map_err(AppError::solver)
        }
        RiskMeasure::CVaR { .. } => Err(AppError::Input(
            "tail averages have no fixed single-level build; use --method oracle (outer search) or grid".into(),
        )),
        _ => Err(AppError::Input(
            "orders above one have no single-level build; use --method grid".into(),
        )),
    }
}

fn run(command: Command) -> Result<(), AppError> {
    match command {
        Command::Validate { instance } => {
            let inst = read_instance(&instance)?;
            println!(
                "instance valid: n={} m={} s={} K={} sense={:?}",
                inst.n, inst.m, inst.s, inst.num_scenarios, inst.sense
            );
            let cert = lowerlevel::check_dom_f(&inst).map_err(AppError::solver)?;
            println!(
                "domain certified: witness x = [{}], bounded = {}",
                joined(&cert.x),
                cert.bounded
            );
            Ok(())
        }
        Command::Evaluate { instance, x, measure } => {
            let inst = read_instance(&instance)?;
            let measure = parse_measure(&measure)?;
            let x = parse_point(&x, inst.n)?;
            let catalog = lowerlevel::enumerate_bases(&inst).map_err(AppError::solver)?;
            let profile = risk::scenario_profile(&inst, &catalog, &x).map_err(AppError::solver)?;
            println!("scenario values = {}", joined(&profile.values));
            println!("probabilities = {}", joined(&profile.probs));
            println!("risk value = {}", risk::eval_risk(&profile, measure));
            Ok(())
        }
        Command::Grad { instance, x, measure } => {
            let inst = read_instance(&instance)?;
            let measure = parse_measure(&measure)?;
            let x = parse_point(&x, inst.n)?;
            let catalog = lowerlevel::enumerate_bases(&inst).map_err(AppError::solver)?;
            let (grad, clean) = risk::grad_q(&inst, &catalog, &x, measure).map_err(AppError::solver)?;
            let fd = risk::fd_gradient(&inst, &catalog, &x, measure, 1e-6).map_err(AppError::solver)?;
            let dev = grad
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            println!("gradient = {}", joined(&grad));
            println!("differentiable = {clean}");
            println!("finite difference = {}", joined(&fd));
            println!("max abs deviation = {dev}");
            Ok(())
        }
        Command::Solve {
            instance,
            measure,
            method,
            eps0,
            factor,
            eps_min,
            pattern_cap,
            grid_res,
            multistart,
        } => {
            let inst = read_instance(&instance)?;
            let measure = parse_measure(&measure)?;
            let (value, x, note) = match method.as_str() {
                "oracle" => {
                    if let RiskMeasure::CVaR { alpha } = measure {
                        if inst.sense == Sense::Pessimistic {
                            return Err(AppError::Input(
                                "no single-level build for the pessimistic sense; use --method grid".into(),
                            ));
                        }
                        let sol = detequiv::solve_cvar(&inst, alpha, pattern_cap)
                            .map_err(AppError::solver)?;
                        (sol.value, sol.x, format!("target eta = {}", sol.eta))
                    } else {
                        let gb = build_for(&inst, measure)?;
                        let m = mpcc::build_kkt(gb);
                        let (point, value) =
                            mpcc::global_oracle_capped(&m, pattern_cap).map_err(AppError::solver)?;
                        let x = m.gb.extract_leader(&point.u);
                        (value, x, String::new())
                    }
                }
                "path" => {
                    let gb = build_for(&inst, measure)?;
                    let m = mpcc::build_kkt(gb);
                    let (_, point, value) = if multistart {
                        mpcc::regularization_path_multistart(&m, eps0, factor, eps_min)
                            .map_err(AppError::solver)?
                    } else {
                        mpcc::regularization_path(&m, eps0, factor, eps_min, None)
                            .map_err(AppError::solver)?
                    };
                    let note = format!("final comp residual = {}", point.comp_residual(&m));
                    (value, m.gb.extract_leader(&point.u), note)
                }
                "grid" => {
                    let (value, x) = harness::grid_minimize_risk(&inst, measure, grid_res)
                        .map_err(AppError::solver)?;
                    (value, x, String::new())
                }
                other => {
                    return Err(AppError::Input(format!(
                        "unknown method '{other}' (expected oracle, path, or grid)"
                    )))
                }
            };
            println!("optimal value = {value}");
            println!("x* = {}", joined(&x));
            if !note.is_empty() {
                println!("{note}");
            }
            Ok(())
        }
        Command::Path {
            instance,
            measure,
            eps0,
            factor,
            eps_min,
            out,
            multistart,
        } => {
            let inst = read_instance(&instance)?;
            let measure = parse_measure(&measure)?;
            let gb = build_for(&inst, measure)?;
            let m = mpcc::build_kkt(gb);
            let (trace, point, value) = if multistart {
                mpcc::regularization_path_multistart(&m, eps0, factor, eps_min)
                    .map_err(AppError::solver)?
            } else {
                mpcc::regularization_path(&m, eps0, factor, eps_min, None)
                    .map_err(AppError::solver)?
            };
            let csv = trace.to_csv();
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)
                        .map_err(|e| AppError::Input(format!("{}: {e}", path.display())))?;
                    println!("trace written to {}", path.display());
                }
                None => print!("{csv}"),
            }
            println!("final objective = {value}");
            println!("x* = {}", joined(&m.gb.extract_leader(&point.u)));
            Ok(())
        }
        Command::Stability {
            instance,
            measure,
            family,
            family_file,
            ls,
            out,
        } => {
            let inst = read_instance(&instance)?;
            let measure = parse_measure(&measure)?;
            let family = match (family, family_file) {
                (Some(_), Some(_)) => {
                    return Err(AppError::Input(
                        "give either --family or --family-file, not both".into(),
                    ))
                }
                (Some(name), None) => match name.as_str() {
                    "escaping" => harness::escaping_tail_family(&ls),
                    "clipped" => harness::clipped_tail_family(&ls),
                    "constant" => harness::constant_family(
                        &ls,
                        harness::Distribution {
                            atoms: inst.scenarios.iter().map(|sc| sc.z.clone()).collect(),
                            weights: inst.probabilities(),
                        },
                    ),
                    other => {
                        return Err(AppError::Input(format!(
                            "unknown family '{other}' (expected escaping, clipped, or constant)"
                        )))
                    }
                },
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| AppError::Input(format!("{}: {e}", path.display())))?;
                    harness::DistributionFamily::from_json(&text).map_err(AppError::input)?
                }
                (None, None) => {
                    return Err(AppError::Input(
                        "stability needs --family or --family-file".into(),
                    ))
                }
            };
            let table =
                harness::stability_experiment(&inst, &family, measure).map_err(AppError::solver)?;
            let csv = table.to_csv();
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)
                        .map_err(|e| AppError::Input(format!("{}: {e}", path.display())))?;
                    println!("table written to {}", path.display());
                }
                None => print!("{csv}"),
            }
            println!("{}", table.summary());
            Ok(())
        }
        Command::Bases { instance } => {
            let inst = read_instance(&instance)?;
            let catalog = lowerlevel::enumerate_bases(&inst).map_err(AppError::solver)?;
            let mut out = String::new();
            let _ = writeln!(
                out,
                "catalog: {} bases, {} distinct slopes, {} row classes",
                catalog.entries.len(),
                catalog.deltas.len(),
                catalog.row_classes.len()
            );
            for (i, entry) in catalog.entries.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "basis {i}: columns = [{}], slope = [{}], row = [{}]",
                    entry
                        .columns
                        .iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                    joined(&entry.delta),
                    joined(&entry.row_vec)
                );
            }
            print!("{out}");
            Ok(())
        }
        Command::Genericity {
            instance,
            x,
            trials,
            seed,
            noise,
            eta,
        } => {
            let inst = read_instance(&instance)?;
            let x = parse_point(&x, inst.n)?;
            let report = harness::genericity_sample(&inst, &x, trials, seed, noise, eta)
                .map_err(AppError::solver)?;
            println!("trials = {}", report.trials);
            println!("hits = {}", report.hits);
            println!("fraction = {}", report.fraction);
            println!("seed = {}", report.seed);
            println!("noise scale = {}", report.noise_scale);
            Ok(())
        }
    }
}
