use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use frac_afem::afem::{GammaPolicy, StopReason};
use frac_afem::estimator::configure_threads_from_env;
use frac_afem::experiments::{
    dump_mesh, estimate_rate_by, mean_effectivity, read_records, run_experiment, write_indicators,
    ExperimentName, ExperimentSpec, RunFile, RATE_WINDOW,
};
use frac_afem::weighted::LocalSpace;

/// Adaptive finite elements for the spectral fractional Laplacian.
#[derive(Parser)]
#[command(name = "frac-afem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a predefined experiment for one or more fractional orders.
    Run {
        #[arg(long)]
        experiment: ExperimentName,
        /// Comma separated fractional orders, e.g. 0.2,0.8.
        #[arg(long, value_delimiter = ',')]
        s: Option<Vec<f64>>,
        /// Bulk parameter of the marking step.
        #[arg(long)]
        theta: Option<f64>,
        /// Stop before solving on a mesh with more degrees of freedom than this.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Refine extra base elements so that the mesh condition holds.
        #[arg(long)]
        enforce_mesh_condition: bool,
        /// Local space of the star problems: bubble, p2 or q2.
        #[arg(long)]
        space: Option<LocalSpace>,
        /// Grading exponent of the y-partition: default or strong.
        #[arg(long)]
        gamma_policy: Option<GammaPolicy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the convergence rate of a run log.
    Rate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = RATE_WINDOW)]
        window: usize,
    },
    /// Print the mesh of one iteration of the run described by a TOML file.
    DumpMesh {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        iter: usize,
        /// Also write the per-node indicators of that iteration as CSV.
        #[arg(long)]
        indicators: Option<PathBuf>,
    },
}

fn exit_code(stop: StopReason) -> ExitCode {
    match stop {
        StopReason::Converged => ExitCode::SUCCESS,
        StopReason::BudgetReached | StopReason::IterationCap => ExitCode::from(2),
        StopReason::Failed => ExitCode::FAILURE,
    }
}

fn execute(cli: Cli) -> frac_afem::Result<ExitCode> {
    match cli.command {
        Command::Run {
            experiment,
            s,
            theta,
            budget,
            max_iterations,
            enforce_mesh_condition,
            space,
            gamma_policy,
            out,
        } => {
            let mut spec = ExperimentSpec::new(experiment);
            if let Some(s) = s {
                spec.s_values = s;
            }
            let o = &mut spec.overrides;
            o.theta = theta;
            o.dof_budget = budget;
            o.max_iterations = max_iterations;
            o.enforce_mesh_condition = enforce_mesh_condition.then_some(true);
            o.space = space;
            o.gamma_policy = gamma_policy;
            let report = run_experiment(&spec, &out)?;
            for (run, row) in report.runs.iter().zip(&report.summary) {
                println!(
                    "s={} stop={} iterations={} rate={:.4} effectivity={:.3} (tail {:.3}) -> {}",
                    row.s,
                    row.stop,
                    row.iterations,
                    row.rate_error,
                    row.mean_effectivity,
                    row.tail_mean_effectivity,
                    run.path.display()
                );
                if let Some(e) = &run.failure {
                    eprintln!("s={}: {e}", row.s);
                }
            }
            println!("summary -> {}", report.summary_path.display());
            Ok(exit_code(report.overall_stop()))
        }
        Command::Rate { input, window } => {
            let records = read_records(&input)?;
            let rate = estimate_rate_by(&records, window, |r| r.error)?;
            println!("error rate: {rate:.6}");
            if let Ok(r) = estimate_rate_by(&records, window, |r| r.estimator) {
                println!("estimator rate: {r:.6}");
            }
            if let Ok(r) = estimate_rate_by(&records, window, |r| r.tau) {
                println!("tau rate: {r:.6}");
            }
            println!(
                "mean effectivity: {:.4} (last {window}: {:.4})",
                mean_effectivity(&records, None),
                mean_effectivity(&records, Some(window))
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpMesh { config, iter, indicators } => {
            let plan = RunFile::load(&config)?.plan()?;
            let dump = dump_mesh(&plan, iter)?;
            print!("{}", dump.text);
            if let Some(path) = indicators {
                write_indicators(&path, &dump.indicators)?;
            }
            eprintln!(
                "iteration {}: {} base elements, {} cells, {} dofs",
                dump.record.iter, dump.record.n_base_elems, dump.record.n_cyl_cells, dump.record.dofs
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    configure_threads_from_env();
    // Usage errors exit with 1; status 2 is reserved for budget stops.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
