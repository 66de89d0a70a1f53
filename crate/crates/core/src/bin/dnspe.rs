use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dnspe::harness::{
    run_experiment, summarize, to_db, write_outputs, Experiment, ExperimentConfig, Metric, Summary,
};
use dnspe::Error;

const CR_DEFAULT: &str = include_str!("../../configs/cr.toml");

#[derive(Parser)]
#[command(
    name = "dnspe",
    version,
    about = "Diffusion LMS for node-specific parameter estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check topology, clusters and combination policies.
    Validate(Common),
    /// Closed-form mean and mean-square steady state.
    Theory(Common),
    /// Monte Carlo simulation only.
    Simulate(Common),
    /// Simulation and theory side by side.
    Compare(Common),
    /// Spectrum-sensing example (built-in configuration unless --config).
    CrDemo(CrArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory for CSV, JSON and SVG files.
    #[arg(long, env = "DNSPE_OUTPUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fourth_order: Option<bool>,
    #[arg(long)]
    mem_cap: Option<usize>,
}

#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CrArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

enum Failure {
    Invalid(String),
    Unstable(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Dimension { .. } => {
                Failure::Invalid(e.to_string())
            }
            Error::MeanSquareUnstable { .. } => Failure::Unstable(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn apply(mut cfg: ExperimentConfig, o: &Overrides) -> Result<ExperimentConfig, Error> {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.runs {
        cfg.runs = v;
    }
    if let Some(v) = o.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = &o.out {
        cfg.output_dir = Some(v.clone());
    }
    if let Some(v) = o.fourth_order {
        cfg.fourth_order = v;
    }
    if let Some(v) = o.mem_cap {
        cfg.mem_cap = v;
    }
    cfg.check()?;
    Ok(cfg)
}

fn build(cfg: ExperimentConfig) -> Result<Experiment, Failure> {
    let exp = Experiment::build(cfg)?;
    let v = exp.validate();
    for w in &v.step_warnings {
        eprintln!("warning: {w}");
    }
    if !v.is_valid() {
        let mut msg = v.topology.to_string();
        for (name, violations) in &v.policies {
            for p in violations {
                msg.push_str(&format!("\n{name}: {p}"));
            }
        }
        return Err(Failure::Invalid(msg));
    }
    Ok(exp)
}

fn db(x: f64) -> String {
    format!("{:8.2}", to_db(x))
}

fn print_theory(summary: &Summary) {
    for a in &summary.algorithms {
        match (&a.theory, &a.theory_error) {
            (Some(t), _) => println!(
                "{:<12} theory  MSD {} dB  EMSE {} dB  rho(B) {:.6}  rho(F) {:.6}",
                a.name,
                db(t.msd_net),
                db(t.emse_net),
                t.rho_mean,
                t.rho_f
            ),
            (None, Some(e)) => println!("{:<12} theory  {e}", a.name),
            (None, None) => {}
        }
    }
}

fn print_steady(summary: &Summary) {
    for a in &summary.algorithms {
        let get = |m: Metric| {
            a.steady
                .iter()
                .find(|s| s.metric == m && s.scope == "net")
                .map_or(f64::NAN, |s| s.value)
        };
        print!(
            "{:<12} sim     MSD {} dB  EMSE {} dB  runs {}",
            a.name,
            db(get(Metric::Msd)),
            db(get(Metric::Emse)),
            a.runs_used
        );
        if !a.diverged_runs.is_empty() {
            print!("  diverged {}", a.diverged_runs.len());
        }
        if let Some(g) = a.max_abs_gap() {
            print!("  max |gap| {g:.2} dB");
        }
        println!();
    }
}

fn simulate(exp: &Experiment, with_theory: bool) -> Result<(), Failure> {
    let theory = if with_theory {
        exp.theory()
    } else {
        Vec::new()
    };
    let result = run_experiment(exp)?;
    let summary = summarize(exp, &result, theory);
    if with_theory {
        print_theory(&summary);
    }
    print_steady(&summary);
    if let Some(dir) = &exp.config.output_dir {
        for p in write_outputs(dir, &result, &summary, exp.config.log_stride())? {
            eprintln!("wrote {}", p.display());
        }
    }
    if result.any_diverged() {
        return Err(Failure::Unstable("at least one run diverged".into()));
    }
    if summary.algorithms.iter().any(|a| a.theory_error.is_some()) {
        return Err(Failure::Unstable(
            "theory unavailable for at least one algorithm".into(),
        ));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate(c) => {
            let cfg = apply(ExperimentConfig::load(&c.config)?, &c.overrides)?;
            build(cfg)?;
            println!("ok");
            Ok(())
        }
        Command::Theory(c) => {
            let exp = build(apply(ExperimentConfig::load(&c.config)?, &c.overrides)?)?;
            let theory = exp.theory();
            if theory.is_empty() {
                return Err(Failure::Invalid("theory needs synthetic data".into()));
            }
            let mut unstable = None;
            for (name, t) in &theory {
                match t {
                    Ok(t) => {
                        println!(
                            "{name:<12} MSD {} dB  EMSE {} dB  rho(B) {:.6}  rho(F) {:.6}",
                            db(t.msd_net),
                            db(t.emse_net),
                            t.rho_mean,
                            t.rho_f
                        );
                        for (k, (m, e)) in t.msd.iter().zip(&t.emse).enumerate() {
                            println!("  node {:>3}  MSD {} dB  EMSE {} dB", k + 1, db(*m), db(*e));
                        }
                    }
                    Err(e) => {
                        println!("{name:<12} {e}");
                        unstable.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            match unstable {
                Some(msg) => Err(Failure::Unstable(msg)),
                None => Ok(()),
            }
        }
        Command::Simulate(c) => {
            let exp = build(apply(ExperimentConfig::load(&c.config)?, &c.overrides)?)?;
            simulate(&exp, false)
        }
        Command::Compare(c) => {
            let exp = build(apply(ExperimentConfig::load(&c.config)?, &c.overrides)?)?;
            simulate(&exp, true)
        }
        Command::CrDemo(c) => {
            let cfg = match &c.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::from_toml(CR_DEFAULT)?,
            };
            let exp = build(apply(cfg, &c.overrides)?)?;
            simulate(&exp, false)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Unstable(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
