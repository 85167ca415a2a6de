use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualcov::harness::{
    self, emit_outputs, run_comparison, to_json_text, ExperimentConfig, FormulationTag, Outcome, PolicyFile,
};
use dualcov::saa_nlp::Formulation;
use dualcov::scenario::draw_scenarios;
use dualcov::solver::{write_iteration_log, SolverStatus, WarmStart};
use dualcov::steering::{solve_formulation, SteeringSpec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dualcov", version, about = "Adaptive dual covariance steering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one formulation and write its policy.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "dual")]
        formulation: Tag,
    },
    /// Evaluate a policy file on fresh scenarios.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Solve and evaluate every configured formulation on shared scenarios.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Restrict the run to these formulations.
        #[arg(long, value_enum, value_delimiter = ',')]
        formulation: Vec<Tag>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Design seed; the evaluation seed becomes seed + 1.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    design_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    sigma_f_theta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tag {
    Ce,
    Robust,
    Dual,
    Fullinfo,
}

impl From<Tag> for FormulationTag {
    fn from(t: Tag) -> Self {
        match t {
            Tag::Ce => FormulationTag::Ce,
            Tag::Robust => FormulationTag::Robust,
            Tag::Dual => FormulationTag::Dual,
            Tag::Fullinfo => FormulationTag::Fullinfo,
        }
    }
}

impl Common {
    fn config(&self) -> dualcov::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.design.seed = seed;
            cfg.evaluation.seed = seed.wrapping_add(1);
        }
        if let Some(m) = self.design_samples {
            cfg.design.samples = m;
        }
        if let Some(m) = self.eval_samples {
            cfg.evaluation.samples = m;
        }
        if let Some(t) = self.sigma_f_theta {
            cfg.sigma_f_theta = t;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> dualcov::Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| dualcov::Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Solves `tag`, running the earlier links of the warm-start chain first.
fn solve(spec: &SteeringSpec, cfg: &ExperimentConfig, tag: FormulationTag) -> dualcov::Result<dualcov::steering::Solution> {
    let design = spec.design_scenarios()?;
    let cold = spec.cold_start()?;
    let none = WarmStart::default();
    if tag == FormulationTag::Fullinfo {
        let p = cfg.full_information_parameter(spec);
        return solve_formulation(spec, &design, Formulation::FullInformation(p), &cold, &none);
    }
    let ce = solve_formulation(spec, &design, Formulation::CertaintyEquivalence, &cold, &none)?;
    if tag == FormulationTag::Ce {
        return Ok(ce);
    }
    let start = if ce.is_optimal() { ce.result.z.clone() } else { cold };
    let robust = solve_formulation(spec, &design, Formulation::StaticRobust, &start, &none)?;
    if tag == FormulationTag::Robust {
        return Ok(robust);
    }
    let (start, warm) = if robust.is_optimal() {
        (robust.result.z.clone(), robust.warm_start())
    } else {
        (start, none)
    };
    solve_formulation(spec, &design, Formulation::AdaptiveDual, &start, &warm)
}

fn run(cli: Cli) -> dualcov::Result<ExitCode> {
    match cli.command {
        Command::Solve { common, formulation } => {
            let cfg = common.config()?;
            let spec = cfg.steering_spec()?;
            let tag = FormulationTag::from(formulation);
            let sol = solve(&spec, &cfg, tag)?;
            create_dir(&cfg.output_dir)?;
            let name = tag.as_str();
            PolicyFile::new(tag, &spec.layout(), &sol.result.z)?.write(&cfg.output_dir.join(format!("policy_{name}.json")))?;
            write_iteration_log(&cfg.output_dir.join(format!("solver_{name}.log")), &sol.result)?;
            let r = &sol.result;
            println!(
                "{name}: status={} objective={:.6} violation={:.2e} outer={} inner={} seconds={:.1}",
                r.status.as_str(),
                r.objective,
                r.max_violation,
                r.outer_iterations,
                r.inner_iterations,
                r.seconds
            );
            Ok(if r.status == SolverStatus::Infeasible {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Evaluate { common, policy } => {
            let cfg = common.config()?;
            let spec = cfg.steering_spec()?;
            let file = PolicyFile::read(&policy)?;
            if file.layout() != spec.layout() {
                return Err(dualcov::Error::Config(format!(
                    "{}: policy dimensions do not match the configured system",
                    policy.display()
                )));
            }
            let (pol, _) = file.unpack()?;
            let scen = draw_scenarios(&spec.sys, &spec.prior, &spec.init, spec.noise, cfg.evaluation.samples, cfg.evaluation.seed)?;
            let ev = harness::evaluate_on(&spec, &pol, &scen, cfg.epsilon(&spec.target))?;
            let summary = json!({
                "formulation": file.formulation.as_str(),
                "cost_mean": ev.cost_mean,
                "cost_std_error": ev.cost_std_error,
                "term_mean_err": ev.term_mean_err.as_slice(),
                "term_cov": dualcov::linalg::matrix_to_rows(&ev.term_cov),
                "cov_excess": ev.cov_excess,
                "epsilon": ev.epsilon,
                "mean_ok": ev.mean_ok,
                "cov_ok": ev.cov_ok,
                "satisfied": ev.satisfied(),
            });
            let text = to_json_text(&summary)?;
            create_dir(&cfg.output_dir)?;
            let name = file.formulation.as_str();
            let path = cfg.output_dir.join(format!("evaluation_{name}.json"));
            std::fs::write(&path, &text).map_err(|source| dualcov::Error::Io { path, source })?;
            let trials = cfg.output_dir.join(format!("trials_{name}.csv"));
            let wrap = |source| dualcov::Error::Csv {
                path: trials.clone(),
                source,
            };
            let mut out = csv::Writer::from_path(&trials).map_err(wrap)?;
            out.write_record(harness::trial_header(spec.sys.n_x(), spec.sys.n_p())).map_err(wrap)?;
            harness::write_trial_rows(&mut out, file.formulation, &ev).map_err(wrap)?;
            out.flush().map_err(|source| dualcov::Error::Io {
                path: trials.clone(),
                source,
            })?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { common, formulation } => {
            let mut cfg = common.config()?;
            if !formulation.is_empty() {
                cfg.formulations = formulation.into_iter().map(FormulationTag::from).collect();
            }
            let report = run_comparison(&cfg)?;
            emit_outputs(&report, &cfg.output_dir)?;
            println!("{:<10} {:<16} {:>12} {:>10} {:>10}", "formulation", "status", "cost_mean", "cost_norm", "satisfied");
            for f in &report.formulations {
                let fmt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<10} {:<16} {:>12} {:>10} {:>10}",
                    f.tag.as_str(),
                    f.status(),
                    fmt(f.evaluation.as_ref().map(|e| e.cost_mean)),
                    fmt(f.cost_norm),
                    f.evaluation.as_ref().is_some_and(|e| e.satisfied())
                );
                if let Outcome::Failed(msg) = &f.outcome {
                    eprintln!("{}: {msg}", f.tag.as_str());
                }
            }
            println!("results written to {}", cfg.output_dir.display());
            Ok(if report.any_infeasible() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 1; 2 is reserved for infeasible formulations.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
