// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dpda::io::instance_to_json;
use dpda::mixing::{decay_profile, fit_decay};
use dpda::*;
use std::result::Result;

mod audit;
mod config;

use audit::{Iterates, Sidecar, Status};
use config::{AlgorithmName, ExperimentConfig, Family};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
    Audit(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical { .. } | Error::MaxIterations { .. } | Error::DegenerateWeight { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Audit(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "dpda", version, about = "Distributed primal-dual methods for static and time-varying networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: ellipsoid-static, ellipsoid-tv-directed,
    /// classo-i-static or classo-ii-tv.
    #[arg(long)]
    preset: Option<String>,
    /// Instance file to use instead of generating one.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::from_toml(&config::read(path)?)?,
            (None, Some(name)) => config::preset(name)?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(f) = &self.instance {
            c.instance.file = Some(f.clone());
        }
        if let Some(s) = self.seed {
            c.instance.seed = s;
            c.network.seed = s;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance file, optionally with a reference solution.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
        /// Skip the centralized solve.
        #[arg(long)]
        no_oracle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write a trace CSV plus a metadata sidecar.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Trace CSV path (or the solution file for the oracle).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record the error sequences e1, e2, e3 (time-varying runs).
        #[arg(long)]
        exact_shadow: bool,
        #[arg(long)]
        exact_averaging: bool,
        #[arg(long)]
        save_iterates: bool,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Re-verify a recorded trace offline.
    Audit {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        /// Defaults to `<trace stem>.meta.json`.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Fit the geometric decay constants of the configured network.
    EstimateBeta {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 40)]
        q_max: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

fn sibling(trace: &Path, suffix: &str) -> PathBuf {
    let stem = trace.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    trace.with_file_name(format!("{stem}.{suffix}"))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn summary(inst: &Instance) -> serde_json::Value {
    serde_json::json!({
        "agents": inst.node_count(),
        "dim": inst.dim(),
        "bar_mu": inst.bar_mu,
        "ubar_mu": inst.ubar_mu,
        "bar_l": inst.bar_l,
        "l_max_f": inst.l_max_f,
        "l_max_g": inst.l_max_g,
        "c_min": inst.c_min,
        "c_max": inst.c_max,
        "delta": inst.delta,
        "oracle_kkt_residual": inst.reference.as_ref().map(|r| r.kkt_residual),
    })
}

#[allow(clippy::too_many_arguments)]
fn generate(
    cfg: &ConfigArgs,
    family: Option<Family>,
    n: Option<usize>,
    m: Option<usize>,
    nodes: Option<usize>,
    lambda: Option<f64>,
    radius: Option<f64>,
    no_oracle: bool,
    out: &Path,
) -> Result<(), CliError> {
    let mut c = cfg.load()?;
    let spec = &mut c.instance;
    if let Some(f) = family {
        spec.family = f;
    }
    spec.n = n.unwrap_or(spec.n);
    spec.m = m.unwrap_or(spec.m);
    spec.nodes = nodes.unwrap_or(spec.nodes);
    spec.lambda = lambda.unwrap_or(spec.lambda);
    spec.radius = radius.unwrap_or(spec.radius);
    spec.oracle &= !no_oracle;
    c.validate()?;
    let inst = c.build_instance()?;
    write(out, &instance_to_json(&inst)?)?;
    println!("{}", json(&summary(&inst)));
    Ok(())
}

fn run(c: ExperimentConfig, started: Instant) -> Result<(), CliError> {
    c.validate()?;
    let inst = c.build_instance()?;
    let out = c.output.path.clone();
    if c.algorithm.name == AlgorithmName::Oracle {
        let sol = match &inst.reference {
            Some(s) => s.clone(),
            None => apd_solve(&inst, c.instance.oracle_tolerance, c.instance.oracle_max_iters)?,
        };
        write(&out, &json(&sol))?;
        println!("oracle: kkt residual {:.3e} after {} iterations", sol.kkt_residual, sol.iterations_used);
        return Ok(());
    }
    let source = c.graph_source(inst.node_count())?;
    let params = c.algo_params(&inst, source.base().max_degree());
    let opts = RunOptions {
        stride: c.output.stride,
        check_conditions: c.output.check_conditions,
        keep_snapshots: c.output.save_iterates,
        tolerance: c.output.tolerance,
    };
    let k = c.algorithm.iterations;
    let mut trace = match c.algorithm.name {
        AlgorithmName::Dpda => {
            let GraphSource::Static(g) = &source else { unreachable!("validated") };
            run_dpda(&inst, g, k, &params, None, &opts)?
        }
        _ => {
            let mode = if c.algorithm.exact_averaging { AveragingMode::Exact } else { AveragingMode::Inexact };
            let mut tv = TvOptions::new(c.schedule(), mode);
            if c.algorithm.exact_shadow {
                tv = tv.with_shadow(false);
            }
            let kind = MixingKind::for_graph(source.base());
            run_dpda_tv(&inst, source, kind, k, &params, None, tv, &opts)?
        }
    };
    if c.output.save_iterates {
        let to_vecs = |x: &[nalgebra::DVector<f64>]| x.iter().map(|b| b.as_slice().to_vec()).collect::<Vec<_>>();
        let it = Iterates {
            x: trace.records.iter_mut().map(|r| to_vecs(&r.snapshot.take().expect("kept").x)).collect(),
            final_x_bar: to_vecs(&trace.final_x_bar),
        };
        write(&sibling(&out, "iterates.json"), &serde_json::to_string(&it).expect("serializable"))?;
    }
    trace.meta.config = c.to_toml();
    write(&out, &trace.to_csv())?;
    let side = Sidecar {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
        config: c.clone(),
        meta: trace.meta.clone(),
        iterations_run: trace.records.last().map_or(0, |r| r.k),
        rounds_nominal: trace.rounds_nominal,
        rounds_actual: trace.rounds_actual,
        n_k: trace.n_k,
        nu_bound_violations: trace.nu_bound_violations,
        condition_reports: trace.condition_reports,
        condition_failures: trace.condition_failures.len(),
    };
    write(&sibling(&out, "meta.json"), &json(&side))?;
    if let Some(last) = trace.records.last() {
        println!(
            "{}: {} iterations, rel_err {}, infeasibility {:.3e}, rounds {}",
            trace.meta.algorithm,
            last.k,
            last.rel_err_last.map_or("n/a".into(), |v| format!("{v:.3e}")),
            last.infeas_ergodic,
            trace.rounds_actual
        );
    }
    if let Some(f) = trace.condition_failures.first() {
        let first = f.failures().next().map(|e| e.name.clone()).unwrap_or_default();
        return Err(CliError::Audit(format!(
            "{} step-condition reports failed, first at k={} ({first})",
            side.condition_failures, f.k
        )));
    }
    Ok(())
}

fn audit_cmd(trace: &Path, instance: &Path, sidecar: Option<PathBuf>) -> Result<(), CliError> {
    let records = RunTrace::records_from_csv(&config::read(trace)?)?;
    let side_path = sidecar.unwrap_or_else(|| sibling(trace, "meta.json"));
    let side: Sidecar =
        serde_json::from_str(&config::read(&side_path)?).map_err(|e| CliError::Validation(format!("sidecar: {e}")))?;
    let inst = config::load_instance(instance)?;
    let it_path = sibling(trace, "iterates.json");
    let iterates: Option<Iterates> = if it_path.exists() {
        Some(
            serde_json::from_str(&config::read(&it_path)?)
                .map_err(|e| CliError::Validation(format!("iterates: {e}")))?,
        )
    } else {
        None
    };
    let checks = audit::audit(&records, &side, &inst, iterates.as_ref());
    let mut failed = 0;
    for c in &checks {
        let tag = match c.status {
            Status::Pass => "pass",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::NotApplicable => "n/a ",
        };
        println!("{tag}  {:<22} {}", c.name, c.detail);
    }
    if failed > 0 {
        return Err(CliError::Audit(format!("{failed} audit checks failed")));
    }
    Ok(())
}

fn estimate_beta(cfg: &ConfigArgs, q_max: usize, trials: usize) -> Result<(), CliError> {
    let c = cfg.load()?;
    let nodes = match &c.instance.file {
        Some(f) => config::load_instance(f)?.node_count(),
        None => c.instance.nodes,
    };
    let source = c.graph_source(nodes)?;
    let kind = MixingKind::for_graph(source.base());
    let profile = decay_profile(&source, kind, q_max, trials, c.network.seed)?;
    let fit = fit_decay(&profile, nodes)?;
    println!("{}", json(&serde_json::json!({ "gamma": fit.gamma, "beta": fit.beta, "profile": profile })));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    match cli.command {
        Command::Generate { cfg, family, n, m, nodes, lambda, radius, no_oracle, out } => {
            generate(&cfg, family, n, m, nodes, lambda, radius, no_oracle, &out)
        }
        Command::Run { cfg, iterations, stride, out, exact_shadow, exact_averaging, save_iterates, print_config } => {
            let mut c = cfg.load()?;
            if let Some(k) = iterations {
                c.algorithm.iterations = k;
            }
            if let Some(s) = stride {
                c.output.stride = s;
            }
            if let Some(p) = out {
                c.output.path = p;
            }
            c.algorithm.exact_shadow |= exact_shadow;
            c.algorithm.exact_averaging |= exact_averaging;
            c.output.save_iterates |= save_iterates;
            if print_config {
                c.validate()?;
                print!("{}", c.to_toml());
                return Ok(());
            }
            run(c, started)
        }
        Command::Audit { trace, instance, sidecar } => audit_cmd(&trace, &instance, sidecar),
        Command::EstimateBeta { cfg, q_max, trials } => estimate_beta(&cfg, q_max, trials),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, msg) = match &e {
                CliError::Validation(m) => ("validation error", m),
                CliError::Numerical(m) => ("numerical failure", m),
                CliError::Audit(m) => ("audit failure", m),
            };
            eprintln!("dpda: {kind}: {msg}");
            ExitCode::from(e.code())
        }
    }
}
