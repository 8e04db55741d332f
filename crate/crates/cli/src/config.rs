//! Experiment configuration: a TOML file with `[instance]`, `[network]`,
//! `[algorithm]` and `[output]` sections. Every field has a default, and the
//! resolved config is echoed into each run's sidecar.

use std::path::{Path, PathBuf};

use dpda::dpda_static::DEFAULT_SAFETY;
use dpda::io::instance_from_json;
use dpda::*;
use serde::{Deserialize, Serialize};
use std::result::Result;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    pub network: NetworkSpec,
    pub algorithm: AlgorithmSpec,
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Ellipsoid,
    ClassoI,
    ClassoIi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub family: Family,
    /// Instance file from `dpda generate`; overrides the fields below.
    pub file: Option<PathBuf>,
    pub n: usize,
    /// Rows per agent (C-LASSO only).
    pub m: usize,
    pub nodes: usize,
    pub lambda: f64,
    /// Ball radius `D` (ellipsoid only).
    pub radius: f64,
    pub seed: u64,
    /// Attach a centralized reference solution when generating.
    pub oracle: bool,
    pub oracle_tolerance: f64,
    pub oracle_max_iters: usize,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            family: Family::ClassoI,
            file: None,
            n: 20,
            m: 22,
            nodes: 10,
            lambda: 0.05,
            radius: 5.0,
            seed: 1,
            oracle: true,
            oracle_tolerance: 1e-9,
            oracle_max_iters: 500_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    SmallWorld,
    Complete,
    Cycle,
    Path,
    PaperDirected,
    EdgeList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub edges: usize,
    pub seed: u64,
    pub edge_list: Option<PathBuf>,
    /// Sample a time-varying plan from the base graph.
    pub time_varying: bool,
    pub window: usize,
    pub sample_fraction: f64,
    pub base_first: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            topology: Topology::SmallWorld,
            edges: 45,
            seed: 1,
            edge_list: None,
            time_varying: false,
            window: 5,
            sample_fraction: 0.8,
            base_first: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmName {
    Dpda,
    DpdaTv,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BChoice {
    Auto,
    AffineZero,
    Oracle,
    Heuristic,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Logarithmic,
    Polynomial,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: AlgorithmName,
    pub iterations: usize,
    /// Unset means the family default.
    pub gamma0: Option<f64>,
    pub delta: Option<f64>,
    /// `auto` picks `affine-zero` for affine constraints, else `oracle` when a
    /// reference exists, else `heuristic`.
    pub b_policy: BChoice,
    pub b_value: f64,
    pub safety_factor: f64,
    pub exact_averaging: bool,
    pub schedule: ScheduleKind,
    pub schedule_c: f64,
    pub varsigma: f64,
    pub schedule_p: f64,
    pub schedule_q: usize,
    pub exact_shadow: bool,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        AlgorithmSpec {
            name: AlgorithmName::Dpda,
            iterations: 2000,
            gamma0: None,
            delta: None,
            b_policy: BChoice::Auto,
            b_value: 0.0,
            safety_factor: DEFAULT_SAFETY,
            exact_averaging: false,
            schedule: ScheduleKind::Logarithmic,
            schedule_c: 0.0,
            varsigma: (-1f64).exp(),
            schedule_p: 2.0,
            schedule_q: 1,
            exact_shadow: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    pub stride: usize,
    pub check_conditions: bool,
    /// Stop early once the combined residual drops below this value.
    pub tolerance: Option<f64>,
    /// Write every recorded iterate so `audit` can recompute ergodic averages.
    pub save_iterates: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            path: "trace.csv".into(),
            stride: 1,
            check_conditions: true,
            tolerance: None,
            save_iterates: false,
        }
    }
}

pub const PRESETS: [&str; 4] = ["ellipsoid-static", "ellipsoid-tv-directed", "classo-i-static", "classo-ii-tv"];

pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let mut c = ExperimentConfig::default();
    match name {
        "ellipsoid-static" => {
            c.instance = InstanceSpec { family: Family::Ellipsoid, n: 20, nodes: 12, radius: 5.0, ..c.instance };
            c.network = NetworkSpec { edges: 24, ..c.network };
        }
        "ellipsoid-tv-directed" => {
            c.instance = InstanceSpec { family: Family::Ellipsoid, n: 20, nodes: 12, radius: 5.0, ..c.instance };
            c.network = NetworkSpec { topology: Topology::PaperDirected, time_varying: true, ..c.network };
            c.algorithm.name = AlgorithmName::DpdaTv;
        }
        "classo-i-static" => {}
        "classo-ii-tv" => {
            c.instance.family = Family::ClassoIi;
            c.network.time_varying = true;
            c.algorithm.name = AlgorithmName::DpdaTv;
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(c)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(m.to_string()));
        let i = &self.instance;
        if let Some(f) = &i.file {
            if !f.exists() {
                return Err(CliError::Validation(format!("instance file {} does not exist", f.display())));
            }
        }
        if let Some(f) = &self.network.edge_list {
            if !f.exists() {
                return Err(CliError::Validation(format!("edge list {} does not exist", f.display())));
            }
        }
        if self.network.topology == Topology::EdgeList && self.network.edge_list.is_none() {
            return bad("topology `edge-list` needs network.edge_list");
        }
        if i.file.is_none() && (i.n == 0 || i.m == 0 || i.nodes < 2) {
            return bad("instance needs n, m >= 1 and at least 2 nodes");
        }
        if !(i.lambda >= 0.0) || !(i.radius > 0.0) {
            return bad("lambda must be nonnegative and radius positive");
        }
        if !(i.oracle_tolerance > 0.0) || i.oracle_max_iters == 0 {
            return bad("oracle tolerance and iteration cap must be positive");
        }
        let a = &self.algorithm;
        if a.iterations == 0 && a.name != AlgorithmName::Oracle {
            return bad("algorithm.iterations must be positive");
        }
        if a.gamma0.is_some_and(|g| !(g > 0.0)) || a.delta.is_some_and(|d| !(d > 0.0)) {
            return bad("gamma0 and delta must be positive");
        }
        if !(a.safety_factor > 1.0) {
            return bad("safety_factor must exceed 1");
        }
        if a.b_policy == BChoice::User && !(a.b_value >= 0.0) {
            return bad("b_value must be nonnegative");
        }
        self.schedule().validate().map_err(CliError::from)?;
        if a.name == AlgorithmName::Dpda
            && (self.network.time_varying || self.network.topology == Topology::PaperDirected)
        {
            return bad("dpda needs a static undirected network; use dpda-tv");
        }
        if self.output.stride == 0 {
            return bad("output.stride must be positive");
        }
        if self.output.save_iterates && self.output.stride != 1 {
            return bad("save_iterates needs stride = 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> CommSchedule {
        let a = &self.algorithm;
        match a.schedule {
            ScheduleKind::Logarithmic => CommSchedule::Logarithmic { c: a.schedule_c, varsigma: a.varsigma },
            ScheduleKind::Polynomial => CommSchedule::Polynomial { p: a.schedule_p },
            ScheduleKind::Constant => CommSchedule::Constant { q: a.schedule_q },
        }
    }

    /// Loads the instance file or generates one from the spec.
    pub fn build_instance(&self) -> Result<Instance, CliError> {
        let i = &self.instance;
        let mut inst = match &i.file {
            Some(f) => load_instance(f)?,
            None => match i.family {
                Family::Ellipsoid => gen_ellipsoid_instance(i.n, i.nodes, i.radius, i.seed)?,
                Family::ClassoI => gen_classo_instance(i.n, i.m, i.nodes, i.lambda, i.seed, ClassoVariant::I)?,
                Family::ClassoIi => gen_classo_instance(i.n, i.m, i.nodes, i.lambda, i.seed, ClassoVariant::II)?,
            },
        };
        if inst.reference.is_none() && i.oracle {
            inst.reference = Some(apd_solve(&inst, i.oracle_tolerance, i.oracle_max_iters)?);
        }
        Ok(inst)
    }

    pub fn base_graph(&self, nodes: usize) -> Result<Graph, CliError> {
        let n = &self.network;
        Ok(match n.topology {
            Topology::SmallWorld => Graph::small_world(nodes, n.edges, n.seed)?,
            Topology::Complete => Graph::complete(nodes),
            Topology::Cycle => Graph::cycle(nodes)?,
            Topology::Path => Graph::path(nodes),
            Topology::PaperDirected => Graph::paper_directed(),
            Topology::EdgeList => {
                let path = n.edge_list.as_ref().expect("validated");
                Graph::from_edge_list(&read(path)?)?
            }
        })
    }

    pub fn graph_source(&self, nodes: usize) -> Result<GraphSource, CliError> {
        let base = self.base_graph(nodes)?;
        if base.node_count() != nodes {
            return Err(CliError::Validation(format!(
                "network has {} nodes but the instance has {nodes} agents",
                base.node_count()
            )));
        }
        let n = &self.network;
        Ok(if n.time_varying {
            let plan =
                TimeVaryingGraphPlan::new(base, n.window, n.sample_fraction, n.seed)?.with_base_first(n.base_first);
            GraphSource::Plan(plan)
        } else {
            GraphSource::Static(base)
        })
    }

    pub fn b_policy(&self, inst: &Instance) -> BPolicy {
        match self.algorithm.b_policy {
            BChoice::Auto if inst.is_affine() => BPolicy::AffineZero,
            BChoice::Auto if inst.reference.is_some() => BPolicy::OracleDerived,
            BChoice::Auto | BChoice::Heuristic => BPolicy::Heuristic,
            BChoice::AffineZero => BPolicy::AffineZero,
            BChoice::Oracle => BPolicy::OracleDerived,
            BChoice::User => BPolicy::User(self.algorithm.b_value),
        }
    }

    /// Family defaults with the explicit overrides applied.
    pub fn algo_params(&self, inst: &Instance, d_max: usize) -> AlgoParams {
        let policy = self.b_policy(inst);
        let mut p = match (self.algorithm.name, self.instance_family(inst)) {
            (AlgorithmName::DpdaTv, Some(Family::Ellipsoid)) => AlgoParams::ellipsoid_defaults(inst, policy),
            (AlgorithmName::DpdaTv, _) => AlgoParams::dynamic_defaults(policy),
            _ => AlgoParams::static_defaults(inst, d_max, policy),
        };
        if let Some(g) = self.algorithm.gamma0 {
            p.gamma0 = g;
        }
        if let Some(d) = self.algorithm.delta {
            p.delta = d;
        }
        p.safety_factor = self.algorithm.safety_factor;
        p
    }

    fn instance_family(&self, inst: &Instance) -> Option<Family> {
        match inst.provenance.as_ref().map(|p| p.family.as_str()) {
            Some("ellipsoid") => Some(Family::Ellipsoid),
            Some("classo_i") => Some(Family::ClassoI),
            Some("classo_ii") => Some(Family::ClassoIi),
            Some(_) => None,
            None if self.instance.file.is_none() => Some(self.instance.family),
            None => None,
        }
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn load_instance(path: &Path) -> Result<Instance, CliError> {
    Ok(instance_from_json(&read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("[algorithm]\nspeed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[algorithm]\nsafety_factor = 0.5").is_err());
        assert!(ExperimentConfig::from_toml("[network]\ntime_varying = true").is_err());
        assert!(ExperimentConfig::from_toml("[instance]\nfile = \"/no/such/file.json\"").is_err());
        assert!(ExperimentConfig::from_toml("[output]\nstride = 5\nsave_iterates = true").is_err());
    }
}
