//! End-to-end driver: isolate atoms, plan, and run on a fresh cluster.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, ClusterOptions, ExecutionReport};
use crate::error::{Error, Result};
use crate::ghd::{optimal_hypertree, GhdLimits};
use crate::hcube::ShareVector;
use crate::optimizer::{calibrate_beta_table, greedy_optimize, BetaTable, CostBreakdown, CostModelParams, PlanMode, QueryPlan, BETA_LADDER};
use crate::relational::{isolate_atoms, pairwise_join_oracle, Database, QuerySpec, Relation};
use crate::sampler::SampleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Adj,
    HcubeLf,
    Oracle,
}

impl Mode {
    pub fn plan_mode(self) -> Option<PlanMode> {
        match self {
            Mode::Adj => Some(PlanMode::Adj),
            Mode::HcubeLf => Some(PlanMode::HcubeLf),
            Mode::Oracle => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Adj => "adj",
            Mode::HcubeLf => "hcube-lf",
            Mode::Oracle => "oracle",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adj" => Ok(Mode::Adj),
            "hcube-lf" => Ok(Mode::HcubeLf),
            "oracle" => Ok(Mode::Oracle),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected adj, hcube-lf or oracle)"))),
        }
    }
}

/// Measured machine constants for the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Tuples per second through the simulated network.
    pub alpha: f64,
    pub beta: BetaTable,
    pub workers: usize,
}

/// Times tuple shipping on a cluster shaped by `options` and trie seeks on
/// the standard size ladder.
pub fn calibrate(options: &ClusterOptions, tuples: usize, seeks: usize) -> Result<Calibration> {
    let mut cluster = Cluster::start(options.clone())?;
    let mut alphas: Vec<f64> = (0..3).map(|_| cluster.calibrate_alpha(tuples)).collect::<Result<_>>()?;
    cluster.shutdown();
    alphas.sort_by(f64::total_cmp);
    if alphas[2] > 2.0 * alphas[0] {
        warn!("alpha varies across runs: {:.3e} .. {:.3e}", alphas[0], alphas[2]);
    }
    let beta = calibrate_beta_table(&BETA_LADDER, seeks, options.seed)?;
    Ok(Calibration {
        alpha: alphas[1],
        beta,
        workers: options.workers,
    })
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub mode: Mode,
    pub cluster: ClusterOptions,
    pub samples: SampleConfig,
    pub calibration: Calibration,
    pub limits: GhdLimits,
}

impl EngineConfig {
    pub fn params(&self) -> CostModelParams {
        CostModelParams {
            alpha: self.calibration.alpha,
            beta: self.calibration.beta.clone(),
            memory: self.cluster.memory_tuples.unwrap_or(u64::MAX / 4),
            workers: self.cluster.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub id: usize,
    pub bag: Vec<String>,
    pub atoms: Vec<String>,
}

/// Printable view of a plan with attribute and relation names resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub mode: Mode,
    pub nodes: Vec<NodeSummary>,
    pub edges: Vec<(usize, usize)>,
    pub fhw: String,
    pub candidates: Vec<String>,
    pub precomputed: Vec<String>,
    pub traversal: Vec<usize>,
    pub attribute_order: Vec<String>,
    pub share: BTreeMap<String, u32>,
    pub hypercubes: u64,
    pub estimate: CostBreakdown,
    pub baseline_estimate: CostBreakdown,
    pub evaluations: usize,
    pub fell_back: bool,
}

impl PlanSummary {
    pub fn of(plan: &QueryPlan, mode: Mode) -> Self {
        let q = &plan.query;
        let names = |set: crate::relational::AttrSet| set.iter().map(|a| q.attr_name(a).to_string()).collect();
        PlanSummary {
            mode,
            nodes: plan
                .tree
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| NodeSummary {
                    id,
                    bag: names(n.bag),
                    atoms: n.lambda.iter().map(|&i| q.atoms()[i].relation.clone()).collect(),
                })
                .collect(),
            edges: plan.tree.edges.clone(),
            fhw: plan.tree.fhw.to_string(),
            candidates: plan
                .candidates
                .iter()
                .map(|c| c.lambda.iter().map(|&i| q.atoms()[i].relation.as_str()).collect::<Vec<_>>().join("⋈"))
                .collect(),
            precomputed: plan.precompute.iter().map(|p| p.relation.clone()).collect(),
            traversal: plan.traversal.clone(),
            attribute_order: plan.ord.iter().map(|&a| q.attr_name(a).to_string()).collect(),
            share: share_by_name(q, &plan.share),
            hypercubes: plan.share.hypercubes(),
            estimate: plan.estimate,
            baseline_estimate: plan.baseline_estimate,
            evaluations: plan.evaluations,
            fell_back: plan.fell_back,
        }
    }
}

pub fn share_by_name(q: &QuerySpec, p: &ShareVector) -> BTreeMap<String, u32> {
    (0..q.num_attributes()).map(|a| (q.attr_name(a).to_string(), p.get(a))).collect()
}

pub struct RunOutcome {
    pub mode: Mode,
    pub plan: Option<PlanSummary>,
    pub report: ExecutionReport,
    pub result: Option<Relation>,
}

fn planned(q: &QuerySpec, db: &Database, cfg: &EngineConfig) -> Result<(Cluster, QueryPlan, f64)> {
    let mode = cfg
        .mode
        .plan_mode()
        .ok_or_else(|| Error::Config("the oracle mode has no plan".into()))?;
    let (iq, idb) = isolate_atoms(q, db)?;
    let mut cluster = Cluster::start(cfg.cluster.clone())?;
    cluster.load_database(&idb)?;
    let start = Instant::now();
    let tree = optimal_hypertree(&iq, cfg.limits)?;
    let plan = greedy_optimize(&iq, &idb, &tree, &cfg.params(), cfg.samples, &mut cluster, mode)?;
    let seconds = start.elapsed().as_secs_f64();
    info!(
        "planned {} in {:.3}s: precompute {:?}, p = {}",
        q.name(),
        seconds,
        plan.precompute.iter().map(|p| &p.relation).collect::<Vec<_>>(),
        plan.share
    );
    Ok((cluster, plan, seconds))
}

pub fn plan_query(q: &QuerySpec, db: &Database, cfg: &EngineConfig) -> Result<QueryPlan> {
    let (cluster, mut plan, seconds) = planned(q, db, cfg)?;
    cluster.shutdown();
    plan.estimate.optimization = seconds;
    Ok(plan)
}

pub fn run_query(q: &QuerySpec, db: &Database, cfg: &EngineConfig, materialize: bool) -> Result<RunOutcome> {
    if cfg.mode == Mode::Oracle {
        return run_oracle(q, db, materialize);
    }
    let (mut cluster, mut plan, seconds) = planned(q, db, cfg)?;
    plan.estimate.optimization = seconds;
    let (mut report, result) = cluster.execute_plan(&plan, materialize)?;
    cluster.shutdown();
    let b = report.breakdown;
    report.breakdown = CostBreakdown::measured(seconds, b.pre_computing, b.communication, b.computation);
    Ok(RunOutcome {
        mode: cfg.mode,
        plan: Some(PlanSummary::of(&plan, cfg.mode)),
        report,
        result: result.map(|r| r.renamed(q.name())),
    })
}

fn run_oracle(q: &QuerySpec, db: &Database, materialize: bool) -> Result<RunOutcome> {
    let start = Instant::now();
    let result = pairwise_join_oracle(db, q)?;
    let seconds = start.elapsed().as_secs_f64();
    let share = ShareVector::ones(q.num_attributes());
    let report = ExecutionReport {
        breakdown: CostBreakdown::measured(0.0, 0.0, 0.0, seconds),
        cardinality: result.len() as u64,
        workers: 1,
        hypercubes: 1,
        share,
        worker_results: vec![result.len() as u64],
        worker_bindings: vec![],
        level_bindings: vec![],
        pulled: BTreeMap::new(),
        precomputed: BTreeMap::new(),
    };
    Ok(RunOutcome {
        mode: Mode::Oracle,
        plan: None,
        report,
        result: materialize.then(|| result.renamed(q.name())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{bind_graph, query, random_graph, running_example};

    fn config(mode: Mode, workers: usize) -> EngineConfig {
        EngineConfig {
            mode,
            cluster: ClusterOptions::new(workers, 3),
            samples: SampleConfig::new(10_000, 3).unwrap(),
            calibration: Calibration {
                alpha: 5e6,
                beta: BetaTable::new(vec![(1_000, 2e7), (1_000_000, 5e6)]).unwrap(),
                workers,
            },
            limits: GhdLimits::default(),
        }
    }

    #[test]
    fn modes_agree_with_oracle() {
        let (q, db) = running_example();
        let oracle = pairwise_join_oracle(&db, &q).unwrap();
        for mode in [Mode::Adj, Mode::HcubeLf, Mode::Oracle] {
            let out = run_query(&q, &db, &config(mode, 3), true).unwrap();
            assert_eq!(out.report.cardinality, oracle.len() as u64, "{mode:?}");
            assert_eq!(out.result.unwrap(), oracle.renamed(q.name()));
            let b = out.report.breakdown;
            assert!((b.total - (b.optimization + b.pre_computing + b.communication + b.computation)).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_relations_are_isolated() {
        let q = query("Q1").unwrap();
        let g = random_graph(40, 200, 2);
        let db: Database = [g.renamed("E")].into_iter().collect();
        let q = q
            .with_atoms(q.name(), q.atoms().iter().map(|a| crate::relational::Atom { relation: "E".into(), vars: a.vars.clone() }).collect())
            .unwrap();
        let truth = pairwise_join_oracle(&bind_graph(&query("Q1").unwrap(), &g), &query("Q1").unwrap()).unwrap();
        let out = run_query(&q, &db, &config(Mode::Adj, 2), false).unwrap();
        assert_eq!(out.report.cardinality, truth.len() as u64);
        assert_eq!(out.report.pulled.keys().cloned().collect::<Vec<_>>(), vec!["E#0", "E#1", "E#2"]);
    }

    #[test]
    fn baseline_mode_never_precomputes() {
        let (q, db) = running_example();
        let plan = plan_query(&q, &db, &config(Mode::HcubeLf, 4)).unwrap();
        assert!(plan.precompute.is_empty());
        let summary = PlanSummary::of(&plan, Mode::HcubeLf);
        assert_eq!(summary.candidates, vec!["R2⋈R3", "R4⋈R5"]);
        assert_eq!(summary.share.len(), 5);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("hcube-lf".parse::<Mode>().unwrap(), Mode::HcubeLf);
        assert!("spark".parse::<Mode>().is_err());
    }
}
