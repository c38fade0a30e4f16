//! Co-optimization of pre-computing, communication and computation.
//!
//! The greedy search fixes the traversal order from the last node backwards.
//! At each position it tries every node that can be removed as a leaf, with
//! and without pre-computing its sub-join, and keeps the cheapest choice.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghd::{attribute_order, candidate_relations, CandidateRelation, Hypertree};
use crate::hcube::{dup, ShareVector};
use crate::relational::{Atom, AttrSet, Database, QuerySpec, Relation, Schema};
use crate::sampler::{probe, Probe, SampleConfig, SampleExecutor};
use crate::trie::TrieIndex;

/// Trie sizes at which extension rates are measured.
pub const BETA_LADDER: [u64; 4] = [1_000, 10_000, 100_000, 1_000_000];

/// Extensions sampled below this count fall back to the pre-measured table.
pub const MIN_SAMPLED_EXTENSIONS: u64 = 100;

/// Lookups per second on tries of increasing size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaTable {
    pub points: Vec<(u64, f64)>,
}

impl BetaTable {
    pub fn new(mut points: Vec<(u64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("empty beta table".into()));
        }
        if points.iter().any(|&(s, r)| s == 0 || !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("beta table needs positive sizes and rates".into()));
        }
        points.sort_by_key(|p| p.0);
        points.dedup_by_key(|p| p.0);
        Ok(BetaTable { points })
    }

    /// Interpolates linearly in `ln(size)`, clamping outside the ladder.
    pub fn lookup(&self, size: f64) -> f64 {
        let first = self.points[0];
        let last = *self.points.last().unwrap();
        if size <= first.0 as f64 {
            return first.1;
        }
        if size >= last.0 as f64 {
            return last.1;
        }
        for w in self.points.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if size <= hi.0 as f64 {
                let x = (size.ln() - (lo.0 as f64).ln()) / ((hi.0 as f64).ln() - (lo.0 as f64).ln());
                return lo.1 + x * (hi.1 - lo.1);
            }
        }
        last.1
    }
}

/// Times `seeks` random probes on a random binary trie of each size.
pub fn calibrate_beta_table(sizes: &[u64], seeks: usize, seed: u64) -> Result<BetaTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = Schema::from_names(&["x", "y"])?;
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let keys = (size / 16).max(1);
        let data: Vec<u64> = (0..size)
            .flat_map(|_| [rng.gen_range(0..keys), rng.gen_range(0..4 * size)])
            .collect();
        let trie = TrieIndex::build(&Relation::from_flat("beta", schema.clone(), data)?, &[0, 1])?;
        let probes: Vec<(u64, u64)> = (0..seeks)
            .map(|_| (rng.gen_range(0..keys), rng.gen_range(0..4 * size)))
            .collect();
        let start = Instant::now();
        let mut hits = 0u64;
        for &(x, y) in &probes {
            let mut c = trie.cursor();
            c.open();
            if c.seek(x) == Some(x) {
                c.open();
                if c.seek(y).is_some() {
                    hits += 1;
                }
            }
        }
        std::hint::black_box(hits);
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        points.push((size, seeks as f64 / secs));
    }
    BetaTable::new(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Tuples shuffled per second, cluster-wide.
    pub alpha: f64,
    pub beta: BetaTable,
    /// Per-worker budget in tuples.
    pub memory: u64,
    pub workers: usize,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.memory == 0 || self.workers == 0 {
            return Err(Error::Config("alpha, memory and workers must be positive".into()));
        }
        Ok(())
    }
}

/// Seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub optimization: f64,
    pub pre_computing: f64,
    pub communication: f64,
    pub computation: f64,
    pub total: f64,
}

impl CostBreakdown {
    /// Model estimate: optimization is reported but not part of the total.
    pub fn estimated(optimization: f64, pre_computing: f64, communication: f64, computation: f64) -> Self {
        CostBreakdown {
            optimization,
            pre_computing,
            communication,
            computation,
            total: pre_computing + communication + computation,
        }
    }

    pub fn measured(optimization: f64, pre_computing: f64, communication: f64, computation: f64) -> Self {
        CostBreakdown {
            optimization,
            pre_computing,
            communication,
            computation,
            total: optimization + pre_computing + communication + computation,
        }
    }
}

/// A relation to shuffle: its attributes and (estimated) size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizedRelation {
    pub attrs: AttrSet,
    pub size: f64,
}

/// `Σ |R|·dup(R, p)`.
pub fn shipped_tuples(rels: &[SizedRelation], all: AttrSet, p: &ShareVector) -> f64 {
    rels.iter().map(|r| r.size * dup(r.attrs, all, p) as f64).sum()
}

/// Average tuples one worker receives: per-hypercube load times hypercubes per worker.
pub fn worker_load(rels: &[SizedRelation], p: &ShareVector, workers: usize) -> f64 {
    let per_cube: f64 = rels.iter().map(|r| r.size / p.product_over(r.attrs) as f64).sum();
    per_cube * p.hypercubes().div_ceil(workers as u64) as f64
}

/// Integer share vector (length `n`, 1 outside `all`) minimizing shipped
/// tuples subject to `N ≤ Π p ≤ 8N` and the memory budget. Ties go to fewer
/// hypercubes, then to the lexicographically smallest vector.
pub fn optimize_share(rels: &[SizedRelation], all: AttrSet, n: usize, params: &CostModelParams) -> Result<ShareVector> {
    params.validate()?;
    let attrs: Vec<usize> = all.iter().collect();
    let lo = params.workers as u64;
    let hi = 8 * lo;
    let mut p = vec![1u32; n];
    let mut best: Option<(f64, u64, Vec<u32>)> = None;
    fn rec(
        i: usize,
        prod: u64,
        attrs: &[usize],
        p: &mut Vec<u32>,
        bounds: (u64, u64),
        visit: &mut dyn FnMut(&[u32], u64),
    ) {
        if i == attrs.len() {
            if prod >= bounds.0 {
                visit(p, prod);
            }
            return;
        }
        let mut v = 1u64;
        while prod * v <= bounds.1 {
            p[attrs[i]] = v as u32;
            rec(i + 1, prod * v, attrs, p, bounds, visit);
            v += 1;
        }
        p[attrs[i]] = 1;
    }
    rec(0, 1, &attrs, &mut p, (lo, hi), &mut |p, prod| {
        let sv = ShareVector::new(p.to_vec()).unwrap();
        if worker_load(rels, &sv, params.workers) > params.memory as f64 {
            return;
        }
        let cost = shipped_tuples(rels, all, &sv);
        let better = match &best {
            None => true,
            Some((c, q, v)) => (cost, prod, p) < (*c, *q, v.as_slice()),
        };
        if better {
            best = Some((cost, prod, p.to_vec()));
        }
    });
    match best {
        Some((_, _, v)) => ShareVector::new(v),
        None => Err(Error::Infeasible(format!(
            "no share vector with {}..={} hypercubes fits a per-worker budget of {} tuples; \
             raise the worker count or the memory budget",
            lo, hi, params.memory
        ))),
    }
}

/// `Σ |R|·dup(R, p) / α`.
pub fn cost_comm(rels: &[SizedRelation], all: AttrSet, p: &ShareVector, alpha: f64) -> f64 {
    shipped_tuples(rels, all, p) / alpha
}

/// `|T^{v_{i-1}}| / (β^i · N*)`.
pub fn cost_comp_step(bindings: f64, beta: f64, workers: usize) -> f64 {
    bindings / (beta * workers as f64)
}

/// How plans are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    /// Co-optimization: candidates may be pre-computed.
    Adj,
    /// Communication-first baseline: the same search without pre-computing.
    HcubeLf,
}

/// Stage-one work for one pre-computed node.
#[derive(Debug, Clone)]
pub struct PrecomputePlan {
    pub node: usize,
    pub relation: String,
    /// Atom indices of the original query.
    pub atoms: Vec<usize>,
    /// The join of those atoms with its own attribute registry.
    pub subquery: QuerySpec,
    /// Order and shares in the sub-query's registry.
    pub ord: Vec<usize>,
    pub share: ShareVector,
    pub estimated_size: f64,
}

#[derive(Debug, Clone)]
pub struct QueryPlan {
    pub mode: PlanMode,
    pub query: QuerySpec,
    pub tree: Hypertree,
    pub candidates: Vec<CandidateRelation>,
    pub precompute: Vec<PrecomputePlan>,
    /// Result-equivalent query over pre-computed and untouched relations,
    /// sharing the original attribute registry.
    pub rewritten: QuerySpec,
    pub traversal: Vec<usize>,
    pub ord: Vec<usize>,
    pub share: ShareVector,
    pub estimate: CostBreakdown,
    /// Estimate of the plan with the same traversal and nothing pre-computed.
    pub baseline_estimate: CostBreakdown,
    /// Cost-model evaluations made by the search.
    pub evaluations: usize,
    /// Greedy choice replaced by the no-precompute plan for costing more.
    pub fell_back: bool,
    pub sampling_seconds: f64,
}

impl QueryPlan {
    pub fn precomputed_nodes(&self) -> Vec<usize> {
        self.precompute.iter().map(|p| p.node).collect()
    }
}

/// Name of the relation holding the join of `atoms`.
pub fn precomputed_name(q: &QuerySpec, atoms: &[usize]) -> String {
    atoms
        .iter()
        .map(|&i| q.atoms()[i].relation.as_str())
        .collect::<Vec<_>>()
        .join("⋈")
}

/// Sub-query joining the given atoms; attributes keep their names.
pub fn subquery_of(q: &QuerySpec, atoms: &[usize]) -> Result<QuerySpec> {
    let spec: Vec<(String, Vec<String>)> = atoms
        .iter()
        .map(|&i| {
            let a = &q.atoms()[i];
            (a.relation.clone(), a.vars.iter().map(|&v| q.attr_name(v).to_string()).collect())
        })
        .collect();
    if spec.len() < 2 {
        return Err(Error::InvalidQuery("a pre-computed relation needs at least two atoms".into()));
    }
    QuerySpec::from_atoms(precomputed_name(q, atoms), &spec)
}

/// Statistics and memo tables shared by every cost evaluation of one search.
pub struct Planner<'a> {
    pub q: &'a QuerySpec,
    pub db: &'a Database,
    pub tree: &'a Hypertree,
    pub params: &'a CostModelParams,
    pub cfg: SampleConfig,
    /// Within-node ranking (estimated distinct values), by attribute.
    pub rank: Vec<u64>,
    exec: &'a mut dyn SampleExecutor,
    sizes: Vec<f64>,
    probes: HashMap<(AttrSet, AttrSet), Probe>,
    subs: HashMap<Vec<usize>, (QuerySpec, Probe)>,
    comms: HashMap<u64, Option<(f64, ShareVector)>>,
    pub evaluations: usize,
    pub sampling_seconds: f64,
}

impl<'a> Planner<'a> {
    pub fn new(
        q: &'a QuerySpec,
        db: &'a Database,
        tree: &'a Hypertree,
        params: &'a CostModelParams,
        cfg: SampleConfig,
        rank: Vec<u64>,
        exec: &'a mut dyn SampleExecutor,
    ) -> Result<Self> {
        params.validate()?;
        let sizes = db.atom_relations(q)?.iter().map(|r| r.len() as f64).collect();
        Ok(Planner {
            q,
            db,
            tree,
            params,
            cfg,
            rank,
            exec,
            sizes,
            probes: HashMap::new(),
            subs: HashMap::new(),
            comms: HashMap::new(),
            evaluations: 0,
            sampling_seconds: 0.0,
        })
    }

    fn is_candidate(&self, v: usize) -> bool {
        let l = self.tree.nodes[v].lambda.len();
        l >= 2 && l < self.q.atoms().len()
    }

    fn probe(&mut self, before: AttrSet, fresh: AttrSet) -> Result<Probe> {
        let key = (before, fresh.minus(before));
        if let Some(p) = self.probes.get(&key) {
            return Ok(p.clone());
        }
        let start = Instant::now();
        let p = probe(self.q, self.db, &self.cfg, &self.rank, key.0, key.1, self.exec)?;
        self.sampling_seconds += start.elapsed().as_secs_f64();
        self.probes.insert(key, p.clone());
        Ok(p)
    }

    /// Sampled statistics of a sub-join over its own registry.
    fn subjoin(&mut self, atoms: &[usize]) -> Result<(QuerySpec, Probe)> {
        if let Some(s) = self.subs.get(atoms) {
            return Ok(s.clone());
        }
        let sub = subquery_of(self.q, atoms)?;
        let rank: Vec<u64> = sub
            .attributes()
            .iter()
            .map(|a| self.rank[self.q.attr_index(&a.name).unwrap()])
            .collect();
        let start = Instant::now();
        let p = probe(&sub, self.db, &self.cfg, &rank, AttrSet::EMPTY, sub.all_attrs(), self.exec)?;
        self.sampling_seconds += start.elapsed().as_secs_f64();
        self.subs.insert(atoms.to_vec(), (sub.clone(), p.clone()));
        Ok((sub, p))
    }

    /// Estimated size of the join of a node's atoms.
    pub fn node_size(&mut self, v: usize) -> Result<f64> {
        let lambda = self.tree.nodes[v].lambda.clone();
        Ok(self.subjoin(&lambda)?.1.count_after)
    }

    fn mean_atom_size(&self, v: usize) -> f64 {
        let l = &self.tree.nodes[v].lambda;
        l.iter().map(|&i| self.sizes[i]).sum::<f64>() / l.len() as f64
    }

    /// Relations shipped in the final round when the nodes in `c` are pre-computed.
    fn shipped(&mut self, c: u64) -> Result<Vec<SizedRelation>> {
        let mut rels = Vec::new();
        for (v, node) in self.tree.nodes.iter().enumerate() {
            if c & (1 << v) != 0 {
                rels.push(SizedRelation {
                    attrs: node.bag,
                    size: self.node_size(v)?,
                });
            } else {
                for &i in &node.lambda {
                    rels.push(SizedRelation {
                        attrs: self.q.atoms()[i].attr_set(),
                        size: self.sizes[i],
                    });
                }
            }
        }
        Ok(rels)
    }

    /// `cost_C(C)` with its optimal share vector; `None` when infeasible.
    pub fn comm(&mut self, c: u64) -> Result<Option<(f64, ShareVector)>> {
        if let Some(r) = self.comms.get(&c) {
            return Ok(r.clone());
        }
        let rels = self.shipped(c)?;
        let all = self.q.all_attrs();
        let r = match optimize_share(&rels, all, self.q.num_attributes(), self.params) {
            Ok(p) => Some((cost_comm(&rels, all, &p, self.params.alpha), p)),
            Err(Error::Infeasible(_)) => None,
            Err(e) => return Err(e),
        };
        self.comms.insert(c, r.clone());
        Ok(r)
    }

    /// `cost_M(R_v)`: shuffling λ(v) under its own shares plus computing the sub-join.
    pub fn cost_pre(&mut self, v: usize) -> Result<f64> {
        if !self.is_candidate(v) {
            return Ok(0.0);
        }
        let lambda = self.tree.nodes[v].lambda.clone();
        self.subjoin_cost(&lambda)
    }

    /// Shuffle plus computation cost of joining `atoms` on their own.
    pub fn subjoin_cost(&mut self, atoms: &[usize]) -> Result<f64> {
        let rels: Vec<SizedRelation> = atoms
            .iter()
            .map(|&i| SizedRelation {
                attrs: self.q.atoms()[i].attr_set(),
                size: self.sizes[i],
            })
            .collect();
        let bag = rels.iter().fold(AttrSet::EMPTY, |s, r| s.union(r.attrs));
        let p = optimize_share(&rels, bag, self.q.num_attributes(), self.params)?;
        let comm = cost_comm(&rels, bag, &p, self.params.alpha);
        let mean = rels.iter().map(|r| r.size).sum::<f64>() / rels.len() as f64;
        let (_, sp) = self.subjoin(atoms)?;
        let beta = match sp.beta {
            Some(b) if sp.extensions >= MIN_SAMPLED_EXTENSIONS => b,
            _ => self.params.beta.lookup(mean) / atoms.len() as f64,
        };
        Ok(comm + cost_comp_step(1.0, beta, self.params.workers))
    }

    /// `cost_E^i`: extending node `v` after every node in `before_nodes`.
    pub fn step(&mut self, before_nodes: u64, v: usize, precomputed: bool) -> Result<f64> {
        let before = self.tree.bag_union(before_nodes);
        let fresh = self.tree.nodes[v].bag.minus(before);
        if fresh.is_empty() {
            return Ok(0.0);
        }
        let p = self.probe(before, fresh)?;
        let beta = if precomputed {
            let size = self.node_size(v)?;
            self.params.beta.lookup(size)
        } else {
            match p.beta {
                Some(b) if p.extensions >= MIN_SAMPLED_EXTENSIONS => b,
                _ => {
                    log::debug!("node {v}: {} sampled extensions, using table rate", p.extensions);
                    self.params.beta.lookup(self.mean_atom_size(v)) / self.tree.nodes[v].lambda.len() as f64
                }
            }
        };
        Ok(cost_comp_step(p.count_before, beta, self.params.workers))
    }

    /// Estimated costs of a fixed traversal and pre-compute set.
    pub fn estimate(&mut self, traversal: &[usize], c: u64) -> Result<Option<(CostBreakdown, ShareVector)>> {
        let Some((comm, p)) = self.comm(c)? else {
            return Ok(None);
        };
        let mut pre = 0.0;
        for v in (0..self.tree.len()).filter(|v| c & (1 << v) != 0) {
            pre += self.cost_pre(v)?;
        }
        let mut comp = 0.0;
        let mut before = 0u64;
        for &v in traversal {
            comp += self.step(before, v, c & (1 << v) != 0)?;
            before |= 1 << v;
        }
        Ok(Some((CostBreakdown::estimated(0.0, pre, comm, comp), p)))
    }

    /// Algorithm 2 over the hypertree; `allow_precompute = false` gives the
    /// communication-first baseline.
    pub fn greedy(&mut self, allow_precompute: bool) -> Result<(Vec<usize>, u64)> {
        let n = self.tree.len();
        if n == 0 {
            return Err(Error::InvalidQuery("empty hypertree".into()));
        }
        let mut remaining: u64 = (1u64 << n) - 1;
        let mut c = 0u64;
        let mut reversed = Vec::with_capacity(n);
        while remaining != 0 {
            let mut best: Option<(f64, u64, usize)> = None;
            for v in (0..n).filter(|v| remaining & (1 << v) != 0) {
                let rest = remaining & !(1 << v);
                if !self.tree.is_connected(rest) {
                    continue;
                }
                self.evaluations += 1;
                let comm = self.comm(c)?.ok_or_else(|| {
                    Error::Infeasible("no feasible share vector for the plan without pre-computing".into())
                })?;
                let cost1 = comm.0 + self.step(rest, v, false)?;
                if best.map_or(true, |b| cost1 < b.0) {
                    best = Some((cost1, c, v));
                }
                if allow_precompute && self.is_candidate(v) {
                    self.evaluations += 1;
                    let c2 = c | (1 << v);
                    if let Some((comm2, _)) = self.comm(c2)? {
                        let cost2 = self.cost_pre(v)? + comm2 + self.step(rest, v, true)?;
                        if best.map_or(true, |b| cost2 < b.0) {
                            best = Some((cost2, c2, v));
                        }
                    }
                }
            }
            let (_, c_star, v_star) = best.ok_or_else(|| Error::InvalidQuery("hypertree is disconnected".into()))?;
            remaining &= !(1 << v_star);
            c = c_star;
            reversed.push(v_star);
        }
        reversed.reverse();
        Ok((reversed, c))
    }

    /// Turns a traversal and pre-compute set into an executable plan. With
    /// `guard`, a pre-compute set the model rates worse than pre-computing
    /// nothing is dropped.
    pub fn build_plan(&mut self, mode: PlanMode, traversal: Vec<usize>, mut c: u64, guard: bool) -> Result<QueryPlan> {
        let baseline = self
            .estimate(&traversal, 0)?
            .ok_or_else(|| Error::Infeasible("no feasible share vector for the plan without pre-computing".into()))?
            .0;
        let mut fell_back = false;
        let (mut estimate, mut share) = match self.estimate(&traversal, c)? {
            Some(e) => e,
            None if guard => {
                fell_back = true;
                c = 0;
                self.estimate(&traversal, 0)?.unwrap()
            }
            None => return Err(Error::Infeasible("no feasible share vector with the requested pre-computes".into())),
        };
        if guard && estimate.total > baseline.total {
            log::info!(
                "pre-computing raises the estimate ({:.3e}s > {:.3e}s); using the plain plan",
                estimate.total,
                baseline.total
            );
            fell_back = true;
            c = 0;
            let e = self.estimate(&traversal, 0)?.unwrap();
            estimate = e.0;
            share = e.1;
        }
        let mut precompute = Vec::new();
        let mut atoms: Vec<Atom> = Vec::new();
        let mut replaced = vec![false; self.q.atoms().len()];
        for (i, atom) in self.q.atoms().iter().enumerate() {
            if replaced[i] {
                continue;
            }
            let node = self.tree.nodes.iter().position(|n| n.lambda.contains(&i)).unwrap();
            if c & (1 << node) == 0 {
                atoms.push(atom.clone());
                continue;
            }
            let lambda = self.tree.nodes[node].lambda.clone();
            for &j in &lambda {
                replaced[j] = true;
            }
            let (sub, _) = self.subjoin(&lambda)?;
            let vars: Vec<usize> = sub
                .attributes()
                .iter()
                .map(|a| self.q.attr_index(&a.name).unwrap())
                .collect();
            let rels: Vec<SizedRelation> = lambda
                .iter()
                .map(|&j| SizedRelation {
                    attrs: self.q.atoms()[j].attr_set(),
                    size: self.sizes[j],
                })
                .collect();
            let main_p = optimize_share(&rels, self.tree.nodes[node].bag, self.q.num_attributes(), self.params)?;
            let sub_p = ShareVector::new(vars.iter().map(|&a| main_p.get(a)).collect())?;
            let sub_rank: Vec<u64> = vars.iter().map(|&a| self.rank[a]).collect();
            let sub_ord = crate::sampler::order_by_rank(sub.all_attrs(), &sub_rank);
            precompute.push(PrecomputePlan {
                node,
                relation: sub.name().to_string(),
                atoms: lambda,
                ord: sub_ord,
                share: sub_p,
                estimated_size: self.node_size(node)?,
                subquery: sub.clone(),
            });
            atoms.push(Atom {
                relation: sub.name().to_string(),
                vars,
            });
        }
        let rewritten = self.q.with_atoms(format!("{}'", self.q.name()), atoms)?;
        let rank = self.rank.clone();
        let ord = attribute_order(self.tree, &traversal, |a| rank[a]);
        Ok(QueryPlan {
            mode,
            query: self.q.clone(),
            tree: self.tree.clone(),
            candidates: candidate_relations(self.tree, self.q),
            precompute,
            rewritten,
            traversal,
            ord,
            share,
            estimate,
            baseline_estimate: baseline,
            evaluations: self.evaluations,
            fell_back,
            sampling_seconds: self.sampling_seconds,
        })
    }
}

/// Plans `q` (atoms already isolated) over `db`.
pub fn greedy_optimize(
    q: &QuerySpec,
    db: &Database,
    tree: &Hypertree,
    params: &CostModelParams,
    cfg: SampleConfig,
    exec: &mut dyn SampleExecutor,
    mode: PlanMode,
) -> Result<QueryPlan> {
    let start = Instant::now();
    let rank = crate::sampler::distinct_counts(q, db)?;
    let mut planner = Planner::new(q, db, tree, params, cfg, rank, exec)?;
    let (traversal, c) = planner.greedy(mode == PlanMode::Adj)?;
    let mut plan = planner.build_plan(mode, traversal, c, true)?;
    plan.estimate.optimization = start.elapsed().as_secs_f64();
    Ok(plan)
}

/// Plan with a chosen traversal and pre-compute set (node ids), bypassing the search.
pub fn plan_with(
    q: &QuerySpec,
    db: &Database,
    tree: &Hypertree,
    params: &CostModelParams,
    cfg: SampleConfig,
    exec: &mut dyn SampleExecutor,
    traversal: Vec<usize>,
    precompute: &[usize],
) -> Result<QueryPlan> {
    if !crate::ghd::traversal_orders(tree).contains(&traversal) {
        return Err(Error::Order(format!("{traversal:?} is not a connected traversal")));
    }
    let rank = crate::sampler::distinct_counts(q, db)?;
    let mut planner = Planner::new(q, db, tree, params, cfg, rank, exec)?;
    let mut c = 0u64;
    for &v in precompute {
        if !planner.is_candidate(v) {
            return Err(Error::InvalidQuery(format!("node {v} is not a pre-compute candidate")));
        }
        c |= 1 << v;
    }
    planner.build_plan(PlanMode::Adj, traversal, c, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets;
    use crate::ghd::{optimal_hypertree, GhdLimits};
    use crate::relational::pairwise_join_oracle;
    use crate::sampler::LocalExecutor;
    use proptest::prelude::*;

    fn table() -> BetaTable {
        BetaTable::new(vec![(1_000, 8e6), (10_000, 6e6), (100_000, 4e6), (1_000_000, 2e6)]).unwrap()
    }

    fn params(workers: usize) -> CostModelParams {
        CostModelParams {
            alpha: 1e6,
            beta: table(),
            memory: u64::MAX,
            workers,
        }
    }

    fn set(a: &[usize]) -> AttrSet {
        AttrSet::from_attrs(a.iter().copied())
    }

    /// Every vector with entries in `[1, 8N]` over `all` (1 elsewhere) whose
    /// product lies in `[N, 8N]`, filtered by the memory constraint.
    fn brute_force(rels: &[SizedRelation], all: AttrSet, n: usize, params: &CostModelParams) -> Option<Vec<u32>> {
        let cap = 8 * params.workers as u64;
        let attrs: Vec<usize> = all.iter().collect();
        let mut vectors: Vec<Vec<u32>> = vec![vec![1; n]];
        for &a in &attrs {
            let mut next = Vec::new();
            for v in &vectors {
                let prod: u64 = v.iter().map(|&x| x as u64).product();
                for x in 1..=cap {
                    if prod * x > cap {
                        break;
                    }
                    let mut w = v.clone();
                    w[a] = x as u32;
                    next.push(w);
                }
            }
            vectors = next;
        }
        let mut best: Option<(f64, u64, Vec<u32>)> = None;
        for p in vectors {
            let prod: u64 = p.iter().map(|&x| x as u64).product();
            if prod < params.workers as u64 {
                continue;
            }
            let per_cube: f64 = rels
                .iter()
                .map(|r| r.size / r.attrs.iter().map(|a| p[a] as f64).product::<f64>())
                .sum();
            let cubes_per_worker = (prod + params.workers as u64 - 1) / params.workers as u64;
            if per_cube * cubes_per_worker as f64 > params.memory as f64 {
                continue;
            }
            let cost: f64 = rels
                .iter()
                .map(|r| r.size * all.minus(r.attrs).iter().map(|a| p[a] as f64).product::<f64>())
                .sum();
            let better = match &best {
                None => true,
                Some((bc, bp, bv)) => (cost, prod, &p) < (*bc, *bp, bv),
            };
            if better {
                best = Some((cost, prod, p));
            }
        }
        best.map(|b| b.2)
    }

    #[test]
    fn beta_lookup() {
        let t = table();
        assert_eq!(t.lookup(10_000.0), 6e6);
        assert_eq!(t.lookup(10.0), 8e6);
        assert_eq!(t.lookup(1e9), 2e6);
        let mid = t.lookup(31_622.8);
        assert!((mid - 5e6).abs() < 1e3);
        assert!(BetaTable::new(vec![]).is_err());
        assert!(BetaTable::new(vec![(10, 0.0)]).is_err());
    }

    #[test]
    fn calibrated_table_shape() {
        let t = calibrate_beta_table(&BETA_LADDER[..3], 20_000, 1).unwrap();
        assert_eq!(t.points.len(), 3);
        assert!(t.points.iter().all(|p| p.1 > 0.0));
    }

    #[test]
    fn share_examples() {
        // single relation over its own attributes
        let rels = [SizedRelation { attrs: set(&[0, 1]), size: 10.0 }];
        let p = optimize_share(&rels, set(&[0, 1]), 2, &params(4)).unwrap();
        assert_eq!(p.hypercubes(), 4);
        assert_eq!(shipped_tuples(&rels, set(&[0, 1]), &p), 10.0);
        // one worker: all ones
        let (q, db) = datasets::running_example();
        let rels: Vec<SizedRelation> = q
            .atoms()
            .iter()
            .map(|a| SizedRelation {
                attrs: a.attr_set(),
                size: db.get(&a.relation).unwrap().len() as f64,
            })
            .collect();
        let p = optimize_share(&rels, q.all_attrs(), 5, &params(1)).unwrap();
        assert_eq!(p, ShareVector::ones(5));
        let total: f64 = rels.iter().map(|r| r.size).sum();
        assert_eq!(cost_comm(&rels, q.all_attrs(), &p, 1.0), total);
        // Example 2's vector is a feasible point for four workers
        let ex = ShareVector::new(vec![1, 2, 2, 1, 1]).unwrap();
        assert_eq!(ex.hypercubes(), 4);
        let best = optimize_share(&rels, q.all_attrs(), 5, &params(4)).unwrap();
        assert!(shipped_tuples(&rels, q.all_attrs(), &best) <= shipped_tuples(&rels, q.all_attrs(), &ex));
        let tight = CostModelParams {
            memory: 3,
            ..params(4)
        };
        assert!(matches!(optimize_share(&rels, q.all_attrs(), 5, &tight), Err(Error::Infeasible(_))));
    }

    #[test]
    fn comm_scales() {
        let rels = [
            SizedRelation { attrs: set(&[0, 1]), size: 100.0 },
            SizedRelation { attrs: set(&[1, 2]), size: 50.0 },
        ];
        let p = ShareVector::new(vec![2, 1, 2]).unwrap();
        let all = set(&[0, 1, 2]);
        assert_eq!(cost_comm(&rels, all, &p, 2.0), cost_comm(&rels, all, &p, 1.0) / 2.0);
        let doubled: Vec<SizedRelation> = rels.iter().map(|r| SizedRelation { size: r.size * 2.0, ..*r }).collect();
        assert_eq!(cost_comm(&doubled, all, &p, 1.0), 2.0 * cost_comm(&rels, all, &p, 1.0));
        assert_eq!(cost_comp_step(1.0, 4.0, 2), 1.0 / 8.0);
        assert_eq!(cost_comp_step(1.0, 8.0, 2), cost_comp_step(1.0, 4.0, 2) / 2.0);
    }

    #[test]
    fn breakdown_identity() {
        let e = CostBreakdown::estimated(5.0, 1.0, 2.0, 3.0);
        assert_eq!(e.total, 6.0);
        let m = CostBreakdown::measured(5.0, 1.0, 2.0, 3.0);
        assert_eq!(m.total, 11.0);
    }

    #[test]
    fn running_example_plans() {
        let (q, db) = datasets::running_example();
        let t = optimal_hypertree(&q, GhdLimits::default()).unwrap();
        let prm = params(4);
        let plan = greedy_optimize(&q, &db, &t, &prm, SampleConfig::default(), &mut LocalExecutor, PlanMode::Adj).unwrap();
        let n = t.len();
        assert!(plan.evaluations <= n * (2 * n - 1));
        assert!(plan.estimate.total <= plan.baseline_estimate.total);
        assert!(crate::ghd::is_valid(&plan.ord, &t));
        assert_eq!(plan.candidates.len(), 2);
        let base = greedy_optimize(&q, &db, &t, &prm, SampleConfig::default(), &mut LocalExecutor, PlanMode::HcubeLf).unwrap();
        assert!(base.precompute.is_empty());

        // pre-computing R4⋈R5 alone
        let r45 = t.nodes.iter().position(|n| n.lambda == vec![3, 4]).unwrap();
        let r1 = t.nodes.iter().position(|n| n.lambda == vec![0]).unwrap();
        let r23 = t.nodes.iter().position(|n| n.lambda == vec![1, 2]).unwrap();
        let plan = plan_with(&q, &db, &t, &prm, SampleConfig::default(), &mut LocalExecutor, vec![r1, r23, r45], &[r45]).unwrap();
        assert_eq!(plan.precompute.len(), 1);
        assert_eq!(plan.precompute[0].estimated_size, 6.0);
        assert_eq!(plan.rewritten.atoms().len(), 4);
        // rewritten query over the materialized candidate equals the original
        let pre = &plan.precompute[0];
        let r = pairwise_join_oracle(&db, &pre.subquery).unwrap().renamed(pre.relation.clone());
        let mut db2 = db.clone();
        db2.insert(r);
        assert_eq!(
            pairwise_join_oracle(&db2, &plan.rewritten).unwrap().as_flat(),
            pairwise_join_oracle(&db, &q).unwrap().as_flat()
        );
    }

    #[test]
    fn pre_cost_is_bounded_by_whole_query() {
        let (q, db) = datasets::running_example();
        let t = optimal_hypertree(&q, GhdLimits::default()).unwrap();
        let prm = params(4);
        let rank = crate::sampler::distinct_counts(&q, &db).unwrap();
        let mut exec = LocalExecutor;
        let mut planner = Planner::new(&q, &db, &t, &prm, SampleConfig::default(), rank, &mut exec).unwrap();
        let r45 = t.nodes.iter().position(|n| n.lambda == vec![3, 4]).unwrap();
        let r1 = t.nodes.iter().position(|n| n.lambda == vec![0]).unwrap();
        let c45 = planner.cost_pre(r45).unwrap();
        assert!(c45 > 0.0);
        assert_eq!(planner.cost_pre(r1).unwrap(), 0.0);
        assert!(c45 < planner.subjoin_cost(&[0, 1, 2, 3, 4]).unwrap());
        assert_eq!(planner.node_size(r45).unwrap(), 6.0);
    }

    #[test]
    fn single_node_tree_plans_plainly() {
        let q = datasets::query("Q1").unwrap();
        let db = datasets::bind_graph(&q, &datasets::random_graph(30, 120, 4));
        let t = optimal_hypertree(&q, GhdLimits::default()).unwrap();
        let plan = greedy_optimize(&q, &db, &t, &params(2), SampleConfig::default(), &mut LocalExecutor, PlanMode::Adj).unwrap();
        assert_eq!(plan.traversal.len(), 1);
        assert!(plan.precompute.is_empty());
        assert_eq!(plan.evaluations, 1);
        assert_eq!(plan.rewritten.atoms(), q.atoms());
    }

    proptest! {
        #[test]
        fn share_matches_brute_force(
            n in 2usize..=5,
            workers in 1usize..=4,
            raw in prop::collection::vec((1u64..32, 1u32..200), 1..5),
            memory in prop::option::of(20u64..400),
        ) {
            let mask = (1u64 << n) - 1;
            let mut rels: Vec<SizedRelation> = raw
                .iter()
                .map(|&(bits, size)| SizedRelation { attrs: AttrSet(bits & mask), size: size as f64 })
                .filter(|r| !r.attrs.is_empty())
                .collect();
            let covered = rels.iter().fold(AttrSet::EMPTY, |s, r| s.union(r.attrs));
            if covered != AttrSet(mask) {
                rels.push(SizedRelation { attrs: AttrSet(mask), size: 1.0 });
            }
            let prm = CostModelParams { memory: memory.unwrap_or(u64::MAX), ..params(workers) };
            let got = optimize_share(&rels, AttrSet(mask), n, &prm).ok().map(|p| p.as_slice().to_vec());
            prop_assert_eq!(got, brute_force(&rels, AttrSet(mask), n, &prm));
        }
    }
}
