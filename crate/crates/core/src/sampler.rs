//! Cardinality estimation by sampling values of the first attribute.
//!
//! `|T| = Σ_{a ∈ val(A)} |T_{A=a}|`, so drawing values of `A` uniformly and
//! joining each one with LeapFrog gives an unbiased estimate of `|T|` once the
//! sample mean is scaled by `|val(A)|`. The same runs yield per-depth binding
//! counts and extension timings, which the optimizer reuses.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leapfrog::{build_tries, CountingSink, JoinContext, LevelStats, RunOptions};
use crate::relational::{AttrSet, Database, QuerySpec, Value};

pub const DEFAULT_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub k: usize,
    pub seed: u64,
    /// Draw `k` samples even when `|val(A)| ≤ k` instead of enumerating val(A).
    pub force_sampling: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            k: DEFAULT_SAMPLES,
            seed: 0,
            force_sampling: false,
        }
    }
}

impl SampleConfig {
    pub fn new(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        Ok(SampleConfig {
            k,
            seed,
            force_sampling: false,
        })
    }

    /// Sample count from an error target and failure probability.
    pub fn from_error(eps: f64, delta: f64, seed: u64) -> Result<Self> {
        SampleConfig::new(chernoff_sample_size(eps, delta)?, seed)
    }
}

/// `k = ⌈ln(2/δ) / (2ε²)⌉`: with this many samples the mean lies within `ε·b`
/// of its expectation with probability at least `1 − δ`, for samples in `[0, b]`.
pub fn chernoff_sample_size(eps: f64, delta: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!("eps must lie in (0, 1], got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    let k = ((2.0 / delta).ln() / (2.0 * eps * eps)).ceil();
    Ok((k as usize).max(1))
}

/// val(A): the intersection of A's projections over all atoms containing A.
pub fn attribute_values(attr: usize, db: &Database, q: &QuerySpec) -> Result<Vec<Value>> {
    let rels = db.atom_relations(q)?;
    let mut acc: Option<Vec<Value>> = None;
    for (atom, r) in q.atoms().iter().zip(rels) {
        let Some(col) = atom.vars.iter().position(|&v| v == attr) else {
            continue;
        };
        let proj = r.project(col);
        acc = Some(match acc {
            None => proj,
            Some(prev) => intersect_sorted(&prev, &proj),
        });
    }
    acc.ok_or_else(|| Error::InvalidQuery(format!("attribute {attr} occurs in no atom")))
}

fn intersect_sorted(a: &[Value], b: &[Value]) -> Vec<Value> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Keeps, in every relation of an atom containing `attr`, only tuples whose
/// `attr` value is in `keep`. Other relations are copied unchanged.
pub fn semijoin_reduce(db: &Database, q: &QuerySpec, attr: usize, keep: &[Value]) -> Result<Database> {
    let keep: BTreeSet<Value> = keep.iter().copied().collect();
    let rels = db.atom_relations(q)?;
    let mut out = Database::new();
    for (atom, r) in q.atoms().iter().zip(rels) {
        let col = atom.vars.iter().position(|&v| v == attr);
        let clash = q.atoms().iter().any(|other| {
            other.relation == atom.relation && other.vars.iter().position(|&v| v == attr) != col
        });
        if clash {
            return Err(Error::Schema(format!(
                "relation {} is shared by atoms that disagree on the reduced attribute",
                atom.relation
            )));
        }
        let reduced = match col {
            Some(c) => r.filter(|row| keep.contains(&row[c])),
            None => r.clone(),
        };
        out.insert(reduced);
    }
    Ok(out)
}

/// Per-value results of fixed-first LeapFrog runs.
#[derive(Debug, Clone, Default)]
pub struct SampleRun {
    pub values: Vec<Value>,
    /// `bindings[i][d]`: bindings at depth `d` of the run fixing `values[i]`.
    pub bindings: Vec<Vec<u64>>,
    pub stats: LevelStats,
}

/// Runs fixed-first LeapFrog for a set of distinct values of `ord[0]`.
pub trait SampleExecutor {
    fn run_samples(
        &mut self,
        q: &QuerySpec,
        db: &Database,
        ord: &[usize],
        values: &[Value],
        depth_limit: usize,
    ) -> Result<SampleRun>;
}

/// Runs every sample in the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalExecutor;

impl SampleExecutor for LocalExecutor {
    fn run_samples(
        &mut self,
        q: &QuerySpec,
        db: &Database,
        ord: &[usize],
        values: &[Value],
        depth_limit: usize,
    ) -> Result<SampleRun> {
        let rels = db.atom_relations(q)?;
        let tries = build_tries(&rels, q, ord)?;
        let refs: Vec<_> = tries.iter().collect();
        run_fixed_values(&refs, q, ord, values, depth_limit)
    }
}

/// Shared by the local and cluster executors.
pub fn run_fixed_values(
    tries: &[&crate::trie::TrieIndex],
    q: &QuerySpec,
    ord: &[usize],
    values: &[Value],
    depth_limit: usize,
) -> Result<SampleRun> {
    let mut out = SampleRun {
        values: values.to_vec(),
        bindings: Vec::with_capacity(values.len()),
        stats: LevelStats::new(ord.len()),
    };
    for &v in values {
        let stats = JoinContext::new(tries, q, ord)?.run(
            RunOptions {
                fixed_first: Some(v),
                depth_limit: Some(depth_limit),
            },
            &mut CountingSink::default(),
        );
        out.bindings.push(stats.bindings[..depth_limit].to_vec());
        out.stats.merge(&stats);
    }
    Ok(out)
}

/// Outcome of one sampling pass over an attribute order.
#[derive(Debug, Clone)]
pub struct SampledRun {
    pub attr: usize,
    pub val_count: usize,
    pub samples_used: usize,
    pub exhaustive: bool,
    /// Estimated `|T^{d+1}|` for each depth `d` below the limit.
    pub level_estimates: Vec<f64>,
    /// Count at the deepest level for each drawn sample, in draw order.
    pub final_counts: Vec<u64>,
    /// Raw statistics over the distinct values that were run.
    pub stats: LevelStats,
    /// `|val(A)|` over the number of distinct values run; scales raw
    /// statistics to the whole population.
    pub population_scale: f64,
    pub seconds: f64,
}

/// Draws samples of `ord[0]`, reduces the database and runs each sample to
/// `depth_limit` attributes.
pub fn sample_run(
    q: &QuerySpec,
    db: &Database,
    ord: &[usize],
    depth_limit: usize,
    cfg: &SampleConfig,
    exec: &mut dyn SampleExecutor,
) -> Result<SampledRun> {
    if cfg.k == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let n = q.num_attributes();
    if depth_limit == 0 || depth_limit > n || ord.len() != n {
        return Err(Error::Order(format!("depth limit {depth_limit} for {n} attributes")));
    }
    let start = Instant::now();
    let attr = ord[0];
    let val = attribute_values(attr, db, q)?;
    if val.is_empty() {
        return Ok(SampledRun {
            attr,
            val_count: 0,
            samples_used: 0,
            exhaustive: true,
            level_estimates: vec![0.0; depth_limit],
            final_counts: Vec::new(),
            stats: LevelStats::new(n),
            population_scale: 0.0,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let exhaustive = val.len() <= cfg.k && !cfg.force_sampling;
    let drawn: Vec<Value> = if exhaustive {
        val.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.k).map(|_| val[rng.gen_range(0..val.len())]).collect()
    };
    let mut distinct = drawn.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let reduced = semijoin_reduce(db, q, attr, &distinct)?;
    let run = exec.run_samples(q, &reduced, ord, &distinct, depth_limit)?;
    let per_value: std::collections::HashMap<Value, &Vec<u64>> =
        run.values.iter().copied().zip(run.bindings.iter()).collect();
    let scale = val.len() as f64 / drawn.len() as f64;
    let mut sums = vec![0f64; depth_limit];
    let mut final_counts = Vec::with_capacity(drawn.len());
    for v in &drawn {
        let b = per_value
            .get(v)
            .ok_or_else(|| Error::Stats(format!("executor returned no result for value {v}")))?;
        for (d, s) in sums.iter_mut().enumerate() {
            *s += b[d] as f64;
        }
        final_counts.push(b[depth_limit - 1]);
    }
    Ok(SampledRun {
        attr,
        val_count: val.len(),
        samples_used: drawn.len(),
        exhaustive,
        level_estimates: sums.into_iter().map(|s| s * scale).collect(),
        final_counts,
        stats: run.stats,
        population_scale: val.len() as f64 / distinct.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalityEstimate {
    pub estimate: f64,
    pub val_count: usize,
    pub sample_mean: f64,
    /// Largest per-sample count, standing in for the unknown range bound.
    pub sample_max: u64,
    pub samples_used: usize,
    pub exhaustive: bool,
    pub empty_val: bool,
    /// Heuristic 95% interval from the Hoeffding bound with `sample_max` as b.
    pub interval: (f64, f64),
    pub seconds: f64,
}

impl CardinalityEstimate {
    fn from_run(run: &SampledRun) -> Self {
        let k = run.final_counts.len();
        let mean = if k == 0 {
            0.0
        } else {
            run.final_counts.iter().sum::<u64>() as f64 / k as f64
        };
        let max = run.final_counts.iter().copied().max().unwrap_or(0);
        let estimate = run.val_count as f64 * mean;
        let interval = if run.exhaustive || k == 0 {
            (estimate, estimate)
        } else {
            let half = run.val_count as f64 * max as f64 * ((2.0f64 / 0.05).ln() / (2.0 * k as f64)).sqrt();
            ((estimate - half).max(0.0), estimate + half)
        };
        CardinalityEstimate {
            estimate,
            val_count: run.val_count,
            sample_mean: mean,
            sample_max: max,
            samples_used: k,
            exhaustive: run.exhaustive,
            empty_val: run.val_count == 0,
            interval,
            seconds: run.seconds,
        }
    }
}

/// Estimates `|T|` sampling on `ord[0]`, running samples in this thread.
pub fn estimate_cardinality(q: &QuerySpec, db: &Database, cfg: &SampleConfig, ord: &[usize]) -> Result<CardinalityEstimate> {
    estimate_cardinality_with(q, db, cfg, ord, &mut LocalExecutor)
}

pub fn estimate_cardinality_with(
    q: &QuerySpec,
    db: &Database,
    cfg: &SampleConfig,
    ord: &[usize],
    exec: &mut dyn SampleExecutor,
) -> Result<CardinalityEstimate> {
    let run = sample_run(q, db, ord, q.num_attributes(), cfg, exec)?;
    Ok(CardinalityEstimate::from_run(&run))
}

/// `set` sorted by ascending `rank`, ties by attribute index.
pub fn order_by_rank(set: AttrSet, rank: &[u64]) -> Vec<usize> {
    let mut v: Vec<usize> = set.iter().collect();
    v.sort_by_key(|&a| (rank[a], a));
    v
}

/// Statistics for extending the attributes `fresh` after binding `before`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub before: AttrSet,
    pub fresh: AttrSet,
    /// Estimated `|T|` over `before` (1 when `before` is empty).
    pub count_before: f64,
    /// Estimated `|T|` over `before ∪ fresh`.
    pub count_after: f64,
    /// Bindings of `before` extended through `fresh` per second, if measured.
    pub beta: Option<f64>,
    /// Extension calls observed at the depths of `fresh`.
    pub extensions: u64,
    pub exhaustive: bool,
    pub seconds: f64,
}

/// Samples the order `before, fresh, rest` (each part by ascending rank) up
/// to the depth of `fresh`.
pub fn probe(
    q: &QuerySpec,
    db: &Database,
    cfg: &SampleConfig,
    rank: &[u64],
    before: AttrSet,
    fresh: AttrSet,
    exec: &mut dyn SampleExecutor,
) -> Result<Probe> {
    let fresh = fresh.minus(before);
    let bound = before.union(fresh);
    if bound.is_empty() {
        return Ok(Probe {
            before,
            fresh,
            count_before: 1.0,
            count_after: 1.0,
            beta: None,
            extensions: 0,
            exhaustive: true,
            seconds: 0.0,
        });
    }
    let mut ord = order_by_rank(before, rank);
    ord.extend(order_by_rank(fresh, rank));
    ord.extend(order_by_rank(q.all_attrs().minus(bound), rank));
    let (b, limit) = (before.len(), bound.len());
    let run = sample_run(q, db, &ord, limit, cfg, exec)?;
    let count_before = if b == 0 { 1.0 } else { run.level_estimates[b - 1] };
    let count_after = run.level_estimates[limit - 1];
    let extensions: u64 = (b..limit).map(|d| run.stats.extension_calls[d]).sum();
    let seconds: f64 = (b..limit).map(|d| run.stats.extension_seconds(d)).sum::<f64>() * run.population_scale;
    let beta = if fresh.is_empty() || seconds <= 0.0 {
        None
    } else {
        let calls = if b == 0 {
            1.0
        } else {
            run.stats.extension_calls[b] as f64 * run.population_scale
        };
        Some(calls / seconds)
    };
    Ok(Probe {
        before,
        fresh,
        count_before,
        count_after,
        beta,
        extensions,
        exhaustive: run.exhaustive,
        seconds: run.seconds,
    })
}

/// Statistics of one ordered node prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixEntry {
    pub prefix: Vec<usize>,
    pub attrs: AttrSet,
    /// Estimated `|T^{v_i}|` for the prefix `v_1..v_i`.
    pub count: f64,
    /// Extension rate of the prefix's last node.
    pub beta: Option<f64>,
    pub extensions: u64,
    pub exhaustive: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefixStats {
    pub entries: Vec<PrefixEntry>,
}

impl PrefixStats {
    pub fn get(&self, prefix: &[usize]) -> Option<&PrefixEntry> {
        self.entries.iter().find(|e| e.prefix == prefix)
    }
}

/// One entry per requested prefix of hypertree nodes.
pub fn collect_prefix_stats(
    q: &QuerySpec,
    db: &Database,
    cfg: &SampleConfig,
    t: &crate::ghd::Hypertree,
    prefixes: &[Vec<usize>],
    rank: &[u64],
    exec: &mut dyn SampleExecutor,
) -> Result<PrefixStats> {
    let mut entries = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        if let Some(&bad) = prefix.iter().find(|&&v| v >= t.len()) {
            return Err(Error::Stats(format!("prefix names unknown node {bad}")));
        }
        let attrs = prefix.iter().fold(AttrSet::EMPTY, |s, &v| s.union(t.nodes[v].bag));
        let entry = match prefix.split_last() {
            None => PrefixEntry {
                prefix: Vec::new(),
                attrs,
                count: 1.0,
                beta: None,
                extensions: 0,
                exhaustive: true,
            },
            Some((&last, head)) => {
                let before = head.iter().fold(AttrSet::EMPTY, |s, &v| s.union(t.nodes[v].bag));
                let p = probe(q, db, cfg, rank, before, t.nodes[last].bag, exec)?;
                PrefixEntry {
                    prefix: prefix.clone(),
                    attrs,
                    count: p.count_after,
                    beta: p.beta,
                    extensions: p.extensions,
                    exhaustive: p.exhaustive,
                }
            }
        };
        entries.push(entry);
    }
    Ok(PrefixStats { entries })
}

/// `|val(A)|` for every attribute, the default within-node ranking.
pub fn distinct_counts(q: &QuerySpec, db: &Database) -> Result<Vec<u64>> {
    (0..q.num_attributes())
        .map(|a| Ok(attribute_values(a, db, q)?.len() as u64))
        .collect()
}
