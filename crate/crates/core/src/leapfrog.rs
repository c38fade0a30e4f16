//! LeapFrog join over tries, run as an explicit-stack iterator pipeline.
//!
//! Attributes are bound one at a time in a global order. At each depth the
//! cursors of every atom containing that attribute are opened one level and
//! intersected with the leapfrog seek loop; each value found either extends
//! the binding one level deeper or, at the last depth, is emitted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{check_permutation, QuerySpec, Value};
use crate::trie::{TrieCursor, TrieIndex};

/// One timed extension out of every `TIMING_STRIDE`.
pub const TIMING_STRIDE: u64 = 1024;

/// Receives result tuples, with values in query registry order.
pub trait TupleSink {
    fn emit(&mut self, tuple: &[Value]);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CountingSink {
    pub count: u64,
}

impl TupleSink for CountingSink {
    fn emit(&mut self, _tuple: &[Value]) {
        self.count += 1;
    }
}

/// Collects tuples row-major.
#[derive(Debug, Default, Clone)]
pub struct CollectingSink {
    pub data: Vec<Value>,
}

impl TupleSink for CollectingSink {
    fn emit(&mut self, tuple: &[Value]) {
        self.data.extend_from_slice(tuple);
    }
}

/// Per-depth counters; index `i` refers to the attribute at position `i` of
/// the order, so `bindings[i]` is |T^(i+1)|.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub bindings: Vec<u64>,
    pub extension_calls: Vec<u64>,
    pub timed_calls: Vec<u64>,
    pub timed_nanos: Vec<u64>,
}

impl LevelStats {
    pub fn new(depths: usize) -> Self {
        LevelStats {
            bindings: vec![0; depths],
            extension_calls: vec![0; depths],
            timed_calls: vec![0; depths],
            timed_nanos: vec![0; depths],
        }
    }

    pub fn depths(&self) -> usize {
        self.bindings.len()
    }

    /// Bindings at the deepest level reached.
    pub fn results(&self) -> u64 {
        self.bindings.last().copied().unwrap_or(0)
    }

    /// Σ |T^i| over all depths.
    pub fn total_bindings(&self) -> u64 {
        self.bindings.iter().sum()
    }

    /// Estimated wall time spent extending at `depth`, extrapolated from the
    /// timed subset of extension calls.
    pub fn extension_seconds(&self, depth: usize) -> f64 {
        if self.timed_calls[depth] == 0 {
            return 0.0;
        }
        self.timed_nanos[depth] as f64 * 1e-9 * self.extension_calls[depth] as f64 / self.timed_calls[depth] as f64
    }

    pub fn merge(&mut self, other: &LevelStats) {
        if self.depths() < other.depths() {
            let n = other.depths();
            self.bindings.resize(n, 0);
            self.extension_calls.resize(n, 0);
            self.timed_calls.resize(n, 0);
            self.timed_nanos.resize(n, 0);
        }
        for i in 0..other.depths() {
            self.bindings[i] += other.bindings[i];
            self.extension_calls[i] += other.extension_calls[i];
            self.timed_calls[i] += other.timed_calls[i];
            self.timed_nanos[i] += other.timed_nanos[i];
        }
    }
}

/// Column order a trie for `atom` must use under the global order `ord`:
/// the atom's columns sorted by the position of their attribute in `ord`.
pub fn trie_order_for(q: &QuerySpec, atom: usize, ord: &[usize]) -> Vec<usize> {
    let mut rank = vec![0; q.num_attributes()];
    for (i, &a) in ord.iter().enumerate() {
        rank[a] = i;
    }
    let vars = &q.atoms()[atom].vars;
    let mut cols: Vec<usize> = (0..vars.len()).collect();
    cols.sort_by_key(|&c| rank[vars[c]]);
    cols
}

/// Options for a single LeapFrog run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Restrict the first attribute of the order to this value.
    pub fixed_first: Option<Value>,
    /// Stop after binding this many attributes (counts only; nothing is emitted
    /// unless the limit equals the full arity). `None` means all attributes.
    pub depth_limit: Option<usize>,
}

/// Bound state of one join: cursors, participants per depth and the current
/// partial binding.
pub struct JoinContext<'t> {
    ord: Vec<usize>,
    cursors: Vec<TrieCursor<'t>>,
    participants: Vec<Vec<usize>>,
    /// Per depth, participants in leapfrog rotation order.
    rotation: Vec<Vec<usize>>,
    p: Vec<usize>,
    binding: Vec<Value>,
    fixed_first: Option<Value>,
    stats: LevelStats,
    timing: Vec<Option<Instant>>,
}

impl<'t> JoinContext<'t> {
    pub fn new(tries: &[&'t TrieIndex], q: &QuerySpec, ord: &[usize]) -> Result<Self> {
        let n = q.num_attributes();
        check_permutation(ord, n)?;
        if tries.len() != q.atoms().len() {
            return Err(Error::Order(format!(
                "join over {} atoms given {} tries",
                q.atoms().len(),
                tries.len()
            )));
        }
        for (i, t) in tries.iter().enumerate() {
            let want = trie_order_for(q, i, ord);
            if t.order() != want.as_slice() {
                return Err(Error::Order(format!(
                    "inconsistent with trie of atom {} ({}): trie order {:?}, expected {:?}",
                    i,
                    q.atoms()[i].relation,
                    t.order(),
                    want
                )));
            }
        }
        let participants: Vec<Vec<usize>> = ord
            .iter()
            .map(|&a| {
                q.atoms()
                    .iter()
                    .enumerate()
                    .filter(|(_, atom)| atom.vars.contains(&a))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Ok(JoinContext {
            ord: ord.to_vec(),
            cursors: tries.iter().map(|t| t.cursor()).collect(),
            rotation: participants.clone(),
            participants,
            p: vec![0; n],
            binding: vec![0; n],
            fixed_first: None,
            stats: LevelStats::new(n),
            timing: vec![None; n],
        })
    }

    pub fn participants(&self, depth: usize) -> &[usize] {
        &self.participants[depth]
    }

    /// Opens every participant at `depth` and finds the first common value.
    fn init(&mut self, depth: usize) -> Option<Value> {
        self.stats.extension_calls[depth] += 1;
        if (self.stats.extension_calls[depth] - 1) % TIMING_STRIDE == 0 {
            self.stats.timed_calls[depth] += 1;
            self.timing[depth] = Some(Instant::now());
        }
        let result = self.init_inner(depth);
        self.lap(depth);
        result
    }

    fn init_inner(&mut self, depth: usize) -> Option<Value> {
        for &a in &self.participants[depth] {
            self.cursors[a].open();
        }
        if depth == 0 {
            if let Some(v) = self.fixed_first {
                for &a in &self.participants[0] {
                    if self.cursors[a].seek(v) != Some(v) {
                        return None;
                    }
                }
                return Some(v);
            }
        }
        let parts = &self.participants[depth];
        if parts.iter().any(|&a| self.cursors[a].at_end()) {
            return None;
        }
        let cursors = &self.cursors;
        let rot = &mut self.rotation[depth];
        rot.sort_by_key(|&a| cursors[a].key());
        self.p[depth] = 0;
        let max = self.cursors[*rot.last().unwrap()].key();
        self.search(depth, max)
    }

    /// Leapfrog seek loop: rotate through participants, seeking each to the
    /// current maximum, until all agree.
    fn search(&mut self, depth: usize, mut max: Value) -> Option<Value> {
        let k = self.rotation[depth].len();
        let mut p = self.p[depth];
        loop {
            let a = self.rotation[depth][p];
            let x = self.cursors[a].key();
            if x == max {
                self.p[depth] = p;
                return Some(x);
            }
            max = self.cursors[a].seek(max)?;
            p = (p + 1) % k;
        }
    }

    fn advance(&mut self, depth: usize) -> Option<Value> {
        if self.timing[depth].is_some() {
            self.timing[depth] = Some(Instant::now());
        }
        let result = if depth == 0 && self.fixed_first.is_some() {
            None
        } else {
            let p = self.p[depth];
            let a = self.rotation[depth][p];
            match self.cursors[a].next() {
                None => None,
                Some(max) => {
                    self.p[depth] = (p + 1) % self.rotation[depth].len();
                    self.search(depth, max)
                }
            }
        };
        self.lap(depth);
        result
    }

    fn lap(&mut self, depth: usize) {
        if let Some(start) = self.timing[depth] {
            self.stats.timed_nanos[depth] += start.elapsed().as_nanos() as u64;
        }
    }

    fn close(&mut self, depth: usize) {
        self.timing[depth] = None;
        for &a in &self.participants[depth] {
            self.cursors[a].up();
        }
    }

    /// Drives the join to completion.
    pub fn run<S: TupleSink + ?Sized>(mut self, options: RunOptions, sink: &mut S) -> LevelStats {
        let n = self.ord.len();
        let limit = options.depth_limit.unwrap_or(n).min(n);
        self.fixed_first = options.fixed_first;
        if limit == 0 {
            return self.stats;
        }
        let mut out = vec![0; n];
        let mut depth = 0;
        let mut current = self.init(0);
        loop {
            match current {
                Some(v) => {
                    self.binding[depth] = v;
                    self.stats.bindings[depth] += 1;
                    if depth + 1 == limit {
                        if limit == n {
                            for (i, &a) in self.ord.iter().enumerate() {
                                out[a] = self.binding[i];
                            }
                            sink.emit(&out);
                        }
                        current = self.advance(depth);
                    } else {
                        depth += 1;
                        current = self.init(depth);
                    }
                }
                None => {
                    self.close(depth);
                    if depth == 0 {
                        break;
                    }
                    depth -= 1;
                    current = self.advance(depth);
                }
            }
        }
        self.stats
    }

    /// Positions cursors on `prefix` (values of the first attributes of the
    /// order) and returns the values the next attribute can take.
    pub fn extension(mut self, prefix: &[Value]) -> Vec<Value> {
        let n = self.ord.len();
        assert!(prefix.len() < n, "prefix binds every attribute");
        for (depth, &v) in prefix.iter().enumerate() {
            for &a in &self.participants[depth] {
                self.cursors[a].open();
                if self.cursors[a].seek(v) != Some(v) {
                    return Vec::new();
                }
            }
        }
        let depth = prefix.len();
        let mut values = Vec::new();
        let mut current = self.init(depth);
        while let Some(v) = current {
            values.push(v);
            current = self.advance(depth);
        }
        values
    }
}

/// Joins the atoms' tries (one per atom, built with [`trie_order_for`]) and
/// feeds every result tuple to `sink`.
pub fn lf_join<S: TupleSink + ?Sized>(
    tries: &[&TrieIndex],
    q: &QuerySpec,
    ord: &[usize],
    sink: &mut S,
) -> Result<LevelStats> {
    Ok(JoinContext::new(tries, q, ord)?.run(RunOptions::default(), sink))
}

/// Number of result tuples whose first attribute (in `ord`) equals `a0`.
pub fn lf_join_fixed(tries: &[&TrieIndex], q: &QuerySpec, ord: &[usize], a0: Value) -> Result<(u64, LevelStats)> {
    let mut sink = CountingSink::default();
    let stats = JoinContext::new(tries, q, ord)?.run(
        RunOptions {
            fixed_first: Some(a0),
            depth_limit: None,
        },
        &mut sink,
    );
    Ok((sink.count, stats))
}

/// Values the attribute at position `prefix.len()` of `ord` can take given
/// the bound prefix.
pub fn extension(tries: &[&TrieIndex], q: &QuerySpec, ord: &[usize], prefix: &[Value]) -> Result<Vec<Value>> {
    Ok(JoinContext::new(tries, q, ord)?.extension(prefix))
}

/// Builds one trie per atom of `q` over `relations` (indexed by atom) for `ord`.
pub fn build_tries(relations: &[&crate::relational::Relation], q: &QuerySpec, ord: &[usize]) -> Result<Vec<TrieIndex>> {
    relations
        .iter()
        .enumerate()
        .map(|(i, r)| TrieIndex::build(r, &trie_order_for(q, i, ord)))
        .collect()
}
