//! Generalized hypertree decompositions and the plan search space they induce.
//!
//! Every decomposition built here assigns each atom to exactly one node (its
//! λ), and a node's bag is the union of its atoms' attributes, so joining a
//! node's atoms yields exactly the relation that node stands for. A set of
//! bags admits a tree with the running-intersection property iff its bag
//! hypergraph is acyclic, which is checked with a maximum-weight spanning tree
//! over pairwise bag intersections.

use std::collections::HashMap;
use std::fmt::Write as _;

use num_rational::Ratio;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::relational::{AttrSet, Hypergraph, QuerySpec};

pub type Rational = Ratio<i64>;

#[derive(Debug, Clone, Copy)]
pub struct GhdLimits {
    pub max_attributes: usize,
    pub max_atoms: usize,
    pub max_decompositions: usize,
}

impl Default for GhdLimits {
    fn default() -> Self {
        GhdLimits {
            max_attributes: 12,
            max_atoms: 12,
            max_decompositions: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperNode {
    pub bag: AttrSet,
    /// Atoms covered by this node, ascending.
    pub lambda: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypertree {
    pub nodes: Vec<HyperNode>,
    pub edges: Vec<(usize, usize)>,
    pub fhw: Rational,
    /// Fractional edge cover number of each bag.
    pub widths: Vec<Rational>,
}

impl Hypertree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == v {
                Some(b)
            } else if b == v {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Whether the nodes in `mask` induce a connected subtree (the empty set counts).
    pub fn is_connected(&self, mask: u64) -> bool {
        if mask == 0 {
            return true;
        }
        let start = mask.trailing_zeros() as usize;
        let mut seen = 1u64 << start;
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for w in self.neighbors(v) {
                if mask & (1 << w) != 0 && seen & (1 << w) == 0 {
                    seen |= 1 << w;
                    stack.push(w);
                }
            }
        }
        seen == mask
    }

    pub fn bag_union(&self, mask: u64) -> AttrSet {
        (0..self.nodes.len())
            .filter(|v| mask & (1 << v) != 0)
            .fold(AttrSet::EMPTY, |s, v| s.union(self.nodes[v].bag))
    }

    /// Checks edge coverage, running intersection and tree shape against `q`.
    pub fn validate(&self, q: &QuerySpec) -> std::result::Result<(), String> {
        let n = self.nodes.len();
        if n == 0 {
            return Err("no nodes".into());
        }
        if self.edges.len() != n - 1 || !self.is_connected((1u64 << n) - 1) {
            return Err("not a tree".into());
        }
        for (i, atom) in q.atoms().iter().enumerate() {
            let holders: Vec<usize> = (0..n).filter(|&v| self.nodes[v].lambda.contains(&i)).collect();
            if holders.len() != 1 {
                return Err(format!("atom {i} assigned to {} nodes", holders.len()));
            }
            if !atom.attr_set().is_subset(self.nodes[holders[0]].bag) {
                return Err(format!("atom {i} not contained in its node's bag"));
            }
        }
        for a in 0..q.num_attributes() {
            let mask = (0..n)
                .filter(|&v| self.nodes[v].bag.contains(a))
                .fold(0u64, |m, v| m | (1 << v));
            if mask == 0 {
                return Err(format!("attribute {a} in no bag"));
            }
            if !self.is_connected(mask) {
                return Err(format!("nodes containing attribute {} are not connected", q.attr_name(a)));
            }
        }
        Ok(())
    }

    /// Indented rendering: one line per node with bag, λ and cover width.
    pub fn explain(&self, q: &QuerySpec) -> String {
        let mut out = format!("hypertree fhw={}\n", self.fhw);
        let mut stack = vec![(0usize, usize::MAX, 0usize)];
        while let Some((v, parent, indent)) = stack.pop() {
            let bag: Vec<&str> = self.nodes[v].bag.iter().map(|a| q.attr_name(a)).collect();
            let lambda: Vec<&str> = self.nodes[v].lambda.iter().map(|&i| q.atoms()[i].relation.as_str()).collect();
            let _ = writeln!(
                out,
                "{}v{} bag={{{}}} lambda={{{}}} width={}",
                "  ".repeat(indent + 1),
                v,
                bag.join(","),
                lambda.join(","),
                self.widths[v]
            );
            let mut kids: Vec<usize> = self.neighbors(v).filter(|&w| w != parent).collect();
            kids.sort_unstable_by(|a, b| b.cmp(a));
            for w in kids {
                stack.push((w, v, indent + 1));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Fractional edge cover

/// Minimum fractional edge cover of `bag` by `edges` (each intersected with
/// the bag), solved exactly. Solves the dual packing LP
/// `max Σ y_A  s.t.  Σ_{A ∈ e} y_A ≤ 1, y ≥ 0` with Bland's rule; the origin
/// is feasible so no phase one is needed.
pub fn fractional_cover(bag: AttrSet, edges: &[AttrSet]) -> Result<Rational> {
    if bag.is_empty() {
        return Err(Error::InvalidQuery("fractional cover of an empty bag".into()));
    }
    let mut rows: Vec<AttrSet> = edges
        .iter()
        .map(|e| e.intersect(bag))
        .filter(|e| !e.is_empty())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    let covered = rows.iter().fold(AttrSet::EMPTY, |s, e| s.union(*e));
    if let Some(a) = bag.minus(covered).iter().next() {
        return Err(Error::InvalidQuery(format!("attribute {a} is covered by no atom")));
    }
    let vars: Vec<usize> = bag.iter().collect();
    let (m, n) = (rows.len(), vars.len());
    let width = n + m + 1;
    let zero = Rational::zero();
    // Rows 0..m are constraints, row m is the objective (reduced costs).
    let mut t = vec![vec![zero; width]; m + 1];
    for (i, e) in rows.iter().enumerate() {
        for (j, &a) in vars.iter().enumerate() {
            if e.contains(a) {
                t[i][j] = Rational::one();
            }
        }
        t[i][n + i] = Rational::one();
        t[i][width - 1] = Rational::one();
    }
    for j in 0..n {
        t[m][j] = Rational::one();
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    loop {
        let Some(enter) = (0..n + m).find(|&j| t[m][j] > zero) else {
            break;
        };
        let mut leave: Option<usize> = None;
        for i in 0..m {
            if t[i][enter] > zero {
                let ratio = t[i][width - 1] / t[i][enter];
                leave = match leave {
                    None => Some(i),
                    Some(l) => {
                        let best = t[l][width - 1] / t[l][enter];
                        if ratio < best || (ratio == best && basis[i] < basis[l]) {
                            Some(i)
                        } else {
                            Some(l)
                        }
                    }
                };
            }
        }
        let Some(r) = leave else {
            return Err(Error::InvalidQuery("unbounded cover program".into()));
        };
        let pivot = t[r][enter];
        for x in t[r].iter_mut() {
            *x /= pivot;
        }
        for i in 0..=m {
            if i != r && t[i][enter] != zero {
                let f = t[i][enter];
                for j in 0..width {
                    let delta = f * t[r][j];
                    t[i][j] -= delta;
                }
            }
        }
        basis[r] = enter;
    }
    Ok(-t[m][width - 1])
}

// ---------------------------------------------------------------------------
// Enumeration

/// All decompositions whose λ partitions the atoms and whose bags form an
/// acyclic hypergraph, including the single-node one.
pub fn enumerate_ghds(h: &Hypergraph, limits: GhdLimits) -> Result<Vec<Hypertree>> {
    let m = h.edges.len();
    if h.nodes.len() > limits.max_attributes {
        return Err(Error::Limits(format!(
            "{} attributes (limit {})",
            h.nodes.len(),
            limits.max_attributes
        )));
    }
    if m > limits.max_atoms {
        return Err(Error::Limits(format!("{m} atoms (limit {})", limits.max_atoms)));
    }
    if m == 0 {
        return Err(Error::InvalidQuery("query has no atoms".into()));
    }
    let edge_sets: Vec<AttrSet> = h.edges.iter().map(|e| e.1).collect();
    let mut widths: HashMap<AttrSet, Rational> = HashMap::new();
    let mut out = Vec::new();
    // Restricted growth strings enumerate each set partition once.
    let mut group = vec![0usize; m];
    let mut truncated = false;
    'outer: loop {
        let groups = group.iter().max().unwrap() + 1;
        if let Some(tree) = tree_for_partition(&group, groups, &edge_sets, &mut widths)? {
            if out.len() == limits.max_decompositions {
                truncated = true;
                break 'outer;
            }
            out.push(tree);
        }
        // next restricted growth string
        let mut i = m;
        loop {
            if i == 1 {
                break 'outer;
            }
            i -= 1;
            let max_prefix = group[..i].iter().max().copied().unwrap_or(0);
            if group[i] <= max_prefix {
                group[i] += 1;
                for g in group.iter_mut().skip(i + 1) {
                    *g = 0;
                }
                break;
            }
        }
    }
    if truncated {
        log::warn!("decomposition enumeration stopped at {} trees", limits.max_decompositions);
    }
    Ok(out)
}

fn tree_for_partition(
    group: &[usize],
    groups: usize,
    edges: &[AttrSet],
    widths: &mut HashMap<AttrSet, Rational>,
) -> Result<Option<Hypertree>> {
    let mut nodes: Vec<HyperNode> = (0..groups)
        .map(|_| HyperNode {
            bag: AttrSet::EMPTY,
            lambda: Vec::new(),
        })
        .collect();
    for (atom, &g) in group.iter().enumerate() {
        nodes[g].bag = nodes[g].bag.union(edges[atom]);
        nodes[g].lambda.push(atom);
    }
    let tree_edges = max_spanning_tree(&nodes);
    let tree = Hypertree {
        nodes,
        edges: tree_edges,
        fhw: Rational::zero(),
        widths: Vec::new(),
    };
    let n = tree.nodes.len();
    let all = tree.bag_union((1u64 << n) - 1);
    for a in all.iter() {
        let mask = (0..n)
            .filter(|&v| tree.nodes[v].bag.contains(a))
            .fold(0u64, |m, v| m | (1 << v));
        if !tree.is_connected(mask) {
            return Ok(None);
        }
    }
    let mut tree = tree;
    for v in 0..n {
        let bag = tree.nodes[v].bag;
        let w = match widths.get(&bag) {
            Some(w) => *w,
            None => {
                let w = fractional_cover(bag, edges)?;
                widths.insert(bag, w);
                w
            }
        };
        tree.widths.push(w);
    }
    tree.fhw = tree.widths.iter().copied().max().unwrap();
    Ok(Some(tree))
}

/// Prim's algorithm on intersection sizes; ties go to the lowest node ids.
fn max_spanning_tree(nodes: &[HyperNode]) -> Vec<(usize, usize)> {
    let n = nodes.len();
    let mut in_tree = vec![false; n];
    in_tree[0] = true;
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut best: Option<(usize, usize, usize)> = None;
        for u in (0..n).filter(|&u| in_tree[u]) {
            for v in (0..n).filter(|&v| !in_tree[v]) {
                let w = nodes[u].bag.intersect(nodes[v].bag).len();
                if best.map_or(true, |(bw, _, _)| w > bw) {
                    best = Some((w, u, v));
                }
            }
        }
        let (_, u, v) = best.unwrap();
        in_tree[v] = true;
        edges.push((u.min(v), u.max(v)));
    }
    edges
}

fn sorted_bags(t: &Hypertree) -> Vec<Vec<usize>> {
    let mut bags: Vec<Vec<usize>> = t.nodes.iter().map(|n| n.bag.iter().collect()).collect();
    bags.sort();
    bags
}

/// Lowest fhw; then fewer nodes; then smaller total bag size; then
/// lexicographically smallest sorted bag list.
pub fn select_optimal(trees: &[Hypertree]) -> Option<&Hypertree> {
    trees.iter().min_by(|a, b| {
        a.fhw
            .cmp(&b.fhw)
            .then(a.len().cmp(&b.len()))
            .then_with(|| {
                let sa: usize = a.nodes.iter().map(|n| n.bag.len()).sum();
                let sb: usize = b.nodes.iter().map(|n| n.bag.len()).sum();
                sa.cmp(&sb)
            })
            .then_with(|| sorted_bags(a).cmp(&sorted_bags(b)))
    })
}

/// Enumerates decompositions of `q` and returns the selected one.
pub fn optimal_hypertree(q: &QuerySpec, limits: GhdLimits) -> Result<Hypertree> {
    let trees = enumerate_ghds(&crate::relational::hypergraph_of(q), limits)?;
    select_optimal(&trees)
        .cloned()
        .ok_or_else(|| Error::InvalidQuery("no decomposition found".into()))
}

// ---------------------------------------------------------------------------
// Reduced search space

/// A hypertree node whose atoms may be joined ahead of the main query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateRelation {
    pub node: usize,
    pub lambda: Vec<usize>,
    pub schema: AttrSet,
}

/// Nodes with at least two atoms, excluding a node that covers every atom
/// (pre-computing it would be the query itself).
pub fn candidate_relations(t: &Hypertree, q: &QuerySpec) -> Vec<CandidateRelation> {
    t.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.lambda.len() >= 2 && n.lambda.len() < q.atoms().len())
        .map(|(node, n)| CandidateRelation {
            node,
            lambda: n.lambda.clone(),
            schema: n.bag,
        })
        .collect()
}

/// Node permutations in which every prefix induces a connected subtree.
pub fn traversal_orders(t: &Hypertree) -> Vec<Vec<usize>> {
    fn rec(t: &Hypertree, visited: u64, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..t.len() {
            if visited & (1 << v) == 0 && (visited == 0 || t.neighbors(v).any(|w| visited & (1 << w) != 0)) {
                cur.push(v);
                rec(t, visited | (1 << v), cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(t, 0, &mut Vec::new(), &mut out);
    out
}

/// Attribute order induced by a traversal: each node contributes its
/// not-yet-seen attributes, sorted by `rank` (ties by attribute index).
pub fn attribute_order<K: Ord, F: Fn(usize) -> K>(t: &Hypertree, traversal: &[usize], rank: F) -> Vec<usize> {
    let mut seen = AttrSet::EMPTY;
    let mut ord = Vec::new();
    for &v in traversal {
        let mut fresh: Vec<usize> = t.nodes[v].bag.minus(seen).iter().collect();
        fresh.sort_by(|&a, &b| rank(a).cmp(&rank(b)).then(a.cmp(&b)));
        seen = seen.union(t.nodes[v].bag);
        ord.extend(fresh);
    }
    ord
}

/// Every connected-prefix traversal with its induced attribute order.
pub fn valid_orders<K: Ord, F: Fn(usize) -> K>(t: &Hypertree, rank: F) -> Vec<(Vec<usize>, Vec<usize>)> {
    traversal_orders(t)
        .into_iter()
        .map(|o| {
            let ord = attribute_order(t, &o, &rank);
            (o, ord)
        })
        .collect()
}

/// Whether `ord` lists attributes node by node along some connected-prefix
/// traversal, in any order within a node.
pub fn is_valid(ord: &[usize], t: &Hypertree) -> bool {
    fn rec(ord: &[usize], t: &Hypertree, visited: u64, seen: AttrSet, pos: usize, memo: &mut HashMap<u64, bool>) -> bool {
        if pos == ord.len() {
            return true;
        }
        if let Some(&r) = memo.get(&visited) {
            return r;
        }
        let mut ok = false;
        for v in 0..t.len() {
            if visited & (1 << v) != 0 {
                continue;
            }
            if visited != 0 && !t.neighbors(v).any(|w| visited & (1 << w) != 0) {
                continue;
            }
            let fresh = t.nodes[v].bag.minus(seen);
            let k = fresh.len();
            if pos + k > ord.len() {
                continue;
            }
            if AttrSet::from_attrs(ord[pos..pos + k].iter().copied()) == fresh
                && rec(ord, t, visited | (1 << v), seen.union(fresh), pos + k, memo)
            {
                ok = true;
                break;
            }
        }
        memo.insert(visited, ok);
        ok
    }
    let all = t.bag_union((1u64 << t.len()) - 1);
    if AttrSet::from_attrs(ord.iter().copied()) != all || ord.len() != all.len() {
        return false;
    }
    rec(ord, t, 0, AttrSet::EMPTY, 0, &mut HashMap::new())
}
