//! Built-in queries and small synthetic datasets.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::relational::{parse_query, Database, QuerySpec, Relation, Schema, Value};

/// The five-relation query used throughout the examples and tests.
pub const RUNNING_EXAMPLE: &str = "Q(a,b,c,d,e) :- R1(a,b,c), R2(a,d), R3(c,d), R4(b,e), R5(c,e).";

/// Subgraph-pattern queries, each atom ranging over a copy of one graph.
pub const QUERY_CORPUS: [(&str, &str); 6] = [
    ("Q1", "Q1(a,b,c) :- R1(a,b), R2(b,c), R3(a,c)."),
    (
        "Q2",
        "Q2(a,b,c,d) :- R1(a,b), R2(b,c), R3(c,d), R4(d,a), R5(a,c), R6(b,d).",
    ),
    (
        "Q3",
        "Q3(a,b,c,d,e) :- R1(a,b), R2(b,c), R3(c,d), R4(d,e), R5(e,a), R6(b,d), R7(b,e), R8(c,a), R9(c,e), R10(a,d).",
    ),
    (
        "Q4",
        "Q4(a,b,c,d,e) :- R1(a,b), R2(b,c), R3(c,d), R4(d,e), R5(e,a), R6(b,e).",
    ),
    (
        "Q5",
        "Q5(a,b,c,d,e) :- R1(a,b), R2(b,c), R3(c,d), R4(d,e), R5(e,a), R6(b,e), R7(b,d).",
    ),
    (
        "Q6",
        "Q6(a,b,c,d,e) :- R1(a,b), R2(b,c), R3(c,d), R4(d,e), R5(e,a), R6(b,e), R7(b,d), R8(c,e).",
    ),
];

pub fn query(name: &str) -> Option<QuerySpec> {
    QUERY_CORPUS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, text)| parse_query(text).expect("corpus queries parse"))
}

fn rel(name: &str, attrs: &[&str], rows: &[&[Value]]) -> Relation {
    Relation::new(name, Schema::from_names(attrs).unwrap(), rows.iter().copied()).unwrap()
}

/// The running example's query with a small five-relation database.
///
/// Under `p = (1,2,2,1,1)` and `h(x) = x mod p`, the first tuple of R1 is
/// `(1,2,2)`, R2 projects `{1,4}` on `a`, R3 splits into two blocks and
/// `R4 ⋈ R5` has six tuples.
pub fn running_example() -> (QuerySpec, Database) {
    let q = parse_query(RUNNING_EXAMPLE).unwrap();
    let db: Database = [
        rel("R1", &["a", "b", "c"], &[&[1, 2, 2], &[1, 3, 1], &[2, 1, 2], &[4, 3, 2]]),
        rel("R2", &["a", "d"], &[&[1, 1], &[1, 2], &[4, 2]]),
        rel("R3", &["c", "d"], &[&[1, 1], &[1, 2], &[2, 1], &[2, 2]]),
        rel("R4", &["b", "e"], &[&[2, 1], &[2, 2], &[3, 1], &[1, 2]]),
        rel("R5", &["c", "e"], &[&[1, 1], &[2, 1], &[2, 2], &[1, 3]]),
    ]
    .into_iter()
    .collect();
    (q, db)
}

fn edge_relation(name: &str, edges: impl IntoIterator<Item = (Value, Value)>) -> Relation {
    let data: Vec<Value> = edges.into_iter().flat_map(|(a, b)| [a, b]).collect();
    Relation::from_flat(name, Schema::from_names(&["src", "dst"]).unwrap(), data).unwrap()
}

/// `edges` distinct directed edges without self-loops over `nodes` nodes.
pub fn random_graph(nodes: u64, edges: usize, seed: u64) -> Relation {
    assert!(nodes >= 2 && (edges as u64) <= nodes * (nodes - 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::new();
    while set.len() < edges {
        let a = rng.gen_range(0..nodes);
        let b = rng.gen_range(0..nodes);
        if a != b {
            set.insert((a, b));
        }
    }
    edge_relation("G", set)
}

/// Random graph plus `hubs` hub nodes, each linked in both directions to
/// `hub_degree` random nodes and to every other hub.
pub fn hub_graph(nodes: u64, background_edges: usize, hubs: u64, hub_degree: usize, seed: u64) -> Relation {
    assert!(hubs < nodes && hub_degree as u64 <= nodes - hubs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = BTreeSet::new();
    while set.len() < background_edges {
        let a = rng.gen_range(hubs..nodes);
        let b = rng.gen_range(hubs..nodes);
        if a != b {
            set.insert((a, b));
        }
    }
    for h in 0..hubs {
        let mut linked = BTreeSet::new();
        while linked.len() < hub_degree {
            linked.insert(rng.gen_range(hubs..nodes));
        }
        for v in linked {
            set.insert((h, v));
            set.insert((v, h));
        }
        for other in 0..hubs {
            if other != h {
                set.insert((h, other));
            }
        }
    }
    edge_relation("G", set)
}

/// Binds every atom of `q` to a copy of `graph` named after the atom's relation.
pub fn bind_graph(q: &QuerySpec, graph: &Relation) -> Database {
    q.atoms().iter().map(|a| graph.renamed(a.relation.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::pairwise_join_oracle;

    #[test]
    fn corpus_parses() {
        let sizes: Vec<(usize, usize)> = QUERY_CORPUS
            .iter()
            .map(|(n, _)| {
                let q = query(n).unwrap();
                (q.num_attributes(), q.atoms().len())
            })
            .collect();
        assert_eq!(sizes, vec![(3, 3), (4, 6), (5, 10), (5, 6), (5, 7), (5, 8)]);
    }

    #[test]
    fn running_example_properties() {
        let (q, db) = running_example();
        assert_eq!(db.get("R1").unwrap().row(0), &[1, 2, 2]);
        assert_eq!(db.get("R2").unwrap().project(0), vec![1, 4]);
        let sub = parse_query("S(b,e,c) :- R4(b,e), R5(c,e).").unwrap();
        assert_eq!(pairwise_join_oracle(&db, &sub).unwrap().len(), 6);
        assert!(!pairwise_join_oracle(&db, &q).unwrap().is_empty());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(random_graph(100, 500, 1), random_graph(100, 500, 1));
        assert_eq!(random_graph(100, 500, 1).len(), 500);
        let g = hub_graph(300, 400, 5, 50, 2);
        assert_eq!(g, hub_graph(300, 400, 5, 50, 2));
        assert!(g.rows().filter(|r| r[0] == 0).count() >= 50);
    }
}
