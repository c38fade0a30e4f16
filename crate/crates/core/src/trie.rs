//! Sorted-array tries.
//!
//! Depth `d` of a trie holds one flat value array plus, for every value that
//! is not a leaf, the half-open range of its children in depth `d + 1`. The
//! children ranges of one depth are contiguous and in order, so the range of
//! node `i` is `offsets[d][i]..offsets[d][i + 1]`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::relational::{Relation, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrieIndex {
    /// `order[d]` is the source relation column stored at depth `d`.
    order: Vec<usize>,
    values: Vec<Vec<Value>>,
    offsets: Vec<Vec<usize>>,
}

impl TrieIndex {
    /// Indexes `r` with its columns visited in `order`.
    pub fn build(r: &Relation, order: &[usize]) -> Result<Self> {
        let arity = r.arity();
        crate::relational::check_permutation(order, arity)
            .map_err(|e| Error::Schema(format!("trie order invalid for {}: {e}", r.name())))?;
        let mut rows: Vec<Value> = Vec::with_capacity(r.as_flat().len());
        for row in r.rows() {
            rows.extend(order.iter().map(|&c| row[c]));
        }
        let mut chunks: Vec<&[Value]> = rows.chunks_exact(arity).collect();
        if order.iter().enumerate().any(|(d, &c)| d != c) {
            chunks.sort_unstable();
        }
        Ok(Self::from_sorted_rows(order.to_vec(), chunks.into_iter()))
    }

    /// Builds from rows already permuted into trie order, sorted and distinct.
    fn from_sorted_rows<'r, I: Iterator<Item = &'r [Value]>>(order: Vec<usize>, rows: I) -> Self {
        let arity = order.len();
        let mut values: Vec<Vec<Value>> = vec![Vec::new(); arity];
        let mut offsets: Vec<Vec<usize>> = vec![Vec::new(); arity.saturating_sub(1)];
        let mut prev: Option<&[Value]> = None;
        for row in rows {
            let first_diff = match prev {
                None => 0,
                Some(p) => {
                    debug_assert!(p < row, "rows must be sorted and distinct");
                    p.iter().zip(row).position(|(a, b)| a != b).unwrap_or(arity)
                }
            };
            for d in first_diff..arity {
                if d + 1 < arity {
                    offsets[d].push(values[d + 1].len());
                }
                values[d].push(row[d]);
            }
            prev = Some(row);
        }
        for d in 0..arity.saturating_sub(1) {
            offsets[d].push(values[d + 1].len());
        }
        TrieIndex {
            order,
            values,
            offsets,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn arity(&self) -> usize {
        self.order.len()
    }

    /// Number of stored tuples (leaves).
    pub fn len(&self) -> usize {
        self.values.last().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn level_values(&self, depth: usize) -> &[Value] {
        &self.values[depth]
    }

    /// Child range of node `index` at `depth`.
    pub fn child_range(&self, depth: usize, index: usize) -> std::ops::Range<usize> {
        self.offsets[depth][index]..self.offsets[depth][index + 1]
    }

    pub fn cursor(&self) -> TrieCursor<'_> {
        TrieCursor::new(self)
    }

    /// All root-to-leaf paths, in trie order, as flat rows.
    pub fn paths(&self) -> Vec<Value> {
        let arity = self.arity();
        let mut out = Vec::with_capacity(self.len() * arity);
        if arity == 0 {
            return out;
        }
        let mut prefix = vec![0; arity];
        self.expand(0, 0..self.values[0].len(), &mut prefix, &mut out);
        out
    }

    fn expand(&self, depth: usize, range: std::ops::Range<usize>, prefix: &mut [Value], out: &mut Vec<Value>) {
        for i in range {
            prefix[depth] = self.values[depth][i];
            if depth + 1 == self.arity() {
                out.extend_from_slice(prefix);
            } else {
                self.expand(depth + 1, self.child_range(depth, i), prefix, out);
            }
        }
    }

    /// Reconstructs the indexed relation with its original column order.
    pub fn to_relation(&self, name: &str, schema: crate::relational::Schema) -> Result<Relation> {
        let arity = self.arity();
        if schema.arity() != arity {
            return Err(Error::Schema(format!("trie of arity {arity} cannot carry schema of arity {}", schema.arity())));
        }
        let paths = self.paths();
        let mut data = vec![0; paths.len()];
        for (src, dst) in paths.chunks_exact(arity).zip(data.chunks_exact_mut(arity)) {
            for (d, &c) in self.order.iter().enumerate() {
                dst[c] = src[d];
            }
        }
        Relation::from_flat(name, schema, data)
    }

    /// Serializes as little-endian `u64` words: arity, order, then per depth
    /// the value count and values, then per inner depth the offset count and offsets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut words: Vec<u64> = Vec::with_capacity(1 + self.arity() * 3 + self.node_count() * 2);
        words.push(self.arity() as u64);
        words.extend(self.order.iter().map(|&c| c as u64));
        for level in &self.values {
            words.push(level.len() as u64);
            words.extend_from_slice(level);
        }
        for offs in &self.offsets {
            words.push(offs.len() as u64);
            words.extend(offs.iter().map(|&o| o as u64));
        }
        let mut out = Vec::with_capacity(words.len() * 8);
        for w in words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Inverse of [`TrieIndex::to_bytes`]; rejects payloads that violate the
    /// trie invariants.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = WordReader { bytes, pos: 0 };
        let arity = r.len_word("arity")?;
        if arity == 0 || arity > 64 {
            return Err(Error::Wire(format!("implausible arity {arity}")));
        }
        let order = (0..arity).map(|_| r.len_word("order")).collect::<Result<Vec<_>>>()?;
        crate::relational::check_permutation(&order, arity).map_err(|e| Error::Wire(e.to_string()))?;
        let mut values = Vec::with_capacity(arity);
        for _ in 0..arity {
            let n = r.len_word("value count")?;
            values.push(r.words(n)?);
        }
        let mut offsets = Vec::with_capacity(arity - 1);
        for d in 0..arity - 1 {
            let n = r.len_word("offset count")?;
            if n != values[d].len() + 1 {
                return Err(Error::Wire(format!("depth {d}: {n} offsets for {} values", values[d].len())));
            }
            offsets.push(r.words(n)?.into_iter().map(|o| o as usize).collect::<Vec<_>>());
        }
        if r.pos != bytes.len() {
            return Err(Error::Wire(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let trie = TrieIndex {
            order,
            values,
            offsets,
        };
        trie.validate().map_err(Error::Wire)?;
        Ok(trie)
    }

    /// Checks the structural invariants; used on untrusted payloads and in tests.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let arity = self.arity();
        let increasing = |vals: &[Value], range: std::ops::Range<usize>| vals[range].windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.values[0], 0..self.values[0].len()) {
            return Err("root values not strictly increasing".into());
        }
        for d in 0..arity.saturating_sub(1) {
            let offs = &self.offsets[d];
            if offs.first() != Some(&0) || offs.last() != Some(&self.values[d + 1].len()) {
                return Err(format!("depth {d}: child ranges do not cover depth {}", d + 1));
            }
            for i in 0..self.values[d].len() {
                let range = offs[i]..offs[i + 1];
                if range.is_empty() {
                    return Err(format!("depth {d}: node {i} has no children"));
                }
                if !increasing(&self.values[d + 1], range) {
                    return Err(format!("depth {d}: children of node {i} not strictly increasing"));
                }
            }
        }
        Ok(())
    }
}

struct WordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl WordReader<'_> {
    fn word(&mut self) -> Result<u64> {
        let end = self.pos + 8;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Wire("truncated payload".into()))?;
        self.pos = end;
        Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
    }

    fn len_word(&mut self, what: &str) -> Result<usize> {
        let w = self.word()?;
        let remaining = (self.bytes.len() - self.pos) as u64 / 8;
        if w > remaining.max(64) {
            return Err(Error::Wire(format!("{what} {w} exceeds payload")));
        }
        Ok(w as usize)
    }

    fn words(&mut self, n: usize) -> Result<Vec<u64>> {
        (0..n).map(|_| self.word()).collect()
    }
}

/// Unions tries that share an order. Equivalent to rebuilding from the union
/// of their tuples, but merges the already-sorted paths instead of re-sorting.
pub fn merge_block_tries(blocks: &[&TrieIndex]) -> Result<TrieIndex> {
    let Some(first) = blocks.first() else {
        return Err(Error::Schema("cannot merge an empty list of tries".into()));
    };
    if let Some(bad) = blocks.iter().find(|b| b.order != first.order) {
        return Err(Error::Schema(format!(
            "trie order mismatch: {:?} vs {:?}",
            first.order, bad.order
        )));
    }
    let arity = first.arity();
    if blocks.len() == 1 {
        return Ok((*first).clone());
    }
    let paths: Vec<Vec<Value>> = blocks.iter().map(|b| b.paths()).collect();
    let mut heap = BinaryHeap::with_capacity(blocks.len());
    for (b, p) in paths.iter().enumerate() {
        if !p.is_empty() {
            heap.push(Reverse((&p[..arity], b, 0usize)));
        }
    }
    let mut merged: Vec<&[Value]> = Vec::with_capacity(paths.iter().map(|p| p.len() / arity).sum());
    while let Some(Reverse((row, b, i))) = heap.pop() {
        if merged.last() != Some(&row) {
            merged.push(row);
        }
        let next = (i + 1) * arity;
        if next < paths[b].len() {
            heap.push(Reverse((&paths[b][next..next + arity], b, i + 1)));
        }
    }
    Ok(TrieIndex::from_sorted_rows(first.order.clone(), merged.into_iter()))
}

/// Iterator over one trie, positioned on a root-to-node path.
///
/// Protocol violations (moving up from the root, opening below a leaf or
/// from an exhausted level) panic.
#[derive(Debug, Clone)]
pub struct TrieCursor<'a> {
    trie: &'a TrieIndex,
    pos: Vec<usize>,
    end: Vec<usize>,
}

impl<'a> TrieCursor<'a> {
    pub fn new(trie: &'a TrieIndex) -> Self {
        TrieCursor {
            trie,
            pos: Vec::with_capacity(trie.arity()),
            end: Vec::with_capacity(trie.arity()),
        }
    }

    /// Number of opened levels; 0 at the root.
    pub fn depth(&self) -> usize {
        self.pos.len()
    }

    /// Descends to the first child of the current node.
    pub fn open(&mut self) {
        let depth = self.depth();
        assert!(depth < self.trie.arity(), "open below a leaf at depth {depth}");
        let range = if depth == 0 {
            0..self.trie.values[0].len()
        } else {
            assert!(!self.at_end(), "open from an exhausted level");
            self.trie.child_range(depth - 1, self.pos[depth - 1])
        };
        self.pos.push(range.start);
        self.end.push(range.end);
    }

    /// Returns to the parent level, restoring its position.
    pub fn up(&mut self) {
        assert!(self.depth() > 0, "up at the root");
        self.pos.pop();
        self.end.pop();
    }

    pub fn at_end(&self) -> bool {
        let d = self.depth();
        assert!(d > 0, "no open level");
        self.pos[d - 1] >= self.end[d - 1]
    }

    pub fn key(&self) -> Value {
        assert!(!self.at_end(), "key of an exhausted level");
        let d = self.depth() - 1;
        self.trie.values[d][self.pos[d]]
    }

    fn current(&self) -> Option<Value> {
        if self.at_end() {
            None
        } else {
            Some(self.key())
        }
    }

    pub fn next(&mut self) -> Option<Value> {
        let d = self.depth();
        assert!(d > 0, "no open level");
        if self.pos[d - 1] < self.end[d - 1] {
            self.pos[d - 1] += 1;
        }
        self.current()
    }

    /// Moves to the least value `>= lo` in the current range, never backwards.
    pub fn seek(&mut self, lo: Value) -> Option<Value> {
        let d = self.depth();
        assert!(d > 0, "no open level");
        let vals = &self.trie.values[d - 1];
        let (start, end) = (self.pos[d - 1], self.end[d - 1]);
        if start >= end || vals[start] >= lo {
            return self.current();
        }
        // Gallop: find a bound with vals[hi] >= lo, then binary search.
        let mut step = 1;
        let mut lo_idx = start;
        let mut hi = start + 1;
        while hi < end && vals[hi] < lo {
            lo_idx = hi;
            step *= 2;
            hi = (start + step).min(end);
        }
        let found = lo_idx + 1 + vals[lo_idx + 1..hi].partition_point(|&v| v < lo);
        self.pos[d - 1] = found;
        self.current()
    }

    /// Values of the current level from the cursor position to the end of its range.
    pub fn remaining(&self) -> &'a [Value] {
        let d = self.depth();
        assert!(d > 0, "no open level");
        let (p, e) = (self.pos[d - 1], self.end[d - 1]);
        &self.trie.values[d - 1][p.min(e)..e]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::Schema;
    use proptest::prelude::*;

    fn rel(rows: &[&[u64]]) -> Relation {
        let arity = rows.first().map_or(2, |r| r.len());
        let names: Vec<String> = (0..arity).map(|i| format!("c{i}")).collect();
        Relation::new("R", Schema::from_names(&names).unwrap(), rows.iter().copied()).unwrap()
    }

    #[test]
    fn builds_r2_example() {
        let r = rel(&[&[1, 3], &[1, 4], &[4, 5]]);
        let t = TrieIndex::build(&r, &[0, 1]).unwrap();
        assert_eq!(t.level_values(0), &[1, 4]);
        assert_eq!(&t.level_values(1)[t.child_range(0, 0)], &[3, 4]);
        assert_eq!(&t.level_values(1)[t.child_range(0, 1)], &[5]);
        t.validate().unwrap();
    }

    #[test]
    fn empty_relation() {
        let r = Relation::empty("E", Schema::from_names(&["a", "b"]).unwrap());
        let t = TrieIndex::build(&r, &[1, 0]).unwrap();
        assert!(t.level_values(0).is_empty());
        assert!(t.is_empty());
        let mut c = t.cursor();
        c.open();
        assert!(c.at_end());
        assert_eq!(c.seek(0), None);
    }

    #[test]
    fn rejects_bad_order() {
        let r = rel(&[&[1, 2]]);
        assert!(TrieIndex::build(&r, &[0, 0]).is_err());
        assert!(TrieIndex::build(&r, &[0]).is_err());
    }

    #[test]
    fn reordered_build() {
        let r = rel(&[&[1, 3], &[1, 4], &[4, 3]]);
        let t = TrieIndex::build(&r, &[1, 0]).unwrap();
        assert_eq!(t.level_values(0), &[3, 4]);
        assert_eq!(&t.level_values(1)[t.child_range(0, 0)], &[1, 4]);
        assert_eq!(t.to_relation("R", r.schema().clone()).unwrap(), r);
    }

    #[test]
    fn cursor_seek_and_next() {
        let r = rel(&[&[1, 3], &[1, 4], &[4, 5]]);
        let t = TrieIndex::build(&r, &[0, 1]).unwrap();
        let mut c = t.cursor();
        c.open();
        assert_eq!(c.seek(2), Some(4));
        assert_eq!(c.seek(1), Some(4), "seek never moves backwards");
        assert_eq!(c.seek(5), None);

        let mut c = t.cursor();
        c.open();
        assert_eq!(c.key(), 1);
        c.open();
        assert_eq!(c.key(), 3);
        assert_eq!(c.next(), Some(4));
        assert_eq!(c.next(), None);
        c.up();
        assert_eq!(c.key(), 1);
        assert_eq!(c.next(), Some(4));
        c.open();
        assert_eq!(c.remaining(), &[5]);
    }

    #[test]
    #[should_panic(expected = "up at the root")]
    fn up_at_root_panics() {
        let t = TrieIndex::build(&rel(&[&[1, 2]]), &[0, 1]).unwrap();
        t.cursor().up();
    }

    #[test]
    #[should_panic(expected = "open below a leaf")]
    fn open_at_leaf_panics() {
        let t = TrieIndex::build(&rel(&[&[1, 2]]), &[0, 1]).unwrap();
        let mut c = t.cursor();
        c.open();
        c.open();
        c.open();
    }

    #[test]
    fn merges_blocks() {
        let a = TrieIndex::build(&rel(&[&[1, 3]]), &[0, 1]).unwrap();
        let b = TrieIndex::build(&rel(&[&[4, 5]]), &[0, 1]).unwrap();
        let m = merge_block_tries(&[&a, &b]).unwrap();
        assert_eq!(m, TrieIndex::build(&rel(&[&[1, 3], &[4, 5]]), &[0, 1]).unwrap());

        let c = TrieIndex::build(&rel(&[&[1, 4]]), &[0, 1]).unwrap();
        let m = merge_block_tries(&[&a, &c]).unwrap();
        assert_eq!(m.level_values(0), &[1]);
        assert_eq!(&m.level_values(1)[m.child_range(0, 0)], &[3, 4]);

        let flipped = TrieIndex::build(&rel(&[&[1, 4]]), &[1, 0]).unwrap();
        assert!(merge_block_tries(&[&a, &flipped]).is_err());
    }

    #[test]
    fn wire_rejects_corruption() {
        let t = TrieIndex::build(&rel(&[&[1, 3], &[1, 4], &[4, 5]]), &[0, 1]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(TrieIndex::from_bytes(&bytes).unwrap(), t);
        assert!(TrieIndex::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut unsorted = bytes.clone();
        // first root value (word 4: arity, order x2, count, value) -> 9 > 4
        unsorted[32..40].copy_from_slice(&9u64.to_le_bytes());
        assert!(TrieIndex::from_bytes(&unsorted).is_err());
    }

    fn arb_relation(arity: usize) -> impl Strategy<Value = Relation> {
        prop::collection::vec(prop::collection::vec(0u64..40, arity), 0..300).prop_map(move |rows| {
            let names: Vec<String> = (0..arity).map(|i| format!("c{i}")).collect();
            Relation::new("R", Schema::from_names(&names).unwrap(), rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn paths_reproduce_relation(r in arb_relation(3), perm in Just(vec![0usize,1,2]).prop_shuffle()) {
            let t = TrieIndex::build(&r, &perm).unwrap();
            prop_assert!(t.validate().is_ok());
            prop_assert!(t.node_count() <= 3 * r.len());
            let mut expect: Vec<Vec<u64>> = r.rows().map(|row| perm.iter().map(|&c| row[c]).collect()).collect();
            expect.sort();
            let got: Vec<Vec<u64>> = t.paths().chunks_exact(3).map(<[u64]>::to_vec).collect();
            prop_assert_eq!(got, expect);
            prop_assert_eq!(t.to_relation("R", r.schema().clone()).unwrap(), r);
        }

        #[test]
        fn seek_matches_binary_search(r in arb_relation(2), probes in prop::collection::vec(0u64..45, 1..20)) {
            let t = TrieIndex::build(&r, &[0, 1]).unwrap();
            for parent in 0..t.level_values(0).len() {
                let children = &t.level_values(1)[t.child_range(0, parent)];
                let mut c = t.cursor();
                c.open();
                c.seek(t.level_values(0)[parent]);
                c.open();
                let mut sorted = probes.clone();
                sorted.sort();
                for lo in sorted {
                    let start = children.len() - c.remaining().len();
                    let idx = start + children[start..].partition_point(|&v| v < lo);
                    prop_assert_eq!(c.seek(lo), children.get(idx).copied());
                }
            }
        }

        #[test]
        fn wire_round_trip(r in arb_relation(3)) {
            let t = TrieIndex::build(&r, &[2, 0, 1]).unwrap();
            prop_assert_eq!(TrieIndex::from_bytes(&t.to_bytes()).unwrap(), t);
        }

        #[test]
        fn merge_equals_union_build(r in arb_relation(2), parts in 1usize..6) {
            let blocks: Vec<TrieIndex> = (0..parts)
                .map(|p| TrieIndex::build(&r.filter(|row| row[0] as usize % parts == p), &[0, 1]).unwrap())
                .collect();
            let refs: Vec<&TrieIndex> = blocks.iter().collect();
            prop_assert_eq!(merge_block_tries(&refs).unwrap(), TrieIndex::build(&r, &[0, 1]).unwrap());
        }
    }
}
