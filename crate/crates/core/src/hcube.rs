//! HCube one-round shuffle.
//!
//! The output space is split into `P = Π p_i` hypercubes. A tuple of a
//! relation is routed to every hypercube whose coordinate agrees with the
//! tuple's attribute hashes on that relation's attributes; the other
//! components are wildcards. For the pull-based variant, each relation is
//! grouped into blocks keyed by those hashes and workers fetch whole blocks.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{AttrSet, Relation, Value};
use crate::trie::TrieIndex;

/// Per-attribute partition counts, indexed by query attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShareVector(Vec<u32>);

impl ShareVector {
    pub fn new(p: Vec<u32>) -> Result<Self> {
        if p.iter().any(|&x| x == 0) {
            return Err(Error::Config(format!("share vector {p:?} has a zero component")));
        }
        Ok(ShareVector(p))
    }

    pub fn ones(n: usize) -> Self {
        ShareVector(vec![1; n])
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn get(&self, attr: usize) -> u32 {
        self.0[attr]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of hypercubes.
    pub fn hypercubes(&self) -> u64 {
        self.0.iter().map(|&x| x as u64).product()
    }

    /// Product of shares over `attrs`.
    pub fn product_over(&self, attrs: AttrSet) -> u64 {
        attrs.iter().map(|a| self.0[a] as u64).product()
    }

    /// All coordinates in lexicographic order (last attribute varies fastest).
    pub fn coordinates(&self) -> Vec<Coordinate> {
        let n = self.0.len();
        let total = self.hypercubes() as usize;
        let mut out = Vec::with_capacity(total);
        let mut c = vec![0u32; n];
        for _ in 0..total {
            out.push(Coordinate(c.clone()));
            for i in (0..n).rev() {
                c[i] += 1;
                if c[i] < self.0[i] {
                    break;
                }
                c[i] = 0;
            }
        }
        out
    }
}

impl std::fmt::Display for ShareVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coordinate(pub Vec<u32>);

impl Coordinate {
    /// Components at the given attribute positions.
    pub fn restrict(&self, vars: &[usize]) -> Vec<u32> {
        vars.iter().map(|&a| self.0[a]).collect()
    }
}

/// Per-attribute hash functions `h_i: value -> [0, p_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HashFamily {
    /// `h_i(x) = x mod p_i`.
    Modulo,
    /// Multiply-shift on the low 64 bits with per-attribute odd multipliers
    /// derived from the seed, reduced to `[0, p_i)` by a high-bits multiply.
    MultiplyShift { seed: u64 },
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl HashFamily {
    pub fn hash(&self, attr: usize, value: Value, parts: u32) -> u32 {
        if parts == 1 {
            return 0;
        }
        match *self {
            HashFamily::Modulo => (value % parts as u64) as u32,
            HashFamily::MultiplyShift { seed } => {
                let mult = splitmix64(seed ^ (attr as u64).wrapping_mul(0xA24B_AED4_963E_E407)) | 1;
                let add = splitmix64(mult);
                let h = (value.wrapping_mul(mult).wrapping_add(add) >> 32) as u64;
                ((h * parts as u64) >> 32) as u32
            }
        }
    }
}

/// Identifies a block: one relation's tuples sharing their attribute hashes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub relation: String,
    pub signature: Vec<u32>,
}

/// Hashes of `tuple`'s values, where column `j` holds attribute `vars[j]`.
pub fn signature_of(tuple: &[Value], vars: &[usize], p: &ShareVector, h: &HashFamily) -> Vec<u32> {
    tuple
        .iter()
        .zip(vars)
        .map(|(&v, &a)| h.hash(a, v, p.get(a)))
        .collect()
}

/// Coordinates among `coords` that receive `tuple`.
pub fn destinations(
    tuple: &[Value],
    vars: &[usize],
    p: &ShareVector,
    h: &HashFamily,
    coords: &[Coordinate],
) -> Vec<Coordinate> {
    let sig = signature_of(tuple, vars, p, h);
    coords
        .iter()
        .filter(|c| c.restrict(vars) == sig)
        .cloned()
        .collect()
}

/// Copies of each tuple of a relation over `attrs` made by the shuffle.
pub fn dup(attrs: AttrSet, all: AttrSet, p: &ShareVector) -> u64 {
    p.product_over(all.minus(attrs))
}

/// Average fraction of a relation over `attrs` received per hypercube.
pub fn frac(attrs: AttrSet, p: &ShareVector) -> Ratio<u64> {
    Ratio::new(1, p.product_over(attrs))
}

/// Hypercube-to-worker assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub coordinates: Vec<Coordinate>,
    /// `owner[k]` is the worker of `coordinates[k]`.
    pub owner: Vec<usize>,
    pub workers: usize,
}

impl Assignment {
    pub fn of_worker(&self, worker: usize) -> Vec<&Coordinate> {
        self.coordinates
            .iter()
            .zip(&self.owner)
            .filter(|(_, &w)| w == worker)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.workers];
        for &w in &self.owner {
            loads[w] += 1;
        }
        loads
    }
}

/// Round-robin over coordinates in lexicographic order.
pub fn assign_hypercubes(p: &ShareVector, workers: usize) -> Result<Assignment> {
    if workers == 0 {
        return Err(Error::Config("at least one worker is required".into()));
    }
    let coordinates = p.coordinates();
    let owner = (0..coordinates.len()).map(|k| k % workers).collect();
    Ok(Assignment {
        coordinates,
        owner,
        workers,
    })
}

/// Blocks of one relation keyed by signature, each with a pre-built trie.
#[derive(Debug, Clone)]
pub struct BlockMap {
    pub relation: String,
    pub blocks: BTreeMap<Vec<u32>, TrieIndex>,
}

impl BlockMap {
    pub fn tuple_count(&self) -> usize {
        self.blocks.values().map(TrieIndex::len).sum()
    }

    pub fn get(&self, signature: &[u32]) -> Option<&TrieIndex> {
        self.blocks.get(signature)
    }
}

/// Partitions `r` (column `j` holding attribute `vars[j]`) by signature and
/// indexes each part with `trie_order`.
pub fn group_blocks(
    r: &Relation,
    vars: &[usize],
    p: &ShareVector,
    h: &HashFamily,
    trie_order: &[usize],
) -> Result<BlockMap> {
    if vars.len() != r.arity() {
        return Err(Error::Schema(format!(
            "{} columns for relation {} of arity {}",
            vars.len(),
            r.name(),
            r.arity()
        )));
    }
    let mut parts: BTreeMap<Vec<u32>, Vec<Value>> = BTreeMap::new();
    for row in r.rows() {
        parts
            .entry(signature_of(row, vars, p, h))
            .or_default()
            .extend_from_slice(row);
    }
    let blocks = parts
        .into_iter()
        .map(|(sig, data)| {
            let part = Relation::from_sorted_flat(r.name(), r.schema().clone(), data);
            Ok((sig, TrieIndex::build(&part, trie_order)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(BlockMap {
        relation: r.name().to_string(),
        blocks,
    })
}

/// Blocks a worker at `coord` pulls: per relation, the one whose signature
/// equals the coordinate restricted to the relation's attributes.
pub fn pull_plan<'a, I>(coord: &Coordinate, relations: I) -> Vec<BlockKey>
where
    I: IntoIterator<Item = (&'a str, &'a [usize])>,
{
    relations
        .into_iter()
        .map(|(name, vars)| BlockKey {
            relation: name.to_string(),
            signature: coord.restrict(vars),
        })
        .collect()
}

/// Block wire format: `u32` name length, name bytes, `u32` signature length,
/// `u32` components, then the trie payload. All integers little-endian.
pub fn encode_block(key: &BlockKey, trie: &TrieIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(key.relation.len() as u32).to_le_bytes());
    out.extend_from_slice(key.relation.as_bytes());
    out.extend_from_slice(&(key.signature.len() as u32).to_le_bytes());
    for s in &key.signature {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&trie.to_bytes());
    out
}

pub fn decode_block(bytes: &[u8]) -> Result<(BlockKey, TrieIndex)> {
    let mut pos = 0;
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let chunk = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| Error::Wire("truncated block header".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    };
    let name_len = u32_at(&mut pos)? as usize;
    let name = bytes
        .get(pos..pos + name_len)
        .ok_or_else(|| Error::Wire("truncated relation name".into()))?;
    let relation = String::from_utf8(name.to_vec()).map_err(|e| Error::Wire(e.to_string()))?;
    pos += name_len;
    let sig_len = u32_at(&mut pos)? as usize;
    if sig_len > 64 {
        return Err(Error::Wire(format!("signature of length {sig_len}")));
    }
    let signature = (0..sig_len).map(|_| u32_at(&mut pos)).collect::<Result<Vec<_>>>()?;
    let trie = TrieIndex::from_bytes(&bytes[pos..])?;
    if trie.arity() != signature.len() {
        return Err(Error::Wire(format!(
            "block {relation}{signature:?} carries a trie of arity {}",
            trie.arity()
        )));
    }
    Ok((BlockKey { relation, signature }, trie))
}
