//! Relations, databases and natural-join queries.
//!
//! A relation is a duplicate-free set of fixed-arity tuples of `u64` values,
//! stored row-major and kept in lexicographic order. Queries are rules of the
//! form `Q(..) :- R1(a,b), R2(b,c), ...`; atoms bind relation columns to query
//! attributes positionally.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type Value = u64;

/// Maximum number of attributes a query may mention (attribute sets are `u64` masks).
pub const MAX_ATTRIBUTES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeId {
    pub name: String,
    pub index: usize,
}

/// A set of attribute indices, backed by a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, serde::Serialize, serde::Deserialize)]
pub struct AttrSet(pub u64);

impl AttrSet {
    pub const EMPTY: AttrSet = AttrSet(0);

    pub fn singleton(attr: usize) -> Self {
        AttrSet(1 << attr)
    }

    pub fn from_attrs<I: IntoIterator<Item = usize>>(attrs: I) -> Self {
        attrs.into_iter().fold(AttrSet::EMPTY, |s, a| s.with(a))
    }

    pub fn with(self, attr: usize) -> Self {
        AttrSet(self.0 | (1 << attr))
    }

    pub fn contains(self, attr: usize) -> bool {
        self.0 & (1 << attr) != 0
    }

    pub fn union(self, other: AttrSet) -> Self {
        AttrSet(self.0 | other.0)
    }

    pub fn intersect(self, other: AttrSet) -> Self {
        AttrSet(self.0 & other.0)
    }

    pub fn minus(self, other: AttrSet) -> Self {
        AttrSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: AttrSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let a = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(a)
            }
        })
    }
}

/// Ordered, duplicate-free list of attributes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Schema {
    attrs: Vec<AttributeId>,
}

impl Schema {
    pub fn new(attrs: Vec<AttributeId>) -> Result<Self> {
        for (i, a) in attrs.iter().enumerate() {
            if attrs[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Schema(format!("duplicate attribute `{}`", a.name)));
            }
        }
        Ok(Schema { attrs })
    }

    /// Schema whose attribute indices are positions in the list.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Schema::new(
            names
                .iter()
                .enumerate()
                .map(|(index, n)| AttributeId {
                    name: n.as_ref().to_string(),
                    index,
                })
                .collect(),
        )
    }

    pub fn attrs(&self) -> &[AttributeId] {
        &self.attrs
    }

    pub fn arity(&self) -> usize {
        self.attrs.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attrs.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|a| a.name == name)
    }
}

/// A set of tuples over a schema.
///
/// Rows are stored flat and sorted lexicographically; equal relations have
/// identical storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    name: String,
    schema: Schema,
    data: Vec<Value>,
}

impl Relation {
    pub fn new<I, T>(name: impl Into<String>, schema: Schema, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[Value]>,
    {
        let arity = schema.arity();
        let mut data = Vec::new();
        for row in rows {
            let row = row.as_ref();
            if row.len() != arity {
                return Err(Error::Schema(format!(
                    "tuple of length {} for schema of arity {}",
                    row.len(),
                    arity
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(name, schema, data)
    }

    /// Builds a relation from row-major values, sorting and removing duplicates.
    pub fn from_flat(name: impl Into<String>, schema: Schema, data: Vec<Value>) -> Result<Self> {
        let arity = schema.arity();
        if arity == 0 {
            return Err(Error::Schema("relations must have at least one attribute".into()));
        }
        if data.len() % arity != 0 {
            return Err(Error::Schema(format!(
                "{} values do not divide into rows of arity {}",
                data.len(),
                arity
            )));
        }
        let mut rows: Vec<&[Value]> = data.chunks_exact(arity).collect();
        rows.sort_unstable();
        rows.dedup();
        let data = rows.concat();
        Ok(Relation {
            name: name.into(),
            schema,
            data,
        })
    }

    /// Wraps rows that are already sorted and duplicate-free.
    pub(crate) fn from_sorted_flat(name: impl Into<String>, schema: Schema, data: Vec<Value>) -> Self {
        debug_assert!(data.chunks_exact(schema.arity()).zip(data.chunks_exact(schema.arity()).skip(1)).all(|(a, b)| a < b));
        Relation {
            name: name.into(),
            schema,
            data,
        }
    }

    pub fn empty(name: impl Into<String>, schema: Schema) -> Self {
        Relation {
            name: name.into(),
            schema,
            data: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn arity(&self) -> usize {
        self.schema.arity()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.arity()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[Value]> + '_ {
        self.data.chunks_exact(self.arity())
    }

    pub fn row(&self, i: usize) -> &[Value] {
        let a = self.arity();
        &self.data[i * a..(i + 1) * a]
    }

    pub fn as_flat(&self) -> &[Value] {
        &self.data
    }

    pub fn contains(&self, row: &[Value]) -> bool {
        let a = self.arity();
        let n = self.len();
        let (mut lo, mut hi) = (0, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.data[mid * a..(mid + 1) * a].cmp(row) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }

    /// Sorted distinct values of one column.
    pub fn project(&self, column: usize) -> Vec<Value> {
        let mut vals: Vec<Value> = self.rows().map(|r| r[column]).collect();
        vals.sort_unstable();
        vals.dedup();
        vals
    }

    pub fn filter<F: FnMut(&[Value]) -> bool>(&self, mut keep: F) -> Relation {
        let mut data = Vec::new();
        for r in self.rows() {
            if keep(r) {
                data.extend_from_slice(r);
            }
        }
        Relation::from_sorted_flat(self.name.clone(), self.schema.clone(), data)
    }

    pub fn renamed(&self, name: impl Into<String>) -> Relation {
        Relation {
            name: name.into(),
            ..self.clone()
        }
    }

    pub fn with_schema(&self, schema: Schema) -> Result<Relation> {
        if schema.arity() != self.arity() {
            return Err(Error::Schema(format!(
                "cannot relabel arity {} relation with arity {} schema",
                self.arity(),
                schema.arity()
            )));
        }
        Ok(Relation {
            schema,
            ..self.clone()
        })
    }
}

/// Named relations.
#[derive(Debug, Clone, Default)]
pub struct Database {
    relations: BTreeMap<String, Relation>,
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, relation: Relation) {
        self.relations.insert(relation.name().to_string(), relation);
    }

    pub fn get(&self, name: &str) -> Result<&Relation> {
        self.relations
            .get(name)
            .ok_or_else(|| Error::MissingRelation(name.to_string()))
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn total_tuples(&self) -> usize {
        self.relations.values().map(Relation::len).sum()
    }

    /// Resolves every atom of `q` to its relation, checking arities.
    pub fn atom_relations(&self, q: &QuerySpec) -> Result<Vec<&Relation>> {
        q.atoms()
            .iter()
            .map(|atom| {
                let r = self.get(&atom.relation)?;
                if r.arity() != atom.vars.len() {
                    return Err(Error::Schema(format!(
                        "atom {} has {} variables but relation has arity {}",
                        atom.relation,
                        atom.vars.len(),
                        r.arity()
                    )));
                }
                Ok(r)
            })
            .collect()
    }
}

/// Gives every atom its own relation: a relation used by several atoms is
/// copied once per atom under the name `relation#atom`. Returns the rewritten
/// query and a database holding exactly its relations.
pub fn isolate_atoms(q: &QuerySpec, db: &Database) -> Result<(QuerySpec, Database)> {
    let rels = db.atom_relations(q)?;
    let mut out = Database::new();
    let mut atoms = Vec::with_capacity(q.atoms().len());
    for (i, (atom, r)) in q.atoms().iter().zip(rels).enumerate() {
        let shared = q.atoms().iter().filter(|a| a.relation == atom.relation).count() > 1;
        let name = if shared {
            format!("{}#{}", atom.relation, i)
        } else {
            atom.relation.clone()
        };
        out.insert(r.renamed(name.clone()));
        atoms.push(Atom {
            relation: name,
            vars: atom.vars.clone(),
        });
    }
    Ok((q.with_atoms(q.name(), atoms)?, out))
}

impl FromIterator<Relation> for Database {
    fn from_iter<I: IntoIterator<Item = Relation>>(iter: I) -> Self {
        let mut db = Database::new();
        for r in iter {
            db.insert(r);
        }
        db
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub relation: String,
    /// Attribute indices into the query registry, one per relation column.
    pub vars: Vec<usize>,
}

impl Atom {
    pub fn attr_set(&self) -> AttrSet {
        AttrSet::from_attrs(self.vars.iter().copied())
    }
}

/// A natural-join query. The attribute registry lists attributes in order of
/// first appearance in the body; the output schema is always the full registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    name: String,
    attributes: Vec<AttributeId>,
    atoms: Vec<Atom>,
}

impl QuerySpec {
    /// Builds a query from atoms given as `(relation, variable names)`.
    pub fn from_atoms<S: AsRef<str>>(name: impl Into<String>, atoms: &[(S, Vec<S>)]) -> Result<Self> {
        let mut attributes: Vec<AttributeId> = Vec::new();
        let mut built = Vec::with_capacity(atoms.len());
        for (rel, vars) in atoms {
            let mut idx = Vec::with_capacity(vars.len());
            for v in vars {
                let v = v.as_ref();
                let i = match attributes.iter().position(|a| a.name == v) {
                    Some(i) => i,
                    None => {
                        attributes.push(AttributeId {
                            name: v.to_string(),
                            index: attributes.len(),
                        });
                        attributes.len() - 1
                    }
                };
                if idx.contains(&i) {
                    return Err(Error::InvalidQuery(format!(
                        "atom {} repeats variable `{}`",
                        rel.as_ref(),
                        v
                    )));
                }
                idx.push(i);
            }
            if idx.is_empty() {
                return Err(Error::InvalidQuery(format!("atom {} has no variables", rel.as_ref())));
            }
            built.push(Atom {
                relation: rel.as_ref().to_string(),
                vars: idx,
            });
        }
        if built.len() < 2 {
            return Err(Error::InvalidQuery(format!(
                "a join needs at least 2 atoms, found {}",
                built.len()
            )));
        }
        if attributes.len() > MAX_ATTRIBUTES {
            return Err(Error::InvalidQuery(format!(
                "{} attributes exceed the limit of {}",
                attributes.len(),
                MAX_ATTRIBUTES
            )));
        }
        Ok(QuerySpec {
            name: name.into(),
            attributes,
            atoms: built,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attributes(&self) -> &[AttributeId] {
        &self.attributes
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn attr_name(&self, index: usize) -> &str {
        &self.attributes[index].name
    }

    pub fn all_attrs(&self) -> AttrSet {
        match self.attributes.len() {
            MAX_ATTRIBUTES => AttrSet(u64::MAX),
            n => AttrSet((1 << n) - 1),
        }
    }

    /// Output schema: every attribute in registry order.
    pub fn head(&self) -> Schema {
        Schema {
            attrs: self.attributes.clone(),
        }
    }

    /// Schema of the tuples an atom produces, named after the query attributes.
    pub fn atom_schema(&self, atom: usize) -> Schema {
        Schema {
            attrs: self.atoms[atom]
                .vars
                .iter()
                .map(|&v| self.attributes[v].clone())
                .collect(),
        }
    }

    /// Same attribute registry with a different body. Every attribute must
    /// still occur in some atom.
    pub fn with_atoms(&self, name: impl Into<String>, atoms: Vec<Atom>) -> Result<QuerySpec> {
        let n = self.attributes.len();
        if atoms.is_empty() {
            return Err(Error::InvalidQuery("rewritten query has no atoms".into()));
        }
        let mut covered = AttrSet::EMPTY;
        for atom in &atoms {
            if atom.vars.is_empty() || atom.vars.iter().any(|&v| v >= n) {
                return Err(Error::InvalidQuery(format!("atom {} has invalid variables", atom.relation)));
            }
            if atom.attr_set().len() != atom.vars.len() {
                return Err(Error::InvalidQuery(format!("atom {} repeats a variable", atom.relation)));
            }
            covered = covered.union(atom.attr_set());
        }
        if covered != self.all_attrs() {
            return Err(Error::InvalidQuery("rewritten query drops an attribute".into()));
        }
        Ok(QuerySpec {
            name: name.into(),
            attributes: self.attributes.clone(),
            atoms,
        })
    }

    /// Parses an order given as attribute names.
    pub fn order_from_names<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        let ord = names
            .iter()
            .map(|n| {
                self.attr_index(n.as_ref())
                    .ok_or_else(|| Error::Order(format!("mentions unknown attribute `{}`", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        check_permutation(&ord, self.num_attributes())?;
        Ok(ord)
    }
}

impl fmt::Display for QuerySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        write!(f, "{}({}) :- ", self.name, names.join(","))?;
        for (i, atom) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            let vars: Vec<&str> = atom.vars.iter().map(|&v| self.attr_name(v)).collect();
            write!(f, "{}({})", atom.relation, vars.join(","))?;
        }
        write!(f, ".")
    }
}

pub(crate) fn check_permutation(ord: &[usize], n: usize) -> Result<()> {
    if ord.len() != n {
        return Err(Error::Order(format!("has {} entries, expected {}", ord.len(), n)));
    }
    let mut seen = vec![false; n];
    for &a in ord {
        if a >= n || seen[a] {
            return Err(Error::Order(format!("{ord:?} is not a permutation of 0..{n}")));
        }
        seen[a] = true;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Query text

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

#[derive(Debug, PartialEq)]
enum Token {
    Ident(String),
    LParen,
    RParen,
    Comma,
    Turnstile,
    Period,
    End,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            src: text.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn error(&self, line: usize, column: usize, message: impl Into<String>) -> Error {
        Error::Syntax {
            line,
            column,
            message: message.into(),
        }
    }

    fn bump(&mut self) -> u8 {
        let c = self.src[self.pos];
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        c
    }

    fn skip_trivia(&mut self) {
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_whitespace() {
                self.bump();
            } else if c == b'%' || c == b'#' {
                while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                    self.bump();
                }
            } else {
                break;
            }
        }
    }

    /// Returns the next token with its starting position.
    fn next(&mut self) -> Result<(Token, usize, usize)> {
        self.skip_trivia();
        let (line, col) = (self.line, self.col);
        if self.pos >= self.src.len() {
            return Ok((Token::End, line, col));
        }
        let c = self.bump();
        let tok = match c {
            b'(' => Token::LParen,
            b')' => Token::RParen,
            b',' => Token::Comma,
            b'.' => Token::Period,
            b':' => {
                if self.pos < self.src.len() && self.src[self.pos] == b'-' {
                    self.bump();
                    Token::Turnstile
                } else {
                    return Err(self.error(line, col, "expected `:-`"));
                }
            }
            c if c.is_ascii_alphabetic() => {
                let start = self.pos - 1;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.bump();
                }
                Token::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
            }
            other => {
                return Err(self.error(line, col, format!("unexpected character `{}`", other as char)));
            }
        };
        Ok((tok, line, col))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    peeked: Option<(Token, usize, usize)>,
}

impl<'a> Parser<'a> {
    fn peek(&mut self) -> Result<&(Token, usize, usize)> {
        if self.peeked.is_none() {
            self.peeked = Some(self.lexer.next()?);
        }
        Ok(self.peeked.as_ref().unwrap())
    }

    fn take(&mut self) -> Result<(Token, usize, usize)> {
        match self.peeked.take() {
            Some(t) => Ok(t),
            None => self.lexer.next(),
        }
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<()> {
        let (tok, line, column) = self.take()?;
        if tok == want {
            Ok(())
        } else {
            Err(Error::Syntax {
                line,
                column,
                message: format!("expected {what}, found {}", describe(&tok)),
            })
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize, usize)> {
        match self.take()? {
            (Token::Ident(s), l, c) => Ok((s, l, c)),
            (tok, line, column) => Err(Error::Syntax {
                line,
                column,
                message: format!("expected {what}, found {}", describe(&tok)),
            }),
        }
    }

    /// `Name(v1, ..., vk)`
    fn atom(&mut self) -> Result<(String, Vec<String>, usize, usize)> {
        let (name, line, col) = self.ident("relation name")?;
        self.expect(Token::LParen, "`(`")?;
        let mut vars = Vec::new();
        if self.peek()?.0 != Token::RParen {
            loop {
                let (v, vl, vc) = self.ident("variable")?;
                if vars.contains(&v) {
                    return Err(Error::Syntax {
                        line: vl,
                        column: vc,
                        message: format!("variable `{v}` repeated in atom {name}"),
                    });
                }
                vars.push(v);
                if self.peek()?.0 == Token::Comma {
                    self.take()?;
                } else {
                    break;
                }
            }
        }
        self.expect(Token::RParen, "`)` or `,`")?;
        Ok((name, vars, line, col))
    }
}

fn describe(tok: &Token) -> String {
    match tok {
        Token::Ident(s) => format!("`{s}`"),
        Token::LParen => "`(`".into(),
        Token::RParen => "`)`".into(),
        Token::Comma => "`,`".into(),
        Token::Turnstile => "`:-`".into(),
        Token::Period => "`.`".into(),
        Token::End => "end of input".into(),
    }
}

/// Parses a single rule `Name(vars) :- Atom1(vars), ..., AtomM(vars).`
///
/// The head's variable list is checked for syntax only; the output schema is
/// always the union of the body's attributes.
pub fn parse_query(text: &str) -> Result<QuerySpec> {
    let mut p = Parser {
        lexer: Lexer::new(text),
        peeked: None,
    };
    let (head, _, _, _) = p.atom()?;
    p.expect(Token::Turnstile, "`:-`")?;
    let mut body = Vec::new();
    loop {
        let (rel, vars, line, column) = p.atom()?;
        if vars.is_empty() {
            return Err(Error::Syntax {
                line,
                column,
                message: format!("atom {rel} has no variables"),
            });
        }
        body.push((rel, vars));
        let (tok, line, column) = p.take()?;
        match tok {
            Token::Comma => continue,
            Token::Period => break,
            other => {
                return Err(Error::Syntax {
                    line,
                    column,
                    message: format!("expected `,` or `.`, found {}", describe(&other)),
                })
            }
        }
    }
    let (tok, line, column) = p.take()?;
    if tok != Token::End {
        return Err(Error::Syntax {
            line,
            column,
            message: format!("trailing input after rule: {}", describe(&tok)),
        });
    }
    let atoms: Vec<(&str, Vec<&str>)> = body
        .iter()
        .map(|(r, vs)| (r.as_str(), vs.iter().map(String::as_str).collect()))
        .collect();
    QuerySpec::from_atoms(head, &atoms)
}

// ---------------------------------------------------------------------------
// Hypergraph

/// Attributes as nodes, atom schemas as hyperedges (edge `i` is atom `i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hypergraph {
    pub nodes: Vec<AttributeId>,
    pub edges: Vec<(usize, AttrSet)>,
}

impl Hypergraph {
    pub fn node_set(&self) -> AttrSet {
        AttrSet::from_attrs(self.nodes.iter().map(|a| a.index))
    }
}

pub fn hypergraph_of(q: &QuerySpec) -> Hypergraph {
    Hypergraph {
        nodes: q.attributes().to_vec(),
        edges: q
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, a)| (i, a.attr_set()))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Edge lists

/// Reads whitespace-separated integer pairs; `#` starts a comment line.
pub fn read_edge_list<R: BufRead>(reader: R, origin: &Path, name: &str, attrs: [&str; 2]) -> Result<Relation> {
    read_tuples(reader, origin, name, Schema::from_names(&attrs)?)
}

/// Reads one tuple of `schema.arity()` whitespace-separated integers per line.
pub fn read_tuples<R: BufRead>(reader: R, origin: &Path, name: &str, schema: Schema) -> Result<Relation> {
    let arity = schema.arity();
    let mut data = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = trimmed.split_whitespace().count();
        if fields != arity {
            return Err(Error::EdgeList {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected {arity} values per line, found {fields}"),
            });
        }
        for tok in trimmed.split_whitespace() {
            let v: Value = tok.parse().map_err(|_| Error::EdgeList {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("`{tok}` is not a non-negative integer"),
            })?;
            data.push(v);
        }
    }
    Relation::from_flat(name, schema, data)
}

pub fn load_tuples(path: impl AsRef<Path>, name: &str, schema: Schema) -> Result<Relation> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tuples(BufReader::new(file), path, name, schema)
}

pub fn load_edge_list(path: impl AsRef<Path>, name: &str, attrs: [&str; 2]) -> Result<Relation> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_edge_list(BufReader::new(file), path, name, attrs)
}

/// Writes one tab-separated tuple per line.
pub fn write_tuples<W: Write>(mut out: W, relation: &Relation) -> std::io::Result<()> {
    for row in relation.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b"\t")?;
            }
            write!(out, "{v}")?;
            first = false;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Oracle

/// Exact natural join by a left-deep sequence of hash joins, in atom order.
///
/// Used as the correctness reference for every other join path; it performs
/// no planning at all.
pub fn pairwise_join_oracle(db: &Database, q: &QuerySpec) -> Result<Relation> {
    let rels = db.atom_relations(q)?;
    let n = q.num_attributes();
    // Partial results as (bound attributes in column order, rows).
    let mut cols: Vec<usize> = q.atoms()[0].vars.clone();
    let mut rows: Vec<Vec<Value>> = rels[0].rows().map(<[Value]>::to_vec).collect();
    for (atom, rel) in q.atoms().iter().zip(&rels).skip(1) {
        let shared: Vec<(usize, usize)> = atom
            .vars
            .iter()
            .enumerate()
            .filter_map(|(j, v)| cols.iter().position(|c| c == v).map(|i| (i, j)))
            .collect();
        let fresh: Vec<usize> = (0..atom.vars.len())
            .filter(|j| !shared.iter().any(|&(_, sj)| sj == *j))
            .collect();
        let mut index: HashMap<Vec<Value>, Vec<&[Value]>> = HashMap::new();
        for t in rel.rows() {
            let key: Vec<Value> = shared.iter().map(|&(_, j)| t[j]).collect();
            index.entry(key).or_default().push(t);
        }
        let mut next = Vec::new();
        for r in &rows {
            let key: Vec<Value> = shared.iter().map(|&(i, _)| r[i]).collect();
            if let Some(matches) = index.get(&key) {
                for t in matches {
                    let mut out = r.clone();
                    out.extend(fresh.iter().map(|&j| t[j]));
                    next.push(out);
                }
            }
        }
        cols.extend(fresh.iter().map(|&j| atom.vars[j]));
        rows = next;
    }
    let mut data = Vec::with_capacity(rows.len() * n);
    let mut pos = vec![0; n];
    for (i, &c) in cols.iter().enumerate() {
        pos[c] = i;
    }
    for r in &rows {
        data.extend((0..n).map(|a| r[pos[a]]));
    }
    Relation::from_flat(q.name(), q.head(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nested_loop_join(db: &Database, q: &QuerySpec) -> Vec<Vec<Value>> {
        // Enumerate every combination of one tuple per atom and keep consistent ones.
        let rels = db.atom_relations(q).unwrap();
        let n = q.num_attributes();
        let mut out = Vec::new();
        let mut binding: Vec<Option<Value>> = vec![None; n];
        fn rec(
            i: usize,
            q: &QuerySpec,
            rels: &[&Relation],
            binding: &mut Vec<Option<Value>>,
            out: &mut Vec<Vec<Value>>,
        ) {
            if i == rels.len() {
                out.push(binding.iter().map(|v| v.unwrap()).collect());
                return;
            }
            for t in rels[i].rows() {
                let saved = binding.clone();
                let ok = q.atoms()[i].vars.iter().zip(t).all(|(&a, &v)| match binding[a] {
                    Some(b) => b == v,
                    None => {
                        binding[a] = Some(v);
                        true
                    }
                });
                if ok {
                    rec(i + 1, q, rels, binding, out);
                }
                *binding = saved;
            }
        }
        rec(0, q, &rels, &mut binding, &mut out);
        out.sort();
        out.dedup();
        out
    }

    fn edge_rel(name: &str, edges: &[(u64, u64)]) -> Relation {
        Relation::new(
            name,
            Schema::from_names(&["src", "dst"]).unwrap(),
            edges.iter().map(|&(a, b)| [a, b]),
        )
        .unwrap()
    }

    #[test]
    fn isolating_shared_relations() {
        let q = parse_query("Q(a,b,c) :- G(a,b), G(b,c), H(a,c).").unwrap();
        let g = Relation::new("G", Schema::from_names(&["s", "d"]).unwrap(), [[1u64, 2], [2, 3]]).unwrap();
        let h = Relation::new("H", Schema::from_names(&["s", "d"]).unwrap(), [[1u64, 3]]).unwrap();
        let db: Database = [g, h].into_iter().collect();
        let (q2, db2) = isolate_atoms(&q, &db).unwrap();
        let names: Vec<&str> = q2.atoms().iter().map(|a| a.relation.as_str()).collect();
        assert_eq!(names, ["G#0", "G#1", "H"]);
        assert_eq!(q2.attributes(), q.attributes());
        assert_eq!(db2.relations().count(), 3);
        assert_eq!(pairwise_join_oracle(&db2, &q2).unwrap(), pairwise_join_oracle(&db, &q).unwrap());
        let drop_c = vec![q.atoms()[0].clone()];
        assert!(q.with_atoms("R", drop_c).is_err());
    }

    #[test]
    fn parses_running_example() {
        let q = parse_query("Q(a,b,c,d,e) :- R1(a,b,c), R2(a,d), R3(c,d), R4(b,e), R5(c,e).").unwrap();
        assert_eq!(q.atoms().len(), 5);
        let names: Vec<&str> = q.attributes().iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["a", "b", "c", "d", "e"]);
        assert_eq!(q.atoms()[2].vars, vec![2, 3]);
    }

    #[test]
    fn parses_triangle_and_ignores_written_head() {
        let q = parse_query("Q(a) :- R1(a,b), R2(b,c), R3(a,c).").unwrap();
        assert_eq!(q.atoms().len(), 3);
        assert_eq!(q.head().arity(), 3);
    }

    #[test]
    fn rejects_single_atom() {
        let err = parse_query("Q(a) :- R1(a).").unwrap_err();
        assert!(matches!(err, Error::InvalidQuery(_)), "{err}");
    }

    #[test]
    fn reports_syntax_position() {
        let err = parse_query("Q(a,b) :- R1(a,b),\n  R2(b c).").unwrap_err();
        match err {
            Error::Syntax { line, column, .. } => assert_eq!((line, column), (2, 8)),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse_query("Q(a,b) :- R1(a,b), R2(b,c)"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_query("Q(a,b) :- R1(a,a), R2(b,c)."), Err(Error::Syntax { .. })));
        assert!(matches!(parse_query("Q(a) :- 1R(a), R2(a)."), Err(Error::Syntax { .. })));
    }

    #[test]
    fn print_parse_round_trip() {
        for text in [
            "Q(a,b,c,d,e) :- R1(a,b,c), R2(a,d), R3(c,d), R4(b,e), R5(c,e).",
            "Q2(x) :- E(x,y),\n E(y,z), F_1(z, x) .",
        ] {
            let q = parse_query(text).unwrap();
            assert_eq!(parse_query(&q.to_string()).unwrap(), q);
        }
    }

    #[test]
    fn hypergraph_of_running_example() {
        let q = parse_query("Q(a,b,c,d,e) :- R1(a,b,c), R2(a,d), R3(c,d), R4(b,e), R5(c,e).").unwrap();
        let h = hypergraph_of(&q);
        assert_eq!(h.nodes.len(), 5);
        let edges: Vec<Vec<usize>> = h.edges.iter().map(|(_, s)| s.iter().collect()).collect();
        assert_eq!(edges, vec![vec![0, 1, 2], vec![0, 3], vec![2, 3], vec![1, 4], vec![2, 4]]);
        assert_eq!(h.edges.iter().fold(AttrSet::EMPTY, |s, e| s.union(e.1)), h.node_set());
    }

    #[test]
    fn hypergraph_of_small_queries() {
        let q = parse_query("Q(a,b,c) :- R1(a,b), R2(b,c).").unwrap();
        let h = hypergraph_of(&q);
        assert_eq!((h.nodes.len(), h.edges.len()), (3, 2));
        let q2 = parse_query("Q(a,b,c,d) :- R1(a,b), R2(b,c), R3(c,d), R4(d,a), R5(a,c), R6(b,d).").unwrap();
        let h = hypergraph_of(&q2);
        assert_eq!((h.nodes.len(), h.edges.len()), (4, 6));
    }

    #[test]
    fn edge_list_dedups_and_skips_comments() {
        let r = read_edge_list("1 2\n2 3\n1 2".as_bytes(), Path::new("mem"), "G", ["s", "d"]).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.rows().collect::<Vec<_>>(), vec![&[1, 2][..], &[2, 3][..]]);
        let r = read_edge_list("# comment\n5 7\n".as_bytes(), Path::new("mem"), "G", ["s", "d"]).unwrap();
        assert_eq!(r.rows().collect::<Vec<_>>(), vec![&[5, 7][..]]);
        let self_loop = read_edge_list("4 4".as_bytes(), Path::new("mem"), "G", ["s", "d"]).unwrap();
        assert_eq!(self_loop.len(), 1);
    }

    #[test]
    fn edge_list_errors() {
        let bad = read_edge_list("1 x\n".as_bytes(), Path::new("mem"), "G", ["s", "d"]);
        assert!(matches!(bad, Err(Error::EdgeList { line: 1, .. })));
        let arity = read_edge_list("1 2\n1 2 3\n".as_bytes(), Path::new("mem"), "G", ["s", "d"]);
        assert!(matches!(arity, Err(Error::EdgeList { line: 2, .. })));
        assert!(matches!(load_edge_list("/nonexistent/graph.txt", "G", ["s", "d"]), Err(Error::Io { .. })));
    }

    #[test]
    fn oracle_triangle_on_bidirected_cycle() {
        let g = edge_rel("G", &[(1, 2), (2, 3), (3, 1), (2, 1), (3, 2), (1, 3)]);
        let db: Database = ["R1", "R2", "R3"].iter().map(|n| g.renamed(*n)).collect();
        let q = parse_query("Q(a,b,c) :- R1(a,b), R2(b,c), R3(a,c).").unwrap();
        let out = pairwise_join_oracle(&db, &q).unwrap();
        // brute force: ordered triples of distinct nodes that are pairwise adjacent
        let mut expect = Vec::new();
        for a in 1..=3u64 {
            for b in 1..=3u64 {
                for c in 1..=3u64 {
                    if a != b && b != c && a != c {
                        expect.push(vec![a, b, c]);
                    }
                }
            }
        }
        assert_eq!(out.len(), 6);
        assert_eq!(out.rows().map(<[u64]>::to_vec).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn oracle_empty_atom_gives_empty_result() {
        let g = edge_rel("G", &[(1, 2), (2, 3)]);
        let mut db: Database = ["R1", "R2"].iter().map(|n| g.renamed(*n)).collect();
        db.insert(edge_rel("R3", &[]));
        let q = parse_query("Q(a,b,c) :- R1(a,b), R2(b,c), R3(a,c).").unwrap();
        assert!(pairwise_join_oracle(&db, &q).unwrap().is_empty());
    }

    #[test]
    fn oracle_missing_relation() {
        let q = parse_query("Q(a,b,c) :- R1(a,b), R2(b,c).").unwrap();
        assert!(matches!(pairwise_join_oracle(&Database::new(), &q), Err(Error::MissingRelation(_))));
    }

    #[test]
    fn oracle_matches_nested_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let queries = [
            "Q(a,b,c,d,e) :- R1(a,b,c), R2(a,d), R3(c,d), R4(b,e), R5(c,e).",
            "Q(a,b,c,d) :- R1(a,b), R2(b,c), R3(c,d), R4(d,a), R5(a,c), R6(b,d).",
            "Q(a,b,c) :- R1(a,b), R2(b,c).",
        ];
        for text in queries {
            let q = parse_query(text).unwrap();
            for _ in 0..5 {
                let mut db = Database::new();
                for (i, atom) in q.atoms().iter().enumerate() {
                    let arity = atom.vars.len();
                    let rows: Vec<Vec<u64>> = (0..rng.gen_range(5..20))
                        .map(|_| (0..arity).map(|_| rng.gen_range(0..4)).collect())
                        .collect();
                    let schema = Schema::from_names(&(0..arity).map(|c| format!("c{c}")).collect::<Vec<_>>()).unwrap();
                    db.insert(Relation::new(format!("R{}", i + 1), schema, rows).unwrap());
                }
                let oracle = pairwise_join_oracle(&db, &q).unwrap();
                let brute = nested_loop_join(&db, &q);
                assert_eq!(oracle.rows().map(<[u64]>::to_vec).collect::<Vec<_>>(), brute);
            }
        }
    }

    #[test]
    fn relation_set_semantics() {
        let r = edge_rel("R", &[(2, 1), (1, 2), (2, 1)]);
        assert_eq!(r.len(), 2);
        assert!(r.contains(&[2, 1]));
        assert!(!r.contains(&[3, 1]));
        assert_eq!(r.project(0), vec![1, 2]);
    }
}
