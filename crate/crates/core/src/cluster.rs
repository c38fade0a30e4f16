//! In-process cluster: a coordinator thread driving worker threads that own
//! their data fragments and talk only through channels.
//!
//! A shuffle is two barriers. `Group` makes every worker split its fragment of
//! each relation into blocks by hash signature. `Pull` hands each worker its
//! hypercubes; the worker requests every block it lacks from its peers, which
//! serve requests while waiting on their own. `Compute` then runs LeapFrog per
//! hypercube with no further traffic.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hcube::{assign_hypercubes, decode_block, encode_block, group_blocks, BlockKey, BlockMap, Coordinate, HashFamily, ShareVector};
use crate::leapfrog::{lf_join, trie_order_for, CollectingSink, CountingSink, LevelStats};
use crate::optimizer::{CostBreakdown, QueryPlan};
use crate::relational::{Database, QuerySpec, Relation, Schema, Value};
use crate::sampler::{run_fixed_values, SampleExecutor, SampleRun};
use crate::trie::{merge_block_tries, TrieIndex};

pub type WorkerId = usize;

pub const DEFAULT_SPILL_THRESHOLD: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub workers: usize,
    pub seed: u64,
    pub hash: HashFamily,
    /// Per-worker limit on pulled tuple-copies.
    pub memory_tuples: Option<u64>,
    /// Delay added when serving each non-empty block.
    pub latency_per_block: Duration,
    /// Stored intermediate fragments above this many tuples go to disk.
    pub spill_threshold: usize,
    pub spill_dir: Option<PathBuf>,
}

impl ClusterOptions {
    pub fn new(workers: usize, seed: u64) -> Self {
        ClusterOptions {
            workers,
            seed,
            hash: HashFamily::MultiplyShift { seed },
            memory_tuples: None,
            latency_per_block: Duration::ZERO,
            spill_threshold: DEFAULT_SPILL_THRESHOLD,
            spill_dir: None,
        }
    }
}

/// One atom of a shuffle: which stored relation, the attribute of each
/// column, and the column order of its tries.
#[derive(Debug, Clone)]
pub struct ShuffleAtom {
    pub relation: String,
    pub vars: Vec<usize>,
    pub trie_order: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum Output {
    Count,
    Collect,
    /// Keep the result on the workers as a relation with this name and schema.
    Store { relation: String, schema: Schema },
}

#[derive(Debug)]
pub enum Task {
    Load { relation: Relation },
    Drop { relation: String },
    Group { job: u64, atoms: Arc<Vec<ShuffleAtom>>, share: ShareVector, hash: HashFamily },
    Pull { job: u64, coordinates: Vec<Coordinate>, memory: Option<u64> },
    Compute { job: u64, query: Arc<QuerySpec>, ord: Vec<usize>, output: Output },
    Release { job: u64 },
    /// Send `count` random tuples spread over all workers.
    Ship { job: u64, count: usize, seed: u64 },
}

#[derive(Debug)]
pub enum Message {
    Task(Task),
    SampleTask { job: u64, query: Arc<QuerySpec>, ord: Vec<usize>, values: Vec<Value>, depth_limit: usize },
    BlockRequest { job: u64, atom: usize, signature: Vec<u32>, from: WorkerId, request: u64 },
    BlockResponse { job: u64, request: u64, payload: Option<Vec<u8>> },
    Tuples { job: u64, payload: Vec<u8> },
    Shutdown,
}

#[derive(Debug)]
pub enum ResultReport {
    Done { worker: WorkerId },
    Pulled { worker: WorkerId, per_atom: Vec<u64>, blocks: u64 },
    Computed { worker: WorkerId, count: u64, stats: LevelStats, tuples: Option<Vec<Value>> },
    Sampled { worker: WorkerId, run: SampleRun },
    Received { worker: WorkerId, tuples: u64 },
    Failed { worker: WorkerId, error: Error },
}

impl ResultReport {
    fn worker(&self) -> WorkerId {
        match *self {
            ResultReport::Done { worker }
            | ResultReport::Pulled { worker, .. }
            | ResultReport::Computed { worker, .. }
            | ResultReport::Sampled { worker, .. }
            | ResultReport::Received { worker, .. }
            | ResultReport::Failed { worker, .. } => worker,
        }
    }
}

enum Fragment {
    Memory(Relation),
    Spilled { path: PathBuf, name: String, schema: Schema },
}

impl Fragment {
    fn relation(&self) -> Result<std::borrow::Cow<'_, Relation>> {
        match self {
            Fragment::Memory(r) => Ok(std::borrow::Cow::Borrowed(r)),
            Fragment::Spilled { path, name, schema } => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let (_, trie) = decode_block(&bytes)?;
                Ok(std::borrow::Cow::Owned(trie.to_relation(name, schema.clone())?))
            }
        }
    }
}

#[derive(Default)]
struct JobState {
    atoms: Arc<Vec<ShuffleAtom>>,
    share: Option<ShareVector>,
    hash: Option<HashFamily>,
    local: Vec<BlockMap>,
    coordinates: Vec<Coordinate>,
    /// Merged block per (atom, signature); absent means empty.
    merged: HashMap<(usize, Vec<u32>), TrieIndex>,
}

struct Worker {
    id: WorkerId,
    inbox: Receiver<Message>,
    peers: Vec<Sender<Message>>,
    reports: Sender<ResultReport>,
    fragments: HashMap<String, Fragment>,
    jobs: HashMap<u64, JobState>,
    backlog: VecDeque<Message>,
    /// Tuple messages received per shipping job: (messages, tuples).
    received: HashMap<u64, (usize, u64)>,
    latency: Duration,
    spill_threshold: usize,
    spill_dir: PathBuf,
    next_request: u64,
}

impl Worker {
    fn run(mut self) {
        loop {
            let msg = match self.backlog.pop_front() {
                Some(m) => m,
                None => match self.inbox.recv() {
                    Ok(m) => m,
                    Err(_) => break,
                },
            };
            if matches!(msg, Message::Shutdown) {
                break;
            }
            let outcome = catch_unwind(AssertUnwindSafe(|| self.handle(msg)));
            let error = match outcome {
                Ok(Ok(())) => continue,
                Ok(Err(e)) => e,
                Err(panic) => {
                    let what = panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default();
                    Error::Cluster(format!("worker {} panicked: {}", self.id, what))
                }
            };
            let _ = self.reports.send(ResultReport::Failed { worker: self.id, error });
        }
        for f in self.fragments.values() {
            if let Fragment::Spilled { path, .. } = f {
                let _ = std::fs::remove_file(path);
            }
        }
    }

    fn report(&self, r: ResultReport) {
        let _ = self.reports.send(r);
    }

    fn handle(&mut self, msg: Message) -> Result<()> {
        match msg {
            Message::Task(task) => self.task(task),
            Message::SampleTask { job, query, ord, values, depth_limit } => {
                let run = self.sample(job, &query, &ord, &values, depth_limit)?;
                self.report(ResultReport::Sampled { worker: self.id, run });
                Ok(())
            }
            Message::BlockRequest { job, atom, signature, from, request } => self.serve(job, atom, signature, from, request),
            // A response arriving outside a pull belongs to an aborted one.
            Message::BlockResponse { .. } => Ok(()),
            Message::Tuples { job, payload } => {
                let entry = self.received.entry(job).or_default();
                entry.0 += 1;
                entry.1 += (payload.len() / 16) as u64;
                if entry.0 == self.peers.len() {
                    let (_, tuples) = self.received.remove(&job).unwrap();
                    self.report(ResultReport::Received { worker: self.id, tuples });
                }
                Ok(())
            }
            Message::Shutdown => Ok(()),
        }
    }

    fn task(&mut self, task: Task) -> Result<()> {
        match task {
            Task::Load { relation } => {
                self.fragments.insert(relation.name().to_string(), Fragment::Memory(relation));
            }
            Task::Drop { relation } => {
                if let Some(Fragment::Spilled { path, .. }) = self.fragments.remove(&relation) {
                    let _ = std::fs::remove_file(path);
                }
            }
            Task::Release { job } => {
                self.jobs.remove(&job);
                self.report(ResultReport::Done { worker: self.id });
            }
            Task::Group { job, atoms, share, hash } => {
                let mut local = Vec::with_capacity(atoms.len());
                for a in atoms.iter() {
                    let frag = self
                        .fragments
                        .get(&a.relation)
                        .ok_or_else(|| Error::MissingRelation(a.relation.clone()))?;
                    local.push(group_blocks(&*frag.relation()?, &a.vars, &share, &hash, &a.trie_order)?);
                }
                self.jobs.insert(
                    job,
                    JobState {
                        atoms,
                        share: Some(share),
                        hash: Some(hash),
                        local,
                        ..JobState::default()
                    },
                );
                self.report(ResultReport::Done { worker: self.id });
            }
            Task::Pull { job, coordinates, memory } => {
                let (per_atom, blocks) = self.pull(job, coordinates, memory)?;
                self.report(ResultReport::Pulled { worker: self.id, per_atom, blocks });
            }
            Task::Compute { job, query, ord, output } => {
                let state = self.jobs.remove(&job).ok_or_else(|| unknown_job(job))?;
                let (count, stats, tuples) = compute(&state, &query, &ord, matches!(output, Output::Count))?;
                let tuples = match output {
                    Output::Count => None,
                    Output::Collect => tuples,
                    Output::Store { relation, schema } => {
                        let r = Relation::from_flat(relation.clone(), schema, tuples.unwrap_or_default())?;
                        self.store(r)?;
                        None
                    }
                };
                self.report(ResultReport::Computed { worker: self.id, count, stats, tuples });
            }
            Task::Ship { job, count, seed } => self.ship(job, count, seed),
        }
        Ok(())
    }

    fn store(&mut self, r: Relation) -> Result<()> {
        let name = r.name().to_string();
        let fragment = if r.len() > self.spill_threshold {
            std::fs::create_dir_all(&self.spill_dir).map_err(|e| Error::io(&self.spill_dir, e))?;
            let file = name.replace(|c: char| !c.is_ascii_alphanumeric(), "_");
            let path = self.spill_dir.join(format!("{}-w{}.blk", file, self.id));
            let order: Vec<usize> = (0..r.arity()).collect();
            let trie = TrieIndex::build(&r, &order)?;
            let key = BlockKey { relation: name.clone(), signature: vec![0; r.arity()] };
            std::fs::write(&path, encode_block(&key, &trie)).map_err(|e| Error::io(&path, e))?;
            debug!("worker {} spilled {} tuples of {} to {}", self.id, r.len(), name, path.display());
            Fragment::Spilled { path, name: name.clone(), schema: r.schema().clone() }
        } else {
            Fragment::Memory(r)
        };
        self.fragments.insert(name, fragment);
        Ok(())
    }

    fn serve(&mut self, job: u64, atom: usize, signature: Vec<u32>, from: WorkerId, request: u64) -> Result<()> {
        let state = self.jobs.get(&job);
        let block = state.and_then(|s| s.local.get(atom)).and_then(|m| m.get(&signature));
        let payload = match (state, block) {
            (Some(state), Some(trie)) if !trie.is_empty() => {
                if !self.latency.is_zero() {
                    std::thread::sleep(self.latency);
                }
                let key = BlockKey { relation: state.atoms[atom].relation.clone(), signature };
                Some(encode_block(&key, trie))
            }
            _ => None,
        };
        let _ = self.peers[from].send(Message::BlockResponse { job, request, payload });
        Ok(())
    }

    fn pull(&mut self, job: u64, coordinates: Vec<Coordinate>, memory: Option<u64>) -> Result<(Vec<u64>, u64)> {
        let atoms = self.jobs.get(&job).ok_or_else(|| unknown_job(job))?.atoms.clone();
        let mut keys: Vec<(usize, Vec<u32>)> = coordinates
            .iter()
            .flat_map(|c| atoms.iter().enumerate().map(move |(i, a)| (i, c.restrict(&a.vars))))
            .collect();
        keys.sort();
        keys.dedup();

        let mut pending: HashMap<u64, usize> = HashMap::new();
        for (k, (atom, sig)) in keys.iter().enumerate() {
            for (w, peer) in self.peers.iter().enumerate() {
                if w == self.id {
                    continue;
                }
                let request = self.next_request;
                self.next_request += 1;
                pending.insert(request, k);
                peer.send(Message::BlockRequest { job, atom: *atom, signature: sig.clone(), from: self.id, request })
                    .map_err(|_| Error::Cluster(format!("worker {} is gone", w)))?;
            }
        }

        let mut parts: Vec<Vec<TrieIndex>> = vec![Vec::new(); keys.len()];
        let mut blocks = 0u64;
        while !pending.is_empty() {
            let msg = self
                .inbox
                .recv()
                .map_err(|_| Error::Cluster("inbox closed during pull".into()))?;
            match msg {
                Message::BlockResponse { job: j, request, payload } if j == job => {
                    let Some(k) = pending.remove(&request) else { continue };
                    if let Some(bytes) = payload {
                        let (key, trie) = decode_block(&bytes)?;
                        let (atom, sig) = &keys[k];
                        if key.relation != atoms[*atom].relation || &key.signature != sig {
                            return Err(Error::Wire(format!("asked for {}{:?}, got {}{:?}", atoms[*atom].relation, sig, key.relation, key.signature)));
                        }
                        blocks += 1;
                        parts[k].push(trie);
                    }
                }
                Message::BlockRequest { job, atom, signature, from, request } => {
                    self.serve(job, atom, signature, from, request)?;
                }
                Message::Shutdown => {
                    self.backlog.push_back(Message::Shutdown);
                    return Err(Error::Cluster("shutdown during pull".into()));
                }
                other => self.backlog.push_back(other),
            }
        }

        let state = self.jobs.get_mut(&job).unwrap();
        let mut merged = HashMap::new();
        for (k, key) in keys.into_iter().enumerate() {
            let mut refs: Vec<&TrieIndex> = parts[k].iter().collect();
            if let Some(own) = state.local[key.0].get(&key.1) {
                refs.push(own);
            }
            if !refs.is_empty() {
                merged.insert(key, merge_block_tries(&refs)?);
            }
        }

        let mut per_atom = vec![0u64; atoms.len()];
        for c in &coordinates {
            for (i, a) in atoms.iter().enumerate() {
                if let Some(t) = merged.get(&(i, c.restrict(&a.vars))) {
                    per_atom[i] += t.len() as u64;
                }
            }
        }
        state.merged = merged;
        state.coordinates = coordinates;

        let total: u64 = per_atom.iter().sum();
        if let Some(budget) = memory {
            if total > budget {
                let mut relations: Vec<String> = atoms.iter().map(|a| a.relation.clone()).collect();
                relations.sort();
                relations.dedup();
                return Err(Error::MemoryBudget { worker: self.id, budget, pulled: total, relations });
            }
        }
        Ok((per_atom, blocks))
    }

    fn sample(&mut self, job: u64, q: &QuerySpec, ord: &[usize], values: &[Value], depth_limit: usize) -> Result<SampleRun> {
        let state = self.jobs.get(&job).ok_or_else(|| unknown_job(job))?;
        let share = state.share.as_ref().unwrap();
        let hash = state.hash.unwrap();
        let first = ord[0];
        let mut groups: BTreeMap<usize, Vec<Value>> = BTreeMap::new();
        for &v in values {
            let h = hash.hash(first, v, share.get(first));
            let c = state
                .coordinates
                .iter()
                .position(|c| c.0[first] == h)
                .ok_or_else(|| Error::Cluster(format!("value {} routed to worker {} which lacks its hypercube", v, self.id)))?;
            groups.entry(c).or_default().push(v);
        }
        let mut by_value: HashMap<Value, Vec<u64>> = HashMap::new();
        let mut stats = LevelStats::new(ord.len());
        for (c, vals) in groups {
            let coord = &state.coordinates[c];
            let tries: Option<Vec<&TrieIndex>> = state
                .atoms
                .iter()
                .enumerate()
                .map(|(i, a)| state.merged.get(&(i, coord.restrict(&a.vars))))
                .collect();
            match tries {
                Some(tries) => {
                    let run = run_fixed_values(&tries, q, ord, &vals, depth_limit)?;
                    stats.merge(&run.stats);
                    by_value.extend(run.values.into_iter().zip(run.bindings));
                }
                None => by_value.extend(vals.into_iter().map(|v| (v, vec![0; depth_limit]))),
            }
        }
        Ok(SampleRun {
            values: values.to_vec(),
            bindings: values.iter().map(|v| by_value[v].clone()).collect(),
            stats,
        })
    }

    fn ship(&mut self, job: u64, count: usize, seed: u64) {
        let n = self.peers.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (self.id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut out: Vec<Vec<u8>> = vec![Vec::new(); n];
        for _ in 0..count {
            let dest = rng.gen_range(0..n);
            out[dest].extend_from_slice(&rng.gen::<u64>().to_le_bytes());
            out[dest].extend_from_slice(&rng.gen::<u64>().to_le_bytes());
        }
        for (w, payload) in out.into_iter().enumerate() {
            let _ = self.peers[w].send(Message::Tuples { job, payload });
        }
    }
}

fn unknown_job(job: u64) -> Error {
    Error::Cluster(format!("no state for job {}", job))
}

type Computed = (u64, LevelStats, Option<Vec<Value>>);

fn compute(state: &JobState, q: &QuerySpec, ord: &[usize], count_only: bool) -> Result<Computed> {
    let mut stats = LevelStats::new(ord.len());
    let mut count = 0;
    let mut collected = CollectingSink::default();
    for coord in &state.coordinates {
        let tries: Option<Vec<&TrieIndex>> = state
            .atoms
            .iter()
            .enumerate()
            .map(|(i, a)| state.merged.get(&(i, coord.restrict(&a.vars))))
            .collect();
        let Some(tries) = tries else { continue };
        let s = if count_only {
            let mut sink = CountingSink::default();
            let s = lf_join(&tries, q, ord, &mut sink)?;
            count += sink.count;
            s
        } else {
            let before = collected.data.len();
            let s = lf_join(&tries, q, ord, &mut collected)?;
            count += ((collected.data.len() - before) / q.num_attributes()) as u64;
            s
        };
        stats.merge(&s);
    }
    Ok((count, stats, (!count_only).then_some(collected.data)))
}

/// Measured outcome of one plan execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub breakdown: CostBreakdown,
    pub cardinality: u64,
    pub workers: usize,
    pub share: ShareVector,
    pub hypercubes: u64,
    pub worker_results: Vec<u64>,
    pub worker_bindings: Vec<u64>,
    /// Bindings per depth of the final join, summed over workers.
    pub level_bindings: Vec<u64>,
    /// Tuple-copies pulled per relation of the final join.
    pub pulled: BTreeMap<String, u64>,
    /// Size of each pre-computed relation.
    pub precomputed: BTreeMap<String, u64>,
}

impl ExecutionReport {
    pub fn total_pulled(&self) -> u64 {
        self.pulled.values().sum()
    }
}

struct Shuffled {
    job: u64,
    pulled: Vec<u64>,
}

pub struct Cluster {
    options: ClusterOptions,
    senders: Vec<Sender<Message>>,
    reports: Receiver<ResultReport>,
    handles: Vec<JoinHandle<()>>,
    loaded: BTreeMap<String, usize>,
    next_job: u64,
}

impl Cluster {
    pub fn start(options: ClusterOptions) -> Result<Self> {
        let n = options.workers;
        if n == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        let spill_dir = options
            .spill_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join(format!("adj-spill-{}", std::process::id())));
        let (report_tx, report_rx) = unbounded();
        let channels: Vec<(Sender<Message>, Receiver<Message>)> = (0..n).map(|_| unbounded()).collect();
        let senders: Vec<Sender<Message>> = channels.iter().map(|(s, _)| s.clone()).collect();
        let mut handles = Vec::with_capacity(n);
        for (id, (_, inbox)) in channels.into_iter().enumerate() {
            let worker = Worker {
                id,
                inbox,
                peers: senders.clone(),
                reports: report_tx.clone(),
                fragments: HashMap::new(),
                jobs: HashMap::new(),
                backlog: VecDeque::new(),
                received: HashMap::new(),
                latency: options.latency_per_block,
                spill_threshold: options.spill_threshold,
                spill_dir: spill_dir.join(format!("{}", options.seed)),
                next_request: 0,
            };
            let handle = std::thread::Builder::new()
                .name(format!("adj-worker-{}", id))
                .spawn(move || worker.run())
                .map_err(|e| Error::Cluster(format!("cannot spawn worker {}: {}", id, e)))?;
            handles.push(handle);
        }
        Ok(Cluster {
            options,
            senders,
            reports: report_rx,
            handles,
            loaded: BTreeMap::new(),
            next_job: 0,
        })
    }

    pub fn workers(&self) -> usize {
        self.senders.len()
    }

    pub fn options(&self) -> &ClusterOptions {
        &self.options
    }

    fn send(&self, worker: WorkerId, msg: Message) -> Result<()> {
        self.senders[worker]
            .send(msg)
            .map_err(|_| Error::Cluster(format!("worker {} is gone", worker)))
    }

    /// Collects one report from each worker; the first failure wins.
    fn gather(&self) -> Result<Vec<ResultReport>> {
        let n = self.workers();
        let mut got: Vec<Option<ResultReport>> = (0..n).map(|_| None).collect();
        let mut failure = None;
        for _ in 0..n {
            let r = self
                .reports
                .recv()
                .map_err(|_| Error::Cluster("all workers are gone".into()))?;
            let w = r.worker();
            match r {
                ResultReport::Failed { error, .. } => {
                    warn!("worker {} failed: {}", w, error);
                    failure.get_or_insert(error);
                }
                other => got[w] = Some(other),
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(got.into_iter().map(Option::unwrap).collect()),
        }
    }

    fn job(&mut self) -> u64 {
        self.next_job += 1;
        self.next_job
    }

    /// Spreads `r` round-robin over the workers, replacing any fragment of
    /// the same name.
    pub fn load_relation(&mut self, r: &Relation) -> Result<()> {
        let n = self.workers();
        for w in 0..n {
            let mut i = 0usize;
            let part = r.filter(|_| {
                i += 1;
                (i - 1) % n == w
            });
            self.send(w, Message::Task(Task::Load { relation: part }))?;
        }
        self.loaded.insert(r.name().to_string(), r.len());
        Ok(())
    }

    pub fn load_database(&mut self, db: &Database) -> Result<()> {
        for r in db.relations() {
            self.load_relation(r)?;
        }
        Ok(())
    }

    pub fn drop_relation(&mut self, name: &str) -> Result<()> {
        for w in 0..self.workers() {
            self.send(w, Message::Task(Task::Drop { relation: name.to_string() }))?;
        }
        self.loaded.remove(name);
        Ok(())
    }

    pub fn is_loaded(&self, name: &str) -> bool {
        self.loaded.contains_key(name)
    }

    fn shuffle(&mut self, atoms: Vec<ShuffleAtom>, share: &ShareVector) -> Result<Shuffled> {
        for a in &atoms {
            if !self.loaded.contains_key(&a.relation) {
                return Err(Error::MissingRelation(a.relation.clone()));
            }
        }
        let job = self.job();
        let atoms = Arc::new(atoms);
        for w in 0..self.workers() {
            self.send(
                w,
                Message::Task(Task::Group {
                    job,
                    atoms: atoms.clone(),
                    share: share.clone(),
                    hash: self.options.hash,
                }),
            )?;
        }
        self.gather()?;
        let assignment = assign_hypercubes(share, self.workers())?;
        for w in 0..self.workers() {
            let coordinates = assignment.of_worker(w).into_iter().cloned().collect();
            self.send(
                w,
                Message::Task(Task::Pull { job, coordinates, memory: self.options.memory_tuples }),
            )?;
        }
        let pulled_reports = match self.gather() {
            Ok(r) => r,
            Err(e) => {
                let _ = self.release(job);
                return Err(e);
            }
        };
        let mut pulled = vec![0u64; atoms.len()];
        for r in pulled_reports {
            if let ResultReport::Pulled { per_atom, .. } = r {
                for (t, x) in pulled.iter_mut().zip(per_atom) {
                    *t += x;
                }
            }
        }
        Ok(Shuffled { job, pulled })
    }

    fn release(&mut self, job: u64) -> Result<()> {
        for w in 0..self.workers() {
            self.send(w, Message::Task(Task::Release { job }))?;
        }
        self.gather().map(|_| ())
    }

    fn compute(&mut self, job: u64, q: &QuerySpec, ord: &[usize], output: Output) -> Result<Vec<Computed>> {
        let query = Arc::new(q.clone());
        for w in 0..self.workers() {
            self.send(
                w,
                Message::Task(Task::Compute { job, query: query.clone(), ord: ord.to_vec(), output: output.clone() }),
            )?;
        }
        Ok(self
            .gather()?
            .into_iter()
            .filter_map(|r| match r {
                ResultReport::Computed { count, stats, tuples, .. } => Some((count, stats, tuples)),
                _ => None,
            })
            .collect())
    }

    /// Tuple-copies each relation of `q` delivers to the hypercubes under `p`.
    pub fn measure_pull_volume(&mut self, q: &QuerySpec, p: &ShareVector) -> Result<BTreeMap<String, u64>> {
        let ord: Vec<usize> = (0..q.num_attributes()).collect();
        let shuffled = self.shuffle(shuffle_atoms(q, &ord), p)?;
        self.release(shuffled.job)?;
        let mut out = BTreeMap::new();
        for (a, n) in q.atoms().iter().zip(shuffled.pulled) {
            *out.entry(a.relation.clone()).or_insert(0) += n;
        }
        Ok(out)
    }

    /// Shuffles and joins `q` over loaded relations.
    pub fn run_join(&mut self, q: &QuerySpec, ord: &[usize], p: &ShareVector, output: Output) -> Result<(Vec<u64>, Vec<Computed>)> {
        let shuffled = self.shuffle(shuffle_atoms(q, ord), p)?;
        let computed = self.compute(shuffled.job, q, ord, output)?;
        Ok((shuffled.pulled, computed))
    }

    /// Runs both stages of `plan` against the loaded database. The returned
    /// breakdown has no optimization time; callers add it.
    pub fn execute_plan(&mut self, plan: &QueryPlan, materialize: bool) -> Result<(ExecutionReport, Option<Relation>)> {
        let start = Instant::now();
        let mut precomputed = BTreeMap::new();
        let outcome = self.run_stages(plan, materialize, &mut precomputed, start);
        for name in precomputed.keys() {
            self.drop_relation(name)?;
        }
        let (pre, comm, comp, pulled, computed) = outcome?;
        let q = &plan.rewritten;
        let mut level = LevelStats::new(q.num_attributes());
        let mut data = Vec::new();
        for (_, s, t) in &computed {
            level.merge(s);
            if let Some(t) = t {
                data.extend_from_slice(t);
            }
        }
        let worker_results: Vec<u64> = computed.iter().map(|c| c.0).collect();
        let mut pulled_by = BTreeMap::new();
        for (a, n) in q.atoms().iter().zip(pulled) {
            *pulled_by.entry(a.relation.clone()).or_insert(0) += n;
        }
        let report = ExecutionReport {
            breakdown: CostBreakdown::measured(0.0, pre, comm, comp),
            cardinality: worker_results.iter().sum(),
            workers: self.workers(),
            share: plan.share.clone(),
            hypercubes: plan.share.hypercubes(),
            worker_bindings: computed.iter().map(|c| c.1.total_bindings()).collect(),
            worker_results,
            level_bindings: level.bindings,
            pulled: pulled_by,
            precomputed,
        };
        let result = if materialize {
            Some(Relation::from_flat(q.name(), q.head(), data)?)
        } else {
            None
        };
        Ok((report, result))
    }

    #[allow(clippy::type_complexity)]
    fn run_stages(
        &mut self,
        plan: &QueryPlan,
        materialize: bool,
        precomputed: &mut BTreeMap<String, u64>,
        start: Instant,
    ) -> Result<(f64, f64, f64, Vec<u64>, Vec<Computed>)> {
        for pre in &plan.precompute {
            let output = Output::Store { relation: pre.relation.clone(), schema: pre.subquery.head() };
            let (_, computed) = self.run_join(&pre.subquery, &pre.ord, &pre.share, output)?;
            let size: u64 = computed.iter().map(|c| c.0).sum();
            self.loaded.insert(pre.relation.clone(), size as usize);
            precomputed.insert(pre.relation.clone(), size);
        }
        let pre_seconds = start.elapsed().as_secs_f64();

        let t = Instant::now();
        let shuffled = self.shuffle(shuffle_atoms(&plan.rewritten, &plan.ord), &plan.share)?;
        let comm = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let output = if materialize { Output::Collect } else { Output::Count };
        let computed = self.compute(shuffled.job, &plan.rewritten, &plan.ord, output)?;
        let comp = t.elapsed().as_secs_f64();
        Ok((pre_seconds, comm, comp, shuffled.pulled, computed))
    }

    /// Tuples per second moved through the channels when `k` random tuples
    /// are scattered across all workers.
    pub fn calibrate_alpha(&mut self, k: usize) -> Result<f64> {
        let n = self.workers();
        let job = self.job();
        let start = Instant::now();
        for w in 0..n {
            let count = k / n + usize::from(w < k % n);
            self.send(w, Message::Task(Task::Ship { job, count, seed: self.options.seed }))?;
        }
        let reports = self.gather()?;
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        let moved: u64 = reports
            .iter()
            .map(|r| match r {
                ResultReport::Received { tuples, .. } => *tuples,
                _ => 0,
            })
            .sum();
        Ok(moved as f64 / seconds)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for s in &self.senders {
            let _ = s.send(Message::Shutdown);
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.stop();
    }
}

fn shuffle_atoms(q: &QuerySpec, ord: &[usize]) -> Vec<ShuffleAtom> {
    q.atoms()
        .iter()
        .enumerate()
        .map(|(i, a)| ShuffleAtom {
            relation: a.relation.clone(),
            vars: a.vars.clone(),
            trie_order: trie_order_for(q, i, ord),
        })
        .collect()
}

const SAMPLE_PREFIX: &str = "~sample/";

/// Samples run where their blocks live: the database is loaded under a
/// private prefix and shuffled with every share 1 except `N` on `ord[0]`.
impl SampleExecutor for Cluster {
    fn run_samples(&mut self, q: &QuerySpec, db: &Database, ord: &[usize], values: &[Value], depth_limit: usize) -> Result<SampleRun> {
        let n = self.workers();
        let mut atoms = q.atoms().to_vec();
        let mut names: Vec<String> = Vec::new();
        for a in atoms.iter_mut() {
            let name = format!("{}{}", SAMPLE_PREFIX, a.relation);
            if !names.contains(&name) {
                self.load_relation(&db.get(&a.relation)?.renamed(name.clone()))?;
                names.push(name.clone());
            }
            a.relation = name;
        }
        let sq = q.with_atoms(q.name(), atoms)?;
        let mut p = vec![1u32; q.num_attributes()];
        p[ord[0]] = n as u32;
        let share = ShareVector::new(p)?;

        let result = (|| {
            let shuffled = self.shuffle(shuffle_atoms(&sq, ord), &share)?;
            let mut per_worker: Vec<Vec<Value>> = vec![Vec::new(); n];
            for &v in values {
                let h = self.options.hash.hash(ord[0], v, share.get(ord[0])) as usize;
                per_worker[h % n].push(v);
            }
            let query = Arc::new(sq.clone());
            for (w, vals) in per_worker.into_iter().enumerate() {
                self.send(
                    w,
                    Message::SampleTask { job: shuffled.job, query: query.clone(), ord: ord.to_vec(), values: vals, depth_limit },
                )?;
            }
            let reports = self.gather();
            self.release(shuffled.job)?;
            let mut by_value: HashMap<Value, Vec<u64>> = HashMap::new();
            let mut stats = LevelStats::new(ord.len());
            for r in reports? {
                if let ResultReport::Sampled { run, .. } = r {
                    stats.merge(&run.stats);
                    by_value.extend(run.values.into_iter().zip(run.bindings));
                }
            }
            Ok(SampleRun {
                values: values.to_vec(),
                bindings: values.iter().map(|v| by_value[v].clone()).collect(),
                stats,
            })
        })();
        for name in names {
            self.drop_relation(&name)?;
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{bind_graph, query, random_graph, running_example};
    use crate::hcube::dup;
    use crate::leapfrog::build_tries;
    use crate::optimizer::plan_with;
    use crate::relational::pairwise_join_oracle;
    use crate::sampler::{LocalExecutor, SampleConfig};
    use crate::ghd::{optimal_hypertree, GhdLimits};
    use crate::optimizer::{BetaTable, CostModelParams};

    fn cluster(n: usize) -> Cluster {
        Cluster::start(ClusterOptions::new(n, 7)).unwrap()
    }

    fn params(n: usize) -> CostModelParams {
        CostModelParams {
            alpha: 1e6,
            beta: BetaTable::new(vec![(1000, 1e7), (1_000_000, 1e6)]).unwrap(),
            memory: u64::MAX / 4,
            workers: n,
        }
    }

    #[test]
    fn single_worker_matches_direct_join() {
        let (q, db) = running_example();
        let ord: Vec<usize> = (0..q.num_attributes()).collect();
        let rels = db.atom_relations(&q).unwrap();
        let tries = build_tries(&rels, &q, &ord).unwrap();
        let refs: Vec<&TrieIndex> = tries.iter().collect();
        let mut sink = CountingSink::default();
        let direct = lf_join(&refs, &q, &ord, &mut sink).unwrap();

        let mut c = cluster(1);
        c.load_database(&db).unwrap();
        let (_, computed) = c.run_join(&q, &ord, &ShareVector::ones(5), Output::Count).unwrap();
        assert_eq!(computed[0].0, sink.count);
        assert_eq!(computed[0].1.bindings, direct.bindings);
    }

    #[test]
    fn pull_volume_matches_dup() {
        let (q, db) = running_example();
        let p = ShareVector::new(vec![1, 2, 2, 1, 1]).unwrap();
        let mut c = Cluster::start(ClusterOptions { hash: HashFamily::Modulo, ..ClusterOptions::new(4, 0) }).unwrap();
        c.load_database(&db).unwrap();
        let pulled = c.measure_pull_volume(&q, &p).unwrap();
        assert_eq!(pulled["R3"], 8);
        for a in q.atoms() {
            let size = db.get(&a.relation).unwrap().len() as u64;
            assert_eq!(pulled[&a.relation], size * dup(a.attr_set(), q.all_attrs(), &p), "{}", a.relation);
        }
        let ones = c.measure_pull_volume(&q, &ShareVector::ones(5)).unwrap();
        assert_eq!(ones["R1"], 4);
    }

    #[test]
    fn plans_match_oracle_for_any_worker_count() {
        let (q, db) = running_example();
        let oracle = pairwise_join_oracle(&db, &q).unwrap();
        let tree = optimal_hypertree(&q, GhdLimits::default()).unwrap();
        for n in [1, 2, 3, 4, 8] {
            for nodes in [vec![], vec![1], vec![1, 2]] {
                let plan = plan_with(&q, &db, &tree, &params(n), SampleConfig::new(1000, 1).unwrap(), &mut LocalExecutor, vec![0, 1, 2], &nodes).unwrap();
                let mut c = cluster(n);
                c.load_database(&db).unwrap();
                let (report, result) = c.execute_plan(&plan, true).unwrap();
                assert_eq!(report.cardinality, oracle.len() as u64);
                assert_eq!(result.unwrap().as_flat(), oracle.as_flat(), "n={} nodes={:?}", n, nodes);
                assert_eq!(report.worker_results.iter().sum::<u64>(), report.cardinality);
                // a second run sees the same base data
                let (again, _) = c.execute_plan(&plan, false).unwrap();
                assert_eq!(again.cardinality, report.cardinality);
                assert_eq!(again.precomputed, report.precomputed);
            }
        }
    }

    #[test]
    fn memory_budget_aborts_with_relations() {
        let q = query("Q1").unwrap();
        let db = bind_graph(&q, &random_graph(50, 300, 3));
        let mut c = Cluster::start(ClusterOptions { memory_tuples: Some(100), ..ClusterOptions::new(2, 1) }).unwrap();
        c.load_database(&db).unwrap();
        let err = c.run_join(&q, &[0, 1, 2], &ShareVector::ones(3), Output::Count).unwrap_err();
        match err {
            Error::MemoryBudget { budget, pulled, relations, .. } => {
                assert_eq!(budget, 100);
                assert!(pulled > 100);
                assert_eq!(relations, vec!["R1", "R2", "R3"]);
            }
            e => panic!("unexpected {e}"),
        }
        // the cluster is still usable
        assert!(c.calibrate_alpha(1000).unwrap() > 0.0);
    }

    #[test]
    fn spilled_intermediates_round_trip() {
        let (q, db) = running_example();
        let oracle = pairwise_join_oracle(&db, &q).unwrap();
        let tree = optimal_hypertree(&q, GhdLimits::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let plan = plan_with(&q, &db, &tree, &params(2), SampleConfig::new(1000, 1).unwrap(), &mut LocalExecutor, vec![0, 1, 2], &[1, 2]).unwrap();
        let mut c = Cluster::start(ClusterOptions {
            spill_threshold: 0,
            spill_dir: Some(dir.path().to_path_buf()),
            ..ClusterOptions::new(2, 1)
        })
        .unwrap();
        c.load_database(&db).unwrap();
        let (report, _) = c.execute_plan(&plan, false).unwrap();
        assert_eq!(report.cardinality, oracle.len() as u64);
    }

    #[test]
    fn distributed_samples_match_local() {
        let q = query("Q1").unwrap();
        let db = bind_graph(&q, &random_graph(60, 400, 5));
        let ord = vec![0, 1, 2];
        let values: Vec<Value> = (0..60).collect();
        let local = LocalExecutor.run_samples(&q, &db, &ord, &values, 3).unwrap();
        for n in [1, 3, 4] {
            let mut c = cluster(n);
            let remote = c.run_samples(&q, &db, &ord, &values, 3).unwrap();
            assert_eq!(remote.bindings, local.bindings);
            assert_eq!(remote.stats.bindings, local.stats.bindings);
            assert!(!c.is_loaded("~sample/R1"));
        }
    }

    #[test]
    fn deterministic_counts() {
        let q = query("Q4").unwrap();
        let db = bind_graph(&q, &random_graph(80, 500, 9));
        let p = ShareVector::new(vec![2, 1, 2, 1, 1]).unwrap();
        let run = || {
            let mut c = cluster(4);
            c.load_database(&db).unwrap();
            let (pulled, computed) = c.run_join(&q, &[0, 1, 2, 3, 4], &p, Output::Count).unwrap();
            (pulled, computed.iter().map(|c| (c.0, c.1.bindings.clone())).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn alpha_is_positive() {
        let mut c = cluster(3);
        assert!(c.calibrate_alpha(30_000).unwrap() > 0.0);
    }
}
