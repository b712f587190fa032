//! Simulated communication fabric: topology, mailboxes and byte accounting.
//!
//! Rounds are bulk-synchronous. A payload posted at round `t` is stored under
//! `(recipient, t)` and can be read by asking for exactly that round, so a
//! reader never receives a statistic from a round it did not ask for.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::RwLock;

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix};
use crate::objective::PeerBlocks;
use crate::seed;

/// Bytes charged per matrix entry.
pub const BYTES_PER_ENTRY: u64 = 8;
const MAX_RESAMPLES: usize = 1000;

/// Undirected simple graph over nodes `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    adjacency: Vec<Vec<bool>>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![vec![false; n_nodes]; n_nodes];
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes || a == b {
                return Err(Error::InvalidParameter(format!("invalid edge ({a}, {b}) for {n_nodes} nodes")));
            }
            adjacency[a][b] = true;
            adjacency[b][a] = true;
        }
        Ok(Self::from_adjacency(adjacency))
    }

    pub fn complete(n_nodes: usize) -> Self {
        let adjacency = (0..n_nodes).map(|i| (0..n_nodes).map(|j| i != j).collect()).collect();
        Self::from_adjacency(adjacency)
    }

    fn from_adjacency(adjacency: Vec<Vec<bool>>) -> Self {
        let neighbors = adjacency
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, &e)| e).map(|(j, _)| j).collect())
            .collect();
        Topology { adjacency, neighbors }
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b]
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Erdős–Rényi graph `G(n, p)`, resampled with fresh derived seeds until connected.
pub fn build_topology(n_nodes: usize, p: f64, seed: u64) -> Result<Topology> {
    if n_nodes == 0 || !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("need n >= 1 and 0 < p <= 1 (got n = {n_nodes}, p = {p})")));
    }
    for attempt in 0..MAX_RESAMPLES {
        let mut rng = seed::rng(seed, seed::tag::TOPOLOGY, attempt as u64);
        let mut adjacency = vec![vec![false; n_nodes]; n_nodes];
        for i in 0..n_nodes {
            for j in i + 1..n_nodes {
                if rng.random::<f64>() < p {
                    adjacency[i][j] = true;
                    adjacency[j][i] = true;
                }
            }
        }
        let topo = Topology::from_adjacency(adjacency);
        if topo.is_connected() {
            return Ok(topo);
        }
    }
    Err(Error::Unconnectable { n_nodes, p, attempts: MAX_RESAMPLES })
}

/// `V_{i,k} = Z_{i,k}Z_{i,k}ᵀ / m_{i,k}` with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramStat {
    pub node: usize,
    pub class: usize,
    pub count: usize,
    pub matrix: SymMatrix,
    pub round: usize,
}

impl GramStat {
    pub fn from_features(node: usize, class: usize, round: usize, z_k: ArrayView2<'_, f64>) -> Result<Self> {
        let count = z_k.ncols();
        if count == 0 {
            return Err(Error::EmptyClass(class));
        }
        Ok(GramStat { node, class, count, matrix: linalg::gram(z_k, count as f64), round })
    }
}

/// Everything that may cross a node boundary.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    ClassGram(GramStat),
    /// Per-class blocks of a node's whole Gram, sent inside a cluster.
    NodeGram(PeerBlocks),
}

impl Payload {
    pub fn matrices(&self) -> u64 {
        match self {
            Payload::ClassGram(_) => 1,
            Payload::NodeGram(g) => g.blocks.len() as u64,
        }
    }
}

#[derive(Default)]
struct Store {
    class_stats: HashMap<(usize, usize), BTreeMap<(usize, usize), GramStat>>,
    node_grams: HashMap<(usize, usize), BTreeMap<usize, PeerBlocks>>,
    bytes: BTreeMap<(usize, usize), u64>,
    class_messages: u64,
    node_messages: u64,
}

/// Per-recipient, per-round mailbox with a sender-side byte counter.
pub struct MailBox {
    n_nodes: usize,
    d: usize,
    store: RwLock<Store>,
}

impl MailBox {
    pub fn new(n_nodes: usize, d: usize) -> Self {
        MailBox { n_nodes, d, store: RwLock::new(Store::default()) }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    fn matrix_bytes(&self) -> u64 {
        (self.d * self.d) as u64 * BYTES_PER_ENTRY
    }

    fn check_recipients(&self, recipients: &[usize]) -> Result<()> {
        match recipients.iter().find(|&&r| r >= self.n_nodes) {
            Some(&r) => Err(Error::UnknownRecipient(r)),
            None => Ok(()),
        }
    }

    /// Deliver class statistics from `sender` to each recipient, charging
    /// `|stats|·d²·8` bytes per recipient to the sender at `round`.
    pub fn post_stats(&self, sender: usize, round: usize, stats: &[GramStat], recipients: &[usize]) -> Result<()> {
        self.check_recipients(recipients)?;
        if let Some(s) = stats.iter().find(|s| s.matrix.dim() != self.d) {
            return Err(Error::ShapeMismatch(format!("stat is {}×{}, mailbox expects d = {}", s.matrix.dim(), s.matrix.dim(), self.d)));
        }
        if stats.is_empty() || recipients.is_empty() {
            return Ok(());
        }
        let mut store = self.store.write().expect("mailbox lock poisoned");
        for &r in recipients {
            let inbox = store.class_stats.entry((r, round)).or_default();
            for s in stats {
                inbox.insert((sender, s.class), s.clone());
            }
        }
        store.class_messages += (stats.len() * recipients.len()) as u64;
        *store.bytes.entry((round, sender)).or_default() +=
            stats.len() as u64 * recipients.len() as u64 * self.matrix_bytes();
        Ok(())
    }

    /// Deliver a node's per-class Gram blocks to cluster peers.
    pub fn post_node_gram(&self, round: usize, gram: PeerBlocks, recipients: &[usize]) -> Result<()> {
        self.check_recipients(recipients)?;
        if recipients.is_empty() || gram.blocks.is_empty() {
            return Ok(());
        }
        let sender = gram.node;
        let cost = Payload::NodeGram(gram.clone()).matrices() * recipients.len() as u64 * self.matrix_bytes();
        let mut store = self.store.write().expect("mailbox lock poisoned");
        for &r in recipients {
            store.node_grams.entry((r, round)).or_default().insert(sender, gram.clone());
        }
        store.node_messages += recipients.len() as u64;
        *store.bytes.entry((round, sender)).or_default() += cost;
        Ok(())
    }

    /// The `(sender, class)` statistics `recipient` received at exactly `round`.
    pub fn read_stats(
        &self,
        recipient: usize,
        round: usize,
        wanted: &[(usize, usize)],
    ) -> Result<BTreeMap<(usize, usize), GramStat>> {
        let store = self.store.read().expect("mailbox lock poisoned");
        let inbox = store.class_stats.get(&(recipient, round));
        wanted
            .iter()
            .map(|&(sender, class)| {
                inbox
                    .and_then(|b| b.get(&(sender, class)))
                    .cloned()
                    .map(|s| ((sender, class), s))
                    .ok_or(Error::MissingStat { sender, class, round })
            })
            .collect()
    }

    pub fn read_node_gram(&self, recipient: usize, sender: usize, round: usize) -> Result<PeerBlocks> {
        let store = self.store.read().expect("mailbox lock poisoned");
        store
            .node_grams
            .get(&(recipient, round))
            .and_then(|b| b.get(&sender))
            .cloned()
            .ok_or(Error::MissingStat { sender, class: usize::MAX, round })
    }

    /// Drop stored payloads from rounds before `round`; byte counters are kept.
    pub fn discard_before(&self, round: usize) {
        let mut store = self.store.write().expect("mailbox lock poisoned");
        store.class_stats.retain(|&(_, r), _| r >= round);
        store.node_grams.retain(|&(_, r), _| r >= round);
    }

    /// `(round, node, bytes_sent)` rows, sorted, only for nonzero senders.
    pub fn byte_log(&self) -> Vec<(usize, usize, u64)> {
        let store = self.store.read().expect("mailbox lock poisoned");
        store.bytes.iter().map(|(&(round, node), &b)| (round, node, b)).collect()
    }

    pub fn total_bytes(&self) -> u64 {
        let store = self.store.read().expect("mailbox lock poisoned");
        store.bytes.values().sum()
    }

    /// Number of class-statistic and node-Gram deliveries so far.
    pub fn message_counts(&self) -> (u64, u64) {
        let store = self.store.read().expect("mailbox lock poisoned");
        (store.class_messages, store.node_messages)
    }
}

/// Render a byte log as `round,node,bytes_sent` CSV.
pub fn byte_log_csv(log: &[(usize, usize, u64)]) -> String {
    let mut out = String::from("round,node,bytes_sent\n");
    for (round, node, bytes) in log {
        let _ = writeln!(out, "{round},{node},{bytes}");
    }
    out
}
