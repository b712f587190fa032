//! Primal–dual training for i.i.d. partitions.
//!
//! Each round: every node moves its duals `Y_{i,j,k}` by `ρ(V_i − V_j)` using
//! last round's statistics, takes `T'` optimizer steps on its local augmented
//! Lagrangian, then recomputes its class Grams on all local data and sends
//! them to its neighbours.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_iid_proportions, Dataset};
use crate::encoder::{self, AdamState, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::network::{GramStat, MailBox, Topology};
use crate::objective::{self, ClassPartition, LocalLossContext, LossBreakdown, RateParams};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dual step `ρ`.
    pub rho: f64,
    /// Penalty `γ`.
    pub gamma: f64,
    /// Learning rate `η`.
    pub lr: f64,
    pub weight_decay: f64,
    /// Outer rounds `T`.
    pub rounds: usize,
    /// Optimizer steps per round `T'`.
    pub inner_steps: usize,
    pub batch_size: usize,
    pub eps_sq: f64,
    pub seed: u64,
    /// Evaluate the full-batch parameter gradient norm every this many rounds (0 = never).
    pub grad_norm_every: usize,
    /// Stop once the mean total loss changes by less than this (relative) over 10 rounds.
    pub early_stop: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Learning rate as a function of the round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `lr · floor` at the last round.
    Cosine { floor: f64 },
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rho: 0.1,
            gamma: 1.0,
            lr: 0.1,
            weight_decay: 1e-5,
            rounds: 1000,
            inner_steps: 5,
            batch_size: 1000,
            eps_sq: 0.5,
            seed: 0,
            grad_norm_every: 10,
            early_stop: None,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Learning rate used during round `t` (1-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { floor } => {
                let span = self.rounds.saturating_sub(1).max(1) as f64;
                let frac = (t.saturating_sub(1) as f64 / span).min(1.0);
                self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.eps_sq > 0.0) {
            return bad("eps_sq must be positive");
        }
        if self.rounds == 0 || self.batch_size == 0 {
            return bad("rounds and batch size must be at least 1");
        }
        if let LrSchedule::Cosine { floor } = self.schedule {
            if !(0.0..=1.0).contains(&floor) {
                return bad("cosine floor must be in [0, 1]");
            }
        }
        Ok(())
    }
}

/// `T' = epochs · ⌈m_i / batch⌉`.
pub fn inner_steps_for_epochs(epochs: usize, samples: usize, batch: usize) -> usize {
    epochs * samples.div_ceil(batch.max(1))
}

/// `Y_{i,j,k}` owned by node `owner` for peer `peer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVar {
    pub owner: usize,
    pub peer: usize,
    pub class: usize,
    pub matrix: SymMatrix,
}

/// `Y ← Y + ρ(V_i − V_j)`.
pub fn dual_update(prev: &DualVar, v_i: &GramStat, v_j: &GramStat, rho: f64) -> Result<DualVar> {
    if v_i.class != v_j.class {
        return Err(Error::ClassMismatch { left: v_i.class, right: v_j.class });
    }
    if prev.class != v_i.class {
        return Err(Error::ClassMismatch { left: prev.class, right: v_i.class });
    }
    if v_i.matrix.dim() != v_j.matrix.dim() || prev.matrix.dim() != v_i.matrix.dim() {
        return Err(Error::ShapeMismatch("dual update operands differ in dimension".into()));
    }
    let mut matrix = prev.matrix.clone();
    matrix.add_scaled(rho, &v_i.matrix.sub(&v_j.matrix));
    Ok(DualVar { owner: prev.owner, peer: prev.peer, class: prev.class, matrix })
}

/// A node's local data and initial encoder.
#[derive(Clone, Debug)]
pub struct NodeInit {
    pub data: Dataset,
    pub params: EncoderParams,
}

/// Mutable per-node training state.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: usize,
    pub data: Dataset,
    pub params: EncoderParams,
    pub adam: AdamState,
    pub(crate) rng: ChaCha8Rng,
    class_cols: Vec<Vec<usize>>,
}

impl NodeState {
    pub fn new(id: usize, init: NodeInit, config: &TrainConfig) -> Self {
        let class_cols = (0..init.data.num_classes).map(|k| init.data.class_indices(k)).collect();
        NodeState {
            id,
            adam: AdamState::new(&init.params, config.lr, config.weight_decay),
            params: init.params,
            data: init.data,
            rng: seed::rng(config.seed, seed::tag::BATCH, id as u64),
            class_cols,
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        (0..self.class_cols.len()).filter(|&k| !self.class_cols[k].is_empty()).collect()
    }

    pub fn population(&self) -> Vec<usize> {
        self.class_cols.iter().map(Vec::len).collect()
    }

    /// Stratified batch: per-class quotas proportional to local counts (at
    /// least one each), drawn without replacement. Batches at least as large
    /// as the local set use every sample in stored order.
    pub fn sample_batch(&mut self, batch: usize) -> (Array2<f64>, ClassPartition) {
        let m = self.data.len();
        if batch >= m {
            let part = ClassPartition::new(self.data.labels.clone(), self.data.num_classes).expect("valid labels");
            return (self.data.inputs.clone(), part);
        }
        let mut cols = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        for (k, members) in self.class_cols.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let quota = ((batch as f64 * members.len() as f64 / m as f64).round() as usize).clamp(1, members.len());
            let chosen: Vec<usize> = members.choose_multiple(&mut self.rng, quota).copied().collect();
            labels.extend(std::iter::repeat_n(k, chosen.len()));
            cols.extend(chosen);
        }
        let part = ClassPartition::with_population(labels, self.population()).expect("batch classes are local classes");
        (self.data.inputs.select(Axis(1), &cols), part)
    }

    pub fn full_partition(&self) -> ClassPartition {
        ClassPartition::new(self.data.labels.clone(), self.data.num_classes).expect("valid labels")
    }

    /// Class Grams `V_{i,k}` on all local data.
    pub fn class_stats(&self, round: usize) -> Result<Vec<GramStat>> {
        let z = encoder::forward(&self.params, self.data.inputs.view())?;
        self.classes()
            .into_iter()
            .map(|k| GramStat::from_features(self.id, k, round, z.select(Axis(1), &self.class_cols[k]).view()))
            .collect()
    }
}

/// Full-batch local loss and, optionally, its parameter-gradient norm².
fn full_batch_eval(
    node: &NodeState,
    ctx: &LocalLossContext,
    rate: &RateParams,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<f64>)> {
    let part = node.full_partition();
    let (z, cache) = encoder::forward_cached(&node.params, node.data.inputs.view())?;
    if !with_grad {
        return Ok((objective::iid_local_loss(node.id, z.view(), &part, ctx, rate)?, None));
    }
    let (loss, gz) = objective::iid_local_loss_grad(node.id, z.view(), &part, ctx, rate)?;
    let g = encoder::backward_cached(&node.params, &cache, gz.view())?;
    Ok((loss, Some(g.squared_norm())))
}

/// `T'` stratified optimizer steps of round `round`; returns the loss of the last batch.
pub fn local_round(
    node: &mut NodeState,
    ctx: &LocalLossContext,
    rate: &RateParams,
    config: &TrainConfig,
    round: usize,
) -> Result<Option<LossBreakdown>> {
    let mut last = None;
    node.adam.lr = config.lr_at(round);
    for _ in 0..config.inner_steps {
        let (x, part) = node.sample_batch(config.batch_size);
        let (z, cache) = encoder::forward_cached(&node.params, x.view())?;
        let (loss, gz) = objective::iid_local_loss_grad(node.id, z.view(), &part, ctx, rate)?;
        let grads = encoder::backward_cached(&node.params, &cache, gz.view())?;
        encoder::adam_step(&mut node.params, &grads, &mut node.adam)?;
        last = Some(loss);
    }
    Ok(last)
}

/// Everything a run leaves behind.
#[derive(Clone, Debug, Default)]
pub struct TrainedState {
    pub params: Vec<EncoderParams>,
    /// Last posted class statistics, per node.
    pub final_stats: Vec<Vec<GramStat>>,
    /// Full-batch losses at the initial parameters under the first round's context.
    pub initial_losses: Vec<LossBreakdown>,
    /// `losses[t][i]`: node `i`'s full-batch loss after round `t + 1`'s local steps.
    pub losses: Vec<Vec<LossBreakdown>>,
    /// Max over classes and node pairs of `‖V_{i,k} − V_{j,k}‖_F`, after each round.
    pub consensus: Vec<f64>,
    /// `(t, Σ_i ‖∇_θ L_i‖²)` at `θ^t` with `Y^{t+1}`, `V^t`.
    pub grad_norms: Vec<(usize, f64)>,
    /// `(round, node, bytes)` sent.
    pub byte_log: Vec<(usize, usize, u64)>,
    /// Largest `|Y_{i,j,k} + Y_{j,i,k}|` seen in any round.
    pub max_dual_asymmetry: f64,
    /// Largest entry of `Σ_{i,j} Y_{i,j,k}` seen in any round.
    pub max_dual_sum: f64,
    /// Class-statistic and node-Gram deliveries.
    pub messages: (u64, u64),
}

impl TrainedState {
    pub fn mean_total(&self, round: usize) -> f64 {
        let l = &self.losses[round];
        l.iter().map(|b| b.total).sum::<f64>() / l.len() as f64
    }
}

pub(crate) fn max_pairwise_gap(stats: &[Vec<GramStat>]) -> f64 {
    let mut by_class: BTreeMap<usize, Vec<&SymMatrix>> = BTreeMap::new();
    for s in stats.iter().flatten() {
        by_class.entry(s.class).or_default().push(&s.matrix);
    }
    let mut worst: f64 = 0.0;
    for mats in by_class.values() {
        for a in 0..mats.len() {
            for b in a + 1..mats.len() {
                worst = worst.max(mats[a].sub(mats[b]).frobenius_norm());
            }
        }
    }
    worst
}

/// `(max |Y_{ijk} + Y_{jik}|, max |Σ_{i,j} Y_{ijk}|)`.
pub(crate) fn dual_invariants(duals: &[BTreeMap<(usize, usize), SymMatrix>], owners: &[usize]) -> (f64, f64) {
    let pos: BTreeMap<usize, usize> = owners.iter().enumerate().map(|(p, &o)| (o, p)).collect();
    let mut asym: f64 = 0.0;
    let mut sums: BTreeMap<usize, SymMatrix> = BTreeMap::new();
    for (p, map) in duals.iter().enumerate() {
        for (&(j, k), y) in map {
            let back = pos.get(&j).and_then(|&q| duals[q].get(&(owners[p], k)));
            match back {
                Some(other) => asym = asym.max(y.add(other).as_array().iter().fold(0.0, |m, v| m.max(v.abs()))),
                None => asym = f64::INFINITY,
            }
            sums.entry(k).or_insert_with(|| SymMatrix::zeros(y.dim())).add_scaled(1.0, y);
        }
    }
    let sum = sums.values().map(|s| s.as_array().iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max);
    (asym, sum)
}

fn check_nodes(nodes: &[NodeInit]) -> Result<(usize, usize)> {
    let first = nodes.first().ok_or_else(|| Error::InvalidParameter("no nodes".into()))?;
    let d = first.params.out_dim();
    let k = first.data.num_classes;
    for (i, n) in nodes.iter().enumerate() {
        if n.params.out_dim() != d || n.data.num_classes != k {
            return Err(Error::ShapeMismatch(format!("node {i} disagrees on feature dimension or class count")));
        }
        if n.params.input_dim() != n.data.n_features() {
            return Err(Error::ShapeMismatch(format!("node {i}: encoder input width differs from data")));
        }
    }
    Ok((d, k))
}

/// Run the i.i.d. algorithm on `nodes` over `topology`.
pub fn run_iid(nodes: Vec<NodeInit>, topology: &Topology, config: &TrainConfig) -> Result<TrainedState> {
    config.validate()?;
    let (d, _) = check_nodes(&nodes)?;
    if topology.n_nodes() != nodes.len() {
        return Err(Error::InvalidParameter(format!(
            "topology has {} nodes, got {} partitions",
            topology.n_nodes(),
            nodes.len()
        )));
    }
    let counts: Vec<Vec<usize>> = nodes.iter().map(|n| n.data.class_counts()).collect();
    check_iid_proportions(&counts)?;
    let total_m = counts.iter().flatten().sum();
    let rate = RateParams::new(config.eps_sq, total_m, d)?;
    let n = nodes.len();
    let mut states: Vec<NodeState> = nodes.into_iter().enumerate().map(|(i, init)| NodeState::new(i, init, config)).collect();
    let mailbox = MailBox::new(n, d);

    // Round 0: initial statistics.
    let mut stats: Vec<Vec<GramStat>> = states.par_iter().map(|s| s.class_stats(0)).collect::<Result<_>>()?;
    for (i, st) in stats.iter().enumerate() {
        mailbox.post_stats(i, 0, st, topology.neighbors(i))?;
    }
    let mut duals: Vec<BTreeMap<(usize, usize), SymMatrix>> = states
        .iter()
        .map(|s| {
            topology
                .neighbors(s.id)
                .iter()
                .flat_map(|&j| s.classes().into_iter().map(move |k| ((j, k), SymMatrix::zeros(d))))
                .collect()
        })
        .collect();
    let owners: Vec<usize> = (0..n).collect();

    let mut out = TrainedState::default();
    for t in 1..=config.rounds {
        // Dual ascent with round t−1 statistics.
        let contexts: Vec<LocalLossContext> = (0..n)
            .map(|i| {
                let wanted: Vec<(usize, usize)> = duals[i].keys().copied().collect();
                let peer_prev: BTreeMap<(usize, usize), SymMatrix> = mailbox
                    .read_stats(i, t - 1, &wanted)?
                    .into_iter()
                    .map(|(key, s)| (key, s.matrix))
                    .collect();
                let own: BTreeMap<usize, &GramStat> = stats[i].iter().map(|s| (s.class, s)).collect();
                let mut updated = BTreeMap::new();
                for (&(j, k), y) in &duals[i] {
                    let vi = own.get(&k).ok_or(Error::MissingStat { sender: i, class: k, round: t - 1 })?;
                    let vj = GramStat { node: j, class: k, count: 0, matrix: peer_prev[&(j, k)].clone(), round: t - 1 };
                    let prev = DualVar { owner: i, peer: j, class: k, matrix: y.clone() };
                    updated.insert((j, k), dual_update(&prev, vi, &vj, config.rho)?.matrix);
                }
                Ok(LocalLossContext {
                    gamma: config.gamma,
                    duals: updated,
                    self_prev: own.iter().map(|(&k, s)| (k, s.matrix.clone())).collect(),
                    peer_prev,
                    stats_round: t - 1,
                })
            })
            .collect::<Result<_>>()?;
        for (i, ctx) in contexts.iter().enumerate() {
            duals[i] = ctx.duals.clone();
        }
        let (asym, sum) = dual_invariants(&duals, &owners);
        out.max_dual_asymmetry = out.max_dual_asymmetry.max(asym);
        out.max_dual_sum = out.max_dual_sum.max(sum);

        let want_grad = config.grad_norm_every > 0 && (t - 1) % config.grad_norm_every == 0;
        if t == 1 || want_grad {
            let evals: Vec<(LossBreakdown, Option<f64>)> = states
                .par_iter()
                .zip(contexts.par_iter())
                .map(|(s, ctx)| full_batch_eval(s, ctx, &rate, want_grad))
                .collect::<Result<_>>()?;
            if t == 1 {
                out.initial_losses = evals.iter().map(|e| e.0).collect();
            }
            if want_grad {
                out.grad_norms.push((t - 1, evals.iter().filter_map(|e| e.1).sum()));
            }
        }

        states
            .par_iter_mut()
            .zip(contexts.par_iter())
            .try_for_each(|(s, ctx)| local_round(s, ctx, &rate, config, t).map(|_| ()))?;

        let round_losses: Vec<LossBreakdown> = states
            .par_iter()
            .zip(contexts.par_iter())
            .map(|(s, ctx)| full_batch_eval(s, ctx, &rate, false).map(|e| e.0))
            .collect::<Result<_>>()?;
        out.losses.push(round_losses);

        stats = states.par_iter().map(|s| s.class_stats(t)).collect::<Result<_>>()?;
        for (i, st) in stats.iter().enumerate() {
            mailbox.post_stats(i, t, st, topology.neighbors(i))?;
        }
        mailbox.discard_before(t);
        out.consensus.push(max_pairwise_gap(&stats));

        if let Some(tol) = config.early_stop {
            if t > 10 {
                let now = out.mean_total(t - 1);
                let then = out.mean_total(t - 11);
                if ((now - then) / then.abs().max(1e-12)).abs() < tol {
                    break;
                }
            }
        }
    }
    out.params = states.into_iter().map(|s| s.params).collect();
    out.final_stats = stats;
    out.byte_log = mailbox.byte_log();
    out.messages = mailbox.message_counts();
    Ok(out)
}
