//! Cluster-parallel, intra-cluster-sequential training for label-skewed
//! partitions.
//!
//! Every cluster of the plan hosts one virtual node per member agent. Inside a
//! cluster nodes update in turn; each one sees its predecessors' Grams from
//! this round and its successors' from the previous one. Replicas of an agent
//! are averaged after every round.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterPlan, VirtualNode};
use crate::data::check_cluster_proportions;
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::iid::{dual_invariants, dual_update, max_pairwise_gap, DualVar, NodeInit, NodeState, TrainConfig, TrainedState};
use crate::linalg::SymMatrix;
use crate::network::{GramStat, MailBox};
use crate::objective::{self, ClusterView, CompressionWeighting, LocalLossContext, LossBreakdown, PeerBlocks, RateParams, TermUse};

/// What to do when cluster class proportions disagree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssumptionPolicy {
    /// Refuse to train.
    #[default]
    Strict,
    /// Train anyway and record the violation.
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoniidConfig {
    pub train: TrainConfig,
    pub substitution: bool,
    pub weighting: CompressionWeighting,
    pub assumption: AssumptionPolicy,
    /// Per-cluster update order as positions into the cluster's (ascending)
    /// member list; ascending when absent.
    pub order: Option<Vec<Vec<usize>>>,
}

impl Default for NoniidConfig {
    fn default() -> Self {
        NoniidConfig {
            train: TrainConfig { gamma: 2.0, lr: 0.01, ..TrainConfig::default() },
            substitution: true,
            weighting: CompressionWeighting::GramOnly,
            assumption: AssumptionPolicy::Strict,
            order: None,
        }
    }
}

/// Which cluster members' Grams were fresh and which stale for one pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub round: usize,
    pub cluster: usize,
    pub position: usize,
    pub node: usize,
    /// `(peer, round the peer's Gram was computed at)`.
    pub peer_rounds: Vec<(usize, usize)>,
    /// Peer blocks entering the first inner step's loss.
    pub terms: Vec<TermUse>,
}

impl PassRecord {
    pub fn fresh_peers(&self) -> Vec<usize> {
        self.peer_rounds.iter().filter(|&&(_, r)| r == self.round).map(|&(p, _)| p).collect()
    }
}

/// Update order of every cluster as virtual-node ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BcdSchedule {
    pub orders: Vec<Vec<usize>>,
}

impl BcdSchedule {
    pub fn new(plan: &ClusterPlan, order: Option<&[Vec<usize>]>) -> Result<Self> {
        let mut orders = Vec::with_capacity(plan.n_clusters());
        for s in 0..plan.n_clusters() {
            let ids: Vec<usize> = plan.cluster_nodes(s).iter().map(|v| v.id).collect();
            let positions: Vec<usize> = match order.and_then(|o| o.get(s)) {
                Some(p) => p.clone(),
                None => (0..ids.len()).collect(),
            };
            let mut sorted = positions.clone();
            sorted.sort_unstable();
            if sorted != (0..ids.len()).collect::<Vec<_>>() {
                return Err(Error::InvalidParameter(format!("order of cluster {s} is not a permutation of its members")));
            }
            orders.push(positions.into_iter().map(|p| ids[p]).collect());
        }
        Ok(BcdSchedule { orders })
    }

    /// Round whose Gram `node` (at `position`) reads from `peer` in round `t`.
    pub fn source_round(&self, cluster: usize, position: usize, peer: usize, t: usize) -> usize {
        let peer_pos = self.orders[cluster].iter().position(|&v| v == peer).expect("peer in cluster");
        if peer_pos < position {
            t
        } else {
            t - 1
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct NoniidState {
    /// Per-agent parameters, losses, statistics and traffic. Losses, stats and
    /// consensus are indexed by virtual node.
    pub run: TrainedState,
    pub trace: Vec<PassRecord>,
    pub virtual_nodes: Vec<VirtualNode>,
    /// Set when the proportion check failed under [`AssumptionPolicy::Report`].
    pub assumption_violation: Option<String>,
    /// Duals updated by each virtual node per round.
    pub duals_per_node: Vec<usize>,
    /// Largest replica disagreement `max |θ_a − θ_b|` right after averaging.
    pub max_replica_gap: f64,
}

/// Replace every replica's parameters by their arithmetic mean.
pub fn average_virtual_nodes(replicas: &mut [&mut EncoderParams]) -> Result<()> {
    if replicas.len() < 2 {
        return Ok(());
    }
    for (i, r) in replicas.iter().enumerate().skip(1) {
        if !r.same_shape(replicas[0]) {
            return Err(Error::ArchMismatch(i));
        }
    }
    let mean = {
        let refs: Vec<&EncoderParams> = replicas.iter().map(|r| &**r).collect();
        encoder::mean_params(&refs).expect("nonempty")
    };
    for r in replicas.iter_mut() {
        **r = mean.clone();
    }
    Ok(())
}

/// Same update as the i.i.d. dual ascent, over label-wise peers.
pub fn noniid_dual_update(prev: &DualVar, v_i: &GramStat, v_j: &GramStat, rho: f64) -> Result<DualVar> {
    dual_update(prev, v_i, v_j, rho)
}

/// Label-wise peers: every other virtual node holding the class, except
/// replicas of the same agent.
fn labelwise_peers(vnodes: &[VirtualNode], classes: &[Vec<usize>]) -> Vec<BTreeMap<usize, Vec<usize>>> {
    vnodes
        .iter()
        .map(|v| {
            classes[v.id]
                .iter()
                .map(|&k| {
                    let peers = vnodes
                        .iter()
                        .filter(|u| u.agent != v.agent && classes[u.id].contains(&k))
                        .map(|u| u.id)
                        .collect();
                    (k, peers)
                })
                .collect()
        })
        .collect()
}

fn node_blocks(state: &NodeState, replication: u32, round: usize) -> Result<(Vec<GramStat>, PeerBlocks)> {
    let stats = state.class_stats(round)?;
    let blocks = stats.iter().map(|s| (s.class, (s.count, s.matrix.scaled(s.count as f64)))).collect();
    Ok((stats, PeerBlocks { node: state.id, replication, round, blocks }))
}

fn post_labelwise(mailbox: &MailBox, stats: &[GramStat], peers: &BTreeMap<usize, Vec<usize>>, round: usize) -> Result<()> {
    for s in stats {
        mailbox.post_stats(s.node, round, std::slice::from_ref(s), &peers[&s.class])?;
    }
    Ok(())
}

struct ClusterShape {
    cluster: usize,
    members: Vec<usize>,
    mass: f64,
    class_mass: Vec<f64>,
}

impl ClusterShape {
    fn view(&self, replication: u32, peers: Vec<PeerBlocks>, config: &NoniidConfig) -> ClusterView {
        ClusterView {
            cluster: self.cluster,
            members: self.members.clone(),
            self_replication: replication,
            cluster_mass: self.mass,
            class_mass: self.class_mass.clone(),
            peers,
            substitution: config.substitution,
            weighting: config.weighting,
        }
    }
}

fn full_cluster_eval(
    node: &NodeState,
    view: &ClusterView,
    ctx: &LocalLossContext,
    rate: &RateParams,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<f64>)> {
    let part = node.full_partition();
    let (z, cache) = encoder::forward_cached(&node.params, node.data.inputs.view())?;
    if !with_grad {
        return Ok((objective::cluster_loss(node.id, z.view(), &part, view, ctx, rate)?.loss, None));
    }
    let out = objective::cluster_loss_grad(node.id, z.view(), &part, view, ctx, rate)?;
    let g = encoder::backward_cached(&node.params, &cache, out.grad.expect("requested").view())?;
    Ok((out.loss, Some(g.squared_norm())))
}

/// Train over `plan`; `agents[i]` is agent `i`'s data and initial parameters.
pub fn run_noniid(agents: Vec<NodeInit>, plan: &ClusterPlan, config: &NoniidConfig) -> Result<NoniidState> {
    let train = &config.train;
    train.validate()?;
    if agents.len() != plan.n_agents() {
        return Err(Error::InvalidParameter(format!(
            "plan covers {} agents, got {} partitions",
            plan.n_agents(),
            agents.len()
        )));
    }
    let d = agents.first().ok_or_else(|| Error::InvalidParameter("no agents".into()))?.params.out_dim();
    let num_classes = agents[0].data.num_classes;
    for (i, a) in agents.iter().enumerate() {
        if a.params.out_dim() != d || a.data.num_classes != num_classes || a.params.input_dim() != a.data.n_features() {
            return Err(Error::ShapeMismatch(format!("agent {i} disagrees on dimensions")));
        }
    }
    let counts: Vec<Vec<usize>> = agents.iter().map(|a| a.data.class_counts()).collect();
    for (s, members) in plan.clusters.iter().enumerate() {
        let covered = (0..num_classes).all(|k| members.iter().any(|&a| counts[a][k] > 0));
        if !covered || members.iter().any(|&a| a >= agents.len()) {
            return Err(Error::PlanMismatch { node: usize::MAX, cluster: s });
        }
    }
    let mut out = NoniidState { virtual_nodes: plan.virtual_nodes.clone(), ..Default::default() };
    if let Err(e) = check_cluster_proportions(plan, &counts) {
        match config.assumption {
            AssumptionPolicy::Strict => return Err(e),
            AssumptionPolicy::Report => out.assumption_violation = Some(e.to_string()),
        }
    }
    let total_m: usize = counts.iter().flatten().sum();
    let rate = RateParams::new(train.eps_sq, total_m, d)?;
    let schedule = BcdSchedule::new(plan, config.order.as_deref())?;
    let masses = plan.cluster_masses(&counts);
    let to_f64 = |r: &num_rational::Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
    let shapes: Vec<ClusterShape> = (0..plan.n_clusters())
        .map(|s| ClusterShape {
            cluster: s,
            members: plan.cluster_nodes(s).iter().map(|v| v.id).collect(),
            mass: to_f64(&masses[s].total),
            class_mass: masses[s].per_class.iter().map(to_f64).collect(),
        })
        .collect();

    let vnodes = plan.virtual_nodes.clone();
    let nv = vnodes.len();
    let replication: Vec<u32> = vnodes.iter().map(|v| plan.replication[v.agent]).collect();
    let mut states: Vec<NodeState> = vnodes
        .iter()
        .map(|v| NodeState::new(v.id, NodeInit { data: agents[v.agent].data.clone(), params: agents[v.agent].params.clone() }, train))
        .collect();
    let classes: Vec<Vec<usize>> = states.iter().map(NodeState::classes).collect();
    let peers = labelwise_peers(&vnodes, &classes);
    out.duals_per_node = peers.iter().map(|p| p.values().map(Vec::len).sum()).collect();
    let mailbox = MailBox::new(nv, d);
    let cluster_peers = |id: usize| -> Vec<usize> {
        shapes[vnodes[id].cluster].members.iter().copied().filter(|&j| j != id).collect()
    };

    let mut stats: Vec<Vec<GramStat>> = Vec::with_capacity(nv);
    for st in &states {
        let (s, blocks) = node_blocks(st, replication[st.id], 0)?;
        post_labelwise(&mailbox, &s, &peers[st.id], 0)?;
        mailbox.post_node_gram(0, blocks, &cluster_peers(st.id))?;
        stats.push(s);
    }
    let mut duals: Vec<BTreeMap<(usize, usize), SymMatrix>> = peers
        .iter()
        .map(|p| p.iter().flat_map(|(&k, js)| js.iter().map(move |&j| ((j, k), SymMatrix::zeros(d)))).collect())
        .collect();
    let owners: Vec<usize> = (0..nv).collect();

    // Clusters own contiguous ranges of virtual-node ids.
    let mut bounds = Vec::with_capacity(shapes.len());
    for shape in &shapes {
        let lo = *shape.members.first().expect("nonempty cluster");
        let hi = *shape.members.last().expect("nonempty cluster") + 1;
        debug_assert_eq!(hi - lo, shape.members.len());
        bounds.push((lo, hi));
    }

    for t in 1..=train.rounds {
        let contexts: Vec<LocalLossContext> = (0..nv)
            .map(|i| {
                let wanted: Vec<(usize, usize)> = duals[i].keys().copied().collect();
                let peer_prev: BTreeMap<(usize, usize), SymMatrix> =
                    mailbox.read_stats(i, t - 1, &wanted)?.into_iter().map(|(key, s)| (key, s.matrix)).collect();
                let own: BTreeMap<usize, &GramStat> = stats[i].iter().map(|s| (s.class, s)).collect();
                let mut updated = BTreeMap::new();
                for (&(j, k), y) in &duals[i] {
                    let vi = own.get(&k).ok_or(Error::MissingStat { sender: i, class: k, round: t - 1 })?;
                    let vj = GramStat { node: j, class: k, count: 0, matrix: peer_prev[&(j, k)].clone(), round: t - 1 };
                    let prev = DualVar { owner: i, peer: j, class: k, matrix: y.clone() };
                    updated.insert((j, k), noniid_dual_update(&prev, vi, &vj, train.rho)?.matrix);
                }
                Ok(LocalLossContext {
                    gamma: train.gamma,
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
        out.run.max_dual_asymmetry = out.run.max_dual_asymmetry.max(asym);
        out.run.max_dual_sum = out.run.max_dual_sum.max(sum);

        let stale_view = |i: usize| -> Result<ClusterView> {
            let peers = cluster_peers(i).into_iter().map(|j| mailbox.read_node_gram(i, j, t - 1)).collect::<Result<_>>()?;
            Ok(shapes[vnodes[i].cluster].view(replication[i], peers, config))
        };
        let want_grad = train.grad_norm_every > 0 && (t - 1) % train.grad_norm_every == 0;
        if t == 1 || want_grad {
            let evals: Vec<(LossBreakdown, Option<f64>)> = states
                .par_iter()
                .map(|s| full_cluster_eval(s, &stale_view(s.id)?, &contexts[s.id], &rate, want_grad))
                .collect::<Result<_>>()?;
            if t == 1 {
                out.run.initial_losses = evals.iter().map(|e| e.0).collect();
            }
            if want_grad {
                out.run.grad_norms.push((t - 1, evals.iter().filter_map(|e| e.1).sum()));
            }
        }

        // Clusters in parallel, members in schedule order.
        let mut chunks: Vec<&mut [NodeState]> = Vec::with_capacity(bounds.len());
        let mut rest: &mut [NodeState] = &mut states;
        let mut offset = 0;
        for &(lo, hi) in &bounds {
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(hi - offset);
            chunks.push(&mut head[lo - offset..]);
            rest = tail;
            offset = hi;
        }
        let records: Vec<Vec<PassRecord>> = chunks
            .into_par_iter()
            .enumerate()
            .map(|(s, chunk)| {
                let lo = bounds[s].0;
                let mut recs = Vec::new();
                for (position, &id) in schedule.orders[s].iter().enumerate() {
                    let node = &mut chunk[id - lo];
                    let mut peer_rounds = Vec::new();
                    let mut blocks = Vec::new();
                    for j in cluster_peers(id) {
                        let r = schedule.source_round(s, position, j, t);
                        peer_rounds.push((j, r));
                        blocks.push(mailbox.read_node_gram(id, j, r)?);
                    }
                    let view = shapes[s].view(replication[id], blocks, config);
                    let mut terms = None;
                    node.adam.lr = train.lr_at(t);
                    for _ in 0..train.inner_steps {
                        let (x, part) = node.sample_batch(train.batch_size);
                        let (z, cache) = encoder::forward_cached(&node.params, x.view())?;
                        let res = objective::cluster_loss_grad(id, z.view(), &part, &view, &contexts[id], &rate)?;
                        let grads = encoder::backward_cached(&node.params, &cache, res.grad.expect("requested").view())?;
                        encoder::adam_step(&mut node.params, &grads, &mut node.adam)?;
                        terms.get_or_insert(res.terms);
                    }
                    let (_, fresh) = node_blocks(node, replication[id], t)?;
                    mailbox.post_node_gram(t, fresh, &cluster_peers(id))?;
                    recs.push(PassRecord { round: t, cluster: s, position, node: id, peer_rounds, terms: terms.unwrap_or_default() });
                }
                Ok(recs)
            })
            .collect::<Result<_>>()?;
        out.trace.extend(records.into_iter().flatten());

        for agent in 0..plan.n_agents() {
            let ids: Vec<usize> = plan.replicas_of(agent).iter().map(|v| v.id).collect();
            if ids.len() > 1 {
                let mut replicas: Vec<&mut EncoderParams> =
                    states.iter_mut().filter(|s| ids.contains(&s.id)).map(|s| &mut s.params).collect();
                average_virtual_nodes(&mut replicas)?;
                let first = replicas[0].flatten();
                for r in &replicas[1..] {
                    let gap = r.flatten().iter().zip(&first).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    out.max_replica_gap = out.max_replica_gap.max(gap);
                }
            }
        }

        let round_losses: Vec<LossBreakdown> = states
            .par_iter()
            .map(|s| {
                let peers = cluster_peers(s.id).into_iter().map(|j| mailbox.read_node_gram(s.id, j, t)).collect::<Result<_>>()?;
                let view = shapes[vnodes[s.id].cluster].view(replication[s.id], peers, config);
                full_cluster_eval(s, &view, &contexts[s.id], &rate, false).map(|e| e.0)
            })
            .collect::<Result<_>>()?;
        out.run.losses.push(round_losses);

        stats = states.par_iter().map(|s| s.class_stats(t)).collect::<Result<_>>()?;
        for (i, st) in stats.iter().enumerate() {
            post_labelwise(&mailbox, st, &peers[i], t)?;
        }
        mailbox.discard_before(t);
        out.run.consensus.push(max_pairwise_gap(&stats));

        if let Some(tol) = train.early_stop {
            if t > 10 {
                let now = out.run.mean_total(t - 1);
                let then = out.run.mean_total(t - 11);
                if ((now - then) / then.abs().max(1e-12)).abs() < tol {
                    break;
                }
            }
        }
    }

    out.run.params = (0..plan.n_agents())
        .map(|a| states[plan.replicas_of(a)[0].id].params.clone())
        .collect();
    out.run.final_stats = stats;
    out.run.byte_log = mailbox.byte_log();
    out.run.messages = mailbox.message_counts();
    Ok(out)
}

/// Each agent's encoding of its own data (replicas are identical).
pub fn agent_features(params: &[EncoderParams], agents: &[crate::data::Dataset]) -> Result<Vec<ndarray::Array2<f64>>> {
    params.iter().zip(agents).map(|(p, d)| encoder::forward(p, d.inputs.view())).collect()
}
