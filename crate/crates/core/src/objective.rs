//! Coding-rate objectives and the per-node augmented Lagrangians.
//!
//! Features are column-per-sample `d × m` matrices. All log-determinants use
//! the natural logarithm. Gradients are analytic: every `w·logdet(I + c·ZZᵀ)`
//! term contributes `2·w·c·(I + c·ZZᵀ)⁻¹·Z`.
//!
//! Mini-batches: when a node evaluates its loss on a batch, each class block is
//! rescaled to its population mass (`m_{i,k} / m'_{i,k}`), so the log-det
//! arguments use batch class counts while the rate weights keep the population
//! counts and the global `m`. On a full batch the scale factors are exactly 1.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, logdet_and_inverse, SymMatrix};

pub type FeatureMatrix = Array2<f64>;

/// Class membership of the columns of a feature matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    population: Vec<usize>,
}

impl ClassPartition {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let class_counts = count_labels(&labels, num_classes)?;
        Ok(ClassPartition { population: class_counts.clone(), labels, class_counts })
    }

    /// A batch partition whose class blocks stand in for `population[k]` samples.
    pub fn with_population(labels: Vec<usize>, population: Vec<usize>) -> Result<Self> {
        let class_counts = count_labels(&labels, population.len())?;
        for (k, (&b, &n)) in class_counts.iter().zip(population.iter()).enumerate() {
            if (b == 0) != (n == 0) {
                return Err(Error::InvalidParameter(format!(
                    "class {k}: batch count {b} inconsistent with population {n}"
                )));
            }
        }
        Ok(ClassPartition { labels, class_counts, population })
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-class column counts of this (possibly batch) partition.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Per-class population counts `m_{i,k}`.
    pub fn population(&self) -> &[usize] {
        &self.population
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn population_total(&self) -> usize {
        self.population.iter().sum()
    }

    /// Classes with at least one column.
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.class_counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(k, _)| k)
    }

    pub fn class_columns(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
    }

    fn is_full_batch(&self) -> bool {
        self.class_counts == self.population
    }
}

fn count_labels(labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::InvalidParameter(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        counts[l] += 1;
    }
    Ok(counts)
}

/// `ε²`, the global sample count `m` and the feature dimension `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub eps_sq: f64,
    pub total_m: usize,
    pub d: usize,
}

impl RateParams {
    pub fn new(eps_sq: f64, total_m: usize, d: usize) -> Result<Self> {
        if !(eps_sq > 0.0) || total_m == 0 || d == 0 {
            return Err(Error::InvalidParameter(format!(
                "rate params need eps_sq > 0, m > 0, d > 0 (got {eps_sq}, {total_m}, {d})"
            )));
        }
        Ok(RateParams { eps_sq, total_m, d })
    }

    /// High-precision condition `ε⁴ < min_k (m_k/m)·(d/d_k)²`.
    pub fn precision_condition_holds(&self, class_counts: &[usize], class_dims: &[usize]) -> bool {
        let m = self.total_m as f64;
        let d = self.d as f64;
        let bound = class_counts
            .iter()
            .zip(class_dims)
            .map(|(&mk, &dk)| (mk as f64 / m) * (d / dk as f64).powi(2))
            .fold(f64::INFINITY, f64::min);
        self.eps_sq * self.eps_sq < bound
    }

    fn check_rows(&self, z: ArrayView2<'_, f64>) -> Result<()> {
        if z.nrows() != self.d {
            return Err(Error::ShapeMismatch(format!(
                "features have {} rows, rate params expect d = {}",
                z.nrows(),
                self.d
            )));
        }
        Ok(())
    }
}

/// Loss components reported per node: `total = rc - r + dual + penalty`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rc: f64,
    pub r: f64,
    pub dual: f64,
    pub penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(rc: f64, r: f64, dual: f64, penalty: f64) -> Self {
        LossBreakdown { rc, r, dual, penalty, total: rc - r + dual + penalty }
    }
}

/// `½·logdet(I + d/(m_eff·ε²)·ZZᵀ)`.
pub fn coding_rate(z: ArrayView2<'_, f64>, p: &RateParams, m_eff: usize) -> Result<f64> {
    p.check_rows(z)?;
    let g = linalg::gram(z, 1.0);
    let c = p.d as f64 / (m_eff as f64 * p.eps_sq);
    Ok(0.5 * linalg::logdet_psd(&g.scaled(c), 1.0)?)
}

/// Gradient of [`coding_rate`] with respect to `Z`.
pub fn coding_rate_grad(z: ArrayView2<'_, f64>, p: &RateParams, m_eff: usize) -> Result<FeatureMatrix> {
    p.check_rows(z)?;
    let c = p.d as f64 / (m_eff as f64 * p.eps_sq);
    let a = shifted_identity(&z.dot(&z.t()), c);
    let inv = linalg::spd_inverse(a.view())?;
    Ok(inv.dot(&z) * c)
}

/// `Σ_k (m_k/2m)·logdet(I + d/(m_k·ε²)·Z_kZ_kᵀ)` with `m = p.total_m`.
pub fn class_coding_rate(z: ArrayView2<'_, f64>, part: &ClassPartition, p: &RateParams) -> Result<f64> {
    p.check_rows(z)?;
    check_columns(z, part)?;
    let m = p.total_m as f64;
    let mut total = 0.0;
    for k in 0..part.num_classes() {
        let mk = part.class_counts()[k];
        if mk == 0 {
            return Err(Error::EmptyClass(k));
        }
        let zk = z.select(Axis(1), &part.class_columns(k));
        let c = p.d as f64 / (mk as f64 * p.eps_sq);
        let g = linalg::gram(zk.view(), 1.0).scaled(c);
        total += (mk as f64 / (2.0 * m)) * linalg::logdet_psd(&g, 1.0)?;
    }
    Ok(total)
}

/// `ΔR = R(Z) − R^c(Z | Π)`.
pub fn mcr2_delta(z: ArrayView2<'_, f64>, part: &ClassPartition, p: &RateParams) -> Result<f64> {
    Ok(coding_rate(z, p, p.total_m)? - class_coding_rate(z, part, p)?)
}

fn check_columns(z: ArrayView2<'_, f64>, part: &ClassPartition) -> Result<()> {
    if z.ncols() != part.len() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns but the partition labels {}",
            z.ncols(),
            part.len()
        )));
    }
    Ok(())
}

fn shifted_identity(g: &Array2<f64>, c: f64) -> Array2<f64> {
    let mut a = g * c;
    a.diag_mut().iter_mut().for_each(|v| *v += 1.0);
    a
}

/// Column blocks of a node's batch, one per present class.
struct ClassBlocks {
    classes: Vec<usize>,
    columns: Vec<Vec<usize>>,
    features: Vec<Array2<f64>>,
    /// `Z_kZ_kᵀ` of the batch block.
    grams: Vec<Array2<f64>>,
    /// Batch column count per block.
    batch: Vec<f64>,
    /// Population-over-batch factor per block.
    scale: Vec<f64>,
}

impl ClassBlocks {
    fn new(z: ArrayView2<'_, f64>, part: &ClassPartition) -> Self {
        let mut out = ClassBlocks {
            classes: vec![],
            columns: vec![],
            features: vec![],
            grams: vec![],
            batch: vec![],
            scale: vec![],
        };
        for k in part.present_classes() {
            let cols = part.class_columns(k);
            let zk = z.select(Axis(1), &cols);
            let g = linalg::gram(zk.view(), 1.0).into_array();
            out.batch.push(cols.len() as f64);
            out.scale.push(part.population()[k] as f64 / cols.len() as f64);
            out.classes.push(k);
            out.columns.push(cols);
            out.features.push(zk);
            out.grams.push(g);
        }
        out
    }

    fn index_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&k| k == class)
    }

    /// `Z_kZ_kᵀ / m'_k`, the batch estimate of `V_{i,k}`.
    fn mean_gram(&self, idx: usize) -> Array2<f64> {
        &self.grams[idx] / self.batch[idx]
    }
}

fn scatter_columns(grad: &mut Array2<f64>, cols: &[usize], block: &Array2<f64>) {
    for (j, &c) in cols.iter().enumerate() {
        grad.column_mut(c).scaled_add(1.0, &block.column(j));
    }
}

/// `R_i` and `R_i^c` of one node, weighted by the global `m`.
pub fn local_rates(z: ArrayView2<'_, f64>, part: &ClassPartition, p: &RateParams) -> Result<(f64, f64)> {
    p.check_rows(z)?;
    check_columns(z, part)?;
    let blocks = ClassBlocks::new(z, part);
    let (r, _) = expansion_term(z, part, &blocks, p, false)?;
    let (rc, _) = compression_terms(part, &blocks, p, false)?;
    Ok((r, rc))
}

/// `R_i = (m_i/2m)·logdet(I + d/(m_i ε²)·Σ_k s_k Z_kZ_kᵀ)`; the gradient
/// returned is that of `+R_i`.
fn expansion_term(
    z: ArrayView2<'_, f64>,
    part: &ClassPartition,
    blocks: &ClassBlocks,
    p: &RateParams,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let mi = part.population_total() as f64;
    let m = p.total_m as f64;
    let alpha = p.d as f64 / (mi * p.eps_sq);
    let full = part.is_full_batch();
    let g = if full {
        z.dot(&z.t())
    } else {
        let mut g = Array2::<f64>::zeros((p.d, p.d));
        for (idx, gk) in blocks.grams.iter().enumerate() {
            g.scaled_add(blocks.scale[idx], gk);
        }
        g
    };
    let a = shifted_identity(&SymMatrix::symmetrized(g).into_array(), alpha);
    let (logdet, inv) = logdet_and_inverse(a.view())?;
    let value = mi / (2.0 * m) * logdet;
    if !want_grad {
        return Ok((value, None));
    }
    let coef = mi / m * alpha;
    let grad = if full {
        inv.dot(&z) * coef
    } else {
        let mut grad = Array2::<f64>::zeros(z.raw_dim());
        for (idx, zk) in blocks.features.iter().enumerate() {
            let gk = inv.dot(zk) * (coef * blocks.scale[idx]);
            scatter_columns(&mut grad, &blocks.columns[idx], &gk);
        }
        grad
    };
    Ok((value, Some(grad)))
}

/// `R_i^c = Σ_k (m_{i,k}/2m)·logdet(I + d/(m'_{i,k} ε²)·Z_kZ_kᵀ)`.
fn compression_terms(
    part: &ClassPartition,
    blocks: &ClassBlocks,
    p: &RateParams,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Array2<f64>>>)> {
    let m = p.total_m as f64;
    let mut value = 0.0;
    let mut grads = Vec::new();
    for (idx, &k) in blocks.classes.iter().enumerate() {
        let mik = part.population()[k] as f64;
        let beta = p.d as f64 / (blocks.batch[idx] * p.eps_sq);
        let a = shifted_identity(&blocks.grams[idx], beta);
        let (logdet, inv) = logdet_and_inverse(a.view())?;
        value += mik / (2.0 * m) * logdet;
        if want_grad {
            grads.push(inv.dot(&blocks.features[idx]) * (mik / m * beta));
        }
    }
    Ok((value, want_grad.then_some(grads)))
}

/// Dual variables, stale statistics and penalty for one node's local loss.
///
/// Keys of `duals` are `(peer, class)`; each one requires `peer_prev[(peer, class)]`
/// and `self_prev[class]`.
#[derive(Clone, Debug, Default)]
pub struct LocalLossContext {
    pub gamma: f64,
    pub duals: BTreeMap<(usize, usize), SymMatrix>,
    pub self_prev: BTreeMap<usize, SymMatrix>,
    pub peer_prev: BTreeMap<(usize, usize), SymMatrix>,
    /// Round the stale statistics were posted at; only used for error detail.
    pub stats_round: usize,
}

impl LocalLossContext {
    pub fn without_peers() -> Self {
        LocalLossContext::default()
    }
}

/// Dual and penalty terms of the local loss, with their per-block gradients.
fn consensus_terms(
    node: usize,
    blocks: &ClassBlocks,
    ctx: &LocalLossContext,
    want_grad: bool,
) -> Result<(f64, f64, Option<Vec<Array2<f64>>>)> {
    let mut dual = 0.0;
    let mut penalty = 0.0;
    let d = blocks.grams.first().map(|g| g.nrows()).unwrap_or(0);
    let mut multipliers: Vec<Array2<f64>> = blocks.classes.iter().map(|_| Array2::zeros((d, d))).collect();
    for (&(peer, k), y) in &ctx.duals {
        let idx = blocks
            .index_of(k)
            .ok_or_else(|| Error::InvalidParameter(format!("dual for class {k} absent at node {node}")))?;
        let vj = ctx.peer_prev.get(&(peer, k)).ok_or(Error::MissingStat {
            sender: peer,
            class: k,
            round: ctx.stats_round,
        })?;
        let vi_prev = ctx.self_prev.get(&k).ok_or(Error::MissingStat {
            sender: node,
            class: k,
            round: ctx.stats_round,
        })?;
        let v_hat = blocks.mean_gram(idx);
        let y = y.as_array();
        dual += y.iter().zip((&v_hat - vj.as_array()).iter()).map(|(a, b)| a * b).sum::<f64>();
        let centre = (vi_prev.as_array() + vj.as_array()) * 0.5;
        let resid = &v_hat - &centre;
        penalty += ctx.gamma * resid.iter().map(|v| v * v).sum::<f64>();
        if want_grad {
            let b = blocks.batch[idx];
            // d/dZ tr(Yᵀ ZZᵀ/b) = (Y + Yᵀ) Z / b ; d/dZ γ‖ZZᵀ/b − C‖² = 4γ/b (ZZᵀ/b − C) Z
            multipliers[idx].scaled_add(1.0 / b, &(y + &y.t()));
            multipliers[idx].scaled_add(4.0 * ctx.gamma / b, &resid);
        }
    }
    let grads = want_grad.then(|| {
        multipliers.iter().zip(blocks.features.iter()).map(|(mk, zk)| mk.dot(zk)).collect()
    });
    Ok((dual, penalty, grads))
}

fn iid_objective(
    node: usize,
    z: ArrayView2<'_, f64>,
    part: &ClassPartition,
    ctx: &LocalLossContext,
    p: &RateParams,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<FeatureMatrix>)> {
    p.check_rows(z)?;
    check_columns(z, part)?;
    let blocks = ClassBlocks::new(z, part);
    let (r, r_grad) = expansion_term(z, part, &blocks, p, want_grad)?;
    let (rc, rc_grads) = compression_terms(part, &blocks, p, want_grad)?;
    let (dual, penalty, cons_grads) = consensus_terms(node, &blocks, ctx, want_grad)?;
    let loss = LossBreakdown::assemble(rc, r, dual, penalty);
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grad = -r_grad.expect("requested gradient");
    for (idx, (gc, gd)) in rc_grads.unwrap().iter().zip(cons_grads.unwrap().iter()).enumerate() {
        scatter_columns(&mut grad, &blocks.columns[idx], &(gc + gd));
    }
    Ok((loss, Some(grad)))
}

/// Local augmented Lagrangian of a node under i.i.d. partitions:
///
/// `R_i^c − R_i + Σ_{j,k} tr(Y_{i,j,k}ᵀ(V̂_{i,k} − V_{j,k})) + γ‖V̂_{i,k} − (V_{i,k} + V_{j,k})/2‖²_F`
///
/// where `V̂_{i,k} = Z_{i,k}Z_{i,k}ᵀ/m_{i,k}` and `V` are the stale statistics.
pub fn iid_local_loss(
    node: usize,
    z: ArrayView2<'_, f64>,
    part: &ClassPartition,
    ctx: &LocalLossContext,
    p: &RateParams,
) -> Result<LossBreakdown> {
    iid_objective(node, z, part, ctx, p, false).map(|(l, _)| l)
}

/// Gradient of [`iid_local_loss`] with respect to `Z`, along with the loss.
pub fn iid_local_loss_grad(
    node: usize,
    z: ArrayView2<'_, f64>,
    part: &ClassPartition,
    ctx: &LocalLossContext,
    p: &RateParams,
) -> Result<(LossBreakdown, FeatureMatrix)> {
    iid_objective(node, z, part, ctx, p, true).map(|(l, g)| (l, g.expect("gradient")))
}

/// How the per-class compression weight treats replication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressionWeighting {
    /// Weight `m_k^s / 2m`; replication enters only through `1/S_j` inside the Gram sum.
    #[default]
    GramOnly,
    /// Weight `m_k^s / (2m·S_i)` with `S_i` the replication count of the updating node.
    NodeScaled,
}

/// Per-class Gram blocks `Z_{j,k}Z_{j,k}ᵀ` of another node in the same cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerBlocks {
    pub node: usize,
    pub replication: u32,
    /// Round at which these blocks were computed.
    pub round: usize,
    /// class → (m_{j,k}, Z_{j,k}Z_{j,k}ᵀ)
    pub blocks: BTreeMap<usize, (usize, SymMatrix)>,
}

/// What node `i` sees of its cluster when evaluating its block objective.
#[derive(Clone, Debug)]
pub struct ClusterView {
    pub cluster: usize,
    /// Node ids of the cluster, including the updating node.
    pub members: Vec<usize>,
    pub self_replication: u32,
    /// `m^s`.
    pub cluster_mass: f64,
    /// `m_k^s` for every class (0 when the cluster lacks the class).
    pub class_mass: Vec<f64>,
    pub peers: Vec<PeerBlocks>,
    /// Replace shared-class peer blocks by the scaled local block.
    pub substitution: bool,
    pub weighting: CompressionWeighting,
}

/// One peer Gram block considered by a cluster loss evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermUse {
    pub peer: usize,
    pub class: usize,
    pub round: usize,
    /// `true` when the block was replaced by the scaled local block (so the
    /// peer's own features do not enter the loss).
    pub substituted: bool,
}

#[derive(Clone, Debug)]
pub struct ClusterLossOutput {
    pub loss: LossBreakdown,
    pub grad: Option<FeatureMatrix>,
    pub terms: Vec<TermUse>,
}

/// Block objective of node `node` inside its cluster:
///
/// `−(m^s/2m)·logdet(I + d/(m^s ε²)·Σ_{j∈Ṽ^s} Z_jZ_jᵀ/S_j) + R^c_s + dual + penalty`
///
/// with shared-class peer blocks `Z_{j,k}Z_{j,k}ᵀ/S_j` replaced by
/// `m_{j,k}/(S_j m_{i,k})·Z_{i,k}Z_{i,k}ᵀ` when `view.substitution` is set.
pub fn cluster_loss(
    node: usize,
    z: ArrayView2<'_, f64>,
    part: &ClassPartition,
    view: &ClusterView,
    ctx: &LocalLossContext,
    p: &RateParams,
) -> Result<ClusterLossOutput> {
    cluster_objective(node, z, part, view, ctx, p, false)
}

/// [`cluster_loss`] plus its gradient with respect to `Z_i`.
pub fn cluster_loss_grad(
    node: usize,
    z: ArrayView2<'_, f64>,
    part: &ClassPartition,
    view: &ClusterView,
    ctx: &LocalLossContext,
    p: &RateParams,
) -> Result<ClusterLossOutput> {
    cluster_objective(node, z, part, view, ctx, p, true)
}

fn cluster_objective(
    node: usize,
    z: ArrayView2<'_, f64>,
    part: &ClassPartition,
    view: &ClusterView,
    ctx: &LocalLossContext,
    p: &RateParams,
    want_grad: bool,
) -> Result<ClusterLossOutput> {
    p.check_rows(z)?;
    check_columns(z, part)?;
    if !view.members.contains(&node) {
        return Err(Error::PlanMismatch { node, cluster: view.cluster });
    }
    for &member in view.members.iter().filter(|&&j| j != node) {
        if !view.peers.iter().any(|pb| pb.node == member) {
            return Err(Error::MissingStat { sender: member, class: usize::MAX, round: ctx.stats_round });
        }
    }
    if view.class_mass.len() != part.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "cluster view has {} class masses, partition has {} classes",
            view.class_mass.len(),
            part.num_classes()
        )));
    }

    let d = p.d;
    let m = p.total_m as f64;
    let blocks = ClassBlocks::new(z, part);
    let s_self = view.self_replication as f64;

    // Coefficient on the population-scaled own block Ŝ_k = s_k Z_kZ_kᵀ per class.
    let mut own_coef: Vec<f64> = vec![1.0 / s_self; blocks.classes.len()];
    // Peer blocks that are kept verbatim, grouped per class.
    let mut peer_class: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    let mut terms = Vec::new();
    for peer in view.peers.iter().filter(|pb| view.members.contains(&pb.node) && pb.node != node) {
        let s_peer = peer.replication as f64;
        for (&k, (m_jk, g_jk)) in &peer.blocks {
            let shared = blocks.index_of(k);
            match shared {
                Some(idx) if view.substitution => {
                    let m_ik = part.population()[k] as f64;
                    own_coef[idx] += *m_jk as f64 / (s_peer * m_ik);
                    terms.push(TermUse { peer: peer.node, class: k, round: peer.round, substituted: true });
                }
                _ => {
                    peer_class
                        .entry(k)
                        .or_insert_with(|| Array2::zeros((d, d)))
                        .scaled_add(1.0 / s_peer, g_jk.as_array());
                    terms.push(TermUse { peer: peer.node, class: k, round: peer.round, substituted: false });
                }
            }
        }
    }

    let own_scaled = |idx: usize| -> Array2<f64> { &blocks.grams[idx] * (own_coef[idx] * blocks.scale[idx]) };

    // Expansion over the whole cluster.
    let mut e = Array2::<f64>::zeros((d, d));
    for idx in 0..blocks.classes.len() {
        e += &own_scaled(idx);
    }
    for g in peer_class.values() {
        e += g;
    }
    let ms = view.cluster_mass;
    let alpha = d as f64 / (ms * p.eps_sq);
    let a = shifted_identity(&SymMatrix::symmetrized(e).into_array(), alpha);
    let (logdet_e, inv_e) = logdet_and_inverse(a.view())?;
    let r = ms / (2.0 * m) * logdet_e;

    let mut grad = want_grad.then(|| Array2::<f64>::zeros(z.raw_dim()));
    if let Some(grad) = grad.as_mut() {
        for (idx, zk) in blocks.features.iter().enumerate() {
            let c = -(ms / m) * alpha * own_coef[idx] * blocks.scale[idx];
            scatter_columns(grad, &blocks.columns[idx], &(inv_e.dot(zk) * c));
        }
    }

    // Compression per class present in the cluster.
    let mut rc = 0.0;
    for (k, &msk) in view.class_mass.iter().enumerate() {
        if msk <= 0.0 {
            continue;
        }
        let own_idx = blocks.index_of(k);
        let mut ck = match own_idx {
            Some(idx) => own_scaled(idx),
            None => Array2::zeros((d, d)),
        };
        if let Some(g) = peer_class.get(&k) {
            ck += g;
        }
        let beta = d as f64 / (msk * p.eps_sq);
        let weight = match view.weighting {
            CompressionWeighting::GramOnly => msk / (2.0 * m),
            CompressionWeighting::NodeScaled => msk / (2.0 * m * s_self),
        };
        let b = shifted_identity(&SymMatrix::symmetrized(ck).into_array(), beta);
        let (logdet_c, inv_c) = logdet_and_inverse(b.view())?;
        rc += weight * logdet_c;
        if let (Some(grad), Some(idx)) = (grad.as_mut(), own_idx) {
            let c = 2.0 * weight * beta * own_coef[idx] * blocks.scale[idx];
            scatter_columns(grad, &blocks.columns[idx], &(inv_c.dot(&blocks.features[idx]) * c));
        }
    }

    let (dual, penalty, cons_grads) = consensus_terms(node, &blocks, ctx, want_grad)?;
    if let (Some(grad), Some(cg)) = (grad.as_mut(), cons_grads) {
        for (idx, g) in cg.iter().enumerate() {
            scatter_columns(grad, &blocks.columns[idx], g);
        }
    }

    Ok(ClusterLossOutput { loss: LossBreakdown::assemble(rc, r, dual, penalty), grad, terms })
}
