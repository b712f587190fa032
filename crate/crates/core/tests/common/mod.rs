#![allow(dead_code)]

use std::collections::BTreeMap;

use dmcr_core::encoder::{self, Activation, AdamState, EncoderParams};
use dmcr_core::objective::{ClassPartition, ClusterView, CompressionWeighting, LocalLossContext, PeerBlocks, RateParams};
use dmcr_core::clustering::ClusterPlan;
use dmcr_core::data::{enforce_proportions, gen_synthetic_subspaces, partition, Dataset, EnforceMode, PartitionMode, PartitionSpec, SyntheticSpec};
use dmcr_core::iid::{NodeInit, TrainConfig};
use dmcr_core::SymMatrix;
use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn sym(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> SymMatrix {
    let a = normal(d, d, scale, rng);
    SymMatrix::symmetrized(&a + &a.t())
}

pub fn psd(d: usize, rank: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
    let w = normal(d, rank, 1.0, rng);
    SymMatrix::symmetrized(w.dot(&w.t()))
}

pub fn na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// `logdet(I + c·G)` through nalgebra's Cholesky.
pub fn logdet_shift(g: &DMatrix<f64>, c: f64) -> f64 {
    let a = DMatrix::identity(g.nrows(), g.ncols()) + g * c;
    let l = a.cholesky().expect("SPD").l();
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn columns(labels: &[usize], k: usize) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| i).collect()
}

pub fn block_gram(z: &Array2<f64>, cols: &[usize]) -> DMatrix<f64> {
    let zk = na(&z.select(Axis(1), cols));
    &zk * zk.transpose()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over flattened entries.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `z`.
pub fn fd_grad(z: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(z.raw_dim());
    let mut probe = z.clone();
    for idx in 0..z.len() {
        let (i, j) = (idx / z.ncols(), idx % z.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + FD_STEP;
        let up = f(&probe);
        probe[[i, j]] = orig - FD_STEP;
        let down = f(&probe);
        probe[[i, j]] = orig;
        g[[i, j]] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

pub struct IidInstance {
    pub node: usize,
    pub z: Array2<f64>,
    pub part: ClassPartition,
    pub ctx: LocalLossContext,
    pub rate: RateParams,
}

/// A node batch with random classes, population, duals and stale statistics.
pub fn iid_instance(seed: u64) -> IidInstance {
    let mut r = rng(seed);
    let d = r.random_range(3..=6);
    let k = r.random_range(2..=4);
    let full = r.random_bool(0.5);
    let mut labels = Vec::new();
    let mut population = vec![0; k];
    for c in 0..k {
        let b = r.random_range(2..=6);
        labels.extend(std::iter::repeat_n(c, b));
        population[c] = if full { b } else { b + r.random_range(1..=20) };
    }
    labels.shuffle(&mut r);
    let part = ClassPartition::with_population(labels.clone(), population.clone()).unwrap();
    let node = 0;
    let mut ctx = LocalLossContext { gamma: r.random_range(0.5..2.0), ..Default::default() };
    for c in 0..k {
        ctx.self_prev.insert(c, psd(d, 2, &mut r).scaled(0.2));
        for peer in 1..=r.random_range(1..=2) {
            ctx.duals.insert((peer, c), sym(d, 0.2, &mut r));
            ctx.peer_prev.insert((peer, c), psd(d, 2, &mut r).scaled(0.2));
        }
    }
    let total = population.iter().sum::<usize>() * r.random_range(1..=4);
    let rate = RateParams::new(r.random_range(0.3..1.0), total, d).unwrap();
    IidInstance { node, z: normal(d, labels.len(), 0.6, &mut r), part, ctx, rate }
}

/// Independent evaluation of the i.i.d. local augmented Lagrangian.
pub fn iid_oracle(inst: &IidInstance, z: &Array2<f64>) -> f64 {
    let p = &inst.rate;
    let (d, m) = (p.d as f64, p.total_m as f64);
    let labels = inst.part.labels();
    let pop = inst.part.population();
    let mi: f64 = pop.iter().sum::<usize>() as f64;
    let mut expand = DMatrix::zeros(p.d, p.d);
    let mut rc = 0.0;
    let mut cons = 0.0;
    for k in 0..pop.len() {
        let cols = columns(labels, k);
        let g = block_gram(z, &cols);
        let b = cols.len() as f64;
        let mik = pop[k] as f64;
        expand += &g * (mik / b);
        rc += mik / (2.0 * m) * logdet_shift(&(&g * (mik / b)), d / (mik * p.eps_sq));
        let v_hat = &g / b;
        for (&(peer, c), y) in &inst.ctx.duals {
            if c != k {
                continue;
            }
            let vj = na(inst.ctx.peer_prev[&(peer, c)].as_array());
            let vi = na(inst.ctx.self_prev[&c].as_array());
            cons += na(y.as_array()).dot(&(&v_hat - &vj));
            cons += inst.ctx.gamma * (&v_hat - (vi + &vj) * 0.5).norm_squared();
        }
    }
    let r = mi / (2.0 * m) * logdet_shift(&expand, d / (mi * p.eps_sq));
    rc - r + cons
}

pub struct ClusterInstance {
    pub node: usize,
    pub z: Array2<f64>,
    pub part: ClassPartition,
    pub view: ClusterView,
    pub ctx: LocalLossContext,
    pub rate: RateParams,
}

/// A cluster member's batch with random peer blocks, replication, and
/// (un)substituted shared classes.
pub fn cluster_instance(seed: u64) -> ClusterInstance {
    let mut r = rng(seed);
    let d = r.random_range(3..=5);
    let k = r.random_range(2..=4);
    let n_members = r.random_range(2..=4);
    let members: Vec<usize> = (0..n_members).collect();
    let node = r.random_range(0..n_members);
    let full = r.random_bool(0.5);
    let mut own: Vec<usize> = (0..k).filter(|_| r.random_bool(0.6)).collect();
    if own.is_empty() {
        own.push(r.random_range(0..k));
    }
    let mut labels = Vec::new();
    let mut population = vec![0; k];
    for &c in &own {
        let b = r.random_range(2..=5);
        labels.extend(std::iter::repeat_n(c, b));
        population[c] = if full { b } else { b + r.random_range(1..=15) };
    }
    labels.shuffle(&mut r);
    let part = ClassPartition::with_population(labels.clone(), population.clone()).unwrap();
    let self_rep = r.random_range(1..=3u32);
    let mut class_mass: Vec<f64> = population.iter().map(|&n| n as f64 / self_rep as f64).collect();
    let mut peers = Vec::new();
    for &j in members.iter().filter(|&&j| j != node) {
        let rep = r.random_range(1..=3u32);
        let mut blocks = BTreeMap::new();
        for c in 0..k {
            if r.random_bool(0.6) {
                let count = r.random_range(2..=12);
                blocks.insert(c, (count, psd(d, 2, &mut r)));
                class_mass[c] += count as f64 / rep as f64;
            }
        }
        peers.push(PeerBlocks { node: j, replication: rep, round: r.random_range(0..3), blocks });
    }
    let cluster_mass = class_mass.iter().sum::<f64>();
    let view = ClusterView {
        cluster: 0,
        members,
        self_replication: self_rep,
        cluster_mass,
        class_mass,
        peers,
        substitution: r.random_bool(0.5),
        weighting: if r.random_bool(0.5) { CompressionWeighting::GramOnly } else { CompressionWeighting::NodeScaled },
    };
    let mut ctx = LocalLossContext { gamma: r.random_range(0.5..2.0), ..Default::default() };
    for &c in &own {
        ctx.self_prev.insert(c, psd(d, 2, &mut r).scaled(0.2));
        if r.random_bool(0.7) {
            ctx.duals.insert((10, c), sym(d, 0.2, &mut r));
            ctx.peer_prev.insert((10, c), psd(d, 2, &mut r).scaled(0.2));
        }
    }
    let total = (cluster_mass.ceil() as usize) * r.random_range(2..=4);
    let rate = RateParams::new(r.random_range(0.3..1.0), total, d).unwrap();
    ClusterInstance { node, z: normal(d, labels.len(), 0.6, &mut r), part, view, ctx, rate }
}

/// Direct evaluation of the cluster loss: every peer term is materialized as
/// a matrix, substituted terms as the rescaled own block.
pub fn cluster_oracle(inst: &ClusterInstance, z: &Array2<f64>) -> f64 {
    let p = &inst.rate;
    let v = &inst.view;
    let (d, m) = (p.d as f64, p.total_m as f64);
    let labels = inst.part.labels();
    let pop = inst.part.population();
    let s_v = v.self_replication as f64;
    let k = pop.len();
    let mut own: Vec<Option<(DMatrix<f64>, f64)>> = vec![None; k];
    for c in 0..k {
        let cols = columns(labels, c);
        if !cols.is_empty() {
            own[c] = Some((block_gram(z, &cols) * (pop[c] as f64 / cols.len() as f64), cols.len() as f64));
        }
    }
    // Per-class sum of every term that enters the cluster Gram.
    let mut class_terms: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p.d, p.d); k];
    for c in 0..k {
        if let Some((g, _)) = &own[c] {
            class_terms[c] += g / s_v;
        }
    }
    for peer in &v.peers {
        let s_j = peer.replication as f64;
        for (&c, (m_jk, g_jk)) in &peer.blocks {
            let term = match (&own[c], v.substitution) {
                (Some((g, _)), true) => g * (*m_jk as f64 / (s_j * pop[c] as f64)),
                _ => na(g_jk.as_array()) / s_j,
            };
            class_terms[c] += term;
        }
    }
    let total: DMatrix<f64> = class_terms.iter().fold(DMatrix::zeros(p.d, p.d), |a, b| a + b);
    let r = v.cluster_mass / (2.0 * m) * logdet_shift(&total, d / (v.cluster_mass * p.eps_sq));
    let mut rc = 0.0;
    for c in 0..k {
        let msk = v.class_mass[c];
        if msk <= 0.0 {
            continue;
        }
        let w = match v.weighting {
            CompressionWeighting::GramOnly => msk / (2.0 * m),
            CompressionWeighting::NodeScaled => msk / (2.0 * m * s_v),
        };
        rc += w * logdet_shift(&class_terms[c], d / (msk * p.eps_sq));
    }
    let mut cons = 0.0;
    for (&(peer, c), y) in &inst.ctx.duals {
        let cols = columns(labels, c);
        let v_hat = block_gram(z, &cols) / cols.len() as f64;
        let vj = na(inst.ctx.peer_prev[&(peer, c)].as_array());
        let vi = na(inst.ctx.self_prev[&c].as_array());
        cons += na(y.as_array()).dot(&(&v_hat - &vj));
        cons += inst.ctx.gamma * (&v_hat - (vi + &vj) * 0.5).norm_squared();
    }
    rc - r + cons
}

pub struct EncoderInstance {
    pub params: EncoderParams,
    pub x: Array2<f64>,
    pub upstream: Array2<f64>,
}

pub fn encoder_instance(seed: u64) -> EncoderInstance {
    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let mut arch = vec![r.random_range(2..=5)];
    for _ in 0..depth {
        arch.push(r.random_range(2..=6));
    }
    let act = if r.random_bool(0.5) { Activation::Elu } else { Activation::Relu };
    let params = encoder::init_params(&arch, act, seed).unwrap();
    let b = r.random_range(2..=5);
    // Unit normalization is not differentiable at a zero output; redraw inputs
    // until every sample lands away from it.
    loop {
        let x = normal(arch[0], b, 1.0, &mut r);
        let (_, cache) = encoder::forward_cached(&params, x.view()).unwrap();
        if cache.raw.columns().into_iter().all(|c| c.dot(&c).sqrt() > 1e-2) {
            return EncoderInstance { x, upstream: normal(*arch.last().unwrap(), b, 1.0, &mut r), params };
        }
    }
}

/// `⟨G, f_θ(X)⟩` as a function of the flattened parameters.
pub fn encoder_objective(inst: &EncoderInstance, flat: &[f64]) -> f64 {
    let mut p = inst.params.clone();
    p.assign_flat(flat).unwrap();
    let z = encoder::forward(&p, inst.x.view()).unwrap();
    (&z * &inst.upstream).sum()
}

pub fn fd_flat(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Reference full-batch descent on `−ΔR` for a single encoder: gradients of
/// both rates come from explicit inverses, then the shared backward pass and
/// optimizer step. Returns the objective after every round.
pub fn centralized_descent(
    mut params: EncoderParams,
    x: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    eps_sq: f64,
    lr: f64,
    weight_decay: f64,
    rounds: usize,
    inner: usize,
) -> Vec<f64> {
    let m = labels.len() as f64;
    let d = params.out_dim();
    let objective = |z: &Array2<f64>| -> (f64, Array2<f64>) {
        let alpha = d as f64 / (m * eps_sq);
        let a = DMatrix::identity(d, d) + na(&z.dot(&z.t())) * alpha;
        let inv = a.clone().try_inverse().unwrap();
        let r = 0.5 * logdet_shift(&na(&z.dot(&z.t())), alpha);
        let zn = na(z);
        let mut grad = -(&inv * &zn) * alpha;
        let mut rc = 0.0;
        for k in 0..num_classes {
            let cols = columns(labels, k);
            let mk = cols.len() as f64;
            let g = block_gram(z, &cols);
            let beta = d as f64 / (mk * eps_sq);
            rc += mk / (2.0 * m) * logdet_shift(&g, beta);
            let inv_k = (DMatrix::identity(d, d) + &g * beta).try_inverse().unwrap();
            for &c in &cols {
                let col = &inv_k * zn.column(c) * (mk / m * beta);
                let mut gc = grad.column_mut(c);
                gc += col;
            }
        }
        let g = Array2::from_shape_fn((d, z.ncols()), |(i, j)| grad[(i, j)]);
        (rc - r, g)
    };
    let mut adam = AdamState::new(&params, lr, weight_decay);
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        for _ in 0..inner {
            let (z, cache) = encoder::forward_cached(&params, x.view()).unwrap();
            let (_, gz) = objective(&z);
            let grads = encoder::backward_cached(&params, &cache, gz.view()).unwrap();
            encoder::adam_step(&mut params, &grads, &mut adam).unwrap();
        }
        let z = encoder::forward(&params, x.view()).unwrap();
        out.push(objective(&z).0);
    }
    out
}

pub fn synthetic(k: usize, class_dim: usize, per_class: usize, ambient: usize, seed: u64) -> Dataset {
    gen_synthetic_subspaces(&SyntheticSpec { num_classes: k, class_dim, per_class, ambient, noise: 0.05, seed }).unwrap()
}

pub fn init_encoder(arch: &[usize], seed: u64) -> EncoderParams {
    encoder::init_params(arch, Activation::Elu, seed).unwrap()
}

/// Balanced i.i.d. shards of a synthetic set, one encoder per node.
pub fn iid_nodes(n_nodes: usize, k: usize, per_node_class: usize, arch: &[usize], seed: u64) -> Vec<NodeInit> {
    let data = synthetic(k, 2, n_nodes * per_node_class, arch[0], seed);
    let shards = partition(&data, &PartitionSpec { mode: PartitionMode::Iid, n_nodes, seed }).unwrap();
    shards
        .into_iter()
        .enumerate()
        .map(|(i, s)| NodeInit { data: s.data, params: init_encoder(arch, seed * 31 + i as u64) })
        .collect()
}

/// Label-skewed agents, proportions equalized over `plan`.
pub fn label_nodes(lists: &[Vec<usize>], k: usize, per_class: usize, plan: &ClusterPlan, arch: &[usize], seed: u64) -> Vec<NodeInit> {
    let data = synthetic(k, 2, per_class, arch[0], seed);
    let shards = partition(&data, &PartitionSpec { mode: PartitionMode::ByLabels(lists.to_vec()), n_nodes: lists.len(), seed }).unwrap();
    let (shards, _) = enforce_proportions(&shards, EnforceMode::Clusters(plan), seed).unwrap();
    shards
        .into_iter()
        .enumerate()
        .map(|(i, s)| NodeInit { data: s.data, params: init_encoder(arch, seed * 31 + i as u64) })
        .collect()
}

pub fn short_config(rounds: usize, seed: u64) -> TrainConfig {
    TrainConfig { rounds, lr: 0.003, inner_steps: 2, batch_size: 1000, seed, grad_norm_every: 0, ..TrainConfig::default() }
}

/// `(T+1)·Σ_i |N_i|·K·d²·8`; round 0 also broadcasts.
pub fn iid_closed_form(topo: &dmcr_core::network::Topology, k: usize, d: usize, rounds: usize) -> u64 {
    (rounds as u64 + 1) * (0..topo.n_nodes()).map(|i| (topo.neighbors(i).len() * k * d * d * 8) as u64).sum::<u64>()
}

/// `(T+1)·Σ_v (Σ_{j ∈ cluster∖v} |K_j| + Σ_{k ∈ K_v} |label-wise peers of v for k|)·d²·8`.
pub fn noniid_closed_form(lists: &[Vec<usize>], clusters: &[Vec<usize>], d: usize, rounds: usize) -> u64 {
    let mut vnodes = Vec::new();
    for (s, members) in clusters.iter().enumerate() {
        for &a in members {
            vnodes.push((s, a));
        }
    }
    let mut matrices = 0;
    for &(s, a) in &vnodes {
        matrices += clusters[s].iter().filter(|&&b| b != a).map(|&b| lists[b].len()).sum::<usize>();
        for k in &lists[a] {
            matrices += vnodes.iter().filter(|&&(_, b)| b != a && lists[b].contains(k)).count();
        }
    }
    (rounds as u64 + 1) * (matrices * d * d * 8) as u64
}

