//! Datasets: synthetic union-of-subspaces generator, IDX ingestion,
//! partitioning across nodes, and class-proportion enforcement.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterPlan;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Idx,
}

/// Column-per-sample inputs with dense labels `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, provenance: Provenance) -> Result<Self> {
        if inputs.ncols() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} input columns but {} labels",
                inputs.ncols(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidParameter(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Dataset { inputs, labels, num_classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
    }

    /// Columns `idx` in the given order (repeats allowed).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(1), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub class_dim: usize,
    pub per_class: usize,
    pub ambient: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Orthonormal columns from Gaussian draws via modified Gram–Schmidt.
fn random_orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let mut q = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
        let mut ok = true;
        for j in 0..cols {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let qi = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &qi);
            }
            let n = q.column(j).dot(&q.column(j)).sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            q.column_mut(j).mapv_inplace(|v| v / n);
        }
        if ok {
            return q;
        }
    }
}

/// Class `k` lives in its own `class_dim`-dimensional subspace; the subspaces
/// are mutually orthogonal. Samples are `U_k c + σ n` with `c, n` standard normal,
/// shuffled across classes.
pub fn gen_synthetic_subspaces(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec { num_classes, class_dim, per_class, ambient, noise, seed: s } = *spec;
    if num_classes == 0 || class_dim == 0 || per_class == 0 {
        return Err(Error::BadDims("classes, class dimension and per-class count must be positive".into()));
    }
    if num_classes * class_dim > ambient {
        return Err(Error::BadDims(format!(
            "{num_classes} classes × {class_dim} dims exceed ambient dimension {ambient}"
        )));
    }
    if !(noise >= 0.0) {
        return Err(Error::BadDims(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = seed::rng(s, seed::tag::DATA, 0);
    let frames = random_orthonormal(ambient, num_classes * class_dim, &mut rng);
    let m = num_classes * per_class;
    let mut order: Vec<usize> = (0..m).map(|i| i % num_classes).collect();
    order.shuffle(&mut rng);
    let mut inputs = Array2::<f64>::zeros((ambient, m));
    for (j, &k) in order.iter().enumerate() {
        let basis = frames.slice(ndarray::s![.., k * class_dim..(k + 1) * class_dim]);
        let coef: Vec<f64> = (0..class_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut col = inputs.column_mut(j);
        for (c, b) in coef.iter().zip(basis.columns()) {
            col.scaled_add(*c, &b);
        }
        if noise > 0.0 {
            col.iter_mut().for_each(|v| *v += noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Dataset::new(inputs, order, num_classes, Provenance::Synthetic)
}

/// First `per_class` samples of every class (in dataset order) go to the
/// second set, the rest to the first.
pub fn split_per_class(data: &Dataset, per_class: usize) -> Result<(Dataset, Dataset)> {
    let mut seen = vec![0usize; data.num_classes];
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for (i, &l) in data.labels.iter().enumerate() {
        if seen[l] < per_class {
            held.push(i);
        } else {
            keep.push(i);
        }
        seen[l] += 1;
    }
    if let Some(k) = seen.iter().position(|&c| c <= per_class) {
        return Err(Error::InsufficientSamples { class: k, available: seen[k], required: per_class + 1 });
    }
    Ok((data.subset(&keep), data.subset(&held)))
}

// ---------------------------------------------------------------------------
// IDX

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl IdxData {
    pub fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            IdxData::U8(v) => v.iter().map(|&b| b as f64).collect(),
            IdxData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

/// Parse an IDX buffer: two zero bytes, a type code, the rank, big-endian u32
/// dimensions, then exactly `Π dims` row-major elements.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload { expected: 4, actual: bytes.len() });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::BadMagic(format!("IDX files start with two zero bytes, found {:02x} {:02x}", bytes[0], bytes[1])));
    }
    let width = match bytes[2] {
        0x08 => 1,
        0x0D => 4,
        other => return Err(Error::TypeUnsupported(other)),
    };
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::TruncatedPayload { expected: header, actual: bytes.len() });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * width;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes { extra: bytes.len() - expected });
    }
    let payload = &bytes[header..];
    let data = match width {
        1 => IdxData::U8(payload.to_vec()),
        _ => IdxData::F32(payload.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(IdxTensor { dims, data })
}

/// Images scaled to `[0, 1]` and flattened per sample, paired with labels.
/// `limit` keeps only the first samples.
pub fn idx_dataset(images: &IdxTensor, labels: &IdxTensor, limit: Option<usize>) -> Result<Dataset> {
    if images.dims.is_empty() || labels.dims.len() != 1 {
        return Err(Error::BadDims(format!("images {:?} / labels {:?}", images.dims, labels.dims)));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::BadDims(format!("{n} images but {} labels", labels.dims[0])));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let per: usize = images.dims[1..].iter().product();
    let scale = match images.data {
        IdxData::U8(_) => 1.0 / 255.0,
        IdxData::F32(_) => 1.0,
    };
    let raw = images.data.to_f64();
    let mut inputs = Array2::<f64>::zeros((per, keep));
    for j in 0..keep {
        inputs.column_mut(j).iter_mut().zip(&raw[j * per..(j + 1) * per]).for_each(|(o, v)| *o = v * scale);
    }
    let lab: Vec<usize> = labels.data.to_f64().iter().take(keep).map(|&v| v as usize).collect();
    let k = lab.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(inputs, lab, k, Provenance::Idx)
}

pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img = parse_idx(&std::fs::read(images)?)?;
    let lab = parse_idx(&std::fs::read(labels)?)?;
    idx_dataset(&img, &lab, limit)
}

// ---------------------------------------------------------------------------
// Synthetic cache

const CACHE_MAGIC: &[u8; 4] = b"MC2D";
const CACHE_VERSION: u8 = 1;

/// `MC2D`, version, then u32 LE features / samples / classes, f64 LE inputs
/// (sample by sample), u32 LE labels.
pub fn to_cache_bytes(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * data.inputs.len() + 4 * data.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    for v in [data.n_features(), data.len(), data.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for col in data.inputs.columns() {
        col.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    data.labels.iter().for_each(|&l| out.extend_from_slice(&(l as u32).to_le_bytes()));
    out
}

pub fn from_cache_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 17 {
        return Err(Error::TruncatedPayload { expected: 17, actual: bytes.len() });
    }
    if &bytes[..4] != CACHE_MAGIC || bytes[4] != CACHE_VERSION {
        return Err(Error::BadMagic("not an MC2D v1 dataset cache".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (f, m, k) = (word(5), word(9), word(13));
    let expected = 17 + 8 * f * m + 4 * m;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes { extra: bytes.len() - expected });
    }
    let values: Vec<f64> = bytes[17..17 + 8 * f * m]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let inputs = Array2::from_shape_vec((m, f), values).expect("sized above").reversed_axes().as_standard_layout().to_owned();
    let labels = bytes[17 + 8 * f * m..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Dataset::new(inputs, labels, k, Provenance::Synthetic)
}

// ---------------------------------------------------------------------------
// Partitioning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "labels")]
pub enum PartitionMode {
    Iid,
    ByLabels(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub n_nodes: usize,
    pub seed: u64,
}

/// A node's local data together with the source-dataset index of every column.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub data: Dataset,
    pub source: Vec<usize>,
}

impl Shard {
    fn from_source(parent: &Dataset, source: Vec<usize>) -> Self {
        Shard { data: parent.subset(&source), source }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.data.class_counts()
    }
}

/// Stratified split: each class's (shuffled) samples are dealt evenly to the
/// nodes that hold the class; remainders go to the lowest-id holders.
pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Shard>> {
    let n = spec.n_nodes;
    if n == 0 {
        return Err(Error::InvalidParameter("partition needs at least one node".into()));
    }
    let holders: Vec<Vec<usize>> = match &spec.mode {
        PartitionMode::Iid => vec![(0..n).collect(); data.num_classes],
        PartitionMode::ByLabels(lists) => {
            if lists.len() != n {
                return Err(Error::InvalidParameter(format!("{} label lists for {n} nodes", lists.len())));
            }
            let mut h = vec![Vec::new(); data.num_classes];
            for (node, list) in lists.iter().enumerate() {
                if list.is_empty() {
                    return Err(Error::EmptyLabelSet(node));
                }
                for &k in list {
                    if k >= data.num_classes {
                        return Err(Error::InvalidParameter(format!("node {node} lists unknown label {k}")));
                    }
                    if !h[k].contains(&node) {
                        h[k].push(node);
                    }
                }
            }
            if let Some(k) = h.iter().position(Vec::is_empty) {
                return Err(Error::UncoverableLabel(k));
            }
            h
        }
    };
    let mut rng = seed::rng(spec.seed, seed::tag::PARTITION, 0);
    let mut sources = vec![Vec::new(); n];
    for (k, nodes) in holders.iter().enumerate() {
        let mut idx = data.class_indices(k);
        if idx.len() < nodes.len() {
            return Err(Error::InsufficientSamples { class: k, available: idx.len(), required: nodes.len() });
        }
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            sources[nodes[j % nodes.len()]].push(i);
        }
    }
    Ok(sources
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            Shard::from_source(data, s)
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub enum EnforceMode<'a> {
    /// `m_{i,k}/m_i` equal across nodes.
    Iid,
    /// `m_k^s/m^s` equal across the clusters of the plan (nodes are agents).
    Clusters(&'a ClusterPlan),
}

/// Samples added per `(node, class)`.
pub type DuplicationLog = BTreeMap<(usize, usize), usize>;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest-duplication proportional target among a few candidate directions:
/// every node's own reduced count vector and the entrywise maximum.
fn iid_targets(counts: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let k = counts[0].len();
    for (node, c) in counts.iter().enumerate() {
        if let Some(class) = (0..k).find(|&j| c[j] == 0 && counts.iter().any(|o| o[j] > 0)) {
            let _ = node;
            return Err(Error::EmptyClass(class));
        }
    }
    let mut candidates: Vec<Vec<usize>> = counts
        .iter()
        .map(|c| {
            let g = c.iter().fold(0, |g, &x| gcd(g, x)).max(1);
            c.iter().map(|x| x / g).collect()
        })
        .collect();
    candidates.push((0..k).map(|j| counts.iter().map(|c| c[j]).max().unwrap()).collect());
    let mut best: Option<(usize, Vec<Vec<usize>>)> = None;
    for r in candidates {
        let targets: Vec<Vec<usize>> = counts
            .iter()
            .map(|c| {
                let a = (0..k).filter(|&j| r[j] > 0).map(|j| c[j].div_ceil(r[j])).max().unwrap_or(0);
                r.iter().map(|x| x * a).collect()
            })
            .collect();
        let extra: usize = targets.iter().flatten().sum::<usize>() - counts.iter().flatten().sum::<usize>();
        if best.as_ref().is_none_or(|(e, _)| extra < *e) {
            best = Some((extra, targets));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

const MAX_FILL_PASSES: usize = 2_000;

/// Balance every cluster's class masses up to its largest class, duplicating
/// in the least-replicated (then lowest-id) holder of each short class. Equal
/// masses within every cluster make `m_k^s/m^s = 1/K` for all clusters.
///
/// A replicated agent adds the same samples to several clusters, so some
/// plans admit no exact solution; the fill then keeps raising levels and
/// gives up after a fixed number of passes.
fn cluster_targets(counts: &[Vec<usize>], plan: &ClusterPlan) -> Result<Vec<Vec<usize>>> {
    let mut counts = counts.to_vec();
    let k = counts[0].len();
    for _ in 0..MAX_FILL_PASSES {
        let masses = plan.cluster_masses(&counts);
        let mut changed = false;
        for (s, mass) in masses.iter().enumerate() {
            let level = *mass.per_class.iter().max().expect("at least one class");
            for j in 0..k {
                let deficit = level - mass.per_class[j];
                if deficit == Ratio::from_integer(0) {
                    continue;
                }
                let holder = plan.clusters[s]
                    .iter()
                    .copied()
                    .filter(|&a| counts[a][j] > 0)
                    .min_by_key(|&a| (plan.replication[a], a))
                    .ok_or(Error::EmptyClass(j))?;
                let add = (deficit * Ratio::from_integer(plan.replication[holder] as u64)).ceil().to_integer();
                counts[holder][j] += add as usize;
                changed = true;
            }
            if changed {
                break;
            }
        }
        if !changed {
            return Ok(counts);
        }
    }
    Err(Error::AssumptionViolated(format!(
        "class masses did not equalize across clusters within {MAX_FILL_PASSES} passes"
    )))
}

/// Duplicate samples within classes until the proportion assumption holds
/// exactly. Duplicates are drawn uniformly (seeded) from the node's own
/// samples of that class and appended.
pub fn enforce_proportions(shards: &[Shard], mode: EnforceMode<'_>, seed_value: u64) -> Result<(Vec<Shard>, DuplicationLog)> {
    if shards.is_empty() {
        return Ok((vec![], DuplicationLog::new()));
    }
    let counts: Vec<Vec<usize>> = shards.iter().map(Shard::class_counts).collect();
    let targets = match mode {
        EnforceMode::Iid => iid_targets(&counts)?,
        EnforceMode::Clusters(plan) => {
            if plan.n_agents() != shards.len() {
                return Err(Error::InvalidParameter(format!(
                    "plan covers {} agents, got {} shards",
                    plan.n_agents(),
                    shards.len()
                )));
            }
            cluster_targets(&counts, plan)?
        }
    };
    let mut log = DuplicationLog::new();
    let mut out = Vec::with_capacity(shards.len());
    for (node, shard) in shards.iter().enumerate() {
        let mut rng = seed::rng(seed_value, seed::tag::ENFORCE, node as u64);
        let mut local: Vec<usize> = (0..shard.data.len()).collect();
        for (class, (&have, &want)) in counts[node].iter().zip(&targets[node]).enumerate() {
            if want > have {
                let pool = shard.data.class_indices(class);
                if pool.is_empty() {
                    return Err(Error::EmptyClass(class));
                }
                local.extend((0..want - have).map(|_| pool[rng.random_range(0..pool.len())]));
                log.insert((node, class), want - have);
            }
        }
        let source = local.iter().map(|&i| shard.source[i]).collect();
        out.push(Shard { data: shard.data.subset(&local), source });
    }
    Ok((out, log))
}

/// Exact check of `m_{i,k}/m_i == m_{j,k}/m_j` for all node pairs.
pub fn check_iid_proportions(counts: &[Vec<usize>]) -> Result<()> {
    let Some(first) = counts.first() else { return Ok(()) };
    let m0: usize = first.iter().sum();
    for (node, c) in counts.iter().enumerate().skip(1) {
        let mi: usize = c.iter().sum();
        for (k, (&a, &b)) in first.iter().zip(c).enumerate() {
            if (a as u128) * (mi as u128) != (b as u128) * (m0 as u128) {
                return Err(Error::AssumptionViolated(format!(
                    "class {k}: node 0 holds {a}/{m0}, node {node} holds {b}/{mi}"
                )));
            }
        }
    }
    Ok(())
}

/// Exact check of `m_k^s/m^s` equality across the plan's clusters.
pub fn check_cluster_proportions(plan: &ClusterPlan, counts: &[Vec<usize>]) -> Result<()> {
    let masses = plan.cluster_masses(counts);
    let Some(first) = masses.first() else { return Ok(()) };
    for (s, mass) in masses.iter().enumerate().skip(1) {
        for (k, (&a, &b)) in first.per_class.iter().zip(&mass.per_class).enumerate() {
            if a * mass.total != b * first.total {
                return Err(Error::AssumptionViolated(format!(
                    "class {k}: cluster 0 proportion {}/{} differs from cluster {s} proportion {}/{}",
                    a, first.total, b, mass.total
                )));
            }
        }
    }
    Ok(())
}
