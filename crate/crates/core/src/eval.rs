//! Geometry diagnostics of learned features and the nearest-subspace classifier.
//!
//! All functions take column-per-sample `d × m` features.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix};

const ZERO_FLOOR: f64 = 1e-12;

fn unit_columns(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let norms = z.map_axis(Axis(0), |c| c.dot(&c).sqrt().max(ZERO_FLOOR));
    &z / &norms.insert_axis(Axis(0))
}

/// Stable permutation grouping samples by label.
pub fn label_sorted_order(labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    order
}

/// `C[a][b] = ẑ_aᵀ ẑ_b` over the columns taken in `order`, with columns
/// normalized first.
pub fn cosine_similarity_matrix(z: ArrayView2<'_, f64>, order: &[usize]) -> Array2<f64> {
    let u = unit_columns(z.select(Axis(1), order).view());
    let mut c = u.t().dot(&u);
    c.diag_mut().fill(1.0);
    c
}

fn class_columns(labels: &[usize], class: usize) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect()
}

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

fn class_means(z: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Vec<Option<Array1<f64>>> {
    (0..k)
        .map(|c| {
            let cols = class_columns(labels, c);
            (!cols.is_empty()).then(|| z.select(Axis(1), &cols).mean_axis(Axis(1)).expect("nonempty"))
        })
        .collect()
}

/// Per-class singular-value diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpectrum {
    pub class: usize,
    pub singular_values: Vec<f64>,
    /// Number of singular values above `tol·σ₁`.
    pub effective_rank: usize,
    /// Intrinsic dimension `d_k` the spread is measured against.
    pub target_dim: usize,
    /// `σ₁ / σ_{d_k−1}` (1 when `d_k ≤ 2`).
    pub top_spread: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureTolerances {
    /// Pass bound on between-class `|cos|`.
    pub orthogonality: f64,
    /// Relative cut-off for counting a singular value.
    pub rank_tol: f64,
    /// Pass bound on `σ₁ / σ_{d_k−1}`.
    pub spread: f64,
}

impl Default for StructureTolerances {
    fn default() -> Self {
        StructureTolerances { orthogonality: 0.2, rank_tol: 0.1, spread: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    /// Max between-class `|cos|` among samples of the same node.
    pub within_node_max_cos: f64,
    /// Max between-class `|cos|` between samples of different nodes.
    pub cross_node_max_cos: f64,
    pub classes: Vec<ClassSpectrum>,
    pub orthogonal_within: bool,
    pub orthogonal_across: bool,
    pub spectra_ok: bool,
    pub pass: bool,
}

fn max_between_class_cos(a: &Array2<f64>, la: &[usize], b: &Array2<f64>, lb: &[usize]) -> f64 {
    let c = a.t().dot(b);
    let mut worst: f64 = 0.0;
    for (i, row) in c.outer_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if la[i] != lb[j] {
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

/// Orthogonality between classes (within and across nodes) and per-class
/// spectrum shape. `class_dims[k]` is the intrinsic dimension of class `k`;
/// when absent the class's effective rank is used.
pub fn check_structure(
    z_per_node: &[Array2<f64>],
    labels_per_node: &[Vec<usize>],
    class_dims: Option<&[usize]>,
    tol: &StructureTolerances,
) -> Result<StructureReport> {
    if z_per_node.len() != labels_per_node.len() {
        return Err(Error::ShapeMismatch("features and labels differ in node count".into()));
    }
    let units: Vec<Array2<f64>> = z_per_node.iter().map(|z| unit_columns(z.view())).collect();
    let mut within: f64 = 0.0;
    let mut across: f64 = 0.0;
    for i in 0..units.len() {
        within = within.max(max_between_class_cos(&units[i], &labels_per_node[i], &units[i], &labels_per_node[i]));
        for j in i + 1..units.len() {
            across = across.max(max_between_class_cos(&units[i], &labels_per_node[i], &units[j], &labels_per_node[j]));
        }
    }
    let all = ndarray::concatenate(Axis(1), &units.iter().map(|u| u.view()).collect::<Vec<_>>())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let labels: Vec<usize> = labels_per_node.iter().flatten().copied().collect();
    let k = num_classes(&labels);
    let mut classes = Vec::new();
    for c in 0..k {
        let cols = class_columns(&labels, c);
        if cols.is_empty() {
            continue;
        }
        let zk = all.select(Axis(1), &cols);
        let sv = singular_values(zk.view())?;
        let top = sv.first().copied().unwrap_or(0.0);
        let effective_rank = sv.iter().filter(|&&s| s > tol.rank_tol * top).count();
        let target_dim = class_dims.and_then(|d| d.get(c).copied()).unwrap_or(effective_rank);
        let lead = target_dim.saturating_sub(1).max(1).min(sv.len());
        let top_spread = if sv[lead - 1] > 0.0 { top / sv[lead - 1] } else { f64::INFINITY };
        classes.push(ClassSpectrum { class: c, singular_values: sv, effective_rank, target_dim, top_spread });
    }
    let orthogonal_within = within < tol.orthogonality;
    let orthogonal_across = across < tol.orthogonality;
    let spectra_ok = classes
        .iter()
        .all(|c| c.effective_rank + 1 >= c.target_dim && c.top_spread < tol.spread);
    Ok(StructureReport {
        within_node_max_cos: within,
        cross_node_max_cos: across,
        classes,
        orthogonal_within,
        orthogonal_across,
        spectra_ok,
        pass: orthogonal_within && orthogonal_across && spectra_ok,
    })
}

/// Singular values of `z`, descending, via the eigenvalues of `zzᵀ`.
pub fn singular_values(z: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let spec = linalg::sym_eig_default(&linalg::gram(z, 1.0))?;
    Ok(spec.sqrt_values())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSubspace {
    pub mean: Array1<f64>,
    /// `d × r` orthonormal principal directions.
    pub basis: Array2<f64>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceModel {
    pub classes: Vec<ClassSubspace>,
}

/// Per-class mean and the leading principal directions of the centred class
/// scatter capturing at least `tau` of its energy.
pub fn fit_subspace_model(z: ArrayView2<'_, f64>, labels: &[usize], num_classes: usize, tau: f64) -> Result<SubspaceModel> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidParameter(format!("energy threshold must be in (0, 1], got {tau}")));
    }
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let cols = class_columns(labels, c);
        if cols.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let zk = z.select(Axis(1), &cols);
        let mean = zk.mean_axis(Axis(1)).expect("nonempty");
        let centred = &zk - &mean.view().insert_axis(Axis(1));
        let spec = linalg::sym_eig_default(&linalg::gram(centred.view(), 1.0))?;
        let energy: f64 = spec.values.iter().map(|v| v.max(0.0)).sum();
        let mut rank = 0;
        if energy > ZERO_FLOOR {
            let mut acc = 0.0;
            for v in &spec.values {
                rank += 1;
                acc += v.max(0.0);
                if acc >= tau * energy * (1.0 - 1e-12) {
                    break;
                }
            }
        }
        let vectors = spec.vectors.expect("eigenvectors requested");
        let basis = vectors.slice(ndarray::s![.., ..rank]).to_owned();
        classes.push(ClassSubspace { mean, basis, rank });
    }
    Ok(SubspaceModel { classes })
}

/// `‖(I − Φ_kΦ_kᵀ)(z − μ_k)‖²`.
pub fn subspace_residual(class: &ClassSubspace, z: ArrayView1<'_, f64>) -> f64 {
    let offset = &z - &class.mean;
    let coef = class.basis.t().dot(&offset);
    let resid = &offset - &class.basis.dot(&coef);
    resid.dot(&resid)
}

/// Class with the smallest residual; lowest id on ties.
pub fn nearest_subspace_classify(model: &SubspaceModel, z: ArrayView1<'_, f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in model.classes.iter().enumerate() {
        let r = subspace_residual(c, z);
        if r < best.1 {
            best = (k, r);
        }
    }
    best.0
}

pub fn classify_all(model: &SubspaceModel, z: ArrayView2<'_, f64>) -> Vec<usize> {
    z.columns().into_iter().map(|c| nearest_subspace_classify(model, c)).collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// `(tr S_W, tr S_B, tr S_T)` with scatters summed (not averaged) over samples.
pub fn scatter_traces(z: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, f64, f64) {
    let global = z.mean_axis(Axis(1)).unwrap_or_else(|| Array1::zeros(z.nrows()));
    let means = class_means(z, labels, num_classes(labels));
    let mut sw = 0.0;
    let mut st = 0.0;
    for (col, &l) in z.columns().into_iter().zip(labels) {
        let mu = means[l].as_ref().expect("class present");
        sw += (&col - mu).mapv(|v| v * v).sum();
        st += (&col - &global).mapv(|v| v * v).sum();
    }
    let mut sb = 0.0;
    for (c, mu) in means.iter().enumerate() {
        if let Some(mu) = mu {
            let n = labels.iter().filter(|&&l| l == c).count() as f64;
            sb += n * (mu - &global).mapv(|v| v * v).sum();
        }
    }
    (sw, sb, st)
}

/// Within-class share of total variance: `tr S_W / tr S_T`.
pub fn wccr(z: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (sw, _, st) = scatter_traces(z, labels);
    if st < ZERO_FLOOR {
        return Err(Error::ZeroVariance("total scatter is zero".into()));
    }
    Ok((sw / st).clamp(0.0, 1.0))
}

/// Mean distance between class means over mean distance of samples to their
/// class mean. `+∞` when every sample sits on its class mean.
pub fn iidr(z: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let means: Vec<Array1<f64>> = class_means(z, labels, num_classes(labels)).into_iter().flatten().collect();
    let full = class_means(z, labels, num_classes(labels));
    let mut between = 0.0;
    let mut pairs = 0usize;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            between += (&means[a] - &means[b]).mapv(|v| v * v).sum().sqrt();
            pairs += 1;
        }
    }
    let between = if pairs > 0 { between / pairs as f64 } else { 0.0 };
    let intra = z
        .columns()
        .into_iter()
        .zip(labels)
        .map(|(c, &l)| (&c - full[l].as_ref().expect("present")).mapv(|v| v * v).sum().sqrt())
        .sum::<f64>()
        / labels.len().max(1) as f64;
    if intra < ZERO_FLOOR {
        if between == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        between / intra
    }
}

/// Linear CKA between two encodings of the same samples (columns aligned).
pub fn linear_cka(za: ArrayView2<'_, f64>, zb: ArrayView2<'_, f64>) -> Result<f64> {
    if za.ncols() != zb.ncols() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", za.ncols(), zb.ncols())));
    }
    let centre = |z: ArrayView2<'_, f64>| {
        let mu = z.mean_axis(Axis(1)).expect("nonempty");
        &z - &mu.insert_axis(Axis(1))
    };
    let (a, b) = (centre(za), centre(zb));
    let fro2 = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let cross = fro2(&a.dot(&b.t()));
    let norm_a = fro2(&a.dot(&a.t())).sqrt();
    let norm_b = fro2(&b.dot(&b.t())).sqrt();
    if norm_a < ZERO_FLOOR || norm_b < ZERO_FLOOR {
        return Err(Error::ZeroVariance("constant encoding".into()));
    }
    Ok((cross / (norm_a * norm_b)).clamp(0.0, 1.0))
}

/// Cosines between normalized class means with off-diagonal mean and
/// (population) standard deviation over unordered pairs.
pub fn class_mean_cosine_stats(z: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(Array2<f64>, f64, f64)> {
    let k = num_classes(labels);
    let means = class_means(z, labels, k);
    let mut unit = Vec::with_capacity(k);
    for (c, mu) in means.into_iter().enumerate() {
        let mu = mu.ok_or(Error::EmptyClass(c))?;
        let n = mu.dot(&mu).sqrt();
        if n < ZERO_FLOOR {
            return Err(Error::ZeroVariance(format!("class {c} has a zero mean vector")));
        }
        unit.push(mu / n);
    }
    let mut c = Array2::<f64>::eye(k);
    let mut off = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let v = unit[a].dot(&unit[b]);
            c[[a, b]] = v;
            c[[b, a]] = v;
            off.push(v);
        }
    }
    let mean = off.iter().sum::<f64>() / off.len().max(1) as f64;
    let var = off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / off.len().max(1) as f64;
    Ok((c, mean, var.sqrt()))
}

fn serialize_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaEntry {
    pub a: usize,
    pub b: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryReport {
    pub class_mean_cosine: Vec<Vec<f64>>,
    pub offdiag_mean: f64,
    pub offdiag_std: f64,
    pub wccr: f64,
    #[serde(serialize_with = "serialize_ratio")]
    pub iidr: f64,
    pub cka: Vec<CkaEntry>,
    pub overall_spectrum: Vec<f64>,
    pub structure: StructureReport,
}

/// Every metric at once. `z_per_node` / `labels_per_node` are each node's
/// training features; `shared` holds each node's encoding of one common
/// evaluation set (for CKA).
pub fn geometry_report(
    z_per_node: &[Array2<f64>],
    labels_per_node: &[Vec<usize>],
    shared: &[Array2<f64>],
    class_dims: Option<&[usize]>,
    tol: &StructureTolerances,
) -> Result<GeometryReport> {
    let all = ndarray::concatenate(Axis(1), &z_per_node.iter().map(|z| z.view()).collect::<Vec<_>>())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let labels: Vec<usize> = labels_per_node.iter().flatten().copied().collect();
    let (cos, offdiag_mean, offdiag_std) = class_mean_cosine_stats(all.view(), &labels)?;
    let mut cka = Vec::new();
    for a in 0..shared.len() {
        for b in a + 1..shared.len() {
            cka.push(CkaEntry { a, b, value: linear_cka(shared[a].view(), shared[b].view())? });
        }
    }
    Ok(GeometryReport {
        class_mean_cosine: cos.outer_iter().map(|r| r.to_vec()).collect(),
        offdiag_mean,
        offdiag_std,
        wccr: wccr(all.view(), &labels)?,
        iidr: iidr(all.view(), &labels),
        cka,
        overall_spectrum: singular_values(all.view())?,
        structure: check_structure(z_per_node, labels_per_node, class_dims, tol)?,
    })
}

/// Symmetric matrix wrapper used by callers that want `SymMatrix` scatters.
pub fn class_scatter(z: ArrayView2<'_, f64>) -> SymMatrix {
    linalg::gram(z, 1.0)
}
