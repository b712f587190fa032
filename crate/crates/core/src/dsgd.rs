//! Decentralized SGD with a cross-entropy head — the collapse contrast.
//!
//! Each node trains an MLP whose last layer is a linear classifier; the
//! activations feeding that layer are the embedding. After the local steps
//! nodes average parameters with neighbours of identical architecture.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::iid::{NodeInit, NodeState, TrainConfig};
use crate::network::Topology;

#[derive(Clone, Debug, Default)]
pub struct DsgdState {
    pub params: Vec<EncoderParams>,
    /// Full-batch mean cross-entropy at the initial parameters.
    pub initial_losses: Vec<f64>,
    /// `losses[t][i]` after round `t + 1`'s averaging.
    pub losses: Vec<Vec<f64>>,
    /// Largest pairwise parameter distance `‖θ_i − θ_j‖` after each round.
    pub consensus: Vec<f64>,
    /// `(round, node, bytes)`: parameters shipped to averaging partners.
    pub byte_log: Vec<(usize, usize, u64)>,
}

/// Classifier layout: the encoder widths followed by `num_classes` logits.
pub fn classifier_arch(body: &[usize], num_classes: usize) -> Vec<usize> {
    let mut arch = body.to_vec();
    arch.push(num_classes);
    arch
}

fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut col in p.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    p
}

/// Mean cross-entropy and its gradient with respect to the parameters.
pub fn cross_entropy_grad(params: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, EncoderParams)> {
    let (_, cache) = encoder::forward_cached(params, x)?;
    let probs = softmax_columns(&cache.raw);
    if labels.iter().any(|&l| l >= probs.nrows()) {
        return Err(Error::ShapeMismatch(format!("label outside 0..{}", probs.nrows())));
    }
    let b = labels.len() as f64;
    let loss = -labels.iter().enumerate().map(|(j, &l)| probs[[l, j]].max(1e-300).ln()).sum::<f64>() / b;
    let mut upstream = probs;
    for (j, &l) in labels.iter().enumerate() {
        upstream[[l, j]] -= 1.0;
    }
    upstream /= b;
    Ok((loss, encoder::backward_raw(params, &cache, upstream.view())?))
}

pub fn cross_entropy(params: &EncoderParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    cross_entropy_grad(params, x, labels).map(|(l, _)| l)
}

/// Penultimate-layer embedding, one column per sample.
pub fn embed(params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (_, cache) = encoder::forward_cached(params, x)?;
    Ok(cache.penultimate().clone())
}

pub fn predict(params: &EncoderParams, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (_, cache) = encoder::forward_cached(params, x)?;
    Ok(cache
        .raw
        .columns()
        .into_iter()
        .map(|c| c.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b }).0)
        .collect())
}

/// Train with `inner_steps` SGD steps per round and neighbourhood averaging.
/// `rho`, `gamma` and `eps_sq` of the config are unused.
pub fn run_dsgd(nodes: Vec<NodeInit>, topology: &Topology, config: &TrainConfig) -> Result<DsgdState> {
    config.validate()?;
    if topology.n_nodes() != nodes.len() {
        return Err(Error::InvalidParameter(format!(
            "topology has {} nodes, got {} partitions",
            topology.n_nodes(),
            nodes.len()
        )));
    }
    let mut states: Vec<NodeState> = nodes.into_iter().enumerate().map(|(i, init)| NodeState::new(i, init, config)).collect();
    let n = states.len();
    // Averaging partners: self plus same-architecture neighbours.
    let partners: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            std::iter::once(i)
                .chain(topology.neighbors(i).iter().copied().filter(|&j| states[j].params.same_shape(&states[i].params)))
                .collect()
        })
        .collect();
    let full_loss = |s: &NodeState| cross_entropy(&s.params, s.data.inputs.view(), &s.data.labels);

    let mut out = DsgdState { initial_losses: states.par_iter().map(full_loss).collect::<Result<_>>()?, ..Default::default() };
    for t in 1..=config.rounds {
        states.par_iter_mut().try_for_each(|s| -> Result<()> {
            for _ in 0..config.inner_steps {
                let (x, part) = s.sample_batch(config.batch_size);
                let (_, g) = cross_entropy_grad(&s.params, x.view(), part.labels())?;
                encoder::sgd_step(&mut s.params, &g, config.lr_at(t), config.weight_decay)?;
            }
            Ok(())
        })?;
        let averaged: Vec<EncoderParams> = (0..n)
            .map(|i| {
                let group: Vec<&EncoderParams> = partners[i].iter().map(|&j| &states[j].params).collect();
                encoder::mean_params(&group).ok_or(Error::ArchMismatch(i))
            })
            .collect::<Result<_>>()?;
        for (i, (s, p)) in states.iter_mut().zip(averaged).enumerate() {
            s.params = p;
            let bytes = (partners[i].len() as u64 - 1) * s.params.num_params() as u64 * 8;
            out.byte_log.push((t, i, bytes));
        }
        out.losses.push(states.par_iter().map(full_loss).collect::<Result<_>>()?);
        out.consensus.push(max_param_gap(&states));
    }
    out.params = states.into_iter().map(|s| s.params).collect();
    Ok(out)
}

fn max_param_gap(states: &[NodeState]) -> f64 {
    let flat: Vec<Vec<f64>> = states.iter().map(|s| s.params.flatten()).collect();
    let mut worst: f64 = 0.0;
    for a in 0..flat.len() {
        for b in a + 1..flat.len() {
            if flat[a].len() == flat[b].len() {
                worst = worst.max(flat[a].iter().zip(&flat[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
            }
        }
    }
    worst
}

/// Embeddings of a common input under every node's network.
pub fn embed_all(params: &[EncoderParams], x: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
    params.iter().map(|p| embed(p, x)).collect()
}

/// Per-node embeddings averaged into one representation.
pub fn mean_embedding(params: &[EncoderParams], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let all = embed_all(params, x)?;
    let views: Vec<_> = all.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(stacked.mean_axis(Axis(0)).expect("at least one node"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Activation};
    use ndarray::array;

    #[test]
    fn uniform_logits_cost_log_k() {
        let p = init_params(&[2, 3], Activation::Elu, 1).unwrap();
        let mut zero = p.zeros_like();
        zero.layers[0].bias.fill(0.0);
        let x = array![[0.3, -1.0], [2.0, 0.5]];
        assert!((cross_entropy(&zero, x.view(), &[0, 2]).unwrap() - 3f64.ln()).abs() < 1e-14);
        assert_eq!(classifier_arch(&[5, 4], 3), vec![5, 4, 3]);
    }

    #[test]
    fn gradient_matches_differences() {
        let p = init_params(&[3, 4, 3], Activation::Elu, 9).unwrap();
        let x = array![[0.3, -1.0, 0.2], [2.0, 0.5, -0.4], [0.1, 0.1, 0.9]];
        let labels = [0, 2, 1];
        let (_, g) = cross_entropy_grad(&p, x.view(), &labels).unwrap();
        let flat = p.flatten();
        let gf = g.flatten();
        let h = 1e-6;
        for idx in 0..flat.len() {
            let mut q = p.clone();
            let mut f = flat.clone();
            f[idx] += h;
            q.assign_flat(&f).unwrap();
            let up = cross_entropy(&q, x.view(), &labels).unwrap();
            f[idx] -= 2.0 * h;
            q.assign_flat(&f).unwrap();
            let down = cross_entropy(&q, x.view(), &labels).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - gf[idx]).abs() < 1e-7 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", gf[idx]);
        }
    }
}
