mod common;

use common::*;
use dmcr_core::clustering::{cluster_with_replication, LabelSets};
use dmcr_core::data::{partition, PartitionMode, PartitionSpec};
use dmcr_core::iid::{run_iid, NodeInit};
use dmcr_core::network::build_topology;
use dmcr_core::noniid::{run_noniid, AssumptionPolicy, NoniidConfig};

const ROUNDS: usize = 3;

#[test]
fn iid_traffic_matches_closed_form() {
    let (k, d) = (3usize, 6usize);
    for seed in 0..4 {
        let topo = build_topology(5, 0.5, seed).unwrap();
        let run = run_iid(iid_nodes(5, k, 8, &[12, 16, d], seed), &topo, &short_config(ROUNDS, seed)).unwrap();
        let per_node = |i: usize| (topo.neighbors(i).len() * k * d * d * 8) as u64;
        let closed = iid_closed_form(&topo, k, d, ROUNDS);
        assert_eq!(run.byte_log.iter().map(|r| r.2).sum::<u64>(), closed);
        for &(round, node, bytes) in &run.byte_log {
            assert!(round <= ROUNDS);
            assert_eq!(bytes, per_node(node));
        }
    }
}

fn noniid_bytes(lists: &[Vec<usize>], k: usize, ambient: usize, d: usize) -> (u64, u64) {
    let plan = cluster_with_replication(&LabelSets::from_lists(lists, k).unwrap()).unwrap();
    let data = synthetic(k, 2, 16, ambient, 3);
    let spec = PartitionSpec { mode: PartitionMode::ByLabels(lists.to_vec()), n_nodes: lists.len(), seed: 3 };
    let nodes: Vec<NodeInit> = partition(&data, &spec)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| NodeInit { data: s.data, params: init_encoder(&[ambient, 16, d], i as u64) })
        .collect();
    let config = NoniidConfig { train: short_config(ROUNDS, 3), assumption: AssumptionPolicy::Report, ..NoniidConfig::default() };
    let st = run_noniid(nodes, &plan, &config).unwrap();
    (st.run.byte_log.iter().map(|r| r.2).sum(), noniid_closed_form(lists, &plan.clusters, d, ROUNDS))
}

#[test]
fn noniid_traffic_matches_closed_form() {
    let four = vec![vec![0, 1, 2], vec![2, 3], vec![0, 1], vec![1, 2, 3]];
    let (got, want) = noniid_bytes(&four, 4, 12, 5);
    assert_eq!(got, want);

    let five = vec![vec![1, 3, 5, 6], vec![0, 5, 7, 8], vec![1, 3, 8, 9], vec![2, 4, 6, 7], vec![0, 2, 4, 9]];
    let (got, want) = noniid_bytes(&five, 10, 24, 4);
    assert_eq!(got, want);
}
