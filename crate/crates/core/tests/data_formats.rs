mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use common::synthetic;
use dmcr_core::clustering::{cluster_with_replication, LabelSets};
use dmcr_core::data::*;
use dmcr_core::Error;
use proptest::prelude::*;

fn desk_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk")
}

fn image_file(count: u32, pixels: &[u8]) -> Vec<u8> {
    let mut bytes = vec![0, 0, 0x08, 3];
    for d in [count, 28, 28] {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    bytes
}

#[test]
fn mnist_image_header_round_trips() {
    let pixels: Vec<u8> = (0..2 * 784).map(|i| (i * 7 % 256) as u8).collect();
    let t = parse_idx(&image_file(2, &pixels)).unwrap();
    assert_eq!(t.dims, vec![2, 28, 28]);
    assert_eq!(t.data, IdxData::U8(pixels));
}

#[test]
fn three_byte_vector() {
    let t = parse_idx(&[0, 0, 0x08, 1, 0, 0, 0, 3, 1, 2, 3]).unwrap();
    assert_eq!(t.dims, vec![3]);
    assert_eq!(t.data, IdxData::U8(vec![1, 2, 3]));
}

#[test]
fn malformed_files_raise_documented_errors() {
    assert!(matches!(parse_idx(&[0, 1, 0x08, 1, 0, 0, 0, 1, 5]), Err(Error::BadMagic(_))));
    assert_eq!(parse_idx(&[0, 0, 0x0B, 1, 0, 0, 0, 1, 0, 0]), Err(Error::TypeUnsupported(0x0B)));
    assert_eq!(
        parse_idx(&image_file(1, &[0; 783])),
        Err(Error::TruncatedPayload { expected: 16 + 784, actual: 16 + 783 })
    );
    assert!(matches!(parse_idx(&[0, 0, 0x08, 2, 0, 0]), Err(Error::TruncatedPayload { .. })));
}

#[test]
fn shipped_desk_subset_parses_exactly() {
    let raw = std::fs::read(desk_dir().join("train-images-idx3-ubyte")).unwrap();
    assert_eq!(&raw[..16], &[0, 0, 8, 3, 0, 0, 0x07, 0xd0, 0, 0, 0, 28, 0, 0, 0, 28]);
    let images = parse_idx(&raw).unwrap();
    assert_eq!(images.dims, vec![2000, 28, 28]);
    assert_eq!(images.data, IdxData::U8(raw[16..].to_vec()));
    let data = load_idx(&desk_dir().join("train-images-idx3-ubyte"), &desk_dir().join("train-labels-idx1-ubyte"), None).unwrap();
    assert_eq!(data.class_counts(), vec![200; 10]);
    assert_eq!(data.inputs[[0, 0]], raw[16] as f64 / 255.0);
    assert!(data.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn cache_round_trip() {
    let data = synthetic(3, 2, 5, 8, 4);
    let bytes = to_cache_bytes(&data);
    assert_eq!(&bytes[..4], b"MC2D");
    let back = from_cache_bytes(&bytes).unwrap();
    assert_eq!(back.inputs, data.inputs);
    assert_eq!(back.labels, data.labels);
    assert!(matches!(from_cache_bytes(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
}

#[test]
fn fixed_label_lists_restrict_nodes() {
    let data = synthetic(10, 1, 12, 16, 2);
    let lists = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9, 0], vec![0, 3, 5, 7, 9], vec![1, 2, 4, 6, 8]];
    let shards = partition(&data, &PartitionSpec { mode: PartitionMode::ByLabels(lists), n_nodes: 4, seed: 0 }).unwrap();
    let held: Vec<usize> = (0..10).filter(|&k| shards[0].class_counts()[k] > 0).collect();
    assert_eq!(held, vec![1, 2, 3, 4, 5]);
}

fn multiset(v: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for x in v {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn iid_split_is_stratified_and_lossless(seed in 0u64..1000, n in 1usize..5, per in 1usize..4) {
        let data = synthetic(3, 1, n * per, 6, seed);
        let shards = partition(&data, &PartitionSpec { mode: PartitionMode::Iid, n_nodes: n, seed }).unwrap();
        for s in &shards {
            prop_assert_eq!(s.class_counts(), vec![per; 3]);
        }
        let all = multiset(shards.iter().flat_map(|s| s.source.clone()));
        prop_assert_eq!(all, multiset(0..data.len()));
    }

    #[test]
    fn enforcement_only_duplicates_and_equalizes(seed in 0u64..1000, drops in proptest::collection::vec(0usize..4, 9)) {
        let data = synthetic(3, 1, 15, 6, seed);
        let shards = partition(&data, &PartitionSpec { mode: PartitionMode::Iid, n_nodes: 3, seed }).unwrap();
        // Thin each (node, class) by a few samples, keeping at least one.
        let thinned: Vec<Shard> = shards
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut keep = Vec::new();
                for k in 0..3 {
                    let idx = s.data.class_indices(k);
                    keep.extend(&idx[..idx.len() - drops[i * 3 + k]]);
                }
                Shard { data: s.data.subset(&keep), source: keep.iter().map(|&j| s.source[j]).collect() }
            })
            .collect();
        let (out, log) = enforce_proportions(&thinned, EnforceMode::Iid, seed).unwrap();
        let counts: Vec<Vec<usize>> = out.iter().map(Shard::class_counts).collect();
        prop_assert!(check_iid_proportions(&counts).is_ok());
        for (i, (before, after)) in thinned.iter().zip(&out).enumerate() {
            let own = multiset(before.source.clone());
            let grown = multiset(after.source.clone());
            for (src, c) in &own {
                prop_assert!(grown[src] >= *c);
            }
            prop_assert!(grown.keys().all(|s| own.contains_key(s)));
            let added: usize = (0..3).map(|k| log.get(&(i, k)).copied().unwrap_or(0)).sum();
            prop_assert_eq!(after.data.len(), before.data.len() + added);
        }
    }

    #[test]
    fn cluster_enforcement_equalizes_masses(seed in 0u64..1000, extra in 0usize..6) {
        let lists = vec![vec![0, 1, 2], vec![2, 3], vec![0, 1], vec![1, 2, 3]];
        let plan = cluster_with_replication(&LabelSets::from_lists(&lists, 4).unwrap()).unwrap();
        let data = synthetic(4, 1, 20 + extra, 8, seed);
        let shards = partition(&data, &PartitionSpec { mode: PartitionMode::ByLabels(lists), n_nodes: 4, seed }).unwrap();
        let (out, _) = enforce_proportions(&shards, EnforceMode::Clusters(&plan), seed).unwrap();
        let counts: Vec<Vec<usize>> = out.iter().map(Shard::class_counts).collect();
        prop_assert!(check_cluster_proportions(&plan, &counts).is_ok());
    }
}

#[test]
fn already_proportional_is_unchanged() {
    let data = synthetic(3, 1, 8, 6, 1);
    let shards = partition(&data, &PartitionSpec { mode: PartitionMode::Iid, n_nodes: 2, seed: 1 }).unwrap();
    let (out, log) = enforce_proportions(&shards, EnforceMode::Iid, 1).unwrap();
    assert!(log.is_empty());
    assert_eq!(out, shards);
}
