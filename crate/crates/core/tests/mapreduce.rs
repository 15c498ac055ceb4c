use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use mrbsp_core::jobs::{stable_hash, WordCount};
use mrbsp_core::mapreduce::{run_mapreduce, MapReduceJob, MrError, MrOptions, PeerDelta, ShuffleFault};
use mrbsp_core::transport::TransportConfig;
use mrbsp_core::{block_owner, block_range, Backend, Cluster, ClusterSpec, KvPair, NodeId, TransportKind};
use proptest::prelude::*;

fn cluster(nodes: usize, backend: Backend, kind: TransportKind) -> Cluster {
    let spec = ClusterSpec::new(1, nodes, backend).with_transport(kind).with_workers(2);
    Cluster::start(spec, TransportConfig::default()).unwrap()
}

type Router = Arc<dyn Fn(&String, usize) -> NodeId + Send + Sync>;

/// Emits fixed (key, value) pairs per node and routes them with `route`.
#[derive(Clone)]
struct Pairs {
    input: Arc<Vec<Vec<(String, u64)>>>,
    route: Router,
}

impl MapReduceJob for Pairs {
    type K1 = String;
    type V1 = u64;
    type K2 = String;
    type V2 = u64;
    type K3 = String;
    type V3 = Vec<u64>;
    type Out = Vec<(String, Vec<u64>)>;

    fn source(&self, node: NodeId, _n: usize) -> Vec<KvPair<String, u64>> {
        self.input
            .get(node.index())
            .map(|v| v.iter().map(|(k, x)| KvPair::stage1(k.clone(), *x)).collect())
            .unwrap_or_default()
    }

    fn map(&self, pair: KvPair<String, u64>) -> Vec<KvPair<String, u64>> {
        vec![KvPair::stage2(pair.key, pair.value)]
    }

    fn partition(&self, key: &String, n: usize) -> NodeId {
        (self.route)(key, n)
    }

    fn reduce(&self, key: String, values: Vec<u64>) -> KvPair<String, Vec<u64>> {
        KvPair::stage3(key, values)
    }

    fn sink(&self, _node: NodeId, pairs: Vec<KvPair<String, Vec<u64>>>) -> Self::Out {
        pairs.into_iter().map(|p| (p.key, p.value)).collect()
    }
}

fn pairs(input: Vec<Vec<(&str, u64)>>, route: Router) -> Pairs {
    Pairs {
        input: Arc::new(
            input
                .into_iter()
                .map(|v| v.into_iter().map(|(k, x)| (k.to_string(), x)).collect())
                .collect(),
        ),
        route,
    }
}

/// Each node's block of `0..len` travels to itself and comes back out.
struct Identity {
    len: usize,
}

impl MapReduceJob for Identity {
    type K1 = u64;
    type V1 = u64;
    type K2 = u64;
    type V2 = u64;
    type K3 = u64;
    type V3 = u64;
    type Out = Vec<(u64, u64)>;

    fn source(&self, node: NodeId, n: usize) -> Vec<KvPair<u64, u64>> {
        block_range(self.len, n, node.index())
            .map(|i| KvPair::stage1(i as u64, (i * i) as u64))
            .collect()
    }

    fn map(&self, pair: KvPair<u64, u64>) -> Vec<KvPair<u64, u64>> {
        vec![KvPair::stage2(pair.key, pair.value)]
    }

    /// The node the key was read on.
    fn partition(&self, key: &u64, n: usize) -> NodeId {
        block_owner(self.len, n, *key as usize)
    }

    fn reduce(&self, key: u64, values: Vec<u64>) -> KvPair<u64, u64> {
        KvPair::stage3(key, values.into_iter().sum())
    }

    fn sink(&self, _node: NodeId, pairs: Vec<KvPair<u64, u64>>) -> Vec<(u64, u64)> {
        pairs.into_iter().map(|p| (p.key, p.value)).collect()
    }
}

const CONFIGS: [(Backend, TransportKind); 4] = [
    (Backend::Actor, TransportKind::InProcess),
    (Backend::SharedMemoryParallel, TransportKind::InProcess),
    (Backend::SharedMemorySequential, TransportKind::InProcess),
    (Backend::Actor, TransportKind::Tcp),
];

fn word_oracle(lines: &[String]) -> BTreeMap<String, u64> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for w in lines.iter().flat_map(|l| l.split_whitespace()) {
        *counts.entry(w.to_string()).or_default() += 1;
    }
    counts.into_iter().collect()
}

#[test]
fn identity_job_returns_the_source_per_node() {
    for (backend, kind) in CONFIGS {
        let c = cluster(3, backend, kind);
        let out = run_mapreduce(Identity { len: 10 }, &c, backend, &MrOptions::default()).unwrap();
        for p in 0..3 {
            let expected: Vec<(u64, u64)> = block_range(10, 3, p).map(|i| (i as u64, (i * i) as u64)).collect();
            assert_eq!(out.per_node[p], expected, "{backend} {kind} node {p}");
        }
        assert_eq!(out.emitted, 10);
        assert_eq!(out.received, 10);
    }
}

#[test]
fn word_count_matches_a_sequential_count() {
    let corpus = vec![
        "the quick brown fox".to_string(),
        "jumps over the lazy dog".to_string(),
        "the dog sleeps".to_string(),
    ];
    let oracle = word_oracle(&corpus);
    assert_eq!(oracle["the"], 3);
    for (backend, kind) in CONFIGS.into_iter().chain([(Backend::SharedMemoryParallel, TransportKind::Tcp)]) {
        let c = cluster(2, backend, kind);
        let out = run_mapreduce(WordCount::new(corpus.clone()), &c, backend, &MrOptions::default()).unwrap();
        let got: BTreeMap<String, u64> = out.per_node.iter().flatten().cloned().collect();
        assert_eq!(got, oracle, "{backend} {kind}");
        assert_eq!(out.emitted, 12);
        assert_eq!(out.received, 12);
        assert_eq!(out.timings.len(), 2);
        assert_eq!(out.timing_lines().lines().count(), 2);
    }
}

#[test]
fn constant_partition_sends_everything_to_node_zero() {
    for (backend, kind) in CONFIGS {
        let c = cluster(3, backend, kind);
        let job = pairs(
            vec![vec![("a", 1), ("b", 2)], vec![("c", 3)], vec![("a", 4)]],
            Arc::new(|_, _| NodeId(0)),
        );
        let out = run_mapreduce(job, &c, backend, &MrOptions::default()).unwrap();
        assert_eq!(out.per_node[0].len(), 3, "{backend}");
        assert!(out.per_node[1].is_empty() && out.per_node[2].is_empty());
    }
}

#[test]
fn one_key_from_two_senders_is_grouped_at_its_node() {
    for (backend, kind) in CONFIGS {
        let c = cluster(3, backend, kind);
        let job = pairs(vec![vec![("a", 1)], vec![("a", 2)], vec![]], Arc::new(|_, _| NodeId(2)));
        let out = run_mapreduce(job, &c, backend, &MrOptions::default()).unwrap();
        assert_eq!(out.per_node[2].len(), 1);
        let (key, mut values) = out.per_node[2][0].clone();
        values.sort();
        assert_eq!((key.as_str(), values), ("a", vec![1, 2]), "{backend}");
    }
}

#[test]
fn values_keep_sender_order_within_a_group() {
    let c = cluster(2, Backend::Actor, TransportKind::InProcess);
    let job = pairs(vec![vec![("k", 1), ("k", 2), ("k", 3)], vec![]], Arc::new(|_, _| NodeId(1)));
    let out = run_mapreduce(job, &c, Backend::Actor, &MrOptions::default()).unwrap();
    assert_eq!(out.per_node[1], vec![("k".to_string(), vec![1, 2, 3])]);
}

#[test]
fn large_shuffle_conserves_pairs_and_respects_partition() {
    let n = 4;
    let total = 100_000;
    let input: Vec<Vec<(String, u64)>> = (0..n)
        .map(|p| {
            block_range(total, n, p)
                .map(|i| (format!("k{}", stable_hash(&i.to_string()) % 5000), i as u64))
                .collect()
        })
        .collect();
    let route: Router = Arc::new(|k, n| NodeId::from((stable_hash(k) % n as u64) as usize));
    for backend in Backend::ALL {
        let c = cluster(n, backend, TransportKind::InProcess);
        let job = Pairs {
            input: Arc::new(input.clone()),
            route: Arc::clone(&route),
        };
        let out = run_mapreduce(job, &c, backend, &MrOptions::default()).unwrap();
        assert_eq!(out.emitted, total as u64);
        assert_eq!(out.received, total as u64);
        let mut seen = 0;
        let mut owner: HashMap<&String, usize> = HashMap::new();
        for (p, part) in out.per_node.iter().enumerate() {
            for (k, vs) in part {
                assert_eq!(route(k, n), NodeId::from(p), "{backend}: {k} on wrong node");
                assert!(owner.insert(k, p).is_none(), "{k} on two nodes");
                seen += vs.len();
            }
        }
        assert_eq!(seen, total);
    }
}

#[test]
fn single_node_barrier_passes_at_once() {
    for backend in Backend::ALL {
        let c = cluster(1, backend, TransportKind::InProcess);
        let out = run_mapreduce(WordCount::new(vec!["x y x".into()]), &c, backend, &MrOptions::default()).unwrap();
        assert_eq!(out.per_node[0], vec![("x".to_string(), 2), ("y".to_string(), 1)]);
    }
}

#[test]
fn dropped_shuffle_pair_fails_the_barrier() {
    for backend in Backend::ALL {
        let c = cluster(2, backend, TransportKind::InProcess);
        let job = pairs(vec![vec![("a", 1), ("b", 2), ("c", 3)], vec![]], Arc::new(|_, _| NodeId(1)));
        let opts = MrOptions {
            step_timeout: Duration::from_millis(500),
            fault: Some(ShuffleFault {
                from: NodeId(0),
                to: NodeId(1),
                drop: 1,
            }),
            ..MrOptions::default()
        };
        let err = run_mapreduce(job, &c, backend, &opts).unwrap_err();
        assert_eq!(
            err,
            MrError::ShuffleBarrier {
                node: NodeId(1),
                deltas: vec![PeerDelta {
                    from: NodeId(0),
                    announced: 3,
                    received: 2
                }]
            },
            "{backend}"
        );
        assert_eq!(
            match err {
                MrError::ShuffleBarrier { deltas, .. } => deltas[0].missing(),
                _ => 0,
            },
            1
        );
    }
}

#[test]
fn announced_pairs_that_all_arrive_pass_the_barrier() {
    for backend in Backend::ALL {
        let c = cluster(2, backend, TransportKind::InProcess);
        let job = pairs(vec![vec![("a", 1), ("b", 2), ("c", 3)], vec![]], Arc::new(|_, _| NodeId(1)));
        let out = run_mapreduce(job, &c, backend, &MrOptions::default()).unwrap();
        assert_eq!(out.received, 3);
        assert_eq!(out.per_node[1].len(), 3);
    }
}

#[test]
fn out_of_range_partition_names_the_key() {
    for backend in Backend::ALL {
        let c = cluster(2, backend, TransportKind::InProcess);
        let job = pairs(vec![vec![("ok", 1), ("bad", 2)], vec![]], Arc::new(|k, n| {
            if k == "bad" {
                NodeId::from(n)
            } else {
                NodeId(0)
            }
        }));
        let err = run_mapreduce(job, &c, backend, &MrOptions::default()).unwrap_err();
        assert_eq!(
            err,
            MrError::Partition {
                key: "\"bad\"".into(),
                node: NodeId(2),
                n_nodes: 2
            },
            "{backend}"
        );
    }
}

#[test]
fn local_parallelism_does_not_change_the_result() {
    let job = WordCount::random(7, 2000, 12, 300);
    let oracle = word_oracle(job.lines());
    for backend in Backend::ALL {
        let c = cluster(2, backend, TransportKind::InProcess);
        for local_parallel in [false, true] {
            let opts = MrOptions {
                local_parallel,
                ..MrOptions::default()
            };
            let out = run_mapreduce(job.clone(), &c, backend, &opts).unwrap();
            let got: BTreeMap<String, u64> = out.per_node.into_iter().flatten().collect();
            assert_eq!(got, oracle, "{backend} parallel={local_parallel}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn backends_agree_and_conserve_pairs(seed in any::<u64>(), nodes in 1usize..4) {
        let job = WordCount::random(seed, 60, 8, 40);
        let oracle = word_oracle(job.lines());
        let words: u64 = oracle.values().sum();
        for backend in Backend::ALL {
            let c = cluster(nodes, backend, TransportKind::InProcess);
            let out = run_mapreduce(job.clone(), &c, backend, &MrOptions::default()).unwrap();
            prop_assert_eq!(out.emitted, words);
            prop_assert_eq!(out.received, words);
            let got: BTreeMap<String, u64> = out.per_node.into_iter().flatten().collect();
            prop_assert_eq!(&got, &oracle);
        }
    }
}
