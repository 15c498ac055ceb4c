use mrbsp_core::jobs::{compute_range, distributed_sort, sort_destination, JobError, RangeInfo, SortInput};
use mrbsp_core::mapreduce::{MrError, MrOptions};
use mrbsp_core::transport::TransportConfig;
use mrbsp_core::{block_range, Backend, Cluster, ClusterSpec, NodeId, TransportKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cluster(machines: usize, per: usize, backend: Backend) -> Cluster {
    let spec = ClusterSpec::new(machines, per, backend).with_workers(2);
    Cluster::start(spec, TransportConfig::default()).unwrap()
}

fn check_sorted(input: &SortInput, n: usize, backend: Backend) -> Vec<i64> {
    let c = cluster(1, n, backend);
    let out = distributed_sort(input, &c, backend, &MrOptions::default()).unwrap();
    let mut oracle = input.to_vec();
    oracle.sort();
    assert_eq!(out.values(), oracle, "{backend}");
    for (p, part) in out.per_node().iter().enumerate() {
        assert_eq!(part.len(), block_range(input.len(), n, p).len(), "{backend} node {p}");
    }
    out.values()
}

#[test]
fn range_of_a_singleton() {
    let c = cluster(1, 1, Backend::Actor);
    let r = compute_range(&SortInput::explicit(vec![5]), &c, Backend::Actor).unwrap();
    assert_eq!((r.min, r.max, r.range), (5, 5, 0));
}

#[test]
fn range_spread_over_four_nodes() {
    let input = SortInput::explicit(vec![3, 99, -7, 42]);
    for backend in Backend::ALL {
        let c = cluster(1, 4, backend);
        let r = compute_range(&input, &c, backend).unwrap();
        assert_eq!((r.min, r.max), (-7, 99), "{backend}");
    }
}

#[test]
fn range_of_a_million_values_matches_a_scan() {
    let input = SortInput::Random {
        len: 1_000_000,
        seed: 9,
        lo: -1_000_000_000,
        hi: 1_000_000_000,
    };
    let v = input.to_vec();
    let (lo, hi) = (*v.iter().min().unwrap(), *v.iter().max().unwrap());
    for backend in [Backend::Actor, Backend::SharedMemoryParallel] {
        let c = cluster(2, 2, backend);
        let r = compute_range(&input, &c, backend).unwrap();
        assert_eq!((r.min, r.max), (lo, hi), "{backend}");
    }
}

#[test]
fn empty_input_is_rejected() {
    for backend in Backend::ALL {
        let c = cluster(1, 2, backend);
        assert_eq!(
            compute_range(&SortInput::explicit(vec![]), &c, backend).unwrap_err(),
            JobError::EmptyInput
        );
    }
}

#[test]
fn destinations_follow_the_interval_width() {
    let r = RangeInfo::new(0, 99, 4);
    assert_eq!(r.interval, 25);
    assert_eq!(sort_destination(0, &r, 4).unwrap(), NodeId(0));
    assert_eq!(sort_destination(24, &r, 4).unwrap(), NodeId(0));
    assert_eq!(sort_destination(25, &r, 4).unwrap(), NodeId(1));
    assert_eq!(sort_destination(50, &r, 4).unwrap(), NodeId(2));
    for v in 0..=99i64 {
        let q = sort_destination(v, &r, 4).unwrap().0 as i64;
        assert!(q * 25 <= v && v < (q + 1) * 25, "{v} not in interval {q}");
    }
    assert_eq!(
        sort_destination(100, &r, 4).unwrap_err(),
        JobError::Range { value: 100, min: 0, max: 99 }
    );
}

#[test]
fn max_always_lands_inside_the_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let a: i64 = rng.gen();
        let b: i64 = rng.gen();
        let n = rng.gen_range(1..=64usize);
        let r = RangeInfo::new(a.min(b), a.max(b), n);
        assert!(sort_destination(r.max, &r, n).unwrap().index() < n);
    }
}

#[test]
fn sorted_balanced_input_is_a_fixpoint() {
    let input = SortInput::explicit((0..12).collect());
    for backend in Backend::ALL {
        assert_eq!(check_sorted(&input, 4, backend), (0..12).collect::<Vec<_>>());
    }
}

#[test]
fn random_input_matches_a_sequential_sort_on_every_backend() {
    let input = SortInput::Random {
        len: 1000,
        seed: 1,
        lo: -500,
        hi: 500,
    };
    let outs: Vec<Vec<i64>> = Backend::ALL.iter().map(|&b| check_sorted(&input, 4, b)).collect();
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn equal_values_are_rebalanced_by_the_sink() {
    let input = SortInput::explicit(vec![7; 10]);
    for backend in Backend::ALL {
        check_sorted(&input, 4, backend);
    }
}

#[test]
fn sort_over_tcp() {
    let input = SortInput::Random {
        len: 3000,
        seed: 5,
        lo: i64::MIN,
        hi: i64::MAX,
    };
    for backend in [Backend::Actor, Backend::SharedMemoryParallel] {
        let spec = ClusterSpec::new(2, 2, backend).with_transport(TransportKind::Tcp);
        let c = Cluster::start(spec, TransportConfig::default().with_max_chunk_bytes(4096)).unwrap();
        let out = distributed_sort(&input, &c, backend, &MrOptions::default()).unwrap();
        let mut oracle = input.to_vec();
        oracle.sort();
        assert_eq!(out.values(), oracle, "{backend}");
    }
}

#[test]
fn coordinator_memory_limit_is_enforced() {
    let input = SortInput::explicit((0..100).rev().collect());
    for backend in Backend::ALL {
        let c = cluster(1, 2, backend);
        let opts = MrOptions {
            sink_memory_limit: 64,
            ..MrOptions::default()
        };
        let err = distributed_sort(&input, &c, backend, &opts).unwrap_err();
        assert!(
            matches!(err, JobError::Mr(MrError::SinkMemory { limit: 64, needed }) if needed > 64),
            "{backend}: {err:?}"
        );
    }
}

proptest! {
    #[test]
    fn destination_is_monotone(a in any::<i64>(), b in any::<i64>(), v in any::<i64>(), w in any::<i64>(), n in 1usize..100) {
        let r = RangeInfo::new(a.min(b), a.max(b), n);
        let clamp = |x: i64| x.clamp(r.min, r.max);
        let (v, w) = (clamp(v.min(w)), clamp(v.max(w)));
        let qv = sort_destination(v, &r, n).unwrap();
        let qw = sort_destination(w, &r, n).unwrap();
        prop_assert!(qv <= qw);
        prop_assert!(qw.index() < n);
    }

    #[test]
    fn random_values_stay_in_bounds(seed in any::<u64>(), lo in -1000i64..1000, span in 0i64..1000, i in 0usize..10_000) {
        let input = SortInput::Random { len: 10_000, seed, lo, hi: lo + span };
        let v = input.value(i);
        prop_assert!(lo <= v && v <= lo + span);
    }
}
