use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mapreduce::MapReduceJob;
use crate::types::{block_range, KvPair, NodeId};

/// Counts words over a corpus of lines spread over the nodes in blocks.
#[derive(Clone, Debug)]
pub struct WordCount {
    lines: Arc<Vec<String>>,
}

impl WordCount {
    pub fn new(lines: Vec<String>) -> Self {
        WordCount {
            lines: Arc::new(lines),
        }
    }

    /// `n_lines` lines of up to `max_words` words drawn from a
    /// `vocabulary`-word dictionary.
    pub fn random(seed: u64, n_lines: usize, max_words: usize, vocabulary: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lines = (0..n_lines)
            .map(|_| {
                let k = rng.gen_range(0..=max_words);
                (0..k)
                    .map(|_| format!("w{}", rng.gen_range(0..vocabulary.max(1))))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        WordCount::new(lines)
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// FNV-1a, stable across processes and runs.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl MapReduceJob for WordCount {
    type K1 = u64;
    type V1 = String;
    type K2 = String;
    type V2 = u64;
    type K3 = String;
    type V3 = u64;
    type Out = Vec<(String, u64)>;

    fn source(&self, node: NodeId, n_nodes: usize) -> Vec<KvPair<u64, String>> {
        block_range(self.lines.len(), n_nodes, node.index())
            .map(|i| KvPair::stage1(i as u64, self.lines[i].clone()))
            .collect()
    }

    fn map(&self, pair: KvPair<u64, String>) -> Vec<KvPair<String, u64>> {
        pair.value
            .split_whitespace()
            .map(|w| KvPair::stage2(w.to_string(), 1))
            .collect()
    }

    fn partition(&self, key: &String, n_nodes: usize) -> NodeId {
        NodeId::from((stable_hash(key) % n_nodes as u64) as usize)
    }

    fn reduce(&self, key: String, values: Vec<u64>) -> KvPair<String, u64> {
        KvPair::stage3(key, values.into_iter().sum())
    }

    fn sink(&self, _node: NodeId, pairs: Vec<KvPair<String, u64>>) -> Vec<(String, u64)> {
        pairs.into_iter().map(|p| (p.key, p.value)).collect()
    }
}
