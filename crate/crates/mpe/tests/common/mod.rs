//! Shared helpers for the integration suites: the brute-force CRF
//! enumeration oracle and small synthetic-corpus setups.

use mpe::corpus::{generate_synthetic, split_relations, Corpus, SynthConfig};
use mpe::encoder::{EncoderConfig, Vocab};
use mpe::model::{ModelConfig, MpeModel};
use mpe::numerics::{log_sum_exp, Tensor};

/// All `L^P` labelings of `positions` positions.
pub fn all_paths(positions: usize, n_labels: usize) -> Vec<Vec<usize>> {
    let mut paths: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..positions {
        let mut next = Vec::with_capacity(paths.len() * n_labels);
        for p in &paths {
            for l in 0..n_labels {
                let mut q = p.clone();
                q.push(l);
                next.push(q);
            }
        }
        paths = next;
    }
    paths
}

pub fn score_path(emissions: &Tensor, transitions: &Tensor, path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &l) in path.iter().enumerate() {
        s += emissions.at2(i, l);
    }
    for w in path.windows(2) {
        s += transitions.at2(w[0], w[1]);
    }
    s
}

pub fn brute_log_partition(emissions: &Tensor, transitions: &Tensor) -> f64 {
    let scores: Vec<f64> = all_paths(emissions.rows(), emissions.cols())
        .iter()
        .map(|p| score_path(emissions, transitions, p))
        .collect();
    log_sum_exp(&scores)
}

/// Among equal-scoring paths the winner has the lowest label index at
/// the latest position where the candidates differ.
fn beats(candidate: &[usize], incumbent: &[usize]) -> bool {
    for i in (0..candidate.len()).rev() {
        if candidate[i] != incumbent[i] {
            return candidate[i] < incumbent[i];
        }
    }
    false
}

pub fn brute_viterbi(emissions: &Tensor, transitions: &Tensor) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for path in all_paths(emissions.rows(), emissions.cols()) {
        let score = score_path(emissions, transitions, &path);
        match &best {
            None => best = Some((path, score)),
            Some((bp, bs)) => {
                if score > *bs || (score == *bs && beats(&path, bp)) {
                    best = Some((path, score));
                }
            }
        }
    }
    best.expect("at least one path")
}

/// A default-sized synthetic corpus split 10/5/5, the shared fixture of
/// the end-to-end suites.
pub fn synth_splits(seed: u64) -> (Corpus, Corpus, Corpus) {
    let corpus = generate_synthetic(&SynthConfig::default(), seed).expect("synthetic corpus");
    split_relations(&corpus, 10, 5, 5, seed).expect("split")
}

/// A narrow model for fast integration runs.
pub fn small_model(corpora: &[&Corpus], width: usize, seed: u64) -> MpeModel {
    let vocab = Vocab::build(corpora);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            width,
            heads: 2,
            layers: 1,
            dropout: 0.0,
            max_len: 48,
            vocab_size: 0,
        },
        ..Default::default()
    };
    MpeModel::new(cfg, vocab, seed).expect("model init")
}
