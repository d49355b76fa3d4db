//! Synthetic corpus generator for desk-scale experiments.
//!
//! Every relation gets a distinctive ordered pair of trigger tokens plus
//! a typed head-marker and tail-marker token; entities come from a shared
//! pool and appear right after their marker. Trigger and marker alphabets
//! are shared across relations, so held-out relations are novel
//! *combinations* of seen tokens and a small encoder can separate them.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, SentenceInstance, Span, SplitTag};
use crate::error::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub relations: usize,
    pub per_relation: usize,
    pub vocab_size: usize,
    /// Probability that a filler position is resampled from the whole
    /// vocabulary (including other relations' triggers).
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            relations: 20,
            per_relation: 50,
            vocab_size: 64,
            noise: 0.05,
        }
    }
}

struct Pools {
    fillers: Vec<String>,
    head_markers: Vec<String>,
    tail_markers: Vec<String>,
    triggers: Vec<String>,
    entities: Vec<String>,
}

impl Pools {
    fn from_vocab(vocab_size: usize, relations: usize) -> Result<Pools, DataError> {
        let entities = (vocab_size / 4).clamp(4, 32);
        let markers = (vocab_size / 12).clamp(3, 8);
        let triggers = (vocab_size / 8).clamp(4, 24);
        let used = entities + 2 * markers + triggers;
        let fillers = vocab_size.saturating_sub(used);
        if fillers < 4 {
            return Err(DataError::Invalid(format!(
                "vocabulary of {vocab_size} is too small: {used} tokens go to markers, \
                 triggers and entities, leaving {fillers} fillers (need 4)"
            )));
        }
        let trigger_patterns = triggers * (triggers - 1) * (triggers - 2) / 6;
        if trigger_patterns < relations {
            return Err(DataError::Invalid(format!(
                "vocabulary too small for {relations} relations: {triggers} trigger tokens \
                 give only {trigger_patterns} distinct three-token patterns"
            )));
        }
        Ok(Pools {
            fillers: (0..fillers).map(|i| format!("w{i}")).collect(),
            head_markers: (0..markers).map(|i| format!("hm{i}")).collect(),
            tail_markers: (0..markers).map(|i| format!("tm{i}")).collect(),
            triggers: (0..triggers).map(|i| format!("g{i}")).collect(),
            entities: (0..entities).map(|i| format!("ent{i}")).collect(),
        })
    }

    fn all_tokens(&self) -> Vec<&String> {
        self.fillers
            .iter()
            .chain(&self.head_markers)
            .chain(&self.tail_markers)
            .chain(&self.triggers)
            .chain(&self.entities)
            .collect()
    }
}

struct RelationPattern {
    head_marker: String,
    tail_marker: String,
    trigger: Vec<String>,
}

/// Build a relation-grouped synthetic corpus. Deterministic under `seed`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Corpus, DataError> {
    if cfg.relations == 0 || cfg.per_relation == 0 {
        return Err(DataError::Invalid(
            "need at least one relation and one instance per relation".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(DataError::Invalid(format!(
            "noise {} outside [0, 1]",
            cfg.noise
        )));
    }
    let pools = Pools::from_vocab(cfg.vocab_size, cfg.relations)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // unordered trigger triples: no two relations share a trigger SET,
    // so even an order-blind encoder can tell every class apart, and a
    // single noise distractor cannot mimic another class's pattern
    let mut triples: Vec<(usize, usize, usize)> = Vec::new();
    for a in 0..pools.triggers.len() {
        for b in (a + 1)..pools.triggers.len() {
            for c in (b + 1)..pools.triggers.len() {
                triples.push((a, b, c));
            }
        }
    }
    triples.shuffle(&mut rng);

    let patterns: Vec<RelationPattern> = (0..cfg.relations)
        .map(|i| {
            let (a, b, c) = triples[i];
            RelationPattern {
                head_marker: pools.head_markers[i % pools.head_markers.len()].clone(),
                tail_marker: pools.tail_markers[(i / pools.head_markers.len())
                    % pools.tail_markers.len()]
                .clone(),
                trigger: vec![
                    pools.triggers[a].clone(),
                    pools.triggers[b].clone(),
                    pools.triggers[c].clone(),
                ],
            }
        })
        .collect();

    let all_tokens = pools.all_tokens();
    let mut instances = Vec::with_capacity(cfg.relations * cfg.per_relation);
    for (r, pattern) in patterns.iter().enumerate() {
        let relation = format!("R{r:03}");
        for _ in 0..cfg.per_relation {
            let mut tokens: Vec<String> = Vec::new();
            let mut filler_positions: Vec<usize> = Vec::new();
            let push_fillers = |tokens: &mut Vec<String>,
                                    fill_pos: &mut Vec<usize>,
                                    rng: &mut ChaCha8Rng,
                                    lo: usize,
                                    hi: usize| {
                let n = rng.random_range(lo..=hi);
                for _ in 0..n {
                    fill_pos.push(tokens.len());
                    tokens.push(pools.fillers.choose(rng).expect("fillers").clone());
                }
            };
            let entity_len = |rng: &mut ChaCha8Rng| if rng.random_bool(0.25) { 2 } else { 1 };

            push_fillers(&mut tokens, &mut filler_positions, &mut rng, 1, 2);
            tokens.push(pattern.head_marker.clone());
            let head_start = tokens.len();
            for _ in 0..entity_len(&mut rng) {
                tokens.push(pools.entities.choose(&mut rng).expect("entities").clone());
            }
            let head_span = Span::new(head_start, tokens.len() - 1);

            push_fillers(&mut tokens, &mut filler_positions, &mut rng, 1, 2);
            for trig in &pattern.trigger {
                tokens.push(trig.clone());
            }
            push_fillers(&mut tokens, &mut filler_positions, &mut rng, 0, 1);

            tokens.push(pattern.tail_marker.clone());
            let tail_start = tokens.len();
            for _ in 0..entity_len(&mut rng) {
                tokens.push(pools.entities.choose(&mut rng).expect("entities").clone());
            }
            let tail_span = Span::new(tail_start, tokens.len() - 1);
            push_fillers(&mut tokens, &mut filler_positions, &mut rng, 0, 2);

            if cfg.noise > 0.0 {
                for &p in &filler_positions {
                    if rng.random_bool(cfg.noise) {
                        tokens[p] = (*all_tokens.choose(&mut rng).expect("vocab")).clone();
                    }
                }
            }

            instances.push(SentenceInstance::new(
                tokens,
                head_span,
                tail_span,
                relation.clone(),
            )?);
        }
    }
    Corpus::new(SplitTag::Train, instances)
}
