//! N-way-K-shot episode sampling: a support set of K labeled instances
//! for each of N relations plus R query instances drawn from the
//! remaining samples of those relations.

use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CanonicalRecord, Corpus, SentenceInstance};
use crate::error::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_way < 2 {
            return Err(DataError::Invalid(format!(
                "n_way must be at least 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot < 1 || self.r_query < 1 {
            return Err(DataError::Invalid(
                "k_shot and r_query must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled few-shot task. `support[i]` holds the K instances of
/// roster class `i`; every query's relation is in the roster, and no
/// instance appears in both sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub roster: Vec<String>,
    pub support: Vec<Vec<SentenceInstance>>,
    pub query: Vec<SentenceInstance>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.roster.len()
    }

    pub fn class_of(&self, relation: &str) -> Option<usize> {
        self.roster.iter().position(|r| r == relation)
    }
}

/// Sample an episode. The roster is drawn uniformly without replacement,
/// support instances without replacement within each class, and queries
/// from the remaining instances of the roster classes: class-balanced
/// when R is a multiple of N, otherwise query classes are drawn
/// uniformly. Deterministic under the config seed.
pub fn sample_episode(corpus: &Corpus, cfg: &EpisodeConfig) -> Result<Episode, DataError> {
    cfg.validate()?;
    let relations = corpus.relations();
    if relations.len() < cfg.n_way {
        return Err(DataError::Invalid(format!(
            "corpus has {} relations, episode needs {}",
            relations.len(),
            cfg.n_way
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let roster: Vec<String> = relations
        .choose_multiple(&mut rng, cfg.n_way)
        .map(|r| r.to_string())
        .collect();

    let balanced = cfg.r_query % cfg.n_way == 0;
    let per_class_queries = cfg.r_query / cfg.n_way;

    let mut support = Vec::with_capacity(cfg.n_way);
    let mut remaining: Vec<Vec<&SentenceInstance>> = Vec::with_capacity(cfg.n_way);
    for relation in &roster {
        let group = corpus.group(relation).expect("roster relation");
        let need = cfg.k_shot + if balanced { per_class_queries } else { 1 };
        if group.len() < need {
            return Err(DataError::Invalid(format!(
                "relation `{relation}` has {} instances, episode needs {need}",
                group.len()
            )));
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.shuffle(&mut rng);
        let (chosen, rest) = order.split_at(cfg.k_shot);
        support.push(chosen.iter().map(|&i| group[i].clone()).collect());
        remaining.push(rest.iter().map(|&i| &group[i]).collect());
    }

    let mut query = Vec::with_capacity(cfg.r_query);
    if balanced {
        for pool in remaining.iter_mut() {
            for _ in 0..per_class_queries {
                let idx = rng.random_range(0..pool.len());
                query.push(pool.swap_remove(idx).clone());
            }
        }
    } else {
        for _ in 0..cfg.r_query {
            let open: Vec<usize> = (0..cfg.n_way).filter(|&c| !remaining[c].is_empty()).collect();
            let class = *open.choose(&mut rng).ok_or_else(|| {
                DataError::Invalid("ran out of query instances in every class".into())
            })?;
            let idx = rng.random_range(0..remaining[class].len());
            query.push(remaining[class].swap_remove(idx).clone());
        }
    }

    Ok(Episode {
        roster,
        support,
        query,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeHeader {
    roster: Vec<String>,
    n_way: usize,
    k_shot: usize,
    r_query: usize,
}

/// Dump an episode: a JSON roster header line, then one canonical record
/// per line with split set to `support` or `query`.
pub fn write_episode<W: Write>(w: &mut W, episode: &Episode) -> Result<(), DataError> {
    let header = EpisodeHeader {
        roster: episode.roster.clone(),
        n_way: episode.roster.len(),
        k_shot: episode.support.first().map_or(0, Vec::len),
        r_query: episode.query.len(),
    };
    let line = serde_json::to_string(&header)
        .map_err(|e| DataError::Invalid(format!("serialize header: {e}")))?;
    writeln!(w, "{line}")?;
    for class in &episode.support {
        for inst in class {
            let record = CanonicalRecord::from_instance(inst, "support");
            writeln!(
                w,
                "{}",
                serde_json::to_string(&record)
                    .map_err(|e| DataError::Invalid(format!("serialize record: {e}")))?
            )?;
        }
    }
    for inst in &episode.query {
        let record = CanonicalRecord::from_instance(inst, "query");
        writeln!(
            w,
            "{}",
            serde_json::to_string(&record)
                .map_err(|e| DataError::Invalid(format!("serialize record: {e}")))?
        )?;
    }
    Ok(())
}

/// Read an episode dump produced by [`write_episode`].
pub fn read_episode<R: BufRead>(r: R) -> Result<Episode, DataError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::parse("episode file", "missing header"))??;
    let header: EpisodeHeader = serde_json::from_str(&header_line)
        .map_err(|e| DataError::parse("header", e.to_string()))?;
    if header.roster.len() != header.n_way || header.n_way == 0 {
        return Err(DataError::validation(
            "header",
            "roster length does not match n_way",
        ));
    }
    let mut support: Vec<Vec<SentenceInstance>> = vec![Vec::new(); header.n_way];
    let mut query = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let locator = format!("line {}", lineno + 2);
        let record: CanonicalRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::parse(&locator, e.to_string()))?;
        let split = record.split.clone();
        let inst = record.into_instance(&locator)?;
        let class = header
            .roster
            .iter()
            .position(|r| *r == inst.relation)
            .ok_or_else(|| {
                DataError::validation(&locator, format!("relation `{}` not in roster", inst.relation))
            })?;
        match split.as_str() {
            "support" => support[class].push(inst),
            "query" => query.push(inst),
            other => {
                return Err(DataError::validation(
                    &locator,
                    format!("unknown episode split `{other}`"),
                ))
            }
        }
    }
    if support.iter().any(|class| class.len() != header.k_shot) {
        return Err(DataError::validation(
            "episode file",
            "support classes do not all have k_shot instances",
        ));
    }
    if query.len() != header.r_query {
        return Err(DataError::validation(
            "episode file",
            format!("expected {} queries, got {}", header.r_query, query.len()),
        ));
    }
    Ok(Episode {
        roster: header.roster,
        support,
        query,
    })
}

/// Fuzzing entry point for the episode dump format.
pub fn parse_episode(bytes: &[u8]) -> Result<Episode, DataError> {
    read_episode(std::io::Cursor::new(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};

    fn corpus() -> Corpus {
        generate_synthetic(
            &SynthConfig {
                relations: 8,
                per_relation: 12,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn cfg(n: usize, k: usize, r: usize, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            n_way: n,
            k_shot: k,
            r_query: r,
            seed,
        }
    }

    #[test]
    fn five_way_five_shot_shape_and_disjointness() {
        let c = corpus();
        let ep = sample_episode(&c, &cfg(5, 5, 5, 11)).unwrap();
        assert_eq!(ep.roster.len(), 5);
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 25);
        assert_eq!(ep.query.len(), 5);
        for q in &ep.query {
            assert!(ep.roster.contains(&q.relation));
            for class in &ep.support {
                assert!(!class.contains(q));
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_episodes() {
        let c = corpus();
        let a = sample_episode(&c, &cfg(4, 3, 4, 99)).unwrap();
        let b = sample_episode(&c, &cfg(4, 3, 4, 99)).unwrap();
        assert_eq!(a, b);
        let d = sample_episode(&c, &cfg(4, 3, 4, 100)).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn too_few_relations_is_an_error() {
        let c = generate_synthetic(
            &SynthConfig {
                relations: 3,
                per_relation: 10,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(sample_episode(&c, &cfg(5, 2, 2, 0)).is_err());
    }

    #[test]
    fn deficient_relation_is_named() {
        let c = generate_synthetic(
            &SynthConfig {
                relations: 5,
                per_relation: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let err = sample_episode(&c, &cfg(5, 4, 5, 0)).unwrap_err();
        assert!(err.to_string().contains("R0"), "{err}");
    }

    #[test]
    fn every_relation_appears_in_some_roster() {
        let c = corpus();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..1000u64 {
            let ep = sample_episode(&c, &cfg(3, 2, 3, seed)).unwrap();
            seen.extend(ep.roster.iter().cloned());
        }
        assert_eq!(seen.len(), c.n_relations(), "coverage over 1000 episodes");
    }

    #[test]
    fn unbalanced_queries_are_allowed() {
        let c = corpus();
        let ep = sample_episode(&c, &cfg(4, 2, 7, 5)).unwrap();
        assert_eq!(ep.query.len(), 7);
    }

    #[test]
    fn dump_round_trip() {
        let c = corpus();
        let ep = sample_episode(&c, &cfg(3, 2, 3, 1)).unwrap();
        let mut buf = Vec::new();
        write_episode(&mut buf, &ep).unwrap();
        let back = parse_episode(&buf).unwrap();
        assert_eq!(ep.roster, back.roster);
        assert_eq!(ep.support, back.support);
        assert_eq!(ep.query, back.query);
    }
}
