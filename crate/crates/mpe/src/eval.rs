//! Micro-F1 evaluation at entity / relation / triple level, episode
//! evaluation with mean and standard deviation, the ablation harness,
//! and per-query prediction dumps.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Span};
use crate::episode::{sample_episode, EpisodeConfig};
use crate::error::{DataError, MpeError};
use crate::model::{ModelConfig, MpeModel, PredictionTriple, TaggerKind};
use crate::numerics::mix_seed;

pub use crate::model::PredictionTriple as Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Entity,
    Relation,
    Triple,
}

/// Predicted units for one query; `None` marks a missing prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredTriple {
    pub head: Option<Span>,
    pub tail: Option<Span>,
    pub relation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTriple {
    pub head: Span,
    pub tail: Span,
    pub relation: String,
}

/// Pooled true/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// Micro F1 with the empty-set convention: no predictions and no
    /// matches give 0.
    pub fn f1(&self) -> f64 {
        if 2 * self.tp + self.fp + self.fn_ == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Role {
    Head,
    Tail,
}

fn count_sets<T: Ord>(pred: BTreeSet<T>, gold: BTreeSet<T>) -> Counts {
    let tp = pred.intersection(&gold).count();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Pooled micro counts at one level. Entity level scores head and tail
/// spans as two separate units (exact span boundaries, correct role);
/// relation level compares the predicted label; triple level requires
/// both spans and the relation to match.
pub fn micro_f1(
    preds: &[PredTriple],
    gold: &[GoldTriple],
    level: Level,
) -> Result<Counts, DataError> {
    if preds.len() != gold.len() {
        return Err(DataError::Invalid(format!(
            "misaligned inputs: {} predictions vs {} gold",
            preds.len(),
            gold.len()
        )));
    }
    let mut total = Counts::default();
    for (p, g) in preds.iter().zip(gold) {
        let counts = match level {
            Level::Entity => {
                let mut pset: BTreeSet<(Role, (usize, usize))> = BTreeSet::new();
                if let Some(h) = p.head {
                    pset.insert((Role::Head, (h.start, h.end)));
                }
                if let Some(t) = p.tail {
                    pset.insert((Role::Tail, (t.start, t.end)));
                }
                let gset: BTreeSet<(Role, (usize, usize))> = [
                    (Role::Head, (g.head.start, g.head.end)),
                    (Role::Tail, (g.tail.start, g.tail.end)),
                ]
                .into_iter()
                .collect();
                count_sets(pset, gset)
            }
            Level::Relation => {
                let pset: BTreeSet<&str> = p.relation.as_deref().into_iter().collect();
                let gset: BTreeSet<&str> = [g.relation.as_str()].into_iter().collect();
                count_sets(pset, gset)
            }
            Level::Triple => {
                let mut pset: BTreeSet<((usize, usize), (usize, usize), &str)> = BTreeSet::new();
                if let (Some(h), Some(t), Some(r)) = (p.head, p.tail, p.relation.as_deref()) {
                    pset.insert(((h.start, h.end), (t.start, t.end), r));
                }
                let gset = [(
                    (g.head.start, g.head.end),
                    (g.tail.start, g.tail.end),
                    g.relation.as_str(),
                )]
                .into_iter()
                .collect();
                count_sets(pset, gset)
            }
        };
        total.merge(&counts);
    }
    Ok(total)
}

/// All three levels for one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub entity: Counts,
    pub relation: Counts,
    pub triple: Counts,
}

impl EpisodeMetrics {
    pub fn compute(preds: &[PredTriple], gold: &[GoldTriple]) -> Result<Self, DataError> {
        Ok(EpisodeMetrics {
            entity: micro_f1(preds, gold, Level::Entity)?,
            relation: micro_f1(preds, gold, Level::Relation)?,
            triple: micro_f1(preds, gold, Level::Triple)?,
        })
    }
}

fn to_pred(p: &PredictionTriple) -> PredTriple {
    PredTriple {
        head: Some(p.head_span),
        tail: Some(p.tail_span),
        relation: Some(p.relation.clone()),
    }
}

/// Mean and standard deviation (over episodes) of micro F1 per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub entity_mean: f64,
    pub entity_std: f64,
    pub relation_mean: f64,
    pub relation_std: f64,
    pub triple_mean: f64,
    pub triple_std: f64,
}

impl EvalSummary {
    fn from_per_episode(per: &[EpisodeMetrics]) -> EvalSummary {
        let stats = |f: &dyn Fn(&EpisodeMetrics) -> f64| {
            let n = per.len() as f64;
            let mean = per.iter().map(|m| f(m)).sum::<f64>() / n;
            let var = per.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (entity_mean, entity_std) = stats(&|m| m.entity.f1());
        let (relation_mean, relation_std) = stats(&|m| m.relation.f1());
        let (triple_mean, triple_std) = stats(&|m| m.triple.f1());
        EvalSummary {
            episodes: per.len(),
            entity_mean,
            entity_std,
            relation_mean,
            relation_std,
            triple_mean,
            triple_std,
        }
    }

    /// Human-readable block; the `+-` figures are stddev over episodes.
    pub fn render(&self, title: &str) -> String {
        format!(
            "{title} ({} episodes, mean +- stddev over episodes)\n\
             entity   F1: {:.4} +- {:.4}\n\
             relation F1: {:.4} +- {:.4}\n\
             triple   F1: {:.4} +- {:.4}\n",
            self.episodes,
            self.entity_mean,
            self.entity_std,
            self.relation_mean,
            self.relation_std,
            self.triple_mean,
            self.triple_std
        )
    }
}

fn gold_of(episode: &crate::episode::Episode) -> Vec<GoldTriple> {
    episode
        .query
        .iter()
        .map(|q| GoldTriple {
            head: q.head_span,
            tail: q.tail_span,
            relation: q.relation.clone(),
        })
        .collect()
}

/// Sample `episodes` evaluation episodes (seeds derived from the config
/// seed), run the inference path on each, and aggregate micro F1.
pub fn evaluate(
    model: &MpeModel,
    corpus: &Corpus,
    cfg: &EpisodeConfig,
    episodes: usize,
) -> Result<EvalSummary, MpeError> {
    if episodes == 0 {
        return Err(DataError::Invalid("need at least one evaluation episode".into()).into());
    }
    let mut per = Vec::with_capacity(episodes);
    for idx in 0..episodes {
        let episode_cfg = EpisodeConfig {
            seed: mix_seed(cfg.seed, idx as u64),
            ..*cfg
        };
        let episode = sample_episode(corpus, &episode_cfg)?;
        let preds = model.predict_episode(&episode)?;
        let pred_units: Vec<PredTriple> = preds.iter().map(to_pred).collect();
        per.push(EpisodeMetrics::compute(&pred_units, &gold_of(&episode))?);
    }
    Ok(EvalSummary::from_per_episode(&per))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoCrf,
    NoAtt,
    NoIntra,
    NoInter,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoCrf,
        AblationVariant::NoAtt,
        AblationVariant::NoIntra,
        AblationVariant::NoInter,
    ];

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "no_crf" => Ok(AblationVariant::NoCrf),
            "no_att" => Ok(AblationVariant::NoAtt),
            "no_intra" => Ok(AblationVariant::NoIntra),
            "no_inter" => Ok(AblationVariant::NoInter),
            other => Err(DataError::Invalid(format!("unknown ablation variant `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoCrf => "no_crf",
            AblationVariant::NoAtt => "no_att",
            AblationVariant::NoIntra => "no_intra",
            AblationVariant::NoInter => "no_inter",
        }
    }
}

/// Apply one ablation to a base model config.
pub fn ablate(base: &ModelConfig, variant: AblationVariant) -> ModelConfig {
    let mut cfg = base.clone();
    match variant {
        AblationVariant::Full => {}
        AblationVariant::NoCrf => cfg.tagger = TaggerKind::Softmax,
        AblationVariant::NoAtt => cfg.attention = false,
        AblationVariant::NoIntra => cfg.use_intra = false,
        AblationVariant::NoInter => cfg.use_inter = false,
    }
    cfg
}

/// Train and evaluate every requested variant on the same seeds, and
/// render the results as a CSV table (one row per variant).
pub fn ablation_table(
    base_model: &ModelConfig,
    vocab: &crate::encoder::Vocab,
    train_corpus: &Corpus,
    valid_corpus: &Corpus,
    train_cfg: &crate::train::TrainConfig,
    eval_cfg: &EpisodeConfig,
    eval_episodes: usize,
    variants: &[AblationVariant],
) -> Result<String, MpeError> {
    let mut csv = String::from("variant,entity_f1,relation_f1,triple_f1\n");
    for variant in variants {
        let cfg = ablate(base_model, *variant);
        let mut model = MpeModel::new(cfg, vocab.clone(), train_cfg.seed)?;
        crate::train::run_training(&mut model, train_corpus, Some(valid_corpus), train_cfg)?;
        let summary = evaluate(&model, valid_corpus, eval_cfg, eval_episodes)?;
        csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4}\n",
            variant.name(),
            summary.entity_mean,
            summary.relation_mean,
            summary.triple_mean
        ));
    }
    Ok(csv)
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpRecord {
    tokens: Vec<String>,
    gold: DumpTriple,
    pred: DumpTriple,
    distances: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpTriple {
    head: Span,
    tail: Span,
    relation: String,
}

/// Write one JSON record per query across `episodes` sampled episodes:
/// tokens, gold triple, predicted triple, and per-class distances.
/// Returns the record count.
pub fn dump_predictions<W: Write>(
    model: &MpeModel,
    corpus: &Corpus,
    cfg: &EpisodeConfig,
    episodes: usize,
    w: &mut W,
) -> Result<usize, MpeError> {
    let mut written = 0usize;
    for idx in 0..episodes {
        let episode_cfg = EpisodeConfig {
            seed: mix_seed(cfg.seed, idx as u64),
            ..*cfg
        };
        let episode = sample_episode(corpus, &episode_cfg)?;
        let preds = model.predict_episode(&episode)?;
        for (query, pred) in episode.query.iter().zip(&preds) {
            let record = DumpRecord {
                tokens: query.tokens.clone(),
                gold: DumpTriple {
                    head: query.head_span,
                    tail: query.tail_span,
                    relation: query.relation.clone(),
                },
                pred: DumpTriple {
                    head: pred.head_span,
                    tail: pred.tail_span,
                    relation: pred.relation.clone(),
                },
                distances: pred.distances.iter().cloned().collect(),
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| DataError::Invalid(format!("serialize dump record: {e}")))?;
            writeln!(w, "{line}").map_err(DataError::from)?;
            written += 1;
        }
    }
    Ok(written)
}
