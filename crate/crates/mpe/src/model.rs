//! The full model: encoder + entity tagger + multi-prototype classifier,
//! glued into one differentiable episode loss for training and a
//! value-space inference path for evaluation.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    spans_from_labels, to_tag_sequence, SentenceInstance, Span, SubtokenMap, Tag, TagSequence,
};
use crate::crf::{boundary_mask, crf_nll, initial_transitions, viterbi};
use crate::encoder::{
    encode, init_params as init_encoder_params, instance_key, EmbeddingStore, EncodeMode,
    EncoderConfig, Vocab,
};
use crate::episode::Episode;
use crate::error::{DataError, MpeError, NumericError};
use crate::numerics::{read_tensor, write_tensor, ParamSet, Tape, Tensor, VarId};
use crate::proto::{
    assemble_losses, attentive_prototypes, entity_loss, extract_span_reps, inter_loss,
    intra_loss, kg_prototype, mean_prototypes, nearest_class, relation_loss, relation_vector,
    ClassProtos, InterMode, LossBundle, LossWeights, SpanRep,
};

/// Entity tagging backend: the CRF, or plain per-token softmax (the
/// `no_crf` ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerKind {
    Crf,
    Softmax,
}

/// Which sentences feed the tagging loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrfScope {
    Support,
    Query,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub weights: LossWeights,
    /// Attention-weighted prototypes (off = plain means everywhere).
    pub attention: bool,
    /// Include the `|head - tail| W_r` part in relation space (off =
    /// sentence prototypes only, the Proto / Proto+Att baselines).
    pub use_kg: bool,
    pub tagger: TaggerKind,
    pub use_intra: bool,
    pub use_inter: bool,
    pub inter_mode: InterMode,
    pub crf_scope: CrfScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            weights: LossWeights::default(),
            attention: true,
            use_kg: true,
            tagger: TaggerKind::Crf,
            use_intra: true,
            use_inter: true,
            inter_mode: InterMode::Repel,
            crf_scope: CrfScope::Both,
        }
    }
}

/// Tape handles of the episode loss components; lets callers run the
/// backward pass (or a gradient check) from any single component.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLossVars {
    pub crf: VarId,
    pub entity: VarId,
    pub relation: VarId,
    pub intra: VarId,
    pub inter: VarId,
    pub total: VarId,
}

/// One decoded query: predicted spans (word-level), predicted relation,
/// and the squared distance to every roster class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTriple {
    pub head_span: Span,
    pub tail_span: Span,
    pub relation: String,
    pub distances: Vec<(String, f64)>,
}

struct Prepared {
    ids: Vec<u32>,
    submap: SubtokenMap,
    gold_tags: TagSequence,
    head_row: usize,
    tail_row: usize,
    key: String,
}

pub struct MpeModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    precomputed: Option<EmbeddingStore>,
}

impl MpeModel {
    /// Initialize a model with a trainable encoder.
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<MpeModel, MpeError> {
        let mut cfg = cfg;
        cfg.encoder.vocab_size = vocab.len();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder_params(&cfg.encoder, &mut params, &mut rng)?;
        Self::init_task_params(&cfg, &mut params, &mut rng)?;
        Ok(MpeModel {
            cfg,
            vocab,
            params,
            precomputed: None,
        })
    }

    /// Initialize a model that takes fixed contextual embeddings from a
    /// precomputed store; only the projection, transition, and relation
    /// parameters are trainable.
    pub fn with_precomputed(
        cfg: ModelConfig,
        vocab: Vocab,
        store: EmbeddingStore,
        seed: u64,
    ) -> Result<MpeModel, MpeError> {
        let mut cfg = cfg;
        cfg.encoder.vocab_size = vocab.len();
        store.check_dim(cfg.encoder.width)?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_task_params(&cfg, &mut params, &mut rng)?;
        Ok(MpeModel {
            cfg,
            vocab,
            params,
            precomputed: Some(store),
        })
    }

    fn init_task_params(
        cfg: &ModelConfig,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NumericError> {
        let d = cfg.encoder.width;
        let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            use rand::Rng;
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(vec![rows, cols], data).expect("init shape")
        };
        params.add("crf.proj", xavier(rng, d, Tag::COUNT), true)?;
        params.add("crf.trans", initial_transitions(), true)?;
        params.add("w_r", xavier(rng, d, d), true)?;
        Ok(())
    }

    pub fn has_precomputed(&self) -> bool {
        self.precomputed.is_some()
    }

    fn prepare(&self, inst: &SentenceInstance) -> Result<Prepared, MpeError> {
        let (ids, submap) = self.vocab.encode_words(&inst.tokens);
        let gold_tags = to_tag_sequence(inst.head_span, inst.tail_span, &submap)?;
        let head_row = submap.first_subtoken(inst.head_span.start) + 1;
        let tail_row = submap.first_subtoken(inst.tail_span.start) + 1;
        Ok(Prepared {
            key: instance_key(&inst.tokens),
            ids,
            submap,
            gold_tags,
            head_row,
            tail_row,
        })
    }

    fn embed(
        &self,
        tape: &mut Tape,
        prepared: &Prepared,
        mode: &mut EncodeMode<'_>,
    ) -> Result<VarId, MpeError> {
        match &self.precomputed {
            Some(store) => {
                let matrix = store.get(&prepared.key)?;
                let want_rows = prepared.ids.len() + 2;
                if matrix.rows() != want_rows {
                    return Err(DataError::validation(
                        "embedding store",
                        format!(
                            "embedding for `{}` has {} rows, sentence needs {want_rows}",
                            prepared.key,
                            matrix.rows()
                        ),
                    )
                    .into());
                }
                Ok(tape.constant(matrix.clone())?)
            }
            None => Ok(encode(
                tape,
                &self.params,
                &self.cfg.encoder,
                self.vocab.cls_id(),
                self.vocab.sep_id(),
                &prepared.ids,
                mode,
            )?),
        }
    }

    /// Per-position softmax tagging loss (the `no_crf` ablation).
    fn softmax_tagging_loss(
        &self,
        tape: &mut Tape,
        emissions: VarId,
        gold: &[usize],
    ) -> Result<VarId, MpeError> {
        let coords: Vec<(usize, usize)> =
            gold.iter().enumerate().map(|(i, &l)| (i, l)).collect();
        let picked = tape.pick(emissions, &coords)?;
        let transposed = tape.transpose(emissions)?;
        let lse = tape.lse_cols(transposed)?;
        let per_pos = tape.sub(lse, picked)?;
        Ok(tape.mean(per_pos)?)
    }

    fn tagging_loss(
        &self,
        tape: &mut Tape,
        emissions: VarId,
        transitions: VarId,
        gold: &TagSequence,
    ) -> Result<VarId, MpeError> {
        let indices = gold.indices();
        match self.cfg.tagger {
            TaggerKind::Crf => Ok(crf_nll(tape, emissions, transitions, &indices)?),
            TaggerKind::Softmax => self.softmax_tagging_loss(tape, emissions, &indices),
        }
    }

    fn relation_rep(
        &self,
        tape: &mut Tape,
        rep: &SpanRep,
        w_r: VarId,
    ) -> Result<VarId, NumericError> {
        if self.cfg.use_kg {
            let kg = kg_prototype(tape, rep.head, rep.tail, w_r)?;
            relation_vector(tape, rep.sent, kg)
        } else {
            Ok(rep.sent)
        }
    }

    fn relation_proto(
        &self,
        tape: &mut Tape,
        protos: &ClassProtos,
        w_r: VarId,
    ) -> Result<VarId, NumericError> {
        if self.cfg.use_kg {
            let kg = kg_prototype(tape, protos.head, protos.tail, w_r)?;
            relation_vector(tape, protos.sent, kg)
        } else {
            Ok(protos.sent)
        }
    }

    /// Build the full differentiable loss of one episode (teacher-forced
    /// spans) and return the total together with its component values.
    pub fn episode_loss_graph(
        &self,
        tape: &mut Tape,
        episode: &Episode,
        mode: &mut EncodeMode<'_>,
    ) -> Result<(EpisodeLossVars, LossBundle), MpeError> {
        if episode.roster.len() < 2 {
            return Err(DataError::Invalid("episode needs at least 2 classes".into()).into());
        }
        let w_r = tape.param(&self.params, "w_r")?;
        let proj = tape.param(&self.params, "crf.proj")?;
        let trans_param = tape.param(&self.params, "crf.trans")?;
        let bmask = tape.constant(boundary_mask())?;
        let trans = tape.add(trans_param, bmask)?;

        let tag_support = matches!(self.cfg.crf_scope, CrfScope::Support | CrfScope::Both);
        let tag_query = matches!(self.cfg.crf_scope, CrfScope::Query | CrfScope::Both);

        let mut tagging_terms: Vec<VarId> = Vec::new();
        let mut support_reps: Vec<Vec<SpanRep>> = Vec::with_capacity(episode.roster.len());
        let mut support_rel: Vec<Vec<VarId>> = Vec::with_capacity(episode.roster.len());
        for class in &episode.support {
            let mut class_reps = Vec::with_capacity(class.len());
            let mut class_rel = Vec::with_capacity(class.len());
            for inst in class {
                let prepared = self.prepare(inst)?;
                let emb = self.embed(tape, &prepared, mode)?;
                if tag_support {
                    let emissions = tape.matmul(emb, proj)?;
                    tagging_terms.push(self.tagging_loss(
                        tape,
                        emissions,
                        trans,
                        &prepared.gold_tags,
                    )?);
                }
                let rep =
                    extract_span_reps(tape, emb, prepared.head_row, prepared.tail_row)?;
                class_rel.push(self.relation_rep(tape, &rep, w_r)?);
                class_reps.push(rep);
            }
            support_reps.push(class_reps);
            support_rel.push(class_rel);
        }

        let mut query_entity: Vec<(SpanRep, usize)> = Vec::with_capacity(episode.query.len());
        let mut query_rel: Vec<(VarId, usize)> = Vec::with_capacity(episode.query.len());
        for inst in &episode.query {
            let gold_class = episode.class_of(&inst.relation).ok_or_else(|| {
                DataError::Invalid(format!("query relation `{}` not in roster", inst.relation))
            })?;
            let prepared = self.prepare(inst)?;
            let emb = self.embed(tape, &prepared, mode)?;
            if tag_query {
                let emissions = tape.matmul(emb, proj)?;
                tagging_terms.push(self.tagging_loss(
                    tape,
                    emissions,
                    trans,
                    &prepared.gold_tags,
                )?);
            }
            let rep = extract_span_reps(tape, emb, prepared.head_row, prepared.tail_row)?;
            query_rel.push((self.relation_rep(tape, &rep, w_r)?, gold_class));
            query_entity.push((rep, gold_class));
        }

        let crf_loss = {
            let all = tape.concat_vec(&tagging_terms)?;
            tape.mean(all)?
        };

        // mean prototypes: the query-independent class structure used by
        // the regularizers (and by classification when attention is off)
        let mut mean_protos: Vec<ClassProtos> = Vec::with_capacity(support_reps.len());
        for class_reps in &support_reps {
            mean_protos.push(mean_prototypes(tape, class_reps)?);
        }

        let mut entity_protos_per_query: Vec<Vec<ClassProtos>> = Vec::new();
        let mut rel_protos_per_query: Vec<Vec<VarId>> = Vec::new();
        for (rep, _) in &query_entity {
            let class_protos: Vec<ClassProtos> = if self.cfg.attention {
                let mut row = Vec::with_capacity(support_reps.len());
                for class_reps in &support_reps {
                    row.push(attentive_prototypes(tape, class_reps, rep.sent)?);
                }
                row
            } else {
                mean_protos.clone()
            };
            let mut rel_row = Vec::with_capacity(class_protos.len());
            for protos in &class_protos {
                rel_row.push(self.relation_proto(tape, protos, w_r)?);
            }
            entity_protos_per_query.push(class_protos);
            rel_protos_per_query.push(rel_row);
        }

        let entity = entity_loss(tape, &query_entity, &entity_protos_per_query)?;
        let relation = relation_loss(tape, &query_rel, &rel_protos_per_query)?;

        let mut mean_rel_protos = Vec::with_capacity(mean_protos.len());
        for protos in &mean_protos {
            mean_rel_protos.push(self.relation_proto(tape, protos, w_r)?);
        }
        let intra = if self.cfg.use_intra {
            intra_loss(tape, &support_rel, &mean_rel_protos)?
        } else {
            tape.scalar(0.0)?
        };
        let inter = if self.cfg.use_inter {
            inter_loss(tape, &mean_rel_protos, self.cfg.inter_mode)?
        } else {
            tape.scalar(0.0)?
        };

        let total = assemble_losses(
            tape,
            crf_loss,
            entity,
            relation,
            intra,
            inter,
            &self.cfg.weights,
        )?;
        let bundle = LossBundle {
            crf: tape.value(crf_loss).item()?,
            entity: tape.value(entity).item()?,
            relation: tape.value(relation).item()?,
            intra: tape.value(intra).item()?,
            inter: tape.value(inter).item()?,
            total: tape.value(total).item()?,
        };
        bundle.validate(&self.cfg.weights)?;
        Ok((
            EpisodeLossVars {
                crf: crf_loss,
                entity,
                relation,
                intra,
                inter,
                total,
            },
            bundle,
        ))
    }

    /// One forward/backward pass over an episode; gradients accumulate
    /// into the parameter set.
    pub fn episode_backward(
        &mut self,
        episode: &Episode,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBundle, MpeError> {
        let mut tape = Tape::new();
        let mut mode = EncodeMode::Train { rng };
        let (vars, bundle) = self.episode_loss_graph(&mut tape, episode, &mut mode)?;
        let grads = tape.backward(vars.total)?;
        self.params.accumulate(&grads);
        Ok(bundle)
    }

    /// Decode one label sequence into word-level spans and the embedding
    /// rows feeding span representations, falling back to the position
    /// with the maximal B- emission when the decoded path lacks one.
    fn resolve_spans(
        labels: &[Tag],
        submap: &SubtokenMap,
        emissions: &Tensor,
    ) -> (Span, Span, usize, usize) {
        let (head, tail) = spans_from_labels(labels, submap);
        let resolve = |found: Option<Span>, begin: Tag| -> (Span, usize) {
            match found {
                Some(span) => {
                    let row = labels
                        .iter()
                        .position(|t| *t == begin)
                        .expect("span implies the begin label");
                    (span, row)
                }
                None => {
                    let n = labels.len() - 2;
                    let col = begin.index();
                    let mut best_row = 1usize;
                    let mut best = f64::NEG_INFINITY;
                    for row in 1..=n {
                        let score = emissions.at2(row, col);
                        if score > best {
                            best = score;
                            best_row = row;
                        }
                    }
                    let word = submap
                        .word_of_subtoken(best_row - 1)
                        .expect("row within sentence");
                    (Span::new(word, word), best_row)
                }
            }
        };
        let (head_span, head_row) = resolve(head, Tag::BHead);
        let (tail_span, tail_row) = resolve(tail, Tag::BTail);
        (head_span, tail_span, head_row, tail_row)
    }

    fn decode_labels(&self, emissions: &Tensor, transitions: &Tensor) -> Vec<Tag> {
        let indices: Vec<usize> = match self.cfg.tagger {
            TaggerKind::Crf => viterbi(emissions, transitions).expect("finite scores").0,
            TaggerKind::Softmax => (0..emissions.rows())
                .map(|row| {
                    let scores = emissions.row(row);
                    let mut best = 0usize;
                    for (j, &s) in scores.iter().enumerate() {
                        if s > scores[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect(),
        };
        indices
            .into_iter()
            .map(|i| Tag::from_index(i).expect("valid label index"))
            .collect()
    }

    /// Inference over one episode: encode, decode spans (with the
    /// fallback rule), build prototypes from gold support spans, and
    /// classify each query by relation-prototype distance.
    pub fn predict_episode(&self, episode: &Episode) -> Result<Vec<PredictionTriple>, MpeError> {
        let mut tape = Tape::new();
        let mut mode = EncodeMode::Eval;
        let w_r = tape.param(&self.params, "w_r")?;
        let proj = tape.param(&self.params, "crf.proj")?;
        let trans_param = tape.param(&self.params, "crf.trans")?;
        let bmask = tape.constant(boundary_mask())?;
        let trans = tape.add(trans_param, bmask)?;
        let trans_values = tape.value(trans).clone();

        let mut support_reps: Vec<Vec<SpanRep>> = Vec::with_capacity(episode.roster.len());
        for class in &episode.support {
            let mut class_reps = Vec::with_capacity(class.len());
            for inst in class {
                let prepared = self.prepare(inst)?;
                let emb = self.embed(&mut tape, &prepared, &mut mode)?;
                class_reps.push(extract_span_reps(
                    &mut tape,
                    emb,
                    prepared.head_row,
                    prepared.tail_row,
                )?);
            }
            support_reps.push(class_reps);
        }
        let mut mean_protos = Vec::with_capacity(support_reps.len());
        for class_reps in &support_reps {
            mean_protos.push(mean_prototypes(&mut tape, class_reps)?);
        }

        let mut out = Vec::with_capacity(episode.query.len());
        for inst in &episode.query {
            let prepared = self.prepare(inst)?;
            let emb = self.embed(&mut tape, &prepared, &mut mode)?;
            let emissions = tape.matmul(emb, proj)?;
            let e_values = tape.value(emissions).clone();
            let labels = self.decode_labels(&e_values, &trans_values);
            let (head_span, tail_span, head_row, tail_row) =
                Self::resolve_spans(&labels, &prepared.submap, &e_values);
            let rep = extract_span_reps(&mut tape, emb, head_row, tail_row)?;

            let class_protos: Vec<ClassProtos> = if self.cfg.attention {
                let mut row = Vec::with_capacity(support_reps.len());
                for class_reps in &support_reps {
                    row.push(attentive_prototypes(&mut tape, class_reps, rep.sent)?);
                }
                row
            } else {
                mean_protos.clone()
            };
            let mut proto_values = Vec::with_capacity(class_protos.len());
            for protos in &class_protos {
                let rel = self.relation_proto(&mut tape, protos, w_r)?;
                proto_values.push(tape.value(rel).clone());
            }
            let query_rel = self.relation_rep(&mut tape, &rep, w_r)?;
            let query_values = tape.value(query_rel).clone();
            let (best, distances) = nearest_class(&query_values, &proto_values);
            out.push(PredictionTriple {
                head_span,
                tail_span,
                relation: episode.roster[best].clone(),
                distances: episode.roster.iter().cloned().zip(distances).collect(),
            });
        }
        Ok(out)
    }

    /// Serialize: a JSON manifest line (config, vocabulary, parameter
    /// names and shapes), then each parameter as an MPET tensor blob in
    /// manifest order.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), MpeError> {
        let manifest = CheckpointManifest {
            format: CHECKPOINT_MAGIC.to_string(),
            config: self.cfg.clone(),
            vocab: self.vocab.tokens().to_vec(),
            params: self
                .params
                .iter()
                .map(|(_, p)| ParamInfo {
                    name: p.name.clone(),
                    dims: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&manifest)
            .map_err(|e| DataError::Invalid(format!("serialize manifest: {e}")))?;
        writeln!(w, "{line}").map_err(DataError::from)?;
        for (_, p) in self.params.iter() {
            write_tensor(w, &p.value)?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: impl AsRef<std::path::Path>) -> Result<(), MpeError> {
        let mut file = std::io::BufWriter::new(
            std::fs::File::create(path.as_ref()).map_err(DataError::from)?,
        );
        self.save(&mut file)
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<MpeModel, MpeError> {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(DataError::from)? == 0 {
            return Err(DataError::parse("checkpoint", "empty input").into());
        }
        let manifest: CheckpointManifest = serde_json::from_str(line.trim_end())
            .map_err(|e| DataError::parse("checkpoint manifest", e.to_string()))?;
        if manifest.format != CHECKPOINT_MAGIC {
            return Err(
                DataError::parse("checkpoint", format!("bad format `{}`", manifest.format))
                    .into(),
            );
        }
        if manifest.params.len() > 4096 {
            return Err(DataError::parse("checkpoint", "too many parameters").into());
        }
        let vocab = Vocab::from_tokens(manifest.vocab)?;
        if manifest.config.encoder.vocab_size != vocab.len() {
            return Err(DataError::validation(
                "checkpoint",
                format!(
                    "config vocab_size {} but vocabulary has {} tokens",
                    manifest.config.encoder.vocab_size,
                    vocab.len()
                ),
            )
            .into());
        }
        let mut params = ParamSet::new();
        for info in &manifest.params {
            let tensor = read_tensor(r)?;
            if tensor.shape() != info.dims.as_slice() {
                return Err(DataError::validation(
                    "checkpoint",
                    format!(
                        "parameter `{}` has shape {:?}, manifest says {:?}",
                        info.name,
                        tensor.shape(),
                        info.dims
                    ),
                )
                .into());
            }
            params.add(&info.name, tensor, true)?;
        }
        Ok(MpeModel {
            cfg: manifest.config,
            vocab,
            params,
            precomputed: None,
        })
    }

    pub fn load_from_path(path: impl AsRef<std::path::Path>) -> Result<MpeModel, MpeError> {
        let mut file = std::io::BufReader::new(
            std::fs::File::open(path.as_ref()).map_err(DataError::from)?,
        );
        Self::load(&mut file)
    }

    /// Attach a precomputed-embedding store to a loaded model.
    pub fn set_precomputed(&mut self, store: EmbeddingStore) -> Result<(), MpeError> {
        store.check_dim(self.cfg.encoder.width)?;
        self.precomputed = Some(store);
        Ok(())
    }

    /// A detached copy sharing config and vocabulary but with the given
    /// parameter values; used by gradient checks.
    pub fn with_params(&self, params: ParamSet) -> MpeModel {
        MpeModel {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params,
            precomputed: self.precomputed.clone(),
        }
    }
}

const CHECKPOINT_MAGIC: &str = "MPECKPT v1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: ModelConfig,
    vocab: Vec<String>,
    params: Vec<ParamInfo>,
}

/// Fuzzing entry point for the checkpoint format.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<MpeModel, MpeError> {
    MpeModel::load(&mut std::io::Cursor::new(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Corpus, SynthConfig};
    use crate::episode::{sample_episode, EpisodeConfig};
    use crate::numerics::grad_check;

    fn tiny_corpus() -> Corpus {
        generate_synthetic(
            &SynthConfig {
                relations: 4,
                per_relation: 8,
                vocab_size: 48,
                noise: 0.0,
            },
            7,
        )
        .unwrap()
    }

    fn tiny_model(corpus: &Corpus) -> MpeModel {
        let vocab = Vocab::build(&[corpus]);
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                width: 8,
                heads: 2,
                layers: 1,
                dropout: 0.0,
                max_len: 32,
                vocab_size: 0,
            },
            ..Default::default()
        };
        MpeModel::new(cfg, vocab, 13).unwrap()
    }

    fn tiny_episode(corpus: &Corpus) -> Episode {
        sample_episode(
            corpus,
            &EpisodeConfig {
                n_way: 2,
                k_shot: 2,
                r_query: 2,
                seed: 5,
            },
        )
        .unwrap()
    }

    #[test]
    fn episode_loss_is_finite_and_consistent() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus);
        let episode = tiny_episode(&corpus);
        let mut tape = Tape::new();
        let (_, bundle) = model
            .episode_loss_graph(&mut tape, &episode, &mut EncodeMode::Eval)
            .unwrap();
        bundle.validate(&model.cfg.weights).unwrap();
        assert!(bundle.crf > 0.0);
        assert!(bundle.entity > 0.0);
        assert!(bundle.relation > 0.0);
    }

    /// Gradient check of the assembled total over a 2-way-2-shot toy
    /// episode, exercising every loss component at once.
    #[test]
    fn full_loss_passes_grad_check_on_a_toy_episode() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus);
        let episode = tiny_episode(&corpus);
        let mut params = model.params.clone();
        let report = grad_check(&mut params, 1e-5, |tape, ps| {
            let probe = model.with_params(ps.clone());
            let (vars, _) = probe
                .episode_loss_graph(tape, &episode, &mut EncodeMode::Eval)
                .map_err(|e| match e {
                    MpeError::Numeric(n) => n,
                    other => NumericError::InvalidTensor(other.to_string()),
                })?;
            Ok(vars.total)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.per_param);
    }

    #[test]
    fn predictions_cover_every_query_with_roster_relations() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus);
        let episode = tiny_episode(&corpus);
        let preds = model.predict_episode(&episode).unwrap();
        assert_eq!(preds.len(), episode.query.len());
        for p in &preds {
            assert!(episode.roster.contains(&p.relation));
            assert_eq!(p.distances.len(), episode.roster.len());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus);
        let episode = tiny_episode(&corpus);
        let before = model.predict_episode(&episode).unwrap();

        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let loaded = parse_checkpoint(&buf).unwrap();
        let after = loaded.predict_episode(&episode).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn corrupt_checkpoint_is_an_error() {
        let corpus = tiny_corpus();
        let model = tiny_model(&corpus);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(parse_checkpoint(&buf).is_err());
        assert!(parse_checkpoint(b"garbage\n").is_err());
    }

    #[test]
    fn precomputed_embeddings_drive_the_loss_without_encoder_params() {
        use crate::encoder::{parse_embeddings, write_embeddings};
        let corpus = tiny_corpus();
        let vocab = Vocab::build(&[&corpus]);
        let episode = tiny_episode(&corpus);
        let width = 8;

        // fabricate an embedding store covering the episode
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for inst in episode.support.iter().flatten().chain(&episode.query) {
            let (ids, _) = vocab.encode_words(&inst.tokens);
            let key = instance_key(&inst.tokens);
            if seen.insert(key.clone()) {
                use rand::Rng;
                let rows = ids.len() + 2;
                let data = (0..rows * width)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                entries.push((key, Tensor::new(vec![rows, width], data).unwrap()));
            }
        }
        let mut buf = Vec::new();
        write_embeddings(&mut buf, width, &entries).unwrap();
        let store = parse_embeddings(&buf).unwrap();

        let cfg = ModelConfig {
            encoder: EncoderConfig {
                width,
                heads: 2,
                layers: 1,
                dropout: 0.0,
                max_len: 32,
                vocab_size: 0,
            },
            ..Default::default()
        };
        let mut model = MpeModel::with_precomputed(cfg, vocab, store, 3).unwrap();
        assert!(model.params.id_of("enc.tok_emb").is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = model.episode_backward(&episode, &mut rng).unwrap();
        assert!(bundle.total.is_finite());
        // gradients flow into the task parameters
        let grad_norm: f64 = model
            .params
            .by_name("w_r")
            .unwrap()
            .grad
            .data()
            .iter()
            .map(|g| g * g)
            .sum();
        assert!(grad_norm > 0.0);
    }
}
