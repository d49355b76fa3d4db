//! Hybrid prototypical learning: span representations, mean and
//! attention-weighted class prototypes, the translation-style knowledge
//! prototype `|head - tail| W_r`, distance-softmax losses for entities
//! and relations, and the prototype-aware regularizers.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::numerics::{Tape, Tensor, VarId};

/// Per-instance representation: the embedding rows of the first subtoken
/// of the head span, the first subtoken of the tail span, and the
/// sentence-start row.
#[derive(Debug, Clone, Copy)]
pub struct SpanRep {
    pub head: VarId,
    pub tail: VarId,
    pub sent: VarId,
}

/// Per-class prototype vectors in entity space.
#[derive(Debug, Clone, Copy)]
pub struct ClassProtos {
    pub head: VarId,
    pub tail: VarId,
    pub sent: VarId,
}

/// How prototypes of different classes are pushed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterMode {
    /// `1 - (1/N) sum_{i<j} cos(p_i, p_j)`, the literal published form.
    Paper,
    /// Mean over pairs of `(1 + cos) / 2`; 0 when prototypes oppose,
    /// 1 when they coincide. The default: it is minimized by separated
    /// prototypes, which is the stated intent of the regularizer.
    Repel,
}

/// Trade-off weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.75,
            beta: 0.5,
            gamma: 0.8,
            delta: 1.0,
        }
    }
}

/// Loss components of one episode and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub crf: f64,
    pub entity: f64,
    pub relation: f64,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
}

impl LossBundle {
    /// Verify finiteness and that the total is exactly the weighted
    /// combination of the components.
    pub fn validate(&self, weights: &LossWeights) -> Result<(), NumericError> {
        for (name, v) in [
            ("crf", self.crf),
            ("entity", self.entity),
            ("relation", self.relation),
            ("intra", self.intra),
            ("inter", self.inter),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                let _ = name;
                return Err(NumericError::NonFinite { op: "loss bundle" });
            }
        }
        let expect = assemble_total(self.crf, self.entity, self.relation, self.intra, self.inter, weights);
        if (expect - self.total).abs() > 1e-9 {
            return Err(NumericError::InvalidTensor(format!(
                "total {} disagrees with the weighted combination {expect}",
                self.total
            )));
        }
        Ok(())
    }
}

static ATTENTIVE_CALLS: AtomicU64 = AtomicU64::new(0);

/// How many times [`attentive_prototypes`] has run in this process; lets
/// tests assert that ablations really bypass attention.
pub fn attentive_invocations() -> u64 {
    ATTENTIVE_CALLS.load(Ordering::Relaxed)
}

/// Embedding rows for the head position, tail position, and row 0.
pub fn extract_span_reps(
    tape: &mut Tape,
    embedding: VarId,
    head_row: usize,
    tail_row: usize,
) -> Result<SpanRep, NumericError> {
    Ok(SpanRep {
        head: tape.select_row(embedding, head_row)?,
        tail: tape.select_row(embedding, tail_row)?,
        sent: tape.select_row(embedding, 0)?,
    })
}

/// Sort vector handles by their current values so the summation order is
/// a function of the set, not the input order; permuting the support set
/// then leaves prototypes bit-identical.
fn sorted_by_value(tape: &Tape, vars: &[VarId]) -> Vec<VarId> {
    let mut order: Vec<VarId> = vars.to_vec();
    order.sort_by(|a, b| {
        let (ta, tb) = (tape.value(*a), tape.value(*b));
        for (x, y) in ta.data().iter().zip(tb.data()) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

fn mean_of(tape: &mut Tape, vars: &[VarId]) -> Result<VarId, NumericError> {
    let sorted = sorted_by_value(tape, vars);
    let mut acc = sorted[0];
    for v in &sorted[1..] {
        acc = tape.add(acc, *v)?;
    }
    tape.scale(acc, 1.0 / sorted.len() as f64)
}

/// Plain averaged prototypes over the K support instances of one class.
pub fn mean_prototypes(tape: &mut Tape, reps: &[SpanRep]) -> Result<ClassProtos, NumericError> {
    if reps.is_empty() {
        return Err(NumericError::InvalidTensor(
            "prototype of an empty support set".into(),
        ));
    }
    let heads: Vec<VarId> = reps.iter().map(|r| r.head).collect();
    let tails: Vec<VarId> = reps.iter().map(|r| r.tail).collect();
    let sents: Vec<VarId> = reps.iter().map(|r| r.sent).collect();
    Ok(ClassProtos {
        head: mean_of(tape, &heads)?,
        tail: mean_of(tape, &tails)?,
        sent: mean_of(tape, &sents)?,
    })
}

fn attention_pool(
    tape: &mut Tape,
    vectors: &[VarId],
    query: VarId,
) -> Result<VarId, NumericError> {
    let sorted = sorted_by_value(tape, vectors);
    let mut energies = Vec::with_capacity(sorted.len());
    for v in &sorted {
        energies.push(tape.dot(*v, query)?);
    }
    let logits = tape.concat_vec(&energies)?;
    let weights = tape.softmax(logits)?;
    let weight_row = tape.stack_rows(&[weights])?;
    let stacked = tape.stack_rows(&sorted)?;
    let pooled = tape.matmul(weight_row, stacked)?;
    tape.select_row(pooled, 0)
}

/// Attention-weighted prototypes: support vectors are weighted by the
/// softmax of their dot product with the query representation (the query
/// sentence vector), separately per role.
pub fn attentive_prototypes(
    tape: &mut Tape,
    reps: &[SpanRep],
    query_sent: VarId,
) -> Result<ClassProtos, NumericError> {
    if reps.is_empty() {
        return Err(NumericError::InvalidTensor(
            "prototype of an empty support set".into(),
        ));
    }
    ATTENTIVE_CALLS.fetch_add(1, Ordering::Relaxed);
    let heads: Vec<VarId> = reps.iter().map(|r| r.head).collect();
    let tails: Vec<VarId> = reps.iter().map(|r| r.tail).collect();
    let sents: Vec<VarId> = reps.iter().map(|r| r.sent).collect();
    Ok(ClassProtos {
        head: attention_pool(tape, &heads, query_sent)?,
        tail: attention_pool(tape, &tails, query_sent)?,
        sent: attention_pool(tape, &sents, query_sent)?,
    })
}

/// Knowledge prototype `|head - tail| W_r` (elementwise absolute value,
/// then the row vector times the relation matrix).
pub fn kg_prototype(
    tape: &mut Tape,
    head: VarId,
    tail: VarId,
    w_r: VarId,
) -> Result<VarId, NumericError> {
    let diff = tape.sub(head, tail)?;
    let magnitude = tape.abs(diff)?;
    let row = tape.stack_rows(&[magnitude])?;
    let projected = tape.matmul(row, w_r)?;
    tape.select_row(projected, 0)
}

/// Relation vector `[sent ; kg]`.
pub fn relation_vector(tape: &mut Tape, sent: VarId, kg: VarId) -> Result<VarId, NumericError> {
    tape.concat_vec(&[sent, kg])
}

/// Cross-entropy of the softmax over negative squared Euclidean
/// distances to the class vectors, with `gold` as the target class.
pub fn distance_nll(
    tape: &mut Tape,
    query: VarId,
    class_vectors: &[VarId],
    gold: usize,
) -> Result<VarId, NumericError> {
    if class_vectors.len() < 2 {
        return Err(NumericError::InvalidTensor(format!(
            "distance classification needs at least 2 classes, got {}",
            class_vectors.len()
        )));
    }
    if gold >= class_vectors.len() {
        return Err(NumericError::InvalidTensor(format!(
            "gold class {gold} outside the {} classes",
            class_vectors.len()
        )));
    }
    let mut logits = Vec::with_capacity(class_vectors.len());
    for c in class_vectors {
        let diff = tape.sub(query, *c)?;
        let d = tape.sq_norm(diff)?;
        logits.push(tape.neg(d)?);
    }
    let logit_vec = tape.concat_vec(&logits)?;
    let lse = tape.log_sum_exp(logit_vec)?;
    tape.sub(lse, logits[gold])
}

/// Entity loss: mean over queries and over the two roles of the
/// distance-softmax cross-entropy against head/tail prototypes.
/// `protos_per_query[q]` holds the N class prototypes used for query `q`
/// (identical entries in mean mode, query-conditioned in attention mode).
pub fn entity_loss(
    tape: &mut Tape,
    queries: &[(SpanRep, usize)],
    protos_per_query: &[Vec<ClassProtos>],
) -> Result<VarId, NumericError> {
    if queries.is_empty() || queries.len() != protos_per_query.len() {
        return Err(NumericError::InvalidTensor(
            "queries and per-query prototypes must align".into(),
        ));
    }
    let mut terms = Vec::with_capacity(queries.len() * 2);
    for ((rep, gold), protos) in queries.iter().zip(protos_per_query) {
        let heads: Vec<VarId> = protos.iter().map(|p| p.head).collect();
        let tails: Vec<VarId> = protos.iter().map(|p| p.tail).collect();
        terms.push(distance_nll(tape, rep.head, &heads, *gold)?);
        terms.push(distance_nll(tape, rep.tail, &tails, *gold)?);
    }
    let all = tape.concat_vec(&terms)?;
    tape.mean(all)
}

/// Relation loss: mean over queries of the distance-softmax
/// cross-entropy between the query relation vector and the class
/// relation prototypes (width `2 * d_b`).
pub fn relation_loss(
    tape: &mut Tape,
    queries: &[(VarId, usize)],
    protos_per_query: &[Vec<VarId>],
) -> Result<VarId, NumericError> {
    if queries.is_empty() || queries.len() != protos_per_query.len() {
        return Err(NumericError::InvalidTensor(
            "queries and per-query prototypes must align".into(),
        ));
    }
    let mut terms = Vec::with_capacity(queries.len());
    for ((rep, gold), protos) in queries.iter().zip(protos_per_query) {
        terms.push(distance_nll(tape, *rep, protos, *gold)?);
    }
    let all = tape.concat_vec(&terms)?;
    tape.mean(all)
}

/// Squared distances from a value-space query to class vectors, plus the
/// argmin class: the evaluation-path counterpart of [`relation_loss`].
pub fn nearest_class(query: &Tensor, class_vectors: &[Tensor]) -> (usize, Vec<f64>) {
    let distances: Vec<f64> = class_vectors
        .iter()
        .map(|c| {
            query
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    let best = distances
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .unwrap_or(0);
    (best, distances)
}

/// Pull support instances toward their class prototype:
/// `(1/(N K)) sum_i sum_k ||x_i^k - p_i||^2`.
pub fn intra_loss(
    tape: &mut Tape,
    instances_per_class: &[Vec<VarId>],
    class_protos: &[VarId],
) -> Result<VarId, NumericError> {
    if instances_per_class.len() != class_protos.len() || class_protos.is_empty() {
        return Err(NumericError::InvalidTensor(
            "classes and prototypes must align".into(),
        ));
    }
    let mut terms = Vec::new();
    for (instances, proto) in instances_per_class.iter().zip(class_protos) {
        for x in instances {
            let diff = tape.sub(*x, *proto)?;
            terms.push(tape.sq_norm(diff)?);
        }
    }
    if terms.is_empty() {
        return Err(NumericError::InvalidTensor("no support instances".into()));
    }
    let all = tape.concat_vec(&terms)?;
    tape.mean(all)
}

fn cosine(tape: &mut Tape, a: VarId, b: VarId) -> Result<Option<VarId>, NumericError> {
    let na: f64 = tape.value(a).data().iter().map(|x| x * x).sum();
    let nb: f64 = tape.value(b).data().iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        // cosine against a zero prototype is defined as 0
        return Ok(None);
    }
    let d = tape.dot(a, b)?;
    let sa = tape.sq_norm(a)?;
    let sb = tape.sq_norm(b)?;
    let ra = tape.sqrt(sa)?;
    let rb = tape.sqrt(sb)?;
    let denom = tape.mul(ra, rb)?;
    Ok(Some(tape.div(d, denom)?))
}

/// Push class prototypes apart via pairwise cosine similarity.
pub fn inter_loss(
    tape: &mut Tape,
    protos: &[VarId],
    mode: InterMode,
) -> Result<VarId, NumericError> {
    let n = protos.len();
    if n < 2 {
        return Err(NumericError::InvalidTensor(format!(
            "inter loss needs at least 2 prototypes, got {n}"
        )));
    }
    let mut cos_terms: Vec<VarId> = Vec::new();
    let mut n_pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            n_pairs += 1;
            if let Some(c) = cosine(tape, protos[i], protos[j])? {
                cos_terms.push(c);
            }
        }
    }
    let cos_sum = if cos_terms.is_empty() {
        tape.scalar(0.0)?
    } else {
        let stacked = tape.concat_vec(&cos_terms)?;
        tape.sum(stacked)?
    };
    match mode {
        InterMode::Paper => {
            // 1 - (1/N) * sum of pairwise cosines
            let scaled = tape.scale(cos_sum, -1.0 / n as f64)?;
            tape.add_const(scaled, 1.0)
        }
        InterMode::Repel => {
            // mean over pairs of (1 + cos) / 2
            let scaled = tape.scale(cos_sum, 0.5 / n_pairs as f64)?;
            tape.add_const(scaled, 0.5)
        }
    }
}

/// Weighted total on the tape:
/// `crf + beta * entity + gamma * relation + delta * (intra + alpha * inter)`.
pub fn assemble_losses(
    tape: &mut Tape,
    crf: VarId,
    entity: VarId,
    relation: VarId,
    intra: VarId,
    inter: VarId,
    weights: &LossWeights,
) -> Result<VarId, NumericError> {
    for v in [crf, entity, relation, intra, inter] {
        if !tape.value(v).is_scalar() {
            return Err(NumericError::InvalidTensor(
                "loss components must be scalars".into(),
            ));
        }
    }
    let entity_w = tape.scale(entity, weights.beta)?;
    let relation_w = tape.scale(relation, weights.gamma)?;
    let inter_w = tape.scale(inter, weights.alpha)?;
    let regular = tape.add(intra, inter_w)?;
    let regular_w = tape.scale(regular, weights.delta)?;
    let s1 = tape.add(crf, entity_w)?;
    let s2 = tape.add(s1, relation_w)?;
    tape.add(s2, regular_w)
}

/// The same weighted total in plain arithmetic (identical operation
/// order to [`assemble_losses`]).
pub fn assemble_total(
    crf: f64,
    entity: f64,
    relation: f64,
    intra: f64,
    inter: f64,
    weights: &LossWeights,
) -> f64 {
    ((crf + entity * weights.beta) + relation * weights.gamma)
        + (intra + inter * weights.alpha) * weights.delta
}
