//! Linear-chain CRF over emission and transition scores.
//!
//! A labeling `y` of `P` positions with `L` labels scores
//! `sum_i E[i, y_i] + sum_j T[y_j, y_{j+1}]`; the probability of a
//! labeling normalizes over all `L^P` paths, computed exactly by the
//! forward algorithm in log space. Scoring and the negative
//! log-likelihood run on the tape (differentiable); Viterbi decoding is a
//! plain dynamic program over values.

use crate::corpus::Tag;
use crate::error::NumericError;
use crate::numerics::{Tape, Tensor, VarId};

/// Score used to forbid a transition without leaving log space.
pub const MASK_SCORE: f64 = -1e4;

fn check_shapes(e: &Tensor, t: &Tensor) -> Result<(usize, usize), NumericError> {
    if e.rank() != 2 || t.rank() != 2 || t.rows() != t.cols() || e.cols() != t.rows() {
        return Err(NumericError::ShapeMismatch {
            op: "crf",
            lhs: e.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    if e.rows() == 0 {
        return Err(NumericError::InvalidTensor("empty emission matrix".into()));
    }
    Ok((e.rows(), e.cols()))
}

/// `sum_i E[i, y_i] + sum_j T[y_j, y_{j+1}]` for one labeling.
pub fn path_score(
    tape: &mut Tape,
    emissions: VarId,
    transitions: VarId,
    labels: &[usize],
) -> Result<VarId, NumericError> {
    let (positions, n_labels) = check_shapes(tape.value(emissions), tape.value(transitions))?;
    if labels.len() != positions {
        return Err(NumericError::InvalidTensor(format!(
            "labeling of {} positions against {} emission rows",
            labels.len(),
            positions
        )));
    }
    if labels.iter().any(|&l| l >= n_labels) {
        return Err(NumericError::InvalidTensor(format!(
            "label index outside the {n_labels} labels"
        )));
    }
    let e_coords: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &l)| (i, l)).collect();
    let picked_e = tape.pick(emissions, &e_coords)?;
    let mut score = tape.sum(picked_e)?;
    if labels.len() > 1 {
        let t_coords: Vec<(usize, usize)> =
            labels.windows(2).map(|w| (w[0], w[1])).collect();
        let picked_t = tape.pick(transitions, &t_coords)?;
        let t_sum = tape.sum(picked_t)?;
        score = tape.add(score, t_sum)?;
    }
    Ok(score)
}

/// `log sum_y exp(score(y))` over all labelings, by the forward algorithm
/// in log space.
pub fn log_partition(
    tape: &mut Tape,
    emissions: VarId,
    transitions: VarId,
) -> Result<VarId, NumericError> {
    let (positions, _) = check_shapes(tape.value(emissions), tape.value(transitions))?;
    let mut alpha = tape.select_row(emissions, 0)?;
    for pos in 1..positions {
        // alpha'[j] = E[pos, j] + LSE_i(alpha[i] + T[i, j])
        let shifted = tape.add_to_cols(transitions, alpha)?;
        let reduced = tape.lse_cols(shifted)?;
        let e_row = tape.select_row(emissions, pos)?;
        alpha = tape.add(reduced, e_row)?;
    }
    tape.log_sum_exp(alpha)
}

/// CRF negative log-likelihood of the gold labeling:
/// `log_partition - path_score(gold)`. Non-negative.
pub fn crf_nll(
    tape: &mut Tape,
    emissions: VarId,
    transitions: VarId,
    gold: &[usize],
) -> Result<VarId, NumericError> {
    let log_z = log_partition(tape, emissions, transitions)?;
    let gold_score = path_score(tape, emissions, transitions, gold)?;
    tape.sub(log_z, gold_score)
}

/// Highest-scoring labeling and its score. Ties break toward the lowest
/// label index at the latest position where candidates differ, which the
/// backward reconstruction realizes by preferring the smallest
/// predecessor (and final label) among equal scores.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<(Vec<usize>, f64), NumericError> {
    let (positions, n_labels) = check_shapes(emissions, transitions)?;
    let mut delta: Vec<f64> = emissions.row(0).to_vec();
    let mut backpointers: Vec<Vec<usize>> = Vec::with_capacity(positions.saturating_sub(1));
    for pos in 1..positions {
        let mut next = vec![f64::NEG_INFINITY; n_labels];
        let mut bp = vec![0usize; n_labels];
        for j in 0..n_labels {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for (i, &d) in delta.iter().enumerate() {
                let cand = d + transitions.at2(i, j);
                if cand > best {
                    best = cand;
                    best_i = i;
                }
            }
            next[j] = best + emissions.at2(pos, j);
            bp[j] = best_i;
        }
        delta = next;
        backpointers.push(bp);
    }
    let mut best_label = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (j, &s) in delta.iter().enumerate() {
        if s > best_score {
            best_score = s;
            best_label = j;
        }
    }
    let mut path = vec![best_label];
    for bp in backpointers.iter().rev() {
        let prev = bp[*path.last().expect("non-empty path")];
        path.push(prev);
    }
    path.reverse();
    Ok((path, best_score))
}

/// Initial transition scores for the entity tag scheme: zero everywhere
/// except structurally impossible moves, which start at [`MASK_SCORE`]
/// but stay trainable (I- labels cannot open a run; X cannot be the
/// first subtoken).
pub fn initial_transitions() -> Tensor {
    let l = Tag::COUNT;
    let mut t = Tensor::zeros(&[l, l]);
    let blocked_into_ihead = [Tag::Start, Tag::Outside, Tag::BTail, Tag::ITail];
    let blocked_into_itail = [Tag::Start, Tag::Outside, Tag::BHead, Tag::IHead];
    for from in blocked_into_ihead {
        t.data_mut()[from.index() * l + Tag::IHead.index()] = MASK_SCORE;
    }
    for from in blocked_into_itail {
        t.data_mut()[from.index() * l + Tag::ITail.index()] = MASK_SCORE;
    }
    t.data_mut()[Tag::Start.index() * l + Tag::X.index()] = MASK_SCORE;
    t
}

/// Constant additive mask forbidding transitions into the start label
/// and out of the end label. Applied on top of the trainable transition
/// matrix, so these moves stay masked no matter what training does.
pub fn boundary_mask() -> Tensor {
    let l = Tag::COUNT;
    let mut t = Tensor::zeros(&[l, l]);
    for i in 0..l {
        t.data_mut()[i * l + Tag::Start.index()] = MASK_SCORE;
        t.data_mut()[Tag::End.index() * l + i] = MASK_SCORE;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    /// E = [[1,0],[0,1]], T[A][B] = 2 else 0: the two-position toy.
    fn toy(tape: &mut Tape) -> (VarId, VarId) {
        let e = tape
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let t = tape
            .constant(Tensor::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap())
            .unwrap();
        (e, t)
    }

    #[test]
    fn toy_path_scores() {
        let mut tape = Tape::new();
        let (e, t) = toy(&mut tape);
        let ab = path_score(&mut tape, e, t, &[0, 1]).unwrap();
        assert_eq!(tape.value(ab).item().unwrap(), 4.0);
        let ba = path_score(&mut tape, e, t, &[1, 0]).unwrap();
        assert_eq!(tape.value(ba).item().unwrap(), 0.0);
    }

    #[test]
    fn zero_scores_give_zero_for_every_path() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let t = tape.constant(Tensor::zeros(&[4, 4])).unwrap();
        for labels in [[0, 1, 2], [3, 3, 3], [2, 0, 1]] {
            let s = path_score(&mut tape, e, t, &labels).unwrap();
            assert_eq!(tape.value(s).item().unwrap(), 0.0);
        }
    }

    #[test]
    fn toy_log_partition_matches_the_four_paths() {
        let mut tape = Tape::new();
        let (e, t) = toy(&mut tape);
        let log_z = log_partition(&mut tape, e, t).unwrap();
        // paths AA=1, AB=4, BA=0, BB=1
        let expected = (1f64.exp() + 4f64.exp() + 1.0 + 1f64.exp()).ln();
        assert!((tape.value(log_z).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 4.1117).abs() < 1e-3);
    }

    #[test]
    fn single_position_two_zero_labels_gives_log_2() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let t = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let log_z = log_partition(&mut tape, e, t).unwrap();
        assert!((tape.value(log_z).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn toy_nll_of_the_best_path() {
        let mut tape = Tape::new();
        let (e, t) = toy(&mut tape);
        let nll = crf_nll(&mut tape, e, t, &[0, 1]).unwrap();
        let expected = (1f64.exp() + 4f64.exp() + 1.0 + 1f64.exp()).ln() - 4.0;
        assert!((tape.value(nll).item().unwrap() - expected).abs() < 1e-12);
        assert!(tape.value(nll).item().unwrap() >= 0.0);
    }

    #[test]
    fn nll_is_zero_when_every_other_path_is_masked() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        // only 0 -> 0 transitions survive
        let t = tape
            .constant(
                Tensor::from_rows(&[vec![0.0, MASK_SCORE], vec![MASK_SCORE, MASK_SCORE]])
                    .unwrap(),
            )
            .unwrap();
        // emissions also push label 1 far down
        let e_strong = tape
            .constant(
                Tensor::from_rows(&[
                    vec![0.0, MASK_SCORE],
                    vec![0.0, MASK_SCORE],
                    vec![0.0, MASK_SCORE],
                ])
                .unwrap(),
            )
            .unwrap();
        let _ = e;
        let nll = crf_nll(&mut tape, e_strong, t, &[0, 0, 0]).unwrap();
        assert!(tape.value(nll).item().unwrap() < 1e-8);
    }

    #[test]
    fn uniform_scores_over_four_paths_give_log_4() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let t = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let nll = crf_nll(&mut tape, e, t, &[0, 1]).unwrap();
        assert!((tape.value(nll).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn viterbi_on_the_toy() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let (path, score) = viterbi(&e, &t).unwrap();
        assert_eq!(path, vec![0, 1]);
        assert_eq!(score, 4.0);
    }

    #[test]
    fn viterbi_tie_break_takes_lowest_labels() {
        let e = Tensor::zeros(&[3, 3]);
        let t = Tensor::zeros(&[3, 3]);
        let (path, score) = viterbi(&e, &t).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn viterbi_follows_a_forced_path() {
        let mut e = Tensor::zeros(&[3, 2]);
        e.data_mut()[0] = 1.0; // position 0 prefers label 0
        let t = Tensor::from_rows(&[
            vec![MASK_SCORE, 0.0],
            vec![0.0, MASK_SCORE],
        ])
        .unwrap();
        let (path, _) = viterbi(&e, &t).unwrap();
        assert_eq!(path, vec![0, 1, 0]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let (e, t) = toy(&mut tape);
        assert!(path_score(&mut tape, e, t, &[0, 1, 0]).is_err());
        assert!(path_score(&mut tape, e, t, &[0, 7]).is_err());
    }

    #[test]
    fn crf_gradients_pass_grad_check() {
        use crate::numerics::{grad_check, ParamSet};
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut params = ParamSet::new();
        let e_data: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let t_data: Vec<f64> = (0..3 * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
        params
            .add("e", Tensor::new(vec![4, 3], e_data).unwrap(), true)
            .unwrap();
        params
            .add("t", Tensor::new(vec![3, 3], t_data).unwrap(), true)
            .unwrap();
        let report = grad_check(&mut params, 1e-5, |tape, ps| {
            let e = tape.param(ps, "e")?;
            let t = tape.param(ps, "t")?;
            crf_nll(tape, e, t, &[0, 2, 1, 1])
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{:?}", report.per_param);
    }
}
