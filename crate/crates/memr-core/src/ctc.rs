//! Connectionist temporal classification in the log domain.
//!
//! The likelihood is a forward (α) recursion over the blank-extended label
//! sequence, built from differentiable tape ops so gradients come from the
//! reverse sweep — there is no hand-coded β pass. A plain-f64 twin of the
//! recursion serves the decoders, an exact path-enumeration oracle serves
//! the tests, and a prefix-probability scorer makes CTC usable inside
//! label-synchronous beam search.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{log_sum_exp, lse2, Tensor};
use crate::vocab::{Letter, Vocabulary, BLANK};

/// Merge adjacent repeats, then delete blanks.
pub fn greedy_collapse(path: &[usize], vocab: &Vocabulary) -> Vec<Letter> {
    let mut out = Vec::new();
    let mut prev = None;
    for &class in path {
        if prev != Some(class) {
            if let Some(letter) = vocab.letter_of_ctc_class(class) {
                out.push(letter);
            }
        }
        prev = Some(class);
    }
    out
}

/// Frames needed to emit `labels`: one per letter plus one separating blank
/// per adjacent repeat.
pub fn min_frames(labels: &[Letter]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Blank-extended label sequence as CTC class indices:
/// `blank, c1, blank, c2, ..., cL, blank`.
fn extended_classes(labels: &[Letter], vocab: &Vocabulary) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(vocab.ctc_class(l));
        ext.push(BLANK);
    }
    ext
}

/// Differentiable CTC log-likelihood on the tape.
#[derive(Debug, Clone, Copy)]
pub struct CtcScore {
    /// Scalar node; `-inf` when the instance is infeasible.
    pub score: TensorRef,
    /// False when the label sequence cannot fit in the frame count. The
    /// training loop skips such utterances instead of erroring.
    pub feasible: bool,
}

/// log p(labels | frames) marginalized over all alignments whose collapse
/// equals `labels`. `log_post` is `T'×(|U|+1)` with blank at column 0; rows
/// are assumed log-normalized.
pub fn ctc_log_likelihood(
    tape: &mut Tape,
    log_post: TensorRef,
    labels: &[Letter],
    vocab: &Vocabulary,
) -> Result<CtcScore> {
    vocab.check_all(labels)?;
    let shape = tape.shape(log_post);
    if shape.len() != 2 || shape[1] != vocab.n_ctc_classes() {
        return Err(Error::ShapeMismatch {
            op: "ctc_log_likelihood",
            lhs: shape.to_vec(),
            rhs: vec![0, vocab.n_ctc_classes()],
        });
    }
    let t_len = shape[0];
    if t_len < min_frames(labels) {
        let score = tape.constant_scalar(f64::NEG_INFINITY);
        return Ok(CtcScore {
            score,
            feasible: false,
        });
    }

    let ext = extended_classes(labels, vocab);
    let s_len = ext.len();
    let neg_inf = tape.constant_scalar(f64::NEG_INFINITY);

    // Band of states reachable from the start and able to reach the end.
    let band = |t: usize| -> (usize, usize) {
        let hi = (2 * t + 1).min(s_len - 1);
        let lo = (s_len as isize - 2 * (t_len - t) as isize).max(0) as usize;
        (lo, hi)
    };

    let mut alpha = vec![neg_inf; s_len];
    {
        let (lo, hi) = band(0);
        for s in lo..=hi.min(1) {
            let lp = tape.select(log_post, 0, ext[s])?;
            alpha[s] = lp;
        }
    }
    for t in 1..t_len {
        let mut next = vec![neg_inf; s_len];
        let (lo, hi) = band(t);
        for s in lo..=hi {
            let mut terms = vec![alpha[s]];
            if s >= 1 {
                terms.push(alpha[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                terms.push(alpha[s - 2]);
            }
            let reach = tape.logsumexp(&terms)?;
            let lp = tape.select(log_post, t, ext[s])?;
            next[s] = tape.add(reach, lp)?;
        }
        alpha = next;
    }

    let score = if s_len >= 2 {
        tape.logsumexp(&[alpha[s_len - 1], alpha[s_len - 2]])?
    } else {
        alpha[0]
    };
    Ok(CtcScore {
        score,
        feasible: true,
    })
}

/// Plain-f64 twin of [`ctc_log_likelihood`] for the decoders. Returns the
/// log-likelihood and the feasibility flag.
pub fn ctc_log_likelihood_plain(
    log_post: &Tensor,
    labels: &[Letter],
    vocab: &Vocabulary,
) -> Result<CtcOutcome> {
    vocab.check_all(labels)?;
    if log_post.shape.len() != 2 || log_post.cols() != vocab.n_ctc_classes() {
        return Err(Error::ShapeMismatch {
            op: "ctc_log_likelihood",
            lhs: log_post.shape.clone(),
            rhs: vec![0, vocab.n_ctc_classes()],
        });
    }
    let t_len = log_post.rows();
    if t_len < min_frames(labels) {
        return Ok(CtcOutcome {
            log_prob: f64::NEG_INFINITY,
            feasible: false,
        });
    }
    let ext = extended_classes(labels, vocab);
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = log_post.at(0, BLANK);
    if s_len > 1 {
        alpha[1] = log_post.at(0, ext[1]);
    }
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; s_len];
        for s in 0..s_len {
            let mut reach = alpha[s];
            if s >= 1 {
                reach = lse2(reach, alpha[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                reach = lse2(reach, alpha[s - 2]);
            }
            next[s] = reach + log_post.at(t, ext[s]);
        }
        alpha = next;
    }
    let log_prob = if s_len >= 2 {
        lse2(alpha[s_len - 1], alpha[s_len - 2])
    } else {
        alpha[0]
    };
    Ok(CtcOutcome {
        log_prob,
        feasible: true,
    })
}

/// A CTC log-likelihood with its feasibility flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtcOutcome {
    pub log_prob: f64,
    pub feasible: bool,
}

/// Per-encoder CTC combination: the average of the two log-likelihoods.
/// Infeasibility propagates.
pub fn joint_ctc_log_likelihood(a: CtcOutcome, b: CtcOutcome) -> CtcOutcome {
    CtcOutcome {
        log_prob: (a.log_prob + b.log_prob) / 2.0,
        feasible: a.feasible && b.feasible,
    }
}

const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Exact CTC likelihood by enumerating every alignment path. The oracle
/// that defines truth for [`ctc_log_likelihood`].
pub fn ctc_brute_force(
    log_post: &Tensor,
    labels: &[Letter],
    vocab: &Vocabulary,
) -> Result<f64> {
    vocab.check_all(labels)?;
    let t_len = log_post.rows();
    let classes = vocab.n_ctc_classes();
    if (classes as f64).powi(t_len as i32) > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "{classes}^{t_len} alignment paths exceed the brute-force budget"
        )));
    }
    let mut path = vec![0usize; t_len];
    let mut matched = Vec::new();
    loop {
        if greedy_collapse(&path, vocab) == labels {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &class)| log_post.at(t, class))
                .sum();
            matched.push(lp);
        }
        // odometer over class indices
        let mut pos = 0;
        loop {
            if pos == t_len {
                return Ok(log_sum_exp(&matched));
            }
            path[pos] += 1;
            if path[pos] < classes {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Running prefix-probability state for one hypothesis prefix.
///
/// `r_nonblank[t]`/`r_blank[t]` hold the log-probability that frames `1..=t`
/// collapse to exactly the prefix with the path ending in the prefix's last
/// letter / in blank. `log_psi` is the log prefix probability (mass of all
/// alignments whose collapse extends the prefix), and `len` is the frame
/// cursor: fewer than `len` frames cannot realize the prefix.
#[derive(Debug, Clone)]
pub struct PrefixScoreState {
    r_nonblank: Vec<f64>,
    r_blank: Vec<f64>,
    last: Option<Letter>,
    log_psi: f64,
    len: usize,
}

impl PrefixScoreState {
    /// State of the empty prefix.
    pub fn init(log_post: &Tensor) -> Self {
        let t_len = log_post.rows();
        let mut r_blank = vec![0.0; t_len + 1];
        for t in 1..=t_len {
            r_blank[t] = r_blank[t - 1] + log_post.at(t - 1, BLANK);
        }
        PrefixScoreState {
            r_nonblank: vec![f64::NEG_INFINITY; t_len + 1],
            r_blank,
            last: None,
            log_psi: 0.0,
            len: 0,
        }
    }

    /// log prefix probability of the current prefix.
    pub fn log_psi(&self) -> f64 {
        self.log_psi
    }
}

/// Extend a prefix by one letter. Returns the new state and the incremental
/// score log Ψ(prefix·letter) − log Ψ(prefix).
pub fn ctc_prefix_score_extend(
    state: &PrefixScoreState,
    letter: Letter,
    log_post: &Tensor,
    vocab: &Vocabulary,
) -> Result<(PrefixScoreState, f64)> {
    vocab.check(letter)?;
    let t_len = log_post.rows();
    let class = vocab.ctc_class(letter);
    let mut r_nonblank = vec![f64::NEG_INFINITY; t_len + 1];
    let mut r_blank = vec![f64::NEG_INFINITY; t_len + 1];
    let mut log_psi = f64::NEG_INFINITY;
    let start = state.len.max(1);
    for t in start..=t_len {
        let phi = if state.last == Some(letter) {
            state.r_blank[t - 1]
        } else {
            lse2(state.r_blank[t - 1], state.r_nonblank[t - 1])
        };
        let lp_letter = log_post.at(t - 1, class);
        r_nonblank[t] = lse2(r_nonblank[t - 1], phi) + lp_letter;
        r_blank[t] = lse2(r_blank[t - 1], r_nonblank[t - 1]) + log_post.at(t - 1, BLANK);
        log_psi = lse2(log_psi, phi + lp_letter);
    }
    // once the prefix mass is zero it stays zero; avoid -inf − -inf
    let increment = if log_psi == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        log_psi - state.log_psi
    };
    Ok((
        PrefixScoreState {
            r_nonblank,
            r_blank,
            last: Some(letter),
            log_psi,
            len: state.len + 1,
        },
        increment,
    ))
}

/// Close a prefix as a complete sequence: the incremental score of ending
/// here, log p_ctc(prefix) − log Ψ(prefix). Summing all extension
/// increments plus this closure reproduces the full-sequence CTC
/// log-likelihood.
pub fn ctc_prefix_score_close(state: &PrefixScoreState) -> f64 {
    let t_len = state.r_blank.len() - 1;
    let full = lse2(state.r_nonblank[t_len], state.r_blank[t_len]);
    if full == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        full - state.log_psi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random row-normalized log-posterior matrix.
    pub(crate) fn random_log_post<R: Rng>(rng: &mut R, t_len: usize, classes: usize) -> Tensor {
        let mut m = Tensor::zeros(&[t_len, classes]);
        for t in 0..t_len {
            let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = log_sum_exp(&row);
            for (c, &v) in row.iter().enumerate() {
                m.data[t * classes + c] = v - lse;
            }
        }
        m
    }

    fn tape_ctc(log_post: &Tensor, labels: &[Letter], vocab: &Vocabulary) -> (f64, bool) {
        let mut tape = Tape::new();
        let lp = tape.leaf_from(log_post);
        let score = ctc_log_likelihood(&mut tape, lp, labels, vocab).unwrap();
        (tape.scalar_value(score.score), score.feasible)
    }

    #[test]
    fn collapse_definition() {
        let v = Vocabulary::new(2).unwrap();
        let a = v.ctc_class(Letter(0));
        assert_eq!(
            greedy_collapse(&[BLANK, a, a, BLANK, a], &v),
            vec![Letter(0), Letter(0)]
        );
        assert_eq!(greedy_collapse(&[BLANK, BLANK, BLANK], &v), vec![]);
        assert_eq!(
            greedy_collapse(&[a, BLANK, a], &v),
            vec![Letter(0), Letter(0)]
        );
        assert_eq!(greedy_collapse(&[a, a], &v), vec![Letter(0)]);
    }

    #[test]
    fn single_frame_single_path() {
        let v = Vocabulary::new(1).unwrap();
        let lp = Tensor::new(vec![1, 2], vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let (val, feasible) = tape_ctc(&lp, &[Letter(0)], &v);
        assert!(feasible);
        assert!((val - 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_labels_all_blank_path() {
        let v = Vocabulary::new(1).unwrap();
        let half = 0.5f64.ln();
        let lp = Tensor::new(vec![2, 2], vec![half, half, half, half]).unwrap();
        let (val, feasible) = tape_ctc(&lp, &[], &v);
        assert!(feasible);
        assert!((val - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_posterior_three_frames_matches_enumeration() {
        // frozen: 6 of the 27 paths collapse to [a], each (1/3)^3, so
        // log(6/27) = log(2/9); mpmath gives -1.5040773967762740734
        let v = Vocabulary::new(2).unwrap();
        let third = (1.0f64 / 3.0).ln();
        let lp = Tensor::new(vec![3, 3], vec![third; 9]).unwrap();
        let labels = [Letter(0)];
        let (val, _) = tape_ctc(&lp, &labels, &v);
        assert!((val - (-1.5040773967762740734)).abs() < 1e-14, "{val}");
        let brute = ctc_brute_force(&lp, &labels, &v).unwrap();
        assert!((val - brute).abs() < 1e-12);
    }

    #[test]
    fn infeasible_labels_flagged_not_error() {
        let v = Vocabulary::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = random_log_post(&mut rng, 2, 3);
        let labels = [Letter(0), Letter(1), Letter(0)];
        let (val, feasible) = tape_ctc(&lp, &labels, &v);
        assert!(!feasible);
        assert_eq!(val, f64::NEG_INFINITY);
        // enumeration agrees that no path exists
        assert_eq!(
            ctc_brute_force(&lp, &labels, &v).unwrap(),
            f64::NEG_INFINITY
        );
        // adjacent repeats need a separating blank
        assert!(min_frames(&[Letter(0), Letter(0)]) == 3);
    }

    #[test]
    fn trellis_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..40 {
            let n_letters = rng.gen_range(1..=3);
            let v = Vocabulary::new(n_letters).unwrap();
            let t_len = rng.gen_range(1..=6);
            let l_len = rng.gen_range(0..=3.min(t_len));
            let labels: Vec<Letter> =
                (0..l_len).map(|_| Letter(rng.gen_range(0..n_letters))).collect();
            let lp = random_log_post(&mut rng, t_len, v.n_ctc_classes());
            let brute = ctc_brute_force(&lp, &labels, &v).unwrap();
            let (trellis, _) = tape_ctc(&lp, &labels, &v);
            let plain = ctc_log_likelihood_plain(&lp, &labels, &v).unwrap().log_prob;
            if brute.is_finite() {
                assert!((trellis - brute).abs() < 1e-10, "{trellis} vs {brute}");
                assert!((plain - brute).abs() < 1e-10);
                checked += 1;
            } else {
                assert_eq!(trellis, f64::NEG_INFINITY);
                assert_eq!(plain, f64::NEG_INFINITY);
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn likelihoods_over_all_label_sequences_sum_to_one() {
        let v = Vocabulary::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lp = random_log_post(&mut rng, 3, 3);
        let mut total = 0.0;
        for len in 0..=3usize {
            let mut seq = vec![0usize; len];
            loop {
                let labels: Vec<Letter> = seq.iter().map(|&i| Letter(i)).collect();
                let out = ctc_log_likelihood_plain(&lp, &labels, &v).unwrap();
                total += out.log_prob.exp();
                let mut pos = 0;
                loop {
                    if pos == len {
                        break;
                    }
                    seq[pos] += 1;
                    if seq[pos] < 2 {
                        break;
                    }
                    seq[pos] = 0;
                    pos += 1;
                }
                if pos == len {
                    break;
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-8, "sum = {total}");
    }

    #[test]
    fn joint_ctc_is_the_average() {
        let a = CtcOutcome {
            log_prob: 0.4f64.ln(),
            feasible: true,
        };
        let b = CtcOutcome {
            log_prob: 0.1f64.ln(),
            feasible: true,
        };
        let j = joint_ctc_log_likelihood(a, b);
        assert!((j.log_prob - (0.4f64.ln() + 0.1f64.ln()) / 2.0).abs() < 1e-15);
        // average of equals is exact
        let same = joint_ctc_log_likelihood(a, a);
        assert_eq!(same.log_prob, a.log_prob);
        // infeasibility propagates
        let flagged = CtcOutcome {
            log_prob: f64::NEG_INFINITY,
            feasible: false,
        };
        assert!(!joint_ctc_log_likelihood(a, flagged).feasible);
    }

    #[test]
    fn prefix_closure_reproduces_full_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let n_letters = rng.gen_range(1..=3);
            let v = Vocabulary::new(n_letters).unwrap();
            let t_len = rng.gen_range(1..=7);
            let l_len = rng.gen_range(0..=3.min(t_len));
            let labels: Vec<Letter> =
                (0..l_len).map(|_| Letter(rng.gen_range(0..n_letters))).collect();
            let lp = random_log_post(&mut rng, t_len, v.n_ctc_classes());

            let mut state = PrefixScoreState::init(&lp);
            let mut total = 0.0;
            for &l in &labels {
                let (next, inc) = ctc_prefix_score_extend(&state, l, &lp, &v).unwrap();
                state = next;
                total += inc;
            }
            total += ctc_prefix_score_close(&state);

            let full = ctc_log_likelihood_plain(&lp, &labels, &v).unwrap().log_prob;
            if full.is_finite() {
                assert!((total - full).abs() < 1e-8, "{total} vs {full}");
            } else {
                assert_eq!(total, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn single_frame_prefix_extension_scores_the_letter() {
        let v = Vocabulary::new(2).unwrap();
        let lp = Tensor::new(
            vec![1, 3],
            vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()],
        )
        .unwrap();
        let state = PrefixScoreState::init(&lp);
        let (state, inc) = ctc_prefix_score_extend(&state, Letter(0), &lp, &v).unwrap();
        assert!((inc - 0.5f64.ln()).abs() < 1e-15);
        // closure adds nothing: the letter had to occupy the only frame
        assert!(ctc_prefix_score_close(&state).abs() < 1e-15);
    }

    #[test]
    fn zero_posterior_letter_gives_neg_infinite_increment() {
        let v = Vocabulary::new(2).unwrap();
        let mut lp = Tensor::zeros(&[3, 3]);
        for t in 0..3 {
            lp.data[t * 3] = 0.5f64.ln();
            lp.data[t * 3 + 1] = f64::NEG_INFINITY;
            lp.data[t * 3 + 2] = 0.5f64.ln();
        }
        let state = PrefixScoreState::init(&lp);
        let (_, inc) = ctc_prefix_score_extend(&state, Letter(0), &lp, &v).unwrap();
        assert_eq!(inc, f64::NEG_INFINITY);
    }

    #[test]
    fn unknown_letter_is_a_vocabulary_error() {
        let v = Vocabulary::new(2).unwrap();
        let lp = Tensor::zeros(&[2, 3]);
        let state = PrefixScoreState::init(&lp);
        assert!(matches!(
            ctc_prefix_score_extend(&state, Letter(5), &lp, &v),
            Err(Error::Vocabulary { .. })
        ));
    }

    #[test]
    fn brute_force_size_guard() {
        let v = Vocabulary::new(3).unwrap();
        let lp = Tensor::zeros(&[15, 4]);
        assert!(matches!(
            ctc_brute_force(&lp, &[], &v),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let v = Vocabulary::new(2).unwrap();
        let lp = random_log_post(&mut rng, 4, 3);
        let labels = vec![Letter(0), Letter(1)];
        let err = crate::tape::finite_diff_check(
            |tape, lpr| {
                let s = ctc_log_likelihood(tape, lpr, &labels, &v)?;
                Ok(tape.neg(s.score))
            },
            &lp,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }
}
