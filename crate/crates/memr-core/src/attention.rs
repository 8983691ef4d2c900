//! Content-based attention, hierarchical stream fusion, and the recurrent
//! letter decoder.
//!
//! Per decoder step l the previous decoder state queries each encoder's
//! hidden vectors for a letter-wise context vector (additive/tanh scoring),
//! a second content attention over the two context vectors picks the stream
//! weights β, and the decoder LSTM consumes the previous letter embedding
//! concatenated with the fused context to produce a distribution over
//! letters plus eos.

use rand::Rng;

use crate::encoders::{EncoderOutputs, StreamMode};
use crate::error::{Error, Result};
use crate::lstm::{lstm_step, LstmCellParams, LstmState};
use crate::params::{linear, Bound, LinearParams, ParamId, ParamStore};
use crate::tape::{Tape, TensorRef};
use crate::vocab::{Letter, Vocabulary};

/// Additive content attention: e_t = vᵀ tanh(W q + V h_t + b).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub bias: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        att_dim: usize,
        rng: &mut R,
    ) -> Self {
        AttentionParams {
            w_query: store.register_init(
                format!("{prefix}.w_query"),
                &[query_dim, att_dim],
                query_dim,
                rng,
            ),
            w_key: store.register_init(
                format!("{prefix}.w_key"),
                &[key_dim, att_dim],
                key_dim,
                rng,
            ),
            bias: store.register_zeros(format!("{prefix}.bias"), &[1, att_dim]),
            v: store.register_init(format!("{prefix}.v"), &[att_dim, 1], att_dim, rng),
        }
    }
}

/// Attention over the rows of `h` with query `q_prev`.
/// Returns (weights `1×T'`, context `1×H`); the weights are a softmax, so
/// they are non-negative and sum to 1.
pub fn content_attention(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    q_prev: TensorRef,
    h: TensorRef,
) -> Result<(TensorRef, TensorRef)> {
    let rows = tape.shape(h)[0];
    if rows == 0 {
        return Err(Error::Contract(
            "content_attention: empty key matrix".into(),
        ));
    }
    let keys = tape.matmul(h, bound.get(p.w_key))?;
    let query = tape.matmul(q_prev, bound.get(p.w_query))?;
    let query = tape.add(query, bound.get(p.bias))?;
    let pre = tape.add_row(keys, query)?;
    let act = tape.tanh(pre);
    let scores = tape.matmul(act, bound.get(p.v))?;
    let scores = tape.transpose(scores)?;
    let weights = tape.softmax_rows(scores)?;
    let context = tape.matmul(weights, h)?;
    Ok((weights, context))
}

/// Stream-level fusion: content attention over the two-row matrix
/// `[r1; r2]`, giving β (`1×2`) and the convex combination β₁r1 + β₂r2.
pub fn han_fuse(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    q_prev: TensorRef,
    r1: TensorRef,
    r2: TensorRef,
) -> Result<(TensorRef, TensorRef)> {
    let stacked = tape.stack_rows(&[r1, r2])?;
    content_attention(tape, bound, p, q_prev, stacked)
}

/// Recurrent decoder: letter embedding, LSTM cell over
/// `[embedding, context]`, projection to letters + eos.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embed: ParamId,
    pub cell: LstmCellParams,
    pub out: LinearParams,
}

impl DecoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: &Vocabulary,
        embed_dim: usize,
        context_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let n_embed = vocab.n_output_classes();
        DecoderParams {
            embed: store.register_init(
                format!("{prefix}.embed"),
                &[n_embed, embed_dim],
                embed_dim,
                rng,
            ),
            cell: LstmCellParams::init(
                store,
                &format!("{prefix}.cell"),
                embed_dim + context_dim,
                hidden_dim,
                rng,
            ),
            out: LinearParams::init(
                store,
                &format!("{prefix}.out"),
                hidden_dim,
                vocab.n_output_classes(),
                rng,
            ),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.cell.hidden_dim
    }
}

/// Decoder recurrent state q_l. q_0 is the zero state.
pub type DecoderState = LstmState;

/// Previous-letter input to a decoder step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInput {
    /// Sentence start (shares the embedding row of eos).
    Sos,
    Letter(Letter),
}

impl DecoderInput {
    fn embedding_row(&self, vocab: &Vocabulary) -> Result<usize> {
        match *self {
            DecoderInput::Sos => Ok(vocab.boundary_class()),
            DecoderInput::Letter(l) => {
                vocab.check(l)?;
                Ok(vocab.output_class(l))
            }
        }
    }
}

/// One decoder step. Returns the next state and the log-distribution
/// (`1×(|U|+1)`, letters then eos); the row log-sum-exps to 0.
pub fn decoder_step(
    tape: &mut Tape,
    bound: &Bound,
    p: &DecoderParams,
    vocab: &Vocabulary,
    state: DecoderState,
    prev: DecoderInput,
    context: TensorRef,
) -> Result<(DecoderState, TensorRef)> {
    let row = prev.embedding_row(vocab)?;
    let emb = tape.row(bound.get(p.embed), row)?;
    let x = tape.concat_cols(emb, context)?;
    let next = lstm_step(tape, bound, &p.cell, x, state)?;
    let logits = linear(tape, bound, &p.out, next.h)?;
    let log_dist = tape.log_softmax_rows(logits)?;
    Ok((next, log_dist))
}

/// Attention parameters of both streams plus the fusion level.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub att1: AttentionParams,
    pub att2: AttentionParams,
    pub han: AttentionParams,
}

/// Attention weights produced while forming one fused context.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub frame1: Option<TensorRef>,
    pub frame2: Option<TensorRef>,
    pub stream: Option<TensorRef>,
}

/// Per-stream contexts fused by HAN; single-stream modes pass the lone
/// context through untouched.
pub fn fused_context(
    tape: &mut Tape,
    bound: &Bound,
    p: &FusionParams,
    q_prev: TensorRef,
    enc: &EncoderOutputs,
    mode: StreamMode,
) -> Result<(AttentionTrace, TensorRef)> {
    let missing = || Error::Contract("encoder stream required by mode is missing".into());
    match mode {
        StreamMode::Enc1Only => {
            let h1 = enc.h1.ok_or_else(missing)?;
            let (w1, r1) = content_attention(tape, bound, &p.att1, q_prev, h1)?;
            Ok((
                AttentionTrace {
                    frame1: Some(w1),
                    frame2: None,
                    stream: None,
                },
                r1,
            ))
        }
        StreamMode::Enc2Only => {
            let h2 = enc.h2.ok_or_else(missing)?;
            let (w2, r2) = content_attention(tape, bound, &p.att2, q_prev, h2)?;
            Ok((
                AttentionTrace {
                    frame1: None,
                    frame2: Some(w2),
                    stream: None,
                },
                r2,
            ))
        }
        StreamMode::Both => {
            let h1 = enc.h1.ok_or_else(missing)?;
            let h2 = enc.h2.ok_or_else(missing)?;
            let (w1, r1) = content_attention(tape, bound, &p.att1, q_prev, h1)?;
            let (w2, r2) = content_attention(tape, bound, &p.att2, q_prev, h2)?;
            let (beta, fused) = han_fuse(tape, bound, &p.han, q_prev, r1, r2)?;
            Ok((
                AttentionTrace {
                    frame1: Some(w1),
                    frame2: Some(w2),
                    stream: Some(beta),
                },
                fused,
            ))
        }
    }
}

/// Teacher-forced sequence log-likelihood:
/// Σ_l log p(c_l | c_{<l}, X) + log p(eos | C, X).
pub fn attention_sequence_log_likelihood(
    tape: &mut Tape,
    bound: &Bound,
    fusion: &FusionParams,
    dec: &DecoderParams,
    vocab: &Vocabulary,
    enc: &EncoderOutputs,
    labels: &[Letter],
    mode: StreamMode,
) -> Result<TensorRef> {
    vocab.check_all(labels)?;
    let mut state = DecoderState::zeros(tape, dec.hidden_dim());
    let mut total: Option<TensorRef> = None;
    for l in 0..=labels.len() {
        let (_, context) = fused_context(tape, bound, fusion, state.h, enc, mode)?;
        let prev = if l == 0 {
            DecoderInput::Sos
        } else {
            DecoderInput::Letter(labels[l - 1])
        };
        let (next, log_dist) = decoder_step(tape, bound, dec, vocab, state, prev, context)?;
        let target = if l == labels.len() {
            vocab.boundary_class()
        } else {
            vocab.output_class(labels[l])
        };
        let lp = tape.select(log_dist, 0, target)?;
        total = Some(match total {
            None => lp,
            Some(acc) => tape.add(acc, lp)?,
        });
        state = next;
    }
    Ok(total.expect("loop runs at least once"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_diff_check;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        fusion: FusionParams,
        dec: DecoderParams,
        vocab: Vocabulary,
        hidden: usize,
        dec_hidden: usize,
    }

    fn fixture(seed: u64, n_letters: usize, hidden: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab = Vocabulary::new(n_letters).unwrap();
        let dec_hidden = hidden + 1; // distinct from H to catch mixups
        let att_dim = 5;
        let fusion = FusionParams {
            att1: AttentionParams::init(&mut store, "att1", dec_hidden, hidden, att_dim, &mut rng),
            att2: AttentionParams::init(&mut store, "att2", dec_hidden, hidden, att_dim, &mut rng),
            han: AttentionParams::init(&mut store, "han", dec_hidden, hidden, att_dim, &mut rng),
        };
        let dec = DecoderParams::init(&mut store, "dec", &vocab, 4, hidden, dec_hidden, &mut rng);
        Fixture {
            store,
            fusion,
            dec,
            vocab,
            hidden,
            dec_hidden,
        }
    }

    #[test]
    fn singleton_attention_is_the_identity() {
        let fx = fixture(1, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let h = tape.leaf(Tensor::randn(&mut rng, &[1, fx.hidden], 1.0));
        let q = tape.leaf(Tensor::randn(&mut rng, &[1, fx.dec_hidden], 1.0));
        let (w, ctx) = content_attention(&mut tape, &bound, &fx.fusion.att1, q, h).unwrap();
        assert_eq!(tape.value(w), &[1.0]);
        assert_eq!(tape.value(ctx), tape.value(h));
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let fx = fixture(3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let row: Vec<f64> = (0..fx.hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut h = Tensor::zeros(&[5, fx.hidden]);
        for t in 0..5 {
            h.data[t * fx.hidden..(t + 1) * fx.hidden].copy_from_slice(&row);
        }
        let hr = tape.leaf(h);
        let q = tape.leaf(Tensor::randn(&mut rng, &[1, fx.dec_hidden], 1.0));
        let (w, ctx) = content_attention(&mut tape, &bound, &fx.fusion.att1, q, hr).unwrap();
        for &wi in tape.value(w) {
            assert!((wi - 0.2).abs() < 1e-12);
        }
        for (c, r) in tape.value(ctx).iter().zip(&row) {
            assert!((c - r).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_evaluation() {
        // independent recompute of the additive attention with plain loops
        let fx = fixture(5, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::randn(&mut rng, &[3, fx.hidden], 1.0);
        let q = Tensor::randn(&mut rng, &[1, fx.dec_hidden], 1.0);

        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let hr = tape.leaf_from(&h);
        let qr = tape.leaf_from(&q);
        let (w, ctx) = content_attention(&mut tape, &bound, &fx.fusion.att1, qr, hr).unwrap();

        let p = &fx.fusion.att1;
        let (wq, wk, bias, v) = (
            fx.store.get(p.w_query),
            fx.store.get(p.w_key),
            fx.store.get(p.bias),
            fx.store.get(p.v),
        );
        let att_dim = bias.cols();
        let mut scores = vec![0.0f64; 3];
        for t in 0..3 {
            let mut e = 0.0;
            for a in 0..att_dim {
                let mut pre = bias.data[a];
                for i in 0..fx.dec_hidden {
                    pre += q.data[i] * wq.at(i, a);
                }
                for i in 0..fx.hidden {
                    pre += h.at(t, i) * wk.at(i, a);
                }
                e += pre.tanh() * v.data[a];
            }
            scores[t] = e;
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let expect_w: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
        for (got, want) in tape.value(w).iter().zip(&expect_w) {
            assert!((got - want).abs() < 1e-12);
        }
        for i in 0..fx.hidden {
            let want: f64 = (0..3).map(|t| expect_w[t] * h.at(t, i)).sum();
            assert!((tape.value(ctx)[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn han_degenerates_when_streams_agree() {
        let fx = fixture(7, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let r = tape.leaf(Tensor::randn(&mut rng, &[1, fx.hidden], 1.0));
        let q = tape.leaf(Tensor::randn(&mut rng, &[1, fx.dec_hidden], 1.0));
        let (beta, fused) = han_fuse(&mut tape, &bound, &fx.fusion.han, q, r, r).unwrap();
        let bsum: f64 = tape.value(beta).iter().sum();
        assert!((bsum - 1.0).abs() < 1e-12);
        for (f, v) in tape.value(fused).iter().zip(tape.value(r)) {
            assert!((f - v).abs() < 1e-12);
        }
    }

    #[test]
    fn han_vertex_of_the_simplex() {
        // a huge score gap forces β = (1, 0) and fused = r1
        let fx = fixture(9, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let r1 = tape.leaf(Tensor::row_vector(vec![1000.0, 1000.0, 1000.0]));
        let r2 = tape.leaf(Tensor::row_vector(vec![-1000.0, -1000.0, -1000.0]));
        let q = tape.leaf(Tensor::randn(&mut rng, &[1, fx.dec_hidden], 1.0));
        let (beta, fused) = han_fuse(&mut tape, &bound, &fx.fusion.han, q, r1, r2).unwrap();
        let b = tape.value(beta).to_vec();
        // tanh saturates, so the gap direction depends on the learned v; one
        // of the two streams must win outright
        let winner = if b[0] > 0.5 { r1 } else { r2 };
        assert!(b[0].max(b[1]) > 1.0 - 1e-9);
        for (f, v) in tape.value(fused).iter().zip(tape.value(winner)) {
            assert!((f - v).abs() < 1e-6);
        }
    }

    #[test]
    fn han_fused_is_convex_and_recomputable() {
        let fx = fixture(11, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let bound = fx.store.bind(&mut tape);
            let r1 = tape.leaf(Tensor::randn(&mut rng, &[1, fx.hidden], 1.0));
            let r2 = tape.leaf(Tensor::randn(&mut rng, &[1, fx.hidden], 1.0));
            let q = tape.leaf(Tensor::randn(&mut rng, &[1, fx.dec_hidden], 1.0));
            let (beta, fused) = han_fuse(&mut tape, &bound, &fx.fusion.han, q, r1, r2).unwrap();
            let b = tape.value(beta).to_vec();
            assert!((b[0] + b[1] - 1.0).abs() < 1e-12);
            assert!(b[0] >= 0.0 && b[1] >= 0.0);
            for ((f, x), y) in tape.value(fused).iter().zip(tape.value(r1)).zip(tape.value(r2)) {
                assert!((f - (b[0] * x + b[1] * y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_distribution_normalizes_and_is_deterministic() {
        let fx = fixture(13, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ctx = Tensor::randn(&mut rng, &[1, fx.hidden], 1.0);
        let run = || {
            let mut tape = Tape::new();
            let bound = fx.store.bind(&mut tape);
            let ctx = tape.leaf_from(&ctx);
            let state = DecoderState::zeros(&mut tape, fx.dec_hidden);
            let (_, dist) = decoder_step(
                &mut tape,
                &bound,
                &fx.dec,
                &fx.vocab,
                state,
                DecoderInput::Letter(Letter(1)),
                ctx,
            )
            .unwrap();
            tape.value(dist).to_vec()
        };
        let d1 = run();
        let d2 = run();
        assert_eq!(d1, d2);
        let lse = crate::tensor::log_sum_exp(&d1);
        assert!(lse.abs() < 1e-9);
    }

    #[test]
    fn decoder_rejects_out_of_vocabulary_letters() {
        let fx = fixture(15, 2, 3);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let ctx = tape.zeros(&[1, fx.hidden]);
        let state = DecoderState::zeros(&mut tape, fx.dec_hidden);
        let err = decoder_step(
            &mut tape,
            &bound,
            &fx.dec,
            &fx.vocab,
            state,
            DecoderInput::Letter(Letter(7)),
            ctx,
        );
        assert!(matches!(err, Err(Error::Vocabulary { .. })));
    }

    fn random_enc(
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        t_len: usize,
        hidden: usize,
    ) -> EncoderOutputs {
        let h1 = tape.leaf(Tensor::randn(rng, &[t_len, hidden], 1.0));
        let h2 = tape.leaf(Tensor::randn(rng, &[t_len.div_ceil(4), hidden], 1.0));
        EncoderOutputs {
            h1: Some(h1),
            h2: Some(h2),
        }
    }

    #[test]
    fn sequence_likelihood_matches_manual_composition() {
        let fx = fixture(17, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let labels = vec![Letter(2), Letter(0)];

        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let enc = random_enc(&mut tape, &mut rng, 6, fx.hidden);
        let ll = attention_sequence_log_likelihood(
            &mut tape,
            &bound,
            &fx.fusion,
            &fx.dec,
            &fx.vocab,
            &enc,
            &labels,
            StreamMode::Both,
        )
        .unwrap();
        let got = tape.scalar_value(ll);
        assert!(got <= 0.0);

        // manual composition of the four ops, step by step
        let mut state = DecoderState::zeros(&mut tape, fx.dec_hidden);
        let mut manual = 0.0;
        let steps = [
            (DecoderInput::Sos, fx.vocab.output_class(labels[0])),
            (
                DecoderInput::Letter(labels[0]),
                fx.vocab.output_class(labels[1]),
            ),
            (DecoderInput::Letter(labels[1]), fx.vocab.boundary_class()),
        ];
        for (prev, target) in steps {
            let (w1, r1) = content_attention(
                &mut tape,
                &bound,
                &fx.fusion.att1,
                state.h,
                enc.h1.unwrap(),
            )
            .unwrap();
            let (_w2, r2) = content_attention(
                &mut tape,
                &bound,
                &fx.fusion.att2,
                state.h,
                enc.h2.unwrap(),
            )
            .unwrap();
            let (_beta, fused) =
                han_fuse(&mut tape, &bound, &fx.fusion.han, state.h, r1, r2).unwrap();
            let (next, dist) =
                decoder_step(&mut tape, &bound, &fx.dec, &fx.vocab, state, prev, fused).unwrap();
            manual += tape.value(dist)[target];
            state = next;
            let wsum: f64 = tape.value(w1).iter().sum();
            assert!((wsum - 1.0).abs() < 1e-9);
        }
        assert!((got - manual).abs() < 1e-10, "{got} vs {manual}");
    }

    #[test]
    fn empty_labels_score_a_single_eos() {
        let fx = fixture(19, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut tape = Tape::new();
        let bound = fx.store.bind(&mut tape);
        let enc = random_enc(&mut tape, &mut rng, 4, fx.hidden);
        let ll = attention_sequence_log_likelihood(
            &mut tape,
            &bound,
            &fx.fusion,
            &fx.dec,
            &fx.vocab,
            &enc,
            &[],
            StreamMode::Both,
        )
        .unwrap();
        let v = tape.scalar_value(ll);
        assert!(v <= 0.0 && v.is_finite());
    }

    #[test]
    fn decoder_step_gradient_matches_finite_differences() {
        let fx = fixture(21, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ctx = Tensor::randn(&mut rng, &[1, fx.hidden], 1.0);
        let err = finite_diff_check(
            |tape, ctxr| {
                let bound = fx.store.bind(tape);
                let state = DecoderState::zeros(tape, fx.dec_hidden);
                let (_, dist) = decoder_step(
                    tape,
                    &bound,
                    &fx.dec,
                    &fx.vocab,
                    state,
                    DecoderInput::Sos,
                    ctxr,
                )?;
                let lp = tape.select(dist, 0, 1)?;
                Ok(tape.neg(lp))
            },
            &ctx,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }
}
