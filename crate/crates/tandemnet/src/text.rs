//! Report encoder: word embedding + single-layer LSTM. The report is read
//! token by token; the hidden state at each sentence-end marker becomes one
//! column of the semantic matrix S ∈ [D × N].

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamKind, ParamVisitor};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{shared, Elem, SharedTensor, Tensor};
use crate::vocab::TokenizedReport;

const INIT_RANGE: Elem = 0.08;

/// Gate blocks are stacked input, forget, candidate, output along the first
/// axis of both weight matrices and the bias.
pub struct LstmParams {
    pub w_input: SharedTensor,  // [4D, K]
    pub w_hidden: SharedTensor, // [4D, D]
    pub bias: SharedTensor,     // [4D]
    pub d: usize,
    pub k: usize,
}

impl LstmParams {
    pub fn new<R: Rng>(rng: &mut R, d: usize, k: usize) -> Self {
        let w_input = Tensor::uniform(rng, vec![4 * d, k], -INIT_RANGE, INIT_RANGE);
        let w_hidden = Tensor::uniform(rng, vec![4 * d, d], -INIT_RANGE, INIT_RANGE);
        let mut bias = Tensor::zeros(vec![4 * d]);
        // Forget gate opens at init so early gradients reach back in time.
        bias.data_mut()[d..2 * d].fill(1.0);
        LstmParams { w_input: shared(w_input), w_hidden: shared(w_hidden), bias: shared(bias), d, k }
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> LstmBound {
        let reg = |tape: &mut Tape, p: &SharedTensor| if frozen { tape.frozen(p) } else { tape.param(p) };
        LstmBound {
            w_input: reg(tape, &self.w_input),
            w_hidden: reg(tape, &self.w_hidden),
            bias: reg(tape, &self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "w_input"), &self.w_input, ParamKind::Trainable);
        f(join(prefix, "w_hidden"), &self.w_hidden, ParamKind::Trainable);
        f(join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }
}

#[derive(Clone, Copy)]
pub struct LstmBound {
    pub w_input: TensorId,
    pub w_hidden: TensorId,
    pub bias: TensorId,
}

/// One cell update. `x` is [K], `h` and `m` are [D]; returns the new (h, m).
pub fn lstm_step(
    tape: &mut Tape,
    x: TensorId,
    h: TensorId,
    m: TensorId,
    w: LstmBound,
) -> Result<(TensorId, TensorId)> {
    let four_d = tape.shape(w.w_input)[0];
    let d = four_d / 4;
    let k = tape.shape(w.w_input)[1];
    if tape.shape(x) != [k] || tape.shape(h) != [d] || tape.shape(m) != [d] {
        return Err(Error::dim(
            "lstm_step",
            format!(
                "x {}, h {}, m {} against weights for K={k}, D={d}",
                crate::tensor::fmt_shape(tape.shape(x)),
                crate::tensor::fmt_shape(tape.shape(h)),
                crate::tensor::fmt_shape(tape.shape(m))
            ),
        ));
    }
    if !tape.data(x).iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("lstm_step", "non-finite input vector".to_string()));
    }
    let xc = tape.reshape(x, vec![k, 1])?;
    let hc = tape.reshape(h, vec![d, 1])?;
    let gi = tape.matmul(w.w_input, xc)?;
    let gh = tape.matmul(w.w_hidden, hc)?;
    let pre = tape.add(gi, gh)?;
    let pre = tape.reshape(pre, vec![4 * d])?;
    let pre = tape.add(pre, w.bias)?;
    let i_gate = tape.slice(pre, 0, d)?;
    let f_gate = tape.slice(pre, d, d)?;
    let g_cand = tape.slice(pre, 2 * d, d)?;
    let o_gate = tape.slice(pre, 3 * d, d)?;
    let i_gate = tape.sigmoid(i_gate);
    let f_gate = tape.sigmoid(f_gate);
    let g_cand = tape.tanh(g_cand);
    let o_gate = tape.sigmoid(o_gate);
    let keep = tape.mul(f_gate, m)?;
    let write = tape.mul(i_gate, g_cand)?;
    let m_next = tape.add(keep, write)?;
    let m_act = tape.tanh(m_next);
    let h_next = tape.mul(o_gate, m_act)?;
    Ok((h_next, m_next))
}

pub struct TextEncoder {
    pub embedding: SharedTensor, // [vocab, K]
    pub lstm: LstmParams,
    /// Expected sentence count N; reports must carry exactly this many
    /// sentence-end markers.
    pub sentences: usize,
}

pub struct TextEncoderBound {
    pub embedding: TensorId,
    pub lstm: LstmBound,
}

impl TextEncoder {
    pub fn new<R: Rng>(rng: &mut R, vocab_size: usize, k: usize, d: usize, sentences: usize) -> Self {
        TextEncoder {
            embedding: shared(Tensor::uniform(rng, vec![vocab_size, k], -INIT_RANGE, INIT_RANGE)),
            lstm: LstmParams::new(rng, d, k),
            sentences,
        }
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> TextEncoderBound {
        TextEncoderBound {
            embedding: if frozen { tape.frozen(&self.embedding) } else { tape.param(&self.embedding) },
            lstm: self.lstm.bind(tape, frozen),
        }
    }

    /// Runs the LSTM over the whole report and gathers the hidden state at
    /// each sentence-end marker into S ∈ [D × N].
    pub fn encode_report(
        &self,
        tape: &mut Tape,
        bound: &TextEncoderBound,
        report: &TokenizedReport,
    ) -> Result<TensorId> {
        if report.sentence_ends.len() != self.sentences {
            return Err(Error::format(
                0,
                format!(
                    "report has {} sentence-end markers, encoder expects {}",
                    report.sentence_ends.len(),
                    self.sentences
                ),
            ));
        }
        let d = self.lstm.d;
        let mut h = tape.zeros(vec![d]);
        let mut m = tape.zeros(vec![d]);
        let mut s: Option<TensorId> = None;
        let mut next_marker = 0;
        for (t, &tok) in report.tokens.iter().enumerate() {
            let x = tape.row(bound.embedding, tok as usize)?;
            (h, m) = lstm_step(tape, x, h, m, bound.lstm)?;
            if report.sentence_ends.get(next_marker) == Some(&t) {
                let col = tape.reshape(h, vec![d, 1])?;
                s = Some(match s {
                    Some(acc) => tape.concat_cols(acc, col)?,
                    None => col,
                });
                next_marker += 1;
            }
        }
        s.ok_or_else(|| Error::input("report has no sentences".to_string()))
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "embedding"), &self.embedding, ParamKind::Trainable);
        self.lstm.visit(&join(prefix, "lstm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::grad_check;
    use crate::tensor::tol;
    use crate::vocab::Vocabulary;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_steps(
        tape: &mut Tape,
        ids: &[TensorId],
        d: usize,
        steps: usize,
    ) -> crate::error::Result<TensorId> {
        // ids: [w_input, w_hidden, bias, x_0, x_1, ...]
        let w = LstmBound { w_input: ids[0], w_hidden: ids[1], bias: ids[2] };
        let mut h = tape.zeros(vec![d]);
        let mut m = tape.zeros(vec![d]);
        for t in 0..steps {
            (h, m) = lstm_step(tape, ids[3 + t], h, m, w)?;
        }
        let sq = tape.mul(h, h)?;
        let row = tape.reshape(sq, vec![1, d])?;
        tape.global_avg_pool(row)
    }

    #[test]
    fn zero_weights_zero_state_give_zero_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::new(&mut rng, 4, 3);
        p.w_input.borrow_mut().data_mut().fill(0.0);
        p.w_hidden.borrow_mut().data_mut().fill(0.0);
        p.bias.borrow_mut().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let w = p.bind(&mut tape, false);
        let x = tape.input(&Tensor::uniform(&mut rng, vec![3], -2.0, 2.0));
        let h = tape.zeros(vec![4]);
        let m = tape.zeros(vec![4]);
        let (h2, _) = lstm_step(&mut tape, x, h, m, w).unwrap();
        assert_eq!(tape.data(h2), &[0.0; 4]);
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::new(&mut rng, 2, 2);
        let mut tape = Tape::new();
        let w = p.bind(&mut tape, false);
        let x = tape.input(&Tensor::new(vec![2], vec![1.0, Elem::NAN]).unwrap());
        let h = tape.zeros(vec![2]);
        let m = tape.zeros(vec![2]);
        assert!(matches!(lstm_step(&mut tape, x, h, m, w), Err(Error::Numeric { .. })));
    }

    #[test]
    fn three_step_unroll_passes_grad_check() {
        let (d, k) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inputs = vec![
            Tensor::uniform(&mut rng, vec![4 * d, k], -0.4, 0.4),
            Tensor::uniform(&mut rng, vec![4 * d, d], -0.4, 0.4),
            Tensor::uniform(&mut rng, vec![4 * d], -0.4, 0.4),
        ];
        for _ in 0..3 {
            inputs.push(Tensor::uniform(&mut rng, vec![k], -1.0, 1.0));
        }
        let err = grad_check(|tape, ids| run_steps(tape, ids, d, 3), &inputs, tol::FD_EPSILON).unwrap();
        assert!(err < tol::GRAD_CHECK_MAX_REL, "3-step unroll grad err {err}");
    }

    #[test]
    fn eight_step_unroll_passes_grad_check() {
        let (d, k) = (3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inputs = vec![
            Tensor::uniform(&mut rng, vec![4 * d, k], -0.4, 0.4),
            Tensor::uniform(&mut rng, vec![4 * d, d], -0.4, 0.4),
            Tensor::uniform(&mut rng, vec![4 * d], -0.4, 0.4),
        ];
        for _ in 0..8 {
            inputs.push(Tensor::uniform(&mut rng, vec![k], -1.0, 1.0));
        }
        let err = grad_check(|tape, ids| run_steps(tape, ids, d, 8), &inputs, tol::FD_EPSILON).unwrap();
        assert!(err < tol::GRAD_CHECK_MAX_REL, "8-step unroll grad err {err}");
    }

    #[test]
    fn paper_scale_step_traces_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::new(&mut rng, 256, 128);
        let mut tape = Tape::new();
        let w = p.bind(&mut tape, false);
        let x = tape.input(&Tensor::uniform(&mut rng, vec![128], -1.0, 1.0));
        let h = tape.zeros(vec![256]);
        let m = tape.zeros(vec![256]);
        let (h2, m2) = lstm_step(&mut tape, x, h, m, w).unwrap();
        assert_eq!(tape.shape(h2), &[256]);
        assert_eq!(tape.shape(m2), &[256]);
    }

    fn report_with(vocab: &mut Vocabulary, sentences: &[&[&str]]) -> TokenizedReport {
        let owned: Vec<Vec<String>> =
            sentences.iter().map(|s| s.iter().map(|w| w.to_string()).collect()).collect();
        TokenizedReport::from_sentences(vocab, &owned)
    }

    #[test]
    fn single_sentence_report_yields_one_column() {
        let mut vocab = Vocabulary::new();
        let report = report_with(&mut vocab, &[&["mild", "crowding"]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(&mut rng, vocab.len(), 3, 4, 1);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false);
        let s = enc.encode_report(&mut tape, &bound, &report).unwrap();
        assert_eq!(tape.shape(s), &[4, 1]);
        // The column is the hidden state right at the marker token.
        let w = enc.lstm.bind(&mut tape, false);
        let mut h = tape.zeros(vec![4]);
        let mut m = tape.zeros(vec![4]);
        for &tok in &report.tokens[..=report.sentence_ends[0]] {
            let x = tape.row(bound.embedding, tok as usize).unwrap();
            (h, m) = lstm_step(&mut tape, x, h, m, w).unwrap();
        }
        assert_eq!(tape.data(s), tape.data(h));
    }

    #[test]
    fn five_sentence_report_yields_five_columns() {
        let mut vocab = Vocabulary::new();
        let report = report_with(&mut vocab, &[&["a"], &["b"], &["c"], &["d"], &["e"]]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = TextEncoder::new(&mut rng, vocab.len(), 3, 4, 5);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false);
        let s = enc.encode_report(&mut tape, &bound, &report).unwrap();
        assert_eq!(tape.shape(s), &[4, 5]);
    }

    #[test]
    fn wrong_marker_count_is_a_format_error_naming_expected() {
        let mut vocab = Vocabulary::new();
        let report = report_with(&mut vocab, &[&["a"], &["b"]]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = TextEncoder::new(&mut rng, vocab.len(), 3, 4, 5);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false);
        match enc.encode_report(&mut tape, &bound, &report) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains('5'), "detail: {detail}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn swapping_sentences_changes_later_columns_only() {
        let mut vocab = Vocabulary::new();
        let base = report_with(&mut vocab, &[&["alpha", "one"], &["beta", "two"], &["gamma", "three"]]);
        let swapped = report_with(&mut vocab, &[&["alpha", "one"], &["gamma", "three"], &["beta", "two"]]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = TextEncoder::new(&mut rng, vocab.len(), 4, 5, 3);
        let encode = |report: &TokenizedReport| {
            let mut tape = Tape::new();
            let bound = enc.bind(&mut tape, false);
            let s = enc.encode_report(&mut tape, &bound, report).unwrap();
            tape.data(s).to_vec()
        };
        let a = encode(&base);
        let b = encode(&swapped);
        let (d, n) = (5, 3);
        // S is row-major [D, N]: column 0 precedes the first differing token.
        for r in 0..d {
            assert_eq!(a[r * n], b[r * n], "column 0 must match");
        }
        let max_delta = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, Elem::max);
        assert!(max_delta > 0.0, "swapping sentences must change S");
    }

    #[test]
    fn encode_report_gradients_reach_first_token_embedding() {
        let mut vocab = Vocabulary::new();
        let report = report_with(&mut vocab, &[&["alpha"], &["beta"]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = TextEncoder::new(&mut rng, vocab.len(), 3, 4, 2);
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, false);
        let s = enc.encode_report(&mut tape, &bound, &report).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let flat = tape.reshape(sq, vec![1, 8]).unwrap();
        let loss = tape.global_avg_pool(flat).unwrap();
        tape.backward(loss).unwrap();
        let emb = enc.embedding.borrow();
        let g = emb.grad().expect("embedding grad");
        let bos_row = &g[crate::vocab::BOS as usize * 3..crate::vocab::BOS as usize * 3 + 3];
        assert!(bos_row.iter().any(|&v| v != 0.0), "BPTT must reach the first token");
        let pad_row = &g[crate::vocab::PAD as usize * 3..crate::vocab::PAD as usize * 3 + 3];
        assert_eq!(pad_row, &[0.0; 3], "untouched rows stay zero");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn hidden_state_stays_inside_unit_box(seed in 0u64..1 << 48, scale in 0.1..4.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = LstmParams::new(&mut rng, 6, 4);
            let mut tape = Tape::new();
            let w = p.bind(&mut tape, false);
            let mut h = tape.zeros(vec![6]);
            let mut m = tape.zeros(vec![6]);
            for _ in 0..5 {
                let x = tape.input(&Tensor::uniform(&mut rng, vec![4], -(scale as Elem), scale as Elem));
                (h, m) = lstm_step(&mut tape, x, h, m, w).unwrap();
                prop_assert!(tape.data(h).iter().all(|v| v.abs() < 1.0));
            }
        }
    }
}
