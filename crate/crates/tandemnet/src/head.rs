//! Classification head and the modality policy that decides what happens to
//! the text side of a sample: kept, stochastically dropped (training), or
//! rescaled by the keep probability (evaluation).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamKind, ParamVisitor};
use crate::tensor::tape::{Mode, Tape, TensorId};
use crate::tensor::{fmt_shape, shared, Elem, SharedTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityPolicy {
    /// Probability r of dropping the text side of a training sample.
    pub drop_rate: Elem,
    pub mode: Mode,
    pub text_available: bool,
}

/// What to do with the raw semantic matrix before it reaches attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyAction {
    PassThrough,
    Scale(Elem),
    Drop,
}

impl ModalityPolicy {
    pub fn new(drop_rate: Elem, mode: Mode, text_available: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(Error::config("drop_rate", format!("{drop_rate} outside [0, 1)")));
        }
        Ok(ModalityPolicy { drop_rate, mode, text_available })
    }

    /// Per-sample decision. Consumes one draw from `rng` only when the
    /// outcome is actually stochastic (training with text present and r > 0).
    pub fn decide<R: Rng>(&self, rng: &mut R) -> PolicyAction {
        if !self.text_available {
            return PolicyAction::Drop;
        }
        match self.mode {
            Mode::Train => {
                if self.drop_rate > 0.0 && rng.gen::<Elem>() < self.drop_rate {
                    PolicyAction::Drop
                } else {
                    PolicyAction::PassThrough
                }
            }
            Mode::Eval => {
                if self.drop_rate == 0.0 {
                    PolicyAction::PassThrough
                } else {
                    PolicyAction::Scale(1.0 - self.drop_rate)
                }
            }
        }
    }

    /// Materializes the decision on a raw semantic matrix.
    pub fn apply<R: Rng>(&self, s: &Tensor, rng: &mut R) -> Tensor {
        match self.decide(rng) {
            PolicyAction::PassThrough => s.clone(),
            PolicyAction::Scale(f) => {
                let mut out = s.clone();
                for v in out.data_mut() {
                    *v *= f;
                }
                out
            }
            PolicyAction::Drop => Tensor::zeros(s.shape().to_vec()),
        }
    }
}

/// Two-layer MLP over (context + pooled visual features).
pub struct PredictionHead {
    pub hidden_weight: SharedTensor, // [M, M]
    pub hidden_bias: SharedTensor,   // [M]
    pub out_weight: SharedTensor,    // [classes, M]
    pub out_bias: SharedTensor,      // [classes]
    pub m: usize,
    pub classes: usize,
}

#[derive(Clone, Copy)]
pub struct HeadBound {
    pub hidden_weight: TensorId,
    pub hidden_bias: TensorId,
    pub out_weight: TensorId,
    pub out_bias: TensorId,
}

impl PredictionHead {
    pub fn new<R: Rng>(rng: &mut R, m: usize, classes: usize) -> Self {
        let bound = 1.0 / (m as Elem).sqrt();
        PredictionHead {
            hidden_weight: shared(Tensor::uniform(rng, vec![m, m], -bound, bound)),
            hidden_bias: shared(Tensor::zeros(vec![m])),
            out_weight: shared(Tensor::uniform(rng, vec![classes, m], -bound, bound)),
            out_bias: shared(Tensor::zeros(vec![classes])),
            m,
            classes,
        }
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> HeadBound {
        let reg = |tape: &mut Tape, p: &SharedTensor| if frozen { tape.frozen(p) } else { tape.param(p) };
        HeadBound {
            hidden_weight: reg(tape, &self.hidden_weight),
            hidden_bias: reg(tape, &self.hidden_bias),
            out_weight: reg(tape, &self.out_weight),
            out_bias: reg(tape, &self.out_bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "hidden_weight"), &self.hidden_weight, ParamKind::Trainable);
        f(join(prefix, "hidden_bias"), &self.hidden_bias, ParamKind::Trainable);
        f(join(prefix, "out_weight"), &self.out_weight, ParamKind::Trainable);
        f(join(prefix, "out_bias"), &self.out_bias, ParamKind::Trainable);
    }
}

/// logits = MLP(context + rowmean(V_raw)). The pooled raw visual feature is
/// added directly, so the loss always has a gradient path to the CNN that
/// bypasses attention entirely.
pub fn predict_logits(
    tape: &mut Tape,
    h: &HeadBound,
    context: TensorId,
    v_raw: TensorId,
) -> Result<TensorId> {
    let m = tape.shape(h.hidden_weight)[0];
    if tape.shape(context) != [m] {
        return Err(Error::dim(
            "predict",
            format!("context {} against head width {m}", fmt_shape(tape.shape(context))),
        ));
    }
    if tape.shape(v_raw).len() != 2 || tape.shape(v_raw)[0] != m {
        return Err(Error::dim(
            "predict",
            format!("visual features {} against head width {m}", fmt_shape(tape.shape(v_raw))),
        ));
    }
    let pooled = tape.global_avg_pool(v_raw)?;
    let x = tape.add(context, pooled)?;
    let xc = tape.reshape(x, vec![m, 1])?;
    let hid = tape.matmul(h.hidden_weight, xc)?;
    let hid = tape.reshape(hid, vec![m])?;
    let hid = tape.add(hid, h.hidden_bias)?;
    let hid = tape.tanh(hid);
    let hc = tape.reshape(hid, vec![m, 1])?;
    let logits = tape.matmul(h.out_weight, hc)?;
    let classes = tape.shape(h.out_weight).to_vec()[0];
    let logits = tape.reshape(logits, vec![classes])?;
    tape.add(logits, h.out_bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    pub logits: Vec<Elem>,
    pub probabilities: Vec<Elem>,
    pub predicted_class: usize,
}

impl ClassPrediction {
    pub fn from_logits(logits: &[Elem]) -> Result<Self> {
        if logits.is_empty() || !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("predict", format!("bad logits {logits:?}")));
        }
        let mx = logits.iter().fold(Elem::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<Elem> = logits.iter().map(|v| (v - mx).exp()).collect();
        let total: Elem = exps.iter().sum();
        let probabilities: Vec<Elem> = exps.iter().map(|v| v / total).collect();
        let predicted_class = probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        Ok(ClassPrediction { logits: logits.to_vec(), probabilities, predicted_class })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::grad_check;
    use crate::tensor::tol;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn drop_rate_outside_range_is_a_config_error() {
        assert!(ModalityPolicy::new(1.0, Mode::Train, true).is_err());
        assert!(ModalityPolicy::new(-0.1, Mode::Train, true).is_err());
        assert!(ModalityPolicy::new(0.0, Mode::Train, true).is_ok());
    }

    #[test]
    fn zero_rate_training_always_passes_text_through() {
        let p = ModalityPolicy::new(0.0, Mode::Train, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(p.decide(&mut rng), PolicyAction::PassThrough);
        }
    }

    #[test]
    fn eval_with_text_halves_every_entry_exactly() {
        let p = ModalityPolicy::new(0.5, Mode::Eval, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::uniform(&mut rng, vec![3, 4], -2.0, 2.0);
        let out = p.apply(&s, &mut rng);
        for (o, i) in out.data().iter().zip(s.data()) {
            assert_eq!(*o, i * 0.5, "halving must be exact");
        }
    }

    #[test]
    fn eval_without_text_zeroes_everything() {
        let p = ModalityPolicy::new(0.5, Mode::Eval, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::uniform(&mut rng, vec![3, 4], -2.0, 2.0);
        assert!(p.apply(&s, &mut rng).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn monte_carlo_drop_fraction_near_half() {
        let p = ModalityPolicy::new(0.5, Mode::Train, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dropped = 0usize;
        let total = 100_000;
        for _ in 0..total {
            if p.decide(&mut rng) == PolicyAction::Drop {
                dropped += 1;
            }
        }
        let frac = dropped as Elem / total as Elem;
        assert!((0.48..=0.52).contains(&frac), "drop fraction {frac}");
    }

    #[test]
    fn zero_context_prediction_depends_only_on_pooled_visual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = PredictionHead::new(&mut rng, 3, 4);
        // Two feature matrices with identical row means must give identical
        // logits when the attention context is suppressed.
        let v1 = Tensor::new(vec![3, 2], vec![1.0, 3.0, -2.0, 4.0, 0.5, 0.7]).unwrap();
        let v2 = Tensor::new(vec![3, 2], vec![3.0, 1.0, 4.0, -2.0, 0.7, 0.5]).unwrap();
        let run = |v: &Tensor| {
            let mut tape = Tape::new();
            let b = head.bind(&mut tape, false);
            let ctx = tape.zeros(vec![3]);
            let vid = tape.input(v);
            let logits = predict_logits(&mut tape, &b, ctx, vid).unwrap();
            tape.data(logits).to_vec()
        };
        assert_eq!(run(&v1), run(&v2));
    }

    #[test]
    fn four_class_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = PredictionHead::new(&mut rng, 4, 4);
        let mut tape = Tape::new();
        let b = head.bind(&mut tape, false);
        let ctx = tape.input(&Tensor::uniform(&mut rng, vec![4], -1.0, 1.0));
        let v = tape.input(&Tensor::uniform(&mut rng, vec![4, 5], -1.0, 1.0));
        let logits = predict_logits(&mut tape, &b, ctx, v).unwrap();
        assert_eq!(tape.shape(logits), &[4]);
        let pred = ClassPrediction::from_logits(tape.data(logits)).unwrap();
        let total: Elem = pred.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(pred.probabilities.iter().all(|&p| p > 0.0));
        let argmax = pred
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(pred.predicted_class, argmax);
    }

    #[test]
    fn head_passes_grad_check() {
        let m = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [
            Tensor::uniform(&mut rng, vec![m], -0.8, 0.8),    // context
            Tensor::uniform(&mut rng, vec![m, 4], -0.8, 0.8), // v_raw
            Tensor::uniform(&mut rng, vec![m, m], -0.6, 0.6), // hidden_weight
            Tensor::uniform(&mut rng, vec![m], -0.2, 0.2),    // hidden_bias
            Tensor::uniform(&mut rng, vec![2, m], -0.6, 0.6), // out_weight
            Tensor::uniform(&mut rng, vec![2], -0.2, 0.2),    // out_bias
        ];
        let err = grad_check(
            |tape, ids| {
                let b = HeadBound {
                    hidden_weight: ids[2],
                    hidden_bias: ids[3],
                    out_weight: ids[4],
                    out_bias: ids[5],
                };
                let logits = predict_logits(tape, &b, ids[0], ids[1])?;
                tape.cross_entropy(logits, 1)
            },
            &inputs,
            tol::FD_EPSILON,
        )
        .unwrap();
        assert!(err < tol::GRAD_CHECK_MAX_REL, "head grad err {err}");
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(ClassPrediction::from_logits(&[1.0, Elem::NAN]).is_err());
        assert!(ClassPrediction::from_logits(&[]).is_err());
    }
}
