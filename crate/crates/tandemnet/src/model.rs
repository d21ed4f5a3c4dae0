//! Full model assembly: image encoder, report encoder, dual attention and
//! the classification head, wired per sample with the modality policy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, attend_image_only, embed_semantic, embed_visual, AttentionResult, DualAttentionParams,
};
use crate::encoder::{EncoderConfig, ImageEncoder};
use crate::error::{Error, Result};
use crate::head::{ClassPrediction, ModalityPolicy, PolicyAction, PredictionHead};
use crate::params::{ParamGroup, ParamVisitor};
use crate::tensor::tape::{Mode, Tape, TensorId};
use crate::tensor::{Elem, Tensor};
use crate::text::TextEncoder;
use crate::vocab::TokenizedReport;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// D: LSTM hidden width.
    pub lstm_dim: usize,
    /// M: attention score width. Must equal the encoder channel count and
    /// the LSTM width, because context, pooled-visual skip and both feature
    /// families are added or concatenated downstream.
    pub attention_dim: usize,
    /// K: word embedding width.
    pub embed_dim: usize,
    /// N: sentences per report.
    pub sentences: usize,
    pub classes: usize,
    pub drop_rate: Elem,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            lstm_dim: 64,
            attention_dim: 64,
            embed_dim: 32,
            sentences: 5,
            classes: 4,
            drop_rate: 0.5,
            vocab_size,
        }
    }

    pub fn paper_scale(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::paper_scale(),
            lstm_dim: 256,
            attention_dim: 256,
            embed_dim: 128,
            sentences: 5,
            classes: 4,
            drop_rate: 0.5,
            vocab_size,
        }
    }

    /// Small enough to finite-difference the entire loss.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            lstm_dim: 4,
            attention_dim: 4,
            embed_dim: 3,
            sentences: 2,
            classes: 4,
            drop_rate: 0.5,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let c = self.encoder.channels();
        if self.attention_dim != c {
            return Err(Error::config(
                "attention_dim",
                format!("M={} must equal encoder channels C={c}", self.attention_dim),
            ));
        }
        if self.lstm_dim != self.attention_dim {
            return Err(Error::config(
                "lstm_dim",
                format!("D={} must equal attention width M={}", self.lstm_dim, self.attention_dim),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "K must be positive".to_string()));
        }
        if self.sentences == 0 {
            return Err(Error::config("sentences", "N must be at least 1".to_string()));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", format!("{} classes is not a classifier", self.classes)));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::config("drop_rate", format!("{} outside [0, 1)", self.drop_rate)));
        }
        if self.vocab_size < crate::vocab::RESERVED.len() {
            return Err(Error::config("vocab_size", format!("{} below reserved count", self.vocab_size)));
        }
        Ok(())
    }
}

/// Which parameter groups bind as constants for a given pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Freeze {
    pub cnn: bool,
    pub attention: bool,
    pub text: bool,
    pub head: bool,
}

impl Freeze {
    pub fn none() -> Self {
        Freeze::default()
    }

    pub fn all() -> Self {
        Freeze { cnn: true, attention: true, text: true, head: true }
    }
}

pub struct SampleRef<'a> {
    pub image: &'a Tensor,
    pub report: Option<&'a TokenizedReport>,
    pub label: Option<usize>,
}

pub struct BatchOutput {
    /// Mean cross-entropy over the labeled samples ([1]; exactly zero when
    /// none carry labels).
    pub loss: TensorId,
    pub logits: Vec<TensorId>,
    pub attention: Vec<AttentionResult>,
    /// Labeled samples whose argmax matched.
    pub correct: usize,
    pub labeled: usize,
}

pub struct Inference {
    pub prediction: ClassPrediction,
    /// α over G regions then N sentences.
    pub alpha: Vec<Elem>,
    pub regions: usize,
    pub sentences: usize,
}

pub struct TandemNet {
    pub cfg: ModelConfig,
    pub encoder: ImageEncoder,
    pub text: TextEncoder,
    pub attention: DualAttentionParams,
    pub head: PredictionHead,
}

impl TandemNet {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = ImageEncoder::new(cfg.encoder.clone(), rng)?;
        let text = TextEncoder::new(rng, cfg.vocab_size, cfg.embed_dim, cfg.lstm_dim, cfg.sentences);
        let attention = DualAttentionParams::new(rng, cfg.attention_dim, cfg.encoder.channels(), cfg.lstm_dim)?;
        let head = PredictionHead::new(rng, cfg.attention_dim, cfg.classes);
        Ok(TandemNet { cfg, encoder, text, attention, head })
    }

    /// Runs the whole batch on one tape. Images share the encoder pass (and
    /// its batch statistics); text, attention and the head run per sample.
    pub fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        samples: &[SampleRef],
        mode: Mode,
        freeze: Freeze,
        rng: &mut R,
    ) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(Error::input("empty batch".to_string()));
        }
        let size = self.cfg.encoder.input_size;
        let b = samples.len();
        let mut stacked = Tensor::zeros(vec![b, 3, size, size]);
        let block = 3 * size * size;
        for (i, s) in samples.iter().enumerate() {
            if s.image.shape() != [3, size, size] {
                return Err(Error::dim(
                    "forward_batch",
                    format!("sample {i} image {}", crate::tensor::fmt_shape(s.image.shape())),
                ));
            }
            stacked.data_mut()[i * block..(i + 1) * block].copy_from_slice(s.image.data());
        }
        let x = tape.input(&stacked);
        let feats = self.encoder.forward_batch(tape, x, mode, freeze.cnn, rng)?;

        let text_bound = self.text.bind(tape, freeze.text);
        let att_bound = self.attention.bind(tape, freeze.attention);
        let head_bound = self.head.bind(tape, freeze.head);
        let (c, g) = (self.cfg.encoder.channels(), self.cfg.encoder.grid_area());

        let mut logits_all = Vec::with_capacity(b);
        let mut attention_all = Vec::with_capacity(b);
        let mut loss_sum: Option<TensorId> = None;
        let mut correct = 0;
        let mut labeled = 0;
        for (i, sample) in samples.iter().enumerate() {
            let v3 = tape.batch_slice(feats, i)?;
            let v_raw = tape.reshape(v3, vec![c, g])?;
            let policy = ModalityPolicy::new(self.cfg.drop_rate, mode, sample.report.is_some())?;
            let action = policy.decide(rng);
            let v_emb = embed_visual(tape, &att_bound.embed, v_raw)?;
            let att = match (action, sample.report) {
                (PolicyAction::Drop, _) | (_, None) => {
                    attend_image_only(tape, &att_bound.attend, v_emb, self.cfg.sentences)?
                }
                (action, Some(report)) => {
                    let mut s_raw = self.text.encode_report(tape, &text_bound, report)?;
                    if let PolicyAction::Scale(f) = action {
                        s_raw = tape.scale(s_raw, f);
                    }
                    let s_emb = embed_semantic(tape, &att_bound.embed, s_raw)?;
                    attend(tape, &att_bound.attend, v_emb, s_emb)?
                }
            };
            let logits = crate::head::predict_logits(tape, &head_bound, att.context, v_raw)?;
            if let Some(label) = sample.label {
                if label >= self.cfg.classes {
                    return Err(Error::input(format!("label {label} outside {} classes", self.cfg.classes)));
                }
                let ce = tape.cross_entropy(logits, label)?;
                loss_sum = Some(match loss_sum {
                    Some(acc) => tape.add(acc, ce)?,
                    None => ce,
                });
                labeled += 1;
                let data = tape.data(logits);
                let argmax = data
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap();
                if argmax == label {
                    correct += 1;
                }
            }
            logits_all.push(logits);
            attention_all.push(att);
        }
        let loss = match loss_sum {
            Some(total) => tape.scale(total, 1.0 / labeled as Elem),
            None => tape.zeros(vec![1]),
        };
        Ok(BatchOutput { loss, logits: logits_all, attention: attention_all, correct, labeled })
    }

    /// Deterministic single-sample evaluation.
    pub fn infer(&self, image: &Tensor, report: Option<&TokenizedReport>) -> Result<Inference> {
        let mut tape = Tape::new();
        // Eval paths draw no randomness; the RNG is only a signature artifact.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = SampleRef { image, report, label: None };
        let out = self.forward_batch(&mut tape, &[sample], Mode::Eval, Freeze::all(), &mut rng)?;
        let prediction = ClassPrediction::from_logits(tape.data(out.logits[0]))?;
        let att = &out.attention[0];
        Ok(Inference {
            prediction,
            alpha: tape.data(att.weights).to_vec(),
            regions: att.regions,
            sentences: att.sentences,
        })
    }

    pub fn visit_params(&self, f: &mut ParamVisitor) {
        self.encoder.visit("encoder", f);
        self.text.visit("text", f);
        self.attention.visit("attention", f);
        self.head.visit("head", f);
    }

    /// Optimizer grouping: the convolutional trunk trains with SGD, all
    /// attention-side parameters (text encoder, attention, head) with Adam.
    pub fn group_of(path: &str) -> ParamGroup {
        if path.starts_with("encoder") {
            ParamGroup::Cnn
        } else {
            ParamGroup::Attention
        }
    }
}

/// Ablation baseline: the same encoder and MLP head with the attention and
/// text machinery removed; logits come from pooled visual features alone.
pub struct ImageOnlyNet {
    pub cfg: ModelConfig,
    pub encoder: ImageEncoder,
    pub head: PredictionHead,
}

impl ImageOnlyNet {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = ImageEncoder::new(cfg.encoder.clone(), rng)?;
        let head = PredictionHead::new(rng, cfg.attention_dim, cfg.classes);
        Ok(ImageOnlyNet { cfg, encoder, head })
    }

    pub fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        samples: &[SampleRef],
        mode: Mode,
        freeze: Freeze,
        rng: &mut R,
    ) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(Error::input("empty batch".to_string()));
        }
        let size = self.cfg.encoder.input_size;
        let b = samples.len();
        let mut stacked = Tensor::zeros(vec![b, 3, size, size]);
        let block = 3 * size * size;
        for (i, s) in samples.iter().enumerate() {
            if s.image.shape() != [3, size, size] {
                return Err(Error::dim(
                    "forward_batch",
                    format!("sample {i} image {}", crate::tensor::fmt_shape(s.image.shape())),
                ));
            }
            stacked.data_mut()[i * block..(i + 1) * block].copy_from_slice(s.image.data());
        }
        let x = tape.input(&stacked);
        let feats = self.encoder.forward_batch(tape, x, mode, freeze.cnn, rng)?;
        let head_bound = self.head.bind(tape, freeze.head);
        let (c, g) = (self.cfg.encoder.channels(), self.cfg.encoder.grid_area());

        let mut logits_all = Vec::with_capacity(b);
        let mut loss_sum: Option<TensorId> = None;
        let mut correct = 0;
        let mut labeled = 0;
        for (i, sample) in samples.iter().enumerate() {
            let v3 = tape.batch_slice(feats, i)?;
            let v_raw = tape.reshape(v3, vec![c, g])?;
            let zero_ctx = tape.zeros(vec![self.cfg.attention_dim]);
            let logits = crate::head::predict_logits(tape, &head_bound, zero_ctx, v_raw)?;
            if let Some(label) = sample.label {
                let ce = tape.cross_entropy(logits, label)?;
                loss_sum = Some(match loss_sum {
                    Some(acc) => tape.add(acc, ce)?,
                    None => ce,
                });
                labeled += 1;
                let data = tape.data(logits);
                let argmax = data
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap();
                if argmax == label {
                    correct += 1;
                }
            }
            logits_all.push(logits);
        }
        let loss = match loss_sum {
            Some(total) => tape.scale(total, 1.0 / labeled as Elem),
            None => tape.zeros(vec![1]),
        };
        Ok(BatchOutput { loss, logits: logits_all, attention: Vec::new(), correct, labeled })
    }

    pub fn infer(&self, image: &Tensor) -> Result<ClassPrediction> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = SampleRef { image, report: None, label: None };
        let out = self.forward_batch(&mut tape, &[sample], Mode::Eval, Freeze::all(), &mut rng)?;
        ClassPrediction::from_logits(tape.data(out.logits[0]))
    }

    pub fn visit_params(&self, f: &mut ParamVisitor) {
        self.encoder.visit("encoder", f);
        self.head.visit("head", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{TokenizedReport, Vocabulary};

    fn toy_report(vocab: &mut Vocabulary, words: [&str; 2]) -> TokenizedReport {
        let sentences: Vec<Vec<String>> = words.iter().map(|w| vec![w.to_string()]).collect();
        TokenizedReport::from_sentences(vocab, &sentences)
    }

    fn desk_fixture() -> (TandemNet, Tensor, TokenizedReport) {
        let mut vocab = Vocabulary::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = toy_report(&mut vocab, ["alpha", "beta"]);
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.sentences = 2;
        let model = TandemNet::new(cfg, &mut rng).unwrap();
        let image = Tensor::uniform(&mut rng, vec![3, 32, 32], 0.0, 1.0);
        (model, image, report)
    }

    #[test]
    fn config_mismatches_name_the_field() {
        let mut cfg = ModelConfig::desk(10);
        cfg.attention_dim = 32;
        cfg.lstm_dim = 32;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "attention_dim"),
            other => panic!("expected config error, got {other:?}"),
        }
        let mut cfg = ModelConfig::desk(10);
        cfg.lstm_dim = 32;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lstm_dim"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_batch_trains_with_finite_loss() {
        let (model, image, report) = desk_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image2 = Tensor::uniform(&mut rng, vec![3, 32, 32], 0.0, 1.0);
        let samples = [
            SampleRef { image: &image, report: Some(&report), label: Some(1) },
            SampleRef { image: &image2, report: None, label: Some(3) },
        ];
        let mut tape = Tape::new();
        let out = model
            .forward_batch(&mut tape, &samples, Mode::Train, Freeze::none(), &mut rng)
            .unwrap();
        assert_eq!(out.logits.len(), 2);
        assert_eq!(out.labeled, 2);
        let loss = tape.data(out.loss)[0];
        assert!(loss.is_finite() && loss > 0.0);
        tape.backward(out.loss).unwrap();
        assert!(model.encoder.first_conv_weight().borrow().grad_norm_sq() > 0.0);
    }

    #[test]
    fn no_text_inference_is_exactly_the_image_only_attention_path() {
        let (model, image, _) = desk_fixture();
        let got = model.infer(&image, None).unwrap();

        // Hand-built equivalent: encode, embed V, attend with the zero
        // matrix, classify.
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = model
            .encoder
            .encode_image(&mut tape, &image, 0, Mode::Eval, &mut rng)
            .unwrap();
        let att_bound = model.attention.bind(&mut tape, true);
        let head_bound = model.head.bind(&mut tape, true);
        let v_emb = embed_visual(&mut tape, &att_bound.embed, feats.matrix).unwrap();
        let att = attend_image_only(&mut tape, &att_bound.attend, v_emb, model.cfg.sentences).unwrap();
        let logits =
            crate::head::predict_logits(&mut tape, &head_bound, att.context, feats.matrix).unwrap();
        assert_eq!(got.prediction.logits, tape.data(logits));
        assert_eq!(got.alpha, tape.data(att.weights));
    }

    #[test]
    fn inference_is_deterministic() {
        let (model, image, report) = desk_fixture();
        let a = model.infer(&image, Some(&report)).unwrap();
        let b = model.infer(&image, Some(&report)).unwrap();
        assert_eq!(a.prediction.logits, b.prediction.logits);
        assert_eq!(a.alpha, b.alpha);
        let no_text = model.infer(&image, None).unwrap();
        assert_ne!(a.alpha, no_text.alpha, "text must influence attention");
    }

    #[test]
    fn encoder_gradient_survives_detached_attention_context() {
        let (model, image, report) = desk_fixture();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = model
            .encoder
            .encode_image(&mut tape, &image, 0, Mode::Train, &mut rng)
            .unwrap();
        let text_bound = model.text.bind(&mut tape, false);
        let att_bound = model.attention.bind(&mut tape, false);
        let head_bound = model.head.bind(&mut tape, false);
        let v_emb = embed_visual(&mut tape, &att_bound.embed, feats.matrix).unwrap();
        let s_raw = model.text.encode_report(&mut tape, &text_bound, &report).unwrap();
        let s_emb = embed_semantic(&mut tape, &att_bound.embed, s_raw).unwrap();
        let att = attend(&mut tape, &att_bound.attend, v_emb, s_emb).unwrap();
        let cut = tape.detach(att.context);
        let logits = crate::head::predict_logits(&mut tape, &head_bound, cut, feats.matrix).unwrap();
        let loss = tape.cross_entropy(logits, 2).unwrap();
        tape.backward(loss).unwrap();
        let norm = model.encoder.first_conv_weight().borrow().grad_norm_sq();
        assert!(norm > 0.0, "pooled-visual skip must reach the encoder on its own");
    }

    #[test]
    fn zeroed_attention_params_still_pass_encoder_gradient() {
        let (model, image, report) = desk_fixture();
        let zero = |p: &crate::tensor::SharedTensor| p.borrow_mut().data_mut().fill(0.0);
        zero(&model.attention.embed_visual_weight);
        zero(&model.attention.embed_visual_bias);
        zero(&model.attention.embed_semantic_weight);
        zero(&model.attention.embed_semantic_bias);
        zero(&model.attention.w_visual);
        zero(&model.attention.w_visual_pooled);
        zero(&model.attention.w_semantic);
        zero(&model.attention.w_semantic_pooled);
        zero(&model.attention.score_weight);
        zero(&model.attention.score_bias);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let samples = [SampleRef { image: &image, report: Some(&report), label: Some(0) }];
        let out = model
            .forward_batch(&mut tape, &samples, Mode::Train, Freeze::none(), &mut rng)
            .unwrap();
        tape.backward(out.loss).unwrap();
        assert!(model.encoder.first_conv_weight().borrow().grad_norm_sq() > 0.0);
    }

    #[test]
    fn image_only_baseline_trains_and_infers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = ModelConfig::desk(8);
        cfg.sentences = 2;
        let model = ImageOnlyNet::new(cfg, &mut rng).unwrap();
        let image = Tensor::uniform(&mut rng, vec![3, 32, 32], 0.0, 1.0);
        let mut tape = Tape::new();
        let samples = [SampleRef { image: &image, report: None, label: Some(2) }];
        let out = model
            .forward_batch(&mut tape, &samples, Mode::Train, Freeze::none(), &mut rng)
            .unwrap();
        tape.backward(out.loss).unwrap();
        assert!(model.encoder.first_conv_weight().borrow().grad_norm_sq() > 0.0);
        let pred = model.infer(&image).unwrap();
        assert_eq!(pred.probabilities.len(), 4);
    }

    #[test]
    fn parameter_groups_split_encoder_from_the_rest() {
        let (model, _, _) = desk_fixture();
        let mut cnn = 0;
        let mut att = 0;
        model.visit_params(&mut |path, _, kind| {
            if kind == crate::params::ParamKind::Trainable {
                match TandemNet::group_of(&path) {
                    ParamGroup::Cnn => cnn += 1,
                    ParamGroup::Attention => att += 1,
                }
            }
        });
        assert!(cnn > 10, "encoder group too small: {cnn}");
        // text (4) + attention (10) + head (4)
        assert_eq!(att, 18);
    }
}
