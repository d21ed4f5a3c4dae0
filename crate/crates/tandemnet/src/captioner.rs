//! Report-generation fine-tune. The classifier's own LSTM decodes the
//! report token by token, seeded with the pooled visual embedding as the
//! first input; training is teacher-forced cross-entropy plus the
//! classification loss on the same pass, with the CNN always frozen and the
//! attention block frozen for the first few epochs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, embed_semantic, embed_visual};
use crate::error::{Error, Result};
use crate::head::predict_logits;
use crate::model::TandemNet;
use crate::optim::{OptimizerConfig, Optimizers};
use crate::params::{join, ParamGroup, ParamKind, ParamVisitor};
use crate::tensor::tape::{Mode, Tape, TensorId};
use crate::tensor::{shared, to_f64, Elem, SharedTensor, Tensor};
use crate::text::lstm_step;
use crate::vocab::{TokenizedReport, Vocabulary, BOS, EOS, SENT_END};

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionConfig {
    /// The attention block stays frozen for this many epochs; the CNN is
    /// frozen for the whole fine-tune, unconditionally.
    pub freeze_attention_epochs: usize,
    pub finetune_lr: Elem,
    pub max_decode_length: usize,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        CaptionConfig { freeze_attention_epochs: 5, finetune_lr: 5e-5, max_decode_length: 64 }
    }
}

impl CaptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.finetune_lr <= 0.0 {
            return Err(Error::config("finetune_lr", format!("{} must be positive", self.finetune_lr)));
        }
        if self.max_decode_length < 2 {
            return Err(Error::config("max_decode_length", "need room for at least one token and EOS".to_string()));
        }
        Ok(())
    }

    /// Both groups share the fine-tune learning rate; the CNN group never
    /// sees a gradient anyway because its parameters bind as constants.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            cnn_lr: self.finetune_lr,
            attention_lr: self.finetune_lr,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CaptionStepStats {
    /// Teacher-forced cross-entropy per supervised token.
    pub caption_loss: f64,
    /// Classification term of the joint objective; NaN when the pass had no
    /// label or the reference was truncated short of its sentence markers.
    pub classification_loss: f64,
    pub supervised_tokens: usize,
}

/// Classifier plus the two capping layers captioning needs: a projection
/// from pooled visual space into word-embedding space (the t=0 input), and
/// a vocabulary-sized readout over LSTM hidden states.
pub struct Captioner {
    pub model: TandemNet,
    pub adapter_weight: SharedTensor, // [K, M]
    pub adapter_bias: SharedTensor,   // [K]
    pub out_weight: SharedTensor,     // [vocab, D]
    pub out_bias: SharedTensor,       // [vocab]
}

struct CaptionBound {
    adapter_weight: TensorId,
    adapter_bias: TensorId,
    out_weight: TensorId,
    out_bias: TensorId,
}

impl Captioner {
    pub fn new<R: Rng>(model: TandemNet, rng: &mut R) -> Self {
        let (m, k, d) = (model.cfg.attention_dim, model.cfg.embed_dim, model.cfg.lstm_dim);
        let vocab = model.cfg.vocab_size;
        let ab = 1.0 / (m as Elem).sqrt();
        let ob = 1.0 / (d as Elem).sqrt();
        Captioner {
            model,
            adapter_weight: shared(Tensor::uniform(rng, vec![k, m], -ab, ab)),
            adapter_bias: shared(Tensor::zeros(vec![k])),
            out_weight: shared(Tensor::uniform(rng, vec![vocab, d], -ob, ob)),
            out_bias: shared(Tensor::zeros(vec![vocab])),
        }
    }

    pub fn visit_params(&self, f: &mut ParamVisitor) {
        self.model.visit_params(f);
        f(join("caption", "adapter.weight"), &self.adapter_weight, ParamKind::Trainable);
        f(join("caption", "adapter.bias"), &self.adapter_bias, ParamKind::Trainable);
        f(join("caption", "out.weight"), &self.out_weight, ParamKind::Trainable);
        f(join("caption", "out.bias"), &self.out_bias, ParamKind::Trainable);
    }

    pub fn trainable_params(&self) -> Vec<(String, SharedTensor, ParamGroup)> {
        let mut out = Vec::new();
        self.visit_params(&mut |path, cell, kind| {
            if kind == ParamKind::Trainable {
                let group = TandemNet::group_of(&path);
                out.push((path, cell.clone(), group));
            }
        });
        out
    }

    fn bind_caption(&self, tape: &mut Tape, frozen: bool) -> CaptionBound {
        let reg = |t: &mut Tape, cell: &SharedTensor| if frozen { t.frozen(cell) } else { t.param(cell) };
        CaptionBound {
            adapter_weight: reg(tape, &self.adapter_weight),
            adapter_bias: reg(tape, &self.adapter_bias),
            out_weight: reg(tape, &self.out_weight),
            out_bias: reg(tape, &self.out_bias),
        }
    }

    /// Frozen-CNN encoder pass (eval mode, constant weights): [C x G]
    /// regions plus their tanh embedding.
    fn visual_features<R: Rng>(&self, tape: &mut Tape, image: &Tensor, freeze_attention: bool, rng: &mut R) -> Result<(TensorId, TensorId, TensorId)> {
        let size = self.model.cfg.encoder.input_size;
        if image.shape() != [3, size, size] {
            return Err(Error::dim(
                "caption",
                format!("image {} against encoder input {size}", crate::tensor::fmt_shape(image.shape())),
            ));
        }
        let mut batched = Tensor::zeros(vec![1, 3, size, size]);
        batched.data_mut().copy_from_slice(image.data());
        let x = tape.input(&batched);
        let feats = self.model.encoder.forward_batch(tape, x, Mode::Eval, true, rng)?;
        let (c, g) = (self.model.cfg.encoder.channels(), self.model.cfg.encoder.grid_area());
        let v3 = tape.batch_slice(feats, 0)?;
        let v_raw = tape.reshape(v3, vec![c, g])?;
        let att = self.model.attention.bind(tape, freeze_attention);
        let v_emb = embed_visual(tape, &att.embed, v_raw)?;
        let dv = tape.global_avg_pool(v_emb)?;
        Ok((v_raw, v_emb, dv))
    }

    /// Linear map of the pooled visual embedding into word-embedding space.
    fn seed_input(&self, tape: &mut Tape, cb: &CaptionBound, dv: TensorId) -> Result<TensorId> {
        let k = tape.shape(cb.adapter_weight)[0];
        let m = tape.shape(cb.adapter_weight)[1];
        let col = tape.reshape(dv, vec![m, 1])?;
        let proj = tape.matmul(cb.adapter_weight, col)?;
        let bias = tape.reshape(cb.adapter_bias, vec![k, 1])?;
        let sum = tape.add(proj, bias)?;
        tape.reshape(sum, vec![k])
    }

    fn readout(&self, tape: &mut Tape, cb: &CaptionBound, h: TensorId) -> Result<TensorId> {
        let vocab = tape.shape(cb.out_weight)[0];
        let d = tape.shape(cb.out_weight)[1];
        let col = tape.reshape(h, vec![d, 1])?;
        let proj = tape.matmul(cb.out_weight, col)?;
        let bias = tape.reshape(cb.out_bias, vec![vocab, 1])?;
        let sum = tape.add(proj, bias)?;
        tape.reshape(sum, vec![vocab])
    }

    /// One teacher-forced fine-tune step on a single (image, report, label)
    /// triple: caption cross-entropy plus the classification loss computed
    /// from the same decoder states, backward, optimizer step. Returns the
    /// caption loss per supervised token.
    // The argument list is the full step context; a bundle would just rename it.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step<R: Rng>(
        &self,
        image: &Tensor,
        report: &TokenizedReport,
        label: Option<usize>,
        cfg: &CaptionConfig,
        params: &[(String, SharedTensor, ParamGroup)],
        opt: &mut Optimizers,
        epoch: usize,
        rng: &mut R,
    ) -> Result<CaptionStepStats> {
        cfg.validate()?;
        if report.tokens.len() < 2 {
            return Err(Error::input("report too short to teacher-force".to_string()));
        }
        let freeze_attention = epoch < cfg.freeze_attention_epochs;
        let mut tokens = report.tokens.as_slice();
        let mut truncated = false;
        if tokens.len() > cfg.max_decode_length {
            eprintln!("warning: reference ({} tokens) truncated to max_decode_length {}", tokens.len(), cfg.max_decode_length);
            tokens = &tokens[..cfg.max_decode_length];
            truncated = true;
        }

        let mut tape = Tape::new();
        let (v_raw, v_emb, dv) = self.visual_features(&mut tape, image, freeze_attention, rng)?;
        let text_bound = self.model.text.bind(&mut tape, false);
        let att_bound = self.model.attention.bind(&mut tape, freeze_attention);
        let head_bound = self.model.head.bind(&mut tape, false);
        let cb = self.bind_caption(&mut tape, false);

        let d = self.model.cfg.lstm_dim;
        let mut h = tape.zeros(vec![d]);
        let mut m = tape.zeros(vec![d]);
        let seed = self.seed_input(&mut tape, &cb, dv)?;
        (h, m) = lstm_step(&mut tape, seed, h, m, text_bound.lstm)?;

        let mut ce_sum: Option<TensorId> = None;
        let mut sentence_cols: Vec<TensorId> = Vec::with_capacity(report.sentence_ends.len());
        for k in 1..tokens.len() {
            let x = tape.row(text_bound.embedding, tokens[k - 1] as usize)?;
            (h, m) = lstm_step(&mut tape, x, h, m, text_bound.lstm)?;
            if report.sentence_ends.contains(&(k - 1)) {
                sentence_cols.push(tape.reshape(h, vec![d, 1])?);
            }
            let logits = self.readout(&mut tape, &cb, h)?;
            let ce = tape.cross_entropy(logits, tokens[k] as usize)?;
            ce_sum = Some(match ce_sum {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let supervised = tokens.len() - 1;
        let caption_mean = tape.scale(ce_sum.expect("len >= 2"), 1.0 / supervised as Elem);

        let full_sentences = sentence_cols.len() == self.model.cfg.sentences;
        let mut classification_loss = f64::NAN;
        let total = match (label, full_sentences) {
            (Some(label), true) => {
                let mut s_raw = sentence_cols[0];
                for &col in &sentence_cols[1..] {
                    s_raw = tape.concat_cols(s_raw, col)?;
                }
                let s_emb = embed_semantic(&mut tape, &att_bound.embed, s_raw)?;
                let att = attend(&mut tape, &att_bound.attend, v_emb, s_emb)?;
                let logits = predict_logits(&mut tape, &head_bound, att.context, v_raw)?;
                let class_ce = tape.cross_entropy(logits, label)?;
                classification_loss = to_f64(tape.data(class_ce)[0]);
                tape.add(caption_mean, class_ce)?
            }
            _ => {
                if truncated && label.is_some() {
                    eprintln!("warning: truncation dropped sentence markers; skipping the classification term");
                }
                caption_mean
            }
        };
        let caption_loss = to_f64(tape.data(caption_mean)[0]);
        if !tape.data(total)[0].is_finite() {
            return Err(Error::Diverged { epoch, loss: to_f64(tape.data(total)[0]) });
        }
        tape.backward(total)?;
        opt.step(params, epoch)?;
        Ok(CaptionStepStats { caption_loss, classification_loss, supervised_tokens: supervised })
    }

    /// Greedy decode from the visual seed until EOS or the length cap.
    /// Deterministic for fixed weights; the BOS prompt is not included in
    /// the returned sequence.
    pub fn generate_report(&self, image: &Tensor, cfg: &CaptionConfig) -> Result<Vec<u32>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0); // eval path draws nothing
        let mut tape = Tape::new();
        let (_, _, dv) = self.visual_features(&mut tape, image, true, &mut rng)?;
        let text_bound = self.model.text.bind(&mut tape, true);
        let cb = self.bind_caption(&mut tape, true);

        let d = self.model.cfg.lstm_dim;
        let mut h = tape.zeros(vec![d]);
        let mut m = tape.zeros(vec![d]);
        let seed = self.seed_input(&mut tape, &cb, dv)?;
        (h, m) = lstm_step(&mut tape, seed, h, m, text_bound.lstm)?;

        let mut prev = BOS;
        let mut out = Vec::new();
        while out.len() < cfg.max_decode_length {
            let x = tape.row(text_bound.embedding, prev as usize)?;
            (h, m) = lstm_step(&mut tape, x, h, m, text_bound.lstm)?;
            let logits = self.readout(&mut tape, &cb, h)?;
            let data = tape.data(logits);
            let next = data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i as u32)
                .expect("non-empty vocabulary");
            out.push(next);
            if next == EOS {
                break;
            }
            prev = next;
        }
        Ok(out)
    }
}

/// Plain-text rendering: one sentence per line, control tokens dropped.
pub fn detokenize(vocab: &Vocabulary, tokens: &[u32]) -> String {
    let mut lines: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for &t in tokens {
        match t {
            BOS => continue,
            EOS => break,
            SENT_END => {
                lines.push(current.join(" "));
                current.clear();
            }
            _ => current.push(vocab.token(t).unwrap_or("<unk>")),
        }
    }
    if !current.is_empty() {
        lines.push(current.join(" "));
    }
    let mut out = lines.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    out
}
