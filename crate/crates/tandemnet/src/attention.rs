//! Dual attention over image regions and report sentences. Both inputs are
//! first squashed by a learned embedding, then scored jointly: each side's
//! scores are conditioned on the pooled summary of the *other* side, a single
//! softmax normalizes all G+N positions together, and the context vector is
//! the α-weighted mix of every column.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamKind, ParamVisitor};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{fmt_shape, shared, Elem, SharedTensor, Tensor};

/// Weights for embedding and scoring. The score bias is a single scalar:
/// softmax is shift-invariant, so any richer per-position bias would be
/// unobservable anyway (see `score_bias_never_changes_the_outcome`).
pub struct DualAttentionParams {
    pub embed_visual_weight: SharedTensor,   // [C, C], 1x1 conv over region columns
    pub embed_visual_bias: SharedTensor,     // [C]
    pub embed_semantic_weight: SharedTensor, // [D, D]
    pub embed_semantic_bias: SharedTensor,   // [D]
    pub w_visual: SharedTensor,              // [M, C], scores region columns
    pub w_visual_pooled: SharedTensor,       // [M, C], injects pooled V into sentence scores
    pub w_semantic: SharedTensor,            // [M, D], scores sentence columns
    pub w_semantic_pooled: SharedTensor,     // [M, D], injects pooled S into region scores
    pub score_weight: SharedTensor,          // [M]
    pub score_bias: SharedTensor,            // [1]
    pub m: usize,
    pub c: usize,
    pub d: usize,
}

impl DualAttentionParams {
    /// Requires M == C == D: the context vector is added to a pooled [C]
    /// skip downstream, and region/sentence columns share one matrix.
    pub fn new<R: Rng>(rng: &mut R, m: usize, c: usize, d: usize) -> Result<Self> {
        if m != c || c != d {
            return Err(Error::config(
                "attention",
                format!("score width M={m}, visual C={c} and semantic D={d} must all match"),
            ));
        }
        let bound = 1.0 / (m as Elem).sqrt();
        let mut mat = |rows: usize, cols: usize| shared(Tensor::uniform(rng, vec![rows, cols], -bound, bound));
        let embed_visual_weight = mat(c, c);
        let embed_semantic_weight = mat(d, d);
        let w_visual = mat(m, c);
        let w_visual_pooled = mat(m, c);
        let w_semantic = mat(m, d);
        let w_semantic_pooled = mat(m, d);
        Ok(DualAttentionParams {
            embed_visual_weight,
            embed_visual_bias: shared(Tensor::zeros(vec![c])),
            embed_semantic_weight,
            embed_semantic_bias: shared(Tensor::zeros(vec![d])),
            w_visual,
            w_visual_pooled,
            w_semantic,
            w_semantic_pooled,
            score_weight: shared(Tensor::uniform(rng, vec![m], -bound, bound)),
            score_bias: shared(Tensor::zeros(vec![1])),
            m,
            c,
            d,
        })
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> DualAttentionBound {
        let reg = |tape: &mut Tape, p: &SharedTensor| if frozen { tape.frozen(p) } else { tape.param(p) };
        DualAttentionBound {
            embed: EmbedBound {
                visual_weight: reg(tape, &self.embed_visual_weight),
                visual_bias: reg(tape, &self.embed_visual_bias),
                semantic_weight: reg(tape, &self.embed_semantic_weight),
                semantic_bias: reg(tape, &self.embed_semantic_bias),
            },
            attend: AttendBound {
                w_visual: reg(tape, &self.w_visual),
                w_visual_pooled: reg(tape, &self.w_visual_pooled),
                w_semantic: reg(tape, &self.w_semantic),
                w_semantic_pooled: reg(tape, &self.w_semantic_pooled),
                score_weight: reg(tape, &self.score_weight),
                score_bias: reg(tape, &self.score_bias),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "embed_visual_weight"), &self.embed_visual_weight, ParamKind::Trainable);
        f(join(prefix, "embed_visual_bias"), &self.embed_visual_bias, ParamKind::Trainable);
        f(join(prefix, "embed_semantic_weight"), &self.embed_semantic_weight, ParamKind::Trainable);
        f(join(prefix, "embed_semantic_bias"), &self.embed_semantic_bias, ParamKind::Trainable);
        f(join(prefix, "w_visual"), &self.w_visual, ParamKind::Trainable);
        f(join(prefix, "w_visual_pooled"), &self.w_visual_pooled, ParamKind::Trainable);
        f(join(prefix, "w_semantic"), &self.w_semantic, ParamKind::Trainable);
        f(join(prefix, "w_semantic_pooled"), &self.w_semantic_pooled, ParamKind::Trainable);
        f(join(prefix, "score_weight"), &self.score_weight, ParamKind::Trainable);
        f(join(prefix, "score_bias"), &self.score_bias, ParamKind::Trainable);
    }
}

#[derive(Clone, Copy)]
pub struct EmbedBound {
    pub visual_weight: TensorId,
    pub visual_bias: TensorId,
    pub semantic_weight: TensorId,
    pub semantic_bias: TensorId,
}

#[derive(Clone, Copy)]
pub struct AttendBound {
    pub w_visual: TensorId,
    pub w_visual_pooled: TensorId,
    pub w_semantic: TensorId,
    pub w_semantic_pooled: TensorId,
    pub score_weight: TensorId,
    pub score_bias: TensorId,
}

#[derive(Clone, Copy)]
pub struct DualAttentionBound {
    pub embed: EmbedBound,
    pub attend: AttendBound,
}

pub struct AttentionResult {
    /// α over all positions: first G regions, then N sentences. Sums to 1.
    pub weights: TensorId,
    /// c = [V S]·α, length M.
    pub context: TensorId,
    /// Region scores conditioned on the pooled text summary, [M × G].
    pub visual_given_text: TensorId,
    /// Sentence scores conditioned on the pooled image summary, [M × N].
    pub semantic_given_visual: TensorId,
    pub regions: usize,
    pub sentences: usize,
}

fn embed_columns(tape: &mut Tape, weight: TensorId, bias: TensorId, x: TensorId) -> Result<TensorId> {
    let lin = tape.matmul(weight, x)?;
    let lin = tape.bcast_col(lin, bias)?;
    Ok(tape.tanh(lin))
}

pub fn embed_visual(tape: &mut Tape, e: &EmbedBound, v_raw: TensorId) -> Result<TensorId> {
    embed_columns(tape, e.visual_weight, e.visual_bias, v_raw)
}

pub fn embed_semantic(tape: &mut Tape, e: &EmbedBound, s_raw: TensorId) -> Result<TensorId> {
    embed_columns(tape, e.semantic_weight, e.semantic_bias, s_raw)
}

/// tanh-squashes both feature matrices, preserving their shapes.
pub fn embed_inputs(
    tape: &mut Tape,
    e: &EmbedBound,
    v_raw: TensorId,
    s_raw: TensorId,
) -> Result<(TensorId, TensorId)> {
    Ok((embed_visual(tape, e, v_raw)?, embed_semantic(tape, e, s_raw)?))
}

fn check_finite(tape: &Tape, id: TensorId, stage: &'static str) -> Result<()> {
    if tape.data(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(stage, "non-finite attention intermediate".to_string()))
    }
}

/// Scores every region and sentence column jointly and mixes them.
///
/// Region scores see the pooled text summary and sentence scores see the
/// pooled image summary, so the two sides condition each other before the
/// shared softmax.
pub fn attend(tape: &mut Tape, p: &AttendBound, v: TensorId, s: TensorId) -> Result<AttentionResult> {
    let (m, c) = (tape.shape(p.w_visual)[0], tape.shape(p.w_visual)[1]);
    let d = tape.shape(p.w_semantic)[1];
    let vs = tape.shape(v).to_vec();
    let ss = tape.shape(s).to_vec();
    if vs.len() != 2 || vs[0] != c || vs[1] == 0 {
        return Err(Error::dim("attend", format!("visual features {} incompatible with C={c}", fmt_shape(&vs))));
    }
    if ss.len() != 2 || ss[0] != d || ss[1] == 0 {
        return Err(Error::dim("attend", format!("semantic features {} incompatible with D={d}", fmt_shape(&ss))));
    }
    let (g, n) = (vs[1], ss[1]);

    let pooled_v = tape.global_avg_pool(v)?; // [C]
    let pooled_s = tape.global_avg_pool(s)?; // [D]
    let pooled_v = tape.reshape(pooled_v, vec![c, 1])?;
    let pooled_s = tape.reshape(pooled_s, vec![d, 1])?;

    let region_terms = tape.matmul(p.w_visual, v)?; // [M, G]
    let text_summary = tape.matmul(p.w_semantic_pooled, pooled_s)?; // [M, 1]
    let text_summary = tape.reshape(text_summary, vec![m])?;
    let z_regions = tape.bcast_col(region_terms, text_summary)?;
    let z_regions = tape.tanh(z_regions);
    check_finite(tape, z_regions, "region scores")?;

    let sentence_terms = tape.matmul(p.w_semantic, s)?; // [M, N]
    let image_summary = tape.matmul(p.w_visual_pooled, pooled_v)?; // [M, 1]
    let image_summary = tape.reshape(image_summary, vec![m])?;
    let z_sentences = tape.bcast_col(sentence_terms, image_summary)?;
    let z_sentences = tape.tanh(z_sentences);
    check_finite(tape, z_sentences, "sentence scores")?;

    let z = tape.concat_cols(z_regions, z_sentences)?; // [M, G+N]
    let w_row = tape.reshape(p.score_weight, vec![1, m])?;
    let scores = tape.matmul(w_row, z)?; // [1, G+N]
    let scores = tape.reshape(scores, vec![g + n])?;
    let scores = tape.add_scalar(scores, p.score_bias)?;
    check_finite(tape, scores, "scores")?;

    let alpha = tape.softmax(scores)?;
    let columns = tape.concat_cols(v, s)?; // [C, G+N]
    let alpha_col = tape.reshape(alpha, vec![g + n, 1])?;
    let context = tape.matmul(columns, alpha_col)?;
    let context = tape.reshape(context, vec![c])?;
    check_finite(tape, context, "context")?;

    Ok(AttentionResult {
        weights: alpha,
        context,
        visual_given_text: z_regions,
        semantic_given_visual: z_sentences,
        regions: g,
        sentences: n,
    })
}

/// Attention with the text side absent: S is an all-zero [D × N] matrix, so
/// sentence columns still occupy softmax slots but carry no signal.
pub fn attend_image_only(
    tape: &mut Tape,
    p: &AttendBound,
    v: TensorId,
    sentences: usize,
) -> Result<AttentionResult> {
    let d = tape.shape(p.w_semantic)[1];
    let zeros = tape.zeros(vec![d, sentences]);
    attend(tape, p, v, zeros)
}

/// α as CSV: regions in row-major grid order, then sentence features.
pub fn alpha_csv(alpha: &[Elem], regions: usize, sentences: usize) -> Result<String> {
    if alpha.len() != regions + sentences {
        return Err(Error::input(format!(
            "{} attention weights for {regions} regions + {sentences} sentences",
            alpha.len()
        )));
    }
    let mut out = String::from("label,weight\n");
    for (i, w) in alpha.iter().enumerate() {
        if i < regions {
            out.push_str(&format!("region_{i},{w}\n"));
        } else {
            out.push_str(&format!("feature_{},{w}\n", i - regions));
        }
    }
    Ok(out)
}
