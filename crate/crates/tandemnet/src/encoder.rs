//! Image encoder: a small pre-activation residual CNN producing a grid of
//! region features. The output is the feature map *before* any pooling,
//! reshaped to [C × G] so each column is one spatial region; downstream
//! attention weighs those columns individually.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamKind, ParamVisitor};
use crate::tensor::tape::{Mode, Tape, TensorId};
use crate::tensor::{shared, shared_buffer, Elem, SharedTensor, Tensor};

pub struct Conv2dLayer {
    pub weight: SharedTensor,
    pub bias: SharedTensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        // Kaiming-uniform bound for ReLU fan-in.
        let bound = (6.0 / (cin * k * k) as Elem).sqrt();
        Conv2dLayer {
            weight: shared(Tensor::uniform(rng, vec![cout, cin, k, k], -bound, bound)),
            bias: shared(Tensor::zeros(vec![cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: TensorId, frozen: bool) -> Result<TensorId> {
        let w = if frozen { tape.frozen(&self.weight) } else { tape.param(&self.weight) };
        let b = if frozen { tape.frozen(&self.bias) } else { tape.param(&self.bias) };
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }
}

pub struct BatchNorm2d {
    pub gamma: SharedTensor,
    pub beta: SharedTensor,
    pub running_mean: SharedTensor,
    pub running_var: SharedTensor,
    pub momentum: Elem,
    pub eps: Elem,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: shared(Tensor::full(vec![channels], 1.0)),
            beta: shared(Tensor::zeros(vec![channels])),
            running_mean: shared_buffer(Tensor::zeros(vec![channels])),
            running_var: shared_buffer(Tensor::full(vec![channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: TensorId, mode: Mode, frozen: bool) -> Result<TensorId> {
        let g = if frozen { tape.frozen(&self.gamma) } else { tape.param(&self.gamma) };
        let b = if frozen { tape.frozen(&self.beta) } else { tape.param(&self.beta) };
        tape.batch_norm(x, g, b, &self.running_mean, &self.running_var, mode, self.momentum, self.eps)
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }
}

/// Pre-activation residual block: norm → ReLU → conv, twice, with dropout
/// after each convolution. The shortcut is the raw input, or a 1×1
/// projection of the pre-activated input when channels or stride change.
pub struct ResidualBlock {
    bn1: BatchNorm2d,
    conv1: Conv2dLayer,
    bn2: BatchNorm2d,
    conv2: Conv2dLayer,
    proj: Option<Conv2dLayer>,
    dropout: Elem,
}

impl ResidualBlock {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, stride: usize, dropout: Elem) -> Self {
        let proj = (cin != cout || stride != 1).then(|| Conv2dLayer::new(rng, cin, cout, 1, stride, 0));
        ResidualBlock {
            bn1: BatchNorm2d::new(cin),
            conv1: Conv2dLayer::new(rng, cin, cout, 3, stride, 1),
            bn2: BatchNorm2d::new(cout),
            conv2: Conv2dLayer::new(rng, cout, cout, 3, 1, 1),
            proj,
            dropout,
        }
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        x: TensorId,
        mode: Mode,
        frozen: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        let pre = self.bn1.forward(tape, x, mode, frozen)?;
        let act = tape.relu(pre);
        let mut h = self.conv1.forward(tape, act, frozen)?;
        h = tape.dropout(h, self.dropout, mode, rng)?;
        h = self.bn2.forward(tape, h, mode, frozen)?;
        h = tape.relu(h);
        h = self.conv2.forward(tape, h, frozen)?;
        h = tape.dropout(h, self.dropout, mode, rng)?;
        let shortcut = match &self.proj {
            Some(p) => p.forward(tape, act, frozen)?,
            None => x,
        };
        tape.add(h, shortcut)
    }

    /// Zeroes the final convolution so the residual branch outputs exactly 0
    /// and the block is the identity (when no projection exists). Test hook.
    pub fn zero_residual_branch(&self) {
        self.conv2.weight.borrow_mut().data_mut().fill(0.0);
        self.conv2.bias.borrow_mut().data_mut().fill(0.0);
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(p) = &self.proj {
            p.visit(&join(prefix, "proj"), f);
        }
    }
}

/// Architecture of the encoder body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderArch {
    /// Stem conv + residual stages, each stage halving the spatial side.
    Residual {
        stem_channels: usize,
        stem_stride: usize,
        stage_channels: Vec<usize>,
        blocks_per_stage: usize,
    },
    /// Plain conv/ReLU stack; used for tiny finite-difference models.
    ConvStack { channels: Vec<usize>, strides: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub arch: EncoderArch,
    pub dropout: Elem,
}

impl EncoderConfig {
    /// Desk-scale default: 32×32 input → 64 channels on a 4×4 grid.
    pub fn desk() -> Self {
        EncoderConfig {
            input_size: 32,
            arch: EncoderArch::Residual {
                stem_channels: 16,
                stem_stride: 1,
                stage_channels: vec![16, 32, 64],
                blocks_per_stage: 2,
            },
            dropout: 0.3,
        }
    }

    /// Full-scale variant: 224×224 input → 256 channels on a 14×14 grid.
    pub fn paper_scale() -> Self {
        EncoderConfig {
            input_size: 224,
            arch: EncoderArch::Residual {
                stem_channels: 16,
                stem_stride: 2,
                stage_channels: vec![64, 128, 256],
                blocks_per_stage: 2,
            },
            dropout: 0.3,
        }
    }

    /// Two plain convolutions, 8×8 input → 4 channels on a 2×2 grid. Small
    /// enough to finite-difference the entire model through it.
    pub fn toy() -> Self {
        EncoderConfig {
            input_size: 8,
            arch: EncoderArch::ConvStack { channels: vec![4, 4], strides: vec![2, 2] },
            dropout: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        match &self.arch {
            EncoderArch::Residual { stage_channels, .. } => *stage_channels.last().unwrap_or(&0),
            EncoderArch::ConvStack { channels, .. } => *channels.last().unwrap_or(&0),
        }
    }

    pub fn total_stride(&self) -> usize {
        match &self.arch {
            EncoderArch::Residual { stem_stride, stage_channels, .. } => {
                stem_stride * (1 << stage_channels.len())
            }
            EncoderArch::ConvStack { strides, .. } => strides.iter().product(),
        }
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.total_stride()
    }

    pub fn grid_area(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.total_stride();
        if stride == 0 || !self.input_size.is_multiple_of(stride) || self.input_size / stride == 0 {
            return Err(Error::config(
                "encoder",
                format!("input size {} not divisible into a grid by total stride {stride}", self.input_size),
            ));
        }
        if self.channels() == 0 {
            return Err(Error::config("encoder", "no output channels".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Grid features for one image: columns of `matrix` ([C × G]) are regions in
/// row-major grid order.
pub struct VisualFeatures {
    pub matrix: TensorId,
    pub channels: usize,
    pub grid_area: usize,
    pub source_id: u64,
}

enum Body {
    Residual { stem: Conv2dLayer, stages: Vec<Vec<ResidualBlock>>, final_bn: BatchNorm2d },
    Stack { convs: Vec<Conv2dLayer> },
}

pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    body: Body,
}

impl ImageEncoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let body = match &cfg.arch {
            EncoderArch::Residual { stem_channels, stem_stride, stage_channels, blocks_per_stage } => {
                let stem = Conv2dLayer::new(rng, 3, *stem_channels, 3, *stem_stride, 1);
                let mut stages = Vec::new();
                let mut cin = *stem_channels;
                for &cout in stage_channels {
                    let mut blocks = Vec::new();
                    for b in 0..*blocks_per_stage {
                        let stride = if b == 0 { 2 } else { 1 };
                        let in_ch = if b == 0 { cin } else { cout };
                        blocks.push(ResidualBlock::new(rng, in_ch, cout, stride, cfg.dropout));
                    }
                    stages.push(blocks);
                    cin = cout;
                }
                Body::Residual { stem, stages, final_bn: BatchNorm2d::new(cin) }
            }
            EncoderArch::ConvStack { channels, strides } => {
                if channels.len() != strides.len() {
                    return Err(Error::config(
                        "encoder",
                        format!("{} channels vs {} strides", channels.len(), strides.len()),
                    ));
                }
                let mut convs = Vec::new();
                let mut cin = 3;
                for (&cout, &stride) in channels.iter().zip(strides) {
                    convs.push(Conv2dLayer::new(rng, cin, cout, 3, stride, 1));
                    cin = cout;
                }
                Body::Stack { convs }
            }
        };
        Ok(ImageEncoder { cfg, body })
    }

    /// [B,3,H,W] → [B,C,g,g]. `frozen` binds all params as constants.
    pub fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        x: TensorId,
        mode: Mode,
        frozen: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.input_size || s[3] != self.cfg.input_size {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "expected [B,3,{},{}], got {}",
                    self.cfg.input_size,
                    self.cfg.input_size,
                    crate::tensor::fmt_shape(&s)
                ),
            ));
        }
        match &self.body {
            Body::Residual { stem, stages, final_bn } => {
                let mut h = stem.forward(tape, x, frozen)?;
                h = tape.dropout(h, self.cfg.dropout, mode, rng)?;
                for stage in stages {
                    for block in stage {
                        h = block.forward(tape, h, mode, frozen, rng)?;
                    }
                }
                h = final_bn.forward(tape, h, mode, frozen)?;
                Ok(tape.relu(h))
            }
            Body::Stack { convs } => {
                let mut h = x;
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(tape, h, frozen)?;
                    if i + 1 < convs.len() {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
        }
    }

    /// Single image [3,H,W] → region matrix [C × G].
    pub fn encode_image<R: Rng>(
        &self,
        tape: &mut Tape,
        img: &Tensor,
        source_id: u64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<VisualFeatures> {
        let mut batched = Tensor::zeros(vec![1, 3, self.cfg.input_size, self.cfg.input_size]);
        if img.shape() != &batched.shape()[1..] {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "expected [3,{},{}], got {}",
                    self.cfg.input_size,
                    self.cfg.input_size,
                    crate::tensor::fmt_shape(img.shape())
                ),
            ));
        }
        batched.data_mut().copy_from_slice(img.data());
        let x = tape.input(&batched);
        let grid = self.forward_batch(tape, x, mode, false, rng)?;
        let (c, g) = (self.cfg.channels(), self.cfg.grid_area());
        let matrix = tape.reshape(grid, vec![c, g])?;
        Ok(VisualFeatures { matrix, channels: c, grid_area: g, source_id })
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        match &self.body {
            Body::Residual { stem, stages, final_bn } => {
                stem.visit(&join(prefix, "stem"), f);
                for (si, stage) in stages.iter().enumerate() {
                    for (bi, block) in stage.iter().enumerate() {
                        block.visit(&join(prefix, &format!("stage{si}.block{bi}")), f);
                    }
                }
                final_bn.visit(&join(prefix, "final_bn"), f);
            }
            Body::Stack { convs } => {
                for (i, conv) in convs.iter().enumerate() {
                    conv.visit(&join(prefix, &format!("conv{i}")), f);
                }
            }
        }
    }

    /// First-layer weight cell (test hook for gradient-flow checks).
    pub fn first_conv_weight(&self) -> &SharedTensor {
        match &self.body {
            Body::Residual { stem, .. } => &stem.weight,
            Body::Stack { convs } => &convs[0].weight,
        }
    }

    #[doc(hidden)]
    pub fn residual_block_for_tests(&self, stage: usize, block: usize) -> Option<&ResidualBlock> {
        match &self.body {
            Body::Residual { stages, .. } => stages.get(stage).and_then(|s| s.get(block)),
            Body::Stack { .. } => None,
        }
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
    fn desk_config_shapes() {
        let cfg = EncoderConfig::desk();
        assert_eq!(cfg.channels(), 64);
        assert_eq!(cfg.grid_side(), 4);
        assert_eq!(cfg.grid_area(), 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn paper_scale_config_constructs_and_traces_shapes() {
        let cfg = EncoderConfig::paper_scale();
        assert_eq!(cfg.channels(), 256);
        assert_eq!(cfg.grid_area(), 196);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ImageEncoder::new(cfg, &mut rng).unwrap();
        let img = Tensor::uniform(&mut rng, vec![3, 224, 224], -1.0, 1.0);
        let mut tape = Tape::new();
        let v = enc.encode_image(&mut tape, &img, 0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.shape(v.matrix), &[256, 196]);
    }

    #[test]
    fn toy_config_is_a_two_conv_stack() {
        let cfg = EncoderConfig::toy();
        assert_eq!((cfg.channels(), cfg.grid_side()), (4, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ImageEncoder::new(cfg, &mut rng).unwrap();
        let img = Tensor::uniform(&mut rng, vec![3, 8, 8], -1.0, 1.0);
        let mut tape = Tape::new();
        let v = enc.encode_image(&mut tape, &img, 7, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.shape(v.matrix), &[4, 4]);
        assert_eq!(v.source_id, 7);
    }

    #[test]
    fn indivisible_grid_is_a_config_error() {
        let mut cfg = EncoderConfig::desk();
        cfg.input_size = 33;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn all_zero_image_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ImageEncoder::new(EncoderConfig::desk(), &mut rng).unwrap();
        let img = Tensor::zeros(vec![3, 32, 32]);
        let mut tape = Tape::new();
        // Train mode: batch statistics of a constant input have zero
        // variance, which must not divide by zero.
        let v = enc.encode_image(&mut tape, &img, 0, Mode::Train, &mut rng).unwrap();
        assert!(tape.data(v.matrix).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ImageEncoder::new(EncoderConfig::desk(), &mut rng).unwrap();
        let img = Tensor::uniform(&mut rng, vec![3, 32, 32], 0.0, 1.0);
        let run = |rng: &mut ChaCha8Rng| {
            let mut tape = Tape::new();
            let v = enc.encode_image(&mut tape, &img, 0, Mode::Eval, rng).unwrap();
            tape.data(v.matrix).to_vec()
        };
        let a = run(&mut rng);
        let b = run(&mut rng);
        assert_eq!(a, b, "eval forward must not consume entropy or batch stats");
    }

    #[test]
    fn first_layer_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ImageEncoder::new(EncoderConfig::desk(), &mut rng).unwrap();
        let img = Tensor::uniform(&mut rng, vec![3, 32, 32], 0.0, 1.0);
        let mut tape = Tape::new();
        let v = enc.encode_image(&mut tape, &img, 0, Mode::Train, &mut rng).unwrap();
        let pooled = tape.global_avg_pool(v.matrix).unwrap();
        let sq = tape.mul(pooled, pooled).unwrap();
        let col = tape.reshape(sq, vec![64, 1]).unwrap();
        let ones = tape.input(&Tensor::full(vec![1, 64], 1.0));
        let s = tape.matmul(ones, col).unwrap();
        let s = tape.reshape(s, vec![1]).unwrap();
        tape.backward(s).unwrap();
        let norm = enc.first_conv_weight().borrow().grad_norm_sq();
        assert!(norm > 0.0, "stem weight grad norm is zero");
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = ResidualBlock::new(&mut rng, 4, 4, 1, 0.0);
        block.zero_residual_branch();
        let x = Tensor::uniform(&mut rng, vec![1, 4, 5, 5], -1.0, 1.0);
        let mut tape = Tape::new();
        let xid = tape.input(&x);
        let y = block.forward(&mut tape, xid, Mode::Eval, false, &mut rng).unwrap();
        assert_eq!(tape.data(y), x.data(), "identity shortcut plus zero branch");
    }

    #[test]
    fn residual_block_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = ResidualBlock::new(&mut rng, 2, 2, 1, 0.0);
        let x = Tensor::uniform(&mut rng, vec![1, 2, 4, 4], -1.0, 1.0);
        let err = grad_check(
            |tape, ids| {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let y = block.forward(tape, ids[0], Mode::Train, false, &mut r)?;
                let n = tape.data(y).len();
                let flat = tape.reshape(y, vec![n])?;
                let sq = tape.mul(flat, flat)?;
                let col = tape.reshape(sq, vec![n, 1])?;
                let ones = tape.input(&Tensor::full(vec![1, n], 1.0));
                let s = tape.matmul(ones, col)?;
                tape.reshape(s, vec![1])
            },
            &[x],
            tol::FD_EPSILON,
        )
        .unwrap();
        assert!(err < tol::GRAD_CHECK_MAX_REL, "residual block input grad err {err}");
    }

    #[test]
    fn desk_forward_backward_under_100ms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = ImageEncoder::new(EncoderConfig::desk(), &mut rng).unwrap();
        let img = Tensor::uniform(&mut rng, vec![3, 32, 32], 0.0, 1.0);
        // Warm once, then time.
        for _ in 0..2 {
            let mut tape = Tape::new();
            let v = enc.encode_image(&mut tape, &img, 0, Mode::Train, &mut rng).unwrap();
            let pooled = tape.global_avg_pool(v.matrix).unwrap();
            let col = tape.reshape(pooled, vec![64, 1]).unwrap();
            let ones = tape.input(&Tensor::full(vec![1, 64], 1.0));
            let s = tape.matmul(ones, col).unwrap();
            let s = tape.reshape(s, vec![1]).unwrap();
            tape.backward(s).unwrap();
        }
        let start = std::time::Instant::now();
        let mut tape = Tape::new();
        let v = enc.encode_image(&mut tape, &img, 0, Mode::Train, &mut rng).unwrap();
        let pooled = tape.global_avg_pool(v.matrix).unwrap();
        let col = tape.reshape(pooled, vec![64, 1]).unwrap();
        let ones = tape.input(&Tensor::full(vec![1, 64], 1.0));
        let s = tape.matmul(ones, col).unwrap();
        let s = tape.reshape(s, vec![1]).unwrap();
        tape.backward(s).unwrap();
        let elapsed = start.elapsed();
        assert!(elapsed.as_millis() < 100, "forward+backward took {elapsed:?}");
    }
}
