//! The PainAttnNet network.
//!
//! `N x 1 x 2816` EDA windows flow through
//!
//! 1. a two-branch multiscale CNN (large first kernel 400, small first kernel 50)
//!    whose outputs are concatenated along time to 75 steps,
//! 2. a squeeze-and-excitation residual block that recalibrates channels,
//! 3. one or more transformer encoder blocks where three causal convolutions
//!    produce queries, keys and values for multi-head attention over channel
//!    tokens of width 75,
//! 4. a two-layer classifier head producing logits.
//!
//! Every shape is checked when the model is built, before any data is seen.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::autograd::{missing_cache, scoped, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::layers::{
    softmax, softmax_backward_in_place, softmax_in_place, BatchNorm1d, Conv1d, Conv1dSpec, Dropout, Gelu, LayerNorm,
    Linear, MaxPool1d, Relu, Sequential, Sigmoid,
};
use crate::tensor::{Reduce, Tensor};
use crate::Rng;

/// EDA window length: 5.5 s at 512 Hz.
pub const INPUT_LEN: usize = 2816;
/// Time length of the concatenated multiscale features, and the token width of the encoder.
pub const FEATURE_LEN: usize = 75;

/// One convolution stage inside a branch (input channels are implied by the previous stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStage {
    pub kernel: usize,
    pub stride: usize,
}

/// conv -> BN -> GELU -> pool -> dropout -> conv -> BN -> GELU -> conv -> BN -> GELU -> pool
#[derive(Debug, Clone, PartialEq)]
pub struct BranchConfig {
    pub conv1: ConvStage,
    pub pool1: PoolStage,
    pub dropout: f64,
    pub conv2: ConvStage,
    pub conv3: ConvStage,
    pub pool2: PoolStage,
}

impl BranchConfig {
    fn conv_spec(stage: &ConvStage, in_channels: usize) -> Conv1dSpec {
        Conv1dSpec::new(in_channels, stage.out_channels, stage.kernel, stage.stride, stage.pad)
    }

    /// Time length after every stage, failing if any stage cannot be applied.
    pub fn lengths(&self, input_len: usize) -> Result<[usize; 5]> {
        let pool = |p: &PoolStage, l: usize| MaxPool1d::new(p.kernel, p.stride)?.output_len(l);
        let l1 = Self::conv_spec(&self.conv1, 1).output_len(input_len)?;
        let l2 = pool(&self.pool1, l1)?;
        let l3 = Self::conv_spec(&self.conv2, 1).output_len(l2)?;
        let l4 = Self::conv_spec(&self.conv3, 1).output_len(l3)?;
        let l5 = pool(&self.pool2, l4)?;
        Ok([l1, l2, l3, l4, l5])
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_channels
    }

    fn build(&self, rng: &mut Rng) -> Result<Sequential> {
        let c1 = Self::conv_spec(&self.conv1, 1);
        let c2 = Self::conv_spec(&self.conv2, self.conv1.out_channels);
        let c3 = Self::conv_spec(&self.conv3, self.conv2.out_channels);
        let mut s = Sequential::new();
        s.push("conv1", Conv1d::new(c1, rng)?);
        s.push("bn1", BatchNorm1d::new(c1.out_channels));
        s.push("gelu1", Gelu::new());
        s.push("pool1", MaxPool1d::new(self.pool1.kernel, self.pool1.stride)?);
        s.push("drop", Dropout::new(self.dropout)?);
        s.push("conv2", Conv1d::new(c2, rng)?);
        s.push("bn2", BatchNorm1d::new(c2.out_channels));
        s.push("gelu2", Gelu::new());
        s.push("conv3", Conv1d::new(c3, rng)?);
        s.push("bn3", BatchNorm1d::new(c3.out_channels));
        s.push("gelu3", Gelu::new());
        s.push("pool2", MaxPool1d::new(self.pool2.kernel, self.pool2.stride)?);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MscnConfig {
    pub large: BranchConfig,
    pub small: BranchConfig,
}

impl MscnConfig {
    pub fn reference() -> Self {
        let conv = |kernel, stride, pad, out_channels| ConvStage {
            kernel,
            stride,
            pad,
            out_channels,
        };
        let pool = |kernel, stride| PoolStage { kernel, stride };
        Self {
            large: BranchConfig {
                conv1: conv(400, 50, 192, 64),
                pool1: pool(4, 2),
                dropout: 0.5,
                conv2: conv(7, 1, 3, 128),
                conv3: conv(7, 1, 3, 128),
                pool2: pool(3, 1),
            },
            small: BranchConfig {
                conv1: conv(50, 6, 24, 64),
                pool1: pool(8, 8),
                dropout: 0.5,
                conv2: conv(9, 1, 4, 128),
                conv3: conv(9, 1, 4, 128),
                pool2: pool(9, 1),
            },
        }
    }

    /// Output `(channels, length)`; the length must come out at exactly [`FEATURE_LEN`].
    pub fn output_shape(&self, input_len: usize) -> Result<(usize, usize)> {
        let large = self.large.lengths(input_len)?[4];
        let small = self.small.lengths(input_len)?[4];
        if self.large.out_channels() != self.small.out_channels() {
            return Err(Error::Config(format!(
                "mscn: branch channel counts differ ({} vs {})",
                self.large.out_channels(),
                self.small.out_channels()
            )));
        }
        if large + small != FEATURE_LEN {
            return Err(Error::Config(format!(
                "mscn: concatenated length {large} + {small} = {} must equal {FEATURE_LEN}",
                large + small
            )));
        }
        Ok((self.large.out_channels(), FEATURE_LEN))
    }
}

/// Squeeze-and-excitation residual block geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeResNetConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub reduction: usize,
}

impl SeResNetConfig {
    pub fn bottleneck(&self) -> Result<usize> {
        if self.reduction == 0 || self.mid_channels % self.reduction != 0 || self.mid_channels / self.reduction < 1 {
            return Err(Error::Config(format!(
                "se block: mid channels {} not divisible into a bottleneck by reduction {}",
                self.mid_channels, self.reduction
            )));
        }
        Ok(self.mid_channels / self.reduction)
    }

    /// The residual path needs a 1x1 projection when channel counts differ.
    pub fn downsample(&self) -> bool {
        self.in_channels != self.mid_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub heads: usize,
    pub width: usize,
    pub tcn_kernel: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub mscn: MscnConfig,
    pub se: SeResNetConfig,
    pub encoder: EncoderConfig,
    pub classifier_hidden: usize,
    pub num_classes: usize,
}

/// Shapes at each stage boundary for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeTrace {
    pub mscn: (usize, usize),
    pub se: (usize, usize),
    pub logits: usize,
}

impl ModelConfig {
    /// Reference hyperparameters: 128 x 75 multiscale features, 30 SE channels
    /// (reduction 5), five heads over width 75, causal kernel 7, FFN width 120.
    pub fn reference(num_classes: usize) -> Self {
        Self {
            input_len: INPUT_LEN,
            mscn: MscnConfig::reference(),
            se: SeResNetConfig {
                in_channels: 128,
                mid_channels: 30,
                reduction: 5,
            },
            encoder: EncoderConfig {
                heads: 5,
                width: FEATURE_LEN,
                tcn_kernel: 7,
                ffn_hidden: 120,
                dropout: 0.1,
                blocks: 1,
            },
            classifier_hidden: 64,
            num_classes,
        }
    }

    /// Channel widths divided by eight; every time length (and width 75) kept.
    pub fn mini(num_classes: usize) -> Self {
        let mut cfg = Self::reference(num_classes);
        for branch in [&mut cfg.mscn.large, &mut cfg.mscn.small] {
            branch.conv1.out_channels = 8;
            branch.conv2.out_channels = 16;
            branch.conv3.out_channels = 16;
        }
        cfg.se = SeResNetConfig {
            in_channels: 16,
            mid_channels: 4,
            reduction: 2,
        };
        cfg.encoder.ffn_hidden = 15;
        cfg.classifier_hidden = 8;
        cfg
    }

    /// Checks the whole pipeline's shape contract.
    pub fn validate(&self) -> Result<ShapeTrace> {
        let (c, l) = self.mscn.output_shape(self.input_len)?;
        if self.se.in_channels != c {
            return Err(Error::Config(format!(
                "se block expects {} input channels, multiscale CNN produces {c}",
                self.se.in_channels
            )));
        }
        self.se.bottleneck()?;
        let e = &self.encoder;
        if e.width != l {
            return Err(Error::Config(format!("encoder width {} must equal feature length {l}", e.width)));
        }
        if e.heads == 0 || e.tcn_kernel == 0 || e.ffn_hidden == 0 || e.blocks == 0 {
            return Err(Error::Config(format!("encoder: zero-sized setting in {e:?}")));
        }
        if !(0.0..1.0).contains(&e.dropout) || !(0.0..1.0).contains(&self.mscn.large.dropout) || !(0.0..1.0).contains(&self.mscn.small.dropout) {
            return Err(Error::Config("dropout probabilities must lie in [0, 1)".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.classifier_hidden == 0 {
            return Err(Error::Config("classifier hidden width must be positive".into()));
        }
        Ok(ShapeTrace {
            mscn: (c, l),
            se: (self.se.mid_channels, l),
            logits: self.num_classes,
        })
    }
}

// ---------------------------------------------------------------------------

/// Two convolution branches concatenated along time.
pub struct Mscn {
    large: Sequential,
    small: Sequential,
    split: Option<usize>,
}

impl Mscn {
    pub fn new(cfg: &MscnConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            large: cfg.large.build(rng)?,
            small: cfg.small.build(rng)?,
            split: None,
        })
    }
}

impl Layer for Mscn {
    fn kind(&self) -> &'static str {
        "mscn"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let a = self.large.forward(x, rng)?;
        let b = self.small.forward(x, rng)?;
        self.split = Some(a.dim(2));
        Tensor::concat(&[&a, &b], 2)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let split = self.split.take().ok_or_else(|| missing_cache("mscn"))?;
        let total = upstream.dim(2);
        if split > total {
            return Err(Error::Dimension("mscn: upstream shorter than cached split".into()));
        }
        let ga = upstream.narrow(2, 0, split)?;
        let gb = upstream.narrow(2, split, total - split)?;
        let mut dx = self.large.backward(&ga)?;
        dx.add_assign(&self.small.backward(&gb)?)?;
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.large.visit_params(&mut |n, p| f(&scoped("large", n), p));
        self.small.visit_params(&mut |n, p| f(&scoped("small", n), p));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.large.visit_buffers(&mut |n, t| f(&scoped("large", n), t));
        self.small.visit_buffers(&mut |n, t| f(&scoped("small", n), t));
    }

    fn set_mode(&mut self, mode: Mode) {
        self.large.set_mode(mode);
        self.small.set_mode(mode);
    }

    fn active_branches(&self, out: &mut Vec<u64>) {
        self.large.active_branches(out);
        self.small.active_branches(out);
    }
}

// ---------------------------------------------------------------------------

/// Squeeze-and-excitation residual block.
///
/// `v = relu(conv2(relu(conv1(x))))` with 1x1 convolutions; `z` is the
/// per-sample time average of each channel of `v`; the excitation
/// `alpha = sigmoid(W2 relu(W1 z))` rescales `v` channel-wise, and the result
/// is added to the (projected, if needed) block input.
pub struct SeResBlock {
    conv1: Conv1d,
    relu1: Relu,
    conv2: Conv1d,
    relu2: Relu,
    fc1: Linear,
    relu3: Relu,
    fc2: Linear,
    gate: Sigmoid,
    projection: Option<Conv1d>,
    cache: Option<(Tensor, Tensor)>,
    last_alpha: Option<Tensor>,
}

impl SeResBlock {
    pub fn new(cfg: &SeResNetConfig, rng: &mut Rng) -> Result<Self> {
        let bottleneck = cfg.bottleneck()?;
        let (cin, cmid) = (cfg.in_channels, cfg.mid_channels);
        Ok(Self {
            conv1: Conv1d::new(Conv1dSpec::new(cin, cmid, 1, 1, 0), rng)?,
            relu1: Relu::new(),
            conv2: Conv1d::new(Conv1dSpec::new(cmid, cmid, 1, 1, 0), rng)?,
            relu2: Relu::new(),
            fc1: Linear::new(cmid, bottleneck, rng)?,
            relu3: Relu::new(),
            fc2: Linear::new(bottleneck, cmid, rng)?,
            gate: Sigmoid::new(),
            projection: if cfg.downsample() {
                Some(Conv1d::new(Conv1dSpec::new(cin, cmid, 1, 1, 0), rng)?)
            } else {
                None
            },
            cache: None,
            last_alpha: None,
        })
    }

    /// Excitation weights (`N x C`) of the most recent forward pass.
    pub fn last_excitation(&self) -> Option<&Tensor> {
        self.last_alpha.as_ref()
    }

    /// Mutable access to the two excitation layers (`W1`, `W2`).
    pub fn excitation_mut(&mut self) -> (&mut Linear, &mut Linear) {
        (&mut self.fc1, &mut self.fc2)
    }
}

/// `N x C x L -> N x C` time average.
pub fn squeeze(v: &Tensor) -> Result<Tensor> {
    v.reduce(Reduce::Mean, 2)
}

/// `M[n, c, t] = alpha[n, c] * v[n, c, t]`
pub fn scale_channels(v: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let (n, c, l) = (v.dim(0), v.dim(1), v.dim(2));
    if alpha.shape() != [n, c] {
        return Err(Error::Shape {
            op: "scale_channels",
            left: v.shape().to_vec(),
            right: alpha.shape().to_vec(),
        });
    }
    let mut m = v.clone();
    for (row, &a) in m.data_mut().chunks_mut(l).zip(alpha.data()) {
        row.iter_mut().for_each(|x| *x *= a);
    }
    Ok(m)
}

impl Layer for SeResBlock {
    fn kind(&self) -> &'static str {
        "se_res_block"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let h = self.relu1.forward(&self.conv1.forward(x, rng)?, rng)?;
        let v = self.relu2.forward(&self.conv2.forward(&h, rng)?, rng)?;
        let z = squeeze(&v)?;
        let hidden = self.relu3.forward(&self.fc1.forward(&z, rng)?, rng)?;
        let alpha = self.gate.forward(&self.fc2.forward(&hidden, rng)?, rng)?;
        let m = scale_channels(&v, &alpha)?;
        let residual = match &mut self.projection {
            Some(p) => p.forward(x, rng)?,
            None => x.clone(),
        };
        self.last_alpha = Some(alpha.clone());
        self.cache = Some((v, alpha));
        residual.add(&m)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (v, alpha) = self.cache.take().ok_or_else(|| missing_cache("se_res_block"))?;
        if upstream.shape() != v.shape() {
            return Err(Error::Dimension(format!(
                "se_res_block: upstream {:?} does not match output {:?}",
                upstream.shape(),
                v.shape()
            )));
        }
        let l = v.dim(2);
        // through M = alpha * v
        let mut dv = scale_channels(upstream, &alpha)?;
        let dalpha_data: Vec<f64> = upstream
            .data()
            .chunks(l)
            .zip(v.data().chunks(l))
            .map(|(g, vr)| g.iter().zip(vr).map(|(a, b)| a * b).sum())
            .collect();
        let dalpha = Tensor::new(alpha.shape().to_vec(), dalpha_data)?;
        let dhidden = self.fc2.backward(&self.gate.backward(&dalpha)?)?;
        let dz = self.fc1.backward(&self.relu3.backward(&dhidden)?)?;
        // squeeze is a mean over time
        for (row, &g) in dv.data_mut().chunks_mut(l).zip(dz.data()) {
            let share = g / l as f64;
            row.iter_mut().for_each(|x| *x += share);
        }
        let dh = self.conv2.backward(&self.relu2.backward(&dv)?)?;
        let mut dx = self.conv1.backward(&self.relu1.backward(&dh)?)?;
        match &mut self.projection {
            Some(p) => dx.add_assign(&p.backward(upstream)?)?,
            None => dx.add_assign(upstream)?,
        }
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&mut |n, p| f(&scoped("conv1", n), p));
        self.conv2.visit_params(&mut |n, p| f(&scoped("conv2", n), p));
        self.fc1.visit_params(&mut |n, p| f(&scoped("fc1", n), p));
        self.fc2.visit_params(&mut |n, p| f(&scoped("fc2", n), p));
        if let Some(p) = &mut self.projection {
            p.visit_params(&mut |n, q| f(&scoped("proj", n), q));
        }
    }

    fn active_branches(&self, out: &mut Vec<u64>) {
        self.relu1.active_branches(out);
        self.relu2.active_branches(out);
        self.relu3.active_branches(out);
    }
}

// ---------------------------------------------------------------------------

/// Multi-head attention over channel tokens of width `L`.
///
/// Three causal convolutions (over the time axis) produce `H * C` channels
/// each; head `h` reads channels `h*C .. (h+1)*C` as its `C x L` query, key
/// or value matrix. Every head keeps the full width `L`; the `H * L`
/// concatenation is mapped back to `L` by a linear projection.
pub struct MultiHeadAttention {
    heads: usize,
    tokens: usize,
    width: usize,
    pub query: Conv1d,
    pub key: Conv1d,
    pub value: Conv1d,
    pub output: Linear,
    cache: Option<AttnCache>,
    last_attention: Option<Tensor>,
}

struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor,
}

impl MultiHeadAttention {
    pub fn new(tokens: usize, width: usize, heads: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let spec = Conv1dSpec::causal(tokens, heads * tokens, kernel);
        Ok(Self {
            heads,
            tokens,
            width,
            query: Conv1d::new(spec, rng)?,
            key: Conv1d::new(spec, rng)?,
            value: Conv1d::new(spec, rng)?,
            output: Linear::new(heads * width, width, rng)?,
            cache: None,
            last_attention: None,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Query, key and value maps (`N x H*C x L`) for `x` without running attention.
    pub fn project(&mut self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut rng = Rng::seed_from_u64(0);
        let q = self.query.forward(x, &mut rng)?;
        let k = self.key.forward(x, &mut rng)?;
        let v = self.value.forward(x, &mut rng)?;
        Ok((q, k, v))
    }

    /// Attention weights `N x H x C x C` of the most recent forward pass.
    pub fn last_attention(&self) -> Option<&Tensor> {
        self.last_attention.as_ref()
    }
}

/// Scaled dot-product attention for one `C x L` head; writes `C x C` weights and `C x L` output.
fn attend(q: &[f64], k: &[f64], v: &[f64], c: usize, l: usize, attn: &mut [f64], z: &mut [f64]) {
    let scale = 1.0 / libm::sqrt(l as f64);
    for i in 0..c {
        let qi = &q[i * l..(i + 1) * l];
        let row = &mut attn[i * c..(i + 1) * c];
        for (j, e) in row.iter_mut().enumerate() {
            *e = scale * qi.iter().zip(&k[j * l..(j + 1) * l]).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(row);
        let zi = &mut z[i * l..(i + 1) * l];
        zi.fill(0.0);
        for (j, &a) in row.iter().enumerate() {
            for (o, &vv) in zi.iter_mut().zip(&v[j * l..(j + 1) * l]) {
                *o += a * vv;
            }
        }
    }
}

impl Layer for MultiHeadAttention {
    fn kind(&self) -> &'static str {
        "multi_head_attention"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        if x.rank() != 3 || x.dim(1) != self.tokens || x.dim(2) != self.width {
            return Err(Error::Dimension(format!(
                "attention expects N x {} x {}, got {:?}",
                self.tokens,
                self.width,
                x.shape()
            )));
        }
        let (n, c, l, h) = (x.dim(0), self.tokens, self.width, self.heads);
        let q = self.query.forward(x, rng)?;
        let k = self.key.forward(x, rng)?;
        let v = self.value.forward(x, rng)?;
        let block = c * l;
        let mut attn = vec![0.0; n * h * c * c];
        let mut concat = vec![0.0; n * c * h * l];
        let mut z = vec![0.0; block];
        for b in 0..n {
            for hd in 0..h {
                let off = (b * h + hd) * block;
                let a = &mut attn[(b * h + hd) * c * c..(b * h + hd + 1) * c * c];
                attend(&q.data()[off..off + block], &k.data()[off..off + block], &v.data()[off..off + block], c, l, a, &mut z);
                for i in 0..c {
                    let dst = (b * c + i) * h * l + hd * l;
                    concat[dst..dst + l].copy_from_slice(&z[i * l..(i + 1) * l]);
                }
            }
        }
        let concat = Tensor::new(vec![n, c, h * l], concat)?;
        let out = self.output.forward(&concat, rng)?;
        let attn = Tensor::new(vec![n, h, c, c], attn)?;
        self.last_attention = Some(attn.clone());
        self.cache = Some(AttnCache { q, k, v, attn });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let AttnCache { q, k, v, attn } = self.cache.take().ok_or_else(|| missing_cache("multi_head_attention"))?;
        let dconcat = self.output.backward(upstream)?;
        let (n, h, c, l) = (q.dim(0), self.heads, self.tokens, self.width);
        let block = c * l;
        let scale = 1.0 / libm::sqrt(l as f64);
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; k.len()];
        let mut dv = vec![0.0; v.len()];
        let mut dz = vec![0.0; block];
        let mut da = vec![0.0; c];
        let mut de = vec![0.0; c * c];
        for b in 0..n {
            for hd in 0..h {
                let off = (b * h + hd) * block;
                let (qh, kh, vh) = (&q.data()[off..off + block], &k.data()[off..off + block], &v.data()[off..off + block]);
                let a = &attn.data()[(b * h + hd) * c * c..(b * h + hd + 1) * c * c];
                for i in 0..c {
                    let src = (b * c + i) * h * l + hd * l;
                    dz[i * l..(i + 1) * l].copy_from_slice(&dconcat.data()[src..src + l]);
                }
                for i in 0..c {
                    let dzi = &dz[i * l..(i + 1) * l];
                    let arow = &a[i * c..(i + 1) * c];
                    for j in 0..c {
                        let vj = &vh[j * l..(j + 1) * l];
                        da[j] = dzi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let dvj = &mut dv[off + j * l..off + (j + 1) * l];
                        for (o, &g) in dvj.iter_mut().zip(dzi) {
                            *o += arow[j] * g;
                        }
                    }
                    softmax_backward_in_place(arow, &da, &mut de[i * c..(i + 1) * c]);
                }
                for i in 0..c {
                    for j in 0..c {
                        let e = de[i * c + j] * scale;
                        if e == 0.0 {
                            continue;
                        }
                        for t in 0..l {
                            dq[off + i * l + t] += e * kh[j * l + t];
                            dk[off + j * l + t] += e * qh[i * l + t];
                        }
                    }
                }
            }
        }
        let shape = q.shape().to_vec();
        let mut dx = self.query.backward(&Tensor::new(shape.clone(), dq)?)?;
        dx.add_assign(&self.key.backward(&Tensor::new(shape.clone(), dk)?)?)?;
        dx.add_assign(&self.value.backward(&Tensor::new(shape, dv)?)?)?;
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.query.visit_params(&mut |n, p| f(&scoped("query", n), p));
        self.key.visit_params(&mut |n, p| f(&scoped("key", n), p));
        self.value.visit_params(&mut |n, p| f(&scoped("value", n), p));
        self.output.visit_params(&mut |n, p| f(&scoped("output", n), p));
    }
}

// ---------------------------------------------------------------------------

/// `r = LN1(x + MHA(x))`, `y = LN2(r + FFN(r))` with `FFN = linear -> ReLU -> dropout -> linear`.
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    relu: Relu,
    dropout: Dropout,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(tokens: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(tokens, cfg.width, cfg.heads, cfg.tcn_kernel, rng)?,
            norm1: LayerNorm::new(cfg.width)?,
            ffn_in: Linear::new(cfg.width, cfg.ffn_hidden, rng)?,
            relu: Relu::new(),
            dropout: Dropout::new(cfg.dropout)?,
            ffn_out: Linear::new(cfg.ffn_hidden, cfg.width, rng)?,
            norm2: LayerNorm::new(cfg.width)?,
        })
    }
}

impl Layer for EncoderBlock {
    fn kind(&self) -> &'static str {
        "encoder_block"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let attn = self.attention.forward(x, rng)?;
        let r = self.norm1.forward(&x.add(&attn)?, rng)?;
        let hidden = self.relu.forward(&self.ffn_in.forward(&r, rng)?, rng)?;
        let f = self.ffn_out.forward(&self.dropout.forward(&hidden, rng)?, rng)?;
        self.norm2.forward(&r.add(&f)?, rng)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let g2 = self.norm2.backward(upstream)?;
        let df = self.ffn_out.backward(&g2)?;
        let dr_ffn = self.ffn_in.backward(&self.relu.backward(&self.dropout.backward(&df)?)?)?;
        let g1 = self.norm1.backward(&g2.add(&dr_ffn)?)?;
        let mut dx = self.attention.backward(&g1)?;
        dx.add_assign(&g1)?;
        Ok(dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.attention.visit_params(&mut |n, p| f(&scoped("mha", n), p));
        self.norm1.visit_params(&mut |n, p| f(&scoped("norm1", n), p));
        self.ffn_in.visit_params(&mut |n, p| f(&scoped("ffn_in", n), p));
        self.ffn_out.visit_params(&mut |n, p| f(&scoped("ffn_out", n), p));
        self.norm2.visit_params(&mut |n, p| f(&scoped("norm2", n), p));
    }

    fn set_mode(&mut self, mode: Mode) {
        self.dropout.set_mode(mode);
    }

    fn active_branches(&self, out: &mut Vec<u64>) {
        self.relu.active_branches(out);
    }
}

// ---------------------------------------------------------------------------

/// Flatten `C x L`, then linear -> ReLU -> linear to class logits.
pub struct ClassifierHead {
    pub fc1: Linear,
    relu: Relu,
    pub fc2: Linear,
    input_shape: Option<Vec<usize>>,
}

impl ClassifierHead {
    pub fn new(features: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(features, hidden, rng)?,
            relu: Relu::new(),
            fc2: Linear::new(hidden, classes, rng)?,
            input_shape: None,
        })
    }
}

impl Layer for ClassifierHead {
    fn kind(&self) -> &'static str {
        "classifier"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let n = x.dim(0);
        let flat = x.reshape(&[n, x.len() / n.max(1)])?;
        let h = self.relu.forward(&self.fc1.forward(&flat, rng)?, rng)?;
        self.input_shape = Some(x.shape().to_vec());
        self.fc2.forward(&h, rng)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("classifier"))?;
        let dh = self.fc2.backward(upstream)?;
        let dflat = self.fc1.backward(&self.relu.backward(&dh)?)?;
        dflat.reshape(&shape)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params(&mut |n, p| f(&scoped("fc1", n), p));
        self.fc2.visit_params(&mut |n, p| f(&scoped("fc2", n), p));
    }

    fn active_branches(&self, out: &mut Vec<u64>) {
        self.relu.active_branches(out);
    }
}

// ---------------------------------------------------------------------------

/// The full network; `forward` maps `N x 1 x input_len` windows to `N x K` logits.
pub struct PainAttnNet {
    config: ModelConfig,
    pub mscn: Mscn,
    pub se: SeResBlock,
    pub encoder: Vec<EncoderBlock>,
    pub head: ClassifierHead,
}

impl PainAttnNet {
    /// Validates the configuration and initialises weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let trace = config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mscn = Mscn::new(&config.mscn, &mut rng)?;
        let se = SeResBlock::new(&config.se, &mut rng)?;
        let tokens = trace.se.0;
        let encoder = (0..config.encoder.blocks)
            .map(|_| EncoderBlock::new(tokens, &config.encoder, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = ClassifierHead::new(tokens * trace.se.1, config.classifier_hidden, config.num_classes, &mut rng)?;
        Ok(Self {
            config,
            mscn,
            se,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Encoder output (`N x C x L`) before the classifier head.
    pub fn features(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let expected = [x.dim(0).max(1), 1, self.config.input_len];
        if x.rank() != 3 || x.shape()[1..] != expected[1..] {
            return Err(Error::Dimension(format!(
                "model expects N x 1 x {}, got {:?}",
                self.config.input_len,
                x.shape()
            )));
        }
        let mut h = self.mscn.forward(x, rng)?;
        h = self.se.forward(&h, rng)?;
        for block in &mut self.encoder {
            h = block.forward(&h, rng)?;
        }
        Ok(h)
    }

    /// Class probabilities (softmax of the logits).
    pub fn predict_proba(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        Ok(softmax(&self.forward(x, rng)?))
    }
}

impl Layer for PainAttnNet {
    fn kind(&self) -> &'static str {
        "pain_attn_net"
    }

    fn forward(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let h = self.features(x, rng)?;
        self.head.forward(&h, rng)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let mut g = self.head.backward(upstream)?;
        for block in self.encoder.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        g = self.se.backward(&g)?;
        self.mscn.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.mscn.visit_params(&mut |n, p| f(&scoped("mscn", n), p));
        self.se.visit_params(&mut |n, p| f(&scoped("se", n), p));
        for (i, block) in self.encoder.iter_mut().enumerate() {
            let prefix = format!("encoder{i}");
            block.visit_params(&mut |n, p| f(&scoped(&prefix, n), p));
        }
        self.head.visit_params(&mut |n, p| f(&scoped("head", n), p));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mscn.visit_buffers(&mut |n, t| f(&scoped("mscn", n), t));
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mscn.set_mode(mode);
        self.se.set_mode(mode);
        for block in &mut self.encoder {
            block.set_mode(mode);
        }
        self.head.set_mode(mode);
    }

    fn active_branches(&self, out: &mut Vec<u64>) {
        self.mscn.active_branches(out);
        self.se.active_branches(out);
        for block in &self.encoder {
            block.active_branches(out);
        }
        self.head.active_branches(out);
    }
}
