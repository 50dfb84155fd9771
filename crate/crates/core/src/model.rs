//! The symmetry-aware Siamese network: a weight-shared encoder applied to an
//! image and its mirrored counterpart, a fusion transition that merges the
//! two feature streams, a small decoder with a heatmap head, and an optional
//! projection head for the contrastive branch.
//!
//! Both streams reference the same parameter objects, so weight sharing is
//! structural rather than by copy. Batchnorm running statistics sit behind
//! locks so that eval-mode inference works through a shared reference.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{
    avgpool2x2, batchnorm2d_eval, batchnorm2d_train, concat_channels, conv2d, grid_sample_bilinear,
    relu, sigmoid, upsample_bilinear2x, BnState, Scalar, Shape, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::RwLock;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    None,
    BeforeTransition,
    AfterTransition,
    InsideTransition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Align {
    Image,
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Contrastive {
    Off,
    OnNoProjection,
    OnWithProjection,
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::BeforeTransition => "before_transition",
            Fusion::AfterTransition => "after_transition",
            Fusion::InsideTransition => "inside_transition",
        })
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fusion::None),
            "before_transition" => Ok(Fusion::BeforeTransition),
            "after_transition" => Ok(Fusion::AfterTransition),
            "inside_transition" => Ok(Fusion::InsideTransition),
            _ => Err(Error::Config(format!("unknown fusion mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for Align {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Align::Image => "image",
            Align::Feature => "feature",
        })
    }
}

impl std::str::FromStr for Align {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Align::Image),
            "feature" => Ok(Align::Feature),
            _ => Err(Error::Config(format!("unknown alignment mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for Contrastive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Contrastive::Off => "off",
            Contrastive::OnNoProjection => "on_no_projection",
            Contrastive::OnWithProjection => "on_with_projection",
        })
    }
}

impl std::str::FromStr for Contrastive {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Contrastive::Off),
            "on_no_projection" => Ok(Contrastive::OnNoProjection),
            "on_with_projection" => Ok(Contrastive::OnWithProjection),
            _ => Err(Error::Config(format!("unknown contrastive mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks_before_split: usize,
    pub blocks_after_split: usize,
    pub fusion: Fusion,
    pub align: Align,
    pub contrastive: Contrastive,
    /// Projection width; 0 means "same as the encoder output channels".
    pub proj_dim: usize,
    pub input_hw: (usize, usize),
    pub output_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            blocks_before_split: 3,
            blocks_after_split: 1,
            fusion: Fusion::InsideTransition,
            align: Align::Feature,
            contrastive: Contrastive::OnWithProjection,
            proj_dim: 0,
            input_hw: (64, 128),
            output_stride: 4,
        }
    }
}

impl ModelConfig {
    /// Channels of the encoder output F: they double at every block.
    pub fn encoder_channels(&self) -> usize {
        self.base_channels << (self.blocks_before_split - 1)
    }

    /// Stride of the encoder output F relative to the input crop.
    pub fn feature_stride(&self) -> usize {
        1 << self.blocks_before_split
    }

    /// Spatial dims of the encoder output F.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.input_hw.0 / self.feature_stride(), self.input_hw.1 / self.feature_stride())
    }

    /// Spatial dims of the output heatmap.
    pub fn output_hw(&self) -> (usize, usize) {
        (self.input_hw.0 / self.output_stride, self.input_hw.1 / self.output_stride)
    }

    fn total_stride(&self) -> usize {
        1 << (self.blocks_before_split + self.blocks_after_split)
    }

    pub fn effective_proj_dim(&self) -> usize {
        if self.proj_dim == 0 {
            self.encoder_channels()
        } else {
            self.proj_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.blocks_before_split == 0 || self.blocks_after_split == 0 {
            return Err(Error::Config("need at least one block on each side of the split".into()));
        }
        let total = self.total_stride();
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the total stride {total}"
            )));
        }
        if self.output_stride == 0
            || !total.is_multiple_of(self.output_stride)
            || !(total / self.output_stride).is_power_of_two()
        {
            return Err(Error::Config(format!(
                "output_stride {} must divide the total stride {total} by a power of two",
                self.output_stride
            )));
        }
        Ok(())
    }

    /// Plain `key = value` text, also used as the checkpoint header.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "blocks_before_split = {}", self.blocks_before_split);
        let _ = writeln!(s, "blocks_after_split = {}", self.blocks_after_split);
        let _ = writeln!(s, "fusion = {}", self.fusion);
        let _ = writeln!(s, "align = {}", self.align);
        let _ = writeln!(s, "contrastive = {}", self.contrastive);
        let _ = writeln!(s, "proj_dim = {}", self.proj_dim);
        let _ = writeln!(s, "input_h = {}", self.input_hw.0);
        let _ = writeln!(s, "input_w = {}", self.input_hw.1);
        let _ = writeln!(s, "output_stride = {}", self.output_stride);
        s
    }

    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad =
                |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            match key {
                "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad("integer"))?,
                "blocks_before_split" => {
                    cfg.blocks_before_split = value.parse().map_err(|_| bad("integer"))?
                }
                "blocks_after_split" => {
                    cfg.blocks_after_split = value.parse().map_err(|_| bad("integer"))?
                }
                "fusion" => cfg.fusion = value.parse()?,
                "align" => cfg.align = value.parse()?,
                "contrastive" => cfg.contrastive = value.parse()?,
                "proj_dim" => cfg.proj_dim = value.parse().map_err(|_| bad("integer"))?,
                "input_h" => cfg.input_hw.0 = value.parse().map_err(|_| bad("integer"))?,
                "input_w" => cfg.input_hw.1 = value.parse().map_err(|_| bad("integer"))?,
                "output_stride" => cfg.output_stride = value.parse().map_err(|_| bad("integer"))?,
                _ => {
                    return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Kaiming fan-in normal draw for a conv weight.
    fn conv<E: Scalar>(&mut self, co: usize, ci: usize, k: usize) -> Tensor<E> {
        let fan_in = (ci * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let data: Vec<E> =
            (0..co * ci * k * k).map(|_| E::from_f64(normal.sample(&mut self.rng))).collect();
        Tensor::param(Shape::new(co, ci, k, k), data).expect("sized draw")
    }
}

fn zeros_param<E: Scalar>(c: usize) -> Tensor<E> {
    Tensor::param(Shape::new(1, c, 1, 1), vec![E::zero(); c]).expect("sized")
}

fn ones_param<E: Scalar>(c: usize) -> Tensor<E> {
    Tensor::param(Shape::new(1, c, 1, 1), vec![E::one(); c]).expect("sized")
}

struct ConvLayer<E: Scalar> {
    w: Tensor<E>,
    b: Tensor<E>,
    stride: usize,
    pad: usize,
}

impl<E: Scalar> ConvLayer<E> {
    fn new(init: &mut Init, co: usize, ci: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvLayer { w: init.conv(co, ci, k), b: zeros_param(co), stride, pad }
    }

    fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, &self.w, Some(&self.b), self.stride, self.pad)
    }
}

struct BnLayer<E: Scalar> {
    gamma: Tensor<E>,
    beta: Tensor<E>,
    state: RwLock<BnState<E>>,
}

impl<E: Scalar> BnLayer<E> {
    fn new(c: usize) -> Self {
        BnLayer {
            gamma: ones_param(c),
            beta: zeros_param(c),
            state: RwLock::new(BnState::new(c, E::from_f64(0.1), E::from_f64(1e-5))),
        }
    }

    fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        if train {
            let mut state = self.state.write().expect("bn lock");
            batchnorm2d_train(x, &self.gamma, &self.beta, &mut state)
        } else {
            let state = self.state.read().expect("bn lock");
            batchnorm2d_eval(x, &self.gamma, &self.beta, &state)
        }
    }
}

/// conv3x3 -> BN -> ReLU.
struct ConvBn<E: Scalar> {
    conv: ConvLayer<E>,
    bn: BnLayer<E>,
}

impl<E: Scalar> ConvBn<E> {
    fn new(init: &mut Init, co: usize, ci: usize) -> Self {
        ConvBn { conv: ConvLayer::new(init, co, ci, 3, 1, 1), bn: BnLayer::new(co) }
    }

    fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        Ok(relu(&self.bn.forward(&self.conv.forward(x)?, train)?))
    }
}

/// BN -> ReLU -> conv1x1 -> avgpool2x2, split into its two halves so the
/// fusion variants can interleave the concatenation.
struct Transition<E: Scalar> {
    bn: BnLayer<E>,
    conv: ConvLayer<E>,
}

impl<E: Scalar> Transition<E> {
    fn new(init: &mut Init, bn_c: usize, conv_ci: usize, conv_co: usize) -> Self {
        Transition { bn: BnLayer::new(bn_c), conv: ConvLayer::new(init, conv_co, conv_ci, 1, 1, 0) }
    }

    fn pre(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        Ok(relu(&self.bn.forward(x, train)?))
    }

    fn post(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        avgpool2x2(&self.conv.forward(x)?)
    }

    fn full(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        self.post(&self.pre(x, train)?)
    }
}

struct EncBlock<E: Scalar> {
    c1: ConvBn<E>,
    c2: ConvBn<E>,
    trans: Transition<E>,
}

struct DecBlock<E: Scalar> {
    /// Absent on the first decoder block: the fusion transition already
    /// downsampled its input.
    trans: Option<Transition<E>>,
    c1: ConvBn<E>,
    c2: ConvBn<E>,
}

struct Projection<E: Scalar> {
    conv: ConvLayer<E>,
    bn: BnLayer<E>,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

pub struct AasnModel<E: Scalar = f32> {
    config: ModelConfig,
    enc: Vec<EncBlock<E>>,
    fuse: Transition<E>,
    dec: Vec<DecBlock<E>>,
    head: ConvLayer<E>,
    proj: Option<Projection<E>>,
    train_mode: bool,
}

pub struct ForwardOut<E: Scalar> {
    /// Fracture probability map, sigmoid of the logits.
    pub y: Tensor<E>,
    pub logits: Tensor<E>,
    /// Encoder features of the input image.
    pub f: Tensor<E>,
    /// Aligned encoder features of the mirrored image, when computed.
    pub ff: Option<Tensor<E>>,
}

impl<E: Scalar> AasnModel<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut enc = Vec::with_capacity(config.blocks_before_split);
        let mut ci = 1usize;
        let mut cb = config.base_channels;
        for _ in 0..config.blocks_before_split {
            enc.push(EncBlock {
                c1: ConvBn::new(&mut init, cb, ci),
                c2: ConvBn::new(&mut init, cb, cb),
                trans: Transition::new(&mut init, cb, cb, cb),
            });
            ci = cb;
            cb *= 2;
        }
        let c = config.encoder_channels();
        let fuse = match config.fusion {
            Fusion::None | Fusion::AfterTransition => Transition::new(&mut init, c, c, c),
            Fusion::InsideTransition => Transition::new(&mut init, c, 2 * c, c),
            Fusion::BeforeTransition => Transition::new(&mut init, 2 * c, 2 * c, c),
        };
        let mut dec = Vec::with_capacity(config.blocks_after_split);
        for i in 0..config.blocks_after_split {
            let first_ci =
                if i == 0 && config.fusion == Fusion::AfterTransition { 2 * c } else { c };
            dec.push(DecBlock {
                trans: if i == 0 { None } else { Some(Transition::new(&mut init, c, c, c)) },
                c1: ConvBn::new(&mut init, c, first_ci),
                c2: ConvBn::new(&mut init, c, c),
            });
        }
        let head = ConvLayer::new(&mut init, 1, c, 1, 1, 0);
        let proj = if config.contrastive == Contrastive::OnWithProjection {
            let pd = config.effective_proj_dim();
            Some(Projection {
                conv: ConvLayer::new(&mut init, pd, c, 1, 1, 0),
                bn: BnLayer::new(pd),
            })
        } else {
            None
        };
        Ok(AasnModel { config, enc, fuse, dec, head, proj, train_mode: false })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_train(&mut self, on: bool) {
        self.train_mode = on;
    }

    pub fn is_train(&self) -> bool {
        self.train_mode
    }

    /// Encoder features of one crop; the same parameters serve both streams.
    pub fn encode(&self, roi: &Tensor<E>) -> Result<Tensor<E>> {
        let s = roi.shape();
        let (h, w) = self.config.input_hw;
        if s.c != 1 || s.h != h || s.w != w {
            return Err(Error::dim("input", format!("expected (n,1,{h},{w}), got {s}")));
        }
        let mut x = roi.clone();
        for block in &self.enc {
            x = block.c1.forward(&x, self.train_mode)?;
            x = block.c2.forward(&x, self.train_mode)?;
            x = block.trans.full(&x, self.train_mode)?;
        }
        Ok(x)
    }

    /// Merge the streams per the configured fusion placement, run the
    /// decoder blocks, and emit the logit map at the output stride.
    pub fn fuse_and_decode(&self, f: &Tensor<E>, ff: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let train = self.train_mode;
        if self.config.fusion != Fusion::None {
            let ff = ff.ok_or_else(|| {
                Error::Contract("fusion requires the aligned contralateral features".into())
            })?;
            if ff.shape() != f.shape() {
                return Err(Error::dim("features", format!("{} vs {}", f.shape(), ff.shape())));
            }
        } else if ff.is_some() {
            return Err(Error::Contract(
                "the single-stream baseline takes no contralateral features".into(),
            ));
        }
        let mut x = match self.config.fusion {
            Fusion::None => self.fuse.full(f, train)?,
            Fusion::InsideTransition => {
                let a = self.fuse.pre(f, train)?;
                let b = self.fuse.pre(ff.unwrap(), train)?;
                self.fuse.post(&concat_channels(&a, &b)?)?
            }
            Fusion::BeforeTransition => self.fuse.full(&concat_channels(f, ff.unwrap())?, train)?,
            Fusion::AfterTransition => {
                let a = self.fuse.full(f, train)?;
                let b = self.fuse.full(ff.unwrap(), train)?;
                concat_channels(&a, &b)?
            }
        };
        for block in &self.dec {
            if let Some(t) = &block.trans {
                x = t.full(&x, train)?;
            }
            x = block.c1.forward(&x, train)?;
            x = block.c2.forward(&x, train)?;
        }
        let mut logits = self.head.forward(&x)?;
        let ups = (self.config.total_stride() / self.config.output_stride).trailing_zeros();
        for _ in 0..ups {
            logits = upsample_bilinear2x(&logits);
        }
        Ok(logits)
    }

    /// Full pass over an image and its mirror. Under feature alignment the
    /// `grid` resamples the mirrored stream's features; under image
    /// alignment the mirror is expected pre-warped and no grid is accepted.
    pub fn forward(
        &self,
        i: &Tensor<E>,
        i_f: &Tensor<E>,
        grid: Option<&Tensor<E>>,
    ) -> Result<ForwardOut<E>> {
        if i_f.shape() != i.shape() {
            return Err(Error::dim("input", format!("{} vs mirrored {}", i.shape(), i_f.shape())));
        }
        let f = self.encode(i)?;
        let need_ff =
            self.config.fusion != Fusion::None || self.config.contrastive != Contrastive::Off;
        let ff = match self.config.align {
            Align::Image => {
                if grid.is_some() {
                    return Err(Error::Contract(
                        "image alignment pre-warps the mirrored image; no grid is used".into(),
                    ));
                }
                if need_ff {
                    Some(self.encode(i_f)?)
                } else {
                    None
                }
            }
            Align::Feature => {
                if need_ff {
                    let grid = grid.ok_or_else(|| {
                        Error::Contract("feature alignment requires a sampling grid".into())
                    })?;
                    Some(grid_sample_bilinear(&self.encode(i_f)?, grid)?)
                } else {
                    None
                }
            }
        };
        let logits = if self.config.fusion != Fusion::None {
            self.fuse_and_decode(&f, ff.as_ref())?
        } else {
            self.fuse_and_decode(&f, None)?
        };
        Ok(ForwardOut { y: sigmoid(&logits), logits, f, ff })
    }

    /// Projection head g for the contrastive branch.
    pub fn project(&self, f: &Tensor<E>) -> Result<Tensor<E>> {
        let proj = self.proj.as_ref().ok_or_else(|| {
            Error::Contract(
                "projection head is only built with contrastive = on_with_projection".into(),
            )
        })?;
        Ok(relu(&proj.bn.forward(&proj.conv.forward(f)?, self.train_mode)?))
    }

    // -- parameter plumbing --------------------------------------------------

    /// Stable names and current values of every tensor in the model:
    /// trainable parameters plus batchnorm running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Tensor<E>)>, name: String, l: &ConvLayer<E>| {
            out.push((format!("{name}.w"), l.w.clone()));
            out.push((format!("{name}.b"), l.b.clone()));
        };
        let bn = |out: &mut Vec<(String, Tensor<E>)>, name: String, l: &BnLayer<E>| {
            out.push((format!("{name}.gamma"), l.gamma.clone()));
            out.push((format!("{name}.beta"), l.beta.clone()));
            let state = l.state.read().expect("bn lock");
            let c = state.running_mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::constant(Shape::new(1, c, 1, 1), state.running_mean.clone())
                    .expect("sized"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::constant(Shape::new(1, c, 1, 1), state.running_var.clone()).expect("sized"),
            ));
        };
        let convbn = |out: &mut Vec<(String, Tensor<E>)>, name: &str, l: &ConvBn<E>| {
            conv(out, format!("{name}.conv"), &l.conv);
            bn(out, format!("{name}.bn"), &l.bn);
        };
        let transition = |out: &mut Vec<(String, Tensor<E>)>, name: &str, l: &Transition<E>| {
            bn(out, format!("{name}.bn"), &l.bn);
            conv(out, format!("{name}.conv"), &l.conv);
        };
        for (i, b) in self.enc.iter().enumerate() {
            convbn(&mut out, &format!("enc.block{}.c1", i + 1), &b.c1);
            convbn(&mut out, &format!("enc.block{}.c2", i + 1), &b.c2);
            transition(&mut out, &format!("enc.block{}.trans", i + 1), &b.trans);
        }
        transition(&mut out, "fuse", &self.fuse);
        for (i, b) in self.dec.iter().enumerate() {
            if let Some(t) = &b.trans {
                transition(&mut out, &format!("dec.block{}.trans", i + 1), t);
            }
            convbn(&mut out, &format!("dec.block{}.c1", i + 1), &b.c1);
            convbn(&mut out, &format!("dec.block{}.c2", i + 1), &b.c2);
        }
        conv(&mut out, "head".into(), &self.head);
        if let Some(p) = &self.proj {
            conv(&mut out, "proj.conv".into(), &p.conv);
            bn(&mut out, "proj.bn".into(), &p.bn);
        }
        out
    }

    /// Mutable slots in the same order as `named_tensors`, used for loading
    /// and for the optimizer step. Running statistics are `Stat` slots.
    fn slots_mut(&mut self) -> Vec<(String, Slot<'_, E>)> {
        let mut out: Vec<(String, Slot<'_, E>)> = Vec::new();
        fn conv<'a, E: Scalar>(
            out: &mut Vec<(String, Slot<'a, E>)>,
            name: String,
            l: &'a mut ConvLayer<E>,
        ) {
            out.push((format!("{name}.w"), Slot::Param(&mut l.w)));
            out.push((format!("{name}.b"), Slot::Param(&mut l.b)));
        }
        fn bn<'a, E: Scalar>(
            out: &mut Vec<(String, Slot<'a, E>)>,
            name: String,
            l: &'a mut BnLayer<E>,
        ) {
            out.push((format!("{name}.gamma"), Slot::Param(&mut l.gamma)));
            out.push((format!("{name}.beta"), Slot::Param(&mut l.beta)));
            let state = l.state.get_mut().expect("bn lock");
            out.push((format!("{name}.running_mean"), Slot::Stat(&mut state.running_mean)));
            out.push((format!("{name}.running_var"), Slot::Stat(&mut state.running_var)));
        }
        fn convbn<'a, E: Scalar>(
            out: &mut Vec<(String, Slot<'a, E>)>,
            name: &str,
            l: &'a mut ConvBn<E>,
        ) {
            conv(out, format!("{name}.conv"), &mut l.conv);
            bn(out, format!("{name}.bn"), &mut l.bn);
        }
        fn transition<'a, E: Scalar>(
            out: &mut Vec<(String, Slot<'a, E>)>,
            name: &str,
            l: &'a mut Transition<E>,
        ) {
            bn(out, format!("{name}.bn"), &mut l.bn);
            conv(out, format!("{name}.conv"), &mut l.conv);
        }
        for (i, b) in self.enc.iter_mut().enumerate() {
            convbn(&mut out, &format!("enc.block{}.c1", i + 1), &mut b.c1);
            convbn(&mut out, &format!("enc.block{}.c2", i + 1), &mut b.c2);
            transition(&mut out, &format!("enc.block{}.trans", i + 1), &mut b.trans);
        }
        transition(&mut out, "fuse", &mut self.fuse);
        for (i, b) in self.dec.iter_mut().enumerate() {
            if let Some(t) = &mut b.trans {
                transition(&mut out, &format!("dec.block{}.trans", i + 1), t);
            }
            convbn(&mut out, &format!("dec.block{}.c1", i + 1), &mut b.c1);
            convbn(&mut out, &format!("dec.block{}.c2", i + 1), &mut b.c2);
        }
        conv(&mut out, "head".into(), &mut self.head);
        if let Some(p) = &mut self.proj {
            conv(&mut out, "proj.conv".into(), &mut p.conv);
            bn(&mut out, "proj.bn".into(), &mut p.bn);
        }
        out
    }

    /// Trainable parameters in stable order, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        self.slots_mut()
            .into_iter()
            .filter_map(|(_, s)| match s {
                Slot::Param(p) => Some(p),
                Slot::Stat(_) => None,
            })
            .collect()
    }

    /// Clear accumulated gradients on every parameter.
    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.ends_with(".running_mean") && !n.ends_with(".running_var"))
            .map(|(_, t)| t.shape().numel())
            .sum()
    }
}

enum Slot<'a, E: Scalar> {
    Param(&'a mut Tensor<E>),
    Stat(&'a mut Vec<E>),
}

impl AasnModel<f32> {
    /// Write the model as a checkpoint whose header is the config text.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new(self.config.to_text());
        for (name, t) in self.named_tensors() {
            ckpt.push(&name, t.detach())?;
        }
        ckpt.save(path)
    }

    /// Rebuild a model from a checkpoint: the header reconstructs the
    /// architecture, then every tensor is assigned by name. Unknown or
    /// missing names are errors; nothing is partially loaded.
    pub fn load(path: &Path) -> Result<AasnModel<f32>> {
        let ckpt = Checkpoint::load(path)?;
        let config = ModelConfig::parse(&ckpt.header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        AasnModel::from_checkpoint(ckpt, config)
    }

    /// Assign every tensor of `ckpt` into a freshly built `config` model.
    /// For callers that keep their own header format (e.g. a full run
    /// configuration) and parse the architecture out of it themselves.
    pub fn from_checkpoint(ckpt: Checkpoint, config: ModelConfig) -> Result<AasnModel<f32>> {
        let mut model = AasnModel::new(config, 0)?;
        let mut by_name: BTreeMap<String, Tensor<f32>> = ckpt.entries.into_iter().collect();
        for (name, slot) in model.slots_mut() {
            let t = by_name.remove(&name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter '{name}'"))
            })?;
            match slot {
                Slot::Param(p) => {
                    if t.shape() != p.shape() {
                        return Err(Error::dim(
                            "parameter",
                            format!("'{name}' has shape {}, expected {}", t.shape(), p.shape()),
                        ));
                    }
                    *p = Tensor::param(t.shape(), t.data().to_vec())?;
                }
                Slot::Stat(v) => {
                    if t.shape().numel() != v.len() {
                        return Err(Error::dim(
                            "parameter",
                            format!(
                                "'{name}' has {} values, expected {}",
                                t.shape().numel(),
                                v.len()
                            ),
                        ));
                    }
                    v.copy_from_slice(t.data());
                }
            }
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown parameter '{name}'")));
        }
        Ok(model)
    }
}

/// Merge-layer self-check: zero the mirrored-stream half of the merge
/// weights in a fused model, copy every shared weight into a single-stream
/// twin, and compare decoded logits bit for bit. Once its merge weights are
/// zero the mirrored branch must contribute nothing, so any discrepancy
/// means the fusion wiring leaks. Returns true when the outputs match.
pub fn zero_ablation_matches(fusion: Fusion) -> Result<bool> {
    if fusion == Fusion::None {
        return Err(Error::Config("the self-check needs a fused placement".into()));
    }
    let cfg = ModelConfig {
        base_channels: 4,
        input_hw: (32, 64),
        fusion,
        contrastive: Contrastive::Off,
        ..ModelConfig::default()
    };
    let base_cfg = ModelConfig { fusion: Fusion::None, ..cfg };
    let mut fused: AasnModel<f32> = AasnModel::new(cfg, 17)?;
    let mut base: AasnModel<f32> = AasnModel::new(base_cfg, 17)?;
    let c = cfg.encoder_channels();

    // Share the encoder, decoder, and head weights outright.
    let fused_named: std::collections::BTreeMap<String, Tensor<f32>> =
        fused.named_tensors().into_iter().collect();
    for (name, slot) in base.slots_mut() {
        if name.starts_with("fuse.")
            || (fusion == Fusion::AfterTransition && name.starts_with("dec.block1.c1.conv"))
        {
            continue;
        }
        match slot {
            Slot::Param(p) => *p = fused_named[&name].clone(),
            Slot::Stat(v) => v.copy_from_slice(fused_named[&name].data()),
        }
    }
    // Fusion-specific surgery: zero the mirror half in the fused
    // model and copy the matching first half into the baseline.
    match fusion {
        Fusion::InsideTransition | Fusion::BeforeTransition => {
            // Merge conv is (c, 2c, 1, 1); baseline's is (c, c, 1, 1).
            let w = fused_named["fuse.conv.w"].clone();
            let mut zeroed = w.data().to_vec();
            let mut first_half = vec![0f32; c * c];
            for co in 0..c {
                for ci in 0..2 * c {
                    if ci >= c {
                        zeroed[co * 2 * c + ci] = 0.0;
                    } else {
                        first_half[co * c + ci] = zeroed[co * 2 * c + ci];
                    }
                }
            }
            for (name, slot) in fused.slots_mut() {
                if name == "fuse.conv.w" {
                    if let Slot::Param(p) = slot {
                        *p = Tensor::param(w.shape(), zeroed.clone()).unwrap();
                    }
                }
            }
            for (name, slot) in base.slots_mut() {
                match (name.as_str(), slot) {
                    ("fuse.conv.w", Slot::Param(p)) => {
                        *p = Tensor::param(Shape::new(c, c, 1, 1), first_half.clone()).unwrap()
                    }
                    ("fuse.conv.b", Slot::Param(p)) => {
                        *p = Tensor::param(
                            fused_named["fuse.conv.b"].shape(),
                            fused_named["fuse.conv.b"].data().to_vec(),
                        )
                        .unwrap()
                    }
                    ("fuse.bn.gamma", Slot::Param(p)) => {
                        *p = first_c(&fused_named["fuse.bn.gamma"], c)
                    }
                    ("fuse.bn.beta", Slot::Param(p)) => {
                        *p = first_c(&fused_named["fuse.bn.beta"], c)
                    }
                    ("fuse.bn.running_mean", Slot::Stat(v)) => {
                        v.copy_from_slice(&fused_named["fuse.bn.running_mean"].data()[..c])
                    }
                    ("fuse.bn.running_var", Slot::Stat(v)) => {
                        v.copy_from_slice(&fused_named["fuse.bn.running_var"].data()[..c])
                    }
                    _ => {}
                }
            }
        }
        Fusion::AfterTransition => {
            // Merge happens in the next conv3x3: (c, 2c, 3, 3).
            let w = fused_named["dec.block1.c1.conv.w"].clone();
            let mut zeroed = w.data().to_vec();
            let mut first_half = vec![0f32; c * c * 9];
            for co in 0..c {
                for ci in 0..2 * c {
                    for t in 0..9 {
                        let v = zeroed[(co * 2 * c + ci) * 9 + t];
                        if ci >= c {
                            zeroed[(co * 2 * c + ci) * 9 + t] = 0.0;
                        } else {
                            first_half[(co * c + ci) * 9 + t] = v;
                        }
                    }
                }
            }
            for (name, slot) in fused.slots_mut() {
                if name == "dec.block1.c1.conv.w" {
                    if let Slot::Param(p) = slot {
                        *p = Tensor::param(w.shape(), zeroed.clone()).unwrap();
                    }
                }
            }
            for (name, slot) in base.slots_mut() {
                match (name.as_str(), slot) {
                    ("dec.block1.c1.conv.w", Slot::Param(p)) => {
                        *p = Tensor::param(Shape::new(c, c, 3, 3), first_half.clone()).unwrap()
                    }
                    ("dec.block1.c1.conv.b", Slot::Param(p)) => {
                        *p = Tensor::param(
                            fused_named["dec.block1.c1.conv.b"].shape(),
                            fused_named["dec.block1.c1.conv.b"].data().to_vec(),
                        )
                        .unwrap()
                    }
                    // The per-stream fuse transition must also match.
                    ("fuse.conv.w", Slot::Param(p)) => *p = fused_named["fuse.conv.w"].clone(),
                    ("fuse.conv.b", Slot::Param(p)) => *p = fused_named["fuse.conv.b"].clone(),
                    ("fuse.bn.gamma", Slot::Param(p)) => *p = fused_named["fuse.bn.gamma"].clone(),
                    ("fuse.bn.beta", Slot::Param(p)) => *p = fused_named["fuse.bn.beta"].clone(),
                    ("fuse.bn.running_mean", Slot::Stat(v)) => {
                        v.copy_from_slice(fused_named["fuse.bn.running_mean"].data())
                    }
                    ("fuse.bn.running_var", Slot::Stat(v)) => {
                        v.copy_from_slice(fused_named["fuse.bn.running_var"].data())
                    }
                    _ => {}
                }
            }
        }
        Fusion::None => unreachable!(),
    }

    let x = det_filled(Shape::new(1, 1, 32, 64), 41);
    let xf = det_filled(Shape::new(1, 1, 32, 64), 42);
    let f = fused.encode(&x)?;
    let ff = fused.encode(&xf)?;
    let fused_logits = fused.fuse_and_decode(&f, Some(&ff))?;
    let base_logits = base.fuse_and_decode(&f, None)?;
    let same = fused_logits
        .data()
        .iter()
        .zip(base_logits.data())
        .all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0));
    Ok(same)
}

/// Deterministic pseudo-random fill for self-check fixtures.
fn det_filled(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let data: Vec<f32> = (0..shape.numel())
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        })
        .collect();
    Tensor::constant(shape, data).unwrap()
}

fn first_c(t: &Tensor<f32>, c: usize) -> Tensor<f32> {
    Tensor::param(Shape::new(1, c, 1, 1), t.data()[..c].to_vec()).unwrap()
}
