//! Embedding and matching networks.
//!
//! The embedding network maps an RGB frame to a quarter-resolution feature map. The embeddings
//! of a reference and a target frame are concatenated (reference first) and fed to the matching
//! network, a cascade of 3x3 layers whose last layer outputs a 2-channel offset field in
//! quarter-resolution pixel units. A parameter-free warp then samples the reference (image during
//! training, class maps during inference) at the displaced positions.
//!
//! Matching variants:
//! - `deform`: three deformable layers 64->32->16->2, each fed by its own 3x3 offset conv with
//!   18 outputs.
//! - `conv-k`: `k` standard 3x3 layers ending in 2 channels.
//! - `dilation-r`: three 3x3 layers with dilation `r`, 64->32->16->2.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::deform::KernelGrid;
use crate::error::{Error, Result};
use crate::kernels::{BatchStats, ConvGeometry, NormMode, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::{gaussian_init, Tensor};

/// Spatial downscale between input frames and embeddings/offsets.
pub const DOWNSCALE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Deform,
    Conv(usize),
    Dilation(usize),
}

impl Variant {
    pub fn validate(self) -> Result<Self> {
        match self {
            Variant::Deform => Ok(self),
            Variant::Conv(k) if [1, 3, 5].contains(&k) => Ok(self),
            Variant::Dilation(r) if [3, 6, 9].contains(&r) => Ok(self),
            Variant::Conv(k) => Err(Error::Config(format!("conv variant needs 1, 3 or 5 layers, got {k}"))),
            Variant::Dilation(r) => Err(Error::Config(format!("dilation variant needs rate 3, 6 or 9, got {r}"))),
        }
    }

    /// Output channels of each matching layer.
    fn channels(self) -> Vec<usize> {
        match self {
            Variant::Deform | Variant::Dilation(_) | Variant::Conv(3) => vec![32, 16, 2],
            Variant::Conv(1) => vec![2],
            Variant::Conv(_) => vec![32, 32, 16, 16, 2],
        }
    }

    fn dilation(self) -> usize {
        match self {
            Variant::Dilation(r) => r,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Deform => write!(f, "deform"),
            Variant::Conv(k) => write!(f, "conv{k}"),
            Variant::Dilation(r) => write!(f, "dilation{r}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "");
        let parsed = if s == "deform" {
            Some(Variant::Deform)
        } else if let Some(k) = s.strip_prefix("conv") {
            k.parse().ok().map(Variant::Conv)
        } else if let Some(r) = s.strip_prefix("dilation") {
            r.parse().ok().map(Variant::Dilation)
        } else {
            None
        };
        parsed
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))?
            .validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of a single frame's embedding; the matching input has twice as many.
    pub embed_dim: usize,
    pub variant: Variant,
    /// Output channels of the embedding conv blocks. The first block keeps full resolution,
    /// every later block halves it; up-convolutions bring the result back to `1/4`.
    pub embed_channels: Vec<usize>,
    pub init_std: f64,
    /// Start offset convolutions at zero so deformable layers begin as plain convolutions.
    pub zero_init_offsets: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            embed_dim: 32,
            variant: Variant::Deform,
            embed_channels: vec![16, 32, 32, 32],
            init_std: 0.01,
            zero_init_offsets: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        let blocks = self.embed_channels.len();
        if blocks < 3 {
            return Err(Error::Config(format!("embedding needs at least 3 blocks, got {blocks}")));
        }
        let total = 1usize << (blocks - 1);
        if self.height % total != 0 || self.width % total != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must be a positive multiple of {total} for {blocks} embedding blocks",
                self.height, self.width
            )));
        }
        if self.embed_dim == 0 || self.embed_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.init_std >= 0.0) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("init_std >= 0, bn_eps > 0 and bn_momentum in [0, 1] required".into()));
        }
        Ok(())
    }

    fn up_stages(&self) -> usize {
        self.embed_channels.len() - 3
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / DOWNSCALE, self.width / DOWNSCALE)
    }
}

/// Role of a named model tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpConvLayer<T> {
    pub name: String,
    /// `[Cin, Cout, 4, 4]`, stride 2, padding 1: doubles the resolution.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer<T> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchLayer<T> {
    pub conv: ConvLayer<T>,
    /// Present for deformable layers: a 3x3 conv producing `2 * 9` offsets.
    pub offset: Option<ConvLayer<T>>,
    /// Batch norm + ReLU follow every layer except the last.
    pub norm: Option<NormLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub blocks: Vec<(ConvLayer<T>, NormLayer<T>)>,
    pub ups: Vec<(UpConvLayer<T>, NormLayer<T>)>,
    pub head: ConvLayer<T>,
    pub matching: Vec<MatchLayer<T>>,
}

/// Forward-pass context: normalization mode plus batch statistics awaiting
/// [`ModelParams::apply_batch_stats`].
#[derive(Debug)]
pub struct Pass<T> {
    pub mode: NormMode,
    pending: Vec<(String, BatchStats<T>)>,
}

impl<T> Pass<T> {
    pub fn train() -> Self {
        Self {
            mode: NormMode::Train,
            pending: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: NormMode::Eval,
            pending: Vec::new(),
        }
    }
}

/// Outputs of the training-time forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutputs {
    /// Predicted quarter-resolution target frame.
    pub prediction: Var,
    /// Quarter-resolution target frame.
    pub target: Var,
    /// 2-channel offset field.
    pub offsets: Var,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Init<'a> {
    config: &'a ModelConfig,
    counter: u64,
}

impl Init<'_> {
    fn gaussian<T: Scalar>(&mut self, shape: [usize; 4], std: f64) -> Result<Tensor<T>> {
        self.counter += 1;
        gaussian_init(shape, std, splitmix(self.config.seed ^ splitmix(self.counter)))
    }

    fn conv<T: Scalar>(&mut self, name: String, cin: usize, cout: usize, k: usize, geometry: ConvGeometry, zero: bool) -> Result<ConvLayer<T>> {
        let std = if zero { 0.0 } else { self.config.init_std };
        Ok(ConvLayer {
            name,
            weight: self.gaussian([cout, cin, k, k], std)?,
            bias: Tensor::zeros([cout]),
            geometry,
        })
    }

    fn norm<T: Scalar>(name: String, c: usize) -> NormLayer<T> {
        NormLayer {
            name,
            gamma: Tensor::full([c], T::one()),
            beta: Tensor::zeros([c]),
            stats: RunningStats::new(c),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Builds freshly initialized parameters; equal configs give bit-identical tensors.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init { config, counter: 0 };
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.embed_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let conv = init.conv(format!("embed.block{i}.conv"), cin, c, 3, ConvGeometry::new(stride, 1), false)?;
            blocks.push((conv, Init::norm(format!("embed.block{i}.bn"), c)));
            cin = c;
        }
        let mut ups = Vec::new();
        for i in 0..config.up_stages() {
            let up = UpConvLayer {
                name: format!("embed.up{i}.conv"),
                weight: init.gaussian([cin, cin, 4, 4], config.init_std)?,
                bias: Tensor::zeros([cin]),
            };
            ups.push((up, Init::norm(format!("embed.up{i}.bn"), cin)));
        }
        let head = init.conv("embed.head".into(), cin, config.embed_dim, 1, ConvGeometry::new(1, 0), false)?;

        let variant = config.variant;
        let dilation = variant.dilation();
        let chans = variant.channels();
        let mut matching = Vec::new();
        let mut cin = 2 * config.embed_dim;
        for (i, &c) in chans.iter().enumerate() {
            let last = i + 1 == chans.len();
            let geometry = ConvGeometry::new(1, dilation).dilated(dilation);
            let conv = init.conv(format!("match.{i}"), cin, c, 3, geometry, false)?;
            let offset = match variant {
                Variant::Deform => {
                    Some(init.conv(format!("match.{i}.offset"), cin, 18, 3, ConvGeometry::same(3), config.zero_init_offsets)?)
                }
                _ => None,
            };
            let norm = (!last).then(|| Init::norm(format!("match.{i}.bn"), c));
            matching.push(MatchLayer { conv, offset, norm });
            cin = c;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
            ups,
            head,
            matching,
        })
    }

    /// Every named tensor in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, TensorKind, &Tensor<T>)> {
        fn conv<'a, T>(out: &mut Vec<(String, TensorKind, &'a Tensor<T>)>, c: &'a ConvLayer<T>) {
            out.push((format!("{}.weight", c.name), TensorKind::ConvWeight, &c.weight));
            out.push((format!("{}.bias", c.name), TensorKind::Bias, &c.bias));
        }
        fn norm<'a, T>(out: &mut Vec<(String, TensorKind, &'a Tensor<T>)>, n: &'a NormLayer<T>) {
            out.push((format!("{}.gamma", n.name), TensorKind::NormScale, &n.gamma));
            out.push((format!("{}.beta", n.name), TensorKind::NormShift, &n.beta));
            out.push((format!("{}.running_mean", n.name), TensorKind::RunningMean, &n.stats.mean));
            out.push((format!("{}.running_var", n.name), TensorKind::RunningVar, &n.stats.var));
        }
        let mut out = Vec::new();
        for (c, n) in &self.blocks {
            conv(&mut out, c);
            norm(&mut out, n);
        }
        for (u, n) in &self.ups {
            out.push((format!("{}.weight", u.name), TensorKind::ConvWeight, &u.weight));
            out.push((format!("{}.bias", u.name), TensorKind::Bias, &u.bias));
            norm(&mut out, n);
        }
        conv(&mut out, &self.head);
        for m in &self.matching {
            conv(&mut out, &m.conv);
            if let Some(o) = &m.offset {
                conv(&mut out, o);
            }
            if let Some(n) = &m.norm {
                norm(&mut out, n);
            }
        }
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorKind, &mut Tensor<T>)> {
        fn conv<'a, T>(out: &mut Vec<(String, TensorKind, &'a mut Tensor<T>)>, c: &'a mut ConvLayer<T>) {
            out.push((format!("{}.weight", c.name), TensorKind::ConvWeight, &mut c.weight));
            out.push((format!("{}.bias", c.name), TensorKind::Bias, &mut c.bias));
        }
        fn norm<'a, T>(out: &mut Vec<(String, TensorKind, &'a mut Tensor<T>)>, n: &'a mut NormLayer<T>) {
            out.push((format!("{}.gamma", n.name), TensorKind::NormScale, &mut n.gamma));
            out.push((format!("{}.beta", n.name), TensorKind::NormShift, &mut n.beta));
            out.push((format!("{}.running_mean", n.name), TensorKind::RunningMean, &mut n.stats.mean));
            out.push((format!("{}.running_var", n.name), TensorKind::RunningVar, &mut n.stats.var));
        }
        let mut out = Vec::new();
        for (c, n) in &mut self.blocks {
            conv(&mut out, c);
            norm(&mut out, n);
        }
        for (u, n) in &mut self.ups {
            out.push((format!("{}.weight", u.name), TensorKind::ConvWeight, &mut u.weight));
            out.push((format!("{}.bias", u.name), TensorKind::Bias, &mut u.bias));
            norm(&mut out, n);
        }
        conv(&mut out, &mut self.head);
        for m in &mut self.matching {
            conv(&mut out, &mut m.conv);
            if let Some(o) = &mut m.offset {
                conv(&mut out, o);
            }
            if let Some(n) = &mut m.norm {
                norm(&mut out, n);
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.named_tensors().iter().filter(|(_, k, _)| k.trainable()).map(|(_, _, t)| t.numel()).sum()
    }

    pub fn offset_conv_count(&self) -> usize {
        self.matching.iter().filter(|m| m.offset.is_some()).count()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |c: &ConvLayer<T>| ConvLayer {
            name: c.name.clone(),
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            geometry: c.geometry,
        };
        let norm = |n: &NormLayer<T>| NormLayer {
            name: n.name.clone(),
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
            stats: RunningStats {
                mean: n.stats.mean.cast(),
                var: n.stats.var.cast(),
            },
        };
        ModelParams {
            config: self.config.clone(),
            blocks: self.blocks.iter().map(|(c, n)| (conv(c), norm(n))).collect(),
            ups: self
                .ups
                .iter()
                .map(|(u, n)| {
                    (
                        UpConvLayer {
                            name: u.name.clone(),
                            weight: u.weight.cast(),
                            bias: u.bias.cast(),
                        },
                        norm(n),
                    )
                })
                .collect(),
            head: conv(&self.head),
            matching: self
                .matching
                .iter()
                .map(|m| MatchLayer {
                    conv: conv(&m.conv),
                    offset: m.offset.as_ref().map(conv),
                    norm: m.norm.as_ref().map(norm),
                })
                .collect(),
        }
    }

    /// Folds the batch statistics gathered by training-mode passes into the running estimates.
    pub fn apply_batch_stats(&mut self, pass: &mut Pass<T>) {
        let momentum = self.config.bn_momentum;
        for (name, stats) in pass.pending.drain(..) {
            let layer = self
                .blocks
                .iter_mut()
                .map(|(_, n)| n)
                .chain(self.ups.iter_mut().map(|(_, n)| n))
                .chain(self.matching.iter_mut().filter_map(|m| m.norm.as_mut()))
                .find(|n| n.name == name);
            if let Some(layer) = layer {
                layer.stats.update(&stats, momentum);
            }
        }
    }

    fn conv(&self, g: &mut Graph<T>, layer: &ConvLayer<T>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.weight", layer.name), &layer.weight);
        let b = g.param(&format!("{}.bias", layer.name), &layer.bias);
        g.conv2d(x, w, Some(b), layer.geometry)
    }

    fn norm_relu(&self, g: &mut Graph<T>, layer: &NormLayer<T>, x: Var, pass: &mut Pass<T>) -> Result<Var> {
        let gamma = g.param(&format!("{}.gamma", layer.name), &layer.gamma);
        let beta = g.param(&format!("{}.beta", layer.name), &layer.beta);
        let (y, batch) = g.batch_norm(x, gamma, beta, &layer.stats, pass.mode, self.config.bn_eps)?;
        if let Some(b) = batch {
            pass.pending.push((layer.name.clone(), b));
        }
        g.relu(y)
    }

    /// `[N, 3, H, W]` frames to `[N, embed_dim, H/4, W/4]` embeddings.
    pub fn embed(&self, g: &mut Graph<T>, frame: Var, pass: &mut Pass<T>) -> Result<Var> {
        let [_, c, h, w] = g.value(frame).dims4("embed")?;
        if c != 3 || (h, w) != (self.config.height, self.config.width) {
            return Err(Error::shape(
                "embed",
                format!("[N, 3, {}, {}]", self.config.height, self.config.width),
                format!("{:?}", g.value(frame).shape()),
            ));
        }
        let mut x = frame;
        for (conv, norm) in &self.blocks {
            x = self.conv(g, conv, x)?;
            x = self.norm_relu(g, norm, x, pass)?;
        }
        for (up, norm) in &self.ups {
            let w = g.param(&format!("{}.weight", up.name), &up.weight);
            let b = g.param(&format!("{}.bias", up.name), &up.bias);
            x = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
            x = self.norm_relu(g, norm, x, pass)?;
        }
        self.conv(g, &self.head, x)
    }

    /// Concatenated embeddings, reference channels first.
    pub fn embed_pair(&self, g: &mut Graph<T>, reference: Var, target: Var, pass: &mut Pass<T>) -> Result<Var> {
        if g.value(reference).shape() != g.value(target).shape() {
            return Err(Error::shape("embed_pair", format!("{:?}", g.value(reference).shape()), format!("{:?}", g.value(target).shape())));
        }
        let r = self.embed(g, reference, pass)?;
        let t = self.embed(g, target, pass)?;
        g.concat_channels(&[r, t])
    }

    /// Matching network: concatenated features to the final 2-channel offset field.
    pub fn match_offsets(&self, g: &mut Graph<T>, features: Var, pass: &mut Pass<T>) -> Result<Var> {
        let [_, c, _, _] = g.value(features).dims4("match")?;
        if c != 2 * self.config.embed_dim {
            return Err(Error::shape("match", format!("{} channels", 2 * self.config.embed_dim), format!("{c}")));
        }
        let mut f = features;
        for layer in &self.matching {
            f = match &layer.offset {
                Some(off) => {
                    let offsets = self.conv(g, off, f)?;
                    let w = g.param(&format!("{}.weight", layer.conv.name), &layer.conv.weight);
                    let b = g.param(&format!("{}.bias", layer.conv.name), &layer.conv.bias);
                    g.deform_conv2d(f, w, offsets, Some(b), 1, 1)?
                }
                None => self.conv(g, &layer.conv, f)?,
            };
            if let Some(norm) = &layer.norm {
                f = self.norm_relu(g, norm, f, pass)?;
            }
        }
        Ok(f)
    }

    /// Reconstructs the (quarter-resolution) target frame by warping the reference frame.
    pub fn forward_train(&self, g: &mut Graph<T>, reference: Var, target: Var, pass: &mut Pass<T>) -> Result<TrainOutputs> {
        let features = self.embed_pair(g, reference, target, pass)?;
        let offsets = self.match_offsets(g, features, pass)?;
        let source = g.downsample(reference, DOWNSCALE)?;
        let prediction = g.warp(source, offsets)?;
        let target = g.downsample(target, DOWNSCALE)?;
        Ok(TrainOutputs {
            prediction,
            target,
            offsets,
        })
    }

    /// Offset field for a frame pair with no gradient tracking, eval-mode normalization.
    pub fn infer_offsets(&self, reference: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let r = g.input(reference.clone());
        let t = g.input(target.clone());
        let mut pass = Pass::eval();
        let f = self.embed_pair(&mut g, r, t, &mut pass)?;
        let o = self.match_offsets(&mut g, f, &mut pass)?;
        Ok(g.value(o).clone())
    }

    /// Concatenated embeddings of a frame pair, eval-mode normalization.
    pub fn infer_features(&self, reference: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let r = g.input(reference.clone());
        let t = g.input(target.clone());
        let f = self.embed_pair(&mut g, r, t, &mut Pass::eval())?;
        Ok(g.value(f).clone())
    }

    /// Fractional sampling locations of the first matching layer for every output pixel of
    /// batch item 0 (row-major), given the concatenated features that layer consumes. Fixed
    /// grids for standard and dilated layers, `p0 + pn + offset` for deformable ones.
    pub fn first_layer_sampling(&self, features: &Tensor<T>) -> Result<Vec<Vec<(f64, f64)>>> {
        let [_, _, h, w] = features.dims4("first_layer_sampling")?;
        let grid = KernelGrid::dilated(3, 3, self.config.variant.dilation());
        let offsets = match &self.matching[0].offset {
            Some(off) => {
                let mut g = Graph::new();
                let f = g.input(features.batch_item(0)?);
                let o = self.conv(&mut g, off, f)?;
                Some(g.value(o).clone())
            }
            None => None,
        };
        Ok((0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                grid.taps()
                    .iter()
                    .enumerate()
                    .map(|(tap, &(dy, dx))| {
                        let (py, px) = ((y as isize + dy) as f64, (x as isize + dx) as f64);
                        match &offsets {
                            Some(o) => (
                                py + o.at4(0, 2 * tap, y, x).to_f64_lossy(),
                                px + o.at4(0, 2 * tap + 1, y, x).to_f64_lossy(),
                            ),
                            None => (py, px),
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

/// Freshly initialized `f32` parameters for `config`.
pub fn build_model(config: &ModelConfig) -> Result<ModelParams<f32>> {
    ModelParams::new(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 32,
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("deform".parse::<Variant>().unwrap(), Variant::Deform);
        assert_eq!("conv-3".parse::<Variant>().unwrap(), Variant::Conv(3));
        assert_eq!("dilation9".parse::<Variant>().unwrap(), Variant::Dilation(9));
        assert!("conv2".parse::<Variant>().is_err());
        assert!("dilation0".parse::<Variant>().is_err());
        assert!("banana".parse::<Variant>().is_err());
        for v in [Variant::Deform, Variant::Conv(5), Variant::Dilation(6)] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn deform_matching_structure() {
        let p = build_model(&small(Variant::Deform)).unwrap();
        assert_eq!(p.offset_conv_count(), 3);
        let chain: Vec<_> = p.matching.iter().map(|m| m.conv.weight.shape()[..2].to_vec()).collect();
        assert_eq!(chain, vec![vec![32, 64], vec![16, 32], vec![2, 16]]);
        for m in &p.matching {
            assert_eq!(m.offset.as_ref().unwrap().weight.shape(), &[18, m.conv.weight.shape()[1], 3, 3]);
        }
        assert!(p.matching[2].norm.is_none());
    }

    #[test]
    fn conv_and_dilation_variants_have_no_offset_convs() {
        let c3 = build_model(&small(Variant::Conv(3))).unwrap();
        assert_eq!(c3.matching.len(), 3);
        assert_eq!(c3.offset_conv_count(), 0);
        assert_eq!(c3.matching[2].conv.weight.shape()[0], 2);
        assert_eq!(build_model(&small(Variant::Conv(1))).unwrap().matching.len(), 1);
        assert_eq!(build_model(&small(Variant::Conv(5))).unwrap().matching.len(), 5);
        let d6 = build_model(&small(Variant::Dilation(6))).unwrap();
        assert_eq!(d6.matching[0].conv.geometry, ConvGeometry::new(1, 6).dilated(6));
        assert_eq!(d6.offset_conv_count(), 0);
    }

    #[test]
    fn building_is_deterministic() {
        let a = build_model(&small(Variant::Deform)).unwrap();
        let b = build_model(&small(Variant::Deform)).unwrap();
        assert_eq!(a, b);
        let c = build_model(&ModelConfig { seed: 1, ..small(Variant::Deform) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(build_model(&ModelConfig { height: 30, ..small(Variant::Deform) }).is_err());
        assert!(build_model(&ModelConfig { embed_channels: vec![8, 8], ..small(Variant::Deform) }).is_err());
        assert!(build_model(&small(Variant::Conv(4))).is_err());
    }

    #[test]
    fn shapes_through_the_network() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let mut g = Graph::new();
        let a = g.input(gaussian_init([1, 3, 64, 64], 1.0, 1).unwrap());
        let b = g.input(gaussian_init([1, 3, 64, 64], 1.0, 2).unwrap());
        let mut pass = Pass::train();
        let e = p.embed(&mut g, a, &mut pass).unwrap();
        assert_eq!(g.value(e).shape(), &[1, 32, 16, 16]);
        let out = p.forward_train(&mut g, a, b, &mut pass).unwrap();
        assert_eq!(g.value(out.offsets).shape(), &[1, 2, 16, 16]);
        assert_eq!(g.value(out.prediction).shape(), &[1, 3, 16, 16]);
        let bad = g.input(Tensor::zeros([1, 1, 64, 64]));
        assert!(p.embed(&mut g, bad, &mut pass).is_err());
    }

    #[test]
    fn embed_pair_orders_reference_first() {
        let p = build_model(&small(Variant::Deform)).unwrap();
        let mut g = Graph::new();
        let a = g.input(gaussian_init([1, 3, 32, 32], 1.0, 1).unwrap());
        let b = g.input(gaussian_init([1, 3, 32, 32], 1.0, 2).unwrap());
        let mut pass = Pass::eval();
        let ab = p.embed_pair(&mut g, a, b, &mut pass).unwrap();
        let ba = p.embed_pair(&mut g, b, a, &mut pass).unwrap();
        let aa = p.embed_pair(&mut g, a, a, &mut pass).unwrap();
        let half = 32 * 8 * 8;
        let (ab, ba, aa) = (g.value(ab).data(), g.value(ba).data(), g.value(aa).data());
        assert_eq!(ab.len(), 2 * half);
        assert_eq!(&ab[..half], &ba[half..]);
        assert_eq!(&ab[half..], &ba[..half]);
        assert_eq!(&aa[..half], &aa[half..]);
    }

    #[test]
    fn zero_final_layer_gives_zero_offsets() {
        let mut p = build_model(&small(Variant::Deform)).unwrap();
        p.matching[2].conv.weight = Tensor::zeros(p.matching[2].conv.weight.shape().to_vec());
        let a = gaussian_init([1, 3, 32, 32], 1.0, 5).unwrap();
        let b = gaussian_init([1, 3, 32, 32], 1.0, 6).unwrap();
        let off = p.infer_offsets(&a, &b).unwrap();
        assert!(off.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_offset_convs_reduce_deform_to_conv3() {
        let mut d = build_model(&small(Variant::Deform)).unwrap();
        for m in &mut d.matching {
            let o = m.offset.as_mut().unwrap();
            o.weight = Tensor::zeros(o.weight.shape().to_vec());
        }
        let mut c = build_model(&small(Variant::Conv(3))).unwrap();
        c.blocks = d.blocks.clone();
        c.ups = d.ups.clone();
        c.head = d.head.clone();
        for (cm, dm) in c.matching.iter_mut().zip(&d.matching) {
            cm.conv.weight = dm.conv.weight.clone();
            cm.conv.bias = dm.conv.bias.clone();
            cm.norm = dm.norm.clone();
        }
        let a = gaussian_init([2, 3, 32, 32], 1.0, 7).unwrap();
        let b = gaussian_init([2, 3, 32, 32], 1.0, 8).unwrap();
        let od = d.infer_offsets(&a, &b).unwrap();
        let oc = c.infer_offsets(&a, &b).unwrap();
        assert!(od.max_abs_diff(&oc).unwrap() < 1e-6);
    }

    #[test]
    fn identity_reconstruction_with_zero_offsets() {
        let mut p = build_model(&small(Variant::Deform)).unwrap();
        p.matching[2].conv.weight = Tensor::zeros(p.matching[2].conv.weight.shape().to_vec());
        let img: Tensor<f32> = gaussian_init([1, 3, 32, 32], 1.0, 9).unwrap();
        let mut g = Graph::new();
        let a = g.input(img.clone());
        let b = g.input(img);
        let out = p.forward_train(&mut g, a, b, &mut Pass::train()).unwrap();
        assert_eq!(g.value(out.prediction), g.value(out.target));
    }

    #[test]
    fn batch_stats_update_running_estimates() {
        let mut p = build_model(&small(Variant::Deform)).unwrap();
        let before = p.blocks[0].1.stats.clone();
        let mut g = Graph::new();
        let a = g.input(gaussian_init([2, 3, 32, 32], 1.0, 3).unwrap());
        let mut pass = Pass::train();
        p.embed(&mut g, a, &mut pass).unwrap();
        p.apply_batch_stats(&mut pass);
        assert_ne!(p.blocks[0].1.stats, before);
    }

    #[test]
    fn named_tensor_orders_agree() {
        let mut p = build_model(&small(Variant::Deform)).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        let names_mut: Vec<String> = p.named_tensors_mut().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, names_mut);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn first_layer_sampling_grids() {
        let feats: Tensor<f32> = gaussian_init([1, 64, 8, 8], 1.0, 4).unwrap();
        let d = build_model(&small(Variant::Deform)).unwrap();
        let s = d.first_layer_sampling(&feats).unwrap();
        assert_eq!(s.len(), 64);
        // Zero-initialized offset convs reproduce the plain 3x3 grid.
        assert_eq!(s[9][0], (0.0, 0.0));
        assert_eq!(s[9][8], (2.0, 2.0));
        let dil = build_model(&small(Variant::Dilation(3))).unwrap();
        let s = dil.first_layer_sampling(&feats).unwrap();
        assert_eq!(s[3 * 8 + 3][0], (0.0, 0.0));
        assert_eq!(s[3 * 8 + 3][5], (3.0, 6.0));
    }
}
