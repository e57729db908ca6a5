//! Mask propagation: warp each class's indicator map with the predicted offsets and take the
//! per-pixel argmax.

use std::str::FromStr;

use crate::deform::{sample_plane, warp};
use crate::error::{Error, Result};
use crate::model::{ModelParams, DOWNSCALE};
use crate::tensor::Tensor;
use crate::video::{SegmentationMask, VideoSequence};

/// One indicator plane per class, `[1, |C|, H, W]`, in the order of `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBinaryMaps {
    pub classes: Vec<u8>,
    pub maps: Tensor<f32>,
}

pub fn split_classes(mask: &SegmentationMask, classes: &[u8]) -> Result<ClassBinaryMaps> {
    let (h, w) = mask.dims();
    let mut lookup = [usize::MAX; 256];
    for (i, &c) in classes.iter().enumerate() {
        lookup[c as usize] = i;
    }
    let mut maps = Tensor::zeros([1, classes.len(), h, w]);
    for (p, &v) in mask.data().iter().enumerate() {
        let i = lookup[v as usize];
        if i == usize::MAX {
            return Err(Error::invalid("split_classes", format!("mask value {v} is not in the class set {classes:?}")));
        }
        maps.data_mut()[i * h * w + p] = 1.0;
    }
    Ok(ClassBinaryMaps {
        classes: classes.to_vec(),
        maps,
    })
}

/// Per-pixel argmax over class planes; ties go to the earliest (smallest) class.
pub fn argmax_classes(maps: &ClassBinaryMaps) -> Result<SegmentationMask> {
    let [_, c, h, w] = maps.maps.dims4("argmax_classes")?;
    if c != maps.classes.len() || c == 0 {
        return Err(Error::invalid("argmax_classes", format!("{c} planes for {} classes", maps.classes.len())));
    }
    let d = maps.maps.data();
    let out = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * h * w + p] > d[best * h * w + p] {
                    best = k;
                }
            }
            maps.classes[best]
        })
        .collect();
    SegmentationMask::new(h, w, out)
}

/// Warps `mask` by `offsets` (`[1, 2, h, w]`, same grid as the mask) and takes the argmax.
pub fn propagate_with_offsets(mask: &SegmentationMask, classes: &[u8], offsets: &Tensor<f32>) -> Result<SegmentationMask> {
    let [_, _, h, w] = offsets.dims4("propagate")?;
    if (h, w) != mask.dims() {
        return Err(Error::shape("propagate", format!("{}x{} offsets", mask.height(), mask.width()), format!("{h}x{w}")));
    }
    let maps = split_classes(mask, classes)?;
    let warped = warp(&maps.maps, offsets)?;
    argmax_classes(&ClassBinaryMaps {
        classes: maps.classes,
        maps: warped,
    })
}

/// Working resolution of the propagated masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskResolution {
    /// The offset grid itself (`H/4 x W/4`); outputs are upsampled by nearest neighbour.
    #[default]
    Quarter,
    /// Input resolution, with the offset field bilinearly upsampled and rescaled to pixels.
    Full,
}

impl FromStr for MaskResolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quarter" => Ok(Self::Quarter),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown mask resolution `{s}` (quarter|full)"))),
        }
    }
}

/// Bilinear upsampling of a `[1, 2, h, w]` offset field by `factor`, with pixel-center
/// alignment and edge clamping; values are multiplied by `factor` so they stay in pixel units.
pub fn upsample_offsets(offsets: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = offsets.dims4("upsample_offsets")?;
    let (oh, ow) = (h * factor, w * factor);
    let f = factor as f32;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &offsets.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let sy = ((y as f32 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f32);
            for x in 0..ow {
                let sx = ((x as f32 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f32);
                dst[y * ow + x] = f * sample_plane(src, h, w, sy, sx);
            }
        }
    }
    Ok(out)
}

/// Anything that yields the `[1, 2, H/4, W/4]` offset field for a frame pair.
pub trait OffsetSource {
    /// Offsets for propagating from frame `t - 1` to frame `t`.
    fn offsets(&self, t: usize, reference: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl OffsetSource for ModelParams<f32> {
    fn offsets(&self, _t: usize, reference: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.infer_offsets(reference, target)
    }
}

/// Always zero: masks stay where they are.
#[derive(Clone, Copy, Debug)]
pub struct ZeroOffsets;

impl OffsetSource for ZeroOffsets {
    fn offsets(&self, _t: usize, reference: &Tensor<f32>, _target: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, _, h, w] = reference.dims4("zero offsets")?;
        Ok(Tensor::zeros([n, 2, h / DOWNSCALE, w / DOWNSCALE]))
    }
}

/// Ground-truth flows turned into sampling offsets.
#[derive(Clone, Debug)]
pub struct OracleFlow<'a> {
    pub flows: &'a [Tensor<f32>],
}

/// Offsets that sample where each pixel came from: the negated flow, block-averaged to the
/// `H/4` grid and expressed in grid cells.
pub fn flow_to_offsets(flow: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let [two, h, w] = match flow.shape() {
        &[a, b, c] => [a, b, c],
        s => return Err(Error::shape("flow_to_offsets", "[2, H, W]", format!("{s:?}"))),
    };
    if two != 2 {
        return Err(Error::shape("flow_to_offsets", "[2, H, W]", format!("{:?}", flow.shape())));
    }
    let batched = flow.clone().reshape([1, 2, h, w])?;
    let down = crate::kernels::downsample_area(&batched, factor)?;
    let scale = -1.0 / factor as f32;
    Ok(down.map(|v| v * scale))
}

impl OffsetSource for OracleFlow<'_> {
    fn offsets(&self, t: usize, _reference: &Tensor<f32>, _target: &Tensor<f32>) -> Result<Tensor<f32>> {
        let flow = self.flows.get(t).ok_or_else(|| Error::IndexOutOfRange {
            index: t,
            reason: format!("{} flow fields", self.flows.len()),
        })?;
        flow_to_offsets(flow, DOWNSCALE)
    }
}

/// Post-processing applied to every propagated mask; the default leaves it untouched.
pub trait Refiner {
    fn refine(&self, _frame: &Tensor<f32>, mask: SegmentationMask) -> SegmentationMask {
        mask
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoRefine;

impl Refiner for NoRefine {}

/// Step-by-step propagation state. Each step sees only the previous and current frame.
pub struct Propagator<'a, S: OffsetSource + ?Sized> {
    source: &'a S,
    resolution: MaskResolution,
    classes: Vec<u8>,
    full: (usize, usize),
    state: SegmentationMask,
    t: usize,
}

impl<'a, S: OffsetSource + ?Sized> Propagator<'a, S> {
    pub fn new(source: &'a S, first_mask: &SegmentationMask, resolution: MaskResolution) -> Result<Self> {
        let full = first_mask.dims();
        let state = match resolution {
            MaskResolution::Quarter => first_mask.downsample_majority(DOWNSCALE)?,
            MaskResolution::Full => first_mask.clone(),
        };
        Ok(Self {
            source,
            resolution,
            classes: first_mask.classes(),
            full,
            state,
            t: 0,
        })
    }

    /// Mask at the working resolution after the last step.
    pub fn state(&self) -> &SegmentationMask {
        &self.state
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    /// Advances one frame; `reference` and `target` are `[1, 3, H, W]`.
    pub fn step(&mut self, reference: &Tensor<f32>, target: &Tensor<f32>) -> Result<SegmentationMask> {
        let [_, _, h, w] = target.dims4("propagate")?;
        if (h, w) != self.full {
            return Err(Error::shape("propagate", format!("{}x{} frames", self.full.0, self.full.1), format!("{h}x{w}")));
        }
        self.t += 1;
        let offsets = self.source.offsets(self.t, reference, target)?;
        let offsets = match self.resolution {
            MaskResolution::Quarter => offsets,
            MaskResolution::Full => upsample_offsets(&offsets, DOWNSCALE)?,
        };
        self.state = propagate_with_offsets(&self.state, &self.classes, &offsets)?;
        Ok(self.output())
    }

    /// Current mask at input resolution.
    pub fn output(&self) -> SegmentationMask {
        match self.resolution {
            MaskResolution::Quarter => self.state.upsample_nearest(DOWNSCALE),
            MaskResolution::Full => self.state.clone(),
        }
    }
}

/// One mask update for a model: `S_t` from `S_{t-1}` at the `H/4` grid.
pub fn propagate_mask(
    params: &ModelParams<f32>,
    prev_frame: &Tensor<f32>,
    frame: &Tensor<f32>,
    prev_mask: &SegmentationMask,
    classes: &[u8],
) -> Result<SegmentationMask> {
    let offsets = params.infer_offsets(prev_frame, frame)?;
    propagate_with_offsets(prev_mask, classes, &offsets)
}

/// Propagates `first_mask` through `video` with adjacent-frame pairs. The first output is the
/// given mask itself.
pub fn run_sequence<S: OffsetSource + ?Sized>(
    source: &S,
    video: &VideoSequence,
    first_mask: &SegmentationMask,
    resolution: MaskResolution,
) -> Result<Vec<SegmentationMask>> {
    run_sequence_refined(source, video, first_mask, resolution, &NoRefine)
}

pub fn run_sequence_refined<S: OffsetSource + ?Sized>(
    source: &S,
    video: &VideoSequence,
    first_mask: &SegmentationMask,
    resolution: MaskResolution,
    refiner: &dyn Refiner,
) -> Result<Vec<SegmentationMask>> {
    if video.len() < 2 {
        return Err(Error::invalid("run_sequence", format!("`{}` needs at least 2 frames", video.name)));
    }
    if Some(first_mask.dims()) != video.dims() {
        return Err(Error::shape(
            "run_sequence",
            format!("{:?} first mask", video.dims()),
            format!("{:?}", first_mask.dims()),
        ));
    }
    let mut prop = Propagator::new(source, first_mask, resolution)?;
    let mut out = vec![first_mask.clone()];
    let mut prev = video.frame_batch(0)?;
    for t in 1..video.len() {
        let cur = video.frame_batch(t)?;
        let mask = prop.step(&prev, &cur)?;
        out.push(refiner.refine(&video.frames[t], mask));
        prev = cur;
    }
    Ok(out)
}
