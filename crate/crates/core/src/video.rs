use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{} pixels", height * width), format!("{}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    /// Sorted set of classes present, background always included.
    pub fn classes(&self) -> Vec<u8> {
        let mut set: BTreeSet<u8> = self.data.iter().copied().collect();
        set.insert(0);
        set.into_iter().collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Most frequent class in each `factor x factor` block; ties go to the smaller class.
    pub fn downsample_majority(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(
                "downsample_majority",
                format!("{}x{} is not divisible by {factor}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Vec::with_capacity(h * w);
        let mut hist = [0usize; 256];
        for by in 0..h {
            for bx in 0..w {
                hist.iter_mut().for_each(|c| *c = 0);
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        hist[self.get(y, x) as usize] += 1;
                    }
                }
                // max_by_key keeps the last maximum, so scan classes in descending order.
                let best = (0..256).rev().max_by_key(|&c| hist[c]).unwrap_or(0);
                out.push(best as u8);
            }
        }
        Ok(Self { height: h, width: w, data: out })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        Self::from_fn(h, w, |y, x| self.get(y / factor, x / factor))
    }
}

/// Frames (`[3, H, W]`, values in `[0, 1]`) with optional ground-truth masks and flows.
///
/// `flows[t]` is `[2, H, W]`: the `(dy, dx)` displacement, from frame `t - 1` to frame `t`, of
/// the surface visible at each pixel of frame `t`. `flows[0]` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
    pub masks: Option<Vec<SegmentationMask>>,
    pub flows: Option<Vec<Tensor<f32>>>,
}

impl VideoSequence {
    pub fn new(name: impl Into<String>, frames: Vec<Tensor<f32>>) -> Result<Self> {
        let seq = Self {
            name: name.into(),
            frames,
            masks: None,
            flows: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)` of the frames.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.shape()[1], f.shape()[2]))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims().ok_or_else(|| Error::invalid("video", format!("`{}` has no frames", self.name)))?;
        for f in &self.frames {
            if f.shape() != [3, h, w] {
                return Err(Error::shape("video frame", format!("[3, {h}, {w}]"), format!("{:?}", f.shape())));
            }
        }
        if let Some(masks) = &self.masks {
            // A lone first-frame mask is the semi-supervised input.
            if masks.len() != self.frames.len() && masks.len() != 1 {
                return Err(Error::invalid("video", format!("{} masks for {} frames", masks.len(), self.frames.len())));
            }
            if let Some(m) = masks.iter().find(|m| m.dims() != (h, w)) {
                return Err(Error::shape("video mask", format!("{h}x{w}"), format!("{}x{}", m.height(), m.width())));
            }
        }
        if let Some(flows) = &self.flows {
            if flows.len() != self.frames.len() || flows.iter().any(|f| f.shape() != [2, h, w]) {
                return Err(Error::invalid("video", "flows must be one [2, H, W] field per frame"));
            }
        }
        Ok(())
    }

    /// Frame `t` with a leading batch axis.
    pub fn frame_batch(&self, t: usize) -> Result<Tensor<f32>> {
        let f = self.frames.get(t).ok_or_else(|| Error::IndexOutOfRange {
            index: t,
            reason: format!("video `{}` has {} frames", self.name, self.frames.len()),
        })?;
        let mut shape = vec![1];
        shape.extend_from_slice(f.shape());
        f.clone().reshape(shape)
    }

    /// Copy without ground truth.
    pub fn frames_only(&self) -> Self {
        Self {
            name: self.name.clone(),
            frames: self.frames.clone(),
            masks: None,
            flows: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_downsample_breaks_ties_low() {
        let m = SegmentationMask::new(2, 4, vec![2, 1, 0, 0, 1, 2, 0, 3]).unwrap();
        let d = m.downsample_majority(2).unwrap();
        assert_eq!(d.data(), &[1, 0]);
        assert_eq!(d.upsample_nearest(2).dims(), (2, 4));
        assert!(m.downsample_majority(3).is_err());
    }

    #[test]
    fn classes_include_background() {
        let m = SegmentationMask::filled(2, 2, 3);
        assert_eq!(m.classes(), vec![0, 3]);
    }

    #[test]
    fn validation() {
        let f = Tensor::zeros([3, 4, 4]);
        let mut v = VideoSequence::new("a", vec![f.clone(), f]).unwrap();
        v.masks = Some(vec![SegmentationMask::filled(4, 4, 0)]);
        assert!(v.validate().is_ok());
        v.masks = Some(vec![SegmentationMask::filled(4, 3, 0)]);
        assert!(v.validate().is_err());
        assert!(VideoSequence::new("b", vec![]).is_err());
        assert_eq!(v.frame_batch(1).unwrap().shape(), &[1, 3, 4, 4]);
        assert!(v.frame_batch(2).is_err());
    }
}
