//! PNG codecs. Frames are 8-bit RGB; masks are 8-bit grayscale with the class index as value.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::SegmentationMask;

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `[3, H, W]` in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[c * h * w + y as usize * w + x as usize] = f32::from(p[c]) / 255.0;
        }
    }
    t
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] | [1, c, h, w] => [c, h, w],
        _ => return Err(Error::shape("tensor_to_rgb", "[3, H, W]", format!("{:?}", t.shape()))),
    };
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb", "3 channels", format!("{c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|k| (d[k * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let img = tensor_to_rgb(frame)?;
    save(|p| img.save(p), path)
}

pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    let img = open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::format(
                path,
                format!("masks must be 8-bit grayscale PNGs, found {:?}", other.color()),
            ))
        }
    };
    SegmentationMask::new(gray.height() as usize, gray.width() as usize, gray.into_raw())
}

pub fn write_mask(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .ok_or_else(|| Error::invalid("write_mask", "buffer size"))?;
    save(|p| img.save(p), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_covers_all_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = SegmentationMask::from_fn(16, 16, |y, x| (y * 16 + x) as u8);
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn frame_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        let f = Tensor::from_fn([3, 5, 7], |i| (i % 256) as f32 / 255.0);
        write_frame(&p, &f).unwrap();
        assert_eq!(read_frame(&p).unwrap(), f);
    }

    #[test]
    fn rgb_masks_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_frame(&p, &Tensor::zeros([3, 2, 2])).unwrap();
        let err = read_mask(&p).unwrap_err().to_string();
        assert!(err.contains("c.png") && err.contains("grayscale"), "{err}");
        assert!(read_frame(&dir.path().join("missing.png")).is_err());
    }
}
