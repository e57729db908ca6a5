//! Images for inspecting offsets and embeddings.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::io::codec::tensor_to_rgb;
use crate::model::DOWNSCALE;
use crate::tensor::Tensor;

pub const TARGET_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const SAMPLE_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

fn fill(img: &mut RgbImage, y0: i64, x0: i64, size: i64, color: Rgb<u8>, outline: bool) {
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let edge = y == y0 || x == x0 || y == y0 + size - 1 || x == x0 + size - 1;
            if (edge || !outline) && y >= 0 && x >= 0 && (y as u32) < img.height() && (x as u32) < img.width() {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Full-resolution pixel at the center of an `H/4` grid position.
pub fn grid_to_pixel(y: f64, x: f64) -> (i64, i64) {
    let s = DOWNSCALE as f64;
    ((s * y + (s - 1.0) / 2.0).round() as i64, (s * x + (s - 1.0) / 2.0).round() as i64)
}

/// The two frames blended 50/50, a green outline around grid cell `target` and a red dot where
/// the offset field says that cell samples its reference. Offsets are `[1, 2, H/4, W/4]`.
pub fn offset_viz(reference: &Tensor<f32>, target: &Tensor<f32>, offsets: &Tensor<f32>, cell: (usize, usize)) -> Result<RgbImage> {
    if reference.shape() != target.shape() {
        return Err(Error::shape("offset_viz", format!("{:?}", reference.shape()), format!("{:?}", target.shape())));
    }
    let [_, _, h, w] = offsets.dims4("offset_viz")?;
    if cell.0 >= h || cell.1 >= w {
        return Err(Error::IndexOutOfRange {
            index: cell.0 * w + cell.1,
            reason: format!("cell {cell:?} outside the {h}x{w} offset grid"),
        });
    }
    let blend = Tensor::new(
        reference.shape().to_vec(),
        reference.data().iter().zip(target.data()).map(|(a, b)| 0.5 * (a + b)).collect(),
    )?;
    let mut img = tensor_to_rgb(&blend)?;
    let dy = f64::from(offsets.at4(0, 0, cell.0, cell.1));
    let dx = f64::from(offsets.at4(0, 1, cell.0, cell.1));
    let s = DOWNSCALE as i64;
    fill(&mut img, cell.0 as i64 * s, cell.1 as i64 * s, s, TARGET_COLOR, true);
    let (py, px) = grid_to_pixel(cell.0 as f64 + dy, cell.1 as f64 + dx);
    fill(&mut img, py - 1, px - 1, 2, SAMPLE_COLOR, false);
    Ok(img)
}

pub fn emit_offset_viz(path: &Path, reference: &Tensor<f32>, target: &Tensor<f32>, offsets: &Tensor<f32>, cell: (usize, usize)) -> Result<()> {
    let img = offset_viz(reference, target, offsets, cell)?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// A `[3, h, w]` map in `[0, 1]` as an RGB image upscaled by `scale`.
pub fn unit_map_image(map: &Tensor<f64>, scale: usize) -> Result<RgbImage> {
    let [c, h, w] = match *map.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::shape("unit_map_image", "[3, h, w]", format!("{:?}", map.shape()))),
    };
    if c != 3 || scale == 0 {
        return Err(Error::shape("unit_map_image", "3 channels", format!("{c}")));
    }
    let d = map.data();
    Ok(RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let i = (y as usize / scale) * w + x as usize / scale;
        Rgb([0, 1, 2].map(|k| (d[k * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn emit_pca_image(path: &Path, unit_projection: &Tensor<f64>, scale: usize) -> Result<()> {
    unit_map_image(unit_projection, scale)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
