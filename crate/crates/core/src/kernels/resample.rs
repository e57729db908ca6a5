use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean over non-overlapping `factor x factor` blocks.
pub fn downsample_area<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4("downsample")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid("downsample", format!("{h}x{w} is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::one() / T::from_usize(factor * factor).unwrap();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / factor) * ow + xx / factor] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

pub fn downsample_area_backward<T: Scalar>(gout: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = gout.dims4("downsample_backward")?;
    let (h, w) = (oh * factor, ow * factor);
    let inv = T::one() / T::from_usize(factor * factor).unwrap();
    let mut dx = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &gout.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / factor) * ow + xx / factor] * inv;
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_means() {
        let x = Tensor::<f64>::from_fn([1, 1, 2, 4], |i| i as f64);
        let y = downsample_area(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5]);
        assert!(downsample_area(&x, 3).is_err());
        let g = downsample_area_backward(&Tensor::full([1, 1, 1, 2], 4.0), 2).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }
}
