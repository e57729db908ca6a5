use crate::error::{Error, Result};
use crate::par;
use crate::scalar::{rm, rm_t, Scalar};
use crate::tensor::Tensor;

/// Stride, zero padding and dilation of a 2-D convolution (same value on both axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
        }
    }

    pub const fn dilated(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    /// "Same" padding for an odd kernel at stride 1.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2)
    }

    /// Output length along one axis, `floor((in + 2p - d(k-1) - 1) / s) + 1`.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return None;
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Unfolds one image `[c, h, w]` into `[c*kh*kw, oh*ow]` columns with zero padding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    g: ConvGeometry,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + dy;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let base = iy as usize * w;
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    g: ConvGeometry,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(op, format!("bias [{channels}]"), format!("{:?}", b.shape()))),
        _ => Ok(()),
    }
}

fn conv_dims<T: Scalar>(op: &'static str, x: &Tensor<T>, w: &Tensor<T>, g: ConvGeometry) -> Result<ConvDims> {
    let [n, cin, h, wd] = x.dims4(op)?;
    let [cout, wcin, kh, kw] = w.dims4(op)?;
    if wcin != cin {
        return Err(Error::shape(op, format!("weights with {cin} input channels"), format!("{:?}", w.shape())));
    }
    let (oh, ow) = match (g.output_len(h, kh), g.output_len(wd, kw)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::invalid(
                op,
                format!("kernel {kh}x{kw} with {g:?} does not fit input {h}x{wd}"),
            ))
        }
    };
    Ok(ConvDims {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

/// `y[n, o, p] = b[o] + sum_{c, tap} w[o, c, tap] * x[n, c, p*s + tap*d - pad]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims("conv2d", x, w, g)?;
    check_bias("conv2d", bias, d.cout)?;
    let (k, hw) = (d.k(), d.oh * d.ow);
    let in_len = d.cin * d.h * d.w;
    let mut out = Tensor::zeros([d.n, d.cout, d.oh, d.ow]);
    par::for_each_chunk(out.data_mut(), d.cout * hw, |n, y| {
        let xin = &x.data()[n * in_len..(n + 1) * in_len];
        let mut cols = vec![T::zero(); k * hw];
        im2col(xin, (d.cin, d.h, d.w), (d.kh, d.kw), g, (d.oh, d.ow), &mut cols);
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(hw).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(d.cout, k, hw, T::one(), w.data(), rm(k), &cols, rm(hw), beta, y, rm(hw));
    });
    Ok(out)
}

/// Gradients requested from a convolution backward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConvGrads {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

impl ConvGrads {
    pub const ALL: Self = Self {
        input: true,
        weight: true,
        bias: true,
    };
}

pub type ConvBackward<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn bias_grad<T: Scalar>(gout: &Tensor<T>, n: usize, c: usize, hw: usize) -> Tensor<T> {
    let mut db = Tensor::zeros([c]);
    for b in 0..n {
        for (o, acc) in db.data_mut().iter_mut().enumerate() {
            let s = (b * c + o) * hw;
            *acc += gout.data()[s..s + hw].iter().copied().sum::<T>();
        }
    }
    db
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeometry,
    gout: &Tensor<T>,
    want: ConvGrads,
) -> Result<ConvBackward<T>> {
    let d = conv_dims("conv2d_backward", x, w, g)?;
    if gout.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(Error::shape("conv2d_backward", format!("{:?}", [d.n, d.cout, d.oh, d.ow]), format!("{:?}", gout.shape())));
    }
    let (k, hw) = (d.k(), d.oh * d.ow);
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * hw;

    let dx = want.input.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        par::for_each_chunk(dx.data_mut(), in_len, |n, dxn| {
            let go = &gout.data()[n * out_len..(n + 1) * out_len];
            let mut dcols = vec![T::zero(); k * hw];
            T::gemm(k, d.cout, hw, T::one(), w.data(), rm_t(k), go, rm(hw), T::zero(), &mut dcols, rm(hw));
            col2im(&dcols, (d.cin, d.h, d.w), (d.kh, d.kw), g, (d.oh, d.ow), dxn);
        });
        dx
    });

    let dw = want.weight.then(|| {
        let partials = par::map(d.n, |n| {
            let xin = &x.data()[n * in_len..(n + 1) * in_len];
            let go = &gout.data()[n * out_len..(n + 1) * out_len];
            let mut cols = vec![T::zero(); k * hw];
            im2col(xin, (d.cin, d.h, d.w), (d.kh, d.kw), g, (d.oh, d.ow), &mut cols);
            let mut part = vec![T::zero(); d.cout * k];
            T::gemm(d.cout, hw, k, T::one(), go, rm(hw), &cols, rm_t(hw), T::zero(), &mut part, rm(k));
            part
        });
        let mut dw = Tensor::zeros(w.shape().to_vec());
        for part in partials {
            dw.data_mut().iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        dw
    });

    let db = want.bias.then(|| bias_grad(gout, d.n, d.cout, hw));
    Ok((dx, dw, db))
}

fn transpose_dims<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(ConvDims, ConvGeometry)> {
    let [n, cin, h, wd] = x.dims4(op)?;
    let [wcin, cout, kh, kw] = w.dims4(op)?;
    if wcin != cin {
        return Err(Error::shape(op, format!("weights [{cin}, Cout, kH, kW]"), format!("{:?}", w.shape())));
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    let full = |len: usize, k: usize| ((len - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
    let (oh, ow) = match (full(h, kh), full(wd, kw)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid(op, "padding larger than the transposed output")),
    };
    // `dims` describes the adjoint convolution: its input is our output and vice versa.
    Ok((
        ConvDims {
            n,
            cin: cout,
            h: oh,
            w: ow,
            cout: cin,
            kh,
            kw,
            oh: h,
            ow: wd,
        },
        ConvGeometry::new(stride, padding),
    ))
}

/// Transposed convolution with weights `[Cin, Cout, kH, kW]`: the adjoint of
/// [`conv2d_forward`] with the same kernel, stride and padding.
///
/// Output length is `(in - 1) * stride + k - 2 * padding`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (d, g) = transpose_dims("conv_transpose2d", x, w, stride, padding)?;
    check_bias("conv_transpose2d", bias, d.cin)?;
    let (k, hw_in) = (d.k(), d.oh * d.ow);
    let in_len = d.cout * hw_in;
    let out_plane = d.h * d.w;
    let mut out = Tensor::zeros([d.n, d.cin, d.h, d.w]);
    par::for_each_chunk(out.data_mut(), d.cin * out_plane, |n, y| {
        let xin = &x.data()[n * in_len..(n + 1) * in_len];
        let mut cols = vec![T::zero(); k * hw_in];
        T::gemm(k, d.cout, hw_in, T::one(), w.data(), rm_t(k), xin, rm(hw_in), T::zero(), &mut cols, rm(hw_in));
        col2im(&cols, (d.cin, d.h, d.w), (d.kh, d.kw), g, (d.oh, d.ow), y);
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(out_plane).enumerate() {
                row.iter_mut().for_each(|v| *v += b.data()[o]);
            }
        }
    });
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    gout: &Tensor<T>,
    want: ConvGrads,
) -> Result<ConvBackward<T>> {
    let (d, g) = transpose_dims("conv_transpose2d_backward", x, w, stride, padding)?;
    if gout.shape() != [d.n, d.cin, d.h, d.w] {
        return Err(Error::shape("conv_transpose2d_backward", format!("{:?}", [d.n, d.cin, d.h, d.w]), format!("{:?}", gout.shape())));
    }
    let (k, hw_in) = (d.k(), d.oh * d.ow);
    let in_len = d.cout * hw_in;
    let out_len = d.cin * d.h * d.w;
    let unfold = |n: usize| {
        let go = &gout.data()[n * out_len..(n + 1) * out_len];
        let mut cols = vec![T::zero(); k * hw_in];
        im2col(go, (d.cin, d.h, d.w), (d.kh, d.kw), g, (d.oh, d.ow), &mut cols);
        cols
    };

    let dx = want.input.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        par::for_each_chunk(dx.data_mut(), in_len, |n, dxn| {
            let cols = unfold(n);
            T::gemm(d.cout, k, hw_in, T::one(), w.data(), rm(k), &cols, rm(hw_in), T::zero(), dxn, rm(hw_in));
        });
        dx
    });

    let dw = want.weight.then(|| {
        let partials = par::map(d.n, |n| {
            let xin = &x.data()[n * in_len..(n + 1) * in_len];
            let cols = unfold(n);
            let mut part = vec![T::zero(); d.cout * k];
            T::gemm(d.cout, hw_in, k, T::one(), xin, rm(hw_in), &cols, rm_t(hw_in), T::zero(), &mut part, rm(k));
            part
        });
        let mut dw = Tensor::zeros(w.shape().to_vec());
        for part in partials {
            dw.data_mut().iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        dw
    });

    let db = want.bias.then(|| bias_grad(gout, d.n, d.cin, d.h * d.w));
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_init;

    /// Direct sum over output positions and kernel taps, zero padding.
    fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], g: ConvGeometry) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4("t").unwrap();
        let [cout, _, kh, kw] = w.dims4("t").unwrap();
        let oh = g.output_len(h, kh).unwrap();
        let ow = g.output_len(wd, kw).unwrap();
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for bn in 0..n {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at4(o, c, ky, kx) * x.at4(bn, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bn * cout + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn output_len_floor_semantics() {
        let g = ConvGeometry::new(2, 1);
        assert_eq!(g.output_len(64, 3), Some(32));
        assert_eq!(ConvGeometry::new(1, 0).output_len(2, 3), None);
        assert_eq!(ConvGeometry::same(3).dilated(6).output_len(16, 3), Some(6));
        assert_eq!(ConvGeometry::new(1, 6).dilated(6).output_len(16, 3), Some(16));
    }

    #[test]
    fn matches_brute_force_over_geometries() {
        for (seed, g) in [
            (1, ConvGeometry::new(1, 0)),
            (2, ConvGeometry::new(1, 1)),
            (3, ConvGeometry::new(2, 1)),
            (4, ConvGeometry::new(1, 2).dilated(2)),
        ] {
            let x: Tensor<f64> = gaussian_init([2, 2, 7, 6], 1.0, seed).unwrap();
            let w: Tensor<f64> = gaussian_init([3, 2, 3, 3], 1.0, seed + 10).unwrap();
            let b = [0.1, -0.2, 0.3];
            let bias = Tensor::from_f64([3], &b).unwrap();
            let got = conv2d_forward(&x, &w, Some(&bias), g).unwrap();
            let want = brute_conv(&x, &w, &b, g);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn weight_channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, ConvGeometry::same(3)),
            Err(Error::ShapeMismatch { .. })
        ));
        let big = Tensor::<f32>::zeros([1, 2, 5, 5]);
        assert!(conv2d_forward(&Tensor::zeros([1, 2, 2, 2]), &big, None, ConvGeometry::new(1, 0)).is_err());
    }

    #[test]
    fn transpose_is_adjoint_of_conv_at_stride_two() {
        // <conv(x), y> == <x, conv_t(y)> with the same kernel.
        let g = ConvGeometry::new(2, 1);
        let x: Tensor<f64> = gaussian_init([1, 3, 8, 8], 1.0, 5).unwrap();
        let w: Tensor<f64> = gaussian_init([2, 3, 4, 4], 1.0, 6).unwrap();
        let cx = conv2d_forward(&x, &w, None, g).unwrap();
        let y: Tensor<f64> = gaussian_init(cx.shape().to_vec(), 1.0, 7).unwrap();
        let ty = conv_transpose2d_forward(&y, &w, None, 2, 1).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
