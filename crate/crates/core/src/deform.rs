//! Deformable convolution, its bilinear sampling primitive and the fixed-weight warp.
//!
//! A deformable layer samples its input at `p0 + pn + offset_n(p0)` for every kernel tap
//! `pn`, where the offsets are fractional and produced by another layer. Samples are
//! bilinear: `x(p) = sum_q k(q_y, p_y) k(q_x, p_x) x(q)` with `k(a, b) = max(0, 1 - |a - b|)`,
//! and lattice points outside the stored image read as zero.
//!
//! Offset derivatives use `dk(a, b)/db = -sign(b - a)` for `|a - b| < 1`, with the kink at
//! `a == b` assigned zero. At an exactly integral coordinate the derivative along that axis is
//! therefore zero.
//!
//! Offset tensors hold `(dy, dx)` channel pairs per tap, taps in row-major kernel order.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::{rm, rm_t, Scalar};
use crate::tensor::Tensor;

/// Regular sampling grid of a kernel: integer `(dy, dx)` taps centred at the origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelGrid {
    taps: Vec<(isize, isize)>,
}

impl KernelGrid {
    pub fn new(kh: usize, kw: usize) -> Self {
        Self::dilated(kh, kw, 1)
    }

    pub fn dilated(kh: usize, kw: usize, rate: usize) -> Self {
        let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
        let r = rate as isize;
        let taps = (0..kh as isize)
            .flat_map(|y| (0..kw as isize).map(move |x| ((y - ch) * r, (x - cw) * r)))
            .collect();
        Self { taps }
    }

    pub fn taps(&self) -> &[(isize, isize)] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Per-position fractional displacements, `[N, 2 * taps, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn new(tensor: Tensor<T>, taps: usize) -> Result<Self> {
        let [_, c, _, _] = tensor.dims4("offset_field")?;
        if c != 2 * taps {
            return Err(Error::shape("offset_field", format!("{} channels", 2 * taps), format!("{c}")));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(n: usize, taps: usize, h: usize, w: usize) -> Self {
        Self {
            tensor: Tensor::zeros([n, 2 * taps, h, w]),
        }
    }

    /// Single-tap field with the same displacement everywhere.
    pub fn constant(n: usize, h: usize, w: usize, dy: T, dx: T) -> Self {
        let plane = h * w;
        Self {
            tensor: Tensor::from_fn([n, 2, h, w], |i| if (i / plane) % 2 == 0 { dy } else { dx }),
        }
    }

    pub fn taps(&self) -> usize {
        self.tensor.shape()[1] / 2
    }

    /// `(dy, dx)` of `tap` at `(y, x)` in batch item `n`.
    pub fn get(&self, n: usize, tap: usize, y: usize, x: usize) -> (T, T) {
        (self.tensor.at4(n, 2 * tap, y, x), self.tensor.at4(n, 2 * tap + 1, y, x))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }
}

/// Four lattice neighbours of a fractional point with value and derivative weights.
/// Out-of-image neighbours carry zero weight.
#[derive(Clone, Copy, Debug)]
struct Corners<T> {
    idx: [usize; 4],
    w: [T; 4],
    wy: [T; 4],
    wx: [T; 4],
}

impl<T: Scalar> Corners<T> {
    fn empty() -> Self {
        Self {
            idx: [0; 4],
            w: [T::zero(); 4],
            wy: [T::zero(); 4],
            wx: [T::zero(); 4],
        }
    }

    fn at(h: usize, w: usize, y: T, x: T) -> Self {
        let mut c = Self::empty();
        let (fy, fx) = (y.floor(), x.floor());
        let (Some(y0), Some(x0)) = (fy.to_isize(), fx.to_isize()) else {
            return c;
        };
        if y0 < -1 || x0 < -1 || y0 >= h as isize || x0 >= w as isize {
            return c;
        }
        let (ly, lx) = (y - fy, x - fx);
        let one = T::one();
        let w_ = [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx];
        let wy = if ly == T::zero() {
            [T::zero(); 4]
        } else {
            [-(one - lx), -lx, one - lx, lx]
        };
        let wx = if lx == T::zero() {
            [T::zero(); 4]
        } else {
            [-(one - ly), one - ly, -ly, ly]
        };
        for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let (qy, qx) = (y0 + dy, x0 + dx);
            if qy >= 0 && qx >= 0 && (qy as usize) < h && (qx as usize) < w {
                c.idx[k] = qy as usize * w + qx as usize;
                c.w[k] = w_[k];
                c.wy[k] = wy[k];
                c.wx[k] = wx[k];
            }
        }
        c
    }

    #[inline]
    fn sample(&self, plane: &[T]) -> T {
        self.w[0] * plane[self.idx[0]]
            + self.w[1] * plane[self.idx[1]]
            + self.w[2] * plane[self.idx[2]]
            + self.w[3] * plane[self.idx[3]]
    }

    #[inline]
    fn grad(&self, plane: &[T]) -> (T, T) {
        let mut gy = T::zero();
        let mut gx = T::zero();
        for k in 0..4 {
            let v = plane[self.idx[k]];
            gy += self.wy[k] * v;
            gx += self.wx[k] * v;
        }
        (gy, gx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], g: T) {
        for k in 0..4 {
            plane[self.idx[k]] += self.w[k] * g;
        }
    }
}

/// Bilinear read of an `h x w` plane at fractional `(y, x)` with zero padding.
pub fn sample_plane<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Corners::at(h, w, y, x).sample(plane)
}

/// Derivative of [`sample_plane`] with respect to `(y, x)`.
pub fn sample_plane_grad<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> (T, T) {
    Corners::at(h, w, y, x).grad(plane)
}

/// Bilinear read of a single-channel `[H, W]` tensor.
pub fn bilinear_sample<T: Scalar>(x: &Tensor<T>, y: T, xx: T) -> Result<T> {
    match *x.shape() {
        [h, w] => Ok(sample_plane(x.data(), h, w, y, xx)),
        _ => Err(Error::shape("bilinear_sample", "rank-2 [H, W]", format!("{:?}", x.shape()))),
    }
}

#[derive(Clone, Copy, Debug)]
struct DeformDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl DeformDims {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.oh * self.ow
    }

    /// Sampling corners for every `(tap, output position)` of batch item `n`.
    fn corners<T: Scalar>(&self, offsets: &[T]) -> Vec<Corners<T>> {
        let hw = self.hw();
        let mut out = Vec::with_capacity(self.taps() * hw);
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let tap = ky * self.kw + kx;
                let oy_plane = &offsets[2 * tap * hw..(2 * tap + 1) * hw];
                let ox_plane = &offsets[(2 * tap + 1) * hw..(2 * tap + 2) * hw];
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let p = oy * self.ow + ox;
                        let base_y = (oy * self.stride + ky) as f64 - self.padding as f64;
                        let base_x = (ox * self.stride + kx) as f64 - self.padding as f64;
                        let y = T::from_f64_lossy(base_y) + oy_plane[p];
                        let x = T::from_f64_lossy(base_x) + ox_plane[p];
                        out.push(Corners::at(self.h, self.w, y, x));
                    }
                }
            }
        }
        out
    }

    fn columns<T: Scalar>(&self, x: &[T], corners: &[Corners<T>]) -> Vec<T> {
        let (hw, taps, plane) = (self.hw(), self.taps(), self.h * self.w);
        let mut cols = vec![T::zero(); self.cin * taps * hw];
        for ci in 0..self.cin {
            let src = &x[ci * plane..(ci + 1) * plane];
            let rows = &mut cols[ci * taps * hw..(ci + 1) * taps * hw];
            for (dst, c) in rows.iter_mut().zip(corners) {
                *dst = c.sample(src);
            }
        }
        cols
    }
}

fn deform_dims<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<DeformDims> {
    let [n, cin, h, wd] = x.dims4(op)?;
    let [cout, wcin, kh, kw] = w.dims4(op)?;
    if wcin != cin {
        return Err(Error::shape(op, format!("weights with {cin} input channels"), format!("{:?}", w.shape())));
    }
    let g = crate::kernels::ConvGeometry::new(stride, padding);
    let (Some(oh), Some(ow)) = (g.output_len(h, kh), g.output_len(wd, kw)) else {
        return Err(Error::invalid(op, format!("kernel {kh}x{kw} does not fit input {h}x{wd}")));
    };
    let want = [n, 2 * kh * kw, oh, ow];
    if offsets.shape() != want {
        return Err(Error::shape(op, format!("offsets {want:?}"), format!("{:?}", offsets.shape())));
    }
    Ok(DeformDims {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    })
}

/// Deformable convolution. `offsets` is `[N, 2*kH*kW, H', W']` at output resolution.
pub fn deform_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = deform_dims("deform_conv2d", x, w, offsets, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::shape("deform_conv2d", format!("bias [{}]", d.cout), format!("{:?}", b.shape())));
        }
    }
    let (hw, k) = (d.hw(), d.cin * d.taps());
    let (in_len, off_len) = (d.cin * d.h * d.w, 2 * d.taps() * hw);
    let mut out = Tensor::zeros([d.n, d.cout, d.oh, d.ow]);
    par::for_each_chunk(out.data_mut(), d.cout * hw, |n, y| {
        let corners = d.corners(&offsets.data()[n * off_len..(n + 1) * off_len]);
        let cols = d.columns(&x.data()[n * in_len..(n + 1) * in_len], &corners);
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

/// Gradients of [`deform_conv2d`]: `(input, weight, offsets, bias)`.
#[derive(Debug)]
pub struct DeformGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub offsets: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn deform_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    offsets: &Tensor<T>,
    stride: usize,
    padding: usize,
    gout: &Tensor<T>,
) -> Result<DeformGrads<T>> {
    let d = deform_dims("deform_conv2d_backward", x, w, offsets, stride, padding)?;
    if gout.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(Error::shape("deform_conv2d_backward", format!("{:?}", [d.n, d.cout, d.oh, d.ow]), format!("{:?}", gout.shape())));
    }
    let (hw, taps) = (d.hw(), d.taps());
    let k = d.cin * taps;
    let plane = d.h * d.w;
    let (in_len, off_len, out_len) = (d.cin * plane, 2 * taps * hw, d.cout * hw);

    struct Item<T> {
        dx: Vec<T>,
        doff: Vec<T>,
        dw: Vec<T>,
    }
    let items = par::map(d.n, |n| {
        let xin = &x.data()[n * in_len..(n + 1) * in_len];
        let go = &gout.data()[n * out_len..(n + 1) * out_len];
        let corners = d.corners(&offsets.data()[n * off_len..(n + 1) * off_len]);
        let cols = d.columns(xin, &corners);
        let mut dw = vec![T::zero(); d.cout * k];
        T::gemm(d.cout, hw, k, T::one(), go, rm(hw), &cols, rm_t(hw), T::zero(), &mut dw, rm(k));
        let mut dcols = vec![T::zero(); k * hw];
        T::gemm(k, d.cout, hw, T::one(), w.data(), rm_t(k), go, rm(hw), T::zero(), &mut dcols, rm(hw));

        let mut dx = vec![T::zero(); in_len];
        let mut doff = vec![T::zero(); off_len];
        for ci in 0..d.cin {
            let src = &xin[ci * plane..(ci + 1) * plane];
            let dst = &mut dx[ci * plane..(ci + 1) * plane];
            let grows = &dcols[ci * taps * hw..(ci + 1) * taps * hw];
            for (j, (c, &g)) in corners.iter().zip(grows).enumerate() {
                if g == T::zero() {
                    continue;
                }
                c.scatter(dst, g);
                let (gy, gx) = c.grad(src);
                let (tap, p) = (j / hw, j % hw);
                doff[2 * tap * hw + p] += g * gy;
                doff[(2 * tap + 1) * hw + p] += g * gx;
            }
        }
        Item { dx, doff, dw }
    });

    let mut input = Vec::with_capacity(d.n * in_len);
    let mut offs = Vec::with_capacity(d.n * off_len);
    let mut weight = Tensor::zeros(w.shape().to_vec());
    for it in items {
        input.extend(it.dx);
        offs.extend(it.doff);
        weight.data_mut().iter_mut().zip(it.dw).for_each(|(a, b)| *a += b);
    }
    let mut bias = Tensor::zeros([d.cout]);
    for n in 0..d.n {
        for (o, acc) in bias.data_mut().iter_mut().enumerate() {
            let s = (n * d.cout + o) * hw;
            *acc += gout.data()[s..s + hw].iter().copied().sum::<T>();
        }
    }
    Ok(DeformGrads {
        input: Tensor::new(x.shape().to_vec(), input)?,
        weight,
        offsets: Tensor::new(offsets.shape().to_vec(), offs)?,
        bias,
    })
}

fn warp_dims<T: Scalar>(op: &'static str, x: &Tensor<T>, offsets: &Tensor<T>) -> Result<[usize; 4]> {
    let dims @ [n, _, h, w] = x.dims4(op)?;
    if offsets.shape() != [n, 2, h, w] {
        return Err(Error::shape(op, format!("offsets {:?}", [n, 2, h, w]), format!("{:?}", offsets.shape())));
    }
    Ok(dims)
}

fn warp_corners<T: Scalar>(off: &[T], h: usize, w: usize) -> Vec<Corners<T>> {
    let hw = h * w;
    (0..hw)
        .map(|p| {
            let y = T::from_usize(p / w).unwrap() + off[p];
            let x = T::from_usize(p % w).unwrap() + off[hw + p];
            Corners::at(h, w, y, x)
        })
        .collect()
}

/// The parameter-free 1x1 deformable layer with unit weight, applied per channel:
/// `out[c](p) = x[c](p + offset(p))`. `offsets` is `[N, 2, H, W]`.
pub fn warp<T: Scalar>(x: &Tensor<T>, offsets: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c, h, w] = warp_dims("warp", x, offsets)?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    par::for_each_chunk(out.data_mut(), c * hw, |n, y| {
        let corners = warp_corners(&offsets.data()[n * 2 * hw..(n + 1) * 2 * hw], h, w);
        for ch in 0..c {
            let src = &x.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            for (dst, cr) in y[ch * hw..(ch + 1) * hw].iter_mut().zip(&corners) {
                *dst = cr.sample(src);
            }
        }
    });
    Ok(out)
}

/// Returns `(d input, d offsets)`.
pub fn warp_backward<T: Scalar>(x: &Tensor<T>, offsets: &Tensor<T>, gout: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = warp_dims("warp_backward", x, offsets)?;
    if gout.shape() != x.shape() {
        return Err(Error::shape("warp_backward", format!("{:?}", x.shape()), format!("{:?}", gout.shape())));
    }
    let hw = h * w;
    let items = par::map(n, |b| {
        let corners = warp_corners(&offsets.data()[b * 2 * hw..(b + 1) * 2 * hw], h, w);
        let mut dx = vec![T::zero(); c * hw];
        let mut doff = vec![T::zero(); 2 * hw];
        for ch in 0..c {
            let s = (b * c + ch) * hw;
            let src = &x.data()[s..s + hw];
            let go = &gout.data()[s..s + hw];
            let dst = &mut dx[ch * hw..(ch + 1) * hw];
            for (p, (cr, &g)) in corners.iter().zip(go).enumerate() {
                cr.scatter(dst, g);
                let (gy, gx) = cr.grad(src);
                doff[p] += g * gy;
                doff[hw + p] += g * gx;
            }
        }
        (dx, doff)
    });
    let mut dx = Vec::with_capacity(n * c * hw);
    let mut doff = Vec::with_capacity(n * 2 * hw);
    for (a, b) in items {
        dx.extend(a);
        doff.extend(b);
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(offsets.shape().to_vec(), doff)?))
}
