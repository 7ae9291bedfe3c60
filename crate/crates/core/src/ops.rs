//! Raw tensor kernels: convolution via im2col + GEMM and bilinear resampling,
//! each with its adjoint.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{Real, View, ViewMut};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn same(kernel: usize) -> Self {
        ConvGeom {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub const fn down(kernel: usize) -> Self {
        ConvGeom {
            kernel,
            stride: 2,
            pad: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel;
        if h + 2 * self.pad < k || w + 2 * self.pad < k || self.stride == 0 {
            return Err(Error::Shape(alloc::format!(
                "input {}x{} too small for kernel {}",
                h,
                w,
                k
            )));
        }
        Ok((
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output indices `o` whose input index `o·stride + k − pad` lies in `0..input`.
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(output)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Output rows per im2col block; keeps the column buffer cache-sized.
fn block_rows(oh: usize, ow: usize) -> usize {
    (1024 / ow.max(1)).clamp(1, oh.max(1))
}

/// Fills `cols` (`c·k² × (oy1−oy0)·ow`) with the receptive fields of output
/// rows `oy0..oy1`. `cols` must be zeroed.
fn im2col<T: Real>(x: &Tensor<T>, g: ConvGeom, ow: usize, oy0: usize, oy1: usize, cols: &mut [T]) {
    let s = x.shape();
    let k = g.kernel;
    let nt = (oy1 - oy0) * ow;
    let src = x.data();
    for c in 0..s.c {
        for ky in 0..k {
            let (vy0, vy1) = valid_range(ky, g.pad, g.stride, s.h, oy1);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, s.w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((c * k + ky) * k + kx) * nt;
                for oy in vy0.max(oy0)..vy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &src[(c * s.h + iy) * s.w..(c * s.h + iy + 1) * s.w];
                    let at = row + (oy - oy0) * ow;
                    let dst = &mut cols[at + ox_lo..at + ox_hi];
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst.copy_from_slice(&src_row[ix0..ix0 + dst.len()]);
                    } else {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d = src_row[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` for rows `oy0..oy1` into `out`.
fn col2im<T: Real>(cols: &[T], out: &mut Tensor<T>, g: ConvGeom, ow: usize, oy0: usize, oy1: usize) {
    let s = out.shape();
    let k = g.kernel;
    let nt = (oy1 - oy0) * ow;
    let dst = out.data_mut();
    for c in 0..s.c {
        for ky in 0..k {
            let (vy0, vy1) = valid_range(ky, g.pad, g.stride, s.h, oy1);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, s.w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = ((c * k + ky) * k + kx) * nt;
                for oy in vy0.max(oy0)..vy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut dst[(c * s.h + iy) * s.w..(c * s.h + iy + 1) * s.w];
                    let at = row + (oy - oy0) * ow;
                    let src = &cols[at + ox_lo..at + ox_hi];
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst_row[ix0..ix0 + src.len()].iter_mut().zip(src) {
                            *d += *v;
                        }
                    } else {
                        for (i, v) in src.iter().enumerate() {
                            dst_row[ix0 + i * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: ConvGeom) -> Result<()> {
    let ws = w.shape();
    if ws.h != x.shape().c || ws.w != g.kernel * g.kernel || b.shape().len() != ws.c {
        return Err(Error::Shape(alloc::format!(
            "conv weight {} / bias {} against input {} with kernel {}",
            ws,
            b.shape(),
            x.shape(),
            g.kernel
        )));
    }
    Ok(())
}

/// `y = W * x + b`; `w` has shape `(out, in, k·k)`, `b` has `out` values.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: ConvGeom) -> Result<Tensor<T>> {
    check_conv(x, w, b, g)?;
    let s = x.shape();
    let (oh, ow) = g.output_size(s.h, s.w)?;
    let out_c = w.shape().c;
    let kk = s.c * g.kernel * g.kernel;
    let n = oh * ow;
    let mut y = Tensor::zeros(Shape::new(out_c, oh, ow));
    for (o, chunk) in y.data_mut().chunks_mut(n.max(1)).enumerate() {
        chunk.fill(b.data()[o]);
    }
    if g.is_pointwise() {
        T::gemm(out_c, kk, n, T::one(), w.data(), false, x.data(), false, T::one(), y.data_mut());
        return Ok(y);
    }
    if direct(out_c, g) {
        direct_forward(x, w, g, &mut y);
        return Ok(y);
    }
    let rows = block_rows(oh, ow);
    let mut cols = vec![T::zero(); kk * rows * ow];
    let a = View::dense(w.data(), out_c, kk, false);
    for oy0 in (0..oh).step_by(rows) {
        let oy1 = (oy0 + rows).min(oh);
        let nt = (oy1 - oy0) * ow;
        let buf = &mut cols[..kk * nt];
        buf.fill(T::zero());
        im2col(x, g, ow, oy0, oy1, buf);
        let c = ViewMut {
            data: &mut y.data_mut()[oy0 * ow..],
            rs: n,
            cs: 1,
        };
        T::gemm_view(out_c, kk, nt, T::one(), a, View { data: buf, rs: nt, cs: 1 }, T::one(), c);
    }
    Ok(y)
}

/// Few output channels at stride 1: shifted row products beat im2col + GEMM.
fn direct(out_c: usize, g: ConvGeom) -> bool {
    out_c <= 4 && g.stride == 1
}

/// Calls `f(ky, kx, oy, iy, ox_lo, ox_hi, ix0)` for every valid kernel tap
/// and output row of a stride-1 convolution.
fn for_each_tap(g: ConvGeom, s: Shape, oh: usize, ow: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let k = g.kernel;
    for ky in 0..k {
        let (vy0, vy1) = valid_range(ky, g.pad, 1, s.h, oh);
        for kx in 0..k {
            let (ox_lo, ox_hi) = valid_range(kx, g.pad, 1, s.w, ow);
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in vy0..vy1 {
                f(ky * k + kx, oy, oy + ky - g.pad, ox_lo, ox_hi);
            }
        }
    }
}

fn direct_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom, y: &mut Tensor<T>) {
    let s = x.shape();
    let ys = y.shape();
    let (oh, ow) = (ys.h, ys.w);
    let kk = g.kernel * g.kernel;
    let k = g.kernel;
    for o in 0..ys.c {
        let yo = &mut y.data_mut()[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..s.c {
            let xc = x.channel(c);
            let wv = &w.data()[(o * s.c + c) * kk..(o * s.c + c + 1) * kk];
            for_each_tap(g, s, oh, ow, |d, oy, iy, lo, hi| {
                let wd = wv[d];
                let ix0 = lo + d % k - g.pad;
                let dst = &mut yo[oy * ow + lo..oy * ow + hi];
                let src = &xc[iy * s.w + ix0..iy * s.w + ix0 + (hi - lo)];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += wd * b;
                }
            });
        }
    }
}

fn direct_weight_grad<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, g: ConvGeom, dw: &mut Tensor<T>) {
    let s = x.shape();
    let ds = dy.shape();
    let (oh, ow) = (ds.h, ds.w);
    let kk = g.kernel * g.kernel;
    let k = g.kernel;
    for o in 0..ds.c {
        let dyo = dy.channel(o);
        for c in 0..s.c {
            let xc = x.channel(c);
            let mut acc = vec![T::zero(); kk];
            for_each_tap(g, s, oh, ow, |d, oy, iy, lo, hi| {
                let ix0 = lo + d % k - g.pad;
                let a = &dyo[oy * ow + lo..oy * ow + hi];
                let b = &xc[iy * s.w + ix0..iy * s.w + ix0 + (hi - lo)];
                acc[d] += a.iter().zip(b).fold(T::zero(), |m, (&p, &q)| m + p * q);
            });
            dw.data_mut()[(o * s.c + c) * kk..(o * s.c + c + 1) * kk].copy_from_slice(&acc);
        }
    }
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Kernel flipped in space with input and output channels swapped: the
/// adjoint of a stride-1 "same" convolution is a convolution with it.
fn adjoint_kernel<T: Real>(w: &Tensor<T>) -> Tensor<T> {
    let ws = w.shape();
    let kk = ws.w;
    Tensor::from_fn(Shape::new(ws.h, ws.c, kk), |ci, co, d| w.at(co, ci, kk - 1 - d))
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let s = x.shape();
    let ws = w.shape();
    let out_c = ws.c;
    let kk = s.c * g.kernel * g.kernel;
    let n = dy.shape().plane();
    let (oh, ow) = (dy.shape().h, dy.shape().w);
    let dyd = dy.data();

    let mut db = Tensor::zeros(Shape::new(out_c, 1, 1));
    for (o, chunk) in dyd.chunks(n.max(1)).enumerate() {
        db.data_mut()[o] = chunk.iter().copied().sum();
    }

    let mut dw = Tensor::zeros(ws);
    let pointwise = g.is_pointwise();
    let small = !pointwise && direct(out_c, g);
    let rows = block_rows(oh, ow);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * rows * ow] };
    if small {
        direct_weight_grad(x, dy, g, &mut dw);
    }
    for oy0 in (0..oh).step_by(rows) {
        if small {
            break;
        }
        let oy1 = (oy0 + rows).min(oh);
        let nt = (oy1 - oy0) * ow;
        let a = View {
            data: &dyd[oy0 * ow..],
            rs: n,
            cs: 1,
        };
        let b = if pointwise {
            View {
                data: &x.data()[oy0 * ow..],
                rs: 1,
                cs: n,
            }
        } else {
            let buf = &mut cols[..kk * nt];
            buf.fill(T::zero());
            im2col(x, g, ow, oy0, oy1, buf);
            View { data: &*buf, rs: 1, cs: nt }
        };
        // computed as dWᵀ = cols · dyᵀ, which packs far better when `out` is small
        let c = ViewMut {
            data: dw.data_mut(),
            rs: 1,
            cs: kk,
        };
        let at = View { data: b.data, rs: b.cs, cs: b.rs };
        let bt = View { data: a.data, rs: a.cs, cs: a.rs };
        T::gemm_view(kk, nt, out_c, T::one(), at, bt, T::one(), c);
    }

    let dx = need_dx.then(|| {
        if pointwise {
            let mut dx = Tensor::zeros(s);
            T::gemm(s.c, out_c, n, T::one(), w.data(), true, dyd, false, T::zero(), dx.data_mut());
            dx
        } else if g.stride == 1 && g.kernel % 2 == 1 && 2 * g.pad + 1 == g.kernel {
            let zero = Tensor::zeros(Shape::new(s.c, 1, 1));
            conv2d(dy, &adjoint_kernel(w), &zero, g).expect("adjoint of a validated convolution")
        } else {
            let mut dx = Tensor::zeros(s);
            let a = View::dense(w.data(), kk, out_c, true);
            for oy0 in (0..oh).step_by(rows) {
                let oy1 = (oy0 + rows).min(oh);
                let nt = (oy1 - oy0) * ow;
                let buf = &mut cols[..kk * nt];
                let b = View {
                    data: &dyd[oy0 * ow..],
                    rs: n,
                    cs: 1,
                };
                T::gemm_view(kk, out_c, nt, T::one(), a, b, T::zero(), ViewMut { data: buf, rs: nt, cs: 1 });
                col2im(buf, &mut dx, g, ow, oy0, oy1);
            }
            dx
        }
    });
    ConvGrads { dx, dw, db }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Sampling table for one axis of a bilinear resize with half-pixel centres
/// (`align_corners = false`).
#[derive(Clone, Debug)]
pub struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Real> AxisTaps<T> {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for i in 0..output {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            lo.push(i0);
            hi.push(i1);
            frac.push(T::lit(src - i0 as f64));
        }
        AxisTaps { lo, hi, frac }
    }
}

/// Bilinear resize of every channel to `h × w`.
///
/// Interpolation uses the `a + t·(b − a)` form, so constant inputs map to the
/// identical constant.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || h == 0 || w == 0 {
        return Err(Error::ZeroFrame);
    }
    if s.h == h && s.w == w {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(Shape::new(s.c, h, w));
    resize_bilinear_into(x, h, w, |c, y, row| {
        let start = (c * h + y) * w;
        out.data_mut()[start..start + w].copy_from_slice(row);
    });
    Ok(out)
}

/// Streams the resized output row by row to `sink(channel, row, values)`
/// without materialising the full output.
pub fn resize_bilinear_into<T: Real>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    mut sink: impl FnMut(usize, usize, &[T]),
) {
    let s = x.shape();
    let ty = AxisTaps::<T>::new(s.h, h);
    let tx = AxisTaps::<T>::new(s.w, w);
    let mut row = vec![T::zero(); w];
    let src = x.data();
    for c in 0..s.c {
        let plane = &src[c * s.plane()..(c + 1) * s.plane()];
        for y in 0..h {
            let r0 = &plane[ty.lo[y] * s.w..(ty.lo[y] + 1) * s.w];
            let r1 = &plane[ty.hi[y] * s.w..(ty.hi[y] + 1) * s.w];
            let fy = ty.frac[y];
            for (xo, out) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = (tx.lo[xo], tx.hi[xo], tx.frac[xo]);
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                *out = top + fy * (bot - top);
            }
            sink(c, y, &row);
        }
    }
}

/// Adjoint of [`resize_bilinear`]: scatters `dy` back onto an `h × w` input.
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = dy.shape();
    if s.h == h && s.w == w {
        return dy.clone();
    }
    let ty = AxisTaps::<T>::new(h, s.h);
    let tx = AxisTaps::<T>::new(w, s.w);
    let mut dx = Tensor::zeros(Shape::new(s.c, h, w));
    let one = T::one();
    for c in 0..s.c {
        for y in 0..s.h {
            let fy = ty.frac[y];
            for xo in 0..s.w {
                let g = dy.at(c, y, xo);
                let fx = tx.frac[xo];
                let (y0, y1, x0, x1) = (ty.lo[y], ty.hi[y], tx.lo[xo], tx.hi[xo]);
                *dx.at_mut(c, y0, x0) += g * (one - fy) * (one - fx);
                *dx.at_mut(c, y0, x1) += g * (one - fy) * fx;
                *dx.at_mut(c, y1, x0) += g * fy * (one - fx);
                *dx.at_mut(c, y1, x1) += g * fy * fx;
            }
        }
    }
    dx
}
