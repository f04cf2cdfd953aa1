//! Convolution kernels on raw NCHW slices.
//!
//! Two interchangeable backends: a direct sliding-window reference and an
//! im2col + GEMM fast path. Both produce the same values up to summation
//! order; the direct kernels are the correctness oracle for the fast ones.

use crate::error::{Error, Result};
use crate::real::Real;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvBackend {
    Direct,
    #[default]
    Im2col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::param("conv2d", "stride must be >= 1"));
        }
        Ok(ConvGeom { stride, padding })
    }

    /// `floor((input + 2·padding − k) / stride) + 1`
    pub fn output_size(&self, input: usize, k: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} larger than padded input {}", k, padded),
            ));
        }
        Ok((padded - k) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTransposeGeom {
    pub fn new(stride: usize, padding: usize, output_padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::param("conv_transpose2d", "stride must be >= 1"));
        }
        if output_padding >= stride {
            return Err(Error::param(
                "conv_transpose2d",
                format!("output_padding {} must be < stride {}", output_padding, stride),
            ));
        }
        Ok(ConvTransposeGeom {
            stride,
            padding,
            output_padding,
        })
    }

    /// `(input − 1)·stride − 2·padding + k + output_padding`
    pub fn output_size(&self, input: usize, k: usize) -> Result<usize> {
        let full = (input.max(1) - 1) * self.stride + k + self.output_padding;
        if input == 0 || full <= 2 * self.padding {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {} collapses to an empty output", input),
            ));
        }
        Ok(full - 2 * self.padding)
    }

    fn as_window(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Sliding-window layout shared by im2col and col2im: an image of
/// `c × h × w` visited by a `k × k` window producing an `oh × ow` grid.
#[derive(Clone, Copy, Debug)]
struct Window {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Output indices `o` in `[lo, hi)` for which `o·stride + offset` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// `col[(ci·k + ki)·k + kj][ni·P + oy·ow + ox]`, zero outside the image.
fn im2col<T: Real>(x: &[T], win: &Window, col: &mut [T]) {
    let np = win.cols();
    let p = win.oh * win.ow;
    let plane = win.h * win.w;
    debug_assert_eq!(col.len(), win.rows() * np);
    let mut r = 0;
    for ci in 0..win.c {
        for ki in 0..win.k {
            for kj in 0..win.k {
                let row = &mut col[r * np..(r + 1) * np];
                r += 1;
                let xoff = kj as isize - win.pad as isize;
                let (lo, hi) = valid_range(win.ow, win.w, win.stride, xoff);
                for ni in 0..win.n {
                    let src_plane = &x[(ni * win.c + ci) * plane..][..plane];
                    for oy in 0..win.oh {
                        let dst = &mut row[ni * p + oy * win.ow..][..win.ow];
                        let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                        if iy < 0 || iy >= win.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &src_plane[iy as usize * win.w..][..win.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if win.stride == 1 {
                            let start = (lo as isize + xoff) as usize;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                                let ix = ((ox + lo) * win.stride) as isize + xoff;
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
fn col2im_add<T: Real>(col: &[T], win: &Window, x: &mut [T]) {
    let np = win.cols();
    let p = win.oh * win.ow;
    let plane = win.h * win.w;
    let mut r = 0;
    for ci in 0..win.c {
        for ki in 0..win.k {
            for kj in 0..win.k {
                let row = &col[r * np..(r + 1) * np];
                r += 1;
                let xoff = kj as isize - win.pad as isize;
                let (lo, hi) = valid_range(win.ow, win.w, win.stride, xoff);
                for ni in 0..win.n {
                    let dst_plane = &mut x[(ni * win.c + ci) * plane..][..plane];
                    for oy in 0..win.oh {
                        let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                        if iy < 0 || iy >= win.h as isize {
                            continue;
                        }
                        let src = &row[ni * p + oy * win.ow..][..win.ow];
                        let dst = &mut dst_plane[iy as usize * win.w..][..win.w];
                        for ox in lo..hi {
                            let ix = (ox * win.stride) as isize + xoff;
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `NCHW → C × (N·HW)`
fn to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * p..][..p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// Adds a `C × (N·HW)` matrix into an NCHW buffer.
fn add_from_channel_major<T: Real>(m: &[T], n: usize, c: usize, p: usize, out: &mut [T]) {
    for ni in 0..n {
        for ci in 0..c {
            let src = &m[(ci * n + ni) * p..][..p];
            let dst = &mut out[(ni * c + ci) * p..][..p];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
}

/// Shape bookkeeping for a conv2d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dShape {
    pub fn new(input: [usize; 4], o: usize, k: usize, geom: ConvGeom) -> Result<Self> {
        let [n, c, h, w] = input;
        Ok(Conv2dShape {
            n,
            c,
            h,
            w,
            o,
            k,
            oh: geom.output_size(h, k)?,
            ow: geom.output_size(w, k)?,
        })
    }

    fn window(&self, geom: ConvGeom) -> Window {
        Window {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            k: self.k,
            stride: geom.stride,
            pad: geom.padding,
            oh: self.oh,
            ow: self.ow,
        }
    }

    pub fn output_len(&self) -> usize {
        self.n * self.o * self.oh * self.ow
    }
}

pub fn conv2d_forward<T: Real>(
    backend: ConvBackend,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    s: &Conv2dShape,
    geom: ConvGeom,
) -> Vec<T> {
    let mut out = match backend {
        ConvBackend::Direct => conv2d_direct(x, weight, s, geom),
        ConvBackend::Im2col => {
            let win = s.window(geom);
            let np = win.cols();
            let kk = win.rows();
            let mut col = vec![T::zero(); kk * np];
            im2col(x, &win, &mut col);
            let mut tmp = vec![T::zero(); s.o * np];
            T::gemm(s.o, kk, np, weight, false, &col, false, T::zero(), &mut tmp);
            let mut out = vec![T::zero(); s.output_len()];
            add_from_channel_major(&tmp, s.n, s.o, s.oh * s.ow, &mut out);
            out
        }
    };
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, s.n, s.o, s.oh * s.ow);
    }
    out
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, c: usize, p: usize) {
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate().take(c) {
            out[(ni * c + ci) * p..][..p].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, p: usize, db: &mut [T]) {
    for ni in 0..n {
        for ci in 0..c {
            let s: f64 = g[(ni * c + ci) * p..][..p].iter().map(|v| v.as_f64()).sum();
            db[ci] += T::from_f64_lossy(s);
        }
    }
}

fn conv2d_direct<T: Real>(x: &[T], weight: &[T], s: &Conv2dShape, geom: ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); s.output_len()];
    for ni in 0..s.n {
        for o in 0..s.o {
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let mut acc = T::zero();
                    for ci in 0..s.c {
                        for ki in 0..s.k {
                            let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kj in 0..s.k {
                                let ix = (ox * geom.stride + kj) as isize - geom.padding as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = x[((ni * s.c + ci) * s.h + iy as usize) * s.w + ix as usize];
                                let wv = weight[((o * s.c + ci) * s.k + ki) * s.k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * s.o + o) * s.oh + oy) * s.ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Accumulates gradients of a conv2d into whichever of `dx`, `dw`, `db` are given.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    backend: ConvBackend,
    x: &[T],
    weight: &[T],
    s: &Conv2dShape,
    geom: ConvGeom,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(db) = db {
        channel_sums(dout, s.n, s.o, s.oh * s.ow, db);
    }
    match backend {
        ConvBackend::Direct => conv2d_backward_direct(x, weight, s, geom, dout, dx, dw),
        ConvBackend::Im2col => {
            if dx.is_none() && dw.is_none() {
                return;
            }
            let win = s.window(geom);
            let np = win.cols();
            let kk = win.rows();
            let dtmp = to_channel_major(dout, s.n, s.o, s.oh * s.ow);
            let mut col = vec![T::zero(); kk * np];
            if let Some(dw) = dw {
                im2col(x, &win, &mut col);
                T::gemm(s.o, np, kk, &dtmp, false, &col, true, T::one(), dw);
            }
            if let Some(dx) = dx {
                T::gemm(kk, s.o, np, weight, true, &dtmp, false, T::zero(), &mut col);
                col2im_add(&col, &win, dx);
            }
        }
    }
}

fn conv2d_backward_direct<T: Real>(
    x: &[T],
    weight: &[T],
    s: &Conv2dShape,
    geom: ConvGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    for ni in 0..s.n {
        for o in 0..s.o {
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let g = dout[((ni * s.o + o) * s.oh + oy) * s.ow + ox];
                    for ci in 0..s.c {
                        for ki in 0..s.k {
                            let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kj in 0..s.k {
                                let ix = (ox * geom.stride + kj) as isize - geom.padding as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let xi = ((ni * s.c + ci) * s.h + iy as usize) * s.w + ix as usize;
                                let wi = ((o * s.c + ci) * s.k + ki) * s.k + kj;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += g * weight[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Shape bookkeeping for a transposed convolution. The kernel is laid out
/// `in_channels × out_channels × k × k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvTransposeShape {
    pub fn new(input: [usize; 4], o: usize, k: usize, geom: ConvTransposeGeom) -> Result<Self> {
        let [n, c, h, w] = input;
        Ok(ConvTransposeShape {
            n,
            c,
            h,
            w,
            o,
            k,
            oh: geom.output_size(h, k)?,
            ow: geom.output_size(w, k)?,
        })
    }

    /// The output image seen as the input of the adjoint convolution.
    fn window(&self, geom: ConvTransposeGeom) -> Window {
        let g = geom.as_window();
        Window {
            n: self.n,
            c: self.o,
            h: self.oh,
            w: self.ow,
            k: self.k,
            stride: g.stride,
            pad: g.padding,
            oh: self.h,
            ow: self.w,
        }
    }

    pub fn output_len(&self) -> usize {
        self.n * self.o * self.oh * self.ow
    }
}

pub fn conv_transpose2d_forward<T: Real>(
    backend: ConvBackend,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    s: &ConvTransposeShape,
    geom: ConvTransposeGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); s.output_len()];
    match backend {
        ConvBackend::Direct => conv_transpose2d_direct(x, weight, s, geom, &mut out),
        ConvBackend::Im2col => {
            let win = s.window(geom);
            let nhw = win.cols();
            let okk = win.rows();
            let xm = to_channel_major(x, s.n, s.c, s.h * s.w);
            let mut cols = vec![T::zero(); okk * nhw];
            T::gemm(okk, s.c, nhw, weight, true, &xm, false, T::zero(), &mut cols);
            col2im_add(&cols, &win, &mut out);
        }
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, s.n, s.o, s.oh * s.ow);
    }
    out
}

fn conv_transpose2d_direct<T: Real>(
    x: &[T],
    weight: &[T],
    s: &ConvTransposeShape,
    geom: ConvTransposeGeom,
    out: &mut [T],
) {
    for ni in 0..s.n {
        for ci in 0..s.c {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let xv = x[((ni * s.c + ci) * s.h + iy) * s.w + ix];
                    for o in 0..s.o {
                        for ki in 0..s.k {
                            let oy = (iy * geom.stride + ki) as isize - geom.padding as isize;
                            if oy < 0 || oy >= s.oh as isize {
                                continue;
                            }
                            for kj in 0..s.k {
                                let ox = (ix * geom.stride + kj) as isize - geom.padding as isize;
                                if ox < 0 || ox >= s.ow as isize {
                                    continue;
                                }
                                let wv = weight[((ci * s.o + o) * s.k + ki) * s.k + kj];
                                out[((ni * s.o + o) * s.oh + oy as usize) * s.ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Real>(
    backend: ConvBackend,
    x: &[T],
    weight: &[T],
    s: &ConvTransposeShape,
    geom: ConvTransposeGeom,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(db) = db {
        channel_sums(dout, s.n, s.o, s.oh * s.ow, db);
    }
    match backend {
        ConvBackend::Direct => conv_transpose2d_backward_direct(x, weight, s, geom, dout, dx, dw),
        ConvBackend::Im2col => {
            if dx.is_none() && dw.is_none() {
                return;
            }
            let win = s.window(geom);
            let nhw = win.cols();
            let okk = win.rows();
            let mut dcols = vec![T::zero(); okk * nhw];
            im2col(dout, &win, &mut dcols);
            if let Some(dw) = dw {
                let xm = to_channel_major(x, s.n, s.c, s.h * s.w);
                T::gemm(s.c, nhw, okk, &xm, false, &dcols, true, T::one(), dw);
            }
            if let Some(dx) = dx {
                let mut dxm = vec![T::zero(); s.c * nhw];
                T::gemm(s.c, okk, nhw, weight, false, &dcols, false, T::zero(), &mut dxm);
                add_from_channel_major(&dxm, s.n, s.c, s.h * s.w, dx);
            }
        }
    }
}

fn conv_transpose2d_backward_direct<T: Real>(
    x: &[T],
    weight: &[T],
    s: &ConvTransposeShape,
    geom: ConvTransposeGeom,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    for ni in 0..s.n {
        for ci in 0..s.c {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let xi = ((ni * s.c + ci) * s.h + iy) * s.w + ix;
                    for o in 0..s.o {
                        for ki in 0..s.k {
                            let oy = (iy * geom.stride + ki) as isize - geom.padding as isize;
                            if oy < 0 || oy >= s.oh as isize {
                                continue;
                            }
                            for kj in 0..s.k {
                                let ox = (ix * geom.stride + kj) as isize - geom.padding as isize;
                                if ox < 0 || ox >= s.ow as isize {
                                    continue;
                                }
                                let wi = ((ci * s.o + o) * s.k + ki) * s.k + kj;
                                let g = dout[((ni * s.o + o) * s.oh + oy as usize) * s.ow + ox as usize];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += g * weight[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
