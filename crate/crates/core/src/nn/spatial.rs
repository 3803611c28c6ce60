//! Channels-last (NHWC) spatial resampling operators.
//!
//! Every operator here is linear in its input and is registered together with
//! its exact adjoint. The backward pass of an operator is its adjoint and the
//! backward pass of the adjoint is the operator itself, so gradients of any
//! order flow through compositions of these ops and candle's built-ins. The
//! discriminator's input-gradient graph (needed for the R1 penalty) is built
//! from these pairs.

use std::ops::{Add, Mul};

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    /// `(B,H,W,C) -> (B,H,W,k*k*C)` patch extraction with zero padding `k/2`.
    Im2col { kernel: usize },
    /// `(B,H,W) -> (B,2H,2W)` nearest-neighbour upsampling.
    UpNearest,
    /// `(B,H,W) -> (B,2H,2W)` bilinear upsampling (half-pixel centres, edge clamp).
    UpBilinear,
}

#[derive(Debug, Clone, Copy)]
struct SpatialOp {
    kind: Kind,
    adjoint: bool,
}

trait Elem: Copy + Default + Add<Output = Self> + Mul<Output = Self> + From<f32> {}
impl Elem for f32 {}
impl Elem for f64 {}

fn dims4(shape: &Shape) -> Result<(usize, usize, usize, usize)> {
    shape.dims4()
}

/// Source taps of one output coordinate of a x2 bilinear upsample.
fn bilinear_taps(o: usize, n: usize) -> [(usize, f32); 2] {
    let i = o / 2;
    if o % 2 == 0 {
        [(i, 0.75), (i.saturating_sub(1), 0.25)]
    } else {
        [(i, 0.75), ((i + 1).min(n - 1), 0.25)]
    }
}

impl SpatialOp {
    fn out_shape(&self, (b, h, w, c): (usize, usize, usize, usize)) -> Result<Shape> {
        let kk = match self.kind {
            Kind::Im2col { kernel } => kernel * kernel,
            _ => 1,
        };
        Ok(match (self.kind, self.adjoint) {
            (Kind::Im2col { .. }, false) => Shape::from((b, h, w, c * kk)),
            (Kind::Im2col { .. }, true) => {
                if c % kk != 0 {
                    candle_core::bail!("col2im: channel count {c} not divisible by {kk}")
                }
                Shape::from((b, h, w, c / kk))
            }
            (_, false) => Shape::from((b, 2 * h, 2 * w, c)),
            (_, true) => {
                if h % 2 != 0 || w % 2 != 0 {
                    candle_core::bail!("upsample adjoint needs even spatial dims, got {h}x{w}")
                }
                Shape::from((b, h / 2, w / 2, c))
            }
        })
    }

    fn run<T: Elem>(&self, src: &[T], in_dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, h, w, c) = in_dims;
        match (self.kind, self.adjoint) {
            (Kind::Im2col { kernel }, false) => im2col_raw(src, b, h, w, c, kernel),
            (Kind::Im2col { kernel }, true) => col2im_raw(src, b, h, w, c / (kernel * kernel), kernel),
            (Kind::UpNearest, false) => up_nearest(src, b, h, w, c),
            (Kind::UpNearest, true) => up_nearest_adjoint(src, b, h / 2, w / 2, c),
            (Kind::UpBilinear, false) => up_bilinear(src, b, h, w, c),
            (Kind::UpBilinear, true) => up_bilinear_adjoint(src, b, h / 2, w / 2, c),
        }
    }
}

fn im2col_raw<T: Elem>(src: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let row = k * k * c;
    let mut out = vec![T::default(); b * h * w * row];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let dst = ((bi * h + y) * w + x) * row;
                for dy in 0..k {
                    let sy = y + dy;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for dx in 0..k {
                        let sx = x + dx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let s = ((bi * h + sy) * w + sx) * c;
                        let d = dst + (dy * k + dx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im_raw<T: Elem>(src: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let row = k * k * c;
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let base = ((bi * h + y) * w + x) * row;
                for dy in 0..k {
                    let sy = y + dy;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for dx in 0..k {
                        let sx = x + dx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let d = ((bi * h + sy) * w + sx) * c;
                        let s = base + (dy * k + dx) * c;
                        for (o, v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o = *o + *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn up_nearest<T: Elem>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::default(); b * oh * ow * c];
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let s = ((bi * h + y / 2) * w + x / 2) * c;
                let d = ((bi * oh + y) * ow + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    out
}

/// Adjoint of [`up_nearest`]: 2x2 sum pooling. `h`, `w` are the pooled dims.
fn up_nearest_adjoint<T: Elem>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ih, iw) = (2 * h, 2 * w);
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for y in 0..ih {
            for x in 0..iw {
                let s = ((bi * ih + y) * iw + x) * c;
                let d = ((bi * h + y / 2) * w + x / 2) * c;
                for (o, v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                    *o = *o + *v;
                }
            }
        }
    }
    out
}

fn up_bilinear<T: Elem>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::default(); b * oh * ow * c];
    for bi in 0..b {
        for y in 0..oh {
            let ty = bilinear_taps(y, h);
            for x in 0..ow {
                let tx = bilinear_taps(x, w);
                let d = ((bi * oh + y) * ow + x) * c;
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        let wgt = T::from(wy * wx);
                        let s = ((bi * h + sy) * w + sx) * c;
                        for (o, v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o = *o + wgt * *v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`up_bilinear`]. `h`, `w` are the low-resolution dims.
fn up_bilinear_adjoint<T: Elem>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ih, iw) = (2 * h, 2 * w);
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for y in 0..ih {
            let ty = bilinear_taps(y, h);
            for x in 0..iw {
                let tx = bilinear_taps(x, w);
                let s = ((bi * ih + y) * iw + x) * c;
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        let wgt = T::from(wy * wx);
                        let d = ((bi * h + sy) * w + sx) * c;
                        for (o, v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o = *o + wgt * *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("spatial op expects a contiguous input"),
    }
}

impl CustomOp1 for SpatialOp {
    fn name(&self) -> &'static str {
        match (self.kind, self.adjoint) {
            (Kind::Im2col { .. }, false) => "im2col",
            (Kind::Im2col { .. }, true) => "col2im",
            (Kind::UpNearest, false) => "upsample-nearest2x",
            (Kind::UpNearest, true) => "sum-pool2x",
            (Kind::UpBilinear, false) => "upsample-bilinear2x",
            (Kind::UpBilinear, true) => "upsample-bilinear2x-adjoint",
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(layout.shape())?;
        let shape = self.out_shape(dims)?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?, dims)),
            other => candle_core::bail!("unsupported dtype {:?} for {}", candle_core::backend::BackendStorage::dtype(other), self.name()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let adj = SpatialOp {
            kind: self.kind,
            adjoint: !self.adjoint,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(adj)?))
    }
}

fn apply(x: &Tensor, kind: Kind, adjoint: bool) -> Result<Tensor> {
    x.contiguous()?.apply_op1(SpatialOp { kind, adjoint })
}

/// Extracts `k x k` patches (zero padded, stride 1) into the channel axis.
pub fn im2col(x: &Tensor, kernel: usize) -> Result<Tensor> {
    apply(x, Kind::Im2col { kernel }, false)
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the image grid.
pub fn col2im(cols: &Tensor, kernel: usize) -> Result<Tensor> {
    apply(cols, Kind::Im2col { kernel }, true)
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    apply(x, Kind::UpNearest, false)
}

pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    apply(x, Kind::UpBilinear, false)
}

/// 2x2 average pooling, expressed as a quarter of the nearest-upsample adjoint.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    apply(x, Kind::UpNearest, true)? * 0.25
}

/// Adjoint of [`avg_pool2x`].
pub fn avg_pool2x_adjoint(x: &Tensor) -> Result<Tensor> {
    upsample_nearest2x(x)? * 0.25
}
