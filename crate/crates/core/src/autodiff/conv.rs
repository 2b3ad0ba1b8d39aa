//! Direct 2-d convolution (cross-correlation) with stride, dilation and
//! zero padding, plus its two adjoints.
//!
//! Every output element accumulates bias first, then input channels in
//! order, then kernel taps in row-major order. Work is split over batch
//! samples (or output channels for the kernel gradient) so the per-element
//! order never depends on the thread count.

use super::gemm::{gemm_abt_acc, gemm_acc, transpose};
use crate::error::{ensure, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            dilation,
            padding,
        }
    }

    /// Output length along one axis.
    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        ensure!(self.stride > 0, "conv stride must be positive");
        ensure!(self.dilation > 0, "conv dilation must be positive");
        ensure!(kernel > 0, "conv kernel extent must be positive");
        let extent = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        ensure!(
            extent <= padded,
            "dilated kernel extent {} exceeds padded input {} (input {}, padding {})",
            extent,
            padded,
            input,
            self.padding
        );
        Ok((padded - extent) / self.stride + 1)
    }
}

/// Geometry of one convolution, validated once.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Self> {
        ensure!(
            input.len() == 4 && kernel.len() == 4,
            "conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw], got input {:?} and kernel {:?}",
            input,
            kernel
        );
        ensure!(
            input[1] == kernel[1],
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            input,
            kernel
        );
        let oh = spec.output_len(input[2], kernel[2])?;
        let ow = spec.output_len(input[3], kernel[3])?;
        Ok(ConvGeom {
            n: input[0],
            c: input[1],
            h: input[2],
            w: input[3],
            f: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            oh,
            ow,
            spec,
        })
    }

    pub fn ksize(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.f, self.oh, self.ow]
    }

    /// Output-column range `[lo, hi)` whose input column for tap `kx`
    /// falls inside the unpadded input, and the input column of `lo`.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize, usize) {
        tap_range(self.ow, self.w, kx * self.spec.dilation, &self.spec)
    }

    #[inline]
    fn row_range(&self, ky: usize) -> (usize, usize, usize) {
        tap_range(self.oh, self.h, ky * self.spec.dilation, &self.spec)
    }
}

/// For output positions `o` in `[0, out)`, input position is
/// `o*stride + offset - padding`. Returns the valid `[lo, hi)` range of `o`
/// and the input position at `lo`.
#[inline]
fn tap_range(out: usize, input: usize, offset: usize, spec: &ConvSpec) -> (usize, usize, usize) {
    let s = spec.stride;
    let p = spec.padding;
    // smallest o with o*s + offset >= p
    let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
    // largest o with o*s + offset - p <= input - 1
    let hi = if input + p < offset + 1 {
        0
    } else {
        ((input + p - offset - 1) / s + 1).min(out)
    };
    if lo >= hi {
        return (0, 0, 0);
    }
    (lo, hi, lo * s + offset - p)
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), spec)?;
    if let Some(b) = bias {
        ensure!(
            b.shape() == [g.f],
            "conv2d bias shape {:?} does not match {} output channels",
            b.shape(),
            g.f
        );
    }
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    let x = input.data();
    let wt = kernel.data();
    let bias = bias.map(|b| b.data());
    let plane_out = g.oh * g.ow;
    par::for_each_chunk_mut(&mut out, g.f * plane_out, |n, out_n| {
        let x_n = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        if let Some(b) = bias {
            for (f, o) in out_n.chunks_mut(plane_out).enumerate() {
                o.fill(b[f]);
            }
        }
        with_scratch(g.ksize() * plane_out, |col| {
            im2col(&g, x_n, col);
            gemm_acc(g.f, g.ksize(), plane_out, wt, col, out_n);
        });
    });
    Tensor::new(g.output_shape(), out)
}

/// Unfold one sample into a `[C*kh*kw, OH*OW]` matrix, rows ordered by
/// channel then tap, zero where a tap falls in the padding.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let s = g.spec.stride;
    for c in 0..g.c {
        let xc = &x[c * plane_in..(c + 1) * plane_in];
        for ky in 0..g.kh {
            let (ylo, yhi, iy0) = g.row_range(ky);
            for kx in 0..g.kw {
                let (xlo, xhi, ix0) = g.col_range(kx);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane_out..(row + 1) * plane_out];
                if xlo == xhi || ylo == yhi {
                    dst.fill(0.0);
                    continue;
                }
                dst[..ylo * g.ow].fill(0.0);
                dst[yhi * g.ow..].fill(0.0);
                for (r, oy) in (ylo..yhi).enumerate() {
                    let iy = iy0 + r * s;
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    let drow = &mut line[xlo..xhi];
                    if s == 1 {
                        drow.copy_from_slice(&xrow[ix0..ix0 + drow.len()]);
                    } else {
                        for (j, d) in drow.iter_mut().enumerate() {
                            *d = xrow[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Run `f` on a per-thread buffer of length `len` with unspecified contents.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Adjoint of [`im2col`]: scatter-add columns back into one sample.
fn col2im(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let s = g.spec.stride;
    for c in 0..g.c {
        let xc = &mut x[c * plane_in..(c + 1) * plane_in];
        for ky in 0..g.kh {
            let (ylo, yhi, iy0) = g.row_range(ky);
            for kx in 0..g.kw {
                let (xlo, xhi, ix0) = g.col_range(kx);
                if xlo == xhi {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane_out..(row + 1) * plane_out];
                for (r, oy) in (ylo..yhi).enumerate() {
                    let iy = iy0 + r * s;
                    let xrow = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.ow + xlo..oy * g.ow + xhi];
                    if s == 1 {
                        for (d, v) in xrow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in srow.iter().enumerate() {
                            xrow[ix0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint with respect to the input: scatters `grad_out` back through the
/// kernel taps.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor> {
    let g = ConvGeom::new(input_shape, kernel.shape(), spec)?;
    ensure!(
        grad_out.shape() == g.output_shape(),
        "conv2d grad shape {:?} does not match output {:?}",
        grad_out.shape(),
        g.output_shape()
    );
    let reach = spec.dilation * (g.kh - 1);
    if spec.stride == 1 && g.kh == g.kw && spec.padding <= reach {
        // stride 1: the adjoint is a convolution with the flipped kernel
        let flipped = Tensor::from_fn(vec![g.c, g.f, g.kh, g.kw], |i| {
            let (c, r) = (i / (g.f * g.kh * g.kw), i % (g.f * g.kh * g.kw));
            let (f, t) = (r / (g.kh * g.kw), r % (g.kh * g.kw));
            kernel.data()[((f * g.c + c) * g.kh + g.kh - 1 - t / g.kw) * g.kw + g.kw - 1 - t % g.kw]
        });
        return conv2d_forward(grad_out, &flipped, None, ConvSpec::new(1, spec.dilation, reach - spec.padding));
    }
    let mut gin = vec![0.0; g.n * g.c * g.h * g.w];
    let go = grad_out.data();
    let wt_t = transpose(g.f, g.ksize(), kernel.data());
    let plane_out = g.oh * g.ow;
    par::for_each_chunk_mut(&mut gin, g.c * g.h * g.w, |n, gin_n| {
        let go_n = &go[n * g.f * plane_out..(n + 1) * g.f * plane_out];
        with_scratch(g.ksize() * plane_out, |col| {
            col.fill(0.0);
            gemm_acc(g.ksize(), g.f, plane_out, &wt_t, go_n, col);
            col2im(&g, col, gin_n);
        });
    });
    Tensor::new(input_shape.to_vec(), gin)
}

/// Adjoint with respect to the kernel: correlates input with `grad_out`,
/// summing per-sample contributions in sample order.
pub fn conv2d_backward_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel_shape, spec)?;
    ensure!(
        grad_out.shape() == g.output_shape(),
        "conv2d grad shape {:?} does not match output {:?}",
        grad_out.shape(),
        g.output_shape()
    );
    let ksize = g.ksize();
    let go = grad_out.data();
    let x = input.data();
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let partial = par::map_range(g.n, |n| {
        let go_n = &go[n * g.f * plane_out..(n + 1) * g.f * plane_out];
        let mut gw = vec![0.0; g.f * ksize];
        with_scratch(ksize * plane_out, |col| {
            im2col(&g, &x[n * g.c * plane_in..(n + 1) * g.c * plane_in], col);
            gemm_abt_acc(g.f, plane_out, ksize, go_n, col, &mut gw);
        });
        gw
    });
    let mut gw = vec![0.0; g.f * ksize];
    for p in partial {
        for (a, b) in gw.iter_mut().zip(p) {
            *a += b;
        }
    }
    Tensor::new(kernel_shape.to_vec(), gw)
}

/// Bias gradient: sum of `grad_out` over batch and space per channel.
pub fn conv2d_backward_bias(grad_out: &Tensor) -> Result<Tensor> {
    let [n, f, h, w] = grad_out.dims4()?;
    let go = grad_out.data();
    let mut gb = vec![0.0; f];
    for s in 0..n {
        for (c, acc) in gb.iter_mut().enumerate() {
            let base = (s * f + c) * h * w;
            *acc += go[base..base + h * w].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![f], gb)
}
