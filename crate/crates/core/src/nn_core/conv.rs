//! im2col + GEMM convolution kernels.
//!
//! Work is split into fixed chunks of output rows so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Upper bound on the im2col buffer of one chunk, in elements.
const CHUNK_ELEMS: usize = 1 << 20;
/// Chunks evaluated per parallel wave in the backward pass.
const BACKWARD_WAVE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, dilation 1, shape-preserving padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Sets the dilation and re-derives shape-preserving padding.
    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "conv kernel, stride and dilation must be >= 1: {self:?}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("conv channels must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn out_len(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Output `(height, width)` for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.out_len(h), self.out_len(w)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(shape_err!("conv {self:?} produces an empty output for input {h}x{w}")),
        }
    }

    fn k_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// `c = a·b (+ beta·c)` where `a` is `m×k` and `b` is `k×n`; `ta`/`tb` mark
/// operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above against the dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    spec: ConvSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn chunks(&self, batch: usize) -> Vec<(usize, usize, usize)> {
        let per_row = (self.spec.k_rows() * self.ow).max(1);
        let rows = (CHUNK_ELEMS / per_row).clamp(1, self.oh.max(1));
        let mut out = Vec::new();
        for b in 0..batch {
            let mut r0 = 0;
            while r0 < self.oh {
                let r1 = (r0 + rows).min(self.oh);
                out.push((b, r0, r1));
                r0 = r1;
            }
        }
        out
    }

    fn im2col(&self, x: &[f64], r0: usize, r1: usize) -> Vec<f64> {
        let s = &self.spec;
        let n = (r1 - r0) * self.ow;
        let mut cols = vec![0.0; s.k_rows() * n];
        for c in 0..s.in_channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..s.kernel {
                for kj in 0..s.kernel {
                    let row = (c * s.kernel + ki) * s.kernel + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oh in r0..r1 {
                        let ih = (oh * s.stride + ki * s.dilation) as isize - s.padding as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        let d = &mut dst[(oh - r0) * self.ow..(oh - r0 + 1) * self.ow];
                        for (ow, slot) in d.iter_mut().enumerate() {
                            let iw = (ow * s.stride + kj * s.dilation) as isize - s.padding as isize;
                            if iw >= 0 && iw < self.w as isize {
                                *slot = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let s = &self.spec;
        let n = (r1 - r0) * self.ow;
        for c in 0..s.in_channels {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..s.kernel {
                for kj in 0..s.kernel {
                    let row = (c * s.kernel + ki) * s.kernel + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oh in r0..r1 {
                        let ih = (oh * s.stride + ki * s.dilation) as isize - s.padding as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        let srow = &src[(oh - r0) * self.ow..(oh - r0 + 1) * self.ow];
                        for (ow, &v) in srow.iter().enumerate() {
                            let iw = (ow * s.stride + kj * s.dilation) as isize - s.padding as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<(usize, Geometry)> {
    spec.validate()?;
    let [b, c, h, wd] = x.dims4()?;
    if c != spec.in_channels {
        return Err(shape_err!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        ));
    }
    if w.shape != spec.weight_shape() {
        return Err(shape_err!(
            "conv weight shape {:?} does not match {:?}",
            w.shape,
            spec.weight_shape()
        ));
    }
    let (oh, ow) = spec.output_hw(h, wd)?;
    Ok((
        b,
        Geometry {
            spec: *spec,
            h,
            w: wd,
            oh,
            ow,
        },
    ))
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (batch, g) = geometry(x, w, spec)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(shape_err!("conv bias has {} values, need {}", b.len(), spec.out_channels));
        }
    }
    let cout = spec.out_channels;
    let kr = spec.k_rows();
    let in_plane = spec.in_channels * g.h * g.w;
    let out_hw = g.oh * g.ow;
    let chunks = g.chunks(batch);
    let results: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&(b, r0, r1)| {
            let cols = g.im2col(&x.data[b * in_plane..(b + 1) * in_plane], r0, r1);
            let n = (r1 - r0) * g.ow;
            let mut out = vec![0.0; cout * n];
            if let Some(bias) = bias {
                for (co, row) in out.chunks_mut(n).enumerate() {
                    row.fill(bias.data[co]);
                }
            }
            gemm(cout, kr, n, &w.data, false, &cols, false, 1.0, &mut out);
            out
        })
        .collect();
    let mut y = Tensor::zeros(&[batch, cout, g.oh, g.ow]);
    for (&(b, r0, r1), part) in chunks.iter().zip(&results) {
        let n = (r1 - r0) * g.ow;
        for co in 0..cout {
            let dst = (b * cout + co) * out_hw + r0 * g.ow;
            y.data[dst..dst + n].copy_from_slice(&part[co * n..(co + 1) * n]);
        }
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (batch, g) = geometry(x, w, spec)?;
    let cout = spec.out_channels;
    let kr = spec.k_rows();
    let in_plane = spec.in_channels * g.h * g.w;
    let out_hw = g.oh * g.ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for b in 0..batch {
        for co in 0..cout {
            let base = (b * cout + co) * out_hw;
            db[co] += dy[base..base + out_hw].iter().sum::<f64>();
        }
    }
    let chunks = g.chunks(batch);
    for wave in chunks.chunks(BACKWARD_WAVE) {
        let parts: Vec<(Vec<f64>, Vec<f64>)> = wave
            .par_iter()
            .map(|&(b, r0, r1)| {
                let n = (r1 - r0) * g.ow;
                let cols = g.im2col(&x.data[b * in_plane..(b + 1) * in_plane], r0, r1);
                let mut dyc = vec![0.0; cout * n];
                for co in 0..cout {
                    let src = (b * cout + co) * out_hw + r0 * g.ow;
                    dyc[co * n..(co + 1) * n].copy_from_slice(&dy[src..src + n]);
                }
                let mut dw_part = vec![0.0; cout * kr];
                gemm(cout, n, kr, &dyc, false, &cols, true, 0.0, &mut dw_part);
                let mut dcols = vec![0.0; kr * n];
                gemm(kr, cout, n, &w.data, true, &dyc, false, 0.0, &mut dcols);
                (dw_part, dcols)
            })
            .collect();
        for (&(b, r0, r1), (dw_part, dcols)) in wave.iter().zip(&parts) {
            dw.iter_mut().zip(dw_part).for_each(|(a, v)| *a += v);
            g.col2im(dcols, r0, r1, &mut dx[b * in_plane..(b + 1) * in_plane]);
        }
    }
    Ok((dx, dw, db))
}
