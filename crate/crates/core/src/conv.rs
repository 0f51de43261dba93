//! Convolution geometry and the numeric kernels behind `conv2d` and
//! `conv_transpose2d`.
//!
//! Three interchangeable algorithms are provided. [`ConvAlgo::Direct`] is a
//! plain summation loop that serves as the reference; [`ConvAlgo::Im2col`]
//! unfolds the input into columns and calls a GEMM; [`ConvAlgo::TapGemm`]
//! multiplies every kernel tap against the unpadded input in a single GEMM and
//! then sums the shifted tap responses, which avoids the column buffer and
//! suits layers with few output channels. Weights are always laid out
//! `(out_ch, in_ch, kh, kw)`, for the transposed variant too.
//!
//! Inputs are given as a list of channel groups that are treated as if they
//! were concatenated along the channel axis. Dense blocks use this to avoid
//! materializing their growing concatenations.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PaddingMode {
    #[default]
    Zero,
    /// Mirror about the edge sample, excluding it (`[2,1 | 0,1,2,...]`).
    Reflect,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ConvAlgo {
    Direct,
    Im2col,
    #[default]
    TapGemm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub padding_mode: PaddingMode,
}

impl ConvGeom {
    pub fn new(kh: usize, kw: usize) -> Self {
        ConvGeom {
            kernel: (kh, kw),
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            padding_mode: PaddingMode::Zero,
        }
    }

    /// Square `k×k` kernel padded so stride-1 output keeps the input size.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvGeom::new(k, k)
            .with_dilation(dilation)
            .with_padding(dilation * (k - 1) / 2)
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn with_padding_mode(mut self, mode: PaddingMode) -> Self {
        self.padding_mode = mode;
        self
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Effective extent `(k - 1) * r + 1` along each axis.
    pub fn extent(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation.0 + 1,
            (self.kernel.1 - 1) * self.dilation.1 + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 {
            return Err(Error::Config(format!("kernel {kh}x{kw} must be at least 1x1")));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        Ok(())
    }

    /// Output size of a forward convolution, `None` when it would be empty.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (eh, ew) = self.extent();
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < eh || pw < ew {
            return None;
        }
        Some(((ph - eh) / self.stride.0 + 1, (pw - ew) / self.stride.1 + 1))
    }

    /// Output size of a transposed convolution, `None` when it would be empty.
    pub fn transposed_output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h == 0 || w == 0 {
            return None;
        }
        let (eh, ew) = self.extent();
        let fh = (h - 1) * self.stride.0 + eh;
        let fw = (w - 1) * self.stride.1 + ew;
        let oh = fh.checked_sub(2 * self.padding.0).filter(|&v| v > 0)?;
        let ow = fw.checked_sub(2 * self.padding.1).filter(|&v| v > 0)?;
        Some((oh, ow))
    }
}

/// Reflect an out-of-range coordinate back into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r >= n as isize {
        (period - r) as usize
    } else {
        r as usize
    }
}

fn map_coord(pos: isize, n: usize, mode: PaddingMode) -> Option<usize> {
    if (0..n as isize).contains(&pos) {
        Some(pos as usize)
    } else {
        match mode {
            PaddingMode::Zero => None,
            PaddingMode::Reflect => Some(reflect_index(pos, n)),
        }
    }
}

/// For each kernel tap and grid coordinate, the source coordinate in the
/// padded "big" image (or `None` for zero padding).
fn tap_table(
    k: usize,
    grid: usize,
    big: usize,
    stride: usize,
    dil: usize,
    pad: usize,
    mode: PaddingMode,
) -> Vec<Option<usize>> {
    let mut t = Vec::with_capacity(k * grid);
    for ki in 0..k {
        for g in 0..grid {
            let pos = (g * stride + ki * dil) as isize - pad as isize;
            t.push(map_coord(pos, big, mode));
        }
    }
    t
}

struct Taps {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    grid: (usize, usize),
}

impl Taps {
    fn new(geom: &ConvGeom, big: (usize, usize), grid: (usize, usize)) -> Self {
        Taps {
            rows: tap_table(
                geom.kernel.0,
                grid.0,
                big.0,
                geom.stride.0,
                geom.dilation.0,
                geom.padding.0,
                geom.padding_mode,
            ),
            cols: tap_table(
                geom.kernel.1,
                grid.1,
                big.1,
                geom.stride.1,
                geom.dilation.1,
                geom.padding.1,
                geom.padding_mode,
            ),
            grid,
        }
    }

    #[inline]
    fn row(&self, ki: usize, g: usize) -> Option<usize> {
        self.rows[ki * self.grid.0 + g]
    }

    #[inline]
    fn col(&self, kj: usize, g: usize) -> Option<usize> {
        self.cols[kj * self.grid.1 + g]
    }
}

/// Unfold one batch item of `planes` (each an `(h, w)` image of the big
/// grid) into `(planes * kh * kw, grid_h * grid_w)` columns.
fn im2col<T: Float>(planes: &[&[T]], big_w: usize, geom: &ConvGeom, taps: &Taps, out: &mut [T]) {
    let (kh, kw) = geom.kernel;
    let (gh, gw) = taps.grid;
    let p = gh * gw;
    let mut row = 0;
    for plane in planes {
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut out[row * p..(row + 1) * p];
                for gy in 0..gh {
                    let d = &mut dst[gy * gw..(gy + 1) * gw];
                    match taps.row(ki, gy) {
                        None => d.fill(T::zero()),
                        Some(sy) => {
                            let src = &plane[sy * big_w..(sy + 1) * big_w];
                            for (gx, v) in d.iter_mut().enumerate() {
                                *v = match taps.col(kj, gx) {
                                    Some(sx) => src[sx],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `planes`.
fn col2im<T: Float>(cols: &[T], planes: &mut [&mut [T]], big_w: usize, geom: &ConvGeom, taps: &Taps) {
    let (kh, kw) = geom.kernel;
    let (gh, gw) = taps.grid;
    let p = gh * gw;
    let mut row = 0;
    for plane in planes.iter_mut() {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * p..(row + 1) * p];
                for gy in 0..gh {
                    if let Some(sy) = taps.row(ki, gy) {
                        let s = &src[gy * gw..(gy + 1) * gw];
                        let dst = &mut plane[sy * big_w..(sy + 1) * big_w];
                        for (gx, &v) in s.iter().enumerate() {
                            if let Some(sx) = taps.col(kj, gx) {
                                dst[sx] = dst[sx] + v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = a · b + beta · c` with `c` row-major `m×n` and arbitrary strides on
/// `a` (`m×k`) and `b` (`k×n`).
#[allow(clippy::too_many_arguments)]
fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    beta: T,
    c: &mut [T],
) {
    let a = ArrayView2::from_shape((m, k).strides(a_strides), a).expect("gemm lhs view");
    let b = ArrayView2::from_shape((k, n).strides(b_strides), b).expect("gemm rhs view");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm output view");
    general_mat_mul(T::one(), &a, &b, beta, &mut c);
}

/// `Z = Wᵀ · X` for batch item `b`: row `o·kk + t` holds the response of
/// kernel tap `t` of output channel `o` at every input pixel.
fn tap_products<T: Float>(x: &ConvInput<'_, T>, b: usize, wt: &[T], k: Kernel<'_, T>, kk: usize, z: &mut [T]) {
    let plane = x.h * x.w;
    let m = k.out_ch * kk;
    let mut c_off = 0;
    for (j, &(data, c)) in x.parts.iter().enumerate() {
        let xi = &data[b * c * plane..(b + 1) * c * plane];
        let beta = if j == 0 { T::zero() } else { T::one() };
        gemm(m, c, plane, &wt[c_off..], (k.in_ch, 1), xi, (plane, 1), beta, z);
        c_off += c;
    }
}

/// `y[o, p] = Σ_t z[o·kk + t, src_t(p)]` over the taps that land inside
/// the input.
fn gather_taps<T: Float>(z: &[T], y: &mut [T], out_ch: usize, geom: &ConvGeom, taps: &Taps, in_w: usize, plane: usize) {
    let (kh, kw) = geom.kernel;
    let (gh, gw) = taps.grid;
    let p = gh * gw;
    for o in 0..out_ch {
        let yo = &mut y[o * p..(o + 1) * p];
        for ki in 0..kh {
            for kj in 0..kw {
                let zt = &z[(o * kh * kw + ki * kw + kj) * plane..][..plane];
                for gy in 0..gh {
                    let Some(sy) = taps.row(ki, gy) else { continue };
                    let src = &zt[sy * in_w..(sy + 1) * in_w];
                    let dst = &mut yo[gy * gw..(gy + 1) * gw];
                    for (gx, v) in dst.iter_mut().enumerate() {
                        if let Some(sx) = taps.col(kj, gx) {
                            *v = *v + src[sx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_taps`].
fn scatter_taps<T: Float>(dy: &[T], dz: &mut [T], out_ch: usize, geom: &ConvGeom, taps: &Taps, in_w: usize, plane: usize) {
    let (kh, kw) = geom.kernel;
    let (gh, gw) = taps.grid;
    let p = gh * gw;
    for o in 0..out_ch {
        let go = &dy[o * p..(o + 1) * p];
        for ki in 0..kh {
            for kj in 0..kw {
                let zt = &mut dz[(o * kh * kw + ki * kw + kj) * plane..][..plane];
                for gy in 0..gh {
                    let Some(sy) = taps.row(ki, gy) else { continue };
                    let dst = &mut zt[sy * in_w..(sy + 1) * in_w];
                    let src = &go[gy * gw..(gy + 1) * gw];
                    for (gx, &v) in src.iter().enumerate() {
                        if let Some(sx) = taps.col(kj, gx) {
                            dst[sx] = dst[sx] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Input to a convolution: channel groups of a `(n, c_i, h, w)` batch that
/// act as one concatenated tensor.
pub(crate) struct ConvInput<'a, T> {
    pub parts: Vec<(&'a [T], usize)>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<'a, T: Float> ConvInput<'a, T> {
    pub fn single(data: &'a [T], n: usize, c: usize, h: usize, w: usize) -> Self {
        ConvInput {
            parts: vec![(data, c)],
            n,
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.parts.iter().map(|p| p.1).sum()
    }

    /// Every input plane of batch item `b`, in concatenated channel order.
    fn planes(&self, b: usize) -> Vec<&'a [T]> {
        let plane = self.h * self.w;
        let mut out = Vec::with_capacity(self.channels());
        for &(data, c) in &self.parts {
            let item = &data[b * c * plane..(b + 1) * c * plane];
            out.extend(item.chunks_exact(plane));
        }
        out
    }
}

/// Weight tensor description, `(out_ch, in_ch, kh, kw)`.
#[derive(Clone, Copy)]
pub(crate) struct Kernel<'a, T> {
    pub weight: &'a [T],
    pub out_ch: usize,
    pub in_ch: usize,
}

pub(crate) struct ConvGrads<T> {
    /// One gradient per input part, in part order.
    pub input: Option<Vec<Vec<T>>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

fn split_planes_mut<'b, T>(bufs: &'b mut [Vec<T>], chans: &[usize], b: usize, plane: usize) -> Vec<&'b mut [T]> {
    let mut out = Vec::new();
    for (buf, &c) in bufs.iter_mut().zip(chans) {
        let item = &mut buf[b * c * plane..(b + 1) * c * plane];
        out.extend(item.chunks_exact_mut(plane));
    }
    out
}

pub(crate) fn conv2d_forward<T: Float>(
    algo: ConvAlgo,
    x: &ConvInput<'_, T>,
    k: Kernel<'_, T>,
    bias: Option<&[T]>,
    geom: &ConvGeom,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p = oh * ow;
    let kk = geom.kernel_len();
    let kdim = k.in_ch * kk;
    let mut out = vec![T::zero(); x.n * k.out_ch * p];
    let taps = Taps::new(geom, (x.h, x.w), (oh, ow));
    let mut cols = match algo {
        ConvAlgo::Im2col => vec![T::zero(); kdim * p],
        ConvAlgo::Direct => Vec::new(),
        ConvAlgo::TapGemm => vec![T::zero(); k.out_ch * kk * x.h * x.w],
    };
    let wt = match algo {
        ConvAlgo::TapGemm => transpose_kernel(k, kk),
        _ => Vec::new(),
    };
    for b in 0..x.n {
        let planes = x.planes(b);
        let y = &mut out[b * k.out_ch * p..(b + 1) * k.out_ch * p];
        match algo {
            ConvAlgo::Im2col => {
                im2col(&planes, x.w, geom, &taps, &mut cols);
                gemm(k.out_ch, kdim, p, k.weight, (kdim, 1), &cols, (p, 1), T::zero(), y);
            }
            ConvAlgo::TapGemm => {
                tap_products(x, b, &wt, k, kk, &mut cols);
                gather_taps(&cols, y, k.out_ch, geom, &taps, x.w, x.h * x.w);
            }
            ConvAlgo::Direct => {
                let (kh, kw) = geom.kernel;
                for o in 0..k.out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::zero();
                            for (c, plane) in planes.iter().enumerate() {
                                let wbase = (o * k.in_ch + c) * kk;
                                for ki in 0..kh {
                                    let Some(sy) = taps.row(ki, oy) else { continue };
                                    for kj in 0..kw {
                                        if let Some(sx) = taps.col(kj, ox) {
                                            acc = acc + k.weight[wbase + ki * kw + kj] * plane[sy * x.w + sx];
                                        }
                                    }
                                }
                            }
                            y[o * p + oy * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Float>(
    algo: ConvAlgo,
    x: &ConvInput<'_, T>,
    k: Kernel<'_, T>,
    geom: &ConvGeom,
    (oh, ow): (usize, usize),
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let p = oh * ow;
    let plane = x.h * x.w;
    let kk = geom.kernel_len();
    let kdim = k.in_ch * kk;
    let taps = Taps::new(geom, (x.h, x.w), (oh, ow));
    let chans: Vec<usize> = x.parts.iter().map(|p| p.1).collect();
    let mut dx: Vec<Vec<T>> = if need_x {
        chans.iter().map(|&c| vec![T::zero(); x.n * c * plane]).collect()
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); if need_w { k.out_ch * kdim } else { 0 }];
    let mut db = vec![T::zero(); if need_b { k.out_ch } else { 0 }];
    let mut cols = vec![
        T::zero();
        match algo {
            ConvAlgo::Im2col => kdim * p,
            ConvAlgo::TapGemm => k.out_ch * kk * plane,
            ConvAlgo::Direct => 0,
        }
    ];
    let wt = match algo {
        ConvAlgo::TapGemm => transpose_kernel(k, kk),
        _ => Vec::new(),
    };
    let max_part = chans.iter().copied().max().unwrap_or(0);
    let mut dwt_part = vec![T::zero(); if algo == ConvAlgo::TapGemm && need_w { k.out_ch * kk * max_part } else { 0 }];
    for b in 0..x.n {
        let g = &dy[b * k.out_ch * p..(b + 1) * k.out_ch * p];
        if need_b {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc = g[o * p..(o + 1) * p].iter().fold(*acc, |a, &v| a + v);
            }
        }
        let planes = x.planes(b);
        match algo {
            ConvAlgo::Im2col => {
                if need_w {
                    im2col(&planes, x.w, geom, &taps, &mut cols);
                    // dW (out × K) += dY (out × P) · colsᵀ (P × K)
                    gemm(k.out_ch, p, kdim, g, (p, 1), &cols, (1, p), T::one(), &mut dw);
                }
                if need_x {
                    // dcols (K × P) = Wᵀ (K × out) · dY (out × P)
                    gemm(kdim, k.out_ch, p, k.weight, (1, kdim), g, (p, 1), T::zero(), &mut cols);
                    let mut dplanes = split_planes_mut(&mut dx, &chans, b, plane);
                    col2im(&cols, &mut dplanes, x.w, geom, &taps);
                }
            }
            ConvAlgo::TapGemm => {
                let m = k.out_ch * kk;
                cols.fill(T::zero());
                scatter_taps(g, &mut cols, k.out_ch, geom, &taps, x.w, plane);
                let mut c_off = 0;
                for (j, &(data, c)) in x.parts.iter().enumerate() {
                    if need_w {
                        // dWᵀ part (out·kk × c) = dZ (out·kk × P) · Xᵀ (P × c)
                        let xi = &data[b * c * plane..(b + 1) * c * plane];
                        let buf = &mut dwt_part[..m * c];
                        gemm(m, plane, c, &cols, (plane, 1), xi, (1, plane), T::zero(), buf);
                        for o in 0..k.out_ch {
                            for t in 0..kk {
                                let row = &buf[(o * kk + t) * c..(o * kk + t + 1) * c];
                                for (ci, &v) in row.iter().enumerate() {
                                    let wi = (o * k.in_ch + c_off + ci) * kk + t;
                                    dw[wi] = dw[wi] + v;
                                }
                            }
                        }
                    }
                    if need_x {
                        // dX part (c × P) += W part (c × out·kk) · dZ (out·kk × P)
                        let d = &mut dx[j][b * c * plane..(b + 1) * c * plane];
                        gemm(c, m, plane, &wt[c_off..], (1, k.in_ch), &cols, (plane, 1), T::one(), d);
                    }
                    c_off += c;
                }
            }
            ConvAlgo::Direct => {
                let mut dplanes = if need_x {
                    split_planes_mut(&mut dx, &chans, b, plane)
                } else {
                    Vec::new()
                };
                let (kh, kw) = geom.kernel;
                for o in 0..k.out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[o * p + oy * ow + ox];
                            for (c, src) in planes.iter().enumerate() {
                                let wbase = (o * k.in_ch + c) * kk;
                                for ki in 0..kh {
                                    let Some(sy) = taps.row(ki, oy) else { continue };
                                    for kj in 0..kw {
                                        let Some(sx) = taps.col(kj, ox) else { continue };
                                        let wi = wbase + ki * kw + kj;
                                        if need_w {
                                            dw[wi] = dw[wi] + gv * src[sy * x.w + sx];
                                        }
                                        if need_x {
                                            let d = &mut dplanes[c][sy * x.w + sx];
                                            *d = *d + gv * k.weight[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: need_x.then_some(dx),
        weight: need_w.then_some(dw),
        bias: need_b.then_some(db),
    }
}

/// Rearrange `(out, in, kk)` weights into a row-major `(out·kk) × in` matrix.
fn transpose_kernel<T: Float>(k: Kernel<'_, T>, kk: usize) -> Vec<T> {
    let mut wt = vec![T::zero(); k.out_ch * kk * k.in_ch];
    for o in 0..k.out_ch {
        for c in 0..k.in_ch {
            for t in 0..kk {
                wt[(o * kk + t) * k.in_ch + c] = k.weight[(o * k.in_ch + c) * kk + t];
            }
        }
    }
    wt
}

pub(crate) fn conv_transpose2d_forward<T: Float>(
    algo: ConvAlgo,
    x: &ConvInput<'_, T>,
    k: Kernel<'_, T>,
    bias: Option<&[T]>,
    geom: &ConvGeom,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p_in = x.h * x.w;
    let p_out = oh * ow;
    let kk = geom.kernel_len();
    // The input grid plays the role of a forward convolution's output.
    let taps = Taps::new(geom, (oh, ow), (x.h, x.w));
    let mut out = vec![T::zero(); x.n * k.out_ch * p_out];
    let wt = match algo {
        ConvAlgo::Im2col | ConvAlgo::TapGemm => transpose_kernel(k, kk),
        ConvAlgo::Direct => Vec::new(),
    };
    let mut cols = vec![T::zero(); if algo != ConvAlgo::Direct { k.out_ch * kk * p_in } else { 0 }];
    for b in 0..x.n {
        let planes = x.planes(b);
        let y = &mut out[b * k.out_ch * p_out..(b + 1) * k.out_ch * p_out];
        match algo {
            ConvAlgo::Im2col | ConvAlgo::TapGemm => {
                let xb = &x.parts[0].0[b * k.in_ch * p_in..(b + 1) * k.in_ch * p_in];
                gemm(k.out_ch * kk, k.in_ch, p_in, &wt, (k.in_ch, 1), xb, (p_in, 1), T::zero(), &mut cols);
                let mut yplanes: Vec<&mut [T]> = y.chunks_exact_mut(p_out).collect();
                col2im(&cols, &mut yplanes, ow, geom, &taps);
            }
            ConvAlgo::Direct => {
                let (kh, kw) = geom.kernel;
                for (c, src) in planes.iter().enumerate() {
                    for iy in 0..x.h {
                        for ix in 0..x.w {
                            let v = src[iy * x.w + ix];
                            for o in 0..k.out_ch {
                                let wbase = (o * k.in_ch + c) * kk;
                                for ki in 0..kh {
                                    let Some(sy) = taps.row(ki, iy) else { continue };
                                    for kj in 0..kw {
                                        if let Some(sx) = taps.col(kj, ix) {
                                            let d = &mut y[o * p_out + sy * ow + sx];
                                            *d = *d + v * k.weight[wbase + ki * kw + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * p_out..(o + 1) * p_out].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    algo: ConvAlgo,
    x: &ConvInput<'_, T>,
    k: Kernel<'_, T>,
    geom: &ConvGeom,
    (oh, ow): (usize, usize),
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let p_in = x.h * x.w;
    let p_out = oh * ow;
    let kk = geom.kernel_len();
    let rows = k.out_ch * kk;
    let taps = Taps::new(geom, (oh, ow), (x.h, x.w));
    let mut dx = vec![T::zero(); if need_x { x.n * k.in_ch * p_in } else { 0 }];
    let mut dw = vec![T::zero(); if need_w { k.out_ch * k.in_ch * kk } else { 0 }];
    let mut db = vec![T::zero(); if need_b { k.out_ch } else { 0 }];
    let wt = if algo != ConvAlgo::Direct && need_x {
        transpose_kernel(k, kk)
    } else {
        Vec::new()
    };
    let mut dwt = vec![T::zero(); if algo != ConvAlgo::Direct && need_w { rows * k.in_ch } else { 0 }];
    let mut cols = vec![T::zero(); if algo != ConvAlgo::Direct { rows * p_in } else { 0 }];
    for b in 0..x.n {
        let g = &dy[b * k.out_ch * p_out..(b + 1) * k.out_ch * p_out];
        if need_b {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc = g[o * p_out..(o + 1) * p_out].iter().fold(*acc, |a, &v| a + v);
            }
        }
        let xb = &x.parts[0].0[b * k.in_ch * p_in..(b + 1) * k.in_ch * p_in];
        match algo {
            ConvAlgo::Im2col | ConvAlgo::TapGemm => {
                if !(need_x || need_w) {
                    continue;
                }
                let gplanes: Vec<&[T]> = g.chunks_exact(p_out).collect();
                im2col(&gplanes, ow, geom, &taps, &mut cols);
                if need_w {
                    // dWt (rows × in) += dcols (rows × P) · xᵀ (P × in)
                    gemm(rows, p_in, k.in_ch, &cols, (p_in, 1), xb, (1, p_in), T::one(), &mut dwt);
                }
                if need_x {
                    // dx (in × P) = Wtᵀ (in × rows) · dcols (rows × P)
                    let d = &mut dx[b * k.in_ch * p_in..(b + 1) * k.in_ch * p_in];
                    gemm(k.in_ch, rows, p_in, &wt, (1, k.in_ch), &cols, (p_in, 1), T::zero(), d);
                }
            }
            ConvAlgo::Direct => {
                let (kh, kw) = geom.kernel;
                for c in 0..k.in_ch {
                    for iy in 0..x.h {
                        for ix in 0..x.w {
                            let xi = c * p_in + iy * x.w + ix;
                            let v = xb[xi];
                            let mut acc = T::zero();
                            for o in 0..k.out_ch {
                                let wbase = (o * k.in_ch + c) * kk;
                                for ki in 0..kh {
                                    let Some(sy) = taps.row(ki, iy) else { continue };
                                    for kj in 0..kw {
                                        let Some(sx) = taps.col(kj, ix) else { continue };
                                        let gv = g[o * p_out + sy * ow + sx];
                                        let wi = wbase + ki * kw + kj;
                                        acc = acc + gv * k.weight[wi];
                                        if need_w {
                                            dw[wi] = dw[wi] + gv * v;
                                        }
                                    }
                                }
                            }
                            if need_x {
                                dx[b * k.in_ch * p_in + xi] = acc;
                            }
                        }
                    }
                }
            }
        }
    }
    if algo != ConvAlgo::Direct && need_w {
        for o in 0..k.out_ch {
            for c in 0..k.in_ch {
                for t in 0..kk {
                    dw[(o * k.in_ch + c) * kk + t] = dwt[(o * kk + t) * k.in_ch + c];
                }
            }
        }
    }
    ConvGrads {
        input: need_x.then(|| vec![dx]),
        weight: need_w.then_some(dw),
        bias: need_b.then_some(db),
    }
}
