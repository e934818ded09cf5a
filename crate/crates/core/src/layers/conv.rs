//! 2D convolution (cross-correlation, zero padding, no bias).
//!
//! Forward runs as im2col plus a matmul whose per-element accumulation order
//! is the kernel index ascending in (in_channel, ky, kx) order, fused
//! multiply-add per step. That order is part of the layer's contract: a
//! naive six-nested-loop convolution accumulating in the same order produces
//! bitwise-identical output.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Element, Fill, Tensor};
use serde::{Deserialize, Serialize};

/// Static description of a convolution edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel extent; must be odd.
    pub kernel: usize,
    pub stride: usize,
    /// Symmetric zero padding.
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::shape(format!(
                "kernel extent must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::shape("stride and channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Output spatial extents for a given input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |d: usize| -> Result<usize> {
            let padded = d + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::shape(format!(
                    "input extent {d} too small for kernel {} with padding {}",
                    self.kernel, self.padding
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Convolution parameters: the weight tensor plus its static spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<E: Element> {
    pub spec: ConvSpec,
    /// Shape out_channels x in_channels x kernel x kernel.
    pub weights: Tensor<E>,
}

impl<E: Element> ConvParams<E> {
    /// He-style init: zero-mean normal with stddev sqrt(2 / fan_in).
    pub fn new_he(spec: ConvSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let weights = Tensor::alloc(
            &spec.weight_shape(),
            Fill::Normal {
                mean: 0.0,
                stddev: (2.0 / fan_in).sqrt(),
                rng,
            },
        )?;
        Ok(ConvParams { spec, weights })
    }

    pub fn from_weights(spec: ConvSpec, weights: Tensor<E>) -> Result<Self> {
        spec.validate()?;
        if weights.shape() != spec.weight_shape() {
            return Err(Error::shape(format!(
                "weight shape {:?} does not match spec {:?}",
                weights.shape(),
                spec.weight_shape()
            )));
        }
        Ok(ConvParams { spec, weights })
    }

    fn check_input(&self, input: &Tensor<E>) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (b, c, h, w) = input.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, convolution expects {}",
                self.spec.in_channels
            )));
        }
        let (oh, ow) = self.spec.out_hw(h, w)?;
        Ok((b, c, h, w, oh, ow))
    }

    /// Forward pass over a batch.
    pub fn forward(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let (b, c, h, w, oh, ow) = self.check_input(input)?;
        let s = &self.spec;
        let kk = c * s.kernel * s.kernel;
        let n = oh * ow;
        let m = s.out_channels;
        let mut out = Tensor::zeros(&[b, m, oh, ow]);
        let in_plane = h * w;
        let out_img = m * n;
        if s.stride == 1 {
            let mut scratch = Vec::new();
            for img in 0..b {
                let x = &input.data()[img * c * in_plane..(img + 1) * c * in_plane];
                let dst = &mut out.data_mut()[img * out_img..(img + 1) * out_img];
                conv_s1_direct(
                    dst,
                    x,
                    self.weights.data(),
                    c,
                    h,
                    w,
                    m,
                    s.kernel,
                    s.padding,
                    oh,
                    ow,
                    &mut scratch,
                );
            }
        } else {
            let mut col = vec![E::ZERO; kk * n];
            for img in 0..b {
                let x = &input.data()[img * c * in_plane..(img + 1) * c * in_plane];
                let dst = &mut out.data_mut()[img * out_img..(img + 1) * out_img];
                im2col(x, s, h, w, oh, ow, &mut col);
                matmul_kn(dst, self.weights.data(), &col, m, kk, n);
            }
        }
        Ok(out)
    }

    /// Backward pass: gradients w.r.t. input and weights.
    ///
    /// `need_input_grad: false` skips the input-gradient computation (used
    /// for edges leaving the graph's input node, whose gradient has no
    /// consumer).
    pub fn backward_opt(
        &self,
        input: &Tensor<E>,
        upstream: &Tensor<E>,
        need_input_grad: bool,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let (b, c, h, w, oh, ow) = self.check_input(input)?;
        let s = &self.spec;
        let m = s.out_channels;
        if upstream.shape() != [b, m, oh, ow] {
            return Err(Error::shape(format!(
                "upstream shape {:?} does not match conv output [{b}, {m}, {oh}, {ow}]",
                upstream.shape()
            )));
        }
        let kk = c * s.kernel * s.kernel;
        let k = s.kernel;
        let n = oh * ow;
        let mut d_weights = Tensor::zeros(&self.spec.weight_shape());
        let mut d_input = Tensor::zeros(input.shape());
        let in_plane = h * w;
        let weights = self.weights.data();
        if s.stride == 1 {
            // Input gradient is a stride-1 convolution of the upstream with
            // channel-transposed, spatially flipped weights at complementary
            // padding.
            let mut wflip = vec![E::ZERO; kk * m];
            if need_input_grad {
                for oc in 0..m {
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                wflip[((ic * m + oc) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                                    weights[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
            let flip_pad = k - 1 - s.padding;
            let mut scratch = Vec::new();
            for img in 0..b {
                let x = &input.data()[img * c * in_plane..(img + 1) * c * in_plane];
                let dy = &upstream.data()[img * m * n..(img + 1) * m * n];
                conv_s1_dw(d_weights.data_mut(), x, dy, c, h, w, m, k, s.padding, oh, ow);
                if need_input_grad {
                    let dx = &mut d_input.data_mut()[img * c * in_plane..(img + 1) * c * in_plane];
                    conv_s1_direct(dx, dy, &wflip, m, oh, ow, c, k, flip_pad, h, w, &mut scratch);
                }
            }
        } else {
            let mut col = vec![E::ZERO; kk * n];
            let mut dcol = vec![E::ZERO; kk * n];
            // Transposed weights [K][M] let the input-gradient matmul reuse
            // the register-tiled forward kernel.
            let mut wt = vec![E::ZERO; kk * m];
            for mi in 0..m {
                for kb in 0..kk {
                    wt[kb * m + mi] = weights[mi * kk + kb];
                }
            }
            for img in 0..b {
                let x = &input.data()[img * c * in_plane..(img + 1) * c * in_plane];
                let dy = &upstream.data()[img * m * n..(img + 1) * m * n];
                im2col(x, s, h, w, oh, ow, &mut col);
                matmul_abt_acc(d_weights.data_mut(), dy, &col, m, kk, n);
                if need_input_grad {
                    // dcol = W^T * dy
                    matmul_kn(&mut dcol, &wt, dy, kk, m, n);
                    let dx =
                        &mut d_input.data_mut()[img * c * in_plane..(img + 1) * c * in_plane];
                    col2im(&dcol, s, h, w, oh, ow, dx);
                }
            }
        }
        Ok((d_input, d_weights))
    }

    /// Backward pass: gradients w.r.t. input and weights.
    pub fn backward(
        &self,
        input: &Tensor<E>,
        upstream: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        self.backward_opt(input, upstream, true)
    }
}

/// Scatter one image into the patch matrix: row k = (ic, ky, kx), column
/// n = oy * ow + ox.
fn im2col<E: Element>(
    x: &[E],
    s: &ConvSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    let n = oh * ow;
    let mut k = 0usize;
    for ic in 0..s.in_channels {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = &mut col[k * n..(k + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    let seg = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        seg.iter_mut().for_each(|v| *v = E::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in seg.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                k += 1;
            }
        }
    }
}

/// Reverse of [`im2col`]: accumulate patch-matrix gradients back into the
/// image, skipping padding cells. `dx` must be zeroed by the caller.
fn col2im<E: Element>(
    dcol: &[E],
    s: &ConvSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    let n = oh * ow;
    let mut k = 0usize;
    for ic in 0..s.in_channels {
        let plane = &mut dx[ic * h * w..(ic + 1) * h * w];
        for ky in 0..s.kernel {
            for kx in 0..s.kernel {
                let row = &dcol[k * n..(k + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

// Register-tile extents for the matmul kernels. Accumulators live in
// registers for the whole reduction; output memory is written exactly once.
const MT: usize = 4;
const NT: usize = 16;
const VL: usize = 8;

/// Direct stride-1 convolution of one image, no patch matrix.
///
/// `out[M][oh][ow]`, `x[C][h][w]`, `w[M][C][k][k]`. For each output row the
/// contributing input rows are copied once into a zero-padded scratch block,
/// after which a single register-blocked loop covers interior and border
/// columns alike. Accumulating a fused multiply-add whose multiplicand is an
/// exact padding zero leaves the accumulator bitwise unchanged, so every
/// output element still matches the bounds-checked naive oracle bitwise
/// (same ascending (ic, ky, kx) order).
///
/// `scratch` is caller-provided storage, zeroed at first use; the pad lanes
/// are never overwritten afterwards.
#[allow(clippy::too_many_arguments)]
fn conv_s1_direct<E: Element>(
    out: &mut [E],
    x: &[E],
    w: &[E],
    c: usize,
    h: usize,
    wdt: usize,
    m: usize,
    k: usize,
    p: usize,
    oh: usize,
    ow: usize,
    scratch: &mut Vec<E>,
) {
    debug_assert_eq!(oh, h + 2 * p + 1 - k);
    debug_assert_eq!(ow, wdt + 2 * p + 1 - k);
    debug_assert_eq!(out.len(), m * oh * ow);
    let kkc = c * k * k;
    // Row stride: left pad + data + right pad + tile slack.
    let rs = wdt + 2 * p + NT;
    let max_rows = c * k;
    if scratch.len() != max_rows * rs {
        scratch.clear();
        scratch.resize(max_rows * rs, E::ZERO);
    }
    // Weight offset (within one output channel) for each scratch row.
    let mut row_wbase = vec![0usize; max_rows];
    for oy in 0..oh {
        // Gather the valid (ic, ky) input rows for this output row.
        let mut rows = 0usize;
        for ic in 0..c {
            for ky in 0..k {
                let iy = (oy + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &x[(ic * h + iy as usize) * wdt..(ic * h + iy as usize + 1) * wdt];
                scratch[rows * rs + p..rows * rs + p + wdt].copy_from_slice(src);
                row_wbase[rows] = (ic * k + ky) * k;
                rows += 1;
            }
        }
        let mut oc = 0usize;
        while oc < m {
            let mt = (m - oc).min(MT);
            let mut ox = 0usize;
            while ox < ow {
                let nt = (ow - ox).min(NT);
                if mt == MT {
                    let mut acc = [[E::ZERO; NT]; MT];
                    for row in 0..rows {
                        let xs_row = &scratch[row * rs + ox..row * rs + ox + k - 1 + NT];
                        let wbase = row_wbase[row];
                        for kx in 0..k {
                            let xs = &xs_row[kx..kx + NT];
                            let c0 = w[oc * kkc + wbase + kx];
                            let c1 = w[(oc + 1) * kkc + wbase + kx];
                            let c2 = w[(oc + 2) * kkc + wbase + kx];
                            let c3 = w[(oc + 3) * kkc + wbase + kx];
                            for j in 0..NT {
                                let v = xs[j];
                                acc[0][j] = acc[0][j].madd(c0, v);
                                acc[1][j] = acc[1][j].madd(c1, v);
                                acc[2][j] = acc[2][j].madd(c2, v);
                                acc[3][j] = acc[3][j].madd(c3, v);
                            }
                        }
                    }
                    for (r, rowacc) in acc.iter().enumerate() {
                        let base = ((oc + r) * oh + oy) * ow + ox;
                        out[base..base + nt].copy_from_slice(&rowacc[..nt]);
                    }
                } else {
                    for r in 0..mt {
                        let mut acc = [E::ZERO; NT];
                        for row in 0..rows {
                            let xs_row = &scratch[row * rs + ox..row * rs + ox + k - 1 + NT];
                            let wbase = row_wbase[row];
                            for kx in 0..k {
                                let cw = w[(oc + r) * kkc + wbase + kx];
                                let xs = &xs_row[kx..kx + NT];
                                for j in 0..NT {
                                    acc[j] = acc[j].madd(cw, xs[j]);
                                }
                            }
                        }
                        let base = ((oc + r) * oh + oy) * ow + ox;
                        out[base..base + nt].copy_from_slice(&acc[..nt]);
                    }
                }
                ox += nt;
            }
            oc += mt;
        }
    }
}

/// Weight gradient of a stride-1 convolution for one image, accumulated:
/// `dw[oc][ic][ky][kx] += sum_{oy,ox} dy[oc][oy][ox] * x[ic][oy+ky-p][ox+kx-p]`.
#[allow(clippy::too_many_arguments)]
fn conv_s1_dw<E: Element>(
    dw: &mut [E],
    x: &[E],
    dy: &[E],
    c: usize,
    h: usize,
    wdt: usize,
    m: usize,
    k: usize,
    p: usize,
    oh: usize,
    ow: usize,
) {
    let kkc = c * k * k;
    let mut oc = 0usize;
    while oc < m {
        let mt = (m - oc).min(MT);
        for ic in 0..c {
            let xplane = &x[ic * h * wdt..(ic + 1) * h * wdt];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = [[E::ZERO; VL]; MT];
                    let mut tail = [E::ZERO; MT];
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wdt..(iy as usize + 1) * wdt];
                        // Valid ox: 0 <= ox + kx - p < wdt.
                        let ox0 = p.saturating_sub(kx);
                        let ox_end = ow.min((wdt + p).saturating_sub(kx));
                        if ox_end <= ox0 {
                            continue;
                        }
                        let xoff = (ox0 + kx) - p;
                        let span = ox_end - ox0;
                        let mut i = 0usize;
                        while i + VL <= span {
                            let xv = &xrow[xoff + i..xoff + i + VL];
                            for r in 0..mt {
                                let dyr = &dy[((oc + r) * oh + oy) * ow + ox0 + i
                                    ..((oc + r) * oh + oy) * ow + ox0 + i + VL];
                                for j in 0..VL {
                                    acc[r][j] = acc[r][j].madd(dyr[j], xv[j]);
                                }
                            }
                            i += VL;
                        }
                        while i < span {
                            let xv = xrow[xoff + i];
                            for r in 0..mt {
                                tail[r] =
                                    tail[r].madd(dy[((oc + r) * oh + oy) * ow + ox0 + i], xv);
                            }
                            i += 1;
                        }
                    }
                    for r in 0..mt {
                        let mut s = tail[r];
                        for j in 0..VL {
                            s += acc[r][j];
                        }
                        dw[(oc + r) * kkc + (ic * k + ky) * k + kx] += s;
                    }
                }
            }
        }
        oc += mt;
    }
}

/// `out[M][N] = a[M][K] * b[K][N]`, overwriting `out`.
///
/// Every output element accumulates strictly in ascending-k order with one
/// fused multiply-add per step, so the result is bitwise identical to a
/// direct-definition loop using the same order.
fn matmul_kn<E: Element>(out: &mut [E], a: &[E], b: &[E], m: usize, kk: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), kk * n);
    let mut mi = 0usize;
    while mi < m {
        let mt = (m - mi).min(MT);
        let mut nj = 0usize;
        while nj < n {
            let nt = (n - nj).min(NT);
            if mt == MT && nt == NT {
                let mut acc = [[E::ZERO; NT]; MT];
                let a0 = &a[mi * kk..(mi + 1) * kk];
                let a1 = &a[(mi + 1) * kk..(mi + 2) * kk];
                let a2 = &a[(mi + 2) * kk..(mi + 3) * kk];
                let a3 = &a[(mi + 3) * kk..(mi + 4) * kk];
                for k in 0..kk {
                    let bk = &b[k * n + nj..k * n + nj + NT];
                    let (c0, c1, c2, c3) = (a0[k], a1[k], a2[k], a3[k]);
                    for j in 0..NT {
                        let v = bk[j];
                        acc[0][j] = acc[0][j].madd(c0, v);
                        acc[1][j] = acc[1][j].madd(c1, v);
                        acc[2][j] = acc[2][j].madd(c2, v);
                        acc[3][j] = acc[3][j].madd(c3, v);
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(mi + r) * n + nj..(mi + r) * n + nj + NT].copy_from_slice(row);
                }
            } else {
                for r in 0..mt {
                    let mut acc = [E::ZERO; NT];
                    let ar = &a[(mi + r) * kk..(mi + r + 1) * kk];
                    for (k, &c) in ar.iter().enumerate() {
                        let bk = &b[k * n + nj..k * n + nj + nt];
                        for j in 0..nt {
                            acc[j] = acc[j].madd(c, bk[j]);
                        }
                    }
                    out[(mi + r) * n + nj..(mi + r) * n + nj + nt]
                        .copy_from_slice(&acc[..nt]);
                }
            }
            nj += nt;
        }
        mi += mt;
    }
}

/// `out[M][K] += a[M][N] * b[K][N]^T` (reduction over N in fixed-lane
/// partial sums; used for weight gradients).
fn matmul_abt_acc<E: Element>(out: &mut [E], a: &[E], b: &[E], m: usize, kk: usize, n: usize) {
    debug_assert_eq!(out.len(), m * kk);
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), kk * n);
    let mut mi = 0usize;
    while mi < m {
        let mt = (m - mi).min(MT);
        let mut ki = 0usize;
        while ki < kk {
            let kt = (kk - ki).min(MT);
            if mt == MT && kt == MT {
                let mut acc = [[[E::ZERO; VL]; MT]; MT];
                let mut i = 0usize;
                while i + VL <= n {
                    for r in 0..MT {
                        let av = &a[(mi + r) * n + i..(mi + r) * n + i + VL];
                        for c in 0..MT {
                            let bv = &b[(ki + c) * n + i..(ki + c) * n + i + VL];
                            for j in 0..VL {
                                acc[r][c][j] = acc[r][c][j].madd(av[j], bv[j]);
                            }
                        }
                    }
                    i += VL;
                }
                let mut tail = [[E::ZERO; MT]; MT];
                while i < n {
                    for r in 0..MT {
                        let av = a[(mi + r) * n + i];
                        for c in 0..MT {
                            tail[r][c] = tail[r][c].madd(av, b[(ki + c) * n + i]);
                        }
                    }
                    i += 1;
                }
                for r in 0..MT {
                    for c in 0..MT {
                        let mut s = tail[r][c];
                        for j in 0..VL {
                            s += acc[r][c][j];
                        }
                        out[(mi + r) * kk + ki + c] += s;
                    }
                }
            } else {
                for r in 0..mt {
                    for c in 0..kt {
                        let mut acc = [E::ZERO; VL];
                        let mut tail = E::ZERO;
                        let av = &a[(mi + r) * n..(mi + r) * n + n];
                        let bv = &b[(ki + c) * n..(ki + c) * n + n];
                        let mut i = 0usize;
                        while i + VL <= n {
                            for j in 0..VL {
                                acc[j] = acc[j].madd(av[i + j], bv[i + j]);
                            }
                            i += VL;
                        }
                        while i < n {
                            tail = tail.madd(av[i], bv[i]);
                            i += 1;
                        }
                        let mut s = tail;
                        for j in 0..VL {
                            s += acc[j];
                        }
                        out[(mi + r) * kk + ki + c] += s;
                    }
                }
            }
            ki += kt;
        }
        mi += mt;
    }
}
