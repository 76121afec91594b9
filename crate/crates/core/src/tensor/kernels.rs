//! Raw slice kernels behind the tape operations.
//!
//! Convolutions lower to im2col + GEMM one batch element at a time so the
//! GEMM output lands directly in `(C_out, frames, sites)` order.

use super::Scalar;

/// Safe wrapper over strided GEMM: `c ← alpha·a·b + beta·c`.
///
/// All strides must be non-negative and every addressed element must lie
/// inside its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    }
    // SAFETY: bounds of all three operands were checked above; strides are
    // non-negative and c does not alias a or b (distinct borrows).
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

fn beta<T: Scalar>(accumulate: bool) -> T {
    if accumulate {
        T::one()
    } else {
        T::zero()
    }
}

/// `c (+)= a·b` with `a: m×k`, `b: k×n`, all row-major.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    gemm(m, k, n, T::one(), a, (k, 1), b, (n, 1), beta(accumulate), c, (n, 1));
}

/// `c (+)= a·bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    gemm(m, k, n, T::one(), a, (k, 1), b, (1, k), beta(accumulate), c, (n, 1));
}

/// `c (+)= aᵀ·b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    gemm(m, k, n, T::one(), a, (1, m), b, (n, 1), beta(accumulate), c, (n, 1));
}

/// Geometry of a same-padded square-kernel spatial convolution applied to
/// every frame of a `(batch, c_in, frames, h, w)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl SpatialGeom {
    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }

    /// Columns of the per-sample im2col matrix.
    fn cols(&self) -> usize {
        self.frames * self.h * self.w
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.c_in * self.cols()
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.cols()
    }
}

fn spatial_im2col<T: Scalar>(x: &[T], g: &SpatialGeom, col: &mut [T]) {
    let (h, w, k, p, l) = (g.h as isize, g.w, g.k, g.pad() as isize, g.cols());
    for c in 0..g.c_in {
        for m in 0..k {
            for n in 0..k {
                let row = ((c * k + m) * k + n) * l;
                let dj = n as isize - p;
                for t in 0..g.frames {
                    for i in 0..g.h {
                        let dst = &mut col[row + (t * g.h + i) * w..][..w];
                        let si = i as isize + m as isize - p;
                        if si < 0 || si >= h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[((c * g.frames + t) * g.h + si as usize) * w..][..w];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let sj = j as isize + dj;
                            *d = if sj < 0 || sj >= w as isize { T::zero() } else { src[sj as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn spatial_col2im<T: Scalar>(col: &[T], g: &SpatialGeom, dx: &mut [T]) {
    let (h, w, k, p, l) = (g.h as isize, g.w, g.k, g.pad() as isize, g.cols());
    for c in 0..g.c_in {
        for m in 0..k {
            for n in 0..k {
                let row = ((c * k + m) * k + n) * l;
                let dj = n as isize - p;
                for t in 0..g.frames {
                    for i in 0..g.h {
                        let si = i as isize + m as isize - p;
                        if si < 0 || si >= h {
                            continue;
                        }
                        let src = &col[row + (t * g.h + i) * w..][..w];
                        let dst = &mut dx[((c * g.frames + t) * g.h + si as usize) * w..][..w];
                        for (j, &v) in src.iter().enumerate() {
                            let sj = j as isize + dj;
                            if sj >= 0 && sj < w as isize {
                                dst[sj as usize] = dst[sj as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[b,o,t,i,j] = bias[o] + Σ k[o,c,m,n]·x_pad[b,c,t,i+m,j+n]`.
pub fn spatial_conv_forward<T: Scalar>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &SpatialGeom) -> Vec<T> {
    let (rows, l) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.out_len()];
    let mut col = vec![T::zero(); rows * l];
    for b in 0..g.batch {
        spatial_im2col(&x[b * g.c_in * l..][..g.c_in * l], g, &mut col);
        let y = &mut out[b * g.c_out * l..][..g.c_out * l];
        if let Some(bias) = bias {
            for (o, chunk) in y.chunks_mut(l).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        gemm_nn(g.c_out, rows, l, kernel, &col, y, bias.is_some());
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub fn spatial_conv_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &SpatialGeom,
    (need_dx, need_dk, need_db): (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, l) = (g.rows(), g.cols());
    let mut dx = need_dx.then(|| vec![T::zero(); g.in_len()]);
    let mut dk = need_dk.then(|| vec![T::zero(); g.c_out * rows]);
    let mut col = vec![T::zero(); rows * l];
    for b in 0..g.batch {
        let dy_b = &dy[b * g.c_out * l..][..g.c_out * l];
        if let Some(dk) = dk.as_mut() {
            spatial_im2col(&x[b * g.c_in * l..][..g.c_in * l], g, &mut col);
            gemm_nt(g.c_out, l, rows, dy_b, &col, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm_tn(rows, g.c_out, l, kernel, dy_b, &mut col, false);
            spatial_col2im(&col, g, &mut dx[b * g.c_in * l..][..g.c_in * l]);
        }
    }
    let dbias = need_db.then(|| channel_sums(dy, g.batch, g.c_out, l));
    ConvGrads { dx, dkernel: dk, dbias }
}

/// Per-channel sums of a `(batch, channels, len)` buffer.
pub fn channel_sums<T: Scalar>(x: &[T], batch: usize, channels: usize, len: usize) -> Vec<T> {
    let mut s = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in s.iter_mut().enumerate() {
            *acc = *acc + x[(b * channels + c) * len..][..len].iter().copied().sum::<T>();
        }
    }
    s
}

/// Geometry of a zero-padded 1-D convolution along frames, applied
/// independently at every site of a `(batch, c_in, frames, sites)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub frames: usize,
    pub sites: usize,
    pub kt: usize,
    pub stride: usize,
}

impl TemporalGeom {
    pub fn out_frames(&self) -> usize {
        self.frames.div_ceil(self.stride)
    }

    fn rows(&self) -> usize {
        self.c_in * self.kt
    }

    fn cols(&self) -> usize {
        self.out_frames() * self.sites
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.c_in * self.frames * self.sites
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.cols()
    }
}

fn temporal_im2col<T: Scalar>(x: &[T], g: &TemporalGeom, col: &mut [T]) {
    let (s, l, pad) = (g.sites, g.cols(), (g.kt - 1) / 2);
    for c in 0..g.c_in {
        for q in 0..g.kt {
            let row = (c * g.kt + q) * l;
            for to in 0..g.out_frames() {
                let dst = &mut col[row + to * s..][..s];
                let st = (to * g.stride + q) as isize - pad as isize;
                if st < 0 || st >= g.frames as isize {
                    dst.fill(T::zero());
                } else {
                    dst.copy_from_slice(&x[(c * g.frames + st as usize) * s..][..s]);
                }
            }
        }
    }
}

fn temporal_col2im<T: Scalar>(col: &[T], g: &TemporalGeom, dx: &mut [T]) {
    let (s, l, pad) = (g.sites, g.cols(), (g.kt - 1) / 2);
    for c in 0..g.c_in {
        for q in 0..g.kt {
            let row = (c * g.kt + q) * l;
            for to in 0..g.out_frames() {
                let st = (to * g.stride + q) as isize - pad as isize;
                if st < 0 || st >= g.frames as isize {
                    continue;
                }
                let src = &col[row + to * s..][..s];
                let dst = &mut dx[(c * g.frames + st as usize) * s..][..s];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
    }
}

pub fn temporal_conv_forward<T: Scalar>(x: &[T], kernel: &[T], g: &TemporalGeom) -> Vec<T> {
    let (rows, l, lin) = (g.rows(), g.cols(), g.frames * g.sites);
    let mut out = vec![T::zero(); g.out_len()];
    let mut col = vec![T::zero(); rows * l];
    for b in 0..g.batch {
        temporal_im2col(&x[b * g.c_in * lin..][..g.c_in * lin], g, &mut col);
        gemm_nn(g.c_out, rows, l, kernel, &col, &mut out[b * g.c_out * l..][..g.c_out * l], false);
    }
    out
}

pub fn temporal_conv_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &TemporalGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, l, lin) = (g.rows(), g.cols(), g.frames * g.sites);
    let mut dx = need_dx.then(|| vec![T::zero(); g.in_len()]);
    let mut dk = need_dk.then(|| vec![T::zero(); g.c_out * rows]);
    let mut col = vec![T::zero(); rows * l];
    for b in 0..g.batch {
        let dy_b = &dy[b * g.c_out * l..][..g.c_out * l];
        if let Some(dk) = dk.as_mut() {
            temporal_im2col(&x[b * g.c_in * lin..][..g.c_in * lin], g, &mut col);
            gemm_nt(g.c_out, l, rows, dy_b, &col, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm_tn(rows, g.c_out, l, kernel, dy_b, &mut col, false);
            temporal_col2im(&col, g, &mut dx[b * g.c_in * lin..][..g.c_in * lin]);
        }
    }
    (dx, dk)
}

/// Geometry of the node-specific graph convolution on `(batch, c_in, frames, nodes)`.
/// Weights are laid out `(c_out, nodes, nodes, c_in)`: `w[o, i, j, :]` is the
/// vector node `i` applies to neighbor `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub frames: usize,
    pub nodes: usize,
}

impl GraphGeom {
    fn w_index(&self, o: usize, i: usize, j: usize, c: usize) -> usize {
        ((o * self.nodes + i) * self.nodes + j) * self.c_in + c
    }

    fn x_index(&self, b: usize, c: usize, t: usize, j: usize) -> usize {
        ((b * self.c_in + c) * self.frames + t) * self.nodes + j
    }

    fn y_index(&self, b: usize, o: usize, t: usize, i: usize) -> usize {
        ((b * self.c_out + o) * self.frames + t) * self.nodes + i
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.frames * self.nodes
    }
}

pub fn graph_conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    neighbors: &[Vec<usize>],
    g: &GraphGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_len()];
    let mut acc = vec![T::zero(); g.frames];
    for b in 0..g.batch {
        for (i, nb) in neighbors.iter().enumerate() {
            for o in 0..g.c_out {
                acc.fill(bias.map_or(T::zero(), |bias| bias[o]));
                for &j in nb {
                    for c in 0..g.c_in {
                        let wv = w[g.w_index(o, i, j, c)];
                        for (t, a) in acc.iter_mut().enumerate() {
                            *a = *a + wv * x[g.x_index(b, c, t, j)];
                        }
                    }
                }
                for (t, &a) in acc.iter().enumerate() {
                    out[g.y_index(b, o, t, i)] = a;
                }
            }
        }
    }
    out
}

pub fn graph_conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    neighbors: &[Vec<usize>],
    g: &GraphGeom,
    (need_dx, need_dw, need_db): (bool, bool, bool),
) -> ConvGrads<T> {
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for b in 0..g.batch {
        for (i, nb) in neighbors.iter().enumerate() {
            for o in 0..g.c_out {
                for &j in nb {
                    for c in 0..g.c_in {
                        let wi = g.w_index(o, i, j, c);
                        let mut dwv = T::zero();
                        for t in 0..g.frames {
                            let gy = dy[g.y_index(b, o, t, i)];
                            let xi = g.x_index(b, c, t, j);
                            dwv = dwv + gy * x[xi];
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] = dx[xi] + gy * w[wi];
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wi] = dw[wi] + dwv;
                        }
                    }
                }
            }
        }
    }
    let dbias = need_db.then(|| channel_sums(dy, g.batch, g.c_out, g.frames * g.nodes));
    ConvGrads { dx, dkernel: dw, dbias }
}
