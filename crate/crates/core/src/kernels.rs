//! Dense compute kernels backing the autodiff graph.
//!
//! Every kernel parallelizes over independent output slices only (one thread
//! owns one output plane or row), so results are bitwise identical regardless
//! of thread count. Scalar reductions stay sequential for the same reason.
//!
//! The `_seq` variants are always compiled and serve as the reference path
//! for the benchmark suite; the unsuffixed entry points dispatch to the rayon
//! implementation when the `parallel` feature (default) is enabled.

/// Runs `f(i, chunk)` over consecutive `chunk_len` slices of `out`.
pub(crate) trait Runner {
    fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send;
}

pub(crate) struct Seq;

impl Runner for Seq {
    fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
    }
}

#[cfg(feature = "parallel")]
pub(crate) struct Par;

#[cfg(feature = "parallel")]
impl Runner for Par {
    fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}

#[cfg(feature = "parallel")]
pub(crate) type Default = Par;
#[cfg(not(feature = "parallel"))]
pub(crate) type Default = Seq;

/// Output spatial size of a convolution along one axis.
#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Valid output range `lo..hi` such that `o*stride + k - pad` lands in `0..input`.
#[inline]
fn valid_range(out_len: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let max_i = input + pad;
    if max_i <= k {
        return (0, 0);
    }
    let hi = ((max_i - 1 - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn conv2d_fwd_with<R: Runner>(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    assert_eq!(x.len(), c_in * h * w);
    assert_eq!(weight.len(), c_out * c_in * k * k);
    assert_eq!(out.len(), c_out * ho * wo);

    R::for_each_chunk(out, ho * wo, |o, plane| {
        let init = bias.map_or(0.0, |b| b[o]);
        plane.fill(init);
        for c in 0..c_in {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * c_in + c) * k + ky) * k + kx];
                    let (lo, hi) = valid_range(wo, w, kx, stride, pad);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xr = &xc[iy as usize * w..(iy as usize + 1) * w];
                        let yr = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in lo..hi {
                                yr[ox] += wv * xr[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in lo..hi {
                                yr[ox] += wv * xr[(ox * stride + kx) - pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_bwd_input_with<R: Runner>(
    dy: &[f64],
    (c_out, ho, wo): (usize, usize, usize),
    weight: &[f64],
    (c_in, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    assert_eq!(dx.len(), c_in * h * w);
    R::for_each_chunk(dx, h * w, |c, plane| {
        plane.fill(0.0);
        for o in 0..c_out {
            let dyo = &dy[o * ho * wo..(o + 1) * ho * wo];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((o * c_in + c) * k + ky) * k + kx];
                    let (lo, hi) = valid_range(wo, w, kx, stride, pad);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dr = &dyo[oy * wo..(oy + 1) * wo];
                        let xr = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in lo..hi {
                            xr[(ox * stride + kx) - pad] += wv * dr[ox];
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_bwd_weight_with<R: Runner>(
    dy: &[f64],
    (c_out, ho, wo): (usize, usize, usize),
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    assert_eq!(dw.len(), c_out * c_in * k * k);
    R::for_each_chunk(dw, c_in * k * k, |o, wchunk| {
        wchunk.fill(0.0);
        let dyo = &dy[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..c_in {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    let (lo, hi) = valid_range(wo, w, kx, stride, pad);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dr = &dyo[oy * wo..(oy + 1) * wo];
                        let xr = &xc[iy as usize * w..(iy as usize + 1) * w];
                        for ox in lo..hi {
                            acc += dr[ox] * xr[(ox * stride + kx) - pad];
                        }
                    }
                    wchunk[(c * k + ky) * k + kx] = acc;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// transposed conv2d
// ---------------------------------------------------------------------------
//
// Weight layout is (c_in, c_out, k, k). The output size is supplied by the
// caller; indices that scatter past it are cropped, which realizes the usual
// output-padding choices in one mechanism.

fn convt2d_fwd_with<R: Runner>(
    x: &[f64],
    (c_in, hi, wi): (usize, usize, usize),
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    out: &mut [f64],
) {
    assert_eq!(x.len(), c_in * hi * wi);
    assert_eq!(weight.len(), c_in * c_out * k * k);
    assert_eq!(out.len(), c_out * ho * wo);

    R::for_each_chunk(out, ho * wo, |o, plane| {
        let init = bias.map_or(0.0, |b| b[o]);
        plane.fill(init);
        for c in 0..c_in {
            let xc = &x[c * hi * wi..(c + 1) * hi * wi];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((c * c_out + o) * k + ky) * k + kx];
                    let (lo, hi_x) = valid_range(wi, wo, kx, stride, pad);
                    for iy in 0..hi {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let xr = &xc[iy * wi..(iy + 1) * wi];
                        let yr = &mut plane[oy as usize * wo..(oy as usize + 1) * wo];
                        for ix in lo..hi_x {
                            yr[(ix * stride + kx) - pad] += wv * xr[ix];
                        }
                    }
                }
            }
        }
    });
}

fn convt2d_bwd_input_with<R: Runner>(
    dy: &[f64],
    (c_out, ho, wo): (usize, usize, usize),
    weight: &[f64],
    (c_in, hi, wi): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    assert_eq!(dx.len(), c_in * hi * wi);
    R::for_each_chunk(dx, hi * wi, |c, plane| {
        plane.fill(0.0);
        for o in 0..c_out {
            let dyo = &dy[o * ho * wo..(o + 1) * ho * wo];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[((c * c_out + o) * k + ky) * k + kx];
                    let (lo, hi_x) = valid_range(wi, wo, kx, stride, pad);
                    for iy in 0..hi {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let dr = &dyo[oy as usize * wo..(oy as usize + 1) * wo];
                        let xr = &mut plane[iy * wi..(iy + 1) * wi];
                        for ix in lo..hi_x {
                            xr[ix] += wv * dr[(ix * stride + kx) - pad];
                        }
                    }
                }
            }
        }
    });
}

fn convt2d_bwd_weight_with<R: Runner>(
    dy: &[f64],
    (c_out, ho, wo): (usize, usize, usize),
    x: &[f64],
    (c_in, hi, wi): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    assert_eq!(dw.len(), c_in * c_out * k * k);
    R::for_each_chunk(dw, c_out * k * k, |c, wchunk| {
        wchunk.fill(0.0);
        let xc = &x[c * hi * wi..(c + 1) * hi * wi];
        for o in 0..c_out {
            let dyo = &dy[o * ho * wo..(o + 1) * ho * wo];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    let (lo, hi_x) = valid_range(wi, wo, kx, stride, pad);
                    for iy in 0..hi {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let dr = &dyo[oy as usize * wo..(oy as usize + 1) * wo];
                        let xr = &xc[iy * wi..(iy + 1) * wi];
                        for ix in lo..hi_x {
                            acc += xr[ix] * dr[(ix * stride + kx) - pad];
                        }
                    }
                    wchunk[(o * k + ky) * k + kx] = acc;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// `y = a @ b` with `a: (m,k)`, `b: (k,n)`.
fn matmul_nn_with<R: Runner>(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, y: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(y.len(), m * n);
    R::for_each_chunk(y, n, |i, row| {
        row.fill(0.0);
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (yv, &bv) in row.iter_mut().zip(br) {
                *yv += av * bv;
            }
        }
    });
}

/// `y = a @ b^T` with `a: (m,k)`, `b: (n,k)`.
fn matmul_nt_with<R: Runner>(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, y: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(y.len(), m * n);
    R::for_each_chunk(y, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, yv) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *yv = ar.iter().zip(br).map(|(&x, &z)| x * z).sum();
        }
    });
}

/// `y = a^T @ b` with `a: (m,k)`, `b: (m,n)`, output `(k,n)`.
fn matmul_tn_with<R: Runner>(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, y: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(y.len(), k * n);
    R::for_each_chunk(y, n, |kk, row| {
        row.fill(0.0);
        for i in 0..m {
            let av = a[i * k + kk];
            let br = &b[i * n..(i + 1) * n];
            for (yv, &bv) in row.iter_mut().zip(br) {
                *yv += av * bv;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// softmax over rows
// ---------------------------------------------------------------------------

fn softmax_rows_with<R: Runner>(x: &[f64], m: usize, n: usize, y: &mut [f64]) {
    assert_eq!(x.len(), m * n);
    assert_eq!(y.len(), m * n);
    R::for_each_chunk(y, n, |i, row| {
        let xr = &x[i * n..(i + 1) * n];
        let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (yv, &xv) in row.iter_mut().zip(xr) {
            let e = (xv - mx).exp();
            *yv = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for yv in row.iter_mut() {
            *yv *= inv;
        }
    });
}

/// Backward of row softmax: `dx = y * (dy - <dy, y>)` per row.
fn softmax_rows_bwd_with<R: Runner>(y: &[f64], dy: &[f64], m: usize, n: usize, dx: &mut [f64]) {
    assert_eq!(y.len(), m * n);
    assert_eq!(dy.len(), m * n);
    assert_eq!(dx.len(), m * n);
    R::for_each_chunk(dx, n, |i, row| {
        let yr = &y[i * n..(i + 1) * n];
        let dr = &dy[i * n..(i + 1) * n];
        let dot: f64 = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for ((xv, &yv), &dv) in row.iter_mut().zip(yr).zip(dr) {
            *xv = yv * (dv - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// public dispatch + sequential reference entry points
// ---------------------------------------------------------------------------

macro_rules! dispatch {
    ($(#[$meta:meta])* $name:ident / $seq_name:ident = $impl_fn:ident ( $($arg:ident : $ty:ty),* $(,)? )) => {
        $(#[$meta])*
        pub fn $name($($arg: $ty),*) {
            $impl_fn::<Default>($($arg),*)
        }
        #[doc = "Sequential reference path (benchmark baseline)."]
        pub fn $seq_name($($arg: $ty),*) {
            $impl_fn::<Seq>($($arg),*)
        }
    };
}

dispatch!(
    /// 2-D convolution forward, `x: (c_in,h,w)`, `weight: (c_out,c_in,k,k)`.
    conv2d_fwd / conv2d_fwd_seq = conv2d_fwd_with(
        x: &[f64], x_dims: (usize, usize, usize), weight: &[f64], bias: Option<&[f64]>,
        c_out: usize, k: usize, stride: usize, pad: usize, out: &mut [f64],
    )
);
dispatch!(
    conv2d_bwd_input / conv2d_bwd_input_seq = conv2d_bwd_input_with(
        dy: &[f64], dy_dims: (usize, usize, usize), weight: &[f64],
        x_dims: (usize, usize, usize), k: usize, stride: usize, pad: usize, dx: &mut [f64],
    )
);
dispatch!(
    conv2d_bwd_weight / conv2d_bwd_weight_seq = conv2d_bwd_weight_with(
        dy: &[f64], dy_dims: (usize, usize, usize), x: &[f64],
        x_dims: (usize, usize, usize), k: usize, stride: usize, pad: usize, dw: &mut [f64],
    )
);
dispatch!(
    /// Transposed 2-D convolution forward, `weight: (c_in,c_out,k,k)`.
    convt2d_fwd / convt2d_fwd_seq = convt2d_fwd_with(
        x: &[f64], x_dims: (usize, usize, usize), weight: &[f64], bias: Option<&[f64]>,
        c_out: usize, k: usize, stride: usize, pad: usize, out_hw: (usize, usize), out: &mut [f64],
    )
);
dispatch!(
    convt2d_bwd_input / convt2d_bwd_input_seq = convt2d_bwd_input_with(
        dy: &[f64], dy_dims: (usize, usize, usize), weight: &[f64],
        x_dims: (usize, usize, usize), k: usize, stride: usize, pad: usize, dx: &mut [f64],
    )
);
dispatch!(
    convt2d_bwd_weight / convt2d_bwd_weight_seq = convt2d_bwd_weight_with(
        dy: &[f64], dy_dims: (usize, usize, usize), x: &[f64],
        x_dims: (usize, usize, usize), k: usize, stride: usize, pad: usize, dw: &mut [f64],
    )
);
dispatch!(
    matmul_nn / matmul_nn_seq = matmul_nn_with(
        a: &[f64], b: &[f64], m: usize, k: usize, n: usize, y: &mut [f64],
    )
);
dispatch!(
    matmul_nt / matmul_nt_seq = matmul_nt_with(
        a: &[f64], b: &[f64], m: usize, k: usize, n: usize, y: &mut [f64],
    )
);
dispatch!(
    matmul_tn / matmul_tn_seq = matmul_tn_with(
        a: &[f64], b: &[f64], m: usize, k: usize, n: usize, y: &mut [f64],
    )
);
dispatch!(
    softmax_rows / softmax_rows_seq = softmax_rows_with(
        x: &[f64], m: usize, n: usize, y: &mut [f64],
    )
);
dispatch!(
    softmax_rows_bwd / softmax_rows_bwd_seq = softmax_rows_bwd_with(
        y: &[f64], dy: &[f64], m: usize, n: usize, dx: &mut [f64],
    )
);
