//! Raw channels-last convolution kernels over flat slices.
//!
//! Weight layouts:
//! - dense and depthwise conv: `[k, k, cin/groups, cout]`, so a dense weight
//!   is directly the `(k·k·cin) × cout` matrix that multiplies im2col rows;
//! - stride-2 transposed conv: `[cin, 2, 2, cout]`, the `cin × 4·cout` matrix
//!   whose product with the input is scattered onto the 2×2 output blocks.

use super::ConvSpec;
use crate::tensor::Real;

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_size == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfolds `x` (H×W×C) into rows of `k·k·C` patch values, zero padded.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<T> {
    let (k, s, p, c) = (spec.kernel_size, spec.stride, spec.padding, spec.in_channels);
    let row_len = k * k * c;
    let mut cols = vec![T::zero(); oh * ow * row_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * c..][..c];
                    row[(ky * k + kx) * c..][..c].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(
    cols: &[T],
    gx: &mut [T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) {
    let (k, s, p, c) = (spec.kernel_size, spec.stride, spec.padding, spec.in_channels);
    let row_len = k * k * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = &mut gx[(iy as usize * w + ix as usize) * c..][..c];
                    for (d, &v) in dst.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn add_bias_rows<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

fn accumulate_column_sums<T: Real>(g: &[T], gb: &mut [T]) {
    for row in g.chunks_exact(gb.len()) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
}

/// Forward convolution. Returns the `oh×ow×cout` output.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    weight: &[T],
    bias: Option<&[T]>,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let cout = spec.out_channels;
    let mut out = vec![T::zero(); oh * ow * cout];
    if spec.is_depthwise() {
        depthwise_forward(x, h, w, spec, weight, &mut out, oh, ow);
    } else {
        let kdim = spec.kernel_size * spec.kernel_size * spec.in_channels;
        let owned;
        let cols: &[T] = if is_pointwise(spec) {
            x
        } else {
            owned = im2col(x, h, w, spec, oh, ow);
            &owned
        };
        T::gemm(
            oh * ow,
            kdim,
            cout,
            T::one(),
            cols,
            kdim,
            1,
            weight,
            cout,
            1,
            T::zero(),
            &mut out,
            cout,
            1,
        );
    }
    if let Some(b) = bias {
        add_bias_rows(&mut out, b);
    }
    out
}

/// Accumulates gradients of a convolution into whichever of `gx`, `gw`, `gb` are requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    weight: &[T],
    g: &[T],
    oh: usize,
    ow: usize,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(gb) = gb {
        accumulate_column_sums(g, gb);
    }
    if spec.is_depthwise() {
        depthwise_backward(x, h, w, spec, weight, g, oh, ow, gx, gw);
        return;
    }
    let cout = spec.out_channels;
    let kdim = spec.kernel_size * spec.kernel_size * spec.in_channels;
    let pointwise = is_pointwise(spec);
    if let Some(gw) = gw {
        let owned;
        let cols: &[T] = if pointwise {
            x
        } else {
            owned = im2col(x, h, w, spec, oh, ow);
            &owned
        };
        // gW (kdim×cout) += colsᵀ · g
        T::gemm(kdim, oh * ow, cout, T::one(), cols, 1, kdim, g, cout, 1, T::one(), gw, cout, 1);
    }
    if let Some(gx) = gx {
        if pointwise {
            T::gemm(oh * ow, cout, kdim, T::one(), g, cout, 1, weight, 1, cout, T::one(), gx, kdim, 1);
        } else {
            let mut dcols = vec![T::zero(); oh * ow * kdim];
            T::gemm(
                oh * ow,
                cout,
                kdim,
                T::one(),
                g,
                cout,
                1,
                weight,
                1,
                cout,
                T::zero(),
                &mut dcols,
                kdim,
                1,
            );
            col2im_add(&dcols, gx, h, w, spec, oh, ow);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    weight: &[T],
    out: &mut [T],
    oh: usize,
    ow: usize,
) {
    let (k, s, p, c) = (spec.kernel_size, spec.stride, spec.padding, spec.in_channels);
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * c..][..c];
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xi = &x[(iy as usize * w + ix as usize) * c..][..c];
                    let wk = &weight[(ky * k + kx) * c..][..c];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xi).zip(wk) {
                        *o = *o + xv * wv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    weight: &[T],
    g: &[T],
    oh: usize,
    ow: usize,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (k, s, p, c) = (spec.kernel_size, spec.stride, spec.padding, spec.in_channels);
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * c..][..c];
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * c;
                    let wbase = (ky * k + kx) * c;
                    if let Some(gx) = gx.as_deref_mut() {
                        let dst = &mut gx[base..][..c];
                        for ((d, &gv), &wv) in dst.iter_mut().zip(go).zip(&weight[wbase..][..c]) {
                            *d = *d + gv * wv;
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let dst = &mut gw[wbase..][..c];
                        for ((d, &gv), &xv) in dst.iter_mut().zip(go).zip(&x[base..][..c]) {
                            *d = *d + gv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 transposed convolution: `h×w×cin` → `2h×2w×cout`.
pub(crate) fn conv_transpose2x2_forward<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let n4 = 4 * cout;
    let mut tmp = vec![T::zero(); h * w * n4];
    T::gemm(h * w, cin, n4, T::one(), x, cin, 1, weight, n4, 1, T::zero(), &mut tmp, n4, 1);
    let ow = 2 * w;
    let mut out = vec![T::zero(); 4 * h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let src = &tmp[(y * w + xx) * n4..][..n4];
            for dy in 0..2 {
                for dx in 0..2 {
                    let dst = &mut out[((2 * y + dy) * ow + 2 * xx + dx) * cout..][..cout];
                    dst.copy_from_slice(&src[(dy * 2 + dx) * cout..][..cout]);
                }
            }
        }
    }
    if let Some(b) = bias {
        add_bias_rows(&mut out, b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2x2_backward<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    weight: &[T],
    g: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(gb) = gb {
        accumulate_column_sums(g, gb);
    }
    let n4 = 4 * cout;
    let ow = 2 * w;
    let mut gathered = vec![T::zero(); h * w * n4];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut gathered[(y * w + xx) * n4..][..n4];
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = &g[((2 * y + dy) * ow + 2 * xx + dx) * cout..][..cout];
                    dst[(dy * 2 + dx) * cout..][..cout].copy_from_slice(src);
                }
            }
        }
    }
    if let Some(gx) = gx {
        T::gemm(h * w, n4, cin, T::one(), &gathered, n4, 1, weight, 1, n4, T::one(), gx, cin, 1);
    }
    if let Some(gw) = gw {
        T::gemm(cin, h * w, n4, T::one(), x, 1, cin, &gathered, n4, 1, T::one(), gw, n4, 1);
    }
}
