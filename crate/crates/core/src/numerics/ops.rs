//! Forward kernels and their adjoints.
//!
//! Every differentiable tape operation calls into this module for its forward
//! value, so replaying a tape and running the op directly share one code path.

use super::Array;
use crate::error::{Error, Result};

/// Additive mask value for excluded positions.
pub const MASK_NEG: f64 = f64::MIN;

#[inline]
pub fn is_masked(v: f64) -> bool {
    v <= MASK_NEG / 2.0
}

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Strides(isize, isize);

impl Strides {
    fn rows(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// The transpose of a row-major `rows × _` buffer.
    fn transposed(cols: usize) -> Self {
        Strides(1, cols as isize)
    }
}

/// `c += a · b` for `m×k` by `k×n` operands with arbitrary strides and a
/// row-major `c`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: Strides, b: &[f64], sb: Strides, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass buffers holding the full `m×k`, `k×n` and
    // `m×n` extents under the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), Strides::rows(k), b.data(), Strides::rows(n), &mut out);
    Ok(Array::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Array) -> Result<Array> {
    let (r, c) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Array::from_parts(vec![c, r], out))
}

struct AxisLayout {
    outer: usize,
    n: usize,
    inner: usize,
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<AxisLayout> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(AxisLayout {
        outer: shape[..axis].iter().product(),
        n: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    })
}

/// Resolves the mask value applying to flat position `flat` whose index along
/// the softmax axis is `i`.
fn mask_at(mask: Option<&Array>, flat: usize, i: usize) -> f64 {
    match mask {
        None => 0.0,
        Some(m) if m.ndim() == 1 => m.data()[i],
        Some(m) => m.data()[flat],
    }
}

fn check_mask(x: &Array, axis: usize, mask: Option<&Array>) -> Result<()> {
    if let Some(m) = mask {
        let along = m.ndim() == 1 && m.len() == x.shape()[axis];
        if !along && m.shape() != x.shape() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Softmax along `axis` with an optional additive mask of `{0, MASK_NEG}`
/// (negative infinity is accepted too). Masked positions come out as exact
/// zeros. The mask is either the full shape of `x` or 1-D along `axis`.
pub fn masked_softmax(x: &Array, axis: usize, mask: Option<&Array>) -> Result<Array> {
    let AxisLayout { outer, n, inner } = axis_layout(x.shape(), axis)?;
    check_mask(x, axis, mask)?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let mut max = f64::NEG_INFINITY;
            let mut open = false;
            for i in 0..n {
                let m = mask_at(mask, idx(i), i);
                if !is_masked(m) {
                    max = max.max(xd[idx(i)] + m);
                    open = true;
                }
            }
            if !open {
                return Err(Error::DegenerateMask);
            }
            let mut total = 0.0;
            for i in 0..n {
                let m = mask_at(mask, idx(i), i);
                if !is_masked(m) {
                    let e = (xd[idx(i)] + m - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
            }
            for i in 0..n {
                out[idx(i)] /= total;
            }
        }
    }
    Ok(Array::from_parts(x.shape().to_vec(), out))
}

/// Adjoint of softmax given its output `y` and upstream gradient `dy`.
pub(crate) fn softmax_backward(y: &Array, dy: &Array, axis: usize) -> Result<Array> {
    let AxisLayout { outer, n, inner } = axis_layout(y.shape(), axis)?;
    let (yd, gd) = (y.data(), dy.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let dot: f64 = (0..n).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
            for i in 0..n {
                out[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
            }
        }
    }
    Ok(Array::from_parts(y.shape().to_vec(), out))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geometry(input: &Array, kernel: &Array, stride: usize, pad: usize) -> Result<ConvGeometry> {
    let (cin, h, w) = input.dims3()?;
    let (cout, kcin, kh, kw) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d kernel must be 4-D, got {:?}",
                kernel.shape()
            )))
        }
    };
    if kcin != cin {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be positive".into()));
    }
    let k = kh;
    let span_h = (h + 2 * pad).checked_sub(k);
    let span_w = (w + 2 * pad).checked_sub(k);
    let (sh, sw) = match (span_h, span_w) {
        (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d output extent not integral: input {h}x{w}, k={k}, stride={stride}, pad={pad}"
            )))
        }
    };
    Ok(ConvGeometry {
        cin,
        h,
        w,
        cout,
        k,
        stride,
        pad,
        oh: sh / stride + 1,
        ow: sw / stride + 1,
    })
}

/// Unfolds the input into a `(cin·k·k) × (oh·ow)` patch matrix.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.cin * g.k * g.k * p];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            row[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

/// Zero-padded cross-correlation.
pub fn conv2d(input: &Array, kernel: &Array, stride: usize, pad: usize) -> Result<Array> {
    let g = conv_geometry(input, kernel, stride, pad)?;
    let (r, p) = (g.cin * g.k * g.k, g.oh * g.ow);
    let unfolded;
    let cols = if is_pointwise(&g) {
        input.data()
    } else {
        unfolded = im2col(input.data(), &g);
        &unfolded
    };
    let mut out = vec![0.0; g.cout * p];
    gemm(g.cout, r, p, kernel.data(), Strides::rows(r), cols, Strides::rows(p), &mut out);
    Ok(Array::from_parts(vec![g.cout, g.oh, g.ow], out))
}

/// Gradients of `conv2d` with respect to input and kernel.
pub(crate) fn conv2d_backward(
    input: &Array,
    kernel: &Array,
    stride: usize,
    pad: usize,
    dy: &Array,
) -> Result<(Array, Array)> {
    let g = conv_geometry(input, kernel, stride, pad)?;
    let (r, p) = (g.cin * g.k * g.k, g.oh * g.ow);
    let unfolded;
    let cols = if is_pointwise(&g) {
        input.data()
    } else {
        unfolded = im2col(input.data(), &g);
        &unfolded
    };
    let mut dk = vec![0.0; g.cout * r];
    gemm(g.cout, p, r, dy.data(), Strides::rows(p), cols, Strides::transposed(p), &mut dk);
    let mut dcols = vec![0.0; r * p];
    gemm(r, g.cout, p, kernel.data(), Strides::transposed(r), dy.data(), Strides::rows(p), &mut dcols);
    let dx = if is_pointwise(&g) { dcols } else { col2im(&dcols, &g) };
    Ok((
        Array::from_parts(input.shape().to_vec(), dx),
        Array::from_parts(kernel.shape().to_vec(), dk),
    ))
}

/// Per-channel mean of a `C×H×W` map, returned as `C×1×1`.
pub fn global_avg_pool(x: &Array) -> Result<Array> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let out = (0..c)
        .map(|ch| x.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Array::from_parts(vec![c, 1, 1], out))
}

/// Two-tap interpolation table for one axis (align-corners false, border clamped).
fn interp_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 2 || factor == 4 {
        Ok(())
    } else {
        Err(Error::Config(format!("upsample factor must be 2 or 4, got {factor}")))
    }
}

/// Bilinear upsampling with half-pixel sample centers.
pub fn bilinear_upsample(x: &Array, factor: usize) -> Result<Array> {
    check_factor(factor)?;
    let (c, h, w) = x.dims3()?;
    let (ty, tx) = (interp_taps(h, factor), interp_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Array::from_parts(vec![c, oh, ow], out))
}

pub(crate) fn bilinear_upsample_backward(shape: &[usize], factor: usize, dy: &Array) -> Result<Array> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ty, tx) = (interp_taps(h, factor), interp_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let gd = dy.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = gd[(ch * oh + oy) * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Ok(Array::from_parts(shape.to_vec(), dx))
}

/// Normalizes each row of the trailing axis to zero mean and unit variance.
pub fn layer_norm_rows(x: &Array, eps: f64) -> Array {
    let cols = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Array::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn layer_norm_backward(x: &Array, y: &Array, dy: &Array, eps: f64) -> Array {
    let cols = *x.shape().last().unwrap();
    let n = cols as f64;
    let mut out = Vec::with_capacity(x.len());
    for ((xr, yr), gr) in x
        .data()
        .chunks(cols)
        .zip(y.data().chunks(cols))
        .zip(dy.data().chunks(cols))
    {
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let gmean = gr.iter().sum::<f64>() / n;
        let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
        out.extend(gr.iter().zip(yr).map(|(g, y)| inv * (g - gmean - y * gy)));
    }
    Array::from_parts(x.shape().to_vec(), out)
}

/// Concatenation along the leading axis.
pub fn concat0(parts: &[&Array]) -> Result<Array> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero arrays".into()))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::Dimension {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Ok(Array::from_parts(shape, data))
}

/// Rows `start..end` of the leading axis.
pub fn slice0(x: &Array, start: usize, end: usize) -> Result<Array> {
    let lead = x.shape()[0];
    if start >= end || end > lead {
        return Err(Error::Shape(format!(
            "slice {start}..{end} out of range for leading extent {lead}"
        )));
    }
    let stride = x.len() / lead;
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Ok(Array::from_parts(shape, x.data()[start * stride..end * stride].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn triple_loop(a: &Array, b: &Array) -> Array {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        Array::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum()
        })
    }

    fn sliding_window(x: &Array, k: &Array, stride: usize, pad: usize) -> Array {
        let (cin, h, w) = x.dims3().unwrap();
        let (cout, ks) = (k.shape()[0], k.shape()[2]);
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        Array::from_fn(&[cout, oh, ow], |idx| {
            let (co, oy, ox) = (idx / (oh * ow), (idx / ow) % oh, idx % ow);
            let mut s = 0.0;
            for ci in 0..cin {
                for a in 0..ks {
                    for b in 0..ks {
                        let iy = (oy * stride + a) as isize - pad as isize;
                        let ix = (ox * stride + b) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += x.at(&[ci, iy as usize, ix as usize]) * k.at(&[co, ci, a, b]);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let b = arr(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&Array::eye(3), &b).unwrap(), b);
        let p = matmul(&arr(&[1, 1], &[2.0]), &arr(&[1, 1], &[3.0])).unwrap();
        assert_eq!(p.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let b = Array::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Array::zeros(&[2, 3]), &Array::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let y = masked_softmax(&arr(&[3], &[5.0, 5.0, 5.0]), 0, None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = masked_softmax(&arr(&[2], &[0.0, 3f64.ln()]), 0, None).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);

        let mask = arr(&[3], &[0.0, MASK_NEG, 0.0]);
        let y = masked_softmax(&arr(&[3], &[1.0, 2.0, 3.0]), 0, Some(&mask)).unwrap();
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        assert!((y.data()[0] - e1 / (e1 + e3)).abs() < 1e-15);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[2] - e3 / (e1 + e3)).abs() < 1e-15);
    }

    #[test]
    fn softmax_accepts_negative_infinity_and_rejects_full_mask() {
        let mask = arr(&[2], &[f64::NEG_INFINITY, 0.0]);
        let y = masked_softmax(&arr(&[2], &[7.0, -2.0]), 0, Some(&mask)).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
        let all = arr(&[2], &[MASK_NEG, MASK_NEG]);
        assert!(matches!(
            masked_softmax(&arr(&[2], &[1.0, 1.0]), 0, Some(&all)),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = masked_softmax(&x, 0, None).unwrap();
        for j in 0..3 {
            let s = y.at(&[0, j]) + y.at(&[1, j]);
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.at(&[1, j]) > y.at(&[0, j]));
        }
    }

    #[test]
    fn conv_identity_and_constant() {
        let x = Array::from_fn(&[1, 4, 4], |i| i as f64);
        let one = Array::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &one, 1, 0).unwrap(), x);

        let c = Array::full(&[1, 5, 5], 2.5);
        let ones = Array::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&c, &ones, 1, 1).unwrap();
        assert!((y.at(&[0, 2, 2]) - 9.0 * 2.5).abs() < 1e-15);
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
        let k = Array::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
        for (stride, pad) in [(1, 1), (1, 0), (1, 2)] {
            let got = conv2d(&x, &k, stride, pad).unwrap();
            assert!(got.max_abs_diff(&sliding_window(&x, &k, stride, pad)) <= 1e-12);
        }
    }

    #[test]
    fn conv_rejects_non_integral_extent_and_even_kernel() {
        let x = Array::zeros(&[1, 6, 6]);
        assert!(conv2d(&x, &Array::zeros(&[1, 1, 3, 3]), 2, 0).is_err());
        assert!(conv2d(&x, &Array::zeros(&[1, 1, 2, 2]), 1, 0).is_err());
    }

    #[test]
    fn pooling_examples() {
        let c = Array::full(&[2, 3, 3], 4.0);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[4.0, 4.0]);
        let single = arr(&[3, 1, 1], &[1.0, -2.0, 3.0]);
        assert_eq!(global_avg_pool(&single).unwrap().data(), single.data());
    }

    #[test]
    fn upsample_examples() {
        let c = Array::full(&[2, 3, 3], -1.5);
        let y = bilinear_upsample(&c, 4).unwrap();
        assert_eq!(y.shape(), &[2, 12, 12]);
        assert!(y.data().iter().all(|&v| v == -1.5));

        let one = arr(&[1, 1, 1], &[7.0]);
        assert_eq!(bilinear_upsample(&one, 2).unwrap().data(), &[7.0; 4]);

        // Source coordinates for factor 2 on width 2: -0.25, 0.25, 0.75, 1.25.
        let ramp = arr(&[1, 1, 2], &[0.0, 1.0]);
        let y = bilinear_upsample(&ramp, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        for row in 0..2 {
            let r = &y.data()[row * 4..row * 4 + 4];
            for (got, want) in r.iter().zip([0.0, 0.25, 0.75, 1.0]) {
                assert!((got - want).abs() < 1e-15);
            }
        }
        assert!(bilinear_upsample(&ramp, 3).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = arr(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]);
        let y = layer_norm_rows(&x, 1e-12);
        for r in 0..2 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Array::from_fn(&[2, 3], |i| i as f64);
        let b = Array::from_fn(&[1, 3], |i| 10.0 + i as f64);
        let c = concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(slice0(&c, 0, 2).unwrap(), a);
        assert_eq!(slice0(&c, 2, 3).unwrap(), b);
        assert!(concat0(&[&a, &Array::zeros(&[1, 2])]).is_err());
    }
}
