//! Primitive differentiable operations: forward plus hand-rolled backward.
//!
//! Everything works per sample. Token matrices are `[N, C]` with
//! `N = h * w`; planes are `[C, h, w]`. Each `*_bwd` consumes the
//! gradient of the loss with respect to the op's output and returns
//! gradients with respect to inputs and parameters.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub fn linear_fwd<S: Scalar>(
    x: ArrayView2<S>,
    w: ArrayView2<S>,
    b: Option<ArrayView1<S>>,
) -> Array2<S> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_bwd<S: Scalar>(
    dy: ArrayView2<S>,
    x: ArrayView2<S>,
    w: ArrayView2<S>,
) -> (Array2<S>, Array2<S>, Array1<S>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(&dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Row standardization (zero mean, unit variance per row)
// ---------------------------------------------------------------------------

/// Saved intermediates for standardization/normalization backward.
#[derive(Debug, Clone)]
pub struct NormCache<S: Scalar> {
    /// Standardized values, `(x - mean) * inv_std`.
    pub xhat: Array2<S>,
    /// Per-row `1 / sqrt(var + eps)`.
    pub inv_std: Array1<S>,
}

/// Standardizes each row to zero mean and unit population variance.
pub fn standardize_rows_fwd<S: Scalar>(x: ArrayView2<S>, eps: f64) -> NormCache<S> {
    let (r, m) = x.dim();
    let inv_m = S::cast(1.0 / m as f64);
    let eps = S::cast(eps);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(r);
    for i in 0..r {
        let mut row = xhat.row_mut(i);
        let mean = row.iter().copied().sum::<S>() * inv_m;
        let mut var = S::zero();
        for v in row.iter() {
            let d = *v - mean;
            var += d * d;
        }
        var *= inv_m;
        let is = (var + eps).sqrt().recip();
        inv_std[i] = is;
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
    }
    NormCache { xhat, inv_std }
}

/// Gradient through [`standardize_rows_fwd`]:
/// `dx = inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))` per row.
pub fn standardize_rows_bwd<S: Scalar>(dy: ArrayView2<S>, cache: &NormCache<S>) -> Array2<S> {
    let (r, m) = dy.dim();
    let inv_m = S::cast(1.0 / m as f64);
    let mut dx = Array2::zeros((r, m));
    for i in 0..r {
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for j in 0..m {
            m1 += dy[[i, j]];
            m2 += dy[[i, j]] * cache.xhat[[i, j]];
        }
        m1 *= inv_m;
        m2 *= inv_m;
        let is = cache.inv_std[i];
        for j in 0..m {
            dx[[i, j]] = is * (dy[[i, j]] - m1 - cache.xhat[[i, j]] * m2);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Layer normalization (per token over channels, learned affine)
// ---------------------------------------------------------------------------

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm_fwd<S: Scalar>(
    x: ArrayView2<S>,
    gain: ArrayView1<S>,
    bias: ArrayView1<S>,
) -> (Array2<S>, NormCache<S>) {
    let cache = standardize_rows_fwd(x, LN_EPS);
    let mut y = cache.xhat.clone();
    y *= &gain;
    y += &bias;
    (y, cache)
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_bwd<S: Scalar>(
    dy: ArrayView2<S>,
    cache: &NormCache<S>,
    gain: ArrayView1<S>,
) -> (Array2<S>, Array1<S>, Array1<S>) {
    let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gain;
    let dx = standardize_rows_bwd(dxhat.view(), cache);
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// Row softmax
// ---------------------------------------------------------------------------

pub fn softmax_rows_fwd<S: Scalar>(x: ArrayView2<S>) -> Array2<S> {
    let (r, m) = x.dim();
    let mut y = x.to_owned();
    for i in 0..r {
        let mut row = y.row_mut(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
        let _ = m;
    }
    y
}

/// `dx = y * (dy - rowsum(dy * y))`.
pub fn softmax_rows_bwd<S: Scalar>(dy: ArrayView2<S>, y: ArrayView2<S>) -> Array2<S> {
    let (r, m) = dy.dim();
    let mut dx = Array2::zeros((r, m));
    for i in 0..r {
        let mut dot = S::zero();
        for j in 0..m {
            dot += dy[[i, j]] * y[[i, j]];
        }
        for j in 0..m {
            dx[[i, j]] = y[[i, j]] * (dy[[i, j]] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GELU (tanh form)
// ---------------------------------------------------------------------------

fn gelu_consts<S: Scalar>() -> (S, S) {
    (
        S::cast(0.797_884_560_802_865_4), // sqrt(2/pi)
        S::cast(0.044715),
    )
}

pub fn gelu_fwd<S: Scalar>(x: ArrayView2<S>) -> Array2<S> {
    let (c, a) = gelu_consts::<S>();
    let half = S::cast(0.5);
    x.mapv(|v| {
        let u = c * (v + a * v * v * v);
        half * v * (S::one() + u.tanh())
    })
}

pub fn gelu_bwd<S: Scalar>(dy: ArrayView2<S>, x: ArrayView2<S>) -> Array2<S> {
    let (c, a) = gelu_consts::<S>();
    let half = S::cast(0.5);
    let three = S::cast(3.0);
    let mut dx = dy.to_owned();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let sech2 = S::one() - t * t;
        let du = c * (S::one() + three * a * v * v);
        *d *= half * (S::one() + t) + half * v * sech2 * du;
    }
    dx
}

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution over tokens (stride 1, padding 1)
// ---------------------------------------------------------------------------

/// `x` is `[N, E]` tokens over an `h * w` grid; kernel is `[E, 9]`
/// (row-major 3x3 taps), bias `[E]`.
pub fn dwconv3_fwd<S: Scalar>(
    x: ArrayView2<S>,
    kernel: ArrayView2<S>,
    bias: ArrayView1<S>,
    h: usize,
    w: usize,
) -> Array2<S> {
    let (n, e) = x.dim();
    assert_eq!(n, h * w);
    let mut y = Array2::zeros((n, e));
    for yy in 0..h {
        for xx in 0..w {
            let out_tok = yy * w + xx;
            for (tap, (dy, dx)) in TAPS.iter().enumerate() {
                let sy = yy as isize + dy;
                let sx = xx as isize + dx;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src_tok = sy as usize * w + sx as usize;
                for ei in 0..e {
                    y[[out_tok, ei]] += kernel[[ei, tap]] * x[[src_tok, ei]];
                }
            }
            for ei in 0..e {
                y[[out_tok, ei]] += bias[ei];
            }
        }
    }
    y
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Returns `(dx, dkernel, dbias)`.
pub fn dwconv3_bwd<S: Scalar>(
    dy: ArrayView2<S>,
    x: ArrayView2<S>,
    kernel: ArrayView2<S>,
    h: usize,
    w: usize,
) -> (Array2<S>, Array2<S>, Array1<S>) {
    let (n, e) = x.dim();
    let mut dx = Array2::zeros((n, e));
    let mut dk = Array2::zeros((e, 9));
    let db = dy.sum_axis(Axis(0));
    for yy in 0..h {
        for xx in 0..w {
            let out_tok = yy * w + xx;
            for (tap, (dyo, dxo)) in TAPS.iter().enumerate() {
                let sy = yy as isize + dyo;
                let sx = xx as isize + dxo;
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src_tok = sy as usize * w + sx as usize;
                for ei in 0..e {
                    let g = dy[[out_tok, ei]];
                    dx[[src_tok, ei]] += kernel[[ei, tap]] * g;
                    dk[[ei, tap]] += x[[src_tok, ei]] * g;
                }
            }
        }
    }
    (dx, dk, db)
}

// ---------------------------------------------------------------------------
// Strided convolution via im2col
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unrolls conv patches: plane `[C, h, w]` to `[ho*wo, C*k*k]`, zeros
/// outside the image. Conv is then `cols.dot(weight) + bias` with weight
/// `[C*k*k, Cout]`.
pub fn im2col<S: Scalar>(plane: &Array3<S>, geom: ConvGeom) -> Array2<S> {
    let (c, h, w) = plane.dim();
    let (ho, wo) = (geom.out_size(h), geom.out_size(w));
    let k = geom.kernel;
    let mut cols = Array2::zeros((ho * wo, c * k * k));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ci in 0..c {
                for ky in 0..k {
                    let sy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[row, ci * k * k + ky * k + kx]] = plane[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input plane.
pub fn col2im<S: Scalar>(
    dcols: ArrayView2<S>,
    geom: ConvGeom,
    c: usize,
    h: usize,
    w: usize,
) -> Array3<S> {
    let (ho, wo) = (geom.out_size(h), geom.out_size(w));
    let k = geom.kernel;
    let mut dplane = Array3::zeros((c, h, w));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ci in 0..c {
                for ky in 0..k {
                    let sy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dplane[[ci, sy as usize, sx as usize]] +=
                            dcols[[row, ci * k * k + ky * k + kx]];
                    }
                }
            }
        }
    }
    dplane
}

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false)
// ---------------------------------------------------------------------------

/// Per-axis interpolation taps: output index -> (lo, hi, frac).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, src as f64 - 1.0);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn bilinear_fwd<S: Scalar>(plane: &Array3<S>, out_h: usize, out_w: usize) -> Array3<S> {
    let (c, h, w) = plane.dim();
    if (h, w) == (out_h, out_w) {
        return plane.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::cast(fy);
            let gy = S::one() - fy;
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = S::cast(fx);
                let gx = S::one() - fx;
                out[[ci, y, x]] = gy * gx * plane[[ci, y0, x0]]
                    + gy * fx * plane[[ci, y0, x1]]
                    + fy * gx * plane[[ci, y1, x0]]
                    + fy * fx * plane[[ci, y1, x1]];
            }
        }
    }
    out
}

pub fn bilinear_bwd<S: Scalar>(dout: &Array3<S>, src_h: usize, src_w: usize) -> Array3<S> {
    let (c, out_h, out_w) = dout.dim();
    if (src_h, src_w) == (out_h, out_w) {
        return dout.clone();
    }
    let ty = bilinear_taps(src_h, out_h);
    let tx = bilinear_taps(src_w, out_w);
    let mut dp = Array3::zeros((c, src_h, src_w));
    for ci in 0..c {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::cast(fy);
            let gy = S::one() - fy;
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = S::cast(fx);
                let gx = S::one() - fx;
                let g = dout[[ci, y, x]];
                dp[[ci, y0, x0]] += gy * gx * g;
                dp[[ci, y0, x1]] += gy * fx * g;
                dp[[ci, y1, x0]] += fy * gx * g;
                dp[[ci, y1, x1]] += fy * fx * g;
            }
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn2(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| f64::standard_normal(rng))
    }

    /// Central-difference check of `d loss / d x` where loss = sum(weights * f(x)).
    fn check_input_grad(
        x: &Array2<f64>,
        weights: &Array2<f64>,
        f: impl Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
        tol: f64,
    ) {
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let lp = (&f(&xp) * weights).sum();
            let lm = (&f(&xm) * weights).sum();
            let num = (lp - lm) / (2.0 * eps);
            let ana = analytic.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() < tol * (1.0 + num.abs().max(ana.abs())),
                "index {idx}: analytic {ana} vs numeric {num}"
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn2(4, 3, &mut rng);
        let w = randn2(3, 5, &mut rng);
        let b = Array1::from_shape_fn(5, |_| f64::standard_normal(&mut rng));
        let lw = randn2(4, 5, &mut rng);
        let y = linear_fwd(x.view(), w.view(), Some(b.view()));
        assert_eq!(y.dim(), (4, 5));
        let (dx, dw, db) = linear_bwd(lw.view(), x.view(), w.view());
        check_input_grad(
            &x,
            &lw,
            |x| linear_fwd(x.view(), w.view(), Some(b.view())),
            &dx,
            1e-7,
        );
        check_input_grad(
            &w,
            &lw,
            |w| linear_fwd(x.view(), w.view(), Some(b.view())),
            &dw,
            1e-7,
        );
        // Bias gradient: columns of the loss weights summed.
        for (a, b) in db.iter().zip(lw.sum_axis(Axis(0)).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_rows_is_zero_mean_unit_var_and_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn2(3, 6, &mut rng);
        let cache = standardize_rows_fwd(x.view(), 1e-5);
        for i in 0..3 {
            let row = cache.xhat.row(i);
            let mean: f64 = row.sum() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps-deflated
        }
        let lw = randn2(3, 6, &mut rng);
        let dx = standardize_rows_bwd(lw.view(), &cache);
        check_input_grad(
            &x,
            &lw,
            |x| standardize_rows_fwd(x.view(), 1e-5).xhat,
            &dx,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn2(4, 5, &mut rng);
        let g = Array1::from_shape_fn(5, |_| 1.0 + 0.1 * f64::standard_normal(&mut rng));
        let b = Array1::from_shape_fn(5, |_| 0.1 * f64::standard_normal(&mut rng));
        let lw = randn2(4, 5, &mut rng);
        let (_y, cache) = layer_norm_fwd(x.view(), g.view(), b.view());
        let (dx, dg, db) = layer_norm_bwd(lw.view(), &cache, g.view());
        check_input_grad(
            &x,
            &lw,
            |x| layer_norm_fwd(x.view(), g.view(), b.view()).0,
            &dx,
            1e-6,
        );
        let eps = 1e-6;
        for j in 0..5 {
            for (param, ana) in [(&g, &dg), (&b, &db)] {
                let mut pp = param.clone();
                pp[j] += eps;
                let mut pm = param.clone();
                pm[j] -= eps;
                let (fp, fm) = if std::ptr::eq(param, &g) {
                    (
                        layer_norm_fwd(x.view(), pp.view(), b.view()).0,
                        layer_norm_fwd(x.view(), pm.view(), b.view()).0,
                    )
                } else {
                    (
                        layer_norm_fwd(x.view(), g.view(), pp.view()).0,
                        layer_norm_fwd(x.view(), g.view(), pm.view()).0,
                    )
                };
                let num = ((&fp * &lw).sum() - (&fm * &lw).sum()) / (2.0 * eps);
                assert!((num - ana[j]).abs() < 1e-6, "param grad {j}: {num} vs {}", ana[j]);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn2(3, 4, &mut rng);
        let y = softmax_rows_fwd(x.view());
        for i in 0..3 {
            assert!((y.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let lw = randn2(3, 4, &mut rng);
        let dx = softmax_rows_bwd(lw.view(), y.view());
        check_input_grad(&x, &lw, |x| softmax_rows_fwd(x.view()), &dx, 1e-6);
    }

    #[test]
    fn gelu_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn2(3, 4, &mut rng);
        let lw = randn2(3, 4, &mut rng);
        let dx = gelu_bwd(lw.view(), x.view());
        check_input_grad(&x, &lw, |x| gelu_fwd(x.view()), &dx, 1e-6);
    }

    #[test]
    fn dwconv_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, e) = (3, 4, 2);
        let x = randn2(h * w, e, &mut rng);
        let k = randn2(e, 9, &mut rng);
        let b = Array1::from_shape_fn(e, |_| f64::standard_normal(&mut rng));
        let lw = randn2(h * w, e, &mut rng);
        let (dx, dk, db) = dwconv3_bwd(lw.view(), x.view(), k.view(), h, w);
        check_input_grad(
            &x,
            &lw,
            |x| dwconv3_fwd(x.view(), k.view(), b.view(), h, w),
            &dx,
            1e-6,
        );
        check_input_grad(
            &k,
            &lw,
            |k| dwconv3_fwd(x.view(), k.view(), b.view(), h, w),
            &dk,
            1e-6,
        );
        for (a, b) in db.iter().zip(lw.sum_axis(Axis(0)).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_im2col_matches_direct_convolution_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let plane = Array3::from_shape_fn((2, 6, 6), |_| f64::standard_normal(&mut rng));
        let geom = ConvGeom {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let cols = im2col(&plane, geom);
        assert_eq!(cols.dim(), (9, 18));
        let w = randn2(18, 4, &mut rng);
        let y = cols.dot(&w);
        // Direct convolution oracle.
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..4 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = (oy * 2 + ky) as isize - 1;
                                let sx = (ox * 2 + kx) as isize - 1;
                                if sy < 0 || sx < 0 || sy >= 6 || sx >= 6 {
                                    continue;
                                }
                                acc += plane[[ci, sy as usize, sx as usize]]
                                    * w[[ci * 9 + ky * 3 + kx, co]];
                            }
                        }
                    }
                    let got = y[[oy * 3 + ox, co]];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
        // col2im is the exact adjoint of im2col.
        let dcols = randn2(9, 18, &mut rng);
        let dplane = col2im(dcols.view(), geom, 2, 6, 6);
        let lhs: f64 = (&dcols * &cols).sum();
        let rhs: f64 = (&dplane * &plane).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_is_exact_on_constants_and_adjoint() {
        let plane = Array3::from_elem((2, 3, 3), 2.5f64);
        let up = bilinear_fwd(&plane, 7, 5);
        for v in up.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Array3::from_shape_fn((1, 4, 4), |_| f64::standard_normal(&mut rng));
        let up = bilinear_fwd(&p, 9, 6);
        let dout = Array3::from_shape_fn((1, 9, 6), |_| f64::standard_normal(&mut rng));
        let dp = bilinear_bwd(&dout, 4, 4);
        let lhs: f64 = (&dout * &up).sum();
        let rhs: f64 = (&dp * &p).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
