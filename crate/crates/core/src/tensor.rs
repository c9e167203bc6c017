//! Shape conventions and small tensor utilities.
//!
//! The universal carrier is `Tensor4<S>` = `Array4<S>` with axes
//! `[batch, channel, height, width]`. Inside the encoder, per-sample
//! features are handled token-major as `[N, C]` matrices with `N = h * w`
//! and token `n` at spatial position `(n / w, n % w)`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::scalar::Scalar;
use crate::Tensor4;

/// Flattens one `[C, h, w]` feature plane to token-major `[N, C]`.
pub fn tokens_from_plane<S: Scalar>(plane: ArrayView3<S>) -> Array2<S> {
    let (c, h, w) = plane.dim();
    let mut out = Array2::zeros((h * w, c));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y * w + x, ci]] = plane[[ci, y, x]];
            }
        }
    }
    out
}

/// Inverse of [`tokens_from_plane`].
pub fn plane_from_tokens<S: Scalar>(tokens: ArrayView2<S>, h: usize, w: usize) -> Array3<S> {
    let (n, c) = tokens.dim();
    assert_eq!(n, h * w, "token count must equal h*w");
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = tokens[[y * w + x, ci]];
            }
        }
    }
    out
}

/// Per-pixel channel argmax; ties break toward the lower channel index.
pub fn argmax_channel<S: Scalar>(t: &Tensor4<S>) -> Array3<usize> {
    let (b, c, h, w) = t.dim();
    assert!(c >= 1);
    let mut out = Array3::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = t[[bi, 0, y, x]];
                for ci in 1..c {
                    let v = t[[bi, ci, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                out[[bi, y, x]] = best;
            }
        }
    }
    out
}

/// One-hot encodes a `[b, h, w]` class map into `[b, l, h, w]`.
///
/// Panics if a class id is out of range; callers validate class maps at
/// the I/O boundary.
pub fn one_hot_from_classes<S: Scalar>(classes: &Array3<usize>, num_classes: usize) -> Tensor4<S> {
    let (b, h, w) = classes.dim();
    let mut out = Tensor4::zeros((b, num_classes, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let c = classes[[bi, y, x]];
                assert!(c < num_classes, "class id {c} out of range (L={num_classes})");
                out[[bi, c, y, x]] = S::one();
            }
        }
    }
    out
}

/// True iff every pixel has exactly one channel equal to 1 and the rest 0,
/// bitwise (no tolerance).
pub fn is_one_hot<S: Scalar>(label: &Tensor4<S>) -> bool {
    let (b, c, h, w) = label.dim();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut ones = 0usize;
                for ci in 0..c {
                    let v = label[[bi, ci, y, x]];
                    if v == S::one() {
                        ones += 1;
                    } else if v != S::zero() {
                        return false;
                    }
                }
                if ones != 1 {
                    return false;
                }
            }
        }
    }
    true
}

/// Nearest-neighbor upsampling to `(out_h, out_w)`.
///
/// Source pixel for output `(y, x)` is `(floor(y * h / out_h), floor(x * w / out_w))`,
/// exact when the ratio is an integer factor.
pub fn nearest_upsample<S: Scalar>(t: &Tensor4<S>, out_h: usize, out_w: usize) -> Tensor4<S> {
    let (b, c, h, w) = t.dim();
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let mut out = Tensor4::zeros((b, c, out_h, out_w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..out_h {
                let sy = y * h / out_h;
                for x in 0..out_w {
                    let sx = x * w / out_w;
                    out[[bi, ci, y, x]] = t[[bi, ci, sy, sx]];
                }
            }
        }
    }
    out
}

/// Stacks per-sample `[c, h, w]` planes into a `[b, c, h, w]` batch.
pub fn stack_planes<S: Scalar>(planes: &[Array3<S>]) -> Tensor4<S> {
    assert!(!planes.is_empty());
    let (c, h, w) = planes[0].dim();
    let mut out = Tensor4::zeros((planes.len(), c, h, w));
    for (bi, p) in planes.iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(p);
    }
    out
}
