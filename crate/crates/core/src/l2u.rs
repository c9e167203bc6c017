//! Labeled-to-unlabeled delivery: paste a foreground-bearing square patch
//! from a labeled image into an unlabeled image, and the matching
//! annotation patch into its pseudo-label.
//!
//! `patch_size = 0` is the documented off switch: selection and mixing
//! become exact no-ops and the training pipeline is bit-identical to one
//! without this delivery.

use ndarray::s;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Tensor4;

/// Square patch: top-left corner `(row, col)` and side length `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchSpec {
    pub const NONE: PatchSpec = PatchSpec {
        row: 0,
        col: 0,
        size: 0,
    };

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.size > h.min(w) || self.row + self.size > h || self.col + self.size > w {
            return Err(Error::contract(format!(
                "patch ({}, {}, size {}) exceeds {h}x{w} bounds",
                self.row, self.col, self.size
            )));
        }
        Ok(())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.row && y < self.row + self.size && x >= self.col && x < self.col + self.size
    }
}

/// Picks where to slice the donor patch: a foreground pixel of the label
/// is sampled uniformly, the patch is centered on it and clamped to the
/// image bounds. An all-background label falls back to a uniformly random
/// valid position, so there is no error path.
pub fn select_patch<S: Scalar>(
    label: &Tensor4<S>,
    patch_size: usize,
    rng: &mut ChaCha8Rng,
) -> PatchSpec {
    let (_b, _l, h, w) = label.dim();
    assert!(patch_size <= h.min(w), "patch size exceeds image");
    if patch_size == 0 {
        return PatchSpec::NONE;
    }
    // Foreground = any pixel whose background channel is 0.
    let mut foreground = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if label[[0, 0, y, x]] == S::zero() {
                foreground.push((y, x));
            }
        }
    }
    let (row, col) = if foreground.is_empty() {
        (
            rng.gen_range(0..=h - patch_size),
            rng.gen_range(0..=w - patch_size),
        )
    } else {
        let (fy, fx) = foreground[rng.gen_range(0..foreground.len())];
        let center = |p: usize, limit: usize| -> usize {
            p.saturating_sub(patch_size / 2).min(limit - patch_size)
        };
        (center(fy, h), center(fx, w))
    };
    PatchSpec {
        row,
        col,
        size: patch_size,
    }
}

/// Copies the patch region of the labeled image/label over the unlabeled
/// image/pseudo-label; everything outside the rectangle is untouched.
/// Inputs are borrowed and never modified.
pub fn mix<S: Scalar>(
    unlabeled_image: &Tensor4<S>,
    pseudo_label: &Tensor4<S>,
    labeled_image: &Tensor4<S>,
    labeled_label: &Tensor4<S>,
    patch: PatchSpec,
) -> Result<(Tensor4<S>, Tensor4<S>)> {
    let (b, ci, h, w) = unlabeled_image.dim();
    if labeled_image.dim() != (b, ci, h, w) {
        return Err(Error::contract(format!(
            "image shape mismatch: {:?} vs {:?}",
            unlabeled_image.dim(),
            labeled_image.dim()
        )));
    }
    if pseudo_label.dim() != labeled_label.dim()
        || pseudo_label.dim().2 != h
        || pseudo_label.dim().3 != w
        || pseudo_label.dim().0 != b
    {
        return Err(Error::contract(format!(
            "label shape mismatch: {:?} vs {:?} (image {h}x{w})",
            pseudo_label.dim(),
            labeled_label.dim()
        )));
    }
    patch.validate(h, w)?;

    let mut image = unlabeled_image.clone();
    let mut label = pseudo_label.clone();
    if patch.size > 0 {
        let (y0, y1) = (patch.row, patch.row + patch.size);
        let (x0, x1) = (patch.col, patch.col + patch.size);
        image
            .slice_mut(s![.., .., y0..y1, x0..x1])
            .assign(&labeled_image.slice(s![.., .., y0..y1, x0..x1]));
        label
            .slice_mut(s![.., .., y0..y1, x0..x1])
            .assign(&labeled_label.slice(s![.., .., y0..y1, x0..x1]));
    }
    Ok((image, label))
}
