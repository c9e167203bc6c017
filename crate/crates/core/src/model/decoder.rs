//! All-linear fusion decoder: every stage output is projected to a common
//! embedding width, bilinearly upsampled to the first-stage resolution,
//! concatenated, fused, projected to class logits and upsampled to the
//! input resolution.

use ndarray::{s, Array2, Array3};

use crate::model::layout::ParamBuf;
use crate::model::ops::{bilinear_bwd, bilinear_fwd, linear_bwd, linear_fwd};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::{plane_from_tokens, tokens_from_plane};

#[derive(Debug, Clone)]
pub struct DecoderCache<S: Scalar> {
    concat: Array2<S>,
    fused: Array2<S>,
}

/// Forward over one flow. `outs` are the per-stage output tokens, `dims`
/// their spatial sizes, `out_hw` the final logit resolution. Returns the
/// `[L, H, W]` logits plane.
pub fn decoder_fwd<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamBuf<S>,
    outs: &[Array2<S>],
    dims: &[(usize, usize)],
    out_hw: (usize, usize),
) -> (Array3<S>, DecoderCache<S>) {
    let d = cfg.decoder_dim;
    let (h1, w1) = dims[0];
    let mut concat_plane = Array3::zeros((cfg.stages.len() * d, h1, w1));
    for (k, out) in outs.iter().enumerate() {
        let proj = linear_fwd(
            out.view(),
            params.mat(&format!("dec.proj{k}.w")),
            Some(params.vec(&format!("dec.proj{k}.b"))),
        );
        let plane = plane_from_tokens(proj.view(), dims[k].0, dims[k].1);
        let up = bilinear_fwd(&plane, h1, w1);
        concat_plane.slice_mut(s![k * d..(k + 1) * d, .., ..]).assign(&up);
    }
    let concat = tokens_from_plane(concat_plane.view());
    let fused = linear_fwd(
        concat.view(),
        params.mat("dec.fuse.w"),
        Some(params.vec("dec.fuse.b")),
    );
    let cls = linear_fwd(
        fused.view(),
        params.mat("dec.cls.w"),
        Some(params.vec("dec.cls.b")),
    );
    let cls_plane = plane_from_tokens(cls.view(), h1, w1);
    let logits = bilinear_fwd(&cls_plane, out_hw.0, out_hw.1);
    (logits, DecoderCache { concat, fused })
}

/// Backward over one flow; returns per-stage gradients w.r.t. the encoder
/// stage outputs.
pub fn decoder_bwd<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamBuf<S>,
    cache: &DecoderCache<S>,
    outs: &[Array2<S>],
    dims: &[(usize, usize)],
    dlogits: &Array3<S>,
    grads: &mut ParamBuf<S>,
) -> Vec<Array2<S>> {
    let d = cfg.decoder_dim;
    let (h1, w1) = dims[0];
    let dcls_plane = bilinear_bwd(dlogits, h1, w1);
    let dcls = tokens_from_plane(dcls_plane.view());
    let (dfused, dw, db) = linear_bwd(dcls.view(), cache.fused.view(), params.mat("dec.cls.w"));
    {
        let mut w = grads.mat_mut("dec.cls.w");
        w += &dw;
    }
    {
        let mut b = grads.vec_mut("dec.cls.b");
        b += &db;
    }
    let (dconcat, dw, db) = linear_bwd(dfused.view(), cache.concat.view(), params.mat("dec.fuse.w"));
    {
        let mut w = grads.mat_mut("dec.fuse.w");
        w += &dw;
    }
    {
        let mut b = grads.vec_mut("dec.fuse.b");
        b += &db;
    }
    let dconcat_plane = plane_from_tokens(dconcat.view(), h1, w1);
    let mut douts = Vec::with_capacity(outs.len());
    for (k, out) in outs.iter().enumerate() {
        let dup = dconcat_plane.slice(s![k * d..(k + 1) * d, .., ..]).to_owned();
        let dplane = bilinear_bwd(&dup, dims[k].0, dims[k].1);
        let dproj = tokens_from_plane(dplane.view());
        let (dout, dw, db) = linear_bwd(
            dproj.view(),
            out.view(),
            params.mat(&format!("dec.proj{k}.w")),
        );
        {
            let mut w = grads.mat_mut(&format!("dec.proj{k}.w"));
            w += &dw;
        }
        {
            let mut b = grads.vec_mut(&format!("dec.proj{k}.b"));
            b += &db;
        }
        douts.push(dout);
    }
    douts
}
