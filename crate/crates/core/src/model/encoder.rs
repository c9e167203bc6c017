//! Four-stage hierarchical encoder: overlapping patch-merging convolutions
//! between stages, dual-flow attention blocks inside them, and a
//! layer-norm on every stage output.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::model::attention::{
    block_pair_bwd, block_pair_fwd, block_single_bwd, block_single_fwd, BlockCachePair,
    BlockCacheSingle, BlockParams,
};
use crate::model::layout::ParamBuf;
use crate::model::ops::{col2im, im2col, layer_norm_bwd, layer_norm_fwd, linear_fwd, ConvGeom, NormCache};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::{plane_from_tokens, tokens_from_plane};

/// Overlapping patch merging: kernel `2s - 1`, padding `s - 1` halves (or
/// quarters) the resolution exactly when the stride divides it.
pub fn embed_geom(stride: usize) -> ConvGeom {
    ConvGeom {
        kernel: 2 * stride - 1,
        stride,
        pad: stride - 1,
    }
}

pub fn stage_context(err: Error, stage: usize, block: usize) -> Error {
    match err {
        Error::Numeric { context, message } => Error::Numeric {
            context: format!("stage {stage} block {block}: {context}"),
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct EmbedCache<S: Scalar> {
    cols: Array2<S>,
    ln: NormCache<S>,
}

fn embed_fwd<S: Scalar>(
    params: &ParamBuf<S>,
    stage: usize,
    plane: &Array3<S>,
    geom: ConvGeom,
) -> (Array2<S>, EmbedCache<S>, usize, usize) {
    let (_c, h, w) = plane.dim();
    let (ho, wo) = (geom.out_size(h), geom.out_size(w));
    let cols = im2col(plane, geom);
    let conv = linear_fwd(
        cols.view(),
        params.mat(&format!("enc.s{stage}.embed.w")),
        Some(params.vec(&format!("enc.s{stage}.embed.b"))),
    );
    let (tokens, ln) = layer_norm_fwd(
        conv.view(),
        params.vec(&format!("enc.s{stage}.embed.ln.g")),
        params.vec(&format!("enc.s{stage}.embed.ln.b")),
    );
    (tokens, EmbedCache { cols, ln }, ho, wo)
}

/// Returns the gradient w.r.t. the stage input plane (`None` for the
/// first stage, whose input is the image).
fn embed_bwd<S: Scalar>(
    params: &ParamBuf<S>,
    stage: usize,
    cache: &EmbedCache<S>,
    dtokens: &Array2<S>,
    geom: ConvGeom,
    in_dims: (usize, usize, usize),
    grads: &mut ParamBuf<S>,
) -> Option<Array3<S>> {
    let (dconv, dg, db_ln) = layer_norm_bwd(
        dtokens.view(),
        &cache.ln,
        params.vec(&format!("enc.s{stage}.embed.ln.g")),
    );
    {
        let mut g = grads.vec_mut(&format!("enc.s{stage}.embed.ln.g"));
        g += &dg;
    }
    {
        let mut b = grads.vec_mut(&format!("enc.s{stage}.embed.ln.b"));
        b += &db_ln;
    }
    {
        let dw = cache.cols.t().dot(&dconv);
        let mut w = grads.mat_mut(&format!("enc.s{stage}.embed.w"));
        w += &dw;
    }
    {
        let db = dconv.sum_axis(ndarray::Axis(0));
        let mut b = grads.vec_mut(&format!("enc.s{stage}.embed.b"));
        b += &db;
    }
    if stage == 0 {
        return None;
    }
    let dcols = dconv.dot(&params.mat(&format!("enc.s{stage}.embed.w")).t());
    Some(col2im(dcols.view(), geom, in_dims.0, in_dims.1, in_dims.2))
}

// ---------------------------------------------------------------------------
// Paired (train-mode) encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageCachePair<S: Scalar> {
    embed_l: EmbedCache<S>,
    embed_u: EmbedCache<S>,
    pub blocks: Vec<BlockCachePair<S>>,
    out_ln_l: NormCache<S>,
    out_ln_u: NormCache<S>,
    pub h: usize,
    pub w: usize,
    in_dims: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncoderCachePair<S: Scalar> {
    pub stages: Vec<StageCachePair<S>>,
    /// Per-stage output tokens (post stage norm), labeled flow.
    pub outs_l: Vec<Array2<S>>,
    pub outs_u: Vec<Array2<S>>,
}

pub fn encoder_pair_fwd<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamBuf<S>,
    image_l: &Array3<S>,
    image_u: &Array3<S>,
) -> Result<EncoderCachePair<S>> {
    let mut plane_l = image_l.clone();
    let mut plane_u = image_u.clone();
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut outs_l = Vec::with_capacity(cfg.stages.len());
    let mut outs_u = Vec::with_capacity(cfg.stages.len());
    for (k, sc) in cfg.stages.iter().enumerate() {
        let in_dims = plane_l.dim();
        let geom = embed_geom(sc.patch_stride);
        let (mut x_l, embed_l, h, w) = embed_fwd(params, k, &plane_l, geom);
        let (mut x_u, embed_u, _, _) = embed_fwd(params, k, &plane_u, geom);
        let mut blocks = Vec::with_capacity(sc.num_blocks);
        for j in 0..sc.num_blocks {
            let bp = BlockParams::from_buf(
                params,
                &format!("enc.s{k}.blk{j}"),
                cfg.alpha,
                cfg.attn_heads,
            );
            let (z_l, z_u, cache) =
                block_pair_fwd(&bp, &x_l, &x_u, h, w).map_err(|e| stage_context(e, k, j))?;
            x_l = z_l;
            x_u = z_u;
            blocks.push(cache);
        }
        let (out_l, out_ln_l) = layer_norm_fwd(
            x_l.view(),
            params.vec(&format!("enc.s{k}.out_ln.g")),
            params.vec(&format!("enc.s{k}.out_ln.b")),
        );
        let (out_u, out_ln_u) = layer_norm_fwd(
            x_u.view(),
            params.vec(&format!("enc.s{k}.out_ln.g")),
            params.vec(&format!("enc.s{k}.out_ln.b")),
        );
        plane_l = plane_from_tokens(out_l.view(), h, w);
        plane_u = plane_from_tokens(out_u.view(), h, w);
        outs_l.push(out_l);
        outs_u.push(out_u);
        stages.push(StageCachePair {
            embed_l,
            embed_u,
            blocks,
            out_ln_l,
            out_ln_u,
            h,
            w,
            in_dims,
        });
    }
    Ok(EncoderCachePair {
        stages,
        outs_l,
        outs_u,
    })
}

/// Backward through both flows; `douts_*` carry the decoder's gradient
/// w.r.t. every stage output. Parameter gradients accumulate into `grads`
/// (labeled-flow contribution before unlabeled at every parameter).
pub fn encoder_pair_bwd<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamBuf<S>,
    cache: &EncoderCachePair<S>,
    mut douts_l: Vec<Array2<S>>,
    mut douts_u: Vec<Array2<S>>,
    grads: &mut ParamBuf<S>,
) {
    let mut dnext_l: Option<Array3<S>> = None;
    let mut dnext_u: Option<Array3<S>> = None;
    for (k, sc) in cfg.stages.iter().enumerate().rev() {
        let st = &cache.stages[k];
        let mut dout_l = douts_l.pop().expect("per-stage grads");
        let mut dout_u = douts_u.pop().expect("per-stage grads");
        if let Some(d) = dnext_l.take() {
            dout_l += &tokens_from_plane(d.view());
        }
        if let Some(d) = dnext_u.take() {
            dout_u += &tokens_from_plane(d.view());
        }
        let g_name = format!("enc.s{k}.out_ln.g");
        let b_name = format!("enc.s{k}.out_ln.b");
        let (mut dx_l, dg, db) = layer_norm_bwd(dout_l.view(), &st.out_ln_l, params.vec(&g_name));
        {
            let mut g = grads.vec_mut(&g_name);
            g += &dg;
        }
        {
            let mut b = grads.vec_mut(&b_name);
            b += &db;
        }
        let (mut dx_u, dg, db) = layer_norm_bwd(dout_u.view(), &st.out_ln_u, params.vec(&g_name));
        {
            let mut g = grads.vec_mut(&g_name);
            g += &dg;
        }
        {
            let mut b = grads.vec_mut(&b_name);
            b += &db;
        }
        for j in (0..sc.num_blocks).rev() {
            let bp = BlockParams::from_buf(
                params,
                &format!("enc.s{k}.blk{j}"),
                cfg.alpha,
                cfg.attn_heads,
            );
            let (nl, nu) = block_pair_bwd(&bp, &st.blocks[j], &dx_l, &dx_u, st.h, st.w, grads);
            dx_l = nl;
            dx_u = nu;
        }
        let geom = embed_geom(sc.patch_stride);
        dnext_l = embed_bwd(params, k, &st.embed_l, &dx_l, geom, st.in_dims, grads);
        dnext_u = embed_bwd(params, k, &st.embed_u, &dx_u, geom, st.in_dims, grads);
    }
}

// ---------------------------------------------------------------------------
// Single-flow encoder (inference and decoupled training)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StageCacheSingle<S: Scalar> {
    embed: EmbedCache<S>,
    pub blocks: Vec<BlockCacheSingle<S>>,
    out_ln: NormCache<S>,
    pub h: usize,
    pub w: usize,
    in_dims: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncoderCacheSingle<S: Scalar> {
    pub stages: Vec<StageCacheSingle<S>>,
    pub outs: Vec<Array2<S>>,
}

pub fn encoder_single_fwd<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamBuf<S>,
    image: &Array3<S>,
) -> Result<EncoderCacheSingle<S>> {
    let mut plane = image.clone();
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut outs = Vec::with_capacity(cfg.stages.len());
    for (k, sc) in cfg.stages.iter().enumerate() {
        let in_dims = plane.dim();
        let geom = embed_geom(sc.patch_stride);
        let (mut x, embed, h, w) = embed_fwd(params, k, &plane, geom);
        let mut blocks = Vec::with_capacity(sc.num_blocks);
        for j in 0..sc.num_blocks {
            let bp = BlockParams::from_buf(
                params,
                &format!("enc.s{k}.blk{j}"),
                cfg.alpha,
                cfg.attn_heads,
            );
            let (z, cache) = block_single_fwd(&bp, &x, h, w).map_err(|e| stage_context(e, k, j))?;
            x = z;
            blocks.push(cache);
        }
        let (out, out_ln) = layer_norm_fwd(
            x.view(),
            params.vec(&format!("enc.s{k}.out_ln.g")),
            params.vec(&format!("enc.s{k}.out_ln.b")),
        );
        plane = plane_from_tokens(out.view(), h, w);
        outs.push(out);
        stages.push(StageCacheSingle {
            embed,
            blocks,
            out_ln,
            h,
            w,
            in_dims,
        });
    }
    Ok(EncoderCacheSingle { stages, outs })
}

pub fn encoder_single_bwd<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamBuf<S>,
    cache: &EncoderCacheSingle<S>,
    mut douts: Vec<Array2<S>>,
    grads: &mut ParamBuf<S>,
) {
    let mut dnext: Option<Array3<S>> = None;
    for (k, sc) in cfg.stages.iter().enumerate().rev() {
        let st = &cache.stages[k];
        let mut dout = douts.pop().expect("per-stage grads");
        if let Some(d) = dnext.take() {
            dout += &tokens_from_plane(d.view());
        }
        let g_name = format!("enc.s{k}.out_ln.g");
        let (mut dx, dg, db) = layer_norm_bwd(dout.view(), &st.out_ln, params.vec(&g_name));
        {
            let mut g = grads.vec_mut(&g_name);
            g += &dg;
        }
        {
            let mut b = grads.vec_mut(&format!("enc.s{k}.out_ln.b"));
            b += &db;
        }
        for j in (0..sc.num_blocks).rev() {
            let bp = BlockParams::from_buf(
                params,
                &format!("enc.s{k}.blk{j}"),
                cfg.alpha,
                cfg.attn_heads,
            );
            dx = block_single_bwd(&bp, &st.blocks[j], &dx, st.h, st.w, grads);
        }
        let geom = embed_geom(sc.patch_stride);
        dnext = embed_bwd(params, k, &st.embed, &dx, geom, st.in_dims, grads);
    }
}
