//! Channel-wise attention and the dual-flow encoder block.
//!
//! The affinity between feature channels is `softmax(psi(Q^T K))` where
//! `psi` standardizes each query-channel row to zero mean and unit
//! variance. Queries always come from the flow being refined; in train
//! mode the labeled flow additionally cross-attends with keys/values from
//! the paired unlabeled flow, and the two results are blended with a
//! fixed coefficient `alpha` before the output projection. The unlabeled
//! flow and inference use self-attention only.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::layout::ParamBuf;
use crate::model::ops::{
    dwconv3_bwd, dwconv3_fwd, gelu_bwd, gelu_fwd, layer_norm_bwd, layer_norm_fwd, linear_bwd,
    softmax_rows_bwd, softmax_rows_fwd, standardize_rows_bwd, standardize_rows_fwd, NormCache,
};
use crate::scalar::Scalar;
use crate::tensor::{plane_from_tokens, tokens_from_plane};
use crate::Tensor4;

/// Epsilon of the affinity-row standardization.
pub const PSI_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Affinity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AffinityCache<S: Scalar> {
    pub affinity: Array2<S>,
    norm: NormCache<S>,
}

fn affinity_fwd<S: Scalar>(q: ArrayView2<S>, k: ArrayView2<S>) -> Result<AffinityCache<S>> {
    let (n, d) = q.dim();
    if k.dim() != (n, d) {
        return Err(Error::contract(format!(
            "affinity inputs must share shape: {:?} vs {:?}",
            q.dim(),
            k.dim()
        )));
    }
    if n < 2 {
        return Err(Error::contract(format!(
            "affinity needs at least 2 tokens, got {n}"
        )));
    }
    if q.iter().chain(k.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "channel_affinity",
            "non-finite value in attention input",
        ));
    }
    let scores = q.t().dot(&k);
    let norm = standardize_rows_fwd(scores.view(), PSI_EPS);
    let affinity = softmax_rows_fwd(norm.xhat.view());
    Ok(AffinityCache { affinity, norm })
}

/// Returns `(dq, dk)` for the affinity `A = softmax(psi(Q^T K))`.
fn affinity_bwd<S: Scalar>(
    da: ArrayView2<S>,
    cache: &AffinityCache<S>,
    q: ArrayView2<S>,
    k: ArrayView2<S>,
) -> (Array2<S>, Array2<S>) {
    let dnorm = softmax_rows_bwd(da, cache.affinity.view());
    let dscores = standardize_rows_bwd(dnorm.view(), &cache.norm);
    let dq = k.dot(&dscores.t());
    let dk = q.dot(&dscores);
    (dq, dk)
}

/// Channel-affinity matrix `softmax(psi(Q^T K))` over the key-channel
/// axis; every row sums to 1.
pub fn channel_affinity<S: Scalar>(q: ArrayView2<S>, k: ArrayView2<S>) -> Result<Array2<S>> {
    Ok(affinity_fwd(q, k)?.affinity)
}

// ---------------------------------------------------------------------------
// Attention core: out = V * A^T, optionally split over heads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnCoreCache<S: Scalar> {
    heads: Vec<AffinityCache<S>>,
}

impl<S: Scalar> AttnCoreCache<S> {
    pub fn affinities(&self) -> impl Iterator<Item = &Array2<S>> {
        self.heads.iter().map(|h| &h.affinity)
    }
}

fn attn_core_fwd<S: Scalar>(
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
    heads: usize,
) -> Result<(Array2<S>, AttnCoreCache<S>)> {
    let (n, d) = q.dim();
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;
    let mut out = Array2::zeros((n, d));
    let mut caches = Vec::with_capacity(heads);
    for hidx in 0..heads {
        let cols = s![.., hidx * dh..(hidx + 1) * dh];
        let aff = affinity_fwd(q.slice(cols), k.slice(cols))?;
        let oh = v.slice(cols).dot(&aff.affinity.t());
        out.slice_mut(cols).assign(&oh);
        caches.push(aff);
    }
    Ok((out, AttnCoreCache { heads: caches }))
}

/// Returns `(dq, dk, dv)`.
fn attn_core_bwd<S: Scalar>(
    dout: &Array2<S>,
    cache: &AttnCoreCache<S>,
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
) -> (Array2<S>, Array2<S>, Array2<S>) {
    let (n, d) = q.dim();
    let heads = cache.heads.len();
    let dh = d / heads;
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for hidx in 0..heads {
        let cols = s![.., hidx * dh..(hidx + 1) * dh];
        let aff = &cache.heads[hidx];
        let do_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&do_h.dot(&aff.affinity));
        let da = do_h.t().dot(&v.slice(cols));
        let (dq_h, dk_h) = affinity_bwd(da.view(), aff, q.slice(cols), k.slice(cols));
        dq.slice_mut(cols).assign(&dq_h);
        dk.slice_mut(cols).assign(&dk_h);
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Block parameters
// ---------------------------------------------------------------------------

/// Views over one block's parameters inside the flat buffer, plus the
/// fixed hyper-parameters. `alpha` blends cross- and self-attention in
/// the labeled flow and is not learned.
#[derive(Clone)]
pub struct BlockParams<'a, S: Scalar> {
    pub w_q: ArrayView2<'a, S>,
    pub w_k: ArrayView2<'a, S>,
    pub w_v: ArrayView2<'a, S>,
    pub w_o: ArrayView2<'a, S>,
    pub ln_attn_g: ArrayView1<'a, S>,
    pub ln_attn_b: ArrayView1<'a, S>,
    pub ln_ffn_g: ArrayView1<'a, S>,
    pub ln_ffn_b: ArrayView1<'a, S>,
    pub w1: ArrayView2<'a, S>,
    pub b1: ArrayView1<'a, S>,
    pub dw_kernel: ArrayView2<'a, S>,
    pub dw_bias: ArrayView1<'a, S>,
    pub w2: ArrayView2<'a, S>,
    pub b2: ArrayView1<'a, S>,
    pub alpha: f64,
    pub heads: usize,
    /// Parameter-name prefix, used for gradient accumulation.
    pub prefix: String,
}

/// Parameter names of one block under a prefix, in layout order.
pub fn block_param_shapes(channels: usize, ffn_expansion: usize) -> Vec<(&'static str, Vec<usize>)> {
    let c = channels;
    let e = ffn_expansion * c;
    vec![
        ("attn.ln.g", vec![c]),
        ("attn.ln.b", vec![c]),
        ("attn.wq", vec![c, 2 * c]),
        ("attn.wk", vec![c, 2 * c]),
        ("attn.wv", vec![c, 2 * c]),
        ("attn.wo", vec![2 * c, c]),
        ("ffn.ln.g", vec![c]),
        ("ffn.ln.b", vec![c]),
        ("ffn.w1", vec![c, e]),
        ("ffn.b1", vec![e]),
        ("ffn.dw.k", vec![e, 9]),
        ("ffn.dw.b", vec![e]),
        ("ffn.w2", vec![e, c]),
        ("ffn.b2", vec![c]),
    ]
}

impl<'a, S: Scalar> BlockParams<'a, S> {
    pub fn from_buf(
        buf: &'a ParamBuf<S>,
        prefix: &str,
        alpha: f64,
        heads: usize,
    ) -> BlockParams<'a, S> {
        let name = |suffix: &str| format!("{prefix}.{suffix}");
        BlockParams {
            w_q: buf.mat(&name("attn.wq")),
            w_k: buf.mat(&name("attn.wk")),
            w_v: buf.mat(&name("attn.wv")),
            w_o: buf.mat(&name("attn.wo")),
            ln_attn_g: buf.vec(&name("attn.ln.g")),
            ln_attn_b: buf.vec(&name("attn.ln.b")),
            ln_ffn_g: buf.vec(&name("ffn.ln.g")),
            ln_ffn_b: buf.vec(&name("ffn.ln.b")),
            w1: buf.mat(&name("ffn.w1")),
            b1: buf.vec(&name("ffn.b1")),
            dw_kernel: buf.mat(&name("ffn.dw.k")),
            dw_bias: buf.vec(&name("ffn.dw.b")),
            w2: buf.mat(&name("ffn.w2")),
            b2: buf.vec(&name("ffn.b2")),
            alpha,
            heads,
            prefix: prefix.to_string(),
        }
    }
}

fn add_mat<S: Scalar>(grads: &mut ParamBuf<S>, name: &str, delta: &Array2<S>) {
    let mut view = grads.mat_mut(name);
    view += delta;
}

fn add_vec<S: Scalar>(grads: &mut ParamBuf<S>, name: &str, delta: &Array1<S>) {
    let mut view = grads.vec_mut(name);
    view += delta;
}

// ---------------------------------------------------------------------------
// Attention sublayer, single flow (self-attention only)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnSingleCache<S: Scalar> {
    ln: NormCache<S>,
    nx: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    core: AttnCoreCache<S>,
    pre_o: Array2<S>,
}

fn attn_single_fwd<S: Scalar>(
    p: &BlockParams<S>,
    x: &Array2<S>,
) -> Result<(Array2<S>, AttnSingleCache<S>)> {
    let (nx, ln) = layer_norm_fwd(x.view(), p.ln_attn_g, p.ln_attn_b);
    let q = nx.dot(&p.w_q);
    let k = nx.dot(&p.w_k);
    let v = nx.dot(&p.w_v);
    let (pre_o, core) = attn_core_fwd(&q, &k, &v, p.heads)?;
    let y = x + &pre_o.dot(&p.w_o);
    Ok((
        y,
        AttnSingleCache {
            ln,
            nx,
            q,
            k,
            v,
            core,
            pre_o,
        },
    ))
}

fn attn_single_bwd<S: Scalar>(
    p: &BlockParams<S>,
    cache: &AttnSingleCache<S>,
    dy: &Array2<S>,
    grads: &mut ParamBuf<S>,
) -> Array2<S> {
    let name = |suffix: &str| format!("{}.{suffix}", p.prefix);
    let dpre_o = dy.dot(&p.w_o.t());
    add_mat(grads, &name("attn.wo"), &cache.pre_o.t().dot(dy));
    let (dq, dk, dv) = attn_core_bwd(&dpre_o, &cache.core, &cache.q, &cache.k, &cache.v);
    add_mat(grads, &name("attn.wq"), &cache.nx.t().dot(&dq));
    add_mat(grads, &name("attn.wk"), &cache.nx.t().dot(&dk));
    add_mat(grads, &name("attn.wv"), &cache.nx.t().dot(&dv));
    let mut dnx = dq.dot(&p.w_q.t());
    dnx += &dk.dot(&p.w_k.t());
    dnx += &dv.dot(&p.w_v.t());
    let (dx_ln, dg, db) = layer_norm_bwd(dnx.view(), &cache.ln, p.ln_attn_g);
    add_vec(grads, &name("attn.ln.g"), &dg);
    add_vec(grads, &name("attn.ln.b"), &db);
    dy + &dx_ln
}

// ---------------------------------------------------------------------------
// Attention sublayer, paired flows (cross + self in the labeled flow)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnPairCache<S: Scalar> {
    ln_l: NormCache<S>,
    ln_u: NormCache<S>,
    nl: Array2<S>,
    nu: Array2<S>,
    ql: Array2<S>,
    kl: Array2<S>,
    vl: Array2<S>,
    qu: Array2<S>,
    ku: Array2<S>,
    vu: Array2<S>,
    core_self_l: AttnCoreCache<S>,
    core_cross: AttnCoreCache<S>,
    core_self_u: AttnCoreCache<S>,
    blend: Array2<S>,
    g_u: Array2<S>,
}

fn attn_pair_fwd<S: Scalar>(
    p: &BlockParams<S>,
    x_l: &Array2<S>,
    x_u: &Array2<S>,
) -> Result<(Array2<S>, Array2<S>, AttnPairCache<S>)> {
    let alpha = S::cast(p.alpha);
    let one_m_alpha = S::cast(1.0 - p.alpha);
    let (nl, ln_l) = layer_norm_fwd(x_l.view(), p.ln_attn_g, p.ln_attn_b);
    let (nu, ln_u) = layer_norm_fwd(x_u.view(), p.ln_attn_g, p.ln_attn_b);
    let ql = nl.dot(&p.w_q);
    let kl = nl.dot(&p.w_k);
    let vl = nl.dot(&p.w_v);
    let qu = nu.dot(&p.w_q);
    let ku = nu.dot(&p.w_k);
    let vu = nu.dot(&p.w_v);
    // Labeled flow: self-refinement and unlabeled-regularized cross
    // attention share the same queries; the blend happens pre-projection.
    let (g_l, core_self_l) = attn_core_fwd(&ql, &kl, &vl, p.heads)?;
    let (f_hat, core_cross) = attn_core_fwd(&ql, &ku, &vu, p.heads)?;
    let blend = f_hat.mapv(|v| v * alpha) + g_l.mapv(|v| v * one_m_alpha);
    let y_l = x_l + &blend.dot(&p.w_o);
    // Unlabeled flow: self-attention only, independent of the labeled flow.
    let (g_u, core_self_u) = attn_core_fwd(&qu, &ku, &vu, p.heads)?;
    let y_u = x_u + &g_u.dot(&p.w_o);
    Ok((
        y_l,
        y_u,
        AttnPairCache {
            ln_l,
            ln_u,
            nl,
            nu,
            ql,
            kl,
            vl,
            qu,
            ku,
            vu,
            core_self_l,
            core_cross,
            core_self_u,
            blend,
            g_u,
        },
    ))
}

fn attn_pair_bwd<S: Scalar>(
    p: &BlockParams<S>,
    cache: &AttnPairCache<S>,
    dy_l: &Array2<S>,
    dy_u: &Array2<S>,
    grads: &mut ParamBuf<S>,
) -> (Array2<S>, Array2<S>) {
    let name = |suffix: &str| format!("{}.{suffix}", p.prefix);
    let alpha = S::cast(p.alpha);
    let one_m_alpha = S::cast(1.0 - p.alpha);

    // Labeled flow first; parameter contributions accumulate labeled
    // before unlabeled everywhere so the order is reproducible.
    let dblend = dy_l.dot(&p.w_o.t());
    let dg_l = dblend.mapv(|v| v * one_m_alpha);
    let df_hat = dblend.mapv(|v| v * alpha);
    let (dql_s, dkl, dvl) =
        attn_core_bwd(&dg_l, &cache.core_self_l, &cache.ql, &cache.kl, &cache.vl);
    let (dql_c, dku_c, dvu_c) =
        attn_core_bwd(&df_hat, &cache.core_cross, &cache.ql, &cache.ku, &cache.vu);
    let dql = dql_s + dql_c;

    let dg_u = dy_u.dot(&p.w_o.t());
    let (dqu, dku_s, dvu_s) =
        attn_core_bwd(&dg_u, &cache.core_self_u, &cache.qu, &cache.ku, &cache.vu);
    let dku = dku_c + dku_s;
    let dvu = dvu_c + dvu_s;

    add_mat(grads, &name("attn.wo"), &cache.blend.t().dot(dy_l));
    add_mat(grads, &name("attn.wo"), &cache.g_u.t().dot(dy_u));
    add_mat(grads, &name("attn.wq"), &cache.nl.t().dot(&dql));
    add_mat(grads, &name("attn.wq"), &cache.nu.t().dot(&dqu));
    add_mat(grads, &name("attn.wk"), &cache.nl.t().dot(&dkl));
    add_mat(grads, &name("attn.wk"), &cache.nu.t().dot(&dku));
    add_mat(grads, &name("attn.wv"), &cache.nl.t().dot(&dvl));
    add_mat(grads, &name("attn.wv"), &cache.nu.t().dot(&dvu));

    let mut dnl = dql.dot(&p.w_q.t());
    dnl += &dkl.dot(&p.w_k.t());
    dnl += &dvl.dot(&p.w_v.t());
    let mut dnu = dqu.dot(&p.w_q.t());
    dnu += &dku.dot(&p.w_k.t());
    dnu += &dvu.dot(&p.w_v.t());

    let (dxl_ln, dg, db) = layer_norm_bwd(dnl.view(), &cache.ln_l, p.ln_attn_g);
    add_vec(grads, &name("attn.ln.g"), &dg);
    add_vec(grads, &name("attn.ln.b"), &db);
    let (dxu_ln, dg, db) = layer_norm_bwd(dnu.view(), &cache.ln_u, p.ln_attn_g);
    add_vec(grads, &name("attn.ln.g"), &dg);
    add_vec(grads, &name("attn.ln.b"), &db);

    (dy_l + &dxl_ln, dy_u + &dxu_ln)
}

// ---------------------------------------------------------------------------
// Feed-forward sublayer with depthwise 3x3 positional mixing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FfnCache<S: Scalar> {
    ln: NormCache<S>,
    t: Array2<S>,
    u: Array2<S>,
    v: Array2<S>,
    g: Array2<S>,
}

fn ffn_fwd<S: Scalar>(
    p: &BlockParams<S>,
    y: &Array2<S>,
    h: usize,
    w: usize,
) -> (Array2<S>, FfnCache<S>) {
    let (t, ln) = layer_norm_fwd(y.view(), p.ln_ffn_g, p.ln_ffn_b);
    let mut u = t.dot(&p.w1);
    u += &p.b1;
    let v = dwconv3_fwd(u.view(), p.dw_kernel, p.dw_bias, h, w);
    let g = gelu_fwd(v.view());
    let mut out = g.dot(&p.w2);
    out += &p.b2;
    let z = y + &out;
    (z, FfnCache { ln, t, u, v, g })
}

fn ffn_bwd<S: Scalar>(
    p: &BlockParams<S>,
    cache: &FfnCache<S>,
    dz: &Array2<S>,
    h: usize,
    w: usize,
    grads: &mut ParamBuf<S>,
) -> Array2<S> {
    let name = |suffix: &str| format!("{}.{suffix}", p.prefix);
    let (dg, dw2, db2) = linear_bwd(dz.view(), cache.g.view(), p.w2);
    add_mat(grads, &name("ffn.w2"), &dw2);
    add_vec(grads, &name("ffn.b2"), &db2);
    let dv = gelu_bwd(dg.view(), cache.v.view());
    let (du, ddw_k, ddw_b) = dwconv3_bwd(dv.view(), cache.u.view(), p.dw_kernel, h, w);
    add_mat(grads, &name("ffn.dw.k"), &ddw_k);
    add_vec(grads, &name("ffn.dw.b"), &ddw_b);
    let (dt, dw1, db1) = linear_bwd(du.view(), cache.t.view(), p.w1);
    add_mat(grads, &name("ffn.w1"), &dw1);
    add_vec(grads, &name("ffn.b1"), &db1);
    let (dy_ln, dg_ln, db_ln) = layer_norm_bwd(dt.view(), &cache.ln, p.ln_ffn_g);
    add_vec(grads, &name("ffn.ln.g"), &dg_ln);
    add_vec(grads, &name("ffn.ln.b"), &db_ln);
    dz + &dy_ln
}

// ---------------------------------------------------------------------------
// Whole block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum PairAttn<S: Scalar> {
    /// alpha > 0: labeled flow runs the blended cross/self path.
    Coupled(AttnPairCache<S>),
    /// alpha == 0: both flows take the exact self-attention-only path, so
    /// disabling the delivery is bit-identical to never having it.
    Decoupled {
        l: AttnSingleCache<S>,
        u: AttnSingleCache<S>,
    },
}

#[derive(Debug, Clone)]
pub struct BlockCachePair<S: Scalar> {
    attn: PairAttn<S>,
    ffn_l: FfnCache<S>,
    ffn_u: FfnCache<S>,
}

impl<S: Scalar> BlockCachePair<S> {
    /// All affinity matrices computed by this block, for diagnostics.
    pub fn affinities(&self) -> Vec<&Array2<S>> {
        let mut out = Vec::new();
        match &self.attn {
            PairAttn::Coupled(c) => {
                out.extend(c.core_self_l.affinities());
                out.extend(c.core_cross.affinities());
                out.extend(c.core_self_u.affinities());
            }
            PairAttn::Decoupled { l, u } => {
                out.extend(l.core.affinities());
                out.extend(u.core.affinities());
            }
        }
        out
    }
}

/// Train-mode block over paired token maps; returns both flows' outputs.
pub fn block_pair_fwd<S: Scalar>(
    p: &BlockParams<S>,
    x_l: &Array2<S>,
    x_u: &Array2<S>,
    h: usize,
    w: usize,
) -> Result<(Array2<S>, Array2<S>, BlockCachePair<S>)> {
    if x_l.dim() != x_u.dim() {
        return Err(Error::contract(format!(
            "flow features must share shape: {:?} vs {:?}",
            x_l.dim(),
            x_u.dim()
        )));
    }
    let (y_l, y_u, attn) = if p.alpha == 0.0 {
        let (y_l, c_l) = attn_single_fwd(p, x_l)?;
        let (y_u, c_u) = attn_single_fwd(p, x_u)?;
        (y_l, y_u, PairAttn::Decoupled { l: c_l, u: c_u })
    } else {
        let (y_l, y_u, c) = attn_pair_fwd(p, x_l, x_u)?;
        (y_l, y_u, PairAttn::Coupled(c))
    };
    let (z_l, ffn_l) = ffn_fwd(p, &y_l, h, w);
    let (z_u, ffn_u) = ffn_fwd(p, &y_u, h, w);
    Ok((z_l, z_u, BlockCachePair { attn, ffn_l, ffn_u }))
}

/// Returns `(dx_l, dx_u)`; parameter gradients accumulate into `grads`.
pub fn block_pair_bwd<S: Scalar>(
    p: &BlockParams<S>,
    cache: &BlockCachePair<S>,
    dz_l: &Array2<S>,
    dz_u: &Array2<S>,
    h: usize,
    w: usize,
    grads: &mut ParamBuf<S>,
) -> (Array2<S>, Array2<S>) {
    let dy_l = ffn_bwd(p, &cache.ffn_l, dz_l, h, w, grads);
    let dy_u = ffn_bwd(p, &cache.ffn_u, dz_u, h, w, grads);
    match &cache.attn {
        PairAttn::Coupled(c) => attn_pair_bwd(p, c, &dy_l, &dy_u, grads),
        PairAttn::Decoupled { l, u } => {
            let dx_l = attn_single_bwd(p, l, &dy_l, grads);
            let dx_u = attn_single_bwd(p, u, &dy_u, grads);
            (dx_l, dx_u)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCacheSingle<S: Scalar> {
    attn: AttnSingleCache<S>,
    ffn: FfnCache<S>,
}

impl<S: Scalar> BlockCacheSingle<S> {
    pub fn affinities(&self) -> Vec<&Array2<S>> {
        self.attn.core.affinities().collect()
    }
}

/// Self-attention-only block over one flow (inference, and the unlabeled
/// half of a decoupled pair).
pub fn block_single_fwd<S: Scalar>(
    p: &BlockParams<S>,
    x: &Array2<S>,
    h: usize,
    w: usize,
) -> Result<(Array2<S>, BlockCacheSingle<S>)> {
    let (y, attn) = attn_single_fwd(p, x)?;
    let (z, ffn) = ffn_fwd(p, &y, h, w);
    Ok((z, BlockCacheSingle { attn, ffn }))
}

pub fn block_single_bwd<S: Scalar>(
    p: &BlockParams<S>,
    cache: &BlockCacheSingle<S>,
    dz: &Array2<S>,
    h: usize,
    w: usize,
    grads: &mut ParamBuf<S>,
) -> Array2<S> {
    let dy = ffn_bwd(p, &cache.ffn, dz, h, w, grads);
    attn_single_bwd(p, &cache.attn, &dy, grads)
}

// ---------------------------------------------------------------------------
// Public batched op: cross-attention delivery
// ---------------------------------------------------------------------------

/// Channel-wise cross-attention over a batch: queries from the labeled
/// flow, keys/values from the paired unlabeled flow. Input `[b, C, h, w]`
/// per flow, output `[b, 2C, h, w]` (pre-projection width). The direction
/// is not symmetric: gradients and values move from the unlabeled flow
/// into the labeled one.
pub fn u2l_cross_attention<S: Scalar>(
    f_l: &Tensor4<S>,
    f_u: &Tensor4<S>,
    w_q: ArrayView2<S>,
    w_k: ArrayView2<S>,
    w_v: ArrayView2<S>,
    heads: usize,
) -> Result<Tensor4<S>> {
    if f_l.dim() != f_u.dim() {
        return Err(Error::contract(format!(
            "flow shapes must match: {:?} vs {:?}",
            f_l.dim(),
            f_u.dim()
        )));
    }
    let (b, c, h, w) = f_l.dim();
    if b == 0 {
        return Err(Error::contract("batch must be nonempty"));
    }
    if w_q.dim() != (c, 2 * c) || w_k.dim() != (c, 2 * c) || w_v.dim() != (c, 2 * c) {
        return Err(Error::contract(format!(
            "projection shapes must be [{c}, {}], got {:?}/{:?}/{:?}",
            2 * c,
            w_q.dim(),
            w_k.dim(),
            w_v.dim()
        )));
    }
    let mut out = Tensor4::zeros((b, 2 * c, h, w));
    for j in 0..b {
        let tl = tokens_from_plane(f_l.index_axis(Axis(0), j));
        let tu = tokens_from_plane(f_u.index_axis(Axis(0), j));
        let q = tl.dot(&w_q);
        let k = tu.dot(&w_k);
        let v = tu.dot(&w_v);
        let (o, _) = attn_core_fwd(&q, &k, &v, heads)?;
        out.index_axis_mut(Axis(0), j)
            .assign(&plane_from_tokens(o.view(), h, w));
    }
    Ok(out)
}
