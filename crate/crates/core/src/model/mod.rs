//! The segmentation network: a 4-stage hierarchical encoder whose blocks
//! deliver unlabeled-flow channel statistics into the labeled flow via
//! cross-attention, plus an all-linear fusion decoder.
//!
//! Training runs paired flows (labeled and unlabeled halves of a batch,
//! coupled per sample pair); inference runs one self-attention flow,
//! which is equivalent to duplicating the batch through both flows.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod layout;
pub mod ops;

use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax_channel, plane_from_tokens, tokens_from_plane, stack_planes};
use crate::Tensor4;

pub use attention::{channel_affinity, u2l_cross_attention, BlockParams, PSI_EPS};
use attention::{block_pair_fwd, block_single_fwd};
use decoder::{decoder_bwd, decoder_fwd, DecoderCache};
use encoder::{
    encoder_pair_bwd, encoder_pair_fwd, encoder_single_bwd, encoder_single_fwd, EncoderCachePair,
    EncoderCacheSingle,
};
use layout::{ParamBuf, ParamLayout};

/// One encoder stage: channel width, downsampling factor of its patch
/// merging, block count and feed-forward expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub patch_stride: usize,
    pub num_blocks: usize,
    pub ffn_expansion: usize,
}

/// Forward mode: paired training flows or single-flow inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub decoder_dim: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Blend between cross-attention (1) and self-refinement (0) in the
    /// labeled flow. Fixed per run; 0 removes the delivery exactly.
    pub alpha: f64,
    pub attn_heads: usize,
}

impl ModelConfig {
    /// Desk-scale backbone: stage channels (16, 32, 64, 128), blocks
    /// (1, 1, 2, 1), strides (4, 2, 2, 2), expansion 4.
    pub fn tiny(num_classes: usize, alpha: f64) -> ModelConfig {
        ModelConfig {
            stages: vec![
                StageConfig { channels: 16, patch_stride: 4, num_blocks: 1, ffn_expansion: 4 },
                StageConfig { channels: 32, patch_stride: 2, num_blocks: 1, ffn_expansion: 4 },
                StageConfig { channels: 64, patch_stride: 2, num_blocks: 2, ffn_expansion: 4 },
                StageConfig { channels: 128, patch_stride: 2, num_blocks: 1, ffn_expansion: 4 },
            ],
            decoder_dim: 64,
            num_classes,
            in_channels: 1,
            alpha,
            attn_heads: 1,
        }
    }

    /// Smallest legal configuration, for fast tests.
    pub fn micro(num_classes: usize, alpha: f64) -> ModelConfig {
        ModelConfig {
            stages: vec![
                StageConfig { channels: 4, patch_stride: 4, num_blocks: 1, ffn_expansion: 2 },
                StageConfig { channels: 6, patch_stride: 2, num_blocks: 1, ffn_expansion: 2 },
                StageConfig { channels: 8, patch_stride: 2, num_blocks: 1, ffn_expansion: 2 },
                StageConfig { channels: 10, patch_stride: 2, num_blocks: 1, ffn_expansion: 2 },
            ],
            decoder_dim: 16,
            num_classes,
            in_channels: 1,
            alpha,
            attn_heads: 1,
        }
    }

    pub fn by_name(name: &str, num_classes: usize, alpha: f64) -> Result<ModelConfig> {
        match name {
            "tiny" => Ok(ModelConfig::tiny(num_classes, alpha)),
            "micro" => Ok(ModelConfig::micro(num_classes, alpha)),
            other => Err(Error::config(format!(
                "unknown model preset '{other}' (tiny, micro)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::config(format!(
                "encoder needs exactly 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.stages[0].patch_stride != 4
            || self.stages[1..].iter().any(|s| s.patch_stride != 2)
        {
            return Err(Error::config(
                "stage strides must be (4, 2, 2, 2): resolutions H/4 .. H/32",
            ));
        }
        for pair in self.stages.windows(2) {
            if pair[1].channels <= pair[0].channels {
                return Err(Error::config(
                    "stage channels must strictly increase across stages",
                ));
            }
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.num_blocks == 0 || s.channels == 0 || s.ffn_expansion == 0 {
                return Err(Error::config(format!("stage {k} has a zero-sized field")));
            }
            if (2 * s.channels) % self.attn_heads != 0 {
                return Err(Error::config(format!(
                    "stage {k}: attention width {} not divisible by {} heads",
                    2 * s.channels,
                    self.attn_heads
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.decoder_dim == 0 || self.in_channels == 0 || self.attn_heads == 0 {
            return Err(Error::config("zero-sized model dimension"));
        }
        Ok(())
    }

    /// Images must be square-strided through 4 stages with at least a
    /// 2x2 grid at the bottom so affinity normalization stays defined.
    pub fn validate_image(&self, h: usize, w: usize) -> Result<()> {
        if h % 32 != 0 || w % 32 != 0 || h < 64 || w < 64 {
            return Err(Error::config(format!(
                "image size {h}x{w} must be a multiple of 32 and at least 64"
            )));
        }
        Ok(())
    }

    /// Spatial size of each stage's feature grid for an input of `(h, w)`.
    pub fn stage_dims(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(4);
        let (mut ch, mut cw) = (h, w);
        for s in &self.stages {
            ch /= s.patch_stride;
            cw /= s.patch_stride;
            dims.push((ch, cw));
        }
        dims
    }
}

/// Deterministic parameter layout for a config; names are stable and
/// shared with the checkpoint format.
pub fn build_layout(cfg: &ModelConfig) -> Arc<ParamLayout> {
    let mut b = ParamLayout::builder();
    let mut in_c = cfg.in_channels;
    for (k, sc) in cfg.stages.iter().enumerate() {
        let geom = encoder::embed_geom(sc.patch_stride);
        b.add(
            format!("enc.s{k}.embed.w"),
            &[in_c * geom.kernel * geom.kernel, sc.channels],
        );
        b.add(format!("enc.s{k}.embed.b"), &[sc.channels]);
        b.add(format!("enc.s{k}.embed.ln.g"), &[sc.channels]);
        b.add(format!("enc.s{k}.embed.ln.b"), &[sc.channels]);
        for j in 0..sc.num_blocks {
            for (suffix, shape) in attention::block_param_shapes(sc.channels, sc.ffn_expansion) {
                b.add(format!("enc.s{k}.blk{j}.{suffix}"), &shape);
            }
        }
        b.add(format!("enc.s{k}.out_ln.g"), &[sc.channels]);
        b.add(format!("enc.s{k}.out_ln.b"), &[sc.channels]);
        in_c = sc.channels;
    }
    for (k, sc) in cfg.stages.iter().enumerate() {
        b.add(format!("dec.proj{k}.w"), &[sc.channels, cfg.decoder_dim]);
        b.add(format!("dec.proj{k}.b"), &[cfg.decoder_dim]);
    }
    b.add(
        "dec.fuse.w",
        &[cfg.stages.len() * cfg.decoder_dim, cfg.decoder_dim],
    );
    b.add("dec.fuse.b", &[cfg.decoder_dim]);
    b.add("dec.cls.w", &[cfg.decoder_dim, cfg.num_classes]);
    b.add("dec.cls.b", &[cfg.num_classes]);
    b.build()
}

/// Truncated-normal weights (sigma 0.02, resampled beyond 2 sigma),
/// zero biases, unit norm gains.
pub fn init_params<S: Scalar>(layout: Arc<ParamLayout>, seed: u64) -> ParamBuf<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = ParamBuf::zeros(layout.clone());
    for spec in layout.specs() {
        if spec.shape.len() == 1 {
            if spec.name.ends_with("ln.g") {
                let start = spec.offset;
                for v in &mut buf.data_mut()[start..start + spec.len()] {
                    *v = S::one();
                }
            }
            // biases and norm shifts stay zero
            continue;
        }
        let start = spec.offset;
        for v in &mut buf.data_mut()[start..start + spec.len()] {
            let z = loop {
                let z: f64 = {
                    let s: S = S::standard_normal(&mut rng);
                    s.as_f64()
                };
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            *v = S::cast(0.02 * z);
        }
    }
    buf
}

/// Per-stage paired features, `[b, C_k, h_k, w_k]` each flow.
#[derive(Debug, Clone)]
pub struct FlowFeatures<S: Scalar> {
    pub f_l: Tensor4<S>,
    pub f_u: Tensor4<S>,
}

/// One train-mode forward over a paired batch, with everything the
/// backward pass needs.
pub struct PairForward<S: Scalar> {
    pub logits_l: Tensor4<S>,
    pub logits_u: Tensor4<S>,
    traces: Vec<PairTrace<S>>,
    dims: Vec<(usize, usize)>,
}

struct PairTrace<S: Scalar> {
    enc: EncoderCachePair<S>,
    dec_l: DecoderCache<S>,
    dec_u: DecoderCache<S>,
}

impl<S: Scalar> PairForward<S> {
    /// Every channel-affinity matrix computed during the forward pass,
    /// for normalization diagnostics.
    pub fn affinity_matrices(&self) -> Vec<&Array2<S>> {
        let mut out = Vec::new();
        for t in &self.traces {
            for st in &t.enc.stages {
                for blk in &st.blocks {
                    out.extend(blk.affinities());
                }
            }
        }
        out
    }
}

/// Single-flow train forward (self-attention only), used for inference
/// equivalence checks and the plain pseudo-labeling baseline.
pub struct SingleForward<S: Scalar> {
    pub logits: Tensor4<S>,
    traces: Vec<SingleTrace<S>>,
    dims: Vec<(usize, usize)>,
}

struct SingleTrace<S: Scalar> {
    enc: EncoderCacheSingle<S>,
    dec: DecoderCache<S>,
}

impl<S: Scalar> SingleForward<S> {
    pub fn affinity_matrices(&self) -> Vec<&Array2<S>> {
        let mut out = Vec::new();
        for t in &self.traces {
            for st in &t.enc.stages {
                for blk in &st.blocks {
                    out.extend(blk.affinities());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    layout: Arc<ParamLayout>,
    params: ParamBuf<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model<S>> {
        config.validate()?;
        let layout = build_layout(&config);
        let params = init_params(layout.clone(), seed);
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamBuf<S>) -> Result<Model<S>> {
        config.validate()?;
        let layout = build_layout(&config);
        if params.len() != layout.total_len() {
            return Err(Error::Checkpoint(format!(
                "parameter buffer length {} does not match config ({})",
                params.len(),
                layout.total_len()
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn params(&self) -> &ParamBuf<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamBuf<S> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    pub fn zero_grads(&self) -> ParamBuf<S> {
        ParamBuf::zeros(self.layout.clone())
    }

    fn check_images(&self, images: &Tensor4<S>) -> Result<()> {
        let (b, c, h, w) = images.dim();
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        if c != self.config.in_channels {
            return Err(Error::contract(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.validate_image(h, w)
    }

    /// Paired-flow training forward: labeled images drive the labeled
    /// flow, unlabeled (mixed) images the unlabeled flow, coupled per
    /// sample pair j.
    pub fn forward_pair(
        &self,
        images_l: &Tensor4<S>,
        images_u: &Tensor4<S>,
    ) -> Result<PairForward<S>> {
        self.check_images(images_l)?;
        if images_l.dim() != images_u.dim() {
            return Err(Error::contract(format!(
                "flow batches must share shape: {:?} vs {:?}",
                images_l.dim(),
                images_u.dim()
            )));
        }
        let (b, _c, h, w) = images_l.dim();
        let dims = self.config.stage_dims(h, w);
        let per_pair: Vec<Result<_>> = (0..b)
            .into_par_iter()
            .map(|j| {
                let plane_l = images_l.index_axis(Axis(0), j).to_owned();
                let plane_u = images_u.index_axis(Axis(0), j).to_owned();
                let enc = encoder_pair_fwd(&self.config, &self.params, &plane_l, &plane_u)?;
                let (logits_l, dec_l) =
                    decoder_fwd(&self.config, &self.params, &enc.outs_l, &dims, (h, w));
                let (logits_u, dec_u) =
                    decoder_fwd(&self.config, &self.params, &enc.outs_u, &dims, (h, w));
                Ok((logits_l, logits_u, PairTrace { enc, dec_l, dec_u }))
            })
            .collect();
        let mut logit_planes_l = Vec::with_capacity(b);
        let mut logit_planes_u = Vec::with_capacity(b);
        let mut traces = Vec::with_capacity(b);
        for r in per_pair {
            let (ll, lu, t) = r?;
            logit_planes_l.push(ll);
            logit_planes_u.push(lu);
            traces.push(t);
        }
        Ok(PairForward {
            logits_l: stack_planes(&logit_planes_l),
            logits_u: stack_planes(&logit_planes_u),
            traces,
            dims,
        })
    }

    /// Backward through a paired forward; gradients of all parameters,
    /// reduced over pairs in index order.
    pub fn backward_pair(
        &self,
        fwd: &PairForward<S>,
        dlogits_l: &Tensor4<S>,
        dlogits_u: &Tensor4<S>,
    ) -> ParamBuf<S> {
        let b = fwd.traces.len();
        let per_pair: Vec<ParamBuf<S>> = (0..b)
            .into_par_iter()
            .map(|j| {
                let mut grads = ParamBuf::zeros(self.layout.clone());
                let t = &fwd.traces[j];
                let dll = dlogits_l.index_axis(Axis(0), j).to_owned();
                let dlu = dlogits_u.index_axis(Axis(0), j).to_owned();
                let douts_l = decoder_bwd(
                    &self.config,
                    &self.params,
                    &t.dec_l,
                    &t.enc.outs_l,
                    &fwd.dims,
                    &dll,
                    &mut grads,
                );
                let douts_u = decoder_bwd(
                    &self.config,
                    &self.params,
                    &t.dec_u,
                    &t.enc.outs_u,
                    &fwd.dims,
                    &dlu,
                    &mut grads,
                );
                encoder_pair_bwd(&self.config, &self.params, &t.enc, douts_l, douts_u, &mut grads);
                grads
            })
            .collect();
        let mut total = ParamBuf::zeros(self.layout.clone());
        for g in &per_pair {
            total.add_assign(g);
        }
        total
    }

    /// Single-flow train forward with caches (self-attention only).
    pub fn forward_single(&self, images: &Tensor4<S>) -> Result<SingleForward<S>> {
        self.check_images(images)?;
        let (b, _c, h, w) = images.dim();
        let dims = self.config.stage_dims(h, w);
        let per: Vec<Result<_>> = (0..b)
            .into_par_iter()
            .map(|j| {
                let plane = images.index_axis(Axis(0), j).to_owned();
                let enc = encoder_single_fwd(&self.config, &self.params, &plane)?;
                let (logits, dec) =
                    decoder_fwd(&self.config, &self.params, &enc.outs, &dims, (h, w));
                Ok((logits, SingleTrace { enc, dec }))
            })
            .collect();
        let mut planes = Vec::with_capacity(b);
        let mut traces = Vec::with_capacity(b);
        for r in per {
            let (l, t) = r?;
            planes.push(l);
            traces.push(t);
        }
        Ok(SingleForward {
            logits: stack_planes(&planes),
            traces,
            dims,
        })
    }

    /// Backward through a single-flow forward, accumulating into `grads`
    /// sample by sample in index order.
    pub fn backward_single_into(
        &self,
        fwd: &SingleForward<S>,
        dlogits: &Tensor4<S>,
        grads: &mut ParamBuf<S>,
    ) {
        for (j, t) in fwd.traces.iter().enumerate() {
            let dl = dlogits.index_axis(Axis(0), j).to_owned();
            let douts = decoder_bwd(
                &self.config,
                &self.params,
                &t.dec,
                &t.enc.outs,
                &fwd.dims,
                &dl,
                grads,
            );
            encoder_single_bwd(&self.config, &self.params, &t.enc, douts, grads);
        }
    }

    /// Inference: one self-attention flow, then channel argmax with ties
    /// broken toward the lower class.
    pub fn predict(&self, images: &Tensor4<S>) -> Result<(Tensor4<S>, Array3<usize>)> {
        let fwd = self.forward_single(images)?;
        let map = argmax_channel(&fwd.logits);
        Ok((fwd.logits, map))
    }

    /// Literal "double the batch through both flows" inference. Kept as a
    /// verification mode: it must match [`Model::predict`] within float
    /// round-off of the alpha blend.
    pub fn predict_doubled(&self, images: &Tensor4<S>) -> Result<(Tensor4<S>, Tensor4<S>)> {
        let fwd = self.forward_pair(images, images)?;
        Ok((fwd.logits_l, fwd.logits_u))
    }

    /// Per-stage paired features of the encoder (the public view of the
    /// hierarchy). Train mode couples the flows; infer mode runs each
    /// flow independently with self-attention.
    pub fn encoder_forward(
        &self,
        images_l: &Tensor4<S>,
        images_u: &Tensor4<S>,
        mode: Mode,
    ) -> Result<Vec<FlowFeatures<S>>> {
        self.check_images(images_l)?;
        if images_l.dim() != images_u.dim() {
            return Err(Error::contract("flow batches must share shape".to_string()));
        }
        let (b, _c, h, w) = images_l.dim();
        let dims = self.config.stage_dims(h, w);
        let mut per_stage_l: Vec<Vec<Array3<S>>> = vec![Vec::new(); 4];
        let mut per_stage_u: Vec<Vec<Array3<S>>> = vec![Vec::new(); 4];
        for j in 0..b {
            let plane_l = images_l.index_axis(Axis(0), j).to_owned();
            let plane_u = images_u.index_axis(Axis(0), j).to_owned();
            let (outs_l, outs_u) = match mode {
                Mode::Train => {
                    let enc = encoder_pair_fwd(&self.config, &self.params, &plane_l, &plane_u)?;
                    (enc.outs_l, enc.outs_u)
                }
                Mode::Infer => {
                    let el = encoder_single_fwd(&self.config, &self.params, &plane_l)?;
                    let eu = encoder_single_fwd(&self.config, &self.params, &plane_u)?;
                    (el.outs, eu.outs)
                }
            };
            for k in 0..4 {
                per_stage_l[k].push(plane_from_tokens(outs_l[k].view(), dims[k].0, dims[k].1));
                per_stage_u[k].push(plane_from_tokens(outs_u[k].view(), dims[k].0, dims[k].1));
            }
        }
        Ok((0..4)
            .map(|k| FlowFeatures {
                f_l: stack_planes(&per_stage_l[k]),
                f_u: stack_planes(&per_stage_u[k]),
            })
            .collect())
    }

    /// Decodes per-stage features of one flow into `[b, L, H, W]` logits.
    pub fn decoder_forward(&self, features: &[Tensor4<S>]) -> Result<Tensor4<S>> {
        if features.len() != self.config.stages.len() {
            return Err(Error::contract(format!(
                "expected {} stage features, got {}",
                self.config.stages.len(),
                features.len()
            )));
        }
        let b = features[0].dim().0;
        let dims: Vec<(usize, usize)> = features.iter().map(|f| (f.dim().2, f.dim().3)).collect();
        for (k, f) in features.iter().enumerate() {
            if f.dim().0 != b || f.dim().1 != self.config.stages[k].channels {
                return Err(Error::contract(format!(
                    "stage {k} features have shape {:?}",
                    f.dim()
                )));
            }
        }
        let out_hw = (
            dims[0].0 * self.config.stages[0].patch_stride,
            dims[0].1 * self.config.stages[0].patch_stride,
        );
        let mut planes = Vec::with_capacity(b);
        for j in 0..b {
            let outs: Vec<Array2<S>> = features
                .iter()
                .map(|f| tokens_from_plane(f.index_axis(Axis(0), j)))
                .collect();
            let (logits, _) = decoder_fwd(&self.config, &self.params, &outs, &dims, out_hw);
            planes.push(logits);
        }
        Ok(stack_planes(&planes))
    }

    /// One encoder block applied to paired features, by stage and block
    /// index. Train mode runs the blended cross/self path for the labeled
    /// flow; infer mode runs self-attention in both flows.
    pub fn messenger_block_forward(
        &self,
        stage: usize,
        block: usize,
        flow: &FlowFeatures<S>,
        mode: Mode,
    ) -> Result<FlowFeatures<S>> {
        let sc = self
            .config
            .stages
            .get(stage)
            .ok_or_else(|| Error::contract(format!("stage {stage} out of range")))?;
        if block >= sc.num_blocks {
            return Err(Error::contract(format!(
                "block {block} out of range for stage {stage}"
            )));
        }
        if flow.f_l.dim() != flow.f_u.dim() {
            return Err(Error::contract("flow features must share shape".to_string()));
        }
        let (b, c, h, w) = flow.f_l.dim();
        if c != sc.channels {
            return Err(Error::contract(format!(
                "stage {stage} expects {} channels, got {c}",
                sc.channels
            )));
        }
        let bp = BlockParams::from_buf(
            &self.params,
            &format!("enc.s{stage}.blk{block}"),
            self.config.alpha,
            self.config.attn_heads,
        );
        let mut outs_l = Vec::with_capacity(b);
        let mut outs_u = Vec::with_capacity(b);
        for j in 0..b {
            let xl = tokens_from_plane(flow.f_l.index_axis(Axis(0), j));
            let xu = tokens_from_plane(flow.f_u.index_axis(Axis(0), j));
            let (zl, zu) = match mode {
                Mode::Train => {
                    let (zl, zu, _) = block_pair_fwd(&bp, &xl, &xu, h, w)
                        .map_err(|e| encoder::stage_context(e, stage, block))?;
                    (zl, zu)
                }
                Mode::Infer => {
                    let (zl, _) = block_single_fwd(&bp, &xl, h, w)
                        .map_err(|e| encoder::stage_context(e, stage, block))?;
                    let (zu, _) = block_single_fwd(&bp, &xu, h, w)
                        .map_err(|e| encoder::stage_context(e, stage, block))?;
                    (zl, zu)
                }
            };
            outs_l.push(plane_from_tokens(zl.view(), h, w));
            outs_u.push(plane_from_tokens(zu.view(), h, w));
        }
        Ok(FlowFeatures {
            f_l: stack_planes(&outs_l),
            f_u: stack_planes(&outs_u),
        })
    }
}

/// Draws one u64 from a seed stream; shared helper for deterministic
/// sub-seeding.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}
