//! Pseudo-labeling training loop with both deliveries installed.
//!
//! Each step: slice a foreground patch from every labeled sample into its
//! paired unlabeled image, forward both flows, turn the unlabeled logits
//! into one-hot pseudo-labels, overwrite the pasted region with the donor
//! ground truth, and descend the summed cross-entropies with SGD under a
//! polynomial learning-rate schedule. `alpha = 0` and `patch_size = 0`
//! remove the deliveries exactly, leaving a plain pseudo-labeling
//! baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    model_config_from_header, model_config_to_header, parse_header_field, read_container,
    write_container, Header, NamedTensor,
};
use crate::dataio::{augment, next_pair, CorpusIndex, PairedBatch};
use crate::error::{Error, Result};
use crate::l2u::{mix, select_patch, PatchSpec};
use crate::model::layout::ParamBuf;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor;
use crate::Tensor4;

/// Polynomial decay `lr_init * (1 - i/I)^0.9`; nonincreasing in `i`,
/// `lr_init` at 0 and exactly 0 at `I`.
pub fn poly_lr(lr_init: f64, iter: usize, total: usize) -> Result<f64> {
    if iter > total {
        return Err(Error::contract(format!(
            "iteration {iter} beyond schedule end {total}"
        )));
    }
    Ok(lr_init * (1.0 - iter as f64 / total as f64).powf(0.9))
}

/// One-hot pseudo-labels from logits: channel argmax (ties toward the
/// lower class), nearest-neighbor upsampling to `(h, w)`. The result is a
/// fresh constant tensor; no gradient flows through it.
pub fn make_pseudo_labels<S: Scalar>(logits: &Tensor4<S>, h: usize, w: usize) -> Tensor4<S> {
    let classes = tensor::argmax_channel(logits);
    let one_hot = tensor::one_hot_from_classes::<S>(&classes, logits.dim().1);
    tensor::nearest_upsample(&one_hot, h, w)
}

fn check_one_hot_target<S: Scalar>(target: &Tensor4<S>, what: &str) -> Result<()> {
    if !tensor::is_one_hot(target) {
        return Err(Error::contract(format!("{what} target is not one-hot")));
    }
    Ok(())
}

/// Mean softmax cross-entropy over batch and pixels, with the logits
/// gradient. Targets must be exactly one-hot.
pub fn cross_entropy_with_grad<S: Scalar>(
    logits: &Tensor4<S>,
    target: &Tensor4<S>,
) -> Result<(f64, Tensor4<S>)> {
    if logits.dim() != target.dim() {
        return Err(Error::contract(format!(
            "logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    check_one_hot_target(target, "cross-entropy")?;
    let (b, l, h, w) = logits.dim();
    let inv_count = 1.0 / (b * h * w) as f64;
    let inv_count_s = S::cast(inv_count);
    let mut grad = Tensor4::zeros((b, l, h, w));
    let mut loss = 0.0f64;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut max = S::neg_infinity();
                for c in 0..l {
                    max = max.max(logits[[bi, c, y, x]]);
                }
                let mut sum = S::zero();
                for c in 0..l {
                    sum += (logits[[bi, c, y, x]] - max).exp();
                }
                let log_sum = sum.ln();
                for c in 0..l {
                    let log_p = logits[[bi, c, y, x]] - max - log_sum;
                    let p = log_p.exp();
                    let t = target[[bi, c, y, x]];
                    if t == S::one() {
                        loss -= log_p.as_f64();
                    }
                    grad[[bi, c, y, x]] = (p - t) * inv_count_s;
                }
            }
        }
    }
    Ok((loss * inv_count, grad))
}

/// Supervised loss: cross-entropy of labeled-flow logits against ground
/// truth.
pub fn supervised_loss<S: Scalar>(logits: &Tensor4<S>, target: &Tensor4<S>) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, target)?.0)
}

/// Unsupervised loss: cross-entropy of unlabeled-flow logits against the
/// mixed pseudo-label. Weighted equally with the supervised term.
pub fn unsupervised_loss<S: Scalar>(logits: &Tensor4<S>, target: &Tensor4<S>) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, target)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub total_iters: usize,
    /// Even; half labeled, half unlabeled.
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// L2U patch side length; 0 disables the delivery.
    pub patch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl TrainConfig {
    /// Desk-scale defaults; paper-scale runs use batch_size 16.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            lr_init: 0.01,
            total_iters: 2000,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            patch_size: 32,
            seed,
            checkpoint_every: 500,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::config(format!(
                "batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be >= 1"));
        }
        if !(self.lr_init > 0.0) {
            return Err(Error::config("lr_init must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be >= 1"));
        }
        Ok(())
    }

    pub fn to_header(&self, header: &mut Header) {
        header.insert("train.lr_init".into(), format!("{:?}", self.lr_init));
        header.insert("train.total_iters".into(), self.total_iters.to_string());
        header.insert("train.batch_size".into(), self.batch_size.to_string());
        header.insert("train.momentum".into(), format!("{:?}", self.momentum));
        header.insert(
            "train.weight_decay".into(),
            format!("{:?}", self.weight_decay),
        );
        header.insert("train.patch_size".into(), self.patch_size.to_string());
        header.insert("train.seed".into(), self.seed.to_string());
        header.insert(
            "train.checkpoint_every".into(),
            self.checkpoint_every.to_string(),
        );
        header.insert("train.augment".into(), self.augment.to_string());
    }

    pub fn from_header(header: &Header) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr_init: parse_header_field(header, "train.lr_init")?,
            total_iters: parse_header_field(header, "train.total_iters")?,
            batch_size: parse_header_field(header, "train.batch_size")?,
            momentum: parse_header_field(header, "train.momentum")?,
            weight_decay: parse_header_field(header, "train.weight_decay")?,
            patch_size: parse_header_field(header, "train.patch_size")?,
            seed: parse_header_field(header, "train.seed")?,
            checkpoint_every: parse_header_field(header, "train.checkpoint_every")?,
            augment: parse_header_field(header, "train.augment")?,
        })
    }
}

/// Per-iteration record; the loss log is these rows as CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_s: f64,
    pub loss_u: f64,
}

impl LossRow {
    pub fn total(&self) -> f64 {
        self.loss_s + self.loss_u
    }
}

/// Everything that evolves during training. Checkpoints capture all of it
/// bit-exactly, so a resumed run continues the original trajectory.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub model: Model<S>,
    pub momentum: ParamBuf<S>,
    pub iter: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossRow>,
    pub config: TrainConfig,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model_cfg: ModelConfig, config: TrainConfig) -> Result<TrainState<S>> {
        config.validate()?;
        let model = Model::new(model_cfg, config.seed)?;
        let momentum = model.zero_grads();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(TrainState {
            model,
            momentum,
            iter: 0,
            rng,
            history: Vec::new(),
        config,
        })
    }
}

/// One optimizer step over a paired batch. The batch should already be
/// augmented; mixing happens here.
pub fn train_step<S: Scalar>(state: &mut TrainState<S>, batch: &PairedBatch<S>) -> Result<LossRow> {
    batch.validate()?;
    let cfg = &state.config;
    if state.iter >= cfg.total_iters {
        return Err(Error::contract(format!(
            "training already finished ({} iterations)",
            cfg.total_iters
        )));
    }
    let b = batch.half_size();
    let (_, _l, h, w) = batch.labeled_labels.dim();

    // L2U delivery, image side: paste a donor patch into each unlabeled
    // image. patch_size == 0 skips everything, including rng draws, so a
    // disabled delivery leaves the trajectory untouched.
    let mut patches: Vec<PatchSpec> = Vec::with_capacity(b);
    let mixed_images = if cfg.patch_size > 0 {
        let mut planes = Vec::with_capacity(b);
        for j in 0..b {
            let donor_label = batch
                .labeled_labels
                .slice(s![j..j + 1, .., .., ..])
                .to_owned();
            let patch = select_patch(&donor_label, cfg.patch_size, &mut state.rng);
            let (mixed, _) = mix(
                &batch.unlabeled_images.slice(s![j..j + 1, .., .., ..]).to_owned(),
                &donor_label,
                &batch.labeled_images.slice(s![j..j + 1, .., .., ..]).to_owned(),
                &donor_label,
                patch,
            )?;
            planes.push(mixed.index_axis(ndarray::Axis(0), 0).to_owned());
            patches.push(patch);
        }
        tensor::stack_planes(&planes)
    } else {
        batch.unlabeled_images.clone()
    };

    // Single forward of the paired flows.
    let fwd = state.model.forward_pair(&batch.labeled_images, &mixed_images)?;

    // Pseudo-labels from the same forward pass, then exact supervision
    // inside the pasted regions.
    let pseudo = assemble_unsupervised_target(&fwd.logits_u, &batch.labeled_labels, &patches, h, w);

    let (loss_s, dlogits_l) = cross_entropy_with_grad(&fwd.logits_l, &batch.labeled_labels)?;
    let (loss_u, dlogits_u) = cross_entropy_with_grad(&fwd.logits_u, &pseudo)?;
    let lr = poly_lr(cfg.lr_init, state.iter, cfg.total_iters)?;
    if !loss_s.is_finite() || !loss_u.is_finite() {
        return Err(Error::numeric(
            "train_step",
            format!(
                "non-finite loss at iteration {} (lr {lr:.6e}, loss_s {loss_s}, loss_u {loss_u})",
                state.iter
            ),
        ));
    }

    let grads = state.model.backward_pair(&fwd, &dlogits_l, &dlogits_u);
    sgd_update(
        state.model.params_mut(),
        &mut state.momentum,
        &grads,
        S::cast(lr),
        S::cast(cfg.momentum),
        S::cast(cfg.weight_decay),
    );

    let row = LossRow {
        iter: state.iter,
        lr,
        loss_s,
        loss_u,
    };
    state.iter += 1;
    state.history.push(row);
    Ok(row)
}

/// The unsupervised target: one-hot pseudo-labels from the unlabeled-flow
/// logits, with every pasted patch region overwritten by the donor's
/// ground truth. The j-th patch belongs to the j-th sample pair.
pub fn assemble_unsupervised_target<S: Scalar>(
    logits_u: &Tensor4<S>,
    donor_labels: &Tensor4<S>,
    patches: &[PatchSpec],
    h: usize,
    w: usize,
) -> Tensor4<S> {
    let mut pseudo = make_pseudo_labels(logits_u, h, w);
    for (j, patch) in patches.iter().enumerate() {
        if patch.size == 0 {
            continue;
        }
        let (y0, y1) = (patch.row, patch.row + patch.size);
        let (x0, x1) = (patch.col, patch.col + patch.size);
        pseudo
            .slice_mut(s![j..j + 1, .., y0..y1, x0..x1])
            .assign(&donor_labels.slice(s![j..j + 1, .., y0..y1, x0..x1]));
    }
    pseudo
}

/// SGD with momentum and L2 weight decay:
/// `v <- m*v + (g + wd*p); p <- p - lr*v`.
pub fn sgd_update<S: Scalar>(
    params: &mut ParamBuf<S>,
    momentum: &mut ParamBuf<S>,
    grads: &ParamBuf<S>,
    lr: S,
    m: S,
    wd: S,
) {
    for ((p, v), g) in params
        .data_mut()
        .iter_mut()
        .zip(momentum.data_mut().iter_mut())
        .zip(grads.data().iter())
    {
        let g = *g + wd * *p;
        *v = m * *v + g;
        *p = *p - lr * *v;
    }
}

/// Runs training to completion, drawing batches, augmenting, stepping and
/// (when `run_dir` is set) appending the loss log and writing periodic
/// checkpoints.
pub fn run_training<S: Scalar>(
    state: &mut TrainState<S>,
    index: &CorpusIndex,
    run_dir: Option<&Path>,
) -> Result<()> {
    if index.num_classes() != state.model.config().num_classes {
        return Err(Error::config(format!(
            "corpus has {} classes but the model expects {}",
            index.num_classes(),
            state.model.config().num_classes
        )));
    }
    let half = state.config.batch_size / 2;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir.join("checkpoints"))
            .map_err(|e| Error::io(dir.join("checkpoints"), e))?;
        // Rewrite the log prefix from restored history so a resumed run
        // produces the same file as an uninterrupted one.
        let mut log = String::from("iter,lr,loss_s,loss_u\n");
        for row in &state.history {
            let _ = writeln!(
                log,
                "{},{:.8e},{:.8e},{:.8e}",
                row.iter, row.lr, row.loss_s, row.loss_u
            );
        }
        fs::write(dir.join("loss.csv"), log).map_err(|e| Error::io(dir.join("loss.csv"), e))?;
    }
    while state.iter < state.config.total_iters {
        let batch = next_pair::<S>(index, half, &mut state.rng)?;
        let batch = if state.config.augment {
            augment(&batch, &mut state.rng)
        } else {
            batch
        };
        let row = train_step(state, &batch)?;
        if let Some(dir) = run_dir {
            let line = format!(
                "{},{:.8e},{:.8e},{:.8e}\n",
                row.iter, row.lr, row.loss_s, row.loss_u
            );
            append(&dir.join("loss.csv"), &line)?;
            if state.iter % state.config.checkpoint_every == 0
                || state.iter == state.config.total_iters
            {
                save_checkpoint(state, &checkpoint_path(dir, state.iter))?;
            }
        }
    }
    Ok(())
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(run_dir: &Path, iter: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("ckpt_{iter:06}.bin"))
}

/// Most recent checkpoint in a run directory, by iteration number.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(iter) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().map_or(true, |(b, _)| iter > *b) {
                best = Some((iter, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Writes the full training state: config header (model + train config,
/// seed, iteration, rng position), model parameters as named tensors,
/// optimizer momentum, and the loss history.
pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, path: &Path) -> Result<()> {
    let mut header = Header::new();
    model_config_to_header(state.model.config(), &mut header);
    state.config.to_header(&mut header);
    header.insert("iteration".into(), state.iter.to_string());
    header.insert("seed".into(), state.config.seed.to_string());
    header.insert("dtype".into(), S::DTYPE.name().to_string());
    let seed_hex: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    header.insert("rng.seed".into(), seed_hex);
    header.insert("rng.stream".into(), state.rng.get_stream().to_string());
    header.insert("rng.word_pos".into(), state.rng.get_word_pos().to_string());

    let mut tensors = Vec::new();
    for spec in state.model.layout().specs() {
        let data = state.model.params().data()[spec.offset..spec.offset + spec.len()].to_vec();
        tensors.push(NamedTensor {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            data,
        });
    }
    tensors.push(NamedTensor {
        name: "opt.momentum".into(),
        shape: vec![state.momentum.len()],
        data: state.momentum.data().to_vec(),
    });
    let fields: [(&str, fn(&LossRow) -> f64); 3] = [
        ("history.lr", |r| r.lr),
        ("history.loss_s", |r| r.loss_s),
        ("history.loss_u", |r| r.loss_u),
    ];
    for (name, f) in fields {
        tensors.push(NamedTensor {
            name: name.into(),
            shape: vec![state.history.len()],
            data: state.history.iter().map(|r| S::cast(f(r))).collect(),
        });
    }
    write_container(path, &header, &tensors)
}

/// Restores a full training state; the continuation reproduces the
/// original run's remaining trajectory bit-exactly.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    let (header, tensors) = read_container::<S>(path)?;
    let model_cfg = model_config_from_header(&header)?;
    let config = TrainConfig::from_header(&header)?;
    let iter: usize = parse_header_field(&header, "iteration")?;

    let seed_hex: String = parse_header_field(&header, "rng.seed")?;
    if seed_hex.len() != 64 {
        return Err(Error::Checkpoint("rng.seed must be 32 bytes hex".into()));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks_exact(2).enumerate() {
        let s = std::str::from_utf8(chunk).expect("hex");
        seed[i] = u8::from_str_radix(s, 16)
            .map_err(|_| Error::Checkpoint("rng.seed is not hex".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse_header_field(&header, "rng.stream")?);
    rng.set_word_pos(parse_header_field(&header, "rng.word_pos")?);

    let mut model = Model::<S>::new(model_cfg, 0)?;
    let layout = model.layout().clone();
    let mut momentum: Option<Vec<S>> = None;
    let mut hist_lr = Vec::new();
    let mut hist_s = Vec::new();
    let mut hist_u = Vec::new();
    let mut loaded = 0usize;
    for t in tensors {
        match t.name.as_str() {
            "opt.momentum" => momentum = Some(t.data),
            "history.lr" => hist_lr = t.data,
            "history.loss_s" => hist_s = t.data,
            "history.loss_u" => hist_u = t.data,
            name => {
                if !layout.contains(name) {
                    return Err(Error::Checkpoint(format!(
                        "unexpected parameter tensor '{name}'"
                    )));
                }
                let spec = layout.spec(name).clone();
                if spec.shape != t.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, expected {:?}",
                        t.shape, spec.shape
                    )));
                }
                model.params_mut().data_mut()[spec.offset..spec.offset + spec.len()]
                    .copy_from_slice(&t.data);
                loaded += 1;
            }
        }
    }
    if loaded != layout.specs().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {loaded} of {} parameter tensors",
            layout.specs().len()
        )));
    }
    let momentum_data =
        momentum.ok_or_else(|| Error::Checkpoint("missing opt.momentum".into()))?;
    if momentum_data.len() != layout.total_len() {
        return Err(Error::Checkpoint("momentum length mismatch".into()));
    }
    let mut momentum = ParamBuf::zeros(layout);
    momentum.data_mut().copy_from_slice(&momentum_data);

    if hist_lr.len() != hist_s.len() || hist_s.len() != hist_u.len() || hist_lr.len() != iter {
        return Err(Error::Checkpoint(format!(
            "history length {} does not match iteration {iter}",
            hist_lr.len()
        )));
    }
    let history = (0..iter)
        .map(|i| LossRow {
            iter: i,
            lr: hist_lr[i].as_f64(),
            loss_s: hist_s[i].as_f64(),
            loss_u: hist_u[i].as_f64(),
        })
        .collect();

    Ok(TrainState {
        model,
        momentum,
        iter,
        rng,
        history,
        config,
    })
}
