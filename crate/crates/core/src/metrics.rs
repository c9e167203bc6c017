//! Segmentation quality metrics: Dice, Jaccard, average surface distance
//! and 95th-percentile Hausdorff distance, per class and averaged.
//!
//! Overlap metrics are exact integer-count ratios. Surface metrics use an
//! exact Euclidean distance transform over the pixel grid, so they agree
//! with an all-pairs nearest-neighbor computation to floating-point
//! precision. Surface metrics are undefined when either mask is empty and
//! are flagged as such rather than reported as zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;

use crate::dataio::CorpusIndex;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor;

/// Binary segmentation mask, `[h, w]`.
pub type Mask = Array2<bool>;

/// Dice overlap `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// Jaccard overlap `|P∩G| / |P∪G|`; 1 when both masks are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

fn overlap_counts(pred: &Mask, gt: &Mask) -> Result<(u64, u64, u64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::contract(format!(
            "mask shape mismatch: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut i = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        p += a as u64;
        g += b as u64;
        i += (a && b) as u64;
    }
    Ok((i, p, g))
}

/// Average surface distance and 95th-percentile Hausdorff distance between
/// mask boundaries, in physical units given `spacing = (sy, sx)`.
///
/// Boundary pixels are mask pixels 4-adjacent to a non-mask pixel or the
/// image border. ASD averages the two directed mean nearest-neighbor
/// distances; HD95 is the linear-interpolated 95th percentile of the
/// pooled directed distances.
///
/// Errors with `Contract` when either mask has no pixels; callers flag the
/// metric as undefined instead of recording a value.
pub fn surface_distances(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::contract(format!(
            "mask shape mismatch: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::contract(
            "surface distance undefined for an empty mask",
        ));
    }
    let (h, w) = pred.dim();
    let dist_to_g = distance_field(&bg, h, w, spacing);
    let dist_to_p = distance_field(&bp, h, w, spacing);

    let d_pg: Vec<f64> = bp.iter().map(|&(y, x)| dist_to_g[[y, x]].sqrt()).collect();
    let d_gp: Vec<f64> = bg.iter().map(|&(y, x)| dist_to_p[[y, x]].sqrt()).collect();

    let mean_pg = d_pg.iter().sum::<f64>() / d_pg.len() as f64;
    let mean_gp = d_gp.iter().sum::<f64>() / d_gp.len() as f64;
    let asd = 0.5 * (mean_pg + mean_gp);

    let mut pooled: Vec<f64> = d_pg.into_iter().chain(d_gp).collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let hd95 = percentile_sorted(&pooled, 0.95);

    Ok((asd, hd95))
}

/// Boundary of a mask: mask pixels 4-adjacent to a non-mask or border pixel.
fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest seed pixel, for every
/// grid pixel, by the two-pass lower-envelope-of-parabolas transform.
fn distance_field(seeds: &[(usize, usize)], h: usize, w: usize, spacing: (f64, f64)) -> Array2<f64> {
    let mut field = Array2::from_elem((h, w), f64::INFINITY);
    for &(y, x) in seeds {
        field[[y, x]] = 0.0;
    }
    // Rows first (x axis), then columns; squared terms separate per axis.
    let mut buf_in = vec![0.0f64; w.max(h)];
    let mut buf_out = vec![0.0f64; w.max(h)];
    for y in 0..h {
        for x in 0..w {
            buf_in[x] = field[[y, x]];
        }
        dt_1d(&buf_in[..w], &mut buf_out[..w], spacing.1);
        for x in 0..w {
            field[[y, x]] = buf_out[x];
        }
    }
    for x in 0..w {
        for y in 0..h {
            buf_in[y] = field[[y, x]];
        }
        dt_1d(&buf_in[..h], &mut buf_out[..h], spacing.0);
        for y in 0..h {
            field[[y, x]] = buf_out[y];
        }
    }
    field
}

/// 1-D squared distance transform with sample spacing `s`:
/// `out[x] = min_i f[i] + (s * (x - i))^2`.
fn dt_1d(f: &[f64], out: &mut [f64], s: f64) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    let s2 = s * s;
    // Parabola apexes (v) and boundaries between envelope segments (z).
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let sep = if f[p].is_infinite() {
                f64::NEG_INFINITY
            } else {
                (f[q] - f[p] + s2 * ((q * q) as f64 - (p * p) as f64))
                    / (2.0 * s2 * (q as f64 - p as f64))
            };
            if sep <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sep;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for x in 0..n {
        while z[k + 1] < x as f64 {
            k += 1;
        }
        let i = v[k];
        let d = s * (x as f64 - i as f64);
        out[x] = if f[i].is_infinite() {
            f64::INFINITY
        } else {
            f[i] + d * d
        };
    }
}

/// Percentile with linear interpolation between order statistics;
/// input must be sorted ascending.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Per-class metric values aggregated over samples.
///
/// `asd`/`hd95` are `None` when undefined for every sample (e.g. class
/// absent throughout); otherwise they average the defined samples only.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    /// Samples for which the surface metrics were defined.
    pub surface_defined: usize,
}

/// Evaluation result over a split: per foreground class and averaged.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_asd: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub sample_count: usize,
    pub split: String,
    pub domain_ids: Vec<u32>,
    pub seed: u64,
}

impl MetricReport {
    /// CSV with provenance comments; schema documented in the README.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# split={}", self.split);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# samples={}", self.sample_count);
        let _ = writeln!(
            out,
            "# domains={}",
            self.domain_ids
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        );
        let _ = writeln!(out, "class,dice,jaccard,asd,hd95");
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "undefined".to_string(),
        };
        for (class, m) in &self.per_class {
            let _ = writeln!(
                out,
                "{class},{:.6},{:.6},{},{}",
                m.dice,
                m.jaccard,
                fmt_opt(m.asd),
                fmt_opt(m.hd95)
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{},{}",
            self.mean_dice,
            self.mean_jaccard,
            fmt_opt(self.mean_asd),
            fmt_opt(self.mean_hd95)
        );
        out
    }

    /// Fixed-width text table for terminals and the run summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "split={} seed={} samples={}",
            self.split, self.seed, self.sample_count
        );
        let _ = writeln!(out, "{:>7} {:>9} {:>9} {:>9} {:>9}", "class", "dice", "jaccard", "asd", "hd95");
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:9.4}"),
            None => format!("{:>9}", "undef"),
        };
        for (class, m) in &self.per_class {
            let _ = writeln!(
                out,
                "{:>7} {:9.4} {:9.4} {} {}",
                class,
                m.dice,
                m.jaccard,
                fmt_opt(m.asd),
                fmt_opt(m.hd95)
            );
        }
        let _ = writeln!(
            out,
            "{:>7} {:9.4} {:9.4} {} {}",
            "mean",
            self.mean_dice,
            self.mean_jaccard,
            fmt_opt(self.mean_asd),
            fmt_opt(self.mean_hd95)
        );
        out
    }
}

/// Runs the model over a split and aggregates per-class metrics.
///
/// Per sample and foreground class, predicted and ground-truth masks are
/// compared; per-class values are averaged over samples (surface metrics
/// over the samples where they are defined), then class means over
/// foreground classes. Iteration follows manifest order, so the result is
/// deterministic.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    index: &CorpusIndex,
    split: &str,
    seed: u64,
) -> Result<MetricReport> {
    let entries = index.split(split)?;
    if entries.is_empty() {
        return Err(Error::config(format!("split '{split}' is empty")));
    }
    let num_classes = model.config().num_classes;
    let mut dice_sum = vec![0.0f64; num_classes];
    let mut jacc_sum = vec![0.0f64; num_classes];
    let mut asd_sum = vec![0.0f64; num_classes];
    let mut hd_sum = vec![0.0f64; num_classes];
    let mut surface_n = vec![0usize; num_classes];
    let mut overlap_n = vec![0usize; num_classes];
    let mut domain_ids: Vec<u32> = Vec::new();

    for entry in &entries {
        let sample = index.load_sample(&entry.sample_id)?;
        if !domain_ids.contains(&sample.domain_id) {
            domain_ids.push(sample.domain_id);
        }
        let label = sample.label.as_ref().ok_or_else(|| {
            Error::config(format!(
                "sample '{}' in split '{split}' has no label to evaluate against",
                entry.sample_id
            ))
        })?;
        let (_logits, pred_map) = model.predict(&sample.image)?;
        let gt_map = tensor::argmax_channel(label);
        let (_, h, w) = pred_map.dim();
        for class in 1..num_classes {
            let pred = Array2::from_shape_fn((h, w), |(y, x)| pred_map[[0, y, x]] == class);
            let gt = Array2::from_shape_fn((h, w), |(y, x)| gt_map[[0, y, x]] == class);
            dice_sum[class] += dice(&pred, &gt)?;
            jacc_sum[class] += jaccard(&pred, &gt)?;
            overlap_n[class] += 1;
            if let Ok((asd, hd95)) = surface_distances(&pred, &gt, (1.0, 1.0)) {
                asd_sum[class] += asd;
                hd_sum[class] += hd95;
                surface_n[class] += 1;
            }
        }
    }

    let mut per_class = BTreeMap::new();
    for class in 1..num_classes {
        let n = overlap_n[class] as f64;
        per_class.insert(
            class,
            ClassMetrics {
                dice: dice_sum[class] / n,
                jaccard: jacc_sum[class] / n,
                asd: (surface_n[class] > 0).then(|| asd_sum[class] / surface_n[class] as f64),
                hd95: (surface_n[class] > 0).then(|| hd_sum[class] / surface_n[class] as f64),
                surface_defined: surface_n[class],
            },
        );
    }
    let k = per_class.len() as f64;
    let mean_dice = per_class.values().map(|m| m.dice).sum::<f64>() / k;
    let mean_jaccard = per_class.values().map(|m| m.jaccard).sum::<f64>() / k;
    let defined_asd: Vec<f64> = per_class.values().filter_map(|m| m.asd).collect();
    let defined_hd: Vec<f64> = per_class.values().filter_map(|m| m.hd95).collect();
    let mean_asd =
        (!defined_asd.is_empty()).then(|| defined_asd.iter().sum::<f64>() / defined_asd.len() as f64);
    let mean_hd95 =
        (!defined_hd.is_empty()).then(|| defined_hd.iter().sum::<f64>() / defined_hd.len() as f64);

    Ok(MetricReport {
        per_class,
        mean_dice,
        mean_jaccard,
        mean_asd,
        mean_hd95,
        sample_count: entries.len(),
        split: split.to_string(),
        domain_ids,
        seed,
    })
}
