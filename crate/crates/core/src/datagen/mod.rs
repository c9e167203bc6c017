//! Synthetic multi-domain 2D segmentation corpora.
//!
//! Scenes are simple parametric shapes rasterized onto a class map; each
//! class renders at a distinct base intensity, then a per-domain style
//! (pixelwise affine, gamma, additive Gaussian noise, box blur — in that
//! order) shifts the appearance. The same scene under two domains keeps
//! its label map and changes only how it looks, which is the property the
//! training scenarios exercise.
//!
//! Corpora are written as 16-bit PGM rasters plus a tab-separated
//! manifest; everything is a pure function of (config, seed).

pub mod raster;

use std::fs;
use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor;
use crate::Tensor4;
use raster::Raster;

/// Appearance of one acquisition domain: five scalar knobs applied to the
/// rendered base image in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    pub domain_id: u32,
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    /// Must be > 0.
    pub gamma: f64,
    /// Must be >= 0.
    pub noise_sigma: f64,
    /// Box-blur radius in pixels.
    pub blur_radius: u32,
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!(
                "domain {}: gamma must be > 0, got {}",
                self.domain_id, self.gamma
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(format!(
                "domain {}: noise_sigma must be >= 0, got {}",
                self.domain_id, self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Built-in style table. Gains stay positive so class intensity order
    /// is preserved, but the absolute levels move enough that a fixed
    /// threshold learned on one domain misreads another.
    pub fn preset(domain_id: u32) -> Result<DomainStyle> {
        let (intensity_gain, intensity_bias, gamma, noise_sigma, blur_radius) = match domain_id {
            0 => (1.00, 0.00, 1.00, 0.02, 0),
            1 => (1.20, 0.08, 0.75, 0.03, 1),
            2 => (0.85, -0.06, 1.35, 0.04, 0),
            3 => (1.10, -0.12, 1.60, 0.05, 1),
            4 => (0.75, 0.15, 0.90, 0.06, 2),
            5 => (1.30, -0.02, 0.60, 0.01, 0),
            _ => {
                return Err(Error::config(format!(
                    "no preset style for domain {domain_id} (0..=5 available)"
                )))
            }
        };
        Ok(DomainStyle {
            domain_id,
            intensity_gain,
            intensity_bias,
            gamma,
            noise_sigma,
            blur_radius,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Ring,
    Rectangle,
}

/// One shape in a scene. `center` and `axes` are `(row, col)` pixel
/// coordinates; `rotation` is radians, counterclockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub class_id: usize,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub rotation: f64,
}

/// Geometry of one sample before styling. Later shapes overwrite earlier
/// ones in the label map; every pixel gets exactly one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shapes: Vec<Shape>,
    pub image_size: (usize, usize),
    pub num_classes: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::config(format!(
                "image size must be at least 16x16, got {h}x{w}"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        for s in &self.shapes {
            if s.class_id == 0 || s.class_id >= self.num_classes {
                return Err(Error::config(format!(
                    "shape class {} outside 1..{}",
                    s.class_id, self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Pixel-inside test against a shape; pixel (y, x) is sampled at its
/// center (y + 0.5, x + 0.5).
fn inside(shape: &Shape, y: usize, x: usize) -> bool {
    let py = y as f64 + 0.5;
    let px = x as f64 + 0.5;
    let dy = py - shape.center.0;
    let dx = px - shape.center.1;
    let (sin, cos) = shape.rotation.sin_cos();
    // Rotate offsets into the shape frame.
    let ry = -dx * sin + dy * cos;
    let rx = dx * cos + dy * sin;
    let (a, b) = (shape.axes.0, shape.axes.1);
    match shape.kind {
        ShapeKind::Ellipse => (ry / a).powi(2) + (rx / b).powi(2) <= 1.0,
        ShapeKind::Ring => {
            let outer = (ry / a).powi(2) + (rx / b).powi(2);
            let inner = (ry / (0.55 * a)).powi(2) + (rx / (0.55 * b)).powi(2);
            outer <= 1.0 && inner > 1.0
        }
        ShapeKind::Rectangle => ry.abs() <= a && rx.abs() <= b,
    }
}

/// Rasterizes the class map: background 0, later shapes overwrite earlier.
pub fn render_label_map(spec: &SceneSpec) -> Result<Array2<usize>> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut map = Array2::zeros((h, w));
    for shape in &spec.shapes {
        for y in 0..h {
            for x in 0..w {
                if inside(shape, y, x) {
                    map[[y, x]] = shape.class_id;
                }
            }
        }
    }
    Ok(map)
}

/// Base intensity for a class before styling: background 0.2, foreground
/// classes evenly spaced up to 0.8.
pub fn class_intensity(class_id: usize, num_classes: usize) -> f64 {
    if class_id == 0 {
        0.2
    } else {
        0.2 + 0.6 * class_id as f64 / (num_classes - 1) as f64
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Applies the domain style: affine, gamma, noise, box blur, then clamp.
fn apply_style(base: &Array2<f64>, style: &DomainStyle, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (h, w) = base.dim();
    let mut img = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = style.intensity_gain * base[[y, x]] + style.intensity_bias;
            img[[y, x]] = clamp01(v).powf(style.gamma);
        }
    }
    if style.noise_sigma > 0.0 {
        for v in img.iter_mut() {
            *v += style.noise_sigma * f64::standard_normal(rng);
        }
    }
    if style.blur_radius > 0 {
        img = box_blur(&img, style.blur_radius as usize);
    }
    img.mapv_inplace(clamp01);
    img
}

/// Mean filter over a (2r+1)^2 window with edge replication.
fn box_blur(img: &Array2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::zeros((h, w));
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -(r as isize)..=(r as isize) {
                for dx in -(r as isize)..=(r as isize) {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += img[[sy, sx]];
                }
            }
            out[[y, x]] = acc / norm;
        }
    }
    out
}

fn quantize(v: f64) -> u16 {
    (clamp01(v) * 65535.0).round() as u16
}

fn dequantize<S: Scalar>(px: u16) -> S {
    S::cast(px as f64 / 65535.0)
}

/// Renders one sample: a `[1, 1, H, W]` image in [0, 1] and a
/// `[1, L, H, W]` one-hot label.
///
/// The image is quantized through the on-disk 16-bit representation so
/// in-memory values match a stored-and-reloaded corpus exactly.
pub fn render_scene<S: Scalar>(
    spec: &SceneSpec,
    style: &DomainStyle,
    seed: u64,
) -> Result<(Tensor4<S>, Tensor4<S>)> {
    style.validate()?;
    let map = render_label_map(spec)?;
    let (h, w) = spec.image_size;
    let base = Array2::from_shape_fn((h, w), |(y, x)| {
        class_intensity(map[[y, x]], spec.num_classes)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let styled = apply_style(&base, style, &mut rng);

    let mut image = Tensor4::zeros((1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            image[[0, 0, y, x]] = dequantize::<S>(quantize(styled[[y, x]]));
        }
    }
    let classes = map.insert_axis(ndarray::Axis(0));
    let label = tensor::one_hot_from_classes::<S>(&classes, spec.num_classes);
    Ok((image, label))
}

/// Training scenario presets, differing in how domains are assigned to
/// splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Single domain throughout.
    Ssmis,
    /// Labeled from a source domain, unlabeled and test from a target.
    Umda,
    /// Several training domains; the test domain never appears in training.
    SemiMdg,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Ssmis => "ssmis",
            Preset::Umda => "umda",
            Preset::SemiMdg => "semimdg",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "ssmis" => Ok(Preset::Ssmis),
            "umda" => Ok(Preset::Umda),
            "semimdg" => Ok(Preset::SemiMdg),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (ssmis, umda, semimdg)"
            ))),
        }
    }
}

/// Domain-to-split assignment, matching the preset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DomainSpec {
    Single(u32),
    SourceTarget { source: u32, target: u32 },
    TrainTest { train: Vec<u32>, test: u32 },
}

/// Full corpus description; `build_corpus` is a pure function of this.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub preset: Preset,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// H = W.
    pub image_size: usize,
    pub num_classes: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub domains: DomainSpec,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled == 0 {
            return Err(Error::config("labeled count must be nonzero"));
        }
        match (&self.preset, &self.domains) {
            (Preset::Ssmis, DomainSpec::Single(_)) => Ok(()),
            (Preset::Umda, DomainSpec::SourceTarget { source, target }) => {
                if source == target {
                    Err(Error::config("umda source and target domains must differ"))
                } else {
                    Ok(())
                }
            }
            (Preset::SemiMdg, DomainSpec::TrainTest { train, test }) => {
                if train.is_empty() {
                    Err(Error::config("semimdg needs at least one training domain"))
                } else if train.contains(test) {
                    Err(Error::config(format!(
                        "test domain {test} leaks into the training domains {train:?}"
                    )))
                } else {
                    Ok(())
                }
            }
            (p, d) => Err(Error::config(format!(
                "domain spec {d:?} does not match preset {}",
                p.name()
            ))),
        }
    }

    /// Desk-scale defaults for a preset: 64x64, 3 classes,
    /// 8 labeled / 64 unlabeled / 32 test.
    pub fn desk_default(preset: Preset, out_dir: PathBuf, seed: u64) -> CorpusConfig {
        let domains = match preset {
            Preset::Ssmis => DomainSpec::Single(0),
            Preset::Umda => DomainSpec::SourceTarget {
                source: 0,
                target: 1,
            },
            Preset::SemiMdg => DomainSpec::TrainTest {
                train: vec![0, 1, 2],
                test: 3,
            },
        };
        CorpusConfig {
            preset,
            out_dir,
            seed,
            image_size: 64,
            num_classes: 3,
            labeled: 8,
            unlabeled: 64,
            test: 32,
            domains,
        }
    }

    fn domain_for(&self, split: Split, ordinal: usize) -> u32 {
        match (&self.domains, split) {
            (DomainSpec::Single(d), _) => *d,
            (DomainSpec::SourceTarget { source, .. }, Split::Labeled) => *source,
            (DomainSpec::SourceTarget { target, .. }, _) => *target,
            (DomainSpec::TrainTest { test, .. }, Split::Test) => *test,
            (DomainSpec::TrainTest { train, .. }, _) => train[ordinal % train.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

/// Samples a random scene: 2..=4 shapes with random class, kind, pose.
fn sample_scene(size: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> SceneSpec {
    let n_shapes = rng.gen_range(2..=4);
    let s = size as f64;
    let shapes = (0..n_shapes)
        .map(|_| {
            let class_id = rng.gen_range(1..num_classes);
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Ellipse,
                1 => ShapeKind::Ring,
                _ => ShapeKind::Rectangle,
            };
            Shape {
                class_id,
                kind,
                center: (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s)),
                axes: (rng.gen_range(0.10 * s..0.28 * s), rng.gen_range(0.10 * s..0.28 * s)),
                rotation: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    SceneSpec {
        shapes,
        image_size: (size, size),
        num_classes,
    }
}

/// Generates and writes a corpus; returns the manifest path.
///
/// Layout: `images/<id>.pgm`, `labels/<id>.pgm`, `manifest.tsv` with
/// tab-separated columns sample_id, domain_id, split, image_path,
/// label_path (`-` when the split carries no annotation). Labeled and
/// test rows carry labels; unlabeled rows do not.
pub fn build_corpus(config: &CorpusConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir.join("images"), e))?;
    fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(dir.join("labels"), e))?;

    let mut rows = Vec::new();
    let mut ordinal = 0u64;
    for (split, count, tag) in [
        (Split::Labeled, config.labeled, "lab"),
        (Split::Unlabeled, config.unlabeled, "unl"),
        (Split::Test, config.test, "tst"),
    ] {
        for k in 0..count {
            let sample_id = format!("{tag}{k:05}");
            let domain_id = config.domain_for(split, k);
            let style = DomainStyle::preset(domain_id)?;

            // One independent stream per sample: scene geometry and pixel
            // noise both come from it, so corpora are reproducible even if
            // samples are generated out of order.
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(ordinal);
            let spec = sample_scene(config.image_size, config.num_classes, &mut rng);
            let noise_seed = rng.gen::<u64>();

            let map = render_label_map(&spec)?;
            let (h, w) = spec.image_size;
            let base = Array2::from_shape_fn((h, w), |(y, x)| {
                class_intensity(map[[y, x]], config.num_classes)
            });
            let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let styled = apply_style(&base, &style, &mut noise_rng);

            let image_rel = format!("images/{sample_id}.pgm");
            raster::write_raster(
                &dir.join(&image_rel),
                &Raster {
                    width: w,
                    height: h,
                    pixels: styled.iter().map(|&v| quantize(v)).collect(),
                },
            )?;

            let label_rel = if split == Split::Unlabeled {
                "-".to_string()
            } else {
                let rel = format!("labels/{sample_id}.pgm");
                raster::write_raster(
                    &dir.join(&rel),
                    &Raster {
                        width: w,
                        height: h,
                        pixels: map.iter().map(|&c| c as u16).collect(),
                    },
                )?;
                rel
            };

            rows.push(format!(
                "{sample_id}\t{domain_id}\t{}\t{image_rel}\t{label_rel}",
                split.name()
            ));
            ordinal += 1;
        }
    }

    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = format!(
        "# classes={}\n# size={}\n# sample_id\tdomain_id\tsplit\timage_path\tlabel_path\n",
        config.num_classes, config.image_size
    );
    manifest.push_str(&rows.join("\n"));
    manifest.push('\n');
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_scene(size: usize, l: usize) -> SceneSpec {
        SceneSpec {
            shapes: vec![],
            image_size: (size, size),
            num_classes: l,
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let style = DomainStyle::preset(0).unwrap();
        let (_img, label) = render_scene::<f64>(&empty_scene(16, 3), &style, 7).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(label[[0, 0, y, x]], 1.0);
            }
        }
        assert!(tensor::is_one_hot(&label));
    }

    #[test]
    fn rejects_small_images_and_few_classes() {
        let style = DomainStyle::preset(0).unwrap();
        assert!(render_scene::<f64>(&empty_scene(8, 3), &style, 0).is_err());
        assert!(render_scene::<f64>(&empty_scene(16, 1), &style, 0).is_err());
    }

    #[test]
    fn bias_only_styles_differ_by_constant_before_clipping() {
        let spec = SceneSpec {
            shapes: vec![Shape {
                class_id: 1,
                kind: ShapeKind::Ellipse,
                center: (8.0, 8.0),
                axes: (4.0, 3.0),
                rotation: 0.3,
            }],
            image_size: (16, 16),
            num_classes: 3,
        };
        let a = DomainStyle {
            domain_id: 0,
            intensity_gain: 1.0,
            intensity_bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
        };
        let b = DomainStyle {
            intensity_bias: 0.1,
            ..a.clone()
        };
        let (img_a, lab_a) = render_scene::<f64>(&spec, &a, 5).unwrap();
        let (img_b, lab_b) = render_scene::<f64>(&spec, &b, 5).unwrap();
        assert_eq!(lab_a, lab_b);
        // Base intensities stay within [0, 0.9], so nothing clips.
        for (va, vb) in img_a.iter().zip(img_b.iter()) {
            assert!((vb - va - 0.1).abs() < 1.5 / 65535.0, "{va} vs {vb}");
        }
    }

    #[test]
    fn ellipse_pixel_count_matches_brute_force_oracle() {
        let shape = Shape {
            class_id: 1,
            kind: ShapeKind::Ellipse,
            center: (32.0, 32.0),
            axes: (10.0, 6.0),
            rotation: 0.0,
        };
        let spec = SceneSpec {
            shapes: vec![shape],
            image_size: (64, 64),
            num_classes: 3,
        };
        // Independent rasterization: direct pixel-in-ellipse inequality.
        let mut expected = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                let dy = (y as f64 + 0.5 - 32.0) / 10.0;
                let dx = (x as f64 + 0.5 - 32.0) / 6.0;
                if dy * dy + dx * dx <= 1.0 {
                    expected += 1.0;
                }
            }
        }
        let style = DomainStyle::preset(0).unwrap();
        let (_img, label) = render_scene::<f64>(&spec, &style, 1).unwrap();
        let count: f64 = label.index_axis(ndarray::Axis(1), 1).sum();
        assert_eq!(count, expected);
        assert!(expected > 0.0);
    }

    #[test]
    fn later_shapes_overwrite_earlier() {
        let spec = SceneSpec {
            shapes: vec![
                Shape {
                    class_id: 1,
                    kind: ShapeKind::Rectangle,
                    center: (8.0, 8.0),
                    axes: (6.0, 6.0),
                    rotation: 0.0,
                },
                Shape {
                    class_id: 2,
                    kind: ShapeKind::Rectangle,
                    center: (8.0, 8.0),
                    axes: (2.0, 2.0),
                    rotation: 0.0,
                },
            ],
            image_size: (16, 16),
            num_classes: 3,
        };
        let map = render_label_map(&spec).unwrap();
        assert_eq!(map[[8, 8]], 2);
        assert_eq!(map[[3, 8]], 1);
        assert_eq!(map[[0, 0]], 0);
    }

    #[test]
    fn corpus_is_bit_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg = CorpusConfig::desk_default(Preset::Ssmis, dir_a.path().into(), 99);
        cfg.image_size = 32;
        cfg.labeled = 2;
        cfg.unlabeled = 3;
        cfg.test = 2;
        build_corpus(&cfg).unwrap();
        cfg.out_dir = dir_b.path().into();
        build_corpus(&cfg).unwrap();
        for sub in ["manifest.tsv", "images/lab00000.pgm", "labels/tst00001.pgm"] {
            let a = fs::read(dir_a.path().join(sub)).unwrap();
            let b = fs::read(dir_b.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs between runs");
        }
    }

    #[test]
    fn semimdg_rejects_test_domain_leak() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = CorpusConfig::desk_default(Preset::SemiMdg, dir.path().into(), 0);
        cfg.domains = DomainSpec::TrainTest {
            train: vec![0, 1, 3],
            test: 3,
        };
        assert!(build_corpus(&cfg).is_err());
    }

    #[test]
    fn zero_labeled_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = CorpusConfig::desk_default(Preset::Ssmis, dir.path().into(), 0);
        cfg.labeled = 0;
        assert!(build_corpus(&cfg).is_err());
    }
}
