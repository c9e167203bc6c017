//! Corpus loading and paired batch assembly.
//!
//! Training consumes `PairedBatch`es: equal-sized labeled and unlabeled
//! halves, drawn uniformly with replacement. Equal halves are required
//! because the encoder pairs the j-th labeled sample with the j-th
//! unlabeled one for cross-attention.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::raster;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor;
use crate::Tensor4;

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub domain_id: u32,
    pub split: String,
    pub image_path: PathBuf,
    /// Absent for the unlabeled split.
    pub label_path: Option<PathBuf>,
}

/// Parsed manifest plus the corpus root; split membership and file paths.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    root: PathBuf,
    labeled: Vec<ManifestEntry>,
    unlabeled: Vec<ManifestEntry>,
    test: Vec<ManifestEntry>,
    num_classes: usize,
}

impl CorpusIndex {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn num_test(&self) -> usize {
        self.test.len()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, name: &str) -> Result<Vec<ManifestEntry>> {
        match name {
            "labeled" => Ok(self.labeled.clone()),
            "unlabeled" => Ok(self.unlabeled.clone()),
            "test" => Ok(self.test.clone()),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }

    fn find(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.test)
            .find(|e| e.sample_id == sample_id)
    }

    /// Loads one sample by id, validating shape and label integrity.
    pub fn load_sample<S: Scalar>(&self, sample_id: &str) -> Result<Sample<S>> {
        let entry = self
            .find(sample_id)
            .ok_or_else(|| Error::config(format!("unknown sample id '{sample_id}'")))?;
        load_entry(&self.root, entry, self.num_classes)
    }
}

/// One loaded sample; label present iff the split carries annotations.
#[derive(Debug, Clone)]
pub struct Sample<S: Scalar> {
    /// `[1, 1, H, W]`, values in [0, 1].
    pub image: Tensor4<S>,
    /// `[1, L, H, W]` one-hot.
    pub label: Option<Tensor4<S>>,
    pub domain_id: u32,
    pub sample_id: String,
}

fn load_entry<S: Scalar>(
    root: &Path,
    entry: &ManifestEntry,
    num_classes: usize,
) -> Result<Sample<S>> {
    let img = raster::read_raster(&root.join(&entry.image_path))?;
    let (h, w) = (img.height, img.width);
    let mut image = Tensor4::zeros((1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            image[[0, 0, y, x]] = S::cast(img.pixels[y * w + x] as f64 / 65535.0);
        }
    }
    let label = match &entry.label_path {
        None => None,
        Some(rel) => {
            let lab = raster::read_raster(&root.join(rel))?;
            if (lab.height, lab.width) != (h, w) {
                return Err(Error::contract(format!(
                    "sample '{}': label shape {}x{} does not match image {}x{}",
                    entry.sample_id, lab.height, lab.width, h, w
                )));
            }
            let mut classes = ndarray::Array3::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    let c = lab.pixels[y * w + x] as usize;
                    if c >= num_classes {
                        return Err(Error::contract(format!(
                            "sample '{}': label class {c} at ({y},{x}) exceeds corpus classes {num_classes}; stored label cannot form a valid one-hot",
                            entry.sample_id
                        )));
                    }
                    classes[[0, y, x]] = c;
                }
            }
            Some(tensor::one_hot_from_classes::<S>(&classes, num_classes))
        }
    };
    Ok(Sample {
        image,
        label,
        domain_id: entry.domain_id,
        sample_id: entry.sample_id.clone(),
    })
}

/// Parses a manifest file into an index. Rows are tab-separated; lines
/// starting with `#` are comments. Errors carry the offending line number.
///
/// The class count comes from a `# classes=N` metadata comment when
/// present (build_corpus writes one), otherwise from scanning the label
/// rasters.
pub fn load_manifest(path: &Path) -> Result<CorpusIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut index = CorpusIndex {
        root: root.clone(),
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        num_classes: 0,
    };
    let mut classes_meta: Option<usize> = None;
    let mut seen_ids = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            if let Some(rest) = line.strip_prefix("# classes=") {
                classes_meta = Some(
                    rest.trim()
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad classes metadata '{rest}'")))?,
                );
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                lineno,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let sample_id = fields[0].to_string();
        if !seen_ids.insert(sample_id.clone()) {
            return Err(parse_err(lineno, format!("duplicate sample_id '{sample_id}'")));
        }
        let domain_id: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad domain_id '{}'", fields[1])))?;
        let split = fields[2].to_string();
        let label_path = match fields[4] {
            "-" => None,
            p => Some(PathBuf::from(p)),
        };
        match split.as_str() {
            "labeled" | "test" => {
                let which = split.clone();
                if label_path.is_none() {
                    return Err(parse_err(
                        lineno,
                        format!("{which} row '{sample_id}' has no label path"),
                    ));
                }
                let lp = label_path.as_ref().expect("checked above");
                if !root.join(lp).is_file() {
                    return Err(parse_err(
                        lineno,
                        format!("{which} row '{sample_id}' is missing label file {}", lp.display()),
                    ));
                }
            }
            "unlabeled" => {}
            other => return Err(parse_err(lineno, format!("unknown split '{other}'"))),
        }
        let entry = ManifestEntry {
            sample_id,
            domain_id,
            split: split.clone(),
            image_path: PathBuf::from(fields[3]),
            label_path,
        };
        match split.as_str() {
            "labeled" => index.labeled.push(entry),
            "unlabeled" => index.unlabeled.push(entry),
            _ => index.test.push(entry),
        }
    }
    index.num_classes = match classes_meta {
        Some(l) => l,
        None => {
            let mut max_class = 1usize;
            for entry in index.labeled.iter().chain(&index.test) {
                if let Some(rel) = &entry.label_path {
                    let lab = raster::read_raster(&root.join(rel))?;
                    max_class = max_class.max(*lab.pixels.iter().max().unwrap_or(&0) as usize);
                }
            }
            max_class + 1
        }
    };
    if index.num_classes < 2 {
        return Err(Error::config(format!(
            "corpus must have at least 2 classes, found {}",
            index.num_classes
        )));
    }
    Ok(index)
}

/// Equal labeled/unlabeled halves of one training batch.
#[derive(Debug, Clone)]
pub struct PairedBatch<S: Scalar> {
    /// `[b, 1, H, W]`.
    pub labeled_images: Tensor4<S>,
    /// `[b, L, H, W]` one-hot.
    pub labeled_labels: Tensor4<S>,
    /// `[b, 1, H, W]`.
    pub unlabeled_images: Tensor4<S>,
}

impl<S: Scalar> PairedBatch<S> {
    pub fn half_size(&self) -> usize {
        self.labeled_images.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        let (bl, cl, h, w) = self.labeled_images.dim();
        let (bu, cu, hu, wu) = self.unlabeled_images.dim();
        let (by, _l, hy, wy) = self.labeled_labels.dim();
        if bl == 0 || bl != bu || bl != by {
            return Err(Error::contract(format!(
                "paired batch halves must be equal and nonempty: labeled {bl}, unlabeled {bu}, labels {by}"
            )));
        }
        if cl != 1 || cu != 1 || (h, w) != (hu, wu) || (h, w) != (hy, wy) {
            return Err(Error::contract("paired batch shape mismatch".to_string()));
        }
        if !tensor::is_one_hot(&self.labeled_labels) {
            return Err(Error::contract("labeled_labels is not one-hot".to_string()));
        }
        for v in self.labeled_images.iter().chain(self.unlabeled_images.iter()) {
            if !v.is_finite() || *v < S::zero() || *v > S::one() {
                return Err(Error::contract("image values must be finite in [0,1]".to_string()));
            }
        }
        Ok(())
    }
}

/// Draws the next paired batch: `half` labeled and `half` unlabeled
/// samples, uniformly with replacement from their splits.
pub fn next_pair<S: Scalar>(
    index: &CorpusIndex,
    half: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairedBatch<S>> {
    if index.labeled.is_empty() || index.unlabeled.is_empty() {
        return Err(Error::config(format!(
            "both splits must be nonempty (labeled {}, unlabeled {})",
            index.labeled.len(),
            index.unlabeled.len()
        )));
    }
    if half == 0 {
        return Err(Error::config("batch half size must be >= 1"));
    }
    let mut lab_images = Vec::with_capacity(half);
    let mut lab_labels = Vec::with_capacity(half);
    for _ in 0..half {
        let k = rng.gen_range(0..index.labeled.len());
        let sample: Sample<S> = load_entry(&index.root, &index.labeled[k], index.num_classes)?;
        lab_images.push(sample.image.index_axis(Axis(0), 0).to_owned());
        lab_labels.push(
            sample
                .label
                .expect("labeled split rows carry labels")
                .index_axis(Axis(0), 0)
                .to_owned(),
        );
    }
    let mut unl_images = Vec::with_capacity(half);
    for _ in 0..half {
        let k = rng.gen_range(0..index.unlabeled.len());
        let sample: Sample<S> = load_entry(&index.root, &index.unlabeled[k], index.num_classes)?;
        unl_images.push(sample.image.index_axis(Axis(0), 0).to_owned());
    }
    let batch = PairedBatch {
        labeled_images: tensor::stack_planes(&lab_images),
        labeled_labels: tensor::stack_planes(&lab_labels),
        unlabeled_images: tensor::stack_planes(&unl_images),
    };
    batch.validate()?;
    Ok(batch)
}

/// Dihedral transform applied identically to an image and its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeomTransform {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Quarter turns, counterclockwise, 0..=3. Requires square images
    /// when nonzero.
    pub rot90: u8,
}

impl GeomTransform {
    pub fn sample(rng: &mut ChaCha8Rng) -> GeomTransform {
        GeomTransform {
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            rot90: rng.gen_range(0..4),
        }
    }

    /// Applies the transform to every channel of a `[c, h, w]` plane.
    pub fn apply<S: Scalar>(&self, plane: &ndarray::Array3<S>) -> ndarray::Array3<S> {
        let (c, h, w) = plane.dim();
        let mut out = plane.clone();
        if self.flip_h {
            let src = out.clone();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[ci, y, x]] = src[[ci, y, w - 1 - x]];
                    }
                }
            }
        }
        if self.flip_v {
            let src = out.clone();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[ci, y, x]] = src[[ci, h - 1 - y, x]];
                    }
                }
            }
        }
        for _ in 0..self.rot90 {
            assert_eq!(h, w, "90-degree rotation requires square images");
            let src = out.clone();
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        // (y, x) <- (x, w-1-y): one counterclockwise turn.
                        out[[ci, y, x]] = src[[ci, x, w - 1 - y]];
                    }
                }
            }
        }
        out
    }
}

/// Random flips and quarter turns, sampled per sample; an image and its
/// label always receive the same transform. One-hot labels stay one-hot
/// because pixels are only permuted.
pub fn augment<S: Scalar>(batch: &PairedBatch<S>, rng: &mut ChaCha8Rng) -> PairedBatch<S> {
    let b = batch.half_size();
    let mut lab_images = Vec::with_capacity(b);
    let mut lab_labels = Vec::with_capacity(b);
    let mut unl_images = Vec::with_capacity(b);
    for j in 0..b {
        let t = GeomTransform::sample(rng);
        lab_images.push(t.apply(&batch.labeled_images.index_axis(Axis(0), j).to_owned()));
        lab_labels.push(t.apply(&batch.labeled_labels.index_axis(Axis(0), j).to_owned()));
    }
    for j in 0..b {
        let t = GeomTransform::sample(rng);
        unl_images.push(t.apply(&batch.unlabeled_images.index_axis(Axis(0), j).to_owned()));
    }
    PairedBatch {
        labeled_images: tensor::stack_planes(&lab_images),
        labeled_labels: tensor::stack_planes(&lab_labels),
        unlabeled_images: tensor::stack_planes(&unl_images),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_corpus, CorpusConfig, Preset};
    use rand::SeedableRng;

    fn tiny_corpus(dir: &Path, labeled: usize, unlabeled: usize, test: usize) -> CorpusIndex {
        let mut cfg = CorpusConfig::desk_default(Preset::Ssmis, dir.into(), 42);
        cfg.image_size = 16;
        cfg.labeled = labeled;
        cfg.unlabeled = unlabeled;
        cfg.test = test;
        let manifest = build_corpus(&cfg).unwrap();
        load_manifest(&manifest).unwrap()
    }

    #[test]
    fn manifest_round_trips_counts() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_corpus(dir.path(), 3, 5, 2);
        assert_eq!(index.num_labeled(), 3);
        assert_eq!(index.num_unlabeled(), 5);
        assert_eq!(index.num_test(), 2);
    }

    #[test]
    fn duplicate_sample_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 1, 1, 1);
        let path = dir.path().join("manifest.tsv");
        let mut text = fs::read_to_string(&path).unwrap();
        let dup = text
            .lines()
            .find(|l| !l.starts_with('#'))
            .unwrap()
            .to_string();
        text.push_str(&dup);
        text.push('\n');
        fs::write(&path, text).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn labeled_row_with_missing_label_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 2, 1, 1);
        fs::remove_file(dir.path().join("labels/lab00001.pgm")).unwrap();
        let err = load_manifest(&dir.path().join("manifest.tsv")).unwrap_err();
        assert!(err.to_string().contains("missing label file"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 1, 1, 1);
        let path = dir.path().join("manifest.tsv");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("only three\tfields\there\n");
        fs::write(&path, text).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains(":7:"), "{err}");
    }

    #[test]
    fn load_sample_round_trips_and_rejects_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_corpus(dir.path(), 1, 1, 1);
        let s: Sample<f64> = index.load_sample("lab00000").unwrap();
        assert_eq!(s.image.dim(), (1, 1, 16, 16));
        let label = s.label.unwrap();
        assert!(tensor::is_one_hot(&label));
        assert!(index.load_sample::<f64>("nope").is_err());
    }

    #[test]
    fn corrupted_label_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_corpus(dir.path(), 1, 1, 1);
        // Inject an out-of-range class id into the stored label.
        let path = dir.path().join("labels/lab00000.pgm");
        let r = raster::read_raster(&path).unwrap();
        let mut pixels = r.pixels.clone();
        pixels[0] = 9;
        raster::write_raster(
            &path,
            &raster::Raster {
                width: r.width,
                height: r.height,
                pixels,
            },
        )
        .unwrap();
        let err = index.load_sample::<f64>("lab00000").unwrap_err();
        assert!(err.to_string().contains("one-hot"), "{err}");
        // Shape corruption is also rejected.
        let bad = raster::Raster {
            width: 8,
            height: 8,
            pixels: vec![0; 64],
        };
        raster::write_raster(&path, &bad).unwrap();
        assert!(index.load_sample::<f64>("lab00000").is_err());
    }

    #[test]
    fn single_sample_batches_are_forced() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_corpus(dir.path(), 1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lab: Sample<f64> = index.load_sample("lab00000").unwrap();
        let unl: Sample<f64> = index.load_sample("unl00000").unwrap();
        for _ in 0..4 {
            let b: PairedBatch<f64> = next_pair(&index, 1, &mut rng).unwrap();
            assert_eq!(b.labeled_images.index_axis(Axis(0), 0), lab.image.index_axis(Axis(0), 0));
            assert_eq!(
                b.unlabeled_images.index_axis(Axis(0), 0),
                unl.image.index_axis(Axis(0), 0)
            );
        }
    }

    #[test]
    fn sampling_is_uniform_within_five_sigma() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_corpus(dir.path(), 8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = vec![0u64; 8];
        let draws = 10_000usize;
        // Count which labeled sample appears, identified by image content.
        let images: Vec<Tensor4<f64>> = (0..8)
            .map(|k| index.load_sample::<f64>(&format!("lab{k:05}")).unwrap().image)
            .collect();
        for _ in 0..draws {
            let b: PairedBatch<f64> = next_pair(&index, 1, &mut rng).unwrap();
            let got = b.labeled_images.index_axis(Axis(0), 0);
            let k = images
                .iter()
                .position(|img| img.index_axis(Axis(0), 0) == got)
                .expect("drawn sample must be one of the 8");
            counts[k] += 1;
        }
        let p = 1.0 / 8.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() < 5.0 * sigma,
                "sample {k} drawn {c} times, expected {mean:.1} ± {:.1}",
                5.0 * sigma
            );
        }
    }

    #[test]
    fn identical_rng_seeds_give_identical_batches() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_corpus(dir.path(), 3, 4, 1);
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let a: PairedBatch<f64> = next_pair(&index, 2, &mut rng_a).unwrap();
            let b: PairedBatch<f64> = next_pair(&index, 2, &mut rng_b).unwrap();
            assert_eq!(a.labeled_images, b.labeled_images);
            assert_eq!(a.unlabeled_images, b.unlabeled_images);
        }
    }

    #[test]
    fn empty_split_is_a_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        // Build with unlabeled samples, then strip them from the manifest.
        tiny_corpus(dir.path(), 1, 1, 1);
        let path = dir.path().join("manifest.tsv");
        let text = fs::read_to_string(&path).unwrap();
        let filtered: String = text
            .lines()
            .filter(|l| !l.contains("\tunlabeled\t"))
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&path, filtered).unwrap();
        let index = load_manifest(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(next_pair::<f64>(&index, 1, &mut rng).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let plane = ndarray::Array3::from_shape_fn((2, 4, 4), |(c, y, x)| {
            (c * 16 + y * 4 + x) as f64
        });
        let t = GeomTransform {
            flip_h: true,
            flip_v: false,
            rot90: 0,
        };
        assert_eq!(t.apply(&t.apply(&plane)), plane);
        let t = GeomTransform {
            flip_h: false,
            flip_v: true,
            rot90: 0,
        };
        assert_eq!(t.apply(&t.apply(&plane)), plane);
    }

    #[test]
    fn augmentation_preserves_one_hot_and_class_counts() {
        let dir = tempfile::tempdir().unwrap();
        let index = tiny_corpus(dir.path(), 2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: PairedBatch<f64> = next_pair(&index, 2, &mut rng).unwrap();
        let before: Vec<f64> = (0..batch.labeled_labels.dim().1)
            .map(|c| batch.labeled_labels.index_axis(Axis(1), c).sum())
            .collect();
        for _ in 0..8 {
            let aug = augment(&batch, &mut rng);
            assert!(tensor::is_one_hot(&aug.labeled_labels));
            let after: Vec<f64> = (0..aug.labeled_labels.dim().1)
                .map(|c| aug.labeled_labels.index_axis(Axis(1), c).sum())
                .collect();
            assert_eq!(before, after);
        }
    }
}
