//! Datasets: a seeded synthetic image set and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, FormatError, Result};
use crate::model::checkpoint::Normalization;
use crate::tensor::Tensor;

/// Normalized images and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    images: Vec<f32>,
    labels: Vec<usize>,
    image_len: usize,
}

impl Split {
    fn new(images: Vec<f32>, labels: Vec<usize>, image_len: usize) -> Self {
        debug_assert_eq!(images.len(), labels.len() * image_len);
        Self {
            images,
            labels,
            image_len,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len..(i + 1) * self.image_len]
    }

    /// Gathers `indices` into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize], shape: [usize; 3]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = shape;
        let t = Tensor::from_vec(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub normalization: Normalization,
    pub train: Split,
    pub eval: Split,
}

/// Index batches for one epoch, shuffled by `rng`. The last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

fn apply_normalization(images: &mut [f32], shape: [usize; 3], norm: &Normalization) {
    let [c, h, w] = shape;
    let plane = h * w;
    for image in images.chunks_mut(c * plane) {
        for (ch, p) in image.chunks_mut(plane).enumerate() {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            for v in p {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Per-channel mean and population std, accumulated in f64.
fn channel_stats(images: &[f32], shape: [usize; 3]) -> Normalization {
    let [c, h, w] = shape;
    let plane = h * w;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    let mut count = 0usize;
    for image in images.chunks(c * plane) {
        for (ch, p) in image.chunks(plane).enumerate() {
            for &v in p {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt() as f32).max(1e-6))
        .collect();
    Normalization {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub size: usize,
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_eval: 500,
            classes: 10,
            size: 16,
            noise: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn id(&self) -> String {
        format!(
            "synth-seed{}-classes{}-size{}-train{}-eval{}-noise{}",
            self.seed, self.classes, self.size, self.n_train, self.n_eval, self.noise
        )
    }
}

const SHAPES: usize = 10;
const MAX_SHIFT: i64 = 2;

/// Colour of class `class`: a distinct mix of the three channels.
fn class_color(class: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 7] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.2, 1.0],
        [1.0, 1.0, 0.2],
        [0.2, 1.0, 1.0],
        [1.0, 0.2, 1.0],
        [0.9, 0.9, 0.9],
    ];
    PALETTE[(class * 3 + class / SHAPES) % PALETTE.len()]
}

/// Intensity in `[0, 1]` of geometric template `kind` at `(y, x)` for a
/// `size x size` image centred at `(cy, cx)`.
fn template(kind: usize, size: usize, cy: f32, cx: f32, y: usize, x: usize) -> f32 {
    let (dy, dx) = (y as f32 - cy, x as f32 - cx);
    let r = size as f32 / 4.0;
    let t = (size as f32 / 10.0).max(1.0);
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let inside = dy.abs() <= 1.5 * r && dx.abs() <= 1.5 * r;
    match kind {
        0 => on(dy.abs() <= t && dx.abs() <= 1.5 * r), // horizontal bar
        1 => on(dx.abs() <= t && dy.abs() <= 1.5 * r), // vertical bar
        2 => on(inside && (dy.abs() <= t || dx.abs() <= t)), // cross
        3 => on(dy * dy + dx * dx <= r * r),           // disc
        4 => on(((dy * dy + dx * dx).sqrt() - r).abs() <= t * 0.75), // ring
        5 => on(inside && (dy.abs() - 1.5 * r).abs().min((dx.abs() - 1.5 * r).abs()) <= t * 0.75), // square outline
        6 => on(inside && (dy - dx).abs() <= t), // diagonal
        7 => on(inside && (dy + dx).abs() <= t), // anti-diagonal
        8 => on(inside && dy <= 0.0 && dx <= 0.0), // filled corner
        _ => on(inside && (dy.abs() <= t || dx.abs() <= t) && !(dy.abs() <= t && dx.abs() <= t)), // hollow cross
    }
}

/// Noise-free image of `class` shifted by `(sy, sx)` pixels.
pub(crate) fn render(class: usize, size: usize, sy: i64, sx: i64) -> Vec<f32> {
    let kind = class % SHAPES;
    let color = class_color(class);
    let centre = (size as f32 - 1.0) / 2.0;
    let (cy, cx) = (centre + sy as f32, centre + sx as f32);
    let mut out = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let v = template(kind, size, cy, cx, y, x);
            for (ch, &c) in color.iter().enumerate() {
                out[(ch * size + y) * size + x] = v * c;
            }
        }
    }
    out
}

/// Class-conditional geometric templates (bars, crosses, discs, ...) in a
/// per-class colour, shifted by up to two pixels and overlaid with Gaussian
/// pixel noise. Identical configs give bit-identical datasets.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Input(format!(
            "synthetic data needs >= 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.size < 8 {
        return Err(Error::Input(format!(
            "synthetic image size must be >= 8, got {}",
            cfg.size
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Input(format!(
            "noise std must be >= 0, got {}",
            cfg.noise
        )));
    }
    if cfg.n_train == 0 || cfg.n_eval == 0 {
        return Err(Error::Input("synthetic splits must be non-empty".into()));
    }
    let shape = [3, cfg.size, cfg.size];
    let image_len = 3 * cfg.size * cfg.size;
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut generate = |n: usize| {
        let mut images = Vec::with_capacity(n * image_len);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // balanced classes, order randomized by the training shuffle
            let class = i % cfg.classes;
            let sy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            let sx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
            images.extend(
                render(class, cfg.size, sy, sx)
                    .into_iter()
                    .map(|v| v + noise.sample(&mut rng)),
            );
            labels.push(class);
        }
        (images, labels)
    };
    let (mut train_images, train_labels) = generate(cfg.n_train);
    let (mut eval_images, eval_labels) = generate(cfg.n_eval);
    let normalization = channel_stats(&train_images, shape);
    apply_normalization(&mut train_images, shape, &normalization);
    apply_normalization(&mut eval_images, shape, &normalization);
    Ok(Dataset {
        id: cfg.id(),
        input_shape: shape,
        num_classes: cfg.classes,
        normalization,
        train: Split::new(train_images, train_labels, image_len),
        eval: Split::new(eval_images, eval_labels, image_len),
    })
}

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2023, 0.1994, 0.2010];
const CIFAR10_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST: &str = "test_batch.bin";

fn read_cifar_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::format(
            path,
            FormatError::Records(format!(
                "size {} is not a positive multiple of the {CIFAR10_RECORD}-byte record",
                bytes.len()
            )),
        ));
    }
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::format(
                path,
                FormatError::Records(format!("record {r} has label {label} outside [0, 10)")),
            ));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Reads the five training batches and the test batch of the CIFAR-10
/// binary distribution, normalized by the conventional per-channel constants.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let shape = [3, 32, 32];
    let normalization = Normalization {
        mean: CIFAR10_MEAN.to_vec(),
        std: CIFAR10_STD.to_vec(),
    };
    let (mut train_images, mut train_labels) = (Vec::new(), Vec::new());
    for name in CIFAR10_TRAIN {
        read_cifar_file(&dir.join(name), &mut train_images, &mut train_labels)?;
    }
    let (mut eval_images, mut eval_labels) = (Vec::new(), Vec::new());
    read_cifar_file(&dir.join(CIFAR10_TEST), &mut eval_images, &mut eval_labels)?;
    apply_normalization(&mut train_images, shape, &normalization);
    apply_normalization(&mut eval_images, shape, &normalization);
    Ok(Dataset {
        id: "cifar10".into(),
        input_shape: shape,
        num_classes: 10,
        normalization,
        train: Split::new(train_images, train_labels, CIFAR10_RECORD - 1),
        eval: Split::new(eval_images, eval_labels, CIFAR10_RECORD - 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs::File;

    fn small(noise: f32) -> SynthConfig {
        SynthConfig {
            seed: 5,
            n_train: 200,
            n_eval: 100,
            noise,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = synth_dataset(&small(0.3)).unwrap();
        let b = synth_dataset(&small(0.3)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = &shuffled_batches(a.train.len(), 64, &mut rng)[0];
        assert!(a
            .train
            .batch(idx, a.input_shape)
            .0
            .bit_eq(&b.train.batch(idx, b.input_shape).0));
    }

    #[test]
    fn training_split_is_normalized() {
        let d = synth_dataset(&small(0.3)).unwrap();
        let stats = channel_stats(&d.train.images, d.input_shape);
        for (m, s) in stats.mean.iter().zip(&stats.std) {
            assert!(m.abs() < 1e-4 && (s - 1.0).abs() < 1e-3, "{m} {s}");
        }
    }

    // Without noise every image equals a shifted template of its own class,
    // so the nearest template over all classes and shifts is always right.
    #[test]
    fn noise_free_data_is_separable_by_templates() {
        let cfg = small(0.0);
        let d = synth_dataset(&cfg).unwrap();
        let mut templates = Vec::new();
        for class in 0..cfg.classes {
            for sy in -MAX_SHIFT..=MAX_SHIFT {
                for sx in -MAX_SHIFT..=MAX_SHIFT {
                    let mut t = render(class, cfg.size, sy, sx);
                    apply_normalization(&mut t, d.input_shape, &d.normalization);
                    templates.push((class, t));
                }
            }
        }
        for i in 0..d.eval.len() {
            let x = d.eval.image(i);
            let nearest = templates
                .iter()
                .min_by(|a, b| {
                    let da: f32 = a.1.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum();
                    let db: f32 = b.1.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest.0, d.eval.labels()[i]);
        }
    }

    #[test]
    fn invalid_synth_configs() {
        for cfg in [
            SynthConfig {
                classes: 1,
                ..small(0.3)
            },
            SynthConfig {
                size: 7,
                ..small(0.3)
            },
        ] {
            assert!(matches!(synth_dataset(&cfg), Err(Error::Input(_))));
        }
    }

    fn write_records(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            bytes.push(l);
            bytes.extend((0..CIFAR10_RECORD - 1).map(|p| ((p + i) % 256) as u8));
        }
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn crafted_cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        for name in CIFAR10_TRAIN {
            write_records(&dir.path().join(name), &[7, 2]);
        }
        write_records(&dir.path().join(CIFAR10_TEST), &[3]);
        let d = load_cifar10(dir.path()).unwrap();
        assert_eq!((d.train.len(), d.eval.len()), (10, 1));
        assert_eq!(d.train.labels()[0], 7);
        assert_eq!(d.eval.labels()[0], 3);
        // first pixel byte of the first training record is 0
        assert!((d.train.image(0)[0] - (0.0 - CIFAR10_MEAN[0]) / CIFAR10_STD[0]).abs() < 1e-6);
    }

    #[test]
    fn full_size_cifar_counts() {
        let dir = tempfile::tempdir().unwrap();
        for name in CIFAR10_TRAIN {
            File::create(dir.path().join(name))
                .unwrap()
                .set_len(10_000 * CIFAR10_RECORD as u64)
                .unwrap();
        }
        File::create(dir.path().join(CIFAR10_TEST))
            .unwrap()
            .set_len(10_000 * CIFAR10_RECORD as u64)
            .unwrap();
        let d = load_cifar10(dir.path()).unwrap();
        assert_eq!((d.train.len(), d.eval.len()), (50_000, 10_000));
    }

    #[test]
    fn truncated_cifar_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        for name in CIFAR10_TRAIN {
            write_records(&dir.path().join(name), &[1]);
        }
        let test = dir.path().join(CIFAR10_TEST);
        write_records(&test, &[1]);
        let bytes = fs::read(&test).unwrap();
        fs::write(&test, &bytes[..bytes.len() - 10]).unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::Format { path, .. }) => assert_eq!(path, test),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
