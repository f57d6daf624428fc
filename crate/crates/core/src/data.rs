//! Dataset ingestion, trigger pasting, and trojan-set construction.
//!
//! Images live in N×C×H×W tensors with pixel values in [0,1]; labels are the
//! stored ground truth and are never altered by trigger pasting — the target
//! label enters only inside loss computation.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::bufread::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled images. `labels[i]` is the clean ground-truth class of sample `i`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample geometry (C, H, W).
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copies sample `i` into its own C×H×W tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.sample_shape();
        let stride = c * h * w;
        Tensor::new(
            vec![c, h, w],
            self.images.data()[i * stride..(i + 1) * stride].to_vec(),
        )
        .expect("stored image geometry is consistent")
    }

    /// A new dataset holding the first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let (c, h, w) = self.sample_shape();
        let stride = c * h * w;
        Dataset {
            images: Tensor::new(
                vec![n, c, h, w],
                self.images.data()[..n * stride].to_vec(),
            )
            .expect("prefix of valid image block"),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

/// Trigger patch geometry, intensity, and the class it should force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    /// Top-left corner of the patch, in pixels.
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel intensity written into the patch on every channel.
    pub value: f32,
    pub target_class: usize,
}

impl TriggerSpec {
    /// The conventional trigger: a 3×3 white square in the upper-left corner
    /// forcing class 5.
    pub fn default_corner() -> Self {
        TriggerSpec {
            row: 0,
            col: 0,
            height: 3,
            width: 3,
            value: 1.0,
            target_class: 5,
        }
    }

    pub fn validate(&self, h: usize, w: usize, num_classes: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Bounds("trigger patch has zero extent".into()));
        }
        if self.row + self.height > h || self.col + self.width > w {
            return Err(Error::Bounds(format!(
                "trigger patch {}×{} at ({}, {}) exceeds {h}×{w} image",
                self.height, self.width, self.row, self.col
            )));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::Param(format!(
                "trigger value {} outside [0,1]",
                self.value
            )));
        }
        if self.target_class >= num_classes {
            return Err(Error::Param(format!(
                "target class {} out of range for {num_classes} classes",
                self.target_class
            )));
        }
        Ok(())
    }
}

/// Triggered images with their original clean labels preserved.
#[derive(Debug, Clone)]
pub struct TrojanDataset {
    pub images: Tensor,
    /// Clean labels of the underlying samples; pasting never rewrites these.
    pub original_labels: Vec<usize>,
    pub num_classes: usize,
    pub trigger: TriggerSpec,
}

impl TrojanDataset {
    pub fn len(&self) -> usize {
        self.original_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original_labels.is_empty()
    }

    pub fn target_class(&self) -> usize {
        self.trigger.target_class
    }
}

fn read_u32_be(r: &mut dyn Read, path: &Path, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::Format {
        path: path.display().to_string(),
        offset: *offset,
        msg: format!("short read: {e}"),
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| {
        Error::Config(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|ext| ext == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

/// Loads an IDX image/label file pair (optionally gzip-compressed).
///
/// Pixels are scaled from [0,255] bytes to [0,1] floats; the image and label
/// counts must agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    // Images: magic, count, rows, cols, then count·rows·cols bytes.
    let mut r = open_maybe_gz(images_path)?;
    let mut off = 0u64;
    let magic = read_u32_be(&mut r, images_path, &mut off)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(&mut r, images_path, &mut off)? as usize;
    let rows = read_u32_be(&mut r, images_path, &mut off)? as usize;
    let cols = read_u32_be(&mut r, images_path, &mut off)? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            offset: 4,
            msg: format!("degenerate dimensions {count}×{rows}×{cols}"),
        });
    }
    let mut bytes = vec![0u8; count * rows * cols];
    r.read_exact(&mut bytes).map_err(|e| Error::Format {
        path: images_path.display().to_string(),
        offset: off,
        msg: format!("truncated pixel block: {e}"),
    })?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();

    // Labels: magic, count, then count bytes.
    let mut r = open_maybe_gz(labels_path)?;
    let mut off = 0u64;
    let magic = read_u32_be(&mut r, labels_path, &mut off)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            offset: 0,
            msg: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = read_u32_be(&mut r, labels_path, &mut off)? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    r.read_exact(&mut label_bytes).map_err(|e| Error::Format {
        path: labels_path.display().to_string(),
        offset: off,
        msg: format!("truncated label block: {e}"),
    })?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        images: Tensor::new(vec![count, 1, rows, cols], data)?,
        labels,
        num_classes,
    })
}

/// Generates a deterministic, linearly separable dataset: each class gets a
/// bright horizontal band at a class-specific height over a noisy background.
/// Samples interleave classes (`label(i) = i mod num_classes`).
pub fn make_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if image_size < 8 {
        return Err(Error::Spec(format!(
            "image size {image_size} too small: need ≥ 8 pixels for a trigger plus class content"
        )));
    }
    if num_classes < 2 || num_classes > image_size {
        return Err(Error::Spec(format!(
            "{num_classes} classes do not fit distinct bands in {image_size} rows"
        )));
    }
    if samples_per_class == 0 {
        return Err(Error::Param("samples_per_class must be ≥ 1".into()));
    }
    let n = num_classes * samples_per_class;
    let (h, w) = (image_size, image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; n * h * w];
    let mut labels = vec![0usize; n];
    let band_rows = (h / num_classes).max(1);
    for i in 0..n {
        let class = i % num_classes;
        labels[i] = class;
        let r0 = class * h / num_classes;
        let img = &mut data[i * h * w..(i + 1) * h * w];
        for (k, px) in img.iter_mut().enumerate() {
            let row = k / w;
            let base = if row >= r0 && row < r0 + band_rows { 0.75 } else { 0.05 };
            *px = (base + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        num_classes,
    })
}

/// Returns a copy of `image` with the trigger patch written over it; the
/// input is untouched and everything outside the patch is bit-identical.
pub fn paste_trigger(image: &Tensor, trig: &TriggerSpec) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dim(format!("paste_trigger wants C×H×W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if trig.row + trig.height > h || trig.col + trig.width > w {
        return Err(Error::Bounds(format!(
            "trigger patch {}×{} at ({}, {}) exceeds {h}×{w} image",
            trig.height, trig.width, trig.row, trig.col
        )));
    }
    let mut out = image.clone();
    paste_into(out.data_mut(), c, h, w, trig);
    Ok(out)
}

fn paste_into(img: &mut [f32], c: usize, h: usize, w: usize, trig: &TriggerSpec) {
    for ci in 0..c {
        for r in trig.row..trig.row + trig.height {
            let start = (ci * h + r) * w + trig.col;
            img[start..start + trig.width].fill(trig.value);
        }
    }
}

/// Builds the trojan set D_T: ⌊ratio·N⌋ samples drawn uniformly without
/// replacement (seeded), each pasted with the trigger, labels preserved.
pub fn make_trojan_set(
    clean: &Dataset,
    trig: &TriggerSpec,
    ratio: f64,
    seed: u64,
) -> Result<TrojanDataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Param(format!("ratio {ratio} outside (0, 1]")));
    }
    let k = (ratio * clean.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::Param(format!(
            "ratio {ratio} of {} samples selects nothing",
            clean.len()
        )));
    }
    let (c, h, w) = clean.sample_shape();
    trig.validate(h, w, clean.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, clean.len(), k).into_vec();
    indices.sort_unstable();
    build_triggered(clean, trig, &indices, c, h, w)
}

/// Builds the triggered evaluation set: every sample whose true label is NOT
/// the target class, pasted with the trigger. Excluding target-class samples
/// keeps Acc-T a measure of forced misclassification.
pub fn make_triggered_eval_set(clean: &Dataset, trig: &TriggerSpec) -> Result<TrojanDataset> {
    let (c, h, w) = clean.sample_shape();
    trig.validate(h, w, clean.num_classes)?;
    let indices: Vec<usize> = (0..clean.len())
        .filter(|&i| clean.labels[i] != trig.target_class)
        .collect();
    if indices.is_empty() {
        return Err(Error::Param(
            "every sample already has the target class: nothing to trigger".into(),
        ));
    }
    build_triggered(clean, trig, &indices, c, h, w)
}

fn build_triggered(
    clean: &Dataset,
    trig: &TriggerSpec,
    indices: &[usize],
    c: usize,
    h: usize,
    w: usize,
) -> Result<TrojanDataset> {
    let stride = c * h * w;
    let mut data = Vec::with_capacity(indices.len() * stride);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let start = i * stride;
        data.extend_from_slice(&clean.images.data()[start..start + stride]);
        let img = &mut data[labels.len() * stride..(labels.len() + 1) * stride];
        paste_into(img, c, h, w, trig);
        labels.push(clean.labels[i]);
    }
    Ok(TrojanDataset {
        images: Tensor::new(vec![indices.len(), c, h, w], data)?,
        original_labels: labels,
        num_classes: clean.num_classes,
        trigger: *trig,
    })
}

/// Seeded-permutation mini-batches; the final partial batch is included.
pub fn batches(
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be ≥ 1".into()));
    }
    let s = images.shape();
    let n = s[0];
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let stride: usize = s[1..].iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut data = Vec::with_capacity(chunk.len() * stride);
        let mut ls = Vec::with_capacity(chunk.len());
        for &i in chunk {
            data.extend_from_slice(&images.data()[i * stride..(i + 1) * stride]);
            ls.push(labels[i]);
        }
        let mut shape = vec![chunk.len()];
        shape.extend(&s[1..]);
        out.push((Tensor::new(shape, data)?, ls));
    }
    Ok(out)
}

/// Unshuffled fixed-size chunks, for evaluation passes.
pub fn eval_chunks(images: &Tensor, chunk: usize) -> Vec<Tensor> {
    let s = images.shape();
    let n = s[0];
    let stride: usize = s[1..].iter().product();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let take = chunk.min(n - i);
        let mut shape = vec![take];
        shape.extend(&s[1..]);
        out.push(
            Tensor::new(
                shape,
                images.data()[i * stride..(i + take) * stride].to_vec(),
            )
            .expect("chunk of valid image block"),
        );
        i += take;
    }
    out
}
