//! MNIST IDX and CIFAR-10 binary loaders, image transforms, and the seeded
//! augmentation pipeline.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NptnError, Result};
use crate::rng::Rng;
use crate::tensor::{NDTensor, Tensor};

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const NUM_CLASSES: usize = 10;

/// Images `[count, C, H, W]` in `[0, 1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(NptnError::shape(format!(
                "images {:?} are not [N,C,H,W]",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(NptnError::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(NptnError::contract(format!(
                "label {bad} outside [0, {NUM_CLASSES})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.image_shape().iter().product();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// The first `count` samples (or all of them if there are fewer).
    pub fn head(&self, count: usize) -> Result<Dataset> {
        self.slice(0..count.min(self.len()))
    }

    /// Samples `range`. A dataset cannot be empty, so an empty range is a
    /// contract error.
    pub fn slice(&self, range: Range<usize>) -> Result<Dataset> {
        if range.is_empty() || range.end > self.len() {
            return Err(NptnError::contract(format!(
                "sample range {range:?} is empty or exceeds {} samples",
                self.len()
            )));
        }
        let n: usize = self.image_shape().iter().product();
        let [c, h, w] = self.image_shape();
        Ok(Dataset {
            images: NDTensor::from_vec(
                &[range.len(), c, h, w],
                self.images.data()[range.start * n..range.end * n].to_vec(),
            )?,
            labels: self.labels[range].to_vec(),
            name: self.name.clone(),
        })
    }

    /// Gather samples in the given order into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = NDTensor::from_vec(&[indices.len(), c, h, w], data).expect("gathered batch");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(NptnError::MissingData(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| NptnError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| NptnError::format(path.display().to_string(), "truncated header"))
}

/// Parse an IDX image file and its label file.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let fmt = |p: &Path, msg: String| NptnError::format(p.display().to_string(), msg);

    let magic = be_u32(&ib, 0, ip)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(fmt(
            ip,
            format!("image magic {magic} (0x{magic:08x}), expected 2051"),
        ));
    }
    let (count, rows, cols) = (
        be_u32(&ib, 4, ip)? as usize,
        be_u32(&ib, 8, ip)? as usize,
        be_u32(&ib, 12, ip)? as usize,
    );
    let pixels = count * rows * cols;
    if ib.len() < 16 + pixels {
        return Err(fmt(
            ip,
            format!(
                "truncated: {} pixel bytes for {count} images of {rows}x{cols}",
                ib.len() - 16
            ),
        ));
    }

    let magic = be_u32(&lb, 0, lp)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(fmt(
            lp,
            format!("label magic {magic} (0x{magic:08x}), expected 2049"),
        ));
    }
    let lcount = be_u32(&lb, 4, lp)? as usize;
    if lcount != count {
        return Err(fmt(lp, format!("{lcount} labels for {count} images")));
    }
    if lb.len() < 8 + count {
        return Err(fmt(
            lp,
            format!("truncated: {} label bytes for {count} labels", lb.len() - 8),
        ));
    }

    let data = ib[16..16 + pixels]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let images = NDTensor::from_vec(&[count, 1, rows, cols], data)?;
    let labels = lb[8..8 + count].iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, file_stem(ip))
}

/// Parse and concatenate CIFAR-10 binary batches.
pub fn load_cifar10_bin<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let p = p.as_ref();
        let bytes = read(p)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(NptnError::format(
                p.display().to_string(),
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let count = labels.len();
    if count == 0 {
        return Err(NptnError::contract("no CIFAR-10 records given"));
    }
    let name = batch_paths
        .first()
        .map(|p| file_stem(p.as_ref()))
        .unwrap_or_default();
    Dataset::new(
        NDTensor::from_vec(&[count, 3, 32, 32], pixels)?,
        labels,
        name,
    )
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a single-channel dataset as an IDX image/label pair.
pub fn write_mnist_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(NptnError::shape(format!(
            "IDX images need 1 channel, got {c}"
        )));
    }
    let mut ib = Vec::with_capacity(16 + ds.images.len());
    for v in [MNIST_IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.images.data().iter().map(|&v| quantize(v)));
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [MNIST_LABEL_MAGIC, ds.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, ib).map_err(|e| NptnError::io(ip, e))?;
    fs::write(lp, lb).map_err(|e| NptnError::io(lp, e))
}

/// Write a `[N,3,32,32]` dataset as one CIFAR-10 binary batch.
pub fn write_cifar10_bin(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if ds.image_shape() != [3, 32, 32] {
        return Err(NptnError::shape(format!(
            "CIFAR images must be [3,32,32], got {:?}",
            ds.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.image(i).iter().map(|&v| quantize(v)));
    }
    let p = path.as_ref();
    fs::write(p, out).map_err(|e| NptnError::io(p, e))
}

/// Standard file locations under a data directory.
pub struct DataPaths {
    pub root: PathBuf,
}

impl DataPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataPaths { root: root.into() }
    }

    /// `(images, labels)` of the MNIST training or test split.
    pub fn mnist(&self, train: bool) -> (PathBuf, PathBuf) {
        let d = self.root.join("mnist");
        let prefix = if train { "train" } else { "t10k" };
        (
            d.join(format!("{prefix}-images-idx3-ubyte")),
            d.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }

    pub fn cifar10(&self, train: bool) -> Vec<PathBuf> {
        let d = self.root.join("cifar-10-batches-bin");
        if train {
            (1..=5)
                .map(|i| d.join(format!("data_batch_{i}.bin")))
                .collect()
        } else {
            vec![d.join("test_batch.bin")]
        }
    }

    pub fn load_mnist(&self, train: bool) -> Result<Dataset> {
        let (i, l) = self.mnist(train);
        load_mnist_idx(i, l)
    }

    pub fn load_cifar10(&self, train: bool) -> Result<Dataset> {
        load_cifar10_bin(&self.cifar10(train))
    }
}

// ---------------------------------------------------------------------------
// Transforms

/// cos and sin of an angle in degrees, exact at multiples of 90°.
fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (1.0, 0.0)
    } else if r == 90.0 {
        (0.0, 1.0)
    } else if r == 180.0 {
        (-1.0, 0.0)
    } else if r == 270.0 {
        (0.0, -1.0)
    } else {
        let t = deg.to_radians();
        (t.cos(), t.sin())
    }
}

/// Rotate every `h × w` plane of `src` by `deg` degrees about the image
/// center with bilinear sampling and zero fill. Positive angles turn the
/// picture counterclockwise as displayed (rows grow downward).
pub fn rotate_planes(src: &[f32], h: usize, w: usize, deg: f64, dst: &mut [f32]) {
    if deg == 0.0 {
        dst.copy_from_slice(src);
        return;
    }
    let (c, s) = cos_sin_deg(deg);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let plane = h * w;
    for (sp, dp) in src.chunks(plane).zip(dst.chunks_mut(plane)) {
        let px = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                sp[y as usize * w + x as usize] as f64
            }
        };
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                let sx = c * dx - s * dy + cx;
                let sy = s * dx + c * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let mut v = px(y0, x0) * (1.0 - fx) * (1.0 - fy);
                if fx != 0.0 {
                    v += px(y0, x0 + 1) * fx * (1.0 - fy);
                }
                if fy != 0.0 {
                    v += px(y0 + 1, x0) * (1.0 - fx) * fy;
                    if fx != 0.0 {
                        v += px(y0 + 1, x0 + 1) * fx * fy;
                    }
                }
                dp[y * w + x] = v as f32;
            }
        }
    }
}

/// Shift every plane by `(dx, dy)` pixels with zero fill:
/// `out[y][x] = in[y − dy][x − dx]`.
pub fn translate_planes(src: &[f32], h: usize, w: usize, dx: isize, dy: isize, dst: &mut [f32]) {
    let plane = h * w;
    for (sp, dp) in src.chunks(plane).zip(dst.chunks_mut(plane)) {
        dp.fill(0.0);
        for y in 0..h as isize {
            let sy = y - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let sx = x - dx;
                if sx >= 0 && sx < w as isize {
                    dp[(y as usize) * w + x as usize] = sp[(sy as usize) * w + sx as usize];
                }
            }
        }
    }
}

fn hflip_planes(buf: &mut [f32], w: usize) {
    for row in buf.chunks_mut(w) {
        row.reverse();
    }
}

fn chw(img: &Tensor) -> Result<[usize; 3]> {
    match img.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(NptnError::shape(format!("image {s:?} is not [C,H,W]"))),
    }
}

/// Rotate a `[C,H,W]` image; see [`rotate_planes`].
pub fn rotate_image(img: &Tensor, deg: f64) -> Result<Tensor> {
    let [_, h, w] = chw(img)?;
    let mut out = NDTensor::zeros(img.shape());
    rotate_planes(img.data(), h, w, deg, out.data_mut());
    Ok(out)
}

/// Shift a `[C,H,W]` image by whole pixels with zero fill. Shifts of a full
/// image size or more are rejected.
pub fn translate_image(img: &Tensor, dx: isize, dy: isize) -> Result<Tensor> {
    let [_, h, w] = chw(img)?;
    if dx.unsigned_abs() >= w || dy.unsigned_abs() >= h {
        return Err(NptnError::contract(format!(
            "shift ({dx}, {dy}) must be smaller than the {h}x{w} image"
        )));
    }
    let mut out = NDTensor::zeros(img.shape());
    translate_planes(img.data(), h, w, dx, dy, out.data_mut());
    Ok(out)
}

/// Random per-sample transformations.
///
/// Per sample, in this order: a rotation uniform in `[−rotation_range,
/// rotation_range]` degrees; an integer shift per axis uniform in
/// `[−translate_range, translate_range]` plus a training-only jitter in
/// `[−train_jitter, train_jitter]`; a random crop after zero padding by
/// `pad_crop`; a horizontal flip with probability ½ when `hflip` is set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rotation_range: f64,
    pub translate_range: usize,
    pub train_jitter: usize,
    pub pad_crop: usize,
    pub hflip: bool,
    pub apply_at_test: bool,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_range == 0.0
            && self.translate_range == 0
            && self.train_jitter == 0
            && self.pad_crop == 0
            && !self.hflip
    }

    /// The part of the policy used on test data: rotation and translation
    /// when `apply_at_test` is set, nothing otherwise.
    pub fn test_view(&self) -> AugmentPolicy {
        if !self.apply_at_test {
            return AugmentPolicy::none();
        }
        AugmentPolicy {
            rotation_range: self.rotation_range,
            translate_range: self.translate_range,
            ..AugmentPolicy::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_range >= 0.0 && self.rotation_range.is_finite()) {
            return Err(NptnError::Config {
                key: "rotation_range".into(),
                msg: format!("must be a finite angle >= 0, got {}", self.rotation_range),
            });
        }
        Ok(())
    }
}

/// Apply `policy` to every image of a `[B,C,H,W]` batch in place. Draws are
/// taken from `rng` in ascending sample order.
pub fn augment_batch(batch: &mut Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<()> {
    if policy.is_identity() {
        return Ok(());
    }
    let (_, c, h, w) = match batch.shape() {
        &[b, c, h, w] => (b, c, h, w),
        s => return Err(NptnError::shape(format!("batch {s:?} is not [B,C,H,W]"))),
    };
    let shift_max = policy.translate_range + policy.train_jitter + policy.pad_crop;
    if shift_max >= h.min(w) {
        return Err(NptnError::contract(format!(
            "total shift range {shift_max} must be smaller than the {h}x{w} image"
        )));
    }
    let n = c * h * w;
    let mut tmp = vec![0.0f32; n];
    for img in batch.data_mut().chunks_mut(n) {
        if policy.rotation_range > 0.0 {
            let deg = rng.uniform_f64(-policy.rotation_range, policy.rotation_range);
            rotate_planes(img, h, w, deg, &mut tmp);
            img.copy_from_slice(&tmp);
        }
        let (mut dx, mut dy) = (0i64, 0i64);
        for r in [policy.translate_range, policy.train_jitter] {
            if r > 0 {
                let r = r as i64;
                dx += rng.int_inclusive(-r, r);
                dy += rng.int_inclusive(-r, r);
            }
        }
        if policy.pad_crop > 0 {
            // cropping at offset o from the padded image shifts content by pad − o
            let p = policy.pad_crop as i64;
            dy += p - rng.int_inclusive(0, 2 * p);
            dx += p - rng.int_inclusive(0, 2 * p);
        }
        if dx != 0 || dy != 0 {
            translate_planes(img, h, w, dx as isize, dy as isize, &mut tmp);
            img.copy_from_slice(&tmp);
        }
        if policy.hflip && rng.bernoulli() {
            hflip_planes(img, w);
        }
    }
    Ok(())
}

/// A transformed copy of a whole dataset, drawn once from `seed`.
pub fn transform_dataset(ds: &Dataset, policy: &AugmentPolicy, seed: u64) -> Result<Dataset> {
    let mut out = ds.clone();
    augment_batch(&mut out.images, policy, &mut Rng::new(seed))?;
    Ok(out)
}
