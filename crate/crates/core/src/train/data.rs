//! Datasets: seeded synthetic blobs, IDX files and image lists.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn to_field(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        format!("{};{}", join(&self.mean), join(&self.std))
    }

    pub fn from_field(s: &str) -> Result<Self> {
        let parse = |part: &str| -> Result<Vec<f64>> {
            part.split(',')
                .map(|v| v.parse().map_err(|e| Error::Format(format!("channel stats: {e}"))))
                .collect()
        };
        let (m, s) = s
            .split_once(';')
            .ok_or_else(|| Error::Format("channel stats must be `mean,..;std,..`".into()))?;
        let (mean, std) = (parse(m)?, parse(s)?);
        if mean.len() != std.len() {
            return Err(Error::Format("channel stats: mean/std length mismatch".into()));
        }
        Ok(Self { mean, std })
    }
}

/// Images `[N,H,W,C]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    /// Channel statistics of `images` as loaded.
    pub stats: ChannelStats,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        images.expect_rank(4, "dataset images")?;
        if images.shape()[0] != labels.len() {
            return crate::error::shape_err(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return config_err(format!("label {bad} out of range for {num_classes} classes"));
        }
        let stats = channel_stats(&images);
        Ok(Self {
            images,
            labels,
            num_classes,
            split: split.into(),
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Images and labels at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.images.len() / self.len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Self> {
        let (images, labels) = self.gather(indices)?;
        Self::new(images, labels, self.num_classes, split)
    }

    /// Seeded shuffle, then the first `val_fraction` becomes validation.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
            return config_err(format!("validation fraction must be in (0, 1), got {val_fraction}"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * val_fraction).round().max(1.0) as usize;
        if n_val >= self.len() {
            return config_err("validation split leaves no training examples");
        }
        let (val, train) = idx.split_at(n_val);
        Ok((self.subset(train, "train")?, self.subset(val, "val")?))
    }

    /// Standardizes every channel with `stats`.
    pub fn normalized(&self, stats: &ChannelStats) -> Result<Self> {
        let c = self.image_shape().2;
        if stats.mean.len() != c {
            return config_err(format!("normalization has {} channels, images have {c}", stats.mean.len()));
        }
        let mean: Vec<T> = stats.mean.iter().map(|&m| T::of(m)).collect();
        let inv: Vec<T> = stats
            .std
            .iter()
            .map(|&s| T::of(if s > 0.0 { 1.0 / s } else { 1.0 }))
            .collect();
        let mut images = self.images.clone();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v - mean[ch]) * inv[ch];
        }
        Self::new(images, self.labels.clone(), self.num_classes, self.split.clone())
    }
}

fn channel_stats<T: Scalar>(images: &Tensor<T>) -> ChannelStats {
    let c = images.shape()[3];
    let count = (images.len() / c) as f64;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, &v) in images.data().iter().enumerate() {
        let v = v.as_f64();
        sum[i % c] += v;
        sq[i % c] += v * v;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0).sqrt())
        .collect();
    ChannelStats { mean, std }
}

/// Class-conditional Gaussian blobs: each class has its own blob center and color.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Standard deviation of the blob-center jitter, in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 500,
            height: 16,
            width: 16,
            channels: 3,
            noise: 0.6,
            jitter: 2.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Parses `key=value` pairs separated by commas; unknown keys are errors.
    pub fn parse(options: &str) -> Result<Self> {
        let mut s = Self::default();
        for kv in options.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic option {kv:?} is not key=value")))?;
            let int = || v.parse::<usize>().map_err(|e| Error::Config(format!("{k}: {e}")));
            let real = || v.parse::<f64>().map_err(|e| Error::Config(format!("{k}: {e}")));
            match k {
                "classes" => s.classes = int()?,
                "per_class" => s.per_class = int()?,
                "size" => {
                    s.height = int()?;
                    s.width = s.height;
                }
                "height" => s.height = int()?,
                "width" => s.width = int()?,
                "channels" => s.channels = int()?,
                "noise" => s.noise = real()?,
                "jitter" => s.jitter = real()?,
                "seed" => s.seed = v.parse().map_err(|e| Error::Config(format!("seed: {e}")))?,
                other => return config_err(format!("unknown synthetic option {other:?}")),
            }
        }
        Ok(s)
    }

    pub fn generate<T: Scalar>(&self) -> Result<Dataset<T>> {
        if self.classes < 2 || self.per_class == 0 {
            return config_err("synthetic data needs at least 2 classes and 1 example per class");
        }
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // class centers on a ring, colors drawn per class
        let radius = 0.28 * h.min(w) as f64;
        let centers: Vec<(f64, f64)> = (0..self.classes)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / self.classes as f64;
                ((h as f64 - 1.0) / 2.0 + radius * t.sin(), (w as f64 - 1.0) / 2.0 + radius * t.cos())
            })
            .collect();
        // evenly spaced phases of a cosine palette, lightly perturbed
        let colors: Vec<Vec<f64>> = (0..self.classes)
            .map(|k| {
                (0..c)
                    .map(|ch| {
                        let t = k as f64 / self.classes as f64 + ch as f64 / c as f64;
                        0.5 + 0.5 * (std::f64::consts::TAU * t).cos() + rng.random_range(-0.05..0.05)
                    })
                    .collect()
            })
            .collect();
        let sigma = h.min(w) as f64 / 6.0;

        let n = self.classes * self.per_class;
        let mut order: Vec<usize> = (0..n).map(|i| i / self.per_class).collect();
        order.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * h * w * c);
        for &label in &order {
            let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
            let cy = centers[label].0 + self.jitter * normal(&mut rng);
            let cx = centers[label].1 + self.jitter * normal(&mut rng);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                    for &col in &colors[label] {
                        data.push(T::of(col * blob + self.noise * normal(&mut rng)));
                    }
                }
            }
        }
        Dataset::new(Tensor::new(vec![n, h, w, c], data)?, order, self.classes, "all")
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// IDX image and label files.
    Idx { images: PathBuf, labels: PathBuf },
    /// CSV of `path,label` rows; paths are relative to the CSV.
    ImageList(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    /// `synthetic[:k=v,..]`, `idx:IMAGES,LABELS`, a directory holding
    /// `images.idx` and `labels.idx`, or a `.csv` image list.
    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DataSource::Synthetic(SyntheticSpec::default()));
        }
        if let Some(opts) = s.strip_prefix("synthetic:") {
            return Ok(DataSource::Synthetic(SyntheticSpec::parse(opts)?));
        }
        if let Some(rest) = s.strip_prefix("idx:") {
            let (i, l) = rest
                .split_once(',')
                .ok_or_else(|| Error::Config("idx source must be idx:IMAGES,LABELS".into()))?;
            return Ok(DataSource::Idx {
                images: i.into(),
                labels: l.into(),
            });
        }
        let path = Path::new(s.strip_prefix("csv:").unwrap_or(s));
        if path.is_dir() {
            return Ok(DataSource::Idx {
                images: path.join("images.idx"),
                labels: path.join("labels.idx"),
            });
        }
        if path.extension().is_some_and(|e| e == "csv") {
            return Ok(DataSource::ImageList(path.into()));
        }
        if !path.exists() {
            return config_err(format!("data path {} does not exist", path.display()));
        }
        config_err(format!("cannot infer dataset format of {}", path.display()))
    }
}

pub fn load_dataset<T: Scalar>(source: &DataSource) -> Result<Dataset<T>> {
    match source {
        DataSource::Synthetic(spec) => spec.generate(),
        DataSource::Idx { images, labels } => load_idx_pair(images, labels),
        DataSource::ImageList(csv) => load_image_list(csv),
    }
}

// ---------------------------------------------------------------------------
// IDX

const IDX_U8: u8 = 0x08;
const IDX_I8: u8 = 0x09;
const IDX_I16: u8 = 0x0B;
const IDX_I32: u8 = 0x0C;
const IDX_F32: u8 = 0x0D;
const IDX_F64: u8 = 0x0E;

/// Decoded IDX array as f64 plus its dims and type code.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic number".into()));
    }
    let (code, ndim) = (bytes[2], bytes[3] as usize);
    let width = match code {
        IDX_U8 | IDX_I8 => 1,
        IDX_I16 => 2,
        IDX_I32 | IDX_F32 => 4,
        IDX_F64 => 8,
        other => return Err(Error::Format(format!("unknown IDX type code 0x{other:02X}"))),
    };
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|d| u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != count * width {
        return Err(Error::Format(format!(
            "IDX body holds {} bytes, dims {dims:?} need {}",
            body.len(),
            count * width
        )));
    }
    let values = body
        .chunks_exact(width)
        .map(|b| match code {
            IDX_U8 => b[0] as f64,
            IDX_I8 => b[0] as i8 as f64,
            IDX_I16 => i16::from_be_bytes([b[0], b[1]]) as f64,
            IDX_I32 => i32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64,
            IDX_F32 => f32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64,
            _ => f64::from_be_bytes(b.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(IdxArray {
        type_code: code,
        dims,
        values,
    })
}

fn idx_header(code: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, code, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Float tensor as IDX with the matching float type code.
pub fn encode_idx_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let code = if T::BYTES == 4 { IDX_F32 } else { IDX_F64 };
    let mut out = idx_header(code, t.shape());
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.put_be(&mut out);
    }
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let wide = labels.iter().any(|&l| l > u8::MAX as usize);
    let mut out = idx_header(if wide { IDX_I32 } else { IDX_U8 }, &[labels.len()]);
    for &l in labels {
        if wide {
            out.extend_from_slice(&(l as i32).to_be_bytes());
        } else {
            out.push(l as u8);
        }
    }
    out
}

pub fn save_idx_pair<T: Scalar>(ds: &Dataset<T>, images: &Path, labels: &Path) -> Result<()> {
    crate::io::write_atomic(images, &encode_idx_tensor(&ds.images))?;
    crate::io::write_atomic(labels, &encode_idx_labels(&ds.labels))?;
    Ok(())
}

/// Integer images are scaled to [0,1]; float images load verbatim.
pub fn load_idx_pair<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let img = parse_idx(&fs::read(images)?)?;
    let lab = parse_idx(&fs::read(labels)?)?;
    let mut dims = img.dims.clone();
    match dims.len() {
        3 => dims.push(1),
        4 => {}
        d => return Err(Error::Format(format!("IDX images must have 3 or 4 dims, got {d}"))),
    }
    if lab.dims.len() != 1 || matches!(lab.type_code, IDX_F32 | IDX_F64) {
        return Err(Error::Format("IDX labels must be a 1-d integer array".into()));
    }
    let scale = if img.type_code == IDX_U8 { 1.0 / 255.0 } else { 1.0 };
    let data = img
        .values
        .iter()
        .map(|&v| if scale == 1.0 { T::of(v) } else { T::of(v * scale) })
        .collect();
    let labels: Vec<usize> = lab
        .values
        .iter()
        .map(|&v| {
            if v < 0.0 {
                Err(Error::Format(format!("negative label {v}")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<_>>()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(dims, data)?, labels, classes, "all")
}

// ---------------------------------------------------------------------------
// image lists

pub fn load_image_list<T: Scalar>(csv_path: &Path) -> Result<Dataset<T>> {
    let root = csv_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
        let (Some(file), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Format(format!("row {}: expected `path,label`", row + 1)));
        };
        let Ok(label) = label.parse::<usize>() else {
            if row == 0 {
                continue; // header
            }
            return Err(Error::Format(format!("row {}: bad label {label:?}", row + 1)));
        };
        let img = image::open(root.join(file))
            .map_err(|e| Error::Format(format!("{file}: {e}")))?
            .to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(Error::Format(format!("{file}: all images must share one size")));
        }
        data.extend(img.as_raw().iter().map(|&b| T::of(b as f64 / 255.0)));
        labels.push(label);
    }
    let Some((w, h)) = size else {
        return Err(Error::Format(format!("{} lists no images", csv_path.display())));
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![labels.len(), h as usize, w as usize, 3], data)?,
        labels,
        classes,
        "all",
    )
}
