//! Labeled data sources: IDX image benchmarks (MNIST, Fashion-MNIST,
//! Kuzushiji-MNIST), CSV feature tables, and synthetic Gaussian mixtures.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::label_mech::LabeledExample;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled examples sharing a class count `K` and a feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    k: usize,
    examples: Vec<LabeledExample>,
}

impl LabeledDataset {
    pub fn new(k: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("class count K must be positive"));
        }
        let d = examples.first().map_or(0, |e| e.features.len());
        for (i, e) in examples.iter().enumerate() {
            if e.label == 0 || e.label > k {
                return Err(Error::input(format!("example {i}: label {} outside 1..={k}", e.label)));
            }
            if e.features.len() != d {
                return Err(Error::input(format!(
                    "example {i}: feature length {} differs from {d}",
                    e.features.len()
                )));
            }
        }
        Ok(Self { k, examples })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Keeps the first `n` examples.
    pub fn truncate(mut self, n: usize) -> Self {
        self.examples.truncate(n);
        self
    }

    /// Examples per class, indexed by `label - 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for e in &self.examples {
            counts[e.label - 1] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Raw contents of an IDX image/label file pair. Labels are 0-based here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImageSet {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows × cols` pixels.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: bytes.len(),
            message: format!("truncated {what} header"),
        })
}

fn check_payload(bytes: &[u8], offset: usize, expected: usize, what: &str) -> Result<()> {
    let actual = bytes.len() - offset;
    if actual != expected {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!(
                "{} {what} payload: expected {expected} bytes, found {actual}",
                if actual < expected { "truncated" } else { "oversized" }
            ),
        });
    }
    Ok(())
}

impl RawImageSet {
    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        let magic = be_u32(images, 0, "image")?;
        if magic != IDX_IMAGES_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("image magic mismatch: {magic:#010x}"),
            });
        }
        let count = be_u32(images, 4, "image")? as usize;
        let rows = be_u32(images, 8, "image")? as usize;
        let cols = be_u32(images, 12, "image")? as usize;
        check_payload(images, 16, count * rows * cols, "image")?;

        let magic = be_u32(labels, 0, "label")?;
        if magic != IDX_LABELS_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("label magic mismatch: {magic:#010x}"),
            });
        }
        let label_count = be_u32(labels, 4, "label")? as usize;
        check_payload(labels, 8, label_count, "label")?;
        if label_count != count {
            return Err(Error::Format {
                offset: 4,
                message: format!("count mismatch: {count} images, {label_count} labels"),
            });
        }
        Ok(Self {
            rows,
            cols,
            pixels: images[16..].to_vec(),
            labels: labels[8..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images_idx_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGES_MAGIC, self.len() as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn labels_idx_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }

    /// Pixels scaled by `1/255`; labels shifted to `1..=K` with `K = max + 1`.
    pub fn to_dataset(&self, limit: Option<usize>) -> Result<LabeledDataset> {
        let n = limit.map_or(self.len(), |l| l.min(self.len()));
        let dim = self.rows * self.cols;
        let k = self.labels.iter().copied().max().map_or(1, |m| m as usize + 1);
        let examples = (0..n)
            .map(|i| LabeledExample {
                features: self.pixels[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|&p| f64::from(p) / 255.0)
                    .collect(),
                label: self.labels[i] as usize + 1,
            })
            .collect();
        LabeledDataset::new(k, examples)
    }

    /// Inverse of [`RawImageSet::to_dataset`] for `[0, 1]` features.
    pub fn from_dataset(data: &LabeledDataset, rows: usize, cols: usize) -> Result<Self> {
        if data.dim() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                actual: data.dim(),
            });
        }
        let mut pixels = Vec::with_capacity(data.len() * rows * cols);
        for e in data.examples() {
            pixels.extend(e.features.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        let labels = data.examples().iter().map(|e| (e.label - 1) as u8).collect();
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    load_idx_limited(images_path, labels_path, None)
}

pub fn load_idx_limited(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<LabeledDataset> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    RawImageSet::from_idx_bytes(&images, &labels)?.to_dataset(limit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Finds `<prefix>-images-idx3-ubyte[.gz]` and the matching label file in
/// `<data_dir>/<name>/`, falling back to `<data_dir>/` itself.
pub fn locate_idx(data_dir: &Path, name: &str, split: Split) -> Result<(PathBuf, PathBuf)> {
    let find = |dir: &Path, stem: String| {
        [stem.clone(), format!("{stem}.gz")]
            .into_iter()
            .map(|f| dir.join(f))
            .find(|p| p.is_file())
    };
    for dir in [data_dir.join(name), data_dir.to_path_buf()] {
        let images = find(&dir, format!("{}-images-idx3-ubyte", split.prefix()));
        let labels = find(&dir, format!("{}-labels-idx1-ubyte", split.prefix()));
        if let (Some(i), Some(l)) = (images, labels) {
            return Ok((i, l));
        }
    }
    Err(Error::input(format!(
        "no {} IDX files for `{name}` under {}",
        split.prefix(),
        data_dir.display()
    )))
}

/// CSV with header `label,f1,...,fd` and labels in `1..=K`; `K` is the
/// largest label present unless given.
pub fn load_csv(path: impl AsRef<Path>, k: Option<usize>) -> Result<LabeledDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("label") {
        return Err(Error::parse(1, "first column must be `label`"));
    }
    let mut examples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| Error::parse(line, format!("label: {e}")))?;
        if label == 0 {
            return Err(Error::parse(line, "labels are 1-based"));
        }
        let features = record
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::parse(line, format!("feature: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        examples.push(LabeledExample { features, label });
    }
    let k = k.unwrap_or_else(|| examples.iter().map(|e| e.label).max().unwrap_or(1));
    LabeledDataset::new(k, examples)
}

pub fn write_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=data.dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for e in data.examples() {
        let mut row = vec![e.label.to_string()];
        row.extend(e.features.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Vertices of a regular simplex centred at the origin with unit norm,
/// expressed in `K - 1` coordinates.
fn simplex_vertices(k: usize) -> Vec<Vec<f64>> {
    let centred: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k - 1);
    for v in centred.iter().take(k - 1) {
        let mut u = v.clone();
        for b in &basis {
            let c = dot(&u, b);
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let norm = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        basis.push(u);
    }
    centred
        .iter()
        .map(|v| {
            let coords: Vec<f64> = basis.iter().map(|b| dot(v, b)).collect();
            let norm = dot(&coords, &coords).sqrt();
            coords.into_iter().map(|c| c / norm).collect()
        })
        .collect()
}

/// Class means of [`synthetic_gaussians`]: `separation` times unit simplex
/// vertices in the first `K - 1` coordinates of `R^d`.
pub fn gaussian_means(k: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if k < 2 {
        return Err(Error::param("synthetic data needs K >= 2"));
    }
    if d + 1 < k {
        return Err(Error::param(format!("dimension d={d} must be at least K-1={}", k - 1)));
    }
    Ok(simplex_vertices(k)
        .into_iter()
        .map(|v| {
            let mut mean = vec![0.0; d];
            mean.iter_mut().zip(&v).for_each(|(m, c)| *m = separation * c);
            mean
        })
        .collect())
}

/// Isotropic unit-variance Gaussians around [`gaussian_means`], generated
/// class by class. The first 80% of each class goes to the training split.
pub fn synthetic_gaussians(
    k: usize,
    d: usize,
    separation: f64,
    n_per_class: usize,
    rng: &mut impl Rng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let means = gaussian_means(k, d, separation)?;
    let n_train = (n_per_class * 4 + 2) / 5;
    let mut train = Vec::with_capacity(k * n_train);
    let mut test = Vec::with_capacity(k * (n_per_class - n_train));
    for (c, mean) in means.iter().enumerate() {
        for i in 0..n_per_class {
            let features = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ex = LabeledExample { features, label: c + 1 };
            if i < n_train {
                train.push(ex);
            } else {
                test.push(ex);
            }
        }
    }
    Ok((LabeledDataset::new(k, train)?, LabeledDataset::new(k, test)?))
}

/// Keeps labels in `lo..=hi` and renumbers them `1..=hi-lo+1` in order.
pub fn class_filter(data: &LabeledDataset, lo: usize, hi: usize) -> Result<LabeledDataset> {
    if lo == 0 || lo > hi || hi > data.k() {
        return Err(Error::param(format!("class range {lo}..{hi} outside 1..={}", data.k())));
    }
    let examples: Vec<_> = data
        .examples()
        .iter()
        .filter(|e| (lo..=hi).contains(&e.label))
        .map(|e| LabeledExample {
            features: e.features.clone(),
            label: e.label - lo + 1,
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::input(format!("no examples with labels in {lo}..{hi}")));
    }
    LabeledDataset::new(hi - lo + 1, examples)
}
