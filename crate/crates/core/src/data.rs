//! Datasets: IDX and CSV ingestion plus a synthetic transfer-learning task.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    FinetuneTrain,
    FinetuneTest,
}

/// Per-dimension affine normalisation `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Zero-variance dimensions get `std = 1` so they stay finite.
    pub fn fit(features: &[f64], dim: usize) -> Self {
        let n = features.len().checked_div(dim).unwrap_or(0);
        let mut mean = vec![0.0; dim];
        let mut std = vec![1.0; dim];
        if n == 0 {
            return NormStats { mean, std };
        }
        for row in features.chunks(dim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            for j in 0..dim {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for j in 0..dim {
            let s = (var[j] / n as f64).sqrt();
            std[j] = if s > 1e-12 { s } else { 1.0 };
        }
        NormStats { mean, std }
    }

    pub fn apply(&self, features: &mut [f64]) {
        let dim = self.mean.len();
        for row in features.chunks_mut(dim) {
            for j in 0..dim {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Config(format!(
                "dataset shape mismatch: {} values, {} labels, dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            classes,
            split,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.dim, self.labels.clone()).expect("dataset shape is valid")
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, ids: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(ids.len() * self.dim);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::with_ids(inputs, self.dim, labels, ids.to_vec()).expect("gathered batch shape")
    }

    /// Normalises with statistics from this dataset and returns them.
    pub fn normalize_fit(&mut self) -> NormStats {
        let stats = NormStats::fit(&self.features, self.dim);
        stats.apply(&mut self.features);
        self.norm = Some(stats.clone());
        stats
    }

    pub fn normalize_with(&mut self, stats: &NormStats) {
        stats.apply(&mut self.features);
        self.norm = Some(stats.clone());
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(offset as u64, "truncated header"))
}

/// Parses an IDX image file (`u8` pixels, 3 dimensions). Returns
/// `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::parse(
            (16 + body.len()) as u64,
            format!("truncated image data: expected {need} bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::parse((16 + need) as u64, "trailing bytes after image data"));
    }
    Ok((count, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::parse(
            (8 + body.len()) as u64,
            format!("truncated label data: expected {count} bytes, found {}", body.len()),
        ));
    }
    if body.len() > count {
        return Err(Error::parse((8 + count) as u64, "trailing bytes after label data"));
    }
    Ok(body)
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; no
/// normalisation is applied here.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images)?;
    let lbl_bytes = fs::read(labels)?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbls = parse_idx_labels(&lbl_bytes)?;
    if lbls.len() != count {
        return Err(Error::parse(
            4,
            format!("label count {} does not match image count {count}", lbls.len()),
        ));
    }
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lbls.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, rows * cols, labels, classes, split)
}

/// Loads a CSV file with a header row; the column named `label` holds the
/// integer class and every other column is a feature.
pub fn load_csv(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::parse(0, "no column named \"label\""))?;
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte());
        for (j, field) in record.iter().enumerate() {
            if j == label_col {
                let y: usize = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(offset, format!("bad label {field:?}")))?;
                labels.push(y);
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(offset, format!("bad feature {field:?}")))?;
                features.push(v);
            }
        }
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, dim, labels, classes, split)
}

/// Settings for the synthetic transfer task.
///
/// The pretrain task is a Gaussian mixture over all `dim` inputs. The
/// fine-tune task uses different class means; with `planted_fraction > 0`
/// only the planted input dimensions depend on the label. Non-planted
/// dimensions in the fine-tune data are label-independent sparse noise that is
/// active (non-zero) with probability `nuisance_activity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub dim: usize,
    pub pretrain_classes: usize,
    pub classes: usize,
    pub pretrain_samples: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Scale of the class means relative to unit within-class noise.
    pub separation: f64,
    /// Fraction of input dimensions that carry fine-tune signal; 0 disables planting.
    #[serde(default)]
    pub planted_fraction: f64,
    #[serde(default)]
    pub nuisance_activity: f64,
    /// Correlation between pretrain and fine-tune class means on shared dims.
    #[serde(default = "default_relatedness")]
    pub relatedness: f64,
    /// Fine-tune samples sit at `+mu_y` or `-mu_y` with equal probability, so
    /// the classes are not linearly separable in the raw input.
    #[serde(default)]
    pub antipodal: bool,
}

fn default_relatedness() -> f64 {
    0.5
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            dim: 100,
            pretrain_classes: 10,
            classes: 10,
            pretrain_samples: 4000,
            train_samples: 4000,
            test_samples: 2000,
            separation: 1.0,
            planted_fraction: 0.1,
            nuisance_activity: 0.0,
            relatedness: 0.5,
            antipodal: false,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(format!("invalid task spec: {m}")));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.classes < 2 || self.pretrain_classes < 2 {
            return bad("need at least two classes");
        }
        if self.train_samples == 0 || self.test_samples == 0 || self.pretrain_samples == 0 {
            return bad("sample counts must be positive");
        }
        if !(self.separation > 0.0) {
            return bad("separation must be positive");
        }
        if !(0.0..=1.0).contains(&self.planted_fraction) || !(0.0..=1.0).contains(&self.nuisance_activity) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return bad("relatedness must lie in [0, 1]");
        }
        if self.planted_fraction > 0.0 && self.planted_count() == 0 {
            return bad("planted fraction selects no dimensions");
        }
        Ok(())
    }

    pub fn planted_count(&self) -> usize {
        if self.planted_fraction <= 0.0 {
            self.dim
        } else {
            ((self.planted_fraction * self.dim as f64).round() as usize).min(self.dim)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferTask {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    /// Sorted input dimensions that carry fine-tune signal (all dims when not planted).
    pub planted_dims: Vec<usize>,
}

/// Generates the pretrain and fine-tune splits deterministically from `seed`.
/// Fine-tune train and test are drawn independently and normalised with
/// train statistics only.
pub fn synth_transfer_task(spec: &TaskSpec, seed: u64) -> Result<TransferTask> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0x7a5c);
    let d = spec.dim;

    let mut dims: Vec<usize> = (0..d).collect();
    dims.shuffle(&mut rng);
    let mut planted: Vec<usize> = dims[..spec.planted_count()].to_vec();
    planted.sort_unstable();
    let mut is_planted = vec![false; d];
    planted.iter().for_each(|&j| is_planted[j] = true);

    let gauss = |rng: &mut ChaCha20Rng| -> f64 { StandardNormal.sample(rng) };
    let pre_means: Vec<Vec<f64>> = (0..spec.pretrain_classes)
        .map(|_| (0..d).map(|_| spec.separation * gauss(&mut rng)).collect())
        .collect();
    let rho = spec.relatedness;
    let ft_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let base = &pre_means[c % spec.pretrain_classes];
            (0..d)
                .map(|j| {
                    if is_planted[j] {
                        rho * base[j] + (1.0 - rho * rho).sqrt() * spec.separation * gauss(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let sample_mixture = |rng: &mut ChaCha20Rng, means: &[Vec<f64>], n: usize, finetune: bool| {
        let k = means.len();
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % k;
            let sign = if finetune && spec.antipodal && rng.random::<bool>() { -1.0 } else { 1.0 };
            for j in 0..d {
                let x = if !finetune || is_planted[j] {
                    sign * means[y][j] + gauss(rng)
                } else if spec.nuisance_activity > 0.0 && rng.random::<f64>() < spec.nuisance_activity {
                    gauss(rng)
                } else {
                    0.0
                };
                features.push(x);
            }
            labels.push(y);
        }
        (features, labels)
    };

    let (f, l) = sample_mixture(&mut rng, &pre_means, spec.pretrain_samples, false);
    let mut pretrain = Dataset::new(f, d, l, spec.pretrain_classes, Split::Pretrain)?;
    let (f, l) = sample_mixture(&mut rng, &ft_means, spec.train_samples, true);
    let mut train = Dataset::new(f, d, l, spec.classes, Split::FinetuneTrain)?;
    let (f, l) = sample_mixture(&mut rng, &ft_means, spec.test_samples, true);
    let mut test = Dataset::new(f, d, l, spec.classes, Split::FinetuneTest)?;

    pretrain.normalize_fit();
    let stats = train.normalize_fit();
    test.normalize_with(&stats);

    Ok(TransferTask {
        pretrain,
        train,
        test,
        planted_dims: planted,
    })
}
