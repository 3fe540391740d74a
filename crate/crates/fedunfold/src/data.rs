//! Datasets: IDX file parsing, synthetic blob generation, and heterogeneous
//! partitioning into client-local datasets.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Array;
use crate::model::{one_hot, Batch};
use crate::rng::{self, purpose};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled pool of samples; features live in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Array,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Array, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range 0..{classes}")));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    /// New dataset holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let p = self.features();
        let mut data = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let row = &self.inputs.data()[i * p..(i + 1) * p];
            data.extend_from_slice(row);
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs: Array::from_vec(indices.len(), p, data),
            labels,
            classes: self.classes,
        }
    }

    /// Rows `indices` as a one-hot batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let sub = self.subset(indices);
        Batch {
            targets: one_hot(&sub.labels, self.classes),
            inputs: sub.inputs,
        }
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            targets: one_hot(&self.labels, self.classes),
        }
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// How to split a pool across clients.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Shuffle and deal out near-equal shares.
    IidBalanced { clients: usize },
    /// IID draws of the given sizes.
    QuantitySkew { sizes: Vec<usize> },
    /// Client k draws only from its label set.
    LabelSkew {
        sizes: Vec<usize>,
        label_sets: Vec<Vec<usize>>,
    },
    /// Per-client class proportions drawn from Dirichlet(alpha).
    Dirichlet {
        alpha: f64,
        clients: usize,
        #[serde(default)]
        sizes: Option<Vec<usize>>,
    },
}

impl PartitionScheme {
    pub fn clients(&self) -> usize {
        match self {
            PartitionScheme::IidBalanced { clients } => *clients,
            PartitionScheme::QuantitySkew { sizes } => sizes.len(),
            PartitionScheme::LabelSkew { sizes, .. } => sizes.len(),
            PartitionScheme::Dirichlet { clients, .. } => *clients,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub seed: u64,
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!("truncated file while reading {what}")));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image/label file pair. Pixels are scaled by 1/255 into rows
/// of length rows*cols; image and label counts must agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad magic {magic:#010x} in {} (expected {IDX_IMAGES_MAGIC:#010x})",
            images_path.display()
        )));
    }
    let n = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "image cols")? as usize;
    let pixels = n * rows * cols;
    if img_bytes.len() < 16 + pixels {
        return Err(Error::Data(format!(
            "truncated image file: want {} pixel bytes, have {}",
            pixels,
            img_bytes.len().saturating_sub(16)
        )));
    }

    let lbl_bytes = fs::read(labels_path)?;
    let magic = read_u32_be(&lbl_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad magic {magic:#010x} in {} (expected {IDX_LABELS_MAGIC:#010x})",
            labels_path.display()
        )));
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() < 8 + n_labels {
        return Err(Error::Data("truncated label file".into()));
    }
    if n_labels != n {
        return Err(Error::Data(format!(
            "count mismatch: {n} images vs {n_labels} labels"
        )));
    }

    let data: Vec<f64> = img_bytes[16..16 + pixels]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(Array::from_vec(n, rows * cols, data), labels, classes)
}

/// Write an IDX image file from raw pixel bytes (row-major per image).
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::Data("pixel byte count does not match dimensions".into()));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// Per-class centers in [0.25, 0.75]^dims, rejection-sampled so classes
/// stay distinct: candidates must clear a separation floor, falling back to
/// the farthest candidate seen when the box gets crowded. Deterministic per
/// seed, shared by the training and held-out pools.
pub fn blob_centers(classes: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut stream = rng::stream(seed, &[purpose::SYNTH_CENTERS]);
    let min_dist = 0.3;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..200 {
            let c: Vec<f64> = (0..dims).map(|_| 0.25 + 0.5 * stream.gen::<f64>()).collect();
            let nearest = centers
                .iter()
                .map(|other| {
                    c.iter()
                        .zip(other)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if nearest >= min_dist {
                best = Some((nearest, c));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, c));
            }
        }
        centers.push(best.expect("at least one candidate").1);
    }
    centers
}

/// Gaussian clusters around the seed's per-class centers; samples are
/// clamped to [0, 1]. Deterministic per seed.
pub fn synth_blobs(
    classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    synth_blobs_tagged(classes, dims, per_class, spread, seed, purpose::SYNTH_TRAIN)
}

/// Class-balanced pool around the same centers as [`synth_blobs`] but with
/// an independent noise stream; serves as held-out test data.
pub fn synth_blobs_heldout(
    classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    synth_blobs_tagged(classes, dims, per_class, spread, seed, purpose::SYNTH_TEST)
}

fn synth_blobs_tagged(
    classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
    noise_tag: u64,
) -> Result<Dataset> {
    if classes == 0 || dims == 0 || per_class == 0 {
        return Err(Error::Config("blob counts must be positive".into()));
    }
    if spread < 0.0 {
        return Err(Error::Config("blob spread must be nonnegative".into()));
    }
    let centers = blob_centers(classes, dims, seed);
    let mut stream = rng::stream(seed, &[noise_tag]);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (cls, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let noise: f64 = StandardNormal.sample(&mut stream);
                data.push((c + spread * noise).clamp(0.0, 1.0));
            }
            labels.push(cls);
        }
    }
    Dataset::new(Array::from_vec(n, dims, data), labels, classes)
}

/// Indices of the pool grouped by class, each group shuffled.
fn shuffled_class_queues(dataset: &Dataset, stream: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        queues[l].push(i);
    }
    for q in &mut queues {
        q.shuffle(stream);
    }
    queues
}

/// Largest-remainder rounding of `proportions * total` to integers summing
/// to `total`. Ties break toward lower class indices.
fn apportion(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions.iter().map(|p| (p * total as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut fractions: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in fractions.iter().take(total - assigned) {
        counts[*i] += 1;
    }
    counts
}

/// Pop `want[c]` indices from each class queue; shortfalls refill from the
/// other allowed classes in class order.
fn draw_from_queues(
    queues: &mut [Vec<usize>],
    want: &[usize],
    allowed: &[usize],
    client: usize,
) -> Result<Vec<usize>> {
    let mut taken = Vec::new();
    let mut shortfall = 0;
    for (&cls, &count) in allowed.iter().zip(want) {
        let q = &mut queues[cls];
        let take = count.min(q.len());
        taken.extend(q.drain(q.len() - take..));
        shortfall += count - take;
    }
    if shortfall > 0 {
        for &cls in allowed {
            if shortfall == 0 {
                break;
            }
            let q = &mut queues[cls];
            let take = shortfall.min(q.len());
            taken.extend(q.drain(q.len() - take..));
            shortfall -= take;
        }
    }
    if shortfall > 0 {
        return Err(Error::Infeasible(format!(
            "client {client}: {shortfall} samples short in classes {allowed:?}"
        )));
    }
    Ok(taken)
}

/// Split a pool into client datasets. Assignments are disjoint and
/// deterministic per (dataset, spec).
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let n = dataset.len();
    let mut stream = rng::stream(spec.seed, &[purpose::PARTITION]);
    let indices_per_client: Vec<Vec<usize>> = match &spec.scheme {
        PartitionScheme::IidBalanced { clients } => {
            if *clients == 0 {
                return Err(Error::Config("need at least one client".into()));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream);
            let base = n / clients;
            let extra = n % clients;
            let mut out = Vec::with_capacity(*clients);
            let mut cursor = 0;
            for k in 0..*clients {
                let size = base + usize::from(k < extra);
                out.push(order[cursor..cursor + size].to_vec());
                cursor += size;
            }
            out
        }
        PartitionScheme::QuantitySkew { sizes } => {
            validate_sizes(sizes, n)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream);
            let mut out = Vec::with_capacity(sizes.len());
            let mut cursor = 0;
            for &size in sizes {
                out.push(order[cursor..cursor + size].to_vec());
                cursor += size;
            }
            out
        }
        PartitionScheme::LabelSkew { sizes, label_sets } => {
            validate_sizes(sizes, n)?;
            if label_sets.len() != sizes.len() {
                return Err(Error::Config(format!(
                    "{} label sets for {} clients",
                    label_sets.len(),
                    sizes.len()
                )));
            }
            for (k, set) in label_sets.iter().enumerate() {
                if set.is_empty() {
                    return Err(Error::Config(format!("client {k} has an empty label set")));
                }
                if let Some(&bad) = set.iter().find(|&&l| l >= dataset.classes) {
                    return Err(Error::Config(format!(
                        "client {k} label {bad} out of range 0..{}",
                        dataset.classes
                    )));
                }
            }
            let mut queues = shuffled_class_queues(dataset, &mut stream);
            let mut out = Vec::with_capacity(sizes.len());
            for (k, (&size, set)) in sizes.iter().zip(label_sets).enumerate() {
                // Spread the request evenly across the allowed labels.
                let base = size / set.len();
                let extra = size % set.len();
                let want: Vec<usize> = (0..set.len())
                    .map(|i| base + usize::from(i < extra))
                    .collect();
                out.push(draw_from_queues(&mut queues, &want, set, k)?);
            }
            out
        }
        PartitionScheme::Dirichlet {
            alpha,
            clients,
            sizes,
        } => {
            if *alpha <= 0.0 {
                return Err(Error::Config("dirichlet alpha must be positive".into()));
            }
            if *clients == 0 {
                return Err(Error::Config("need at least one client".into()));
            }
            let sizes = match sizes {
                Some(s) => {
                    if s.len() != *clients {
                        return Err(Error::Config("sizes length vs client count".into()));
                    }
                    validate_sizes(s, n)?;
                    s.clone()
                }
                None => {
                    let base = n / clients;
                    let extra = n % clients;
                    (0..*clients).map(|k| base + usize::from(k < extra)).collect()
                }
            };
            let gamma = Gamma::new(*alpha, 1.0)
                .map_err(|e| Error::Config(format!("dirichlet alpha: {e}")))?;
            let mut queues = shuffled_class_queues(dataset, &mut stream);
            let all_classes: Vec<usize> = (0..dataset.classes).collect();
            let mut out = Vec::with_capacity(*clients);
            for (k, &size) in sizes.iter().enumerate() {
                // Gamma draws normalized to Dirichlet proportions. With very
                // small alpha every draw can underflow to zero; fall back to
                // a one-hot proportion on the argmax in that case.
                let draws: Vec<f64> = (0..dataset.classes)
                    .map(|_| gamma.sample(&mut stream))
                    .collect();
                let total: f64 = draws.iter().sum();
                let proportions: Vec<f64> = if total > 0.0 {
                    draws.iter().map(|d| d / total).collect()
                } else {
                    let top = draws
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map_or(0, |(i, _)| i);
                    (0..dataset.classes).map(|i| f64::from(i == top)).collect()
                };
                let want = apportion(&proportions, size);
                out.push(draw_from_queues(&mut queues, &want, &all_classes, k)?);
            }
            out
        }
    };
    Ok(indices_per_client
        .iter()
        .map(|idx| dataset.subset(idx))
        .collect())
}

fn validate_sizes(sizes: &[usize], pool: usize) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("need at least one client".into()));
    }
    let total: usize = sizes.iter().sum();
    if total > pool {
        return Err(Error::Infeasible(format!(
            "requested {total} samples from a pool of {pool}"
        )));
    }
    Ok(())
}

/// K x c matrix of per-client class counts.
pub fn class_histogram(clients: &[Dataset]) -> Vec<Vec<usize>> {
    clients.iter().map(Dataset::label_histogram).collect()
}

/// Histogram rows in the `client,class,count` layout.
pub fn histogram_csv(clients: &[Dataset]) -> String {
    let mut out = String::from("client,class,count\n");
    for (k, hist) in class_histogram(clients).iter().enumerate() {
        for (c, count) in hist.iter().enumerate() {
            out.push_str(&format!("{k},{c},{count}\n"));
        }
    }
    out
}
