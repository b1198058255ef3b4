//! Datasets, IDX loading, synthetic data and Dirichlet client partitions.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Data("dataset needs at least one feature".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::Data(format!(
                "{} feature values do not fill {} rows of width {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Dataset {
            features,
            n_features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the given rows into a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// Widens the label space, e.g. when a split lacks the top class.
    pub fn with_n_classes(mut self, n_classes: usize) -> Result<Self> {
        if n_classes < self.n_classes {
            return Err(Error::Data(format!(
                "cannot shrink {} classes to {n_classes}",
                self.n_classes
            )));
        }
        self.n_classes = n_classes;
        Ok(self)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Train and held-out test data.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Client id -> training-row indices. Cells are disjoint and cover every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    cells: Vec<Vec<usize>>,
}

impl Partition {
    pub fn from_cells(cells: Vec<Vec<usize>>) -> Self {
        Partition { cells }
    }

    pub fn n_clients(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, client: usize) -> &[usize] {
        &self.cells[client]
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    /// Checks disjointness, coverage of `0..n` and non-empty cells.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, cell) in self.cells.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::Data(format!("client {c} owns no samples")));
            }
            for &i in cell {
                if i >= n {
                    return Err(Error::Data(format!("client {c} holds row {i} >= {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!("row {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("row {missing} assigned to no client")));
        }
        Ok(())
    }

    /// Per-client class counts, `[client][class]`.
    pub fn class_counts(&self, labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
        self.cells
            .iter()
            .map(|cell| {
                let mut h = vec![0; n_classes];
                for &i in cell {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Total-variation distance between each client's class distribution and
    /// the global one.
    pub fn tv_distances(&self, labels: &[usize], n_classes: usize) -> Vec<f64> {
        let mut global = vec![0usize; n_classes];
        for &l in labels {
            global[l] += 1;
        }
        let total = labels.len() as f64;
        self.class_counts(labels, n_classes)
            .iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                0.5 * h
                    .iter()
                    .zip(&global)
                    .map(|(&c, &g)| (c as f64 / n as f64 - g as f64 / total).abs())
                    .sum::<f64>()
            })
            .collect()
    }

    /// Writes `client_id,class_id,count` rows, one per (client, class).
    pub fn write_stats_csv<W: Write>(
        &self,
        labels: &[usize],
        n_classes: usize,
        out: W,
    ) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            client_id: usize,
            class_id: usize,
            count: usize,
        }
        let mut w = csv::Writer::from_writer(out);
        for (client_id, h) in self.class_counts(labels, n_classes).iter().enumerate() {
            for (class_id, &count) in h.iter().enumerate() {
                w.serialize(Row {
                    client_id,
                    class_id,
                    count,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io("<partition stats>", e))?;
        Ok(())
    }
}

/// Training data split across clients, plus the global test split.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
    pub partition: Partition,
    shards: Vec<Dataset>,
}

impl FederatedDataset {
    pub fn new(train: Arc<Dataset>, test: Arc<Dataset>, partition: Partition) -> Result<Self> {
        partition.check(train.len())?;
        let shards = partition
            .cells()
            .iter()
            .map(|cell| train.subset(cell))
            .collect();
        Ok(FederatedDataset {
            train,
            test,
            partition,
            shards,
        })
    }

    pub fn from_split(split: SplitDataset, partition: Partition) -> Result<Self> {
        Self::new(Arc::new(split.train), Arc::new(split.test), partition)
    }

    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    /// Client `i`'s training rows, materialized.
    pub fn shard(&self, client: usize) -> &Dataset {
        &self.shards[client]
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub alpha: f64,
}

fn dirichlet(alpha: f64, n: usize, rng: &mut RngStream) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed: all mass on one uniformly chosen client
        let mut p = vec![0.0; n];
        p[rng.below(n)] = 1.0;
        p
    }
}

/// Splits `total` items by `proportions` using largest-remainder rounding.
/// Remainder ties go to the lower index.
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet split of sample indices across clients.
///
/// For each class, in ascending class order, the class's indices are shuffled
/// and split by proportions drawn from `Dirichlet(alpha * 1)`. Clients left
/// empty then take one sample each from the currently largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    spec: &PartitionSpec,
    rng: &mut RngStream,
) -> Result<Partition> {
    if labels.is_empty() {
        return Err(Error::Data("cannot partition an empty label set".into()));
    }
    if spec.n_clients == 0 {
        return Err(Error::Parameter("n_clients must be >= 1".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::Parameter(format!(
            "alpha must be positive, got {}",
            spec.alpha
        )));
    }
    if labels.len() < spec.n_clients {
        return Err(Error::Data(format!(
            "{} samples cannot cover {} clients",
            labels.len(),
            spec.n_clients
        )));
    }

    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); spec.n_clients];
    for mut members in by_class.into_iter().filter(|m| !m.is_empty()) {
        members.shuffle(rng);
        let proportions = dirichlet(spec.alpha, spec.n_clients, rng);
        let counts = largest_remainder(members.len(), &proportions);
        let mut rest = members.as_slice();
        for (cell, count) in cells.iter_mut().zip(counts) {
            let (take, tail) = rest.split_at(count);
            cell.extend_from_slice(take);
            rest = tail;
        }
    }

    for empty in 0..cells.len() {
        if !cells[empty].is_empty() {
            continue;
        }
        let largest = (0..cells.len())
            .max_by(|&a, &b| cells[a].len().cmp(&cells[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let stolen = cells[largest].pop().expect("largest client is non-empty");
        cells[empty].push(stolen);
    }

    for cell in &mut cells {
        cell.sort_unstable();
    }
    Ok(Partition { cells })
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "file ends inside the header".into(),
        })
}

/// Parses an IDX file with the expected magic; returns dims and the payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let n_dims = (magic & 0xff) as usize;
    let dims = (0..n_dims)
        .map(|k| read_be_u32(bytes, 4 + 4 * k, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * n_dims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!(
                "truncated payload: {} of {} bytes after header",
                payload.len(),
                expected
            ),
        });
    }
    Ok((dims, &payload[..expected]))
}

/// Loads an IDX image/label pair; pixel bytes are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let (image_dims, pixels) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, images_path)?;
    let (label_dims, raw_labels) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, labels_path)?;

    if image_dims[0] != label_dims[0] {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!(
                "{} labels for {} images in {}",
                label_dims[0],
                image_dims[0],
                images_path.display()
            ),
        });
    }

    let n_features = image_dims[1] * image_dims[2];
    let labels: Vec<usize> = raw_labels.iter().map(|&b| usize::from(b)).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(features, n_features, labels, n_classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Minimum distance between class centres, in units of the unit-variance
    /// cluster noise.
    pub margin: f64,
}

/// Gaussian class clusters, min-max scaled to `[0, 1]` per feature, with the
/// last 20% of a shuffled order held out as the test split.
pub fn synth_classification(spec: &SynthSpec, rng: &mut RngStream) -> Result<SplitDataset> {
    let SynthSpec {
        n,
        n_features,
        n_classes,
        margin,
    } = *spec;
    if n_classes < 2 || n < n_classes {
        return Err(Error::Parameter(format!(
            "synthetic data needs n >= n_classes >= 2, got n={n}, n_classes={n_classes}"
        )));
    }
    if n_features == 0 || !(margin >= 0.0) {
        return Err(Error::Parameter(
            "synthetic data needs n_features >= 1 and margin >= 0".into(),
        ));
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // random dense centers, rescaled so the closest pair sits at `margin`
    let raw: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..n_features).map(|_| normal.sample(rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..n_classes {
        for b in a + 1..n_classes {
            let d2: f64 = raw[a].iter().zip(&raw[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    let s = if min_dist > 0.0 { margin / min_dist } else { 0.0 };
    let centers: Vec<Vec<f64>> = raw
        .into_iter()
        .map(|c| c.into_iter().map(|v| v * s).collect())
        .collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(n * n_features);
    for &l in &labels {
        for j in 0..n_features {
            features.push(centers[l][j] + normal.sample(rng));
        }
    }

    for j in 0..n_features {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            let v = features[i * n_features + j];
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for i in 0..n {
            let v = &mut features[i * n_features + j];
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }

    let all = Dataset::new(features, n_features, labels, n_classes)?;
    let n_test = if n >= 5 { n / 5 } else { 0 };
    let train_rows: Vec<usize> = (0..n - n_test).collect();
    let test_rows: Vec<usize> = (n - n_test..n).collect();
    Ok(SplitDataset {
        train: all.subset(&train_rows),
        test: all.subset(&test_rows),
    })
}
