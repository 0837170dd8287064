//! Labeled datasets, synthetic generators, CSV ingestion and non-iid partitioning.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} outside [0, {label_count})")]
    LabelOutOfRange { label: usize, label_count: usize },
    #[error("feature vectors have inconsistent lengths")]
    RaggedFeatures,
    #[error("insufficient label diversity: {labels} labels cannot cover {devices} devices with at most {max_labels} labels each")]
    InsufficientLabelDiversity { labels: usize, devices: usize, max_labels: usize },
    #[error("{points} points cannot be split over {devices} devices")]
    TooFewPoints { points: usize, devices: usize },
    #[error("max_labels_per_device must be at least 1")]
    ZeroLabelBudget,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv row {row}: {msg}")]
    CsvRow { row: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Vec<DataPoint>,
    pub label_count: usize,
}

impl LabeledDataset {
    pub fn new(points: Vec<DataPoint>, label_count: usize) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::Empty);
        }
        let dim = points[0].features.len();
        for p in &points {
            if p.label >= label_count {
                return Err(DataError::LabelOutOfRange { label: p.label, label_count });
            }
            if p.features.len() != dim {
                return Err(DataError::RaggedFeatures);
            }
        }
        Ok(LabeledDataset { points, label_count })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.points.first().map_or(0, |p| p.features.len())
    }

    pub fn distinct_labels(&self) -> BTreeSet<usize> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// Per-coordinate mean of the feature vectors.
    pub fn feature_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.num_features()];
        for p in &self.points {
            for (a, x) in m.iter_mut().zip(&p.features) {
                *a += x;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Sample variance of the feature vectors, (1/(D-1)) Σ ‖d - mean‖². Zero for one point.
    pub fn feature_variance(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        let m = self.feature_mean();
        let ss: f64 = self
            .points
            .iter()
            .map(|p| p.features.iter().zip(&m).map(|(x, mu)| (x - mu).powi(2)).sum::<f64>())
            .sum();
        ss / (self.len() - 1) as f64
    }
}

/// Isotropic Gaussian clusters, one per label, with balanced label counts.
///
/// Centers are drawn from N(0, separation²) per coordinate; points add N(0, spread²) noise.
pub fn gaussian_blobs(
    num_points: usize,
    num_features: usize,
    label_count: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..label_count)
        .map(|_| {
            (0..num_features)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    separation * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let points = (0..num_points)
        .map(|k| {
            let label = k % label_count.max(1);
            let features = centers[label]
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + spread * z
                })
                .collect();
            DataPoint { features, label }
        })
        .collect();
    LabeledDataset::new(points, label_count)
}

/// Read a headerless or headed CSV whose last column is an integer label.
pub fn read_csv(path: &Path, has_header: bool) -> Result<LabeledDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).from_path(path)?;
    let mut points = Vec::new();
    let mut max_label = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(DataError::CsvRow { row, msg: "need at least one feature and a label".into() });
        }
        let mut features = Vec::with_capacity(rec.len() - 1);
        for field in rec.iter().take(rec.len() - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| DataError::CsvRow { row, msg: format!("bad feature {field:?}") })?;
            features.push(v);
        }
        let raw = rec.get(rec.len() - 1).unwrap_or_default().trim();
        let label: usize = raw
            .parse()
            .map_err(|_| DataError::CsvRow { row, msg: format!("bad label {raw:?}") })?;
        max_label = max_label.max(label);
        points.push(DataPoint { features, label });
    }
    LabeledDataset::new(points, max_label + 1)
}

/// Deterministically carve a held-out fraction. Returns (train, heldout).
pub fn split_heldout(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((data.len() as f64) * fraction).round() as usize;
    let n_hold = n_hold.clamp(1, data.len().saturating_sub(1).max(1));
    let pick = |ids: &[usize]| ids.iter().map(|&k| data.points[k].clone()).collect::<Vec<_>>();
    let heldout = LabeledDataset::new(pick(&idx[..n_hold]), data.label_count)?;
    let train = LabeledDataset::new(pick(&idx[n_hold..]), data.label_count)?;
    Ok((train, heldout))
}

/// Split a dataset over devices so each device sees at most `max_labels_per_device` labels.
///
/// Labels are shuffled, dealt round-robin so every label has a holder, then each device
/// draws a random number of extra labels within its budget. Points of a label are dealt
/// round-robin among the label's holders.
pub fn partition_non_iid(
    data: &LabeledDataset,
    num_devices: usize,
    max_labels_per_device: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>, DataError> {
    if max_labels_per_device == 0 {
        return Err(DataError::ZeroLabelBudget);
    }
    if num_devices == 0 || data.len() < num_devices {
        return Err(DataError::TooFewPoints { points: data.len(), devices: num_devices });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = data.distinct_labels().into_iter().collect();
    if labels.is_empty() || labels.len() > num_devices * max_labels_per_device {
        return Err(DataError::InsufficientLabelDiversity {
            labels: labels.len(),
            devices: num_devices,
            max_labels: max_labels_per_device,
        });
    }
    labels.shuffle(&mut rng);

    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); data.label_count];
    for (k, p) in data.points.iter().enumerate() {
        by_label[p.label].push(k);
    }
    for ids in by_label.iter_mut() {
        ids.shuffle(&mut rng);
    }

    let mut held: Vec<Vec<usize>> = vec![Vec::new(); num_devices];
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); data.label_count];
    for (k, &l) in labels.iter().enumerate() {
        held[k % num_devices].push(l);
        holders[l].push(k % num_devices);
    }
    // devices left without a label share the label with the most spare points
    for d in 0..num_devices {
        if held[d].is_empty() {
            let l = *labels
                .iter()
                .max_by_key(|&&l| by_label[l].len() as i64 - holders[l].len() as i64)
                .expect("labels non-empty");
            held[d].push(l);
            holders[l].push(d);
        }
    }
    let mut order: Vec<usize> = (0..num_devices).collect();
    order.shuffle(&mut rng);
    for d in order {
        let budget = max_labels_per_device - held[d].len().min(max_labels_per_device);
        let extra = if budget == 0 { 0 } else { rng.random_range(0..=budget) };
        let mut candidates: Vec<usize> = labels
            .iter()
            .copied()
            .filter(|l| !held[d].contains(l) && by_label[*l].len() > holders[*l].len())
            .collect();
        candidates.shuffle(&mut rng);
        for l in candidates.into_iter().take(extra) {
            held[d].push(l);
            holders[l].push(d);
        }
    }

    let mut parts: Vec<Vec<DataPoint>> = vec![Vec::new(); num_devices];
    for &l in &labels {
        let hs = &holders[l];
        for (k, &pid) in by_label[l].iter().enumerate() {
            parts[hs[k % hs.len()]].push(data.points[pid].clone());
        }
    }
    parts
        .into_iter()
        .map(|pts| {
            if pts.is_empty() {
                Err(DataError::TooFewPoints { points: data.len(), devices: num_devices })
            } else {
                LabeledDataset::new(pts, data.label_count)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, labels: usize) -> LabeledDataset {
        let pts = (0..n)
            .map(|k| DataPoint { features: vec![k as f64], label: k % labels })
            .collect();
        LabeledDataset::new(pts, labels).unwrap()
    }

    #[test]
    fn hundred_points_ten_devices_four_labels() {
        let d = toy(100, 10);
        let parts = partition_non_iid(&d, 10, 4, 3).unwrap();
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 100);
        for p in &parts {
            assert!(p.distinct_labels().len() <= 4);
        }
    }

    #[test]
    fn two_labels_two_devices_single_label_each() {
        let d = toy(12, 2);
        for seed in 0..20 {
            let parts = partition_non_iid(&d, 2, 1, seed).unwrap();
            // the only valid assignments give each device one distinct label
            let a = parts[0].distinct_labels();
            let b = parts[1].distinct_labels();
            assert_eq!(a.len(), 1);
            assert_eq!(b.len(), 1);
            assert_ne!(a, b);
            assert_eq!(parts[0].len() + parts[1].len(), 12);
        }
    }

    #[test]
    fn label_capacity_error() {
        let d = toy(30, 10);
        let err = partition_non_iid(&d, 2, 4, 0).unwrap_err();
        assert!(err.to_string().contains("insufficient label diversity"));
    }

    #[test]
    fn blobs_are_balanced() {
        let d = gaussian_blobs(40, 3, 4, 2.0, 0.5, 9).unwrap();
        for l in 0..4 {
            assert_eq!(d.points.iter().filter(|p| p.label == l).count(), 10);
        }
    }

    #[test]
    fn heldout_split_is_disjoint_and_covering() {
        let d = toy(50, 5);
        let (tr, ho) = split_heldout(&d, 0.2, 1).unwrap();
        assert_eq!(ho.len(), 10);
        assert_eq!(tr.len(), 40);
        let mut all: Vec<f64> = tr.points.iter().chain(&ho.points).map(|p| p.features[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..50).map(|k| k as f64).collect::<Vec<_>>());
    }
}
