use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::Batch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Labelled samples with a shared feature dimension, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize, split: Split) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::config("dataset needs a positive dimension and class count"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} labels need {} features, got {}",
                labels.len(),
                labels.len() * dim,
                features.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dimension(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Copies the given rows into a batch.
    pub fn gather(&self, indices: &[usize], source_chunk: usize) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.sample(i);
            features.extend_from_slice(x);
            labels.push(y);
        }
        Batch::new(features, self.dim, labels, source_chunk)
    }

    /// The whole dataset as one batch (used for evaluation).
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.dim, self.labels.clone(), 0)
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Minimum distance between any two blob centers.
pub const MIN_CENTER_DISTANCE: f64 = 4.0;
const CENTER_SEED: u64 = 0xb10b_5eed;

/// Class centers shared by every dataset with the same `(num_classes, dim)`,
/// so train and test splits drawn with different seeds describe the same task.
pub fn blob_centers(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(CENTER_SEED ^ ((num_classes as u64) << 32) ^ dim as u64);
    // typical pairwise distance sigma * sqrt(2d) starts around 6
    let mut sigma = 6.0 / (2.0 * dim as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut misses = 0;
    while centers.len() < num_classes {
        let candidate: Vec<f64> = (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let far_enough = centers.iter().all(|c| {
            c.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_CENTER_DISTANCE
        });
        if far_enough {
            centers.push(candidate);
        } else {
            misses += 1;
            if misses % 200 == 0 {
                sigma *= 1.1;
            }
        }
    }
    centers
}

/// Gaussian blobs with unit within-class deviation around [`blob_centers`].
/// Samples are interleaved by class so any prefix stays balanced.
pub fn generate_blobs(num_classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::config("generate_blobs needs positive classes, per_class and dim"));
    }
    let centers = blob_centers(num_classes, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (label, center) in centers.iter().enumerate() {
            features.extend(center.iter().map(|c| c + rng.sample::<f64, _>(StandardNormal)));
            labels.push(label);
        }
    }
    Dataset::new(features, labels, dim, num_classes, Split::Train)
}

/// Sidecar metadata stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub dim: usize,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub samples: Option<usize>,
}

/// `train.csv` → `train.csv.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes `label,f0,f1,...` rows plus the JSON sidecar.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.dim).map(|i| format!("f{i}")));
    writer.write_record(&header)?;
    let mut row = Vec::with_capacity(dataset.dim + 1);
    for i in 0..dataset.len() {
        let (x, y) = dataset.sample(i);
        row.clear();
        row.push(y.to_string());
        row.extend(x.iter().map(|v| format!("{v:?}")));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    let meta = DatasetMeta {
        num_classes: dataset.num_classes,
        dim: dataset.dim,
        split: dataset.split,
        samples: Some(dataset.len()),
    };
    fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_path(path))?)?;
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != meta.dim + 1 || headers.get(0) != Some("label") {
        return Err(Error::Dimension(format!(
            "{}: header has {} columns, metadata says label + {} features",
            path.display(),
            headers.len(),
            meta.dim
        )));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let label = record[0]
            .parse::<usize>()
            .map_err(|e| Error::config(format!("bad label {:?}: {e}", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            features.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::config(format!("bad feature {field:?}: {e}")))?,
            );
        }
    }
    Dataset::new(features, labels, meta.dim, meta.num_classes, meta.split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_counts_and_determinism() {
        let d = generate_blobs(2, 100, 2, 3).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.label_counts(), vec![100, 100]);
        assert_eq!(d, generate_blobs(2, 100, 2, 3).unwrap());
    }

    #[test]
    fn different_seeds_give_disjoint_samples() {
        let train = generate_blobs(3, 50, 4, 1).unwrap();
        let test = generate_blobs(3, 50, 4, 2).unwrap().with_split(Split::Test);
        let set: std::collections::HashSet<u64> = train.features().iter().map(|v| v.to_bits()).collect();
        assert!(test.features().iter().all(|v| !set.contains(&v.to_bits())));
    }

    #[test]
    fn centers_are_separated() {
        for (classes, dim) in [(10, 2), (10, 20), (3, 1)] {
            let centers = blob_centers(classes, dim);
            for i in 0..classes {
                for j in i + 1..classes {
                    let dist: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(dist >= MIN_CENTER_DISTANCE);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        let d = generate_blobs(3, 7, 5, 9).unwrap().with_split(Split::Test);
        write_csv(&d, &path).unwrap();
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("label,f0,f1,f2,f3,f4\n"));
        assert_eq!(read_csv(&path).unwrap(), d);
    }

    #[test]
    fn rejects_inconsistent_data() {
        assert!(Dataset::new(vec![1.0; 5], vec![0, 1], 2, 2, Split::Train).is_err());
        assert!(Dataset::new(vec![1.0; 4], vec![0, 3], 2, 2, Split::Train).is_err());
        assert!(generate_blobs(0, 1, 1, 0).is_err());
    }
}
