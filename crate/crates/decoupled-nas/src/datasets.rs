//! Seeded toy datasets: Gaussian blobs for sanity checks, small textured
//! images for the convolutional task, and a character corpus for the
//! recurrent task. All generators are deterministic given an RNG.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },
    #[error("empty dataset")]
    Empty,
}

/// Feature matrix plus integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    /// `[n, dim]` for blobs, `[n, 1, s, s]` for images.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `[start, start+count)` as a new set (wraps are not allowed).
    pub fn slice(&self, start: usize, count: usize) -> LabeledSet {
        let per_row: usize = self.features.shape[1..].iter().product();
        let mut shape = self.features.shape.clone();
        shape[0] = count;
        LabeledSet {
            features: Tensor::from_vec(
                &shape,
                self.features.data[start * per_row..(start + count) * per_row].to_vec(),
            )
            .unwrap(),
            labels: self.labels[start..start + count].to_vec(),
        }
    }
}

/// Isotropic Gaussian clusters, one per class, with means spread on a circle.
pub fn gaussian_blobs<R: Rng>(
    per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    rng: &mut R,
) -> LabeledSet {
    let n = per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        let mut mean = vec![0.0; dim];
        mean[0] = 2.0 * angle.cos();
        if dim > 1 {
            mean[1] = 2.0 * angle.sin();
        }
        for _ in 0..per_class {
            for m in &mean {
                // Box-Muller keeps us off extra distribution dependencies.
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                let v: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                data.push(m + spread * (-2.0 * u.ln()).sqrt() * v.cos());
            }
            labels.push(class);
        }
    }
    LabeledSet {
        features: Tensor::from_vec(&[n, dim], data).unwrap(),
        labels,
    }
}

/// Small grayscale images where each class is a distinct oriented sine
/// texture plus pixel noise. Shape `[n, 1, size, size]`.
pub fn textured_images<R: Rng>(
    per_class: usize,
    classes: usize,
    size: usize,
    noise: f64,
    rng: &mut R,
) -> LabeledSet {
    let n = per_class * classes;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let theta = std::f64::consts::PI * class as f64 / classes as f64;
        let freq = 1.0 + class as f64 * 0.7;
        for _ in 0..per_class {
            let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            for h in 0..size {
                for w in 0..size {
                    let t = freq * (h as f64 * theta.cos() + w as f64 * theta.sin());
                    let v = (t + phase).sin() + noise * rng.gen_range(-1.0..1.0);
                    data.push(v);
                }
            }
            labels.push(class);
        }
    }
    LabeledSet {
        features: Tensor::from_vec(&[n, 1, size, size], data).unwrap(),
        labels,
    }
}

/// Character-level toy corpus over a small alphabet. The sequence follows a
/// noisy repeating motif, so a model with memory beats a unigram baseline.
pub fn char_corpus<R: Rng>(length: usize, vocab: usize, rng: &mut R) -> Vec<usize> {
    assert!(vocab >= 2);
    let motif: Vec<usize> = (0..vocab).collect();
    (0..length)
        .map(|i| {
            if rng.gen::<f64>() < 0.1 {
                rng.gen_range(0..vocab)
            } else {
                motif[i % motif.len()]
            }
        })
        .collect()
}

/// Serialize features+labels as CSV: one row per sample, features then label.
pub fn to_csv(set: &LabeledSet) -> String {
    let per_row: usize = set.features.shape[1..].iter().product();
    let mut out = String::new();
    for (i, &label) in set.labels.iter().enumerate() {
        for j in 0..per_row {
            out.push_str(&format!("{:?},", set.features.data[i * per_row + j]));
        }
        out.push_str(&format!("{label}\n"));
    }
    out
}

/// Parse the CSV produced by [`to_csv`] back into a flat `[n, dim]` set.
pub fn from_csv(text: &str) -> Result<LabeledSet, DatasetError> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(DatasetError::CsvParse {
                line: lineno + 1,
                message: "need at least one feature and a label".into(),
            });
        }
        let row_dim = fields.len() - 1;
        if *dim.get_or_insert(row_dim) != row_dim {
            return Err(DatasetError::CsvParse {
                line: lineno + 1,
                message: "inconsistent column count".into(),
            });
        }
        for f in &fields[..row_dim] {
            data.push(f.trim().parse::<f64>().map_err(|e| DatasetError::CsvParse {
                line: lineno + 1,
                message: e.to_string(),
            })?);
        }
        labels.push(fields[row_dim].trim().parse::<usize>().map_err(|e| {
            DatasetError::CsvParse {
                line: lineno + 1,
                message: e.to_string(),
            }
        })?);
    }
    let dim = dim.ok_or(DatasetError::Empty)?;
    let n = labels.len();
    Ok(LabeledSet {
        features: Tensor::from_vec(&[n, dim], data).unwrap(),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn blobs_shapes_and_labels() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let set = gaussian_blobs(10, 3, 2, 0.1, &mut rng);
        assert_eq!(set.features.shape, vec![30, 2]);
        assert_eq!(set.labels.iter().filter(|&&l| l == 2).count(), 10);
    }

    #[test]
    fn blobs_csv_round_trip_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let set = gaussian_blobs(5, 2, 3, 0.3, &mut rng);
        let parsed = from_csv(&to_csv(&set)).unwrap();
        assert_eq!(parsed.features, set.features);
        assert_eq!(parsed.labels, set.labels);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(from_csv("1.0,abc\n").is_err());
        assert!(from_csv("1.0,2.0,0\n1.0,1\n").is_err());
        assert!(from_csv("").is_err());
    }

    #[test]
    fn images_deterministic_and_shaped() {
        let gen = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            textured_images(4, 2, 8, 0.1, &mut rng)
        };
        let a = gen(3);
        assert_eq!(a.features.shape, vec![8, 1, 8, 8]);
        assert_eq!(a.features, gen(3).features);
    }

    #[test]
    fn corpus_mostly_follows_motif() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let corpus = char_corpus(1000, 4, &mut rng);
        let hits = corpus
            .iter()
            .enumerate()
            .filter(|&(i, &c)| c == i % 4)
            .count();
        assert!(hits > 850, "hits {hits}");
        assert!(corpus.iter().all(|&c| c < 4));
    }

    #[test]
    fn slice_extracts_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let set = gaussian_blobs(4, 2, 2, 0.1, &mut rng);
        let s = set.slice(2, 3);
        assert_eq!(s.features.shape, vec![3, 2]);
        assert_eq!(s.labels, set.labels[2..5].to_vec());
    }
}
