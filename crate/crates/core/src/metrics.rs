//! Confusion matrices and the OA / AA / Kappa scores.
//!
//! Rows are ground truth, columns predictions, classes 1-based at the API.
//! With `x_ij` the counts, `N` the total, `x_i+` row sums and `x_+i` column
//! sums:
//!
//! ```text
//! OA    = Σ x_ii / N
//! AA    = (1/K) Σ x_ii / x_i+
//! Kappa = (N·Σ x_ii − Σ x_i+·x_+i) / (N² − Σ x_i+·x_+i)
//! ```
//!
//! Sums are taken in exact integer arithmetic; only the final ratio is
//! rounded.

use serde::{Deserialize, Serialize};

use crate::dataflow::overlap::{bucket_of, Bucket};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::new(classes);
        for (t, p) in pairs {
            cm.accumulate(t, p)?;
        }
        Ok(cm)
    }

    /// Builds from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(invalid(format!(
                "{classes} classes need {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Counts `(truth, prediction)`, both in `1..=K`.
    pub fn accumulate(&mut self, truth: usize, prediction: usize) -> Result<()> {
        let k = self.classes;
        if !(1..=k).contains(&truth) || !(1..=k).contains(&prediction) {
            return Err(invalid(format!(
                "class pair ({truth}, {prediction}) outside 1..={k}"
            )));
        }
        self.counts[(truth - 1) * k + prediction - 1] += 1;
        Ok(())
    }

    /// Count for 1-based `(truth, prediction)`.
    pub fn get(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + prediction - 1]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(invalid(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn diagonal(&self) -> u128 {
        (0..self.classes).map(|i| u128::from(self.counts[i * self.classes + i])).sum()
    }

    fn row_sum(&self, i: usize) -> u128 {
        self.counts[i * self.classes..(i + 1) * self.classes]
            .iter()
            .map(|&v| u128::from(v))
            .sum()
    }

    fn col_sum(&self, j: usize) -> u128 {
        (0..self.classes).map(|i| u128::from(self.counts[i * self.classes + j])).sum()
    }

    pub fn oa(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::EmptyConfusion);
        }
        Ok(self.diagonal() as f64 / n as f64)
    }

    /// Recall per class, `None` for classes without ground-truth samples.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let row = self.row_sum(i);
                (row > 0).then(|| self.counts[i * self.classes + i] as f64 / row as f64)
            })
            .collect()
    }

    pub fn aa(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptyConfusion);
        }
        let recalls = self.recalls();
        if let Some(i) = recalls.iter().position(Option::is_none) {
            return Err(Error::EmptyClassRow { class: i + 1 });
        }
        Ok(recalls.iter().flatten().sum::<f64>() / self.classes as f64)
    }

    pub fn kappa(&self) -> Result<f64> {
        let n = u128::from(self.total());
        if n == 0 {
            return Err(Error::EmptyConfusion);
        }
        let chance: u128 = (0..self.classes).map(|i| self.row_sum(i) * self.col_sum(i)).sum();
        let num = (n * self.diagonal()) as i128 - chance as i128;
        let den = (n * n) as i128 - chance as i128;
        if den == 0 {
            return Err(Error::DegenerateKappa);
        }
        Ok(num as f64 / den as f64)
    }
}

/// Accuracy within each overlap bucket; `None` marks an empty bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub none: Option<f64>,
    pub partial: Option<f64>,
    pub high: Option<f64>,
    pub counts: [usize; 3],
}

impl BucketAccuracy {
    pub fn get(&self, bucket: Bucket) -> Option<f64> {
        match bucket {
            Bucket::None => self.none,
            Bucket::Partial => self.partial,
            Bucket::High => self.high,
        }
    }
}

/// `(truth, prediction, overlap rate)` triples to per-bucket OA.
pub fn bucketed_accuracy(records: &[(usize, usize, f64)]) -> BucketAccuracy {
    let mut correct = [0usize; 3];
    let mut counts = [0usize; 3];
    for &(t, p, r) in records {
        let b = bucket_of(r) as usize;
        counts[b] += 1;
        correct[b] += usize::from(t == p);
    }
    let acc = |b: Bucket| {
        let i = b as usize;
        (counts[i] > 0).then(|| correct[i] as f64 / counts[i] as f64)
    };
    BucketAccuracy {
        none: acc(Bucket::None),
        partial: acc(Bucket::Partial),
        high: acc(Bucket::High),
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub buckets: Option<BucketAccuracy>,
}

impl MetricsReport {
    pub fn new(cm: &ConfusionMatrix, buckets: Option<BucketAccuracy>) -> Result<Self> {
        Ok(Self {
            oa: cm.oa()?,
            aa: cm.aa()?,
            kappa: cm.kappa()?,
            per_class_recall: cm.recalls(),
            confusion: cm.rows(),
            buckets,
        })
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }
}
