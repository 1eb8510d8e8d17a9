//! Overlap rate between a test window and the union of training windows.

use super::Center;
use serde::{Deserialize, Serialize};

/// Union of training windows rasterised on an integer grid that extends
/// `patch / 2` beyond the extreme centers, so windows reaching outside the
/// scene are counted exactly.
#[derive(Debug, Clone)]
pub struct OverlapIndex {
    radius: i64,
    origin: (i64, i64),
    cols: usize,
    rows: usize,
    covered: Vec<bool>,
    patch: usize,
}

impl OverlapIndex {
    pub fn new(train: &[Center], patch: usize) -> Self {
        let radius = (patch / 2) as i64;
        if train.is_empty() {
            return Self {
                radius,
                origin: (0, 0),
                cols: 0,
                rows: 0,
                covered: Vec::new(),
                patch,
            };
        }
        let min_r = train.iter().map(|c| c.0).min().expect("non-empty") as i64 - radius;
        let min_c = train.iter().map(|c| c.1).min().expect("non-empty") as i64 - radius;
        let max_r = train.iter().map(|c| c.0).max().expect("non-empty") as i64 + radius;
        let max_c = train.iter().map(|c| c.1).max().expect("non-empty") as i64 + radius;
        let rows = (max_r - min_r + 1) as usize;
        let cols = (max_c - min_c + 1) as usize;
        let mut covered = vec![false; rows * cols];
        for &(r, c) in train {
            let (r0, c0) = ((r as i64 - radius - min_r) as usize, (c as i64 - radius - min_c) as usize);
            for y in r0..r0 + patch {
                covered[y * cols + c0..y * cols + c0 + patch].fill(true);
            }
        }
        Self {
            radius,
            origin: (min_r, min_c),
            cols,
            rows,
            covered,
            patch,
        }
    }

    fn is_covered(&self, r: i64, c: i64) -> bool {
        let (y, x) = (r - self.origin.0, c - self.origin.1);
        if y < 0 || x < 0 || y >= self.rows as i64 || x >= self.cols as i64 {
            return false;
        }
        self.covered[y as usize * self.cols + x as usize]
    }

    /// Covered fraction of the window centred on `test`.
    pub fn rate(&self, test: Center) -> f64 {
        let (r, c) = (test.0 as i64, test.1 as i64);
        let mut hits = 0usize;
        for y in r - self.radius..=r + self.radius {
            for x in c - self.radius..=c + self.radius {
                hits += usize::from(self.is_covered(y, x));
            }
        }
        hits as f64 / (self.patch * self.patch) as f64
    }
}

/// `|test window ∩ ⋃ train windows| / patch²`.
pub fn overlap_rate(test: Center, train: &[Center], patch: usize) -> f64 {
    OverlapIndex::new(train, patch).rate(test)
}

pub fn overlap_rates(test: &[Center], train: &[Center], patch: usize) -> Vec<f64> {
    let index = OverlapIndex::new(train, patch);
    test.iter().map(|&t| index.rate(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    /// r = 0
    None,
    /// 0 < r ≤ 0.5
    Partial,
    /// r > 0.5
    High,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::None, Bucket::Partial, Bucket::High];
}

pub fn bucket_of(rate: f64) -> Bucket {
    if rate <= 0.0 {
        Bucket::None
    } else if rate <= 0.5 {
        Bucket::Partial
    } else {
        Bucket::High
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapBuckets {
    pub none: usize,
    pub partial: usize,
    pub high: usize,
}

impl OverlapBuckets {
    pub fn total(&self) -> usize {
        self.none + self.partial + self.high
    }

    pub fn get(&self, bucket: Bucket) -> usize {
        match bucket {
            Bucket::None => self.none,
            Bucket::Partial => self.partial,
            Bucket::High => self.high,
        }
    }
}

pub fn bucket_overlap(rates: &[f64]) -> OverlapBuckets {
    let mut b = OverlapBuckets::default();
    for &r in rates {
        match bucket_of(r) {
            Bucket::None => b.none += 1,
            Bucket::Partial => b.partial += 1,
            Bucket::High => b.high += 1,
        }
    }
    b
}
