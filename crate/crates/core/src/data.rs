//! Seeded synthetic classification datasets.
//!
//! Every generator appends a constant `1.0` feature so that bias-free affine
//! layers can still learn offsets.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n − test` rows for training, the rest for testing.
    pub fn split(&self, test: usize) -> Result<(Dataset, Dataset)> {
        if test == 0 || test >= self.len() {
            return Err(Error::Data(format!("cannot hold out {test} of {} samples", self.len())));
        }
        let cut = self.len() - test;
        let train: Vec<usize> = (0..cut).collect();
        let held: Vec<usize> = (cut..self.len()).collect();
        Ok((self.select(&train), self.select(&held)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two Gaussian blobs in the plane, linearly separable for large `separation`.
    Blobs { samples: usize, separation: f64 },
    /// Two interleaved half circles.
    Moons { samples: usize, noise: f64 },
    /// Ten 8×8 glyph classes with jitter, pixel flips and Gaussian noise.
    Digits { samples: usize, noise: f64 },
}

impl DatasetSpec {
    pub fn samples(&self) -> usize {
        match *self {
            DatasetSpec::Blobs { samples, .. }
            | DatasetSpec::Moons { samples, .. }
            | DatasetSpec::Digits { samples, .. } => samples,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Digits { .. } => 10,
            _ => 2,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.samples() < 2 {
            return Err(Error::Config(format!("dataset needs at least 2 samples, got {}", self.samples())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, labels) = match *self {
            DatasetSpec::Blobs { samples, separation } => blobs(samples, separation, &mut rng),
            DatasetSpec::Moons { samples, noise } => moons(samples, noise, &mut rng),
            DatasetSpec::Digits { samples, noise } => digits(samples, noise, &mut rng),
        };
        let dim = rows[0].len() + 1;
        let mut features = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                features[[i, j]] = *v;
            }
            features[[i, dim - 1]] = 1.0;
        }
        Ok(Dataset { features, labels, classes: self.classes() })
    }
}

type Rows = (Vec<Vec<f64>>, Vec<usize>);

fn shuffled(mut rows: Vec<(Vec<f64>, usize)>, rng: &mut ChaCha8Rng) -> Rows {
    rows.shuffle(rng);
    rows.into_iter().unzip()
}

fn blobs(n: usize, separation: f64, rng: &mut ChaCha8Rng) -> Rows {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rows = (0..n)
        .map(|i| {
            let c = i % 2;
            let centre = if c == 0 { -separation / 2.0 } else { separation / 2.0 };
            (vec![centre + normal.sample(rng), normal.sample(rng)], c)
        })
        .collect();
    shuffled(rows, rng)
}

fn moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Rows {
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid std");
    let rows = (0..n)
        .map(|i| {
            let c = i % 2;
            let t = std::f64::consts::PI * rng.random::<f64>();
            let (x, y) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
            (vec![x + normal.sample(rng), y + normal.sample(rng)], c)
        })
        .collect();
    shuffled(rows, rng)
}

/// Seven-segment style strokes on an 8×8 grid.
const SEGMENTS: [(usize, usize, usize, usize); 7] = [
    (1, 2, 1, 5), // top
    (1, 5, 3, 5), // upper right
    (4, 5, 6, 5), // lower right
    (6, 2, 6, 5), // bottom
    (4, 2, 6, 2), // lower left
    (1, 2, 3, 2), // upper left
    (3, 2, 3, 5), // middle
];

const DIGIT_SEGMENTS: [u8; 10] = [
    0b011_1111, 0b000_0110, 0b101_1011, 0b100_1111, 0b110_0110, 0b110_1101, 0b111_1101, 0b000_0111, 0b111_1111,
    0b110_1111,
];

fn glyph(digit: usize) -> [[f64; 8]; 8] {
    let mut g = [[0.0; 8]; 8];
    for (s, seg) in SEGMENTS.iter().enumerate() {
        if DIGIT_SEGMENTS[digit] >> s & 1 == 1 {
            let (r0, c0, r1, c1) = *seg;
            for row in g.iter_mut().take(r1 + 1).skip(r0) {
                for v in row.iter_mut().take(c1 + 1).skip(c0) {
                    *v = 1.0;
                }
            }
        }
    }
    g
}

fn digits(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Rows {
    let glyphs: Vec<_> = (0..10).map(glyph).collect();
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid std");
    let flip = (noise / 2.0).min(0.5);
    let rows = (0..n)
        .map(|i| {
            let c = i % 10;
            let dr: i64 = rng.random_range(-1..=1);
            let dc: i64 = rng.random_range(-1..=1);
            let mut px = Vec::with_capacity(64);
            for r in 0..8i64 {
                for col in 0..8i64 {
                    let (sr, sc) = (r - dr, col - dc);
                    let mut v = if (0..8).contains(&sr) && (0..8).contains(&sc) {
                        glyphs[c][sr as usize][sc as usize]
                    } else {
                        0.0
                    };
                    if rng.random::<f64>() < flip {
                        v = 1.0 - v;
                    }
                    px.push(v + normal.sample(rng));
                }
            }
            (px, c)
        })
        .collect();
    shuffled(rows, rng)
}
