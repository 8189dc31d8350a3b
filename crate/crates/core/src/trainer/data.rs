//! Synthetic volumes: Gaussian background noise with one bright ellipsoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::FEATURES;
use super::tape::Matrix;
use crate::error::{Error, Result};
use crate::tensor_io::{LabelGrid, VoxelGrid};

pub const DEFAULT_DIMS: [usize; 3] = [24, 24, 24];
pub const NOISE_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: VoxelGrid,
    pub labels: LabelGrid,
}

/// Samples with the first `labeled` forming the labeled subset. The rest are
/// unlabeled for training purposes; their labels are kept only so held-out
/// evaluation can use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    samples: Vec<Sample>,
    labeled: usize,
}

impl SyntheticDataset {
    pub fn new(samples: Vec<Sample>, labeled: usize) -> Result<Self> {
        if labeled > samples.len() {
            return Err(Error::Contract(format!(
                "{labeled} labeled samples requested from {}",
                samples.len()
            )));
        }
        Ok(Self { samples, labeled })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled(&self) -> &[Sample] {
        &self.samples[..self.labeled]
    }

    pub fn unlabeled(&self) -> &[Sample] {
        &self.samples[self.labeled..]
    }
}

/// Label 1 for voxel centres with `sum(((p - c) / r)^2) <= 1`.
pub fn ellipsoid_labels(dims: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> Vec<u8> {
    let [w, h, l] = dims;
    let mut out = Vec::with_capacity(w * h * l);
    for x in 0..w {
        for y in 0..h {
            for z in 0..l {
                let p = [x as f64, y as f64, z as f64];
                let r2: f64 = (0..3)
                    .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
                    .sum();
                out.push(u8::from(r2 <= 1.0));
            }
        }
    }
    out
}

pub fn generate_synthetic(count: usize, seed: u64) -> Result<SyntheticDataset> {
    generate_synthetic_with(count, count, DEFAULT_DIMS, seed)
}

/// `count` volumes of size `dims`, the first `labeled` marked as labeled.
pub fn generate_synthetic_with(
    count: usize,
    labeled: usize,
    dims: [usize; 3],
    seed: u64,
) -> Result<SyntheticDataset> {
    if count < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 samples, got {count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            let d = dims[a] as f64;
            radii[a] = rng.random_range(d / 6.0..d * 0.29);
            let lo = radii[a].min(d / 2.0 - 0.5);
            let hi = (d - 1.0 - radii[a]).max(lo + 1e-9);
            center[a] = rng.random_range(lo..hi);
        }
        let intensity = rng.random_range(0.9..1.1);
        let labels = ellipsoid_labels(dims, center, radii);
        let data: Vec<f32> = labels
            .iter()
            .map(|&y| (noise.sample(&mut rng) + f64::from(y) * intensity) as f32)
            .collect();
        samples.push(Sample {
            volume: VoxelGrid::new(&dims, data)?,
            labels: LabelGrid::new(dims, 2, labels)?,
        });
    }
    SyntheticDataset::new(samples, labeled)
}

/// Per-voxel feature rows (Z x 10): intensity, the six face neighbours with
/// edge replication, then coordinates scaled to [-1, 1].
pub fn voxel_features(volume: &VoxelGrid) -> Matrix {
    let [w, h, l] = volume.dims();
    let at = |x: usize, y: usize, z: usize| volume.data()[(x * h + y) * l + z] as f64;
    let coord = |v: usize, d: usize| {
        if d > 1 {
            2.0 * v as f64 / (d - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(w * h * l * FEATURES);
    for x in 0..w {
        for y in 0..h {
            for z in 0..l {
                data.extend_from_slice(&[
                    at(x, y, z),
                    at(x.saturating_sub(1), y, z),
                    at((x + 1).min(w - 1), y, z),
                    at(x, y.saturating_sub(1), z),
                    at(x, (y + 1).min(h - 1), z),
                    at(x, y, z.saturating_sub(1)),
                    at(x, y, (z + 1).min(l - 1)),
                    coord(x, w),
                    coord(y, h),
                    coord(z, l),
                ]);
            }
        }
    }
    Matrix::new(w * h * l, FEATURES, data)
}

/// One-hot rows (Z x N) for a label grid.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (r, &y) in labels.iter().enumerate() {
        m.data_mut()[r * num_classes + y as usize] = 1.0;
    }
    m
}
