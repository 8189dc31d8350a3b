//! Entropy-scaled uncertainty of a fused assignment:
//! `U = -u * sum_n d_n log2 d_n`, with `u` the composite mass.

use crate::error::{Error, Result};
use crate::evidence::{BeliefAssignment, BeliefVolume, MASS_TOLERANCE};
use crate::tensor_io::VoxelGrid;

/// Which distribution the entropy term is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyMode {
    /// Singleton masses divided by their sum, a proper distribution.
    #[default]
    Renormalized,
    /// Singleton masses as they are (they sum to `1 - u`).
    Raw,
}

/// Per-voxel non-negative uncertainty over (W, H, L).
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyVolume {
    grid: VoxelGrid,
}

impl UncertaintyVolume {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if grid.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "uncertainty volumes are 3D, got {:?}",
                grid.shape()
            )));
        }
        if let Some(bad) = grid.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Contract(format!("negative uncertainty {bad}")));
        }
        Ok(Self { grid })
    }

    pub fn from_values(dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        Self::new(VoxelGrid::new(&dims, values)?)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn values(&self) -> &[f32] {
        self.grid.data()
    }
}

/// Slice kernel shared by the scalar and volume entry points.
pub fn entropy_scaled(singleton: &[f64], composite: f64, mode: EntropyMode) -> f64 {
    let scale = match mode {
        EntropyMode::Renormalized => singleton.iter().sum::<f64>(),
        EntropyMode::Raw => 1.0,
    };
    if scale <= 0.0 {
        return 0.0;
    }
    let entropy: f64 = singleton
        .iter()
        .map(|&m| m / scale)
        .filter(|&d| d > 0.0)
        .map(|d| -d * d.log2())
        .sum();
    (composite * entropy).max(0.0)
}

pub fn fused_uncertainty(b: &BeliefAssignment) -> Result<f64> {
    fused_uncertainty_with(b, EntropyMode::default())
}

pub fn fused_uncertainty_with(b: &BeliefAssignment, mode: EntropyMode) -> Result<f64> {
    b.require_normalized()?;
    Ok(entropy_scaled(b.singleton(), b.composite(), mode))
}

pub fn uncertainty_volume(v: &BeliefVolume) -> Result<UncertaintyVolume> {
    uncertainty_volume_with(v, EntropyMode::default())
}

pub fn uncertainty_volume_with(v: &BeliefVolume, mode: EntropyMode) -> Result<UncertaintyVolume> {
    let n = v.num_classes();
    let mut singleton = vec![0.0f64; n];
    let mut values = Vec::with_capacity(v.voxel_count());
    for i in 0..v.voxel_count() {
        let masses = v.grid().voxel(i);
        for (dst, &src) in singleton.iter_mut().zip(masses) {
            *dst = src as f64;
        }
        let u = masses[n] as f64;
        let total = singleton.iter().sum::<f64>() + u;
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Contract(format!(
                "voxel {i} is not normalized (total mass {total}); renormalize fused masses first"
            )));
        }
        values.push(entropy_scaled(&singleton, u, mode) as f32);
    }
    UncertaintyVolume::from_values(v.dims(), values)
}
