//! Voxel-wise asymptotic loss weighting.
//!
//! Voxels of one sample are ranked by uncertainty; a voxel with rank `s` out
//! of `Z` at epoch `h` of `H` gets weight
//!
//! ```text
//! phi = eps * sigmoid(zeta(h) * rho(s)),  zeta(h) = 2h/H - 1,  rho(s) = 2s/Z - 1
//! ```
//!
//! With [`RankOrder::AscendingUncertainty`] the most uncertain voxel holds
//! rank `Z`, so its weight starts low and rises past `eps/2` once training
//! passes the midpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::VoxelGrid;
use crate::uncertainty::UncertaintyVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RankOrder {
    /// Least uncertain voxel gets rank 1.
    #[default]
    AscendingUncertainty,
    /// Most uncertain voxel gets rank 1.
    DescendingUncertainty,
}

impl std::str::FromStr for RankOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asc" | "ascending" => Ok(RankOrder::AscendingUncertainty),
            "desc" | "descending" => Ok(RankOrder::DescendingUncertainty),
            other => Err(Error::Contract(format!(
                "rank order must be 'asc' or 'desc', got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSchedule {
    epsilon: f64,
    epoch: usize,
    total_epochs: usize,
    order: RankOrder,
}

impl WeightSchedule {
    pub fn new(epsilon: f64, epoch: usize, total_epochs: usize, order: RankOrder) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::Contract(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if total_epochs < 1 || epoch < 1 || epoch > total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside 1..={total_epochs}"
            )));
        }
        Ok(Self {
            epsilon,
            epoch,
            total_epochs,
            order,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn order(&self) -> RankOrder {
        self.order
    }

    /// `2h/H - 1`, in `[-1, 1]`.
    pub fn progress(&self) -> f64 {
        2.0 * self.epoch as f64 / self.total_epochs as f64 - 1.0
    }
}

/// One-based uncertainty ranks for every voxel of a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMap {
    dims: [usize; 3],
    ranks: Vec<u32>,
}

impl RankMap {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn ranks(&self) -> &[u32] {
        &self.ranks
    }
}

/// Ranks values; ties keep linear index order. Returns one-based ranks.
pub fn rank_values(values: &[f64], order: RankOrder) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    match order {
        RankOrder::AscendingUncertainty => idx.sort_by(|&a, &b| values[a].total_cmp(&values[b])),
        RankOrder::DescendingUncertainty => idx.sort_by(|&a, &b| values[b].total_cmp(&values[a])),
    }
    let mut ranks = vec![0u32; values.len()];
    for (pos, &voxel) in idx.iter().enumerate() {
        ranks[voxel] = pos as u32 + 1;
    }
    ranks
}

pub fn rank_voxels(u: &UncertaintyVolume, order: RankOrder) -> RankMap {
    let values: Vec<f64> = u.values().iter().map(|&v| v as f64).collect();
    RankMap {
        dims: u.dims(),
        ranks: rank_values(&values, order),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn weight_unchecked(sched: &WeightSchedule, rank: usize, count: usize) -> f64 {
    let rho = 2.0 * rank as f64 / count as f64 - 1.0;
    sched.epsilon * sigmoid(sched.progress() * rho)
}

pub fn dynamic_weight(sched: &WeightSchedule, rank: usize, count: usize) -> Result<f64> {
    if rank < 1 || rank > count {
        return Err(Error::Contract(format!("rank {rank} outside 1..={count}")));
    }
    Ok(weight_unchecked(sched, rank, count))
}

/// Weights for each voxel of one sample, ranked from its uncertainty values.
pub fn voxel_weights(uncertainty: &[f64], sched: &WeightSchedule) -> Vec<f64> {
    let count = uncertainty.len();
    rank_values(uncertainty, sched.order)
        .into_iter()
        .map(|r| weight_unchecked(sched, r as usize, count))
        .collect()
}

pub fn weight_volume(u: &UncertaintyVolume, sched: &WeightSchedule) -> Result<VoxelGrid> {
    let values: Vec<f64> = u.values().iter().map(|&v| v as f64).collect();
    let weights = voxel_weights(&values, sched);
    VoxelGrid::new(&u.dims(), weights.into_iter().map(|w| w as f32).collect())
}

/// `sum_z phi(h, s(z)) * loss_z / Z` for a single sample.
pub fn weighted_loss(
    per_voxel_loss: &VoxelGrid,
    u: &UncertaintyVolume,
    sched: &WeightSchedule,
) -> Result<f64> {
    if per_voxel_loss.shape() != u.grid().shape() {
        return Err(Error::Shape(format!(
            "loss {:?} vs uncertainty {:?}",
            per_voxel_loss.shape(),
            u.grid().shape()
        )));
    }
    let values: Vec<f64> = u.values().iter().map(|&v| v as f64).collect();
    let weights = voxel_weights(&values, sched);
    let z = weights.len() as f64;
    Ok(weights
        .iter()
        .zip(per_voxel_loss.data())
        .map(|(w, &l)| w * l as f64)
        .sum::<f64>()
        / z)
}

/// Group form: per-sample weighted losses summed over the group, each sample
/// ranked on its own.
pub fn weighted_loss_group(
    samples: &[(VoxelGrid, UncertaintyVolume)],
    sched: &WeightSchedule,
) -> Result<f64> {
    samples
        .iter()
        .map(|(loss, u)| weighted_loss(loss, u, sched))
        .sum()
}
