//! Box-mask copy-paste mixing and restoration of mixed predictions.
//!
//! A [`MixMask`] is 1 everywhere except a single axis-aligned zero box.
//! Mixing two samples swaps their contents inside the box; restoring swaps
//! the predictions back so every voxel is credited to the sample it came from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evidence::BeliefVolume;
use crate::tensor_io::{LabelGrid, VoxelGrid};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    dims: [usize; 3],
    origin: [usize; 3],
    size: [usize; 3],
}

impl MixMask {
    pub fn new(dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for axis in 0..3 {
            if origin[axis] + size[axis] > dims[axis] {
                return Err(Error::Contract(format!(
                    "zero box at {origin:?} of size {size:?} does not fit in {dims:?}"
                )));
            }
        }
        Ok(Self { dims, origin, size })
    }

    /// A mask with no zero region: mixing leaves samples untouched.
    pub fn ones(dims: [usize; 3]) -> Self {
        Self {
            dims,
            origin: [0; 3],
            size: [0; 3],
        }
    }

    /// Recovers the box from 0/1 mask values; fails unless the zeros form
    /// exactly one axis-aligned box.
    pub fn from_values(dims: [usize; 3], values: &[u8]) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask values {} do not match dims {dims:?}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {bad} is not 0 or 1")));
        }
        let mut lo = dims;
        let mut hi = [0usize; 3];
        let mut zeros = 0usize;
        for (i, _) in values.iter().enumerate().filter(|(_, &v)| v == 0) {
            let c = unravel(i, dims);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
            zeros += 1;
        }
        if zeros == 0 {
            return Ok(Self::ones(dims));
        }
        let size = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        if size.iter().product::<usize>() != zeros {
            return Err(Error::Contract(
                "mask zeros do not form a single box".into(),
            ));
        }
        Self::new(dims, lo, size)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> [usize; 3] {
        self.origin
    }

    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    /// True where the mask is 1 (the voxel keeps its own sample's content).
    #[inline]
    pub fn keeps(&self, x: usize, y: usize, z: usize) -> bool {
        let inside = |v: usize, a: usize| v >= self.origin[a] && v < self.origin[a] + self.size[a];
        !(inside(x, 0) && inside(y, 1) && inside(z, 2))
    }

    /// Mask values in row-major voxel order.
    pub fn keep_flags(&self) -> Vec<bool> {
        let [w, h, l] = self.dims;
        let mut out = Vec::with_capacity(w * h * l);
        for x in 0..w {
            for y in 0..h {
                for z in 0..l {
                    out.push(self.keeps(x, y, z));
                }
            }
        }
        out
    }

    pub fn values(&self) -> Vec<u8> {
        self.keep_flags().into_iter().map(u8::from).collect()
    }

    pub fn zero_count(&self) -> usize {
        self.size.iter().product()
    }
}

fn unravel(i: usize, [_, h, l]: [usize; 3]) -> [usize; 3] {
    [i / (h * l), (i / l) % h, i % l]
}

/// Places a zero box of `zero_size` uniformly at random inside `dims`.
pub fn generate_mask(dims: [usize; 3], zero_size: [usize; 3], seed: u64) -> Result<MixMask> {
    if (0..3).any(|a| zero_size[a] > dims[a]) {
        return Err(Error::Contract(format!(
            "zero region {zero_size:?} exceeds volume {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.random_range(0..=dims[a] - zero_size[a]);
    }
    MixMask::new(dims, origin, zero_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedPair {
    pub mixed_a: VoxelGrid,
    pub mixed_b: VoxelGrid,
    pub mask: MixMask,
    /// Identifiers of the two source samples.
    pub sources: [usize; 2],
}

/// `keep ? a : b` per voxel, broadcast over channels.
pub fn blend(a: &VoxelGrid, b: &VoxelGrid, m: &MixMask) -> Result<VoxelGrid> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cannot mix {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.dims() != m.dims() {
        return Err(Error::Shape(format!(
            "mask dims {:?} do not match grid {:?}",
            m.dims(),
            a.dims()
        )));
    }
    let k = a.channels();
    let mut data = Vec::with_capacity(a.data().len());
    for (i, keep) in m.keep_flags().into_iter().enumerate() {
        let src = if keep { a } else { b };
        data.extend_from_slice(&src.data()[i * k..(i + 1) * k]);
    }
    VoxelGrid::new(a.shape(), data)
}

pub fn mix_pair(a: &VoxelGrid, b: &VoxelGrid, m: &MixMask) -> Result<MixedPair> {
    Ok(MixedPair {
        mixed_a: blend(a, b, m)?,
        mixed_b: blend(b, a, m)?,
        mask: m.clone(),
        sources: [0, 1],
    })
}

impl MixedPair {
    pub fn with_sources(mut self, a: usize, b: usize) -> Self {
        self.sources = [a, b];
        self
    }
}

pub fn mix_labels(a: &LabelGrid, b: &LabelGrid, m: &MixMask) -> Result<(LabelGrid, LabelGrid)> {
    if a.dims() != b.dims() || a.dims() != m.dims() || a.num_classes() != b.num_classes() {
        return Err(Error::Shape(format!(
            "label grids {:?}/{:?} and mask {:?} disagree",
            a.dims(),
            b.dims(),
            m.dims()
        )));
    }
    let keep = m.keep_flags();
    let pick = |x: &LabelGrid, y: &LabelGrid| -> Vec<u8> {
        keep.iter()
            .zip(x.data().iter().zip(y.data()))
            .map(|(&k, (&xv, &yv))| if k { xv } else { yv })
            .collect()
    };
    Ok((
        LabelGrid::new(a.dims(), a.num_classes(), pick(a, b))?,
        LabelGrid::new(a.dims(), a.num_classes(), pick(b, a))?,
    ))
}

/// Returns each voxel's prediction to the original sample it came from.
pub fn restore_predictions(
    pred_mixed_a: &BeliefVolume,
    pred_mixed_b: &BeliefVolume,
    m: &MixMask,
) -> Result<(BeliefVolume, BeliefVolume)> {
    let a = blend(pred_mixed_a.grid(), pred_mixed_b.grid(), m)?;
    let b = blend(pred_mixed_b.grid(), pred_mixed_a.grid(), m)?;
    Ok((BeliefVolume::from_grid(a)?, BeliefVolume::from_grid(b)?))
}

/// Restoration on plain grids (logits, probabilities, any channel count).
pub fn restore_grids(
    pred_mixed_a: &VoxelGrid,
    pred_mixed_b: &VoxelGrid,
    m: &MixMask,
) -> Result<(VoxelGrid, VoxelGrid)> {
    Ok((
        blend(pred_mixed_a, pred_mixed_b, m)?,
        blend(pred_mixed_b, pred_mixed_a, m)?,
    ))
}
