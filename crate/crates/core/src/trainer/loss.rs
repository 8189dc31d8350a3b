//! Soft Dice and cross-entropy, in plain and taped form, plus overlap metrics.

use super::tape::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor_io::{LabelGrid, VoxelGrid};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-7;

fn check_probabilities(pred: &VoxelGrid, labels: &LabelGrid) -> Result<usize> {
    if pred.shape().len() != 4 || pred.dims() != labels.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match labels {:?}",
            pred.shape(),
            labels.dims()
        )));
    }
    let n = pred.channels();
    if n != labels.num_classes() {
        return Err(Error::Shape(format!(
            "{n} probability channels for {} classes",
            labels.num_classes()
        )));
    }
    for i in 0..pred.voxel_count() {
        let s: f64 = pred.voxel(i).iter().map(|&p| p as f64).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "voxel {i} probabilities sum to {s}"
            )));
        }
    }
    Ok(n)
}

/// Class-averaged soft Dice loss on row-major (Z x N) probabilities.
pub fn dice_loss_rows(prob: &[f64], num_classes: usize, labels: &[u8]) -> f64 {
    let mut inter = vec![0.0; num_classes];
    let mut psum = vec![0.0; num_classes];
    let mut ysum = vec![0.0; num_classes];
    for (row, &y) in prob.chunks(num_classes).zip(labels) {
        for (c, &p) in row.iter().enumerate() {
            psum[c] += p;
        }
        inter[y as usize] += row[y as usize];
        ysum[y as usize] += 1.0;
    }
    let mean_dice: f64 = (0..num_classes)
        .map(|c| (2.0 * inter[c] + DICE_SMOOTH) / (psum[c] + ysum[c] + DICE_SMOOTH))
        .sum::<f64>()
        / num_classes as f64;
    1.0 - mean_dice
}

/// Per-voxel `-ln p_y` with the probability floored at [`PROB_FLOOR`].
pub fn ce_per_voxel(prob: &[f64], num_classes: usize, labels: &[u8]) -> Vec<f64> {
    prob.chunks(num_classes)
        .zip(labels)
        .map(|(row, &y)| -row[y as usize].clamp(PROB_FLOOR, 1.0).ln())
        .collect()
}

pub fn ce_loss_rows(prob: &[f64], num_classes: usize, labels: &[u8]) -> f64 {
    let per = ce_per_voxel(prob, num_classes, labels);
    per.iter().sum::<f64>() / per.len() as f64
}

pub fn dice_loss(pred_prob: &VoxelGrid, labels: &LabelGrid) -> Result<f64> {
    let n = check_probabilities(pred_prob, labels)?;
    let prob: Vec<f64> = pred_prob.data().iter().map(|&p| p as f64).collect();
    Ok(dice_loss_rows(&prob, n, labels.data()))
}

pub fn ce_loss(pred_prob: &VoxelGrid, labels: &LabelGrid) -> Result<f64> {
    let n = check_probabilities(pred_prob, labels)?;
    let prob: Vec<f64> = pred_prob.data().iter().map(|&p| p as f64).collect();
    Ok(ce_loss_rows(&prob, n, labels.data()))
}

/// Taped soft Dice; `onehot` is Z x N.
pub fn tape_dice(tape: &mut Tape, prob: Var, onehot: &Matrix) -> Var {
    let n = onehot.cols();
    let target = tape.leaf(onehot.clone());
    let overlap = tape.mul(prob, target);
    let inter = tape.col_sum(overlap);
    let psum = tape.col_sum(prob);
    let mut ysum = vec![0.0; n];
    for row in onehot.data().chunks(n) {
        for (d, &y) in ysum.iter_mut().zip(row) {
            *d += y;
        }
    }
    let ysum_smooth = tape.leaf(Matrix::new(
        1,
        n,
        ysum.iter().map(|y| y + DICE_SMOOTH).collect(),
    ));
    let num = tape.scale(inter, 2.0);
    let num = tape.offset(num, DICE_SMOOTH);
    let den = tape.add(psum, ysum_smooth);
    let ratio = tape.div(num, den);
    let total = tape.sum(ratio);
    let neg_mean = tape.scale(total, -1.0 / n as f64);
    tape.offset(neg_mean, 1.0)
}

/// Taped per-voxel cross-entropy (Z x 1).
pub fn tape_ce_per_voxel(tape: &mut Tape, prob: Var, onehot: &Matrix) -> Var {
    let target = tape.leaf(onehot.clone());
    let picked = tape.mul(prob, target);
    let p_true = tape.row_sum(picked);
    let floored = tape.clamp_min(p_true, PROB_FLOOR);
    let log_p = tape.ln(floored);
    tape.scale(log_p, -1.0)
}

pub fn tape_ce(tape: &mut Tape, prob: Var, onehot: &Matrix) -> Var {
    let z = onehot.rows() as f64;
    let per = tape_ce_per_voxel(tape, prob, onehot);
    let total = tape.sum(per);
    tape.scale(total, 1.0 / z)
}

/// Dice and Jaccard of `class` between a prediction and ground truth.
/// Both empty counts as a perfect match.
pub fn overlap_scores(pred: &[u8], truth: &[u8], class: u8) -> (f64, f64) {
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(truth) {
        let (pa, gb) = (a == class, b == class);
        p += pa as usize;
        g += gb as usize;
        inter += (pa && gb) as usize;
    }
    if p + g == 0 {
        return (1.0, 1.0);
    }
    let dice = 2.0 * inter as f64 / (p + g) as f64;
    let jaccard = inter as f64 / (p + g - inter) as f64;
    (dice, jaccard)
}
