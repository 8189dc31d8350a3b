//! The differentiable graph for one optimisation step.
//!
//! A [`StepPlan`] fixes everything that is not differentiated: the original
//! samples with their targets, how they were paired and masked, and the mixed
//! inputs. [`build_step`] then records, for every original sample,
//! its own prediction, the prediction restored from the mixed pair, the
//! fusion of the two, and the loss terms. Rank-based voxel weights and
//! pseudo-labels enter as constants.

use std::rc::Rc;

use super::data::{one_hot, voxel_features, Sample};
use super::loss::{tape_ce, tape_ce_per_voxel, tape_dice};
use super::model::BoundModel;
use super::tape::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::mixing::{blend, MixMask};
use crate::tensor_io::{LabelGrid, VoxelGrid};
use crate::uncertainty::{entropy_scaled, EntropyMode};
use crate::vwal::{voxel_weights, WeightSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone)]
struct Entry {
    features: Matrix,
    onehot: Matrix,
    group: Group,
}

#[derive(Debug, Clone)]
struct Pair {
    first: usize,
    /// `None` when the partner only donates content and is restored elsewhere.
    second: Option<usize>,
    keep: Rc<[bool]>,
    mixed_first: Matrix,
    mixed_second: Matrix,
}

#[derive(Debug, Clone)]
pub struct StepPlan {
    entries: Vec<Entry>,
    pairs: Vec<Pair>,
    num_classes: usize,
}

fn make_pair(
    first: (usize, &VoxelGrid),
    second: (Option<usize>, &VoxelGrid),
    mask: &MixMask,
) -> Result<Pair> {
    let mixed_first = blend(first.1, second.1, mask)?;
    let mixed_second = blend(second.1, first.1, mask)?;
    Ok(Pair {
        first: first.0,
        second: second.0,
        keep: Rc::from(mask.keep_flags()),
        mixed_first: voxel_features(&mixed_first),
        mixed_second: voxel_features(&mixed_second),
    })
}

impl StepPlan {
    /// Labeled-only batch. Samples are paired `(0, 1), (2, 3), ...`; with an
    /// odd count the last sample is mixed with sample 0, whose restored
    /// prediction already comes from its own pair. Needs one mask per pair.
    pub fn pretrain(batch: &[&Sample], masks: &[MixMask]) -> Result<Self> {
        if batch.len() < 2 {
            return Err(Error::Contract(format!(
                "pre-training batches need at least 2 samples, got {}",
                batch.len()
            )));
        }
        let pair_count = batch.len().div_ceil(2);
        if masks.len() != pair_count {
            return Err(Error::Contract(format!(
                "{pair_count} pairs need as many masks, got {}",
                masks.len()
            )));
        }
        let num_classes = batch[0].labels.num_classes();
        let entries = batch
            .iter()
            .map(|s| Entry {
                features: voxel_features(&s.volume),
                onehot: one_hot(s.labels.data(), num_classes),
                group: Group::Labeled,
            })
            .collect();
        let mut pairs = Vec::with_capacity(pair_count);
        for (k, mask) in masks.iter().enumerate() {
            let i = 2 * k;
            let (j, second) = if i + 1 < batch.len() {
                (i + 1, Some(i + 1))
            } else {
                (0, None)
            };
            pairs.push(make_pair(
                (i, &batch[i].volume),
                (second, &batch[j].volume),
                mask,
            )?);
        }
        Ok(Self {
            entries,
            pairs,
            num_classes,
        })
    }

    /// Labeled/unlabeled pairs; unlabeled targets are teacher pseudo-labels.
    pub fn self_train(pairs: &[(&Sample, &VoxelGrid, &LabelGrid, &MixMask)]) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::Contract("self-training step without pairs".into()));
        };
        let num_classes = first.0.labels.num_classes();
        let mut entries = Vec::with_capacity(2 * pairs.len());
        let mut plan_pairs = Vec::with_capacity(pairs.len());
        for &(labeled, unlabeled, pseudo, mask) in pairs {
            if pseudo.dims() != unlabeled.dims() {
                return Err(Error::Shape("pseudo-labels do not match volume".into()));
            }
            let li = entries.len();
            entries.push(Entry {
                features: voxel_features(&labeled.volume),
                onehot: one_hot(labeled.labels.data(), num_classes),
                group: Group::Labeled,
            });
            entries.push(Entry {
                features: voxel_features(unlabeled),
                onehot: one_hot(pseudo.data(), num_classes),
                group: Group::Unlabeled,
            });
            plan_pairs.push(make_pair(
                (li, &labeled.volume),
                (Some(li + 1), unlabeled),
                mask,
            )?);
        }
        Ok(Self {
            entries,
            pairs: plan_pairs,
            num_classes,
        })
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }
}

/// Belief masses on the tape: singleton (Z x N) and composite (Z x 1).
#[derive(Debug, Clone, Copy)]
pub struct TapeBelief {
    pub singleton: Var,
    pub composite: Var,
}

pub fn tape_belief(tape: &mut Tape, logits: Var, num_classes: usize) -> TapeBelief {
    let n = num_classes as f64;
    let evidence = tape.softplus(logits);
    let total = tape.row_sum(evidence);
    let strength = tape.offset(total, n);
    let inv = tape.recip(strength);
    let inv_wide = tape.broadcast_cols(inv, num_classes);
    TapeBelief {
        singleton: tape.mul(evidence, inv_wide),
        composite: tape.scale(inv, n),
    }
}

pub fn tape_select(tape: &mut Tape, a: TapeBelief, b: TapeBelief, keep: &Rc<[bool]>) -> TapeBelief {
    TapeBelief {
        singleton: tape.select_rows(a.singleton, b.singleton, keep.clone()),
        composite: tape.select_rows(a.composite, b.composite, keep.clone()),
    }
}

/// Fusion followed by renormalization.
pub fn tape_fuse(tape: &mut Tape, a: TapeBelief, b: TapeBelief, num_classes: usize) -> TapeBelief {
    let inv_n = 1.0 / num_classes as f64;
    let agree = tape.mul(a.singleton, b.singleton);
    let b_u = tape.broadcast_cols(b.composite, num_classes);
    let a_u = tape.broadcast_cols(a.composite, num_classes);
    let a_with_bu = tape.mul(a.singleton, b_u);
    let b_with_au = tape.mul(b.singleton, a_u);
    let cross = tape.add(a_with_bu, b_with_au);
    let cross = tape.scale(cross, inv_n);
    let singleton = tape.add(agree, cross);
    let composite = tape.mul(a.composite, b.composite);
    let s_total = tape.row_sum(singleton);
    let total = tape.add(s_total, composite);
    let inv = tape.recip(total);
    let inv_wide = tape.broadcast_cols(inv, num_classes);
    TapeBelief {
        singleton: tape.mul(singleton, inv_wide),
        composite: tape.mul(composite, inv),
    }
}

/// Pignistic probabilities (Z x N).
pub fn tape_probability(tape: &mut Tape, b: TapeBelief, num_classes: usize) -> Var {
    let share = tape.scale(b.composite, 1.0 / num_classes as f64);
    let share = tape.broadcast_cols(share, num_classes);
    tape.add(b.singleton, share)
}

/// Loss terms of one step. Supervised terms average over the group's
/// samples; weighted terms sum per-sample weighted means over the group.
#[derive(Debug, Clone)]
pub struct StepTerms {
    pub labeled: Option<Var>,
    pub unlabeled: Option<Var>,
    pub labeled_weighted: Option<Var>,
    pub unlabeled_weighted: Option<Var>,
    /// Voxel weights used for each entry, in entry order.
    pub weights: Vec<Vec<f64>>,
    /// Fused beliefs per entry (for inspection and tests).
    pub fused: Vec<TapeBelief>,
    pub original: Vec<TapeBelief>,
}

/// Dice + CE of one probability map against its targets.
fn dice_ce(tape: &mut Tape, prob: Var, onehot: &Matrix) -> Var {
    let d = tape_dice(tape, prob, onehot);
    let c = tape_ce(tape, prob, onehot);
    tape.add(d, c)
}

fn fused_uncertainty_rows(tape: &Tape, b: TapeBelief) -> Vec<f64> {
    let s = tape.value(b.singleton);
    let u = tape.value(b.composite);
    (0..s.rows())
        .map(|r| entropy_scaled(s.row(r), u.get(r, 0), EntropyMode::Renormalized))
        .collect()
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| tape.add(acc, v)))
}

/// Records the whole step. When `frozen` is given those voxel weights are
/// used as-is instead of being ranked from the current fused uncertainty.
pub fn build_step(
    tape: &mut Tape,
    model: &BoundModel,
    plan: &StepPlan,
    sched: &WeightSchedule,
    frozen: Option<&[Vec<f64>]>,
) -> Result<StepTerms> {
    let n = plan.num_classes;
    if let Some(w) = frozen {
        if w.len() != plan.entries.len() {
            return Err(Error::Shape("frozen weights do not match plan".into()));
        }
    }

    let original: Vec<TapeBelief> = plan
        .entries
        .iter()
        .map(|e| {
            let x = tape.leaf(e.features.clone());
            let logits = model.forward(tape, x);
            tape_belief(tape, logits, n)
        })
        .collect();

    let mut restored: Vec<Option<TapeBelief>> = vec![None; plan.entries.len()];
    for pair in &plan.pairs {
        let xa = tape.leaf(pair.mixed_first.clone());
        let la = model.forward(tape, xa);
        let pa = tape_belief(tape, la, n);
        let xb = tape.leaf(pair.mixed_second.clone());
        let lb = model.forward(tape, xb);
        let pb = tape_belief(tape, lb, n);
        restored[pair.first] = Some(tape_select(tape, pa, pb, &pair.keep));
        if let Some(second) = pair.second {
            restored[second] = Some(tape_select(tape, pb, pa, &pair.keep));
        }
    }

    let mut fused = Vec::with_capacity(plan.entries.len());
    let mut weights = Vec::with_capacity(plan.entries.len());
    let mut sup = (Vec::new(), Vec::new());
    let mut wsum = (Vec::new(), Vec::new());
    for (i, entry) in plan.entries.iter().enumerate() {
        let restored_i = restored[i]
            .ok_or_else(|| Error::Contract(format!("sample {i} has no restored prediction")))?;
        let f = tape_fuse(tape, restored_i, original[i], n);
        fused.push(f);

        let p_fused = tape_probability(tape, f, n);
        let p_orig = tape_probability(tape, original[i], n);
        let fused_term = dice_ce(tape, p_fused, &entry.onehot);
        let orig_term = dice_ce(tape, p_orig, &entry.onehot);
        let supervised = tape.add(fused_term, orig_term);

        let w = match frozen {
            Some(all) => all[i].clone(),
            None => voxel_weights(&fused_uncertainty_rows(tape, f), sched),
        };
        let z = w.len() as f64;
        let ce_rows = tape_ce_per_voxel(tape, p_fused, &entry.onehot);
        let wv = tape.leaf(Matrix::new(w.len(), 1, w.clone()));
        let weighted = tape.mul(ce_rows, wv);
        let weighted = tape.sum(weighted);
        let weighted = tape.scale(weighted, 1.0 / z);
        weights.push(w);

        match entry.group {
            Group::Labeled => {
                sup.0.push(supervised);
                wsum.0.push(weighted);
            }
            Group::Unlabeled => {
                sup.1.push(supervised);
                wsum.1.push(weighted);
            }
        }
    }

    let mean = |tape: &mut Tape, vars: &[Var]| {
        sum_vars(tape, vars).map(|s| tape.scale(s, 1.0 / vars.len() as f64))
    };
    Ok(StepTerms {
        labeled: mean(tape, &sup.0),
        unlabeled: mean(tape, &sup.1),
        labeled_weighted: sum_vars(tape, &wsum.0),
        unlabeled_weighted: sum_vars(tape, &wsum.1),
        weights,
        fused,
        original,
    })
}

/// `a + k * b`, skipping absent terms.
pub(crate) fn combine(tape: &mut Tape, terms: &[(Option<Var>, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, k) in terms {
        let Some(v) = v else { continue };
        let scaled = if k == 1.0 { v } else { tape.scale(v, k) };
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled),
            None => scaled,
        });
    }
    acc.unwrap_or_else(|| tape.leaf(Matrix::scalar(0.0)))
}
