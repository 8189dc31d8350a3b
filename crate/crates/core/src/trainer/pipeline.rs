//! Pre-training, teacher/student self-training and evaluation loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::data::{generate_synthetic_with, voxel_features, Sample, SyntheticDataset};
use super::loss::overlap_scores;
use super::model::{ema_update, ToyModel};
use super::step::{build_step, combine, StepPlan, StepTerms};
use super::tape::Tape;
use crate::error::{Error, Result};
use crate::evidence::{belief_to_probability, logits_to_belief};
use crate::mixing::{generate_mask, MixMask};
use crate::tensor_io::{LabelGrid, VoxelGrid};
use crate::vwal::WeightSchedule;

/// Offsets the run seed for the mask stream and the held-out set so they
/// never coincide with the model initialisation or the training volumes.
const MASK_STREAM: u64 = 0x6d61_736b;
const TEST_STREAM: u64 = 0x7465_7374;

/// One named loss term of a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Labeled,
    Unlabeled,
    LabeledWeighted,
    UnlabeledWeighted,
}

impl StepTerms {
    pub fn term(&self, t: Term) -> Option<super::tape::Var> {
        match t {
            Term::Labeled => self.labeled,
            Term::Unlabeled => self.unlabeled,
            Term::LabeledWeighted => self.labeled_weighted,
            Term::UnlabeledWeighted => self.unlabeled_weighted,
        }
    }
}

/// A weighted sum of step terms.
pub type Objective = Vec<(Term, f64)>;

/// `L^l + lambda1 * L^l_w`, the pre-training objective.
pub fn pretrain_objective(cfg: &TrainConfig) -> Objective {
    vec![(Term::Labeled, 1.0), (Term::LabeledWeighted, cfg.lambda1)]
}

/// `L^l + L^u + lambda2 * L^l_w + lambda3 * L^u_w`, the self-training objective.
pub fn self_train_objective(cfg: &TrainConfig) -> Objective {
    vec![
        (Term::Labeled, 1.0),
        (Term::Unlabeled, 1.0),
        (Term::LabeledWeighted, cfg.lambda2),
        (Term::UnlabeledWeighted, cfg.lambda3),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    SelfTrain,
}

/// Step-averaged loss values for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub objective: f64,
    pub labeled: f64,
    pub unlabeled: f64,
    pub labeled_weighted: f64,
    pub unlabeled_weighted: f64,
}

/// Values of a recorded step, evaluated once.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepValues {
    pub objective: f64,
    pub labeled: f64,
    pub unlabeled: f64,
    pub labeled_weighted: f64,
    pub unlabeled_weighted: f64,
}

impl EpochMetrics {
    fn from_sum(stage: Stage, epoch: usize, steps: usize, sum: StepValues) -> Self {
        let k = steps.max(1) as f64;
        Self {
            stage,
            epoch,
            steps,
            objective: sum.objective / k,
            labeled: sum.labeled / k,
            unlabeled: sum.unlabeled / k,
            labeled_weighted: sum.labeled_weighted / k,
            unlabeled_weighted: sum.unlabeled_weighted / k,
        }
    }
}

/// Evaluates `objective` on `plan` without updating anything.
pub fn step_values(
    model: &ToyModel,
    plan: &StepPlan,
    sched: &WeightSchedule,
    objective: &Objective,
) -> Result<StepValues> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let terms = build_step(&mut tape, &bound, plan, sched, None)?;
    let out = objective_var(&mut tape, &terms, objective);
    Ok(read_values(&tape, &terms, out))
}

fn objective_var(tape: &mut Tape, terms: &StepTerms, objective: &Objective) -> super::tape::Var {
    let parts: Vec<_> = objective.iter().map(|&(t, k)| (terms.term(t), k)).collect();
    combine(tape, &parts)
}

fn read_values(tape: &Tape, terms: &StepTerms, out: super::tape::Var) -> StepValues {
    let get = |v: Option<super::tape::Var>| v.map_or(0.0, |v| tape.value(v).item());
    StepValues {
        objective: tape.value(out).item(),
        labeled: get(terms.labeled),
        unlabeled: get(terms.unlabeled),
        labeled_weighted: get(terms.labeled_weighted),
        unlabeled_weighted: get(terms.unlabeled_weighted),
    }
}

/// One gradient-descent step on `objective`; returns the pre-update values.
pub fn train_step(
    model: &mut ToyModel,
    plan: &StepPlan,
    sched: &WeightSchedule,
    objective: &Objective,
    learning_rate: f64,
) -> Result<StepValues> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let terms = build_step(&mut tape, &bound, plan, sched, None)?;
    let out = objective_var(&mut tape, &terms, objective);
    let values = read_values(&tape, &terms, out);
    if !values.objective.is_finite() {
        return Err(Error::Divergence(format!(
            "objective became {} (labeled {}, unlabeled {}, weighted {} / {})",
            values.objective,
            values.labeled,
            values.unlabeled,
            values.labeled_weighted,
            values.unlabeled_weighted
        )));
    }
    let grads = tape.backward(out);
    let g = bound.flat_gradient(&grads);
    let theta: Vec<f64> = model
        .params()
        .iter()
        .zip(&g)
        .map(|(p, d)| p - learning_rate * d)
        .collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    model.set_params(&theta)?;
    Ok(values)
}

fn with_context(e: Error, stage: &str, epoch: usize, step: usize) -> Error {
    match e {
        Error::Divergence(msg) => {
            Error::Divergence(format!("{stage} epoch {epoch} step {step}: {msg}"))
        }
        other => other,
    }
}

fn next_mask(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<MixMask> {
    generate_mask(cfg.dims, cfg.zero_size(), rng.random())
}

/// Training and held-out sets for a config: `labeled + unlabeled` training
/// volumes and `test` independent volumes.
pub fn toy_dataset(cfg: &TrainConfig) -> Result<(SyntheticDataset, Vec<Sample>)> {
    let train =
        generate_synthetic_with(cfg.labeled + cfg.unlabeled, cfg.labeled, cfg.dims, cfg.seed)?;
    let test = if cfg.test == 0 {
        Vec::new()
    } else {
        generate_synthetic_with(cfg.test, cfg.test, cfg.dims, cfg.seed ^ TEST_STREAM)?
            .samples()
            .to_vec()
    };
    Ok((train, test))
}

pub fn pretrain(dataset: &SyntheticDataset, cfg: &TrainConfig) -> Result<ToyModel> {
    pretrain_logged(dataset, cfg, |_| {})
}

/// Pre-trains a fresh model on the labeled subset, reporting each epoch.
///
/// Each epoch walks the labeled samples in order in batches of
/// `pretrain_batch` (the last batch wraps around to stay full).
pub fn pretrain_logged(
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<ToyModel> {
    cfg.validate()?;
    let labeled = dataset.labeled();
    if labeled.len() < 2 {
        return Err(Error::Contract(format!(
            "pre-training needs at least 2 labeled samples, got {}",
            labeled.len()
        )));
    }
    let num_classes = labeled[0].labels.num_classes();
    let mut model = ToyModel::new(num_classes, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MASK_STREAM);
    let objective = pretrain_objective(cfg);
    let batch = cfg.pretrain_batch.clamp(2, labeled.len());
    let steps = labeled.len().div_ceil(batch);

    for epoch in 1..=cfg.pretrain_epochs {
        let sched = WeightSchedule::new(cfg.epsilon, epoch, cfg.pretrain_epochs, cfg.rank_order)?;
        let mut sum = StepValues::default();
        for step in 0..steps {
            let members: Vec<&Sample> = (0..batch)
                .map(|i| &labeled[(step * batch + i) % labeled.len()])
                .collect();
            let masks = (0..batch.div_ceil(2))
                .map(|_| next_mask(&mut rng, cfg))
                .collect::<Result<Vec<_>>>()?;
            let plan = StepPlan::pretrain(&members, &masks)?;
            let v = train_step(&mut model, &plan, &sched, &objective, cfg.learning_rate)
                .map_err(|e| with_context(e, "pretrain", epoch, step))?;
            accumulate(&mut sum, v);
        }
        on_epoch(&EpochMetrics::from_sum(Stage::Pretrain, epoch, steps, sum));
    }
    Ok(model)
}

fn accumulate(sum: &mut StepValues, v: StepValues) {
    sum.objective += v.objective;
    sum.labeled += v.labeled;
    sum.unlabeled += v.unlabeled;
    sum.labeled_weighted += v.labeled_weighted;
    sum.unlabeled_weighted += v.unlabeled_weighted;
}

/// Hard pseudo-labels: per-voxel argmax of the model's pignistic probabilities.
pub fn predict_labels(model: &ToyModel, volume: &VoxelGrid) -> Result<LabelGrid> {
    let n = model.num_classes();
    let logits = model.logits(&voxel_features(volume));
    let mut labels = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let belief = logits_to_belief(logits.row(r))?;
        let p = belief_to_probability(&belief)?;
        labels.push(argmax(&p) as u8);
    }
    LabelGrid::new(volume.dims(), n, labels)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn self_train(
    init: &ToyModel,
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<(ToyModel, ToyModel)> {
    self_train_logged(init, dataset, cfg, |_| {})
}

/// Teacher/student training from `init`. Unlabeled sample `j` is paired with
/// labeled sample `j mod A`; the teacher follows the student by EMA after
/// every step. Returns `(student, teacher)`.
pub fn self_train_logged(
    init: &ToyModel,
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ToyModel, ToyModel)> {
    cfg.validate()?;
    let mut student = init.clone();
    let mut teacher = init.clone();
    if cfg.selftrain_epochs == 0 {
        return Ok((student, teacher));
    }
    let labeled = dataset.labeled();
    let unlabeled = dataset.unlabeled();
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::Contract(format!(
            "self-training needs labeled and unlabeled samples, got {} and {}",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MASK_STREAM ^ 1);
    let objective = self_train_objective(cfg);
    let batch = cfg.selftrain_batch.min(unlabeled.len());
    let steps = unlabeled.len().div_ceil(batch);

    for epoch in 1..=cfg.selftrain_epochs {
        let sched = WeightSchedule::new(cfg.epsilon, epoch, cfg.selftrain_epochs, cfg.rank_order)?;
        let mut sum = StepValues::default();
        for step in 0..steps {
            let idx: Vec<usize> =
                (step * batch..((step + 1) * batch).min(unlabeled.len())).collect();
            let pseudo = idx
                .iter()
                .map(|&j| predict_labels(&teacher, &unlabeled[j].volume))
                .collect::<Result<Vec<_>>>()?;
            let masks = idx
                .iter()
                .map(|_| next_mask(&mut rng, cfg))
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<_> = idx
                .iter()
                .enumerate()
                .map(|(k, &j)| {
                    (
                        &labeled[j % labeled.len()],
                        &unlabeled[j].volume,
                        &pseudo[k],
                        &masks[k],
                    )
                })
                .collect();
            let plan = StepPlan::self_train(&pairs)?;
            let v = train_step(&mut student, &plan, &sched, &objective, cfg.learning_rate)
                .map_err(|e| with_context(e, "self-train", epoch, step))?;
            accumulate(&mut sum, v);
            let theta = ema_update(&teacher.params(), &student.params(), cfg.ema_decay);
            teacher.set_params(&theta)?;
        }
        on_epoch(&EpochMetrics::from_sum(Stage::SelfTrain, epoch, steps, sum));
    }
    Ok((student, teacher))
}

/// Mean foreground overlap over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub dice: f64,
    pub jaccard: f64,
}

/// Mean Dice and Jaccard over samples, averaging foreground classes `1..N`.
pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one sample".into(),
        ));
    }
    let n = model.num_classes();
    let mut dice = 0.0;
    let mut jaccard = 0.0;
    for s in samples {
        let pred = predict_labels(model, &s.volume)?;
        for class in 1..n {
            let (d, j) = overlap_scores(pred.data(), s.labels.data(), class as u8);
            dice += d;
            jaccard += j;
        }
    }
    let k = (samples.len() * (n - 1)) as f64;
    Ok(Metrics {
        dice: dice / k,
        jaccard: jaccard / k,
    })
}
