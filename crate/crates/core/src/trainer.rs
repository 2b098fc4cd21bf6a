//! Minibatch SGD over the multi-exit objective, with the plain, HSIC,
//! adversarial and teacher–student variants.

use std::io::Write;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, Batch, Split};
use crate::error::{Error, Result};
use crate::fairloss::{
    aggregate_loss_tape, exit_loss, ExitVars, FairnessMethod, FairnessTerm, LossWeights,
};
use crate::inference::{decide_among, DEFAULT_THETA};
use crate::metrics::{exit_label, FairnessReport};
use crate::model::{Head, ModelConfig, MultiExitNet, STREAM_ADVERSARY};
use crate::numkit::{Gradients, Matrix, ParamId, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Fixed,
    /// Multiply the rate by `gamma` every `step_epochs` epochs.
    StepDecay { step_epochs: usize, gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Fixed => base,
            LrSchedule::StepDecay { step_epochs, gamma } => {
                base * gamma.powi((epoch / step_epochs.max(1)) as i32)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// Keep the epoch with the best validation accuracy − EO at the
    /// early-exit operating point over the trained exits.
    BestValidation { theta: f64 },
    LastEpoch,
}

impl Default for Selection {
    fn default() -> Self {
        Selection::BestValidation {
            theta: DEFAULT_THETA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub method: FairnessMethod,
    pub lr_schedule: LrSchedule,
    /// Plain SGD when zero.
    pub momentum: f64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 64,
            seed: 0,
            weights: LossWeights::for_exits(4, 0.0),
            method: FairnessMethod::None,
            lr_schedule: LrSchedule::Fixed,
            momentum: 0.0,
            selection: Selection::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_exits: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        self.weights.validate(n_exits)?;
        self.method.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Vec<f64>,
    pub val_eo: Vec<f64>,
    /// Selection score (accuracy − EO at the early-exit operating point).
    pub val_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Long-format CSV: `epoch,split,exit,metric,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Serde(e.to_string());
        writeln!(out, "epoch,split,exit,metric,value").map_err(io)?;
        for e in &self.epochs {
            writeln!(out, "{},train,all,loss,{}", e.epoch, e.train_loss).map_err(io)?;
            let n = e.val_accuracy.len();
            for k in 0..n {
                let label = exit_label(k, n);
                writeln!(out, "{},val,{label},accuracy,{}", e.epoch, e.val_accuracy[k]).map_err(io)?;
                writeln!(out, "{},val,{label},eo,{}", e.epoch, e.val_eo[k]).map_err(io)?;
            }
            writeln!(out, "{},val,EE,score,{}", e.epoch, e.val_score).map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: MultiExitNet,
    pub log: TrainLog,
    /// One adversary head per exit for the adversarial method, else empty.
    pub adversaries: Vec<Head>,
    /// Zero-based epoch whose parameters were kept.
    pub selected_epoch: usize,
}

/// splitmix64 finalizer, used to derive independent seeds.
pub(crate) fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SGD with optional heavy-ball momentum over a flat list of tensors.
struct Sgd {
    momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `w ← w − lr·g` for tensors whose ids start at `first_id`.
    fn step(&mut self, params: Vec<&mut Matrix>, grads: &Gradients, first_id: usize, lr: f64) -> Result<()> {
        for (i, p) in params.into_iter().enumerate() {
            let g = grads
                .get(ParamId(first_id + i))
                .ok_or_else(|| Error::Usage(format!("no gradient for parameter {}", first_id + i)))?;
            if self.momentum == 0.0 {
                p.axpy(-lr, g)?;
            } else {
                let slot = first_id + i;
                if self.velocity.len() <= slot {
                    self.velocity.resize(slot + 1, Matrix::zeros(0, 0));
                }
                let v = &mut self.velocity[slot];
                if v.shape() != g.shape() {
                    *v = Matrix::zeros(g.rows(), g.cols());
                }
                let mut next = v.scale(self.momentum);
                next.axpy(1.0, g)?;
                p.axpy(-lr, &next)?;
                *v = next;
            }
        }
        Ok(())
    }
}

/// Trains `net` on `split.train`, selecting parameters on `split.val`.
pub fn train(net: MultiExitNet, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    if matches!(config.method, FairnessMethod::MmdDistill { .. }) && config.weights.lambda > 0.0 {
        return Err(Error::Usage(
            "mmd distillation needs a teacher; use train_distillation".into(),
        ));
    }
    train_inner(net, split, config, None)
}

/// Gradient-reversal adversarial training: one optimizer over the network and
/// the adversary heads, updated simultaneously.
pub fn train_adversarial(net: MultiExitNet, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    if !matches!(config.method, FairnessMethod::Adversarial { .. }) {
        return Err(Error::Usage(format!(
            "train_adversarial needs the adversarial method, got {}",
            config.method.name()
        )));
    }
    train_inner(net, split, config, None)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub teacher: TrainOutcome,
    pub student: TrainOutcome,
}

/// Trains a plain multi-exit teacher, then a student regularized towards the
/// frozen teacher's per-exit features with class-conditional MMD.
pub fn train_distillation(
    teacher: (&ModelConfig, &TrainConfig),
    student: (&ModelConfig, &TrainConfig),
    split: &Split,
) -> Result<DistillOutcome> {
    let teacher_train = TrainConfig {
        method: FairnessMethod::None,
        ..teacher.1.clone()
    };
    let teacher_out = train_inner(MultiExitNet::init(teacher.0.clone())?, split, &teacher_train, None)?;
    if !matches!(student.1.method, FairnessMethod::MmdDistill { .. }) {
        return Err(Error::Usage(format!(
            "student must use mmd_distill, got {}",
            student.1.method.name()
        )));
    }
    let (t, s) = (teacher.0, student.0);
    if t.n_exits() != s.n_exits() || t.block_width != s.block_width {
        return Err(Error::Usage(
            "teacher and student need the same exits and block width".into(),
        ));
    }
    let student_out = train_inner(
        MultiExitNet::init(student.0.clone())?,
        split,
        student.1,
        Some(&teacher_out.net),
    )?;
    Ok(DistillOutcome {
        teacher: teacher_out,
        student: student_out,
    })
}

fn train_inner(
    mut net: MultiExitNet,
    split: &Split,
    config: &TrainConfig,
    teacher: Option<&MultiExitNet>,
) -> Result<TrainOutcome> {
    let n_exits = net.n_exits();
    config.validate(n_exits)?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Input("training needs nonempty train and val splits".into()));
    }
    let weights = &config.weights;
    let active = weights.active_exits();
    let n_groups = split.n_groups;
    let n_classes = net.config().n_classes;
    let width = net.config().block_width;

    let mut adversaries: Vec<Head> = match config.method {
        FairnessMethod::Adversarial { hidden, .. } => {
            let base = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, STREAM_ADVERSARY));
            (0..n_exits)
                .map(|k| {
                    let mut rng = base.clone();
                    rng.set_stream(STREAM_ADVERSARY + k as u64);
                    Head::init(width, hidden, n_groups.max(2), &mut rng)
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let adv_first_id = net.n_params();

    let mut sgd = Sgd::new(config.momentum);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, MultiExitNet, Vec<Head>)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_schedule.rate(config.learning_rate, epoch);
        let order = batch_indices(split.train.len(), config.batch_size, mix_seed(config.seed, epoch as u64), true)?;
        let mut loss_sum = 0.0;
        for (b, idx) in order.iter().enumerate() {
            let batch = Batch::from_instances(idx.iter().map(|&i| &split.train[i]))?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.features.clone());
            let exits = net.forward_tape(&mut tape, x)?;
            let teacher_feats = match teacher {
                Some(t) => Some(teacher_exit_features(t, &batch.features)?),
                None => None,
            };

            let mut per_exit = vec![None; n_exits];
            for &k in &active {
                let term = match config.method {
                    FairnessMethod::None => FairnessTerm::None,
                    FairnessMethod::Hsic { bandwidth } => FairnessTerm::Hsic { bandwidth },
                    FairnessMethod::MmdDistill { bandwidth } => match &teacher_feats {
                        Some(tf) => FairnessTerm::Mmd {
                            teacher_features: &tf[k],
                            bandwidth,
                        },
                        None => FairnessTerm::None,
                    },
                    FairnessMethod::Adversarial {
                        reversal_strength, ..
                    } => FairnessTerm::Adversarial {
                        adversary: &adversaries[k],
                        first_param_id: adv_first_id + Head::N_TENSORS * k,
                        reversal_strength,
                    },
                };
                let vars = ExitVars {
                    logits: exits.logits[k],
                    features: exits.features[k],
                };
                per_exit[k] = Some(exit_loss(
                    &mut tape,
                    vars,
                    &batch.targets,
                    &batch.sensitives,
                    term,
                    weights.lambda,
                )?);
            }
            let loss = aggregate_loss_tape(&mut tape, &per_exit, weights)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, value });
            }
            loss_sum += value;
            let grads = tape.backward(loss)?;
            sgd.step(net.params_mut(), &grads, 0, lr)?;
            for (k, adv) in adversaries.iter_mut().enumerate() {
                sgd.step(
                    adv.tensors_mut().into_iter().collect(),
                    &grads,
                    adv_first_id + Head::N_TENSORS * k,
                    lr,
                )?;
            }
        }

        let trace = net.trace_instances(&split.val)?;
        let mut val_accuracy = Vec::with_capacity(n_exits);
        let mut val_eo = Vec::with_capacity(n_exits);
        for k in 0..n_exits {
            let r = FairnessReport::for_instances(&trace.predictions(k), &split.val, n_classes, n_groups)?;
            val_accuracy.push(r.accuracy);
            val_eo.push(r.eo);
        }
        let val_score = match config.selection {
            Selection::BestValidation { theta } => {
                let preds = decide_among(&trace, theta, &active);
                let r = FairnessReport::for_instances(&preds, &split.val, n_classes, n_groups)?;
                r.accuracy - r.eo
            }
            Selection::LastEpoch => f64::NAN,
        };
        let train_loss = loss_sum / order.len() as f64;
        debug!("epoch {epoch}: loss {train_loss:.5}, val score {val_score:.3}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
            val_eo,
            val_score,
        });
        if let Selection::BestValidation { .. } = config.selection {
            if best.as_ref().is_none_or(|(s, ..)| val_score > *s) {
                best = Some((val_score, epoch, net.clone(), adversaries.clone()));
            }
        }
    }

    let (net, adversaries, selected_epoch) = match best {
        Some((_, epoch, net, adv)) => (net, adv, epoch),
        None => (net, adversaries, config.epochs - 1),
    };
    Ok(TrainOutcome {
        net,
        log,
        adversaries,
        selected_epoch,
    })
}

/// Features the teacher feeds each of its exits for a batch.
fn teacher_exit_features(teacher: &MultiExitNet, x: &Matrix) -> Result<Vec<Matrix>> {
    let feats = teacher.block_features(x)?;
    Ok(teacher
        .config()
        .exit_blocks()
        .into_iter()
        .map(|k| feats[k].clone())
        .collect())
}
