//! Probes on a frozen backbone: a fresh head per block,
//! trained on that block's features with the backbone untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Head, MultiExitNet, STREAM_PROBE_HEAD};
use crate::dataset::{batch_indices, Split};
use crate::error::{Error, Result};
use crate::metrics::FairnessReport;
use crate::numkit::{Matrix, ParamId, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub head_hidden: usize,
    /// Kept short on purpose: the probe measures what a layer exposes
    /// readily, not what a fresh network could still extract from it.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            head_hidden: 64,
            epochs: 3,
            learning_rate: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "probe head_hidden, epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "probe learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Test-set metrics of the probe on one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    /// Zero-based block index.
    pub layer: usize,
    pub accuracy: f64,
    pub eo: f64,
    pub dp: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    /// The frozen backbone with one trained probe head per block.
    pub probed: MultiExitNet,
    pub layers: Vec<LayerMetrics>,
}

/// Trains one head per block of `net` on frozen features from `split.train`
/// and reports each probe on `split.test`. The backbone is never updated.
pub fn probe_frozen_backbone(net: &MultiExitNet, split: &Split, config: &ProbeConfig) -> Result<ProbeOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Input("probing needs nonempty train and test splits".into()));
    }
    let model = net.config();
    let features = |data: &[crate::dataset::LabeledInstance]| -> Result<Vec<Matrix>> {
        let batch = crate::dataset::Batch::from_instances(data)?;
        net.block_features(&batch.features)
    };
    let train_feats = features(&split.train)?;
    let test_feats = features(&split.test)?;
    let train_targets: Vec<usize> = split.train.iter().map(|i| i.target).collect();

    let base = ChaCha8Rng::seed_from_u64(config.seed);
    let heads = (0..model.n_blocks)
        .into_par_iter()
        .map(|k| {
            let mut rng = base.clone();
            rng.set_stream(STREAM_PROBE_HEAD + k as u64);
            let head = Head::init(model.block_width, config.head_hidden, model.n_classes, &mut rng);
            fit_head(head, &train_feats[k], &train_targets, config, k as u64)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut layers = Vec::with_capacity(heads.len());
    for (k, head) in heads.iter().enumerate() {
        let logits = head.forward(&test_feats[k])?;
        let preds: Vec<usize> = (0..logits.rows()).map(|r| logits.argmax_row(r)).collect();
        let r = FairnessReport::for_instances(&preds, &split.test, model.n_classes, split.n_groups)?;
        layers.push(LayerMetrics {
            layer: k,
            accuracy: r.accuracy,
            eo: r.eo,
            dp: r.dp_gap,
        });
    }
    Ok(ProbeOutcome {
        probed: net.with_heads(heads),
        layers,
    })
}

fn fit_head(mut head: Head, x: &Matrix, targets: &[usize], config: &ProbeConfig, layer: u64) -> Result<Head> {
    for epoch in 0..config.epochs {
        let seed = crate::trainer::mix_seed(config.seed ^ (layer << 32), epoch as u64);
        for (batch, idx) in batch_indices(x.rows(), config.batch_size, seed, true)?.into_iter().enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let xb = tape.constant(x.select_rows(&idx)?);
            let logits = head.forward_tape(&mut tape, xb, 0)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch, value });
            }
            let grads = tape.backward(loss)?;
            for (i, p) in head.tensors_mut().into_iter().enumerate() {
                let g = grads.get(ParamId(i)).expect("every head tensor is on the tape");
                p.axpy(-config.learning_rate, g)?;
            }
        }
    }
    Ok(head)
}
