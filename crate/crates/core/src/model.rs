//! Multi-exit network: a stack of dense blocks with a two-layer classifier
//! head on each block's output. The head on the last block is the final
//! classifier; the others are internal classifiers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, LabeledInstance};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, ParamId, Tape, Var};

pub mod probe;

pub use probe::{probe_frozen_backbone, ProbeConfig, ProbeOutcome};

const CHECKPOINT_FORMAT: &str = "fairexit-checkpoint-v1";

// RNG streams; the final head and the blocks never share a stream with the
// internal heads, so adding or removing internal heads leaves them unchanged.
const STREAM_FINAL_HEAD: u64 = 1 << 20;
const STREAM_INTERNAL_HEAD: u64 = 2 << 20;
pub(crate) const STREAM_PROBE_HEAD: u64 = 3 << 20;
pub(crate) const STREAM_ADVERSARY: u64 = 4 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub n_blocks: usize,
    pub block_width: usize,
    pub head_hidden: usize,
    pub n_classes: usize,
    /// Adds each block's input to its output when the widths agree.
    pub residual: bool,
    /// `false` builds the exit-free baseline: only the final head.
    pub internal_heads: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            n_blocks: 4,
            block_width: 32,
            head_hidden: 64,
            n_classes: 2,
            residual: false,
            internal_heads: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_blocks == 0 || self.block_width == 0 || self.head_hidden == 0 {
            return Err(Error::Parameter("all model widths and counts must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn n_exits(&self) -> usize {
        if self.internal_heads {
            self.n_blocks
        } else {
            1
        }
    }

    /// Block index each exit reads from.
    pub fn exit_blocks(&self) -> Vec<usize> {
        if self.internal_heads {
            (0..self.n_blocks).collect()
        } else {
            vec![self.n_blocks - 1]
        }
    }
}

/// Affine map `x · w + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
}

impl Dense {
    /// He-uniform weights, `U(−√(6/fan_in), √(6/fan_in))`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            w: Matrix::new(fan_in, fan_out, data).expect("sized"),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Matrix::zeros(fan_in, fan_out),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.w)?.add_row(&self.b)
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, first_id: usize) -> Result<Var> {
        let w = tape.param(ParamId(first_id), self.w.clone());
        let b = tape.param(ParamId(first_id + 1), self.b.clone());
        tape.affine(x, w, b)
    }

    fn shapes_match(&self, fan_in: usize, fan_out: usize) -> bool {
        self.w.shape() == (fan_in, fan_out) && self.b.shape() == (1, fan_out)
    }
}

/// Two-layer perceptron head: `relu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Dense,
    pub out: Dense,
}

impl Head {
    pub const N_TENSORS: usize = 4;

    pub fn init(input: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Dense::init(input, hidden, rng),
            out: Dense::init(hidden, outputs, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.out.forward(&self.hidden.forward(x)?.relu())
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, first_id: usize) -> Result<Var> {
        let h = self.hidden.forward_tape(tape, x, first_id)?;
        let h = tape.relu(h);
        self.out.forward_tape(tape, h, first_id + 2)
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.hidden.w, &self.hidden.b, &self.out.w, &self.out.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiExitNet {
    config: ModelConfig,
    blocks: Vec<Dense>,
    heads: Vec<Head>,
}

/// Output of one exit over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitOutput {
    /// Block output feeding the head.
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    pub confidence: Vec<f64>,
}

/// Every exit's output over a batch, in exit order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace {
    pub exits: Vec<ExitOutput>,
}

/// One instance's view of all exits.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitTrace {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub confidences: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl ExitTrace {
    pub fn n_exits(&self) -> usize {
        self.confidences.len()
    }
}

impl BatchTrace {
    pub fn n_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn len(&self) -> usize {
        self.exits.first().map_or(0, |e| e.confidence.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instance(&self, i: usize) -> ExitTrace {
        ExitTrace {
            logits: self.exits.iter().map(|e| e.logits.row(i).to_vec()).collect(),
            probs: self.exits.iter().map(|e| e.probs.row(i).to_vec()).collect(),
            confidences: self.exits.iter().map(|e| e.confidence[i]).collect(),
            features: self.exits.iter().map(|e| e.features.row(i).to_vec()).collect(),
        }
    }

    /// Argmax predictions of one exit.
    pub fn predictions(&self, exit: usize) -> Vec<usize> {
        let p = &self.exits[exit].probs;
        (0..p.rows()).map(|r| p.argmax_row(r)).collect()
    }
}

/// Tape handles for every exit of a forward pass.
#[derive(Clone, Debug)]
pub struct TapeExits {
    pub features: Vec<Var>,
    pub logits: Vec<Var>,
}

impl MultiExitNet {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let base = ChaCha8Rng::seed_from_u64(config.seed);
        let stream = |s: u64| {
            let mut r = base.clone();
            r.set_stream(s);
            r
        };
        let blocks = (0..config.n_blocks)
            .map(|k| {
                let fan_in = if k == 0 { config.input_dim } else { config.block_width };
                Dense::init(fan_in, config.block_width, &mut stream(k as u64))
            })
            .collect();
        let head_for = |s: u64| {
            Head::init(
                config.block_width,
                config.head_hidden,
                config.n_classes,
                &mut stream(s),
            )
        };
        let mut heads = Vec::with_capacity(config.n_exits());
        if config.internal_heads {
            for k in 0..config.n_blocks - 1 {
                heads.push(head_for(STREAM_INTERNAL_HEAD + k as u64));
            }
        }
        heads.push(head_for(STREAM_FINAL_HEAD));
        Ok(Self {
            config,
            blocks,
            heads,
        })
    }

    /// Same network with every head replaced by `heads`, one per block.
    pub(crate) fn with_heads(&self, heads: Vec<Head>) -> Self {
        debug_assert_eq!(heads.len(), self.config.n_blocks);
        Self {
            config: ModelConfig {
                internal_heads: true,
                ..self.config.clone()
            },
            blocks: self.blocks.clone(),
            heads,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_exits(&self) -> usize {
        self.heads.len()
    }

    pub fn blocks(&self) -> &[Dense] {
        &self.blocks
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    /// Number of parameter tensors; ids run over `0..n_params()`.
    pub fn n_params(&self) -> usize {
        2 * self.blocks.len() + Head::N_TENSORS * self.heads.len()
    }

    fn head_first_id(&self, exit: usize) -> usize {
        2 * self.blocks.len() + Head::N_TENSORS * exit
    }

    /// Parameter tensors in id order.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::with_capacity(self.n_params());
        for b in &self.blocks {
            out.push(&b.w);
            out.push(&b.b);
        }
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.w);
            out.push(&mut b.b);
        }
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.config.input_dim {
            return Err(Error::dim(
                "forward",
                format!("{cols} features, model expects {}", self.config.input_dim),
            ));
        }
        Ok(())
    }

    fn residual_applies(&self, k: usize) -> bool {
        self.config.residual && (k > 0 || self.config.input_dim == self.config.block_width)
    }

    /// Output of every block.
    pub fn block_features(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(x.cols())?;
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for (k, block) in self.blocks.iter().enumerate() {
            let mut next = block.forward(&h)?.relu();
            if self.residual_applies(k) {
                next = next.add(&h)?;
            }
            out.push(next.clone());
            h = next;
        }
        Ok(out)
    }

    /// One pass through the backbone with every head evaluated on its block.
    pub fn forward_all_exits(&self, x: &Matrix) -> Result<BatchTrace> {
        let feats = self.block_features(x)?;
        let exits = self
            .config
            .exit_blocks()
            .into_iter()
            .zip(&self.heads)
            .map(|(k, head)| {
                let features = feats[k].clone();
                let logits = head.forward(&features)?;
                let probs = logits.softmax_rows();
                let confidence = (0..probs.rows())
                    .map(|r| probs.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                Ok(ExitOutput {
                    features,
                    logits,
                    probs,
                    confidence,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchTrace { exits })
    }

    pub fn trace_instances(&self, data: &[LabeledInstance]) -> Result<BatchTrace> {
        if data.is_empty() {
            return Err(Error::Input("cannot trace an empty instance set".into()));
        }
        let batch = Batch::from_instances(data)?;
        self.forward_all_exits(&batch.features)
    }

    /// Final-head logits from a forward pass that evaluates no internal head.
    pub fn final_logits(&self, x: &Matrix) -> Result<Matrix> {
        let feats = self.block_features(x)?;
        self.heads
            .last()
            .expect("at least one head")
            .forward(feats.last().expect("at least one block"))
    }

    /// Records the forward pass on `tape` with every tensor registered under
    /// its parameter id.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<TapeExits> {
        self.check_input(tape.value(x).cols())?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (k, block) in self.blocks.iter().enumerate() {
            let z = block.forward_tape(tape, h, 2 * k)?;
            let mut next = tape.relu(z);
            if self.residual_applies(k) {
                next = tape.add(next, h)?;
            }
            feats.push(next);
            h = next;
        }
        let mut features = Vec::with_capacity(self.heads.len());
        let mut logits = Vec::with_capacity(self.heads.len());
        for (exit, k) in self.config.exit_blocks().into_iter().enumerate() {
            features.push(feats[k]);
            logits.push(self.heads[exit].forward_tape(tape, feats[k], self.head_first_id(exit))?);
        }
        Ok(TapeExits { features, logits })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    /// JSON container with a format tag, the config and every tensor.
    pub fn to_checkpoint_string(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            format: &'a str,
            net: &'a MultiExitNet,
        }
        serde_json::to_string(&Out {
            format: CHECKPOINT_FORMAT,
            net: self,
        })
        .map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            format: String,
            net: MultiExitNet,
        }
        let parsed: In = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if parsed.format != CHECKPOINT_FORMAT {
            return Err(Error::Serde(format!(
                "unsupported checkpoint format {:?}",
                parsed.format
            )));
        }
        parsed.net.validate_shapes()?;
        Ok(parsed.net)
    }

    fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let ok_blocks = self.blocks.len() == c.n_blocks
            && self.blocks.iter().enumerate().all(|(k, b)| {
                let fan_in = if k == 0 { c.input_dim } else { c.block_width };
                b.shapes_match(fan_in, c.block_width)
            });
        let ok_heads = self.heads.len() == c.n_exits()
            && self.heads.iter().all(|h| {
                h.hidden.shapes_match(c.block_width, c.head_hidden)
                    && h.out.shapes_match(c.head_hidden, c.n_classes)
            });
        if !(ok_blocks && ok_heads) {
            return Err(Error::Serde("checkpoint tensors do not match its config".into()));
        }
        if !self.all_finite() {
            return Err(Error::Serde("checkpoint contains non-finite values".into()));
        }
        Ok(())
    }
}
