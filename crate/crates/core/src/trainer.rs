//! Training loop: SGD with momentum, warmup-then-cosine schedule, the
//! per-step choreography for all four objectives, and binary checkpoints.
//!
//! One step, for the queue-based variants:
//! 1. build a batch (consuming the trainer's rng stream),
//! 2. embed queries through the tracked query encoder, keys through the
//!    untracked key encoder, snapshot the queue as constant leaves,
//! 3. evaluate the objective, abort if non-finite, backprop,
//! 4. SGD-update the query encoder, momentum-update the key encoder,
//! 5. enqueue the self-view key embeddings (with training-visible labels;
//!    the instance-discrimination variant enqueues everything unlabeled).
//!
//! The in-batch variants (supervised contrast / instance discrimination over
//! 2n views) skip the key encoder, queue and momentum entirely; both views
//! go through the query encoder, tracked.
//!
//! Checkpoints capture the full mutable state — both encoders, optimizer
//! buffers, step counter, rng state, and queue contents — so a resumed run
//! continues the exact trajectory of an uninterrupted one. (Queue entries
//! were produced by past key-encoder states; they cannot be recomputed, so
//! they must be stored.)

use std::path::Path;

use crate::data::{
    build_contrastive_batch, AugmentationSpec, BatchMixing, BatchPlan, ClassId, Dataset,
};
use crate::encoder::{init_pair, momentum_update, EncoderConfig, EncoderPair};
use crate::error::{Error, Result};
use crate::losses::{
    moco_batch_loss, paired_layout, simclr_loss, supcon_loss, supmoco_batch_loss, QueueOnTape,
    SimilarityConfig, SupmocoQuery,
};
use crate::queue::{FeatureQueue, QueueEntry};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Supervised momentum-queue contrast (labels + queue + momentum).
    SupMoco,
    /// Instance discrimination against the queue; labels ignored.
    Moco,
    /// In-batch supervised contrast; no queue, no key encoder.
    SupCon,
    /// In-batch instance discrimination; no queue, no key encoder.
    SimClr,
}

impl LossVariant {
    pub fn uses_queue(self) -> bool {
        matches!(self, LossVariant::SupMoco | LossVariant::Moco)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::SupMoco => "supmoco",
            LossVariant::Moco => "moco",
            LossVariant::SupCon => "supcon",
            LossVariant::SimClr => "simclr",
        }
    }
}

/// Everything the trainer needs besides the dataset and encoder shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Positives per labeled query including the self view.
    pub positives: usize,
    pub temperature: f64,
    pub queue_capacity: usize,
    /// Key-encoder momentum, in [0, 1].
    pub encoder_momentum: f64,
    /// Warmup starts here...
    pub base_lr: f64,
    /// ...and ramps linearly to here, then cosine-anneals to ~0.
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mixing: BatchMixing,
    pub variant: LossVariant,
    pub augment: AugmentationSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("positives", self.positives),
            ("queue_capacity", self.queue_capacity),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("train {name} must be positive")));
            }
        }
        SimilarityConfig {
            temperature: self.temperature,
        }
        .validate()?;
        if !(0.0..=1.0).contains(&self.encoder_momentum) {
            return Err(Error::contract(format!(
                "encoder_momentum must be in [0, 1], got {}",
                self.encoder_momentum
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::contract(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= self.base_lr) {
            return Err(Error::contract(format!(
                "peak_lr must be >= base_lr, got peak {} vs base {}",
                self.peak_lr, self.base_lr
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::contract(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::contract(format!(
                "sgd_momentum must be in [0, 1), got {}",
                self.sgd_momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::contract(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.augment.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Learning rate at `step` (0-based): linear from base_lr to peak_lr across
/// the warmup steps, then half-cosine from peak_lr toward zero across the
/// rest. With zero warmup the cosine starts immediately at peak_lr.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let total = config.total_steps();
    let warmup = config.warmup_epochs * config.steps_per_epoch;
    let step = step.min(total.saturating_sub(1));
    if step < warmup {
        let t = step as f64 / warmup as f64;
        config.base_lr + (config.peak_lr - config.base_lr) * t
    } else {
        let span = (total - warmup).max(1) as f64;
        let t = (step - warmup) as f64 / span;
        config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// SGD momentum buffers, aligned with [`crate::encoder::EncoderParams::tensors`]
/// order (or whatever parameter list the owner steps with).
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub buffers: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn zeros_like(tensors: &[&Tensor]) -> Self {
        SgdState {
            buffers: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One SGD step with classic momentum and decoupled-from-nothing weight
/// decay folded into the gradient (the conventional formulation):
///
/// ```text
/// buffer <- mu * buffer + (grad + wd * param)
/// param  <- param - lr * buffer
/// ```
///
/// Every tensor must carry a gradient (zero gradients are legitimate;
/// missing ones are a contract error). Gradients are consumed (cleared).
pub fn sgd_step(
    tensors: &mut [&mut Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if tensors.len() != state.buffers.len() {
        return Err(Error::contract(format!(
            "sgd_step got {} tensors for {} momentum buffers",
            tensors.len(),
            state.buffers.len()
        )));
    }
    for (t, buf) in tensors.iter_mut().zip(&mut state.buffers) {
        let grad = t
            .grad()
            .ok_or_else(|| Error::contract("sgd_step on a tensor without a gradient"))?;
        if grad.len() != buf.len() {
            return Err(Error::contract(format!(
                "sgd_step buffer length {} does not match tensor length {}",
                buf.len(),
                grad.len()
            )));
        }
        let grad = grad.to_vec();
        for ((v, b), g) in t.values_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
            *b = momentum * *b + (g + weight_decay * *v);
            *v -= lr * *b;
        }
        t.clear_grad();
    }
    Ok(())
}

/// One history line: `step,loss,lr,queue_fill`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub queue_fill: usize,
}

/// Owns all mutable training state. Construct with [`Trainer::new`], advance
/// with [`Trainer::train_step`]/[`Trainer::run`], persist with
/// [`Trainer::save_checkpoint`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub pair: EncoderPair,
    pub optimizer: SgdState,
    pub queue: FeatureQueue,
    rng: SeededRng,
    step: usize,
    history: Vec<StepRecord>,
}

impl Trainer {
    /// Fresh trainer: encoder pair from the seed's "init" substream, step
    /// stream from "steps", empty queue sized `queue_capacity` x `proj_out`.
    pub fn new(encoder_config: &EncoderConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(config.seed);
        let mut init_rng = root.substream("init");
        let pair = init_pair(encoder_config, config.encoder_momentum, &mut init_rng)?;
        let optimizer = SgdState::zeros_like(&pair.query.tensors());
        let queue = FeatureQueue::new(config.queue_capacity, encoder_config.proj_out)?;
        Ok(Trainer {
            config,
            pair,
            optimizer,
            queue,
            rng: root.substream("steps"),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Executes one optimization step against `dataset`.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::contract(format!(
                "training already finished at step {}",
                self.step
            )));
        }
        let lr = lr_schedule(self.step, &self.config);
        let rng_state = self.rng.state();
        let plan = BatchPlan {
            batch_size: self.config.batch_size,
            positives: self.config.positives,
            mixing: self.config.mixing,
        };
        let batch = build_contrastive_batch(dataset, &plan, &self.config.augment, &mut self.rng)?;
        let sim = SimilarityConfig {
            temperature: self.config.temperature,
        };

        let mut tape = Tape::new();
        let bound = self.pair.query.bind(&mut tape, true, true)?;

        // Key embeddings for the queue variants (also what gets enqueued).
        // Computed through the untracked key encoder: constant on the tape.
        let mut self_keys: Vec<Vec<f64>> = Vec::new();
        let loss_id = match self.config.variant {
            LossVariant::SupMoco | LossVariant::Moco => {
                let snapshot = self.queue.snapshot();
                let queue_on_tape = QueueOnTape::insert(&mut tape, &snapshot);
                let mut queries = Vec::with_capacity(batch.queries.len());
                for q in &batch.queries {
                    let embedding = bound.embed(&mut tape, &q.query_view, true)?;
                    let mut keys = Vec::with_capacity(q.key_views.len());
                    for view in &q.key_views {
                        let kv = self.pair.key.embed(view, true)?;
                        keys.push(tape.vector_leaf(&kv, false));
                        if keys.len() == 1 {
                            self_keys.push(kv);
                        }
                    }
                    queries.push(SupmocoQuery {
                        embedding,
                        label: q.label,
                        keys,
                    });
                }
                match self.config.variant {
                    LossVariant::SupMoco => {
                        supmoco_batch_loss(&mut tape, &queries, &queue_on_tape, &sim)?.0
                    }
                    _ => {
                        let pairs: Vec<_> =
                            queries.iter().map(|q| (q.embedding, q.keys[0])).collect();
                        moco_batch_loss(&mut tape, &pairs, &queue_on_tape.ids, &sim)?.0
                    }
                }
            }
            LossVariant::SupCon | LossVariant::SimClr => {
                // Two tracked views per example: the query view and the self
                // key view, both through the query encoder.
                let n = batch.queries.len();
                let mut embeddings = Vec::with_capacity(2 * n);
                for q in &batch.queries {
                    embeddings.push(bound.embed(&mut tape, &q.query_view, true)?);
                }
                for q in &batch.queries {
                    embeddings.push(bound.embed(&mut tape, &q.key_views[0], true)?);
                }
                let pair_of = paired_layout(n);
                match self.config.variant {
                    LossVariant::SupCon => {
                        let labels: Vec<Option<ClassId>> = batch
                            .queries
                            .iter()
                            .map(|q| q.label)
                            .chain(batch.queries.iter().map(|q| q.label))
                            .collect();
                        supcon_loss(&mut tape, &embeddings, &labels, &pair_of, &sim)?.0
                    }
                    _ => simclr_loss(&mut tape, &embeddings, &pair_of, &sim)?.0,
                }
            }
        };

        let loss = tape.scalar_value(loss_id);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                lr,
                rng_state,
            });
        }

        tape.backward(loss_id)?;
        let ids = bound.param_ids();
        let mut tensors = self.pair.query.tensors_mut();
        debug_assert_eq!(ids.len(), tensors.len());
        for (t, id) in tensors.iter_mut().zip(&ids) {
            let g = tape
                .grad(*id)
                .expect("trainable leaves always receive a gradient")
                .to_vec();
            t.set_grad(g)?;
        }
        sgd_step(
            &mut tensors,
            &mut self.optimizer,
            lr,
            self.config.sgd_momentum,
            self.config.weight_decay,
        )?;

        if self.config.variant.uses_queue() {
            momentum_update(&mut self.pair);
            let entries: Vec<(Vec<f64>, Option<ClassId>)> = batch
                .queries
                .iter()
                .zip(self_keys)
                .map(|(q, k)| {
                    let label = match self.config.variant {
                        LossVariant::Moco => None,
                        _ => q.label,
                    };
                    (k, label)
                })
                .collect();
            self.queue.enqueue(entries)?;
        }

        let record = StepRecord {
            step: self.step,
            loss,
            lr,
            queue_fill: self.queue.len(),
        };
        self.history.push(record.clone());
        self.step += 1;
        Ok(record)
    }

    /// Runs up to `max_steps` more steps (or to completion) and returns the
    /// records produced by this call.
    pub fn run(&mut self, dataset: &Dataset, max_steps: usize) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while !self.is_finished() && out.len() < max_steps {
            out.push(self.train_step(dataset)?);
        }
        Ok(out)
    }

    /// Runs to the configured total step count.
    pub fn run_to_completion(&mut self, dataset: &Dataset) -> Result<Vec<StepRecord>> {
        self.run(dataset, usize::MAX)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint::encode(self);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        checkpoint::decode(&bytes, path)
    }
}

/// Binary little-endian checkpoint encoding.
///
/// Layout: magic `SMCK`, format version, encoder + train config echo, query
/// and key parameters, optimizer buffers, step counter, rng state, queue
/// contents. Writing is deterministic, so save -> load -> save is
/// byte-identical.
mod checkpoint {
    use super::*;

    const MAGIC: &[u8; 4] = b"SMCK";
    const VERSION: u32 = 1;

    struct Writer {
        buf: Vec<u8>,
    }

    impl Writer {
        fn new() -> Self {
            Writer { buf: Vec::new() }
        }

        fn u8(&mut self, v: u8) {
            self.buf.push(v);
        }

        fn u32(&mut self, v: u32) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }

        fn u64(&mut self, v: u64) {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }

        fn usize(&mut self, v: usize) {
            self.u64(v as u64);
        }

        fn f64(&mut self, v: f64) {
            self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }

        fn f64s(&mut self, vs: &[f64]) {
            self.usize(vs.len());
            for &v in vs {
                self.f64(v);
            }
        }

        fn tensor(&mut self, t: &Tensor) {
            self.usize(t.shape().len());
            for &d in t.shape() {
                self.usize(d);
            }
            for &v in t.values() {
                self.f64(v);
            }
        }
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
        path: &'a Path,
    }

    impl<'a> Reader<'a> {
        fn err(&self, message: impl Into<String>) -> Error {
            Error::Format {
                path: self.path.to_path_buf(),
                message: format!("{} (at byte {})", message.into(), self.pos),
            }
        }

        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return Err(self.err(format!(
                    "truncated checkpoint: wanted {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                )));
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        fn usize(&mut self) -> Result<usize> {
            let v = self.u64()?;
            usize::try_from(v).map_err(|_| self.err(format!("length {v} does not fit usize")))
        }

        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_bits(self.u64()?))
        }

        fn f64s(&mut self) -> Result<Vec<f64>> {
            let n = self.usize()?;
            (0..n).map(|_| self.f64()).collect()
        }

        fn tensor(&mut self) -> Result<Tensor> {
            let ndim = self.usize()?;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| self.usize())
                .collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let values: Vec<f64> = (0..count).map(|_| self.f64()).collect::<Result<_>>()?;
            Tensor::new(shape, values)
        }
    }

    fn write_params(w: &mut Writer, params: &crate::encoder::EncoderParams) {
        let tensors = params.tensors();
        w.usize(tensors.len());
        for t in tensors {
            w.tensor(t);
        }
    }

    fn read_params(
        r: &mut Reader,
        config: &EncoderConfig,
    ) -> Result<crate::encoder::EncoderParams> {
        use crate::encoder::{EncoderParams, LinearLayer};
        let count = r.usize()?;
        let expected = 2 * (config.backbone_hidden.len() + 1 + 2);
        if count != expected {
            return Err(r.err(format!("expected {expected} parameter tensors, found {count}")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        let mut it = tensors.into_iter();
        let mut layer = || -> LinearLayer {
            let weight = it.next().expect("count checked");
            let bias = it.next().expect("count checked");
            LinearLayer { weight, bias }
        };
        let backbone: Vec<LinearLayer> =
            (0..config.backbone_hidden.len() + 1).map(|_| layer()).collect();
        let projection: Vec<LinearLayer> = (0..2).map(|_| layer()).collect();
        Ok(EncoderParams {
            config: config.clone(),
            backbone,
            projection,
        })
    }

    pub(super) fn encode(t: &Trainer) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);

        // Encoder config.
        let ec = &t.pair.query.config;
        w.usize(ec.input_dim);
        w.usize(ec.backbone_hidden.len());
        for &h in &ec.backbone_hidden {
            w.usize(h);
        }
        w.usize(ec.backbone_out);
        w.usize(ec.proj_hidden);
        w.usize(ec.proj_out);

        // Train config.
        let c = &t.config;
        w.usize(c.epochs);
        w.usize(c.steps_per_epoch);
        w.usize(c.batch_size);
        w.usize(c.positives);
        w.f64(c.temperature);
        w.usize(c.queue_capacity);
        w.f64(c.encoder_momentum);
        w.f64(c.base_lr);
        w.f64(c.peak_lr);
        w.usize(c.warmup_epochs);
        w.f64(c.sgd_momentum);
        w.f64(c.weight_decay);
        w.u64(c.seed);
        w.u8(match c.mixing {
            BatchMixing::Pure => 0,
            BatchMixing::Impure => 1,
        });
        w.u8(match c.variant {
            LossVariant::SupMoco => 0,
            LossVariant::Moco => 1,
            LossVariant::SupCon => 2,
            LossVariant::SimClr => 3,
        });
        w.f64(c.augment.noise_sigma);
        w.f64(c.augment.scale_jitter.0);
        w.f64(c.augment.scale_jitter.1);
        w.f64(c.augment.dropout_prob);

        write_params(&mut w, &t.pair.query);
        write_params(&mut w, &t.pair.key);

        w.usize(t.optimizer.buffers.len());
        for b in &t.optimizer.buffers {
            w.f64s(b);
        }

        w.usize(t.step);
        w.u64(t.rng.seed());
        for s in t.rng.state() {
            w.u64(s);
        }

        w.usize(t.queue.capacity());
        w.usize(t.queue.dim());
        w.u64(t.queue.next_seq());
        w.usize(t.queue.len());
        for e in t.queue.entries() {
            match e.label {
                Some(ClassId(id)) => {
                    w.u8(1);
                    w.u32(id);
                }
                None => {
                    w.u8(0);
                    w.u32(0);
                }
            }
            w.u64(e.insert_seq);
            for &v in &e.embedding {
                w.f64(v);
            }
        }
        w.buf
    }

    pub(super) fn decode(bytes: &[u8], path: &Path) -> Result<Trainer> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!(
                "unsupported checkpoint version {version}, this build reads {VERSION}"
            )));
        }

        let input_dim = r.usize()?;
        let hidden_count = r.usize()?;
        let backbone_hidden: Vec<usize> =
            (0..hidden_count).map(|_| r.usize()).collect::<Result<_>>()?;
        let encoder_config = EncoderConfig {
            input_dim,
            backbone_hidden,
            backbone_out: r.usize()?,
            proj_hidden: r.usize()?,
            proj_out: r.usize()?,
        };

        let epochs = r.usize()?;
        let steps_per_epoch = r.usize()?;
        let batch_size = r.usize()?;
        let positives = r.usize()?;
        let temperature = r.f64()?;
        let queue_capacity = r.usize()?;
        let encoder_momentum = r.f64()?;
        let base_lr = r.f64()?;
        let peak_lr = r.f64()?;
        let warmup_epochs = r.usize()?;
        let sgd_momentum = r.f64()?;
        let weight_decay = r.f64()?;
        let seed = r.u64()?;
        let mixing = match r.u8()? {
            0 => BatchMixing::Pure,
            1 => BatchMixing::Impure,
            other => return Err(r.err(format!("unknown mixing tag {other}"))),
        };
        let variant = match r.u8()? {
            0 => LossVariant::SupMoco,
            1 => LossVariant::Moco,
            2 => LossVariant::SupCon,
            3 => LossVariant::SimClr,
            other => return Err(r.err(format!("unknown variant tag {other}"))),
        };
        let augment = AugmentationSpec {
            noise_sigma: r.f64()?,
            scale_jitter: (r.f64()?, r.f64()?),
            dropout_prob: r.f64()?,
        };
        let config = TrainConfig {
            epochs,
            steps_per_epoch,
            batch_size,
            positives,
            temperature,
            queue_capacity,
            encoder_momentum,
            base_lr,
            peak_lr,
            warmup_epochs,
            sgd_momentum,
            weight_decay,
            seed,
            mixing,
            variant,
            augment,
        };
        config.validate().map_err(|e| r.err(format!("config echo invalid: {e}")))?;

        let query = read_params(&mut r, &encoder_config)?;
        let key = read_params(&mut r, &encoder_config)?;
        let pair = EncoderPair {
            query,
            key,
            momentum: encoder_momentum,
        };

        let buffer_count = r.usize()?;
        if buffer_count != pair.query.tensors().len() {
            return Err(r.err(format!(
                "optimizer has {buffer_count} buffers for {} tensors",
                pair.query.tensors().len()
            )));
        }
        let mut buffers = Vec::with_capacity(buffer_count);
        for _ in 0..buffer_count {
            buffers.push(r.f64s()?);
        }
        for (b, t) in buffers.iter().zip(pair.query.tensors()) {
            if b.len() != t.len() {
                return Err(r.err("optimizer buffer length mismatch"));
            }
        }
        let optimizer = SgdState { buffers };

        let step = r.usize()?;
        let rng_seed = r.u64()?;
        let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        let rng = SeededRng::from_parts(rng_seed, rng_state);

        let cap = r.usize()?;
        let dim = r.usize()?;
        let next_seq = r.u64()?;
        let count = r.usize()?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let has_label = r.u8()?;
            let raw = r.u32()?;
            let label = match has_label {
                0 => None,
                1 => Some(ClassId(raw)),
                other => return Err(r.err(format!("bad label flag {other}"))),
            };
            let insert_seq = r.u64()?;
            let embedding: Vec<f64> = (0..dim).map(|_| r.f64()).collect::<Result<_>>()?;
            entries.push(QueueEntry {
                embedding,
                label,
                insert_seq,
            });
        }
        let queue = FeatureQueue::from_parts(cap, dim, entries, next_seq)?;

        if r.pos != r.bytes.len() {
            return Err(r.err(format!(
                "{} trailing bytes after checkpoint payload",
                r.bytes.len() - r.pos
            )));
        }

        Ok(Trainer {
            config,
            pair,
            optimizer,
            queue,
            rng,
            step,
            history: Vec::new(),
        })
    }
}
