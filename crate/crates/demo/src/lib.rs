//! Browser demo bindings: a handful of wasm-exported functions that drive
//! the static page in `www/`. Everything speaks JSON strings so the JS side
//! stays free of generated glue types, and every function is plain Rust
//! underneath, so the whole surface is unit-tested natively.
//!
//! Three operations:
//! - [`loss_curves`]: the four objectives evaluated on a one-parameter
//!   family of geometries (query swinging away from its positive), using
//!   the real loss code on a real tape.
//! - [`run_experiment`]: a miniature end-to-end run — generate, train,
//!   evaluate, collapse-analyze — sized for a browser tab, with the
//!   backbone pinned to 2 dimensions so embeddings plot on the unit circle.
//! - [`default_experiment_config`]: the knob defaults for the page to
//!   populate its form.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

use supmoco_core::analysis::{run_collapse_analysis, RetrievalSpec};
use supmoco_core::data::{
    generate_synthetic, mask_labels, AugmentationSpec, BatchMixing, ClassId, LabelFractions,
    Split, SplitFractions, SyntheticSpec,
};
use supmoco_core::encoder::{init_pair, EncoderConfig};
use supmoco_core::fewshot::{evaluate_split, EpisodeConfig, FinetuneConfig};
use supmoco_core::losses::{
    moco_loss, simclr_loss, supcon_loss, supmoco_loss, QueueOnTape, SimilarityConfig,
    SupmocoQuery,
};
use supmoco_core::queue::QueueSnapshot;
use supmoco_core::rng::SeededRng;
use supmoco_core::tape::Tape;
use supmoco_core::trainer::{LossVariant, TrainConfig, Trainer};

fn err_json(message: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": message.to_string() }).to_string()
}

#[derive(Serialize)]
struct LossCurves {
    angles_deg: Vec<f64>,
    supmoco: Vec<f64>,
    moco: Vec<f64>,
    supcon: Vec<f64>,
    simclr: Vec<f64>,
    /// In-batch variants see the distractors as adjacent view-pairs; this is
    /// how many of those pairs carry the query's class.
    same_class_pairs: usize,
}

/// Losses of all four objectives as the query rotates from 0° to 180° away
/// from its positive view, against `queue_size` distractors spread evenly
/// on the unit circle, `same_class` of which share the query's class.
///
/// Queue objectives treat the distractors as queue entries; in-batch
/// objectives treat them as batch mates paired up adjacently (a pair being
/// two views of one example, so pairs share a class and `same_class` rounds
/// down to whole pairs). Returns a JSON object, or `{"error": ...}`.
#[wasm_bindgen]
pub fn loss_curves(temperature: f64, queue_size: u32, same_class: u32) -> String {
    match loss_curves_impl(temperature, queue_size as usize, same_class as usize) {
        Ok(curves) => serde_json::to_string(&curves).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

fn circle(angle_deg: f64) -> Vec<f64> {
    let a = angle_deg.to_radians();
    vec![a.cos(), a.sin()]
}

fn loss_curves_impl(
    temperature: f64,
    queue_size: usize,
    same_class: usize,
) -> supmoco_core::Result<LossCurves> {
    let config = SimilarityConfig { temperature };
    config.validate()?;
    let queue_size = queue_size.clamp(2, 64);
    let same_class = same_class.min(queue_size);
    let pair_count = queue_size / 2;
    let same_class_pairs = same_class / 2;

    // Distractors at fixed angles, away from the 0° positive.
    let distractors: Vec<Vec<f64>> = (0..queue_size)
        .map(|j| circle(360.0 * (j as f64 + 0.5) / queue_size as f64))
        .collect();
    let query_class = ClassId(0);
    let queue_labels: Vec<Option<ClassId>> = (0..queue_size)
        .map(|j| {
            if j < same_class {
                Some(query_class)
            } else {
                Some(ClassId(1 + j as u32))
            }
        })
        .collect();
    let pair_labels: Vec<Option<ClassId>> = (0..pair_count)
        .map(|m| {
            if m < same_class_pairs {
                Some(query_class)
            } else {
                Some(ClassId(1 + m as u32))
            }
        })
        .collect();

    let mut curves = LossCurves {
        angles_deg: Vec::new(),
        supmoco: Vec::new(),
        moco: Vec::new(),
        supcon: Vec::new(),
        simclr: Vec::new(),
        same_class_pairs,
    };
    for step in 0..=90 {
        let angle = 2.0 * step as f64;
        curves.angles_deg.push(angle);
        let mut tape = Tape::new();
        let q = tape.vector_leaf(&circle(angle), true);
        let key = tape.vector_leaf(&circle(0.0), false);
        let queue = QueueOnTape::insert(
            &mut tape,
            &QueueSnapshot {
                embeddings: distractors.clone(),
                labels: queue_labels.clone(),
            },
        );

        let moco = moco_loss(&mut tape, q, key, &queue.ids, &config)?;
        curves.moco.push(tape.scalar_value(moco));

        let sup_query = SupmocoQuery {
            embedding: q,
            label: Some(query_class),
            keys: vec![key],
        };
        let (sup, _) = supmoco_loss(&mut tape, &sup_query, &queue, &config)?;
        curves.supmoco.push(tape.scalar_value(sup));

        // In-batch scene: the query/positive pair followed by the
        // distractors as adjacent pairs (dropping an odd leftover).
        let mut batch = vec![q, key];
        let mut labels = vec![Some(query_class), Some(query_class)];
        let mut pair_of = vec![1, 0];
        for m in 0..pair_count {
            let a = tape.vector_leaf(&distractors[2 * m], false);
            let b = tape.vector_leaf(&distractors[2 * m + 1], false);
            pair_of.push(batch.len() + 1);
            pair_of.push(batch.len());
            batch.push(a);
            batch.push(b);
            labels.push(pair_labels[m]);
            labels.push(pair_labels[m]);
        }
        let (simclr, _) = simclr_loss(&mut tape, &batch, &pair_of, &config)?;
        curves.simclr.push(tape.scalar_value(simclr));
        let (supcon, _) = supcon_loss(&mut tape, &batch, &labels, &pair_of, &config)?;
        curves.supcon.push(tape.scalar_value(supcon));
    }
    Ok(curves)
}

/// Knobs the page exposes. Values outside the documented ranges are clamped,
/// and the clamped values are echoed back in the result.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub seed: u64,
    pub variant: String,
    pub domains: u32,
    pub classes_per_domain: u32,
    pub samples_per_class: u32,
    pub labeled_fraction: f64,
    pub epochs: u32,
    pub steps_per_epoch: u32,
    pub batch_size: u32,
    pub positives: u32,
    pub temperature: f64,
    pub queue_capacity: u32,
    pub encoder_momentum: f64,
    pub peak_lr: f64,
    pub tasks_per_domain: u32,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            seed: 7,
            variant: "supmoco".to_string(),
            domains: 2,
            classes_per_domain: 8,
            samples_per_class: 16,
            labeled_fraction: 1.0,
            epochs: 10,
            steps_per_epoch: 12,
            batch_size: 8,
            positives: 3,
            temperature: 0.1,
            queue_capacity: 128,
            encoder_momentum: 0.99,
            peak_lr: 0.3,
            tasks_per_domain: 20,
        }
    }
}

impl DemoConfig {
    fn clamped(mut self) -> Self {
        self.domains = self.domains.clamp(1, 4);
        self.classes_per_domain = self.classes_per_domain.clamp(6, 12);
        self.samples_per_class = self.samples_per_class.clamp(12, 30);
        self.labeled_fraction = self.labeled_fraction.clamp(0.0, 1.0);
        self.epochs = self.epochs.clamp(1, 40);
        self.steps_per_epoch = self.steps_per_epoch.clamp(1, 40);
        self.batch_size = self.batch_size.clamp(2, 16);
        self.positives = self.positives.clamp(1, 4);
        self.temperature = self.temperature.clamp(0.01, 2.0);
        self.queue_capacity = self.queue_capacity.clamp(8, 512);
        self.encoder_momentum = self.encoder_momentum.clamp(0.0, 1.0);
        self.peak_lr = self.peak_lr.clamp(0.001, 1.0);
        self.tasks_per_domain = self.tasks_per_domain.clamp(1, 50);
        self
    }

    fn variant(&self) -> supmoco_core::Result<LossVariant> {
        match self.variant.as_str() {
            "supmoco" => Ok(LossVariant::SupMoco),
            "moco" => Ok(LossVariant::Moco),
            "supcon" => Ok(LossVariant::SupCon),
            "simclr" => Ok(LossVariant::SimClr),
            other => Err(supmoco_core::Error::Config {
                key: "variant".to_string(),
                message: format!("expected supmoco|moco|supcon|simclr, got `{other}`"),
            }),
        }
    }
}

#[derive(Serialize)]
struct HistoryPoint {
    step: usize,
    loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct EmbeddingPoint {
    x: f64,
    y: f64,
    domain: u32,
    class: u32,
    test: bool,
}

#[derive(Serialize)]
struct FewshotSummary {
    domain: u32,
    mean_accuracy: f64,
    ci95: f64,
}

#[derive(Serialize)]
struct CollapseSide {
    hist_same_test_class: Vec<usize>,
    frac_ge1_same_test_class: f64,
    frac_ge2_same_train_class: f64,
}

#[derive(Serialize)]
struct ExperimentOutput {
    config: DemoConfig,
    history: Vec<HistoryPoint>,
    embeddings: Vec<EmbeddingPoint>,
    fewshot: Vec<FewshotSummary>,
    collapse_trained: CollapseSide,
    collapse_random: CollapseSide,
}

/// Defaults for [`run_experiment`], as JSON.
#[wasm_bindgen]
pub fn default_experiment_config() -> String {
    serde_json::to_string(&DemoConfig::default()).unwrap_or_else(err_json)
}

/// Runs a miniature experiment described by `config_json` (any subset of
/// the keys in [`default_experiment_config`]) and returns the training
/// history, the 2-D backbone embedding of every example, per-domain
/// few-shot accuracy, and the collapse histograms of the trained encoder
/// next to a randomly initialized one. Returns `{"error": ...}` on any
/// failure, including unknown config keys.
#[wasm_bindgen]
pub fn run_experiment(config_json: &str) -> String {
    let config: DemoConfig = match serde_json::from_str(config_json) {
        Ok(c) => c,
        Err(e) => return err_json(format!("bad config: {e}")),
    };
    match run_experiment_impl(config.clamped()) {
        Ok(out) => serde_json::to_string(&out).unwrap_or_else(err_json),
        Err(e) => err_json(e),
    }
}

fn run_experiment_impl(config: DemoConfig) -> supmoco_core::Result<ExperimentOutput> {
    let spec = SyntheticSpec {
        domains: config.domains as usize,
        classes_per_domain: config.classes_per_domain as usize,
        samples_per_class: config.samples_per_class as usize,
        input_dim: 8,
        domain_offset_scale: 2.0,
        class_center_scale: 2.0,
        within_class_sigma: 0.5,
        splits: SplitFractions {
            train: 0.5,
            val: 0.0,
            test: 0.5,
        },
    };
    let root = SeededRng::new(config.seed);
    let mut dataset = generate_synthetic(&spec, &mut root.substream("data"))?;
    mask_labels(
        &mut dataset,
        &LabelFractions::uniform(config.labeled_fraction),
        &mut root.substream("mask"),
    )?;

    // A 2-D backbone so every embedding lands on the unit circle.
    let encoder_config = EncoderConfig {
        input_dim: 8,
        backbone_hidden: vec![16],
        backbone_out: 2,
        proj_hidden: 8,
        proj_out: 4,
    };
    let train_config = TrainConfig {
        epochs: config.epochs as usize,
        steps_per_epoch: config.steps_per_epoch as usize,
        batch_size: config.batch_size as usize,
        positives: config.positives as usize,
        temperature: config.temperature,
        queue_capacity: config.queue_capacity as usize,
        encoder_momentum: config.encoder_momentum,
        base_lr: config.peak_lr / 10.0,
        peak_lr: config.peak_lr,
        warmup_epochs: (config.epochs as usize / 5).max(1).min(config.epochs as usize),
        sgd_momentum: 0.9,
        weight_decay: 1e-4,
        seed: config.seed,
        mixing: BatchMixing::Impure,
        variant: config.variant()?,
        augment: AugmentationSpec {
            noise_sigma: 0.1,
            scale_jitter: (0.8, 1.2),
            dropout_prob: 0.1,
        },
    };
    let mut trainer = Trainer::new(&encoder_config, train_config)?;
    trainer.run_to_completion(&dataset)?;
    let history = trainer
        .history()
        .iter()
        .map(|r| HistoryPoint {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
        })
        .collect();

    let mut embeddings = Vec::with_capacity(dataset.examples().len());
    for ex in dataset.examples() {
        let e = trainer.pair.query.embed(&ex.features, false)?;
        embeddings.push(EmbeddingPoint {
            x: e[0],
            y: e[1],
            domain: ex.domain_id.0,
            class: ex.class_id.0,
            test: dataset.split_of(ex.class_id) == Some(Split::Test),
        });
    }

    let test_classes_per_domain = (config.classes_per_domain as usize).div_ceil(2);
    let episode_config = EpisodeConfig {
        ways: (2, 3.min(test_classes_per_domain)),
        shots: (1, 3),
        queries_per_class: 4,
        tasks_per_dataset: config.tasks_per_domain as usize,
    };
    let finetune_config = FinetuneConfig {
        epochs: 5,
        ..FinetuneConfig::default()
    };
    let (_, summaries) = evaluate_split(
        &dataset,
        Split::Test,
        &trainer.pair.query,
        &episode_config,
        &finetune_config,
        config.seed,
    )?;
    let fewshot = summaries
        .iter()
        .map(|s| FewshotSummary {
            domain: s.domain.0,
            mean_accuracy: s.mean_accuracy,
            ci95: s.ci95,
        })
        .collect();

    let per_class = (config.samples_per_class as usize).min(10);
    let retrieval = RetrievalSpec {
        per_class_samples: per_class,
        query_count: (test_classes_per_domain * config.domains as usize * per_class).min(60),
        k: 5,
    };
    let side = |params| -> supmoco_core::Result<CollapseSide> {
        let report = run_collapse_analysis(&dataset, params, &retrieval, config.seed)?;
        Ok(CollapseSide {
            hist_same_test_class: report.hist_same_test_class,
            frac_ge1_same_test_class: report.frac_ge1_same_test_class,
            frac_ge2_same_train_class: report.frac_ge2_same_train_class,
        })
    };
    let collapse_trained = side(&trainer.pair.query)?;
    let random_pair = init_pair(
        &encoder_config,
        0.99,
        &mut SeededRng::new(config.seed).substream("demo-random"),
    )?;
    let collapse_random = side(&random_pair.query)?;

    Ok(ExperimentOutput {
        config,
        history,
        embeddings,
        fewshot,
        collapse_trained,
        collapse_random,
    })
}
