//! Flat `section.key = value` experiment configuration.
//!
//! One struct carries every knob of the pipeline. Resolution is layered —
//! built-in defaults, then an optional config file, then `--set` overrides
//! in the order given, then `--seed` — and the fully resolved result can be
//! rendered back out as text. The echo uses shortest-roundtrip float
//! formatting, so feeding a run's echo back in reproduces the run exactly.
//!
//! Unknown keys are rejected by name, never ignored: a typo that silently
//! fell back to a default would poison every comparison built on top of it.

use std::path::Path;

use crate::data::{AugmentationSpec, BatchMixing, LabelFractions, SplitFractions, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fewshot::{EpisodeConfig, FinetuneConfig};
use crate::trainer::{LossVariant, TrainConfig};

/// Every setting of the laboratory, flattened. See `entries` for the full
/// key list and [`ExperimentConfig::default`] for the documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub data_domains: usize,
    pub data_classes_per_domain: usize,
    pub data_samples_per_class: usize,
    pub data_input_dim: usize,
    pub data_domain_offset_scale: f64,
    pub data_class_center_scale: f64,
    pub data_within_class_sigma: f64,
    pub data_train_fraction: f64,
    pub data_val_fraction: f64,
    pub data_test_fraction: f64,
    pub data_labeled_fraction: f64,

    pub augment_noise_sigma: f64,
    pub augment_scale_jitter_lo: f64,
    pub augment_scale_jitter_hi: f64,
    pub augment_dropout_prob: f64,

    pub encoder_backbone_hidden: Vec<usize>,
    pub encoder_backbone_out: usize,
    pub encoder_proj_hidden: usize,
    pub encoder_proj_out: usize,

    pub train_epochs: usize,
    pub train_steps_per_epoch: usize,
    pub train_batch_size: usize,
    pub train_positives: usize,
    pub train_temperature: f64,
    pub train_queue_capacity: usize,
    pub train_encoder_momentum: f64,
    pub train_base_lr: f64,
    pub train_peak_lr: f64,
    pub train_warmup_epochs: usize,
    pub train_sgd_momentum: f64,
    pub train_weight_decay: f64,
    pub train_mixing: BatchMixing,
    pub train_variant: LossVariant,

    pub episode_ways_min: usize,
    pub episode_ways_max: usize,
    pub episode_shots_min: usize,
    pub episode_shots_max: usize,
    pub episode_queries_per_class: usize,
    pub episode_tasks_per_dataset: usize,

    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    pub finetune_sgd_momentum: f64,
    pub finetune_weight_decay: f64,
    pub finetune_cosine_scale: f64,

    pub retrieval_per_class_samples: usize,
    pub retrieval_query_count: usize,
    pub retrieval_k: usize,

    pub io_dataset: String,
    pub io_checkpoint: String,
    pub io_history: String,
    pub io_results: String,
    pub io_collapse: String,
    pub io_report: String,

    /// Results files the report command aggregates (comma-separated in
    /// config text; paths may not contain commas).
    pub report_inputs: Vec<String>,
    /// Column names for the report; defaults to the input file stems.
    pub report_names: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,

            data_domains: 4,
            data_classes_per_domain: 16,
            data_samples_per_class: 25,
            data_input_dim: 16,
            data_domain_offset_scale: 2.0,
            data_class_center_scale: 2.0,
            data_within_class_sigma: 0.5,
            data_train_fraction: 0.5,
            data_val_fraction: 0.125,
            data_test_fraction: 0.375,
            data_labeled_fraction: 1.0,

            augment_noise_sigma: 0.1,
            augment_scale_jitter_lo: 0.8,
            augment_scale_jitter_hi: 1.2,
            augment_dropout_prob: 0.1,

            encoder_backbone_hidden: vec![32, 32],
            encoder_backbone_out: 16,
            encoder_proj_hidden: 16,
            encoder_proj_out: 8,

            train_epochs: 15,
            train_steps_per_epoch: 20,
            train_batch_size: 16,
            train_positives: 3,
            train_temperature: 0.1,
            train_queue_capacity: 256,
            train_encoder_momentum: 0.99,
            train_base_lr: 0.03,
            train_peak_lr: 0.3,
            train_warmup_epochs: 2,
            train_sgd_momentum: 0.9,
            train_weight_decay: 1e-4,
            train_mixing: BatchMixing::Impure,
            train_variant: LossVariant::SupMoco,

            episode_ways_min: 5,
            episode_ways_max: 5,
            episode_shots_min: 1,
            episode_shots_max: 5,
            episode_queries_per_class: 10,
            episode_tasks_per_dataset: 600,

            finetune_epochs: 50,
            finetune_lr: 0.001,
            finetune_batch_size: 64,
            finetune_sgd_momentum: 0.9,
            finetune_weight_decay: 1e-4,
            finetune_cosine_scale: 10.0,

            retrieval_per_class_samples: 20,
            retrieval_query_count: 200,
            retrieval_k: 9,

            io_dataset: "dataset.txt".to_string(),
            io_checkpoint: "checkpoint.bin".to_string(),
            io_history: "history.csv".to_string(),
            io_results: "results.csv".to_string(),
            io_collapse: "collapse.txt".to_string(),
            io_report: "report.txt".to_string(),

            report_inputs: Vec::new(),
            report_names: Vec::new(),
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("expected a non-negative integer, got `{value}`"),
    })
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("expected an unsigned integer, got `{value}`"),
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        message: format!("expected a number, got `{value}`"),
    })
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| parse_usize(key, p.trim()))
        .collect()
}

fn parse_string_list(value: &str) -> Vec<String> {
    if value.trim().is_empty() {
        return Vec::new();
    }
    value.split(',').map(|p| p.trim().to_string()).collect()
}

fn render_usize_list(list: &[usize]) -> String {
    list.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Sets one key. Unknown keys and malformed values are errors that name
    /// the key; nothing is ever silently ignored.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, value)?,

            "data.domains" => self.data_domains = parse_usize(key, value)?,
            "data.classes_per_domain" => self.data_classes_per_domain = parse_usize(key, value)?,
            "data.samples_per_class" => self.data_samples_per_class = parse_usize(key, value)?,
            "data.input_dim" => self.data_input_dim = parse_usize(key, value)?,
            "data.domain_offset_scale" => self.data_domain_offset_scale = parse_f64(key, value)?,
            "data.class_center_scale" => self.data_class_center_scale = parse_f64(key, value)?,
            "data.within_class_sigma" => self.data_within_class_sigma = parse_f64(key, value)?,
            "data.train_fraction" => self.data_train_fraction = parse_f64(key, value)?,
            "data.val_fraction" => self.data_val_fraction = parse_f64(key, value)?,
            "data.test_fraction" => self.data_test_fraction = parse_f64(key, value)?,
            "data.labeled_fraction" => self.data_labeled_fraction = parse_f64(key, value)?,

            "augment.noise_sigma" => self.augment_noise_sigma = parse_f64(key, value)?,
            "augment.scale_jitter_lo" => self.augment_scale_jitter_lo = parse_f64(key, value)?,
            "augment.scale_jitter_hi" => self.augment_scale_jitter_hi = parse_f64(key, value)?,
            "augment.dropout_prob" => self.augment_dropout_prob = parse_f64(key, value)?,

            "encoder.backbone_hidden" => {
                self.encoder_backbone_hidden = parse_usize_list(key, value)?
            }
            "encoder.backbone_out" => self.encoder_backbone_out = parse_usize(key, value)?,
            "encoder.proj_hidden" => self.encoder_proj_hidden = parse_usize(key, value)?,
            "encoder.proj_out" => self.encoder_proj_out = parse_usize(key, value)?,

            "train.epochs" => self.train_epochs = parse_usize(key, value)?,
            "train.steps_per_epoch" => self.train_steps_per_epoch = parse_usize(key, value)?,
            "train.batch_size" => self.train_batch_size = parse_usize(key, value)?,
            "train.positives" => self.train_positives = parse_usize(key, value)?,
            "train.temperature" => self.train_temperature = parse_f64(key, value)?,
            "train.queue_capacity" => self.train_queue_capacity = parse_usize(key, value)?,
            "train.encoder_momentum" => self.train_encoder_momentum = parse_f64(key, value)?,
            "train.base_lr" => self.train_base_lr = parse_f64(key, value)?,
            "train.peak_lr" => self.train_peak_lr = parse_f64(key, value)?,
            "train.warmup_epochs" => self.train_warmup_epochs = parse_usize(key, value)?,
            "train.sgd_momentum" => self.train_sgd_momentum = parse_f64(key, value)?,
            "train.weight_decay" => self.train_weight_decay = parse_f64(key, value)?,
            "train.mixing" => {
                self.train_mixing = match value {
                    "pure" => BatchMixing::Pure,
                    "impure" => BatchMixing::Impure,
                    _ => {
                        return Err(Error::Config {
                            key: key.to_string(),
                            message: format!("expected `pure` or `impure`, got `{value}`"),
                        })
                    }
                }
            }
            "train.variant" => {
                self.train_variant = match value {
                    "supmoco" => LossVariant::SupMoco,
                    "moco" => LossVariant::Moco,
                    "supcon" => LossVariant::SupCon,
                    "simclr" => LossVariant::SimClr,
                    _ => {
                        return Err(Error::Config {
                            key: key.to_string(),
                            message: format!(
                                "expected one of supmoco|moco|supcon|simclr, got `{value}`"
                            ),
                        })
                    }
                }
            }

            "episode.ways_min" => self.episode_ways_min = parse_usize(key, value)?,
            "episode.ways_max" => self.episode_ways_max = parse_usize(key, value)?,
            "episode.shots_min" => self.episode_shots_min = parse_usize(key, value)?,
            "episode.shots_max" => self.episode_shots_max = parse_usize(key, value)?,
            "episode.queries_per_class" => {
                self.episode_queries_per_class = parse_usize(key, value)?
            }
            "episode.tasks_per_dataset" => {
                self.episode_tasks_per_dataset = parse_usize(key, value)?
            }

            "finetune.epochs" => self.finetune_epochs = parse_usize(key, value)?,
            "finetune.lr" => self.finetune_lr = parse_f64(key, value)?,
            "finetune.batch_size" => self.finetune_batch_size = parse_usize(key, value)?,
            "finetune.sgd_momentum" => self.finetune_sgd_momentum = parse_f64(key, value)?,
            "finetune.weight_decay" => self.finetune_weight_decay = parse_f64(key, value)?,
            "finetune.cosine_scale" => self.finetune_cosine_scale = parse_f64(key, value)?,

            "retrieval.per_class_samples" => {
                self.retrieval_per_class_samples = parse_usize(key, value)?
            }
            "retrieval.query_count" => self.retrieval_query_count = parse_usize(key, value)?,
            "retrieval.k" => self.retrieval_k = parse_usize(key, value)?,

            "io.dataset" => self.io_dataset = value.to_string(),
            "io.checkpoint" => self.io_checkpoint = value.to_string(),
            "io.history" => self.io_history = value.to_string(),
            "io.results" => self.io_results = value.to_string(),
            "io.collapse" => self.io_collapse = value.to_string(),
            "io.report" => self.io_report = value.to_string(),

            "report.inputs" => self.report_inputs = parse_string_list(value),
            "report.names" => self.report_names = parse_string_list(value),

            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown key".to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order. This is both
    /// the echo and the authoritative key list.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("data.domains", self.data_domains.to_string()),
            ("data.classes_per_domain", self.data_classes_per_domain.to_string()),
            ("data.samples_per_class", self.data_samples_per_class.to_string()),
            ("data.input_dim", self.data_input_dim.to_string()),
            ("data.domain_offset_scale", self.data_domain_offset_scale.to_string()),
            ("data.class_center_scale", self.data_class_center_scale.to_string()),
            ("data.within_class_sigma", self.data_within_class_sigma.to_string()),
            ("data.train_fraction", self.data_train_fraction.to_string()),
            ("data.val_fraction", self.data_val_fraction.to_string()),
            ("data.test_fraction", self.data_test_fraction.to_string()),
            ("data.labeled_fraction", self.data_labeled_fraction.to_string()),
            ("augment.noise_sigma", self.augment_noise_sigma.to_string()),
            ("augment.scale_jitter_lo", self.augment_scale_jitter_lo.to_string()),
            ("augment.scale_jitter_hi", self.augment_scale_jitter_hi.to_string()),
            ("augment.dropout_prob", self.augment_dropout_prob.to_string()),
            ("encoder.backbone_hidden", render_usize_list(&self.encoder_backbone_hidden)),
            ("encoder.backbone_out", self.encoder_backbone_out.to_string()),
            ("encoder.proj_hidden", self.encoder_proj_hidden.to_string()),
            ("encoder.proj_out", self.encoder_proj_out.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.steps_per_epoch", self.train_steps_per_epoch.to_string()),
            ("train.batch_size", self.train_batch_size.to_string()),
            ("train.positives", self.train_positives.to_string()),
            ("train.temperature", self.train_temperature.to_string()),
            ("train.queue_capacity", self.train_queue_capacity.to_string()),
            ("train.encoder_momentum", self.train_encoder_momentum.to_string()),
            ("train.base_lr", self.train_base_lr.to_string()),
            ("train.peak_lr", self.train_peak_lr.to_string()),
            ("train.warmup_epochs", self.train_warmup_epochs.to_string()),
            ("train.sgd_momentum", self.train_sgd_momentum.to_string()),
            ("train.weight_decay", self.train_weight_decay.to_string()),
            (
                "train.mixing",
                match self.train_mixing {
                    BatchMixing::Pure => "pure",
                    BatchMixing::Impure => "impure",
                }
                .to_string(),
            ),
            ("train.variant", self.train_variant.name().to_string()),
            ("episode.ways_min", self.episode_ways_min.to_string()),
            ("episode.ways_max", self.episode_ways_max.to_string()),
            ("episode.shots_min", self.episode_shots_min.to_string()),
            ("episode.shots_max", self.episode_shots_max.to_string()),
            ("episode.queries_per_class", self.episode_queries_per_class.to_string()),
            ("episode.tasks_per_dataset", self.episode_tasks_per_dataset.to_string()),
            ("finetune.epochs", self.finetune_epochs.to_string()),
            ("finetune.lr", self.finetune_lr.to_string()),
            ("finetune.batch_size", self.finetune_batch_size.to_string()),
            ("finetune.sgd_momentum", self.finetune_sgd_momentum.to_string()),
            ("finetune.weight_decay", self.finetune_weight_decay.to_string()),
            ("finetune.cosine_scale", self.finetune_cosine_scale.to_string()),
            ("retrieval.per_class_samples", self.retrieval_per_class_samples.to_string()),
            ("retrieval.query_count", self.retrieval_query_count.to_string()),
            ("retrieval.k", self.retrieval_k.to_string()),
            ("io.dataset", self.io_dataset.clone()),
            ("io.checkpoint", self.io_checkpoint.clone()),
            ("io.history", self.io_history.clone()),
            ("io.results", self.io_results.clone()),
            ("io.collapse", self.io_collapse.clone()),
            ("io.report", self.io_report.clone()),
            ("report.inputs", self.report_inputs.join(",")),
            ("report.names", self.report_names.join(",")),
        ]
    }

    /// The canonical `key = value` echo, one line per key.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// skipped; anything else must parse or the whole call fails.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: format!("line {}", lineno + 1),
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        self.apply_str(&text)
    }

    /// Full layering: defaults, then the optional file, then `--set` pairs
    /// in order, then `--seed`.
    pub fn resolve(
        file: Option<&Path>,
        sets: &[(String, String)],
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        for (k, v) in sets {
            config.set(k, v)?;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(config)
    }

    // ---- views onto the module-level config types ----

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            domains: self.data_domains,
            classes_per_domain: self.data_classes_per_domain,
            samples_per_class: self.data_samples_per_class,
            input_dim: self.data_input_dim,
            domain_offset_scale: self.data_domain_offset_scale,
            class_center_scale: self.data_class_center_scale,
            within_class_sigma: self.data_within_class_sigma,
            splits: self.split_fractions(),
        }
    }

    pub fn split_fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.data_train_fraction,
            val: self.data_val_fraction,
            test: self.data_test_fraction,
        }
    }

    pub fn label_fractions(&self) -> LabelFractions {
        LabelFractions::uniform(self.data_labeled_fraction)
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            noise_sigma: self.augment_noise_sigma,
            scale_jitter: (self.augment_scale_jitter_lo, self.augment_scale_jitter_hi),
            dropout_prob: self.augment_dropout_prob,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.data_input_dim,
            backbone_hidden: self.encoder_backbone_hidden.clone(),
            backbone_out: self.encoder_backbone_out,
            proj_hidden: self.encoder_proj_hidden,
            proj_out: self.encoder_proj_out,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            steps_per_epoch: self.train_steps_per_epoch,
            batch_size: self.train_batch_size,
            positives: self.train_positives,
            temperature: self.train_temperature,
            queue_capacity: self.train_queue_capacity,
            encoder_momentum: self.train_encoder_momentum,
            base_lr: self.train_base_lr,
            peak_lr: self.train_peak_lr,
            warmup_epochs: self.train_warmup_epochs,
            sgd_momentum: self.train_sgd_momentum,
            weight_decay: self.train_weight_decay,
            seed: self.seed,
            mixing: self.train_mixing,
            variant: self.train_variant,
            augment: self.augmentation(),
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            ways: (self.episode_ways_min, self.episode_ways_max),
            shots: (self.episode_shots_min, self.episode_shots_max),
            queries_per_class: self.episode_queries_per_class,
            tasks_per_dataset: self.episode_tasks_per_dataset,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            batch_size: self.finetune_batch_size,
            sgd_momentum: self.finetune_sgd_momentum,
            weight_decay: self.finetune_weight_decay,
            cosine_scale: self.finetune_cosine_scale,
        }
    }

    pub fn retrieval_spec(&self) -> crate::analysis::RetrievalSpec {
        crate::analysis::RetrievalSpec {
            per_class_samples: self.retrieval_per_class_samples,
            query_count: self.retrieval_query_count,
            k: self.retrieval_k,
        }
    }
}
