//! The five experiment commands and their on-disk artifacts.
//!
//! GENERATE writes a dataset, TRAIN a checkpoint plus loss history, EVAL a
//! few-shot results file, ANALYZE a collapse report, REPORT a comparison
//! table over several results files. Every command also writes its fully
//! resolved config next to its outputs (`config.<command>.txt`), so any
//! artifact can be traced to — and regenerated from — the exact settings
//! that produced it.
//!
//! Randomness never flows between commands through hidden state: each one
//! re-derives its substreams from the config seed, and TRAIN re-derives the
//! split assignment the same way GENERATE did, so a dataset file plus its
//! config echo fully determine every downstream artifact.

use std::path::{Path, PathBuf};

use crate::analysis::run_collapse_analysis;
use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, mask_labels, read_text, write_text, Dataset, Split};
use crate::error::{Error, Result};
use crate::fewshot::{average_rank, evaluate_split};
use crate::rng::SeededRng;
use crate::trainer::Trainer;

/// The operator-facing verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Eval,
    Analyze,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::Report => "report",
        }
    }
}

fn artifact_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(name)
}

fn write_artifact(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn write_echo(
    command: Command,
    config: &ExperimentConfig,
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let path = artifact_path(out_dir, &format!("config.{}.txt", command.name()));
    write_artifact(&path, &config.render())?;
    written.push(path);
    Ok(())
}

/// Loads the dataset artifact and reassigns splits exactly as GENERATE did:
/// the split stream is derived from the seed alone, so the same seed and
/// fractions always rebuild the same train/val/test partition.
fn load_dataset(config: &ExperimentConfig, out_dir: &Path) -> Result<Dataset> {
    let path = artifact_path(out_dir, &config.io_dataset);
    let (input_dim, examples) = read_text(&path)?;
    let mut split_rng = SeededRng::new(config.seed)
        .substream("data")
        .substream("splits");
    Dataset::from_examples(input_dim, examples, &config.split_fractions(), &mut split_rng)
}

fn run_generate(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let root = SeededRng::new(config.seed);
    let mut dataset = generate_synthetic(&config.synthetic_spec(), &mut root.substream("data"))?;
    mask_labels(&mut dataset, &config.label_fractions(), &mut root.substream("mask"))?;
    let path = artifact_path(out_dir, &config.io_dataset);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_text(&dataset, &path)?;
    let mut written = vec![path];
    write_echo(Command::Generate, config, out_dir, &mut written)?;
    Ok(written)
}

fn run_train(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dataset = load_dataset(config, out_dir)?;
    let mut trainer = Trainer::new(&config.encoder_config(), config.train_config())?;
    trainer.run_to_completion(&dataset)?;

    let checkpoint_path = artifact_path(out_dir, &config.io_checkpoint);
    if let Some(parent) = checkpoint_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    trainer.save_checkpoint(&checkpoint_path)?;

    let mut history = String::from("step,loss,lr,queue_fill\n");
    for r in trainer.history() {
        history.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, r.queue_fill));
    }
    let history_path = artifact_path(out_dir, &config.io_history);
    write_artifact(&history_path, &history)?;

    let mut written = vec![checkpoint_path, history_path];
    write_echo(Command::Train, config, out_dir, &mut written)?;
    Ok(written)
}

fn run_eval(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dataset = load_dataset(config, out_dir)?;
    let trainer = Trainer::load_checkpoint(&artifact_path(out_dir, &config.io_checkpoint))?;
    let (tasks, summaries) = evaluate_split(
        &dataset,
        Split::Test,
        &trainer.pair.query,
        &config.episode_config(),
        &config.finetune_config(),
        config.seed,
    )?;

    let mut out = String::from("dataset,task_index,ways,total_shots,accuracy\n");
    for t in &tasks {
        out.push_str(&format!(
            "domain{},{},{},{},{}\n",
            t.domain.0, t.task_index, t.ways, t.total_shots, t.accuracy
        ));
    }
    for s in &summaries {
        out.push_str(&format!(
            "summary,domain{},{},{}\n",
            s.domain.0, s.mean_accuracy, s.ci95
        ));
    }
    let results_path = artifact_path(out_dir, &config.io_results);
    write_artifact(&results_path, &out)?;

    let mut written = vec![results_path];
    write_echo(Command::Eval, config, out_dir, &mut written)?;
    Ok(written)
}

fn run_analyze(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dataset = load_dataset(config, out_dir)?;
    let trainer = Trainer::load_checkpoint(&artifact_path(out_dir, &config.io_checkpoint))?;
    let report = run_collapse_analysis(
        &dataset,
        &trainer.pair.query,
        &config.retrieval_spec(),
        config.seed,
    )?;
    let collapse_path = artifact_path(out_dir, &config.io_collapse);
    write_artifact(&collapse_path, &report.render_text())?;
    let mut written = vec![collapse_path];
    write_echo(Command::Analyze, config, out_dir, &mut written)?;
    Ok(written)
}

/// The per-domain summary rows of one results file, in file order.
fn parse_summaries(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.first() != Some(&"summary") {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: summary rows need 4 fields", lineno + 1),
            });
        }
        let parse = |v: &str, what: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: bad {what} `{v}`", lineno + 1),
            })
        };
        out.push((
            fields[1].to_string(),
            parse(fields[2], "mean")?,
            parse(fields[3], "ci")?,
        ));
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no summary rows found; is this an EVAL results file?".to_string(),
        });
    }
    Ok(out)
}

fn run_report(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if config.report_inputs.is_empty() {
        return Err(Error::Config {
            key: "report.inputs".to_string(),
            message: "must name at least one results file".to_string(),
        });
    }
    let names: Vec<String> = if config.report_names.is_empty() {
        config
            .report_inputs
            .iter()
            .map(|p| {
                Path::new(p)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.clone())
            })
            .collect()
    } else if config.report_names.len() == config.report_inputs.len() {
        config.report_names.clone()
    } else {
        return Err(Error::Config {
            key: "report.names".to_string(),
            message: format!(
                "{} names for {} inputs",
                config.report_names.len(),
                config.report_inputs.len()
            ),
        });
    };

    let mut per_method = Vec::new();
    for input in &config.report_inputs {
        per_method.push(parse_summaries(&artifact_path(out_dir, input))?);
    }
    let datasets: Vec<String> = per_method[0].iter().map(|(d, _, _)| d.clone()).collect();
    for (input, rows) in config.report_inputs.iter().zip(&per_method) {
        let got: Vec<String> = rows.iter().map(|(d, _, _)| d.clone()).collect();
        if got != datasets {
            return Err(Error::contract(format!(
                "results files disagree on datasets: {} has {:?}, {} has {:?}",
                config.report_inputs[0], datasets, input, got
            )));
        }
    }

    let scores: Vec<Vec<f64>> = per_method
        .iter()
        .map(|rows| rows.iter().map(|&(_, mean, _)| mean).collect())
        .collect();
    let ranks = average_rank(&scores)?;

    let mut out = String::from("dataset");
    for name in &names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (d, dataset) in datasets.iter().enumerate() {
        out.push_str(dataset);
        for rows in &per_method {
            let (_, mean, ci) = &rows[d];
            out.push_str(&format!(",{mean}±{ci}"));
        }
        out.push('\n');
    }
    out.push_str("average_rank");
    for r in &ranks {
        out.push_str(&format!(",{r}"));
    }
    out.push('\n');

    let report_path = artifact_path(out_dir, &config.io_report);
    write_artifact(&report_path, &out)?;
    let mut written = vec![report_path];
    write_echo(Command::Report, config, out_dir, &mut written)?;
    Ok(written)
}

/// Runs one command, returning every artifact path it wrote. Any error
/// means at least one requested artifact is missing, and the caller should
/// exit nonzero.
pub fn run_command(
    command: Command,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    match command {
        Command::Generate => run_generate(config, out_dir),
        Command::Train => run_train(config, out_dir),
        Command::Eval => run_eval(config, out_dir),
        Command::Analyze => run_analyze(config, out_dir),
        Command::Report => run_report(config, out_dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A configuration small enough to run the whole pipeline in seconds.
    fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        for (k, v) in [
            ("seed", "11"),
            ("data.domains", "2"),
            ("data.classes_per_domain", "8"),
            ("data.samples_per_class", "12"),
            ("data.input_dim", "6"),
            ("data.train_fraction", "0.5"),
            ("data.val_fraction", "0"),
            ("data.test_fraction", "0.5"),
            ("encoder.backbone_hidden", "10"),
            ("encoder.backbone_out", "8"),
            ("encoder.proj_hidden", "8"),
            ("encoder.proj_out", "4"),
            ("train.epochs", "2"),
            ("train.steps_per_epoch", "5"),
            ("train.batch_size", "6"),
            ("train.queue_capacity", "32"),
            ("train.warmup_epochs", "1"),
            ("episode.ways_min", "3"),
            ("episode.ways_max", "3"),
            ("episode.queries_per_class", "4"),
            ("episode.tasks_per_dataset", "4"),
            ("finetune.epochs", "2"),
            ("retrieval.per_class_samples", "8"),
            ("retrieval.query_count", "20"),
            ("retrieval.k", "5"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn full_pipeline_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let config = tiny_config();

        let generated = run_command(Command::Generate, &config, out).unwrap();
        assert!(generated.iter().all(|p| p.exists()));
        assert!(out.join("dataset.txt").exists());
        assert!(out.join("config.generate.txt").exists());

        let trained = run_command(Command::Train, &config, out).unwrap();
        assert!(trained.iter().all(|p| p.exists()));
        let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
        assert!(history.starts_with("step,loss,lr,queue_fill\n"));
        assert_eq!(history.lines().count(), 1 + 10, "header plus one line per step");

        let evaluated = run_command(Command::Eval, &config, out).unwrap();
        assert!(evaluated.iter().all(|p| p.exists()));
        let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
        assert!(results.starts_with("dataset,task_index,ways,total_shots,accuracy\n"));
        let summaries: Vec<&str> = results
            .lines()
            .filter(|l| l.starts_with("summary,"))
            .collect();
        assert_eq!(summaries.len(), 2, "one summary per domain: {summaries:?}");

        let analyzed = run_command(Command::Analyze, &config, out).unwrap();
        assert!(analyzed.iter().all(|p| p.exists()));
        let collapse = std::fs::read_to_string(out.join("collapse.txt")).unwrap();
        assert!(collapse.starts_with("k=5 queries=20\n"));

        // Report over the same results twice: a perfect tie.
        let mut report_config = config.clone();
        report_config
            .set("report.inputs", "results.csv,results.csv")
            .unwrap();
        report_config.set("report.names", "a,b").unwrap();
        run_command(Command::Report, &report_config, out).unwrap();
        let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
        assert!(report.starts_with("dataset,a,b\n"));
        assert!(report.ends_with("average_rank,1.5,1.5\n"), "{report}");
    }

    #[test]
    fn eval_and_analyze_without_checkpoint_fail_with_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        run_command(Command::Generate, &config, dir.path()).unwrap();
        for command in [Command::Eval, Command::Analyze] {
            let err = run_command(command, &config, dir.path()).unwrap_err();
            assert!(matches!(err, Error::MissingArtifact(_)), "{command:?}: {err}");
        }
    }

    #[test]
    fn train_without_dataset_fails_with_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_command(Command::Train, &tiny_config(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn report_ranks_a_dominating_method_first() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("strong.csv"),
            "dataset,task_index,ways,total_shots,accuracy\nsummary,domain0,0.9,0.01\nsummary,domain1,0.8,0.01\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("weak.csv"),
            "dataset,task_index,ways,total_shots,accuracy\nsummary,domain0,0.7,0.01\nsummary,domain1,0.6,0.01\n",
        )
        .unwrap();
        let mut config = ExperimentConfig::default();
        config.set("report.inputs", "strong.csv,weak.csv").unwrap();
        run_command(Command::Report, &config, dir.path()).unwrap();
        let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(report.starts_with("dataset,strong,weak\n"), "{report}");
        assert!(report.contains("domain0,0.9±0.01,0.7±0.01\n"));
        assert!(report.ends_with("average_rank,1,2\n"), "{report}");
    }

    #[test]
    fn report_rejects_mismatched_domains_and_empty_inputs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "summary,domain0,0.9,0.01\n").unwrap();
        std::fs::write(dir.path().join("b.csv"), "summary,domain9,0.7,0.01\n").unwrap();
        let mut config = ExperimentConfig::default();
        config.set("report.inputs", "a.csv,b.csv").unwrap();
        let err = run_command(Command::Report, &config, dir.path()).unwrap_err();
        assert!(err.to_string().contains("disagree"), "{err}");

        let empty = ExperimentConfig::default();
        let err = run_command(Command::Report, &empty, dir.path()).unwrap_err();
        assert!(err.to_string().contains("report.inputs"), "{err}");

        let mut headerless = ExperimentConfig::default();
        headerless.set("report.inputs", "missing.csv").unwrap();
        let err = run_command(Command::Report, &headerless, dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn generate_is_byte_deterministic_across_directories() {
        let config = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_command(Command::Generate, &config, d1.path()).unwrap();
        run_command(Command::Generate, &config, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("dataset.txt")).unwrap();
        let b = std::fs::read(d2.path().join("dataset.txt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn semi_supervised_generate_masks_labels_deterministically() {
        let mut config = tiny_config();
        config.set("data.labeled_fraction", "0.5").unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_command(Command::Generate, &config, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("dataset.txt")).unwrap();
        let unlabeled = text.lines().filter(|l| l.contains(",0,")).count();
        // 8 classes/domain x 2 domains x 12 samples, half masked per class.
        let labeled = text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(2) == Some("1"))
            .count();
        assert_eq!(labeled, 2 * 8 * 6, "ceil(0.5 * 12) = 6 labeled per class");
        assert!(unlabeled > 0);
    }
}
