//! Few-shot evaluation: episodic sampling, prototype classifiers, and a
//! short cosine-classifier finetune on the support set.
//!
//! An episode draws `ways` unseen classes from one domain's split, a
//! variable number of support shots per class, and a fixed query set per
//! class. Evaluation embeds everything with the backbone (the projection
//! head is training apparatus and is discarded here), builds class
//! prototypes from the support embeddings, optionally finetunes the
//! backbone plus a prototype-initialized cosine classifier on the support
//! set, and scores query accuracy.
//!
//! Queries are classified one at a time against the finished classifier —
//! nothing about the query set can leak into the classifier, so the
//! protocol is non-transductive by construction.
//!
//! Every task draws its randomness from a dedicated substream keyed by
//! domain and task index, so task t of domain d is the same episode no
//! matter how many other domains or tasks ran before it.

use crate::data::{ClassId, Dataset, DomainId, Split};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::{l2_normalize, Tensor};

/// Shape of the episodic protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    /// Inclusive range the way count is drawn from (clamped to the classes
    /// the domain actually has).
    pub ways: (usize, usize),
    /// Inclusive range each class's support-shot count is drawn from
    /// (clamped so the query set still fits).
    pub shots: (usize, usize),
    /// Query examples held out per class.
    pub queries_per_class: usize,
    /// Episodes per evaluated domain.
    pub tasks_per_dataset: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ways: (5, 5),
            shots: (1, 5),
            queries_per_class: 10,
            tasks_per_dataset: 600,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways.0 < 2 || self.ways.1 < self.ways.0 {
            return Err(Error::contract(format!(
                "episode ways range ({}, {}) must satisfy 2 <= lo <= hi",
                self.ways.0, self.ways.1
            )));
        }
        if self.shots.0 < 1 || self.shots.1 < self.shots.0 {
            return Err(Error::contract(format!(
                "episode shots range ({}, {}) must satisfy 1 <= lo <= hi",
                self.shots.0, self.shots.1
            )));
        }
        if self.queries_per_class == 0 || self.tasks_per_dataset == 0 {
            return Err(Error::contract(
                "queries_per_class and tasks_per_dataset must be positive",
            ));
        }
        Ok(())
    }
}

/// Finetuning hyperparameters. `epochs = 0` means pure prototype
/// classification with the encoder left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Inverse-temperature multiplier on the cosine logits.
    pub cosine_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            lr: 0.001,
            batch_size: 64,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            cosine_scale: 10.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract(format!("finetune lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("finetune batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::contract(format!(
                "finetune sgd_momentum must be in [0, 1), got {}",
                self.sgd_momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::contract(format!(
                "finetune weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.cosine_scale.is_finite() && self.cosine_scale > 0.0) {
            return Err(Error::contract(format!(
                "cosine_scale must be positive, got {}",
                self.cosine_scale
            )));
        }
        Ok(())
    }
}

/// One sampled task. Labels are episode-local class positions in
/// `class_ids` order, which is the draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub domain: DomainId,
    pub class_ids: Vec<ClassId>,
    pub shots_per_class: Vec<usize>,
    /// (features, episode-local label).
    pub support: Vec<(Vec<f64>, usize)>,
    pub query: Vec<(Vec<f64>, usize)>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_ids.len()
    }

    pub fn total_shots(&self) -> usize {
        self.shots_per_class.iter().sum()
    }
}

/// Draws one episode from `domain`'s portion of `split`.
///
/// Every class in the pool must keep `queries_per_class` examples aside and
/// still have at least one support candidate; thinner classes are a contract
/// error rather than a silent skip.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    domain: DomainId,
    config: &EpisodeConfig,
    rng: &mut SeededRng,
) -> Result<Episode> {
    config.validate()?;
    let classes: Vec<ClassId> = dataset
        .classes_in_split(split)
        .into_iter()
        .filter(|c| dataset.domain_of(*c) == Some(domain))
        .collect();
    if classes.len() < config.ways.0 {
        return Err(Error::contract(format!(
            "domain {} has {} classes in {split:?}, need at least {}",
            domain.0,
            classes.len(),
            config.ways.0
        )));
    }
    let ways_hi = config.ways.1.min(classes.len());
    let ways = rng.range_inclusive(config.ways.0, ways_hi);
    let chosen: Vec<ClassId> = rng
        .distinct_below(classes.len(), ways)
        .into_iter()
        .map(|i| classes[i])
        .collect();

    let mut shots_per_class = Vec::with_capacity(ways);
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (pos, &class_id) in chosen.iter().enumerate() {
        let members = dataset.examples_of_class(class_id);
        let available = members.len();
        if available < config.queries_per_class + 1 {
            return Err(Error::contract(format!(
                "class {} has {available} examples, need {} queries plus a support shot",
                class_id.0, config.queries_per_class
            )));
        }
        let shots_hi = config.shots.1.min(available - config.queries_per_class);
        let shots_lo = config.shots.0.min(shots_hi);
        let shots = rng.range_inclusive(shots_lo, shots_hi);
        shots_per_class.push(shots);
        let picked = rng.distinct_below(available, shots + config.queries_per_class);
        for (k, &member_pos) in picked.iter().enumerate() {
            let features = dataset.examples()[members[member_pos]].features.clone();
            if k < shots {
                support.push((features, pos));
            } else {
                query.push((features, pos));
            }
        }
    }
    Ok(Episode {
        domain,
        class_ids: chosen,
        shots_per_class,
        support,
        query,
    })
}

/// Unit-norm class prototypes: the renormalized mean of each class's
/// support embeddings. `labels[i]` is the episode-local class of
/// `embeddings[i]`.
pub fn prototypes(embeddings: &[Vec<f64>], labels: &[usize], ways: usize) -> Result<Vec<Vec<f64>>> {
    if embeddings.len() != labels.len() {
        return Err(Error::contract(format!(
            "prototypes got {} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.is_empty() {
        return Err(Error::contract("prototypes need at least one embedding"));
    }
    let dim = embeddings[0].len();
    let mut sums = vec![vec![0.0; dim]; ways];
    let mut counts = vec![0usize; ways];
    for (e, &l) in embeddings.iter().zip(labels) {
        if l >= ways {
            return Err(Error::contract(format!("label {l} out of range for {ways} ways")));
        }
        if e.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "prototypes",
                expected: format!("dim {dim}"),
                got: format!("{}", e.len()),
            });
        }
        for (s, v) in sums[l].iter_mut().zip(e) {
            *s += v;
        }
        counts[l] += 1;
    }
    let mut out = Vec::with_capacity(ways);
    for (class, (mut s, n)) in sums.into_iter().zip(counts).enumerate() {
        if n == 0 {
            return Err(Error::contract(format!("class {class} has no support embeddings")));
        }
        for v in &mut s {
            *v /= n as f64;
        }
        out.push(l2_normalize(&s)?);
    }
    Ok(out)
}

/// Scaled cosine scores of one embedding against every classifier row.
/// Inputs are unit vectors, so the dot product is the cosine.
pub fn cosine_logits(embedding: &[f64], rows: &[Vec<f64>], scale: f64) -> Result<Vec<f64>> {
    rows.iter()
        .map(|w| {
            if w.len() != embedding.len() {
                return Err(Error::ShapeMismatch {
                    context: "cosine_logits",
                    expected: format!("dim {}", embedding.len()),
                    got: format!("{}", w.len()),
                });
            }
            Ok(scale * embedding.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect()
}

/// Index of the winning class; ties go to the lower index.
pub fn classify(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn backbone_embeddings(params: &EncoderParams, features: &[(Vec<f64>, usize)]) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .map(|(f, _)| params.embed(f, false))
        .collect()
}

/// Accuracy of the pure prototype classifier on the episode's queries.
pub fn prototype_accuracy(
    params: &EncoderParams,
    episode: &Episode,
    cosine_scale: f64,
) -> Result<f64> {
    let support = backbone_embeddings(params, &episode.support)?;
    let labels: Vec<usize> = episode.support.iter().map(|(_, l)| *l).collect();
    let rows = prototypes(&support, &labels, episode.ways())?;
    let mut correct = 0usize;
    for (features, label) in &episode.query {
        let e = params.embed(features, false)?;
        let logits = cosine_logits(&e, &rows, cosine_scale)?;
        if classify(&logits) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Finetunes a copy of the backbone together with a prototype-initialized
/// cosine classifier on the support set, then scores the queries.
///
/// The support set is consumed in fixed chunks of `batch_size` per epoch
/// (at this scale the whole support set fits one chunk, making each epoch a
/// full-batch step); classifier rows are renormalized onto the unit sphere
/// after every update. Returns the accuracy.
pub fn finetune_and_eval(
    params: &EncoderParams,
    episode: &Episode,
    config: &FinetuneConfig,
) -> Result<f64> {
    config.validate()?;
    if episode.support.is_empty() || episode.query.is_empty() {
        return Err(Error::contract("episode has an empty support or query set"));
    }
    if config.epochs == 0 {
        return prototype_accuracy(params, episode, config.cosine_scale);
    }

    let mut tuned = params.clone();
    let support_emb = backbone_embeddings(&tuned, &episode.support)?;
    let labels: Vec<usize> = episode.support.iter().map(|(_, l)| *l).collect();
    let mut rows: Vec<Tensor> = prototypes(&support_emb, &labels, episode.ways())?
        .into_iter()
        .map(Tensor::vector)
        .collect();

    let tensor_count = tuned.backbone_tensors_mut().len() + rows.len();
    let mut optimizer = crate::trainer::SgdState {
        buffers: Vec::with_capacity(tensor_count),
    };
    for t in tuned.backbone_tensors_mut() {
        optimizer.buffers.push(vec![0.0; t.len()]);
    }
    for r in &rows {
        optimizer.buffers.push(vec![0.0; r.len()]);
    }

    for _ in 0..config.epochs {
        for chunk in episode.support.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = tuned.bind(&mut tape, true, false)?;
            let row_ids: Vec<_> = rows
                .iter()
                .map(|r| tape.vector_leaf(r.values(), true))
                .collect();
            let mut losses = Vec::with_capacity(chunk.len());
            for (features, label) in chunk {
                let e = bound.embed(&mut tape, features, false)?;
                let logits: Vec<_> = row_ids
                    .iter()
                    .map(|&w| {
                        let d = tape.dot(e, w)?;
                        Ok(tape.scale(d, config.cosine_scale))
                    })
                    .collect::<Result<_>>()?;
                let stacked = tape.stack(&logits)?;
                let lse = tape.log_sum_exp(stacked)?;
                losses.push(tape.sub(lse, logits[*label])?);
            }
            let loss = tape.mean(&losses)?;
            tape.backward(loss)?;

            let mut ids = bound.param_ids();
            ids.extend(&row_ids);
            let mut tensors = tuned.backbone_tensors_mut();
            tensors.extend(rows.iter_mut());
            for (t, id) in tensors.iter_mut().zip(&ids) {
                let g = tape
                    .grad(*id)
                    .expect("trainable leaves always receive a gradient")
                    .to_vec();
                t.set_grad(g)?;
            }
            crate::trainer::sgd_step(
                &mut tensors,
                &mut optimizer,
                config.lr,
                config.sgd_momentum,
                config.weight_decay,
            )?;
            for r in &mut rows {
                let unit = l2_normalize(r.values())?;
                r.values_mut().copy_from_slice(&unit);
            }
        }
    }

    let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.values().to_vec()).collect();
    let mut correct = 0usize;
    for (features, label) in &episode.query {
        let e = tuned.embed(features, false)?;
        let logits = cosine_logits(&e, &rows, config.cosine_scale)?;
        if classify(&logits) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.query.len() as f64)
}

/// One evaluated task, in the shape the results file wants.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub domain: DomainId,
    pub task_index: usize,
    pub ways: usize,
    pub total_shots: usize,
    pub accuracy: f64,
}

/// Per-domain aggregate over its tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSummary {
    pub domain: DomainId,
    pub tasks: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
}

/// Runs the full protocol: for every domain with classes in `split`, samples
/// `tasks_per_dataset` episodes and evaluates each with [`finetune_and_eval`].
///
/// Task t of domain d uses the substream `eval/<d>/<t>` of `seed`, so its
/// episode is independent of evaluation order and of every other task.
pub fn evaluate_split(
    dataset: &Dataset,
    split: Split,
    params: &EncoderParams,
    episode_config: &EpisodeConfig,
    finetune_config: &FinetuneConfig,
    seed: u64,
) -> Result<(Vec<TaskResult>, Vec<DomainSummary>)> {
    episode_config.validate()?;
    finetune_config.validate()?;
    let root = SeededRng::new(seed);
    let mut domains: Vec<DomainId> = dataset
        .classes_in_split(split)
        .into_iter()
        .filter_map(|c| dataset.domain_of(c))
        .collect();
    domains.sort_unstable();
    domains.dedup();
    if domains.is_empty() {
        return Err(Error::contract(format!("no classes in {split:?} to evaluate")));
    }

    let mut tasks = Vec::new();
    let mut summaries = Vec::new();
    for domain in domains {
        let mut accuracies = Vec::with_capacity(episode_config.tasks_per_dataset);
        for t in 0..episode_config.tasks_per_dataset {
            let mut rng = root.substream(&format!("eval/{}/{}", domain.0, t));
            let episode = sample_episode(dataset, split, domain, episode_config, &mut rng)?;
            let accuracy = finetune_and_eval(params, &episode, finetune_config)?;
            accuracies.push(accuracy);
            tasks.push(TaskResult {
                domain,
                task_index: t,
                ways: episode.ways(),
                total_shots: episode.total_shots(),
                accuracy,
            });
        }
        let (mean, ci) = mean_and_ci(&accuracies);
        summaries.push(DomainSummary {
            domain,
            tasks: accuracies.len(),
            mean_accuracy: mean,
            ci95: ci,
        });
    }
    Ok((tasks, summaries))
}

/// Sample mean and 95% confidence half-width (1.96 standard errors, sample
/// standard deviation with Bessel's correction). A single observation has
/// zero half-width by convention.
pub fn mean_and_ci(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Fractional average ranks. `scores[m][d]` is method m's score on dataset
/// d, higher is better; rank 1 is best. Exactly tied scores share the mean
/// of the positions they straddle. Returns one average rank per method.
pub fn average_rank(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::contract("average_rank needs at least one method"));
    }
    let datasets = scores[0].len();
    if datasets == 0 {
        return Err(Error::contract("average_rank needs at least one dataset"));
    }
    if scores.iter().any(|row| row.len() != datasets) {
        return Err(Error::contract("average_rank rows must have equal length"));
    }
    let methods = scores.len();
    let mut totals = vec![0.0; methods];
    for d in 0..datasets {
        let mut order: Vec<usize> = (0..methods).collect();
        order.sort_by(|&a, &b| {
            scores[b][d]
                .partial_cmp(&scores[a][d])
                .ok_or(())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut i = 0;
        while i < methods {
            let mut j = i;
            while j + 1 < methods && scores[order[j + 1]][d] == scores[order[i]][d] {
                j += 1;
            }
            // Positions i..=j (0-based) share the mean rank.
            let shared = (i + j) as f64 / 2.0 + 1.0;
            for &m in &order[i..=j] {
                totals[m] += shared;
            }
            i = j + 1;
        }
    }
    Ok(totals.into_iter().map(|t| t / datasets as f64).collect())
}
