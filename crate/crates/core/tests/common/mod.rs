//! Shared machinery for the integration suites.
//!
//! The reference losses here are written the way one would transcribe the
//! formulas by hand: plain `f64` double loops, direct `exp`/`ln`, explicit
//! denominator sums, no shared log-sum-exp kernel and no tape. Any agreement
//! with the tape implementations is therefore evidence, not construction.
//! The queue reference model is an unbounded-then-truncated `Vec` — the
//! dumbest thing that is obviously correct.

#![allow(dead_code)] // each suite pulls a different subset of helpers

use supmoco_core::data::ClassId;
use supmoco_core::losses::{
    moco_loss, paired_layout, simclr_loss, supcon_loss, supmoco_batch_loss, supmoco_loss,
    QueueOnTape, SimilarityConfig, SupmocoQuery,
};
use supmoco_core::queue::{FeatureQueue, QueueSnapshot};
use supmoco_core::rng::SeededRng;
use supmoco_core::tape::Tape;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    v.iter().map(|x| x / norm).collect()
}

pub fn random_unit(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v = rng.normals(dim);
        if dot(&v, &v).sqrt() > 1e-6 {
            return unit(&v);
        }
    }
}

fn sim(u: &[f64], v: &[f64], temperature: f64) -> f64 {
    dot(u, v) / temperature
}

// ---- reference losses -------------------------------------------------------

/// -log( e^{s(q,k)} / (e^{s(q,k)} + sum_h e^{s(q,h)}) )
pub fn ref_moco(query: &[f64], key: &[f64], queue: &[Vec<f64>], temperature: f64) -> f64 {
    let numerator = sim(query, key, temperature).exp();
    let mut denominator = numerator;
    for h in queue {
        denominator += sim(query, h, temperature).exp();
    }
    -(numerator / denominator).ln()
}

/// -(1/P) [ sum_{keys} log(e^s / D) + sum_{same-class queue} log(e^s / D) ]
/// with D summed over every key and every queue entry.
pub fn ref_supmoco(
    query: &[f64],
    label: Option<ClassId>,
    keys: &[Vec<f64>],
    queue: &[(Vec<f64>, Option<ClassId>)],
    temperature: f64,
) -> f64 {
    let mut denominator = 0.0;
    for k in keys {
        denominator += sim(query, k, temperature).exp();
    }
    for (h, _) in queue {
        denominator += sim(query, h, temperature).exp();
    }
    let mut total = 0.0;
    let mut positives = 0usize;
    for k in keys {
        total += (sim(query, k, temperature).exp() / denominator).ln();
        positives += 1;
    }
    if let Some(l) = label {
        for (h, h_label) in queue {
            if *h_label == Some(l) {
                total += (sim(query, h, temperature).exp() / denominator).ln();
                positives += 1;
            }
        }
    }
    -total / positives as f64
}

/// Per-anchor terms: -log( e^{s(i, pair)} / sum_{j != i} e^{s(i, j)} ).
pub fn ref_simclr_terms(views: &[Vec<f64>], pair_of: &[usize], temperature: f64) -> Vec<f64> {
    let mut terms = Vec::with_capacity(views.len());
    for i in 0..views.len() {
        let mut denominator = 0.0;
        for j in 0..views.len() {
            if j != i {
                denominator += sim(&views[i], &views[j], temperature).exp();
            }
        }
        let numerator = sim(&views[i], &views[pair_of[i]], temperature).exp();
        terms.push(-(numerator / denominator).ln());
    }
    terms
}

/// Per-anchor terms: each anchor averages -log(e^s / D) over its positives —
/// all other same-label views when labeled, only the paired view otherwise.
pub fn ref_supcon_terms(
    views: &[Vec<f64>],
    labels: &[Option<ClassId>],
    pair_of: &[usize],
    temperature: f64,
) -> Vec<f64> {
    let mut terms = Vec::with_capacity(views.len());
    for i in 0..views.len() {
        let mut denominator = 0.0;
        for j in 0..views.len() {
            if j != i {
                denominator += sim(&views[i], &views[j], temperature).exp();
            }
        }
        let mut total = 0.0;
        let mut positives = 0usize;
        for j in 0..views.len() {
            if j == i {
                continue;
            }
            let is_positive = match labels[i] {
                Some(l) => labels[j] == Some(l),
                None => j == pair_of[i],
            };
            if is_positive {
                total += (sim(&views[i], &views[j], temperature).exp() / denominator).ln();
                positives += 1;
            }
        }
        assert!(positives > 0, "reference scene left anchor {i} without positives");
        terms.push(-total / positives as f64);
    }
    terms
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---- queue reference model --------------------------------------------------

/// List-backed queue: append everything, then drop from the front until the
/// length fits. Tracks the same monotone sequence numbers as the real queue.
pub struct QueueModel {
    pub capacity: usize,
    pub items: Vec<(Vec<f64>, Option<ClassId>, u64)>,
    pub next_seq: u64,
}

impl QueueModel {
    pub fn new(capacity: usize) -> Self {
        QueueModel { capacity, items: Vec::new(), next_seq: 0 }
    }

    pub fn enqueue(&mut self, batch: &[(Vec<f64>, Option<ClassId>)]) {
        for (embedding, label) in batch {
            self.items.push((embedding.clone(), *label, self.next_seq));
            self.next_seq += 1;
        }
        while self.items.len() > self.capacity {
            self.items.remove(0);
        }
    }

    pub fn positives(&self, label: ClassId) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, (_, l, _))| *l == Some(label))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Drives the real queue and the list model through `sequences` random
/// enqueue sequences, comparing full contents and every positive lookup
/// after each call. Panics with context on the first divergence; returns
/// (enqueue calls, positive lookups) for reporting.
pub fn queue_vs_model(sequences: usize, seed: u64) -> (usize, usize) {
    let mut rng = SeededRng::new(seed);
    let mut enqueues = 0usize;
    let mut lookups = 0usize;

    for sequence in 0..sequences {
        let capacity = rng.range_inclusive(1, 16);
        let dim = rng.range_inclusive(1, 3);
        let mut queue = FeatureQueue::new(capacity, dim).expect("queue");
        let mut model = QueueModel::new(capacity);

        for call in 0..rng.range_inclusive(1, 8) {
            let batch: Vec<(Vec<f64>, Option<ClassId>)> = (0..rng.range_inclusive(1, 4))
                .map(|_| {
                    let label = (rng.uniform() < 0.6).then(|| ClassId(rng.below(5) as u32));
                    (rng.normals(dim), label)
                })
                .collect();
            queue.enqueue(batch.clone()).expect("enqueue");
            model.enqueue(&batch);
            enqueues += 1;

            let entries: Vec<_> = queue.entries().collect();
            assert_eq!(
                entries.len(),
                model.items.len(),
                "length diverged (sequence {sequence}, call {call})"
            );
            assert_eq!(queue.next_seq(), model.next_seq);
            for (entry, (embedding, label, insert_seq)) in entries.iter().zip(&model.items) {
                assert_eq!(&entry.embedding, embedding);
                assert_eq!(entry.label, *label);
                assert_eq!(entry.insert_seq, *insert_seq);
            }

            for class in 0..5u32 {
                let got = queue.positives_for(ClassId(class));
                assert_eq!(
                    got,
                    model.positives(ClassId(class)),
                    "positives diverged for class {class} (sequence {sequence}, call {call})"
                );
                for &index in &got {
                    assert_eq!(
                        entries[index].label,
                        Some(ClassId(class)),
                        "positive lookup surfaced a wrong or unlabeled entry"
                    );
                }
                lookups += 1;
            }
        }
    }
    (enqueues, lookups)
}

// ---- random scenes ----------------------------------------------------------

pub struct SceneQuery {
    pub embedding: Vec<f64>,
    pub label: Option<ClassId>,
    pub keys: Vec<Vec<f64>>,
}

/// A batch of queries against a shared queue, sized to the oracle budget:
/// batch <= 8, queue <= 32, dim <= 8.
pub struct QueueScene {
    pub queries: Vec<SceneQuery>,
    pub queue_embeddings: Vec<Vec<f64>>,
    pub queue_labels: Vec<Option<ClassId>>,
    pub temperature: f64,
}

fn maybe_label(rng: &mut SeededRng, classes: u32) -> Option<ClassId> {
    (rng.uniform() < 0.7).then(|| ClassId(rng.below(classes as usize) as u32))
}

pub fn random_queue_scene(rng: &mut SeededRng) -> QueueScene {
    let dim = rng.range_inclusive(2, 8);
    let batch = rng.range_inclusive(1, 8);
    let queue_len = rng.range_inclusive(1, 32);
    let temperature = rng.uniform_in(0.05, 1.0);
    let queries = (0..batch)
        .map(|_| {
            let label = maybe_label(rng, 4);
            // Unlabeled queries carry exactly the self view, as in training.
            let key_count = if label.is_some() { rng.range_inclusive(1, 3) } else { 1 };
            SceneQuery {
                embedding: random_unit(dim, rng),
                label,
                keys: (0..key_count).map(|_| random_unit(dim, rng)).collect(),
            }
        })
        .collect();
    let queue_embeddings = (0..queue_len).map(|_| random_unit(dim, rng)).collect();
    let queue_labels = (0..queue_len).map(|_| maybe_label(rng, 4)).collect();
    QueueScene { queries, queue_embeddings, queue_labels, temperature }
}

/// 2n paired views with pair-shared optional labels (both views of a pair
/// carry the same label, so every labeled anchor has a positive).
pub struct PairScene {
    pub views: Vec<Vec<f64>>,
    pub labels: Vec<Option<ClassId>>,
    pub pair_of: Vec<usize>,
    pub temperature: f64,
}

pub fn random_pair_scene(rng: &mut SeededRng) -> PairScene {
    let dim = rng.range_inclusive(2, 8);
    let pairs = rng.range_inclusive(1, 8);
    let temperature = rng.uniform_in(0.05, 1.0);
    let views: Vec<Vec<f64>> = (0..2 * pairs).map(|_| random_unit(dim, rng)).collect();
    let pair_labels: Vec<Option<ClassId>> = (0..pairs).map(|_| maybe_label(rng, 3)).collect();
    let mut labels = pair_labels.clone();
    labels.extend_from_slice(&pair_labels);
    PairScene { views, labels, pair_of: paired_layout(pairs), temperature }
}

// ---- agreement runners ------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct AgreementStats {
    pub scenes: usize,
    pub comparisons: usize,
    pub max_abs_err: f64,
}

impl AgreementStats {
    fn record(&mut self, tape_value: f64, reference: f64) {
        self.comparisons += 1;
        self.max_abs_err = self.max_abs_err.max((tape_value - reference).abs());
    }
}

/// Evaluates all four tape losses against the reference formulas on `trials`
/// random scenes each and returns the worst absolute disagreement.
pub fn loss_oracle_agreement(trials: usize, seed: u64) -> AgreementStats {
    let mut rng = SeededRng::new(seed);
    let mut stats = AgreementStats::default();

    for _ in 0..trials {
        // Queue-side: one scene checks the supervised loss per query and as a
        // batch, plus the plain instance-discrimination loss per query.
        let scene = random_queue_scene(&mut rng);
        let mut tape = Tape::new();
        let cfg = SimilarityConfig { temperature: scene.temperature };
        let snapshot = QueueSnapshot {
            embeddings: scene.queue_embeddings.clone(),
            labels: scene.queue_labels.clone(),
        };
        let queue = QueueOnTape::insert(&mut tape, &snapshot);
        let ref_queue: Vec<(Vec<f64>, Option<ClassId>)> = scene
            .queue_embeddings
            .iter()
            .cloned()
            .zip(scene.queue_labels.iter().copied())
            .collect();

        let mut tape_queries = Vec::new();
        let mut ref_terms = Vec::new();
        for q in &scene.queries {
            let embedding = tape.vector_leaf(&q.embedding, true);
            let keys: Vec<_> = q.keys.iter().map(|k| tape.vector_leaf(k, false)).collect();
            let sq = SupmocoQuery { embedding, label: q.label, keys };

            let (loss, denominator_terms) =
                supmoco_loss(&mut tape, &sq, &queue, &cfg).expect("supmoco scene");
            assert_eq!(
                denominator_terms,
                q.keys.len() + scene.queue_embeddings.len(),
                "denominator must count every key and every queue entry"
            );
            let reference =
                ref_supmoco(&q.embedding, q.label, &q.keys, &ref_queue, scene.temperature);
            stats.record(tape.scalar_value(loss), reference);
            ref_terms.push(reference);

            // Same leaves, first key as the only positive, queue all-negative.
            let queue_ids: Vec<_> = scene
                .queue_embeddings
                .iter()
                .map(|h| tape.vector_leaf(h, false))
                .collect();
            let m = moco_loss(&mut tape, sq.embedding, sq.keys[0], &queue_ids, &cfg)
                .expect("moco scene");
            stats.record(
                tape.scalar_value(m),
                ref_moco(&q.embedding, &q.keys[0], &scene.queue_embeddings, scene.temperature),
            );
            tape_queries.push(sq);
        }
        let (_, breakdown) =
            supmoco_batch_loss(&mut tape, &tape_queries, &queue, &cfg).expect("supmoco batch");
        stats.record(breakdown.total, mean(&ref_terms));

        // In-batch side: paired views, labeled and unlabeled anchors mixed.
        let scene = random_pair_scene(&mut rng);
        let mut tape = Tape::new();
        let cfg = SimilarityConfig { temperature: scene.temperature };
        let views: Vec<_> = scene.views.iter().map(|v| tape.vector_leaf(v, true)).collect();

        let (_, breakdown) =
            simclr_loss(&mut tape, &views, &scene.pair_of, &cfg).expect("simclr scene");
        let reference = ref_simclr_terms(&scene.views, &scene.pair_of, scene.temperature);
        for (t, r) in breakdown.per_query.iter().zip(&reference) {
            stats.record(*t, *r);
        }
        stats.record(breakdown.total, mean(&reference));

        let (_, breakdown) =
            supcon_loss(&mut tape, &views, &scene.labels, &scene.pair_of, &cfg)
                .expect("supcon scene");
        let reference =
            ref_supcon_terms(&scene.views, &scene.labels, &scene.pair_of, scene.temperature);
        for (t, r) in breakdown.per_query.iter().zip(&reference) {
            stats.record(*t, *r);
        }
        stats.record(breakdown.total, mean(&reference));

        stats.scenes += 2;
    }
    stats
}

/// Degenerate-case agreement: with one key and a label foreign to the queue
/// the supervised queue loss must equal plain instance discrimination, and
/// with all-distinct pair labels the supervised in-batch loss must equal
/// the unsupervised one. Returns the worst absolute difference over `cases`
/// of each family.
pub fn reduction_agreement(cases: usize, seed: u64) -> AgreementStats {
    let mut rng = SeededRng::new(seed);
    let mut stats = AgreementStats::default();

    for case in 0..cases {
        let mut scene = random_queue_scene(&mut rng);
        for (i, q) in scene.queries.iter_mut().enumerate() {
            q.keys.truncate(1);
            // Alternate between unlabeled and a label no queue entry carries;
            // both must leave the queue all-negative.
            q.label = if (case + i) % 2 == 0 { None } else { Some(ClassId(100 + i as u32)) };
        }
        let mut tape = Tape::new();
        let cfg = SimilarityConfig { temperature: scene.temperature };
        let snapshot = QueueSnapshot {
            embeddings: scene.queue_embeddings.clone(),
            labels: scene.queue_labels.clone(),
        };
        let queue = QueueOnTape::insert(&mut tape, &snapshot);
        for q in &scene.queries {
            let embedding = tape.vector_leaf(&q.embedding, true);
            let key = tape.vector_leaf(&q.keys[0], false);
            let sq = SupmocoQuery { embedding, label: q.label, keys: vec![key] };
            let (supervised, _) = supmoco_loss(&mut tape, &sq, &queue, &cfg).expect("reduction");
            let queue_ids: Vec<_> = scene
                .queue_embeddings
                .iter()
                .map(|h| tape.vector_leaf(h, false))
                .collect();
            let plain = moco_loss(&mut tape, embedding, key, &queue_ids, &cfg).expect("reduction");
            stats.record(tape.scalar_value(supervised), tape.scalar_value(plain));
        }

        let mut scene = random_pair_scene(&mut rng);
        let pairs = scene.views.len() / 2;
        for i in 0..scene.labels.len() {
            // Every pair its own class (or everything unlabeled): the only
            // positive is the paired view either way.
            scene.labels[i] = if case % 2 == 0 { Some(ClassId((i % pairs) as u32)) } else { None };
        }
        let mut tape = Tape::new();
        let cfg = SimilarityConfig { temperature: scene.temperature };
        let views: Vec<_> = scene.views.iter().map(|v| tape.vector_leaf(v, true)).collect();
        let (supervised, b_sup) =
            supcon_loss(&mut tape, &views, &scene.labels, &scene.pair_of, &cfg).expect("reduction");
        let (plain, b_plain) =
            simclr_loss(&mut tape, &views, &scene.pair_of, &cfg).expect("reduction");
        for (s, p) in b_sup.per_query.iter().zip(&b_plain.per_query) {
            stats.record(*s, *p);
        }
        stats.record(tape.scalar_value(supervised), tape.scalar_value(plain));
        stats.scenes += 2;
    }
    stats
}
