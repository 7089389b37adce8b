//! Supervision-collapse diagnostics: nearest-neighbor retrieval in the
//! joint train+test embedding space and the three histogram metrics built
//! on it.
//!
//! The question being asked: when an encoder retrieves neighbors for a
//! test-class query, does it find other members of that unseen class, or
//! does it collapse the query onto whatever train classes it memorized?
//! Three per-query counts answer it — neighbors from the query's own test
//! class, neighbors from the train split at all, and the largest
//! same-train-class clump among them — each histogrammed over queries.
//!
//! Retrieval embeds with the backbone only (the projection head is dropped
//! at evaluation time everywhere in this crate) and ranks by cosine, which
//! on unit vectors is the dot product.

use crate::data::{ClassId, Dataset, Split};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Sizing for the retrieval study. The desk-scale defaults keep the corpus
/// small; studies on real image datasets use figures like 130 samples per
/// class and 1000 queries.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSpec {
    /// Corpus examples drawn per class (clamped to the class size).
    pub per_class_samples: usize,
    /// Queries sampled from the test-class portion of the corpus.
    pub query_count: usize,
    /// Neighbors retrieved per query.
    pub k: usize,
}

impl Default for RetrievalSpec {
    fn default() -> Self {
        RetrievalSpec {
            per_class_samples: 20,
            query_count: 200,
            k: 9,
        }
    }
}

impl RetrievalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_class_samples == 0 || self.query_count == 0 {
            return Err(Error::contract(
                "per_class_samples and query_count must be positive",
            ));
        }
        if self.k == 0 {
            return Err(Error::contract("retrieval k must be at least 1"));
        }
        Ok(())
    }
}

/// The three histograms plus their headline fractions. Each histogram has
/// k+1 buckets (a query can have 0..=k qualifying neighbors) and sums to
/// the query count.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    pub k: usize,
    pub query_count: usize,
    /// Bucket c: queries with exactly c neighbors from their own class.
    pub hist_same_test_class: Vec<usize>,
    /// Bucket c: queries with exactly c neighbors from the train split.
    pub hist_from_train: Vec<usize>,
    /// Bucket c: queries whose largest same-train-class neighbor group has
    /// size c.
    pub hist_max_same_train_class: Vec<usize>,
    /// Share of queries retrieving at least one same-class neighbor.
    pub frac_ge1_same_test_class: f64,
    /// Share of queries whose neighbors clump two-or-more onto a single
    /// train class — the collapse signature.
    pub frac_ge2_same_train_class: f64,
}

impl CollapseReport {
    /// Delimited text form: one `k=`/`queries=` header, one comma-separated
    /// line per histogram, then the summary fractions.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("k={} queries={}\n", self.k, self.query_count));
        for (name, hist) in [
            ("hist_same_test_class", &self.hist_same_test_class),
            ("hist_from_train", &self.hist_from_train),
            ("hist_max_same_train_class", &self.hist_max_same_train_class),
        ] {
            out.push_str(name);
            for c in hist {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "frac_ge1_same_test_class={}\n",
            self.frac_ge1_same_test_class
        ));
        out.push_str(&format!(
            "frac_ge2_same_train_class={}\n",
            self.frac_ge2_same_train_class
        ));
        out
    }
}

/// Top-k cosine neighbors within `corpus` for each index in `queries`, the
/// query itself excluded. Ties break toward the lower corpus index, so the
/// result is deterministic regardless of evaluation order.
pub fn knn_retrieval(
    corpus: &[Vec<f64>],
    queries: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::contract("retrieval k must be at least 1"));
    }
    if k >= corpus.len() {
        return Err(Error::contract(format!(
            "retrieval k = {k} needs a corpus larger than k, got {} items",
            corpus.len()
        )));
    }
    let dim = corpus.first().map(|e| e.len()).unwrap_or(0);
    if corpus.iter().any(|e| e.len() != dim) {
        return Err(Error::ShapeMismatch {
            context: "knn_retrieval",
            expected: format!("uniform dim {dim}"),
            got: "ragged corpus".to_string(),
        });
    }
    let mut out = Vec::with_capacity(queries.len());
    for &qi in queries {
        let q = corpus.get(qi).ok_or_else(|| {
            Error::contract(format!("query index {qi} outside corpus of {}", corpus.len()))
        })?;
        let mut scored: Vec<(f64, usize)> = corpus
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != qi)
            .map(|(j, e)| (q.iter().zip(e).map(|(a, b)| a * b).sum::<f64>(), j))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        out.push(scored[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Builds the three collapse histograms from retrieval results.
///
/// `corpus_labels[j]`/`corpus_from_train[j]` describe corpus item j;
/// `query_labels[i]` is the (test) class of the query behind
/// `neighbors[i]`.
pub fn collapse_report(
    neighbors: &[Vec<usize>],
    corpus_labels: &[ClassId],
    corpus_from_train: &[bool],
    query_labels: &[ClassId],
) -> Result<CollapseReport> {
    if neighbors.is_empty() {
        return Err(Error::contract("collapse_report needs at least one query"));
    }
    if neighbors.len() != query_labels.len() {
        return Err(Error::contract(format!(
            "{} neighbor lists for {} query labels",
            neighbors.len(),
            query_labels.len()
        )));
    }
    if corpus_labels.len() != corpus_from_train.len() {
        return Err(Error::contract(format!(
            "{} corpus labels for {} split flags",
            corpus_labels.len(),
            corpus_from_train.len()
        )));
    }
    let k = neighbors[0].len();
    if k == 0 || neighbors.iter().any(|n| n.len() != k) {
        return Err(Error::contract("neighbor lists must share a positive length"));
    }

    let mut hist_same = vec![0usize; k + 1];
    let mut hist_train = vec![0usize; k + 1];
    let mut hist_clump = vec![0usize; k + 1];
    for (list, &query_label) in neighbors.iter().zip(query_labels) {
        let mut same = 0usize;
        let mut from_train = 0usize;
        let mut groups: std::collections::BTreeMap<ClassId, usize> = Default::default();
        for &j in list {
            let label = *corpus_labels.get(j).ok_or_else(|| {
                Error::contract(format!("neighbor index {j} outside corpus of {}", corpus_labels.len()))
            })?;
            if label == query_label {
                same += 1;
            }
            if corpus_from_train[j] {
                from_train += 1;
                *groups.entry(label).or_insert(0) += 1;
            }
        }
        let clump = groups.values().copied().max().unwrap_or(0);
        hist_same[same] += 1;
        hist_train[from_train] += 1;
        hist_clump[clump] += 1;
    }

    let q = neighbors.len() as f64;
    let frac_ge1 = 1.0 - hist_same[0] as f64 / q;
    let frac_ge2 = hist_clump[2..].iter().sum::<usize>() as f64 / q;
    Ok(CollapseReport {
        k,
        query_count: neighbors.len(),
        hist_same_test_class: hist_same,
        hist_from_train: hist_train,
        hist_max_same_train_class: hist_clump,
        frac_ge1_same_test_class: frac_ge1,
        frac_ge2_same_train_class: frac_ge2,
    })
}

/// End-to-end study: sample a corpus across all train and test classes,
/// embed it with `params` (backbone only), retrieve neighbors for randomly
/// chosen test-class queries, and histogram the results.
///
/// All sampling comes from the "analysis" substream of `seed`, so the
/// report is a pure function of (dataset, params, spec, seed).
pub fn run_collapse_analysis(
    dataset: &Dataset,
    params: &EncoderParams,
    spec: &RetrievalSpec,
    seed: u64,
) -> Result<CollapseReport> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed).substream("analysis");

    let mut corpus = Vec::new();
    let mut labels = Vec::new();
    let mut from_train = Vec::new();
    let mut test_positions = Vec::new();
    for split in [Split::Train, Split::Test] {
        for class in dataset.classes_in_split(split) {
            let members = dataset.examples_of_class(class);
            let take = spec.per_class_samples.min(members.len());
            for pick in rng.distinct_below(members.len(), take) {
                let example = &dataset.examples()[members[pick]];
                if split == Split::Test {
                    test_positions.push(corpus.len());
                }
                corpus.push(params.embed(&example.features, false)?);
                labels.push(class);
                from_train.push(split == Split::Train);
            }
        }
    }
    if test_positions.len() < spec.query_count {
        return Err(Error::contract(format!(
            "query_count {} exceeds the {} test-class corpus items; lower it or raise per_class_samples",
            spec.query_count,
            test_positions.len()
        )));
    }
    let queries: Vec<usize> = rng
        .distinct_below(test_positions.len(), spec.query_count)
        .into_iter()
        .map(|i| test_positions[i])
        .collect();
    let query_labels: Vec<ClassId> = queries.iter().map(|&qi| labels[qi]).collect();
    let neighbors = knn_retrieval(&corpus, &queries, spec.k)?;
    collapse_report(&neighbors, &labels, &from_train, &query_labels)
}
