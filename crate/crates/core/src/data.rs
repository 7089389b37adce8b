//! Synthetic multi-domain datasets, augmentation, label masking, and
//! contrastive batch construction.
//!
//! Data lives on a fixed grid of domains x classes: every domain gets an
//! offset vector, every class a Gaussian center near its domain's offset,
//! and every example is a Gaussian sample around its class center. Class
//! splits (train/val/test) are disjoint *by class* and assigned per domain,
//! so evaluation classes are never seen during training — the setting the
//! retrieval diagnostics probe.
//!
//! Split assignment is a pure function of the class grid, the split
//! fractions, and a named RNG substream. The on-disk text format therefore
//! does not store splits: generator and loader derive them identically from
//! the experiment seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Domain index (which "dataset" an example belongs to).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainId(pub u32);

/// Globally unique class index (classes are never shared across domains).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One sample. `labeled` is the semi-supervised visibility flag: the true
/// class is always present (evaluation needs it), but training must go
/// through [`Example::training_label`], which hides it when masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub class_id: ClassId,
    pub domain_id: DomainId,
    pub labeled: bool,
}

impl Example {
    /// The label as training is allowed to see it.
    pub fn training_label(&self) -> Option<ClassId> {
        self.labeled.then_some(self.class_id)
    }
}

/// Geometry and size of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub classes_per_domain: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Scale of the per-domain offset vector (domain shift strength).
    pub domain_offset_scale: f64,
    /// Scale of class centers around their domain offset.
    pub class_center_scale: f64,
    /// Within-class standard deviation.
    pub within_class_sigma: f64,
    pub splits: SplitFractions,
}

/// Per-domain class split fractions; must be in [0, 1] and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::contract(format!(
                    "split fraction {name} must be in [0, 1], got {f}"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `n` classes to (train, val, test).
    /// Remainder ties go to the earlier split in that order.
    fn allocate(&self, n: usize) -> [usize; 3] {
        let fractions = [self.train, self.val, self.test];
        let mut counts = [0usize; 3];
        let mut remainders = [0.0f64; 3];
        let mut assigned = 0;
        for i in 0..3 {
            let exact = fractions[i] * n as f64;
            counts[i] = exact.floor() as usize;
            remainders[i] = exact - exact.floor();
            assigned += counts[i];
        }
        let mut leftover = n - assigned;
        while leftover > 0 {
            // Index of the largest remainder; ties resolve to the earliest.
            let mut best = 0;
            for i in 1..3 {
                if remainders[i] > remainders[best] {
                    best = i;
                }
            }
            counts[best] += 1;
            remainders[best] = -1.0;
            leftover -= 1;
        }
        counts
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("domains", self.domains),
            ("classes_per_domain", self.classes_per_domain),
            ("samples_per_class", self.samples_per_class),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("synthetic {name} must be positive")));
            }
        }
        for (name, v) in [
            ("domain_offset_scale", self.domain_offset_scale),
            ("class_center_scale", self.class_center_scale),
            ("within_class_sigma", self.within_class_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!(
                    "synthetic {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        self.splits.validate()
    }
}

/// A dataset with its derived indexes. Construction validates the invariants
/// (uniform feature width, one domain per class) and assigns splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    input_dim: usize,
    examples: Vec<Example>,
    split_of: std::collections::BTreeMap<ClassId, Split>,
    by_class: std::collections::BTreeMap<ClassId, Vec<usize>>,
    domain_of_class: std::collections::BTreeMap<ClassId, DomainId>,
}

impl Dataset {
    /// Builds the indexes and assigns class splits. Split assignment shuffles
    /// each domain's (sorted) class list with `split_rng` and slices it by
    /// largest-remainder counts; generator and loader call this with the same
    /// substream so both sides agree without storing splits on disk.
    pub fn from_examples(
        input_dim: usize,
        examples: Vec<Example>,
        fractions: &SplitFractions,
        split_rng: &mut SeededRng,
    ) -> Result<Self> {
        fractions.validate()?;
        if examples.is_empty() {
            return Err(Error::contract("dataset must contain at least one example"));
        }
        let mut by_class: std::collections::BTreeMap<ClassId, Vec<usize>> = Default::default();
        let mut domain_of_class: std::collections::BTreeMap<ClassId, DomainId> = Default::default();
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != input_dim {
                return Err(Error::ShapeMismatch {
                    context: "Dataset::from_examples",
                    expected: format!("{input_dim} features"),
                    got: format!("{} (example {i})", ex.features.len()),
                });
            }
            match domain_of_class.get(&ex.class_id) {
                None => {
                    domain_of_class.insert(ex.class_id, ex.domain_id);
                }
                Some(&d) if d != ex.domain_id => {
                    return Err(Error::contract(format!(
                        "class {} appears in domains {} and {}",
                        ex.class_id.0, d.0, ex.domain_id.0
                    )));
                }
                _ => {}
            }
            by_class.entry(ex.class_id).or_default().push(i);
        }

        // Per-domain split assignment over sorted class lists.
        let mut split_of = std::collections::BTreeMap::new();
        let mut domains: Vec<DomainId> = domain_of_class.values().copied().collect();
        domains.sort_unstable();
        domains.dedup();
        for d in domains {
            let mut classes: Vec<ClassId> = domain_of_class
                .iter()
                .filter(|(_, &dom)| dom == d)
                .map(|(&c, _)| c)
                .collect();
            classes.sort_unstable();
            let [n_train, n_val, _] = fractions.allocate(classes.len());
            split_rng.shuffle(&mut classes);
            for (i, c) in classes.into_iter().enumerate() {
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                split_of.insert(c, split);
            }
        }

        Ok(Dataset {
            input_dim,
            examples,
            split_of,
            by_class,
            domain_of_class,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn split_of(&self, class: ClassId) -> Option<Split> {
        self.split_of.get(&class).copied()
    }

    pub fn domain_of(&self, class: ClassId) -> Option<DomainId> {
        self.domain_of_class.get(&class).copied()
    }

    /// Sorted domains present in the dataset.
    pub fn domains(&self) -> Vec<DomainId> {
        let mut ds: Vec<DomainId> = self.domain_of_class.values().copied().collect();
        ds.sort_unstable();
        ds.dedup();
        ds
    }

    /// Sorted classes of one split (all domains).
    pub fn classes_in_split(&self, split: Split) -> Vec<ClassId> {
        self.split_of
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Sorted classes of one domain restricted to one split.
    pub fn classes_of(&self, domain: DomainId, split: Split) -> Vec<ClassId> {
        self.split_of
            .iter()
            .filter(|(&c, &s)| s == split && self.domain_of_class[&c] == domain)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Example indices of one class, in dataset order.
    pub fn examples_of_class(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map_or(&[], |v| v)
    }

    /// Example indices whose class belongs to `split`, in dataset order.
    pub fn split_example_indices(&self, split: Split) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, ex)| self.split_of[&ex.class_id] == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draws the full domain/class/sample hierarchy. Draw order (domains
/// ascending; per domain: offset, then per class: center, then samples) is
/// part of the determinism contract. Splits come from the rng's "splits"
/// substream, which depends only on the rng's seed — see
/// [`Dataset::from_examples`].
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut SeededRng) -> Result<Dataset> {
    spec.validate()?;
    let mut split_rng = rng.substream("splits");
    let mut examples =
        Vec::with_capacity(spec.domains * spec.classes_per_domain * spec.samples_per_class);
    for d in 0..spec.domains {
        let offset: Vec<f64> = rng
            .normals(spec.input_dim)
            .into_iter()
            .map(|z| z * spec.domain_offset_scale)
            .collect();
        for c in 0..spec.classes_per_domain {
            let class_id = ClassId((d * spec.classes_per_domain + c) as u32);
            let center: Vec<f64> = offset
                .iter()
                .zip(rng.normals(spec.input_dim))
                .map(|(o, z)| o + z * spec.class_center_scale)
                .collect();
            for _ in 0..spec.samples_per_class {
                let features: Vec<f64> = center
                    .iter()
                    .zip(rng.normals(spec.input_dim))
                    .map(|(m, z)| m + z * spec.within_class_sigma)
                    .collect();
                examples.push(Example {
                    features,
                    class_id,
                    domain_id: DomainId(d as u32),
                    labeled: true,
                });
            }
        }
    }
    Dataset::from_examples(spec.input_dim, examples, &spec.splits, &mut split_rng)
}

/// Labeled fractions for masking: a default plus per-domain overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFractions {
    pub default: f64,
    pub per_domain: std::collections::BTreeMap<DomainId, f64>,
}

impl LabelFractions {
    pub fn uniform(fraction: f64) -> Self {
        LabelFractions {
            default: fraction,
            per_domain: Default::default(),
        }
    }

    fn for_domain(&self, d: DomainId) -> f64 {
        self.per_domain.get(&d).copied().unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(&self.default).chain(self.per_domain.values());
        for &f in all {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::contract(format!(
                    "labeled fraction must be in [0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Rewrites every example's `labeled` flag: per class, ceil(fraction * n)
/// examples stay labeled (chosen uniformly), the rest are masked. Classes
/// iterate in sorted order so the rng stream is reproducible. Fraction 1
/// keeps everything, fraction 0 masks everything.
pub fn mask_labels(dataset: &mut Dataset, fractions: &LabelFractions, rng: &mut SeededRng) -> Result<()> {
    fractions.validate()?;
    let classes: Vec<ClassId> = dataset.by_class.keys().copied().collect();
    for class in classes {
        let domain = dataset.domain_of_class[&class];
        let f = fractions.for_domain(domain);
        let indices = dataset.by_class[&class].clone();
        let keep = (f * indices.len() as f64).ceil() as usize;
        let keep = keep.min(indices.len());
        for &i in &indices {
            dataset.examples[i].labeled = false;
        }
        for pick in rng.distinct_below(indices.len(), keep) {
            dataset.examples[indices[pick]].labeled = true;
        }
    }
    Ok(())
}

/// Stochastic view generator: scalar scale jitter, additive Gaussian noise,
/// and coordinate dropout — the vector analogue of crop/color-jitter/erase.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub noise_sigma: f64,
    /// Uniform scalar multiplier range (lo, hi), lo <= hi.
    pub scale_jitter: (f64, f64),
    /// Per-coordinate zeroing probability, in [0, 1).
    pub dropout_prob: f64,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::contract(format!(
                "augment noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.scale_jitter.0 > self.scale_jitter.1 {
            return Err(Error::contract(format!(
                "augment scale_jitter range is inverted: ({}, {})",
                self.scale_jitter.0, self.scale_jitter.1
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::contract(format!(
                "augment dropout_prob must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    /// Identity parameters: augment(x) == x exactly.
    pub fn identity() -> Self {
        AugmentationSpec {
            noise_sigma: 0.0,
            scale_jitter: (1.0, 1.0),
            dropout_prob: 0.0,
        }
    }

    /// One stochastic view. Draw order per call: one jitter uniform, then n
    /// noise normals, then n dropout uniforms — always all of them, so rng
    /// consumption is independent of the parameter values.
    pub fn augment(&self, features: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        let jitter = rng.uniform_in(self.scale_jitter.0, self.scale_jitter.1);
        let mut out: Vec<f64> = features
            .iter()
            .map(|&x| x * jitter + self.noise_sigma * rng.normal())
            .collect();
        for v in out.iter_mut() {
            if rng.uniform() < self.dropout_prob {
                *v = 0.0;
            }
        }
        out
    }
}

/// Whether a batch draws all queries from one domain or mixes domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMixing {
    /// One domain per batch, chosen uniformly among domains with train data.
    Pure,
    /// Queries drawn uniformly over the whole train pool; the expected domain
    /// mix is proportional to domain sizes.
    Impure,
}

/// Batch shape request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// Positives per labeled query, counting the self view (P >= 1).
    pub positives: usize,
    pub mixing: BatchMixing,
}

/// One query with its key views. `key_views[0]` is always the augmented self
/// view; the rest are augmented same-class examples (present only when the
/// query is labeled and P > 1).
#[derive(Debug, Clone)]
pub struct QueryRecord {
    /// Index of the source example in the dataset (for tests/diagnostics).
    pub example_index: usize,
    pub query_view: Vec<f64>,
    pub key_views: Vec<Vec<f64>>,
    /// Label as visible to training (None when masked).
    pub label: Option<ClassId>,
    pub domain: DomainId,
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub queries: Vec<QueryRecord>,
    /// The shared domain for pure batches.
    pub domain: Option<DomainId>,
}

/// Samples a batch of queries with their key views from the train split.
///
/// Per labeled query, the P-1 extra positives are distinct same-class train
/// examples when the class is large enough; otherwise they are drawn with
/// replacement from the remaining same-class examples, falling back to fresh
/// augmentations of the query's own example for singleton classes. Unlabeled
/// queries always get exactly one key (the self view).
pub fn build_contrastive_batch(
    dataset: &Dataset,
    plan: &BatchPlan,
    augment: &AugmentationSpec,
    rng: &mut SeededRng,
) -> Result<ContrastiveBatch> {
    if plan.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    if plan.positives == 0 {
        return Err(Error::contract("positives must be >= 1 (the self view)"));
    }
    augment.validate()?;

    let train_pool = dataset.split_example_indices(Split::Train);
    if train_pool.is_empty() {
        return Err(Error::contract("train split is empty; cannot build a batch"));
    }

    // For pure batches: one domain for the whole batch, uniform over the
    // domains that actually have train examples (sorted for determinism).
    let (batch_domain, pool): (Option<DomainId>, Vec<usize>) = match plan.mixing {
        BatchMixing::Impure => (None, train_pool),
        BatchMixing::Pure => {
            let mut domains: Vec<DomainId> = train_pool
                .iter()
                .map(|&i| dataset.examples[i].domain_id)
                .collect();
            domains.sort_unstable();
            domains.dedup();
            let d = domains[rng.below(domains.len())];
            let pool = train_pool
                .into_iter()
                .filter(|&i| dataset.examples[i].domain_id == d)
                .collect();
            (Some(d), pool)
        }
    };

    let mut queries = Vec::with_capacity(plan.batch_size);
    for _ in 0..plan.batch_size {
        let example_index = pool[rng.below(pool.len())];
        let ex = &dataset.examples[example_index];
        let query_view = augment.augment(&ex.features, rng);
        let mut key_views = vec![augment.augment(&ex.features, rng)];
        let label = ex.training_label();

        if label.is_some() && plan.positives > 1 {
            let wanted = plan.positives - 1;
            // Same-class candidates, excluding the query example itself
            // (train membership is implied: the query's class is a train
            // class and classes do not straddle splits). Only examples whose
            // label is visible qualify — under partial labeling, training
            // has no way to know that a masked example shares the class.
            let candidates: Vec<usize> = dataset.by_class[&ex.class_id]
                .iter()
                .copied()
                .filter(|&i| i != example_index && dataset.examples[i].labeled)
                .collect();
            let sources: Vec<usize> = if candidates.len() >= wanted {
                rng.distinct_below(candidates.len(), wanted)
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect()
            } else if candidates.is_empty() {
                // Singleton class: positives are more augmentations of self.
                vec![example_index; wanted]
            } else {
                (0..wanted)
                    .map(|_| candidates[rng.below(candidates.len())])
                    .collect()
            };
            for s in sources {
                key_views.push(augment.augment(&dataset.examples[s].features, rng));
            }
        }

        queries.push(QueryRecord {
            example_index,
            query_view,
            key_views,
            label,
            domain: ex.domain_id,
        });
    }

    Ok(ContrastiveBatch {
        queries,
        domain: batch_domain,
    })
}

// ---- text format ------------------------------------------------------------

/// Writes `dim=<input_dim>` followed by one `domain,class,labeled,f1,...`
/// line per example. Floats use shortest round-trip formatting, so
/// write -> read -> write is byte-stable.
pub fn write_text(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "dim={}", dataset.input_dim);
    for ex in &dataset.examples {
        let _ = write!(
            out,
            "{},{},{}",
            ex.domain_id.0,
            ex.class_id.0,
            u8::from(ex.labeled)
        );
        for f in &ex.features {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {}", message.into()),
    }
}

/// Parses the text format back into raw examples (no splits; pass them to
/// [`Dataset::from_examples`]). Errors name the path and 1-based line.
pub fn read_text(path: &Path) -> Result<(usize, Vec<Example>)> {
    let content = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| format_err(path, 1, "empty file"))?;
    let input_dim: usize = header
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| format_err(path, 1, format!("expected `dim=<positive int>`, got `{header}`")))?;

    let mut examples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + input_dim {
            return Err(format_err(
                path,
                lineno,
                format!("expected {} fields, got {}", 3 + input_dim, fields.len()),
            ));
        }
        let domain: u32 = fields[0]
            .parse()
            .map_err(|_| format_err(path, lineno, format!("bad domain id `{}`", fields[0])))?;
        let class: u32 = fields[1]
            .parse()
            .map_err(|_| format_err(path, lineno, format!("bad class id `{}`", fields[1])))?;
        let labeled = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(format_err(
                    path,
                    lineno,
                    format!("labeled flag must be 0 or 1, got `{other}`"),
                ))
            }
        };
        let mut features = Vec::with_capacity(input_dim);
        for f in &fields[3..] {
            let v: f64 = f
                .parse()
                .map_err(|_| format_err(path, lineno, format!("bad feature `{f}`")))?;
            if !v.is_finite() {
                return Err(format_err(path, lineno, format!("non-finite feature `{f}`")));
            }
            features.push(v);
        }
        examples.push(Example {
            features,
            class_id: ClassId(class),
            domain_id: DomainId(domain),
            labeled,
        });
    }
    if examples.is_empty() {
        return Err(format_err(path, 1, "no examples after header"));
    }
    Ok((input_dim, examples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            domains: 3,
            classes_per_domain: 4,
            samples_per_class: 5,
            input_dim: 6,
            domain_offset_scale: 2.0,
            class_center_scale: 1.5,
            within_class_sigma: 0.5,
            splits: SplitFractions {
                train: 0.5,
                val: 0.25,
                test: 0.25,
            },
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized_right() {
        let spec = small_spec();
        let d1 = generate_synthetic(&spec, &mut SeededRng::new(33)).unwrap();
        let d2 = generate_synthetic(&spec, &mut SeededRng::new(33)).unwrap();
        assert_eq!(d1.examples(), d2.examples());
        assert_eq!(d1.examples().len(), 3 * 4 * 5);
        assert_eq!(d1.input_dim(), 6);
        assert_eq!(d1.domains().len(), 3);
    }

    #[test]
    fn splits_partition_each_domain() {
        let spec = small_spec();
        let d = generate_synthetic(&spec, &mut SeededRng::new(1)).unwrap();
        for dom in d.domains() {
            let train = d.classes_of(dom, Split::Train);
            let val = d.classes_of(dom, Split::Val);
            let test = d.classes_of(dom, Split::Test);
            assert_eq!(train.len(), 2);
            assert_eq!(val.len(), 1);
            assert_eq!(test.len(), 1);
            let mut all: Vec<ClassId> = train.into_iter().chain(val).chain(test).collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 4, "splits overlap in domain {dom:?}");
        }
    }

    #[test]
    fn same_class_is_tighter_than_cross_class() {
        // Mean within-class distance must be well below cross-class distance;
        // this is what makes the data learnable at all.
        let spec = small_spec();
        let d = generate_synthetic(&spec, &mut SeededRng::new(5)).unwrap();
        let ex = d.examples();
        let (mut within, mut wn) = (0.0, 0);
        let (mut cross, mut cn) = (0.0, 0);
        for i in 0..ex.len() {
            for j in (i + 1)..ex.len() {
                let dist: f64 = ex[i]
                    .features
                    .iter()
                    .zip(&ex[j].features)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if ex[i].class_id == ex[j].class_id {
                    within += dist;
                    wn += 1;
                } else {
                    cross += dist;
                    cn += 1;
                }
            }
        }
        assert!(within / wn as f64 * 1.5 < cross / cn as f64);
    }

    #[test]
    fn split_assignment_depends_only_on_seed_not_rng_position() {
        let spec = small_spec();
        let mut rng = SeededRng::new(17);
        let d1 = generate_synthetic(&spec, &mut rng).unwrap();
        // Loader path: rebuild from raw examples with a fresh substream of
        // the same parent seed.
        let raw = d1.examples().to_vec();
        let mut split_rng = SeededRng::new(17).substream("splits");
        let d2 = Dataset::from_examples(6, raw, &spec.splits, &mut split_rng).unwrap();
        for c in d1.split_of.keys() {
            assert_eq!(d1.split_of(*c), d2.split_of(*c));
        }
    }

    #[test]
    fn from_examples_rejects_ragged_features_and_straddling_classes() {
        let mk = |features: Vec<f64>, class: u32, domain: u32| Example {
            features,
            class_id: ClassId(class),
            domain_id: DomainId(domain),
            labeled: true,
        };
        let fr = SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let mut rng = SeededRng::new(0);
        let err = Dataset::from_examples(
            2,
            vec![mk(vec![1.0, 2.0], 0, 0), mk(vec![1.0], 0, 0)],
            &fr,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));

        let err = Dataset::from_examples(
            1,
            vec![mk(vec![1.0], 0, 0), mk(vec![2.0], 0, 1)],
            &fr,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn mask_labels_honours_ceil_per_class_and_is_deterministic() {
        let spec = small_spec(); // 5 samples per class
        let mut d1 = generate_synthetic(&spec, &mut SeededRng::new(2)).unwrap();
        let mut d2 = generate_synthetic(&spec, &mut SeededRng::new(2)).unwrap();
        let fr = LabelFractions::uniform(0.3); // ceil(1.5) = 2 of 5
        mask_labels(&mut d1, &fr, &mut SeededRng::new(9)).unwrap();
        mask_labels(&mut d2, &fr, &mut SeededRng::new(9)).unwrap();
        for (a, b) in d1.examples().iter().zip(d2.examples()) {
            assert_eq!(a.labeled, b.labeled);
        }
        for class in d1.by_class.keys() {
            let labeled = d1.by_class[class]
                .iter()
                .filter(|&&i| d1.examples[i].labeled)
                .count();
            assert_eq!(labeled, 2);
        }
    }

    #[test]
    fn mask_labels_extremes() {
        let spec = small_spec();
        let mut d = generate_synthetic(&spec, &mut SeededRng::new(2)).unwrap();
        mask_labels(&mut d, &LabelFractions::uniform(0.0), &mut SeededRng::new(1)).unwrap();
        assert!(d.examples().iter().all(|e| !e.labeled));
        assert!(d.examples().iter().all(|e| e.training_label().is_none()));
        mask_labels(&mut d, &LabelFractions::uniform(1.0), &mut SeededRng::new(1)).unwrap();
        assert!(d.examples().iter().all(|e| e.labeled));
    }

    #[test]
    fn per_domain_fraction_overrides_apply() {
        let spec = small_spec();
        let mut d = generate_synthetic(&spec, &mut SeededRng::new(2)).unwrap();
        let mut fr = LabelFractions::uniform(0.0);
        fr.per_domain.insert(DomainId(1), 1.0);
        mask_labels(&mut d, &fr, &mut SeededRng::new(4)).unwrap();
        for ex in d.examples() {
            assert_eq!(ex.labeled, ex.domain_id == DomainId(1));
        }
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let aug = AugmentationSpec::identity();
        let mut rng = SeededRng::new(3);
        let x = vec![1.0, -2.5, 0.0, 3.25];
        assert_eq!(aug.augment(&x, &mut rng), x);
    }

    #[test]
    fn augmentation_perturbs_but_preserves_scale() {
        let aug = AugmentationSpec {
            noise_sigma: 0.1,
            scale_jitter: (0.9, 1.1),
            dropout_prob: 0.0,
        };
        let mut rng = SeededRng::new(8);
        let x = vec![1.0; 32];
        let y = aug.augment(&x, &mut rng);
        assert_ne!(x, y);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.2, "mean {mean}");
    }

    #[test]
    fn dropout_zeroes_roughly_the_right_fraction() {
        let aug = AugmentationSpec {
            noise_sigma: 0.0,
            scale_jitter: (1.0, 1.0),
            dropout_prob: 0.25,
        };
        let mut rng = SeededRng::new(10);
        let x = vec![1.0; 10_000];
        let y = aug.augment(&x, &mut rng);
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        assert!((zeros as f64 / 10_000.0 - 0.25).abs() < 0.03);
    }

    #[test]
    fn augmentation_spec_validation() {
        let mut a = AugmentationSpec::identity();
        a.scale_jitter = (1.2, 0.8);
        assert!(a.validate().is_err());
        a = AugmentationSpec::identity();
        a.dropout_prob = 1.0;
        assert!(a.validate().is_err());
        a = AugmentationSpec::identity();
        a.noise_sigma = -0.1;
        assert!(a.validate().is_err());
    }

    fn batch_plan(mixing: BatchMixing) -> BatchPlan {
        BatchPlan {
            batch_size: 12,
            positives: 3,
            mixing,
        }
    }

    #[test]
    fn batches_use_only_train_examples() {
        let spec = small_spec();
        let d = generate_synthetic(&spec, &mut SeededRng::new(6)).unwrap();
        let aug = AugmentationSpec::identity();
        let mut rng = SeededRng::new(60);
        for _ in 0..20 {
            let b = build_contrastive_batch(&d, &batch_plan(BatchMixing::Impure), &aug, &mut rng)
                .unwrap();
            for q in &b.queries {
                let class = d.examples()[q.example_index].class_id;
                assert_eq!(d.split_of(class), Some(Split::Train));
            }
        }
    }

    #[test]
    fn pure_batches_stay_in_one_domain() {
        let spec = small_spec();
        let d = generate_synthetic(&spec, &mut SeededRng::new(6)).unwrap();
        let aug = AugmentationSpec::identity();
        let mut rng = SeededRng::new(61);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..30 {
            let b =
                build_contrastive_batch(&d, &batch_plan(BatchMixing::Pure), &aug, &mut rng).unwrap();
            let dom = b.domain.expect("pure batches carry their domain");
            assert!(b.queries.iter().all(|q| q.domain == dom));
            seen.insert(dom);
        }
        // Over 30 batches all three domains should appear.
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn labeled_queries_get_p_keys_with_self_first() {
        let spec = small_spec();
        let d = generate_synthetic(&spec, &mut SeededRng::new(7)).unwrap();
        let aug = AugmentationSpec::identity(); // identity => views equal sources
        let mut rng = SeededRng::new(70);
        let b = build_contrastive_batch(&d, &batch_plan(BatchMixing::Impure), &aug, &mut rng)
            .unwrap();
        for q in &b.queries {
            assert_eq!(q.key_views.len(), 3);
            let src = &d.examples()[q.example_index];
            assert_eq!(q.key_views[0], src.features, "first key must be the self view");
            assert_eq!(q.query_view, src.features);
            // Extra keys come from the same class but not the same example
            // (class size 5 > P-1, so sampling is without replacement).
            for kv in &q.key_views[1..] {
                let donor = d
                    .examples()
                    .iter()
                    .position(|e| &e.features == kv)
                    .expect("identity augmentation preserves features");
                assert_ne!(donor, q.example_index);
                assert_eq!(d.examples()[donor].class_id, src.class_id);
            }
        }
    }

    #[test]
    fn unlabeled_queries_get_exactly_one_key() {
        let spec = small_spec();
        let mut d = generate_synthetic(&spec, &mut SeededRng::new(7)).unwrap();
        mask_labels(&mut d, &LabelFractions::uniform(0.0), &mut SeededRng::new(1)).unwrap();
        let aug = AugmentationSpec::identity();
        let mut rng = SeededRng::new(71);
        let b = build_contrastive_batch(&d, &batch_plan(BatchMixing::Impure), &aug, &mut rng)
            .unwrap();
        for q in &b.queries {
            assert_eq!(q.label, None);
            assert_eq!(q.key_views.len(), 1);
        }
    }

    #[test]
    fn masked_classmates_never_serve_as_positives() {
        // Partially labeled class: a labeled query may only draw extra
        // positives from classmates whose label is visible — that a masked
        // classmate shares the class is exactly what training cannot know.
        let spec = small_spec();
        let mut d = generate_synthetic(&spec, &mut SeededRng::new(7)).unwrap();
        mask_labels(&mut d, &LabelFractions::uniform(0.4), &mut SeededRng::new(2)).unwrap();
        let aug = AugmentationSpec::identity();
        let mut rng = SeededRng::new(72);
        for _ in 0..20 {
            let b = build_contrastive_batch(&d, &batch_plan(BatchMixing::Impure), &aug, &mut rng)
                .unwrap();
            for q in &b.queries {
                if q.label.is_none() {
                    continue;
                }
                for kv in &q.key_views[1..] {
                    let donor = d
                        .examples()
                        .iter()
                        .position(|e| &e.features == kv)
                        .expect("identity augmentation preserves features");
                    if donor != q.example_index {
                        assert!(
                            d.examples()[donor].labeled,
                            "masked classmate used as a positive"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn singleton_classes_fall_back_to_self_augmentations() {
        // One example per class: positives can only be self views.
        let spec = SyntheticSpec {
            samples_per_class: 1,
            ..small_spec()
        };
        let d = generate_synthetic(&spec, &mut SeededRng::new(8)).unwrap();
        let aug = AugmentationSpec::identity();
        let mut rng = SeededRng::new(80);
        let b = build_contrastive_batch(&d, &batch_plan(BatchMixing::Impure), &aug, &mut rng)
            .unwrap();
        for q in &b.queries {
            assert_eq!(q.key_views.len(), 3);
            let src = &d.examples()[q.example_index];
            for kv in &q.key_views {
                assert_eq!(kv, &src.features);
            }
        }
    }

    #[test]
    fn impure_domain_mix_tracks_pool_sizes() {
        // Unequal domains: chi-squared test against expected proportions.
        // With 2 domains sized 2:1 in the train pool and 3000 queries, the
        // chi-squared statistic (df=1) should stay below 10.83 (p=0.001).
        let spec = SyntheticSpec {
            domains: 2,
            classes_per_domain: 6,
            samples_per_class: 10,
            input_dim: 3,
            domain_offset_scale: 1.0,
            class_center_scale: 1.0,
            within_class_sigma: 0.3,
            splits: SplitFractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
        };
        let mut d = generate_synthetic(&spec, &mut SeededRng::new(4)).unwrap();
        // Shrink domain 1's pool by keeping only 3 of its classes: drop the
        // examples of the other classes.
        let keep: Vec<Example> = d
            .examples()
            .iter()
            .filter(|e| e.domain_id == DomainId(0) || e.class_id.0 % 2 == 0)
            .cloned()
            .collect();
        let mut rng = SeededRng::new(5).substream("splits");
        d = Dataset::from_examples(3, keep, &spec.splits, &mut rng).unwrap();

        let pool = d.split_example_indices(Split::Train);
        let n0 = pool
            .iter()
            .filter(|&&i| d.examples()[i].domain_id == DomainId(0))
            .count() as f64;
        let n1 = pool.len() as f64 - n0;

        let plan = BatchPlan {
            batch_size: 100,
            positives: 1,
            mixing: BatchMixing::Impure,
        };
        let aug = AugmentationSpec::identity();
        let mut brng = SeededRng::new(42);
        let mut c0 = 0.0;
        let mut c1 = 0.0;
        for _ in 0..30 {
            let b = build_contrastive_batch(&d, &plan, &aug, &mut brng).unwrap();
            for q in &b.queries {
                if q.domain == DomainId(0) {
                    c0 += 1.0;
                } else {
                    c1 += 1.0;
                }
            }
        }
        let total = c0 + c1;
        let e0 = total * n0 / (n0 + n1);
        let e1 = total * n1 / (n0 + n1);
        let chi2 = (c0 - e0).powi(2) / e0 + (c1 - e1).powi(2) / e1;
        assert!(chi2 < 10.83, "chi2 {chi2}, counts ({c0}, {c1}), expected ({e0}, {e1})");
    }

    #[test]
    fn batch_plan_validation() {
        let spec = small_spec();
        let d = generate_synthetic(&spec, &mut SeededRng::new(6)).unwrap();
        let aug = AugmentationSpec::identity();
        let mut rng = SeededRng::new(1);
        let bad_batch = BatchPlan {
            batch_size: 0,
            positives: 1,
            mixing: BatchMixing::Impure,
        };
        assert!(build_contrastive_batch(&d, &bad_batch, &aug, &mut rng).is_err());
        let bad_pos = BatchPlan {
            batch_size: 1,
            positives: 0,
            mixing: BatchMixing::Impure,
        };
        assert!(build_contrastive_batch(&d, &bad_pos, &aug, &mut rng).is_err());
    }

    #[test]
    fn text_roundtrip_is_exact_and_byte_stable() {
        let spec = small_spec();
        let mut d = generate_synthetic(&spec, &mut SeededRng::new(12)).unwrap();
        mask_labels(&mut d, &LabelFractions::uniform(0.4), &mut SeededRng::new(3)).unwrap();

        let dir = std::env::temp_dir().join(format!("supmoco-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.txt");
        let p2 = dir.join("b.txt");
        write_text(&d, &p1).unwrap();
        let (dim, examples) = read_text(&p1).unwrap();
        assert_eq!(dim, d.input_dim());
        assert_eq!(examples, d.examples());

        let mut rng = SeededRng::new(12).substream("splits");
        let d2 = Dataset::from_examples(dim, examples, &spec.splits, &mut rng).unwrap();
        write_text(&d2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn read_text_rejects_malformed_input() {
        let dir = std::env::temp_dir().join(format!("supmoco-data-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cases: Vec<(&str, &str)> = vec![
            ("empty", ""),
            ("header", "dim=zero\n0,0,1,1.0"),
            ("fields", "dim=2\n0,0,1,1.0"),
            ("flag", "dim=1\n0,0,2,1.0"),
            ("feature", "dim=1\n0,0,1,abc"),
            ("nonfinite", "dim=1\n0,0,1,NaN"),
            ("noexamples", "dim=1\n"),
        ];
        for (name, content) in cases {
            let p = dir.join(name);
            std::fs::write(&p, content).unwrap();
            let err = read_text(&p).unwrap_err();
            assert!(
                matches!(err, Error::Format { .. }),
                "case {name} gave {err:?}"
            );
        }
        let missing = read_text(&dir.join("does-not-exist")).unwrap_err();
        assert!(matches!(missing, Error::MissingArtifact(_)));
        std::fs::remove_dir_all(&dir).ok();
    }
}
