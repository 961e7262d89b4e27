//! Labelled feature datasets: synthetic hierarchical Gaussian mixtures with a
//! matching taxonomy, and a plain CSV interchange format.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{TaxonomyNode, TaxonomyTree};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    n_classes: usize,
    dim: usize,
    features: Vec<F>,
    labels: Vec<usize>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl<F: Scalar> Dataset<F> {
    /// `train` and `test` are sample indices; they are stored sorted.
    pub fn from_parts(
        n_classes: usize,
        dim: usize,
        features: Vec<F>,
        labels: Vec<usize>,
        mut train: Vec<usize>,
        mut test: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::dataset("feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::dataset("feature buffer does not match label count"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::dataset(format!("label {bad} outside 0..{n_classes}")));
        }
        train.sort_unstable();
        test.sort_unstable();
        let mut assigned = vec![false; labels.len()];
        for &i in train.iter().chain(&test) {
            let slot = assigned.get_mut(i).ok_or_else(|| Error::dataset(format!("split index {i} out of range")))?;
            if std::mem::replace(slot, true) {
                return Err(Error::dataset(format!("sample {i} appears in more than one split")));
            }
        }
        if let Some(i) = assigned.iter().position(|a| !a) {
            return Err(Error::dataset(format!("sample {i} belongs to no split")));
        }
        let ds = Self { n_classes, dim, features, labels, train, test };
        for class in 0..n_classes {
            let (tr, te) = ds.split_counts(class);
            if tr == 0 || te == 0 {
                return Err(Error::dataset(format!(
                    "class {class} has {tr} train and {te} test samples; both must be non-zero"
                )));
            }
        }
        Ok(ds)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[F] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn split_counts(&self, class: usize) -> (usize, usize) {
        let count = |idx: &[usize]| idx.iter().filter(|&&i| self.labels[i] == class).count();
        (count(&self.train), count(&self.test))
    }

    /// Samples per class over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Training samples grouped by class.
    pub fn train_by_class(&self) -> Vec<Vec<&[F]>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for &i in &self.train {
            out[self.labels[i]].push(self.sample(i));
        }
        out
    }

    /// Training sample indices grouped by class.
    pub fn train_indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for &i in &self.train {
            out[self.labels[i]].push(i);
        }
        out
    }

    /// Per-feature mean and standard deviation over the training split.
    /// Constant features get a deviation of 1.
    pub fn train_moments(&self) -> (Vec<F>, Vec<F>) {
        let count = F::of_usize(self.train.len());
        let mut mean = vec![F::zero(); self.dim];
        for &i in &self.train {
            for (m, &v) in mean.iter_mut().zip(self.sample(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![F::zero(); self.dim];
        for &i in &self.train {
            for ((s, &v), &m) in var.iter_mut().zip(self.sample(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > F::zero() {
                    sd
                } else {
                    F::one()
                }
            })
            .collect();
        (mean, std)
    }

    /// Writes the CSV format: `#dim=<d>,classes=<Ω>` then `split,class_id,v1..vd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#dim={},classes={}", self.dim, self.n_classes);
        let mut in_test = vec![false; self.len()];
        for &i in &self.test {
            in_test[i] = true;
        }
        for (i, &is_test) in in_test.iter().enumerate() {
            out.push_str(if is_test { "test" } else { "train" });
            let _ = write!(out, ",{}", self.labels[i]);
            for v in self.sample(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty dataset file"))?;
        let (dim, n_classes) = parse_header(header)?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (lineno, line) in lines {
            let line_no = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let idx = labels.len();
            match fields.next().map(str::trim) {
                Some("train") => train.push(idx),
                Some("test") => test.push(idx),
                other => {
                    return Err(Error::parse(line_no, format!("unknown split label {:?}", other.unwrap_or(""))));
                }
            }
            let class = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::parse(line_no, "missing or malformed class id"))?;
            if class >= n_classes {
                return Err(Error::parse(line_no, format!("class id {class} outside 0..{n_classes}")));
            }
            let values = fields
                .map(|f| f.trim().parse::<f64>().map(F::of))
                .collect::<std::result::Result<Vec<F>, _>>()
                .map_err(|e| Error::parse(line_no, format!("malformed value: {e}")))?;
            if values.len() != dim {
                return Err(Error::parse(line_no, format!("expected {dim} values, found {}", values.len())));
            }
            labels.push(class);
            features.extend(values);
        }
        if labels.is_empty() {
            return Err(Error::parse(1, "dataset has no rows"));
        }
        Self::from_parts(n_classes, dim, features, labels, train, test)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let body = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(1, "header must start with '#dim=<d>,classes=<n>'"))?;
    let mut dim = None;
    let mut classes = None;
    for part in body.split(',') {
        let (key, value) =
            part.split_once('=').ok_or_else(|| Error::parse(1, format!("malformed header field {part:?}")))?;
        let value: usize =
            value.trim().parse().map_err(|_| Error::parse(1, format!("header field {key} is not an integer")))?;
        match key.trim() {
            "dim" => dim = Some(value),
            "classes" => classes = Some(value),
            other => return Err(Error::parse(1, format!("unknown header field {other}"))),
        }
    }
    match (dim, classes) {
        (Some(d), Some(c)) if d > 0 && c > 0 => Ok((d, c)),
        _ => Err(Error::parse(1, "header needs positive dim and classes")),
    }
}

pub fn load_features<F: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<F>> {
    Dataset::parse_csv(&Error::read_text(path)?)
}

/// Per-class stratified split; each class keeps at least one sample per side.
pub fn split<F: Scalar>(dataset: &Dataset<F>, train_fraction: f64, seed: u64) -> Result<Dataset<F>> {
    let (train, test) = stratified_indices(&dataset.labels, dataset.n_classes, train_fraction, seed)?;
    Dataset::from_parts(dataset.n_classes, dataset.dim, dataset.features.clone(), dataset.labels.clone(), train, test)
}

fn stratified_indices(
    labels: &[usize],
    n_classes: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::dataset(format!(
                "class {class} has {} samples; a split needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    Ok((train, test))
}

/// Parameters of the synthetic hierarchical benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_categories: usize,
    pub classes_per_category: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation of category centres.
    pub category_spread: f64,
    /// Per-coordinate standard deviation of class centres around their category.
    pub class_spread: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_categories: 8,
            classes_per_category: 5,
            dim: 16,
            samples_per_class: 30,
            category_spread: 10.0,
            class_spread: 1.0,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn n_classes(&self) -> usize {
        self.n_categories * self.classes_per_category
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.classes_per_category == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid("synthetic counts must be at least 1"));
        }
        if !(self.class_spread > 0.0 && self.category_spread > self.class_spread) || !self.category_spread.is_finite() {
            return Err(Error::invalid("spreads must satisfy category_spread > class_spread > 0"));
        }
        Ok(())
    }
}

/// Hierarchical Gaussian mixture plus the root → category → class taxonomy
/// that generated it. Class ids are shuffled relative to categories, so
/// siblings are generally not adjacent in id order. The dataset comes split
/// with `spec.train_fraction`.
pub fn generate_synthetic<F: Scalar>(spec: &SynthSpec) -> Result<(Dataset<F>, TaxonomyTree)> {
    spec.validate()?;
    let n_classes = spec.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut category_of: Vec<usize> = (0..n_classes).map(|c| c / spec.classes_per_category).collect();
    category_of.shuffle(&mut rng);

    let mut gaussian = |scale: f64, around: &[f64]| -> Vec<f64> {
        around
            .iter()
            .map(|&c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                c + scale * z
            })
            .collect()
    };
    let origin = vec![0.0; spec.dim];
    let category_centres: Vec<Vec<f64>> =
        (0..spec.n_categories).map(|_| gaussian(spec.category_spread, &origin)).collect();
    let class_centres: Vec<Vec<f64>> =
        (0..n_classes).map(|c| gaussian(spec.class_spread, &category_centres[category_of[c]])).collect();
    let mut features = Vec::with_capacity(n_classes * spec.samples_per_class * spec.dim);
    let mut labels = Vec::with_capacity(n_classes * spec.samples_per_class);
    for (class, centre) in class_centres.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            features.extend(gaussian(1.0, centre).into_iter().map(F::of));
            labels.push(class);
        }
    }

    let mut nodes = vec![TaxonomyNode { id: 0, parent: None, label: "root".into() }];
    for cat in 0..spec.n_categories {
        nodes.push(TaxonomyNode { id: 1 + cat as u64, parent: Some(0), label: format!("category_{cat}") });
    }
    for (class, &cat) in category_of.iter().enumerate() {
        nodes.push(TaxonomyNode {
            id: (1 + spec.n_categories + class) as u64,
            parent: Some(1 + cat as u64),
            label: format!("class_{class}"),
        });
    }
    let tree = TaxonomyTree::from_nodes(nodes)?;

    let split_seed = spec.seed.wrapping_add(0x5EED);
    let (train, test) = stratified_indices(&labels, n_classes, spec.train_fraction, split_seed)?;
    let dataset = Dataset::from_parts(n_classes, spec.dim, features, labels, train, test)?;
    Ok((dataset, tree))
}
