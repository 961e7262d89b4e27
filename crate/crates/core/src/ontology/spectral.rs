use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::affinity::AffinityMatrix;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::{squared_distance, Scalar};

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 200;

/// Normalized spectral clustering of the classes behind `aff` into `k`
/// non-empty categories. Category ids are numbered by their lowest member.
pub fn spectral_partition<F: Scalar>(aff: &AffinityMatrix<F>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = aff.n();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n}")));
    }
    if !aff.values().is_symmetric() {
        return Err(Error::Invariant("affinity matrix is not symmetric".into()));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    if k == n {
        return Ok((0..n).collect());
    }

    let shift = aff.values().min_value();
    let mut adj = Matrix::from_fn(n, n, |i, j| if i == j { F::zero() } else { aff.get(i, j) - shift });
    let inv_sqrt_deg: Vec<F> = (0..n)
        .map(|i| {
            let d: F = adj.row(i).iter().copied().sum();
            if d > F::zero() {
                F::one() / d.sqrt()
            } else {
                F::zero()
            }
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            let normalized = inv_sqrt_deg[i] * adj[(i, j)] * inv_sqrt_deg[j];
            adj[(i, j)] = if i == j { F::one() } else { F::zero() } - normalized;
        }
    }
    // Exact symmetry before the eigensolver.
    for i in 0..n {
        for j in 0..i {
            let avg = (adj[(i, j)] + adj[(j, i)]) / F::of(2.0);
            adj[(i, j)] = avg;
            adj[(j, i)] = avg;
        }
    }
    let eig = symmetric_eigen(&adj)?;
    let mut embedding = Matrix::from_fn(n, k, |r, c| eig.vectors[(r, c)]);
    for r in 0..n {
        let norm = embedding.row(r).iter().map(|&v| v * v).sum::<F>().sqrt();
        if norm > F::zero() {
            for v in embedding.row_mut(r) {
                *v /= norm;
            }
        }
    }
    Ok(canonical_labels(&kmeans(&embedding, k, seed), k))
}

/// Relabels clusters in order of their smallest member.
fn canonical_labels(labels: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect()
}

/// Seeded k-means on the rows of `points`: farthest-first and k-means++
/// starts, Lloyd iterations, best inertia wins. Assignment ties go to the lower
/// cluster index and empty clusters take the farthest point of the largest one.
pub fn kmeans<F: Scalar>(points: &Matrix<F>, k: usize, seed: u64) -> Vec<usize> {
    let n = points.rows();
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(F, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let centers = if restart == 0 {
            farthest_first(points, k, rng.random_range(0..n))
        } else {
            plus_plus(points, k, &mut rng)
        };
        let (inertia, labels) = lloyd(points, centers);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn farthest_first<F: Scalar>(points: &Matrix<F>, k: usize, first: usize) -> Matrix<F> {
    let n = points.rows();
    let mut chosen = vec![first];
    let mut nearest: Vec<F> = (0..n).map(|i| squared_distance(points.row(i), points.row(first))).collect();
    while chosen.len() < k {
        let mut pick = 0;
        for i in 1..n {
            if nearest[i] > nearest[pick] {
                pick = i;
            }
        }
        chosen.push(pick);
        for (i, near) in nearest.iter_mut().enumerate() {
            *near = near.min(squared_distance(points.row(i), points.row(pick)));
        }
    }
    Matrix::from_fn(k, points.cols(), |c, d| points[(chosen[c], d)])
}

fn plus_plus<F: Scalar>(points: &Matrix<F>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<F> {
    let n = points.rows();
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut nearest: Vec<F> = (0..n).map(|i| squared_distance(points.row(i), points.row(first))).collect();
    while chosen.len() < k {
        let total: F = nearest.iter().copied().sum();
        let pick = if total > F::zero() {
            let target = F::of(rng.random::<f64>()) * total;
            let mut acc = F::zero();
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && d > F::zero() {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(pick);
        for (i, near) in nearest.iter_mut().enumerate() {
            *near = near.min(squared_distance(points.row(i), points.row(pick)));
        }
    }
    Matrix::from_fn(k, points.cols(), |c, d| points[(chosen[c], d)])
}

fn assign<F: Scalar>(points: &Matrix<F>, centers: &Matrix<F>) -> (F, Vec<usize>) {
    let mut inertia = F::zero();
    let labels = (0..points.rows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = squared_distance(points.row(i), centers.row(0));
            for c in 1..centers.rows() {
                let d = squared_distance(points.row(i), centers.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            inertia += best_d;
            best
        })
        .collect();
    (inertia, labels)
}

fn lloyd<F: Scalar>(points: &Matrix<F>, mut centers: Matrix<F>) -> (F, Vec<usize>) {
    let k = centers.rows();
    let dim = points.cols();
    let (_, mut labels) = assign(points, &centers);
    for _ in 0..KMEANS_MAX_ITER {
        repair_empty(points, &centers, &mut labels, k);
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            let cnt = F::of_usize(count);
            for v in sums.row_mut(c) {
                *v /= cnt;
            }
        }
        centers = sums;
        let (_, next) = assign(points, &centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(points, &centers, &mut labels, k);
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let members: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == l).collect();
            let centroid: Vec<F> = (0..dim)
                .map(|d| members.iter().map(|&j| points[(j, d)]).sum::<F>() / F::of_usize(members.len()))
                .collect();
            squared_distance(points.row(i), &centroid)
        })
        .sum();
    (inertia, labels)
}

fn repair_empty<F: Scalar>(points: &Matrix<F>, centers: &Matrix<F>, labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
        let mut far = None;
        let mut far_d = F::neg_infinity();
        for (i, &l) in labels.iter().enumerate() {
            if l == largest {
                let d = squared_distance(points.row(i), centers.row(largest));
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        labels[far.expect("largest cluster is non-empty")] = empty;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub members: Vec<usize>,
}

/// Category layer over the class layer, plus the left-to-right leaf order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoLayerOntology {
    pub categories: Vec<Category>,
    pub leaf_order: Vec<usize>,
}

impl TwoLayerOntology {
    /// Builds the ontology from a class → category assignment with ids in `0..k`.
    pub fn from_assignment(assignment: &[usize], k: usize) -> Result<Self> {
        let mut categories: Vec<Category> = (0..k).map(|id| Category { id, members: Vec::new() }).collect();
        for (class, &cat) in assignment.iter().enumerate() {
            categories
                .get_mut(cat)
                .ok_or_else(|| Error::invalid(format!("category {cat} out of range 0..{k}")))?
                .members
                .push(class);
        }
        if let Some(c) = categories.iter().find(|c| c.members.is_empty()) {
            return Err(Error::Invariant(format!("category {} is empty", c.id)));
        }
        let leaf_order = categories.iter().flat_map(|c| c.members.iter().copied()).collect();
        Ok(Self { categories, leaf_order })
    }

    pub fn n_classes(&self) -> usize {
        self.leaf_order.len()
    }

    pub fn largest_category(&self) -> usize {
        self.categories.iter().map(|c| c.members.len()).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.leaf_order.len();
        let mut seen = vec![false; n];
        for &c in &self.leaf_order {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Invariant("leaf order is not a permutation".into()));
            }
        }
        let flattened: Vec<usize> = self.categories.iter().flat_map(|c| c.members.iter().copied()).collect();
        if flattened != self.leaf_order {
            return Err(Error::Invariant("categories are not contiguous in the leaf order".into()));
        }
        Ok(())
    }
}

pub fn build_two_layer_ontology<F: Scalar>(aff: &AffinityMatrix<F>, k: usize, seed: u64) -> Result<TwoLayerOntology> {
    let assignment = spectral_partition(aff, k, seed)?;
    TwoLayerOntology::from_assignment(&assignment, k)
}

/// Smallest category count, starting from `⌈n / max_size⌉`, whose largest
/// category holds at most `max_size` classes.
pub fn build_ontology_with_max_category<F: Scalar>(
    aff: &AffinityMatrix<F>,
    max_size: usize,
    seed: u64,
) -> Result<TwoLayerOntology> {
    if max_size == 0 {
        return Err(Error::invalid("maximum category size must be positive"));
    }
    let n = aff.n();
    let mut k = n.div_ceil(max_size).max(1);
    loop {
        let ontology = build_two_layer_ontology(aff, k, seed)?;
        if ontology.largest_category() <= max_size || k == n {
            return Ok(ontology);
        }
        k += 1;
    }
}
