use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::TaxonomyTree;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{squared_distance, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityKind {
    Semantic,
    Visual,
}

/// Symmetric class-by-class affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<F> {
    values: Matrix<F>,
    kind: AffinityKind,
}

impl<F: Scalar> AffinityMatrix<F> {
    pub fn new(values: Matrix<F>, kind: AffinityKind) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Invariant("affinity matrix must be square".into()));
        }
        if !values.all_finite() {
            return Err(Error::Invariant("affinity matrix has non-finite entries".into()));
        }
        if !values.is_symmetric() {
            return Err(Error::Invariant("affinity matrix is not symmetric".into()));
        }
        if kind == AffinityKind::Visual && values.min_value() < F::zero() {
            return Err(Error::Invariant("visual affinities must be non-negative".into()));
        }
        Ok(Self { values, kind })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn kind(&self) -> AffinityKind {
        self.kind
    }

    pub fn values(&self) -> &Matrix<F> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.values[(i, j)]
    }

    /// Header row of class identifiers, then one row of affinities per class.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let mut out = (0..n).map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        out.push('\n');
        for i in 0..n {
            let row: Vec<String> = self.values.row(i).iter().map(|v| format!("{:e}", v.as_f64())).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str, kind: AffinityKind) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty affinity file"))?;
        let n = header.split(',').count();
        let mut rows = Vec::with_capacity(n);
        for (lineno, line) in lines {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>().map(F::of))
                .collect::<std::result::Result<Vec<F>, _>>()
                .map_err(|e| Error::parse(lineno + 1, e.to_string()))?;
            if row.len() != n {
                return Err(Error::parse(lineno + 1, format!("expected {n} values, got {}", row.len())));
            }
            rows.push(row);
        }
        if rows.len() != n {
            return Err(Error::parse(rows.len() + 1, format!("expected {n} rows")));
        }
        Self::new(Matrix::from_rows(&rows)?, kind)
    }
}

/// `−ln(1 / 2H)`, the value used on the diagonal of the semantic matrix.
pub fn self_affinity_cap<F: Scalar>(tree: &TaxonomyTree) -> F {
    -(F::one() / F::of_usize(2 * tree.depth_max())).ln()
}

/// Hop-distance semantic affinity `−ln(D / 2H)` with D the number of nodes on
/// the tree path between the two leaves.
pub fn semantic_affinity<F: Scalar>(tree: &TaxonomyTree, i: usize, j: usize) -> Result<F> {
    semantic_affinity_with(tree, i, j, |t, a, b| t.path_node_count(a, b))
}

/// Same as [`semantic_affinity`] with a caller-supplied path length. The
/// length is clamped below at 1 so identical classes map to the cap.
pub fn semantic_affinity_with<F, D>(tree: &TaxonomyTree, i: usize, j: usize, distance: D) -> Result<F>
where
    F: Scalar,
    D: Fn(&TaxonomyTree, usize, usize) -> Result<usize>,
{
    tree.leaf_node(i)?;
    tree.leaf_node(j)?;
    let d = if i == j { 1 } else { distance(tree, i, j)?.max(1) };
    Ok(-(F::of_usize(d) / F::of_usize(2 * tree.depth_max())).ln())
}

pub fn build_semantic_matrix<F: Scalar>(tree: &TaxonomyTree) -> Result<AffinityMatrix<F>> {
    let n = tree.n_classes();
    if n < 2 {
        return Err(Error::invalid("semantic matrix needs at least two classes"));
    }
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        values[(i, i)] = self_affinity_cap(tree);
        for j in 0..i {
            let psi = semantic_affinity(tree, i, j)?;
            values[(i, j)] = psi;
            values[(j, i)] = psi;
        }
    }
    AffinityMatrix::new(values, AffinityKind::Semantic)
}

/// Gaussian radial kernel settings. Without an explicit bandwidth, the median
/// pairwise distance over a seeded subsample of the pooled points is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Option<f64>,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { bandwidth: None, sample_size: 256, seed: 0 }
    }
}

impl KernelConfig {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        Self { bandwidth: Some(bandwidth), ..Self::default() }
    }

    /// Bandwidth for the given per-class point sets.
    pub fn resolve_bandwidth<F: Scalar>(&self, classes: &[Vec<&[F]>]) -> F {
        if let Some(b) = self.bandwidth {
            return F::of(b);
        }
        // Canonical point order so the result ignores ordering within a class.
        let mut pooled: Vec<&[F]> = Vec::new();
        for class in classes {
            let mut pts = class.clone();
            pts.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            pooled.extend(pts);
        }
        let picked: Vec<&[F]> = if pooled.len() > self.sample_size.max(2) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let mut idx = sample(&mut rng, pooled.len(), self.sample_size.max(2)).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pooled[i]).collect()
        } else {
            pooled
        };
        let mut dists: Vec<F> = Vec::new();
        for a in 0..picked.len() {
            for b in 0..a {
                dists.push(squared_distance(picked[a], picked[b]).sqrt());
            }
        }
        if dists.is_empty() {
            return F::one();
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mid = dists.len() / 2;
        let median =
            if dists.len().is_multiple_of(2) { (dists[mid - 1] + dists[mid]) / F::of(2.0) } else { dists[mid] };
        if median > F::zero() {
            median
        } else {
            F::one()
        }
    }
}

pub fn gaussian_kernel<F: Scalar>(a: &[F], b: &[F], bandwidth: F) -> F {
    (-squared_distance(a, b) / (F::of(2.0) * bandwidth * bandwidth)).exp()
}

/// Class-averaged kernel similarity: entry (i, j) is the mean of κ over all
/// cross pairs of class i and class j samples.
pub fn class_kernel_matrix<F: Scalar>(classes: &[Vec<&[F]>], bandwidth: F) -> Result<AffinityMatrix<F>> {
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::dataset(format!("class slot {c} has no samples")));
    }
    let n = classes.len();
    let rows: Vec<Vec<F>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..=i)
                .map(|j| {
                    let mut total = F::zero();
                    for a in &classes[i] {
                        for b in &classes[j] {
                            total += gaussian_kernel(a, b, bandwidth);
                        }
                    }
                    total / F::of_usize(classes[i].len() * classes[j].len())
                })
                .collect()
        })
        .collect();
    let mut values = Matrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    AffinityMatrix::new(values, AffinityKind::Visual)
}

/// Visual affinity over per-class sample sets with a Gaussian kernel.
pub fn visual_affinity_from_classes<F: Scalar>(
    classes: &[Vec<&[F]>],
    kernel: &KernelConfig,
) -> Result<AffinityMatrix<F>> {
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::dataset(format!("class {c} has no samples")));
    }
    class_kernel_matrix(classes, kernel.resolve_bandwidth(classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(leaves: usize) -> TaxonomyTree {
        let mut text = String::from("0\t-\troot\n");
        for i in 1..=leaves {
            text.push_str(&format!("{i}\t0\tleaf{i}\n"));
        }
        TaxonomyTree::parse_tsv(&text).unwrap()
    }

    /// root -> chain of `h - 2` internal nodes -> two leaves, so H = h and
    /// the two leaves are 3 nodes apart; plus a leaf hanging off the root.
    fn chain_tree(h: usize) -> TaxonomyTree {
        let mut text = String::from("0\t-\troot\n");
        for i in 1..h - 1 {
            text.push_str(&format!("{i}\t{}\tn{i}\n", i - 1));
        }
        let last = h - 2;
        text.push_str(&format!("100\t{last}\ta\n101\t{last}\tb\n102\t0\tc\n"));
        TaxonomyTree::parse_tsv(&text).unwrap()
    }

    #[test]
    fn star_siblings() {
        let t = star(3);
        let psi: f64 = semantic_affinity(&t, 0, 1).unwrap();
        // D = 3 (leaf, root, leaf), H = 2
        assert!((psi - (-(3.0_f64 / 4.0).ln())).abs() < 1e-15);
        assert!((psi - 0.2877).abs() < 1e-4);
        let cap: f64 = semantic_affinity(&t, 1, 1).unwrap();
        assert!((cap - 4.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn path_of_2h_and_h() {
        let t = chain_tree(4);
        assert_eq!(t.depth_max(), 4);
        // a and c: a, n2, n1, root, c = 5 nodes; use a custom distance for the exact cases
        let zero: f64 = semantic_affinity_with(&t, 0, 2, |_, _, _| Ok(8)).unwrap();
        assert_eq!(zero, 0.0);
        let ln2: f64 = semantic_affinity_with(&t, 0, 2, |_, _, _| Ok(4)).unwrap();
        assert!((ln2 - std::f64::consts::LN_2).abs() < 1e-15);
        let psi: f64 = semantic_affinity(&t, 0, 2).unwrap();
        assert!((psi - (-(5.0_f64 / 8.0).ln())).abs() < 1e-15);
    }

    #[test]
    fn unknown_class() {
        let t = star(2);
        assert!(matches!(semantic_affinity::<f64>(&t, 0, 9), Err(Error::Lookup { .. })));
    }

    #[test]
    fn semantic_matrix_shapes() {
        let two: AffinityMatrix<f64> = build_semantic_matrix(&star(2)).unwrap();
        assert_eq!(two.get(0, 1), two.get(1, 0));
        let three: AffinityMatrix<f64> = build_semantic_matrix(&star(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 4.0_f64.ln() } else { -(0.75_f64).ln() };
                assert!((three.get(i, j) - expected).abs() < 1e-15);
            }
        }
        assert!(build_semantic_matrix::<f64>(&star(1)).is_err());
    }

    #[test]
    fn construction_rejects_asymmetry() {
        let m = Matrix::from_rows(&[vec![1.0_f64, 0.5], vec![0.4, 1.0]]).unwrap();
        assert!(matches!(AffinityMatrix::new(m, AffinityKind::Semantic), Err(Error::Invariant(_))));
        let neg = Matrix::from_rows(&[vec![1.0_f64, -0.5], vec![-0.5, 1.0]]).unwrap();
        assert!(AffinityMatrix::new(neg.clone(), AffinityKind::Visual).is_err());
        assert!(AffinityMatrix::new(neg, AffinityKind::Semantic).is_ok());
    }

    #[test]
    fn two_class_one_dimensional_kernel() {
        let a = [[0.0_f64], [0.0]];
        let b = [[1.0_f64], [1.0]];
        let classes: Vec<Vec<&[f64]>> =
            vec![a.iter().map(|v| v.as_slice()).collect(), b.iter().map(|v| v.as_slice()).collect()];
        let s = visual_affinity_from_classes(&classes, &KernelConfig::with_bandwidth(1.0)).unwrap();
        assert!((s.get(0, 1) - (-0.5_f64).exp()).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.6065).abs() < 1e-4);
        assert_eq!(s.get(0, 0), 1.0);
    }

    #[test]
    fn identical_sets_match_self_similarity() {
        let pts = [[0.0_f64, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let set: Vec<&[f64]> = pts.iter().map(|v| v.as_slice()).collect();
        let other = [[5.0_f64, 5.0]];
        let classes = vec![set.clone(), set, other.iter().map(|v| v.as_slice()).collect()];
        let s = visual_affinity_from_classes(&classes, &KernelConfig::default()).unwrap();
        assert_eq!(s.get(0, 1), s.get(0, 0));
        assert!(s.values().as_slice().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn empty_class_is_dataset_error() {
        let pts = [[0.0_f64]];
        let classes: Vec<Vec<&[f64]>> = vec![pts.iter().map(|v| v.as_slice()).collect(), vec![]];
        assert!(matches!(
            visual_affinity_from_classes(&classes, &KernelConfig::default()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let m: AffinityMatrix<f64> = build_semantic_matrix(&star(3)).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("0,1,2\n"));
        let back = AffinityMatrix::from_csv(&csv, AffinityKind::Semantic).unwrap();
        assert_eq!(back, m);
    }
}
