use super::model::{Dense, ExpertModel};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ontology::{visual_affinity_from_classes, AffinityMatrix, KernelConfig};
use crate::scalar::{dot, log_sum_exp, softmax_into, Scalar};

/// Class similarity inside one group and its graph Laplacian `Deg(S) − S`.
/// The sentinel is not part of either.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityState<F> {
    pub similarity: AffinityMatrix<F>,
    pub laplacian: Matrix<F>,
}

impl<F: Scalar> SimilarityState<F> {
    pub fn from_affinity(similarity: AffinityMatrix<F>) -> Self {
        let n = similarity.n();
        let s = similarity.values();
        let mut laplacian = Matrix::zeros(n, n);
        for i in 0..n {
            let degree: F = s.row(i).iter().copied().sum();
            for j in 0..n {
                laplacian[(i, j)] = if i == j { degree - s[(i, j)] } else { -s[(i, j)] };
            }
        }
        Self { similarity, laplacian }
    }

    /// No coupling between classes: `S = I`, `L = 0`.
    pub fn uncoupled(m: usize) -> Self {
        let s = AffinityMatrix::new(Matrix::identity(m), crate::ontology::AffinityKind::Visual)
            .expect("identity is a valid visual affinity");
        Self::from_affinity(s)
    }

    pub fn size(&self) -> usize {
        self.laplacian.rows()
    }
}

/// Kernel similarity between the in-group classes, one sample set per slot.
pub fn similarity_matrix<F: Scalar>(by_slot: &[Vec<&[F]>], kernel: &KernelConfig) -> Result<SimilarityState<F>> {
    Ok(SimilarityState::from_affinity(visual_affinity_from_classes(by_slot, kernel)?))
}

/// One training example; `slot` is an in-group slot or the sentinel slot M.
#[derive(Debug, Clone, Copy)]
pub struct LabeledInput<'a, F> {
    pub x: &'a [F],
    pub slot: usize,
}

/// `Tr(W L Wᵀ)` for `W` stored with one class per row.
pub fn manifold_penalty<F: Scalar>(weights: &Matrix<F>, laplacian: &Matrix<F>) -> F {
    let m = weights.rows();
    let mut total = F::zero();
    for j in 0..m {
        for k in 0..m {
            let l = laplacian[(j, k)];
            if l != F::zero() {
                total += l * dot(weights.row(j), weights.row(k));
            }
        }
    }
    total
}

fn check_batch<F: Scalar>(
    model: &ExpertModel<F>,
    batch: &[LabeledInput<'_, F>],
    sim: &SimilarityState<F>,
) -> Result<()> {
    let m = model.group_size();
    if sim.size() != m {
        return Err(Error::invalid(format!("similarity covers {} classes, group has {m}", sim.size())));
    }
    for sample in batch {
        if sample.slot > m {
            return Err(Error::InvalidLabel { label: sample.slot, max: m });
        }
        model.check_input(sample.x)?;
    }
    Ok(())
}

/// Regularized objective:
/// `μ Σ CE + δ1 (Tr(W Wᵀ) + |w_nig|²) + δ2/2 Tr(W L Wᵀ)`.
pub fn loss<F: Scalar>(
    model: &ExpertModel<F>,
    batch: &[LabeledInput<'_, F>],
    sim: &SimilarityState<F>,
    cfg: &TrainConfig,
) -> Result<F> {
    check_batch(model, batch, sim)?;
    let mut data = F::zero();
    for sample in batch {
        let z = model.logits_from_encoding(&model.backbone.encode(sample.x));
        data += log_sum_exp(&z) - z[sample.slot];
    }
    let w = model.class_weights();
    let ridge: F = w.as_slice().iter().map(|&v| v * v).sum::<F>() + model.w_nig.iter().map(|&v| v * v).sum::<F>();
    Ok(F::of(cfg.mu) * data
        + F::of(cfg.delta1) * ridge
        + F::of(cfg.delta2) / F::of(2.0) * manifold_penalty(&w, &sim.laplacian))
}

/// Gradient of [`loss`], laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGradient<F> {
    pub backbone: Vec<Dense<F>>,
    pub w0: Vec<F>,
    pub v: Matrix<F>,
    pub w_nig: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> ExpertGradient<F> {
    /// Same order as [`ExpertModel::params`].
    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for l in &self.backbone {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.w0);
        out.extend_from_slice(self.v.as_slice());
        out.extend_from_slice(&self.w_nig);
        out.extend_from_slice(&self.bias);
        out
    }

    /// Gradient with respect to the effective class weight `W_j`. Equal to
    /// the `V_j` gradient.
    pub fn class_weight(&self, slot: usize) -> &[F] {
        self.v.row(slot)
    }
}

/// Analytic gradient of [`loss`] by the chain rule through the head and the
/// backbone.
pub fn gradient<F: Scalar>(
    model: &ExpertModel<F>,
    batch: &[LabeledInput<'_, F>],
    sim: &SimilarityState<F>,
    cfg: &TrainConfig,
) -> Result<ExpertGradient<F>> {
    check_batch(model, batch, sim)?;
    let m = model.group_size();
    let d = model.encoding_dim();
    let mu = F::of(cfg.mu);
    let w = model.class_weights();

    let mut g_backbone = model.backbone.zeros_like();
    let mut g_w = Matrix::zeros(m, d);
    let mut g_nig = vec![F::zero(); d];
    let mut g_bias = vec![F::zero(); m + 1];
    let mut probs = Vec::with_capacity(m + 1);

    for sample in batch {
        let acts = model.backbone.trace(sample.x);
        let h = acts.last().expect("encoding");
        softmax_into(&model.logits_from_encoding(h), &mut probs);
        // ∂(μ CE)/∂z = μ (p − e_y)
        let dz: Vec<F> =
            probs.iter().enumerate().map(|(k, &p)| mu * if k == sample.slot { p - F::one() } else { p }).collect();
        let mut dh = vec![F::zero(); d];
        for j in 0..m {
            let dzj = dz[j];
            g_bias[j] += dzj;
            for ((g, &hk), (dhk, &wk)) in g_w.row_mut(j).iter_mut().zip(h).zip(dh.iter_mut().zip(w.row(j))) {
                *g += dzj * hk;
                *dhk += dzj * wk;
            }
        }
        let dzs = dz[m];
        g_bias[m] += dzs;
        for ((g, &hk), (dhk, &wk)) in g_nig.iter_mut().zip(h).zip(dh.iter_mut().zip(&model.w_nig)) {
            *g += dzs * hk;
            *dhk += dzs * wk;
        }
        model.backbone.backprop(&acts, dh, &mut g_backbone);
    }

    let two_d1 = F::of(2.0 * cfg.delta1);
    let d2 = F::of(cfg.delta2);
    for j in 0..m {
        for k in 0..d {
            let coupled: F = (0..m).map(|i| sim.laplacian[(j, i)] * w[(i, k)]).sum();
            g_w[(j, k)] += two_d1 * w[(j, k)] + d2 * coupled;
        }
    }
    for (g, &v) in g_nig.iter_mut().zip(&model.w_nig) {
        *g += two_d1 * v;
    }

    let mut g_w0 = vec![F::zero(); d];
    for j in 0..m {
        for (acc, &g) in g_w0.iter_mut().zip(g_w.row(j)) {
            *acc += g;
        }
    }

    Ok(ExpertGradient { backbone: g_backbone, w0: g_w0, v: g_w, w_nig: g_nig, bias: g_bias })
}
