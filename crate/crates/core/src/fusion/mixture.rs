use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{feature_scale, rank, train_softmax_head, HeadConfig, HeadGradient, SoftmaxHead};
use super::stacking::{
    check_experts_match, expert_scores, scaled_factor, stack_scores, ExpertScores, StackVariant, StackedFeature,
};
use crate::codec::{check_version, decode_rows, decode_vec, encode_rows, encode_vec, FORMAT_VERSION};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::expert::{expert_config, ExpertCheckpoint, ExpertModel, TrainConfig};
use crate::linalg::Matrix;
use crate::scalar::{softmax, Scalar};
use crate::taskgroups::GroupingPlan;

/// Experts, their grouping plan and the stacking head trained on the fused
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel<F> {
    pub experts: Vec<ExpertModel<F>>,
    pub plan: GroupingPlan,
    pub head: SoftmaxHead<F>,
    pub variant: StackVariant,
    pub lambda: f64,
}

/// Fused features for many samples, one expert per worker-side task.
pub fn stacked_matrix<F: Scalar>(
    experts: &[ExpertModel<F>],
    plan: &GroupingPlan,
    dataset: &Dataset<F>,
    indices: &[usize],
    lambda: f64,
    variant: StackVariant,
) -> Result<Vec<Vec<F>>> {
    check_experts_match(experts, plan)?;
    let n = dataset.n_classes();
    indices
        .par_iter()
        .map(|&i| {
            let x = dataset.sample(i);
            let scores = experts.iter().map(|e| expert_scores(e, x)).collect::<Result<Vec<_>>>()?;
            Ok(stack_scores(&scores, plan, n, lambda, variant)?.upsilon)
        })
        .collect()
}

/// Fits the Ω-way stacking head on the fused training features, then
/// optionally refines the expert heads end to end.
pub fn train_stacking_head<F: Scalar>(
    experts: Vec<ExpertModel<F>>,
    plan: &GroupingPlan,
    dataset: &Dataset<F>,
    lambda: f64,
    variant: StackVariant,
    cfg: &HeadConfig,
) -> Result<MixtureModel<F>> {
    check_experts_match(&experts, plan)?;
    if plan.n_classes() != dataset.n_classes() {
        return Err(Error::invalid(format!(
            "plan covers {} classes, dataset has {}",
            plan.n_classes(),
            dataset.n_classes()
        )));
    }
    let train = dataset.train();
    let features = stacked_matrix(&experts, plan, dataset, train, lambda, variant)?;
    let views: Vec<&[F]> = features.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = train.iter().map(|&i| dataset.label(i)).collect();
    let head = train_softmax_head(&views, &labels, dataset.n_classes(), cfg)?;
    let mut mixture = MixtureModel { experts, plan: plan.clone(), head, variant, lambda };
    if cfg.end_to_end {
        let scale = feature_scale(&views);
        refine_end_to_end(&mut mixture, dataset, cfg, scale)?;
    }
    Ok(mixture)
}

/// Gradient of the expert head parameters, excluding the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHeadGradient<F> {
    pub w0: Vec<F>,
    pub v: Matrix<F>,
    pub w_nig: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> ExpertHeadGradient<F> {
    fn zeros(model: &ExpertModel<F>) -> Self {
        let d = model.encoding_dim();
        let m = model.group_size();
        Self { w0: vec![F::zero(); d], v: Matrix::zeros(m, d), w_nig: vec![F::zero(); d], bias: vec![F::zero(); m + 1] }
    }
}

impl<F: Scalar> MixtureModel<F> {
    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    pub fn expert_outputs(&self, x: &[F]) -> Result<Vec<ExpertScores<F>>> {
        self.experts.iter().map(|e| expert_scores(e, x)).collect()
    }

    pub fn features(&self, x: &[F]) -> Result<StackedFeature<F>> {
        stack_scores(&self.expert_outputs(x)?, &self.plan, self.n_classes(), self.lambda, self.variant)
    }

    /// Class probabilities from the stacking head.
    pub fn probabilities(&self, x: &[F]) -> Result<Vec<F>> {
        self.head.probabilities(&self.features(x)?.upsilon)
    }

    /// Top-`k` classes by stacking-head probability.
    pub fn predict(&self, x: &[F], k: usize) -> Result<Vec<(usize, F)>> {
        if k > self.n_classes() {
            return Err(Error::invalid(format!("k = {k} exceeds the {} classes", self.n_classes())));
        }
        rank(&self.probabilities(x)?, k)
    }

    /// `μ Σ CE` of the stacking head on fused features of `batch`.
    pub fn end_to_end_loss(&self, batch: &[(&[F], usize)], mu: f64) -> Result<F> {
        let feats = batch.iter().map(|(x, _)| Ok(self.features(x)?.upsilon)).collect::<Result<Vec<_>>>()?;
        let views: Vec<&[F]> = feats.iter().map(Vec::as_slice).collect();
        let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
        self.head.loss(&views, &labels, mu)
    }

    /// Gradient of [`Self::end_to_end_loss`] with respect to the stacking head
    /// and every expert head, propagated through the stacking function and the
    /// expert softmaxes. A clamped φ passes no gradient.
    pub fn end_to_end_gradient(
        &self,
        batch: &[(&[F], usize)],
        mu: f64,
    ) -> Result<(HeadGradient<F>, Vec<ExpertHeadGradient<F>>)> {
        let mut expert_grads: Vec<ExpertHeadGradient<F>> = self.experts.iter().map(ExpertHeadGradient::zeros).collect();
        let mut feats = Vec::with_capacity(batch.len());
        let lambda_factor = F::of(scaled_factor(self.lambda));
        for &(x, y) in batch {
            let encodings: Vec<Vec<F>> = self.experts.iter().map(|e| e.encode(x)).collect::<Result<_>>()?;
            let probs: Vec<Vec<F>> =
                self.experts.iter().zip(&encodings).map(|(e, h)| softmax(&e.logits_from_encoding(h))).collect();
            let scores: Vec<ExpertScores<F>> = probs.iter().map(|p| ExpertScores::from_probabilities(p)).collect();
            let upsilon = stack_scores(&scores, &self.plan, self.n_classes(), self.lambda, self.variant)?.upsilon;
            let d_upsilon = self.head.input_gradient(&upsilon, y, mu)?;
            feats.push(upsilon);

            for j in 0..self.experts.len() {
                let s = &scores[j];
                let group = &self.plan.groups[j];
                let m = group.size();
                // ∂loss/∂(expert outputs), sentinel last.
                let mut g_out = vec![F::zero(); m + 1];
                let mut g_phi = F::zero();
                for (t, &class) in group.members.iter().enumerate() {
                    let du = d_upsilon[class];
                    let p = s.scores[t];
                    match self.variant {
                        StackVariant::Odds => {
                            g_out[t] = du * s.odds();
                            g_phi -= du * p / (s.phi * s.phi);
                        }
                        StackVariant::Scaled => {
                            g_out[t] = du * lambda_factor * s.phi;
                            g_phi += du * lambda_factor * p;
                        }
                    }
                }
                if !s.phi_clamped() {
                    g_out[m] = g_phi;
                }
                // Softmax Jacobian: ∂/∂z_k = p_k (g_k − Σ p g).
                let p = &probs[j];
                let mean: F = p.iter().zip(&g_out).map(|(&a, &b)| a * b).sum();
                let h = &encodings[j];
                let g = &mut expert_grads[j];
                for k in 0..=m {
                    let dz = p[k] * (g_out[k] - mean);
                    g.bias[k] += dz;
                    if k < m {
                        for ((gv, gw), &hv) in g.v.row_mut(k).iter_mut().zip(g.w0.iter_mut()).zip(h) {
                            *gv += dz * hv;
                            *gw += dz * hv;
                        }
                    } else {
                        for (gn, &hv) in g.w_nig.iter_mut().zip(h) {
                            *gn += dz * hv;
                        }
                    }
                }
            }
        }
        let views: Vec<&[F]> = feats.iter().map(Vec::as_slice).collect();
        let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
        let head_grad = self.head.gradient(&views, &labels, mu)?;
        Ok((head_grad, expert_grads))
    }

    pub fn save(&self, dir: impl AsRef<Path>, expert_base: &TrainConfig) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.experts.len());
        for (j, expert) in self.experts.iter().enumerate() {
            let name = format!("expert_{j:03}.json");
            ExpertCheckpoint::from_model(expert, &expert_config(expert_base, j)).save(dir.join(&name))?;
            paths.push(name);
        }
        let checkpoint = MixtureCheckpoint {
            format_version: FORMAT_VERSION,
            plan: self.plan.clone(),
            expert_checkpoint_paths: paths,
            variant: self.variant,
            lambda: self.lambda,
            head_params: HeadRecord {
                inputs: self.head.input_dim(),
                weights: encode_rows(&self.head.weights),
                bias: encode_vec(&self.head.bias),
            },
        };
        let path = dir.join("mixture.json");
        std::fs::write(&path, serde_json::to_string_pretty(&checkpoint)?)?;
        Ok(path)
    }

    /// Loads `mixture.json`; expert paths are resolved relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let checkpoint: MixtureCheckpoint = serde_json::from_str(&Error::read_text(path)?)?;
        check_version(checkpoint.format_version)?;
        checkpoint.plan.validate()?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let experts = checkpoint
            .expert_checkpoint_paths
            .iter()
            .map(|p| ExpertCheckpoint::load(base.join(p))?.to_model())
            .collect::<Result<Vec<_>>>()?;
        check_experts_match(&experts, &checkpoint.plan)?;
        let head = SoftmaxHead {
            weights: decode_rows(&checkpoint.head_params.weights, checkpoint.head_params.inputs)?,
            bias: decode_vec(&checkpoint.head_params.bias)?,
        };
        if head.weights.rows() != head.bias.len() || head.input_dim() != checkpoint.plan.n_classes() {
            return Err(Error::invalid("stacking head shape does not match the plan"));
        }
        Ok(Self { experts, plan: checkpoint.plan, head, variant: checkpoint.variant, lambda: checkpoint.lambda })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadRecord {
    inputs: usize,
    weights: Vec<Vec<String>>,
    bias: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureCheckpoint {
    format_version: u32,
    plan: GroupingPlan,
    expert_checkpoint_paths: Vec<String>,
    variant: StackVariant,
    lambda: f64,
    head_params: HeadRecord,
}

/// Joint fine-tuning of the stacking head and the expert heads. Expert
/// backbones stay fixed.
pub fn refine_end_to_end<F: Scalar>(
    mixture: &mut MixtureModel<F>,
    dataset: &Dataset<F>,
    cfg: &HeadConfig,
    scale: F,
) -> Result<()> {
    let mut order: Vec<usize> = dataset.indices(Split::Train).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for epoch in 0..cfg.end_to_end_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[F], usize)> = chunk.iter().map(|&i| (dataset.sample(i), dataset.label(i))).collect();
            let (head_grad, expert_grads) = mixture.end_to_end_gradient(&batch, cfg.mu)?;
            let step = F::of(cfg.end_to_end_learning_rate) / F::of_usize(chunk.len());
            mixture.head.apply(&head_grad, step / scale);
            for (expert, g) in mixture.experts.iter_mut().zip(&expert_grads) {
                let update = |dst: &mut [F], src: &[F]| {
                    for (p, &gv) in dst.iter_mut().zip(src) {
                        *p -= step * gv;
                    }
                };
                update(&mut expert.w0, &g.w0);
                update(expert.v.as_mut_slice(), g.v.as_slice());
                update(&mut expert.w_nig, &g.w_nig);
                update(&mut expert.bias, &g.bias);
            }
        }
        if !mixture.head.all_finite() || mixture.experts.iter().any(|e| !e.all_finite()) {
            return Err(Error::TrainingFailure {
                epoch,
                reason: "non-finite parameters during end-to-end refinement".into(),
            });
        }
    }
    Ok(())
}
