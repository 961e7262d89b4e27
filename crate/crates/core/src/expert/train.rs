use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Backbone, ExpertModel};
use super::objective::{gradient, loss, similarity_matrix, LabeledInput, SimilarityState};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ontology::KernelConfig;
use crate::scalar::Scalar;
use crate::taskgroups::{GroupingPlan, TaskGroup};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the data term.
    pub mu: f64,
    /// Ridge strength on the class weights and the sentinel weights.
    pub delta1: f64,
    /// Strength of the Laplacian coupling between class weights.
    pub delta2: f64,
    pub learning_rate: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs between similarity refreshes from the current encodings.
    pub sim_refresh_period: usize,
    /// Training samples per in-group class (and for the sentinel); all
    /// available when unset.
    pub samples_per_class: Option<usize>,
    /// Hidden widths of the backbone; empty means a standardized identity.
    pub hidden: Vec<usize>,
    /// Keep every `V_j` at zero so all class weights equal `W0`.
    pub freeze_class_components: bool,
    /// Draw a fresh not-in-group sample every epoch instead of once.
    pub resample_not_in_group: bool,
    pub kernel: KernelConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            delta1: 1e-4,
            delta2: 1e-2,
            learning_rate: 0.3,
            lr_decay: 0.5,
            lr_decay_every: 40,
            epochs: 120,
            batch_size: 16,
            sim_refresh_period: 5,
            samples_per_class: None,
            hidden: vec![64, 32],
            freeze_class_components: false,
            resample_not_in_group: true,
            kernel: KernelConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite =
            [self.mu, self.delta1, self.delta2, self.learning_rate, self.lr_decay].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("training scalars must be finite"));
        }
        if self.mu <= 0.0 {
            return Err(Error::invalid("mu must be positive"));
        }
        if self.delta1 < 0.0 || self.delta2 < 0.0 {
            return Err(Error::invalid("regularization strengths must be non-negative"));
        }
        if self.learning_rate <= 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::invalid("learning rate and decay must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.sim_refresh_period == 0 || self.lr_decay_every == 0 {
            return Err(Error::invalid("epochs, batch size, refresh period and decay period must be >= 1"));
        }
        if self.samples_per_class == Some(0) {
            return Err(Error::invalid("samples per class must be >= 1"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// A dataset sample paired with the head slot it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledIndex {
    pub index: usize,
    pub slot: usize,
}

/// Seeded draw without replacement from training samples whose class lies
/// outside `group`, labelled with the sentinel slot.
pub fn sample_not_in_group<F: Scalar>(
    dataset: &Dataset<F>,
    group: &TaskGroup,
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledIndex>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let pool = out_of_group_pool(dataset, group);
    if pool.len() < count {
        return Err(Error::dataset(format!(
            "group {} needs {count} not-in-group samples, only {} exist",
            group.index,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| LabeledIndex { index: pool[i], slot: group.sentinel_index() })
        .collect())
}

fn out_of_group_pool<F: Scalar>(dataset: &Dataset<F>, group: &TaskGroup) -> Vec<usize> {
    let mut member = vec![false; dataset.n_classes()];
    for &c in &group.members {
        if c < member.len() {
            member[c] = true;
        }
    }
    dataset.train().iter().copied().filter(|&i| !member[dataset.label(i)]).collect()
}

/// In-group training samples, one list per slot.
fn in_group_samples<F: Scalar>(group: &TaskGroup, dataset: &Dataset<F>, cap: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let by_class = dataset.train_indices_by_class();
    group
        .members
        .iter()
        .map(|&c| {
            let idx = by_class.get(c).ok_or(Error::Lookup { kind: "class", id: c })?;
            if idx.is_empty() {
                return Err(Error::dataset(format!("class {c} has no training samples")));
            }
            Ok(idx[..cap.map_or(idx.len(), |r| r.min(idx.len()))].to_vec())
        })
        .collect()
}

fn refresh_similarity<F: Scalar>(
    model: &ExpertModel<F>,
    dataset: &Dataset<F>,
    by_slot: &[Vec<usize>],
    kernel: &KernelConfig,
) -> Result<SimilarityState<F>> {
    let encoded: Vec<Vec<Vec<F>>> =
        by_slot.iter().map(|idx| idx.iter().map(|&i| model.backbone.encode(dataset.sample(i))).collect()).collect();
    let views: Vec<Vec<&[F]>> = encoded.iter().map(|c| c.iter().map(Vec::as_slice).collect()).collect();
    similarity_matrix(&views, kernel)
}

/// Trains one expert on its group's classes plus a not-in-group sample.
///
/// The similarity matrix starts from the standardized input features and is
/// recomputed from the backbone encodings every `sim_refresh_period` epochs.
/// The per-epoch loss over the full training set is recorded in
/// `loss_trajectory`.
pub fn train_expert<F: Scalar>(group: &TaskGroup, dataset: &Dataset<F>, cfg: &TrainConfig) -> Result<ExpertModel<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mean, std) = dataset.train_moments();
    let backbone = Backbone::new(dataset.dim(), &cfg.hidden, &mut rng).with_standardization(mean.clone(), std.clone());
    let mut model = ExpertModel::init(group.clone(), backbone, &mut rng);
    let m = group.size();
    if cfg.freeze_class_components {
        model.v = Matrix::zeros(m, model.encoding_dim());
    }

    let by_slot = in_group_samples(group, dataset, cfg.samples_per_class)?;
    let in_group: Vec<LabeledIndex> = by_slot
        .iter()
        .enumerate()
        .flat_map(|(slot, idx)| idx.iter().map(move |&index| LabeledIndex { index, slot }))
        .collect();
    let pool = out_of_group_pool(dataset, group).len();
    let sentinel_count =
        cfg.samples_per_class.unwrap_or_else(|| (in_group.len() as f64 / m as f64).round() as usize).min(pool);
    let sentinel_seed = |epoch: usize| cfg.seed.wrapping_add(0x9E37_79B9).wrapping_add(epoch as u64);
    let mut sentinel = sample_not_in_group(dataset, group, sentinel_count, sentinel_seed(0))?;

    let standardized = Backbone::identity(dataset.dim()).with_standardization(mean, std);
    let initial: Vec<Vec<Vec<F>>> =
        by_slot.iter().map(|idx| idx.iter().map(|&i| standardized.encode(dataset.sample(i))).collect()).collect();
    let views: Vec<Vec<&[F]>> = initial.iter().map(|c| c.iter().map(Vec::as_slice).collect()).collect();
    let mut sim = similarity_matrix(&views, &cfg.kernel)?;

    let v_range = {
        let start = model.num_params() - model.bias.len() - model.w_nig.len() - model.v.as_slice().len();
        start..start + model.v.as_slice().len()
    };

    let mut params = model.params();
    let mut order: Vec<LabeledIndex> = Vec::new();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch % cfg.sim_refresh_period == 0 {
            sim = refresh_similarity(&model, dataset, &by_slot, &cfg.kernel)?;
        }
        if cfg.resample_not_in_group && epoch > 0 {
            sentinel = sample_not_in_group(dataset, group, sentinel_count, sentinel_seed(epoch))?;
        }
        order.clear();
        order.extend_from_slice(&in_group);
        order.extend_from_slice(&sentinel);
        order.shuffle(&mut rng);

        let lr = cfg.learning_rate_at(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledInput<'_, F>> =
                chunk.iter().map(|s| LabeledInput { x: dataset.sample(s.index), slot: s.slot }).collect();
            let mut grad = gradient(&model, &batch, &sim, cfg)?.to_flat();
            if cfg.freeze_class_components {
                grad[v_range.clone()].iter_mut().for_each(|g| *g = F::zero());
            }
            let step = F::of(lr / chunk.len() as f64);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= step * *g;
            }
            model.set_params(&params)?;
        }

        let full: Vec<LabeledInput<'_, F>> = in_group
            .iter()
            .chain(&sentinel)
            .map(|s| LabeledInput { x: dataset.sample(s.index), slot: s.slot })
            .collect();
        let value = loss(&model, &full, &sim, cfg)?;
        if !value.is_finite() || !model.all_finite() {
            return Err(Error::TrainingFailure { epoch, reason: format!("non-finite loss {value}") });
        }
        model.loss_trajectory.push(value.as_f64());
    }
    Ok(model)
}

/// Fraction of in-group samples of `split` whose class wins the argmax over
/// the M group slots (the sentinel is ignored).
pub fn within_group_accuracy<F: Scalar>(model: &ExpertModel<F>, dataset: &Dataset<F>, split: Split) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for &i in dataset.indices(split) {
        let Some(slot) = model.group.slot_of(dataset.label(i)) else {
            continue;
        };
        let p = model.forward(dataset.sample(i))?;
        let mut best = 0;
        for j in 1..model.group_size() {
            if p[j] > p[best] {
                best = j;
            }
        }
        hits += usize::from(best == slot);
        total += 1;
    }
    if total == 0 {
        return Err(Error::dataset(format!("no {split:?} samples for group {}", model.group.index)));
    }
    Ok(hits as f64 / total as f64)
}

/// Per-expert configuration: the shared settings with a seed derived from the
/// group index.
pub fn expert_config(base: &TrainConfig, group_index: usize) -> TrainConfig {
    TrainConfig {
        seed: base
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((group_index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)),
        ..base.clone()
    }
}

/// Trains one expert per group on parallel workers. Each expert is seeded by
/// [`expert_config`], so the result does not depend on scheduling.
pub fn train_experts<F: Scalar>(
    plan: &GroupingPlan,
    dataset: &Dataset<F>,
    cfg: &TrainConfig,
) -> Result<Vec<ExpertModel<F>>> {
    plan.groups.par_iter().map(|g| train_expert(g, dataset, &expert_config(cfg, g.index))).collect()
}
