use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Assignment, DataSource, ExperimentConfig, Fusion, Method};
use super::metrics::{per_class_accuracy, topk_accuracy, PerClassAccuracy};
use crate::dataset::{generate_synthetic, load_features, Dataset, Split};
use crate::error::{Error, Result};
use crate::expert::{
    train_expert, train_experts as train_group_experts, within_group_accuracy, ExpertCheckpoint, ExpertModel,
    TrainConfig,
};
use crate::fusion::{early_fusion_train, rank, train_stacking_head, EarlyFusionModel, MixtureModel};
use crate::ontology::{
    build_ontology_with_max_category, build_semantic_matrix, build_two_layer_ontology, visual_affinity_matrix,
    AffinityKind, AffinityMatrix, TaxonomyTree, TwoLayerOntology,
};
use crate::scalar::Scalar;
use crate::taskgroups::{generate_groups, random_groups, GroupingPlan, TaskGroup};

/// Anything that maps a feature vector to Ω class scores.
pub trait Classifier<F: Scalar>: Sync {
    fn n_classes(&self) -> usize;
    fn class_scores(&self, x: &[F]) -> Result<Vec<F>>;
}

impl<F: Scalar> Classifier<F> for MixtureModel<F> {
    fn n_classes(&self) -> usize {
        MixtureModel::n_classes(self)
    }

    fn class_scores(&self, x: &[F]) -> Result<Vec<F>> {
        self.probabilities(x)
    }
}

impl<F: Scalar> Classifier<F> for EarlyFusionModel<F> {
    fn n_classes(&self) -> usize {
        EarlyFusionModel::n_classes(self)
    }

    fn class_scores(&self, x: &[F]) -> Result<Vec<F>> {
        self.probabilities(x)
    }
}

/// A single expert over every class, read through its class slots only.
#[derive(Debug, Clone, PartialEq)]
pub struct MonolithicModel<F> {
    pub expert: ExpertModel<F>,
}

impl<F: Scalar> Classifier<F> for MonolithicModel<F> {
    fn n_classes(&self) -> usize {
        self.expert.group_size()
    }

    fn class_scores(&self, x: &[F]) -> Result<Vec<F>> {
        let p = self.expert.forward(x)?;
        let mut out = vec![F::zero(); self.n_classes()];
        for (slot, &class) in self.expert.group.members.iter().enumerate() {
            out[class] = p[slot];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel<F> {
    Late(MixtureModel<F>),
    Early(EarlyFusionModel<F>),
    Monolithic(MonolithicModel<F>),
}

const MONOLITHIC_FILE: &str = "monolithic.json";

impl<F: Scalar> FittedModel<F> {
    pub fn experts(&self) -> &[ExpertModel<F>] {
        match self {
            Self::Late(m) => &m.experts,
            Self::Early(m) => &m.experts,
            Self::Monolithic(m) => std::slice::from_ref(&m.expert),
        }
    }

    fn as_classifier(&self) -> &dyn Classifier<F> {
        match self {
            Self::Late(m) => m,
            Self::Early(m) => m,
            Self::Monolithic(m) => m,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>, expert_base: &TrainConfig) -> Result<PathBuf> {
        match self {
            Self::Late(m) => m.save(dir, expert_base),
            Self::Early(m) => m.save(dir, expert_base),
            Self::Monolithic(m) => {
                std::fs::create_dir_all(dir.as_ref())?;
                let path = dir.as_ref().join(MONOLITHIC_FILE);
                ExpertCheckpoint::from_model(&m.expert, expert_base).save(&path)?;
                Ok(path)
            }
        }
    }

    /// Loads whichever model a checkpoint directory holds.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if dir.join("mixture.json").exists() {
            Ok(Self::Late(MixtureModel::load(dir.join("mixture.json"))?))
        } else if dir.join("early.json").exists() {
            Ok(Self::Early(EarlyFusionModel::load(dir.join("early.json"))?))
        } else if dir.join(MONOLITHIC_FILE).exists() {
            let expert = ExpertCheckpoint::load(dir.join(MONOLITHIC_FILE))?.to_model()?;
            Ok(Self::Monolithic(MonolithicModel { expert }))
        } else {
            Err(Error::invalid(format!("no model checkpoint in {}", dir.display())))
        }
    }
}

impl<F: Scalar> Classifier<F> for FittedModel<F> {
    fn n_classes(&self) -> usize {
        self.as_classifier().n_classes()
    }

    fn class_scores(&self, x: &[F]) -> Result<Vec<F>> {
        self.as_classifier().class_scores(x)
    }
}

/// Full class rankings for every sample of `split`, with the true labels.
pub fn rankings<F: Scalar, C: Classifier<F> + ?Sized>(
    model: &C,
    dataset: &Dataset<F>,
    split: Split,
) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if model.n_classes() != dataset.n_classes() {
        return Err(Error::invalid(format!(
            "model scores {} classes, dataset has {}",
            model.n_classes(),
            dataset.n_classes()
        )));
    }
    let idx = dataset.indices(split);
    let ranked = idx
        .par_iter()
        .map(|&i| {
            let scores = model.class_scores(dataset.sample(i))?;
            Ok(rank(&scores, scores.len())?.into_iter().map(|(c, _)| c).collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    Ok((ranked, idx.iter().map(|&i| dataset.label(i)).collect()))
}

/// Top-`k` predictions for every sample of a split as
/// `sample_id,rank,class_id,score` rows, ranks starting at 1.
pub fn predictions_csv<F: Scalar, C: Classifier<F> + ?Sized>(
    model: &C,
    dataset: &Dataset<F>,
    split: Split,
    k: usize,
) -> Result<String> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    check_ks(&[k], model.n_classes())?;
    let rows = dataset
        .indices(split)
        .par_iter()
        .map(|&i| {
            let top = rank(&model.class_scores(dataset.sample(i))?, k)?;
            Ok(top
                .into_iter()
                .enumerate()
                .map(|(r, (c, s))| format!("{i},{},{c},{}\n", r + 1, s.as_f64()))
                .collect::<String>())
        })
        .collect::<Result<Vec<String>>>()?;
    Ok(std::iter::once("sample_id,rank,class_id,score\n".to_string()).chain(rows).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub topk: Vec<TopK>,
    pub per_class: PerClassAccuracy,
}

impl Metrics {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }
}

/// Test-split top-k table and per-class accuracies.
pub fn evaluate<F: Scalar, C: Classifier<F> + ?Sized>(
    model: &C,
    dataset: &Dataset<F>,
    ks: &[usize],
) -> Result<Metrics> {
    let (ranked, labels) = rankings(model, dataset, Split::Test)?;
    let topk = ks
        .iter()
        .map(|&k| Ok(TopK { k, accuracy: topk_accuracy(&ranked, &labels, k)? }))
        .collect::<Result<Vec<_>>>()?;
    let per_class = per_class_accuracy(&ranked, &labels, dataset.n_classes())?;
    Ok(Metrics { topk, per_class })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub n_classes: usize,
    pub n_groups: usize,
    pub topk: Vec<TopK>,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_sorted: Vec<f64>,
    /// Test accuracy of each expert restricted to its own classes.
    pub expert_within_group_top1: Vec<f64>,
    /// Wall-clock seconds per stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, metrics: Metrics, n_groups: usize, within_group: Vec<f64>) -> Self {
        Self {
            config_hash: cfg.hash(),
            config: cfg.echo(),
            seeds: cfg.seeds(),
            n_classes: metrics.per_class.per_class.len(),
            n_groups,
            topk: metrics.topk,
            per_class_accuracy: metrics.per_class.per_class,
            per_class_sorted: metrics.per_class.sorted_desc,
            expert_within_group_top1: within_group,
            timings: None,
        }
    }

    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON without the timings, stable across identical runs.
    pub fn canonical_json(&self) -> Result<String> {
        Self { timings: None, ..self.clone() }.to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,accuracy,sorted_position,sorted_accuracy\n");
        for (i, (a, s)) in self.per_class_accuracy.iter().zip(&self.per_class_sorted).enumerate() {
            out.push_str(&format!("{i},{a},{i},{s}\n"));
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("per_class.csv"), self.per_class_csv())?;
        Ok(())
    }
}

pub fn load_data<F: Scalar>(cfg: &ExperimentConfig) -> Result<(Dataset<F>, Option<TaxonomyTree>)> {
    match &cfg.data {
        DataSource::Synthetic(spec) => {
            let (ds, tree) = generate_synthetic(spec)?;
            Ok((ds, Some(tree)))
        }
        DataSource::File { path, taxonomy } => {
            let ds: Dataset<F> = load_features(path)?;
            let tree = taxonomy.as_ref().map(|t| TaxonomyTree::parse_tsv(&Error::read_text(t)?)).transpose()?;
            if let Some(tree) = &tree {
                if tree.n_classes() != ds.n_classes() {
                    return Err(Error::dataset(format!(
                        "taxonomy has {} leaves, dataset has {} classes",
                        tree.n_classes(),
                        ds.n_classes()
                    )));
                }
            }
            Ok((ds, tree))
        }
    }
}

pub fn affinity_matrix<F: Scalar>(
    cfg: &ExperimentConfig,
    dataset: &Dataset<F>,
    tree: Option<&TaxonomyTree>,
) -> Result<AffinityMatrix<F>> {
    match cfg.ontology_kind {
        AffinityKind::Semantic => {
            let tree = tree.ok_or_else(|| Error::invalid("semantic ontology needs a taxonomy"))?;
            build_semantic_matrix(tree)
        }
        AffinityKind::Visual => visual_affinity_matrix(dataset, &cfg.expert.kernel),
    }
}

pub fn build_ontology<F: Scalar>(
    cfg: &ExperimentConfig,
    dataset: &Dataset<F>,
    tree: Option<&TaxonomyTree>,
) -> Result<TwoLayerOntology> {
    let aff = affinity_matrix(cfg, dataset, tree)?;
    match cfg.ontology_k {
        Some(k) => build_two_layer_ontology(&aff, k, cfg.ontology_seed),
        None => build_ontology_with_max_category(&aff, cfg.group_size, cfg.ontology_seed),
    }
}

/// Tree-guided plans need the ontology; random plans ignore it.
pub fn build_plan(
    cfg: &ExperimentConfig,
    ontology: Option<&TwoLayerOntology>,
    n_classes: usize,
) -> Result<GroupingPlan> {
    let m = cfg.group_size.min(n_classes);
    match cfg.assignment {
        Assignment::Tree => {
            let ontology = ontology.ok_or_else(|| Error::invalid("tree-guided assignment needs an ontology"))?;
            generate_groups(&ontology.leaf_order, m, cfg.lambda)
        }
        Assignment::Random => random_groups(n_classes, m, cfg.lambda, cfg.assign_seed),
    }
}

/// The single Ω-way expert: every class in one group, no manifold coupling.
pub fn monolithic_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { delta2: 0.0, ..cfg.clone() }
}

pub fn train_monolithic<F: Scalar>(cfg: &ExperimentConfig, dataset: &Dataset<F>) -> Result<MonolithicModel<F>> {
    let group = TaskGroup::new(0, (0..dataset.n_classes()).collect())?;
    let expert = train_expert(&group, dataset, &monolithic_config(&cfg.expert))?;
    Ok(MonolithicModel { expert })
}

pub fn fuse<F: Scalar>(
    cfg: &ExperimentConfig,
    experts: Vec<ExpertModel<F>>,
    plan: &GroupingPlan,
    dataset: &Dataset<F>,
) -> Result<FittedModel<F>> {
    match cfg.fusion {
        Fusion::Late => {
            Ok(FittedModel::Late(train_stacking_head(experts, plan, dataset, cfg.lambda, cfg.variant, &cfg.head)?))
        }
        Fusion::Early => Ok(FittedModel::Early(early_fusion_train(experts, dataset, &cfg.head)?)),
    }
}

pub fn within_group_scores<F: Scalar>(experts: &[ExpertModel<F>], dataset: &Dataset<F>) -> Result<Vec<f64>> {
    experts.iter().map(|e| within_group_accuracy(e, dataset, Split::Test)).collect()
}

/// Everything a pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineRun<F> {
    pub report: Report,
    pub model: FittedModel<F>,
    pub plan: Option<GroupingPlan>,
    pub ontology: Option<TwoLayerOntology>,
}

struct Timer(BTreeMap<String, f64>);

impl Timer {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(name));
        self.0.insert(name.to_string(), start.elapsed().as_secs_f64());
        out
    }
}

/// Runs every stage in memory without writing anything.
pub fn execute<F: Scalar>(cfg: &ExperimentConfig) -> Result<PipelineRun<F>> {
    let mut t = Timer(BTreeMap::new());
    t.stage("config", || cfg.validate())?;
    let (ds, tree) = t.stage("data", || load_data::<F>(cfg))?;
    let mut run = execute_on(cfg, &ds, tree.as_ref(), &mut t)?;
    run.report.timings = Some(t.0);
    Ok(run)
}

fn execute_on<F: Scalar>(
    cfg: &ExperimentConfig,
    ds: &Dataset<F>,
    tree: Option<&TaxonomyTree>,
    t: &mut Timer,
) -> Result<PipelineRun<F>> {
    t.stage("eval", || check_ks(&cfg.ks, ds.n_classes()))?;
    if cfg.method == Method::Monolithic {
        let model = FittedModel::Monolithic(t.stage("train-experts", || train_monolithic(cfg, ds))?);
        let (metrics, within) =
            t.stage("eval", || Ok((evaluate(&model, ds, &cfg.ks)?, within_group_scores(model.experts(), ds)?)))?;
        let report = Report::new(cfg, metrics, 1, within);
        return Ok(PipelineRun { report, model, plan: None, ontology: None });
    }
    let ontology = match cfg.assignment {
        Assignment::Tree => Some(t.stage("ontology", || build_ontology(cfg, ds, tree))?),
        Assignment::Random => None,
    };
    let plan = t.stage("assign", || build_plan(cfg, ontology.as_ref(), ds.n_classes()))?;
    let experts = t.stage("train-experts", || train_group_experts(&plan, ds, &cfg.expert))?;
    let within = t.stage("eval", || within_group_scores(&experts, ds))?;
    let model = t.stage("fuse", || fuse(cfg, experts, &plan, ds))?;
    let metrics = t.stage("eval", || evaluate(&model, ds, &cfg.ks))?;
    let report = Report::new(cfg, metrics, plan.len(), within);
    Ok(PipelineRun { report, model, plan: Some(plan), ontology })
}

pub(crate) fn check_ks(ks: &[usize], n_classes: usize) -> Result<()> {
    match ks.last() {
        Some(&k) if k > n_classes => Err(Error::invalid(format!("k = {k} exceeds the {n_classes} classes"))),
        _ => Ok(()),
    }
}

/// Runs the pipeline and writes `report.json`, `per_class.csv`,
/// `ontology.json`, `plan.json` and `checkpoints/` under the output directory.
pub fn run_pipeline<F: Scalar>(cfg: &ExperimentConfig) -> Result<Report> {
    let run = execute::<F>(cfg)?;
    write_run(cfg, &run).map_err(|e| e.in_stage("write"))?;
    Ok(run.report)
}

pub fn write_run<F: Scalar>(cfg: &ExperimentConfig, run: &PipelineRun<F>) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    if let Some(o) = &run.ontology {
        std::fs::write(dir.join("ontology.json"), serde_json::to_string_pretty(o)?)?;
    }
    if let Some(p) = &run.plan {
        std::fs::write(dir.join("plan.json"), p.to_json()?)?;
    }
    run.model.save(dir.join("checkpoints"), &cfg.expert)?;
    run.report.write(dir)
}

/// Recomputes a run's report from its checkpoints and the dataset named by
/// `cfg`.
pub fn report_from_checkpoints<F: Scalar>(cfg: &ExperimentConfig, checkpoint_dir: impl AsRef<Path>) -> Result<Report> {
    let (ds, _) = load_data::<F>(cfg).map_err(|e| e.in_stage("data"))?;
    let model = FittedModel::<F>::load(checkpoint_dir).map_err(|e| e.in_stage("load"))?;
    let eval = || {
        check_ks(&cfg.ks, ds.n_classes())?;
        Ok((evaluate(&model, &ds, &cfg.ks)?, within_group_scores(model.experts(), &ds)?))
    };
    let (metrics, within) = eval().map_err(|e: Error| e.in_stage("eval"))?;
    let n_groups = match &model {
        FittedModel::Late(m) => m.plan.len(),
        FittedModel::Early(m) => m.experts.len(),
        FittedModel::Monolithic(_) => 1,
    };
    Ok(Report::new(cfg, metrics, n_groups, within))
}

pub(crate) fn run_on<F: Scalar>(
    cfg: &ExperimentConfig,
    ds: &Dataset<F>,
    tree: Option<&TaxonomyTree>,
) -> Result<PipelineRun<F>> {
    let mut t = Timer(BTreeMap::new());
    let mut run = execute_on(cfg, ds, tree, &mut t)?;
    run.report.timings = Some(t.0);
    Ok(run)
}
