use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::config::{Assignment, ExperimentConfig, Fusion, Method};
use super::pipeline::{
    build_ontology, build_plan, check_ks, evaluate, fuse, load_data, run_on, within_group_scores, Report,
};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::expert::{expert_config, train_expert, train_experts, within_group_accuracy, ExpertModel};
use crate::fusion::StackVariant;
use crate::ontology::{TaxonomyTree, TwoLayerOntology};
use crate::scalar::Scalar;
use crate::taskgroups::GroupingPlan;

/// Cartesian grid of pipeline settings, repeated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub assignments: Vec<Assignment>,
    pub delta2s: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub variants: Vec<StackVariant>,
    pub fusions: Vec<Fusion>,
    pub baseline: bool,
}

impl AblationGrid {
    /// A single-cell grid at the base settings.
    pub fn new(base: ExperimentConfig) -> Self {
        Self {
            seeds: vec![base.expert.seed],
            assignments: vec![base.assignment],
            delta2s: vec![base.expert.delta2],
            lambdas: vec![base.lambda],
            variants: vec![base.variant],
            fusions: vec![base.fusion],
            baseline: false,
            base,
        }
    }

    fn validate(&self) -> Result<()> {
        let empty = [
            ("seeds", self.seeds.is_empty()),
            ("assignments", self.assignments.is_empty()),
            ("delta2s", self.delta2s.is_empty()),
            ("lambdas", self.lambdas.is_empty()),
            ("variants", self.variants.is_empty()),
            ("fusions", self.fusions.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::invalid(format!("ablation grid has no {name}")));
        }
        self.base.validate()
    }

    /// Cell configurations for one seed, baseline first. Early fusion does not
    /// read the stacking variant, so it gets one cell per expert set.
    pub fn cells(&self, seed: u64) -> Result<Vec<ExperimentConfig>> {
        let mut base = self.base.clone();
        base.set("seed", &seed.to_string())?;
        let mut out = Vec::new();
        if self.baseline {
            let mut cfg = base.clone();
            cfg.method = Method::Monolithic;
            out.push(cfg);
        }
        for &assignment in &self.assignments {
            for &delta2 in &self.delta2s {
                for &lambda in &self.lambdas {
                    for &fusion in &self.fusions {
                        let variants = match fusion {
                            Fusion::Late => &self.variants[..],
                            Fusion::Early => &self.variants[..1],
                        };
                        for &variant in variants {
                            let mut cfg = base.clone();
                            cfg.method = Method::Mixture;
                            cfg.assignment = assignment;
                            cfg.expert.delta2 = delta2;
                            cfg.lambda = lambda;
                            cfg.fusion = fusion;
                            cfg.variant = variant;
                            cfg.validate()?;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub n_groups: Option<usize>,
    pub outcome: std::result::Result<Report, String>,
}

impl AblationRow {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.outcome.as_ref().ok().and_then(|r| r.top(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

fn row_label(cfg: &ExperimentConfig) -> [String; 6] {
    [
        cfg.method.to_string(),
        cfg.assignment.to_string(),
        cfg.expert.delta2.to_string(),
        cfg.lambda.to_string(),
        cfg.variant.to_string(),
        cfg.fusion.to_string(),
    ]
}

impl AblationResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config_hash,seed,method,assignment,delta2,lambda,variant,fusion,n_groups");
        for k in &self.ks {
            out.push_str(&format!(",top{k}"));
        }
        out.push_str(",status\n");
        for row in &self.rows {
            let mut fields = vec![row.config_hash.clone(), row.seed.to_string()];
            fields.extend(row_label(&row.config));
            fields.push(row.n_groups.map(|n| n.to_string()).unwrap_or_default());
            for &k in &self.ks {
                fields.push(row.top(k).map(|a| a.to_string()).unwrap_or_default());
            }
            fields.push(match &row.outcome {
                Ok(_) => "ok".into(),
                Err(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
            });
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Mean top-1 over seeds keyed by method, assignment, δ2, variant, fusion
    /// and λ, with the mean group count.
    fn curve(&self) -> BTreeMap<[String; 6], (f64, f64, usize)> {
        let mut acc: BTreeMap<[String; 6], (f64, f64, usize)> = BTreeMap::new();
        for row in &self.rows {
            if let (Some(top1), Some(n)) = (row.top(1), row.n_groups) {
                let l = row_label(&row.config);
                let key = [l[0].clone(), l[1].clone(), l[2].clone(), l[4].clone(), l[5].clone(), l[3].clone()];
                let e = acc.entry(key).or_default();
                e.0 += top1;
                e.1 += n as f64;
                e.2 += 1;
            }
        }
        acc
    }

    pub fn accuracy_vs_lambda_csv(&self) -> String {
        let mut out = String::from("method,assignment,delta2,variant,fusion,lambda,n_groups,mean_top1,runs\n");
        for (key, (sum, groups, n)) in self.curve() {
            let n_f = n as f64;
            out.push_str(&format!("{},{},{},{}\n", key.join(","), groups / n_f, sum / n_f, n));
        }
        out
    }

    pub fn accuracy_vs_groups_csv(&self) -> String {
        let mut out = String::from("method,assignment,delta2,variant,fusion,n_groups,mean_top1,runs\n");
        for (key, (sum, groups, n)) in self.curve() {
            let n_f = n as f64;
            out.push_str(&format!("{},{},{},{}\n", key[..5].join(","), groups / n_f, sum / n_f, n));
        }
        out
    }

    /// Writes `ablation.csv`, the two plot-data CSVs and one report per
    /// successful cell under `cells/<config hash>/`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), self.to_csv())?;
        std::fs::write(dir.join("accuracy_vs_lambda.csv"), self.accuracy_vs_lambda_csv())?;
        std::fs::write(dir.join("accuracy_vs_groups.csv"), self.accuracy_vs_groups_csv())?;
        for row in &self.rows {
            if let Ok(report) = &row.outcome {
                report.write(dir.join("cells").join(&row.config_hash))?;
            }
        }
        Ok(())
    }

    pub fn rows_where(&self, pred: impl Fn(&ExperimentConfig) -> bool) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| pred(&r.config))
    }
}

type ExpertKey = (Assignment, u64, u64);

fn expert_key(cfg: &ExperimentConfig) -> ExpertKey {
    (cfg.assignment, cfg.expert.delta2.to_bits(), cfg.lambda.to_bits())
}

struct SeedContext<F> {
    dataset: Dataset<F>,
    tree: Option<TaxonomyTree>,
    /// Built only when some cell is tree-guided; a failure only fails those cells.
    ontology: Option<std::result::Result<TwoLayerOntology, String>>,
}

fn seed_context<F: Scalar>(cells: &[ExperimentConfig]) -> Result<SeedContext<F>> {
    let first = &cells[0];
    let (dataset, tree) = load_data::<F>(first).map_err(|e| e.in_stage("data"))?;
    check_ks(&first.ks, dataset.n_classes()).map_err(|e| e.in_stage("eval"))?;
    let ontology = cells
        .iter()
        .find(|c| c.method == Method::Mixture && c.assignment == Assignment::Tree)
        .map(|cfg| build_ontology(cfg, &dataset, tree.as_ref()).map_err(|e| e.in_stage("ontology").to_string()));
    Ok(SeedContext { dataset, tree, ontology })
}

type TrainedSet<F> = std::result::Result<(GroupingPlan, Vec<ExpertModel<F>>, Vec<f64>), String>;

fn train_set<F: Scalar>(cfg: &ExperimentConfig, ctx: &SeedContext<F>) -> TrainedSet<F> {
    let ontology = match (&ctx.ontology, cfg.assignment) {
        (Some(Err(msg)), Assignment::Tree) => return Err(msg.clone()),
        (Some(Ok(o)), _) => Some(o),
        _ => None,
    };
    train_set_inner(cfg, ctx, ontology).map_err(|e| e.to_string())
}

fn train_set_inner<F: Scalar>(
    cfg: &ExperimentConfig,
    ctx: &SeedContext<F>,
    ontology: Option<&TwoLayerOntology>,
) -> Result<(GroupingPlan, Vec<ExpertModel<F>>, Vec<f64>)> {
    let ds = &ctx.dataset;
    let plan = build_plan(cfg, ontology, ds.n_classes()).map_err(|e| e.in_stage("assign"))?;
    let experts = train_experts(&plan, ds, &cfg.expert).map_err(|e| e.in_stage("train-experts"))?;
    let within = within_group_scores(&experts, ds).map_err(|e| e.in_stage("eval"))?;
    Ok((plan, experts, within))
}

fn run_cell<F: Scalar>(
    cfg: &ExperimentConfig,
    ctx: &SeedContext<F>,
    trained: Option<&TrainedSet<F>>,
) -> std::result::Result<Report, String> {
    let Some(trained) = trained else {
        return run_on(cfg, &ctx.dataset, ctx.tree.as_ref()).map(|run| run.report).map_err(|e| e.to_string());
    };
    let (plan, experts, within) = trained.as_ref().map_err(Clone::clone)?;
    let finish = || -> Result<Report> {
        let model = fuse(cfg, experts.clone(), plan, &ctx.dataset).map_err(|e| e.in_stage("fuse"))?;
        let metrics = evaluate(&model, &ctx.dataset, &cfg.ks).map_err(|e| e.in_stage("eval"))?;
        Ok(Report::new(cfg, metrics, plan.len(), within.clone()))
    };
    finish().map_err(|e| e.to_string())
}

/// Runs every cell of the grid. A failing cell is recorded and the grid
/// continues. Cells sharing a seed share the dataset and the ontology, and
/// cells that differ only in fusion settings share their experts.
pub fn run_ablation<F: Scalar>(grid: &AblationGrid) -> Result<AblationResult> {
    grid.validate()?;
    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        let cells = grid.cells(seed)?;
        let ctx = match seed_context::<F>(&cells) {
            Ok(ctx) => ctx,
            Err(e) => {
                let msg = e.to_string();
                rows.extend(cells.into_iter().map(|cfg| AblationRow {
                    seed,
                    config_hash: cfg.hash(),
                    config: cfg,
                    n_groups: None,
                    outcome: Err(msg.clone()),
                }));
                continue;
            }
        };
        let mut keys: Vec<(ExpertKey, &ExperimentConfig)> = Vec::new();
        for cfg in cells.iter().filter(|c| c.method == Method::Mixture) {
            if !keys.iter().any(|(k, _)| *k == expert_key(cfg)) {
                keys.push((expert_key(cfg), cfg));
            }
        }
        let trained: Vec<(ExpertKey, TrainedSet<F>)> =
            keys.par_iter().map(|(k, cfg)| (*k, train_set(cfg, &ctx))).collect();
        let outcomes: Vec<std::result::Result<Report, String>> = cells
            .par_iter()
            .map(|cfg| {
                let set = match cfg.method {
                    Method::Monolithic => None,
                    Method::Mixture => trained.iter().find(|(k, _)| *k == expert_key(cfg)).map(|(_, t)| t),
                };
                run_cell(cfg, &ctx, set)
            })
            .collect();
        for (cfg, outcome) in cells.into_iter().zip(outcomes) {
            rows.push(AblationRow {
                seed,
                config_hash: cfg.hash(),
                n_groups: outcome.as_ref().ok().map(|r| r.n_groups),
                config: cfg,
                outcome,
            });
        }
    }
    Ok(AblationResult { ks: grid.base.ks.clone(), rows })
}

/// Within-group test accuracy of the first `n_groups` experts of the plan,
/// trained once with the configured δ2 and once with δ2 = 0 (same seeds).
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingComparison {
    pub coupled: Vec<f64>,
    pub uncoupled: Vec<f64>,
}

pub fn coupling_comparison<F: Scalar>(
    cfg: &ExperimentConfig,
    dataset: &Dataset<F>,
    plan: &GroupingPlan,
    n_groups: usize,
) -> Result<CouplingComparison> {
    if n_groups > plan.len() {
        return Err(Error::invalid(format!("plan has {} groups, asked for {n_groups}", plan.len())));
    }
    let run = |delta2: f64| -> Result<Vec<f64>> {
        plan.groups[..n_groups]
            .par_iter()
            .map(|g| {
                let mut train_cfg = expert_config(&cfg.expert, g.index);
                train_cfg.delta2 = delta2;
                let model = train_expert(g, dataset, &train_cfg)?;
                within_group_accuracy(&model, dataset, Split::Test)
            })
            .collect()
    };
    Ok(CouplingComparison { coupled: run(cfg.expert.delta2)?, uncoupled: run(0.0)? })
}
