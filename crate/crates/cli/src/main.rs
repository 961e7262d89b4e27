use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dmde_core::dataset::{generate_synthetic, Split};
use dmde_core::expert::{expert_config, train_experts, ExpertCheckpoint, ExpertModel};
use dmde_core::fusion::StackVariant;
use dmde_core::harness::{
    affinity_matrix, build_ontology, build_plan, fuse, load_data, predictions_csv, report_from_checkpoints,
    run_ablation, run_pipeline, AblationGrid, Assignment, DataSource, ExperimentConfig, FittedModel, Fusion, Report,
};
use dmde_core::ontology::TwoLayerOntology;
use dmde_core::taskgroups::GroupingPlan;
use dmde_core::{Error, Result, Scalar};

#[derive(Parser, Debug)]
#[command(name = "dmde", version, about = "Overlapping multi-task experts fused by a stacking head")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set data=PATH`.
    #[arg(long, global = true)]
    data: Option<String>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, short, global = true)]
    output_dir: Option<PathBuf>,
    /// Scalar type used for training and inference.
    #[arg(long, value_enum, default_value_t = Precision::F64, global = true)]
    precision: Precision,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic benchmark as features.csv and taxonomy.tsv.
    GenData,
    /// Build the two-layer ontology and write ontology.json and affinity.csv.
    Ontology,
    /// Build the grouping plan and write plan.json.
    Assign {
        /// Ontology to order classes by; built from the data when absent.
        #[arg(long)]
        ontology: Option<PathBuf>,
    },
    /// Train one expert per group into experts/.
    TrainExperts {
        /// Plan to train; built from the configuration when absent.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Fit the fusion head on trained experts and write checkpoints/.
    Fuse {
        /// Defaults to <output_dir>/plan.json.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Directory holding expert_NNN.json files.
        #[arg(long)]
        experts: Option<PathBuf>,
    },
    /// Evaluate a checkpoint directory on the test split.
    Eval {
        /// Defaults to <output_dir>/checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Rows per sample in predictions.csv; the largest k when absent.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Run every stage and write all artifacts.
    Pipeline,
    /// Run a grid of configurations over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Comma-separated seeds, e.g. 1,2,3.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated overlap ratios.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Comma-separated coupling strengths.
    #[arg(long, value_delimiter = ',')]
    delta2s: Vec<f64>,
    /// Any of tree, random.
    #[arg(long, value_delimiter = ',')]
    assignments: Vec<String>,
    /// Any of odds, scaled.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Any of late, early.
    #[arg(long, value_delimiter = ',')]
    fusions: Vec<String>,
    /// Add the single all-class expert to every seed.
    #[arg(long)]
    baseline: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.common.precision {
        Precision::F64 => run::<f64>(&cli),
        Precision::F32 => run::<f32>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Stage { stage, source }) => {
            eprintln!("dmde: error [{stage}]: {source}");
            ExitCode::FAILURE
        }
        Err(other) => {
            eprintln!("dmde: error: {other}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(data) = &common.data {
        cfg.set("data", data)?;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override {item:?} is not KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn staged<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(stage))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn read_ontology(path: &Path) -> Result<TwoLayerOntology> {
    let ontology: TwoLayerOntology = serde_json::from_str(&Error::read_text(path)?)?;
    ontology.validate()?;
    Ok(ontology)
}

/// An explicit path, else the default file under the output directory when it exists.
fn existing(explicit: &Option<PathBuf>, fallback: PathBuf) -> Option<PathBuf> {
    explicit.clone().or_else(|| fallback.exists().then_some(fallback))
}

fn run<F: Scalar>(cli: &Cli) -> Result<()> {
    let cfg = staged("config", || load_config(&cli.common))?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Ontology => {
            let ontology = ontology_stage::<F>(&cfg)?;
            staged("write", || {
                write(&out.join("ontology.json"), serde_json::to_string_pretty(&ontology)?)?;
                println!("ontology: {} categories over {} classes", ontology.categories.len(), ontology.n_classes());
                Ok(())
            })
        }
        Command::Assign { ontology } => {
            let plan = plan_stage::<F>(&cfg, ontology)?;
            staged("write", || write(&out.join("plan.json"), plan.to_json()?))?;
            println!("assign: {} groups of {} (stride {})", plan.len(), plan.group_size, plan.stride);
            Ok(())
        }
        Command::TrainExperts { plan } => {
            let plan = match existing(plan, out.join("plan.json")) {
                Some(path) => staged("assign", || GroupingPlan::from_json(&Error::read_text(path)?))?,
                None => plan_stage::<F>(&cfg, &None)?,
            };
            let (ds, _) = staged("data", || load_data::<F>(&cfg))?;
            let experts = staged("train-experts", || train_experts(&plan, &ds, &cfg.expert))?;
            staged("write", || {
                let dir = out.join("experts");
                std::fs::create_dir_all(&dir)?;
                write(&out.join("plan.json"), plan.to_json()?)?;
                for (j, e) in experts.iter().enumerate() {
                    ExpertCheckpoint::from_model(e, &expert_config(&cfg.expert, j))
                        .save(dir.join(format!("expert_{j:03}.json")))?;
                }
                Ok(())
            })?;
            println!("train-experts: {} experts written to {}", experts.len(), out.join("experts").display());
            Ok(())
        }
        Command::Fuse { plan, experts } => {
            let plan_path = plan.clone().unwrap_or_else(|| out.join("plan.json"));
            let expert_dir = experts.clone().unwrap_or_else(|| out.join("experts"));
            let (plan, experts) = staged("load", || {
                let plan = GroupingPlan::from_json(&Error::read_text(&plan_path)?)?;
                let experts = (0..plan.len())
                    .map(|j| ExpertCheckpoint::load(expert_dir.join(format!("expert_{j:03}.json")))?.to_model())
                    .collect::<Result<Vec<ExpertModel<F>>>>()?;
                Ok((plan, experts))
            })?;
            let (ds, _) = staged("data", || load_data::<F>(&cfg))?;
            let model = staged("fuse", || fuse(&cfg, experts, &plan, &ds))?;
            let path = staged("write", || model.save(out.join("checkpoints"), &cfg.expert))?;
            println!("fuse: {} fusion written to {}", cfg.fusion, path.display());
            Ok(())
        }
        Command::Eval { checkpoints, top } => {
            let dir = checkpoints.clone().unwrap_or_else(|| out.join("checkpoints"));
            let report = report_from_checkpoints::<F>(&cfg, &dir)?;
            let (ds, _) = staged("data", || load_data::<F>(&cfg))?;
            let model = staged("load", || FittedModel::<F>::load(&dir))?;
            let k = top.or(cfg.ks.last().copied()).unwrap_or(1);
            let predictions = staged("eval", || predictions_csv(&model, &ds, Split::Test, k))?;
            staged("write", || {
                report.write(&out)?;
                write(&out.join("predictions.csv"), predictions)
            })?;
            print_report(&report);
            Ok(())
        }
        Command::Pipeline => {
            let report = run_pipeline::<F>(&cfg)?;
            print_report(&report);
            Ok(())
        }
        Command::Ablate(args) => ablate::<F>(cfg, args),
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(Error::InvalidArgument("gen-data needs the synthetic data source".into()).in_stage("data"));
    };
    let (ds, tree) = staged("data", || generate_synthetic::<f64>(spec))?;
    staged("write", || {
        std::fs::create_dir_all(out)?;
        ds.save(out.join("features.csv"))?;
        write(&out.join("taxonomy.tsv"), tree.to_tsv())
    })?;
    println!(
        "gen-data: {} samples, {} classes, dim {} -> {}",
        ds.len(),
        ds.n_classes(),
        ds.dim(),
        out.join("features.csv").display()
    );
    Ok(())
}

fn ontology_stage<F: Scalar>(cfg: &ExperimentConfig) -> Result<TwoLayerOntology> {
    let (ds, tree) = staged("data", || load_data::<F>(cfg))?;
    staged("ontology", || {
        let aff = affinity_matrix(cfg, &ds, tree.as_ref())?;
        write(&cfg.output_dir.join("affinity.csv"), aff.to_csv())?;
        build_ontology(cfg, &ds, tree.as_ref())
    })
}

fn plan_stage<F: Scalar>(cfg: &ExperimentConfig, ontology: &Option<PathBuf>) -> Result<GroupingPlan> {
    let n_classes = staged("data", || load_data::<F>(cfg))?.0.n_classes();
    let ontology = match cfg.assignment {
        Assignment::Random => None,
        Assignment::Tree => match existing(ontology, cfg.output_dir.join("ontology.json")) {
            Some(path) => Some(staged("ontology", || read_ontology(&path))?),
            None => Some(ontology_stage::<F>(cfg)?),
        },
    };
    staged("assign", || build_plan(cfg, ontology.as_ref(), n_classes))
}

fn parse_all<T: std::str::FromStr<Err = Error>>(values: &[String]) -> Result<Vec<T>> {
    values.iter().map(|v| v.parse()).collect()
}

fn ablate<F: Scalar>(cfg: ExperimentConfig, args: &AblateArgs) -> Result<()> {
    let out = cfg.output_dir.clone();
    let mut grid = AblationGrid::new(cfg);
    staged("config", || {
        if !args.seeds.is_empty() {
            grid.seeds = args.seeds.clone();
        }
        if !args.lambdas.is_empty() {
            grid.lambdas = args.lambdas.clone();
        }
        if !args.delta2s.is_empty() {
            grid.delta2s = args.delta2s.clone();
        }
        if !args.assignments.is_empty() {
            grid.assignments = parse_all::<Assignment>(&args.assignments)?;
        }
        if !args.variants.is_empty() {
            grid.variants = parse_all::<StackVariant>(&args.variants)?;
        }
        if !args.fusions.is_empty() {
            grid.fusions = parse_all::<Fusion>(&args.fusions)?;
        }
        grid.baseline = args.baseline;
        Ok(())
    })?;
    let result = staged("ablate", || run_ablation::<F>(&grid))?;
    staged("write", || result.write(&out))?;
    let failed = result.rows.iter().filter(|r| r.outcome.is_err()).count();
    println!("ablate: {} cells, {} failed -> {}", result.rows.len(), failed, out.join("ablation.csv").display());
    for row in result.rows.iter().filter_map(|r| r.outcome.as_ref().err().map(|e| (r, e))) {
        eprintln!("dmde: cell {} (seed {}) failed: {}", row.0.config_hash, row.0.seed, row.1);
    }
    Ok(())
}

fn print_report(report: &Report) {
    let table: Vec<String> = report.topk.iter().map(|t| format!("top{}={:.4}", t.k, t.accuracy)).collect();
    println!(
        "{} classes, {} groups, config {}: {}",
        report.n_classes,
        report.n_groups,
        report.config_hash,
        table.join(" ")
    );
}
