use dmde_core::dataset::{generate_synthetic, Split, SynthSpec};
use dmde_core::fusion::StackVariant;
use dmde_core::harness::{
    execute, load_data, parse_key_values, predictions_csv, run_ablation, run_pipeline, topk_accuracy, AblationGrid,
    Assignment, ExperimentConfig, Fusion, Method, Report,
};
use dmde_core::Error;

const TINY: &str = "
# four classes in two categories
n_categories = 2
classes_per_category = 2
dim = 4
samples_per_class = 20
M = 2
lambda = 0
ks = 1,2
epochs = 10
lr_decay_every = 5
hidden = 8
head_epochs = 10
seed = 3
";

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_text(TINY).unwrap()
}

#[test]
fn minimal_pipeline_completes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.output_dir = dir.path().join("run");
    let report = run_pipeline::<f64>(&cfg).unwrap();
    assert_eq!(report.n_classes, 4);
    assert_eq!(report.n_groups, 2);
    assert_eq!(report.topk.iter().map(|t| t.k).collect::<Vec<_>>(), vec![1, 2]);
    assert!(report.top(1).unwrap() <= report.top(2).unwrap());
    assert_eq!(report.config_hash, cfg.hash());
    for file in ["config.txt", "ontology.json", "plan.json", "report.json", "per_class.csv", "checkpoints/mixture.json"]
    {
        assert!(cfg.output_dir.join(file).exists(), "{file} missing");
    }
    let saved = Report::from_json(&std::fs::read_to_string(cfg.output_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(saved.canonical_json().unwrap(), report.canonical_json().unwrap());
    let reread = ExperimentConfig::load(cfg.output_dir.join("config.txt")).unwrap();
    assert_eq!(reread.hash(), cfg.hash());
}

#[test]
fn every_method_and_fusion_runs() {
    for (method, fusion, assignment) in [
        (Method::Mixture, Fusion::Early, Assignment::Tree),
        (Method::Mixture, Fusion::Late, Assignment::Random),
        (Method::Monolithic, Fusion::Late, Assignment::Tree),
    ] {
        let cfg = ExperimentConfig { method, fusion, assignment, ..tiny() };
        let run = execute::<f64>(&cfg).unwrap();
        assert_eq!(run.report.n_groups, if method == Method::Monolithic { 1 } else { 2 });
        assert!(run.report.timings.is_some());
    }
}

#[test]
fn lambda_sweep_gives_one_report_each() {
    let lambdas = [0.0, 0.5];
    let reports: Vec<Report> =
        lambdas.iter().map(|&lambda| execute::<f64>(&ExperimentConfig { lambda, ..tiny() }).unwrap().report).collect();
    assert_eq!(reports.len(), 2);
    assert_ne!(reports[0].config_hash, reports[1].config_hash);
    assert_eq!(reports[0].n_groups, 2);
    assert_eq!(reports[1].n_groups, 4);
}

#[test]
fn ablation_rows_match_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut grid = AblationGrid::new(tiny());
    grid.lambdas = vec![0.0, 0.5];
    grid.variants = vec![StackVariant::Odds, StackVariant::Scaled];
    grid.baseline = true;
    let result = run_ablation::<f64>(&grid).unwrap();
    assert_eq!(result.rows.len(), 5);
    assert_eq!(result.rows[0].config.method, Method::Monolithic);
    for row in &result.rows {
        let report = row.outcome.as_ref().unwrap();
        assert_eq!(row.config_hash, report.config_hash);
        assert_eq!(row.config_hash, row.config.hash());
    }
    result.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(
        csv.starts_with("config_hash,seed,method,assignment,delta2,lambda,variant,fusion,n_groups,top1,top2,status")
    );
    assert!(dir.path().join("accuracy_vs_lambda.csv").exists());
    assert!(dir.path().join("accuracy_vs_groups.csv").exists());
    for row in &result.rows {
        assert!(dir.path().join("cells").join(&row.config_hash).join("report.json").exists());
    }
}

#[test]
fn failed_cells_do_not_stop_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = generate_synthetic::<f64>(&SynthSpec {
        n_categories: 2,
        classes_per_category: 2,
        dim: 4,
        samples_per_class: 20,
        ..SynthSpec::default()
    })
    .unwrap();
    let path = dir.path().join("features.csv");
    ds.save(&path).unwrap();
    let mut base = tiny();
    base.set("data", path.to_str().unwrap()).unwrap();
    base.set("ontology", "semantic").unwrap();
    let mut grid = AblationGrid::new(base);
    grid.assignments = vec![Assignment::Tree, Assignment::Random];
    let result = run_ablation::<f64>(&grid).unwrap();
    assert_eq!(result.rows.len(), 2);
    let tree = &result.rows[0];
    assert_eq!(tree.config.assignment, Assignment::Tree);
    assert!(tree.outcome.as_ref().unwrap_err().contains("ontology"));
    assert!(result.rows[1].outcome.is_ok());
    assert!(result.to_csv().contains(",failed: "));
}

#[test]
fn errors_carry_their_stage() {
    let mut cfg = tiny();
    cfg.set("data", "/nonexistent/features.csv").unwrap();
    match execute::<f64>(&cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "data"),
        other => panic!("expected a data-stage error, got {:?}", other.err()),
    }
    let cfg = ExperimentConfig { ks: vec![1, 9], ..tiny() };
    assert!(matches!(execute::<f64>(&cfg), Err(Error::Stage { stage: "eval", .. })));
    let cfg = ExperimentConfig { lambda: 1.0, ..tiny() };
    assert!(matches!(execute::<f64>(&cfg), Err(Error::Stage { stage: "config", .. })));
}

#[test]
fn config_parsing_and_overrides() {
    let pairs = parse_key_values("a = 1\n\n# note\n b=two words \n").unwrap();
    assert_eq!(pairs, vec![("a".into(), "1".into()), ("b".into(), "two words".into())]);
    assert!(matches!(parse_key_values("a = 1\nbroken\n"), Err(Error::Parse { line: 2, .. })));
    assert!(ExperimentConfig::from_text("no_such_key = 1").is_err());
    assert!(ExperimentConfig::from_text("lambda = lots").is_err());

    let mut cfg = tiny();
    assert_eq!(cfg.group_size, 2);
    cfg.set("M", "3").unwrap();
    cfg.set("variant", "scaled").unwrap();
    assert_eq!(cfg.group_size, 3);
    assert_eq!(cfg.variant, StackVariant::Scaled);
    let round = ExperimentConfig::from_pairs(cfg.to_pairs().iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
    assert_eq!(round.to_pairs(), cfg.to_pairs());
    assert_eq!(round.hash(), cfg.hash());
    assert_ne!(tiny().hash(), cfg.hash());
    let seeds = cfg.seeds();
    for role in ["data", "ontology", "assign", "expert", "head"] {
        assert_eq!(seeds[role], 3, "{role}");
    }
}

#[test]
fn topk_is_monotone_in_k() {
    let rankings = vec![vec![2, 0, 1, 3], vec![1, 3, 0, 2], vec![0, 1, 2, 3]];
    let labels = vec![1, 2, 0];
    let accs: Vec<f64> = (1..=4).map(|k| topk_accuracy(&rankings, &labels, k).unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(accs, vec![1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    assert_eq!(*accs.last().unwrap(), 1.0);
}

#[test]
fn prediction_rows() {
    let cfg = tiny();
    let run = execute::<f64>(&cfg).unwrap();
    let (ds, _) = load_data::<f64>(&cfg).unwrap();
    let csv = predictions_csv(&run.model, &ds, Split::Test, 2).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample_id,rank,class_id,score"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * ds.test().len());
    for pair in rows.chunks(2) {
        assert_eq!(pair[0][0], pair[1][0]);
        assert_eq!((pair[0][1], pair[1][1]), ("1", "2"));
        let (a, b): (f64, f64) = (pair[0][3].parse().unwrap(), pair[1][3].parse().unwrap());
        assert!(a >= b);
    }
    assert!(predictions_csv(&run.model, &ds, Split::Test, 5).is_err());
    assert!(predictions_csv(&run.model, &ds, Split::Test, 0).is_err());
}
