//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.

use std::io::Write;
use std::sync::OnceLock;

use dmde_core::dataset::{generate_synthetic, load_features, SynthSpec};
use dmde_core::expert::{gradient, loss, similarity_matrix, Backbone, ExpertModel, LabeledInput, TrainConfig};
use dmde_core::fusion::{stack_features, SoftmaxHead, StackVariant};
use dmde_core::harness::{
    build_ontology, build_plan, coupling_comparison, execute, load_data, report_from_checkpoints, run_ablation,
    run_pipeline, AblationGrid, AblationResult, Assignment, ExperimentConfig, FittedModel, Fusion, Method,
};
use dmde_core::linalg::{symmetric_eigen, Matrix};
use dmde_core::ontology::{spectral_partition, AffinityKind, AffinityMatrix, KernelConfig};
use dmde_core::taskgroups::{group_count, random_groups, TaskGroup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SIMPLEX_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-9;
const MIN_EIGEN_TOL: f64 = -1e-8;
const STACK_TOL: f64 = 1e-12;
const LAMBDA_NOISE: f64 = 0.005;
const TIE_TOL: f64 = 1e-12;

fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn reference_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set("seed", &seed.to_string()).unwrap();
    cfg.group_size = 10;
    cfg.lambda = 0.5;
    cfg.assignment = Assignment::Tree;
    cfg.variant = StackVariant::Odds;
    cfg.fusion = Fusion::Late;
    cfg
}

fn reference_grid() -> &'static AblationResult {
    static GRID: OnceLock<AblationResult> = OnceLock::new();
    GRID.get_or_init(|| {
        let grid = AblationGrid {
            base: reference_config(SEEDS[0]),
            seeds: SEEDS.to_vec(),
            assignments: vec![Assignment::Tree, Assignment::Random],
            delta2s: vec![TrainConfig::default().delta2],
            lambdas: vec![0.0, 0.25, 0.5],
            variants: vec![StackVariant::Odds],
            fusions: vec![Fusion::Late, Fusion::Early],
            baseline: true,
        };
        run_ablation::<f64>(&grid).expect("reference grid")
    })
}

fn top1(grid: &AblationResult, seed: u64, pred: impl Fn(&ExperimentConfig) -> bool) -> f64 {
    let row = grid.rows.iter().find(|r| r.seed == seed && pred(&r.config)).expect("grid cell");
    match &row.outcome {
        Ok(report) => report.top(1).unwrap(),
        Err(e) => panic!("cell {} failed: {e}", row.config_hash),
    }
}

fn mixture(assignment: Assignment, lambda: f64, fusion: Fusion) -> impl Fn(&ExperimentConfig) -> bool {
    move |c| c.method == Method::Mixture && c.assignment == assignment && c.lambda == lambda && c.fusion == fusion
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_expert(
    rng: &mut ChaCha8Rng,
    m: usize,
    dim: usize,
    hidden: &[usize],
    members: Vec<usize>,
) -> ExpertModel<f64> {
    let backbone = Backbone::new(dim, hidden, rng);
    let mut model = ExpertModel::init(TaskGroup::new(0, members).unwrap(), backbone, rng);
    let n = model.num_params();
    model.set_params(&random_vec(rng, n, 0.8)).unwrap();
    assert_eq!(model.group_size(), m);
    model
}

#[test]
fn criterion_01_group_count_arithmetic() {
    let a = group_count(7756, 970, 0.5).unwrap();
    let b = group_count(7756, 970, 0.0).unwrap();
    let pass = a == 16 && b == 8;
    report(1, pass, &format!("(group_count at overlap 0.5 = {a}, at overlap 0 = {b})"));
    assert!(pass);
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let deltas = [0.0, 0.1, 1.0];
    let mut instances = 0;
    let mut worst: f64 = 0.0;
    for &delta1 in &deltas {
        for &delta2 in &deltas {
            for rep in 0..12 {
                let m = rng.random_range(2..=4);
                let dim = rng.random_range(2..=4);
                let hidden: Vec<usize> = if rep % 3 == 0 { vec![] } else { vec![rng.random_range(2..=4)] };
                let model = random_expert(&mut rng, m, dim, &hidden, (0..m).collect());
                let xs: Vec<Vec<f64>> = (0..rng.random_range(3..=6)).map(|_| random_vec(&mut rng, dim, 1.5)).collect();
                let slots: Vec<usize> = xs.iter().map(|_| rng.random_range(0..=m)).collect();
                let batch: Vec<LabeledInput<f64>> =
                    xs.iter().zip(&slots).map(|(x, &slot)| LabeledInput { x, slot }).collect();
                let by_slot: Vec<Vec<&[f64]>> =
                    (0..m).map(|_| vec![xs[rng.random_range(0..xs.len())].as_slice()]).collect();
                let sim = similarity_matrix(&by_slot, &KernelConfig::with_bandwidth(1.3)).unwrap();
                let cfg = TrainConfig { mu: rng.random_range(0.5..2.0), delta1, delta2, ..TrainConfig::default() };
                let analytic = gradient(&model, &batch, &sim, &cfg).unwrap().to_flat();
                let numeric = central_difference(&model.params(), |p| {
                    let mut probe = model.clone();
                    probe.set_params(p).unwrap();
                    loss(&probe, &batch, &sim, &cfg).unwrap()
                });
                worst = worst.max(rel_err(&analytic, &numeric));
                instances += 1;

                // stacking head on random non-negative features
                let classes = rng.random_range(2..=5);
                let inputs = rng.random_range(2..=5);
                let mut head = SoftmaxHead::<f64>::zeros(classes, inputs);
                for w in head.weights.as_mut_slice() {
                    *w = rng.random_range(-1.0..1.0);
                }
                for b in head.bias.iter_mut() {
                    *b = rng.random_range(-1.0..1.0);
                }
                let feats: Vec<Vec<f64>> =
                    (0..4).map(|_| (0..inputs).map(|_| rng.random_range(0.0..3.0)).collect()).collect();
                let views: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
                let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..classes)).collect();
                let g = head.gradient(&views, &labels, cfg.mu).unwrap();
                let analytic: Vec<f64> = g.weights.as_slice().iter().chain(&g.bias).copied().collect();
                let flat: Vec<f64> = head.weights.as_slice().iter().chain(&head.bias).copied().collect();
                let numeric = central_difference(&flat, |p| {
                    let mut probe = head.clone();
                    let nw = probe.weights.as_slice().len();
                    probe.weights.as_mut_slice().copy_from_slice(&p[..nw]);
                    probe.bias.copy_from_slice(&p[nw..]);
                    probe.loss(&views, &labels, cfg.mu).unwrap()
                });
                worst = worst.max(rel_err(&analytic, &numeric));
                instances += 1;
            }
        }
    }
    let pass = instances >= 100 && worst < GRAD_REL_TOL;
    report(2, pass, &format!("({instances} instances, worst relative error {worst:.2e})"));
    assert!(pass);
}

#[test]
fn criterion_03_softmax_and_laplacian_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    let mut worst_row: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut outputs = 0;
    for trial in 0..60 {
        let m = rng.random_range(1..=20);
        let dim = rng.random_range(1..=6);
        let model = random_expert(&mut rng, m, dim, &[5], (0..m).collect());
        for _ in 0..20 {
            let scale = if trial % 4 == 0 { 50.0 } else { 2.0 };
            let x = random_vec(&mut rng, dim, scale);
            let p = model.forward(&x).unwrap();
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
            outputs += 1;
        }
        let per_class = rng.random_range(1..=4);
        let points: Vec<Vec<Vec<f64>>> =
            (0..m).map(|_| (0..per_class).map(|_| random_vec(&mut rng, dim, 2.0)).collect()).collect();
        let by_slot: Vec<Vec<&[f64]>> = points.iter().map(|c| c.iter().map(Vec::as_slice).collect()).collect();
        let sim = similarity_matrix(&by_slot, &KernelConfig::default()).unwrap();
        let l = &sim.laplacian;
        for i in 0..m {
            worst_row = worst_row.max(l.row(i).iter().sum::<f64>().abs());
        }
        min_eig = min_eig.min(symmetric_eigen(l).unwrap().values[0]);
    }
    let pass = worst_sum <= SIMPLEX_TOL && worst_row <= ROW_SUM_TOL && min_eig >= MIN_EIGEN_TOL;
    report(
        3,
        pass,
        &format!("({outputs} outputs, max |sum-1| {worst_sum:.1e}, max |row sum| {worst_row:.1e}, min eigenvalue {min_eig:.1e})"),
    );
    assert!(pass);
}

fn oracle_upsilon(
    probs: &[Vec<f64>],
    members: &[Vec<usize>],
    n: usize,
    lambda: f64,
    variant: StackVariant,
) -> Vec<f64> {
    let lambda_prime = if lambda > 0.0 { lambda } else { 1.0 };
    let mut out = vec![0.0; n];
    for (i, slot_out) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for (p, group) in probs.iter().zip(members) {
            let m = group.len();
            let phi = p[m].clamp(1e-6, 1.0 - 1e-6);
            let slot = group.iter().position(|&c| c == i);
            let ps = slot.map_or(0.0, |s| p[s]);
            let term = match variant {
                StackVariant::Odds => {
                    let weight = if slot.is_some() { 1.0 } else { lambda };
                    weight * ps * (1.0 - phi) / phi
                }
                StackVariant::Scaled => {
                    let indicator = if slot.is_some() { 1.0 } else { 0.0 };
                    lambda_prime * indicator * ps * phi
                }
            };
            total += term;
        }
        *slot_out = total;
    }
    out
}

#[test]
fn criterion_04_stacking_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut mixtures = 0;
    while mixtures < 1000 {
        let n = rng.random_range(2..=40);
        let m = rng.random_range(1..=n.min(10));
        let lambda = [0.0, 0.25, 0.5, 0.75][rng.random_range(0..4)];
        let plan = random_groups(n, m, lambda, rng.random()).unwrap();
        if plan.len() > 8 {
            continue;
        }
        let dim = 3;
        let logit_scale = if mixtures % 5 == 0 { 30.0 } else { 2.0 };
        let experts: Vec<ExpertModel<f64>> = plan
            .groups
            .iter()
            .map(|g| {
                let mut e = ExpertModel::init(g.clone(), Backbone::identity(dim), &mut rng);
                let k = e.num_params();
                e.set_params(&random_vec(&mut rng, k, logit_scale)).unwrap();
                e
            })
            .collect();
        let x = random_vec(&mut rng, dim, 1.0);
        let probs: Vec<Vec<f64>> = experts.iter().map(|e| e.forward(&x).unwrap()).collect();
        let members: Vec<Vec<usize>> = plan.groups.iter().map(|g| g.members.clone()).collect();
        for variant in [StackVariant::Odds, StackVariant::Scaled] {
            let got = stack_features(&experts, &plan, &x, lambda, variant).unwrap().upsilon;
            let want = oracle_upsilon(&probs, &members, n, lambda, variant);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
        mixtures += 1;
    }
    let pass = worst <= STACK_TOL;
    report(4, pass, &format!("({mixtures} mixtures, both variants, worst scaled deviation {worst:.1e})"));
    assert!(pass);
}

/// Every partition of `0..n` into exactly `k` non-empty blocks, as labels.
fn partitions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, k: usize, used: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            if used == k {
                out.push(cur.clone());
            }
            return;
        }
        if k - used > n - i {
            return;
        }
        for b in 0..used.min(k) {
            cur.push(b);
            rec(i + 1, n, k, used, cur, out);
            cur.pop();
        }
        if used < k {
            cur.push(used);
            rec(i + 1, n, k, used + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, 0, &mut Vec::new(), &mut out);
    out
}

fn normalized_cut(w: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut cut = vec![0.0; k];
    let mut vol = vec![0.0; k];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                vol[labels[i]] += w[i][j];
                if labels[i] != labels[j] {
                    cut[labels[i]] += w[i][j];
                }
            }
        }
    }
    (0..k).map(|b| cut[b] / vol[b]).sum()
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

#[test]
fn criterion_05_spectral_partition_recovers_planted_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut recovered = 0;
    let mut oracle_agrees = 0;
    let instances = 50;
    for seed in 0..instances {
        let k = rng.random_range(2..=4);
        let mut sizes = vec![2; k];
        let extra = rng.random_range(0..=(8 - 2 * k));
        for _ in 0..extra {
            sizes[rng.random_range(0..k)] += 1;
        }
        let mut planted: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect();
        for i in (1..planted.len()).rev() {
            planted.swap(i, rng.random_range(0..=i));
        }
        let n = planted.len();
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            w[i][i] = 1.0;
            for j in 0..i {
                let v = if planted[i] == planted[j] { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.01) };
                w[i][j] = v;
                w[j][i] = v;
            }
        }
        let best = partitions(n, k)
            .into_iter()
            .min_by(|a, b| normalized_cut(&w, a, k).total_cmp(&normalized_cut(&w, b, k)))
            .unwrap();
        oracle_agrees += usize::from(canonical(&best) == canonical(&planted));
        let aff = AffinityMatrix::new(Matrix::from_rows(&w).unwrap(), AffinityKind::Visual).unwrap();
        let got = spectral_partition(&aff, k, seed).unwrap();
        recovered += usize::from(canonical(&got) == canonical(&best));
    }
    let pass = recovered == instances as usize && oracle_agrees == instances as usize;
    report(
        5,
        pass,
        &format!(
            "({recovered}/{instances} recovered; oracle optimum is the planted split in {oracle_agrees}/{instances})"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_mixture_beats_baseline_and_random_assignment() {
    let grid = reference_grid();
    let mut over_baseline = 0;
    let mut over_random = 0;
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let tree = top1(grid, seed, mixture(Assignment::Tree, 0.5, Fusion::Late));
        let random = top1(grid, seed, mixture(Assignment::Random, 0.5, Fusion::Late));
        let baseline = top1(grid, seed, |c| c.method == Method::Monolithic);
        over_baseline += usize::from(tree > baseline + TIE_TOL);
        over_random += usize::from(tree > random + TIE_TOL);
        detail.push(format!("{seed}: {tree:.4}/{random:.4}/{baseline:.4}"));
    }
    let pass = over_baseline >= 3 && over_random >= 3;
    report(
        6,
        pass,
        &format!(
            "(beats baseline {over_baseline}/5, beats random {over_random}/5; seed: tree/random/baseline {})",
            detail.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_coupling_helps_within_group_accuracy() {
    let groups = 7;
    let mut coupled = vec![0.0; groups];
    let mut uncoupled = vec![0.0; groups];
    for &seed in &SEEDS {
        let cfg = reference_config(seed);
        let (ds, tree) = load_data::<f64>(&cfg).unwrap();
        let ontology = build_ontology(&cfg, &ds, tree.as_ref()).unwrap();
        let plan = build_plan(&cfg, Some(&ontology), ds.n_classes()).unwrap();
        let cmp = coupling_comparison(&cfg, &ds, &plan, groups).unwrap();
        for g in 0..groups {
            coupled[g] += cmp.coupled[g] / SEEDS.len() as f64;
            uncoupled[g] += cmp.uncoupled[g] / SEEDS.len() as f64;
        }
    }
    let wins = (0..groups).filter(|&g| coupled[g] > uncoupled[g] + TIE_TOL).count();
    let ties = (0..groups).filter(|&g| (coupled[g] - uncoupled[g]).abs() <= TIE_TOL).count();
    let pass = wins >= 4;
    let per_group: Vec<String> = (0..groups).map(|g| format!("{:+.4}", coupled[g] - uncoupled[g])).collect();
    report(7, pass, &format!("(coupled wins {wins}/{groups}, ties {ties}; mean differences {})", per_group.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_08_accuracy_non_decreasing_in_overlap() {
    let grid = reference_grid();
    let lambdas = [0.0, 0.25, 0.5];
    let means: Vec<f64> = lambdas
        .iter()
        .map(|&l| {
            SEEDS.iter().map(|&s| top1(grid, s, mixture(Assignment::Tree, l, Fusion::Late))).sum::<f64>()
                / SEEDS.len() as f64
        })
        .collect();
    let pass = means.windows(2).all(|w| w[1] >= w[0] - LAMBDA_NOISE);
    report(
        8,
        pass,
        &format!(
            "(mean top-1 at overlap 0 / 0.25 / 0.5: {:.4} / {:.4} / {:.4}, allowance {LAMBDA_NOISE})",
            means[0], means[1], means[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_late_fusion_at_least_early_fusion() {
    let grid = reference_grid();
    let mut wins = 0;
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let late = top1(grid, seed, mixture(Assignment::Tree, 0.5, Fusion::Late));
        let early = top1(grid, seed, mixture(Assignment::Tree, 0.5, Fusion::Early));
        wins += usize::from(late >= early - TIE_TOL);
        detail.push(format!("{seed}: {late:.4}/{early:.4}"));
    }
    let pass = wins >= 3;
    report(9, pass, &format!("(late >= early in {wins}/5; seed: late/early {})", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_10_determinism_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = reference_config(7);
    cfg.output_dir = dir.path().join("a");
    let a = run_pipeline::<f64>(&cfg).unwrap();
    cfg.output_dir = dir.path().join("b");
    let b = run_pipeline::<f64>(&cfg).unwrap();
    let read = |sub: &str| {
        let text = std::fs::read_to_string(dir.path().join(sub).join("report.json")).unwrap();
        dmde_core::harness::Report::from_json(&text).unwrap().canonical_json().unwrap()
    };
    let reports_identical = a.canonical_json().unwrap() == b.canonical_json().unwrap() && read("a") == read("b");

    let rebuilt = report_from_checkpoints::<f64>(&cfg, dir.path().join("a").join("checkpoints")).unwrap();
    let rebuilt_identical = rebuilt.canonical_json().unwrap() == a.canonical_json().unwrap();

    let run = execute::<f64>(&cfg).unwrap();
    let saved = dir.path().join("ckpt");
    run.model.save(&saved, &cfg.expert).unwrap();
    let model_identical = FittedModel::<f64>::load(&saved).unwrap() == run.model;

    let (ds, _) = generate_synthetic::<f64>(&SynthSpec { seed: 7, ..SynthSpec::default() }).unwrap();
    let path = dir.path().join("data.csv");
    ds.save(&path).unwrap();
    let dataset_identical = load_features::<f64>(&path).unwrap() == ds;

    let pass = reports_identical && rebuilt_identical && model_identical && dataset_identical;
    report(
        10,
        pass,
        &format!(
            "(reports identical {reports_identical}, rebuilt from checkpoints {rebuilt_identical}, checkpoint round trip {model_identical}, dataset round trip {dataset_identical})"
        ),
    );
    assert!(pass);
}
