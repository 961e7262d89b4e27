use dmde_core::ontology::{build_semantic_matrix, build_two_layer_ontology, TaxonomyNode, TaxonomyTree};
use dmde_core::taskgroups::{generate_groups, group_count, random_groups, stride, GroupingPlan};
use proptest::prelude::*;

/// Windows enumerated one class at a time, wrapping with a counter instead of modulo.
fn oracle_windows(order: &[usize], m: usize, lambda: f64) -> Vec<Vec<usize>> {
    let step = ((m as f64 * (1.0 - lambda)).round() as usize).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut window = Vec::new();
        let mut pos = start;
        for _ in 0..m {
            if pos >= order.len() {
                pos -= order.len();
            }
            window.push(order[pos]);
            pos += 1;
        }
        out.push(window);
        start += step;
    }
    out
}

fn members(plan: &GroupingPlan) -> Vec<Vec<usize>> {
    plan.groups.iter().map(|g| g.members.clone()).collect()
}

proptest! {
    #[test]
    fn windows_match_oracle(
        order in (2usize..40).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle()),
        m_frac in 0.01f64..1.0,
        lambda in 0.0f64..0.95,
    ) {
        let n = order.len();
        let m = ((n as f64 * m_frac).ceil() as usize).clamp(1, n);
        let plan = generate_groups(&order, m, lambda).unwrap();
        prop_assert_eq!(members(&plan), oracle_windows(&order, m, lambda));
        prop_assert_eq!(plan.len(), group_count(n, m, lambda).unwrap());
        prop_assert!(plan.membership_counts().iter().all(|&c| c >= 1));
        for g in &plan.groups {
            prop_assert_eq!(g.sentinel_index(), m);
            for (slot, &c) in g.members.iter().enumerate() {
                prop_assert!(plan.membership(c).unwrap().contains(&(g.index, slot)));
            }
        }
        plan.validate().unwrap();
    }

    #[test]
    fn multiplicity_bounded_by_overlap(n in 4usize..60, m in 1usize..20, lambda in 0.0f64..0.9) {
        prop_assume!(m <= n);
        let plan = random_groups(n, m, lambda, 7).unwrap();
        let s = stride(m, lambda).unwrap();
        let counts = plan.membership_counts();
        let hi = m.div_ceil(s) + 1;
        prop_assert!(counts.iter().all(|&c| c >= 1 && c <= hi), "counts {:?}, bound {}", counts, hi);
        prop_assert_eq!(counts.iter().sum::<usize>(), plan.len() * m);
    }
}

#[test]
fn group_count_table() {
    let cases = [
        (7756, 970, 0.5, 16),
        (7756, 970, 0.0, 8),
        (100, 10, 0.5, 20),
        (100, 10, 0.0, 10),
        (10, 4, 0.5, 5),
        (5, 5, 0.0, 1),
    ];
    for (n, m, lambda, want) in cases {
        assert_eq!(group_count(n, m, lambda).unwrap(), want, "n={n} M={m} λ={lambda}");
    }
}

#[test]
fn random_half_overlap_doubles_every_class() {
    for seed in 0..20 {
        let plan = random_groups(10, 4, 0.5, seed).unwrap();
        assert_eq!(plan.len(), 5);
        assert!(plan.membership_counts().iter().all(|&c| c == 2), "seed {seed}");
    }
    assert_ne!(members(&random_groups(30, 5, 0.5, 1).unwrap()), members(&random_groups(30, 5, 0.5, 2).unwrap()));
}

#[test]
fn membership_slots() {
    let order: Vec<usize> = (0..10).collect();
    let plan = generate_groups(&order, 4, 0.5).unwrap();
    assert_eq!(plan.membership(2).unwrap(), vec![(0, 2), (1, 0)]);
    assert_eq!(plan.membership(0).unwrap(), vec![(0, 0), (4, 2)]);
}

#[test]
fn siblings_share_a_window_under_the_semantic_ontology() {
    // 4 parents with 3 leaves each; leaf ids interleaved so that raw class order scatters siblings
    let mut nodes = vec![TaxonomyNode { id: 0, parent: None, label: "root".into() }];
    for p in 1..=4u64 {
        nodes.push(TaxonomyNode { id: p, parent: Some(0), label: format!("p{p}") });
    }
    for leaf in 0..12u64 {
        nodes.push(TaxonomyNode { id: 100 + leaf, parent: Some(1 + leaf % 4), label: format!("l{leaf}") });
    }
    let tree = TaxonomyTree::from_nodes(nodes).unwrap();
    let onto = build_two_layer_ontology(&build_semantic_matrix::<f64>(&tree).unwrap(), 4, 3).unwrap();
    let plan = generate_groups(&onto.leaf_order, 3, 0.0).unwrap();
    for siblings in tree.sibling_groups() {
        let together = plan.groups.iter().any(|g| siblings.iter().all(|c| g.contains(*c)));
        assert!(together, "siblings {siblings:?} split across {:?}", members(&plan));
    }
}
