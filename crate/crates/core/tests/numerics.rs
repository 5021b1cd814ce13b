use std::collections::BTreeSet;

use chrono::NaiveDate;
use proptest::prelude::*;

use ehr_coagent::baselines::{loss_and_gradient, DecisionTree, LogRegParams, LogisticModel, Node, TreeParams};
use ehr_coagent::cohort::{split_cohort, stratified_sample};
use ehr_coagent::eval::{metrics, ConfusionMatrix};
use ehr_coagent::model::{CodingSystem, CohortExample, Label, MedicalCode, Split, Visit};
use ehr_coagent::narrative::{phenotype_label, PhenotypeMap};

fn labels(bits: &[bool]) -> Vec<Label> {
    bits.iter().copied().map(Label::from_bool).collect()
}

fn cm_strategy() -> impl Strategy<Value = ConfusionMatrix> {
    (0u64..500, 0u64..500, 0u64..500, 0u64..500)
        .prop_filter("nonempty", |(a, b, c, d)| a + b + c + d > 0)
        .prop_map(|(tp, fp, fn_, tn)| ConfusionMatrix { tp, fp, fn_, tn })
}

fn pool(flags: &[bool]) -> Vec<CohortExample> {
    flags
        .iter()
        .enumerate()
        .map(|(i, &pos)| CohortExample {
            example_id: format!("e{i}"),
            patient_id: format!("p{i}"),
            input_visit: Visit::new(format!("v{i}"), format!("p{i}"), NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()),
            label: Label::from_bool(pos),
            split: Split::Train,
            task_id: "prop".into(),
        })
        .collect()
}

/// Walks the node list by hand instead of going through the tree's own lookup.
fn walk(tree: &DecisionTree, row: &[f64]) -> f64 {
    let mut at = 0;
    loop {
        match &tree.nodes[at] {
            Node::Split { feature, threshold, left, right } => {
                at = if row[*feature] <= *threshold { *left } else { *right };
            }
            Node::Leaf { negatives, positives } => {
                let n = negatives + positives;
                return if n == 0 { 0.5 } else { *positives as f64 / n as f64 };
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn label_swap_exchanges_sensitivity_and_specificity(cm in cm_strategy()) {
        let m = metrics(&cm).unwrap();
        let s = metrics(&cm.swapped()).unwrap();
        prop_assert_eq!(m.sensitivity, s.specificity);
        prop_assert_eq!(m.specificity, s.sensitivity);
        prop_assert_eq!(m.accuracy, s.accuracy);
    }

    #[test]
    fn accuracy_is_prevalence_weighted(cm in cm_strategy()) {
        let m = metrics(&cm).unwrap();
        let acc = m.accuracy.unwrap();
        let expect = m.prevalence * m.sensitivity.unwrap_or(0.0) + (1.0 - m.prevalence) * m.specificity.unwrap_or(0.0);
        prop_assert!((acc - expect).abs() < 1e-12);
        for v in [m.accuracy, m.sensitivity, m.specificity, m.f1].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn phenotype_label_matches_scan(
        mapped in proptest::collection::btree_set(0u8..30, 0..10),
        diag in proptest::collection::btree_set(0u8..30, 0..6),
        meds in proptest::collection::btree_set(0u8..30, 0..6),
    ) {
        let mut pheno = PhenotypeMap::default();
        for c in &mapped {
            pheno.insert(CodingSystem::Icd10, format!("C{c:02}"), "target");
        }
        pheno.insert(CodingSystem::Icd10, "C99", "other");
        let codes = diag
            .iter()
            .map(|c| MedicalCode::diagnosis(CodingSystem::Icd10, &format!("C{c:02}")).unwrap())
            .chain(meds.iter().map(|c| MedicalCode::medication(CodingSystem::Icd10, &format!("C{c:02}")).unwrap()));
        let visit = Visit::new("v", "p", NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()).with_codes(codes);
        let expect = diag.iter().any(|c| mapped.contains(c));
        prop_assert_eq!(phenotype_label(&pheno, &visit, "target"), Label::from_bool(expect));
    }

    #[test]
    fn small_gradient_step_lowers_loss(
        rows in proptest::collection::vec((proptest::collection::vec(-2.0f64..2.0, 3), any::<bool>()), 2..15),
        w in proptest::collection::vec(-1.0f64..1.0, 3),
        b in -1.0f64..1.0,
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let y = labels(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
        let (loss, g, gb) = loss_and_gradient(&w, b, &x, &y, 0.1);
        let step = 1e-4;
        let moved: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
        let (after, _, _) = loss_and_gradient(&moved, b - step * gb, &x, &y, 0.1);
        prop_assert!(after <= loss + 1e-12);
    }

    #[test]
    fn logreg_probabilities_are_valid(
        rows in proptest::collection::vec((proptest::collection::vec(0.0f64..1.0, 4), any::<bool>()), 2..30),
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let y = labels(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
        let model = LogisticModel::fit(&x, &y, &LogRegParams::default());
        for row in &x {
            let p = model.predict_proba(row);
            prop_assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn tree_lookup_matches_manual_walk(
        rows in proptest::collection::vec((proptest::collection::vec(0u8..4, 5), any::<bool>()), 1..40),
        probes in proptest::collection::vec(proptest::collection::vec(0u8..4, 5), 1..20),
        depth in 0usize..6,
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.iter().map(|&v| f64::from(v)).collect()).collect();
        let y = labels(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
        let tree = DecisionTree::fit(&x, &y, &TreeParams { max_depth: depth, ..Default::default() });
        prop_assert!(tree.depth() <= depth);
        for row in x.iter().cloned().chain(probes.iter().map(|p| p.iter().map(|&v| f64::from(v)).collect())) {
            prop_assert_eq!(tree.predict_proba(&row), walk(&tree, &row));
        }
    }

    #[test]
    fn deep_tree_fits_consistent_data(
        table in proptest::collection::btree_map(proptest::collection::vec(0u8..3, 4), any::<bool>(), 1..40),
    ) {
        let x: Vec<Vec<f64>> = table.keys().map(|k| k.iter().map(|&v| f64::from(v)).collect()).collect();
        let y = labels(&table.values().copied().collect::<Vec<_>>());
        let tree = DecisionTree::fit(&x, &y, &TreeParams { max_depth: 64, ..Default::default() });
        for (row, label) in x.iter().zip(&y) {
            let p = tree.predict_proba(row);
            prop_assert_eq!(p, if label.is_positive() { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn stratified_sample_is_a_subset(flags in proptest::collection::vec(any::<bool>(), 2..300), n in 1usize..300, seed in any::<u64>()) {
        let pool = pool(&flags);
        prop_assume!(flags.iter().any(|&f| f) && flags.iter().any(|&f| !f));
        if let Ok(s) = stratified_sample(&pool, n, seed) {
            let ids: BTreeSet<&str> = s.iter().map(|e| e.example_id.as_str()).collect();
            prop_assert_eq!(ids.len(), s.len());
            prop_assert_eq!(s.len(), n);
            let all: BTreeSet<&str> = pool.iter().map(|e| e.example_id.as_str()).collect();
            prop_assert!(ids.is_subset(&all));
        } else {
            prop_assert!(n > pool.len());
        }
    }

    #[test]
    fn split_partitions_the_cohort(flags in proptest::collection::vec(any::<bool>(), 3..300), seed in any::<u64>()) {
        let pool = pool(&flags);
        if let Ok(split) = split_cohort(&pool, [0.6, 0.2, 0.2], seed) {
            let mut ids: Vec<&str> = split.all().map(|e| e.example_id.as_str()).collect();
            ids.sort_unstable();
            let mut expect: Vec<&str> = pool.iter().map(|e| e.example_id.as_str()).collect();
            expect.sort_unstable();
            prop_assert_eq!(ids, expect);
            prop_assert!(split.train.iter().all(|e| e.split == Split::Train));
            prop_assert!(split.calibration.iter().all(|e| e.split == Split::Calibration));
            prop_assert!(split.test.iter().all(|e| e.split == Split::Test));
            let sizes = [split.train.len(), split.calibration.len(), split.test.len()];
            for (size, f) in sizes.iter().zip([0.6, 0.2, 0.2]) {
                prop_assert!((*size as f64 - f * pool.len() as f64).abs() < 1.0);
            }
        }
    }
}
