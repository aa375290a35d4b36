mod common;

use std::sync::Arc;

use alece_core::queryfeat::{canonicalize_joins, decode_interval, Featurizer, JoinFeatVariant};
use alece_core::relstore::{
    true_cardinality, AttrKind, AttrRef, CmpOp, FilterPredicate, JoinPattern, RelationDef,
    AttributeDef, RowStore, Schema, SubQuery,
};
use alece_core::workloadgen::generate_query;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{join, random_store, three_relations};

fn attrs(seed: u64, n: usize) -> Vec<AttrRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| AttrRef::new(rng.gen_range(0..4), rng.gen_range(0..3))).collect()
}

/// Attribute classes of a join set, each sorted, as an oracle for
/// equivalence.
fn classes(joins: &[JoinPattern]) -> Vec<Vec<AttrRef>> {
    let mut classes: Vec<Vec<AttrRef>> = Vec::new();
    for j in joins {
        let hit: Vec<usize> = (0..classes.len())
            .filter(|&i| classes[i].contains(&j.left) || classes[i].contains(&j.right))
            .collect();
        let mut merged = vec![j.left, j.right];
        for &i in hit.iter().rev() {
            merged.extend(classes.remove(i));
        }
        merged.sort();
        merged.dedup();
        classes.push(merged);
    }
    classes.sort();
    classes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn canonicalization_is_idempotent_and_class_preserving(seed in any::<u64>(), n in 1usize..10) {
        let pool = attrs(seed, 2 * n);
        let joins: Vec<JoinPattern> = pool
            .chunks(2)
            .filter(|c| c[0].rel != c[1].rel)
            .map(|c| JoinPattern::new(c[0], c[1]))
            .collect();
        let once = canonicalize_joins(&joins);
        prop_assert_eq!(canonicalize_joins(&once), once.clone());
        prop_assert_eq!(classes(&once), classes(&joins));
        // A chain per class: one predicate fewer than the class size.
        let k: usize = classes(&joins).iter().map(|c| c.len() - 1).sum();
        prop_assert_eq!(once.len(), k);
    }

    #[test]
    fn equivalent_join_sets_featurize_identically(seed in any::<u64>()) {
        // r.k, s.k and t.k form one class; any two of the three edges span it.
        let schema = Arc::new(three_relations(true));
        let f = Featurizer::new(Arc::clone(&schema), JoinFeatVariant::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class = [join((0, 0), (1, 0)), join((1, 0), (2, 1)), join((2, 1), (0, 0))];
        let pick = |rng: &mut ChaCha8Rng| {
            let k = rng.gen_range(2..=3);
            let mut edges: Vec<JoinPattern> = class.choose_multiple(rng, k).copied().collect();
            edges.push(join((1, 1), (2, 0)));
            edges.shuffle(rng);
            // Raw orientation flips, bypassing the constructor's ordering.
            edges
                .into_iter()
                .map(|j| if rng.gen_bool(0.5) { JoinPattern { left: j.right, right: j.left } } else { j })
                .collect::<Vec<_>>()
        };
        let a = SubQuery { relations: vec![0, 1, 2], joins: pick(&mut rng), filters: vec![] };
        let b = SubQuery { relations: vec![0, 1, 2], joins: pick(&mut rng), filters: vec![] };
        let (fa, fb) = (f.featurize(&a).unwrap(), f.featurize(&b).unwrap());
        prop_assert_eq!(&fa, &fb);
        prop_assert_eq!(fa.full().len(), f.dim());
    }

    #[test]
    fn integer_filters_decode_losslessly(seed in any::<u64>()) {
        let int = |n: &str, lo: f64, hi: f64| AttributeDef::new(n, AttrKind::Integer, lo, hi);
        let schema = Arc::new(
            Schema::new(
                vec![RelationDef {
                    name: "r".into(),
                    attributes: vec![int("a", -5.0, 17.0), int("b", 0.0, 3.0), int("c", 100.0, 400.0)],
                }],
                vec![],
            )
            .unwrap(),
        );
        let f = Featurizer::new(Arc::clone(&schema), JoinFeatVariant::Full);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&schema, 60, &mut rng);
        let data = vec![store.rows(0).map(|(_, v)| v.to_vec()).collect::<Vec<_>>()];
        for _ in 0..20 {
            let mut q = generate_query(&schema, &data, &mut rng).unwrap();
            // Also exercise constants that are not on the grid of data values.
            if rng.gen_bool(0.3) {
                let a = rng.gen_range(0..3);
                let def = &schema.relation(0).attributes[a];
                let ops = [CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge, CmpOp::Eq];
                let v = rng.gen_range(def.low - 2.0..def.high + 2.0);
                q.filters.push(FilterPredicate::new(AttrRef::new(0, a), *ops.choose(&mut rng).unwrap(), v));
            }
            let feat = f.featurize(&q).unwrap();
            let truth = true_cardinality(&store, &q);
            if feat.empty_range {
                prop_assert_eq!(truth, 0);
                continue;
            }
            let mut decoded = Vec::new();
            for (k, a) in schema.attr_refs().into_iter().enumerate() {
                let (lo, hi) = decode_interval(schema.attr(a), feat.filter_vec[2 * k], feat.filter_vec[2 * k + 1]);
                decoded.push(FilterPredicate::new(a, CmpOp::Ge, lo));
                decoded.push(FilterPredicate::new(a, CmpOp::Lt, hi));
            }
            let back = SubQuery::single(0, decoded);
            prop_assert_eq!(true_cardinality(&store, &back), truth);
        }
    }

    #[test]
    fn query_width_is_fixed_per_schema(seed in any::<u64>(), simple in any::<bool>()) {
        let schema = Arc::new(three_relations(true));
        let variant = if simple { JoinFeatVariant::Simple } else { JoinFeatVariant::Full };
        let f = Featurizer::new(Arc::clone(&schema), variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&schema, 10, &mut rng);
        let data: Vec<Vec<Vec<f64>>> = (0..3).map(|r| store.rows(r).map(|(_, v)| v.to_vec()).collect()).collect();
        for _ in 0..10 {
            let q = generate_query(&schema, &data, &mut rng).unwrap();
            let v = f.featurize(&q).unwrap().full();
            prop_assert_eq!(v.len(), f.dim());
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn point_predicate_on_integer_domain() {
    let schema = Arc::new(
        Schema::new(
            vec![RelationDef {
                name: "r".into(),
                attributes: vec![AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0)],
            }],
            vec![],
        )
        .unwrap(),
    );
    let f = Featurizer::new(Arc::clone(&schema), JoinFeatVariant::Full);
    let q = SubQuery::single(0, vec![FilterPredicate::new(AttrRef::new(0, 0), CmpOp::Eq, 7.0)]);
    let v = f.featurize(&q).unwrap().filter_vec;
    assert!((v[0] - 0.7).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12, "{v:?}");
    let none = f.featurize(&SubQuery::single(0, vec![])).unwrap();
    assert_eq!(none.filter_vec, vec![0.0, 1.0]);
    assert!(none.join_vec.iter().all(|&x| x == 0.0));
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    let store = RowStore::with_rows(schema, &[rows]).unwrap();
    assert_eq!(true_cardinality(&store, &q), 1);
}
