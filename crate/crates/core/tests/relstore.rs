mod common;

use std::sync::Arc;

use alece_core::relstore::{
    count_hash_join, count_nested_loop, enumerate_sub_queries, parse_sql, true_cardinality,
    RowStore, SubQuery, SubQueryKind,
};
use alece_core::workloadgen::generate_query;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_statement, random_store, three_relations};

/// Cross product of every relation's rows, filtered by all predicates.
fn brute_force(store: &RowStore, q: &SubQuery) -> u64 {
    let rows: Vec<Vec<&[f64]>> = q
        .relations
        .iter()
        .map(|&r| store.rows(r).map(|(_, v)| v).collect())
        .collect();
    let pos = |rel: usize| q.relations.iter().position(|&r| r == rel).unwrap();
    let mut idx = vec![0usize; rows.len()];
    if rows.iter().any(Vec::is_empty) {
        return 0;
    }
    let mut count = 0;
    loop {
        let row = |rel: usize| rows[pos(rel)][idx[pos(rel)]];
        let ok = q.filters.iter().all(|f| f.matches(row(f.attr.rel)))
            && q.joins.iter().all(|j| row(j.left.rel)[j.left.attr] == row(j.right.rel)[j.right.attr]);
        count += ok as u64;
        let mut k = 0;
        loop {
            if k == idx.len() {
                return count;
            }
            idx[k] += 1;
            if idx[k] < rows[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn hand_enumerable_join() {
    use alece_core::relstore::{AttrKind, AttributeDef, RelationDef, Schema};
    let a = || AttributeDef::new("a", AttrKind::Integer, 0.0, 5.0);
    let schema = Arc::new(
        Schema::new(
            vec![
                RelationDef { name: "r".into(), attributes: vec![a()] },
                RelationDef { name: "s".into(), attributes: vec![a()] },
            ],
            vec![common::join((0, 0), (1, 0))],
        )
        .unwrap(),
    );
    let store = RowStore::with_rows(
        Arc::clone(&schema),
        &[vec![vec![1.0], vec![2.0]], vec![vec![2.0], vec![2.0], vec![3.0]]],
    )
    .unwrap();
    let q = SubQuery::new(vec![0, 1], schema.joins().to_vec(), vec![]);
    assert_eq!(count_nested_loop(&store, &q), 2);
    assert_eq!(count_hash_join(&store, &q), 2);
}

#[test]
fn chain_and_triangle_sub_query_counts() {
    let chain = three_relations(false);
    let q = SubQuery::new(vec![0, 1, 2], chain.joins().to_vec(), vec![]);
    let subs = enumerate_sub_queries(&q);
    let mut sets: Vec<Vec<usize>> = subs.iter().map(|s| s.relations.clone()).collect();
    sets.sort();
    assert_eq!(sets, vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![1], vec![1, 2], vec![2]]);

    let tri = three_relations(true);
    let q = SubQuery::new(vec![0, 1, 2], tri.joins().to_vec(), vec![]);
    assert_eq!(enumerate_sub_queries(&q).len(), 7);
    let single = SubQuery::single(1, vec![]);
    let subs = enumerate_sub_queries(&single);
    assert_eq!(subs, vec![single]);
    assert_eq!(subs[0].kind(), SubQueryKind::Single);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counters_agree_with_brute_force(seed in any::<u64>(), cyclic in any::<bool>()) {
        let schema = Arc::new(three_relations(cyclic));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&schema, 25, &mut rng);
        let data: Vec<Vec<Vec<f64>>> = (0..3).map(|r| store.rows(r).map(|(_, v)| v.to_vec()).collect()).collect();
        for _ in 0..5 {
            let q = generate_query(&schema, &data, &mut rng).unwrap();
            let truth = brute_force(&store, &q);
            prop_assert_eq!(count_nested_loop(&store, &q), truth);
            prop_assert_eq!(count_hash_join(&store, &q), truth);
            prop_assert_eq!(true_cardinality(&store, &q), truth);
        }
    }

    #[test]
    fn hash_join_matches_nested_loop_up_to_1000_rows(seed in any::<u64>(), cyclic in any::<bool>()) {
        let schema = Arc::new(three_relations(cyclic));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&schema, 333, &mut rng);
        prop_assert!(store.total_rows() <= 1000);
        let data: Vec<Vec<Vec<f64>>> = (0..3).map(|r| store.rows(r).map(|(_, v)| v.to_vec()).collect()).collect();
        let q = generate_query(&schema, &data, &mut rng).unwrap();
        prop_assert_eq!(count_hash_join(&store, &q), count_nested_loop(&store, &q));
    }

    #[test]
    fn sub_queries_are_connected_and_induced(seed in any::<u64>(), cyclic in any::<bool>()) {
        let schema = Arc::new(three_relations(cyclic));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&schema, 5, &mut rng);
        let data: Vec<Vec<Vec<f64>>> = (0..3).map(|r| store.rows(r).map(|(_, v)| v.to_vec()).collect()).collect();
        let q = generate_query(&schema, &data, &mut rng).unwrap();
        let subs = enumerate_sub_queries(&q);
        // Brute force: every connected induced subset, and nothing else.
        let n = q.relations.len();
        let mut expected = 0;
        for mask in 1u32..(1 << n) {
            let rels: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| q.relations[i]).collect();
            if q.induced(&rels).is_connected() {
                expected += 1;
            }
        }
        prop_assert_eq!(subs.len(), expected);
        for s in &subs {
            prop_assert!(s.is_connected());
            prop_assert_eq!(s, &q.induced(&s.relations));
        }
    }

    #[test]
    fn deltas_replay_onto_a_fresh_store(seed in any::<u64>()) {
        let schema = Arc::new(three_relations(true));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = random_store(&schema, 10, &mut rng);
        let mut copy = store.clone();
        for _ in 0..100 {
            let stmt = random_statement(&store, &mut rng);
            let delta = store.apply(&stmt).unwrap();
            copy.apply_delta(&delta).unwrap();
        }
        prop_assert_eq!(&copy, &store);
    }

    #[test]
    fn sql_text_round_trips(seed in any::<u64>()) {
        let schema = Arc::new(three_relations(true));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = random_store(&schema, 20, &mut rng);
        let data: Vec<Vec<Vec<f64>>> = (0..3).map(|r| store.rows(r).map(|(_, v)| v.to_vec()).collect()).collect();
        let q = generate_query(&schema, &data, &mut rng).unwrap();
        let back = parse_sql(&schema, &q.to_sql(&schema)).unwrap();
        prop_assert_eq!(true_cardinality(&store, &back), true_cardinality(&store, &q));
    }
}
