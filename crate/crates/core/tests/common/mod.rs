#![allow(dead_code)]

use std::sync::Arc;

use alece_core::relstore::{
    AttrKind, AttrRef, AttributeDef, DmlStatement, JoinPattern, RelationDef, RowStore, Schema,
};
use rand::Rng;

pub fn join(a: (usize, usize), b: (usize, usize)) -> JoinPattern {
    JoinPattern::new(AttrRef::new(a.0, a.1), AttrRef::new(b.0, b.1))
}

fn int(name: &str, hi: f64) -> AttributeDef {
    AttributeDef::new(name, AttrKind::Integer, 0.0, hi)
}

/// r(k, x) - s(k, m, y) - t(m, k, c); `cyclic` adds t.k = r.k.
pub fn three_relations(cyclic: bool) -> Schema {
    let rels = vec![
        RelationDef {
            name: "r".into(),
            attributes: vec![int("k", 8.0), int("x", 20.0)],
        },
        RelationDef {
            name: "s".into(),
            attributes: vec![
                int("k", 8.0),
                int("m", 8.0),
                AttributeDef::new("y", AttrKind::Real, 0.0, 1.0),
            ],
        },
        RelationDef {
            name: "t".into(),
            attributes: vec![
                int("m", 8.0),
                int("k", 8.0),
                AttributeDef {
                    categories: vec!["a".into(), "b".into(), "c".into()],
                    ..AttributeDef::new("c", AttrKind::Categorical, 1.0, 3.0)
                },
            ],
        },
    ];
    let mut joins = vec![join((0, 0), (1, 0)), join((1, 1), (2, 0))];
    if cyclic {
        joins.push(join((2, 1), (0, 0)));
    }
    Schema::new(rels, joins).unwrap()
}

pub fn random_value<R: Rng>(def: &AttributeDef, rng: &mut R) -> f64 {
    if def.kind.is_integral() {
        rng.gen_range(def.low as i64..=def.high as i64) as f64
    } else {
        rng.gen_range(def.low..=def.high)
    }
}

pub fn random_row<R: Rng>(schema: &Schema, rel: usize, rng: &mut R) -> Vec<f64> {
    schema
        .relation(rel)
        .attributes
        .iter()
        .map(|d| random_value(d, rng))
        .collect()
}

pub fn random_data<R: Rng>(schema: &Schema, max_rows: usize, rng: &mut R) -> Vec<Vec<Vec<f64>>> {
    (0..schema.num_relations())
        .map(|r| (0..rng.gen_range(1..=max_rows)).map(|_| random_row(schema, r, rng)).collect())
        .collect()
}

pub fn random_store<R: Rng>(schema: &Arc<Schema>, max_rows: usize, rng: &mut R) -> RowStore {
    let data = random_data(schema, max_rows, rng);
    RowStore::with_rows(Arc::clone(schema), &data).unwrap()
}

/// A statement that applies cleanly to `store`.
pub fn random_statement<R: Rng>(store: &RowStore, rng: &mut R) -> DmlStatement {
    let schema = Arc::clone(store.schema());
    let rel = rng.gen_range(0..schema.num_relations());
    let ids: Vec<_> = store.row_ids(rel).collect();
    match rng.gen_range(0..3) {
        1 if !ids.is_empty() => DmlStatement::Delete {
            rel,
            row: ids[rng.gen_range(0..ids.len())],
        },
        2 if !ids.is_empty() => {
            let attr = rng.gen_range(0..schema.relation(rel).attributes.len());
            DmlStatement::Update {
                rel,
                row: ids[rng.gen_range(0..ids.len())],
                attr,
                value: random_value(&schema.relation(rel).attributes[attr], rng),
            }
        }
        _ => DmlStatement::Insert {
            rel,
            values: random_row(&schema, rel, rng),
        },
    }
}
