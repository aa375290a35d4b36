//! Exact counting of filtered joins.
//!
//! Two independent evaluators: a nested-loop reference and a factorized
//! hash-join counter. They share nothing beyond filter pushdown.

use std::collections::HashMap;

use super::query::SubQuery;
use super::schema::AttrRef;
use super::store::RowStore;

/// Rows of `rel` passing every filter of `q` on that relation.
fn filtered<'a>(store: &'a RowStore, q: &SubQuery, rel: usize) -> Vec<&'a [f64]> {
    let preds: Vec<_> = q.filters.iter().filter(|f| f.attr.rel == rel).collect();
    store
        .rows(rel)
        .map(|(_, v)| v)
        .filter(|row| preds.iter().all(|p| p.matches(row)))
        .collect()
}

/// Exact `COUNT(*)` by nested loops over the filtered relations.
///
/// Join predicates are checked as soon as both sides are bound, so partial
/// assignments that already violate a predicate are pruned.
pub fn count_nested_loop(store: &RowStore, q: &SubQuery) -> u64 {
    let rels = &q.relations;
    let inputs: Vec<Vec<&[f64]>> = rels.iter().map(|&r| filtered(store, q, r)).collect();
    let depth_of = |r: usize| rels.iter().position(|&x| x == r).expect("join outside query");
    // checks[d]: predicates whose later side is bound at depth d, as
    // (earlier depth, earlier attr, attr at depth d).
    let mut checks: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); rels.len()];
    for j in &q.joins {
        let (dl, dr) = (depth_of(j.left.rel), depth_of(j.right.rel));
        if dl < dr {
            checks[dr].push((dl, j.left.attr, j.right.attr));
        } else {
            checks[dl].push((dr, j.right.attr, j.left.attr));
        }
    }
    fn go(d: usize, inputs: &[Vec<&[f64]>], checks: &[Vec<(usize, usize, usize)>], bound: &mut Vec<usize>) -> u64 {
        if d == inputs.len() {
            return 1;
        }
        let mut total = 0;
        for (i, row) in inputs[d].iter().enumerate() {
            let ok = checks[d]
                .iter()
                .all(|&(e, ea, a)| inputs[e][bound[e]][ea] == row[a]);
            if ok {
                bound.push(i);
                total += go(d + 1, inputs, checks, bound);
                bound.pop();
            }
        }
        total
    }
    go(0, &inputs, &checks, &mut Vec::with_capacity(rels.len()))
}

/// Canonical hash key for a value; `-0.0` and `0.0` compare equal.
fn key(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// Exact `COUNT(*)` by joining relations one at a time into a grouped
/// partial result that keeps only the attributes later predicates still
/// need, with multiplicities.
pub fn count_hash_join(store: &RowStore, q: &SubQuery) -> u64 {
    let rels = &q.relations;
    if rels.is_empty() {
        return 0;
    }
    // Order relations so each one joins something already processed.
    let mut order = vec![rels[0]];
    while order.len() < rels.len() {
        let next = rels
            .iter()
            .copied()
            .find(|r| {
                !order.contains(r)
                    && q.joins.iter().any(|j| {
                        (j.left.rel == *r && order.contains(&j.right.rel))
                            || (j.right.rel == *r && order.contains(&j.left.rel))
                    })
            })
            // Disconnected input: fall back to a cross product.
            .unwrap_or_else(|| *rels.iter().find(|r| !order.contains(r)).unwrap());
        order.push(next);
    }

    let needed_after = |step: usize| -> Vec<AttrRef> {
        let done = &order[..=step];
        let mut out: Vec<AttrRef> = Vec::new();
        for j in &q.joins {
            for (mine, other) in [(j.left, j.right), (j.right, j.left)] {
                if done.contains(&mine.rel) && !done.contains(&other.rel) && !out.contains(&mine) {
                    out.push(mine);
                }
            }
        }
        out.sort();
        out
    };

    let first = order[0];
    let mut live = needed_after(0);
    let mut groups: HashMap<Vec<u64>, u64> = HashMap::new();
    for row in filtered(store, q, first) {
        let k: Vec<u64> = live.iter().map(|a| key(row[a.attr])).collect();
        *groups.entry(k).or_insert(0) += 1;
    }

    for step in 1..order.len() {
        let rel = order[step];
        // (position in `live`, attribute of `rel`) pairs to match.
        let probes: Vec<(usize, usize)> = q
            .joins
            .iter()
            .filter_map(|j| {
                let (mine, other) = if j.left.rel == rel {
                    (j.left, j.right)
                } else if j.right.rel == rel {
                    (j.right, j.left)
                } else {
                    return None;
                };
                live.iter().position(|a| *a == other).map(|p| (p, mine.attr))
            })
            .collect();
        let next_live = needed_after(step);
        let carried: Vec<(bool, usize)> = next_live
            .iter()
            .map(|a| {
                if a.rel == rel {
                    (true, a.attr)
                } else {
                    (false, live.iter().position(|x| x == a).expect("live attribute"))
                }
            })
            .collect();
        let own: Vec<usize> = carried.iter().filter(|c| c.0).map(|c| c.1).collect();

        // Build side: probe key -> (projection of own needed attrs -> count).
        let mut table: HashMap<Vec<u64>, HashMap<Vec<u64>, u64>> = HashMap::new();
        for row in filtered(store, q, rel) {
            let k: Vec<u64> = probes.iter().map(|&(_, a)| key(row[a])).collect();
            let proj: Vec<u64> = own.iter().map(|&a| key(row[a])).collect();
            *table.entry(k).or_default().entry(proj).or_insert(0) += 1;
        }

        let mut next: HashMap<Vec<u64>, u64> = HashMap::new();
        for (gk, cnt) in &groups {
            let probe: Vec<u64> = probes.iter().map(|&(p, _)| gk[p]).collect();
            let Some(matches) = table.get(&probe) else {
                continue;
            };
            for (proj, scnt) in matches {
                let mut own_iter = proj.iter();
                let nk: Vec<u64> = carried
                    .iter()
                    .map(|&(is_own, p)| if is_own { *own_iter.next().unwrap() } else { gk[p] })
                    .collect();
                *next.entry(nk).or_insert(0) += cnt * scnt;
            }
        }
        groups = next;
        live = next_live;
    }
    groups.values().sum()
}

/// True cardinality of `q` on the current store contents.
pub fn true_cardinality(store: &RowStore, q: &SubQuery) -> u64 {
    count_nested_loop(store, q)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::relstore::query::{CmpOp, FilterPredicate};
    use crate::relstore::schema::{AttrKind, AttributeDef, JoinPattern, RelationDef, Schema};

    fn one_attr(name: &str) -> RelationDef {
        RelationDef {
            name: name.into(),
            attributes: vec![AttributeDef::new("a", AttrKind::Integer, 0.0, 100.0)],
        }
    }

    fn store(data: &[&[f64]]) -> RowStore {
        let names = ["r", "s", "t"];
        let rels = (0..data.len()).map(|i| one_attr(names[i])).collect();
        let schema = Arc::new(Schema::new(rels, vec![]).unwrap());
        let rows: Vec<Vec<Vec<f64>>> = data
            .iter()
            .map(|d| d.iter().map(|v| vec![*v]).collect())
            .collect();
        RowStore::with_rows(schema, &rows).unwrap()
    }

    fn j(a: usize, b: usize) -> JoinPattern {
        JoinPattern::new(AttrRef::new(a, 0), AttrRef::new(b, 0))
    }

    #[test]
    fn counts_a_single_relation() {
        let vals: Vec<f64> = (0..42).map(|v| v as f64).collect();
        let s = store(&[&vals]);
        let q = SubQuery::single(0, vec![]);
        assert_eq!(true_cardinality(&s, &q), 42);
        assert_eq!(count_hash_join(&s, &q), 42);
        let f = SubQuery::single(0, vec![FilterPredicate::new(AttrRef::new(0, 0), CmpOp::Lt, 10.0)]);
        assert_eq!(true_cardinality(&s, &f), 10);
        assert_eq!(count_hash_join(&s, &f), 10);
    }

    #[test]
    fn hand_enumerable_join() {
        let s = store(&[&[1.0, 2.0], &[2.0, 2.0, 3.0]]);
        let q = SubQuery::new(vec![0, 1], vec![j(0, 1)], vec![]);
        assert_eq!(true_cardinality(&s, &q), 2);
        assert_eq!(count_hash_join(&s, &q), 2);
    }

    #[test]
    fn cyclic_join_counts_agree() {
        let s = store(&[&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]]);
        let q = SubQuery::new(vec![0, 1, 2], vec![j(0, 1), j(1, 2), j(0, 2)], vec![]);
        // a=1: 2*1*1, a=2: 1*2*1
        assert_eq!(true_cardinality(&s, &q), 4);
        assert_eq!(count_hash_join(&s, &q), 4);
    }
}
