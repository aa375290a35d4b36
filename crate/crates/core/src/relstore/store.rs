//! Mutable row store and single-row DML.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::schema::{AttrKind, Schema};
use super::StoreError;

pub type RowId = u64;

/// A single-row DML statement addressing rows by surrogate id.
#[derive(Clone, Debug, PartialEq)]
pub enum DmlStatement {
    Insert { rel: usize, values: Vec<f64> },
    Delete { rel: usize, row: RowId },
    Update { rel: usize, row: RowId, attr: usize, value: f64 },
}

/// Effect of one applied statement, with enough information to maintain
/// derived structures or to replay it onto another store.
#[derive(Clone, Debug, PartialEq)]
pub enum Delta {
    Inserted { rel: usize, row: RowId, values: Vec<f64> },
    Deleted { rel: usize, row: RowId, values: Vec<f64> },
    Updated { rel: usize, row: RowId, attr: usize, old: f64, new: f64 },
}

impl Delta {
    pub fn rel(&self) -> usize {
        match self {
            Delta::Inserted { rel, .. } | Delta::Deleted { rel, .. } | Delta::Updated { rel, .. } => {
                *rel
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowStore {
    schema: Arc<Schema>,
    relations: Vec<BTreeMap<RowId, Vec<f64>>>,
    next_row: Vec<RowId>,
}

impl RowStore {
    pub fn new(schema: Arc<Schema>) -> Self {
        let n = schema.num_relations();
        Self {
            schema,
            relations: vec![BTreeMap::new(); n],
            next_row: vec![0; n],
        }
    }

    /// Bulk-loads `data[rel]` into an empty store; row ids start at 0.
    pub fn with_rows(schema: Arc<Schema>, data: &[Vec<Vec<f64>>]) -> Result<Self, StoreError> {
        let mut store = Self::new(schema);
        for (rel, rows) in data.iter().enumerate() {
            for values in rows {
                store.apply(&DmlStatement::Insert {
                    rel,
                    values: values.clone(),
                })?;
            }
        }
        Ok(store)
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn len(&self, rel: usize) -> usize {
        self.relations[rel].len()
    }

    pub fn total_rows(&self) -> usize {
        self.relations.iter().map(|r| r.len()).sum()
    }

    pub fn rows(&self, rel: usize) -> impl Iterator<Item = (RowId, &[f64])> {
        self.relations[rel].iter().map(|(id, v)| (*id, v.as_slice()))
    }

    pub fn row_ids(&self, rel: usize) -> impl Iterator<Item = RowId> + '_ {
        self.relations[rel].keys().copied()
    }

    pub fn get(&self, rel: usize, row: RowId) -> Option<&[f64]> {
        self.relations.get(rel)?.get(&row).map(|v| v.as_slice())
    }

    /// Id the next insert into `rel` will receive.
    pub fn next_row_id(&self, rel: usize) -> RowId {
        self.next_row[rel]
    }

    fn check_rel(&self, rel: usize) -> Result<(), StoreError> {
        if rel < self.relations.len() {
            Ok(())
        } else {
            Err(StoreError::UnknownRelation(format!("#{rel}")))
        }
    }

    fn check_value(&self, rel: usize, attr: usize, v: f64) -> Result<(), StoreError> {
        let def = &self.schema.relation(rel).attributes[attr];
        if def.contains(v) {
            Ok(())
        } else {
            Err(StoreError::DomainViolation {
                attr: format!("{}.{}", self.schema.relation(rel).name, def.name),
                value: v,
            })
        }
    }

    pub fn apply(&mut self, stmt: &DmlStatement) -> Result<Delta, StoreError> {
        match stmt {
            DmlStatement::Insert { rel, values } => {
                self.check_rel(*rel)?;
                let arity = self.schema.relation(*rel).attributes.len();
                if values.len() != arity {
                    return Err(StoreError::Arity {
                        rel: self.schema.relation(*rel).name.clone(),
                        expected: arity,
                        got: values.len(),
                    });
                }
                for (a, v) in values.iter().enumerate() {
                    self.check_value(*rel, a, *v)?;
                }
                let row = self.next_row[*rel];
                self.next_row[*rel] += 1;
                self.relations[*rel].insert(row, values.clone());
                Ok(Delta::Inserted {
                    rel: *rel,
                    row,
                    values: values.clone(),
                })
            }
            DmlStatement::Delete { rel, row } => {
                self.check_rel(*rel)?;
                let values = self.relations[*rel]
                    .remove(row)
                    .ok_or(StoreError::UnknownRow { rel: *rel, row: *row })?;
                Ok(Delta::Deleted {
                    rel: *rel,
                    row: *row,
                    values,
                })
            }
            DmlStatement::Update {
                rel,
                row,
                attr,
                value,
            } => {
                self.check_rel(*rel)?;
                if *attr >= self.schema.relation(*rel).attributes.len() {
                    return Err(StoreError::UnknownAttribute(format!("#{rel}.#{attr}")));
                }
                self.check_value(*rel, *attr, *value)?;
                let tuple = self.relations[*rel]
                    .get_mut(row)
                    .ok_or(StoreError::UnknownRow { rel: *rel, row: *row })?;
                let old = std::mem::replace(&mut tuple[*attr], *value);
                Ok(Delta::Updated {
                    rel: *rel,
                    row: *row,
                    attr: *attr,
                    old,
                    new: *value,
                })
            }
        }
    }

    /// Re-applies a delta produced by another store with identical history.
    pub fn apply_delta(&mut self, delta: &Delta) -> Result<(), StoreError> {
        match delta {
            Delta::Inserted { rel, row, values } => {
                self.check_rel(*rel)?;
                self.relations[*rel].insert(*row, values.clone());
                self.next_row[*rel] = self.next_row[*rel].max(row + 1);
            }
            Delta::Deleted { rel, row, .. } => {
                self.check_rel(*rel)?;
                self.relations[*rel]
                    .remove(row)
                    .ok_or(StoreError::UnknownRow { rel: *rel, row: *row })?;
            }
            Delta::Updated {
                rel, row, attr, new, ..
            } => {
                self.check_rel(*rel)?;
                let tuple = self.relations[*rel]
                    .get_mut(row)
                    .ok_or(StoreError::UnknownRow { rel: *rel, row: *row })?;
                tuple[*attr] = *new;
            }
        }
        Ok(())
    }
}

/// Reads one CSV file per relation (`<dir>/<relation>.csv`, header row of
/// attribute names in any order). Categorical columns accept either a
/// declared label or its integer code.
pub fn load_csv_dir(schema: &Schema, dir: &Path) -> Result<Vec<Vec<Vec<f64>>>, StoreError> {
    schema
        .relations()
        .iter()
        .map(|def| {
            let path = dir.join(format!("{}.csv", def.name));
            let mut reader = csv::Reader::from_path(&path)
                .map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
            let header = reader
                .headers()
                .map_err(|e| StoreError::Csv(format!("{}: {e}", path.display())))?
                .clone();
            let mut column = Vec::with_capacity(def.attributes.len());
            for a in &def.attributes {
                let pos = header.iter().position(|h| h.trim() == a.name).ok_or_else(|| {
                    StoreError::Csv(format!("{}: missing column {}", path.display(), a.name))
                })?;
                column.push(pos);
            }
            let mut rows = Vec::new();
            for (line, rec) in reader.records().enumerate() {
                let rec = rec.map_err(|e| StoreError::Csv(format!("{}: {e}", path.display())))?;
                let mut values = Vec::with_capacity(column.len());
                for (a, &pos) in def.attributes.iter().zip(&column) {
                    let field = rec.get(pos).unwrap_or("").trim();
                    let v = match field.parse::<f64>() {
                        Ok(v) => v,
                        Err(_) if a.kind == AttrKind::Categorical => {
                            a.category_code(field).ok_or_else(|| {
                                StoreError::Csv(format!(
                                    "{}:{}: unknown category {field:?} for {}",
                                    path.display(),
                                    line + 2,
                                    a.name
                                ))
                            })?
                        }
                        Err(_) => {
                            return Err(StoreError::Csv(format!(
                                "{}:{}: cannot parse {field:?} for {}",
                                path.display(),
                                line + 2,
                                a.name
                            )))
                        }
                    };
                    if !a.contains(v) {
                        return Err(StoreError::DomainViolation {
                            attr: format!("{}.{}", def.name, a.name),
                            value: v,
                        });
                    }
                    values.push(v);
                }
                rows.push(values);
            }
            Ok(rows)
        })
        .collect()
}

/// Writes `data` as one CSV per relation, numeric codes only.
pub fn write_csv_dir(schema: &Schema, data: &[Vec<Vec<f64>>], dir: &Path) -> Result<(), StoreError> {
    std::fs::create_dir_all(dir).map_err(|e| StoreError::Io(format!("{}: {e}", dir.display())))?;
    for (def, rows) in schema.relations().iter().zip(data) {
        let path = dir.join(format!("{}.csv", def.name));
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| StoreError::Csv(format!("{}: {e}", path.display()));
        w.write_record(def.attributes.iter().map(|a| a.name.as_str()))
            .map_err(csv_err)?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| StoreError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relstore::schema::{AttributeDef, RelationDef};

    fn schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(
                vec![RelationDef {
                    name: "r".into(),
                    attributes: vec![
                        AttributeDef::new("a", AttrKind::Integer, 0.0, 9.0),
                        AttributeDef::new("b", AttrKind::Real, 0.0, 1.0),
                    ],
                }],
                vec![],
            )
            .unwrap(),
        )
    }

    #[test]
    fn insert_delete_update_counts() {
        let mut s = RowStore::new(schema());
        let d = s
            .apply(&DmlStatement::Insert {
                rel: 0,
                values: vec![3.0, 0.5],
            })
            .unwrap();
        assert_eq!(s.len(0), 1);
        let Delta::Inserted { row, .. } = d else { panic!() };
        s.apply(&DmlStatement::Delete { rel: 0, row }).unwrap();
        assert_eq!(s.len(0), 0);
        assert!(matches!(
            s.apply(&DmlStatement::Delete { rel: 0, row }),
            Err(StoreError::UnknownRow { .. })
        ));
    }

    #[test]
    fn update_preserves_cardinality_and_reports_old_value() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![(i % 10) as f64, 0.1]).collect();
        let mut s = RowStore::with_rows(schema(), &[rows]).unwrap();
        s.apply(&DmlStatement::Update {
            rel: 0,
            row: 7,
            attr: 0,
            value: 3.0,
        })
        .unwrap();
        let d = s
            .apply(&DmlStatement::Update {
                rel: 0,
                row: 7,
                attr: 0,
                value: 5.0,
            })
            .unwrap();
        assert_eq!(s.len(0), 100);
        assert!(matches!(d, Delta::Updated { old, new, .. } if old == 3.0 && new == 5.0));
    }

    #[test]
    fn rejects_out_of_domain_and_unknown_relation() {
        let mut s = RowStore::new(schema());
        let bad = DmlStatement::Insert {
            rel: 0,
            values: vec![10.0, 0.5],
        };
        assert!(matches!(s.apply(&bad), Err(StoreError::DomainViolation { .. })));
        let frac = DmlStatement::Insert {
            rel: 0,
            values: vec![2.5, 0.5],
        };
        assert!(matches!(s.apply(&frac), Err(StoreError::DomainViolation { .. })));
        let missing = DmlStatement::Delete { rel: 3, row: 0 };
        assert!(matches!(s.apply(&missing), Err(StoreError::UnknownRelation(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sch = schema();
        let data = vec![vec![vec![1.0, 0.25], vec![9.0, 1.0]]];
        write_csv_dir(&sch, &data, dir.path()).unwrap();
        assert_eq!(load_csv_dir(&sch, dir.path()).unwrap(), data);
    }
}
