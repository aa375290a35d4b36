//! In-memory relational store, exact counting oracle and sub-query
//! enumeration.

mod oracle;
mod query;
mod schema;
mod store;

pub use oracle::{count_hash_join, count_nested_loop, true_cardinality};
pub use query::{
    enumerate_sub_queries, parse_sql, CmpOp, FilterPredicate, JoinPredicate, SubQuery,
    SubQueryKind,
};
pub use schema::{AttrKind, AttrRef, AttributeDef, JoinPattern, RelationDef, Schema};
pub use store::{load_csv_dir, write_csv_dir, Delta, DmlStatement, RowId, RowStore};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("relation #{rel} has no row {row}")]
    UnknownRow { rel: usize, row: RowId },
    #[error("value {value} outside the domain of {attr}")]
    DomainViolation { attr: String, value: f64 },
    #[error("relation {rel} expects {expected} values, got {got}")]
    Arity {
        rel: String,
        expected: usize,
        got: usize,
    },
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("sql: {0}")]
    Sql(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}
