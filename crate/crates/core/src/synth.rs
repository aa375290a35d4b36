//! A small correlated three-relation database (users / posts / comments) for
//! experiments that need no external data.
//!
//! Correlations are deliberate: reputation drives how many posts a user
//! owns and how well they score, post score drives comment volume and
//! comment score, and every child row is no older than its parent. Column
//! independence is therefore a poor assumption on this data.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::relstore::{AttrKind, AttrRef, AttributeDef, JoinPattern, RelationDef, Schema};

pub const YEAR_LOW: f64 = 2008.0;
pub const YEAR_HIGH: f64 = 2020.0;
pub const REPUTATION_HIGH: f64 = 1000.0;
pub const POST_SCORE_LOW: f64 = -10.0;
pub const POST_SCORE_HIGH: f64 = 200.0;
pub const COMMENT_SCORE_HIGH: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub users: usize,
    pub posts: usize,
    pub comments: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            posts: 8000,
            comments: 10000,
            seed: 0,
        }
    }
}

pub fn schema(cfg: &SynthConfig) -> Schema {
    let int = |n: &str, lo: f64, hi: f64| AttributeDef::new(n, AttrKind::Integer, lo, hi);
    let users = RelationDef {
        name: "users".into(),
        attributes: vec![
            int("id", 1.0, cfg.users.max(1) as f64),
            int("reputation", 1.0, REPUTATION_HIGH),
            int("year", YEAR_LOW, YEAR_HIGH),
        ],
    };
    let posts = RelationDef {
        name: "posts".into(),
        attributes: vec![
            int("id", 1.0, cfg.posts.max(1) as f64),
            int("owner_id", 1.0, cfg.users.max(1) as f64),
            int("score", POST_SCORE_LOW, POST_SCORE_HIGH),
            int("year", YEAR_LOW, YEAR_HIGH),
        ],
    };
    let comments = RelationDef {
        name: "comments".into(),
        attributes: vec![
            int("id", 1.0, cfg.comments.max(1) as f64),
            int("post_id", 1.0, cfg.posts.max(1) as f64),
            int("score", 0.0, COMMENT_SCORE_HIGH),
            int("year", YEAR_LOW, YEAR_HIGH),
        ],
    };
    let joins = vec![
        JoinPattern::new(AttrRef::new(0, 0), AttrRef::new(1, 1)),
        JoinPattern::new(AttrRef::new(1, 0), AttrRef::new(2, 1)),
    ];
    Schema::new(vec![users, posts, comments], joins).expect("synthetic schema is valid")
}

fn year_at_or_after<R: Rng>(rng: &mut R, from: f64) -> f64 {
    // Skewed towards the parent's year.
    let span = YEAR_HIGH - from;
    (from + (span * rng.gen::<f64>().powi(2)).round()).min(YEAR_HIGH)
}

/// Rows of `users`, `posts` and `comments`, in that order.
pub fn generate(cfg: &SynthConfig) -> (Schema, Vec<Vec<Vec<f64>>>) {
    let schema = schema(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut users = Vec::with_capacity(cfg.users);
    for id in 1..=cfg.users {
        let u: f64 = rng.gen();
        let rep = (1.0 + ((REPUTATION_HIGH - 1.0) * u.powi(3)).round()).min(REPUTATION_HIGH);
        // High reputation comes with seniority.
        let senior = (rep / REPUTATION_HIGH).sqrt();
        let span = YEAR_HIGH - YEAR_LOW;
        let jitter = rng.gen_range(-2.0..=2.0_f64);
        let year = (YEAR_HIGH - (span * senior + jitter).round()).clamp(YEAR_LOW, YEAR_HIGH);
        users.push(vec![id as f64, rep, year]);
    }

    let mut posts = Vec::with_capacity(cfg.posts);
    if !users.is_empty() {
        let owner_weights: Vec<f64> = users.iter().map(|u| 1.0 + u[1]).collect();
        let owners = WeightedIndex::new(&owner_weights).expect("positive weights");
        for id in 1..=cfg.posts {
            let owner = &users[owners.sample(&mut rng)];
            let base = owner[1] / REPUTATION_HIGH * 120.0;
            let noise = rng.gen_range(0.3..=1.5_f64);
            let score = (base * noise + rng.gen_range(-10.0..=15.0_f64))
                .round()
                .clamp(POST_SCORE_LOW, POST_SCORE_HIGH);
            let year = year_at_or_after(&mut rng, owner[2]);
            posts.push(vec![id as f64, owner[0], score, year]);
        }
    }

    let mut comments = Vec::with_capacity(cfg.comments);
    if !posts.is_empty() {
        let post_weights: Vec<f64> = posts
            .iter()
            .map(|p| (p[2] - POST_SCORE_LOW + 1.0).powf(1.5))
            .collect();
        let pick = WeightedIndex::new(&post_weights).expect("positive weights");
        for id in 1..=cfg.comments {
            let post = &posts[pick.sample(&mut rng)];
            let rel = (post[2] - POST_SCORE_LOW) / (POST_SCORE_HIGH - POST_SCORE_LOW);
            let score = (COMMENT_SCORE_HIGH * rel * rng.gen_range(0.5..=1.5_f64) + rng.gen_range(0.0..=4.0_f64))
                .round()
                .clamp(0.0, COMMENT_SCORE_HIGH);
            let year = year_at_or_after(&mut rng, post[3]);
            comments.push(vec![id as f64, post[0], score, year]);
        }
    }

    (schema, vec![users, posts, comments])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_fit_the_schema() {
        let cfg = SynthConfig {
            users: 50,
            posts: 200,
            comments: 300,
            seed: 1,
        };
        let (s, data) = generate(&cfg);
        for (r, rows) in data.iter().enumerate() {
            for row in rows {
                for (a, v) in row.iter().enumerate() {
                    assert!(s.relation(r).attributes[a].contains(*v), "{r}.{a} = {v}");
                }
            }
        }
        assert_eq!(data.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 200, 300]);
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig {
            users: 20,
            posts: 40,
            comments: 60,
            seed: 3,
        };
        assert_eq!(generate(&cfg).1, generate(&cfg).1);
    }
}
