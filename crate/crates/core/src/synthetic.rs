//! Seeded synthetic instruction pools and multiple-choice problem suites.
//!
//! Every problem is answered by one method word; its text names topic words
//! tied to that method. Pool entries pair a method with some of its topic
//! words, so entries relevant to a problem also carry its answer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Candidate;
use crate::context::{ContextPool, PoolEntry};
use crate::engine::Problem;
use crate::error::{Error, Result};

struct Method {
    name: &'static str,
    topics: [&'static str; 3],
}

struct Domain {
    name: &'static str,
    methods: [Method; 3],
}

const fn m(name: &'static str, topics: [&'static str; 3]) -> Method {
    Method { name, topics }
}

const DOMAINS: [Domain; 4] = [
    Domain {
        name: "mathematics",
        methods: [
            m("factorization", ["polynomial", "roots", "quadratic"]),
            m("induction", ["sequence", "recurrence", "integers"]),
            m("integration", ["area", "curve", "antiderivative"]),
        ],
    },
    Domain {
        name: "science",
        methods: [
            m("titration", ["acid", "base", "concentration"]),
            m("kinematics", ["velocity", "acceleration", "projectile"]),
            m("genetics", ["allele", "inheritance", "genotype"]),
        ],
    },
    Domain {
        name: "coding",
        methods: [
            m("memoization", ["recursion", "overlapping", "subproblems"]),
            m("hashing", ["lookup", "collisions", "buckets"]),
            m("bisection", ["sorted", "search", "midpoint"]),
        ],
    },
    Domain {
        name: "embodied",
        methods: [
            m("navigation", ["corridor", "waypoint", "map"]),
            m("grasping", ["gripper", "object", "pose"]),
            m("scheduling", ["tasks", "deadlines", "order"]),
        ],
    },
];

const PERSPECTIVES: [&str; 10] = [
    "careful",
    "skeptical",
    "systematic",
    "creative",
    "pragmatic",
    "rigorous",
    "curious",
    "methodical",
    "patient",
    "critical",
];

/// Number of answer options per problem.
pub const N_CANDIDATES: usize = 4;

fn all_methods() -> Vec<(usize, usize)> {
    (0..DOMAINS.len()).flat_map(|d| (0..3).map(move |k| (d, k))).collect()
}

fn two_topics(rng: &mut ChaCha8Rng, method: &Method) -> (&'static str, &'static str) {
    let mut t = method.topics;
    t.shuffle(rng);
    (t[0], t[1])
}

/// Pool of `size` entries; consecutive ids cycle through the four domains.
pub fn generate_pool(size: usize, seed: u64) -> Result<ContextPool> {
    if size < 2 {
        return Err(Error::invalid(format!("pool size must be >= 2, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut domain_order: Vec<usize> = (0..DOMAINS.len()).collect();
    domain_order.shuffle(&mut rng);
    let width = (size - 1).to_string().len().max(3);
    let entries = (0..size)
        .map(|i| {
            let domain = &DOMAINS[domain_order[i % DOMAINS.len()]];
            let method = &domain.methods[rng.random_range(0..3)];
            let perspective = PERSPECTIVES.choose(&mut rng).expect("non-empty");
            let (t1, t2) = two_topics(&mut rng, method);
            PoolEntry {
                id: format!("ctx-{i:0width$}"),
                domain: domain.name.to_string(),
                text: format!("{perspective} reviewer: apply {} to {t1} {t2}", method.name),
            }
        })
        .collect();
    ContextPool::new(entries)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaProblem {
    pub key: String,
    pub domain: String,
    pub text: String,
    pub answer: String,
    pub candidates: Vec<Candidate>,
}

impl QaProblem {
    pub fn problem(&self) -> Problem {
        Problem {
            key: self.key.clone(),
            text: self.text.clone(),
        }
    }
}

pub fn generate_problems(count: usize, seed: u64) -> Result<Vec<QaProblem>> {
    if count == 0 {
        return Err(Error::invalid("problem count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f9a);
    let methods = all_methods();
    let width = (count - 1).to_string().len().max(3);
    Ok((0..count)
        .map(|i| {
            let (d, k) = *methods.choose(&mut rng).expect("non-empty");
            let method = &DOMAINS[d].methods[k];
            let (t1, t2) = two_topics(&mut rng, method);
            let mut others: Vec<(usize, usize)> = methods.iter().copied().filter(|&x| x != (d, k)).collect();
            others.shuffle(&mut rng);
            let mut candidates: Vec<Candidate> = others[..N_CANDIDATES - 1]
                .iter()
                .map(|&(od, ok)| Candidate {
                    text: DOMAINS[od].methods[ok].name.to_string(),
                    correct: false,
                })
                .collect();
            candidates.push(Candidate {
                text: method.name.to_string(),
                correct: true,
            });
            candidates.shuffle(&mut rng);
            QaProblem {
                key: format!("q-{i:0width$}"),
                domain: DOMAINS[d].name.to_string(),
                text: format!("problem {i}: how to handle {t1} and {t2}?"),
                answer: method.name.to_string(),
                candidates,
            }
        })
        .collect())
}

pub fn answer_table(problems: &[QaProblem]) -> BTreeMap<String, Vec<Candidate>> {
    problems.iter().map(|p| (p.key.clone(), p.candidates.clone())).collect()
}

pub fn validate_problems(problems: &[QaProblem]) -> Result<()> {
    if problems.is_empty() {
        return Err(Error::invalid("problem file is empty"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in problems {
        if !seen.insert(p.key.as_str()) {
            return Err(Error::invalid(format!("duplicate problem key {:?}", p.key)));
        }
        if p.text.trim().is_empty() || p.candidates.is_empty() {
            return Err(Error::invalid(format!("problem {:?} needs text and candidates", p.key)));
        }
    }
    Ok(())
}

pub fn problems_to_json(problems: &[QaProblem]) -> String {
    let mut s = serde_json::to_string_pretty(problems).expect("problems serialize");
    s.push('\n');
    s
}

pub fn load_problems(path: &Path) -> Result<Vec<QaProblem>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let problems: Vec<QaProblem> = serde_json::from_str(&s).map_err(|e| Error::Malformed {
        what: format!("problem file {}", path.display()),
        reason: e.to_string(),
    })?;
    validate_problems(&problems)?;
    Ok(problems)
}

pub fn save_problems(problems: &[QaProblem], path: &Path) -> Result<()> {
    std::fs::write(path, problems_to_json(problems)).map_err(|e| Error::io(path, e))
}
