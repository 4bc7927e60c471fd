//! A seeded synthetic QA world for desk-scale verification.
//!
//! Contexts are short runs of relational facts ("Norton founded Acme in 1935 .")
//! and every (relation, answer slot) pair has at least three surface question
//! styles. [`SyntheticOracle`] answers any question written in one of those
//! styles by pattern matching, which makes consistency rewards exact.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Question;
use crate::dataset::SampleRecord;
use crate::reward::QaBackend;

pub const DEFAULT_EPSILON: f64 = 0.05;

const PERSONS: &[&str] = &[
    "Norton",
    "Alvarez",
    "Becker",
    "Okafor",
    "Lindqvist",
    "Moreau",
    "Tanaka",
    "Haddad",
    "Kowalski",
    "Ferreira",
    "Nakamura",
    "Duarte",
    "Petrov",
    "Mensah",
    "Larsen",
    "Quinlan",
    "Rossi",
    "Santos",
    "Varga",
    "Whitfield",
    "Yilmaz",
    "Zhou",
    "Abbott",
    "Brennan",
    "Castillo",
    "Dubois",
    "Eriksen",
    "Fontaine",
    "Gallagher",
    "Hoffmann",
    "Ibarra",
    "Jansen",
    "Kaur",
    "Lefebvre",
    "Mbeki",
    "Novak",
    "Oyelaran",
    "Park",
    "Reyes",
    "Sato",
];

const ORGS: &[&str] = &[
    "Acme",
    "Vortex",
    "Helix",
    "Borealis",
    "Quantix",
    "Zephyr",
    "Orbital",
    "Cobalt",
    "Nimbus",
    "Solace",
    "Tessellate",
    "Umbra",
    "Veridian",
    "Wavelength",
    "Xenon",
    "Yonder",
    "Zenith",
    "Aperture",
    "Bramble",
    "Cinder",
    "Drift",
    "Ember",
    "Fathom",
    "Granite",
    "Harbor",
    "Ironclad",
    "Juniper",
    "Kestrel",
    "Lumen",
    "Monolith",
    "Nexus",
    "Obsidian",
    "Pinnacle",
    "Quarry",
    "Radiant",
    "Summit",
    "Tundra",
    "Upland",
    "Vanguard",
    "Willow",
];

const CITIES: &[&str] = &[
    "Paris", "Lagos", "Osaka", "Lima", "Oslo", "Denver", "Cairo", "Perth", "Quito", "Dublin",
    "Hanoi", "Porto", "Accra", "Bergen", "Cusco", "Dakar", "Geneva", "Havana", "Izmir", "Jaipur",
    "Kyoto", "Leeds", "Malmo", "Nantes", "Odessa", "Pune", "Riga", "Seville", "Tunis", "Utrecht",
];

const FIRST_YEAR: u32 = 1900;
const LAST_YEAR: u32 = 2020;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Person,
    Org,
    City,
    Year,
}

struct Relation {
    name: &'static str,
    sentence: &'static str,
    slots: &'static [(&'static str, Kind)],
}

const RELATIONS: &[Relation] = &[
    Relation {
        name: "founded",
        sentence: "{P} founded {O} in {Y} .",
        slots: &[("P", Kind::Person), ("O", Kind::Org), ("Y", Kind::Year)],
    },
    Relation {
        name: "headquartered",
        sentence: "{O} is headquartered in {C} .",
        slots: &[("O", Kind::Org), ("C", Kind::City)],
    },
    Relation {
        name: "born",
        sentence: "{P} was born in {C} .",
        slots: &[("P", Kind::Person), ("C", Kind::City)],
    },
    Relation {
        name: "acquired",
        sentence: "{A} acquired {B} in {Y} .",
        slots: &[("A", Kind::Org), ("B", Kind::Org), ("Y", Kind::Year)],
    },
];

/// (relation, answer slot, question pattern)
const STYLES: &[(&str, &str, &str)] = &[
    ("founded", "Y", "when was {O} founded by {P} ?"),
    ("founded", "Y", "in what year did {P} found {O} ?"),
    ("founded", "Y", "{P} founded {O} in which year ?"),
    ("founded", "Y", "what year was {O} founded ?"),
    ("founded", "P", "who founded {O} ?"),
    ("founded", "P", "who was the founder of {O} ?"),
    ("founded", "P", "which person founded {O} in {Y} ?"),
    ("founded", "P", "{O} was founded by whom ?"),
    ("founded", "O", "what did {P} found in {Y} ?"),
    ("founded", "O", "which company was founded by {P} ?"),
    (
        "founded",
        "O",
        "what is the name of the company {P} founded ?",
    ),
    ("headquartered", "C", "where is {O} headquartered ?"),
    ("headquartered", "C", "in which city is {O} headquartered ?"),
    ("headquartered", "C", "what city is {O} based in ?"),
    ("headquartered", "C", "{O} is headquartered in which city ?"),
    (
        "headquartered",
        "O",
        "which company is headquartered in {C} ?",
    ),
    (
        "headquartered",
        "O",
        "what company has its headquarters in {C} ?",
    ),
    ("headquartered", "O", "what firm is based in {C} ?"),
    ("born", "C", "where was {P} born ?"),
    ("born", "C", "in which city was {P} born ?"),
    ("born", "C", "what is the birthplace of {P} ?"),
    ("born", "P", "who was born in {C} ?"),
    ("born", "P", "which person was born in {C} ?"),
    ("born", "P", "who is a native of {C} ?"),
    ("acquired", "Y", "when did {A} acquire {B} ?"),
    ("acquired", "Y", "in what year was {B} acquired by {A} ?"),
    ("acquired", "Y", "{A} acquired {B} in which year ?"),
    ("acquired", "A", "who acquired {B} ?"),
    ("acquired", "A", "which company acquired {B} in {Y} ?"),
    ("acquired", "A", "{B} was acquired by which company ?"),
    ("acquired", "B", "what did {A} acquire ?"),
    ("acquired", "B", "which company was acquired by {A} ?"),
    ("acquired", "B", "what company did {A} buy in {Y} ?"),
];

fn slot_name(tok: &str) -> Option<&str> {
    tok.strip_prefix('{').and_then(|t| t.strip_suffix('}'))
}

fn relation(name: &str) -> &'static Relation {
    RELATIONS
        .iter()
        .find(|r| r.name == name)
        .expect("known relation")
}

/// Number of distinct answer strings the world can produce.
pub fn answer_vocab_size() -> usize {
    PERSONS.len() + ORGS.len() + CITIES.len() + (LAST_YEAR - FIRST_YEAR + 1) as usize
}

/// Surface question styles for one relation and answer slot, as patterns.
pub fn styles_for(relation: &str, answer_slot: &str) -> Vec<&'static str> {
    STYLES
        .iter()
        .filter(|(r, s, _)| *r == relation && *s == answer_slot)
        .map(|(_, _, p)| *p)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Fact {
    relation: &'static str,
    values: HashMap<&'static str, String>,
}

impl Fact {
    fn sentence(&self) -> Vec<String> {
        relation(self.relation)
            .sentence
            .split_whitespace()
            .map(|t| match slot_name(t) {
                Some(s) => self.values[s].clone(),
                None => t.to_string(),
            })
            .collect()
    }

    fn entities(&self) -> impl Iterator<Item = &String> {
        self.values.values()
    }
}

fn draw(rng: &mut ChaCha8Rng, kind: Kind) -> String {
    match kind {
        Kind::Person => PERSONS.choose(rng).unwrap().to_string(),
        Kind::Org => ORGS.choose(rng).unwrap().to_string(),
        Kind::City => CITIES.choose(rng).unwrap().to_string(),
        Kind::Year => rng.gen_range(FIRST_YEAR..=LAST_YEAR).to_string(),
    }
}

fn draw_fact(rng: &mut ChaCha8Rng, avoid: &[String]) -> Fact {
    let rel = RELATIONS.choose(rng).unwrap();
    let mut values: HashMap<&'static str, String> = HashMap::new();
    for &(slot, kind) in rel.slots {
        loop {
            let v = draw(rng, kind);
            if !avoid.contains(&v) && !values.values().any(|x| *x == v) {
                values.insert(slot, v);
                break;
            }
        }
    }
    Fact {
        relation: rel.name,
        values,
    }
}

/// Generates `n_samples` dataset records; identical for identical seeds.
pub fn generate_world(seed: u64, n_samples: usize) -> Vec<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|i| {
            let target = draw_fact(&mut rng, &[]);
            let avoid: Vec<String> = target.entities().cloned().collect();
            let n_sentences = rng.gen_range(2..=6);
            let mut facts: Vec<Fact> = (1..n_sentences)
                .map(|_| draw_fact(&mut rng, &avoid))
                .collect();
            let target_pos = rng.gen_range(0..=facts.len());
            facts.insert(target_pos, target.clone());

            let rel = relation(target.relation);
            let (answer_slot, _) = *rel.slots.choose(&mut rng).unwrap();
            let pattern = *styles_for(rel.name, answer_slot).choose(&mut rng).unwrap();
            let question: Vec<String> = pattern
                .split_whitespace()
                .map(|t| match slot_name(t) {
                    Some(s) => target.values[s].clone(),
                    None => t.to_string(),
                })
                .collect();

            let mut context = String::new();
            let mut answer_start = 0;
            for (k, fact) in facts.iter().enumerate() {
                let answer_index = rel
                    .sentence
                    .split_whitespace()
                    .position(|t| slot_name(t) == Some(answer_slot))
                    .unwrap();
                for (j, tok) in fact.sentence().into_iter().enumerate() {
                    if !context.is_empty() {
                        context.push(' ');
                    }
                    if k == target_pos && j == answer_index {
                        answer_start = context.chars().count();
                    }
                    context.push_str(&tok);
                }
            }
            SampleRecord {
                id: Some(format!("synth-{seed}-{i:06}")),
                context,
                answer: target.values[answer_slot].clone(),
                answer_start,
                question: question.join(" "),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleAnswer {
    Answer(Vec<String>),
    /// The question matched no style or no fact in the context.
    Unanswerable,
}

/// Rule-based QA over synthetic contexts.
///
/// The answer distribution puts `1 - epsilon` on the looked-up answer token
/// and spreads `epsilon` uniformly over the rest of the answer vocabulary;
/// an unanswerable question gets the uniform distribution.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    epsilon: f64,
    vocab: usize,
}

impl Default for SyntheticOracle {
    fn default() -> Self {
        Self::new(DEFAULT_EPSILON)
    }
}

impl SyntheticOracle {
    pub fn new(epsilon: f64) -> Self {
        assert!(epsilon > 0.0 && epsilon < 1.0);
        Self {
            epsilon,
            vocab: answer_vocab_size(),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn parse_facts(context: &[String]) -> Vec<Fact> {
        let mut facts = Vec::new();
        for sentence in context.split_inclusive(|t| t == ".") {
            for rel in RELATIONS {
                let pattern: Vec<&str> = rel.sentence.split_whitespace().collect();
                if let Some(values) = bind(&pattern, sentence) {
                    facts.push(Fact {
                        relation: rel.name,
                        values,
                    });
                    break;
                }
            }
        }
        facts
    }

    pub fn answer(&self, context: &[String], question: &Question) -> OracleAnswer {
        let facts = Self::parse_facts(context);
        for &(rel, answer_slot, pattern) in STYLES {
            let pattern: Vec<&str> = pattern.split_whitespace().collect();
            let Some(bound) = bind(&pattern, question.tokens()) else {
                continue;
            };
            let hit = facts.iter().find(|f| {
                f.relation == rel && bound.iter().all(|(slot, v)| f.values.get(slot) == Some(v))
            });
            if let Some(f) = hit {
                return OracleAnswer::Answer(vec![f.values[answer_slot].clone()]);
            }
        }
        OracleAnswer::Unanswerable
    }

    /// Probability the oracle assigns to `token` at answer position `i`.
    pub fn token_prob(&self, answer: &OracleAnswer, i: usize, token: &str) -> f64 {
        match answer {
            OracleAnswer::Unanswerable => 1.0 / self.vocab as f64,
            OracleAnswer::Answer(a) if a.get(i).map(String::as_str) == Some(token) => {
                1.0 - self.epsilon
            }
            OracleAnswer::Answer(_) => self.epsilon / (self.vocab - 1) as f64,
        }
    }
}

fn bind<S: AsRef<str>>(pattern: &[&str], tokens: &[S]) -> Option<HashMap<&'static str, String>> {
    if pattern.len() != tokens.len() {
        return None;
    }
    let mut out = HashMap::new();
    for (p, t) in pattern.iter().zip(tokens) {
        let t = t.as_ref();
        match slot_name(p) {
            Some(slot) => {
                // pattern strings are 'static; re-borrow the slot name from the tables
                let key = static_slot(slot)?;
                out.insert(key, t.to_string());
            }
            None if *p == t => {}
            None => return None,
        }
    }
    Some(out)
}

fn static_slot(name: &str) -> Option<&'static str> {
    RELATIONS
        .iter()
        .flat_map(|r| r.slots.iter())
        .map(|(s, _)| *s)
        .find(|s| *s == name)
}

impl QaBackend for SyntheticOracle {
    fn answer_log_probs(
        &self,
        context: &[String],
        question: &Question,
        answer: &[String],
    ) -> Vec<f64> {
        let predicted = self.answer(context, question);
        answer
            .iter()
            .enumerate()
            .map(|(i, tok)| self.token_prob(&predicted, i, tok).ln())
            .collect()
    }

    fn predict(&self, context: &[String], question: &Question) -> String {
        match self.answer(context, question) {
            OracleAnswer::Answer(a) => a.join(" "),
            OracleAnswer::Unanswerable => String::new(),
        }
    }
}
