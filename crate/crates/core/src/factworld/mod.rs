// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic knowledge universe: entities with categories, functional fact
//! triples, templated statements with marked salient spans, closed-book
//! questions and salient-span-masking instances.

mod catalog;
mod io;
mod mask;
mod render;
mod vocab;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, LabRng};

pub use catalog::{Relation, RELATIONS};
pub use io::{
    parse_corpus_line, read_corpus, read_qa, read_world, write_corpus, write_qa, write_world,
    CorpusRecord,
};
pub use mask::{mask_span, recognize_spans, salient_span_mask, MaskedExample, SENTINEL_TOKEN};
pub use render::{render_qa, render_statements, QaPair, Span, Statement, MAX_ANSWER_TOKENS};
pub use vocab::{build_vocab, Vocab, SPECIAL_TOKENS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Person,
    Place,
    Organization,
    Date,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Person,
        Category::Place,
        Category::Organization,
        Category::Date,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Person => "Person",
            Category::Place => "Place",
            Category::Organization => "Organization",
            Category::Date => "Date",
            Category::Other => "Other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    /// A single vocabulary token.
    pub surface: String,
    pub category: Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FactTriple {
    pub id: usize,
    /// Entity index.
    pub subject: usize,
    /// Index into [`RELATIONS`].
    pub relation: usize,
    pub object: usize,
}

/// Which slice of the fact set a fact belongs to. `Withheld` facts are never
/// rendered into any corpus; they only appear as questions the model cannot
/// know the answer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Base,
    New,
    Withheld,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Base => "base",
            Partition::New => "new",
            Partition::Withheld => "withheld",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Partition::Base),
            "new" => Some(Partition::New),
            "withheld" => Some(Partition::Withheld),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorldConfig {
    pub seed: u64,
    pub entities_per_category: usize,
    pub n_relations: usize,
    pub n_base_facts: usize,
    pub n_new_facts: usize,
    pub n_withheld_facts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            entities_per_category: 40,
            n_relations: 12,
            n_base_facts: 500,
            n_new_facts: 100,
            n_withheld_facts: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub entities: Vec<Entity>,
    /// Number of catalog relations in use (a prefix of [`RELATIONS`]).
    pub n_relations: usize,
    pub base_facts: Vec<FactTriple>,
    pub new_facts: Vec<FactTriple>,
    pub withheld_facts: Vec<FactTriple>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "br",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ae"];

fn syllables<R: Rng + ?Sized>(rng: &mut R, n: usize) -> String {
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn entity_name<R: Rng + ?Sized>(category: Category, rng: &mut R) -> String {
    match category {
        Category::Person => capitalize(&(syllables(rng, 2) + ["n", "r", "s", "l"][rng.random_range(0..4)])),
        Category::Place => capitalize(&(syllables(rng, 2) + ["ria", "burg", "holm", "mar"][rng.random_range(0..4)])),
        Category::Organization => capitalize(&(syllables(rng, 2) + ["corp", "tek", "works"][rng.random_range(0..3)])),
        Category::Date => rng.random_range(1500..2030).to_string(),
        Category::Other => capitalize(&(syllables(rng, 2) + ["ine", "ite", "ism"][rng.random_range(0..3)])),
    }
}

impl World {
    pub fn facts(&self, partition: Partition) -> &[FactTriple] {
        match partition {
            Partition::Base => &self.base_facts,
            Partition::New => &self.new_facts,
            Partition::Withheld => &self.withheld_facts,
        }
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &FactTriple> {
        self.base_facts
            .iter()
            .chain(&self.new_facts)
            .chain(&self.withheld_facts)
    }

    pub fn fact(&self, id: usize) -> Option<&FactTriple> {
        self.all_facts().find(|f| f.id == id)
    }

    pub fn relations(&self) -> &'static [Relation] {
        &RELATIONS[..self.n_relations]
    }

    pub fn entity_by_surface(&self, surface: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.surface == surface)
    }

    pub fn partition_of(&self, fact_id: usize) -> Option<Partition> {
        [Partition::Base, Partition::New, Partition::Withheld]
            .into_iter()
            .find(|&p| self.facts(p).iter().any(|f| f.id == fact_id))
    }
}

/// Deterministic in `config` (including its seed).
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    if config.entities_per_category < 2 {
        return Err(Error::config("entities_per_category must be at least 2"));
    }
    if config.n_relations == 0 || config.n_relations > RELATIONS.len() {
        return Err(Error::config(format!(
            "n_relations must be in 1..={}",
            RELATIONS.len()
        )));
    }
    if config.n_base_facts == 0 {
        return Err(Error::config("n_base_facts must be positive"));
    }
    let mut rng: LabRng = rng_for(config.seed, "world");
    let mut seen = HashSet::new();
    let mut entities = Vec::new();
    for category in Category::ALL {
        let mut made = 0;
        let mut attempts = 0;
        while made < config.entities_per_category {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::config(format!(
                    "cannot draw {} unique {} names",
                    config.entities_per_category,
                    category.name()
                )));
            }
            let name = entity_name(category, &mut rng);
            if seen.insert(name.clone()) {
                entities.push(Entity {
                    surface: name,
                    category,
                });
                made += 1;
            }
        }
    }
    let relations = &RELATIONS[..config.n_relations];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (r, rel) in relations.iter().enumerate() {
        for (e, ent) in entities.iter().enumerate() {
            if rel.subjects.contains(&ent.category) {
                pairs.push((e, r));
            }
        }
    }
    let wanted = config.n_base_facts + config.n_new_facts + config.n_withheld_facts;
    if wanted > pairs.len() {
        return Err(Error::config(format!(
            "{wanted} facts requested but only {} distinct (subject, relation) pairs exist",
            pairs.len()
        )));
    }
    pairs.shuffle(&mut rng);
    let mut facts = Vec::with_capacity(wanted);
    for (id, &(subject, relation)) in pairs[..wanted].iter().enumerate() {
        let object_cat = relations[relation].object;
        let candidates: Vec<usize> = entities
            .iter()
            .enumerate()
            .filter(|(i, e)| e.category == object_cat && *i != subject)
            .map(|(i, _)| i)
            .collect();
        let object = candidates[rng.random_range(0..candidates.len())];
        facts.push(FactTriple {
            id,
            subject,
            relation,
            object,
        });
    }
    let withheld_facts = facts.split_off(config.n_base_facts + config.n_new_facts);
    let new_facts = facts.split_off(config.n_base_facts);
    Ok(World {
        config: config.clone(),
        entities,
        n_relations: config.n_relations,
        base_facts: facts,
        new_facts,
        withheld_facts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
        let other = WorldConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_world(&cfg).unwrap(), generate_world(&other).unwrap());
    }

    #[test]
    fn default_world_has_600_unique_pairs() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.entities.len(), 200);
        let pairs: HashSet<(usize, usize)> = w
            .base_facts
            .iter()
            .chain(&w.new_facts)
            .map(|f| (f.subject, f.relation))
            .collect();
        assert_eq!(pairs.len(), 600);
        assert_eq!(w.base_facts.len(), 500);
        assert_eq!(w.new_facts.len(), 100);
    }

    #[test]
    fn partitions_share_no_subject_relation_pair() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let base: HashSet<_> = w.base_facts.iter().map(|f| (f.subject, f.relation)).collect();
        for f in w.new_facts.iter().chain(&w.withheld_facts) {
            assert!(!base.contains(&(f.subject, f.relation)));
        }
    }

    #[test]
    fn objects_respect_relation_signature() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        for f in w.all_facts() {
            let rel = &RELATIONS[f.relation];
            assert!(rel.subjects.contains(&w.entities[f.subject].category));
            assert_eq!(w.entities[f.object].category, rel.object);
            assert_ne!(f.subject, f.object);
        }
    }

    #[test]
    fn zero_new_facts_is_allowed() {
        let w = generate_world(&WorldConfig {
            n_new_facts: 0,
            ..WorldConfig::default()
        })
        .unwrap();
        assert!(w.new_facts.is_empty());
        assert!(render_statements(&w, Partition::New).is_empty());
    }

    #[test]
    fn infeasible_counts_are_config_errors() {
        let cfg = WorldConfig {
            n_base_facts: 10_000,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = WorldConfig {
            n_relations: 13,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }
}
