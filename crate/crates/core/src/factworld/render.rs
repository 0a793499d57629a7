// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Category, FactTriple, Partition, World, RELATIONS};

/// Answers longer than this are never produced or kept.
pub const MAX_ANSWER_TOKENS: usize = 5;

/// A marked entity occurrence: `len` tokens starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub category: Category,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Statement {
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
    pub fact_id: usize,
}

impl Statement {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub fact_id: usize,
}

fn instantiate(world: &World, fact: &FactTriple, template: &str) -> Statement {
    let subject = &world.entities[fact.subject];
    let object = &world.entities[fact.object];
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for word in template.split(' ') {
        let entity = match word {
            "{s}" => Some(subject),
            "{o}" => Some(object),
            _ => None,
        };
        match entity {
            Some(e) => {
                spans.push(Span {
                    start: tokens.len(),
                    len: 1,
                    category: e.category,
                });
                tokens.push(e.surface.clone());
            }
            None => tokens.push(word.to_string()),
        }
    }
    Statement {
        tokens,
        spans,
        fact_id: fact.id,
    }
}

/// Every fact of the partition through every template of its relation, in
/// fact order.
pub fn render_statements(world: &World, partition: Partition) -> Vec<Statement> {
    let mut out = Vec::new();
    for fact in world.facts(partition) {
        for t in RELATIONS[fact.relation].templates {
            out.push(instantiate(world, fact, t));
        }
    }
    out
}

pub fn render_qa(world: &World, partition: Partition) -> Vec<QaPair> {
    world
        .facts(partition)
        .iter()
        .map(|fact| {
            let subject = &world.entities[fact.subject].surface;
            let question = RELATIONS[fact.relation]
                .question
                .split(' ')
                .map(|w| if w == "{s}" { subject.clone() } else { w.to_string() })
                .collect();
            QaPair {
                question,
                answer: vec![world.entities[fact.object].surface.clone()],
                fact_id: fact.id,
            }
        })
        .filter(|qa: &QaPair| qa.answer.len() <= MAX_ANSWER_TOKENS)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{generate_world, Entity, WorldConfig};

    fn toy() -> World {
        let ent = |s: &str, c| Entity {
            surface: s.into(),
            category: c,
        };
        World {
            config: WorldConfig::default(),
            entities: vec![
                ent("Ada", Category::Person),
                ent("Bree", Category::Place),
                ent("Cove", Category::Place),
            ],
            n_relations: 12,
            base_facts: vec![
                FactTriple { id: 0, subject: 0, relation: 0, object: 1 },
                FactTriple { id: 1, subject: 2, relation: 7, object: 1 },
            ],
            new_facts: vec![],
            withheld_facts: vec![],
        }
    }

    #[test]
    fn born_in_statement() {
        let s = render_statements(&toy(), Partition::Base);
        assert_eq!(s[0].text(), "Ada was born in Bree .");
        assert_eq!(
            s[0].spans,
            vec![
                Span { start: 0, len: 1, category: Category::Person },
                Span { start: 4, len: 1, category: Category::Place },
            ]
        );
    }

    #[test]
    fn capital_of_question() {
        let qa = render_qa(&toy(), Partition::Base);
        assert_eq!(qa[1].question.join(" "), "What is Cove the capital of ?");
        assert_eq!(qa[1].answer, vec!["Bree".to_string()]);
        assert_eq!(qa[1].fact_id, 1);
    }

    #[test]
    fn counts_on_default_world() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let expected: usize = w.base_facts.iter().map(|f| RELATIONS[f.relation].templates.len()).sum();
        let st = render_statements(&w, Partition::Base);
        assert_eq!(st.len(), expected);
        assert_eq!(st.len(), 2 * w.base_facts.len());
        assert!(st.iter().all(|s| !s.spans.is_empty()));
        let qa = render_qa(&w, Partition::New);
        assert_eq!(qa.len(), w.new_facts.len());
        assert!(qa.iter().all(|q| q.answer.len() <= MAX_ANSWER_TOKENS));
    }
}
