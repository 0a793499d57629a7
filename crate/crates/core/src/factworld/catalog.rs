// SPDX-License-Identifier: MIT OR Apache-2.0

use super::Category::{self, Date, Organization, Other, Person, Place};

/// A functional relation with its surface forms. Templates use `{s}` and `{o}`
/// as whole-token placeholders for the subject and object entities.
#[derive(Debug)]
pub struct Relation {
    pub name: &'static str,
    pub subjects: &'static [Category],
    pub object: Category,
    pub templates: &'static [&'static str],
    pub question: &'static str,
}

pub static RELATIONS: [Relation; 12] = [
    Relation {
        name: "born_in",
        subjects: &[Person],
        object: Place,
        templates: &["{s} was born in {o} .", "{o} is the birthplace of {s} ."],
        question: "Where was {s} born ?",
    },
    Relation {
        name: "birth_year",
        subjects: &[Person],
        object: Date,
        templates: &["{s} was born in the year {o} .", "the birth year of {s} is {o} ."],
        question: "In what year was {s} born ?",
    },
    Relation {
        name: "works_for",
        subjects: &[Person],
        object: Organization,
        templates: &["{s} works for {o} .", "{o} employs {s} ."],
        question: "Who does {s} work for ?",
    },
    Relation {
        name: "citizen_of",
        subjects: &[Person],
        object: Place,
        templates: &["{s} is a citizen of {o} .", "{s} holds citizenship in {o} ."],
        question: "What country is {s} a citizen of ?",
    },
    Relation {
        name: "founded_by",
        subjects: &[Organization],
        object: Person,
        templates: &["{s} was founded by {o} .", "{o} founded {s} ."],
        question: "Who founded {s} ?",
    },
    Relation {
        name: "headquartered_in",
        subjects: &[Organization],
        object: Place,
        templates: &["{s} is headquartered in {o} .", "the headquarters of {s} are in {o} ."],
        question: "Where is {s} headquartered ?",
    },
    Relation {
        name: "established_in",
        subjects: &[Organization, Other],
        object: Date,
        templates: &["{s} was established in {o} .", "{o} saw the creation of {s} ."],
        question: "When was {s} established ?",
    },
    Relation {
        name: "capital_of",
        subjects: &[Place],
        object: Place,
        templates: &["{s} is the capital of {o} .", "the capital of {o} is {s} ."],
        question: "What is {s} the capital of ?",
    },
    Relation {
        name: "language_of",
        subjects: &[Place],
        object: Other,
        templates: &["the language of {s} is {o} .", "people in {s} speak {o} ."],
        question: "What language is spoken in {s} ?",
    },
    Relation {
        name: "known_for",
        subjects: &[Person, Organization, Place],
        object: Other,
        templates: &["{s} is known for {o} .", "{o} made {s} famous ."],
        question: "What is {s} known for ?",
    },
    Relation {
        name: "named_after",
        subjects: &[Place, Other],
        object: Person,
        templates: &["{s} was named after {o} .", "{o} gave {s} its name ."],
        question: "Who was {s} named after ?",
    },
    Relation {
        name: "summit_in",
        subjects: &[Date],
        object: Place,
        templates: &["the {s} summit took place in {o} .", "{o} hosted the {s} summit ."],
        question: "Where did the {s} summit take place ?",
    },
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_relation_has_two_templates_with_both_slots() {
        for r in &RELATIONS {
            assert!(r.templates.len() >= 2, "{}", r.name);
            for t in r.templates {
                let words: Vec<&str> = t.split(' ').collect();
                assert_eq!(words.iter().filter(|w| **w == "{s}").count(), 1);
                assert_eq!(words.iter().filter(|w| **w == "{o}").count(), 1);
            }
            let q: Vec<&str> = r.question.split(' ').collect();
            assert!(q.contains(&"{s}") && !q.contains(&"{o}"));
        }
    }
}
