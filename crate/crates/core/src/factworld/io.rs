// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-oriented text formats. Fields are tab-separated; tabs, newlines and
//! backslashes inside fields are backslash-escaped.

use std::io::{BufRead, Write};

use super::{Category, Entity, FactTriple, Partition, QaPair, Span, Statement, World, WorldConfig, RELATIONS};
use crate::error::{Error, Result};

/// One corpus line: a rendered statement with its marked spans.
pub type CorpusRecord = Statement;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => return Err(Error::data(format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}

fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<String>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != n {
        return Err(Error::data(format!(
            "line {lineno}: expected {n} fields, found {}",
            parts.len()
        )));
    }
    parts.into_iter().map(unescape).collect()
}

fn num<T: std::str::FromStr>(s: &str, what: &str, lineno: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::data(format!("line {lineno}: bad {what} {s:?}")))
}

fn tokens(s: &str) -> Vec<String> {
    s.split(' ').filter(|t| !t.is_empty()).map(String::from).collect()
}

fn format_spans(spans: &[Span]) -> String {
    spans
        .iter()
        .map(|s| format!("{}:{}:{}", s.start, s.len, s.category.name()))
        .collect::<Vec<_>>()
        .join(",")
}

/// `fact_id \t tokens \t start:len:Category,...`
pub fn parse_corpus_line(line: &str, lineno: usize) -> Result<CorpusRecord> {
    let f = fields(line, 3, lineno)?;
    let toks = tokens(&f[1]);
    let mut spans = Vec::new();
    for part in f[2].split(',').filter(|p| !p.is_empty()) {
        let bits: Vec<&str> = part.split(':').collect();
        if bits.len() != 3 {
            return Err(Error::data(format!("line {lineno}: bad span {part:?}")));
        }
        let span = Span {
            start: num(bits[0], "span start", lineno)?,
            len: num(bits[1], "span length", lineno)?,
            category: Category::parse(bits[2])
                .ok_or_else(|| Error::data(format!("line {lineno}: unknown category {:?}", bits[2])))?,
        };
        if span.len == 0 || span.end() > toks.len() {
            return Err(Error::data(format!("line {lineno}: span {part:?} out of range")));
        }
        spans.push(span);
    }
    Ok(Statement {
        fact_id: num(&f[0], "fact id", lineno)?,
        tokens: toks,
        spans,
    })
}

pub fn write_corpus<W: Write>(out: &mut W, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}",
            r.fact_id,
            escape(&r.tokens.join(" ")),
            format_spans(&r.spans)
        )?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if !line.is_empty() {
            out.push(parse_corpus_line(&line, i + 1)?);
        }
    }
    Ok(out)
}

/// `fact_id \t question \t answer`
pub fn write_qa<W: Write>(out: &mut W, pairs: &[QaPair]) -> Result<()> {
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}",
            p.fact_id,
            escape(&p.question.join(" ")),
            escape(&p.answer.join(" "))
        )?;
    }
    Ok(())
}

pub fn read_qa<R: BufRead>(input: R) -> Result<Vec<QaPair>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = fields(&line, 3, i + 1)?;
        out.push(QaPair {
            fact_id: num(&f[0], "fact id", i + 1)?,
            question: tokens(&f[1]),
            answer: tokens(&f[2]),
        });
    }
    Ok(out)
}

/// Header line of config values, then `entity` and `fact` records.
pub fn write_world<W: Write>(out: &mut W, world: &World) -> Result<()> {
    let c = &world.config;
    writeln!(
        out,
        "world\tseed={} entities_per_category={} n_relations={} n_base_facts={} n_new_facts={} n_withheld_facts={}",
        c.seed, c.entities_per_category, c.n_relations, c.n_base_facts, c.n_new_facts, c.n_withheld_facts
    )?;
    for (i, e) in world.entities.iter().enumerate() {
        writeln!(out, "entity\t{i}\t{}\t{}", escape(&e.surface), e.category.name())?;
    }
    for p in [Partition::Base, Partition::New, Partition::Withheld] {
        for f in world.facts(p) {
            writeln!(
                out,
                "fact\t{}\t{}\t{}\t{}\t{}",
                f.id,
                p.name(),
                f.subject,
                RELATIONS[f.relation].name,
                f.object
            )?;
        }
    }
    Ok(())
}

pub fn read_world<R: BufRead>(input: R) -> Result<World> {
    let mut config: Option<WorldConfig> = None;
    let mut entities = Vec::new();
    let (mut base, mut new, mut withheld) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let kind = line.split('\t').next().unwrap_or("");
        match kind {
            "world" => {
                let f = fields(&line, 2, lineno)?;
                let mut c = WorldConfig::default();
                for kv in f[1].split(' ') {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::data(format!("line {lineno}: bad setting {kv:?}")))?;
                    let v: u64 = num(v, k, lineno)?;
                    match k {
                        "seed" => c.seed = v,
                        "entities_per_category" => c.entities_per_category = v as usize,
                        "n_relations" => c.n_relations = v as usize,
                        "n_base_facts" => c.n_base_facts = v as usize,
                        "n_new_facts" => c.n_new_facts = v as usize,
                        "n_withheld_facts" => c.n_withheld_facts = v as usize,
                        _ => return Err(Error::data(format!("line {lineno}: unknown setting {k:?}"))),
                    }
                }
                config = Some(c);
            }
            "entity" => {
                let f = fields(&line, 4, lineno)?;
                let idx: usize = num(&f[1], "entity index", lineno)?;
                if idx != entities.len() {
                    return Err(Error::data(format!("line {lineno}: entity {idx} out of order")));
                }
                entities.push(Entity {
                    surface: f[2].clone(),
                    category: Category::parse(&f[3])
                        .ok_or_else(|| Error::data(format!("line {lineno}: unknown category {:?}", f[3])))?,
                });
            }
            "fact" => {
                let f = fields(&line, 6, lineno)?;
                let relation = RELATIONS
                    .iter()
                    .position(|r| r.name == f[4])
                    .ok_or_else(|| Error::data(format!("line {lineno}: unknown relation {:?}", f[4])))?;
                let fact = FactTriple {
                    id: num(&f[1], "fact id", lineno)?,
                    subject: num(&f[3], "subject", lineno)?,
                    relation,
                    object: num(&f[5], "object", lineno)?,
                };
                if fact.subject >= entities.len() || fact.object >= entities.len() {
                    return Err(Error::data(format!("line {lineno}: entity index out of range")));
                }
                match Partition::parse(&f[2]) {
                    Some(Partition::Base) => base.push(fact),
                    Some(Partition::New) => new.push(fact),
                    Some(Partition::Withheld) => withheld.push(fact),
                    None => return Err(Error::data(format!("line {lineno}: unknown partition {:?}", f[2]))),
                }
            }
            "" => {}
            other => return Err(Error::data(format!("line {lineno}: unknown record {other:?}"))),
        }
    }
    let config = config.ok_or_else(|| Error::data("world file has no header line"))?;
    Ok(World {
        n_relations: config.n_relations,
        config,
        entities,
        base_facts: base,
        new_facts: new,
        withheld_facts: withheld,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{generate_world, render_qa, render_statements};

    #[test]
    fn escaping_round_trips() {
        for s in ["plain", "a\tb", "x\\ny", "line\nbreak", "\\"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
        }
        assert!(unescape("bad\\q").is_err());
    }

    #[test]
    fn world_corpus_and_qa_round_trip() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_world(&mut buf, &w).unwrap();
        assert_eq!(read_world(buf.as_slice()).unwrap(), w);

        let st = render_statements(&w, Partition::New);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &st).unwrap();
        assert_eq!(read_corpus(buf.as_slice()).unwrap(), st);

        let qa = render_qa(&w, Partition::Base);
        let mut buf = Vec::new();
        write_qa(&mut buf, &qa).unwrap();
        assert_eq!(read_qa(buf.as_slice()).unwrap(), qa);
    }

    #[test]
    fn malformed_lines_are_data_errors() {
        assert!(matches!(parse_corpus_line("1\tA b", 1), Err(Error::Data(_))));
        assert!(matches!(parse_corpus_line("1\tA b\t0:5:Person", 1), Err(Error::Data(_))));
        assert!(matches!(parse_corpus_line("x\tA b\t", 1), Err(Error::Data(_))));
        assert!(read_world("bogus\t1\n".as_bytes()).is_err());
    }
}
