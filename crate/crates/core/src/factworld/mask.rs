// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;

use super::{Category, Span, Statement};
use crate::error::{Error, Result};

pub const SENTINEL_TOKEN: &str = "<sentinel>";

/// One salient span replaced by the sentinel. `target` is the sentinel
/// followed by the removed tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub input: Vec<String>,
    pub target: Vec<String>,
    pub span: Span,
    pub fact_id: usize,
}

impl MaskedExample {
    /// Puts the target span back where the sentinel sits.
    pub fn restore(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.input.len() + self.span.len);
        for tok in &self.input {
            if tok == SENTINEL_TOKEN {
                out.extend(self.target[1..].iter().cloned());
            } else {
                out.push(tok.clone());
            }
        }
        out
    }
}

/// Replaces one uniformly chosen span of `tokens` by `sentinel`. Returns the
/// masked input, the target (sentinel then span tokens) and the span, or
/// `None` when there are no spans.
pub fn mask_span<T: Clone, R: Rng + ?Sized>(
    tokens: &[T],
    spans: &[Span],
    sentinel: T,
    rng: &mut R,
) -> Option<(Vec<T>, Vec<T>, Span)> {
    if spans.is_empty() {
        return None;
    }
    let span = spans[rng.random_range(0..spans.len())];
    let mut input = tokens[..span.start].to_vec();
    input.push(sentinel.clone());
    input.extend_from_slice(&tokens[span.end()..]);
    let mut target = vec![sentinel];
    target.extend_from_slice(&tokens[span.start..span.end()]);
    Some((input, target, span))
}

pub fn salient_span_mask<R: Rng + ?Sized>(statement: &Statement, rng: &mut R) -> Result<MaskedExample> {
    let (input, target, span) = mask_span(
        &statement.tokens,
        &statement.spans,
        SENTINEL_TOKEN.to_string(),
        rng,
    )
    .ok_or_else(|| {
        Error::data(format!(
            "statement for fact {} has no salient span",
            statement.fact_id
        ))
    })?;
    Ok(MaskedExample {
        input,
        target,
        span,
        fact_id: statement.fact_id,
    })
}

fn is_year(tok: &str) -> bool {
    tok.len() == 4 && tok.bytes().all(|b| b.is_ascii_digit())
}

fn is_capitalized(tok: &str) -> bool {
    tok.chars().next().is_some_and(|c| c.is_uppercase())
}

/// Best-effort recognizer for unmarked text: 4-digit years become `Date`
/// spans and maximal runs of capitalized tokens become `Other` spans.
pub fn recognize_spans(tokens: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if is_year(&tokens[i]) {
            spans.push(Span { start: i, len: 1, category: Category::Date });
            i += 1;
        } else if is_capitalized(&tokens[i]) {
            let start = i;
            while i < tokens.len() && is_capitalized(&tokens[i]) {
                i += 1;
            }
            spans.push(Span { start, len: i - start, category: Category::Other });
        } else {
            i += 1;
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn stmt(text: &str, spans: Vec<Span>) -> Statement {
        Statement {
            tokens: text.split(' ').map(String::from).collect(),
            spans,
            fact_id: 7,
        }
    }

    fn span(start: usize) -> Span {
        Span { start, len: 1, category: Category::Person }
    }

    #[test]
    fn single_span_is_always_masked() {
        let s = stmt("Ada founded it .", vec![span(0)]);
        let mut rng = rng_for(1, "mask");
        for _ in 0..20 {
            let m = salient_span_mask(&s, &mut rng).unwrap();
            assert_eq!(m.input.join(" "), "<sentinel> founded it .");
            assert_eq!(m.target.join(" "), "<sentinel> Ada");
        }
    }

    #[test]
    fn two_spans_are_chosen_evenly() {
        let s = stmt("Ada was born in Bree .", vec![span(0), span(4)]);
        let mut rng = rng_for(2, "mask");
        let n = 10_000;
        let first = (0..n)
            .filter(|_| salient_span_mask(&s, &mut rng).unwrap().span.start == 0)
            .count();
        let frac = first as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn restore_inverts_masking() {
        let s = stmt("Ada was born in Bree .", vec![span(0), span(4)]);
        let mut rng = rng_for(3, "mask");
        for _ in 0..10 {
            assert_eq!(salient_span_mask(&s, &mut rng).unwrap().restore(), s.tokens);
        }
    }

    #[test]
    fn no_span_is_a_data_error() {
        let s = stmt("nothing here", vec![]);
        let mut rng = rng_for(4, "mask");
        assert!(matches!(salient_span_mask(&s, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn recognizer_marks_years_and_capitalized_runs() {
        let toks: Vec<String> = "in 1907 New Amsterdam was renamed by Ada"
            .split(' ')
            .map(String::from)
            .collect();
        let spans = recognize_spans(&toks);
        assert_eq!(spans.len(), 3);
        assert_eq!((spans[0].start, spans[0].category), (1, Category::Date));
        assert_eq!((spans[1].start, spans[1].len), (2, 2));
        assert_eq!(spans[2].start, 7);
    }
}
