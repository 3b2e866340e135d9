//! Sketch induction from logical forms, sketch/logical-form alignment, and
//! exact-match metrics.
//!
//! A token is domain-general when it appears in logical forms of more than
//! half of the source domains; parentheses are always general. Each maximal
//! run of k consecutive domain-specific tokens is collapsed, together with
//! the general non-parenthesis token directly before it, into a single
//! placeholder `head@k` (`hole@k` when the run has no adjacent head).

use crate::corpus::{Corpus, Instance};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("skeleton mismatch at logical-form position {position}: expected `{expected}`, found `{found}`")]
    SkeletonMismatch {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("logical form exhausted while aligning sketch token `{0}`")]
    Exhausted(String),
    #[error("trailing logical-form tokens starting at position {0} not covered by sketch")]
    Uncovered(usize),
}

/// Which source domains contain each logical-form token.
#[derive(Debug, Clone)]
pub struct TokenShareTable {
    shares: HashMap<String, BTreeSet<usize>>,
    pub num_source_domains: usize,
}

impl TokenShareTable {
    pub fn share_set(&self, token: &str) -> Option<&BTreeSet<usize>> {
        self.shares.get(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.shares.keys().map(|s| s.as_str())
    }
}

/// Counts, for every token in any source logical form, the exact set of
/// source domains whose logical forms contain it.
pub fn compute_token_shares(source: &Corpus) -> TokenShareTable {
    let mut shares: HashMap<String, BTreeSet<usize>> = HashMap::new();
    for (domain, instances) in source.by_domain.iter().enumerate() {
        for inst in instances {
            for tok in &inst.logical_form {
                shares.entry(tok.clone()).or_default().insert(domain);
            }
        }
    }
    TokenShareTable {
        shares,
        num_source_domains: source.domains.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    General,
    Specific,
}

pub fn is_paren(token: &str) -> bool {
    token == "(" || token == ")"
}

/// General iff shared by strictly more than 50% of source domains;
/// parentheses are always general; unseen tokens are specific.
pub fn classify_token(token: &str, table: &TokenShareTable) -> TokenClass {
    if is_paren(token) {
        return TokenClass::General;
    }
    match table.share_set(token) {
        Some(set) if 2 * set.len() > table.num_source_domains => TokenClass::General,
        _ => TokenClass::Specific,
    }
}

/// One sketch token: a verbatim general token or a `head@k` placeholder
/// standing for the head plus k domain-specific tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SketchToken {
    Plain(String),
    Placeholder { head: String, k: usize },
}

impl SketchToken {
    pub fn surface(&self) -> String {
        match self {
            SketchToken::Plain(t) => t.clone(),
            SketchToken::Placeholder { head, k } => format!("{head}@{k}"),
        }
    }

    /// Inverse of `surface`; `w@3` parses as a placeholder, anything else
    /// is plain.
    pub fn parse(surface: &str) -> SketchToken {
        if let Some(at) = surface.rfind('@') {
            let (head, num) = surface.split_at(at);
            if let Ok(k) = num[1..].parse::<usize>() {
                if k >= 1 && !head.is_empty() {
                    return SketchToken::Placeholder {
                        head: head.to_string(),
                        k,
                    };
                }
            }
        }
        SketchToken::Plain(surface.to_string())
    }
}

/// Domain-general token sequence abstracted from a logical form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sketch {
    pub tokens: Vec<SketchToken>,
}

impl Sketch {
    pub fn surface(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface()).collect()
    }

    pub fn from_surface(tokens: &[String]) -> Sketch {
        Sketch {
            tokens: tokens.iter().map(|t| SketchToken::parse(t)).collect(),
        }
    }

    pub fn placeholder_count(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, SketchToken::Placeholder { .. }))
            .count()
    }
}

/// Positional mapping from sketch tokens into the logical form. A plain
/// token maps to one position; a placeholder maps to its head position plus
/// the k following specific positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlignEntry {
    One(usize),
    Span {
        head: Option<usize>,
        slots: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub entries: Vec<AlignEntry>,
}

impl Alignment {
    /// For each logical-form position: (sketch position, is a fine-filled
    /// specific slot). Head and plain positions carry `false`.
    pub fn invert(&self, lf_len: usize) -> Vec<(usize, bool)> {
        let mut out = vec![(usize::MAX, false); lf_len];
        for (k, e) in self.entries.iter().enumerate() {
            match e {
                AlignEntry::One(p) => out[*p] = (k, false),
                AlignEntry::Span { head, slots } => {
                    if let Some(h) = head {
                        out[*h] = (k, false);
                    }
                    for &s in slots {
                        out[s] = (k, true);
                    }
                }
            }
        }
        out
    }

    pub fn covered_positions(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match e {
                AlignEntry::One(_) => 1,
                AlignEntry::Span { head, slots } => usize::from(head.is_some()) + slots.len(),
            })
            .sum()
    }
}

/// Collapses specific-token runs of a logical form into placeholders using
/// the supplied classifier.
pub fn induce_sketch<F>(logical_form: &[String], classify: F) -> (Sketch, Alignment)
where
    F: Fn(&str) -> TokenClass,
{
    let mut tokens: Vec<SketchToken> = Vec::new();
    let mut entries = Vec::new();

    let mut i = 0;
    while i < logical_form.len() {
        let tok = &logical_form[i];
        if classify(tok) == TokenClass::General {
            tokens.push(SketchToken::Plain(tok.clone()));
            entries.push(AlignEntry::One(i));
            i += 1;
            continue;
        }
        // maximal run of specific tokens
        let start = i;
        while i < logical_form.len() && classify(&logical_form[i]) == TokenClass::Specific {
            i += 1;
        }
        let k = i - start;
        let slots: Vec<usize> = (start..i).collect();
        // collapse the run into its head: the general non-paren token
        // directly before it (anything further away would reorder Y)
        let adjacent_head = match (tokens.last(), entries.last()) {
            (Some(SketchToken::Plain(h)), Some(AlignEntry::One(p)))
                if *p + 1 == start && !is_paren(h) =>
            {
                Some(h.clone())
            }
            _ => None,
        };
        match adjacent_head {
            Some(head) => {
                let idx = tokens.len() - 1;
                tokens[idx] = SketchToken::Placeholder { head, k };
                entries[idx] = AlignEntry::Span {
                    head: Some(start - 1),
                    slots,
                };
            }
            None => {
                tokens.push(SketchToken::Placeholder {
                    head: "hole".to_string(),
                    k,
                });
                entries.push(AlignEntry::Span { head: None, slots });
            }
        }
    }
    (Sketch { tokens }, Alignment { entries })
}

/// Parallel walk of a logical form against a sketch with the same
/// general-token skeleton.
pub fn align(logical_form: &[String], sketch: &Sketch) -> Result<Alignment, SketchError> {
    let mut entries = Vec::new();
    let mut pos = 0;
    for tok in &sketch.tokens {
        match tok {
            SketchToken::Plain(t) => {
                if pos >= logical_form.len() {
                    return Err(SketchError::Exhausted(t.clone()));
                }
                if &logical_form[pos] != t {
                    return Err(SketchError::SkeletonMismatch {
                        position: pos,
                        expected: t.clone(),
                        found: logical_form[pos].clone(),
                    });
                }
                entries.push(AlignEntry::One(pos));
                pos += 1;
            }
            SketchToken::Placeholder { head, k } => {
                if pos >= logical_form.len() {
                    return Err(SketchError::Exhausted(tok.surface()));
                }
                if head != "hole" {
                    if &logical_form[pos] != head {
                        return Err(SketchError::SkeletonMismatch {
                            position: pos,
                            expected: head.clone(),
                            found: logical_form[pos].clone(),
                        });
                    }
                    if pos + k >= logical_form.len() {
                        return Err(SketchError::Exhausted(tok.surface()));
                    }
                    entries.push(AlignEntry::Span {
                        head: Some(pos),
                        slots: (pos + 1..pos + 1 + k).collect(),
                    });
                    pos += 1 + k;
                } else {
                    if pos + k > logical_form.len() {
                        return Err(SketchError::Exhausted(tok.surface()));
                    }
                    entries.push(AlignEntry::Span {
                        head: None,
                        slots: (pos..pos + k).collect(),
                    });
                    pos += k;
                }
            }
        }
    }
    if pos != logical_form.len() {
        return Err(SketchError::Uncovered(pos));
    }
    Ok(Alignment { entries })
}

/// Rebuilds the logical form from a sketch and the specific tokens filling
/// its placeholder slots (in left-to-right slot order).
pub fn reconstruct(sketch: &Sketch, fills: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut fi = 0;
    for tok in &sketch.tokens {
        match tok {
            SketchToken::Plain(t) => out.push(t.clone()),
            SketchToken::Placeholder { head, k } => {
                if head != "hole" {
                    out.push(head.clone());
                    for _ in 0..*k {
                        out.push(fills.get(fi).cloned().unwrap_or_default());
                        fi += 1;
                    }
                } else {
                    for _ in 0..*k {
                        out.push(fills.get(fi).cloned().unwrap_or_default());
                        fi += 1;
                    }
                }
            }
        }
    }
    out
}

/// Specific tokens of a logical form in slot order, per its alignment.
pub fn slot_fills(logical_form: &[String], alignment: &Alignment) -> Vec<String> {
    let mut out = Vec::new();
    for e in &alignment.entries {
        if let AlignEntry::Span { slots, .. } = e {
            for &s in slots {
                out.push(logical_form[s].clone());
            }
        }
    }
    out
}

pub fn exact_match(pred: &[String], gold: &[String]) -> bool {
    pred == gold
}

pub fn em_rate(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(p, g)| exact_match(p, g)).count();
    hits as f64 / pairs.len() as f64
}

/// Applies sketch induction to every instance of a corpus, classifying
/// against the given share table.
pub fn induce_for_instances<'a, I>(
    instances: I,
    table: &TokenShareTable,
) -> Vec<(Sketch, Alignment)>
where
    I: IntoIterator<Item = &'a Instance>,
{
    instances
        .into_iter()
        .map(|inst| induce_sketch(&inst.logical_form, |t| classify_token(t, table)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn classify_specific<'a>(specific: &'a [&str]) -> impl Fn(&str) -> TokenClass + 'a {
        move |t: &str| {
            if specific.contains(&t) {
                TokenClass::Specific
            } else {
                TokenClass::General
            }
        }
    }

    const CALENDAR_LF: &str = "listValue ( countComparative ( getProperty ( singleton en.meeting ) ( string !type ) ) ( string attendee ) ( string >= ) ( number 2 ) )";
    const CALENDAR_SKETCH: &str = "listValue ( countComparative ( getProperty ( singleton@1 ) ( string !type ) ) ( string@1 ) ( string >= ) ( number@1 ) )";

    #[test]
    fn calendar_sketch_matches_expected() {
        let lf = toks(CALENDAR_LF);
        let specific = ["en.meeting", "attendee", "2"];
        let (sketch, alignment) = induce_sketch(&lf, classify_specific(&specific));
        assert_eq!(sketch.surface(), toks(CALENDAR_SKETCH));
        assert_eq!(alignment.covered_positions(), lf.len());
        // no specific surface token leaks into the sketch
        for s in sketch.surface() {
            assert!(!specific.contains(&s.as_str()));
        }
    }

    #[test]
    fn all_general_form_is_identity() {
        let lf = toks("listValue ( size )");
        let (sketch, alignment) = induce_sketch(&lf, |_| TokenClass::General);
        assert_eq!(sketch.surface(), lf);
        assert_eq!(sketch.placeholder_count(), 0);
        assert_eq!(alignment.covered_positions(), lf.len());
    }

    #[test]
    fn collapsing_rule_with_run_of_two() {
        let lf = toks("( foo a b )");
        let (sketch, alignment) = induce_sketch(&lf, classify_specific(&["a", "b"]));
        assert_eq!(sketch.surface(), toks("( foo@2 )"));
        assert_eq!(
            alignment.entries[1],
            AlignEntry::Span {
                head: Some(1),
                slots: vec![2, 3]
            }
        );
    }

    #[test]
    fn headless_run_becomes_hole() {
        let lf = toks("( a b )");
        let (sketch, _) = induce_sketch(&lf, classify_specific(&["a", "b"]));
        assert_eq!(sketch.surface(), toks("( hole@2 )"));
    }

    #[test]
    fn head_search_respects_paren_groups() {
        // the general token `foo` sits in an outer group; `a` inside the
        // inner parens has no head there
        let lf = toks("foo ( a )");
        let (sketch, _) = induce_sketch(&lf, classify_specific(&["a"]));
        assert_eq!(sketch.surface(), toks("foo ( hole@1 )"));
    }

    #[test]
    fn align_round_trips_and_rejects_mismatch() {
        let lf = toks("( foo a b )");
        let (sketch, alignment) = induce_sketch(&lf, classify_specific(&["a", "b"]));
        assert_eq!(align(&lf, &sketch).unwrap(), alignment);

        let other = toks("( foo x y )");
        assert_eq!(align(&other, &sketch).unwrap(), alignment);

        let bad_sketch = Sketch::from_surface(&toks("( bar@1 )"));
        let err = align(&toks("( foo a )"), &bad_sketch).unwrap_err();
        assert!(matches!(err, SketchError::SkeletonMismatch { position: 1, .. }));
    }

    #[test]
    fn reconstruction_round_trips() {
        let lf = toks(CALENDAR_LF);
        let specific = ["en.meeting", "attendee", "2"];
        let (sketch, alignment) = induce_sketch(&lf, classify_specific(&specific));
        let fills = slot_fills(&lf, &alignment);
        assert_eq!(fills, toks("en.meeting attendee 2"));
        assert_eq!(reconstruct(&sketch, &fills), lf);
    }

    #[test]
    fn share_table_and_threshold() {
        let text = "\
calendar\tu\tlistValue ( attendee )
housing\tu\tlistValue ( neighborhood )
blocks\tu\tlistValue ( shape )
";
        let corpus = parse_corpus(text, "toy", 32, 32).unwrap();
        let table = compute_token_shares(&corpus);
        assert_eq!(table.num_source_domains, 3);
        assert_eq!(table.share_set("listValue").unwrap().len(), 3);
        assert_eq!(table.share_set("attendee").unwrap().len(), 1);
        assert_eq!(classify_token("listValue", &table), TokenClass::General);
        assert_eq!(classify_token("attendee", &table), TokenClass::Specific);
        assert_eq!(classify_token("(", &table), TokenClass::General);
        assert_eq!(classify_token("never-seen", &table), TokenClass::Specific);
    }

    #[test]
    fn threshold_is_strict_majority() {
        // 4 of 7 is general, 3 of 7 specific, n of 2n specific
        let mk = |num: usize, shares: usize| {
            let mut t = TokenShareTable {
                shares: HashMap::new(),
                num_source_domains: num,
            };
            t.shares
                .insert("tok".to_string(), (0..shares).collect());
            t
        };
        assert_eq!(classify_token("tok", &mk(7, 4)), TokenClass::General);
        assert_eq!(classify_token("tok", &mk(7, 3)), TokenClass::Specific);
        assert_eq!(classify_token("tok", &mk(6, 3)), TokenClass::Specific);
    }

    #[test]
    fn exact_match_and_rate() {
        assert!(exact_match(&toks("a b"), &toks("a b")));
        assert!(!exact_match(&toks("a b"), &toks("a c")));
        let pairs = vec![
            (toks("a"), toks("a")),
            (toks("b"), toks("b")),
            (toks("c"), toks("d")),
        ];
        assert!((em_rate(&pairs) - 2.0 / 3.0).abs() < 1e-12);
    }
}
