//! Domain-relevance decisions over utterance words and the prior vectors
//! feeding the decoders' prior attention.
//!
//! Relevance is computed once per instance against frozen pretrained word
//! vectors: the k utterance tokens most cosine-similar to the domain's
//! query vector are relevant. The coarse prior down-weights them (entries
//! 1 at relevant positions, r^c elsewhere); the fine prior is the
//! complement with r^f.

use crate::corpus::{EmbeddingTable, Vocabulary};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error("cosine: length mismatch {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no query word of domain `{0}` has an embedding")]
    UnembeddedDomain(String),
    #[error("relevant position {pos} out of range for utterance length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
}

/// `u·v / (‖u‖‖v‖)`; 0 when either norm is 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RelevanceError> {
    if u.len() != v.len() {
        return Err(RelevanceError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu * nv))
}

/// Positions of the k utterance tokens most similar to the mean embedding
/// of the domain's query words. Ties break toward the leftmost position;
/// k is capped at the utterance length.
pub fn domain_relevant_positions(
    utterance: &[String],
    domain_name: &str,
    query_words: &[String],
    vocab: &Vocabulary,
    embeddings: &EmbeddingTable,
    k: usize,
) -> Result<BTreeSet<usize>, RelevanceError> {
    if k == 0 {
        return Ok(BTreeSet::new());
    }
    let mut query = vec![0.0; embeddings.dim];
    let mut found = 0;
    for w in query_words {
        if vocab.contains(w) {
            for (q, v) in query.iter_mut().zip(embeddings.row(vocab.id(w))) {
                *q += v;
            }
            found += 1;
        }
    }
    if found == 0 {
        return Err(RelevanceError::UnembeddedDomain(domain_name.to_string()));
    }
    query.iter_mut().for_each(|q| *q /= found as f64);

    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(utterance.len());
    for (pos, tok) in utterance.iter().enumerate() {
        let row = embeddings.row(vocab.id(tok));
        scored.push((pos, cosine(row, &query)?));
    }
    // stable sort keeps leftmost-first among equal scores
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(scored
        .into_iter()
        .take(k.min(utterance.len()))
        .map(|(p, _)| p)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coarse,
    Fine,
}

/// Prior vector over utterance positions for one decoding stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorVector {
    pub q: Vec<f64>,
    pub stage: Stage,
}

/// Coarse: 1 at relevant positions, r^c elsewhere. Fine: 1 at irrelevant
/// positions, r^f at relevant ones.
pub fn build_prior(
    relevant: &BTreeSet<usize>,
    len: usize,
    stage: Stage,
    r_coarse: f64,
    r_fine: f64,
) -> Result<PriorVector, RelevanceError> {
    if let Some(&pos) = relevant.iter().next_back() {
        if pos >= len {
            return Err(RelevanceError::PositionOutOfRange { pos, len });
        }
    }
    let q = (0..len)
        .map(|i| match stage {
            Stage::Coarse => {
                if relevant.contains(&i) {
                    1.0
                } else {
                    r_coarse
                }
            }
            Stage::Fine => {
                if relevant.contains(&i) {
                    r_fine
                } else {
                    1.0
                }
            }
        })
        .collect();
    Ok(PriorVector { q, stage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{embeddings_from_text, Vocabulary};

    #[test]
    fn cosine_basics() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn fixture() -> (Vocabulary, EmbeddingTable, Vec<String>) {
        let utt: Vec<String> = ["alpha", "beta", "gamma"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let all: Vec<String> = utt
            .iter()
            .cloned()
            .chain(std::iter::once("recipes".to_string()))
            .collect();
        let vocab = Vocabulary::build([all.as_slice()], 1);
        // word 2 (beta) engineered close to the query, others nearly orthogonal
        let text = "\
recipes 1.0 0.0
alpha 0.1 0.9
beta 0.9 0.1
gamma 0.1 0.8
";
        let emb = embeddings_from_text(text, "toy", &vocab, 2, 1).unwrap();
        (vocab, emb, utt)
    }

    #[test]
    fn top_k_positions() {
        let (vocab, emb, utt) = fixture();
        let q = vec!["recipes".to_string()];
        let got = domain_relevant_positions(&utt, "recipes", &q, &vocab, &emb, 1).unwrap();
        assert_eq!(got, BTreeSet::from([1]));
        assert!(domain_relevant_positions(&utt, "recipes", &q, &vocab, &emb, 0)
            .unwrap()
            .is_empty());
        let all = domain_relevant_positions(&utt, "recipes", &q, &vocab, &emb, 99).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn ties_break_leftmost() {
        let utt: Vec<String> = ["same", "same", "other"].iter().map(|s| s.to_string()).collect();
        let all: Vec<String> = utt.iter().cloned().chain(["dom".to_string()]).collect();
        let vocab = Vocabulary::build([all.as_slice()], 1);
        let text = "dom 1.0 0.0\nsame 1.0 0.0\nother 0.0 1.0\n";
        let emb = embeddings_from_text(text, "toy", &vocab, 2, 1).unwrap();
        let got =
            domain_relevant_positions(&utt, "dom", &["dom".to_string()], &vocab, &emb, 1).unwrap();
        assert_eq!(got, BTreeSet::from([0]));
    }

    #[test]
    fn unembedded_domain_is_error() {
        let (vocab, emb, utt) = fixture();
        let err = domain_relevant_positions(
            &utt,
            "market",
            &["market".to_string()],
            &vocab,
            &emb,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("market"));
    }

    #[test]
    fn priors_mark_complementary_classes() {
        let relevant = BTreeSet::from([0]);
        let coarse = build_prior(&relevant, 2, Stage::Coarse, 60.0, 2.0).unwrap();
        let fine = build_prior(&relevant, 2, Stage::Fine, 60.0, 2.0).unwrap();
        assert_eq!(coarse.q, vec![1.0, 60.0]);
        assert_eq!(fine.q, vec![2.0, 1.0]);
        // {k : q^c_k = 1} = {k : q^f_k = r^f}
        for i in 0..2 {
            assert_eq!(coarse.q[i] == 1.0, fine.q[i] == 2.0);
        }

        let none = build_prior(&BTreeSet::new(), 3, Stage::Coarse, 60.0, 2.0).unwrap();
        assert_eq!(none.q, vec![60.0; 3]);
        let all = build_prior(&BTreeSet::from([0, 1, 2]), 3, Stage::Coarse, 60.0, 2.0).unwrap();
        assert_eq!(all.q, vec![1.0; 3]);
    }

    #[test]
    fn out_of_range_position_is_error() {
        let err = build_prior(&BTreeSet::from([5]), 3, Stage::Fine, 60.0, 2.0).unwrap_err();
        assert!(matches!(err, RelevanceError::PositionOutOfRange { pos: 5, len: 3 }));
    }
}
