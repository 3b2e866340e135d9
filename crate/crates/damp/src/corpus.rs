//! Multi-domain corpus ingestion, adaptation splits, vocabularies and
//! pretrained embedding tables.
//!
//! The canonical data format is a UTF-8 TSV with three fields per line:
//! domain, utterance, logical form; tokens inside a field are
//! space-separated.

use crate::numerics::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    BadFieldCount {
        path: String,
        line: usize,
        found: usize,
    },
    #[error("{path}:{line}: empty field `{field}`")]
    EmptyField {
        path: String,
        line: usize,
        field: &'static str,
    },
    #[error("{path}:{line}: {field} length {len} exceeds limit {limit}")]
    OverLength {
        path: String,
        line: usize,
        field: &'static str,
        len: usize,
        limit: usize,
    },
    #[error("unknown target domain `{0}`")]
    UnknownDomain(String),
    #[error("fraction {name}={value} out of range")]
    BadFraction { name: &'static str, value: f64 },
    #[error("{path}:{line}: embedding for `{word}` has {found} values, expected {expected}")]
    DimMismatch {
        path: String,
        line: usize,
        word: String,
        found: usize,
        expected: usize,
    },
}

/// One (domain, utterance, logical form) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub domain: usize,
    pub utterance: Vec<String>,
    pub logical_form: Vec<String>,
}

/// Instances grouped by domain; domain ids are dense in first-appearance
/// order of the input file.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub domains: Vec<String>,
    pub by_domain: Vec<Vec<Instance>>,
}

impl Corpus {
    pub fn domain_id(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    pub fn total_instances(&self) -> usize {
        self.by_domain.iter().map(|v| v.len()).sum()
    }
}

pub fn load_corpus(
    path: &Path,
    max_utterance_len: usize,
    max_lf_len: usize,
) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, &path.display().to_string(), max_utterance_len, max_lf_len)
}

pub fn parse_corpus(
    text: &str,
    path: &str,
    max_utterance_len: usize,
    max_lf_len: usize,
) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CorpusError::BadFieldCount {
                path: path.to_string(),
                line: lineno,
                found: fields.len(),
            });
        }
        let names = ["domain", "utterance", "logical form"];
        for (f, name) in fields.iter().zip(names) {
            if f.trim().is_empty() {
                return Err(CorpusError::EmptyField {
                    path: path.to_string(),
                    line: lineno,
                    field: name,
                });
            }
        }
        let utterance: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
        let logical_form: Vec<String> = fields[2].split_whitespace().map(str::to_string).collect();
        if utterance.len() > max_utterance_len {
            return Err(CorpusError::OverLength {
                path: path.to_string(),
                line: lineno,
                field: "utterance",
                len: utterance.len(),
                limit: max_utterance_len,
            });
        }
        if logical_form.len() > max_lf_len {
            return Err(CorpusError::OverLength {
                path: path.to_string(),
                line: lineno,
                field: "logical form",
                len: logical_form.len(),
                limit: max_lf_len,
            });
        }
        let domain = match corpus.domain_id(fields[0]) {
            Some(id) => id,
            None => {
                corpus.domains.push(fields[0].to_string());
                corpus.by_domain.push(Vec::new());
                corpus.domains.len() - 1
            }
        };
        corpus.by_domain[domain].push(Instance {
            domain,
            utterance,
            logical_form,
        });
    }
    Ok(corpus)
}

/// Source/target adaptation splits with per-domain dev carve-outs.
#[derive(Debug, Clone)]
pub struct AdaptationDataset {
    pub domains: Vec<String>,
    pub target_domain: usize,
    pub source_train: Vec<Instance>,
    pub source_dev: Vec<Instance>,
    pub target_train: Vec<Instance>,
    pub target_dev: Vec<Instance>,
    pub target_test: Vec<Instance>,
    pub seed: u64,
}

impl AdaptationDataset {
    pub fn is_source(&self, inst: &Instance) -> bool {
        inst.domain != self.target_domain
    }
}

fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Splits each domain pool into train/dev by seeded sampling, subsamples
/// the target train set to `target_fraction`, and attaches the target rows
/// of `test` (if provided) as the test set.
pub fn make_adaptation_split(
    corpus: &Corpus,
    target_domain: &str,
    target_fraction: f64,
    dev_fraction: f64,
    seed: u64,
    test: Option<&Corpus>,
) -> Result<AdaptationDataset, CorpusError> {
    let target = corpus
        .domain_id(target_domain)
        .ok_or_else(|| CorpusError::UnknownDomain(target_domain.to_string()))?;
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(CorpusError::BadFraction {
            name: "target_fraction",
            value: target_fraction,
        });
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(CorpusError::BadFraction {
            name: "dev_fraction",
            value: dev_fraction,
        });
    }

    let mut out = AdaptationDataset {
        domains: corpus.domains.clone(),
        target_domain: target,
        source_train: Vec::new(),
        source_dev: Vec::new(),
        target_train: Vec::new(),
        target_dev: Vec::new(),
        target_test: Vec::new(),
        seed,
    };

    for (id, name) in corpus.domains.iter().enumerate() {
        let pool = &corpus.by_domain[id];
        let n_dev = round_half_away(dev_fraction * pool.len() as f64);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = domain_rng(seed, name, "dev");
        order.shuffle(&mut rng);
        let mut is_dev = vec![false; pool.len()];
        for &i in order.iter().take(n_dev) {
            is_dev[i] = true;
        }
        // original line order preserved within each subset
        let dev: Vec<Instance> = pool
            .iter()
            .enumerate()
            .filter(|(i, _)| is_dev[*i])
            .map(|(_, x)| x.clone())
            .collect();
        let train: Vec<Instance> = pool
            .iter()
            .enumerate()
            .filter(|(i, _)| !is_dev[*i])
            .map(|(_, x)| x.clone())
            .collect();

        if id == target {
            let n_target = round_half_away(target_fraction * train.len() as f64).max(1);
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = domain_rng(seed, name, "target");
            order.shuffle(&mut rng);
            let mut keep = vec![false; train.len()];
            for &i in order.iter().take(n_target.min(train.len())) {
                keep[i] = true;
            }
            out.target_train = train
                .into_iter()
                .enumerate()
                .filter(|(i, _)| keep[*i])
                .map(|(_, x)| x)
                .collect();
            out.target_dev = dev;
        } else {
            out.source_train.extend(train);
            out.source_dev.extend(dev);
        }
    }

    if let Some(test) = test {
        if let Some(tid) = test.domain_id(target_domain) {
            out.target_test = test.by_domain[tid]
                .iter()
                .map(|inst| Instance {
                    domain: target,
                    ..inst.clone()
                })
                .collect();
        }
    }
    Ok(out)
}

fn domain_rng(seed: u64, domain: &str, salt: &str) -> ChaCha20Rng {
    let key = crate::numerics::fnv1a(format!("{domain}/{salt}").as_bytes());
    ChaCha20Rng::seed_from_u64(seed ^ key)
}

/// Token-to-index map with fixed reserved entries PAD=0, BOS=1, EOS=2, UNK=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Frequency-descending, then lexicographic; reserved tokens first.
    pub fn build<'a, I>(token_seqs: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for seq in token_seqs {
            for tok in seq {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// Pretrained word vectors aligned to a vocabulary. Missing rows are drawn
/// uniform in ±0.08 from the seed; the PAD row is zero.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub matrix: Tensor,
}

impl EmbeddingTable {
    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }
}

pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    embeddings_from_text(&text, &path.display().to_string(), vocab, dim, seed)
}

pub fn embeddings_from_text(
    text: &str,
    path: &str,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable, CorpusError> {
    let mut file_vecs: HashMap<&str, Vec<f64>> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let word = it.next().unwrap();
        let values: Vec<f64> = it.map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        if values.len() != dim || values.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::DimMismatch {
                path: path.to_string(),
                line: idx + 1,
                word: word.to_string(),
                found: values.len(),
                expected: dim,
            });
        }
        file_vecs.insert(word, values);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut matrix = Tensor::zeros(vocab.len(), dim);
    for id in 0..vocab.len() {
        // the random stream is consumed in vocab order so layouts reproduce
        let random: Vec<f64> = Tensor::uniform(1, dim, -0.08, 0.08, &mut rng).data;
        if id == PAD {
            continue;
        }
        let row = match file_vecs.get(vocab.token(id)) {
            Some(v) => v.clone(),
            None => random,
        };
        for (c, v) in row.into_iter().enumerate() {
            matrix.set(id, c, v);
        }
    }
    Ok(EmbeddingTable { dim, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "recipes\tmeetings attended\tlistValue ( a )\n\
                       recipes\thello there\tlistValue ( b )\n\
                       housing\tbig house\tlistValue ( c )\n";

    #[test]
    fn parses_lines_grouped_by_domain() {
        let c = parse_corpus(TOY, "toy", 64, 64).unwrap();
        assert_eq!(c.domains, vec!["recipes", "housing"]);
        assert_eq!(c.by_domain[0].len(), 2);
        assert_eq!(c.by_domain[0][0].utterance.len(), 2);
        assert_eq!(c.by_domain[1].len(), 1);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = parse_corpus("", "toy", 10, 10).unwrap();
        assert_eq!(c.total_instances(), 0);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_corpus("recipes\tonly two fields\n", "toy", 10, 10).unwrap_err();
        assert!(err.to_string().contains("toy:1"));
        let err = parse_corpus(&format!("{TOY}x\t\ty\n"), "toy", 10, 10).unwrap_err();
        assert!(err.to_string().contains(":4"));
    }

    #[test]
    fn over_length_names_limit() {
        let err = parse_corpus("d\ta b c\tx\n", "toy", 2, 10).unwrap_err();
        assert!(err.to_string().contains("limit 2"));
    }

    fn synthetic_corpus(per_domain: &[(&str, usize)]) -> Corpus {
        let mut text = String::new();
        for (dom, n) in per_domain {
            for i in 0..*n {
                text.push_str(&format!("{dom}\tutt{i} word\tlf{i} ( x )\n"));
            }
        }
        parse_corpus(&text, "synthetic", 64, 64).unwrap()
    }

    #[test]
    fn split_sizes_match_rounding() {
        // 864-line pool at dev 0.20 -> 691 train / 173 dev
        let c = synthetic_corpus(&[("recipes", 864), ("other", 100)]);
        let ds = make_adaptation_split(&c, "recipes", 1.0, 0.20, 7, None).unwrap();
        assert_eq!(ds.target_dev.len(), 173);
        assert_eq!(ds.target_train.len(), 691);

        let ds = make_adaptation_split(&c, "recipes", 0.10, 0.20, 7, None).unwrap();
        assert_eq!(ds.target_train.len(), 69); // round(0.10 * 691)
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let c = synthetic_corpus(&[("a", 50), ("b", 40)]);
        let d1 = make_adaptation_split(&c, "b", 0.5, 0.2, 3, None).unwrap();
        let d2 = make_adaptation_split(&c, "b", 0.5, 0.2, 3, None).unwrap();
        assert_eq!(d1.target_train, d2.target_train);
        assert_eq!(d1.source_dev, d2.source_dev);
        // train ∪ dev = pool, disjoint (source domain "a")
        assert_eq!(d1.source_train.len() + d1.source_dev.len(), 50);
        for inst in &d1.source_dev {
            assert!(!d1.source_train.contains(inst));
        }
    }

    #[test]
    fn target_subsample_is_monotone_in_fraction() {
        let c = synthetic_corpus(&[("a", 30), ("b", 60)]);
        let lo = make_adaptation_split(&c, "b", 0.2, 0.2, 11, None).unwrap();
        let hi = make_adaptation_split(&c, "b", 0.6, 0.2, 11, None).unwrap();
        for inst in &lo.target_train {
            assert!(hi.target_train.contains(inst));
        }
    }

    #[test]
    fn unknown_target_domain_is_error() {
        let c = synthetic_corpus(&[("a", 5)]);
        assert!(make_adaptation_split(&c, "nope", 0.1, 0.2, 1, None).is_err());
    }

    #[test]
    fn vocab_build_and_round_trip() {
        let seqs: Vec<Vec<String>> = vec![
            vec!["a".into(), "a".into()],
            vec!["b".into()],
        ];
        let refs: Vec<&[String]> = seqs.iter().map(|v| v.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1);
        assert_eq!(v.len(), 6); // 4 reserved + a + b
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);
        let ids = v.encode(&seqs[0]);
        assert_eq!(v.decode(&ids), seqs[0]);

        let v2 = Vocabulary::build(refs.iter().copied(), 2);
        assert_eq!(v2.id("b"), UNK);
    }

    #[test]
    fn embeddings_copy_seed_and_zero_pad() {
        let seqs: Vec<Vec<String>> = vec![vec!["w1".into(), "w2".into(), "w3".into()]];
        let refs: Vec<&[String]> = seqs.iter().map(|v| v.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1);
        let emb = embeddings_from_text("w1 0.1 0.2\n", "e", &v, 2, 5).unwrap();
        assert_eq!(emb.row(v.id("w1")), &[0.1, 0.2]);
        assert_eq!(emb.row(PAD), &[0.0, 0.0]);
        for &w in &["w2", "w3"] {
            for &x in emb.row(v.id(w)) {
                assert!((-0.08..0.08).contains(&x));
            }
        }
        let again = embeddings_from_text("w1 0.1 0.2\n", "e", &v, 2, 5).unwrap();
        assert_eq!(emb.matrix, again.matrix);
    }

    #[test]
    fn embedding_dim_mismatch_names_word() {
        let seqs: Vec<Vec<String>> = vec![vec!["w1".into()]];
        let refs: Vec<&[String]> = seqs.iter().map(|v| v.as_slice()).collect();
        let v = Vocabulary::build(refs.iter().copied(), 1);
        let err = embeddings_from_text("w1 0.1 0.2 0.3\n", "e", &v, 2, 5).unwrap_err();
        assert!(err.to_string().contains("w1"));
    }
}
