//! Evaluation and analysis artifacts: sketch / oracle-sketch / pipeline
//! exact-match rates, the Calinski–Harabasz cluster index over pooled
//! utterance representations, attention dumps, and target-fraction sweeps.

use thiserror::Error;

use crate::config::{Strategy, TrainConfig};
use crate::corpus::{make_adaptation_split, Corpus, CorpusError, Instance, BOS};
use crate::infer::{InferError, Parser};
use crate::model::{
    prepare_instance, InferStage, InputSrc, Model, ModelError, Prepared,
};
use crate::numerics::ParameterStore;
use crate::sketchlang::exact_match;
use crate::train::{TrainError, Trainer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("calinski_harabasz: {0}")]
    Degenerate(&'static str),
    #[error("point {index} has dimension {found}, expected {expected}")]
    DimMismatch {
        index: usize,
        found: usize,
        expected: usize,
    },
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Exact-match rates in Table-3 column order: Sketch, LF_oracle, LF.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n: usize,
    pub sketch_em: f64,
    pub oracle_em: f64,
    pub lf_em: f64,
    pub per_domain: Vec<DomainReport>,
}

#[derive(Debug, Clone)]
pub struct DomainReport {
    pub domain: String,
    pub n: usize,
    pub sketch_em: f64,
    pub oracle_em: f64,
    pub lf_em: f64,
}

/// One prediction row of the dump TSV.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub domain: String,
    pub utterance: Vec<String>,
    pub sketch: Vec<String>,
    pub logical_form: Vec<String>,
    pub gold: Vec<String>,
    pub hit: bool,
}

/// Decodes every instance three ways (sketch only, oracle-sketch LF, full
/// pipeline LF) with the given beam and reports EM rates.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    strategy: Strategy,
    set: &[Prepared],
    beam: usize,
    domains: &[String],
) -> Result<(EvalReport, Vec<Prediction>)> {
    let mut parser = Parser::new(model, store, strategy);
    parser.beam = beam;
    let mut rows = Vec::with_capacity(set.len());
    let mut tallies: Vec<(usize, usize, usize, usize)> = vec![(0, 0, 0, 0); domains.len()];
    for p in set {
        let out = parser.parse(&p.utterance, Some(&p.q_coarse), Some(&p.q_fine))?;
        let (oracle_lf, sketch_hit) = if strategy == Strategy::Seq2Seq {
            (out.logical_form.clone(), false)
        } else {
            let oracle = parser.parse_with_sketch(&p.utterance, &p.sketch, Some(&p.q_fine))?;
            (
                oracle.logical_form,
                exact_match(&out.sketch, &p.sketch_surface),
            )
        };
        let oracle_hit = exact_match(&oracle_lf, &p.logical_form);
        let lf_hit = exact_match(&out.logical_form, &p.logical_form);
        let t = &mut tallies[p.domain];
        t.0 += 1;
        t.1 += sketch_hit as usize;
        t.2 += oracle_hit as usize;
        t.3 += lf_hit as usize;
        rows.push(Prediction {
            domain: domains[p.domain].clone(),
            utterance: p.utterance.clone(),
            sketch: out.sketch,
            logical_form: out.logical_form,
            gold: p.logical_form.clone(),
            hit: lf_hit,
        });
    }
    let n: usize = tallies.iter().map(|t| t.0).sum();
    let rate = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let per_domain = domains
        .iter()
        .zip(&tallies)
        .filter(|(_, t)| t.0 > 0)
        .map(|(d, t)| DomainReport {
            domain: d.clone(),
            n: t.0,
            sketch_em: rate(t.1, t.0),
            oracle_em: rate(t.2, t.0),
            lf_em: rate(t.3, t.0),
        })
        .collect();
    let total = tallies.iter().fold((0, 0, 0), |a, t| {
        (a.0 + t.1, a.1 + t.2, a.2 + t.3)
    });
    Ok((
        EvalReport {
            n,
            sketch_em: rate(total.0, n),
            oracle_em: rate(total.1, n),
            lf_em: rate(total.2, n),
            per_domain,
        },
        rows,
    ))
}

pub fn predictions_tsv(rows: &[Prediction]) -> String {
    let mut s = String::from("domain\tutterance\tsketch\tlogical_form\tgold\tmatch\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.domain,
            r.utterance.join(" "),
            r.sketch.join(" "),
            r.logical_form.join(" "),
            r.gold.join(" "),
            r.hit as u8
        ));
    }
    s
}

/// Calinski–Harabasz index: `(B/(k−1)) / (W/(n−k))` with between-cluster
/// dispersion B and within-cluster dispersion W.
pub fn calinski_harabasz(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(EvalError::Degenerate("points and labels differ in length"));
    }
    let n = points.len();
    if n == 0 {
        return Err(EvalError::Degenerate("no points"));
    }
    let d = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(EvalError::DimMismatch {
                index: i,
                found: p.len(),
                expected: d,
            });
        }
    }
    let k = labels.iter().max().unwrap() + 1;
    if k < 2 {
        return Err(EvalError::Degenerate("fewer than 2 clusters"));
    }
    if n <= k {
        return Err(EvalError::Degenerate("need more points than clusters"));
    }
    let mut counts = vec![0usize; k];
    let mut centroids = vec![vec![0.0; d]; k];
    let mut grand = vec![0.0; d];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(p) {
            *c += v;
        }
        for (g, v) in grand.iter_mut().zip(p) {
            *g += v;
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(EvalError::Degenerate("empty cluster"));
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= cnt as f64;
        }
    }
    for g in grand.iter_mut() {
        *g /= n as f64;
    }
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let b: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(c, &cnt)| cnt as f64 * sq(c, &grand))
        .sum();
    let w: f64 = points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq(p, &centroids[l]))
        .sum();
    if w == 0.0 {
        return Err(EvalError::Degenerate("zero within-cluster dispersion"));
    }
    Ok((b / (k as f64 - 1.0)) / (w / (n as f64 - k as f64)))
}

/// Pooled self-attentive representations (the discriminator's input `u`)
/// of every instance, tagged with its domain id.
pub fn pooled_representations(
    model: &Model,
    store: &ParameterStore,
    set: &[Prepared],
    stage: InferStage,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let (enc, head) = match stage {
        InferStage::Fine => ("enc2", "disc_f"),
        _ => ("enc1", "disc_c"),
    };
    let mut rows = Vec::with_capacity(set.len());
    for p in set {
        let run = model.encode_infer(store, enc, "emb.utt", &p.utt_ids, Some(head))?;
        let (u, _) = run.pooled.expect("disc head requested");
        rows.push((p.domain, u));
    }
    Ok(rows)
}

pub fn representations_tsv(rows: &[(usize, Vec<f64>)], domains: &[String]) -> String {
    let mut s = String::from("domain\tvector\n");
    for (d, u) in rows {
        let joined: Vec<String> = u.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("{}\t{}\n", domains[*d], joined.join(" ")));
    }
    s
}

/// CH index over a representation dump, clustered by domain label. Labels
/// are compacted so absent domains do not count as empty clusters.
pub fn representation_ch(rows: &[(usize, Vec<f64>)]) -> Result<f64> {
    let mut seen: Vec<usize> = rows.iter().map(|(d, _)| *d).collect();
    seen.sort_unstable();
    seen.dedup();
    let labels: Vec<usize> = rows
        .iter()
        .map(|(d, _)| seen.binary_search(d).unwrap())
        .collect();
    let points: Vec<Vec<f64>> = rows.iter().map(|(_, u)| u.clone()).collect();
    calinski_harabasz(&points, &labels)
}

/// Per-step attention rows of one stage's teacher-forced decode.
#[derive(Debug, Clone)]
pub struct AttentionRow {
    pub alpha: Vec<f64>,
    pub alpha_pri: Vec<f64>,
    pub alpha_sketch: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub coarse: Vec<AttentionRow>,
    pub fine: Vec<AttentionRow>,
}

/// Teacher-forced attention trace of one prepared instance through both
/// stages; rows are decode steps, columns utterance positions (plus sketch
/// positions for the fine sketch attention).
pub fn dump_attention(
    model: &Model,
    store: &ParameterStore,
    prep: &Prepared,
    use_prior: bool,
) -> Result<AttentionDump> {
    let q = |v: &[f64]| if use_prior { Some(v.to_vec()) } else { None };

    let run = model.encode_infer(store, "enc1", "emb.utt", &prep.utt_ids, None)?;
    let mut st = model.init_state_infer(store, "dec_c", &run)?;
    let qc = q(&prep.q_coarse);
    let mut coarse = Vec::new();
    for t in 0..=prep.sketch_ids.len() {
        let input = if t == 0 {
            InputSrc::Embed(BOS)
        } else {
            InputSrc::Embed(prep.sketch_ids[t - 1])
        };
        let out = model.step_infer(
            store,
            InferStage::Coarse,
            &run,
            None,
            qc.as_deref(),
            &st,
            &input,
        )?;
        coarse.push(AttentionRow {
            alpha: out.alpha.clone(),
            alpha_pri: out.alpha_pri.clone(),
            alpha_sketch: None,
        });
        st = out.state;
    }

    let run2 = model.encode_infer(store, "enc2", "emb.utt", &prep.utt_ids, None)?;
    let sk = model.encode_infer(store, "enc3", "emb.sketch", &prep.sketch_ids, None)?;
    let mut st = model.init_state_infer(store, "dec_f", &run2)?;
    let qf = q(&prep.q_fine);
    let mut fine = Vec::new();
    for src in &prep.switch {
        let out = model.step_infer(
            store,
            InferStage::Fine,
            &run2,
            Some(&sk),
            qf.as_deref(),
            &st,
            src,
        )?;
        fine.push(AttentionRow {
            alpha: out.alpha.clone(),
            alpha_pri: out.alpha_pri.clone(),
            alpha_sketch: out.alpha_sketch.clone(),
        });
        st = out.state;
    }
    Ok(AttentionDump { coarse, fine })
}

pub fn attention_tsv(dump: &AttentionDump) -> String {
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::from("stage\tstep\tkind\trow\n");
    for (stage, rows) in [("coarse", &dump.coarse), ("fine", &dump.fine)] {
        for (t, r) in rows.iter().enumerate() {
            s.push_str(&format!("{stage}\t{t}\talpha\t{}\n", fmt(&r.alpha)));
            s.push_str(&format!("{stage}\t{t}\talpha_pri\t{}\n", fmt(&r.alpha_pri)));
            if let Some(a) = &r.alpha_sketch {
                s.push_str(&format!("{stage}\t{t}\talpha_sketch\t{}\n", fmt(a)));
            }
        }
    }
    s
}

/// One row of the Figure-5-style data-budget sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub fraction: f64,
    pub n_target: usize,
    pub sketch_em: f64,
    pub lf_em: f64,
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("fraction\tn_target\tsketch_em\tlf_em\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.fraction, r.n_target, r.sketch_em, r.lf_em
        ));
    }
    s
}

/// Trains one model per target fraction under the fixed seed and evaluates
/// on the target test split (target dev when no test corpus is given).
pub fn sweep_target_fraction(
    base_cfg: &TrainConfig,
    corpus: &Corpus,
    target_domain: &str,
    fractions: &[f64],
    test: Option<&Corpus>,
    embeddings_text: Option<&str>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut cfg = base_cfg.clone();
        cfg.target_fraction = fraction;
        let data = make_adaptation_split(
            corpus,
            target_domain,
            fraction,
            cfg.dev_fraction,
            cfg.seed,
            test,
        )?;
        let n_target = data.target_train.len();
        let beam = cfg.hp.beam;
        let strategy = cfg.strategy;
        let trainer = Trainer::new(cfg, &data, embeddings_text)?;
        let outcome = trainer.run(None)?;
        let eval_set: Vec<Prepared> = if data.target_test.is_empty() {
            trainer.dev.clone()
        } else {
            trainer.prepare_set(&data.target_test, false)?
        };
        let (report, _) = evaluate(
            &trainer.model,
            &outcome.store,
            strategy,
            &eval_set,
            beam,
            &data.domains,
        )?;
        rows.push(SweepRow {
            fraction,
            n_target,
            sketch_em: report.sketch_em,
            lf_em: report.lf_em,
        });
    }
    Ok(rows)
}

/// Convenience for tests and the CLI: prepare arbitrary instances with a
/// trainer's frozen vocabularies and share table.
impl Trainer {
    pub fn prepare_set(
        &self,
        instances: &[Instance],
        is_source: bool,
    ) -> std::result::Result<Vec<Prepared>, ModelError> {
        instances
            .iter()
            .map(|inst| {
                prepare_instance(
                    inst,
                    is_source,
                    &self.domains[inst.domain],
                    &self.cfg,
                    &self.shares,
                    &self.model.utt_vocab,
                    &self.model.lf_vocab,
                    &self.model.sketch_vocab,
                    &self.pretrained,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ch_hand_case_is_32() {
        let points = vec![vec![0.0], vec![1.0], vec![4.0], vec![5.0]];
        let labels = vec![0, 0, 1, 1];
        let ch = calinski_harabasz(&points, &labels).unwrap();
        assert_eq!(ch, 32.0);
    }

    #[test]
    fn ch_invariances() {
        let points: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i * 37 % 11) as f64, (i * 13 % 7) as f64])
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let base = calinski_harabasz(&points, &labels).unwrap();
        let shifted: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|v| v + 10.0).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|v| v * 2.5).collect())
            .collect();
        let relabeled: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
        // relabeling that permutes cluster ids but keeps the partition
        let perm: Vec<usize> = labels.iter().map(|&l| [2, 0, 1][l]).collect();
        assert!((calinski_harabasz(&shifted, &labels).unwrap() - base).abs() < 1e-9 * base);
        assert!((calinski_harabasz(&scaled, &labels).unwrap() - base).abs() < 1e-9 * base);
        let _ = relabeled;
        assert!((calinski_harabasz(&points, &perm).unwrap() - base).abs() < 1e-12 * base);
    }

    #[test]
    fn ch_degenerate_inputs_error() {
        assert!(calinski_harabasz(&[vec![0.0], vec![1.0]], &[0, 0]).is_err());
        assert!(calinski_harabasz(&[vec![0.0], vec![1.0]], &[0, 1]).is_err()); // n ≤ k
        assert!(
            calinski_harabasz(&[vec![0.0], vec![0.0], vec![1.0]], &[0, 0, 2]).is_err(),
            "empty cluster id 1"
        );
        assert!(
            calinski_harabasz(&[vec![1.0], vec![1.0], vec![2.0], vec![2.0]], &[0, 0, 1, 1])
                .is_err(),
            "W = 0"
        );
    }

    #[test]
    fn ch_matches_reference_formula_on_random_data() {
        // Independent re-derivation with a different accumulation order.
        fn reference(points: &[Vec<f64>], labels: &[usize]) -> f64 {
            let n = points.len();
            let k = labels.iter().max().unwrap() + 1;
            let d = points[0].len();
            let mut w = 0.0;
            let mut b = 0.0;
            let grand: Vec<f64> = (0..d)
                .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
                .collect();
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                let centroid: Vec<f64> = (0..d)
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                b += members.len() as f64
                    * centroid
                        .iter()
                        .zip(&grand)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>();
                for p in members {
                    w += p
                        .iter()
                        .zip(&centroid)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>();
                }
            }
            (b / (k as f64 - 1.0)) / (w / ((n - k) as f64))
        }
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = rng.gen_range(6..40);
            let d = rng.gen_range(1..6);
            let k = rng.gen_range(2..4.min(n - 1));
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            // guarantee every cluster non-empty
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let ours = calinski_harabasz(&points, &labels).unwrap();
            let theirs = reference(&points, &labels);
            assert!((ours - theirs).abs() <= 1e-9 * theirs.abs().max(1.0));
        }
    }
}
