//! Beam-search inference: unconstrained coarse decoding of a sketch, then
//! fine decoding constrained to the sketch skeleton with input switching.
//!
//! Scores are sums of token log-probabilities (including the closing EOS)
//! with no length normalisation; score ties break toward the lower token
//! index at expansion time.

use crate::config::Strategy;
use crate::corpus::{BOS, EOS, PAD};
use crate::model::{
    DecStateV, InferStage, InputSrc, Model, ModelError, StepOutput,
};
use crate::numerics::ParameterStore;
use crate::sketchlang::{Sketch, SketchToken};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("beam search produced no hypotheses")]
    NoHypothesis,
}

pub type Result<T> = std::result::Result<T, InferError>;

/// One position of a constrained decoding plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStep {
    /// The token at this position is fixed by the sketch skeleton.
    Forced(usize),
    /// Free slot: any vocabulary token may fill it.
    Free,
}

/// A finished beam hypothesis: output token ids (EOS excluded) and the
/// summed log-probability including the EOS step.
#[derive(Debug, Clone)]
pub struct ScoredSeq {
    pub tokens: Vec<usize>,
    pub score: f64,
}

struct Beam<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    prev: Option<usize>,
}

/// Plan-aware beam search.  `step` maps (state, previous token, step index)
/// to per-token log-probabilities and the successor state.  With a plan the
/// output length is exactly `plan.len()` and an EOS step closes every
/// hypothesis; without one, EOS (or `max_len`) terminates a hypothesis.
pub fn beam_search<S: Clone, F>(
    init: S,
    beam_width: usize,
    max_len: usize,
    plan: Option<&[PlanStep]>,
    mut step: F,
) -> Result<Vec<ScoredSeq>>
where
    F: FnMut(&S, Option<usize>, usize) -> Result<(Vec<f64>, S)>,
{
    let beam_width = beam_width.max(1);
    let mut live = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        state: init,
        prev: None,
    }];
    let mut finished: Vec<ScoredSeq> = Vec::new();

    let mut t = 0;
    while !live.is_empty() {
        let planned = plan.map(|p| p.get(t).copied());
        if planned == Some(None) || (plan.is_none() && t >= max_len) {
            // Plan exhausted (or length cap hit): close out every live
            // hypothesis, charging the EOS step when a plan fixed the length.
            for b in live.drain(..) {
                let score = if plan.is_some() {
                    let (lp, _) = step(&b.state, b.prev, t)?;
                    b.score + lp[EOS]
                } else {
                    b.score
                };
                finished.push(ScoredSeq {
                    tokens: b.tokens,
                    score,
                });
            }
            break;
        }

        // (beam index, token, score); states are kept per live beam.
        let mut stepped: Vec<S> = Vec::with_capacity(live.len());
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (i, b) in live.iter().enumerate() {
            let (lp, st) = step(&b.state, b.prev, t)?;
            stepped.push(st);
            match planned.flatten() {
                Some(PlanStep::Forced(tok)) => cands.push((i, tok, b.score + lp[tok])),
                Some(PlanStep::Free) => {
                    for (tok, &l) in lp.iter().enumerate() {
                        if tok == PAD || tok == BOS || tok == EOS {
                            continue; // fixed-length slot: EOS is not a filler
                        }
                        cands.push((i, tok, b.score + l));
                    }
                }
                None => {
                    for (tok, &l) in lp.iter().enumerate() {
                        if tok == PAD || tok == BOS {
                            continue;
                        }
                        cands.push((i, tok, b.score + l));
                    }
                }
            }
        }
        cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });

        let mut next = Vec::with_capacity(beam_width);
        for (i, tok, score) in cands.into_iter().take(beam_width) {
            if tok == EOS {
                finished.push(ScoredSeq {
                    tokens: live[i].tokens.clone(),
                    score,
                });
                continue;
            }
            let mut tokens = live[i].tokens.clone();
            tokens.push(tok);
            next.push(Beam {
                tokens,
                score,
                state: stepped[i].clone(),
                prev: Some(tok),
            });
        }
        live = next;
        t += 1;
    }

    if finished.is_empty() {
        return Err(InferError::NoHypothesis);
    }
    finished.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.tokens.cmp(&b.tokens))
    });
    Ok(finished)
}

/// A parsed utterance: predicted sketch, logical form, and beam diagnostics.
#[derive(Debug, Clone)]
pub struct ParseOutput {
    pub sketch: Vec<String>,
    pub sketch_score: f64,
    pub logical_form: Vec<String>,
    pub score: f64,
    /// Fine decoding ran unconstrained because the predicted sketch was
    /// empty/unusable (or the parser was configured that way).
    pub used_fallback: bool,
    /// Remaining fine-beam hypotheses, best first.
    pub beam: Vec<(Vec<String>, f64)>,
}

/// Forward-only two-stage parser over a trained parameter store.
pub struct Parser<'a> {
    pub model: &'a Model,
    pub store: &'a ParameterStore,
    pub strategy: Strategy,
    /// Feed domain-relevance priors into attention (DAMP modes).
    pub use_prior: bool,
    pub beam: usize,
    /// Decode the fine stage without the sketch-derived plan.
    pub unconstrained_fine: bool,
}

impl<'a> Parser<'a> {
    pub fn new(model: &'a Model, store: &'a ParameterStore, strategy: Strategy) -> Parser<'a> {
        Parser {
            model,
            store,
            strategy,
            use_prior: matches!(strategy, Strategy::Damp | Strategy::GradReversal),
            beam: model.hp.beam,
            unconstrained_fine: model.hp.unconstrained_fine,
        }
    }

    /// Priors are computed over the full utterance; clip them to the
    /// (possibly truncated) encoded length.
    fn qc<'b>(&self, q: Option<&'b [f64]>, len: usize) -> Option<&'b [f64]> {
        if self.use_prior {
            q.map(|q| &q[..q.len().min(len)])
        } else {
            None
        }
    }

    /// Parse an utterance end to end. Prior vectors, when supplied, must be
    /// aligned to the (possibly truncated) utterance positions.
    pub fn parse(
        &self,
        utterance: &[String],
        q_coarse: Option<&[f64]>,
        q_fine: Option<&[f64]>,
    ) -> Result<ParseOutput> {
        if self.strategy == Strategy::Seq2Seq {
            return self.parse_s2s(utterance);
        }
        let (sketch_tokens, sketch_score) = self.decode_sketch(utterance, q_coarse)?;
        let sketch = Sketch::from_surface(&sketch_tokens);
        self.finish_fine(utterance, &sketch, sketch_score, q_fine)
    }

    /// Fine decoding against a given (gold) sketch; used for oracle and
    /// pretrain/fine-tune style evaluation.
    pub fn parse_with_sketch(
        &self,
        utterance: &[String],
        sketch: &Sketch,
        q_fine: Option<&[f64]>,
    ) -> Result<ParseOutput> {
        self.finish_fine(utterance, sketch, 0.0, q_fine)
    }

    /// Coarse stage only: the best sketch surfaces with their score.
    pub fn decode_sketch(
        &self,
        utterance: &[String],
        q_coarse: Option<&[f64]>,
    ) -> Result<(Vec<String>, f64)> {
        let utt_ids = self.truncate_ids(utterance);
        let run = self
            .model
            .encode_infer(self.store, "enc1", "emb.utt", &utt_ids, None)?;
        let init = self.model.init_state_infer(self.store, "dec_c", &run)?;
        let q = self.qc(q_coarse, utt_ids.len());
        let hyps = beam_search(
            init,
            self.beam,
            self.model.hp.max_lf_len,
            None,
            |st: &DecStateV, prev, _t| {
                let input = match prev {
                    Some(id) => InputSrc::Embed(id),
                    None => InputSrc::Bos,
                };
                let out = self.model.step_infer(
                    self.store,
                    InferStage::Coarse,
                    &run,
                    None,
                    q,
                    st,
                    &input,
                )?;
                Ok((out.log_probs, out.state))
            },
        )?;
        let best = &hyps[0];
        Ok((
            best.tokens
                .iter()
                .map(|&id| self.model.sketch_vocab.token(id).to_string())
                .collect(),
            best.score,
        ))
    }

    fn finish_fine(
        &self,
        utterance: &[String],
        sketch: &Sketch,
        sketch_score: f64,
        q_fine: Option<&[f64]>,
    ) -> Result<ParseOutput> {
        let utt_ids = self.truncate_ids(utterance);
        let run = self
            .model
            .encode_infer(self.store, "enc2", "emb.utt", &utt_ids, None)?;
        let surfaces = sketch.surface();
        let sketch_ids = self.model.sketch_vocab.encode(&surfaces);
        // An empty predicted sketch still needs a sketch memory so the fine
        // decoder's feature layout stays fixed; encode a lone EOS.
        let enc3_ids: &[usize] = if sketch_ids.is_empty() {
            &[EOS]
        } else {
            &sketch_ids
        };
        let sketch_run = Some(self.model.encode_infer(
            self.store,
            "enc3",
            "emb.sketch",
            enc3_ids,
            None,
        )?);
        let init = self.model.init_state_infer(self.store, "dec_f", &run)?;
        let q = self.qc(q_fine, utt_ids.len());

        // Constrained plan from the skeleton: forced plain/head tokens with
        // their surfaces, free placeholder slots, and the input-switching
        // source each produced position provides to the next step.
        let mut plan: Vec<PlanStep> = Vec::new();
        let mut surface_of: Vec<Option<String>> = Vec::new();
        // Some(j): position was forced from sketch token j, so the next
        // step's input is the sketch encoding s^f_j; None: embed the token.
        let mut feeds: Vec<Option<usize>> = Vec::new();
        for (j, tok) in sketch.tokens.iter().enumerate() {
            match tok {
                SketchToken::Plain(t) => {
                    plan.push(PlanStep::Forced(self.model.lf_vocab.id(t)));
                    surface_of.push(Some(t.clone()));
                    feeds.push(Some(j));
                }
                SketchToken::Placeholder { head, k } => {
                    if head != "hole" {
                        plan.push(PlanStep::Forced(self.model.lf_vocab.id(head)));
                        surface_of.push(Some(head.clone()));
                        feeds.push(Some(j));
                    }
                    for _ in 0..*k {
                        plan.push(PlanStep::Free);
                        surface_of.push(None);
                        feeds.push(None);
                    }
                }
            }
        }

        let fallback = self.unconstrained_fine || plan.is_empty();
        let hyps = beam_search(
            init,
            self.beam,
            self.model.hp.max_lf_len,
            if fallback { None } else { Some(&plan) },
            |st: &DecStateV, prev, t| {
                let input = if t == 0 {
                    InputSrc::Bos
                } else if fallback {
                    InputSrc::Embed(prev.expect("non-initial step has a token"))
                } else {
                    match feeds[t - 1] {
                        Some(j) => InputSrc::SketchPos(j),
                        None => InputSrc::Embed(prev.expect("non-initial step has a token")),
                    }
                };
                let out = self.model.step_infer(
                    self.store,
                    InferStage::Fine,
                    &run,
                    sketch_run.as_ref(),
                    q,
                    st,
                    &input,
                )?;
                Ok((out.log_probs, out.state))
            },
        )?;

        let decode = |seq: &ScoredSeq| -> Vec<String> {
            seq.tokens
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    if !fallback {
                        if let Some(Some(s)) = surface_of.get(i) {
                            return s.clone();
                        }
                    }
                    self.model.lf_vocab.token(id).to_string()
                })
                .collect()
        };
        let best = &hyps[0];
        Ok(ParseOutput {
            sketch: surfaces,
            sketch_score,
            logical_form: decode(best),
            score: best.score,
            used_fallback: fallback,
            beam: hyps.iter().skip(1).map(|h| (decode(h), h.score)).collect(),
        })
    }

    fn parse_s2s(&self, utterance: &[String]) -> Result<ParseOutput> {
        let utt_ids = self.truncate_ids(utterance);
        let run = self
            .model
            .encode_infer(self.store, "enc1", "emb.utt", &utt_ids, None)?;
        let init = self.model.init_state_infer(self.store, "dec_s", &run)?;
        let hyps = beam_search(
            init,
            self.beam,
            self.model.hp.max_lf_len,
            None,
            |st: &DecStateV, prev, _t| {
                let input = match prev {
                    Some(id) => InputSrc::Embed(id),
                    None => InputSrc::Bos,
                };
                let out = self.model.step_infer(
                    self.store,
                    InferStage::Seq2Seq,
                    &run,
                    None,
                    None,
                    st,
                    &input,
                )?;
                Ok((out.log_probs, out.state))
            },
        )?;
        let decode = |h: &ScoredSeq| self.model.lf_vocab.decode(&h.tokens);
        let best = &hyps[0];
        Ok(ParseOutput {
            sketch: Vec::new(),
            sketch_score: 0.0,
            logical_form: decode(best),
            score: best.score,
            used_fallback: false,
            beam: hyps.iter().skip(1).map(|h| (decode(h), h.score)).collect(),
        })
    }

    /// Per-step attention rows of one coarse greedy decode, for inspection.
    pub fn coarse_attention_trace(
        &self,
        utterance: &[String],
        q_coarse: Option<&[f64]>,
    ) -> Result<Vec<StepOutput>> {
        let utt_ids = self.truncate_ids(utterance);
        let run = self
            .model
            .encode_infer(self.store, "enc1", "emb.utt", &utt_ids, None)?;
        let mut st = self.model.init_state_infer(self.store, "dec_c", &run)?;
        let q = self.qc(q_coarse, utt_ids.len());
        let mut trace = Vec::new();
        let mut prev: Option<usize> = None;
        for _ in 0..self.model.hp.max_lf_len {
            let input = match prev {
                Some(id) => InputSrc::Embed(id),
                None => InputSrc::Bos,
            };
            let out =
                self.model
                    .step_infer(self.store, InferStage::Coarse, &run, None, q, &st, &input)?;
            let best = argmax_skip_reserved(&out.log_probs);
            st = out.state.clone();
            prev = Some(best);
            trace.push(out);
            if best == EOS {
                break;
            }
        }
        Ok(trace)
    }

    fn truncate_ids(&self, utterance: &[String]) -> Vec<usize> {
        let mut ids = self.model.utt_vocab.encode(utterance);
        ids.truncate(self.model.hp.max_utterance_len.max(1));
        ids
    }
}

/// Greedy pick ignoring PAD/BOS; EOS stays eligible so decoding terminates.
fn argmax_skip_reserved(log_probs: &[f64]) -> usize {
    let mut best = EOS;
    let mut best_lp = f64::NEG_INFINITY;
    for (tok, &lp) in log_probs.iter().enumerate() {
        if tok == PAD || tok == BOS {
            continue;
        }
        if lp > best_lp {
            best = tok;
            best_lp = lp;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    // A stateless toy scorer: log-prob table per step, independent of state.
    fn table_step(
        tables: Vec<Vec<f64>>,
    ) -> impl FnMut(&(), Option<usize>, usize) -> Result<(Vec<f64>, ())> {
        move |_, _, t| {
            let row = tables[t.min(tables.len() - 1)].clone();
            Ok((row.iter().map(|p| p.ln()).collect(), ()))
        }
    }

    #[test]
    fn greedy_path_wins_unconstrained() {
        // vocab: PAD BOS EOS a b; step 0 favours a, step 1 favours EOS
        let step = table_step(vec![
            vec![1e-9, 1e-9, 0.1, 0.7, 0.2],
            vec![1e-9, 1e-9, 0.8, 0.1, 0.1],
        ]);
        let hyps = beam_search((), 3, 10, None, step).unwrap();
        assert_eq!(hyps[0].tokens, vec![3]);
        let expect = (0.7f64).ln() + (0.8f64).ln();
        assert!((hyps[0].score - expect).abs() < 1e-12);
    }

    #[test]
    fn beam_outscores_greedy_when_mass_shifts() {
        // Greedy takes token 3 (0.5) then is stuck with 0.1 EOS; the
        // runner-up token 4 (0.45) leads to 0.9 EOS and wins overall.
        // the state records which token was chosen first
        let step = |_s: &usize, prev: Option<usize>, t: usize| -> Result<(Vec<f64>, usize)> {
            let row: Vec<f64> = match (t, prev.unwrap_or(0)) {
                (0, _) => vec![1e-9, 1e-9, 1e-9, 0.5, 0.45],
                (_, 3) => vec![1e-9, 1e-9, 0.1, 0.45, 0.45],
                _ => vec![1e-9, 1e-9, 0.9, 0.05, 0.05],
            };
            Ok((
                row.iter().map(|p| p.ln()).collect(),
                prev.unwrap_or(0),
            ))
        };
        let hyps = beam_search(0usize, 2, 4, None, step).unwrap();
        assert_eq!(hyps[0].tokens, vec![4]);
        let hyp_greedy = hyps.iter().find(|h| h.tokens == vec![3]);
        assert!(hyp_greedy.is_none() || hyp_greedy.unwrap().score < hyps[0].score);
    }

    #[test]
    fn ties_break_to_lower_token_index() {
        let step = table_step(vec![
            vec![1e-9, 1e-9, 1e-9, 0.5, 0.5],
            vec![1e-9, 1e-9, 1.0, 1e-9, 1e-9],
        ]);
        let hyps = beam_search((), 1, 4, None, step).unwrap();
        assert_eq!(hyps[0].tokens, vec![3]);
    }

    #[test]
    fn forced_plan_fixes_skeleton_and_length() {
        // Plan: Forced(4), Free, then EOS closes. Token 4 has tiny
        // probability but must appear anyway.
        let step = table_step(vec![
            vec![1e-9, 1e-9, 1e-9, 0.9, 0.1],
            vec![1e-9, 1e-9, 1e-9, 0.3, 0.7],
            vec![1e-9, 1e-9, 0.6, 0.2, 0.2],
        ]);
        let plan = vec![PlanStep::Forced(4), PlanStep::Free];
        let hyps = beam_search((), 2, 10, Some(&plan), step).unwrap();
        for h in &hyps {
            assert_eq!(h.tokens.len(), 2);
            assert_eq!(h.tokens[0], 4);
        }
        assert_eq!(hyps[0].tokens, vec![4, 4]);
        let expect = (0.1f64).ln() + (0.7f64).ln() + (0.6f64).ln();
        assert!((hyps[0].score - expect).abs() < 1e-12);
    }

    #[test]
    fn free_slots_never_emit_eos() {
        let step = table_step(vec![vec![1e-9, 1e-9, 0.98, 0.01, 0.01]]);
        let plan = vec![PlanStep::Free];
        let hyps = beam_search((), 3, 10, Some(&plan), step).unwrap();
        for h in &hyps {
            assert_eq!(h.tokens.len(), 1);
            assert_ne!(h.tokens[0], EOS);
        }
    }

    #[test]
    fn max_len_terminates_without_eos() {
        // EOS never competitive; hypotheses must still finish at max_len.
        let step = table_step(vec![vec![1e-9, 1e-9, 1e-12, 0.5, 0.5]]);
        let hyps = beam_search((), 2, 3, None, step).unwrap();
        assert!(hyps.iter().all(|h| h.tokens.len() == 3));
    }
}
