//! Per-instance preprocessing: token ids, induced sketch, input-switching
//! plan, and cached relevance priors.

use super::{ModelError, Result};
use crate::config::TrainConfig;
use crate::corpus::{EmbeddingTable, Instance, Vocabulary, BOS};
use crate::relevance::{build_prior, domain_relevant_positions, Stage};
use crate::sketchlang::{Alignment, Sketch, TokenShareTable};

/// Where the fine decoder's input vector at one step comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSrc {
    /// Step 0: the BOS embedding.
    Bos,
    /// Previous output corresponds to sketch position k: the sketch
    /// encoding s^f_k (projected to input width).
    SketchPos(usize),
    /// Previous output filled a specific slot: its own embedding.
    Embed(usize),
}

/// One instance with everything the forward pass needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub domain: usize,
    pub is_source: bool,
    pub utt_ids: Vec<usize>,
    pub lf_ids: Vec<usize>,
    pub utterance: Vec<String>,
    pub logical_form: Vec<String>,
    pub sketch: Sketch,
    pub sketch_surface: Vec<String>,
    pub sketch_ids: Vec<usize>,
    pub alignment: Alignment,
    /// Input source for fine steps 0..=|Y| (the last step predicts EOS).
    pub switch: Vec<InputSrc>,
    pub q_coarse: Vec<f64>,
    pub q_fine: Vec<f64>,
}

/// Fine-decoder input plan derived from an alignment: step t's input is
/// decided by y_{t-1}.
pub fn switch_plan(lf_ids: &[usize], alignment: &Alignment) -> Vec<InputSrc> {
    let inverted = alignment.invert(lf_ids.len());
    let mut plan = Vec::with_capacity(lf_ids.len() + 1);
    plan.push(InputSrc::Bos);
    for t in 1..=lf_ids.len() {
        let (k, is_slot) = inverted[t - 1];
        if is_slot || k == usize::MAX {
            plan.push(InputSrc::Embed(lf_ids[t - 1]));
        } else {
            plan.push(InputSrc::SketchPos(k));
        }
    }
    plan
}

/// Builds the full training-time view of one instance: encodes tokens,
/// induces the sketch, aligns it, plans input switching, and caches both
/// stage priors from the frozen pretrained vectors.
#[allow(clippy::too_many_arguments)]
pub fn prepare_instance(
    inst: &Instance,
    is_source: bool,
    domain_name: &str,
    cfg: &TrainConfig,
    table: &TokenShareTable,
    utt_vocab: &Vocabulary,
    lf_vocab: &Vocabulary,
    sketch_vocab: &Vocabulary,
    pretrained: &EmbeddingTable,
) -> Result<Prepared> {
    let (sketch, alignment) = crate::sketchlang::induce_sketch(&inst.logical_form, |t| {
        crate::sketchlang::classify_token(t, table)
    });
    prepare_with_sketch(
        inst, is_source, domain_name, cfg, sketch, alignment, utt_vocab, lf_vocab, sketch_vocab,
        pretrained,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn prepare_with_sketch(
    inst: &Instance,
    is_source: bool,
    domain_name: &str,
    cfg: &TrainConfig,
    sketch: Sketch,
    alignment: Alignment,
    utt_vocab: &Vocabulary,
    lf_vocab: &Vocabulary,
    sketch_vocab: &Vocabulary,
    pretrained: &EmbeddingTable,
) -> Result<Prepared> {
    if alignment.covered_positions() != inst.logical_form.len() {
        return Err(ModelError::MissingPreparation);
    }
    let utt_ids = utt_vocab.encode(&inst.utterance);
    let lf_ids = lf_vocab.encode(&inst.logical_form);
    let sketch_surface = sketch.surface();
    let sketch_ids = sketch_vocab.encode(&sketch_surface);
    let switch = switch_plan(&lf_ids, &alignment);

    let relevant = domain_relevant_positions(
        &inst.utterance,
        domain_name,
        &cfg.query_words(domain_name),
        utt_vocab,
        pretrained,
        cfg.hp.k_relevant,
    )?;
    let q_coarse = build_prior(
        &relevant,
        inst.utterance.len(),
        Stage::Coarse,
        cfg.hp.r_coarse,
        cfg.hp.r_fine,
    )?
    .q;
    let q_fine = build_prior(
        &relevant,
        inst.utterance.len(),
        Stage::Fine,
        cfg.hp.r_coarse,
        cfg.hp.r_fine,
    )?
    .q;

    Ok(Prepared {
        domain: inst.domain,
        is_source,
        utt_ids,
        lf_ids,
        utterance: inst.utterance.clone(),
        logical_form: inst.logical_form.clone(),
        sketch,
        sketch_surface,
        sketch_ids,
        alignment,
        switch,
        q_coarse,
        q_fine,
    })
}

impl Prepared {
    /// Sanity marker used by tests: positions whose fine input is a plain
    /// embedding (specific slots).
    pub fn embed_input_steps(&self) -> Vec<usize> {
        self.switch
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, InputSrc::Embed(_)))
            .map(|(t, _)| t)
            .collect()
    }

    pub fn bos_id(_vocab: &Vocabulary) -> usize {
        BOS
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketchlang::{induce_sketch, TokenClass};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn calendar_plan_switches_embeddings_at_specific_slots() {
        let lf = toks("listValue ( countComparative ( getProperty ( singleton en.meeting ) ( string !type ) ) ( string attendee ) ( string >= ) ( number 2 ) )");
        let specific = ["en.meeting", "attendee", "2"];
        let (sketch, alignment) = induce_sketch(&lf, |t| {
            if specific.contains(&t) {
                TokenClass::Specific
            } else {
                TokenClass::General
            }
        });
        assert_eq!(sketch.placeholder_count(), 3);
        let lf_ids: Vec<usize> = (0..lf.len()).collect();
        let plan = switch_plan(&lf_ids, &alignment);
        // one input per step: |Y| + 1 (trailing EOS step)
        assert_eq!(plan.len(), lf.len() + 1);
        // embedding inputs exactly at the steps following the 3 specific tokens
        let specific_positions: Vec<usize> = lf
            .iter()
            .enumerate()
            .filter(|(_, t)| specific.contains(&t.as_str()))
            .map(|(i, _)| i + 1)
            .collect();
        let embed_steps: Vec<usize> = plan
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, InputSrc::Embed(_)))
            .map(|(t, _)| t)
            .collect();
        assert_eq!(embed_steps, specific_positions);
    }
}
