//! Domain-adversarial loss terms and the per-batch loss breakdown.

use crate::config::{Hyperparams, Strategy};

/// Mean positive log-likelihood of the domain classifier:
/// `(1/N)(Σ_source log p + Σ_target log(1-p))`. Descending on this degrades
/// discrimination (the confusion objective).
pub fn confusion_loss(probs: &[f64], is_source: &[bool]) -> f64 {
    assert_eq!(probs.len(), is_source.len());
    if probs.is_empty() {
        return 0.0;
    }
    let sum: f64 = probs
        .iter()
        .zip(is_source)
        .map(|(&p, &s)| if s { p.ln() } else { (1.0 - p).ln() })
        .sum();
    sum / probs.len() as f64
}

/// Standard negative log-likelihood: exactly `-confusion_loss`.
pub fn discrimination_loss(probs: &[f64], is_source: &[bool]) -> f64 {
    -confusion_loss(probs, is_source)
}

/// How a stage's discriminator head enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adv {
    /// No adversarial term.
    None,
    /// Positive log-likelihood flowing into all stage parameters.
    Confusion,
    /// Negative log-likelihood (conventional descent).
    Discrimination,
    /// NLL on a gradient-reversed pooled representation.
    Reversal,
}

/// Resolved loss configuration for one strategy.
#[derive(Debug, Clone)]
pub struct LossMode {
    pub strategy: Strategy,
    pub use_prior: bool,
    pub coarse_adv: Adv,
    pub fine_adv: Adv,
    pub lambda_c: f64,
    pub lambda_f: f64,
    /// Restrict the fine-stage loss to target-domain instances.
    pub fine_on_target_only: bool,
}

impl LossMode {
    pub fn for_strategy(strategy: Strategy, hp: &Hyperparams) -> LossMode {
        match strategy {
            Strategy::Damp => LossMode {
                strategy,
                use_prior: true,
                coarse_adv: if hp.reverse_grad_discriminator {
                    Adv::Reversal
                } else {
                    Adv::Confusion
                },
                fine_adv: Adv::Discrimination,
                lambda_c: hp.lambda_coarse,
                lambda_f: hp.lambda_fine,
                fine_on_target_only: false,
            },
            Strategy::GradReversal => LossMode {
                strategy,
                use_prior: false,
                coarse_adv: Adv::Reversal,
                fine_adv: Adv::Reversal,
                lambda_c: hp.lambda_coarse,
                lambda_f: hp.lambda_fine,
                fine_on_target_only: false,
            },
            Strategy::ParamShare => LossMode {
                strategy,
                use_prior: false,
                coarse_adv: Adv::None,
                fine_adv: Adv::None,
                lambda_c: 0.0,
                lambda_f: 0.0,
                fine_on_target_only: true,
            },
            Strategy::Seq2Seq
            | Strategy::Coarse2FineMix
            | Strategy::PretrainFinetune => LossMode {
                strategy,
                use_prior: false,
                coarse_adv: Adv::None,
                fine_adv: Adv::None,
                lambda_c: 0.0,
                lambda_f: 0.0,
                fine_on_target_only: false,
            },
        }
    }
}

/// Scalar loss terms of one batch (means per instance).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub coarse_ce: f64,
    pub coarse_disc: f64,
    pub l_coarse: f64,
    pub fine_ce: f64,
    pub fine_disc: f64,
    pub l_fine: f64,
}

/// Node handles of one batch's losses.
pub struct BatchLosses {
    pub total: crate::numerics::NodeId,
    /// Stage losses L_c and L_f, when the stage ran.
    pub l_coarse: Option<crate::numerics::NodeId>,
    pub l_fine: Option<crate::numerics::NodeId>,
    pub breakdown: LossBreakdown,
}
