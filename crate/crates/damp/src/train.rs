//! Training loop over the adaptation strategies: global-shuffle mini-batches
//! of mixed source/target data, RMSProp updates, greedy per-epoch dev
//! evaluation, and early stopping on target-dev logical-form exact match.
//!
//! Every random draw is keyed to `(seed, epoch)` so that training resumed
//! from a checkpoint replays the uninterrupted run exactly.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::config::{Strategy, TrainConfig};
use crate::corpus::{
    embeddings_from_text, AdaptationDataset, Corpus, CorpusError, EmbeddingTable, Instance,
    Vocabulary,
};
use crate::infer::{InferError, Parser};
use crate::model::{prepare_instance, LossBreakdown, LossMode, Model, ModelError, Prepared};
use crate::numerics::{fnv1a, Graph, NumericsError, ParameterStore, RmsPropConfig, Tensor};
use crate::sketchlang::{compute_token_shares, exact_match, TokenShareTable};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("target domain has no training instances")]
    EmptyTargetTrain,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub dev_sketch_em: f64,
    pub dev_lf_em: f64,
    /// 1 everywhere except pretrain_finetune's fine-tuning pass (2).
    pub phase: usize,
    /// Source/target instances that contributed gradients this epoch.
    pub n_source: usize,
    pub n_target: usize,
}

pub const LOG_HEADER: &str =
    "epoch\tcoarse_ce\tcoarse_disc\tfine_ce\tfine_disc\tdev_sketch_em\tdev_lf_em\tphase\tn_source\tn_target";

impl EpochLog {
    pub fn tsv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            b.coarse_ce,
            b.coarse_disc,
            b.fine_ce,
            b.fine_disc,
            self.dev_sketch_em,
            self.dev_lf_em,
            self.phase,
            self.n_source,
            self.n_target
        )
    }
}

/// Serialises the log as TSV (atomic write).
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.tsv_row());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Temp-file-plus-rename write; no partial output is ever visible.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let err = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

/// Result of a training run: the best checkpoint by target-dev LF EM, the
/// final parameter state (for resuming), and the per-epoch log.
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub final_store: ParameterStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_lf_em: f64,
    /// Epoch index the next resumed run would start from.
    pub epochs_run: usize,
}

/// Owns the immutable training context: prepared instances, vocabularies,
/// pretrained vectors, and the strategy's loss mode.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub domains: Vec<String>,
    pub model: Model,
    pub mode: LossMode,
    pub shares: TokenShareTable,
    pub pretrained: EmbeddingTable,
    pub train: Vec<Prepared>,
    pub dev: Vec<Prepared>,
}

impl Trainer {
    /// Prepares sketches, vocabularies, priors, and embeddings for a split.
    /// `embeddings_text` is the raw pretrained-vector file, if any.
    pub fn new(
        cfg: TrainConfig,
        data: &AdaptationDataset,
        embeddings_text: Option<&str>,
    ) -> Result<Trainer> {
        if data.target_train.is_empty() {
            return Err(TrainError::EmptyTargetTrain);
        }
        let shares = compute_token_shares(&source_corpus(data));

        let all_train: Vec<&Instance> =
            data.source_train.iter().chain(&data.target_train).collect();
        let utt_vocab = Vocabulary::build(all_train.iter().map(|i| i.utterance.as_slice()), 1);
        let lf_vocab = Vocabulary::build(all_train.iter().map(|i| i.logical_form.as_slice()), 1);
        let sketches = crate::sketchlang::induce_for_instances(all_train.iter().copied(), &shares);
        let surfaces: Vec<Vec<String>> = sketches.iter().map(|(s, _)| s.surface()).collect();
        let sketch_vocab = Vocabulary::build(surfaces.iter().map(|s| s.as_slice()), 1);

        let pretrained = embeddings_from_text(
            embeddings_text.unwrap_or(""),
            "<builtin>",
            &utt_vocab,
            cfg.hp.embedding_dim,
            cfg.seed,
        )?;

        let prep = |inst: &Instance, is_source: bool| -> Result<Prepared> {
            Ok(prepare_instance(
                inst,
                is_source,
                &data.domains[inst.domain],
                &cfg,
                &shares,
                &utt_vocab,
                &lf_vocab,
                &sketch_vocab,
                &pretrained,
            )?)
        };
        let mut train = Vec::new();
        for inst in &data.source_train {
            train.push(prep(inst, true)?);
        }
        for inst in &data.target_train {
            train.push(prep(inst, false)?);
        }
        let mut dev = Vec::new();
        for inst in &data.target_dev {
            dev.push(prep(inst, false)?);
        }

        let mode = LossMode::for_strategy(cfg.strategy, &cfg.hp);
        let model = Model::new(cfg.hp.clone(), utt_vocab, lf_vocab, sketch_vocab);
        Ok(Trainer {
            cfg,
            domains: data.domains.clone(),
            model,
            mode,
            shares,
            pretrained,
            train,
            dev,
        })
    }

    /// Runs training from a fresh init or an existing `(store, epoch)`
    /// checkpoint. pretrain_finetune runs `epochs` source-only epochs
    /// (phase 1), then `epochs` target-only epochs (phase 2); patience
    /// applies only in the final phase.
    pub fn run(&self, init: Option<(ParameterStore, usize)>) -> Result<TrainOutcome> {
        let strategy = self.cfg.strategy;
        let two_phase = strategy == Strategy::PretrainFinetune;
        let total_epochs = if two_phase {
            2 * self.cfg.epochs
        } else {
            self.cfg.epochs
        };
        let (mut store, start_epoch) = match init {
            Some((s, e)) => (s, e),
            None => (
                self.model
                    .init_params(self.cfg.seed, strategy, Some(&self.pretrained)),
                0,
            ),
        };

        let mut log = Vec::new();
        let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
        let mut since_best = 0usize;
        let mut next_epoch = start_epoch;
        for epoch in start_epoch..total_epochs {
            let phase = if two_phase && epoch < self.cfg.epochs {
                1
            } else if two_phase {
                2
            } else {
                1
            };
            let pool: Vec<&Prepared> = match (two_phase, phase) {
                (true, 1) => self.train.iter().filter(|p| p.is_source).collect(),
                (true, _) => self.train.iter().filter(|p| !p.is_source).collect(),
                _ => self.train.iter().collect(),
            };
            let (breakdown, n_source, n_target) = self.run_epoch(&mut store, epoch, &pool)?;
            let (dev_sketch_em, dev_lf_em) = self.dev_eval(&store)?;
            log.push(EpochLog {
                epoch,
                breakdown,
                dev_sketch_em,
                dev_lf_em,
                phase,
                n_source,
                n_target,
            });
            next_epoch = epoch + 1;

            if best.as_ref().map_or(true, |(b, _, _)| dev_lf_em > *b) {
                best = Some((dev_lf_em, epoch, store.export()));
                since_best = 0;
            } else if !(two_phase && phase == 1) {
                since_best += 1;
                if since_best >= self.cfg.patience {
                    break;
                }
            }
            if two_phase && next_epoch == self.cfg.epochs {
                since_best = 0; // fresh patience budget for fine-tuning
            }
        }

        let (best_dev_lf_em, best_epoch, tensors) = match best {
            Some(b) => b,
            None => (0.0, start_epoch, store.export()),
        };
        Ok(TrainOutcome {
            store: ParameterStore::import(self.cfg.seed, tensors),
            final_store: store,
            log,
            best_epoch,
            best_dev_lf_em,
            epochs_run: next_epoch,
        })
    }

    /// One pass over `pool` in a seeded shuffle, updating `store` in place.
    /// Returns the instance-weighted mean loss breakdown and the number of
    /// source/target instances that contributed.
    fn run_epoch(
        &self,
        store: &mut ParameterStore,
        epoch: usize,
        pool: &[&Prepared],
    ) -> Result<(LossBreakdown, usize, usize)> {
        let seed = self.cfg.seed;
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng =
            ChaCha20Rng::seed_from_u64(seed ^ fnv1a(format!("shuffle/{epoch}").as_bytes()));
        order.shuffle(&mut rng);

        let rms = RmsPropConfig {
            lr: self.cfg.hp.lr,
            decay: self.cfg.hp.rmsprop_decay,
            eps: 1e-8,
            l2: self.cfg.hp.l2,
            clip_norm: self.cfg.hp.clip_norm,
        };
        let mut sums = LossBreakdown::default();
        let mut n_source = 0;
        let mut n_target = 0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(self.cfg.hp.batch_size.max(1)).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| pool[i]).collect();
            let dropout_seed =
                seed ^ fnv1a(format!("dropout/{epoch}/{batch_no}").as_bytes());
            let mut g = Graph::new(true, dropout_seed);
            let losses = self.model.forward_losses(&mut g, store, &batch, &self.mode)?;
            store.zero_grads();
            g.backward_into(losses.total, store)?;
            store.rmsprop_step(&rms);

            let w = batch.len() as f64;
            let b = losses.breakdown;
            sums.coarse_ce += w * b.coarse_ce;
            sums.coarse_disc += w * b.coarse_disc;
            sums.l_coarse += w * b.l_coarse;
            sums.fine_ce += w * b.fine_ce;
            sums.fine_disc += w * b.fine_disc;
            sums.l_fine += w * b.l_fine;
            seen += batch.len();
            n_source += batch.iter().filter(|p| p.is_source).count();
            n_target += batch.iter().filter(|p| !p.is_source).count();
        }
        if seen > 0 {
            let inv = 1.0 / seen as f64;
            sums.coarse_ce *= inv;
            sums.coarse_disc *= inv;
            sums.l_coarse *= inv;
            sums.fine_ce *= inv;
            sums.fine_disc *= inv;
            sums.l_fine *= inv;
        }
        Ok((sums, n_source, n_target))
    }

    /// Greedy (beam 1) sketch and logical-form EM over prepared instances.
    pub fn greedy_em(&self, store: &ParameterStore, set: &[Prepared]) -> Result<(f64, f64)> {
        if set.is_empty() {
            return Ok((0.0, 0.0));
        }
        let mut parser = Parser::new(&self.model, store, self.cfg.strategy);
        parser.beam = 1;
        let mut sk_hits = 0usize;
        let mut lf_hits = 0usize;
        for p in set {
            let out = parser.parse(&p.utterance, Some(&p.q_coarse), Some(&p.q_fine))?;
            if exact_match(&out.sketch, &p.sketch_surface) {
                sk_hits += 1;
            }
            if exact_match(&out.logical_form, &p.logical_form) {
                lf_hits += 1;
            }
        }
        let n = set.len() as f64;
        Ok((sk_hits as f64 / n, lf_hits as f64 / n))
    }

    fn dev_eval(&self, store: &ParameterStore) -> Result<(f64, f64)> {
        self.greedy_em(store, &self.dev)
    }
}

/// Source-only view of the split, for share counting: domains that are not
/// the target, with their training instances.
fn source_corpus(data: &AdaptationDataset) -> Corpus {
    let mut domains = Vec::new();
    let mut by_domain: Vec<Vec<Instance>> = Vec::new();
    let mut map = vec![usize::MAX; data.domains.len()];
    for (id, name) in data.domains.iter().enumerate() {
        if id == data.target_domain {
            continue;
        }
        map[id] = domains.len();
        domains.push(name.clone());
        by_domain.push(Vec::new());
    }
    for inst in &data.source_train {
        by_domain[map[inst.domain]].push(inst.clone());
    }
    Corpus { domains, by_domain }
}
