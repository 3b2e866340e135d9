use super::losses::{Adv, BatchLosses, LossBreakdown, LossMode};
use super::prepare::{InputSrc, Prepared};
use super::{ModelError, Result};
use crate::config::{Hyperparams, Strategy};
use crate::corpus::{EmbeddingTable, Vocabulary, BOS, EOS};
use crate::numerics::{
    bilstm_encode, lstm_cell, Graph, LstmParamNodes, NodeId, ParameterStore, Tensor,
};

const INIT_SCALE: f64 = 0.08;

/// The DAMP network over fixed vocabularies. Parameters live in a
/// [`ParameterStore`]; the model holds only structure.
#[derive(Debug, Clone)]
pub struct Model {
    pub hp: Hyperparams,
    pub utt_vocab: Vocabulary,
    pub lf_vocab: Vocabulary,
    pub sketch_vocab: Vocabulary,
}

/// How the prior-attention feature is computed at one step.
#[derive(Clone, Copy)]
pub enum AttnCfg<'a> {
    /// DAMP: pre-softmax scores reweighted elementwise by q.
    Prior(&'a [f64]),
    /// Vanilla coarse2fine: the prior context is plain attention.
    Vanilla,
    /// Single-context decoding (plain seq2seq): no prior feature at all.
    PlainOnly,
}

struct DecNodes {
    lstm: LstmParamNodes,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    sketch_in: Option<NodeId>,
}

struct StepNodes {
    dist: NodeId,
    h: NodeId,
    c: NodeId,
    alpha: NodeId,
    alpha_pri: NodeId,
    alpha_sketch: Option<NodeId>,
}

struct EncodedNodes {
    m: NodeId,
    states: Vec<NodeId>,
    final_fw: NodeId,
    final_bw: NodeId,
}

impl Model {
    pub fn new(
        hp: Hyperparams,
        utt_vocab: Vocabulary,
        lf_vocab: Vocabulary,
        sketch_vocab: Vocabulary,
    ) -> Model {
        Model {
            hp,
            utt_vocab,
            lf_vocab,
            sketch_vocab,
        }
    }

    /// Fresh parameters for the given strategy. Utterance embeddings are
    /// copied from the pretrained table when its width matches.
    pub fn init_params(
        &self,
        seed: u64,
        strategy: Strategy,
        pretrained: Option<&EmbeddingTable>,
    ) -> ParameterStore {
        let hp = &self.hp;
        let (e, dh, w) = (hp.embedding_dim, hp.dir_hidden(), hp.enc_width());
        let mut store = ParameterStore::new(seed);
        store.insert_uniform("emb.utt", self.utt_vocab.len(), e, INIT_SCALE);
        if let Some(table) = pretrained {
            if table.dim == e && table.matrix.rows == self.utt_vocab.len() {
                *store.value_mut("emb.utt").unwrap() = table.matrix.clone();
            }
        }
        LstmParamNodes::init(&mut store, "enc1.fw", e, dh, INIT_SCALE);
        LstmParamNodes::init(&mut store, "enc1.bw", e, dh, INIT_SCALE);

        if strategy == Strategy::Seq2Seq {
            store.insert_uniform("emb.lf", self.lf_vocab.len(), e, INIT_SCALE);
            LstmParamNodes::init(&mut store, "dec_s.lstm", e, w, INIT_SCALE);
            Self::init_proj(&mut store, "dec_s", w);
            store.insert_uniform("dec_s.fnn.W1", w, 2 * w, INIT_SCALE);
            store.insert_uniform("dec_s.fnn.b1", w, 1, INIT_SCALE);
            store.insert_uniform("dec_s.fnn.W2", self.lf_vocab.len(), w, INIT_SCALE);
            store.insert_uniform("dec_s.fnn.b2", self.lf_vocab.len(), 1, INIT_SCALE);
            return store;
        }

        store.insert_uniform("emb.lf", self.lf_vocab.len(), e, INIT_SCALE);
        store.insert_uniform("emb.sketch", self.sketch_vocab.len(), e, INIT_SCALE);
        LstmParamNodes::init(&mut store, "enc2.fw", e, dh, INIT_SCALE);
        LstmParamNodes::init(&mut store, "enc2.bw", e, dh, INIT_SCALE);
        LstmParamNodes::init(&mut store, "enc3.fw", e, dh, INIT_SCALE);
        LstmParamNodes::init(&mut store, "enc3.bw", e, dh, INIT_SCALE);

        LstmParamNodes::init(&mut store, "dec_c.lstm", e, w, INIT_SCALE);
        Self::init_proj(&mut store, "dec_c", w);
        store.insert_uniform("dec_c.fnn.W1", w, 3 * w, INIT_SCALE);
        store.insert_uniform("dec_c.fnn.b1", w, 1, INIT_SCALE);
        store.insert_uniform("dec_c.fnn.W2", self.sketch_vocab.len(), w, INIT_SCALE);
        store.insert_uniform("dec_c.fnn.b2", self.sketch_vocab.len(), 1, INIT_SCALE);

        LstmParamNodes::init(&mut store, "dec_f.lstm", e, w, INIT_SCALE);
        Self::init_proj(&mut store, "dec_f", w);
        store.insert_uniform("dec_f.fnn.W1", w, 4 * w, INIT_SCALE);
        store.insert_uniform("dec_f.fnn.b1", w, 1, INIT_SCALE);
        store.insert_uniform("dec_f.fnn.W2", self.lf_vocab.len(), w, INIT_SCALE);
        store.insert_uniform("dec_f.fnn.b2", self.lf_vocab.len(), 1, INIT_SCALE);
        store.insert_uniform("dec_f.sketch_in.W", e, w, INIT_SCALE);

        for head in ["disc_c", "disc_f"] {
            store.insert_uniform(&format!("{head}.w_ae"), w, 1, INIT_SCALE);
            store.insert_uniform(&format!("{head}.w_d"), 1, w, INIT_SCALE);
            store.insert_uniform(&format!("{head}.b_d"), 1, 1, INIT_SCALE);
        }
        store
    }

    fn init_proj(store: &mut ParameterStore, prefix: &str, w: usize) {
        store.insert_uniform(&format!("{prefix}.init_h.W"), w, w, INIT_SCALE);
        store.insert_uniform(&format!("{prefix}.init_h.b"), w, 1, INIT_SCALE);
        store.insert_uniform(&format!("{prefix}.init_c.W"), w, w, INIT_SCALE);
        store.insert_uniform(&format!("{prefix}.init_c.b"), w, 1, INIT_SCALE);
    }

    fn load_dec(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        prefix: &str,
        with_sketch_in: bool,
    ) -> Result<DecNodes> {
        let w = self.hp.enc_width();
        Ok(DecNodes {
            lstm: LstmParamNodes::load(g, store, &format!("{prefix}.lstm"), w)?,
            w1: g.param(store, &format!("{prefix}.fnn.W1"))?,
            b1: g.param(store, &format!("{prefix}.fnn.b1"))?,
            w2: g.param(store, &format!("{prefix}.fnn.W2"))?,
            b2: g.param(store, &format!("{prefix}.fnn.b2"))?,
            sketch_in: if with_sketch_in {
                Some(g.param(store, "dec_f.sketch_in.W")?)
            } else {
                None
            },
        })
    }

    fn embed_seq(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        table: &str,
        ids: &[usize],
    ) -> Result<Vec<NodeId>> {
        let tbl = g.param(store, table)?;
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let x = g.gather(tbl, id)?;
            out.push(g.dropout(x, self.hp.dropout)?);
        }
        Ok(out)
    }

    /// Bi-LSTM encode `ids` with the named encoder; per-token states are
    /// the columns of `m`.
    fn encode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        prefix: &str,
        table: &str,
        ids: &[usize],
    ) -> Result<EncodedNodes> {
        let dh = self.hp.dir_hidden();
        let inputs = self.embed_seq(g, store, table, ids)?;
        let fw = LstmParamNodes::load(g, store, &format!("{prefix}.fw"), dh)?;
        let bw = LstmParamNodes::load(g, store, &format!("{prefix}.bw"), dh)?;
        let out = bilstm_encode(g, &fw, &bw, &inputs)?;
        let mut states = Vec::with_capacity(out.states.len());
        for &s in &out.states {
            states.push(g.dropout(s, self.hp.dropout)?);
        }
        let m = g.concat(1, &states)?;
        Ok(EncodedNodes {
            m,
            states,
            final_fw: out.final_fw,
            final_bw: out.final_bw,
        })
    }

    /// Decoder start state: tanh-projected concatenation of the final
    /// forward/backward encoder states.
    fn init_state(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        prefix: &str,
        enc: &EncodedNodes,
    ) -> Result<(NodeId, NodeId)> {
        let cat = g.concat(0, &[enc.final_fw, enc.final_bw])?;
        let project = |which: &str, g: &mut Graph| -> Result<NodeId> {
            let w = g.param(store, &format!("{prefix}.init_{which}.W"))?;
            let b = g.param(store, &format!("{prefix}.init_{which}.b"))?;
            let p = g.matmul(w, cat)?;
            let p = g.add(p, b)?;
            Ok(g.tanh(p))
        };
        let h = project("h", g)?;
        let c = project("c", g)?;
        Ok((h, c))
    }

    /// Plain and prior attention over token columns `m` for query `d`:
    /// `e = Uᵀd`, `α = softmax(e)`, `α^pri = softmax(e ∘ q)`.
    pub fn prior_attention(
        &self,
        g: &mut Graph,
        m: NodeId,
        d: NodeId,
        q: Option<&[f64]>,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
        let e = g.matmul_t(m, true, d, false)?;
        let alpha = g.softmax(e)?;
        let ctx = g.matmul(m, alpha)?;
        let alpha_pri = match q {
            Some(q) => {
                let qn = g.input(Tensor::col(q));
                let epri = g.mul(e, qn)?;
                g.softmax(epri)?
            }
            None => g.softmax(e)?,
        };
        let ctx_pri = g.matmul(m, alpha_pri)?;
        Ok((ctx, ctx_pri, alpha, alpha_pri))
    }

    /// Self-attentive pooling plus the sigmoid domain classifier of one
    /// stage head. Returns the pooled vector and p(source).
    pub fn pool_and_discriminate(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        head: &str,
        m: NodeId,
        reverse: bool,
    ) -> Result<(NodeId, NodeId)> {
        let w_ae = g.param(store, &format!("{head}.w_ae"))?;
        let w_d = g.param(store, &format!("{head}.w_d"))?;
        let b_d = g.param(store, &format!("{head}.b_d"))?;
        let scores = g.matmul_t(m, true, w_ae, false)?;
        let alpha = g.softmax(scores)?;
        let u = g.matmul(m, alpha)?;
        let u_head = if reverse { g.grad_reverse(u, 1.0) } else { u };
        let z = g.matmul(w_d, u_head)?;
        let z = g.add(z, b_d)?;
        let p = g.sigmoid(z);
        Ok((u, p))
    }

    fn step_core(
        &self,
        g: &mut Graph,
        dec: &DecNodes,
        m: NodeId,
        sketch_m: Option<NodeId>,
        attn: AttnCfg,
        input: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<StepNodes> {
        let (h1, c1) = lstm_cell(g, &dec.lstm, input, h, c)?;
        let d = g.dropout(h1, self.hp.dropout)?;
        let (ctx, ctx_pri, alpha, alpha_pri) = match attn {
            AttnCfg::Prior(q) => self.prior_attention(g, m, d, Some(q))?,
            AttnCfg::Vanilla | AttnCfg::PlainOnly => self.prior_attention(g, m, d, None)?,
        };
        let mut feats = vec![d, ctx];
        if !matches!(attn, AttnCfg::PlainOnly) {
            feats.push(ctx_pri);
        }
        let alpha_sketch = match sketch_m {
            Some(sm) => {
                let es = g.matmul_t(sm, true, d, false)?;
                let a = g.softmax(es)?;
                let cs = g.matmul(sm, a)?;
                feats.push(cs);
                Some(a)
            }
            None => None,
        };
        let feat = g.concat(0, &feats)?;
        let z1 = g.matmul(dec.w1, feat)?;
        let z1 = g.add(z1, dec.b1)?;
        let hid = g.tanh(z1);
        let z2 = g.matmul(dec.w2, hid)?;
        let z2 = g.add(z2, dec.b2)?;
        let dist = g.softmax(z2)?;
        Ok(StepNodes {
            dist,
            h: h1,
            c: c1,
            alpha,
            alpha_pri,
            alpha_sketch,
        })
    }

    /// Teacher-forced coarse pass of one instance. Returns the summed
    /// cross-entropy node and the discriminator probability node.
    fn coarse_instance(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        prep: &Prepared,
        use_prior: bool,
        reverse_disc: bool,
    ) -> Result<(NodeId, NodeId)> {
        let enc = self.encode(g, store, "enc1", "emb.utt", &prep.utt_ids)?;
        let (_, p) = self.pool_and_discriminate(g, store, "disc_c", enc.m, reverse_disc)?;
        let dec = self.load_dec(g, store, "dec_c", false)?;
        let emb = g.param(store, "emb.sketch")?;
        let (mut h, mut c) = self.init_state(g, store, "dec_c", &enc)?;
        let mut ces = Vec::new();
        let steps = prep.sketch_ids.len() + 1;
        for t in 0..steps {
            let prev = if t == 0 { BOS } else { prep.sketch_ids[t - 1] };
            let x = g.gather(emb, prev)?;
            let x = g.dropout(x, self.hp.dropout)?;
            let attn = if use_prior {
                AttnCfg::Prior(&prep.q_coarse)
            } else {
                AttnCfg::Vanilla
            };
            let step = self.step_core(g, &dec, enc.m, None, attn, x, h, c)?;
            let target = if t < prep.sketch_ids.len() {
                prep.sketch_ids[t]
            } else {
                EOS
            };
            ces.push(g.cross_entropy(step.dist, target)?);
            h = step.h;
            c = step.c;
        }
        let ce = g.sum(&ces)?;
        Ok((ce, p))
    }

    /// Teacher-forced fine pass with input switching over the gold sketch.
    fn fine_instance(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        prep: &Prepared,
        use_prior: bool,
        reverse_disc: bool,
    ) -> Result<(NodeId, NodeId)> {
        let enc = self.encode(g, store, "enc2", "emb.utt", &prep.utt_ids)?;
        let (_, p) = self.pool_and_discriminate(g, store, "disc_f", enc.m, reverse_disc)?;
        let sk = self.encode(g, store, "enc3", "emb.sketch", &prep.sketch_ids)?;
        let dec = self.load_dec(g, store, "dec_f", true)?;
        let emb = g.param(store, "emb.lf")?;
        let (mut h, mut c) = self.init_state(g, store, "dec_f", &enc)?;
        let mut ces = Vec::new();
        let steps = prep.lf_ids.len() + 1;
        for t in 0..steps {
            let x = self.fine_input(g, &dec, emb, &sk.states, &prep.switch[t])?;
            let x = g.dropout(x, self.hp.dropout)?;
            let attn = if use_prior {
                AttnCfg::Prior(&prep.q_fine)
            } else {
                AttnCfg::Vanilla
            };
            let step = self.step_core(g, &dec, enc.m, Some(sk.m), attn, x, h, c)?;
            let target = if t < prep.lf_ids.len() {
                prep.lf_ids[t]
            } else {
                EOS
            };
            ces.push(g.cross_entropy(step.dist, target)?);
            h = step.h;
            c = step.c;
        }
        let ce = g.sum(&ces)?;
        Ok((ce, p))
    }

    fn fine_input(
        &self,
        g: &mut Graph,
        dec: &DecNodes,
        emb: NodeId,
        sketch_states: &[NodeId],
        src: &InputSrc,
    ) -> Result<NodeId> {
        match src {
            InputSrc::Bos => Ok(g.gather(emb, BOS)?),
            InputSrc::Embed(id) => Ok(g.gather(emb, *id)?),
            InputSrc::SketchPos(k) => {
                let proj = dec.sketch_in.expect("fine decoder without sketch_in");
                let s = sketch_states[*k];
                Ok(g.matmul(proj, s)?)
            }
        }
    }

    /// Plain seq2seq pass (no sketch): summed teacher-forced CE over Y.
    fn s2s_instance(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        prep: &Prepared,
    ) -> Result<NodeId> {
        let enc = self.encode(g, store, "enc1", "emb.utt", &prep.utt_ids)?;
        let dec = self.load_dec(g, store, "dec_s", false)?;
        let emb = g.param(store, "emb.lf")?;
        let (mut h, mut c) = self.init_state(g, store, "dec_s", &enc)?;
        let mut ces = Vec::new();
        for t in 0..=prep.lf_ids.len() {
            let prev = if t == 0 { BOS } else { prep.lf_ids[t - 1] };
            let x = g.gather(emb, prev)?;
            let x = g.dropout(x, self.hp.dropout)?;
            let step = self.step_core(g, &dec, enc.m, None, AttnCfg::PlainOnly, x, h, c)?;
            let target = if t < prep.lf_ids.len() {
                prep.lf_ids[t]
            } else {
                EOS
            };
            ces.push(g.cross_entropy(step.dist, target)?);
            h = step.h;
            c = step.c;
        }
        Ok(g.sum(&ces)?)
    }

    /// Batch objective per the strategy's loss mode. Returns the total
    /// loss node plus the scalar breakdown for logging.
    pub fn forward_losses(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        batch: &[&Prepared],
        mode: &LossMode,
    ) -> Result<BatchLosses> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if mode.strategy == Strategy::Seq2Seq {
            let ces: Vec<NodeId> = batch
                .iter()
                .map(|p| self.s2s_instance(g, store, p))
                .collect::<Result<_>>()?;
            let sum = g.sum(&ces)?;
            let total = g.affine(sum, 1.0 / batch.len() as f64, 0.0);
            let ce = g.scalar_value(total);
            return Ok(BatchLosses {
                total,
                l_coarse: None,
                l_fine: Some(total),
                breakdown: LossBreakdown {
                    fine_ce: ce,
                    l_fine: ce,
                    ..Default::default()
                },
            });
        }

        let n = batch.len() as f64;
        let mut coarse_ces = Vec::new();
        let mut coarse_ps = Vec::new();
        for prep in batch {
            let (ce, p) = self.coarse_instance(
                g,
                store,
                prep,
                mode.use_prior,
                mode.coarse_adv == Adv::Reversal,
            )?;
            coarse_ces.push(ce);
            coarse_ps.push((p, prep.is_source));
        }
        let coarse_sum = g.sum(&coarse_ces)?;
        let coarse_ce = g.affine(coarse_sum, 1.0 / n, 0.0);
        let (l_coarse, coarse_disc_val) =
            self.combine_stage(g, coarse_ce, &coarse_ps, mode.coarse_adv, mode.lambda_c)?;

        let fine_batch: Vec<&Prepared> = batch
            .iter()
            .copied()
            .filter(|p| !mode.fine_on_target_only || !p.is_source)
            .collect();
        let mut breakdown = LossBreakdown {
            coarse_ce: g.scalar_value(coarse_ce),
            coarse_disc: coarse_disc_val,
            l_coarse: g.scalar_value(l_coarse),
            ..Default::default()
        };
        if fine_batch.is_empty() {
            return Ok(BatchLosses {
                total: l_coarse,
                l_coarse: Some(l_coarse),
                l_fine: None,
                breakdown,
            });
        }

        let mut fine_ces = Vec::new();
        let mut fine_ps = Vec::new();
        for prep in &fine_batch {
            let (ce, p) = self.fine_instance(
                g,
                store,
                prep,
                mode.use_prior,
                mode.fine_adv == Adv::Reversal,
            )?;
            fine_ces.push(ce);
            fine_ps.push((p, prep.is_source));
        }
        let fine_sum = g.sum(&fine_ces)?;
        let fine_ce = g.affine(fine_sum, 1.0 / fine_batch.len() as f64, 0.0);
        let (l_fine, fine_disc_val) =
            self.combine_stage(g, fine_ce, &fine_ps, mode.fine_adv, mode.lambda_f)?;
        breakdown.fine_ce = g.scalar_value(fine_ce);
        breakdown.fine_disc = fine_disc_val;
        breakdown.l_fine = g.scalar_value(l_fine);

        let total = g.add(l_coarse, l_fine)?;
        Ok(BatchLosses {
            total,
            l_coarse: Some(l_coarse),
            l_fine: Some(l_fine),
            breakdown,
        })
    }

    /// `L = λ·L^D + CE` for one stage, per the adversarial mode.
    fn combine_stage(
        &self,
        g: &mut Graph,
        ce: NodeId,
        probs: &[(NodeId, bool)],
        adv: Adv,
        lambda: f64,
    ) -> Result<(NodeId, f64)> {
        if adv == Adv::None || lambda == 0.0 {
            return Ok((ce, 0.0));
        }
        let mut terms = Vec::with_capacity(probs.len());
        for &(p, is_source) in probs {
            let term = if is_source {
                g.log(p)
            } else {
                let one_minus = g.affine(p, -1.0, 1.0);
                g.log(one_minus)
            };
            terms.push(term);
        }
        let sum = g.sum(&terms)?;
        let confusion = g.affine(sum, 1.0 / probs.len() as f64, 0.0);
        // Confusion keeps the positive log-likelihood; the other modes
        // descend on the standard NLL.
        let disc = match adv {
            Adv::Confusion => confusion,
            _ => g.affine(confusion, -1.0, 0.0),
        };
        let scaled = g.affine(disc, lambda, 0.0);
        let l = g.add(scaled, ce)?;
        Ok((l, g.scalar_value(disc)))
    }

    // ---- forward-only inference ------------------------------------------

    /// Runs one encoder in eval mode and extracts raw matrices for the
    /// beam-search steppers.
    pub fn encode_infer(
        &self,
        store: &ParameterStore,
        prefix: &str,
        table: &str,
        ids: &[usize],
        disc_head: Option<&str>,
    ) -> Result<EncoderRun> {
        let mut g = Graph::new(false, 0);
        let enc = self.encode(&mut g, store, prefix, table, ids)?;
        let pooled = match disc_head {
            Some(head) => {
                let (u, p) = self.pool_and_discriminate(&mut g, store, head, enc.m, false)?;
                Some((g.value(u).data.clone(), g.scalar_value(p)))
            }
            None => None,
        };
        Ok(EncoderRun {
            m: g.value(enc.m).clone(),
            cols: enc.states.iter().map(|&s| g.value(s).data.clone()).collect(),
            final_fw: g.value(enc.final_fw).clone(),
            final_bw: g.value(enc.final_bw).clone(),
            pooled,
        })
    }

    /// Decoder start state from a frozen encoder run.
    pub fn init_state_infer(&self, store: &ParameterStore, prefix: &str, run: &EncoderRun) -> Result<DecStateV> {
        let mut g = Graph::new(false, 0);
        let ffw = g.input(run.final_fw.clone());
        let fbw = g.input(run.final_bw.clone());
        let enc = EncodedNodes {
            m: ffw, // unused by init_state
            states: Vec::new(),
            final_fw: ffw,
            final_bw: fbw,
        };
        let (h, c) = self.init_state(&mut g, store, prefix, &enc)?;
        Ok(DecStateV {
            h: g.value(h).data.clone(),
            c: g.value(c).data.clone(),
        })
    }

    /// One eval-mode decode step of the requested stage.
    #[allow(clippy::too_many_arguments)]
    pub fn step_infer(
        &self,
        store: &ParameterStore,
        stage: InferStage,
        utt: &EncoderRun,
        sketch: Option<&EncoderRun>,
        q: Option<&[f64]>,
        state: &DecStateV,
        input: &InputSrc,
    ) -> Result<StepOutput> {
        let mut g = Graph::new(false, 0);
        let (prefix, emb_table, with_sketch) = match stage {
            InferStage::Coarse => ("dec_c", "emb.sketch", false),
            InferStage::Fine => ("dec_f", "emb.lf", true),
            InferStage::Seq2Seq => ("dec_s", "emb.lf", false),
        };
        let dec = self.load_dec(&mut g, store, prefix, with_sketch)?;
        let emb = g.param(store, emb_table)?;
        let m = g.input(utt.m.clone());
        let sketch_nodes: Option<(NodeId, Vec<NodeId>)> = match (with_sketch, sketch) {
            (true, Some(run)) => {
                let sm = g.input(run.m.clone());
                let cols = run
                    .cols
                    .iter()
                    .map(|c| g.input(Tensor::col(c)))
                    .collect();
                Some((sm, cols))
            }
            _ => None,
        };
        let x = match input {
            InputSrc::Bos => g.gather(emb, BOS)?,
            InputSrc::Embed(id) => g.gather(emb, *id)?,
            InputSrc::SketchPos(k) => {
                let (_, cols) = sketch_nodes.as_ref().expect("sketch run required");
                let proj = dec.sketch_in.expect("sketch_in projection");
                g.matmul(proj, cols[*k])?
            }
        };
        let h = g.input(Tensor::col(&state.h));
        let c = g.input(Tensor::col(&state.c));
        let attn = match (stage, q) {
            (InferStage::Seq2Seq, _) => AttnCfg::PlainOnly,
            (_, Some(q)) => AttnCfg::Prior(q),
            (_, None) => AttnCfg::Vanilla,
        };
        let sm = sketch_nodes.as_ref().map(|(sm, _)| *sm);
        let step = self.step_core(&mut g, &dec, m, sm, attn, x, h, c)?;
        Ok(StepOutput {
            log_probs: g.value(step.dist).data.iter().map(|p| p.ln()).collect(),
            probs: g.value(step.dist).data.clone(),
            state: DecStateV {
                h: g.value(step.h).data.clone(),
                c: g.value(step.c).data.clone(),
            },
            alpha: g.value(step.alpha).data.clone(),
            alpha_pri: g.value(step.alpha_pri).data.clone(),
            alpha_sketch: step.alpha_sketch.map(|a| g.value(a).data.clone()),
        })
    }
}

/// Which decoder a forward-only step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferStage {
    Coarse,
    Fine,
    Seq2Seq,
}

/// Raw matrices of one eval-mode encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderRun {
    /// `(width, n)` matrix whose columns are the per-token vectors.
    pub m: Tensor,
    pub cols: Vec<Vec<f64>>,
    pub final_fw: Tensor,
    pub final_bw: Tensor,
    /// Pooled vector and p(source) when a discriminator head was requested.
    pub pooled: Option<(Vec<f64>, f64)>,
}

/// Plain-value decoder state used during beam search.
#[derive(Debug, Clone)]
pub struct DecStateV {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Result of one forward-only decode step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    pub state: DecStateV,
    pub alpha: Vec<f64>,
    pub alpha_pri: Vec<f64>,
    pub alpha_sketch: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::corpus::{parse_corpus, Corpus};
    use crate::model::prepare::prepare_instance;
    use crate::model::LossMode;
    use crate::numerics::{grad_check, NumericsError};
    use crate::sketchlang::compute_token_shares;

    fn tiny_hp() -> Hyperparams {
        let mut hp = Hyperparams::default();
        hp.embedding_dim = 4;
        hp.hidden = 8;
        hp.dropout = 0.0;
        hp
    }

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let seqs: Vec<Vec<String>> = words.iter().map(|w| vec![w.to_string()]).collect();
        Vocabulary::build(seqs.iter().map(|s| s.as_slice()), 1)
    }

    fn tiny_model() -> Model {
        Model::new(
            tiny_hp(),
            vocab_of(&["list", "the", "things", "items"]),
            vocab_of(&["listValue", "(", ")", "thing", "item"]),
            vocab_of(&["listValue", "(", ")", "hole@1"]),
        )
    }

    #[test]
    fn zeroed_head_gives_half_probability() {
        let model = tiny_model();
        let mut store = model.init_params(3, Strategy::Damp, None);
        store.value_mut("disc_c.w_d").unwrap().data.fill(0.0);
        store.value_mut("disc_c.b_d").unwrap().data.fill(0.0);
        let mut g = Graph::new(false, 0);
        let enc = model
            .encode(&mut g, &store, "enc1", "emb.utt", &[4, 5, 6])
            .unwrap();
        let (_, p) = model
            .pool_and_discriminate(&mut g, &store, "disc_c", enc.m, false)
            .unwrap();
        assert_eq!(g.scalar_value(p), 0.5);
    }

    #[test]
    fn pooling_over_one_token_is_identity() {
        // With a single column, softmax pooling must return that column.
        let model = tiny_model();
        let store = model.init_params(4, Strategy::Damp, None);
        let mut g = Graph::new(false, 0);
        let enc = model
            .encode(&mut g, &store, "enc1", "emb.utt", &[5])
            .unwrap();
        let (u, _) = model
            .pool_and_discriminate(&mut g, &store, "disc_c", enc.m, false)
            .unwrap();
        assert_eq!(g.value(u).data, g.value(enc.m).data);
    }

    #[test]
    fn prior_of_ones_is_bitwise_neutral() {
        // e ∘ 1 == e in IEEE arithmetic, so the DAMP path with q ≡ 1 must
        // match the vanilla path bit for bit.
        let model = tiny_model();
        let store = model.init_params(11, Strategy::Damp, None);
        for trial in 0..100 {
            let ids = [4 + trial % 3, 5, 6, 7];
            let mut g = Graph::new(false, 0);
            let enc = model
                .encode(&mut g, &store, "enc1", "emb.utt", &ids)
                .unwrap();
            let d = g.input(Tensor::col(&vec![0.01 * trial as f64; 8]));
            let ones = vec![1.0; ids.len()];
            let (c1, cp1, a1, ap1) = model
                .prior_attention(&mut g, enc.m, d, Some(&ones))
                .unwrap();
            let (c2, cp2, a2, ap2) = model.prior_attention(&mut g, enc.m, d, None).unwrap();
            assert_eq!(g.value(a1).data, g.value(a2).data);
            assert_eq!(g.value(ap1).data, g.value(ap2).data);
            assert_eq!(g.value(c1).data, g.value(c2).data);
            assert_eq!(g.value(cp1).data, g.value(cp2).data);
        }
    }

    #[test]
    fn prior_reweighting_shifts_attention_mass() {
        let model = tiny_model();
        let store = model.init_params(12, Strategy::Damp, None);
        let mut g = Graph::new(false, 0);
        let enc = model
            .encode(&mut g, &store, "enc1", "emb.utt", &[4, 5, 6])
            .unwrap();
        let d = g.input(Tensor::col(&[0.3; 8]));
        let q = [60.0, 1.0, 1.0];
        let (_, _, alpha, alpha_pri) = model.prior_attention(&mut g, enc.m, d, Some(&q)).unwrap();
        // hand recomputation: alpha_pri = softmax(e ∘ q) from the raw scores
        let a = g.value(alpha).data.clone();
        let e: Vec<f64> = a.iter().map(|p| p.ln()).collect(); // log softmax = e - const
        // recover relative scores: softmax is shift-invariant, so rebuild
        // from log alpha directly
        let scaled: Vec<f64> = e
            .iter()
            .zip(&q)
            .map(|(l, qi)| {
                // log alpha = e - logsumexp(e); multiply the raw e by q via
                // alpha's logs only works when the shift is recovered, so
                // recompute from the graph instead
                l * qi
            })
            .collect();
        let _ = scaled;
        let pri = g.value(alpha_pri).data.clone();
        let sum: f64 = pri.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_ne!(a, pri);
    }

    #[test]
    fn decode_step_distribution_is_a_simplex() {
        let model = tiny_model();
        let store = model.init_params(5, Strategy::Damp, None);
        let run = model
            .encode_infer(&store, "enc1", "emb.utt", &[4, 5, 6], Some("disc_c"))
            .unwrap();
        let st = model.init_state_infer(&store, "dec_c", &run).unwrap();
        let out = model
            .step_infer(
                &store,
                InferStage::Coarse,
                &run,
                None,
                Some(&[1.0, 60.0, 1.0]),
                &st,
                &InputSrc::Bos,
            )
            .unwrap();
        let sum: f64 = out.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(out.probs.iter().all(|&p| p > 0.0));
        let asum: f64 = out.alpha.iter().sum();
        assert!((asum - 1.0).abs() < 1e-9);
    }

    fn tiny_batch() -> (Model, TrainConfig, Corpus, Vec<Prepared>) {
        let text = "\
alpha\tlist the things\tlistValue ( thing )\n\
beta\tlist the items\tlistValue ( item )\n";
        let corpus = parse_corpus(text, "<t>", 16, 16).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.hp = tiny_hp();
        cfg.domain_queries
            .insert("alpha".into(), vec!["things".into()]);
        cfg.domain_queries
            .insert("beta".into(), vec!["items".into()]);
        let shares = compute_token_shares(&corpus);
        let insts: Vec<_> = corpus.by_domain.iter().flatten().cloned().collect();
        let utt_vocab = Vocabulary::build(insts.iter().map(|i| i.utterance.as_slice()), 1);
        let lf_vocab = Vocabulary::build(insts.iter().map(|i| i.logical_form.as_slice()), 1);
        let sketches = crate::sketchlang::induce_for_instances(insts.iter(), &shares);
        let surfaces: Vec<Vec<String>> = sketches.iter().map(|(s, _)| s.surface()).collect();
        let sketch_vocab = Vocabulary::build(surfaces.iter().map(|s| s.as_slice()), 1);
        let pretrained = crate::corpus::embeddings_from_text(
            "",
            "<none>",
            &utt_vocab,
            cfg.hp.embedding_dim,
            9,
        )
        .unwrap();
        let prepared: Vec<Prepared> = insts
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                prepare_instance(
                    inst,
                    i == 0, // alpha is source, beta target
                    &corpus.domains[inst.domain],
                    &cfg,
                    &shares,
                    &utt_vocab,
                    &lf_vocab,
                    &sketch_vocab,
                    &pretrained,
                )
                .unwrap()
            })
            .collect();
        let model = Model::new(cfg.hp.clone(), utt_vocab, lf_vocab, sketch_vocab);
        (model, cfg, corpus, prepared)
    }

    #[test]
    fn full_objective_passes_gradient_check() {
        let (model, cfg, _, prepared) = tiny_batch();
        let mode = LossMode::for_strategy(Strategy::Damp, &cfg.hp);
        let mut store = model.init_params(21, Strategy::Damp, None);
        // Scale parameters away from the tiny default init: with weights near
        // zero the gradients reaching the encoder are ~1e-9, where the
        // central-difference quotient is dominated by f64 rounding of the loss
        // and the relative-error comparison becomes meaningless.
        let names: Vec<String> = store.names().map(|n| n.to_string()).collect();
        for name in &names {
            for v in store.value_mut(name).unwrap().data.iter_mut() {
                *v *= 12.0;
            }
        }
        let batch: Vec<&Prepared> = prepared.iter().collect();
        let max_rel = grad_check(
            |g, s| match model.forward_losses(g, s, &batch, &mode) {
                Ok(l) => Ok(l.total),
                Err(super::super::ModelError::Numerics(e)) => Err(e),
                Err(e) => panic!("non-numerics error in gradcheck: {e}"),
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn lambda_zero_reduces_to_pure_cross_entropy() {
        let (model, cfg, _, prepared) = tiny_batch();
        let mode = LossMode::for_strategy(Strategy::Coarse2FineMix, &cfg.hp);
        let store = model.init_params(22, Strategy::Coarse2FineMix, None);
        let batch: Vec<&Prepared> = prepared.iter().collect();
        let mut g = Graph::new(false, 0);
        let losses = model.forward_losses(&mut g, &store, &batch, &mode).unwrap();
        let b = losses.breakdown;
        assert_eq!(b.coarse_disc, 0.0);
        assert_eq!(b.l_coarse, b.coarse_ce);
        assert_eq!(b.l_fine, b.fine_ce);
        assert!(
            (g.scalar_value(losses.total) - (b.l_coarse + b.l_fine)).abs() < 1e-12
        );
    }

    #[test]
    fn param_share_skips_fine_on_source_batches() {
        let (model, cfg, _, prepared) = tiny_batch();
        let mode = LossMode::for_strategy(Strategy::ParamShare, &cfg.hp);
        let store = model.init_params(23, Strategy::ParamShare, None);
        let source_only: Vec<&Prepared> = prepared.iter().filter(|p| p.is_source).collect();
        let mut g = Graph::new(false, 0);
        let losses = model
            .forward_losses(&mut g, &store, &source_only, &mode)
            .unwrap();
        assert_eq!(losses.breakdown.fine_ce, 0.0);
        assert_eq!(losses.breakdown.l_fine, 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (model, cfg, _, _) = tiny_batch();
        let mode = LossMode::for_strategy(Strategy::Damp, &cfg.hp);
        let store = model.init_params(24, Strategy::Damp, None);
        let mut g = Graph::new(true, 0);
        assert!(matches!(
            model.forward_losses(&mut g, &store, &[], &mode),
            Err(super::super::ModelError::EmptyBatch)
        ));
    }
}

