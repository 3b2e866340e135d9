//! Command-line entry point: sketch induction, training, evaluation,
//! parsing, data-budget sweeps, and analysis dumps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 model or
//! checkpoint error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser as ClapParser, Subcommand};
use damp::config::{ConfigError, Strategy, TrainConfig};
use damp::corpus::{load_corpus, make_adaptation_split, Corpus, CorpusError, Instance};
use damp::eval::{
    self, attention_tsv, evaluate, predictions_tsv, representation_ch, representations_tsv,
    sweep_target_fraction, sweep_tsv, EvalError, EvalReport,
};
use damp::infer::Parser;
use damp::model::{InferStage, LossMode, ModelError};
use damp::numerics::{
    grad_check, load_checkpoint, lstm_cell, CheckpointError, LstmParamNodes, ParameterStore,
    Tensor,
};
use damp::relevance::{build_prior, domain_relevant_positions, Stage};
use damp::sketchlang::{compute_token_shares, induce_for_instances};
use damp::train::{write_atomic, write_log, TrainError, Trainer};

#[derive(ClapParser)]
#[command(name = "damp", version, about = "Domain-adaptive coarse-to-fine semantic parser")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Data/config flags shared by every command that instantiates a model.
#[derive(Args)]
struct RunArgs {
    /// Corpus TSV: domain<TAB>utterance<TAB>logical form, one per line.
    #[arg(long)]
    data: PathBuf,
    /// Adaptation target domain (must appear in the corpus).
    #[arg(long = "target-domain", alias = "target")]
    target_domain: String,
    /// key=value config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "target-fraction")]
    target_fraction: Option<f64>,
    #[arg(long = "dev-fraction")]
    dev_fraction: Option<f64>,
    /// Pretrained word vectors in text format (token v1 v2 ...).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Induce sketches for every instance and dump them with a share-table summary.
    InduceSketch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "target-domain", alias = "target")]
        target_domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train.tsv, best.ckpt and final.ckpt under --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint (epoch count is taken from the
        /// existing train.tsv under --out).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode the target dev split and report EM metrics.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prediction dump TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse one utterance with a trained checkpoint.
    Parse {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// The utterance, whitespace-tokenized.
        utterance: String,
    },
    /// Train once per target fraction and tabulate EM against data budget.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated target fractions in (0, 1].
        #[arg(long)]
        fractions: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forced attention trace of one dev instance, both stages.
    DumpAttention {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Index into the target dev split.
        #[arg(default_value_t = 0)]
        index: usize,
    },
    /// Pooled utterance representations of the train split, with a CH score.
    DumpReprs {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which discriminator's pooling to use: coarse or fine.
        #[arg(default_value = "coarse")]
        stage: String,
    },
    /// Finite-difference gradient checks on primitives and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 21)]
        seed: u64,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Model(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Model(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Model(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Model(format!("checkpoint: {e}"))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Corpus(c) => CliError::Data(c.to_string()),
            TrainError::EmptyTargetTrain => CliError::Data(e.to_string()),
            TrainError::Io { .. } => CliError::Data(e.to_string()),
            other => CliError::Model(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Corpus(c) => CliError::Data(c.to_string()),
            EvalError::Train(t) => (*t).into(),
            other => CliError::Model(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own success paths (--help, --version) still exit 0
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::InduceSketch {
            data,
            target_domain,
            out,
        } => induce_sketch_cmd(&data, &target_domain, &out),
        Cmd::Train {
            run,
            out,
            checkpoint,
        } => train_cmd(&run, &out, checkpoint.as_deref()),
        Cmd::Evaluate {
            run,
            checkpoint,
            out,
        } => evaluate_cmd(&run, &checkpoint, out.as_deref()),
        Cmd::Parse {
            run,
            checkpoint,
            utterance,
        } => parse_cmd(&run, &checkpoint, &utterance),
        Cmd::Sweep {
            run,
            fractions,
            out,
        } => sweep_cmd(&run, &fractions, &out),
        Cmd::DumpAttention {
            run,
            checkpoint,
            out,
            index,
        } => dump_attention_cmd(&run, &checkpoint, &out, index),
        Cmd::DumpReprs {
            run,
            checkpoint,
            out,
            stage,
        } => dump_reprs_cmd(&run, &checkpoint, &out, &stage),
        Cmd::Gradcheck { seed } => gradcheck_cmd(seed),
    }
}

/// Loads the config file (if any) and applies flag overrides on top.
fn load_config(args: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path).map_err(|e| match e {
            ConfigError::Io { .. } | ConfigError::BadLine { .. } => CliError::Data(e.to_string()),
            other => CliError::Data(other.to_string()),
        })?,
        None => TrainConfig::default(),
    };
    let usage = |e: ConfigError| CliError::Usage(e.to_string());
    if let Some(s) = &args.strategy {
        cfg.set("strategy", s).map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string()).map_err(usage)?;
    }
    if let Some(f) = args.target_fraction {
        cfg.set("target_fraction", &f.to_string()).map_err(usage)?;
    }
    if let Some(f) = args.dev_fraction {
        cfg.set("dev_fraction", &f.to_string()).map_err(usage)?;
    }
    if let Some(b) = args.beam {
        cfg.set("beam", &b.to_string()).map_err(usage)?;
    }
    cfg.hp
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn read_embeddings(args: &RunArgs) -> Result<Option<String>> {
    match &args.embeddings {
        None => Ok(None),
        Some(path) => fs::read_to_string(path)
            .map(Some)
            .map_err(|e| CliError::Data(format!("cannot read embeddings {}: {e}", path.display()))),
    }
}

fn build_trainer(args: &RunArgs, cfg: &TrainConfig) -> Result<Trainer> {
    let corpus = load_corpus(&args.data, cfg.hp.max_utterance_len, cfg.hp.max_lf_len)?;
    let data = make_adaptation_split(
        &corpus,
        &args.target_domain,
        cfg.target_fraction,
        cfg.dev_fraction,
        cfg.seed,
        None,
    )?;
    let embeddings = read_embeddings(args)?;
    Ok(Trainer::new(cfg.clone(), &data, embeddings.as_deref())?)
}

fn load_ckpt(path: &Path) -> Result<ParameterStore> {
    load_checkpoint(path)
        .map_err(|e| CliError::Model(format!("checkpoint {}: {e}", path.display())))
}

fn atomic(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::Data(e.to_string()))
}

fn induce_sketch_cmd(data: &Path, target_domain: &str, out: &Path) -> Result<()> {
    let hp = TrainConfig::default().hp;
    let corpus = load_corpus(data, hp.max_utterance_len, hp.max_lf_len)?;
    let target = corpus
        .domain_id(target_domain)
        .ok_or_else(|| CliError::Data(format!("unknown domain `{target_domain}`")))?;

    // share counting sees only the source domains
    let mut source = Corpus::default();
    for (id, name) in corpus.domains.iter().enumerate() {
        if id != target {
            source.domains.push(name.clone());
            source.by_domain.push(corpus.by_domain[id].clone());
        }
    }
    let shares = compute_token_shares(&source);

    let instances: Vec<&Instance> = corpus.by_domain.iter().flatten().collect();
    let sketches = induce_for_instances(instances.iter().copied(), &shares);
    let mut dump = String::from("domain\tlogical_form\tsketch\n");
    let mut distinct = BTreeSet::new();
    for (inst, (sketch, _)) in instances.iter().zip(&sketches) {
        let surface = sketch.surface().join(" ");
        distinct.insert(surface.clone());
        dump.push_str(&format!(
            "{}\t{}\t{}\n",
            corpus.domains[inst.domain],
            inst.logical_form.join(" "),
            surface
        ));
    }
    atomic(out, &dump)?;

    let shared = shares
        .tokens()
        .filter(|t| shares.share_set(t).map_or(0, |s| s.len()) >= 2)
        .count();
    println!(
        "induced {} sketches ({} distinct) over {} domains ({} source)",
        instances.len(),
        distinct.len(),
        corpus.domains.len(),
        source.domains.len()
    );
    println!(
        "share table: {} tokens, {} shared by >= 2 source domains",
        shares.tokens().count(),
        shared
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn train_cmd(args: &RunArgs, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let trainer = build_trainer(args, &cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    let log_path = out.join("train.tsv");

    // resuming: the epoch counter is the number of rows already logged
    let init = match checkpoint {
        None => None,
        Some(ckpt) => {
            let store = load_ckpt(ckpt)?;
            let prior_log = fs::read_to_string(&log_path).map_err(|e| {
                CliError::Data(format!(
                    "resume needs the original {}: {e}",
                    log_path.display()
                ))
            })?;
            let done = prior_log.lines().skip(1).filter(|l| !l.is_empty()).count();
            Some((store, done, prior_log))
        }
    };

    let (outcome, prior_log) = match init {
        None => (trainer.run(None)?, None),
        Some((store, done, prior_log)) => {
            (trainer.run(Some((store, done)))?, Some(prior_log))
        }
    };

    match prior_log {
        None => write_log(&log_path, &outcome.log)?,
        Some(mut text) => {
            for row in &outcome.log {
                text.push_str(&row.tsv_row());
                text.push('\n');
            }
            atomic(&log_path, &text)?;
        }
    }
    damp::numerics::save_checkpoint(&outcome.store, &out.join("best.ckpt"))?;
    damp::numerics::save_checkpoint(&outcome.final_store, &out.join("final.ckpt"))?;

    println!(
        "trained strategy={} for {} epochs (seed {})",
        cfg.strategy, outcome.epochs_run, cfg.seed
    );
    println!(
        "best epoch {} with dev LF EM {:.4}",
        outcome.best_epoch, outcome.best_dev_lf_em
    );
    println!("wrote {}, best.ckpt, final.ckpt", log_path.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "n={}  sketch EM {:.4}  LF_oracle EM {:.4}  LF EM {:.4}",
        report.n, report.sketch_em, report.oracle_em, report.lf_em
    );
    for d in &report.per_domain {
        println!(
            "  {}: n={} sketch {:.4} oracle {:.4} lf {:.4}",
            d.domain, d.n, d.sketch_em, d.oracle_em, d.lf_em
        );
    }
}

fn evaluate_cmd(args: &RunArgs, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let store = load_ckpt(checkpoint)?;
    let trainer = build_trainer(args, &cfg)?;
    let (report, predictions) = evaluate(
        &trainer.model,
        &store,
        cfg.strategy,
        &trainer.dev,
        cfg.hp.beam,
        &trainer.domains,
    )?;
    print_report(&report);
    if let Some(path) = out {
        atomic(path, &predictions_tsv(&predictions))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_cmd(args: &RunArgs, checkpoint: &Path, utterance: &str) -> Result<()> {
    let cfg = load_config(args)?;
    let store = load_ckpt(checkpoint)?;
    let trainer = build_trainer(args, &cfg)?;

    let tokens: Vec<String> = utterance.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(CliError::Usage("empty utterance".into()));
    }
    let relevant = domain_relevant_positions(
        &tokens,
        &args.target_domain,
        &cfg.query_words(&args.target_domain),
        &trainer.model.utt_vocab,
        &trainer.pretrained,
        cfg.hp.k_relevant,
    )
    .map_err(|e| CliError::Model(e.to_string()))?;
    let qc = build_prior(&relevant, tokens.len(), Stage::Coarse, cfg.hp.r_coarse, cfg.hp.r_fine)
        .map_err(|e| CliError::Model(e.to_string()))?;
    let qf = build_prior(&relevant, tokens.len(), Stage::Fine, cfg.hp.r_coarse, cfg.hp.r_fine)
        .map_err(|e| CliError::Model(e.to_string()))?;

    let parser = Parser::new(&trainer.model, &store, cfg.strategy);
    let out = parser
        .parse(&tokens, Some(&qc.q), Some(&qf.q))
        .map_err(|e| CliError::Model(e.to_string()))?;
    println!("sketch: {}", out.sketch.join(" "));
    println!("logical form: {}", out.logical_form.join(" "));
    println!("score: {:.4}{}", out.score, if out.used_fallback { "  (unconstrained fallback)" } else { "" });
    Ok(())
}

fn sweep_cmd(args: &RunArgs, fractions: &str, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let fractions: Vec<f64> = fractions
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad fraction `{s}` in --fractions")))
        })
        .collect::<Result<_>>()?;
    if fractions.is_empty() {
        return Err(CliError::Usage("--fractions is empty".into()));
    }
    let corpus = load_corpus(&args.data, cfg.hp.max_utterance_len, cfg.hp.max_lf_len)?;
    let embeddings = read_embeddings(args)?;
    let rows = sweep_target_fraction(
        &cfg,
        &corpus,
        &args.target_domain,
        &fractions,
        None,
        embeddings.as_deref(),
    )?;
    atomic(out, &sweep_tsv(&rows))?;
    for r in &rows {
        println!(
            "fraction {:.3}: {} target instances, sketch EM {:.4}, LF EM {:.4}",
            r.fraction, r.n_target, r.sketch_em, r.lf_em
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn dump_attention_cmd(args: &RunArgs, checkpoint: &Path, out: &Path, index: usize) -> Result<()> {
    let cfg = load_config(args)?;
    let store = load_ckpt(checkpoint)?;
    let trainer = build_trainer(args, &cfg)?;
    let prep = trainer.dev.get(index).ok_or_else(|| {
        CliError::Data(format!(
            "dev index {index} out of range (dev split has {} instances)",
            trainer.dev.len()
        ))
    })?;
    let use_prior = matches!(cfg.strategy, Strategy::Damp | Strategy::GradReversal);
    let dump = eval::dump_attention(&trainer.model, &store, prep, use_prior)?;
    atomic(out, &attention_tsv(&dump))?;
    println!(
        "dumped {} coarse and {} fine attention steps for `{}`",
        dump.coarse.len(),
        dump.fine.len(),
        prep.utterance.join(" ")
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn dump_reprs_cmd(args: &RunArgs, checkpoint: &Path, out: &Path, stage: &str) -> Result<()> {
    let cfg = load_config(args)?;
    let infer_stage = match stage {
        "coarse" => InferStage::Coarse,
        "fine" => InferStage::Fine,
        other => return Err(CliError::Usage(format!("stage must be coarse or fine, got `{other}`"))),
    };
    let store = load_ckpt(checkpoint)?;
    let trainer = build_trainer(args, &cfg)?;
    let rows = eval::pooled_representations(&trainer.model, &store, &trainer.train, infer_stage)?;
    atomic(out, &representations_tsv(&rows, &trainer.domains))?;
    println!("dumped {} pooled {stage}-stage vectors", rows.len());
    match representation_ch(&rows) {
        Ok(ch) => println!("CH({stage}) over domains = {ch:.4}"),
        Err(e) => println!("CH({stage}) undefined: {e}"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Self-checks: analytic gradients vs central differences on primitives
/// and on the full two-stage loss of a toy model.
fn gradcheck_cmd(seed: u64) -> Result<()> {
    let mut failed = false;
    let mut report = |name: &str, err: f64, tol: f64| {
        let ok = err <= tol;
        failed |= !ok;
        println!(
            "{}  {name}: max relative error {err:.3e} (tolerance {tol:.0e})",
            if ok { "PASS" } else { "FAIL" }
        );
    };

    let model_err = |e: ModelError| match e {
        ModelError::Numerics(n) => n,
        other => panic!("non-numerics error in gradcheck: {other}"),
    };

    // primitive composition: gather/sigmoid/tanh/mul/concat/slice/softmax/
    // log/cross-entropy in one scalar loss
    let mut store = ParameterStore::new(seed);
    store.insert_uniform("t", 5, 4, 0.6);
    store.insert_uniform("v", 4, 1, 0.6);
    let err = grad_check(
        |g, store| {
            let t = g.param(store, "t")?;
            let v = g.param(store, "v")?;
            let row = g.gather(t, 2)?;
            let s = g.sigmoid(row);
            let h = g.tanh(v);
            let m = g.mul(s, h)?;
            let cat = g.concat(0, &[m, v])?;
            let top = g.slice_rows(cat, 0, 4)?;
            let sm = g.softmax(top)?;
            let ce = g.cross_entropy(sm, 1)?;
            let lg = g.log(sm);
            let pick = g.slice_rows(lg, 2, 1)?;
            let neg = g.affine(pick, -0.5, 0.0);
            g.add(ce, neg)
        },
        &mut store,
        1e-5,
    )
    .map_err(|e| CliError::Model(e.to_string()))?;
    report("primitives", err, 1e-6);

    // one LSTM step
    let mut store = ParameterStore::new(seed ^ 1);
    LstmParamNodes::init(&mut store, "cell", 3, 4, 0.4);
    let x = Tensor::from_vec(3, 1, vec![0.3, -0.7, 0.5]);
    let h0 = Tensor::from_vec(4, 1, vec![0.1, -0.2, 0.4, -0.3]);
    let c0 = Tensor::from_vec(4, 1, vec![-0.5, 0.2, 0.1, 0.6]);
    let err = grad_check(
        |g, store| {
            let p = LstmParamNodes::load(g, store, "cell", 4)?;
            let x = g.input(x.clone());
            let h0 = g.input(h0.clone());
            let c0 = g.input(c0.clone());
            let (h1, c1) = lstm_cell(g, &p, x, h0, c0)?;
            let both = g.concat(0, &[h1, c1])?;
            let sq = g.mul(both, both)?;
            let ones = g.input(Tensor::from_vec(1, 8, vec![1.0; 8]));
            g.matmul(ones, sq)
        },
        &mut store,
        1e-5,
    )
    .map_err(|e| CliError::Model(e.to_string()))?;
    report("lstm step", err, 1e-6);

    // full two-stage loss on a toy model (hidden 8, 2 instances, no dropout)
    let text = "\
alpha\tlist the things\tlistValue ( thing )\n\
alpha\tcount the things\tcount ( thing )\n\
beta\tlist the items\tlistValue ( item )\n\
beta\tcount the items\tcount ( item )\n";
    let corpus = damp::corpus::parse_corpus(text, "<toy>", 16, 16)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.target_fraction = 1.0;
    cfg.dev_fraction = 0.5;
    cfg.hp.embedding_dim = 4;
    cfg.hp.hidden = 8;
    cfg.hp.dropout = 0.0;
    cfg.domain_queries
        .insert("alpha".into(), vec!["things".into()]);
    cfg.domain_queries.insert("beta".into(), vec!["items".into()]);
    let data = make_adaptation_split(&corpus, "beta", 1.0, 0.5, seed, None)?;
    let trainer = Trainer::new(cfg.clone(), &data, None)?;
    let mode = LossMode::for_strategy(Strategy::Damp, &cfg.hp);
    let mut store = trainer.model.init_params(seed, Strategy::Damp, None);
    // scale the near-zero init up so encoder gradients clear the
    // finite-difference noise floor
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        for v in store.value_mut(name).unwrap().data.iter_mut() {
            *v *= 12.0;
        }
    }
    let batch: Vec<_> = trainer.train.iter().take(2).collect();
    let err = grad_check(
        |g, s| {
            trainer
                .model
                .forward_losses(g, s, &batch, &mode)
                .map(|l| l.total)
                .map_err(model_err)
        },
        &mut store,
        1e-5,
    )
    .map_err(|e| CliError::Model(e.to_string()))?;
    report("full two-stage loss", err, 1e-4);

    if failed {
        Err(CliError::Model("gradient check failed".into()))
    } else {
        Ok(())
    }
}
