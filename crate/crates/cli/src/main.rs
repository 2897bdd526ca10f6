//! `relrec`: train, query and evaluate relation predictors from the shell.
//!
//! Machine-readable results go to stdout as JSON lines, human-readable
//! tables follow them on stdout, and diagnostics go to stderr.
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric divergence.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use relrec::eval::dataset::{load_pairs, save_pairs, scan_relation_names};
use relrec::eval::synthetic::check_world_dir;
use relrec::gradcheck::{grad_check, GradCheckSpec, LossKind};
use relrec::{
    extract_rationales, f1_score, generate_synthetic, joint_train, load_checkpoint, predict, render_f1_table,
    save_checkpoint, split_dataset, Checkpoint, CoocGraph, F1Row, Mode, RelationSchema, SynthConfig, TripleSet,
};
use serde_json::json;

use crate::config::{sibling, CliConfig};

const SPLIT: [f64; 3] = [0.7, 0.15, 0.15];
const SUGGESTIONS: usize = 5;

/// Bad flags or configuration (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A numeric check failed (exit code 3).
#[derive(Debug)]
pub struct Numeric(pub String);

impl std::fmt::Display for Numeric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numeric {}

#[derive(Debug, Parser)]
#[command(name = "relrec", version, about = "Interpretable relation prediction from co-occurrence graphs")]
struct Cli {
    /// Worker threads for per-pair prediction (evaluate); all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, log and held-out pairs.
    Train(TrainArgs),
    /// Probability of the target relation for one pair.
    Predict(QueryArgs),
    /// Top-K rationales for one pair.
    Rationalize(RationalizeArgs),
    /// Precision, recall and F1 on labelled pairs.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset with its ground truth.
    Synth(SynthArgs),
    /// Re-derive the labels of a synthetic dataset from its ground truth.
    Check {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Compare analytic gradients against central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    head: String,
    #[arg(long)]
    tail: String,
    /// Defaults to the mode the model was trained with.
    #[arg(long)]
    mode: Option<Mode>,
    /// Knowledge base for CWA mode.
    #[arg(long)]
    triples: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RationalizeArgs {
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, default_value_t = 5)]
    topk: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    triples: Option<PathBuf>,
    /// Write one JSON line per pair with its probability.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_entities: Option<usize>,
    #[arg(long)]
    n_clusters: Option<usize>,
    #[arg(long)]
    n_rel: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELREC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    if e.downcast_ref::<Numeric>().is_some() {
        return 3;
    }
    match e.downcast_ref::<relrec::Error>() {
        Some(relrec::Error::Divergence { .. } | relrec::Error::NonFiniteGradient(_)) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Train(args) => train(args),
        Command::Predict(args) => predict_cmd(args),
        Command::Rationalize(args) => rationalize(args),
        Command::Evaluate(args) => evaluate(args, threads),
        Command::Synth(args) => synth(args),
        Command::Check { dir } => check(&dir),
        Command::GradCheck { seed, tolerance } => gradcheck(seed, tolerance),
    }
}

fn required(value: Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    value.ok_or_else(|| Usage(format!("--{flag} is required (flag or config file)")).into())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    cfg.graph = args.graph.or(cfg.graph);
    cfg.triples = args.triples.or(cfg.triples);
    cfg.pairs = args.pairs.or(cfg.pairs);
    cfg.out = args.out.or(cfg.out);
    cfg.log = args.log.or(cfg.log);
    let tc = &mut cfg.train;
    tc.seed = args.seed.unwrap_or(tc.seed);
    tc.mode = args.mode.unwrap_or(tc.mode);
    tc.d = args.d.unwrap_or(tc.d);
    tc.lr = args.lr.unwrap_or(tc.lr);
    tc.max_epochs = args.max_epochs.unwrap_or(tc.max_epochs);
    tc.validate().map_err(|e| Usage(e.to_string()))?;

    let graph_path = required(cfg.graph, "graph")?;
    let triples_path = required(cfg.triples, "triples")?;
    let pairs_path = required(cfg.pairs, "pairs")?;
    let out = required(cfg.out, "out")?;
    let log_path = cfg.log.unwrap_or_else(|| sibling(&out, ".log.csv"));
    let test_path = cfg.test_pairs.unwrap_or_else(|| sibling(&out, ".test.tsv"));

    let graph = CoocGraph::load(&graph_path)?;
    let vocab = graph.vocab().clone();
    let schema = RelationSchema::new(scan_relation_names(&triples_path)?)?;
    let triples = TripleSet::load(&triples_path, &vocab, &schema)?;
    let pairs = load_pairs(&pairs_path, &vocab, &schema)?;
    let target = pairs.first().map(|p| p.relation).context("pairs file holds no pairs")?;
    log::info!(
        "graph: {} nodes, {} edges; {} triples over {} relations; {} pairs for `{}`",
        graph.num_nodes(),
        graph.num_edges(),
        triples.len(),
        schema.n_rel(),
        pairs.len(),
        schema.name(target)
    );

    let split = split_dataset(&pairs, SPLIT, cfg.train.seed)?;
    let ppmi = graph.ppmi()?;
    let outcome = joint_train(&graph, &ppmi, &triples, &split, schema.n_rel(), &cfg.train)?;
    let test = relrec::training::evaluate_pairs(&outcome.params, &split.test, &cfg.train.pipeline(), Some(&outcome.kb));

    let checkpoint = Checkpoint {
        params: outcome.params,
        adam: outcome.adam,
        vocab,
        schema,
        config: cfg.train,
        target_relation: Some(target),
    };
    save_checkpoint(&out, &checkpoint)?;
    std::fs::write(&log_path, outcome.log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
    save_pairs(&test_path, &split.test, &checkpoint.vocab, &checkpoint.schema)?;
    println!(
        "{}",
        json!({
            "checkpoint": out,
            "log": log_path,
            "test_pairs": test_path,
            "relation": checkpoint.schema.name(target),
            "epochs": outcome.log.epochs.len(),
            "best_epoch": outcome.best_epoch,
            "dev": outcome.best_dev,
            "test": test,
        })
    );
    Ok(())
}

/// Checkpoint, prediction settings and (for CWA) the knowledge base.
struct Model {
    ck: Checkpoint,
    target: usize,
    mode: Mode,
    kb: Option<TripleSet>,
}

impl Model {
    fn open(path: &Path, mode: Option<Mode>, triples: Option<&Path>) -> anyhow::Result<Self> {
        let ck = load_checkpoint(path)?;
        let target = ck.target_relation.context("checkpoint has no target relation")?;
        let mode = mode.unwrap_or(ck.config.mode);
        let kb = match (mode, triples) {
            (_, Some(p)) => Some(TripleSet::load(p, &ck.vocab, &ck.schema)?),
            (Mode::Cwa, None) => return Err(Usage("--mode cwa needs --triples (the knowledge base)".into()).into()),
            (Mode::Owa, None) => None,
        };
        Ok(Self { ck, target, mode, kb })
    }

    fn entity(&self, term: &str) -> anyhow::Result<usize> {
        match self.ck.vocab.get(term) {
            Some(id) => Ok(id),
            None => bail!(
                "unknown term `{term}`; nearest matches: {}",
                self.ck.vocab.nearest(term, SUGGESTIONS).join(", ")
            ),
        }
    }

    fn predict(&self, head: usize, tail: usize) -> relrec::Prediction {
        let opts = relrec::PipelineOptions {
            mode: self.mode,
            ..self.ck.config.pipeline()
        };
        predict(&self.ck.params, head, tail, &opts, self.kb.as_ref())
    }
}

fn predict_cmd(args: QueryArgs) -> anyhow::Result<()> {
    let model = Model::open(&args.model, args.mode, args.triples.as_deref())?;
    let (h, t) = (model.entity(&args.head)?, model.entity(&args.tail)?);
    let p = model.predict(h, t);
    println!(
        "{}",
        json!({
            "head": args.head,
            "tail": args.tail,
            "relation": model.ck.schema.name(model.target),
            "mode": model.mode,
            "probability": p.probability,
            "predicted": p.probability >= 0.5,
        })
    );
    Ok(())
}

fn rationalize(args: RationalizeArgs) -> anyhow::Result<()> {
    if args.topk == 0 {
        return Err(Usage("--topk must be positive".into()).into());
    }
    let q = args.query;
    let model = Model::open(&q.model, q.mode, q.triples.as_deref())?;
    let (h, t) = (model.entity(&q.head)?, model.entity(&q.tail)?);
    let p = model.predict(h, t);
    let report = extract_rationales(&p, model.target, args.topk, model.mode, &model.ck.vocab, &model.ck.schema);
    println!("{}", report.to_json_line());
    print!("{}", report.render_table());
    Ok(())
}

fn evaluate(args: EvaluateArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let model = Model::open(&args.model, args.mode, args.triples.as_deref())?;
    let pairs = load_pairs(&args.pairs, &model.ck.vocab, &model.ck.schema)?;
    if pairs.is_empty() {
        return Err(relrec::Error::Empty("labelled pairs").into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .context("starting worker threads")?;
    let probs: Vec<f64> = pool.install(|| pairs.par_iter().map(|p| model.predict(p.head, p.tail).probability).collect());
    let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    let m = f1_score(&probs, &labels, 0.5);

    if let Some(path) = &args.dump {
        let mut out = Vec::new();
        for (p, prob) in pairs.iter().zip(&probs) {
            let line = json!({
                "head": model.ck.vocab.term(p.head),
                "tail": model.ck.vocab.term(p.tail),
                "label": u8::from(p.label),
                "probability": prob,
            });
            writeln!(out, "{line}").expect("write to Vec");
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }

    let relation = model.ck.schema.name(model.target);
    println!(
        "{}",
        json!({
            "relation": relation,
            "mode": model.mode,
            "samples": m.samples(),
            "precision": m.precision,
            "recall": m.recall,
            "f1": m.f1,
            "tp": m.tp,
            "fp": m.fp,
            "fn": m.fn_,
            "tn": m.tn,
        })
    );
    print!(
        "{}",
        render_f1_table(
            &[relation],
            &[F1Row {
                method: format!("relrec ({})", model.mode),
                cells: vec![vec![m.f1]],
            }],
        )
    );
    Ok(())
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let d = SynthConfig::default();
    let config = SynthConfig {
        seed: args.seed.unwrap_or(d.seed),
        n_entities: args.n_entities.unwrap_or(d.n_entities),
        n_clusters: args.n_clusters.unwrap_or(d.n_clusters),
        n_rel: args.n_rel.unwrap_or(d.n_rel),
        density: args.density.unwrap_or(d.density),
        noise: args.noise.unwrap_or(d.noise),
        ..d
    };
    let world = generate_synthetic(&config).map_err(|e| match e {
        relrec::Error::InvalidArgument(m) => anyhow::Error::new(Usage(m)),
        e => e.into(),
    })?;
    world.write(&args.out)?;
    let mismatches = check_world_dir(&args.out)?;
    if mismatches != 0 {
        bail!("written dataset disagrees with its ground truth in {mismatches} labels");
    }
    println!(
        "{}",
        json!({
            "dir": args.out,
            "config": config,
            "entities": world.graph.num_nodes(),
            "edges": world.graph.num_edges(),
            "triples": world.triples.len(),
            "pairs": world.pairs.len(),
            "positives": world.pairs.iter().filter(|p| p.label).count(),
            "oracle_mismatches": mismatches,
        })
    );
    Ok(())
}

fn check(dir: &Path) -> anyhow::Result<()> {
    let mismatches = check_world_dir(dir)?;
    println!("{}", json!({ "dir": dir, "oracle_mismatches": mismatches }));
    if mismatches != 0 {
        bail!("{mismatches} labels disagree with the ground truth");
    }
    Ok(())
}

fn gradcheck(seed: u64, tolerance: f64) -> anyhow::Result<()> {
    let spec = GradCheckSpec {
        seed,
        tolerance,
        ..GradCheckSpec::default()
    };
    let mut failed = Vec::new();
    for kind in LossKind::ALL {
        let report = grad_check(kind, &spec)?;
        println!(
            "{}",
            json!({
                "loss": kind.name(),
                "passed": report.passed(),
                "max_rel_error": report.max_rel_error(),
                "failures": report.failures().iter().map(|id| id.name()).collect::<Vec<_>>(),
            })
        );
        print!("{report}");
        if !report.passed() {
            failed.push(kind.name());
        }
    }
    if !failed.is_empty() {
        return Err(Numeric(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Usage("x".into()).into()), 1);
        assert_eq!(exit_code(&relrec::Error::Empty("x").into()), 2);
        let div: anyhow::Error = relrec::Error::Divergence {
            epoch: 3,
            detail: "NaN".into(),
        }
        .into();
        assert_eq!(exit_code(&div.context("training")), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
