use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use selfracg::adapters::{embed_text, AdapterSet, EmbedKind};
use selfracg::checkpoint::{file_sha256, sha256_hex};
use selfracg::config::RunConfig;
use selfracg::corpus::{read_jsonl, write_jsonl, Fragment, SourceFile, TrainingPair};
use selfracg::index::VectorIndex;
use selfracg::metrics::{render_table, EvalReport};
use selfracg::model::Transformer;
use selfracg::pipeline::{CompletionOutput, CompletionTask, Pipeline, Strategy};
use selfracg::trainer::{Stage, StepRecord};
use selfracg::workflow::{self, Dataset};
use selfracg::{Error, Result};

#[derive(Parser)]
#[command(name = "selfracg", version, about = "Self-expressed retrieval for code completion, at desk scale")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, default_value = "run", global = true)]
    run_dir: PathBuf,
    /// Worker threads (default: SELFRACG_WORKERS, else all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Split files into fragments, training pairs and completion tasks.
    Chunk,
    /// Train the base language model.
    Pretrain,
    /// Train retrieval adapters.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Build or query the fragment index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Print the fragments a strategy retrieves for one context.
    Retrieve {
        #[command(flatten)]
        input: ContextArgs,
        #[arg(long, default_value = "self")]
        strategy: Strategy,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Complete every held-out task with one strategy.
    Complete {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score completions and retrieval, and write the report.
    Eval,
    /// Compare analytic adapter gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Check that the retrieval branch leaves generation logits untouched.
    Invariance {
        #[arg(long)]
        probes: Option<usize>,
    },
    /// synth, chunk, pretrain, train 1, train 2, index build, complete, eval.
    All,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed every fragment with the latest adapters.
    Build {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
    },
    /// Top-k fragments for a context embedding.
    Search {
        #[command(flatten)]
        input: ContextArgs,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ContextArgs {
    /// Context text.
    #[arg(long)]
    text: Option<String>,
    /// File holding the context.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Held-out task number whose context to use.
    #[arg(long)]
    task: Option<usize>,
}

const CORPUS: &str = "outputs/corpus.jsonl";
const HELDOUT: &str = "outputs/heldout.jsonl";
const FRAGMENTS: &str = "outputs/fragments.jsonl";
const TRAIN_PAIRS: &str = "outputs/train_pairs.jsonl";
const HELDOUT_PAIRS: &str = "outputs/heldout_pairs.jsonl";
const TASKS: &str = "outputs/tasks.jsonl";
const MODEL: &str = "checkpoints/model.bin";
const STAGE2_PAIRS: &str = "outputs/stage2_pairs.jsonl";
const STAGE2_HELDOUT: &str = "outputs/stage2_heldout.jsonl";
const INDEX: &str = "index/index.bin";

fn adapters_path(stage: u8) -> String {
    format!("checkpoints/adapters_stage{stage}.bin")
}

fn completions_path(s: Strategy) -> String {
    format!("outputs/completions_{}.jsonl", s.name())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    verb: String,
    config_sha256: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    /// The only field allowed to differ between identical reruns.
    timing: Timing,
}

#[derive(Debug, Serialize, Deserialize)]
struct Timing {
    finished_unix: u64,
    elapsed_secs: f64,
}

#[derive(Serialize)]
struct LossRecord {
    step: usize,
    loss: f64,
}

fn loss_log(records: &[StepRecord]) -> Vec<LossRecord> {
    records
        .iter()
        .map(|r| LossRecord {
            step: r.step,
            loss: r.loss,
        })
        .collect()
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    started: Instant,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn ensure_dirs(&self) -> Result<()> {
        for sub in ["config", "manifests", "checkpoints", "index", "outputs", "report"] {
            let p = self.dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let p = self.path("config/run.cfg");
        std::fs::write(&p, self.cfg.to_text()).map_err(|e| io_err(&p, e))
    }

    fn manifests(&self) -> Result<Vec<Manifest>> {
        let dir = self.dir.join("manifests");
        let mut out = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            out.push(serde_json::from_str(&text).map_err(|e| Error::Corrupt {
                path: p.clone(),
                reason: e.to_string(),
            })?);
        }
        Ok(out)
    }

    /// Hashes of `inputs`, each checked against the manifest that produced it.
    fn check_inputs(&self, inputs: &[&str]) -> Result<BTreeMap<String, String>> {
        let manifests = self.manifests()?;
        let mut out = BTreeMap::new();
        for rel in inputs {
            let p = self.path(rel);
            if !p.exists() {
                return Err(Error::MissingInput(format!("{} (run the step that produces it first)", p.display())));
            }
            let found = file_sha256(&p)?;
            if let Some(expected) = manifests.iter().rev().find_map(|m| m.outputs.get(*rel)) {
                if *expected != found {
                    return Err(Error::HashMismatch {
                        what: "input artifact",
                        expected: format!("{expected} for {rel}"),
                        found,
                    });
                }
            }
            out.insert(rel.to_string(), found);
        }
        Ok(out)
    }

    fn finish(&self, verb: &str, inputs: BTreeMap<String, String>, outputs: &[String]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for rel in outputs {
            hashes.insert(rel.clone(), file_sha256(&self.path(rel))?);
        }
        let m = Manifest {
            verb: verb.to_string(),
            config_sha256: sha256_hex(self.cfg.to_text().as_bytes()),
            inputs,
            outputs: hashes,
            timing: Timing {
                finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                elapsed_secs: self.started.elapsed().as_secs_f64(),
            },
        };
        let p = self.path(&format!("manifests/{verb}.json"));
        std::fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| io_err(&p, e))?;
        log::info!("{verb} done");
        Ok(())
    }

    fn model(&self) -> Result<Transformer> {
        Ok(Transformer::load(&self.path(MODEL))?.0)
    }

    fn adapters(&self, stage: u8) -> Result<AdapterSet> {
        Ok(AdapterSet::load(&self.path(&adapters_path(stage)))?.0)
    }

    fn latest_stage(&self) -> u8 {
        if self.path(&adapters_path(2)).exists() {
            2
        } else {
            1
        }
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn synth(run: &Run) -> Result<()> {
    let data = workflow::synthesize(&run.cfg)?;
    write_jsonl(&run.path(CORPUS), &data.train)?;
    write_jsonl(&run.path(HELDOUT), &data.heldout)?;
    run.finish("synth", BTreeMap::new(), &[CORPUS.into(), HELDOUT.into()])
}

fn chunk(run: &Run) -> Result<()> {
    let inputs = run.check_inputs(&[CORPUS, HELDOUT])?;
    let data = Dataset {
        train: read_jsonl::<SourceFile>(&run.path(CORPUS))?,
        heldout: read_jsonl(&run.path(HELDOUT))?,
    };
    let chunked = workflow::chunk_dataset(&data, run.cfg.interval)?;
    write_jsonl(&run.path(FRAGMENTS), &chunked.fragments)?;
    write_jsonl(&run.path(TRAIN_PAIRS), &chunked.train_pairs)?;
    write_jsonl(&run.path(HELDOUT_PAIRS), &chunked.heldout_pairs)?;
    write_jsonl(&run.path(TASKS), &chunked.tasks())?;
    let outs = [FRAGMENTS, TRAIN_PAIRS, HELDOUT_PAIRS, TASKS].map(String::from);
    run.finish("chunk", inputs, &outs)
}

fn pretrain(run: &Run) -> Result<()> {
    let inputs = run.check_inputs(&[TRAIN_PAIRS])?;
    let pairs: Vec<TrainingPair> = read_jsonl(&run.path(TRAIN_PAIRS))?;
    let (model, report) = workflow::pretrain_model(&run.cfg, &pairs)?;
    model.save(&run.path(MODEL))?;
    write_jsonl(&run.path("checkpoints/pretrain_loss.jsonl"), &report.losses)?;
    run.finish("pretrain", inputs, &[MODEL.into(), "checkpoints/pretrain_loss.jsonl".into()])
}

fn train(run: &Run, stage: u8) -> Result<()> {
    let log = format!("checkpoints/train_stage{stage}.jsonl");
    let out = adapters_path(stage);
    if stage == 1 {
        let inputs = run.check_inputs(&[MODEL, TRAIN_PAIRS])?;
        let model = run.model()?;
        let pairs: Vec<TrainingPair> = read_jsonl(&run.path(TRAIN_PAIRS))?;
        let (adapters, report) = workflow::train_stage1(&run.cfg, &model, &pairs)?;
        adapters.save(&run.path(&out))?;
        write_jsonl(&run.path(&log), &loss_log(&report.records))?;
        return run.finish("train_stage1", inputs, &[out, log]);
    }
    let stage1 = adapters_path(1);
    let inputs = run.check_inputs(&[MODEL, TRAIN_PAIRS, HELDOUT_PAIRS, FRAGMENTS, &stage1])?;
    let model = run.model()?;
    let stage1 = run.adapters(1)?;
    let pairs: Vec<TrainingPair> = read_jsonl(&run.path(TRAIN_PAIRS))?;
    let heldout: Vec<TrainingPair> = read_jsonl(&run.path(HELDOUT_PAIRS))?;
    let fragments: Vec<Fragment> = read_jsonl(&run.path(FRAGMENTS))?;
    let seed = run.cfg.base_seed();
    let queries = workflow::stage2_queries(&run.cfg, &pairs);
    let samples = workflow::stage2_pairs(&run.cfg, &model, &queries, &fragments, seed.derive_str("stage2 samples"))?;
    let held_queries = workflow::stage2_queries(&run.cfg, &heldout);
    let held = workflow::stage2_pairs(&run.cfg, &model, &held_queries, &fragments, seed.derive_str("stage2 heldout"))?;
    write_jsonl(&run.path(STAGE2_PAIRS), &samples)?;
    write_jsonl(&run.path(STAGE2_HELDOUT), &held)?;
    let (adapters, report) = workflow::train_stage2(&run.cfg, &model, &stage1, &samples)?;
    adapters.save(&run.path(&out))?;
    write_jsonl(&run.path(&log), &loss_log(&report.records))?;
    run.finish("train_stage2", inputs, &[out, log, STAGE2_PAIRS.into(), STAGE2_HELDOUT.into()])
}

fn index_build(run: &Run, stage: Option<u8>) -> Result<()> {
    let stage = stage.unwrap_or_else(|| run.latest_stage());
    let adapters_rel = adapters_path(stage);
    let inputs = run.check_inputs(&[MODEL, FRAGMENTS, &adapters_rel])?;
    let model = run.model()?;
    let adapters = run.adapters(stage)?;
    let fragments: Vec<Fragment> = read_jsonl(&run.path(FRAGMENTS))?;
    let index = workflow::build_index(&model, &adapters, &fragments)?;
    index.save(&run.path(INDEX))?;
    run.finish("index", inputs, &[INDEX.into()])
}

/// Model, indexed adapters and fragments, with the index checked against them.
struct Loaded {
    model: Transformer,
    adapters: AdapterSet,
    fragments: Vec<Fragment>,
    index: VectorIndex,
}

fn load_for_retrieval(run: &Run) -> Result<Loaded> {
    run.check_inputs(&[MODEL, FRAGMENTS, INDEX])?;
    let model = run.model()?;
    let fragments: Vec<Fragment> = read_jsonl(&run.path(FRAGMENTS))?;
    let index = VectorIndex::load(&run.path(INDEX))?;
    let stage = [2u8, 1]
        .into_iter()
        .filter(|s| run.path(&adapters_path(*s)).exists())
        .find(|s| {
            run.adapters(*s)
                .is_ok_and(|a| sha256_hex(&a.to_bytes()) == index.metadata().adapter_hash)
        })
        .ok_or_else(|| Error::HashMismatch {
            what: "index adapters",
            expected: index.metadata().adapter_hash.clone(),
            found: "no adapter checkpoint with that hash".into(),
        })?;
    let adapters = run.adapters(stage)?;
    let expected = workflow::index_metadata(&model, &adapters, &fragments);
    let (index, _) = VectorIndex::load_checked(&run.path(INDEX), &expected, true)?;
    Ok(Loaded {
        model,
        adapters,
        fragments,
        index,
    })
}

fn context_text(run: &Run, input: &ContextArgs) -> Result<String> {
    if let Some(t) = &input.text {
        return Ok(t.replace("\\n", "\n"));
    }
    if let Some(p) = &input.file {
        return std::fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(p.display().to_string()),
            _ => io_err(p, e),
        });
    }
    let n = input.task.expect("clap enforces one context source");
    run.check_inputs(&[TASKS])?;
    let tasks: Vec<CompletionTask> = read_jsonl(&run.path(TASKS))?;
    tasks
        .get(n)
        .map(|t| t.input.context.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("task {n} out of range (have {})", tasks.len())))
}

fn index_search(run: &Run, input: &ContextArgs, k: usize) -> Result<()> {
    let l = load_for_retrieval(run)?;
    let text = context_text(run, input)?;
    let rep = embed_text(&l.model, &l.adapters, text.as_bytes(), EmbedKind::Context)?;
    for hit in l.index.search(&rep, k)? {
        println!("{}", serde_json::to_string(&hit)?);
    }
    Ok(())
}

fn retrieve(run: &Run, input: &ContextArgs, strategy: Strategy, k: Option<usize>) -> Result<()> {
    let l = load_for_retrieval(run)?;
    let text = context_text(run, input)?;
    let pipe = Pipeline::new(&l.model, &l.adapters, &l.index, &l.fragments)?;
    for hit in pipe.retrieve(&text, strategy, k.unwrap_or(run.cfg.k))? {
        println!("{}", serde_json::to_string(&hit)?);
    }
    Ok(())
}

fn pipeline<'a>(run: &Run, l: &'a Loaded) -> Result<Pipeline<'a>> {
    let mut pipe = Pipeline::new(&l.model, &l.adapters, &l.index, &l.fragments)?;
    pipe.query_lines = run.cfg.interval;
    pipe.window = run.cfg.window;
    Ok(pipe)
}

fn complete(run: &Run, strategy: Strategy, k: Option<usize>) -> Result<()> {
    let l = load_for_retrieval(run)?;
    let inputs = run.check_inputs(&[MODEL, FRAGMENTS, INDEX, TASKS])?;
    let tasks: Vec<CompletionTask> = read_jsonl(&run.path(TASKS))?;
    let pipe = pipeline(run, &l)?;
    let task_inputs: Vec<_> = tasks.iter().map(|t| t.input.clone()).collect();
    let outputs = pipe.complete_all(&task_inputs, strategy, k.unwrap_or(run.cfg.k))?;
    let out = completions_path(strategy);
    write_jsonl(&run.path(&out), &outputs)?;
    run.finish(&format!("complete_{}", strategy.name()), inputs, &[out])
}

#[derive(Serialize)]
struct PreferenceReport {
    pairs: usize,
    stage1_mrr10: f64,
    stage2_mrr10: f64,
}

fn eval(run: &Run) -> Result<()> {
    let l = load_for_retrieval(run)?;
    let tasks: Vec<CompletionTask> = read_jsonl(&run.path(TASKS))?;
    let pipe = pipeline(run, &l)?;
    let done: Vec<Strategy> = Strategy::ALL
        .into_iter()
        .filter(|s| run.path(&completions_path(*s)).exists())
        .collect();
    if done.is_empty() {
        return Err(Error::MissingInput("no completion outputs; run `complete` first".into()));
    }
    let mut rels: Vec<String> = [MODEL, FRAGMENTS, INDEX, TASKS].map(String::from).to_vec();
    rels.extend(done.iter().map(|s| completions_path(*s)));
    let inputs = run.check_inputs(&rels.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut reports = Vec::new();
    let mut jsonl = String::new();
    for s in done {
        let outputs: Vec<CompletionOutput> = read_jsonl(&run.path(&completions_path(s)))?;
        let mut report = EvalReport::new(s.name());
        report.completions = workflow::score_completions(&outputs, &tasks)?;
        if s.uses_index() {
            report.retrievals = workflow::retrieval_records(&pipe, &tasks, s)?;
        }
        jsonl.push_str(&report.to_jsonl()?);
        reports.push(report);
    }
    let table = render_table(&reports);
    print!("{table}");
    run.write_text("report/eval.jsonl", &jsonl)?;
    run.write_text("report/table.txt", &table)?;
    let mut outs = vec!["report/eval.jsonl".to_string(), "report/table.txt".to_string()];
    if run.path(STAGE2_HELDOUT).exists() && run.path(&adapters_path(2)).exists() {
        run.check_inputs(&[STAGE2_HELDOUT, &adapters_path(1), &adapters_path(2)])?;
        let held: Vec<TrainingPair> = read_jsonl(&run.path(STAGE2_HELDOUT))?;
        let pref = PreferenceReport {
            pairs: held.len(),
            stage1_mrr10: workflow::preference_mrr(&l.model, &run.adapters(1)?, &held)?,
            stage2_mrr10: workflow::preference_mrr(&l.model, &run.adapters(2)?, &held)?,
        };
        println!(
            "preference MRR@10 over {} pairs: stage 1 {:.4}, stage 2 {:.4}",
            pref.pairs, pref.stage1_mrr10, pref.stage2_mrr10
        );
        run.write_text("report/preference.json", &(serde_json::to_string_pretty(&pref)? + "\n"))?;
        outs.push("report/preference.json".into());
    }
    run.finish("eval", inputs, &outs)
}

fn gradcheck(run: &Run, stage: u8) -> Result<()> {
    let stage = Stage::try_from(stage).map_err(Error::InvalidArgument)?;
    let report = workflow::gradcheck_probe(stage, run.cfg.base_seed().derive_str("gradcheck"))?;
    println!(
        "{} coordinates, max relative error {:.3e}",
        report.coordinates, report.max_relative_error
    );
    if report.max_relative_error > 1e-4 {
        return Err(Error::InvalidArgument(format!(
            "gradient check failed: max relative error {:.3e} at {:?}",
            report.max_relative_error, report.worst
        )));
    }
    Ok(())
}

fn invariance(run: &Run, probes: Option<usize>) -> Result<()> {
    let probes = probes.unwrap_or(run.cfg.probes);
    let r = workflow::invariance_probe(probes, run.cfg.base_seed().derive_str("invariance"))?;
    println!("{} mismatching logits over {} probes", r.probes - r.identical, r.probes);
    println!("vanilla LoRA shifted logits on {} of {} probes", r.vanilla_differs, r.probes);
    if r.identical != r.probes {
        return Err(Error::InvalidArgument(format!(
            "retrieval branch changed logits on {} probes",
            r.probes - r.identical
        )));
    }
    Ok(())
}

fn execute(run: &Run, command: &Command) -> Result<()> {
    match command {
        Command::Synth => synth(run),
        Command::Chunk => chunk(run),
        Command::Pretrain => pretrain(run),
        Command::Train { stage } => train(run, *stage),
        Command::Index(IndexCommand::Build { stage }) => index_build(run, *stage),
        Command::Index(IndexCommand::Search { input, k }) => index_search(run, input, *k),
        Command::Retrieve { input, strategy, k } => retrieve(run, input, *strategy, *k),
        Command::Complete { strategy, k } => complete(run, *strategy, *k),
        Command::Eval => eval(run),
        Command::Gradcheck { stage } => gradcheck(run, *stage),
        Command::Invariance { probes } => invariance(run, *probes),
        Command::All => {
            synth(run)?;
            chunk(run)?;
            pretrain(run)?;
            train(run, 1)?;
            train(run, 2)?;
            index_build(run, None)?;
            for s in Strategy::ALL {
                complete(run, s, None)?;
            }
            eval(run)
        }
    }
}

fn workers(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SELFRACG_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("SELFRACG_WORKERS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn main_inner(cli: Cli) -> Result<()> {
    if let Some(n) = workers(cli.workers)? {
        if n == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let run = Run {
        dir: cli.run_dir,
        cfg,
        started: Instant::now(),
    };
    run.ensure_dirs()?;
    execute(&run, &cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage: {first}");
            return ExitCode::from(2);
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
