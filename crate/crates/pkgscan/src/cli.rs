//! Command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use pkgscan_core::dataset::SplitRatios;
use pkgscan_core::describe::Granularity;
use pkgscan_core::kb::{embed_all, ingest_advisories, ingest_snippets, yara_documents};
use pkgscan_core::metrics::render_table;
use pkgscan_core::retrieval::{build_index, Embedder, KnowledgeDocument, Source};
use pkgscan_core::yara::parse_yara;
use pkgscan_core::ChatModel;

use crate::collection::{read_advisories, read_collection, read_snippets, read_yara_sources, write_collection};
use crate::config::{documented_keys, help_text, AppConfig, ENV_PREFIX};
use crate::corpus::resolve_target;
use crate::dataset_io::{dataset_rows, write_dataset};
use crate::experiment::{evaluate_predictions, experiment_name, read_report, run_experiment, write_json};
use crate::ingest::IngestOptions;
use crate::pipeline::{scan_all, sibling, write_jsonl, write_scan};
use crate::runtime::{build_chat, build_embedder, load_manifest, Runtime};

/// Prints to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Exit status for configuration and input-path failures.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser)]
#[command(name = "pkgscan", version, about = "Detect malicious Python packages with LLM-backed analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one configuration key; `--section.key VALUE` is equivalent.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Top-level seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (`scan.jobs`); defaults to the logical CPU count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Chat provider (`provider.kind`): mock or openai.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct PipelineArgs {
    /// zero-shot, rag or crag (`scan.mode`).
    #[arg(long)]
    mode: Option<String>,
    /// llm or rule (`scan.strategy`).
    #[arg(long)]
    strategy: Option<String>,
    /// Collection files, comma separated (`kb.collections`).
    #[arg(long, value_name = "FILES")]
    kb: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Classify packages: directories, .tar.gz, .zip, .whl, or a corpus with manifest.csv.
    Scan {
        #[arg(required = true)]
        targets: Vec<PathBuf>,
        /// Line-delimited report.
        #[arg(long, default_value = "report.jsonl")]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Knowledge-base collections.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Fine-tuning datasets.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Score a labeled corpus, or an external prediction file.
    Evaluate {
        /// Labeled corpus (directory with manifest.csv, or the CSV itself).
        #[arg(long, required_unless_present = "predictions")]
        corpus: Option<PathBuf>,
        /// CSV with package,label,prediction columns.
        #[arg(long, conflicts_with = "corpus")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Row name in rendered tables.
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Reports.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Yara,
    Advisory,
    Snippet,
}

#[derive(Clone, Copy, ValueEnum)]
enum DescribeArg {
    Template,
    Llm,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Build a collection file from a knowledge source.
    Build {
        #[arg(long, value_enum)]
        source: SourceArg,
        /// Rule file or directory, advisory JSONL, or snippet JSONL or directory.
        input: PathBuf,
        /// Collection file; `<source>.collection.jsonl` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Collection name; the source name by default.
        #[arg(long)]
        name: Option<String>,
        /// How YARA rules become text.
        #[arg(long, value_enum, default_value = "template")]
        describe: DescribeArg,
    },
    /// Top-k documents of a collection for a query.
    Query {
        /// Collection file, or the name of a configured collection.
        #[arg(long)]
        collection: String,
        /// Defaults to `crag.k`.
        #[arg(short)]
        k: Option<usize>,
        query: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Package,
    File,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write train/val/test CSVs and manifest.json from a labeled corpus.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "package")]
        granularity: GranularityArg,
        /// train,val,test
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Comparison table of experiment reports.
    Render {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: i32,
    error: anyhow::Error,
}

trait OrExit<T> {
    fn or_exit(self, code: i32) -> Result<T, Failure>;
}

impl<T> OrExit<T> for anyhow::Result<T> {
    fn or_exit(self, code: i32) -> Result<T, Failure> {
        self.map_err(|error| Failure { code, error })
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

/// Rewrites `--section.key VALUE` and `--section.key=VALUE` into `--set`.
pub fn expand_dotted(args: Vec<String>) -> Vec<String> {
    let keys: Vec<String> = documented_keys().into_iter().map(|(k, _)| k).filter(|k| k.contains('.')).collect();
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            out.push(arg);
            out.extend(it.by_ref());
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !keys.contains(&key) {
            out.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().unwrap_or_default(),
        };
        out.push("--set".into());
        out.push(format!("{key}={value}"));
    }
    out
}

fn with_key_help(cmd: clap::Command, text: &str) -> clap::Command {
    let cmd = cmd.after_help(text.to_string());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    names.into_iter().fold(cmd, |c, name| c.mut_subcommand(name, |s| with_key_help(s, text)))
}

fn load_config(global: &Global, pipeline: Option<&PipelineArgs>) -> anyhow::Result<AppConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = global.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if let Some(j) = global.jobs {
        overrides.push(("scan.jobs".to_string(), j.to_string()));
    }
    if let Some(p) = &global.provider {
        overrides.push(("provider.kind".to_string(), p.clone()));
    }
    if let Some(p) = pipeline {
        if let Some(m) = &p.mode {
            overrides.push(("scan.mode".to_string(), m.clone()));
        }
        if let Some(s) = &p.strategy {
            overrides.push(("scan.strategy".to_string(), s.clone()));
        }
        if let Some(k) = &p.kb {
            overrides.push(("kb.collections".to_string(), k.clone()));
        }
    }
    for s in &global.set {
        let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    AppConfig::load(global.config.as_deref(), &env, &overrides)
}

fn targets(paths: &[PathBuf]) -> anyhow::Result<Vec<crate::corpus::CorpusEntry>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(resolve_target(p)?);
    }
    Ok(out)
}

fn cmd_scan(global: &Global, paths: &[PathBuf], out: &Path, pipeline: &PipelineArgs) -> Result<(), Failure> {
    let cfg = load_config(global, Some(pipeline)).or_exit(EXIT_CONFIG)?;
    let entries = targets(paths).or_exit(EXIT_CONFIG)?;
    let rt = Runtime::new(cfg).or_exit(EXIT_CONFIG)?;
    let result = scan_all(&rt, &entries)?;
    let audit = write_scan(out, &result, rt.config.scan.mode)?;
    rt.flush_log()?;
    for r in &result.reports {
        let score = r.verdict.score.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        out!("{}\t{}\t{}", r.package, r.verdict.outcome, score);
    }
    eprintln!("report: {}", out.display());
    if let Some(a) = audit {
        eprintln!("retrieval audit: {}", a.display());
    }
    Ok(())
}

fn cmd_kb_build(
    global: &Global,
    source: SourceArg,
    input: &Path,
    out: Option<&Path>,
    name: Option<&str>,
    describe: DescribeArg,
) -> Result<(), Failure> {
    let cfg = load_config(global, None).or_exit(EXIT_CONFIG)?;
    if !input.exists() {
        return Err(Failure { code: EXIT_CONFIG, error: anyhow!("{}: no such file or directory", input.display()) });
    }
    let embedder = build_embedder(&cfg).or_exit(EXIT_CONFIG)?;
    let (kind, mut docs): (Source, Vec<KnowledgeDocument>) = match source {
        SourceArg::Yara => {
            let chat = match describe {
                DescribeArg::Llm => Some(build_chat(&cfg).or_exit(EXIT_CONFIG)?),
                DescribeArg::Template => None,
            };
            let mut rules = Vec::new();
            for (path, text) in read_yara_sources(input)? {
                let parsed = parse_yara(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
                for e in &parsed.errors {
                    eprintln!("{}:{}: {}", path.display(), e.line, e.reason);
                }
                rules.extend(parsed.rules);
            }
            let docs = yara_documents(&rules, chat.as_ref().map(|c| c as &dyn ChatModel))
                .map_err(|e| anyhow!("describing rules: {e}"))?;
            (Source::Yara, docs)
        }
        SourceArg::Advisory => {
            let ingest = ingest_advisories(read_advisories(input)?);
            for s in &ingest.skipped {
                eprintln!("skipped advisory {}: missing {}", s.record, s.field);
            }
            (Source::Advisory, ingest.documents)
        }
        SourceArg::Snippet => {
            let ingest = ingest_snippets(read_snippets(input)?, cfg.ingest.snippet_max_len);
            if !ingest.excluded.is_empty() {
                eprintln!("excluded {} snippets over {} characters", ingest.excluded.len(), cfg.ingest.snippet_max_len);
            }
            (Source::Snippet, ingest.documents)
        }
    };
    embed_all(&mut docs, &embedder).map_err(anyhow::Error::from)?;
    let name = name.unwrap_or(kind.as_str());
    let index = build_index(name, embedder.dimension(), docs).map_err(anyhow::Error::from)?;
    let default_out = PathBuf::from(format!("{}.collection.jsonl", kind.as_str()));
    let out = out.unwrap_or(&default_out);
    write_collection(out, &index, Some(kind))?;
    out!("{}", index.len());
    eprintln!("{}: {} documents written to {}", name, index.len(), out.display());
    Ok(())
}

fn cmd_kb_query(global: &Global, collection: &str, k: Option<usize>, query: &str) -> Result<(), Failure> {
    let cfg = load_config(global, None).or_exit(EXIT_CONFIG)?;
    let path = PathBuf::from(collection);
    let index = if path.is_file() {
        read_collection(&path).or_exit(EXIT_CONFIG)?
    } else {
        let mut found = None;
        for p in &cfg.kb.collections {
            let index = read_collection(p).or_exit(EXIT_CONFIG)?;
            if index.name() == collection {
                found = Some(index);
                break;
            }
        }
        found.ok_or_else(|| Failure { code: EXIT_CONFIG, error: anyhow!("no collection {collection:?}") })?
    };
    let embedder = build_embedder(&cfg).or_exit(EXIT_CONFIG)?;
    let q = embedder.embed(query).map_err(anyhow::Error::from)?;
    let hits = index.query(&q, k.unwrap_or(cfg.crag.k)).map_err(anyhow::Error::from)?;
    for (rank, hit) in hits.iter().enumerate() {
        let title = index.get(&hit.id).map(|d| d.title.as_str()).unwrap_or_default();
        out!("{}\t{:.6}\t{}\t{}", rank + 1, hit.score, hit.id, title);
    }
    Ok(())
}

fn parse_ratios(s: &str) -> anyhow::Result<SplitRatios> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>()?;
    let [train, val, test] = parts[..] else {
        bail!("--ratios expects three comma separated numbers");
    };
    let r = SplitRatios { train, val, test };
    r.validate()?;
    Ok(r)
}

fn cmd_dataset(
    global: &Global,
    corpus: &Path,
    out: &Path,
    granularity: GranularityArg,
    ratios: &str,
) -> Result<(), Failure> {
    let cfg = load_config(global, None).or_exit(EXIT_CONFIG)?;
    let ratios = parse_ratios(ratios).or_exit(EXIT_CONFIG)?;
    let entries = resolve_target(corpus).or_exit(EXIT_CONFIG)?;
    let manifest = load_manifest(cfg.manifest.as_deref()).or_exit(EXIT_CONFIG)?;
    let granularity = match granularity {
        GranularityArg::Package => Granularity::Package,
        GranularityArg::File => Granularity::File,
    };
    let opts = IngestOptions { workdir: cfg.ingest.workdir.clone() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs()).build().map_err(anyhow::Error::from)?;
    let rows = pool.install(|| dataset_rows(&entries, &manifest, &opts, granularity));
    let m = write_dataset(out, rows, ratios, cfg.seed, granularity)?;
    out!("train {} val {} test {}", m.counts.train, m.counts.val, m.counts.test);
    Ok(())
}

fn cmd_evaluate(
    global: &Global,
    corpus: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
    name: Option<&str>,
    pipeline: &PipelineArgs,
) -> Result<(), Failure> {
    let cfg = load_config(global, Some(pipeline)).or_exit(EXIT_CONFIG)?;
    let report = if let Some(pred) = predictions {
        if !pred.exists() {
            return Err(Failure { code: EXIT_CONFIG, error: anyhow!("{}: no such file", pred.display()) });
        }
        let (mut report, samples) = evaluate_predictions(pred, cfg.seed)?;
        if let Some(n) = name {
            report.metrics.config = n.to_string();
        }
        write_jsonl(&sibling(out, "samples.jsonl"), &samples)?;
        report
    } else {
        let corpus = corpus.context("--corpus or --predictions is required").or_exit(EXIT_CONFIG)?;
        let entries = resolve_target(corpus).or_exit(EXIT_CONFIG)?;
        let rt = Runtime::new(cfg).or_exit(EXIT_CONFIG)?;
        let name = name.map(str::to_string).unwrap_or_else(|| experiment_name(&rt.config));
        let (report, samples, scan) = run_experiment(&rt, &entries, &name)?;
        write_jsonl(&sibling(out, "samples.jsonl"), &samples)?;
        write_scan(&sibling(out, "scan.jsonl"), &scan, rt.config.scan.mode)?;
        rt.flush_log()?;
        report
    };
    write_json(out, &report)?;
    out!("{}", render_table(std::slice::from_ref(&report.metrics)).trim_end());
    eprintln!("report: {}", out.display());
    Ok(())
}

fn cmd_render(paths: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Failure { code: EXIT_CONFIG, error: anyhow!("{}: no such file", p.display()) });
        }
        reports.push(read_report(p)?);
    }
    let table = render_table(&reports);
    match out {
        Some(path) => std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?,
        None => out!("{}", table.trim_end()),
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let env = env_logger::Env::new().filter_or("PKGSCAN_LOG", level);
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs the command line and returns the process exit status.
pub fn run(args: Vec<String>) -> i32 {
    let cmd = with_key_help(Cli::command(), &help_text());
    let matches = match cmd.try_get_matches_from(expand_dotted(args)) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_CONFIG;
        }
    };
    init_logging(cli.global.verbose);
    let g = &cli.global;
    let result = match &cli.command {
        Command::Scan { targets, out, pipeline } => cmd_scan(g, targets, out, pipeline),
        Command::Kb { command: KbCommand::Build { source, input, out, name, describe } } => {
            cmd_kb_build(g, *source, input, out.as_deref(), name.as_deref(), *describe)
        }
        Command::Kb { command: KbCommand::Query { collection, k, query } } => cmd_kb_query(g, collection, *k, query),
        Command::Dataset { command: DatasetCommand::Prepare { corpus, out, granularity, ratios } } => {
            cmd_dataset(g, corpus, out, *granularity, ratios)
        }
        Command::Evaluate { corpus, predictions, out, name, pipeline } => {
            cmd_evaluate(g, corpus.as_deref(), predictions.as_deref(), out, name.as_deref(), pipeline)
        }
        Command::Report { command: ReportCommand::Render { reports, out } } => cmd_render(reports, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

/// `--help` text of a subcommand path, e.g. `["kb", "build"]`.
pub fn help_for(path: &[&str]) -> String {
    let mut cmd = with_key_help(Cli::command(), &help_text());
    cmd.build();
    let mut cur = &mut cmd;
    for name in path {
        cur = cur.find_subcommand_mut(name).expect("known subcommand");
    }
    cur.render_long_help().to_string()
}
