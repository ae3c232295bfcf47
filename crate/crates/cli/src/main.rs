use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use snapdiff::canary::{
    count_tokens, frequency_quintiles, generate_canary, insert_canary, run_experiment, CanarySpec, ExperimentConfig,
    Pattern,
};
use snapdiff::characterize::{nearest_neighbor, perp_scatter, write_near_csv, write_scatter_csv, DEFAULT_WINDOW_SLACK};
use snapdiff::metrics::{exact_rank_with_prompt, locate_rank, score_with_prompt, Scoring, DEFAULT_RANK_BUDGET};
use snapdiff::ngram::{train_ngram, NGramModel};
use snapdiff::oracle::{ModelOracle, TruncatedOracle};
use snapdiff::report::{phrase_groups, AttackReport, InputDigest, RunManifest, SourceLabel, TruncationInfo, REPORT_VERSION};
use snapdiff::search::{
    group_beam_search_with, BeamSchedule, Differential, LogLikelihood, SearchConfig, StepScorer,
    DEFAULT_HALVING_FLOOR,
};
use snapdiff::vocab::build_vocab_from_text;
use snapdiff::wire::{handle_connection, serve, ExternOracle};

#[derive(Parser)]
#[command(name = "snapdiff", version, about = "Differential analysis of language model snapshots")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an n-gram model on a corpus.
    Train(TrainArgs),
    /// Search for the phrases whose probability grew most between two snapshots.
    Attack(AttackArgs),
    /// Differential rank of one phrase.
    Rank(RankArgs),
    /// Generate or insert canary phrases.
    #[command(subcommand)]
    Canary(CanaryCommand),
    /// Run a canary experiment from a JSON config.
    Experiment(ExperimentArgs),
    /// Perplexity scatter and near matches for the phrases of an attack report.
    Characterize(CharacterizeArgs),
    /// Serve a model over the oracle wire protocol.
    Serve(ServeArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = snapdiff::ngram::DEFAULT_ADD_K)]
    add_k: f64,
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
    /// Reuse the vocabulary of this model so both snapshots share token ids.
    #[arg(long)]
    vocab_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum ScheduleArg {
    Halving,
    Const,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum ScoringArg {
    Abs,
    Rel,
}

impl From<ScoringArg> for Scoring {
    fn from(s: ScoringArg) -> Self {
        match s {
            ScoringArg::Abs => Scoring::Absolute,
            ScoringArg::Rel => Scoring::Relative,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq)]
enum ModeArg {
    /// Differential score between the snapshots.
    Diff,
    /// Log-probability under the base model alone.
    Base,
    /// Log-probability under the updated model alone.
    Updated,
}

#[derive(Args, Serialize)]
struct PairArgs {
    /// Model file or `extern:HOST:PORT`.
    #[arg(long)]
    base: String,
    /// Model file or `extern:HOST:PORT`.
    #[arg(long)]
    updated: String,
    #[arg(long, value_enum, default_value_t = ScoringArg::Abs)]
    scoring: ScoringArg,
    #[arg(long, default_value_t = snapdiff::metrics::DEFAULT_REL_EPS)]
    rel_eps: f64,
}

#[derive(Args, Serialize)]
struct AttackArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, default_value_t = 5)]
    length: usize,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Halving)]
    schedule: ScheduleArg,
    /// Constant width, or the first width of a halving schedule
    /// (default: number of searchable tokens).
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_HALVING_FLOOR)]
    floor: usize,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value = "")]
    prompt: String,
    /// Phrases reported per group.
    #[arg(long, default_value_t = 20)]
    top: usize,
    /// Only expose the top K tokens of the updated model.
    #[arg(long)]
    truncate_k: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Diff)]
    mode: ModeArg,
    /// JSON report path; the CSV top list goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RankArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    phrase: String,
    #[arg(long, default_value = "")]
    prompt: String,
    /// Enumerate every sequence instead of searching.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = DEFAULT_RANK_BUDGET)]
    budget: u128,
    /// Constant beam width for the search estimate.
    #[arg(long, default_value_t = 1000)]
    width: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CanaryCommand {
    /// Draw a canary absent from the corpus.
    Gen(GenArgs),
    /// Insert a canary into a corpus at a token rate.
    Insert(InsertArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Take the vocabulary from this model instead of building one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
    #[arg(long, value_parser = parse_pattern)]
    pattern: Pattern,
    #[arg(long, default_value_t = snapdiff::canary::DEFAULT_CANARY_LEN)]
    length: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct InsertArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    canary: String,
    /// Corpus tokens per canary token.
    #[arg(long)]
    rate: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// JSON report path; the CSV summary goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CharacterizeArgs {
    #[arg(long)]
    report: PathBuf,
    /// Characterization model of the base data.
    #[arg(long)]
    ngram_d: PathBuf,
    /// Characterization model of the update data.
    #[arg(long)]
    ngram_n: PathBuf,
    /// Base corpus for near matches.
    #[arg(long)]
    corpus_d: Option<PathBuf>,
    /// Update corpus for near matches.
    #[arg(long)]
    corpus_n: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW_SLACK)]
    slack: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    /// `HOST:PORT`, or `stdio` to answer on standard input/output.
    #[arg(long)]
    listen: String,
    #[arg(long)]
    name: Option<String>,
}

fn parse_pattern(s: &str) -> std::result::Result<Pattern, String> {
    s.parse().map_err(|e: snapdiff::Error| e.to_string())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    snapdiff::set_parallelism(cli.jobs)?;
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => train(a, seed),
        Command::Attack(a) => attack(a, seed),
        Command::Rank(a) => rank(a),
        Command::Canary(CanaryCommand::Gen(a)) => canary_gen(a, seed),
        Command::Canary(CanaryCommand::Insert(a)) => canary_insert(a, seed),
        Command::Experiment(a) => experiment(a, seed),
        Command::Characterize(a) => characterize(a, seed),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn sha256_file(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

fn manifest<T: Serialize>(command: &str, args: &T, seed: u64, inputs: &[&Path]) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(args)?,
        seed,
        inputs: inputs.iter().map(|p| sha256_file(p)).collect::<Result<_>>()?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<NGramModel> {
    NGramModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let text = read_text(&a.corpus)?;
    let vocab = match &a.vocab_from {
        Some(m) => load_model(m)?.vocab().clone(),
        None => build_vocab_from_text(&text, a.vocab_size)?,
    };
    let corpus = vocab.tokenize_corpus(&text);
    let model = train_ngram(corpus.iter().map(Vec::as_slice), &vocab, a.order, a.add_k)?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    if let Some(m) = &a.vocab_from {
        inputs.push(m);
    }
    write_json(&with_suffix(&a.out, ".manifest.json"), &manifest("train", &a, seed, &inputs)?)?;
    eprintln!(
        "trained {}-gram on {} tokens, {} entries -> {}",
        a.order,
        count_tokens(&corpus),
        model.num_entries(),
        a.out.display()
    );
    Ok(())
}

struct Loaded {
    oracle: Arc<dyn ModelOracle>,
    file: Option<PathBuf>,
}

/// Files first, so an extern endpoint can borrow the file model's token strings.
fn load_pair(base: &str, updated: &str) -> Result<(Loaded, Loaded)> {
    let parse = |spec: &str| spec.strip_prefix("extern:").map(str::to_string);
    let file = |spec: &str| -> Result<Option<Arc<NGramModel>>> {
        match parse(spec) {
            Some(_) => Ok(None),
            None => Ok(Some(Arc::new(load_model(Path::new(spec))?))),
        }
    };
    let (fb, fu) = (file(base)?, file(updated)?);
    let hint = fb.as_ref().or(fu.as_ref()).map(|m| m.vocab().clone());
    let resolve = |spec: &str, f: Option<Arc<NGramModel>>| -> Result<Loaded> {
        match f {
            Some(m) => Ok(Loaded { oracle: m, file: Some(PathBuf::from(spec)) }),
            None => {
                let addr = parse(spec).expect("extern spec");
                let o = ExternOracle::connect(&addr, hint.clone())
                    .with_context(|| format!("connecting to oracle at {addr}"))?;
                Ok(Loaded { oracle: Arc::new(o), file: None })
            }
        }
    };
    let b = resolve(base, fb)?;
    let u = resolve(updated, fu)?;
    b.oracle.vocab().ensure_compatible(u.oracle.vocab()).context("the two snapshots do not share a vocabulary")?;
    Ok((b, u))
}

fn input_files(pair: &(Loaded, Loaded)) -> Vec<PathBuf> {
    [&pair.0.file, &pair.1.file].into_iter().flatten().cloned().collect()
}

fn attack(a: AttackArgs, seed: u64) -> Result<()> {
    let pair = load_pair(&a.pair.base, &a.pair.updated)?;
    let base = pair.0.oracle.clone();
    let mut updated = pair.1.oracle.clone();
    if let Some(k) = a.truncate_k {
        let size = updated.vocab().len();
        if k < 1 || k > size {
            bail!("--truncate-k must be in 1..={size}");
        }
        updated = Arc::new(TruncatedOracle::new(updated, k)?);
    }
    let vocab = base.vocab().clone();
    let prompt = vocab.tokenize_strict(&a.prompt)?;
    let searchable = vocab.searchable_ids().len();
    let schedule = match a.schedule {
        ScheduleArg::Halving => BeamSchedule::halving(a.width.unwrap_or(searchable), a.length, a.floor)?,
        ScheduleArg::Const => BeamSchedule::constant(a.width.context("--schedule const needs --width")?, a.length)?,
    };
    let scoring = Scoring::from(a.pair.scoring);
    let mut cfg = SearchConfig::new(a.length, schedule, scoring).with_prompt(prompt).with_groups(a.groups);
    cfg.eps = a.pair.rel_eps;
    let diff;
    let single;
    let (scorer, label, objective): (&dyn StepScorer, SourceLabel, &str) = match a.mode {
        ModeArg::Diff => {
            diff = Differential::new(&*base, &*updated, scoring, cfg.eps)?;
            (&diff, SourceLabel::FromSnapshotAttack, scoring.label())
        }
        ModeArg::Base => {
            single = LogLikelihood { model: &*base };
            (&single, SourceLabel::FromBaseModel, "logprob")
        }
        ModeArg::Updated => {
            single = LogLikelihood { model: &*updated };
            (&single, SourceLabel::FromUpdatedModel, "logprob")
        }
    };
    let groups = group_beam_search_with(scorer, &cfg)?;
    let files = input_files(&pair);
    let inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let report = AttackReport {
        report_version: REPORT_VERSION,
        source_label: label,
        objective: objective.to_string(),
        base: base.describe(),
        updated: updated.describe(),
        search: cfg,
        truncation: a.truncate_k.map(|k| TruncationInfo { k, renormalized: false }),
        groups: phrase_groups(&groups, &vocab, a.top),
        manifest: Some(manifest("attack", &a, seed, &inputs)?),
    };
    write_json(&a.out, &report)?;
    let csv_path = a.out.with_extension("csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(["group", "position", "phrase", "score"])?;
    for g in &report.groups {
        for (i, p) in g.phrases.iter().enumerate() {
            w.write_record([g.group.to_string(), i.to_string(), p.text.clone(), p.score.to_string()])?;
        }
    }
    w.flush()?;
    if let Some(best) = report.phrases().next() {
        eprintln!("top phrase: {} ({})", best.text, best.score);
    }
    Ok(())
}

#[derive(Serialize)]
struct RankOutput {
    phrase: String,
    score: f64,
    scoring: String,
    /// `exact`, `lower_bound` or `absent`.
    rank_kind: String,
    rank: Option<u64>,
}

fn rank(a: RankArgs) -> Result<()> {
    let (b, u) = load_pair(&a.pair.base, &a.pair.updated)?;
    let (base, updated) = (&*b.oracle, &*u.oracle);
    let vocab = base.vocab();
    let prompt = vocab.tokenize_strict(&a.prompt)?;
    let ext = vocab.tokenize_strict(&a.phrase)?;
    if ext.is_empty() {
        bail!("empty phrase");
    }
    let scoring = Scoring::from(a.pair.scoring);
    let score = score_with_prompt(base, updated, &prompt, &ext, scoring, a.pair.rel_eps)?.score;
    let (kind, value) = if a.exact {
        let r = exact_rank_with_prompt(base, updated, &prompt, &ext, scoring, a.pair.rel_eps, a.budget)?;
        ("exact", Some(r.value))
    } else {
        let mut cfg = SearchConfig::new(ext.len(), BeamSchedule::constant(a.width, ext.len())?, scoring)
            .with_prompt(prompt.clone());
        cfg.eps = a.pair.rel_eps;
        let results = snapdiff::search::beam_search(base, updated, &cfg)?;
        let mut full = prompt.clone();
        full.extend_from_slice(&ext);
        match locate_rank(&results, &full) {
            Some(r) => ("lower_bound", Some(r.value)),
            None => ("absent", None),
        }
    };
    let out = RankOutput {
        phrase: a.phrase.clone(),
        score,
        scoring: scoring.label().to_string(),
        rank_kind: kind.to_string(),
        rank: value,
    };
    let text = serde_json::to_string_pretty(&out)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CanaryOutput {
    canary: String,
    pattern: Pattern,
    quintiles: Vec<u8>,
    manifest: RunManifest,
}

fn canary_gen(a: GenArgs, seed: u64) -> Result<()> {
    let text = read_text(&a.corpus)?;
    let vocab = match &a.model {
        Some(m) => load_model(m)?.vocab().clone(),
        None => build_vocab_from_text(&text, a.vocab_size)?,
    };
    let corpus = vocab.tokenize_corpus(&text);
    let quintiles = frequency_quintiles(&corpus, &vocab)?;
    let mut spec = CanarySpec::new(a.pattern, seed);
    spec.length = a.length;
    let phrase = generate_canary(&spec, &quintiles, &corpus, &vocab)?;
    let text_out = vocab.detokenize(&phrase);
    println!("{text_out}");
    if let Some(out) = &a.out {
        let mut inputs: Vec<&Path> = vec![&a.corpus];
        if let Some(m) = &a.model {
            inputs.push(m);
        }
        let record = CanaryOutput {
            canary: text_out,
            pattern: a.pattern,
            quintiles: phrase.iter().map(|&t| quintiles.quintile(t).unwrap_or(0)).collect(),
            manifest: manifest("canary gen", &a, seed, &inputs)?,
        };
        write_json(out, &record)?;
    }
    Ok(())
}

fn canary_insert(a: InsertArgs, seed: u64) -> Result<()> {
    let text = read_text(&a.corpus)?;
    let lines: Vec<Vec<String>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let canary: Vec<String> = a.canary.split_whitespace().map(str::to_string).collect();
    if canary.is_empty() {
        bail!("empty canary");
    }
    let ins = insert_canary(&lines, &canary, a.rate)?;
    let mut out = String::new();
    for l in &ins.corpus {
        out.push_str(&l.join(" "));
        out.push('\n');
    }
    fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(&with_suffix(&a.out, ".manifest.json"), &manifest("canary insert", &a, seed, &[&a.corpus])?)?;
    eprintln!("inserted {} copies into {} tokens", ins.k, count_tokens(&lines));
    Ok(())
}

fn experiment(a: ExperimentArgs, seed: u64) -> Result<()> {
    let mut config: ExperimentConfig = serde_json::from_str(&read_text(&a.config)?)
        .with_context(|| format!("parsing {}", a.config.display()))?;
    if config.corpus.is_relative() {
        if let Some(dir) = a.config.parent() {
            config.corpus = dir.join(&config.corpus);
        }
    }
    config.seed = seed;
    let mut report = run_experiment(&config)?;
    report.manifest = Some(manifest("experiment", &a, seed, &[&a.config, &config.corpus])?);
    write_json(&a.out, &report)?;
    let csv_path = a.out.with_extension("csv");
    report.write_summary_csv(fs::File::create(&csv_path)?)?;
    for s in &report.scenarios {
        eprintln!("{}: ds={} rank={:?}", s.scenario, s.ds, s.rank.map(|r| r.value));
    }
    Ok(())
}

fn characterize(a: CharacterizeArgs, seed: u64) -> Result<()> {
    let report: AttackReport = serde_json::from_str(&read_text(&a.report)?)
        .with_context(|| format!("parsing {}", a.report.display()))?;
    let model_d = load_model(&a.ngram_d)?;
    let model_n = load_model(&a.ngram_n)?;
    let phrases: Vec<String> = report.phrases().map(|p| p.text.clone()).collect();
    let points = perp_scatter(&phrases, &model_d, &model_n, report.source_label)?;
    fs::create_dir_all(&a.out)?;
    write_scatter_csv(&points, fs::File::create(a.out.join("scatter.csv"))?)?;
    let mut rows = Vec::new();
    let mut inputs: Vec<&Path> = vec![&a.report, &a.ngram_d, &a.ngram_n];
    for (path, label, model) in [(&a.corpus_d, "D", &model_d), (&a.corpus_n, "N", &model_n)] {
        let Some(path) = path else { continue };
        inputs.push(path);
        let v = model.vocab();
        let stream: Vec<_> = v.tokenize_corpus(&read_text(path)?).into_iter().flatten().collect();
        for p in &phrases {
            rows.push(nearest_neighbor(&v.tokenize(p), &stream, a.slack, label)?.render(v));
        }
    }
    if !rows.is_empty() {
        write_near_csv(&rows, fs::File::create(a.out.join("near.csv"))?)?;
    }
    write_json(&a.out.join("manifest.json"), &manifest("characterize", &a, seed, &inputs)?)?;
    let above = points.iter().filter(|p| p.above_diagonal()).count();
    eprintln!("{above}/{} phrases above the diagonal", points.len());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let model = Arc::new(load_model(&a.model)?);
    let name = a.name.unwrap_or_else(|| a.model.display().to_string());
    if a.listen == "stdio" {
        let stdin = io::stdin();
        handle_connection(&*model, &name, BufReader::new(stdin.lock()), io::stdout().lock())?;
        return Ok(());
    }
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    eprintln!("serving {} on {}", name, listener.local_addr()?);
    serve(listener, model, name)?;
    Ok(())
}
