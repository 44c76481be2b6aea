use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xdocre::classifier::LossVariant;
use xdocre::context::{ContextGenerator, ContextMode};
use xdocre::corpus::{collect_documents, load_bags, Bag, RelationVocabulary};
use xdocre::filters::{filter_bag, rank_sentences, score_mentions, write_filter_report};
use xdocre::harness::{
    evaluate, evaluate_open, prepare_all, run_ablation, write_ablation_csv, write_predictions_csv, RunConfig, Sweep,
};
use xdocre::kg::{load_kg_dir, KnowledgeGraph, LoadOptions};
use xdocre::model::{Checkpoint, Model};
use xdocre::retrieval::{build_index, retrieve_paths};
use xdocre::synth::{synthesize_corpus, SynthConfig};
use xdocre::train::train;
use xdocre::{explain, Error, Result};

/// Relative input paths are looked up here when they do not exist under the working directory.
const DATA_ROOT_VAR: &str = "XDRE_DATA";

#[derive(Parser)]
#[command(name = "xdocre", version, about = "Knowledge-enhanced cross-document relation extraction")]
struct Cli {
    /// Seed for every random choice; overrides `train.seed` where a model is trained.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a graph directory (triples.tsv, labels.tsv, types.tsv); print a summary.
    IngestKg(IngestArgs),
    /// Write a synthetic corpus, relation list and graph to a directory.
    SynthCorpus(SynthArgs),
    /// Print the graph context of an entity pair as a JSON array of tokens.
    Context(ContextArgs),
    /// Run the sentence filters on one bag.
    Filter(FilterArgs),
    /// Rank candidate document pairs for an entity pair.
    Retrieve(RetrieveArgs),
    /// Train a model and write a checkpoint; prints one JSON line per epoch.
    Train(TrainArgs),
    /// Score a corpus split with a checkpoint; prints metrics JSON.
    Eval(EvalArgs),
    /// Show the informative context behind one bag's prediction.
    Explain(ExplainArgs),
    /// Train and evaluate one model per sweep cell; writes a CSV.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set encoder.embed_dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(&resolve(p))?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct CorpusArgs {
    /// A corpus JSONL file, or a directory holding `<split>.jsonl`.
    #[arg(long)]
    corpus: PathBuf,
    /// Split to read when `--corpus` is a directory.
    #[arg(long)]
    split: Option<String>,
    /// Relation list; defaults to `relations.txt` next to the corpus.
    #[arg(long)]
    relations: Option<PathBuf>,
    /// Graph directory; defaults to the corpus directory.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Treat graph edges as one-way during path search.
    #[arg(long)]
    directed: bool,
}

struct LoadedCorpus {
    bags: Vec<Bag>,
    vocab: RelationVocabulary,
    dir: PathBuf,
}

impl CorpusArgs {
    fn file(&self, default_split: &str) -> PathBuf {
        let c = resolve(&self.corpus);
        if c.is_dir() {
            c.join(format!("{}.jsonl", self.split.as_deref().unwrap_or(default_split)))
        } else {
            c
        }
    }

    fn dir(&self) -> PathBuf {
        let c = resolve(&self.corpus);
        if c.is_dir() {
            c
        } else {
            c.parent().map(Path::to_path_buf).unwrap_or_default()
        }
    }

    fn vocab(&self) -> Result<RelationVocabulary> {
        let p = self.relations.as_ref().map(|p| resolve(p)).unwrap_or_else(|| self.dir().join("relations.txt"));
        RelationVocabulary::load(&p)
    }

    fn load(&self, default_split: &str) -> Result<LoadedCorpus> {
        let vocab = self.vocab()?;
        let bags = load_bags(&self.file(default_split), &vocab)?;
        Ok(LoadedCorpus { bags, vocab, dir: self.dir() })
    }

    fn graph(&self) -> Result<KnowledgeGraph> {
        let dir = self.kg.as_ref().map(|p| resolve(p)).unwrap_or_else(|| self.dir());
        load_kg_dir(&dir, LoadOptions { undirected: !self.directed })
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Directory with triples.tsv, labels.tsv and types.tsv.
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    directed: bool,
    /// Also write the full graph as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file of generator settings; flags below override it.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    #[arg(long)]
    num_bags: Option<usize>,
    #[arg(long)]
    num_relations: Option<usize>,
    #[arg(long)]
    na_fraction: Option<f64>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    #[arg(long)]
    text_signal: Option<f64>,
    #[arg(long)]
    context_signal: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    misleading_cue_rate: Option<f64>,
}

#[derive(Args)]
struct ContextArgs {
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 5)]
    hops: usize,
    #[arg(long, default_value = "ecc")]
    mode: ContextMode,
    /// Graph directory.
    #[arg(long, default_value = ".")]
    kg: PathBuf,
    #[arg(long)]
    directed: bool,
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    bag_id: String,
    /// Emit mention scores and the ranked sentence table as CSV instead of the kept context as JSON.
    #[arg(long)]
    dump_scores: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    /// Corpus JSONL whose documents form the retrieval pool.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    mode: Option<ContextMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Use the loss exactly as printed, without negating positive scores.
    #[arg(long)]
    literal_loss: bool,
    /// Checkpoint output path.
    #[arg(long)]
    save: PathBuf,
    /// Also write the encoder parameters alone.
    #[arg(long)]
    save_encoder: Option<PathBuf>,
    /// Initialize the encoder from a checkpoint before training.
    #[arg(long)]
    load_encoder: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Per-bag predictions CSV; defaults to `<checkpoint>.predictions.csv`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Write each bag's relation matrix to this directory.
    #[arg(long)]
    dump_matrix: Option<PathBuf>,
    /// Open setting: replace each bag's paths with ones retrieved from this corpus JSONL.
    #[arg(long)]
    retrieval_corpus: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Json,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    bag_id: String,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    sweep: Sweep,
    /// Split scored after training.
    #[arg(long, default_value = "dev")]
    eval_split: String,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn resolve(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(root) = std::env::var_os(DATA_ROOT_VAR) {
            return PathBuf::from(root).join(p);
        }
    }
    p.to_path_buf()
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn find_bag(bags: Vec<Bag>, id: &str) -> Result<Bag> {
    bags.into_iter()
        .find(|b| b.bag_id == id)
        .ok_or_else(|| Error::validation("bag lookup", format!("no bag {id:?} in the corpus")))
}

/// Every bag of the corpus: both splits when it is a directory without `--split`.
fn all_bags(c: &CorpusArgs) -> Result<(Vec<Bag>, RelationVocabulary)> {
    let vocab = c.vocab()?;
    if resolve(&c.corpus).is_dir() && c.split.is_none() {
        let mut bags = Vec::new();
        for split in ["train", "dev"] {
            let f = c.dir().join(format!("{split}.jsonl"));
            if f.exists() {
                bags.extend(load_bags(&f, &vocab)?);
            }
        }
        Ok((bags, vocab))
    } else {
        Ok((load_bags(&c.file("train"), &vocab)?, vocab))
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let g = load_kg_dir(&resolve(&a.kg), LoadOptions { undirected: !a.directed })?;
    if let Some(out) = &a.out {
        fs::write(out, g.to_json()?).map_err(|e| Error::io(out, e))?;
    }
    print_json(&serde_json::json!({
        "entities": g.num_entities(),
        "triples": g.triples().len(),
        "labelled_entities": g.entity_labels().len(),
        "labelled_properties": g.property_labels().len(),
        "typed_entities": g.entity_types().len(),
        "undirected": g.is_undirected(),
    }))
}

fn synth(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.synth_config {
        Some(p) => {
            let p = resolve(p);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! apply {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { cfg.$field = v; })* };
    }
    apply!(num_bags => num_bags, num_relations => num_relations, na_fraction => na_fraction,
        dev_fraction => dev_fraction, text_signal => text_signal, context_signal => context_signal,
        distractors => distractors_per_doc, misleading_cue_rate => misleading_cue_rate);
    let corpus = synthesize_corpus(&cfg, seed.unwrap_or(7))?;
    corpus.write(&a.out)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "train_bags": corpus.train.len(),
        "dev_bags": corpus.dev.len(),
        "positive_bags": corpus.manifest.positive_bags,
        "na_bags": corpus.manifest.na_bags,
    }))
}

fn context(a: ContextArgs) -> Result<()> {
    let g = load_kg_dir(&resolve(&a.kg), LoadOptions { undirected: !a.directed })?;
    let cfg = xdocre::context::ContextConfig { max_hops: a.hops, mode: a.mode };
    cfg.validate()?;
    let ctx = ContextGenerator::new(&g).generate(&a.source.as_str().into(), &a.target.as_str().into(), &cfg);
    println!("{}", serde_json::to_string(&ctx.tokens())?);
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let cfg = a.config.load()?;
    cfg.filter.validate()?;
    let (bags, _) = all_bags(&a.corpus)?;
    let bag = find_bag(bags, &a.bag_id)?;
    let g = a.corpus.graph()?;
    let ctx = ContextGenerator::new(&g).generate(&bag.source, &bag.target, &cfg.context);
    let ictx = filter_bag(&bag, &ctx, &cfg.filter)?;
    if a.dump_scores {
        let scores = score_mentions(&bag, &cfg.filter);
        let cands = rank_sentences(&bag, &scores, &cfg.filter);
        write_filter_report(io::stdout().lock(), &bag, &scores, &cands, &ictx)
    } else {
        print_json(&ictx)
    }
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let mut cfg = a.config.load()?.retrieval;
    cfg.top_k = a.top_k;
    cfg.validate()?;
    let path = resolve(&a.corpus);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    // Only documents matter here, so labels are not checked against a relation list.
    let mut bags = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bag: Bag = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        bags.push(bag);
    }
    let index = build_index(collect_documents(&bags).into_values());
    print_json(&retrieve_paths(&index, &a.source.as_str().into(), &a.target.as_str().into(), &cfg))
}

fn run_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(m) = a.mode {
        cfg.context.mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.optimizer.lr = lr;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if a.literal_loss {
        cfg.classifier.loss = LossVariant::Literal;
    }
    cfg.validate()?;
    let data = a.corpus.load("train")?;
    let g = a.corpus.graph()?;
    let mut model = Model::new(cfg.pipeline(), data.vocab, cfg.train.seed)?;
    if let Some(p) = &a.load_encoder {
        model.load_encoder(&Checkpoint::read(&resolve(p))?)?;
    }
    let prepared = prepare_all(&model, &data.bags, &g)?;
    let mut out = io::stdout().lock();
    let mut write_err = None;
    train(&mut model, &prepared, &cfg.train, |log| {
        let line = serde_json::to_string(log).expect("epoch log serializes");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io("<stdout>", e));
    }
    model.checkpoint().write(&a.save)?;
    if let Some(p) = &a.save_encoder {
        model.encoder_checkpoint().write(p)?;
    }
    log::info!("checkpoint written to {} from corpus {}", a.save.display(), data.dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck_path = resolve(&a.checkpoint);
    let model = Model::from_checkpoint(&Checkpoint::read(&ck_path)?)?;
    let data = a.corpus.load("dev")?;
    if data.vocab != model.relations {
        return Err(Error::validation("eval", "corpus relation list differs from the checkpoint's"));
    }
    let g = a.corpus.graph()?;
    let ev = match &a.retrieval_corpus {
        Some(pool_path) => {
            let cfg = a.config.load()?;
            cfg.retrieval.validate()?;
            let pool = load_bags(&resolve(pool_path), &model.relations)?;
            evaluate_open(&model, &data.bags, &pool, &g, &cfg.retrieval)?
        }
        None => evaluate(&model, &data.bags, &g)?,
    };
    let pred_path = a.predictions.clone().unwrap_or_else(|| {
        let mut p = ck_path.clone().into_os_string();
        p.push(".predictions.csv");
        p.into()
    });
    let f = fs::File::create(&pred_path).map_err(|e| Error::io(&pred_path, e))?;
    write_predictions_csv(f, &data.bags, &ev.scores, &model.relations)?;
    if let Some(dir) = &a.dump_matrix {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for p in ev.prepared.iter().flatten() {
            model.relation_matrix(p)?.write_dump(dir, &p.bag_id)?;
        }
    }
    print_json(&ev.report)
}

fn run_explain(a: ExplainArgs) -> Result<()> {
    let model = Model::from_checkpoint(&Checkpoint::read(&resolve(&a.checkpoint))?)?;
    let (bags, _) = all_bags(&a.corpus)?;
    let bag = find_bag(bags, &a.bag_id)?;
    let g = a.corpus.graph()?;
    let prepared = model.prepare(&bag, &ContextGenerator::new(&g))?;
    let scores = model.score(&prepared)?;
    let ex = explain::explain(&bag, &prepared.informative, &scores)?;
    match a.format {
        Format::Md => print!("{}", ex.to_markdown()),
        Format::Json => print!("{}", ex.to_json()?),
    }
    Ok(())
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let vocab = a.corpus.vocab()?;
    let dir = a.corpus.dir();
    let train_bags = load_bags(&dir.join("train.jsonl"), &vocab)?;
    let eval_bags = load_bags(&dir.join(format!("{}.jsonl", a.eval_split)), &vocab)?;
    let g = a.corpus.graph()?;
    let rows = run_ablation(&cfg, a.sweep, &train_bags, &eval_bags, &vocab, &g)?;
    match &a.out {
        Some(p) => write_ablation_csv(fs::File::create(p).map_err(|e| Error::io(p, e))?, &rows),
        None => write_ablation_csv(io::stdout().lock(), &rows),
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::IngestKg(a) => ingest(a),
        Command::SynthCorpus(a) => synth(a, seed),
        Command::Context(a) => context(a),
        Command::Filter(a) => filter(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Train(a) => run_train(a, seed),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => run_explain(a),
        Command::Ablate(a) => ablate(a, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
