//! The `llm2ir` command line. Every subcommand reads an optional TOML config
//! (`--config` or `$LLM2IR_CONFIG`), applies its flags on top and writes the
//! effective config next to what it produces.
//!
//! Exit status: 0 success, 1 usage or config error, 2 data error, 3 numerical
//! failure. Errors are reported as one line on stderr:
//! `error kind=<tag> code=<status> msg=<json string>`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::{AugMode, AugmentationConfig};
use crate::corpus::{DocumentStore, Vocabulary};
use crate::dense::{bm25_evaluate, embed_corpus, embed_text, evaluate, read_queries, write_queries, EmbeddingIndex, EvalConfig, Qrels};
use crate::error::{Error, Result};
use crate::experiments::{
    self, generate_passkey_corpus, generate_synthetic_corpus, held_out_queries, crop_queries, report, run_ablation_hard_negatives,
    run_augmentation_comparison, run_context_pair, run_fill_fraction_sweep, ContextPairConfig, FillSweepConfig,
    PasskeySpec, QuerySpec, Setup, SyntheticCorpusSpec, PREFIX_WORDS,
};
use crate::model::{checkpoint, AttnMode, Model, ModelConfig};
use crate::sparse::{read_negatives, write_negatives, Bm25Params, HardNegativeMiner, InvertedIndex};
use crate::tensor::gradcheck::{primitive_checks, GradCheckOptions};
use crate::train::{pipeline_grad_check, pretrain_lm, tiny_check_model, train, LmConfig, NegativesScope, TrainConfig, TrainOutputs};

pub const CONFIG_ENV: &str = "LLM2IR_CONFIG";

/// Document file and vocabulary file inside a store directory.
pub const STORE_DOCS: &str = "documents.jsonl";
pub const STORE_VOCAB: &str = "vocab.txt";

/// Every module's settings in one file. Unknown keys are rejected; missing
/// sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: LmConfig,
    pub augment: AugmentationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bm25: Bm25Params,
    pub experiment: Setup,
    pub context_pair: ContextPairConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Echo the effective config into `dir/config.toml`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let p = dir.as_ref().join("config.toml");
        std::fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "llm2ir", version, about = "Dense retrieval from a tiny decoder-only transformer")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a store directory (documents + vocabulary) from JSONL.
    Ingest(IngestArgs),
    /// Build a BM25 inverted index over a store.
    Index(IndexArgs),
    /// Mine BM25 hard negatives for every document.
    Mine(MineArgs),
    /// Contrastive training; writes a checkpoint.
    Train(TrainArgs),
    /// Embed a store with a checkpoint.
    Embed(EmbedArgs),
    /// Ad-hoc query against an embedding index.
    Search(SearchArgs),
    /// Dense evaluation: TREC run file and metrics.
    Eval(EvalArgs),
    /// BM25 baseline evaluation.
    #[command(name = "bm25-eval")]
    Bm25Eval(Bm25EvalArgs),
    /// Generate the synthetic clustered corpus with queries and qrels.
    Synth(SynthArgs),
    /// Generate a passkey corpus.
    Passkey(PasskeyArgs),
    /// Hard-negative ablation: K mined negatives against none.
    #[command(name = "ablate-negatives")]
    AblateNegatives(ExperimentArgs),
    /// Crop against dropout augmentation.
    #[command(name = "compare-aug")]
    CompareAug(ExperimentArgs),
    /// Long and short context twins on identical truncated inputs.
    #[command(name = "context-pair")]
    ContextPair(ExperimentArgs),
    /// Passkey accuracy as documents fill a model's window.
    #[command(name = "fill-sweep")]
    FillSweep(FillSweepArgs),
    /// Finite-difference gradient checks.
    #[command(name = "grad-check")]
    GradCheck(GradCheckArgs),
    /// Render JSON reports as plain-text tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL with one {"id", "text"} object per line.
    pub jsonl: PathBuf,
    /// Output store directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Largest vocabulary, reserved tokens included [default: unlimited].
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Drop words seen fewer times.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    pub store: PathBuf,
    /// BM25 term-frequency saturation [default: 1.2].
    #[arg(long)]
    pub k1: Option<f64>,
    /// BM25 length normalization [default: 0.75].
    #[arg(long)]
    pub b: Option<f64>,
    /// Index file [default: <store>/bm25.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    pub store: PathBuf,
    /// Negatives per document.
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    /// Words of the pseudo-query cut from each document.
    #[arg(long, default_value_t = 64)]
    pub query_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub store: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Mined negatives (JSONL); mined on the fly when absent.
    #[arg(long)]
    pub negatives: Option<PathBuf>,
    /// Positive construction [default: crop].
    #[arg(long, value_enum)]
    pub mode: Option<AugMode>,
    /// Hard negatives per anchor [default: 7].
    #[arg(long)]
    pub k: Option<usize>,
    /// Softmax temperature [default: 0.05].
    #[arg(long)]
    pub tau: Option<f64>,
    /// AdamW learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train LoRA adapters only (r=8, alpha=16 on Q and V by default).
    #[arg(long)]
    pub lora: bool,
    /// Attention mask [default: causal].
    #[arg(long, value_enum)]
    pub attn: Option<AttnMode>,
    /// Which negatives each anchor is scored against [default: batch].
    #[arg(long, value_enum)]
    pub negatives_scope: Option<NegativesScope>,
    /// Next-token pretraining epochs before contrastive training [default: 0].
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Seed for init, batching and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss curve CSV [default: <out>.loss.csv].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    pub ckpt: PathBuf,
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tokens per passage [default: the model's max_context].
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Embedding index written by `embed`.
    pub index: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Checkpoint the index was built with.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory holding the vocab.txt the checkpoint was trained with.
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub store: PathBuf,
    /// Queries JSONL.
    pub queries: PathBuf,
    /// Qrels TSV (query, doc, grade).
    pub qrels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run tag in the TREC file [default: llm2ir].
    #[arg(long)]
    pub tag: Option<String>,
    /// Tokens per input [default: the model's max_context].
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Bm25EvalArgs {
    pub store: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 1.2]
    #[arg(long)]
    pub k1: Option<f64>,
    /// [default: 0.75]
    #[arg(long)]
    pub b: Option<f64>,
}

/// Spec file of `synth`: `[corpus]` and `[queries]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub corpus: SyntheticCorpusSpec,
    pub queries: QuerySpec,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML with [corpus] and [queries] tables [default: 10 topics x 10 docs].
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PasskeyArgs {
    /// TOML passkey spec [default: 20 docs of 64 words, depth 0.5].
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the model and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FillSweepArgs {
    pub ckpt: PathBuf,
    /// Directory holding the vocab.txt the checkpoint was trained with.
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated fill fractions [default: 0.25,0.5,0.75,0.9,1].
    #[arg(long, value_delimiter = ',')]
    pub fills: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Checkpoint path, or `random` for a tiny random model.
    #[arg(default_value = "random")]
    pub model: String,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Entries checked per parameter [default: all for `random`, 16 otherwise].
    #[arg(long)]
    pub max_entries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report.json or a directory searched recursively.
    pub dir: PathBuf,
}

/// Store directory: documents plus vocabulary.
pub fn load_store(dir: impl AsRef<Path>) -> Result<(DocumentStore, Vocabulary)> {
    let dir = dir.as_ref();
    Ok((DocumentStore::ingest_jsonl(dir.join(STORE_DOCS))?, Vocabulary::load(dir.join(STORE_VOCAB))?))
}

pub fn save_store(dir: impl AsRef<Path>, store: &DocumentStore, vocab: &Vocabulary) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    store.write_jsonl(dir.join(STORE_DOCS))?;
    vocab.save(dir.join(STORE_VOCAB))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(path: &Path) -> Result<&Path> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    Ok(dir)
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<Model<f32>> {
    let model = checkpoint::load(path)?;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::InvalidInput(format!(
            "checkpoint has a {}-token vocabulary, the store {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().replace('\n', " "))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

/// Execute a parsed command line; output goes to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = cli.run_config()?;
    match &cli.command {
        Command::Ingest(a) => {
            let store = DocumentStore::ingest_jsonl(&a.jsonl)?;
            let vocab = Vocabulary::build_with(&store, a.max_vocab.unwrap_or(usize::MAX), a.min_freq, &PREFIX_WORDS)?;
            save_store(&a.out, &store, &vocab)?;
            println!("{} documents, {} tokens in vocabulary -> {}", store.len(), vocab.len(), a.out.display());
        }
        Command::Index(a) => {
            let (store, vocab) = load_store(&a.store)?;
            let params = Bm25Params {
                k1: a.k1.unwrap_or(cfg.bm25.k1),
                b: a.b.unwrap_or(cfg.bm25.b),
            };
            let index = InvertedIndex::build(&store, &vocab, params)?;
            let out = a.out.clone().unwrap_or_else(|| a.store.join("bm25.json"));
            index.save(&out)?;
            println!("indexed {} documents, avgdl {:.2} -> {}", index.num_docs(), index.avgdl(), out.display());
        }
        Command::Mine(a) => {
            let (store, vocab) = load_store(&a.store)?;
            let index = InvertedIndex::build(&store, &vocab, cfg.bm25)?;
            let entries = HardNegativeMiner::new(&index, &vocab, a.k, a.query_len).mine_all(&store, a.seed)?;
            parent_dir(&a.out)?;
            write_negatives(&a.out, &entries)?;
            println!("{} entries with {} negatives -> {}", entries.len(), a.k, a.out.display());
        }
        Command::Train(a) => cmd_train(a, &mut cfg)?,
        Command::Embed(a) => {
            let (store, vocab) = load_store(&a.store)?;
            let model = load_model(&a.ckpt, &vocab)?;
            let max_len = a.max_len.or(cfg.eval.max_len).unwrap_or(model.config.max_context);
            let index = embed_corpus(&model, &store, &vocab, &cfg.eval.passage_prefix, max_len)?;
            parent_dir(&a.out)?;
            index.save(&a.out)?;
            println!("{} x {} embeddings -> {}", index.len(), index.dim, a.out.display());
        }
        Command::Search(a) => {
            let vocab = Vocabulary::load(a.store.join(STORE_VOCAB))?;
            let model = load_model(&a.ckpt, &vocab)?;
            let index = EmbeddingIndex::load(&a.index)?;
            if index.model_fingerprint != checkpoint::fingerprint(&model) {
                return Err(Error::InvalidInput("index was built with a different checkpoint".into()));
            }
            let max_len = cfg.eval.max_len.unwrap_or(model.config.max_context);
            let q = embed_text(&model, &vocab, &cfg.eval.query_prefix, &a.query, max_len)?;
            for (rank, (id, score)) in index.search(&q, a.k)?.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, id, score);
            }
        }
        Command::Eval(a) => {
            let (store, vocab) = load_store(&a.store)?;
            let model = load_model(&a.ckpt, &vocab)?;
            if let Some(t) = &a.tag {
                cfg.eval.tag = t.clone();
            }
            if a.max_len.is_some() {
                cfg.eval.max_len = a.max_len;
            }
            let queries = read_queries(&a.queries)?;
            let qrels = Qrels::read_tsv(&a.qrels)?;
            let e = evaluate(&model, &store, &vocab, &queries, &qrels, &cfg.eval)?;
            e.write(&a.out, &cfg.eval.tag)?;
            cfg.write_to(&a.out)?;
            print!("{}", report::eval_table("dense evaluation", &e.report).render());
        }
        Command::Bm25Eval(a) => {
            let (store, vocab) = load_store(&a.store)?;
            let params = Bm25Params {
                k1: a.k1.unwrap_or(cfg.bm25.k1),
                b: a.b.unwrap_or(cfg.bm25.b),
            };
            let index = InvertedIndex::build(&store, &vocab, params)?;
            let queries = read_queries(&a.queries)?;
            let qrels = Qrels::read_tsv(&a.qrels)?;
            let e = bm25_evaluate(&index, &vocab, &queries, &qrels, &cfg.eval)?;
            if let Some(out) = &a.out {
                e.write(out, "bm25")?;
                cfg.write_to(out)?;
            }
            print!("{}", report::eval_table("bm25 evaluation", &e.report).render());
        }
        Command::Synth(a) => {
            let mut spec: SynthSpec = match &a.spec {
                Some(p) => read_toml(p)?,
                None => SynthSpec::default(),
            };
            if let Some(s) = a.seed {
                spec.corpus.seed = s;
            }
            let corpus = generate_synthetic_corpus(&spec.corpus)?;
            let vocab = experiments::build_vocab(&[&corpus.store])?;
            save_store(&a.out, &corpus.store, &vocab)?;
            let q = &spec.queries;
            let (queries, qrels) = if q.held_out {
                held_out_queries(&corpus, &spec.corpus, q.per_doc * spec.corpus.docs_per_topic, q.query_len, q.seed)?
            } else {
                crop_queries(&corpus, q.per_doc, q.query_len, q.seed)?
            };
            write_queries(a.out.join("queries.jsonl"), &queries)?;
            qrels.write_tsv(a.out.join("qrels.tsv"))?;
            let labels: String = corpus
                .store
                .iter()
                .zip(&corpus.labels)
                .map(|(d, t)| format!("{}\t{}\n", d.id, t))
                .collect();
            let p = a.out.join("labels.tsv");
            std::fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
            let p = a.out.join("spec.toml");
            std::fs::write(&p, toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?).map_err(|e| Error::io(&p, e))?;
            println!("{} documents, {} queries -> {}", corpus.store.len(), queries.len(), a.out.display());
        }
        Command::Passkey(a) => {
            let mut spec: PasskeySpec = match &a.spec {
                Some(p) => read_toml(p)?,
                None => PasskeySpec::default(),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let pk = generate_passkey_corpus(&spec)?;
            let vocab = experiments::build_vocab(&[&pk.store])?;
            save_store(&a.out, &pk.store, &vocab)?;
            write_queries(a.out.join("queries.jsonl"), &pk.queries)?;
            pk.qrels.write_tsv(a.out.join("qrels.tsv"))?;
            println!("{} passkey documents of {} words -> {}", pk.store.len(), spec.doc_len, a.out.display());
        }
        Command::AblateNegatives(a) | Command::CompareAug(a) => {
            let mut setup = cfg.experiment.clone();
            if let Some(s) = a.seed {
                setup.model_seed = s;
                setup.train.seed = s;
            }
            let r = if matches!(cli.command, Command::AblateNegatives(_)) {
                run_ablation_hard_negatives(&setup)?
            } else {
                run_augmentation_comparison(&setup)?
            };
            create_dir(&a.out)?;
            r.write(&a.out)?;
            cfg.experiment = setup;
            cfg.write_to(&a.out)?;
            print!("{}", report::paired_table(&r).render());
        }
        Command::ContextPair(a) => {
            let mut pair = cfg.context_pair.clone();
            if let Some(s) = a.seed {
                pair.setup.model_seed = s;
                pair.setup.train.seed = s;
            }
            let run = run_context_pair(&pair)?;
            run.report.write(&a.out)?;
            checkpoint::save(&run.long_model, a.out.join("long.ckpt"))?;
            checkpoint::save(&run.short_model, a.out.join("short.ckpt"))?;
            run.vocab.save(a.out.join(STORE_VOCAB))?;
            cfg.context_pair = pair;
            cfg.write_to(&a.out)?;
            for t in report::context_tables(&run.report) {
                println!("{}", t.render());
            }
        }
        Command::FillSweep(a) => {
            let vocab = Vocabulary::load(a.store.join(STORE_VOCAB))?;
            let model = load_model(&a.ckpt, &vocab)?;
            let mut sweep: FillSweepConfig = cfg.context_pair.sweep.clone();
            if let Some(f) = &a.fills {
                sweep.fills = f.clone();
            }
            if let Some(s) = a.seed {
                sweep.passkey.seed = s;
            }
            let r = run_fill_fraction_sweep(&model, &vocab, &sweep)?;
            create_dir(&a.out)?;
            r.write_csv(a.out.join("fill_sweep.csv"))?;
            write_json(&a.out.join("fill_sweep.json"), &r)?;
            cfg.context_pair.sweep = sweep;
            cfg.write_to(&a.out)?;
            for p in &r.points {
                println!("fill {:<5} words {:>4}  acc@1 {:.4}", p.fill, p.doc_len, p.accuracy_at_1);
            }
        }
        Command::GradCheck(a) => cmd_grad_check(a)?,
        Command::Report(a) => print!("{}", report::render_dir(&a.dir)?),
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, cfg: &mut RunConfig) -> Result<()> {
    let (store, vocab) = load_store(&a.store)?;
    let t = &mut cfg.train;
    if let Some(v) = a.k {
        t.k = v;
    }
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.negatives_scope {
        t.negatives_scope = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
        cfg.pretrain.seed = v;
        cfg.augment.seed = v;
    }
    t.use_lora |= a.lora;
    if let Some(v) = a.mode {
        cfg.augment.mode = v;
    }
    if let Some(v) = a.attn {
        cfg.model.attn_mode = v;
    }
    if let Some(v) = a.pretrain_epochs {
        cfg.pretrain.epochs = v;
    }
    cfg.model.vocab_size = vocab.len();
    let negatives = match &a.negatives {
        Some(p) => read_negatives(p)?,
        None if cfg.train.k == 0 => Vec::new(),
        None => {
            let index = InvertedIndex::build(&store, &vocab, cfg.bm25)?;
            HardNegativeMiner::new(&index, &vocab, cfg.train.k, cfg.augment.passage_len).mine_all(&store, cfg.train.seed)?
        }
    };
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    if cfg.pretrain.epochs > 0 {
        let log = pretrain_lm(&mut model, &store, &vocab, &cfg.pretrain)?;
        if let Some(s) = log.last() {
            println!("pretraining: {} steps, final LM loss {:.4}", log.len(), s.loss);
        }
    }
    let dir = parent_dir(&a.out)?.to_path_buf();
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.clone()),
        metrics_csv: Some(metrics),
    };
    let rep = train(&mut model, &store, &vocab, &negatives, &cfg.augment, &cfg.train, &outputs)?;
    let mut p = a.out.clone().into_os_string();
    p.push(".config.toml");
    std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    println!(
        "{} steps, loss {:.4} -> {:.4}, {} trainable parameters -> {} (in {})",
        rep.steps.len(),
        rep.initial_loss().unwrap_or(f64::NAN),
        rep.final_loss().unwrap_or(f64::NAN),
        rep.trainable_params,
        a.out.display(),
        dir.display()
    );
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<()> {
    let (model, default_entries) = if a.model == "random" {
        (tiny_check_model(a.seed)?, None)
    } else {
        (checkpoint::load(&a.model)?.cast::<f64>(), Some(16))
    };
    let opts = GradCheckOptions {
        max_entries: a.max_entries.or(default_entries),
        seed: a.seed,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for (name, r) in primitive_checks(opts)? {
        println!("{:<20} {:.3e}", name, r.max_rel_error());
        worst = worst.max(r.max_rel_error());
    }
    let r = pipeline_grad_check(&model, 0.05, opts)?;
    println!("{:<20} {:.3e}", "pipeline", r.max_rel_error());
    worst = worst.max(r.max_rel_error());
    if !(worst < a.tol) {
        return Err(Error::Numerical(format!("largest relative error {worst:.3e} exceeds tolerance {:.1e}", a.tol)));
    }
    println!("all gradient checks pass (largest relative error {worst:.3e} < {:.1e})", a.tol);
    Ok(())
}

/// The one-line stderr report of an error.
pub fn error_line(kind: &str, code: i32, msg: &str) -> String {
    format!("error kind={kind} code={code} msg={}", serde_json::to_string(msg).unwrap_or_default())
}

/// Parse `args`, run, and return the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", 1, first));
            return 1;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", error_line(e.kind(), code, &e.to_string()));
            code
        }
    }
}
