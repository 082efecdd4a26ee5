//! `mftr` command line. Each subcommand runs one pipeline stage over a work
//! directory; `cv` runs the whole protocol.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mftr::corpus::{avg_tools_per_query, build_mixed, load_dataset, DatasetFormat};
use mftr::eval::{render_table, MaskTarget};
use mftr::pipeline::{self, PipelineConfig, Variant};
use mftr::retrieval::{BackendKind, FieldId};
use mftr::synthetic::{generate, PlantSpec};
use mftr::Result;

#[derive(Parser)]
#[command(name = "mftr", version, about = "Multi-field tool retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite raw tool docs into the four-field schema.
    Standardize(PipelineArgs),
    /// Rewrite queries into tool needs and arguments.
    Rewrite(PipelineArgs),
    /// Build the per-field relevance indexes.
    Index(PipelineArgs),
    /// Fit the field weights and penalty on all queries.
    Train(PipelineArgs),
    /// Rank tools for every query and write a run file.
    Retrieve(PipelineArgs),
    /// Score the run file against the qrels.
    Eval(PipelineArgs),
    /// K-fold train and evaluate end to end.
    Cv(PipelineArgs),
    /// Field-masking ablation over single-text documents.
    Ablate(AblateArgs),
    /// Merge datasets into one benchmark with source-prefixed ids.
    Mix(MixArgs),
    /// Write a synthetic dataset with a planted signal.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Dataset directory (tools.jsonl, queries.jsonl, qrels.tsv).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    format: Option<DatasetFormat>,
    /// Where stage artifacts are read and written.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// LLM and embedding cache; defaults to <work-dir>/cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Use the offline rule-based standardizer, rewriter and hashing embedder.
    #[arg(long)]
    mock_llm: bool,
    #[arg(long)]
    chat_base_url: Option<String>,
    #[arg(long)]
    embed_base_url: Option<String>,
    /// Concurrent provider requests.
    #[arg(long)]
    parallelism: Option<usize>,
    /// sparse | dense
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    mock_embed_dim: Option<usize>,
    /// Pseudo-relevance candidates shown to the rewriter.
    #[arg(long)]
    prf_k: Option<usize>,
    #[arg(long)]
    exemplars: Option<usize>,
    #[arg(long)]
    max_needs: Option<usize>,
    /// Mined negatives per query.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep τ and the penalty weights at their initial values.
    #[arg(long)]
    freeze_penalty: bool,
    /// Let the penalty weights go negative during training.
    #[arg(long)]
    signed_penalty: bool,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Score only the union of each field's top M tools.
    #[arg(long, value_name = "M")]
    prune: Option<usize>,
    /// Min-max normalize each field's scores per query.
    #[arg(long)]
    min_max: bool,
    /// mftr, full-doc, stand-only, rewrite-only, weighting-only,
    /// stand-rewrite, stand-weighting, rewrite-weighting, mftr-no-penalty
    #[arg(long)]
    mode: Option<Variant>,
    /// Ranking depth written to run files.
    #[arg(long)]
    top_n: Option<usize>,
    /// Metric cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

impl PipelineArgs {
    fn config(self) -> Result<PipelineConfig> {
        let mut c = PipelineConfig {
            dataset: self.dataset,
            mock_llm: self.mock_llm,
            cache_dir: self.cache_dir,
            chat_base_url: self.chat_base_url,
            embed_base_url: self.embed_base_url,
            ..PipelineConfig::default()
        };
        macro_rules! set {
            ($($field:ident).+ = $value:expr) => {
                if let Some(v) = $value {
                    c.$($field).+ = v;
                }
            };
        }
        set!(format = self.format);
        set!(work_dir = self.work_dir);
        set!(parallelism = self.parallelism);
        set!(backend = self.backend);
        set!(mock_embed_dim = self.mock_embed_dim);
        set!(prf_k = self.prf_k);
        set!(exemplars = self.exemplars);
        set!(max_needs = self.max_needs);
        set!(n_negatives = self.negatives);
        set!(train.epochs = self.epochs);
        set!(train.batch = self.batch);
        set!(train.lr = self.lr);
        set!(train.seed = self.seed);
        set!(folds = self.folds);
        set!(alpha = self.alpha);
        set!(variant = self.mode);
        set!(top_n = self.top_n);
        set!(ks = self.ks);
        c.train.freeze_penalty = self.freeze_penalty;
        c.train.nonneg_penalty = !self.signed_penalty;
        c.rank.prune_m = self.prune;
        c.rank.min_max = self.min_max;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Units masked together, comma separated (name, description,
    /// parameters, response, examples). Repeatable; default is each unit
    /// on its own.
    #[arg(long = "mask")]
    masks: Vec<String>,
}

#[derive(Args)]
struct MixArgs {
    /// Dataset directories; each directory name becomes the id prefix.
    #[arg(required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DatasetFormat::Jsonl)]
    format: DatasetFormat,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tools: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    /// Field carrying the planted bigram.
    #[arg(long)]
    signal_field: Option<FieldId>,
    #[arg(long)]
    noise_vocab: Option<usize>,
    /// Share of queries that get a decoy with an unmatched required parameter.
    #[arg(long)]
    decoys: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_mask(text: &str) -> Result<BTreeSet<MaskTarget>> {
    text.split(',').map(|s| s.trim().parse()).collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Standardize(a) => {
            let c = a.config()?;
            let tools = pipeline::stage_standardize(&c)?;
            println!(
                "standardized {} tools -> {}",
                tools.len(),
                c.path(pipeline::STANDARDIZED_FILE).display()
            );
        }
        Command::Rewrite(a) => {
            let c = a.config()?;
            let rewritten = pipeline::stage_rewrite(&c)?;
            println!(
                "rewrote {} queries -> {}",
                rewritten.len(),
                c.path(pipeline::REWRITTEN_FILE).display()
            );
        }
        Command::Index(a) => {
            let c = a.config()?;
            let meta = pipeline::stage_index(&c)?;
            println!(
                "indexed {} tools -> {}",
                meta.tools,
                c.path(pipeline::INDEX_DIR).display()
            );
        }
        Command::Train(a) => {
            let c = a.config()?;
            let model = pipeline::stage_train(&c)?;
            let w = model.normalized_weights();
            println!(
                "weights desc {:.4} params {:.4} resp {:.4} examples {:.4}; tau {:.4} w_req {:.4} w_opt {:.4} -> {}",
                w[0],
                w[1],
                w[2],
                w[3],
                model.tau,
                model.w_required,
                model.w_optional,
                c.path(pipeline::MODEL_FILE).display()
            );
        }
        Command::Retrieve(a) => {
            let c = a.config()?;
            let run = pipeline::stage_retrieve(&c)?;
            println!(
                "ranked {} queries -> {}",
                run.queries.len(),
                c.path(pipeline::RUN_FILE).display()
            );
        }
        Command::Eval(a) => {
            let c = a.config()?;
            let report = pipeline::stage_eval(&c)?;
            print!("{}", render_table(std::slice::from_ref(&report)));
        }
        Command::Cv(a) => {
            let c = a.config()?;
            let out = pipeline::stage_cv(&c)?;
            print!("{}", render_table(std::slice::from_ref(&out.report)));
            println!("artifacts in {}", c.path(pipeline::CV_DIR).display());
        }
        Command::Ablate(a) => {
            let masks = if a.masks.is_empty() {
                None
            } else {
                Some(
                    a.masks
                        .iter()
                        .map(|m| parse_mask(m))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            let c = a.pipeline.config()?;
            let report = pipeline::stage_ablate(&c, masks)?;
            print!("{}", report.to_table());
        }
        Command::Mix(a) => {
            let sets = a
                .datasets
                .iter()
                .map(|p| load_dataset(p, a.format))
                .collect::<Result<Vec<_>>>()?;
            let mixed = build_mixed(&sets)?;
            mixed.save(&a.out)?;
            println!(
                "{} tools, {} queries, {:.4} relevant tools per query -> {}",
                mixed.tools.len(),
                mixed.queries.len(),
                avg_tools_per_query(&mixed)?,
                a.out.display()
            );
        }
        Command::Synth(a) => {
            let d = PlantSpec::default();
            let spec = PlantSpec {
                corpus_size: a.tools.unwrap_or(d.corpus_size),
                num_queries: a.queries.unwrap_or(d.num_queries),
                signal_field: a.signal_field.unwrap_or(d.signal_field),
                noise_vocab: a.noise_vocab.unwrap_or(d.noise_vocab),
                decoy_fraction: a.decoys.unwrap_or(d.decoy_fraction),
                seed: a.seed.unwrap_or(d.seed),
            };
            let synth = generate(&spec)?;
            synth.save(&a.out)?;
            println!(
                "{} tools, {} queries, {} decoys -> {}",
                synth.dataset.tools.len(),
                synth.dataset.queries.len(),
                synth.decoys.len(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            info!("{e:?}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
