//! Stage plumbing over a work directory.
//!
//! Each stage reads the artifacts of the stages before it and writes its
//! own. A missing input reports the file and the command that produces it.
//!
//! | stage        | writes                                              |
//! |--------------|-----------------------------------------------------|
//! | standardize  | `standardized.jsonl`                                |
//! | rewrite      | `rewritten.jsonl`                                   |
//! | index        | `index/backend.json`, `index/meta.json`             |
//! | train        | `model.json`, `loss.csv`                            |
//! | retrieve     | `run.trec`                                          |
//! | eval         | `report.json`, `report.txt`                         |
//! | cv           | `cv/run.trec`, `cv/report.*`, `cv/folds.json`, `cv/fold_k/*` |
//! | ablate       | `ablation.json`, `ablation.txt`                     |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::ContentCache;
use crate::corpus::{dedup_queries, load_dataset, Dataset, DatasetFormat, RawTool};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_run, field_mask_ablation, render_table, single_masks, AblationBackend, AblationReport,
    EvalReport, MaskTarget, RunRanking, DEFAULT_KS, DEFAULT_TOP_N,
};
use crate::provider::{
    ChatProvider, EmbeddingProvider, HttpChatProvider, HttpConfig, HttpEmbeddingProvider,
};
use crate::retrieval::{
    concat_fields, BackendDocs, BackendKind, Bm25Params, EmbeddingStore, HashingEmbedder,
    RelevanceBackend, SparseIndex,
};
use crate::rewriter::{
    read_rewritten, write_rewritten, PrfIndex, RewriteSettings, Rewriter, RewrittenQuery,
};
use crate::scorer::{query_texts, RankOptions, Scorer, ScoringModel, DEFAULT_ALPHA};
use crate::standardizer::{
    raw_doc_text, read_standardized, write_standardized, StandardizedTool, Standardizer,
};
use crate::trainer::{
    cross_validate, fit, rank_mode, write_loss_csv, Aggregation, CvConfig, CvOutcome, TrainConfig,
    TrainingSet, DEFAULT_FOLDS, DEFAULT_NEGATIVES,
};

pub const STANDARDIZED_FILE: &str = "standardized.jsonl";
pub const REWRITTEN_FILE: &str = "rewritten.jsonl";
pub const INDEX_DIR: &str = "index";
pub const BACKEND_FILE: &str = "backend.json";
pub const INDEX_META_FILE: &str = "meta.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const MODEL_FILE: &str = "model.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const RUN_FILE: &str = "run.trec";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const CV_DIR: &str = "cv";
pub const FOLDS_FILE: &str = "folds.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub standardize: bool,
    pub rewrite: bool,
    pub aggregation: Aggregation,
}

const PRESETS: [(&str, Variant); 9] = [
    ("mftr", Variant::new(true, true, Aggregation::Learned)),
    ("full-doc", Variant::new(false, false, Aggregation::Concat)),
    ("stand-only", Variant::new(true, false, Aggregation::Mean)),
    ("rewrite-only", Variant::new(false, true, Aggregation::Mean)),
    (
        "weighting-only",
        Variant::new(false, false, Aggregation::Learned),
    ),
    ("stand-rewrite", Variant::new(true, true, Aggregation::Mean)),
    (
        "stand-weighting",
        Variant::new(true, false, Aggregation::Learned),
    ),
    (
        "rewrite-weighting",
        Variant::new(false, true, Aggregation::Learned),
    ),
    (
        "mftr-no-penalty",
        Variant::new(true, true, Aggregation::LearnedNoPenalty),
    ),
];

impl Variant {
    pub const fn new(standardize: bool, rewrite: bool, aggregation: Aggregation) -> Self {
        Variant {
            standardize,
            rewrite,
            aggregation,
        }
    }

    pub fn mftr() -> Self {
        PRESETS[0].1
    }

    pub fn full_doc() -> Self {
        PRESETS[1].1
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::mftr()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::preset_names().collect();
                Error::Config(format!(
                    "unknown mode {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match PRESETS.iter().find(|(_, v)| v == self) {
            Some((name, _)) => f.write_str(name),
            None => write!(
                f,
                "std={}-rw={}-{}",
                self.standardize as u8, self.rewrite as u8, self.aggregation
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub format: DatasetFormat,
    pub work_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub mock_llm: bool,
    pub chat_base_url: Option<String>,
    pub embed_base_url: Option<String>,
    pub parallelism: usize,
    pub backend: BackendKind,
    /// Dimension of the offline hashing embedder used with `mock_llm`.
    pub mock_embed_dim: usize,
    pub prf_k: usize,
    pub exemplars: usize,
    pub max_needs: usize,
    pub n_negatives: usize,
    pub train: TrainConfig,
    pub folds: usize,
    pub alpha: f64,
    pub rank: RankOptions,
    pub variant: Variant,
    pub top_n: usize,
    pub ks: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let rw = RewriteSettings::default();
        PipelineConfig {
            dataset: PathBuf::new(),
            format: DatasetFormat::default(),
            work_dir: PathBuf::from("work"),
            cache_dir: None,
            mock_llm: false,
            chat_base_url: None,
            embed_base_url: None,
            parallelism: rw.parallelism,
            backend: BackendKind::default(),
            mock_embed_dim: 256,
            prf_k: rw.prf_k,
            exemplars: rw.exemplars,
            max_needs: rw.max_needs,
            n_negatives: DEFAULT_NEGATIVES,
            train: TrainConfig::default(),
            folds: DEFAULT_FOLDS,
            alpha: DEFAULT_ALPHA,
            rank: RankOptions::default(),
            variant: Variant::default(),
            top_n: DEFAULT_TOP_N,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(
                "metric cutoffs must be non-empty and ≥ 1".into(),
            ));
        }
        if self.top_n == 0 || self.folds < 2 || self.max_needs == 0 {
            return Err(Error::Config(
                "top_n and max_needs must be ≥ 1, folds ≥ 2".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        Ok(())
    }

    /// The resolved configuration embedded in reports. Output locations are
    /// left out so that identical runs in different directories match.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("work_dir");
            map.remove("cache_dir");
        }
        v
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    pub fn index_path(&self, name: &str) -> PathBuf {
        self.work_dir.join(INDEX_DIR).join(name)
    }

    fn cache_root(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.work_dir.join("cache"))
    }

    pub fn rewrite_settings(&self) -> RewriteSettings {
        RewriteSettings {
            prf_k: self.prf_k,
            exemplars: self.exemplars,
            max_needs: self.max_needs,
            parallelism: self.parallelism,
        }
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            folds: self.folds,
            seed: self.train.seed,
            aggregation: self.variant.aggregation,
            train: self.train,
            alpha: self.alpha,
            rank: self.rank,
            top_n: self.top_n,
            ..CvConfig::default()
        }
    }

    fn init_model(&self) -> ScoringModel {
        self.cv_config().init_model()
    }
}

fn require(path: PathBuf, command: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, command })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn http_config(base: Option<&str>, from_env: fn() -> Result<HttpConfig>) -> Result<HttpConfig> {
    let mut config = from_env()?;
    if let Some(base) = base {
        config.base_url = base.trim_end_matches('/').to_string();
    }
    Ok(config)
}

pub fn chat_provider(config: &PipelineConfig) -> Result<HttpChatProvider> {
    Ok(HttpChatProvider::new(http_config(
        config.chat_base_url.as_deref(),
        HttpConfig::chat_from_env,
    )?))
}

pub fn embedding_provider(config: &PipelineConfig) -> Result<Box<dyn EmbeddingProvider>> {
    if config.mock_llm {
        Ok(Box::new(HashingEmbedder::new(config.mock_embed_dim)))
    } else {
        Ok(Box::new(HttpEmbeddingProvider::new(http_config(
            config.embed_base_url.as_deref(),
            HttpConfig::embedding_from_env,
        )?)))
    }
}

pub fn load(config: &PipelineConfig) -> Result<Dataset> {
    config.validate()?;
    let mut dataset = load_dataset(&config.dataset, config.format)?;
    let dropped = dedup_queries(&mut dataset);
    if !dropped.is_empty() {
        log::info!("dropped {} duplicate queries", dropped.len());
    }
    Ok(dataset)
}

/// Without standardization a tool is one unstructured description holding
/// the flattened raw documentation.
pub fn unstructured(raw: &RawTool) -> StandardizedTool {
    StandardizedTool {
        tool_id: raw.id.clone(),
        description: raw_doc_text(&raw.doc),
        parameters: Vec::new(),
        response: String::new(),
        examples: Vec::new(),
    }
}

/// Tools as the variant sees them, sorted by id.
pub fn variant_tools(
    dataset: &Dataset,
    standardized: Option<&[StandardizedTool]>,
    variant: Variant,
) -> Result<Vec<StandardizedTool>> {
    let mut tools = if variant.standardize {
        let std =
            standardized.ok_or_else(|| Error::Config("variant needs standardized tools".into()))?;
        let ids: BTreeSet<&str> = dataset.tools.iter().map(|t| t.id.as_str()).collect();
        let have: BTreeSet<&str> = std.iter().map(|t| t.tool_id.as_str()).collect();
        if let Some(missing) = ids.difference(&have).next() {
            return Err(Error::Config(format!(
                "standardized corpus lacks tool {missing:?}; re-run `mftr standardize`"
            )));
        }
        std.iter()
            .filter(|t| ids.contains(t.tool_id.as_str()))
            .cloned()
            .collect()
    } else {
        dataset.tools.iter().map(unstructured).collect::<Vec<_>>()
    };
    tools.sort_by(|a, b| a.tool_id.cmp(&b.tool_id));
    Ok(tools)
}

/// Rewritten queries as the variant sees them, in dataset query order.
pub fn variant_queries(
    dataset: &Dataset,
    rewritten: Option<&[RewrittenQuery]>,
    variant: Variant,
) -> Result<Vec<RewrittenQuery>> {
    if !variant.rewrite {
        return Ok(dataset
            .queries
            .iter()
            .map(RewrittenQuery::passthrough)
            .collect());
    }
    let rw = rewritten.ok_or_else(|| Error::Config("variant needs rewritten queries".into()))?;
    let by_id: BTreeMap<&str, &RewrittenQuery> =
        rw.iter().map(|r| (r.query_id.as_str(), r)).collect();
    dataset
        .queries
        .iter()
        .map(|q| {
            by_id
                .get(q.id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no rewrite for query {:?}; re-run `mftr rewrite`",
                        q.id
                    ))
                })
        })
        .collect()
}

/// Index texts: variant fields plus the raw documentation as the full
/// document.
pub fn backend_docs(dataset: &Dataset, tools: &[StandardizedTool]) -> BackendDocs {
    BackendDocs::from_standardized(tools).with_full_doc(
        dataset
            .tools
            .iter()
            .map(|t| (t.id.clone(), raw_doc_text(&t.doc)))
            .collect(),
    )
}

pub fn build_backend(
    kind: BackendKind,
    docs: &BackendDocs,
    embedder: &dyn EmbeddingProvider,
    store: &mut EmbeddingStore,
) -> Result<RelevanceBackend> {
    match kind {
        BackendKind::Sparse => RelevanceBackend::build_sparse(docs, Bm25Params::default()),
        BackendKind::Dense => RelevanceBackend::build_dense(docs, embedder, store),
    }
}

fn embed_query_side(
    backend: &mut RelevanceBackend,
    dataset: &Dataset,
    rewritten: &[RewrittenQuery],
    embedder: &dyn EmbeddingProvider,
    store: &mut EmbeddingStore,
) -> Result<()> {
    if backend.kind() == BackendKind::Sparse {
        return Ok(());
    }
    let texts: BTreeSet<String> = dataset
        .queries
        .iter()
        .zip(rewritten)
        .flat_map(|(q, rq)| query_texts(rq, &q.text))
        .collect();
    backend.embed_queries(embedder, store, &texts.into_iter().collect::<Vec<_>>())
}

/// Sparse index over the concatenated fields, used to mine hard negatives.
pub fn negative_index(tools: &[StandardizedTool]) -> Result<SparseIndex> {
    SparseIndex::build(
        tools.iter().map(|t| (t.tool_id.clone(), concat_fields(t))),
        Bm25Params::default(),
    )
}

/// Everything held in memory for training and ranking one variant.
pub struct Experiment {
    pub dataset: Dataset,
    pub tools: Vec<StandardizedTool>,
    pub rewritten: Vec<RewrittenQuery>,
    pub backend: RelevanceBackend,
    pub negatives: SparseIndex,
}

impl Experiment {
    pub fn new(
        dataset: Dataset,
        standardized: Option<&[StandardizedTool]>,
        rewritten: Option<&[RewrittenQuery]>,
        variant: Variant,
        kind: BackendKind,
        embedder: &dyn EmbeddingProvider,
        store: &mut EmbeddingStore,
    ) -> Result<Self> {
        let tools = variant_tools(&dataset, standardized, variant)?;
        let rewritten = variant_queries(&dataset, rewritten, variant)?;
        let mut backend = build_backend(kind, &backend_docs(&dataset, &tools), embedder, store)?;
        embed_query_side(&mut backend, &dataset, &rewritten, embedder, store)?;
        let negatives = negative_index(&tools)?;
        Ok(Experiment {
            dataset,
            tools,
            rewritten,
            backend,
            negatives,
        })
    }

    pub fn scorer(&self) -> Result<Scorer<'_>> {
        Scorer::new(&self.backend, &self.tools)
    }

    pub fn training_set<'a>(
        &'a self,
        scorer: &'a Scorer<'a>,
        n_negatives: usize,
    ) -> Result<TrainingSet<'a>> {
        TrainingSet::build(
            scorer,
            &self.dataset.queries,
            &self.rewritten,
            &self.dataset.qrels,
            &self.negatives,
            n_negatives,
        )
    }

    pub fn cross_validate(
        &self,
        config: &CvConfig,
        n_negatives: usize,
        ks: &[usize],
    ) -> Result<CvOutcome> {
        let scorer = self.scorer()?;
        let set = self.training_set(&scorer, n_negatives)?;
        cross_validate(&set, config, ks)
    }
}

fn standardizer_run(config: &PipelineConfig, dataset: &Dataset) -> Result<Vec<StandardizedTool>> {
    if config.mock_llm {
        return Standardizer::Mock.run_all(&dataset.tools, config.parallelism);
    }
    let provider = chat_provider(config)?;
    let cache = ContentCache::new(config.cache_root(), "standardize")?;
    Standardizer::Llm {
        provider: &provider as &dyn ChatProvider,
        cache: &cache,
    }
    .run_all(&dataset.tools, config.parallelism)
}

pub fn stage_standardize(config: &PipelineConfig) -> Result<Vec<StandardizedTool>> {
    let dataset = load(config)?;
    let tools = standardizer_run(config, &dataset)?;
    if tools.iter().any(|t| t.response.is_empty()) {
        log::warn!(
            "{} tools have an empty response field",
            tools.iter().filter(|t| t.response.is_empty()).count()
        );
    }
    write_standardized(&config.path(STANDARDIZED_FILE), &tools)?;
    Ok(tools)
}

fn read_stage_standardized(config: &PipelineConfig) -> Result<Vec<StandardizedTool>> {
    read_standardized(&require(config.path(STANDARDIZED_FILE), "standardize")?)
}

fn read_stage_rewritten(config: &PipelineConfig) -> Result<Vec<RewrittenQuery>> {
    read_rewritten(&require(config.path(REWRITTEN_FILE), "rewrite")?)
}

pub fn stage_rewrite(config: &PipelineConfig) -> Result<Vec<RewrittenQuery>> {
    let dataset = load(config)?;
    let tools = read_stage_standardized(config)?;
    let prf = PrfIndex::build(&tools)?;
    let settings = config.rewrite_settings();
    let rewritten = if config.mock_llm {
        Rewriter::Mock.run_all(&dataset.queries, &prf, settings)?
    } else {
        let provider = chat_provider(config)?;
        let cache = ContentCache::new(config.cache_root(), "rewrite")?;
        Rewriter::Llm {
            provider: &provider,
            cache: &cache,
        }
        .run_all(&dataset.queries, &prf, settings)?
    };
    write_rewritten(&config.path(REWRITTEN_FILE), &rewritten)?;
    Ok(rewritten)
}

/// What an index was built from; later stages refuse a mismatched index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub dataset: String,
    pub backend: BackendKind,
    pub standardized: bool,
    pub tools: usize,
    pub provider_tag: Option<String>,
}

fn optional_inputs(
    config: &PipelineConfig,
) -> Result<(Option<Vec<StandardizedTool>>, Option<Vec<RewrittenQuery>>)> {
    let std = if config.variant.standardize {
        Some(read_stage_standardized(config)?)
    } else {
        None
    };
    let rw = if config.variant.rewrite {
        Some(read_stage_rewritten(config)?)
    } else {
        None
    };
    Ok((std, rw))
}

fn embedding_store(
    config: &PipelineConfig,
    embedder: &dyn EmbeddingProvider,
) -> Result<EmbeddingStore> {
    let path = config.index_path(EMBEDDINGS_FILE);
    if path.exists() {
        EmbeddingStore::load(&path, embedder.tag())
    } else {
        Ok(EmbeddingStore::new(embedder.tag()))
    }
}

pub fn stage_index(config: &PipelineConfig) -> Result<IndexMeta> {
    let dataset = load(config)?;
    let std = if config.variant.standardize {
        Some(read_stage_standardized(config)?)
    } else {
        None
    };
    let tools = variant_tools(&dataset, std.as_deref(), config.variant)?;
    let embedder = embedding_provider(config)?;
    let mut store = embedding_store(config, embedder.as_ref())?;
    let backend = build_backend(
        config.backend,
        &backend_docs(&dataset, &tools),
        embedder.as_ref(),
        &mut store,
    )?;
    let meta = IndexMeta {
        dataset: dataset.name.clone(),
        backend: config.backend,
        standardized: config.variant.standardize,
        tools: tools.len(),
        provider_tag: (config.backend == BackendKind::Dense).then(|| embedder.tag().to_string()),
    };
    write_text(
        &config.index_path(BACKEND_FILE),
        &serde_json::to_string(&backend)?,
    )?;
    write_text(
        &config.index_path(INDEX_META_FILE),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    if config.backend == BackendKind::Dense {
        store.save(&config.index_path(EMBEDDINGS_FILE))?;
    }
    Ok(meta)
}

/// Loads the stored index and the variant inputs for train/retrieve.
fn stored_experiment(config: &PipelineConfig) -> Result<Experiment> {
    let dataset = load(config)?;
    let meta_path = require(config.index_path(INDEX_META_FILE), "index")?;
    let backend_path = require(config.index_path(BACKEND_FILE), "index")?;
    let meta: IndexMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    if meta.backend != config.backend || meta.standardized != config.variant.standardize {
        return Err(Error::Config(format!(
            "index was built for backend {:?} with standardized={}; re-run `mftr index`",
            meta.backend, meta.standardized
        )));
    }
    let (std, rw) = optional_inputs(config)?;
    let tools = variant_tools(&dataset, std.as_deref(), config.variant)?;
    let rewritten = variant_queries(&dataset, rw.as_deref(), config.variant)?;
    let mut backend: RelevanceBackend = serde_json::from_str(
        &std::fs::read_to_string(&backend_path).map_err(|e| Error::io(&backend_path, e))?,
    )?;
    if backend.tool_ids().len() != tools.len() {
        return Err(Error::Config(
            "index does not match the dataset; re-run `mftr index`".into(),
        ));
    }
    let embedder = embedding_provider(config)?;
    let mut store = embedding_store(config, embedder.as_ref())?;
    embed_query_side(
        &mut backend,
        &dataset,
        &rewritten,
        embedder.as_ref(),
        &mut store,
    )?;
    if config.backend == BackendKind::Dense {
        store.save(&config.index_path(EMBEDDINGS_FILE))?;
    }
    let negatives = negative_index(&tools)?;
    Ok(Experiment {
        dataset,
        tools,
        rewritten,
        backend,
        negatives,
    })
}

pub fn stage_train(config: &PipelineConfig) -> Result<ScoringModel> {
    let exp = stored_experiment(config)?;
    let scorer = exp.scorer()?;
    let set = exp.training_set(&scorer, config.n_negatives)?;
    let triples = match config.variant.aggregation {
        Aggregation::Learned | Aggregation::LearnedNoPenalty => set.triples(&|_| true),
        _ => Vec::new(),
    };
    let (model, losses) = fit(
        config.variant.aggregation,
        &triples,
        &config.init_model(),
        &config.train,
    )?;
    model.save(&config.path(MODEL_FILE))?;
    write_loss_csv(&config.path(LOSS_FILE), &losses)?;
    Ok(model)
}

pub fn stage_retrieve(config: &PipelineConfig) -> Result<RunRanking> {
    let model = match config.variant.aggregation {
        Aggregation::Concat | Aggregation::Mean => ScoringModel::mean(),
        _ => ScoringModel::load(&require(config.path(MODEL_FILE), "train")?)?,
    };
    let exp = stored_experiment(config)?;
    let scorer = exp.scorer()?;
    let set = exp.training_set(&scorer, 0)?;
    let run = set.run(
        &|_| true,
        &model,
        rank_mode(config.variant.aggregation),
        config.rank,
        config.top_n,
    );
    run.write_trec(&config.path(RUN_FILE), &run_tag(config))?;
    Ok(run)
}

pub fn run_tag(config: &PipelineConfig) -> String {
    format!("{}-{}", config.variant, backend_name(config.backend))
}

fn backend_name(kind: BackendKind) -> &'static str {
    match kind {
        BackendKind::Sparse => "sparse",
        BackendKind::Dense => "dense",
    }
}

fn label(report: &mut EvalReport, config: &PipelineConfig, dataset: &Dataset) {
    report.run_tag = run_tag(config);
    report.dataset = dataset.name.clone();
    report.backend = backend_name(config.backend).to_string();
    report.mode = config.variant.to_string();
    report.config = Some(config.echo());
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_text(&dir.join(REPORT_JSON), &report.to_json()?)?;
    write_text(
        &dir.join(REPORT_TXT),
        &render_table(std::slice::from_ref(report)),
    )
}

pub fn stage_eval(config: &PipelineConfig) -> Result<EvalReport> {
    let dataset = load(config)?;
    let run = RunRanking::read_trec(&require(config.path(RUN_FILE), "retrieve")?)?;
    let mut report = evaluate_run(&run, &dataset.qrels, &config.ks)?;
    label(&mut report, config, &dataset);
    write_report(&config.work_dir, &report)?;
    Ok(report)
}

/// The full protocol: standardize and rewrite when the artifacts are
/// missing, build the index in memory, then k-fold train and evaluate.
pub fn stage_cv(config: &PipelineConfig) -> Result<CvOutcome> {
    let dataset = load(config)?;
    let std = if config.variant.standardize {
        Some(if config.path(STANDARDIZED_FILE).exists() {
            read_stage_standardized(config)?
        } else {
            stage_standardize(config)?
        })
    } else {
        None
    };
    let rw = if config.variant.rewrite {
        Some(if config.path(REWRITTEN_FILE).exists() {
            read_stage_rewritten(config)?
        } else {
            if std.is_none() && !config.path(STANDARDIZED_FILE).exists() {
                stage_standardize(config)?;
            }
            stage_rewrite(config)?
        })
    } else {
        None
    };
    let embedder = embedding_provider(config)?;
    let mut store = EmbeddingStore::new(embedder.tag());
    let exp = Experiment::new(
        dataset,
        std.as_deref(),
        rw.as_deref(),
        config.variant,
        config.backend,
        embedder.as_ref(),
        &mut store,
    )?;
    let mut outcome = exp.cross_validate(&config.cv_config(), config.n_negatives, &config.ks)?;
    label(&mut outcome.report, config, &exp.dataset);

    let dir = config.path(CV_DIR);
    write_text(&dir.join(RUN_FILE), &outcome.run.to_trec(&run_tag(config)))?;
    write_report(&dir, &outcome.report)?;
    write_text(
        &dir.join(FOLDS_FILE),
        &(serde_json::to_string_pretty(&outcome.assignment)? + "\n"),
    )?;
    for fold in &mut outcome.folds {
        label(&mut fold.report, config, &exp.dataset);
        let fdir = dir.join(format!("fold_{}", fold.fold));
        write_text(&fdir.join(MODEL_FILE), &fold.model.to_json()?)?;
        write_text(
            &fdir.join(LOSS_FILE),
            &crate::trainer::loss_csv(&fold.epoch_losses),
        )?;
        write_report(&fdir, &fold.report)?;
    }
    Ok(outcome)
}

/// Field-mask ablation over the standardized corpus; `masks` defaults to
/// one mask per target.
pub fn stage_ablate(
    config: &PipelineConfig,
    masks: Option<Vec<BTreeSet<MaskTarget>>>,
) -> Result<AblationReport> {
    let dataset = load(config)?;
    let tools = read_stage_standardized(config)?;
    let tools = variant_tools(
        &dataset,
        Some(&tools),
        Variant {
            standardize: true,
            ..config.variant
        },
    )?;
    let masks = masks.unwrap_or_else(|| single_masks(&MaskTarget::ALL));
    let embedder;
    let backend = match config.backend {
        BackendKind::Sparse => AblationBackend::Sparse(Bm25Params::default()),
        BackendKind::Dense => {
            embedder = embedding_provider(config)?;
            AblationBackend::Dense(embedder.as_ref())
        }
    };
    let report = field_mask_ablation(
        &tools,
        &dataset.queries,
        &dataset.qrels,
        backend,
        &masks,
        &config.ks,
    )?;
    write_text(
        &config.path(ABLATION_JSON),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    write_text(&config.path(ABLATION_TXT), &report.to_table())?;
    Ok(report)
}
