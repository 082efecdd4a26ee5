//! Pairwise training of the aggregation model and k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Qrels, Query};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, EvalReport, RunRanking};
use crate::retrieval::{tokenize, top_n_by_score, SparseIndex};
use crate::rewriter::RewrittenQuery;
use crate::scorer::{
    penalty_gate, sigmoid, Components, PreparedQuery, RankMode, RankOptions, Scorer, ScoringModel,
};

pub const DEFAULT_NEGATIVES: usize = 64;
pub const DEFAULT_EPOCHS: usize = 5;
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_SEED: u64 = 13;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTriple {
    pub query_id: String,
    pub positive: String,
    pub negative: String,
    pub pos: Components,
    pub neg: Components,
}

/// Top `n` BM25 tools for the original query text that are not relevant.
pub fn mine_negatives(query: &Query, qrels: &Qrels, index: &SparseIndex, n: usize) -> Vec<String> {
    let relevant = qrels.relevant(&query.id);
    let scores = index.score_all(&tokenize(&query.text));
    top_n_by_score(index.doc_ids(), &scores, index.doc_count())
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| !relevant.contains(id.as_str()))
        .take(n)
        .collect()
}

/// `ln(1 + exp(−(s_pos − s_neg)))` without overflow.
pub fn pairwise_loss(s_pos: f64, s_neg: f64) -> f64 {
    softplus(-(s_pos - s_neg))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss gradient, one entry per learnable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gradients {
    pub weights: [f64; 4],
    pub bias: f64,
    pub tau: f64,
    pub w_required: f64,
    pub w_optional: f64,
}

impl Gradients {
    fn to_vec(self) -> [f64; 8] {
        let w = self.weights;
        [
            w[0],
            w[1],
            w[2],
            w[3],
            self.bias,
            self.tau,
            self.w_required,
            self.w_optional,
        ]
    }
}

fn params_of(m: &ScoringModel) -> [f64; 8] {
    let w = m.weights;
    [
        w[0],
        w[1],
        w[2],
        w[3],
        m.bias,
        m.tau,
        m.w_required,
        m.w_optional,
    ]
}

fn set_params(m: &mut ScoringModel, p: &[f64; 8]) {
    m.weights = [p[0], p[1], p[2], p[3]];
    m.bias = p[4];
    m.tau = p[5];
    m.w_required = p[6];
    m.w_optional = p[7];
}

/// Partial derivatives of `S(q, t)` for one tool.
fn score_gradient(c: &Components, model: &ScoringModel) -> Gradients {
    let mut g = Gradients {
        weights: c.fields,
        bias: 1.0,
        ..Gradients::default()
    };
    for p in &c.params {
        let gate = penalty_gate(p.score, model);
        let weight = if p.required {
            g.w_required -= gate;
            model.w_required
        } else {
            g.w_optional -= gate;
            model.w_optional
        };
        g.tau -= model.alpha * gate * (1.0 - gate) * weight;
    }
    g
}

pub fn triple_loss(t: &TrainTriple, model: &ScoringModel) -> f64 {
    pairwise_loss(t.pos.score(model).total, t.neg.score(model).total)
}

pub fn gradients(t: &TrainTriple, model: &ScoringModel) -> Gradients {
    let margin = t.pos.score(model).total - t.neg.score(model).total;
    let dl_dm = -sigmoid(-margin);
    let gp = score_gradient(&t.pos, model);
    let gn = score_gradient(&t.neg, model);
    let mut weights = [0.0; 4];
    for i in 0..4 {
        weights[i] = dl_dm * (gp.weights[i] - gn.weights[i]);
    }
    Gradients {
        weights,
        // the bias appears in both scores and cancels in the margin
        bias: 0.0,
        tau: dl_dm * (gp.tau - gn.tau),
        w_required: dl_dm * (gp.w_required - gn.w_required),
        w_optional: dl_dm * (gp.w_optional - gn.w_optional),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Keep τ, w_req and w_opt at their initial values.
    pub freeze_penalty: bool,
    /// Project w_req and w_opt onto [0, ∞) after every step, so the
    /// missing-parameter term never becomes a bonus.
    pub nonneg_penalty: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            seed: DEFAULT_SEED,
            freeze_penalty: false,
            nonneg_penalty: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: [f64; 8],
    pub v: [f64; 8],
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ScoringModel,
    /// Mean loss of each epoch, measured as the triples were visited.
    pub epoch_losses: Vec<f64>,
    pub optimizer: OptimizerState,
}

/// Mini-batch Adam over the triples, reshuffled every epoch from
/// `seed + epoch`. `alpha` is never updated.
pub fn train(
    init: &ScoringModel,
    triples: &[TrainTriple],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if triples.is_empty() {
        return Err(Error::Config("no training triples".into()));
    }
    if config.batch == 0 || config.epochs == 0 {
        return Err(Error::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    init.validate()?;
    let mut model = *init;
    let mut opt = OptimizerState {
        m: [0.0; 8],
        v: [0.0; 8],
        step: 0,
        lr: config.lr,
        seed: config.seed,
    };
    let frozen: [bool; 8] = [
        false,
        false,
        false,
        false,
        false,
        config.freeze_penalty,
        config.freeze_penalty,
        config.freeze_penalty,
    ];
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch) {
            let mut grad = [0.0; 8];
            for &i in batch {
                let t = &triples[i];
                let loss = triple_loss(t, &model);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        loss,
                        query_id: t.query_id.clone(),
                        positive: t.positive.clone(),
                        negative: t.negative.clone(),
                    });
                }
                total += loss;
                for (g, d) in grad.iter_mut().zip(gradients(t, &model).to_vec()) {
                    *g += d;
                }
            }
            opt.step += 1;
            let n = batch.len() as f64;
            let bc1 = 1.0 - BETA1.powi(opt.step as i32);
            let bc2 = 1.0 - BETA2.powi(opt.step as i32);
            let mut p = params_of(&model);
            for j in 0..8 {
                if frozen[j] {
                    continue;
                }
                let g = grad[j] / n;
                opt.m[j] = BETA1 * opt.m[j] + (1.0 - BETA1) * g;
                opt.v[j] = BETA2 * opt.v[j] + (1.0 - BETA2) * g * g;
                let m_hat = opt.m[j] / bc1;
                let v_hat = opt.v[j] / bc2;
                p[j] -= opt.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
            if config.nonneg_penalty {
                p[6] = p[6].max(0.0);
                p[7] = p[7].max(0.0);
            }
            set_params(&mut model, &p);
        }
        let mean = total / triples.len() as f64;
        log::debug!("epoch {}: mean loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        optimizer: opt,
    })
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    std::fs::write(path, loss_csv(losses)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> BTreeSet<&str> {
        self.folds
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(q, _)| q.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k).map(|f| self.members(f).len()).collect()
    }
}

/// Sorts the ids, shuffles them with `seed` and deals them round-robin, so
/// the assignment does not depend on input order.
pub fn kfold_split(query_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Config("number of folds must be positive".into()));
    }
    let mut ids: Vec<&String> = query_ids
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < k {
        return Err(Error::TooFewQueries {
            have: ids.len(),
            need: k,
        });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(FoldAssignment {
        k,
        folds: ids
            .into_iter()
            .enumerate()
            .map(|(i, q)| (q.clone(), i % k))
            .collect(),
    })
}

/// A query ready for scoring, with its mined negatives.
#[derive(Debug, Clone)]
pub struct QueryData {
    pub query_id: String,
    pub prepared: PreparedQuery,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// Everything training and evaluation need, precomputed once.
pub struct TrainingSet<'a> {
    pub scorer: &'a Scorer<'a>,
    pub qrels: &'a Qrels,
    pub queries: Vec<QueryData>,
}

impl<'a> TrainingSet<'a> {
    /// `rewritten` must hold one entry per query; `negative_index` indexes
    /// the concatenated standardized fields.
    pub fn build(
        scorer: &'a Scorer<'a>,
        queries: &[Query],
        rewritten: &[RewrittenQuery],
        qrels: &'a Qrels,
        negative_index: &SparseIndex,
        n_negatives: usize,
    ) -> Result<Self> {
        let by_id: BTreeMap<&str, &RewrittenQuery> =
            rewritten.iter().map(|r| (r.query_id.as_str(), r)).collect();
        let mut data = Vec::with_capacity(queries.len());
        for q in queries {
            let rq = by_id
                .get(q.id.as_str())
                .ok_or_else(|| Error::MissingArtifact {
                    path: format!("rewritten query {:?}", q.id).into(),
                    command: "rewrite",
                })?;
            let positives: Vec<String> = qrels
                .relevant(&q.id)
                .into_iter()
                .map(String::from)
                .collect();
            for p in &positives {
                scorer
                    .backend()
                    .position(p)
                    .ok_or_else(|| Error::UnknownTool(p.clone()))?;
            }
            data.push(QueryData {
                query_id: q.id.clone(),
                prepared: scorer.prepare(rq, &q.text)?,
                positives,
                negatives: mine_negatives(q, qrels, negative_index, n_negatives),
            });
        }
        data.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        Ok(TrainingSet {
            scorer,
            qrels,
            queries: data,
        })
    }

    /// Positives × negatives for the selected queries.
    pub fn triples(&self, include: &dyn Fn(&str) -> bool) -> Vec<TrainTriple> {
        let backend = self.scorer.backend();
        let mut out = Vec::new();
        for qd in self.queries.iter().filter(|q| include(&q.query_id)) {
            let comp = |id: &str| {
                self.scorer.components_at(
                    &qd.prepared,
                    backend.position(id).expect("checked at build"),
                )
            };
            let negs: Vec<(String, Components)> =
                qd.negatives.iter().map(|n| (n.clone(), comp(n))).collect();
            for p in &qd.positives {
                let pos = comp(p);
                for (n, neg) in &negs {
                    out.push(TrainTriple {
                        query_id: qd.query_id.clone(),
                        positive: p.clone(),
                        negative: n.clone(),
                        pos: pos.clone(),
                        neg: neg.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn run(
        &self,
        include: &dyn Fn(&str) -> bool,
        model: &ScoringModel,
        mode: RankMode,
        options: RankOptions,
        top_n: usize,
    ) -> RunRanking {
        let mut run = RunRanking::default();
        for qd in self.queries.iter().filter(|q| include(&q.query_id)) {
            let ranking = self.scorer.rank(&qd.prepared, model, mode, options);
            run.insert(qd.query_id.clone(), &ranking, top_n);
        }
        run
    }
}

/// How field scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Single-text scoring of the whole document.
    Concat,
    /// Equal field weights, no penalty, no training.
    Mean,
    #[default]
    Learned,
    LearnedNoPenalty,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "full-doc" => Ok(Aggregation::Concat),
            "mean" => Ok(Aggregation::Mean),
            "learned" => Ok(Aggregation::Learned),
            "learned-no-penalty" => Ok(Aggregation::LearnedNoPenalty),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Concat => "concat",
            Aggregation::Mean => "mean",
            Aggregation::Learned => "learned",
            Aggregation::LearnedNoPenalty => "learned-no-penalty",
        })
    }
}

/// The model an aggregation uses, training it when needed.
pub fn fit(
    aggregation: Aggregation,
    triples: &[TrainTriple],
    init: &ScoringModel,
    config: &TrainConfig,
) -> Result<(ScoringModel, Vec<f64>)> {
    match aggregation {
        Aggregation::Concat | Aggregation::Mean => Ok((ScoringModel::mean(), Vec::new())),
        Aggregation::Learned => {
            let out = train(init, triples, config)?;
            Ok((out.model, out.epoch_losses))
        }
        Aggregation::LearnedNoPenalty => {
            let cfg = TrainConfig {
                freeze_penalty: true,
                ..*config
            };
            let out = train(&init.without_penalty(), triples, &cfg)?;
            Ok((out.model, out.epoch_losses))
        }
    }
}

pub fn rank_mode(aggregation: Aggregation) -> RankMode {
    if aggregation == Aggregation::Concat {
        RankMode::FullDoc
    } else {
        RankMode::Mftr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub train: TrainConfig,
    pub init: [f64; 8],
    pub alpha: f64,
    pub rank: RankOptions,
    pub top_n: usize,
}

impl CvConfig {
    pub fn init_model(&self) -> ScoringModel {
        let mut m = ScoringModel {
            alpha: self.alpha,
            ..ScoringModel::default()
        };
        set_params(&mut m, &self.init);
        m
    }
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: DEFAULT_FOLDS,
            seed: DEFAULT_SEED,
            aggregation: Aggregation::default(),
            train: TrainConfig::default(),
            init: params_of(&ScoringModel::default()),
            alpha: crate::scorer::DEFAULT_ALPHA,
            rank: RankOptions::default(),
            top_n: crate::eval::DEFAULT_TOP_N,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub model: ScoringModel,
    pub epoch_losses: Vec<f64>,
    pub test_queries: Vec<String>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldResult>,
    pub run: RunRanking,
    pub report: EvalReport,
}

/// Trains on k−1 folds and ranks the held-out fold, for every fold. Each
/// query is ranked exactly once; pooled metrics average over all queries.
pub fn cross_validate(set: &TrainingSet<'_>, config: &CvConfig, ks: &[usize]) -> Result<CvOutcome> {
    let ids: Vec<String> = set.queries.iter().map(|q| q.query_id.clone()).collect();
    let assignment = kfold_split(&ids, config.folds, config.seed)?;
    let init = config.init_model();
    let mode = rank_mode(config.aggregation);
    let mut folds = Vec::with_capacity(config.folds);
    let mut pooled = RunRanking::default();
    for fold in 0..config.folds {
        let test: BTreeSet<&str> = assignment.members(fold);
        if !test.iter().any(|q| !set.qrels.relevant(q).is_empty()) {
            return Err(Error::Config(format!(
                "fold {fold} has no query with relevant tools"
            )));
        }
        let in_train = |q: &str| !test.contains(q);
        let triples = match config.aggregation {
            Aggregation::Learned | Aggregation::LearnedNoPenalty => set.triples(&in_train),
            _ => Vec::new(),
        };
        let train_cfg = TrainConfig {
            seed: config.train.seed.wrapping_add(fold as u64 * 1000),
            ..config.train
        };
        let (model, epoch_losses) = fit(config.aggregation, &triples, &init, &train_cfg)?;
        let run = set.run(
            &|q| test.contains(q),
            &model,
            mode,
            config.rank,
            config.top_n,
        );
        let report = evaluate_run(&run, set.qrels, ks)?;
        pooled.extend(run);
        folds.push(FoldResult {
            fold,
            model,
            epoch_losses,
            test_queries: test.iter().map(|q| q.to_string()).collect(),
            report,
        });
    }
    let report = evaluate_run(&pooled, set.qrels, ks)?;
    Ok(CvOutcome {
        assignment,
        folds,
        run: pooled,
        report,
    })
}
