//! Acceptance suite: one pass/fail line per criterion.
//!
//! Plain binary (`harness = false`); exits non-zero if anything fails.
//! Extra arguments act as substring filters on criterion names.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mftr::corpus::{avg_tools_per_query, build_mixed, Dataset, Qrels, Query, RawTool};
use mftr::eval::{
    field_mask_ablation, ndcg_at_k, recall_at_k, AblationBackend, MaskTarget, RunRanking,
};
use mftr::pipeline::{
    stage_cv, Experiment, PipelineConfig, Variant, CV_DIR, FOLDS_FILE, MODEL_FILE, REPORT_JSON,
    REPORT_TXT, RUN_FILE,
};
use mftr::retrieval::{
    BackendKind, Bm25Params, EmbeddingStore, FieldId, HashingEmbedder, SparseIndex,
};
use mftr::rewriter::mock_rewrite;
use mftr::scorer::{Components, ParamMatch, RankMode, RankOptions, Scorer, ScoringModel};
use mftr::standardizer::mock_standardize;
use mftr::synthetic::{generate, PlantSpec, Synthetic};
use mftr::trainer::{
    cross_validate, gradients, train, triple_loss, Aggregation, CvConfig, TrainConfig, TrainTriple,
};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mock_experiment(synth: &Synthetic, variant: Variant) -> Experiment {
    let tools: Vec<_> = synth
        .dataset
        .tools
        .iter()
        .map(|t| mock_standardize(t).unwrap())
        .collect();
    let rewritten: Vec<_> = synth.dataset.queries.iter().map(mock_rewrite).collect();
    let embedder = HashingEmbedder::default();
    let mut store = EmbeddingStore::new("unused");
    Experiment::new(
        synth.dataset.clone(),
        Some(&tools),
        Some(&rewritten),
        variant,
        BackendKind::Sparse,
        &embedder,
        &mut store,
    )
    .unwrap()
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=20);
        let mut ranking: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        ranking.shuffle(&mut rng);
        let n_rel = rng.random_range(1..=5);
        // some relevant ids may be missing from the ranking
        let relevant: BTreeSet<String> = (0..n_rel)
            .map(|_| format!("d{}", rng.random_range(0..n + 3)))
            .collect();
        let rel_refs: BTreeSet<&str> = relevant.iter().map(String::as_str).collect();
        for k in [1, 3, 5, 10, 20, 100] {
            worst = worst
                .max(
                    (ndcg_at_k(&ranking, &rel_refs, k) - common::ndcg(&ranking, &relevant, k))
                        .abs(),
                )
                .max(
                    (recall_at_k(&ranking, &rel_refs, k) - common::recall(&ranking, &relevant, k))
                        .abs(),
                );
        }
    }
    ensure(
        worst <= 1e-9,
        format!("max |Δ| = {worst:.2e} over 100 instances"),
    )
}

fn bm25_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vocab = ["a", "b", "c", "d", "e"];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n_docs = rng.random_range(1..=10);
        let docs: Vec<Vec<String>> = (0..n_docs)
            .map(|_| {
                let len = rng.random_range(0..=8);
                (0..len)
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect()
            })
            .collect();
        let index = SparseIndex::build(
            docs.iter()
                .enumerate()
                .map(|(i, d)| (format!("doc{i:02}"), d.join(" "))),
            Bm25Params::default(),
        )
        .unwrap();
        let q_len = rng.random_range(1..=4);
        let query: Vec<String> = (0..q_len)
            .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
            .collect();
        for (i, d) in docs.iter().enumerate() {
            let got = index.score(&query, &format!("doc{i:02}")).unwrap();
            worst = worst.max((got - common::bm25(&query, d, &docs)).abs());
        }
    }
    ensure(
        worst <= 1e-9,
        format!("max |Δ| = {worst:.2e} over 100 corpora"),
    )
}

fn random_components(rng: &mut ChaCha8Rng, tau: f64) -> Components {
    let n = rng.random_range(0..=5);
    Components {
        fields: std::array::from_fn(|_| rng.random_range(0.0..1.5)),
        params: (0..n)
            .map(|_| ParamMatch {
                score: tau + rng.random_range(-0.3..0.3),
                required: rng.random_bool(0.5),
            })
            .collect(),
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> ScoringModel {
    ScoringModel {
        weights: std::array::from_fn(|_| rng.random_range(-0.5..2.0)),
        bias: rng.random_range(-1.0..1.0),
        tau: rng.random_range(0.0..2.0),
        w_required: rng.random_range(0.0..2.0),
        w_optional: rng.random_range(0.0..1.0),
        alpha: 15.0,
    }
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_rel, mut worst_abs, mut largest): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut bias_nonzero = 0;
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let t = TrainTriple {
            query_id: "q".into(),
            positive: "p".into(),
            negative: "n".into(),
            pos: random_components(&mut rng, model.tau),
            neg: random_components(&mut rng, model.tau),
        };
        let g = gradients(&t, &model);
        if g.bias != 0.0 {
            bias_nonzero += 1;
        }
        let analytic = [
            g.weights[0],
            g.weights[1],
            g.weights[2],
            g.weights[3],
            g.tau,
            g.w_required,
            g.w_optional,
        ];
        let h = 1e-6;
        for (j, a) in analytic.iter().enumerate() {
            let loss_at = |delta: f64| {
                let mut m = model;
                match j {
                    0..=3 => m.weights[j] += delta,
                    4 => m.tau += delta,
                    5 => m.w_required += delta,
                    _ => m.w_optional += delta,
                }
                triple_loss(&t, &m)
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let diff = (a - numeric).abs();
            worst_abs = worst_abs.max(diff);
            largest = largest.max(a.abs());
            if diff > 1e-8 {
                worst_rel = worst_rel.max(diff / a.abs().max(numeric.abs()));
            }
        }
    }
    ensure(
        worst_rel <= 1e-4 && bias_nonzero == 0,
        format!(
            "max |Δ| {worst_abs:.2e} (largest |∂| {largest:.3}), worst relative error above the 1e-8 floor {worst_rel:.2e}; ∂loss/∂b ≠ 0 in {bias_nonzero} cases"
        ),
    )
}

fn ranking_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    let mut queries = 0;
    let synth = generate(&PlantSpec {
        corpus_size: 50,
        num_queries: 20,
        decoy_fraction: 0.3,
        seed: 100,
        ..PlantSpec::default()
    })
    .unwrap();
    let exp = mock_experiment(&synth, Variant::mftr());
    let scorer = Scorer::new(&exp.backend, &exp.tools).unwrap();
    for (q, rq) in synth.dataset.queries.iter().zip(&exp.rewritten) {
        let model = random_model(&mut rng);
        let prepared = scorer.prepare(rq, &q.text).unwrap();
        let got = scorer.rank(&prepared, &model, RankMode::Mftr, RankOptions::default());
        let want = common::rank_oracle(&exp.tools, rq, &model);
        let got_ids: Vec<&str> = got.iter().map(|s| s.tool_id.as_str()).collect();
        let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
        if got_ids != want_ids {
            mismatches += 1;
        }
        for (g, (_, w)) in got.iter().zip(&want) {
            worst = worst.max((g.score - w).abs());
        }
        queries += 1;
    }
    ensure(
        mismatches == 0 && queries == 20,
        format!("{mismatches}/{queries} orderings differ; max score |Δ| = {worst:.2e}"),
    )
}

fn planted_signal() -> Check {
    let synth = generate(&PlantSpec::default()).unwrap();
    let cv = mock_experiment(&synth, Variant::mftr())
        .cross_validate(&CvConfig::default(), 64, &[10])
        .unwrap();
    let full = mock_experiment(&synth, Variant::full_doc())
        .cross_validate(
            &CvConfig {
                aggregation: Aggregation::Concat,
                ..CvConfig::default()
            },
            64,
            &[10],
        )
        .unwrap();
    let (m, f) = (cv.report.ndcg(10), full.report.ndcg(10));
    let mut w = [0.0; 4];
    for fold in &cv.folds {
        for (acc, x) in w.iter_mut().zip(fold.model.normalized_weights()) {
            *acc += x / cv.folds.len() as f64;
        }
    }
    let desc_largest = (1..4).all(|i| w[0] > w[i]);
    ensure(
        m >= 0.9 && m - f >= 0.05 && desc_largest,
        format!(
            "MFTR N@10 {m:.4}, full-doc {f:.4}, gap {:.4}; mean normalized weights desc {:.3} params {:.3} resp {:.3} examples {:.3}",
            m - f,
            w[0],
            w[1],
            w[2],
            w[3]
        ),
    )
}

fn twin_rate(run: &RunRanking, synth: &Synthetic) -> f64 {
    let wins = synth
        .decoys
        .iter()
        .filter(|(q, pair)| {
            let ids = run.ids(q);
            let pos = |t: &str| ids.iter().position(|x| *x == t).unwrap_or(usize::MAX);
            pos(&pair.twin) < pos(&pair.decoy)
        })
        .count();
    wins as f64 / synth.decoys.len() as f64
}

fn penalty_efficacy() -> Check {
    let synth = generate(&PlantSpec {
        decoy_fraction: 0.3,
        ..PlantSpec::default()
    })
    .unwrap();
    let exp = mock_experiment(&synth, Variant::mftr());
    let scorer = exp.scorer().unwrap();
    let set = exp.training_set(&scorer, 64).unwrap();
    let config = CvConfig::default();
    let out = cross_validate(&set, &config, &[10]).unwrap();
    let trained = twin_rate(&out.run, &synth);
    let mut zeroed_run = RunRanking::default();
    for fold in &out.folds {
        let model = ScoringModel {
            w_required: 0.0,
            ..fold.model
        };
        let test: BTreeSet<&str> = fold.test_queries.iter().map(String::as_str).collect();
        zeroed_run.extend(set.run(
            &|q| test.contains(q),
            &model,
            RankMode::Mftr,
            config.rank,
            config.top_n,
        ));
    }
    let zeroed = twin_rate(&zeroed_run, &synth);
    ensure(
        trained >= 0.95 && zeroed < 0.8,
        format!(
            "twin above decoy for {:.1}% of {} decoy queries; with w_req = 0: {:.1}%",
            100.0 * trained,
            synth.decoys.len(),
            100.0 * zeroed
        ),
    )
}

fn loss_behavior() -> Check {
    let synth = generate(&PlantSpec::default()).unwrap();
    let exp = mock_experiment(&synth, Variant::mftr());
    let scorer = exp.scorer().unwrap();
    let set = exp.training_set(&scorer, 64).unwrap();
    let triples = set.triples(&|_| true);
    let config = TrainConfig::default();
    let out = train(&CvConfig::default().init_model(), &triples, &config).unwrap();
    let losses = &out.epoch_losses;
    let (first, last) = (losses[0], *losses.last().unwrap());
    ensure(
        losses.len() == 5 && config.batch == 256 && last < std::f64::consts::LN_2 && last < first,
        format!(
            "{} triples, {} epochs, batch {}, lr {}: first {first:.5}, final {last:.2e}",
            triples.len(),
            losses.len(),
            config.batch,
            config.lr
        ),
    )
}

fn protocol_structure() -> Check {
    let mut problems = Vec::new();
    let mut lists = 0;
    for spec in [
        PlantSpec::default(),
        PlantSpec {
            corpus_size: 40,
            num_queries: 12,
            decoy_fraction: 0.25,
            seed: 3,
            ..PlantSpec::default()
        },
    ] {
        let synth = generate(&spec).unwrap();
        let exp = mock_experiment(&synth, Variant::mftr());
        let scorer = exp.scorer().unwrap();
        let set = exp.training_set(&scorer, 64).unwrap();
        let out = cross_validate(&set, &CvConfig::default(), &[10]).unwrap();
        let sizes = out.assignment.sizes();
        if sizes.len() != 5 || sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
            problems.push(format!("fold sizes {sizes:?}"));
        }
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for fold in &out.folds {
            for q in &fold.test_queries {
                *seen.entry(q).or_default() += 1;
            }
        }
        let all: BTreeSet<&str> = synth
            .dataset
            .queries
            .iter()
            .map(|q| q.id.as_str())
            .collect();
        let pooled: BTreeSet<&str> = out.run.queries.keys().map(String::as_str).collect();
        if seen.keys().copied().collect::<BTreeSet<_>>() != all
            || seen.values().any(|&c| c != 1)
            || pooled != all
        {
            problems.push("a query was not evaluated exactly once".into());
        }
        for qd in &set.queries {
            let relevant = synth.dataset.qrels.relevant(&qd.query_id);
            let expected = 64.min(exp.tools.len() - relevant.len());
            let unique: BTreeSet<&String> = qd.negatives.iter().collect();
            if qd.negatives.len() != expected
                || unique.len() != expected
                || qd.negatives.iter().any(|n| relevant.contains(n.as_str()))
            {
                problems.push(format!("negatives of {}", qd.query_id));
            }
            lists += 1;
        }
    }
    if problems.is_empty() {
        Ok(format!(
            "partitions balanced, each query evaluated once; {lists} negative lists pure and sized min(64, non-relevant)"
        ))
    } else {
        Err(problems.join("; "))
    }
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let synth = generate(&PlantSpec {
        corpus_size: 60,
        num_queries: 20,
        decoy_fraction: 0.2,
        ..PlantSpec::default()
    })
    .unwrap();
    let data = tmp.path().join("data");
    synth.dataset.save(&data).unwrap();
    let run = |name: &str| {
        let config = PipelineConfig {
            dataset: data.clone(),
            work_dir: tmp.path().join(name),
            mock_llm: true,
            ..PipelineConfig::default()
        };
        stage_cv(&config).unwrap();
        config.path(CV_DIR)
    };
    let (a, b) = (run("a"), run("b"));
    let mut files: Vec<String> = [RUN_FILE, REPORT_JSON, REPORT_TXT, FOLDS_FILE]
        .map(String::from)
        .to_vec();
    files.extend((0..5).map(|k| format!("fold_{k}/{MODEL_FILE}")));
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .collect();
    ensure(
        differing.is_empty(),
        format!(
            "{} artifacts compared across two work dirs, differing: {differing:?}",
            files.len()
        ),
    )
}

fn ablation_sanity() -> Check {
    let synth = generate(&PlantSpec::default()).unwrap();
    let noise = MaskTarget::Field(FieldId::Response);
    let signal = MaskTarget::Field(FieldId::Description);
    let ks = [5, 10, 100];
    let report = field_mask_ablation(
        &synth.tools,
        &synth.dataset.queries,
        &synth.dataset.qrels,
        AblationBackend::Sparse(Bm25Params::default()),
        &[BTreeSet::from([noise]), BTreeSet::from([signal])],
        &ks,
    )
    .unwrap();
    let d_noise: Vec<f64> = ks
        .iter()
        .map(|&k| report.delta(&[noise], k).unwrap())
        .collect();
    let d_signal: Vec<f64> = ks
        .iter()
        .map(|&k| report.delta(&[signal], k).unwrap())
        .collect();
    ensure(
        d_noise.iter().all(|&d| d >= 0.0) && d_signal.iter().all(|&d| d <= -20.0),
        format!("Δ% at K={ks:?}: noise field (response) {d_noise:.2?}, signal field (description) {d_signal:.2?}"),
    )
}

/// Fixture with the given counts. Every query gets at least one relevant
/// tool; the rest are spread at random.
fn table_fixture(name: &str, queries: usize, tools: usize, pairs: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![1usize; queries];
    for _ in queries..pairs {
        counts[rng.random_range(0..queries)] += 1;
    }
    let mut qrels = Qrels::new();
    for (i, &c) in counts.iter().enumerate() {
        let start = rng.random_range(0..tools);
        for j in 0..c {
            qrels.insert(format!("q{i}"), format!("t{}", (start + j) % tools), 1);
        }
    }
    Dataset {
        name: name.into(),
        tools: (0..tools)
            .map(|i| RawTool {
                id: format!("t{i}"),
                source_tag: name.into(),
                doc: json!({"description": format!("{name} tool {i}")}),
            })
            .collect(),
        queries: (0..queries)
            .map(|i| Query::new(format!("q{i}"), format!("{name} request {i}")))
            .collect(),
        qrels,
    }
}

fn mixed_bookkeeping() -> Check {
    // name, queries, tools, relevant tools per query
    let table = [
        ("toolbench", 1099, 14059, 2.39),
        ("apigen", 1000, 3605, 1.33),
        ("apibank", 101, 101, 1.70),
        ("gorilla", 500, 907, 1.00),
        ("toolink", 497, 1804, 2.06),
    ];
    let fixtures: Vec<Dataset> = table
        .iter()
        .zip(0u64..)
        .map(|(&(name, q, t, tpq), seed)| {
            table_fixture(name, q, t, (q as f64 * tpq).round() as usize, seed)
        })
        .collect();
    for (ds, &(_, _, _, tpq)) in fixtures.iter().zip(&table) {
        let got = avg_tools_per_query(ds).unwrap();
        if (got - tpq).abs() > 0.005 {
            return Err(format!(
                "fixture {} has {got:.4} tools per query, wanted {tpq}",
                ds.name
            ));
        }
    }
    let mixed = build_mixed(&fixtures).unwrap();
    let tpq = avg_tools_per_query(&mixed).unwrap();
    ensure(
        mixed.tools.len() == 20476 && mixed.queries.len() == 3197 && (tpq - 1.77).abs() <= 0.005,
        format!(
            "{} tools, {} queries, {tpq:.4} tools per query",
            mixed.tools.len(),
            mixed.queries.len()
        ),
    )
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria: [(&str, Option<Duration>, fn() -> Check); 11] = [
        ("metric oracle equivalence", secs(5), metric_oracle),
        ("BM25 oracle equivalence", secs(5), bm25_oracle),
        ("gradient check", secs(10), gradient_check),
        ("ranking-oracle equivalence", secs(30), ranking_oracle),
        ("planted-signal learning", secs(120), planted_signal),
        ("penalty efficacy", secs(120), penalty_efficacy),
        ("loss behavior", None, loss_behavior),
        ("protocol structure", None, protocol_structure),
        ("end-to-end determinism", None, determinism),
        ("ablation harness sanity", None, ablation_sanity),
        ("mixed-benchmark bookkeeping", None, mixed_bookkeeping),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(d), Some(l)) if elapsed > *l => {
                Err(format!("{d}; over the {}s budget", l.as_secs()))
            }
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} {tag} {name}: {detail} [{:.2}s]",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
