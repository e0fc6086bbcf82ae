//! Test-side generators and oracles shared by the integration suites.
#![allow(dead_code)]

use std::path::PathBuf;

use cdrbench::baselines::{fit_mapper, rank_with_model, train_cmf, train_mf, MapperParams, MfParams, MlpMapper};
use cdrbench::corpus::Interaction;
use cdrbench::metrics::{mrr_at_k, RankingOutcome};
use cdrbench::sampler::{Candidate, EvalInstance, Positive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixtures() -> PathBuf {
    manifest_dir().join("tests/fixtures")
}

// ------------------------------------------------------------ planted MF

pub struct Planted {
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

fn planted_factors(n: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let z = Normal::new(0.0, scale).unwrap();
    (0..n).map(|_| (0..d).map(|_| z.sample(rng)).collect()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ratings `3 + u·v + N(0, sigma)` for a random subset of user-item cells,
/// shuffled and split 90/10.
fn observe(
    users: &[Vec<f64>],
    items: &[Vec<f64>],
    domain: &str,
    item_prefix: &str,
    density: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Planted {
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut all = Vec::new();
    for (u, pu) in users.iter().enumerate() {
        for (i, qi) in items.iter().enumerate() {
            if rng.gen::<f64>() < density {
                all.push(Interaction {
                    user_id: format!("u{u}"),
                    item_id: format!("{item_prefix}{i}"),
                    rating: 3.0 + dot(pu, qi) + noise.sample(rng),
                    timestamp: 0,
                    domain: domain.into(),
                });
            }
        }
    }
    all.shuffle(rng);
    let cut = all.len() / 10;
    let test = all.split_off(all.len() - cut);
    Planted { train: all, test }
}

pub const PLANTED_DIM: usize = 2;
pub const PLANTED_SIGMA: f64 = 0.1;

pub fn planted_params() -> MfParams {
    MfParams {
        dim: PLANTED_DIM,
        reg: 1e-3,
        lr: 0.02,
        epochs: 150,
        seed: 7,
    }
}

pub fn planted_single(seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = planted_factors(150, PLANTED_DIM, 0.8, &mut rng);
    let items = planted_factors(100, PLANTED_DIM, 0.8, &mut rng);
    observe(&users, &items, "T", "t", 0.4, PLANTED_SIGMA, &mut rng)
}

/// Two domains sharing one planted user matrix.
pub fn planted_pair(seed: u64) -> (Planted, Planted) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = planted_factors(150, PLANTED_DIM, 0.8, &mut rng);
    let s_items = planted_factors(100, PLANTED_DIM, 0.8, &mut rng);
    let t_items = planted_factors(100, PLANTED_DIM, 0.8, &mut rng);
    let s = observe(&users, &s_items, "S", "s", 0.3, PLANTED_SIGMA, &mut rng);
    let t = observe(&users, &t_items, "T", "t", 0.3, PLANTED_SIGMA, &mut rng);
    (s, t)
}

fn rmse_by(test: &[Interaction], f: impl Fn(&Interaction) -> f64) -> f64 {
    let se: f64 = test.iter().map(|x| (f(x) - x.rating).powi(2)).sum();
    (se / test.len() as f64).sqrt()
}

/// Held-out RMSE of target-only MF on the planted fixture, and its loss curve.
pub fn mf_planted_rmse() -> (f64, Vec<f64>) {
    let p = planted_single(11);
    let m = train_mf(&p.train, &planted_params()).unwrap();
    (rmse_by(&p.test, |x| m.raw_score(&x.user_id, &x.item_id).unwrap()), m.loss_curve)
}

/// Held-out target RMSE of CMF on the two-domain planted fixture.
pub fn cmf_planted_rmse() -> (f64, Vec<f64>) {
    let (s, t) = planted_pair(12);
    let m = train_cmf(&s.train, &t.train, &planted_params()).unwrap();
    (rmse_by(&t.test, |x| m.raw_score_target(&x.user_id, &x.item_id).unwrap()), m.loss_curve)
}

// ------------------------------------------------------------ planted map

pub const MAP_DIM: usize = 4;

pub fn mapper_params() -> MapperParams {
    MapperParams {
        hidden: 16,
        lr: 0.01,
        epochs: 400,
        seed: 3,
    }
}

/// Zero-noise pairs `(x, M x)`; `None` uses the identity.
pub fn planted_map_pairs(map: Option<&[Vec<f64>]>, n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = planted_factors(n, MAP_DIM, 0.3, &mut rng);
    xs.into_iter()
        .map(|x| {
            let y = match map {
                Some(m) => m.iter().map(|row| dot(row, &x)).collect(),
                None => x.clone(),
            };
            (x, y)
        })
        .collect()
}

pub fn random_map(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    planted_factors(MAP_DIM, MAP_DIM, 0.5, &mut rng)
}

/// Mean over pairs of the squared mapping error.
pub fn mapping_error(m: &MlpMapper, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    pairs.iter().map(|(x, y)| m.loss(x, y)).sum::<f64>() / pairs.len() as f64
}

/// `(planted linear map error, identity map error)` after training.
pub fn emcdr_map_errors() -> (f64, f64, Vec<f64>) {
    let m = random_map(21);
    let pairs = planted_map_pairs(Some(&m), 200, 22);
    let fitted = fit_mapper(&pairs, MAP_DIM, &mapper_params()).unwrap();
    let ident = planted_map_pairs(None, 200, 23);
    let fitted_id = fit_mapper(&ident, MAP_DIM, &mapper_params()).unwrap();
    (
        mapping_error(&fitted, &pairs),
        mapping_error(&fitted_id, &ident),
        fitted.loss_curve,
    )
}

// ------------------------------------------------------------ gradients

/// Max relative error between the analytic gradient and central differences
/// over every entry of every parameter tensor, keyed by tensor name.
pub fn gradient_check(eps: f64) -> Vec<(&'static str, f64)> {
    let mut m = MlpMapper::new(3, 5, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for p in m.params_mut() {
        for v in p.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = m.gradients(&x, &y);
    let analytic = [g.w1, g.b1, g.w2, g.b2];
    let names = ["w1", "b1", "w2", "b2"];
    let mut out = Vec::new();
    for (t, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..analytic[t].len() {
            let orig = m.params_mut()[t][k];
            m.params_mut()[t][k] = orig + eps;
            let up = m.loss(&x, &y);
            m.params_mut()[t][k] = orig - eps;
            let down = m.loss(&x, &y);
            m.params_mut()[t][k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[t][k];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-9 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(rel);
        }
        out.push((*name, worst));
    }
    out
}

/// Largest epoch-over-epoch increase of a loss curve.
pub fn max_increase(curve: &[f64]) -> f64 {
    curve.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
}

// ------------------------------------------------------------ random ranker

pub fn random_ranker_mrr(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<Candidate> = (0..21)
        .map(|i| Candidate {
            item_id: format!("c{i}"),
            title: format!("Item {i}"),
        })
        .collect();
    let outcomes: Vec<RankingOutcome> = (0..trials)
        .map(|_| {
            let pos = rng.gen_range(0..21);
            let inst = EvalInstance {
                pair_name: "P".into(),
                source_domain: "S".into(),
                target_domain: "T".into(),
                user_id: "u".into(),
                positive: Positive {
                    item_id: candidates[pos].item_id.clone(),
                    title: candidates[pos].title.clone(),
                    rating: 4.0,
                },
                source_history: vec![],
                target_history: vec![],
                negatives: candidates.iter().enumerate().filter(|(i, _)| *i != pos).map(|(_, c)| c.clone()).collect(),
                candidates: candidates.clone(),
                positive_index: pos,
                seed_trace: 0,
            };
            let scores: Vec<f64> = (0..21).map(|_| rng.gen()).collect();
            let scorer = |_: &str, item: &str| scores[item[1..].parse::<usize>().unwrap()];
            rank_with_model(&scorer, &inst)
        })
        .collect();
    mrr_at_k(&outcomes, 10).unwrap()
}

/// `Σ_{r=1..10} (1/r) / 21`.
pub fn random_ranker_expectation() -> f64 {
    (1..=10).map(|r| 1.0 / r as f64).sum::<f64>() / 21.0
}

// ------------------------------------------------------------ mock oracle

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use cdrbench::metrics::MetricsReport;
use cdrbench::promptgen::{Injection, PromptVariant, Task};
use cdrbench::runner::RunConfig;
use cdrbench::runner::{run_experiment, RunOutcome};
use cdrbench::sampler::read_eval_set;

pub fn load_config(name: &str, output_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&fixtures().join(name)).unwrap();
    cfg.output_dir = output_dir.to_path_buf();
    cfg
}

/// Run the mock over the committed eval set into `out`.
pub fn mock_run(out: &Path) -> RunOutcome {
    run_experiment(&load_config("mock_run.toml", out)).unwrap()
}

/// Metrics of every LLM cell of one pair, keyed by variant label.
pub fn llm_metrics(outcome: &RunOutcome, pair: &str) -> BTreeMap<String, MetricsReport> {
    outcome
        .table
        .rows
        .iter()
        .filter_map(|r| {
            let v = r.variant?;
            let m = r.cells.get(pair)?.metrics.clone()?;
            Some((v.to_string(), m))
        })
        .collect()
}

pub fn golden_mock_path() -> PathBuf {
    manifest_dir().join("tests/golden/mock_metrics.json")
}

fn words(title: &str) -> BTreeSet<String> {
    let cleaned: String = title
        .chars()
        .filter(|c| !matches!(c, '\'' | '\u{2018}' | '\u{2019}' | '`'))
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(|w| w.to_lowercase()).collect()
}

const DEFAULT_LABELS: [f64; 6] = [1.0, 1.8, 2.6, 3.4, 4.2, 5.0];

/// What the mock should score for each instance: `(y, y_hat)` for rating and
/// the positive's 1-based rank for ranking.
pub struct OracleInstance {
    pub y: f64,
    pub y_hat: f64,
    pub p_u: usize,
}

pub fn oracle_instance(inst: &EvalInstance, inj: Injection) -> OracleInstance {
    let target = match inj {
        Injection::With => &inst.target_history[..],
        Injection::No => &[],
    };
    let hist = if target.is_empty() { &inst.source_history[..] } else { target };
    let y_hat = if hist.is_empty() {
        DEFAULT_LABELS[3]
    } else {
        let m = hist.iter().map(|e| e.rating).sum::<f64>() / hist.len() as f64;
        // first minimum wins
        let mut best = DEFAULT_LABELS[0];
        for &v in &DEFAULT_LABELS[1..] {
            if (v - m).abs() < (best - m).abs() {
                best = v;
            }
        }
        best
    };
    let vocab: BTreeSet<String> = inst.source_history.iter().chain(target).flat_map(|e| words(&e.title)).collect();
    let mut order: Vec<(usize, &str)> = inst
        .candidates
        .iter()
        .map(|c| (words(&c.title).intersection(&vocab).count(), c.title.as_str()))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    let p_u = order.iter().position(|(_, t)| *t == inst.positive.title).unwrap() + 1;
    OracleInstance {
        y: inst.positive.rating,
        y_hat,
        p_u,
    }
}

/// Independent metric computation for one variant over the committed set.
pub fn oracle_metrics(v: PromptVariant) -> MetricsReport {
    let insts = read_eval_set(&fixtures().join("evalset_100.jsonl")).unwrap();
    let o: Vec<OracleInstance> = insts.iter().map(|i| oracle_instance(i, v.injection)).collect();
    let n = o.len() as f64;
    let mut m = MetricsReport {
        n_evaluated: o.len(),
        rmse: None,
        mae: None,
        mrr_at_10: None,
        ndcg_at_10: None,
        parse_failures: 0,
        parse_failure_rate: 0.0,
    };
    match v.task {
        Task::Rating => {
            m.rmse = Some((o.iter().map(|x| (x.y - x.y_hat).powi(2)).sum::<f64>() / n).sqrt());
            m.mae = Some(o.iter().map(|x| (x.y - x.y_hat).abs()).sum::<f64>() / n);
        }
        Task::Ranking => {
            let rr = |p: usize| if p <= 10 { 1.0 / p as f64 } else { 0.0 };
            let gain = |p: usize| if p <= 10 { 1.0 / ((p + 1) as f64).log2() } else { 0.0 };
            m.mrr_at_10 = Some(o.iter().map(|x| rr(x.p_u)).sum::<f64>() / n);
            m.ndcg_at_10 = Some(o.iter().map(|x| gain(x.p_u)).sum::<f64>() / n);
        }
    }
    m
}

// ------------------------------------------------------------ properties

use cdrbench::metrics::{mae, ndcg_at_k, rmse, RatingOutcome};
use cdrbench::respparse::{parse_ranking, LabelMap, LikelihoodLabel, DEFAULT_SIMILARITY_THRESHOLD};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const PROPERTY_CASES: u32 = 1000;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

pub fn prop_mae_le_rmse() -> Result<(), String> {
    let outcome = (0.5f64..=5.0, 0.5f64..=5.0).prop_map(|(y, y_hat)| RatingOutcome { y, y_hat });
    runner()
        .run(&prop::collection::vec(outcome, 1..60), |xs| {
            let (a, r) = (mae(&xs).unwrap(), rmse(&xs).unwrap());
            if a > r + 1e-12 {
                return Err(fail(format!("MAE {a} > RMSE {r}")));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_ranking_metrics_in_unit_interval() -> Result<(), String> {
    let outcome = (2usize..60).prop_flat_map(|k| (1..=k, Just(k))).prop_map(|(p_u, k_total)| RankingOutcome { p_u, k_total });
    runner()
        .run(&prop::collection::vec(outcome, 1..60), |xs| {
            for k in [1, 5, 10] {
                let (m, n) = (mrr_at_k(&xs, k).unwrap(), ndcg_at_k(&xs, k).unwrap());
                if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&n) {
                    return Err(fail(format!("k={k}: MRR {m}, NDCG {n}")));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_label_map_monotone() -> Result<(), String> {
    let gen = (prop::array::uniform6(0.5f64..=5.0), 0.0f64..=6.0, 0.0f64..=6.0);
    runner()
        .run(&gen, |(mut vals, r1, r2)| {
            vals.sort_by(f64::total_cmp);
            let increasing = vals.windows(2).all(|w| w[0] < w[1]);
            let map = LabelMap::new(vals);
            if map.is_ok() != increasing {
                return Err(fail(format!("{vals:?} accepted={}", map.is_ok())));
            }
            let Ok(map) = map else { return Ok(()) };
            let ratings: Vec<f64> = LikelihoodLabel::all().map(|l| map.rating(l)).collect();
            if ratings.windows(2).any(|w| w[0] >= w[1]) {
                return Err(fail(format!("ratings not increasing: {ratings:?}")));
            }
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            if map.nearest_label(lo).index() > map.nearest_label(hi).index() {
                return Err(fail(format!("nearest label not monotone at {lo}, {hi}")));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A model reply built from the real candidate titles of one instance:
/// reordered, partly omitted, duplicated, re-cased, with invented titles and
/// one of several list layouts. At least one candidate appears verbatim.
pub fn fuzz_reply(titles: &[String], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&String> = titles.iter().collect();
    order.shuffle(&mut rng);
    let keep = rng.gen_range(1..=order.len());
    let mut items: Vec<String> = Vec::new();
    for (n, t) in order[..keep].iter().enumerate() {
        let t = t.to_string();
        let item = if n == 0 {
            t
        } else {
            match rng.gen_range(0..6) {
                0 => t.to_uppercase(),
                1 => t.to_lowercase(),
                2 => t.replace([':', ',', '.', '\''], ""),
                _ => t,
            }
        };
        items.push(item.clone());
        if rng.gen_bool(0.05) {
            items.push(item);
        }
        if rng.gen_bool(0.1) {
            items.push(format!("Invented Title {}", rng.gen_range(0..1000)));
        }
    }
    match rng.gen_range(0..5) {
        0 => format!("[{}]", items.join(", ")),
        1 => format!("[{}]", items.iter().map(|t| format!("'{t}'")).collect::<Vec<_>>().join(", ")),
        2 => serde_json::to_string(&items).unwrap(),
        3 => items.iter().enumerate().map(|(i, t)| format!("{}. {t}\n", i + 1)).collect(),
        _ => format!("Here is the ranking:\n[{}]\nHope this helps.", items.join(", ")),
    }
}

pub fn prop_parse_ranking_full_permutation() -> Result<(), String> {
    let insts = read_eval_set(&fixtures().join("evalset_100.jsonl")).unwrap();
    let pools: Vec<Vec<String>> = insts.iter().map(|i| i.candidates.iter().map(|c| c.title.clone()).collect()).collect();
    runner()
        .run(&(0..pools.len(), any::<u64>()), |(which, seed)| {
            let titles = &pools[which];
            let reply = fuzz_reply(titles, seed);
            let parsed = parse_ranking(&reply, titles, DEFAULT_SIMILARITY_THRESHOLD)
                .map_err(|e| fail(format!("{e}: {reply}")))?;
            let mut seen = parsed.permutation.clone();
            seen.sort_unstable();
            if seen != (0..titles.len()).collect::<Vec<_>>() {
                return Err(fail(format!("not a permutation: {:?} from {reply}", parsed.permutation)));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}
