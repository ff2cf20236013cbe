//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL ...` line
//! before asserting, so `cargo test --test acceptance -- --nocapture` gives a
//! readable summary.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use oracle_dis::data::{
    build_codeswitch, generate_synthetic, split_corpus, tokenize, BilingualDictionary, EmbeddingCorpus,
    SyntheticSpec,
};
use oracle_dis::eval::{evaluate_suite, retrieval_accuracy, spearman_rho, EvalReport};
use oracle_dis::losses::{
    compose_objective, gradient_suite, loss_inter_class, loss_intra_class, LossConfig, Pairing, Preset, Term,
};
use oracle_dis::model::{disentangle_forward, init_model, Checkpoint, DisentangledBatch, ModelParams};
use oracle_dis::numerics::{Activation, Matrix};
use oracle_dis::project::{parse_projection_csv, project_representations};
use oracle_dis::trainer::{fit, fit_with_validator, StopReason, TrainConfig, TrainReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

// Planted-corpus protocol shared by criteria 3, 4 and 9.

const PLANTED_LR: f64 = 1e-3;
const PLANTED_STEPS: usize = 3000;
const PLANTED_EVAL_EVERY: usize = 100;
const PLANTED_D: usize = 16;

struct PlantedRun {
    train: TrainReport,
    test: EvalReport,
    elapsed: Duration,
}

fn planted_splits() -> &'static (EmbeddingCorpus, EmbeddingCorpus, EmbeddingCorpus) {
    static SPLITS: OnceLock<(EmbeddingCorpus, EmbeddingCorpus, EmbeddingCorpus)> = OnceLock::new();
    SPLITS.get_or_init(|| {
        let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap();
        split_corpus(&corpus, [0.8, 0.1, 0.1], 0).unwrap()
    })
}

fn run_planted(objective: &LossConfig) -> PlantedRun {
    let (train, val, test) = planted_splits();
    assert_eq!((train.len(), val.len(), test.len()), (1600, 200, 200));
    let config = TrainConfig {
        learning_rate: PLANTED_LR,
        max_iterations: PLANTED_STEPS,
        eval_every: Some(PLANTED_EVAL_EVERY),
        ..Default::default()
    };
    let init = init_model(0, PLANTED_D, &[PLANTED_D], 2, Activation::Tanh).unwrap();
    let start = Instant::now();
    let (best, train_report) = fit(std::slice::from_ref(train), val, &config, objective, init).unwrap();
    let elapsed = start.elapsed();
    let test = evaluate_suite(test, None, &best).unwrap();
    PlantedRun {
        train: train_report,
        test,
        elapsed,
    }
}

type RunSlot = Arc<OnceLock<Arc<PlantedRun>>>;

/// Runs keyed by a label so criteria sharing a configuration train it once.
fn planted(label: &str, objective: LossConfig) -> Arc<PlantedRun> {
    static RUNS: OnceLock<Mutex<HashMap<String, RunSlot>>> = OnceLock::new();
    let slot = RUNS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(label.to_string())
        .or_default()
        .clone();
    slot.get_or_init(|| Arc::new(run_planted(&objective))).clone()
}

fn describe(label: &str, r: &PlantedRun) -> String {
    format!(
        "{label}: sem {:.3} lang {:.3} inter {:.3} ({} steps, {:.1}s)",
        r.test.semantic_acc_fwd,
        r.test.language_acc_fwd,
        r.test.mean_abs_inter_cos,
        r.train.iterations_run,
        r.elapsed.as_secs_f64()
    )
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut suites: Vec<(String, LossConfig)> =
        Term::ALL.iter().map(|&t| (format!("term {t}"), LossConfig::custom([t]))).collect();
    for p in Preset::NAMED {
        suites.push((format!("preset {p}"), LossConfig::preset(p)));
    }
    let mut worst = (0.0f64, String::new());
    let mut all_ok = true;
    for (label, cfg) in &suites {
        let r = gradient_suite(label, cfg, 20, 0, 1e-5).unwrap();
        assert!(r.instances >= 20, "{label}: only {} instances", r.instances);
        all_ok &= r.passed(1e-4);
        if r.max_relative_error > worst.0 {
            worst = (r.max_relative_error, label.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        all_ok && secs < 10.0,
        &format!(
            "{} suites x 20 instances, worst rel err {:.2e} ({}), {secs:.2}s",
            suites.len(),
            worst.0,
            worst.1
        ),
    );
}

fn parts_batch(s_m: &[&[f64]], s_l: &[&[f64]], t_m: &[&[f64]], t_l: &[&[f64]]) -> DisentangledBatch {
    let m = |rows: &[&[f64]]| Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let (s_m, s_l, t_m, t_l) = (m(s_m), m(s_l), m(t_m), m(t_l));
    let e_s = s_m.add(&s_l).unwrap();
    let e_t = t_m.add(&t_l).unwrap();
    DisentangledBatch::from_parts(s_m, s_l, t_m, t_l, e_s, e_t).unwrap()
}

#[test]
fn criterion_2_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_total = 0.0f64;
    let params = init_model(2, 4, &[4], 2, Activation::Tanh).unwrap();
    for _ in 0..20 {
        let n = rng.random_range(2..6);
        let e_s = Matrix::new(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let e_t = Matrix::new(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let batch = disentangle_forward(&params, &e_s, &e_t).unwrap();
        let labels: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
        let (bd, _) = compose_objective(&LossConfig::preset(Preset::Oracle), &params, &batch, &labels).unwrap();
        let ic = loss_intra_class(&batch, Pairing::Cyclic).unwrap().value;
        let is = loss_inter_class(&batch).unwrap().value;
        worst_total = worst_total.max((bd.total - (ic + is)).abs());
    }

    let same_lang = parts_batch(
        &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]],
        &[&[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0]],
        &[&[0.5, 0.5], &[1.0, 2.0], &[3.0, 0.0]],
        &[&[-1.0, 3.0], &[-1.0, 3.0], &[-1.0, 3.0]],
    );
    let ic_identical = loss_intra_class(&same_lang, Pairing::Cyclic).unwrap().value;
    let ic_identical_all = loss_intra_class(&same_lang, Pairing::AllPairs).unwrap().value;

    let orthogonal = parts_batch(
        &[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]],
        &[&[0.0, 3.0, 1.0], &[5.0, 0.0, -1.0]],
        &[&[0.0, 0.0, 1.0], &[1.0, 1.0, 0.0]],
        &[&[1.0, 0.0, 0.0], &[1.0, -1.0, 4.0]],
    );
    let is_orthogonal = loss_inter_class(&orthogonal).unwrap().value;

    let r = [&[0.3, -1.2, 0.7][..], &[2.0, 0.1, 0.4][..]];
    let coincide = parts_batch(&r, &r, &r, &r);
    let is_coincide = loss_inter_class(&coincide).unwrap().value;

    let ok = worst_total <= 1e-12
        && ic_identical.abs() <= 1e-12
        && ic_identical_all.abs() <= 1e-12
        && is_orthogonal.abs() <= 1e-12
        && (is_coincide - 2.0).abs() <= 1e-12;
    report(
        2,
        ok,
        &format!(
            "|oracle - (IC+IS)| max {worst_total:.1e}; IC identical {ic_identical:.1e}/{ic_identical_all:.1e}; \
             IS orthogonal {is_orthogonal:.1e}; IS coincident {is_coincide}"
        ),
    );
}

#[test]
fn criterion_3_planted_disentanglement() {
    let run = planted("meat+oracle", LossConfig::preset(Preset::MeatOracle));
    let t = &run.test;
    let ok = t.semantic_acc_fwd >= 0.95
        && t.language_acc_fwd <= 0.10
        && t.mean_abs_inter_cos <= 0.10
        && run.elapsed < Duration::from_secs(120);
    report(3, ok, &describe("meat+oracle", &run));
}

#[test]
fn criterion_4_oracle_beats_vanilla_on_language_retrieval() {
    let meat = planted("meat", LossConfig::preset(Preset::Meat));
    let meat_oracle = planted("meat+oracle", LossConfig::preset(Preset::MeatOracle));
    let dream = planted("dream", LossConfig::preset(Preset::Dream));
    let dream_oracle = planted("dream+oracle", LossConfig::preset(Preset::DreamOracle));
    let ok = meat_oracle.test.language_acc_fwd < meat.test.language_acc_fwd
        && dream_oracle.test.language_acc_fwd < dream.test.language_acc_fwd;
    report(
        4,
        ok,
        &format!(
            "language_acc meat {:.3} vs meat+oracle {:.3}; dream {:.3} vs dream+oracle {:.3}",
            meat.test.language_acc_fwd,
            meat_oracle.test.language_acc_fwd,
            dream.test.language_acc_fwd,
            dream_oracle.test.language_acc_fwd
        ),
    );
}

fn brute_force_retrieval(q: &Matrix, c: &Matrix) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for k in 0..a.len() {
            ab += a[k] * b[k];
            aa += a[k] * a[k];
            bb += b[k] * b[k];
        }
        ab / (aa.sqrt() * bb.sqrt())
    };
    (0..q.rows())
        .map(|i| {
            let mut best = 0;
            for j in 1..c.rows() {
                if cos(q.row(i), c.row(j)) > cos(q.row(i), c.row(best)) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
fn criterion_5_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut retrieval_mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        // Small integer entries make exact cosine ties common.
        let mut draw = || {
            let mut data: Vec<f64> = (0..n * d).map(|_| f64::from(rng.random_range(-2i32..=2))).collect();
            for r in 0..n {
                if data[r * d..(r + 1) * d].iter().all(|&v| v == 0.0) {
                    data[r * d] = 1.0;
                }
            }
            Matrix::new(n, d, data).unwrap()
        };
        let (q, c) = (draw(), draw());
        let (acc, result) = retrieval_accuracy(&q, &c).unwrap();
        let oracle = brute_force_retrieval(&q, &c);
        let oracle_acc = oracle.iter().enumerate().filter(|(i, j)| i == *j).count() as f64 / n as f64;
        if result.predicted != oracle || acc != oracle_acc {
            retrieval_mismatches += 1;
        }
    }

    let mut worst = 0.0f64;
    let mut evaluated = 0;
    while evaluated < 1000 {
        let n = rng.random_range(2..=40);
        let levels = rng.random_range(2..=6);
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0f64).round() / 2.0).collect();
        let oracle = naive_spearman(&x, &y);
        match spearman_rho(&x, &y) {
            Ok(rho) => {
                worst = worst.max((rho - oracle).abs());
                evaluated += 1;
            }
            Err(_) => assert!(oracle.is_nan(), "rho undefined but oracle gives {oracle}"),
        }
    }
    report(
        5,
        retrieval_mismatches == 0 && worst <= 1e-12,
        &format!("retrieval mismatches {retrieval_mismatches}/200; spearman max |diff| {worst:.1e} over 1000"),
    );
}

fn tiny_corpus(seed: u64, n: usize) -> EmbeddingCorpus {
    generate_synthetic(&SyntheticSpec {
        n_pairs: n,
        d: 6,
        semantic_dim: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn criterion_6_early_stopping_contract() {
    let corpus = tiny_corpus(6, 64);
    let init = init_model(6, 6, &[6], 2, Activation::Tanh).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        max_iterations: 500,
        patience: 10,
        eval_every: Some(3),
        ..Default::default()
    };
    let mut calls = 0usize;
    let (best, rep) = fit_with_validator(&[corpus], &config, &LossConfig::preset(Preset::MeatOracle), init.clone(), |_| {
        calls += 1;
        Ok(0.25)
    })
    .unwrap();
    let ok = best == init
        && rep.stop_reason == StopReason::EarlyStopped
        && calls == 1 + config.patience
        && rep.best_iteration == 0
        && rep.iterations_run == config.patience * 3;
    report(
        6,
        ok,
        &format!(
            "{calls} validations (iteration 0 + {} non-improving), stopped at iteration {}, returned iteration-{} params",
            calls.saturating_sub(1),
            rep.iterations_run,
            rep.best_iteration
        ),
    );
}

#[test]
fn criterion_7_codeswitch_guarantee() {
    let vocab: Vec<String> = (0..120).map(|i| format!("w{i}")).collect();
    let mut dict_text = String::new();
    for i in 0..50 {
        dict_text.push_str(&format!("w{i} x{i}\n"));
    }
    let parsed = BilingualDictionary::parse(&dict_text);
    assert_eq!(parsed.dictionary.len(), 50);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sentences: Vec<Vec<String>> = (0..500)
        .map(|_| {
            let len = rng.random_range(3..12);
            // About a fifth of the sentences use only words outside the dictionary.
            let lo = if rng.random_bool(0.2) { 50 } else { 0 };
            let line: Vec<&str> = (0..len).map(|_| vocab[rng.random_range(lo..120)].as_str()).collect();
            tokenize(&format!("{}.", line.join(" ")))
        })
        .collect();
    let uncovered = sentences
        .iter()
        .filter(|s| s.iter().all(|t| parsed.dictionary.lookup(oracle_dis::data::normalize_token(t)).is_none()))
        .count();

    let a = build_codeswitch(&sentences, &parsed.dictionary, 0.1, 11).unwrap();
    let b = build_codeswitch(&sentences, &parsed.dictionary, 0.1, 11).unwrap();
    let all_switched = a.records.iter().all(|r| !r.replaced_positions.is_empty());
    let identical = a.to_text().as_bytes() == b.to_text().as_bytes()
        && serde_json::to_vec(&a.report).unwrap() == serde_json::to_vec(&b.report).unwrap();
    let ok = all_switched
        && identical
        && a.report.excluded_sentences == uncovered
        && a.records.len() + uncovered == 500
        && uncovered > 0;
    report(
        7,
        ok,
        &format!(
            "{} records all switched: {all_switched}; excluded {} (uncovered {uncovered}); byte-identical rerun: {identical}",
            a.records.len(),
            a.report.excluded_sentences
        ),
    );
}

fn short_training(seed: u64) -> ModelParams {
    let corpus = tiny_corpus(8, 96);
    let (train, val, _) = split_corpus(&corpus, [0.7, 0.3, 0.0], 8).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        max_iterations: 60,
        eval_every: Some(10),
        seed,
        ..Default::default()
    };
    let init = init_model(seed, 6, &[6], 2, Activation::Tanh).unwrap();
    fit(&[train], &val, &config, &LossConfig::preset(Preset::MeatOracle), init).unwrap().0
}

#[test]
fn criterion_8_determinism_and_round_trips() {
    let objective = LossConfig::preset(Preset::MeatOracle);
    let a = Checkpoint::new(short_training(3), objective.clone()).to_json();
    let b = Checkpoint::new(short_training(3), objective.clone()).to_json();
    let ckpt_identical = a.as_bytes() == b.as_bytes();
    let ckpt_reloads = serde_json::from_str::<Checkpoint>(&a).unwrap().to_json() == a;

    let corpus = tiny_corpus(9, 50);
    let bytes = corpus.to_bytes().unwrap();
    let back = EmbeddingCorpus::from_bytes(&bytes).unwrap();
    let oemb_lossless = back == corpus
        && back
            .source
            .data()
            .iter()
            .chain(back.target.data())
            .all(|&v| f64::from(v as f32) == v)
        && back.to_bytes().unwrap() == bytes;

    let params = short_training(4);
    let batch = disentangle_forward(&params, &corpus.source, &corpus.target).unwrap();
    let projection = project_representations(&batch).unwrap();
    let parsed = parse_projection_csv(&projection.to_csv()).unwrap();
    let mut csv_err = 0.0f64;
    for (i, (x, y, label)) in parsed.iter().enumerate() {
        assert_eq!(label, &projection.group_labels[i]);
        let px = projection.coords.get(i, 0);
        let py = if projection.coords.cols() > 1 { projection.coords.get(i, 1) } else { 0.0 };
        csv_err = csv_err.max((x - px).abs()).max((y - py).abs());
    }
    let csv_ok = parsed.len() == 4 * corpus.len() && csv_err <= 1e-9;
    report(
        8,
        ckpt_identical && ckpt_reloads && oemb_lossless && csv_ok,
        &format!(
            "checkpoint byte-identical {ckpt_identical}, reload stable {ckpt_reloads}; OEMB lossless {oemb_lossless}; \
             projection CSV max err {csv_err:.1e}"
        ),
    );
}

fn weight_zero_isolates(term: Term) -> (bool, f64) {
    let params = init_model(9, 6, &[6], 2, Activation::Tanh).unwrap();
    let corpus = tiny_corpus(9, 12);
    let batch = disentangle_forward(&params, &corpus.source, &corpus.target).unwrap();
    let labels = corpus.labels(corpus.len());
    let full_cfg = LossConfig::preset(Preset::MeatOracle);
    let (full, full_grads) = compose_objective(&full_cfg, &params, &batch, &labels).unwrap();
    let (ablated, ablated_grads) =
        compose_objective(&full_cfg.clone().with_weight(term, 0.0), &params, &batch, &labels).unwrap();
    let (alone, alone_grads) = compose_objective(&LossConfig::custom([term]), &params, &batch, &labels).unwrap();

    let values_equal = full.values == ablated.values;
    let total_gap = (full.total - ablated.total - alone.total).abs();
    let mut grad_gap = 0.0f64;
    for ((f, a), o) in full_grads
        .to_flat()
        .iter()
        .zip(ablated_grads.to_flat())
        .zip(alone_grads.to_flat())
    {
        grad_gap = grad_gap.max((f - a - o).abs());
    }
    (values_equal && total_gap <= 1e-12, grad_gap)
}

#[test]
fn criterion_9_ablation_wiring_and_direction() {
    let (ic_values_ok, ic_grad_gap) = weight_zero_isolates(Term::IC);
    let (is_values_ok, is_grad_gap) = weight_zero_isolates(Term::IS);
    let wiring_ok = ic_values_ok && is_values_ok && ic_grad_gap <= 1e-12 && is_grad_gap <= 1e-12;

    let is_only = planted("is-only", LossConfig::preset(Preset::MeatOracle).with_weight(Term::IC, 0.0));
    let ic_only = planted("ic-only", LossConfig::preset(Preset::MeatOracle).with_weight(Term::IS, 0.0));
    let direction_ok = is_only.test.mean_abs_inter_cos < ic_only.test.mean_abs_inter_cos;
    report(
        9,
        wiring_ok && direction_ok,
        &format!(
            "weight-0 isolates IC {ic_values_ok} (grad gap {ic_grad_gap:.1e}), IS {is_values_ok} (grad gap {is_grad_gap:.1e}); \
             mean_abs_inter_cos IS-only {:.3} vs IC-only {:.3}",
            is_only.test.mean_abs_inter_cos, ic_only.test.mean_abs_inter_cos
        ),
    );
}
