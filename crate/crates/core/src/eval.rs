//! Retrieval accuracy, STS correlation and leakage diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingCorpus;
use crate::error::{Error, Result};
use crate::model::{disentangle_forward, DisentangledBatch, ModelParams};
use crate::numerics::{cosine_value, dot, norm, Matrix, NORM_FLOOR};

/// Pairs above this size use cyclic rather than all-pairs intra-language cosine.
pub const INTRA_ALL_PAIRS_MAX: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub predicted: Vec<usize>,
    pub correct: Vec<bool>,
}

fn row_norms(m: &Matrix, context: &str) -> Result<Vec<f64>> {
    let norms: Vec<f64> = m.row_iter().map(norm).collect();
    let bad: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n.is_nan() || n < NORM_FLOOR)
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        Ok(norms)
    } else {
        Err(Error::DegenerateRows {
            context: context.to_string(),
            indices: bad,
        })
    }
}

/// For each query row, the candidate with the highest cosine similarity
/// (lowest index on ties). Row `i` of the candidates is the correct match.
pub fn retrieval_accuracy(queries: &Matrix, candidates: &Matrix) -> Result<(f64, RetrievalResult)> {
    if queries.shape() != candidates.shape() {
        return Err(Error::dim("retrieval", queries.shape_str(), candidates.shape_str()));
    }
    if queries.rows() == 0 {
        return Err(Error::InvalidBatch("retrieval needs at least one query".into()));
    }
    let qn = row_norms(queries, "retrieval queries")?;
    let cn = row_norms(candidates, "retrieval candidates")?;
    let mut predicted = Vec::with_capacity(queries.rows());
    for (q, &nq) in queries.row_iter().zip(&qn) {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, (c, &nc)) in candidates.row_iter().zip(&cn).enumerate() {
            let score = dot(q, c) / (nq * nc);
            if score > best_score {
                best = j;
                best_score = score;
            }
        }
        predicted.push(best);
    }
    let correct: Vec<bool> = predicted.iter().enumerate().map(|(i, &p)| p == i).collect();
    let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok((acc, RetrievalResult { predicted, correct }))
}

/// 1-based ranks, ties sharing the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // Ranks start+1 ..= end, averaged.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman's rank correlation: Pearson correlation of average-tie ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("spearman", format!("{} values", x.len()), format!("{} values", y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: "spearman input".into(),
        });
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|&a| a == v[0]) {
            return Err(Error::UndefinedCorrelation(format!("{name} is constant")));
        }
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Semantic,
    Language,
    Original,
}

fn pick(batch: &DisentangledBatch, repr: Representation) -> (&Matrix, &Matrix) {
    match repr {
        Representation::Semantic => (&batch.s_m, &batch.t_m),
        Representation::Language => (&batch.s_l, &batch.t_l),
        Representation::Original => (&batch.e_s, &batch.e_t),
    }
}

fn sts_rho(corpus: &EmbeddingCorpus, batch: &DisentangledBatch, repr: Representation) -> Result<f64> {
    let gold = corpus
        .gold_scores
        .as_ref()
        .ok_or_else(|| Error::Config("STS evaluation needs a corpus with gold scores".into()))?;
    let (a, b) = pick(batch, repr);
    let sims = a
        .row_iter()
        .zip(b.row_iter())
        .map(|(x, y)| cosine_value(x, y))
        .collect::<Result<Vec<_>>>()?;
    spearman_rho(&sims, gold)
}

/// Spearman's ρ between per-pair cosine similarities of the chosen
/// representation and the gold scores.
pub fn sts_eval(corpus: &EmbeddingCorpus, params: &ModelParams, repr: Representation) -> Result<f64> {
    let batch = disentangle_forward(params, &corpus.source, &corpus.target)?;
    sts_rho(corpus, &batch, repr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Mean of `|cos(m, l)|` over source and target rows together.
    pub mean_abs_inter_cos: f64,
    pub intra_lang_mean_cos_src: f64,
    pub intra_lang_mean_cos_tgt: f64,
}

fn intra_mean_cos(x: &Matrix) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Ok(1.0);
    }
    let pairs = if n <= INTRA_ALL_PAIRS_MAX {
        crate::losses::Pairing::AllPairs.pairs(n)
    } else {
        crate::losses::Pairing::Cyclic.pairs(n)
    };
    let mut total = 0.0;
    for &(i, j) in &pairs {
        total += cosine_value(x.row(i), x.row(j))?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn leakage_report(batch: &DisentangledBatch) -> Result<LeakageReport> {
    row_norms(&batch.s_m, "source semantic rows")?;
    row_norms(&batch.s_l, "source language rows")?;
    row_norms(&batch.t_m, "target semantic rows")?;
    row_norms(&batch.t_l, "target language rows")?;
    let n = batch.len();
    let mut inter = 0.0;
    for i in 0..n {
        inter += cosine_value(batch.s_m.row(i), batch.s_l.row(i))?.abs();
    }
    for i in 0..n {
        inter += cosine_value(batch.t_m.row(i), batch.t_l.row(i))?.abs();
    }
    Ok(LeakageReport {
        mean_abs_inter_cos: if n == 0 { 0.0 } else { inter / (2 * n) as f64 },
        intra_lang_mean_cos_src: intra_mean_cos(&batch.s_l)?,
        intra_lang_mean_cos_tgt: intra_mean_cos(&batch.t_l)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    /// Source rows as queries.
    pub semantic_acc_fwd: f64,
    /// Target rows as queries.
    pub semantic_acc_bwd: f64,
    pub language_acc_fwd: f64,
    pub language_acc_bwd: f64,
    pub original_acc_fwd: f64,
    pub original_acc_bwd: f64,
    pub sts_rho_semantic: Option<f64>,
    pub sts_rho_language: Option<f64>,
    pub mean_abs_inter_cos: f64,
    pub intra_lang_mean_cos_src: f64,
    pub intra_lang_mean_cos_tgt: f64,
}

fn both_directions(a: &Matrix, b: &Matrix) -> Result<(f64, f64)> {
    Ok((retrieval_accuracy(a, b)?.0, retrieval_accuracy(b, a)?.0))
}

pub fn evaluate_suite(
    test: &EmbeddingCorpus,
    sts: Option<&EmbeddingCorpus>,
    params: &ModelParams,
) -> Result<EvalReport> {
    let batch = disentangle_forward(params, &test.source, &test.target)?;
    let (semantic_acc_fwd, semantic_acc_bwd) = both_directions(&batch.s_m, &batch.t_m)?;
    let (language_acc_fwd, language_acc_bwd) = both_directions(&batch.s_l, &batch.t_l)?;
    let (original_acc_fwd, original_acc_bwd) = both_directions(&batch.e_s, &batch.e_t)?;
    let leak = leakage_report(&batch)?;
    let (sts_rho_semantic, sts_rho_language) = match sts {
        Some(corpus) => {
            let b = disentangle_forward(params, &corpus.source, &corpus.target)?;
            (
                Some(sts_rho(corpus, &b, Representation::Semantic)?),
                Some(sts_rho(corpus, &b, Representation::Language)?),
            )
        }
        None => (None, None),
    };
    Ok(EvalReport {
        pairs: test.len(),
        semantic_acc_fwd,
        semantic_acc_bwd,
        language_acc_fwd,
        language_acc_bwd,
        original_acc_fwd,
        original_acc_bwd,
        sts_rho_semantic,
        sts_rho_language,
        mean_abs_inter_cos: leak.mean_abs_inter_cos,
        intra_lang_mean_cos_src: leak.intra_lang_mean_cos_src,
        intra_lang_mean_cos_tgt: leak.intra_lang_mean_cos_tgt,
    })
}

impl EvalReport {
    /// Fixed-width table with semantic scores (higher is better) beside
    /// language scores (lower is better). Accuracies are percentages.
    pub fn table(&self, src: &str, tgt: &str) -> String {
        let fwd = format!("{src}-{tgt}");
        let bwd = format!("{tgt}-{src}");
        let rho = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<14}{:>16}{:>16}", "", "Semantic (↑)", "Language (↓)");
        let _ = writeln!(
            out,
            "{:<14}{:>16.2}{:>16.2}",
            fwd,
            100.0 * self.semantic_acc_fwd,
            100.0 * self.language_acc_fwd
        );
        let _ = writeln!(
            out,
            "{:<14}{:>16.2}{:>16.2}",
            bwd,
            100.0 * self.semantic_acc_bwd,
            100.0 * self.language_acc_bwd
        );
        let _ = writeln!(
            out,
            "{:<14}{:>16}{:>16}",
            "STS rho",
            rho(self.sts_rho_semantic),
            rho(self.sts_rho_language)
        );
        let _ = writeln!(
            out,
            "original retrieval {fwd} {:.2}  {bwd} {:.2}",
            100.0 * self.original_acc_fwd,
            100.0 * self.original_acc_bwd
        );
        let _ = writeln!(
            out,
            "mean |cos(m, l)| {:.4}  intra-language cos {src} {:.4}  {tgt} {:.4}  ({} pairs)",
            self.mean_abs_inter_cos, self.intra_lang_mean_cos_src, self.intra_lang_mean_cos_tgt, self.pairs
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn retrieval_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = gaussian(&mut rng, 10, 4);
        assert_eq!(retrieval_accuracy(&q, &q).unwrap().0, 1.0);
        let shifted = q.select_rows(&(0..10).map(|i| (i + 1) % 10).collect::<Vec<_>>());
        assert_eq!(retrieval_accuracy(&q, &shifted).unwrap().0, 0.0);
    }

    #[test]
    fn retrieval_ties_go_to_lowest_index() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let (acc, res) = retrieval_accuracy(&q, &c).unwrap();
        assert_eq!(res.predicted, [0, 0]);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn retrieval_reports_degenerate_rows() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        match retrieval_accuracy(&q, &q) {
            Err(Error::DegenerateRows { indices, .. }) => assert_eq!(indices, [1, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), [1.0, 2.5, 2.5, 4.0]);
        // Ranks [1, 2.5, 2.5, 4] against [1, 2, 3, 4].
        let rho = spearman_rho(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 4.5 / (4.5f64.sqrt() * 5f64.sqrt())).abs() < 1e-15);
        assert!(matches!(
            spearman_rho(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
        assert!((spearman_rho(&[0.0, 1.0], &[3.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn leakage_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = Matrix::from_rows(&[vec![0.0, 2.0], vec![-3.0, 0.0]]).unwrap();
        let b = DisentangledBatch::from_parts(m.clone(), l.clone(), m.clone(), l, m.clone(), m.clone()).unwrap();
        assert_eq!(leakage_report(&b).unwrap().mean_abs_inter_cos, 0.0);

        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let m3 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = DisentangledBatch::from_parts(m3.clone(), same.clone(), m3.clone(), same, m3.clone(), m3).unwrap();
        let r = leakage_report(&b).unwrap();
        assert!((r.intra_lang_mean_cos_src - 1.0).abs() < 1e-15);
        assert!((r.intra_lang_mean_cos_tgt - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_batch_inter_cos_matches_sampling_oracle() {
        let d = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400;
        let parts: Vec<Matrix> = (0..4).map(|_| gaussian(&mut rng, n, d)).collect();
        let b = DisentangledBatch::from_parts(
            parts[0].clone(),
            parts[1].clone(),
            parts[2].clone(),
            parts[3].clone(),
            parts[0].clone(),
            parts[2].clone(),
        )
        .unwrap();
        let got = leakage_report(&b).unwrap().mean_abs_inter_cos;

        let samples: Vec<f64> = (0..20000)
            .map(|_| {
                let a = gaussian(&mut rng, 1, d);
                let c = gaussian(&mut rng, 1, d);
                cosine_value(a.row(0), c.row(0)).unwrap().abs()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        // Standard error of the 2n-row estimate dominates the oracle's.
        let se = (var / (2 * n) as f64 + var / samples.len() as f64).sqrt();
        assert!((got - mean).abs() <= 3.0 * se, "got {got}, oracle {mean} ± {se}");
    }

    #[test]
    fn sts_on_planted_monotone_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = gaussian(&mut rng, 30, 4);
        let t = gaussian(&mut rng, 30, 4);
        let gold: Vec<f64> = (0..30)
            .map(|i| 2.5 * (1.0 + cosine_value(s.row(i), t.row(i)).unwrap()))
            .collect();
        let corpus = EmbeddingCorpus::new(0, 1, s, t, Some(gold)).unwrap();
        let params = crate::model::init_model(0, 4, &[4], 2, crate::numerics::Activation::Tanh).unwrap();
        let rho = sts_eval(&corpus, &params, Representation::Original).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        let no_gold = EmbeddingCorpus { gold_scores: None, ..corpus };
        assert!(sts_eval(&no_gold, &params, Representation::Original).is_err());
    }

    #[test]
    fn identity_model_reproduces_raw_retrieval_and_table_renders() {
        let corpus = crate::data::generate_synthetic(&crate::data::SyntheticSpec {
            n_pairs: 100,
            ..Default::default()
        })
        .unwrap();
        let mut params = crate::model::init_model(0, 16, &[], 2, crate::numerics::Activation::Tanh).unwrap();
        params.mlp_m.layers[0].weight = Matrix::identity(16);
        params.mlp_l.layers[0].weight = Matrix::identity(16).scale(0.5);
        let r = evaluate_suite(&corpus, None, &params).unwrap();
        assert_eq!(r.semantic_acc_fwd, r.original_acc_fwd);
        assert_eq!(r.semantic_acc_bwd, r.original_acc_bwd);
        assert_eq!(evaluate_suite(&corpus, None, &params).unwrap(), r);
        let table = r.table("en", "de");
        assert!(table.contains("Semantic (↑)") && table.contains("en-de") && table.contains("de-en"));
    }
}
