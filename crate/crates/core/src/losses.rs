//! Loss terms and their composition into training objectives.
//!
//! Every term returns its value together with gradients w.r.t. the batch
//! outputs ([`OutputGrads`]); [`compose_objective`] weights and sums the
//! enabled terms and chains the result through [`model_backward`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{classify, model_backward, ClassifierHead, DisentangledBatch, ModelParams, OutputGrads};
use crate::numerics::{cosine_sim, mse, softmax_cross_entropy, GradPair, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    /// Reconstruction from a row's own semantic + language parts.
    R,
    /// Cross-reconstruction using the partner row's semantic part.
    CR,
    /// Semantic alignment between parallel rows.
    S,
    /// Language-embedding spread around its per-side centroid.
    Lm,
    /// Language classification of language embeddings.
    Li,
    /// Adversarial language classification of semantic embeddings.
    A,
    /// Intra-class clustering of language embeddings.
    IC,
    /// Inter-class separation between semantic and language embeddings.
    IS,
}

impl Term {
    pub const ALL: [Term; 8] = [
        Term::R,
        Term::CR,
        Term::S,
        Term::Lm,
        Term::Li,
        Term::A,
        Term::IC,
        Term::IS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::R => "R",
            Term::CR => "CR",
            Term::S => "S",
            Term::Lm => "Lm",
            Term::Li => "Li",
            Term::A => "A",
            Term::IC => "IC",
            Term::IS => "IS",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss term {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "dream")]
    Dream,
    #[serde(rename = "meat")]
    Meat,
    #[serde(rename = "dream+oracle")]
    DreamOracle,
    #[serde(rename = "meat+oracle")]
    MeatOracle,
    #[serde(rename = "oracle", alias = "oracle_only")]
    Oracle,
    #[serde(rename = "custom")]
    Custom,
}

impl Preset {
    pub const NAMED: [Preset; 5] = [
        Preset::Dream,
        Preset::Meat,
        Preset::DreamOracle,
        Preset::MeatOracle,
        Preset::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Dream => "dream",
            Preset::Meat => "meat",
            Preset::DreamOracle => "dream+oracle",
            Preset::MeatOracle => "meat+oracle",
            Preset::Oracle => "oracle",
            Preset::Custom => "custom",
        }
    }

    /// Terms switched on by the preset. `Custom` has none of its own.
    pub fn terms(self) -> BTreeSet<Term> {
        use Term::*;
        let dream = [R, S, Lm, Li];
        let meat = [R, CR, Lm, Li, A];
        let oracle = [IC, IS];
        match self {
            Preset::Dream => dream.into_iter().collect(),
            Preset::Meat => meat.into_iter().collect(),
            Preset::DreamOracle => dream.into_iter().chain(oracle).collect(),
            Preset::MeatOracle => meat.into_iter().chain(oracle).collect(),
            Preset::Oracle => oracle.into_iter().collect(),
            Preset::Custom => BTreeSet::new(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle_only" => Ok(Preset::Oracle),
            _ => Preset::NAMED
                .into_iter()
                .chain([Preset::Custom])
                .find(|p| p.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown objective preset {s:?}"))),
        }
    }
}

/// Which row pairs the intra-class clustering term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `(i, (i + 1) mod N)` for every row.
    #[default]
    Cyclic,
    /// Every unordered pair `i < j`.
    AllPairs,
}

impl Pairing {
    pub fn pairs(self, n: usize) -> Vec<(usize, usize)> {
        match self {
            Pairing::Cyclic => (0..n).map(|i| (i, (i + 1) % n)).collect(),
            Pairing::AllPairs => (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossConfigDoc", into = "LossConfigDoc")]
pub struct LossConfig {
    pub preset: Preset,
    pub weights: BTreeMap<Term, f64>,
    pub adversarial_lambda: f64,
    pub enabled_terms: BTreeSet<Term>,
    pub pairing: Pairing,
}

/// On-disk shape of [`LossConfig`]; everything but the preset is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossConfigDoc {
    preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    enabled_terms: Option<BTreeSet<Term>>,
    #[serde(default)]
    weights: BTreeMap<Term, f64>,
    #[serde(default = "default_lambda")]
    adversarial_lambda: f64,
    #[serde(default)]
    pairing: Pairing,
}

fn default_lambda() -> f64 {
    1.0
}

impl TryFrom<LossConfigDoc> for LossConfig {
    type Error = Error;

    fn try_from(doc: LossConfigDoc) -> Result<Self> {
        let enabled_terms = match (doc.preset, doc.enabled_terms) {
            (Preset::Custom, Some(terms)) => terms,
            (Preset::Custom, None) => {
                return Err(Error::Config("custom objective needs enabled_terms".into()))
            }
            (preset, Some(terms)) if terms != preset.terms() => {
                return Err(Error::Config(format!(
                    "enabled_terms {terms:?} disagree with preset {preset}; use preset \"custom\""
                )))
            }
            (preset, _) => preset.terms(),
        };
        let mut weights: BTreeMap<Term, f64> = enabled_terms.iter().map(|&t| (t, 1.0)).collect();
        for (t, w) in doc.weights {
            weights.insert(t, w);
        }
        let cfg = LossConfig {
            preset: doc.preset,
            weights,
            adversarial_lambda: doc.adversarial_lambda,
            enabled_terms,
            pairing: doc.pairing,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<LossConfig> for LossConfigDoc {
    fn from(cfg: LossConfig) -> Self {
        LossConfigDoc {
            enabled_terms: Some(cfg.enabled_terms),
            preset: cfg.preset,
            weights: cfg.weights,
            adversarial_lambda: cfg.adversarial_lambda,
            pairing: cfg.pairing,
        }
    }
}

impl LossConfig {
    /// The preset's terms, each with weight 1.0, reversal coefficient 1.0.
    pub fn preset(preset: Preset) -> Self {
        let enabled_terms = preset.terms();
        Self {
            preset,
            weights: enabled_terms.iter().map(|&t| (t, 1.0)).collect(),
            adversarial_lambda: 1.0,
            enabled_terms,
            pairing: Pairing::Cyclic,
        }
    }

    pub fn custom(terms: impl IntoIterator<Item = Term>) -> Self {
        let enabled_terms: BTreeSet<Term> = terms.into_iter().collect();
        Self {
            preset: Preset::Custom,
            weights: enabled_terms.iter().map(|&t| (t, 1.0)).collect(),
            adversarial_lambda: 1.0,
            enabled_terms,
            pairing: Pairing::Cyclic,
        }
    }

    pub fn with_weight(mut self, term: Term, weight: f64) -> Self {
        self.weights.insert(term, weight);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.adversarial_lambda = lambda;
        self
    }

    pub fn with_pairing(mut self, pairing: Pairing) -> Self {
        self.pairing = pairing;
        self
    }

    pub fn weight(&self, term: Term) -> f64 {
        self.weights.get(&term).copied().unwrap_or(1.0)
    }

    pub fn is_enabled(&self, term: Term) -> bool {
        self.enabled_terms.contains(&term)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_terms.is_empty() {
            return Err(Error::Config("objective enables no loss terms".into()));
        }
        if self.preset != Preset::Custom && self.enabled_terms != self.preset.terms() {
            return Err(Error::Config(format!(
                "enabled terms {:?} disagree with preset {}",
                self.enabled_terms, self.preset
            )));
        }
        for (t, w) in &self.weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::Config(format!("weight for {t} must be finite and >= 0, got {w}")));
            }
        }
        if !self.adversarial_lambda.is_finite() || self.adversarial_lambda < 0.0 {
            return Err(Error::Config(format!(
                "adversarial_lambda must be finite and >= 0, got {}",
                self.adversarial_lambda
            )));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub values: BTreeMap<Term, f64>,
    pub total: f64,
    /// Accuracy of the language head on `[s_l; t_l]` when `Li` is enabled.
    pub classifier_accuracy: Option<f64>,
}

impl LossBreakdown {
    pub fn get(&self, term: Term) -> Option<f64> {
        self.values.get(&term).copied()
    }

    /// `L_L = L_L^m + L_L^i`, over whichever of the two were computed.
    pub fn language_total(&self) -> f64 {
        self.get(Term::Lm).unwrap_or(0.0) + self.get(Term::Li).unwrap_or(0.0)
    }
}

fn zeros_for(batch: &DisentangledBatch) -> OutputGrads {
    OutputGrads::zeros(batch.len(), batch.dim())
}

/// `½·[mse(e_s, s_m + s_l) + mse(e_t, t_m + t_l)]`.
pub fn loss_reconstruction(batch: &DisentangledBatch) -> Result<GradPair<OutputGrads>> {
    let src = mse(&batch.s_m.add(&batch.s_l)?, &batch.e_s)?;
    let tgt = mse(&batch.t_m.add(&batch.t_l)?, &batch.e_t)?;
    let mut g = zeros_for(batch);
    g.s_m.add_scaled(&src.grad, 0.5)?;
    g.s_l.add_scaled(&src.grad, 0.5)?;
    g.t_m.add_scaled(&tgt.grad, 0.5)?;
    g.t_l.add_scaled(&tgt.grad, 0.5)?;
    Ok(GradPair {
        value: 0.5 * (src.value + tgt.value),
        grad: g,
    })
}

/// `½·[mse(e_s, t_m + s_l) + mse(e_t, s_m + t_l)]`.
pub fn loss_cross_reconstruction(batch: &DisentangledBatch) -> Result<GradPair<OutputGrads>> {
    let src = mse(&batch.t_m.add(&batch.s_l)?, &batch.e_s)?;
    let tgt = mse(&batch.s_m.add(&batch.t_l)?, &batch.e_t)?;
    let mut g = zeros_for(batch);
    g.t_m.add_scaled(&src.grad, 0.5)?;
    g.s_l.add_scaled(&src.grad, 0.5)?;
    g.s_m.add_scaled(&tgt.grad, 0.5)?;
    g.t_l.add_scaled(&tgt.grad, 0.5)?;
    Ok(GradPair {
        value: 0.5 * (src.value + tgt.value),
        grad: g,
    })
}

/// Mean cosine distance between parallel semantic rows.
pub fn loss_semantic(batch: &DisentangledBatch) -> Result<GradPair<OutputGrads>> {
    let n = batch.len();
    let mut g = zeros_for(batch);
    if n == 0 {
        return Ok(GradPair { value: 0.0, grad: g });
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let c = cosine_sim(batch.s_m.row(i), batch.t_m.row(i))?;
        total += 1.0 - c.value;
        axpy(g.s_m.row_mut(i), &c.grad_a, -scale);
        axpy(g.t_m.row_mut(i), &c.grad_b, -scale);
    }
    Ok(GradPair {
        value: total * scale,
        grad: g,
    })
}

fn centroid_spread(x: &Matrix, grad: &mut Matrix) -> f64 {
    let n = x.rows();
    if n == 0 {
        return 0.0;
    }
    let mean = x.column_means();
    let mut total = 0.0;
    for i in 0..n {
        let g = grad.row_mut(i);
        for (k, (&v, &mu)) in x.row(i).iter().zip(&mean).enumerate() {
            let diff = v - mu;
            total += diff * diff;
            // Σ_j (x_j − μ) = 0, so the centroid's own dependence drops out.
            g[k] += 2.0 * diff / n as f64;
        }
    }
    total / n as f64
}

/// Mean squared distance of each language row to its side's batch centroid,
/// summed over the source and target sides.
pub fn loss_language_embed(batch: &DisentangledBatch) -> Result<GradPair<OutputGrads>> {
    let mut g = zeros_for(batch);
    let value = centroid_spread(&batch.s_l, &mut g.s_l) + centroid_spread(&batch.t_l, &mut g.t_l);
    Ok(GradPair { value, grad: g })
}

fn check_labels(batch: &DisentangledBatch, labels: &[usize]) -> Result<()> {
    if labels.len() != 2 * batch.len() {
        return Err(Error::InvalidBatch(format!(
            "expected {} language labels (source rows then target rows), got {}",
            2 * batch.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of the language head over the stacked `[s_l; t_l]` rows.
/// The second value is the head's accuracy on those rows.
pub fn loss_language_classify(
    batch: &DisentangledBatch,
    head: &ClassifierHead,
    labels: &[usize],
) -> Result<(GradPair<OutputGrads>, f64)> {
    check_labels(batch, labels)?;
    let logits = classify(head, &batch.s_l.vstack(&batch.t_l)?)?;
    let ce = softmax_cross_entropy(&logits, labels)?;
    let mut g = zeros_for(batch);
    g.lang_logits = Some(ce.grad);
    Ok((
        GradPair {
            value: ce.value,
            grad: g,
        },
        accuracy(&logits, labels),
    ))
}

/// Cross-entropy of the adversarial head over `[s_m; t_m]`. The head learns
/// normally; the semantic network receives the gradient scaled by `-lambda`.
pub fn loss_adversarial(
    batch: &DisentangledBatch,
    head: &ClassifierHead,
    labels: &[usize],
    lambda: f64,
) -> Result<GradPair<OutputGrads>> {
    check_labels(batch, labels)?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("reversal lambda must be >= 0, got {lambda}")));
    }
    let logits = classify(head, &batch.s_m.vstack(&batch.t_m)?)?;
    let ce = softmax_cross_entropy(&logits, labels)?;
    let mut g = zeros_for(batch);
    g.adv_logits = Some(ce.grad);
    g.adv_input_scale = -lambda;
    Ok(GradPair {
        value: ce.value,
        grad: g,
    })
}

/// `(1/P)·Σ_(i,j) [2 − cos(s_l[i], s_l[j]) − cos(t_l[i], t_l[j])]`.
pub fn loss_intra_class(batch: &DisentangledBatch, pairing: Pairing) -> Result<GradPair<OutputGrads>> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidBatch(format!(
            "intra-class clustering needs at least 2 rows, got {n}"
        )));
    }
    let pairs = pairing.pairs(n);
    let scale = 1.0 / pairs.len() as f64;
    let mut g = zeros_for(batch);
    let mut total = 0.0;
    for &(i, j) in &pairs {
        let cs = cosine_sim(batch.s_l.row(i), batch.s_l.row(j))?;
        let ct = cosine_sim(batch.t_l.row(i), batch.t_l.row(j))?;
        total += 2.0 - cs.value - ct.value;
        axpy(g.s_l.row_mut(i), &cs.grad_a, -scale);
        axpy(g.s_l.row_mut(j), &cs.grad_b, -scale);
        axpy(g.t_l.row_mut(i), &ct.grad_a, -scale);
        axpy(g.t_l.row_mut(j), &ct.grad_b, -scale);
    }
    Ok(GradPair {
        value: total * scale,
        grad: g,
    })
}

/// `(1/N)·Σ_i [max(0, cos(s_m[i], s_l[i])) + max(0, cos(t_m[i], t_l[i]))]`.
/// The subgradient at exactly zero is zero.
pub fn loss_inter_class(batch: &DisentangledBatch) -> Result<GradPair<OutputGrads>> {
    let n = batch.len();
    let mut g = zeros_for(batch);
    if n == 0 {
        return Ok(GradPair { value: 0.0, grad: g });
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let cs = cosine_sim(batch.s_m.row(i), batch.s_l.row(i))?;
        if cs.value > 0.0 {
            total += cs.value;
            axpy(g.s_m.row_mut(i), &cs.grad_a, scale);
            axpy(g.s_l.row_mut(i), &cs.grad_b, scale);
        }
        let ct = cosine_sim(batch.t_m.row(i), batch.t_l.row(i))?;
        if ct.value > 0.0 {
            total += ct.value;
            axpy(g.t_m.row_mut(i), &ct.grad_a, scale);
            axpy(g.t_l.row_mut(i), &ct.grad_b, scale);
        }
    }
    Ok(GradPair {
        value: total * scale,
        grad: g,
    })
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Evaluate every enabled term and combine them. Returns the breakdown and the
/// weighted gradient w.r.t. the batch outputs.
pub fn objective_output_grads(
    config: &LossConfig,
    params: &ModelParams,
    batch: &DisentangledBatch,
    labels: &[usize],
) -> Result<(LossBreakdown, OutputGrads)> {
    config.validate()?;
    let mut grads = zeros_for(batch);
    let mut values = BTreeMap::new();
    let mut total = 0.0;
    let mut classifier_accuracy = None;
    for &term in &config.enabled_terms {
        let wrap = |e: Error| e.in_term(term.name());
        let gp = match term {
            Term::R => loss_reconstruction(batch),
            Term::CR => loss_cross_reconstruction(batch),
            Term::S => loss_semantic(batch),
            Term::Lm => loss_language_embed(batch),
            Term::Li => loss_language_classify(batch, &params.lang_head, labels).map(|(gp, acc)| {
                classifier_accuracy = Some(acc);
                gp
            }),
            Term::A => loss_adversarial(batch, &params.adv_head, labels, config.adversarial_lambda),
            Term::IC => loss_intra_class(batch, config.pairing),
            Term::IS => loss_inter_class(batch),
        }
        .map_err(wrap)?;
        if !gp.value.is_finite() {
            return Err(Error::NonFinite {
                path: format!("loss term {term}"),
            });
        }
        let w = config.weight(term);
        total += w * gp.value;
        grads.add_scaled(&gp.grad, w)?;
        values.insert(term, gp.value);
    }
    Ok((
        LossBreakdown {
            values,
            total,
            classifier_accuracy,
        },
        grads,
    ))
}

/// Weighted objective over the enabled terms plus its gradient w.r.t. every
/// model parameter. `labels` holds the language id of each source row
/// followed by each target row.
pub fn compose_objective(
    config: &LossConfig,
    params: &ModelParams,
    batch: &DisentangledBatch,
    labels: &[usize],
) -> Result<(LossBreakdown, ModelParams)> {
    let (breakdown, grads) = objective_output_grads(config, params, batch, labels)?;
    let param_grads = model_backward(params, batch, &grads)?;
    Ok((breakdown, param_grads))
}

/// Outcome of a finite-difference check over several seeded instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub label: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub worst_seed: u64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Smallest `|cos|` between paired semantic and language rows; instances
/// closer than this to the hinge kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

fn random_instance(seed: u64, d: usize, n: usize) -> Result<(ModelParams, Matrix, Matrix)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let params = crate::model::init_model(seed, d, &[d], 2, crate::numerics::Activation::Tanh)?;
    let flat: Vec<f64> = params
        .to_flat()
        .iter()
        .map(|v| v + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let params = params.with_flat(&flat)?;
    let mut draw = || -> Result<Matrix> {
        Matrix::new(n, d, (0..n * d).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
    };
    let (e_s, e_t) = (draw()?, draw()?);
    Ok((params, e_s, e_t))
}

fn near_kink(batch: &DisentangledBatch) -> bool {
    (0..batch.len()).any(|i| {
        [(&batch.s_m, &batch.s_l), (&batch.t_m, &batch.t_l)]
            .iter()
            .any(|(m, l)| crate::numerics::cosine_value(m.row(i), l.row(i)).map_or(true, |c| c.abs() < KINK_MARGIN))
    })
}

/// Analytic gradient of `config`'s objective against central differences
/// with step `h`. The adversarial term's reference gradient is its plain
/// finite difference, scaled by `-lambda` on the semantic network's
/// parameters to account for gradient reversal.
pub fn check_objective_gradient(
    config: &LossConfig,
    params: &ModelParams,
    e_s: &Matrix,
    e_t: &Matrix,
    labels: &[usize],
    h: f64,
) -> Result<f64> {
    let batch = crate::model::disentangle_forward(params, e_s, e_t)?;
    let (_, analytic) = compose_objective(config, params, &batch, labels)?;

    let value_of = |cfg: &LossConfig, flat: &[f64]| -> f64 {
        let p = params.with_flat(flat).expect("same layout");
        crate::model::disentangle_forward(&p, e_s, e_t)
            .and_then(|b| objective_output_grads(cfg, &p, &b, labels))
            .map_or(f64::NAN, |(bd, _)| bd.total)
    };
    let x = params.to_flat();
    let mut reference = vec![0.0; x.len()];
    let others: BTreeSet<Term> = config.enabled_terms.iter().copied().filter(|&t| t != Term::A).collect();
    if !others.is_empty() {
        let mut cfg = config.clone();
        cfg.preset = Preset::Custom;
        cfg.enabled_terms = others;
        let fd = crate::numerics::finite_difference_gradient(|p| value_of(&cfg, p), &x, h)?;
        reference.iter_mut().zip(fd).for_each(|(r, g)| *r += g);
    }
    if config.is_enabled(Term::A) {
        let mut cfg = LossConfig::custom([Term::A]).with_lambda(config.adversarial_lambda);
        cfg.weights.insert(Term::A, config.weight(Term::A));
        let fd = crate::numerics::finite_difference_gradient(|p| value_of(&cfg, p), &x, h)?;
        let semantic = params.flat_range_mlp_m();
        for (i, g) in fd.into_iter().enumerate() {
            let scale = if semantic.contains(&i) { -config.adversarial_lambda } else { 1.0 };
            reference[i] += scale * g;
        }
    }
    Ok(crate::numerics::relative_error(&analytic.to_flat(), &reference))
}

/// Run [`check_objective_gradient`] on `instances` seeded random problems with
/// `d ≤ 8`, `N ≤ 6` and two languages.
pub fn gradient_suite(label: &str, config: &LossConfig, instances: usize, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        label: label.to_string(),
        instances: 0,
        max_relative_error: 0.0,
        worst_seed: seed,
    };
    let mut s = seed;
    while report.instances < instances {
        let d = 2 + (s % 7) as usize;
        let n = 2 + (s % 5) as usize;
        let (params, e_s, e_t) = random_instance(s, d, n)?;
        let batch = crate::model::disentangle_forward(&params, &e_s, &e_t)?;
        if near_kink(&batch) {
            s += 1;
            continue;
        }
        let mut labels = vec![0; n];
        labels.resize(2 * n, 1);
        let err = check_objective_gradient(config, &params, &e_s, &e_t, &labels, h)?;
        if err > report.max_relative_error || report.instances == 0 {
            report.max_relative_error = err;
            report.worst_seed = s;
        }
        report.instances += 1;
        s += 1;
    }
    Ok(report)
}
