//! Embedding corpora on disk and in memory, splits and batches, the planted
//! synthetic generator, and code-switched sentence construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatErrorKind, Result};
use crate::numerics::Matrix;

pub const OEMB_MAGIC: &[u8; 4] = b"OEMB";
pub const OEMB_VERSION: u16 = 1;
const FLAG_GOLD: u16 = 1;
const HEADER_LEN: u64 = 20;

/// Index-aligned source/target embeddings for one language pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCorpus {
    pub src_lang: u16,
    pub tgt_lang: u16,
    pub source: Matrix,
    pub target: Matrix,
    /// Similarity judgements in `[0, 5]`, one per pair (STS corpora only).
    pub gold_scores: Option<Vec<f64>>,
}

impl EmbeddingCorpus {
    pub fn new(
        src_lang: u16,
        tgt_lang: u16,
        source: Matrix,
        target: Matrix,
        gold_scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        let corpus = Self {
            src_lang,
            tgt_lang,
            source,
            target,
            gold_scores,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.shape() != self.target.shape() {
            return Err(Error::dim(
                "corpus",
                self.source.shape_str(),
                self.target.shape_str(),
            ));
        }
        if !self.source.is_finite() || !self.target.is_finite() {
            return Err(Error::NonFinite {
                path: "corpus embeddings".into(),
            });
        }
        if let Some(g) = &self.gold_scores {
            if g.len() != self.len() {
                return Err(Error::dim(
                    "gold scores",
                    format!("{} scores", g.len()),
                    format!("{} pairs", self.len()),
                ));
            }
            if let Some(i) = g.iter().position(|v| !(0.0..=5.0).contains(v)) {
                return Err(Error::Config(format!(
                    "gold score {} at pair {i} is outside [0, 5]",
                    g[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.source.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.source.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            src_lang: self.src_lang,
            tgt_lang: self.tgt_lang,
            source: self.source.select_rows(indices),
            target: self.target.select_rows(indices),
            gold_scores: self
                .gold_scores
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
        }
    }

    /// Language ids of the `2·rows` stacked rows: sources first, then targets.
    pub fn labels(&self, rows: usize) -> Vec<usize> {
        let mut labels = vec![self.src_lang as usize; rows];
        labels.resize(2 * rows, self.tgt_lang as usize);
        labels
    }

    /// Encode as OEMB bytes. Values are stored as 32-bit floats.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let dim = u32::try_from(self.dim()).map_err(|_| overflow_err(12, "dim exceeds u32"))?;
        let count = u32::try_from(self.len()).map_err(|_| overflow_err(16, "count exceeds u32"))?;
        let flags = if self.gold_scores.is_some() { FLAG_GOLD } else { 0 };
        let mut out = Vec::with_capacity(HEADER_LEN as usize + 8 * self.dim() * self.len());
        out.extend_from_slice(OEMB_MAGIC);
        out.extend_from_slice(&OEMB_VERSION.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&self.src_lang.to_le_bytes());
        out.extend_from_slice(&self.tgt_lang.to_le_bytes());
        for i in 0..self.len() {
            for &v in self.source.row(i).iter().chain(self.target.row(i)) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if let Some(g) = &self.gold_scores {
            for &v in g {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Decode OEMB bytes. Nothing is returned unless the whole file is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let total = bytes.len() as u64;
        if total < 4 || &bytes[..4] != OEMB_MAGIC {
            if total < 4 && OEMB_MAGIC.starts_with(bytes) {
                return Err(format_err(FormatErrorKind::Truncated, total, "file ends inside the magic"));
            }
            return Err(format_err(FormatErrorKind::BadMagic, 0, "expected \"OEMB\""));
        }
        if total < HEADER_LEN {
            return Err(format_err(
                FormatErrorKind::Truncated,
                total,
                format!("header needs {HEADER_LEN} bytes, file has {total}"),
            ));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u16_at(4);
        if version != OEMB_VERSION {
            return Err(format_err(
                FormatErrorKind::UnsupportedVersion,
                4,
                format!("version {version}, expected {OEMB_VERSION}"),
            ));
        }
        let flags = u16_at(6);
        if flags & !FLAG_GOLD != 0 {
            return Err(format_err(
                FormatErrorKind::UnknownFlags,
                6,
                format!("flags {flags:#06x} set reserved bits"),
            ));
        }
        let dim = u32_at(8) as u64;
        let count = u32_at(12) as u64;
        let src_lang = u16_at(16);
        let tgt_lang = u16_at(18);
        let has_gold = flags & FLAG_GOLD != 0;

        let expected = dim
            .checked_mul(count)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(if has_gold { count * 4 } else { 0 }))
            .and_then(|v| v.checked_add(HEADER_LEN))
            .filter(|&v| usize::try_from(v).is_ok())
            .ok_or_else(|| overflow_err(8, format!("dim {dim} × count {count} overflows")))?;
        if total < expected {
            return Err(format_err(
                FormatErrorKind::Truncated,
                total,
                format!("expected {expected} bytes for dim {dim}, count {count}"),
            ));
        }
        if total > expected {
            return Err(format_err(
                FormatErrorKind::TrailingBytes,
                expected,
                format!("{} unexpected bytes after the last record", total - expected),
            ));
        }

        let (dim, count) = (dim as usize, count as usize);
        let f32_at = |o: usize| -> Result<f64> {
            let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(format_err(FormatErrorKind::NonFinite, o as u64, format!("value {v}")))
            }
        };
        let mut source = Vec::with_capacity(dim * count);
        let mut target = Vec::with_capacity(dim * count);
        let mut offset = HEADER_LEN as usize;
        for _ in 0..count {
            for _ in 0..dim {
                source.push(f32_at(offset)?);
                offset += 4;
            }
            for _ in 0..dim {
                target.push(f32_at(offset)?);
                offset += 4;
            }
        }
        let gold_scores = if has_gold {
            let mut g = Vec::with_capacity(count);
            for _ in 0..count {
                let v = f32_at(offset)?;
                if !(0.0..=5.0).contains(&v) {
                    return Err(format_err(
                        FormatErrorKind::GoldScoreRange,
                        offset as u64,
                        format!("score {v} is outside [0, 5]"),
                    ));
                }
                g.push(v);
                offset += 4;
            }
            Some(g)
        } else {
            None
        };
        Ok(Self {
            src_lang,
            tgt_lang,
            source: Matrix::new(count, dim, source)?,
            target: Matrix::new(count, dim, target)?,
            gold_scores,
        })
    }
}

fn format_err(kind: FormatErrorKind, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        kind,
        offset,
        message: message.into(),
    }
}

fn overflow_err(offset: u64, message: impl Into<String>) -> Error {
    format_err(FormatErrorKind::Overflow, offset, message)
}

pub fn load_corpus(path: &Path) -> Result<EmbeddingCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingCorpus::from_bytes(&bytes)
}

pub fn save_corpus(corpus: &EmbeddingCorpus, path: &Path) -> Result<()> {
    fs::write(path, corpus.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Maps small integer language ids to two-letter ISO codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageRegistry {
    pub languages: BTreeMap<u16, String>,
}

impl Default for LanguageRegistry {
    /// English plus the twelve training languages, English first.
    fn default() -> Self {
        let codes = [
            "en", "de", "pt", "it", "es", "fr", "zh", "ar", "ja", "nl", "ro", "gn", "ay",
        ];
        Self {
            languages: codes
                .iter()
                .enumerate()
                .map(|(i, c)| (i as u16, c.to_string()))
                .collect(),
        }
    }
}

impl LanguageRegistry {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (id, iso) in &self.languages {
            if iso.len() != 2 || !iso.bytes().all(|b| b.is_ascii_lowercase()) {
                return Err(Error::Config(format!(
                    "language {id}: {iso:?} is not a two-letter lowercase ISO code"
                )));
            }
            if !seen.insert(iso.as_str()) {
                return Err(Error::Config(format!("ISO code {iso:?} is registered twice")));
            }
        }
        Ok(())
    }

    pub fn iso(&self, id: u16) -> Option<&str> {
        self.languages.get(&id).map(String::as_str)
    }

    pub fn id(&self, iso: &str) -> Option<u16> {
        self.languages.iter().find(|(_, c)| *c == iso).map(|(&id, _)| id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let reg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Seeded permutation followed by contiguous train/val/test slices.
pub fn split_corpus(
    corpus: &EmbeddingCorpus,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(EmbeddingCorpus, EmbeddingCorpus, EmbeddingCorpus)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("split fractions {fractions:?} must lie in [0, 1]")));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = corpus.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let sizes = [n_train, n_val, n - n_train - n_val];
    for (name, (&size, &frac)) in ["train", "val", "test"].iter().zip(sizes.iter().zip(&fractions)) {
        if frac > 0.0 && size == 0 {
            return Err(Error::EmptyCorpus(format!(
                "{name} split is empty: fraction {frac} of {n} pairs"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(sizes[0]);
    let (val, test) = rest.split_at(sizes[1]);
    Ok((corpus.subset(train), corpus.subset(val), corpus.subset(test)))
}

/// Index batches for one epoch: a seeded shuffle of `0..n` cut into chunks of
/// `batch_size`, dropping a trailing chunk with fewer than two rows.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// How the language-specific maps differ between source and target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mixing {
    /// Both languages use the identity map.
    Identity,
    /// Both languages share one random orthogonal map.
    Shared,
    /// A shared random orthogonal map composed with opposite rotations of
    /// `angle_deg / 2` that tilt each semantic axis toward an unused axis.
    PerLanguage { angle_deg: f64 },
}

/// Parameters of the planted two-language generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub d: usize,
    pub semantic_dim: usize,
    /// Norm of each language's offset vector.
    pub language_offset_scale: f64,
    /// Angle between the source and target offsets; 180 puts them on
    /// opposite sides of the origin.
    pub offset_angle_deg: f64,
    pub mixing: Mixing,
    pub noise_sigma: f64,
    pub seed: u64,
    pub src_lang: u16,
    pub tgt_lang: u16,
    /// Emit graded-similarity pairs with gold scores instead of translations.
    pub sts: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            d: 16,
            semantic_dim: 8,
            language_offset_scale: 4.0,
            offset_angle_deg: 180.0,
            mixing: Mixing::Shared,
            noise_sigma: 0.05,
            seed: 0,
            src_lang: 0,
            tgt_lang: 1,
            sts: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.semantic_dim == 0 {
            return Err(Error::Config("d and semantic_dim must be >= 1".into()));
        }
        if self.semantic_dim > self.d {
            return Err(Error::Config(format!(
                "semantic_dim {} exceeds d {}",
                self.semantic_dim, self.d
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.language_offset_scale >= 0.0 && self.language_offset_scale.is_finite()) {
            return Err(Error::Config(format!(
                "language_offset_scale must be >= 0, got {}",
                self.language_offset_scale
            )));
        }
        if !(0.0..=180.0).contains(&self.offset_angle_deg) {
            return Err(Error::Config(format!(
                "offset_angle_deg must lie in [0, 180], got {}",
                self.offset_angle_deg
            )));
        }
        if let Mixing::PerLanguage { angle_deg } = self.mixing {
            if !angle_deg.is_finite() {
                return Err(Error::Config("mixing angle must be finite".into()));
            }
        }
        if self.src_lang == self.tgt_lang {
            return Err(Error::Config("source and target language ids must differ".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = crate::numerics::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Random orthogonal matrix via Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = gaussian_vec(rng, d);
        for c in &cols {
            let p = crate::numerics::dot(&v, c);
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
        if crate::numerics::norm(&v) > 1e-6 {
            cols.push(unit(v));
        }
    }
    let mut q = Matrix::zeros(d, d);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            q.set(i, j, v);
        }
    }
    q
}

/// Rotation by `angle` (radians) in the planes `(i, k + i)` for `i < min(k, d − k)`.
fn tilt(d: usize, k: usize, angle: f64) -> Matrix {
    let mut g = Matrix::identity(d);
    let (c, s) = (angle.cos(), angle.sin());
    for i in 0..k.min(d - k) {
        let j = k + i;
        g.set(i, i, c);
        g.set(j, j, c);
        g.set(j, i, s);
        g.set(i, j, -s);
    }
    g
}

fn apply(q: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..q.rows()).map(|i| crate::numerics::dot(q.row(i), v)).collect()
}

/// Draw a planted corpus: `e = Q·[m; 0] + b + noise` per language, with shared
/// latents `m ~ N(0, I_k)` and offsets `b` drawn in the last `d − k`
/// coordinates before the shared map is applied. Values are rounded to 32-bit so the corpus
/// survives an OEMB round trip unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingCorpus> {
    spec.validate()?;
    let (n, d, k) = (spec.n_pairs, spec.d, spec.semantic_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let base = match spec.mixing {
        Mixing::Identity => Matrix::identity(d),
        _ => random_orthogonal(&mut rng, d),
    };
    let (q_s, q_t) = match spec.mixing {
        Mixing::PerLanguage { angle_deg } => {
            let half = angle_deg.to_radians() / 2.0;
            (base.matmul(&tilt(d, k, half))?, base.matmul(&tilt(d, k, -half))?)
        }
        _ => (base.clone(), base.clone()),
    };

    // Offsets live in the unused coordinates when there are any, so the
    // planted semantic and language parts are orthogonal.
    let complement = k < d;
    let mut u = gaussian_vec(&mut rng, d);
    let mut v = gaussian_vec(&mut rng, d);
    if complement {
        u[..k].iter_mut().for_each(|x| *x = 0.0);
        v[..k].iter_mut().for_each(|x| *x = 0.0);
    }
    let u = unit(u);
    let p = crate::numerics::dot(&v, &u);
    v.iter_mut().zip(&u).for_each(|(x, y)| *x -= p * y);
    let v = if crate::numerics::norm(&v) > 1e-12 { unit(v) } else { vec![0.0; d] };
    let half = spec.offset_angle_deg.to_radians() / 2.0;
    let offset = |sign: f64| -> Vec<f64> {
        u.iter()
            .zip(&v)
            .map(|(a, b)| spec.language_offset_scale * (half.cos() * a + sign * half.sin() * b))
            .collect()
    };
    let (b_s, b_t) = (apply(&base, &offset(1.0)), apply(&base, &offset(-1.0)));

    let mut source = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    let mut gold = spec.sts.then(|| Vec::with_capacity(n));
    for _ in 0..n {
        let m = gaussian_vec(&mut rng, k);
        let m_t = match gold.as_mut() {
            Some(g) => {
                let rho: f64 = rng.random_range(0.0..=1.0);
                let z = gaussian_vec(&mut rng, k);
                g.push((5.0 * rho) as f32 as f64);
                m.iter()
                    .zip(&z)
                    .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
                    .collect()
            }
            None => m.clone(),
        };
        for (q, latent, b, out) in [
            (&q_s, &m, &b_s, &mut source),
            (&q_t, &m_t, &b_t, &mut target),
        ] {
            let mut padded = latent.clone();
            padded.resize(d, 0.0);
            let x = apply(q, &padded);
            for j in 0..d {
                let eps: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
                out.push((x[j] + b[j] + eps) as f32 as f64);
            }
        }
    }
    EmbeddingCorpus::new(
        spec.src_lang,
        spec.tgt_lang,
        Matrix::new(n, d, source)?,
        Matrix::new(n, d, target)?,
        gold,
    )
}

/// Word translations in one direction. A word may have several translations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BilingualDictionary {
    entries: BTreeMap<String, Vec<String>>,
}

/// Result of parsing a dictionary file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDictionary {
    pub dictionary: BilingualDictionary,
    /// Non-blank lines that did not have a source word and a translation.
    pub skipped_lines: usize,
}

impl BilingualDictionary {
    pub fn insert(&mut self, source: &str, translation: &str) -> Result<()> {
        if source.is_empty() || translation.is_empty() {
            return Err(Error::Config("dictionary words must be non-empty".into()));
        }
        let list = self.entries.entry(source.to_string()).or_default();
        if !list.iter().any(|t| t == translation) {
            list.push(translation.to_string());
        }
        Ok(())
    }

    /// Parse whitespace-separated lines: the first token is the source word,
    /// the remaining tokens (joined by single spaces) are one translation.
    pub fn parse(text: &str) -> ParsedDictionary {
        let mut dictionary = Self::default();
        let mut skipped_lines = 0;
        for line in text.lines() {
            let mut tokens = line.split_whitespace();
            let Some(source) = tokens.next() else {
                continue;
            };
            let translation = tokens.collect::<Vec<_>>().join(" ");
            if translation.is_empty() {
                skipped_lines += 1;
                continue;
            }
            dictionary
                .insert(source, &translation)
                .expect("whitespace-split tokens are non-empty");
        }
        ParsedDictionary {
            dictionary,
            skipped_lines,
        }
    }

    pub fn load(path: &Path) -> Result<ParsedDictionary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Split a token into leading punctuation, the word, and trailing punctuation.
fn split_punctuation(token: &str) -> (&str, &str, &str) {
    let start = token
        .char_indices()
        .find(|(_, c)| c.is_alphanumeric())
        .map_or(token.len(), |(i, _)| i);
    let end = token
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_alphanumeric())
        .map_or(start, |(i, c)| i + c.len_utf8());
    (&token[..start], &token[start..end], &token[end..])
}

/// Dictionary lookup key for a whitespace token: the token with leading and
/// trailing punctuation removed, case preserved.
pub fn normalize_token(token: &str) -> &str {
    split_punctuation(token).1
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSwitchRecord {
    /// Position of the sentence in the input.
    pub sentence_index: usize,
    pub original: Vec<String>,
    pub switched: Vec<String>,
    pub replaced_positions: Vec<usize>,
}

impl CodeSwitchRecord {
    pub fn switched_text(&self) -> String {
        self.switched.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSwitchReport {
    pub rate: f64,
    pub seed: u64,
    pub sentences_in: usize,
    pub records_out: usize,
    pub excluded_sentences: usize,
    pub excluded_indices: Vec<usize>,
    pub tokens_total: usize,
    pub tokens_covered: usize,
    pub tokens_replaced: usize,
    pub forced_replacements: usize,
    pub mean_replacements_per_record: f64,
    pub dictionary_entries: usize,
    pub dictionary_skipped_lines: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeSwitchOutput {
    pub records: Vec<CodeSwitchRecord>,
    pub report: CodeSwitchReport,
}

impl CodeSwitchOutput {
    /// One switched sentence per line.
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.switched_text() + "\n").collect()
    }
}

/// Replace each dictionary-covered token with probability `rate`, choosing
/// uniformly among its translations. A sentence left without a replacement has
/// its first covered token replaced; a sentence with no covered token is
/// excluded and counted.
pub fn build_codeswitch(
    sentences: &[Vec<String>],
    dict: &BilingualDictionary,
    rate: f64,
    seed: u64,
) -> Result<CodeSwitchOutput> {
    if dict.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("code-switch rate must lie in (0, 1], got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut excluded_indices = Vec::new();
    let (mut tokens_total, mut tokens_covered, mut tokens_replaced, mut forced) = (0, 0, 0, 0);

    let swap = |token: &str, options: &[String], rng: &mut ChaCha8Rng| -> String {
        let (pre, _, post) = split_punctuation(token);
        let choice = &options[rng.random_range(0..options.len())];
        format!("{pre}{choice}{post}")
    };

    for (index, tokens) in sentences.iter().enumerate() {
        tokens_total += tokens.len();
        let mut switched = tokens.clone();
        let mut replaced = Vec::new();
        let mut first_covered = None;
        for (pos, token) in tokens.iter().enumerate() {
            let Some(options) = dict.lookup(normalize_token(token)) else {
                continue;
            };
            tokens_covered += 1;
            first_covered.get_or_insert(pos);
            if rng.random_bool(rate) {
                switched[pos] = swap(token, options, &mut rng);
                replaced.push(pos);
            }
        }
        let Some(first) = first_covered else {
            excluded_indices.push(index);
            continue;
        };
        if replaced.is_empty() {
            let options = dict.lookup(normalize_token(&tokens[first])).expect("covered token");
            switched[first] = swap(&tokens[first], options, &mut rng);
            replaced.push(first);
            forced += 1;
        }
        tokens_replaced += replaced.len();
        records.push(CodeSwitchRecord {
            sentence_index: index,
            original: tokens.clone(),
            switched,
            replaced_positions: replaced,
        });
    }

    let report = CodeSwitchReport {
        rate,
        seed,
        sentences_in: sentences.len(),
        records_out: records.len(),
        excluded_sentences: excluded_indices.len(),
        excluded_indices,
        tokens_total,
        tokens_covered,
        tokens_replaced,
        forced_replacements: forced,
        mean_replacements_per_record: if records.is_empty() {
            0.0
        } else {
            tokens_replaced as f64 / records.len() as f64
        },
        dictionary_entries: dict.len(),
        dictionary_skipped_lines: 0,
    };
    Ok(CodeSwitchOutput { records, report })
}
