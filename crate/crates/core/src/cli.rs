//! Command-line entry point: `train`, `eval`, `gen-synth`, `codeswitch`,
//! `project` and `gradcheck`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_codeswitch, generate_synthetic, load_corpus, save_corpus, split_corpus, tokenize, BilingualDictionary,
    EmbeddingCorpus, LanguageRegistry, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, EvalReport};
use crate::losses::{gradient_suite, LossConfig, Preset, Term};
use crate::model::{disentangle_forward, init_model, Checkpoint};
use crate::numerics::Activation;
use crate::project::{export_projection, project_representations};
use crate::trainer::{fit, TrainConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const SEED_ENV: &str = "ORACLE_DIS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    /// Hidden widths of both extraction networks; defaults to one layer of width `d`.
    #[serde(default)]
    pub hidden_layers: Option<Vec<usize>>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(rename = "L", alias = "languages")]
    pub languages: usize,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelConfig {
    pub fn hidden(&self) -> Vec<usize> {
        self.hidden_layers.clone().unwrap_or_else(|| vec![self.d])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train_corpora: Vec<PathBuf>,
    pub val_corpus: PathBuf,
    #[serde(default)]
    pub test_corpus: Option<PathBuf>,
    #[serde(default)]
    pub sts_corpus: Option<PathBuf>,
    pub checkpoint_out: PathBuf,
    pub report_out: PathBuf,
}

impl PathsConfig {
    fn inputs(&self) -> impl Iterator<Item = &PathBuf> {
        self.train_corpora
            .iter()
            .chain([&self.val_corpus])
            .chain(self.test_corpus.iter())
            .chain(self.sts_corpus.iter())
    }

    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.train_corpora.iter_mut().for_each(fix);
        fix(&mut self.val_corpus);
        self.test_corpus.iter_mut().for_each(fix);
        self.sts_corpus.iter_mut().for_each(fix);
        fix(&mut self.checkpoint_out);
        fix(&mut self.report_out);
    }
}

/// The training configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub objective: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Read a configuration; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.train.validate()?;
        if self.paths.train_corpora.is_empty() {
            return Err(Error::Config("paths.train_corpora is empty".into()));
        }
        for p in self.paths.inputs() {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input corpus not found"),
                ));
            }
        }
        Ok(())
    }
}

/// Train a disentangler, evaluate it, and export data for inspection.
#[derive(Debug, Parser)]
#[command(name = "oracle-dis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a JSON run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Generate a planted synthetic corpus.
    GenSynth(GenSynthArgs),
    /// Build code-switched sentences from a bilingual dictionary.
    Codeswitch(CodeswitchArgs),
    /// Export a 2-D projection of a checkpoint's representations.
    Project(ProjectArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and the environment variable.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus with gold similarity scores.
    #[arg(long)]
    sts: Option<PathBuf>,
    /// Language-id registry used to label the table.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Write the whole corpus here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write train.oemb, val.oemb and test.oemb into this directory.
    #[arg(long)]
    split_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    fractions: Vec<f64>,
    /// JSON generator spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    offset_angle: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Graded-similarity pairs with gold scores.
    #[arg(long)]
    sts: bool,
}

#[derive(Debug, Args)]
struct CodeswitchArgs {
    /// One sentence per line.
    #[arg(long)]
    sentences: PathBuf,
    /// Whitespace-separated dictionary: source word, then its translation.
    #[arg(long)]
    dict: PathBuf,
    /// Per-token replacement probability in (0, 1].
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report_out: PathBuf,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N pairs.
    #[arg(long)]
    max_pairs: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Preset name, or "all" for every term and preset.
    #[arg(long, default_value = "all")]
    preset: String,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Run the command line and return the process exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Codeswitch(a) => cmd_codeswitch(a),
        Command::Project(a) => cmd_project(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_DATA
            }
        }
    }
}

/// Seed precedence: explicit flag, then the environment, then the fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

/// Training summary written beside the checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    pub train: TrainReport,
    pub test: Option<EvalReport>,
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;
    if let Some(p) = args.checkpoint_out {
        cfg.paths.checkpoint_out = p;
    }
    if let Some(p) = args.report_out {
        cfg.paths.report_out = p;
    }
    cfg.validate()?;

    let train: Vec<EmbeddingCorpus> = cfg
        .paths
        .train_corpora
        .iter()
        .map(|p| load_corpus(p))
        .collect::<Result<_>>()?;
    let val = load_corpus(&cfg.paths.val_corpus)?;
    let test = cfg.paths.test_corpus.as_deref().map(load_corpus).transpose()?;
    let sts = cfg.paths.sts_corpus.as_deref().map(load_corpus).transpose()?;
    for (name, c) in train.iter().map(|c| ("training", c)).chain([("validation", &val)]) {
        if c.dim() != cfg.model.d {
            return Err(Error::dim(
                "corpus",
                format!("{name} corpus d={}", c.dim()),
                format!("model d={}", cfg.model.d),
            ));
        }
    }

    let init = init_model(
        cfg.train.seed,
        cfg.model.d,
        &cfg.model.hidden(),
        cfg.model.languages,
        cfg.model.activation,
    )?;
    let (params, report) = fit(&train, &val, &cfg.train, &cfg.objective, init)?;
    let test_report = test
        .as_ref()
        .map(|t| evaluate_suite(t, sts.as_ref(), &params))
        .transpose()?;

    let ckpt = Checkpoint::new(params, cfg.objective.clone());
    write_text(&cfg.paths.checkpoint_out, &ckpt.to_json())?;
    write_text(
        &cfg.paths.report_out,
        &to_json(&TrainOutput {
            train: report.clone(),
            test: test_report.clone(),
        }),
    )?;
    println!(
        "trained {} iterations ({:?}); best {:?} {:.6} at iteration {}",
        report.iterations_run,
        report.stop_reason,
        report.validation_metric,
        report.best_validation_value,
        report.best_iteration
    );
    if let Some(r) = test_report {
        print!("{}", r.table("src", "tgt"));
    }
    println!("checkpoint: {}", cfg.paths.checkpoint_out.display());
    println!("report: {}", cfg.paths.report_out.display());
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let corpus = load_corpus(&args.corpus)?;
    let sts = args.sts.as_deref().map(load_corpus).transpose()?;
    let registry = match &args.registry {
        Some(p) => LanguageRegistry::load(p)?,
        None => LanguageRegistry::default(),
    };
    let report = evaluate_suite(&corpus, sts.as_ref(), &ckpt.params)?;
    let name = |id: u16| registry.iso(id).map_or_else(|| format!("lang{id}"), str::to_string);
    print!("{}", report.table(&name(corpus.src_lang), &name(corpus.tgt_lang)));
    if let Some(p) = args.report_out {
        write_text(&p, &to_json(&report))?;
    }
    Ok(EXIT_OK)
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<i32> {
    if args.out.is_none() && args.split_dir.is_none() {
        return Err(Error::Config("gen-synth needs --out and/or --split-dir".into()));
    }
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p, e))?
        }
        None => SyntheticSpec::default(),
    };
    spec.seed = resolve_seed(args.seed, spec.seed)?;
    if let Some(v) = args.n {
        spec.n_pairs = v;
    }
    if let Some(v) = args.d {
        spec.d = v;
    }
    if let Some(v) = args.k {
        spec.semantic_dim = v;
    }
    if let Some(v) = args.offset {
        spec.language_offset_scale = v;
    }
    if let Some(v) = args.offset_angle {
        spec.offset_angle_deg = v;
    }
    if let Some(v) = args.sigma {
        spec.noise_sigma = v;
    }
    spec.sts |= args.sts;
    let corpus = generate_synthetic(&spec)?;
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        save_corpus(&corpus, out)?;
        println!("wrote {} pairs (d={}) to {}", corpus.len(), corpus.dim(), out.display());
    }
    if let Some(dir) = &args.split_dir {
        let fractions: [f64; 3] = args
            .fractions
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config("--fractions needs exactly three values".into()))?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (tr, va, te) = split_corpus(&corpus, fractions, spec.seed)?;
        for (name, c) in [("train", &tr), ("val", &va), ("test", &te)] {
            save_corpus(c, &dir.join(format!("{name}.oemb")))?;
        }
        println!(
            "wrote splits {}/{}/{} to {}",
            tr.len(),
            va.len(),
            te.len(),
            dir.display()
        );
    }
    Ok(EXIT_OK)
}

fn cmd_codeswitch(args: CodeswitchArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.sentences).map_err(|e| Error::io(&args.sentences, e))?;
    let sentences: Vec<Vec<String>> = text.lines().map(tokenize).collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} has no sentences", args.sentences.display())));
    }
    let parsed = BilingualDictionary::load(&args.dict)?;
    let seed = resolve_seed(args.seed, 0)?;
    let mut output = build_codeswitch(&sentences, &parsed.dictionary, args.rate, seed)?;
    output.report.dictionary_skipped_lines = parsed.skipped_lines;
    write_text(&args.out, &output.to_text())?;
    write_text(&args.report_out, &to_json(&output.report))?;
    println!(
        "{} of {} sentences code-switched, {} excluded",
        output.report.records_out, output.report.sentences_in, output.report.excluded_sentences
    );
    Ok(EXIT_OK)
}

fn cmd_project(args: ProjectArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut corpus = load_corpus(&args.corpus)?;
    if let Some(n) = args.max_pairs {
        corpus = corpus.subset(&(0..n.min(corpus.len())).collect::<Vec<_>>());
    }
    let batch = disentangle_forward(&ckpt.params, &corpus.source, &corpus.target)?;
    let result = project_representations(&batch)?;
    ensure_parent(&args.out)?;
    export_projection(&result, &args.out)?;
    println!(
        "projected {} rows; explained variance {:?}",
        result.group_labels.len(),
        result.explained_variance
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let seed = resolve_seed(args.seed, 0)?;
    let mut suites: Vec<(String, LossConfig)> = Vec::new();
    if args.preset == "all" {
        for t in Term::ALL {
            suites.push((format!("term {t}"), LossConfig::custom([t])));
        }
        for p in Preset::NAMED {
            suites.push((format!("preset {p}"), LossConfig::preset(p)));
        }
    } else {
        let p: Preset = args.preset.parse()?;
        if p == Preset::Custom {
            return Err(Error::Config("gradcheck takes a named preset or \"all\"".into()));
        }
        suites.push((format!("preset {p}"), LossConfig::preset(p)));
    }
    let mut failed = false;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (label, cfg) in suites {
        let r = gradient_suite(&label, &cfg, args.instances, seed, args.step)?;
        let ok = r.passed(args.tolerance);
        failed |= !ok;
        let _ = writeln!(
            out,
            "{} {:<22} {} instances, max relative error {:.3e} (seed {})",
            if ok { "PASS" } else { "FAIL" },
            label,
            r.instances,
            r.max_relative_error,
            r.worst_seed
        );
    }
    Ok(if failed { EXIT_NUMERICAL } else { EXIT_OK })
}
