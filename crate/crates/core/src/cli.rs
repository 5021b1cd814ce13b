//! Command-line front end. Every subcommand that writes files does so into
//! its `--out` directory and finishes with a `manifest.json` listing them.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn, LevelFilter};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, code_universe, featurize, BaselineArtifact, BaselineHyper, BaselineKind};
use crate::coagent::{self, check_failure_ceiling, run_predictor, Agents, PredictorSettings, RunConfig, Sampling};
use crate::cohort::{self, CohortMode, CohortSpec, SplitCohort, VisitStore};
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionMatrix, MetricSet};
use crate::io;
use crate::llm::{Backend, LlmClient, MockBackend, MockScript, RemoteBackend, ResponseCache, RetryPolicy, API_BASE_ENV, API_KEY_ENV};
use crate::model::{prevalence, validate_cohort, CohortExample, ConsolidatedInstructions, Label, Narrative, Split};
use crate::narrative::{load_vocab, serialize_narrative, FallbackPolicy, NarrativeTemplate};
use crate::prompt::{sample_exemplars, PromptConfig, PromptFactory};
use crate::rundir::{now_rfc3339, Manifest, RunDir};
use crate::synth::{self, SynthSpec};

pub const CACHE_DIR_ENV: &str = "COAGENT_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "ehr-coagent", version, about = "Cohorts, narratives, LLM predictor/critic runs, baselines and evaluation for EHR disease prediction")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic data.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Build, sample and split cohorts.
    #[command(subcommand)]
    Cohort(CohortCmd),
    /// Render cohort examples as narratives.
    Narrate(NarrateArgs),
    /// Inspect prompts.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Single-agent prediction.
    Predict(PredictArgs),
    /// Predictor/critic runs.
    #[command(subcommand)]
    Coagent(CoagentCmd),
    /// Classical baselines.
    #[command(subcommand)]
    Baseline(BaselineCmd),
    /// Score predictions against a cohort.
    Eval(EvalArgs),
    /// Combine evaluation results into one table.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthCmd {
    Generate(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// TOML file with generator settings; defaults apply to missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CohortCmd {
    Build(CohortBuildArgs),
    Sample(CohortSampleArgs),
    Split(CohortSplitArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    AdjacentPairs,
    IndexEncounter,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CohortBuildArgs {
    #[arg(long)]
    pub visits: PathBuf,
    /// Code-set file with the target (outcome) codes.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, value_enum, default_value = "adjacent-pairs")]
    pub mode: ModeArg,
    /// Code-set file defining the index encounter.
    #[arg(long)]
    pub inclusion: Option<PathBuf>,
    #[arg(long, default_value_t = 365)]
    pub horizon_days: u32,
    #[arg(long)]
    pub lookback_days: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "task")]
    pub task_id: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CohortSampleArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CohortSplitArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Train, calibration and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackArg {
    RawCode,
    Skip,
    Error,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NarrateArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// TOML narrative template.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// What to do with codes missing from the vocabulary.
    #[arg(long, value_enum, default_value = "raw-code")]
    pub fallback: FallbackArg,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PromptCmd {
    /// Print the predictor prompt for one example.
    Preview(PreviewArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    Zeroshot,
    ZeroshotPlus,
    Fewshot,
}

impl PredictMode {
    pub fn prompt_config(self) -> PromptConfig {
        let plus = PromptConfig {
            use_cot: true,
            use_factor_interactions: true,
            use_prevalence: true,
            ..Default::default()
        };
        match self {
            PredictMode::Zeroshot => PromptConfig::default(),
            PredictMode::ZeroshotPlus => plus,
            PredictMode::Fewshot => PromptConfig { few_shot_n: 6, ..plus },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PreviewArgs {
    /// Cohort with splits assigned; exemplars and prevalence come from train.
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub narratives: PathBuf,
    #[arg(long)]
    pub example_id: String,
    #[arg(long, value_enum, default_value = "zeroshot")]
    pub mode: PredictMode,
    /// Consolidated instructions JSON, as written by a coagent run.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Calibration,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Calibration => Split::Calibration,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BackendArgs {
    /// JSONL mock script; without it the remote endpoint from
    /// COAGENT_API_BASE is used.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    #[arg(long, default_value = "predictor")]
    pub model: String,
    /// Response cache directory; falls back to COAGENT_CACHE_DIR.
    #[arg(long)]
    #[serde(skip)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 1000)]
    pub retry_delay_ms: u64,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long, value_enum)]
    pub mode: PredictMode,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub narratives: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 0.05)]
    pub failure_ceiling: f64,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a predict run records: the resolved prompt strategy rather than
/// the mode name, so runs differ only where their prompts do.
#[derive(Debug, Serialize)]
struct PredictRecordedConfig<'a> {
    prompt: PromptConfig,
    cohort: &'a Path,
    narratives: &'a Path,
    split: SplitArg,
    seed: u64,
    concurrency: usize,
    failure_ceiling: f64,
    backend: &'a BackendArgs,
}

#[derive(Debug, Subcommand)]
pub enum CoagentCmd {
    Run(CoagentArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CoagentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured round count.
    #[arg(long)]
    pub rounds: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCmd {
    Train(BaselineTrainArgs),
    Eval(BaselineEvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Tree,
    Logreg,
    Forest,
}

impl From<KindArg> for BaselineKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Tree => BaselineKind::Tree,
            KindArg::Logreg => BaselineKind::LogReg,
            KindArg::Forest => BaselineKind::Forest,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BaselineTrainArgs {
    /// Cohort with splits assigned; only train examples are used.
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Train on this many rows (half per class) instead of the full split.
    #[arg(long)]
    pub few_shot: Option<usize>,
    /// TOML hyperparameters.
    #[arg(long)]
    pub hyper: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BaselineEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// JSONL with at least `example_id` and `predicted_label` per line.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Require the predictions to cover exactly this split.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Row label in tables; defaults to the predictions file stem.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// `metrics.json` files written by `eval`.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub label: String,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub example_id: String,
    pub predicted_label: Label,
    pub p_positive: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        script: PathBuf,
    },
    Remote {
        /// Defaults to COAGENT_API_BASE.
        #[serde(default)]
        base_url: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleBackends {
    pub predictor: BackendConfig,
    /// Defaults to the predictor's backend.
    #[serde(default)]
    pub critic: Option<BackendConfig>,
    /// Defaults to the critic's backend.
    #[serde(default)]
    pub consolidator: Option<BackendConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppPaths {
    /// Cohort JSONL with splits assigned.
    pub cohort: PathBuf,
    pub narratives: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub predictor_template: Option<PathBuf>,
    #[serde(default)]
    pub critic_template: Option<PathBuf>,
    #[serde(default)]
    pub consolidation_template: Option<PathBuf>,
}

/// Declarative coagent run. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Overrides `run.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub log_level: Option<String>,
    pub paths: AppPaths,
    pub backends: RoleBackends,
    #[serde(default)]
    pub run: RunConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        io::read_toml(path)
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Every referenced input, resolved against `base`.
    fn inputs(&self, base: &Path) -> Vec<PathBuf> {
        let mut out = vec![Self::resolve(base, &self.paths.cohort), Self::resolve(base, &self.paths.narratives)];
        for t in [
            &self.paths.predictor_template,
            &self.paths.critic_template,
            &self.paths.consolidation_template,
        ]
        .into_iter()
        .flatten()
        {
            out.push(Self::resolve(base, t));
        }
        for b in [Some(&self.backends.predictor), self.backends.critic.as_ref(), self.backends.consolidator.as_ref()]
            .into_iter()
            .flatten()
        {
            if let BackendConfig::Mock { script } = b {
                out.push(Self::resolve(base, script));
            }
        }
        out
    }

    pub fn check_paths(&self, base: &Path) -> Result<()> {
        for p in self.inputs(base) {
            if !p.exists() {
                return Err(Error::Config(format!("configured path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn backend_from(cfg: &BackendConfig, base: &Path) -> Result<Arc<dyn Backend>> {
    Ok(match cfg {
        BackendConfig::Mock { script } => {
            let path = AppConfig::resolve(base, script);
            Arc::new(MockBackend::new(format!("mock:{}", script.display()), MockScript::load(&path)?)?)
        }
        BackendConfig::Remote { base_url, timeout_secs } => {
            let timeout = Duration::from_secs(*timeout_secs);
            match base_url {
                Some(u) => Arc::new(RemoteBackend::new(u, std::env::var(API_KEY_ENV).ok(), timeout)),
                None => Arc::new(RemoteBackend::from_env(timeout)?),
            }
        }
    })
}

fn cache_from(explicit: Option<PathBuf>) -> Option<ResponseCache> {
    explicit
        .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
        .map(ResponseCache::new)
}

fn client(backend: Arc<dyn Backend>, cache: &Option<ResponseCache>, retry: RetryPolicy) -> LlmClient {
    let c = LlmClient::new(backend).with_retry(retry);
    match cache {
        Some(cache) => c.with_cache(cache.clone()),
        None => c,
    }
}

pub fn load_split_cohort(path: &Path) -> Result<SplitCohort> {
    let all: Vec<CohortExample> = io::read_jsonl(path)?;
    let mut split = SplitCohort {
        train: Vec::new(),
        calibration: Vec::new(),
        test: Vec::new(),
    };
    for e in all {
        match e.split {
            Split::Train => split.train.push(e),
            Split::Calibration => split.calibration.push(e),
            Split::Test => split.test.push(e),
        }
    }
    Ok(split)
}

pub fn load_narratives(path: &Path) -> Result<BTreeMap<String, Narrative>> {
    let list: Vec<Narrative> = io::read_jsonl(path)?;
    let mut map = BTreeMap::new();
    for n in list {
        let id = n.example_id.clone();
        if map.insert(id.clone(), n).is_some() {
            return Err(Error::Invalid(format!("duplicate narrative for {id}")));
        }
    }
    Ok(map)
}

fn split_examples(cohort: &SplitCohort, split: Split) -> &[CohortExample] {
    match split {
        Split::Train => &cohort.train,
        Split::Calibration => &cohort.calibration,
        Split::Test => &cohort.test,
    }
}

/// Runs `body` against a fresh run directory and always writes the
/// manifest, marking it failed when `body` fails.
fn with_run<C: Serialize>(
    out: &Path,
    command: &str,
    config: &C,
    seeds: &[(&str, u64)],
    body: impl FnOnce(&mut RunDir) -> Result<()>,
) -> Result<()> {
    let started = now_rfc3339();
    let mut rd = RunDir::create(out)?;
    let result = body(&mut rd);
    let seeds = seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let mut manifest = Manifest::new(command, config, seeds, started)?;
    if let Err(e) = &result {
        manifest = manifest.failed(e);
    }
    manifest.excluded.finished_at = now_rfc3339();
    rd.finish(manifest)?;
    result
}

#[derive(Serialize)]
struct CohortSummary {
    n: usize,
    positives: usize,
    prevalence: Option<f64>,
}

impl CohortSummary {
    fn of(examples: &[CohortExample]) -> Self {
        CohortSummary {
            n: examples.len(),
            positives: examples.iter().filter(|e| e.label.is_positive()).count(),
            prevalence: prevalence(examples),
        }
    }
}

fn check_cohort(examples: &[CohortExample]) -> Result<()> {
    let report = validate_cohort(examples);
    for w in &report.warnings {
        warn!("{}: {}", w.example_id, w.message);
    }
    if let Some(e) = report.errors.first() {
        return Err(Error::Invalid(format!(
            "cohort has {} errors, first: {}: {}",
            report.errors.len(),
            e.example_id,
            e.message
        )));
    }
    Ok(())
}

fn synth_generate(a: &SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => io::read_toml(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    with_run(&a.out, "synth generate", &spec, &[("synth", spec.seed)], |rd| {
        let data = synth::generate(&spec)?;
        for f in data.write(rd.root())? {
            rd.adopt(&f);
        }
        info!(
            "generated {} visits, {} examples ({} positive)",
            data.visits.len(),
            data.manifest.n_examples,
            data.manifest.n_positive
        );
        Ok(())
    })
}

fn cohort_build(a: &CohortBuildArgs) -> Result<()> {
    with_run(&a.out, "cohort build", a, &[("cohort", a.seed)], |rd| {
        let store = VisitStore::new(io::read_visits(&a.visits)?)?;
        let spec = CohortSpec {
            mode: match a.mode {
                ModeArg::AdjacentPairs => CohortMode::AdjacentPairs,
                ModeArg::IndexEncounter => CohortMode::IndexEncounter,
            },
            target_codes: io::read_code_set(&a.targets)?,
            horizon_days: a.horizon_days,
            lookback_days: a.lookback_days,
            seed: a.seed,
            task_id: a.task_id.clone(),
        };
        let examples = match spec.mode {
            CohortMode::AdjacentPairs => cohort::build_adjacent_pairs(&store, &spec)?,
            CohortMode::IndexEncounter => {
                let inclusion = a
                    .inclusion
                    .as_deref()
                    .ok_or_else(|| Error::Config("index-encounter mode needs --inclusion".into()))?;
                let built = cohort::build_index_cohort(&store, &spec, &io::read_code_set(inclusion)?)?;
                rd.write_json("exclusions.json", &built.exclusions)?;
                built.examples
            }
        };
        check_cohort(&examples)?;
        rd.write_jsonl("cohort.jsonl", &examples)?;
        rd.write_json("summary.json", &CohortSummary::of(&examples))
    })
}

fn cohort_sample(a: &CohortSampleArgs) -> Result<()> {
    with_run(&a.out, "cohort sample", a, &[("sample", a.seed)], |rd| {
        let pool: Vec<CohortExample> = io::read_jsonl(&a.cohort)?;
        let sample = cohort::stratified_sample(&pool, a.n, a.seed)?;
        rd.write_jsonl("cohort.jsonl", &sample)?;
        rd.write_json("summary.json", &CohortSummary::of(&sample))
    })
}

fn cohort_split(a: &CohortSplitArgs) -> Result<()> {
    with_run(&a.out, "cohort split", a, &[("split", a.seed)], |rd| {
        let pool: Vec<CohortExample> = io::read_jsonl(&a.cohort)?;
        let f: [f64; 3] = a
            .fractions
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config("--fractions needs three values".into()))?;
        let split = cohort::split_cohort(&pool, f, a.seed)?;
        let all: Vec<CohortExample> = split.all().cloned().collect();
        rd.write_jsonl("cohort.jsonl", &all)?;
        let summary: BTreeMap<&str, CohortSummary> = [
            ("train", CohortSummary::of(&split.train)),
            ("calibration", CohortSummary::of(&split.calibration)),
            ("test", CohortSummary::of(&split.test)),
        ]
        .into_iter()
        .collect();
        rd.write_json("summary.json", &summary)
    })
}

fn narrate(a: &NarrateArgs) -> Result<()> {
    with_run(&a.out, "narrate", a, &[], |rd| {
        let examples: Vec<CohortExample> = io::read_jsonl(&a.cohort)?;
        let (mut vocab, duplicates) = load_vocab(&a.vocab)?;
        if duplicates > 0 {
            warn!("{duplicates} duplicate vocabulary entries; the first name was kept");
        }
        vocab.fallback = match a.fallback {
            FallbackArg::RawCode => FallbackPolicy::RawCode,
            FallbackArg::Skip => FallbackPolicy::Skip,
            FallbackArg::Error => FallbackPolicy::Error,
        };
        let template: NarrativeTemplate = match &a.template {
            Some(p) => io::read_toml(p)?,
            None => NarrativeTemplate::default(),
        };
        let narratives = examples
            .iter()
            .map(|e| serialize_narrative(&e.example_id, &e.input_visit, &vocab, &template))
            .collect::<Result<Vec<_>>>()?;
        rd.write_jsonl("narratives.jsonl", &narratives)
    })
}

fn prompt_preview(a: &PreviewArgs) -> Result<()> {
    let cohort = load_split_cohort(&a.cohort)?;
    let narratives = load_narratives(&a.narratives)?;
    let mut config = a.mode.prompt_config();
    if let Some(p) = &a.instructions {
        let ci: ConsolidatedInstructions = io::read_json(p)?;
        config.instructions = Some(ConsolidatedInstructions::new(ci.instructions, ci.source_batch_ids, ci.round)?);
    }
    let narrative = narratives
        .get(&a.example_id)
        .ok_or_else(|| Error::UnknownExample(a.example_id.clone()))?;
    let half = config.few_shot_n / 2;
    let exemplars = if half > 0 {
        sample_exemplars(&cohort.train, &narratives, half, half, a.seed)?
    } else {
        Vec::new()
    };
    let prompt = PromptFactory::default().predictor(narrative, &config, &exemplars, prevalence(&cohort.train))?;
    print!("{}", prompt.text);
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let recorded = PredictRecordedConfig {
        prompt: a.mode.prompt_config(),
        cohort: &a.cohort,
        narratives: &a.narratives,
        split: a.split,
        seed: a.seed,
        concurrency: a.concurrency,
        failure_ceiling: a.failure_ceiling,
        backend: &a.backend,
    };
    with_run(&a.out, "predict", &recorded, &[("predict", a.seed)], |rd| {
        let cohort = load_split_cohort(&a.cohort)?;
        let narratives = load_narratives(&a.narratives)?;
        let examples = split_examples(&cohort, a.split.into());
        if examples.is_empty() {
            return Err(Error::Config(format!("the {:?} split is empty", a.split)));
        }
        let prompt = a.mode.prompt_config();
        let half = prompt.few_shot_n / 2;
        let exemplars = if half > 0 {
            sample_exemplars(&cohort.train, &narratives, half, half, a.seed)?
        } else {
            Vec::new()
        };
        let backend: Arc<dyn Backend> = match &a.backend.mock_script {
            Some(p) => Arc::new(MockBackend::new(format!("mock:{}", p.display()), MockScript::load(p)?)?),
            None => Arc::new(RemoteBackend::from_env(Duration::from_secs(a.backend.timeout_secs)).map_err(
                |e| Error::Config(format!("no --mock-script and no usable {API_BASE_ENV}: {e}")),
            )?),
        };
        let retry = RetryPolicy {
            max_attempts: a.backend.max_attempts,
            base_delay_ms: a.backend.retry_delay_ms,
            ..Default::default()
        };
        let llm = client(backend, &cache_from(a.backend.cache_dir.clone()), retry);
        let settings = PredictorSettings {
            factory: PromptFactory::default(),
            prompt,
            exemplars,
            prevalence: prevalence(&cohort.train),
            sampling: Sampling {
                model_id: a.backend.model.clone(),
                temperature: 0.0,
                max_tokens: 512,
                top_logprobs: 5,
                seed: a.seed,
            },
            concurrency: a.concurrency.max(1),
        };
        let pass = run_predictor(examples, &narratives, &settings, &llm)?;
        rd.write_jsonl("predictions.jsonl", &pass.records)?;
        let prompts: Vec<coagent::PromptRecord> = examples
            .iter()
            .zip(&pass.prompts)
            .map(|(e, p)| coagent::PromptRecord {
                example_id: e.example_id.clone(),
                prompt_hash: p.prompt_hash.clone(),
                text: p.text.clone(),
            })
            .collect();
        rd.write_jsonl("prompts.jsonl", &prompts)?;
        check_failure_ceiling(&pass.records, a.failure_ceiling)?;
        let m = eval::metrics(&eval::confusion(&pass.records, &coagent::truth_map(examples))?)?;
        rd.write_json("metrics.json", &m)
    })
}

fn coagent_run(a: &CoagentArgs) -> Result<()> {
    let mut config = AppConfig::load(&a.config)?;
    if let Some(s) = a.seed.or(config.seed) {
        config.run.seed = s;
        config.seed = Some(s);
    }
    if let Some(r) = a.rounds {
        config.run.rounds = r;
    }
    if let Some(level) = &config.log_level {
        if let Ok(l) = level.parse::<LevelFilter>() {
            log::set_max_level(l);
        }
    }
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    config.check_paths(&base)?;
    with_run(&a.out, "coagent run", &config, &[("run", config.run.seed)], |rd| {
        let cohort = load_split_cohort(&AppConfig::resolve(&base, &config.paths.cohort))?;
        let narratives = load_narratives(&AppConfig::resolve(&base, &config.paths.narratives))?;
        let read_template = |p: &Option<PathBuf>| -> Result<Option<String>> {
            p.as_ref()
                .map(|p| {
                    let p = AppConfig::resolve(&base, p);
                    std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
                })
                .transpose()
        };
        let factory = PromptFactory::with_templates(
            read_template(&config.paths.predictor_template)?.as_deref(),
            read_template(&config.paths.critic_template)?.as_deref(),
            read_template(&config.paths.consolidation_template)?.as_deref(),
        )?;
        let cache = cache_from(config.paths.cache_dir.as_ref().map(|p| AppConfig::resolve(&base, p)));
        let b = &config.backends;
        let critic_cfg = b.critic.as_ref().unwrap_or(&b.predictor);
        let consolidator_cfg = b.consolidator.as_ref().unwrap_or(critic_cfg);
        let retry = config.run.retry;
        let agents = Agents {
            predictor: client(backend_from(&b.predictor, &base)?, &cache, retry),
            critic: client(backend_from(critic_cfg, &base)?, &cache, retry),
            consolidator: client(backend_from(consolidator_cfg, &base)?, &cache, retry),
        };
        let outcome = coagent::run_coagent(&cohort, &narratives, &config.run, &agents, &factory, Some(rd))?;
        let runs: Vec<(String, MetricSet)> = outcome
            .rounds
            .iter()
            .map(|r| (format!("round-{} calibration", r.round), r.calibration_metrics))
            .chain([("test".to_string(), outcome.test_metrics)])
            .collect();
        let table = eval::report(&runs)?;
        rd.write_text("table.txt", &table.text)?;
        rd.write_text("table.csv", &table.csv)?;
        info!("test accuracy {:?}", outcome.test_metrics.accuracy);
        Ok(())
    })
}

fn baseline_train(a: &BaselineTrainArgs) -> Result<()> {
    with_run(&a.out, "baseline train", a, &[("baseline", a.seed)], |rd| {
        let cohort = load_split_cohort(&a.cohort)?;
        if cohort.train.is_empty() {
            return Err(Error::Config("the cohort has no train examples".into()));
        }
        let hyper: BaselineHyper = match &a.hyper {
            Some(p) => io::read_toml(p)?,
            None => BaselineHyper::default(),
        };
        let universe = code_universe(&cohort.train);
        let x = featurize(&cohort.train, &universe)?;
        let kind = BaselineKind::from(a.kind);
        let (model, rows) = match a.few_shot {
            Some(n) => {
                let (m, rows) = baselines::few_shot_fit(kind, &x, n, &hyper, a.seed)?;
                (m, Some(rows))
            }
            None => (baselines::train(kind, &x, &hyper, a.seed)?, None),
        };
        let artifact = BaselineArtifact {
            mode: if a.few_shot.is_some() { "few-shot".into() } else { "full".into() },
            seed: a.seed,
            columns: universe,
            model,
        };
        rd.write_json("model.json", &artifact)?;
        #[derive(Serialize)]
        struct Summary {
            kind: BaselineKind,
            train_rows: usize,
            few_shot_rows: Option<Vec<String>>,
            train_accuracy: f64,
        }
        rd.write_json(
            "summary.json",
            &Summary {
                kind,
                train_rows: x.n_rows(),
                few_shot_rows: rows.map(|r| r.iter().map(|&i| cohort.train[i].example_id.clone()).collect()),
                train_accuracy: artifact.model.accuracy(&x),
            },
        )
    })
}

fn baseline_eval(a: &BaselineEvalArgs) -> Result<()> {
    with_run(&a.out, "baseline eval", a, &[], |rd| {
        let artifact: BaselineArtifact = io::read_json(&a.model)?;
        let cohort = load_split_cohort(&a.cohort)?;
        let examples = split_examples(&cohort, a.split.into());
        if examples.is_empty() {
            return Err(Error::Config(format!("the {:?} split is empty", a.split)));
        }
        let x = featurize(examples, &artifact.columns)?;
        let preds: Vec<BaselinePrediction> = examples
            .iter()
            .zip(&x.rows)
            .map(|(e, row)| {
                let p = artifact.model.predict_proba(row);
                BaselinePrediction {
                    example_id: e.example_id.clone(),
                    predicted_label: Label::from_probability(p),
                    p_positive: p,
                }
            })
            .collect();
        rd.write_jsonl("predictions.jsonl", &preds)?;
        let cm = eval::confusion_from(
            preds.iter().map(|p| (p.example_id.as_str(), p.predicted_label)),
            &coagent::truth_map(examples),
        )?;
        rd.write_json("metrics.json", &eval::metrics(&cm)?)
    })
}

#[derive(Deserialize)]
struct LabelOnly {
    example_id: String,
    predicted_label: Label,
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    with_run(&a.out, "eval", a, &[], |rd| {
        let preds: Vec<LabelOnly> = io::read_jsonl(&a.predictions)?;
        let cohort: Vec<CohortExample> = io::read_jsonl(&a.cohort)?;
        let scope: Vec<&CohortExample> = match a.split {
            Some(s) => cohort.iter().filter(|e| e.split == Split::from(s)).collect(),
            None => cohort.iter().collect(),
        };
        let truth = coagent::truth_map(scope.iter().copied());
        let cm = eval::confusion_from(preds.iter().map(|p| (p.example_id.as_str(), p.predicted_label)), &truth)?;
        if a.split.is_some() && cm.total() as usize != truth.len() {
            return Err(Error::Invalid(format!(
                "{} predictions for a split of {} examples",
                cm.total(),
                truth.len()
            )));
        }
        let label = a.label.clone().unwrap_or_else(|| {
            a.predictions
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        });
        let metrics = eval::metrics(&cm)?;
        let table = eval::report(&[(label.clone(), metrics)])?;
        rd.write_json("metrics.json", &EvalOutput { label, confusion: cm, metrics })?;
        rd.write_text("table.csv", &table.csv)?;
        rd.write_text("table.txt", &table.text)
    })
}

fn report(a: &ReportArgs) -> Result<()> {
    with_run(&a.out, "report", a, &[], |rd| {
        let runs = a
            .inputs
            .iter()
            .map(|p| io::read_json::<EvalOutput>(p).map(|o| (o.label, o.metrics)))
            .collect::<Result<Vec<_>>>()?;
        let table = eval::report(&runs)?;
        print!("{}", table.text);
        rd.write_text("table.csv", &table.csv)?;
        rd.write_text("table.txt", &table.text)
    })
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Synth(SynthCmd::Generate(a)) => synth_generate(a),
        Command::Cohort(CohortCmd::Build(a)) => cohort_build(a),
        Command::Cohort(CohortCmd::Sample(a)) => cohort_sample(a),
        Command::Cohort(CohortCmd::Split(a)) => cohort_split(a),
        Command::Narrate(a) => narrate(a),
        Command::Prompt(PromptCmd::Preview(a)) => prompt_preview(a),
        Command::Predict(a) => predict(a),
        Command::Coagent(CoagentCmd::Run(a)) => coagent_run(a),
        Command::Baseline(BaselineCmd::Train(a)) => baseline_train(a),
        Command::Baseline(BaselineCmd::Eval(a)) => baseline_eval(a),
        Command::Eval(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Warn,
        (false, 1) => LevelFilter::Info,
        (false, 2) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(LevelFilter::Trace)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    log::set_max_level(level);
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
