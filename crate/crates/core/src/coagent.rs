//! The predictor/critic loop.
//!
//! Each round predicts on the calibration split with the current
//! instructions, batches the wrong predictions, asks the critic for
//! instructional feedback per batch and consolidates the feedback into the
//! instruction set used by the next round. After the last round the test
//! split is predicted once with the final instructions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};

use log::warn;
use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::cohort::SplitCohort;
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics, MetricSet};
use crate::llm::{extract_answer, split_reasoning, CompletionRequest, LlmClient, LlmError, RetryPolicy, FALLBACK_EPSILON};
use crate::model::{
    prevalence, CohortExample, ConsolidatedInstructions, ErrorBatch, ErrorItem, ExtractionMode, FeedbackSet, Label,
    Narrative, PredictionRecord,
};
use crate::prompt::{sample_exemplars, Exemplar, PromptConfig, PromptFactory, PromptText};
use crate::rundir::RunDir;
use crate::util::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub predictor_model: String,
    pub critic_model: String,
    pub consolidator_model: String,
    pub prompt: PromptConfig,
    /// Wrong predictions per critic batch (b).
    pub batch_size: usize,
    /// Critic batches per round (m).
    pub num_batches: usize,
    pub rounds: u32,
    /// Cap on consolidated instructions (K).
    pub max_instructions: usize,
    pub seed: u64,
    pub concurrency: usize,
    /// Largest tolerated fraction of failed predictions in one pass.
    pub failure_ceiling: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    /// Prevalence quoted in prompts; defaults to the train split's.
    pub prevalence: Option<f64>,
    pub retry: RetryPolicy,
    /// Persist every predictor prompt next to the predictions.
    pub save_prompts: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            predictor_model: "predictor".into(),
            critic_model: "critic".into(),
            consolidator_model: "critic".into(),
            prompt: PromptConfig::default(),
            batch_size: 8,
            num_batches: 5,
            rounds: 1,
            max_instructions: 8,
            seed: 0,
            concurrency: 4,
            failure_ceiling: 0.05,
            temperature: 0.0,
            max_tokens: 512,
            top_logprobs: 5,
            prevalence: None,
            retry: RetryPolicy::default(),
            save_prompts: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        if self.batch_size == 0 || self.num_batches == 0 || self.rounds == 0 || self.max_instructions == 0 {
            return Err(Error::Config(
                "batch_size, num_batches, rounds and max_instructions must be at least 1".into(),
            ));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_ceiling) {
            return Err(Error::Config("failure_ceiling must lie in [0, 1]".into()));
        }
        if self.prompt.instructions.is_some() {
            return Err(Error::Config("instructions are produced by the loop, not configured".into()));
        }
        Ok(())
    }
}

/// Sampling settings shared by every request of one role.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampling {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    pub seed: u64,
}

impl Sampling {
    fn request(&self, prompt: PromptText) -> CompletionRequest {
        CompletionRequest {
            model_id: self.model_id.clone(),
            prompt,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            top_logprobs: self.top_logprobs,
            seed_hint: Some(self.seed),
        }
    }
}

/// Everything needed to prompt the predictor for one pass.
#[derive(Debug, Clone)]
pub struct PredictorSettings {
    pub factory: PromptFactory,
    pub prompt: PromptConfig,
    pub exemplars: Vec<Exemplar>,
    pub prevalence: Option<f64>,
    pub sampling: Sampling,
    pub concurrency: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorPass {
    pub records: Vec<PredictionRecord>,
    pub prompts: Vec<PromptText>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub example_id: String,
    pub prompt_hash: String,
    pub text: String,
}

fn failed_record(example_id: &str, prompt: &PromptText, err: &LlmError) -> PredictionRecord {
    let attempts = match err {
        LlmError::Exhausted { attempts, .. } => *attempts,
        _ => 1,
    };
    PredictionRecord {
        example_id: example_id.to_string(),
        predicted_label: Label::Negative,
        p_positive: 0.5 - FALLBACK_EPSILON,
        reasoning: String::new(),
        prompt_hash: prompt.prompt_hash.clone(),
        raw_response: String::new(),
        extraction_mode: ExtractionMode::Fallback,
        attempts,
        error: Some(err.to_string()),
    }
}

pub fn predict_one(client: &LlmClient, sampling: &Sampling, example_id: &str, prompt: &PromptText) -> PredictionRecord {
    match client.complete(&sampling.request(prompt.clone())) {
        Ok(resp) => {
            let ans = extract_answer(&resp);
            let (reasoning, _) = split_reasoning(&resp.text);
            PredictionRecord {
                example_id: example_id.to_string(),
                predicted_label: ans.label,
                p_positive: ans.p_positive,
                reasoning,
                prompt_hash: prompt.prompt_hash.clone(),
                raw_response: resp.text,
                extraction_mode: ans.extraction_mode,
                attempts: resp.attempts,
                error: None,
            }
        }
        Err(e) => failed_record(example_id, prompt, &e),
    }
}

/// Runs `f` over `0..n` on at most `workers` threads; results keep index order.
fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// One record per example, in input order. Backend failures become failed
/// records; see [`check_failure_ceiling`].
pub fn run_predictor(
    examples: &[CohortExample],
    narratives: &BTreeMap<String, Narrative>,
    settings: &PredictorSettings,
    client: &LlmClient,
) -> Result<PredictorPass> {
    let prompts = examples
        .iter()
        .map(|e| {
            let n = narratives
                .get(&e.example_id)
                .ok_or_else(|| Error::UnknownExample(e.example_id.clone()))?;
            settings
                .factory
                .predictor(n, &settings.prompt, &settings.exemplars, settings.prevalence)
        })
        .collect::<Result<Vec<_>>>()?;
    let records = parallel_map(examples.len(), settings.concurrency, |i| {
        predict_one(client, &settings.sampling, &examples[i].example_id, &prompts[i])
    });
    Ok(PredictorPass { records, prompts })
}

pub fn check_failure_ceiling(records: &[PredictionRecord], ceiling: f64) -> Result<()> {
    let failed = records.iter().filter(|r| r.is_failed()).count();
    if !records.is_empty() && failed as f64 / records.len() as f64 > ceiling {
        return Err(Error::FailureCeiling {
            failed,
            total: records.len(),
            ceiling,
        });
    }
    Ok(())
}

pub fn truth_map<'a>(examples: impl IntoIterator<Item = &'a CohortExample>) -> BTreeMap<String, Label> {
    examples.into_iter().map(|e| (e.example_id.clone(), e.label)).collect()
}

/// Shuffles the wrong, non-failed predictions and cuts them into batches of
/// `b`, keeping at most `m`. Fewer than `b * m` errors give
/// `ceil(|W| / b)` batches with a short last one.
pub fn sample_error_batches(
    records: &[PredictionRecord],
    truth: &BTreeMap<String, Label>,
    narratives: &BTreeMap<String, Narrative>,
    b: usize,
    m: usize,
    seed: u64,
    round: u32,
) -> Result<Vec<ErrorBatch>> {
    if b == 0 || m == 0 {
        return Err(Error::Invalid("batch size and batch count must be positive".into()));
    }
    let mut wrong = Vec::new();
    for r in records.iter().filter(|r| !r.is_failed()) {
        let t = *truth
            .get(&r.example_id)
            .ok_or_else(|| Error::UnknownExample(r.example_id.clone()))?;
        if r.predicted_label != t {
            let narrative = narratives
                .get(&r.example_id)
                .ok_or_else(|| Error::UnknownExample(r.example_id.clone()))?;
            wrong.push(ErrorItem {
                record: r.clone(),
                true_label: t,
                narrative: narrative.text.clone(),
            });
        }
    }
    if !wrong.is_empty() && wrong.len() < b {
        warn!("only {} wrong predictions for a batch size of {b}; using one short batch", wrong.len());
    }
    wrong.shuffle(&mut stream_rng(seed, &format!("error-batches/round-{round}")));
    Ok(wrong
        .chunks(b)
        .take(m)
        .enumerate()
        .map(|(i, items)| ErrorBatch {
            batch_id: i as u32 + 1,
            items: items.to_vec(),
        })
        .collect())
}

static INSTRUCTION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[\s*#>-]*(?:\d+[.)]\s*)?[*_]*instruction[*_]*\s*\d*\s*:\s*(.*)$").unwrap());
static LEADING_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\d+[.)]\s+").unwrap());

/// Instruction texts from `INSTRUCTION:`-prefixed lines.
pub fn parse_instructions(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| INSTRUCTION_LINE.captures(l))
        .map(|c| LEADING_NUMBER.replace(c[1].trim(), "").trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Drops case-insensitive duplicates (whitespace-normalized), keeping first
/// occurrences, then keeps the first `k`.
pub fn dedup_truncate(instructions: Vec<String>, k: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    instructions
        .into_iter()
        .filter(|s| seen.insert(s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()))
        .take(k)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentExchange {
    pub batch_id: Option<u32>,
    pub prompt: PromptText,
    pub responses: Vec<String>,
}

/// One feedback set per batch, in batch order. A response with no
/// parseable instruction is retried once, bypassing the cache.
pub fn run_critic(
    batches: &[ErrorBatch],
    client: &LlmClient,
    factory: &PromptFactory,
    task_description: &str,
    sampling: &Sampling,
    warnings: &mut Vec<String>,
) -> Result<(Vec<FeedbackSet>, Vec<AgentExchange>)> {
    let mut feedbacks = Vec::with_capacity(batches.len());
    let mut exchanges = Vec::with_capacity(batches.len());
    for batch in batches {
        batch.verify()?;
        let prompt = factory.critic(batch, task_description)?;
        let request = sampling.request(prompt.clone());
        let first = client.complete(&request)?;
        let mut responses = vec![first.text];
        let mut instructions = parse_instructions(&responses[0]);
        if instructions.is_empty() {
            let retry = client.complete_fresh(&request)?;
            instructions = parse_instructions(&retry.text);
            responses.push(retry.text);
            if instructions.is_empty() {
                let msg = format!("critic produced no instructions for batch {}", batch.batch_id);
                warn!("{msg}");
                warnings.push(msg);
            }
        }
        feedbacks.push(FeedbackSet {
            batch_id: batch.batch_id,
            instructions,
        });
        exchanges.push(AgentExchange {
            batch_id: Some(batch.batch_id),
            prompt,
            responses,
        });
    }
    Ok((feedbacks, exchanges))
}

/// Merges feedback into at most `k` instructions. Feedback with no
/// instructions at all skips the call and yields the empty set.
pub fn consolidate(
    feedbacks: &[FeedbackSet],
    client: &LlmClient,
    factory: &PromptFactory,
    sampling: &Sampling,
    k: usize,
    round: u32,
    warnings: &mut Vec<String>,
) -> Result<(ConsolidatedInstructions, Option<AgentExchange>)> {
    let sources: Vec<FeedbackSet> = feedbacks.iter().filter(|f| !f.instructions.is_empty()).cloned().collect();
    if sources.is_empty() {
        return Ok((ConsolidatedInstructions::empty(round), None));
    }
    let prompt = factory.consolidation(&sources, k)?;
    let request = sampling.request(prompt.clone());
    let first = client.complete(&request)?;
    let mut responses = vec![first.text];
    let mut parsed = parse_instructions(&responses[0]);
    if parsed.is_empty() {
        let retry = client.complete_fresh(&request)?;
        parsed = parse_instructions(&retry.text);
        responses.push(retry.text);
    }
    let exchange = AgentExchange {
        batch_id: None,
        prompt,
        responses,
    };
    let instructions = dedup_truncate(parsed, k);
    if instructions.is_empty() {
        let msg = format!("consolidation produced no instructions in round {round}");
        warn!("{msg}");
        warnings.push(msg);
        return Ok((ConsolidatedInstructions::empty(round), Some(exchange)));
    }
    let ids = sources.iter().map(|f| f.batch_id).collect();
    Ok((ConsolidatedInstructions::new(instructions, ids, round)?, Some(exchange)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundArtifact {
    pub round: u32,
    pub calibration_predictions: Vec<PredictionRecord>,
    pub predictor_prompts: Vec<PromptText>,
    pub error_batches: Vec<ErrorBatch>,
    pub feedbacks: Vec<FeedbackSet>,
    pub consolidated: ConsolidatedInstructions,
    pub calibration_metrics: MetricSet,
    pub critic_exchanges: Vec<AgentExchange>,
    pub consolidation_exchange: Option<AgentExchange>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoagentOutcome {
    pub rounds: Vec<RoundArtifact>,
    pub test_predictions: Vec<PredictionRecord>,
    pub test_prompts: Vec<PromptText>,
    pub test_metrics: MetricSet,
    pub final_instructions: ConsolidatedInstructions,
    pub exemplars: Vec<Exemplar>,
}

/// The three agent roles. They may share one client.
#[derive(Clone)]
pub struct Agents {
    pub predictor: LlmClient,
    pub critic: LlmClient,
    pub consolidator: LlmClient,
}

impl Agents {
    pub fn shared(client: LlmClient) -> Self {
        Agents {
            predictor: client.clone(),
            critic: client.clone(),
            consolidator: client,
        }
    }
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    rounds: BTreeMap<String, &'a MetricSet>,
    test: &'a MetricSet,
}

fn prompt_records(examples: &[CohortExample], prompts: &[PromptText]) -> Vec<PromptRecord> {
    examples
        .iter()
        .zip(prompts)
        .map(|(e, p)| PromptRecord {
            example_id: e.example_id.clone(),
            prompt_hash: p.prompt_hash.clone(),
            text: p.text.clone(),
        })
        .collect()
}

fn pass_metrics(records: &[PredictionRecord], examples: &[CohortExample]) -> Result<MetricSet> {
    metrics(&confusion(records, &truth_map(examples))?)
}

/// Runs the full loop. With a run directory, every artifact is written as
/// soon as it exists, so an aborted run leaves what it produced on disk.
pub fn run_coagent(
    cohort: &SplitCohort,
    narratives: &BTreeMap<String, Narrative>,
    config: &RunConfig,
    agents: &Agents,
    factory: &PromptFactory,
    mut out: Option<&mut RunDir>,
) -> Result<CoagentOutcome> {
    config.validate()?;
    if cohort.calibration.is_empty() {
        return Err(Error::Config("the calibration split is empty".into()));
    }
    if cohort.test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    if let Some(rd) = out.as_deref_mut() {
        rd.write_json("config.json", config)?;
    }
    let half = config.prompt.few_shot_n / 2;
    let exemplars = if half > 0 {
        sample_exemplars(&cohort.train, narratives, half, half, config.seed)?
    } else {
        Vec::new()
    };
    let prevalence = config.prevalence.or_else(|| prevalence(&cohort.train));
    let sampling = |model: &str| Sampling {
        model_id: model.to_string(),
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        top_logprobs: config.top_logprobs,
        seed: config.seed,
    };
    let mut settings = PredictorSettings {
        factory: factory.clone(),
        prompt: config.prompt.clone(),
        exemplars: exemplars.clone(),
        prevalence,
        sampling: sampling(&config.predictor_model),
        concurrency: config.concurrency,
    };
    let truth = truth_map(&cohort.calibration);
    let mut rounds = Vec::new();
    let mut current = ConsolidatedInstructions::empty(1);

    for r in 1..=config.rounds {
        let dir = format!("round-{r}");
        settings.prompt.instructions = (!current.is_empty()).then(|| current.clone());
        let pass = run_predictor(&cohort.calibration, narratives, &settings, &agents.predictor)?;
        if let Some(rd) = out.as_deref_mut() {
            rd.write_jsonl(&format!("{dir}/predictions.jsonl"), &pass.records)?;
            if config.save_prompts {
                rd.write_jsonl(&format!("{dir}/prompts.jsonl"), &prompt_records(&cohort.calibration, &pass.prompts))?;
            }
        }
        check_failure_ceiling(&pass.records, config.failure_ceiling)?;
        let calibration_metrics = pass_metrics(&pass.records, &cohort.calibration)?;
        let batches = sample_error_batches(
            &pass.records,
            &truth,
            narratives,
            config.batch_size,
            config.num_batches,
            config.seed,
            r,
        )?;
        let mut warnings = Vec::new();
        let (feedbacks, critic_exchanges, consolidated, consolidation_exchange) = if batches.is_empty() {
            (Vec::new(), Vec::new(), current.clone(), None)
        } else {
            let (feedbacks, critic_exchanges) = run_critic(
                &batches,
                &agents.critic,
                factory,
                &config.prompt.task_description,
                &sampling(&config.critic_model),
                &mut warnings,
            )?;
            let (consolidated, exchange) = consolidate(
                &feedbacks,
                &agents.consolidator,
                factory,
                &sampling(&config.consolidator_model),
                config.max_instructions,
                r,
                &mut warnings,
            )?;
            (feedbacks, critic_exchanges, consolidated, exchange)
        };
        if let Some(rd) = out.as_deref_mut() {
            rd.write_jsonl(&format!("{dir}/batches.jsonl"), &batches)?;
            rd.write_jsonl(&format!("{dir}/feedback.jsonl"), &feedbacks)?;
            rd.write_json(&format!("{dir}/instructions.json"), &consolidated)?;
            rd.write_jsonl(&format!("{dir}/critic.jsonl"), critic_exchanges.iter().chain(&consolidation_exchange))?;
            rd.write_json(&format!("{dir}/metrics.json"), &calibration_metrics)?;
            if !warnings.is_empty() {
                rd.write_json(&format!("{dir}/warnings.json"), &warnings)?;
            }
        }
        let done = batches.is_empty();
        if done {
            log::info!("round {r}: no calibration errors, skipping remaining rounds");
        }
        current = consolidated.clone();
        rounds.push(RoundArtifact {
            round: r,
            calibration_predictions: pass.records,
            predictor_prompts: pass.prompts,
            error_batches: batches,
            feedbacks,
            consolidated,
            calibration_metrics,
            critic_exchanges,
            consolidation_exchange,
            warnings,
        });
        if done {
            break;
        }
    }

    settings.prompt.instructions = (!current.is_empty()).then(|| current.clone());
    let test = run_predictor(&cohort.test, narratives, &settings, &agents.predictor)?;
    if let Some(rd) = out.as_deref_mut() {
        rd.write_jsonl("test/predictions.jsonl", &test.records)?;
        if config.save_prompts {
            rd.write_jsonl("test/prompts.jsonl", &prompt_records(&cohort.test, &test.prompts))?;
        }
    }
    check_failure_ceiling(&test.records, config.failure_ceiling)?;
    let test_metrics = pass_metrics(&test.records, &cohort.test)?;
    if let Some(rd) = out {
        let file = MetricsFile {
            rounds: rounds
                .iter()
                .map(|a| (format!("round-{}", a.round), &a.calibration_metrics))
                .collect(),
            test: &test_metrics,
        };
        rd.write_json("metrics.json", &file)?;
    }
    let outcome = CoagentOutcome {
        rounds,
        test_predictions: test.records,
        test_prompts: test.prompts,
        test_metrics,
        final_instructions: current,
        exemplars,
    };
    check_test_isolation(&outcome, cohort, narratives)?;
    Ok(outcome)
}

/// Fails if a test example reached any critic or consolidation prompt,
/// either as a batch item or through its narrative text. Narratives that
/// also belong to a non-test example are ambiguous and are not flagged.
pub fn check_test_isolation(
    outcome: &CoagentOutcome,
    cohort: &SplitCohort,
    narratives: &BTreeMap<String, Narrative>,
) -> Result<()> {
    let test_ids: BTreeSet<&str> = cohort.test.iter().map(|e| e.example_id.as_str()).collect();
    let shared: HashSet<&str> = cohort
        .train
        .iter()
        .chain(&cohort.calibration)
        .filter_map(|e| narratives.get(&e.example_id).map(|n| n.text.as_str()))
        .collect();
    let test_texts: Vec<(&str, &str)> = cohort
        .test
        .iter()
        .filter_map(|e| narratives.get(&e.example_id).map(|n| (e.example_id.as_str(), n.text.as_str())))
        .filter(|(_, t)| !shared.contains(t))
        .collect();
    for round in &outcome.rounds {
        for batch in &round.error_batches {
            if let Some(item) = batch.items.iter().find(|i| test_ids.contains(i.record.example_id.as_str())) {
                return Err(Error::Invalid(format!(
                    "test example {} appears in error batch {} of round {}",
                    item.record.example_id, batch.batch_id, round.round
                )));
            }
        }
        for ex in round.critic_exchanges.iter().chain(&round.consolidation_exchange) {
            for (id, text) in &test_texts {
                if ex.prompt.text.contains(&format!("Patient record: {text}")) {
                    return Err(Error::Invalid(format!(
                        "narrative of test example {id} appears in an agent prompt of round {}",
                        round.round
                    )));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockBackend, MockRule, MockScript};
    use crate::model::{Split, Visit};
    use chrono::NaiveDate;
    use std::sync::Arc;

    fn example(i: usize, positive: bool, split: Split) -> CohortExample {
        let pid = format!("p{i}");
        CohortExample {
            example_id: format!("e{i}"),
            patient_id: pid.clone(),
            input_visit: Visit::new(format!("v{i}"), pid, NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()),
            label: Label::from_bool(positive),
            split,
            task_id: "t".into(),
        }
    }

    fn narratives(examples: &[CohortExample]) -> BTreeMap<String, Narrative> {
        examples
            .iter()
            .map(|e| {
                let marker = if e.label.is_positive() { "flagged" } else { "plain" };
                (
                    e.example_id.clone(),
                    Narrative {
                        example_id: e.example_id.clone(),
                        text: format!("record {} {marker}", e.example_id),
                    },
                )
            })
            .collect()
    }

    fn client(rules: Vec<MockRule>) -> LlmClient {
        let backend = MockBackend::new("mock", MockScript::new(rules)).unwrap();
        LlmClient::new(Arc::new(backend)).with_retry(RetryPolicy::immediate(5))
    }

    fn settings() -> PredictorSettings {
        PredictorSettings {
            factory: PromptFactory::default(),
            prompt: PromptConfig::default(),
            exemplars: Vec::new(),
            prevalence: None,
            sampling: Sampling {
                model_id: "m".into(),
                temperature: 0.0,
                max_tokens: 64,
                top_logprobs: 5,
                seed: 0,
            },
            concurrency: 4,
        }
    }

    fn record(id: &str, predicted: Label) -> PredictionRecord {
        PredictionRecord {
            example_id: id.into(),
            predicted_label: predicted,
            p_positive: if predicted.is_positive() { 1.0 } else { 0.0 },
            reasoning: String::new(),
            prompt_hash: String::new(),
            raw_response: String::new(),
            extraction_mode: ExtractionMode::TextOnly,
            attempts: 1,
            error: None,
        }
    }

    #[test]
    fn predictor_all_yes_and_order() {
        let ex: Vec<_> = (0..10).map(|i| example(i, i % 3 == 0, Split::Calibration)).collect();
        let c = client(vec![MockRule::default_response("Looks likely.\nAnswer: Yes")]);
        let pass = run_predictor(&ex, &narratives(&ex), &settings(), &c).unwrap();
        assert_eq!(pass.records.len(), 10);
        for (r, e) in pass.records.iter().zip(&ex) {
            assert_eq!(r.example_id, e.example_id);
            assert_eq!(r.predicted_label, Label::Positive);
            assert_eq!(r.reasoning, "Looks likely.");
        }
        assert!(run_predictor(&[], &BTreeMap::new(), &settings(), &c).unwrap().records.is_empty());
    }

    #[test]
    fn predictor_follows_hash_key() {
        let ex: Vec<_> = (0..12).map(|i| example(i, false, Split::Calibration)).collect();
        let narr = narratives(&ex);
        let s = settings();
        let key: Vec<bool> = (0..12).map(|i| (i * 7) % 5 < 2).collect();
        let rules = ex
            .iter()
            .zip(&key)
            .map(|(e, &k)| {
                let p = s.factory.predictor(&narr[&e.example_id], &s.prompt, &[], None).unwrap();
                MockRule::hash(&p.prompt_hash, if k { "Answer: Yes" } else { "Answer: No" })
            })
            .collect();
        let pass = run_predictor(&ex, &narr, &s, &client(rules)).unwrap();
        let got: Vec<bool> = pass.records.iter().map(|r| r.predicted_label.is_positive()).collect();
        assert_eq!(got, key);
    }

    #[test]
    fn batches_exhaust_then_stop() {
        let truth: BTreeMap<String, Label> = (0..20).map(|i| (format!("e{i}"), Label::Positive)).collect();
        let narr: BTreeMap<String, Narrative> = (0..20)
            .map(|i| {
                let id = format!("e{i}");
                (id.clone(), Narrative { example_id: id, text: "t".into() })
            })
            .collect();
        let recs: Vec<_> = (0..20)
            .map(|i| record(&format!("e{i}"), Label::from_bool(i >= 10)))
            .collect();
        let sizes = |b, m| -> Vec<usize> {
            sample_error_batches(&recs, &truth, &narr, b, m, 3, 1)
                .unwrap()
                .iter()
                .map(|x| x.items.len())
                .collect()
        };
        assert_eq!(sizes(4, 3), vec![4, 4, 2]);
        assert_eq!(sizes(3, 2), vec![3, 3]);
        assert_eq!(sizes(20, 1), vec![10]);
        let all_right: Vec<_> = (0..20).map(|i| record(&format!("e{i}"), Label::Positive)).collect();
        assert!(sample_error_batches(&all_right, &truth, &narr, 4, 3, 3, 1).unwrap().is_empty());
        let batches = sample_error_batches(&recs, &truth, &narr, 4, 3, 3, 1).unwrap();
        let mut ids: Vec<&str> = batches.iter().flat_map(|b| &b.items).map(|i| i.record.example_id.as_str()).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        for b in &batches {
            b.verify().unwrap();
        }
    }

    #[test]
    fn instruction_parsing() {
        let text = "Some analysis.\nINSTRUCTION: weigh renal codes\n2. INSTRUCTION: 2. check statins\n- instruction: Look at age\nINSTRUCTION:   \nplain line";
        assert_eq!(
            parse_instructions(text),
            vec!["weigh renal codes", "check statins", "Look at age"]
        );
        assert!(parse_instructions("no prefix at all").is_empty());
    }

    #[test]
    fn dedup_and_cap() {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(dedup_truncate(v(&["A b", "a  B", "c"]), 8), v(&["A b", "c"]));
        assert_eq!(dedup_truncate(v(&["1", "2", "3", "4"]), 2), v(&["1", "2"]));
    }

    #[test]
    fn critic_retries_then_gives_up() {
        let batch = ErrorBatch {
            batch_id: 1,
            items: vec![ErrorItem {
                record: record("e1", Label::Negative),
                true_label: Label::Positive,
                narrative: "n".into(),
            }],
        };
        let s = settings().sampling;
        let mut warnings = Vec::new();
        let prose = client(vec![MockRule::default_response("I think the predictor was wrong.")]);
        let (fb, ex) = run_critic(std::slice::from_ref(&batch), &prose, &PromptFactory::default(), "task", &s, &mut warnings).unwrap();
        assert!(fb[0].instructions.is_empty());
        assert_eq!(ex[0].responses.len(), 2);
        assert_eq!(warnings.len(), 1);

        let good = client(vec![MockRule::default_response("INSTRUCTION: a\nINSTRUCTION: b\nINSTRUCTION: c")]);
        let two = [batch.clone(), ErrorBatch { batch_id: 2, ..batch.clone() }];
        let (fb, _) = run_critic(&two, &good, &PromptFactory::default(), "task", &s, &mut warnings).unwrap();
        assert_eq!(fb.iter().map(|f| f.batch_id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(fb[0].instructions.len(), 3);

        let down = client(vec![MockRule::default_response("x").failing_always()]);
        assert!(run_critic(&[batch], &down, &PromptFactory::default(), "task", &s, &mut warnings).is_err());
    }

    #[test]
    fn consolidation_rules() {
        let s = settings().sampling;
        let f = PromptFactory::default();
        let mut w = Vec::new();
        let fb = vec![
            FeedbackSet { batch_id: 1, instructions: (0..4).map(|i| format!("s{i}")).collect() },
            FeedbackSet { batch_id: 2, instructions: (4..7).map(|i| format!("s{i}")).collect() },
        ];
        let four = client(vec![MockRule::default_response("INSTRUCTION: a\nINSTRUCTION: b\nINSTRUCTION: c\nINSTRUCTION: d")]);
        let (c, _) = consolidate(&fb, &four, &f, &s, 8, 1, &mut w).unwrap();
        assert_eq!(c.instructions.len(), 4);
        assert_eq!(c.source_batch_ids, vec![1, 2]);
        let many = client(vec![MockRule::default_response(
            &(0..11).map(|i| format!("INSTRUCTION: i{i}")).collect::<Vec<_>>().join("\n"),
        )]);
        assert_eq!(consolidate(&fb, &many, &f, &s, 8, 1, &mut w).unwrap().0.instructions.len(), 8);
        let dup = client(vec![MockRule::default_response("INSTRUCTION: same\nINSTRUCTION: Same")]);
        assert_eq!(consolidate(&fb, &dup, &f, &s, 8, 1, &mut w).unwrap().0.instructions, vec!["same"]);
        let empty = vec![FeedbackSet { batch_id: 1, instructions: vec![] }];
        let (c, ex) = consolidate(&empty, &four, &f, &s, 8, 3, &mut w).unwrap();
        assert!(c.is_empty() && ex.is_none());
        assert_eq!(c.round, 3);
    }

    fn loop_fixture(n_cal: usize, n_test: usize) -> (SplitCohort, BTreeMap<String, Narrative>) {
        let train: Vec<_> = (0..10).map(|i| example(i, i % 2 == 0, Split::Train)).collect();
        let cal: Vec<_> = (0..n_cal).map(|i| example(100 + i, i % 10 < 3, Split::Calibration)).collect();
        let test: Vec<_> = (0..n_test).map(|i| example(500 + i, i % 10 < 3, Split::Test)).collect();
        let all: Vec<_> = train.iter().chain(&cal).chain(&test).cloned().collect();
        (SplitCohort { train, calibration: cal, test }, narratives(&all))
    }

    fn learner_rules() -> Vec<MockRule> {
        vec![
            MockRule::regex("^You are a critic", "INSTRUCTION: Treat flagged records as positive."),
            MockRule::regex("^Below are", "INSTRUCTION: Treat flagged records as positive."),
            MockRule::regex(r"(?s)Treat flagged.*Patient record: [^\n]*flagged", "Flagged.\nAnswer: Yes"),
            MockRule::default_response("Answer: No"),
        ]
    }

    #[test]
    fn loop_learns_planted_instruction() {
        let (cohort, narr) = loop_fixture(20, 10);
        let config = RunConfig { rounds: 2, ..Default::default() };
        let agents = Agents::shared(client(learner_rules()));
        let out = run_coagent(&cohort, &narr, &config, &agents, &PromptFactory::default(), None).unwrap();
        assert_eq!(out.rounds.len(), 2);
        assert_eq!(out.rounds[0].calibration_metrics.accuracy, Some(0.7));
        assert_eq!(out.rounds[1].calibration_metrics.accuracy, Some(1.0));
        assert_eq!(out.test_metrics.accuracy, Some(1.0));
        for p in &out.rounds[1].predictor_prompts {
            assert!(p.text.contains("Treat flagged records as positive."));
        }
        assert!(out.rounds[0].predictor_prompts.iter().all(|p| !p.text.contains("Treat flagged")));
        assert_eq!(out.final_instructions.round, 1);
    }

    #[test]
    fn zero_errors_short_circuit() {
        let (cohort, narr) = loop_fixture(10, 10);
        let rules = vec![
            MockRule::regex("Patient record: [^\n]*flagged", "Answer: Yes"),
            MockRule::default_response("Answer: No"),
        ];
        let config = RunConfig { rounds: 3, ..Default::default() };
        let out = run_coagent(&cohort, &narr, &config, &Agents::shared(client(rules)), &PromptFactory::default(), None)
            .unwrap();
        assert_eq!(out.rounds.len(), 1);
        assert!(out.rounds[0].error_batches.is_empty());
        assert!(out.final_instructions.is_empty());
    }

    #[test]
    fn ceiling_aborts_with_partial_artifacts() {
        let (cohort, narr) = loop_fixture(20, 10);
        let rules = vec![
            MockRule::regex("e10[0-1]\\b", "x").failing_always(),
            MockRule::default_response("Answer: No"),
        ];
        let dir = tempfile::tempdir().unwrap();
        let mut rd = RunDir::create(dir.path()).unwrap();
        let err = run_coagent(
            &cohort,
            &narr,
            &RunConfig::default(),
            &Agents::shared(client(rules)),
            &PromptFactory::default(),
            Some(&mut rd),
        )
        .unwrap_err();
        assert!(matches!(err, Error::FailureCeiling { failed: 2, total: 20, .. }));
        let recs: Vec<PredictionRecord> = crate::io::read_jsonl(&rd.path("round-1/predictions.jsonl")).unwrap();
        assert_eq!(recs.iter().filter(|r| r.is_failed()).count(), 2);
        assert!(recs.iter().filter(|r| r.is_failed()).all(|r| r.attempts == 5));
    }

    #[test]
    fn empty_calibration_is_config_error() {
        let (mut cohort, narr) = loop_fixture(10, 10);
        cohort.calibration.clear();
        let r = run_coagent(
            &cohort,
            &narr,
            &RunConfig::default(),
            &Agents::shared(client(learner_rules())),
            &PromptFactory::default(),
            None,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn isolation_check_catches_leak() {
        let (cohort, narr) = loop_fixture(20, 10);
        let agents = Agents::shared(client(learner_rules()));
        let mut out =
            run_coagent(&cohort, &narr, &RunConfig::default(), &agents, &PromptFactory::default(), None).unwrap();
        check_test_isolation(&out, &cohort, &narr).unwrap();
        let leaked = &cohort.test[0];
        out.rounds[0].error_batches[0].items[0].record.example_id = leaked.example_id.clone();
        assert!(check_test_isolation(&out, &cohort, &narr).is_err());
    }
}
