//! Prompt construction for the predictor, critic and consolidation roles.
//!
//! Templates are plain text with `{name}` placeholders (`{{` and `}}` escape
//! literal braces). A template is split into blocks at blank lines; a block
//! whose placeholders all render empty and that has no literal text is
//! dropped together with its separator. Optional clauses therefore appear or
//! vanish without disturbing any other byte of the prompt.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CohortExample, ConsolidatedInstructions, ErrorBatch, FeedbackSet, Label, Narrative, Split};
use crate::util::{sha256_hex, stream_rng};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// A parsed prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    version: String,
    blocks: Vec<Vec<Piece>>,
}

impl Template {
    pub fn parse(version: &str, text: &str, allowed: &[&str]) -> Result<Self> {
        let normalized = text.replace("\r\n", "\n");
        let mut blocks = Vec::new();
        for raw in normalized.trim_matches('\n').split("\n\n") {
            let block = raw.trim_matches('\n');
            if block.is_empty() {
                continue;
            }
            blocks.push(Self::parse_block(block, allowed)?);
        }
        Ok(Template {
            version: version.to_string(),
            blocks,
        })
    }

    fn parse_block(block: &str, allowed: &[&str]) -> Result<Vec<Piece>> {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut chars = block.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                            _ => return Err(Error::Template(format!("malformed placeholder near {{{name}"))),
                        }
                    }
                    if !allowed.contains(&name.as_str()) {
                        return Err(Error::Template(format!("unknown placeholder {{{name}}}")));
                    }
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(name));
                }
                '}' => return Err(Error::Template("unmatched '}'".into())),
                _ => text.push(c),
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Ok(pieces)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn render(&self, values: &HashMap<&str, String>) -> String {
        let mut out: Vec<String> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let has_text = block.iter().any(|p| matches!(p, Piece::Text(t) if !t.trim().is_empty()));
            let mut rendered = String::new();
            let mut any_value = false;
            for piece in block {
                match piece {
                    Piece::Text(t) => rendered.push_str(t),
                    Piece::Slot(name) => {
                        let v = values.get(name.as_str()).map(String::as_str).unwrap_or("");
                        any_value |= !v.is_empty();
                        rendered.push_str(v);
                    }
                }
            }
            if has_text || any_value {
                out.push(rendered);
            }
        }
        out.join("\n\n")
    }
}

pub const PREDICTOR_SLOTS: &[&str] = &[
    "task_description",
    "prevalence_clause",
    "prevalence_pct",
    "factor_clause",
    "cot_clause",
    "instructions",
    "exemplars",
    "narrative",
    "answer_format",
];
pub const CRITIC_SLOTS: &[&str] = &["task_description", "cases", "case_count"];
pub const CONSOLIDATION_SLOTS: &[&str] = &["feedback", "feedback_count", "max_instructions"];

pub const DEFAULT_PREDICTOR_TEMPLATE: &str = "{task_description}

{prevalence_clause}

{factor_clause}

{cot_clause}

{instructions}

{exemplars}

{narrative}

{answer_format}
";

pub const DEFAULT_CRITIC_TEMPLATE: &str = "You are a critic agent reviewing the output of a predictor agent. The predictor made the predictions below for the following task, and each of them disagrees with the ground truth.
Task: {task_description}

{cases}

Analyze the inconsistencies between the predictions and the ground-truth labels across these {case_count} cases. Identify issues or biases in the predictor agent's reasoning process, factors it overlooked, and relationships between medical concepts it misjudged. Then give specific recommendations that would help the predictor reason correctly on similar patients.

Output your recommendations as numbered instructions, one per line, each line prefixed with \"INSTRUCTION:\".
";

pub const DEFAULT_CONSOLIDATION_TEMPLATE: &str = "Below are {feedback_count} sets of instructional feedback written by a critic agent after reviewing different batches of wrong predictions made by a predictor agent.

{feedback}

Consolidate these sets into the most important and recurring insights: common biases or errors in the reasoning process, additional factors worth considering, and relationships between medical concepts. Merge duplicates and drop instructions that apply to a single case only.

Output at most {max_instructions} numbered instructions, one per line, each line prefixed with \"INSTRUCTION:\".
";

pub const DEFAULT_TASK_DESCRIPTION: &str = "You are a clinical prediction assistant. Based on the patient's current hospital visit, predict whether the patient will have the target condition at their next visit.";

pub const DEFAULT_ANSWER_FORMAT: &str = "Explain your reasoning first, then end your response with a final line that is exactly \"Answer: Yes\" or \"Answer: No\".";

pub const PREVALENCE_CLAUSE: &str = "Prevalence information: in this patient population, {prevalence_pct} of patients are positive for the target condition.";
pub const FACTOR_CLAUSE: &str = "Consider the interactions and dependencies among different medical factors, such as diseases, medications, and procedures, rather than judging each factor in isolation.";
pub const COT_CLAUSE: &str = "Think step by step: explain your reasoning one step at a time before giving the final answer.";

/// Strategy switches and fixed text for predictor prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub use_cot: bool,
    pub use_factor_interactions: bool,
    pub use_prevalence: bool,
    /// Total exemplars, split evenly between the classes.
    pub few_shot_n: usize,
    pub instructions: Option<ConsolidatedInstructions>,
    pub task_description: String,
    pub answer_format_clause: String,
    /// Render exemplar reasoning when an exemplar carries one.
    pub exemplar_reasoning: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            use_cot: false,
            use_factor_interactions: false,
            use_prevalence: false,
            few_shot_n: 0,
            instructions: None,
            task_description: DEFAULT_TASK_DESCRIPTION.into(),
            answer_format_clause: DEFAULT_ANSWER_FORMAT.into(),
            exemplar_reasoning: false,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.few_shot_n.is_multiple_of(2) {
            return Err(Error::Invalid(format!("few_shot_n must be even, got {}", self.few_shot_n)));
        }
        if self.task_description.trim().is_empty() {
            return Err(Error::Invalid("task_description must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub narrative: Narrative,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub prompt_hash: String,
}

impl PromptText {
    pub fn new(template_version: &str, text: String) -> Self {
        let prompt_hash = sha256_hex(&[template_version.as_bytes(), text.as_bytes()]);
        PromptText { text, prompt_hash }
    }
}

/// Draws `n_pos` positive and `n_neg` negative exemplars from the train split.
/// Presentation alternates positive/negative, starting with a positive.
pub fn sample_exemplars(
    train: &[CohortExample],
    narratives: &BTreeMap<String, Narrative>,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Vec<Exemplar>> {
    if let Some(bad) = train.iter().find(|e| e.split != Split::Train) {
        return Err(Error::Invalid(format!(
            "exemplar pool contains {} from the {:?} split",
            bad.example_id, bad.split
        )));
    }
    let mut rng = stream_rng(seed, "exemplars");
    let mut draw = |label: Label, k: usize| -> Result<Vec<Exemplar>> {
        let pool: Vec<&CohortExample> = train.iter().filter(|e| e.label == label).collect();
        if pool.len() < k {
            return Err(Error::InsufficientClass {
                class: label,
                needed: k,
                available: pool.len(),
            });
        }
        rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| {
                let e = pool[i];
                let narrative = narratives
                    .get(&e.example_id)
                    .cloned()
                    .ok_or_else(|| Error::UnknownExample(e.example_id.clone()))?;
                Ok(Exemplar {
                    narrative,
                    label,
                    reasoning: None,
                })
            })
            .collect()
    };
    let pos = draw(Label::Positive, n_pos)?;
    let neg = draw(Label::Negative, n_neg)?;
    let mut out = Vec::with_capacity(n_pos + n_neg);
    let (mut p, mut n) = (pos.into_iter(), neg.into_iter());
    loop {
        match (p.next(), n.next()) {
            (None, None) => break,
            (a, b) => out.extend(a.into_iter().chain(b)),
        }
    }
    Ok(out)
}

pub fn format_prevalence(p: f64) -> String {
    format!("{:.1}%", p * 100.0)
}

fn render_instructions(instr: &ConsolidatedInstructions) -> String {
    if instr.is_empty() {
        return String::new();
    }
    let mut s = String::from("Instructions from a review of previous errors:");
    for line in &instr.instructions {
        s.push_str("\n- ");
        s.push_str(line);
    }
    s
}

fn render_exemplars(exemplars: &[Exemplar], with_reasoning: bool) -> String {
    exemplars
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut s = format!("Example {}:\nPatient record: {}\n", i + 1, ex.narrative.text);
            if let (true, Some(r)) = (with_reasoning, &ex.reasoning) {
                s.push_str(&format!("Reasoning: {r}\n"));
            }
            s.push_str(&format!("Answer: {}", ex.label.answer_word()));
            s
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Builds predictor prompts from a template; see [`PromptFactory::predictor`].
#[derive(Debug, Clone)]
pub struct PromptFactory {
    predictor: Template,
    critic: Template,
    consolidation: Template,
}

impl Default for PromptFactory {
    fn default() -> Self {
        PromptFactory {
            predictor: Template::parse("predictor-v1", DEFAULT_PREDICTOR_TEMPLATE, PREDICTOR_SLOTS).unwrap(),
            critic: Template::parse("critic-v1", DEFAULT_CRITIC_TEMPLATE, CRITIC_SLOTS).unwrap(),
            consolidation: Template::parse("consolidation-v1", DEFAULT_CONSOLIDATION_TEMPLATE, CONSOLIDATION_SLOTS)
                .unwrap(),
        }
    }
}

impl PromptFactory {
    /// Replaces any of the default templates. Custom templates are versioned
    /// by the hash of their text.
    pub fn with_templates(predictor: Option<&str>, critic: Option<&str>, consolidation: Option<&str>) -> Result<Self> {
        let mut f = PromptFactory::default();
        let version = |kind: &str, text: &str| format!("{kind}-custom-{}", &sha256_hex(&[text.as_bytes()])[..16]);
        if let Some(t) = predictor {
            f.predictor = Template::parse(&version("predictor", t), t, PREDICTOR_SLOTS)?;
        }
        if let Some(t) = critic {
            f.critic = Template::parse(&version("critic", t), t, CRITIC_SLOTS)?;
        }
        if let Some(t) = consolidation {
            f.consolidation = Template::parse(&version("consolidation", t), t, CONSOLIDATION_SLOTS)?;
        }
        Ok(f)
    }

    /// Clause order is fixed: task, prevalence, factor interactions,
    /// chain-of-thought, instructions, exemplars, query, answer format.
    pub fn predictor(
        &self,
        narrative: &Narrative,
        config: &PromptConfig,
        exemplars: &[Exemplar],
        prevalence: Option<f64>,
    ) -> Result<PromptText> {
        config.validate()?;
        let mut v: HashMap<&str, String> = HashMap::new();
        v.insert("task_description", config.task_description.clone());
        if config.use_prevalence {
            let p = prevalence
                .filter(|p| (0.0..=1.0).contains(p))
                .ok_or_else(|| Error::Invalid("use_prevalence needs a prevalence in [0, 1]".into()))?;
            let pct = format_prevalence(p);
            v.insert("prevalence_clause", PREVALENCE_CLAUSE.replace("{prevalence_pct}", &pct));
            v.insert("prevalence_pct", pct);
        }
        if config.use_factor_interactions {
            v.insert("factor_clause", FACTOR_CLAUSE.into());
        }
        if config.use_cot {
            v.insert("cot_clause", COT_CLAUSE.into());
        }
        if let Some(instr) = &config.instructions {
            v.insert("instructions", render_instructions(instr));
        }
        if !exemplars.is_empty() {
            v.insert(
                "exemplars",
                format!(
                    "Here are some example patients with known outcomes:\n\n{}",
                    render_exemplars(exemplars, config.exemplar_reasoning)
                ),
            );
        }
        v.insert("narrative", format!("Patient record: {}", narrative.text));
        v.insert("answer_format", config.answer_format_clause.clone());
        Ok(PromptText::new(self.predictor.version(), self.predictor.render(&v)))
    }

    pub fn critic(&self, batch: &ErrorBatch, task_description: &str) -> Result<PromptText> {
        batch.verify()?;
        let cases = batch
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let reasoning = if item.record.reasoning.trim().is_empty() {
                    "(no reasoning provided)"
                } else {
                    item.record.reasoning.trim()
                };
                format!(
                    "Case {}:\nPatient record: {}\nPredicted: {}\nPredictor reasoning: {}\nGround truth: {}",
                    i + 1,
                    item.narrative,
                    item.record.predicted_label.answer_word(),
                    reasoning,
                    item.true_label.answer_word()
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let mut v: HashMap<&str, String> = HashMap::new();
        v.insert("task_description", task_description.to_string());
        v.insert("cases", cases);
        v.insert("case_count", batch.items.len().to_string());
        Ok(PromptText::new(self.critic.version(), self.critic.render(&v)))
    }

    pub fn consolidation(&self, feedbacks: &[FeedbackSet], max_instructions: usize) -> Result<PromptText> {
        if feedbacks.is_empty() {
            return Err(Error::Invalid("consolidation needs at least one feedback set".into()));
        }
        let body = feedbacks
            .iter()
            .enumerate()
            .map(|(i, fb)| {
                let mut s = format!("Feedback set {} (batch {}):", i + 1, fb.batch_id);
                for (j, ins) in fb.instructions.iter().enumerate() {
                    s.push_str(&format!("\n{}. {}", j + 1, ins));
                }
                s
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let mut v: HashMap<&str, String> = HashMap::new();
        v.insert("feedback", body);
        v.insert("feedback_count", feedbacks.len().to_string());
        v.insert("max_instructions", max_instructions.to_string());
        Ok(PromptText::new(self.consolidation.version(), self.consolidation.render(&v)))
    }
}

pub fn build_predictor_prompt(
    narrative: &Narrative,
    config: &PromptConfig,
    exemplars: &[Exemplar],
    prevalence: Option<f64>,
) -> Result<PromptText> {
    PromptFactory::default().predictor(narrative, config, exemplars, prevalence)
}

pub fn build_critic_prompt(batch: &ErrorBatch, task_description: &str) -> Result<PromptText> {
    PromptFactory::default().critic(batch, task_description)
}

pub fn build_consolidation_prompt(feedbacks: &[FeedbackSet], max_instructions: usize) -> Result<PromptText> {
    PromptFactory::default().consolidation(feedbacks, max_instructions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ErrorItem, ExtractionMode, PredictionRecord, Visit};

    fn narr(id: &str, text: &str) -> Narrative {
        Narrative {
            example_id: id.into(),
            text: text.into(),
        }
    }

    fn record(id: &str, predicted: Label, reasoning: &str) -> PredictionRecord {
        PredictionRecord {
            example_id: id.into(),
            predicted_label: predicted,
            p_positive: if predicted.is_positive() { 1.0 } else { 0.0 },
            reasoning: reasoning.into(),
            prompt_hash: "h".into(),
            raw_response: String::new(),
            extraction_mode: ExtractionMode::TextOnly,
            attempts: 1,
            error: None,
        }
    }

    fn batch(n: usize) -> ErrorBatch {
        ErrorBatch {
            batch_id: 0,
            items: (0..n)
                .map(|i| ErrorItem {
                    record: record(&format!("e{i}"), Label::Negative, "looked fine"),
                    true_label: Label::Positive,
                    narrative: format!("narrative {i}"),
                })
                .collect(),
        }
    }

    #[test]
    fn template_rejects_unknown_slot() {
        assert!(Template::parse("v", "{nope}", PREDICTOR_SLOTS).is_err());
        assert!(Template::parse("v", "{narrative", PREDICTOR_SLOTS).is_err());
        let t = Template::parse("v", "{{literal}} {narrative}", PREDICTOR_SLOTS).unwrap();
        let mut v = HashMap::new();
        v.insert("narrative", "x".to_string());
        assert_eq!(t.render(&v), "{literal} x");
    }

    #[test]
    fn pure_zero_shot() {
        let cfg = PromptConfig::default();
        let p = build_predictor_prompt(&narr("e", "Diagnoses: x."), &cfg, &[], None).unwrap();
        assert_eq!(
            p.text,
            format!("{}\n\nPatient record: Diagnoses: x.\n\n{}", cfg.task_description, cfg.answer_format_clause)
        );
    }

    #[test]
    fn prevalence_rendering() {
        let cfg = PromptConfig {
            use_prevalence: true,
            ..Default::default()
        };
        let p = build_predictor_prompt(&narr("e", "n"), &cfg, &[], Some(0.214)).unwrap();
        assert!(p.text.contains("21.4%"));
        assert!(build_predictor_prompt(&narr("e", "n"), &cfg, &[], None).is_err());
    }

    #[test]
    fn instructions_before_exemplars() {
        let cfg = PromptConfig {
            instructions: Some(ConsolidatedInstructions::new(vec!["Check lipids.".into(), "Weigh statins.".into()], vec![0], 1).unwrap()),
            ..Default::default()
        };
        let ex = vec![Exemplar {
            narrative: narr("t", "train narrative"),
            label: Label::Positive,
            reasoning: None,
        }];
        let p = build_predictor_prompt(&narr("e", "query"), &cfg, &ex, None).unwrap();
        let a = p.text.find("Check lipids.").unwrap();
        let b = p.text.find("Weigh statins.").unwrap();
        let c = p.text.find("train narrative").unwrap();
        assert!(a < c && b < c);
    }

    #[test]
    fn odd_few_shot_rejected() {
        let cfg = PromptConfig {
            few_shot_n: 3,
            ..Default::default()
        };
        assert!(build_predictor_prompt(&narr("e", "n"), &cfg, &[], None).is_err());
    }

    #[test]
    fn exemplar_sampling() {
        let mut train = Vec::new();
        let mut narratives = BTreeMap::new();
        for i in 0..10 {
            let id = format!("t{i}");
            narratives.insert(id.clone(), narr(&id, &format!("n{i}")));
            train.push(CohortExample {
                example_id: id,
                patient_id: format!("p{i}"),
                input_visit: Visit::new("v", format!("p{i}"), chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()),
                label: Label::from_bool(i < 4),
                split: Split::Train,
                task_id: "t".into(),
            });
        }
        let ex = sample_exemplars(&train, &narratives, 3, 3, 1).unwrap();
        let labels: Vec<Label> = ex.iter().map(|e| e.label).collect();
        use Label::*;
        assert_eq!(labels, vec![Positive, Negative, Positive, Negative, Positive, Negative]);
        assert!(sample_exemplars(&train, &narratives, 0, 0, 1).unwrap().is_empty());
        let few_pos: Vec<_> = train.iter().filter(|e| !e.label.is_positive() || e.example_id == "t0" || e.example_id == "t1").cloned().collect();
        let err = sample_exemplars(&few_pos, &narratives, 3, 3, 1).unwrap_err();
        assert!(err.to_string().contains("insufficient positive"));
        train[0].split = Split::Test;
        assert!(sample_exemplars(&train, &narratives, 1, 1, 1).is_err());
    }

    #[test]
    fn critic_prompt_cases() {
        let p = build_critic_prompt(&batch(4), "task").unwrap();
        assert_eq!(p.text.matches("\nGround truth: ").count(), 4);
        assert_eq!(p.text.matches("Case ").count(), 4);
        assert!(p.text.contains("INSTRUCTION:"));
        let one = build_critic_prompt(&batch(1), "task").unwrap();
        assert_eq!(one.text.matches("Case ").count(), 1);

        let mut b = batch(1);
        b.items[0].record.reasoning = String::new();
        assert!(build_critic_prompt(&b, "task").unwrap().text.contains("(no reasoning provided)"));

        b.items[0].true_label = Label::Negative;
        assert!(build_critic_prompt(&b, "task").is_err());
    }

    #[test]
    fn consolidation_prompt() {
        let sets: Vec<FeedbackSet> = [2usize, 3, 2]
            .iter()
            .enumerate()
            .map(|(b, &n)| FeedbackSet {
                batch_id: b as u32,
                instructions: (0..n).map(|i| format!("source-{b}-{i}")).collect(),
            })
            .collect();
        let p = build_consolidation_prompt(&sets, 8).unwrap();
        assert_eq!(p.text.matches("source-").count(), 7);
        assert!(build_consolidation_prompt(&sets[..1], 8).is_ok());
        assert!(build_consolidation_prompt(&sets, 5).unwrap().text.contains("at most 5"));
        assert!(build_consolidation_prompt(&[], 5).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let cfg = PromptConfig::default();
        let a = build_predictor_prompt(&narr("e", "n"), &cfg, &[], None).unwrap();
        let b = build_predictor_prompt(&narr("e", "n"), &cfg, &[], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prompt_hash.len(), 64);
    }
}
