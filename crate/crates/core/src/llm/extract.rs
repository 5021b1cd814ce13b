use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::CompletionResponse;
use crate::model::{ExtractionMode, Label};

/// Offset below 0.5 used for unparseable responses, so they stay negative
/// under the default threshold and remain identifiable in reports.
pub const FALLBACK_EPSILON: f64 = 1e-6;

static ANSWER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)^[\s*#_>"'`-]*answer\s*[*_]*\s*:"#).unwrap());
static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub label: Label,
    pub p_positive: f64,
    pub p_negative: f64,
    pub extraction_mode: ExtractionMode,
}

/// Splits a response into the reasoning text and the final `Answer:` line.
pub fn split_reasoning(text: &str) -> (String, Option<String>) {
    let lines: Vec<&str> = text.lines().collect();
    match lines.iter().rposition(|l| ANSWER_LINE.is_match(l)) {
        Some(i) => (lines[..i].join("\n").trim().to_string(), Some(lines[i].trim().to_string())),
        None => (text.trim().to_string(), None),
    }
}

fn word_label(s: &str) -> Option<Label> {
    YES_NO.find_iter(s).last().map(|m| Label::from_bool(m.as_str().eq_ignore_ascii_case("yes")))
}

fn log_sum_exp(values: &[f64]) -> Option<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max == f64::NEG_INFINITY {
        return None;
    }
    Some(max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Normalizes Yes/No probability mass from the answer-position top tokens.
///
/// Casing and whitespace variants of each answer are summed. When only one
/// answer is present, the other is assigned the smallest probability
/// observed in the list.
fn from_logprobs(logprobs: &[(String, f64)]) -> Option<(f64, f64)> {
    let mut yes = Vec::new();
    let mut no = Vec::new();
    for (tok, lp) in logprobs {
        match tok.trim().to_ascii_lowercase().as_str() {
            "yes" => yes.push(*lp),
            "no" => no.push(*lp),
            _ => {}
        }
    }
    let floor = logprobs.iter().map(|(_, lp)| *lp).fold(f64::INFINITY, f64::min);
    let (ly, ln) = match (log_sum_exp(&yes), log_sum_exp(&no)) {
        (None, None) => return None,
        (Some(y), Some(n)) => (y, n),
        (Some(y), None) => (y, floor),
        (None, Some(n)) => (floor, n),
    };
    let m = ly.max(ln);
    let (ey, en) = ((ly - m).exp(), (ln - m).exp());
    let z = ey + en;
    Some((ey / z, en / z))
}

/// Total: every response yields an answer, falling back to a flagged
/// low-confidence negative when no Yes/No can be found.
pub fn extract_answer(response: &CompletionResponse) -> ExtractedAnswer {
    if let Some((p_pos, p_neg)) = from_logprobs(&response.answer_token_logprobs) {
        return ExtractedAnswer {
            label: Label::from_probability(p_pos),
            p_positive: p_pos,
            p_negative: p_neg,
            extraction_mode: ExtractionMode::Logprob,
        };
    }
    let (_, answer_line) = split_reasoning(&response.text);
    let detected = answer_line
        .as_deref()
        .and_then(|l| word_label(&l[ANSWER_LINE.find(l).map_or(0, |m| m.end())..]))
        .or_else(|| word_label(&response.text));
    match detected {
        Some(label) => {
            let p = if label.is_positive() { 1.0 } else { 0.0 };
            ExtractedAnswer {
                label,
                p_positive: p,
                p_negative: 1.0 - p,
                extraction_mode: ExtractionMode::TextOnly,
            }
        }
        None => ExtractedAnswer {
            label: Label::Negative,
            p_positive: 0.5 - FALLBACK_EPSILON,
            p_negative: 0.5 + FALLBACK_EPSILON,
            extraction_mode: ExtractionMode::Fallback,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn resp(text: &str, lps: &[(&str, f64)]) -> CompletionResponse {
        CompletionResponse {
            text: text.into(),
            answer_token_logprobs: lps.iter().map(|(t, l)| (t.to_string(), *l)).collect(),
            backend_id: "t".into(),
            cached: false,
            attempts: 1,
        }
    }

    #[test]
    fn normalization_fixture() {
        let a = extract_answer(&resp("Answer: Yes", &[("Yes", -0.05), ("No", -3.0)]));
        let oracle = (-0.05f64).exp() / ((-0.05f64).exp() + (-3.0f64).exp());
        assert!((a.p_positive - oracle).abs() < 1e-15);
        assert!((a.p_positive - 0.9503).abs() < 5e-5);
        assert_eq!(a.extraction_mode, ExtractionMode::Logprob);
        assert_eq!(a.label, Label::Positive);
    }

    #[test]
    fn symmetric_logprobs() {
        let a = extract_answer(&resp("Answer: No", &[("Yes", -0.7), ("No", -0.7)]));
        assert_eq!(a.p_positive, 0.5);
        assert_eq!(a.label, Label::Positive);
    }

    #[test]
    fn variants_are_summed() {
        let a = extract_answer(&resp("", &[("Yes", -1.0), (" yes", -1.0), ("No", -1.0), ("maybe", -0.5)]));
        assert!((a.p_positive - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_sided_uses_floor() {
        let a = extract_answer(&resp("", &[("Yes", -0.01), ("Y", -5.0), ("The", -7.0)]));
        let oracle = (-0.01f64).exp() / ((-0.01f64).exp() + (-7.0f64).exp());
        assert!((a.p_positive - oracle).abs() < 1e-12);
    }

    #[test]
    fn text_only() {
        let a = extract_answer(&resp("Reasoning here.\nAnswer: No", &[]));
        assert_eq!(a.label, Label::Negative);
        assert_eq!(a.p_positive, 0.0);
        assert_eq!(a.extraction_mode, ExtractionMode::TextOnly);
        let b = extract_answer(&resp("I think yes overall", &[]));
        assert_eq!(b.label, Label::Positive);
        let c = extract_answer(&resp("**Answer:** Yes", &[]));
        assert_eq!(c.p_positive, 1.0);
    }

    #[test]
    fn fallback() {
        let a = extract_answer(&resp("I cannot determine this.", &[]));
        assert_eq!(a.extraction_mode, ExtractionMode::Fallback);
        assert_eq!(a.label, Label::Negative);
        assert!(a.p_positive < 0.5);
    }

    #[test]
    fn reasoning_split() {
        let (r, a) = split_reasoning("Step 1.\nStep 2.\nAnswer: Yes\n");
        assert_eq!(r, "Step 1.\nStep 2.");
        assert_eq!(a.as_deref(), Some("Answer: Yes"));
        let (r, a) = split_reasoning("no answer line");
        assert_eq!(r, "no answer line");
        assert!(a.is_none());
    }

    proptest! {
        #[test]
        fn extraction_is_total(text in ".{0,200}") {
            let a = extract_answer(&resp(&text, &[]));
            prop_assert!((0.0..=1.0).contains(&a.p_positive));
        }

        #[test]
        fn mass_sums_to_one(ly in -50.0f64..0.0, ln in -50.0f64..0.0) {
            let a = extract_answer(&resp("", &[("Yes", ly), ("No", ln)]));
            prop_assert!((a.p_positive + a.p_negative - 1.0).abs() < 1e-12);
        }
    }
}
