use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ehr_coagent::baselines::{self, featurize, BaselineHyper, BaselineKind, TrainedModel};
use ehr_coagent::cohort::{split_cohort, stratified_sample};
use ehr_coagent::eval::{metrics as compute_metrics, ConfusionMatrix};
use ehr_coagent::llm::{extract_answer as extract, CompletionResponse};
use ehr_coagent::model::{prevalence, CohortExample, Label, Narrative};
use ehr_coagent::narrative::{load_vocab, serialize_narrative, NarrativeTemplate};
use ehr_coagent::prompt::{Exemplar, PromptConfig, PromptFactory};
use ehr_coagent::synth::{self, SynthSpec};

create_exception!(ehr_coagent_py, EhrCoagentError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    EhrCoagentError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn opt_from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), from_py)
}

/// A list of labeled cohort examples.
#[pyclass(module = "ehr_coagent_py", skip_from_py_object)]
#[derive(Clone)]
struct Cohort {
    examples: Vec<CohortExample>,
}

#[pymethods]
impl Cohort {
    /// Reads a cohort JSONL file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let examples = ehr_coagent::io::read_jsonl(&path).map_err(err)?;
        Ok(Cohort { examples })
    }

    #[staticmethod]
    #[pyo3(signature = (spec=None))]
    fn synthetic(spec: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let spec: SynthSpec = opt_from_py(spec)?;
        Ok(Cohort {
            examples: synth::generate(&spec).map_err(err)?.cohort,
        })
    }

    fn __len__(&self) -> usize {
        self.examples.len()
    }

    fn __repr__(&self) -> String {
        format!("Cohort(n={}, prevalence={:?})", self.examples.len(), prevalence(&self.examples))
    }

    #[getter]
    fn prevalence(&self) -> Option<f64> {
        prevalence(&self.examples)
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.example_id.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<bool> {
        self.examples.iter().map(|e| e.label.is_positive()).collect()
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Self> {
        Ok(Cohort {
            examples: stratified_sample(&self.examples, n, seed).map_err(err)?,
        })
    }

    /// Returns `(train, calibration, test)`.
    #[pyo3(signature = (fractions=(0.6, 0.2, 0.2), seed=0))]
    fn split(&self, fractions: (f64, f64, f64), seed: u64) -> PyResult<(Self, Self, Self)> {
        let s = split_cohort(&self.examples, [fractions.0, fractions.1, fractions.2], seed).map_err(err)?;
        Ok((Cohort { examples: s.train }, Cohort { examples: s.calibration }, Cohort { examples: s.test }))
    }

    /// Narrative text per example id, using a `system\tcode\tname` vocabulary.
    fn narratives(&self, vocab: PathBuf) -> PyResult<Vec<(String, String)>> {
        let (map, _) = load_vocab(&vocab).map_err(err)?;
        let template = NarrativeTemplate::default();
        self.examples
            .iter()
            .map(|e| {
                serialize_narrative(&e.example_id, &e.input_visit, &map, &template)
                    .map(|n| (n.example_id, n.text))
                    .map_err(err)
            })
            .collect()
    }

    fn to_list<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.examples)
    }
}

/// A trained tree, logistic regression or forest over code indicators.
#[pyclass(module = "ehr_coagent_py")]
struct Baseline {
    model: TrainedModel,
    columns: Vec<ehr_coagent::model::MedicalCode>,
}

#[pymethods]
impl Baseline {
    /// `kind` is "tree", "logreg" or "forest"; `few_shot` trains on that
    /// many balanced rows instead of the whole cohort.
    #[staticmethod]
    #[pyo3(signature = (kind, train, seed=0, few_shot=None, hyper=None))]
    fn train(
        kind: &str,
        train: &Cohort,
        seed: u64,
        few_shot: Option<usize>,
        hyper: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let kind: BaselineKind = kind.parse().map_err(err)?;
        let hyper: BaselineHyper = opt_from_py(hyper)?;
        let columns = baselines::code_universe(&train.examples);
        let x = featurize(&train.examples, &columns).map_err(err)?;
        let model = match few_shot {
            Some(n) => baselines::few_shot_fit(kind, &x, n, &hyper, seed).map_err(err)?.0,
            None => baselines::train(kind, &x, &hyper, seed).map_err(err)?,
        };
        Ok(Baseline { model, columns })
    }

    #[getter]
    fn kind(&self) -> String {
        self.model.kind().to_string()
    }

    fn predict_proba(&self, cohort: &Cohort) -> PyResult<Vec<f64>> {
        let x = featurize(&cohort.examples, &self.columns).map_err(err)?;
        Ok(x.rows.iter().map(|r| self.model.predict_proba(r)).collect())
    }

    fn accuracy(&self, cohort: &Cohort) -> PyResult<f64> {
        Ok(self.model.accuracy(&featurize(&cohort.examples, &self.columns).map_err(err)?))
    }
}

/// Writes a synthetic dataset (visits, vocabulary, cohort, target codes)
/// and returns the file names.
#[pyfunction]
#[pyo3(signature = (out_dir, spec=None))]
fn generate_synthetic(out_dir: PathBuf, spec: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<String>> {
    let spec: SynthSpec = opt_from_py(spec)?;
    synth::generate(&spec).map_err(err)?.write(&out_dir).map_err(err)
}

/// Renders a predictor prompt. Exemplars are `(narrative, is_positive)`.
#[pyfunction]
#[pyo3(signature = (narrative, config=None, exemplars=Vec::new(), prevalence=None))]
fn build_prompt(
    narrative: &str,
    config: Option<&Bound<'_, PyAny>>,
    exemplars: Vec<(String, bool)>,
    prevalence: Option<f64>,
) -> PyResult<String> {
    let config: PromptConfig = opt_from_py(config)?;
    let query = Narrative {
        example_id: "query".into(),
        text: narrative.into(),
    };
    let exemplars: Vec<Exemplar> = exemplars
        .into_iter()
        .enumerate()
        .map(|(i, (text, positive))| Exemplar {
            narrative: Narrative {
                example_id: format!("exemplar-{i}"),
                text,
            },
            label: Label::from_bool(positive),
            reasoning: None,
        })
        .collect();
    let prompt = PromptFactory::default()
        .predictor(&query, &config, &exemplars, prevalence)
        .map_err(err)?;
    Ok(prompt.text)
}

/// Label and class probabilities from a completion and optional
/// answer-token log-probabilities.
#[pyfunction]
#[pyo3(signature = (text, logprobs=Vec::new()))]
fn extract_answer<'py>(py: Python<'py>, text: &str, logprobs: Vec<(String, f64)>) -> PyResult<Bound<'py, PyAny>> {
    let response = CompletionResponse {
        text: text.into(),
        answer_token_logprobs: logprobs,
        backend_id: "python".into(),
        cached: false,
        attempts: 1,
    };
    to_py(py, &extract(&response))
}

/// Confusion counts and accuracy, sensitivity, specificity and F1.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, predicted: Vec<bool>, truth: Vec<bool>) -> PyResult<Bound<'py, PyAny>> {
    if predicted.len() != truth.len() {
        return Err(err("predicted and truth lengths differ"));
    }
    let cm = ConfusionMatrix::from_pairs(
        predicted.iter().zip(&truth).map(|(p, t)| (Label::from_bool(*p), Label::from_bool(*t))),
    );
    let m = compute_metrics(&cm).map_err(err)?;
    to_py(py, &serde_json::json!({"confusion": cm, "metrics": m}))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    ehr_coagent::cli::run(std::iter::once("ehr-coagent".to_string()).chain(args))
}

#[pymodule]
fn ehr_coagent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EhrCoagentError", m.py().get_type::<EhrCoagentError>())?;
    m.add_class::<Cohort>()?;
    m.add_class::<Baseline>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
