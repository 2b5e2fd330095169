//! Python bindings. Annotations cross the boundary as plain dicts:
//! `{"model_id", "turn_id", "emotions": [{"label", "valence", "arousal",
//! "learning", "rank"}]}`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use affect_core::annotation::{self, ModelAnnotation, RankedEmotion};
use affect_core::{corpus, dynamics, fusion, pipeline, stats};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Turn", frozen, from_py_object)]
#[derive(Clone)]
struct PyTurn(corpus::Turn);

#[pymethods]
impl PyTurn {
    #[getter]
    fn turn_id(&self) -> &str {
        &self.0.turn_id
    }
    #[getter]
    fn participant_id(&self) -> &str {
        &self.0.participant_id
    }
    #[getter]
    fn timestamp(&self) -> String {
        self.0.timestamp.to_rfc3339()
    }
    #[getter]
    fn role(&self) -> &'static str {
        self.0.role.as_str()
    }
    #[getter]
    fn text(&self) -> &str {
        &self.0.text
    }
    #[getter]
    fn token_count(&self) -> u64 {
        self.0.token_count
    }
    #[getter]
    fn code_snippet_count(&self) -> u64 {
        self.0.code_snippet_count
    }
    fn __repr__(&self) -> String {
        format!("Turn({:?}, {:?}, {})", self.0.turn_id, self.0.participant_id, self.0.role)
    }
}

#[pyclass(name = "Session", frozen)]
struct PySession(corpus::Session);

#[pymethods]
impl PySession {
    #[getter]
    fn session_id(&self) -> &str {
        &self.0.session_id
    }
    #[getter]
    fn participant_id(&self) -> &str {
        &self.0.participant_id
    }
    #[getter]
    fn turn_ids(&self) -> Vec<String> {
        self.0.turn_ids.clone()
    }
    #[getter]
    fn duration_minutes(&self) -> f64 {
        self.0.duration_minutes
    }
    fn __len__(&self) -> usize {
        self.0.turn_ids.len()
    }
}

#[derive(FromPyObject)]
#[pyo3(from_item_all)]
struct EmotionIn {
    label: String,
    valence: u8,
    arousal: u8,
    learning: u8,
    rank: u8,
}

#[derive(FromPyObject)]
#[pyo3(from_item_all)]
struct AnnotationIn {
    model_id: String,
    turn_id: String,
    emotions: Vec<EmotionIn>,
}

impl From<AnnotationIn> for ModelAnnotation {
    fn from(a: AnnotationIn) -> Self {
        ModelAnnotation {
            model_id: a.model_id,
            turn_id: a.turn_id,
            emotions: a
                .emotions
                .into_iter()
                .map(|e| RankedEmotion {
                    label: e.label,
                    valence: e.valence,
                    arousal: e.arousal,
                    learning: e.learning,
                    rank: e.rank,
                })
                .collect(),
        }
    }
}

fn emotions_to_py<'py>(py: Python<'py>, emotions: &[RankedEmotion]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    emotions
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("rank", e.rank)?;
            d.set_item("label", &e.label)?;
            d.set_item("valence", e.valence)?;
            d.set_item("arousal", e.arousal)?;
            d.set_item("learning", e.learning)?;
            Ok(d)
        })
        .collect()
}

fn annotations(anns: Vec<AnnotationIn>) -> Vec<ModelAnnotation> {
    anns.into_iter().map(Into::into).collect()
}

#[pyclass(name = "FusedAnnotation", frozen)]
struct PyFused(fusion::FusedAnnotation);

#[pymethods]
impl PyFused {
    #[getter]
    fn turn_id(&self) -> &str {
        &self.0.turn_id
    }
    #[getter]
    fn v_bar(&self) -> f64 {
        self.0.v_bar
    }
    #[getter]
    fn a_bar(&self) -> f64 {
        self.0.a_bar
    }
    #[getter]
    fn l_bar(&self) -> f64 {
        self.0.l_bar
    }
    #[getter]
    fn consensus_label(&self) -> &str {
        &self.0.consensus_label
    }
    #[getter]
    fn label_votes(&self) -> BTreeMap<String, u32> {
        self.0.label_votes.clone()
    }
    #[getter]
    fn contributing_models(&self) -> Vec<String> {
        self.0.contributing_models.clone()
    }
    fn __repr__(&self) -> String {
        format!(
            "FusedAnnotation({:?}, v={}, a={}, l={}, label={:?})",
            self.0.turn_id, self.0.v_bar, self.0.a_bar, self.0.l_bar, self.0.consensus_label
        )
    }
}

#[pyclass(name = "TransitionModel", frozen)]
struct PyTransitionModel(dynamics::TransitionModel);

#[pymethods]
impl PyTransitionModel {
    #[new]
    #[pyo3(signature = (counts, beta = 1.0))]
    fn new(counts: [[u64; 3]; 3], beta: f64) -> PyResult<Self> {
        dynamics::TransitionModel::fit(counts, beta).map(Self).map_err(value_err)
    }
    #[getter]
    fn counts(&self) -> [[u64; 3]; 3] {
        self.0.counts
    }
    #[getter]
    fn probs(&self) -> [[f64; 3]; 3] {
        self.0.probs
    }
    #[getter]
    fn dwell(&self) -> [f64; 3] {
        self.0.dwell
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }
}

fn state_from_str(s: &str) -> PyResult<dynamics::ValenceState> {
    dynamics::ValenceState::ALL
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown valence state {s:?}")))
}

#[pyfunction]
fn parse_corpus(text: &str) -> PyResult<Vec<PyTurn>> {
    corpus::parse_corpus_str(text)
        .map(|ts| ts.into_iter().map(PyTurn).collect())
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (turns, gap_minutes = corpus::DEFAULT_SESSION_GAP_MINUTES))]
fn segment_sessions(turns: Vec<PyTurn>, gap_minutes: f64) -> PyResult<Vec<PySession>> {
    let mut turns: Vec<corpus::Turn> = turns.into_iter().map(|t| t.0).collect();
    corpus::sort_turns(&mut turns);
    corpus::segment_sessions(&turns, gap_minutes)
        .map(|ss| ss.into_iter().map(PySession).collect())
        .map_err(value_err)
}

/// Returns `(median, q1, q3)`.
#[pyfunction]
fn median_iqr(values: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    stats::median_iqr(&values)
        .map(|q| (q.median, q.q1, q.q3))
        .map_err(value_err)
}

#[pyfunction]
fn rank_weights(k: usize) -> PyResult<Vec<f64>> {
    fusion::rank_weights(k).map(|w| w.weights().to_vec()).map_err(value_err)
}

/// Returns `(v_hat, a_hat, l_hat)` for one model's annotation.
#[pyfunction]
fn pool_intra_model(annotation: AnnotationIn) -> PyResult<(f64, f64, f64)> {
    let p = fusion::pool_intra_model(&annotation.into()).map_err(value_err)?;
    Ok((p.v_hat, p.a_hat, p.l_hat))
}

#[pyfunction]
fn consensus_label(annotations_in: Vec<AnnotationIn>) -> PyResult<(String, BTreeMap<String, u32>)> {
    fusion::consensus_label(&annotations(annotations_in)).map_err(value_err)
}

#[pyfunction]
fn fuse_turn(annotations_in: Vec<AnnotationIn>) -> PyResult<PyFused> {
    fusion::fuse_turn(&annotations(annotations_in)).map(PyFused).map_err(value_err)
}

#[pyfunction]
fn compute_tertiles(values: Vec<f64>) -> PyResult<(f64, f64)> {
    dynamics::compute_tertiles(&values)
        .map(|c| (c.t1, c.t2))
        .map_err(value_err)
}

#[pyfunction]
fn classify_valence(v: f64, t1: f64, t2: f64) -> &'static str {
    dynamics::classify_valence(v, dynamics::TertileCuts { t1, t2 }).as_str()
}

/// Sequences are lists of `"negative"`, `"neutral"` or `"positive"`.
#[pyfunction]
fn count_transitions(sequences: Vec<Vec<String>>) -> PyResult<[[u64; 3]; 3]> {
    let seqs = sequences
        .iter()
        .map(|s| s.iter().map(|x| state_from_str(x)).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    Ok(dynamics::count_transitions(&seqs))
}

#[pyfunction]
fn dwell_times(probs: [[f64; 3]; 3]) -> [f64; 3] {
    dynamics::dwell_times(&probs)
}

/// Returns `(system, user)` prompt sections.
#[pyfunction]
fn build_prompt(turn: PyTurn) -> PyResult<(String, String)> {
    annotation::build_prompt(&turn.0)
        .map(|p| (p.system.to_string(), p.user))
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (context_window = 0))]
fn prompt_hash(context_window: usize) -> String {
    annotation::prompt_hash(context_window)
}

/// Parses a raw model reply into ranked emotion dicts; raises ValueError
/// on malformed replies.
#[pyfunction]
fn parse_response<'py>(py: Python<'py>, raw: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let parsed = annotation::parse_response(raw).map_err(value_err)?;
    emotions_to_py(py, &parsed.emotions)
}

#[pyfunction]
fn mock_annotate<'py>(py: Python<'py>, turn_id: &str, model_id: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let ann = annotation::mock_annotate(turn_id, model_id, seed);
    let d = PyDict::new(py);
    d.set_item("model_id", &ann.model_id)?;
    d.set_item("turn_id", &ann.turn_id)?;
    d.set_item("emotions", emotions_to_py(py, &ann.emotions)?)?;
    Ok(d)
}

/// Runs the whole pipeline from a TOML config and returns the stage
/// counts.
#[pyfunction]
#[pyo3(signature = (config_path, mock = None, seed = None, output_dir = None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    mock: Option<bool>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = pipeline::PipelineConfig::load(&config_path).map_err(value_err)?;
    if let Some(m) = mock {
        cfg.mock = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = output_dir {
        cfg.output_dir = o;
    }
    let manifest = py
        .detach(|| pipeline::run_pipeline(&cfg))
        .map_err(|e| match e {
            pipeline::PipelineError::Provider(_) => PyOSError::new_err(e.to_string()),
            _ => value_err(e),
        })?;
    let c = &manifest.counts;
    let d = PyDict::new(py);
    for (k, v) in [
        ("turns", c.turns),
        ("participants", c.participants),
        ("sessions", c.sessions),
        ("annotation_requests", c.annotation_requests),
        ("cache_hits", c.cache_hits),
        ("provider_calls", c.provider_calls),
        ("annotations_ok", c.annotations_ok),
        ("annotations_failed", c.annotations_failed),
        ("fused_turns", c.fused_turns),
        ("unfusable_turns", c.unfusable_turns),
        ("analyzed_turns", c.analyzed_turns),
    ] {
        d.set_item(k, v)?;
    }
    d.set_item("prompt_hash", manifest.prompt_hash)?;
    Ok(d)
}

#[pymodule]
fn affect_ensemble(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("K_MAX", annotation::K_MAX)?;
    m.add("PROMPT_VERSION", annotation::PROMPT_VERSION)?;
    m.add_class::<PyTurn>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyFused>()?;
    m.add_class::<PyTransitionModel>()?;
    m.add_function(wrap_pyfunction!(parse_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(segment_sessions, m)?)?;
    m.add_function(wrap_pyfunction!(median_iqr, m)?)?;
    m.add_function(wrap_pyfunction!(rank_weights, m)?)?;
    m.add_function(wrap_pyfunction!(pool_intra_model, m)?)?;
    m.add_function(wrap_pyfunction!(consensus_label, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_turn, m)?)?;
    m.add_function(wrap_pyfunction!(compute_tertiles, m)?)?;
    m.add_function(wrap_pyfunction!(classify_valence, m)?)?;
    m.add_function(wrap_pyfunction!(count_transitions, m)?)?;
    m.add_function(wrap_pyfunction!(dwell_times, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_hash, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(mock_annotate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
