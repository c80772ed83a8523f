//! Python bindings. Images are `(H, W)` or `(H, W, C)` float arrays in
//! `[0, 1]`, flows are `(H, W, 2)` and masks are boolean `(H, W)`.

use std::collections::HashMap;
use std::path::PathBuf;

use mrflow_core::io::{compute_metrics as metrics, read_flo as read_flo_file, write_flo as write_flo_file};
use mrflow_core::pipeline::{self, PipelineConfig, PipelineInputs, PipelineOutput};
use mrflow_core::synth::{presets, render_scene, FlowNoise, SceneSpec, SyntheticInputs, SyntheticScene};
use mrflow_core::{geometry, refinement, rigidity};
use mrflow_core::{BinaryMask, Error, FlowField, Homography, Image, Point2, PppParams, ScalarField};
use numpy::ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyArrayDyn, PyReadonlyArray2, PyReadonlyArray3, PyReadonlyArrayDyn};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_)
        | Error::DimensionMismatch { .. }
        | Error::Parse(_)
        | Error::BadMagic
        | Error::TruncatedFile
        | Error::UnsupportedMaxval(_)
        | Error::InvalidConfig(_)
        | Error::InvalidSpec(_)
        | Error::NonFinite => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_in(a: PyReadonlyArrayDyn<'_, f64>) -> PyResult<Image> {
    let v = a.as_array();
    let (h, w, c) = match *v.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        ref s => {
            return Err(PyValueError::new_err(format!(
                "image must be 2-D or 3-D, got shape {s:?}"
            )))
        }
    };
    Image::from_vec(w, h, c, v.iter().copied().collect()).map_err(err)
}

fn image_out<'py>(py: Python<'py>, img: &Image) -> Bound<'py, PyArrayDyn<f64>> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let shape: Vec<usize> = if c == 1 { vec![h, w] } else { vec![h, w, c] };
    numpy::ndarray::ArrayD::from_shape_vec(shape, img.data().to_vec())
        .unwrap()
        .into_pyarray(py)
}

fn flow_in(a: PyReadonlyArray3<'_, f64>) -> PyResult<FlowField> {
    let v = a.as_array();
    let [h, w, two] = *v.shape() else { unreachable!() };
    if two != 2 {
        return Err(PyValueError::new_err(format!(
            "flow must have shape (H, W, 2), got last axis {two}"
        )));
    }
    let data = v.as_standard_layout();
    let data = data.as_slice().unwrap();
    FlowField::from_vec(w, h, data.chunks_exact(2).map(|p| [p[0], p[1]]).collect()).map_err(err)
}

fn flow_out<'py>(py: Python<'py>, f: &FlowField) -> Bound<'py, PyArray3<f64>> {
    let data = f.data().iter().flat_map(|p| *p).collect();
    Array3::from_shape_vec((f.height(), f.width(), 2), data)
        .unwrap()
        .into_pyarray(py)
}

fn scalar_in(a: PyReadonlyArray2<'_, f64>) -> PyResult<ScalarField> {
    let v = a.as_array();
    let [h, w] = *v.shape() else { unreachable!() };
    ScalarField::from_vec(w, h, v.iter().copied().collect()).map_err(err)
}

fn scalar_out<'py>(py: Python<'py>, f: &ScalarField) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_vec((f.height(), f.width()), f.data().to_vec())
        .unwrap()
        .into_pyarray(py)
}

fn mask_in(a: PyReadonlyArray2<'_, bool>) -> PyResult<BinaryMask> {
    let v = a.as_array();
    let [h, w] = *v.shape() else { unreachable!() };
    BinaryMask::from_vec(w, h, v.iter().copied().collect()).map_err(err)
}

fn mask_out<'py>(py: Python<'py>, m: &BinaryMask) -> Bound<'py, PyArray2<bool>> {
    Array2::from_shape_vec((m.height(), m.width()), m.data().to_vec())
        .unwrap()
        .into_pyarray(py)
}

/// Pipeline options: a preset plus overrides by name.
#[pyclass(name = "Config", module = "mrflow", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// `Config("sintel", seed=3, variational_opt=False)`
    #[new]
    #[pyo3(signature = (preset = "kitti", **overrides))]
    fn new(preset: &str, overrides: Option<HashMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut cfg = PyConfig {
            inner: PipelineConfig::for_preset(preset.parse().map_err(err)?),
        };
        let mut overrides: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
        overrides.sort_by(|a, b| a.0.cmp(&b.0));
        for (k, v) in overrides {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Set one option; values are converted with `str()`, booleans accepted.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = match value.extract::<bool>() {
            Ok(b) => b.to_string(),
            Err(_) => value.str()?.to_string(),
        };
        self.inner.set(key, &text).map_err(err)
    }

    /// Apply `key = value` lines.
    fn apply_text(&mut self, text: &str) -> PyResult<()> {
        self.inner.apply_text(text).map_err(err)
    }

    #[getter]
    fn preset(&self) -> String {
        self.inner.preset.to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn params(&self) -> HashMap<&'static str, f64> {
        let p = &self.inner.params;
        HashMap::from([
            ("sigma_d", p.sigma_d),
            ("sigma_s", p.sigma_s),
            ("lambda_rc", p.lambda_rc),
            ("lambda_rp", p.lambda_rp),
            ("lambda_c", p.lambda_c),
            ("lambda_1st", p.lambda_1st),
            ("lambda_2nd", p.lambda_2nd),
        ])
    }

    #[getter]
    fn switches(&self) -> HashMap<&'static str, bool> {
        let s = &self.inner.switches;
        HashMap::from([
            ("occlusion_reasoning", s.occlusion_reasoning),
            ("coplanarity_refinement", s.coplanarity_refinement),
            ("nonlinear_b_init", s.nonlinear_b_init),
            ("spatial_priors", s.spatial_priors),
            ("first_order", s.first_order),
            ("second_order", s.second_order),
            ("variational_opt", s.variational_opt),
        ])
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(preset={:?}, seed={})",
            self.inner.preset.to_string(),
            self.inner.seed
        )
    }
}

/// Motion parameters of one direction: plane homography, camera-motion
/// scalar and epipole.
#[pyclass(name = "Params", module = "mrflow", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: PppParams,
}

#[pymethods]
impl PyParams {
    #[new]
    fn new(h: PyReadonlyArray2<'_, f64>, b: f64, e: (f64, f64)) -> PyResult<Self> {
        let v = h.as_array();
        if v.shape() != [3, 3] {
            return Err(PyValueError::new_err("homography must be 3x3"));
        }
        let h = Homography::from_row_slice(&v.iter().copied().collect::<Vec<_>>()).map_err(err)?;
        Ok(PyParams {
            inner: PppParams::new(h, b, Point2::new(e.0, e.1)).map_err(err)?,
        })
    }

    #[getter]
    fn h<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        let m = self.inner.h.matrix();
        Array2::from_shape_fn((3, 3), |(r, c)| m[(r, c)]).into_pyarray(py)
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }

    #[getter]
    fn e(&self) -> (f64, f64) {
        (self.inner.e.x, self.inner.e.y)
    }

    /// Where reference pixel `(x, y)` with structure `a` lands in the other frame.
    fn warp(&self, x: f64, y: f64, a: f64) -> PyResult<(f64, f64)> {
        let p = geometry::warp_coords(Point2::new(x, y), a, &self.inner).map_err(err)?;
        Ok((p.x, p.y))
    }

    fn __repr__(&self) -> String {
        format!("Params(b={}, e=({}, {}))", self.inner.b, self.inner.e.x, self.inner.e.y)
    }
}

fn params(p: Option<PppParams>) -> Option<PyParams> {
    p.map(|inner| PyParams { inner })
}

#[pyclass(name = "Output", module = "mrflow", frozen)]
struct PyOutput {
    inner: PipelineOutput,
    initial: FlowField,
}

#[pymethods]
impl PyOutput {
    #[getter]
    fn flow<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f64>> {
        flow_out(py, &self.inner.flow)
    }

    #[getter]
    fn rigidity<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<bool>> {
        mask_out(py, &self.inner.rigidity)
    }

    #[getter]
    fn structure<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        scalar_out(py, &self.inner.structure)
    }

    /// True when alignment failed and the initial flow was returned.
    #[getter]
    fn fallback(&self) -> bool {
        self.inner.fallback
    }

    #[getter]
    fn theta_plus(&self) -> Option<PyParams> {
        params(self.inner.theta_plus)
    }

    #[getter]
    fn theta_minus(&self) -> Option<PyParams> {
        params(self.inner.theta_minus)
    }

    /// Total energy after each refinement stage.
    #[getter]
    fn energy_trace(&self) -> Vec<f64> {
        self.inner
            .refinement
            .as_ref()
            .map(|r| r.trace.iter().map(|t| t.energy.total).collect())
            .unwrap_or_default()
    }

    #[getter]
    fn diagnostics(&self) -> Vec<(String, String)> {
        self.inner.diagnostics.entries().to_vec()
    }

    #[pyo3(signature = (directory, visualize = false))]
    fn write(&self, directory: PathBuf, visualize: bool) -> PyResult<()> {
        pipeline::write_outputs(&directory, &self.inner, Some(&self.initial), visualize).map_err(err)
    }
}

/// Refine the forward flow of a triplet.
#[pyfunction]
#[pyo3(signature = (prev, reference, next, flow_fwd, flow_bwd, flow_fwd_rev, flow_bwd_rev, semantic, config = None))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    prev: PyReadonlyArrayDyn<'_, f64>,
    reference: PyReadonlyArrayDyn<'_, f64>,
    next: PyReadonlyArrayDyn<'_, f64>,
    flow_fwd: PyReadonlyArray3<'_, f64>,
    flow_bwd: PyReadonlyArray3<'_, f64>,
    flow_fwd_rev: PyReadonlyArray3<'_, f64>,
    flow_bwd_rev: PyReadonlyArray3<'_, f64>,
    semantic: PyReadonlyArray2<'_, f64>,
    config: Option<PyConfig>,
) -> PyResult<PyOutput> {
    let inputs = PipelineInputs {
        prev: image_in(prev)?,
        reference: image_in(reference)?,
        next: image_in(next)?,
        flow_fwd: flow_in(flow_fwd)?,
        flow_bwd: flow_in(flow_bwd)?,
        flow_fwd_rev: flow_in(flow_fwd_rev)?,
        flow_bwd_rev: flow_in(flow_bwd_rev)?,
        semantic: scalar_in(semantic)?,
    };
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let out = py.detach(|| pipeline::run_pipeline(&inputs, &cfg)).map_err(|e| {
        let msg = e.to_string();
        if e.is_input_error() {
            PyValueError::new_err(msg)
        } else {
            PyRuntimeError::new_err(msg)
        }
    })?;
    Ok(PyOutput {
        inner: out,
        initial: inputs.flow_fwd,
    })
}

/// A rendered synthetic triplet with ground truth.
#[pyclass(name = "Scene", module = "mrflow", frozen)]
struct PyScene {
    inner: SyntheticScene,
}

#[pymethods]
impl PyScene {
    /// One of `three_plane`, `compact`, `occlusion`, `two_plane`.
    #[staticmethod]
    #[pyo3(signature = (name, seed = 0))]
    fn preset(name: &str, seed: u64) -> PyResult<Self> {
        let spec = match name {
            "three_plane" => presets::three_plane_scene(seed),
            "compact" => presets::compact_scene(seed),
            "occlusion" => presets::occlusion_scene(seed),
            "two_plane" => presets::two_plane_scene(seed),
            _ => return Err(PyValueError::new_err(format!("unknown scene preset '{name}'"))),
        };
        Self::render(&spec)
    }

    /// Render a scene described in TOML.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Self::render(&SceneSpec::from_toml(text).map_err(err)?)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.spec.to_toml().map_err(err)
    }

    #[getter]
    fn frames<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArrayDyn<f64>>> {
        let f = &self.inner.frames;
        vec![
            image_out(py, &f.prev),
            image_out(py, &f.reference),
            image_out(py, &f.next),
        ]
    }

    #[getter]
    fn gt_flow_fwd<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f64>> {
        flow_out(py, &self.inner.gt.flow_fwd)
    }

    #[getter]
    fn gt_flow_bwd<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f64>> {
        flow_out(py, &self.inner.gt.flow_bwd)
    }

    #[getter]
    fn gt_structure<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        scalar_out(py, &self.inner.gt.structure)
    }

    #[getter]
    fn gt_rigidity<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<bool>> {
        mask_out(py, &self.inner.gt.rigidity)
    }

    #[getter]
    fn visible_fwd<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<bool>> {
        mask_out(py, &self.inner.gt.visible_fwd)
    }

    #[getter]
    fn theta_plus(&self) -> PyParams {
        PyParams {
            inner: self.inner.gt.theta_plus,
        }
    }

    #[getter]
    fn theta_minus(&self) -> PyParams {
        PyParams {
            inner: self.inner.gt.theta_minus,
        }
    }

    /// Pipeline inputs as keyword arguments for `run_pipeline`: ground
    /// truth corrupted by noise and outliers, or exact with `exact=True`.
    #[pyo3(signature = (noise_sigma = 1.0, outlier_fraction = 0.1, semantic_blur = 3.0, seed = 0, exact = false))]
    fn inputs<'py>(
        &self,
        py: Python<'py>,
        noise_sigma: f64,
        outlier_fraction: f64,
        semantic_blur: f64,
        seed: u64,
        exact: bool,
    ) -> PyResult<HashMap<&'static str, Bound<'py, PyAny>>> {
        let s = &self.inner;
        let d = if exact {
            SyntheticInputs::exact(s)
        } else {
            let noise = FlowNoise {
                sigma: noise_sigma,
                outlier_fraction,
                ..FlowNoise::default()
            };
            SyntheticInputs::noisy(s, &noise, semantic_blur, seed).map_err(err)?
        };
        let f = &s.frames;
        Ok(HashMap::from([
            ("prev", image_out(py, &f.prev).into_any()),
            ("reference", image_out(py, &f.reference).into_any()),
            ("next", image_out(py, &f.next).into_any()),
            ("flow_fwd", flow_out(py, &d.fwd).into_any()),
            ("flow_bwd", flow_out(py, &d.bwd).into_any()),
            ("flow_fwd_rev", flow_out(py, &d.fwd_rev).into_any()),
            ("flow_bwd_rev", flow_out(py, &d.bwd_rev).into_any()),
            ("semantic", scalar_out(py, &d.semantic).into_any()),
        ]))
    }
}

impl PyScene {
    fn render(spec: &SceneSpec) -> PyResult<Self> {
        Ok(PyScene {
            inner: render_scene(spec).map_err(err)?,
        })
    }
}

#[pyfunction]
fn read_flo<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyArray3<f64>>> {
    Ok(flow_out(py, &read_flo_file(path).map_err(err)?))
}

#[pyfunction]
fn write_flo(path: PathBuf, flow: PyReadonlyArray3<'_, f64>) -> PyResult<()> {
    write_flo_file(path, &flow_in(flow)?).map_err(err)
}

/// Endpoint error and rigidity statistics as a dict; absent entries are `None`.
#[pyfunction]
#[pyo3(signature = (flow, gt, gt_rigidity = None, est_rigidity = None, valid = None))]
fn compute_metrics(
    flow: PyReadonlyArray3<'_, f64>,
    gt: PyReadonlyArray3<'_, f64>,
    gt_rigidity: Option<PyReadonlyArray2<'_, bool>>,
    est_rigidity: Option<PyReadonlyArray2<'_, bool>>,
    valid: Option<PyReadonlyArray2<'_, bool>>,
) -> PyResult<HashMap<&'static str, Option<f64>>> {
    let (gr, er, v) = (
        gt_rigidity.map(mask_in).transpose()?,
        est_rigidity.map(mask_in).transpose()?,
        valid.map(mask_in).transpose()?,
    );
    let m = metrics(&flow_in(flow)?, &flow_in(gt)?, gr.as_ref(), er.as_ref(), v.as_ref()).map_err(err)?;
    Ok(HashMap::from([
        ("epe", Some(m.epe_mean)),
        ("epe_rigid", m.epe_rigid),
        ("epe_moving", m.epe_moving),
        ("bad", Some(m.pct_bad)),
        ("rigidity_accuracy", m.rigidity_accuracy),
        ("rigidity_tpr_rigid", m.rigidity_tpr_rigid),
        ("rigidity_tpr_moving", m.rigidity_tpr_moving),
        ("valid_pixels", Some(m.valid_pixels as f64)),
    ]))
}

/// Flow induced by a structure map under the given motion parameters.
#[pyfunction]
fn induced_flow<'py>(
    py: Python<'py>,
    structure: PyReadonlyArray2<'_, f64>,
    theta: &PyParams,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    Ok(flow_out(
        py,
        &refinement::induced_flow(&scalar_in(structure)?, &theta.inner).map_err(err)?,
    ))
}

/// Parallax length for structure `a`, camera-motion scalar `b` and
/// distance `q_norm` to the epipole.
#[pyfunction]
fn parallax_magnitude(a: f64, b: f64, q_norm: f64) -> PyResult<f64> {
    geometry::parallax_magnitude(a, b, q_norm).map_err(err)
}

/// Inverse of [`parallax_magnitude`] in `a`.
#[pyfunction]
fn structure_from_parallax(w: f64, b: f64, q_norm: f64) -> PyResult<f64> {
    geometry::structure_from_parallax(w, b, q_norm).map_err(err)
}

/// Probability that a residual flow at angle `alpha` to the epipolar
/// direction, with magnitude `c`, is rigid.
#[pyfunction]
fn direction_rigidity(alpha: f64, c: f64, sigma_d: f64) -> f64 {
    rigidity::direction_rigidity(alpha, c, sigma_d)
}

#[pymodule]
fn mrflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyOutput>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(read_flo, m)?)?;
    m.add_function(wrap_pyfunction!(write_flo, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(induced_flow, m)?)?;
    m.add_function(wrap_pyfunction!(parallax_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(structure_from_parallax, m)?)?;
    m.add_function(wrap_pyfunction!(direction_rigidity, m)?)?;
    Ok(())
}
