//! Python bindings: poses, descriptors, window selection, streaming samplers,
//! synthetic worlds, pose graphs and the batch / online pipelines.
//!
//! Structured configuration crosses the boundary as JSON strings using the
//! same schema as the CLI config files.

use nalgebra::{Matrix6, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kf_minset::descriptors::{cosine_similarity, Descriptor};
use kf_minset::evaluation::{ate as ate_rs, rpe as rpe_rs, Report};
use kf_minset::geometry::{se3_exp, se3_log, Pose, Twist};
use kf_minset::pipeline::{run_batch as run_batch_rs, run_online as run_online_rs, RunConfig};
use kf_minset::posegraph::{optimize, Edge, EdgeKind, LmParams, PoseGraph};
use kf_minset::sampling::{
    constrained_power_set, msa_select_window, stream_sample as stream_sample_rs, Keyframe, SamplerConfig,
    SamplerMethod,
};
use kf_minset::synthworld::{generate as generate_rs, Dataset, WorldConfig};
use kf_minset::Error;

create_exception!(kf_minset, KfMinsetError, PyException);

fn err(e: Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        KfMinsetError::new_err(e.to_string())
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// Rigid transform with a unit quaternion (w, x, y, z) and a translation.
#[pyclass(name = "Pose", module = "kf_minset", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyPose(Pose);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (translation = [0.0, 0.0, 0.0], quaternion = [1.0, 0.0, 0.0, 0.0]))]
    fn new(translation: [f64; 3], quaternion: [f64; 4]) -> PyResult<Self> {
        let [w, x, y, z] = quaternion;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(PyValueError::new_err("quaternion must be finite and nonzero"));
        }
        Ok(Self(Pose::from_wxyz(w, x, y, z, Vector3::from(translation))))
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(Pose::identity())
    }

    #[staticmethod]
    fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self(Pose::planar(x, y, yaw))
    }

    /// Exponential map of a twist `[rho, phi]`.
    #[staticmethod]
    fn exp(twist: [f64; 6]) -> Self {
        let [a, b, c, d, e, f] = twist;
        Self(se3_exp(&Twist::new(Vector3::new(a, b, c), Vector3::new(d, e, f))))
    }

    fn log(&self) -> PyResult<[f64; 6]> {
        let t = se3_log(&self.0).map_err(err)?;
        Ok([t.rho.x, t.rho.y, t.rho.z, t.phi.x, t.phi.y, t.phi.z])
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        self.0.wxyz()
    }

    /// Homogeneous 4x4 matrix, row major.
    fn matrix(&self) -> Vec<Vec<f64>> {
        let r = self.0.rotation_matrix();
        let t = self.0.translation;
        let mut m: Vec<Vec<f64>> = (0..3).map(|i| vec![r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]]).collect();
        m.push(vec![0.0, 0.0, 0.0, 1.0]);
        m
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    /// `self⁻¹ ∘ other`.
    fn relative(&self, other: &PyPose) -> Self {
        Self(self.0.relative(&other.0))
    }

    fn __mul__(&self, other: &PyPose) -> Self {
        self.compose(other)
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation;
        let q = self.0.wxyz();
        format!(
            "Pose(translation=[{}, {}, {}], quaternion=[{}, {}, {}, {}])",
            t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )
    }
}

#[pyclass(name = "Keyframe", module = "kf_minset", frozen, from_py_object)]
#[derive(Clone)]
struct PyKeyframe(Keyframe);

#[pymethods]
impl PyKeyframe {
    #[new]
    #[pyo3(signature = (id, timestamp, pose, descriptor, spaciousness = None, entropy_proxy = None))]
    fn new(
        id: u64,
        timestamp: f64,
        pose: PyPose,
        descriptor: Vec<f64>,
        spaciousness: Option<f64>,
        entropy_proxy: Option<f64>,
    ) -> Self {
        let mut kf = Keyframe::new(id, timestamp, pose.0, Descriptor::new(descriptor));
        kf.spaciousness = spaciousness;
        kf.entropy_proxy = entropy_proxy;
        Self(kf)
    }

    #[getter]
    fn id(&self) -> u64 {
        self.0.id
    }

    #[getter]
    fn timestamp(&self) -> f64 {
        self.0.timestamp
    }

    #[getter]
    fn pose(&self) -> PyPose {
        PyPose(self.0.pose)
    }

    #[getter]
    fn descriptor(&self) -> Vec<f64> {
        self.0.descriptor.values().to_vec()
    }

    #[getter]
    fn spaciousness(&self) -> Option<f64> {
        self.0.spaciousness
    }

    #[getter]
    fn entropy_proxy(&self) -> Option<f64> {
        self.0.entropy_proxy
    }

    fn __repr__(&self) -> String {
        format!("Keyframe(id={}, timestamp={})", self.0.id, self.0.timestamp)
    }
}

/// Synthetic dataset: ground truth, drifting odometry and per-frame keyframes.
#[pyclass(name = "Dataset", module = "kf_minset", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn gt_poses(&self) -> Vec<PyPose> {
        self.0.gt_poses.iter().copied().map(PyPose).collect()
    }

    #[getter]
    fn odom_poses(&self) -> Vec<PyPose> {
        self.0.odom_poses.iter().copied().map(PyPose).collect()
    }

    #[getter]
    fn keyframes(&self) -> Vec<PyKeyframe> {
        self.0.keyframes.iter().cloned().map(PyKeyframe).collect()
    }

    #[getter]
    fn gt_loop_pairs(&self) -> Vec<(u64, u64)> {
        self.0.gt_loop_pairs.iter().copied().collect()
    }

    #[getter]
    fn descriptor_dim(&self) -> usize {
        self.0.descriptor_dim()
    }
}

#[pyclass(name = "PoseGraph", module = "kf_minset")]
struct PyPoseGraph(PoseGraph);

fn information(rows: Vec<Vec<f64>>) -> PyResult<Matrix6<f64>> {
    if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
        return Err(PyValueError::new_err("information must be a 6x6 nested list"));
    }
    Ok(Matrix6::from_fn(|i, j| rows[i][j]))
}

#[pymethods]
impl PyPoseGraph {
    #[new]
    fn new() -> Self {
        Self(PoseGraph::new())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// The first node added is held fixed.
    fn add_node(&mut self, id: u64, pose: PyPose) -> PyResult<()> {
        self.0.add_node(id, pose.0).map_err(err)
    }

    /// `kind` is "odom" or "loop"; `measurement` is the pose of j in i's frame.
    fn add_edge(&mut self, kind: &str, i: u64, j: u64, measurement: PyPose, information: Vec<Vec<f64>>) -> PyResult<()> {
        let kind = match kind {
            "odom" | "odometry" => EdgeKind::Odometry,
            "loop" => EdgeKind::Loop,
            other => return Err(PyValueError::new_err(format!("unknown edge kind `{other}`"))),
        };
        let information = self::information(information)?;
        self.0
            .add_edge(Edge {
                kind,
                i,
                j,
                measurement: measurement.0,
                information,
            })
            .map_err(err)
    }

    fn poses(&self) -> Vec<(u64, PyPose)> {
        self.0.ids().iter().copied().zip(self.0.poses().iter().copied().map(PyPose)).collect()
    }

    /// Run Levenberg-Marquardt, store the result and return a summary dict.
    #[pyo3(signature = (lm_json = None))]
    fn optimize<'py>(&mut self, py: Python<'py>, lm_json: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let params: LmParams = from_json(lm_json)?;
        let r = py.detach(|| optimize(&self.0, &params)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("initial_error", r.initial_error)?;
        d.set_item("final_error", r.final_error)?;
        d.set_item("iterations", r.iterations)?;
        d.set_item("termination", format!("{:?}", r.termination))?;
        self.0.set_poses(r.poses).map_err(err)?;
        Ok(d)
    }
}

/// Cosine similarity of two descriptors.
#[pyfunction]
fn similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    cosine_similarity(&Descriptor::new(a), &Descriptor::new(b)).map_err(err)
}

fn keyframes(window: Vec<PyKeyframe>) -> Vec<Keyframe> {
    window.into_iter().map(|k| k.0).collect()
}

/// Feasible subsets of a window, as index lists.
#[pyfunction]
#[pyo3(signature = (window, anchor = None, sampler_json = None))]
fn power_set(window: Vec<PyKeyframe>, anchor: Option<PyPose>, sampler_json: Option<&str>) -> PyResult<Vec<Vec<usize>>> {
    let cfg: SamplerConfig = from_json(sampler_json)?;
    constrained_power_set(&keyframes(window), anchor.as_ref().map(|a| &a.0), &cfg).map_err(err)
}

/// Exhaustive minimal-subset selection over one window.
#[pyfunction]
#[pyo3(signature = (window, anchor = None, sampler_json = None))]
fn select_window<'py>(
    py: Python<'py>,
    window: Vec<PyKeyframe>,
    anchor: Option<PyPose>,
    sampler_json: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: SamplerConfig = from_json(sampler_json)?;
    let w = keyframes(window);
    let s = py
        .detach(|| msa_select_window(&w, anchor.as_ref().map(|a| &a.0), &cfg))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("selected", s.selected)?;
    d.set_item("selected_ids", s.selected_ids)?;
    d.set_item("rho", s.rho)?;
    d.set_item("pi", s.pi)?;
    d.set_item("objective", s.objective)?;
    d.set_item("candidates_evaluated", s.candidates_evaluated)?;
    d.set_item("feasible_subsets", s.feasible_subsets)?;
    d.set_item("power_set_size", s.power_set_size)?;
    d.set_item("constraint_feasible", s.constraint_feasible)?;
    Ok(d)
}

/// Run a sampler (`all`, `msa`, `const:<m>`, `entropy`, `spaciousness`) over
/// a stream and return the kept ids.
#[pyfunction]
#[pyo3(signature = (method, stream, sampler_json = None))]
fn stream_sample(py: Python<'_>, method: &str, stream: Vec<PyKeyframe>, sampler_json: Option<&str>) -> PyResult<Vec<u64>> {
    let method: SamplerMethod = method.parse().map_err(err)?;
    let cfg: SamplerConfig = from_json(sampler_json)?;
    let kfs = keyframes(stream);
    let kept = py.detach(|| stream_sample_rs(kfs, &method, &cfg)).map_err(err)?;
    Ok(kept.iter().map(|k| k.id).collect())
}

/// Generate a synthetic world; `world_json` follows the `dataset.synthetic` schema.
#[pyfunction]
#[pyo3(signature = (world_json = None))]
fn generate(py: Python<'_>, world_json: Option<&str>) -> PyResult<PyDataset> {
    let cfg: WorldConfig = from_json(world_json)?;
    py.detach(|| generate_rs(&cfg)).map(PyDataset).map_err(err)
}

/// Aligned absolute trajectory error `(translation RMSE, rotation RMSE)`.
#[pyfunction]
fn ate(gt: Vec<PyPose>, est: Vec<PyPose>) -> PyResult<(f64, f64)> {
    let g: Vec<Pose> = gt.into_iter().map(|p| p.0).collect();
    let e: Vec<Pose> = est.into_iter().map(|p| p.0).collect();
    ate_rs(&g, &e).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (gt, est, delta = 1))]
fn rpe(gt: Vec<PyPose>, est: Vec<PyPose>, delta: usize) -> PyResult<(f64, f64)> {
    let g: Vec<Pose> = gt.into_iter().map(|p| p.0).collect();
    let e: Vec<Pose> = est.into_iter().map(|p| p.0).collect();
    rpe_rs(&g, &e, delta).map_err(err)
}

fn report_dict<'py>(py: Python<'py>, r: &Report) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("report", r.render())?;
    d.set_item("summary_csv", r.summary_csv())?;
    let rows = r
        .methods
        .iter()
        .map(|m| {
            let row = PyDict::new(py);
            row.set_item("method", &m.method)?;
            row.set_item("kept", m.kept)?;
            row.set_item("total_frames", m.total_frames)?;
            row.set_item("ate_before", m.before.ate_trans)?;
            row.set_item("ate_after", m.after.ate_trans)?;
            row.set_item("ate_t_improvement", m.ate_t_improvement())?;
            row.set_item("ate_r_improvement", m.ate_r_improvement())?;
            row.set_item("fpr", m.detection.fpr())?;
            row.set_item("peak_memory", m.peak_memory)?;
            row.set_item("total_time", m.total_time)?;
            Ok(row)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("methods", rows)?;
    Ok(d)
}

/// Batch pipeline from a JSON run configuration.
#[pyfunction]
fn run_batch<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_json(config_json).map_err(err)?;
    let r = py.detach(|| run_batch_rs(&cfg)).map_err(err)?;
    report_dict(py, &r)
}

/// Streaming pipeline from a JSON run configuration.
#[pyfunction]
fn run_online<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_json(config_json).map_err(err)?;
    let r = py.detach(|| run_online_rs(&cfg)).map_err(err)?;
    report_dict(py, &r)
}

#[pymodule(name = "kf_minset")]
fn kf_minset_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("KfMinsetError", m.py().get_type::<KfMinsetError>())?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyKeyframe>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPoseGraph>()?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(power_set, m)?)?;
    m.add_function(wrap_pyfunction!(select_window, m)?)?;
    m.add_function(wrap_pyfunction!(stream_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(ate, m)?)?;
    m.add_function(wrap_pyfunction!(rpe, m)?)?;
    m.add_function(wrap_pyfunction!(run_batch, m)?)?;
    m.add_function(wrap_pyfunction!(run_online, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn information_shape_is_checked() {
        let eye: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        assert_eq!(information(eye).unwrap(), Matrix6::identity());
        assert!(information(vec![vec![1.0; 6]; 5]).is_err());
    }

    #[test]
    fn json_defaults_and_rejection() {
        let d: SamplerConfig = from_json(None).unwrap();
        assert_eq!(d, SamplerConfig::default());
        let w: SamplerConfig = from_json(Some(r#"{"window_size": 8}"#)).unwrap();
        assert_eq!(w.window_size, 8);
        assert!(from_json::<SamplerConfig>(Some(r#"{"window": 8}"#)).is_err());
    }
}
