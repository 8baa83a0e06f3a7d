//! SE(3) pose graph: residuals, analytic linearization, a Levenberg-Marquardt
//! solver and an incremental driver.

mod lm;
mod sparse;

pub use lm::{
    optimize, IncrementalOptimizer, IterationLog, LmParams, OptimizeResult, Termination,
};
pub use sparse::{reverse_cuthill_mckee, SkylineCholesky};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result};
use crate::geometry::{adjoint, se3_log, se3_right_jacobian_inv, Pose, Twist};
use crate::loopclosure::LoopEdge;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Odometry => "ODOM",
            EdgeKind::Loop => "LOOP",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub i: u64,
    pub j: u64,
    /// Measured `x_i^-1 x_j`.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

impl From<LoopEdge> for Edge {
    fn from(e: LoopEdge) -> Self {
        Edge {
            kind: EdgeKind::Loop,
            i: e.i,
            j: e.j,
            measurement: e.measurement,
            information: e.information,
        }
    }
}

/// Odometry edge information: per-step sigmas, scaled by the number of
/// raw frames an edge spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryInfo {
    pub sigma_t: f64,
    pub sigma_r: f64,
}

impl Default for OdometryInfo {
    fn default() -> Self {
        Self {
            sigma_t: 0.05,
            sigma_r: 0.001,
        }
    }
}

impl OdometryInfo {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t > 0.0 && self.sigma_r > 0.0) {
            return Err(Error::Config("odometry information sigmas must be > 0".into()));
        }
        Ok(())
    }

    pub fn information(&self, steps: u64) -> Matrix6<f64> {
        let s = steps.max(1) as f64;
        let t = 1.0 / (s * self.sigma_t * self.sigma_t);
        let r = 1.0 / (s * self.sigma_r * self.sigma_r);
        Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraph {
    ids: Vec<u64>,
    poses: Vec<Pose>,
    fixed: Vec<bool>,
    index: HashMap<u64, usize>,
    edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Nodes keep insertion order; the first node is fixed.
    pub fn add_node(&mut self, id: u64, pose: Pose) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::InvalidGraph(format!("duplicate node {id}")));
        }
        self.index.insert(id, self.ids.len());
        self.fixed.push(self.ids.is_empty());
        self.ids.push(id);
        self.poses.push(pose);
        Ok(())
    }

    pub fn set_fixed(&mut self, id: u64, fixed: bool) -> Result<()> {
        let k = self.slot(id)?;
        self.fixed[k] = fixed;
        Ok(())
    }

    pub fn add_edge(&mut self, edge: Edge) -> Result<()> {
        let (a, b) = (self.slot(edge.i)?, self.slot(edge.j)?);
        if a == b {
            return Err(Error::InvalidGraph(format!("self edge on {}", edge.i)));
        }
        let om = &edge.information;
        if (om - om.transpose()).abs().max() > 1e-9 * om.abs().max().max(1.0) || om.cholesky().is_none() {
            return Err(Error::InvalidGraph(format!(
                "edge ({}, {}) information is not symmetric positive definite",
                edge.i, edge.j
            )));
        }
        match edge.kind {
            EdgeKind::Odometry if b != a + 1 => {
                return Err(Error::InvalidGraph(format!(
                    "odometry edge ({}, {}) must join consecutive nodes",
                    edge.i, edge.j
                )));
            }
            EdgeKind::Loop => {
                let (lo, hi) = (a.min(b), a.max(b));
                let dup = self.edges.iter().any(|e| {
                    e.kind == EdgeKind::Odometry && {
                        let (x, y) = (self.index[&e.i], self.index[&e.j]);
                        (x.min(y), x.max(y)) == (lo, hi)
                    }
                });
                if dup {
                    return Err(Error::InvalidGraph(format!(
                        "loop edge ({}, {}) duplicates an odometry edge",
                        edge.i, edge.j
                    )));
                }
            }
            _ => {}
        }
        self.edges.push(edge);
        Ok(())
    }

    fn slot(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::InvalidGraph(format!("unknown node {id}")))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn pose(&self, id: u64) -> Option<&Pose> {
        self.index.get(&id).map(|&k| &self.poses[k])
    }

    pub fn is_fixed(&self, id: u64) -> bool {
        self.index.get(&id).is_some_and(|&k| self.fixed[k])
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn loop_count(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Loop).count()
    }

    pub fn set_poses(&mut self, poses: Vec<Pose>) -> Result<()> {
        if poses.len() != self.poses.len() {
            return Err(Error::CountMismatch {
                what: "graph poses",
                left: self.poses.len(),
                right: poses.len(),
            });
        }
        self.poses = poses;
        Ok(())
    }

    pub fn estimates(&self) -> BTreeMap<u64, Pose> {
        self.ids.iter().copied().zip(self.poses.iter().copied()).collect()
    }

    /// Column offset (in 6-blocks) of each free node, `None` for fixed ones.
    fn free_index(&self) -> (Vec<Option<usize>>, usize) {
        let mut n = 0;
        let idx = self
            .fixed
            .iter()
            .map(|&f| {
                if f {
                    None
                } else {
                    n += 1;
                    Some(n - 1)
                }
            })
            .collect();
        (idx, n)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k, (id, p)) in self.ids.iter().zip(&self.poses).enumerate() {
            writeln!(w, "VERTEX {id} {}", format_pose(p))?;
            if self.fixed[k] {
                writeln!(w, "FIX {id}")?;
            }
        }
        for e in &self.edges {
            writeln!(w, "{}", format_edge(e))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<PoseGraph> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut g = PoseGraph::new();
        let mut fixed = Vec::new();
        let mut edges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.is_empty() || tok[0].starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::parse(path, line_no, m.to_string());
            let id = |s: &str| s.parse::<u64>().map_err(|_| bad(&format!("bad id {s:?}")));
            match tok[0] {
                "VERTEX" if tok.len() == 9 => {
                    let v = parse_numbers(path, line_no, &tok[2..])?;
                    g.add_node(id(tok[1])?, parse_pose(path, line_no, &v)?)?;
                }
                "FIX" if tok.len() == 2 => fixed.push(id(tok[1])?),
                "EDGE" => edges.push(parse_edge(path, line_no, &tok)?),
                _ => return Err(bad("unrecognized or malformed record")),
            }
        }
        for f in g.fixed.iter_mut() {
            *f = false;
        }
        for id in fixed {
            g.set_fixed(id, true)?;
        }
        for e in edges {
            g.add_edge(e)?;
        }
        Ok(g)
    }
}

fn format_pose(p: &Pose) -> String {
    let [qw, qx, qy, qz] = p.wxyz();
    let t = p.translation;
    [t.x, t.y, t.z, qx, qy, qz, qw].iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

/// `EDGE kind i j tx ty tz qx qy qz qw` followed by the 21 upper-triangular
/// information entries, row by row.
pub fn format_edge(e: &Edge) -> String {
    let mut info = Vec::with_capacity(21);
    for r in 0..6 {
        for c in r..6 {
            info.push(e.information[(r, c)].to_string());
        }
    }
    format!("EDGE {} {} {} {} {}", e.kind, e.i, e.j, format_pose(&e.measurement), info.join(" "))
}

fn parse_numbers(path: &Path, line: usize, tok: &[&str]) -> Result<Vec<f64>> {
    tok.iter()
        .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, line, format!("not a number: {t:?}"))))
        .collect()
}

/// `tx ty tz qx qy qz qw`; unit quaternions are kept bit-for-bit.
fn parse_pose(path: &Path, line: usize, v: &[f64]) -> Result<Pose> {
    let q = nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]);
    if !(q.norm() > 1e-12) {
        return Err(Error::parse(path, line, "zero quaternion"));
    }
    let q = if (q.norm() - 1.0).abs() < 1e-12 {
        nalgebra::UnitQuaternion::new_unchecked(q)
    } else {
        nalgebra::UnitQuaternion::from_quaternion(q)
    };
    Ok(Pose::new(q, Vector3::new(v[0], v[1], v[2])))
}

pub(crate) fn parse_edge(path: &Path, line: usize, tok: &[&str]) -> Result<Edge> {
    if tok.len() != 4 + 7 + 21 || tok[0] != "EDGE" {
        return Err(Error::parse(path, line, "EDGE needs kind, two ids, 7 pose and 21 information values"));
    }
    let kind = match tok[1] {
        "ODOM" => EdgeKind::Odometry,
        "LOOP" => EdgeKind::Loop,
        _ => return Err(Error::parse(path, line, "edge kind must be ODOM or LOOP")),
    };
    let id = |s: &str| s.parse::<u64>().map_err(|_| Error::parse(path, line, format!("bad id {s:?}")));
    let v = parse_numbers(path, line, &tok[4..])?;
    let mut information = Matrix6::zeros();
    let mut k = 7;
    for r in 0..6 {
        for c in r..6 {
            information[(r, c)] = v[k];
            information[(c, r)] = v[k];
            k += 1;
        }
    }
    Ok(Edge {
        kind,
        i: id(tok[2])?,
        j: id(tok[3])?,
        measurement: parse_pose(path, line, &v[..7])?,
        information,
    })
}

/// Write bare edge lines (no vertices).
pub fn write_edges(path: &Path, edges: &[Edge]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in edges {
        writeln!(w, "{}", format_edge(e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_edges(path: &Path) -> Result<Vec<Edge>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| parse_edge(path, n + 1, &l.split_whitespace().collect::<Vec<_>>()))
        .collect()
}

/// Build the batch graph over kept keyframes: odometry edges between
/// consecutive kept ids plus verified loop edges.
pub fn build_graph<E: Into<Edge> + Copy>(kept: &[(u64, Pose)], loops: &[E], odom: &OdometryInfo) -> Result<PoseGraph> {
    let mut g = PoseGraph::new();
    for &(id, p) in kept {
        g.add_node(id, p)?;
    }
    for w in kept.windows(2) {
        let ((a, pa), (b, pb)) = (w[0], w[1]);
        g.add_edge(Edge {
            kind: EdgeKind::Odometry,
            i: a,
            j: b,
            measurement: pa.relative(&pb),
            information: odom.information(b.saturating_sub(a)),
        })?;
    }
    for &l in loops {
        g.add_edge(l.into())?;
    }
    Ok(g)
}

/// `log(z^-1 x_i^-1 x_j)`.
pub fn edge_residual(z: &Pose, xi: &Pose, xj: &Pose) -> Result<Twist> {
    se3_log(&z.inverse().compose(&xi.inverse()).compose(xj))
}

/// Residual and its Jacobians with respect to right perturbations
/// `x <- x exp(delta)` of both endpoints.
pub fn edge_jacobians(z: &Pose, xi: &Pose, xj: &Pose) -> Result<(Vector6<f64>, Matrix6<f64>, Matrix6<f64>)> {
    let e = edge_residual(z, xi, xj)?;
    let jr_inv = se3_right_jacobian_inv(&e);
    let ji = -jr_inv * adjoint(&xj.inverse().compose(xi));
    Ok((e.to_vector(), ji, jr_inv))
}

pub fn total_error(g: &PoseGraph) -> Result<f64> {
    total_error_at(g, &g.poses)
}

pub(crate) fn total_error_at(g: &PoseGraph, poses: &[Pose]) -> Result<f64> {
    let mut sum = 0.0;
    for e in &g.edges {
        let (a, b) = (g.index[&e.i], g.index[&e.j]);
        let r = edge_residual(&e.measurement, &poses[a], &poses[b])?.to_vector();
        sum += (r.transpose() * e.information * r)[(0, 0)];
    }
    Ok(sum)
}

/// Block-sparse normal equations over the free nodes.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// Free-variable block index per graph node.
    pub var_index: Vec<Option<usize>>,
    pub num_vars: usize,
    /// Upper-triangular blocks `(r, c)` with `r <= c`.
    pub blocks: BTreeMap<(usize, usize), Matrix6<f64>>,
    pub gradient: DVector<f64>,
    pub error: f64,
}

impl Linearization {
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let n = 6 * self.num_vars;
        let mut h = DMatrix::zeros(n, n);
        for (&(r, c), b) in &self.blocks {
            h.view_mut((6 * r, 6 * c), (6, 6)).copy_from(b);
            if r != c {
                h.view_mut((6 * c, 6 * r), (6, 6)).copy_from(&b.transpose());
            }
        }
        h
    }

    pub fn gradient_norm_inf(&self) -> f64 {
        self.gradient.amax()
    }
}

struct EdgeTerm {
    error: f64,
    a: Option<usize>,
    b: Option<usize>,
    haa: Matrix6<f64>,
    hab: Matrix6<f64>,
    hbb: Matrix6<f64>,
    ga: Vector6<f64>,
    gb: Vector6<f64>,
}

pub fn linearize(g: &PoseGraph) -> Result<Linearization> {
    linearize_at(g, &g.poses)
}

pub(crate) fn linearize_at(g: &PoseGraph, poses: &[Pose]) -> Result<Linearization> {
    let (var_index, num_vars) = g.free_index();
    // per-edge terms in parallel, reduced sequentially in edge order
    let terms: Vec<EdgeTerm> = g
        .edges
        .par_iter()
        .map(|e| {
            let (ka, kb) = (g.index[&e.i], g.index[&e.j]);
            let (r, ji, jj) = edge_jacobians(&e.measurement, &poses[ka], &poses[kb])?;
            let om = &e.information;
            let (wi, wj) = (ji.transpose() * om, jj.transpose() * om);
            Ok(EdgeTerm {
                error: (r.transpose() * om * r)[(0, 0)],
                a: var_index[ka],
                b: var_index[kb],
                haa: wi * ji,
                hab: wi * jj,
                hbb: wj * jj,
                ga: wi * r,
                gb: wj * r,
            })
        })
        .collect::<Result<_>>()?;
    let mut blocks: BTreeMap<(usize, usize), Matrix6<f64>> = BTreeMap::new();
    let mut gradient = DVector::zeros(6 * num_vars);
    let mut error = 0.0;
    let mut add = |r: usize, c: usize, m: Matrix6<f64>| {
        let (key, m) = if r <= c { ((r, c), m) } else { ((c, r), m.transpose()) };
        *blocks.entry(key).or_insert_with(Matrix6::zeros) += m;
    };
    for t in terms {
        error += t.error;
        if let Some(a) = t.a {
            add(a, a, t.haa);
            let mut s = gradient.rows_mut(6 * a, 6);
            s += t.ga;
        }
        if let Some(b) = t.b {
            add(b, b, t.hbb);
            let mut s = gradient.rows_mut(6 * b, 6);
            s += t.gb;
        }
        if let (Some(a), Some(b)) = (t.a, t.b) {
            add(a, b, t.hab);
        }
    }
    Ok(Linearization {
        var_index,
        num_vars,
        blocks,
        gradient,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> Pose {
        se3_exp(&Twist::new(
            Vector3::from_fn(|_, _| rng.random_range(-scale..scale)),
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        ))
    }

    #[test]
    fn residual_zero_at_measurement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let xi = random_pose(&mut rng, 10.0);
            let xj = random_pose(&mut rng, 10.0);
            let r = edge_residual(&xi.relative(&xj), &xi, &xj).unwrap();
            assert!(r.to_vector().norm() < 1e-12);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..50 {
            let xi = random_pose(&mut rng, 5.0);
            let xj = random_pose(&mut rng, 5.0);
            let z = xi.relative(&xj).compose(&random_pose(&mut rng, 0.3));
            let (e0, ji, jj) = edge_jacobians(&z, &xi, &xj).unwrap();
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let dp = Twist::from_vector(&d);
                let dm = Twist::from_vector(&-d);
                let ci = (edge_residual(&z, &xi.retract(&dp), &xj).unwrap().to_vector()
                    - edge_residual(&z, &xi.retract(&dm), &xj).unwrap().to_vector())
                    / (2.0 * h);
                let cj = (edge_residual(&z, &xi, &xj.retract(&dp)).unwrap().to_vector()
                    - edge_residual(&z, &xi, &xj.retract(&dm)).unwrap().to_vector())
                    / (2.0 * h);
                assert!((ci - ji.column(k)).norm() < 1e-6, "d/dxi col {k}: {ci} vs {}", ji.column(k));
                assert!((cj - jj.column(k)).norm() < 1e-6, "d/dxj col {k}");
            }
            assert!(e0.iter().all(|v| v.is_finite()));
        }
    }

    fn chain(n: usize) -> PoseGraph {
        let poses: Vec<(u64, Pose)> = (0..n).map(|i| (i as u64, Pose::planar(i as f64, 0.0, 0.0))).collect();
        build_graph(&poses, &[] as &[Edge], &OdometryInfo::default()).unwrap()
    }

    #[test]
    fn gradient_matches_error_derivative() {
        let mut g = chain(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy: Vec<Pose> = g.poses().iter().map(|p| p.compose(&random_pose(&mut rng, 0.2))).collect();
        g.set_poses(noisy).unwrap();
        let lin = linearize(&g).unwrap();
        assert!((lin.error - total_error(&g).unwrap()).abs() < 1e-9 * lin.error.max(1.0));
        // d(chi2)/d(delta) = 2 J^T Omega e
        let h = 1e-5;
        for node in 1..6 {
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let bump = |s: f64| {
                    let mut p = g.poses().to_vec();
                    p[node] = p[node].retract(&Twist::from_vector(&(d * s)));
                    total_error_at(&g, &p).unwrap()
                };
                let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                let an = 2.0 * lin.gradient[6 * (node - 1) + k];
                assert!((fd - an).abs() < 1e-4 * an.abs().max(1.0), "node {node} k {k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn graph_validation() {
        let mut g = chain(4);
        let bad = Edge {
            kind: EdgeKind::Loop,
            i: 1,
            j: 2,
            measurement: Pose::identity(),
            information: Matrix6::identity(),
        };
        assert!(matches!(g.add_edge(bad), Err(Error::InvalidGraph(_))));
        let skip = Edge { kind: EdgeKind::Odometry, i: 0, j: 2, ..bad };
        assert!(g.add_edge(skip).is_err());
        let unknown = Edge { i: 0, j: 9, ..bad };
        assert!(g.add_edge(unknown).is_err());
        let indefinite = Edge { i: 0, j: 3, information: -Matrix6::identity(), ..bad };
        assert!(g.add_edge(indefinite).is_err());
        assert!(g.add_edge(Edge { i: 0, j: 3, ..bad }).is_ok());
        assert_eq!(g.loop_count(), 1);
    }

    #[test]
    fn text_round_trip() {
        let mut g = chain(5);
        g.add_edge(Edge {
            kind: EdgeKind::Loop,
            i: 0,
            j: 4,
            measurement: Pose::planar(4.0, 0.1, 0.2),
            information: OdometryInfo::default().information(3),
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        g.write_text(&a).unwrap();
        let back = PoseGraph::read_text(&a).unwrap();
        assert_eq!(back, g);
        back.write_text(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
