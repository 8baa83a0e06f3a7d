use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::sparse::{reverse_cuthill_mckee, SkylineCholesky};
use super::{linearize_at, total_error_at, Edge, EdgeKind, Linearization, OdometryInfo, PoseGraph};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Twist};
use crate::loopclosure::LoopEdge;

/// Damping is applied as `H + lambda * diag(H)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmParams {
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    pub max_iterations: usize,
    /// Stop when the relative error decrease falls below this.
    pub convergence_tol: f64,
    /// Stop when the gradient infinity-norm falls below this.
    pub gradient_tol: f64,
    /// Free-node count above which the envelope solver replaces dense Cholesky.
    pub dense_max_nodes: usize,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e12,
            max_iterations: 100,
            convergence_tol: 1e-9,
            gradient_tol: 1e-8,
            dense_max_nodes: 100,
        }
    }
}

impl LmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_init > 0.0 && self.lambda_up > 1.0 && self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::Config("require lambda_init > 0, lambda_up > 1, 0 < lambda_down < 1".into()));
        }
        if !(self.convergence_tol >= 0.0 && self.gradient_tol >= 0.0) {
            return Err(Error::Config("tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Gradient below tolerance.
    Gradient,
    /// Relative error decrease below tolerance.
    Converged,
    /// Damping saturated without reducing the error.
    NoProgress,
    MaxIterations,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub error: f64,
    pub lambda: f64,
    pub step_norm: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub poses: Vec<Pose>,
    pub initial_error: f64,
    pub final_error: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub log: Vec<IterationLog>,
}

enum Factor {
    Dense(nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>),
    Skyline(SkylineCholesky, Vec<usize>),
}

fn solve_damped(lin: &Linearization, lambda: f64, order: Option<&[usize]>) -> Result<DVector<f64>> {
    let rhs = -&lin.gradient;
    let factor = match order {
        None => {
            let mut h = lin.dense_hessian();
            for i in 0..h.nrows() {
                h[(i, i)] *= 1.0 + lambda;
            }
            Factor::Dense(
                h.cholesky()
                    .ok_or_else(|| Error::SingularSystem("dense Cholesky failed".into()))?,
            )
        }
        Some(o) => Factor::Skyline(SkylineCholesky::factor_blocks(lin.num_vars, &lin.blocks, o, lambda)?, o.to_vec()),
    };
    let x = match factor {
        Factor::Dense(c) => c.solve(&rhs),
        Factor::Skyline(s, o) => s.solve(&o, &rhs),
    };
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularSystem("non-finite step".into()))
    }
}

fn retract_all(poses: &[Pose], var_index: &[Option<usize>], delta: &DVector<f64>) -> Vec<Pose> {
    poses
        .iter()
        .zip(var_index)
        .map(|(p, v)| match v {
            Some(k) => {
                let d = delta.fixed_rows::<6>(6 * k).into_owned();
                p.retract(&Twist::from_vector(&d))
            }
            None => *p,
        })
        .collect()
}

/// Levenberg-Marquardt over the free nodes of `g`; the error never increases.
pub fn optimize(g: &PoseGraph, params: &LmParams) -> Result<OptimizeResult> {
    params.validate()?;
    let mut poses = g.poses().to_vec();
    let mut lin = linearize_at(g, &poses)?;
    let initial_error = lin.error;
    let mut result = OptimizeResult {
        poses: Vec::new(),
        initial_error,
        final_error: initial_error,
        iterations: 0,
        termination: Termination::Gradient,
        log: Vec::new(),
    };
    if lin.num_vars == 0 || lin.gradient_norm_inf() < params.gradient_tol {
        result.poses = poses;
        return Ok(result);
    }
    let order = (lin.num_vars > params.dense_max_nodes)
        .then(|| reverse_cuthill_mckee(lin.num_vars, lin.blocks.keys().copied()));
    let mut lambda = params.lambda_init;
    let mut termination = Termination::MaxIterations;
    for iteration in 1..=params.max_iterations {
        result.iterations = iteration;
        let mut accepted = None;
        while lambda <= params.lambda_max {
            match solve_damped(&lin, lambda, order.as_deref()) {
                Ok(delta) => {
                    let trial = retract_all(&poses, &lin.var_index, &delta);
                    match total_error_at(g, &trial) {
                        Ok(e) if e < lin.error => {
                            accepted = Some((trial, e, delta.norm()));
                            break;
                        }
                        _ => lambda *= params.lambda_up,
                    }
                }
                Err(Error::SingularSystem(_)) => lambda *= params.lambda_up,
                Err(e) => return Err(e),
            }
        }
        let Some((trial, err, step_norm)) = accepted else {
            if lin.error == initial_error && iteration == 1 && lin.gradient_norm_inf() > 0.0 {
                // never managed a step from the start: the system itself is bad
                if solve_damped(&lin, params.lambda_max, order.as_deref()).is_err() {
                    return Err(Error::SingularSystem(format!(
                        "damping reached {:e} without a solvable system",
                        params.lambda_max
                    )));
                }
            }
            termination = Termination::NoProgress;
            break;
        };
        let prev = lin.error;
        poses = trial;
        lambda = (lambda * params.lambda_down).max(1e-15);
        result.log.push(IterationLog {
            iteration,
            error: err,
            lambda,
            step_norm,
        });
        lin = linearize_at(g, &poses)?;
        if (prev - err) / prev.max(f64::MIN_POSITIVE) < params.convergence_tol {
            termination = Termination::Converged;
            break;
        }
        if lin.gradient_norm_inf() < params.gradient_tol {
            termination = Termination::Gradient;
            break;
        }
    }
    result.final_error = lin.error;
    result.termination = termination;
    result.poses = poses;
    Ok(result)
}

/// Grows a graph one kept keyframe at a time and re-optimizes every
/// `reopt_every` insertions.
pub struct IncrementalOptimizer {
    graph: PoseGraph,
    params: LmParams,
    odom: OdometryInfo,
    reopt_every: usize,
    pending: usize,
    last_odom: Option<(u64, Pose)>,
    solve_times: Vec<(u64, f64)>,
    log: Vec<IterationLog>,
}

impl IncrementalOptimizer {
    pub fn new(params: LmParams, odom: OdometryInfo, reopt_every: usize) -> Result<Self> {
        params.validate()?;
        odom.validate()?;
        if reopt_every == 0 {
            return Err(Error::Config("reopt_every must be >= 1".into()));
        }
        Ok(Self {
            graph: PoseGraph::new(),
            params,
            odom,
            reopt_every,
            pending: 0,
            last_odom: None,
            solve_times: Vec::new(),
            log: Vec::new(),
        })
    }

    /// Insert a keyframe (odometry-frame pose) with the loop edges found
    /// for it; optimizes when the insertion counter reaches `reopt_every`.
    pub fn insert(&mut self, id: u64, odom_pose: Pose, loops: &[LoopEdge]) -> Result<()> {
        match self.last_odom {
            None => self.graph.add_node(id, odom_pose)?,
            Some((prev_id, prev_odom)) => {
                let z = prev_odom.relative(&odom_pose);
                let prev_est = *self.graph.pose(prev_id).expect("previous node present");
                self.graph.add_node(id, prev_est.compose(&z))?;
                self.graph.add_edge(Edge {
                    kind: EdgeKind::Odometry,
                    i: prev_id,
                    j: id,
                    measurement: z,
                    information: self.odom.information(id.saturating_sub(prev_id)),
                })?;
            }
        }
        for l in loops {
            self.graph.add_edge((*l).into())?;
        }
        self.last_odom = Some((id, odom_pose));
        self.pending += 1;
        if self.pending == self.reopt_every {
            self.solve()?;
        }
        Ok(())
    }

    fn solve(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let mut r = optimize(&self.graph, &self.params)?;
        self.log.append(&mut r.log);
        self.graph.set_poses(r.poses)?;
        let at = self.graph.ids().last().copied().unwrap_or(0);
        self.solve_times.push((at, t0.elapsed().as_secs_f64()));
        self.pending = 0;
        Ok(())
    }

    /// Flush any insertions since the last solve.
    pub fn finish(&mut self) -> Result<()> {
        if self.pending > 0 {
            self.solve()?;
        }
        Ok(())
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    /// `(last inserted id, seconds)` per solve.
    pub fn solve_times(&self) -> &[(u64, f64)] {
        &self.solve_times
    }

    /// Accepted LM steps of every solve so far, concatenated.
    pub fn log(&self) -> &[IterationLog] {
        &self.log
    }
}
