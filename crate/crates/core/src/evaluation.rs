//! Trajectory and detection metrics, and the deterministic run report.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{apply_alignment, umeyama_align, Pose};
use crate::io::write_series;
use crate::loopclosure::{CandidateOutcome, Classification, LoopCandidate};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TrajectoryMetrics {
    /// Meters, RMSE after rigid alignment.
    pub ate_trans: f64,
    /// Radians, RMSE of residual rotation angles after alignment.
    pub ate_rot: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    pub n_poses: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DetectionMetrics {
    pub candidates: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub verified_edges: usize,
}

impl DetectionMetrics {
    pub fn from_outcomes(outcomes: &[CandidateOutcome]) -> Self {
        let fp = outcomes
            .iter()
            .filter(|o| o.candidate.classification == Classification::FalsePositive)
            .count();
        Self {
            candidates: outcomes.len(),
            true_positives: outcomes.len() - fp,
            false_positives: fp,
            verified_edges: outcomes.iter().filter(|o| o.verified).count(),
        }
    }

    pub fn fpr(&self) -> f64 {
        self.false_positives as f64 / self.candidates.max(1) as f64
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Index-associated ATE after aligning `est` onto `gt`.
pub fn ate(gt: &[Pose], est: &[Pose]) -> Result<(f64, f64)> {
    if gt.len() != est.len() {
        return Err(Error::CountMismatch {
            what: "associated poses",
            left: gt.len(),
            right: est.len(),
        });
    }
    if gt.len() < 3 {
        return Err(Error::TooFewPoses {
            needed: 3,
            got: gt.len(),
        });
    }
    let t = umeyama_align(gt, est)?;
    let aligned = apply_alignment(&t, est);
    let trans = rms(gt.iter().zip(&aligned).map(|(g, a)| (g.translation - a.translation).norm()));
    let rot = rms(gt.iter().zip(&aligned).map(|(g, a)| g.rotation.angle_to(&a.rotation)));
    Ok((trans, rot))
}

/// ATE of `(id, pose)` estimates against a ground-truth sequence indexed by id.
pub fn ate_by_id(gt: &[Pose], est: &[(u64, Pose)]) -> Result<(f64, f64)> {
    let g = est
        .iter()
        .map(|(id, _)| gt.get(*id as usize).copied().ok_or(Error::MissingGroundTruth(*id)))
        .collect::<Result<Vec<_>>>()?;
    let e: Vec<Pose> = est.iter().map(|(_, p)| *p).collect();
    ate(&g, &e)
}

/// Percent reduction; negative when `after` is worse.
pub fn ate_improvement(before: f64, after: f64) -> Result<f64> {
    if !(before > 0.0) {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (before - after) / before)
}

/// RMSE of relative-motion errors over `delta`-step pairs.
pub fn rpe(gt: &[Pose], est: &[Pose], delta: usize) -> Result<(f64, f64)> {
    if gt.len() != est.len() {
        return Err(Error::CountMismatch {
            what: "associated poses",
            left: gt.len(),
            right: est.len(),
        });
    }
    if delta == 0 || gt.len() <= delta {
        return Err(Error::TooFewPoses {
            needed: delta.max(1) + 1,
            got: gt.len(),
        });
    }
    let errs: Vec<Pose> = (0..gt.len() - delta)
        .map(|i| {
            let g = gt[i].relative(&gt[i + delta]);
            let e = est[i].relative(&est[i + delta]);
            g.relative(&e)
        })
        .collect();
    Ok((
        rms(errs.iter().map(|e| e.translation.norm())),
        rms(errs.iter().map(Pose::rotation_angle)),
    ))
}

pub fn fpr(candidates: &[LoopCandidate]) -> f64 {
    let fp = candidates
        .iter()
        .filter(|c| c.classification == Classification::FalsePositive)
        .count();
    fp as f64 / candidates.len().max(1) as f64
}

pub fn trajectory_metrics(gt: &[Pose], est: &[(u64, Pose)], rpe_delta: usize) -> Result<TrajectoryMetrics> {
    let (ate_trans, ate_rot) = ate_by_id(gt, est)?;
    let g: Vec<Pose> = est.iter().map(|(id, _)| gt[*id as usize]).collect();
    let e: Vec<Pose> = est.iter().map(|(_, p)| *p).collect();
    let (rpe_trans, rpe_rot) = rpe(&g, &e, rpe_delta.min(g.len().saturating_sub(1)).max(1))?;
    Ok(TrajectoryMetrics {
        ate_trans,
        ate_rot,
        rpe_trans,
        rpe_rot,
        n_poses: est.len(),
    })
}

/// Everything reported for one sampling method.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MethodResult {
    pub method: String,
    pub total_frames: usize,
    pub kept: usize,
    pub before: TrajectoryMetrics,
    pub after: TrajectoryMetrics,
    pub detection: DetectionMetrics,
    pub peak_memory: usize,
    /// Seconds; zero when wall time is not recorded.
    pub total_time: f64,
    pub pgo_iterations: usize,
    /// `(step, bytes)` after each database insertion.
    pub memory: Vec<(u64, usize)>,
    /// `(step, seconds)` per query.
    pub query_times: Vec<(u64, f64)>,
    /// `(step, seconds)` per optimization.
    pub pgo_times: Vec<(u64, f64)>,
}

impl MethodResult {
    pub fn ate_t_improvement(&self) -> Option<f64> {
        ate_improvement(self.before.ate_trans, self.after.ate_trans).ok()
    }

    pub fn ate_r_improvement(&self) -> Option<f64> {
        ate_improvement(self.before.ate_rot, self.after.ate_rot).ok()
    }

    /// The `summary.csv` row.
    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.kept,
            opt(self.ate_t_improvement()),
            opt(self.ate_r_improvement()),
            self.detection.fpr(),
            self.peak_memory,
            self.total_time
        )
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

pub const SUMMARY_HEADER: &str = "method,kept,ate_t_impr,ate_r_impr,fpr,peak_mem,total_time";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Report {
    /// Ordered key-value metadata (config, seeds, design flags).
    pub metadata: Vec<(String, String)>,
    pub methods: Vec<MethodResult>,
}

pub fn build_report(metadata: Vec<(String, String)>, methods: Vec<MethodResult>) -> Result<Report> {
    if methods.is_empty() {
        return Err(Error::Config("report needs at least one method".into()));
    }
    Ok(Report { metadata, methods })
}

/// Directory-safe method name, e.g. `const:2` becomes `const-2`.
pub fn method_dir_name(method: &str) -> String {
    method
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' })
        .collect()
}

impl Report {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(SUMMARY_HEADER);
        s.push('\n');
        for m in &self.methods {
            s.push_str(&m.summary_row());
            s.push('\n');
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("\n[summary]\n");
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>6} {:>10} {:>10} {:>9} {:>9} {:>10} {:>10} {:>6} {:>12} {:>10}",
            "method", "kept", "frames", "ate_t_pre", "ate_t_post", "t_impr%", "r_impr%", "rpe_t", "rpe_r", "fpr", "peak_mem", "time_s"
        );
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>6} {:>10.4} {:>10.4} {:>9} {:>9} {:>10.4} {:>10.6} {:>6.3} {:>12} {:>10.3}",
                m.method,
                m.kept,
                m.total_frames,
                m.before.ate_trans,
                m.after.ate_trans,
                pct(m.ate_t_improvement()),
                pct(m.ate_r_improvement()),
                m.after.rpe_trans,
                m.after.rpe_rot,
                m.detection.fpr(),
                m.peak_memory,
                m.total_time
            );
        }
        s.push_str("\n[detection]\n");
        for m in &self.methods {
            let d = &m.detection;
            let _ = writeln!(
                s,
                "{}: candidates={} tp={} fp={} verified={} fpr={}",
                m.method,
                d.candidates,
                d.true_positives,
                d.false_positives,
                d.verified_edges,
                d.fpr()
            );
        }
        s.push_str("\n[trajectory]\n");
        for m in &self.methods {
            for (tag, t) in [("odometry", &m.before), ("optimized", &m.after)] {
                let _ = writeln!(
                    s,
                    "{} {}: n={} ate_t={} ate_r={} rpe_t={} rpe_r={}",
                    m.method, tag, t.n_poses, t.ate_trans, t.ate_rot, t.rpe_trans, t.rpe_rot
                );
            }
            let _ = writeln!(s, "{} pgo_iterations: {}", m.method, m.pgo_iterations);
        }
        s
    }

    /// `report.txt`, `summary.csv`, and per-method series directories.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.render())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        for m in &self.methods {
            let d = dir.join(method_dir_name(&m.method));
            std::fs::create_dir_all(&d)?;
            write_series(&d.join("memory.csv"), "step,bytes", &m.memory)?;
            write_series(&d.join("query_time.csv"), "step,seconds", &m.query_times)?;
            write_series(&d.join("pgo_time.csv"), "step,seconds", &m.pgo_times)?;
        }
        Ok(())
    }
}
