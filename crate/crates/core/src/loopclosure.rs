//! Descriptor database, similarity-thresholded candidate retrieval and a
//! simulated registration check that turns candidates into loop edges.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::descriptors::clamped_cosine;
use crate::error::{Error, PathContext, Result};
use crate::geometry::{relative, se3_exp, translation_distance, Pose, Twist};
use crate::sampling::Keyframe;

/// Bytes accounted per stored entry beyond the descriptor payload (id and norm).
pub const ENTRY_OVERHEAD_BYTES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopParams {
    /// Similarity must exceed this strictly.
    pub tau: f64,
    /// Maximum candidates per query; `None` keeps all above `tau`.
    pub k: Option<usize>,
    /// Candidates need `query_id - match_id >= exclusion_gap`.
    pub exclusion_gap: u64,
    /// Ground-truth distance below which a candidate counts as a true revisit (meters).
    pub gt_radius: f64,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            tau: 0.8,
            k: Some(1),
            exclusion_gap: 50,
            gt_radius: 1.0,
        }
    }
}

impl LoopParams {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("tau must be in [-1, 1]".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.gt_radius > 0.0) {
            return Err(Error::Config("gt_radius must be > 0".into()));
        }
        Ok(())
    }
}

/// Stand-in for geometric registration: residual statistics per ground-truth class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationSim {
    /// Measurement noise on true revisits (meters, radians).
    pub sigma_t: f64,
    pub sigma_r: f64,
    /// True-revisit residuals are `|N(0, sigma_residual)|`.
    pub sigma_residual: f64,
    /// Accept iff residual is strictly below this.
    pub residual_threshold: f64,
    /// False-revisit residuals are uniform on this range.
    pub fp_residual_min: f64,
    pub fp_residual_max: f64,
}

impl Default for RegistrationSim {
    fn default() -> Self {
        Self {
            sigma_t: 0.1,
            sigma_r: 0.01,
            sigma_residual: 0.05,
            residual_threshold: 0.3,
            fp_residual_min: 0.2,
            fp_residual_max: 5.0,
        }
    }
}

impl RegistrationSim {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t > 0.0 && self.sigma_r > 0.0 && self.sigma_residual >= 0.0) {
            return Err(Error::Config("registration sigmas must be positive".into()));
        }
        if !(self.fp_residual_min < self.fp_residual_max && self.fp_residual_min >= 0.0) {
            return Err(Error::Config("require 0 <= fp_residual_min < fp_residual_max".into()));
        }
        Ok(())
    }

    pub fn information(&self) -> Matrix6<f64> {
        let t = 1.0 / (self.sigma_t * self.sigma_t);
        let r = 1.0 / (self.sigma_r * self.sigma_r);
        Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classification {
    TruePositive,
    FalsePositive,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::TruePositive => "TP",
            Classification::FalsePositive => "FP",
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopCandidate {
    pub query_id: u64,
    pub match_id: u64,
    pub similarity: f64,
    pub gt_distance: f64,
    pub classification: Classification,
}

/// Relative-pose constraint between keyframes `i` (older) and `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopEdge {
    pub i: u64,
    pub j: u64,
    /// Measured `x_i^-1 x_j`.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Verification {
    Accepted(LoopEdge),
    Rejected { residual: f64 },
}

impl Verification {
    pub fn residual(&self) -> f64 {
        match self {
            Verification::Accepted(e) => e.residual,
            Verification::Rejected { residual } => *residual,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Verification::Accepted(_))
    }
}

/// Flat f32 store scanned exhaustively on every query.
#[derive(Clone, Debug, Default)]
pub struct DescriptorDb {
    dim: usize,
    ids: Vec<u64>,
    norms: Vec<f64>,
    data: Vec<f32>,
    present: HashSet<u64>,
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn norm32(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

impl DescriptorDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Logical footprint: payload plus per-entry overhead.
    pub fn memory_bytes(&self) -> usize {
        self.ids.len() * (self.dim * 4 + ENTRY_OVERHEAD_BYTES)
    }

    pub fn insert(&mut self, kf: &Keyframe) -> Result<()> {
        if self.present.contains(&kf.id) {
            return Err(Error::DuplicateId(kf.id));
        }
        let d = kf.descriptor.dim();
        if self.ids.is_empty() {
            self.dim = d;
        } else if d != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: d,
            });
        }
        let v = to_f32(kf.descriptor.values());
        self.norms.push(norm32(&v));
        self.data.extend_from_slice(&v);
        self.ids.push(kf.id);
        self.present.insert(kf.id);
        Ok(())
    }

    /// Top-k stored entries more similar than `tau` and at least
    /// `exclusion_gap` ids older, in descending similarity.
    pub fn query_candidates(&self, query: &Keyframe, params: &LoopParams, gt: &[Pose]) -> Result<Vec<LoopCandidate>> {
        if self.ids.is_empty() {
            return Ok(Vec::new());
        }
        if query.descriptor.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: query.descriptor.dim(),
            });
        }
        let q = to_f32(query.descriptor.values());
        let nq = norm32(&q);
        if nq < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let mut hits: Vec<(f64, u64)> = Vec::new();
        for (row, (&id, &n)) in self.data.chunks_exact(self.dim).zip(self.ids.iter().zip(&self.norms)) {
            if query.id < id || query.id - id < params.exclusion_gap || n < 1e-12 {
                continue;
            }
            let dot: f64 = row.iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum();
            let s = clamped_cosine(dot, n * n, nq * nq);
            if s > params.tau {
                hits.push((s, id));
            }
        }
        hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if let Some(k) = params.k {
            hits.truncate(k);
        }
        let gt_pose = |id: u64| gt.get(id as usize).ok_or(Error::MissingGroundTruth(id));
        let qp = gt_pose(query.id)?;
        hits.into_iter()
            .map(|(similarity, match_id)| {
                let gt_distance = translation_distance(qp, gt_pose(match_id)?);
                Ok(LoopCandidate {
                    query_id: query.id,
                    match_id,
                    similarity,
                    gt_distance,
                    classification: if gt_distance < params.gt_radius {
                        Classification::TruePositive
                    } else {
                        Classification::FalsePositive
                    },
                })
            })
            .collect()
    }
}

fn gaussian_twist<R: Rng + ?Sized>(rng: &mut R, sigma_t: f64, sigma_r: f64) -> Twist {
    let nt = Normal::new(0.0, sigma_t).expect("sigma > 0");
    let nr = Normal::new(0.0, sigma_r).expect("sigma > 0");
    let rho = Vector3::from_fn(|_, _| nt.sample(rng));
    let phi = Vector3::from_fn(|_, _| nr.sample(rng));
    Twist::new(rho, phi)
}

/// Simulate registration of a candidate. True revisits yield a noisy
/// ground-truth relative pose; false ones a pose displaced by the residual.
pub fn verify_candidate<R: Rng + ?Sized>(
    c: &LoopCandidate,
    gt: &[Pose],
    sim: &RegistrationSim,
    rng: &mut R,
) -> Result<Verification> {
    let get = |id: u64| gt.get(id as usize).ok_or(Error::MissingGroundTruth(id));
    let (i, j) = (c.match_id, c.query_id);
    let z_true = relative(get(i)?, get(j)?);
    let noise = gaussian_twist(rng, sim.sigma_t, sim.sigma_r);
    let (measurement, residual) = match c.classification {
        Classification::TruePositive => {
            let residual = if sim.sigma_residual > 0.0 {
                Normal::new(0.0, sim.sigma_residual).expect("sigma >= 0").sample(rng).abs()
            } else {
                0.0
            };
            (z_true.compose(&se3_exp(&noise)), residual)
        }
        Classification::FalsePositive => {
            let residual = rng.random_range(sim.fp_residual_min..sim.fp_residual_max);
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let offset = Twist::new(noise.rho + Vector3::from(dir) * residual, noise.phi);
            (z_true.compose(&se3_exp(&offset)), residual)
        }
    };
    Ok(if residual < sim.residual_threshold {
        Verification::Accepted(LoopEdge {
            i,
            j,
            measurement,
            information: sim.information(),
            residual,
        })
    } else {
        Verification::Rejected { residual }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateOutcome {
    pub candidate: LoopCandidate,
    pub verified: bool,
    pub residual: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Detection {
    pub outcomes: Vec<CandidateOutcome>,
    pub edges: Vec<LoopEdge>,
    /// `(keyframe id, seconds)` per query.
    pub query_times: Vec<(u64, f64)>,
    /// `(keyframe id, bytes)` after each insertion.
    pub memory: Vec<(u64, usize)>,
}

impl Detection {
    pub fn peak_memory(&self) -> usize {
        self.memory.iter().map(|m| m.1).max().unwrap_or(0)
    }

    pub fn count(&self, class: Classification) -> usize {
        self.outcomes.iter().filter(|o| o.candidate.classification == class).count()
    }
}

/// Incremental detector: query, verify, then insert.
pub struct LoopDetector {
    db: DescriptorDb,
    params: LoopParams,
    sim: RegistrationSim,
    rng: ChaCha8Rng,
    detection: Detection,
}

impl LoopDetector {
    pub fn new(params: LoopParams, sim: RegistrationSim, seed: u64) -> Result<Self> {
        params.validate()?;
        sim.validate()?;
        Ok(Self {
            db: DescriptorDb::new(),
            params,
            sim,
            rng: ChaCha8Rng::seed_from_u64(seed),
            detection: Detection::default(),
        })
    }

    pub fn db(&self) -> &DescriptorDb {
        &self.db
    }

    /// Process one kept keyframe; returns the loop edges it produced.
    pub fn push(&mut self, kf: &Keyframe, gt: &[Pose]) -> Result<Vec<LoopEdge>> {
        let t0 = Instant::now();
        let candidates = self.db.query_candidates(kf, &self.params, gt)?;
        self.detection.query_times.push((kf.id, t0.elapsed().as_secs_f64()));
        let mut edges = Vec::new();
        for c in candidates {
            let v = verify_candidate(&c, gt, &self.sim, &mut self.rng)?;
            self.detection.outcomes.push(CandidateOutcome {
                candidate: c,
                verified: v.is_accepted(),
                residual: v.residual(),
            });
            if let Verification::Accepted(e) = v {
                edges.push(e);
            }
        }
        self.db.insert(kf)?;
        self.detection.memory.push((kf.id, self.db.memory_bytes()));
        self.detection.edges.extend_from_slice(&edges);
        Ok(edges)
    }

    pub fn detection(&self) -> &Detection {
        &self.detection
    }

    pub fn into_detection(self) -> Detection {
        self.detection
    }
}

pub fn detect_all(
    kept: &[Keyframe],
    params: &LoopParams,
    sim: &RegistrationSim,
    gt: &[Pose],
    seed: u64,
) -> Result<Detection> {
    let mut det = LoopDetector::new(params.clone(), sim.clone(), seed)?;
    for kf in kept {
        det.push(kf, gt)?;
    }
    Ok(det.into_detection())
}

pub const CANDIDATE_HEADER: &str = "query_id,match_id,similarity,gt_distance,class,verified,residual";

pub fn write_candidates(path: &Path, outcomes: &[CandidateOutcome]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CANDIDATE_HEADER}")?;
    for o in outcomes {
        let c = &o.candidate;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.query_id, c.match_id, c.similarity, c.gt_distance, c.classification, o.verified, o.residual
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateOutcome>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::parse(path, n + 1, format!("bad {what}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("column count"));
        }
        let classification = match f[4] {
            "TP" => Classification::TruePositive,
            "FP" => Classification::FalsePositive,
            _ => return Err(bad("class")),
        };
        out.push(CandidateOutcome {
            candidate: LoopCandidate {
                query_id: f[0].parse().map_err(|_| bad("query_id"))?,
                match_id: f[1].parse().map_err(|_| bad("match_id"))?,
                similarity: f[2].parse().map_err(|_| bad("similarity"))?,
                gt_distance: f[3].parse().map_err(|_| bad("gt_distance"))?,
                classification,
            },
            verified: f[5].parse().map_err(|_| bad("verified"))?,
            residual: f[6].parse().map_err(|_| bad("residual"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{cosine_similarity, Descriptor};

    fn kf(id: u64, v: Vec<f64>) -> Keyframe {
        Keyframe::new(id, id as f64, Pose::identity(), Descriptor::new(v))
    }

    fn line_gt(n: usize) -> Vec<Pose> {
        (0..n).map(|i| Pose::from_translation(i as f64, 0.0, 0.0)).collect()
    }

    #[test]
    fn self_match_without_exclusion() {
        let mut db = DescriptorDb::new();
        let a = kf(3, vec![1.0, 2.0, 3.0]);
        db.insert(&a).unwrap();
        let p = LoopParams {
            exclusion_gap: 0,
            ..Default::default()
        };
        let c = db.query_candidates(&a, &p, &line_gt(5)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].match_id, 3);
        assert!((c[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_db_and_threshold() {
        let db = DescriptorDb::new();
        assert!(db.query_candidates(&kf(0, vec![1.0, 0.0]), &LoopParams::default(), &line_gt(1)).unwrap().is_empty());
        let mut db = DescriptorDb::new();
        db.insert(&kf(0, vec![1.0, 0.0])).unwrap();
        let p = LoopParams {
            exclusion_gap: 0,
            tau: 0.8,
            ..Default::default()
        };
        // cosine exactly 0.8 is not strictly above tau
        let c = db.query_candidates(&kf(1, vec![0.8, 0.6]), &p, &line_gt(2)).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn exclusion_and_ranking() {
        let mut db = DescriptorDb::new();
        for i in 0..100u64 {
            let t = i as f64 * 0.01;
            db.insert(&kf(i, vec![1.0, t, 0.0])).unwrap();
        }
        let p = LoopParams {
            tau: 0.0,
            k: None,
            exclusion_gap: 50,
            gt_radius: 1.0,
        };
        let q = kf(100, vec![1.0, 0.0, 0.0]);
        let c = db.query_candidates(&q, &p, &line_gt(101)).unwrap();
        assert_eq!(c.len(), 51);
        assert!(c.iter().all(|x| q.id - x.match_id >= 50));
        assert!(c.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert_eq!(c[0].match_id, 0);
        let p1 = LoopParams { k: Some(3), ..p };
        let top = db.query_candidates(&q, &p1, &line_gt(101)).unwrap();
        assert_eq!(top, c[..3].to_vec());
    }

    #[test]
    fn similarity_matches_f32_reference() {
        let mut db = DescriptorDb::new();
        let a = vec![0.3, -0.2, 0.9, 0.1];
        let b = vec![0.25, -0.1, 0.95, 0.0];
        db.insert(&kf(0, a.clone())).unwrap();
        let p = LoopParams { tau: -1.0, exclusion_gap: 1, ..Default::default() };
        let c = db.query_candidates(&kf(1, b.clone()), &p, &line_gt(2)).unwrap();
        let exact = cosine_similarity(&Descriptor::new(a), &Descriptor::new(b)).unwrap();
        assert!((c[0].similarity - exact).abs() < 1e-6);
    }

    #[test]
    fn classification_by_gt_distance() {
        let gt = vec![Pose::from_translation(0.0, 0.0, 0.0), Pose::from_translation(0.99, 0.0, 0.0), Pose::from_translation(1.0, 0.0, 0.0)];
        let mut db = DescriptorDb::new();
        db.insert(&kf(0, vec![1.0, 0.0])).unwrap();
        let p = LoopParams { exclusion_gap: 1, ..Default::default() };
        let c1 = db.query_candidates(&kf(1, vec![1.0, 0.0]), &p, &gt).unwrap();
        assert_eq!(c1[0].classification, Classification::TruePositive);
        let c2 = db.query_candidates(&kf(2, vec![1.0, 0.0]), &p, &gt).unwrap();
        assert_eq!(c2[0].classification, Classification::FalsePositive);
        assert!(matches!(
            db.query_candidates(&kf(7, vec![1.0, 0.0]), &p, &gt),
            Err(Error::MissingGroundTruth(7))
        ));
    }

    #[test]
    fn duplicate_and_dimension_errors() {
        let mut db = DescriptorDb::new();
        db.insert(&kf(0, vec![1.0, 0.0])).unwrap();
        assert!(matches!(db.insert(&kf(0, vec![1.0, 0.0])), Err(Error::DuplicateId(0))));
        assert!(matches!(db.insert(&kf(1, vec![1.0])), Err(Error::DimensionMismatch { .. })));
        assert_eq!(db.memory_bytes(), 2 * 4 + ENTRY_OVERHEAD_BYTES);
    }

    fn normal_cdf_abs_below(x: f64, sigma: f64) -> f64 {
        // Simpson integration of the half-normal density on [0, x].
        let n = 20_000;
        let h = x / n as f64;
        let f = |t: f64| (2.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt())) * (-(t * t) / (2.0 * sigma * sigma)).exp();
        let mut s = f(0.0) + f(x);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn verification_rates() {
        let gt = line_gt(200);
        let sim = RegistrationSim::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |class| LoopCandidate {
            query_id: 150,
            match_id: 10,
            similarity: 0.9,
            gt_distance: 0.5,
            classification: class,
        };
        let trials = 20_000;
        let tp = (0..trials)
            .filter(|_| verify_candidate(&mk(Classification::TruePositive), &gt, &sim, &mut rng).unwrap().is_accepted())
            .count() as f64
            / trials as f64;
        let expected_tp = normal_cdf_abs_below(sim.residual_threshold, sim.sigma_residual);
        assert!(expected_tp > 0.99);
        assert!(tp > 0.99, "{tp}");
        let fp = (0..trials)
            .filter(|_| verify_candidate(&mk(Classification::FalsePositive), &gt, &sim, &mut rng).unwrap().is_accepted())
            .count() as f64
            / trials as f64;
        let expected_fp = (sim.residual_threshold - sim.fp_residual_min) / (sim.fp_residual_max - sim.fp_residual_min);
        assert!((fp - expected_fp).abs() < 0.01, "{fp} vs {expected_fp}");
        assert!(fp < 0.05);
    }

    #[test]
    fn accepted_edge_is_near_truth() {
        let gt: Vec<Pose> = (0..100).map(|i| Pose::planar(i as f64, (i as f64).sin(), 0.1 * i as f64)).collect();
        let sim = RegistrationSim::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = LoopCandidate {
            query_id: 80,
            match_id: 20,
            similarity: 0.95,
            gt_distance: 0.1,
            classification: Classification::TruePositive,
        };
        match verify_candidate(&c, &gt, &sim, &mut rng).unwrap() {
            Verification::Accepted(e) => {
                assert_eq!((e.i, e.j), (20, 80));
                let truth = relative(&gt[20], &gt[80]);
                assert!(translation_distance(&truth, &e.measurement) < 1.0);
                assert!((e.information[(0, 0)] - 100.0).abs() < 1e-9);
                assert!((e.information[(5, 5)] - 10_000.0).abs() < 1e-6);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detector_is_deterministic_and_csv_round_trips() {
        let n = 200;
        let gt: Vec<Pose> = (0..n)
            .map(|i| {
                let th = i as f64 * std::f64::consts::TAU / 100.0;
                Pose::planar(10.0 * th.sin(), 10.0 * (1.0 - th.cos()), th)
            })
            .collect();
        let kfs: Vec<Keyframe> = (0..n)
            .map(|i| {
                let th = i as f64 * std::f64::consts::TAU / 100.0;
                kf(i as u64, vec![th.cos(), th.sin(), 0.05])
            })
            .collect();
        let p = LoopParams { tau: 0.99, ..Default::default() };
        let sim = RegistrationSim::default();
        let a = detect_all(&kfs, &p, &sim, &gt, 1).unwrap();
        let b = detect_all(&kfs, &p, &sim, &gt, 1).unwrap();
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.edges, b.edges);
        assert!(!a.edges.is_empty());
        assert_eq!(a.memory.len(), n);
        assert_eq!(a.peak_memory(), n * (3 * 4 + ENTRY_OVERHEAD_BYTES));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_candidates(&path, &a.outcomes).unwrap();
        assert_eq!(read_candidates(&path).unwrap(), a.outcomes);
    }
}
