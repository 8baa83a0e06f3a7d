//! Run configuration, dataset ingestion and the sample -> detect -> optimize
//! -> evaluate pipeline in batch and streaming form.
//!
//! Every stage has a file-level counterpart so the CLI can run stages
//! separately; `run_batch` writes exactly the files the staged commands do.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result, StageContext};
use crate::evaluation::{
    build_report, method_dir_name, trajectory_metrics, DetectionMetrics, MethodResult, Report,
};
use crate::geometry::Pose;
use crate::io::{
    read_channels, read_descriptors, read_ids, read_kitti_poses, read_series, read_tum, write_channels,
    write_descriptors, write_ids, write_kitti_poses, write_series, write_tum, ChannelRow, TumRecord,
};
use crate::loopclosure::{
    read_candidates, write_candidates, CandidateOutcome, Detection, LoopDetector, LoopParams, RegistrationSim,
};
use crate::posegraph::{
    build_graph, optimize, read_edges, write_edges, Edge, IncrementalOptimizer, IterationLog, LmParams,
    OdometryInfo, OptimizeResult, PoseGraph,
};
use crate::sampling::{make_sampler, Keyframe, SamplerConfig, SamplerMethod, WindowSolution};
use crate::synthworld::{generate, gt_loop_pairs, Dataset, WorldConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseFormat {
    Kitti,
    Tum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    /// Ground-truth trajectory.
    pub poses: PathBuf,
    pub format: PoseFormat,
    /// Drifting odometry in the same format; absent means no-drift mode.
    #[serde(default)]
    pub odometry: Option<PathBuf>,
    /// KFD1 descriptor file, one row per pose.
    pub descriptors: PathBuf,
    #[serde(default)]
    pub channels: Option<PathBuf>,
    /// Seconds between frames when the pose format has no timestamps.
    #[serde(default = "default_frame_period")]
    pub frame_period: f64,
}

fn default_frame_period() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(WorldConfig),
    Files(FileSource),
}

fn default_reopt() -> usize {
    10
}

fn default_rpe_delta() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Seeds loop verification; the CLI override also reseeds a synthetic world.
    pub seed: u64,
    pub dataset: DatasetSource,
    pub methods: Vec<SamplerMethod>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub loops: LoopParams,
    #[serde(default)]
    pub registration: RegistrationSim,
    #[serde(default)]
    pub odometry_information: OdometryInfo,
    #[serde(default)]
    pub lm: LmParams,
    #[serde(default = "default_reopt")]
    pub reopt_every: usize,
    /// RPE step in kept poses.
    #[serde(default = "default_rpe_delta")]
    pub rpe_delta: usize,
    /// When false every timing value is written as 0 so artifacts are reproducible.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn synthetic(world: WorldConfig, methods: Vec<SamplerMethod>) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: world.seed,
            dataset: DatasetSource::Synthetic(world),
            methods,
            sampler: SamplerConfig::default(),
            loops: LoopParams::default(),
            registration: RegistrationSim::default(),
            odometry_information: OdometryInfo::default(),
            lm: LmParams::default(),
            reopt_every: default_reopt(),
            rpe_delta: 1,
            record_wall_time: true,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if !(self.loops.tau > 0.0 && self.loops.tau < 1.0) {
            return Err(Error::Config("loops.tau must be in (0, 1)".into()));
        }
        if self.reopt_every == 0 || self.rpe_delta == 0 {
            return Err(Error::Config("reopt_every and rpe_delta must be >= 1".into()));
        }
        self.loops.validate()?;
        self.registration.validate()?;
        self.odometry_information.validate()?;
        self.lm.validate()?;
        if self.methods.contains(&SamplerMethod::Msa) || self.methods.contains(&SamplerMethod::Spaciousness) {
            self.sampler.validate()?;
        }
        for m in &self.methods {
            if let SamplerMethod::Constant(d) = m {
                if !(*d > 0.0) {
                    return Err(Error::Config(format!("const interval must be > 0, got {d}")));
                }
            }
        }
        match &self.dataset {
            DatasetSource::Synthetic(w) => w.validate(),
            DatasetSource::Files(f) if !(f.frame_period >= 0.0) => {
                Err(Error::Config("frame_period must be >= 0".into()))
            }
            DatasetSource::Files(_) => Ok(()),
        }
    }

    /// Override the run seed, and the world seed of a synthetic source.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let DatasetSource::Synthetic(w) = &mut self.dataset {
            w.seed = seed;
        }
    }

    fn no_drift(&self) -> bool {
        matches!(&self.dataset, DatasetSource::Files(f) if f.odometry.is_none())
    }

    /// The config minus its output location, which is not part of the
    /// experiment; this is what reports and `config.json` record.
    pub fn experiment(&self) -> RunConfig {
        RunConfig {
            output_dir: None,
            ..self.clone()
        }
    }

    /// Ordered report metadata: config, seeds and design flags.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let experiment = self.experiment();
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("config_version", self.version.to_string()),
            kv("seed", self.seed.to_string()),
            kv(
                "dataset",
                match &self.dataset {
                    DatasetSource::Synthetic(w) => format!("synthetic world seed {}", w.seed),
                    DatasetSource::Files(f) => format!("files {}", f.poses.display()),
                },
            ),
            kv("no_drift_mode", self.no_drift().to_string()),
            kv("scoring_mode", self.sampler.scoring_mode.as_str().to_string()),
            kv("pi_normalization", "divide by max consecutive transformed distance".into()),
            kv("fpr_denominator", "all candidates above tau".into()),
            kv("ate_pose_set", "kept poses only".into()),
            kv("odometry_edges", "composed relative motion between consecutive kept keyframes".into()),
            kv("memory_accounting", "logical: dim*4 + 16 bytes per stored descriptor".into()),
            kv("record_wall_time", self.record_wall_time.to_string()),
            kv("config", serde_json::to_string(&experiment).expect("config serializes")),
        ]
    }
}

/// Resolve a configured dataset into memory.
pub fn load_dataset(src: &DatasetSource, loops: &LoopParams) -> Result<Dataset> {
    let f = match src {
        DatasetSource::Synthetic(w) => return generate(w),
        DatasetSource::Files(f) => f,
    };
    let read = |p: &Path| -> Result<(Vec<Pose>, Option<Vec<f64>>)> {
        match f.format {
            PoseFormat::Kitti => Ok((read_kitti_poses(p)?, None)),
            PoseFormat::Tum => {
                let r = read_tum(p)?;
                Ok((r.iter().map(|x| x.pose).collect(), Some(r.iter().map(|x| x.timestamp).collect())))
            }
        }
    };
    let (gt, stamps) = read(&f.poses)?;
    let odom = match &f.odometry {
        Some(p) => {
            let (o, _) = read(p)?;
            if o.len() != gt.len() {
                return Err(Error::CountMismatch {
                    what: "odometry vs ground-truth poses",
                    left: o.len(),
                    right: gt.len(),
                });
            }
            o
        }
        None => gt.clone(),
    };
    let descriptors = read_descriptors(&f.descriptors)?;
    if descriptors.len() != gt.len() {
        return Err(Error::CountMismatch {
            what: "descriptors vs poses",
            left: descriptors.len(),
            right: gt.len(),
        });
    }
    let channels: HashMap<u64, ChannelRow> = match &f.channels {
        Some(p) => read_channels(p)?.into_iter().map(|r| (r.id, r)).collect(),
        None => HashMap::new(),
    };
    let keyframes = descriptors
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let id = i as u64;
            let ts = stamps.as_ref().map_or(i as f64 * f.frame_period, |s| s[i]);
            let mut kf = Keyframe::new(id, ts, odom[i], d);
            if let Some(c) = channels.get(&id) {
                kf.spaciousness = c.spaciousness;
                kf.entropy_proxy = c.entropy_proxy;
            }
            kf
        })
        .collect();
    Ok(Dataset {
        gt_loop_pairs: gt_loop_pairs(&gt, loops.gt_radius, loops.exclusion_gap),
        gt_poses: gt,
        odom_poses: odom,
        keyframes,
        no_drift: f.odometry.is_none(),
    })
}

fn tum_records(ids: &[u64], poses: &[Pose], timestamps: &[f64]) -> Vec<TumRecord> {
    ids.iter()
        .zip(poses)
        .map(|(&id, &pose)| TumRecord {
            timestamp: timestamps.get(id as usize).copied().unwrap_or(id as f64),
            pose,
        })
        .collect()
}

fn timestamps(ds: &Dataset) -> Vec<f64> {
    ds.keyframes.iter().map(|k| k.timestamp).collect()
}

/// Write a dataset as pose, descriptor and channel files and return the
/// matching file source.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<FileSource> {
    std::fs::create_dir_all(dir)?;
    let ids: Vec<u64> = (0..ds.len() as u64).collect();
    let ts = timestamps(ds);
    write_kitti_poses(&dir.join("gt.kitti"), &ds.gt_poses)?;
    write_kitti_poses(&dir.join("odom.kitti"), &ds.odom_poses)?;
    write_tum(&dir.join("gt.tum"), &tum_records(&ids, &ds.gt_poses, &ts))?;
    write_tum(&dir.join("odom.tum"), &tum_records(&ids, &ds.odom_poses, &ts))?;
    let descriptors: Vec<_> = ds.keyframes.iter().map(|k| k.descriptor.clone()).collect();
    write_descriptors(&dir.join("descriptors.kfd"), &descriptors)?;
    let rows: Vec<ChannelRow> = ds
        .keyframes
        .iter()
        .map(|k| ChannelRow {
            id: k.id,
            spaciousness: k.spaciousness,
            entropy_proxy: k.entropy_proxy,
        })
        .collect();
    write_channels(&dir.join("channels.csv"), &rows)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("loop_pairs.csv"))?);
    writeln!(w, "i,j")?;
    for (i, j) in &ds.gt_loop_pairs {
        writeln!(w, "{i},{j}")?;
    }
    w.flush()?;
    let abs = |name: &str| std::path::absolute(dir.join(name)).unwrap_or_else(|_| dir.join(name));
    Ok(FileSource {
        poses: abs("gt.tum"),
        format: PoseFormat::Tum,
        odometry: Some(abs("odom.tum")),
        descriptors: abs("descriptors.kfd"),
        channels: Some(abs("channels.csv")),
        frame_period: ds
            .keyframes
            .get(1)
            .map_or(default_frame_period(), |k| k.timestamp - ds.keyframes[0].timestamp),
    })
}

fn clock(record: bool, t0: Instant) -> f64 {
    if record {
        t0.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

pub struct SampleOutput {
    pub kept: Vec<Keyframe>,
    pub windows: Vec<WindowSolution>,
    pub seconds: f64,
}

pub fn sample_stage(ds: &Dataset, method: &SamplerMethod, cfg: &RunConfig) -> Result<SampleOutput> {
    let t0 = Instant::now();
    let mut sampler = make_sampler(method, &cfg.sampler)?;
    let mut kept = Vec::new();
    for kf in &ds.keyframes {
        kept.extend(sampler.push(kf.clone())?);
    }
    kept.extend(sampler.finish()?);
    Ok(SampleOutput {
        kept,
        windows: sampler.window_solutions().to_vec(),
        seconds: clock(cfg.record_wall_time, t0),
    })
}

pub fn loops_stage(ds: &Dataset, kept: &[Keyframe], cfg: &RunConfig) -> Result<(Detection, f64)> {
    let t0 = Instant::now();
    let mut det = LoopDetector::new(cfg.loops.clone(), cfg.registration.clone(), cfg.seed)?;
    for kf in kept {
        det.push(kf, &ds.gt_poses)?;
    }
    let mut d = det.into_detection();
    if !cfg.record_wall_time {
        d.query_times.iter_mut().for_each(|q| q.1 = 0.0);
    }
    Ok((d, clock(cfg.record_wall_time, t0)))
}

pub struct PgoOutput {
    pub graph: PoseGraph,
    pub result: OptimizeResult,
    pub seconds: f64,
}

pub fn pgo_stage(kept: &[(u64, Pose)], loops: &[Edge], cfg: &RunConfig) -> Result<PgoOutput> {
    let graph = build_graph(kept, loops, &cfg.odometry_information)?;
    let t0 = Instant::now();
    let result = optimize(&graph, &cfg.lm)?;
    Ok(PgoOutput {
        graph,
        result,
        seconds: clock(cfg.record_wall_time, t0),
    })
}

/// Everything one method produces, in memory.
pub struct MethodRun {
    pub method: SamplerMethod,
    pub kept_ids: Vec<u64>,
    pub windows: Vec<WindowSolution>,
    pub outcomes: Vec<CandidateOutcome>,
    pub loop_edges: Vec<Edge>,
    /// Graph with odometry initial estimates.
    pub graph: PoseGraph,
    pub initial: Vec<(u64, Pose)>,
    pub optimized: Vec<(u64, Pose)>,
    pub pgo_log: Vec<IterationLog>,
    pub stage_times: Vec<(&'static str, f64)>,
    pub result: MethodResult,
}

fn evaluate_run(
    ds_gt: &[Pose],
    method: &SamplerMethod,
    initial: &[(u64, Pose)],
    optimized: &[(u64, Pose)],
    detection: DetectionMetrics,
    series: (Vec<(u64, usize)>, Vec<(u64, f64)>, Vec<(u64, f64)>),
    pgo_iterations: usize,
    total_time: f64,
    rpe_delta: usize,
) -> Result<MethodResult> {
    let (memory, query_times, pgo_times) = series;
    Ok(MethodResult {
        method: method.to_string(),
        total_frames: ds_gt.len(),
        kept: initial.len(),
        before: trajectory_metrics(ds_gt, initial, rpe_delta)?,
        after: trajectory_metrics(ds_gt, optimized, rpe_delta)?,
        detection,
        peak_memory: memory.iter().map(|m| m.1).max().unwrap_or(0),
        total_time,
        pgo_iterations,
        memory,
        query_times,
        pgo_times,
    })
}

/// One method through the batch pipeline.
pub fn run_method_batch(ds: &Dataset, method: &SamplerMethod, cfg: &RunConfig) -> Result<MethodRun> {
    let s = sample_stage(ds, method, cfg).stage("sample")?;
    let (det, loop_secs) = loops_stage(ds, &s.kept, cfg).stage("loops")?;
    let initial: Vec<(u64, Pose)> = s.kept.iter().map(|k| (k.id, k.pose)).collect();
    let loop_edges: Vec<Edge> = det.edges.iter().map(|&e| e.into()).collect();
    let p = pgo_stage(&initial, &loop_edges, cfg).stage("pgo")?;
    let optimized: Vec<(u64, Pose)> = p.graph.ids().iter().copied().zip(p.result.poses.iter().copied()).collect();
    let t0 = Instant::now();
    let stage_times = vec![("sample", s.seconds), ("loops", loop_secs), ("pgo", p.seconds)];
    let total: f64 = stage_times.iter().map(|t| t.1).sum();
    let last_id = initial.last().map_or(0, |k| k.0);
    let result = evaluate_run(
        &ds.gt_poses,
        method,
        &initial,
        &optimized,
        DetectionMetrics::from_outcomes(&det.outcomes),
        (det.memory.clone(), det.query_times.clone(), vec![(last_id, p.seconds)]),
        p.result.log.len(),
        total,
        cfg.rpe_delta,
    )
    .stage("eval")?;
    let _ = clock(cfg.record_wall_time, t0);
    Ok(MethodRun {
        method: method.clone(),
        kept_ids: s.kept.iter().map(|k| k.id).collect(),
        windows: s.windows,
        outcomes: det.outcomes,
        loop_edges,
        graph: p.graph,
        initial,
        optimized,
        pgo_log: p.result.log,
        stage_times,
        result,
    })
}

/// One method through the streaming pipeline: sample online, query and
/// insert, verify, append edges, re-optimize every `reopt_every` keyframes.
pub fn run_method_online(ds: &Dataset, method: &SamplerMethod, cfg: &RunConfig) -> Result<MethodRun> {
    let t0 = Instant::now();
    let mut sampler = make_sampler(method, &cfg.sampler).stage("sample")?;
    let mut det = LoopDetector::new(cfg.loops.clone(), cfg.registration.clone(), cfg.seed).stage("loops")?;
    let mut inc = IncrementalOptimizer::new(cfg.lm.clone(), cfg.odometry_information.clone(), cfg.reopt_every)
        .stage("pgo")?;
    let mut kept_all = Vec::new();
    let mut process = |kept: Vec<Keyframe>,
                       det: &mut LoopDetector,
                       inc: &mut IncrementalOptimizer|
     -> Result<()> {
        for kf in kept {
            let edges = det.push(&kf, &ds.gt_poses).stage("loops")?;
            inc.insert(kf.id, kf.pose, &edges).stage("pgo")?;
            kept_all.push(kf);
        }
        Ok(())
    };
    for kf in &ds.keyframes {
        let kept = sampler.push(kf.clone()).stage("sample")?;
        process(kept, &mut det, &mut inc)?;
    }
    let kept = sampler.finish().stage("sample")?;
    process(kept, &mut det, &mut inc)?;
    inc.finish().stage("pgo")?;
    let total = clock(cfg.record_wall_time, t0);

    let mut detection = det.into_detection();
    let mut pgo_times = inc.solve_times().to_vec();
    if !cfg.record_wall_time {
        detection.query_times.iter_mut().for_each(|q| q.1 = 0.0);
        pgo_times.iter_mut().for_each(|q| q.1 = 0.0);
    }
    let initial: Vec<(u64, Pose)> = kept_all.iter().map(|k| (k.id, k.pose)).collect();
    let optimized: Vec<(u64, Pose)> = inc
        .graph()
        .ids()
        .iter()
        .copied()
        .zip(inc.graph().poses().iter().copied())
        .collect();
    let loop_edges: Vec<Edge> = detection.edges.iter().map(|&e| e.into()).collect();
    let graph = build_graph(&initial, &loop_edges, &cfg.odometry_information).stage("pgo")?;
    let result = evaluate_run(
        &ds.gt_poses,
        method,
        &initial,
        &optimized,
        DetectionMetrics::from_outcomes(&detection.outcomes),
        (detection.memory.clone(), detection.query_times.clone(), pgo_times),
        inc.log().len(),
        total,
        cfg.rpe_delta,
    )
    .stage("eval")?;
    Ok(MethodRun {
        method: method.clone(),
        kept_ids: initial.iter().map(|k| k.0).collect(),
        windows: sampler.window_solutions().to_vec(),
        outcomes: detection.outcomes,
        loop_edges,
        graph,
        initial,
        optimized,
        pgo_log: inc.log().to_vec(),
        stage_times: vec![("online", total)],
        result,
    })
}

pub const WINDOW_HEADER: &str =
    "window,first_id,last_id,selected_ids,rho,pi,objective,candidates_evaluated,feasible_subsets,power_set_size,constraint_feasible";

pub fn write_windows(path: &Path, windows: &[WindowSolution], kept_windows_ids: &[(u64, u64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{WINDOW_HEADER}")?;
    for (k, (s, (first, last))) in windows.iter().zip(kept_windows_ids).enumerate() {
        let ids: Vec<String> = s.selected_ids.iter().map(u64::to_string).collect();
        writeln!(
            w,
            "{k},{first},{last},{},{},{},{},{},{},{},{}",
            ids.join(" "),
            s.rho,
            s.pi,
            s.objective,
            s.candidates_evaluated,
            s.feasible_subsets,
            s.power_set_size,
            s.constraint_feasible
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Window id spans, assuming consecutive non-overlapping windows of the stream.
fn window_spans(ds: &Dataset, windows: &[WindowSolution], n: usize) -> Vec<(u64, u64)> {
    let ids: Vec<u64> = ds.keyframes.iter().map(|k| k.id).collect();
    windows
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let a = (k * n).min(ids.len().saturating_sub(1));
            let b = ((k + 1) * n).min(ids.len()) - 1;
            (ids[a], ids[b.max(a)])
        })
        .collect()
}

fn write_pgo_log(path: &Path, log: &[IterationLog]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,error,lambda,step_norm")?;
    for l in log {
        writeln!(w, "{},{},{},{}", l.iteration, l.error, l.lambda, l.step_norm)?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing(path: &Path, stages: &[(&str, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "stage,seconds")?;
    let mut total = 0.0;
    for (s, t) in stages {
        writeln!(w, "{s},{t}")?;
        total += t;
    }
    writeln!(w, "total,{total}")?;
    w.flush()?;
    Ok(())
}

fn read_timing_total(path: &Path) -> Result<f64> {
    if !path.exists() {
        return Ok(0.0);
    }
    let text = std::fs::read_to_string(path).at(path)?;
    for (n, line) in text.lines().enumerate() {
        if let Some(v) = line.strip_prefix("total,") {
            return v.parse().map_err(|_| Error::parse(path, n + 1, "bad total"));
        }
    }
    Ok(0.0)
}

impl MethodRun {
    /// Per-method artifact directory.
    pub fn write(&self, ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<()> {
        let dir = out.join(method_dir_name(&self.method.to_string()));
        std::fs::create_dir_all(&dir)?;
        let ts = timestamps(ds);
        write_ids(&dir.join("kept_ids.csv"), &self.kept_ids)?;
        if !self.windows.is_empty() {
            let spans = window_spans(ds, &self.windows, cfg.sampler.window_size);
            write_windows(&dir.join("windows.csv"), &self.windows, &spans)?;
        }
        write_candidates(&dir.join("candidates.csv"), &self.outcomes)?;
        write_edges(&dir.join("loop_edges.txt"), &self.loop_edges)?;
        self.graph.write_text(&dir.join("graph.txt"))?;
        let (ids, init): (Vec<u64>, Vec<Pose>) = self.initial.iter().copied().unzip();
        write_tum(&dir.join("initial.tum"), &tum_records(&ids, &init, &ts))?;
        let (oids, opt): (Vec<u64>, Vec<Pose>) = self.optimized.iter().copied().unzip();
        write_tum(&dir.join("optimized.tum"), &tum_records(&oids, &opt, &ts))?;
        write_series(&dir.join("memory.csv"), "step,bytes", &self.result.memory)?;
        write_series(&dir.join("query_time.csv"), "step,seconds", &self.result.query_times)?;
        write_series(&dir.join("pgo_time.csv"), "step,seconds", &self.result.pgo_times)?;
        write_pgo_log(&dir.join("pgo_log.csv"), &self.pgo_log)?;
        write_timing(&dir.join("timing.csv"), &self.stage_times)?;
        Ok(())
    }
}

fn write_top_level(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let ids: Vec<u64> = (0..ds.len() as u64).collect();
    write_tum(&out.join("gt.tum"), &tum_records(&ids, &ds.gt_poses, &timestamps(ds)))?;
    std::fs::write(out.join("config.json"), cfg.experiment().to_json())?;
    Ok(())
}

fn run_all(cfg: &RunConfig, online: bool) -> Result<(Dataset, Vec<MethodRun>)> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset, &cfg.loops).stage("load")?;
    let runs: Vec<MethodRun> = cfg
        .methods
        .par_iter()
        .map(|m| {
            if online {
                run_method_online(&ds, m, cfg)
            } else {
                run_method_batch(&ds, m, cfg)
            }
        })
        .collect::<Result<_>>()?;
    Ok((ds, runs))
}

fn finish(cfg: &RunConfig, ds: &Dataset, runs: Vec<MethodRun>) -> Result<(Report, Vec<MethodRun>)> {
    let report = build_report(cfg.metadata(), runs.iter().map(|r| r.result.clone()).collect())?;
    if let Some(out) = &cfg.output_dir {
        write_top_level(ds, cfg, out).stage("write")?;
        for r in &runs {
            r.write(ds, cfg, out).stage("write")?;
        }
        report.write(out).stage("write")?;
    }
    Ok((report, runs))
}

/// Batch pipeline over every configured method.
pub fn run_batch(cfg: &RunConfig) -> Result<Report> {
    run_batch_detailed(cfg).map(|r| r.0)
}

pub fn run_batch_detailed(cfg: &RunConfig) -> Result<(Report, Vec<MethodRun>)> {
    let (ds, runs) = run_all(cfg, false)?;
    finish(cfg, &ds, runs)
}

/// Streaming pipeline over every configured method.
pub fn run_online(cfg: &RunConfig) -> Result<Report> {
    run_online_detailed(cfg).map(|r| r.0)
}

pub fn run_online_detailed(cfg: &RunConfig) -> Result<(Report, Vec<MethodRun>)> {
    let (ds, runs) = run_all(cfg, true)?;
    finish(cfg, &ds, runs)
}

fn method_dir(out: &Path, m: &SamplerMethod) -> PathBuf {
    out.join(method_dir_name(&m.to_string()))
}

fn kept_from_ids(ds: &Dataset, ids: &[u64]) -> Result<Vec<Keyframe>> {
    ids.iter()
        .map(|&id| ds.keyframes.get(id as usize).cloned().ok_or(Error::MissingGroundTruth(id)))
        .collect()
}

/// `sample` stage: writes `kept_ids.csv` (and `windows.csv` for window samplers).
pub fn stage_sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, &cfg.loops).stage("load")?;
    write_top_level(&ds, cfg, out)?;
    for m in &cfg.methods {
        let s = sample_stage(&ds, m, cfg).stage("sample")?;
        let dir = method_dir(out, m);
        std::fs::create_dir_all(&dir)?;
        write_ids(&dir.join("kept_ids.csv"), &s.kept.iter().map(|k| k.id).collect::<Vec<_>>())?;
        if !s.windows.is_empty() {
            write_windows(&dir.join("windows.csv"), &s.windows, &window_spans(&ds, &s.windows, cfg.sampler.window_size))?;
        }
        append_timing(&dir, "sample", s.seconds)?;
    }
    Ok(())
}

fn append_timing(dir: &Path, stage: &str, secs: f64) -> Result<()> {
    let path = dir.join("timing.csv");
    let mut stages: Vec<(String, f64)> = Vec::new();
    if path.exists() {
        let text = std::fs::read_to_string(&path).at(&path)?;
        for line in text.lines().skip(1) {
            if let Some((s, t)) = line.split_once(',') {
                if s != "total" && s != stage {
                    stages.push((s.to_string(), t.parse().unwrap_or(0.0)));
                }
            }
        }
    } else if stage != "sample" {
        // staged runs start from `sample`; a missing file means untimed earlier stages
    }
    stages.push((stage.to_string(), secs));
    let refs: Vec<(&str, f64)> = stages.iter().map(|(s, t)| (s.as_str(), *t)).collect();
    write_timing(&path, &refs)
}

/// `loops` stage: reads `kept_ids.csv`, writes candidates, loop edges and
/// the memory / query-time series.
pub fn stage_loops(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, &cfg.loops).stage("load")?;
    for m in &cfg.methods {
        let dir = method_dir(out, m);
        let kept = kept_from_ids(&ds, &read_ids(&dir.join("kept_ids.csv"))?)?;
        let (det, secs) = loops_stage(&ds, &kept, cfg).stage("loops")?;
        write_candidates(&dir.join("candidates.csv"), &det.outcomes)?;
        let edges: Vec<Edge> = det.edges.iter().map(|&e| e.into()).collect();
        write_edges(&dir.join("loop_edges.txt"), &edges)?;
        write_series(&dir.join("memory.csv"), "step,bytes", &det.memory)?;
        write_series(&dir.join("query_time.csv"), "step,seconds", &det.query_times)?;
        append_timing(&dir, "loops", secs)?;
    }
    Ok(())
}

/// `pgo` stage: builds the graph from kept ids and loop edges, optimizes,
/// writes the graph dump and both trajectories.
pub fn stage_pgo(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(&cfg.dataset, &cfg.loops).stage("load")?;
    let ts = timestamps(&ds);
    for m in &cfg.methods {
        let dir = method_dir(out, m);
        let kept = kept_from_ids(&ds, &read_ids(&dir.join("kept_ids.csv"))?)?;
        let loops = read_edges(&dir.join("loop_edges.txt"))?;
        let initial: Vec<(u64, Pose)> = kept.iter().map(|k| (k.id, k.pose)).collect();
        let p = pgo_stage(&initial, &loops, cfg).stage("pgo")?;
        p.graph.write_text(&dir.join("graph.txt"))?;
        let ids: Vec<u64> = initial.iter().map(|k| k.0).collect();
        let init: Vec<Pose> = initial.iter().map(|k| k.1).collect();
        write_tum(&dir.join("initial.tum"), &tum_records(&ids, &init, &ts))?;
        write_tum(&dir.join("optimized.tum"), &tum_records(&ids, &p.result.poses, &ts))?;
        write_series(&dir.join("pgo_time.csv"), "step,seconds", &[(ids.last().copied().unwrap_or(0), p.seconds)])?;
        write_pgo_log(&dir.join("pgo_log.csv"), &p.result.log)?;
        append_timing(&dir, "pgo", p.seconds)?;
    }
    Ok(())
}

/// `eval` stage: recompute every report row from the dumped artifacts.
pub fn evaluate_dir(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let gt: Vec<Pose> = read_tum(&out.join("gt.tum"))?.into_iter().map(|r| r.pose).collect();
    let mut rows = Vec::new();
    for m in &cfg.methods {
        let dir = method_dir(out, m);
        let ids = read_ids(&dir.join("kept_ids.csv"))?;
        let load = |name: &str| -> Result<Vec<(u64, Pose)>> {
            let recs = read_tum(&dir.join(name))?;
            if recs.len() != ids.len() {
                return Err(Error::CountMismatch {
                    what: "trajectory rows vs kept ids",
                    left: recs.len(),
                    right: ids.len(),
                });
            }
            Ok(ids.iter().copied().zip(recs.into_iter().map(|r| r.pose)).collect())
        };
        let initial = load("initial.tum")?;
        let optimized = load("optimized.tum")?;
        let outcomes = read_candidates(&dir.join("candidates.csv"))?;
        let log_path = dir.join("pgo_log.csv");
        let pgo_iterations = std::fs::read_to_string(&log_path).at(&log_path)?
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .count();
        rows.push(evaluate_run(
            &gt,
            m,
            &initial,
            &optimized,
            DetectionMetrics::from_outcomes(&outcomes),
            (
                read_series(&dir.join("memory.csv"))?,
                read_series(&dir.join("query_time.csv"))?,
                read_series(&dir.join("pgo_time.csv"))?,
            ),
            pgo_iterations,
            read_timing_total(&dir.join("timing.csv"))?,
            cfg.rpe_delta,
        )?);
    }
    build_report(cfg.metadata(), rows)
}

/// `eval` stage with report output.
pub fn stage_eval(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let r = evaluate_dir(cfg, out).stage("eval")?;
    std::fs::write(out.join("report.txt"), r.render())?;
    std::fs::write(out.join("summary.csv"), r.summary_csv())?;
    Ok(r)
}
