use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::msa::{msa_select_window, WindowSolution};
use super::{Keyframe, SamplerConfig};
use crate::error::{Error, Result};
use crate::geometry::{translation_distance, Pose};

/// Number of recent frame-to-frame entropy deltas used for the adaptive threshold.
pub const ENTROPY_HISTORY: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SamplerMethod {
    /// Keep every keyframe.
    All,
    Msa,
    /// Keep a keyframe every `d` meters of travelled distance.
    Constant(f64),
    Entropy,
    Spaciousness,
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerMethod::All => f.write_str("all"),
            SamplerMethod::Msa => f.write_str("msa"),
            SamplerMethod::Constant(d) => write!(f, "const:{d}"),
            SamplerMethod::Entropy => f.write_str("entropy"),
            SamplerMethod::Spaciousness => f.write_str("spaciousness"),
        }
    }
}

impl FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SamplerMethod::All),
            "msa" => Ok(SamplerMethod::Msa),
            "entropy" => Ok(SamplerMethod::Entropy),
            "spaciousness" => Ok(SamplerMethod::Spaciousness),
            other => {
                let d = other
                    .strip_prefix("const:")
                    .and_then(|d| d.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown sampler method `{other}`")))?;
                if !(d > 0.0) {
                    return Err(Error::Config("constant interval must be > 0".into()));
                }
                Ok(SamplerMethod::Constant(d))
            }
        }
    }
}

impl TryFrom<String> for SamplerMethod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SamplerMethod> for String {
    fn from(m: SamplerMethod) -> String {
        m.to_string()
    }
}

/// Single-consumer streaming sampler.
pub trait KeyframeSampler: Send {
    /// Feed the next keyframe; returns keyframes that became final.
    fn push(&mut self, kf: Keyframe) -> Result<Vec<Keyframe>>;
    /// Flush anything still buffered at end of stream.
    fn finish(&mut self) -> Result<Vec<Keyframe>>;
    fn method(&self) -> SamplerMethod;
    /// Per-window optimization records; empty for non-window samplers.
    fn window_solutions(&self) -> &[WindowSolution] {
        &[]
    }
}

#[derive(Default)]
struct OrderGuard(Option<u64>);

impl OrderGuard {
    fn check(&mut self, id: u64) -> Result<()> {
        if let Some(prev) = self.0 {
            if id <= prev {
                return Err(Error::OutOfOrder { prev, id });
            }
        }
        self.0 = Some(id);
        Ok(())
    }
}

#[derive(Default)]
pub struct AllSampler {
    order: OrderGuard,
}

impl KeyframeSampler for AllSampler {
    fn push(&mut self, kf: Keyframe) -> Result<Vec<Keyframe>> {
        self.order.check(kf.id)?;
        Ok(vec![kf])
    }
    fn finish(&mut self) -> Result<Vec<Keyframe>> {
        Ok(Vec::new())
    }
    fn method(&self) -> SamplerMethod {
        SamplerMethod::All
    }
}

/// Travelled-distance accumulator shared by the interval-based samplers.
#[derive(Default)]
struct Odometer {
    last_pose: Option<Pose>,
    since_kept: f64,
}

impl Odometer {
    /// Advance to `pose`; returns the distance accumulated since the last keep,
    /// or `None` for the first frame.
    fn advance(&mut self, pose: &Pose) -> Option<f64> {
        let prev = self.last_pose.replace(*pose)?;
        self.since_kept += translation_distance(&prev, pose);
        Some(self.since_kept)
    }

    fn reset(&mut self) {
        self.since_kept = 0.0;
    }
}

pub struct ConstantSampler {
    interval: f64,
    odo: Odometer,
    order: OrderGuard,
}

impl ConstantSampler {
    pub fn new(interval: f64) -> Self {
        Self {
            interval,
            odo: Odometer::default(),
            order: OrderGuard::default(),
        }
    }
}

impl KeyframeSampler for ConstantSampler {
    fn push(&mut self, kf: Keyframe) -> Result<Vec<Keyframe>> {
        self.order.check(kf.id)?;
        match self.odo.advance(&kf.pose) {
            Some(d) if d < self.interval => Ok(Vec::new()),
            _ => {
                self.odo.reset();
                Ok(vec![kf])
            }
        }
    }
    fn finish(&mut self) -> Result<Vec<Keyframe>> {
        Ok(Vec::new())
    }
    fn method(&self) -> SamplerMethod {
        SamplerMethod::Constant(self.interval)
    }
}

/// Adaptive interval `clamp(0.5 * spaciousness, delta_lower, delta_upper)`.
pub struct SpaciousnessSampler {
    lower: f64,
    upper: f64,
    odo: Odometer,
    order: OrderGuard,
}

impl SpaciousnessSampler {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self {
            lower,
            upper,
            odo: Odometer::default(),
            order: OrderGuard::default(),
        }
    }
}

impl KeyframeSampler for SpaciousnessSampler {
    fn push(&mut self, kf: Keyframe) -> Result<Vec<Keyframe>> {
        self.order.check(kf.id)?;
        let s = kf.spaciousness.ok_or(Error::MissingChannel {
            id: kf.id,
            channel: "spaciousness",
        })?;
        let interval = (0.5 * s).clamp(self.lower, self.upper);
        match self.odo.advance(&kf.pose) {
            Some(d) if d < interval => Ok(Vec::new()),
            _ => {
                self.odo.reset();
                Ok(vec![kf])
            }
        }
    }
    fn finish(&mut self) -> Result<Vec<Keyframe>> {
        Ok(Vec::new())
    }
    fn method(&self) -> SamplerMethod {
        SamplerMethod::Spaciousness
    }
}

/// Keeps a keyframe when its entropy differs from the last kept one by more
/// than mean + 1 std of the recent frame-to-frame entropy changes.
#[derive(Default)]
pub struct EntropySampler {
    last_kept: Option<f64>,
    last_seen: Option<f64>,
    deltas: VecDeque<f64>,
    order: OrderGuard,
}

impl EntropySampler {
    pub fn new() -> Self {
        Self::default()
    }

    fn threshold(&self) -> f64 {
        let n = self.deltas.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = self.deltas.iter().sum::<f64>() / n;
        let var = self.deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        mean + var.sqrt()
    }
}

impl KeyframeSampler for EntropySampler {
    fn push(&mut self, kf: Keyframe) -> Result<Vec<Keyframe>> {
        self.order.check(kf.id)?;
        let e = kf.entropy_proxy.ok_or(Error::MissingChannel {
            id: kf.id,
            channel: "entropy_proxy",
        })?;
        if let Some(prev) = self.last_seen.replace(e) {
            if self.deltas.len() == ENTROPY_HISTORY {
                self.deltas.pop_front();
            }
            self.deltas.push_back((e - prev).abs());
        }
        let keep = match self.last_kept {
            None => true,
            Some(k) => (e - k).abs() > self.threshold(),
        };
        if keep {
            self.last_kept = Some(e);
            Ok(vec![kf])
        } else {
            Ok(Vec::new())
        }
    }
    fn finish(&mut self) -> Result<Vec<Keyframe>> {
        Ok(Vec::new())
    }
    fn method(&self) -> SamplerMethod {
        SamplerMethod::Entropy
    }
}

/// Non-overlapping sliding windows of `N` keyframes, each reduced to its
/// minimal subset. The last kept pose anchors the next window's gap
/// constraint.
pub struct MsaSampler {
    cfg: SamplerConfig,
    buffer: Vec<Keyframe>,
    anchor: Option<Pose>,
    solutions: Vec<WindowSolution>,
    order: OrderGuard,
}

impl MsaSampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            buffer: Vec::with_capacity(cfg.window_size),
            cfg,
            anchor: None,
            solutions: Vec::new(),
            order: OrderGuard::default(),
        })
    }

    pub fn solutions(&self) -> &[WindowSolution] {
        &self.solutions
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn solve_buffer(&mut self) -> Result<Vec<Keyframe>> {
        if self.buffer.is_empty() {
            return Ok(Vec::new());
        }
        let window = std::mem::take(&mut self.buffer);
        let sol = msa_select_window(&window, self.anchor.as_ref(), &self.cfg)?;
        let kept: Vec<Keyframe> = sol.selected.iter().map(|&i| window[i].clone()).collect();
        self.anchor = kept.last().map(|k| k.pose);
        self.solutions.push(sol);
        Ok(kept)
    }
}

impl KeyframeSampler for MsaSampler {
    fn push(&mut self, kf: Keyframe) -> Result<Vec<Keyframe>> {
        self.order.check(kf.id)?;
        self.buffer.push(kf);
        if self.buffer.len() == self.cfg.window_size {
            self.solve_buffer()
        } else {
            Ok(Vec::new())
        }
    }

    /// A trailing partial window is solved as a shorter window.
    fn finish(&mut self) -> Result<Vec<Keyframe>> {
        self.solve_buffer()
    }

    fn method(&self) -> SamplerMethod {
        SamplerMethod::Msa
    }

    fn window_solutions(&self) -> &[WindowSolution] {
        &self.solutions
    }
}

pub fn make_sampler(method: &SamplerMethod, cfg: &SamplerConfig) -> Result<Box<dyn KeyframeSampler>> {
    Ok(match method {
        SamplerMethod::All => Box::new(AllSampler::default()),
        SamplerMethod::Msa => Box::new(MsaSampler::new(cfg.clone())?),
        SamplerMethod::Constant(d) => Box::new(ConstantSampler::new(*d)),
        SamplerMethod::Entropy => Box::new(EntropySampler::new()),
        SamplerMethod::Spaciousness => {
            Box::new(SpaciousnessSampler::new(cfg.delta_lower, cfg.delta_upper))
        }
    })
}

/// Run a whole stream through a sampler and collect the kept keyframes.
pub fn stream_sample(
    keyframes: impl IntoIterator<Item = Keyframe>,
    method: &SamplerMethod,
    cfg: &SamplerConfig,
) -> Result<Vec<Keyframe>> {
    let mut sampler = make_sampler(method, cfg)?;
    let mut kept = Vec::new();
    for kf in keyframes {
        kept.extend(sampler.push(kf)?);
    }
    kept.extend(sampler.finish()?);
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{DescriptorField, DescriptorFieldParams};

    fn line(n: u64, spacing: f64) -> Vec<Keyframe> {
        let field = DescriptorField::new(DescriptorFieldParams {
            dim: 16,
            num_frequencies: 16,
            ..Default::default()
        })
        .unwrap();
        (0..n)
            .map(|i| {
                let pose = Pose::from_translation(i as f64 * spacing, 0.0, 0.0);
                let mut k = Keyframe::new(i, i as f64, pose, field.eval(&pose.translation));
                k.entropy_proxy = Some(((i as f64) * 0.7).sin());
                k.spaciousness = Some(4.0 + (i as f64 * 0.1).cos());
                k
            })
            .collect()
    }

    fn ids(k: &[Keyframe]) -> Vec<u64> {
        k.iter().map(|k| k.id).collect()
    }

    #[test]
    fn method_names_round_trip() {
        for m in ["all", "msa", "const:2", "const:1.5", "entropy", "spaciousness"] {
            assert_eq!(m.parse::<SamplerMethod>().unwrap().to_string(), m);
        }
        assert!("const:-1".parse::<SamplerMethod>().is_err());
        assert!("bogus".parse::<SamplerMethod>().is_err());
    }

    #[test]
    fn all_is_identity() {
        let input = line(30, 1.0);
        let out = stream_sample(input.clone(), &SamplerMethod::All, &SamplerConfig::default()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn constant_two_meters_keeps_every_second() {
        let out = stream_sample(line(11, 1.0), &SamplerMethod::Constant(2.0), &SamplerConfig::default())
            .unwrap();
        assert_eq!(ids(&out), vec![0, 2, 4, 6, 8, 10]);
    }

    #[test]
    fn msa_twenty_keyframes_two_windows() {
        let cfg = SamplerConfig::default();
        let mut s = MsaSampler::new(cfg).unwrap();
        let mut kept = Vec::new();
        for kf in line(20, 1.0) {
            kept.extend(s.push(kf).unwrap());
        }
        kept.extend(s.finish().unwrap());
        assert_eq!(s.solutions().len(), 2);
        let union: Vec<u64> = s
            .solutions()
            .iter()
            .flat_map(|w| w.selected_ids.iter().copied())
            .collect();
        assert_eq!(ids(&kept), union);
    }

    #[test]
    fn msa_partial_window_flushed() {
        let mut s = MsaSampler::new(SamplerConfig::default()).unwrap();
        for kf in line(25, 1.0) {
            s.push(kf).unwrap();
        }
        assert_eq!(s.solutions().len(), 2);
        let tail = s.finish().unwrap();
        assert_eq!(s.solutions().len(), 3);
        assert!(tail.iter().all(|k| k.id >= 20));
    }

    #[test]
    fn kept_ids_strictly_increase() {
        let cfg = SamplerConfig::default();
        for m in ["all", "msa", "const:1", "const:3", "entropy", "spaciousness"] {
            let out = stream_sample(line(120, 0.7), &m.parse().unwrap(), &cfg).unwrap();
            assert!(!out.is_empty());
            assert!(out.windows(2).all(|w| w[0].id < w[1].id), "{m}");
        }
    }

    #[test]
    fn missing_channels_reported() {
        let mut input = line(5, 1.0);
        input[2].entropy_proxy = None;
        input[3].spaciousness = None;
        let cfg = SamplerConfig::default();
        assert!(matches!(
            stream_sample(input.clone(), &SamplerMethod::Entropy, &cfg),
            Err(Error::MissingChannel { id: 2, .. })
        ));
        assert!(matches!(
            stream_sample(input, &SamplerMethod::Spaciousness, &cfg),
            Err(Error::MissingChannel { id: 3, .. })
        ));
    }

    #[test]
    fn out_of_order_rejected() {
        let mut input = line(4, 1.0);
        input.swap(1, 2);
        assert!(matches!(
            stream_sample(input, &SamplerMethod::All, &SamplerConfig::default()),
            Err(Error::OutOfOrder { prev: 2, id: 1 })
        ));
    }

    #[test]
    fn spaciousness_interval_is_clamped() {
        let mut input = line(40, 1.0);
        for k in &mut input {
            k.spaciousness = Some(100.0);
        }
        let cfg = SamplerConfig::default();
        let out = stream_sample(input, &SamplerMethod::Spaciousness, &cfg).unwrap();
        // 0.5 * 100 clamps to delta_upper = 5 m.
        assert_eq!(ids(&out), vec![0, 5, 10, 15, 20, 25, 30, 35]);
    }

    #[test]
    fn entropy_keeps_on_jumps() {
        let mut input = line(60, 1.0);
        for (i, k) in input.iter_mut().enumerate() {
            k.entropy_proxy = Some(if i == 30 { 5.0 } else { 1.0 + 0.001 * (i % 2) as f64 });
        }
        let out = stream_sample(input, &SamplerMethod::Entropy, &SamplerConfig::default()).unwrap();
        assert!(ids(&out).contains(&0));
        assert!(ids(&out).contains(&30));
    }

    #[test]
    fn msa_anchor_chaining() {
        let input = line(60, 0.8);
        let cfg = SamplerConfig::default();
        let mut s = MsaSampler::new(cfg.clone()).unwrap();
        for kf in input.iter().cloned() {
            s.push(kf).unwrap();
        }
        s.finish().unwrap();
        let by_id = |id: u64| input.iter().find(|k| k.id == id).unwrap().pose;
        for w in s.solutions().windows(2) {
            if w[1].constraint_feasible {
                let last = by_id(*w[0].selected_ids.last().unwrap());
                let first = by_id(w[1].selected_ids[0]);
                assert!(translation_distance(&last, &first) <= cfg.delta_upper);
            }
        }
    }
}
