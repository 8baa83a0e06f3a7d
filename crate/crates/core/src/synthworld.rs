//! Deterministic synthetic datasets: ground-truth trajectories with revisits,
//! drifting odometry, descriptor streams and scalar channels.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::descriptors::{Descriptor, DescriptorField, DescriptorFieldParams};
use crate::error::{Error, Result};
use crate::geometry::{se3_exp, translation_distance, Pose, Twist};
use crate::sampling::Keyframe;

const ENTROPY_BINS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    Circle {
        radius: f64,
        laps: u32,
    },
    FigureEight {
        scale: f64,
        #[serde(default = "one")]
        laps: u32,
    },
    GridWalk {
        blocks: u32,
        revisit_prob: f64,
        #[serde(default = "default_block_length")]
        block_length: f64,
    },
}

fn one() -> u32 {
    1
}

fn default_block_length() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    /// Meters between consecutive frames.
    pub keyframe_spacing: f64,
    /// Seconds between consecutive frames.
    pub frame_period: f64,
    /// Per-step odometry noise (meters, per axis).
    pub odom_sigma_t: f64,
    /// Per-step odometry noise (radians, per axis).
    pub odom_sigma_r: f64,
    pub field: DescriptorFieldParams,
    /// Mean level of the spaciousness channel (meters).
    pub spaciousness_field_scale: f64,
    /// Ground-truth revisit radius (meters).
    pub gt_radius: f64,
    /// Minimum id distance for a ground-truth loop pair.
    pub exclusion_gap: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trajectory: TrajectoryKind::Circle {
                radius: 50.0,
                laps: 2,
            },
            keyframe_spacing: 1.0,
            frame_period: 0.1,
            odom_sigma_t: 0.05,
            odom_sigma_r: 0.001,
            field: DescriptorFieldParams {
                noise_sigma: 0.005,
                ..Default::default()
            },
            spaciousness_field_scale: 4.0,
            gt_radius: 1.0,
            exclusion_gap: 50,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keyframe_spacing > 0.0) {
            return Err(Error::Config("keyframe_spacing must be > 0".into()));
        }
        if !(self.odom_sigma_t >= 0.0 && self.odom_sigma_r >= 0.0) {
            return Err(Error::Config("odometry sigmas must be >= 0".into()));
        }
        if !(self.frame_period >= 0.0) {
            return Err(Error::Config("frame_period must be >= 0".into()));
        }
        match self.trajectory {
            TrajectoryKind::Circle { radius, laps } if radius <= 0.0 || laps == 0 => {
                Err(Error::Config("circle needs radius > 0 and laps >= 1".into()))
            }
            TrajectoryKind::FigureEight { scale, laps } if scale <= 0.0 || laps == 0 => {
                Err(Error::Config("figure_eight needs scale > 0 and laps >= 1".into()))
            }
            TrajectoryKind::GridWalk {
                blocks,
                revisit_prob,
                block_length,
            } if blocks == 0 || !(0.0..=1.0).contains(&revisit_prob) || block_length <= 0.0 => {
                Err(Error::Config("grid_walk needs blocks >= 1, revisit_prob in [0,1], block_length > 0".into()))
            }
            _ => self.field.validate(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub gt_poses: Vec<Pose>,
    pub odom_poses: Vec<Pose>,
    /// Keyframe poses are the odometry poses; descriptors come from ground truth.
    pub keyframes: Vec<Keyframe>,
    pub gt_loop_pairs: BTreeSet<(u64, u64)>,
    /// Set when a single trajectory serves as both ground truth and odometry.
    pub no_drift: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.gt_poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_poses.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.keyframes.first().map_or(0, |k| k.descriptor.dim())
    }
}

/// Resample a densely sampled planar curve at equal arc-length steps.
fn resample(points: &[(f64, f64)], spacing: f64) -> Vec<Pose> {
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in points.windows(2) {
        acc += ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        cum.push(acc);
    }
    let n = (acc / spacing + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        let s = k as f64 * spacing;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let (a, b) = (points[seg], points[seg + 1]);
        let len = cum[seg + 1] - cum[seg];
        let f = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let yaw = (b.1 - a.1).atan2(b.0 - a.0);
        out.push(Pose::planar(a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1), yaw));
    }
    out
}

fn circle(radius: f64, laps: u32, spacing: f64) -> Vec<Pose> {
    let total = laps as f64 * TAU * radius;
    let n = (total / spacing + 1e-9).floor() as usize + 1;
    (0..n)
        .map(|k| {
            let th = k as f64 * spacing / radius;
            Pose::planar(radius * th.sin(), radius * (1.0 - th.cos()), th)
        })
        .collect()
}

/// Lemniscate of Gerono, crossing itself at the origin.
fn figure_eight(scale: f64, laps: u32, spacing: f64) -> Vec<Pose> {
    let steps = 20_000 * laps as usize;
    let span = TAU * laps as f64;
    let pts: Vec<(f64, f64)> = (0..=steps)
        .map(|i| {
            let t = span * i as f64 / steps as f64;
            (scale * t.sin(), scale * t.sin() * t.cos())
        })
        .collect();
    resample(&pts, spacing)
}

fn grid_walk(blocks: u32, revisit_prob: f64, block_length: f64, spacing: f64, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    let mut at = (0i64, 0i64);
    let mut heading = 0usize;
    let mut visited: HashSet<(i64, i64)> = HashSet::from([at]);
    let mut corners = vec![at];
    for _ in 0..blocks {
        // straight, left, right; never a U-turn
        let options: Vec<usize> = [heading, (heading + 1) % 4, (heading + 3) % 4].to_vec();
        let next = |d: usize| (at.0 + DIRS[d].0, at.1 + DIRS[d].1);
        let seen: Vec<usize> = options.iter().copied().filter(|&d| visited.contains(&next(d))).collect();
        let fresh: Vec<usize> = options.iter().copied().filter(|&d| !visited.contains(&next(d))).collect();
        let pool = if !seen.is_empty() && (fresh.is_empty() || rng.random_bool(revisit_prob)) {
            seen
        } else if !fresh.is_empty() {
            fresh
        } else {
            options
        };
        heading = pool[rng.random_range(0..pool.len())];
        at = next(heading);
        visited.insert(at);
        corners.push(at);
    }
    // densify the corner polyline so resampling follows the streets
    let mut pts = Vec::new();
    for w in corners.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in 0..100 {
            let f = i as f64 / 100.0;
            pts.push((
                block_length * (a.0 as f64 + f * (b.0 - a.0) as f64),
                block_length * (a.1 as f64 + f * (b.1 - a.1) as f64),
            ));
        }
    }
    let last = *corners.last().expect("nonempty");
    pts.push((block_length * last.0 as f64, block_length * last.1 as f64));
    resample(&pts, spacing)
}

fn odometry(gt: &[Pose], sigma_t: f64, sigma_r: f64, seed: u64) -> Vec<Pose> {
    if sigma_t == 0.0 && sigma_r == 0.0 {
        return gt.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0D0E_7000_0000_0001);
    let nt = Normal::new(0.0, sigma_t).expect("sigma >= 0");
    let nr = Normal::new(0.0, sigma_r).expect("sigma >= 0");
    let mut out = Vec::with_capacity(gt.len());
    out.push(gt[0]);
    for w in gt.windows(2) {
        let step = w[0].relative(&w[1]);
        let noise = Twist::new(
            Vector3::from_fn(|_, _| nt.sample(&mut rng)),
            Vector3::from_fn(|_, _| nr.sample(&mut rng)),
        );
        let prev = *out.last().expect("nonempty");
        out.push(prev.compose(&step.compose(&se3_exp(&noise))));
    }
    out
}

/// Offset sinusoid of position, in `[0.5, 2] * scale` meters.
fn spaciousness(p: &Vector3<f64>, scale: f64, phase: (f64, f64)) -> f64 {
    scale * (1.25 + 0.75 * (p.x / 25.0 + phase.0).sin() * (p.y / 25.0 + phase.1).cos())
}

/// Shannon entropy (nats) of a 16-bin histogram of the descriptor values.
pub fn descriptor_entropy(d: &Descriptor) -> f64 {
    let v = d.values();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.0;
    }
    let mut counts = [0usize; ENTROPY_BINS];
    for x in v {
        let b = (((x - lo) / (hi - lo)) * ENTROPY_BINS as f64) as usize;
        counts[b.min(ENTROPY_BINS - 1)] += 1;
    }
    let n = v.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Exact O(n^2) set of pairs `(i, j)`, `i < j`, closer than `radius` with
/// `j - i >= exclusion_gap`.
pub fn gt_loop_pairs(poses: &[Pose], radius: f64, exclusion_gap: u64) -> BTreeSet<(u64, u64)> {
    let mut out = BTreeSet::new();
    let gap = exclusion_gap.max(1) as usize;
    for i in 0..poses.len() {
        for j in (i + gap)..poses.len() {
            if translation_distance(&poses[i], &poses[j]) < radius {
                out.insert((i as u64, j as u64));
            }
        }
    }
    out
}

pub fn generate(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gt = match cfg.trajectory {
        TrajectoryKind::Circle { radius, laps } => circle(radius, laps, cfg.keyframe_spacing),
        TrajectoryKind::FigureEight { scale, laps } => figure_eight(scale, laps, cfg.keyframe_spacing),
        TrajectoryKind::GridWalk {
            blocks,
            revisit_prob,
            block_length,
        } => grid_walk(blocks, revisit_prob, block_length, cfg.keyframe_spacing, &mut rng),
    };
    let odom = odometry(&gt, cfg.odom_sigma_t, cfg.odom_sigma_r, cfg.seed);
    let field = DescriptorField::new(cfg.field.clone())?;
    let phase = (rng.random_range(0.0..PI), rng.random_range(0.0..PI));
    let keyframes = gt
        .iter()
        .zip(&odom)
        .enumerate()
        .map(|(i, (g, o))| {
            let id = i as u64;
            let descriptor = field.eval_noisy(&g.translation, id);
            let mut kf = Keyframe::new(id, i as f64 * cfg.frame_period, *o, descriptor);
            kf.spaciousness = Some(spaciousness(&g.translation, cfg.spaciousness_field_scale, phase));
            kf.entropy_proxy = Some(descriptor_entropy(&kf.descriptor));
            kf
        })
        .collect();
    let gt_loop_pairs = gt_loop_pairs(&gt, cfg.gt_radius, cfg.exclusion_gap);
    Ok(Dataset {
        gt_poses: gt,
        odom_poses: odom,
        keyframes,
        gt_loop_pairs,
        no_drift: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::cosine_similarity;

    fn cfg(trajectory: TrajectoryKind) -> WorldConfig {
        WorldConfig {
            trajectory,
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_odometry_is_ground_truth() {
        let c = WorldConfig {
            odom_sigma_t: 0.0,
            odom_sigma_r: 0.0,
            ..Default::default()
        };
        let d = generate(&c).unwrap();
        assert_eq!(d.gt_poses, d.odom_poses);
    }

    #[test]
    fn circle_two_laps() {
        let d = generate(&WorldConfig::default()).unwrap();
        assert!((628..=629).contains(&d.len()), "{}", d.len());
        assert_eq!(d.odom_poses[0], d.gt_poses[0]);
        assert_eq!(d.keyframes.len(), d.len());
        for i in 0..d.len() as u64 {
            assert!(
                d.gt_loop_pairs.iter().any(|&(a, b)| a == i || b == i),
                "keyframe {i} has no revisit pair"
            );
        }
    }

    #[test]
    fn deterministic() {
        let c = cfg(TrajectoryKind::GridWalk {
            blocks: 20,
            revisit_prob: 0.5,
            block_length: 20.0,
        });
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.gt_poses, b.gt_poses);
        assert_eq!(a.odom_poses, b.odom_poses);
        assert_eq!(a.keyframes, b.keyframes);
        assert_eq!(a.gt_loop_pairs, b.gt_loop_pairs);
    }

    #[test]
    fn loop_pairs_match_brute_force() {
        let d = generate(&cfg(TrajectoryKind::FigureEight { scale: 30.0, laps: 1 })).unwrap();
        let mut brute = BTreeSet::new();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if j >= i + 50 && translation_distance(&d.gt_poses[i], &d.gt_poses[j]) < 1.0 {
                    brute.insert((i as u64, j as u64));
                }
            }
        }
        assert_eq!(brute, d.gt_loop_pairs);
        assert!(!brute.is_empty());
    }

    #[test]
    fn loop_pair_edge_cases() {
        let line: Vec<Pose> = (0..200).map(|i| Pose::from_translation(i as f64, 0.0, 0.0)).collect();
        assert!(gt_loop_pairs(&line, 1.0, 50).is_empty());
        let laps = circle(20.0, 2, TAU * 20.0 / 100.0);
        assert!(gt_loop_pairs(&laps, 0.0, 50).is_empty());
        let pairs = gt_loop_pairs(&laps, 1e-6, 50);
        // two coincident laps: every aligned cross-lap pair is present
        for i in 0..=100u64 {
            assert!(pairs.contains(&(i, i + 100)), "missing ({i}, {})", i + 100);
        }
    }

    #[test]
    fn grid_walk_revisits() {
        let d = generate(&cfg(TrajectoryKind::GridWalk {
            blocks: 60,
            revisit_prob: 0.7,
            block_length: 20.0,
        }))
        .unwrap();
        assert!(!d.gt_loop_pairs.is_empty());
    }

    #[test]
    fn nearby_revisits_are_similar() {
        let c = WorldConfig {
            field: DescriptorFieldParams {
                noise_sigma: 0.0,
                length_scale: 10.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let d = generate(&c).unwrap();
        for &(i, j) in &d.gt_loop_pairs {
            let s = cosine_similarity(&d.keyframes[i as usize].descriptor, &d.keyframes[j as usize].descriptor)
                .unwrap();
            assert!(s > 0.95, "pair ({i},{j}) similarity {s}");
        }
    }

    #[test]
    fn channels_populated() {
        let d = generate(&WorldConfig::default()).unwrap();
        for k in &d.keyframes {
            let s = k.spaciousness.unwrap();
            assert!((2.0..=8.0).contains(&s));
            let e = k.entropy_proxy.unwrap();
            assert!(e > 0.0 && e <= (ENTROPY_BINS as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn drift_grows_with_length() {
        let mut means = Vec::new();
        for laps in 1..=3 {
            let mut total = 0.0;
            for seed in 0..50 {
                let c = WorldConfig {
                    seed,
                    trajectory: TrajectoryKind::Circle { radius: 20.0, laps },
                    odom_sigma_t: 0.05,
                    odom_sigma_r: 0.0,
                    ..Default::default()
                };
                let d = generate(&c).unwrap();
                total += translation_distance(d.gt_poses.last().unwrap(), d.odom_poses.last().unwrap());
            }
            means.push(total / 50.0);
        }
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }
}
