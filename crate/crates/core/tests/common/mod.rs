//! Test-side oracles and fixtures shared by the integration suites. Nothing
//! here calls into the library's sampling math; it is re-derived from the
//! definitions with plain `Vec<f64>` arithmetic.

#![allow(dead_code)]

use kf_minset::descriptors::Descriptor;
use kf_minset::geometry::{se3_exp, Pose, Twist};
use kf_minset::sampling::{Keyframe, SamplerConfig};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Planar random walk with step lengths in `[step_lo, step_hi]` and a
/// random-walk descriptor of dimension `m`, so consecutive descriptors are
/// correlated the way a sensor's would be.
pub fn random_window<R: Rng>(
    rng: &mut R,
    first_id: u64,
    n: usize,
    m: usize,
    step: (f64, f64),
    anchor_prob: f64,
) -> (Vec<Keyframe>, Option<Pose>) {
    let drift = rng.random_range(0.1..1.0);
    let mut d: Vec<f64> = (0..m).map(|_| gauss(rng)).collect();
    let (mut x, mut y, mut heading) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0f64);
    let anchor = if rng.random_bool(anchor_prob) {
        let back = rng.random_range(0.5..3.0);
        Some(Pose::planar(x - back * heading.cos(), y - back * heading.sin(), heading))
    } else {
        None
    };
    let mut window = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            heading += rng.random_range(-0.3..0.3);
            let s = rng.random_range(step.0..step.1);
            x += s * heading.cos();
            y += s * heading.sin();
            for v in d.iter_mut() {
                *v += drift * gauss(rng);
            }
        }
        let id = first_id + k as u64;
        window.push(Keyframe::new(id, id as f64 * 0.1, Pose::planar(x, y, heading), Descriptor::new(d.clone())));
    }
    (window, anchor)
}

pub fn dist3(a: &Pose, b: &Pose) -> f64 {
    let d: Vector3<f64> = a.translation - b.translation;
    (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
}

/// Independent feasibility check of one ordered subset.
pub fn subset_feasible(window: &[Keyframe], anchor: Option<&Pose>, members: &[usize], lo: f64, hi: f64) -> bool {
    let ok = |g: f64| lo <= g && g <= hi;
    if let (Some(a), Some(&first)) = (anchor, members.first()) {
        if !ok(dist3(a, &window[first].pose)) {
            return false;
        }
    }
    members.windows(2).all(|w| w[0] < w[1] && ok(dist3(&window[w[0]].pose, &window[w[1]].pose)))
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix. Returns
/// eigenvalues and eigenvectors as columns (`vecs[row][col]`).
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Redundancy and information terms of one subset, straight from the
/// definitions: explicit Jacobian, eigenvectors of `J^T J` recovered from
/// the small Gram matrix, descriptors projected and scaled by `sqrt(lambda)`.
pub fn naive_terms(window: &[Keyframe], members: &[usize]) -> (f64, f64) {
    let desc: Vec<&[f64]> = members.iter().map(|&i| window[i].descriptor.values()).collect();
    let pairs = members.len() - 1;
    let mut rho = 0.0;
    for k in 0..pairs {
        let (a, b) = (desc[k], desc[k + 1]);
        let c = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
        rho += c.clamp(0.0, 1.0);
    }
    rho /= pairs as f64;

    let m = desc[0].len();
    let mut jac = vec![vec![0.0; m]; pairs];
    for k in 0..pairs {
        let gap = dist3(&window[members[k]].pose, &window[members[k + 1]].pose);
        if gap < 1e-9 {
            return (rho, 0.0);
        }
        for c in 0..m {
            jac[k][c] = (desc[k + 1][c] - desc[k][c]) / gap;
        }
    }
    let gram: Vec<Vec<f64>> = (0..pairs).map(|r| (0..pairs).map(|c| dot(&jac[r], &jac[c])).collect()).collect();
    let (vals, vecs) = jacobi_eigen(&gram);
    let top = vals.iter().copied().fold(0.0, f64::max);
    // principal directions v = J^T u / sqrt(lambda) for the nonzero spectrum
    let mut dirs: Vec<(f64, Vec<f64>)> = Vec::new();
    for (k, &lam) in vals.iter().enumerate() {
        if top > 0.0 && lam > 1e-9 * top {
            let mut v = vec![0.0; m];
            for r in 0..pairs {
                let u = vecs[r][k];
                for c in 0..m {
                    v[c] += jac[r][c] * u;
                }
            }
            let s = lam.sqrt();
            v.iter_mut().for_each(|x| *x /= s);
            dirs.push((lam, v));
        }
    }
    let transformed: Vec<Vec<f64>> = desc
        .iter()
        .map(|d| dirs.iter().map(|(lam, v)| lam.sqrt() * dot(v, d)).collect())
        .collect();
    let dists: Vec<f64> = transformed
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
        .collect();
    let max = dists.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return (rho, 0.0);
    }
    (rho, -dists.iter().map(|d| d / max).sum::<f64>() / pairs as f64)
}

/// Rescan all `2^N - 1` subsets, score every feasible one with at least two
/// members, and return the argmin (ties: fewer members, then smaller index
/// sequence). No feasible subset falls back to `{first, last}`.
pub fn naive_select(window: &[Keyframe], anchor: Option<&Pose>, cfg: &SamplerConfig) -> (Vec<usize>, bool) {
    let n = window.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if members.len() < 2 || !subset_feasible(window, anchor, &members, cfg.delta_lower, cfg.delta_upper) {
            continue;
        }
        let (rho, pi) = naive_terms(window, &members);
        let score = (rho + cfg.alpha) / (pi - cfg.beta);
        let replace = match &best {
            None => true,
            Some((s, b)) => {
                let tol = 1e-12 * s.abs().max(1.0);
                if score < s - tol {
                    true
                } else if score <= s + tol {
                    (members.len(), &members) < (b.len(), b)
                } else {
                    false
                }
            }
        };
        if replace {
            best = Some((score, members));
        }
    }
    match best {
        Some((_, m)) => (m, true),
        None => (vec![0, n - 1], false),
    }
}

/// Random connected pose graph: a chain plus random extra edges, with
/// random information matrices and noisy measurements.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize) -> kf_minset::posegraph::PoseGraph {
    use kf_minset::posegraph::{Edge, EdgeKind, PoseGraph};
    use nalgebra::Matrix6;
    let twist = |rng: &mut R, s: f64| {
        Twist::new(
            Vector3::new(gauss(rng) * s, gauss(rng) * s, gauss(rng) * s),
            Vector3::new(gauss(rng) * s * 0.3, gauss(rng) * s * 0.3, gauss(rng) * s * 0.3),
        )
    };
    let mut truth = vec![Pose::identity()];
    for _ in 1..n {
        let t = twist(rng, 1.0);
        truth.push(truth.last().unwrap().compose(&se3_exp(&t)));
    }
    let mut g = PoseGraph::new();
    for (k, p) in truth.iter().enumerate() {
        g.add_node(k as u64, p.retract(&twist(rng, 0.2))).unwrap();
    }
    let info = |rng: &mut R| {
        let a = Matrix6::from_fn(|_, _| gauss(rng));
        a * a.transpose() + Matrix6::identity() * rng.random_range(0.5..5.0)
    };
    for k in 1..n {
        let z = truth[k - 1].relative(&truth[k]).retract(&twist(rng, 0.05));
        g.add_edge(Edge { kind: EdgeKind::Odometry, i: k as u64 - 1, j: k as u64, measurement: z, information: info(rng) })
            .unwrap();
    }
    for _ in 0..n / 2 {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if j <= i + 1 {
            continue;
        }
        let z = truth[i].relative(&truth[j]).retract(&twist(rng, 0.05));
        g.add_edge(Edge { kind: EdgeKind::Loop, i: i as u64, j: j as u64, measurement: z, information: info(rng) })
            .unwrap();
    }
    g
}

/// Central finite-difference gradient of the total error over the free
/// nodes, under right perturbations.
pub fn fd_gradient(g: &kf_minset::posegraph::PoseGraph, h: f64) -> Vec<f64> {
    use kf_minset::posegraph::total_error;
    let mut out = Vec::new();
    for (k, &id) in g.ids().iter().enumerate() {
        if g.is_fixed(id) {
            continue;
        }
        for d in 0..6 {
            let mut delta = [0.0; 6];
            delta[d] = h;
            let tw = Twist::new(Vector3::new(delta[0], delta[1], delta[2]), Vector3::new(delta[3], delta[4], delta[5]));
            let neg = Twist::new(-tw.rho, -tw.phi);
            let eval = |t: &Twist| {
                let mut gg = g.clone();
                let mut poses = g.poses().to_vec();
                poses[k] = poses[k].retract(t);
                gg.set_poses(poses).unwrap();
                total_error(&gg).unwrap()
            };
            out.push((eval(&tw) - eval(&neg)) / (2.0 * h));
        }
    }
    out
}
