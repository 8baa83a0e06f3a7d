//! Minimal-subset window optimizer.
//!
//! For a window of `N <= 16` keyframes every subset whose consecutive kept
//! poses are `delta_lower..=delta_upper` apart (including the gap from the
//! previous window's last kept pose) is scored by a redundancy term `rho`
//! (mean consecutive descriptor similarity) and an information-preservation
//! term `pi` (negated mean consecutive distance between descriptors projected
//! onto the principal directions of the pose-to-descriptor Jacobian).

use std::cmp::Ordering;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use super::{Keyframe, SamplerConfig, ScoringMode};
use crate::descriptors::{clamped_cosine, cosine_similarity, dot};
use crate::error::{Error, Result};
use crate::geometry::{translation_distance, Pose};

/// Largest window accepted by the exhaustive search (2^16 subsets).
pub const MAX_WINDOW: usize = 16;

const MIN_GAP: f64 = 1e-9;
/// Gram eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-9;
/// Below this many candidates the scoring loop stays sequential.
const PAR_THRESHOLD: usize = 256;

/// Outcome of one window optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSolution {
    /// Indices into the window, increasing.
    pub selected: Vec<usize>,
    pub selected_ids: Vec<u64>,
    pub rho: f64,
    pub pi: f64,
    pub objective: f64,
    pub scoring_mode: ScoringMode,
    /// Subsets that were scored (feasible, at least two members).
    pub candidates_evaluated: usize,
    /// Size of the constrained power set, singletons included.
    pub feasible_subsets: usize,
    /// `2^N - 1` nonempty subsets before constraints.
    pub power_set_size: usize,
    /// False when no feasible subset existed and `{first, last}` was kept.
    pub constraint_feasible: bool,
    /// Seconds.
    pub solve_time: f64,
}

impl WindowSolution {
    pub fn selected_keyframes<'a>(&self, window: &'a [Keyframe]) -> Vec<&'a Keyframe> {
        self.selected.iter().map(|&i| &window[i]).collect()
    }

    /// `2^N - 1` over the constrained power set size.
    pub fn reduction_factor(&self) -> f64 {
        self.power_set_size as f64 / self.feasible_subsets.max(1) as f64
    }
}

/// Score of a subset with redundancy `rho` and information term `pi`.
pub fn msa_score(rho: f64, pi: f64, cfg: &SamplerConfig) -> f64 {
    match cfg.scoring_mode {
        ScoringMode::PaperLiteral => (rho + cfg.alpha) / (pi - cfg.beta),
        ScoringMode::InfoMax => (rho + cfg.alpha) * (1.0 - pi),
    }
}

fn bits(mask: u32) -> impl Iterator<Item = usize> {
    let mut m = mask;
    std::iter::from_fn(move || {
        if m == 0 {
            None
        } else {
            let i = m.trailing_zeros() as usize;
            m &= m - 1;
            Some(i)
        }
    })
}

/// Lexicographic order of the ascending member sequences of two masks.
fn lex_cmp(a: u32, b: u32) -> Ordering {
    let mut ia = bits(a);
    let mut ib = bits(b);
    loop {
        match (ia.next(), ib.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x != y => return x.cmp(&y),
            _ => {}
        }
    }
}

struct Geometry {
    n: usize,
    dist: Vec<f64>,
    anchor: Option<Vec<f64>>,
}

impl Geometry {
    fn new(window: &[Keyframe], anchor: Option<&Pose>) -> Self {
        let n = window.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = translation_distance(&window[i].pose, &window[j].pose);
            }
        }
        let anchor = anchor.map(|a| {
            window
                .iter()
                .map(|k| translation_distance(a, &k.pose))
                .collect()
        });
        Self { n, dist, anchor }
    }

    #[inline]
    fn gap(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    /// Walk the members in order and stop at the first violated gap.
    fn is_feasible(&self, mask: u32, lo: f64, hi: f64) -> bool {
        let mut prev: Option<usize> = None;
        for i in bits(mask) {
            let g = match prev {
                Some(p) => Some(self.gap(p, i)),
                None => self.anchor.as_ref().map(|a| a[i]),
            };
            if let Some(g) = g {
                if !(lo <= g && g <= hi) {
                    return false;
                }
            }
            prev = Some(i);
        }
        true
    }

    fn feasible_masks(&self, lo: f64, hi: f64) -> Vec<u32> {
        (1u32..(1u32 << self.n))
            .filter(|&m| self.is_feasible(m, lo, hi))
            .collect()
    }
}

fn check_window(window: &[Keyframe]) -> Result<()> {
    if window.len() > MAX_WINDOW {
        return Err(Error::WindowTooLarge(window.len()));
    }
    if window.is_empty() {
        return Err(Error::SubsetTooSmall { needed: 1, got: 0 });
    }
    Ok(())
}

/// All nonempty subsets (as increasing window indices) whose consecutive
/// gaps, and the gap from `anchor` to the first member when given, lie in
/// `[delta_lower, delta_upper]`. Sorted lexicographically.
pub fn constrained_power_set(
    window: &[Keyframe],
    anchor: Option<&Pose>,
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<usize>>> {
    check_window(window)?;
    let geo = Geometry::new(window, anchor);
    let mut masks = geo.feasible_masks(cfg.delta_lower, cfg.delta_upper);
    masks.sort_by(|a, b| lex_cmp(*a, *b));
    Ok(masks.into_iter().map(|m| bits(m).collect()).collect())
}

/// Descriptor inner products for the whole window, so subset terms reduce
/// to O(n^2) scalar work.
struct Scorer<'a> {
    n: usize,
    dots: Vec<f64>,
    geo: &'a Geometry,
}

impl<'a> Scorer<'a> {
    fn new(window: &[Keyframe], geo: &'a Geometry) -> Result<Self> {
        let n = window.len();
        let m = window[0].descriptor.dim();
        for k in window {
            if k.descriptor.dim() != m {
                return Err(Error::DimensionMismatch {
                    left: m,
                    right: k.descriptor.dim(),
                });
            }
        }
        let mut dots = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = dot(window[i].descriptor.values(), window[j].descriptor.values());
                dots[i * n + j] = v;
                dots[j * n + i] = v;
            }
            if dots[i * n + i].sqrt() < 1e-12 {
                return Err(Error::ZeroVector);
            }
        }
        Ok(Self { n, dots, geo })
    }

    #[inline]
    fn d(&self, i: usize, j: usize) -> f64 {
        self.dots[i * self.n + j]
    }

    /// `(rho, pi)` for the ordered members.
    ///
    /// With `G = J J^T`, the projected difference `sqrt(L) V^T (d_{i+1} - d_i)`
    /// has norm `gap_i * |G e_i|`, so the consecutive transformed distances
    /// come straight from the Gram matrix.
    fn terms(&self, members: &[usize]) -> (f64, f64) {
        let k = members.len();
        if k < 2 {
            return (0.0, 0.0);
        }
        let pairs = k - 1;
        let mut rho = 0.0;
        let mut gaps = [0.0f64; MAX_WINDOW];
        for r in 0..pairs {
            let (a, b) = (members[r], members[r + 1]);
            rho += clamped_cosine(self.d(a, b), self.d(a, a), self.d(b, b));
            gaps[r] = self.geo.gap(a, b);
        }
        rho /= pairs as f64;

        if gaps[..pairs].iter().any(|g| *g < MIN_GAP) {
            return (rho, 0.0);
        }
        let mut col_sq = [0.0f64; MAX_WINDOW];
        for r in 0..pairs {
            let (a0, a1) = (members[r], members[r + 1]);
            for c in r..pairs {
                let (b0, b1) = (members[c], members[c + 1]);
                let g = (self.d(a1, b1) - self.d(a1, b0) - self.d(a0, b1) + self.d(a0, b0))
                    / (gaps[r] * gaps[c]);
                col_sq[c] += g * g;
                if c != r {
                    col_sq[r] += g * g;
                }
            }
        }
        let mut dists = [0.0f64; MAX_WINDOW];
        let mut max = 0.0f64;
        for i in 0..pairs {
            dists[i] = gaps[i] * col_sq[i].sqrt();
            max = max.max(dists[i]);
        }
        if !(max > 0.0) {
            return (rho, 0.0);
        }
        let pi = -dists[..pairs].iter().map(|d| d / max).sum::<f64>() / pairs as f64;
        (rho, pi)
    }
}

#[derive(Clone, Copy)]
struct Scored {
    score: f64,
    card: u32,
    mask: u32,
    rho: f64,
    pi: f64,
}

/// Lower score wins; ties go to fewer members, then the smaller id sequence.
fn better(a: Scored, b: Scored) -> Scored {
    let ord = a
        .score
        .total_cmp(&b.score)
        .then(a.card.cmp(&b.card))
        .then_with(|| lex_cmp(a.mask, b.mask));
    if ord == Ordering::Greater {
        b
    } else {
        a
    }
}

/// Exhaustively minimize the MSA objective over the constrained power set.
///
/// Only subsets with at least two members are scored. When none is
/// feasible the window falls back to `{first, last}` and the solution is
/// flagged `constraint_feasible = false`.
pub fn msa_select_window(
    window: &[Keyframe],
    anchor: Option<&Pose>,
    cfg: &SamplerConfig,
) -> Result<WindowSolution> {
    check_window(window)?;
    let start = Instant::now();
    let n = window.len();
    let geo = Geometry::new(window, anchor);
    let scorer = Scorer::new(window, &geo)?;
    let masks: Vec<u32> = geo.feasible_masks(cfg.delta_lower, cfg.delta_upper);
    let candidates: Vec<u32> = masks.iter().copied().filter(|m| m.count_ones() >= 2).collect();

    let score_mask = |mask: u32| {
        let mut members = [0usize; MAX_WINDOW];
        let mut k = 0;
        for i in bits(mask) {
            members[k] = i;
            k += 1;
        }
        let (rho, pi) = scorer.terms(&members[..k]);
        Scored {
            score: msa_score(rho, pi, cfg),
            card: mask.count_ones(),
            mask,
            rho,
            pi,
        }
    };

    let best = if candidates.len() >= PAR_THRESHOLD {
        candidates
            .par_iter()
            .map(|&m| score_mask(m))
            .reduce_with(better)
    } else {
        candidates.iter().map(|&m| score_mask(m)).reduce(better)
    };

    let (best, feasible) = match best {
        Some(b) => (b, true),
        None => {
            let mask = if n == 1 { 1 } else { 1 | (1 << (n - 1)) };
            (score_mask(mask), false)
        }
    };
    let selected: Vec<usize> = bits(best.mask).collect();
    Ok(WindowSolution {
        selected_ids: selected.iter().map(|&i| window[i].id).collect(),
        selected,
        rho: best.rho,
        pi: best.pi,
        objective: best.score,
        scoring_mode: cfg.scoring_mode,
        candidates_evaluated: candidates.len(),
        feasible_subsets: masks.len(),
        power_set_size: (1usize << n) - 1,
        constraint_feasible: feasible,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

/// Rows are difference quotients `(d_{i+1} - d_i) / |x_{i+1} - x_i|`.
pub fn numeric_jacobian(subset: &[Keyframe]) -> Result<DMatrix<f64>> {
    if subset.len() < 2 {
        return Err(Error::SubsetTooSmall {
            needed: 2,
            got: subset.len(),
        });
    }
    let m = subset[0].descriptor.dim();
    let mut j = DMatrix::zeros(subset.len() - 1, m);
    for (r, w) in subset.windows(2).enumerate() {
        if w[1].descriptor.dim() != m {
            return Err(Error::DimensionMismatch {
                left: m,
                right: w[1].descriptor.dim(),
            });
        }
        let gap = translation_distance(&w[0].pose, &w[1].pose);
        if gap < MIN_GAP {
            return Err(Error::CoincidentPoses {
                a: w[0].id,
                b: w[1].id,
            });
        }
        let (d0, d1) = (w[0].descriptor.values(), w[1].descriptor.values());
        for c in 0..m {
            j[(r, c)] = (d1[c] - d0[c]) / gap;
        }
    }
    Ok(j)
}

/// Eigen-decomposition of `J^T J` and the descriptors expressed in its
/// principal directions, scaled by the square roots of the eigenvalues.
#[derive(Clone, Debug)]
pub struct PrincipalTransform {
    /// `(n-1) x M`.
    pub jacobian: DMatrix<f64>,
    /// Nonzero spectrum of `J^T J`, padded with the Gram matrix's remaining
    /// (near-zero) eigenvalues; sorted descending, length `n-1`.
    pub eigenvalues: DVector<f64>,
    /// `M x r` orthonormal columns for the `r` nonzero eigenvalues.
    pub eigenvectors: DMatrix<f64>,
    /// One length `n-1` vector per keyframe; coordinates past `r` are zero.
    pub transformed: Vec<DVector<f64>>,
}

impl PrincipalTransform {
    pub fn rank(&self) -> usize {
        self.eigenvectors.ncols()
    }
}

/// Computed through the `(n-1) x (n-1)` Gram matrix `J J^T`, which shares
/// its nonzero spectrum with `J^T J`.
pub fn principal_transform(subset: &[Keyframe]) -> Result<PrincipalTransform> {
    let jacobian = numeric_jacobian(subset)?;
    let rows = jacobian.nrows();
    let gram = &jacobian * jacobian.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(rows, order.iter().map(|&k| eig.eigenvalues[k]));
    let top = eigenvalues[0].max(0.0);
    let rank = if top > 0.0 {
        eigenvalues.iter().filter(|&&l| l > RANK_TOL * top).count()
    } else {
        0
    };
    let m = jacobian.ncols();
    let mut eigenvectors = DMatrix::zeros(m, rank);
    for (c, &k) in order.iter().take(rank).enumerate() {
        let u = eig.eigenvectors.column(k);
        let v = jacobian.transpose() * u / eig.eigenvalues[k].sqrt();
        eigenvectors.set_column(c, &v);
    }
    let transformed = subset
        .iter()
        .map(|kf| {
            let d = DVector::from_column_slice(kf.descriptor.values());
            let mut t = DVector::zeros(rows);
            for c in 0..rank {
                t[c] = eigenvalues[c].sqrt() * eigenvectors.column(c).dot(&d);
            }
            t
        })
        .collect();
    Ok(PrincipalTransform {
        jacobian,
        eigenvalues,
        eigenvectors,
        transformed,
    })
}

/// Mean clamped-cosine similarity of consecutive keyframes, in [0, 1].
pub fn redundancy(subset: &[Keyframe]) -> Result<f64> {
    if subset.len() < 2 {
        return Err(Error::SubsetTooSmall {
            needed: 2,
            got: subset.len(),
        });
    }
    let mut sum = 0.0;
    for w in subset.windows(2) {
        sum += cosine_similarity(&w[0].descriptor, &w[1].descriptor)?;
    }
    Ok(sum / (subset.len() - 1) as f64)
}

/// Negated mean consecutive distance between transformed descriptors, each
/// normalized by the largest one, so the result lies in [-1, 0]. A zero
/// transform yields 0.
pub fn info_preservation(pt: &PrincipalTransform) -> f64 {
    let dists: Vec<f64> = pt
        .transformed
        .windows(2)
        .map(|w| (&w[1] - &w[0]).norm())
        .collect();
    let max = dists.iter().copied().fold(0.0, f64::max);
    if dists.is_empty() || !(max > 0.0) {
        return 0.0;
    }
    -dists.iter().map(|d| d / max).sum::<f64>() / dists.len() as f64
}
