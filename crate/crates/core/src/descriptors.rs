//! Place-recognition descriptors: similarity/distance functions and a
//! deterministic synthetic descriptor field.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default descriptor dimension (1 x 256 feature vector).
pub const DEFAULT_DIM: usize = 256;

const ZERO_NORM: f64 = 1e-12;

/// Length-M real feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Descriptor {
        Descriptor(self.0.iter().map(|v| v * s).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Descriptor {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(a: &Descriptor, b: &Descriptor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Clamped cosine similarity `max(0, cos)` in [0, 1].
pub fn cosine_similarity(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    check_dims(a, b)?;
    let na = dot(&a.0, &a.0);
    let nb = dot(&b.0, &b.0);
    if na.sqrt() < ZERO_NORM || nb.sqrt() < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(clamped_cosine(dot(&a.0, &b.0), na, nb))
}

/// Cosine from precomputed inner products. `sqrt(na * nb)` (rather than
/// `sqrt(na) * sqrt(nb)`) makes identical vectors score exactly 1.
#[inline]
pub(crate) fn clamped_cosine(ab: f64, na: f64, nb: f64) -> f64 {
    (ab / (na * nb).sqrt()).clamp(0.0, 1.0)
}

pub fn euclidean_distance(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorFieldParams {
    pub seed: u64,
    pub dim: usize,
    pub num_frequencies: usize,
    /// Meters.
    pub length_scale: f64,
    /// Per-component standard deviation of additive observation noise.
    pub noise_sigma: f64,
}

impl Default for DescriptorFieldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: DEFAULT_DIM,
            num_frequencies: DEFAULT_DIM,
            length_scale: 10.0,
            noise_sigma: 0.0,
        }
    }
}

impl DescriptorFieldParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("descriptor dim must be >= 2".into()));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::Config("length_scale must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if 2 * self.num_frequencies < self.dim {
            return Err(Error::Config("num_frequencies must be >= dim / 2".into()));
        }
        Ok(())
    }
}

/// Random Fourier features of position: component `j` is
/// `cos(w_{j mod F} . p + b_j)`, L2-normalized over the vector.
///
/// The field only reads the position, so it is yaw invariant by
/// construction. It is Lipschitz with a constant of order `1/length_scale`.
#[derive(Clone, Debug)]
pub struct DescriptorField {
    params: DescriptorFieldParams,
    frequencies: Vec<Vector3<f64>>,
    phases: Vec<f64>,
}

impl DescriptorField {
    pub fn new(params: DescriptorFieldParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let normal = Normal::new(0.0, 1.0 / params.length_scale).expect("positive std");
        let frequencies = (0..params.num_frequencies)
            .map(|_| {
                Vector3::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                )
            })
            .collect();
        let phases = (0..params.dim)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Ok(Self {
            params,
            frequencies,
            phases,
        })
    }

    pub fn params(&self) -> &DescriptorFieldParams {
        &self.params
    }

    /// Noise-free descriptor at `position`.
    pub fn eval(&self, position: &Vector3<f64>) -> Descriptor {
        let f = self.frequencies.len();
        let mut values: Vec<f64> = self
            .phases
            .iter()
            .enumerate()
            .map(|(j, b)| (self.frequencies[j % f].dot(position) + b).cos())
            .collect();
        let n = dot(&values, &values).sqrt();
        if n > 0.0 {
            values.iter_mut().for_each(|v| *v /= n);
        }
        Descriptor(values)
    }

    /// Descriptor with zero-mean Gaussian noise drawn from `noise_seed`.
    pub fn eval_noisy(&self, position: &Vector3<f64>, noise_seed: u64) -> Descriptor {
        let mut d = self.eval(position);
        if self.params.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.params.seed ^ noise_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let normal = Normal::new(0.0, self.params.noise_sigma).expect("valid sigma");
            d.0.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        d
    }
}

/// One-shot evaluation; prefer [`DescriptorField`] when evaluating many points.
pub fn field_eval(
    params: &DescriptorFieldParams,
    position: &Vector3<f64>,
    noise_seed: Option<u64>,
) -> Result<Descriptor> {
    let field = DescriptorField::new(params.clone())?;
    Ok(match noise_seed {
        Some(s) => field.eval_noisy(position, s),
        None => field.eval(position),
    })
}
