use nalgebra::{Matrix3, Vector3};

use super::Pose;
use crate::error::{Error, Result};

/// Rigid (no scale) alignment `T` minimizing `sum |ref_i - T(est_i)|^2`
/// over pose positions (Umeyama / Kabsch).
pub fn umeyama_align(reference: &[Pose], estimate: &[Pose]) -> Result<Pose> {
    if reference.len() != estimate.len() {
        return Err(Error::CountMismatch {
            what: "alignment sequences",
            left: reference.len(),
            right: estimate.len(),
        });
    }
    let n = reference.len();
    if n < 3 {
        return Err(Error::TooFewPoses { needed: 3, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let mu_r = reference.iter().map(|p| p.translation).sum::<Vector3<f64>>() * inv_n;
    let mu_e = estimate.iter().map(|p| p.translation).sum::<Vector3<f64>>() * inv_n;

    let mut cross = Matrix3::zeros();
    let mut spread_r = Matrix3::zeros();
    let mut spread_e = Matrix3::zeros();
    for (r, e) in reference.iter().zip(estimate) {
        let dr = r.translation - mu_r;
        let de = e.translation - mu_e;
        cross += dr * de.transpose();
        spread_r += dr * dr.transpose();
        spread_e += de * de.transpose();
    }
    for spread in [&spread_r, &spread_e] {
        let s = spread.symmetric_eigenvalues();
        let mut s: Vec<f64> = s.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        if s[0] <= 1e-18 || s[1] <= 1e-10 * s[0] {
            return Err(Error::DegenerateGeometry(
                "alignment points are coincident or collinear",
            ));
        }
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let t = mu_r - r * mu_e;
    Ok(Pose::from_rotation_matrix(&r, t))
}

/// Left-apply an alignment transform to every pose.
pub fn apply_alignment(align: &Pose, poses: &[Pose]) -> Vec<Pose> {
    poses.iter().map(|p| align.compose(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quaternion_distance, translation_distance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_cloud(seed: u64, n: usize) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Pose::planar(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-PI..PI),
                )
            })
            .collect()
    }

    fn residual(reference: &[Pose], estimate: &[Pose], t: &Pose) -> f64 {
        reference
            .iter()
            .zip(apply_alignment(t, estimate))
            .map(|(r, e)| translation_distance(r, &e).powi(2))
            .sum()
    }

    #[test]
    fn identical_sequences_align_to_identity() {
        let gt = random_cloud(1, 20);
        let t = umeyama_align(&gt, &gt).unwrap();
        assert!(t.translation.norm() < 1e-12);
        assert!(t.rotation_angle() < 1e-12);
        assert!(residual(&gt, &gt, &t) < 1e-20);
    }

    #[test]
    fn recovers_known_transform() {
        let gt = random_cloud(2, 30);
        let known = Pose::new(
            nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI / 6.0),
            Vector3::new(1.0, 2.0, 0.0),
        );
        // estimate = known^-1 applied, so aligning must recover `known`.
        let est = apply_alignment(&known.inverse(), &gt);
        let t = umeyama_align(&gt, &est).unwrap();
        assert!((t.translation - known.translation).norm() < 1e-9);
        assert!(quaternion_distance(&t, &known) < 1e-9);
    }

    #[test]
    fn three_points_zero_residual() {
        let gt = vec![
            Pose::from_translation(0.0, 0.0, 0.0),
            Pose::from_translation(1.0, 0.0, 0.0),
            Pose::from_translation(0.0, 1.0, 0.0),
        ];
        let t = umeyama_align(&gt, &gt).unwrap();
        assert!(residual(&gt, &gt, &t) < 1e-24);
    }

    #[test]
    fn collinear_is_degenerate() {
        let line: Vec<Pose> = (0..5).map(|i| Pose::from_translation(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            umeyama_align(&line, &line),
            Err(Error::DegenerateGeometry(_))
        ));
        let same = vec![Pose::identity(); 4];
        assert!(matches!(
            umeyama_align(&same, &same),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn residual_invariant_to_joint_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let gt = random_cloud(100 + seed, 15);
            let est: Vec<Pose> = gt
                .iter()
                .map(|p| {
                    p.compose(&Pose::from_translation(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ))
                })
                .collect();
            let base = residual(&gt, &est, &umeyama_align(&gt, &est).unwrap());
            let g = Pose::planar(rng.random_range(-50.0..50.0), 3.0, rng.random_range(-3.0..3.0))
                .compose(&Pose::from_wxyz(0.9, 0.1, -0.2, 0.3, Vector3::new(0.0, 0.0, 4.0)));
            let gt2 = apply_alignment(&g, &gt);
            let est2 = apply_alignment(&g, &est);
            let moved = residual(&gt2, &est2, &umeyama_align(&gt2, &est2).unwrap());
            assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
        }
    }
}
