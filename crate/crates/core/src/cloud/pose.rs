use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng as SeededRng};

const ORTHO_TOL: f64 = 1e-9;

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<RawPose> for RigidPose {
    type Error = Error;

    fn try_from(raw: RawPose) -> Result<Self> {
        let r = Matrix3::from_fn(|i, j| raw.rotation[i][j]);
        RigidPose::new(r, Vector3::from(raw.translation))
    }
}

impl From<RigidPose> for RawPose {
    fn from(p: RigidPose) -> Self {
        let r = p.rotation;
        RawPose {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let gram_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if gram_err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (err {gram_err:e})")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("det(rotation) = {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Result<Self> {
        let axis = Unit::try_new(axis, 1e-12).ok_or_else(|| Error::InvalidPose("zero rotation axis".into()))?;
        Self::new(*Rotation3::from_axis_angle(&axis, angle_rad).matrix(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in degrees, in `[0, 180]`.
    pub fn angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    pub fn apply_point(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }
}

pub fn apply_pose(cloud: &PointCloud, pose: &RigidPose) -> PointCloud {
    PointCloud::from_points_unchecked(cloud.iter().map(|p| pose.apply_point(p)).collect())
}

/// Bounds for a uniformly drawn pose perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub max_rotation_deg: f64,
    /// Object-diameter units.
    pub max_translation: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(max_rotation_deg: f64, max_translation: f64, seed: u64) -> Result<Self> {
        if !(max_rotation_deg >= 0.0 && max_translation >= 0.0)
            || !max_rotation_deg.is_finite()
            || !max_translation.is_finite()
        {
            return Err(Error::InvalidSpec(format!(
                "noise bounds must be finite and >= 0, got {max_rotation_deg} deg / {max_translation}"
            )));
        }
        Ok(Self {
            max_rotation_deg,
            max_translation,
            seed,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.max_rotation_deg == 0.0 && self.max_translation == 0.0
    }
}

fn unit_sphere(rng: &mut SeededRng) -> Vector3<f64> {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Axis uniform on the sphere, angle uniform in `[0, max]`; translation
/// direction uniform on the sphere, magnitude uniform in `[0, max]`.
pub fn sample_pose_noise(spec: &NoiseSpec) -> RigidPose {
    sample_pose_with(&mut seeded(spec.seed), spec)
}

pub(crate) fn sample_pose_with(rng: &mut SeededRng, spec: &NoiseSpec) -> RigidPose {
    let axis = unit_sphere(rng);
    let angle = rng.gen_range(0.0..=1.0) * spec.max_rotation_deg.to_radians();
    let dir = unit_sphere(rng);
    let mag = rng.gen_range(0.0..=1.0) * spec.max_translation;
    let rotation = *Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle).matrix();
    RigidPose {
        rotation,
        translation: dir * mag,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::dist;

    fn sample_cloud() -> PointCloud {
        PointCloud::new(vec![[1.0, 0.0, 0.0], [0.3, -0.2, 0.9], [-0.5, 0.4, 0.1], [0.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn identity_leaves_cloud() {
        let c = sample_cloud();
        assert_eq!(apply_pose(&c, &RigidPose::identity()), c);
    }

    #[test]
    fn quarter_turn_about_z() {
        let pose = RigidPose::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros()).unwrap();
        let q = pose.apply_point(&[1.0, 0.0, 0.0]);
        assert!((q[0]).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12 && q[2].abs() < 1e-12);
    }

    #[test]
    fn inverse_composes_to_identity_and_preserves_distances() {
        let pose = sample_pose_noise(&NoiseSpec::new(40.0, 0.3, 7).unwrap());
        let c = sample_cloud();
        let moved = apply_pose(&c, &pose);
        let back = apply_pose(&c, &pose.compose(&pose.inverse()));
        for (a, b) in c.iter().zip(back.iter()) {
            assert!(dist(a, b) < 1e-9);
        }
        for i in 0..c.len() {
            for j in 0..c.len() {
                let d0 = dist(&c.points()[i], &c.points()[j]);
                let d1 = dist(&moved.points()[i], &moved.points()[j]);
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_reflection_and_skew() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(RigidPose::new(reflect, Vector3::zeros()), Err(Error::InvalidPose(_))));
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(skew, Vector3::zeros()).is_err());
    }

    #[test]
    fn zero_spec_is_identity() {
        for seed in 0..5 {
            let p = sample_pose_noise(&NoiseSpec::new(0.0, 0.0, seed).unwrap());
            assert!((p.rotation() - Matrix3::identity()).abs().max() < 1e-15);
            assert_eq!(p.translation().norm(), 0.0);
        }
    }

    #[test]
    fn draws_respect_bounds() {
        let mut rng = seeded(99);
        let spec = NoiseSpec::new(5.0, 0.01, 0).unwrap();
        for _ in 0..10_000 {
            let p = sample_pose_with(&mut rng, &spec);
            assert!(p.angle_deg() <= 5.0 + 1e-9);
            assert!(p.translation().norm() <= 0.01 + 1e-15);
        }
    }

    #[test]
    fn pose_serde_validates() {
        let p = sample_pose_noise(&NoiseSpec::new(10.0, 0.05, 3).unwrap());
        let s = serde_json::to_string(&p).unwrap();
        let back: RigidPose = serde_json::from_str(&s).unwrap();
        assert!((back.rotation() - p.rotation()).abs().max() < 1e-15);
        let bad = r#"{"rotation":[[2,0,0],[0,1,0],[0,0,1]],"translation":[0,0,0]}"#;
        assert!(serde_json::from_str::<RigidPose>(bad).is_err());
    }
}
