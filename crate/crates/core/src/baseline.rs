//! Densification baseline: every point spawns samples inside the ellipsoid
//! spanned by the principal axes of its 10 nearest neighbours.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{resample, Point, PointCloud};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::spatial::KdTree;

pub const NEIGHBORS: usize = 10;
/// Lower bound on every radius, so flat or collinear neighbourhoods still
/// give a valid (if thin) ellipsoid.
pub const MIN_RADIUS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub center: Point,
    /// Unit principal axes, matching `radii`.
    pub axes: [Point; 3],
    /// Standard deviations along `axes`, sorted descending.
    pub radii: [f64; 3],
}

impl EllipsoidSpec {
    /// Principal axes of the neighbourhood covariance (population
    /// normalization, centred at the neighbourhood mean).
    pub fn from_neighbors(pts: &[Point]) -> Result<Self> {
        if pts.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let n = pts.len() as f64;
        let mut mean = Vector3::zeros();
        for p in pts {
            mean += Vector3::from(*p);
        }
        mean /= n;
        let mut cov = Matrix3::zeros();
        for p in pts {
            let d = Vector3::from(*p) - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axes = order.map(|k| {
            let v = eig.eigenvectors.column(k).normalize();
            [v[0], v[1], v[2]]
        });
        let radii = order.map(|k| eig.eigenvalues[k].max(0.0).sqrt().max(MIN_RADIUS));
        Ok(Self { center: [mean[0], mean[1], mean[2]], axes, radii })
    }

    /// Coordinates in the unit-ball frame of the ellipsoid.
    pub fn to_unit(&self, p: &Point) -> Point {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        std::array::from_fn(|a| {
            let ax = &self.axes[a];
            (d[0] * ax[0] + d[1] * ax[1] + d[2] * ax[2]) / self.radii[a]
        })
    }

    /// Uniform sample from the solid ellipsoid.
    pub fn sample(&self, rng: &mut Rng) -> Point {
        let u = sample_unit_ball(rng);
        let mut p = self.center;
        for a in 0..3 {
            for (pc, ac) in p.iter_mut().zip(&self.axes[a]) {
                *pc += self.radii[a] * u[a] * ac;
            }
        }
        p
    }
}

/// Uniform in the unit ball: Gaussian direction, radius `U^(1/3)`.
fn sample_unit_ball(rng: &mut Rng) -> Point {
    loop {
        let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm > 0.0 {
            let r = rng.gen::<f64>().cbrt();
            return g.map(|v| v / norm * r);
        }
    }
}

/// Per-point neighbourhood ellipsoids (the point itself excluded).
pub fn neighborhood_ellipsoids(x: &PointCloud) -> Result<Vec<EllipsoidSpec>> {
    if x.len() < NEIGHBORS + 1 {
        return Err(Error::TooFewPoints { needed: NEIGHBORS + 1, got: x.len() });
    }
    let tree = KdTree::build(x.points());
    x.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut nn = tree.k_nearest(p, NEIGHBORS + 1);
            match nn.iter().position(|&(j, _)| j == i) {
                Some(pos) => {
                    nn.remove(pos);
                }
                None => {
                    nn.pop();
                }
            }
            let pts: Vec<Point> = nn.iter().map(|&(j, _)| x.points()[j]).collect();
            EllipsoidSpec::from_neighbors(&pts)
        })
        .collect()
}

/// `points_per_seed` uniform samples inside every neighbourhood ellipsoid,
/// concatenated in input order and resampled to `target` points.
pub fn densify(x: &PointCloud, points_per_seed: usize, target: usize, seed: u64) -> Result<PointCloud> {
    if points_per_seed == 0 || target == 0 {
        return Err(Error::InvalidSpec("points_per_seed and target must be positive".into()));
    }
    let ellipsoids = neighborhood_ellipsoids(x)?;
    let mut rng = seeded(derive_seed(seed, 0));
    let mut out = Vec::with_capacity(ellipsoids.len() * points_per_seed);
    for e in &ellipsoids {
        for _ in 0..points_per_seed {
            out.push(e.sample(&mut rng));
        }
    }
    resample(&PointCloud::new(out)?, target, derive_seed(seed, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &Point) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seeded(seed);
        PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2)]).collect()).unwrap()
    }

    /// Asymptotic Kolmogorov survival function.
    fn ks_p_value(d: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
            sum += term;
        }
        sum.clamp(0.0, 1.0)
    }

    #[test]
    fn axes_are_orthonormal_and_radii_sorted() {
        let x = random_cloud(200, 1);
        for e in neighborhood_ellipsoids(&x).unwrap() {
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|c| e.axes[a][c] * e.axes[b][c]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9);
                }
            }
            assert!(e.radii[0] >= e.radii[1] && e.radii[1] >= e.radii[2]);
        }
    }

    #[test]
    fn known_covariance_gives_known_radii() {
        // +-1 along x and +-2 along y: variances 1/2 and 2 over four points
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, -2.0, 0.0]];
        let e = EllipsoidSpec::from_neighbors(&pts).unwrap();
        assert!((e.radii[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((e.radii[1] - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(e.radii[2], MIN_RADIUS);
        assert!(e.axes[0][1].abs() > 1.0 - 1e-12);
    }

    #[test]
    fn collinear_neighborhood_samples_lie_on_the_segment() {
        let x = PointCloud::new((0..12).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect()).unwrap();
        let out = densify(&x, 5, 60, 3).unwrap();
        for p in out.iter() {
            assert!(p[1].abs() < 1e-8 && p[2].abs() < 1e-8);
        }
    }

    #[test]
    fn samples_stay_inside_their_ellipsoid() {
        let x = random_cloud(50, 2);
        let mut rng = seeded(9);
        for e in neighborhood_ellipsoids(&x).unwrap() {
            for _ in 0..50 {
                assert!(norm(&e.to_unit(&e.sample(&mut rng))) <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn densified_points_fall_in_the_union_of_ellipsoids() {
        let x = random_cloud(40, 4);
        let ells = neighborhood_ellipsoids(&x).unwrap();
        let out = densify(&x, 4, 100, 5).unwrap();
        assert_eq!(out.len(), 100);
        for p in out.iter() {
            assert!(ells.iter().any(|e| norm(&e.to_unit(p)) <= 1.0 + 1e-9));
        }
    }

    #[test]
    fn radial_distribution_follows_cube_law() {
        let e = EllipsoidSpec {
            center: [0.3, -0.2, 0.1],
            axes: [[0.0, 1.0, 0.0], [0.6, 0.0, 0.8], [0.8, 0.0, -0.6]],
            radii: [2.0, 0.7, 0.1],
        };
        let mut rng = seeded(11);
        let n = 100_000;
        let mut rho: Vec<f64> = (0..n).map(|_| norm(&e.to_unit(&e.sample(&mut rng)))).collect();
        rho.sort_by(f64::total_cmp);
        let d = rho
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let f = r.powi(3);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks_p_value(d, n) > 0.01, "KS D = {d}");
    }

    #[test]
    fn too_few_points_and_determinism() {
        let x = random_cloud(10, 6);
        assert!(matches!(densify(&x, 2, 10, 0), Err(Error::TooFewPoints { needed: 11, got: 10 })));
        let y = random_cloud(30, 7);
        assert_eq!(densify(&y, 3, 50, 8).unwrap(), densify(&y, 3, 50, 8).unwrap());
    }
}
