//! Point-cloud values, file formats, resampling and rigid transforms.

mod io;
mod pose;

pub use io::{load_cloud, save_cloud, CloudFormat};
pub use pose::{apply_pose, sample_pose_noise, NoiseSpec, RigidPose};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub type Point = [f64; 3];

/// An ordered set of 3D points in canonical-frame units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSpec("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    /// Builds a cloud without the finiteness scan. Callers guarantee finite input.
    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            points: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Point> {
        self.points.get(i)
    }

    /// Row-major `n x 3` coordinate buffer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Inverse of [`PointCloud::to_flat`]; `data.len()` must be a multiple of 3.
    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if !data.len().is_multiple_of(3) {
            return Err(Error::ShapeMismatch(format!(
                "flat buffer of {} values is not n x 3",
                data.len()
            )));
        }
        Self::new(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Self { points }
    }

    pub fn non_empty(&self) -> Result<&Self> {
        if self.is_empty() {
            Err(Error::EmptyCloud)
        } else {
            Ok(self)
        }
    }

    /// Axis-aligned bounding box as `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point, Point)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            (lo, hi)
        }))
    }

    /// Longest edge of the axis-aligned bounding box.
    pub fn longest_extent(&self) -> f64 {
        match self.bounds() {
            Some((lo, hi)) => (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max),
            None => 0.0,
        }
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.is_empty() {
            return None;
        }
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        Some(c.map(|v| v / n))
    }
}

impl From<PointCloud> for Vec<Point> {
    fn from(c: PointCloud) -> Self {
        c.points
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Draws exactly `n` points from `cloud`.
///
/// With `n <= |cloud|` the draw is without replacement. Otherwise every
/// original point is kept (in order) and the remainder is filled uniformly
/// with replacement.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    cloud.non_empty()?;
    let mut rng = seeded(seed);
    let len = cloud.len();
    let points = if n <= len {
        index::sample(&mut rng, len, n)
            .into_iter()
            .map(|i| cloud.points[i])
            .collect()
    } else {
        let mut points = cloud.points.clone();
        points.extend((len..n).map(|_| cloud.points[rng.gen_range(0..len)]));
        points
    };
    Ok(PointCloud { points })
}

#[inline]
pub fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn grid(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [i as f64, (i * 7 % 13) as f64, 0.5]).collect()).unwrap()
    }

    #[test]
    fn resample_without_replacement_is_distinct() {
        let c = grid(5000);
        let r = resample(&c, 3096, 11).unwrap();
        assert_eq!(r.len(), 3096);
        let xs: HashSet<u64> = r.iter().map(|p| p[0] as u64).collect();
        assert_eq!(xs.len(), 3096);
    }

    #[test]
    fn resample_full_size_is_permutation() {
        let c = grid(64);
        let r = resample(&c, 64, 3).unwrap();
        let mut a: Vec<u64> = r.iter().map(|p| p[0] as u64).collect();
        a.sort_unstable();
        assert_eq!(a, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn resample_upsample_keeps_originals() {
        let c = grid(10);
        let r = resample(&c, 25, 5).unwrap();
        assert_eq!(r.len(), 25);
        assert_eq!(&r.points()[..10], c.points());
        assert!(r.points()[10..].iter().all(|p| c.points().contains(p)));
    }

    #[test]
    fn resample_is_deterministic() {
        let c = grid(100);
        assert_eq!(resample(&c, 40, 9).unwrap(), resample(&c, 40, 9).unwrap());
        assert!(matches!(resample(&PointCloud::empty(), 3, 0), Err(Error::EmptyCloud)));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 1.0]]).is_err());
    }
}
