//! Octant partitioning with overlap bands and stochastic region removal.
//!
//! Region `i` is the octant whose sign pattern is the bit code of `i`:
//! bit 0 set means `x >= 0`, bit 1 `y >= 0`, bit 2 `z >= 0`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{resample, PointCloud};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const NUM_REGIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    /// Width of the band around each coordinate plane whose points join both sides.
    pub overlap: f64,
    /// Minimum point count for a region to count as present.
    pub presence_threshold: usize,
    pub removal_prob: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            overlap: 0.02,
            presence_threshold: 4,
            removal_prob: 0.20,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap >= 0.0 && self.overlap.is_finite()) {
            return Err(Error::InvalidSpec(format!("overlap must be >= 0, got {}", self.overlap)));
        }
        if self.presence_threshold == 0 {
            return Err(Error::InvalidSpec("presence_threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.removal_prob) {
            return Err(Error::InvalidSpec(format!(
                "removal_prob must lie in [0, 1], got {}",
                self.removal_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    /// Point indices per octant, in input order.
    pub regions: [Vec<usize>; NUM_REGIONS],
    /// Region holds at least `presence_threshold` points.
    pub present: [bool; NUM_REGIONS],
    /// Present and not synthetically removed.
    pub kept: [bool; NUM_REGIONS],
}

#[inline]
fn in_region(p: &[f64; 3], region: usize, overlap: f64) -> bool {
    (0..3).all(|a| {
        if region >> a & 1 == 1 {
            p[a] >= -overlap
        } else {
            p[a] < overlap
        }
    })
}

/// Octant code of a point with no overlap.
pub fn octant_of(p: &[f64; 3]) -> usize {
    (0..3).fold(0, |code, a| code | (usize::from(p[a] >= 0.0) << a))
}

pub fn partition(cloud: &PointCloud, cfg: &PartitionConfig) -> RegionPartition {
    let mut regions: [Vec<usize>; NUM_REGIONS] = Default::default();
    for (idx, p) in cloud.iter().enumerate() {
        if cfg.overlap == 0.0 {
            regions[octant_of(p)].push(idx);
        } else {
            for (r, members) in regions.iter_mut().enumerate() {
                if in_region(p, r, cfg.overlap) {
                    members.push(idx);
                }
            }
        }
    }
    let present = std::array::from_fn(|i| regions[i].len() >= cfg.presence_threshold);
    let mut rng = seeded(cfg.seed);
    // one draw per region regardless of presence keeps the stream layout fixed
    let draws: [f64; NUM_REGIONS] = std::array::from_fn(|_| rng.gen::<f64>());
    let kept = std::array::from_fn(|i| present[i] && draws[i] >= cfg.removal_prob);
    RegionPartition { regions, present, kept }
}

impl RegionPartition {
    /// Removes exactly `count` present regions chosen uniformly (all of
    /// them if fewer are present); the rest are kept.
    pub fn remove_exactly(&mut self, count: usize, seed: u64) {
        let mut present: Vec<usize> = (0..NUM_REGIONS).filter(|&i| self.present[i]).collect();
        present.shuffle(&mut seeded(seed));
        self.kept = self.present;
        for &i in present.iter().take(count) {
            self.kept[i] = false;
        }
    }

    /// Restores every present region.
    pub fn keep_all(&mut self) {
        self.kept = self.present;
    }

    pub fn removed(&self, i: usize) -> bool {
        self.present[i] && !self.kept[i]
    }

    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|&&b| b).count()
    }

    pub fn num_kept(&self) -> usize {
        self.kept.iter().filter(|&&b| b).count()
    }

    /// Per-point flag: the point survives synthetic occlusion.
    fn survivors(&self, n: usize) -> Vec<bool> {
        let mut removed_any = vec![false; n];
        let mut survives = vec![false; n];
        for (r, members) in self.regions.iter().enumerate() {
            for &idx in members {
                if self.removed(r) {
                    removed_any[idx] = true;
                } else {
                    survives[idx] = true;
                }
            }
        }
        // points only in removed regions are dropped; everything else stays
        survives.iter().zip(&removed_any).map(|(&s, &r)| s || !r).collect()
    }
}

/// Drops every point whose region memberships were all removed. Points of
/// absent (below-threshold) regions are never dropped.
pub fn synthetic_occlude(cloud: &PointCloud, part: &RegionPartition) -> Result<PointCloud> {
    if part.num_present() > 0 && part.num_kept() == 0 {
        return Err(Error::AllRemoved);
    }
    let keep = part.survivors(cloud.len());
    let idx: Vec<usize> = (0..cloud.len()).filter(|&i| keep[i]).collect();
    if idx.is_empty() {
        return Err(Error::AllRemoved);
    }
    Ok(cloud.select(&idx))
}

pub fn region_points(cloud: &PointCloud, part: &RegionPartition, i: usize) -> PointCloud {
    cloud.select(&part.regions[i])
}

/// Fixed-size encoder input for one region: `n` zeros when the region has
/// fewer than `threshold` points, otherwise a resample to `n`.
pub fn pad_region(region: &PointCloud, n: usize, threshold: usize, seed: u64) -> PointCloud {
    if region.len() < threshold.max(1) {
        PointCloud::zeros(n)
    } else {
        resample(region, n, seed).expect("non-empty region")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(overlap: f64) -> PartitionConfig {
        PartitionConfig {
            overlap,
            ..Default::default()
        }
    }

    fn corners() -> PointCloud {
        PointCloud::new(
            (0..8)
                .map(|i| [0, 1, 2].map(|a| if i >> a & 1 == 1 { 1.0 } else { -1.0 }))
                .collect(),
        )
        .unwrap()
    }

    fn memberships(part: &RegionPartition, idx: usize) -> Vec<usize> {
        (0..NUM_REGIONS).filter(|&r| part.regions[r].contains(&idx)).collect()
    }

    #[test]
    fn strict_octant_membership() {
        let c = PointCloud::new(vec![[0.5, 0.5, 0.5]]).unwrap();
        let p = partition(&c, &cfg(0.0));
        assert_eq!(memberships(&p, 0), vec![7]);
    }

    #[test]
    fn overlap_band_joins_both_sides() {
        let c = PointCloud::new(vec![[0.01, 1.0, 1.0]]).unwrap();
        let p = partition(&c, &cfg(0.02));
        // (+,+,+) = 7 and (-,+,+) = 6
        assert_eq!(memberships(&p, 0), vec![6, 7]);
        let r6 = region_points(&c, &p, 6);
        let r7 = region_points(&c, &p, 7);
        assert_eq!(r6, r7);
    }

    #[test]
    fn plane_points_go_to_non_negative_side() {
        let c = PointCloud::new(vec![[0.0, -1.0, 0.0]]).unwrap();
        let p = partition(&c, &cfg(0.0));
        assert_eq!(memberships(&p, 0), vec![0b101]);
    }

    #[test]
    fn presence_threshold() {
        let mut pts = vec![[0.5, 0.5, 0.5]; 3];
        pts.extend(vec![[-0.5, -0.5, -0.5]; 4]);
        let p = partition(&PointCloud::new(pts).unwrap(), &cfg(0.0));
        assert!(!p.present[7]);
        assert!(p.present[0]);
        assert!(!p.kept[7]);
    }

    #[test]
    fn cube_corners_one_per_region() {
        let c = corners();
        let p = partition(&c, &PartitionConfig { presence_threshold: 1, ..cfg(0.0) });
        for i in 0..NUM_REGIONS {
            let r = region_points(&c, &p, i);
            assert_eq!(r.len(), 1);
            assert_eq!(octant_of(&r.points()[0]), i);
        }
        assert!(region_points(&c, &partition(&c, &cfg(0.0)), 0).len() == 1);
    }

    #[test]
    fn empty_region_gives_empty_cloud() {
        let c = PointCloud::new(vec![[0.5, 0.5, 0.5]]).unwrap();
        let p = partition(&c, &cfg(0.0));
        assert!(region_points(&c, &p, 0).is_empty());
    }

    #[test]
    fn zero_removal_keeps_everything() {
        let c = corners();
        let p = partition(&c, &PartitionConfig { removal_prob: 0.0, presence_threshold: 1, ..cfg(0.0) });
        assert_eq!(p.kept, p.present);
        assert_eq!(synthetic_occlude(&c, &p).unwrap(), c);
    }

    #[test]
    fn dropping_one_region_removes_its_points() {
        let c = corners();
        let mut p = partition(&c, &PartitionConfig { presence_threshold: 1, ..cfg(0.0) });
        p.keep_all();
        p.kept[3] = false;
        let occluded = synthetic_occlude(&c, &p).unwrap();
        let expected: Vec<usize> = (0..8).filter(|&i| i != 3).collect();
        assert_eq!(occluded, c.select(&expected));
    }

    #[test]
    fn overlap_point_survives_if_any_region_kept() {
        let mut pts = vec![[0.01, 1.0, 1.0]];
        pts.extend(vec![[0.5, 0.5, 0.5]; 4]);
        pts.extend(vec![[-0.5, 0.5, 0.5]; 4]);
        let c = PointCloud::new(pts).unwrap();
        let mut p = partition(&c, &cfg(0.02));
        p.keep_all();
        p.kept[7] = false;
        let occluded = synthetic_occlude(&c, &p).unwrap();
        assert_eq!(occluded.len(), 5);
        assert_eq!(occluded.points()[0], [0.01, 1.0, 1.0]);
    }

    #[test]
    fn all_removed_is_an_error() {
        let c = corners();
        let mut p = partition(&c, &PartitionConfig { presence_threshold: 1, ..cfg(0.0) });
        p.kept = [false; NUM_REGIONS];
        assert!(matches!(synthetic_occlude(&c, &p), Err(Error::AllRemoved)));
    }

    #[test]
    fn remove_exactly_counts() {
        let c = corners();
        let mut p = partition(&c, &PartitionConfig { presence_threshold: 1, ..cfg(0.0) });
        for k in 0..=3 {
            p.remove_exactly(k, 10 + k as u64);
            assert_eq!(p.num_kept(), 8 - k);
        }
    }

    #[test]
    fn padding_rules() {
        let region = PointCloud::new((0..500).map(|i| [i as f64, 1.0, 1.0]).collect()).unwrap();
        let padded = pad_region(&region, 387, 4, 1);
        assert_eq!(padded.len(), 387);
        assert!(padded.iter().all(|p| region.points().contains(p)));

        let empty = pad_region(&PointCloud::empty(), 387, 4, 1);
        assert_eq!(empty, PointCloud::zeros(387));

        let exact = PointCloud::new((0..387).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let mut xs: Vec<i64> = pad_region(&exact, 387, 4, 2).iter().map(|p| p[0] as i64).collect();
        xs.sort_unstable();
        assert_eq!(xs, (0..387).collect::<Vec<_>>());
    }

    #[test]
    fn json_round_trip() {
        let c = corners();
        let p = partition(&c, &cfg(0.5));
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<RegionPartition>(&s).unwrap(), p);
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..120)
            .prop_map(|pts| PointCloud::new(pts).unwrap())
    }

    proptest! {
        #[test]
        fn every_point_is_covered(c in arb_cloud(), overlap in 0.0f64..0.3) {
            let p = partition(&c, &cfg(overlap));
            for i in 0..c.len() {
                prop_assert!(!memberships(&p, i).is_empty());
            }
        }

        #[test]
        fn zero_overlap_is_exact(c in arb_cloud()) {
            let p = partition(&c, &cfg(0.0));
            let total: usize = p.regions.iter().map(Vec::len).sum();
            prop_assert_eq!(total, c.len());
        }

        #[test]
        fn overlap_is_monotone(c in arb_cloud(), a in 0.0f64..0.2, b in 0.0f64..0.2) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = partition(&c, &cfg(lo));
            let large = partition(&c, &cfg(hi));
            for r in 0..NUM_REGIONS {
                for idx in &small.regions[r] {
                    prop_assert!(large.regions[r].contains(idx));
                }
            }
        }

        #[test]
        fn kept_implies_present_and_deterministic(c in arb_cloud(), seed in any::<u64>(), prob in 0.0f64..=1.0) {
            let cfg = PartitionConfig { seed, removal_prob: prob, ..cfg(0.02) };
            let p = partition(&c, &cfg);
            for i in 0..NUM_REGIONS {
                prop_assert!(!p.kept[i] || p.present[i]);
                prop_assert_eq!(p.present[i], p.regions[i].len() >= cfg.presence_threshold);
            }
            prop_assert_eq!(p, partition(&c, &cfg));
        }
    }
}
