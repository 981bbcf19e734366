//! Procedural multi-view dataset: simple solids sampled on their surface,
//! seen from random directions, each view with its own canonicalization
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cloud::{apply_pose, load_cloud, resample, sample_pose_noise, save_cloud, CloudFormat, NoiseSpec, Point, PointCloud};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Box,
    Cylinder,
    Ellipsoid,
    /// A box base with a cylinder on top.
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Ellipsoid, ShapeKind::Composite];
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Self::Box),
            "cylinder" => Ok(Self::Cylinder),
            "ellipsoid" => Ok(Self::Ellipsoid),
            "composite" => Ok(Self::Composite),
            _ => Err(Error::InvalidSpec(format!("unknown shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub n_instances: usize,
    pub shapes: Vec<ShapeKind>,
    pub views_per_instance: usize,
    pub points_per_view: usize,
    /// Dense surface sample kept for evaluation only.
    pub gt_points: usize,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_instances: 20,
            shapes: ShapeKind::ALL.to_vec(),
            views_per_instance: 4,
            points_per_view: 1024,
            gt_points: 2048,
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n_instances == 0 {
            return bad("n_instances must be positive");
        }
        if self.shapes.is_empty() {
            return bad("at least one shape kind is required");
        }
        if self.views_per_instance == 0 || self.points_per_view == 0 || self.gt_points == 0 {
            return bad("view count and point counts must be positive");
        }
        NoiseSpec::new(self.max_rotation_deg, self.max_translation, 0)?;
        Ok(())
    }
}

/// One object: the evaluation-only dense surface and its partial views.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub shape: ShapeKind,
    pub gt: PointCloud,
    pub views: Vec<PointCloud>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ToySpec,
    pub instances: Vec<Instance>,
}

fn unit_vector(rng: &mut Rng) -> Point {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// A solid in the canonical frame, sampled uniformly by surface area.
#[derive(Debug, Clone)]
enum Solid {
    Cuboid { half: [f64; 3], center: Point },
    Cylinder { radius: f64, half_height: f64, center: Point },
    Ellipsoid { semi: [f64; 3] },
    Union(Vec<Solid>),
}

impl Solid {
    fn random(kind: ShapeKind, rng: &mut Rng) -> Self {
        match kind {
            ShapeKind::Box => Solid::Cuboid {
                half: [rng.gen_range(0.2..0.45), rng.gen_range(0.2..0.45), rng.gen_range(0.15..0.35)],
                center: [0.0; 3],
            },
            ShapeKind::Cylinder => Solid::Cylinder {
                radius: rng.gen_range(0.2..0.4),
                half_height: rng.gen_range(0.2..0.45),
                center: [0.0; 3],
            },
            ShapeKind::Ellipsoid => Solid::Ellipsoid {
                semi: [rng.gen_range(0.25..0.5), rng.gen_range(0.2..0.45), rng.gen_range(0.15..0.4)],
            },
            ShapeKind::Composite => {
                let base_h = rng.gen_range(0.08..0.15);
                let top_h = rng.gen_range(0.15..0.3);
                // stack centred on the origin along z
                let total = 2.0 * base_h + 2.0 * top_h;
                let base_z = -total / 2.0 + base_h;
                let top_z = base_z + base_h + top_h;
                Solid::Union(vec![
                    Solid::Cuboid {
                        half: [rng.gen_range(0.3..0.45), rng.gen_range(0.3..0.45), base_h],
                        center: [0.0, 0.0, base_z],
                    },
                    Solid::Cylinder {
                        radius: rng.gen_range(0.1..0.22),
                        half_height: top_h,
                        center: [0.0, 0.0, top_z],
                    },
                ])
            }
        }
    }

    fn area(&self) -> f64 {
        match self {
            Solid::Cuboid { half: [a, b, c], .. } => 8.0 * (a * b + b * c + a * c),
            Solid::Cylinder { radius, half_height, .. } => {
                std::f64::consts::TAU * radius * (2.0 * half_height) + std::f64::consts::TAU * radius * radius
            }
            Solid::Ellipsoid { semi: [a, b, c] } => {
                // Knud Thomsen's approximation; only used for mixture weights
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * std::f64::consts::PI * m.powf(1.0 / p)
            }
            Solid::Union(parts) => parts.iter().map(Solid::area).sum(),
        }
    }

    fn sample(&self, rng: &mut Rng) -> Point {
        match self {
            Solid::Cuboid { half, center } => {
                let [a, b, c] = *half;
                let faces = [b * c, a * c, a * b];
                let total: f64 = faces.iter().sum();
                let mut u = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (i, f) in faces.iter().enumerate() {
                    if u < *f {
                        axis = i;
                        break;
                    }
                    u -= f;
                }
                let mut p = [rng.gen_range(-a..=a), rng.gen_range(-b..=b), rng.gen_range(-c..=c)];
                p[axis] = if rng.gen_bool(0.5) { half[axis] } else { -half[axis] };
                [p[0] + center[0], p[1] + center[1], p[2] + center[2]]
            }
            Solid::Cylinder { radius, half_height, center } => {
                let side = std::f64::consts::TAU * radius * 2.0 * half_height;
                let caps = std::f64::consts::TAU * radius * radius;
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let (x, y, z) = if rng.gen_range(0.0..side + caps) < side {
                    (radius * theta.cos(), radius * theta.sin(), rng.gen_range(-half_height..=*half_height))
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if rng.gen_bool(0.5) { *half_height } else { -half_height };
                    (r * theta.cos(), r * theta.sin(), z)
                };
                [x + center[0], y + center[1], z + center[2]]
            }
            Solid::Ellipsoid { semi: [a, b, c] } => {
                // rejection on the area element of the sphere-to-ellipsoid map
                let g_max = (a * b).max(a * c).max(b * c);
                loop {
                    let [x, y, z] = unit_vector(rng);
                    let g = ((b * c * x).powi(2) + (a * c * y).powi(2) + (a * b * z).powi(2)).sqrt();
                    if rng.gen_range(0.0..g_max) < g {
                        return [a * x, b * y, c * z];
                    }
                }
            }
            Solid::Union(parts) => {
                let total = self.area();
                let mut u = rng.gen_range(0.0..total);
                for part in parts {
                    let a = part.area();
                    if u < a {
                        return part.sample(rng);
                    }
                    u -= a;
                }
                parts.last().expect("non-empty union").sample(rng)
            }
        }
    }

    fn sample_cloud(&self, n: usize, rng: &mut Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| self.sample(rng)).collect()).expect("finite samples")
    }
}

/// Keeps the points on the side of the object facing `dir`.
pub fn hemisphere_cull(cloud: &PointCloud, dir: &Point) -> PointCloud {
    let idx: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = cloud.points()[i];
            p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2] > 0.0
        })
        .collect();
    cloud.select(&idx)
}

fn make_instance(spec: &ToySpec, index: usize) -> Result<Instance> {
    let seed = derive_seed(spec.seed, index as u64);
    let mut rng = seeded(seed);
    let shape = spec.shapes[index % spec.shapes.len()];
    let solid = Solid::random(shape, &mut rng);
    let gt = solid.sample_cloud(spec.gt_points, &mut rng);
    let mut views = Vec::with_capacity(spec.views_per_instance);
    for v in 0..spec.views_per_instance {
        let mut view_rng = seeded(derive_seed(seed, 1 + v as u64));
        let dense = solid.sample_cloud(4 * spec.points_per_view, &mut view_rng);
        let visible = loop {
            let c = hemisphere_cull(&dense, &unit_vector(&mut view_rng));
            if !c.is_empty() {
                break c;
            }
        };
        let view = resample(&visible, spec.points_per_view, view_rng.gen())?;
        let noise = NoiseSpec::new(spec.max_rotation_deg, spec.max_translation, view_rng.gen())?;
        views.push(apply_pose(&view, &sample_pose_noise(&noise)));
    }
    Ok(Instance { shape, gt, views })
}

pub fn make_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    spec.validate()?;
    let instances = (0..spec.n_instances).map(|i| make_instance(spec, i)).collect::<Result<_>>()?;
    Ok(Dataset { spec: spec.clone(), instances })
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: ToySpec,
    instances: Vec<InstanceEntry>,
}

#[derive(Serialize, Deserialize)]
struct InstanceEntry {
    shape: ShapeKind,
    gt: PathBuf,
    views: Vec<PathBuf>,
}

const MANIFEST: &str = "dataset.json";

/// Writes `dataset.json` plus one binary PLY per cloud under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, inst) in ds.instances.iter().enumerate() {
        let sub = PathBuf::from(format!("inst_{i:04}"));
        fs::create_dir_all(dir.join(&sub)).map_err(|e| Error::io(dir.join(&sub), e))?;
        let gt = sub.join("gt.ply");
        save_cloud(&inst.gt, &dir.join(&gt), CloudFormat::PlyBinary)?;
        let mut views = Vec::new();
        for (v, cloud) in inst.views.iter().enumerate() {
            let p = sub.join(format!("view_{v}.ply"));
            save_cloud(cloud, &dir.join(&p), CloudFormat::PlyBinary)?;
            views.push(p);
        }
        entries.push(InstanceEntry { shape: inst.shape, gt, views });
    }
    let manifest = DatasetManifest { spec: ds.spec.clone(), instances: entries };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
    let mut instances = Vec::new();
    for e in manifest.instances {
        if e.views.is_empty() {
            return Err(Error::malformed(&path, "instance without views"));
        }
        let gt = load_cloud(&dir.join(&e.gt), CloudFormat::PlyBinary)?;
        let views = e
            .views
            .iter()
            .map(|p| load_cloud(&dir.join(p), CloudFormat::PlyBinary))
            .collect::<Result<_>>()?;
        instances.push(Instance { shape: e.shape, gt, views });
    }
    if instances.is_empty() {
        return Err(Error::malformed(&path, "no instances"));
    }
    Ok(Dataset { spec: manifest.spec, instances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::eval_cd;

    fn small(seed: u64) -> ToySpec {
        ToySpec {
            n_instances: 4,
            views_per_instance: 4,
            points_per_view: 256,
            gt_points: 512,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(make_toy_dataset(&small(1)).unwrap(), make_toy_dataset(&small(1)).unwrap());
        assert_ne!(make_toy_dataset(&small(1)).unwrap(), make_toy_dataset(&small(2)).unwrap());
    }

    #[test]
    fn sizes_and_shapes_follow_spec() {
        let ds = make_toy_dataset(&small(3)).unwrap();
        assert_eq!(ds.instances.len(), 4);
        let kinds: Vec<ShapeKind> = ds.instances.iter().map(|i| i.shape).collect();
        assert_eq!(kinds, ShapeKind::ALL.to_vec());
        for inst in &ds.instances {
            assert_eq!(inst.gt.len(), 512);
            assert_eq!(inst.views.len(), 4);
            assert!(inst.views.iter().all(|v| v.len() == 256));
            // unit-ish diameter
            let ext = inst.gt.longest_extent();
            assert!(ext > 0.2 && ext < 1.01, "extent {ext}");
        }
    }

    #[test]
    fn box_view_sees_about_half_the_surface() {
        let mut rng = seeded(5);
        let solid = Solid::random(ShapeKind::Box, &mut rng);
        let dense = solid.sample_cloud(20_000, &mut rng);
        for _ in 0..10 {
            let frac = hemisphere_cull(&dense, &unit_vector(&mut rng)).len() as f64 / dense.len() as f64;
            assert!((frac - 0.5).abs() < 0.05, "visible fraction {frac}");
        }
    }

    #[test]
    fn union_of_views_covers_more_than_any_view() {
        let ds = make_toy_dataset(&small(7)).unwrap();
        for inst in &ds.instances {
            let union = inst.views.iter().skip(1).fold(inst.views[0].clone(), |a, v| a.concat(v));
            let union_cov = eval_cd(&union, &inst.gt).unwrap().coverage;
            for v in &inst.views {
                assert!(union_cov < eval_cd(v, &inst.gt).unwrap().coverage);
            }
        }
    }

    #[test]
    fn noise_moves_views_within_bounds() {
        let mut spec = small(9);
        let clean = make_toy_dataset(&spec).unwrap();
        spec.max_rotation_deg = 15.0;
        spec.max_translation = 0.1;
        let noisy = make_toy_dataset(&spec).unwrap();
        for (a, b) in clean.instances.iter().zip(&noisy.instances) {
            assert_eq!(a.gt, b.gt);
            for (va, vb) in a.views.iter().zip(&b.views) {
                // rotation of at most 15 deg about the origin plus 0.1 translation
                let bound = 2.0 * (7.5f64.to_radians()).sin() * 0.9 + 0.1 + 1e-9;
                for (p, q) in va.iter().zip(vb.iter()) {
                    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                    assert!(d <= bound);
                }
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut s = small(0);
        s.n_instances = 0;
        assert!(matches!(make_toy_dataset(&s), Err(Error::InvalidSpec(_))));
        let mut s = small(0);
        s.shapes.clear();
        assert!(matches!(make_toy_dataset(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_toy_dataset(&small(11)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
