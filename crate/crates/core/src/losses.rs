//! Asymmetric weighted Chamfer distance and the inpainting losses built on it.
//!
//! `L(X, Y) = (1 - beta) / |X| * sum_x min_y |x - y| + beta / |Y| * sum_y min_x |y - x|`
//!
//! Distances are plain (unsquared) Euclidean norms. `X` is supervision and
//! never receives a gradient; `Y` is the network output.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::partition::{region_points, RegionPartition, NUM_REGIONS};
use crate::spatial::{nearest_brute, KdTree, BRUTE_FORCE_BELOW};

/// A cloud paired with a nearest-neighbour index. Build once for clouds that
/// are queried repeatedly (training targets).
#[derive(Debug, Clone)]
pub struct IndexedCloud {
    cloud: PointCloud,
    tree: Option<KdTree>,
}

impl IndexedCloud {
    pub fn new(cloud: PointCloud) -> Self {
        let tree = (cloud.len() >= BRUTE_FORCE_BELOW).then(|| KdTree::build(cloud.points()));
        Self { cloud, tree }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// `(index, distance)`, lowest index on ties.
    #[inline]
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        let (i, d2) = match &self.tree {
            Some(t) => t.nearest(q),
            None => nearest_brute(self.cloud.points(), q),
        }
        .expect("nearest() on an empty cloud");
        (i, d2.sqrt())
    }
}

/// The two directed mean nearest-neighbour distances between `x` and `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectedMeans {
    /// Mean over `x` of the distance to the nearest `y`.
    pub x_to_y: f64,
    /// Mean over `y` of the distance to the nearest `x`.
    pub y_to_x: f64,
}

impl DirectedMeans {
    pub fn weighted(&self, beta: f64) -> f64 {
        (1.0 - beta) * self.x_to_y + beta * self.y_to_x
    }
}

pub fn directed_means(x: &IndexedCloud, y: &IndexedCloud) -> Result<DirectedMeans> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let x_to_y = x.cloud.iter().map(|p| y.nearest(p).1).sum::<f64>() / x.len() as f64;
    let y_to_x = y.cloud.iter().map(|p| x.nearest(p).1).sum::<f64>() / y.len() as f64;
    Ok(DirectedMeans { x_to_y, y_to_x })
}

/// Value-only weighted Chamfer distance.
pub fn weighted_chamfer_value(x: &PointCloud, y: &PointCloud, beta: f64) -> Result<f64> {
    let x = IndexedCloud::new(x.clone());
    let y = IndexedCloud::new(y.clone());
    Ok(directed_means(&x, &y)?.weighted(beta))
}

/// Value and gradient with respect to `y` (row-major `|y| x 3`).
///
/// Coincident nearest pairs contribute a zero subgradient.
pub fn weighted_chamfer_with_grad(x: &IndexedCloud, y: &IndexedCloud, beta: f64) -> Result<(f64, Vec<f64>)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut grad = vec![0.0; 3 * y.len()];
    let wx = (1.0 - beta) / x.len() as f64;
    let wy = beta / y.len() as f64;

    let mut sum_x = 0.0;
    for p in x.cloud.iter() {
        let (j, d) = y.nearest(p);
        sum_x += d;
        if d > 0.0 && wx != 0.0 {
            let q = &y.cloud.points()[j];
            for a in 0..3 {
                grad[3 * j + a] += wx * (q[a] - p[a]) / d;
            }
        }
    }
    let mut sum_y = 0.0;
    for (j, q) in y.cloud.iter().enumerate() {
        let (i, d) = x.nearest(q);
        sum_y += d;
        if d > 0.0 && wy != 0.0 {
            let p = &x.cloud.points()[i];
            for a in 0..3 {
                grad[3 * j + a] += wy * (q[a] - p[a]) / d;
            }
        }
    }
    let value = (1.0 - beta) * (sum_x / x.len() as f64) + beta * (sum_y / y.len() as f64);
    Ok((value, grad))
}

fn var_cloud(g: &Graph<'_>, y: Var) -> Result<IndexedCloud> {
    Ok(IndexedCloud::new(PointCloud::from_flat(g.value(y).data())?))
}

/// Differentiable weighted Chamfer distance; gradient flows into `y` only.
pub fn weighted_chamfer(g: &mut Graph<'_>, x: &IndexedCloud, y: Var, beta: f64) -> Result<Var> {
    let yc = var_cloud(g, y)?;
    chamfer_node(g, x, y, &yc, beta)
}

fn chamfer_node(g: &mut Graph<'_>, x: &IndexedCloud, y: Var, yc: &IndexedCloud, beta: f64) -> Result<Var> {
    let (value, grad) = weighted_chamfer_with_grad(x, yc, beta)?;
    Ok(g.linearized(y, value, grad))
}

/// Inpainting-global loss against the original (un-occluded) partial cloud.
pub fn inpainting_global_loss(g: &mut Graph<'_>, x: &IndexedCloud, y_global: Var, beta: f64) -> Result<Var> {
    weighted_chamfer(g, x, y_global, beta)
}

/// Inpainting-local loss: region `i` of the output is only compared with
/// region `i` of the target, and absent regions are skipped entirely.
/// Returns `None` when no region is present (the loss is identically zero).
pub fn inpainting_local_loss(
    g: &mut Graph<'_>,
    x_regions: &[IndexedCloud],
    present: &[bool],
    y_regions: &[Var],
    beta: f64,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for i in 0..x_regions.len() {
        if present[i] {
            terms.push(weighted_chamfer(g, &x_regions[i], y_regions[i], beta)?);
        }
    }
    Ok((!terms.is_empty()).then(|| g.add_scalars(&terms)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub views: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.25, views: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub global_term: f64,
    pub local_term: f64,
    pub total: f64,
    /// Local term split by region; zero where no view has the region.
    pub per_region: [f64; NUM_REGIONS],
}

/// One view of an instance prepared as a supervision target: the full
/// partial cloud and its regions, each with a search index.
#[derive(Debug, Clone)]
pub struct ViewTarget {
    pub full: IndexedCloud,
    pub regions: Vec<IndexedCloud>,
    pub present: [bool; NUM_REGIONS],
}

impl ViewTarget {
    /// Region indicators come from `part.present`; synthetic removal never
    /// affects supervision.
    pub fn new(cloud: &PointCloud, part: &RegionPartition) -> Self {
        let regions = (0..NUM_REGIONS)
            .map(|i| IndexedCloud::new(region_points(cloud, part, i)))
            .collect();
        Self {
            full: IndexedCloud::new(cloud.clone()),
            regions,
            present: part.present,
        }
    }
}

/// Multi-view consistency loss for one prediction.
///
/// `global = sum_j L(X^j, Y_g)` and `local = sum_i sum_j 1_i^j L(X^j_i, Y_l^i)`,
/// accumulated in view order then region order. Either output may be
/// absent (branch ablations); its term is then zero and not recorded.
pub fn multiview_loss(
    g: &mut Graph<'_>,
    views: &[ViewTarget],
    y_global: Option<Var>,
    y_regions: Option<&[Var]>,
    beta: f64,
) -> Result<(Option<Var>, LossReport)> {
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    if let Some(yg) = y_global {
        let yc = var_cloud(g, yg)?;
        for v in views {
            let t = chamfer_node(g, &v.full, yg, &yc, beta)?;
            report.global_term += g.value(t).item();
            terms.push(t);
        }
    }
    if let Some(yr) = y_regions {
        if yr.len() != NUM_REGIONS {
            return Err(Error::ShapeMismatch(format!("expected {NUM_REGIONS} region outputs, got {}", yr.len())));
        }
        let region_clouds: Vec<IndexedCloud> = yr.iter().map(|&y| var_cloud(g, y)).collect::<Result<_>>()?;
        for v in views {
            for i in 0..NUM_REGIONS {
                if !v.present[i] {
                    continue;
                }
                let t = chamfer_node(g, &v.regions[i], yr[i], &region_clouds[i], beta)?;
                let val = g.value(t).item();
                report.local_term += val;
                report.per_region[i] += val;
                terms.push(t);
            }
        }
    }
    report.total = report.global_term + report.local_term;
    let loss = (!terms.is_empty()).then(|| g.add_scalars(&terms));
    Ok((loss, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::partition::{partition, PartitionConfig};
    use crate::rng::seeded;
    use rand::Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seeded(seed);
        cloud(&(0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect::<Vec<_>>())
    }

    /// O(n m) reference written independently of the indexed path.
    fn oracle(x: &PointCloud, y: &PointCloud, beta: f64) -> f64 {
        let d = |a: &[f64; 3], b: &[f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        let a: f64 = x.iter().map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64;
        let b: f64 = y.iter().map(|q| x.iter().map(|p| d(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / y.len() as f64;
        (1.0 - beta) * a + beta * b
    }

    #[test]
    fn analytic_values() {
        let o = cloud(&[[0.0, 0.0, 0.0]]);
        let e = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(weighted_chamfer_value(&o, &e, 0.25).unwrap(), 1.0);
        let two = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(weighted_chamfer_value(&two, &e, 0.25).unwrap(), 1.0);
        let r = random_cloud(50, 1);
        for beta in [0.0, 0.3, 1.0] {
            assert_eq!(weighted_chamfer_value(&r, &r, beta).unwrap(), 0.0);
        }
        assert!(matches!(weighted_chamfer_value(&PointCloud::empty(), &r, 0.5), Err(Error::EmptyCloud)));
    }

    #[test]
    fn indexed_path_matches_oracle() {
        for seed in 0..10 {
            let x = random_cloud(70 + 20 * seed as usize, seed);
            let y = random_cloud(250 - 10 * seed as usize, seed + 100);
            let v = weighted_chamfer_value(&x, &y, 0.25).unwrap();
            assert!((v - oracle(&x, &y, 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_at_half_and_scale_equivariant() {
        let x = random_cloud(80, 2);
        let y = random_cloud(60, 3);
        let a = weighted_chamfer_value(&x, &y, 0.5).unwrap();
        let b = weighted_chamfer_value(&y, &x, 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
        let s = 3.5;
        let scale = |c: &PointCloud| cloud(&c.iter().map(|p| p.map(|v| v * s)).collect::<Vec<_>>());
        let scaled = weighted_chamfer_value(&scale(&x), &scale(&y), 0.25).unwrap();
        assert!((scaled - s * weighted_chamfer_value(&x, &y, 0.25).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = IndexedCloud::new(random_cloud(40, 4));
        let y = random_cloud(30, 5);
        let (_, grad) = weighted_chamfer_with_grad(&x, &IndexedCloud::new(y.clone()), 0.25).unwrap();
        let h = 1e-5;
        let f = |c: &PointCloud| directed_means(&x, &IndexedCloud::new(c.clone())).unwrap().weighted(0.25);
        for k in 0..y.len() * 3 {
            let mut plus = y.to_flat();
            plus[k] += h;
            let mut minus = y.to_flat();
            minus[k] -= h;
            let fd = (f(&PointCloud::from_flat(&plus).unwrap()) - f(&PointCloud::from_flat(&minus).unwrap())) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - grad[k]).abs() < 1e-10, "coord {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn global_probe_moves_by_beta_over_y() {
        // one isolated Y point far from the rest: only the second term sees it
        let x = IndexedCloud::new(cloud(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]));
        let base = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let delta = 1e-4;
        let mut moved = base;
        moved[2][0] += delta;
        let mut g = Graph::new();
        let y0 = g.constant(Tensor::matrix(3, 3, base.concat()).unwrap());
        let y1 = g.constant(Tensor::matrix(3, 3, moved.concat()).unwrap());
        let l0 = inpainting_global_loss(&mut g, &x, y0, 0.25).unwrap();
        let l1 = inpainting_global_loss(&mut g, &x, y1, 0.25).unwrap();
        let change = g.value(l1).item() - g.value(l0).item();
        assert!((change - 0.25 * delta / 3.0).abs() < 1e-12);
    }

    #[test]
    fn local_loss_masks_absent_regions() {
        let mut pts = vec![[0.5, 0.5, 0.5]; 4];
        pts.extend(vec![[-0.5, -0.5, -0.5]; 4]);
        let xc = cloud(&pts);
        let part = partition(&xc, &PartitionConfig { overlap: 0.0, removal_prob: 0.0, ..Default::default() });
        let view = ViewTarget::new(&xc, &part);
        let mut g = Graph::new();
        let ys: Vec<Var> = (0..NUM_REGIONS)
            .map(|i| g.variable(Tensor::matrix(2, 3, vec![i as f64 * 0.1, 0.2, 0.3, 0.0, -0.1, 0.4]).unwrap()))
            .collect();
        let loss = inpainting_local_loss(&mut g, &view.regions, &view.present, &ys, 0.25).unwrap().unwrap();
        let grads = g.backward(loss).unwrap();
        for i in 0..NUM_REGIONS {
            let gi = grads.get(ys[i]);
            if view.present[i] {
                assert!(gi.unwrap().data().iter().any(|&v| v != 0.0));
            } else {
                assert!(gi.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
            }
        }
        let none = inpainting_local_loss(&mut g, &view.regions, &[false; NUM_REGIONS], &ys, 0.25).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn report_total_is_sum_and_views_add() {
        let xc = random_cloud(200, 8);
        let part = partition(&xc, &PartitionConfig::default());
        let view = ViewTarget::new(&xc, &part);
        let mut g = Graph::new();
        let yg = g.variable(Tensor::matrix(64, 3, random_cloud(64, 9).to_flat()).unwrap());
        let yr: Vec<Var> = (0..NUM_REGIONS)
            .map(|i| g.variable(Tensor::matrix(16, 3, random_cloud(16, 10 + i as u64).to_flat()).unwrap()))
            .collect();
        let (_, one) = multiview_loss(&mut g, std::slice::from_ref(&view), Some(yg), Some(&yr), 0.25).unwrap();
        let (_, two) = multiview_loss(&mut g, &[view.clone(), view.clone()], Some(yg), Some(&yr), 0.25).unwrap();
        assert!((one.total - one.global_term - one.local_term).abs() < 1e-12);
        assert!((two.total - 2.0 * one.total).abs() < 1e-12);
        let sum: f64 = one.per_region.iter().sum();
        assert!((sum - one.local_term).abs() < 1e-12);
    }
}
