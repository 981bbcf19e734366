//! Evaluation metrics: Chamfer components, exact EMD, F-score, a uniformity
//! score, and precision/coverage split into observed and unobserved parts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::cloud::{dist, dist2, resample, PointCloud};
use crate::error::{Error, Result};
use crate::losses::{directed_means, IndexedCloud};
use crate::spatial::KdTree;

pub const DEFAULT_EMD_CAP: usize = 1024;
pub const DEFAULT_UNIFORMITY_P: [f64; 5] = [0.4, 0.6, 0.8, 1.0, 1.2];
pub const UNIFORMITY_SEEDS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdReport {
    pub cd: f64,
    /// Mean distance from predicted points to the ground truth.
    pub precision: f64,
    /// Mean distance from ground-truth points to the prediction.
    pub coverage: f64,
}

pub fn eval_cd(pred: &PointCloud, gt: &PointCloud) -> Result<CdReport> {
    let p = IndexedCloud::new(pred.clone());
    let g = IndexedCloud::new(gt.clone());
    eval_cd_indexed(&p, &g)
}

pub fn eval_cd_indexed(pred: &IndexedCloud, gt: &IndexedCloud) -> Result<CdReport> {
    let m = directed_means(pred, gt)?;
    Ok(CdReport {
        cd: 0.5 * m.x_to_y + 0.5 * m.y_to_x,
        precision: m.x_to_y,
        coverage: m.y_to_x,
    })
}

/// Minimum mean point distance over all bijections between equal-size clouds.
pub fn eval_emd(pred: &PointCloud, gt: &PointCloud, cap: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::SizeMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = pred.len();
    if n > cap {
        return Err(Error::CapExceeded { n, cap });
    }
    let mut cost = Vec::with_capacity(n * n);
    for p in pred {
        cost.extend(gt.iter().map(|q| dist(p, q)));
    }
    let (_, total) = assignment::solve(&cost, n);
    Ok(total / n as f64)
}

/// Default F-score threshold: 1% of the prediction's longest bounding-box edge.
pub fn default_fscore_threshold(pred: &PointCloud) -> f64 {
    0.01 * pred.longest_extent()
}

pub fn eval_fscore(pred: &PointCloud, gt: &PointCloud, d: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(d > 0.0) {
        return Err(Error::InvalidSpec(format!("F-score threshold must be positive, got {d}")));
    }
    let p = IndexedCloud::new(pred.clone());
    let g = IndexedCloud::new(gt.clone());
    let prec = pred.iter().filter(|x| g.nearest(x).1 <= d).count() as f64 / pred.len() as f64;
    let rec = gt.iter().filter(|x| p.nearest(x).1 <= d).count() as f64 / gt.len() as f64;
    Ok(if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) })
}

/// Farthest-point sampling from index 0; ties pick the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize) -> Vec<usize> {
    let n = cloud.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let pts = cloud.points();
    let mut chosen = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = 0;
    for _ in 0..m {
        chosen.push(cur);
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(&pts[i], &pts[cur]);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                next = i;
            }
        }
        cur = next;
    }
    chosen
}

/// Local-density uniformity score, lower is more uniform.
///
/// With `N` points and bounding-box surface area `A`, for each percentage
/// `p` the radius is `r = sqrt(p/100 * A / pi)` and the uniform expectation
/// is `E = N * p/100` points per ball. Up to 1000 farthest-point seeds each
/// count their neighbours `n_k` within `r` (self included) and the score is
/// `mean_k (n_k - E)^2 / E`. A single-point cloud scores 0.
pub fn eval_uniformity(pred: &PointCloud, p_values: &[f64]) -> Result<BTreeMap<String, f64>> {
    pred.non_empty()?;
    let mut out = BTreeMap::new();
    let n = pred.len();
    if n == 1 {
        for &p in p_values {
            out.insert(uniformity_key(p), 0.0);
        }
        return Ok(out);
    }
    let (lo, hi) = pred.bounds().expect("non-empty");
    let e = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let area = 2.0 * (e[0] * e[1] + e[1] * e[2] + e[2] * e[0]);
    let seeds = farthest_point_sample(pred, UNIFORMITY_SEEDS);
    let tree = KdTree::build(pred.points());
    for &p in p_values {
        let frac = p / 100.0;
        let r = (frac * area / std::f64::consts::PI).sqrt();
        let expected = n as f64 * frac;
        let score = seeds
            .iter()
            .map(|&s| {
                let c = tree.count_within(&pred.points()[s], r) as f64;
                (c - expected).powi(2) / expected
            })
            .sum::<f64>()
            / seeds.len() as f64;
        out.insert(uniformity_key(p), score);
    }
    Ok(out)
}

pub fn uniformity_key(p: f64) -> String {
    format!("{p:.1}")
}

/// Splits predicted points by their distance to the input partial cloud:
/// distances above `mean + 1 std` are unobserved, the rest observed.
pub fn split_observed(pred: &PointCloud, input_partial: &PointCloud) -> Result<(Vec<usize>, Vec<usize>)> {
    pred.non_empty()?;
    let input = IndexedCloud::new(input_partial.non_empty()?.clone());
    Ok(split_by_distance(pred, &input))
}

fn split_by_distance(cloud: &PointCloud, input: &IndexedCloud) -> (Vec<usize>, Vec<usize>) {
    let d: Vec<f64> = cloud.iter().map(|p| input.nearest(p).1).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + var.sqrt();
    let (mut obs, mut unobs) = (Vec::new(), Vec::new());
    for (i, &v) in d.iter().enumerate() {
        if v > threshold {
            unobs.push(i);
        } else {
            obs.push(i);
        }
    }
    (obs, unobs)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservedSplit {
    pub obs_precision: Option<f64>,
    pub unobs_precision: Option<f64>,
    pub obs_coverage: Option<f64>,
    pub unobs_coverage: Option<f64>,
}

/// Precision over observed/unobserved predicted points and coverage over
/// observed/unobserved ground-truth points, both split against the input.
/// A side with no points reports `None`.
pub fn observed_split_metrics(pred: &PointCloud, gt: &PointCloud, input_partial: &PointCloud) -> Result<ObservedSplit> {
    pred.non_empty()?;
    gt.non_empty()?;
    let input = IndexedCloud::new(input_partial.non_empty()?.clone());
    let p = IndexedCloud::new(pred.clone());
    let g = IndexedCloud::new(gt.clone());
    let mean_to = |src: &PointCloud, idx: &[usize], dst: &IndexedCloud| {
        (!idx.is_empty()).then(|| idx.iter().map(|&i| dst.nearest(&src.points()[i]).1).sum::<f64>() / idx.len() as f64)
    };
    let (po, pu) = split_by_distance(pred, &input);
    let (go, gu) = split_by_distance(gt, &input);
    Ok(ObservedSplit {
        obs_precision: mean_to(pred, &po, &g),
        unobs_precision: mean_to(pred, &pu, &g),
        obs_coverage: mean_to(gt, &go, &p),
        unobs_coverage: mean_to(gt, &gu, &p),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Common size both clouds are resampled to for EMD; `None` skips EMD.
    pub emd_points: Option<usize>,
    pub emd_cap: usize,
    /// F-score threshold; `None` uses 1% of the prediction's longest extent.
    pub fscore_d: Option<f64>,
    pub uniformity_p: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            emd_points: Some(512),
            emd_cap: DEFAULT_EMD_CAP,
            fscore_d: None,
            uniformity_p: DEFAULT_UNIFORMITY_P.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cd: f64,
    pub precision: f64,
    pub coverage: f64,
    pub emd: Option<f64>,
    pub fscore_1pct: f64,
    #[serde(flatten)]
    pub split: ObservedSplit,
    pub uniformity: BTreeMap<String, f64>,
}

pub fn evaluate(pred: &PointCloud, gt: &PointCloud, input_partial: &PointCloud, opts: &EvalOptions) -> Result<EvalReport> {
    let cd = eval_cd(pred, gt)?;
    let emd = match opts.emd_points {
        Some(n) => {
            let a = resample(pred, n, opts.seed)?;
            let b = resample(gt, n, opts.seed)?;
            Some(eval_emd(&a, &b, opts.emd_cap)?)
        }
        None => None,
    };
    let d = opts.fscore_d.unwrap_or_else(|| default_fscore_threshold(pred));
    let fscore_1pct = if d > 0.0 {
        eval_fscore(pred, gt, d)?
    } else {
        // zero-extent prediction: only exact hits count
        eval_fscore(pred, gt, f64::MIN_POSITIVE)?
    };
    Ok(EvalReport {
        cd: cd.cd,
        precision: cd.precision,
        coverage: cd.coverage,
        emd,
        fscore_1pct,
        split: observed_split_metrics(pred, gt, input_partial)?,
        uniformity: eval_uniformity(pred, &opts.uniformity_p)?,
    })
}

impl EvalReport {
    pub const FIXED_COLUMNS: [&'static str; 9] = [
        "cd",
        "precision",
        "coverage",
        "emd",
        "fscore_1pct",
        "obs_precision",
        "unobs_precision",
        "obs_coverage",
        "unobs_coverage",
    ];

    pub fn csv_header(uniformity_keys: &[String]) -> Vec<String> {
        Self::FIXED_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(uniformity_keys.iter().map(|k| format!("uniformity@{k}")))
            .collect()
    }

    /// Values in [`EvalReport::csv_header`] order; `None` for missing entries.
    pub fn csv_values(&self, uniformity_keys: &[String]) -> Vec<Option<f64>> {
        let mut v = vec![
            Some(self.cd),
            Some(self.precision),
            Some(self.coverage),
            self.emd,
            Some(self.fscore_1pct),
            self.split.obs_precision,
            self.split.unobs_precision,
            self.split.obs_coverage,
            self.split.unobs_coverage,
        ];
        v.extend(uniformity_keys.iter().map(|k| self.uniformity.get(k).copied()));
        v
    }
}
