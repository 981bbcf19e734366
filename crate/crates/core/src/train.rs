//! Training loop: sample an instance and a view, occlude it, complete it,
//! and supervise the completion with every view of the same instance.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::cloud::PointCloud;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{multiview_loss, LossReport, ViewTarget};
use crate::metrics::{eval_cd, evaluate, EvalOptions, EvalReport};
use crate::model::{ModelConfig, ModelInput, ModelParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::partition::{partition, PartitionConfig};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Random region removal on the input.
    pub inpainting: bool,
    /// Supervise with all views instead of only the input view.
    pub multiview: bool,
    pub global_branch: bool,
    pub local_branch: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self { inpainting: true, multiview: true, global_branch: true, local_branch: true }
    }
}

impl Ablations {
    /// Switches off one component by its command-line name.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name {
            "inpainting" => self.inpainting = false,
            "multiview" => self.multiview = false,
            "global" => self.global_branch = false,
            "local" => self.local_branch = false,
            _ => return Err(Error::InvalidSpec(format!("unknown ablation {name:?} (inpainting, multiview, global, local)"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    /// Iterations between decays; `None` means a quarter of `iters`.
    pub decay_steps: Option<usize>,
    pub batch_size: usize,
    pub iters: usize,
    pub beta: f64,
    pub removal_prob: f64,
    pub overlap: f64,
    pub presence_threshold: usize,
    pub views: usize,
    pub ablations: Ablations,
    pub seed: u64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            decay: 0.5,
            decay_steps: None,
            batch_size: 32,
            iters: 2000,
            beta: 0.25,
            removal_prob: 0.20,
            overlap: 0.02,
            presence_threshold: 4,
            views: 4,
            ablations: Ablations::default(),
            seed: 0,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Alternative learning rate preset.
    pub const LOW_LR: f64 = 1e-4;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.batch_size == 0 || self.views == 0 || self.decay_steps == Some(0) {
            return bad("batch_size, views and decay_steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !self.ablations.global_branch && !self.ablations.local_branch {
            return bad("at least one of the global and local branches must stay enabled".into());
        }
        self.partition_config(0).validate()?;
        self.model_config()?.validate()
    }

    /// Model architecture with the branch ablations applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.clone().with_branches(self.ablations.global_branch, self.ablations.local_branch)
    }

    /// Partition settings; removal is switched off without inpainting.
    pub fn partition_config(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            overlap: self.overlap,
            presence_threshold: self.presence_threshold,
            removal_prob: if self.ablations.inpainting { self.removal_prob } else { 0.0 },
            seed,
        }
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        let every = self.decay_steps.unwrap_or((self.iters / 4).max(1));
        self.lr * self.decay.powi((iter / every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub lr: f64,
    /// Batch mean of the per-sample loss reports.
    pub loss: LossReport,
    /// Seconds since training started; absent in timing-free logs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// Copy with wall-clock times dropped, so reruns compare byte for byte.
    pub fn without_timing(&self) -> Self {
        Self { records: self.records.iter().map(|r| TrainRecord { wall_s: None, ..r.clone() }).collect() }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::malformed(path, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Supervision targets of one instance, built once.
struct InstanceTargets {
    views: Vec<ViewTarget>,
}

fn build_targets(ds: &Dataset, cfg: &TrainConfig) -> Vec<InstanceTargets> {
    let pcfg = cfg.partition_config(0);
    ds.instances
        .iter()
        .map(|inst| InstanceTargets {
            views: inst
                .views
                .iter()
                .take(cfg.views)
                .map(|v| ViewTarget::new(v, &partition(v, &pcfg)))
                .collect(),
        })
        .collect()
}

/// Network input for view `x` with random removal drawn from `seed`;
/// a draw that removes every present region is redrawn with the next seed.
pub fn training_input(x: &PointCloud, cfg: &TrainConfig, model: &ModelConfig, seed: u64) -> Result<ModelInput> {
    for attempt in 0..1000u64 {
        let s = derive_seed(seed, attempt);
        let part = partition(x, &cfg.partition_config(s));
        match ModelInput::prepare(x, &part, model, cfg.presence_threshold, s) {
            Err(Error::AllRemoved) => continue,
            other => return other,
        }
    }
    Err(Error::AllRemoved)
}

/// Loss and parameter gradients for completing view `k` of `inst`.
fn sample_step(
    params: &ModelParams,
    cfg: &TrainConfig,
    view: &PointCloud,
    targets: &InstanceTargets,
    k: usize,
    seed: u64,
) -> Result<(LossReport, Vec<Tensor>)> {
    let input = training_input(view, cfg, params.config(), seed)?;
    let mut g = Graph::new();
    let fwd = params.forward(&mut g, &input)?;
    let views = if cfg.ablations.multiview { &targets.views[..] } else { &targets.views[k..=k] };
    let (loss, report) = multiview_loss(&mut g, views, fwd.decoded.y_g, fwd.decoded.y_regions.as_deref(), cfg.beta)?;
    let grads = match loss {
        Some(l) => {
            let mut gr = g.backward(l)?;
            params.collect_grads(&mut gr, &fwd.params)
        }
        None => params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
    };
    Ok((report, grads))
}

/// Trains from a fresh initialization. `on_step` sees every logged record
/// together with the parameters after that step.
pub fn train_with<F>(ds: &Dataset, cfg: &TrainConfig, mut on_step: F) -> Result<(ModelParams, TrainLog)>
where
    F: FnMut(&TrainRecord, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    if ds.instances.iter().any(|i| i.views.is_empty()) {
        return Err(Error::InvalidSpec("every instance needs at least one view".into()));
    }
    let mut model_cfg = cfg.model_config()?;
    model_cfg.init_seed = derive_seed(cfg.seed, 0);
    let mut params = ModelParams::init(model_cfg)?;
    let mut adam = AdamState::new(params.tensors(), cfg.adam);
    let targets = build_targets(ds, cfg);
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let start = Instant::now();
    let mut log = TrainLog::default();

    for iter in 0..cfg.iters {
        let mut sum: Option<Vec<Tensor>> = None;
        let mut report = LossReport::default();
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..ds.instances.len());
            let k = rng.gen_range(0..targets[i].views.len());
            let seed: u64 = rng.gen();
            let (r, grads) = sample_step(&params, cfg, &ds.instances[i].views[k], &targets[i], k, seed)?;
            report.global_term += r.global_term;
            report.local_term += r.local_term;
            report.total += r.total;
            for (acc, v) in report.per_region.iter_mut().zip(r.per_region) {
                *acc += v;
            }
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut grads = sum.expect("batch_size > 0");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        report.global_term *= inv;
        report.local_term *= inv;
        report.total *= inv;
        report.per_region.iter_mut().for_each(|v| *v *= inv);
        if !report.total.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { iter, loss: report.total });
        }
        let lr = cfg.lr_at(iter);
        adam_step(params.tensors_mut(), &grads, &mut adam, lr)?;
        let record = TrainRecord { iter, lr, loss: report, wall_s: Some(start.elapsed().as_secs_f64()) };
        on_step(&record, &params)?;
        log.records.push(record);
    }
    Ok((params, log))
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    train_with(ds, cfg, |_, _| Ok(()))
}

/// Settings for completing held-out views.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionSettings {
    pub partition: PartitionConfig,
    /// Which view of each instance is the network input.
    pub view: usize,
    /// Regions to remove from the input on purpose (robustness probe).
    pub remove_count: usize,
    pub seed: u64,
}

impl CompletionSettings {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            partition: PartitionConfig { removal_prob: 0.0, ..cfg.partition_config(0) },
            view: 0,
            remove_count: 0,
            seed: cfg.seed,
        }
    }
}

/// Single-view completion of every instance.
pub fn complete_instances(params: &ModelParams, ds: &Dataset, s: &CompletionSettings) -> Result<Vec<PointCloud>> {
    ds.instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let x = &inst.views[s.view.min(inst.views.len() - 1)];
            let seed = derive_seed(s.seed, i as u64);
            if s.remove_count == 0 {
                return params.complete(x, &s.partition, seed);
            }
            let mut part = partition(x, &s.partition);
            part.remove_exactly(s.remove_count.min(part.num_present().saturating_sub(1)), seed);
            let input = ModelInput::prepare(x, &part, params.config(), s.partition.presence_threshold, seed)?;
            let mut g = Graph::new();
            let fwd = params.forward(&mut g, &input)?;
            PointCloud::from_flat(g.value(fwd.decoded.y).data())
        })
        .collect()
}

/// Mean held-out Chamfer distance (equal weights) against the dense ground truth.
pub fn mean_eval_cd(params: &ModelParams, ds: &Dataset, s: &CompletionSettings) -> Result<f64> {
    let preds = complete_instances(params, ds, s)?;
    let mut total = 0.0;
    for (p, inst) in preds.iter().zip(&ds.instances) {
        total += eval_cd(p, &inst.gt)?.cd;
    }
    Ok(total / preds.len() as f64)
}

/// Full metric report per instance.
pub fn evaluate_instances(params: &ModelParams, ds: &Dataset, s: &CompletionSettings, opts: &EvalOptions) -> Result<Vec<EvalReport>> {
    let preds = complete_instances(params, ds, s)?;
    preds
        .iter()
        .zip(&ds.instances)
        .map(|(p, inst)| evaluate(p, &inst.gt, &inst.views[s.view.min(inst.views.len() - 1)], opts))
        .collect()
}
