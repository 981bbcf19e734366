use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use inpaint3d::baseline::densify as densify_cloud;
use inpaint3d::cloud::{apply_pose, load_cloud, sample_pose_noise, save_cloud, CloudFormat, NoiseSpec};
use inpaint3d::data::{load_dataset, make_toy_dataset, save_dataset, Dataset, ShapeKind, ToySpec};
use inpaint3d::metrics::{evaluate, uniformity_key, EvalOptions, EvalReport};
use inpaint3d::model::{load_checkpoint, save_checkpoint, ModelParams};
use inpaint3d::partition::{partition as split_regions, region_points, PartitionConfig, NUM_REGIONS};
use inpaint3d::rng::derive_seed;
use inpaint3d::train::{complete_instances, train_with, CompletionSettings, TrainConfig, TrainLog};

use crate::{CompleteArgs, DensifyArgs, EvalArgs, GenDataArgs, NoiseArgs, PartitionArgs, ReportArgs, TrainArgs};

/// A bad flag value; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Lifts a flag-validation failure from the library into a usage error.
fn flag<T>(r: inpaint3d::Result<T>) -> Result<T> {
    r.map_err(|e| UsageError(e.to_string()).into())
}

fn cloud_format(path: &Path) -> Result<CloudFormat> {
    match CloudFormat::from_path(path) {
        Some(f) => Ok(f),
        None => usage(format!("{}: unknown extension (use .ply, .xyz or .txt)", path.display())),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let shapes = a
        .shapes
        .split(',')
        .map(|s| s.trim().parse::<ShapeKind>())
        .collect::<inpaint3d::Result<Vec<_>>>();
    let spec = ToySpec {
        n_instances: a.instances,
        shapes: flag(shapes)?,
        views_per_instance: a.views,
        points_per_view: a.points,
        gt_points: a.gt_points,
        max_rotation_deg: a.max_rotation_deg,
        max_translation: a.max_translation,
        seed: a.seed,
    };
    flag(spec.validate())?;
    let ds = make_toy_dataset(&spec)?;
    create_dir(&a.out)?;
    save_dataset(&ds, &a.out)?;
    eprintln!("wrote {} instances to {}", ds.instances.len(), a.out.display());
    Ok(())
}

/// Training run description read from TOML. Relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    /// Separate evaluation dataset; without it the tail of `data` is held out.
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
    /// Save an intermediate checkpoint every this many iterations.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_emd_points")]
    pub eval_emd_points: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_holdout_fraction() -> f64 {
    0.2
}

fn default_emd_points() -> usize {
    512
}

/// What `train` records next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    data: PathBuf,
    heldout: Option<PathBuf>,
    train_instances: usize,
    heldout_instances: usize,
    disabled: Vec<String>,
    train: TrainConfig,
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    cfg.data = base.join(&cfg.data);
    cfg.heldout = cfg.heldout.map(|h| base.join(h));
    Ok(cfg)
}

fn load_existing_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("dataset.json").is_file() {
        bail!("dataset not found: {}", dir.display());
    }
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn disabled_names(cfg: &TrainConfig) -> Vec<String> {
    let a = &cfg.ablations;
    [("inpainting", a.inpainting), ("multiview", a.multiview), ("global", a.global_branch), ("local", a.local_branch)]
        .iter()
        .filter(|(_, on)| !on)
        .map(|(n, _)| n.to_string())
        .collect()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut rc = load_run_config(&a.config)?;
    for name in &a.ablate {
        flag(rc.train.ablations.disable(name))?;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(n) = a.iters {
        rc.train.iters = n;
    }
    rc.train.validate().with_context(|| format!("invalid [train] section in {}", a.config.display()))?;
    if !(rc.holdout_fraction > 0.0 && rc.holdout_fraction < 1.0) {
        bail!("holdout_fraction must lie in (0, 1), got {}", rc.holdout_fraction);
    }
    if rc.checkpoint_every == Some(0) {
        bail!("checkpoint_every must be positive");
    }

    let full = load_existing_dataset(&rc.data)?;
    let (train_ds, heldout_ds) = match &rc.heldout {
        Some(h) => (full, load_existing_dataset(h)?),
        None => {
            let n = full.instances.len();
            if n < 2 {
                bail!("dataset {} has {n} instance(s); a held-out split needs at least 2", rc.data.display());
            }
            let held = ((n as f64 * rc.holdout_fraction).ceil() as usize).clamp(1, n - 1);
            let mut instances = full.instances;
            let tail = instances.split_off(n - held);
            (
                Dataset { spec: full.spec.clone(), instances },
                Dataset { spec: full.spec, instances: tail },
            )
        }
    };

    create_dir(&a.out)?;
    let cfg = rc.train.clone();
    let progress_every = (cfg.iters / 20).max(1);
    let out = a.out.clone();
    let mut timing = String::from("iter,wall_s\n");
    let (params, log) = train_with(&train_ds, &cfg, |r, p| {
        timing.push_str(&format!("{},{}\n", r.iter, r.wall_s.unwrap_or(f64::NAN)));
        let done = r.iter + 1;
        if !a.quiet && (done % progress_every == 0 || done == cfg.iters) {
            eprintln!("iter {done}/{}  loss {:.6}  lr {:.3e}", cfg.iters, r.loss.total, r.lr);
        }
        if let Some(k) = rc.checkpoint_every {
            if done % k == 0 && done != cfg.iters {
                save_checkpoint(p, &out.join(format!("ckpt_{done:06}.ckpt")))?;
            }
        }
        Ok(())
    })?;
    save_checkpoint(&params, &a.out.join("model.ckpt"))?;
    log.without_timing().write_jsonl(&a.out.join("train_log.jsonl"))?;
    fs::write(a.out.join("timing.csv"), timing)?;
    write_json(
        &a.out.join("run.json"),
        &RunManifest {
            data: rc.data.clone(),
            heldout: rc.heldout.clone(),
            train_instances: train_ds.instances.len(),
            heldout_instances: heldout_ds.instances.len(),
            disabled: disabled_names(&cfg),
            train: cfg.clone(),
        },
    )?;

    let settings = CompletionSettings::from_train(&cfg);
    let opts = eval_options(rc.eval_emd_points, cfg.seed);
    let table = eval_table(Some(&params), &heldout_ds, &settings, &opts)?;
    table.write_csv(&a.out.join("eval.csv"))?;
    eprintln!("held-out mean cd {}", table.means()[0].map_or("-".into(), |v| v.to_string()));
    Ok(())
}

fn eval_options(emd_points: usize, seed: u64) -> EvalOptions {
    EvalOptions { emd_points: (emd_points > 0).then_some(emd_points), seed, ..EvalOptions::default() }
}

/// Per-instance metric rows plus the column layout.
struct EvalTable {
    header: Vec<String>,
    rows: Vec<(String, String, Vec<Option<f64>>)>,
}

impl EvalTable {
    /// Column means over the rows that have a value; `None` when none do.
    fn means(&self) -> Vec<Option<f64>> {
        column_means(self.header.len() - 2, self.rows.iter().map(|r| r.2.as_slice()))
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(&self.header)?;
        let cell = |v: &Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for (name, shape, vals) in &self.rows {
            let mut rec = vec![name.clone(), shape.clone()];
            rec.extend(vals.iter().map(cell));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["mean".to_string(), String::new()];
        rec.extend(self.means().iter().map(cell));
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}

fn column_means<'a>(width: usize, rows: impl Iterator<Item = &'a [Option<f64>]>) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; width];
    let mut count = vec![0usize; width];
    for row in rows {
        for (c, v) in row.iter().enumerate() {
            if let Some(x) = v {
                sum[c] += x;
                count[c] += 1;
            }
        }
    }
    sum.iter().zip(&count).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect()
}

/// Scores every instance; without a model the ground truth stands in for the prediction.
fn eval_table(params: Option<&ModelParams>, ds: &Dataset, s: &CompletionSettings, opts: &EvalOptions) -> Result<EvalTable> {
    let keys: Vec<String> = opts.uniformity_p.iter().map(|&p| uniformity_key(p)).collect();
    let mut header = vec!["instance".to_string(), "shape".to_string()];
    header.extend(EvalReport::csv_header(&keys));
    let preds = match params {
        Some(p) => complete_instances(p, ds, s)?,
        None => ds.instances.iter().map(|i| i.gt.clone()).collect(),
    };
    let mut rows = Vec::with_capacity(preds.len());
    for (i, (pred, inst)) in preds.iter().zip(&ds.instances).enumerate() {
        let input = &inst.views[s.view.min(inst.views.len() - 1)];
        let report = evaluate(pred, &inst.gt, input, opts).with_context(|| format!("evaluating instance {i}"))?;
        let shape = serde_json::to_value(inst.shape)?.as_str().unwrap_or_default().to_string();
        rows.push((format!("{i:04}"), shape, report.csv_values(&keys)));
    }
    Ok(EvalTable { header, rows })
}

/// Parses `deg:translation[,deg:translation...]`.
fn parse_noise_levels(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|item| {
            let (d, t) = match item.trim().split_once(':') {
                Some(pair) => pair,
                None => return usage(format!("noise level {item:?} is not deg:translation")),
            };
            let (Ok(d), Ok(t)) = (d.trim().parse::<f64>(), t.trim().parse::<f64>()) else {
                return usage(format!("noise level {item:?} is not numeric"));
            };
            flag(NoiseSpec::new(d, t, 0))?;
            Ok((d, t))
        })
        .collect()
}

/// `eval.csv` with level `(5, 0.01)` becomes `eval_rot5_trans0.01.csv`.
fn noise_report_path(out: &Path, deg: f64, trans: f64) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    out.with_file_name(format!("{stem}_rot{deg}_trans{trans}.{ext}"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let levels = a.noise.as_deref().map(parse_noise_levels).transpose()?;
    let ds = load_existing_dataset(&a.data)?;
    let params = match (&a.checkpoint, a.identity) {
        (_, true) => None,
        (Some(path), false) => Some(load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?),
        (None, false) => return usage("--checkpoint is required unless --identity is given"),
    };
    let settings = CompletionSettings {
        partition: PartitionConfig { removal_prob: 0.0, ..PartitionConfig::default() },
        view: a.view,
        remove_count: a.remove_count,
        seed: a.seed,
    };
    let opts = eval_options(a.emd_points, a.seed);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    match levels {
        None => {
            eval_table(params.as_ref(), &ds, &settings, &opts)?.write_csv(&a.out)?;
            eprintln!("wrote {}", a.out.display());
        }
        Some(levels) => {
            for (deg, trans) in levels {
                let mut noisy = ds.clone();
                for (i, inst) in noisy.instances.iter_mut().enumerate() {
                    let v = settings.view.min(inst.views.len() - 1);
                    let pose = sample_pose_noise(&NoiseSpec::new(deg, trans, derive_seed(a.seed, 1 + i as u64))?);
                    inst.views[v] = apply_pose(&inst.views[v], &pose);
                }
                let path = noise_report_path(&a.out, deg, trans);
                eval_table(params.as_ref(), &noisy, &settings, &opts)?.write_csv(&path)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

pub fn complete(a: CompleteArgs) -> Result<()> {
    let in_fmt = cloud_format(&a.input)?;
    let out_fmt = cloud_format(&a.output)?;
    let params = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let x = load_cloud(&a.input, in_fmt)?;
    let part = PartitionConfig { removal_prob: 0.0, ..PartitionConfig::default() };
    let y = params.complete(&x, &part, a.seed)?;
    save_cloud(&y, &a.output, out_fmt)?;
    eprintln!("wrote {} points to {}", y.len(), a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct RegionSummary {
    region: usize,
    count: usize,
    present: bool,
    kept: bool,
}

#[derive(Serialize)]
struct PartitionSummary {
    input_points: usize,
    overlap: f64,
    presence_threshold: usize,
    removal_prob: Option<f64>,
    remove_count: Option<usize>,
    seed: u64,
    regions: Vec<RegionSummary>,
}

pub fn partition(a: PartitionArgs) -> Result<()> {
    let in_fmt = cloud_format(&a.input)?;
    let cfg = PartitionConfig {
        overlap: a.overlap,
        presence_threshold: a.threshold,
        removal_prob: if a.remove_count.is_some() { 0.0 } else { a.remove_prob },
        seed: a.seed,
    };
    flag(cfg.validate())?;
    if a.remove_count.is_some_and(|k| k > NUM_REGIONS) {
        return usage(format!("--remove-count must be at most {NUM_REGIONS}"));
    }
    let x = load_cloud(&a.input, in_fmt)?;
    let mut part = split_regions(&x, &cfg);
    if let Some(k) = a.remove_count {
        part.remove_exactly(k, a.seed);
    }
    create_dir(&a.out_dir)?;
    for i in 0..NUM_REGIONS {
        save_cloud(&region_points(&x, &part, i), &a.out_dir.join(format!("region_{i}.ply")), CloudFormat::PlyBinary)?;
    }
    let summary = PartitionSummary {
        input_points: x.len(),
        overlap: cfg.overlap,
        presence_threshold: cfg.presence_threshold,
        removal_prob: a.remove_count.is_none().then_some(cfg.removal_prob),
        remove_count: a.remove_count,
        seed: a.seed,
        regions: (0..NUM_REGIONS)
            .map(|i| RegionSummary { region: i, count: part.regions[i].len(), present: part.present[i], kept: part.kept[i] })
            .collect(),
    };
    write_json(&a.out_dir.join("summary.json"), &summary)
}

pub fn noise(a: NoiseArgs) -> Result<()> {
    let in_fmt = cloud_format(&a.input)?;
    let out_fmt = cloud_format(&a.output)?;
    let spec = flag(NoiseSpec::new(a.max_rotation_deg, a.max_translation, a.seed))?;
    let x = load_cloud(&a.input, in_fmt)?;
    let pose = sample_pose_noise(&spec);
    save_cloud(&apply_pose(&x, &pose), &a.output, out_fmt)?;
    let t = pose.translation();
    println!(
        "{}",
        serde_json::json!({
            "rotation_deg": pose.angle_deg(),
            "translation": [t[0], t[1], t[2]],
        })
    );
    Ok(())
}

pub fn densify(a: DensifyArgs) -> Result<()> {
    let in_fmt = cloud_format(&a.input)?;
    let out_fmt = cloud_format(&a.output)?;
    if a.points_per_seed == 0 || a.target == 0 {
        return usage("--points-per-seed and --target must be positive");
    }
    let x = load_cloud(&a.input, in_fmt)?;
    let y = densify_cloud(&x, a.points_per_seed, a.target, a.seed)?;
    save_cloud(&y, &a.output, out_fmt)?;
    Ok(())
}

/// Metric column names and per-instance rows, without the `mean` row.
type EvalRows = (Vec<String>, Vec<Vec<Option<f64>>>);

fn read_eval_csv(path: &Path) -> Result<EvalRows> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().skip(2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.get(0) == Some("mean") {
            continue;
        }
        let vals = rec
            .iter()
            .skip(2)
            .map(|c| if c.is_empty() { Ok(None) } else { c.parse::<f64>().map(Some) })
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("non-numeric cell in {}", path.display()))?;
        if vals.len() != header.len() {
            bail!("ragged row in {}", path.display());
        }
        rows.push(vals);
    }
    Ok((header, rows))
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut header: Option<Vec<String>> = None;
    let mut lines = Vec::new();
    for dir in &a.runs {
        let manifest: RunManifest = serde_json::from_str(
            &fs::read_to_string(dir.join("run.json")).with_context(|| format!("reading {}", dir.join("run.json").display()))?,
        )
        .with_context(|| format!("parsing {}", dir.join("run.json").display()))?;
        let log = TrainLog::read_jsonl(&dir.join("train_log.jsonl"))?;
        let (cols, rows) = read_eval_csv(&dir.join("eval.csv"))?;
        match &header {
            None => header = Some(cols.clone()),
            Some(h) if *h != cols => bail!("{} has different eval columns", dir.display()),
            _ => {}
        }
        let means = column_means(cols.len(), rows.iter().map(Vec::as_slice));
        let last = log.records.last();
        let mut rec = vec![
            dir.display().to_string(),
            manifest.train.seed.to_string(),
            if manifest.disabled.is_empty() { "none".into() } else { manifest.disabled.join("+") },
            log.records.len().to_string(),
            last.map_or(String::new(), |r| r.loss.total.to_string()),
            rows.len().to_string(),
        ];
        rec.extend(means.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        lines.push(rec);
    }
    let mut head: Vec<String> =
        ["run", "seed", "disabled", "iters", "final_loss", "eval_instances"].iter().map(|s| s.to_string()).collect();
    head.extend(header.unwrap_or_default());
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record(&head)?;
    for l in &lines {
        w.write_record(l)?;
    }
    w.flush()?;
    let mut by_variant: BTreeMap<String, usize> = BTreeMap::new();
    for l in &lines {
        *by_variant.entry(l[2].clone()).or_default() += 1;
    }
    eprintln!("summarized {} runs ({} variants) into {}", lines.len(), by_variant.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_levels_parse_and_reject() {
        assert_eq!(parse_noise_levels("5:0.01, 10:0.05").unwrap(), vec![(5.0, 0.01), (10.0, 0.05)]);
        assert!(parse_noise_levels("5").is_err());
        assert!(parse_noise_levels("a:0.1").is_err());
        assert!(parse_noise_levels("-5:0.1").unwrap_err().downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn report_paths_carry_the_level() {
        assert_eq!(noise_report_path(Path::new("r/eval.csv"), 15.0, 0.1), PathBuf::from("r/eval_rot15_trans0.1.csv"));
    }

    #[test]
    fn means_skip_missing_cells() {
        let rows = [vec![Some(1.0), None], vec![Some(2.0), None], vec![Some(6.0), None]];
        assert_eq!(column_means(2, rows.iter().map(Vec::as_slice)), vec![Some(3.0), None]);
    }
}
