//! Two-level completion network: a global PointNet-style encoder over the
//! whole (occluded) cloud, a shared local encoder applied to every octant
//! region, attention-weighted aggregation of the region codes, channel-wise
//! max fusion, and fully-connected global and per-region decoders.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::cloud::{resample, PointCloud};
use crate::error::{Error, Result};
use crate::partition::{pad_region, partition, region_points, synthetic_occlude, PartitionConfig, RegionPartition, NUM_REGIONS};
use crate::rng::{derive_seed, seeded};

/// How the attention head weights a region embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// One weight per region, scaling the whole embedding.
    #[default]
    Scalar,
    /// One weight per embedding channel.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Global embedding width `C`. Encoder widths are `C/4, C/2`, head and
    /// decoder hidden widths are `C`.
    pub embed_dim: usize,
    /// Local-branch widths are the global ones divided by this.
    pub local_divisor: usize,
    pub global_input: usize,
    pub local_input: usize,
    pub global_output: usize,
    /// Points per region produced by the local decoder.
    pub local_output: usize,
    pub attention: AttentionMode,
    pub global_branch: bool,
    pub local_branch: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            local_divisor: 8,
            global_input: 3096,
            local_input: 387,
            global_output: 4096,
            local_output: 512,
            attention: AttentionMode::Scalar,
            global_branch: true,
            local_branch: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Enables/disables the branches while keeping the total output size:
    /// a lone branch takes over the other branch's share of points.
    pub fn with_branches(mut self, global: bool, local: bool) -> Result<Self> {
        let total = self.output_points();
        self.global_branch = global;
        self.local_branch = local;
        match (global, local) {
            (true, true) => {}
            (true, false) => self.global_output = total,
            (false, true) => {
                if !total.is_multiple_of(NUM_REGIONS) {
                    return Err(Error::InvalidSpec(format!("{total} output points do not split into {NUM_REGIONS} regions")));
                }
                self.local_output = total / NUM_REGIONS;
            }
            (false, false) => return Err(Error::InvalidSpec("at least one branch must be enabled".into())),
        }
        Ok(self)
    }

    pub fn output_points(&self) -> usize {
        let g = if self.global_branch { self.global_output } else { 0 };
        let l = if self.local_branch { NUM_REGIONS * self.local_output } else { 0 };
        g + l
    }

    pub fn local_dim(&self) -> usize {
        self.embed_dim / self.local_divisor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !self.global_branch && !self.local_branch {
            return bad("at least one branch must be enabled".into());
        }
        if self.local_divisor == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4 * self.local_divisor) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of 4 * local_divisor ({})",
                self.embed_dim, self.local_divisor
            ));
        }
        if self.global_input == 0 || self.local_input == 0 {
            return bad("encoder input sizes must be positive".into());
        }
        if (self.global_branch && self.global_output == 0) || (self.local_branch && self.local_output == 0) {
            return bad("decoder output sizes must be positive".into());
        }
        Ok(())
    }

    /// `(name, fan_in, fan_out, has_bias)` for every dense layer, in storage order.
    fn layers(&self) -> Vec<(&'static str, usize, usize, bool)> {
        let c = self.embed_dim;
        let cl = self.local_dim();
        let d = self.local_divisor;
        let mut out = Vec::new();
        if self.global_branch {
            out.extend([
                ("eg.p0", 3, c / 4, true),
                ("eg.p1", c / 4, c / 2, true),
                ("eg.h0", c / 2, c, true),
                ("eg.h1", c, c, true),
            ]);
        }
        if self.local_branch {
            let att_out = match self.attention {
                AttentionMode::Scalar => 1,
                AttentionMode::PerChannel => cl,
            };
            out.extend([
                ("el.p0", 3, c / 4 / d, true),
                ("el.p1", c / 4 / d, c / 2 / d, true),
                ("el.h0", c / 2 / d, cl, true),
                ("el.h1", cl, cl, true),
                ("att", cl, att_out, true),
                ("lift", cl, c, false),
            ]);
        }
        if self.global_branch {
            out.extend([("dg.0", c, c, true), ("dg.1", c, 3 * self.global_output, true)]);
        }
        if self.local_branch {
            out.extend([
                ("dl.0", c + NUM_REGIONS, cl, true),
                ("dl.1", cl, 3 * self.local_output, true),
            ]);
        }
        out
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, fan_in, fan_out, bias) in self.layers() {
            out.push((format!("{name}.w"), vec![fan_in, fan_out]));
            if bias {
                out.push((format!("{name}.b"), vec![fan_out]));
            }
        }
        out
    }
}

/// Every learnable tensor of the network, stored by name in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.init_seed);
        let layout = config.tensor_layout();
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            // biases share the fan-in of their weight matrix
            let fan_in = if name.ends_with(".b") { tensors.last().map_or(1, |w: &Tensor| w.shape()[0]) } else { shape[0] };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Self::from_parts(config, tensors)
    }

    fn from_parts(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = config.tensor_layout();
        if layout.len() != tensors.len() {
            return Err(Error::CheckpointMismatch(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        let names: Vec<String> = layout.into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, tensors, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g` as a trainable leaf.
    pub fn register<'p>(&'p self, g: &mut Graph<'p>) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| g.param(t)).collect(),
        }
    }

    fn var(&self, pv: &ParamVars, name: &str) -> Var {
        pv.vars[self.index[name]]
    }

    fn dense(&self, g: &mut Graph<'_>, pv: &ParamVars, layer: &str, x: Var) -> Var {
        let w = self.var(pv, &format!("{layer}.w"));
        let b = self.index.get(&format!("{layer}.b")).map(|&i| pv.vars[i]);
        g.linear(x, w, b)
    }

    fn dense_relu(&self, g: &mut Graph<'_>, pv: &ParamVars, layer: &str, x: Var) -> Var {
        let h = self.dense(g, pv, layer, x);
        g.relu(h)
    }

    /// Shared per-point MLP, max over each block of `group` points, MLP head.
    fn pointnet(&self, g: &mut Graph<'_>, pv: &ParamVars, prefix: &str, pts: Var, group: usize) -> Var {
        let h = self.dense_relu(g, pv, &format!("{prefix}.p0"), pts);
        let h = self.dense_relu(g, pv, &format!("{prefix}.p1"), h);
        let pooled = g.max_pool_rows(h, group);
        let h = self.dense_relu(g, pv, &format!("{prefix}.h0"), pooled);
        self.dense(g, pv, &format!("{prefix}.h1"), h)
    }

    fn require(&self, branch: bool, what: &str) -> Result<()> {
        if branch {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{what} branch is disabled in this model")))
        }
    }

    /// Global embedding `[1, C]` of the (occluded, resampled) input.
    pub fn encode_global(&self, g: &mut Graph<'_>, pv: &ParamVars, x_hat: &PointCloud) -> Result<Var> {
        self.require(self.config.global_branch, "global")?;
        if x_hat.len() != self.config.global_input {
            return Err(Error::ShapeMismatch(format!(
                "global encoder expects {} points, got {}",
                self.config.global_input,
                x_hat.len()
            )));
        }
        let pts = g.constant(Tensor::matrix(x_hat.len(), 3, x_hat.to_flat())?);
        Ok(self.pointnet(g, pv, "eg", pts, x_hat.len()))
    }

    /// Region embeddings `[8, C/d]`, attention weights, and the aggregate
    /// `sum_i 1_i w_i e_i` lifted to `[1, C]`.
    pub fn encode_local(&self, g: &mut Graph<'_>, pv: &ParamVars, regions: &[PointCloud], active: &[bool; NUM_REGIONS]) -> Result<LocalEncoding> {
        self.require(self.config.local_branch, "local")?;
        let n = self.config.local_input;
        if regions.len() != NUM_REGIONS || regions.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch(format!("local encoder expects {NUM_REGIONS} regions of {n} points")));
        }
        let flat: Vec<f64> = regions.iter().flat_map(PointCloud::to_flat).collect();
        let pts = g.constant(Tensor::matrix(NUM_REGIONS * n, 3, flat)?);
        let e_l = self.pointnet(g, pv, "el", pts, n);
        let logits = self.dense(g, pv, "att", e_l);
        let w = g.sigmoid(logits);
        let weighted = match self.config.attention {
            AttentionMode::Scalar => g.scale_rows(e_l, w),
            AttentionMode::PerChannel => g.mul(e_l, w),
        };
        let rows: Vec<usize> = (0..NUM_REGIONS).filter(|&i| active[i]).collect();
        let p_l = if rows.is_empty() {
            g.constant(Tensor::zeros(&[1, self.config.local_dim()]))
        } else {
            let sel = g.select_rows(weighted, &rows);
            g.sum_rows(sel)
        };
        let lift = self.var(pv, "lift.w");
        let lifted = g.matmul(p_l, lift);
        Ok(LocalEncoding { e_l, w, p_l, lifted })
    }

    /// Channel-wise max; ties go to `e_g`.
    pub fn fuse(&self, g: &mut Graph<'_>, e_g: Option<Var>, lifted: Option<Var>) -> Result<Var> {
        match (e_g, lifted) {
            (Some(a), Some(b)) => {
                if g.value(a).len() != g.value(b).len() {
                    return Err(Error::ShapeMismatch("fusion inputs differ in width".into()));
                }
                Ok(g.maximum(a, b))
            }
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => Err(Error::ShapeMismatch("nothing to fuse".into())),
        }
    }

    /// Global output `[Ng, 3]` and the per-region outputs `[Nl, 3]` each.
    pub fn decode(&self, g: &mut Graph<'_>, pv: &ParamVars, p: Var) -> Result<Decoded> {
        let cfg = &self.config;
        if g.value(p).len() != cfg.embed_dim {
            return Err(Error::ShapeMismatch(format!("decoder expects a {}-vector", cfg.embed_dim)));
        }
        let y_g = if cfg.global_branch {
            let h = self.dense_relu(g, pv, "dg.0", p);
            let out = self.dense(g, pv, "dg.1", h);
            Some(g.reshape(out, &[cfg.global_output, 3]))
        } else {
            None
        };
        let y_regions = if cfg.local_branch {
            let rep = g.repeat_rows(p, NUM_REGIONS);
            let mut eye = vec![0.0; NUM_REGIONS * NUM_REGIONS];
            for i in 0..NUM_REGIONS {
                eye[i * NUM_REGIONS + i] = 1.0;
            }
            let codes = g.constant(Tensor::matrix(NUM_REGIONS, NUM_REGIONS, eye)?);
            let input = g.concat_cols(&[rep, codes]);
            let h = self.dense_relu(g, pv, "dl.0", input);
            let out = self.dense(g, pv, "dl.1", h);
            let all = g.reshape(out, &[NUM_REGIONS * cfg.local_output, 3]);
            Some(
                (0..NUM_REGIONS)
                    .map(|i| g.slice_rows(all, i * cfg.local_output, cfg.local_output))
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let mut parts: Vec<Var> = y_g.into_iter().collect();
        if let Some(r) = &y_regions {
            parts.extend(r.iter().copied());
        }
        let y = g.concat_rows(&parts);
        Ok(Decoded { y_g, y_regions, y })
    }

    /// Full pipeline on a prepared input.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, input: &ModelInput) -> Result<Forward> {
        let params = self.register(g);
        let e_g = if self.config.global_branch {
            Some(self.encode_global(g, &params, &input.global)?)
        } else {
            None
        };
        let local = if self.config.local_branch {
            Some(self.encode_local(g, &params, &input.regions, &input.active)?)
        } else {
            None
        };
        let p = self.fuse(g, e_g, local.as_ref().map(|l| l.lifted))?;
        let decoded = self.decode(g, &params, p)?;
        Ok(Forward { params, e_g, local, p, decoded })
    }

    /// Inference completion: partition without removal, one forward pass.
    pub fn complete(&self, x: &PointCloud, part_cfg: &PartitionConfig, seed: u64) -> Result<PointCloud> {
        let mut part = partition(x.non_empty()?, part_cfg);
        part.keep_all();
        let input = ModelInput::prepare(x, &part, &self.config, part_cfg.presence_threshold, seed)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &input)?;
        PointCloud::from_flat(g.value(fwd.decoded.y).data())
    }

    /// Gradients aligned with [`Self::tensors`]; parameters the loss does
    /// not reach get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, vars: &ParamVars) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&vars.vars)
            .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph handles of the registered parameters, aligned with storage order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalEncoding {
    /// `[8, C/d]`
    pub e_l: Var,
    /// `[8, 1]` or `[8, C/d]`
    pub w: Var,
    /// `[1, C/d]`
    pub p_l: Var,
    /// `[1, C]`
    pub lifted: Var,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub y_g: Option<Var>,
    pub y_regions: Option<Vec<Var>>,
    pub y: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub params: ParamVars,
    pub e_g: Option<Var>,
    pub local: Option<LocalEncoding>,
    pub p: Var,
    pub decoded: Decoded,
}

impl Forward {
    pub fn outputs(&self, g: &Graph<'_>) -> Result<ForwardOutputs> {
        let vals = |v: Var| g.value(v).data().to_vec();
        Ok(ForwardOutputs {
            e_g: self.e_g.map(vals),
            e_l: self.local.map(|l| vals(l.e_l)),
            w: self.local.map(|l| vals(l.w)),
            p_l: self.local.map(|l| vals(l.p_l)),
            p_l_lifted: self.local.map(|l| vals(l.lifted)),
            p: vals(self.p),
            y_g: self.decoded.y_g.map(|v| PointCloud::from_flat(g.value(v).data())).transpose()?,
            y_regions: match &self.decoded.y_regions {
                Some(r) => Some(r.iter().map(|&v| PointCloud::from_flat(g.value(v).data())).collect::<Result<_>>()?),
                None => None,
            },
            y: PointCloud::from_flat(g.value(self.decoded.y).data())?,
        })
    }
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub e_g: Option<Vec<f64>>,
    pub e_l: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub p_l: Option<Vec<f64>>,
    pub p_l_lifted: Option<Vec<f64>>,
    pub p: Vec<f64>,
    pub y_g: Option<PointCloud>,
    pub y_regions: Option<Vec<PointCloud>>,
    pub y: PointCloud,
}

/// Network input: the occluded cloud at the global size, every region at
/// the local size, and which regions count (present and not removed).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub global: PointCloud,
    pub regions: Vec<PointCloud>,
    pub active: [bool; NUM_REGIONS],
}

impl ModelInput {
    pub fn prepare(x: &PointCloud, part: &RegionPartition, cfg: &ModelConfig, threshold: usize, seed: u64) -> Result<Self> {
        let x_hat = synthetic_occlude(x.non_empty()?, part)?;
        let global = resample(&x_hat, cfg.global_input, derive_seed(seed, 0))?;
        let regions = (0..NUM_REGIONS)
            .map(|i| {
                if part.kept[i] {
                    pad_region(&region_points(x, part, i), cfg.local_input, threshold, derive_seed(seed, 1 + i as u64))
                } else {
                    PointCloud::zeros(cfg.local_input)
                }
            })
            .collect();
        Ok(Self { global, regions, active: part.kept })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PCIPCK01";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Binary checkpoint: magic, `u32` manifest length, JSON manifest (config,
/// tensor names and shapes), then every tensor as row-major little-endian `f64`.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let manifest = Manifest {
        config: params.config.clone(),
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut buf = Vec::with_capacity(12 + json.len() + 8 * params.num_scalars());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::CheckpointMismatch(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&format!("bad manifest: {e}")))?;
    manifest.config.validate().map_err(|e| bad(&e.to_string()))?;
    let layout = manifest.config.tensor_layout();
    let listed: Vec<(String, Vec<usize>)> = manifest.tensors.into_iter().map(|e| (e.name, e.shape)).collect();
    if listed != layout {
        return Err(bad("tensor list does not match the configured architecture"));
    }
    let mut data = bytes[12 + len..].chunks_exact(8);
    if data.len() * 8 != bytes.len() - 12 - len {
        return Err(bad("trailing partial value"));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (_, shape) in &layout {
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let chunk = data.next().ok_or_else(|| bad("truncated tensor data"))?;
            let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(bad("non-finite parameter"));
            }
            vals.push(v);
        }
        tensors.push(Tensor::new(shape.clone(), vals)?);
    }
    if data.next().is_some() {
        return Err(bad("trailing data"));
    }
    ModelParams::from_parts(manifest.config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 32,
            local_divisor: 8,
            global_input: 16,
            local_input: 4,
            global_output: 8,
            local_output: 2,
            attention: AttentionMode::Scalar,
            global_branch: true,
            local_branch: true,
            init_seed: 7,
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = seeded(seed);
        PointCloud::new((0..n).map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect()).unwrap()
    }

    fn input_for(cfg: &ModelConfig, x: &PointCloud, seed: u64) -> ModelInput {
        let pcfg = PartitionConfig { presence_threshold: 2, seed, ..Default::default() };
        let mut part = partition(x, &pcfg);
        part.keep_all();
        ModelInput::prepare(x, &part, cfg, pcfg.presence_threshold, seed).unwrap()
    }

    #[test]
    fn default_output_is_8192_and_branch_ablations_keep_it() {
        let c = ModelConfig::default();
        assert_eq!(c.output_points(), 8192);
        assert_eq!(c.clone().with_branches(true, false).unwrap().output_points(), 8192);
        assert_eq!(c.clone().with_branches(false, true).unwrap().output_points(), 8192);
        assert!(c.with_branches(false, false).is_err());
    }

    #[test]
    fn local_widths_are_an_eighth() {
        let c = ModelConfig::default();
        let layout: HashMap<String, Vec<usize>> = c.tensor_layout().into_iter().collect();
        for (g, l) in [("eg.p0.w", "el.p0.w"), ("eg.p1.w", "el.p1.w"), ("eg.h0.w", "el.h0.w"), ("eg.h1.w", "el.h1.w")] {
            assert_eq!(layout[g][1], 8 * layout[l][1]);
        }
        assert_eq!(layout["dl.0.w"], vec![256 + 8, 32]);
        assert_eq!(layout["dg.1.w"], vec![256, 3 * 4096]);
    }

    #[test]
    fn encoder_is_permutation_and_duplication_invariant() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg).unwrap();
        let x = random_cloud(16, 1);
        let mut perm: Vec<usize> = (0..16).rev().collect();
        perm.swap(3, 9);
        let xp = x.select(&perm);
        let half = x.select(&(0..8).collect::<Vec<_>>());
        let dup = half.concat(&half);
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let a = params.encode_global(&mut g, &pv, &x).unwrap();
        let b = params.encode_global(&mut g, &pv, &xp).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
        let c = params.encode_global(&mut g, &pv, &dup).unwrap();
        let mut g2 = Graph::new();
        let mut cfg8 = tiny_config();
        cfg8.global_input = 8;
        let p8 = ModelParams::init(cfg8).unwrap();
        let pv8 = p8.register(&mut g2);
        let d = p8.encode_global(&mut g2, &pv8, &half).unwrap();
        assert_eq!(g.value(c).data(), g2.value(d).data());
    }

    #[test]
    fn fused_code_dominates_both_inputs() {
        let params = ModelParams::init(tiny_config()).unwrap();
        let x = random_cloud(40, 2);
        let input = input_for(params.config(), &x, 3);
        let mut g = Graph::new();
        let fwd = params.forward(&mut g, &input).unwrap();
        let out = fwd.outputs(&g).unwrap();
        let (eg, pl) = (out.e_g.unwrap(), out.p_l_lifted.unwrap());
        for c in 0..out.p.len() {
            assert_eq!(out.p[c], eg[c].max(pl[c]));
        }
    }

    #[test]
    fn region_codes_make_region_outputs_differ() {
        let params = ModelParams::init(tiny_config()).unwrap();
        let input = input_for(params.config(), &random_cloud(40, 4), 5);
        let mut g = Graph::new();
        let out = params.forward(&mut g, &input).unwrap().outputs(&g).unwrap();
        let r = out.y_regions.unwrap();
        assert_ne!(r[0], r[1]);
        assert_eq!(out.y.len(), params.config().output_points());
    }

    #[test]
    fn single_active_region_aggregate_is_its_weighted_embedding() {
        let params = ModelParams::init(tiny_config()).unwrap();
        let mut input = input_for(params.config(), &random_cloud(40, 6), 7);
        input.active = [false; NUM_REGIONS];
        input.active[2] = true;
        let mut g = Graph::new();
        let out = params.forward(&mut g, &input).unwrap().outputs(&g).unwrap();
        let cl = params.config().local_dim();
        let (e_l, w, p_l) = (out.e_l.unwrap(), out.w.unwrap(), out.p_l.unwrap());
        for c in 0..cl {
            assert_eq!(p_l[c], w[2] * e_l[2 * cl + c]);
        }
        input.active = [false; NUM_REGIONS];
        let mut g = Graph::new();
        let out = params.forward(&mut g, &input).unwrap().outputs(&g).unwrap();
        assert!(out.p_l.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_regions_get_identical_codes() {
        let params = ModelParams::init(tiny_config()).unwrap();
        let mut input = input_for(params.config(), &random_cloud(40, 8), 9);
        input.regions[5] = input.regions[1].clone();
        let mut g = Graph::new();
        let out = params.forward(&mut g, &input).unwrap().outputs(&g).unwrap();
        let cl = params.config().local_dim();
        let e = out.e_l.unwrap();
        assert_eq!(e[cl..2 * cl], e[5 * cl..6 * cl]);
        let w = out.w.unwrap();
        assert_eq!(w[1], w[5]);
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let params = ModelParams::init(tiny_config()).unwrap();
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        assert!(matches!(params.encode_global(&mut g, &pv, &random_cloud(5, 1)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = ModelParams::init(tiny_config()).unwrap();
        save_checkpoint(&params, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), params);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointMismatch(_))));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointMismatch(_))));

        // manifest claims a shape the architecture does not have
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        let tampered = manifest.replacen("[3,8]", "[3,9]", 1);
        assert_ne!(tampered, manifest);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        fs::write(&path, out).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointMismatch(_))));
    }
}
