//! CSV datasets, normalization, synthetic coupled tasks and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{DiffusionModel, NoiseSchedule};
use crate::numkit::{AdamState, ParamStore, Tensor};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Rows of real features with optional integer class columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    pub points: Tensor,
    pub labels: Option<Vec<i64>>,
    pub sublabels: Option<Vec<i64>>,
}

impl TabularDataset {
    pub fn from_points(name: impl Into<String>, points: Tensor) -> Self {
        Self { name: name.into(), points, labels: None, sublabels: None }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Error unless the dataset has at least `min_rows` rows.
    pub fn require_rows(&self, min_rows: usize) -> Result<()> {
        if self.len() < min_rows {
            return Err(Error::Data(format!("dataset {:?} has {} rows, need at least {min_rows}", self.name, self.len())));
        }
        Ok(())
    }

    /// Rows `idx` as a new tensor.
    pub fn select(&self, idx: &[usize]) -> Tensor {
        select_rows(&self.points, idx)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        if self.sublabels.is_some() {
            header.push("sublabel".into());
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.points.row(i).iter().map(|v| format!("{v:?}")).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            if let Some(l) = &self.sublabels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), d, out).expect("row selection")
}

/// Loads a headed CSV. Columns named `label` and `sublabel` are read as
/// integer class ids; every other column is a feature. Row numbers in errors
/// count the header as line 1.
pub fn load_csv(path: &Path) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    let width = header.len();
    let label_col = header.iter().position(|h| h.trim() == "label");
    let sublabel_col = header.iter().position(|h| h.trim() == "sublabel");
    let features: Vec<usize> = (0..width).filter(|j| Some(*j) != label_col && Some(*j) != sublabel_col).collect();
    if features.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    let mut sublabels = sublabel_col.map(|_| Vec::new());
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::DataRow { row, msg: format!("expected {width} fields, found {}", rec.len()) });
        }
        for &j in &features {
            let s = rec[j].trim();
            let v: f64 = s.parse().map_err(|_| Error::DataRow { row, msg: format!("column {:?}: {s:?} is not a number", &header[j]) })?;
            if !v.is_finite() {
                return Err(Error::DataRow { row, msg: format!("column {:?}: non-finite value {s}", &header[j]) });
            }
            data.push(v);
        }
        let int_col = |col: usize| -> Result<i64> {
            let s = rec[col].trim();
            s.parse().map_err(|_| Error::DataRow { row, msg: format!("column {:?}: {s:?} is not an integer", &header[col]) })
        };
        if let (Some(c), Some(l)) = (label_col, labels.as_mut()) {
            l.push(int_col(c)?);
        }
        if let (Some(c), Some(l)) = (sublabel_col, sublabels.as_mut()) {
            l.push(int_col(c)?);
        }
        n += 1;
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(TabularDataset { name, points: Tensor::matrix(n, features.len(), data)?, labels, sublabels })
}

/// Writes a plain feature matrix with `f0..` headers.
pub fn write_points_csv(path: &Path, points: &Tensor) -> Result<()> {
    TabularDataset::from_points("", points.clone()).write_csv(path)
}

/// Per-feature standardization with clamping at `clip_sigmas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub clip_sigmas: f64,
}

impl Normalizer {
    pub fn fit(data: &Tensor, clip_sigmas: f64) -> Result<Self> {
        let (n, d) = (data.rows(), data.cols());
        if n < 2 {
            return Err(Error::Data(format!("normalizer needs at least 2 rows, got {n}")));
        }
        if !(clip_sigmas > 0.0) {
            return Err(Error::Config(format!("clip_sigmas must be positive, got {clip_sigmas}")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(data.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in data.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        if let Some(j) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Data(format!("feature {j} is constant")));
        }
        Ok(Self { mean, std, clip_sigmas })
    }

    pub fn apply(&self, data: &Tensor) -> Result<Tensor> {
        crate::check_dim("normalizer input", self.mean.len(), data.cols())?;
        let d = data.cols();
        let c = self.clip_sigmas;
        let out = data.data().iter().enumerate().map(|(k, v)| ((v - self.mean[k % d]) / self.std[k % d]).clamp(-c, c)).collect();
        Tensor::matrix(data.rows(), d, out)
    }

    pub fn invert(&self, data: &Tensor) -> Result<Tensor> {
        crate::check_dim("normalizer input", self.mean.len(), data.cols())?;
        let d = data.cols();
        let out = data.data().iter().enumerate().map(|(k, v)| v * self.std[k % d] + self.mean[k % d]).collect();
        Tensor::matrix(data.rows(), d, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// 2-D Gaussian mixture; `Y = R(angle)·X + noise`.
    GmmRotate,
    /// `dim`-D Gaussian mixture; `Y = W·X + noise`.
    LinearMap,
    /// Uniform on the dark cells of a 4×4 board; `Y = R(angle)·X + noise`.
    Checkerboard,
}

impl std::str::FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm_rotate" => Ok(Self::GmmRotate),
            "linear_map" => Ok(Self::LinearMap),
            "checkerboard" => Ok(Self::Checkerboard),
            _ => Err(Error::Config(format!("unknown generator {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    pub dim: usize,
    pub components: usize,
    /// Mixture weights; empty means uniform.
    pub weights: Vec<f64>,
    /// Distance of component means from the origin.
    pub radius: f64,
    /// Within-component standard deviation.
    pub component_std: f64,
    /// Standard deviation of the additive noise on `Y`.
    pub noise: f64,
    pub angle_deg: f64,
    /// Row-major `dim × dim` map for `linear_map`; empty draws a random one.
    pub map: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn gmm_rotate(n: usize, components: usize, angle_deg: f64, seed: u64) -> Self {
        Self {
            generator: Generator::GmmRotate,
            n,
            dim: 2,
            components,
            weights: Vec::new(),
            radius: 3.0,
            component_std: 0.5,
            noise: 0.0,
            angle_deg,
            map: Vec::new(),
            seed,
        }
    }

    pub fn linear_map(n: usize, dim: usize, components: usize, seed: u64) -> Self {
        Self {
            generator: Generator::LinearMap,
            n,
            dim,
            components,
            weights: Vec::new(),
            radius: 3.0,
            component_std: 0.5,
            noise: 0.05,
            angle_deg: 0.0,
            map: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.dim == 0 || (self.generator != Generator::LinearMap && self.dim != 2) {
            return bad(format!("dim {} not valid for {:?}", self.dim, self.generator));
        }
        if self.generator != Generator::Checkerboard && self.components == 0 {
            return bad("components must be positive".into());
        }
        if !self.weights.is_empty() && (self.weights.len() != self.components || self.weights.iter().any(|w| !(*w > 0.0))) {
            return bad("weights must be positive, one per component".into());
        }
        if !(self.noise >= 0.0) || !(self.component_std >= 0.0) || !(self.radius >= 0.0) {
            return bad("noise, component_std and radius must be non-negative".into());
        }
        if self.generator == Generator::GmmRotate
            && self.components > 1
            && self.component_std > 0.0
            && self.min_center_gap() < 6.0 * self.component_std
        {
            return bad(format!(
                "component means {:.3} apart, need at least 6 standard deviations ({:.3})",
                self.min_center_gap(),
                6.0 * self.component_std
            ));
        }
        if !self.map.is_empty() && self.map.len() != self.dim * self.dim {
            return bad(format!("map needs {} entries", self.dim * self.dim));
        }
        Ok(())
    }

    fn min_center_gap(&self) -> f64 {
        2.0 * self.radius * (std::f64::consts::PI / self.components as f64).sin()
    }
}

/// Two unpaired datasets plus the hidden ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub x: TabularDataset,
    pub y: TabularDataset,
    /// Row of `y` generated from row `i` of `x`.
    pub correspondence: Vec<usize>,
    /// Mixture component (or board cell) of every `x` row.
    pub x_labels: Vec<usize>,
    /// Same labels indexed by `y` row.
    pub y_labels: Vec<usize>,
    pub map: Vec<f64>,
}

fn rotation(angle_deg: f64) -> Vec<f64> {
    let a = angle_deg.to_radians();
    let (s, c) = a.sin_cos();
    let round = |v: f64| if v.abs() < 1e-15 { 0.0 } else { v };
    vec![round(c), round(-s), round(s), round(c)]
}

/// Mean of component `k` in `d` dimensions: spread on a circle in the first
/// two coordinates, with further coordinates offset by a fixed pattern.
fn component_mean(k: usize, c: usize, d: usize, radius: f64) -> Vec<f64> {
    let a = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
    let mut m = vec![0.0; d];
    m[0] = radius * a.cos();
    if d > 1 {
        m[1] = radius * a.sin();
    }
    for (j, v) in m.iter_mut().enumerate().skip(2) {
        *v = radius * ((a * (j as f64)).cos()) * 0.5;
    }
    m
}

fn draw_component(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng::uniform(rng) * total;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

pub fn synth_coupled(spec: &SyntheticSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut r = rng::seeded(spec.seed);
    let d = spec.dim;
    let n = spec.n;
    let mut xs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match spec.generator {
        Generator::GmmRotate | Generator::LinearMap => {
            let weights = if spec.weights.is_empty() { vec![1.0; spec.components] } else { spec.weights.clone() };
            let means: Vec<Vec<f64>> = (0..spec.components).map(|k| component_mean(k, spec.components, d, spec.radius)).collect();
            for _ in 0..n {
                let k = draw_component(&mut r, &weights);
                labels.push(k);
                for m in &means[k] {
                    xs.push(m + spec.component_std * rng::normal(&mut r));
                }
            }
        }
        Generator::Checkerboard => {
            let cells: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).filter(|(i, j)| (i + j) % 2 == 0).collect();
            let side = spec.radius / 2.0;
            for _ in 0..n {
                let k = rng::int_in(&mut r, 0, cells.len() - 1);
                labels.push(k);
                let (i, j) = cells[k];
                xs.push((i as f64 - 2.0 + rng::uniform(&mut r)) * side);
                xs.push((j as f64 - 2.0 + rng::uniform(&mut r)) * side);
            }
        }
    }
    let map = match spec.generator {
        Generator::LinearMap if spec.map.is_empty() => random_map(&mut r, d),
        Generator::LinearMap => spec.map.clone(),
        _ => rotation(spec.angle_deg),
    };
    let mut ys = Vec::with_capacity(n * d);
    for i in 0..n {
        let x = &xs[i * d..(i + 1) * d];
        for a in 0..d {
            let v: f64 = (0..d).map(|b| map[a * d + b] * x[b]).sum();
            let e = if spec.noise > 0.0 { spec.noise * rng::normal(&mut r) } else { 0.0 };
            ys.push(v + e);
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    // row perm[i] of the shuffled Y holds the partner of x_i
    let mut y_rows = vec![0.0; n * d];
    let mut y_labels = vec![0; n];
    for i in 0..n {
        y_rows[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(&ys[i * d..(i + 1) * d]);
        y_labels[perm[i]] = labels[i];
    }
    let as_i64 = |v: &[usize]| Some(v.iter().map(|&l| l as i64).collect());
    Ok(SyntheticPair {
        x: TabularDataset { name: "x".into(), points: Tensor::matrix(n, d, xs)?, labels: as_i64(&labels), sublabels: None },
        y: TabularDataset { name: "y".into(), points: Tensor::matrix(n, d, y_rows)?, labels: as_i64(&y_labels), sublabels: None },
        correspondence: perm,
        x_labels: labels,
        y_labels,
        map,
    })
}

/// Random orthogonal matrix scaled by factors in `[0.5, 1.5]` per output axis.
fn random_map(r: &mut Rng, d: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v = rng::normal_vec(r, d);
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    let mut out = Vec::with_capacity(d * d);
    for row in q {
        let s = 0.5 + rng::uniform(r);
        out.extend(row.iter().map(|a| s * a));
    }
    out
}

/// Indices `0..n` split into a shuffled `(train, held_out)` pair.
pub fn split_indices(n: usize, held_out_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let k = ((n as f64) * held_out_frac).round() as usize;
    let held = idx.split_off(n - k.min(n));
    (idx, held)
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DMEC1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleMeta,
    pub step: u64,
    pub ema_decay: f64,
    /// Free-form tags such as the translation direction.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockMeta {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireMeta {
    meta: CheckpointMeta,
    blocks: Vec<BlockMeta>,
    adam: Option<AdamMeta>,
}

/// Serialized model state: metadata, parameters, optional EMA and optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub ema: Option<ParamStore>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &DiffusionModel, optimizer: Option<&AdamState>) -> Self {
        let (beta_min, beta_max) = model.schedule.beta_range();
        Self {
            meta: CheckpointMeta {
                denoiser: model.denoiser.config().clone(),
                schedule: ScheduleMeta { t_max: model.schedule.t_max(), beta_min, beta_max },
                step: model.step,
                ema_decay: model.ema_decay,
                tags: BTreeMap::new(),
            },
            params: model.denoiser.params().without_grads(),
            ema: model.ema.as_ref().map(ParamStore::without_grads),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn with_tag(mut self, key: &str, value: &str) -> Self {
        self.meta.tags.insert(key.into(), value.into());
        self
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.meta.tags.get(key).map(String::as_str)
    }

    pub fn to_model(&self) -> Result<DiffusionModel> {
        let s = &self.meta.schedule;
        let schedule = NoiseSchedule::linear(s.t_max, s.beta_min, s.beta_max)?;
        let den = Denoiser::from_params(self.meta.denoiser.clone(), self.params.clone())?;
        let mut m = DiffusionModel::new(den, schedule);
        m.step = self.meta.step;
        m.ema_decay = self.meta.ema_decay;
        m.ema = self.ema.clone();
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut payload: Vec<&[f64]> = Vec::new();
        let push_store = |group: &str, store: &ParamStore, blocks: &mut Vec<BlockMeta>| {
            for (name, t) in store.iter() {
                blocks.push(BlockMeta { group: group.into(), name: name.into(), shape: t.shape().to_vec() });
            }
        };
        push_store("param", &self.params, &mut blocks);
        payload.extend(self.params.iter().map(|(_, t)| t.data()));
        if let Some(e) = &self.ema {
            push_store("ema", e, &mut blocks);
            payload.extend(e.iter().map(|(_, t)| t.data()));
        }
        let adam = self.optimizer.as_ref().map(|o| {
            let (m, v) = o.moments();
            for (group, mom) in [("adam_m", m), ("adam_v", v)] {
                for ((name, t), data) in self.params.iter().zip(mom) {
                    blocks.push(BlockMeta { group: group.into(), name: name.into(), shape: t.shape().to_vec() });
                    payload.push(data);
                }
            }
            AdamMeta { step: o.step, lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps }
        });
        let wire = WireMeta { meta: self.meta.clone(), blocks, adam };
        let json = serde_json::to_vec(&wire).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::CheckpointFormat("metadata too large".into()))?;
        let mut out = Vec::with_capacity(10 + json.len() + 8 * payload.iter().map(|p| p.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for block in payload {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() {
            if CHECKPOINT_MAGIC.starts_with(bytes) {
                return Err(Error::Truncated(format!("{} bytes, shorter than the magic", bytes.len())));
            }
            return Err(Error::BadMagic { found: bytes.to_vec() });
        }
        if &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { found: bytes[..5].to_vec() });
        }
        if bytes.len() < 10 {
            return Err(Error::Truncated("header incomplete".into()));
        }
        if bytes[5] != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: bytes[5], expected: CHECKPOINT_VERSION });
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = &bytes[10..];
        if body.len() < len {
            return Err(Error::Truncated(format!("metadata needs {len} bytes, {} present", body.len())));
        }
        let wire: WireMeta = serde_json::from_slice(&body[..len]).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
        let mut rest = &body[len..];
        let needed: usize = wire.blocks.iter().map(|b| 8 * b.shape.iter().product::<usize>()).sum();
        if rest.len() < needed {
            return Err(Error::Truncated(format!("parameter blocks need {needed} bytes, {} present", rest.len())));
        }
        if rest.len() > needed {
            return Err(Error::CheckpointFormat(format!("{} trailing bytes", rest.len() - needed)));
        }
        let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
        let mut moments: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for b in &wire.blocks {
            let k: usize = b.shape.iter().product();
            let (chunk, tail) = rest.split_at(8 * k);
            rest = tail;
            let data: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            match b.group.as_str() {
                "param" | "ema" => {
                    groups.entry(b.group.clone()).or_default().push(b.name.clone(), Tensor::new(b.shape.clone(), data)?);
                }
                "adam_m" | "adam_v" => moments.entry(b.group.clone()).or_default().push(data),
                g => return Err(Error::CheckpointFormat(format!("unknown block group {g:?}"))),
            }
        }
        let params = groups.remove("param").unwrap_or_default();
        let ema = groups.remove("ema");
        let optimizer = match wire.adam {
            Some(a) => Some(AdamState::from_parts(
                &params,
                a.step,
                [a.lr, a.beta1, a.beta2, a.eps],
                moments.remove("adam_m").unwrap_or_default(),
                moments.remove("adam_v").unwrap_or_default(),
            )?),
            None => None,
        };
        Ok(Self { meta: wire.meta, params, ema, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
