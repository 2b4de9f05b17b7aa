use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mecdiff::data::{load_csv, write_points_csv, Normalizer};
use mecdiff::diffusion::{self, pretrain};
use mecdiff::mec::{mec_training_loop, StepDiagnostics};
use mecdiff::metrics::{self, QuadrantQuantizer};
use mecdiff::rng;
use mecdiff::{Checkpoint, CouplingPair, Denoiser, DiffusionModel, Error, Phase, Result, Tensor};

use crate::config::RunConfig;

const TAG_ROLE: &str = "role";
const TAG_DIRECTION: &str = "direction";
const TAG_NORMALIZER: &str = "normalizer";
const TAG_COND_NORMALIZER: &str = "cond_normalizer";

/// Config file (if any) plus `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn normalizer_tag(n: &Option<Normalizer>) -> Result<Option<String>> {
    n.as_ref().map(|n| serde_json::to_string(n).map_err(|e| Error::CheckpointFormat(e.to_string()))).transpose()
}

fn read_normalizer(c: &Checkpoint, key: &str) -> Result<Option<Normalizer>> {
    c.tag(key).map(|s| serde_json::from_str(s).map_err(|e| Error::CheckpointFormat(format!("{key}: {e}")))).transpose()
}

fn normalize(n: &Option<Normalizer>, t: &Tensor) -> Result<Tensor> {
    match n {
        Some(n) => n.apply(t),
        None => Ok(t.clone()),
    }
}

fn denormalize(n: &Option<Normalizer>, t: &Tensor) -> Result<Tensor> {
    match n {
        Some(n) => n.invert(t),
        None => Ok(t.clone()),
    }
}

fn tagged(mut c: Checkpoint, tags: &[(&str, Option<String>)]) -> Checkpoint {
    for (k, v) in tags {
        if let Some(v) = v {
            c = c.with_tag(k, v);
        }
    }
    c
}

#[derive(Debug, Clone, Default)]
pub struct PretrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Overrides `pretrain.steps`.
    pub steps: Option<usize>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<(String, String)>,
    /// Defaults to the checkpoint path with a `.loss.csv` suffix.
    pub loss_csv: Option<PathBuf>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Trains an unconditional model; writes the checkpoint and a `step,loss` CSV.
pub fn cmd_pretrain(args: &PretrainArgs) -> Result<Vec<f64>> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.steps {
        cfg.pretrain.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let ds = load_csv(&args.data)?;
    if cfg.pretrain.steps > 0 {
        ds.require_rows(1)?;
    }
    let norm = if cfg.data.normalize && ds.len() >= 2 { Some(Normalizer::fit(&ds.points, cfg.data.clip_sigmas)?) } else { None };
    let x = normalize(&norm, &ds.points)?;
    let mut r = rng::seeded(cfg.seed);
    let den = Denoiser::new_unconditional(cfg.denoiser(ds.dim()), &mut r)?;
    let mut model = DiffusionModel::new(den, cfg.schedule()?).with_ema(cfg.model.ema_decay);
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    let opt = pretrain(&mut model, &x, &cfg.pretrain, &mut r, |_, l| losses.push(l))?;
    let ckpt =
        tagged(Checkpoint::from_model(&model, Some(&opt)), &[(TAG_ROLE, Some("anchor".into())), (TAG_NORMALIZER, normalizer_tag(&norm)?)]);
    ckpt.save(&args.out)?;
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| sibling(&args.out, ".loss.csv"));
    let mut w = csv::Writer::from_path(loss_path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:?}")])?;
    }
    w.flush()?;
    Ok(losses)
}

#[derive(Debug, Clone, Default)]
pub struct CoupleArgs {
    pub x_data: PathBuf,
    pub y_data: PathBuf,
    pub x_anchor: PathBuf,
    pub y_anchor: PathBuf,
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<(String, String)>,
}

/// Fine-tunes the coupling. Writes `theta.ckpt` (X given Y), `phi.ckpt`
/// (Y given X), the two anchors actually used, and `diagnostics.csv`.
pub fn cmd_couple(args: &CoupleArgs) -> Result<Vec<StepDiagnostics>> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let (cx, cy) = (Checkpoint::load(&args.x_anchor)?, Checkpoint::load(&args.y_anchor)?);
    let (nx, ny) = (read_normalizer(&cx, TAG_NORMALIZER)?, read_normalizer(&cy, TAG_NORMALIZER)?);
    let ax = cx.to_model()?.ema_model()?;
    let ay = cy.to_model()?.ema_model()?;
    if ax.is_conditional() || ay.is_conditional() {
        return Err(Error::InvalidArgument("anchors must be unconditional checkpoints".into()));
    }
    let (dx, dy) = (load_csv(&args.x_data)?, load_csv(&args.y_data)?);
    mecdiff::data::TabularDataset::require_rows(&dx, usize::from(cfg.rl.total_steps > 0))?;
    mecdiff::data::TabularDataset::require_rows(&dy, usize::from(cfg.rl.total_steps > 0))?;
    if ax.data_dim() != dx.dim() {
        return Err(Error::Dimension { what: "x anchor vs x data".into(), expected: ax.data_dim(), got: dx.dim() });
    }
    if ay.data_dim() != dy.dim() {
        return Err(Error::Dimension { what: "y anchor vs y data".into(), expected: ay.data_dim(), got: dy.dim() });
    }
    let x = normalize(&nx, &dx.points)?;
    let y = normalize(&ny, &dy.points)?;
    let mut r = rng::seeded(cfg.seed);
    let pair = CouplingPair::from_anchors(ax, ay, &mut r)?;
    let (pair, log) = mec_training_loop(pair, &x, &y, &cfg.rl, &mut r, |_| {})?;
    fs::create_dir_all(&args.out_dir)?;
    let (tx, ty) = (normalizer_tag(&nx)?, normalizer_tag(&ny)?);
    let role = |s: &str| Some(s.to_string());
    tagged(
        Checkpoint::from_model(&pair.theta, None),
        &[(TAG_ROLE, role("conditional")), (TAG_DIRECTION, role("y2x")), (TAG_NORMALIZER, tx.clone()), (TAG_COND_NORMALIZER, ty.clone())],
    )
    .save(&args.out_dir.join("theta.ckpt"))?;
    tagged(
        Checkpoint::from_model(&pair.phi, None),
        &[(TAG_ROLE, role("conditional")), (TAG_DIRECTION, role("x2y")), (TAG_NORMALIZER, ty.clone()), (TAG_COND_NORMALIZER, tx.clone())],
    )
    .save(&args.out_dir.join("phi.ckpt"))?;
    tagged(Checkpoint::from_model(&pair.theta_anchor, None), &[(TAG_ROLE, role("anchor")), (TAG_NORMALIZER, tx)])
        .save(&args.out_dir.join("theta_anchor.ckpt"))?;
    tagged(Checkpoint::from_model(&pair.phi_anchor, None), &[(TAG_ROLE, role("anchor")), (TAG_NORMALIZER, ty)])
        .save(&args.out_dir.join("phi_anchor.ckpt"))?;
    write_diagnostics(&args.out_dir.join("diagnostics.csv"), &log)?;
    Ok(log)
}

/// One row per phase per iteration; `phase` is 0 for theta and 1 for phi.
pub fn write_diagnostics(path: &Path, log: &[StepDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "phase",
        "reward_mean",
        "reward_stderr",
        "kl_term",
        "consistency_loss",
        "grad_norm",
        "clip_fraction",
        "buffer_len",
    ])?;
    for d in log {
        w.write_record([
            d.iteration.to_string(),
            usize::from(d.phase == Phase::Phi).to_string(),
            format!("{:?}", d.reward_mean),
            format!("{:?}", d.reward_stderr),
            format!("{:?}", d.kl_term),
            format!("{:?}", d.consistency_loss),
            format!("{:?}", d.grad_norm),
            format!("{:?}", d.clip_fraction),
            d.buffer_len.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    X2Y,
    Y2X,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x2y" => Ok(Self::X2Y),
            "y2x" => Ok(Self::Y2X),
            _ => Err(Error::InvalidArgument(format!("direction must be x2y or y2x, got {s:?}"))),
        }
    }
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Self::X2Y => "x2y",
            Self::Y2X => "y2x",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranslateArgs {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub direction: Direction,
    pub guidance: Option<f64>,
    pub ddim_steps: Option<usize>,
    pub eta: Option<f64>,
    pub project: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

/// One generated row per input row. Conditional checkpoints condition on the
/// input; unconditional ones only use its row count.
pub fn cmd_translate(args: &TranslateArgs) -> Result<Tensor> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let mut sc = cfg.sample.clone();
    if let Some(g) = args.guidance {
        sc.guidance = g;
    }
    if let Some(n) = args.ddim_steps {
        sc.n_steps = n;
    }
    if let Some(e) = args.eta {
        sc.eta = e;
    }
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.to_model()?.ema_model()?;
    let input = load_csv(&args.input)?;
    let out_norm = read_normalizer(&ckpt, TAG_NORMALIZER)?;
    let mut r = rng::seeded(cfg.seed);
    let gen = if model.is_conditional() {
        match ckpt.tag(TAG_DIRECTION) {
            Some(d) if d == args.direction.tag() => {}
            found => {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint translates {}, not {}",
                    found.unwrap_or("in an unknown direction"),
                    args.direction.tag()
                )))
            }
        }
        let cond_dim = model.denoiser.cond_dim().expect("conditional");
        if input.dim() != cond_dim {
            return Err(Error::Dimension { what: "input columns".into(), expected: cond_dim, got: input.dim() });
        }
        let cond = normalize(&read_normalizer(&ckpt, TAG_COND_NORMALIZER)?, &input.points)?;
        diffusion::sample(&model, Some(&cond), cond.rows(), &sc, &mut r)?.0
    } else {
        diffusion::sample(&model, None, input.len(), &sc, &mut r)?.0
    };
    let mut out = denormalize(&out_norm, &gen)?;
    if let Some(p) = &args.project {
        let ds = load_csv(p)?;
        out = metrics::nn_project(&out, &ds.points)?.0;
    }
    write_points_csv(&args.out, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Foscttm,
    LabelTransfer,
    Celltype,
    Entropy,
    OracleGap,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foscttm" => Ok(Self::Foscttm),
            "label_transfer" => Ok(Self::LabelTransfer),
            "celltype" => Ok(Self::Celltype),
            "entropy" => Ok(Self::Entropy),
            "oracle_gap" => Ok(Self::OracleGap),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    /// foscttm / label_transfer / oracle_gap: source rows.
    pub source: Option<PathBuf>,
    /// foscttm / label_transfer / oracle_gap: target rows (row-aligned with source).
    pub target: Option<PathBuf>,
    /// celltype: generated rows with their true labels.
    pub generated: Option<PathBuf>,
    /// celltype: labeled reference rows.
    pub reference: Option<PathBuf>,
    /// Compare sublabel columns instead of label columns.
    pub sublabels: bool,
    /// entropy: directory written by `couple`.
    pub coupling: Option<PathBuf>,
    /// entropy: conditioning rows.
    pub cond: Option<PathBuf>,
    /// entropy: which model samples (theta samples X given Y).
    pub phase: Option<Phase>,
    /// oracle_gap: marginal datasets fixing the quantization and the oracle marginals.
    pub x_data: Option<PathBuf>,
    pub y_data: Option<PathBuf>,
    pub k: Option<usize>,
    pub k_mc: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

fn row(metric: &str, value: f64, stderr: f64, n: usize) -> MetricRow {
    MetricRow { metric: metric.into(), value, stderr, n }
}

fn need<'a, T>(v: &'a Option<T>, flag: &str, metric: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::InvalidArgument(format!("metric {metric} requires {flag}")))
}

fn labels_of(ds: &mecdiff::TabularDataset, sub: bool) -> Result<Vec<i64>> {
    let l = if sub { &ds.sublabels } else { &ds.labels };
    l.clone().ok_or_else(|| Error::Data(format!("{:?} has no {} column", ds.name, if sub { "sublabel" } else { "label" })))
}

/// Computes one metric and writes `metric,value,stderr,n` rows to `out` (if given).
pub fn cmd_evaluate(metric: Metric, args: &EvaluateArgs) -> Result<Vec<MetricRow>> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let k = args.k.unwrap_or(cfg.eval.k);
    let rows = match metric {
        Metric::Foscttm => {
            let s = load_csv(need(&args.source, "--source", "foscttm")?)?;
            let t = load_csv(need(&args.target, "--target", "foscttm")?)?;
            let corr: Vec<usize> = (0..s.len()).collect();
            let per = metrics::foscttm_per_point(&s.points, &t.points, &corr)?;
            let (m, se) = diffusion::mean_stderr(&per);
            vec![row("foscttm", m, se, s.len())]
        }
        Metric::LabelTransfer => {
            let s = load_csv(need(&args.source, "--source", "label_transfer")?)?;
            let t = load_csv(need(&args.target, "--target", "label_transfer")?)?;
            let acc = metrics::label_transfer_accuracy(
                &s.points,
                &labels_of(&s, args.sublabels)?,
                &t.points,
                &labels_of(&t, args.sublabels)?,
                k,
            )?;
            vec![row("label_transfer", acc, binomial_se(acc, t.len()), t.len())]
        }
        Metric::Celltype => {
            let g = load_csv(need(&args.generated, "--generated", "celltype")?)?;
            let rf = load_csv(need(&args.reference, "--reference", "celltype")?)?;
            let acc = metrics::neighborhood_type_accuracy(
                &g.points,
                &labels_of(&g, args.sublabels)?,
                &rf.points,
                &labels_of(&rf, args.sublabels)?,
                k,
            )?;
            let name = if args.sublabels { "subcelltype" } else { "celltype" };
            vec![row(name, acc, binomial_se(acc, g.len()), g.len())]
        }
        Metric::Entropy => {
            let dir = need(&args.coupling, "--coupling", "entropy")?;
            let cond_ds = load_csv(need(&args.cond, "--cond", "entropy")?)?;
            let phase = args.phase.unwrap_or(Phase::Theta);
            let load = |name: &str| -> Result<(DiffusionModel, Checkpoint)> {
                let c = Checkpoint::load(&dir.join(name))?;
                Ok((c.to_model()?.ema_model()?, c))
            };
            let (theta, tc) = load("theta.ckpt")?;
            let (phi, pc) = load("phi.ckpt")?;
            let (ta, _) = load("theta_anchor.ckpt")?;
            let (pa, _) = load("phi_anchor.ckpt")?;
            let pair = CouplingPair::new(theta, phi, ta, pa)?;
            let cond_norm = match phase {
                Phase::Theta => read_normalizer(&tc, TAG_COND_NORMALIZER)?,
                Phase::Phi => read_normalizer(&pc, TAG_COND_NORMALIZER)?,
            };
            let cond = normalize(&cond_norm, &cond_ds.points)?;
            let mut r = rng::seeded(args.seed.unwrap_or(cfg.seed));
            let e = metrics::estimate_coupling_entropy(&pair, phase, &cond, args.k_mc.unwrap_or(cfg.eval.k_mc), &cfg.sample, &mut r)?;
            vec![
                row("conditional_entropy", e.conditional, e.conditional_stderr, e.n),
                row("joint_entropy", e.joint, f64::NAN, e.n),
                row("mutual_information", e.mutual_information, e.mutual_information_stderr, e.n),
            ]
        }
        Metric::OracleGap => {
            let s = load_csv(need(&args.source, "--source", "oracle_gap")?)?;
            let t = load_csv(need(&args.target, "--target", "oracle_gap")?)?;
            let dx = load_csv(need(&args.x_data, "--x-data", "oracle_gap")?)?;
            let dy = load_csv(need(&args.y_data, "--y-data", "oracle_gap")?)?;
            let g = oracle_gap(&s.points, &t.points, &dx.points, &dy.points, &mut rng::seeded(args.seed.unwrap_or(cfg.seed)))?;
            vec![
                row("joint_entropy_quantized", g.estimate, f64::NAN, s.len()),
                row("oracle_entropy", g.oracle, f64::NAN, dx.len() + dy.len()),
                row("oracle_gap", g.estimate - g.oracle, f64::NAN, s.len()),
            ]
        }
    };
    if let Some(p) = &args.out {
        let mut w = csv::Writer::from_path(p)?;
        write_metric_rows(&mut w, &rows)?;
    }
    Ok(rows)
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n.max(1) as f64).sqrt()
}

pub fn write_metric_rows<W: std::io::Write>(w: &mut csv::Writer<W>, rows: &[MetricRow]) -> Result<()> {
    w.write_record(["metric", "value", "stderr", "n"])?;
    for r in rows {
        w.write_record([r.metric.clone(), format!("{:?}", r.value), format!("{:?}", r.stderr), r.n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGap {
    pub estimate: f64,
    pub oracle: f64,
}

/// Quantizes paired rows onto quadrants around each marginal dataset's
/// medians and compares the plug-in joint entropy with the minimum-entropy
/// coupling of the quantized data marginals.
pub fn oracle_gap(x_pairs: &Tensor, y_pairs: &Tensor, x_data: &Tensor, y_data: &Tensor, rng: &mut rng::Rng) -> Result<OracleGap> {
    let qx = QuadrantQuantizer::fit(x_data)?;
    let qy = QuadrantQuantizer::fit(y_data)?;
    let estimate = metrics::quantized_joint_entropy(x_pairs, &qx, y_pairs, &qy)?;
    let sol = metrics::discrete_mec_oracle(&qx.histogram(x_data), &qy.histogram(y_data), 1e-9, rng)?;
    Ok(OracleGap { estimate, oracle: sol.entropy })
}
