//! Forward noising, DDPM/DDIM reverse steps, classifier-free guidance, the
//! denoising loss and the Monte-Carlo negative log-likelihood estimator.
//!
//! Timesteps run `1..=T`; `ᾱ_0 = 1` denotes clean data.

use serde::{Deserialize, Serialize};

use crate::denoiser::{CondInput, Denoiser};
use crate::numkit::{adam_step, AdamState, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t` linear from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!("need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| if t_max == 1 { beta_min } else { beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64 })
            .collect();
        Ok(Self::from_betas_unchecked(betas, beta_min, beta_max))
    }

    /// Schedule from explicit `β_1..β_T`; entries may be 0 for degenerate tests.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("betas must be non-empty and in [0, 1)".into()));
        }
        let (lo, hi) = betas.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &b| (l.min(b), h.max(b)));
        Ok(Self::from_betas_unchecked(betas, lo, hi))
    }

    fn from_betas_unchecked(betas: Vec<f64>, beta_min: f64, beta_max: f64) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self { t_max: betas.len(), beta_min, beta_max, betas, alphas, alpha_bars }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.t_max)));
        }
        Ok(())
    }

    /// Per-step weight of `‖ε − ε̂‖²` in the likelihood bound.
    pub fn nll_weight(&self, t: usize, weighting: NllWeighting) -> f64 {
        match weighting {
            NllWeighting::Uniform => 0.5,
            NllWeighting::Vlb => {
                let b = self.beta(t);
                let denom = 2.0 * self.alpha(t) * (1.0 - self.alpha_bar(t));
                if denom > 0.0 {
                    b / denom
                } else {
                    0.0
                }
            }
        }
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    check_dim("noise", x0.len(), eps.len())?;
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Ancestral DDPM step: mean `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, variance `β_t`.
pub fn ddpm_reverse_step(x_t: &[f64], t: usize, eps_hat: &[f64], noise: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidArgument("reverse step from t = 0".into()));
    }
    schedule.check_t(t)?;
    check_dim("eps_hat", x_t.len(), eps_hat.len())?;
    check_dim("noise", x_t.len(), noise.len())?;
    let (b, a, ab) = (schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t));
    let c = if b == 0.0 { 0.0 } else { b / (1.0 - ab).sqrt() };
    let sa = a.sqrt();
    let sb = b.sqrt();
    Ok(x_t.iter().zip(eps_hat).zip(noise).map(|((x, e), n)| (x - c * e) / sa + sb * n).collect())
}

/// DDIM step coefficients: `x_prev = cx·x_t + ce·ε̂ + σ·noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoeffs {
    pub cx: f64,
    pub ce: f64,
    pub sigma: f64,
}

pub fn ddim_coeffs(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<DdimCoeffs> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta {eta} outside [0, 1]")));
    }
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    coeffs_from_alpha_bars(ab_t, ab_p, eta)
}

fn coeffs_from_alpha_bars(ab_t: f64, ab_p: f64, eta: f64) -> Result<DdimCoeffs> {
    if ab_p < ab_t {
        return Err(Error::InvalidArgument(format!("alpha_bar ordering violated: {ab_p} < {ab_t}")));
    }
    let sigma = if eta == 0.0 || ab_p >= 1.0 { 0.0 } else { eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt() };
    let cx = ab_p.sqrt() / ab_t.sqrt();
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let ce = dir - (1.0 - ab_t).sqrt() * cx;
    Ok(DdimCoeffs { cx, ce, sigma })
}

/// `x_{t_prev} = √ᾱ_prev·x̂0 + √(1−ᾱ_prev−σ²)·ε̂ + σ·noise` with
/// `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, written in the equivalent form
/// `cx·x_t + ce·ε̂ + σ·noise`.
pub fn ddim_step(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_hat: &[f64],
    eta: f64,
    noise: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dim("eps_hat", x_t.len(), eps_hat.len())?;
    check_dim("noise", x_t.len(), noise.len())?;
    let c = ddim_coeffs(schedule, t, t_prev, eta)?;
    Ok(apply_coeffs(x_t, eps_hat, noise, c))
}

/// Same step, given the two `ᾱ` values directly.
pub fn ddim_step_alpha_bars(x_t: &[f64], ab_t: f64, ab_prev: f64, eps_hat: &[f64], eta: f64, noise: &[f64]) -> Result<Vec<f64>> {
    let c = coeffs_from_alpha_bars(ab_t, ab_prev, eta)?;
    Ok(apply_coeffs(x_t, eps_hat, noise, c))
}

fn apply_coeffs(x_t: &[f64], eps: &[f64], noise: &[f64], c: DdimCoeffs) -> Vec<f64> {
    x_t.iter()
        .zip(eps)
        .zip(noise)
        .map(|((x, e), n)| {
            let mean = c.cx * x + c.ce * e;
            if c.sigma == 0.0 {
                mean
            } else {
                mean + c.sigma * n
            }
        })
        .collect()
}

/// `(1 − w)·ε_u + w·ε_c`, i.e. `ε_u + w·(ε_c − ε_u)` written so that `w = 0` and `w = 1` are exact.
pub fn cfg_noise(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Vec<f64> {
    eps_cond.iter().zip(eps_uncond).map(|(c, u)| (1.0 - w) * u + w * c).collect()
}

/// Strictly decreasing DDIM timesteps `t_1 > … > t_n` in `1..=T`; the step
/// after the last one lands on `t = 0`.
pub fn ddim_timesteps(t_max: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_max {
        return Err(Error::Config(format!("sampling steps {n_steps} must lie in 1..={t_max}")));
    }
    let mut ts: Vec<usize> = (0..n_steps).map(|i| ((i + 1) * t_max) / n_steps).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NllWeighting {
    /// Likelihood-bound weight `β_t / (2 α_t (1 − ᾱ_t))` per step.
    Vlb,
    /// Constant weight ½ per step.
    Uniform,
}

impl std::str::FromStr for NllWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vlb" => Ok(Self::Vlb),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::Config(format!("unknown NLL weighting {s:?} (vlb | uniform)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub record_trajectory: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_steps: 50, guidance: 7.0, eta: 1.0, record_trajectory: false, seed: 0 }
    }
}

/// One recorded reverse step for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub t_prev: usize,
    pub coeffs: DdimCoeffs,
    pub x_t: Tensor,
    pub mean: Tensor,
    /// `σ²` of the step; zero for deterministic steps.
    pub variance: f64,
    pub x_prev: Tensor,
}

/// Reverse trajectories of a batch, ordered from `t = T` towards 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub cond: Option<Tensor>,
    pub guidance: f64,
    pub steps: Vec<TrajectoryStep>,
    pub x0: Tensor,
}

impl TrajectoryBatch {
    pub fn batch_size(&self) -> usize {
        self.x0.rows()
    }

    pub fn stochastic_steps(&self) -> impl Iterator<Item = &TrajectoryStep> {
        self.steps.iter().filter(|s| s.variance > 0.0)
    }
}

/// Diffusion model: denoiser, schedule and an optional EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub ema: Option<ParamStore>,
    pub ema_decay: f64,
    pub step: u64,
}

impl DiffusionModel {
    pub fn new(denoiser: Denoiser, schedule: NoiseSchedule) -> Self {
        Self { denoiser, schedule, ema: None, ema_decay: 0.999, step: 0 }
    }

    pub fn with_ema(mut self, decay: f64) -> Self {
        self.ema = Some(self.denoiser.params().without_grads());
        self.ema_decay = decay;
        self
    }

    pub fn is_conditional(&self) -> bool {
        self.denoiser.is_conditional()
    }

    pub fn data_dim(&self) -> usize {
        self.denoiser.data_dim()
    }

    pub fn update_ema(&mut self) {
        if let Some(ema) = self.ema.as_mut() {
            ema.ema_update(self.denoiser.params(), self.ema_decay);
        }
    }

    /// Copy whose live parameters are the EMA shadow (if any).
    pub fn ema_model(&self) -> Result<Self> {
        let mut m = self.clone();
        if let Some(ema) = &self.ema {
            m.denoiser.set_params(ema.clone())?;
        }
        Ok(m)
    }

    /// Conditional model initialized from this unconditional one.
    pub fn to_conditional(&self, cond_dim: usize, rng: &mut Rng) -> Result<Self> {
        let den = self.denoiser.init_conditional_from_unconditional(cond_dim, rng)?;
        let mut m = Self::new(den, self.schedule.clone());
        m.ema_decay = self.ema_decay;
        if self.ema.is_some() {
            m = m.with_ema(self.ema_decay);
        }
        Ok(m)
    }

    pub fn predict(&self, x_t: &Tensor, t: &[usize], cond: CondInput<'_>) -> Result<Tensor> {
        self.denoiser.denoise(x_t, t, cond)
    }
}

/// Guided noise prediction recorded on a tape. Returns `(guided, conditional)`;
/// the conditional prediction is `None` when no condition is used.
pub fn guided_eps(
    tape: &mut Tape,
    model: &Denoiser,
    p: &[Var],
    x_t: Var,
    t: &[usize],
    cond: Option<&Tensor>,
    guidance: f64,
) -> Result<(Var, Option<Var>)> {
    match cond {
        None => Ok((model.forward(tape, p, x_t, t, CondInput::Null)?, None)),
        Some(c) => {
            if !model.is_conditional() {
                if guidance == 0.0 {
                    return Ok((model.forward(tape, p, x_t, t, CondInput::Null)?, None));
                }
                return Err(Error::InvalidArgument("guided sampling needs a conditional model".into()));
            }
            let ec = model.forward(tape, p, x_t, t, CondInput::Values(c))?;
            let eu = model.forward(tape, p, x_t, t, CondInput::Null)?;
            let a = tape.scale(eu, 1.0 - guidance);
            let b = tape.scale(ec, guidance);
            Ok((tape.add(a, b)?, Some(ec)))
        }
    }
}

/// Per-row DDIM mean `cx·x_t + ce·ε̂`; shared by the sampler and the policy
/// objective so recorded and recomputed means agree bit for bit.
pub fn ddim_mean(tape: &mut Tape, x_t: Var, eps: Var, cx: Vec<f64>, ce: Vec<f64>) -> Result<Var> {
    let a = tape.scale_rows(x_t, cx)?;
    let b = tape.scale_rows(eps, ce)?;
    tape.add(a, b)
}

/// Draws `n` samples (or one per condition row) by DDIM with guidance.
pub fn sample(
    model: &DiffusionModel,
    cond: Option<&Tensor>,
    n: usize,
    config: &SampleConfig,
    rng: &mut Rng,
) -> Result<(Tensor, Option<TrajectoryBatch>)> {
    let d = model.data_dim();
    let rows = match cond {
        Some(c) => {
            if let Some(cd) = model.denoiser.cond_dim() {
                check_dim("condition", cd, c.cols())?;
            }
            c.rows()
        }
        None => n,
    };
    if !(config.guidance >= 0.0) {
        return Err(Error::Config(format!("guidance must be >= 0, got {}", config.guidance)));
    }
    let ts = ddim_timesteps(model.schedule.t_max(), config.n_steps)?;
    let mut x = rng::normal_tensor(rng, rows, d);
    let mut steps = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let c = ddim_coeffs(&model.schedule, t, t_prev, config.eta)?;
        let mut tape = Tape::new();
        let p = model.denoiser.params().bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let tv = vec![t; rows];
        let (eps, _) = guided_eps(&mut tape, &model.denoiser, &p, xv, &tv, cond, config.guidance)?;
        let mv = ddim_mean(&mut tape, xv, eps, vec![c.cx; rows], vec![c.ce; rows])?;
        let mean = tape.value(mv).clone();
        let next = if c.sigma > 0.0 {
            let noise = rng::normal_vec(rng, rows * d);
            let data = mean.data().iter().zip(&noise).map(|(m, z)| m + c.sigma * z).collect();
            Tensor::matrix(rows, d, data)?
        } else {
            mean.clone()
        };
        if config.record_trajectory {
            steps.push(TrajectoryStep { t, t_prev, coeffs: c, x_t: x.clone(), mean, variance: c.sigma * c.sigma, x_prev: next.clone() });
        }
        x = next;
    }
    let traj = config.record_trajectory.then(|| TrajectoryBatch { cond: cond.cloned(), guidance: config.guidance, steps, x0: x.clone() });
    Ok((x, traj))
}

/// Draws per-row `(t, ε)` and the condition dropout mask for one loss batch.
pub struct LossDraws {
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub null_rows: Vec<bool>,
}

pub fn draw_loss_noise(schedule: &NoiseSchedule, rows: usize, d: usize, drop_prob: f64, rng: &mut Rng) -> LossDraws {
    let t = (0..rows).map(|_| rng::int_in(rng, 1, schedule.t_max())).collect();
    let eps = rng::normal_tensor(rng, rows, d);
    let null_rows = (0..rows).map(|_| rng::uniform(rng) < drop_prob).collect();
    LossDraws { t, eps, null_rows }
}

fn noised(schedule: &NoiseSchedule, x0: &Tensor, draws: &LossDraws) -> Result<Tensor> {
    let d = x0.cols();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.rows() {
        out.extend(forward_sample(x0.row(i), draws.t[i], draws.eps.row(i), schedule)?);
    }
    Tensor::matrix(x0.rows(), d, out)
}

/// Records `mean_i ‖ε_i − ε̂(x_t,i, [cond_i,] t_i)‖²` on `tape`.
pub fn denoising_loss_graph(
    tape: &mut Tape,
    model: &DiffusionModel,
    p: &[Var],
    x0: &Tensor,
    cond: Option<&Tensor>,
    draws: &LossDraws,
) -> Result<Var> {
    check_dim("data", model.data_dim(), x0.cols())?;
    let xt = noised(&model.schedule, x0, draws)?;
    let xv = tape.constant(xt);
    let cond_in = match cond {
        None => CondInput::Null,
        Some(c) => {
            if !model.is_conditional() {
                return Err(Error::InvalidArgument("conditional batch passed to an unconditional model".into()));
            }
            CondInput::Masked { values: c, null_rows: &draws.null_rows }
        }
    };
    let pred = model.denoiser.forward(tape, p, xv, &draws.t, cond_in)?;
    let target = tape.constant(draws.eps.clone());
    let diff = tape.sub(target, pred)?;
    let r = tape.row_sum_squares(diff);
    Ok(tape.mean(r))
}

/// Denoising loss value for one random draw of `(t, ε, dropout)`.
pub fn denoising_loss(model: &DiffusionModel, x0: &Tensor, cond: Option<&Tensor>, drop_prob: f64, rng: &mut Rng) -> Result<f64> {
    let draws = draw_loss_noise(&model.schedule, x0.rows(), model.data_dim(), drop_prob, rng);
    let mut tape = Tape::new();
    let p = model.denoiser.params().bind(&mut tape, false);
    let l = denoising_loss_graph(&mut tape, model, &p, x0, cond, &draws)?;
    Ok(tape.value(l).item())
}

/// Same loss with an arbitrary noise predictor (used with analytic oracles).
pub fn denoising_loss_with<F>(predict: F, schedule: &NoiseSchedule, x0: &Tensor, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&Tensor, &[usize]) -> Result<Tensor>,
{
    let draws = draw_loss_noise(schedule, x0.rows(), x0.cols(), 0.0, rng);
    let xt = noised(schedule, x0, &draws)?;
    let pred = predict(&xt, &draws.t)?;
    let sq = crate::numkit::row_sum_squares(
        &draws.eps.data().iter().zip(pred.data()).map(|(e, p)| e - p).collect::<Vec<_>>(),
        x0.rows(),
        x0.cols(),
    );
    Ok(sq.iter().sum::<f64>() / x0.rows() as f64)
}

/// One optimizer step on the denoising loss. Returns `(loss, grad norm)`.
pub fn train_step(
    model: &mut DiffusionModel,
    opt: &mut AdamState,
    x0: &Tensor,
    cond: Option<&Tensor>,
    drop_prob: f64,
    grad_clip: Option<f64>,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let draws = draw_loss_noise(&model.schedule, x0.rows(), model.data_dim(), drop_prob, rng);
    let mut tape = Tape::new();
    let p = model.denoiser.params().bind(&mut tape, true);
    let l = denoising_loss_graph(&mut tape, model, &p, x0, cond, &draws)?;
    let loss = tape.value(l).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("denoising loss {loss}")));
    }
    let g = tape.backward(l)?;
    let params = model.denoiser.params_mut();
    params.zero_grad();
    params.accumulate(&p, &g, 1.0);
    let norm = match grad_clip {
        Some(c) => params.clip_grad_norm(c),
        None => params.clip_grad_norm(f64::INFINITY),
    };
    adam_step(params, opt)?;
    model.step += 1;
    model.update_ema();
    Ok((loss, norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 128, lr: 1e-3, grad_clip: 1.0 }
    }
}

/// Unconditional training on minibatches drawn with replacement from `data`.
/// `on_step` receives `(step, loss)`; a non-finite loss aborts with the step number.
pub fn pretrain(
    model: &mut DiffusionModel,
    data: &Tensor,
    cfg: &PretrainConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<AdamState> {
    let mut opt = AdamState::with_lr(model.denoiser.params(), cfg.lr)?;
    if cfg.steps == 0 {
        return Ok(opt);
    }
    if data.rows() == 0 {
        return Err(Error::Data("training data is empty".into()));
    }
    check_dim("data", model.data_dim(), data.cols())?;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng::int_in(rng, 0, data.rows() - 1)).collect();
        let batch = crate::data::select_rows(data, &idx);
        let loss = match train_step(model, &mut opt, &batch, None, 0.0, Some(cfg.grad_clip), rng) {
            Err(Error::NonFinite(m)) => return Err(Error::NonFinite(format!("step {step}: {m}"))),
            r => r?.0,
        };
        model.denoiser.params_mut().clear_grads();
        on_step(step, loss);
    }
    Ok(opt)
}

/// Options for [`estimate_nll`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllOptions {
    pub k: usize,
    pub weighting: NllWeighting,
    /// Draw `t` from `k` equal strata instead of i.i.d. uniform.
    pub stratified: bool,
    /// Share the `(t, ε)` draws across all rows of the batch.
    pub common_noise: bool,
}

impl NllOptions {
    pub fn new(k: usize) -> Self {
        Self { k, weighting: NllWeighting::Vlb, stratified: false, common_noise: false }
    }
}

struct NllDraws {
    t: Vec<usize>,
    eps: Vec<f64>,
}

fn draw_nll(schedule: &NoiseSchedule, rows: usize, d: usize, opts: &NllOptions, rng: &mut Rng) -> NllDraws {
    let tm = schedule.t_max();
    let draw_t = |rng: &mut Rng, k: usize| -> usize {
        if opts.stratified {
            let lo = 1 + (k * tm) / opts.k;
            let hi = (((k + 1) * tm) / opts.k).max(lo);
            rng::int_in(rng, lo, hi)
        } else {
            rng::int_in(rng, 1, tm)
        }
    };
    let mut t = Vec::with_capacity(rows * opts.k);
    let mut eps = Vec::with_capacity(rows * opts.k * d);
    if opts.common_noise {
        let ts: Vec<usize> = (0..opts.k).map(|k| draw_t(rng, k)).collect();
        let es = rng::normal_vec(rng, opts.k * d);
        for _ in 0..rows {
            t.extend_from_slice(&ts);
            eps.extend_from_slice(&es);
        }
    } else {
        for _ in 0..rows {
            for k in 0..opts.k {
                t.push(draw_t(rng, k));
            }
            eps.extend(rng::normal_vec(rng, opts.k * d));
        }
    }
    NllDraws { t, eps }
}

/// Per-row Monte-Carlo estimate of `−log p(x0 [| cond])` up to a constant
/// shared by all inputs and models: `(T/K)·Σ_k w(t_k)·‖ε_k − ε̂(x_{t_k}, t_k)‖²`.
pub fn estimate_nll_with<F>(
    predict: F,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: Option<&Tensor>,
    opts: &NllOptions,
    rng: &mut Rng,
) -> Result<Vec<f64>>
where
    F: Fn(&Tensor, &[usize], Option<&Tensor>) -> Result<Tensor>,
{
    if opts.k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let (n, d) = (x0.rows(), x0.cols());
    if let Some(c) = cond {
        check_dim("condition rows", n, c.rows())?;
    }
    let draws = draw_nll(schedule, n, d, opts, rng);
    let rows = n * opts.k;
    let mut xt = Vec::with_capacity(rows * d);
    for i in 0..n {
        for k in 0..opts.k {
            let r = i * opts.k + k;
            xt.extend(forward_sample(x0.row(i), draws.t[r], &draws.eps[r * d..(r + 1) * d], schedule)?);
        }
    }
    let xt = Tensor::matrix(rows, d, xt)?;
    let cond_rep = match cond {
        Some(c) => {
            let cd = c.cols();
            let mut v = Vec::with_capacity(rows * cd);
            for i in 0..n {
                for _ in 0..opts.k {
                    v.extend_from_slice(c.row(i));
                }
            }
            Some(Tensor::matrix(rows, cd, v)?)
        }
        None => None,
    };
    let pred = predict(&xt, &draws.t, cond_rep.as_ref())?;
    let scale = schedule.t_max() as f64 / opts.k as f64;
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..opts.k {
            let r = i * opts.k + k;
            let w = schedule.nll_weight(draws.t[r], opts.weighting);
            let sq: f64 = (0..d).map(|j| (draws.eps[r * d + j] - pred.data()[r * d + j]).powi(2)).sum();
            acc += w * sq;
        }
        *o = scale * acc;
    }
    Ok(out)
}

/// [`estimate_nll_with`] using the model's denoiser (conditional when `cond` is given).
pub fn estimate_nll(model: &DiffusionModel, x0: &Tensor, cond: Option<&Tensor>, opts: &NllOptions, rng: &mut Rng) -> Result<Vec<f64>> {
    check_dim("data", model.data_dim(), x0.cols())?;
    if cond.is_some() && !model.is_conditional() {
        return Err(Error::InvalidArgument("condition passed to an unconditional model".into()));
    }
    estimate_nll_with(
        |xt, t, c| match c {
            Some(c) => model.predict(xt, t, CondInput::Values(c)),
            None => model.predict(xt, t, CondInput::Null),
        },
        &model.schedule,
        x0,
        cond,
        opts,
        rng,
    )
}

/// Mean and standard error of a sample.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn standard() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::linear(1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
        let c = 0.01;
        let s = NoiseSchedule::linear(20, c, c).unwrap();
        for t in 1..=20 {
            assert!((s.alpha_bar(t) - (1.0 - c).powi(t as i32)).abs() < 1e-15);
        }
        let s = standard();
        // regression constant: product of (1 − β_t) for the standard linear schedule
        assert!((s.alpha_bar(1000) - 4.035829765375676e-05).abs() < 1e-18);
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants_hold_exactly() {
        let s = standard();
        let mut prev = 1.0;
        for t in 1..=s.t_max() {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert_eq!(s.alpha_bar(t), prev * s.alpha(t));
            assert!(s.alpha_bar(t) < prev);
            prev = s.alpha_bar(t);
        }
    }

    #[test]
    fn forward_sample_examples() {
        let s = standard();
        let x0 = [1.5, -2.0];
        let xt = forward_sample(&x0, 300, &[0.0, 0.0], &s).unwrap();
        let a = s.alpha_bar(300).sqrt();
        assert_eq!(xt, vec![a * 1.5, a * -2.0]);
        assert_eq!(forward_sample(&x0, 0, &[0.7, 0.1], &s).unwrap(), x0.to_vec());
        assert!(forward_sample(&x0, 1001, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn ddpm_step_examples() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.1]).unwrap();
        let out = ddpm_reverse_step(&[0.3, -1.0], 1, &[5.0, 2.0], &[0.4, 0.4], &s).unwrap();
        assert_eq!(out, vec![0.3, -1.0]);
        let s = standard();
        let t = 400;
        let out = ddpm_reverse_step(&[2.0], t, &[0.0], &[0.5], &s).unwrap();
        let expected = 2.0 / s.alpha(t).sqrt() + s.beta(t).sqrt() * 0.5;
        assert!((out[0] - expected).abs() < 1e-14);
        assert!(ddpm_reverse_step(&[1.0], 0, &[0.0], &[0.0], &s).is_err());
    }

    #[test]
    fn ddpm_step_hand_calculation() {
        // α_t = 0.99, ᾱ_t = 0.5: build a two-step schedule with those values.
        let b2 = 0.01;
        let b1 = 1.0 - 0.5 / 0.99;
        let s = NoiseSchedule::from_betas(vec![b1, b2]).unwrap();
        assert!((s.alpha_bar(2) - 0.5).abs() < 1e-15);
        let out = ddpm_reverse_step(&[1.0], 2, &[0.2], &[0.0], &s).unwrap();
        let hand = (1.0 - (0.01 / 0.5f64.sqrt()) * 0.2) / 0.99f64.sqrt();
        assert!((out[0] - hand).abs() < 1e-14, "{} vs {hand}", out[0]);
    }

    #[test]
    fn ddim_step_examples() {
        let s = standard();
        let x = [0.4, -1.1];
        let e = [0.3, 0.2];
        let a = ddim_step(&x, 500, 400, &e, 0.0, &[9.0, 9.0], &s).unwrap();
        let b = ddim_step(&x, 500, 400, &e, 0.0, &[-3.0, 1.0], &s).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        let same = ddim_step_alpha_bars(&x, 0.3, 0.3, &e, 0.0, &[1.0, 1.0]).unwrap();
        assert_eq!(same, x.to_vec());
        assert!(ddim_step_alpha_bars(&x, 0.3, 0.2, &e, 0.0, &[0.0, 0.0]).is_err());
        assert!(ddim_step(&x, 400, 500, &e, 0.0, &[0.0, 0.0], &s).is_err());
        // reference form of the update
        let (abt, abp) = (s.alpha_bar(500), s.alpha_bar(400));
        let eta = 0.6;
        let sigma = eta * ((1.0 - abp) / (1.0 - abt)).sqrt() * (1.0 - abt / abp).sqrt();
        let n = [0.5, -0.25];
        let got = ddim_step(&x, 500, 400, &e, eta, &n, &s).unwrap();
        for j in 0..2 {
            let x0h = (x[j] - (1.0 - abt).sqrt() * e[j]) / abt.sqrt();
            let r = abp.sqrt() * x0h + (1.0 - abp - sigma * sigma).sqrt() * e[j] + sigma * n[j];
            assert!((got[j] - r).abs() < 1e-13);
        }
    }

    #[test]
    fn cfg_examples() {
        let c = [1.0, 0.0];
        let u = [0.0, 1.0];
        assert_eq!(cfg_noise(&c, &u, 0.0), u.to_vec());
        assert_eq!(cfg_noise(&c, &u, 1.0), c.to_vec());
        assert_eq!(cfg_noise(&c, &u, 7.0), vec![7.0, -6.0]);
    }

    #[test]
    fn ddim_timesteps_strictly_decrease() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_timesteps(7, 7).unwrap(), vec![7, 6, 5, 4, 3, 2, 1]);
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn oracle_denoiser_gives_zero_loss_and_nll() {
        let s = standard();
        let mut r = rng::seeded(7);
        let x0 = rng::normal_tensor(&mut r, 6, 3);
        // knows x0 row-for-row, so it can recover the noise exactly (up to rounding)
        let oracle = |xt: &Tensor, t: &[usize], rep: usize| -> Result<Tensor> {
            let mut out = Vec::new();
            for (i, &ti) in t.iter().enumerate() {
                let ab = s.alpha_bar(ti);
                for j in 0..3 {
                    out.push((xt.row(i)[j] - ab.sqrt() * x0.row(i / rep)[j]) / (1.0 - ab).sqrt());
                }
            }
            Tensor::matrix(t.len(), 3, out)
        };
        let loss = denoising_loss_with(|xt, t| oracle(xt, t, 1), &s, &x0, &mut r).unwrap();
        assert!(loss < 1e-20, "{loss}");
        let k = 4;
        let nll = estimate_nll_with(|xt, t, _| oracle(xt, t, k), &s, &x0, None, &NllOptions::new(k), &mut r).unwrap();
        assert!(nll.iter().all(|v| v.abs() < 1e-12), "{nll:?}");
    }

    #[test]
    fn zero_denoiser_loss_expectation_is_dim() {
        let s = standard();
        let mut r = rng::seeded(8);
        let d = 3;
        let x0 = rng::normal_tensor(&mut r, 10_000, d);
        let zero = |xt: &Tensor, _: &[usize]| Ok(Tensor::zeros(vec![xt.rows(), xt.cols()]));
        // per-row ‖ε‖² has variance 2d
        let loss = denoising_loss_with(zero, &s, &x0, &mut r).unwrap();
        let se = (2.0 * d as f64 / 10_000.0).sqrt();
        assert!((loss - d as f64).abs() < 3.0 * se, "{loss}");
    }

    #[test]
    fn zero_denoiser_nll_expectation() {
        let s = standard();
        let mut r = rng::seeded(9);
        let d = 2;
        let x0 = rng::normal_tensor(&mut r, 1, d);
        let zero = |xt: &Tensor, _: &[usize], _: Option<&Tensor>| Ok(Tensor::zeros(vec![xt.rows(), xt.cols()]));
        let k = 1000;
        // uniform weighting: E = T·d/2
        let reps: Vec<f64> = (0..20)
            .map(|_| {
                let mut o = NllOptions::new(k);
                o.weighting = NllWeighting::Uniform;
                estimate_nll_with(zero, &s, &x0, None, &o, &mut r).unwrap()[0]
            })
            .collect();
        let (m, se) = mean_stderr(&reps);
        let expect = 1000.0 * d as f64 / 2.0;
        assert!((m - expect).abs() < 3.0 * se.max(1e-9), "{m} vs {expect} ± {se}");
        // likelihood-bound weighting: E = d·Σ_t w_t
        let expect: f64 = d as f64 * (1..=1000).map(|t| s.nll_weight(t, NllWeighting::Vlb)).sum::<f64>();
        let reps: Vec<f64> = (0..40).map(|_| estimate_nll_with(zero, &s, &x0, None, &NllOptions::new(k), &mut r).unwrap()[0]).collect();
        let (m, se) = mean_stderr(&reps);
        assert!((m - expect).abs() < 3.0 * se, "{m} vs {expect} ± {se}");
    }

    #[test]
    fn common_noise_shares_draws() {
        let s = standard();
        let mut r = rng::seeded(10);
        let x0 = Tensor::matrix(3, 1, vec![0.5, 0.5, 0.5]).unwrap();
        let f = |xt: &Tensor, _: &[usize], _: Option<&Tensor>| Ok(xt.clone());
        let mut o = NllOptions::new(3);
        o.common_noise = true;
        let v = estimate_nll_with(f, &s, &x0, None, &o, &mut r).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[1], v[2]);
        o.common_noise = false;
        let v = estimate_nll_with(f, &s, &x0, None, &o, &mut r).unwrap();
        assert_ne!(v[0], v[1]);
    }

    fn tiny_model(seed: u64, d: usize) -> DiffusionModel {
        let mut r = rng::seeded(seed);
        let cfg = DenoiserConfig { data_dim: d, cond_dim: None, hidden_dims: vec![8], time_embed_dim: 4, cond_drop_prob: 0.1 };
        DiffusionModel::new(Denoiser::new_unconditional(cfg, &mut r).unwrap(), NoiseSchedule::linear(100, 1e-4, 0.02).unwrap())
    }

    #[test]
    fn sampling_is_seed_deterministic_and_records_trajectories() {
        let m = tiny_model(11, 2);
        let cfg = SampleConfig { n_steps: 10, guidance: 0.0, eta: 1.0, record_trajectory: true, seed: 0 };
        let (a, ta) = sample(&m, None, 5, &cfg, &mut rng::seeded(3)).unwrap();
        let (b, _) = sample(&m, None, 5, &cfg, &mut rng::seeded(3)).unwrap();
        assert!(a.bitwise_eq(&b));
        let ta = ta.unwrap();
        assert_eq!(ta.steps.len(), 10);
        assert!(ta.steps.windows(2).all(|w| w[0].t > w[1].t));
        assert_eq!(ta.steps.last().unwrap().t_prev, 0);
        assert_eq!(ta.steps.last().unwrap().variance, 0.0);
        assert!(ta.steps[..9].iter().all(|s| s.variance > 0.0));
        for w in ta.steps.windows(2) {
            assert!(w[0].x_prev.bitwise_eq(&w[1].x_t));
        }
    }

    #[test]
    fn guidance_zero_on_fresh_conditional_matches_anchor() {
        let anchor = tiny_model(12, 2);
        let cond = anchor.to_conditional(3, &mut rng::seeded(1)).unwrap();
        let y = rng::normal_tensor(&mut rng::seeded(2), 4, 3);
        let cfg = SampleConfig { n_steps: 8, guidance: 0.0, eta: 0.5, record_trajectory: false, seed: 0 };
        let (a, _) = sample(&anchor, None, 4, &cfg, &mut rng::seeded(5)).unwrap();
        let (b, _) = sample(&cond, Some(&y), 4, &cfg, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        // at w = 1 the guided prediction is the conditional one, which is also neutral at init
        let cfg1 = SampleConfig { guidance: 1.0, ..cfg };
        let (c, _) = sample(&cond, Some(&y), 4, &cfg1, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn conditional_loss_equals_unconditional_at_init() {
        let anchor = tiny_model(13, 2);
        let cond = anchor.to_conditional(2, &mut rng::seeded(1)).unwrap();
        let x = rng::normal_tensor(&mut rng::seeded(2), 16, 2);
        let y = rng::normal_tensor(&mut rng::seeded(3), 16, 2);
        let a = denoising_loss(&anchor, &x, None, 0.1, &mut rng::seeded(4)).unwrap();
        let b = denoising_loss(&cond, &x, Some(&y), 0.1, &mut rng::seeded(4)).unwrap();
        assert_eq!(a, b);
        assert!(denoising_loss(&anchor, &x, Some(&y), 0.1, &mut rng::seeded(4)).is_err());
    }

    #[test]
    fn full_dropout_ignores_condition_contents() {
        let anchor = tiny_model(14, 2);
        let mut cond = anchor.to_conditional(2, &mut rng::seeded(1)).unwrap();
        for t in cond.denoiser.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.01);
        }
        let x = rng::normal_tensor(&mut rng::seeded(2), 8, 2);
        let y1 = rng::normal_tensor(&mut rng::seeded(3), 8, 2);
        let y2 = rng::normal_tensor(&mut rng::seeded(4), 8, 2);
        let a = denoising_loss(&cond, &x, Some(&y1), 1.0, &mut rng::seeded(5)).unwrap();
        let b = denoising_loss(&cond, &x, Some(&y2), 1.0, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        let c = denoising_loss(&cond, &x, Some(&y2), 0.0, &mut rng::seeded(5)).unwrap();
        assert_ne!(a, c);
    }
}
