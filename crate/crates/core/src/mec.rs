//! Cooperative fine-tuning of two conditional diffusion models towards a
//! minimum entropy coupling.
//!
//! Each iteration runs two phases. In the `Theta` phase the model of `X | Y`
//! samples `x` for observed `y`, the model of `Y | X` scores `y` given `x`,
//! and that score drives a clipped policy-gradient step on the sampler plus a
//! KL-anchor penalty towards its pretrained marginal. The scorer is then
//! trained on the generated pairs. The `Phi` phase swaps the roles.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::denoiser::CondInput;
use crate::diffusion::{self, ddim_mean, guided_eps, DiffusionModel, NllOptions, NllWeighting, SampleConfig, TrajectoryBatch};
use crate::numkit::{adam_step, AdamState, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Raw rewards are used as advantages.
    None,
    /// Exponential running mean of past batch means, seeded by the first batch.
    RunningMean,
    /// Mean of the current batch.
    BatchMean,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "running_mean" => Ok(Self::RunningMean),
            "batch_mean" => Ok(Self::BatchMean),
            _ => Err(Error::Config(format!("unknown baseline {s:?} (none | running_mean | batch_mean)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RLConfig {
    /// KL-anchor weight for the model of `X | Y`.
    pub lambda_x: f64,
    /// KL-anchor weight for the model of `Y | X`.
    pub lambda_y: f64,
    /// Monte-Carlo timestep draws per reward.
    pub k_reward: usize,
    /// Policy-gradient steps per phase.
    pub policy_updates: usize,
    /// Half-width of the importance-ratio clip interval.
    pub ratio_clip: f64,
    /// Micro-batches of `batch_size` trajectories per policy step.
    pub grad_accum: usize,
    pub grad_clip: f64,
    pub guidance_train: f64,
    pub buffer_capacity: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub consistency_lr: f64,
    /// Denoising steps on generated pairs per phase.
    pub consistency_updates: usize,
    pub cond_drop_prob: f64,
    pub ddim_steps: usize,
    pub eta_train: f64,
    pub baseline: BaselineMode,
    pub baseline_momentum: f64,
    pub nll_weighting: NllWeighting,
    /// Share reward noise draws across the batch.
    pub common_reward_noise: bool,
}

impl Default for RLConfig {
    fn default() -> Self {
        Self {
            lambda_x: 1e-3,
            lambda_y: 1e-3,
            k_reward: 3,
            policy_updates: 4,
            ratio_clip: 1e-4,
            grad_accum: 12,
            grad_clip: 1.0,
            guidance_train: 7.0,
            buffer_capacity: 800,
            total_steps: 2000,
            batch_size: 16,
            lr: 2e-5,
            consistency_lr: 2e-5,
            consistency_updates: 4,
            cond_drop_prob: 0.1,
            ddim_steps: 50,
            eta_train: 1.0,
            baseline: BaselineMode::RunningMean,
            baseline_momentum: 0.9,
            nll_weighting: NllWeighting::Vlb,
            common_reward_noise: true,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_x >= 0.0 && self.lambda_y >= 0.0) {
            return bad("KL weights must be >= 0");
        }
        if self.policy_updates == 0 {
            return bad("policy_updates must be >= 1");
        }
        if !(self.ratio_clip > 0.0) {
            return bad("ratio_clip must be > 0");
        }
        if self.k_reward == 0 || self.grad_accum == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("k_reward, grad_accum, batch_size and buffer_capacity must be >= 1");
        }
        if !(self.grad_clip > 0.0) || !(self.lr > 0.0) || !(self.consistency_lr > 0.0) {
            return bad("grad_clip and learning rates must be > 0");
        }
        if !(self.guidance_train >= 0.0) {
            return bad("guidance_train must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) || !(0.0..=1.0).contains(&self.eta_train) {
            return bad("cond_drop_prob and eta_train must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return bad("baseline_momentum must lie in [0, 1)");
        }
        if self.ddim_steps == 0 {
            return bad("ddim_steps must be >= 1");
        }
        Ok(())
    }
}

/// Which model samples in a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// `X | Y` samples, `Y | X` scores.
    Theta,
    /// `Y | X` samples, `X | Y` scores.
    Phi,
}

impl Phase {
    pub fn other(self) -> Self {
        match self {
            Self::Theta => Self::Phi,
            Self::Phi => Self::Theta,
        }
    }

    fn index(self) -> usize {
        match self {
            Self::Theta => 0,
            Self::Phi => 1,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Theta => "theta",
            Self::Phi => "phi",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(Self::Theta),
            "phi" => Ok(Self::Phi),
            _ => Err(Error::InvalidArgument(format!("phase must be theta or phi, got {s:?}"))),
        }
    }
}

/// The two conditional models and their frozen unconditional anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPair {
    /// Model of `X | Y`.
    pub theta: DiffusionModel,
    /// Model of `Y | X`.
    pub phi: DiffusionModel,
    pub theta_anchor: DiffusionModel,
    pub phi_anchor: DiffusionModel,
}

impl CouplingPair {
    /// Conditional models initialized from pretrained unconditional ones.
    pub fn from_anchors(theta_anchor: DiffusionModel, phi_anchor: DiffusionModel, rng: &mut Rng) -> Result<Self> {
        if theta_anchor.is_conditional() || phi_anchor.is_conditional() {
            return Err(Error::InvalidArgument("anchors must be unconditional".into()));
        }
        let theta = theta_anchor.to_conditional(phi_anchor.data_dim(), rng)?;
        let phi = phi_anchor.to_conditional(theta_anchor.data_dim(), rng)?;
        Ok(Self { theta, phi, theta_anchor, phi_anchor })
    }

    pub fn new(theta: DiffusionModel, phi: DiffusionModel, theta_anchor: DiffusionModel, phi_anchor: DiffusionModel) -> Result<Self> {
        let (dx, dy) = (theta_anchor.data_dim(), phi_anchor.data_dim());
        check_dim("theta data", dx, theta.data_dim())?;
        check_dim("phi data", dy, phi.data_dim())?;
        check_dim("theta condition", dy, theta.denoiser.cond_dim().unwrap_or(0))?;
        check_dim("phi condition", dx, phi.denoiser.cond_dim().unwrap_or(0))?;
        Ok(Self { theta, phi, theta_anchor, phi_anchor })
    }

    pub fn dim_x(&self) -> usize {
        self.theta.data_dim()
    }

    pub fn dim_y(&self) -> usize {
        self.phi.data_dim()
    }

    /// `(sampler, scorer, sampler's anchor)` for a phase.
    pub fn roles(&self, phase: Phase) -> (&DiffusionModel, &DiffusionModel, &DiffusionModel) {
        match phase {
            Phase::Theta => (&self.theta, &self.phi, &self.theta_anchor),
            Phase::Phi => (&self.phi, &self.theta, &self.phi_anchor),
        }
    }

    pub fn model(&self, phase: Phase) -> &DiffusionModel {
        match phase {
            Phase::Theta => &self.theta,
            Phase::Phi => &self.phi,
        }
    }

    pub fn model_mut(&mut self, phase: Phase) -> &mut DiffusionModel {
        match phase {
            Phase::Theta => &mut self.theta,
            Phase::Phi => &mut self.phi,
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        [
            (&self.theta, &other.theta),
            (&self.phi, &other.phi),
            (&self.theta_anchor, &other.theta_anchor),
            (&self.phi_anchor, &other.phi_anchor),
        ]
        .iter()
        .all(|(a, b)| a.denoiser.params().bitwise_eq(b.denoiser.params()))
    }
}

/// FIFO store of `(generated, observed)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, generated: Vec<f64>, observed: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((generated, observed));
    }

    pub fn push_batch(&mut self, generated: &Tensor, observed: &Tensor) -> Result<()> {
        check_dim("pair rows", generated.rows(), observed.rows())?;
        for i in 0..generated.rows() {
            self.push(generated.row(i).to_vec(), observed.row(i).to_vec());
        }
        Ok(())
    }

    /// Oldest-first view of the stored pairs.
    pub fn iter(&self) -> impl Iterator<Item = &(Vec<f64>, Vec<f64>)> {
        self.items.iter()
    }

    /// `n` pairs drawn uniformly with replacement as `(generated, observed)`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let idx: Vec<usize> = (0..n).map(|_| rng::int_in(rng, 0, self.items.len() - 1)).collect();
        Ok(self.gather(&idx))
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (dg, do_) = (self.items[0].0.len(), self.items[0].1.len());
        let mut g = Vec::with_capacity(idx.len() * dg);
        let mut o = Vec::with_capacity(idx.len() * do_);
        for &i in idx {
            g.extend_from_slice(&self.items[i].0);
            o.extend_from_slice(&self.items[i].1);
        }
        (Tensor::matrix(idx.len(), dg, g).expect("rows"), Tensor::matrix(idx.len(), do_, o).expect("rows"))
    }
}

/// Rewards of one batch of trajectories and the advantages derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardRecord {
    /// Conditional NLL estimates in nats (higher is worse).
    pub raw: Vec<f64>,
    pub baseline: f64,
    pub advantages: Vec<f64>,
}

impl RewardRecord {
    /// Advantages `raw − baseline`; `state` carries the running mean between calls.
    pub fn new(raw: Vec<f64>, mode: BaselineMode, momentum: f64, state: &mut Option<f64>) -> Self {
        let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
        let baseline = match mode {
            BaselineMode::None => 0.0,
            BaselineMode::BatchMean => mean,
            BaselineMode::RunningMean => {
                let b = state.unwrap_or(mean);
                *state = Some(momentum * b + (1.0 - momentum) * mean);
                b
            }
        };
        let advantages = raw.iter().map(|r| r - baseline).collect();
        Self { raw, baseline, advantages }
    }

    pub fn mean(&self) -> f64 {
        diffusion::mean_stderr(&self.raw).0
    }
}

/// Conditional NLL of `observed` given `generated` under `scorer`, one value per row.
pub fn reward(
    scorer: &DiffusionModel,
    observed: &Tensor,
    generated: &Tensor,
    k: usize,
    weighting: NllWeighting,
    common_noise: bool,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_dim("reward target", scorer.data_dim(), observed.cols())?;
    match scorer.denoiser.cond_dim() {
        Some(cd) => check_dim("reward condition", cd, generated.cols())?,
        None => return Err(Error::InvalidArgument("scorer must be conditional".into())),
    }
    let opts = NllOptions { k, weighting, stratified: false, common_noise };
    diffusion::estimate_nll(scorer, observed, Some(generated), &opts, rng)
}

/// Stochastic steps of a trajectory batch stacked into one set of rows,
/// step-major, together with the quantities the policy objective needs.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub n_traj: usize,
    pub n_steps: usize,
    pub x_t: Tensor,
    pub x_prev: Tensor,
    pub t: Vec<usize>,
    pub cond: Option<Tensor>,
    pub cx: Vec<f64>,
    pub ce: Vec<f64>,
    pub variance: Vec<f64>,
    pub guidance: f64,
    /// `−‖x_prev − μ_recorded‖² / 2σ²` per row.
    pub logp_old: Vec<f64>,
    /// Anchor prediction at each row, unconditional.
    pub anchor_eps: Option<Tensor>,
}

fn stack(ts: &[&Tensor]) -> Tensor {
    let cols = ts[0].cols();
    let rows = ts.iter().map(|t| t.rows()).sum();
    let mut v = Vec::with_capacity(rows * cols);
    ts.iter().for_each(|t| v.extend_from_slice(t.data()));
    Tensor::matrix(rows, cols, v).expect("stacked rows")
}

/// Per-row `−‖x_prev − μ‖² / 2σ²` recorded on `tape`.
fn logp_part(tape: &mut Tape, x_prev: Var, mean: Var, variance: &[f64]) -> Result<Var> {
    let diff = tape.sub(x_prev, mean)?;
    let r = tape.row_sum_squares(diff);
    tape.scale_rows(r, variance.iter().map(|v| -0.5 / v).collect())
}

impl PolicyBatch {
    pub fn from_trajectory(traj: &TrajectoryBatch, anchor: Option<&DiffusionModel>) -> Result<Self> {
        let steps: Vec<_> = traj.stochastic_steps().collect();
        if steps.is_empty() {
            return Err(Error::InvalidArgument("trajectory has no stochastic steps".into()));
        }
        let n = traj.batch_size();
        let s = steps.len();
        let x_t = stack(&steps.iter().map(|st| &st.x_t).collect::<Vec<_>>());
        let x_prev = stack(&steps.iter().map(|st| &st.x_prev).collect::<Vec<_>>());
        let mean = stack(&steps.iter().map(|st| &st.mean).collect::<Vec<_>>());
        let rep = |f: &dyn Fn(&diffusion::TrajectoryStep) -> f64| -> Vec<f64> {
            steps.iter().flat_map(|st| std::iter::repeat_n(f(st), n)).collect()
        };
        let t: Vec<usize> = steps.iter().flat_map(|st| std::iter::repeat_n(st.t, n)).collect();
        let cx = rep(&|st| st.coeffs.cx);
        let ce = rep(&|st| st.coeffs.ce);
        let variance = rep(&|st| st.variance);
        let cond = traj.cond.as_ref().map(|c| stack(&vec![c; s]));
        let mut tape = Tape::new();
        let xp = tape.constant(x_prev.clone());
        let mu = tape.constant(mean);
        let lp = logp_part(&mut tape, xp, mu, &variance)?;
        let logp_old = tape.value(lp).data().to_vec();
        let anchor_eps = match anchor {
            Some(a) => Some(a.predict(&x_t, &t, CondInput::Null)?),
            None => None,
        };
        Ok(Self { n_traj: n, n_steps: s, x_t, x_prev, t, cond, cx, ce, variance, guidance: traj.guidance, logp_old, anchor_eps })
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }
}

/// Forward pass of the policy objective for one stacked batch.
struct PolicyGraph {
    logp: Var,
    cond_eps: Option<Var>,
}

fn policy_graph(tape: &mut Tape, model: &DiffusionModel, p: &[Var], b: &PolicyBatch) -> Result<PolicyGraph> {
    let xv = tape.constant(b.x_t.clone());
    let (eps, cond_eps) = guided_eps(tape, &model.denoiser, p, xv, &b.t, b.cond.as_ref(), b.guidance)?;
    let mean = ddim_mean(tape, xv, eps, b.cx.clone(), b.ce.clone())?;
    let xp = tape.constant(b.x_prev.clone());
    let logp = logp_part(tape, xp, mean, &b.variance)?;
    Ok(PolicyGraph { logp, cond_eps })
}

/// Per-trajectory `Σ_t log N(x_{t−1}; μ_t, σ_t² I)` over the stochastic steps.
pub fn trajectory_log_prob(model: &DiffusionModel, traj: &TrajectoryBatch) -> Result<Vec<f64>> {
    let b = PolicyBatch::from_trajectory(traj, None)?;
    let mut tape = Tape::new();
    let p = model.denoiser.params().bind(&mut tape, false);
    let g = policy_graph(&mut tape, model, &p, &b)?;
    let d = model.data_dim() as f64;
    let vals = tape.value(g.logp).data();
    let mut out = vec![0.0; b.n_traj];
    for (r, v) in vals.iter().enumerate() {
        out[r % b.n_traj] += v - 0.5 * d * (2.0 * std::f64::consts::PI * b.variance[r]).ln();
    }
    Ok(out)
}

/// Gradient of `Σ_trajectories trajectory_log_prob` with respect to the model's parameters.
pub fn trajectory_log_prob_gradient(model: &DiffusionModel, traj: &TrajectoryBatch) -> Result<Vec<Vec<f64>>> {
    let b = PolicyBatch::from_trajectory(traj, None)?;
    let mut tape = Tape::new();
    let p = model.denoiser.params().bind(&mut tape, true);
    let g = policy_graph(&mut tape, model, &p, &b)?;
    let s = tape.sum(g.logp);
    let grads = tape.backward(s)?;
    Ok(collect_grads(model.denoiser.params(), &p, &grads))
}

fn collect_grads(params: &ParamStore, p: &[Var], grads: &crate::numkit::Gradients) -> Vec<Vec<f64>> {
    p.iter().zip(params.iter()).map(|(v, (_, t))| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])).collect()
}

/// Ratios clipped to `[1 − clip, 1 + clip]`.
pub fn clip_ratios(ratios: &[f64], clip: f64) -> Vec<f64> {
    ratios.iter().map(|r| r.clamp(1.0 - clip, 1.0 + clip)).collect()
}

/// Per-row surrogate weights for a cost: `mean max(A·ρ, A·clip(ρ))` has
/// gradient `A·ρ·∇log p / rows` where the unclipped branch is active, else 0.
/// Returns `(surrogate value, coefficients, clipped fraction)`.
pub fn surrogate_coefficients(ratios: &[f64], advantages: &[f64], n_traj: usize, clip: f64) -> (f64, Vec<f64>, f64) {
    let rows = ratios.len();
    let clipped = clip_ratios(ratios, clip);
    let mut value = 0.0;
    let mut n_clipped = 0;
    let coef = ratios
        .iter()
        .zip(&clipped)
        .enumerate()
        .map(|(r, (&rho, &rc))| {
            let a = advantages[r % n_traj];
            let (u, c) = (a * rho, a * rc);
            value += u.max(c);
            if rho != rc {
                n_clipped += 1;
            }
            if u >= c {
                a * rho / rows as f64
            } else {
                0.0
            }
        })
        .collect();
    (value / rows as f64, coef, n_clipped as f64 / rows.max(1) as f64)
}

/// Result of one policy objective evaluation.
#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub grads: Vec<Vec<f64>>,
    pub surrogate: f64,
    pub kl: f64,
    pub ratios: Vec<f64>,
    pub clip_fraction: f64,
}

/// Gradient of `surrogate + λ·KL-anchor` for one stacked batch.
pub fn policy_objective(
    model: &DiffusionModel,
    batch: &PolicyBatch,
    advantages: &[f64],
    lambda: f64,
    clip: f64,
) -> Result<SurrogateOutput> {
    check_dim("advantages", batch.n_traj, advantages.len())?;
    let mut tape = Tape::new();
    let p = model.denoiser.params().bind(&mut tape, true);
    let g = policy_graph(&mut tape, model, &p, batch)?;
    let logp = tape.value(g.logp).data().to_vec();
    let ratios: Vec<f64> = logp.iter().zip(&batch.logp_old).map(|(n, o)| (n - o).exp()).collect();
    let (surrogate, coef, clip_fraction) = surrogate_coefficients(&ratios, advantages, batch.n_traj, clip);
    let pol = tape.weighted_sum(g.logp, coef)?;
    let (total, kl) = match kl_anchor_graph(&mut tape, batch, g.cond_eps, lambda)? {
        Some((scaled, kl)) => (tape.add(pol, scaled)?, kl),
        None => (pol, 0.0),
    };
    if !surrogate.is_finite() || !kl.is_finite() {
        return Err(Error::NonFinite(format!(
            "policy surrogate {surrogate}, KL term {kl}, max ratio {:?}",
            ratios.iter().cloned().fold(f64::NAN, f64::max)
        )));
    }
    let grads = tape.backward(total)?;
    Ok(SurrogateOutput { grads: collect_grads(model.denoiser.params(), &p, &grads), surrogate, kl, ratios, clip_fraction })
}

/// Records `λ·mean_rows ‖ε(x_t, y, t) − ε_anchor(x_t, t)‖²`. Returns the scaled
/// node and the unscaled mean, or `None` without an anchor or conditional prediction.
fn kl_anchor_graph(tape: &mut Tape, batch: &PolicyBatch, cond_eps: Option<Var>, lambda: f64) -> Result<Option<(Var, f64)>> {
    let (Some(ec), Some(anchor)) = (cond_eps, batch.anchor_eps.as_ref()) else {
        return Ok(None);
    };
    let a = tape.constant(anchor.clone());
    let d = tape.sub(ec, a)?;
    let r = tape.row_sum_squares(d);
    let m = tape.mean(r);
    let kl = tape.value(m).item();
    Ok(Some((tape.scale(m, lambda), kl)))
}

/// Gradient of the KL-anchor penalty alone, `(values, per-parameter gradients)`.
pub fn kl_anchor_gradient(model: &DiffusionModel, batch: &PolicyBatch, lambda: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let Some(cond) = batch.cond.as_ref() else {
        return Err(Error::InvalidArgument("KL anchor needs conditions".into()));
    };
    let mut tape = Tape::new();
    let p = model.denoiser.params().bind(&mut tape, true);
    let xv = tape.constant(batch.x_t.clone());
    let ec = model.denoiser.forward(&mut tape, &p, xv, &batch.t, CondInput::Values(cond))?;
    let Some((scaled, _)) = kl_anchor_graph(&mut tape, batch, Some(ec), lambda)? else {
        return Err(Error::InvalidArgument("KL anchor needs anchor predictions".into()));
    };
    let value = tape.value(scaled).item();
    let grads = tape.backward(scaled)?;
    Ok((value, collect_grads(model.denoiser.params(), &p, &grads)))
}

/// Summary of a policy update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyStats {
    pub surrogate: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
}

/// `cfg.policy_updates` Adam steps on the clipped surrogate plus KL anchor,
/// accumulating gradients over the micro-batches.
pub fn policy_gradient_update(
    model: &mut DiffusionModel,
    opt: &mut AdamState,
    batches: &[PolicyBatch],
    advantages: &[Vec<f64>],
    lambda: f64,
    cfg: &RLConfig,
) -> Result<PolicyStats> {
    check_dim("advantage batches", batches.len(), advantages.len())?;
    let mut stats = PolicyStats::default();
    let scale = 1.0 / batches.len() as f64;
    for _ in 0..cfg.policy_updates {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut s = PolicyStats::default();
        for (b, a) in batches.iter().zip(advantages) {
            let out = policy_objective(model, b, a, lambda, cfg.ratio_clip)?;
            s.surrogate += scale * out.surrogate;
            s.kl += scale * out.kl;
            s.clip_fraction += scale * out.clip_fraction;
            match acc.as_mut() {
                None => acc = Some(out.grads.into_iter().map(|g| g.into_iter().map(|v| v * scale).collect()).collect()),
                Some(acc) => acc.iter_mut().zip(&out.grads).for_each(|(x, g)| x.iter_mut().zip(g).for_each(|(x, g)| *x += scale * g)),
            }
        }
        let params = model.denoiser.params_mut();
        params.zero_grad();
        if let Some(acc) = acc {
            for (t, g) in params.tensors_mut().zip(acc) {
                t.grad_mut().copy_from_slice(&g);
            }
        }
        s.grad_norm = params.clip_grad_norm(cfg.grad_clip);
        adam_step(params, opt)?;
        params.clear_grads();
        model.step += 1;
        model.update_ema();
        stats = s;
    }
    Ok(stats)
}

/// Denoising steps on the scorer using `(generated, observed)` pairs, half
/// from the current batch and half from the buffer. Returns the mean loss.
pub fn joint_consistency_update(
    scorer: &mut DiffusionModel,
    opt: &mut AdamState,
    fresh: Option<(&Tensor, &Tensor)>,
    buffer: &ReplayBuffer,
    cfg: &RLConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut total = 0.0;
    for _ in 0..cfg.consistency_updates {
        let (gen, obs) = match fresh {
            Some((g, o)) => {
                let n_fresh = (cfg.batch_size / 2).min(g.rows());
                let idx: Vec<usize> = (0..n_fresh).map(|_| rng::int_in(rng, 0, g.rows() - 1)).collect();
                let (bg, bo) = buffer.sample(cfg.batch_size - n_fresh, rng)?;
                let fg = crate::data::select_rows(g, &idx);
                let fo = crate::data::select_rows(o, &idx);
                (stack(&[&fg, &bg]), stack(&[&fo, &bo]))
            }
            None => buffer.sample(cfg.batch_size, rng)?,
        };
        let (loss, _) = diffusion::train_step(scorer, opt, &obs, Some(&gen), cfg.cond_drop_prob, Some(cfg.grad_clip), rng)?;
        scorer.denoiser.params_mut().clear_grads();
        total += loss;
    }
    Ok(total / cfg.consistency_updates.max(1) as f64)
}

/// One record per phase per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub iteration: usize,
    pub phase: Phase,
    pub reward_mean: f64,
    pub reward_stderr: f64,
    pub kl_term: f64,
    pub consistency_loss: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub buffer_len: usize,
}

/// Training state for the alternating loop.
#[derive(Debug, Clone)]
pub struct CouplingTrainer {
    pub pair: CouplingPair,
    pub cfg: RLConfig,
    buffers: [ReplayBuffer; 2],
    policy_opt: [AdamState; 2],
    consistency_opt: [AdamState; 2],
    baselines: [Option<f64>; 2],
    pub log: Vec<StepDiagnostics>,
    pub iteration: usize,
}

impl CouplingTrainer {
    pub fn new(pair: CouplingPair, cfg: RLConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = |m: &DiffusionModel, lr: f64| AdamState::with_lr(m.denoiser.params(), lr);
        Ok(Self {
            buffers: [ReplayBuffer::new(cfg.buffer_capacity), ReplayBuffer::new(cfg.buffer_capacity)],
            policy_opt: [opt(&pair.theta, cfg.lr)?, opt(&pair.phi, cfg.lr)?],
            consistency_opt: [opt(&pair.theta, cfg.consistency_lr)?, opt(&pair.phi, cfg.consistency_lr)?],
            baselines: [None, None],
            log: Vec::new(),
            iteration: 0,
            pair,
            cfg,
        })
    }

    pub fn buffer(&self, phase: Phase) -> &ReplayBuffer {
        &self.buffers[phase.index()]
    }

    /// Samples, rewards and policy batches for one phase without updating anything.
    pub fn rollout(&self, phase: Phase, cond_batches: &[Tensor], rng: &mut Rng) -> Result<Rollout> {
        let (sampler, scorer, anchor) = self.pair.roles(phase);
        let mut out = Rollout::default();
        for cond in cond_batches {
            let sc = SampleConfig {
                n_steps: self.cfg.ddim_steps,
                guidance: self.cfg.guidance_train,
                eta: self.cfg.eta_train,
                record_trajectory: true,
                seed: 0,
            };
            let (x, traj) = diffusion::sample(sampler, Some(cond), cond.rows(), &sc, rng)?;
            let traj = traj.expect("recorded");
            let r = reward(scorer, cond, &x, self.cfg.k_reward, self.cfg.nll_weighting, self.cfg.common_reward_noise, rng)?;
            out.batches.push(PolicyBatch::from_trajectory(&traj, Some(anchor))?);
            out.rewards.extend(r);
            out.generated.push(x);
            out.observed.push(cond.clone());
        }
        Ok(out)
    }

    /// One phase: sample, score, policy update, buffer append, scorer update.
    pub fn phase_step(&mut self, phase: Phase, cond_batches: &[Tensor], rng: &mut Rng) -> Result<StepDiagnostics> {
        let roll = self.rollout(phase, cond_batches, rng)?;
        let i = phase.index();
        let rec = RewardRecord::new(roll.rewards.clone(), self.cfg.baseline, self.cfg.baseline_momentum, &mut self.baselines[i]);
        let mut adv = Vec::new();
        let mut off = 0;
        for b in &roll.batches {
            adv.push(rec.advantages[off..off + b.n_traj].to_vec());
            off += b.n_traj;
        }
        let lambda = match phase {
            Phase::Theta => self.cfg.lambda_x,
            Phase::Phi => self.cfg.lambda_y,
        };
        let cfg = self.cfg.clone();
        let stats = policy_gradient_update(self.pair.model_mut(phase), &mut self.policy_opt[i], &roll.batches, &adv, lambda, &cfg)?;
        let gen = stack(&roll.generated.iter().collect::<Vec<_>>());
        let obs = stack(&roll.observed.iter().collect::<Vec<_>>());
        self.buffers[i].push_batch(&gen, &obs)?;
        let j = phase.other().index();
        let scorer = self.pair.model_mut(phase.other());
        let loss = joint_consistency_update(scorer, &mut self.consistency_opt[j], Some((&gen, &obs)), &self.buffers[i], &cfg, rng)?;
        let (m, se) = diffusion::mean_stderr(&rec.raw);
        let d = StepDiagnostics {
            iteration: self.iteration,
            phase,
            reward_mean: m,
            reward_stderr: se,
            kl_term: stats.kl,
            consistency_loss: loss,
            grad_norm: stats.grad_norm,
            clip_fraction: stats.clip_fraction,
            buffer_len: self.buffers[i].len(),
        };
        self.log.push(d.clone());
        Ok(d)
    }

    /// One iteration of both phases with condition batches drawn from the data.
    pub fn step(&mut self, data_x: &Tensor, data_y: &Tensor, rng: &mut Rng) -> Result<[StepDiagnostics; 2]> {
        let ys = self.draw_batches(data_y, rng);
        let a = self.phase_step(Phase::Theta, &ys, rng)?;
        let xs = self.draw_batches(data_x, rng);
        let b = self.phase_step(Phase::Phi, &xs, rng)?;
        self.iteration += 1;
        Ok([a, b])
    }

    fn draw_batches(&self, data: &Tensor, rng: &mut Rng) -> Vec<Tensor> {
        (0..self.cfg.grad_accum)
            .map(|_| {
                let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng::int_in(rng, 0, data.rows() - 1)).collect();
                crate::data::select_rows(data, &idx)
            })
            .collect()
    }
}

/// Samples, rewards and stacked policy batches of one phase.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub batches: Vec<PolicyBatch>,
    pub rewards: Vec<f64>,
    pub generated: Vec<Tensor>,
    pub observed: Vec<Tensor>,
}

/// Runs `cfg.total_steps` iterations of both phases.
pub fn mec_training_loop(
    pair: CouplingPair,
    data_x: &Tensor,
    data_y: &Tensor,
    cfg: &RLConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(&StepDiagnostics),
) -> Result<(CouplingPair, Vec<StepDiagnostics>)> {
    check_dim("x data", pair.dim_x(), data_x.cols())?;
    check_dim("y data", pair.dim_y(), data_y.cols())?;
    if cfg.total_steps > 0 && (data_x.rows() == 0 || data_y.rows() == 0) {
        return Err(Error::Data("training data is empty".into()));
    }
    let mut tr = CouplingTrainer::new(pair, cfg.clone())?;
    for _ in 0..cfg.total_steps {
        for d in tr.step(data_x, data_y, rng)? {
            on_step(&d);
        }
    }
    Ok((tr.pair, tr.log))
}

/// Which gradients [`verify_gradient_swap`] compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapGradients {
    /// Full gradients in softmax-logit space.
    Raw,
    /// Gradients restricted to directions that keep the `X` marginal fixed.
    MarginalTangent,
}

/// Discrete coupling fixture: `p(x | y)` as softmax tables, `q(y | x)` fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapFixture {
    pub p_y: Vec<f64>,
    /// `logits[y][x]`.
    pub logits: Vec<Vec<f64>>,
    /// `reverse[x][y]`.
    pub reverse: Vec<Vec<f64>>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Rescales a positive matrix to row sums `rows` and column sums `cols`.
pub fn sinkhorn(mut k: Vec<Vec<f64>>, rows: &[f64], cols: &[f64], iters: usize) -> Vec<Vec<f64>> {
    for _ in 0..iters {
        for (row, r) in k.iter_mut().zip(rows) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v *= r / s);
        }
        for (j, c) in cols.iter().enumerate() {
            let s: f64 = k.iter().map(|row| row[j]).sum();
            k.iter_mut().for_each(|row| row[j] *= c / s);
        }
    }
    k
}

fn random_simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| 0.2 + rng::uniform(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

impl SwapFixture {
    /// `p(x|y)` and `q(y|x)` both read off one joint table `joint[y][x]`.
    pub fn from_joint(joint: &[Vec<f64>]) -> Self {
        let p_y: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let m = joint[0].len();
        let p_x: Vec<f64> = (0..m).map(|x| joint.iter().map(|r| r[x]).sum()).collect();
        let logits = joint.iter().zip(&p_y).map(|(r, py)| r.iter().map(|v| (v / py).ln()).collect()).collect();
        let reverse = (0..m).map(|x| joint.iter().map(|r| r[x] / p_x[x]).collect()).collect();
        Self { p_y, logits, reverse }
    }

    /// Random joint over `n_y × m_x` atoms with random marginals.
    pub fn random_matched(m_x: usize, n_y: usize, rng: &mut Rng) -> Self {
        let (p_x, p_y) = (random_simplex(rng, m_x), random_simplex(rng, n_y));
        let k = (0..n_y).map(|_| (0..m_x).map(|_| 0.05 + rng::uniform(rng)).collect()).collect();
        Self::from_joint(&sinkhorn(k, &p_y, &p_x, 500))
    }

    /// Reverse conditional from one coupling of `(p_x, p_y)`, forward tables
    /// from an unrelated coupling of `p_y` with a different `X` marginal.
    pub fn random_mismatched(m_x: usize, n_y: usize, rng: &mut Rng) -> Self {
        let base = Self::random_matched(m_x, n_y, rng);
        let other_x = random_simplex(rng, m_x);
        let k = (0..n_y).map(|_| (0..m_x).map(|_| 0.05 + rng::uniform(rng)).collect()).collect();
        let forward = Self::from_joint(&sinkhorn(k, &base.p_y, &other_x, 500));
        Self { reverse: base.reverse, ..forward }
    }

    pub fn conditionals(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }

    pub fn x_marginal(&self) -> Vec<f64> {
        let q = self.conditionals();
        let m = q[0].len();
        (0..m).map(|x| q.iter().zip(&self.p_y).map(|(qy, py)| py * qy[x]).sum()).collect()
    }

    /// `∂/∂logits E[−log p(x|y)]`, flattened row-major over `(y, x)`.
    pub fn grad_forward_entropy(&self) -> Vec<f64> {
        let mut g = Vec::new();
        for (qy, py) in self.conditionals().iter().zip(&self.p_y) {
            let h: f64 = -qy.iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum::<f64>();
            g.extend(qy.iter().map(|q| -py * q * (q.ln() + h)));
        }
        g
    }

    /// `∂/∂logits E[−log q(y|x)]` with `q` held fixed.
    pub fn grad_reverse_nll(&self) -> Vec<f64> {
        let mut g = Vec::new();
        for (y, (qy, py)) in self.conditionals().iter().zip(&self.p_y).enumerate() {
            let c: Vec<f64> = (0..qy.len()).map(|x| -self.reverse[x][y].ln()).collect();
            let mean: f64 = qy.iter().zip(&c).map(|(q, c)| q * c).sum();
            g.extend(qy.iter().zip(&c).map(|(q, ck)| py * q * (ck - mean)));
        }
        g
    }

    /// Rows of `∂p_X(x')/∂logits`, one per `x'`.
    pub fn marginal_jacobian(&self) -> Vec<Vec<f64>> {
        let q = self.conditionals();
        let m = q[0].len();
        (0..m)
            .map(|xp| {
                let mut row = Vec::new();
                for (qy, py) in q.iter().zip(&self.p_y) {
                    row.extend((0..m).map(|k| py * qy[k] * (if k == xp { 1.0 } else { 0.0 } - qy[xp])));
                }
                row
            })
            .collect()
    }
}

/// Removes from `v` its components along the span of `basis`.
fn project_out(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut u = b.clone();
        for o in &ortho {
            let d: f64 = u.iter().zip(o).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(o).for_each(|(a, b)| *a -= d * b);
        }
        let n = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = b.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-10 * scale.max(1e-300) {
            u.iter_mut().for_each(|a| *a /= n);
            ortho.push(u);
        }
    }
    let mut out = v.to_vec();
    for _ in 0..2 {
        for o in &ortho {
            let d: f64 = out.iter().zip(o).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(o).for_each(|(a, b)| *a -= d * b);
        }
    }
    out
}

/// Max elementwise gap between the gradient of the forward conditional
/// entropy and the gradient of the reverse model's NLL on the fixture.
pub fn verify_gradient_swap(f: &SwapFixture, mode: SwapGradients) -> f64 {
    let (mut a, mut b) = (f.grad_forward_entropy(), f.grad_reverse_nll());
    if mode == SwapGradients::MarginalTangent {
        let j = f.marginal_jacobian();
        a = project_out(&a, &j);
        b = project_out(&b, &j);
    }
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, DenoiserConfig};
    use crate::diffusion::NoiseSchedule;

    fn anchors(seed: u64) -> (DiffusionModel, DiffusionModel) {
        let mut r = rng::seeded(seed);
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let cx = DenoiserConfig { data_dim: 2, cond_dim: None, hidden_dims: vec![8, 8], time_embed_dim: 4, cond_drop_prob: 0.1 };
        let cy = DenoiserConfig { data_dim: 3, ..cx.clone() };
        (
            DiffusionModel::new(Denoiser::new_unconditional(cx, &mut r).unwrap(), s.clone()),
            DiffusionModel::new(Denoiser::new_unconditional(cy, &mut r).unwrap(), s),
        )
    }

    fn small_cfg() -> RLConfig {
        RLConfig {
            batch_size: 4,
            grad_accum: 2,
            ddim_steps: 5,
            buffer_capacity: 20,
            total_steps: 2,
            policy_updates: 2,
            consistency_updates: 2,
            lr: 1e-3,
            consistency_lr: 1e-3,
            ..RLConfig::default()
        }
    }

    fn perturb(m: &mut DiffusionModel, seed: u64, scale: f64) {
        let mut r = rng::seeded(seed);
        for t in m.denoiser.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += scale * rng::normal(&mut r));
        }
    }

    fn traj(m: &DiffusionModel, cond: &Tensor, guidance: f64, seed: u64) -> TrajectoryBatch {
        let sc = SampleConfig { n_steps: 5, guidance, eta: 1.0, record_trajectory: true, seed: 0 };
        diffusion::sample(m, Some(cond), cond.rows(), &sc, &mut rng::seeded(seed)).unwrap().1.unwrap()
    }

    #[test]
    fn ratio_is_exactly_one_at_unchanged_params() {
        let (ax, ay) = anchors(1);
        let mut pair = CouplingPair::from_anchors(ax, ay, &mut rng::seeded(2)).unwrap();
        perturb(&mut pair.theta, 3, 0.05);
        let y = rng::normal_tensor(&mut rng::seeded(4), 6, 3);
        let tr = traj(&pair.theta, &y, 7.0, 5);
        let b = PolicyBatch::from_trajectory(&tr, Some(&pair.theta_anchor)).unwrap();
        let out = policy_objective(&pair.theta, &b, &[1.0; 6], 1e-3, 1e-4).unwrap();
        assert!(out.ratios.iter().all(|r| *r == 1.0));
        assert_eq!(out.clip_fraction, 0.0);
    }

    #[test]
    fn gaussian_at_mean_log_density() {
        // one stochastic step of a 1-D model with σ² = 1 and x_prev = μ
        let mut r = rng::seeded(6);
        let cfg = DenoiserConfig { data_dim: 1, cond_dim: None, hidden_dims: vec![4], time_embed_dim: 2, cond_drop_prob: 0.0 };
        let m = DiffusionModel::new(Denoiser::new_unconditional(cfg, &mut r).unwrap(), NoiseSchedule::linear(10, 1e-4, 0.02).unwrap());
        let sc = SampleConfig { n_steps: 2, guidance: 0.0, eta: 1.0, record_trajectory: true, seed: 0 };
        let (_, tr) = diffusion::sample(&m, None, 1, &sc, &mut r).unwrap();
        let mut tr = tr.unwrap();
        tr.steps[0].x_prev = tr.steps[0].mean.clone();
        tr.steps[0].variance = 1.0;
        let lp = trajectory_log_prob(&m, &tr).unwrap();
        assert!((lp[0] + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let (ax, ay) = anchors(7);
        let mut pair = CouplingPair::from_anchors(ax, ay, &mut rng::seeded(8)).unwrap();
        perturb(&mut pair.theta, 9, 0.1);
        let y = rng::normal_tensor(&mut rng::seeded(10), 3, 3);
        let tr = traj(&pair.theta, &y, 2.0, 11);
        let g = trajectory_log_prob_gradient(&pair.theta, &tr).unwrap();
        let f = |m: &DiffusionModel| trajectory_log_prob(m, &tr).unwrap().iter().sum::<f64>();
        let h = 1e-6;
        let mut checked = 0;
        for pi in 0..g.len() {
            for k in [0, g[pi].len() / 2] {
                let mut up = pair.theta.clone();
                up.denoiser.params_mut().at_mut(pi).data_mut()[k] += h;
                let mut dn = pair.theta.clone();
                dn.denoiser.params_mut().at_mut(pi).data_mut()[k] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                let a = g[pi][k];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                assert!(err < 1e-4, "param {pi}[{k}]: {a} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn zero_advantage_and_zero_lambda_leave_params_unchanged() {
        let (ax, ay) = anchors(12);
        let mut pair = CouplingPair::from_anchors(ax, ay, &mut rng::seeded(13)).unwrap();
        perturb(&mut pair.theta, 14, 0.05);
        let y = rng::normal_tensor(&mut rng::seeded(15), 4, 3);
        let b = PolicyBatch::from_trajectory(&traj(&pair.theta, &y, 7.0, 16), Some(&pair.theta_anchor)).unwrap();
        let before = pair.theta.clone();
        let mut opt = AdamState::with_lr(pair.theta.denoiser.params(), 1e-2).unwrap();
        policy_gradient_update(&mut pair.theta, &mut opt, std::slice::from_ref(&b), &[vec![0.0; 4]], 0.0, &small_cfg()).unwrap();
        assert!(pair.theta.denoiser.params().bitwise_eq(before.denoiser.params()));
        // with λ > 0 only the anchor term moves the parameters
        policy_gradient_update(&mut pair.theta, &mut opt, &[b], &[vec![0.0; 4]], 1e-3, &small_cfg()).unwrap();
        assert!(!pair.theta.denoiser.params().bitwise_eq(before.denoiser.params()));
    }

    #[test]
    fn kl_anchor_contracts() {
        let (ax, ay) = anchors(17);
        let mut pair = CouplingPair::from_anchors(ax, ay, &mut rng::seeded(18)).unwrap();
        let y = rng::normal_tensor(&mut rng::seeded(19), 4, 3);
        let b = PolicyBatch::from_trajectory(&traj(&pair.theta, &y, 7.0, 20), Some(&pair.theta_anchor)).unwrap();
        let (v, g) = kl_anchor_gradient(&pair.theta, &b, 1e-3).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().flatten().all(|x| *x == 0.0));
        perturb(&mut pair.theta, 21, 0.05);
        let (v0, g0) = kl_anchor_gradient(&pair.theta, &b, 0.0).unwrap();
        assert_eq!(v0, 0.0);
        assert!(g0.iter().flatten().all(|x| *x == 0.0));
        let (v1, g1) = kl_anchor_gradient(&pair.theta, &b, 1e-3).unwrap();
        let (v2, g2) = kl_anchor_gradient(&pair.theta, &b, 2e-3).unwrap();
        assert!(v1 > 0.0);
        assert_eq!(v2, 2.0 * v1);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn batch_mean_baseline_cancels_constant_rewards() {
        let mut st = None;
        let r = RewardRecord::new(vec![3.5; 64], BaselineMode::BatchMean, 0.9, &mut st);
        assert!(r.advantages.iter().all(|a| *a == 0.0));
        let r = RewardRecord::new(vec![3.5; 64], BaselineMode::RunningMean, 0.9, &mut st);
        assert!(r.advantages.iter().all(|a| *a == 0.0));
        assert_eq!(st, Some(3.5));
        let r = RewardRecord::new(vec![1.0, 2.0], BaselineMode::None, 0.9, &mut st);
        assert_eq!(r.advantages, vec![1.0, 2.0]);
    }

    #[test]
    fn surrogate_coefficients_follow_the_active_branch() {
        let clip = 0.1;
        let (v, c, frac) = surrogate_coefficients(&[1.0, 1.5, 0.5, 1.5], &[1.0, 1.0, -1.0, -1.0], 4, clip);
        // positive advantage with ρ above the interval keeps the unclipped, larger term
        assert_eq!(c, vec![0.25, 1.5 / 4.0, -0.5 / 4.0, 0.0]);
        assert_eq!(frac, 0.75);
        assert!((v - (1.0 + 1.5 - 0.5 - 1.1) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn replay_buffer_is_fifo() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(vec![i as f64], vec![-(i as f64)]);
            assert_eq!(b.len(), (i + 1).min(3));
        }
        let firsts: Vec<f64> = b.iter().map(|p| p.0[0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
        assert!(matches!(ReplayBuffer::new(2).sample(1, &mut rng::seeded(0)), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn consistency_on_identical_pairs_matches_denoising_loss() {
        let (ax, ay) = anchors(22);
        let pair = CouplingPair::from_anchors(ax, ay, &mut rng::seeded(23)).unwrap();
        let mut phi = pair.phi.clone();
        let x = vec![0.3, -0.2];
        let y = vec![1.0, 0.5, -0.5];
        let mut buf = ReplayBuffer::new(10);
        for _ in 0..5 {
            buf.push(x.clone(), y.clone());
        }
        let mut cfg = small_cfg();
        cfg.consistency_updates = 1;
        let mut opt = AdamState::with_lr(phi.denoiser.params(), 1e-3).unwrap();
        let mut r1 = rng::seeded(24);
        let loss = joint_consistency_update(&mut phi, &mut opt, None, &buf, &cfg, &mut r1).unwrap();
        // same stream: buffer draws first, then the loss draws
        let mut r2 = rng::seeded(24);
        let (g, o) = buf.sample(cfg.batch_size, &mut r2).unwrap();
        let direct = diffusion::denoising_loss(&pair.phi, &o, Some(&g), cfg.cond_drop_prob, &mut r2).unwrap();
        assert_eq!(loss, direct);
    }

    #[test]
    fn loop_contracts() {
        let (ax, ay) = anchors(25);
        let pair = CouplingPair::from_anchors(ax, ay, &mut rng::seeded(26)).unwrap();
        let dx = rng::normal_tensor(&mut rng::seeded(27), 30, 2);
        let dy = rng::normal_tensor(&mut rng::seeded(28), 30, 3);
        let mut cfg = small_cfg();
        cfg.total_steps = 0;
        let (same, log) = mec_training_loop(pair.clone(), &dx, &dy, &cfg, &mut rng::seeded(1), |_| {}).unwrap();
        assert!(same.bitwise_eq(&pair));
        assert!(log.is_empty());
        cfg.total_steps = 3;
        let (out, log) = mec_training_loop(pair.clone(), &dx, &dy, &cfg, &mut rng::seeded(1), |_| {}).unwrap();
        assert_eq!(log.len(), 6);
        for (i, d) in log.iter().enumerate() {
            assert_eq!(d.phase, if i % 2 == 0 { Phase::Theta } else { Phase::Phi });
            assert!(d.reward_mean.is_finite() && d.consistency_loss.is_finite() && d.kl_term.is_finite());
            let per_step = cfg.batch_size * cfg.grad_accum;
            assert_eq!(d.buffer_len, ((i / 2 + 1) * per_step).min(cfg.buffer_capacity));
        }
        assert!(out.theta_anchor.denoiser.params().bitwise_eq(pair.theta_anchor.denoiser.params()));
        assert!(out.phi_anchor.denoiser.params().bitwise_eq(pair.phi_anchor.denoiser.params()));
        assert!(!out.theta.denoiser.params().bitwise_eq(pair.theta.denoiser.params()));
    }

    #[test]
    fn gradient_swap_fixtures() {
        let mut r = rng::seeded(30);
        let indep = SwapFixture::from_joint(&[vec![0.25, 0.25], vec![0.25, 0.25]]);
        assert!(verify_gradient_swap(&indep, SwapGradients::Raw) < 1e-10);
        for _ in 0..10 {
            let f = SwapFixture::random_matched(2, 2, &mut r);
            assert!(verify_gradient_swap(&f, SwapGradients::MarginalTangent) < 1e-8);
        }
        let mut worst: f64 = f64::INFINITY;
        for _ in 0..10 {
            let f = SwapFixture::random_mismatched(3, 3, &mut r);
            worst = worst.min(verify_gradient_swap(&f, SwapGradients::MarginalTangent));
        }
        assert!(worst > 1e-3, "{worst}");
    }

    #[test]
    fn swap_gradients_match_finite_differences() {
        let f = SwapFixture::random_matched(3, 2, &mut rng::seeded(31));
        let obj_fwd = |f: &SwapFixture| -> f64 {
            f.conditionals().iter().zip(&f.p_y).map(|(q, py)| -py * q.iter().map(|v| v * v.ln()).sum::<f64>()).sum()
        };
        let obj_rev = |f: &SwapFixture| -> f64 {
            f.conditionals()
                .iter()
                .zip(&f.p_y)
                .enumerate()
                .map(|(y, (q, py))| py * q.iter().enumerate().map(|(x, v)| -v * f.reverse[x][y].ln()).sum::<f64>())
                .sum()
        };
        let (ga, gb) = (f.grad_forward_entropy(), f.grad_reverse_nll());
        let h = 1e-6;
        for y in 0..2 {
            for x in 0..3 {
                let mut up = f.clone();
                up.logits[y][x] += h;
                let mut dn = f.clone();
                dn.logits[y][x] -= h;
                let k = y * 3 + x;
                assert!(((obj_fwd(&up) - obj_fwd(&dn)) / (2.0 * h) - ga[k]).abs() < 1e-8);
                assert!(((obj_rev(&up) - obj_rev(&dn)) / (2.0 * h) - gb[k]).abs() < 1e-8);
            }
        }
    }
}
