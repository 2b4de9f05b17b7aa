//! Noise-prediction network `ε(x_t, t)` and its conditional extension
//! `ε(x_t, y, t)`.
//!
//! The trunk is an MLP: an input layer over `[x_t, temb(t)]`, residual
//! blocks `h ← skip(h) + W·silu(h) + b`, and a linear head on `silu(h)`.
//! A conditional network adds an encoder branch with the same layout as the
//! trunk's input stack, fed `[y, temb(t)]`, whose activations are added into
//! the trunk through injection matrices. Injections start at exactly zero, so
//! a conditional network built from an unconditional one computes the same
//! function until training moves them. A missing condition is replaced by a
//! learned null vector.

use serde::{Deserialize, Serialize};

use crate::numkit::{ParamStore, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub cond_dim: Option<usize>,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_drop_prob: f64,
}

impl DenoiserConfig {
    pub fn unconditional(data_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self { data_dim, cond_dim: None, hidden_dims, time_embed_dim: 32, cond_drop_prob: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be positive".into()));
        }
        if self.cond_dim == Some(0) {
            return Err(Error::Config("cond_dim must be positive when present".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be a non-empty list of positive sizes".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_embed_dim must be even and positive, got {}", self.time_embed_dim)));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!("cond_drop_prob {} outside [0, 1]", self.cond_drop_prob)));
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `sin(t/ω_k)` then `cos(t/ω_k)`, `ω_k` geometric from 1 to 10000.
pub fn time_embedding(t: usize, dim: usize, t_max: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("time embedding dim must be even, got {dim}")));
    }
    if t > t_max {
        return Err(Error::InvalidArgument(format!("timestep {t} exceeds {t_max}")));
    }
    Ok(embed(t, dim))
}

fn embed(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let omega = if half == 1 { 1.0 } else { 10000f64.powf(k as f64 / (half - 1) as f64) };
        let arg = t as f64 / omega;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Condition fed to a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum CondInput<'a> {
    /// Every row uses the learned null vector.
    Null,
    /// One condition row per input row.
    Values(&'a Tensor),
    /// Rows flagged `true` use the null vector, the rest their condition row.
    Masked { values: &'a Tensor, null_rows: &'a [bool] },
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    w: usize,
    b: usize,
    skip: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stack {
    in_w: usize,
    in_b: usize,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    enc: Stack,
    inject: Vec<usize>,
    null: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    trunk: Stack,
    out_w: usize,
    out_b: usize,
    branch: Option<Branch>,
}

/// Denoiser configuration plus its named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut t = rng::normal_tensor(rng, rows, cols);
    t.data_mut().iter_mut().for_each(|v| *v *= std);
    t
}

fn push_stack(p: &mut ParamStore, prefix: &str, in_dim: usize, hidden: &[usize], rng: &mut Rng) {
    p.push(format!("{prefix}.in.w"), gaussian(rng, in_dim, hidden[0], (1.0 / in_dim as f64).sqrt()));
    p.push(format!("{prefix}.in.b"), Tensor::zeros(vec![1, hidden[0]]));
    let mut prev = hidden[0];
    for (i, &h) in hidden.iter().enumerate() {
        p.push(format!("{prefix}.block{i}.w"), gaussian(rng, prev, h, (1.0 / prev as f64).sqrt()));
        p.push(format!("{prefix}.block{i}.b"), Tensor::zeros(vec![1, h]));
        if h != prev {
            p.push(format!("{prefix}.block{i}.skip"), gaussian(rng, prev, h, (1.0 / prev as f64).sqrt()));
        }
        prev = h;
    }
}

fn stack_layout(p: &ParamStore, prefix: &str, n_blocks: usize) -> Result<Stack> {
    let idx = |name: String| p.index_of(&name).ok_or_else(|| Error::CheckpointFormat(format!("missing parameter {name}")));
    let mut blocks = Vec::with_capacity(n_blocks);
    for i in 0..n_blocks {
        blocks.push(Block {
            w: idx(format!("{prefix}.block{i}.w"))?,
            b: idx(format!("{prefix}.block{i}.b"))?,
            skip: p.index_of(&format!("{prefix}.block{i}.skip")),
        });
    }
    Ok(Stack { in_w: idx(format!("{prefix}.in.w"))?, in_b: idx(format!("{prefix}.in.b"))?, blocks })
}

impl Denoiser {
    /// Randomly initialized unconditional network.
    pub fn new_unconditional(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let mut config = config;
        config.cond_dim = None;
        config.validate()?;
        let mut p = ParamStore::default();
        push_stack(&mut p, "trunk", config.data_dim + config.time_embed_dim, &config.hidden_dims, rng);
        let last = *config.hidden_dims.last().expect("validated non-empty");
        p.push("trunk.out.w", gaussian(rng, last, config.data_dim, (1.0 / last as f64).sqrt()));
        p.push("trunk.out.b", Tensor::zeros(vec![1, config.data_dim]));
        Self::from_params(config, p)
    }

    /// Rebuilds a network from a parameter store (checkpoint loading).
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let n = config.hidden_dims.len();
        let trunk = stack_layout(&params, "trunk", n)?;
        let idx = |name: &str| params.index_of(name).ok_or_else(|| Error::CheckpointFormat(format!("missing parameter {name}")));
        let out_w = idx("trunk.out.w")?;
        let out_b = idx("trunk.out.b")?;
        let branch = match config.cond_dim {
            None => None,
            Some(_) => {
                let enc = stack_layout(&params, "enc", n)?;
                let mut inject = vec![idx("inject.in.w")?];
                for i in 0..n {
                    inject.push(idx(&format!("inject.block{i}.w"))?);
                }
                Some(Branch { enc, inject, null: idx("null")? })
            }
        };
        let d = Self { config, params, layout: Layout { trunk, out_w, out_b, branch } };
        d.check_shapes()?;
        Ok(d)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let e = c.time_embed_dim;
        let expect = |i: usize, r: usize, k: usize| -> Result<()> {
            let t = self.params.at(i);
            if t.rows() * t.cols() != r * k || t.rows() != r {
                return Err(Error::CheckpointFormat(format!(
                    "parameter {} has shape {:?}, expected [{r}, {k}]",
                    self.params.names()[i],
                    t.shape()
                )));
            }
            Ok(())
        };
        let check_stack = |s: &Stack, in_dim: usize| -> Result<()> {
            expect(s.in_w, in_dim, c.hidden_dims[0])?;
            expect(s.in_b, 1, c.hidden_dims[0])?;
            let mut prev = c.hidden_dims[0];
            for (b, &h) in s.blocks.iter().zip(&c.hidden_dims) {
                expect(b.w, prev, h)?;
                expect(b.b, 1, h)?;
                if let Some(sk) = b.skip {
                    expect(sk, prev, h)?;
                }
                prev = h;
            }
            Ok(())
        };
        check_stack(&self.layout.trunk, c.data_dim + e)?;
        let last = *c.hidden_dims.last().expect("non-empty");
        expect(self.layout.out_w, last, c.data_dim)?;
        expect(self.layout.out_b, 1, c.data_dim)?;
        if let (Some(br), Some(cd)) = (&self.layout.branch, c.cond_dim) {
            check_stack(&br.enc, cd + e)?;
            expect(br.inject[0], c.hidden_dims[0], c.hidden_dims[0])?;
            for (i, &h) in c.hidden_dims.iter().enumerate() {
                expect(br.inject[i + 1], h, h)?;
            }
            expect(br.null, 1, cd)?;
        }
        Ok(())
    }

    /// Conditional network whose trunk is a copy of `self` and whose encoder
    /// branch copies the trunk's input stack. Injection weights and the null
    /// vector start at zero. When `cond_dim` differs from the data dimension
    /// the encoder's condition columns are freshly initialized from `rng`.
    pub fn init_conditional_from_unconditional(&self, cond_dim: usize, rng: &mut Rng) -> Result<Self> {
        if self.is_conditional() {
            return Err(Error::InvalidArgument("source network is already conditional".into()));
        }
        if cond_dim == 0 {
            return Err(Error::Config("cond_dim must be positive".into()));
        }
        let cfg = &self.config;
        let (d, e) = (cfg.data_dim, cfg.time_embed_dim);
        let mut p = self.params.without_grads();
        let trunk_in = self.params.at(self.layout.trunk.in_w);
        let h0 = cfg.hidden_dims[0];
        let mut enc_in = Vec::with_capacity((cond_dim + e) * h0);
        if cond_dim == d {
            enc_in.extend_from_slice(&trunk_in.data()[..d * h0]);
        } else {
            enc_in.extend(gaussian(rng, cond_dim, h0, (1.0 / (cond_dim + e) as f64).sqrt()).into_data());
        }
        enc_in.extend_from_slice(&trunk_in.data()[d * h0..]);
        p.push("enc.in.w", Tensor::matrix(cond_dim + e, h0, enc_in)?);
        p.push("enc.in.b", self.params.at(self.layout.trunk.in_b).without_grad());
        for (i, b) in self.layout.trunk.blocks.iter().enumerate() {
            p.push(format!("enc.block{i}.w"), self.params.at(b.w).without_grad());
            p.push(format!("enc.block{i}.b"), self.params.at(b.b).without_grad());
            if let Some(s) = b.skip {
                p.push(format!("enc.block{i}.skip"), self.params.at(s).without_grad());
            }
        }
        p.push("inject.in.w", Tensor::zeros(vec![h0, h0]));
        for (i, &h) in cfg.hidden_dims.iter().enumerate() {
            p.push(format!("inject.block{i}.w"), Tensor::zeros(vec![h, h]));
        }
        p.push("null", Tensor::zeros(vec![1, cond_dim]));
        let mut config = cfg.clone();
        config.cond_dim = Some(cond_dim);
        Self::from_params(config, p)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the parameter values, keeping names and shapes.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::Shape("parameter names differ".into()));
        }
        let fresh = Self::from_params(self.config.clone(), params)?;
        self.params = fresh.params;
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.layout.branch.is_some()
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn cond_dim(&self) -> Option<usize> {
        self.config.cond_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Injection matrices (all zero right after conditional initialization).
    pub fn injection_weights(&self) -> Vec<&Tensor> {
        self.layout.branch.as_ref().map(|b| b.inject.iter().map(|&i| self.params.at(i)).collect()).unwrap_or_default()
    }

    /// Input layer plus residual blocks. When `inject` is given, `enc[k]·Z_k`
    /// is added after the input layer (k = 0) and after block k − 1.
    fn stack_forward(&self, tape: &mut Tape, p: &[Var], s: &Stack, input: Var, inject: Option<(&[Var], &[usize])>) -> Result<Vec<Var>> {
        let h = tape.matmul(input, p[s.in_w])?;
        let mut h = tape.add_bias(h, p[s.in_b])?;
        if let Some((enc, z)) = inject {
            let inj = tape.matmul(enc[0], p[z[0]])?;
            h = tape.add(h, inj)?;
        }
        let mut acts = vec![h];
        for (i, b) in s.blocks.iter().enumerate() {
            let a = tape.silu(h);
            let zb = tape.matmul(a, p[b.w])?;
            let zb = tape.add_bias(zb, p[b.b])?;
            let base = match b.skip {
                Some(sk) => tape.matmul(h, p[sk])?,
                None => h,
            };
            h = tape.add(base, zb)?;
            if let Some((enc, z)) = inject {
                let inj = tape.matmul(enc[i + 1], p[z[i + 1]])?;
                h = tape.add(h, inj)?;
            }
            acts.push(h);
        }
        Ok(acts)
    }

    /// Records the forward pass on `tape`. `p` are this network's parameters
    /// bound on the same tape (see [`ParamStore::bind`]).
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x_t: Var, t: &[usize], cond: CondInput<'_>) -> Result<Var> {
        let xt = tape.value(x_t);
        let rows = xt.rows();
        check_dim("denoiser input", self.config.data_dim, xt.cols())?;
        check_dim("timestep count", rows, t.len())?;
        let e = self.config.time_embed_dim;
        let mut temb = Vec::with_capacity(rows * e);
        for &ti in t {
            temb.extend(embed(ti, e));
        }
        let temb = tape.constant(Tensor::matrix(rows, e, temb)?);
        let inp = tape.concat_cols(x_t, temb)?;

        let trunk = match (&self.layout.branch, cond) {
            (None, CondInput::Null) => self.stack_forward(tape, p, &self.layout.trunk, inp, None)?,
            (None, _) => return Err(Error::InvalidArgument("condition passed to an unconditional denoiser".into())),
            (Some(br), cond) => {
                let cd = self.config.cond_dim.expect("branch implies cond_dim");
                let c_in = self.cond_rows(tape, p, br, rows, cd, cond)?;
                let enc_inp = tape.concat_cols(c_in, temb)?;
                let enc = self.stack_forward(tape, p, &br.enc, enc_inp, None)?;
                self.stack_forward(tape, p, &self.layout.trunk, inp, Some((&enc, &br.inject)))?
            }
        };
        let a = tape.silu(*trunk.last().expect("input layer present"));
        let out = tape.matmul(a, p[self.layout.out_w])?;
        tape.add_bias(out, p[self.layout.out_b])
    }

    fn cond_rows(&self, tape: &mut Tape, p: &[Var], br: &Branch, rows: usize, cd: usize, cond: CondInput<'_>) -> Result<Var> {
        let null_b = |tape: &mut Tape| -> Result<Var> {
            let z = tape.constant(Tensor::zeros(vec![rows, cd]));
            tape.add_bias(z, p[br.null])
        };
        match cond {
            CondInput::Null => null_b(tape),
            CondInput::Values(v) => {
                check_dim("condition rows", rows, v.rows())?;
                check_dim("condition", cd, v.cols())?;
                Ok(tape.constant(v.clone()))
            }
            CondInput::Masked { values, null_rows } => {
                check_dim("condition rows", rows, values.rows())?;
                check_dim("condition", cd, values.cols())?;
                check_dim("null mask", rows, null_rows.len())?;
                if null_rows.iter().all(|&n| !n) {
                    return Ok(tape.constant(values.clone()));
                }
                if null_rows.iter().all(|&n| n) {
                    return null_b(tape);
                }
                let mut kept = values.clone();
                let mut null_mask = Tensor::zeros(vec![rows, cd]);
                for (i, &is_null) in null_rows.iter().enumerate() {
                    if is_null {
                        kept.data_mut()[i * cd..(i + 1) * cd].iter_mut().for_each(|v| *v = 0.0);
                        null_mask.data_mut()[i * cd..(i + 1) * cd].iter_mut().for_each(|v| *v = 1.0);
                    }
                }
                let kept = tape.constant(kept);
                let nb = null_b(tape)?;
                let m = tape.constant(null_mask);
                let nulls = tape.mul(nb, m)?;
                tape.add(kept, nulls)
            }
        }
    }

    /// Value-only forward pass.
    pub fn denoise(&self, x_t: &Tensor, t: &[usize], cond: CondInput<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, &p, x, t, cond)?;
        Ok(tape.value(out).clone())
    }
}
