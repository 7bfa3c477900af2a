//! Causal sequence backbones that map an R-R history to per-beat inverse
//! Gaussian parameters.
//!
//! Every variant shares the same skeleton: each scalar interval is
//! projected to a `model_dim` embedding with layer normalization, a
//! recurrent block is applied with a residual connection
//! `h1_t = h_t + B(h_{1:t})`, and two heads read the result. The mean head
//! is a linear map through a shifted softplus, so predicted means stay
//! above the 0.3 s floor; the log-variance head is a two-layer tanh MLP
//! clipped to [-9, 1.5].
//!
//! Block variants: textbook GRU and LSTM recurrences, a diagonal linear
//! state-space layer with zero-order-hold discretization of a learnable
//! negative-real diagonal, and a selective version whose step size and
//! projections are input-dependent.

use crate::autodiff::{Graph, Param, Tid};
use crate::igdist::{IGParams, IGTrajectory};
use rand::Rng;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackboneError {
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("forward needs at least 2 intervals, got {0}")]
    SequenceTooShort(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite model output at step {step}: mu={mu}, logvar={logvar}")]
    NonFiniteOutput { step: usize, mu: f64, logvar: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Gru,
    Lstm,
    SsmDiag,
    SsmSelective,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Gru,
        Variant::Lstm,
        Variant::SsmDiag,
        Variant::SsmSelective,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Gru => "gru",
            Variant::Lstm => "lstm",
            Variant::SsmDiag => "ssm-diag",
            Variant::SsmSelective => "ssm-selective",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(Variant::Gru),
            "lstm" => Ok(Variant::Lstm),
            "ssm-diag" => Ok(Variant::SsmDiag),
            "ssm-selective" => Ok(Variant::SsmSelective),
            other => Err(format!(
                "unknown variant '{other}' (expected gru|lstm|ssm-diag|ssm-selective)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub model_dim: usize,
    /// State dimension of the SSM variants; ignored by GRU/LSTM.
    pub state_dim: usize,
    /// Additive floor on the predicted mean, seconds.
    pub mu_floor: f64,
    pub logvar_lo: f64,
    pub logvar_hi: f64,
    /// The log-variance clip is always active during training; this flag
    /// also applies it at inference (default).
    pub clip_at_inference: bool,
}

impl BackboneConfig {
    pub fn new(variant: Variant) -> Self {
        BackboneConfig {
            variant,
            model_dim: 64,
            state_dim: 32,
            mu_floor: 0.3,
            logvar_lo: -9.0,
            logvar_hi: 1.5,
            clip_at_inference: true,
        }
    }

    pub fn with_dims(variant: Variant, model_dim: usize, state_dim: usize) -> Self {
        BackboneConfig {
            model_dim,
            state_dim,
            ..BackboneConfig::new(variant)
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.model_dim == 0 {
            return Err(BackboneError::Config("model_dim must be > 0".into()));
        }
        if matches!(self.variant, Variant::SsmDiag | Variant::SsmSelective) && self.state_dim == 0 {
            return Err(BackboneError::Config(
                "state_dim must be > 0 for SSM variants".into(),
            ));
        }
        if self.mu_floor <= 0.0 {
            return Err(BackboneError::Config("mu_floor must be > 0".into()));
        }
        if self.logvar_lo >= self.logvar_hi {
            return Err(BackboneError::Config(
                "logvar clip interval must have lo < hi".into(),
            ));
        }
        Ok(())
    }
}

/// All learnable tensors of one backbone plus both heads.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub config: BackboneConfig,
    pub params: Vec<Param>,
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl ModelParameters {
    /// Fresh parameters: uniform fan-in scaling for dense maps, biases at
    /// zero except the LSTM forget gate (1), the mean-head bias (initial
    /// mu ~ 0.9 s) and the variance-head output bias (initial sigma
    /// ~ 82 ms). SSM diagonals start log-spaced over beat timescales.
    pub fn init<R: Rng + ?Sized>(
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self, BackboneError> {
        config.validate()?;
        let d = config.model_dim;
        let n = config.state_dim;
        let mut params = Vec::new();
        let dense = |rng: &mut R, name: &str, shape: &[usize], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let v: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-s..s))
                .collect();
            Param::new(name, shape, v)
        };

        params.push(dense(rng, "embed.w", &[d], 1));
        params.push(Param::new("embed.b", &[d], vec![0.0; d]));
        params.push(Param::new("ln.gamma", &[d], vec![1.0; d]));
        params.push(Param::new("ln.beta", &[d], vec![0.0; d]));

        match config.variant {
            Variant::Gru => {
                params.push(dense(rng, "gru.wx", &[3 * d, d], d));
                params.push(dense(rng, "gru.whzr", &[2 * d, d], d));
                params.push(dense(rng, "gru.whc", &[d, d], d));
                params.push(Param::new("gru.b", &[3 * d], vec![0.0; 3 * d]));
            }
            Variant::Lstm => {
                params.push(dense(rng, "lstm.wx", &[4 * d, d], d));
                params.push(dense(rng, "lstm.wh", &[4 * d, d], d));
                // Gate order [i, f, g, o]; forget-gate bias starts at 1.
                let mut b = vec![0.0; 4 * d];
                b[d..2 * d].iter_mut().for_each(|v| *v = 1.0);
                params.push(Param::new("lstm.b", &[4 * d], b));
            }
            Variant::SsmDiag => {
                params.push(Param::new("ssm.log_a", &[d, n], log_spaced_diag(d, n)));
                let log_dt: Vec<f64> = (0..d)
                    .map(|_| rng.random_range(0.001f64.ln()..0.1f64.ln()))
                    .collect();
                params.push(Param::new("ssm.log_dt", &[d], log_dt));
                params.push(Param::new("ssm.b", &[d, n], vec![1.0; d * n]));
                params.push(dense(rng, "ssm.c", &[d, n], n));
                params.push(Param::new("ssm.d", &[d], vec![1.0; d]));
            }
            Variant::SsmSelective => {
                params.push(Param::new("sel.log_a", &[d, n], log_spaced_diag(d, n)));
                params.push(dense(rng, "sel.w_dt", &[d, d], d));
                let b_dt: Vec<f64> = (0..d)
                    .map(|_| softplus_inv(rng.random_range(0.001f64.ln()..0.1f64.ln()).exp()))
                    .collect();
                params.push(Param::new("sel.b_dt", &[d], b_dt));
                params.push(dense(rng, "sel.w_b", &[n, d], d));
                params.push(dense(rng, "sel.w_c", &[n, d], d));
                params.push(Param::new("sel.d", &[d], vec![1.0; d]));
                params.push(dense(rng, "sel.w_gate", &[d, d], d));
                params.push(Param::new("sel.b_gate", &[d], vec![0.0; d]));
            }
        }

        params.push(dense(rng, "mu.w", &[1, d], d));
        params.push(Param::new("mu.b", &[1], vec![softplus_inv(0.6)]));
        params.push(dense(rng, "var.w1", &[d, d], d));
        params.push(Param::new("var.b1", &[d], vec![0.0; d]));
        params.push(dense(rng, "var.w2", &[1, d], d));
        params.push(Param::new("var.b2", &[1], vec![-5.0]));

        Ok(ModelParameters { config, params })
    }

    pub fn idx(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named '{name}'"))
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = self.idx(name);
        &mut self.params[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.zero_grad());
    }

    /// Zero the weights through which the block contributes to its output,
    /// making `block_forward` the identity (residual path only).
    pub fn zero_block_output(&mut self) {
        let names: &[&str] = match self.config.variant {
            Variant::Gru => &["gru.wx", "gru.whzr", "gru.whc", "gru.b"],
            Variant::Lstm => &["lstm.wx", "lstm.wh", "lstm.b"],
            Variant::SsmDiag => &["ssm.c", "ssm.d"],
            Variant::SsmSelective => &["sel.w_c", "sel.d"],
        };
        for name in names {
            self.get_mut(name).value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Bind every parameter as a gradient-requiring leaf of `g`. The
    /// result pairs parameter indices with their tape ids, in the layout
    /// [`crate::autodiff::accumulate_grads`] expects.
    pub fn bind(&self, g: &mut Graph) -> Vec<(usize, Tid)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (i, g.param(p)))
            .collect()
    }
}

fn log_spaced_diag(d: usize, n: usize) -> Vec<f64> {
    // Magnitudes geometrically spaced over 0.5 .. 32, replicated per
    // channel: decay horizons from under a beat to tens of beats.
    let (lo, hi) = (0.5f64.ln(), 32.0f64.ln());
    let mut v = Vec::with_capacity(d * n);
    for _ in 0..d {
        for k in 0..n {
            let t = if n == 1 {
                0.0
            } else {
                k as f64 / (n - 1) as f64
            };
            v.push(lo + t * (hi - lo));
        }
    }
    v
}

fn tid(binding: &[(usize, Tid)], params: &ModelParameters, name: &str) -> Tid {
    binding[params.idx(name)].1
}

/// Per-position embedding with layer normalization:
/// `h_t = LayerNorm(w_e * x_t + b_e)`.
pub fn embed(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    x: &[f64],
) -> Result<Vec<Tid>, BackboneError> {
    if x.is_empty() {
        return Err(BackboneError::EmptySequence);
    }
    let w = tid(binding, params, "embed.w");
    let b = tid(binding, params, "embed.b");
    let gamma = tid(binding, params, "ln.gamma");
    let beta = tid(binding, params, "ln.beta");
    Ok(x.iter()
        .map(|&xt| {
            let scaled = g.scale(w, xt);
            let raw = g.add(scaled, b);
            g.layer_norm(raw, gamma, beta)
        })
        .collect())
}

/// Residual recurrent block: `h1_t = h_t + B(h_{1:t})` with the configured
/// variant as `B`. Strictly causal in `t`.
pub fn block_forward(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    h: &[Tid],
) -> Result<Vec<Tid>, BackboneError> {
    if h.is_empty() {
        return Err(BackboneError::EmptySequence);
    }
    let inner = match params.config.variant {
        Variant::Gru => gru_scan(g, params, binding, h),
        Variant::Lstm => lstm_scan(g, params, binding, h),
        Variant::SsmDiag => ssm_diag_scan(g, params, binding, h),
        Variant::SsmSelective => ssm_selective_scan(g, params, binding, h),
    };
    Ok(h.iter().zip(inner).map(|(&ht, bt)| g.add(ht, bt)).collect())
}

fn gru_scan(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    h: &[Tid],
) -> Vec<Tid> {
    let d = params.config.model_dim;
    let wx = tid(binding, params, "gru.wx");
    let whzr = tid(binding, params, "gru.whzr");
    let whc = tid(binding, params, "gru.whc");
    let b = tid(binding, params, "gru.b");
    let bz = g.slice(b, 0, d);
    let br = g.slice(b, d, d);
    let bc = g.slice(b, 2 * d, d);
    let mut state = g.constant(&[d], vec![0.0; d]);
    let mut out = Vec::with_capacity(h.len());
    for &xt in h {
        let gx = g.matvec(wx, xt);
        let gxz = g.slice(gx, 0, d);
        let gxr = g.slice(gx, d, d);
        let gxc = g.slice(gx, 2 * d, d);
        let ghzr = g.matvec(whzr, state);
        let ghz = g.slice(ghzr, 0, d);
        let ghr = g.slice(ghzr, d, d);
        let z = {
            let pre = g.add_n(&[gxz, ghz, bz]);
            g.sigmoid(pre)
        };
        let r = {
            let pre = g.add_n(&[gxr, ghr, br]);
            g.sigmoid(pre)
        };
        let rs = g.mul(r, state);
        let ghc = g.matvec(whc, rs);
        let c = {
            let pre = g.add_n(&[gxc, ghc, bc]);
            g.tanh(pre)
        };
        // h' = (1-z) h + z c, written as h + z (c - h).
        let delta = g.sub(c, state);
        let zd = g.mul(z, delta);
        state = g.add(state, zd);
        out.push(state);
    }
    out
}

fn lstm_scan(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    h: &[Tid],
) -> Vec<Tid> {
    let d = params.config.model_dim;
    let wx = tid(binding, params, "lstm.wx");
    let wh = tid(binding, params, "lstm.wh");
    let b = tid(binding, params, "lstm.b");
    let mut hidden = g.constant(&[d], vec![0.0; d]);
    let mut cell = g.constant(&[d], vec![0.0; d]);
    let mut out = Vec::with_capacity(h.len());
    for &xt in h {
        let px = g.matvec(wx, xt);
        let ph = g.matvec(wh, hidden);
        let pre = g.add_n(&[px, ph, b]);
        let i_pre = g.slice(pre, 0, d);
        let f_pre = g.slice(pre, d, d);
        let g_pre = g.slice(pre, 2 * d, d);
        let o_pre = g.slice(pre, 3 * d, d);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let gg = g.tanh(g_pre);
        let o = g.sigmoid(o_pre);
        let fc = g.mul(f, cell);
        let ig = g.mul(i, gg);
        cell = g.add(fc, ig);
        let tc = g.tanh(cell);
        hidden = g.mul(o, tc);
        out.push(hidden);
    }
    out
}

fn ssm_diag_scan(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    h: &[Tid],
) -> Vec<Tid> {
    let d = params.config.model_dim;
    let n = params.config.state_dim;
    let log_a = tid(binding, params, "ssm.log_a");
    let log_dt = tid(binding, params, "ssm.log_dt");
    let b_in = tid(binding, params, "ssm.b");
    let c_out = tid(binding, params, "ssm.c");
    let d_skip = tid(binding, params, "ssm.d");

    // Zero-order hold of x' = a x + b u with a = -exp(log_a) < 0:
    // abar = exp(dt a), bbar = dt * (e^(dt a) - 1)/(dt a) * b.
    let dt = g.exp(log_dt);
    let dt_rep = g.repeat_inner(dt, n);
    let a_mag = g.exp(log_a);
    let a = g.neg(a_mag);
    let da = g.mul(dt_rep, a);
    let abar = g.exp(da);
    let phi = g.expm1_over(da);
    let dphi = g.mul(dt_rep, phi);
    let bbar = g.mul(dphi, b_in);

    let mut state = g.constant(&[d, n], vec![0.0; d * n]);
    let mut out = Vec::with_capacity(h.len());
    for &ut in h {
        let u_rep = g.repeat_inner(ut, n);
        let decay = g.mul(abar, state);
        let drive = g.mul(bbar, u_rep);
        state = g.add(decay, drive);
        let cs = g.mul(c_out, state);
        let y = g.sum_inner(cs);
        let du = g.mul(d_skip, ut);
        out.push(g.add(y, du));
    }
    out
}

fn ssm_selective_scan(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    h: &[Tid],
) -> Vec<Tid> {
    let d = params.config.model_dim;
    let n = params.config.state_dim;
    let log_a = tid(binding, params, "sel.log_a");
    let w_dt = tid(binding, params, "sel.w_dt");
    let b_dt = tid(binding, params, "sel.b_dt");
    let w_b = tid(binding, params, "sel.w_b");
    let w_c = tid(binding, params, "sel.w_c");
    let d_skip = tid(binding, params, "sel.d");
    let w_gate = tid(binding, params, "sel.w_gate");
    let b_gate = tid(binding, params, "sel.b_gate");

    let a_mag = g.exp(log_a);
    let a = g.neg(a_mag);

    let mut state = g.constant(&[d, n], vec![0.0; d * n]);
    let mut out = Vec::with_capacity(h.len());
    for &ut in h {
        // Input-dependent step size and projections.
        let dt_lin = g.matvec(w_dt, ut);
        let dt_pre = g.add(dt_lin, b_dt);
        let dt = g.softplus(dt_pre);
        let bt = g.matvec(w_b, ut);
        let ct = g.matvec(w_c, ut);

        let dt_rep = g.repeat_inner(dt, n);
        let da = g.mul(dt_rep, a);
        let abar = g.exp(da);
        let dtu = g.mul(dt, ut);
        let drive = g.outer(dtu, bt);
        let decay = g.mul(abar, state);
        state = g.add(decay, drive);

        let y = g.matvec(state, ct);
        let du = g.mul(d_skip, ut);
        let yd = g.add(y, du);
        let gate_lin = g.matvec(w_gate, ut);
        let gate_pre = g.add(gate_lin, b_gate);
        let gate = g.sigmoid(gate_pre);
        out.push(g.mul(yd, gate));
    }
    out
}

/// Mean head: `mu_t = softplus(w h + b) + mu_floor`.
pub fn mean_head(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    h1: Tid,
) -> Tid {
    let w = tid(binding, params, "mu.w");
    let b = tid(binding, params, "mu.b");
    let lin = g.matvec(w, h1);
    let z = g.add(lin, b);
    let sp = g.softplus(z);
    g.add_scalar(sp, params.config.mu_floor)
}

/// Log-variance head: two-layer tanh MLP, output clipped to the
/// configured interval (straight-through gradient).
pub fn var_head(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    h1: Tid,
    clip: bool,
) -> Tid {
    let w1 = tid(binding, params, "var.w1");
    let b1 = tid(binding, params, "var.b1");
    let w2 = tid(binding, params, "var.w2");
    let b2 = tid(binding, params, "var.b2");
    let lin1 = g.matvec(w1, h1);
    let pre1 = g.add(lin1, b1);
    let act = g.tanh(pre1);
    let lin2 = g.matvec(w2, act);
    let raw = g.add(lin2, b2);
    if clip {
        g.clip_straight_through(raw, params.config.logvar_lo, params.config.logvar_hi)
    } else {
        raw
    }
}

/// Per-step prediction nodes: `mu[i]` and `logvar[i]` condition on
/// `x[0..=i]` and pair with target `x[i+1]`.
#[derive(Debug)]
pub struct SequenceOutput {
    pub mu: Vec<Tid>,
    pub logvar: Vec<Tid>,
}

impl SequenceOutput {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Full forward pass over a sequence of `T >= 2` intervals, producing
/// `T - 1` prediction pairs. The prediction at the last position is
/// discarded (it has no target); the first uses only `x[0]`.
pub fn forward(
    g: &mut Graph,
    params: &ModelParameters,
    binding: &[(usize, Tid)],
    x: &[f64],
    training: bool,
) -> Result<SequenceOutput, BackboneError> {
    if x.len() < 2 {
        return Err(BackboneError::SequenceTooShort(x.len()));
    }
    let clip = training || params.config.clip_at_inference;
    let h = embed(g, params, binding, x)?;
    let h1 = block_forward(g, params, binding, &h)?;
    let mut mu = Vec::with_capacity(x.len() - 1);
    let mut logvar = Vec::with_capacity(x.len() - 1);
    for &ht in h1.iter().take(x.len() - 1) {
        mu.push(mean_head(g, params, binding, ht));
        logvar.push(var_head(g, params, binding, ht, clip));
    }
    Ok(SequenceOutput { mu, logvar })
}

/// Tape-side total negative log-likelihood over one sequence:
///
/// ```text
/// l_i = 1/2 [ln(2 pi x^3) + logvar_i - 3 ln mu_i]
///     + mu_i (x - mu_i)^2 exp(-logvar_i) / (2 x),    summed over i.
/// ```
pub fn nll_loss(g: &mut Graph, out: &SequenceOutput, targets: &[f64]) -> Tid {
    assert_eq!(
        out.len(),
        targets.len(),
        "nll_loss: {} predictions vs {} targets",
        out.len(),
        targets.len()
    );
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut steps = Vec::with_capacity(targets.len());
    for (i, &x) in targets.iter().enumerate() {
        let half_lv = g.scale(out.logvar[i], 0.5);
        let ln_mu = g.log(out.mu[i]);
        let mean_term = g.scale(ln_mu, -1.5);
        let neg_mu = g.neg(out.mu[i]);
        let diff = g.add_scalar(neg_mu, x);
        let diff_sq = g.mul(diff, diff);
        let neg_lv = g.neg(out.logvar[i]);
        let inv_var = g.exp(neg_lv);
        let mu_diff = g.mul(out.mu[i], diff_sq);
        let quad_raw = g.mul(mu_diff, inv_var);
        let quad = g.scale(quad_raw, 1.0 / (2.0 * x));
        let partial = g.add_n(&[half_lv, mean_term, quad]);
        steps.push(g.add_scalar(partial, 0.5 * (two_pi * x.powi(3)).ln()));
    }
    g.add_n(&steps)
}

/// Forward pass without gradient bookkeeping, packaged as an
/// [`IGTrajectory`] of (mu_i, sigma_i) pairs against targets `x[1..]`.
pub fn predict_trajectory(
    params: &ModelParameters,
    x: &[f64],
) -> Result<IGTrajectory, BackboneError> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let out = forward(&mut g, params, &binding, x, false)?;
    let mut pairs = Vec::with_capacity(out.len());
    for i in 0..out.len() {
        let mu = g.scalar(out.mu[i]);
        let lv = g.scalar(out.logvar[i]);
        let sigma = (0.5 * lv).exp();
        let p = IGParams::new(mu, sigma).map_err(|_| BackboneError::NonFiniteOutput {
            step: i,
            mu,
            logvar: lv,
        })?;
        pairs.push(p);
    }
    IGTrajectory::new(pairs, x[1..].to_vec()).map_err(|_| BackboneError::SequenceTooShort(x.len()))
}

// --- checkpoint io ---------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

const CHECKPOINT_MAGIC: &str = "igbeat-checkpoint v1";

/// Write parameters as a self-describing text checkpoint: a magic line,
/// `key=value` config echo, then one `tensor <name> <shape...>` line plus
/// one line of row-major values per tensor. Floats use Rust's shortest
/// round-trip formatting, so reload is bit-exact.
pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<(), CheckpointError> {
    let mut s = String::new();
    s.push_str(CHECKPOINT_MAGIC);
    s.push('\n');
    let c = &params.config;
    s.push_str(&format!("variant={}\n", c.variant));
    s.push_str(&format!("model_dim={}\n", c.model_dim));
    s.push_str(&format!("state_dim={}\n", c.state_dim));
    s.push_str(&format!("mu_floor={:?}\n", c.mu_floor));
    s.push_str(&format!("logvar_lo={:?}\n", c.logvar_lo));
    s.push_str(&format!("logvar_hi={:?}\n", c.logvar_hi));
    s.push_str(&format!("clip_at_inference={}\n", c.clip_at_inference));
    s.push_str(&format!("tensors={}\n", params.params.len()));
    for p in &params.params {
        s.push_str("tensor ");
        s.push_str(&p.name);
        for dim in &p.shape {
            s.push_str(&format!(" {dim}"));
        }
        s.push('\n');
        let mut first = true;
        for v in &p.value {
            if !first {
                s.push(' ');
            }
            s.push_str(&format!("{v:?}"));
            first = false;
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| CheckpointError::Parse {
        line: line + 1,
        msg,
    };

    let (ln, magic) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty file".into()))?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(parse_err(ln, format!("bad magic '{magic}'")));
    }

    let mut kv = std::collections::HashMap::new();
    let mut tensors_declared = 0usize;
    for _ in 0..8 {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, "truncated header".into()))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(ln, format!("expected key=value, got '{line}'")))?;
        if k == "tensors" {
            tensors_declared = v
                .parse()
                .map_err(|e| parse_err(ln, format!("bad tensor count: {e}")))?;
        } else {
            kv.insert(k.to_string(), (ln, v.to_string()));
        }
    }
    let field = |k: &str| -> Result<(usize, String), CheckpointError> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| parse_err(0, format!("missing header field '{k}'")))
    };
    let (ln_v, variant) = field("variant")?;
    let variant = Variant::from_str(&variant).map_err(|e| parse_err(ln_v, e))?;
    let parse_num = |k: &str| -> Result<f64, CheckpointError> {
        let (ln, v) = field(k)?;
        v.parse()
            .map_err(|e| parse_err(ln, format!("bad value for {k}: {e}")))
    };
    let config = BackboneConfig {
        variant,
        model_dim: parse_num("model_dim")? as usize,
        state_dim: parse_num("state_dim")? as usize,
        mu_floor: parse_num("mu_floor")?,
        logvar_lo: parse_num("logvar_lo")?,
        logvar_hi: parse_num("logvar_hi")?,
        clip_at_inference: field("clip_at_inference")?.1 == "true",
    };

    let mut params = Vec::with_capacity(tensors_declared);
    while let Some((ln, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        if toks.next() != Some("tensor") {
            return Err(parse_err(ln, format!("expected tensor line, got '{line}'")));
        }
        let name = toks
            .next()
            .ok_or_else(|| parse_err(ln, "tensor line missing name".into()))?;
        let shape: Vec<usize> = toks
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(ln, format!("bad shape: {e}")))?;
        let (ln_vals, vals_line) = lines
            .next()
            .ok_or_else(|| parse_err(ln, format!("missing values for tensor '{name}'")))?;
        let value: Vec<f64> = vals_line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(ln_vals, format!("bad value: {e}")))?;
        let expect: usize = shape.iter().product();
        if value.len() != expect {
            return Err(parse_err(
                ln_vals,
                format!(
                    "tensor '{name}': expected {expect} values, got {}",
                    value.len()
                ),
            ));
        }
        params.push(Param::new(name, &shape, value));
    }
    if params.len() != tensors_declared {
        return Err(parse_err(
            0,
            format!(
                "declared {tensors_declared} tensors, found {}",
                params.len()
            ),
        ));
    }
    Ok(ModelParameters { config, params })
}
