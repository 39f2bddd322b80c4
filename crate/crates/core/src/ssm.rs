//! Discretized state-space sequence kernels.
//!
//! The continuous system `h' = A h + B x`, `y = C h + D x` with diagonal `A`
//! is discretized by zero-order hold:
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − I) · ΔB
//! ```
//!
//! and then evaluated either as a recurrence (`selective_scan`, which also
//! supports per-token Δ, B, C) or, for token-invariant parameters, as a causal
//! convolution with `K̄ = (C B̄, C Ā B̄, …, C Ā^{L−1} B̄)` (`ssm_conv_form`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::softplus;
use crate::math;
use crate::{Error, Result};

/// Below this `|ΔA|` the input gain uses its series expansion instead of
/// `expm1(ΔA) / A`.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// `φ(Δ, a) = (exp(Δa) − 1) / a`, so that `B̄ = φ · B` on each diagonal entry.
pub fn input_gain(delta: f64, a: f64) -> f64 {
    if math::abs(delta * a) < SERIES_THRESHOLD {
        input_gain_series(delta, a)
    } else {
        input_gain_exact(delta, a)
    }
}

/// Closed-form branch of [`input_gain`].
pub fn input_gain_exact(delta: f64, a: f64) -> f64 {
    math::expm1(delta * a) / a
}

/// Series branch of [`input_gain`]: `Δ(1 + z/2 + z²/6)` with `z = Δa`. Its
/// `Δ → 0` / `a → 0` limit is `Δ`.
pub fn input_gain_series(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    delta * (1.0 + z * (0.5 + z / 6.0))
}

// ∂φ/∂a
fn input_gain_da(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    if math::abs(z) < 1e-3 {
        delta * delta * (0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0))))
    } else {
        (z * math::exp(z) - math::expm1(z)) / (a * a)
    }
}

/// Zero-order-hold discretization of a diagonal system.
///
/// `a` holds the (strictly negative) diagonal of `A`, `b` the input map.
/// Returns `(Ā, B̄)` as diagonals / vectors of the same length.
pub fn discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("A has {} states but B has {}", a.len(), b.len())));
    }
    let a_bar = a.iter().map(|&ai| math::exp(delta * ai)).collect();
    let b_bar = a.iter().zip(b).map(|(&ai, &bi)| input_gain(delta, ai) * bi).collect();
    Ok((a_bar, b_bar))
}

/// Input-dependent projections of a selective single-channel SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub w_delta: f64,
    pub b_delta: f64,
    pub w_b: Vec<f64>,
    pub w_c: Vec<f64>,
}

/// Single-channel state-space parameters.
///
/// When `selection` is set, every token `x_t` gets its own
/// `Δ_t = softplus(w_Δ x_t + b_Δ)`, `B_t = w_B x_t`, `C_t = w_C x_t`, and the
/// fixed `delta`, `b`, `c` fields are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`; every entry strictly negative.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: f64,
    pub selection: Option<Selection>,
}

impl SsmParams {
    /// Token-invariant parameters with `A = −exp(a_log)`.
    pub fn from_log(a_log: &[f64], b: Vec<f64>, c: Vec<f64>, d: f64, delta: f64) -> Self {
        SsmParams { a: a_log.iter().map(|&v| -math::exp(v)).collect(), b, c, d, delta, selection: None }
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn is_selective(&self) -> bool {
        self.selection.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.len();
        if n == 0 {
            return Err(Error::Config("state dimension must be at least 1".into()));
        }
        if let Some(bad) = self.a.iter().find(|&&v| !(v < 0.0)) {
            return Err(Error::Domain(format!("A diagonal entries must be negative, got {bad}")));
        }
        let lens_ok = match &self.selection {
            Some(s) => s.w_b.len() == n && s.w_c.len() == n,
            None => self.b.len() == n && self.c.len() == n,
        };
        if !lens_ok {
            return Err(Error::Dimension(format!("B/C do not match state dimension {n}")));
        }
        if self.selection.is_none() && !(self.delta > 0.0) {
            return Err(Error::Domain(format!("step size must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    /// Discretized kernel of length `len`; only defined for token-invariant parameters.
    pub fn kernel(&self, len: usize) -> Result<SsmKernel> {
        self.validate()?;
        if self.is_selective() {
            return Err(Error::Contract(
                "convolution form needs token-invariant parameters; use selective_scan".into(),
            ));
        }
        let (a_bar, b_bar) = discretize(&self.a, &self.b, self.delta)?;
        let mut power = b_bar.clone();
        let mut k_bar = Vec::with_capacity(len);
        for _ in 0..len {
            k_bar.push(self.c.iter().zip(&power).map(|(c, p)| c * p).sum());
            for (p, a) in power.iter_mut().zip(&a_bar) {
                *p *= a;
            }
        }
        Ok(SsmKernel { a_bar, b_bar, k_bar })
    }
}

/// Discrete state matrix, input map and the resulting convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmKernel {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    /// `k_bar[j] = C Ā^j B̄`.
    pub k_bar: Vec<f64>,
}

/// Recurrence form: `h_t = Ā_t h_{t−1} + B̄_t x_t`, `y_t = C_t h_t + D x_t`, `h_0 = 0`.
pub fn selective_scan(x: &[f64], params: &SsmParams) -> Result<Vec<f64>> {
    params.validate()?;
    let n = params.state_dim();
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    let mut b_t = params.b.clone();
    let mut c_t = params.c.clone();
    for &xt in x {
        let delta = match &params.selection {
            Some(s) => {
                for i in 0..n {
                    b_t[i] = s.w_b[i] * xt;
                    c_t[i] = s.w_c[i] * xt;
                }
                softplus(s.w_delta * xt + s.b_delta)
            }
            None => params.delta,
        };
        let mut acc = 0.0;
        for i in 0..n {
            let a = params.a[i];
            h[i] = math::exp(delta * a) * h[i] + input_gain(delta, a) * b_t[i] * xt;
            acc += c_t[i] * h[i];
        }
        y.push(acc + params.d * xt);
    }
    Ok(y)
}

/// Convolution form: `y_t = Σ_{j≤t} K̄[j] x_{t−j} + D x_t`.
pub fn ssm_conv_form(x: &[f64], kernel: &SsmKernel, d: f64) -> Result<Vec<f64>> {
    if kernel.k_bar.len() < x.len() {
        return Err(Error::Dimension(format!(
            "kernel of length {} cannot cover a sequence of length {}",
            kernel.k_bar.len(),
            x.len()
        )));
    }
    Ok((0..x.len())
        .map(|t| {
            let conv: f64 = (0..=t).map(|j| kernel.k_bar[j] * x[t - j]).sum();
            conv + d * x[t]
        })
        .collect())
}

/// Convenience wrapper building the kernel from `params` first.
pub fn conv_form(x: &[f64], params: &SsmParams) -> Result<Vec<f64>> {
    let kernel = params.kernel(x.len())?;
    ssm_conv_form(x, &kernel, params.d)
}

/// Sizes of a multi-channel scan: `len` tokens, `channels` independent
/// sequences, `state` hidden units per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Multi-channel forward recurrence. Layouts: `x, delta: [l×c]`, `a: [c×n]`,
/// `b, cm: [l×n]`, `d: [c]`. Returns `y: [l×c]` and all hidden states `[l×c×n]`.
pub(crate) fn scan_forward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    cm: &[f64],
    d: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { len: l, channels: c, state: n } = dims;
    let mut y = vec![0.0; l * c];
    let mut states = vec![0.0; l * c * n];
    for t in 0..l {
        for ch in 0..c {
            let xt = x[t * c + ch];
            let dt = delta[t * c + ch];
            let mut acc = 0.0;
            for i in 0..n {
                let ai = a[ch * n + i];
                let prev = if t == 0 { 0.0 } else { states[((t - 1) * c + ch) * n + i] };
                let h = math::exp(dt * ai) * prev + input_gain(dt, ai) * b[t * n + i] * xt;
                states[(t * c + ch) * n + i] = h;
                acc += cm[t * n + i] * h;
            }
            y[t * c + ch] = acc + d[ch] * xt;
        }
    }
    (y, states)
}

pub(crate) struct ScanAdjoints {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    cm: &[f64],
    d: &[f64],
    states: &[f64],
    gy: &[f64],
) -> ScanAdjoints {
    let ScanDims { len: l, channels: c, state: n } = dims;
    let mut adj = ScanAdjoints {
        x: vec![0.0; l * c],
        delta: vec![0.0; l * c],
        a: vec![0.0; c * n],
        b: vec![0.0; l * n],
        c: vec![0.0; l * n],
        d: vec![0.0; c],
    };
    // carried ∂L/∂h_t contributions from step t+1, per (channel, state)
    let mut carry = vec![0.0; c * n];
    for t in (0..l).rev() {
        for ch in 0..c {
            let xt = x[t * c + ch];
            let dt = delta[t * c + ch];
            let g = gy[t * c + ch];
            adj.d[ch] += g * xt;
            adj.x[t * c + ch] += g * d[ch];
            for i in 0..n {
                let ai = a[ch * n + i];
                let h = states[(t * c + ch) * n + i];
                let prev = if t == 0 { 0.0 } else { states[((t - 1) * c + ch) * n + i] };
                let gh = carry[ch * n + i] + g * cm[t * n + i];
                adj.c[t * n + i] += g * h;

                let a_bar = math::exp(dt * ai);
                let phi = input_gain(dt, ai);
                let bt = b[t * n + i];
                let g_abar = gh * prev;
                let g_phi = gh * bt * xt;
                adj.x[t * c + ch] += gh * phi * bt;
                adj.b[t * n + i] += gh * phi * xt;
                adj.delta[t * c + ch] += g_abar * a_bar * ai + g_phi * a_bar;
                adj.a[ch * n + i] += g_abar * a_bar * dt + g_phi * input_gain_da(dt, ai);
                carry[ch * n + i] = gh * a_bar;
            }
        }
    }
    adj
}
