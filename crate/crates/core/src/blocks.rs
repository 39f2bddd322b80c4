//! Mamba building blocks on the tape: a selective SSM direction, the
//! bidirectional SSM stage and the ConvMLP.
//!
//! Token sequences are `[l×c]` tensors. A block is
//! `x ← x + fwd(LN x) + rev(bwd(rev(LN x)))` followed by
//! `x ← x + Dropout(W2·GELU(DWConv(W1·x + b1)) + b2)`, where the depthwise
//! convolution runs on the `h×w` spatial layout of the tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::{Error, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Depthwise kernel size of the ConvMLP.
pub const DW_KERNEL: usize = 3;

/// Target `Ā = exp(Δ·A)` at `Δ = softplus(0) = ln 2`.
const INIT_DECAY: f64 = 0.9;

/// Uniform `±1/√fan_in` initialization.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in as f64);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// `a_log` such that `exp(softplus(0)·(−exp(a_log))) = INIT_DECAY`.
pub fn init_a_log() -> f64 {
    math::ln(-math::ln(INIT_DECAY) / core::f64::consts::LN_2)
}

/// Parameters of one scan direction over `c` channels with `n` states each.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmDirection {
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub d: ParamId,
}

impl SsmDirection {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize, n: usize) -> Self {
        SsmDirection {
            w_delta: store.add(format!("{prefix}.w_delta"), uniform_init(rng, &[c, c], c)),
            b_delta: store.add(format!("{prefix}.b_delta"), Tensor::zeros(&[c])),
            w_b: store.add(format!("{prefix}.w_b"), uniform_init(rng, &[c, n], c)),
            w_c: store.add(format!("{prefix}.w_c"), uniform_init(rng, &[c, n], c)),
            a_log: store.add(format!("{prefix}.a_log"), Tensor::full(&[c, n], init_a_log())),
            d: store.add(format!("{prefix}.d"), Tensor::full(&[c], 1.0)),
        }
    }

    /// `Δ = softplus(u W_Δ + b_Δ)`, `B = u W_B`, `C = u W_C`, `A = −exp(a_log)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        let w_delta = tape.param(store, self.w_delta);
        let b_delta = tape.param(store, self.b_delta);
        let w_b = tape.param(store, self.w_b);
        let w_c = tape.param(store, self.w_c);
        let a_log = tape.param(store, self.a_log);
        let d = tape.param(store, self.d);

        let pre = tape.matmul(u, w_delta)?;
        let pre = tape.add_row_bias(pre, b_delta)?;
        let delta = tape.softplus(pre);
        let b = tape.matmul(u, w_b)?;
        let c = tape.matmul(u, w_c)?;
        let a = tape.exp(a_log);
        let a = tape.neg(a);
        tape.selective_scan(u, delta, a, b, c, d)
    }

    /// Zeroes the output map and direct term so the direction emits zeros.
    pub fn silence(&self, store: &mut ParamStore) {
        store.value_mut(self.w_c).data_mut().fill(0.0);
        store.value_mut(self.d).data_mut().fill(0.0);
    }
}

/// `x + fwd(u) + rev(bwd(rev(u)))` with `u = LN(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiSsm {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub fwd: SsmDirection,
    pub bwd: SsmDirection,
}

impl BiSsm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize, n: usize) -> Self {
        BiSsm {
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::full(&[c], 1.0)),
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(&[c])),
            fwd: SsmDirection::new(store, rng, &format!("{prefix}.fwd"), c, n),
            bwd: SsmDirection::new(store, rng, &format!("{prefix}.bwd"), c, n),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = tape.param(store, self.ln_gain);
        let bias = tape.param(store, self.ln_bias);
        let u = tape.layer_norm(x, gain, bias)?;
        let f = self.fwd.forward(tape, store, u)?;
        let ur = tape.reverse_rows(u)?;
        let r = self.bwd.forward(tape, store, ur)?;
        let r = tape.reverse_rows(r)?;
        let s = tape.add(f, r)?;
        tape.add(x, s)
    }

    pub fn silence(&self, store: &mut ParamStore) {
        self.fwd.silence(store);
        self.bwd.silence(store);
    }
}

/// Two linear layers around a GELU-activated depthwise convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub dw: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dropout: f64,
}

impl ConvMlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: usize,
        expansion: usize,
        dropout: f64,
    ) -> Self {
        let hidden = c * expansion;
        ConvMlp {
            w1: store.add(format!("{prefix}.w1"), uniform_init(rng, &[c, hidden], c)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            dw: store.add(
                format!("{prefix}.dw"),
                uniform_init(rng, &[hidden, DW_KERNEL, DW_KERNEL], DW_KERNEL * DW_KERNEL),
            ),
            w2: store.add(format!("{prefix}.w2"), uniform_init(rng, &[hidden, c], hidden)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[c])),
            dropout,
        }
    }

    /// `x + Dropout(W2·GELU(DWConv(W1·x + b1)) + b2)` for `x[h·w × c]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: usize, w: usize) -> Result<Var> {
        let l = tape.shape(x)[0];
        if l != h * w {
            return Err(Error::Dimension(format!("ConvMLP got {l} tokens for a {h}×{w} map")));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let dw = tape.param(store, self.dw);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);

        let z = tape.matmul(x, w1)?;
        let z = tape.add_row_bias(z, b1)?;
        let z = tape.tokens_to_map(z, h, w)?;
        let z = tape.depthwise_conv2d(z, dw)?;
        let z = tape.map_to_tokens(z)?;
        let z = tape.gelu(z);
        let z = tape.matmul(z, w2)?;
        let z = tape.add_row_bias(z, b2)?;
        let z = tape.dropout(z, self.dropout)?;
        tape.add(x, z)
    }

    /// Zeroes the output layer so the block reduces to its residual path.
    pub fn silence(&self, store: &mut ParamStore) {
        store.value_mut(self.w2).data_mut().fill(0.0);
        store.value_mut(self.b2).data_mut().fill(0.0);
    }
}

/// Bidirectional SSM stage followed by a ConvMLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlock {
    pub ssm: BiSsm,
    pub mlp: ConvMlp,
}

impl MambaBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: usize,
        n: usize,
        expansion: usize,
        dropout: f64,
    ) -> Self {
        MambaBlock {
            ssm: BiSsm::new(store, rng, &format!("{prefix}.ssm"), c, n),
            mlp: ConvMlp::new(store, rng, &format!("{prefix}.mlp"), c, expansion, dropout),
        }
    }

    /// Runs the SSM stage over the tokens visited in `order` (row-major when
    /// `None`), scatters the result back and applies the ConvMLP on the
    /// `h×w` map.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        order: Option<&[usize]>,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let y = match order {
            Some(order) => {
                let seq = tape.permute_rows(x, order)?;
                let seq = self.ssm.forward(tape, store, seq)?;
                let inverse = crate::tensor::invert_permutation(order);
                tape.permute_rows(seq, &inverse)?
            }
            None => self.ssm.forward(tape, store, x)?,
        };
        self.mlp.forward(tape, store, y, h, w)
    }

    pub fn silence(&self, store: &mut ParamStore) {
        self.ssm.silence(store);
        self.mlp.silence(store);
    }
}

/// Names of every parameter registered under `prefix`.
pub fn names_with_prefix<'a>(store: &'a ParamStore, prefix: &'a str) -> Vec<String> {
    store.ids().map(|id| store.name(id)).filter(|n| n.starts_with(prefix)).map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_tokens(rng: &mut ChaCha8Rng, l: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[l, c], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn a_log_gives_target_decay() {
        let a = -math::exp(init_a_log());
        let delta = crate::kernels::softplus(0.0);
        assert!((math::exp(delta * a) - INIT_DECAY).abs() < 1e-12);
    }

    #[test]
    fn silenced_bissm_is_identity() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let b = BiSsm::new(&mut store, &mut r, "b", 3, 4);
        b.silence(&mut store);
        let x0 = random_tokens(&mut r, 5, 3);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &x0);
    }

    #[test]
    fn one_silenced_direction_leaves_the_other() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let b = BiSsm::new(&mut store, &mut r, "b", 2, 3);
        b.bwd.silence(&mut store);
        let x0 = random_tokens(&mut r, 6, 2);
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let y = b.forward(&mut tape, &store, x).unwrap();
        let g = tape.param(&store, b.ln_gain);
        let bb = tape.param(&store, b.ln_bias);
        let u = tape.layer_norm(x, g, bb).unwrap();
        let f = b.fwd.forward(&mut tape, &store, u).unwrap();
        let want = tape.add(x, f).unwrap();
        assert_eq!(tape.value(y), tape.value(want));
    }

    #[test]
    fn reversal_with_swapped_directions_reverses_output() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let b = BiSsm::new(&mut store, &mut r, "b", 3, 2);
        let swapped = BiSsm { fwd: b.bwd.clone(), bwd: b.fwd.clone(), ..b.clone() };
        let x0 = random_tokens(&mut r, 7, 3);
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let y = b.forward(&mut tape, &store, x).unwrap();
        let xr = tape.reverse_rows(x).unwrap();
        let yr = swapped.forward(&mut tape, &store, xr).unwrap();
        let yr = tape.reverse_rows(yr).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(yr)) < 1e-12);
    }

    #[test]
    fn palindrome_in_palindrome_out() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let b = BiSsm::new(&mut store, &mut r, "b", 2, 3);
        let shared = BiSsm { bwd: b.fwd.clone(), ..b.clone() };
        let half = random_tokens(&mut r, 3, 2);
        let mut data = half.data().to_vec();
        for t in (0..3).rev() {
            data.extend_from_slice(&half.data()[t * 2..t * 2 + 2]);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[6, 2], data).unwrap());
        let y = shared.forward(&mut tape, &store, x).unwrap();
        let yr = tape.reverse_rows(y).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(yr)) < 1e-12);
    }

    #[test]
    fn conv_mlp_identity_weights() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let m = ConvMlp::new(&mut store, &mut r, "m", 2, 1, 0.0);
        store.set_value(m.w1, Tensor::eye(2)).unwrap();
        store.set_value(m.w2, Tensor::eye(2)).unwrap();
        let mut delta = Tensor::zeros(&[2, 3, 3]);
        delta.set(&[0, 1, 1], 1.0);
        delta.set(&[1, 1, 1], 1.0);
        store.set_value(m.dw, delta).unwrap();
        let x0 = random_tokens(&mut r, 6, 2);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let z = m.forward(&mut tape, &store, x, 2, 3).unwrap();
        let want = x0.map(|v| v + crate::kernels::gelu(v));
        assert!(tape.value(z).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn conv_mlp_zero_in_zero_out_and_shape_check() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let m = ConvMlp::new(&mut store, &mut r, "m", 3, 2, 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let z = m.forward(&mut tape, &store, x, 2, 2).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        assert!(matches!(m.forward(&mut tape, &store, x, 3, 2), Err(Error::Dimension(_))));
    }

    fn finite_difference_check(
        store: &mut ParamStore,
        loss: impl Fn(&ParamStore) -> (f64, Vec<(ParamId, Tensor)>),
        tol: f64,
    ) {
        let (_, grads) = loss(store);
        let h = 1e-5;
        for (id, g) in grads {
            for i in 0..g.len() {
                let orig = store.value(id).data()[i];
                let at = |v: f64, s: &mut ParamStore| {
                    s.value_mut(id).data_mut()[i] = v;
                    loss(s).0
                };
                let fd = (-at(orig + 2.0 * h, store) + 8.0 * at(orig + h, store) - 8.0 * at(orig - h, store)
                    + at(orig - 2.0 * h, store))
                    / (12.0 * h);
                store.value_mut(id).data_mut()[i] = orig;
                let an = g.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel <= tol, "{} [{i}]: analytic {an} vs fd {fd}", store.name(id));
            }
        }
    }

    #[test]
    fn conv_mlp_gradients_match_finite_differences() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let m = ConvMlp::new(&mut store, &mut r, "m", 2, 2, 0.0);
        for id in [m.b1, m.b2] {
            let t = uniform_init(&mut r, store.value(id).shape(), 2);
            store.set_value(id, t).unwrap();
        }
        let x0 = random_tokens(&mut r, 6, 2);
        let wts = random_tokens(&mut r, 6, 2);
        let ids = [m.w1, m.b1, m.dw, m.w2, m.b2];
        finite_difference_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let x = tape.constant(x0.clone());
                let z = m.forward(&mut tape, s, x, 3, 2).unwrap();
                let w = tape.constant(wts.clone());
                let p = tape.mul(z, w).unwrap();
                let l = tape.sum(p);
                let g = tape.backward(l).unwrap();
                let mut acc = s.clone();
                acc.zero_grad();
                g.accumulate_into(&mut acc);
                (tape.value(l).item(), ids.iter().map(|&id| (id, acc.grad(id).clone())).collect())
            },
            1e-4,
        );
    }

    #[test]
    fn mamba_block_gradients_match_finite_differences() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let b = MambaBlock::new(&mut store, &mut r, "blk", 2, 3, 2, 0.0);
        let x0 = random_tokens(&mut r, 4, 2);
        let wts = random_tokens(&mut r, 4, 2);
        let order = vec![2, 0, 3, 1];
        let ids: Vec<ParamId> = store.ids().collect();
        finite_difference_check(
            &mut store,
            |s| {
                let mut tape = Tape::new();
                let x = tape.constant(x0.clone());
                let z = b.forward(&mut tape, s, x, Some(&order), 2, 2).unwrap();
                let w = tape.constant(wts.clone());
                let p = tape.mul(z, w).unwrap();
                let l = tape.sum(p);
                let g = tape.backward(l).unwrap();
                let mut acc = s.clone();
                acc.zero_grad();
                g.accumulate_into(&mut acc);
                (tape.value(l).item(), ids.iter().map(|&id| (id, acc.grad(id).clone())).collect())
            },
            1e-4,
        );
    }

    #[test]
    fn names_are_prefixed_and_unique() {
        let mut r = rng();
        let mut store = ParamStore::new();
        MambaBlock::new(&mut store, &mut r, "x", 2, 2, 2, 0.0);
        let names = names_with_prefix(&store, "x.");
        assert_eq!(names.len(), store.len());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}
