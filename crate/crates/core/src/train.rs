//! Full-batch Adam training with a cosine learning-rate schedule and an L1
//! reconstruction loss.

use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::net::{Model, Routing};
use crate::synth::ShadowPair;
use crate::{Error, MaskImage, ParamStore, Result, Tape, Tensor};

pub const LR_MAX: f64 = 2e-4;
pub const LR_MIN: f64 = 1e-6;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `min + (max − min)(1 + cos(π·step/(total − 1)))/2`, clamped to the last
/// step; a one-step schedule stays at `max`.
pub fn cosine_lr(step: usize, total: usize, max: f64, min: f64) -> f64 {
    if total <= 1 {
        return max;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    min + (max - min) * (1.0 + math::cos(core::f64::consts::PI * t)) / 2.0
}

/// Parameters, Adam moments and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    total_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl TrainState {
    pub fn new(params: ParamStore, total_steps: usize) -> Self {
        let zeros = |p: &ParamStore| p.ids().map(|id| Tensor::zeros(p.value(id).shape())).collect::<Vec<_>>();
        TrainState {
            m: zeros(&params),
            v: zeros(&params),
            params,
            step: 0,
            total_steps,
            lr_max: LR_MAX,
            lr_min: LR_MIN,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Learning rate the next update will use.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.lr_max, self.lr_min)
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }

    /// One Adam update from the gradients accumulated in `params`.
    fn apply_adam(&mut self) {
        let lr = self.lr();
        let t = (self.step + 1) as f64;
        let c1 = 1.0 - math::powf(BETA1, t);
        let c2 = 1.0 - math::powf(BETA2, t);
        let ids: Vec<_> = self.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = self.params.grad(id).data().to_vec();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = self.params.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / (math::sqrt(v[i] / c2) + ADAM_EPS);
            }
        }
        self.step += 1;
    }
}

/// A pair with its precomputed scan routing.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub mask: MaskImage,
    pub target: Tensor,
    pub routing: Routing,
}

impl Sample {
    pub fn new(model: &Model, input: Tensor, mask: MaskImage, target: Tensor) -> Result<Self> {
        let shape = [3, mask.height(), mask.width()];
        if input.shape() != shape || target.shape() != shape {
            return Err(Error::Dimension(format!(
                "input {:?} / target {:?} do not match a {}×{} mask",
                input.shape(),
                target.shape(),
                mask.height(),
                mask.width()
            )));
        }
        let routing = Routing::new(&model.config, &mask)?;
        Ok(Sample { input, mask, target, routing })
    }

    pub fn from_pair(model: &Model, pair: &ShadowPair) -> Result<Self> {
        Self::new(model, pair.input.clone(), pair.mask.clone(), pair.target.clone())
    }
}

// Mean absolute error of one sample, recorded on `tape`.
fn sample_loss(tape: &mut Tape, model: &Model, store: &ParamStore, s: &Sample) -> Result<crate::Var> {
    let x = tape.constant(s.input.clone());
    let f = model.forward(tape, store, x, &s.mask, &s.routing)?;
    let gt = tape.constant(s.target.clone());
    let diff = tape.sub(f.output, gt)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Mean L1 loss over `batch` without recording gradients.
pub fn batch_loss(model: &Model, store: &ParamStore, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("batch must not be empty".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let mut tape = Tape::new();
        let l = sample_loss(&mut tape, model, store, s)?;
        total += tape.value(l).item();
    }
    Ok(total / batch.len() as f64)
}

/// Computes the mean L1 loss of `batch` at the current parameters, then
/// applies one Adam step. Returns the pre-update loss.
pub fn toy_train_step(model: &Model, state: &mut TrainState, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("batch must not be empty".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    state.params.zero_grad();
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let seed = model
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((state.step * batch.len() + i) as u64);
        let mut tape = Tape::training(seed);
        let l = sample_loss(&mut tape, model, &state.params, s)?;
        let l = tape.scale(l, scale);
        total += tape.value(l).item();
        tape.backward(l)?.accumulate_into(&mut state.params);
    }
    state.apply_adam();
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::synth::shadow_pairs;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        assert_eq!(cosine_lr(0, 200, LR_MAX, LR_MIN), LR_MAX);
        assert!((cosine_lr(199, 200, LR_MAX, LR_MIN) - LR_MIN).abs() < 1e-18);
        let lrs: Vec<f64> = (0..200).map(|s| cosine_lr(s, 200, LR_MAX, LR_MIN)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!((cosine_lr(50, 101, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0, 1, LR_MAX, LR_MIN), LR_MAX);
    }

    fn tiny() -> (Model, ParamStore) {
        let cfg = ModelConfig { channels: 3, unet_depth: 1, patch_size: 4, state_dim: 2, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store).unwrap();
        (model, store)
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let (model, store) = tiny();
        let mut state = TrainState::new(store, 10);
        assert!(matches!(toy_train_step(&model, &mut state, &[]), Err(Error::Contract(_))));
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn perfect_prediction_leaves_parameters_unchanged() {
        let (model, store) = tiny();
        let pair = &shadow_pairs(1, 1, 8, 8)[0];
        let pred = model.predict(&store, &pair.input, &pair.mask).unwrap();
        let sample = Sample::new(&model, pair.input.clone(), pair.mask.clone(), pred).unwrap();
        let mut state = TrainState::new(store.clone(), 10);
        let loss = toy_train_step(&model, &mut state, &[sample]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(state.step(), 1);
        for id in store.ids() {
            assert_eq!(state.params.value(id), store.value(id));
        }
    }

    #[test]
    fn a_few_steps_reduce_the_loss() {
        let (model, store) = tiny();
        let batch: Vec<Sample> =
            shadow_pairs(5, 2, 8, 8).iter().map(|p| Sample::from_pair(&model, p).unwrap()).collect();
        let mut state = TrainState::new(store, 20);
        state.lr_max = 1e-3;
        let first = toy_train_step(&model, &mut state, &batch).unwrap();
        for _ in 1..20 {
            toy_train_step(&model, &mut state, &batch).unwrap();
        }
        let last = batch_loss(&model, &state.params, &batch).unwrap();
        assert!(last < first, "{last} vs {first}");
    }
}
