//! Adam with decoupled weight decay and the seeded training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eaimm::EvalConfig;
use crate::error::{Error, Result};
use crate::feature_store::{FeatureBundle, Label};
use crate::model::{Group, LossBreakdown, Model, ModelParameters};
use crate::synthgen::derive_seed;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update of a flat tensor. `step` is the 1-based step count.
///
/// Decay is decoupled and applied first: `p -= lr·wd·p`.
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, wd: f64) {
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..p.len() {
        p[i] -= lr * wd * p[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParameters,
    pub v: ModelParameters,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Updates every tensor; `s` is never decayed.
pub fn adam_step(params: &mut ModelParameters, grads: &ModelParameters, state: &mut AdamState, lr: f64, wd: f64) {
    state.step += 1;
    let tensors = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((group, _, p), (_, _, g)), ((_, _, m), (_, _, v))) in tensors {
        let decay = if group == Group::Uncertainty { 0.0 } else { wd };
        adam_update(
            p.as_mut_slice(),
            g.as_slice(),
            m.as_mut_slice(),
            v.as_mut_slice(),
            state.step,
            lr,
            decay,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Utterances whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 1,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        self.eval.validate()
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub ce: f64,
    pub eval: f64,
    /// Value of `s` at the end of the epoch.
    pub s: f64,
    pub total: f64,
    pub max_identity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub backward_passes: usize,
    pub warnings: Vec<String>,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, 2 * epoch as u64)
}

fn negative_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, 2 * epoch as u64 + 1), index as u64)
}

/// Trains `model` in place. `on_epoch` sees each log as it is produced.
pub fn train(
    model: &mut Model,
    data: &[FeatureBundle],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut warnings = Vec::new();
    let bonafide = data.iter().filter(|b| b.label == Label::Bonafide).count();
    if bonafide == 0 || bonafide == data.len() {
        warnings.push(format!(
            "training set has a single class ({} bonafide, {} spoof)",
            bonafide,
            data.len() - bonafide
        ));
    }
    for b in data {
        // Surface dimension errors before any work starts.
        model.forward(b).map_err(|e| Error::Bundle {
            id: b.id.clone(),
            source: Box::new(e),
        })?;
    }

    let mut state = AdamState::new(&model.params);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut passes = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, epoch)));

        let mut sums = LossBreakdown {
            ce: 0.0,
            eval: 0.0,
            s: 0.0,
            total: 0.0,
        };
        let mut max_residual: f64 = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model_ref = &*model;
            let results: Vec<(LossBreakdown, ModelParameters)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(negative_seed(cfg.seed, epoch, i));
                    model_ref
                        .backward(&data[i], &cfg.eval, &mut rng)
                        .expect("bundle validated before training")
                })
                .collect();
            passes += results.len();

            let mut grad = model.params.zeros_like();
            for (loss, g) in &results {
                grad.add_scaled(g, 1.0 / batch.len() as f64);
                sums.ce += loss.ce;
                sums.eval += loss.eval;
                sums.total += loss.total;
                max_residual = max_residual.max(loss.identity_residual());
            }
            adam_step(&mut model.params, &grad, &mut state, cfg.learning_rate, cfg.weight_decay);
            model.params.eaam.project_cutoffs();
        }
        if !model.params.is_finite() {
            return Err(Error::NonFinite("parameters after training step"));
        }
        let n = data.len() as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            ce: sums.ce / n,
            eval: sums.eval / n,
            s: model.params.s(),
            total: sums.total / n,
            max_identity_residual: max_residual,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainReport {
        epochs: logs,
        backward_passes: passes,
        warnings,
    })
}
