//! Central finite-difference check of every parameter gradient.
//!
//! Each tensor is scored by `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂)` over its entries,
//! where `a` is the backprop gradient and `n` the central difference. The
//! worst single entry is reported alongside; entries whose gradient is close
//! to the rounding level of the loss divided by the step dominate that figure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::eaimm::EvalConfig;
use crate::error::Result;
use crate::feature_store::{FeatureBundle, Label};
use crate::matrix::Matrix;
use crate::model::{Ablation, Group, Model, ModelConfig};

/// Denominator floor so that all-zero gradients compare by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub frames: usize,
    pub emo_dim: usize,
    pub acu_dim: usize,
    pub d_model: usize,
    pub k: usize,
    pub step: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            frames: 6,
            emo_dim: 4,
            acu_dim: 4,
            d_model: 4,
            k: 1,
            step: 1e-6,
            seed: 1,
            ablation: Ablation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub group: &'static str,
    pub name: &'static str,
    pub len: usize,
    pub rel_error: f64,
    pub max_entry_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: &'static str,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_bundle(cfg: &GradcheckConfig, label: Label, rng: &mut impl Rng) -> FeatureBundle {
    let mut m = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let emo_frames = m(cfg.frames, cfg.emo_dim);
    let acu_frames = m(cfg.frames, cfg.acu_dim);
    let emo_utt = m(1, cfg.emo_dim).into_vec();
    FeatureBundle {
        id: format!("gradcheck_{}", label.as_str()),
        emo_frames,
        emo_utt,
        acu_frames,
        label,
    }
}

/// Model perturbed away from its initial point so that no gradient is trivially zero.
fn random_model(cfg: &GradcheckConfig, rng: &mut impl Rng) -> Result<Model> {
    let config = ModelConfig {
        d_model: cfg.d_model,
        ablation: cfg.ablation,
        ..ModelConfig::new(cfg.emo_dim, cfg.acu_dim)
    };
    let mut model = Model::init(config, rng.random())?;
    for (group, name, m) in model.params.iter_mut() {
        if group == Group::Eaam && name.starts_with("sinc_") {
            continue;
        }
        for v in m.as_mut_slice() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    model.params.s = Matrix::scalar(rng.random_range(-0.5..0.5));
    Ok(model)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = random_model(cfg, &mut rng)?;
    let eval = EvalConfig {
        far_margin: cfg.k + 1,
        n_neg_far: 2,
        n_neg_shuffle: 2,
        ..EvalConfig::with_k(cfg.k)
    };
    eval.validate()?;
    let bundles = [
        random_bundle(cfg, Label::Bonafide, &mut rng),
        random_bundle(cfg, Label::Spoof, &mut rng),
    ];
    let negatives: Vec<_> = bundles
        .iter()
        .map(|b| model.draw_negatives(b, &eval, &mut rng))
        .collect();

    let loss = |m: &Model| -> f64 {
        bundles
            .iter()
            .zip(&negatives)
            .map(|(b, n)| m.loss_with_negatives(b, &eval, n).total)
            .sum()
    };
    let mut analytic = model.params.zeros_like();
    for (b, n) in bundles.iter().zip(&negatives) {
        let (_, g) = model.backward_with_negatives(b, &eval, n);
        analytic.add_scaled(&g, 1.0);
    }

    let entries: Vec<_> = model.params.iter().map(|(g, n, m)| (g, n, m.len())).collect();
    let grads: Vec<_> = analytic.iter().map(|(_, _, m)| m).collect();
    let tensors: Vec<TensorCheck> = entries
        .par_iter()
        .enumerate()
        .map(|(t, &(group, name, len))| {
            let mut probe = model.clone();
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
            for i in 0..len {
                let original = tensor_mut(&mut probe, t).as_slice()[i];
                tensor_mut(&mut probe, t).as_mut_slice()[i] = original + cfg.step;
                let plus = loss(&probe);
                tensor_mut(&mut probe, t).as_mut_slice()[i] = original - cfg.step;
                let minus = loss(&probe);
                tensor_mut(&mut probe, t).as_mut_slice()[i] = original;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = grads[t].as_slice()[i];
                max_rel = max_rel.max(relative_error(a, numeric));
                max_abs = max_abs.max((a - numeric).abs());
                diff_sq += (a - numeric).powi(2);
                a_sq += a * a;
                n_sq += numeric * numeric;
            }
            TensorCheck {
                group: group.as_str(),
                name,
                len,
                rel_error: diff_sq.sqrt() / f64::max(a_sq, n_sq).sqrt().max(REL_FLOOR),
                max_entry_rel_error: max_rel,
                max_abs_error: max_abs,
            }
        })
        .collect();

    let groups: Vec<GroupCheck> = Group::ALL
        .iter()
        .map(|g| GroupCheck {
            group: g.as_str(),
            max_rel_error: tensors
                .iter()
                .filter(|t| t.group == g.as_str())
                .map(|t| t.rel_error)
                .fold(0.0, f64::max),
        })
        .collect();
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tensors,
        groups,
        max_rel_error,
    })
}

fn tensor_mut(model: &mut Model, index: usize) -> &mut Matrix {
    model
        .params
        .iter_mut()
        .nth(index)
        .map(|(_, _, m)| m)
        .expect("tensor index in range")
}
