//! Full detector: alignment, inconsistency graph, classifier and the
//! uncertainty-weighted objective
//!
//! ```text
//! total = ce + exp(-s) · eval + s
//! ```
//!
//! where `s` is a trainable log-variance. The detection score is
//! `logit[bonafide] - logit[spoof]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::eaam::{self, AlignedFeatures, EaamParams, DEFAULT_SINC_KERNEL};
use crate::eaimm::{self, EvalConfig, HigParams, NegativeIndices};
use crate::error::{Error, Result};
use crate::feature_store::FeatureBundle;
use crate::matrix::Matrix;
use crate::params::{param_group, uniform_init};

pub const DEFAULT_D_MODEL: usize = 32;

/// Components switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Replace alignment with plain linear projections of each stream.
    pub no_eaam: bool,
    /// Drop the variation loss; `s` stays at 0.
    pub no_eval: bool,
    /// Skip the graphs and classify `concat(mean f'_emo, mean f'_acu)`.
    pub no_hig: bool,
}

impl Ablation {
    pub fn to_bits(self) -> u8 {
        self.no_eaam as u8 | (self.no_eval as u8) << 1 | (self.no_hig as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & !0b111 != 0 {
            return Err(Error::Format(format!("unknown ablation flags {bits:#04x}")));
        }
        Ok(Self {
            no_eaam: bits & 1 != 0,
            no_eval: bits & 2 != 0,
            no_hig: bits & 4 != 0,
        })
    }

    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.no_eaam {
            parts.push("no-eaam");
        }
        if self.no_eval {
            parts.push("no-eval");
        }
        if self.no_hig {
            parts.push("no-hig");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub emo_dim: usize,
    pub acu_dim: usize,
    pub d_model: usize,
    pub sinc_kernel: usize,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(emo_dim: usize, acu_dim: usize) -> Self {
        Self {
            emo_dim,
            acu_dim,
            d_model: DEFAULT_D_MODEL,
            sinc_kernel: DEFAULT_SINC_KERNEL,
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.emo_dim == 0 || self.acu_dim == 0 || self.d_model == 0 {
            return bad("feature and model dimensions must be positive".into());
        }
        if self.sinc_kernel.is_multiple_of(2) {
            return bad(format!("sinc kernel length must be odd, got {}", self.sinc_kernel));
        }
        Ok(())
    }
}

param_group! {
    pub struct ClassifierParams {
        /// `2·d_model × 2`.
        weight,
        /// `1 × 2`.
        bias,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Eaam,
    Hig,
    Classifier,
    Uncertainty,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Eaam, Group::Hig, Group::Classifier, Group::Uncertainty];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Eaam => "eaam",
            Group::Hig => "hig",
            Group::Classifier => "classifier",
            Group::Uncertainty => "uncertainty",
        }
    }
}

/// Every trainable tensor, grouped by component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T = Matrix> {
    pub eaam: EaamParams<T>,
    pub hig: HigParams<T>,
    pub classifier: ClassifierParams<T>,
    /// Log-variance of the variation loss, `1 × 1` when stored.
    pub s: T,
}

impl<T> ModelParameters<T> {
    pub fn map<U>(&self, mut f: impl FnMut(Group, &'static str, &T) -> U) -> ModelParameters<U> {
        ModelParameters {
            eaam: self.eaam.map(|n, t| f(Group::Eaam, n, t)),
            hig: self.hig.map(|n, t| f(Group::Hig, n, t)),
            classifier: self.classifier.map(|n, t| f(Group::Classifier, n, t)),
            s: f(Group::Uncertainty, "s", &self.s),
        }
    }

    /// Tensors in declaration order.
    pub fn iter(&self) -> impl Iterator<Item = (Group, &'static str, &T)> {
        let tag = |g: Group| move |(n, t)| (g, n, t);
        self.eaam
            .iter()
            .map(tag(Group::Eaam))
            .chain(self.hig.iter().map(tag(Group::Hig)))
            .chain(self.classifier.iter().map(tag(Group::Classifier)))
            .chain(std::iter::once((Group::Uncertainty, "s", &self.s)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Group, &'static str, &mut T)> {
        let tag = |g: Group| move |(n, t)| (g, n, t);
        self.eaam
            .iter_mut()
            .map(tag(Group::Eaam))
            .chain(self.hig.iter_mut().map(tag(Group::Hig)))
            .chain(self.classifier.iter_mut().map(tag(Group::Classifier)))
            .chain(std::iter::once((Group::Uncertainty, "s", &mut self.s)))
    }
}

impl ModelParameters {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.d_model;
        Self {
            eaam: EaamParams::init(config.emo_dim, config.acu_dim, d, rng),
            hig: HigParams::init(d, rng),
            classifier: ClassifierParams {
                weight: uniform_init(2 * d, 2, 2 * d, rng),
                bias: Matrix::zeros(1, 2),
            },
            s: Matrix::scalar(0.0),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, _, m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn s(&self) -> f64 {
        self.s.item()
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|(_, _, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, _, m)| m.is_finite())
    }

    /// `self += factor · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for ((_, _, a), (_, _, b)) in self.iter_mut().zip(other.iter()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += factor * y;
            }
        }
    }

    fn bind(&self, tape: &Tape) -> ModelParameters<Var> {
        self.map(|_, _, m| tape.leaf(m.clone()))
    }
}

/// Loss terms of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub eval: f64,
    pub s: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `|total - (ce + e^{-s}·eval + s)|` relative to `max(|total|, 1)`.
    pub fn identity_residual(&self) -> f64 {
        let recomputed = self.ce + (-self.s).exp() * self.eval + self.s;
        (self.total - recomputed).abs() / self.total.abs().max(1.0)
    }
}

/// Detector output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: [f64; 2],
    pub aligned: AlignedFeatures,
    pub readout: Vec<f64>,
}

impl ForwardOutput {
    pub fn score(&self) -> f64 {
        self.logits[0] - self.logits[1]
    }
}

struct ForwardVars {
    aligned: eaam::AlignedVars,
    f1: Var,
    readout: Var,
    logits: Var,
}

struct LossVars {
    ce: Var,
    eval: Option<Var>,
    total: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, params })
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = ModelParameters::init(&self.config, &mut ChaCha8Rng::seed_from_u64(0));
        for ((_, name, want), (_, _, got)) in reference.iter().zip(self.params.iter()) {
            if want.shape() != got.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_bundle(&self, bundle: &FeatureBundle) -> Result<()> {
        bundle.validate()?;
        let dim = |context, expected, actual| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                })
            }
        };
        dim("emotion feature dimension", self.config.emo_dim, bundle.emo_dim())?;
        dim("acoustic feature dimension", self.config.acu_dim, bundle.acu_dim())
    }

    fn forward_var(&self, tape: &Tape, bundle: &FeatureBundle, p: &ModelParameters<Var>) -> ForwardVars {
        let ablation = self.config.ablation;
        let emo = tape.leaf(bundle.emo_frames.clone());
        let utt = tape.leaf(Matrix::row_vector(&bundle.emo_utt));
        let acu = tape.leaf(bundle.acu_frames.clone());
        let aligned = if ablation.no_eaam {
            eaam::passthrough_var(tape, emo, utt, acu, &p.eaam)
        } else {
            eaam::eaam_forward_var(tape, emo, utt, acu, &p.eaam, self.config.sinc_kernel)
        };
        let (f1, readout) = if ablation.no_hig {
            let pooled = tape.concat_cols(&[
                tape.mean_over_rows(aligned.f_emo_p),
                tape.mean_over_rows(aligned.f_acu_p),
            ]);
            (aligned.f_emo_p, pooled)
        } else {
            let (f1, _) = eaimm::gat_frame_var(tape, aligned.f_emo_p, &p.hig);
            let hig = eaimm::hig_forward_var(tape, f1, aligned.u_p, aligned.f_acu_p, &p.hig);
            (f1, hig.readout)
        };
        let logits = tape.affine(readout, p.classifier.weight, p.classifier.bias);
        ForwardVars {
            aligned,
            f1,
            readout,
            logits,
        }
    }

    fn loss_var(
        &self,
        tape: &Tape,
        bundle: &FeatureBundle,
        p: &ModelParameters<Var>,
        cfg: &EvalConfig,
        negatives: &[NegativeIndices],
    ) -> LossVars {
        let fwd = self.forward_var(tape, bundle, p);
        let column = tape.transpose(fwd.logits);
        let ce = tape.sub(
            tape.segment_logsumexp(column, &[0, 2]),
            tape.row(column, bundle.label.class_index()),
        );
        if self.config.ablation.no_eval {
            return LossVars { ce, eval: None, total: ce };
        }
        let eval = eaimm::eval_loss_with_var(tape, fwd.aligned.f_emo_p, fwd.f1, fwd.aligned.u_p, cfg, negatives);
        let weighted = tape.mul(tape.exp(tape.neg(p.s)), eval);
        let total = tape.add(tape.add(ce, weighted), p.s);
        LossVars {
            ce,
            eval: Some(eval),
            total,
        }
    }

    fn breakdown(&self, tape: &Tape, l: &LossVars) -> LossBreakdown {
        LossBreakdown {
            ce: tape.scalar_value(l.ce),
            eval: l.eval.map_or(0.0, |v| tape.scalar_value(v)),
            s: if self.config.ablation.no_eval { 0.0 } else { self.params.s() },
            total: tape.scalar_value(l.total),
        }
    }

    pub fn forward(&self, bundle: &FeatureBundle) -> Result<ForwardOutput> {
        self.check_bundle(bundle)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let v = self.forward_var(&tape, bundle, &p);
        let logits = tape.value(v.logits).as_slice().to_vec();
        let out = ForwardOutput {
            logits: [logits[0], logits[1]],
            aligned: AlignedFeatures::from_tape(&tape, &v.aligned),
            readout: tape.value(v.readout).as_slice().to_vec(),
        };
        Ok(out)
    }

    /// `logit[bonafide] - logit[spoof]`; higher means more bonafide.
    pub fn score(&self, bundle: &FeatureBundle) -> Result<f64> {
        Ok(self.forward(bundle)?.score())
    }

    /// Negative sets for every anchor of `bundle`, drawn from `rng`.
    pub fn draw_negatives(&self, bundle: &FeatureBundle, cfg: &EvalConfig, rng: &mut impl Rng) -> Vec<NegativeIndices> {
        if self.config.ablation.no_eval {
            return Vec::new();
        }
        eaimm::draw_negatives(bundle.frames(), cfg, rng)
    }

    pub fn total_loss(&self, bundle: &FeatureBundle, cfg: &EvalConfig, rng: &mut impl Rng) -> Result<LossBreakdown> {
        self.check_bundle(bundle)?;
        let negatives = self.draw_negatives(bundle, cfg, rng);
        Ok(self.loss_with_negatives(bundle, cfg, &negatives))
    }

    /// Loss with fixed negatives; a deterministic function of the parameters.
    pub fn loss_with_negatives(&self, bundle: &FeatureBundle, cfg: &EvalConfig, negatives: &[NegativeIndices]) -> LossBreakdown {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let l = self.loss_var(&tape, bundle, &p, cfg, negatives);
        self.breakdown(&tape, &l)
    }

    /// Loss and its exact gradient for every parameter.
    pub fn backward(
        &self,
        bundle: &FeatureBundle,
        cfg: &EvalConfig,
        rng: &mut impl Rng,
    ) -> Result<(LossBreakdown, ModelParameters)> {
        self.check_bundle(bundle)?;
        let negatives = self.draw_negatives(bundle, cfg, rng);
        Ok(self.backward_with_negatives(bundle, cfg, &negatives))
    }

    pub fn backward_with_negatives(
        &self,
        bundle: &FeatureBundle,
        cfg: &EvalConfig,
        negatives: &[NegativeIndices],
    ) -> (LossBreakdown, ModelParameters) {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let l = self.loss_var(&tape, bundle, &p, cfg, negatives);
        let grads: Gradients = tape.backward(l.total);
        (self.breakdown(&tape, &l), p.map(|_, _, &v| grads.get(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::Label;
    use crate::synthgen::{gen_bundles, SynthConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            ..ModelConfig::new(4, 4)
        }
    }

    fn small_bundles() -> Vec<FeatureBundle> {
        let cfg = SynthConfig {
            frames: 12,
            emo_dim: 4,
            acu_dim: 4,
            ..SynthConfig::default()
        };
        gen_bundles(&cfg, 1, 1).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let config = small_config();
        let init = Model::init(config, 1).unwrap();
        let model = Model::new(config, init.params.zeros_like()).unwrap();
        for b in small_bundles() {
            let out = model.forward(&b).unwrap();
            assert_eq!(out.logits, [0.0, 0.0]);
            assert_eq!(model.score(&b).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_parameters_bias_gradient_is_half() {
        let config = small_config();
        let init = Model::init(config, 1).unwrap();
        let model = Model::new(config, init.params.zeros_like()).unwrap();
        let cfg = EvalConfig::with_k(1);
        for b in small_bundles() {
            let (_, g) = model.backward(&b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let want = match b.label {
                Label::Bonafide => [-0.5, 0.5],
                Label::Spoof => [0.5, -0.5],
            };
            assert_eq!(g.classifier.bias.as_slice(), &want);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::init(small_config(), 3).unwrap();
        let b = &small_bundles()[0];
        let a = model.forward(b).unwrap();
        let c = model.forward(b).unwrap();
        assert_eq!(a.logits.map(f64::to_bits), c.logits.map(f64::to_bits));
    }

    #[test]
    fn loss_identity_and_s_gradient() {
        let mut model = Model::init(small_config(), 4).unwrap();
        let cfg = EvalConfig::with_k(1);
        for s in [-1.5, 0.0, 0.7] {
            model.params.s = Matrix::scalar(s);
            for b in small_bundles() {
                let (l, g) = model.backward(&b, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
                assert!(l.identity_residual() < 1e-12);
                let want = 1.0 - (-s).exp() * l.eval;
                assert!((g.s.item() - want).abs() < 1e-10);
                assert_eq!(l.s, s);
            }
        }
    }

    #[test]
    fn swapping_classifier_columns_negates_score() {
        let model = Model::init(small_config(), 6).unwrap();
        let mut swapped = model.clone();
        let w = &model.params.classifier.weight;
        swapped.params.classifier.weight = Matrix::from_fn(w.rows(), 2, |i, j| w[(i, 1 - j)]);
        swapped.params.classifier.bias = Matrix::from_vec(1, 2, vec![0.3, -0.2]);
        let mut original = model.clone();
        original.params.classifier.bias = Matrix::from_vec(1, 2, vec![-0.2, 0.3]);
        for b in small_bundles() {
            let out = original.forward(&b).unwrap();
            assert_eq!(swapped.score(&b).unwrap(), -original.score(&b).unwrap());
            assert_eq!(out.score(), out.logits[0] - out.logits[1]);
        }
    }

    #[test]
    fn ablations_run_and_disable_eval() {
        let b = &small_bundles()[1];
        let cfg = EvalConfig::with_k(1);
        for bits in 0..8 {
            let config = ModelConfig {
                ablation: Ablation::from_bits(bits).unwrap(),
                ..small_config()
            };
            let model = Model::init(config, 7).unwrap();
            let (l, g) = model.backward(b, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert!(l.total.is_finite() && g.is_finite());
            if config.ablation.no_eval {
                assert_eq!((l.eval, l.s, g.s.item()), (0.0, 0.0, 0.0));
                assert_eq!(l.total, l.ce);
            }
            assert_eq!(Ablation::from_bits(config.ablation.to_bits()).unwrap(), config.ablation);
        }
        assert!(Ablation::from_bits(8).is_err());
    }

    #[test]
    fn rejects_mismatched_bundle() {
        let model = Model::init(ModelConfig::new(5, 4), 1).unwrap();
        assert!(matches!(
            model.forward(&small_bundles()[0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
