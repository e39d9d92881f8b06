//! Emotion-acoustic alignment.
//!
//! The acoustic stream passes through a learnable sinc band-pass stage, a
//! residual block and a projection. The emotion stream combines a per-frame
//! linear map with a temporal convolution, then layer-normalizes and
//! projects; the utterance embedding gets its own linear map and layer norm.
//!
//! Both streams then exchange information frame by frame. The exchange weights
//! come from a two-way softmax over `[-d, +d]`, where `d` measures how much the
//! streams' first-order changes disagree:
//!
//! ```text
//! d_fra[t] = mean_k |Δf_emo[t, k] - Δf_acu[t, k]|        (d_fra[0] = 0)
//! (γ_align, γ_mis) = softmax(-d, +d)
//! f'_emo[t] = γ_align[t]·f_emo[t] + γ_mis[t]·f_acu[t]
//! f'_acu[t] = γ_align[t]·f_acu[t] + γ_mis[t]·f_emo[t]
//! u'        = γ_align_utt·mean_t(f_emo) + γ_mis_utt·u_emo
//! ```

use rand::Rng;

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{param_group, uniform_init};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_SINC_KERNEL: usize = 17;
const CONV_KERNEL: usize = 3;
/// Smallest allowed low cutoff and band width after an optimizer step.
const MIN_CUTOFF: f64 = 1e-4;

param_group! {
    /// Learnable weights of both representation streams.
    ///
    /// Linear maps are stored `in × out` and applied as `x · W + b`.
    /// Convolution weights are `(K·C_in) × C_out` with tap-major rows.
    pub struct EaamParams {
        /// Low cutoff per sinc filter, `n_filters × 1`, normalized frequency.
        sinc_low,
        /// High cutoff per sinc filter, `n_filters × 1`, at most 0.5.
        sinc_high,
        /// Channel mixing `d_a × n_filters` applied before the band-pass filters.
        sinc_mix,
        sinc_bias,
        res_conv1_w,
        res_conv1_b,
        res_ln_gain,
        res_ln_bias,
        res_conv2_w,
        res_conv2_b,
        ars_proj_w,
        ars_proj_b,
        ers_lin_w,
        ers_lin_b,
        ers_conv_w,
        ers_conv_b,
        ers_ln_gain,
        ers_ln_bias,
        ers_proj_w,
        ers_proj_b,
        utt_lin_w,
        utt_lin_b,
        utt_ln_gain,
        utt_ln_bias,
    }
}

/// Mel-spaced band edges over `(0, 0.5]` for `n` filters.
pub fn mel_cutoffs(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Frequencies are normalized to a nominal 16 kHz rate: 30 Hz .. 8 kHz.
    let to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let to_hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    let (lo, hi) = (to_mel(30.0), to_mel(8000.0));
    let edges: Vec<f64> = (0..=n)
        .map(|i| to_hz(lo + (hi - lo) * i as f64 / n as f64) / 16000.0)
        .collect();
    let mut high: Vec<f64> = edges[1..].to_vec();
    if let Some(last) = high.last_mut() {
        *last = 0.5;
    }
    (edges[..n].to_vec(), high)
}

impl EaamParams {
    pub fn init(emo_dim: usize, acu_dim: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        let f = d_model;
        let (low, high) = mel_cutoffs(f);
        let zeros = |n: usize| Matrix::zeros(1, n);
        let ones = |n: usize| Matrix::filled(1, n, 1.0);
        Self {
            sinc_low: Matrix::col_vector(&low),
            sinc_high: Matrix::col_vector(&high),
            sinc_mix: uniform_init(acu_dim, f, acu_dim, rng),
            sinc_bias: zeros(f),
            res_conv1_w: uniform_init(CONV_KERNEL * f, f, CONV_KERNEL * f, rng),
            res_conv1_b: zeros(f),
            res_ln_gain: ones(f),
            res_ln_bias: zeros(f),
            res_conv2_w: uniform_init(CONV_KERNEL * f, f, CONV_KERNEL * f, rng),
            res_conv2_b: zeros(f),
            ars_proj_w: uniform_init(f, d_model, f, rng),
            ars_proj_b: zeros(d_model),
            ers_lin_w: uniform_init(emo_dim, d_model, emo_dim, rng),
            ers_lin_b: zeros(d_model),
            ers_conv_w: uniform_init(CONV_KERNEL * emo_dim, d_model, CONV_KERNEL * emo_dim, rng),
            ers_conv_b: zeros(d_model),
            ers_ln_gain: ones(d_model),
            ers_ln_bias: zeros(d_model),
            ers_proj_w: uniform_init(d_model, d_model, d_model, rng),
            ers_proj_b: zeros(d_model),
            utt_lin_w: uniform_init(emo_dim, d_model, emo_dim, rng),
            utt_lin_b: zeros(d_model),
            utt_ln_gain: ones(d_model),
            utt_ln_bias: zeros(d_model),
        }
    }

    pub fn emo_dim(&self) -> usize {
        self.ers_lin_w.rows()
    }

    pub fn acu_dim(&self) -> usize {
        self.sinc_mix.rows()
    }

    pub fn d_model(&self) -> usize {
        self.ers_lin_w.cols()
    }

    /// Checks `0 < low < high <= 0.5` for every filter and finiteness.
    pub fn validate(&self) -> Result<()> {
        for (name, m) in self.iter() {
            if !m.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite weights in eaam.{name}")));
            }
        }
        for (f, (&lo, &hi)) in self
            .sinc_low
            .as_slice()
            .iter()
            .zip(self.sinc_high.as_slice())
            .enumerate()
        {
            if !(0.0 < lo && lo < hi && hi <= 0.5) {
                return Err(Error::InvalidConfig(format!(
                    "sinc filter {f} has invalid band ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Pulls cutoffs back into `0 < low < high <= 0.5` after an update.
    pub fn project_cutoffs(&mut self) {
        let n = self.sinc_low.len();
        for f in 0..n {
            let lo = self.sinc_low.as_slice()[f].clamp(MIN_CUTOFF, 0.5 - MIN_CUTOFF);
            let hi = self.sinc_high.as_slice()[f].clamp(lo + MIN_CUTOFF, 0.5);
            self.sinc_low.as_mut_slice()[f] = lo;
            self.sinc_high.as_mut_slice()[f] = hi;
        }
    }
}

pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Hamming-windowed band-pass kernels, one row per filter.
pub fn sinc_kernels(low: &[f64], high: &[f64], kernel_len: usize) -> Matrix {
    let tape = Tape::new();
    let lo = tape.leaf(Matrix::col_vector(low));
    let hi = tape.leaf(Matrix::col_vector(high));
    let k = tape.sinc_bandpass(lo, hi, &hamming_window(kernel_len));
    let out = tape.value(k).clone();
    out
}

/// Layer norm over each row followed by the affine `gain`, `bias` (both `1 × d`).
pub(crate) fn layer_norm_affine(tape: &Tape, x: Var, gain: Var, bias: Var) -> Var {
    tape.add(tape.mul(tape.layer_norm_rows(x, LAYER_NORM_EPS), gain), bias)
}

pub(crate) fn ars_forward_var(tape: &Tape, acu: Var, p: &EaamParams<Var>, sinc_len: usize) -> Var {
    let mixed = tape.matmul(acu, p.sinc_mix);
    let kernels = tape.sinc_bandpass(p.sinc_low, p.sinc_high, &hamming_window(sinc_len));
    let band = tape.add(tape.depthwise_conv_same(mixed, kernels), p.sinc_bias);

    let conv1 = tape.affine(
        tape.unfold_same(band, CONV_KERNEL, Padding::Zero),
        p.res_conv1_w,
        p.res_conv1_b,
    );
    let act = tape.elu(layer_norm_affine(tape, conv1, p.res_ln_gain, p.res_ln_bias));
    let conv2 = tape.affine(
        tape.unfold_same(act, CONV_KERNEL, Padding::Zero),
        p.res_conv2_w,
        p.res_conv2_b,
    );
    let residual = tape.add(band, conv2);
    tape.affine(residual, p.ars_proj_w, p.ars_proj_b)
}

pub(crate) fn ers_forward_var(tape: &Tape, emo: Var, utt: Var, p: &EaamParams<Var>) -> (Var, Var) {
    let linear = tape.affine(emo, p.ers_lin_w, p.ers_lin_b);
    let conv = tape.affine(
        tape.unfold_same(emo, CONV_KERNEL, Padding::Symmetric),
        p.ers_conv_w,
        p.ers_conv_b,
    );
    let normed = layer_norm_affine(tape, tape.add(linear, conv), p.ers_ln_gain, p.ers_ln_bias);
    let frames = tape.affine(normed, p.ers_proj_w, p.ers_proj_b);

    let utt_lin = tape.affine(utt, p.utt_lin_w, p.utt_lin_b);
    let utt_out = layer_norm_affine(tape, utt_lin, p.utt_ln_gain, p.utt_ln_bias);
    (frames, utt_out)
}

/// `T × 1` column of per-frame discrepancies with `d_fra[0] = 0`.
pub(crate) fn frame_discrepancy_var(tape: &Tape, f_emo: Var, f_acu: Var) -> Var {
    let change_gap = tape.abs(tape.sub(tape.row_diff(f_emo), tape.row_diff(f_acu)));
    let first = tape.leaf(Matrix::zeros(1, 1));
    tape.concat_rows(&[first, tape.mean_over_cols(change_gap)])
}

/// Returns the pooled frame mean `u` (`1 × d`) and the scalar `d_utt`.
pub(crate) fn utterance_discrepancy_var(tape: &Tape, f_emo: Var, u_emo_p: Var) -> (Var, Var) {
    let pooled = tape.mean_over_rows(f_emo);
    let d_utt = tape.mean_over_cols(tape.abs(tape.sub(pooled, u_emo_p)));
    (pooled, d_utt)
}

/// Element-wise `softmax([-d, +d])`, i.e. `(σ(-2d), σ(2d))`.
pub(crate) fn dual_head_var(tape: &Tape, d: Var) -> (Var, Var) {
    (tape.sigmoid(tape.scale(d, -2.0)), tape.sigmoid(tape.scale(d, 2.0)))
}

/// Handles to the aligned representations on a tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AlignedVars {
    pub f_emo_p: Var,
    pub f_acu_p: Var,
    pub u_p: Var,
    pub gamma_align: Var,
    pub gamma_mis: Var,
    pub gamma_align_utt: Var,
    pub gamma_mis_utt: Var,
    pub d_fra: Var,
    pub d_utt: Var,
}

pub(crate) fn align_update_var(
    tape: &Tape,
    f_emo: Var,
    f_acu: Var,
    u: Var,
    u_emo_p: Var,
    d_fra: Var,
    d_utt: Var,
) -> AlignedVars {
    let (gamma_align, gamma_mis) = dual_head_var(tape, d_fra);
    let (gamma_align_utt, gamma_mis_utt) = dual_head_var(tape, d_utt);
    let blend = |own: Var, other: Var, ga: Var, gm: Var| tape.add(tape.mul(ga, own), tape.mul(gm, other));
    AlignedVars {
        f_emo_p: blend(f_emo, f_acu, gamma_align, gamma_mis),
        f_acu_p: blend(f_acu, f_emo, gamma_align, gamma_mis),
        u_p: blend(u, u_emo_p, gamma_align_utt, gamma_mis_utt),
        gamma_align,
        gamma_mis,
        gamma_align_utt,
        gamma_mis_utt,
        d_fra,
        d_utt,
    }
}

/// Full alignment pass on a tape.
pub(crate) fn eaam_forward_var(
    tape: &Tape,
    emo: Var,
    utt: Var,
    acu: Var,
    p: &EaamParams<Var>,
    sinc_len: usize,
) -> AlignedVars {
    let (f_emo, u_emo_p) = ers_forward_var(tape, emo, utt, p);
    let f_acu = ars_forward_var(tape, acu, p, sinc_len);
    let d_fra = frame_discrepancy_var(tape, f_emo, f_acu);
    let (u, d_utt) = utterance_discrepancy_var(tape, f_emo, u_emo_p);
    align_update_var(tape, f_emo, f_acu, u, u_emo_p, d_fra, d_utt)
}

/// Ablated alignment: plain linear projections of both streams, no exchange.
///
/// Emotion frames use `ers_lin`, the utterance embedding `utt_lin` and the
/// acoustic frames `sinc_mix`. All exchange weights are reported as
/// `(1, 0)` and discrepancies as 0.
pub(crate) fn passthrough_var(tape: &Tape, emo: Var, utt: Var, acu: Var, p: &EaamParams<Var>) -> AlignedVars {
    let f_emo_p = tape.affine(emo, p.ers_lin_w, p.ers_lin_b);
    let f_acu_p = tape.matmul(acu, p.sinc_mix);
    let u_p = tape.affine(utt, p.utt_lin_w, p.utt_lin_b);
    let t = tape.shape(emo).0;
    AlignedVars {
        f_emo_p,
        f_acu_p,
        u_p,
        gamma_align: tape.leaf(Matrix::filled(t, 1, 1.0)),
        gamma_mis: tape.leaf(Matrix::zeros(t, 1)),
        gamma_align_utt: tape.leaf(Matrix::scalar(1.0)),
        gamma_mis_utt: tape.leaf(Matrix::scalar(0.0)),
        d_fra: tape.leaf(Matrix::zeros(t, 1)),
        d_utt: tape.leaf(Matrix::scalar(0.0)),
    }
}

/// Aligned representations and the weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFeatures {
    /// `T × d_model` aligned emotion frames.
    pub f_emo_p: Matrix,
    /// `T × d_model` aligned acoustic frames.
    pub f_acu_p: Matrix,
    /// `d_model` aligned utterance embedding.
    pub u_p: Vec<f64>,
    pub gamma_align: Vec<f64>,
    pub gamma_mis: Vec<f64>,
    pub gamma_align_utt: f64,
    pub gamma_mis_utt: f64,
    pub d_fra: Vec<f64>,
    pub d_utt: f64,
}

impl AlignedFeatures {
    pub(crate) fn from_tape(tape: &Tape, v: &AlignedVars) -> Self {
        let vec = |x: Var| tape.value(x).as_slice().to_vec();
        Self {
            f_emo_p: tape.value(v.f_emo_p).clone(),
            f_acu_p: tape.value(v.f_acu_p).clone(),
            u_p: vec(v.u_p),
            gamma_align: vec(v.gamma_align),
            gamma_mis: vec(v.gamma_mis),
            gamma_align_utt: tape.scalar_value(v.gamma_align_utt),
            gamma_mis_utt: tape.scalar_value(v.gamma_mis_utt),
            d_fra: vec(v.d_fra),
            d_utt: tape.scalar_value(v.d_utt),
        }
    }
}

fn bind(tape: &Tape, p: &EaamParams) -> EaamParams<Var> {
    p.map(|_, m| tape.leaf(m.clone()))
}

fn require_frames(m: &Matrix, min: usize) -> Result<()> {
    if m.rows() < min {
        return Err(Error::TooFewFrames(m.rows()));
    }
    Ok(())
}

fn require_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Acoustic representation stream: `T × d_a → T × d_model`.
pub fn ars_forward(acu_frames: &Matrix, params: &EaamParams, sinc_len: usize) -> Result<Matrix> {
    require_frames(acu_frames, 2)?;
    require_dim("acoustic feature dimension", params.acu_dim(), acu_frames.cols())?;
    let tape = Tape::new();
    let p = bind(&tape, params);
    let out = ars_forward_var(&tape, tape.leaf(acu_frames.clone()), &p, sinc_len);
    let v = tape.value(out).clone();
    Ok(v)
}

/// Emotion representation stream: frame path `T × d_model` and utterance path `d_model`.
pub fn ers_forward(emo_frames: &Matrix, emo_utt: &[f64], params: &EaamParams) -> Result<(Matrix, Vec<f64>)> {
    require_frames(emo_frames, 2)?;
    require_dim("emotion feature dimension", params.emo_dim(), emo_frames.cols())?;
    require_dim("utterance emotion dimension", params.emo_dim(), emo_utt.len())?;
    let tape = Tape::new();
    let p = bind(&tape, params);
    let (frames, utt) = ers_forward_var(
        &tape,
        tape.leaf(emo_frames.clone()),
        tape.leaf(Matrix::row_vector(emo_utt)),
        &p,
    );
    let frames = tape.value(frames).clone();
    let utt = tape.value(utt).as_slice().to_vec();
    Ok((frames, utt))
}

pub fn frame_discrepancy(f_emo: &Matrix, f_acu: &Matrix) -> Result<Vec<f64>> {
    require_dim("frame count", f_emo.rows(), f_acu.rows())?;
    require_dim("feature dimension", f_emo.cols(), f_acu.cols())?;
    require_frames(f_emo, 1)?;
    if f_emo.rows() == 1 {
        return Ok(vec![0.0]);
    }
    let tape = Tape::new();
    let d = frame_discrepancy_var(&tape, tape.leaf(f_emo.clone()), tape.leaf(f_acu.clone()));
    let out = tape.value(d).as_slice().to_vec();
    Ok(out)
}

/// Returns the pooled frame mean `u` and `d_utt = mean |u - u_emo_p|`.
pub fn utterance_discrepancy(f_emo: &Matrix, u_emo_p: &[f64]) -> Result<(Vec<f64>, f64)> {
    require_frames(f_emo, 1)?;
    require_dim("utterance dimension", f_emo.cols(), u_emo_p.len())?;
    let tape = Tape::new();
    let (u, d) = utterance_discrepancy_var(
        &tape,
        tape.leaf(f_emo.clone()),
        tape.leaf(Matrix::row_vector(u_emo_p)),
    );
    let u = tape.value(u).as_slice().to_vec();
    Ok((u, tape.scalar_value(d)))
}

/// `(γ_align, γ_mis) = softmax([-d, +d])`.
pub fn dual_head_weights(d: f64) -> (f64, f64) {
    let tape = Tape::new();
    let (a, m) = dual_head_var(&tape, tape.leaf(Matrix::scalar(d)));
    (tape.scalar_value(a), tape.scalar_value(m))
}

pub fn align_update(
    f_emo: &Matrix,
    f_acu: &Matrix,
    u: &[f64],
    u_emo_p: &[f64],
    d_fra: &[f64],
    d_utt: f64,
) -> Result<AlignedFeatures> {
    require_dim("frame count", f_emo.rows(), f_acu.rows())?;
    require_dim("feature dimension", f_emo.cols(), f_acu.cols())?;
    require_dim("discrepancy length", f_emo.rows(), d_fra.len())?;
    require_dim("utterance dimension", f_emo.cols(), u.len())?;
    require_dim("utterance dimension", f_emo.cols(), u_emo_p.len())?;
    let tape = Tape::new();
    let v = align_update_var(
        &tape,
        tape.leaf(f_emo.clone()),
        tape.leaf(f_acu.clone()),
        tape.leaf(Matrix::row_vector(u)),
        tape.leaf(Matrix::row_vector(u_emo_p)),
        tape.leaf(Matrix::col_vector(d_fra)),
        tape.leaf(Matrix::scalar(d_utt)),
    );
    Ok(AlignedFeatures::from_tape(&tape, &v))
}
