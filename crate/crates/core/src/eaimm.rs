//! Emotion-acoustic inconsistency modeling.
//!
//! Two parts share this module:
//!
//! * the emotional-variation loss, an InfoNCE objective that pulls each
//!   temporal emotion difference toward a context-weighted prototype of its
//!   neighbours and away from far or shuffled differences;
//! * the hierarchical inconsistency graph: a temporal attention layer over
//!   emotion frames, a frame/utterance stage and a frame/acoustic stage,
//!   followed by mean+max pooling.

use std::rc::Rc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{param_group, uniform_init};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-8;
const EXP_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub tau: f64,
    pub tau_nce: f64,
    pub n_neg_far: usize,
    pub n_neg_shuffle: usize,
    pub far_margin: usize,
}

impl EvalConfig {
    /// Defaults for window radius `k`, with `far_margin = max(2k + 1, 8)`.
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            tau: 0.5,
            tau_nce: 0.1,
            n_neg_far: 4,
            n_neg_shuffle: 4,
            far_margin: (2 * k + 1).max(8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if self.far_margin <= self.k {
            return bad(format!("far_margin ({}) must exceed k ({})", self.far_margin, self.k));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.tau_nce > 0.0 && self.tau_nce.is_finite()) {
            return bad(format!("tau_nce must be positive, got {}", self.tau_nce));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::with_k(3)
    }
}

param_group! {
    /// Attention weights of the three graph stages.
    ///
    /// Transforms are `d × d` applied as `x · W`; attention vectors are `d × 1`
    /// columns with `e_ij = LeakyReLU(h_i · a_src + h_j · a_dst)`.
    pub struct HigParams {
        gat_w,
        gat_att_src,
        gat_att_dst,
        hg1_w_frame,
        hg1_w_utt,
        hg1_att_src,
        hg1_att_dst,
        hg2_w_emo,
        hg2_w_acu,
        hg2_att_src,
        hg2_att_dst,
    }
}

impl HigParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let mut w = || uniform_init(d, d, d, &mut *rng);
        let (gat_w, hg1_w_frame, hg1_w_utt, hg2_w_emo, hg2_w_acu) = (w(), w(), w(), w(), w());
        let mut a = || uniform_init(d, 1, d, &mut *rng);
        Self {
            gat_w,
            gat_att_src: a(),
            gat_att_dst: a(),
            hg1_w_frame,
            hg1_w_utt,
            hg1_att_src: a(),
            hg1_att_dst: a(),
            hg2_w_emo,
            hg2_w_acu,
            hg2_att_src: a(),
            hg2_att_dst: a(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.gat_w.rows()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in self.iter() {
            if !m.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite weights in hig.{name}")));
            }
        }
        Ok(())
    }
}

/// Row-major boolean adjacency over a fixed node count.
#[derive(Debug, Clone)]
pub(crate) struct Adjacency {
    n: usize,
    cells: Vec<bool>,
}

impl Adjacency {
    fn with_self_loops(n: usize) -> Self {
        let mut a = Self {
            n,
            cells: vec![false; n * n],
        };
        for i in 0..n {
            a.link(i, i);
        }
        a
    }

    fn link(&mut self, i: usize, j: usize) {
        self.cells[i * self.n + j] = true;
        self.cells[j * self.n + i] = true;
    }

    /// Temporal chain `t ↔ t+1` over nodes `0..t_len`.
    fn chain(&mut self, t_len: usize) {
        for t in 1..t_len {
            self.link(t - 1, t);
        }
    }

    fn into_mask(self) -> Rc<[bool]> {
        self.cells.into()
    }
}

pub(crate) fn frame_adjacency(t: usize) -> Rc<[bool]> {
    let mut a = Adjacency::with_self_loops(t);
    a.chain(t);
    a.into_mask()
}

/// Frames `0..t` plus the utterance node `t`.
pub(crate) fn utterance_adjacency(t: usize) -> Rc<[bool]> {
    let mut a = Adjacency::with_self_loops(t + 1);
    a.chain(t);
    for i in 0..t {
        a.link(i, t);
    }
    a.into_mask()
}

/// Emotion frames `0..t` and acoustic frames `t..2t`.
pub(crate) fn acoustic_adjacency(t: usize) -> Rc<[bool]> {
    let mut a = Adjacency::with_self_loops(2 * t);
    a.chain(t);
    for i in 0..t {
        a.link(i, t + i);
    }
    a.into_mask()
}

/// One attention layer over pre-transformed node features `h`.
/// Returns `(ELU(α h), α)`.
pub(crate) fn attend(tape: &Tape, h: Var, att_src: Var, att_dst: Var, mask: Rc<[bool]>) -> (Var, Var) {
    let logits = tape.leaky_relu(
        tape.pair_sum(tape.matmul(h, att_src), tape.matmul(h, att_dst)),
        LEAKY_SLOPE,
    );
    let alpha = tape.masked_softmax_rows(logits, mask);
    (tape.elu(tape.matmul(alpha, h)), alpha)
}

pub(crate) fn gat_frame_var(tape: &Tape, f_emo_p: Var, p: &HigParams<Var>) -> (Var, Var) {
    let t = tape.shape(f_emo_p).0;
    let h = tape.matmul(f_emo_p, p.gat_w);
    attend(tape, h, p.gat_att_src, p.gat_att_dst, frame_adjacency(t))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HigVars {
    pub f_tilde: Var,
    pub readout: Var,
    pub hg1_alpha: Var,
    pub hg2_alpha: Var,
}

pub(crate) fn hig_forward_var(tape: &Tape, f1: Var, u_p: Var, f_acu_p: Var, p: &HigParams<Var>) -> HigVars {
    let t = tape.shape(f1).0;
    let h1 = tape.concat_rows(&[tape.matmul(f1, p.hg1_w_frame), tape.matmul(u_p, p.hg1_w_utt)]);
    let (out1, hg1_alpha) = attend(tape, h1, p.hg1_att_src, p.hg1_att_dst, utterance_adjacency(t));
    let frames1 = tape.slice_rows(out1, 0, t);

    let h2 = tape.concat_rows(&[tape.matmul(frames1, p.hg2_w_emo), tape.matmul(f_acu_p, p.hg2_w_acu)]);
    let (out2, hg2_alpha) = attend(tape, h2, p.hg2_att_src, p.hg2_att_dst, acoustic_adjacency(t));
    let f_tilde = tape.slice_rows(out2, 0, t);
    HigVars {
        f_tilde,
        readout: pool_readout(tape, f_tilde),
        hg1_alpha,
        hg2_alpha,
    }
}

/// `concat(mean_t, max_t)` as a `1 × 2d` row.
pub(crate) fn pool_readout(tape: &Tape, frames: Var) -> Var {
    tape.concat_cols(&[tape.mean_over_rows(frames), tape.max_over_rows(frames)])
}

/// Negative indices for anchor `t`: diff rows, and frame pairs `(later, earlier)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NegativeIndices {
    pub far: Vec<usize>,
    pub shuffled: Vec<(usize, usize)>,
}

impl NegativeIndices {
    pub fn len(&self) -> usize {
        self.far.len() + self.shuffled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws negatives for anchor `t` in a sequence of `frames` frames.
pub fn sample_negative_indices(frames: usize, t: usize, cfg: &EvalConfig, rng: &mut impl Rng) -> NegativeIndices {
    let n = frames.saturating_sub(1);
    let candidates: Vec<usize> = (0..n).filter(|&j| j.abs_diff(t) > cfg.far_margin).collect();
    let far = if candidates.len() <= cfg.n_neg_far {
        candidates
    } else {
        index::sample(rng, candidates.len(), cfg.n_neg_far)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    };
    let mut shuffled = Vec::with_capacity(cfg.n_neg_shuffle);
    if frames >= 2 {
        let mut perm: Vec<usize> = (0..frames).collect();
        for _ in 0..cfg.n_neg_shuffle {
            perm.shuffle(rng);
            let i = rng.random_range(0..frames - 1);
            shuffled.push((perm[i + 1], perm[i]));
        }
    }
    NegativeIndices { far, shuffled }
}

/// Negative difference vectors for anchor `t`.
///
/// Shuffled negatives need frame values; they are recovered up to a constant
/// offset by cumulative summation of `diffs`, which leaves every pairwise
/// difference unchanged.
pub fn sample_negatives(diffs: &Matrix, t: usize, cfg: &EvalConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let frames = diffs.rows() + 1;
    let d = diffs.cols();
    let mut rebuilt = Matrix::zeros(frames, d);
    for j in 0..diffs.rows() {
        for c in 0..d {
            rebuilt[(j + 1, c)] = rebuilt[(j, c)] + diffs[(j, c)];
        }
    }
    let idx = sample_negative_indices(frames, t, cfg, rng);
    let far = idx.far.iter().map(|&j| diffs.row(j).to_vec());
    let shuffled = idx.shuffled.iter().map(|&(a, b)| {
        rebuilt
            .row(a)
            .iter()
            .zip(rebuilt.row(b))
            .map(|(x, y)| x - y)
            .collect()
    });
    far.chain(shuffled).collect()
}

/// Prototypes for every anchor, `(T-1) × d`.
pub(crate) fn prototypes_var(tape: &Tape, diffs: Var, f1: Var, u_p: Var, cfg: &EvalConfig) -> Var {
    let n = tape.shape(diffs).0;
    let scores = tape.scale(tape.matmul(tape.slice_rows(f1, 0, n), tape.transpose(u_p)), 1.0 / cfg.tau);
    let alpha = tape.exp(tape.clamp(scores, -EXP_CLAMP, EXP_CLAMP));
    let band = tape.leaf(Matrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) <= cfg.k {
            1.0
        } else {
            0.0
        }
    }));
    let weights = tape.mul(band, tape.transpose(alpha));
    tape.div(tape.matmul(weights, diffs), tape.sum_over_cols(weights))
}

/// Mean InfoNCE loss over anchors with pre-drawn negatives, `1 × 1`.
pub(crate) fn eval_loss_with_var(
    tape: &Tape,
    f_emo_p: Var,
    f1: Var,
    u_p: Var,
    cfg: &EvalConfig,
    negatives: &[NegativeIndices],
) -> Var {
    let diffs = tape.row_diff(f_emo_p);
    let n = tape.shape(diffs).0;
    assert_eq!(negatives.len(), n, "one negative set per anchor");
    let protos = prototypes_var(tape, diffs, f1, u_p, cfg);
    let inv = 1.0 / cfg.tau_nce;
    let pos = tape.scale(tape.row_cosine(diffs, protos, NORM_EPS), inv);

    let total: usize = negatives.iter().map(NegativeIndices::len).sum();
    if total == 0 {
        return tape.scale(tape.sum_all(tape.sub(pos, pos)), 1.0 / n as f64);
    }

    let mut anchors = Vec::with_capacity(total);
    let mut far_rows = Vec::new();
    let mut later = Vec::new();
    let mut earlier = Vec::new();
    for (t, neg) in negatives.iter().enumerate() {
        far_rows.extend_from_slice(&neg.far);
        anchors.extend(std::iter::repeat_n(t, neg.far.len()));
    }
    for (t, neg) in negatives.iter().enumerate() {
        for &(a, b) in &neg.shuffled {
            later.push(a);
            earlier.push(b);
            anchors.push(t);
        }
    }
    let mut parts = Vec::new();
    if !far_rows.is_empty() {
        parts.push(tape.gather_rows(diffs, &far_rows));
    }
    if !later.is_empty() {
        parts.push(tape.sub(tape.gather_rows(f_emo_p, &later), tape.gather_rows(f_emo_p, &earlier)));
    }
    let neg_vecs = tape.concat_rows(&parts);
    let neg_logits = tape.scale(
        tape.row_cosine(tape.gather_rows(diffs, &anchors), neg_vecs, NORM_EPS),
        inv,
    );

    // Reorder [pos; neg] into one contiguous segment per anchor.
    let mut far_pos = 0;
    let mut shuf_pos = far_rows.len();
    let mut order = Vec::with_capacity(n + total);
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for (t, neg) in negatives.iter().enumerate() {
        order.push(t);
        order.extend((far_pos..far_pos + neg.far.len()).map(|i| n + i));
        order.extend((shuf_pos..shuf_pos + neg.shuffled.len()).map(|i| n + i));
        far_pos += neg.far.len();
        shuf_pos += neg.shuffled.len();
        offsets.push(order.len());
    }
    let all = tape.gather_rows(tape.concat_rows(&[pos, neg_logits]), &order);
    let lse = tape.segment_logsumexp(all, &offsets);
    tape.scale(tape.sum_all(tape.sub(lse, pos)), 1.0 / n as f64)
}

pub(crate) fn draw_negatives(frames: usize, cfg: &EvalConfig, rng: &mut impl Rng) -> Vec<NegativeIndices> {
    (0..frames - 1)
        .map(|t| sample_negative_indices(frames, t, cfg, rng))
        .collect()
}

fn bind(tape: &Tape, p: &HigParams) -> HigParams<Var> {
    p.map(|_, m| tape.leaf(m.clone()))
}

fn check_shape(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub fn temporal_diffs(f: &Matrix) -> Result<Matrix> {
    if f.rows() < 2 {
        return Err(Error::TooFewFrames(f.rows()));
    }
    let tape = Tape::new();
    let d = tape.row_diff(tape.leaf(f.clone()));
    let out = tape.value(d).clone();
    Ok(out)
}

/// Context-weighted prototype `g_t` of the diffs around anchor `t`.
pub fn prototype(diffs: &Matrix, f1: &Matrix, u_p: &[f64], t: usize, cfg: &EvalConfig) -> Result<Vec<f64>> {
    let n = diffs.rows();
    if t >= n {
        return Err(Error::InvalidConfig(format!("anchor {t} out of range for {n} differences")));
    }
    if f1.rows() < n {
        return Err(Error::DimensionMismatch {
            context: "stage-1 frame count",
            expected: n + 1,
            actual: f1.rows(),
        });
    }
    check_shape("stage-1 feature dimension", u_p.len(), f1.cols())?;
    let tape = Tape::new();
    let g = prototypes_var(
        &tape,
        tape.leaf(diffs.clone()),
        tape.leaf(f1.clone()),
        tape.leaf(Matrix::row_vector(u_p)),
        cfg,
    );
    let out = tape.value(g).row(t).to_vec();
    Ok(out)
}

/// Emotional-variation loss with negatives drawn from `rng`.
pub fn eval_loss(f_emo_p: &Matrix, f1: &Matrix, u_p: &[f64], cfg: &EvalConfig, rng: &mut impl Rng) -> Result<f64> {
    if f_emo_p.rows() < 2 {
        return Err(Error::TooFewFrames(f_emo_p.rows()));
    }
    check_shape("stage-1 frame count", f_emo_p.rows(), f1.rows())?;
    check_shape("stage-1 feature dimension", f1.cols(), u_p.len())?;
    let negatives = draw_negatives(f_emo_p.rows(), cfg, rng);
    Ok(eval_loss_with(f_emo_p, f1, u_p, cfg, &negatives))
}

/// Emotional-variation loss with fixed negatives, one set per anchor.
pub fn eval_loss_with(f_emo_p: &Matrix, f1: &Matrix, u_p: &[f64], cfg: &EvalConfig, negatives: &[NegativeIndices]) -> f64 {
    let tape = Tape::new();
    let loss = eval_loss_with_var(
        &tape,
        tape.leaf(f_emo_p.clone()),
        tape.leaf(f1.clone()),
        tape.leaf(Matrix::row_vector(u_p)),
        cfg,
        negatives,
    );
    tape.scalar_value(loss)
}

/// Temporal attention over emotion frames, `T × d → T × d`.
pub fn gat_frame(f_emo_p: &Matrix, params: &HigParams) -> Result<Matrix> {
    check_shape("frame feature dimension", params.d_model(), f_emo_p.cols())?;
    if f_emo_p.rows() == 0 {
        return Err(Error::TooFewFrames(0));
    }
    let tape = Tape::new();
    let (out, _) = gat_frame_var(&tape, tape.leaf(f_emo_p.clone()), &bind(&tape, params));
    let out = tape.value(out).clone();
    Ok(out)
}

/// Both graph stages and the pooled readout: `(f̃, h)` with `h` of length `2d`.
pub fn hig_forward(f1: &Matrix, u_p: &[f64], f_acu_p: &Matrix, params: &HigParams) -> Result<(Matrix, Vec<f64>)> {
    let v = run_hig(f1, u_p, f_acu_p, params, |tape, v| {
        (tape.value(v.f_tilde).clone(), tape.value(v.readout).as_slice().to_vec())
    })?;
    Ok(v)
}

/// Attention matrices of every stage, dense with zeros off the neighbourhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub frame: Matrix,
    pub utterance: Matrix,
    pub acoustic: Matrix,
}

pub fn attention_maps(f_emo_p: &Matrix, u_p: &[f64], f_acu_p: &Matrix, params: &HigParams) -> Result<AttentionMaps> {
    let tape = Tape::new();
    check_shape("frame feature dimension", params.d_model(), f_emo_p.cols())?;
    let (f1, frame_alpha) = gat_frame_var(&tape, tape.leaf(f_emo_p.clone()), &bind(&tape, params));
    let f1 = tape.value(f1).clone();
    let (utterance, acoustic) = run_hig(&f1, u_p, f_acu_p, params, |tape, v| {
        (tape.value(v.hg1_alpha).clone(), tape.value(v.hg2_alpha).clone())
    })?;
    let frame = tape.value(frame_alpha).clone();
    Ok(AttentionMaps {
        frame,
        utterance,
        acoustic,
    })
}

fn run_hig<R>(
    f1: &Matrix,
    u_p: &[f64],
    f_acu_p: &Matrix,
    params: &HigParams,
    read: impl FnOnce(&Tape, &HigVars) -> R,
) -> Result<R> {
    let d = params.d_model();
    if f1.rows() == 0 {
        return Err(Error::TooFewFrames(0));
    }
    check_shape("stage-1 feature dimension", d, f1.cols())?;
    check_shape("utterance dimension", d, u_p.len())?;
    check_shape("acoustic frame count", f1.rows(), f_acu_p.rows())?;
    check_shape("acoustic feature dimension", d, f_acu_p.cols())?;
    let tape = Tape::new();
    let v = hig_forward_var(
        &tape,
        tape.leaf(f1.clone()),
        tape.leaf(Matrix::row_vector(u_p)),
        tape.leaf(f_acu_p.clone()),
        &bind(&tape, params),
    );
    Ok(read(&tape, &v))
}
