//! Straight-line recomputation of the detector with plain loops, compared
//! against the tape-based forward pass and loss.

use std::f64::consts::PI;

use eaiadd_core::eaimm::NegativeIndices;
use eaiadd_core::model::{ModelParameters, LossBreakdown};
use eaiadd_core::synthgen::{gen_bundles, SynthConfig};
use eaiadd_core::{EvalConfig, FeatureBundle, Label, Matrix, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Rows {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn matmul(x: &Rows, w: &Matrix) -> Rows {
    x.iter()
        .map(|r| (0..w.cols()).map(|o| (0..w.rows()).map(|i| r[i] * w[(i, o)]).sum()).collect())
        .collect()
}

fn add_bias(x: Rows, b: &Matrix) -> Rows {
    x.into_iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| v + b[(0, j)]).collect())
        .collect()
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

fn layer_norm(x: Rows, gain: &Matrix, bias: &Matrix) -> Rows {
    x.into_iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * gain[(0, j)] + bias[(0, j)])
                .collect()
        })
        .collect()
}

/// `y[t, o] = b[o] + Σ_k Σ_c w[k·C + c, o] · x[t + k - K/2, c]`.
fn conv_same(x: &Rows, w: &Matrix, b: &Matrix, kernel: usize, mirror: bool) -> Rows {
    let t_len = x.len() as isize;
    let c_in = x[0].len();
    let half = (kernel / 2) as isize;
    (0..t_len)
        .map(|t| {
            (0..w.cols())
                .map(|o| {
                    let mut acc = b[(0, o)];
                    for k in 0..kernel {
                        let mut src = t + k as isize - half;
                        if src < 0 || src >= t_len {
                            if !mirror {
                                continue;
                            }
                            src = if src < 0 { -src - 1 } else { 2 * t_len - src - 1 };
                        }
                        for c in 0..c_in {
                            acc += w[(k * c_in + c, o)] * x[src as usize][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn bandpass(low: f64, high: f64, len: usize) -> Vec<f64> {
    let half = (len / 2) as f64;
    (0..len)
        .map(|i| {
            let n = i as f64 - half;
            let ideal = if n == 0.0 {
                2.0 * (high - low)
            } else {
                ((2.0 * PI * high * n).sin() - (2.0 * PI * low * n).sin()) / (PI * n)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
            ideal * window
        })
        .collect()
}

fn dense_attention(h: &Rows, src: &Matrix, dst: &Matrix, adj: &[Vec<bool>]) -> Rows {
    let n = h.len();
    let d = h[0].len();
    let score = |v: &[f64], a: &Matrix| (0..d).map(|c| v[c] * a[(c, 0)]).sum::<f64>();
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let e = score(&h[i], src) + score(&h[j], dst);
                    if e >= 0.0 {
                        e
                    } else {
                        0.2 * e
                    }
                })
                .collect();
            let z: f64 = (0..n).filter(|&j| adj[i][j]).map(|j| logits[j].exp()).sum();
            (0..d)
                .map(|c| {
                    let agg: f64 = (0..n)
                        .filter(|&j| adj[i][j])
                        .map(|j| logits[j].exp() / z * h[j][c])
                        .sum();
                    elu(agg)
                })
                .collect()
        })
        .collect()
}

fn graph(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<bool>> {
    let mut a = vec![vec![false; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = true;
    }
    for (i, j) in edges {
        a[i][j] = true;
        a[j][i] = true;
    }
    a
}

struct Reference {
    logits: [f64; 2],
    f_emo_p: Rows,
    f1: Rows,
    u_p: Vec<f64>,
}

fn reference_forward(p: &ModelParameters, b: &FeatureBundle, sinc_len: usize) -> Reference {
    let e = &p.eaam;
    let t_len = b.frames();
    let emo = rows(&b.emo_frames);
    let acu = rows(&b.acu_frames);

    // Emotion stream.
    let lin = add_bias(matmul(&emo, &e.ers_lin_w), &e.ers_lin_b);
    let conv = conv_same(&emo, &e.ers_conv_w, &e.ers_conv_b, 3, true);
    let summed: Rows = lin.iter().zip(&conv).map(|(a, c)| a.iter().zip(c).map(|(x, y)| x + y).collect()).collect();
    let f_emo = add_bias(matmul(&layer_norm(summed, &e.ers_ln_gain, &e.ers_ln_bias), &e.ers_proj_w), &e.ers_proj_b);
    let u_lin = add_bias(matmul(&vec![b.emo_utt.clone()], &e.utt_lin_w), &e.utt_lin_b);
    let u_emo = layer_norm(u_lin, &e.utt_ln_gain, &e.utt_ln_bias).remove(0);

    // Acoustic stream.
    let mixed = matmul(&acu, &e.sinc_mix);
    let filters = mixed[0].len();
    let half = (sinc_len / 2) as isize;
    let kernels: Vec<Vec<f64>> = (0..filters)
        .map(|f| bandpass(e.sinc_low[(f, 0)], e.sinc_high[(f, 0)], sinc_len))
        .collect();
    let band: Rows = (0..t_len)
        .map(|t| {
            (0..filters)
                .map(|f| {
                    let mut acc = e.sinc_bias[(0, f)];
                    for (k, h) in kernels[f].iter().enumerate() {
                        let src = t as isize + k as isize - half;
                        if src >= 0 && (src as usize) < t_len {
                            acc += h * mixed[src as usize][f];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let c1 = conv_same(&band, &e.res_conv1_w, &e.res_conv1_b, 3, false);
    let act: Rows = layer_norm(c1, &e.res_ln_gain, &e.res_ln_bias)
        .into_iter()
        .map(|r| r.into_iter().map(elu).collect())
        .collect();
    let c2 = conv_same(&act, &e.res_conv2_w, &e.res_conv2_b, 3, false);
    let residual: Rows = band.iter().zip(&c2).map(|(a, c)| a.iter().zip(c).map(|(x, y)| x + y).collect()).collect();
    let f_acu = add_bias(matmul(&residual, &e.ars_proj_w), &e.ars_proj_b);

    // Alignment.
    let d = f_emo[0].len();
    let d_fra: Vec<f64> = (0..t_len)
        .map(|t| {
            if t == 0 {
                return 0.0;
            }
            (0..d)
                .map(|c| ((f_emo[t][c] - f_emo[t - 1][c]) - (f_acu[t][c] - f_acu[t - 1][c])).abs())
                .sum::<f64>()
                / d as f64
        })
        .collect();
    let u: Vec<f64> = (0..d).map(|c| f_emo.iter().map(|r| r[c]).sum::<f64>() / t_len as f64).collect();
    let d_utt = (0..d).map(|c| (u[c] - u_emo[c]).abs()).sum::<f64>() / d as f64;
    let heads = |x: f64| {
        let (a, m) = ((-x).exp(), x.exp());
        (a / (a + m), m / (a + m))
    };
    let mut f_emo_p = f_emo.clone();
    let mut f_acu_p = f_acu.clone();
    for t in 0..t_len {
        let (ga, gm) = heads(d_fra[t]);
        for c in 0..d {
            f_emo_p[t][c] = ga * f_emo[t][c] + gm * f_acu[t][c];
            f_acu_p[t][c] = ga * f_acu[t][c] + gm * f_emo[t][c];
        }
    }
    let (ga, gm) = heads(d_utt);
    let u_p: Vec<f64> = (0..d).map(|c| ga * u[c] + gm * u_emo[c]).collect();

    // Graphs.
    let h = &p.hig;
    let chain = |n: usize| (1..n).map(|i| (i - 1, i)).collect::<Vec<_>>();
    let f1 = dense_attention(&matmul(&f_emo_p, &h.gat_w), &h.gat_att_src, &h.gat_att_dst, &graph(t_len, chain(t_len)));

    let mut nodes1 = matmul(&f1, &h.hg1_w_frame);
    nodes1.extend(matmul(&vec![u_p.clone()], &h.hg1_w_utt));
    let adj1 = graph(t_len + 1, chain(t_len).into_iter().chain((0..t_len).map(|i| (i, t_len))));
    let out1 = dense_attention(&nodes1, &h.hg1_att_src, &h.hg1_att_dst, &adj1);

    let mut nodes2 = matmul(&out1[..t_len].to_vec(), &h.hg2_w_emo);
    nodes2.extend(matmul(&f_acu_p, &h.hg2_w_acu));
    let adj2 = graph(2 * t_len, chain(t_len).into_iter().chain((0..t_len).map(|i| (i, t_len + i))));
    let f_tilde = dense_attention(&nodes2, &h.hg2_att_src, &h.hg2_att_dst, &adj2)[..t_len].to_vec();

    let mut readout: Vec<f64> = (0..d).map(|c| f_tilde.iter().map(|r| r[c]).sum::<f64>() / t_len as f64).collect();
    readout.extend((0..d).map(|c| f_tilde.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max)));
    let logits = add_bias(matmul(&vec![readout], &p.classifier.weight), &p.classifier.bias).remove(0);
    Reference {
        logits: [logits[0], logits[1]],
        f_emo_p,
        f1,
        u_p,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + 1e-16).sqrt();
    dot / (norm(a) * norm(b))
}

fn reference_eval(r: &Reference, cfg: &EvalConfig, negatives: &[NegativeIndices]) -> f64 {
    let f = &r.f_emo_p;
    let d = f[0].len();
    let n = f.len() - 1;
    let diff = |j: usize| -> Vec<f64> { (0..d).map(|c| f[j + 1][c] - f[j][c]).collect() };
    let mut total = 0.0;
    for t in 0..n {
        let lo = t.saturating_sub(cfg.k);
        let hi = (t + cfg.k).min(n - 1);
        let weights: Vec<f64> = (lo..=hi)
            .map(|j| {
                let s: f64 = (0..d).map(|c| r.u_p[c] * r.f1[j][c]).sum::<f64>() / cfg.tau;
                s.clamp(-30.0, 30.0).exp()
            })
            .collect();
        let z: f64 = weights.iter().sum();
        let g: Vec<f64> = (0..d)
            .map(|c| (lo..=hi).zip(&weights).map(|(j, w)| w * diff(j)[c]).sum::<f64>() / z)
            .collect();
        let anchor = diff(t);
        let pos = cosine(&anchor, &g) / cfg.tau_nce;
        let mut denom = pos.exp();
        for &j in &negatives[t].far {
            denom += (cosine(&anchor, &diff(j)) / cfg.tau_nce).exp();
        }
        for &(a, b) in &negatives[t].shuffled {
            let v: Vec<f64> = (0..d).map(|c| f[a][c] - f[b][c]).collect();
            denom += (cosine(&anchor, &v) / cfg.tau_nce).exp();
        }
        total += denom.ln() - pos;
    }
    total / n as f64
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn desk() -> (Model, Vec<FeatureBundle>) {
    let synth = SynthConfig {
        frames: 16,
        emo_dim: 5,
        acu_dim: 6,
        ..SynthConfig::default()
    };
    let config = ModelConfig {
        d_model: 8,
        ..ModelConfig::new(5, 6)
    };
    let mut model = Model::init(config, 21).unwrap();
    model.params.s = Matrix::scalar(0.4);
    (model, gen_bundles(&synth, 2, 2).unwrap())
}

#[test]
fn forward_matches_straight_line_recomputation() {
    let (model, bundles) = desk();
    for b in &bundles {
        let want = reference_forward(&model.params, b, model.config.sinc_kernel);
        let got = model.forward(b).unwrap();
        for (g, w) in got.logits.iter().zip(&want.logits) {
            assert!(close(*g, *w, 1e-10), "{}: {g} vs {w}", b.id);
        }
        assert!(close(got.score(), want.logits[0] - want.logits[1], 1e-10));
        for (g, w) in got.aligned.u_p.iter().zip(&want.u_p) {
            assert!(close(*g, *w, 1e-12));
        }
    }
}

#[test]
fn loss_matches_recomputed_terms() {
    let (model, bundles) = desk();
    let cfg = EvalConfig::default();
    for (i, b) in bundles.iter().enumerate() {
        let negatives = model.draw_negatives(b, &cfg, &mut ChaCha8Rng::seed_from_u64(i as u64));
        let want = reference_forward(&model.params, b, model.config.sinc_kernel);
        let [l0, l1] = want.logits;
        let picked = if b.label == Label::Bonafide { l0 } else { l1 };
        let ce = (l0.exp() + l1.exp()).ln() - picked;
        let eval = reference_eval(&want, &cfg, &negatives);
        let s = model.params.s();

        let got: LossBreakdown = model.loss_with_negatives(b, &cfg, &negatives);
        assert!(close(got.ce, ce, 1e-10));
        assert!(close(got.eval, eval, 1e-10));
        assert!(close(got.total, ce + (-s).exp() * eval + s, 1e-10));

        let drawn = model
            .total_loss(b, &cfg, &mut ChaCha8Rng::seed_from_u64(i as u64))
            .unwrap();
        assert_eq!(drawn, got);
    }
}

#[test]
fn uncertainty_weight_is_stationary_at_log_eval() {
    let (mut model, bundles) = desk();
    let cfg = EvalConfig::default();
    let b = &bundles[0];
    let negatives = model.draw_negatives(b, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let eval = model.loss_with_negatives(b, &cfg, &negatives).eval;
    model.params.s = Matrix::scalar(eval.ln());
    let (loss, grads) = model.backward_with_negatives(b, &cfg, &negatives);
    assert!(grads.s.item().abs() < 1e-12);
    assert!(((-loss.s).exp() * loss.eval - 1.0).abs() < 1e-12);
}
