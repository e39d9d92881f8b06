//! Synthetic bonafide/spoof feature bundles for desk-scale experiments.
//!
//! Bonafide bundles drive both streams from one smooth latent trajectory, so
//! emotion and acoustic change magnitudes co-vary. Spoof bundles use two
//! independent latents and inject unmatched jumps into a single stream.
//!
//! Latent trajectories are Gaussian random walks smoothed with a length-5
//! moving average. The latent-to-feature maps have orthonormal rows, so with
//! zero noise both streams' change magnitudes are exactly `‖Δz‖`.
//! The maps depend only on the feature dimensions, never on the seed, which
//! keeps differently seeded splits in the same feature space.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{save_bundle, DatasetManifest, FeatureBundle, Label, ManifestEntry};
use crate::matrix::Matrix;

const LATENT_DIM: usize = 4;
const SMOOTHING_WINDOW: usize = 5;
const MAP_SEED: u64 = 0x005E_ED0F_FEA7_u64;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "synth_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub frames: usize,
    pub emo_dim: usize,
    pub acu_dim: usize,
    pub noise_sigma: f64,
    /// Per-frame probability of an unmatched jump (spoof only).
    pub burst_rate: f64,
    pub burst_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            emo_dim: 16,
            acu_dim: 16,
            noise_sigma: 0.05,
            burst_rate: 0.15,
            burst_scale: 1.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.frames < 8 {
            return bad(format!("frames must be >= 8, got {}", self.frames));
        }
        if self.emo_dim == 0 || self.acu_dim == 0 {
            return bad("feature dimensions must be >= 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.burst_rate) {
            return bad(format!("burst_rate must lie in [0, 1], got {}", self.burst_rate));
        }
        if !(self.burst_scale.is_finite() && self.burst_scale > 0.0) {
            return bad(format!("burst_scale must be finite and > 0, got {}", self.burst_scale));
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `rows × dim` matrix with orthonormal rows (Gram-Schmidt on Gaussian draws).
fn orthonormal_rows(rows: usize, dim: usize, rng: &mut impl Rng) -> Matrix {
    assert!(rows <= dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Matrix::from_rows(&basis)
}

struct LatentMaps {
    emo: Matrix,
    acu: Matrix,
}

impl LatentMaps {
    fn new(cfg: &SynthConfig) -> Self {
        let latent = latent_dim(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            MAP_SEED,
            (cfg.emo_dim as u64) << 32 | cfg.acu_dim as u64,
        ));
        Self {
            emo: orthonormal_rows(latent, cfg.emo_dim, &mut rng),
            acu: orthonormal_rows(latent, cfg.acu_dim, &mut rng),
        }
    }
}

fn latent_dim(cfg: &SynthConfig) -> usize {
    LATENT_DIM.min(cfg.emo_dim).min(cfg.acu_dim)
}

/// `frames × dim` smoothed random walk.
fn smooth_latent(frames: usize, dim: usize, rng: &mut impl Rng) -> Matrix {
    let steps = frames + SMOOTHING_WINDOW - 1;
    let mut walk = Matrix::zeros(steps, dim);
    for t in 1..steps {
        for j in 0..dim {
            walk[(t, j)] = walk[(t - 1, j)] + gaussian(rng);
        }
    }
    Matrix::from_fn(frames, dim, |t, j| {
        (t..t + SMOOTHING_WINDOW).map(|s| walk[(s, j)]).sum::<f64>() / SMOOTHING_WINDOW as f64
    })
}

fn add_noise(m: &mut Matrix, sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    for v in m.as_mut_slice() {
        *v += sigma * gaussian(rng);
    }
}

fn utterance_embedding(frames: &Matrix, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = frames.rows() as f64;
    (0..frames.cols())
        .map(|j| {
            let mean = (0..frames.rows()).map(|t| frames[(t, j)]).sum::<f64>() / n;
            if sigma == 0.0 {
                mean
            } else {
                mean + sigma * gaussian(rng)
            }
        })
        .collect()
}

/// Bonafide bundle: one shared latent drives both streams.
pub fn gen_bonafide(cfg: &SynthConfig, rng: &mut impl Rng, id: impl Into<String>) -> Result<FeatureBundle> {
    cfg.validate()?;
    let maps = LatentMaps::new(cfg);
    let z = smooth_latent(cfg.frames, latent_dim(cfg), rng);
    let mut emo = z.matmul(&maps.emo);
    let mut acu = z.matmul(&maps.acu);
    add_noise(&mut emo, cfg.noise_sigma, rng);
    add_noise(&mut acu, cfg.noise_sigma, rng);
    let emo_utt = utterance_embedding(&emo, cfg.noise_sigma, rng);
    Ok(FeatureBundle {
        id: id.into(),
        emo_frames: emo,
        emo_utt,
        acu_frames: acu,
        label: Label::Bonafide,
    })
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Adds `offset` to every frame from `start` onward (a step change).
fn inject_step(m: &mut Matrix, start: usize, offset: &[f64]) {
    for t in start..m.rows() {
        for (v, o) in m.row_mut(t).iter_mut().zip(offset) {
            *v += o;
        }
    }
}

/// Spoof bundle: independent latents plus single-stream jumps.
pub fn gen_spoof(cfg: &SynthConfig, rng: &mut impl Rng, id: impl Into<String>) -> Result<FeatureBundle> {
    cfg.validate()?;
    let maps = LatentMaps::new(cfg);
    let latent = latent_dim(cfg);
    let mut emo = smooth_latent(cfg.frames, latent, rng).matmul(&maps.emo);
    let mut acu = smooth_latent(cfg.frames, latent, rng).matmul(&maps.acu);
    for t in 1..cfg.frames {
        if rng.random::<f64>() < cfg.burst_rate {
            let (target, dim) = if rng.random::<bool>() {
                (&mut emo, cfg.emo_dim)
            } else {
                (&mut acu, cfg.acu_dim)
            };
            let offset: Vec<f64> = random_unit(dim, rng)
                .into_iter()
                .map(|x| x * cfg.burst_scale)
                .collect();
            inject_step(target, t, &offset);
        }
    }
    add_noise(&mut emo, cfg.noise_sigma, rng);
    add_noise(&mut acu, cfg.noise_sigma, rng);
    let emo_utt = utterance_embedding(&emo, cfg.noise_sigma, rng);
    Ok(FeatureBundle {
        id: id.into(),
        emo_frames: emo,
        emo_utt,
        acu_frames: acu,
        label: Label::Spoof,
    })
}

fn bundle_rng(seed: u64, label: Label, index: usize) -> ChaCha8Rng {
    let stream = 2 * index as u64 + label.code() as u64;
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

pub fn bundle_id(label: Label, index: usize) -> String {
    format!("{}_{index:05}", label.as_str())
}

/// Generates bundles in memory, bonafide first. Each bundle's rng is derived
/// from `(cfg.seed, label, index)`, so results do not depend on the counts of
/// the other class or on scheduling.
pub fn gen_bundles(cfg: &SynthConfig, n_bonafide: usize, n_spoof: usize) -> Result<Vec<FeatureBundle>> {
    cfg.validate()?;
    let jobs: Vec<(Label, usize)> = (0..n_bonafide)
        .map(|i| (Label::Bonafide, i))
        .chain((0..n_spoof).map(|i| (Label::Spoof, i)))
        .collect();
    jobs.par_iter()
        .map(|&(label, i)| {
            let mut rng = bundle_rng(cfg.seed, label, i);
            let id = bundle_id(label, i);
            match label {
                Label::Bonafide => gen_bonafide(cfg, &mut rng, id),
                Label::Spoof => gen_spoof(cfg, &mut rng, id),
            }
        })
        .collect()
}

/// Writes `n_bonafide + n_spoof` EAIF files, `manifest.jsonl` and
/// `synth_config.json` into `out_dir`.
pub fn gen_dataset(
    cfg: &SynthConfig,
    n_bonafide: usize,
    n_spoof: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let bundles = gen_bundles(cfg, n_bonafide, n_spoof)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let file = format!("{}.eaif", b.id);
        save_bundle(b, out_dir.join(&file))?;
        entries.push(ManifestEntry {
            id: b.id.clone(),
            path: file.into(),
            label: b.label,
        });
    }
    let manifest = DatasetManifest {
        entries,
        seed: cfg.seed,
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, json + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{bundle_change_correlation, change_magnitude_curve};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = [
            SynthConfig { frames: 7, ..Default::default() },
            SynthConfig { burst_rate: 1.5, ..Default::default() },
            SynthConfig { noise_sigma: -0.1, ..Default::default() },
            SynthConfig { burst_scale: f64::NAN, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn noiseless_bonafide_curves_correlate_perfectly() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..Default::default() };
        let b = gen_bonafide(&cfg, &mut rng(11), "b").unwrap();
        let r = bundle_change_correlation(&b).unwrap();
        assert!((r - 1.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn bonafide_correlation_with_default_noise() {
        let cfg = SynthConfig { seed: 3, ..Default::default() };
        let b = gen_bonafide(&cfg, &mut bundle_rng(3, Label::Bonafide, 0), "b").unwrap();
        let r = bundle_change_correlation(&b).unwrap();
        assert!(r > 0.5, "{r}");
    }

    #[test]
    fn spoof_without_bursts_less_correlated_than_bonafide() {
        let cfg = SynthConfig { burst_rate: 0.0, seed: 5, ..Default::default() };
        let b = gen_bonafide(&cfg, &mut rng(5), "b").unwrap();
        let s = gen_spoof(&cfg, &mut rng(5), "s").unwrap();
        assert!(bundle_change_correlation(&s).unwrap() < bundle_change_correlation(&b).unwrap());
    }

    #[test]
    fn bursts_produce_unmatched_jumps() {
        let cfg = SynthConfig { burst_rate: 1.0, burst_scale: 20.0, ..Default::default() };
        let s = gen_spoof(&cfg, &mut rng(9), "s").unwrap();
        let emo = change_magnitude_curve(&s.emo_frames).unwrap();
        let acu = change_magnitude_curve(&s.acu_frames).unwrap();
        let unmatched = emo
            .iter()
            .zip(&acu)
            .any(|(&e, &a)| (e > 0.9 && a < 0.1) || (a > 0.9 && e < 0.1));
        assert!(unmatched);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(
            gen_bonafide(&cfg, &mut rng(4), "x").unwrap(),
            gen_bonafide(&cfg, &mut rng(4), "x").unwrap()
        );
        assert_eq!(
            gen_spoof(&cfg, &mut rng(4), "x").unwrap(),
            gen_spoof(&cfg, &mut rng(4), "x").unwrap()
        );
    }

    #[test]
    fn bundle_seeds_independent_of_counts() {
        let cfg = SynthConfig::default();
        let a = gen_bundles(&cfg, 2, 3).unwrap();
        let b = gen_bundles(&cfg, 5, 1).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[2], b[5]);
    }

    #[test]
    fn mean_correlation_separates_classes() {
        let bundles = gen_bundles(&SynthConfig::default(), 100, 100).unwrap();
        let mean = |label: Label| {
            let rs: Vec<f64> = bundles
                .iter()
                .filter(|b| b.label == label)
                .filter_map(|b| bundle_change_correlation(b).ok())
                .collect();
            rs.iter().sum::<f64>() / rs.len() as f64
        };
        assert!(mean(Label::Bonafide) > mean(Label::Spoof));
    }
}
