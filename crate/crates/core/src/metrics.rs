//! Detection metrics and the emotion/acoustic change-magnitude diagnostic.
//!
//! Scores follow the usual countermeasure convention: higher means more
//! likely bonafide. At threshold `θ` a bonafide utterance is missed when its
//! score is `< θ` and a spoof is falsely accepted when its score is `≥ θ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureBundle, Label};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub entries: Vec<ScoredUtterance>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoredUtterance>) -> Self {
        Self { entries }
    }

    /// Builds a set with generated ids from `(score, label)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, Label)>) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .enumerate()
                .map(|(i, (score, label))| ScoredUtterance {
                    id: format!("u{i}"),
                    score,
                    label,
                })
                .collect(),
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    fn validate(&self) -> Result<()> {
        if let Some(bad) = self.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::NonFiniteScore(bad.id.clone()));
        }
        let (bonafide, spoof) = (self.count(Label::Bonafide), self.count(Label::Spoof));
        if bonafide == 0 || spoof == 0 {
            return Err(Error::SingleClass { bonafide, spoof });
        }
        Ok(())
    }
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at `-∞`, every midpoint between adjacent distinct scores,
/// and `+∞`, in ascending threshold order.
pub fn operating_points(scores: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    scores.validate()?;
    let n_bona = scores.count(Label::Bonafide) as f64;
    let n_spoof = scores.count(Label::Spoof) as f64;
    let mut sorted: Vec<(f64, Label)> = scores.entries.iter().map(|e| (e.score, e.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let point = |threshold: f64, bona_below: usize, spoof_below: usize| OperatingPoint {
        threshold,
        p_miss: bona_below as f64 / n_bona,
        p_fa: (n_spoof - spoof_below as f64) / n_spoof,
    };

    let mut points = vec![point(f64::NEG_INFINITY, 0, 0)];
    let (mut bona_below, mut spoof_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            match sorted[i].1 {
                Label::Bonafide => bona_below += 1,
                Label::Spoof => spoof_below += 1,
            }
            i += 1;
        }
        if i < sorted.len() {
            let mid = s + 0.5 * (sorted[i].0 - s);
            points.push(point(mid, bona_below, spoof_below));
        }
    }
    points.push(point(f64::INFINITY, bona_below, spoof_below));
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Locates the crossing of `P_miss` and `P_fa` along a threshold sweep.
///
/// The first point with `P_miss == P_fa` wins outright. Otherwise the rates
/// are interpolated linearly between the last point with `P_miss < P_fa` and
/// the first with `P_miss > P_fa`.
pub fn eer_from_points(points: &[OperatingPoint]) -> EerResult {
    let diff = |p: &OperatingPoint| p.p_miss - p.p_fa;
    let i = points
        .iter()
        .position(|p| diff(p) >= 0.0)
        .expect("sweep ends at +inf where P_miss - P_fa = 1");
    let cur = points[i];
    if diff(&cur) == 0.0 || i == 0 {
        return EerResult {
            eer: cur.p_miss,
            threshold: cur.threshold,
        };
    }
    let prev = points[i - 1];
    let (d0, d1) = (diff(&prev), diff(&cur));
    let lambda = -d0 / (d1 - d0);
    let eer = prev.p_miss + lambda * (cur.p_miss - prev.p_miss);
    let threshold = match (prev.threshold.is_finite(), cur.threshold.is_finite()) {
        (true, true) => prev.threshold + lambda * (cur.threshold - prev.threshold),
        (true, false) => prev.threshold,
        (false, true) => cur.threshold,
        // Only possible when every score is identical.
        (false, false) => f64::NAN,
    };
    EerResult { eer, threshold }
}

pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    let points = operating_points(scores)?;
    let mut result = eer_from_points(&points);
    if result.threshold.is_nan() {
        result.threshold = scores.entries[0].score;
    }
    Ok(result)
}

/// Tandem-detection cost configuration. Every value must be supplied by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdcfParams {
    pub p_target: f64,
    pub p_nontarget: f64,
    pub p_spoof: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    /// ASV false-alarm rate for zero-effort impostors.
    pub p_fa_asv: f64,
    /// ASV miss rate for targets.
    pub p_miss_asv: f64,
    /// ASV miss rate for spoofs.
    pub p_miss_spoof_asv: f64,
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        let priors = [self.p_target, self.p_nontarget, self.p_spoof];
        if priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidConfig("t-DCF priors must be >= 0".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "t-DCF priors must sum to 1, got {total}"
            )));
        }
        let costs = [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm];
        if costs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidConfig("t-DCF costs must be > 0".into()));
        }
        let rates = [self.p_fa_asv, self.p_miss_asv, self.p_miss_spoof_asv];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("ASV error rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Weights `(C1, C2)` of the countermeasure miss and false-alarm rates.
    pub fn constants(&self) -> (f64, f64) {
        let c1 = self.p_target * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
            - self.p_nontarget * self.c_fa_asv * self.p_fa_asv;
        let c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv);
        (c1, c2)
    }
}

/// Normalized t-DCF at one operating point.
pub fn normalized_tdcf(point: &OperatingPoint, c1: f64, c2: f64) -> f64 {
    (c1 * point.p_miss + c2 * point.p_fa) / c1.min(c2)
}

pub fn compute_min_tdcf(scores: &ScoreSet, params: &TdcfParams) -> Result<f64> {
    params.validate()?;
    let (c1, c2) = params.constants();
    if !(c1.min(c2) > 0.0) {
        return Err(Error::DegenerateTdcf { c1, c2 });
    }
    let points = operating_points(scores)?;
    Ok(points
        .iter()
        .map(|p| normalized_tdcf(p, c1, c2))
        .fold(f64::INFINITY, f64::min))
}

/// JSON metrics report written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub eer_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_tdcf: Option<f64>,
    pub n_bonafide: usize,
    pub n_spoof: usize,
}

impl MetricsReport {
    pub fn compute(scores: &ScoreSet, tdcf: Option<&TdcfParams>) -> Result<Self> {
        let eer = compute_eer(scores)?;
        let min_tdcf = tdcf.map(|p| compute_min_tdcf(scores, p)).transpose()?;
        Ok(Self {
            eer: eer.eer,
            eer_threshold: eer.threshold,
            min_tdcf,
            n_bonafide: scores.count(Label::Bonafide),
            n_spoof: scores.count(Label::Spoof),
        })
    }
}

/// L2 norms of consecutive-frame differences, min-max normalized to `[0, 1]`.
///
/// A constant magnitude curve maps to all zeros.
pub fn change_magnitude_curve(frames: &Matrix) -> Result<Vec<f64>> {
    if frames.rows() < 2 {
        return Err(Error::TooFewFrames(frames.rows()));
    }
    let raw: Vec<f64> = (1..frames.rows())
        .map(|t| {
            frames
                .row(t)
                .iter()
                .zip(frames.row(t - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|m| (m - lo) / (hi - lo)).collect())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "pearson inputs",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidConfig(
            "pearson needs at least two samples".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between a bundle's emotion and acoustic change curves.
pub fn bundle_change_correlation(bundle: &FeatureBundle) -> Result<f64> {
    let emo = change_magnitude_curve(&bundle.emo_frames)?;
    let acu = change_magnitude_curve(&bundle.acu_frames)?;
    pearson(&emo, &acu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl CorrelationStats {
    fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleCorrelation {
    pub id: String,
    pub label: Label,
    pub pearson: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub bonafide: Option<CorrelationStats>,
    pub spoof: Option<CorrelationStats>,
    /// Bundles whose correlation was undefined (a constant change curve).
    pub skipped: usize,
    pub per_bundle: Vec<BundleCorrelation>,
}

pub fn corpus_inconsistency_report(bundles: &[FeatureBundle]) -> InconsistencyReport {
    let results: Vec<Option<f64>> = bundles
        .par_iter()
        .map(|b| bundle_change_correlation(b).ok())
        .collect();
    let mut per_bundle = Vec::new();
    let mut skipped = 0;
    for (b, r) in bundles.iter().zip(results) {
        match r {
            Some(pearson) => per_bundle.push(BundleCorrelation {
                id: b.id.clone(),
                label: b.label,
                pearson,
            }),
            None => skipped += 1,
        }
    }
    let stats = |label: Label| {
        let values: Vec<f64> = per_bundle
            .iter()
            .filter(|c| c.label == label)
            .map(|c| c.pearson)
            .collect();
        CorrelationStats::from_values(&values)
    };
    InconsistencyReport {
        bonafide: stats(Label::Bonafide),
        spoof: stats(Label::Spoof),
        skipped,
        per_bundle,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(bona: &[f64], spoof: &[f64]) -> ScoreSet {
        ScoreSet::from_pairs(
            bona.iter()
                .map(|&s| (s, Label::Bonafide))
                .chain(spoof.iter().map(|&s| (s, Label::Spoof))),
        )
    }

    #[test]
    fn eer_perfect_separation() {
        let r = compute_eer(&set(&[2.0, 3.0, 4.0], &[-1.0, 0.0])).unwrap();
        assert_eq!(r.eer, 0.0);
        assert!(r.threshold > 0.0 && r.threshold < 2.0);
    }

    #[test]
    fn eer_interleaved_example() {
        let r = compute_eer(&set(&[0.8, 0.4], &[0.6, 0.2])).unwrap();
        assert_eq!(r.eer, 0.5);
        assert!((r.threshold - 0.5).abs() < 1e-15);
    }

    #[test]
    fn eer_interpolates_between_points() {
        // Sweep: (-inf: 0, 1), (1.5: 0, 0.5), (2.5: 1, 0.5), (+inf: 1, 0)
        let r = compute_eer(&set(&[2.0], &[1.0, 3.0])).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-15);
        assert!((r.threshold - 2.0).abs() < 1e-15);
    }

    #[test]
    fn eer_flipped_labels_on_negated_scores() {
        let s = set(&[0.9, 0.3, -0.2], &[0.1, -0.5, 0.4]);
        let flipped = ScoreSet::from_pairs(s.entries.iter().map(|e| {
            let label = match e.label {
                Label::Bonafide => Label::Spoof,
                Label::Spoof => Label::Bonafide,
            };
            (-e.score, label)
        }));
        assert_eq!(
            compute_eer(&s).unwrap().eer,
            compute_eer(&flipped).unwrap().eer
        );
    }

    #[test]
    fn eer_requires_both_classes() {
        let err = compute_eer(&set(&[1.0, 2.0], &[])).unwrap_err();
        assert!(matches!(err, Error::SingleClass { spoof: 0, .. }));
    }

    fn params(c_miss_cm: f64, c_fa_cm: f64) -> TdcfParams {
        TdcfParams {
            p_target: 0.9405,
            p_nontarget: 0.0095,
            p_spoof: 0.05,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm,
            c_fa_cm,
            p_fa_asv: 0.01,
            p_miss_asv: 0.02,
            p_miss_spoof_asv: 0.3,
        }
    }

    #[test]
    fn tdcf_perfect_separation_is_zero() {
        let v = compute_min_tdcf(&set(&[5.0, 6.0], &[1.0, 2.0]), &params(1.0, 10.0)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn tdcf_degenerate_constants() {
        let mut p = params(1.0, 10.0);
        p.p_miss_spoof_asv = 1.0;
        assert!(matches!(
            compute_min_tdcf(&set(&[1.0], &[0.0]), &p),
            Err(Error::DegenerateTdcf { .. })
        ));
    }

    #[test]
    fn tdcf_bounded_by_one() {
        let s = set(&[0.1, 0.5, -0.3], &[0.4, 0.2, 0.6]);
        let v = compute_min_tdcf(&s, &params(1.0, 10.0)).unwrap();
        assert!((0.0..=1.0).contains(&v), "{v}");
    }

    #[test]
    fn change_curve_example() {
        let frames = Matrix::from_rows(&[[0.0], [1.0], [3.0], [4.0]]);
        assert_eq!(change_magnitude_curve(&frames).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn change_curve_constant_is_zero() {
        let frames = Matrix::filled(5, 3, 2.5);
        assert_eq!(change_magnitude_curve(&frames).unwrap(), vec![0.0; 4]);
        assert!(change_magnitude_curve(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        // cov = 1.5, var_x = 1, var_y = 7/3 (sample); r = 1.5 / sqrt(7/3)
        let expected = 1.5 / (7.0f64 / 3.0).sqrt();
        assert!((pearson(&x, &[1.0, 2.0, 4.0]).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.9820).abs() < 1e-4);
        assert!(matches!(
            pearson(&x, &[2.0, 2.0, 2.0]),
            Err(Error::UndefinedCorrelation)
        ));
    }

    fn bundle(id: &str, label: Label, emo: Matrix, acu: Matrix) -> FeatureBundle {
        FeatureBundle {
            id: id.into(),
            emo_utt: vec![0.0; emo.cols()],
            emo_frames: emo,
            acu_frames: acu,
            label,
        }
    }

    #[test]
    fn report_handles_single_class_and_degenerate_curves() {
        let ramp = Matrix::from_rows(&[[0.0], [1.0], [3.0], [4.0], [8.0]]);
        let flat = Matrix::filled(5, 1, 1.0);
        let bundles = vec![
            bundle("a", Label::Bonafide, ramp.clone(), ramp.clone()),
            bundle("b", Label::Bonafide, ramp.clone(), flat),
        ];
        let r = corpus_inconsistency_report(&bundles);
        assert!(r.spoof.is_none());
        assert_eq!(r.skipped, 1);
        let bona = r.bonafide.unwrap();
        assert_eq!(bona.count, 1);
        assert_eq!(bona.std, 0.0);
        assert!((bona.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_report_json_omits_absent_tdcf() {
        let report = MetricsReport::compute(&set(&[1.0], &[0.0]), None).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"eer\""));
        assert!(!json.contains("min_tdcf"));
    }

    proptest! {
        #[test]
        fn eer_invariant_under_monotone_transform(
            bona in prop::collection::vec(-5.0f64..5.0, 1..30),
            spoof in prop::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let s = set(&bona, &spoof);
            let transformed = ScoreSet::from_pairs(
                s.entries.iter().map(|e| ((0.7 * e.score).exp() * 3.0 - 1.0, e.label)),
            );
            let a = compute_eer(&s).unwrap().eer;
            let b = compute_eer(&transformed).unwrap().eer;
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn pearson_affine_invariance(
            x in prop::collection::vec(-10.0f64..10.0, 3..40),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
            if let Ok(r) = pearson(&x, &y) {
                let xt: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
                let r2 = pearson(&xt, &y).unwrap();
                prop_assert!((r - r2).abs() < 1e-12);
            }
        }
    }
}
