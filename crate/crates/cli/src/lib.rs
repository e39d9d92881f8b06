//! `eaiadd` command-line workflows: synthesize data, train, evaluate, analyze
//! and gradient-check.
//!
//! Exit codes: 0 on success, 1 on invalid arguments or data, 2 on I/O failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use eaiadd_core::feature_store::load_manifest;
use eaiadd_core::gradcheck::{self, GradcheckConfig};
use eaiadd_core::metrics::{
    change_magnitude_curve, corpus_inconsistency_report, MetricsReport, ScoreSet, ScoredUtterance, TdcfParams,
};
use eaiadd_core::synthgen::{gen_dataset, SynthConfig, MANIFEST_FILE};
use eaiadd_core::{checkpoint, Ablation, Error, EvalConfig, FeatureBundle, Model, ModelConfig, TrainConfig};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {source}", path.display()),
        }
    }

    /// Wraps a library error, prefixing the flag or file it came from.
    fn core(context: impl std::fmt::Display, err: Error) -> Self {
        Self {
            code: if err.is_io() { EXIT_IO } else { EXIT_VALIDATION },
            message: format!("{context}: {err}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "eaiadd", version, about = "Emotion-acoustic inconsistency deepfake detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bonafide/spoof dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest and save a checkpoint.
    Train(TrainArgs),
    /// Score every bundle of a manifest and print metrics as JSON.
    Eval(EvalArgs),
    /// Write per-bundle change curves and the corpus inconsistency report.
    Analyze(AnalyzeArgs),
    /// Compare backprop gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        Ok(_) => Err("must be at least 1".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        Ok(_) => Err("must be at least 2".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn synth_frames(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 8 => Ok(v),
        Ok(_) => Err("must be at least 8".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn finite(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match finite(s)? {
        v if v > 0.0 => Ok(v),
        _ => Err("must be positive".into()),
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    match finite(s)? {
        v if v >= 0.0 => Ok(v),
        _ => Err("must be non-negative".into()),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match finite(s)? {
        v if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err("must lie in [0, 1]".into()),
    }
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub num_bonafide: usize,
    #[arg(long, default_value_t = 100)]
    pub num_spoof: usize,
    #[arg(long, default_value_t = SynthConfig::default().frames, value_parser = synth_frames)]
    pub frames: usize,
    #[arg(long, default_value_t = SynthConfig::default().emo_dim, value_parser = positive_usize)]
    pub emo_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().acu_dim, value_parser = positive_usize)]
    pub acu_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma, value_parser = non_negative_f64)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = SynthConfig::default().burst_rate, value_parser = unit_interval)]
    pub burst_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().burst_scale, value_parser = positive_f64)]
    pub burst_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct AblationArgs {
    /// Replace the alignment module with plain projections.
    #[arg(long)]
    pub no_eaam: bool,
    /// Drop the contrastive inconsistency loss.
    #[arg(long)]
    pub no_eval: bool,
    /// Mean-pool projected frames straight into the classifier.
    #[arg(long)]
    pub no_hig: bool,
}

impl From<AblationArgs> for Ablation {
    fn from(a: AblationArgs) -> Self {
        Ablation {
            no_eaam: a.no_eaam,
            no_eval: a.no_eval,
            no_hig: a.no_hig,
        }
    }
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON file with the per-epoch log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().epochs, value_parser = positive_usize)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate, value_parser = positive_f64)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay, value_parser = non_negative_f64)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size, value_parser = positive_usize)]
    pub batch_size: usize,
    /// Seeds model initialization, shuffling and negative sampling.
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = EvalConfig::default().k, value_parser = positive_usize)]
    pub k: usize,
    #[arg(long, default_value_t = EvalConfig::default().tau, value_parser = positive_f64)]
    pub tau: f64,
    #[arg(long, default_value_t = EvalConfig::default().tau_nce, value_parser = positive_f64)]
    pub tau_nce: f64,
    #[arg(long, default_value_t = EvalConfig::default().n_neg_far)]
    pub n_neg_far: usize,
    #[arg(long, default_value_t = EvalConfig::default().n_neg_shuffle)]
    pub n_neg_shuffle: usize,
    /// Defaults to max(2k + 1, 8).
    #[arg(long)]
    pub far_margin: Option<usize>,
    #[arg(long, default_value_t = eaiadd_core::model::DEFAULT_D_MODEL, value_parser = positive_usize)]
    pub d_model: usize,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

impl TrainArgs {
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let far_margin = self.far_margin.unwrap_or(EvalConfig::with_k(self.k).far_margin);
        if far_margin <= self.k {
            return Err(CliError::validation(format!(
                "--far-margin ({far_margin}) must exceed --k ({})",
                self.k
            )));
        }
        let cfg = TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            eval: EvalConfig {
                k: self.k,
                tau: self.tau,
                tau_nce: self.tau_nce,
                n_neg_far: self.n_neg_far,
                n_neg_shuffle: self.n_neg_shuffle,
                far_margin,
            },
        };
        cfg.validate().map_err(|e| CliError::core("training flags", e))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON file with t-DCF priors, costs and ASV error rates; enables min_tdcf.
    #[arg(long)]
    pub tdcf_params: Option<PathBuf>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of per-bundle scores (id,label,score).
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = GradcheckConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = GradcheckConfig::default().step, value_parser = positive_f64)]
    pub step: f64,
    /// Largest accepted relative error; exceeding it exits with code 1.
    #[arg(long, default_value_t = 1e-4, value_parser = positive_f64)]
    pub tolerance: f64,
    #[arg(long, default_value_t = GradcheckConfig::default().frames, value_parser = at_least_two)]
    pub frames: usize,
    #[arg(long, default_value_t = GradcheckConfig::default().emo_dim, value_parser = positive_usize)]
    pub emo_dim: usize,
    #[arg(long, default_value_t = GradcheckConfig::default().acu_dim, value_parser = positive_usize)]
    pub acu_dim: usize,
    #[arg(long, default_value_t = GradcheckConfig::default().d_model, value_parser = positive_usize)]
    pub d_model: usize,
    #[arg(long, default_value_t = GradcheckConfig::default().k, value_parser = positive_usize)]
    pub k: usize,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn write_file(flag: &str, path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| {
        let mut err = CliError::io(path, e);
        err.message = format!("{flag} {}", err.message);
        err
    })
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

fn load_bundles(manifest: &Path) -> CliResult<Vec<FeatureBundle>> {
    let bundles =
        load_manifest(manifest).map_err(|e| CliError::core(format_args!("--manifest {}", manifest.display()), e))?;
    let Some(first) = bundles.first() else {
        return Err(CliError::validation(format!(
            "--manifest {}: manifest lists no bundles",
            manifest.display()
        )));
    };
    let dims = (first.emo_dim(), first.acu_dim());
    if let Some(b) = bundles.iter().find(|b| (b.emo_dim(), b.acu_dim()) != dims) {
        return Err(CliError::validation(format!(
            "--manifest {}: bundle {:?} has dimensions {}x{}, expected {}x{} as in {:?}",
            manifest.display(),
            b.id,
            b.emo_dim(),
            b.acu_dim(),
            dims.0,
            dims.1,
            first.id
        )));
    }
    Ok(bundles)
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        frames: a.frames,
        emo_dim: a.emo_dim,
        acu_dim: a.acu_dim,
        noise_sigma: a.noise_sigma,
        burst_rate: a.burst_rate,
        burst_scale: a.burst_scale,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::core("synth flags", e))?;
    if a.num_bonafide + a.num_spoof == 0 {
        return Err(CliError::validation("--num-bonafide and --num-spoof are both 0"));
    }
    let manifest = gen_dataset(&cfg, a.num_bonafide, a.num_spoof, &a.out_dir)
        .map_err(|e| CliError::core(format_args!("--out-dir {}", a.out_dir.display()), e))?;
    println!(
        "wrote {} bundles and {}",
        manifest.entries.len(),
        a.out_dir.join(MANIFEST_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainLog<'a> {
    config: &'a TrainConfig,
    model: &'a ModelConfig,
    report: &'a eaiadd_core::train::TrainReport,
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.train_config()?;
    let bundles = load_bundles(&a.manifest)?;
    let model_config = ModelConfig {
        d_model: a.d_model,
        ablation: a.ablation.into(),
        ..ModelConfig::new(bundles[0].emo_dim(), bundles[0].acu_dim())
    };
    let mut model = Model::init(model_config, cfg.seed).map_err(|e| CliError::core("model flags", e))?;
    let report = eaiadd_core::train::train(&mut model, &bundles, &cfg, |log| {
        println!(
            "epoch {:>3}/{}  total {:.6}  ce {:.6}  eval {:.6}  s {:.6}",
            log.epoch, cfg.epochs, log.total, log.ce, log.eval, log.s
        );
    })
    .map_err(|e| CliError::core(format_args!("--manifest {}", a.manifest.display()), e))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let bytes = checkpoint::to_bytes(&model).map_err(|e| CliError::core("--out", e))?;
    write_file("--out", &a.out, bytes)?;
    if let Some(path) = &a.log {
        let log = TrainLog {
            config: &cfg,
            model: &model.config,
            report: &report,
        };
        write_file("--log", path, to_json(&log))?;
    }
    Ok(())
}

/// Where a default value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Stated for the published system.
    Published,
    /// Chosen for this implementation.
    Implementation,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Published => "published setting",
            Provenance::Implementation => "implementation choice",
        }
    }
}

/// Every tunable default with its value and provenance.
pub fn default_provenance() -> Vec<(&'static str, String, Provenance)> {
    use Provenance::*;
    let t = TrainConfig::default();
    let e = EvalConfig::default();
    let s = SynthConfig::default();
    vec![
        ("epochs", t.epochs.to_string(), Published),
        ("learning-rate", t.learning_rate.to_string(), Published),
        ("weight-decay", t.weight_decay.to_string(), Published),
        ("k", e.k.to_string(), Published),
        ("batch-size", t.batch_size.to_string(), Implementation),
        ("tau", e.tau.to_string(), Implementation),
        ("tau-nce", e.tau_nce.to_string(), Implementation),
        ("n-neg-far", e.n_neg_far.to_string(), Implementation),
        ("n-neg-shuffle", e.n_neg_shuffle.to_string(), Implementation),
        ("far-margin", "max(2k+1, 8)".into(), Implementation),
        ("d-model", eaiadd_core::model::DEFAULT_D_MODEL.to_string(), Implementation),
        ("sinc-kernel", eaiadd_core::eaam::DEFAULT_SINC_KERNEL.to_string(), Implementation),
        ("frames", s.frames.to_string(), Implementation),
        ("emo-dim", s.emo_dim.to_string(), Implementation),
        ("acu-dim", s.acu_dim.to_string(), Implementation),
        ("noise-sigma", s.noise_sigma.to_string(), Implementation),
        ("burst-rate", s.burst_rate.to_string(), Implementation),
        ("burst-scale", s.burst_scale.to_string(), Implementation),
    ]
}

fn provenance_table() -> String {
    let mut out = String::from("defaults:\n");
    for (name, value, source) in default_provenance() {
        let _ = writeln!(out, "  {name:<14} {value:<14} {}", source.as_str());
    }
    out
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let tdcf = a.tdcf_params.as_ref().map(|path| read_tdcf(path)).transpose()?;
    let model = checkpoint::load(&a.checkpoint)
        .map_err(|e| CliError::core(format_args!("--checkpoint {}", a.checkpoint.display()), e))?;
    let bundles = load_bundles(&a.manifest)?;
    let mut entries = Vec::with_capacity(bundles.len());
    for b in &bundles {
        if (b.emo_dim(), b.acu_dim()) != (model.config.emo_dim, model.config.acu_dim) {
            return Err(CliError::validation(format!(
                "--manifest {}: bundle {:?} has dimensions {}x{} but --checkpoint {} expects {}x{}",
                a.manifest.display(),
                b.id,
                b.emo_dim(),
                b.acu_dim(),
                a.checkpoint.display(),
                model.config.emo_dim,
                model.config.acu_dim
            )));
        }
        let score = model
            .score(b)
            .map_err(|e| CliError::core(format_args!("bundle {:?}", b.id), e))?;
        entries.push(ScoredUtterance {
            id: b.id.clone(),
            score,
            label: b.label,
        });
    }
    let scores = ScoreSet::new(entries);
    let report = MetricsReport::compute(&scores, tdcf.as_ref())
        .map_err(|e| CliError::core(format_args!("--manifest {}", a.manifest.display()), e))?;
    let json = to_json(&report);
    print!("{json}");
    eprint!("{}", provenance_table());
    eprintln!(
        "checkpoint: d_model {}, ablation {}",
        model.config.d_model,
        model.config.ablation.label()
    );
    if let Some(path) = &a.out {
        write_file("--out", path, &json)?;
    }
    if let Some(path) = &a.scores_out {
        let mut csv = String::from("id,label,score\n");
        for e in &scores.entries {
            let _ = writeln!(csv, "{},{},{:e}", e.id, e.label.as_str(), e.score);
        }
        write_file("--scores-out", path, csv)?;
    }
    Ok(())
}

fn read_tdcf(path: &Path) -> CliResult<TdcfParams> {
    let flag = |e: CliError| CliError {
        message: format!("--tdcf-params {}", e.message),
        ..e
    };
    let text = fs::read_to_string(path).map_err(|e| flag(CliError::io(path, e)))?;
    let params: TdcfParams = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("--tdcf-params {}: {e}", path.display())))?;
    params
        .validate()
        .map_err(|e| CliError::core(format_args!("--tdcf-params {}", path.display()), e))?;
    Ok(params)
}

/// Bundle ids become file names, so they must stay inside the output directory.
fn file_stem_for(id: &str) -> Option<&str> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && !id.contains(['/', '\\'])
        && !id.contains('\0');
    ok.then_some(id)
}

fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let bundles = load_bundles(&a.manifest)?;
    let mut curves = Vec::with_capacity(bundles.len());
    for b in &bundles {
        let stem = file_stem_for(&b.id).ok_or_else(|| {
            CliError::validation(format!(
                "--manifest {}: bundle id {:?} is not usable as a file name",
                a.manifest.display(),
                b.id
            ))
        })?;
        let context = |e| CliError::core(format_args!("bundle {:?}", b.id), e);
        let emo = change_magnitude_curve(&b.emo_frames).map_err(context)?;
        let acu = change_magnitude_curve(&b.acu_frames).map_err(context)?;
        curves.push((stem, emo, acu));
    }
    let report = corpus_inconsistency_report(&bundles);
    fs::create_dir_all(&a.out_dir).map_err(|e| {
        let mut err = CliError::io(&a.out_dir, e);
        err.message = format!("--out-dir {}", err.message);
        err
    })?;
    for (stem, emo, acu) in curves {
        let mut csv = String::from("frame_index,emo_change,acu_change\n");
        for (i, (e, c)) in emo.iter().zip(&acu).enumerate() {
            let _ = writeln!(csv, "{},{e:e},{c:e}", i + 1);
        }
        write_file("--out-dir", &a.out_dir.join(format!("{stem}.csv")), csv)?;
    }
    write_file("--out-dir", &a.out_dir.join("summary.json"), to_json(&report))?;
    let mean = |s: Option<eaiadd_core::metrics::CorrelationStats>| s.map(|s| s.mean);
    let (bona, spoof) = (mean(report.bonafide), mean(report.spoof));
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("mean pearson bonafide {}  spoof {}", fmt(bona), fmt(spoof));
    if let (Some(b), Some(s)) = (bona, spoof) {
        println!("gap {:.4}", b - s);
    }
    if report.skipped > 0 {
        eprintln!("warning: {} bundles with a constant change curve were skipped", report.skipped);
    }
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cfg = GradcheckConfig {
        frames: a.frames,
        emo_dim: a.emo_dim,
        acu_dim: a.acu_dim,
        d_model: a.d_model,
        k: a.k,
        step: a.step,
        seed: a.seed,
        ablation: a.ablation.into(),
    };
    let report = gradcheck::run(&cfg).map_err(|e| CliError::core("gradcheck flags", e))?;
    for g in &report.groups {
        println!("{:<12} {:.6e}", g.group, g.max_rel_error);
    }
    println!("{:<12} {:.6e}", "max", report.max_rel_error);
    if !(report.max_rel_error < a.tolerance) {
        return Err(CliError::validation(format!(
            "max relative error {:.6e} is not below --tolerance {:e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}
