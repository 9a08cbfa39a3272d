use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use meta_input::adaptation::{
    bn_adapt as adapt_bn, load_meta_input, optimize_meta_input, optimize_meta_input_unsupervised, save_meta_input,
    AdaptConfig,
};
use meta_input::data::{
    corrupt as apply_corruption, load_manifest, measure_psnr, save_manifest, subsample, synth_digits, synth_shift,
    Corruption, CorruptionSpec, Dataset, DigitStyle, IdxEncoding, Shift,
};
use meta_input::harness::{
    evaluate_accuracy, parse_report, render_report, resolve_data_path, run_experiment, ExperimentConfig, ReportFormat,
};
use meta_input::model::{load_model, pretrain as train_model, save_model, Model, ModelSpec, TrainConfig};
use meta_input::{Error, Result};

use crate::{Common, OutputFormat};

/// Fills every `None` field of `$cli` from `$file`.
macro_rules! overlay {
    ($cli:ident, $file:ident; $($f:ident),+ $(,)?) => {
        $( if $cli.$f.is_none() { $cli.$f = $file.$f; } )+
    };
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn need<T>(op: &str, v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("{op}: missing --{flag} (flag or config key `{}`)", flag.replace('-', "_"))))
}

/// Reads `[section]` of a config file, or the whole file when it has no
/// such table.
fn file_config<T: DeserializeOwned + Default>(path: Option<&Path>, section: &str) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{section}: cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{section}: config {}: {e}", path.display())))?;
    let body = match table.remove(section) {
        Some(toml::Value::Table(t)) => t,
        _ => table,
    };
    body.try_into()
        .map_err(|e: toml::de::Error| usage(format!("{section}: config {}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_manifest(&resolve_data_path(path))
}

fn read_model(path: &Path) -> Result<Model> {
    load_model(resolve_data_path(path))
}

fn encoding(name: Option<&str>) -> Result<IdxEncoding> {
    match name.unwrap_or("f32") {
        "f32" => Ok(IdxEncoding::F32),
        "u8" => Ok(IdxEncoding::U8),
        other => Err(usage(format!("unknown --encoding `{other}` (expected f32 or u8)"))),
    }
}

/// Renders results as `key: value` lines or as one TOML document that also
/// echoes the effective configuration.
fn emit(format: Option<OutputFormat>, command: &str, results: toml::Table, effective: &impl Serialize) -> Result<String> {
    match format.unwrap_or_default() {
        OutputFormat::TableText => {
            let mut out = String::new();
            for (k, v) in &results {
                let v = match v {
                    toml::Value::String(s) => s.clone(),
                    toml::Value::Float(f) => format!("{f:.2}"),
                    other => other.to_string(),
                };
                out.push_str(&format!("{k}: {v}\n"));
            }
            Ok(out)
        }
        OutputFormat::Structured => {
            let mut doc = toml::Table::new();
            doc.insert("command".into(), command.into());
            doc.insert("results".into(), toml::Value::Table(results));
            let cfg = toml::Table::try_from(effective).map_err(|e| usage(e.to_string()))?;
            doc.insert("config".into(), toml::Value::Table(cfg));
            toml::to_string(&doc).map_err(|e| usage(e.to_string()))
        }
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Number of samples (classes are balanced)
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    foreground: Option<f32>,
    #[arg(long)]
    background: Option<f32>,
    #[arg(long)]
    jitter: Option<f32>,
    /// Manifest to write; IDX files are placed next to it
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pixel storage: f32 (lossless) or u8
    #[arg(long)]
    encoding: Option<String>,
}

pub fn synth(mut a: SynthArgs) -> Result<String> {
    let f: SynthArgs = file_config(a.common.config.as_deref(), "synth")?;
    overlay!(a, f; n, seed, foreground, background, jitter, out, encoding);
    let n = need("synth", a.n, "n")?;
    let out = need("synth", a.out.clone(), "out")?;
    let d = DigitStyle::default();
    let style = DigitStyle {
        foreground: a.foreground.unwrap_or(d.foreground),
        background: a.background.unwrap_or(d.background),
        jitter: a.jitter.unwrap_or(d.jitter),
        ..d
    };
    let ds = synth_digits(n, &style, a.seed.unwrap_or(0))?;
    save_manifest(&ds, &out, encoding(a.encoding.as_deref())?)?;
    let mut r = toml::Table::new();
    r.insert("samples".into(), (ds.len() as i64).into());
    r.insert("manifest".into(), out.display().to_string().into());
    r.insert("checksum".into(), ds.checksum().into());
    emit(a.common.format, "synth", r, &a)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Labeled source manifest
    #[arg(long)]
    train: Option<PathBuf>,
    /// Optional labeled manifest to report accuracy on
    #[arg(long)]
    test: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Shuffling seed
    #[arg(long)]
    seed: Option<u64>,
    /// Weight initialization seed
    #[arg(long)]
    init_seed: Option<u64>,
}

pub fn pretrain(mut a: PretrainArgs) -> Result<String> {
    let f: PretrainArgs = file_config(a.common.config.as_deref(), "pretrain")?;
    overlay!(a, f; train, test, out, epochs, batch_size, lr, seed, init_seed);
    let train = read_dataset(&need("pretrain", a.train.clone(), "train")?)?;
    let out = need("pretrain", a.out.clone(), "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        seed: a.seed.unwrap_or(d.seed),
    };
    let mut spec = ModelSpec::digits();
    spec.input_shape = train.image_shape();
    spec.num_classes = train.num_classes;
    let (model, log) = train_model(Model::build(spec, a.init_seed.unwrap_or(0))?, &train, &cfg)?;
    save_model(&model, &out)?;
    let mut r = toml::Table::new();
    r.insert("checkpoint".into(), out.display().to_string().into());
    r.insert("params_checksum".into(), model.params_checksum().into());
    if let Some(&l) = log.epoch_losses.last() {
        r.insert("final_loss".into(), (l as f64).into());
    }
    r.insert("train_accuracy".into(), evaluate_accuracy(&model, &train, None)?.into());
    if let Some(t) = &a.test {
        r.insert("test_accuracy".into(), evaluate_accuracy(&model, &read_dataset(t)?, None)?.into());
    }
    emit(a.common.format, "pretrain", r, &a)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Frozen checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    /// Target manifest used for optimization
    #[arg(long)]
    target: Option<PathBuf>,
    /// Held-out labeled target manifest for evaluation (defaults to --target)
    #[arg(long)]
    test: Option<PathBuf>,
    /// Fraction of --target used, stratified
    #[arg(long)]
    ratio: Option<f64>,
    /// Meta-input file to write
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Total optimizer steps; overrides --epochs
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Clamp x + W to [0, 1]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    clamp: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

impl AdaptArgs {
    fn overlay_file(&mut self, section: &str) -> Result<()> {
        let f: AdaptArgs = file_config(self.common.config.as_deref(), section)?;
        let a = self;
        overlay!(a, f; model, target, test, ratio, out, lr, epochs, steps, batch_size, clamp, seed);
        Ok(())
    }

    fn adapt_config(&self, alpha: Option<f64>) -> AdaptConfig {
        let d = AdaptConfig::default();
        AdaptConfig {
            lr: self.lr.unwrap_or(d.lr),
            epochs: self.epochs.unwrap_or(d.epochs),
            steps: self.steps.or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            alpha: alpha.unwrap_or(d.alpha),
            clamp_transformed: self.clamp.unwrap_or(d.clamp_transformed),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    /// Model, subsampled adaptation set, evaluation set and ratio.
    fn inputs(&self, op: &str) -> Result<(Model, Dataset, Option<Dataset>, f64)> {
        let model = read_model(&need(op, self.model.clone(), "model")?)?;
        let target = read_dataset(&need(op, self.target.clone(), "target")?)?;
        let ratio = self.ratio.unwrap_or(1.0);
        let subset = subsample(&target, ratio, self.seed.unwrap_or(0))?;
        let eval = match &self.test {
            Some(t) => Some(read_dataset(t)?),
            None => target.labels.is_some().then_some(target),
        };
        Ok((model, subset, eval, ratio))
    }
}

fn accuracy_rows(r: &mut toml::Table, model: &Model, eval: Option<&Dataset>, adapted: impl FnOnce(&Dataset) -> Result<f64>) -> Result<()> {
    if let Some(eval) = eval {
        r.insert("eval_samples".into(), (eval.len() as i64).into());
        r.insert("baseline_accuracy".into(), evaluate_accuracy(model, eval, None)?.into());
        r.insert("adapted_accuracy".into(), adapted(eval)?.into());
    }
    Ok(())
}

pub fn adapt(mut a: AdaptArgs) -> Result<String> {
    a.overlay_file("adapt")?;
    let out = need("adapt", a.out.clone(), "out")?;
    let (model, subset, eval, ratio) = a.inputs("adapt")?;
    let (mut w, log) = optimize_meta_input(&model, &subset, &a.adapt_config(None))?;
    w.trained_on.ratio = Some(ratio);
    save_meta_input(&w, &out)?;
    let mut r = toml::Table::new();
    r.insert("meta_input".into(), out.display().to_string().into());
    r.insert("adapt_samples".into(), (subset.len() as i64).into());
    r.insert("steps".into(), (w.steps as i64).into());
    if let Some(&l) = log.epoch_losses.last() {
        r.insert("final_loss".into(), (l as f64).into());
    }
    accuracy_rows(&mut r, &model, eval.as_ref(), |e| evaluate_accuracy(&model, e, Some(&w)))?;
    emit(a.common.format, "adapt", r, &a)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsupArgs {
    #[command(flatten)]
    #[serde(flatten)]
    base: AdaptArgs,
    /// Pseudo-label confidence threshold, strictly inside (0, 1)
    #[arg(long)]
    alpha: Option<f64>,
}

pub fn adapt_unsup(mut a: UnsupArgs) -> Result<String> {
    a.base.overlay_file("adapt-unsup")?;
    if a.alpha.is_none() {
        let f: UnsupArgs = file_config(a.base.common.config.as_deref(), "adapt-unsup")?;
        a.alpha = f.alpha;
    }
    let out = need("adapt-unsup", a.base.out.clone(), "out")?;
    let (model, mut subset, eval, ratio) = a.base.inputs("adapt-unsup")?;
    subset.labels = None;
    let (mut w, _) = optimize_meta_input_unsupervised(&model, &subset, &a.base.adapt_config(a.alpha))?;
    w.trained_on.ratio = Some(ratio);
    save_meta_input(&w, &out)?;
    let mut r = toml::Table::new();
    r.insert("meta_input".into(), out.display().to_string().into());
    r.insert("unlabeled_samples".into(), (subset.len() as i64).into());
    r.insert("selected_fraction".into(), w.trained_on.selected_fraction.unwrap_or(0.0).into());
    accuracy_rows(&mut r, &model, eval.as_ref(), |e| evaluate_accuracy(&model, e, Some(&w)))?;
    emit(a.base.common.format, "adapt-unsup", r, &a)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnAdaptArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint with adapted statistics to write
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bn_adapt(mut a: BnAdaptArgs) -> Result<String> {
    let f: BnAdaptArgs = file_config(a.common.config.as_deref(), "bn-adapt")?;
    overlay!(a, f; model, target, test, ratio, seed, out);
    let out = need("bn-adapt", a.out.clone(), "out")?;
    let model = read_model(&need("bn-adapt", a.model.clone(), "model")?)?;
    let target = read_dataset(&need("bn-adapt", a.target.clone(), "target")?)?;
    let subset = subsample(&target, a.ratio.unwrap_or(1.0), a.seed.unwrap_or(0))?;
    let adapted = adapt_bn(&model, &subset)?;
    save_model(&adapted, &out)?;
    let eval = match &a.test {
        Some(t) => Some(read_dataset(t)?),
        None => target.labels.is_some().then_some(target),
    };
    let mut r = toml::Table::new();
    r.insert("checkpoint".into(), out.display().to_string().into());
    r.insert("adapt_samples".into(), (subset.len() as i64).into());
    r.insert("params_unchanged".into(), (adapted.params_checksum() == model.params_checksum()).into());
    accuracy_rows(&mut r, &model, eval.as_ref(), |e| evaluate_accuracy(&adapted, e, None))?;
    emit(a.common.format, "bn-adapt", r, &a)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Manifest to evaluate
    #[arg(long)]
    data: Option<PathBuf>,
    /// Meta input added to every sample
    #[arg(long)]
    meta_input: Option<PathBuf>,
    /// Uncorrupted counterpart of --data, for PSNR
    #[arg(long)]
    clean: Option<PathBuf>,
}

pub fn eval(mut a: EvalArgs) -> Result<String> {
    let f: EvalArgs = file_config(a.common.config.as_deref(), "eval")?;
    overlay!(a, f; model, data, meta_input, clean);
    let data = read_dataset(&need("eval", a.data.clone(), "data")?)?;
    if a.model.is_none() && a.clean.is_none() {
        return Err(usage("eval: nothing to do; give --model and/or --clean"));
    }
    let mut r = toml::Table::new();
    r.insert("samples".into(), (data.len() as i64).into());
    if let Some(m) = &a.model {
        let model = read_model(m)?;
        let w = a.meta_input.as_ref().map(load_meta_input).transpose()?;
        r.insert("accuracy".into(), evaluate_accuracy(&model, &data, w.as_ref())?.into());
    }
    if let Some(c) = &a.clean {
        let report = measure_psnr(&read_dataset(c)?, &data)?;
        r.insert("mean_psnr_db".into(), report.mean_db.into());
    }
    emit(a.common.format, "eval", r, &a)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// gn, gb, sp, sn, comprehensive or shift
    #[arg(long)]
    kind: Option<String>,
    /// Target mean PSNR (dB) for gn and comprehensive
    #[arg(long)]
    psnr: Option<f64>,
    /// Blur standard deviation in pixels
    #[arg(long)]
    sigma: Option<f64>,
    /// Salt-and-pepper flip probability
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Speckle noise variance
    #[arg(long)]
    variance: Option<f64>,
    /// Brightness offset for kind shift
    #[arg(long, allow_hyphen_values = true)]
    offset: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input manifest
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    /// Output manifest
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    encoding: Option<String>,
}

pub fn corrupt(mut a: CorruptArgs) -> Result<String> {
    let f: CorruptArgs = file_config(a.common.config.as_deref(), "corrupt")?;
    overlay!(a, f; kind, psnr, sigma, flip_prob, variance, offset, seed, input, out, encoding);
    let input = read_dataset(&need("corrupt", a.input.clone(), "in")?)?;
    let out = need("corrupt", a.out.clone(), "out")?;
    let kind = need("corrupt", a.kind.clone(), "kind")?;
    let need_f = |v: Option<f64>, flag: &str| need("corrupt", v, flag);
    let corruption = match kind.as_str() {
        "gn" | "gaussian_noise" => Some(Corruption::GaussianNoise {
            target_psnr_db: need_f(a.psnr, "psnr")?,
        }),
        "gb" | "gaussian_blur" => Some(Corruption::GaussianBlur {
            sigma: a.sigma.unwrap_or(1.0),
        }),
        "sp" | "salt_pepper" => Some(Corruption::SaltPepper {
            flip_prob: a.flip_prob.unwrap_or(0.05),
        }),
        "sn" | "speckle" => Some(Corruption::Speckle {
            variance: a.variance.unwrap_or(0.05),
        }),
        "comprehensive" => Some(Corruption::Comprehensive {
            target_psnr_db: need_f(a.psnr, "psnr")?,
            sigma: a.sigma.unwrap_or(1.0),
            flip_prob: a.flip_prob.unwrap_or(0.05),
            variance: a.variance.unwrap_or(0.05),
        }),
        "shift" => None,
        other => {
            return Err(usage(format!(
                "corrupt: unknown --kind `{other}` (expected gn, gb, sp, sn, comprehensive or shift)"
            )))
        }
    };
    let result = match corruption {
        Some(c) => {
            let spec = CorruptionSpec {
                corruption: c,
                seed: a.seed.unwrap_or(0),
            };
            apply_corruption(&input, &spec)?.0
        }
        None => synth_shift(
            &input,
            &Shift::Brightness {
                offset: need("corrupt", a.offset, "offset")?,
            },
        )?,
    };
    let report = measure_psnr(&input, &result)?;
    save_manifest(&result, &out, encoding(a.encoding.as_deref())?)?;
    let mut r = toml::Table::new();
    r.insert("manifest".into(), out.display().to_string().into());
    r.insert("samples".into(), (result.len() as i64).into());
    r.insert("mean_psnr_db".into(), report.mean_db.into());
    emit(a.common.format, "corrupt", r, &a)
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's name
    #[arg(long)]
    name: Option<String>,
    /// Write the structured report here
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

fn report_format(f: Option<OutputFormat>) -> ReportFormat {
    match f.unwrap_or_default() {
        OutputFormat::TableText => ReportFormat::TableText,
        OutputFormat::Structured => ReportFormat::Structured,
    }
}

pub fn run(a: RunArgs) -> Result<String> {
    let text = fs::read_to_string(&a.config).map_err(|e| usage(format!("run: cannot read config {}: {e}", a.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.name {
        cfg.name = n;
    }
    let report = run_experiment(&cfg)?;
    if let Some(out) = &a.out {
        let doc = render_report(&report, ReportFormat::Structured)?;
        fs::write(out, doc).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    for c in report.failures() {
        log::warn!("cell {} {:?} {} failed: {}", c.corruption, c.ratio, c.method.name(), c.failure.as_deref().unwrap_or(""));
    }
    render_report(&report, report_format(a.format))
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Structured report written by `run --out`
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

pub fn report(a: ReportArgs) -> Result<String> {
    let text = fs::read_to_string(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    render_report(&parse_report(&text)?, report_format(a.format))
}
