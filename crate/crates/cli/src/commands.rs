use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmlq::checkpoint;
use mmlq::data::{gen_synthetic, write_dataset, Dataset, Manifest, ManifestEntry, SynthConfig};
use mmlq::gradcheck::{gradcheck, GradcheckConfig};
use mmlq::metrics::{mos_from_dos, MetricsReport, CSV_HEADER};
use mmlq::model::{Modality, Mmlq, ModelConfig, ShareMode};
use mmlq::train::{curve_csv, evaluate_model, train_log_csv, Trainer};
use mmlq::{Error, OpKind};

use crate::config::{RunConfig, OUTPUT_DIR_ENV};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "mmlq", version, about = "Multi-modal learnable queries for aesthetics assessment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test feature files and a manifest.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoint, logs and metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Train and evaluate one configuration per value of an axis.
    Ablate(AblateArgs),
    /// Compare analytic gradients with 64-bit central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key=value` config file, applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Override one config key; repeatable and applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Takes precedence over the environment variable and the config file.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Record measured wall time in metrics CSVs (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Model preset whose feature dims the files should match.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Override a model key (e.g. `n_w=9`) before taking dims.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub signal_v: f64,
    #[arg(long, default_value_t = 0.8)]
    pub signal_t: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 1.2)]
    pub dos_sigma: f64,
    /// Store floats as f64 instead of f32.
    #[arg(long)]
    pub wide: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Where metrics.csv is appended; defaults to the checkpoint's directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub run_id: String,
    #[arg(long)]
    pub timing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    MmibDesign,
    Modality,
    NBlocks,
    NQueries,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::MmibDesign => "mmib-design",
            Axis::Modality => "modality",
            Axis::NBlocks => "n-blocks",
            Axis::NQueries => "n-queries",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values for the n-blocks and n-queries axes.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 12)]
    pub coords: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Scale one op's backward rule, as `op:factor` (checker self-test).
    #[arg(long, hide = true, value_name = "OP:FACTOR")]
    pub inject_fault: Option<String>,
}

pub(crate) fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Ablate(a) => ablate(&a, out),
        Command::Gradcheck(a) => run_gradcheck(&a, out),
    }
}

/// Output dir precedence: flag, then environment, then config/default.
fn output_dir(flag: Option<&Path>, fallback: PathBuf) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback,
    }
}

fn model_config(preset: &str, overrides: &[String]) -> Result<ModelConfig, CliError> {
    let mut cfg = ModelConfig::preset(preset)?;
    for pair in overrides {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
        if !cfg.set(k.trim(), v.trim())? {
            return Err(CliError::Usage(format!("unknown model key {:?}", k.trim())));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_run_config(a: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, path.parent())?;
    }
    for pair in &a.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(id) = &a.run_id {
        cfg.run_id = id.clone();
    }
    cfg.timing |= a.timing;
    cfg.output_dir = output_dir(a.output_dir.as_deref(), cfg.output_dir.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Usage("no manifest: pass --manifest or set manifest= in the config".into()))?;
    let manifest = Manifest::load(path)?;
    let train = manifest.read_split(&cfg.train_split)?;
    let test = manifest.read_split(&cfg.test_split)?;
    train.check_model(&cfg.model)?;
    test.check_model(&cfg.model)?;
    Ok((train, test))
}

fn mos_summary(ds: &Dataset) -> Result<(f64, f64), CliError> {
    let mos = ds.records.iter().map(|r| mos_from_dos(&r.gt_dos)).collect::<Result<Vec<_>, _>>()?;
    let n = mos.len() as f64;
    let mean = mos.iter().sum::<f64>() / n;
    let var = mos.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn gen_synth(a: &GenSynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = model_config(&a.preset, &a.overrides)?;
    let dir = output_dir(a.output_dir.as_deref(), PathBuf::from("data"));
    let base = SynthConfig {
        n_samples: 1,
        n_visual: model.n_p,
        h_v: model.h_v,
        n_w: model.n_w,
        h_t: model.h_t,
        k_bins: model.k_bins,
        signal_v: a.signal_v,
        signal_t: a.signal_t,
        noise_std: a.noise_std,
        dos_sigma: a.dos_sigma,
        seed: a.seed,
    };
    base.validate()?;
    create_dir(&dir)?;
    let mut manifest = Manifest { entries: Vec::new(), base_dir: dir.clone() };
    for (split, (name, n)) in [("train", a.n_train), ("test", a.n_test)].into_iter().enumerate() {
        let mut ds = gen_synthetic(&SynthConfig { n_samples: n, ..base.clone() }, split as u64)?;
        ds.wide = a.wide;
        let file = format!("{name}.feat");
        write_dataset(dir.join(&file), &ds)?;
        let (mean, std) = mos_summary(&ds)?;
        writeln!(out, "{name}: {n} samples -> {}  (MOS mean {mean:.3}, std {std:.3})", dir.join(&file).display())?;
        manifest.entries.push(ManifestEntry { split: name.into(), path: file.into(), count: n as u64 });
    }
    let mpath = dir.join("manifest.txt");
    manifest.save(&mpath)?;
    let d = base.dims();
    writeln!(
        out,
        "dims: visual {}x{}, textual {}x{}, {} bins, {}; manifest {}",
        d.n_visual,
        d.h_v,
        d.n_w,
        d.h_t,
        d.k_bins,
        if a.wide { "f64" } else { "f32" },
        mpath.display()
    )?;
    Ok(())
}

fn train(a: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_run_config(a)?;
    let (train, test) = load_splits(&cfg)?;
    create_dir(&cfg.output_dir)?;
    let start = Instant::now();
    let mut tr = Trainer::new(Mmlq::new(cfg.model.clone())?, cfg.train.clone())?;
    writeln!(
        out,
        "run {}: {} parameters, {} train / {} test samples, {} epochs",
        cfg.run_id,
        tr.model.num_scalars(),
        train.len(),
        test.len(),
        cfg.train.schedule.total_epochs
    )?;
    while tr.epochs.len() < cfg.train.schedule.total_epochs {
        let e = tr.epoch(&train, Some(&test))?;
        let m = e.test.as_ref().expect("test set given");
        writeln!(
            out,
            "epoch {:>2}  lr {:.1e}  train_emd {:.6}  test srcc {:.4} plcc {:.4} acc {:.2}% mse {:.4} emd {:.4}",
            e.epoch, e.lr, e.train_loss, m.srcc, m.plcc, m.acc_percent, m.mse, m.emd
        )?;
    }
    let wall = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let final_report = tr.epochs.last().and_then(|e| e.test.clone());

    let dir = &cfg.output_dir;
    checkpoint::save(dir.join("model.ckpt"), &tr.model, Some(&tr.adam))?;
    write_file(&dir.join("train_log.csv"), train_log_csv(&tr.epochs))?;
    write_file(&dir.join("curve.csv"), curve_csv(&tr.steps))?;
    write_file(&dir.join("config.txt"), cfg.to_kv_string())?;
    let mut metrics = format!("{CSV_HEADER}\n");
    if let Some(m) = &final_report {
        metrics.push_str(&m.csv_row(&cfg.run_id, &cfg.model, wall));
        metrics.push('\n');
    }
    write_file(&dir.join("metrics.csv"), metrics)?;
    writeln!(out, "wrote model.ckpt, train_log.csv, curve.csv, metrics.csv, config.txt to {}", dir.display())?;
    Ok(())
}

/// Append one row, writing the header first for a new or empty file.
fn append_metrics_row(path: &Path, row: &str) -> Result<(), CliError> {
    let existing = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e).into()),
    };
    let mut text = existing;
    if text.is_empty() {
        text = format!("{CSV_HEADER}\n");
    } else if text.lines().next() != Some(CSV_HEADER) {
        return Err(Error::Validation(format!("{} has an unexpected header", path.display())).into());
    } else if !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(row);
    text.push('\n');
    write_file(path, text)
}

fn print_report(out: &mut dyn Write, m: &MetricsReport) -> std::io::Result<()> {
    writeln!(
        out,
        "n {}  srcc {:.6}  plcc {:.6}  acc {:.2}%  mse {:.6}  emd {:.6}",
        m.n_samples, m.srcc, m.plcc, m.acc_percent, m.mse, m.emd
    )
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be at least 1".into()));
    }
    if a.run_id.is_empty() || a.run_id.contains([',', '\n']) {
        return Err(CliError::Usage(format!("--run-id {:?} must be non-empty without commas", a.run_id)));
    }
    let start = Instant::now();
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let data = Manifest::load(&a.manifest)?.read_split(&a.split)?;
    let report = evaluate_model(&model, &data, a.batch_size)?;
    let wall = if a.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let fallback = a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir = output_dir(a.output_dir.as_deref(), fallback);
    create_dir(&dir)?;
    print_report(out, &report)?;
    append_metrics_row(&dir.join("metrics.csv"), &report.csv_row(&a.run_id, model.config(), wall))?;
    Ok(())
}

fn ablation_variants(axis: Axis, values: &[usize], base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>, CliError> {
    if !values.is_empty() && matches!(axis, Axis::MmibDesign | Axis::Modality) {
        return Err(CliError::Usage(format!("--values does not apply to the {} axis", axis.name())));
    }
    let list = |default: &[usize]| if values.is_empty() { default.to_vec() } else { values.to_vec() };
    let v = match axis {
        Axis::MmibDesign => ShareMode::ALL
            .iter()
            .flat_map(|&sa| {
                ShareMode::ALL.iter().map(move |&ff| {
                    (format!("{sa}-{ff}"), ModelConfig { sa_mode: sa, ff_mode: ff, ..base.clone() })
                })
            })
            .collect(),
        Axis::Modality => [Modality::Visual, Modality::Textual, Modality::Both]
            .into_iter()
            .map(|m| (m.as_str().to_string(), ModelConfig { modality: m, ..base.clone() }))
            .collect(),
        Axis::NBlocks => list(&[1, 2, 3, 4])
            .into_iter()
            .map(|n| (n.to_string(), ModelConfig { n_blocks: n, ..base.clone() }))
            .collect(),
        Axis::NQueries => list(&[1, 2, 4, 8])
            .into_iter()
            .map(|n| (n.to_string(), ModelConfig { n_v: n, n_t: n, ..base.clone() }))
            .collect(),
    };
    Ok(v)
}

fn ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_run_config(&a.run)?;
    let variants = ablation_variants(a.axis, &a.values, &cfg.model)?;
    for (_, m) in &variants {
        m.validate()?;
    }
    let (train, test) = load_splits(&cfg)?;
    create_dir(&cfg.output_dir)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for (label, model_cfg) in variants {
        let run_id = format!("{}-{}-{label}", cfg.run_id, a.axis.name());
        let start = Instant::now();
        let mut tr = Trainer::new(Mmlq::new(model_cfg.clone())?, cfg.train.clone())?;
        tr.run(&train, None)?;
        let report = evaluate_model(&tr.model, &test, cfg.train.eval_batch_size)?;
        let wall = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        write!(out, "{run_id}: ")?;
        print_report(out, &report)?;
        writeln!(csv, "{}", report.csv_row(&run_id, &model_cfg, wall)).expect("write to string");
    }
    let path = cfg.output_dir.join(format!("ablate-{}.csv", a.axis.name()));
    write_file(&path, csv)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn parse_fault(s: &str) -> Result<(OpKind, f64), CliError> {
    let bad = || CliError::Usage(format!("--inject-fault expects op:factor, got {s:?}"));
    let (op, factor) = s.split_once(':').ok_or_else(bad)?;
    let op = OpKind::parse(op).ok_or_else(|| CliError::Usage(format!("unknown op {op:?}")))?;
    let factor: f64 = factor.parse().map_err(|_| bad())?;
    Ok((op, factor))
}

fn run_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = model_config(&a.preset, &a.overrides)?;
    if a.coords == 0 || a.batch == 0 {
        return Err(CliError::Usage("--coords and --batch must be at least 1".into()));
    }
    if !(a.tolerance > 0.0) {
        return Err(CliError::Usage(format!("--tolerance must be positive, got {}", a.tolerance)));
    }
    let cfg = GradcheckConfig {
        batch: a.batch,
        coords_per_tensor: a.coords,
        seed: a.seed,
        tolerance: a.tolerance,
        fault: a.inject_fault.as_deref().map(parse_fault).transpose()?,
        ..GradcheckConfig::new(model)
    };
    let report = gradcheck(&cfg)?;
    out.write_all(report.to_text().as_bytes())?;
    let failures = report.failures().len();
    if failures > 0 {
        return Err(CliError::Gradcheck(failures));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn fault_parsing() {
        assert_eq!(parse_fault("gelu:1.5").unwrap(), (OpKind::Gelu, 1.5));
        assert!(parse_fault("gelu").is_err());
        assert!(parse_fault("nope:2").is_err());
        assert!(parse_fault("gelu:x").is_err());
    }

    #[test]
    fn variant_counts() {
        let base = ModelConfig::desk();
        assert_eq!(ablation_variants(Axis::MmibDesign, &[], &base).unwrap().len(), 9);
        assert_eq!(ablation_variants(Axis::Modality, &[], &base).unwrap().len(), 3);
        let q = ablation_variants(Axis::NQueries, &[], &base).unwrap();
        assert_eq!(q.iter().map(|(_, c)| (c.n_v, c.n_t)).collect::<Vec<_>>(), [(1, 1), (2, 2), (4, 4), (8, 8)]);
        let b = ablation_variants(Axis::NBlocks, &[3, 5], &base).unwrap();
        assert_eq!(b.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>(), ["3", "5"]);
        assert!(ablation_variants(Axis::Modality, &[1], &base).is_err());
    }

    #[test]
    fn metrics_append_checks_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        append_metrics_row(&p, "a").unwrap();
        append_metrics_row(&p, "b").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{CSV_HEADER}\na\nb\n"));
        std::fs::write(&p, "other\n").unwrap();
        assert!(matches!(append_metrics_row(&p, "c"), Err(CliError::Core(Error::Validation(_)))));
    }
}
