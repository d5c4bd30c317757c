//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datasets::{check_cifar10, check_mnist, DatasetId, FileReport};
use crate::error::{Error, Result};
use crate::harness::{
    load_data, read_records, run_experiment, run_from_baseline, sweep_rewind, train_to_completion,
    with_sweep_epochs, write_records, ExperimentConfig, Manifest, PruneRoundRecord, DATA_DIR_ENV,
    MANIFEST_FILE, RECORDS_FILE,
};
use crate::metrics::{compression_at_drop, flops_at_drop};
use crate::numerics::par::{self, ExecMode};

#[derive(Debug, Parser)]
#[command(
    name = "structprune",
    version,
    about = "Iterative structured pruning with rewinding"
)]
pub struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check dataset files (magic numbers, record sizes, counts).
    VerifyData {
        #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        dataset: DatasetChoice,
    },
    /// Train the dense baseline only.
    Train(RunArgs),
    /// Baseline training followed by pruning rounds.
    Iterate(RunArgs),
    /// Prune once, then retrain from several rewind epochs.
    SweepRewind {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated rewind epochs (0..=T).
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<u32>,
    },
    /// Compare finished runs.
    Report {
        /// Run directories holding records.csv and manifest.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run the flop ratios are normalized to (defaults to the first).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetChoice {
    Mnist,
    Cifar10,
    All,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Override a config value, e.g. `--set policy=ilp`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    pub out: PathBuf,
    /// Data root (overrides the config).
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.data_dir {
            overrides.push(format!(
                "experiment.data_dir={}",
                toml_string(&d.display().to_string())
            ));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Runs a parsed command; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    if cli.sequential {
        par::set_mode(ExecMode::Sequential);
    }
    match cli.command {
        Command::VerifyData { data_dir, dataset } => verify_data(&data_dir, dataset),
        Command::Train(a) => {
            let cfg = a.config()?;
            let data = load_data(&cfg)?;
            let mut cfg0 = cfg.clone();
            cfg0.stop = crate::harness::StopSection {
                max_rounds: Some(0),
                ..Default::default()
            };
            let res = run_experiment(&cfg0, &data, Some(&a.out))?;
            println!("baseline accuracy {:.2}%", res.records[0].top1_acc);
            Ok(())
        }
        Command::Iterate(a) => {
            let cfg = a.config()?;
            let data = load_data(&cfg)?;
            let res = run_experiment(&cfg, &data, Some(&a.out))?;
            let last = res.records.last().expect("round 0");
            println!(
                "{} rounds ({:?}); last: {:.2}% remaining, {:.2}% accuracy; records in {}",
                res.records.len() - 1,
                res.status,
                last.remaining_pct,
                last.top1_acc,
                a.out.join(RECORDS_FILE).display()
            );
            Ok(())
        }
        Command::SweepRewind { run, epochs } => {
            let cfg = run.config()?;
            let total = cfg.epochs();
            if let Some(&e) = epochs.iter().find(|&&e| e > total) {
                return Err(Error::Config(format!("rewind epoch {e} beyond T = {total}")));
            }
            let data = load_data(&cfg)?;
            let cfg = with_sweep_epochs(&cfg, &epochs);
            let baseline = train_to_completion(&cfg, &data)?;
            let rows = sweep_rewind(&cfg, &data, &baseline, &epochs)?;
            std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
            let path = run.out.join("sweep.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
            for r in &rows {
                w.serialize(r).map_err(|e| Error::format(&path, e.to_string()))?;
                println!(
                    "rewind {:>3}: accuracy {:6.2}%  L2 {:.4}",
                    r.rewind_epoch, r.top1_acc, r.stability
                );
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let mut base = cfg.clone();
            base.stop = crate::harness::StopSection {
                max_rounds: Some(0),
                ..Default::default()
            };
            run_from_baseline(&base, &data, &baseline, Some(&run.out))?;
            Ok(())
        }
        Command::Report { runs, baseline, out } => {
            let text = report(&runs, baseline.as_deref(), out.as_deref())?;
            print!("{text}");
            Ok(())
        }
    }
}

fn print_reports(reports: &[FileReport]) -> bool {
    let mut ok = true;
    for r in reports {
        let status = if r.ok { "ok  " } else { "FAIL" };
        println!("{status} {} {}", r.path.display(), r.detail);
        ok &= r.ok;
    }
    ok
}

/// Checks every file of the selected datasets under `root`.
pub fn verify_data(root: &Path, which: DatasetChoice) -> Result<()> {
    let mut failed = Vec::new();
    if matches!(which, DatasetChoice::Mnist | DatasetChoice::All) {
        let r = check_mnist(&DatasetId::Mnist.resolve_dir(root));
        if !print_reports(&r) {
            failed.extend(r.into_iter().filter(|r| !r.ok));
        }
    }
    if matches!(which, DatasetChoice::Cifar10 | DatasetChoice::All) {
        let r = check_cifar10(&DatasetId::Cifar10.resolve_dir(root));
        if !print_reports(&r) {
            failed.extend(r.into_iter().filter(|r| !r.ok));
        }
    }
    if failed.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = failed
        .iter()
        .map(|r| format!("{} ({})", r.path.display(), r.detail))
        .collect();
    Err(Error::format(
        root,
        format!("{} file(s) failed: {}", failed.len(), list.join("; ")),
    ))
}

/// A finished run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<PruneRoundRecord>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::read(&dir.join(MANIFEST_FILE))?,
            records: read_records(&dir.join(RECORDS_FILE))?,
        })
    }

    pub fn label(&self) -> String {
        let c = &self.manifest.config;
        format!("{}:{}", c.experiment.name, c.pruning.policy.name())
    }
}

/// Run labels, with the directory name appended where `name:policy` alone
/// is ambiguous.
pub fn run_labels(runs: &[LoadedRun]) -> Vec<String> {
    let plain: Vec<String> = runs.iter().map(LoadedRun::label).collect();
    plain
        .iter()
        .zip(runs)
        .map(|(l, r)| {
            if plain.iter().filter(|&o| o == l).count() > 1 {
                let dir = r
                    .dir
                    .file_name()
                    .map_or_else(|| r.dir.display().to_string(), |d| d.to_string_lossy().into());
                format!("{l}@{dir}")
            } else {
                l.clone()
            }
        })
        .collect()
}

pub const REPORT_DROPS: [f64; 4] = [0.0, 1.0, 3.0, 5.0];

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReportRow {
    pub run: String,
    pub policy: String,
    pub drop_pct: f64,
    pub compression: f64,
    pub qualified: bool,
    pub round: Option<usize>,
    pub flops: u64,
    pub flops_speedup: f64,
}

/// Compression at each drop level and flop speedups relative to
/// `baseline` (the first run by default).
pub fn report_rows(runs: &[LoadedRun], baseline: Option<&Path>) -> Result<Vec<ReportRow>> {
    let base = match baseline {
        Some(p) => runs
            .iter()
            .find(|r| r.dir == p)
            .cloned()
            .map_or_else(|| LoadedRun::load(p), Ok)?,
        None => runs
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("no runs given".into()))?,
    };
    let model = base.manifest.config.experiment.model;
    if let Some(r) = runs.iter().find(|r| r.manifest.config.experiment.model != model) {
        return Err(Error::Config(format!(
            "{} is a {:?} run, baseline {} is {:?}",
            r.dir.display(),
            r.manifest.config.experiment.model,
            base.dir.display(),
            model
        )));
    }
    let labels = run_labels(runs);
    let mut rows = Vec::new();
    for (run, label) in runs.iter().zip(&labels) {
        for drop in REPORT_DROPS {
            let acc = run.manifest.baseline_acc;
            let c = compression_at_drop(&run.records, acc, drop)?;
            let base_flops = flops_at_drop(&base.records, base.manifest.baseline_acc, drop)
                .unwrap_or(base.manifest.dense_flops);
            let flops = flops_at_drop(&run.records, acc, drop).unwrap_or(run.manifest.dense_flops);
            rows.push(ReportRow {
                run: label.clone(),
                policy: run.manifest.config.pruning.policy.name().into(),
                drop_pct: drop,
                compression: c.ratio,
                qualified: c.qualified,
                round: c.round,
                flops,
                flops_speedup: base_flops as f64 / flops as f64,
            });
        }
    }
    Ok(rows)
}

/// Text tables (and optionally `report.csv`) for the given run dirs.
pub fn report(dirs: &[PathBuf], baseline: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let runs = dirs
        .iter()
        .map(|d| LoadedRun::load(d))
        .collect::<Result<Vec<_>>>()?;
    let rows = report_rows(&runs, baseline)?;
    let labels = run_labels(&runs);
    let width = labels.iter().map(String::len).max().unwrap_or(0).max(12);
    let mut s = String::new();
    let header = |s: &mut String, title: &str| {
        let _ = writeln!(s, "{title}");
        let _ = write!(s, "{:<10}", "drop");
        for l in &labels {
            let _ = write!(s, " {l:>width$}");
        }
        s.push('\n');
    };
    header(
        &mut s,
        "Largest compression ratio within the accuracy drop (* = no pruned round qualified)",
    );
    for drop in REPORT_DROPS {
        let _ = write!(s, "{:<10}", format!("{drop}%"));
        for l in &labels {
            let r = rows
                .iter()
                .find(|r| &r.run == l && r.drop_pct == drop)
                .expect("row");
            let cell = format!("{:.2}x{}", r.compression, if r.qualified { "" } else { "*" });
            let _ = write!(s, " {cell:>width$}");
        }
        s.push('\n');
    }
    s.push('\n');
    header(&mut s, "Flop speedup normalized to the baseline run");
    for drop in REPORT_DROPS {
        let _ = write!(s, "{:<10}", format!("{drop}%"));
        for l in &labels {
            let r = rows
                .iter()
                .find(|r| &r.run == l && r.drop_pct == drop)
                .expect("row");
            let _ = write!(s, " {:>width$}", format!("{:.2}x", r.flops_speedup));
        }
        s.push('\n');
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| Error::format(&path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(s)
}

/// Writes synthetic records/manifest pairs; used by tests of `report`.
pub fn write_run(dir: &Path, manifest: &Manifest, records: &[PruneRoundRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records(&dir.join(RECORDS_FILE), records)?;
    manifest.write(&dir.join(MANIFEST_FILE))
}
