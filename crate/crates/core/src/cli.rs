//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on usage errors, 2 on runtime or validation failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{metric_value, MetricKind, MetricSpec};
use crate::error::{Error, Result};
use crate::probe::{extract_features, knn_retrieve, probe_train_eval, ProbeConfig};
use crate::suite::loss_suite;
use crate::trainer::{checkpoint_load, train, train_from, DatasetSpec, TrainConfig};
use crate::views::MultiViewDataset;

#[derive(Parser, Debug)]
#[command(
    name = "mvalign",
    version,
    about = "Multi-view alignment and contrastive training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed, overriding the config
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct MetricFlags {
    /// Discrepancy kind
    #[arg(long, value_parser = ["kl", "wd", "swd", "gswd"])]
    pub kind: Option<String>,
    /// Wasserstein order
    #[arg(long, value_parser = ["1", "2"])]
    pub p: Option<String>,
    /// Slice count
    #[arg(long)]
    pub slices: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a dataset as MVDS (synthetic spec or CIFAR batch file)
    GenData {
        #[command(flatten)]
        common: Common,
        /// Sample count for synthetic data
        #[arg(long)]
        n: Option<usize>,
        /// CIFAR-10 binary batch to split into RGB/L/ab views
        #[arg(long)]
        cifar: Option<PathBuf>,
    },
    /// Train from a JSON config
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        metric: MetricFlags,
        #[arg(long)]
        epochs: Option<u64>,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Probe a checkpoint's frozen features
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// MVDS dataset; defaults to the checkpoint's dataset spec
        dataset: Option<PathBuf>,
        /// Also write the K nearest neighbours of the first queries
        #[arg(long)]
        knn: Option<usize>,
        #[arg(long, default_value_t = 10)]
        queries: usize,
    },
    /// Discrepancy between two single-view MVDS files
    Metric {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        metric: MetricFlags,
        a: PathBuf,
        b: PathBuf,
    },
    /// Finite-difference check of the losses
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Probe accuracy over a grid of (alpha, beta, gamma)
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Full cartesian grid instead of one-at-a-time
        #[arg(long)]
        full: bool,
        /// Comma-separated grid values
        #[arg(long, value_delimiter = ',', default_values_t = [1e-6, 1e-4, 1e-2, 1.0, 1e2])]
        values: Vec<f64>,
    },
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn apply_metric_flags(spec: &mut MetricSpec, flags: &MetricFlags) -> Result<()> {
    if let Some(k) = &flags.kind {
        spec.kind = k.parse::<MetricKind>()?;
    }
    if let Some(p) = &flags.p {
        spec.p = p.parse().map_err(|_| Error::Config(format!("bad p {p}")))?;
    }
    if let Some(l) = flags.slices {
        spec.slices = l;
    }
    Ok(())
}

fn train_config(common: &Common, flags: &MetricFlags, epochs: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let mut spec = cfg.metric_spec();
    apply_metric_flags(&mut spec, flags)?;
    cfg.metric = spec.kind;
    cfg.p = spec.p;
    cfg.slices = spec.slices;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_single_view(path: &Path) -> Result<crate::autodiff::Tensor> {
    let ds = MultiViewDataset::load_mvds(path)?;
    if ds.num_views() != 1 {
        return Err(Error::invalid(format!(
            "{} holds {} views, expected 1",
            path.display(),
            ds.num_views()
        )));
    }
    Ok(ds.view_tensor(0))
}

#[derive(Serialize)]
struct SweepRow {
    cell: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    accuracy: f64,
    macro_f1: f64,
}

/// Grid cells: one-at-a-time variation around `base`, or the full product.
pub fn sweep_cells(base: &TrainConfig, values: &[f64], full: bool) -> Vec<(f64, f64, f64)> {
    let mut cells = Vec::new();
    if full {
        for &a in values {
            for &b in values {
                for &g in values {
                    cells.push((a, b, g));
                }
            }
        }
    } else {
        cells.extend(values.iter().map(|&a| (a, base.beta, base.gamma)));
        cells.extend(values.iter().map(|&b| (base.alpha, b, base.gamma)));
        cells.extend(values.iter().map(|&g| (base.alpha, base.beta, g)));
    }
    cells
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, n, cifar } => {
            let out = out_dir(&common)?;
            let mut spec: DatasetSpec = read_json(common.config.as_deref())?;
            if let Some(p) = cifar {
                spec.source = crate::trainer::DataSource::Cifar;
                spec.path = Some(p);
            }
            if let Some(n) = n {
                spec.n = n;
            }
            if let Some(s) = common.seed {
                spec.synth.seed = s;
            }
            let ds = spec.load()?;
            write_json(&out.join("config.json"), &spec)?;
            ds.save_mvds(&out.join("data.mvds"))?;
            println!(
                "{} samples, {} views -> {}",
                ds.len(),
                ds.num_views(),
                out.join("data.mvds").display()
            );
        }
        Command::Train {
            common,
            metric,
            epochs,
            resume,
        } => {
            let out = out_dir(&common)?;
            let outcome = match resume {
                Some(ckpt) => {
                    let mut state = checkpoint_load(&ckpt)?;
                    if let Some(e) = epochs {
                        state.config.epochs = e;
                    }
                    write_json(&out.join("config.json"), &state.config)?;
                    let data = state.config.dataset.load()?;
                    train_from(state, &data, &out)?
                }
                None => {
                    let cfg = train_config(&common, &metric, epochs)?;
                    write_json(&out.join("config.json"), &cfg)?;
                    train(cfg, &out)?
                }
            };
            if let Some(last) = outcome.rows.last() {
                println!(
                    "step {} loss_total {:e} loss_loco {:e} loss_gloco {:e}",
                    last.step, last.loss_total, last.loss_loco, last.loss_gloco
                );
            }
            println!(
                "{} checkpoints in {}",
                outcome.checkpoints.len(),
                out.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            knn,
            queries,
        } => {
            let out = out_dir(&common)?;
            let state = checkpoint_load(&checkpoint)?;
            let data = match dataset {
                Some(p) => MultiViewDataset::load_mvds(&p)?,
                None => state.config.dataset.load()?,
            };
            let mut probe: ProbeConfig = read_json(common.config.as_deref())?;
            if let Some(s) = common.seed {
                probe.seed = s;
            }
            let labels = data
                .labels()
                .ok_or_else(|| Error::invalid("dataset has no labels"))?;
            let feats = extract_features(&state.encoders, &data)?;
            let report = probe_train_eval(&feats, labels, &probe)?;
            write_json(&out.join("probe.json"), &report)?;
            if let Some(k) = knn {
                let q: Vec<usize> = (0..queries.min(data.len())).collect();
                let nn = knn_retrieve(&feats, &q, k)?;
                let path = out.join("knn.csv");
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "query,neighbors").map_err(|e| Error::io(&path, e))?;
                for (qi, row) in q.iter().zip(&nn) {
                    let ids: Vec<String> = row.iter().map(usize::to_string).collect();
                    writeln!(f, "{qi},{}", ids.join(" ")).map_err(|e| Error::io(&path, e))?;
                }
            }
            println!(
                "accuracy {:.4} macro_f1 {:.4}",
                report.accuracy, report.macro_f1
            );
        }
        Command::Metric {
            common,
            metric,
            a,
            b,
        } => {
            let mut spec: MetricSpec = read_json(common.config.as_deref())?;
            apply_metric_flags(&mut spec, &metric)?;
            let pa = load_single_view(&a)?;
            let pb = load_single_view(&b)?;
            let v = metric_value(&pa, &pb, &spec, common.seed.unwrap_or(0))?;
            if let Some(out) = &common.out {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                write_json(&out.join("metric.json"), &spec)?;
            }
            println!("{v}");
        }
        Command::GradCheck { common } => {
            let entries = loss_suite(common.seed.unwrap_or(0))?;
            let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
            for e in &entries {
                println!("{:<36} {:.3e}", e.name, e.max_rel_err);
            }
            println!("max relative error {worst:.3e}");
            if worst.is_nan() || worst >= 1e-4 {
                return Err(Error::invalid(format!("gradient check failed: {worst:e}")));
            }
        }
        Command::Sweep {
            common,
            full,
            values,
        } => {
            let out = out_dir(&common)?;
            let mut base: TrainConfig = read_json(common.config.as_deref())?;
            if let Some(s) = common.seed {
                base.seed = s;
            }
            write_json(&out.join("config.json"), &base)?;
            let data = base.dataset.load()?;
            let labels = data
                .labels()
                .ok_or_else(|| Error::invalid("dataset has no labels"))?
                .to_vec();
            let cells = sweep_cells(&base, &values, full);
            let rows: Vec<Result<SweepRow>> = cells
                .par_iter()
                .enumerate()
                .map(|(i, &(alpha, beta, gamma))| {
                    let cfg = TrainConfig {
                        alpha,
                        beta,
                        gamma,
                        ..base.clone()
                    };
                    let dir = out.join(format!("cell_{i:03}"));
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    write_json(&dir.join("config.json"), &cfg)?;
                    let state = crate::trainer::TrainState::for_dataset(cfg, &data)?;
                    let outcome = train_from(state, &data, &dir)?;
                    let feats = extract_features(&outcome.state.encoders, &data)?;
                    let report = probe_train_eval(
                        &feats,
                        &labels,
                        &ProbeConfig {
                            seed: base.seed,
                            ..ProbeConfig::default()
                        },
                    )?;
                    Ok(SweepRow {
                        cell: i,
                        alpha,
                        beta,
                        gamma,
                        accuracy: report.accuracy,
                        macro_f1: report.macro_f1,
                    })
                })
                .collect();
            let path = out.join("sweep.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "cell,alpha,beta,gamma,accuracy,macro_f1")
                .map_err(|e| Error::io(&path, e))?;
            for r in rows {
                let r = r?;
                writeln!(
                    f,
                    "{},{:e},{:e},{:e},{},{}",
                    r.cell, r.alpha, r.beta, r.gamma, r.accuracy, r.macro_f1
                )
                .map_err(|e| Error::io(&path, e))?;
            }
            println!("{} cells -> {}", cells.len(), path.display());
        }
    }
    Ok(())
}

/// Parse `argv` (including the program name) and run one command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
