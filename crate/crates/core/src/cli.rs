//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{FdFault, RunConfig};
use crate::data::{
    apply_linear_map, generate_synthetic, linear_distortion, load_dataset, load_vocabulary,
    nearest_words, oversample_balance, save_dataset, EmbeddingDataset,
};
use crate::error::{Error, Result};
use crate::harness::{compare_all, compare_all_parallel, default_registry, HarnessSettings};
use crate::inference::evaluate;
use crate::model::{Model, ParamGroup, Stage};
use crate::training::{fd_check, random_fd_instance, run_stage1, run_stage2};

pub const TRAIN_FILE: &str = "train.embed";
pub const TEST_FILE: &str = "test.embed";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "metd",
    version,
    about = "Multiple expression text descriptors over embedding spaces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test benchmark.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        out_dir: PathBuf,
    },
    /// Run both training stages and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file, or a directory holding `train.embed`.
        data: PathBuf,
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        checkpoint: PathBuf,
        /// Dataset file, or a directory holding `test.embed`.
        data: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest vocabulary words for every descriptor token.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        checkpoint: PathBuf,
        vocab: PathBuf,
        #[arg(long, default_value_t = 3)]
        top_n: usize,
    },
    /// Compare the configured strategies on one split.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding `train.embed` and `test.embed`.
        data_dir: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Fdcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Outcome of a command that completed without error.
enum Status {
    Ok,
    CheckFailed,
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::CheckFailed) => EXIT_CHECK_FAILED,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn resolve(path: &Path, default_file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_file)
    } else {
        path.to_path_buf()
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<Status> {
    match command {
        Command::Synth { config, out_dir } => {
            cmd_synth(&load_config(config.as_deref())?, &out_dir, out)
        }
        Command::Train {
            config,
            data,
            checkpoint,
        } => cmd_train(&load_config(config.as_deref())?, &data, &checkpoint, out),
        Command::Eval {
            config,
            checkpoint,
            data,
            out: report_path,
        } => {
            // the checkpoint carries every model knob; the config is only validated
            load_config(config.as_deref())?;
            cmd_eval(&checkpoint, &data, report_path.as_deref(), out)
        }
        Command::Decode {
            config,
            checkpoint,
            vocab,
            top_n,
        } => {
            load_config(config.as_deref())?;
            cmd_decode(&checkpoint, &vocab, top_n, out)
        }
        Command::Compare { config, data_dir } => {
            cmd_compare(&load_config(config.as_deref())?, &data_dir, out)
        }
        Command::Fdcheck { config } => cmd_fdcheck(&load_config(config.as_deref())?, out),
    }
}

pub fn synthesize(config: &RunConfig) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let bench = generate_synthetic(&config.synth())?;
    if config.distortion > 0.0 {
        let map = linear_distortion(config.feature_dim, config.distortion, config.seed);
        Ok((
            apply_linear_map(&bench.train, &map)?,
            apply_linear_map(&bench.test, &map)?,
        ))
    } else {
        Ok((bench.train, bench.test))
    }
}

fn cmd_synth(config: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Result<Status> {
    let (train, test) = synthesize(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = String::new();
    for (name, ds) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let path = out_dir.join(name);
        save_dataset(ds, &path)?;
        let counts = ds
            .class_counts()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            summary,
            "{}\tdim={}\tclasses={}\trows={}\titems={}\tper_class={}",
            path.display(),
            ds.feature_dim,
            ds.n_classes,
            ds.len(),
            ds.items().len(),
            counts
        );
    }
    emit(out, &summary)?;
    Ok(Status::Ok)
}

/// Train a fresh model on `train` following `config`; returns the model and
/// the combined metrics log.
pub fn train_model(config: &RunConfig, train: &EmbeddingDataset) -> Result<(Model, String)> {
    if train.feature_dim != config.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: config.feature_dim,
            actual: train.feature_dim,
        });
    }
    if train.n_classes != config.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, config expects {}",
            train.n_classes, config.classes
        )));
    }
    let balanced;
    let train = if config.oversample {
        balanced = oversample_balance(train, config.seed)?;
        &balanced
    } else {
        train
    };
    let mut model = Model::new(config.model())?;
    let t1 = run_stage1(&mut model, train, &config.stage(Stage::Descriptors))?;
    let t2 = run_stage2(&mut model, train, &config.stage(Stage::Adapter))?;
    let mut log = String::new();
    for (name, trace) in [("stage1", &t1), ("stage2", &t2)] {
        let _ = writeln!(log, "# {name}");
        log.push_str(&trace.to_log());
    }
    Ok((model, log))
}

fn cmd_train(
    config: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &mut dyn Write,
) -> Result<Status> {
    let train = load_dataset(&resolve(data, TRAIN_FILE))?;
    let (model, log) = train_model(config, &train)?;
    save_checkpoint(&model, checkpoint)?;
    let log_path = config.metrics_log.clone().unwrap_or_else(|| {
        let mut p = checkpoint.as_os_str().to_owned();
        p.push(".metrics.tsv");
        PathBuf::from(p)
    });
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    emit(
        out,
        &format!(
            "checkpoint\t{}\nmetrics\t{}\n{log}",
            checkpoint.display(),
            log_path.display()
        ),
    )?;
    Ok(Status::Ok)
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    report_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Status> {
    let model = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(&resolve(data, TEST_FILE))?;
    let report = evaluate(&dataset, &model)?.to_text();
    if let Some(p) = report_path {
        fs::write(p, &report).map_err(|e| Error::io(p, e))?;
    }
    emit(out, &report)?;
    Ok(Status::Ok)
}

fn cmd_decode(
    checkpoint: &Path,
    vocab: &Path,
    top_n: usize,
    out: &mut dyn Write,
) -> Result<Status> {
    let model = load_checkpoint(checkpoint)?;
    let vocab = load_vocabulary(vocab)?;
    let bank = &model.bank;
    let mut text = String::from("class\tsubclass\ttoken\tnearest\n");
    for i in 0..bank.n_classes() {
        for k in 0..bank.n_subclasses() {
            for m in 0..bank.n_tokens() {
                let words = nearest_words(&vocab, bank.token(i, k, m), top_n)?;
                let ranked = words
                    .iter()
                    .map(|(w, d)| format!("{w}:{d:.6}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                let _ = writeln!(text, "{i}\t{k}\t{m}\t{ranked}");
            }
        }
    }
    emit(out, &text)?;
    Ok(Status::Ok)
}

fn cmd_compare(config: &RunConfig, data_dir: &Path, out: &mut dyn Write) -> Result<Status> {
    let train = load_dataset(&data_dir.join(TRAIN_FILE))?;
    let test = load_dataset(&data_dir.join(TEST_FILE))?;
    let settings = HarnessSettings::from_config(config);
    let registry = default_registry();
    let report = if config.parallel_strategies {
        compare_all_parallel(&registry, &config.strategies, &train, &test, &settings)?
    } else {
        compare_all(&registry, &config.strategies, &train, &test, &settings)?
    };
    emit(
        out,
        &format!("{}\n{}", report.to_table(), report.to_key_values()),
    )?;
    Ok(Status::Ok)
}

fn fault_for(fault: FdFault, stage: Stage) -> Option<(ParamGroup, f64)> {
    match (fault, stage) {
        (FdFault::Tokens, Stage::Descriptors) => Some((ParamGroup::DescriptorTokens, 1.01)),
        (FdFault::Adapter, Stage::Adapter) => Some((ParamGroup::AdapterWeight, 1.01)),
        _ => None,
    }
}

/// Worst relative error per (stage, group) over all random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSummary {
    pub rows: Vec<(Stage, ParamGroup, usize, f64)>,
}

impl FdSummary {
    pub fn worst(&self) -> Option<&(Stage, ParamGroup, usize, f64)> {
        self.rows.iter().max_by(|a, b| a.3.total_cmp(&b.3))
    }
}

pub fn fd_summary(config: &RunConfig) -> Result<FdSummary> {
    let mut rows: Vec<(Stage, ParamGroup, usize, f64)> = Vec::new();
    for (offset, stage) in [(0u64, Stage::Descriptors), (1 << 32, Stage::Adapter)] {
        for index in 0..config.fd_instances as u64 {
            let (model, sample) = random_fd_instance(config.seed, offset + index)?;
            let report = fd_check(
                &model,
                &sample,
                stage,
                config.fd_h,
                fault_for(config.fd_fault, stage),
            )?;
            for g in report.groups {
                let err = if g.max_rel_error.is_nan() {
                    f64::INFINITY
                } else {
                    g.max_rel_error
                };
                match rows.iter_mut().find(|r| r.0 == stage && r.1 == g.group) {
                    Some(r) => {
                        r.2 += g.n_params;
                        r.3 = r.3.max(err);
                    }
                    None => rows.push((stage, g.group, g.n_params, err)),
                }
            }
        }
    }
    Ok(FdSummary { rows })
}

fn cmd_fdcheck(config: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let summary = fd_summary(config)?;
    let mut text = String::from("stage\tgroup\tparams\tmax_rel_error\tstatus\n");
    for (stage, group, n, err) in &summary.rows {
        let status = if *err < config.fd_tolerance {
            "ok"
        } else {
            "FAIL"
        };
        let stage_no = match stage {
            Stage::Descriptors => 1,
            Stage::Adapter => 2,
        };
        let _ = writeln!(
            text,
            "{stage_no}\t{}\t{n}\t{err:.3e}\t{status}",
            group.name()
        );
    }
    let status = match summary.worst() {
        Some((_, group, _, err)) if *err >= config.fd_tolerance => {
            let _ = writeln!(
                text,
                "gradient check failed: worst group {} with relative error {err:.3e} (tolerance {:.1e})",
                group.name(),
                config.fd_tolerance
            );
            Status::CheckFailed
        }
        _ => {
            let _ = writeln!(
                text,
                "gradient check passed (tolerance {:.1e})",
                config.fd_tolerance
            );
            Status::Ok
        }
    };
    emit(out, &text)?;
    Ok(status)
}
