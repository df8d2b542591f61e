//! Command-line front end: data generation, binning, both training phases,
//! evaluation and the gradient self-check.
//!
//! Datasets on disk are directories holding one file per sample plus a
//! `manifest.csv` with a `file,label` header.

mod config;

pub use config::{Mode, RunConfig, KEYS};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::{bin_events, parse_event_file, read_frame_file, write_event_file, write_frame_file, BinningConfig};
use crate::snn::Backbone;
use crate::tensor::gradcheck::{run_case, spike_surrogate_error, tensor_cases, GradReport};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore};
use crate::training::{evaluate, finetune, pretrain, synthetic_streams, LabeledSet};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Parser)]
#[command(name = "neuromoco", version, about = "Contrastive pretraining for spiking networks on event data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic event recordings and a label manifest.
    Gen {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Generator settings (`gen.*` keys).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Bin every recording of a dataset into frame tensors.
    Bin {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long = "T", short = 'T', default_value_t = 16)]
        steps: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Contrastive pretraining on an (unlabelled) frame dataset.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised training, from a pretraining checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy of a fine-tuned checkpoint on a frame dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var("NMC_THREADS") else { return };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            // Fails only if a pool already exists, e.g. when called twice in-process.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        _ => eprintln!("warning: ignoring NMC_THREADS={v}"),
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            classes,
            per_class,
            seed,
            out_dir,
            config,
        } => cmd_gen(classes, per_class, seed, &out_dir, config.as_deref()),
        Command::Bin { in_dir, steps, out_dir } => cmd_bin(&in_dir, steps, &out_dir),
        Command::Pretrain {
            config,
            data,
            out_dir,
            seed,
        } => cmd_pretrain(&load_config(config.as_deref(), seed)?, &data, &out_dir),
        Command::Finetune {
            config,
            checkpoint,
            train,
            test,
            out_dir,
            seed,
        } => cmd_finetune(&load_config(config.as_deref(), seed)?, checkpoint.as_deref(), &train, &test, &out_dir),
        Command::Eval { config, checkpoint, data } => {
            let acc = cmd_eval(&load_config(config.as_deref(), None)?, &checkpoint, &data)?;
            println!("{}", serde_json::json!({"accuracy": acc.0, "correct": acc.1, "total": acc.2}));
            Ok(())
        }
        Command::Gradcheck { seeds, tol } => cmd_gradcheck(seeds, tol),
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(Mode::Desk),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
        cfg.finetune.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{} does not exist", path.display())))
    }
}

/// `(file, label)` rows of a dataset manifest.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join(MANIFEST);
    require_file(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("file,label") {
        return Err(Error::Format(format!("{}: missing `file,label` header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::Format(format!("{} line {}: expected `file,label`", path.display(), i + 2));
            let (f, y) = l.trim().split_once(',').ok_or_else(bad)?;
            let label = y.trim().parse().map_err(|_| bad())?;
            if f.is_empty() || f.contains(['/', '\\']) {
                return Err(bad());
            }
            Ok((f.to_string(), label))
        })
        .collect()
}

pub fn write_manifest(dir: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut text = String::from("file,label\n");
    for (f, y) in rows {
        text.push_str(&format!("{f},{y}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Frames and labels of a binned dataset directory.
pub fn load_frames(dir: &Path) -> Result<LabeledSet> {
    let rows = read_manifest(dir)?;
    let frames = rows
        .par_iter()
        .map(|(f, _)| read_frame_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(frames, rows.into_iter().map(|(_, y)| y).collect())
}

pub fn cmd_gen(classes: usize, per_class: usize, seed: u64, out_dir: &Path, config: Option<&Path>) -> Result<()> {
    let mut params = load_config(config, None)?.generator;
    params.num_classes = classes;
    let streams = synthetic_streams(&params, classes * per_class, seed)?;
    create_dir(out_dir)?;
    let rows: Vec<(String, usize)> = streams
        .par_iter()
        .enumerate()
        .map(|(i, (stream, label))| {
            let name = format!("{i:05}.evst");
            write_event_file(stream, &out_dir.join(&name))?;
            Ok((name, *label))
        })
        .collect::<Result<_>>()?;
    write_manifest(out_dir, &rows)?;
    println!("wrote {} recordings to {}", rows.len(), out_dir.display());
    Ok(())
}

pub fn cmd_bin(in_dir: &Path, steps: usize, out_dir: &Path) -> Result<()> {
    let rows = read_manifest(in_dir)?;
    let cfg = BinningConfig::new(steps);
    cfg.validate()?;
    create_dir(out_dir)?;
    let out: Vec<(String, usize, String)> = rows
        .par_iter()
        .map(|(f, y)| {
            let stream = parse_event_file(&in_dir.join(f))?;
            let binned = bin_events(&stream, &cfg)?;
            let counted = binned.frames.total() as u64 + binned.dropped as u64;
            if counted != stream.len() as u64 {
                return Err(Error::Integrity(format!(
                    "{f}: {} events in, {counted} binned or dropped",
                    stream.len()
                )));
            }
            let name = Path::new(f).with_extension("frmt").to_string_lossy().into_owned();
            write_frame_file(&binned.frames, &out_dir.join(&name))?;
            let line = format!("{f}: events={} binned={} dropped={} ok", stream.len(), binned.frames.total(), binned.dropped);
            Ok((name, *y, line))
        })
        .collect::<Result<_>>()?;
    for (_, _, line) in &out {
        println!("{line}");
    }
    let manifest: Vec<(String, usize)> = out.into_iter().map(|(n, y, _)| (n, y)).collect();
    write_manifest(out_dir, &manifest)?;
    println!("binned {} recordings into {} windows", manifest.len(), steps);
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<()> {
    require_file(&data.join(MANIFEST))?;
    create_dir(out_dir)?;
    let pool = load_frames(data)?;
    let trainer = pretrain(cfg.pretrain.clone(), &pool.frames, |t| {
        let epoch = t.epochs_done() - 1;
        let rec = t.metrics().records.last().expect("epoch recorded");
        println!("pretrain epoch {epoch}: loss {:.4} lr {}", rec.loss, rec.lr);
        write_checkpoint(&t.checkpoint_store(), &out_dir.join(format!("pretrain-epoch{epoch:03}.nmcw")))
    })?;
    write_checkpoint(&trainer.checkpoint_store(), &out_dir.join("pretrain.nmcw"))?;
    trainer.metrics().write(&out_dir.join("pretrain.jsonl"))
}

/// Backbone weights of a pretraining checkpoint (its key encoder) or of a
/// plain backbone checkpoint.
fn init_weights(checkpoint: &ParamStore<f32>) -> ParamStore<f32> {
    let keys = checkpoint.strip_prefix("k.");
    if keys.is_empty() {
        checkpoint.clone()
    } else {
        keys
    }
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    train: &Path,
    test: &Path,
    out_dir: &Path,
) -> Result<()> {
    for dir in [train, test] {
        require_file(&dir.join(MANIFEST))?;
    }
    if let Some(c) = checkpoint {
        require_file(c)?;
    }
    create_dir(out_dir)?;
    let init = checkpoint.map(read_checkpoint).transpose()?.map(|c| init_weights(&c));
    let (train, test) = (load_frames(train)?, load_frames(test)?);
    let tuner = finetune(cfg.finetune.clone(), init.as_ref(), &train, &test, |t| {
        let rec = t.metrics().records.last().expect("epoch recorded");
        println!(
            "finetune epoch {}: loss {:.4} train {:.4} test {:.4}",
            rec.epoch,
            rec.loss,
            rec.train_acc.unwrap_or(0.0),
            rec.test_acc.unwrap_or(0.0)
        );
        write_checkpoint(t.store(), &out_dir.join(format!("finetune-epoch{:03}.nmcw", rec.epoch)))
    })?;
    write_checkpoint(tuner.store(), &out_dir.join("finetune.nmcw"))?;
    tuner.metrics().write(&out_dir.join("finetune.jsonl"))
}

/// `(accuracy, correct, total)`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<(f64, usize, usize)> {
    require_file(checkpoint)?;
    let store = read_checkpoint(checkpoint)?;
    let backbone = Backbone::new(cfg.finetune.backbone.clone())?;
    let set = load_frames(data)?;
    let report = evaluate(&backbone, &store, &set, cfg.finetune.eval_batch_size)?;
    Ok((report.accuracy, report.correct, report.total))
}

/// Reports of every tensor case plus the spike surrogate check.
pub fn gradcheck_reports(seeds: usize) -> Result<(Vec<GradReport>, f64)> {
    let reports = tensor_cases()
        .iter()
        .map(|c| run_case(c, seeds))
        .collect::<Result<Vec<_>>>()?;
    let mut spike = 0.0f64;
    for s in 0..seeds as u64 {
        spike = spike.max(spike_surrogate_error(s)?);
    }
    Ok((reports, spike))
}

/// Tolerance for the spike backward pass against its closed form.
pub const SPIKE_TOLERANCE: f64 = 1e-10;

pub fn cmd_gradcheck(seeds: usize, tol: f64) -> Result<()> {
    let (reports, spike) = gradcheck_reports(seeds)?;
    println!("{:<20} {:>6} {:>14}  result", "op", "seeds", "max_rel_err");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(tol);
        println!("{:<20} {:>6} {:>14.3e}  {}", r.name, r.seeds, r.max_rel_error, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(r.name);
        }
    }
    let ok = spike < SPIKE_TOLERANCE;
    println!("{:<20} {:>6} {:>14.3e}  {}", "spike_surrogate", seeds, spike, if ok { "PASS" } else { "FAIL" });
    if !ok {
        failed.push("spike_surrogate");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
