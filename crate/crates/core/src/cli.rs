//! `p2a` command line. Exit codes: 0 success, 1 usage or config error,
//! 2 data or schema error.

use crate::artifacts::{read_predictions, write_stamped, Provenance};
use crate::dataset::{load_target, Audit};
use crate::detection::evaluate_map;
use crate::error::{Error, Result};
use crate::pipeline::{RunConfig, Workspace};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "p2a", version, about = "Prompt-steered zero-shot detector adaptation")]
pub struct Cli {
    /// Run seed; overrides the config file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run config (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct DomainArg {
    /// Restrict to one target domain
    #[arg(long)]
    domain: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write source, cache and per-domain datasets
    GenData,
    /// Parse, normalise and filter captions into prompts
    Captions,
    /// Train the student and the teacher head on source data
    Pretrain,
    /// Optimise style statistics toward each target prompt
    Steer {
        #[command(flatten)]
        d: DomainArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
    },
    /// Fine-tune the teacher head on steered cache features
    AdaptTeacher {
        #[command(flatten)]
        d: DomainArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write adapted-teacher pseudo-labels for each target stream
    PseudoLabel {
        #[command(flatten)]
        d: DomainArg,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Adapt the student on pseudo-labelled target images
    AdaptStudent {
        #[command(flatten)]
        d: DomainArg,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the in-domain reference student on target truth
    Oracle {
        #[command(flatten)]
        d: DomainArg,
    },
    /// mAP@50 report: pipeline students, or a predictions file against a dataset
    Eval {
        #[command(flatten)]
        d: DomainArg,
        /// Dataset JSONL holding the truth
        #[arg(long, requires = "preds")]
        dataset: Option<PathBuf>,
        /// Predictions JSONL, one line per dataset image
        #[arg(long, requires = "dataset")]
        preds: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Every stage in order, then the summary table.
    /// Here --lr and --epochs apply to student adaptation.
    E2e {
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn apply_overrides(cmd: &Command, seed: Option<u64>, cfg: &mut RunConfig) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let set = |dst: &mut f64, v: &Option<f64>| {
        if let Some(v) = v {
            *dst = *v;
        }
    };
    let setn = |dst: &mut usize, v: &Option<usize>| {
        if let Some(v) = v {
            *dst = *v;
        }
    };
    match cmd {
        Command::Steer { steps, lr, momentum, .. } => {
            setn(&mut cfg.steering.steps, steps);
            set(&mut cfg.steering.lr, lr);
            set(&mut cfg.steering.momentum, momentum);
        }
        Command::AdaptTeacher { epochs, lr, .. } => {
            setn(&mut cfg.finetune.epochs, epochs);
            set(&mut cfg.finetune.lr, lr);
        }
        Command::PseudoLabel { tau, .. } => set(&mut cfg.adapt.tau, tau),
        Command::AdaptStudent { tau, epochs, lr, .. } => {
            set(&mut cfg.adapt.tau, tau);
            setn(&mut cfg.adapt.epochs, epochs);
            set(&mut cfg.adapt.lr, lr);
        }
        Command::E2e { tau, steps, lr, momentum, epochs } => {
            set(&mut cfg.adapt.tau, tau);
            setn(&mut cfg.steering.steps, steps);
            set(&mut cfg.steering.momentum, momentum);
            set(&mut cfg.adapt.lr, lr);
            setn(&mut cfg.adapt.epochs, epochs);
        }
        _ => {}
    }
}

fn workspace(cli: &Cli) -> Result<Workspace> {
    let edit = |cfg: &mut RunConfig| apply_overrides(&cli.command, cli.seed, cfg);
    match &cli.config {
        Some(path) => Workspace::from_config_file(path, &cli.out, edit),
        None => {
            let mut cfg = RunConfig::default();
            edit(&mut cfg);
            Workspace::new(cfg, Path::new("."), &cli.out)
        }
    }
}

fn eval_files(cli: &Cli, dataset: &Path, preds: &Path, iou: f64, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::Config(format!("iou must be in [0, 1], got {iou}")));
    }
    let audit = Audit::new();
    audit.set_phase("eval");
    let (images, vault) = load_target(dataset, &audit)?;
    let detections = read_predictions(preds)?;
    if detections.len() != images.len() {
        return Err(Error::Schema(format!(
            "{} prediction lines for {} images",
            detections.len(),
            images.len()
        )));
    }
    let report = evaluate_map(&detections, vault.reveal(), iou)?;
    let prov = Provenance::new(
        cli.seed.unwrap_or(0),
        &serde_json::json!({ "dataset": dataset, "preds": preds, "iou": iou }),
    )?;
    let path = cli.out.join("reports").join("eval.json");
    write_stamped(&path, &report, &prov)?;
    let _ = writeln!(out, "map50 {:.6}", report.map50);
    Ok(())
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Command::Eval {
        dataset: Some(dataset),
        preds: Some(preds),
        iou,
        ..
    } = &cli.command
    {
        return eval_files(cli, dataset, preds, *iou, out);
    }
    let ws = workspace(cli)?;
    match &cli.command {
        Command::GenData => ws.gen_data()?,
        Command::Captions => {
            let b = ws.captions()?;
            let _ = writeln!(out, "kept {} rejected {}", b.kept.len(), b.rejected.len());
        }
        Command::Pretrain => ws.pretrain()?,
        Command::Steer { d, .. } => {
            for s in ws.steer(d.domain.as_deref())? {
                let n = s.len().max(1) as f64;
                let init: f64 = s.entries.iter().map(|e| e.loss_init).sum::<f64>() / n;
                let fin: f64 = s.entries.iter().map(|e| e.loss_final).sum::<f64>() / n;
                let _ = writeln!(out, "loss {init:.6} -> {fin:.6}");
            }
        }
        Command::AdaptTeacher { d, .. } => ws.adapt_teacher(d.domain.as_deref())?,
        Command::PseudoLabel { d, .. } => {
            for n in ws.pseudo_label(d.domain.as_deref())? {
                let _ = writeln!(out, "pseudo-labels {n}");
            }
        }
        Command::AdaptStudent { d, .. } => {
            ws.adapt_student(d.domain.as_deref())?;
            ws.check_audit()?;
        }
        Command::Oracle { d } => ws.oracle(d.domain.as_deref())?,
        Command::Eval { d, .. } => {
            let s = ws.eval(d.domain.as_deref())?;
            ws.write_summary(&s)?;
            let _ = write!(out, "{}", s.table());
        }
        Command::E2e { .. } => {
            let s = ws.e2e()?;
            ws.check_audit()?;
            let _ = write!(out, "{}", s.table());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_data_error() {
                2
            } else {
                1
            }
        }
    }
}
