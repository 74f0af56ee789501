//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use painattn_core::autograd::Layer;
use painattn_core::derive_seed;
use painattn_core::metrics::{ConfusionMatrix, MetricsReport};
use painattn_core::model::PainAttnNet;
use painattn_core::suite::{gradient_suite, TOLERANCE};
use painattn_core::synth::generate_cohort;
use painattn_core::train::{
    baseline_loocv, build_task_dataset, predict, train_epochs_with, Control, TaskDataset,
};

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{read_dataset, write_dataset, Dataset};
use crate::error::{AppError, AppResult};
use crate::manifest::{write_text, Manifest};
use crate::parallel::loocv_parallel;

/// Key under which the initial weights of a trained model are derived from `--seed`.
pub const MODEL_SEED_KEY: u64 = 0x1417;

#[derive(Debug, Parser)]
#[command(
    name = "painattn",
    version,
    about = "Pain-intensity classification from electrodermal activity windows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it as a dataset file
    Synth(Flags),
    /// Train on every window of a dataset and write a checkpoint
    Train(Flags),
    /// Score a checkpoint on a dataset
    Eval(Flags),
    /// Leave-one-subject-out cross-validation
    Loocv(Flags),
    /// Check analytic gradients of every layer against finite differences
    Gradcheck(Flags),
}

/// Flags shared by all commands; they override values from `--config`.
#[derive(Debug, Args)]
struct Flags {
    /// key=value settings file (a run manifest works too)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dataset file (binary, or CSV with a subject_id,level,s0.. header)
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
    /// Output file (synth) or directory (train, eval, loocv, gradcheck)
    #[arg(long, short = 'o', value_name = "PATH")]
    out: Option<String>,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
    /// 5way, pain-any, t0t1, t0t2, t0t3 or t0t4
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Weight the loss by inverse class frequency (true/false)
    #[arg(long)]
    class_weighting: Option<String>,
    /// Network size: reference or mini
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    blocks: Option<String>,
    /// Folds trained concurrently
    #[arg(long)]
    jobs: Option<String>,
    /// verbatim or endpoint temperature staging
    #[arg(long)]
    temp_mode: Option<String>,
    /// Standard deviation of additive sensor noise
    #[arg(long)]
    noise: Option<String>,
    /// Scale of the stimulus response
    #[arg(long)]
    gain: Option<String>,
    /// Number of synthetic subjects
    #[arg(long)]
    subjects: Option<String>,
    /// Sample rate for synthesis and CSV import
    #[arg(long)]
    sample_rate: Option<String>,
}

impl Flags {
    fn resolve(&self) -> AppResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let given = [
            ("data", &self.data),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
            ("task", &self.task),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("batch_size", &self.batch_size),
            ("class_weighting", &self.class_weighting),
            ("model", &self.model),
            ("heads", &self.heads),
            ("blocks", &self.blocks),
            ("jobs", &self.jobs),
            ("temp_mode", &self.temp_mode),
            ("noise", &self.noise),
            ("gain", &self.gain),
            ("subjects", &self.subjects),
            ("sample_rate", &self.sample_rate),
        ];
        for (key, value) in given {
            if let Some(v) = value {
                cfg.apply_flag(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started = Instant::now();
    let result = match &cli.command {
        Command::Synth(f) => f.resolve().and_then(|c| cmd_synth(&c, started)),
        Command::Train(f) => f.resolve().and_then(|c| cmd_train(&c, started)),
        Command::Eval(f) => f.resolve().and_then(|c| cmd_eval(&c, started)),
        Command::Loocv(f) => f.resolve().and_then(|c| cmd_loocv(&c, started)),
        Command::Gradcheck(f) => f.resolve().and_then(|c| cmd_gradcheck(&c, started)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> AppResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| AppError::Usage(format!("{flag} is required")))
}

struct Loaded {
    path: PathBuf,
    crc: u32,
    dataset: Dataset,
    task: TaskDataset,
}

fn load(cfg: &RunConfig) -> AppResult<Loaded> {
    let path = required(&cfg.data, "--data")?;
    let (dataset, crc) = read_dataset(path, cfg.sample_rate)?;
    let task = build_task_dataset(&dataset.records, cfg.task_spec())
        .map_err(|e| AppError::core(format!("{} for --task {}", path.display(), cfg.task), e))?;
    log::info!(
        "{}: {} windows, {} for task {}",
        path.display(),
        dataset.records.len(),
        task.len(),
        cfg.task
    );
    Ok(Loaded {
        path: path.to_path_buf(),
        crc,
        dataset,
        task,
    })
}

fn data_section(m: &mut Manifest, d: &Loaded) {
    m.section(
        "data",
        [
            ("path", d.path.display().to_string()),
            ("crc32", format!("{:08x}", d.crc)),
            ("records", d.dataset.records.len().to_string()),
            ("subjects", d.dataset.subject_ids().len().to_string()),
            ("sample_rate", d.dataset.sample_rate.to_string()),
            ("window_len", d.dataset.window_len.to_string()),
            ("task_windows", d.task.len().to_string()),
        ],
    );
}

/// Writes `manifest.txt` under `--out`, or prints it when no output directory is given.
fn emit(cfg: &RunConfig, text: &str) -> AppResult<()> {
    match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
            write_text(&dir.join("manifest.txt"), text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn out_dir(cfg: &RunConfig) -> AppResult<&Path> {
    let dir = required(&cfg.out, "--out")?;
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    Ok(dir)
}

fn cmd_synth(cfg: &RunConfig, started: Instant) -> AppResult<()> {
    let out = required(&cfg.out, "--out")?;
    let protocol = cfg.protocol();
    let records = generate_cohort(
        &protocol,
        cfg.seed,
        cfg.subjects as u16,
        cfg.noise,
        cfg.gain,
    )
    .map_err(|e| AppError::core("synth (--noise, --gain, --temp-mode)", e))?;
    let ds = Dataset::new(protocol.sample_rate, records).map_err(|e| AppError::format(out, e))?;
    write_dataset(out, &ds)?;
    let crc = crc32fast::hash(&fs::read(out).map_err(|e| AppError::io(out, e))?);
    println!(
        "wrote {} windows for {} subjects to {}",
        ds.records.len(),
        cfg.subjects,
        out.display()
    );
    let mut m = Manifest::new("synth", cfg);
    m.section(
        "data",
        [
            ("path", out.display().to_string()),
            ("crc32", format!("{crc:08x}")),
            ("records", ds.records.len().to_string()),
            ("subjects", cfg.subjects.to_string()),
            ("window_len", ds.window_len.to_string()),
        ],
    );
    let mut manifest_path = out.as_os_str().to_owned();
    manifest_path.push(".manifest");
    write_text(Path::new(&manifest_path), &m.finish(started.elapsed()))
}

fn cmd_train(cfg: &RunConfig, started: Instant) -> AppResult<()> {
    let dir = out_dir(cfg)?.to_path_buf();
    let d = load(cfg)?;
    let model_cfg = cfg.model_config(d.task.task.num_classes);
    let mut model = PainAttnNet::new(model_cfg, derive_seed(cfg.seed, MODEL_SEED_KEY))
        .map_err(|e| AppError::core("model (--model, --heads, --blocks)", e))?;
    let outcome = train_epochs_with(
        &mut model,
        &d.task,
        &cfg.train_config(),
        |epoch, loss, _| {
            log::info!("epoch {epoch}: loss {loss:.6}");
            Ok(Control::Continue)
        },
    )
    .map_err(|e| AppError::core(format!("training on {}", d.path.display()), e))?;
    let predicted = predict(&mut model, &d.task, cfg.batch_size)
        .map_err(|e| AppError::core("scoring the training set", e))?;
    let report = report_for(&d.task, &predicted)?;

    let ckpt_path = dir.join("model.ckpt");
    write_checkpoint(&ckpt_path, &Checkpoint::capture(&mut model, &cfg.task))?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in outcome.loss_curve.iter().enumerate() {
        let _ = writeln!(curve, "{e},{l}");
    }
    write_text(&dir.join("loss.csv"), &curve)?;

    let mut m = Manifest::new("train", cfg);
    data_section(&mut m, &d);
    m.section(
        "training",
        [
            ("checkpoint", ckpt_path.display().to_string()),
            ("steps", outcome.steps.to_string()),
            (
                "final_loss",
                outcome
                    .loss_curve
                    .last()
                    .map_or("none".into(), |l| l.to_string()),
            ),
            ("parameters", model.num_params().to_string()),
        ],
    );
    m.block("train_set", &report.to_string());
    println!(
        "trained {} epochs on {} windows; training accuracy {:.4}; checkpoint {}",
        cfg.epochs,
        d.task.len(),
        report.acc,
        ckpt_path.display()
    );
    emit(cfg, &m.finish(started.elapsed()))
}

fn report_for(data: &TaskDataset, predicted: &[usize]) -> AppResult<MetricsReport> {
    let cm = ConfusionMatrix::from_labels(data.task.num_classes, &data.labels, predicted)
        .map_err(|e| AppError::core("confusion matrix", e))?;
    MetricsReport::from_matrix(cm).map_err(|e| AppError::core("metrics", e))
}

fn cmd_eval(cfg: &RunConfig, started: Instant) -> AppResult<()> {
    let ckpt_path = required(&cfg.checkpoint, "--checkpoint")?;
    let ckpt = read_checkpoint(ckpt_path)?;
    let d = load(cfg)?;
    let k = d.task.task.num_classes;
    if ckpt.config.num_classes != k {
        return Err(AppError::Usage(format!(
            "--task {} has {k} classes but {} was trained for {} ({} classes)",
            cfg.task,
            ckpt_path.display(),
            ckpt.task,
            ckpt.config.num_classes
        )));
    }
    let mut model = ckpt
        .restore()
        .map_err(|e| AppError::core(ckpt_path.display().to_string(), e))?;
    let predicted = predict(&mut model, &d.task, cfg.batch_size)
        .map_err(|e| AppError::core(format!("evaluating on {}", d.path.display()), e))?;
    let report = report_for(&d.task, &predicted)?;
    let mut m = Manifest::new("eval", cfg);
    data_section(&mut m, &d);
    m.section(
        "checkpoint",
        [
            ("path", ckpt_path.display().to_string()),
            ("task", ckpt.task.clone()),
        ],
    );
    m.block("report", &report.to_string());
    if cfg.out.is_some() {
        print!("{report}");
    }
    emit(cfg, &m.finish(started.elapsed()))
}

fn cmd_loocv(cfg: &RunConfig, started: Instant) -> AppResult<()> {
    let d = load(cfg)?;
    let model_cfg = cfg.model_config(d.task.task.num_classes);
    model_cfg
        .validate()
        .map_err(|e| AppError::core("model (--model, --heads, --blocks)", e))?;
    let outcome = loocv_parallel(&d.task, &model_cfg, &cfg.train_config(), cfg.jobs)
        .map_err(|e| AppError::core(format!("cross-validation on {}", d.path.display()), e))?;
    let baseline =
        baseline_loocv(&d.task).map_err(|e| AppError::core("mean-threshold baseline", e))?;

    let mut m = Manifest::new("loocv", cfg);
    data_section(&mut m, &d);
    let mut folds = Vec::new();
    for f in &outcome.folds {
        folds.push((
            format!("{}.windows", f.test_subject),
            f.truth.len().to_string(),
        ));
        folds.push((
            format!("{}.accuracy", f.test_subject),
            format!("{:.6}", f.accuracy()),
        ));
        folds.push((
            format!("{}.final_loss", f.test_subject),
            f.loss_curve.last().map_or("none".into(), |l| l.to_string()),
        ));
    }
    m.section("folds", folds);
    m.block("pooled", &outcome.report.to_string());
    m.block("baseline", &baseline.to_string());

    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        let mut curve = String::from("subject,epoch,loss\n");
        for f in &outcome.folds {
            for (e, l) in f.loss_curve.iter().enumerate() {
                let _ = writeln!(curve, "{},{e},{l}", f.test_subject);
            }
        }
        write_text(&dir.join("loss_curves.csv"), &curve)?;
        print!("{}", outcome.report);
        println!("baseline_acc={:.6}", baseline.acc);
    }
    emit(cfg, &m.finish(started.elapsed()))
}

fn cmd_gradcheck(cfg: &RunConfig, started: Instant) -> AppResult<()> {
    let mut body = String::new();
    let mut failed = Vec::new();
    for seed in cfg.seed..cfg.seed + 3 {
        let entries = gradient_suite(seed)
            .map_err(|e| AppError::core(format!("gradient check with seed {seed}"), e))?;
        for e in entries {
            let r = &e.report;
            let verdict = if e.passed() { "pass" } else { "FAIL" };
            let _ = writeln!(
                body,
                "{} seed={seed} max_rel_error={:.3e} probes={} kink_probes={} kink_max_rel_error={:.3e} unresolved={} result={verdict}",
                e.case, r.max_rel_error, r.probes, r.kink_probes, r.kink_max_rel_error, r.unresolved
            );
            if !e.passed() {
                failed.push(format!("{} (seed {seed}, worst {})", e.case, r.worst));
            }
        }
    }
    let _ = writeln!(body, "tolerance={TOLERANCE:e}");
    let mut m = Manifest::new("gradcheck", cfg);
    m.block("gradcheck", &body);
    if cfg.out.is_some() {
        print!("{body}");
    }
    emit(cfg, &m.finish(started.elapsed()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::GradCheck(failed.join(", ")))
    }
}
