//! Command-line surface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use retclip_core::data::{self, Vocabulary};
use retclip_core::eval::{self, AdaptMode, TaskKind};
use retclip_core::gradcheck::{self, GradcheckConfig};
use retclip_core::model::LossToggles;
use retclip_core::train::{self, PretrainError};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::logs::{metrics_csv, ResultRecord, ResultsFile};
use crate::manifest::{self, MANIFEST_FILE, VOCAB_FILE};

pub const CHECKPOINT_FILE: &str = "model.rclp";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "retclip", version, about = "Tripartite binocular image-report contrastive pre-training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Full,
    Patient,
    Monocular,
}

impl From<LossArg> for LossToggles {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Full => LossToggles::full(),
            LossArg::Patient => LossToggles::patient_only(),
            LossArg::Monocular => LossToggles::monocular_only(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Multiclass,
    Multilabel,
}

#[derive(Debug, clap::Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled dataset manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Results JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Number of seeded repetitions.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Head type to train; must agree with the dataset header.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort on disk.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Pre-train on a cohort directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding manifest.tsv and vocab.txt.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, metrics and config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Multiply similarities by this constant instead of a learned scale.
        #[arg(long)]
        fixed_scale: Option<f64>,
        /// Stop after exactly this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Linear probe on a frozen encoder.
    Probe(AdaptArgs),
    /// Fine-tune encoder and head together.
    Finetune(AdaptArgs),
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            out,
            force,
            patients,
        } => synth(&common, &out, force, patients),
        Command::Pretrain {
            common,
            data,
            out,
            force,
            loss,
            fixed_scale,
            steps,
            epochs,
        } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            if let Some(l) = loss {
                cfg.train.loss = l.into();
            }
            if fixed_scale.is_some() {
                cfg.model.fixed_scale = fixed_scale;
            }
            if steps.is_some() {
                cfg.train.max_steps = steps;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            pretrain(&cfg, &data, &out, force)
        }
        Command::Probe(a) => adapt(&a, AdaptMode::Probe),
        Command::Finetune(a) => adapt(&a, AdaptMode::Finetune),
        Command::Gradcheck {
            common,
            eps,
            corrupt_gradient,
        } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            gradcheck_cmd(&cfg, eps, corrupt_gradient)
        }
    }
}

fn print_config(cfg: &RunConfig) {
    println!("# resolved configuration (root seed {})", cfg.seed);
    print!("{}", cfg.to_toml());
    println!("# end configuration");
}

fn is_nonempty(path: &Path) -> bool {
    match fs::metadata(path) {
        Ok(m) if m.is_dir() => fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(true),
        Ok(_) => true,
        Err(_) => false,
    }
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if is_nonempty(out) && !force {
        return Err(CliError::Usage(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn synth(common: &Common, out: &Path, force: bool, patients: Option<usize>) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    if let Some(n) = patients {
        cfg.synth.n_patients = n;
    }
    print_config(&cfg);
    prepare_out_dir(out, force)?;
    let cohort = data::generate_cohort(&cfg.synth)?;
    let vocab = Vocabulary::synthetic(cfg.synth.n_conditions);
    manifest::save_cohort(out, &cohort, &vocab, cfg.synth.n_conditions)?;

    println!("patients: {}", cohort.len());
    println!("vocabulary: {} tokens", vocab.len());
    for k in 0..cfg.synth.n_conditions {
        let (mut left, mut right) = (0, 0);
        for p in &cohort {
            if let Some(gt) = &p.ground_truth {
                left += gt.left[k] as usize;
                right += gt.right[k] as usize;
            }
        }
        println!("{}: left {left}, right {right}", data::finding_name(k));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig, data_dir: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    print_config(cfg);
    let manifest_path = data_dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(CliError::Usage(format!(
            "manifest not found: {}",
            manifest_path.display()
        )));
    }
    let vocab = manifest::load_vocab(&data_dir.join(VOCAB_FILE))?;
    if vocab.len() > cfg.model.text.vocab_size {
        return Err(CliError::Usage(format!(
            "vocabulary has {} tokens but model.text.vocab_size is {}",
            vocab.len(),
            cfg.model.text.vocab_size
        )));
    }
    let cohort = manifest::load_manifest(&manifest_path, &vocab)?;
    prepare_out_dir(out, force)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;

    let total = cfg.train.total_steps(cohort.len());
    println!("patients: {}, steps: {total}", cohort.len());
    let every = (total / 20).max(1);
    let result = train::pretrain(&cohort, &cfg.model, &cfg.train, |r| {
        if r.step % every == 0 || r.step + 1 == total {
            println!(
                "step {:>5}  lr {:.3e}  left {:.4}  right {:.4}  patient {:.4}  total {:.4}",
                r.step, r.lr, r.loss_left, r.loss_right, r.loss_patient, r.loss_total
            );
        }
    });
    let ckpt_path = out.join(CHECKPOINT_FILE);
    match result {
        Ok(o) => {
            let ckpt = Checkpoint {
                model: cfg.model,
                train: cfg.train.clone(),
                params: o.params,
                moments: Some(o.moments),
            };
            save_checkpoint(&ckpt_path, &ckpt)?;
            write_file(&out.join(METRICS_FILE), metrics_csv(&o.log))?;
            println!("wrote {}", ckpt_path.display());
            Ok(())
        }
        Err(PretrainError::NonFinite(a)) => {
            let ckpt = Checkpoint {
                model: cfg.model,
                train: cfg.train.clone(),
                params: a.last_good,
                moments: None,
            };
            save_checkpoint(&ckpt_path, &ckpt)?;
            write_file(&out.join(METRICS_FILE), metrics_csv(&a.log))?;
            Err(CliError::Runtime(format!(
                "non-finite loss or gradient at step {}; last good weights kept in {}",
                a.step,
                ckpt_path.display()
            )))
        }
        Err(PretrainError::Setup(e)) => Err(e.into()),
    }
}

fn adapt(a: &AdaptArgs, mode: AdaptMode) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(a.common.config.as_deref(), a.common.seed)?;
    if let Some(s) = a.seeds {
        cfg.eval.seeds = s;
    }
    if let Some(e) = a.epochs {
        cfg.eval.epochs = e;
    }
    print_config(&cfg);
    if cfg.eval.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if a.out.exists() && !a.force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            a.out.display()
        )));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let dataset = manifest::load_labeled_dataset(&a.dataset)?;
    if let Some(t) = a.task {
        let want = match t {
            TaskArg::Multiclass => TaskKind::Multiclass,
            TaskArg::Multilabel => TaskKind::Multilabel,
        };
        if want != dataset.task {
            return Err(CliError::Usage(format!(
                "--task {want:?} requested but {} is {:?}",
                a.dataset.display(),
                dataset.task
            )));
        }
    }
    let seeds: Vec<u64> = (0..cfg.eval.seeds as u64).map(|i| cfg.seed + i).collect();
    let outcomes: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let (ckpt, dataset, eval_cfg) = (&ckpt, &dataset, &cfg.eval);
                s.spawn(move || {
                    eval::adapt(
                        &ckpt.params,
                        &ckpt.model.image,
                        &ckpt.train.augment,
                        dataset,
                        eval_cfg,
                        mode,
                        seed,
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    if mode == AdaptMode::Probe {
        let stored = eval::image_encoder_params(&load_checkpoint(&a.checkpoint)?.params);
        if outcomes.iter().any(|o| o.encoder != stored) {
            return Err(CliError::Runtime("probe changed the frozen encoder".into()));
        }
    }

    let name = a.dataset.display().to_string();
    let records: Vec<ResultRecord> = outcomes.iter().map(|o| ResultRecord::new(&name, o)).collect();
    for r in &records {
        println!(
            "seed {:>3}  auroc {:.4}  aupr {:.4}  best epoch {:>3}  excluded classes {}",
            r.seed, r.auroc, r.aupr, r.best_epoch, r.excluded_classes
        );
        for c in &r.per_class {
            if c.auroc.is_none() {
                println!("  class {}: metric undefined on the test split", c.class);
            }
        }
    }
    let results = ResultsFile::new(records);
    println!(
        "mean over {} seeds: auroc {:.4}  aupr {:.4}",
        results.mean.seeds, results.mean.auroc, results.mean.aupr
    );
    let json = serde_json::to_string_pretty(&results).expect("results serialize");
    write_file(&a.out, json + "\n")?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, eps: f64, corrupt: bool) -> Result<(), CliError> {
    print_config(cfg);
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CliError::Usage(format!("--eps {eps} outside [1e-7, 1e-3]")));
    }
    let gc = GradcheckConfig {
        eps,
        corrupt,
        ..GradcheckConfig::default()
    };
    let start = std::time::Instant::now();
    let report = gradcheck::run_suite(&gc, cfg.seed)?;
    for c in &report.components {
        println!(
            "{:<20} max rel error {:.3e}  {}",
            c.name,
            c.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("elapsed {:.2?}", start.elapsed());
    if report.passed() {
        println!("gradcheck passed (tolerance {:e})", gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradcheck failed: worst relative error {:.3e} exceeds {:e}",
            report.worst(),
            gradcheck::TOLERANCE
        )))
    }
}
