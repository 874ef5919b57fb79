use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpae::checks::{div, grad, CheckCase};
use mpae::eval::{enumerate_scenarios, evaluate, InferSettings};
use mpae::model::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadMode, Phase};
use mpae::phantom::{generate_dataset, load_dataset, PhantomConfig};
use mpae::train::{finetune, loss_csv, pretrain, split_dataset, TrainConfig, TrainPhase};
use mpae::volume::ModalitySet;
use mpae::{Error, Result};

#[derive(Parser)]
#[command(name = "mpae", version, about = "Masked predicted pretraining and Hölder distillation on synthetic MRI phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled phantoms and a manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked (and missing-modality) reconstruction pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Modalities visible to the encoder, e.g. FLAIR,T1c.
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long)]
        rec_norm: Option<String>,
        #[arg(long)]
        mask_mode: Option<String>,
        /// Fixed mask ratio instead of the per-scenario schedule.
        #[arg(long)]
        mask_ratio: Option<String>,
        #[arg(long)]
        predict_missing: Option<String>,
    },
    /// Segmentation fine-tuning with optional distillation.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        modalities: Option<String>,
        /// Pretrained checkpoint whose encoder initializes the student.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Frozen full-modality teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// none, kl or holder.
        #[arg(long)]
        kd: Option<String>,
        #[arg(long)]
        alpha: Option<String>,
        #[arg(long)]
        tau: Option<String>,
        #[arg(long)]
        w: Option<String>,
    },
    /// Per-scenario WT/TC/ET Dice with sliding-window inference.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `all` for the 15 subsets, or one subset such as FLAIR,T2.
        #[arg(long, default_value = "all")]
        scenarios: String,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Trailing cases of the dataset used for scoring.
        #[arg(long, default_value_t = TrainConfig::default().val_count)]
        val_count: usize,
        /// Score every case instead of the trailing validation split.
        #[arg(long)]
        all_cases: bool,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Divergence oracle and property suite.
    Divcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` settings; flags override them.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self, phase: TrainPhase, flags: &[(&str, &Option<String>)]) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::parse(&fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        cfg.phase = phase;
        let common = [("seed", &self.seed), ("epochs", &self.epochs), ("lr", &self.lr)];
        for (key, value) in common.iter().chain(flags) {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn write_losses(&self, records: &[mpae::train::LossRecord]) -> Result<()> {
        let path = self
            .loss_csv
            .clone()
            .unwrap_or_else(|| self.out.with_extension("loss.csv"));
        fs::write(path, loss_csv(records))?;
        Ok(())
    }
}

fn print_cases(cases: &[CheckCase]) -> bool {
    let mut ok = true;
    for c in cases {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<40} error {:.3e} (tolerance {:.0e})", c.name, c.error, c.tolerance);
        ok &= c.passed();
    }
    ok
}

fn training_split(data: &Path, cfg: &TrainConfig) -> Result<Vec<mpae::train::Sample>> {
    let all = load_dataset(data)?;
    let (train, _) = split_dataset(&all, cfg.val_count)?;
    Ok(train.to_vec())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, count, out } => {
            let entries = generate_dataset(&PhantomConfig::with_seed(seed), count, &out)?;
            println!("wrote {} phantoms to {}", entries.len(), out.display());
        }
        Command::Pretrain {
            common,
            modalities,
            rec_norm,
            mask_mode,
            mask_ratio,
            predict_missing,
        } => {
            let cfg = common.config(
                TrainPhase::Pretrain,
                &[
                    ("modalities", &modalities),
                    ("rec_norm", &rec_norm),
                    ("mask_mode", &mask_mode),
                    ("mask_ratio", &mask_ratio),
                    ("predict_missing", &predict_missing),
                ],
            )?;
            let train = training_split(&common.data, &cfg)?;
            let out = pretrain(&cfg, &train)?;
            let meta = CheckpointMeta {
                phase: Phase::Pretrained,
                seed: cfg.seed,
                epoch: cfg.epochs,
            };
            save_checkpoint(&out.model, &meta, &common.out)?;
            common.write_losses(&out.losses)?;
            println!("pretrained on {} with mask ratio {}", cfg.modalities, cfg.mask_ratio()?);
        }
        Command::Finetune {
            common,
            modalities,
            init,
            teacher,
            kd,
            alpha,
            tau,
            w,
        } => {
            let mut cfg = common.config(
                TrainPhase::Finetune,
                &[
                    ("modalities", &modalities),
                    ("kd", &kd),
                    ("alpha", &alpha),
                    ("tau", &tau),
                    ("w", &w),
                ],
            )?;
            let init = init
                .map(|p| load_checkpoint(&p, LoadMode::Full, cfg.seed))
                .transpose()?;
            if let Some((m, _)) = &init {
                cfg.model = m.config().clone();
            }
            let teacher = teacher
                .map(|p| load_checkpoint(&p, LoadMode::Full, cfg.seed))
                .transpose()?;
            let train = training_split(&common.data, &cfg)?;
            let out = finetune(
                &cfg,
                &train,
                init.as_ref().map(|(m, _)| m),
                teacher.as_ref().map(|(m, _)| m),
            )?;
            let phase = if cfg.modalities == ModalitySet::ALL && teacher.is_none() {
                Phase::Teacher
            } else {
                Phase::Finetuned
            };
            let meta = CheckpointMeta {
                phase,
                seed: cfg.seed,
                epoch: cfg.epochs,
            };
            save_checkpoint(&out.model, &meta, &common.out)?;
            common.write_losses(&out.losses)?;
            println!("fine-tuned on {} with kd = {}", cfg.modalities, cfg.kd);
        }
        Command::Eval {
            ckpt,
            data,
            scenarios,
            report,
            val_count,
            all_cases,
            window,
            overlap,
        } => {
            let (model, _) = load_checkpoint(&ckpt, LoadMode::Full, 0)?;
            let all = load_dataset(&data)?;
            let cases = if all_cases { &all[..] } else { split_dataset(&all, val_count)?.1 };
            let scenarios = if scenarios.trim().eq_ignore_ascii_case("all") {
                enumerate_scenarios()
            } else {
                vec![scenarios.parse::<ModalitySet>()?]
            };
            let settings = InferSettings {
                window: [window; 3],
                overlap,
            };
            let csv = evaluate(&model, cases, &scenarios, settings)?.to_csv();
            match report {
                Some(path) => fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck => {
            if !print_cases(&grad::all_cases()?) {
                return Err(Error::Numerical("gradient check failed".into()));
            }
        }
        Command::Divcheck { seed } => {
            if !print_cases(&div::all_cases(seed)?) {
                return Err(Error::Numerical("divergence check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
