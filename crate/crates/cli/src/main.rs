use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use odss::detect::{train_detector, ClassifierModel, TrainConfig};
use odss::harness::eval::{detector_csv, localizer_csv};
use odss::harness::{
    eval_detector, eval_localizer, gen_kpm_dataset, gen_spectrogram_dataset, kpm_training_windows, read_toml,
    run_scenario, sinr_tag, KpmSweep, Policy, ScenarioConfig, ScenarioResult, SinrStep, SpectrogramSweep,
};
use odss::localize::{EnergyLocalizer, LocalizerConfig};
use odss::{Error, Result};

#[derive(Parser)]
#[command(name = "odss", version, about = "Cellular/radar coexistence simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Kpm,
    Spectrogram,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Baseline,
    #[value(name = "blanking_only", alias = "blanking-only")]
    BlankingOnly,
    Full,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Baseline => Policy::Baseline,
            PolicyArg::BlankingOnly => Policy::BlankingOnly,
            PolicyArg::Full => Policy::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled KPM or spectrogram dataset.
    GenDataset {
        #[arg(long, value_enum)]
        kind: DatasetKind,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with sweep settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        sinr: Option<Vec<f64>>,
        /// Records (KPM) or spectrograms per SINR slot, including the radar-free slot.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the KPM radar detector on a KPM dataset directory.
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with training hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_stack: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Drop streams below this SINR.
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        min_sinr: f64,
    },
    /// Detector accuracy per SINR.
    EvalDetector {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Localizer recall, precision and mean IoU per SINR.
    EvalLocalizer {
        #[arg(long)]
        data: PathBuf,
        /// TOML file with localizer settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a closed-loop scenario.
    RunScenario {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Run once per SINR with a constant schedule.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        sinr: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and print the per-stage latency table.
    ReportLatency {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_toml)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn scenario_setup(
    config: Option<&Path>,
    model: Option<&Path>,
    seed: Option<u64>,
) -> Result<(ScenarioConfig, Option<ClassifierModel>)> {
    let mut cfg = match config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = model {
        cfg.model_path = Some(m.to_path_buf());
    }
    let model = cfg.model_path.as_deref().map(ClassifierModel::load).transpose()?;
    Ok((cfg, model))
}

fn print_summary(result: &ScenarioResult) {
    let s = &result.summary;
    println!(
        "policy={} windows={} mean_bler_pct={:.4} radar_mean_bler_pct={:.4} mean_throughput_mbps={:.4} commands={}",
        s.policy.name(),
        s.windows,
        s.mean_bler_pct,
        s.radar_mean_bler_pct,
        s.mean_throughput_mbps,
        result.commands.len()
    );
    for d in &s.intervals {
        let show = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:.3}"));
        println!(
            "radar [{}, {}) detection_delay_s={} evacuation_delay_s={} restore_delay_s={}",
            d.t_on_s,
            d.t_off_s,
            show(d.detection_delay_s),
            show(d.evacuation_delay_s),
            show(d.restore_delay_s)
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset {
            kind,
            out,
            config,
            seed,
            sinr,
            count,
        } => match kind {
            DatasetKind::Kpm => {
                let mut sweep: KpmSweep = load_or_default(config.as_deref())?;
                if let Some(s) = seed {
                    sweep.seed = s;
                }
                if let Some(v) = sinr {
                    sweep.sinrs_db = v;
                }
                if let Some(n) = count {
                    sweep.records_per_sinr = n;
                    sweep.clean_records = n;
                }
                let files = gen_kpm_dataset(&sweep, &out)?;
                println!("wrote {} KPM files to {}", files.len(), out.display());
            }
            DatasetKind::Spectrogram => {
                let mut sweep: SpectrogramSweep = load_or_default(config.as_deref())?;
                if let Some(s) = seed {
                    sweep.seed = s;
                }
                if let Some(v) = sinr {
                    sweep.sinrs_db = v;
                }
                if let Some(n) = count {
                    sweep.per_sinr = n;
                    sweep.clean = n;
                }
                let n = gen_spectrogram_dataset(&sweep, &out)?;
                println!("wrote {n} spectrograms to {}", out.display());
            }
        },
        Command::TrainDetector {
            data,
            out,
            config,
            n_stack,
            seed,
            min_sinr,
        } => {
            let mut train: TrainConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                train.seed = s;
            }
            let windows = kpm_training_windows(&data, n_stack, min_sinr)?;
            let trained = train_detector(&windows, &train)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            trained.model.save(&out)?;
            println!(
                "windows={} n_stack={} train_accuracy={:.4} validation_accuracy={:.4} model={}",
                windows.len(),
                n_stack,
                trained.train_accuracy,
                trained.validation_accuracy,
                out.display()
            );
        }
        Command::EvalDetector { model, data, out } => {
            let model = ClassifierModel::load(&model)?;
            let rows = eval_detector(&model, &data)?;
            write_or_print(out.as_deref(), &detector_csv(&rows))?;
        }
        Command::EvalLocalizer { data, config, iou, out } => {
            if !(iou > 0.0 && iou <= 1.0) {
                return Err(Error::InvalidParams(format!("IoU threshold {iou} outside (0, 1]")));
            }
            let localizer = EnergyLocalizer::new(load_or_default::<LocalizerConfig>(config.as_deref())?)?;
            let rows = eval_localizer(&localizer, &data, iou)?;
            write_or_print(out.as_deref(), &localizer_csv(&rows))?;
        }
        Command::RunScenario {
            config,
            model,
            seed,
            policy,
            sinr,
            out,
        } => {
            let (mut cfg, model) = scenario_setup(config.as_deref(), model.as_deref(), seed)?;
            if let Some(p) = policy {
                cfg.policy = p.into();
            }
            match sinr {
                None => {
                    let result = run_scenario(&cfg, model.as_ref())?;
                    print_summary(&result);
                    if let Some(dir) = &out {
                        result.write_outputs(dir)?;
                    }
                }
                Some(list) => {
                    for s in list {
                        let mut c = cfg.clone();
                        c.sinr_schedule = vec![SinrStep {
                            t_start_s: 0.0,
                            sinr_db: s,
                        }];
                        let result = run_scenario(&c, model.as_ref())?;
                        print!("sinr_db={s} ");
                        print_summary(&result);
                        if let Some(dir) = &out {
                            result.write_outputs(&dir.join(format!("sinr_{}", sinr_tag(s))))?;
                        }
                    }
                }
            }
        }
        Command::ReportLatency {
            config,
            model,
            seed,
            out,
        } => {
            let (cfg, model) = scenario_setup(config.as_deref(), model.as_deref(), seed)?;
            let result = run_scenario(&cfg, model.as_ref())?;
            write_or_print(out.as_deref(), &result.ledger.report())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
