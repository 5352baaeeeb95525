use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use intact::actstudent::Variant;
use intact::config::{ExperimentConfig, OUT_DIR_ENV};
use intact::lidarmodel::{condition_fragment, severity_from_budget, total_power, LidarConfig};
use intact::pipeline;
use intact::{Error, Result};

#[derive(Parser)]
#[command(name = "intact", version, about = "Saliency-guided adversarial curriculum training on synthetic point clouds")]
struct Cli {
    /// Experiment config (TOML). Defaults to the shipped configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out` and the INTACT_OUT variable.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set student.stages=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and store the synthetic dataset.
    GenData,
    /// Meta-train the teacher on the stored dataset.
    TrainTeacher {
        /// Also write per-point saliency maps of the test clouds.
        #[arg(long)]
        dump_saliency: bool,
    },
    /// Train student variants against the stored dataset and teacher.
    TrainStudent {
        /// Variants to train (baseline, act, intact). Default: all.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Evaluate the teacher and all students; writes CSV and text reports.
    Eval,
    /// LiDAR power, energy and resolution budget.
    LidarModel {
        /// `key = value` sensor parameters; missing keys use defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Operating range in metres.
        #[arg(long, default_value_t = 100.0)]
        range: f64,
        /// Range whose required pulse energy defines zero severity.
        /// Defaults to `--range`.
        #[arg(long)]
        reference_range: Option<f64>,
        /// Print the derived perturbation as an eval condition fragment.
        #[arg(long)]
        emit_fragment: bool,
    },
    /// gen-data, train-teacher, train-student, eval.
    All {
        #[arg(long)]
        dump_saliency: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let out = cli.out.clone().or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from));
    if let Some(out) = out {
        let s = out.to_str().ok_or_else(|| Error::Config("output path is not UTF-8".into()))?;
        overrides.push(format!("paths.out={}", toml_string(s)));
    }
    overrides.extend(cli.overrides.iter().cloned());
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn lidar(params: Option<&PathBuf>, range: f64, reference: Option<f64>, fragment: bool) -> Result<()> {
    let cfg = match params {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
            std::fs::read_to_string(p)?.parse::<LidarConfig>()?
        }
        None => LidarConfig::default(),
    };
    cfg.validate()?;
    let budget = total_power(&cfg, range)?;
    print!("{}", budget.table());
    let r0 = reference.unwrap_or(range);
    let spec = severity_from_budget(&budget, &total_power(&cfg, r0)?);
    println!("severity vs required energy at {r0} m: drop {} sigma {}", spec.drop_fraction, spec.sigma);
    if fragment {
        print!("\n{}", condition_fragment(&format!("lidar_{r0}m"), &spec));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::LidarModel {
        params,
        range,
        reference_range,
        emit_fragment,
    } = &cli.command
    {
        return lidar(params.as_ref(), *range, *reference_range, *emit_fragment);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let ds = pipeline::gen_data(&cfg)?;
            println!("wrote {} clouds to {}", ds.clouds.len(), pipeline::dataset_dir(&cfg).display());
        }
        Command::TrainTeacher { dump_saliency } => {
            pipeline::train_teacher(&cfg, *dump_saliency)?;
            println!("wrote {}", cfg.teacher_path().display());
        }
        Command::TrainStudent { variants } => {
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?
            };
            for (v, _, _) in pipeline::train_students(&cfg, &variants)? {
                println!("wrote {}", pipeline::student_path(&cfg, v).display());
            }
        }
        Command::Eval => print!("{}", pipeline::summary(&pipeline::evaluate(&cfg)?)),
        Command::All { dump_saliency } => print!("{}", pipeline::summary(&pipeline::run_all(&cfg, *dump_saliency)?)),
        Command::LidarModel { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
