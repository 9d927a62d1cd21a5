use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use polyformer::error::Error;
use polyformer::harness::{
    composite_depth, evaluate_model, fit_poly, inspect_model, run_ablation, run_pipeline, stage_model, AblationSpec, ExperimentConfig,
    FitConfig, PipelineStage, RunReport,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "polyformer", version, about = "Train, range-minimize and polynomialize small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file: experiment config, fit config for fit-poly, experiment config or sweep spec for ablate.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stage: last stage for `pipeline`, checkpoint to read for `verify`, `depth` and `eval`.
    #[arg(long, global = true)]
    stage: Option<String>,
    /// Built-in config used when --config is absent.
    #[arg(long, global = true, value_enum, default_value = "char-lm")]
    preset: Preset,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a polynomial approximation and write its coefficients and error curve.
    FitPoly,
    /// Train the HE-friendly architecture from scratch.
    Train,
    /// Range-minimization fine-tune from the baseline checkpoint.
    RangeTrain,
    /// Convert the range-trained checkpoint to a polynomial model.
    Convert,
    /// Check that a checkpoint lowers to additions and multiplications only.
    Verify,
    /// Multiplicative depth and bootstrap count of a checkpoint.
    Depth,
    /// Test-split metrics of a checkpoint.
    Eval,
    /// Run all configured stages.
    Pipeline,
    /// Run an ablation sweep and write a CSV table.
    Ablate {
        /// Built-in sweep used when --config is absent.
        #[arg(long, value_enum, default_value = "scaling")]
        sweep: Sweep,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    CharLm,
    SynthImage,
    CharLmFixture,
    SynthImageFixture,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Scaling,
    Batchnorm,
}

enum Failure {
    Config(String),
    Stage(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::Checkpoint(_) => Failure::Config(e.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn read_json(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json(&read_json(p)?)?,
        None => match cli.preset {
            Preset::CharLm => ExperimentConfig::char_lm(),
            Preset::SynthImage => ExperimentConfig::synth_image(),
            Preset::CharLmFixture => ExperimentConfig::char_lm_fixture(),
            Preset::SynthImageFixture => ExperimentConfig::synth_image_fixture(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("runs").join(&cfg.name));
    }
    Ok(cfg)
}

fn stage_arg(cli: &Cli) -> Result<Option<PipelineStage>, Failure> {
    cli.stage.as_deref().map(PipelineStage::parse).transpose().map_err(Failure::from)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(name), contents))
        .map_err(|e| Failure::Stage(format!("cannot write {name}: {e}")))
}

fn finish(report: &RunReport) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(&report.metrics_view()["stages"]).unwrap_or_default());
    if let Some(c) = &report.conversion {
        println!(
            "verify={} depth={} bootstraps={} agreement={:.4} metric_delta={:.6}",
            if c.verification_pass { "pass" } else { "fail" },
            c.depth.max_depth,
            c.depth.bootstraps,
            c.fidelity.agreement,
            c.fidelity.metric_delta
        );
    }
    if let Some(f) = &report.failure {
        return Err(Failure::Stage(f.clone()));
    }
    match &report.conversion {
        Some(c) if !c.verification_pass => Err(Failure::Verify(format!("{} non-polynomial nodes remain", c.violations))),
        _ => Ok(()),
    }
}

fn single_stage(cli: &Cli, stage: PipelineStage) -> Result<(), Failure> {
    let mut cfg = experiment(cli)?;
    cfg.stages = vec![stage];
    finish(&run_pipeline(&cfg)?)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::FitPoly => {
            let cfg: FitConfig = match &cli.config {
                Some(p) => serde_json::from_str(&read_json(p)?).map_err(|e| Failure::Config(e.to_string()))?,
                None => FitConfig::default(),
            };
            let (poly, curve) = fit_poly(&cfg)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            write(&out, "poly.json", &poly.to_json())?;
            let mut csv = Vec::new();
            curve.write_csv(&mut csv).map_err(|e| Failure::Stage(e.to_string()))?;
            write(&out, "error_curve.csv", &String::from_utf8_lossy(&csv))?;
            println!("linf={:e} l1={:e} depth={}", curve.linf, curve.l1, composite_depth(&poly)?);
            Ok(())
        }
        Command::Train => single_stage(cli, PipelineStage::Baseline),
        Command::RangeTrain => single_stage(cli, PipelineStage::RangeMin),
        Command::Convert => single_stage(cli, PipelineStage::Convert),
        Command::Verify | Command::Depth => {
            let cfg = experiment(cli)?;
            let model = stage_model(&cfg, stage_arg(cli)?.unwrap_or(PipelineStage::Convert))?;
            let (_, verification, depth) = inspect_model(&cfg, &model)?;
            let dir = cfg.out_dir.as_deref().expect("experiment() sets an output directory");
            if matches!(cli.command, Command::Depth) {
                write(dir, "depth.json", &depth.to_json())?;
                println!("{}", depth.to_json());
                return Ok(());
            }
            write(dir, "violations.txt", &verification.to_text())?;
            print!("{}", verification.to_text());
            if verification.pass {
                println!("pass");
                Ok(())
            } else {
                Err(Failure::Verify(format!("{} non-polynomial nodes", verification.violations.len())))
            }
        }
        Command::Eval => {
            let cfg = experiment(cli)?;
            let stage = match stage_arg(cli)? {
                Some(s) => s,
                None => latest_stage(&cfg)?,
            };
            let model = stage_model(&cfg, stage)?;
            let metrics = evaluate_model(&cfg, &model, cfg.baseline.eval_examples)?;
            let json = serde_json::to_string_pretty(&metrics).map_err(|e| Failure::Stage(e.to_string()))?;
            let dir = cfg.out_dir.as_deref().expect("experiment() sets an output directory");
            write(dir, &format!("metrics_{}.json", stage.as_str()), &json)?;
            println!("{json}");
            Ok(())
        }
        Command::Pipeline => {
            let mut cfg = experiment(cli)?;
            if let Some(s) = stage_arg(cli)? {
                cfg.truncate_to(s)?;
            }
            finish(&run_pipeline(&cfg)?)
        }
        Command::Ablate { sweep } => {
            let mut spec = match &cli.config {
                Some(p) if is_sweep_spec(&read_json(p)?)? => AblationSpec::from_json(&read_json(p)?)?,
                _ => {
                    let base = experiment(cli)?;
                    match sweep {
                        Sweep::Scaling => AblationSpec::scaling(base),
                        Sweep::Batchnorm => AblationSpec::batchnorm(base),
                    }
                }
            };
            if let Some(o) = &cli.out {
                spec.base.out_dir = Some(o.clone());
            }
            if let Some(s) = stage_arg(cli)? {
                spec.base.truncate_to(s)?;
            }
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            let (table, _) = run_ablation(&spec)?;
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

fn is_sweep_spec(json: &str) -> Result<bool, Failure> {
    let v: serde_json::Value = serde_json::from_str(json).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(v.get("variants").is_some())
}

fn latest_stage(cfg: &ExperimentConfig) -> Result<PipelineStage, Failure> {
    let dir = cfg.out_dir.as_deref().expect("experiment() sets an output directory");
    PipelineStage::ALL
        .into_iter()
        .rev()
        .find(|s| polyformer::harness::checkpoint_path(dir, *s).is_file())
        .ok_or_else(|| Failure::Config(format!("no checkpoints under {}", dir.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("stage failure: {m}");
            ExitCode::from(EXIT_STAGE)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failure: {m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
