use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use adaptive_ensemble::complexity::{
    efficientnet_b0_descriptor, model_complexity, pipeline_cost, ComplexityReport, CostModel, FlopConvention,
};
use adaptive_ensemble::config::ExperimentConfig;
use adaptive_ensemble::data::SplitTag;
use adaptive_ensemble::ensemble::{summarize, REPORT_HEADER};
use adaptive_ensemble::error::{Error, Result};
use adaptive_ensemble::model::{eff_tiny_base, FeatureShape, LayerSpec};
use adaptive_ensemble::pipeline::{self, REPORT_CSV, SPLIT_FILE};

#[derive(Parser)]
#[command(name = "aens", version, about = "Adaptive feature-level ensembles of compact CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Descriptor {
    /// EfficientNet-b0 at ImageNet scale.
    B0,
    /// The desk-scale weak-learner backbone.
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Train,
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bagging split of the training set.
    Split(Common),
    /// Phase 1: overfit one weak learner per bag.
    TrainWeak(Common),
    /// Phase 2: fine-tune the ensemble over `ensemble_module_list`.
    TrainEnsemble(Common),
    /// Phase 1 then phase 2.
    Run(Common),
    /// Score a weak or ensemble checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Parameter and FLOP counts of a descriptor, as a report row.
    Complexity {
        #[arg(long, value_enum, default_value = "b0")]
        model: Descriptor,
        /// Square input resolution; defaults to 224 for b0 and 32 otherwise.
        #[arg(long)]
        input: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        /// Count a multiply-accumulate as two FLOPs.
        #[arg(long)]
        flops_x2: bool,
    },
    /// Per-image training cost of the two-phase pipeline.
    CostModel {
        #[arg(long, default_value_t = 0.39e9)]
        flops_fwd: f64,
        #[arg(long, default_value_t = 0.39e9)]
        flops_back: f64,
        /// Trainable parameters of one weak learner.
        #[arg(long, default_value_t = 5.0e6)]
        params: f64,
        #[arg(long, default_value_t = 1.0e5)]
        head_params: f64,
        #[arg(short = 'a', default_value_t = 2)]
        a: u32,
        #[arg(short = 'b', default_value_t = 5)]
        b: u32,
        #[arg(short = 'n', default_value_t = 2)]
        n: u32,
        #[arg(long)]
        parallel: bool,
    },
    /// Rebuild the text summary from `report.csv` in the output directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn complexity_row(name: &str, r: &ComplexityReport) -> String {
    format!("{name},,,,{},{},{}", r.params_total, r.params_trainable, r.flops_fwd)
}

fn run(cli: Cli) -> Result<String> {
    let mut out = String::new();
    match cli.command {
        Command::Split(c) => {
            let cfg = c.load()?;
            let splits = pipeline::load_splits(&cfg)?;
            let plan = pipeline::make_split(&cfg, &splits.train)?;
            std::fs::create_dir_all(&c.out).map_err(|e| io(&c.out, e))?;
            let path = c.out.join(SPLIT_FILE);
            plan.save(&path)?;
            writeln!(out, "{}: subset sizes {:?}", path.display(), plan.sizes()).unwrap();
        }
        Command::TrainWeak(c) => out += &json(&pipeline::run_phase1(&c.load()?, &c.out)?),
        Command::TrainEnsemble(c) => {
            let phase2 = pipeline::run_phase2(&c.load()?, &c.out)?;
            out += &std::fs::read_to_string(&phase2.report_txt).map_err(|e| io(&phase2.report_txt, e))?;
            writeln!(
                out,
                "ensemble checkpoint: {} (seed {})",
                phase2.ensemble.display(),
                phase2.best_seed
            )
            .unwrap();
        }
        Command::Run(c) => {
            let (_, phase2) = pipeline::run_pipeline(&c.load()?, &c.out)?;
            out += &summarize(&phase2.rows);
            writeln!(
                out,
                "ensemble checkpoint: {} (seed {})",
                phase2.ensemble.display(),
                phase2.best_seed
            )
            .unwrap();
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.load()?;
            let splits = pipeline::load_splits(&cfg)?;
            let tag = match split {
                EvalSplit::Train => SplitTag::Train,
                EvalSplit::Valid => SplitTag::Valid,
                EvalSplit::Test => SplitTag::Test,
            };
            out += &json(&pipeline::evaluate(&checkpoint, splits.get(tag), &cfg)?);
        }
        Command::Complexity {
            model,
            input,
            classes,
            flops_x2,
        } => {
            let (name, mut specs, size) = match model {
                Descriptor::B0 => ("efficientnet_b0", efficientnet_b0_descriptor(), input.unwrap_or(224)),
                Descriptor::Tiny => ("tiny", eff_tiny_base(), input.unwrap_or(32)),
            };
            if let Some(LayerSpec::Linear { out_features, .. }) = specs.last_mut() {
                *out_features = classes;
            } else {
                let features = adaptive_ensemble::model::propagate(&specs, map(size))?.elements();
                specs.push(LayerSpec::Linear {
                    in_features: features,
                    out_features: classes,
                });
            }
            let convention = if flops_x2 {
                FlopConvention::Double
            } else {
                FlopConvention::Mac
            };
            let report = model_complexity(&specs, map(size), &[])?.with_convention(convention);
            writeln!(out, "{REPORT_HEADER}").unwrap();
            writeln!(out, "{}", complexity_row(name, &report)).unwrap();
        }
        Command::CostModel {
            flops_fwd,
            flops_back,
            params,
            head_params,
            a,
            b,
            n,
            parallel,
        } => {
            let model = CostModel {
                a,
                b,
                n,
                flops_fwd,
                flops_back,
                params,
                head_params,
            };
            let summary = pipeline_cost(&model, parallel)?;
            for (term, v) in &summary.terms {
                writeln!(out, "{term:<20} {v:>16.0}").unwrap();
            }
            writeln!(out, "{:<20} {:>16.0}", "total", summary.total).unwrap();
            writeln!(out, "total GFLOPs per image: {:.4}", summary.total / 1e9).unwrap();
        }
        Command::Report { out: dir } => {
            let path = dir.join(REPORT_CSV);
            let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
            let rows = pipeline::parse_report_csv(&text)?;
            let (_, txt) = pipeline::emit_report(&rows, &dir)?;
            out += &std::fs::read_to_string(&txt).map_err(|e| io(&txt, e))?;
        }
    }
    Ok(out)
}

fn map(size: usize) -> FeatureShape {
    FeatureShape::Map {
        channels: 3,
        height: size,
        width: size,
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(text) => {
            // a closed pipe (`aens ... | head`) is not a failure
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("[{}] {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
