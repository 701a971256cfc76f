mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "biaslab",
    version,
    about = "Language-bias experiments on a synthetic multimodal world"
)]
struct Cli {
    /// TOML file with any subset of the configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training preset: paper-lbp-7b, desk-vit or desk-dpo.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate the instruction-tuning, evaluation and preference corpora.
    GenData(GenDataArgs),
    /// Score a corpus under a reference snapshot and store the results.
    CacheRef(CacheRefArgs),
    /// Train the policy.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Greedy-decode descriptions and compute hallucination metrics.
    Eval(EvalArgs),
    /// Summarise reward / bias trajectories from dynamics logs.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
enum TrainCommand {
    /// Instruction tuning with the optional bias regulariser.
    Vit(TrainArgs),
    /// Preference optimisation with the optional bias penalty.
    Dpo(TrainArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    n_vit: Option<usize>,
    #[arg(long)]
    n_pref: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
}

#[derive(Args, Debug)]
struct CacheRefArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Reference snapshot; a fresh one is initialised from the seed when omitted.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Comma-separated conditioning modes: Multimodal, TextOnly.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Reference cache; the reference is scored live when omitted.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Regulariser weight at the first step.
    #[arg(long)]
    alpha: Option<f64>,
    /// Regulariser weight at the last step (cosine schedule).
    #[arg(long)]
    alpha_end: Option<f64>,
    /// fixed or cosine.
    #[arg(long)]
    alpha_schedule: Option<String>,
    /// L1, L1Mean, KlApprox or Contrastive.
    #[arg(long)]
    lbr: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Drop the chosen-response margin term.
    #[arg(long)]
    no_margin: bool,
    /// ChosenOnly, RejectedOnly or Both.
    #[arg(long)]
    lbp_target: Option<String>,
    /// Expanded or Compact.
    #[arg(long)]
    lbp_form: Option<String>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    snapshot_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    coords: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    end_token: Option<u32>,
    /// Judge score in [0, 6]; enables the informativeness column.
    #[arg(long)]
    judge_score: Option<f64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Dynamics logs written by `train`.
    logs: Vec<PathBuf>,
    /// Fraction of final steps averaged into terminal values.
    #[arg(long)]
    tail: Option<f64>,
}

/// Collects `(config path, value)` pairs for the flags that were given.
#[derive(Default)]
struct Overrides(Vec<(String, serde_json::Value)>);

impl Overrides {
    fn set<T: serde::Serialize>(&mut self, path: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((
                path.to_string(),
                serde_json::to_value(v).expect("flag serializes"),
            ));
        }
        self
    }
}

fn overrides(cli: &Cli) -> (Vec<(String, serde_json::Value)>, &'static str) {
    let mut o = Overrides::default();
    o.set("seed", cli.seed).set("out", cli.out.as_ref());
    let mut phase_default = "desk-vit";
    match &cli.command {
        Command::GenData(a) => {
            o.set("gen_data.n_vit", a.n_vit)
                .set("gen_data.n_pref", a.n_pref)
                .set("gen_data.n_eval", a.n_eval);
        }
        Command::CacheRef(a) => {
            o.set("cache_ref.corpus", a.corpus.as_ref())
                .set("cache_ref.snapshot", a.snapshot.as_ref())
                .set("cache_ref.modes", a.modes.as_ref())
                .set("cache_ref.output", a.output.as_ref());
        }
        Command::Train(t) => {
            let (a, phase) = match t {
                TrainCommand::Vit(a) => (a, "VIT"),
                TrainCommand::Dpo(a) => (a, "DPO"),
            };
            if phase == "DPO" {
                phase_default = "desk-dpo";
            }
            o.set("train.phase", Some(phase))
                .set("train.corpus", a.corpus.as_ref())
                .set("train.reference", a.reference.as_ref())
                .set("train.cache_path", a.cache.as_ref())
                .set("train.epochs", a.epochs)
                .set("train.batch_size", a.batch_size)
                .set("train.learning_rate", a.lr)
                .set("train.weight_decay", a.weight_decay)
                .set("train.warmup_ratio", a.warmup_ratio)
                .set("train.max_steps", a.max_steps)
                .set("train.alpha_schedule.start_value", a.alpha)
                .set(
                    "train.alpha_schedule.end_value",
                    a.alpha_end.or(a
                        .alpha
                        .filter(|_| a.alpha_schedule.as_deref() != Some("cosine"))),
                )
                .set("train.alpha_schedule.kind", a.alpha_schedule.as_ref())
                .set("train.objective.lbr_variant", a.lbr.as_ref())
                .set("train.objective.gamma", a.gamma)
                .set("train.objective.beta", a.beta)
                .set("train.objective.margin", a.no_margin.then_some(false))
                .set("train.objective.lbp_target", a.lbp_target.as_ref())
                .set("train.objective.lbp_form", a.lbp_form.as_ref())
                .set("train.log_path", a.log.as_ref())
                .set("train.snapshot_path", a.snapshot_out.as_ref());
        }
        Command::GradCheck(a) => {
            o.set("grad_check.corpus", a.corpus.as_ref())
                .set("grad_check.reference", a.reference.as_ref())
                .set("grad_check.policy", a.policy.as_ref())
                .set("grad_check.examples", a.examples)
                .set("grad_check.coords", a.coords)
                .set("grad_check.h", a.h)
                .set("grad_check.tolerance", a.tolerance)
                .set("grad_check.alpha", a.alpha)
                .set("grad_check.gamma", a.gamma);
        }
        Command::Eval(a) => {
            o.set("eval.snapshot", a.snapshot.as_ref())
                .set("eval.corpus", a.corpus.as_ref())
                .set("eval.max_len", a.max_len)
                .set("eval.end_token", a.end_token)
                .set("eval.judge_score", a.judge_score);
        }
        Command::Report(a) => {
            o.set("report.logs", (!a.logs.is_empty()).then_some(&a.logs))
                .set("report.tail", a.tail);
        }
    }
    (o.0, phase_default)
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("BIASLAB_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            CliError::Config(format!("BIASLAB_THREADS={v:?} is not a thread count"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (ov, phase_default) = overrides(&cli);
    let cfg = config::resolve(
        cli.config.as_deref(),
        cli.preset.as_deref(),
        ov,
        phase_default,
    )?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::from_io(&cfg.out, e))?;
    match cli.command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::CacheRef(_) => commands::cache_ref(&cfg),
        Command::Train(TrainCommand::Vit(_)) => commands::train(&cfg, "train vit"),
        Command::Train(TrainCommand::Dpo(_)) => commands::train(&cfg, "train dpo"),
        Command::GradCheck(_) => commands::grad_check(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Report(_) => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
