//! Command-line front end: `synth` and `run <task>`.

mod config;
mod output;
mod tasks;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use output::{Envelope, RunDir, ARTIFACTS_FILE, PROVENANCE_FILE, INVOCATION_FILE, TOOLKIT_VERSION};
pub use tasks::{mil_model_name, risk_model_name, OperatingPoints};

use crate::datastore::{synth_cohort_with_truth, write_cohort, SynthSpec};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "digebench", version, about = "Embedding-level pathology evaluation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (manifest, feature files, ground truth).
    Synth(CommonArgs),
    /// Run one pipeline task into an output directory.
    Run {
        task: Task,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Folds,
    SampleRois,
    TrainMil,
    EvalMil,
    Probe,
    Fewshot,
    Retrieve,
    Survival,
    ScreenCalibrate,
    ScreenApply,
    ScreenReport,
    Heatmap,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Folds => "folds",
            Task::SampleRois => "sample-rois",
            Task::TrainMil => "train-mil",
            Task::EvalMil => "eval-mil",
            Task::Probe => "probe",
            Task::Fewshot => "fewshot",
            Task::Retrieve => "retrieve",
            Task::Survival => "survival",
            Task::ScreenCalibrate => "screen-calibrate",
            Task::ScreenApply => "screen-apply",
            Task::ScreenReport => "screen-report",
            Task::Heatmap => "heatmap",
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cohort manifest (overrides `cohort`).
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Number of folds for the `folds` task.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Bootstrap replicates for confidence intervals.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Trained-model directory (overrides `inputs.model_dir`).
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    /// Arbitrary override, e.g. `--set mil.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn quote(p: &std::path::Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seed".into(), s.to_string()));
        }
        if let Some(c) = &self.cohort {
            o.push(("cohort".into(), quote(c)));
        }
        if let Some(f) = self.fold {
            o.push(("fold".into(), f.to_string()));
        }
        if let Some(k) = self.folds {
            o.push(("folds".into(), k.to_string()));
        }
        if let Some(b) = self.bootstrap {
            o.push(("bootstrap".into(), b.to_string()));
        }
        if let Some(m) = &self.model_dir {
            o.push(("inputs.model_dir".into(), quote(m)));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(o)
    }

    fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

fn cmd_synth(args: &CommonArgs) -> Result<()> {
    let cfg = args.config()?;
    cfg.require_seed("synth").or_else(|e| {
        // a seed inside [synth] is enough
        if cfg.section_table("synth")?.contains_key("seed") { Ok(0) } else { Err(e) }
    })?;
    let spec: SynthSpec = cfg.section("synth", true)?;
    spec.validate()?;
    let mut run = RunDir::create(&args.out, args.force, "synth", cfg.hash(), Some(spec.seed))?;
    let out = synth_cohort_with_truth(&spec)?;
    write_cohort(&out.cohort, run.root())?;
    run.register("manifest.jsonl")?;
    run.register(crate::datastore::COHORT_HEADER_FILE)?;
    for (i, s) in out.cohort.slides.iter().enumerate() {
        run.register(&format!("features/{i:06}.dgpf"))?;
        if s.roi_tumor_probs.is_some() {
            run.register(&format!("probs/{i:06}.jsonl"))?;
        }
    }
    run.write_report("truth.json", &out.truth)?;
    run.finish(serde_json::json!({ "spec": spec }))?;
    Ok(())
}

fn cmd_run(task: Task, args: &CommonArgs) -> Result<()> {
    let cfg = args.config()?;
    let mut run = RunDir::create(&args.out, args.force, task.name(), cfg.hash(), cfg.seed()?)?;
    match task {
        Task::Folds => tasks::folds(&cfg, &mut run),
        Task::SampleRois => tasks::sample_rois(&cfg, &mut run),
        Task::TrainMil => tasks::train_mil_task(&cfg, &mut run),
        Task::EvalMil => tasks::eval_mil(&cfg, &mut run),
        Task::Probe => tasks::probe(&cfg, &mut run),
        Task::Fewshot => tasks::fewshot(&cfg, &mut run),
        Task::Retrieve => tasks::retrieve(&cfg, &mut run),
        Task::Survival => tasks::survival(&cfg, &mut run),
        Task::ScreenCalibrate => tasks::screen_calibrate(&cfg, &mut run),
        Task::ScreenApply => tasks::screen_apply(&cfg, &mut run),
        Task::ScreenReport => tasks::screen_report(&cfg, &mut run),
        Task::Heatmap => tasks::heatmap(&cfg, &mut run),
    }?;
    run.finish(serde_json::json!({ "config": cfg.effective() }))?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run { task, common } => cmd_run(*task, common),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
