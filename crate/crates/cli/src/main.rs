//! `cil`: run class-incremental experiments from the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cil_core::harness::experiment::{SampleRef, TraceSink};
use cil_core::harness::{self, report, studies, RunConfig, StreamSource, SynthSpec};
use cil_core::inference::{EnergyMode, PredictionTrace, Strategy};
use cil_core::memory::CovarianceMode;
use cil_core::{CilError, ErrorCategory};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "cil", version, about = "Exemplar-free class-incremental learning over embedding streams")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// Component grid: baseline, MoP only, adapters only, both.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        multi: MultiArgs,
    },
    /// Compare the entropy, max and energy selection strategies.
    Strategies {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        multi: MultiArgs,
    },
    /// Sweep the projector count and the pseudo-feature count.
    Sensitivity {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        multi: MultiArgs,
        /// Projector counts to try.
        #[arg(long, value_delimiter = ',', default_values_t = studies::DEFAULT_PROJECTOR_COUNTS)]
        projectors: Vec<usize>,
        /// Pseudo-features per class to try.
        #[arg(long, value_delimiter = ',', default_values_t = studies::DEFAULT_PSEUDO_COUNTS)]
        pseudo: Vec<usize>,
    },
    /// Run and dump per-sample prediction traces as JSON lines.
    Inspect {
        #[command(flatten)]
        run: RunArgs,
        /// Dump every evaluation step instead of only the last.
        #[arg(long)]
        all_steps: bool,
        /// At most this many samples per step.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Check an embedding file against the format and the stream contract.
    Validate { file: PathBuf },
    /// Recompute a run's report from its checkpoints.
    Regenerate {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint root; defaults to <output-dir>/checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Write the configured synthetic stream to an embedding file.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        /// Destination file.
        file: PathBuf,
    },
}

#[derive(Args, Clone)]
struct MultiArgs {
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Concurrent runs (defaults to the number of cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Full,
    Diagonal,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnergyArg {
    TauScaled,
    RawCosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Entropy,
    Max,
    Energy,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Entropy => Strategy::Entropy,
            StrategyArg::Max => Strategy::Max,
            StrategyArg::Energy => Strategy::Energy,
        }
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for reports, plot data and checkpoints.
    #[arg(long, env = "CIL_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Pseudo-features drawn per stored class for Stage-II.
    #[arg(long)]
    pseudo_per_class: Option<usize>,
    /// Adapter bottleneck width.
    #[arg(long)]
    adapter_rank: Option<usize>,
    #[arg(long)]
    num_projectors: Option<usize>,
    #[arg(long)]
    projector_hidden: Option<usize>,
    /// Similarity temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Re-initialize the MoP before every Stage-II.
    #[arg(long)]
    mop_cold_start: bool,
    #[arg(long, value_enum)]
    covariance: Option<CovarianceArg>,

    /// Read the stream from an embedding file instead of generating one.
    #[arg(long, conflicts_with_all = ["synth_tasks", "synth_classes", "synth_dim", "synth_train", "synth_test", "synth_noise", "synth_separation", "synth_rho", "synth_text_noise", "synth_seed"])]
    stream_file: Option<PathBuf>,
    #[arg(long)]
    synth_tasks: Option<usize>,
    #[arg(long)]
    synth_classes: Option<usize>,
    #[arg(long)]
    synth_dim: Option<usize>,
    /// Training samples per class.
    #[arg(long)]
    synth_train: Option<usize>,
    /// Test samples per class.
    #[arg(long)]
    synth_test: Option<usize>,
    #[arg(long)]
    synth_noise: Option<f64>,
    #[arg(long)]
    synth_separation: Option<f64>,
    /// Cross-task confusability in [0, 1].
    #[arg(long)]
    synth_rho: Option<f64>,
    #[arg(long)]
    synth_text_noise: Option<f64>,
    #[arg(long)]
    synth_seed: Option<u64>,

    /// Selection strategies; the first is the headline.
    #[arg(long, value_enum, value_delimiter = ',')]
    strategies: Option<Vec<StrategyArg>>,
    /// Use identity adapters (no Stage-I training).
    #[arg(long)]
    no_adapters: bool,
    /// Use an identity MoP (no Stage-II training).
    #[arg(long)]
    no_mop: bool,
    #[arg(long, value_enum)]
    energy_mode: Option<EnergyArg>,
    /// Checkpoint after every n-th task; 0 disables checkpoints.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

const DEFAULT_OUTPUT_DIR: &str = "cil-output";

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CilError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let t = &mut c.train;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            seed => t.seed,
            stage1_epochs => t.stage1_epochs,
            stage2_epochs => t.stage2_epochs,
            lr => t.lr,
            weight_decay => t.weight_decay,
            batch_size => t.batch_size,
            pseudo_per_class => t.pseudo_per_class,
            adapter_rank => t.adapter_rank,
            num_projectors => t.num_projectors,
            tau => t.tau,
        );
        if let Some(h) = self.projector_hidden {
            t.projector_hidden = Some(h);
        }
        if self.mop_cold_start {
            t.mop_cold_start = true;
        }
        if let Some(cov) = self.covariance {
            t.covariance = match cov {
                CovarianceArg::Full => CovarianceMode::Full,
                CovarianceArg::Diagonal => CovarianceMode::Diagonal,
            };
        }

        if let Some(path) = &self.stream_file {
            c.stream = StreamSource::File { path: path.clone() };
        } else {
            let touched = self.synth_tasks.is_some()
                || self.synth_classes.is_some()
                || self.synth_dim.is_some()
                || self.synth_train.is_some()
                || self.synth_test.is_some()
                || self.synth_noise.is_some()
                || self.synth_separation.is_some()
                || self.synth_rho.is_some()
                || self.synth_text_noise.is_some()
                || self.synth_seed.is_some();
            if touched {
                let mut spec = match &c.stream {
                    StreamSource::Synthetic(s) => s.clone(),
                    StreamSource::File { .. } => SynthSpec::default(),
                };
                set!(
                    synth_tasks => spec.tasks,
                    synth_classes => spec.classes_per_task,
                    synth_dim => spec.dim,
                    synth_train => spec.train_per_class,
                    synth_test => spec.test_per_class,
                    synth_noise => spec.noise_std,
                    synth_separation => spec.separation,
                    synth_rho => spec.rho,
                    synth_text_noise => spec.text_noise,
                );
                if let Some(s) = self.synth_seed {
                    spec.seed = Some(s);
                }
                c.stream = StreamSource::Synthetic(spec);
            }
        }

        if let Some(list) = &self.strategies {
            c.strategies = list.iter().map(|&s| s.into()).collect();
        }
        if self.no_adapters {
            c.use_adapters = false;
        }
        if self.no_mop {
            c.use_mop = false;
        }
        if let Some(e) = self.energy_mode {
            c.energy_mode = match e {
                EnergyArg::TauScaled => EnergyMode::TauScaled,
                EnergyArg::RawCosine => EnergyMode::RawCosine,
            };
        }
        if let Some(n) = self.checkpoint_every {
            c.checkpoint_every = n;
        }
        if let Some(dir) = &self.output_dir {
            c.output_dir = Some(dir.clone());
        } else if c.output_dir.is_none() {
            c.output_dir = Some(PathBuf::from(DEFAULT_OUTPUT_DIR));
        }
        c.validate()?;
        Ok(c)
    }
}

fn output_dir(c: &RunConfig) -> PathBuf {
    c.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

struct JsonlTraces {
    out: BufWriter<File>,
    only_step: Option<usize>,
    limit: Option<usize>,
    written: Vec<usize>,
}

impl TraceSink for JsonlTraces {
    fn record(&mut self, step: usize, sample: &SampleRef, trace: &PredictionTrace) -> cil_core::Result<()> {
        if self.only_step.is_some_and(|s| s != step) {
            return Ok(());
        }
        if self.written.len() <= step {
            self.written.resize(step + 1, 0);
        }
        if self.limit.is_some_and(|l| self.written[step] >= l) {
            return Ok(());
        }
        self.written[step] += 1;
        let line = serde_json::json!({ "step": step, "sample": sample, "trace": trace });
        writeln!(self.out, "{line}")?;
        Ok(())
    }
}

enum Failure {
    Core(CilError),
    Run(Box<harness::RunFailure>),
}

impl From<CilError> for Failure {
    fn from(e: CilError) -> Self {
        Failure::Core(e)
    }
}

impl From<Box<harness::RunFailure>> for Failure {
    fn from(e: Box<harness::RunFailure>) -> Self {
        Failure::Run(e)
    }
}

fn write(path: &Path, text: &str) -> Result<(), CilError> {
    harness::write_atomic(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let dir = output_dir(&cfg);
            let artifacts = harness::execute(&cfg, None)?;
            harness::write_run_outputs(&dir, &artifacts)?;
            print!("{}", report::render_run(&artifacts.report));
        }
        Command::Ablate { run, multi } => {
            let cfg = run.resolve()?;
            let dir = output_dir(&cfg);
            let jobs = multi.jobs.unwrap_or_else(studies::default_jobs);
            let (ablation, runs) = studies::run_ablation(&cfg, &multi.seeds, jobs)?;
            write(&dir.join("ablation.json"), &to_json(&ablation))?;
            write(&dir.join("ablation.txt"), &report::render_ablation(&ablation))?;
            write(&dir.join("ablation_curves.tsv"), &report::ablation_curves_tsv(&ablation))?;
            for r in &runs {
                write(&dir.join("runs").join(format!("{}_seed{}.json", r.variant, r.seed)), &r.to_json())?;
            }
            print!("{}", report::render_ablation(&ablation));
        }
        Command::Strategies { run, multi } => {
            let cfg = run.resolve()?;
            let dir = output_dir(&cfg);
            let jobs = multi.jobs.unwrap_or_else(studies::default_jobs);
            let (cmp, runs) = studies::run_strategies(&cfg, &multi.seeds, jobs)?;
            write(&dir.join("strategies.json"), &to_json(&cmp))?;
            write(&dir.join("strategies.txt"), &report::render_strategies(&cmp))?;
            write(&dir.join("strategy_curves.tsv"), &report::strategy_curves_tsv(&cmp))?;
            for r in &runs {
                write(&dir.join("runs").join(format!("strategies_seed{}.json", r.seed)), &r.to_json())?;
            }
            print!("{}", report::render_strategies(&cmp));
        }
        Command::Sensitivity { run, multi, projectors, pseudo } => {
            let cfg = run.resolve()?;
            let dir = output_dir(&cfg);
            let jobs = multi.jobs.unwrap_or_else(studies::default_jobs);
            let sens = studies::run_sensitivity(&cfg, &multi.seeds, &projectors, &pseudo, jobs)?;
            write(&dir.join("sensitivity.json"), &to_json(&sens))?;
            write(&dir.join("sensitivity.txt"), &report::render_sensitivity(&sens))?;
            write(&dir.join("sensitivity.tsv"), &report::sensitivity_tsv(&sens))?;
            print!("{}", report::render_sensitivity(&sens));
        }
        Command::Inspect { run, all_steps, limit } => {
            let cfg = run.resolve()?;
            let dir = output_dir(&cfg);
            std::fs::create_dir_all(&dir).map_err(CilError::from)?;
            let (stream, info) = harness::experiment::build_stream(&cfg)?;
            let last = stream.num_tasks() - 1;
            let final_path = dir.join("traces.jsonl");
            let tmp_path = dir.join(".traces.jsonl.tmp");
            let file = File::create(&tmp_path).map_err(CilError::from)?;
            let mut sink = JsonlTraces {
                out: BufWriter::new(file),
                only_step: if all_steps { None } else { Some(last) },
                limit,
                written: Vec::new(),
            };
            let artifacts = harness::experiment::execute_on(&cfg, stream, info, Some(&mut sink))?;
            sink.out.flush().map_err(CilError::from)?;
            drop(sink);
            std::fs::rename(&tmp_path, &final_path).map_err(CilError::from)?;
            harness::write_run_outputs(&dir, &artifacts)?;
            log::info!("wrote {}", final_path.display());
            print!("{}", report::render_run(&artifacts.report));
        }
        Command::Validate { file } => {
            let summary = harness::validate_file(&file)?;
            println!("{}: ok", file.display());
            println!("{}", to_json(&summary));
        }
        Command::Regenerate { run, checkpoints } => {
            let cfg = run.resolve()?;
            let dir = output_dir(&cfg);
            let root = checkpoints.unwrap_or_else(|| dir.join("checkpoints"));
            let r = harness::regenerate_report(&cfg, &root)?;
            write(&dir.join("report.regenerated.json"), &r.to_json())?;
            print!("{}", report::render_run(&r));
        }
        Command::Synth { run, file } => {
            let cfg = run.resolve()?;
            let spec = match &cfg.stream {
                StreamSource::Synthetic(s) => s.clone(),
                StreamSource::File { .. } => {
                    return Err(CilError::Config("synth needs a synthetic stream, not --stream-file".into()).into())
                }
            };
            let stream = harness::synth_stream(&spec, cfg.train.seed)?;
            let crc = harness::save_stream(&stream, &file)?;
            println!("{}: {} tasks, dim {}, crc32 {crc:08x}", file.display(), stream.num_tasks(), stream.dim());
        }
    }
    Ok(())
}

fn exit_code(e: &CilError) -> u8 {
    match e.category() {
        ErrorCategory::Config => EXIT_CONFIG,
        ErrorCategory::Data => EXIT_DATA,
        ErrorCategory::Divergence => EXIT_DIVERGENCE,
        ErrorCategory::Other => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Run(f)) => {
            eprintln!("error: {}", f.error);
            if let Some(p) = &f.partial {
                eprintln!("{} task(s) completed before the failure", p.completed_tasks);
            }
            ExitCode::from(exit_code(&f.error))
        }
    }
}
