use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kf_minset::pipeline::{
    export_dataset, load_dataset, run_batch, run_online, stage_eval, stage_loops, stage_pgo, stage_sample,
    DatasetSource, RunConfig,
};
use kf_minset::sampling::SamplerMethod;
use kf_minset::Error;

#[derive(Parser)]
#[command(name = "kf-minset", version, about = "Keyframe sampling, loop closure and pose graph benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run seed (and the world seed of a synthetic dataset).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the configured methods; repeatable (all, msa, const:<m>, entropy, spaciousness).
    #[arg(long = "method")]
    methods: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as pose, descriptor and channel files.
    Synth(Common),
    /// Sample keyframes per method.
    Sample(Common),
    /// Detect and verify loops over previously sampled keyframes.
    Loops(Common),
    /// Build and optimize pose graphs from sampled keyframes and loop edges.
    Pgo(Common),
    /// Recompute the report from dumped artifacts.
    Eval(Common),
    /// Full batch pipeline.
    RunBatch(Common),
    /// Streaming pipeline with periodic re-optimization.
    RunOnline(Common),
}

enum Failure {
    Config(String),
    Pipeline(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let s_msg = s.to_string();
                if !msg.contains(&s_msg) {
                    msg = format!("{msg}: {s_msg}");
                }
                src = s.source();
            }
            Failure::Pipeline(msg)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("KF_MINSET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Config(format!("KF_MINSET_THREADS must be a non-negative integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(e.to_string()))
}

fn load(common: &Common) -> Result<(RunConfig, Option<PathBuf>), Failure> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if !common.methods.is_empty() {
        cfg.methods = common
            .methods
            .iter()
            .map(|m| m.parse::<SamplerMethod>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    out.ok_or_else(|| Failure::Config("an output directory is required (--out or output_dir)".into()))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ds = load_dataset(&cfg.dataset, &cfg.loops)?;
    let files = export_dataset(&ds, out)?;
    let source = serde_json::to_string_pretty(&DatasetSource::Files(files)).map_err(Error::from)?;
    std::fs::write(out.join("dataset.json"), source + "\n").map_err(Error::from)?;
    println!(
        "wrote {} frames ({} ground-truth loop pairs) to {}",
        ds.len(),
        ds.gt_loop_pairs.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Synth(c) => {
            let (cfg, out) = load(&c)?;
            synth(&cfg, &require_out(out)?)
        }
        Command::Sample(c) => {
            let (cfg, out) = load(&c)?;
            Ok(stage_sample(&cfg, &require_out(out)?)?)
        }
        Command::Loops(c) => {
            let (cfg, out) = load(&c)?;
            Ok(stage_loops(&cfg, &require_out(out)?)?)
        }
        Command::Pgo(c) => {
            let (cfg, out) = load(&c)?;
            Ok(stage_pgo(&cfg, &require_out(out)?)?)
        }
        Command::Eval(c) => {
            let (cfg, out) = load(&c)?;
            let report = stage_eval(&cfg, &require_out(out)?)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::RunBatch(c) => {
            let (cfg, _) = load(&c)?;
            print!("{}", run_batch(&cfg)?.render());
            Ok(())
        }
        Command::RunOnline(c) => {
            let (cfg, _) = load(&c)?;
            print!("{}", run_online(&cfg)?.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
