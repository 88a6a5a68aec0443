//! Subcommand implementations shared by the binary and the tests.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use clarity_core::autodiff::set_conv_backward_fault;
use clarity_core::dataset::{synth_dataset, write_dataset};

use crate::ablate::{run_suite, Suite};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::gradcheck;
use crate::report::Report;
use crate::runner::{evaluate_split, load_data, load_model, run, save_params};

#[derive(Debug, Parser)]
#[command(name = "clarity", version, about = "RGB-thermal segmentation: training, evaluation, ablations, gradient checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, evaluate on the held-out split and write a report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the report and parameters.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the parameters of a finished training run.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory to evaluate instead of the run's own.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Evaluate the training split instead of the held-out split.
        #[arg(long)]
        train_split: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one ablation suite over several seeds.
    Ablate {
        /// components, gating or prompts.
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        /// Deliberately break one backward pass (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic dataset stratified over the five conditions.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; a report.txt is accepted as well.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Attention prior: none, hard or soft.
    #[arg(long)]
    pub gating: Option<String>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// static, random or condition.
    #[arg(long)]
    pub router: Option<String>,
    /// true or false.
    #[arg(long)]
    pub calibrator: Option<String>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        let flags = [
            ("gating", self.gating.clone()),
            ("experts", self.experts.map(|v| v.to_string())),
            ("top_k", self.topk.map(|v| v.to_string())),
            ("router", self.router.clone()),
            ("calibrator", self.calibrator.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(&str)) -> CliResult<Report> {
    ensure_dir(out)?;
    let data = load_data(cfg)?;
    log(&format!("training on {} scenes, evaluating on {}", data.train.len(), data.test.len()));
    let outcome = run(cfg, &data, |l| {
        log(&format!("epoch {:>3}  loss {:.5}  lr {:.3e}", l.epoch, l.loss, l.lr_end))
    })?;
    let report = Report::from_outcome(&outcome);
    report.write(out, Some(outcome.elapsed))?;
    save_params(&out.join("params"), &outcome.params)?;
    Ok(report)
}

pub fn cmd_eval(run_dir: &Path, dataset: Option<&Path>, train_split: bool, out: &Path) -> CliResult<Report> {
    let text = fs::read_to_string(run_dir.join("config.echo"))
        .map_err(|e| CliError::Usage(format!("{} is not a training run: {e}", run_dir.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(d) = dataset {
        cfg.dataset = Some(d.to_path_buf());
    }
    let (model, params) = load_model(&cfg, &run_dir.join("params"))?;
    let data = load_data(&cfg)?;
    let samples = if train_split || data.test.is_empty() { &data.train } else { &data.test };
    let evaluation = evaluate_split(&cfg, &model, &params, samples)?;
    let report = Report::new(cfg, Vec::new(), &evaluation);
    ensure_dir(out)?;
    report.write(out, None)?;
    Ok(report)
}

pub fn cmd_ablate(suite: &str, base: &RunConfig, replicates: usize, out: &Path, log: &mut dyn FnMut(&str)) -> CliResult<()> {
    let suite = Suite::from_key(suite)
        .ok_or_else(|| CliError::Usage(format!("unknown suite {suite:?}; expected components, gating or prompts")))?;
    ensure_dir(out)?;
    let data = load_data(base)?;
    let result = run_suite(suite, base, &data, replicates, None, |m| log(m))?;
    let write = |name: &str, body: String| {
        fs::write(out.join(name), body).map_err(|e| CliError::Usage(format!("cannot write {name}: {e}")))
    };
    write("report.txt", result.to_text())?;
    write("report.csv", result.to_csv())?;
    write("config.echo", base.to_string())?;
    log(&result.to_text());
    Ok(())
}

/// Runs the sweep; a corrupted block name enables the matching fault first.
pub fn cmd_gradcheck(corrupt: Option<&str>) -> CliResult<(String, bool)> {
    match corrupt {
        None => {}
        Some("conv2d") => set_conv_backward_fault(true),
        Some(other) => return Err(CliError::Usage(format!("no fault injection available for {other:?}"))),
    }
    let results = gradcheck::run_all();
    set_conv_backward_fault(false);
    let results = results?;
    let ok = results.iter().all(|r| r.passed());
    let mut text = gradcheck::render(&results);
    if !ok {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        text.push_str(&format!("failed: {}\n", failed.join(", ")));
    }
    Ok((text, ok))
}

pub fn cmd_synth(count: usize, size: usize, out: &Path, seed: u64, test_fraction: f64) -> CliResult<usize> {
    if size != 32 && size != 64 {
        return Err(CliError::Usage(format!("size must be 32 or 64, got {size}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CliError::Usage(format!("test fraction {test_fraction} outside [0,1)")));
    }
    let ds = synth_dataset(count, size, seed, test_fraction)?;
    ensure_dir(out)?;
    write_dataset(out, &ds).map_err(|e| CliError::Usage(format!("cannot write dataset to {}: {e}", out.display())))?;
    Ok(ds.train.len() + ds.test.len())
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let mut log = |m: &str| eprintln!("{m}");
    let result: CliResult<i32> = (|| match cli.command {
        Command::Train { config, out } => {
            let cfg = config.resolve()?;
            let report = cmd_train(&cfg, &out, &mut log)?;
            println!("{}", crate::report::class_table(&report.metrics));
            Ok(0)
        }
        Command::Eval {
            run,
            dataset,
            train_split,
            out,
        } => {
            let report = cmd_eval(&run, dataset.as_deref(), train_split, &out)?;
            println!("{}", crate::report::class_table(&report.metrics));
            Ok(0)
        }
        Command::Ablate {
            suite,
            config,
            replicates,
            out,
        } => {
            let cfg = config.resolve()?;
            cmd_ablate(&suite, &cfg, replicates, &out, &mut log)?;
            Ok(0)
        }
        Command::Gradcheck { corrupt } => {
            let (text, ok) = cmd_gradcheck(corrupt.as_deref())?;
            print!("{text}");
            Ok(if ok { 0 } else { 1 })
        }
        Command::Synth {
            count,
            size,
            out,
            seed,
            test_fraction,
        } => {
            let n = cmd_synth(count, size, &out, seed, test_fraction)?;
            println!("wrote {n} scenes to {}", out.display());
            Ok(0)
        }
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
