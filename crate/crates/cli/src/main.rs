use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gcp_core::cost::ObjectiveKind;
use gcp_core::data::{synthetic_cifar, write_cifar, SyntheticSpec};
use gcp_core::gcp::{finetune, model_cost};
use gcp_core::io::{
    bench_latency, load_model, load_objective, metrics_csv, pattern_between, pattern_csv, pattern_svg, prepare_data,
    prune_command, save_model, train_command, BenchConfig, Checkpoint, PreparedData, RunConfig,
};
use gcp_core::network::effective_spec;
use gcp_core::train::evaluate;

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "GCP_NUM_THREADS";

#[derive(Parser)]
#[command(name = "gcp", version, about = "Global channel pruning of small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    objective: Option<ObjectiveKind>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from random initialization.
    Train,
    /// Run the pruning loop on a trained model.
    Prune {
        #[arg(long)]
        model: PathBuf,
    },
    /// Continue training a (pruned) model with the fine-tune schedule.
    Finetune {
        #[arg(long)]
        model: PathBuf,
    },
    /// Top-1 and top-5 accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Cost breakdown, optionally with the reduction against a reference.
    Cost {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Per-layer keep pattern as CSV and SVG.
    Plot {
        #[arg(long)]
        model: PathBuf,
        /// Unpruned model to compare a materialized one against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Measure per-convolution latency over a grid of widths.
    BenchLatency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Width fractions in (0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
        grid: Vec<f64>,
    },
    /// Write a synthetic CIFAR-10-format dataset and a config using it.
    SynthData {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 2_000)]
        test_samples: usize,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let path = self.config.as_ref().context("this command needs --config")?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
            cfg.gcp.seed = s;
            cfg.gcp.finetune.seed = s;
        }
        if let Some(o) = self.objective {
            cfg.gcp.objective = o;
        }
        if let Some(e) = self.eta {
            cfg.gcp.eta = e;
        }
        if let Some(t) = self.iterations {
            cfg.gcp.iterations = t;
        }
        if let Some(l) = self.lambda {
            cfg.gcp.lambda = l;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.gcp.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = match (&self.out, &self.config) {
            (Some(o), _) => o.clone(),
            (None, Some(_)) => self.run_config()?.out,
            (None, None) => bail!("this command needs --out"),
        };
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn data_for(cfg: &RunConfig, ckpt: Option<&Checkpoint>) -> Result<PreparedData> {
    Ok(prepare_data(
        &cfg.data,
        cfg.seed,
        ckpt.and_then(|c| c.normalization.as_ref()),
    )?)
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    train_command(&cfg, |r| {
        eprintln!(
            "epoch {} loss {:.4}{}",
            r.epoch,
            r.train_loss,
            r.eval_top1.map(|a| format!(" top1 {a:.4}")).unwrap_or_default()
        )
    })?;
    Ok(())
}

fn cmd_prune(cli: &Cli, model_path: &Path) -> Result<()> {
    let cfg = cli.run_config()?;
    let history = prune_command(&cfg, model_path, |r| {
        eprintln!(
            "iteration {} lambda {} removed {:.0} of budget {:.0}, kept {:?}",
            r.iteration,
            r.lambda,
            r.achieved(),
            r.budget,
            r.kept_per_group
        )
    })?;
    eprintln!(
        "cost {} -> {} (target {})",
        history.original_cost,
        history.final_cost.unwrap_or(f64::NAN),
        history.target_cost()
    );
    Ok(())
}

fn cmd_finetune(cli: &Cli, model_path: &Path) -> Result<()> {
    let cfg = cli.run_config()?;
    let ckpt = load_model(model_path)?;
    let data = data_for(&cfg, Some(&ckpt))?;
    let mut model = ckpt.model.clone();
    let records = finetune(&mut model, &data.train, &cfg.gcp.finetune, data.test.as_ref())?;
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out.join("finetune_metrics.csv"), &metrics_csv(&records))?;
    save_model(&cfg.out.join("finetuned"), &Checkpoint { model, ..ckpt })?;
    Ok(())
}

fn cmd_eval(cli: &Cli, model_path: &Path, split: Split) -> Result<()> {
    let cfg = cli.run_config()?;
    let ckpt = load_model(model_path)?;
    let data = data_for(&cfg, Some(&ckpt))?;
    let set = match split {
        Split::Train => &data.train,
        Split::Test => data.test.as_ref().context("the config lists no test files")?,
    };
    let r = evaluate(&ckpt.model, set, 256)?;
    println!("samples {}", r.samples);
    println!("loss {:.6}", r.loss);
    println!("top1 {:.6}", r.top1);
    if let Some(t5) = r.top5 {
        println!("top5 {t5:.6}");
    }
    Ok(())
}

fn cmd_cost(cli: &Cli, model_path: &Path, reference: Option<&Path>) -> Result<()> {
    let kind = cli.objective.unwrap_or(ObjectiveKind::Flops);
    let table = match &cli.config {
        Some(_) => cli.run_config()?.latency_table,
        None => None,
    };
    let objective = load_objective(kind, table.as_deref())?;
    let model = load_model(model_path)?.model;
    let report = model_cost(&model, &objective)?;
    print!("{}", report.to_text());
    if let Some(r) = reference {
        let base = model_cost(&load_model(r)?.model, &objective)?;
        println!("reduction: {:.2}x", base.total / report.total);
    }
    if cli.out.is_some() {
        write(&cli.out_dir()?.join("cost.csv"), &report.to_csv())?;
    }
    Ok(())
}

fn cmd_plot(cli: &Cli, model_path: &Path, reference: Option<&Path>) -> Result<()> {
    let model = load_model(model_path)?.model;
    let rows = match reference {
        Some(r) => pattern_between(load_model(r)?.model.spec(), &effective_spec(&model))?,
        None => pattern_between(model.spec(), &effective_spec(&model))?,
    };
    let out = cli.out_dir()?;
    write(&out.join("pattern.csv"), &pattern_csv(&rows))?;
    write(&out.join("pattern.svg"), &pattern_svg(&rows))?;
    Ok(())
}

fn cmd_bench(cli: &Cli, model_path: &Path, batch: usize, repeats: usize, grid: &[f64]) -> Result<()> {
    let model = load_model(model_path)?.model;
    let report = bench_latency(
        model.spec(),
        &BenchConfig {
            batch,
            repeats,
            grid: grid.to_vec(),
            seed: cli.seed.unwrap_or(0),
        },
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write(&cli.out_dir()?.join("latency.txt"), &report.table.to_text())?;
    Ok(())
}

fn cmd_synth(cli: &Cli, samples: usize, test_samples: usize) -> Result<()> {
    let out = cli.out_dir()?;
    let seed = cli.seed.unwrap_or(0);
    for (name, n, s) in [("train.bin", samples, 2 * seed + 1), ("test.bin", test_samples, 2 * seed + 2)] {
        let raw = synthetic_cifar(&SyntheticSpec {
            samples: n,
            seed: s,
            ..SyntheticSpec::default()
        });
        write_cifar(&out.join(name), &raw)?;
    }
    let config = format!(
        "seed = {seed}\nout = \"run\"\n\n[data]\nkind = \"cifar10\"\ntrain = [\"train.bin\"]\ntest = [\"test.bin\"]\n"
    );
    write(&out.join("config.toml"), &config)?;
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::Prune { model } => cmd_prune(&cli, model),
        Command::Finetune { model } => cmd_finetune(&cli, model),
        Command::Eval { model, split } => cmd_eval(&cli, model, *split),
        Command::Cost { model, reference } => cmd_cost(&cli, model, reference.as_deref()),
        Command::Plot { model, reference } => cmd_plot(&cli, model, reference.as_deref()),
        Command::BenchLatency {
            model,
            batch,
            repeats,
            grid,
        } => cmd_bench(&cli, model, *batch, *repeats, grid),
        Command::SynthData { samples, test_samples } => cmd_synth(&cli, *samples, *test_samples),
    }
}
