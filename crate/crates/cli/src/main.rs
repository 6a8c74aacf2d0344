use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use corridiff::config::RunConfig;
use corridiff::pipeline::{self, AblateOptions, Axis};

#[derive(Parser)]
#[command(name = "corridiff", version, about = "Route-conditioned diffusion trajectory prediction on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory; defaults to `data.dir` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArg {
    fn dir(&self, cfg: &RunConfig) -> PathBuf {
        self.data.clone().unwrap_or_else(|| cfg.data.dir.clone())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config as TOML.
    DefaultConfig,
    /// Generate the train and test scenario sets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train encoder and denoiser jointly.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write sampled candidates for test items to CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test items to predict (repeatable); all when omitted.
        #[arg(long)]
        item: Vec<usize>,
    },
    /// Sweep denoising steps, sample count or input modalities.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// steps | samples | modalities
        #[arg(long)]
        axis: String,
        /// Comma-separated subset of sweep points.
        #[arg(long, value_delimiter = ',')]
        points: Option<Vec<String>>,
        /// Report points without a checkpoint as missing instead of training them.
        #[arg(long)]
        no_train: bool,
    },
    /// Render a sweep CSV as charts, or one item of a predictions CSV as a scene.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Render this item of a predictions CSV.
        #[arg(long)]
        item: Option<usize>,
        /// Route corridor half width for scene rendering, meters.
        #[arg(long, default_value_t = 3.0)]
        halfwidth: f64,
    },
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
        Command::GenData { common } => {
            let cfg = common.config()?;
            let out = common.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
            let m = pipeline::cmd_gen_data(&cfg, &out, common.force)?;
            println!("wrote {} files to {} (config {})", m.files.len(), out.display(), &m.config_hash[..16]);
        }
        Command::Train { common, data } => {
            let cfg = common.config()?;
            let out = common.out.clone().unwrap_or_else(|| pipeline::run_dir(Path::new("."), &cfg));
            let t = pipeline::cmd_train(&cfg, &data.dir(&cfg), &out, common.force)?;
            let (first, last) = (t.logs.first().context("no epochs")?, t.logs.last().context("no epochs")?);
            println!(
                "trained {} epochs: L_diffusion {:.4} -> {:.4}, best epoch {}; outputs in {}",
                t.logs.len(),
                first.diffusion,
                last.diffusion,
                t.best_epoch,
                out.display()
            );
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = common.config()?;
            let out = common.out.clone().unwrap_or_else(|| sibling(&checkpoint, "eval"));
            let e = pipeline::cmd_eval(&cfg, &data.dir(&cfg), &checkpoint, &out, common.force)?;
            let mean_s = e.seconds.iter().sum::<f64>() / e.seconds.len() as f64;
            println!("{} | {:.4} s/sample", e.report.summary(), mean_s);
        }
        Command::Predict {
            common,
            data,
            checkpoint,
            item,
        } => {
            let cfg = common.config()?;
            let out = common.out.clone().unwrap_or_else(|| sibling(&checkpoint, "predict"));
            let items = (!item.is_empty()).then_some(item.as_slice());
            let p = pipeline::cmd_predict(&cfg, &data.dir(&cfg), &checkpoint, &out, items, common.force)?;
            println!("wrote {}", p.path.display());
        }
        Command::Ablate {
            common,
            data,
            axis,
            points,
            no_train,
        } => {
            let cfg = common.config()?;
            let Some(axis) = Axis::parse(&axis) else {
                bail!("unknown axis `{axis}`; expected steps, samples or modalities");
            };
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("ablate"));
            let opts = AblateOptions {
                axis,
                points,
                train_missing: !no_train,
                force: common.force,
            };
            for r in pipeline::cmd_ablate(&cfg, &data.dir(&cfg), &out, &opts)? {
                match r.metrics {
                    Some(m) => println!(
                        "{}={}: FDE {:.3} minADE {:.3} HitRate {:.3} HD {:.3}",
                        axis.name(),
                        r.value,
                        m.fde,
                        m.min_ade,
                        m.hit,
                        m.hausdorff
                    ),
                    None => println!("{}={}: missing checkpoint ({})", axis.name(), r.value, &r.config_hash[..16]),
                }
            }
        }
        Command::Plot {
            input,
            out,
            item,
            halfwidth,
        } => {
            let out = out.unwrap_or_else(|| sibling(&input, ""));
            match item {
                Some(i) => println!("wrote {}", pipeline::cmd_plot_scene(&input, i, halfwidth, &out)?.display()),
                None => {
                    for p in pipeline::cmd_plot(&input, &out)? {
                        println!("wrote {}", p.display());
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
