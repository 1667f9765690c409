use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afrda_core::checkpoint::Checkpoint;
use afrda_core::config::RunConfig;
use afrda_core::gradcheck::{self, GradcheckOptions};
use afrda_core::pnm::{self, ImageData};
use afrda_core::synthdata::{self, Domain, CLASS_NAMES};
use afrda_core::train::{self, TrainState};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "afrda", version, about = "Attentive feature refinement for self-training domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write metrics, checkpoints and attention dumps.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the per-class IoU table of a checkpoint on held-out target images.
    Eval {
        #[arg(long, value_parser = existing_file)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients of every operation.
    Gradcheck {
        /// Coordinates checked per case and seed.
        #[arg(long, default_value_t = GradcheckOptions::default().coords)]
        coords: usize,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = GradcheckOptions::default().seeds)]
        seeds: Vec<u64>,
    },
    /// Write input, prediction and attention maps for one image.
    DumpAttention {
        #[arg(long, value_parser = existing_file)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Index of the held-out target image.
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, value_enum, default_value_t = DomainArg::Target)]
        domain: DomainArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export generated image/label pairs as PPM files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 8)]
        count: u64,
        #[arg(long, value_enum, default_value_t = DomainArg::Both)]
        domain: DomainArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_parser = existing_file)]
    config: PathBuf,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> afrda_core::Result<RunConfig> {
        let config = RunConfig::load(&self.config)?.with_overrides(&self.overrides)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Source,
    Target,
    Both,
}

fn existing_file(s: &str) -> Result<PathBuf, String> {
    let path = PathBuf::from(s);
    if path.is_file() {
        Ok(path)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> afrda_core::Result<ExitCode> {
    match command {
        Command::Train { config } => {
            let config = config.load()?;
            let summary = train::train_loop(&config)?;
            if let Some(last) = summary.records.last() {
                println!("{}", last.log_line());
            }
            println!("wrote {}", config.out_dir.display());
        }
        Command::Eval { checkpoint, config } => {
            let config = config.load()?;
            let net = config.net_config()?;
            let params = TrainState::student_from_checkpoint(&Checkpoint::load(&checkpoint)?, &net)?;
            let samples = train::eval_samples(&config)?;
            let (report, _) = train::evaluate(&params, &net, &samples)?;
            print!("{}", report.table(&CLASS_NAMES[..net.num_classes]));
        }
        Command::Gradcheck { coords, seeds } => {
            let opts = GradcheckOptions {
                coords,
                seeds,
                ..GradcheckOptions::default()
            };
            let reports = gradcheck::run_suite(&opts)?;
            let mut failed = 0;
            for r in &reports {
                let verdict = if r.passed(&opts) { "ok" } else { "FAILED" };
                if !r.passed(&opts) {
                    failed += 1;
                }
                println!(
                    "{:<26} seed {:<3} checked {:>4} skipped {:>3} max_rel {:.3e} {verdict}",
                    r.name, r.seed, r.checked, r.skipped, r.max_rel_error
                );
            }
            println!("{} of {} checks failed", failed, reports.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpAttention {
            checkpoint,
            config,
            index,
            domain,
            out,
        } => {
            let config = config.load()?;
            let net = config.net_config()?;
            let params = TrainState::student_from_checkpoint(&Checkpoint::load(&checkpoint)?, &net)?;
            let (domain, offset) = match domain {
                DomainArg::Source => (Domain::Source, 0),
                _ => (Domain::Target, train::EVAL_OFFSET),
            };
            let sample = synthdata::generate(&config.scene_spec(), &config.domain_shift(), domain, offset + index)?;
            let image = sample.image.reshape(&[1, 3, config.height, config.width])?;
            for name in train::dump_attention(&params, &net, &image, &out)? {
                println!("{}", out.join(name).display());
            }
        }
        Command::GenData {
            config,
            count,
            domain,
            out,
        } => {
            let config = config.load()?;
            let domains: &[(Domain, &str)] = match domain {
                DomainArg::Source => &[(Domain::Source, "source")],
                DomainArg::Target => &[(Domain::Target, "target")],
                DomainArg::Both => &[(Domain::Source, "source"), (Domain::Target, "target")],
            };
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            for &(domain, tag) in domains {
                for i in 0..count {
                    let s = synthdata::generate(&config.scene_spec(), &config.domain_shift(), domain, i)?;
                    pnm::write_image(&out.join(format!("{tag}_{i:04}_image.ppm")), ImageData::Rgb(&s.image))?;
                    pnm::write_image(&out.join(format!("{tag}_{i:04}_label.ppm")), ImageData::Labels(&s.label))?;
                }
            }
            println!("wrote {} pairs to {}", count * domains.len() as u64, out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn io_error(path: &Path, source: std::io::Error) -> afrda_core::Error {
    afrda_core::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
