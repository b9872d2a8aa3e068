use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfxtrain::config::RunConfig;
use dfxtrain::error::Result;
use dfxtrain::{landscape, train, verify};

#[derive(Parser)]
#[command(name = "dfxtrain", version, about = "Integer training on dynamic fixed-point tensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the integer arm, and the float arm too with --paired.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        paired: bool,
    },
    /// Run a verification suite: rounding, mapping, gemm, norm, sgd, theorem1 or variance.
    Verify {
        suite: String,
        /// Where to write the CSV detail report; defaults to `verify_<suite>.csv`
        /// in $DFX_OUT or the working directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the integer arm once per bit width.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "8,7,6,5,4")]
        bits: Vec<u32>,
    },
    /// Float and fixed-point loss surfaces around a checkpoint.
    Landscape {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse(&text)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_epoch(tag: &str, e: &train::EpochRecord) {
    eprintln!(
        "{tag} epoch {}: train loss {:.4} acc {:.2}% | test loss {:.4} acc {:.2}%",
        e.epoch,
        e.train_loss,
        100.0 * e.train_accuracy,
        e.test_loss,
        100.0 * e.test_accuracy
    );
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, paired } => {
            let cfg = load_config(&config)?;
            let r = train::cmd_train(&cfg, paired, |arm, e| print_epoch(arm.name(), e))?;
            print!("{}", train::summary_text(&cfg, &r));
            println!("output = {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Verify { suite, out } => {
            let report = verify::cmd_verify(&suite)?;
            for c in &report.checks {
                println!("{}", c.line());
            }
            let path = out.unwrap_or_else(|| {
                std::env::var_os("DFX_OUT")
                    .map(PathBuf::from)
                    .unwrap_or_default()
                    .join(format!("verify_{suite}.csv"))
            });
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, report.csv())?;
            println!("report = {}", path.display());
            Ok(report.passed())
        }
        Command::Ablate { config, bits } => {
            let cfg = load_config(&config)?;
            let rows = train::cmd_ablate(&cfg, &bits, |b, e| print_epoch(&format!("int{b}"), e))?;
            print!("{}", train::ablation_csv(&rows));
            Ok(true)
        }
        Command::Landscape {
            ckpt,
            grid,
            scale,
            seed,
            out,
        } => {
            let g = landscape::cmd_landscape(&ckpt, grid, scale, seed, out)?;
            println!("evaluated {0}x{0} grid at scale {1}", g.n, g.scale);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
