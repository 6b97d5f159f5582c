use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnsteer::decoding::{greedy_decode, DecodeConfig, DecodeMode};
use attnsteer::harness::config_file::{optimizer_of, parse_steering_config};
use attnsteer::harness::data::{gen_dataset, Dataset};
use attnsteer::harness::eval::{alpha_sweep, eval_roc, write_sweep_csv, EvalConfig, EvalMode};
use attnsteer::harness::heatmap::dump_heatmap;
use attnsteer::harness::train::{train_toy, TrainConfig};
use attnsteer::harness::{selftest, vocab};
use attnsteer::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig};
use attnsteer::steering::{steer, Optimizer, SteeringConfig};
use attnsteer::visprompt::VisualPrompt;
use attnsteer::{Error, Exec};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "attnsteer", version, about = "Test-time attention steering on a toy referring decoder")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic referring dataset.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on a dataset's images.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        /// Seeds both initialization and training order.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-step losses as CSV.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Steer one sample and decode with the optimized latent.
    Steer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        image_idx: usize,
        /// Visual prompt JSON; defaults to the sample's own prompt.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
        optimizer: OptimizerArg,
        /// Flat `key = value` steering config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Final aggregated attention map as PGM (raw values in a sibling CSV).
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Decode result JSON; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate decoding modes on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "plain,edit,gd,adam,adam+debias")]
        modes: String,
        #[arg(long)]
        report: PathBuf,
        /// Also run the GD step-size sweep and write its CSV here.
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "100,400,1600")]
        alphas: Vec<f64>,
    },
    /// Gradient and formula checks.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Gd,
    Adam,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Gd => Optimizer::Gd,
            OptimizerArg::Adam => Optimizer::Adam,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sample_index(dataset: &Dataset, idx: usize) -> Result<usize, Error> {
    if idx >= dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "image index {idx} out of range for {} samples",
            dataset.len()
        )));
    }
    Ok(idx)
}

fn run(cli: Cli) -> Result<u8, Error> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Gen { n, seed, grid, out } => {
            let d = gen_dataset(n, seed, grid)?;
            d.save(&out)?;
            println!("wrote {} samples to {} (digest {})", d.len(), out.display(), d.digest());
        }
        Command::Train {
            dataset,
            epochs,
            seed,
            out,
            loss_log,
        } => {
            let d = Dataset::load(&dataset)?;
            let init = init_model(&ModelConfig {
                grid: d.grid,
                seed,
                ..ModelConfig::default()
            })?;
            let cfg = TrainConfig {
                epochs,
                seed,
                exec,
                ..TrainConfig::default()
            };
            let (model, report) = train_toy(&init, &d, &cfg)?;
            save_checkpoint(&model, &out)?;
            if let Some(path) = loss_log {
                let mut w = create(&path)?;
                let io = |e| Error::io(&path, e);
                writeln!(w, "step,loss").map_err(io)?;
                for (i, l) in report.losses.iter().enumerate() {
                    writeln!(w, "{i},{l}").map_err(io)?;
                }
                w.flush().map_err(io)?;
            }
            println!(
                "trained {} steps on {} sequences: loss {:.4} -> {:.4}; checksum {}",
                report.steps(),
                report.examples,
                report.initial_loss().unwrap_or(f64::NAN),
                report.final_loss().unwrap_or(f64::NAN),
                model.checksum()
            );
        }
        Command::Steer {
            model,
            dataset,
            image_idx,
            prompt,
            optimizer,
            config,
            trace,
            heatmap,
            out,
        } => {
            let model = load_checkpoint(&model)?;
            let d = Dataset::load(&dataset)?;
            let s = &d.samples[sample_index(&d, image_idx)?];
            let visual = match prompt {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let p: VisualPrompt = serde_json::from_str(&text).map_err(|e| Error::parse("visual prompt", e))?;
                    p.validate()?;
                    p
                }
                None => s.prompt.clone(),
            };
            let base = SteeringConfig::for_optimizer(optimizer.into());
            let cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    if let Some(named) = optimizer_of(&text)? {
                        if named != base.optimizer {
                            return Err(Error::InvalidConfig(format!(
                                "config names optimizer {named:?} but --optimizer is {:?}",
                                base.optimizer
                            )));
                        }
                    }
                    parse_steering_config(&text, &base)?
                }
                None => base,
            };
            let (latent, tr) = steer(&model, &s.image, &s.question, &visual, &cfg)?;
            let mut result = greedy_decode(&model, &s.image, &s.question, 4, vocab::EOS, Some(&latent.values))?;
            if let Some(path) = &trace {
                let mut w = create(path)?;
                tr.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
            }
            if let Some(path) = &heatmap {
                dump_heatmap(&tr.final_map, path)?;
            }
            eprintln!(
                "energy {:.4} -> {:.4} after {} iterations ({:?}); answer: {}",
                tr.initial().energy,
                tr.final_record().energy,
                tr.chosen,
                tr.stop_reason,
                vocab::detokenize(&result.tokens)
            );
            result.trace = Some(tr);
            let json = result.to_json(&DecodeConfig::new(DecodeMode::Steered { steering: cfg }));
            match out {
                Some(path) => write_text(&path, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Eval {
            model,
            dataset,
            modes,
            report,
            sweep,
            alphas,
        } => {
            let model = load_checkpoint(&model)?;
            let d = Dataset::load(&dataset)?;
            let cfg = EvalConfig {
                modes: EvalMode::parse_list(&modes)?,
                exec,
                ..EvalConfig::default()
            };
            let r = eval_roc(&model, &d, &cfg)?;
            write_text(&report, &r.to_json())?;
            for m in &r.modes {
                println!("{:<12} {:.3} ({}/{})", m.mode.name(), m.accuracy, m.correct, m.total);
            }
            if let Some(path) = sweep {
                let rows = alpha_sweep(&model, &d, &cfg.gd, &alphas, exec)?;
                let mut w = create(&path)?;
                write_sweep_csv(&rows, &mut w)
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Selftest => {
            let checks = selftest::run()?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.pass;
            }
            if !ok {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
