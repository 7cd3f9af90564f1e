use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use splitconv_core::entropy::{energy_fraction, patch_entropy_report};
use splitconv_core::harness::model::{parse_model, ModelSpec};
use splitconv_core::harness::sim::{Mode, Params, Schedule, SimConfig, Simulator};
use splitconv_core::harness::train::{softmax_cross_entropy, train, TrainConfig};
use splitconv_core::harness::{load_array, save_array, Dataset};
use splitconv_core::planner::{cost_model, plan_r_schedule, PartitionPlan, DEFAULT_R_CAP};
use splitconv_core::privacy::{
    attach_accuracy, gradient_leakage_check, leakage_sweep, DEFAULT_BINS,
};
use splitconv_core::spectral::{channel_spectrum, decompose_activation, DEFAULT_MAX_ITER};
use splitconv_core::tensor::{flatten_channels, relative_error, Matrix, Tensor};
use splitconv_core::{synth, Error};

#[derive(Parser)]
#[command(
    name = "splitconv",
    version,
    about = "Split convolutional workloads between a trusted and an untrusted context"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Decomposed,
    Monolithic,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Decomposed => Mode::Decomposed,
            ModeArg::Monolithic => Mode::Monolithic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Sequential,
    Concurrent,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Schedule {
        match s {
            ScheduleArg::Sequential => Schedule::Sequential,
            ScheduleArg::Concurrent => Schedule::Concurrent,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Two-class blobs sized for the bundled toy model.
    Blobs,
    /// Channel-low-rank images with i.i.d. texture.
    LowRank,
    /// Single-channel correlated Gaussian fields.
    Fields,
}

#[derive(clap::Args)]
struct PlanArgs {
    /// Upper bound on the trusted rank of any layer.
    #[arg(long, default_value_t = DEFAULT_R_CAP)]
    r_cap: usize,
    /// Comma-separated explicit ranks, one per conv layer; overrides the schedule.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
}

impl PlanArgs {
    fn build(&self, model: &ModelSpec) -> Result<PartitionPlan> {
        Ok(match &self.ranks {
            Some(r) => PartitionPlan::with_ranks(model, r, self.max_iter)?,
            None => {
                let mut p = plan_r_schedule(model, self.r_cap)?;
                if self.max_iter != p.max_iter {
                    p = PartitionPlan {
                        max_iter: self.max_iter,
                        ..p
                    };
                    p.layers = cost_model(model, &p, 1)?;
                }
                p
            }
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split an activation into its factored trusted part and residual.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long)]
        out_trusted: PathBuf,
        #[arg(long)]
        out_untrusted: PathBuf,
        /// Factor file; defaults to the trusted output with a `.factors.json` suffix.
        #[arg(long)]
        factors: Option<PathBuf>,
    },
    /// Channel entropy of an activation, optionally with the patch study.
    Entropy {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Rank schedule and per-layer cost model.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// One forward pass (and a backward pass with `--label`) with a seeded model.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        nsr: f64,
        #[arg(long, value_enum, default_value = "sequential")]
        schedule: ScheduleArg,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// SGD training on a sample directory.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "decomposed")]
        mode: ModeArg,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        nsr: f64,
        #[arg(long, value_enum, default_value = "sequential")]
        schedule: ScheduleArg,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Residual leakage at the first conv layer for several masking levels.
    Privacy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
        nsr: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Also train under each masking level for this many epochs and report accuracy.
        #[arg(long)]
        accuracy_epochs: Option<usize>,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Input-gradient leakage at the first conv layer over a training run.
    GradLeakage {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Write a synthetic sample directory.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_model(path: &Path) -> Result<ModelSpec> {
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    parse_model(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load(path: &Path) -> Result<Tensor> {
    load_array(path).with_context(|| format!("loading {}", path.display()))
}

/// Rank-2 arrays are read as channels × positions.
fn as_activation(t: Tensor) -> Result<Tensor> {
    match t.shape().len() {
        3 => Ok(t),
        2 => {
            let (n, m) = (t.shape()[0], t.shape()[1]);
            Ok(t.reshape(vec![n, 1, m])?)
        }
        d => Err(Error::invalid(format!("expected a 2-D or 3-D array, got {d}-D")).into()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose {
            input,
            r,
            max_iter,
            out_trusted,
            out_untrusted,
            factors,
        } => {
            let original = load(&input)?;
            let shape = original.shape().to_vec();
            let x = as_activation(original)?;
            let d = decompose_activation(&x, r, None, max_iter)?;
            let trusted = d.trusted.reconstruct().reshape(shape.clone())?;
            let untrusted = d.untrusted.clone().reshape(shape)?;
            save_array(&out_trusted, &trusted)?;
            save_array(&out_untrusted, &untrusted)?;
            let factors = factors.unwrap_or_else(|| out_trusted.with_extension("factors.json"));
            write_json(&factors, &serde_json::to_value(&d.trusted)?)?;
            let summary = json!({
                "r": d.trusted.rank(),
                "max_iter": max_iter,
                "trusted_values": d.trusted.stored_values(),
                "residual_relative_norm": if x.norm() > 0.0 { d.untrusted.norm() / x.norm() } else { 0.0 },
                "reconstruction_error": relative_error(&d.trusted.reconstruct().add(&d.untrusted)?, &x),
                "warnings": d.warnings,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Entropy {
            input,
            kernel,
            report,
        } => {
            let x = as_activation(load(&input)?)?;
            let m: Matrix = flatten_channels(&x)?;
            let profile = channel_spectrum(&m)?;
            let mut out = json!({
                "shape": x.shape(),
                "mu": profile.entropy,
                "principal_count": profile.principal_count,
                "energy_at_principal": energy_fraction(&profile.singular_values, profile.principal_count),
                "singular_values": profile.singular_values,
            });
            if let Some(k) = kernel {
                out["patch"] = serde_json::to_value(patch_entropy_report(&x, k)?)?;
            }
            write_json(&report, &out)?;
        }
        Command::Plan {
            model,
            plan,
            batch,
            report,
        } => {
            let m = read_model(&model)?;
            let p = plan.build(&m)?;
            let layers = cost_model(&m, &p, batch)?;
            write_json(
                &report,
                &json!({
                    "r_cap": p.r_cap,
                    "max_iter": p.max_iter,
                    "batch": batch,
                    "ranks": p.ranks(),
                    "layers": layers,
                    "warnings": p.warnings,
                }),
            )?;
        }
        Command::Run {
            model,
            input,
            mode,
            trace,
            seed,
            label,
            nsr,
            schedule,
            output,
            plan,
        } => {
            let m = read_model(&model)?;
            let p = plan.build(&m)?;
            let x = load(&input)?;
            let config = SimConfig {
                mode: mode.into(),
                schedule: schedule.into(),
                nsr,
                seed,
            };
            let mut sim = Simulator::new(&m, &p, config)?;
            let params = Params::init(&m, seed);
            let fwd = sim.forward(&params, &x)?;
            let mut out = json!({
                "mode": config.mode,
                "seed": seed,
                "ranks": p.ranks(),
                "output_shape": fwd.output.shape(),
                "output": fwd.output.data(),
                "forward": fwd.trace,
            });
            if let Some(label) = label {
                let (loss, dl) = softmax_cross_entropy(&fwd.output, label)?;
                let bwd = sim.backward(&params, &fwd.cache, &dl)?;
                out["loss"] = json!(loss);
                out["backward"] = serde_json::to_value(&bwd.trace)?;
            }
            if let Some(path) = output {
                save_array(&path, &fwd.output)?;
            }
            write_json(&trace, &out)?;
        }
        Command::Train {
            model,
            data,
            epochs,
            lr,
            seed,
            mode,
            batch_size,
            max_steps,
            nsr,
            schedule,
            report,
            plan,
        } => {
            let m = read_model(&model)?;
            let p = plan.build(&m)?;
            let ds =
                Dataset::load_dir(&data).with_context(|| format!("loading {}", data.display()))?;
            let cfg = TrainConfig {
                epochs,
                lr,
                seed,
                batch_size,
                mode: mode.into(),
                schedule: schedule.into(),
                nsr,
                max_steps,
            };
            let outcome = train(&m, &p, &ds, &cfg)?;
            let mut out = serde_json::to_value(&outcome.report)?;
            out["ranks"] = json!(p.ranks());
            write_json(&report, &out)?;
        }
        Command::Privacy {
            model,
            data,
            nsr,
            seed,
            bins,
            accuracy_epochs,
            lr,
            report,
            plan,
        } => {
            let m = read_model(&model)?;
            let p = plan.build(&m)?;
            let ds =
                Dataset::load_dir(&data).with_context(|| format!("loading {}", data.display()))?;
            let mut series = leakage_sweep(&ds, &m, &p, &nsr, seed, bins)?;
            if let Some(epochs) = accuracy_epochs {
                let base = TrainConfig::new(Mode::Decomposed, epochs, lr, seed);
                attach_accuracy(&mut series, &ds, &m, &p, &base)?;
            }
            write_json(&report, &serde_json::to_value(&series)?)?;
        }
        Command::GradLeakage {
            model,
            data,
            epochs,
            lr,
            seed,
            bins,
            report,
            plan,
        } => {
            let m = read_model(&model)?;
            let p = plan.build(&m)?;
            let ds =
                Dataset::load_dir(&data).with_context(|| format!("loading {}", data.display()))?;
            let cfg = TrainConfig::new(Mode::Decomposed, epochs, lr, seed);
            let probes: Vec<usize> = (0..=epochs).collect();
            let series = gradient_leakage_check(&ds, &m, &p, &cfg, &probes, bins)?;
            write_json(&report, &serde_json::to_value(&series)?)?;
        }
        Command::Synth { kind, out, n, seed } => {
            if n == 0 {
                bail!(Error::invalid("sample count must be positive"));
            }
            let ds = match kind {
                SynthKind::Blobs => synth::blobs(n, [3, 8, 8], 0.5, seed)?,
                SynthKind::LowRank => synth::low_rank_images(n, 16, 16, 4, 0.1, seed)?,
                SynthKind::Fields => {
                    let imgs = synth::correlated_gaussian_images(n, 32, 4.0, seed)?;
                    Dataset::new(imgs, vec![0; n])?
                }
            };
            ds.save_dir(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let input = err
                .chain()
                .find_map(|e| e.downcast_ref::<Error>())
                .is_some_and(Error::is_input_error);
            ExitCode::from(if input { 2 } else { 1 })
        }
    }
}
