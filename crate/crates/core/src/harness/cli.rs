use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::config::TrainConfig;
use super::metrics::{evaluate, MetricsReport};
use super::train::{history_csv, train, TrainOutcome};
use crate::ansatz::KernelName;
use crate::classical::{FusionLayer, MlpParams};
use crate::data::{load_dataset, synth_generate, DatasetBundle, SynthSpec};
use crate::error::{QcmmError, Result};
use crate::evidence::verify_fusion_correspondence;
use crate::fusion::{belief_mass, FusionStrategy};
use crate::grad::{gradcheck, GRADCHECK_TOL};
use crate::model::{AblationMode, ModelSpec};
use crate::qcnn::count_parameters;

#[derive(Debug, Parser)]
#[command(name = "qcmm", version, about = "Quantum evidential multimodal fusion classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics.json, checkpoint.qcmm and history.csv.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Train under an ablation mode (from --mode or the config).
    Ablate(RunArgs),
    /// Compare analytic gradients with central differences on the toy model.
    Gradcheck(GradArgs),
    /// Print the belief masses of a checkpoint's fusion angles.
    FuseDemo(FuseArgs),
    /// Print the parameter breakdown of an architecture.
    Paramcount(CountArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DataArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Synthetic dataset spec (JSON).
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub kernel: Option<KernelName>,
    #[arg(long)]
    pub strategy: Option<FusionStrategy>,
    #[arg(long)]
    pub mode: Option<AblationMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for metrics.json; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for a synthetic dataset; defaults to the checkpoint's run seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 998_244_353)]
    pub seed: u64,
    /// Check one kernel instead of all of them.
    #[arg(long)]
    pub kernel: Option<KernelName>,
    #[arg(long, default_value_t = 6)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 998_244_353)]
    pub seed: u64,
    /// Random activations per feature for the correspondence sweep.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long, default_value = "SU4")]
    pub kernel: KernelName,
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value = "qcmm")]
    pub strategy: FusionStrategy,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| QcmmError::Argument(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| QcmmError::Argument(format!("{}: {e}", path.display())))
}

fn load_bundle(data: &DataArgs, seed: u64) -> Result<DatasetBundle> {
    match (&data.manifest, &data.synthetic) {
        (Some(m), _) => load_dataset(m),
        (None, Some(s)) => synth_generate(&read_json::<SynthSpec>(s)?, seed),
        (None, None) => Err(QcmmError::Argument("pass --manifest or --synthetic".into())),
    }
}

fn run_config(args: &RunArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(k) = args.kernel {
        config.kernel_name = k;
    }
    if let Some(s) = args.strategy {
        config.fusion_strategy = s;
    }
    if let Some(m) = args.mode {
        config.ablation_mode = m;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    config.validate()?;
    Ok(config)
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn summary(label: &str, r: &MetricsReport) -> String {
    format!(
        "{label}: OA {:.4}  AA {:.4}  kappa {:.4}  F1 {:.4}  (n = {})",
        r.oa, r.aa, r.kappa, r.f1, r.n
    )
}

fn run_training(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let config = run_config(args)?;
    let bundle = load_bundle(&args.data, config.seed)?;
    let TrainOutcome { store, history } = train(&config, &bundle)?;
    let report = evaluate(&store, &bundle, config.exec)?;
    fs::create_dir_all(&args.out)?;
    write_pretty(&args.out.join("metrics.json"), &report)?;
    write_checkpoint(&args.out.join("checkpoint.qcmm"), &store, &config)?;
    fs::write(args.out.join("history.csv"), history_csv(&history))?;
    let label = format!(
        "{} / {} / {}",
        config.fusion_strategy, config.kernel_name, config.ablation_mode
    );
    writeln!(out, "{}", summary(&label, &report))?;
    Ok(())
}

fn run_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let bundle = load_bundle(&args.data, args.seed.unwrap_or(ck.header.config.seed))?;
    if (bundle.spec.d_h, bundle.spec.d_l) != (ck.store.spec.d_h, ck.store.spec.d_l) {
        return Err(QcmmError::Argument(format!(
            "checkpoint expects inputs of width {} and {}, dataset has {} and {}",
            ck.store.spec.d_h, ck.store.spec.d_l, bundle.spec.d_h, bundle.spec.d_l
        )));
    }
    let report = evaluate(&ck.store, &bundle, ck.header.config.exec)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_pretty(&dir.join("metrics.json"), &report)?;
            writeln!(out, "{}", summary("eval", &report))?;
        }
        None => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
    }
    Ok(())
}

fn run_gradcheck(args: &GradArgs, out: &mut dyn Write) -> Result<bool> {
    let kernels: Vec<KernelName> = match args.kernel {
        Some(k) => vec![k],
        None => KernelName::ALL.to_vec(),
    };
    let mut worst: f64 = 0.0;
    for k in kernels {
        let r = gradcheck(&ModelSpec::toy(k), args.seed, args.batch)?;
        writeln!(out, "{:<4} params {:>3}  max |analytic - fd| = {:.3e}", r.kernel, r.n_params, r.max_abs_dev)?;
        worst = worst.max(r.max_abs_dev);
    }
    let ok = worst <= GRADCHECK_TOL;
    writeln!(
        out,
        "max deviation {worst:.3e} (tolerance {GRADCHECK_TOL:e}): {}",
        if ok { "pass" } else { "FAIL" }
    )?;
    Ok(ok)
}

#[derive(Serialize)]
struct FuseDemo {
    thetas: Vec<f64>,
    belief_masses: Vec<f64>,
    correspondence_samples: usize,
    max_abs_diff: f64,
}

fn run_fuse_demo(args: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let fusion = ck.store.fusion.as_ref().ok_or_else(|| {
        QcmmError::Argument(format!(
            "checkpoint uses {} / {}, which has no evidential fusion angles",
            ck.store.spec.strategy, ck.store.spec.mode
        ))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut max_abs_diff: f64 = 0.0;
    for &theta in &fusion.thetas {
        for _ in 0..args.samples {
            let v_h = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let v_l = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            max_abs_diff = max_abs_diff.max(verify_fusion_correspondence(v_h, v_l, theta)?.abs_diff);
        }
    }
    let demo = FuseDemo {
        thetas: fusion.thetas.clone(),
        belief_masses: fusion.thetas.iter().map(|&t| belief_mass(t)).collect(),
        correspondence_samples: args.samples * fusion.len(),
        max_abs_diff,
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&demo)?)?;
    Ok(())
}

#[derive(Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub kernel: String,
    pub strategy: String,
    pub d: usize,
    pub fusion: usize,
    pub fusion_gate_count: usize,
    pub qcnn: usize,
    pub total_quantum: usize,
    pub mlp_per_modality: usize,
    pub mlp_total: usize,
    pub classical_fusion: usize,
}

/// Parameter accounting with `d`-wide inputs to both aligners.
pub fn param_breakdown(args: &CountArgs) -> ParamBreakdown {
    let baseline = args.strategy.is_baseline();
    let width = if baseline { crate::fusion::BASELINE_WIDTH } else { args.d };
    let q = count_parameters(args.kernel, args.blocks, args.d);
    let fusion = if args.strategy == FusionStrategy::Qcmm { q.fusion } else { 0 };
    let mlp = MlpParams::zeros(args.d, args.hidden, width).param_count();
    ParamBreakdown {
        kernel: args.kernel.to_string(),
        strategy: args.strategy.to_string(),
        d: args.d,
        fusion,
        fusion_gate_count: args.strategy.gate_count(args.d),
        qcnn: q.qcnn,
        total_quantum: fusion + q.qcnn,
        mlp_per_modality: mlp,
        mlp_total: 2 * mlp,
        classical_fusion: if args.strategy == FusionStrategy::Classical {
            FusionLayer::zeros(args.d).param_count()
        } else {
            0
        },
    }
}

/// Run one parsed command. `Ok(false)` means a check ran and failed.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::Train(a) | Command::Ablate(a) => run_training(a, out).map(|_| true),
        Command::Eval(a) => run_eval(a, out).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a, out),
        Command::FuseDemo(a) => run_fuse_demo(a, out).map(|_| true),
        Command::Paramcount(a) => {
            writeln!(out, "{}", serde_json::to_string_pretty(&param_breakdown(a))?)?;
            Ok(true)
        }
    }
}

/// Entry point: usage errors exit with clap's code, failures with 1.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("qcmm").chain(args.iter().copied()))
    }

    #[test]
    fn paramcount_su4() {
        let cli = parse(&["paramcount", "--kernel", "SU4", "--d", "8"]).unwrap();
        let Command::Paramcount(a) = &cli.command else { panic!() };
        let b = param_breakdown(a);
        assert_eq!((b.fusion, b.qcnn, b.total_quantum), (8, 34, 42));
        assert_eq!((b.fusion_gate_count, b.mlp_total), (8, 2192));
    }

    #[test]
    fn paramcount_baselines() {
        let cli = parse(&["paramcount", "--kernel", "so4", "--strategy", "circuit-block"]).unwrap();
        let Command::Paramcount(a) = &cli.command else { panic!() };
        let b = param_breakdown(a);
        assert_eq!((b.fusion, b.fusion_gate_count, b.total_quantum), (0, 16, 16));
        let cli = parse(&["paramcount", "--strategy", "classical"]).unwrap();
        let Command::Paramcount(a) = &cli.command else { panic!() };
        assert_eq!(param_breakdown(a).classical_fusion, 136);
    }

    #[test]
    fn usage_errors() {
        assert!(parse(&["train", "--out", "x"]).is_err());
        assert!(parse(&["train", "--out", "x", "--manifest", "a", "--synthetic", "b"]).is_err());
        assert!(parse(&["train", "--out", "x", "--synthetic", "b", "--bogus"]).is_err());
        assert!(parse(&["paramcount", "--kernel", "U99"]).is_err());
        assert!(parse(&["ablate", "--out", "x", "--synthetic", "b", "--mode", "deeper"]).is_err());
        assert!(parse(&["frobnicate"]).is_err());
        let code = run(["qcmm", "frobnicate"]);
        assert_eq!(code, ExitCode::from(2));
    }

    #[test]
    fn gradcheck_single_kernel_passes() {
        let cli = parse(&["gradcheck", "--kernel", "TTN"]).unwrap();
        let mut buf = Vec::new();
        assert!(execute(&cli, &mut buf).unwrap());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("max deviation") && text.contains("pass"), "{text}");
    }
}
