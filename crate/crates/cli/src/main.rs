use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use mobius_core::analysis::{self, SPARSITY_THRESHOLD};
use mobius_core::attention::AttentionConfig;
use mobius_core::autodiff::GradCheckConfig;
use mobius_core::complex::parse_complex;
use mobius_core::config::apply_kv;
use mobius_core::geometry::{characteristic_constant, classify, fixed_points, normalize_det, squared_trace, MobiusParams, CENSUS_TOL, DEFAULT_TOL};
use mobius_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Placement};
use mobius_core::trainer::{grad_check_model, synth_batch, train, Task, TrainConfig};
use mobius_core::{Error, ExtendedComplex};

const COMPLEX_HELP: &str = "Complex literals: R, Ri, R+Si, R-Si, i, -i, inf (e.g. 1, 2.5i, 1-0.5i). \
Use --polar NAME=MAG,ANGLE to give any of a, b, c, d, z0 as MAG·e^{ANGLE i} instead.";

#[derive(Parser)]
#[command(name = "mobius", version, about = "Möbius attention: training, geometry and attention analyses")]
struct Cli {
    /// Overrides both the model and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` file with model and training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Scales every GELU adjoint by this factor (negative control for grad-check).
    #[arg(long, global = true, hide = true)]
    corrupt_adjoint: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
#[command(after_help = COMPLEX_HELP)]
struct MapArgs {
    #[arg(long, allow_hyphen_values = true, default_value = "1")]
    a: String,
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    b: String,
    #[arg(long, allow_hyphen_values = true, default_value = "0")]
    c: String,
    #[arg(long, allow_hyphen_values = true, default_value = "1")]
    d: String,
    /// NAME=MAG,ANGLE; repeatable.
    #[arg(long, allow_hyphen_values = true)]
    polar: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify every per-dimension Möbius map of a checkpoint.
    GeometryCensus {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = CENSUS_TOL)]
        tol: f64,
    },
    /// Near-zero attention fractions and entropies per head, plus heatmaps.
    Sparsity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = SPARSITY_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Defaults to the model's maximum sequence length.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value = "reverse")]
        task: Task,
    },
    /// Iterate a Möbius map from z0 and project the orbit onto the sphere.
    #[command(after_help = COMPLEX_HELP)]
    Flow {
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, allow_hyphen_values = true, default_value = "0")]
        z0: String,
        #[arg(long, default_value_t = 16)]
        steps: usize,
    },
    /// Finite-difference check of the full model's gradients.
    GradCheck {
        /// Layer placement of the built-in tiny model (ignored with --config).
        #[arg(long, default_value = "framed")]
        placement: Placement,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Check at most this many entries per parameter.
        #[arg(long)]
        max_entries: Option<usize>,
    },
    /// Train on a synthetic task; writes metrics.csv and checkpoint.bin.
    Train {
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Geometry class, fixed points and characteristic constant of one map.
    #[command(after_help = COMPLEX_HELP)]
    Classify {
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Parameter counts per module; complex tensors count twice.
    CountParams,
}

/// Raised when a check ran but did not meet its tolerance.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return 3;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::DivergenceDetected { .. } | Error::InvertibilityViolation { .. }) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.cmd {
        Cmd::GeometryCensus { checkpoint, tol } => {
            let model = load_checkpoint(checkpoint)?.model;
            let census = analysis::geometry_census(&model, *tol)?;
            write(&cli.out_dir.join("census.csv"), &census.csv())?;
            write(&cli.out_dir.join("census_table.csv"), &census.table())?;
            print!("# census_tol={tol}\n{}", census.table());
        }
        Cmd::Sparsity { checkpoint, threshold, batch, seq_len, task } => {
            let model = load_checkpoint(checkpoint)?.model;
            let n = seq_len.unwrap_or(model.config.max_seq_len);
            let seed = cli.seed.unwrap_or(0);
            let cfg = TrainConfig { task: *task, seq_len: n, batch_size: *batch, ..TrainConfig::default() };
            let data = synth_batch(*task, &cfg, model.config.vocab_size, seed);
            let report = analysis::sparsity(&model, &data.inputs, *batch, n, *threshold, seed)?;
            write(&cli.out_dir.join("sparsity.csv"), &report.csv())?;
            let maps = cli.out_dir.join("heatmaps");
            fs::create_dir_all(&maps)?;
            for h in &report.heatmaps {
                write(&maps.join(h.file_name()), &analysis::matrix_csv(&h.weights))?;
            }
            print!("{}", report.csv());
        }
        Cmd::Flow { map, z0, steps } => {
            let polar = polar_overrides(&map.polar)?;
            let m = build_map(map, &polar)?;
            let z0 = complex_arg("z0", z0, &polar)?;
            describe(&m, DEFAULT_TOL)?;
            let csv = analysis::flow_csv(&analysis::flow(&m, z0, *steps)?);
            write(&cli.out_dir.join("flow.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::GradCheck { placement, tol, max_entries } => {
            let (mut mc, _) = configs(&cli)?;
            if cli.config.is_none() {
                mc = tiny_model(*placement);
            }
            if let Some(s) = cli.seed {
                mc.seed = s;
            }
            let model = Model::new(mc)?;
            let n = model.config.max_seq_len.min(8);
            let cfg = TrainConfig { task: Task::Reverse, seq_len: n, batch_size: 2, ..TrainConfig::default() };
            let batch = synth_batch(Task::Reverse, &cfg, model.config.vocab_size, model.config.seed);
            let gc = GradCheckConfig {
                tol: *tol,
                max_entries_per_param: *max_entries,
                adjoint_fault: cli.corrupt_adjoint,
                ..GradCheckConfig::default()
            };
            let report = grad_check_model(&model, &batch, &gc)?;
            println!("group,checked,max_rel_err");
            for g in &report.groups {
                println!("{},{},{:e}", g.name, g.checked, g.max_rel_err);
            }
            let worst = report.worst.as_ref().map_or(String::from("-"), |(n, k)| format!("{n}[{k}]"));
            println!("max_rel_err {:e} at {worst} (tol {:e})", report.max_rel_err, report.tol);
            if !report.passed() {
                bail!(CheckFailed(format!("gradient check failed: {:e} >= {:e}", report.max_rel_err, report.tol)));
            }
            println!("PASS");
        }
        Cmd::Train { task, steps } => {
            let (mc, mut tc) = configs(&cli)?;
            if let Some(t) = task {
                tc.task = *t;
            }
            if let Some(s) = steps {
                tc.steps = *s;
            }
            let model = Model::new(mc)?;
            println!("{}", mobius_core::trainer::METRICS_HEADER);
            let out = train(model, &tc, |r| println!("{}", r.csv()))?;
            write(&cli.out_dir.join("metrics.csv"), &out.metrics_csv())?;
            save_checkpoint(&cli.out_dir.join("checkpoint.bin"), &out.model, tc.steps as u64, Some(&out.optimizer))?;
        }
        Cmd::Classify { map, tol } => {
            let m = build_map(map, &polar_overrides(&map.polar)?)?;
            describe(&m, *tol)?;
        }
        Cmd::CountParams => {
            let (mc, _) = configs(&cli)?;
            let counts = Model::new(mc)?.count_parameters();
            println!("module,params");
            for (k, v) in &counts.per_module {
                println!("{k},{v}");
            }
            println!("total,{}", counts.total);
        }
    }
    Ok(())
}

fn tiny_model(placement: Placement) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        max_seq_len: 8,
        placement,
        attention: AttentionConfig { d_model: 16, n_heads: 4, n_mobius_heads: 2, ..AttentionConfig::default() },
        ..ModelConfig::default()
    }
}

fn configs(cli: &Cli) -> anyhow::Result<(ModelConfig, TrainConfig)> {
    let mut mc = ModelConfig::default();
    let mut tc = TrainConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        apply_kv(&text, &mut [&mut mc, &mut tc]).with_context(|| path.display().to_string())?;
    }
    if let Some(s) = cli.seed {
        mc.seed = s;
        tc.seed = s;
    }
    mc.validate()?;
    tc.validate()?;
    Ok((mc, tc))
}

fn polar_overrides(specs: &[String]) -> anyhow::Result<Vec<(String, ExtendedComplex)>> {
    specs
        .iter()
        .map(|s| {
            let bad = || Error::Parse(format!("--polar expects NAME=MAG,ANGLE, got '{s}'"));
            let (name, rest) = s.split_once('=').ok_or_else(bad)?;
            let (mag, angle) = rest.split_once(',').ok_or_else(bad)?;
            let (mag, angle): (f64, f64) =
                (mag.trim().parse().map_err(|_| bad())?, angle.trim().parse().map_err(|_| bad())?);
            if !["a", "b", "c", "d", "z0"].contains(&name) {
                return Err(Error::Parse(format!("--polar: unknown coefficient '{name}'")).into());
            }
            Ok((name.to_string(), ExtendedComplex::from_polar(mag, angle)?))
        })
        .collect()
}

fn complex_arg(name: &str, literal: &str, polar: &[(String, ExtendedComplex)]) -> anyhow::Result<ExtendedComplex> {
    if let Some((_, z)) = polar.iter().find(|(n, _)| n == name) {
        return Ok(*z);
    }
    Ok(parse_complex(literal).with_context(|| format!("--{name}"))?)
}

fn build_map(m: &MapArgs, polar: &[(String, ExtendedComplex)]) -> anyhow::Result<MobiusParams> {
    let a = complex_arg("a", &m.a, polar)?;
    let b = complex_arg("b", &m.b, polar)?;
    let c = complex_arg("c", &m.c, polar)?;
    let d = complex_arg("d", &m.d, polar)?;
    Ok(MobiusParams::new(a, b, c, d)?)
}

fn describe(m: &MobiusParams, tol: f64) -> anyhow::Result<()> {
    let class = classify(m, tol)?;
    println!("# class: {class}");
    println!("# tau: {}", squared_trace(&normalize_det(m)?));
    if class != mobius_core::geometry::GeometryClass::Identity {
        let fp = fixed_points(m)?;
        let pts: Vec<String> = fp.points().iter().map(|z| z.to_string()).collect();
        println!("# fixed points: {} ({} distinct)", pts.join(", "), fp.multiplicity);
    }
    match characteristic_constant(m) {
        Ok(k) => println!("# k: {k} (|k| = {}, arg k = {})", k.abs(), k.arg()),
        Err(_) => println!("# k: 1 (single fixed point)"),
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
