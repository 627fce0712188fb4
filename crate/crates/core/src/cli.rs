//! The `navseg` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Machine-readable output goes to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{build_network, shape_trace, Network, NetworkSpec, Variant};
use crate::costmodel::{count_params, model_size_bytes, network_cost_report};
use crate::dataio::{load_dataset, load_image, load_model, save_dataset, save_mask, save_model, synth_dataset, Config};
use crate::error::{Error, Result};
use crate::pruner::{apply_prune, fine_tune, select_prune_set, PrunePolicy};
use crate::tensor::{Shape, Tensor};
use crate::trainer::{evaluate_counts, predict_mask, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Published reference model sizes in KB (unpruned, pruned), shown for
/// comparison only.
pub const REFERENCE_SIZES_KB: (u32, u32) = (2225, 1068);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSize {
    pub w: usize,
    pub h: usize,
}

impl InputSize {
    pub fn shape(self) -> Shape {
        Shape::new(1, 3, self.h, self.w)
    }
}

impl std::str::FromStr for InputSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(w), parse(h)) {
            (Some(w), Some(h)) => Ok(Self { w, h }),
            _ => Err(format!("expected positive WxH, got {s:?}")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "navseg", version, about = "Navigable-space segmentation: cost model, training, pruning, inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct VariantArg {
    #[arg(long, default_value = "pruned", value_parser = parse_variant)]
    variant: Variant,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config supplying defaults for any flag not given.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?.train,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Block-by-block architecture listing with output sizes and parameters.
    Describe {
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long, default_value = "512x256")]
        input: InputSize,
        #[arg(long)]
        json: bool,
    },
    /// Per-block MAC and parameter report (JSON unless --table).
    Cost {
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long, default_value = "512x256")]
        input: InputSize,
        #[arg(long, conflicts_with = "table")]
        json: bool,
        #[arg(long)]
        table: bool,
    },
    /// Writes a synthetic dataset as images/NNNN.ppm and labels/NNNN.pgm.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "64x64")]
        input: InputSize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Trains a freshly built (or loaded) network; history CSV on stdout.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        variant: VariantArg,
        /// Start from these weights instead of a fresh build.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Halves the 128-wide layers of a full network by filter L1 norm.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the plan as JSON.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Continues training a pruned model; before/after report on stdout.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out set for the before/after metrics (default: the training set).
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Segments one PPM image into a PGM mask (255 = navigable).
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall, precision and accuracy over a dataset, as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Times inference on a fixed random input.
    Bench {
        #[command(flatten)]
        variant: VariantArg,
        /// Benchmark these weights instead of a fresh build.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "512x256")]
        input: InputSize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Enable intra-op parallelism (worker count capped by NAVSEG_THREADS).
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub iterations: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_fps: f64,
}

/// Highest frame rate sustainable at `mean_ms` per frame.
pub fn max_fps(mean_ms: f64) -> f64 {
    1000.0 / mean_ms
}

/// One decimal place.
pub fn format_fps(fps: f64) -> String {
    format!("{fps:.1}")
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl BenchResult {
    /// Statistics over timed iterations (warmup runs already excluded).
    pub fn from_samples(samples_ms: &[f64], warmup: usize) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::invalid("bench needs at least one timed iteration"));
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean_ms = samples_ms.iter().sum::<f64>() / samples_ms.len() as f64;
        Ok(Self {
            iterations: samples_ms.len(),
            warmup,
            mean_ms,
            p50_ms: nearest_rank(&sorted, 0.50),
            p95_ms: nearest_rank(&sorted, 0.95),
            max_fps: max_fps(mean_ms),
        })
    }

    pub fn to_table(&self) -> String {
        format!(
            "iterations {}\nwarmup {}\nmean_ms {:.3}\np50_ms {:.3}\np95_ms {:.3}\nmax_fps {}\n",
            self.iterations,
            self.warmup,
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            format_fps(self.max_fps)
        )
    }
}

pub fn bench(net: &Network<f32>, input: Shape, iterations: usize, warmup: usize, seed: u64) -> Result<BenchResult> {
    if iterations == 0 {
        return Err(Error::invalid("bench needs at least one timed iteration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(input, |_, _, _, _| rng.gen::<f32>());
    net.check_input(x.shape())?;
    for _ in 0..warmup {
        net.infer(&x)?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        net.infer(&x)?;
        samples.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    BenchResult::from_samples(&samples, warmup)
}

/// `W×H×C` as in architecture tables.
fn whc(s: Shape) -> String {
    format!("{}×{}×{}", s.w, s.h, s.c)
}

#[derive(Serialize)]
struct DescribeRow {
    block: usize,
    kind: &'static str,
    output: String,
    params: usize,
}

#[derive(Serialize)]
struct Description {
    variant: &'static str,
    input: String,
    blocks: Vec<DescribeRow>,
    total_params: usize,
    model_file_bytes: usize,
    reference_size_kb: ReferenceSizes,
}

#[derive(Serialize)]
struct ReferenceSizes {
    unpruned: u32,
    pruned: u32,
}

fn describe(variant: Variant, input: InputSize, json: bool) -> Result<String> {
    let net = Network::<f32>::zeroed(NetworkSpec::new(variant))?;
    let trace = shape_trace(&net.spec, input.shape())?;
    let rows: Vec<DescribeRow> = trace
        .iter()
        .zip(&net.blocks)
        .map(|(r, b)| DescribeRow {
            block: r.block,
            kind: r.kind.name(),
            output: whc(r.output),
            params: b.param_count(),
        })
        .collect();
    let d = Description {
        variant: variant.name(),
        input: whc(input.shape()),
        blocks: rows,
        total_params: count_params(&net),
        model_file_bytes: model_size_bytes(&net),
        reference_size_kb: ReferenceSizes {
            unpruned: REFERENCE_SIZES_KB.0,
            pruned: REFERENCE_SIZES_KB.1,
        },
    };
    if json {
        return Ok(serde_json::to_string_pretty(&d)? + "\n");
    }
    let mut s = format!("variant {}  input {}\n{:>5}  {:<10}  {:<14} {:>8}\n", d.variant, d.input, "block", "type", "output", "params");
    for r in &d.blocks {
        s += &format!("{:>5}  {:<10}  {:<14} {:>8}\n", r.block, r.kind, r.output, r.params);
    }
    s += &format!("total parameters {}\n", d.total_params);
    s += &format!(
        "model file {} bytes ({:.1} KB)\n",
        d.model_file_bytes,
        d.model_file_bytes as f64 / 1024.0
    );
    s += &format!(
        "reported reference model size: {} KB unpruned, {} KB pruned (not comparable byte for byte)\n",
        REFERENCE_SIZES_KB.0, REFERENCE_SIZES_KB.1
    );
    Ok(s)
}

#[cfg(feature = "parallel")]
fn configure_threads(parallel: bool) {
    if parallel {
        if let Some(n) = std::env::var("NAVSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            // Fails only if a global pool already exists, in which case it stays.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    crate::ops::set_parallel(parallel);
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(parallel: bool) {
    if parallel {
        eprintln!("navseg: built without parallel support; running single-threaded");
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Describe { variant, input, json } => {
            write!(out, "{}", describe(variant.variant, input, json)?)?;
        }
        Command::Cost {
            variant,
            input,
            json: _,
            table,
        } => {
            let report = network_cost_report(&NetworkSpec::new(variant.variant), input.shape())?;
            if table {
                write!(out, "{}", report.to_table())?;
            } else {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Synth {
            out: root,
            n,
            seed,
            input,
            config,
        } => {
            let cfg = match config {
                Some(p) => Config::load(p)?.synth,
                None => Default::default(),
            };
            let samples = synth_dataset(n, seed, input.h, input.w, &cfg)?;
            save_dataset(&root, &samples)?;
            let ones: usize = samples.iter().map(|s| s.label.count_ones()).sum();
            let pixels: usize = samples.iter().map(|s| s.label.len()).sum();
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "samples": n,
                    "seed": seed,
                    "size": format!("{}x{}", input.w, input.h),
                    "navigable_fraction": ones as f64 / pixels.max(1) as f64,
                })
            )?;
        }
        Command::Train {
            dataset,
            variant,
            model,
            out: path,
            train: args,
        } => {
            let cfg = args.resolve()?;
            let data = load_dataset(&dataset)?;
            let mut net = match model {
                Some(p) => load_model(p)?,
                None => build_network(variant.variant, cfg.seed),
            };
            let history = train(&mut net, &data, &cfg)?;
            save_model(&net, &path)?;
            write!(out, "{}", history.to_csv())?;
            eprintln!("navseg: wrote {}", path.display());
        }
        Command::Prune {
            model,
            out: path,
            plan: plan_path,
        } => {
            let net = load_model(&model)?;
            let plan = select_prune_set(&net, PrunePolicy::Halve128)?;
            let pruned = apply_prune(&net, &plan)?;
            if let Some(p) = plan_path {
                std::fs::write(p, plan.to_json())?;
            }
            save_model(&pruned, &path)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "params_before": count_params(&net),
                    "params_after": count_params(&pruned),
                    "filters_removed": plan.filters_removed(),
                    "variant": pruned.spec.variant.name(),
                })
            )?;
        }
        Command::Finetune {
            model,
            dataset,
            eval_dataset,
            out: path,
            train: args,
        } => {
            let cfg = args.resolve()?;
            let train_set = load_dataset(&dataset)?;
            let held_out = match eval_dataset {
                Some(p) => load_dataset(p)?,
                None => train_set.clone(),
            };
            let mut net = load_model(&model)?;
            let report = fine_tune(&mut net, &train_set, &held_out, &cfg)?;
            save_model(&net, &path)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "before": report.before,
                    "after": report.after,
                    "loss_before": report.loss_before,
                    "loss_after": report.loss_after,
                    "steps": cfg.steps,
                })
            )?;
        }
        Command::Infer { model, image, out: path } => {
            let net = load_model(&model)?;
            let x = load_image(&image)?;
            let logits = net.infer(&x)?;
            let mask = predict_mask(&logits, 0);
            save_mask(&path, &mask)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "navigable_pixels": mask.count_ones(), "pixels": mask.len() })
            )?;
        }
        Command::Eval { model, dataset, json: _ } => {
            let net = load_model(&model)?;
            let counts = evaluate_counts(&net, &load_dataset(&dataset)?)?;
            writeln!(
                out,
                "{}",
                serde_json::json!({ "counts": counts, "metrics": counts.metrics() })
            )?;
        }
        Command::Bench {
            variant,
            model,
            input,
            iterations,
            warmup,
            seed,
            parallel,
            json,
        } => {
            configure_threads(parallel);
            let net = match model {
                Some(p) => load_model(p)?,
                None => build_network(variant.variant, seed),
            };
            let result = bench(&net, input.shape(), iterations, warmup, seed)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&result)?)?;
            } else {
                write!(out, "{}", result.to_table())?;
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("navseg: {e}");
            exit_code(&e)
        }
    }
}
