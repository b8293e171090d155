//! `fracbnn` command-line tool.

mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fracbnn::bench::{run_bench, BenchOptions};
use fracbnn::encoding::{encode_image_thermometer, RgbImage, ThermometerConfig};
use fracbnn::kernels::argmax;
use fracbnn::model::{
    build_fracbnn_resnet20, count_ops, generate_synthetic, GateMode, LayerStats, Model,
};
use fracbnn::verify::{run_suite, VerifyOptions};
use fracbnn::{modelfile, ppm, tensorfile};

use error::{CliError, EXIT_USAGE, EXIT_VERIFY};

/// Version tag carried by every JSON line.
const SCHEMA: u32 = 1;

#[derive(Parser)]
#[command(
    name = "fracbnn",
    version,
    about = "Bit-packed BNN inference with fractional activations"
)]
struct Cli {
    /// Worker threads for kernels; defaults to all cores.
    #[arg(long, global = true, env = "FRACBNN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Thermometer-encode a PPM image into a packed tensor file.
    Encode {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 8)]
        resolution: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check every kernel and whole networks against the dense oracle.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Perturb engine results; the run must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[arg(long)]
        json: bool,
    },
    /// Time the packed engine against the oracle.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        oracle_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Parameter and operation counts.
    Stats {
        #[arg(long)]
        model: PathBuf,
        /// Update sparsity used for the expected total.
        #[arg(long, default_value_t = 0.6)]
        sparsity: f64,
        #[arg(long)]
        json: bool,
    },
    /// Write a seeded synthetic ResNet-20 model.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Gates::Calibrated)]
        gates: Gates,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        resolution: u32,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Gates {
    Calibrated,
    Open,
    Closed,
}

impl From<Gates> for GateMode {
    fn from(g: Gates) -> Self {
        match g {
            Gates::Calibrated => GateMode::Calibrated,
            Gates::Open => GateMode::Open,
            Gates::Closed => GateMode::Closed,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Encode {
            image,
            resolution,
            out,
        } => encode(&image, resolution, &out),
        Command::Infer { model, image, json } => infer(&model, &image, json),
        Command::Verify {
            seed,
            cases,
            inject_fault,
            json,
        } => verify(seed, cases, inject_fault, json),
        Command::Bench {
            model,
            iters,
            oracle_iters,
            seed,
            json,
        } => bench(
            &model,
            BenchOptions {
                iters,
                oracle_iters,
                seed,
            },
            json,
        ),
        Command::Stats {
            model,
            sparsity,
            json,
        } => stats(&model, sparsity, json),
        Command::Synth {
            out,
            seed,
            gates,
            classes,
            resolution,
        } => synth(&out, seed, gates.into(), classes, resolution),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_image(path: &Path) -> Result<RgbImage, CliError> {
    ppm::parse(&read(path)?).map_err(|e| CliError::ppm(path, e))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    modelfile::load(&read(path)?).map_err(|e| CliError::model_file(path, e))
}

fn thermometer(resolution: u32) -> Result<ThermometerConfig, CliError> {
    ThermometerConfig::new(resolution).map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))
}

fn print_json(value: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string(value).expect("report types serialize")
    );
}

fn encode(image: &Path, resolution: u32, out: &Path) -> Result<(), CliError> {
    let img = load_image(image)?;
    let plane = encode_image_thermometer(&img, &thermometer(resolution)?)
        .map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))?;
    let bytes = tensorfile::write(&plane);
    tensorfile::read(&bytes).map_err(|e| CliError::tensor(out, e))?;
    write(out, &bytes)?;
    eprintln!(
        "wrote {} ({} bytes, {})",
        out.display(),
        bytes.len(),
        plane.dims()
    );
    Ok(())
}

#[derive(Serialize)]
struct InferLine<'a> {
    schema: u32,
    command: &'static str,
    class: Option<usize>,
    logits: &'a [i32],
    mean_sparsity: f64,
    effective_bitwidth: f64,
    base_bmacs: u64,
    update_bmacs: u64,
    saturations: u64,
    layers: &'a [LayerStats],
}

fn infer(model: &Path, image: &Path, json: bool) -> Result<(), CliError> {
    let model = load_model(model)?;
    let img = load_image(image)?;
    let out = model.forward(&img).map_err(CliError::model)?;
    let st = &out.stats;
    let class = argmax(&out.logits);
    if json {
        print_json(&InferLine {
            schema: SCHEMA,
            command: "infer",
            class,
            logits: &out.logits,
            mean_sparsity: st.mean_sparsity,
            effective_bitwidth: st.effective_bitwidth,
            base_bmacs: st.base_bmacs,
            update_bmacs: st.update_bmacs,
            saturations: st.saturations,
            layers: &st.layers,
        });
        return Ok(());
    }
    println!("class {}", class.map_or("none".into(), |c| c.to_string()));
    println!("logits {:?}", out.logits);
    println!(
        "sparsity {:.4}  effective bitwidth {:.4}  saturations {}",
        st.mean_sparsity, st.effective_bitwidth, st.saturations
    );
    println!(
        "{:>5}  {:<14} {:>9} {:>12} {:>12}",
        "layer", "kind", "sparsity", "base BMACs", "update BMACs"
    );
    for l in &st.layers {
        let sp = l.sparsity.map_or("-".to_string(), |s| format!("{s:.4}"));
        println!(
            "{:>5}  {:<14} {:>9} {:>12} {:>12}",
            l.layer,
            l.kind.name(),
            sp,
            l.base_bmacs,
            l.update_bmacs
        );
    }
    Ok(())
}

fn verify(seed: u64, cases: usize, inject_fault: bool, json: bool) -> Result<(), CliError> {
    if cases == 0 {
        eprintln!("warning: --cases 0 runs no checks");
    }
    let mut opts = VerifyOptions::new(seed, cases);
    opts.inject_fault = inject_fault;
    let report = run_suite(opts);
    if json {
        #[derive(Serialize)]
        struct Line<'a> {
            schema: u32,
            command: &'static str,
            passed: bool,
            #[serde(flatten)]
            report: &'a fracbnn::verify::VerifyReport,
        }
        print_json(&Line {
            schema: SCHEMA,
            command: "verify",
            passed: report.passed(),
            report: &report,
        });
    } else {
        for c in &report.checks {
            let status = if c.passed() { "PASS" } else { "FAIL" };
            println!(
                "{status}  {:<24} cases {:>5}  max diff {} (tolerance {})",
                c.name, c.cases, c.max_ulp, c.tolerance_ulp
            );
            if let Some(f) = &c.first_failure {
                println!("      first failure: {f}");
            }
        }
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed()).count();
        Err(CliError::new(
            EXIT_VERIFY,
            format!("{failed} checks failed"),
        ))
    }
}

fn bench(model: &Path, opts: BenchOptions, json: bool) -> Result<(), CliError> {
    let model = load_model(model)?;
    let r = run_bench(&model, opts).map_err(CliError::model)?;
    if json {
        #[derive(Serialize)]
        struct Line<'a> {
            schema: u32,
            command: &'static str,
            #[serde(flatten)]
            report: &'a fracbnn::bench::BenchReport,
        }
        print_json(&Line {
            schema: SCHEMA,
            command: "bench",
            report: &r,
        });
        return Ok(());
    }
    println!("threads {}", r.threads);
    println!(
        "engine  {:>10.3} ms/image  {:>10.2} images/s  ({} iters)",
        r.engine_ms_per_image, r.engine_images_per_sec, r.iters
    );
    println!(
        "oracle  {:>10.3} ms/image  {:>10.2} images/s  ({} iters)",
        r.oracle_ms_per_image, r.oracle_images_per_sec, r.oracle_iters
    );
    println!(
        "speedup {:.1}x  logits agree: {}",
        r.speedup, r.logits_agree
    );
    println!(
        "{:>5}  {:<14} {:>11} {:>11}",
        "layer", "kind", "engine ms", "oracle ms"
    );
    for l in &r.layers {
        println!(
            "{:>5}  {:<14} {:>11.4} {:>11.4}",
            l.layer,
            l.kind.name(),
            l.engine_ms,
            l.oracle_ms
        );
    }
    Ok(())
}

fn stats(model: &Path, sparsity: f64, json: bool) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(CliError::new(EXIT_USAGE, "--sparsity must lie in [0, 1]"));
    }
    let model = load_model(model)?;
    let ops = count_ops(model.spec());
    let total = ops.bmacs_total(sparsity);
    if json {
        #[derive(Serialize)]
        struct Line<'a> {
            schema: u32,
            command: &'static str,
            topology: fracbnn::model::Topology,
            layers: usize,
            sparsity: f64,
            bmacs_total: f64,
            #[serde(flatten)]
            ops: &'a fracbnn::model::OpCounts,
        }
        print_json(&Line {
            schema: SCHEMA,
            command: "stats",
            topology: model.spec().topology,
            layers: model.spec().blocks.len(),
            sparsity,
            bmacs_total: total,
            ops: &ops,
        });
        return Ok(());
    }
    let m = |v: u64| v as f64 / 1e6;
    println!("layers                 {}", model.spec().blocks.len());
    println!(
        "binary weights         {} ({:.3} M)",
        ops.binary_weight_params,
        m(ops.binary_weight_params)
    );
    println!("channel parameters     {}", ops.channel_params);
    println!("classifier parameters  {}", ops.classifier_params);
    println!(
        "model size             {:.1} KiB",
        ops.model_bits as f64 / 8192.0
    );
    println!("input-layer BMACs      {:.3} M", m(ops.bmacs_input));
    println!("fractional base BMACs  {:.3} M", m(ops.bmacs_frac_base));
    println!("all base BMACs         {:.3} M", m(ops.bmacs_base));
    println!("max update BMACs       {:.3} M", m(ops.bmacs_update_max));
    println!("total at sparsity {sparsity:.2}  {:.3} M", total / 1e6);
    println!("integer MACs           {}", ops.imacs);
    Ok(())
}

fn synth(
    out: &Path,
    seed: u64,
    gates: GateMode,
    classes: usize,
    resolution: u32,
) -> Result<(), CliError> {
    if classes == 0 || classes > u16::MAX as usize {
        return Err(CliError::new(EXIT_USAGE, "--classes must lie in 1..=65535"));
    }
    let spec = build_fracbnn_resnet20(thermometer(resolution)?, classes);
    let mut model = generate_synthetic(seed, &spec).map_err(CliError::model)?;
    model.set_gates(gates);
    let bytes = modelfile::save(&model).map_err(|e| CliError::model_file(out, e))?;
    write(out, &bytes)?;
    eprintln!("wrote {} ({} bytes)", out.display(), bytes.len());
    Ok(())
}
