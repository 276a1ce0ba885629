//! `binmoire` — train, verify, benchmark, and run the 1-bit demoiréing
//! toolkit.
//!
//! Exit codes: 0 success, 1 test/verification or runtime failure,
//! 2 usage error. `BINMOIRE_THREADS` caps the kernel thread pool.

use binmoire_core::checkpoint::{load_checkpoint, save_checkpoint};
use binmoire_core::config::{load_config, ConfigDoc};
use binmoire_core::conv::{xnor_conv2d, ConvSpec};
use binmoire_core::data::synth_moire;
use binmoire_core::image::{read_image, write_image, ImageBuffer};
use binmoire_core::metrics::{psnr_tensor, ssim_tensor};
use binmoire_core::net::{build_network, count_params_ops};
use binmoire_core::tensor::{pack, pack_filters, FloatTensor, Shape};
use binmoire_core::train::{render_metrics_log, train_loop};
use binmoire_core::verify::{self, reference::conv2d_pm1, VerifyOptions};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand_like::SplitMix;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Tiny deterministic generator for benchmark data; keeps the binary free
/// of an RNG dependency.
mod rand_like {
    pub struct SplitMix(pub u64);

    impl SplitMix {
        pub fn next(&mut self) -> u64 {
            self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = self.0;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        }

        pub fn pm1(&mut self) -> f32 {
            if self.next() & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "binmoire", version, about = "1-bit demoiréing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run oracle-equivalence and invariant suites
    Verify {
        /// all | kernels | mabg | sgra | grad
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Time the packed XNOR kernel against the naive float convolution
    Bench {
        #[arg(long, default_value_t = 64)]
        cin: usize,
        #[arg(long, default_value_t = 64)]
        cout: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 128)]
        hw: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Train the toy network on synthetic pairs
    Train {
        /// TOML config ([network]/[train] sections); defaults when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path; the metrics log lands next to it
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore one image with a trained checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics record (JSON) destination
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the parameter/operation accounting table
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write clean/degraded demo pairs
    Demo {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(2);
        }
    };
    let threads = std::env::var("BINMOIRE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    binmoire_core::configure_threads(threads);
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode, binmoire_core::Error> {
    match cmd {
        Command::Verify { suite } => cmd_verify(&suite),
        Command::Bench { cin, cout, k, hw, iters } => cmd_bench(cin, cout, k, hw, iters),
        Command::Train { config, out, steps, seed } => cmd_train(config, &out, steps, seed),
        Command::Eval { ckpt, input, out, report } => cmd_eval(&ckpt, &input, &out, report),
        Command::Count { config } => cmd_count(config),
        Command::Demo { seed, out } => cmd_demo(seed, &out),
    }
}

fn cmd_verify(suite: &str) -> Result<ExitCode, binmoire_core::Error> {
    let opts = VerifyOptions {
        inject_fault: std::env::var("BINMOIRE_INJECT_FAULT").is_ok_and(|v| v == "1"),
    };
    let report = match suite {
        "all" => verify::run_all(opts)?,
        "kernels" => verify::run_kernels(opts)?,
        "mabg" => verify::run_mabg()?,
        "sgra" => verify::run_sgra()?,
        "grad" => verify::run_grad()?,
        other => {
            eprintln!("unknown suite '{other}' (expected all|kernels|mabg|sgra|grad)");
            return Ok(ExitCode::from(2));
        }
    };
    print!("{}", report.render());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_bench(
    cin: usize,
    cout: usize,
    k: usize,
    hw: usize,
    iters: usize,
) -> Result<ExitCode, binmoire_core::Error> {
    if iters == 0 {
        eprintln!("--iters must be >= 1");
        return Ok(ExitCode::from(2));
    }
    let spec = ConvSpec::new(cin, cout, k, 1, k / 2)?;
    let (h_out, w_out) = spec.output_hw(hw, hw)?;
    let mut rng = SplitMix(0x1234_5678);
    let shape = Shape::new(1, cin, hw, hw);
    let x = FloatTensor::from_vec(shape, (0..shape.numel()).map(|_| rng.pm1()).collect())?;
    let wshape = spec.weight_shape();
    let w = FloatTensor::from_vec(wshape, (0..wshape.numel()).map(|_| rng.pm1()).collect())?;
    let xb = pack(&x)?;
    let wb = pack_filters(&w)?;

    let packed = xnor_conv2d(&xb, &wb, &spec)?;
    let naive = conv2d_pm1(&x, &w, &spec)?;
    if packed != naive {
        eprintln!("packed and naive paths disagree; refusing to time a broken kernel");
        return Ok(ExitCode::from(1));
    }

    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(xnor_conv2d(&xb, &wb, &spec)?);
    }
    let packed_ns = t0.elapsed().as_nanos() as f64 / iters as f64;
    let t1 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(conv2d_pm1(&x, &w, &spec)?);
    }
    let naive_ns = t1.elapsed().as_nanos() as f64 / iters as f64;

    let macs = (cout * cin * k * k * h_out * w_out) as f64;
    let ratio = naive_ns / packed_ns;
    println!("config: cin={cin} cout={cout} k={k} hw={hw} iters={iters} ({macs:.0} MACs/pass)");
    println!(
        "packed xnor : {:>12.0} ns/op  {:>8.2} GOP/s",
        packed_ns,
        macs / packed_ns
    );
    println!(
        "naive float : {:>12.0} ns/op  {:>8.2} GOP/s",
        naive_ns,
        macs / naive_ns
    );
    println!("speedup     : {ratio:.2}x");
    // the >= 1x floor only means something once the workload amortizes the
    // per-call window setup; toy sizes just report
    if macs >= 1e7 && ratio < 1.0 {
        eprintln!("packed path slower than the naive float path");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config_or_default(path: Option<PathBuf>) -> Result<ConfigDoc, binmoire_core::Error> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ConfigDoc::default()),
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    out: &Path,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<ExitCode, binmoire_core::Error> {
    let mut doc = load_config_or_default(config)?;
    if let Some(s) = steps {
        doc.train.steps = s;
    }
    if let Some(s) = seed {
        doc.train.seed = s;
    }
    println!(
        "training: {} steps, batch {}, crop {}, seed {}",
        doc.train.steps, doc.train.batch, doc.train.crop, doc.train.seed
    );
    let t0 = Instant::now();
    let outcome = train_loop(&doc.network, &doc.train)?;
    save_checkpoint(&outcome.net, out)?;
    let log_path = metrics_log_path(out);
    std::fs::write(&log_path, render_metrics_log(&outcome.records))?;
    println!(
        "done in {:?}; final loss {:.5}; checkpoint: {}; metrics: {}",
        t0.elapsed(),
        outcome.final_loss,
        out.display(),
        log_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn metrics_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics.jsonl");
    ckpt.with_file_name(name)
}

/// Edge-replicate to dimensions the multi-scale network can divide.
fn pad_for_net(t: &FloatTensor, factor: usize) -> FloatTensor {
    let s = t.shape();
    let (h2, w2) = (s.h.div_ceil(factor) * factor, s.w.div_ceil(factor) * factor);
    if (h2, w2) == (s.h, s.w) {
        return t.clone();
    }
    let mut out = FloatTensor::zeros(Shape::new(s.b, s.c, h2, w2));
    for b in 0..s.b {
        for c in 0..s.c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out.set(b, c, i, j, t.get(b, c, i.min(s.h - 1), j.min(s.w - 1)));
                }
            }
        }
    }
    out
}

fn crop_to(t: &FloatTensor, h: usize, w: usize) -> FloatTensor {
    let s = t.shape();
    let mut out = FloatTensor::zeros(Shape::new(s.b, s.c, h, w));
    for b in 0..s.b {
        for c in 0..s.c {
            for i in 0..h {
                for j in 0..w {
                    out.set(b, c, i, j, t.get(b, c, i, j));
                }
            }
        }
    }
    out
}

/// Demo pairs follow a `_degraded` / `_clean` naming convention; eval uses
/// it to locate the reference for the quality metrics.
fn reference_for(input: &Path) -> Option<PathBuf> {
    let name = input.file_name()?.to_str()?;
    if !name.contains("degraded") {
        return None;
    }
    let candidate = input.with_file_name(name.replace("degraded", "clean"));
    candidate.exists().then_some(candidate)
}

fn cmd_eval(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    report: Option<PathBuf>,
) -> Result<ExitCode, binmoire_core::Error> {
    let net = load_checkpoint(ckpt)?;
    let img = read_image(input)?;
    let x = img.to_tensor();
    let factor = 1usize << (net.cfg.scales - 1);
    let padded = pad_for_net(&x, factor.max(1));
    let restored_full = net.forward(&padded)?;
    let restored = crop_to(&restored_full, x.shape().h, x.shape().w);
    let restored = restored.map(|v| v.clamp(0.0, 1.0));
    write_image(out, &ImageBuffer::from_tensor(&restored)?)?;

    let mut record = serde_json::Map::new();
    record.insert("input".into(), input.display().to_string().into());
    record.insert("output".into(), out.display().to_string().into());
    match reference_for(input) {
        Some(ref_path) => {
            let clean = read_image(&ref_path)?.to_tensor();
            let metrics = [
                ("psnr_in", psnr_tensor(&x, &clean, 1.0)?),
                ("psnr_out", psnr_tensor(&restored, &clean, 1.0)?),
                ("ssim_in", ssim_tensor(&x, &clean, 8, 1.0)?),
                ("ssim_out", ssim_tensor(&restored, &clean, 8, 1.0)?),
            ];
            for (k, v) in metrics {
                record.insert(k.into(), v.into());
                println!("{k}: {v:.4}");
            }
            record.insert("reference".into(), ref_path.display().to_string().into());
        }
        None => {
            println!("no *_clean reference found next to the input; metrics omitted");
            for k in ["psnr_in", "psnr_out", "ssim_in", "ssim_out"] {
                record.insert(k.into(), serde_json::Value::Null);
            }
        }
    }
    if let Some(path) = report {
        let mut line = serde_json::to_string(&serde_json::Value::Object(record))
            .expect("record serializes");
        line.push('\n');
        std::fs::write(path, line)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_count(config: Option<PathBuf>) -> Result<ExitCode, binmoire_core::Error> {
    let doc = load_config_or_default(config)?;
    let net = build_network(&doc.network, doc.train.seed)?;
    // single forward pass on a 256x256 input, the usual reporting size
    let report = count_params_ops(&net, (256, 256))?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_demo(seed: u64, out: &Path) -> Result<ExitCode, binmoire_core::Error> {
    std::fs::create_dir_all(out)?;
    const PAIRS: usize = 4;
    const SIZE: usize = 96;
    for i in 0..PAIRS {
        let sample = synth_moire(seed + i as u64, SIZE)?;
        let clean = ImageBuffer::from_tensor(&sample.clean)?;
        let degraded = ImageBuffer::from_tensor(&sample.degraded)?;
        write_image(out.join(format!("pair_{i:03}_clean.ppm")), &clean)?;
        write_image(out.join(format!("pair_{i:03}_degraded.ppm")), &degraded)?;
    }
    println!("wrote {PAIRS} pairs to {}", out.display());
    Ok(ExitCode::SUCCESS)
}
