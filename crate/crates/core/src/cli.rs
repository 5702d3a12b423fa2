//! Command-line front end: train, sample, eval, perm-dump, and selfcheck.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::Rng;

use crate::checkpoint::{self, TensorRecord};
use crate::config::Config;
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::flow::{fm_loss, train_step, Schedule};
use crate::frechet::{frechet_distance, FrechetStats};
use crate::model::Model;
use crate::ode::{sample_batch, OdeMethod, SolverConfig};
use crate::optim::Adam;
use crate::rng::{RngStreams, StreamKind};
use crate::scalar::{Dtype, Scalar};
use crate::scan::{make_order, wavelet_window_order, ScanKind, WindowDirection};
use crate::selfcheck;
use crate::tensor::Tensor;

const SAMPLE_CHUNK: usize = 64;
const PREVIEW_LIMIT: usize = 16;

#[derive(Parser)]
#[command(name = "wavessm", version, about = "Wavelet-aware selective state-space diffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config and write logs plus checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from a checkpoint into binary tensors plus previews.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Guidance scale; defaults to the config's value.
        #[arg(long)]
        w: Option<f64>,
        #[arg(long, default_value = "euler")]
        method: String,
        #[arg(long, default_value_t = 1e-5)]
        rtol: f64,
        #[arg(long, default_value_t = 1e-5)]
        atol: f64,
        /// Fixed step count; defaults to the config's value.
        #[arg(long)]
        steps: Option<usize>,
        /// Fixed class id for every sample (class_count = unconditional);
        /// omitted = cycle through the classes.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Score a sample directory against the dataset the config describes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory previously written by `sample`.
        #[arg(long)]
        out: PathBuf,
        /// Also print parameter and FLOP counts for the configured model.
        #[arg(long, default_value_t = false)]
        report: bool,
    },
    /// Print one scan permutation as a comma-separated index list.
    PermDump {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        dir: usize,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        /// Wavelet level (window kind only).
        #[arg(long, default_value_t = 1)]
        level: usize,
    },
    /// Run the built-in property suite and report pass/fail per group.
    Selfcheck,
}

pub fn run_from_env() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok((text, code)) => {
            println!("{text}");
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(String, i32)> {
    match cmd {
        Command::Train { config, out, seed } => {
            let cfg = Config::from_file(&config)?;
            Ok((train(&cfg, &out, seed)?, 0))
        }
        Command::Sample {
            ckpt,
            out,
            seed,
            n,
            w,
            method,
            rtol,
            atol,
            steps,
            class,
        } => Ok((
            sample(&ckpt, &out, seed, n, w, &method, rtol, atol, steps, class)?,
            0,
        )),
        Command::Eval { config, out, report } => {
            let cfg = Config::from_file(&config)?;
            Ok((eval(&cfg, &out, report)?, 0))
        }
        Command::PermDump {
            kind,
            dir,
            height,
            width,
            level,
        } => Ok((perm_dump(&kind, dir, height, width, level)?, 0)),
        Command::Selfcheck => {
            let (text, ok) = run_selfcheck();
            Ok((text, if ok { 0 } else { 1 }))
        }
    }
}

fn train(cfg: &Config, out: &Path, seed_override: Option<u64>) -> Result<String> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    std::fs::create_dir_all(out)?;
    let kind = cfg.dataset_kind()?;
    if cfg.class_count < kind.num_classes() {
        return Err(Error::config(format!(
            "class_count {} cannot hold the {} classes of dataset {:?}",
            cfg.class_count,
            kind.num_classes(),
            kind.name()
        )));
    }
    let streams = RngStreams::new(cfg.seed);
    let data = ToyDataset::<f32>::generate(
        kind,
        cfg.data_count,
        cfg.channels,
        cfg.image,
        cfg.image,
        cfg.seed,
    )?;
    let model = Model::<f32>::init(&cfg, &mut streams.stream(StreamKind::Init))?;
    let params = model.collect_params();
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let schedule = Schedule::new(cfg.schedule_kind()?);
    // one stream drives batch choice and the flow-time/noise draws
    let mut noise = streams.stream(StreamKind::Noise);
    let mut dropout = streams.stream(StreamKind::Dropout);

    let log_path = out.join(&cfg.train_log);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "step,loss,grad_norm,lr")?;

    let start = Instant::now();
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| noise.gen_range(0..data.count()))
            .collect();
        let (x, labels) = data.batch(&idx)?;
        let loss = fm_loss(
            &x,
            Some(&labels),
            model.null_class(),
            cfg.label_dropout,
            &schedule,
            |xt, t, l| model.forward(xt, t, l),
            &mut noise,
            &mut dropout,
        )?;
        let loss_val = loss.item()?.as_f64();
        let grad_norm = train_step(&loss, &params, &mut opt, cfg.grad_clip, step)?;
        last_loss = loss_val;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            writeln!(log, "{step},{loss_val:.6},{grad_norm:.6},{}", cfg.lr)?;
        }
        if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 {
            checkpoint::save_model(&model, &out.join(format!("ckpt_{:06}.ckpt", step + 1)))?;
        }
    }
    log.flush()?;
    let final_path = out.join("final.ckpt");
    checkpoint::save_model(&model, &final_path)?;
    Ok(format!(
        "trained {} steps in {:.1}s; final loss {:.4}; wrote {} and {}",
        cfg.steps,
        start.elapsed().as_secs_f64(),
        last_loss,
        log_path.display(),
        final_path.display()
    ))
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    out: &Path,
    seed: Option<u64>,
    n: usize,
    w: Option<f64>,
    method: &str,
    rtol: f64,
    atol: f64,
    steps: Option<usize>,
    class: Option<usize>,
) -> Result<String> {
    let model: Model<f32> = checkpoint::load_model(ckpt)?;
    let cfg = model.cfg.clone();
    std::fs::create_dir_all(out)?;
    let seed = seed.unwrap_or(cfg.seed);
    let solver = SolverConfig {
        method: OdeMethod::parse(method)?,
        rtol,
        atol,
        fixed_steps: steps.unwrap_or(cfg.sample_steps),
        w: w.unwrap_or(cfg.cfg_scale),
        ..SolverConfig::default()
    };
    if n == 0 {
        return Err(Error::config("need n >= 1 samples"));
    }
    let labels: Vec<usize> = match class {
        Some(c) => {
            if c > cfg.class_count {
                return Err(Error::config(format!(
                    "class {c} out of range; {} selects the unconditional row",
                    cfg.class_count
                )));
            }
            vec![c; n]
        }
        None => (0..n).map(|i| i % cfg.class_count).collect(),
    };

    let mut rng = RngStreams::new(seed).stream(StreamKind::Noise);
    let per = cfg.channels * cfg.image * cfg.image;
    let mut all = Vec::with_capacity(n * per);
    let mut nfe_total = 0usize;
    let mut done = 0usize;
    while done < n {
        let chunk = (n - done).min(SAMPLE_CHUNK);
        let (x, nfe) = sample_batch(&model, Some(&labels[done..done + chunk]), &solver, &mut rng)?;
        all.extend(x.to_vec().iter().map(|v| *v as f32));
        nfe_total += nfe;
        done += chunk;
    }

    let records = vec![
        TensorRecord {
            name: "samples".into(),
            dtype: Dtype::F32,
            dims: vec![n, cfg.channels, cfg.image, cfg.image],
            payload: all.iter().flat_map(|v| v.to_le_bytes()).collect(),
        },
        TensorRecord {
            name: "labels".into(),
            dtype: Dtype::F32,
            dims: vec![n],
            payload: labels
                .iter()
                .flat_map(|l| (*l as f32).to_le_bytes())
                .collect(),
        },
    ];
    let bin_path = out.join("samples.bin");
    std::fs::write(&bin_path, checkpoint::encode(&cfg.to_json(), &records)?)?;

    for i in 0..n.min(PREVIEW_LIMIT) {
        let img = &all[i * per..(i + 1) * per];
        write_preview(
            &out.join(format!(
                "sample_{i:04}.{}",
                if cfg.channels == 3 { "ppm" } else { "pgm" }
            )),
            img,
            cfg.channels,
            cfg.image,
            cfg.image,
        )?;
    }
    Ok(format!(
        "wrote {n} samples to {} ({} model evaluations, method {})",
        bin_path.display(),
        nfe_total,
        solver.method.name()
    ))
}

/// 8-bit preview with a per-image linear map from [min, max] to [0, 255].
fn write_preview(path: &Path, img: &[f32], c: usize, h: usize, w: usize) -> Result<()> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in img {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let quant = |v: f32| -> u8 { ((v - lo) * scale).round().clamp(0.0, 255.0) as u8 };
    let mut bytes = Vec::with_capacity(c * h * w + 32);
    if c == 3 {
        bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
        for r in 0..h {
            for col in 0..w {
                for ch in 0..3 {
                    bytes.push(quant(img[(ch * h + r) * w + col]));
                }
            }
        }
    } else {
        bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        // multi-channel grayscale stacks channels vertically
        bytes.extend(img.iter().map(|&v| quant(v)));
        return Ok(std::fs::write(
            path,
            {
                let mut head = format!("P5\n{w} {}\n255\n", h * c).into_bytes();
                head.extend(img.iter().map(|&v| quant(v)));
                head
            },
        )?);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn load_samples(dir: &Path) -> Result<(Tensor<f32>, Vec<usize>)> {
    let file = checkpoint::decode(&std::fs::read(dir.join("samples.bin"))?)?;
    let mut samples = None;
    let mut labels = Vec::new();
    for rec in &file.tensors {
        let vals: Vec<f32> = rec
            .payload
            .chunks_exact(4)
            .map(f32::from_le_slice)
            .collect();
        match rec.name.as_str() {
            "samples" => samples = Some(Tensor::from_vec(vals, &rec.dims)?),
            "labels" => labels = vals.iter().map(|v| *v as usize).collect(),
            _ => {}
        }
    }
    let samples =
        samples.ok_or_else(|| Error::checkpoint("samples.bin has no \"samples\" tensor"))?;
    Ok((samples, labels))
}

fn eval(cfg: &Config, dir: &Path, report: bool) -> Result<String> {
    let data = ToyDataset::<f32>::generate(
        cfg.dataset_kind()?,
        cfg.data_count,
        cfg.channels,
        cfg.image,
        cfg.image,
        cfg.seed,
    )?;
    let (samples, _labels) = load_samples(dir)?;
    if samples.shape()[1..] != data.images.shape()[1..] {
        return Err(Error::config(format!(
            "sample extent {:?} does not match dataset extent {:?}",
            &samples.shape()[1..],
            &data.images.shape()[1..]
        )));
    }
    let ref_stats = FrechetStats::from_samples(&data.images)?;
    let sample_stats = FrechetStats::from_samples(&samples)?;
    let dist = frechet_distance(&sample_stats, &ref_stats)?;
    let baseline = split_half_baseline(&data.images)?;
    let mut text = format!(
        "frechet: {dist:.4}\nsplit_half_baseline: {baseline:.4}\nratio: {:.2}",
        dist / baseline.max(1e-12)
    );
    if report {
        let model = Model::<f32>::init(cfg, &mut RngStreams::new(0).stream(StreamKind::Init))?;
        text.push_str(&format!(
            "\nparams: {}\nflops_per_image: {}",
            model.param_count(),
            flop_estimate(cfg)
        ));
    }
    Ok(text)
}

/// Fréchet distance between the even- and odd-indexed halves of one dataset:
/// the sampling-noise floor any generated batch is compared against.
pub fn split_half_baseline<T: Scalar>(images: &Tensor<T>) -> Result<f64> {
    let shape = images.shape();
    let n = shape[0];
    if n < 4 {
        return Err(Error::config("baseline needs at least 4 images"));
    }
    let per: usize = shape[1..].iter().product();
    let data = images.data_ref();
    let mut even = Vec::with_capacity(n / 2 * per);
    let mut odd = Vec::with_capacity(n / 2 * per);
    for i in 0..n {
        let row = &data[i * per..(i + 1) * per];
        if i % 2 == 0 {
            even.extend_from_slice(row);
        } else {
            odd.extend_from_slice(row);
        }
    }
    let ne = n - n / 2;
    let half_a = Tensor::from_vec(even, &[ne, per])?;
    let half_b = Tensor::from_vec(odd, &[n / 2, per])?;
    frechet_distance(
        &FrechetStats::from_samples(&half_a)?,
        &FrechetStats::from_samples(&half_b)?,
    )
}

/// Coarse multiply-add count for one forward pass at batch 1, dominated by
/// the linear maps and attention score/context products.
pub fn flop_estimate(cfg: &Config) -> u64 {
    let g = cfg.image / cfg.patch;
    let t = (g * g) as u64;
    let d = cfg.width as u64;
    let e = (cfg.expand * cfg.width) as u64;
    let n = cfg.state as u64;
    let pc = (cfg.patch * cfg.patch * cfg.channels) as u64;
    let mm = |m: u64, k: u64, nn: u64| 2 * m * k * nn;

    // one directional recurrence pass over t tokens
    let mamba = mm(t, d, 2 * e)        // entry projection (stream + gate)
        + 2 * t * e * 4                // depthwise conv, width 4
        + mm(t, e, 2 * n + 1)          // token-dependent B, C, step
        + 8 * t * e * n                // discretize + recurrence + readout
        + mm(t, e, d); // exit projection
    let fusion = 2 * mm(t, d, 3 * d)   // per-branch qkv
        + 2 * (2 * mm(t, t, d))        // two cross attentions: scores + context
        + mm(t, 2 * d, d); // joint output map
    let block = mm(1, d, 5 * d)        // modulation head
        + mamba                        // pixel branch, one order per block
        + 2 * mamba                    // frequency branch, two fixed orders
        + fusion;
    let transformer = mm(1, d, 6 * d)
        + mm(t, d, 3 * d)
        + 2 * mm(t, t, d)
        + mm(t, d, d)
        + 2 * mm(t, d, 4 * d)          // gated expansion (two up maps)
        + mm(t, 4 * d, d);
    let inserts = (cfg.depth / cfg.attn_every.max(1)) as u64;

    mm(t, pc, d)                       // patch embedding
        + 2 * mm(1, d, d)              // conditioning MLP
        + cfg.depth as u64 * block
        + inserts * transformer
        + mm(1, d, 2 * d)
        + mm(t, d, pc) // final modulation + output projection
}

fn perm_dump(kind: &str, dir: usize, height: usize, width: usize, level: usize) -> Result<String> {
    let k = ScanKind::parse(kind)
        .ok_or_else(|| Error::config(format!("unknown scan kind {kind:?}")))?;
    let order = if k == ScanKind::WaveletWindow {
        let direction = match dir {
            0 => WindowDirection::LeftRight,
            1 => WindowDirection::TopBottom,
            other => {
                return Err(Error::config(format!(
                    "window direction {other} out of range (0 = left-right, 1 = top-bottom)"
                )))
            }
        };
        wavelet_window_order(level, height, width, direction)?
    } else {
        make_order(k, dir, height, width)?
    };
    Ok(order
        .perm()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(","))
}

fn run_selfcheck() -> (String, bool) {
    let reports = selfcheck::run_all();
    let ok = selfcheck::all_passed(&reports);
    let mut lines: Vec<String> = reports
        .iter()
        .map(|r| {
            format!(
                "{} {}: {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            )
        })
        .collect();
    lines.push(if ok { "all groups passed".into() } else { "FAILURES present".into() });
    (lines.join("\n"), ok)
}
