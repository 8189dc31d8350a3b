//! `evifuse`: command-line access to every pipeline stage.
//!
//! Each subcommand prints one JSON summary object on stdout with the fields
//! `command`, `inputs`, `outputs`, `stats` and `elapsed_ms`. `train-toy`
//! additionally prints one JSON line per epoch before the summary.
//! Exit codes: 1 validation, 2 I/O or format, 3 numerical.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use evifuse::mixing::{generate_mask, mix_pair, restore_grids, MixMask};
use evifuse::tensor_io::{load_u8_grid, save_u8_grid};
use evifuse::trainer::{
    evaluate, generate_synthetic_with, load_model, pretrain_logged, save_model, self_train_logged,
    toy_dataset, TrainConfig,
};
use evifuse::uncertainty::uncertainty_volume_with;
use evifuse::vwal::weight_volume;
use evifuse::{
    evidence_to_belief, fuse_volumes, load_tensor, save_tensor, BeliefVolume, EntropyMode, Error,
    ErrorKind, FusionConfig, RankOrder, VoxelGrid, WeightSchedule,
};

#[derive(Debug, Parser)]
#[command(
    name = "evifuse",
    version,
    about = "Evidential fusion toolkit for volumetric segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fuse two belief volumes voxel by voxel.
    Fuse {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the raw (unnormalized) fused masses.
        #[arg(long)]
        no_renorm: bool,
        /// Treat inputs as evidence logits (W,H,L,N) instead of beliefs.
        #[arg(long)]
        logits: bool,
    },
    /// Entropy-scaled uncertainty of a belief volume.
    Uncertainty {
        #[arg(long)]
        belief: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the singleton masses as-is instead of renormalizing them.
        #[arg(long)]
        raw_delta: bool,
    },
    /// Rank-based voxel weights for one epoch.
    Weights {
        #[arg(long)]
        u: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        /// asc (most uncertain voxel gets the top rank) or desc.
        #[arg(long, default_value = "asc")]
        order: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy-paste mix two volumes with a seeded box mask.
    Mix {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Zero box edge lengths: one value or `w,h,l`.
        #[arg(long)]
        zero_size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Undo a mix on predictions of the two mixed volumes.
    Restore {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
    },
    /// Pre-train and self-train the toy model on synthetic volumes.
    TrainToy {
        /// `key=value` config file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory for the student model bundle.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice and Jaccard of a saved model on fresh synthetic volumes.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        size: usize,
    },
    /// Write one axial slice of a tensor as a binary PGM image.
    SliceExport {
        #[arg(long)]
        input: PathBuf,
        /// Index along the last spatial axis.
        #[arg(long)]
        slice: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

type CmdResult = evifuse::Result<(Value, Value, Value)>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let start = Instant::now();
    let name = command_name(&cli.command);
    match run(cli.command) {
        Ok((inputs, outputs, stats)) => {
            let summary = json!({
                "command": name,
                "inputs": inputs,
                "outputs": outputs,
                "stats": stats,
                "elapsed_ms": start.elapsed().as_millis() as u64,
            });
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 1,
        ErrorKind::Io => 2,
        ErrorKind::Numerical => 3,
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Fuse { .. } => "fuse",
        Command::Uncertainty { .. } => "uncertainty",
        Command::Weights { .. } => "weights",
        Command::Mix { .. } => "mix",
        Command::Restore { .. } => "restore",
        Command::TrainToy { .. } => "train-toy",
        Command::Eval { .. } => "eval",
        Command::SliceExport { .. } => "slice-export",
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Fuse {
            a,
            b,
            out,
            no_renorm,
            logits,
        } => fuse(&a, &b, &out, no_renorm, logits),
        Command::Uncertainty {
            belief,
            out,
            raw_delta,
        } => uncertainty(&belief, &out, raw_delta),
        Command::Weights {
            u,
            epoch,
            epochs,
            epsilon,
            order,
            out,
        } => weights(&u, epoch, epochs, epsilon, &order, &out),
        Command::Mix {
            a,
            b,
            zero_size,
            seed,
            out_a,
            out_b,
            mask_out,
        } => mix(
            &a,
            &b,
            &zero_size,
            seed,
            &out_a,
            &out_b,
            mask_out.as_deref(),
        ),
        Command::Restore {
            a,
            b,
            mask,
            out_a,
            out_b,
        } => restore(&a, &b, &mask, &out_a, &out_b),
        Command::TrainToy {
            config,
            seed,
            overrides,
            out,
        } => train_toy(config.as_deref(), seed, &overrides, out.as_deref()),
        Command::Eval {
            model,
            count,
            seed,
            size,
        } => eval(&model, count, seed, size),
        Command::SliceExport {
            input,
            slice,
            channel,
            out,
        } => slice_export(&input, slice, channel, &out),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn value_stats(values: impl Iterator<Item = f32>) -> Value {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        let v = v as f64;
        min = min.min(v);
        max = max.max(v);
        sum += v;
        count += 1;
    }
    json!({ "min": min, "mean": sum / count.max(1) as f64, "max": max, "count": count })
}

fn load_belief(path: &Path, logits: bool) -> evifuse::Result<BeliefVolume> {
    let grid = load_tensor(path)?;
    if logits {
        evidence_to_belief(&grid)
    } else {
        BeliefVolume::from_grid(grid)
    }
}

fn fuse(a: &Path, b: &Path, out: &Path, no_renorm: bool, logits: bool) -> CmdResult {
    let va = load_belief(a, logits)?;
    let vb = load_belief(b, logits)?;
    let cfg = if no_renorm {
        FusionConfig::raw()
    } else {
        FusionConfig::default()
    };
    let fused = fuse_volumes(&va, &vb, &cfg)?;
    let n = fused.num_classes();
    save_tensor(fused.grid(), out)?;
    let composite = fused.grid().data().chunks(n + 1).map(|v| v[n]);
    Ok((
        json!({ "a": path_str(a), "b": path_str(b), "logits": logits }),
        json!({ "fused": path_str(out) }),
        json!({
            "shape": fused.grid().shape(),
            "renormalized": !no_renorm,
            "composite": value_stats(composite),
        }),
    ))
}

fn uncertainty(belief: &Path, out: &Path, raw_delta: bool) -> CmdResult {
    let v = BeliefVolume::from_grid(load_tensor(belief)?)?;
    let mode = if raw_delta {
        EntropyMode::Raw
    } else {
        EntropyMode::Renormalized
    };
    let u = uncertainty_volume_with(&v, mode)?;
    save_tensor(u.grid(), out)?;
    Ok((
        json!({ "belief": path_str(belief), "raw_delta": raw_delta }),
        json!({ "uncertainty": path_str(out) }),
        value_stats(u.values().iter().copied()),
    ))
}

fn weights(
    u: &Path,
    epoch: usize,
    epochs: usize,
    epsilon: f64,
    order: &str,
    out: &Path,
) -> CmdResult {
    let order: RankOrder = order.parse()?;
    let sched = WeightSchedule::new(epsilon, epoch, epochs, order)?;
    let grid = load_tensor(u)?;
    let u_vol = evifuse::UncertaintyVolume::new(grid)?;
    let w = weight_volume(&u_vol, &sched)?;
    save_tensor(&w, out)?;
    Ok((
        json!({ "u": path_str(u), "epoch": epoch, "epochs": epochs, "epsilon": epsilon, "order": order }),
        json!({ "weights": path_str(out) }),
        value_stats(w.data().iter().copied()),
    ))
}

fn parse_size(text: &str) -> evifuse::Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Contract(format!("bad zero size {text:?}")))
        })
        .collect::<evifuse::Result<_>>()?;
    match parts[..] {
        [d] => Ok([d, d, d]),
        [w, h, l] => Ok([w, h, l]),
        _ => Err(Error::Contract(format!(
            "zero size takes 1 or 3 values, got {text:?}"
        ))),
    }
}

fn mix(
    a: &Path,
    b: &Path,
    zero_size: &str,
    seed: u64,
    out_a: &Path,
    out_b: &Path,
    mask_out: Option<&Path>,
) -> CmdResult {
    let size = parse_size(zero_size)?;
    let ga = load_tensor(a)?;
    let gb = load_tensor(b)?;
    let mask = generate_mask(ga.dims(), size, seed)?;
    let pair = mix_pair(&ga, &gb, &mask)?;
    save_tensor(&pair.mixed_a, out_a)?;
    save_tensor(&pair.mixed_b, out_b)?;
    let mut outputs = json!({ "mixed_a": path_str(out_a), "mixed_b": path_str(out_b) });
    if let Some(m) = mask_out {
        save_u8_grid(mask.dims(), &mask.values(), m)?;
        outputs["mask"] = json!(path_str(m));
    }
    Ok((
        json!({ "a": path_str(a), "b": path_str(b), "zero_size": size, "seed": seed }),
        outputs,
        json!({
            "origin": mask.origin(),
            "size": mask.size(),
            "zero_count": mask.zero_count(),
        }),
    ))
}

fn restore(a: &Path, b: &Path, mask: &Path, out_a: &Path, out_b: &Path) -> CmdResult {
    let ga = load_tensor(a)?;
    let gb = load_tensor(b)?;
    let (dims, values) = load_u8_grid(mask)?;
    let m = MixMask::from_values(dims, &values)?;
    let (ra, rb) = restore_grids(&ga, &gb, &m)?;
    save_tensor(&ra, out_a)?;
    save_tensor(&rb, out_b)?;
    Ok((
        json!({ "a": path_str(a), "b": path_str(b), "mask": path_str(mask) }),
        json!({ "restored_a": path_str(out_a), "restored_b": path_str(out_b) }),
        json!({ "shape": ra.shape(), "zero_count": m.zero_count() }),
    ))
}

fn read_config(
    config: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> evifuse::Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            TrainConfig::from_kv_str(&text)?
        }
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Contract(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_line(value: &Value) {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let _ = writeln!(lock, "{value}");
}

fn train_toy(
    config: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
    out: Option<&Path>,
) -> CmdResult {
    let cfg = read_config(config, seed, overrides)?;
    let (train, test) = toy_dataset(&cfg)?;
    let log = |m: &evifuse::trainer::EpochMetrics| emit_line(&json!(m));
    let init = pretrain_logged(&train, &cfg, log)?;
    let (student, teacher) = self_train_logged(&init, &train, &cfg, log)?;
    let stats = if test.is_empty() {
        json!({})
    } else {
        json!({
            "pretrain": evaluate(&init, &test)?,
            "student": evaluate(&student, &test)?,
            "teacher": evaluate(&teacher, &test)?,
        })
    };
    let mut outputs = json!({});
    if let Some(dir) = out {
        save_model(&student, dir)?;
        outputs["model"] = json!(path_str(dir));
    }
    Ok((
        json!({ "config": config.map(path_str), "settings": cfg }),
        outputs,
        stats,
    ))
}

fn eval(model: &Path, count: usize, seed: u64, size: usize) -> CmdResult {
    let m = load_model(model)?;
    let data = generate_synthetic_with(count, count, [size; 3], seed)?;
    let metrics = evaluate(&m, data.samples())?;
    Ok((
        json!({ "model": path_str(model), "count": count, "seed": seed, "size": size }),
        json!({}),
        json!(metrics),
    ))
}

fn slice_export(input: &Path, slice: usize, channel: usize, out: &Path) -> CmdResult {
    let grid = load_tensor(input)?;
    let pixels = axial_slice(&grid, slice, channel)?;
    let [w, h, _] = grid.dims();
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    // PGM rows run along y, columns along x
    for y in 0..h {
        for x in 0..w {
            let v = pixels[x * h + y];
            let g = if span > 0.0 {
                (v - lo) / span * 255.0
            } else {
                0.0
            };
            bytes.push(g.round() as u8);
        }
    }
    std::fs::write(out, &bytes).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok((
        json!({ "input": path_str(input), "slice": slice, "channel": channel }),
        json!({ "image": path_str(out) }),
        json!({ "width": w, "height": h, "min": lo, "max": hi }),
    ))
}

/// Values at `z = slice` in x-major order.
fn axial_slice(grid: &VoxelGrid, slice: usize, channel: usize) -> evifuse::Result<Vec<f32>> {
    let [w, h, l] = grid.dims();
    let k = grid.channels();
    if slice >= l {
        return Err(Error::Contract(format!("slice {slice} outside 0..{l}")));
    }
    if channel >= k {
        return Err(Error::Contract(format!("channel {channel} outside 0..{k}")));
    }
    let mut out = Vec::with_capacity(w * h);
    for x in 0..w {
        for y in 0..h {
            out.push(grid.data()[((x * h + y) * l + slice) * k + channel]);
        }
    }
    Ok(out)
}
