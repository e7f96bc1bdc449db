//! Thin command-line front end; all functionality lives in the library.

use clap::{Args, Parser, Subcommand};
use mttf::bitstream::{ExternalCodec, KeyframeCodec, LosslessCodec};
use mttf::error::{Error, Result};
use mttf::eval::{bd_rate, decode, encode, rd_sweep, read_rd_csv, BdMethod, MetricAdapter, MetricKind};
use mttf::model::{Model, ModelConfig};
use mttf::train::{train, Dataset, LuminanceMatting, RandomFeatureBackend, TrainConfig};
use mttf::video::Video;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mttf", about = "Generative human-video codec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct KeyframeCodecArgs {
    /// Key-frame codec: "lossless" or "external"
    #[arg(long, default_value = "lossless")]
    keyframe_codec: String,
    /// External encode command template ({input}, {output}, {qp})
    #[arg(long)]
    kf_encode_cmd: Option<String>,
    /// External decode command template ({input}, {output})
    #[arg(long)]
    kf_decode_cmd: Option<String>,
}

impl KeyframeCodecArgs {
    fn build(&self) -> Result<Box<dyn KeyframeCodec>> {
        match self.keyframe_codec.as_str() {
            "lossless" => Ok(Box::new(LosslessCodec)),
            "external" => {
                let encode_command = self
                    .kf_encode_cmd
                    .clone()
                    .ok_or_else(|| Error::config("external codec needs --kf-encode-cmd"))?;
                let decode_command = self
                    .kf_decode_cmd
                    .clone()
                    .ok_or_else(|| Error::config("external codec needs --kf-decode-cmd"))?;
                Ok(Box::new(ExternalCodec {
                    encode_command,
                    decode_command,
                }))
            }
            other => Err(Error::config(format!("unknown key-frame codec {other:?}"))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode a raw/Y4M video into an .mttf stream
    Encode {
        /// Input video (.rgb with sidecar descriptor, or .y4m)
        #[arg(long)]
        input: PathBuf,
        /// Model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output .mttf path
        #[arg(long)]
        output: PathBuf,
        /// Key-frame quantization parameter
        #[arg(long, default_value_t = 32)]
        qp: u8,
        /// Vector quantization step as a rational, e.g. 1/50 or 0.02
        #[arg(long, default_value = "1/50")]
        delta: String,
        /// Resize the input to supported resolution index i (r >> i) first
        #[arg(long)]
        resolution_index: Option<usize>,
        /// Write a JSON stats report here
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        codec: KeyframeCodecArgs,
    },
    /// Decode an .mttf stream back into a raw video
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output video path (.rgb plus sidecar descriptor)
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        codec: KeyframeCodecArgs,
    },
    /// Train a model on a directory of clips
    Train {
        /// Directory of .rgb/.y4m clips
        #[arg(long)]
        data: PathBuf,
        /// Training config (key=value); defaults match the built-in schedule
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model config (key=value) used when starting fresh
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Continue from an existing checkpoint instead
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Where to store checkpoints
        #[arg(long)]
        checkpoint_dir: PathBuf,
        /// CSV scalar log path
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the training seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Quality metrics between two videos
    Metrics {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        distorted: PathBuf,
        /// Comma-separated metrics; non-PSNR entries as name=command
        #[arg(long, default_value = "psnr")]
        metric: String,
    },
    /// BD-rate between two rate/quality CSV curves
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Interpolation: "pchip" (default) or "cubic"
        #[arg(long, default_value = "pchip")]
        method: String,
    },
    /// Rate-distortion sweep over QPs and quantization steps
    Sweep {
        /// Comma-separated video paths
        #[arg(long)]
        sequences: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated key-frame QPs
        #[arg(long, default_value = "22,32,42,52")]
        qps: String,
        /// Comma-separated vector quantization steps (rationals)
        #[arg(long, default_value = "1/50")]
        deltas: String,
        /// Comma-separated metrics; non-PSNR entries as name=command
        #[arg(long, default_value = "psnr")]
        metrics: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        codec: KeyframeCodecArgs,
    },
}

/// Parses "1/50" or a short decimal like "0.02" into an exact u16 rational.
fn parse_rational(s: &str) -> Result<(u16, u16)> {
    let bad = || Error::config(format!("bad rational {s:?}"));
    if let Some((n, d)) = s.split_once('/') {
        let num: u16 = n.trim().parse().map_err(|_| bad())?;
        let den: u16 = d.trim().parse().map_err(|_| bad())?;
        if num == 0 || den == 0 {
            return Err(bad());
        }
        return Ok((num, den));
    }
    let value: f64 = s.trim().parse().map_err(|_| bad())?;
    if !(value > 0.0) {
        return Err(bad());
    }
    let mut den = 1u64;
    let mut num = value;
    while num.fract().abs() > 1e-9 && den < 100_000 {
        num *= 10.0;
        den *= 10;
    }
    let mut num = num.round() as u64;
    let gcd = {
        let (mut a, mut b) = (num, den);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a.max(1)
    };
    num /= gcd;
    let den = den / gcd;
    if num == 0 || num > u16::MAX as u64 || den > u16::MAX as u64 {
        return Err(bad());
    }
    Ok((num as u16, den as u16))
}

fn parse_metrics(spec: &str) -> Result<Vec<MetricAdapter>> {
    spec.split(',')
        .map(|entry| {
            let entry = entry.trim();
            match entry.split_once('=') {
                Some((name, command)) => Ok(MetricAdapter {
                    kind: MetricKind::parse(name)?,
                    command: Some(command.to_string()),
                }),
                None => {
                    let kind = MetricKind::parse(entry)?;
                    if kind != MetricKind::Psnr {
                        return Err(Error::config(format!(
                            "metric {} needs an external command (use {}=<command>)",
                            kind.id(),
                            kind.id()
                        )));
                    }
                    Ok(MetricAdapter::builtin_psnr())
                }
            }
        })
        .collect()
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Eval(format!("stats serialization failed: {e}")))?;
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Encode {
            input,
            checkpoint,
            output,
            qp,
            delta,
            resolution_index,
            stats,
            codec,
        } => {
            let model = Model::load_checkpoint(&checkpoint)?;
            let mut video = Video::load(&input)?;
            if let Some(i) = resolution_index {
                let target = model
                    .cfg
                    .supported_resolutions()
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::config(format!("resolution index {i} out of range")))?;
                video = Video::new(
                    video
                        .frames
                        .iter()
                        .map(|f| mttf::video::resize_frame(f, target))
                        .collect(),
                    video.fps,
                )?;
            }
            let (num, den) = parse_rational(&delta)?;
            let codec = codec.build()?;
            let (stream, report) = encode(&video, &model, codec.as_ref(), qp, num, den)?;
            std::fs::write(&output, &stream)?;
            write_json(&report, stats.as_ref())?;
        }
        Command::Decode {
            input,
            checkpoint,
            output,
            stats,
            codec,
        } => {
            let model = Model::load_checkpoint(&checkpoint)?;
            let stream = std::fs::read(&input)?;
            let codec = codec.build()?;
            let (video, report) = decode(&stream, &model, codec.as_ref())?;
            video.save_raw(&output)?;
            write_json(&report, stats.as_ref())?;
        }
        Command::Train {
            data,
            config,
            model_config,
            init_checkpoint,
            checkpoint_dir,
            log,
            seed,
        } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::from_file(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.checkpoint_dir = Some(checkpoint_dir);
            cfg.log_path = log;
            let mut model = match (init_checkpoint, model_config) {
                (Some(ckpt), _) => Model::load_checkpoint(&ckpt)?,
                (None, Some(path)) => {
                    Model::new(ModelConfig::from_key_values(&std::fs::read_to_string(&path)?)?)?
                }
                (None, None) => Model::new(ModelConfig::toy())?,
            };
            let dataset = Dataset::from_dir(&data)?;
            let backend = RandomFeatureBackend::new(cfg.seed ^ 0x5eed);
            let matting = LuminanceMatting::default();
            let report = train(&mut model, &dataset, &cfg, &backend, &matting)?;
            let last = report.step_losses.last();
            println!(
                "trained {} steps; final total loss {:.6}; checkpoint {:?}",
                report.step_losses.len(),
                last.map(|l| l.total).unwrap_or(f64::NAN),
                report.final_checkpoint
            );
        }
        Command::Metrics {
            reference,
            distorted,
            metric,
        } => {
            let a = Video::load(&reference)?;
            let b = Video::load(&distorted)?;
            let adapters = parse_metrics(&metric)?;
            let mut report = serde_json::Map::new();
            // Non-finite scores (identical videos give +inf PSNR) appear as
            // string sentinels; JSON numbers cannot hold infinities.
            let json_score = |v: f64| -> serde_json::Value {
                if v.is_finite() {
                    v.into()
                } else {
                    v.to_string().into()
                }
            };
            for adapter in &adapters {
                let raw = adapter.measure(&a, &b)?;
                report.insert(adapter.kind.id().to_string(), json_score(raw));
                report.insert(
                    adapter.kind.display_label().to_string(),
                    json_score(adapter.kind.display_value(raw)),
                );
            }
            println!("{}", serde_json::Value::Object(report));
        }
        Command::Bdrate { anchor, test, method } => {
            let method = match method.as_str() {
                "pchip" => BdMethod::Pchip,
                "cubic" => BdMethod::CubicFit,
                other => return Err(Error::config(format!("unknown BD-rate method {other:?}"))),
            };
            let a = read_rd_csv(&anchor)?;
            let t = read_rd_csv(&test)?;
            let bd = bd_rate(&a, &t, method)?;
            println!("{bd:+.4}%");
        }
        Command::Sweep {
            sequences,
            checkpoint,
            qps,
            deltas,
            metrics,
            out_dir,
            codec,
        } => {
            let model = Model::load_checkpoint(&checkpoint)?;
            let codec = codec.build()?;
            let seqs: Vec<(String, Video)> = sequences
                .split(',')
                .map(|p| {
                    let path = PathBuf::from(p.trim());
                    let name = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.trim().to_string());
                    Video::load(&path).map(|v| (name, v))
                })
                .collect::<Result<_>>()?;
            let qps: Vec<u8> = qps
                .split(',')
                .map(|q| q.trim().parse().map_err(|_| Error::config(format!("bad qp {q:?}"))))
                .collect::<Result<_>>()?;
            let steps: Vec<(u16, u16)> = deltas
                .split(',')
                .map(|d| parse_rational(d.trim()))
                .collect::<Result<_>>()?;
            let adapters = parse_metrics(&metrics)?;
            let result = rd_sweep(&seqs, &model, codec.as_ref(), &qps, &steps, &adapters, &out_dir)?;
            println!(
                "{} operating points -> {}",
                result.rows.len(),
                out_dir.join("rd_table.csv").display()
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
