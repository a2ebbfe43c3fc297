//! Command-line front end: train, reconstruct, encode, decode, eval.
//!
//! Exit codes: 0 success, 2 usage errors, 3 unreadable or malformed data,
//! 4 numeric failures. Clips move through either tensor containers (a path
//! ending in .cdt) or directories of zero-padded PNG frames.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ckpt::{load_checkpoint, load_codec, save_checkpoint};
use crate::data::{load_split, read_tensor, write_tensor, DatasetManifest};
use crate::error::{Error, Result};
use crate::metrics::{baseline_psnr, evaluate, psnr, EvalReport};
use crate::model::{ModelConfig, VideoCodec};
use crate::perceptual::PerceptualNet;
use crate::sampler::{decode_latent, reconstruct};
use crate::schedule::cosine_schedule;
use crate::stream::StreamReconstructor;
use crate::train::{train_loop, TrainConfig, TrainState};
use crate::video::VideoTensor;
use crate::FORMAT_VERSION;

fn long_version() -> String {
    format!("{} (container format v{FORMAT_VERSION})", env!("CARGO_PKG_VERSION"))
}

#[derive(Parser)]
#[command(name = "cdt", about = "causal diffusion video tokenizer", version = long_version())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Encode a clip, decode it back, write the reconstruction.
    Reconstruct(ReconstructArgs),
    /// Encode a clip to a latent tensor container.
    Encode(EncodeArgs),
    /// Decode a latent tensor container back to a clip.
    Decode(DecodeArgs),
    /// Score reconstructions over a dataset split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [model], [train], and [data] sections.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output directory.
    #[arg(long, default_value = "checkpoints")]
    out: PathBuf,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the dataset manifest path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the total step count (trims or extends the last stage).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input clip: .cdt container or PNG frame directory.
    #[arg(long)]
    input: PathBuf,
    /// Output clip: .cdt container or PNG frame directory.
    #[arg(long)]
    output: PathBuf,
    /// Denoiser evaluations per latent frame chunk.
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode chunk by chunk with feature caches instead of all at once.
    #[arg(long)]
    stream: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output latent container (.cdt).
    #[arg(long)]
    output: PathBuf,
    /// Draw from the posterior instead of taking its mean.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input latent container (.cdt).
    #[arg(long)]
    latent: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the TOML report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// config file

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::usage(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// clip IO

fn is_container(path: &Path) -> bool {
    path.extension().map(|e| e == "cdt").unwrap_or(false)
}

/// Read a clip from a container or a PNG frame directory, in [-1, 1].
pub fn read_clip(path: &Path, device: &Device) -> Result<VideoTensor> {
    if is_container(path) {
        let t = read_tensor(path, device)?;
        return VideoTensor::new(t, None);
    }
    if !path.is_dir() {
        return Err(Error::data(format!(
            "{} is neither a .cdt container nor a frame directory",
            path.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("{} holds no PNG frames", path.display())));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|e| Error::data(format!("{}: {e}", f.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::data(format!("{}: frame sizes differ", path.display())))
            }
            _ => {}
        }
        data.extend(img.pixels().flat_map(|p| p.0).map(|v| v as f32 / 127.5 - 1.0));
    }
    let (h, w) = dims.unwrap();
    let t = Tensor::from_vec(data, (files.len(), h, w, 3), device)?;
    VideoTensor::new(t, None)
}

/// Write a clip to a container or a PNG frame directory.
pub fn write_clip(path: &Path, clip: &Tensor) -> Result<()> {
    if is_container(path) {
        return write_tensor(path, clip);
    }
    fs::create_dir_all(path)?;
    let (t, h, w, c) = clip.dims4()?;
    if c != 3 {
        return Err(Error::data("clips must carry 3 channels"));
    }
    let vals = clip.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    for fi in 0..t {
        let mut buf = Vec::with_capacity(h * w * 3);
        for v in &vals[fi * h * w * 3..(fi + 1) * h * w * 3] {
            buf.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::data("frame buffer size mismatch"))?;
        img.save(path.join(format!("frame_{fi:04}.png")))
            .map_err(|e| Error::data(format!("png write failed: {e}")))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// subcommand bodies

fn cmd_train(args: TrainArgs) -> Result<()> {
    let device = Device::Cpu;
    let cfg = AppConfig::load(&args.config)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    if let Some(lr) = args.lr {
        train_cfg.lr = lr;
    }
    if let Some(bs) = args.batch_size {
        train_cfg.batch_size = bs;
    }
    if let Some(steps) = args.steps {
        set_total_steps(&mut train_cfg, steps)?;
    }
    train_cfg.validate()?;
    cfg.model.validate()?;

    let manifest_path = args
        .data
        .or(cfg.data.manifest)
        .ok_or_else(|| Error::usage("no dataset manifest: pass --data or set [data] manifest"))?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let clips: Vec<Tensor> = load_split(&manifest, "train", &device)?
        .into_iter()
        .map(|v| v.tensor().clone())
        .collect();

    let mut state = match &args.resume {
        Some(dir) => {
            let (state, stored) = load_checkpoint(dir, &device)?;
            if let Some(stored) = stored {
                if stored.stages != train_cfg.stages {
                    eprintln!("note: stage schedule differs from the checkpointed one");
                }
            }
            state
        }
        None => {
            let codec = VideoCodec::new(cfg.model.clone(), DType::F32, &device, train_cfg.seed)?;
            let sched = cosine_schedule(cfg.model.t_count)?;
            TrainState::new(codec, sched)?
        }
    };

    let needs_lpips = train_cfg.stages.iter().any(|s| s.eta_lpips > 0.0);
    let perceptual = if needs_lpips { Some(PerceptualNet::bundled(&device)?) } else { None };

    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train.log");
    let file = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut log = TeeWriter { file, echo: std::io::stderr() };

    let out = args.out.clone();
    let tc = train_cfg.clone();
    train_loop(&mut state, &train_cfg, &clips, perceptual.as_ref(), &mut log, |s| {
        let dir = out.join(format!("step-{:06}", s.step));
        save_checkpoint(&dir, s, Some(&tc))?;
        eprintln!("checkpoint written to {}", dir.display());
        Ok(())
    })?;
    println!("trained to step {} (ema loss {:.6})", state.step, state.ema_loss);
    Ok(())
}

struct TeeWriter {
    file: fs::File,
    echo: std::io::Stderr,
}

impl std::io::Write for TeeWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.echo.write_all(buf)?;
        self.file.write(buf)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.echo.flush()?;
        self.file.flush()
    }
}

/// Trim or extend the final stage so the schedule totals `steps`.
fn set_total_steps(cfg: &mut TrainConfig, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::usage("--steps must be positive"));
    }
    let mut remaining = steps;
    let mut stages = Vec::new();
    for (i, s) in cfg.stages.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let last = i + 1 == cfg.stages.len();
        let take = if last { remaining } else { s.steps.min(remaining) };
        let mut s = s.clone();
        s.steps = take;
        remaining -= take.min(remaining);
        stages.push(s);
    }
    cfg.stages = stages;
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let device = Device::Cpu;
    let (codec, _) = load_codec(&args.checkpoint, &device)?;
    let clip = read_clip(&args.input, &device)?;
    let post = codec.encode(&clip.batched()?)?;
    let latent = if args.sample { post.sample(args.seed, 0)? } else { post.mode() };
    let latent = latent.squeeze(0)?;
    write_tensor(&args.output, &latent)?;
    println!("latent shape={:?}", latent.dims());
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let device = Device::Cpu;
    let (codec, manifest) = load_codec(&args.checkpoint, &device)?;
    let sched = cosine_schedule(manifest.model.t_count)?;
    let latent = read_tensor(&args.latent, &device)?;
    if latent.dims().len() != 4 {
        return Err(Error::data(format!(
            "latents are rank 4 (t, h, w, c), file holds rank {}",
            latent.dims().len()
        )));
    }
    codec.reset_denoiser_calls();
    let t0 = Instant::now();
    let clip = decode_latent(&codec, &sched, &latent.unsqueeze(0)?, args.steps, args.seed)?;
    let secs = t0.elapsed().as_secs_f64();
    write_clip(&args.output, &clip.squeeze(0)?)?;
    println!("denoiser_calls={}", codec.denoiser_calls());
    println!("decode_seconds={secs:.3}");
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let device = Device::Cpu;
    let (codec, manifest) = load_codec(&args.checkpoint, &device)?;
    let sched = cosine_schedule(manifest.model.t_count)?;
    let clip = read_clip(&args.input, &device)?;
    codec.reset_denoiser_calls();
    let t0 = Instant::now();
    let recon = if args.stream {
        let mut rec = StreamReconstructor::new(&codec, &sched, args.steps, args.seed)?;
        let mut parts = Vec::new();
        for chunk in crate::stream::chunk_video(&clip.batched()?)? {
            parts.push(rec.push_chunk(&chunk)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::cat(&refs, 1)?
    } else {
        reconstruct(&codec, &sched, &clip.batched()?, args.steps, args.seed)?
    };
    let secs = t0.elapsed().as_secs_f64();
    let recon = recon.squeeze(0)?;
    let score = psnr(clip.tensor(), &recon)?;
    write_clip(&args.output, &recon)?;
    println!("denoiser_calls={}", codec.denoiser_calls());
    println!("reconstruct_seconds={secs:.3}");
    println!("psnr_db={score:.3}");
    Ok(())
}

#[derive(Serialize)]
struct EvalDocument {
    split: String,
    /// PSNR of predicting the train-split mean frame everywhere.
    baseline_psnr: f64,
    denoiser_calls: u64,
    report: EvalReport,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let device = Device::Cpu;
    let (codec, manifest) = load_codec(&args.checkpoint, &device)?;
    let sched = cosine_schedule(manifest.model.t_count)?;
    let net = PerceptualNet::bundled(&device)?;
    let dataset = DatasetManifest::load(&args.data)?;
    let eval_clips: Vec<(String, Tensor)> = dataset
        .split(&args.split)
        .map(|e| {
            crate::data::load_clip(e, &dataset.base_dir, &dataset.preprocess, &device)
                .map(|v| (e.path.clone(), v.tensor().clone()))
        })
        .collect::<Result<_>>()?;
    if eval_clips.is_empty() {
        return Err(Error::data(format!("manifest has no '{}' clips", args.split)));
    }

    codec.reset_denoiser_calls();
    let report = evaluate(&codec, &sched, &net, &eval_clips, args.steps, args.seed)?;

    // baseline: predict the train-split mean frame for every frame
    let train_clips: Vec<Tensor> =
        load_split(&dataset, "train", &device)?.into_iter().map(|v| v.tensor().clone()).collect();
    let baseline = baseline_psnr(&train_clips, &eval_clips)?;

    let doc = EvalDocument {
        split: args.split.clone(),
        baseline_psnr: baseline,
        denoiser_calls: codec.denoiser_calls(),
        report,
    };
    let text = toml::to_string_pretty(&doc)
        .map_err(|e| Error::data(format!("report serialization failed: {e}")))?;
    match &args.output {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// entry

/// Parse and run; used by both the binary and the tests.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::usage(e.to_string())),
    };
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Process exit code for the binary.
pub fn main() -> i32 {
    match run_from(std::env::args()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use tempfile::tempdir;

    fn args(parts: &[&str]) -> Vec<String> {
        let mut v = vec!["cdt".to_string()];
        v.extend(parts.iter().map(|s| s.to_string()));
        v
    }

    #[test]
    fn usage_errors_carry_exit_code_two() {
        let err = run_from(args(&["bogus-subcommand"])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = run_from(args(&["decode"])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_files_carry_exit_code_three() {
        let err = run_from(args(&[
            "decode",
            "--checkpoint",
            "/nonexistent",
            "--latent",
            "/nonexistent.cdt",
            "--output",
            "/tmp/never.cdt",
        ]))
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn end_to_end_train_encode_decode_eval() {
        let dir = tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let manifest = make_synthetic_dataset(7, 4, 16, 5, &data_dir).unwrap();

        let config = format!(
            r#"
[model]
latent_dim = 3
base_channels = 2
channel_multipliers = [1, 1, 2, 2]
encoder_multipliers = [1, 1, 1, 2]
t_count = 16
temb_dim = 8

[train]
seed = 1
lr = 1e-3
warmup_steps = 2
log_every = 2
checkpoint_every = 0

[[train.stages]]
steps = 4
frames = 5
eta_lpips = 0.0

[data]
manifest = {:?}
"#,
            manifest
        );
        let cfg_path = dir.path().join("cfg.toml");
        fs::write(&cfg_path, config).unwrap();

        let out = dir.path().join("ckpt");
        run_from(args(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]))
        .unwrap();
        let final_ckpt = out.join("step-000004");
        assert!(final_ckpt.join("manifest.toml").is_file());

        // encode a fresh clip from the dataset's first directory
        let clip_dir = data_dir.join("clip_0000");
        let latent = dir.path().join("z.cdt");
        run_from(args(&[
            "encode",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--input",
            clip_dir.to_str().unwrap(),
            "--output",
            latent.to_str().unwrap(),
        ]))
        .unwrap();
        let z = read_tensor(&latent, &Device::Cpu).unwrap();
        assert_eq!(z.dims(), &[2, 2, 2, 3]);

        let decoded = dir.path().join("decoded");
        run_from(args(&[
            "decode",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--latent",
            latent.to_str().unwrap(),
            "--output",
            decoded.to_str().unwrap(),
            "--steps",
            "2",
        ]))
        .unwrap();
        assert!(decoded.join("frame_0000.png").is_file());
        assert!(decoded.join("frame_0004.png").is_file());

        let recon = dir.path().join("recon.cdt");
        run_from(args(&[
            "reconstruct",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--input",
            clip_dir.to_str().unwrap(),
            "--output",
            recon.to_str().unwrap(),
            "--steps",
            "2",
            "--stream",
        ]))
        .unwrap();
        let r = read_tensor(&recon, &Device::Cpu).unwrap();
        assert_eq!(r.dims(), &[5, 16, 16, 3]);

        let report_path = dir.path().join("report.toml");
        run_from(args(&[
            "eval",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--steps",
            "2",
            "--output",
            report_path.to_str().unwrap(),
        ]))
        .unwrap();
        let text = fs::read_to_string(&report_path).unwrap();
        assert!(text.contains("baseline_psnr"), "{text}");
        assert!(text.contains("mean_psnr"), "{text}");
        assert!(text.contains("denoiser_calls"), "{text}");

        // resume: two more steps from the saved checkpoint
        run_from(args(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--resume",
            final_ckpt.to_str().unwrap(),
            "--steps",
            "6",
        ]))
        .unwrap();
        assert!(out.join("step-000006").join("manifest.toml").is_file());
    }

    #[test]
    fn steps_override_reshapes_schedule() {
        let mut cfg = TrainConfig::default();
        set_total_steps(&mut cfg, 3000).unwrap();
        assert_eq!(cfg.total_steps(), 3000);
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(cfg.stages[0].steps, 2500);
        assert_eq!(cfg.stages[1].steps, 500);

        let mut cfg = TrainConfig::default();
        set_total_steps(&mut cfg, 1000).unwrap();
        assert_eq!(cfg.total_steps(), 1000);
        assert_eq!(cfg.stages.len(), 1);

        let mut cfg = TrainConfig::default();
        set_total_steps(&mut cfg, 9000).unwrap();
        assert_eq!(cfg.total_steps(), 9000);
        assert_eq!(cfg.stages[1].steps, 6500);
    }
}
