//! `audiofm`: operator surface for the toy audio generation stack —
//! dataset generation, training, sampling, outpainting, evaluation, plots.
//!
//! Every command is reproducible from (config file, seed) alone. Exit
//! codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric error,
//! 1 anything else.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use audiofm_core::checkpoint;
use audiofm_core::dataset;
use audiofm_core::metrics::{frechet_distance, log_mel_frames, onset_desync, swsd, DesyncResult, MelConfig};
use audiofm_core::model::Parameters;
use audiofm_core::sample::{
    long_form_generate, shortcut_sample, slice_conditioning, GenerationRequest, NetModel,
    ReferenceAudio, SamplerConfig,
};
use audiofm_core::synth::{build_dataset, decode_to_waveform};
use audiofm_core::train::{train_loop, TrainState};
use audiofm_core::wav::{read_wav, write_wav};
use audiofm_core::{CoreError, Result, SeededRng, Tensor, LATENT_RATE_HZ};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "audiofm",
    about = "Toy latent-audio generation: data, training, sampling, evaluation",
    long_about = "Toy latent-audio generation stack.\n\n\
All numeric settings live in a TOML config file with sections \
[data], [model], [train], [sample], [metrics]; every key has a default \
and unknown keys are rejected. Commands are byte-reproducible from \
(config, seed).\n\n\
Config keys:\n\
  [data]    n_clips, seed, duration_min, duration_max, event_rate, n_classes, background_amp\n\
  [model]   audio_dim, model_dim, heads, n_mm_blocks, n_mm_blocks_with_audio_self_attn,\n\
            n_single_blocks, semantic_dim, sync_dim, text_dim, mlp_ratio\n\
  [train]   steps, batch_size, lr, ema_rate, cond_dropout, mask_prob, consistency_ratio,\n\
            mask_span_min, mask_span_max, n_step_levels, clip_tokens, seed, checkpoint_every\n\
  [sample]  n_steps, guidance, seed, duration_s\n\
  [metrics] k_projections, seed, non_negative_mels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (clips + index)
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the velocity network; writes a checkpoint and a loss CSV
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override [train].steps
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample a clip conditioned on a dataset clip's scene
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        /// Trained checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset clip file providing the conditioning streams
        #[arg(long)]
        clip: PathBuf,
        /// Output prefix; writes <out>.lat and <out>.wav
        #[arg(long)]
        out: PathBuf,
        /// Override [sample].n_steps
        #[arg(long)]
        steps: Option<usize>,
        /// Override [sample].guidance
        #[arg(long)]
        guidance: Option<f64>,
        /// Override [sample].seed
        #[arg(long)]
        seed: Option<u64>,
        /// Latent tensor file spliced in as reference audio
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Token index where the reference starts
        #[arg(long, default_value_t = 0)]
        ref_start: usize,
    },
    /// Long-form generation by chained outpainting
    Outpaint {
        #[command(flatten)]
        config: ConfigArg,
        /// Trained checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset clip file providing the conditioning streams
        #[arg(long)]
        clip: PathBuf,
        /// Total duration to generate, seconds
        #[arg(long)]
        seconds: f64,
        /// Output prefix; writes <out>.lat and <out>.wav
        #[arg(long)]
        out: PathBuf,
        /// Override [sample].seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate generated clips against reference dataset clips; emits CSV
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory with generated <id>.lat files
        #[arg(long)]
        generated: PathBuf,
        /// Reference dataset directory (gen-data output)
        #[arg(long)]
        reference: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Exclude a token span `start:len` from both clips before metrics
        #[arg(long)]
        exclude_span: Option<String>,
    },
    /// Render a mel-spectrogram image + CSV matrix from a .wav or .lat file
    Plot {
        #[command(flatten)]
        config: ConfigArg,
        /// Input file (.wav waveform or .lat latent tensor)
        #[arg(long)]
        input: PathBuf,
        /// Output prefix; writes <out>.png and <out>.csv
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CoreError::Config(_) => 2,
                CoreError::Io(_) => 3,
                CoreError::Numeric(_) | CoreError::SamplerDivergence(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            steps,
        } => cmd_train(&config, &data, &out, resume.as_deref(), steps),
        Command::Sample {
            config,
            ckpt,
            clip,
            out,
            steps,
            guidance,
            seed,
            reference,
            ref_start,
        } => cmd_sample(
            &config,
            &ckpt,
            &clip,
            &out,
            steps,
            guidance,
            seed,
            reference.as_deref(),
            ref_start,
        ),
        Command::Outpaint {
            config,
            ckpt,
            clip,
            seconds,
            out,
            seed,
        } => cmd_outpaint(&config, &ckpt, &clip, seconds, &out, seed),
        Command::Eval {
            config,
            generated,
            reference,
            out,
            exclude_span,
        } => cmd_eval(&config, &generated, &reference, &out, exclude_span.as_deref()),
        Command::Plot { config, input, out } => cmd_plot(&config, &input, &out),
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    RunConfig::load(arg.config.as_deref())
}

fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    t.write_to(&mut w)?;
    Ok(())
}

fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    Tensor::read_from(&mut r)
}

fn cmd_gen_data(config: &ConfigArg, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let clips = build_dataset(&cfg.synth_config(), cfg.data.n_clips, cfg.data.seed)?;
    dataset::save_dataset(out, &clips)?;
    println!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn cmd_train(
    config: &ConfigArg,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    steps: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let clips = dataset::load_dataset(data)?;
    let model_cfg = cfg.model_config();
    let mut train_cfg = cfg.train_config();
    if let Some(s) = steps {
        train_cfg.steps = s;
    }
    let mut state = match resume {
        Some(path) => {
            let (ckpt_cfg, state) = checkpoint::load(path)?;
            if ckpt_cfg != model_cfg {
                return Err(CoreError::Config(
                    "checkpoint model config differs from [model] section".into(),
                ));
            }
            state
        }
        None => {
            let mut rng = SeededRng::new(train_cfg.seed);
            TrainState::new(Parameters::init(&model_cfg, &mut rng)?)
        }
    };
    let ckpt_dir = out.parent().map(Path::to_path_buf);
    let log = train_loop(&model_cfg, &train_cfg, &clips, &mut state, ckpt_dir.as_deref())?;
    checkpoint::save(out, &model_cfg, &state)?;
    let csv_path = out.with_extension("loss.csv");
    let mut csv = String::from("step,loss_fm,loss_sc,grad_norm\n");
    for row in &log {
        csv.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e}\n",
            row.step, row.loss_fm, row.loss_sc, row.grad_norm
        ));
    }
    std::fs::write(&csv_path, csv)?;
    println!(
        "trained to step {}; checkpoint {}, loss curve {}",
        state.step,
        out.display(),
        csv_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    config: &ConfigArg,
    ckpt: &Path,
    clip: &Path,
    out: &Path,
    steps: Option<usize>,
    guidance: Option<f64>,
    seed: Option<u64>,
    reference: Option<&Path>,
    ref_start: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (model_cfg, state) = checkpoint::load(ckpt)?;
    let source = dataset::load_clip(clip)?;
    let sampler = SamplerConfig {
        n_steps: steps.unwrap_or(cfg.sample.n_steps),
        guidance_w: guidance.unwrap_or(cfg.sample.guidance),
        seed: seed.unwrap_or(cfg.sample.seed),
    };
    let total_len = ((cfg.sample.duration_s * LATENT_RATE_HZ).round() as usize)
        .min(source.latents.rows())
        .max(1);
    let reference = match reference {
        Some(path) => {
            let latents = read_tensor_file(path)?;
            if ref_start + latents.rows() > total_len {
                return Err(CoreError::Range(format!(
                    "reference span [{ref_start}, {}) exceeds output length {total_len}",
                    ref_start + latents.rows()
                )));
            }
            Some(ReferenceAudio {
                latents,
                start_pos: ref_start,
            })
        }
        None => None,
    };
    let request = GenerationRequest {
        cond: slice_conditioning(&source.cond, 0, total_len)?,
        total_len,
        reference,
    };
    let model = NetModel {
        params: &state.ema,
        config: &model_cfg,
    };
    let mut rng = SeededRng::new(sampler.seed);
    let latents = shortcut_sample(&model, &request, &sampler, &mut rng)?;
    write_outputs(out, &latents)
}

fn cmd_outpaint(
    config: &ConfigArg,
    ckpt: &Path,
    clip: &Path,
    seconds: f64,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (model_cfg, state) = checkpoint::load(ckpt)?;
    let source = dataset::load_clip(clip)?;
    let sampler = SamplerConfig {
        n_steps: cfg.sample.n_steps,
        guidance_w: cfg.sample.guidance,
        seed: seed.unwrap_or(cfg.sample.seed),
    };
    let model = NetModel {
        params: &state.ema,
        config: &model_cfg,
    };
    let latents = long_form_generate(&model, &source.cond, seconds, &sampler)?;
    write_outputs(out, &latents)
}

fn write_outputs(out: &Path, latents: &Tensor) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let lat_path = out.with_extension("lat");
    write_tensor_file(&lat_path, latents)?;
    let wav_path = out.with_extension("wav");
    write_wav(&wav_path, &decode_to_waveform(latents))?;
    println!("wrote {} and {}", lat_path.display(), wav_path.display());
    Ok(())
}

fn parse_span(spec: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 2 {
        return Err(CoreError::Config(format!(
            "expected --exclude-span start:len, got {spec:?}"
        )));
    }
    let start = parts[0]
        .parse()
        .map_err(|_| CoreError::Config(format!("bad span start {:?}", parts[0])))?;
    let len = parts[1]
        .parse()
        .map_err(|_| CoreError::Config(format!("bad span length {:?}", parts[1])))?;
    Ok((start, len))
}

fn drop_span(clip: &Tensor, span: Option<(usize, usize)>) -> Result<Tensor> {
    let Some((start, len)) = span else {
        return Ok(clip.clone());
    };
    if start + len > clip.rows() {
        return Err(CoreError::Range(format!(
            "exclude span [{start}, {}) exceeds clip length {}",
            start + len,
            clip.rows()
        )));
    }
    let d = clip.cols();
    let mut data = Vec::with_capacity((clip.rows() - len) * d);
    for i in 0..clip.rows() {
        if i < start || i >= start + len {
            data.extend_from_slice(clip.row(i));
        }
    }
    Tensor::new(vec![clip.rows() - len, d], data)
}

fn cmd_eval(
    config: &ConfigArg,
    generated: &Path,
    reference: &Path,
    out: &Path,
    exclude_span: Option<&str>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let span = exclude_span.map(parse_span).transpose()?;
    let mel = MelConfig {
        non_negative: cfg.metrics.non_negative_mels,
        ..Default::default()
    };
    let index = dataset::load_index(reference)?;
    let mut csv = String::from("clip_id,swsd,frechet,onset_desync\n");
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    let mut n_rows = 0usize;
    let mut n_desync = 0usize;
    for (i, entry) in index.iter().enumerate() {
        let gen_path = generated.join(format!("{}.lat", entry.id));
        if !gen_path.exists() {
            continue;
        }
        let gen_latents = drop_span(&read_tensor_file(&gen_path)?, span)?;
        let ref_clip = dataset::load_clip(&reference.join(&entry.file))?;
        let ref_latents = drop_span(&ref_clip.latents, span)?;
        let gen_wav = decode_to_waveform(&gen_latents);
        let ref_wav = decode_to_waveform(&ref_latents);
        let mut rng = SeededRng::new(cfg.metrics.seed).derive(i as u64);
        let d_swsd = swsd(&ref_wav, &gen_wav, &mel, cfg.metrics.k_projections, &mut rng)?;
        let ref_frames = log_mel_frames(&ref_wav, &mel)?;
        let gen_frames = log_mel_frames(&gen_wav, &mel)?;
        let d_frechet = frechet_distance(&ref_frames, &gen_frames)?;
        let events: Vec<f64> = ref_clip.scene.events.iter().map(|e| e.time_s).collect();
        let desync = if events.is_empty() {
            DesyncResult::Undetected
        } else {
            onset_desync(&events, &gen_latents)?
        };
        let desync_str = match desync {
            DesyncResult::Seconds(s) => {
                sums.2 += s;
                n_desync += 1;
                format!("{s:.6}")
            }
            DesyncResult::Undetected => "undetected".to_string(),
        };
        csv.push_str(&format!(
            "{},{:.9},{:.9},{}\n",
            entry.id, d_swsd, d_frechet, desync_str
        ));
        sums.0 += d_swsd;
        sums.1 += d_frechet;
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(CoreError::Config(format!(
            "no generated clips in {} match the reference index",
            generated.display()
        )));
    }
    let mean_desync = if n_desync > 0 {
        format!("{:.6}", sums.2 / n_desync as f64)
    } else {
        "undetected".to_string()
    };
    csv.push_str(&format!(
        "mean,{:.9},{:.9},{}\n",
        sums.0 / n_rows as f64,
        sums.1 / n_rows as f64,
        mean_desync
    ));
    std::fs::write(out, csv)?;
    println!("wrote {} ({n_rows} clips)", out.display());
    Ok(())
}

fn cmd_plot(config: &ConfigArg, input: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let mel = MelConfig {
        non_negative: cfg.metrics.non_negative_mels,
        ..Default::default()
    };
    let samples = match input.extension().and_then(|e| e.to_str()) {
        Some("wav") => read_wav(input)?,
        Some("lat") => decode_to_waveform(&read_tensor_file(input)?),
        other => {
            return Err(CoreError::Config(format!(
                "unsupported plot input extension {other:?} (need .wav or .lat)"
            )))
        }
    };
    let frames = log_mel_frames(&samples, &mel)?;
    let csv_path = out.with_extension("csv");
    let mut csv = String::new();
    for t in 0..frames.rows() {
        let row: Vec<String> = frames.row(t).iter().map(|v| format!("{v:.9e}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;

    // grayscale PNG: time on x, mel bands on y (low bands at the bottom)
    let (t_frames, n_mels) = (frames.rows(), frames.cols());
    let (min, max) = frames
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = (max - min).max(f64::MIN_POSITIVE);
    let mut img = image::GrayImage::new(t_frames as u32, n_mels as u32);
    for t in 0..t_frames {
        for m in 0..n_mels {
            let v = (frames.get2(t, m) - min) / range;
            let pix = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(t as u32, (n_mels - 1 - m) as u32, image::Luma([pix]));
        }
    }
    let png_path = out.with_extension("png");
    img.save(&png_path)
        .map_err(|e| CoreError::Config(format!("png encode: {e}")))?;
    println!("wrote {} and {}", png_path.display(), csv_path.display());
    Ok(())
}
