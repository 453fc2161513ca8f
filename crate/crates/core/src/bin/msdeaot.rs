use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use msdeaot::ensemble::{self, TtaVariant};
use msdeaot::harness::io::{load_logits_dir, load_masks, logits_path, save_logits, write_masks, write_sequence};
use msdeaot::harness::synth::{render, RandomSceneParams, SyntheticSceneConfig};
use msdeaot::harness::{load_sequence, ConfigFile};
use msdeaot::metrics::{evaluate_sequence, reports_to_csv};
use msdeaot::model::{weights, Model, ModelConfig};
use msdeaot::{Error, LabelMask, Tensor};

#[derive(Parser)]
#[command(
    name = "msdeaot",
    version,
    about = "Multi-scale gated-propagation video object segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Seed for scene generation and model initialisation.
    #[arg(long)]
    seed: Option<u64>,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Weight file to load instead of seeded initialisation.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Fixed nearest-neighbour propagation weights.
    #[arg(long)]
    template_mode: bool,
    /// Also write fused or raw logits next to the masks.
    #[arg(long)]
    save_logits: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sequence (frames and ground-truth masks).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        shapes: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        max_speed: Option<i64>,
    },
    /// Propagate mask_0000.pgm through a sequence.
    Segment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth and write the CSV report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "sequence")]
        name: String,
        /// Boundary tolerance in pixels.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Fuse per-model logits directories by probability averaging.
    EnsembleLogits {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ensemble_weights: Option<Vec<f32>>,
        #[arg(long)]
        save_logits: bool,
    },
    /// Fuse per-model mask directories by weighted voting.
    EnsembleVote {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ensemble_weights: Option<Vec<f32>>,
    },
    /// Segment under the multi-scale and flip variants and fuse the results.
    TtaSegment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add the unscaled pair to the variant list.
        #[arg(long)]
        with_identity: bool,
    },
}

fn load_config(common: &Common) -> Result<Option<ConfigFile>> {
    common
        .config
        .as_deref()
        .map(ConfigFile::load)
        .transpose()
        .map_err(Into::into)
}

fn build_model(common: &Common, args: &ModelArgs) -> Result<Model> {
    let mut cfg = ModelConfig::default();
    if let Some(file) = load_config(common)? {
        file.apply_model(&mut cfg)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if args.template_mode {
        cfg.template_mode = true;
    }
    let model = match &args.weights {
        Some(path) => {
            let (cfg, params) = weights::load(path, &cfg)?;
            Model::with_params(cfg, params)?
        }
        None => Model::new(cfg)?,
    };
    Ok(model)
}

fn weights_for(given: Option<Vec<f32>>, n: usize) -> Result<Vec<f32>> {
    match given {
        None => Ok(vec![1.0; n]),
        Some(w) if w.len() == n => Ok(w),
        Some(w) => Err(Error::Argument(format!("{} ensemble weights for {n} inputs", w.len())).into()),
    }
}

fn write_logits(dir: &Path, logits: &[Tensor]) -> Result<()> {
    for (t, l) in logits.iter().enumerate() {
        save_logits(&logits_path(dir, t), l)?;
    }
    Ok(())
}

fn segment(
    common: Common,
    args: ModelArgs,
    sequence: &Path,
    out: &Path,
    variants: Option<Vec<TtaVariant>>,
) -> Result<()> {
    let model = build_model(&common, &args)?;
    let seq = load_sequence(sequence, model.config().max_objects, false)?;
    let results: Vec<(LabelMask, Tensor)> = match variants {
        None => model.propagate_sequence(&seq.frames, &seq.masks[0])?,
        Some(v) => ensemble::tta_segment(&model, &seq.frames, &seq.masks[0], &v)?,
    };
    let (masks, logits): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    write_masks(out, &masks)?;
    if args.save_logits {
        write_logits(out, &logits)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            out,
            frames,
            shapes,
            height,
            width,
            max_speed,
        } => {
            let mut params = RandomSceneParams::default();
            let mut seed = 0;
            if let Some(file) = load_config(&common)? {
                file.apply_scene(&mut params)?;
                seed = file.seed()?.unwrap_or(seed);
            }
            seed = common.seed.unwrap_or(seed);
            params.frames = frames.unwrap_or(params.frames);
            params.shapes = shapes.unwrap_or(params.shapes);
            params.height = height.unwrap_or(params.height);
            params.width = width.unwrap_or(params.width);
            params.max_speed = max_speed.unwrap_or(params.max_speed);
            if params.frames == 0 {
                return Err(Error::Argument("--frames must be at least 1".into()).into());
            }
            let scene = SyntheticSceneConfig::random(&params, seed)?;
            write_sequence(&out, &render(&scene)?)?;
        }
        Command::Segment {
            common,
            model,
            sequence,
            out,
        } => segment(common, model, &sequence, &out, None)?,
        Command::TtaSegment {
            common,
            model,
            sequence,
            out,
            with_identity,
        } => {
            let variants = if with_identity {
                ensemble::tta_variants_with_identity()
            } else {
                ensemble::tta_variants()
            };
            segment(common, model, &sequence, &out, Some(variants))?
        }
        Command::Evaluate {
            common,
            pred,
            gt,
            out,
            name,
            tolerance,
        } => {
            let file = load_config(&common)?;
            let tolerance = match tolerance {
                Some(t) => Some(t),
                None => file.as_ref().map(ConfigFile::tolerance).transpose()?.flatten(),
            };
            let preds = load_masks(&pred, 255)?;
            let gts = load_masks(&gt, 255)?;
            let report = evaluate_sequence(&preds, &gts, tolerance)?;
            let csv = reports_to_csv(&[(name, report)]);
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?,
                None => print!("{csv}"),
            }
        }
        Command::EnsembleLogits {
            common: _,
            inputs,
            out,
            ensemble_weights,
            save_logits,
        } => {
            let weights = weights_for(ensemble_weights, inputs.len())?;
            let members = inputs
                .iter()
                .map(|d| load_logits_dir(d))
                .collect::<Result<Vec<_>, _>>()?;
            let frames = frame_count(&inputs, members.iter().map(Vec::len))?;
            let mut masks = Vec::with_capacity(frames);
            let mut fused = Vec::new();
            for t in 0..frames {
                let at_t: Vec<Tensor> = members.iter().map(|m| m[t].clone()).collect();
                masks.push(ensemble::average_logits(&at_t, &weights)?);
                if save_logits {
                    fused.push(ensemble::fuse_logits(&at_t, &weights)?);
                }
            }
            write_masks(&out, &masks)?;
            write_logits(&out, &fused)?;
        }
        Command::EnsembleVote {
            common: _,
            inputs,
            out,
            ensemble_weights,
        } => {
            let weights = weights_for(ensemble_weights, inputs.len())?;
            let members = inputs
                .iter()
                .map(|d| load_masks(d, 255))
                .collect::<Result<Vec<_>, _>>()?;
            let frames = frame_count(&inputs, members.iter().map(Vec::len))?;
            let masks = (0..frames)
                .map(|t| {
                    let at_t: Vec<LabelMask> = members.iter().map(|m| m[t].clone()).collect();
                    ensemble::vote_masks(&at_t, &weights)
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_masks(&out, &masks)?;
        }
    }
    Ok(())
}

fn frame_count(inputs: &[PathBuf], counts: impl Iterator<Item = usize>) -> Result<usize> {
    let counts: Vec<usize> = counts.collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Dimension(format!(
            "inputs hold different frame counts: {}",
            inputs
                .iter()
                .zip(&counts)
                .map(|(p, n)| format!("{} has {n}", p.display()))
                .collect::<Vec<_>>()
                .join(", ")
        ))
        .into());
    }
    Ok(counts[0])
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Argument(_) | Error::Range(_)) => 1,
        Some(Error::Capacity { .. } | Error::Dimension(_) | Error::EmptyMemory(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli).context("msdeaot failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
