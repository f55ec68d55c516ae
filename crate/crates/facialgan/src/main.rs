use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use facialgan::checkpoint::{Checkpoint, Kind};
use facialgan::config::{RunConfig, Scale};
use facialgan::dataset::{write_toy_dataset, Dataset, Split};
use facialgan::eval::{evaluate, EvalOptions, Metric};
use facialgan::runner::{initial_state, run_segmenter, run_training, RunOptions};
use facialgan::server::{self, AppState, CatalogEntry, SynthesizeBody};
use facialgan::wire;
use facialgan_core::datapipe::SampleSource;
use facialgan_core::synth::StyleMode;

#[derive(Parser)]
#[command(name = "facialgan", version, about = "Mask- and style-conditioned face generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the training commands; each overrides the config file.
#[derive(Args)]
struct Common {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    img_size: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Width preset: full or desk.
    #[arg(long)]
    scale: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the segmentation network on image/mask pairs.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the generator, mapping network, style encoder and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seg_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        /// Resume checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "fid,lpips,seg-acc,attr,identity")]
        metrics: String,
        #[arg(long, default_value = "latent")]
        mode: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        n_styles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Handle one model call at a time.
        #[arg(long)]
        single_flight: bool,
        /// Dataset directory for the sample catalog; toy faces otherwise.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        max_samples: usize,
    },
    /// Synthesize one image offline, mirroring POST /api/synthesize.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, default_value = "latent")]
        mode: String,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Attributes to re-inpaint, comma separated.
        #[arg(long)]
        masked_attributes: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the predicted mask of the output.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the on-disk layout.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut run = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &c.scale {
        run.scale = match s.as_str() {
            "full" => Scale::Full,
            "desk" => Scale::Desk,
            other => bail!("--scale must be full or desk, got {other}"),
        };
    }
    if let Some(v) = c.img_size {
        run.image_size = v;
    }
    if let Some(v) = c.seed {
        run.seed = v;
    }
    run.data_root = Some(c.data.display().to_string());
    Ok(run)
}

fn open_dataset(run: &RunConfig, root: &Path) -> Result<Dataset> {
    Dataset::open(root, run.image_size, run.split_seed).with_context(|| format!("opening dataset {}", root.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_b64(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(wire::b64_encode(&bytes))
}

fn catalog(dir: Option<&Path>, size: usize, max: usize) -> Result<Vec<CatalogEntry>> {
    let Some(dir) = dir else {
        return Ok(server::toy_catalog(max, size, 0)?);
    };
    let all = Dataset::open(dir, size, None)?.all();
    (0..all.len().min(max))
        .map(|i| {
            let s = all.load(i)?;
            Ok(CatalogEntry {
                id: s.id,
                image: s.image,
                mask: s.mask,
                gender: s.gender,
            })
        })
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::TrainSeg {
            common,
            out,
            epochs,
            lr,
        } => {
            let mut run = run_config(&common)?;
            if let Some(v) = common.batch {
                run.seg_batch_size = v;
            }
            if let Some(v) = epochs {
                run.seg_epochs = v;
            }
            if let Some(v) = lr {
                run.lr_seg = v;
            }
            let ds = open_dataset(&run, &common.data)?;
            let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
            let val = (!val.is_empty()).then_some(&val);
            log::info!("segmenter: {} training samples, {} epochs", train.len(), run.seg_epochs);
            let ck = run_segmenter(&run, &train, val, &mut std::io::stdout())?;
            ck.save(&out)?;
            if let Some(t) = &ck.metadata.segmenter_training {
                log::info!("best epoch {} at {:.2}% pixel accuracy", t.best_epoch, t.best_accuracy);
            }
        }
        Command::Train {
            common,
            seg_ckpt,
            out,
            iters,
            resume,
        } => {
            let mut run = run_config(&common)?;
            if let Some(v) = common.batch {
                run.batch_size = v;
            }
            if let Some(v) = iters {
                run.total_iters = v;
            }
            let ds = open_dataset(&run, &common.data)?;
            let train = ds.split(Split::Train);
            let state = match &resume {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    if ck.kind != Kind::Resume {
                        bail!("{} is not a resume checkpoint", p.display());
                    }
                    ck.train_state(&run.train()?)?
                }
                None => initial_state(&run, &Checkpoint::load(&seg_ckpt)?)?,
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("config.json"), &run)?;
            let log_path = out.join("log.jsonl");
            let log_file = fs::OpenOptions::new()
                .create(true)
                .append(resume.is_some())
                .write(true)
                .truncate(resume.is_none())
                .open(&log_path)
                .with_context(|| format!("opening {}", log_path.display()))?;
            let mut log = BufWriter::new(log_file);
            log::info!(
                "training from iteration {} to {} on {} samples",
                state.iteration,
                run.total_iters,
                train.len()
            );
            let summary = run_training(
                state,
                &run,
                &train,
                RunOptions {
                    out_dir: Some(&out),
                    log: &mut log,
                    stop_after: None,
                },
            )?;
            log.flush()?;
            log::info!(
                "finished at iteration {}; wrote {} checkpoints",
                summary.state.iteration,
                summary.checkpoints.len()
            );
        }
        Command::Eval {
            ckpt,
            data,
            metrics,
            mode,
            split,
            split_seed,
            n_styles,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let params = ck.network_params()?;
            let metrics = metrics
                .split(',')
                .map(|m| Metric::from_name(m.trim()).with_context(|| format!("unknown metric {m}")))
                .collect::<Result<Vec<_>>>()?;
            let mode = StyleMode::from_name(&mode).with_context(|| format!("unknown mode {mode}"))?;
            let split = Split::from_name(&split).with_context(|| format!("unknown split {split}"))?;
            let ds = Dataset::open(&data, params.config.image_size, split_seed)?;
            let opts = EvalOptions {
                metrics,
                mode,
                n_styles,
                seed,
                ..EvalOptions::default()
            };
            let report = evaluate(&params, &ds.split(split), &ds.split(Split::Train), &opts)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Serve {
            ckpt,
            port,
            single_flight,
            samples,
            max_samples,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let params = ck.network_params()?;
            let catalog = catalog(samples.as_deref(), params.config.image_size, max_samples)?;
            let state = AppState {
                iteration: ck.metadata.iteration,
                params,
                catalog,
                single_flight: single_flight.then(Default::default),
            };
            tokio::runtime::Runtime::new()?
                .block_on(server::serve(state, port))
                .with_context(|| format!("serving on port {port}"))?;
        }
        Command::Generate {
            ckpt,
            source,
            mode,
            reference,
            mask,
            domain,
            seed,
            masked_attributes,
            out,
            mask_out,
        } => {
            let params = Checkpoint::load(&ckpt)?.network_params()?;
            let body = SynthesizeBody {
                source: read_b64(&source)?,
                mode,
                reference: reference.as_deref().map(read_b64).transpose()?,
                mask: mask.as_deref().map(read_b64).transpose()?,
                domain,
                seed: Some(seed),
                masked_attributes: masked_attributes.map(|s| s.split(',').map(|a| a.trim().to_string()).collect()),
            };
            let (image, predicted) = server::generate(&params, &body)?;
            File::create(&out)
                .and_then(|mut f| f.write_all(&image))
                .with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = mask_out {
                fs::write(&p, predicted).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::ToyData { out, n, size, seed } => {
            write_toy_dataset(&out, n, size, seed)?;
            log::info!("wrote {n} toy faces at {size}px to {}", out.display());
        }
    }
    Ok(())
}
