//! Training runs with JSON-line logging and periodic checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use facialgan_core::datapipe::SampleSource;
use facialgan_core::networks::NetConfig;
use facialgan_core::params::ParamStore;
use facialgan_core::training::{
    is_due, train_facialgan, train_segmenter, Control, TrainConfig, TrainState,
};

use crate::checkpoint::{Checkpoint, SegmenterTraining};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainlog::LogLine;

/// Checkpoint file of a resume point.
pub fn resume_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("ckpt-{iter:07}.fgc"))
}

pub fn final_weights_path(dir: &Path) -> PathBuf {
    dir.join("final.weights.fgc")
}

pub struct RunOptions<'a> {
    /// Directory for checkpoints; none are written without one.
    pub out_dir: Option<&'a Path>,
    pub log: &'a mut dyn Write,
    /// Stop after this many completed iterations, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub state: TrainState,
    pub last: Option<LogLine>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train from `state` until `total_iters` (or `stop_after`). A resume
/// checkpoint is written every `checkpoint_every` iterations and at the end,
/// plus a weights-only copy of the final one.
pub fn run_training<S: SampleSource + ?Sized>(
    mut state: TrainState,
    run: &RunConfig,
    source: &S,
    opts: RunOptions<'_>,
) -> Result<RunSummary> {
    let cfg: TrainConfig = run.train()?;
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut last = None;
    let mut checkpoints = Vec::new();
    let mut io_error: Option<Error> = None;
    let log = opts.log;
    let result = train_facialgan(&mut state, &cfg, source, |st, report| {
        let line = LogLine::from(report);
        last = Some(line);
        let mut fail = |e: Error| {
            io_error = Some(e);
            Err(facialgan_core::Error::Source("run aborted".into()))
        };
        if is_due(report.iter, cfg.log_every, cfg.total_iters) {
            if let Err(e) = line.write(log) {
                return fail(Error::io("training log", e));
            }
        }
        let stop = opts.stop_after.is_some_and(|s| report.iter >= s);
        if let Some(dir) = opts.out_dir {
            if is_due(report.iter, cfg.checkpoint_every, cfg.total_iters) || stop {
                let path = resume_path(dir, report.iter);
                let ck = Checkpoint::resume(st, run, Some(line));
                if let Err(e) = ck.save(&path) {
                    return fail(e);
                }
                if report.iter == cfg.total_iters {
                    if let Err(e) = ck.to_weights().save(&final_weights_path(dir)) {
                        return fail(e);
                    }
                }
                checkpoints.push(path);
            }
        }
        Ok(if stop { Control::Stop } else { Control::Continue })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    result?;
    log.flush().map_err(|e| Error::io("training log", e))?;
    Ok(RunSummary {
        state,
        last,
        checkpoints,
    })
}

/// Fresh state around a segmenter checkpoint.
pub fn initial_state(run: &RunConfig, segmenter: &Checkpoint) -> Result<TrainState> {
    let cfg = run.train()?;
    let seg: ParamStore<f32> = segmenter.segmenter_params(&cfg.net)?;
    Ok(TrainState::new(&cfg, seg)?)
}

/// Stage-one training: returns the best-accuracy segmenter checkpoint.
pub fn run_segmenter<S, V>(
    run: &RunConfig,
    train: &S,
    val: Option<&V>,
    log: &mut dyn Write,
) -> Result<Checkpoint>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
{
    let cfg = run.segmenter()?;
    let result = train_segmenter(&cfg, train, val, |e, _| {
        let line = serde_json::json!({
            "epoch": e.epoch,
            "loss": e.mean_loss(),
            "train_accuracy": e.train_accuracy,
            "val_accuracy": e.val_accuracy,
        });
        writeln!(log, "{line}").map_err(|err| facialgan_core::Error::Source(err.to_string()))
    })?;
    let net: NetConfig = cfg.net.clone();
    Ok(Checkpoint::segmenter(
        &net,
        &result.best,
        SegmenterTraining {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.adam.lr,
            best_epoch: result.best_epoch,
            best_accuracy: result.best_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainlog::parse_log;
    use facialgan_core::datapipe::MemorySource;
    use facialgan_core::toyset::toy_source;

    fn tiny_run() -> RunConfig {
        RunConfig {
            image_size: 16,
            base_channels: Some(4),
            max_channels: Some(8),
            style_dim: Some(8),
            latent_dim: Some(4),
            batch_size: 2,
            total_iters: 6,
            checkpoint_every: 3,
            log_every: 1,
            seg_epochs: 2,
            seg_batch_size: 4,
            ..RunConfig::desk()
        }
    }

    #[test]
    fn interrupted_run_resumes_to_identical_log() {
        let run = tiny_run();
        let src = toy_source(4, 16, 0).unwrap();
        let seg = run_segmenter(&run, &src, None::<&MemorySource>, &mut Vec::new()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut full = Vec::new();
        let a = run_training(
            initial_state(&run, &seg).unwrap(),
            &run,
            &src,
            RunOptions {
                out_dir: Some(dir.path()),
                log: &mut full,
                stop_after: None,
            },
        )
        .unwrap();
        assert_eq!(a.checkpoints, vec![resume_path(dir.path(), 3), resume_path(dir.path(), 6)]);
        assert!(final_weights_path(dir.path()).exists());

        let dir_b = tempfile::tempdir().unwrap();
        let mut part = Vec::new();
        run_training(
            initial_state(&run, &seg).unwrap(),
            &run,
            &src,
            RunOptions {
                out_dir: Some(dir_b.path()),
                log: &mut part,
                stop_after: Some(2),
            },
        )
        .unwrap();
        let ck = Checkpoint::load(&resume_path(dir_b.path(), 2)).unwrap();
        let restored = ck.train_state(&run.train().unwrap()).unwrap();
        run_training(
            restored,
            &run,
            &src,
            RunOptions {
                out_dir: None,
                log: &mut part,
                stop_after: None,
            },
        )
        .unwrap();
        assert_eq!(String::from_utf8(part).unwrap(), String::from_utf8(full.clone()).unwrap());
        let lines = parse_log(std::str::from_utf8(&full).unwrap()).unwrap();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[5].lambda_ds, 0.0);
        let w = Checkpoint::load(&final_weights_path(dir.path())).unwrap();
        assert_eq!(w.network_params().unwrap(), a.state.params);
    }
}
