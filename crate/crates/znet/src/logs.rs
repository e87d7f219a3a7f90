//! CSV outputs: per-iteration loss, per-epoch validation IoU, timing per 100
//! iterations and per-volume metrics.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use znet_core::train::{RunLog, VolumeScore};

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    iteration: usize,
    epoch: usize,
    lr: f64,
    loss: f64,
}

#[derive(Serialize)]
struct ValRow {
    epoch: usize,
    val_iou: f64,
}

#[derive(Serialize)]
struct TimingRow {
    first_iteration: usize,
    last_iteration: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    volume_id: &'a str,
    iou: f64,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    tn: u64,
}

/// `loss.csv`: `iteration,epoch,lr,loss`.
pub fn write_loss(path: &Path, log: &RunLog) -> Result<()> {
    write_rows(
        path,
        log.iterations.iter().map(|r| LossRow { iteration: r.iteration, epoch: r.epoch, lr: r.lr, loss: r.loss }),
    )
}

/// `val_iou.csv`: `epoch,val_iou`.
pub fn write_val(path: &Path, log: &RunLog) -> Result<()> {
    write_rows(path, log.epochs.iter().map(|e| ValRow { epoch: e.epoch, val_iou: e.val_iou }))
}

/// `timing.csv`: seconds per block of 100 iterations.
pub fn write_timing(path: &Path, log: &RunLog) -> Result<()> {
    write_rows(
        path,
        log.timing.iter().map(|t| TimingRow { first_iteration: t.first, last_iteration: t.last, seconds: t.seconds }),
    )
}

/// `metrics.csv`: `volume_id,iou,tp,fp,fn,tn`.
pub fn write_metrics(path: &Path, scores: &[VolumeScore]) -> Result<()> {
    write_rows(
        path,
        scores.iter().map(|s| MetricRow {
            volume_id: &s.id,
            iou: s.iou,
            tp: s.counts.tp,
            fp: s.counts.fp,
            fn_: s.counts.fn_,
            tn: s.counts.tn,
        }),
    )
}

/// All three run-log files into `dir`.
pub fn write_run_log(dir: &Path, log: &RunLog) -> Result<()> {
    write_loss(&dir.join("loss.csv"), log)?;
    write_val(&dir.join("val_iou.csv"), log)?;
    write_timing(&dir.join("timing.csv"), log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use znet_core::train::{EpochRecord, IterationRecord};

    #[test]
    fn headers_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let log = RunLog {
            iterations: vec![
                IterationRecord { iteration: 1, epoch: 1, lr: 0.05, loss: 0.5 },
                IterationRecord { iteration: 2, epoch: 1, lr: 0.05, loss: 0.25 },
            ],
            epochs: vec![EpochRecord { epoch: 1, mean_loss: 0.375, val_iou: 0.5 }],
            timing: vec![],
        };
        write_run_log(dir.path(), &log).unwrap();
        let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(loss, "iteration,epoch,lr,loss\n1,1,0.05,0.5\n2,1,0.05,0.25\n");
        let val = std::fs::read_to_string(dir.path().join("val_iou.csv")).unwrap();
        assert_eq!(val, "epoch,val_iou\n1,0.5\n");
    }
}
