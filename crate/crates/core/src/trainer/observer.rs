use std::fs::{self, File};
use std::path::{Path, PathBuf};

use super::{EpochRecord, StepLog, TrainConfig, TrainState};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::network::MultiExitNetwork;
use crate::tensor::Real;

/// Hooks called by the training loop.
pub trait Observer<T> {
    fn step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// After each evaluation; `best` when the deepest classifier improved.
    fn epoch(
        &mut self,
        _record: &EpochRecord,
        _best: bool,
        _net: &MultiExitNetwork<T>,
        _state: &TrainState<T>,
        _config: &TrainConfig,
        _norm: &ChannelStats,
    ) -> Result<()> {
        Ok(())
    }
}

impl<T> Observer<T> for () {}

pub const LOG_HEADER: [&str; 7] = ["step", "epoch", "loss1", "loss2", "loss3", "beta_used", "total"];

/// Streams `log.csv` and keeps `checkpoints/last.ckpt` and
/// `checkpoints/best.ckpt` in a run directory.
pub struct RunDirObserver {
    dir: PathBuf,
    log: csv::Writer<File>,
}

impl RunDirObserver {
    /// Starts a fresh log, or appends to an existing one when `append`.
    pub fn new(dir: impl AsRef<Path>, append: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let ckpts = dir.join("checkpoints");
        fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
        let path = dir.join("log.csv");
        let existing = append && path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut log = csv::Writer::from_writer(file);
        if !existing {
            log.write_record(LOG_HEADER).map_err(|e| csv_error(&path, e))?;
        }
        Ok(RunDirObserver { dir, log })
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.ckpt"))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

impl<T: Real> Observer<T> for RunDirObserver {
    fn step(&mut self, l: &StepLog) -> Result<()> {
        let b = &l.loss;
        let row = [
            l.step.to_string(),
            l.epoch.to_string(),
            b.loss1.to_string(),
            b.loss2.to_string(),
            b.loss3.to_string(),
            b.beta_used.to_string(),
            b.total.to_string(),
        ];
        let path = self.dir.join("log.csv");
        self.log.write_record(&row).map_err(|e| csv_error(&path, e))
    }

    fn epoch(
        &mut self,
        _record: &EpochRecord,
        best: bool,
        net: &MultiExitNetwork<T>,
        state: &TrainState<T>,
        config: &TrainConfig,
        norm: &ChannelStats,
    ) -> Result<()> {
        let path = self.dir.join("log.csv");
        self.log.flush().map_err(|e| Error::io(&path, e))?;
        let ckpt = state.checkpoint(net, config, norm)?;
        ckpt.save(self.checkpoint_path("last"))?;
        if best {
            ckpt.save(self.checkpoint_path("best"))?;
        }
        Ok(())
    }
}
