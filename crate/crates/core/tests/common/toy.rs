use multiexit::data::{synth_splits, AugmentConfig, Dataset};
use multiexit::network::{ArchConfig, GroupSpec, MultiExitNetwork, StemSpec};
use multiexit::trainer::{derive_seed, fit, AugmentSettings, FitReport, TrainConfig, TrainMode, INIT};
use multiexit::Result;

/// Three groups of one block each, widths `w`, `2w`, `4w`.
pub fn toy_arch(num_classes: usize, width: usize) -> ArchConfig {
    ArchConfig {
        in_channels: 3,
        stem: StemSpec { channels: width, kernel: 3, stride: 1 },
        groups: vec![
            GroupSpec { num_blocks: 1, out_channels: width, first_block_stride: 1 },
            GroupSpec { num_blocks: 1, out_channels: 2 * width, first_block_stride: 2 },
            GroupSpec { num_blocks: 1, out_channels: 4 * width, first_block_stride: 2 },
        ],
        num_classes,
        attach_points: None,
    }
}

pub fn toy_config(num_classes: usize, epochs: usize, seed: u64, mode: TrainMode) -> TrainConfig {
    let mut cfg = TrainConfig::new(num_classes, epochs);
    cfg.lr = 0.05;
    cfg.batch_size = 32;
    cfg.seed = seed;
    cfg.mode = mode;
    cfg.loss.beta_begin = 0.1;
    cfg.loss.beta_end = 0.01;
    cfg.augment = AugmentSettings { crop_pad: 2, hflip_prob: 0.0 };
    cfg
}

pub fn toy_net(num_classes: usize, width: usize, seed: u64) -> MultiExitNetwork<f32> {
    MultiExitNetwork::from_arch(&toy_arch(num_classes, width), derive_seed(seed, INIT, 0)).unwrap()
}

pub struct ToyRun {
    pub net: MultiExitNetwork<f32>,
    pub train: Dataset,
    pub test: Dataset,
    pub report: FitReport,
}

impl ToyRun {
    pub fn eval_norm(&self) -> AugmentConfig {
        AugmentConfig::identity(self.train.channel_stats())
    }
}

/// Trains a width-`width` toy network on `per_class` 16x16 synthetic
/// samples per class.
pub fn toy_run(num_classes: usize, per_class: usize, width: usize, epochs: usize, seed: u64, mode: TrainMode) -> Result<ToyRun> {
    let (train, test) = synth_splits(num_classes, per_class, 16, seed)?;
    let mut net = toy_net(num_classes, width, seed);
    let report = fit(&mut net, &train, &test, &toy_config(num_classes, epochs, seed, mode), &mut ())?;
    Ok(ToyRun { net, train, test, report })
}
