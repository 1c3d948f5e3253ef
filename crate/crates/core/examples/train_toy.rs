//! Trains the same small network with and without distillation on
//! synthetic data and prints the per-classifier accuracy table.
//!
//! `cargo run --release --example train_toy -- [epochs] [seed]`

use multiexit::data::synth_splits;
use multiexit::network::{ArchConfig, GroupSpec, MultiExitNetwork, StemSpec};
use multiexit::runtime::accuracy_table;
use multiexit::trainer::{derive_seed, fit, AugmentSettings, TrainConfig, TrainMode, INIT};
use multiexit::Result;

fn main() -> Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let arch = ArchConfig {
        in_channels: 3,
        stem: StemSpec { channels: 8, kernel: 3, stride: 1 },
        groups: [(8, 1), (16, 2), (32, 2)]
            .iter()
            .map(|&(w, s)| GroupSpec { num_blocks: 1, out_channels: w, first_block_stride: s })
            .collect(),
        num_classes: 4,
        attach_points: None,
    };
    let (train, test) = synth_splits(4, 100, 16, seed)?;
    let mut rows = Vec::new();
    for mode in [TrainMode::Joint, TrainMode::DeepestSelfDistill, TrainMode::Msd] {
        let mut cfg = TrainConfig::new(4, epochs);
        cfg.seed = seed;
        cfg.mode = mode;
        cfg.lr = 0.05;
        cfg.batch_size = 32;
        cfg.loss.beta_begin = 0.1;
        cfg.loss.beta_end = 0.01;
        cfg.augment = AugmentSettings { crop_pad: 2, hflip_prob: 0.0 };
        let mut net = MultiExitNetwork::<f32>::from_arch(&arch, derive_seed(seed, INIT, 0))?;
        let report = fit(&mut net, &train, &test, &cfg, &mut ())?;
        rows.push((format!("{mode:?}"), report.final_accuracy, None));
    }
    print!("{}", accuracy_table(&rows));
    Ok(())
}
