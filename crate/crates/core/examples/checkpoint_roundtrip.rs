//! Trains one epoch, saves a checkpoint, restores it and keeps training,
//! then confirms the result matches an uninterrupted run bit for bit.

use multiexit::data::synth_splits;
use multiexit::network::{ArchConfig, Checkpoint, GroupSpec, MultiExitNetwork, StemSpec};
use multiexit::trainer::{train_epoch, TrainConfig, TrainState};
use multiexit::Result;

fn main() -> Result<()> {
    let arch = ArchConfig {
        in_channels: 3,
        stem: StemSpec { channels: 4, kernel: 3, stride: 1 },
        groups: [(4, 1), (8, 2)]
            .iter()
            .map(|&(w, s)| GroupSpec { num_blocks: 1, out_channels: w, first_block_stride: s })
            .collect(),
        num_classes: 4,
        attach_points: None,
    };
    let (train, _) = synth_splits(4, 16, 16, 0)?;
    let norm = train.channel_stats().clone();
    let cfg = TrainConfig { batch_size: 16, lr: 0.05, ..TrainConfig::new(4, 2) };

    let mut straight = MultiExitNetwork::<f32>::from_arch(&arch, 0)?;
    let mut s = TrainState::new(&straight);
    for _ in 0..2 {
        train_epoch(&mut s, &mut straight, &train, &norm, &cfg, &mut ())?;
    }

    let mut net = MultiExitNetwork::<f32>::from_arch(&arch, 0)?;
    let mut state = TrainState::new(&net);
    train_epoch(&mut state, &mut net, &train, &norm, &cfg, &mut ())?;
    let path = std::env::temp_dir().join("multiexit-roundtrip.ckpt");
    state.checkpoint(&net, &cfg, &norm)?.save(&path)?;
    println!("saved {} bytes to {}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), path.display());

    let (mut net, mut state, cfg, norm) = TrainState::restore(&Checkpoint::load(&path)?)?;
    train_epoch(&mut state, &mut net, &train, &norm, &cfg, &mut ())?;
    let same = net.to_checkpoint().tensors == straight.to_checkpoint().tensors;
    println!("resumed run matches uninterrupted run: {same}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
