//! How often only the shallowest classifier gets a sample right, and how
//! often the classifiers agree, for a jointly trained toy network.

use multiexit::data::{synth_splits, AugmentConfig};
use multiexit::network::{ArchConfig, GroupSpec, MultiExitNetwork, StemSpec};
use multiexit::runtime::{agreement_matrix, agreement_table, exclusive_correct_counts, ExclusivityReport, LogitTable};
use multiexit::trainer::{fit, TrainConfig, TrainMode};
use multiexit::Result;

fn main() -> Result<()> {
    let arch = ArchConfig {
        in_channels: 3,
        stem: StemSpec { channels: 4, kernel: 3, stride: 1 },
        groups: [(4, 1), (8, 2), (16, 2)]
            .iter()
            .map(|&(w, s)| GroupSpec { num_blocks: 1, out_channels: w, first_block_stride: s })
            .collect(),
        num_classes: 4,
        attach_points: None,
    };
    let (train, test) = synth_splits(4, 50, 16, 2)?;
    let mut net = MultiExitNetwork::<f32>::from_arch(&arch, 2)?;
    let cfg = TrainConfig { lr: 0.05, batch_size: 32, mode: TrainMode::Joint, ..TrainConfig::new(4, 8) };
    fit(&mut net, &train, &test, &cfg, &mut ())?;

    let table = LogitTable::collect(&net, &test, &AugmentConfig::identity(train.channel_stats()))?;
    let preds = table.predictions();
    let (exclusive, first) = exclusive_correct_counts(&preds, &table.labels)?;
    let report = ExclusivityReport::new(exclusive, first);
    println!("accuracies {:?}", table.accuracies());
    println!("{exclusive} of {first} samples right at classifier 1 are missed by every deeper classifier ({:.1}%)\n", 100.0 * report.fraction);
    print!("{}", agreement_table(&agreement_matrix(&preds)));
    Ok(())
}
