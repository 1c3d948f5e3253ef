//! Trains a toy network briefly, then answers the test set under several
//! confidence thresholds and prints the cost/accuracy trade-off.

use multiexit::data::{synth_splits, AugmentConfig};
use multiexit::network::{ArchConfig, GroupSpec, MultiExitNetwork, StemSpec};
use multiexit::runtime::{budget_curve, budget_table, evaluate_policy, predict_early_exit, ConfidenceMeasure, ExitPolicy};
use multiexit::trainer::{fit, TrainConfig};
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
    let (train, test) = synth_splits(4, 40, 16, 11)?;
    let mut net = MultiExitNetwork::<f32>::from_arch(&arch, 11)?;
    let cfg = TrainConfig { lr: 0.05, batch_size: 32, ..TrainConfig::new(4, 10) };
    fit(&mut net, &train, &test, &cfg, &mut ())?;

    let norm = AugmentConfig::identity(train.channel_stats());
    let (x, y) = test.eval_batch::<f32>(&[0], &norm)?;
    let p = predict_early_exit(&net, &x, &ExitPolicy::confidence(0.8))?;
    println!("sample 0 (label {}): class {} from classifier {} at confidence {:.3}\n", y[0], p.class, p.exit, p.confidence);

    let thresholds = [0.0, 0.4, 0.6, 0.8, 0.9, 0.99, 1.01];
    let curve = budget_curve(&net, &test, &norm, &thresholds, ConfidenceMeasure::MaxProb)?;
    print!("{}", budget_table(&curve, net.count_flops(net.num_exits(), 16, 16)?));
    let (r, _) = evaluate_policy(&net, &test, &norm, &ExitPolicy::FullEnsemble)?;
    println!("\nensemble of all classifiers: {:.2}% at {:.0} MACs", 100.0 * r.accuracy, r.mean_macs);
    Ok(())
}
