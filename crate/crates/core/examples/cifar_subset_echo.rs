//! Distillation versus joint training of a ResNet18-shaped network on a
//! 10-class, 5000-image CIFAR-100 subset. Slow on a CPU.
//!
//! `cargo run --release --example cifar_subset_echo -- /path/to/cifar-100-binary [epochs] [seeds]`

use multiexit::data::load_cifar100;
use multiexit::network::{BackboneSpec, MultiExitNetwork};
use multiexit::runtime::accuracy_table;
use multiexit::trainer::{derive_seed, fit, TrainConfig, TrainMode, INIT};
use multiexit::Result;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let Some(dir) = args.next() else {
        eprintln!("usage: cifar_subset_echo DIR [epochs] [seeds]");
        std::process::exit(2);
    };
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(40);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let (train, test) = load_cifar100(dir)?;
    let (train, test) = (train.class_subset(10, 500)?, test.class_subset(10, 100)?);
    let mut rows = Vec::new();
    for seed in 0..seeds {
        for mode in [TrainMode::Joint, TrainMode::Msd] {
            let mut net = MultiExitNetwork::<f32>::build_backbone(&BackboneSpec::resnet18(10), derive_seed(seed, INIT, 0))?
                .augment_with_branches(&[1, 2, 3], derive_seed(seed, INIT, 1))?;
            let cfg = TrainConfig { seed, mode, ..TrainConfig::new(10, epochs) };
            let report = fit(&mut net, &train, &test, &cfg, &mut ())?;
            rows.push((format!("{mode:?} seed {seed}"), report.final_accuracy, None));
        }
    }
    print!("{}", accuracy_table(&rows));
    Ok(())
}
