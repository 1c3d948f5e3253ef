//! Loads CIFAR-100 in its binary layout, prints channel statistics and
//! writes a few augmented batches' shapes.
//!
//! `cargo run --release --example cifar_pipeline -- /path/to/cifar-100-binary`
//!
//! Without a path, a small synthetic set is written in the same layout and
//! read back.

use multiexit::data::{
    batch_iter, load_cifar100, load_cifar_binary, synth_dataset, write_cifar_binary, AugmentConfig, CifarLayout,
    Dataset, Split,
};
use multiexit::Result;

fn stand_in() -> Result<(Dataset, Dataset)> {
    let dir = std::env::temp_dir().join("multiexit-cifar-demo");
    std::fs::create_dir_all(&dir).map_err(|e| multiexit::Error::Io { path: dir.clone(), source: e })?;
    let layout = CifarLayout { channels: 3, height: 16, width: 16, num_classes: 4 };
    let mut out = Vec::new();
    for (name, split, per_class) in [("train.bin", Split::Train, 64), ("test.bin", Split::Test, 16)] {
        let path = dir.join(name);
        write_cifar_binary(&synth_dataset(4, per_class, 16, 1)?, &path)?;
        out.push(load_cifar_binary(&path, layout, split, None)?);
    }
    let test = out.pop().unwrap();
    Ok((out.pop().unwrap(), test))
}

fn main() -> Result<()> {
    let (train, test) = match std::env::args().nth(1) {
        Some(dir) => load_cifar100(dir)?,
        None => stand_in()?,
    };
    println!("train {} images, test {} images, dims {:?}", train.len(), test.len(), train.dims());
    let stats = train.channel_stats();
    println!("channel mean {:?}\nchannel std  {:?}", stats.mean, stats.std);

    let cfg = AugmentConfig::standard(stats);
    for (i, indices) in batch_iter(&train, 128, true, 7)?.take(3).enumerate() {
        let (x, y) = train.train_batch::<f32>(&indices, &cfg, 7)?;
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        println!("batch {i}: {:?}, first labels {:?}, mean {mean:+.3}", x.shape(), &y[..4]);
    }
    Ok(())
}
