//! The three loss terms on random logits and features, and how the feature
//! weight decays over training.

use multiexit::msd::{beta_schedule, total_loss, LossConfig};
use multiexit::network::ExitOutput;
use multiexit::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let mut leaf = |tape: &mut Tape<f64>, shape: &[usize]| {
        let n = shape.iter().product();
        tape.leaf(Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(), true)
    };
    let exits: Vec<ExitOutput> = (0..3)
        .map(|_| ExitOutput { logits: leaf(&mut tape, &[4, 10]), feature: leaf(&mut tape, &[4, 8]) })
        .collect();
    let labels = [0, 3, 7, 9];
    let cfg = LossConfig::for_classes(10);
    let (loss, parts) = total_loss(&mut tape, &exits, &labels, &cfg, 0, 100)?;
    tape.backward(loss)?;
    println!("{parts:#?}");
    let g = tape.grad(exits[0].logits).unwrap();
    println!("gradient norm on classifier 1 logits: {:.4}", g.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    for epoch in [0, 25, 50, 75, 100] {
        println!("epoch {epoch:>3}: beta {:.4}", beta_schedule(epoch, 100, cfg.beta_begin, cfg.beta_end)?);
    }
    Ok(())
}
