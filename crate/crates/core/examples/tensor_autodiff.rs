//! A conv → relu → pool → linear → cross-entropy graph on the tape, its
//! gradients, and a finite-difference check of the same graph.

use multiexit::tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use multiexit::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[2, 1, 6, 6]);
    let k = random(&mut rng, &[3, 1, 3, 3]);
    let w = random(&mut rng, &[4, 3]);
    let labels = [1, 3];

    let build = |t: &mut Tape<f64>, v: &[multiexit::Var]| {
        let h = t.conv2d(v[0], v[1], 1, 1)?;
        let h = t.relu(h);
        let h = t.global_avg_pool(h)?;
        let logits = t.linear(h, v[2], None)?;
        t.cross_entropy(logits, &labels)
    };

    let mut tape = Tape::new();
    let vars: Vec<_> = [&x, &k, &w].iter().map(|t| tape.leaf((*t).clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    println!("loss {:.6}, {} ops, {} MACs", tape.scalar(loss)?, tape.len(), tape.macs());
    println!("d loss / d w = {:?}", tape.grad(vars[2]).unwrap().data());

    let report = check_gradients(&[x, k, w], DEFAULT_STEP, build)?;
    println!("finite differences: {} entries, worst relative error {:.2e}", report.checked, report.max_rel_error);
    Ok(())
}
