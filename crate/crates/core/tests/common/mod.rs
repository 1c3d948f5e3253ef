#![allow(dead_code)]

use multiexit::msd::{self, LossConfig};
use multiexit::network::{ArchConfig, GroupSpec, Mode, MultiExitNetwork, StemSpec};
use multiexit::tensor::gradcheck::{check_gradients, relative_error, DEFAULT_STEP};
use multiexit::{Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod toy;

pub const SEEDS: u64 = 20;
pub const TOLERANCE: f64 = 1e-3;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.1 away from zero, so relu kinks stay out of reach.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values on a 0.05 ladder, so pooling maxima never tie.
fn ladder(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Tensor::from_vec(shape, idx.iter().map(|&k| k as f64 * 0.05 - 1.0).collect()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6772_6164 ^ seed)
}

/// Squared distance to a fixed random target: a scalar head with a
/// nontrivial gradient for any layer output.
fn to_scalar(tape: &mut Tape<f64>, out: Var, r: &mut ChaCha8Rng) -> Result<Var> {
    let target = uniform(r, tape.shape(out), -1.0, 1.0);
    let t = tape.constant(target);
    tape.l2_distance_sq(out, t)
}

fn check(inputs: &[Tensor<f64>], seed: u64, build: impl Fn(&mut Tape<f64>, &[Var], &mut ChaCha8Rng) -> Result<Var>) -> Result<f64> {
    let report = check_gradients(inputs, DEFAULT_STEP, |tape, v| {
        let mut r = rng(seed.wrapping_add(1 << 32));
        build(tape, v, &mut r)
    })?;
    Ok(report.max_rel_error)
}

fn linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)];
    check(&inputs, seed, |t, v, r| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        to_scalar(t, y, r)
    })
}

fn conv(seed: u64, stride: usize, size: usize) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[1, 2, size, size], -1.0, 1.0), uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0)];
    check(&inputs, seed, |t, v, r| {
        let y = t.conv2d(v[0], v[1], stride, 1)?;
        to_scalar(t, y, r)
    })
}

fn conv_s1(seed: u64) -> Result<f64> {
    conv(seed, 1, 4)
}

fn conv_s2(seed: u64) -> Result<f64> {
    conv(seed, 2, 5)
}

fn relu(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [off_zero(&mut r, &[4, 8])];
    check(&inputs, seed, |t, v, r| {
        let y = t.relu(v[0]);
        to_scalar(t, y, r)
    })
}

fn max_pool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [ladder(&mut r, &[1, 2, 4, 4])];
    check(&inputs, seed, |t, v, r| {
        let y = t.max_pool(v[0], 2, 2)?;
        to_scalar(t, y, r)
    })
}

fn avg_pool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0)];
    check(&inputs, seed, |t, v, r| {
        let y = t.avg_pool(v[0], 3, 2)?;
        to_scalar(t, y, r)
    })
}

fn global_avg_pool(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0)];
    check(&inputs, seed, |t, v, r| {
        let y = t.global_avg_pool(v[0])?;
        to_scalar(t, y, r)
    })
}

fn residual_add(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[2, 2, 2, 2], -1.0, 1.0), uniform(&mut r, &[2, 2, 2, 2], -1.0, 1.0)];
    check(&inputs, seed, |t, v, r| {
        let y = t.residual_add(v[0], v[1])?;
        to_scalar(t, y, r)
    })
}

fn batch_norm_train(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[4, 3, 2, 2], -2.0, 2.0), uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)];
    check(&inputs, seed, |t, v, r| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
        to_scalar(t, y, r)
    })
}

fn batch_norm_eval(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[4, 3, 2, 2], -2.0, 2.0), uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)];
    let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
    check(&inputs, seed, move |t, v, r| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        to_scalar(t, y, r)
    })
}

fn softmax(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[3, 5], -3.0, 3.0)];
    check(&inputs, seed, |t, v, r| {
        let y = t.softmax(v[0])?;
        to_scalar(t, y, r)
    })
}

fn tempered_softmax(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[3, 5], -3.0, 3.0)];
    let tau = r.random_range(0.5..5.0);
    check(&inputs, seed, move |t, v, r| {
        let y = t.tempered_softmax(v[0], tau)?;
        to_scalar(t, y, r)
    })
}

fn cross_entropy(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[4, 5], -3.0, 3.0)];
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    check(&inputs, seed, move |t, v, _| t.cross_entropy(v[0], &labels))
}

fn kl_divergence(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[3, 4], -3.0, 3.0), uniform(&mut r, &[3, 4], -3.0, 3.0)];
    check(&inputs, seed, |t, v, _| {
        let p = t.softmax(v[0])?;
        let q = t.softmax(v[1])?;
        t.kl_divergence(p, q)
    })
}

fn l2_distance(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs = [uniform(&mut r, &[3, 6], -1.0, 1.0), uniform(&mut r, &[3, 6], -1.0, 1.0)];
    check(&inputs, seed, |t, v, _| t.l2_distance_sq(v[0], v[1]))
}

fn undetached(num_classes: usize) -> LossConfig {
    LossConfig {
        detach_teachers: false,
        ..LossConfig::for_classes(num_classes)
    }
}

fn label_loss(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<_> = (0..3).map(|_| uniform(&mut r, &[2, 4], -3.0, 3.0)).collect();
    let labels: Vec<usize> = (0..2).map(|_| r.random_range(0..4)).collect();
    check(&inputs, seed, move |t, v, _| msd::label_loss(t, v, &labels))
}

fn kd_loss(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<_> = (0..3).map(|_| uniform(&mut r, &[2, 4], -3.0, 3.0)).collect();
    let cfg = LossConfig {
        tau: r.random_range(1.0..5.0),
        ..undetached(4)
    };
    check(&inputs, seed, move |t, v, _| msd::kd_loss(t, v, &cfg))
}

fn feature_loss(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<_> = (0..3).map(|_| uniform(&mut r, &[2, 5], -1.0, 1.0)).collect();
    check(&inputs, seed, |t, v, _| msd::feature_loss(t, v, false))
}

fn total_loss_of_outputs(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut inputs: Vec<_> = (0..3).map(|_| uniform(&mut r, &[2, 4], -3.0, 3.0)).collect();
    inputs.extend((0..3).map(|_| uniform(&mut r, &[2, 3], -1.0, 1.0)));
    let labels: Vec<usize> = (0..2).map(|_| r.random_range(0..4)).collect();
    let epoch = r.random_range(0..10);
    check(&inputs, seed, move |t, v, _| {
        let exits: Vec<_> = (0..3)
            .map(|i| multiexit::network::ExitOutput { logits: v[i], feature: v[i + 3] })
            .collect();
        Ok(msd::total_loss(t, &exits, &labels, &undetached(4), epoch, 10)?.0)
    })
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        in_channels: 1,
        stem: StemSpec { channels: 2, kernel: 3, stride: 1 },
        groups: vec![
            GroupSpec { num_blocks: 1, out_channels: 2, first_block_stride: 1 },
            GroupSpec { num_blocks: 1, out_channels: 3, first_block_stride: 2 },
        ],
        num_classes: 3,
        attach_points: None,
    }
}

fn network_loss(net: &MultiExitNetwork<f64>, tape: &mut Tape<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<Var> {
    let out = net.forward_all(tape, x, Mode::Train)?;
    Ok(msd::total_loss(tape, &out.exits, labels, &undetached(3), 1, 4)?.0)
}

/// Whole network plus total loss, checked on 48 sampled parameter entries.
fn network_total_loss(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut net = MultiExitNetwork::<f64>::from_arch(&tiny_arch(), seed)?;
    let x = uniform(&mut r, &[2, 1, 4, 4], -1.0, 1.0);
    let labels = [r.random_range(0..3), r.random_range(0..3)];

    let mut tape = Tape::new();
    let loss = network_loss(&net, &mut tape, &x, &labels)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let mut worst: f64 = 0.0;
    for _ in 0..48 {
        let (id, g) = &grads[r.random_range(0..grads.len())];
        let i = r.random_range(0..g.len());
        let orig = net.params().peek(*id).data()[i];
        let eval = |v: f64, net: &mut MultiExitNetwork<f64>| -> Result<f64> {
            net.params_mut().value_mut(*id).data_mut()[i] = v;
            let mut t = Tape::no_grad();
            let l = network_loss(net, &mut t, &x, &labels)?;
            t.scalar(l)
        };
        let up = eval(orig + DEFAULT_STEP, &mut net)?;
        let down = eval(orig - DEFAULT_STEP, &mut net)?;
        eval(orig, &mut net)?;
        let numeric = (up - down) / (2.0 * DEFAULT_STEP);
        worst = worst.max(relative_error(g.data()[i], numeric));
    }
    Ok(worst)
}

pub fn layer_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "linear", run: linear },
        GradCase { name: "conv2d stride 1", run: conv_s1 },
        GradCase { name: "conv2d stride 2", run: conv_s2 },
        GradCase { name: "relu", run: relu },
        GradCase { name: "max_pool", run: max_pool },
        GradCase { name: "avg_pool", run: avg_pool },
        GradCase { name: "global_avg_pool", run: global_avg_pool },
        GradCase { name: "residual_add", run: residual_add },
        GradCase { name: "batch_norm (train)", run: batch_norm_train },
        GradCase { name: "batch_norm (eval)", run: batch_norm_eval },
    ]
}

pub fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "softmax", run: softmax },
        GradCase { name: "tempered_softmax", run: tempered_softmax },
        GradCase { name: "cross_entropy", run: cross_entropy },
        GradCase { name: "kl_divergence", run: kl_divergence },
        GradCase { name: "l2_distance_sq", run: l2_distance },
        GradCase { name: "label_loss", run: label_loss },
        GradCase { name: "kd_loss", run: kd_loss },
        GradCase { name: "feature_loss", run: feature_loss },
        GradCase { name: "total_loss", run: total_loss_of_outputs },
        GradCase { name: "network + total_loss", run: network_total_loss },
    ]
}

/// Worst relative error of `case` over all seeds.
pub fn worst_over_seeds(case: &GradCase) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        worst = worst.max((case.run)(seed)?);
    }
    Ok(worst)
}
