use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{validate_attach_points, ArchConfig, BackboneSpec, BlockShape, BranchSpec};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};

/// Running-average factor of normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, trainable parameters.
    Train,
    /// Running statistics, nothing recorded for gradients.
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    pub(crate) conv: ParamId,
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
    pub(crate) norm: usize,
    pub(crate) stride: usize,
    pub(crate) padding: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub(crate) conv1: ConvBn,
    pub(crate) conv2: ConvBn,
    pub(crate) shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
pub(crate) struct Head {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub(crate) spec: BranchSpec,
    pub(crate) blocks: Vec<ResBlock>,
    pub(crate) head: Head,
}

/// Running mean and variance of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch statistics observed by a training-mode pass, to be folded into
/// the running estimates with [`MultiExitNetwork::apply_norm_updates`].
#[derive(Debug, Clone)]
pub struct NormUpdate<T> {
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Logits `[B, M]` and pre-classifier features `[B, C]` of one exit.
#[derive(Debug, Clone, Copy)]
pub struct ExitOutput {
    pub logits: Var,
    pub feature: Var,
}

#[derive(Debug)]
pub struct ForwardOutput<T> {
    pub exits: Vec<ExitOutput>,
    pub norm_updates: Vec<NormUpdate<T>>,
}

/// A group-structured residual backbone plus early-exit branches.
///
/// Classifiers are numbered `1..=N` from shallow to deep; classifier `N`
/// is the backbone's own head.
#[derive(Debug, Clone)]
pub struct MultiExitNetwork<T> {
    backbone: BackboneSpec,
    pub(crate) stem: ConvBn,
    pub(crate) groups: Vec<Vec<ResBlock>>,
    pub(crate) head: Head,
    pub(crate) branches: Vec<Branch>,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    running: &'a mut Vec<RunningStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> ConvBn {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w: Vec<T> = (0..cout * cin * kernel * kernel)
            .map(|_| T::of(normal.sample(&mut self.rng)))
            .collect();
        let conv = self.params.push(
            format!("{name}.conv.weight"),
            ParamKind::ConvWeight,
            Tensor::new(vec![cout, cin, kernel, kernel], w).expect("conv shape"),
        );
        let gamma = self.params.push(
            format!("{name}.bn.weight"),
            ParamKind::NormScale,
            Tensor::full(&[cout], T::one()),
        );
        let beta = self.params.push(format!("{name}.bn.bias"), ParamKind::NormShift, Tensor::zeros(&[cout]));
        self.running.push(RunningStats {
            name: format!("{name}.bn"),
            mean: vec![T::zero(); cout],
            var: vec![T::one(); cout],
        });
        ConvBn {
            conv,
            gamma,
            beta,
            norm: self.running.len() - 1,
            stride,
            padding: kernel / 2,
        }
    }

    fn block(&mut self, name: &str, cin: usize, shape: BlockShape) -> ResBlock {
        let conv1 = self.conv_bn(&format!("{name}.conv1"), cin, shape.out_channels, 3, shape.stride);
        let conv2 = self.conv_bn(&format!("{name}.conv2"), shape.out_channels, shape.out_channels, 3, 1);
        let shortcut = (shape.stride != 1 || cin != shape.out_channels)
            .then(|| self.conv_bn(&format!("{name}.shortcut"), cin, shape.out_channels, 1, shape.stride));
        ResBlock { conv1, conv2, shortcut }
    }

    fn head(&mut self, name: &str, features: usize, classes: usize) -> Head {
        let bound = 1.0 / (features as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::of(self.rng.random_range(-bound..=bound))).collect()
        };
        let w = uniform(classes * features);
        let b = uniform(classes);
        let weight = self.params.push(
            format!("{name}.fc.weight"),
            ParamKind::LinearWeight,
            Tensor::new(vec![classes, features], w).expect("fc shape"),
        );
        let bias = self.params.push(
            format!("{name}.fc.bias"),
            ParamKind::LinearBias,
            Tensor::new(vec![classes], b).expect("fc shape"),
        );
        Head { weight, bias }
    }
}

impl<T: Real> MultiExitNetwork<T> {
    /// Stem, residual groups and a pooled fully-connected head (`N = 1`).
    pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut b = Builder {
            params: &mut params,
            running: &mut running,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let stem = b.conv_bn("stem", spec.in_channels, spec.stem.channels, spec.stem.kernel, spec.stem.stride);
        let mut cin = spec.stem.channels;
        let mut groups = Vec::with_capacity(spec.groups.len());
        for (gi, grp) in spec.groups.iter().enumerate() {
            let mut blocks = Vec::with_capacity(grp.num_blocks);
            for bi in 0..grp.num_blocks {
                let stride = if bi == 0 { grp.first_block_stride } else { 1 };
                let shape = BlockShape { out_channels: grp.out_channels, stride };
                blocks.push(b.block(&format!("group{}.block{bi}", gi + 1), cin, shape));
                cin = grp.out_channels;
            }
            groups.push(blocks);
        }
        let head = b.head("head", cin, spec.num_classes);
        Ok(MultiExitNetwork {
            backbone: spec.clone(),
            stem,
            groups,
            head,
            branches: Vec::new(),
            params,
            running,
        })
    }

    /// Adds one sampled branch per attach point. Existing parameters are
    /// untouched; branch parameters are freshly initialized from `seed`.
    pub fn augment_with_branches(mut self, attach_points: &[usize], seed: u64) -> Result<Self> {
        validate_attach_points(&self.backbone, attach_points)?;
        if let Some(existing) = self.branches.first() {
            return Err(Error::Validation(format!(
                "network already has branches (first attached after group {})",
                existing.spec.attach_after_group
            )));
        }
        let mut b = Builder {
            params: &mut self.params,
            running: &mut self.running,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut branches = Vec::with_capacity(attach_points.len());
        for &g in attach_points {
            let spec = BranchSpec::sample(&self.backbone, g)?;
            let mut cin = self.backbone.groups[g - 1].out_channels;
            let mut blocks = Vec::with_capacity(spec.sampled_blocks.len());
            for (k, &shape) in spec.sampled_blocks.iter().enumerate() {
                blocks.push(b.block(&format!("branch{g}.block{k}"), cin, shape));
                cin = shape.out_channels;
            }
            if cin != self.backbone.final_channels() {
                return Err(Error::Validation(format!(
                    "branch after group {g} ends with {cin} channels, backbone with {}",
                    self.backbone.final_channels()
                )));
            }
            let head = b.head(&format!("branch{g}"), cin, self.backbone.num_classes);
            branches.push(Branch { spec, blocks, head });
        }
        self.branches = branches;
        Ok(self)
    }

    /// Builds, augments and validates a network from its JSON architecture.
    pub fn from_arch(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let net = Self::build_backbone(&arch.backbone(), seed)?;
        let points = arch.resolved_attach_points();
        if points.is_empty() {
            return Ok(net);
        }
        net.augment_with_branches(&points, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
    }

    pub fn architecture(&self) -> ArchConfig {
        ArchConfig::from_parts(&self.backbone, &self.attach_points())
    }

    pub fn backbone(&self) -> &BackboneSpec {
        &self.backbone
    }

    pub fn attach_points(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.spec.attach_after_group).collect()
    }

    pub fn branch_specs(&self) -> Vec<&BranchSpec> {
        self.branches.iter().map(|b| &b.spec).collect()
    }

    /// Number of classifiers `N`.
    pub fn num_exits(&self) -> usize {
        self.branches.len() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes
    }

    pub fn feature_len(&self) -> usize {
        self.backbone.final_channels()
    }

    /// Backbone group (1-based) after which classifier `exit` reads its input;
    /// the deepest classifier reads after the last group.
    pub fn exit_group(&self, exit: usize) -> Result<usize> {
        self.check_exit(exit)?;
        Ok(if exit == self.num_exits() {
            self.backbone.groups.len()
        } else {
            self.branches[exit - 1].spec.attach_after_group
        })
    }

    pub(crate) fn check_exit(&self, exit: usize) -> Result<()> {
        if exit == 0 || exit > self.num_exits() {
            return Err(Error::Index {
                what: "exit",
                index: exit,
                limit: self.num_exits(),
            });
        }
        Ok(())
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Parameter ids used by backbone group `group` (1-based).
    pub fn group_param_ids(&self, group: usize) -> Vec<ParamId> {
        self.groups[group - 1].iter().flat_map(block_params).collect()
    }

    /// Parameter ids of branch `index` (0-based, in attach order).
    pub fn branch_param_ids(&self, index: usize) -> Vec<ParamId> {
        let br = &self.branches[index];
        let mut ids: Vec<ParamId> = br.blocks.iter().flat_map(block_params).collect();
        ids.extend([br.head.weight, br.head.bias]);
        ids
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        vec![self.head.weight, self.head.bias]
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<T>]) {
        let m = T::of(NORM_MOMENTUM);
        let r = T::one() - m;
        for u in updates {
            let stats = &mut self.running[u.layer];
            for (run, &batch) in stats.mean.iter_mut().zip(&u.mean) {
                *run = m * *run + r * batch;
            }
            for (run, &batch) in stats.var.iter_mut().zip(&u.var) {
                *run = m * *run + r * batch;
            }
        }
    }

    /// Starts an incremental pass that evaluates exits in increasing order,
    /// computing each backbone group at most once.
    pub fn walker<'a>(&'a self, tape: &'a mut Tape<T>, input: &Tensor<T>, mode: Mode) -> Result<ExitWalker<'a, T>> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.backbone.in_channels || shape[0] == 0 {
            return Err(Error::shape(format!(
                "network input must be [B, {}, H, W], got {shape:?}",
                self.backbone.in_channels
            )));
        }
        let x = tape.constant(input.clone());
        let mut pass = Pass {
            net: self,
            tape,
            mode,
            updates: Vec::new(),
        };
        let trunk = pass.conv_bn(&self.stem, x, true)?;
        Ok(ExitWalker {
            pass,
            trunk,
            groups_done: 0,
            next_exit: 1,
        })
    }

    /// Every classifier's `(logits, feature)`, shallow to deep.
    pub fn forward_all(&self, tape: &mut Tape<T>, input: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        let mut walker = self.walker(tape, input, mode)?;
        let exits = (1..=self.num_exits())
            .map(|n| walker.exit(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            exits,
            norm_updates: walker.finish(),
        })
    }

    /// Only what classifier `exit` needs: stem, groups up to its attach
    /// point, and its own branch.
    pub fn forward_prefix(
        &self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        exit: usize,
        mode: Mode,
    ) -> Result<(ExitOutput, Vec<NormUpdate<T>>)> {
        self.check_exit(exit)?;
        let mut walker = self.walker(tape, input, mode)?;
        let out = walker.exit(exit)?;
        Ok((out, walker.finish()))
    }

    /// Eval-mode logits and features of every exit as plain tensors.
    pub fn eval_all(&self, input: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut tape = Tape::no_grad();
        let out = self.forward_all(&mut tape, input, Mode::Eval)?;
        Ok(out
            .exits
            .iter()
            .map(|e| (tape.value(e.logits).clone(), tape.value(e.feature).clone()))
            .collect())
    }
}

fn block_params(b: &ResBlock) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for cb in [Some(&b.conv1), Some(&b.conv2), b.shortcut.as_ref()].into_iter().flatten() {
        ids.extend([cb.conv, cb.gamma, cb.beta]);
    }
    ids
}

struct Pass<'a, T> {
    net: &'a MultiExitNetwork<T>,
    tape: &'a mut Tape<T>,
    mode: Mode,
    updates: Vec<NormUpdate<T>>,
}

impl<T: Real> Pass<'_, T> {
    fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(&self.net.params, id, self.mode == Mode::Train)
    }

    fn conv_bn(&mut self, cb: &ConvBn, x: Var, relu: bool) -> Result<Var> {
        let w = self.param(cb.conv);
        let gamma = self.param(cb.gamma);
        let beta = self.param(cb.beta);
        let y = self.tape.conv2d(x, w, cb.stride, cb.padding)?;
        let eps = T::of(NORM_EPS);
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(y, gamma, beta, eps)?;
                self.updates.push(NormUpdate {
                    layer: cb.norm,
                    mean: stats.mean,
                    var: stats.var,
                });
                y
            }
            Mode::Eval => {
                let run = &self.net.running[cb.norm];
                self.tape.batch_norm_eval(y, gamma, beta, &run.mean, &run.var, eps)?
            }
        };
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn block(&mut self, b: &ResBlock, x: Var) -> Result<Var> {
        let h = self.conv_bn(&b.conv1, x, true)?;
        let h = self.conv_bn(&b.conv2, h, false)?;
        let skip = match &b.shortcut {
            Some(cb) => self.conv_bn(cb, x, false)?,
            None => x,
        };
        let y = self.tape.residual_add(h, skip)?;
        Ok(self.tape.relu(y))
    }

    fn head(&mut self, head: &Head, x: Var) -> Result<ExitOutput> {
        let feature = self.tape.global_avg_pool(x)?;
        let w = self.param(head.weight);
        let b = self.param(head.bias);
        let logits = self.tape.linear(feature, w, Some(b))?;
        Ok(ExitOutput { logits, feature })
    }
}

/// Incremental evaluator over a network's exits; see
/// [`MultiExitNetwork::walker`].
pub struct ExitWalker<'a, T> {
    pass: Pass<'a, T>,
    trunk: Var,
    groups_done: usize,
    next_exit: usize,
}

impl<T: Real> ExitWalker<'_, T> {
    /// Evaluates classifier `exit`, which must not precede an exit already taken.
    pub fn exit(&mut self, exit: usize) -> Result<ExitOutput> {
        let net = self.pass.net;
        net.check_exit(exit)?;
        if exit < self.next_exit {
            return Err(Error::Contract(format!(
                "exit {exit} requested after exit {}",
                self.next_exit - 1
            )));
        }
        let group = net.exit_group(exit)?;
        while self.groups_done < group {
            for b in &net.groups[self.groups_done] {
                self.trunk = self.pass.block(b, self.trunk)?;
            }
            self.groups_done += 1;
        }
        self.next_exit = exit + 1;
        if exit == net.num_exits() {
            return self.pass.head(&net.head, self.trunk);
        }
        let branch = &net.branches[exit - 1];
        let mut h = self.trunk;
        for b in &branch.blocks {
            h = self.pass.block(b, h)?;
        }
        self.pass.head(&branch.head, h)
    }

    pub fn tape(&self) -> &Tape<T> {
        self.pass.tape
    }

    pub fn finish(self) -> Vec<NormUpdate<T>> {
        self.pass.updates
    }
}
