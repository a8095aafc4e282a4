//! The multi-branch network: wavelet components feed branch subnets of
//! decreasing capacity, whose features are fused by cross aggregation and
//! classified by a softmax head.

mod config;

pub use config::{LastLevelMode, MhnnConfig, Variant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gradient_check_piecewise, one_hot, Checkpoint, Conv1dBlock, GradCheckReport, LinearParams, Mode, NodeId,
    ParamStore, Tape, DEFAULT_ERROR_FLOOR,
};
use crate::tensor::{Real, Tensor};
use crate::wavelet::{haar_filters, mdwd, Matrix};

/// Kernel sizes of the raw-signal branch; identity skips wrap blocks 2–3, 4–5 and 6–7.
pub const RAW_BRANCH_KERNELS: [usize; 7] = [7, 7, 5, 5, 3, 3, 3];
/// Kernel sizes of the finest detail branch and of every NoHFL branch.
pub const STACK_KERNELS: [usize; 3] = [7, 5, 3];
/// Kernel size of the single-block branches between the finest and deepest levels.
pub const MID_KERNEL: usize = 7;
/// Number of fully connected layers in the MLP branch.
pub const MLP_DEPTH: usize = 3;

/// Which decomposition output a branch consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Raw,
    /// Detail matrix of the given level (1-based).
    Detail(usize),
    /// Final approximation.
    Approx,
    /// Deepest detail and final approximation stacked along channels.
    DetailWithApprox(usize),
}

impl Component {
    pub fn label(self) -> String {
        match self {
            Component::Raw => "X".into(),
            Component::Detail(i) => format!("H{i}"),
            Component::Approx => "L".into(),
            Component::DetailWithApprox(i) => format!("H{i}+L"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchNet {
    /// Seven conv blocks with residual pairs.
    Residual(Vec<Conv1dBlock>),
    /// Plain stack of conv blocks.
    Stack(Vec<Conv1dBlock>),
    /// Fully connected layers on the flattened component.
    Mlp(Vec<LinearParams>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub name: String,
    pub source: Component,
    pub net: BranchNet,
}

#[derive(Debug, Clone, PartialEq)]
enum Fusion {
    Cross { aux: Vec<Vec<Conv1dBlock>>, cross: Vec<Vec<Conv1dBlock>> },
    Concat,
}

/// Features of one branch, `B × F × L_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchOutput {
    pub features: NodeId,
}

/// Cross-aggregation result: fused output plus the per-branch intermediates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatedFeature {
    pub output: NodeId,
    pub cross: Vec<NodeId>,
    pub auxiliaries: Vec<NodeId>,
}

/// Node handles of one recorded forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardTrace {
    pub branch_inputs: Vec<NodeId>,
    pub branches: Vec<BranchOutput>,
    pub aggregated: Option<AggregatedFeature>,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Layer layout of a model; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: MhnnConfig,
    branches: Vec<Branch>,
    fusion: Fusion,
    head: LinearParams,
}

fn conv_stack<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    in_channels: usize,
    filters: usize,
    kernels: &[usize],
    rng: &mut R,
) -> Result<Vec<Conv1dBlock>> {
    let mut blocks = Vec::with_capacity(kernels.len());
    let mut c_in = in_channels;
    for (j, &k) in kernels.iter().enumerate() {
        blocks.push(Conv1dBlock::register(store, &format!("{name}.block{j}"), c_in, filters, k, rng)?);
        c_in = filters;
    }
    Ok(blocks)
}

impl Network {
    /// Branch roster for a configuration, in build order.
    pub fn roster(config: &MhnnConfig) -> Vec<Component> {
        let levels = config.levels;
        let mut out = vec![Component::Raw];
        for i in 1..levels {
            out.push(Component::Detail(i));
        }
        out.push(match config.last_level_mode {
            LastLevelMode::ConAc => Component::DetailWithApprox(levels),
            _ => Component::Detail(levels),
        });
        if config.last_level_mode == LastLevelMode::SepAc {
            out.push(Component::Approx);
        }
        out
    }

    fn input_shape(config: &MhnnConfig, source: Component) -> (usize, usize) {
        let c = config.channels;
        if config.variant == Variant::NoMse {
            return (c, config.window);
        }
        let len_at = |level: usize| (0..level).fold(config.window, |l, _| l.div_ceil(2));
        match source {
            Component::Raw => (c, config.window),
            Component::Detail(i) => (c, len_at(i)),
            Component::Approx => (c, len_at(config.levels)),
            Component::DetailWithApprox(i) => (2 * c, len_at(i)),
        }
    }

    fn build<T: Real, R: Rng + ?Sized>(config: &MhnnConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let f = config.filters;
        let deepest = config.levels;
        let mut branches = Vec::new();
        for (idx, source) in Self::roster(config).into_iter().enumerate() {
            let name = format!("branch{idx}_{}", source.label().replace('+', "_"));
            let (c_in, len) = Self::input_shape(config, source);
            let net = if config.variant == Variant::NoHfl {
                BranchNet::Stack(conv_stack(store, &name, c_in, f, &STACK_KERNELS, rng)?)
            } else {
                match source {
                    Component::Raw => BranchNet::Residual(conv_stack(store, &name, c_in, f, &RAW_BRANCH_KERNELS, rng)?),
                    Component::Detail(i) if i < deepest && i == 1 => {
                        BranchNet::Stack(conv_stack(store, &name, c_in, f, &STACK_KERNELS, rng)?)
                    }
                    Component::Detail(i) if i < deepest => {
                        BranchNet::Stack(conv_stack(store, &name, c_in, f, &[MID_KERNEL], rng)?)
                    }
                    _ => {
                        let mut layers = Vec::with_capacity(MLP_DEPTH);
                        let mut width = c_in * len;
                        for j in 0..MLP_DEPTH {
                            layers.push(LinearParams::register(store, &format!("{name}.fc{j}"), width, f, rng));
                            width = f;
                        }
                        BranchNet::Mlp(layers)
                    }
                }
            };
            branches.push(Branch { name, source, net });
        }
        let n = branches.len();
        let fusion = if config.variant == Variant::NoCa {
            Fusion::Concat
        } else {
            let mut aux = Vec::with_capacity(n);
            for i in 0..n {
                aux.push(conv_stack(store, &format!("agg.aux{i}"), f, f, &config.agg_kernels, rng)?);
            }
            let mut cross = Vec::with_capacity(n);
            for i in 0..n {
                cross.push(conv_stack(store, &format!("agg.cross{i}"), n * f, f, &config.agg_kernels, rng)?);
            }
            Fusion::Cross { aux, cross }
        };
        let head_in = match fusion {
            Fusion::Cross { .. } => f,
            Fusion::Concat => n * f,
        };
        let head = LinearParams::register(store, "head", head_in, config.classes, rng);
        Ok(Self { config: config.clone(), branches, fusion, head })
    }

    pub fn config(&self) -> &MhnnConfig {
        &self.config
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Decomposes a `B × C × T` batch and assembles one input tensor per branch.
    pub fn branch_inputs<T: Real>(&self, windows: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let cfg = &self.config;
        windows.expect_rank(3, "window batch")?;
        let (b, c, t) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
        if c != cfg.channels || t != cfg.window {
            return Err(Error::Shape(format!("windows are {c}x{t}, model expects {}x{}", cfg.channels, cfg.window)));
        }
        if cfg.variant == Variant::NoMse {
            return Ok(self.branches.iter().map(|_| windows.clone()).collect());
        }
        let filters = haar_filters::<T>();
        let mut per_branch: Vec<Vec<T>> = self.branches.iter().map(|_| Vec::new()).collect();
        for s in 0..b {
            let x = Matrix::new(c, t, windows.data()[s * c * t..(s + 1) * c * t].to_vec())?;
            let pyramid = mdwd(&x, &filters, cfg.levels)?;
            for (branch, buf) in self.branches.iter().zip(per_branch.iter_mut()) {
                match branch.source {
                    Component::Raw => buf.extend_from_slice(x.as_slice()),
                    Component::Detail(i) => buf.extend_from_slice(pyramid.detail(i).as_slice()),
                    Component::Approx => buf.extend_from_slice(pyramid.approx.as_slice()),
                    Component::DetailWithApprox(i) => {
                        buf.extend_from_slice(pyramid.detail(i).as_slice());
                        buf.extend_from_slice(pyramid.approx.as_slice());
                    }
                }
            }
        }
        self.branches
            .iter()
            .zip(per_branch)
            .map(|(branch, data)| {
                let (c_in, len) = Self::input_shape(cfg, branch.source);
                Tensor::new(&[b, c_in, len], data)
            })
            .collect()
    }

    /// Runs branch `index` on its input node and aligns the result to `B × F × L_c`.
    pub fn run_branch<T: Real, R: Rng + ?Sized>(
        &self,
        index: usize,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        input: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<BranchOutput> {
        let cfg = &self.config;
        let branch = self.branches.get(index).ok_or_else(|| Error::InvalidArgument(format!("no branch {index}")))?;
        let (c_in, len) = Self::input_shape(cfg, branch.source);
        let shape = tape.value(input).shape();
        if shape.len() != 3 || shape[1] != c_in || shape[2] != len {
            return Err(Error::Shape(format!("branch {} expects B x {c_in} x {len}, got {shape:?}", branch.name)));
        }
        let lc = cfg.aligned_length();
        let mom = cfg.bn_momentum;
        let features = match &branch.net {
            BranchNet::Residual(blocks) => {
                let mut h = tape.conv_block(input, store, &blocks[0], mode, mom)?;
                for pair in blocks[1..].chunks(2) {
                    let mut r = h;
                    for block in pair {
                        r = tape.conv_block(r, store, block, mode, mom)?;
                    }
                    h = tape.add(&[r, h])?;
                }
                self.align(tape, h, lc)?
            }
            BranchNet::Stack(blocks) => {
                let mut h = input;
                for block in blocks {
                    h = tape.conv_block(h, store, block, mode, mom)?;
                }
                self.align(tape, h, lc)?
            }
            BranchNet::Mlp(layers) => {
                let mut z = tape.flatten(input);
                for layer in layers {
                    z = tape.linear(z, store, layer)?;
                    z = tape.leaky_relu(z, cfg.leaky_slope)?;
                    z = tape.dropout(z, cfg.dropout, mode, rng)?;
                }
                tape.tile_time(z, lc)?
            }
        };
        Ok(BranchOutput { features })
    }

    fn align<T: Real>(&self, tape: &mut Tape<T>, h: NodeId, lc: usize) -> Result<NodeId> {
        if tape.value(h).shape()[2] == lc {
            Ok(h)
        } else {
            tape.adaptive_avg_pool(h, lc)
        }
    }

    /// `A_i = conv(F_i)`, `H_i = conv(A_j for j ≠ i ⊕ F_i)`, `O = Σ H_i`.
    pub fn cross_aggregate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        branches: &[BranchOutput],
        mode: Mode,
    ) -> Result<AggregatedFeature> {
        let Fusion::Cross { aux, cross } = &self.fusion else {
            return Err(Error::InvalidArgument("this variant has no cross aggregation".into()));
        };
        if branches.len() != aux.len() || branches.len() < 2 {
            return Err(Error::Shape(format!(
                "cross aggregation built for {} branches, got {}",
                aux.len(),
                branches.len()
            )));
        }
        let shape = tape.value(branches[0].features).shape().to_vec();
        if branches.iter().any(|b| tape.value(b.features).shape() != shape.as_slice()) {
            return Err(Error::Shape("branch features differ in shape".into()));
        }
        let mom = self.config.bn_momentum;
        let mut auxiliaries = Vec::with_capacity(branches.len());
        for (b, blocks) in branches.iter().zip(aux) {
            let mut h = b.features;
            for block in blocks {
                h = tape.conv_block(h, store, block, mode, mom)?;
            }
            auxiliaries.push(h);
        }
        let mut crossed = Vec::with_capacity(branches.len());
        for (i, blocks) in cross.iter().enumerate() {
            let mut parts: Vec<NodeId> =
                auxiliaries.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &a)| a).collect();
            parts.push(branches[i].features);
            let mut h = tape.concat_channels(&parts)?;
            for block in blocks {
                h = tape.conv_block(h, store, block, mode, mom)?;
            }
            crossed.push(h);
        }
        let output = tape.add(&crossed)?;
        Ok(AggregatedFeature { output, cross: crossed, auxiliaries })
    }

    /// Global average pooling over time, a linear layer, then softmax.
    /// Returns `(logits, probabilities)`.
    pub fn classify<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let pooled = tape.global_avg_pool(features)?;
        let logits = tape.linear(pooled, store, &self.head)?;
        let probs = tape.softmax(logits)?;
        Ok((logits, probs))
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        windows: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let inputs = self.branch_inputs(windows)?;
        let mut branch_inputs = Vec::with_capacity(inputs.len());
        let mut branches = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.into_iter().enumerate() {
            let node = tape.input(input);
            branch_inputs.push(node);
            branches.push(self.run_branch(i, tape, store, node, mode, rng)?);
        }
        let (fused, aggregated) = match self.fusion {
            Fusion::Cross { .. } => {
                let agg = self.cross_aggregate(tape, store, &branches, mode)?;
                (agg.output, Some(agg))
            }
            Fusion::Concat => {
                let nodes: Vec<NodeId> = branches.iter().map(|b| b.features).collect();
                (tape.concat_channels(&nodes)?, None)
            }
        };
        let (logits, probs) = self.classify(tape, store, fused)?;
        Ok(ForwardTrace { branch_inputs, branches, aggregated, logits, probs })
    }
}

/// A network layout together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub network: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model; parameters are drawn from `rng` in
    /// branch order, then fusion, then head.
    pub fn build<R: Rng + ?Sized>(config: &MhnnConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = Network::build(config, &mut params, rng)?;
        Ok(Self { network, params })
    }

    pub fn config(&self) -> &MhnnConfig {
        &self.network.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        windows: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        self.network.forward(tape, &mut self.params, windows, mode, rng)
    }

    /// Eval-mode class probabilities, `B × K`, computed in chunks of `batch_size`.
    pub fn predict_proba(&mut self, windows: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
        windows.expect_rank(3, "window batch")?;
        let (n, c, t) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
        let k = self.config().classes;
        let per = c * t;
        let mut out = Vec::with_capacity(n * k);
        let mut rng = idle_rng();
        for start in (0..n).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(n);
            let chunk = Tensor::new(&[end - start, c, t], windows.data()[start * per..end * per].to_vec())?;
            let mut tape = Tape::new();
            let trace = self.forward(&mut tape, &chunk, Mode::Eval, &mut rng)?;
            out.extend_from_slice(tape.value(trace.probs).data());
        }
        Tensor::new(&[n, k], out)
    }

    /// Eval-mode predicted class per window.
    pub fn predict(&mut self, windows: &Tensor<T>, batch_size: usize) -> Result<Vec<usize>> {
        let probs = self.predict_proba(windows, batch_size)?;
        let k = probs.shape()[1];
        Ok(probs.data().chunks(k).map(argmax).collect())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(&self.params, serde_json::to_value(self.config())?, extra))
    }

    /// Rebuilds the layout from the stored config and loads the stored values.
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let config: MhnnConfig = serde_json::from_value(checkpoint.header.config.clone())?;
        let mut rng = idle_rng();
        let mut model = Self::build(&config, &mut rng)?;
        checkpoint.load_into(&mut model.params)?;
        Ok(model)
    }
}

impl Model<f64> {
    /// Compares analytic gradients with central differences, skipping
    /// elements whose perturbation moves a rectifier across zero. In train
    /// mode every evaluation replays the same dropout masks and batch
    /// statistics are used.
    pub fn gradient_check(
        &mut self,
        windows: &Tensor<f64>,
        labels: &[usize],
        opts: GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let targets = one_hot::<f64>(labels, self.network.config.classes)?;
        let network = &self.network;
        let mode = opts.mode;
        gradient_check_piecewise(
            &mut self.params,
            |store, with_grad| {
                let mut tape = Tape::new();
                let mut rng = idle_rng();
                let trace = network.forward(&mut tape, store, windows, mode, &mut rng)?;
                let loss = tape.softmax_cross_entropy(trace.logits, &targets)?;
                if with_grad {
                    tape.backward(loss, store)?;
                }
                Ok((tape.value(loss).data()[0], tape.activation_pattern()))
            },
            opts.h,
            opts.stride,
            opts.floor,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Checks every `stride`-th element of each parameter.
    pub stride: usize,
    pub mode: Mode,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, stride: 1, mode: Mode::Eval, floor: DEFAULT_ERROR_FLOOR }
    }
}

/// Placeholder stream for eval-mode passes, which draw no random numbers.
fn idle_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
